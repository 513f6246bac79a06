//! Deterministic sparse fault injection.
//!
//! Two fault models, matching the two places a linear layer can go wrong:
//!
//! * *memory faults*: a sparse matrix `E` added to the stored weights
//!   (`H_tilde = H + E`) — bit flips or stuck cells in the weight buffer;
//! * *datapath faults*: a sparse vector `e` added to the layer output
//!   (`y = H_tilde x + e`) — transient arithmetic errors during the
//!   multiply itself.
//!
//! Supports are drawn uniformly without replacement (partial Fisher–Yates
//! over the flattened index range), values i.i.d. `N(0, sigma^2)` with exact
//! zeros redrawn so that the recorded support is exactly the set of
//! perturbed cells. Everything is keyed by a seed: the same spec reproduces
//! the same faults on any platform.

use crate::numkernel::{Matrix, Vector};
use crate::rng::{streams, Stream};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("invalid fault spec: {0}")]
    InvalidSpec(String),
}

/// Sparse additive corruption of a stored weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryFaultSpec {
    /// Errors per column group when `group_size` is set, total otherwise.
    pub num_errors: usize,
    /// Standard deviation of the error values.
    pub sigma: f64,
    pub seed: u64,
    /// Columns per group; `None` draws the support over the whole matrix.
    pub group_size: Option<usize>,
}

/// Sparse additive corruption of a layer output vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DatapathFaultSpec {
    pub num_errors: usize,
    pub sigma: f64,
    pub seed: u64,
}

/// The exact memory corruption injected in one trial.
#[derive(Clone, Debug)]
pub struct MemoryFaultRecord {
    /// Dense `p x q` matrix, zero off the support.
    pub error: Matrix,
    /// `(row, col)` of every perturbed cell, in draw order.
    pub support: Vec<(usize, usize)>,
}

/// The exact datapath corruption injected in one trial.
#[derive(Clone, Debug)]
pub struct DatapathFaultRecord {
    /// Dense length-`p` vector, zero off the support.
    pub error: Vector,
    pub support: Vec<usize>,
}

/// Both halves of one trial's corruption.
#[derive(Clone, Debug)]
pub struct FaultRecord {
    pub memory: MemoryFaultRecord,
    pub datapath: DatapathFaultRecord,
}

/// Draw a nonzero `N(0, sigma^2)` value. Exact zeros are redrawn so that
/// membership in the support always means an actual perturbation.
fn nonzero_normal(stream: &mut Stream, sigma: f64) -> f64 {
    loop {
        let v = stream.normal_scaled(sigma);
        if v != 0.0 {
            return v;
        }
    }
}

/// Corrupt `h` according to `spec`: returns `(h + E, record)` where the
/// record holds `E` and its support.
pub fn inject_memory(
    h: &Matrix,
    spec: &MemoryFaultSpec,
) -> Result<(Matrix, MemoryFaultRecord), FaultError> {
    let (p, q) = h.shape();
    if !(spec.sigma.is_finite() && spec.sigma >= 0.0) {
        return Err(FaultError::InvalidSpec(format!("sigma {}", spec.sigma)));
    }
    let gc = match spec.group_size {
        Some(gs) => {
            if gs == 0 || q % gs != 0 {
                return Err(FaultError::InvalidSpec(format!(
                    "group size {gs} does not divide {q} columns"
                )));
            }
            gs
        }
        None => q,
    };
    if spec.num_errors > p * gc {
        return Err(FaultError::InvalidSpec(format!(
            "{} errors per group exceed the {} cells of a {p}x{gc} group",
            spec.num_errors,
            p * gc
        )));
    }
    let num_groups = q / gc;
    let mut stream = Stream::new(spec.seed, streams::MEMORY_FAULTS);
    let mut error = Matrix::zeros(p, q);
    let mut support = Vec::with_capacity(spec.num_errors * num_groups);
    for g in 0..num_groups {
        for flat in stream.sample_distinct(spec.num_errors, p * gc) {
            let (i, j_local) = (flat / gc, flat % gc);
            let j = g * gc + j_local;
            error[(i, j)] = nonzero_normal(&mut stream, spec.sigma);
            support.push((i, j));
        }
    }
    let mut h_tilde = h.clone();
    for &(i, j) in &support {
        h_tilde[(i, j)] = h.at(i, j) + error.at(i, j);
    }
    Ok((h_tilde, MemoryFaultRecord { error, support }))
}

/// Corrupt a layer output according to `spec`: returns `(y + e, record)`.
pub fn inject_datapath(
    y: &Vector,
    spec: &DatapathFaultSpec,
) -> Result<(Vector, DatapathFaultRecord), FaultError> {
    let p = y.len();
    if !(spec.sigma.is_finite() && spec.sigma >= 0.0) {
        return Err(FaultError::InvalidSpec(format!("sigma {}", spec.sigma)));
    }
    if spec.num_errors > p {
        return Err(FaultError::InvalidSpec(format!(
            "{} errors exceed the {p} entries of the output",
            spec.num_errors
        )));
    }
    let mut stream = Stream::new(spec.seed, streams::DATAPATH_FAULTS);
    let mut error = Vector::zeros(p);
    let support = stream.sample_distinct(spec.num_errors, p);
    for &i in &support {
        error[i] = nonzero_normal(&mut stream, spec.sigma);
    }
    let mut y_tilde = y.clone();
    for &i in &support {
        y_tilde[i] = y.at(i) + error.at(i);
    }
    Ok((y_tilde, DatapathFaultRecord { error, support }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(seed: u64, p: usize, q: usize) -> Matrix {
        let mut s = Stream::new(seed, 98);
        Matrix::from_fn(p, q, |_, _| s.normal())
    }

    #[test]
    fn zero_errors_is_identity() {
        let h = random_matrix(1, 5, 4);
        let spec =
            MemoryFaultSpec { num_errors: 0, sigma: 1.0, seed: 2, group_size: None };
        let (ht, rec) = inject_memory(&h, &spec).unwrap();
        assert_eq!(ht, h);
        assert!(rec.support.is_empty());
        assert_eq!(rec.error.max_abs(), 0.0);
        let y = Vector::from_fn(5, |i| i as f64);
        let dspec = DatapathFaultSpec { num_errors: 0, sigma: 1.0, seed: 2 };
        let (yt, drec) = inject_datapath(&y, &dspec).unwrap();
        assert_eq!(yt, y);
        assert!(drec.support.is_empty());
    }

    #[test]
    fn per_group_counts_add_up() {
        // 256x784 in groups of 14: 5 per group -> 280 distinct cells.
        let h = Matrix::zeros(256, 784);
        let spec =
            MemoryFaultSpec { num_errors: 5, sigma: 2.0, seed: 7, group_size: Some(14) };
        let (_, rec) = inject_memory(&h, &spec).unwrap();
        assert_eq!(rec.support.len(), 280);
        let mut cells = rec.support.clone();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), 280, "support has duplicate cells");
        // Each group holds exactly 5.
        for g in 0..56 {
            let in_group =
                rec.support.iter().filter(|&&(_, j)| j / 14 == g).count();
            assert_eq!(in_group, 5, "group {g}");
        }
    }

    #[test]
    fn injection_is_deterministic() {
        let h = random_matrix(3, 10, 8);
        let spec =
            MemoryFaultSpec { num_errors: 6, sigma: 0.5, seed: 11, group_size: Some(4) };
        let (a, ra) = inject_memory(&h, &spec).unwrap();
        let (b, rb) = inject_memory(&h, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.support, rb.support);
        assert_eq!(ra.error, rb.error);
        // A different seed moves the support.
        let spec2 = MemoryFaultSpec { seed: 12, ..spec };
        let (_, rc) = inject_memory(&h, &spec2).unwrap();
        assert_ne!(ra.support, rc.support);
    }

    #[test]
    fn injection_is_exactly_reversible() {
        let h = random_matrix(5, 9, 7);
        let spec =
            MemoryFaultSpec { num_errors: 10, sigma: 3.0, seed: 21, group_size: None };
        let (ht, rec) = inject_memory(&h, &spec).unwrap();
        let on_support: std::collections::HashSet<(usize, usize)> =
            rec.support.iter().copied().collect();
        for i in 0..9 {
            for j in 0..7 {
                if on_support.contains(&(i, j)) {
                    // The perturbed cell is exactly the f64 sum.
                    assert_eq!(ht.at(i, j), h.at(i, j) + rec.error.at(i, j));
                    assert_ne!(rec.error.at(i, j), 0.0);
                } else {
                    assert_eq!(ht.at(i, j), h.at(i, j));
                    assert_eq!(rec.error.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn datapath_positions_and_reversal() {
        let y = Vector::from_fn(10, |i| (i as f64).sin());
        let spec = DatapathFaultSpec { num_errors: 2, sigma: 0.01, seed: 5 };
        let (yt, rec) = inject_datapath(&y, &spec).unwrap();
        assert_eq!(rec.support.len(), 2);
        assert_ne!(rec.support[0], rec.support[1]);
        for i in 0..10 {
            if rec.support.contains(&i) {
                assert_eq!(yt.at(i), y.at(i) + rec.error.at(i));
                assert_ne!(rec.error.at(i), 0.0);
            } else {
                assert_eq!(yt.at(i), y.at(i));
            }
        }
    }

    #[test]
    fn value_moments_match_sigma() {
        // Pool error values across many seeds: mean 0, variance sigma^2.
        let h = Matrix::zeros(20, 20);
        let sigma = 2.0;
        let mut values = Vec::new();
        for seed in 0..250 {
            let spec = MemoryFaultSpec { num_errors: 40, sigma, seed, group_size: None };
            let (_, rec) = inject_memory(&h, &spec).unwrap();
            for &(i, j) in &rec.support {
                values.push(rec.error.at(i, j));
            }
        }
        let n = values.len() as f64;
        assert!(n >= 1e4);
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // sd of the mean is sigma/sqrt(n) = 0.02; allow 4 sigma.
        assert!(mean.abs() < 0.08, "mean {mean}");
        assert!((var - sigma * sigma).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn support_is_roughly_uniform() {
        let h = Matrix::zeros(3, 4);
        let mut counts = [0u32; 12];
        for seed in 0..2000 {
            let spec = MemoryFaultSpec { num_errors: 3, sigma: 1.0, seed, group_size: None };
            let (_, rec) = inject_memory(&h, &spec).unwrap();
            for (i, j) in rec.support {
                counts[i * 4 + j] += 1;
            }
        }
        // Expected 500 per cell, sd ~ sqrt(500 * 0.75) ~ 19.4; allow 6 sigma.
        for (c, &n) in counts.iter().enumerate() {
            assert!((n as f64 - 500.0).abs() < 120.0, "cell {c}: {n}");
        }
    }

    #[test]
    fn rejects_impossible_specs() {
        let h = Matrix::zeros(4, 4);
        let too_many =
            MemoryFaultSpec { num_errors: 17, sigma: 1.0, seed: 0, group_size: None };
        assert!(inject_memory(&h, &too_many).is_err());
        let bad_group =
            MemoryFaultSpec { num_errors: 1, sigma: 1.0, seed: 0, group_size: Some(3) };
        assert!(inject_memory(&h, &bad_group).is_err());
        let bad_sigma =
            MemoryFaultSpec { num_errors: 1, sigma: f64::NAN, seed: 0, group_size: None };
        assert!(inject_memory(&h, &bad_sigma).is_err());
        let y = Vector::zeros(3);
        let too_many_dp = DatapathFaultSpec { num_errors: 4, sigma: 1.0, seed: 0 };
        assert!(inject_datapath(&y, &too_many_dp).is_err());
    }
}
