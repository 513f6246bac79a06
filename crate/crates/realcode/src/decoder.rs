//! Fault detection and correction for protected layers.
//!
//! A protected layer carries two kinds of redundancy. Row constraints
//! (`a' H = 0`) survive matrix-vector products, so they can be checked on a
//! layer *output*: for `y = H x` the syndrome `a' y` vanishes no matter what
//! `x` was, and a nonzero value convicts the evaluation without re-running
//! it. General constraints (`<B_j, H> = 0`) hold only for the stored
//! weights, and together with the row constraints they pin down a sparse
//! memory error `E` in `H_tilde = H + E` through l1 minimization.
//!
//! The full pipeline for one observed output is [`correct_layer`]:
//!
//! 1. [`detect`] — syndromes on `y`; when none fire, the output is already
//!    trustworthy and is returned untouched,
//! 2. [`correct_memory`] — one basis-pursuit program per column group
//!    recovers the weight error `E_hat`,
//! 3. the datapath error follows in closed form, `e_hat = y - H_tilde x`,
//! 4. the repaired output is `y - E_hat x - e_hat`.
//!
//! [`joint_correct`] instead estimates `(E, e)` in one program. In its
//! default reading the output constraint `y = H_tilde x + e` determines `e`
//! outright and the program decomposes into the per-group memory programs,
//! so it is solved that way. A configuration switch selects the non-literal
//! reading `y = (H_tilde - E) x + e` — the product computed with repaired
//! weights — which couples every unknown into one LP and is practical only
//! for small layers.

use crate::codec::{CodecError, ConstraintSet};
use crate::lpsolve::{build_correction_system, solve, L1Problem, LpError, SolveOptions, SolveStatus};
use crate::numkernel::{norm2, Matrix, NumError, Vector};
use rayon::prelude::*;
use thiserror::Error;

/// Default threshold on the normalized syndrome. The projection residual of
/// encoded weights stays below 1e-9 relative, and rounding in the syndrome
/// dot products sits far lower, so anything above this is a real fault.
pub const DETECT_TOL: f64 = 1e-6;

/// A group whose constraint right-hand side is this small (relative to the
/// block norm) is accepted as fault-free without running its program: zero
/// is then feasible with objective zero, hence optimal.
const GROUP_CLEAN_TOL: f64 = 1e-9;

/// Entry cap for the monolithic joint system.
const COUPLED_ENTRY_CAP: usize = 40_000_000;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("detection requires at least one row constraint")]
    NoRowConstraints,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("joint system too large: {0}")]
    TooLarge(String),
}

/// Outcome of checking a layer output against the row constraints.
#[derive(Clone, Debug)]
pub struct DetectionReport {
    /// Raw syndrome values `a_i' y`, one per row constraint.
    pub syndromes: Vector,
    /// `max_i |a_i' y| / (||a_i|| ||y||)`; zero for `y = 0`.
    pub max_normalized_syndrome: f64,
    /// True exactly when `max_normalized_syndrome` exceeds the tolerance.
    pub detected: bool,
}

/// Check the output `y` of a protected layer. Detection is sound up to
/// rounding — for clean weights and a clean datapath every syndrome is zero
/// by construction — and any error outside the measure-zero set aligned
/// with the constraints drives some syndrome away from zero.
pub fn detect(y: &Vector, cs: &ConstraintSet, tol: f64) -> Result<DetectionReport, DecodeError> {
    let p = cs.shape().0;
    if y.len() != p {
        return Err(DecodeError::Shape(format!(
            "output has {} entries, layer has {} rows",
            y.len(),
            p
        )));
    }
    let s = cs.row_matrix().rows();
    if s == 0 {
        return Err(DecodeError::NoRowConstraints);
    }
    let y_norm = y.norm2();
    let mut syndromes = Vector::zeros(s);
    let mut max_normalized = 0.0f64;
    for i in 0..s {
        let a_row = cs.row_matrix().row(i);
        let raw = crate::numkernel::dot(a_row, y.as_slice());
        syndromes[i] = raw;
        if y_norm > 0.0 {
            max_normalized = max_normalized.max(raw.abs() / (norm2(a_row) * y_norm));
        }
    }
    Ok(DetectionReport { syndromes, max_normalized_syndrome: max_normalized, detected: max_normalized > tol })
}

/// Recover a sparse memory error from the stored weights alone.
///
/// Each column group is an independent program, so the groups are solved in
/// parallel and reassembled in order. Returns the estimated error (same
/// shape as the weights) and one solver status per group; groups that did
/// not reach `Optimal` still contribute their best point, leaving the
/// caller to judge by status. A group whose right-hand side already
/// vanishes relative to its block norm is fault-free and is reported
/// optimal without running its program.
pub fn correct_memory(
    h_tilde: &Matrix,
    cs: &ConstraintSet,
    opts: &SolveOptions,
) -> Result<(Matrix, Vec<SolveStatus>), DecodeError> {
    if h_tilde.shape() != cs.shape() {
        return Err(DecodeError::Shape(format!(
            "weights are {:?}, constraints describe {:?}",
            h_tilde.shape(),
            cs.shape()
        )));
    }
    let p = h_tilde.rows();
    let gc = cs.group_cols();
    let per_group: Vec<(Option<Vector>, SolveStatus)> = (0..cs.num_groups())
        .into_par_iter()
        .map(|g| -> Result<(Option<Vector>, SolveStatus), DecodeError> {
            let problem = build_correction_system(h_tilde, cs, g)?;
            let block = h_tilde.columns(g * gc, (g + 1) * gc);
            let gate = GROUP_CLEAN_TOL
                * (1.0 + (problem.a.cols() as f64).sqrt() * block.frobenius_norm());
            if problem.b.norm_inf() <= gate {
                return Ok((None, SolveStatus::Optimal));
            }
            let sol = solve(&problem, opts);
            Ok((Some(sol.z), sol.status))
        })
        .collect::<Result<_, _>>()?;
    let mut e_hat = Matrix::zeros(p, h_tilde.cols());
    let mut statuses = Vec::with_capacity(cs.num_groups());
    for (g, (z, status)) in per_group.into_iter().enumerate() {
        statuses.push(status);
        if let Some(z) = z {
            let e_block = Matrix::from_col_stack(p, gc, &z)?;
            for c in 0..gc {
                for r in 0..p {
                    e_hat[(r, g * gc + c)] = e_block.at(r, c);
                }
            }
        }
    }
    Ok((e_hat, statuses))
}

/// Everything a layer correction produces.
#[derive(Clone, Debug)]
pub struct CorrectionResult {
    /// Estimated memory error, same shape as the weights.
    pub e_hat: Matrix,
    /// Repaired weights `h_tilde - e_hat`.
    pub h_hat: Matrix,
    /// Estimated datapath (output) error.
    pub e_vec_hat: Vector,
    /// Repaired layer output.
    pub y_corrected: Vector,
    /// Solver status per column group (one entry for the coupled joint
    /// formulation, which solves a single program; empty when detection
    /// declared the output clean and no program ran).
    pub statuses: Vec<SolveStatus>,
    pub detection: DetectionReport,
}

impl CorrectionResult {
    pub fn all_optimal(&self) -> bool {
        self.statuses.iter().all(|s| *s == SolveStatus::Optimal)
    }

    fn passthrough(y: &Vector, h_tilde: &Matrix, detection: DetectionReport) -> Self {
        CorrectionResult {
            e_hat: Matrix::zeros(h_tilde.rows(), h_tilde.cols()),
            h_hat: h_tilde.clone(),
            e_vec_hat: Vector::zeros(y.len()),
            y_corrected: y.clone(),
            statuses: Vec::new(),
            detection,
        }
    }
}

/// Detect and correct one layer evaluation `y` observed for input `x`.
///
/// When no syndrome fires the inputs come back unchanged — correction is a
/// fixed point on clean data. Otherwise the memory error is recovered from
/// the stored weights, the datapath error follows exactly as `e_vec_hat =
/// y - H_tilde x`, and the output is repaired to `y - E_hat x - e_vec_hat`,
/// which equals the product of the repaired weights with `x` up to
/// rounding. A fault that fires detection but corrects to `E_hat = 0` is a
/// pure datapath event: only the output is touched.
pub fn correct_layer(
    y: &Vector,
    h_tilde: &Matrix,
    x: &Vector,
    cs: &ConstraintSet,
    opts: &SolveOptions,
    detect_tol: f64,
) -> Result<CorrectionResult, DecodeError> {
    let detection = detect(y, cs, detect_tol)?;
    if !detection.detected {
        return Ok(CorrectionResult::passthrough(y, h_tilde, detection));
    }
    let (e_hat, statuses) = correct_memory(h_tilde, cs, opts)?;
    let e_vec_hat = y.sub(&h_tilde.matvec(x)?)?;
    let y_corrected = y.sub(&e_hat.matvec(x)?)?.sub(&e_vec_hat)?;
    let h_hat = h_tilde.sub(&e_hat)?;
    Ok(CorrectionResult { e_hat, h_hat, e_vec_hat, y_corrected, statuses, detection })
}

/// How [`joint_correct`] reads the output constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JointFormulation {
    /// `y = H_tilde x + e`: the observed output came from the stored
    /// weights. The constraint then determines `e` outright and the weight
    /// constraints involve only `E`, so the joint program decomposes
    /// exactly into the per-group memory programs and is solved that way.
    /// This is the default reading.
    #[default]
    Literal,
    /// `y = (H_tilde - E) x + e`: the product is taken with the repaired
    /// weights, so `E` and `e` trade off against each other through the
    /// output rows and the whole layer becomes one program over
    /// `(vec(E); e)`. Practical only for small layers; guarded by an entry
    /// cap.
    CoupledResidual,
}

/// Estimate memory and datapath errors together by minimizing
/// `||E||_1 + ||e||_1` subject to the weight constraints on `H_tilde - E`
/// and the output constraint selected by `formulation`.
pub fn joint_correct(
    y: &Vector,
    h_tilde: &Matrix,
    x: &Vector,
    cs: &ConstraintSet,
    formulation: JointFormulation,
    opts: &SolveOptions,
) -> Result<CorrectionResult, DecodeError> {
    let (p, q) = cs.shape();
    if h_tilde.shape() != (p, q) {
        return Err(DecodeError::Shape(format!(
            "weights are {:?}, constraints describe {:?}",
            h_tilde.shape(),
            (p, q)
        )));
    }
    if y.len() != p || x.len() != q {
        return Err(DecodeError::Shape(format!(
            "output/input have {}/{} entries, layer is {}x{}",
            y.len(),
            x.len(),
            p,
            q
        )));
    }
    let detection = detect(y, cs, DETECT_TOL)?;
    match formulation {
        JointFormulation::Literal => {
            let (e_hat, statuses) = correct_memory(h_tilde, cs, opts)?;
            let e_vec_hat = y.sub(&h_tilde.matvec(x)?)?;
            let h_hat = h_tilde.sub(&e_hat)?;
            let y_corrected = h_hat.matvec(x)?;
            Ok(CorrectionResult { e_hat, h_hat, e_vec_hat, y_corrected, statuses, detection })
        }
        JointFormulation::CoupledResidual => {
            let gc = cs.group_cols();
            let s = cs.spec().row_constraints.len();
            let t = cs.spec().num_general;
            let mg = s * gc + t;
            let m = cs.num_groups() * mg + p;
            let n = p * q + p;
            if m * n > COUPLED_ENTRY_CAP {
                return Err(DecodeError::TooLarge(format!(
                    "{m}x{n} coupled system exceeds the {COUPLED_ENTRY_CAP} entry cap; \
                     use the literal formulation"
                )));
            }
            let mut a = Matrix::zeros(m, n);
            let mut b = Vector::zeros(m);
            let mut groups_clean = true;
            for g in 0..cs.num_groups() {
                let sub = build_correction_system(h_tilde, cs, g)?;
                let block = h_tilde.columns(g * gc, (g + 1) * gc);
                let gate = GROUP_CLEAN_TOL
                    * (1.0 + (sub.a.cols() as f64).sqrt() * block.frobenius_norm());
                groups_clean &= sub.b.norm_inf() <= gate;
                let col0 = g * gc * p;
                for r in 0..mg {
                    a.row_mut(g * mg + r)[col0..col0 + gc * p].copy_from_slice(sub.a.row(r));
                    b[g * mg + r] = sub.b.at(r);
                }
            }
            // Output rows: y - H_tilde x = -E x + e, entry by entry.
            let residual = y.sub(&h_tilde.matvec(x)?)?;
            for i in 0..p {
                let row = a.row_mut(cs.num_groups() * mg + i);
                for c in 0..q {
                    row[c * p + i] = -x.at(c);
                }
                row[p * q + i] = 1.0;
                b[cs.num_groups() * mg + i] = residual.at(i);
            }
            let residual_gate = GROUP_CLEAN_TOL
                * (1.0 + h_tilde.frobenius_norm() * x.norm2() + y.norm2());
            if groups_clean && residual.norm_inf() <= residual_gate {
                // Zero is feasible with objective zero: nothing to correct.
                return Ok(CorrectionResult::passthrough(y, h_tilde, detection));
            }
            let problem = L1Problem::new(a, b)?;
            let sol = solve(&problem, opts);
            let e_hat = Matrix::from_col_stack(
                p,
                q,
                &Vector { data: sol.z.as_slice()[..p * q].to_vec() },
            )?;
            let e_vec_hat = Vector { data: sol.z.as_slice()[p * q..].to_vec() };
            let h_hat = h_tilde.sub(&e_hat)?;
            let y_corrected = h_hat.matvec(x)?;
            Ok(CorrectionResult {
                e_hat,
                h_hat,
                e_vec_hat,
                y_corrected,
                statuses: vec![sol.status],
                detection,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, verify, ConstraintSpec, RowConstraintKind};
    use crate::faultsim::{inject_datapath, inject_memory, DatapathFaultSpec, MemoryFaultSpec};
    use crate::rng::Stream;

    fn small_spec() -> ConstraintSpec {
        ConstraintSpec {
            seed: 11,
            num_general: 20,
            row_constraints: vec![RowConstraintKind::AllOnes],
            group_size: None,
            shape: (8, 6),
        }
    }

    fn grouped_spec() -> ConstraintSpec {
        ConstraintSpec {
            seed: 12,
            num_general: 12,
            row_constraints: vec![RowConstraintKind::AllOnes],
            group_size: Some(4),
            shape: (6, 8),
        }
    }

    fn random_matrix(seed: u64, m: usize, n: usize) -> Matrix {
        let mut s = Stream::new(seed, 31);
        Matrix::from_fn(m, n, |_, _| s.normal())
    }

    fn random_vector(seed: u64, n: usize) -> Vector {
        let mut s = Stream::new(seed, 32);
        Vector::from_fn(n, |_| s.normal())
    }

    fn encoded(spec: ConstraintSpec, seed: u64) -> (Matrix, ConstraintSet) {
        let cs = ConstraintSet::from_spec(spec).unwrap();
        let h = encode(&random_matrix(seed, cs.shape().0, cs.shape().1), &cs).unwrap();
        (h.weights, cs)
    }

    #[test]
    fn clean_output_raises_no_syndrome() {
        let (h, cs) = encoded(small_spec(), 1);
        let x = random_vector(2, 6);
        let y = h.matvec(&x).unwrap();
        let report = detect(&y, &cs, DETECT_TOL).unwrap();
        assert!(!report.detected, "normalized syndrome {}", report.max_normalized_syndrome);
    }

    #[test]
    fn detection_soundness_over_many_inputs() {
        // Clean outputs never fire, across input scales up to 1e3.
        let (h, cs) = encoded(small_spec(), 2);
        let mut s = Stream::new(3, 33);
        for trial in 0..10_000 {
            let scale = 10f64.powf(s.unit() * 3.0); // 1 .. 1e3
            let x = Vector::from_fn(6, |_| s.normal() * scale);
            let y = h.matvec(&x).unwrap();
            let report = detect(&y, &cs, DETECT_TOL).unwrap();
            assert!(
                !report.detected,
                "trial {trial}: false positive at {}",
                report.max_normalized_syndrome
            );
        }
    }

    #[test]
    fn single_datapath_error_shows_up_raw_in_the_syndrome() {
        // Against the all-ones constraint, a lone output error of 0.01 is
        // the raw syndrome value itself.
        let (h, cs) = encoded(small_spec(), 3);
        let x = random_vector(4, 6);
        let mut y = h.matvec(&x).unwrap();
        y[5] += 0.01;
        let report = detect(&y, &cs, DETECT_TOL).unwrap();
        assert!((report.syndromes.at(0) - 0.01).abs() < 1e-10, "raw {}", report.syndromes.at(0));
        assert!(report.detected);
    }

    #[test]
    fn detection_completeness_over_random_injections() {
        // Any continuous-valued fault lands outside the constraint set with
        // probability one, so every injection must be detected.
        let (h, cs) = encoded(small_spec(), 5);
        let mut s = Stream::new(6, 34);
        let mut detected = 0usize;
        let total = 1_000usize;
        for trial in 0..total {
            let kind = s.below(3);
            let x = Vector::from_fn(6, |_| s.normal());
            let (h_used, mut y) = if kind != 1 {
                let spec = MemoryFaultSpec {
                    num_errors: 1 + s.below(3),
                    sigma: 1.0,
                    seed: 1_000 + trial as u64,
                    group_size: None,
                };
                let (ht, _) = inject_memory(&h, &spec).unwrap();
                let y = ht.matvec(&x).unwrap();
                (ht, y)
            } else {
                (h.clone(), h.matvec(&x).unwrap())
            };
            if kind != 0 {
                let spec = DatapathFaultSpec {
                    num_errors: 1 + s.below(2),
                    sigma: 1.0,
                    seed: 2_000 + trial as u64,
                };
                let (yy, _) = inject_datapath(&y, &spec).unwrap();
                y = yy;
            }
            let _ = h_used;
            if detect(&y, &cs, DETECT_TOL).unwrap().detected {
                detected += 1;
            }
        }
        assert_eq!(detected, total, "missed {} of {total} injections", total - detected);
    }

    #[test]
    fn zero_output_is_reported_clean() {
        let (_, cs) = encoded(small_spec(), 5);
        let report = detect(&Vector::zeros(8), &cs, DETECT_TOL).unwrap();
        assert!(!report.detected);
        assert_eq!(report.max_normalized_syndrome, 0.0);
    }

    #[test]
    fn detect_rejects_wrong_length_and_missing_row_constraints() {
        let (_, cs) = encoded(small_spec(), 6);
        assert!(detect(&Vector::zeros(7), &cs, DETECT_TOL).is_err());
        let bare = ConstraintSet::from_spec(ConstraintSpec {
            seed: 1,
            num_general: 5,
            row_constraints: vec![],
            group_size: None,
            shape: (8, 6),
        })
        .unwrap();
        assert!(matches!(
            detect(&Vector::zeros(8), &bare, DETECT_TOL),
            Err(DecodeError::NoRowConstraints)
        ));
    }

    #[test]
    fn memory_correction_recovers_planted_errors() {
        let (h, cs) = encoded(small_spec(), 7);
        let spec = MemoryFaultSpec { num_errors: 2, sigma: 1.5, seed: 77, group_size: None };
        let (h_tilde, record) = inject_memory(&h, &spec).unwrap();
        let (e_hat, statuses) = correct_memory(&h_tilde, &cs, &SolveOptions::default()).unwrap();
        assert_eq!(statuses, vec![SolveStatus::Optimal]);
        let e_err = e_hat.sub(&record.error).unwrap().max_abs();
        assert!(e_err < 1e-6, "error estimate off by {e_err}");
        // The repaired weights satisfy the constraints like freshly encoded
        // ones do.
        let h_hat = h_tilde.sub(&e_hat).unwrap();
        assert!(verify(&h_hat, &cs).unwrap() <= 1e-9);
        assert!(h_hat.sub(&h).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn memory_correction_matches_exhaustive_search_on_tiny_instance() {
        // p=4, q=3: twelve unknowns, few enough to enumerate every support
        // of size <= 2 and minimize the l1 norm directly.
        let spec = ConstraintSpec {
            seed: 21,
            num_general: 8,
            row_constraints: vec![RowConstraintKind::AllOnes],
            group_size: None,
            shape: (4, 3),
        };
        let (h, cs) = encoded(spec, 8);
        for trial in 0..20 {
            let fault = MemoryFaultSpec {
                num_errors: 1,
                sigma: 2.0,
                seed: 300 + trial,
                group_size: None,
            };
            let (h_tilde, _) = inject_memory(&h, &fault).unwrap();
            let (e_hat, statuses) =
                correct_memory(&h_tilde, &cs, &SolveOptions::default()).unwrap();
            assert_eq!(statuses, vec![SolveStatus::Optimal]);
            let problem = build_correction_system(&h_tilde, &cs, 0).unwrap();
            let oracle = exhaustive_min_l1(&problem.a, &problem.b, 2)
                .expect("no consistent sparse candidate");
            let diff = e_hat.col_stack().sub(&oracle).unwrap().norm_inf();
            assert!(diff < 1e-7, "trial {trial}: LP vs exhaustive differ by {diff}");
        }
    }

    /// Minimal-l1 solution over all supports of size <= `kmax`, via
    /// closed-form least squares per support plus a consistency check.
    fn exhaustive_min_l1(a: &Matrix, b: &Vector, kmax: usize) -> Option<Vector> {
        let (m, n) = a.shape();
        let bs = b.as_slice();
        let b_scale = b.norm_inf().max(1.0);
        let col = |j: usize| -> Vec<f64> { (0..m).map(|i| a.at(i, j)).collect() };
        let consistent = |z: &[(usize, f64)]| -> bool {
            (0..m).all(|i| {
                let fit: f64 = z.iter().map(|&(j, w)| a.at(i, j) * w).sum();
                (fit - bs[i]).abs() <= 1e-8 * b_scale
            })
        };
        let mut best: Option<(f64, Vec<(usize, f64)>)> = None;
        let mut consider = |cand: Vec<(usize, f64)>| {
            if consistent(&cand) {
                let l1: f64 = cand.iter().map(|&(_, w)| w.abs()).sum();
                if best.as_ref().is_none_or(|(cur, _)| l1 < *cur) {
                    best = Some((l1, cand));
                }
            }
        };
        if b.norm_inf() <= 1e-12 * b_scale {
            consider(vec![]);
        }
        for j in 0..n {
            let cj = col(j);
            let denom = crate::numkernel::dot(&cj, &cj);
            if denom > 1e-12 {
                consider(vec![(j, crate::numkernel::dot(&cj, bs) / denom)]);
            }
        }
        if kmax >= 2 {
            for j1 in 0..n {
                let c1 = col(j1);
                for j2 in j1 + 1..n {
                    let c2 = col(j2);
                    let (g11, g12, g22) = (
                        crate::numkernel::dot(&c1, &c1),
                        crate::numkernel::dot(&c1, &c2),
                        crate::numkernel::dot(&c2, &c2),
                    );
                    let det = g11 * g22 - g12 * g12;
                    if det.abs() < 1e-10 {
                        continue;
                    }
                    let (r1, r2) =
                        (crate::numkernel::dot(&c1, bs), crate::numkernel::dot(&c2, bs));
                    let w1 = (g22 * r1 - g12 * r2) / det;
                    let w2 = (g11 * r2 - g12 * r1) / det;
                    consider(vec![(j1, w1), (j2, w2)]);
                }
            }
        }
        best.map(|(_, entries)| {
            let mut z = Vector::zeros(n);
            for (j, w) in entries {
                z[j] = w;
            }
            z
        })
    }

    #[test]
    fn grouped_memory_correction_recovers_each_group() {
        let (h, cs) = encoded(grouped_spec(), 8);
        let spec = MemoryFaultSpec { num_errors: 1, sigma: 2.0, seed: 78, group_size: Some(4) };
        let (h_tilde, record) = inject_memory(&h, &spec).unwrap();
        assert_eq!(record.support.len(), 2); // one per group
        let (e_hat, statuses) = correct_memory(&h_tilde, &cs, &SolveOptions::default()).unwrap();
        assert_eq!(statuses.len(), 2);
        assert!(statuses.iter().all(|s| *s == SolveStatus::Optimal));
        let e_err = e_hat.sub(&record.error).unwrap().max_abs();
        assert!(e_err < 1e-6, "error estimate off by {e_err}");
    }

    #[test]
    fn groupwise_correction_equals_standalone_per_group_correction() {
        // Each group of a grouped set behaves exactly like an ungrouped
        // layer of its own: same seed derivation, same constraints, same
        // program — so the recovered blocks agree bit for bit.
        let (h, cs) = encoded(grouped_spec(), 9);
        let fault = MemoryFaultSpec { num_errors: 1, sigma: 1.0, seed: 90, group_size: Some(4) };
        let (h_tilde, _) = inject_memory(&h, &fault).unwrap();
        let opts = SolveOptions::default();
        let (e_full, _) = correct_memory(&h_tilde, &cs, &opts).unwrap();
        let base = cs.spec();
        for g in 0..cs.num_groups() {
            let standalone = ConstraintSet::from_spec(ConstraintSpec {
                seed: base.group_seed(g),
                num_general: base.num_general,
                row_constraints: base.row_constraints.clone(),
                group_size: None,
                shape: (6, 4),
            })
            .unwrap();
            let block = h_tilde.columns(g * 4, (g + 1) * 4);
            let (e_block, _) = correct_memory(&block, &standalone, &opts).unwrap();
            let full_block = e_full.columns(g * 4, (g + 1) * 4);
            assert_eq!(e_block.as_slice(), full_block.as_slice(), "group {g}");
        }
    }

    #[test]
    fn clean_weights_correct_to_exactly_zero_error() {
        let (h, cs) = encoded(small_spec(), 9);
        let (e_hat, statuses) = correct_memory(&h, &cs, &SolveOptions::default()).unwrap();
        // The clean-group shortcut returns the zero matrix, bit for bit.
        assert_eq!(e_hat.max_abs(), 0.0);
        assert_eq!(statuses, vec![SolveStatus::Optimal]);
    }

    #[test]
    fn clean_layer_output_passes_through_bitwise() {
        let (h, cs) = encoded(small_spec(), 10);
        let x = random_vector(11, 6);
        let y = h.matvec(&x).unwrap();
        let out =
            correct_layer(&y, &h, &x, &cs, &SolveOptions::default(), DETECT_TOL).unwrap();
        assert!(!out.detection.detected);
        assert_eq!(out.y_corrected.as_slice(), y.as_slice());
        assert_eq!(out.h_hat.as_slice(), h.as_slice());
        assert_eq!(out.e_hat.max_abs(), 0.0);
        assert_eq!(out.e_vec_hat.norm_inf(), 0.0);
        assert!(out.statuses.is_empty());
    }

    #[test]
    fn memory_only_fault_is_repaired() {
        let (h, cs) = encoded(small_spec(), 12);
        let spec = MemoryFaultSpec { num_errors: 2, sigma: 1.0, seed: 79, group_size: None };
        let (h_tilde, _) = inject_memory(&h, &spec).unwrap();
        let x = random_vector(13, 6);
        let y = h_tilde.matvec(&x).unwrap(); // datapath is clean
        let out =
            correct_layer(&y, &h_tilde, &x, &cs, &SolveOptions::default(), DETECT_TOL).unwrap();
        assert!(out.detection.detected);
        assert!(out.all_optimal());
        assert!(out.e_vec_hat.norm_inf() < 1e-12, "phantom datapath error");
        let clean = h.matvec(&x).unwrap();
        let err = out.y_corrected.sub(&clean).unwrap().norm_inf();
        assert!(err < 1e-5, "corrected output off by {err}");
        // The repaired output is the repaired product.
        let identity = out.y_corrected.sub(&out.h_hat.matvec(&x).unwrap()).unwrap().norm2();
        assert!(identity <= 1e-10 * (1.0 + out.y_corrected.norm2()));
    }

    #[test]
    fn datapath_only_fault_is_repaired_exactly() {
        let (h, cs) = encoded(small_spec(), 14);
        let x = random_vector(15, 6);
        let clean = h.matvec(&x).unwrap();
        let spec = DatapathFaultSpec { num_errors: 1, sigma: 3.0, seed: 80 };
        let (y, record) = inject_datapath(&clean, &spec).unwrap();
        assert_eq!(record.support.len(), 1);
        let out =
            correct_layer(&y, &h, &x, &cs, &SolveOptions::default(), DETECT_TOL).unwrap();
        assert!(out.detection.detected);
        // Clean weights: the groups gate to an exact zero estimate and only
        // the output is corrected.
        assert_eq!(out.e_hat.max_abs(), 0.0);
        let dp_err = out.e_vec_hat.sub(&record.error).unwrap().norm_inf();
        assert!(dp_err < 1e-12, "datapath estimate off by {dp_err}");
        let err = out.y_corrected.sub(&clean).unwrap().norm_inf();
        assert!(err < 1e-12, "corrected output off by {err}");
    }

    #[test]
    fn mixed_fault_is_repaired() {
        let (h, cs) = encoded(small_spec(), 16);
        let mspec = MemoryFaultSpec { num_errors: 2, sigma: 1.0, seed: 81, group_size: None };
        let (h_tilde, _) = inject_memory(&h, &mspec).unwrap();
        let x = random_vector(17, 6);
        let computed = h_tilde.matvec(&x).unwrap();
        let dspec = DatapathFaultSpec { num_errors: 1, sigma: 2.0, seed: 82 };
        let (y, _) = inject_datapath(&computed, &dspec).unwrap();
        let out =
            correct_layer(&y, &h_tilde, &x, &cs, &SolveOptions::default(), DETECT_TOL).unwrap();
        assert!(out.all_optimal());
        let clean = h.matvec(&x).unwrap();
        let err = out.y_corrected.sub(&clean).unwrap().norm_inf();
        assert!(err < 1e-5, "corrected output off by {err}");
        let identity = out.y_corrected.sub(&out.h_hat.matvec(&x).unwrap()).unwrap().norm2();
        assert!(identity <= 1e-10 * (1.0 + out.y_corrected.norm2()));
    }

    #[test]
    fn correction_exactness_bounds_output_error_by_estimate_error() {
        // Whenever the weight-error estimate lands within 1e-5 of the
        // truth, the corrected output lands within 1e-4 * (1 + ||x||) of
        // the clean product.
        let (h, cs) = encoded(small_spec(), 18);
        let mut hits = 0;
        for trial in 0..50 {
            let mspec = MemoryFaultSpec {
                num_errors: 2,
                sigma: 1.0,
                seed: 400 + trial,
                group_size: None,
            };
            let (h_tilde, rec) = inject_memory(&h, &mspec).unwrap();
            let x = random_vector(500 + trial, 6);
            let y = h_tilde.matvec(&x).unwrap();
            let out = correct_layer(&y, &h_tilde, &x, &cs, &SolveOptions::default(), DETECT_TOL)
                .unwrap();
            let est_err = out.e_hat.sub(&rec.error).unwrap().frobenius_norm();
            if est_err <= 1e-5 {
                hits += 1;
                let clean = h.matvec(&x).unwrap();
                let out_err = out.y_corrected.sub(&clean).unwrap().norm2();
                assert!(
                    out_err <= 1e-4 * (1.0 + x.norm2()),
                    "trial {trial}: estimate error {est_err} but output error {out_err}"
                );
            }
        }
        assert!(hits >= 45, "only {hits}/50 recoveries succeeded at this size");
    }

    #[test]
    fn literal_joint_estimate_matches_sequential_correction() {
        let (h, cs) = encoded(small_spec(), 20);
        let mspec = MemoryFaultSpec { num_errors: 2, sigma: 1.5, seed: 84, group_size: None };
        let (h_tilde, mrec) = inject_memory(&h, &mspec).unwrap();
        let x = random_vector(21, 6);
        let computed = h_tilde.matvec(&x).unwrap();
        let dspec = DatapathFaultSpec { num_errors: 1, sigma: 2.0, seed: 85 };
        let (y, drec) = inject_datapath(&computed, &dspec).unwrap();
        let opts = SolveOptions::default();
        let joint =
            joint_correct(&y, &h_tilde, &x, &cs, JointFormulation::Literal, &opts).unwrap();
        assert_eq!(joint.statuses, vec![SolveStatus::Optimal]);
        assert!(joint.e_hat.sub(&mrec.error).unwrap().max_abs() < 1e-6);
        assert!(joint.e_vec_hat.sub(&drec.error).unwrap().norm_inf() < 1e-12);
        // Cross-method consistency with the sequential pipeline.
        let seq = correct_layer(&y, &h_tilde, &x, &cs, &opts, DETECT_TOL).unwrap();
        assert!(seq.e_hat.sub(&joint.e_hat).unwrap().max_abs() < 1e-7);
        assert!(seq.y_corrected.sub(&joint.y_corrected).unwrap().norm_inf() < 1e-10);
    }

    #[test]
    fn joint_correct_returns_zero_estimates_on_clean_input() {
        let (h, cs) = encoded(small_spec(), 21);
        let x = random_vector(22, 6);
        let y = h.matvec(&x).unwrap();
        let opts = SolveOptions::default();
        for formulation in [JointFormulation::Literal, JointFormulation::CoupledResidual] {
            let out = joint_correct(&y, &h, &x, &cs, formulation, &opts).unwrap();
            assert_eq!(out.e_hat.max_abs(), 0.0, "{formulation:?}");
            assert_eq!(out.e_vec_hat.norm_inf(), 0.0, "{formulation:?}");
        }
    }

    #[test]
    fn coupled_joint_recovers_under_its_own_model() {
        // Under the coupled reading the observation is y = (H_tilde - E) x
        // + e = H x + e: the product used the true weights, only the stored
        // copy and the output are damaged. Generate exactly that and ask
        // both formulations for their estimates.
        let (h, cs) = encoded(small_spec(), 22);
        let mspec = MemoryFaultSpec { num_errors: 1, sigma: 1.5, seed: 86, group_size: None };
        let (h_tilde, mrec) = inject_memory(&h, &mspec).unwrap();
        let x = random_vector(23, 6);
        let clean = h.matvec(&x).unwrap();
        let dspec = DatapathFaultSpec { num_errors: 1, sigma: 2.0, seed: 87 };
        let (y, drec) = inject_datapath(&clean, &dspec).unwrap();
        let opts = SolveOptions::default();
        let coup =
            joint_correct(&y, &h_tilde, &x, &cs, JointFormulation::CoupledResidual, &opts)
                .unwrap();
        assert_eq!(coup.statuses, vec![SolveStatus::Optimal]);
        // The coupled program sees the planted pair as feasible and sparse,
        // and recovers it. The datapath estimate inherits the weight
        // estimate's error amplified by ||x||_1, hence the looser bound.
        assert!(coup.e_hat.sub(&mrec.error).unwrap().max_abs() < 1e-5);
        assert!(coup.e_vec_hat.sub(&drec.error).unwrap().norm_inf() < 1e-4);
        assert!(coup.y_corrected.sub(&clean).unwrap().norm_inf() < 1e-4);

        // The literal reading recovers the same weight error — the memory
        // constraints do not depend on the reading — but folds E x into its
        // datapath estimate: e_lit = y - H_tilde x = e - E x.
        let lit =
            joint_correct(&y, &h_tilde, &x, &cs, JointFormulation::Literal, &opts).unwrap();
        assert!(lit.e_hat.sub(&coup.e_hat).unwrap().max_abs() < 1e-5);
        let shift = lit.e_vec_hat.sub(&coup.e_vec_hat).unwrap();
        let expected_shift = mrec.error.matvec(&x).unwrap().scale(-1.0);
        assert!(shift.sub(&expected_shift).unwrap().norm_inf() < 1e-4);
        // Both produce the same repaired product.
        assert!(lit.y_corrected.sub(&coup.y_corrected).unwrap().norm_inf() < 1e-4);
    }

    #[test]
    fn coupled_joint_is_capped_at_realistic_sizes() {
        let spec = ConstraintSpec {
            seed: 1,
            num_general: 500,
            row_constraints: vec![RowConstraintKind::AllOnes],
            group_size: Some(14),
            shape: (256, 784),
        };
        let cs = ConstraintSet::from_spec(spec).unwrap();
        let h = Matrix::zeros(256, 784);
        let y = Vector::zeros(256);
        let x = Vector::zeros(784);
        let err = joint_correct(
            &y,
            &h,
            &x,
            &cs,
            JointFormulation::CoupledResidual,
            &SolveOptions::default(),
        );
        assert!(matches!(err, Err(DecodeError::TooLarge(_))));
    }

    #[test]
    fn correct_memory_rejects_shape_mismatch() {
        let (_, cs) = encoded(small_spec(), 24);
        let wrong = Matrix::zeros(8, 7);
        assert!(correct_memory(&wrong, &cs, &SolveOptions::default()).is_err());
    }
}
