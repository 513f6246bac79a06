//! Constraint generation and weight-matrix encoding.
//!
//! A constraint set for a `p x q` weight matrix `H` consists of
//!
//! * *general constraints*: matrices `B_j` with `<B_j, H> = 0` (Frobenius
//!   inner product), drawn i.i.d. standard normal from a seeded stream and
//!   never stored — any holder of the spec regenerates them on demand;
//! * *row constraints*: vectors `a_i` with `a_i' H = 0`. These are the
//!   detection-capable constraints: they survive multiplication by an input
//!   (`a_i' H x = 0`), so checking `a_i' y` on a layer output flags faults at
//!   inference time.
//!
//! Encoding projects trained weights onto the intersection of the constraint
//! null spaces: stack every scalar constraint as a column of a basis `U`,
//! orthonormalize, and subtract the component of `vec(H)` in the span. The
//! projection is the closest constraint-satisfying matrix in Frobenius norm,
//! so accuracy loss from encoding is as small as the constraint budget
//! allows.
//!
//! Wide matrices are split into column groups encoded independently
//! (`group_size` columns each, constraints re-drawn per group from a
//! group-indexed seed). Row constraints repeat per group, which implies the
//! same constraint on the whole matrix, so detection still works on the full
//! layer output.

use crate::numkernel::{HouseholderQr, Matrix, NumError, Vector};
use crate::rng::Stream;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid constraint spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Feasibility residual every encode must reach.
pub const ENCODE_TOL: f64 = 1e-9;

/// Fixed row-combination constraints. Each kind expands to a vector `a`
/// of length `p` with `a' H = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowConstraintKind {
    /// `a = (1, ..., 1)`: every column sums to zero, i.e. the last row is
    /// the negative of the sum of the others.
    AllOnes,
}

impl RowConstraintKind {
    pub fn expand(self, p: usize) -> Vector {
        match self {
            RowConstraintKind::AllOnes => Vector::from_fn(p, |_| 1.0),
        }
    }

    /// Stable tag used in checkpoints.
    pub fn tag(self) -> u8 {
        match self {
            RowConstraintKind::AllOnes => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(RowConstraintKind::AllOnes),
            _ => None,
        }
    }
}

/// Everything needed to regenerate a constraint system: constraints are
/// seeded, not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSpec {
    pub seed: u64,
    /// General constraints per column group.
    pub num_general: usize,
    pub row_constraints: Vec<RowConstraintKind>,
    /// Columns per group; `None` treats the whole matrix as one group.
    pub group_size: Option<usize>,
    /// `(p, q)` of the protected matrix.
    pub shape: (usize, usize),
}

impl ConstraintSpec {
    /// Columns in one group.
    pub fn group_cols(&self) -> usize {
        self.group_size.unwrap_or(self.shape.1)
    }

    pub fn num_groups(&self) -> usize {
        match self.group_size {
            Some(gs) => self.shape.1 / gs,
            None => 1,
        }
    }

    /// Scalar constraints per group: `num_general` plus one per
    /// (row constraint, group column) pair.
    pub fn constraints_per_group(&self) -> usize {
        self.num_general + self.row_constraints.len() * self.group_cols()
    }

    /// Seed for the constraint stream of group `g`.
    pub fn group_seed(&self, g: usize) -> u64 {
        self.seed ^ g as u64
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let (p, q) = self.shape;
        if p == 0 || q == 0 {
            return Err(CodecError::InvalidSpec(format!("empty shape {p}x{q}")));
        }
        if let Some(gs) = self.group_size {
            if gs == 0 || q % gs != 0 {
                return Err(CodecError::InvalidSpec(format!(
                    "group size {gs} does not divide {q} columns"
                )));
            }
        }
        let k = self.constraints_per_group();
        let cells = p * self.group_cols();
        if k >= cells {
            return Err(CodecError::InvalidSpec(format!(
                "{k} scalar constraints per group leave no freedom in a \
                 {p}x{} group ({cells} cells); need strictly fewer",
                self.group_cols()
            )));
        }
        Ok(())
    }
}

/// A validated constraint system for one weight matrix. General constraint
/// matrices are regenerated from the spec's seed on demand; only the (tiny)
/// row-constraint stack is materialized.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    spec: ConstraintSpec,
    /// `s x p`: one row per row constraint.
    a_rows: Matrix,
}

impl ConstraintSet {
    pub fn from_spec(spec: ConstraintSpec) -> Result<Self, CodecError> {
        spec.validate()?;
        let p = spec.shape.0;
        let s = spec.row_constraints.len();
        let mut a_rows = Matrix::zeros(s, p);
        for (i, kind) in spec.row_constraints.iter().enumerate() {
            let a = kind.expand(p);
            a_rows.row_mut(i).copy_from_slice(a.as_slice());
        }
        Ok(ConstraintSet { spec, a_rows })
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    pub fn shape(&self) -> (usize, usize) {
        self.spec.shape
    }

    pub fn num_groups(&self) -> usize {
        self.spec.num_groups()
    }

    pub fn group_cols(&self) -> usize {
        self.spec.group_cols()
    }

    /// The stacked row-constraint vectors (`s x p`). Valid for the whole
    /// matrix as well as for any single group.
    pub fn row_matrix(&self) -> &Matrix {
        &self.a_rows
    }

    /// The general constraint matrices of group `g`, regenerated from the
    /// group seed. Each is `p x group_cols`.
    pub fn generals_for_group(&self, g: usize) -> Vec<Matrix> {
        assert!(g < self.num_groups());
        generate_general_constraints(
            self.spec.group_seed(g),
            self.spec.num_general,
            self.spec.shape.0,
            self.group_cols(),
        )
    }

    /// The constraint basis of group `g`: one column per scalar constraint
    /// (`p * group_cols` rows, [`ConstraintSpec::constraints_per_group`]
    /// columns). General-constraint columns come first, then one column per
    /// (row constraint, group column) pair.
    pub fn basis_for_group(&self, g: usize) -> Matrix {
        assert!(g < self.num_groups());
        let p = self.spec.shape.0;
        let gc = self.group_cols();
        let k = self.spec.constraints_per_group();
        let mut u = Matrix::zeros(p * gc, k);
        let mut col = 0;
        for b in self.generals_for_group(g) {
            let v = b.col_stack();
            for r in 0..p * gc {
                u[(r, col)] = v.at(r);
            }
            col += 1;
        }
        for kind in &self.spec.row_constraints {
            let a = kind.expand(p);
            for c in 0..gc {
                // vec(a e_c') has `a` in the rows of column block c.
                for r in 0..p {
                    u[(c * p + r, col)] = a.at(r);
                }
                col += 1;
            }
        }
        debug_assert_eq!(col, k);
        u
    }
}

/// `count` matrices of shape `p x q` with i.i.d. standard normal entries,
/// drawn deterministically from `seed`. Entries are filled row-major within
/// a matrix, matrices in order — the layout every holder of a spec relies on
/// to regenerate identical constraints.
pub fn generate_general_constraints(seed: u64, count: usize, p: usize, q: usize) -> Vec<Matrix> {
    let mut stream = Stream::new(seed, crate::rng::streams::CONSTRAINTS);
    (0..count)
        .map(|_| Matrix::from_fn(p, q, |_, _| stream.normal()))
        .collect()
}

/// The `q` rank-one matrices `a e_c'` that impose `a' H = 0` one column at a
/// time: matrix `c` has `a` as its `c`-th column and zeros elsewhere.
pub fn expand_row_constraint(a: &Vector, q: usize) -> Vec<Matrix> {
    let p = a.len();
    (0..q)
        .map(|c| Matrix::from_fn(p, q, |i, j| if j == c { a.at(i) } else { 0.0 }))
        .collect()
}

/// The constraint basis of a single-group set (see
/// [`ConstraintSet::basis_for_group`] for the grouped form).
pub fn assemble_basis(cs: &ConstraintSet) -> Result<Matrix, CodecError> {
    if cs.num_groups() != 1 {
        return Err(CodecError::InvalidSpec(format!(
            "assemble_basis expects a single-group set, got {} groups; \
             use basis_for_group",
            cs.num_groups()
        )));
    }
    Ok(cs.basis_for_group(0))
}

/// An encoded weight matrix together with the spec that constrains it and
/// the feasibility residual achieved by the projection.
#[derive(Clone, Debug)]
pub struct CodedLayer {
    pub weights: Matrix,
    pub spec: ConstraintSpec,
    pub residual: f64,
}

/// Project `h_o` onto the constraint subspace of `cs`: the result is the
/// closest matrix (Frobenius norm) to `h_o` satisfying every constraint.
/// Groups are projected independently.
pub fn encode(h_o: &Matrix, cs: &ConstraintSet) -> Result<CodedLayer, CodecError> {
    if h_o.shape() != cs.shape() {
        return Err(CodecError::InvalidSpec(format!(
            "encode: weights are {:?}, spec wants {:?}",
            h_o.shape(),
            cs.shape()
        )));
    }
    let p = h_o.rows();
    let gc = cs.group_cols();
    let mut h = h_o.clone();
    if cs.spec().constraints_per_group() > 0 {
        for g in 0..cs.num_groups() {
            let block = h.columns(g * gc, (g + 1) * gc);
            let u = cs.basis_for_group(g);
            let qr = HouseholderQr::factor(&u)?;
            let mut v = block.col_stack();
            qr.project_onto_complement(v.as_mut_slice());
            let projected = Matrix::from_col_stack(p, gc, &v)?;
            for i in 0..p {
                for j in 0..gc {
                    h[(i, g * gc + j)] = projected.at(i, j);
                }
            }
        }
    }
    let residual = verify(&h, cs)?;
    Ok(CodedLayer { weights: h, spec: cs.spec().clone(), residual })
}

/// Worst-case normalized constraint violation of `h` under `cs`:
/// `max |<U_col, vec(block)>| / (||U_col|| * ||h||_F)` over every scalar
/// constraint of every group. Zero for a zero matrix or an empty constraint
/// set.
pub fn verify(h: &Matrix, cs: &ConstraintSet) -> Result<f64, CodecError> {
    if h.shape() != cs.shape() {
        return Err(CodecError::InvalidSpec(format!(
            "verify: weights are {:?}, spec wants {:?}",
            h.shape(),
            cs.shape()
        )));
    }
    let h_norm = h.frobenius_norm();
    if h_norm == 0.0 {
        return Ok(0.0);
    }
    let gc = cs.group_cols();
    let mut worst = 0.0f64;
    for g in 0..cs.num_groups() {
        let block = h.columns(g * gc, (g + 1) * gc);
        for b in cs.generals_for_group(g) {
            let ip = b.frobenius_inner(&block)?;
            worst = worst.max(ip.abs() / (b.frobenius_norm() * h_norm));
        }
        for kind in &cs.spec().row_constraints {
            let a = kind.expand(h.rows());
            let at_h = block.tr_matvec(&a)?; // a' * block, one entry per column
            let a_norm = a.norm2();
            for c in 0..gc {
                worst = worst.max(at_h.at(c).abs() / (a_norm * h_norm));
            }
        }
    }
    Ok(worst)
}

/// Append the bias as an extra column: the affine map `x -> Hx + delta`
/// becomes the linear map `(x; 1) -> [H delta] (x; 1)`, so bias entries can
/// be protected by the same constraints when desired.
pub fn augment_bias(h: &Matrix, delta: &Vector) -> Result<Matrix, CodecError> {
    if delta.len() != h.rows() {
        return Err(CodecError::InvalidSpec(format!(
            "augment_bias: {} bias entries for {} rows",
            delta.len(),
            h.rows()
        )));
    }
    Ok(Matrix::from_fn(h.rows(), h.cols() + 1, |i, j| {
        if j < h.cols() {
            h.at(i, j)
        } else {
            delta.at(i)
        }
    }))
}

/// Split `h` into column blocks of `group_size` columns each, left to right.
pub fn partition_columns(h: &Matrix, group_size: usize) -> Result<Vec<Matrix>, CodecError> {
    if group_size == 0 || h.cols() % group_size != 0 {
        return Err(CodecError::InvalidSpec(format!(
            "group size {group_size} does not divide {} columns",
            h.cols()
        )));
    }
    Ok((0..h.cols() / group_size)
        .map(|g| h.columns(g * group_size, (g + 1) * group_size))
        .collect())
}
