//! The array of relatively actuated agents and the stacked system built from it.
//!
//! Agent `i` evolves as `x_i⁺ = A x_i + Σ_j B_ij u_ij` and pair `(i, j)`
//! measures `y_ij = C_ij (x_i − x_j)`, with `B_ji = −B_ij`, `C_ji = −C_ij` and
//! `u_ij = u_ji`. Only `i < j` couplings are stored.
//!
//! Relative controllability asks `range W_c ⊇ S_n^⊥`. Since `range W_c ⊆ S_n^⊥`
//! always holds (every column of `Bbig` sums to zero across agents and `Abig`
//! acts agentwise), the condition is equivalent to `rank W_c = (q−1)n`. Dually,
//! `Cbig (1_q ⊗ I_n) = 0` gives `null W_o ⊇ S_n`, so `null W_o ⊆ S_n` holds
//! iff `rank W_o = (q−1)n`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{helmert_basis, kron, rank, Mat, Vector};

/// Coupling between agents `i < j` (1-based labels).
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    /// `B_ij`, `n × p_ij` (`p_ij` may be zero).
    pub b: Mat,
    /// `C_ij`, `m_ij × n` (`m_ij` may be zero).
    pub c: Mat,
}

impl Coupling {
    pub fn new(i: usize, j: usize, b: Mat, c: Mat) -> Self {
        Self { i, j, b, c }
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArraySpec {
    q: usize,
    n: usize,
    a: Mat,
    couplings: Vec<Coupling>,
}

impl ArraySpec {
    /// Validates dimensions and pair labels. Couplings are kept in the order given.
    pub fn new(q: usize, n: usize, a: Mat, couplings: Vec<Coupling>) -> Result<Self> {
        if q < 2 {
            return Err(Error::config(
                "q",
                format!("need at least 2 agents, got {q}"),
            ));
        }
        if n < 1 {
            return Err(Error::config("n", "state dimension must be at least 1"));
        }
        if a.shape() != (n, n) {
            return Err(Error::config(
                "A",
                format!("expected {n}x{n}, got {}x{}", a.nrows(), a.ncols()),
            ));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("A", "non-finite entry"));
        }
        let mut seen = std::collections::HashSet::new();
        for (k, cp) in couplings.iter().enumerate() {
            let path = |field: &str| format!("couplings[{k}].{field}");
            if !(1 <= cp.i && cp.i < cp.j && cp.j <= q) {
                return Err(Error::config(
                    path("i"),
                    format!("need 1 <= i < j <= {q}, got ({}, {})", cp.i, cp.j),
                ));
            }
            if !seen.insert((cp.i, cp.j)) {
                return Err(Error::config(
                    format!("couplings[{k}]"),
                    format!("duplicate coupling for pair ({}, {})", cp.i, cp.j),
                ));
            }
            if cp.b.nrows() != n {
                return Err(Error::config(
                    path("B"),
                    format!("expected {n} rows, got {}", cp.b.nrows()),
                ));
            }
            if cp.c.ncols() != n && cp.c.nrows() > 0 {
                return Err(Error::config(
                    path("C"),
                    format!("expected {n} columns, got {}", cp.c.ncols()),
                ));
            }
            if cp.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(path("B"), "non-finite entry"));
            }
            if cp.c.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(path("C"), "non-finite entry"));
            }
        }
        let couplings = couplings
            .into_iter()
            .map(|mut cp| {
                if cp.c.nrows() == 0 {
                    cp.c = Mat::zeros(0, n);
                }
                cp
            })
            .collect();
        Ok(Self { q, n, a, couplings })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn coupling(&self, i: usize, j: usize) -> Option<&Coupling> {
        self.couplings.iter().find(|c| c.i == i && c.j == j)
    }

    /// The dual array `[(Bᵀ), Aᵀ]`: inputs become outputs and vice versa.
    pub fn dual(&self) -> Self {
        let couplings = self
            .couplings
            .iter()
            .map(|cp| Coupling::new(cp.i, cp.j, cp.c.transpose(), cp.b.transpose()))
            .collect();
        Self::new(self.q, self.n, self.a.transpose(), couplings).expect("dual of a valid spec")
    }
}

/// Column (or row) range occupied by pair `(i, j)` in `Bbig` (or `Cbig`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBlock {
    pub i: usize,
    pub j: usize,
    pub range: Range<usize>,
}

/// `Abig = I_q ⊗ A`, `Bbig = inc(B::)`, `Cbig = inc(C::ᵀ)ᵀ`.
#[derive(Debug, Clone)]
pub struct BigSystem {
    pub q: usize,
    pub n: usize,
    pub a_agent: Mat,
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub col_blocks: Vec<PairBlock>,
    pub row_blocks: Vec<PairBlock>,
}

/// Pairs `(1,2), (1,3), …, (1,q), (2,3), …, (q−1,q)`.
pub fn pair_order(q: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..q).flat_map(move |i| (i + 1..=q).map(move |j| (i, j)))
}

/// Builds the stacked system.
pub fn assemble(spec: &ArraySpec) -> Result<BigSystem> {
    let (q, n) = (spec.q, spec.n);
    let mut col_blocks = Vec::new();
    let mut row_blocks = Vec::new();
    let (mut p_total, mut m_total) = (0, 0);
    for (i, j) in pair_order(q) {
        let (p, m) = spec
            .coupling(i, j)
            .map_or((0, 0), |cp| (cp.inputs(), cp.outputs()));
        col_blocks.push(PairBlock {
            i,
            j,
            range: p_total..p_total + p,
        });
        row_blocks.push(PairBlock {
            i,
            j,
            range: m_total..m_total + m,
        });
        p_total += p;
        m_total += m;
    }

    let mut b = Mat::zeros(q * n, p_total);
    let mut c = Mat::zeros(m_total, q * n);
    for (cb, rb) in col_blocks.iter().zip(&row_blocks) {
        let Some(cp) = spec.coupling(cb.i, cb.j) else {
            continue;
        };
        if cp.b.shape() != (n, cb.range.len()) || cp.c.shape() != (rb.range.len(), n) {
            return Err(Error::Dimension {
                op: "assemble",
                detail: format!("coupling ({}, {})", cp.i, cp.j),
            });
        }
        let (ri, rj) = ((cb.i - 1) * n, (cb.j - 1) * n);
        let width = cb.range.len();
        b.view_mut((ri, cb.range.start), (n, width))
            .copy_from(&cp.b);
        b.view_mut((rj, cb.range.start), (n, width))
            .copy_from(&(-&cp.b));
        let height = rb.range.len();
        c.view_mut((rb.range.start, ri), (height, n))
            .copy_from(&cp.c);
        c.view_mut((rb.range.start, rj), (height, n))
            .copy_from(&(-&cp.c));
    }

    Ok(BigSystem {
        q,
        n,
        a_agent: spec.a.clone(),
        a: kron(&Mat::identity(q, q), &spec.a),
        b,
        c,
        col_blocks,
        row_blocks,
    })
}

impl BigSystem {
    /// Total input width `P = Σ p_ij`.
    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Total output height `M = Σ m_ij`.
    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.q * self.n
    }

    /// Dimension of the disagreement subspace, `(q−1)n`.
    pub fn disagreement_dim(&self) -> usize {
        (self.q - 1) * self.n
    }
}

/// `[Bbig, Abig Bbig, …, Abig^{k−1} Bbig]`.
pub fn krylov_columns(a: &Mat, b: &Mat, k: usize) -> Mat {
    let (rows, w) = (b.nrows(), b.ncols());
    let mut out = Mat::zeros(rows, w * k);
    let mut block = b.clone();
    for s in 0..k {
        out.view_mut((0, s * w), (rows, w)).copy_from(&block);
        if s + 1 < k {
            block = a * block;
        }
    }
    out
}

/// `[C; C A; …; C A^{k−1}]`.
pub fn krylov_rows(c: &Mat, a: &Mat, k: usize) -> Mat {
    let (h, cols) = (c.nrows(), c.ncols());
    let mut out = Mat::zeros(h * k, cols);
    let mut block = c.clone();
    for s in 0..k {
        out.view_mut((s * h, 0), (h, cols)).copy_from(&block);
        if s + 1 < k {
            block = block * a;
        }
    }
    out
}

/// Controllability matrix `W_c` with `n` blocks.
pub fn ctrb_matrix(big: &BigSystem, n: usize) -> Mat {
    krylov_columns(&big.a, &big.b, n)
}

/// Observability matrix `W_o` with `n` blocks.
pub fn obsv_matrix(big: &BigSystem, n: usize) -> Mat {
    krylov_rows(&big.c, &big.a, n)
}

pub fn controllability_rank(big: &BigSystem, rel_tol: f64) -> usize {
    rank(&ctrb_matrix(big, big.n), rel_tol)
}

pub fn observability_rank(big: &BigSystem, rel_tol: f64) -> usize {
    rank(&obsv_matrix(big, big.n), rel_tol)
}

pub fn is_controllable(big: &BigSystem, rel_tol: f64) -> bool {
    controllability_rank(big, rel_tol) == big.disagreement_dim()
}

pub fn is_observable(big: &BigSystem, rel_tol: f64) -> bool {
    observability_rank(big, rel_tol) == big.disagreement_dim()
}

/// `S = 1_q/√q`, `D` = Helmert basis, and their lifts `S ⊗ I_n`, `D ⊗ I_n`.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    pub s: Mat,
    pub d: Mat,
    pub sbig: Mat,
    pub dbig: Mat,
}

impl ProjectionBasis {
    pub fn new(q: usize, n: usize) -> Result<Self> {
        let s = Mat::from_element(q, 1, 1.0 / (q as f64).sqrt());
        let d = helmert_basis(q)?;
        let eye = Mat::identity(n, n);
        Ok(Self {
            sbig: kron(&s, &eye),
            dbig: kron(&d, &eye),
            s,
            d,
        })
    }

    pub fn for_system(big: &BigSystem) -> Result<Self> {
        Self::new(big.q, big.n)
    }

    /// Agent average lifted back to the stack, `Sbigᵀ x / √q`.
    pub fn average(&self, x: &Vector) -> Vector {
        let q = self.s.nrows() as f64;
        self.sbig.tr_mul(x) / q.sqrt()
    }
}

/// Euclidean distance from `x` to the synchronization subspace, `‖Dbigᵀ x‖`.
pub fn disagreement_norm(basis: &ProjectionBasis, x: &Vector) -> f64 {
    basis.dbig.tr_mul(x).norm()
}

/// Dynamics restricted to the disagreement coordinates `Dbigᵀ x`.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
}

pub fn reduce(big: &BigSystem, basis: &ProjectionBasis) -> ReducedSystem {
    let dbig = &basis.dbig;
    ReducedSystem {
        a: dbig.tr_mul(&big.a) * dbig,
        b: dbig.tr_mul(&big.b),
        c: &big.c * dbig,
    }
}

/// Spec, stacked system, projection basis and reduced system bundled together.
#[derive(Debug, Clone)]
pub struct ArrayModel {
    pub spec: ArraySpec,
    pub big: BigSystem,
    pub basis: ProjectionBasis,
    pub reduced: ReducedSystem,
}

impl ArrayModel {
    pub fn new(spec: ArraySpec) -> Result<Self> {
        let big = assemble(&spec)?;
        let basis = ProjectionBasis::for_system(&big)?;
        let reduced = reduce(&big, &basis);
        Ok(Self {
            spec,
            big,
            basis,
            reduced,
        })
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::linalg::{powi, rank};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Arbitrary array: any pair may be missing, input-only or output-only.
    fn any_spec() -> impl Strategy<Value = ArraySpec> {
        (2usize..=5, 1usize..=3, any::<u64>()).prop_map(|(q, n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut fill =
                |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..=1.0));
            let a = fill(n, n) * 1.2;
            let mut couplings = Vec::new();
            for (i, j) in pair_order(q) {
                let (p, m) = (seed as usize % 3, (seed >> 8) as usize % 3);
                let (p, m) = ((p + i * j) % 3, (m + i + j) % 3);
                if p + m == 0 {
                    continue;
                }
                couplings.push(Coupling::new(i, j, fill(n, p), fill(m, n)));
            }
            ArraySpec::new(q, n, a, couplings).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn sync_projection_identities(spec in any_spec()) {
            let m = ArrayModel::new(spec).unwrap();
            let (big, basis) = (&m.big, &m.basis);
            prop_assert!(basis.sbig.tr_mul(&big.b).amax() <= 1e-12);
            prop_assert!((&big.c * &basis.sbig).amax() <= 1e-12);
            let dim = big.state_dim();
            let split = &basis.dbig * basis.dbig.transpose() + &basis.sbig * basis.sbig.transpose();
            prop_assert!((split - Mat::identity(dim, dim)).amax() <= 1e-12);
        }

        #[test]
        fn disagreement_push_through(spec in any_spec()) {
            let m = ArrayModel::new(spec).unwrap();
            let (big, dbig) = (&m.big, &m.basis.dbig);
            let proj = dbig * dbig.transpose();
            for l in 0..=big.n + 1 {
                let al = powi(&big.a, l);
                let lhs = dbig.tr_mul(&(&al * &big.b));
                let rhs = dbig.tr_mul(&(&al * &proj * &big.b));
                prop_assert!((&lhs - &rhs).amax() <= 1e-9 * (1.0 + lhs.amax()));
            }
        }

        #[test]
        fn ranks_bounded_by_disagreement_dimension(spec in any_spec()) {
            let m = ArrayModel::new(spec).unwrap();
            let need = m.big.disagreement_dim();
            prop_assert!(controllability_rank(&m.big, 1e-9) <= need);
            prop_assert!(observability_rank(&m.big, 1e-9) <= need);
            prop_assert_eq!(rank(&ctrb_matrix(&m.big, m.big.n), 1e-9), controllability_rank(&m.big, 1e-9));
        }

        #[test]
        fn controllability_is_dual_observability(spec in any_spec()) {
            let dual = ArrayModel::new(spec.dual()).unwrap();
            let m = ArrayModel::new(spec).unwrap();
            prop_assert_eq!(controllability_rank(&m.big, 1e-9), observability_rank(&dual.big, 1e-9));
            prop_assert_eq!(observability_rank(&m.big, 1e-9), controllability_rank(&dual.big, 1e-9));
            prop_assert_eq!(is_controllable(&m.big, 1e-9), is_observable(&dual.big, 1e-9));
        }
    }
}
