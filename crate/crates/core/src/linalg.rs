//! Dense real matrix primitives.
//!
//! Matrices are plain `nalgebra` dynamic matrices. Eigenvalues and singular
//! values come from `nalgebra`'s real Schur and SVD routines; the matrix
//! exponential, the Cholesky solve and the Helmert basis are implemented here.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Spectral radius and spectral abscissa of a square matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub spectral_radius: f64,
    pub spectral_abscissa: f64,
    /// Margin the report was certified against (zero when only measured).
    pub margin_used: f64,
}

impl SpectrumReport {
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin_used = margin;
        self
    }

    pub fn is_schur(&self) -> bool {
        self.spectral_radius < 1.0 - self.margin_used
    }

    pub fn is_hurwitz(&self) -> bool {
        self.spectral_abscissa < -self.margin_used
    }
}

fn require_square(op: &'static str, m: &Mat) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSquare {
            op,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Builds a matrix from row slices. Panics on ragged input; intended for
/// literals in tests and examples.
pub fn from_rows(rows: &[&[f64]]) -> Mat {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    assert!(rows.iter().all(|r| r.len() == ncols), "ragged rows");
    Mat::from_fn(nrows, ncols, |i, j| rows[i][j])
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// `m^k` by repeated squaring.
pub fn powi(m: &Mat, k: usize) -> Mat {
    debug_assert_eq!(m.nrows(), m.ncols());
    let mut result = Mat::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    let mut k = k;
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Induced 1-norm (maximum absolute column sum).
pub fn norm1(m: &Mat) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Padé coefficients b_0..b_m for the [m/m] approximant of exp.
const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norm for which each degree meets unit-roundoff backward error.
const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

/// Matrix exponential by Padé scaling and squaring.
///
/// Accurate to about 1e-13 relative for `‖m‖₁ ≤ 10`. For larger norms the
/// number of squarings grows like `log2(‖m‖₁)` and so does the rounding error.
pub fn expm(m: &Mat) -> Result<Mat> {
    require_square("expm", m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let eye = Mat::identity(n, n);
    let norm = norm1(m);

    let small: [(f64, &[f64]); 4] = [
        (THETA_3, &PADE_3),
        (THETA_5, &PADE_5),
        (THETA_7, &PADE_7),
        (THETA_9, &PADE_9),
    ];
    for (theta, coeffs) in small {
        if norm <= theta {
            return pade_low(m, coeffs, &eye);
        }
    }

    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m * 2f64.powi(-s);
    let mut r = pade_13(&scaled, &eye)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low(a: &Mat, b: &[f64], eye: &Mat) -> Result<Mat> {
    let a2 = a * a;
    let mut power = eye.clone();
    let mut u = Mat::zeros(a.nrows(), a.ncols());
    let mut v = Mat::zeros(a.nrows(), a.ncols());
    for j in 0..b.len() / 2 {
        u += &power * b[2 * j + 1];
        v += &power * b[2 * j];
        power = &power * &a2;
    }
    let u = a * u;
    pade_solve(u, v)
}

fn pade_13(a: &Mat, eye: &Mat) -> Result<Mat> {
    let b = &PADE_13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + eye * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + eye * b[0];
    pade_solve(u, v)
}

fn pade_solve(u: Mat, v: Mat) -> Result<Mat> {
    let p = &v + &u;
    let q = v - u;
    q.lu().solve(&p).ok_or(Error::NoConvergence { op: "expm" })
}

fn eigenvalues(op: &'static str, m: &Mat) -> Result<Vec<(f64, f64)>> {
    require_square(op, m)?;
    if m.nrows() == 0 {
        return Err(Error::Dimension {
            op,
            detail: "empty matrix".into(),
        });
    }
    let n = m.nrows();
    // A deflation threshold of exactly one ulp can stall on clustered eigenvalues.
    let schur = [4.0, 64.0]
        .iter()
        .find_map(|&ulps| {
            nalgebra::linalg::Schur::try_new(m.clone(), ulps * f64::EPSILON, 1000 * n.max(10))
        })
        .ok_or(Error::NoConvergence { op })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect())
}

/// Eigenvalues as `(re, im)` pairs, in no particular order.
pub fn eigenvalues_of(m: &Mat) -> Result<Vec<(f64, f64)>> {
    eigenvalues("eigenvalues", m)
}

/// Spectral radius and abscissa.
pub fn spectrum(m: &Mat) -> Result<SpectrumReport> {
    let eig = eigenvalues("spectrum", m)?;
    let spectral_radius = eig.iter().map(|&(re, im)| re.hypot(im)).fold(0.0, f64::max);
    let spectral_abscissa = eig
        .iter()
        .map(|&(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SpectrumReport {
        spectral_radius,
        spectral_abscissa,
        margin_used: 0.0,
    })
}

/// Spectral radius only.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    spectrum(m).map(|s| s.spectral_radius)
}

/// True iff every eigenvalue lies strictly inside the disc of radius `1 - margin`.
/// Non-square or non-convergent input yields `false`.
pub fn is_schur(m: &Mat, margin: f64) -> bool {
    spectrum(m).is_ok_and(|s| s.with_margin(margin).is_schur())
}

/// True iff every eigenvalue has real part strictly below `-margin`.
pub fn is_hurwitz(m: &Mat, margin: f64) -> bool {
    spectrum(m).is_ok_and(|s| s.with_margin(margin).is_hurwitz())
}

/// Largest eigenvalue of the symmetric part `(m + mᵀ)/2`.
pub fn max_symmetric_eigenvalue(m: &Mat) -> Result<f64> {
    require_square("max_symmetric_eigenvalue", m)?;
    let sym = (m + m.transpose()) * 0.5;
    Ok(sym
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

const SYMMETRY_TOL: f64 = 1e-10;

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    require_square("cholesky", m)?;
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::NotSpd {
                    detail: format!("asymmetric at ({i}, {j})"),
                });
            }
        }
    }
    let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    // Pivots this small relative to the diagonal are rounding noise on a
    // singular matrix.
    let pivot_floor = 64.0 * f64::EPSILON * n as f64 * max_diag;

    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > pivot_floor) {
            return Err(Error::NotSpd {
                detail: format!("pivot {j} is {d:.3e}"),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `m · x = rhs` for symmetric positive definite `m`.
pub fn solve_spd(m: &Mat, rhs: &Mat) -> Result<Mat> {
    let l = cholesky(m)?;
    if rhs.nrows() != m.nrows() {
        return Err(Error::Dimension {
            op: "solve_spd",
            detail: format!("rhs has {} rows, matrix is {}", rhs.nrows(), m.nrows()),
        });
    }
    let n = m.nrows();
    let mut x = rhs.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, col)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix.
pub fn inv_spd(m: &Mat) -> Result<Mat> {
    let n = m.nrows();
    let inv = solve_spd(m, &Mat::identity(n, n))?;
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Orthonormal basis of the complement of `1_q`: column `k` (1-based) is
/// `(1, …, 1, −k, 0, …, 0)/√(k(k+1))` with `k` leading ones.
pub fn helmert_basis(q: usize) -> Result<Mat> {
    if q < 2 {
        return Err(Error::InvalidParam(format!(
            "helmert_basis needs q >= 2, got {q}"
        )));
    }
    let mut d = Mat::zeros(q, q - 1);
    for c in 0..q - 1 {
        let k = (c + 1) as f64;
        let norm = (k * (k + 1.0)).sqrt();
        for r in 0..=c {
            d[(r, c)] = 1.0 / norm;
        }
        d[(c + 1, c)] = -k / norm;
    }
    Ok(d)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    /// Double-double scalars: value `hi + lo` with `|lo| <= ulp(hi)/2`.
    #[derive(Clone, Copy, Debug, Default)]
    struct Dd {
        hi: f64,
        lo: f64,
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    impl Dd {
        fn from(x: f64) -> Self {
            Self { hi: x, lo: 0.0 }
        }

        fn add(self, o: Self) -> Self {
            let (s, e) = two_sum(self.hi, o.hi);
            let e = e + self.lo + o.lo;
            let (hi, lo) = two_sum(s, e);
            Self { hi, lo }
        }

        fn mul(self, o: Self) -> Self {
            let p = self.hi * o.hi;
            let e = self.hi.mul_add(o.hi, -p);
            let e = e + self.hi * o.lo + self.lo * o.hi;
            let (hi, lo) = two_sum(p, e);
            Self { hi, lo }
        }

        fn div_f64(self, d: f64) -> Self {
            let q = self.hi / d;
            let r = self.add(Self::from(q).mul(Self::from(-d)));
            let (hi, lo) = two_sum(q, r.hi / d);
            Self { hi, lo }
        }
    }

    fn dd_matmul(a: &[Dd], b: &[Dd], n: usize) -> Vec<Dd> {
        let mut out = vec![Dd::default(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = Dd::default();
                for k in 0..n {
                    acc = acc.add(a[i * n + k].mul(b[k * n + j]));
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// Taylor series in double-double arithmetic; cancellation for `‖m‖ <= 10`
    /// costs at most ~8 of its ~32 digits.
    fn expm_oracle(m: &Mat) -> Mat {
        let n = m.nrows();
        let a: Vec<Dd> = (0..n * n).map(|k| Dd::from(m[(k / n, k % n)])).collect();
        let mut term: Vec<Dd> = (0..n * n)
            .map(|k| Dd::from(if k / n == k % n { 1.0 } else { 0.0 }))
            .collect();
        let mut sum = term.clone();
        for k in 1..400 {
            term = dd_matmul(&term, &a, n)
                .into_iter()
                .map(|t| t.div_f64(k as f64))
                .collect();
            sum = sum.iter().zip(&term).map(|(s, t)| s.add(*t)).collect();
            let tmax = term.iter().map(|t| t.hi.abs()).fold(0.0, f64::max);
            let smax = sum.iter().map(|t| t.hi.abs()).fold(0.0, f64::max);
            if k > 10 && tmax <= 1e-34 * smax {
                break;
            }
        }
        Mat::from_fn(n, n, |i, j| sum[i * n + j].hi + sum[i * n + j].lo)
    }

    fn rel(a: &Mat, b: &Mat) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn matrix(max_dim: usize, scale: f64) -> impl Strategy<Value = Mat> {
        (1..=max_dim).prop_flat_map(move |n| {
            prop::collection::vec(-1.0..1.0f64, n * n)
                .prop_map(move |v| Mat::from_vec(n, n, v) * scale)
        })
    }

    #[test]
    fn expm_fixed_cases_against_oracle() {
        let cases = [
            from_rows(&[&[-10.0]]),
            from_rows(&[&[0.0, 10.0], &[-10.0, 0.0]]),
            from_rows(&[&[-5.0, 8.0], &[0.0, -5.0]]),
            from_rows(&[&[1.0, 2.0, 3.0], &[0.0, -4.0, 5.0], &[-2.0, 1.0, 0.5]]),
        ];
        for m in &cases {
            let err = rel(&expm(m).unwrap(), &expm_oracle(m));
            assert!(err <= 1e-10, "{m} err {err:e}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn expm_matches_series_oracle(m in matrix(6, 1.0), target in 0.01..10.0f64) {
            let norm = m.norm();
            prop_assume!(norm > 1e-6);
            let m = m * (target / norm);
            let err = rel(&expm(&m).unwrap(), &expm_oracle(&m));
            prop_assert!(err <= 1e-10, "err {:e}", err);
        }

        #[test]
        fn expm_of_commuting_sum(a in matrix(5, 0.6), c in prop::array::uniform3(-1.0..1.0f64)) {
            let n = a.nrows();
            let b = Mat::identity(n, n) * c[0] + &a * c[1] + &a * &a * c[2];
            let lhs = expm(&(&a + &b)).unwrap();
            let rhs = expm(&a).unwrap() * expm(&b).unwrap();
            prop_assert!((&lhs - &rhs).amax() <= 1e-9 * lhs.amax().max(1.0));
        }

        #[test]
        fn expm_inverse_pair(a in matrix(6, 0.5)) {
            let n = a.nrows();
            let prod = expm(&a).unwrap() * expm(&(-&a)).unwrap();
            prop_assert!((prod - Mat::identity(n, n)).amax() <= 1e-9);
        }

        #[test]
        fn rank_ignores_permutations(
            (left, right) in (1usize..=6, 1usize..=6, 0usize..=4).prop_flat_map(|(r, c, k)| (
                prop::collection::vec(-1.0..1.0f64, r * k),
                prop::collection::vec(-1.0..1.0f64, k * c),
            ).prop_map(move |(l, rr)| (Mat::from_vec(r, k, l), Mat::from_vec(k, c, rr)))),
            seed in any::<u64>(),
        ) {
            let m = &left * &right;
            let (r, c) = m.shape();
            let perm = |len: usize, salt: u64| {
                let mut p: Vec<usize> = (0..len).collect();
                let mut s = seed ^ salt;
                for i in (1..len).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    p.swap(i, (s >> 33) as usize % (i + 1));
                }
                p
            };
            let (pr, pc) = (perm(r, 1), perm(c, 2));
            let permuted = Mat::from_fn(r, c, |i, j| m[(pr[i], pc[j])]);
            prop_assert_eq!(rank(&m, 1e-9), rank(&permuted, 1e-9));
            prop_assert!(rank(&m, 1e-9) <= left.ncols());
        }

        #[test]
        fn radius_is_similarity_invariant(m in matrix(6, 1.0), p in matrix(6, 0.3)) {
            let n = m.nrows().min(p.nrows());
            let m = m.view((0, 0), (n, n)).into_owned();
            let p = Mat::identity(n, n) + p.view((0, 0), (n, n));
            let pinv = p.clone().try_inverse().unwrap();
            let sv = p.singular_values();
            prop_assume!(sv.max() / sv.min() < 10.0);
            let a = spectral_radius(&m).unwrap();
            let b = spectral_radius(&(&p * &m * pinv)).unwrap();
            prop_assert!((a - b).abs() <= 1e-7, "{} vs {}", a, b);
        }
    }

    #[test]
    fn helmert_is_orthonormal_complement_up_to_twenty() {
        for q in 2..=20 {
            let d = helmert_basis(q).unwrap();
            assert!((d.tr_mul(&d) - Mat::identity(q - 1, q - 1)).amax() <= 1e-12);
            assert!((d.transpose() * Vector::repeat(q, 1.0)).amax() <= 1e-12);
        }
    }
}
