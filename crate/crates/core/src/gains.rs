//! Closed-form gains produced by the distributed algorithm, and their
//! certification.
//!
//! The control horizon `τ_c` enters through `e^{Λτ_c}` and the observer
//! horizon `τ_o` through `e^{−Γτ_o}`. Passing `f64::INFINITY` for either
//! horizon replaces the exponential by zero, which gives the limit gains.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::array::{
    krylov_columns, krylov_rows, ArrayModel, BigSystem, ProjectionBasis, ReducedSystem,
};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, expm, inv_spd, is_schur, powi, rank, solve_spd, spectral_radius, Mat, Vector,
};

/// Design parameters of the algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_c: usize,
    pub n_o: usize,
    #[serde(with = "crate::serde_ext::horizon")]
    pub tau_c: f64,
    #[serde(with = "crate::serde_ext::horizon")]
    pub tau_o: f64,
    #[serde(default = "SynthParams::default_margin")]
    pub schur_margin: f64,
}

impl SynthParams {
    pub const DEFAULT_MARGIN: f64 = 1e-6;

    fn default_margin() -> f64 {
        Self::DEFAULT_MARGIN
    }

    pub fn new(n_c: usize, n_o: usize, tau_c: f64, tau_o: f64) -> Self {
        Self {
            n_c,
            n_o,
            tau_c,
            tau_o,
            schur_margin: Self::DEFAULT_MARGIN,
        }
    }

    /// Same horizons `N_c = N_o = n`, limit gains.
    pub fn limit(n: usize) -> Self {
        Self::new(n, n, f64::INFINITY, f64::INFINITY)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_c < n || self.n_o < n {
            return Err(Error::InvalidParam(format!(
                "N_c = {} and N_o = {} must both be >= n = {n}",
                self.n_c, self.n_o
            )));
        }
        for (name, tau) in [("tau_c", self.tau_c), ("tau_o", self.tau_o)] {
            if !(tau > 0.0) {
                return Err(Error::InvalidParam(format!(
                    "{name} must be > 0, got {tau}"
                )));
            }
        }
        if !(self.schur_margin >= 0.0 && self.schur_margin < 1.0) {
            return Err(Error::InvalidParam(format!(
                "schur_margin must lie in [0, 1), got {}",
                self.schur_margin
            )));
        }
        Ok(())
    }
}

/// `R = [Bbig, Abig Bbig, …, Abig^{N_c−1} Bbig]`.
pub fn build_r(big: &BigSystem, n_c: usize) -> Mat {
    krylov_columns(&big.a, &big.b, n_c)
}

/// `Λ = [[−I, −Rᵀ Dbig], [Dbigᵀ R, 0]]`.
pub fn build_lambda(basis: &ProjectionBasis, r: &Mat) -> Mat {
    let dtr = basis.dbig.tr_mul(r);
    let (k, w) = (dtr.nrows(), dtr.ncols());
    let mut lambda = Mat::zeros(w + k, w + k);
    lambda
        .view_mut((0, 0), (w, w))
        .copy_from(&(-Mat::identity(w, w)));
    lambda
        .view_mut((0, w), (w, k))
        .copy_from(&(-dtr.transpose()));
    lambda.view_mut((w, 0), (k, w)).copy_from(&dtr);
    lambda
}

/// `Q = [Cbig; Cbig Abig; …; Cbig Abig^{N_o−1}]`.
pub fn build_q(big: &BigSystem, n_o: usize) -> Mat {
    krylov_rows(&big.c, &big.a, n_o)
}

/// `Γ = Dbigᵀ Qᵀ Q Dbig`.
pub fn build_gamma(q: &Mat, basis: &ProjectionBasis) -> Mat {
    let qd = q * &basis.dbig;
    let g = qd.tr_mul(&qd);
    (&g + g.transpose()) * 0.5
}

/// Pieces of the control gain that do not depend on `τ_c`:
/// `K(τ) = row · (I − e^{Λτ}) · lift`.
#[derive(Debug, Clone)]
pub struct ControlDesign {
    pub r: Mat,
    pub lambda: Mat,
    /// `[Bᵀ A^{(N_c−1)T} D (DᵀRRᵀD)⁻¹ DᵀR − e_{N_c}ᵀ⊗I | Bᵀ A^{(N_c−1)T} D (DᵀRRᵀD)⁻¹]`
    pub row: Mat,
    /// `[0; Dbigᵀ Abig^{N_c}]`
    pub lift: Mat,
    /// `Dbigᵀ Bbig · row` and `lift · Dbig`, cached for `θ_c`.
    left_r: Mat,
    right_r: Mat,
}

impl ControlDesign {
    pub fn new(big: &BigSystem, basis: &ProjectionBasis, n_c: usize) -> Result<Self> {
        let p = big.inputs();
        let dbig = &basis.dbig;
        let r = build_r(big, n_c);
        let dtr = dbig.tr_mul(&r);
        let k = dtr.nrows();
        let w = dtr.ncols();
        let gram_inv = inv_spd(&(&dtr * dtr.transpose()))?;

        // Bᵀ A^{(N_c−1)T} Dbig (DᵀRRᵀD)⁻¹
        let last = r.columns(w - p, p);
        let head = last.tr_mul(dbig) * &gram_inv;

        let mut row = Mat::zeros(p, w + k);
        let mut left = &head * &dtr;
        for c in 0..p {
            left[(c, w - p + c)] -= 1.0;
        }
        row.view_mut((0, 0), (p, w)).copy_from(&left);
        row.view_mut((0, w), (p, k)).copy_from(&head);

        let mut lift = Mat::zeros(w + k, big.state_dim());
        lift.view_mut((w, 0), (k, big.state_dim()))
            .copy_from(&dbig.tr_mul(&powi(&big.a, n_c)));

        let left_r = dbig.tr_mul(&big.b) * &row;
        let right_r = &lift * dbig;
        Ok(Self {
            lambda: build_lambda(basis, &r),
            r,
            row,
            lift,
            left_r,
            right_r,
        })
    }

    fn exp_lambda(&self, tau: f64) -> Result<Mat> {
        if tau.is_infinite() {
            let n = self.lambda.nrows();
            return Ok(Mat::zeros(n, n));
        }
        expm(&(&self.lambda * tau))
    }

    /// `K(τ_c)`, size `P × qn`.
    pub fn gain(&self, tau: f64) -> Result<Mat> {
        let e = self.exp_lambda(tau)?;
        let n = e.nrows();
        Ok(&self.row * (Mat::identity(n, n) - e) * &self.lift)
    }

    /// `θ_c(τ) = DbigᵀBbig · row · e^{Λτ} · lift · Dbig`.
    pub fn theta(&self, tau: f64) -> Result<Mat> {
        let e = self.exp_lambda(tau)?;
        Ok(self.theta_from_exp(&e))
    }

    fn theta_from_exp(&self, e: &Mat) -> Mat {
        &self.left_r * e * &self.right_r
    }
}

/// Pieces of the observer gain that do not depend on `τ_o`:
/// `L(τ) = left · Γ⁻¹(I − e^{−Γτ}) · right`.
#[derive(Debug, Clone)]
pub struct ObserverDesign {
    pub q: Mat,
    pub gamma: Mat,
    /// `Abig^{N_o} Dbig`
    pub left: Mat,
    /// `Dbigᵀ Abig^{(N_o−1)T} Cbigᵀ`
    pub right: Mat,
    dbig: Mat,
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    c_d: Mat,
}

impl ObserverDesign {
    pub fn new(big: &BigSystem, basis: &ProjectionBasis, n_o: usize) -> Result<Self> {
        let dbig = basis.dbig.clone();
        let q = build_q(big, n_o);
        let gamma = build_gamma(&q, basis);
        cholesky(&gamma)?;
        let eig = gamma.clone().symmetric_eigen();
        let left = powi(&big.a, n_o) * &dbig;
        let right = (&big.c * powi(&big.a, n_o - 1) * &dbig).transpose();
        Ok(Self {
            c_d: &big.c * &dbig,
            q,
            gamma,
            left,
            right,
            dbig,
            eig,
        })
    }

    /// `Γ⁻¹ f(Γ)` through the eigendecomposition of `Γ`.
    fn spectral(&self, f: impl Fn(f64) -> f64) -> Mat {
        let v = &self.eig.eigenvectors;
        let d = Vector::from_iterator(
            self.eig.eigenvalues.len(),
            self.eig.eigenvalues.iter().map(|&l| f(l) / l),
        );
        v * Mat::from_diagonal(&d) * v.transpose()
    }

    /// `Γ⁻¹ (I − e^{−Γτ})`.
    pub fn integrated(&self, tau: f64) -> Mat {
        if tau.is_infinite() {
            return self.spectral(|_| 1.0);
        }
        self.spectral(|l| -(-l * tau).exp_m1())
    }

    /// `Γ⁻¹ e^{−Γτ}`.
    fn decayed(&self, tau: f64) -> Mat {
        if tau.is_infinite() {
            let k = self.gamma.nrows();
            return Mat::zeros(k, k);
        }
        self.spectral(|l| (-l * tau).exp())
    }

    /// `L(τ_o)`, size `qn × M`.
    pub fn gain(&self, tau: f64) -> Mat {
        &self.left * self.integrated(tau) * &self.right
    }

    /// `θ_o(τ) = Dbigᵀ Abig^{N_o} Dbig Γ⁻¹ e^{−Γτ} Dbigᵀ Abig^{(N_o−1)T} Cbigᵀ Cbig Dbig`.
    pub fn theta(&self, tau: f64) -> Mat {
        self.dbig.tr_mul(&self.left) * self.decayed(tau) * &self.right * &self.c_d
    }

    /// Closed-form solution at time `t` of `ξ̇ = −QᵀQ ξ + β`, `ξ(0) = 0`, for
    /// `β = Abig^{(N_o−1)T} Cbigᵀ (y − Cbig x̂)`: `ξ(t) = Dbig Γ⁻¹(I − e^{−Γt}) Dbigᵀ β`.
    pub fn xi(&self, t: f64, beta: &Vector) -> Vector {
        &self.dbig * (self.integrated(t) * self.dbig.tr_mul(beta))
    }
}

/// Kleinman feedback `F − G Gᵀ F^{(N−1)T} (Σ_{ℓ<N} F^ℓ G Gᵀ F^{ℓT})⁻¹ F^N`.
pub fn kleinman(f: &Mat, g: &Mat, horizon: usize) -> Result<Mat> {
    let n = f.nrows();
    let mut gram = Mat::zeros(n, n);
    let mut fg = g.clone();
    for _ in 0..horizon {
        gram += &fg * fg.transpose();
        fg = f * fg;
    }
    let solved = solve_spd(&gram, &powi(f, horizon))?;
    Ok(f - g * (powi(f, horizon - 1) * g).transpose() * solved)
}

/// `(H_c, H_o)` computed from the reduced system alone.
pub fn kleinman_pair(reduced: &ReducedSystem, n_c: usize, n_o: usize) -> Result<(Mat, Mat)> {
    let needed = reduced.a.nrows();
    let h_c = kleinman(&reduced.a, &reduced.b, n_c).map_err(|_| Error::NotControllable {
        rank: rank(&krylov_columns(&reduced.a, &reduced.b, n_c), 1e-9),
        needed,
    })?;
    let at = reduced.a.transpose();
    let ct = reduced.c.transpose();
    let h_o = kleinman(&at, &ct, n_o)
        .map_err(|_| Error::NotObservable {
            rank: rank(&krylov_columns(&at, &ct, n_o), 1e-9),
            needed,
        })?
        .transpose();
    Ok((h_c, h_o))
}

/// `Φ_r = [[A_r − B_r K_r, −B_r K_r], [0, A_r − L_r C_r]]`.
pub fn phi_r(reduced: &ReducedSystem, k_r: &Mat, l_r: &Mat) -> Mat {
    let k = reduced.a.nrows();
    let bk = &reduced.b * k_r;
    let mut phi = Mat::zeros(2 * k, 2 * k);
    phi.view_mut((0, 0), (k, k)).copy_from(&(&reduced.a - &bk));
    phi.view_mut((0, k), (k, k)).copy_from(&(-bk));
    phi.view_mut((k, k), (k, k))
        .copy_from(&(&reduced.a - l_r * &reduced.c));
    phi
}

/// All gains and certification matrices for one parameter choice.
#[derive(Debug, Clone)]
pub struct GainSet {
    pub params: SynthParams,
    pub r: Mat,
    pub lambda: Mat,
    pub q: Mat,
    pub gamma: Mat,
    pub k: Mat,
    pub l: Mat,
    pub k_r: Mat,
    pub l_r: Mat,
    pub h_c: Mat,
    pub h_o: Mat,
    pub theta_c_val: Mat,
    pub theta_o_val: Mat,
    pub phi_r: Mat,
    /// Spectral radius of `A_r − B_r K_r`.
    pub rho_c: f64,
    /// Spectral radius of `A_r − L_r C_r`.
    pub rho_o: f64,
    pub rho_phi: f64,
}

/// Which closed-loop block a threshold search targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loop {
    Control,
    Observe,
}

impl Loop {
    fn name(self) -> &'static str {
        match self {
            Loop::Control => "control",
            Loop::Observe => "observe",
        }
    }
}

/// Doubling grid plus bisection for the smallest certified horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSearch {
    pub tau0: f64,
    pub tau_max: f64,
    pub bisection_steps: usize,
    /// Number of doubled horizons `2τ, 4τ, …` that must also pass.
    pub probes: usize,
}

impl Default for ThresholdSearch {
    fn default() -> Self {
        Self {
            tau0: 0.125,
            tau_max: 1e4,
            bisection_steps: 20,
            probes: 3,
        }
    }
}

/// Everything that depends on the array and on `(N_c, N_o)` but not on the horizons.
#[derive(Debug, Clone)]
pub struct Designer {
    pub n_c: usize,
    pub n_o: usize,
    pub reduced: ReducedSystem,
    pub control: ControlDesign,
    pub observer: ObserverDesign,
    pub h_c: Mat,
    pub h_o: Mat,
    dbig: Mat,
}

impl Designer {
    pub fn new(model: &ArrayModel, n_c: usize, n_o: usize) -> Result<Self> {
        let n = model.big.n;
        if n_c < n || n_o < n {
            return Err(Error::InvalidParam(format!(
                "N_c = {n_c} and N_o = {n_o} must both be >= n = {n}"
            )));
        }
        let control = ControlDesign::new(&model.big, &model.basis, n_c)?;
        let observer = ObserverDesign::new(&model.big, &model.basis, n_o)?;
        let (h_c, h_o) = kleinman_pair(&model.reduced, n_c, n_o)?;
        Ok(Self {
            n_c,
            n_o,
            reduced: model.reduced.clone(),
            control,
            observer,
            h_c,
            h_o,
            dbig: model.basis.dbig.clone(),
        })
    }

    pub fn theta_c(&self, tau: f64) -> Result<Mat> {
        self.control.theta(tau)
    }

    pub fn theta_o(&self, tau: f64) -> Mat {
        self.observer.theta(tau)
    }

    /// `H + θ(τ)` for the selected loop.
    pub fn perturbed_block(&self, which: Loop, tau: f64) -> Result<Mat> {
        Ok(match which {
            Loop::Control => &self.h_c + self.theta_c(tau)?,
            Loop::Observe => &self.h_o + self.theta_o(tau),
        })
    }

    /// `H + θ(τ·2^k)` for `k = 0..=probes`. The control exponentials are
    /// obtained by repeated squaring of `e^{Λτ}`.
    fn doubling_blocks(&self, which: Loop, tau: f64, probes: usize) -> Result<Vec<Mat>> {
        match which {
            Loop::Control => {
                let mut e = self.control.exp_lambda(tau)?;
                let mut out = Vec::with_capacity(probes + 1);
                for k in 0..=probes {
                    out.push(&self.h_c + self.control.theta_from_exp(&e));
                    if k < probes {
                        e = &e * &e;
                    }
                }
                Ok(out)
            }
            Loop::Observe => Ok((0..=probes)
                .map(|k| &self.h_o + self.theta_o(tau * 2f64.powi(k as i32)))
                .collect()),
        }
    }

    pub fn gains(&self, params: &SynthParams) -> Result<GainSet> {
        let k = self.control.gain(params.tau_c)?;
        let l = self.observer.gain(params.tau_o);
        let k_r = &k * &self.dbig;
        let l_r = self.dbig.tr_mul(&l);
        let phi = phi_r(&self.reduced, &k_r, &l_r);
        let k_dim = self.reduced.a.nrows();
        let rho_c = spectral_radius(&phi.view((0, 0), (k_dim, k_dim)).into_owned())?;
        let rho_o = spectral_radius(&phi.view((k_dim, k_dim), (k_dim, k_dim)).into_owned())?;
        let rho_phi = spectral_radius(&phi)?;
        Ok(GainSet {
            params: *params,
            r: self.control.r.clone(),
            lambda: self.control.lambda.clone(),
            q: self.observer.q.clone(),
            gamma: self.observer.gamma.clone(),
            theta_c_val: self.theta_c(params.tau_c)?,
            theta_o_val: self.theta_o(params.tau_o),
            h_c: self.h_c.clone(),
            h_o: self.h_o.clone(),
            k,
            l,
            k_r,
            l_r,
            phi_r: phi,
            rho_c,
            rho_o,
            rho_phi,
        })
    }

    /// Smallest horizon on the grid `τ₀·2^k`, refined by bisection, at which
    /// `H + θ(τ)` is Schur with `margin` and stays so at `2τ, 4τ, …` for
    /// `search.probes` doublings.
    pub fn find_tau_threshold(
        &self,
        which: Loop,
        margin: f64,
        search: &ThresholdSearch,
    ) -> Result<f64> {
        let certified = |tau: f64| -> Result<bool> {
            Ok(self
                .doubling_blocks(which, tau, search.probes)?
                .iter()
                .all(|m| is_schur(m, margin)))
        };

        let mut prev = None;
        let mut tau = search.tau0;
        while tau <= search.tau_max {
            if certified(tau)? {
                let Some(mut lo) = prev else {
                    log::debug!("{} threshold at first grid point {tau}", which.name());
                    return Ok(tau);
                };
                log::debug!("{} grid bracket [{lo}, {tau}]", which.name());
                let mut hi = tau;
                for _ in 0..search.bisection_steps {
                    let mid = 0.5 * (lo + hi);
                    if certified(mid)? {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                log::debug!("{} threshold {hi}", which.name());
                return Ok(hi);
            }
            prev = Some(tau);
            tau *= 2.0;
        }
        Err(Error::NoThreshold {
            which: which.name(),
            tau_max: search.tau_max,
        })
    }
}

/// `K(τ_c)` for the given array.
pub fn compute_k(model: &ArrayModel, params: &SynthParams) -> Result<Mat> {
    ControlDesign::new(&model.big, &model.basis, params.n_c)?.gain(params.tau_c)
}

/// `L(τ_o)` for the given array.
pub fn compute_l(model: &ArrayModel, params: &SynthParams) -> Result<Mat> {
    Ok(ObserverDesign::new(&model.big, &model.basis, params.n_o)?.gain(params.tau_o))
}

/// Builds every gain and certification matrix for `params`.
pub fn synthesize(model: &ArrayModel, params: &SynthParams) -> Result<GainSet> {
    params.validate(model.big.n)?;
    Designer::new(model, params.n_c, params.n_o)?.gains(params)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::linalg::{is_hurwitz, is_schur, max_symmetric_eigenvalue, rank};
    use crate::scenario::{gen_random, Topology};
    use proptest::prelude::*;

    fn certified() -> impl Strategy<Value = ArrayModel> {
        (
            2usize..=4,
            1usize..=3,
            0usize..3,
            1usize..=2,
            1usize..=2,
            any::<u64>(),
        )
            .prop_filter_map("generation failed", |(q, n, t, p, m, seed)| {
                let top = [Topology::Complete, Topology::Ring, Topology::Path][t];
                let spec = gen_random(q, n, top, p, m, 1.0, seed).ok()?;
                ArrayModel::new(spec).ok()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn reduced_krylov_has_full_row_rank(model in certified(), extra in 0usize..2) {
            let n_c = model.big.n + extra;
            let r = build_r(&model.big, n_c);
            prop_assert_eq!(rank(&model.basis.dbig.tr_mul(&r), 1e-9), model.big.disagreement_dim());
        }

        #[test]
        fn lambda_and_gamma_certificates(model in certified()) {
            let n = model.big.n;
            let d = Designer::new(&model, n, n).unwrap();
            prop_assert!(is_hurwitz(&d.control.lambda, 0.0));
            prop_assert!(max_symmetric_eigenvalue(&d.control.lambda).unwrap() <= 1e-12);
            let g = &d.observer.gamma;
            prop_assert!((g - g.transpose()).amax() <= 1e-12 * (1.0 + g.amax()));
            prop_assert!(cholesky(g).is_ok());
            prop_assert!(is_hurwitz(&(-g), 0.0));
            prop_assert!(is_schur(&d.h_c, 1e-6) && is_schur(&d.h_o, 1e-6));
        }

        #[test]
        fn gains_ignore_the_synchronized_subspace(model in certified(), tc in 0.05..20.0f64, to in 0.05..20.0f64) {
            let n = model.big.n;
            let gs = synthesize(&model, &SynthParams::new(n, n, tc, to)).unwrap();
            prop_assert!((&gs.k * &model.basis.sbig).amax() <= 1e-10 * (1.0 + gs.k.amax()));
            prop_assert!(model.basis.sbig.tr_mul(&gs.l).amax() <= 1e-10 * (1.0 + gs.l.amax()));
        }

        #[test]
        fn decomposition_identities_random_horizon(model in certified(), tau in 0.01..30.0f64) {
            let n = model.big.n;
            let d = Designer::new(&model, n, n).unwrap();
            let gs = d.gains(&SynthParams::new(n, n, tau, tau)).unwrap();
            let red = &d.reduced;
            let ctrl = &red.a - &red.b * &gs.k_r - (&gs.h_c + d.theta_c(tau).unwrap());
            let obs = &red.a - &gs.l_r * &red.c - (&gs.h_o + d.theta_o(tau));
            prop_assert!(ctrl.amax() <= 1e-9, "{:e}", ctrl.amax());
            prop_assert!(obs.amax() <= 1e-9, "{:e}", obs.amax());
        }

        #[test]
        fn xi_solves_its_differential_equation(
            model in certified(),
            t in 0.05..5.0f64,
            y in prop::collection::vec(-1.0..1.0f64, 12),
        ) {
            let n = model.big.n;
            let obs = ObserverDesign::new(&model.big, &model.basis, n).unwrap();
            let big = &model.big;
            let innov = Vector::from_fn(big.outputs(), |i, _| y[i % y.len()]);
            let beta = (&big.c * powi(&big.a, n - 1)).transpose() * innov;
            let qtq = obs.q.tr_mul(&obs.q);
            let dt = 1e-5;
            let fd = (obs.xi(t + dt, &beta) - obs.xi(t - dt, &beta)) / (2.0 * dt);
            let rhs = -(&qtq * obs.xi(t, &beta)) + &beta;
            let scale = 1.0 + rhs.amax();
            prop_assert!((&fd - &rhs).amax() <= 1e-6 * scale, "{:e}", (&fd - &rhs).amax());
            prop_assert!(obs.xi(0.0, &beta).amax() == 0.0);
        }
    }
}
