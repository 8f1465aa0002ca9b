//! Simulation of the array under the distributed algorithm.
//!
//! Three steppers produce the same trajectory in exact arithmetic:
//!
//! * [`Mode::Ode`] integrates the stacked continuous-time subproblems with
//!   classical RK4 at every discrete step. The stacked `(w, λ)` system is the
//!   per-pair/per-agent algorithm written with `Bbig`, so integrating it
//!   centrally is the same computation the agents perform jointly.
//! * [`Mode::ClosedForm`] replaces both integrations by their closed-form
//!   solutions: `u = −K x̂` and `ξ(τ_o) = Dbig Γ⁻¹(I − e^{−Γτ_o}) Dbigᵀ β`.
//! * [`Mode::ClosedLoop`] iterates `x⁺ = Abig x − Bbig K x̂`,
//!   `x̂⁺ = Abig x̂ − Bbig K x̂ + L (Cbig x − Cbig x̂)`.

use serde::{Deserialize, Serialize};

use crate::array::{disagreement_norm, ArrayModel};
use crate::error::{Error, Result};
use crate::gains::{build_q, build_r, Designer, GainSet, SynthParams};
use crate::linalg::{powi, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ode,
    #[serde(rename = "closedform")]
    ClosedForm,
    #[serde(rename = "closedloop")]
    ClosedLoop,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ode => "ode",
            Mode::ClosedForm => "closedform",
            Mode::ClosedLoop => "closedloop",
        }
    }
}

/// Discrete state carried from step to step.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoState {
    pub k: usize,
    pub x: Vector,
    pub xhat: Vector,
    /// Input applied at step `k − 1`.
    pub last_u: Vector,
    /// Output measured at step `k − 1`.
    pub last_y: Vector,
}

impl AlgoState {
    pub fn new(x: Vector, xhat: Vector, inputs: usize, outputs: usize) -> Self {
        Self {
            k: 0,
            x,
            xhat,
            last_u: Vector::zeros(inputs),
            last_y: Vector::zeros(outputs),
        }
    }
}

/// Continuous-time variables of one discrete step. Zeroed at the start of every step.
#[derive(Debug, Clone)]
pub struct OdeWorkspace {
    /// `w = [w^{[N_c−1]}; …; w^{[0]}]`, each block stacking the `i < j` pairs.
    pub w: Vector,
    pub lambda: Vector,
    pub xi: Vector,
    pub h: f64,
}

impl OdeWorkspace {
    pub fn new(w_dim: usize, state_dim: usize, h: f64) -> Self {
        Self {
            w: Vector::zeros(w_dim),
            lambda: Vector::zeros(state_dim),
            xi: Vector::zeros(state_dim),
            h,
        }
    }

    pub fn reset(&mut self) {
        self.w.fill(0.0);
        self.lambda.fill(0.0);
        self.xi.fill(0.0);
    }
}

/// Integrates `ż = rhs(z)` from `z` over `[0, t_end]` with classical RK4, using
/// `ceil(t_end / h)` equal steps.
pub fn rk4<F>(mut z: Vector, t_end: f64, h: f64, rhs: F) -> Vector
where
    F: Fn(&Vector) -> Vector,
{
    if t_end <= 0.0 {
        return z;
    }
    let steps = (t_end / h).ceil().max(1.0) as usize;
    let dt = t_end / steps as f64;
    for _ in 0..steps {
        let k1 = rhs(&z);
        let k2 = rhs(&(&z + &k1 * (0.5 * dt)));
        let k3 = rhs(&(&z + &k2 * (0.5 * dt)));
        let k4 = rhs(&(&z + &k3 * dt));
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// RK4 step; `None` means `min(τ_c, τ_o)/2000`.
    pub h: Option<f64>,
    /// Abort once any state norm exceeds this.
    pub divergence_limit: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            h: None,
            divergence_limit: 1e12,
        }
    }
}

impl SimOptions {
    pub fn step_size(&self, params: &SynthParams) -> f64 {
        self.h.unwrap_or(params.tau_c.min(params.tau_o) / 2000.0)
    }
}

/// Per-run record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTrace {
    pub mode: Mode,
    pub params: SynthParams,
    pub seed: Option<u64>,
    /// `x[0..=steps]`
    pub x: Vec<Vec<f64>>,
    pub xhat: Vec<Vec<f64>>,
    /// `u[0..steps]`
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// `δ[k] = ‖Dbigᵀ x[k]‖`
    pub delta: Vec<f64>,
    /// `r[k] = ‖Sbigᵀ x[k] − A Sbigᵀ x[k−1]‖`, with `r[0] = 0`.
    pub avg_residual: Vec<f64>,
}

impl SimTrace {
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn state_norm(&self, k: usize) -> f64 {
        self.x[k].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Worst `r[k] / (1 + ‖x[k−1]‖)` over the run.
    pub fn max_relative_avg_residual(&self) -> f64 {
        (1..self.avg_residual.len())
            .map(|k| self.avg_residual[k] / (1.0 + self.state_norm(k - 1)))
            .fold(0.0, f64::max)
    }

    /// Least-squares slope of `ln δ[k]` over the samples above `floor`,
    /// returned as a per-step contraction factor.
    pub fn fitted_decay_rate(&self, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .delta
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > floor)
            .map(|(k, &d)| (k as f64, d.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        (sxx > 0.0).then(|| (sxy / sxx).exp())
    }
}

/// Precomputed matrices for stepping one array under fixed parameters.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    model: &'a ArrayModel,
    pub params: SynthParams,
    pub gains: GainSet,
    designer: Designer,
    opts: SimOptions,
    /// `R`, `Abig^{N_c}`, `QᵀQ`, `Abig^{(N_o−1)T} Cbigᵀ`, `Abig^{N_o}`.
    r: Mat,
    a_nc: Mat,
    qtq: Mat,
    obs_in: Mat,
    a_no: Mat,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a ArrayModel, params: SynthParams, opts: SimOptions) -> Result<Self> {
        params.validate(model.big.n)?;
        let designer = Designer::new(model, params.n_c, params.n_o)?;
        let gains = designer.gains(&params)?;
        Self::with_gains(model, params, opts, designer, gains)
    }

    pub fn with_gains(
        model: &'a ArrayModel,
        params: SynthParams,
        opts: SimOptions,
        designer: Designer,
        gains: GainSet,
    ) -> Result<Self> {
        let big = &model.big;
        let q = build_q(big, params.n_o);
        Ok(Self {
            r: build_r(big, params.n_c),
            a_nc: powi(&big.a, params.n_c),
            qtq: q.tr_mul(&q),
            obs_in: (&big.c * powi(&big.a, params.n_o - 1)).transpose(),
            a_no: powi(&big.a, params.n_o),
            model,
            params,
            gains,
            designer,
            opts,
        })
    }

    pub fn model(&self) -> &ArrayModel {
        self.model
    }

    /// Overrides the RK4 step of the integrated mode.
    pub fn set_step(&mut self, h: f64) {
        self.opts.h = Some(h);
    }

    pub fn workspace(&self) -> OdeWorkspace {
        OdeWorkspace::new(
            self.r.ncols(),
            self.model.big.state_dim(),
            self.opts.step_size(&self.params),
        )
    }

    fn advance(&self, state: &AlgoState, u: Vector, y: Vector, xi: &Vector) -> Result<AlgoState> {
        let big = &self.model.big;
        let bu = &big.b * &u;
        let x = &big.a * &state.x + &bu;
        let xhat = &big.a * &state.xhat + &self.a_no * xi + bu;
        let next = AlgoState {
            k: state.k + 1,
            x,
            xhat,
            last_u: u,
            last_y: y,
        };
        self.guard(&next)?;
        Ok(next)
    }

    fn guard(&self, s: &AlgoState) -> Result<()> {
        for (name, v) in [("x", &s.x), ("xhat", &s.xhat)] {
            let norm = v.norm();
            if !norm.is_finite() || norm > self.opts.divergence_limit {
                return Err(Error::Diverged {
                    step: s.k,
                    detail: format!("|{name}| = {norm:.3e}"),
                });
            }
        }
        Ok(())
    }

    /// One step of the algorithm with both continuous-time subproblems
    /// integrated numerically.
    pub fn step_distributed(&self, state: &AlgoState, ws: &mut OdeWorkspace) -> Result<AlgoState> {
        let (tau_c, tau_o) = (self.params.tau_c, self.params.tau_o);
        if !tau_c.is_finite() || !tau_o.is_finite() {
            return Err(Error::InvalidParam(
                "the integrated algorithm needs finite horizons".into(),
            ));
        }
        let big = &self.model.big;
        ws.reset();
        let y = &big.c * &state.x;

        // ẇ = −w − Rᵀλ,  λ̇ = R w + Abig^{N_c} x̂
        let wd = ws.w.len();
        let forcing = &self.a_nc * &state.xhat;
        let mut z = Vector::zeros(wd + ws.lambda.len());
        z.rows_mut(0, wd).copy_from(&ws.w);
        z.rows_mut(wd, ws.lambda.len()).copy_from(&ws.lambda);
        let r = &self.r;
        let z = rk4(z, tau_c, ws.h, |z| {
            let w = z.rows(0, wd);
            let lam = z.rows(wd, z.len() - wd);
            let mut dz = Vector::zeros(z.len());
            dz.rows_mut(0, wd).copy_from(&(-w - r.tr_mul(&lam)));
            dz.rows_mut(wd, z.len() - wd).copy_from(&(r * w + &forcing));
            dz
        });
        ws.w.copy_from(&z.rows(0, wd));
        ws.lambda.copy_from(&z.rows(wd, z.len() - wd));
        let p = big.inputs();
        let u = ws.w.rows(wd - p, p).into_owned();

        // ξ̇ = −QᵀQ ξ + Abig^{(N_o−1)T} Cbigᵀ (y − Cbig x̂)
        let beta = &self.obs_in * (&y - &big.c * &state.xhat);
        let qtq = &self.qtq;
        ws.xi = rk4(ws.xi.clone(), tau_o, ws.h, |xi| &beta - qtq * xi);

        let xi = ws.xi.clone();
        self.advance(state, u, y, &xi)
    }

    /// One step with the closed-form solutions of both subproblems.
    pub fn step_closedform(&self, state: &AlgoState) -> Result<AlgoState> {
        let big = &self.model.big;
        let y = &big.c * &state.x;
        let u = -(&self.gains.k * &state.xhat);
        let beta = &self.obs_in * (&y - &big.c * &state.xhat);
        let xi = self.designer.observer.xi(self.params.tau_o, &beta);
        self.advance(state, u, y, &xi)
    }

    /// One step of the explicit closed loop.
    pub fn step_closedloop(&self, state: &AlgoState) -> Result<AlgoState> {
        let big = &self.model.big;
        let y = &big.c * &state.x;
        let u = -(&self.gains.k * &state.xhat);
        let bu = &big.b * &u;
        let x = &big.a * &state.x + &bu;
        let xhat = &big.a * &state.xhat + bu + &self.gains.l * (&y - &big.c * &state.xhat);
        let next = AlgoState {
            k: state.k + 1,
            x,
            xhat,
            last_u: u,
            last_y: y,
        };
        self.guard(&next)?;
        Ok(next)
    }

    pub fn step(&self, mode: Mode, state: &AlgoState, ws: &mut OdeWorkspace) -> Result<AlgoState> {
        match mode {
            Mode::Ode => self.step_distributed(state, ws),
            Mode::ClosedForm => self.step_closedform(state),
            Mode::ClosedLoop => self.step_closedloop(state),
        }
    }

    /// Runs `steps` steps from `(x0, xhat0)`.
    pub fn run(&self, mode: Mode, x0: &Vector, xhat0: &Vector, steps: usize) -> Result<SimTrace> {
        let big = &self.model.big;
        let basis = &self.model.basis;
        let dim = big.state_dim();
        if x0.len() != dim || xhat0.len() != dim {
            return Err(Error::Dimension {
                op: "run",
                detail: format!("initial states must have length {dim}"),
            });
        }
        if steps == 0 {
            return Err(Error::InvalidParam("steps must be >= 1".into()));
        }
        let mut ws = self.workspace();
        let mut state = AlgoState::new(x0.clone(), xhat0.clone(), big.inputs(), big.outputs());
        self.guard(&state)?;

        let avg = |x: &Vector| basis.sbig.tr_mul(x);
        let mut trace = SimTrace {
            mode,
            params: self.params,
            seed: None,
            x: vec![state.x.as_slice().to_vec()],
            xhat: vec![state.xhat.as_slice().to_vec()],
            u: Vec::with_capacity(steps),
            y: Vec::with_capacity(steps),
            delta: vec![disagreement_norm(basis, &state.x)],
            avg_residual: vec![0.0],
        };
        for _ in 0..steps {
            let next = self.step(mode, &state, &mut ws)?;
            let predicted = &big.a_agent * avg(&state.x);
            trace.avg_residual.push((avg(&next.x) - predicted).norm());
            trace.delta.push(disagreement_norm(basis, &next.x));
            trace.x.push(next.x.as_slice().to_vec());
            trace.xhat.push(next.xhat.as_slice().to_vec());
            trace.u.push(next.last_u.as_slice().to_vec());
            trace.y.push(next.last_y.as_slice().to_vec());
            state = next;
        }
        Ok(trace)
    }
}

/// Convenience wrapper: synthesize gains for `params` and simulate.
pub fn run(
    model: &ArrayModel,
    params: SynthParams,
    mode: Mode,
    x0: &Vector,
    xhat0: &Vector,
    steps: usize,
    opts: SimOptions,
) -> Result<SimTrace> {
    Simulator::new(model, params, opts)?.run(mode, x0, xhat0, steps)
}

/// Largest per-step gap between two traces, relative to the running maximum
/// of the reference state norm `‖(x, x̂)‖`.
pub fn max_relative_gap(reference: &SimTrace, other: &SimTrace) -> f64 {
    let mut scale: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..reference.x.len().min(other.x.len()) {
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        scale = scale.max((sq(&reference.x[k]) + sq(&reference.xhat[k])).sqrt());
        let diff: f64 = reference.x[k]
            .iter()
            .chain(&reference.xhat[k])
            .zip(other.x[k].iter().chain(&other.xhat[k]))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::scenario::{gen_random, Topology};
    use proptest::prelude::*;

    fn certified() -> impl Strategy<Value = ArrayModel> {
        (2usize..=4, 1usize..=3, 0usize..3, any::<u64>()).prop_filter_map(
            "generation failed",
            |(q, n, t, seed)| {
                let top = [Topology::Complete, Topology::Ring, Topology::Path][t];
                ArrayModel::new(gen_random(q, n, top, 1, 1, 1.0, seed).ok()?).ok()
            },
        )
    }

    fn state(dim: usize, v: &[f64]) -> Vector {
        Vector::from_fn(dim, |i, _| v[i % v.len()] * (1.0 + i as f64 / 7.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn integrated_input_matches_gain(
            model in certified(),
            tau in 0.2..1.5f64,
            v in prop::collection::vec(-1.0..1.0f64, 5),
            w in prop::collection::vec(-1.0..1.0f64, 7),
        ) {
            let n = model.big.n;
            let params = SynthParams::new(n, n, tau, tau);
            let opts = SimOptions { h: Some(1e-3 * tau.min(1.0)), ..SimOptions::default() };
            let sim = Simulator::new(&model, params, opts).unwrap();
            let dim = model.big.state_dim();
            let st = AlgoState::new(state(dim, &v), state(dim, &w), model.big.inputs(), model.big.outputs());
            let mut ws = sim.workspace();
            let ode = sim.step_distributed(&st, &mut ws).unwrap();
            let cf = sim.step_closedform(&st).unwrap();
            let u_ref = -(&sim.gains.k * &st.xhat);
            let scale = 1.0 + u_ref.amax();
            prop_assert!((&ode.last_u - &u_ref).amax() <= 1e-6 * scale);
            let gap = (&ode.x - &cf.x).amax().max((&ode.xhat - &cf.xhat).amax());
            prop_assert!(gap <= 1e-6 * (1.0 + cf.x.amax().max(cf.xhat.amax())));
        }

        #[test]
        fn closed_forms_agree_and_keep_the_average(
            model in certified(),
            tc in 0.1..10.0f64,
            to in 0.1..10.0f64,
            v in prop::collection::vec(-1.0..1.0f64, 5),
        ) {
            let n = model.big.n;
            let sim = Simulator::new(&model, SynthParams::new(n, n, tc, to), SimOptions::default()).unwrap();
            let dim = model.big.state_dim();
            let x0 = state(dim, &v);
            let xh0 = Vector::zeros(dim);
            let a = sim.run(Mode::ClosedForm, &x0, &xh0, 25).unwrap();
            let b = sim.run(Mode::ClosedLoop, &x0, &xh0, 25).unwrap();
            prop_assert!(max_relative_gap(&a, &b) <= 1e-10);
            prop_assert!(a.max_relative_avg_residual() <= 1e-9);
            prop_assert!(b.max_relative_avg_residual() <= 1e-9);
            prop_assert!(a.delta.iter().all(|d| *d >= 0.0));
        }
    }
}
