//! Scenario configs, random arrays, reports and the command workflows behind
//! the `relsync` binary.
//!
//! Every command is a pure function of the config (including its seed) and
//! returns a [`CommandOutput`]; writing files is left to the caller.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{
    controllability_rank, observability_rank, pair_order, ArrayModel, ArraySpec, Coupling,
};
use crate::error::{Error, Result};
use crate::gains::{Designer, GainSet, Loop, SynthParams, ThresholdSearch};
use crate::linalg::{max_symmetric_eigenvalue, spectrum, Mat, SpectrumReport, Vector};
use crate::sim::{max_relative_gap, Mode, SimOptions, SimTrace, Simulator};

pub type MatrixRows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub i: usize,
    pub j: usize,
    /// `B_ij` rows; omitted means no input on this pair.
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixRows>,
    /// `C_ij` rows; omitted means no output on this pair.
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<MatrixRows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub q: usize,
    pub n: usize,
    #[serde(rename = "A")]
    pub a: MatrixRows,
    #[serde(default)]
    pub couplings: Vec<CouplingConfig>,
}

fn default_margin() -> f64 {
    SynthParams::DEFAULT_MARGIN
}

fn default_rank_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    /// Defaults to `n`.
    #[serde(default)]
    pub n_c: Option<usize>,
    #[serde(default)]
    pub n_o: Option<usize>,
    /// Omitted horizons are found by the threshold search.
    #[serde(default, with = "opt_horizon", skip_serializing_if = "Option::is_none")]
    pub tau_c: Option<f64>,
    #[serde(default, with = "opt_horizon", skip_serializing_if = "Option::is_none")]
    pub tau_o: Option<f64>,
    #[serde(default = "default_margin")]
    pub schur_margin: f64,
    /// RK4 step for the integrated algorithm; defaults to `min(τ_c, τ_o)/2000`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default)]
    pub search: ThresholdSearch,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        Self {
            n_c: None,
            n_o: None,
            tau_c: None,
            tau_o: None,
            schur_margin: default_margin(),
            h: None,
            rank_tol: default_rank_tol(),
            search: ThresholdSearch::default(),
        }
    }
}

mod opt_horizon {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(t) => crate::serde_ext::horizon::serialize(t, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "crate::serde_ext::horizon")] f64);
        Option::<Wrap>::deserialize(d).map(|w| w.map(|Wrap(t)| t))
    }
}

/// Initial condition for `x[0]` or `x̂[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitState {
    Zero,
    Explicit(Vec<f64>),
    /// Entries uniform in `[−scale, scale]`, drawn from the scenario seed.
    Random {
        scale: f64,
    },
}

fn default_steps() -> usize {
    100
}

fn default_mode() -> Mode {
    Mode::ClosedForm
}

fn default_x0() -> InitState {
    InitState::Random { scale: 1.0 }
}

fn default_xhat0() -> InitState {
    InitState::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_x0")]
    pub x0: InitState,
    #[serde(default = "default_xhat0")]
    pub xhat0: InitState,
    #[serde(default = "default_divergence_limit")]
    pub divergence_limit: f64,
}

fn default_divergence_limit() -> f64 {
    SimOptions::default().divergence_limit
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            mode: default_mode(),
            x0: default_x0(),
            xhat0: default_xhat0(),
            divergence_limit: default_divergence_limit(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default = "default_trace")]
    pub trace: String,
    #[serde(default = "default_report")]
    pub report: String,
    #[serde(default = "default_sweep")]
    pub sweep: String,
}

fn default_trace() -> String {
    "trace.csv".into()
}

fn default_report() -> String {
    "report.json".into()
}

fn default_sweep() -> String {
    "sweep.csv".into()
}

impl Default for OutputsConfig {
    fn default() -> Self {
        Self {
            trace: default_trace(),
            report: default_report(),
            sweep: default_sweep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub spec: SpecConfig,
    #[serde(default)]
    pub params: ParamsConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
    #[serde(default)]
    pub seed: u64,
    /// Horizons evaluated by the sweep command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_taus: Option<Vec<f64>>,
}

fn matrix_from_rows(rows: &MatrixRows, cols_if_empty: usize, path: &str) -> Result<Mat> {
    let ncols = rows.first().map_or(cols_if_empty, |r| r.len());
    if let Some(k) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::config(
            format!("{path}[{k}]"),
            format!(
                "ragged row: expected {ncols} entries, got {}",
                rows[k].len()
            ),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(path, "non-finite entry"));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &Mat) -> MatrixRows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl SpecConfig {
    pub fn to_spec(&self) -> Result<ArraySpec> {
        let a = matrix_from_rows(&self.a, self.n, "spec.A")?;
        let mut couplings = Vec::with_capacity(self.couplings.len());
        for (k, cp) in self.couplings.iter().enumerate() {
            let b = match &cp.b {
                Some(rows) => matrix_from_rows(rows, 0, &format!("spec.couplings[{k}].B"))?,
                None => Mat::zeros(self.n, 0),
            };
            let c = match &cp.c {
                Some(rows) => matrix_from_rows(rows, self.n, &format!("spec.couplings[{k}].C"))?,
                None => Mat::zeros(0, self.n),
            };
            couplings.push(Coupling::new(cp.i, cp.j, b, c));
        }
        ArraySpec::new(self.q, self.n, a, couplings).map_err(|e| match e {
            Error::Config { path, message } => Error::Config {
                path: format!("spec.{path}"),
                message,
            },
            other => other,
        })
    }

    pub fn from_spec(spec: &ArraySpec) -> Self {
        Self {
            q: spec.q(),
            n: spec.n(),
            a: rows_of(spec.a()),
            couplings: spec
                .couplings()
                .iter()
                .map(|cp| CouplingConfig {
                    i: cp.i,
                    j: cp.j,
                    b: (cp.b.ncols() > 0).then(|| rows_of(&cp.b)),
                    c: (cp.c.nrows() > 0).then(|| rows_of(&cp.c)),
                })
                .collect(),
        }
    }
}

impl ScenarioConfig {
    /// Minimal config around an existing array; everything else defaulted.
    pub fn for_spec(spec: &ArraySpec) -> Self {
        Self {
            spec: SpecConfig::from_spec(spec),
            params: ParamsConfig::default(),
            sim: SimConfig::default(),
            outputs: OutputsConfig::default(),
            seed: 0,
            sweep_taus: None,
        }
    }

    /// Checks cross-field consistency and fills `n_c`/`n_o` defaults.
    pub fn validate(mut self) -> Result<Self> {
        let spec = self.spec.to_spec()?;
        let n = spec.n();
        let dim = spec.q() * n;
        let p = &mut self.params;
        let n_c = *p.n_c.get_or_insert(n);
        let n_o = *p.n_o.get_or_insert(n);
        if n_c < n {
            return Err(Error::config("params.n_c", format!("must be >= n = {n}")));
        }
        if n_o < n {
            return Err(Error::config("params.n_o", format!("must be >= n = {n}")));
        }
        for (path, tau) in [("params.tau_c", p.tau_c), ("params.tau_o", p.tau_o)] {
            if tau.is_some_and(|t| !(t > 0.0)) {
                return Err(Error::config(path, "must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&p.schur_margin) {
            return Err(Error::config("params.schur_margin", "must lie in [0, 1)"));
        }
        if p.h.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::config("params.h", "must be > 0"));
        }
        if !(p.rank_tol > 0.0 && p.rank_tol < 1.0) {
            return Err(Error::config("params.rank_tol", "must lie in (0, 1)"));
        }
        if !(p.search.tau0 > 0.0 && p.search.tau_max >= p.search.tau0) {
            return Err(Error::config("params.search", "need 0 < tau0 <= tau_max"));
        }
        if self.sim.steps == 0 {
            return Err(Error::config("sim.steps", "must be >= 1"));
        }
        for (path, init) in [("sim.x0", &self.sim.x0), ("sim.xhat0", &self.sim.xhat0)] {
            match init {
                InitState::Explicit(v) if v.len() != dim => {
                    return Err(Error::config(
                        format!("{path}.explicit"),
                        format!("expected {dim} entries, got {}", v.len()),
                    ))
                }
                InitState::Explicit(v) if v.iter().any(|x| !x.is_finite()) => {
                    return Err(Error::config(
                        format!("{path}.explicit"),
                        "non-finite entry",
                    ))
                }
                InitState::Random { scale } if !(*scale >= 0.0 && scale.is_finite()) => {
                    return Err(Error::config(
                        format!("{path}.random.scale"),
                        "must be >= 0",
                    ))
                }
                _ => {}
            }
        }
        if let Some(taus) = &self.sweep_taus {
            if let Some(k) = taus.iter().position(|t| !(*t > 0.0)) {
                return Err(Error::config(format!("sweep_taus[{k}]"), "must be > 0"));
            }
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `x[0]` and `x̂[0]`; random entries come from a generator seeded by `seed`.
    pub fn initial_states(&self, dim: usize) -> (Vector, Vector) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |init: &InitState| match init {
            InitState::Zero => Vector::zeros(dim),
            InitState::Explicit(v) => Vector::from_column_slice(v),
            InitState::Random { scale } => {
                Vector::from_fn(dim, |_, _| rng.gen_range(-1.0..=1.0) * scale)
            }
        };
        let x0 = draw(&self.sim.x0);
        let xhat0 = draw(&self.sim.xhat0);
        (x0, xhat0)
    }
}

/// Parses and validates a JSON config. Errors carry the JSON path of the offending field.
pub fn parse_config(text: &[u8]) -> Result<ScenarioConfig> {
    let text = std::str::from_utf8(text)
        .map_err(|e| Error::config("<input>", format!("not UTF-8: {e}")))?;
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    cfg.validate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Complete,
    Ring,
    Path,
}

impl Topology {
    pub fn pairs(self, q: usize) -> Vec<(usize, usize)> {
        match self {
            Topology::Complete => pair_order(q).collect(),
            Topology::Path => (1..q).map(|i| (i, i + 1)).collect(),
            Topology::Ring => {
                let mut pairs: Vec<_> = (1..q).map(|i| (i, i + 1)).collect();
                if q > 2 {
                    pairs.push((1, q));
                }
                pairs
            }
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Topology::Complete),
            "ring" => Ok(Topology::Ring),
            "path" => Ok(Topology::Path),
            other => Err(Error::InvalidParam(format!("unknown topology {other:?}"))),
        }
    }
}

pub const GENERATION_ATTEMPTS: usize = 100;

/// Random array with `A` uniform in `[−amp, amp]` and independent unit-scale
/// couplings per edge, resampled until relatively controllable and observable.
pub fn gen_random(
    q: usize,
    n: usize,
    topology: Topology,
    p: usize,
    m: usize,
    amp: f64,
    seed: u64,
) -> Result<ArraySpec> {
    if q < 2 || n < 1 {
        return Err(Error::InvalidParam(format!(
            "need q >= 2 and n >= 1, got q = {q}, n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Mat::from_fn(n, n, |_, _| rng.gen_range(-amp..=amp));
    let pairs = topology.pairs(q);
    for attempt in 0..GENERATION_ATTEMPTS {
        let couplings = pairs
            .iter()
            .map(|&(i, j)| {
                let b = Mat::from_fn(n, p, |_, _| rng.gen_range(-1.0..=1.0));
                let c = Mat::from_fn(m, n, |_, _| rng.gen_range(-1.0..=1.0));
                Coupling::new(i, j, b, c)
            })
            .collect();
        let spec = ArraySpec::new(q, n, a.clone(), couplings)?;
        let model = ArrayModel::new(spec)?;
        let need = model.big.disagreement_dim();
        if controllability_rank(&model.big, 1e-9) == need
            && observability_rank(&model.big, 1e-9) == need
        {
            log::debug!("gen_random: certified after {} attempt(s)", attempt + 1);
            return Ok(model.spec);
        }
    }
    Err(Error::GenerationFailed {
        attempts: GENERATION_ATTEMPTS,
    })
}

/// Process exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    CertificationFailed,
    NumericAbort,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::CertificationFailed => 2,
            Status::NumericAbort => 3,
        }
    }

    fn from_error(e: &Error) -> Self {
        if e.is_certification_failure() {
            Status::CertificationFailed
        } else {
            Status::NumericAbort
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub controllable: bool,
    pub observable: bool,
    pub ctrb_rank: usize,
    pub obsv_rank: usize,
    pub required_rank: usize,
    pub rank_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectra {
    pub lambda: SpectrumReport,
    pub neg_gamma: SpectrumReport,
    /// Largest eigenvalue of `(Λ + Λᵀ)/2`.
    pub lambda_sym_max: f64,
    pub h_c: SpectrumReport,
    pub h_o: SpectrumReport,
    pub phi_r: SpectrumReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub n_c: usize,
    pub n_o: usize,
    #[serde(with = "crate::serde_ext::horizon")]
    pub tau_c: f64,
    #[serde(with = "crate::serde_ext::horizon")]
    pub tau_o: f64,
    /// Horizons found by the threshold search, when the config left them open.
    pub threshold_c: Option<f64>,
    pub threshold_o: Option<f64>,
    pub schur_margin: f64,
    pub spectra: Spectra,
    pub rho_c: f64,
    pub rho_o: f64,
    pub rho_phi: f64,
    pub k_norm: f64,
    pub l_norm: f64,
    pub schur_certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub mode: Mode,
    pub steps: usize,
    pub delta_initial: f64,
    pub delta_final: f64,
    pub fitted_decay_rate: Option<f64>,
    pub max_relative_avg_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub steps: usize,
    pub h: f64,
    /// Max relative gap between the integrated and closed-form traces.
    pub max_gap: f64,
    pub max_gap_half_step: f64,
    pub gap_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub radius_c: f64,
    pub radius_o: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub status: Status,
    pub seed: u64,
    pub q: usize,
    pub n: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub certification: CertificationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
    pub diagnostics: Vec<String>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    fn fail(&mut self, e: &Error) {
        self.status = Status::from_error(e);
        self.diagnostics.push(e.to_string());
    }
}

/// Result of one command: the report plus any CSV artifacts.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub report: Report,
    pub trace_csv: Option<String>,
    pub sweep_csv: Option<String>,
}

impl CommandOutput {
    pub fn exit_code(&self) -> i32 {
        self.report.status.exit_code()
    }
}

/// Array and rank checks shared by every command.
struct Prepared {
    model: ArrayModel,
    report: Report,
}

fn prepare(command: &str, cfg: &ScenarioConfig) -> Result<Prepared> {
    let spec = cfg.spec.to_spec()?;
    let model = ArrayModel::new(spec)?;
    let tol = cfg.params.rank_tol;
    let need = model.big.disagreement_dim();
    let ctrb_rank = controllability_rank(&model.big, tol);
    let obsv_rank = observability_rank(&model.big, tol);
    let certification = CertificationReport {
        controllable: ctrb_rank == need,
        observable: obsv_rank == need,
        ctrb_rank,
        obsv_rank,
        required_rank: need,
        rank_tol: tol,
    };
    let mut report = Report {
        command: command.to_string(),
        status: Status::Ok,
        seed: cfg.seed,
        q: model.big.q,
        n: model.big.n,
        inputs: model.big.inputs(),
        outputs: model.big.outputs(),
        certification,
        synthesis: None,
        convergence: None,
        comparison: None,
        sweep: None,
        diagnostics: Vec::new(),
    };
    log::debug!("ranks: ctrb {ctrb_rank}, obsv {obsv_rank}, need {need}");
    if ctrb_rank != need {
        report.fail(&Error::NotControllable {
            rank: ctrb_rank,
            needed: need,
        });
    }
    if obsv_rank != need {
        report.fail(&Error::NotObservable {
            rank: obsv_rank,
            needed: need,
        });
    }
    Ok(Prepared { model, report })
}

/// Relative controllability and observability.
pub fn cmd_check(cfg: &ScenarioConfig) -> Result<CommandOutput> {
    let prep = prepare("check", cfg)?;
    Ok(CommandOutput {
        report: prep.report,
        trace_csv: None,
        sweep_csv: None,
    })
}

struct Synthesized {
    designer: Designer,
    params: SynthParams,
    gains: GainSet,
}

fn synthesize_into(
    model: &ArrayModel,
    cfg: &ScenarioConfig,
    report: &mut Report,
) -> Result<Synthesized> {
    let p = &cfg.params;
    let n = model.big.n;
    let (n_c, n_o) = (p.n_c.unwrap_or(n), p.n_o.unwrap_or(n));
    let designer = Designer::new(model, n_c, n_o)?;
    let threshold = |which, given: Option<f64>| -> Result<(f64, Option<f64>)> {
        match given {
            Some(t) => Ok((t, None)),
            None => {
                let t = designer.find_tau_threshold(which, p.schur_margin, &p.search)?;
                Ok((t, Some(t)))
            }
        }
    };
    let (tau_c, threshold_c) = threshold(Loop::Control, p.tau_c)?;
    let (tau_o, threshold_o) = threshold(Loop::Observe, p.tau_o)?;
    log::info!("horizons tau_c = {tau_c}, tau_o = {tau_o}");
    let params = SynthParams {
        n_c,
        n_o,
        tau_c,
        tau_o,
        schur_margin: p.schur_margin,
    };
    params.validate(n)?;
    let gains = designer.gains(&params)?;
    let spectra = Spectra {
        lambda: spectrum(&gains.lambda)?,
        neg_gamma: spectrum(&(-&gains.gamma))?,
        lambda_sym_max: max_symmetric_eigenvalue(&gains.lambda)?,
        h_c: spectrum(&gains.h_c)?,
        h_o: spectrum(&gains.h_o)?,
        phi_r: spectrum(&gains.phi_r)?.with_margin(p.schur_margin),
    };
    let schur_certified = spectra.phi_r.is_schur();
    report.synthesis = Some(SynthesisReport {
        n_c,
        n_o,
        tau_c,
        tau_o,
        threshold_c,
        threshold_o,
        schur_margin: p.schur_margin,
        rho_c: gains.rho_c,
        rho_o: gains.rho_o,
        rho_phi: gains.rho_phi,
        k_norm: gains.k.norm(),
        l_norm: gains.l.norm(),
        spectra,
        schur_certified,
    });
    Ok(Synthesized {
        designer,
        params,
        gains,
    })
}

fn with_synthesis<F>(command: &str, cfg: &ScenarioConfig, then: F) -> Result<CommandOutput>
where
    F: FnOnce(&ArrayModel, Synthesized, &mut CommandOutput) -> Result<()>,
{
    let Prepared { model, report } = prepare(command, cfg)?;
    let mut out = CommandOutput {
        report,
        trace_csv: None,
        sweep_csv: None,
    };
    if out.report.status != Status::Ok {
        return Ok(out);
    }
    let synth = match synthesize_into(&model, cfg, &mut out.report) {
        Ok(s) => s,
        Err(Error::Config { path, message }) => return Err(Error::Config { path, message }),
        Err(e) => {
            out.report.fail(&e);
            return Ok(out);
        }
    };
    if let Err(e) = then(&model, synth, &mut out) {
        if matches!(e, Error::Config { .. } | Error::InvalidParam(_)) {
            return Err(e);
        }
        out.report.fail(&e);
    }
    Ok(out)
}

/// Gains, Kleinman matrices and spectra. Fails certification unless `Φ_r` is
/// Schur with the configured margin.
pub fn cmd_synth(cfg: &ScenarioConfig) -> Result<CommandOutput> {
    with_synthesis("synth", cfg, |_, _, out| {
        let synth = out.report.synthesis.as_ref().expect("synthesis filled");
        if !synth.schur_certified {
            out.report.status = Status::CertificationFailed;
            out.report.diagnostics.push(format!(
                "Phi_r spectral radius {:.6} is not below 1 - {}",
                synth.rho_phi, synth.schur_margin
            ));
        }
        Ok(())
    })
}

fn sim_options(cfg: &ScenarioConfig) -> SimOptions {
    SimOptions {
        h: cfg.params.h,
        divergence_limit: cfg.sim.divergence_limit,
    }
}

fn convergence(trace: &SimTrace) -> ConvergenceReport {
    let delta0 = trace.delta[0];
    ConvergenceReport {
        mode: trace.mode,
        steps: trace.steps(),
        delta_initial: delta0,
        delta_final: *trace.delta.last().expect("nonempty trace"),
        fitted_decay_rate: trace.fitted_decay_rate(1e-12 * delta0.max(f64::MIN_POSITIVE)),
        max_relative_avg_residual: trace.max_relative_avg_residual(),
    }
}

/// Runs the configured mode and returns the trace CSV.
pub fn cmd_simulate(cfg: &ScenarioConfig) -> Result<CommandOutput> {
    with_synthesis("simulate", cfg, |model, synth, out| {
        let (x0, xhat0) = cfg.initial_states(model.big.state_dim());
        let sim = Simulator::with_gains(
            model,
            synth.params,
            sim_options(cfg),
            synth.designer,
            synth.gains,
        )?;
        let mut trace = sim.run(cfg.sim.mode, &x0, &xhat0, cfg.sim.steps)?;
        trace.seed = Some(cfg.seed);
        out.report.convergence = Some(convergence(&trace));
        out.trace_csv = Some(trace_csv(&trace, model.big.q, model.big.n));
        Ok(())
    })
}

/// Integrated vs. closed-form traces at step `h` and `h/2`.
pub fn cmd_compare(cfg: &ScenarioConfig) -> Result<CommandOutput> {
    with_synthesis("compare", cfg, |model, synth, out| {
        let (x0, xhat0) = cfg.initial_states(model.big.state_dim());
        let opts = sim_options(cfg);
        let h = opts.step_size(&synth.params);
        let steps = cfg.sim.steps;
        let sim = Simulator::with_gains(model, synth.params, opts, synth.designer, synth.gains)?;
        let reference = sim.run(Mode::ClosedForm, &x0, &xhat0, steps)?;
        let coarse = sim_with_step(&sim, h).run(Mode::Ode, &x0, &xhat0, steps)?;
        let fine = sim_with_step(&sim, h / 2.0).run(Mode::Ode, &x0, &xhat0, steps)?;
        let max_gap = max_relative_gap(&reference, &coarse);
        let max_gap_half_step = max_relative_gap(&reference, &fine);
        out.report.comparison = Some(ComparisonReport {
            steps,
            h,
            max_gap,
            max_gap_half_step,
            gap_ratio: max_gap / max_gap_half_step,
        });
        Ok(())
    })
}

fn sim_with_step<'a>(sim: &Simulator<'a>, h: f64) -> Simulator<'a> {
    let mut s = sim.clone();
    s.set_step(h);
    s
}

/// Default horizons for the sweep: `0.25, 0.5, …, 32`.
pub fn default_sweep_taus() -> Vec<f64> {
    (0..8).map(|k| 0.25 * 2f64.powi(k)).collect()
}

/// Spectral radius of `H_c + θ_c(τ)` and `H_o + θ_o(τ)` over a list of horizons.
pub fn cmd_sweep(cfg: &ScenarioConfig, taus: &[f64]) -> Result<CommandOutput> {
    let Prepared { model, report } = prepare("sweep", cfg)?;
    let mut out = CommandOutput {
        report,
        trace_csv: None,
        sweep_csv: None,
    };
    if out.report.status != Status::Ok {
        return Ok(out);
    }
    let n = model.big.n;
    let designer = match Designer::new(
        &model,
        cfg.params.n_c.unwrap_or(n),
        cfg.params.n_o.unwrap_or(n),
    ) {
        Ok(d) => d,
        Err(e) => {
            out.report.fail(&e);
            return Ok(out);
        }
    };
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let row = (|| -> Result<SweepRow> {
            Ok(SweepRow {
                tau,
                radius_c: spectrum(&designer.perturbed_block(Loop::Control, tau)?)?.spectral_radius,
                radius_o: spectrum(&designer.perturbed_block(Loop::Observe, tau)?)?.spectral_radius,
            })
        })();
        match row {
            Ok(r) => rows.push(r),
            Err(e) => {
                out.report.fail(&e);
                break;
            }
        }
    }
    let mut csv = String::from("tau,radius_c,radius_o\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.tau, r.radius_c, r.radius_o);
    }
    out.sweep_csv = Some(csv);
    out.report.sweep = Some(rows);
    Ok(out)
}

/// Trace CSV: `k,delta,avg_residual`, then `x{i}_{c}` and `xhat{i}_{c}` in agent-block order.
pub fn trace_csv(trace: &SimTrace, q: usize, n: usize) -> String {
    let mut out = String::from("k,delta,avg_residual");
    for prefix in ["x", "xhat"] {
        for i in 1..=q {
            for c in 1..=n {
                let _ = write!(out, ",{prefix}{i}_{c}");
            }
        }
    }
    out.push('\n');
    for k in 0..trace.x.len() {
        let _ = write!(out, "{k},{},{}", trace.delta[k], trace.avg_residual[k]);
        for v in trace.x[k].iter().chain(&trace.xhat[k]) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const E1: &str = r#"{
        "spec": {"q": 2, "n": 1, "A": [[2]], "couplings": [{"i": 1, "j": 2, "B": [[1]], "C": [[1]]}]},
        "params": {"tau_c": 20, "tau_o": 20},
        "sim": {"steps": 10, "x0": {"explicit": [1, 0]}}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(br#"{"spec": {"q": 2, "n": 1, "A": [[2]], "couplings": [{"i": 1, "j": 2, "B": [[1]], "C": [[1]]}]}}"#)
            .unwrap();
        assert_eq!(cfg.params.n_c, Some(1));
        assert_eq!(cfg.params.schur_margin, 1e-6);
        assert_eq!(cfg.params.h, None);
        assert_eq!(cfg.sim.steps, 100);
        assert_eq!(cfg.sim.xhat0, InitState::Zero);
        assert_eq!(cfg.outputs.trace, "trace.csv");
    }

    #[test]
    fn dimension_error_names_the_field() {
        let text = br#"{"spec": {"q": 2, "n": 1, "A": [[2]], "couplings": [{"i": 1, "j": 2, "B": [[1], [1]], "C": [[1]]}]}}"#;
        let err = parse_config(text).unwrap_err();
        match err {
            Error::Config { path, .. } => assert!(path.contains("couplings[0].B"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_coupling_rejected() {
        let text = br#"{"spec": {"q": 2, "n": 1, "A": [[2]], "couplings": [
            {"i": 1, "j": 2, "B": [[1]], "C": [[1]]}, {"i": 1, "j": 2, "B": [[1]], "C": [[1]]}]}}"#;
        assert!(matches!(parse_config(text), Err(Error::Config { .. })));
    }

    #[test]
    fn malformed_and_missing_fields() {
        assert!(matches!(
            parse_config(b"{not json"),
            Err(Error::Config { .. })
        ));
        let err = parse_config(br#"{"spec": {"q": 2, "A": [[1]]}}"#).unwrap_err();
        assert!(err.to_string().contains("spec"), "{err}");
        let err =
            parse_config(br#"{"spec": {"q": 2, "n": 1, "A": [[1]]}, "params": {"tau_c": "soon"}}"#)
                .unwrap_err();
        assert!(
            matches!(err, Error::Config { ref path, .. } if path.contains("params.tau_c")),
            "{err}"
        );
        assert!(parse_config(&[0xff, 0xfe]).is_err());
    }

    #[test]
    fn explicit_state_length_checked() {
        let text =
            br#"{"spec": {"q": 2, "n": 1, "A": [[2]]}, "sim": {"x0": {"explicit": [1, 2, 3]}}}"#;
        let err = parse_config(text).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "sim.x0.explicit"));
    }

    #[test]
    fn config_round_trip() {
        let cfg = parse_config(E1.as_bytes()).unwrap();
        let again = parse_config(cfg.to_json().as_bytes()).unwrap();
        assert_eq!(cfg, again);

        let mut limit = cfg.clone();
        limit.params.tau_c = Some(f64::INFINITY);
        assert!(limit.to_json().contains("\"inf\""));
        assert_eq!(parse_config(limit.to_json().as_bytes()).unwrap(), limit);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_random(3, 2, Topology::Complete, 1, 1, 1.0, 7).unwrap();
        let b = gen_random(3, 2, Topology::Complete, 1, 1, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_random(3, 2, Topology::Complete, 1, 1, 1.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn topology_pair_counts() {
        assert_eq!(Topology::Ring.pairs(4).len(), 4);
        assert_eq!(Topology::Ring.pairs(2).len(), 1);
        assert_eq!(Topology::Path.pairs(5).len(), 4);
        assert_eq!(Topology::Complete.pairs(5).len(), 10);
        let spec = gen_random(4, 2, Topology::Ring, 1, 1, 1.0, 3).unwrap();
        assert_eq!(spec.couplings().len(), 4);
    }

    #[test]
    fn generated_specs_are_certified() {
        for seed in 0..10 {
            let spec = gen_random(3, 2, Topology::Path, 1, 1, 1.0, seed).unwrap();
            let model = ArrayModel::new(spec).unwrap();
            let need = model.big.disagreement_dim();
            assert_eq!(controllability_rank(&model.big, 1e-9), need);
            assert_eq!(observability_rank(&model.big, 1e-9), need);
        }
    }

    #[test]
    fn generation_can_fail() {
        // no outputs at all: never observable
        assert!(matches!(
            gen_random(3, 1, Topology::Path, 1, 0, 1.0, 0),
            Err(Error::GenerationFailed { attempts: 100 })
        ));
    }

    #[test]
    fn synth_on_two_agent_scalar() {
        let cfg = parse_config(E1.as_bytes()).unwrap();
        let out = cmd_synth(&cfg).unwrap();
        assert_eq!(out.exit_code(), 0);
        let s = out.report.synthesis.unwrap();
        assert!(s.spectra.h_c.spectral_radius < 1e-12);
        assert!(s.spectra.h_o.spectral_radius < 1e-12);
        assert!(s.rho_phi < 1.0);
    }

    #[test]
    fn check_without_outputs_fails() {
        let text = br#"{"spec": {"q": 2, "n": 1, "A": [[2]], "couplings": [{"i": 1, "j": 2, "B": [[1]], "C": [[0]]}]}}"#;
        let out = cmd_check(&parse_config(text).unwrap()).unwrap();
        assert_eq!(out.exit_code(), 2);
        assert!(!out.report.certification.observable);
        assert!(out.report.certification.controllable);
    }

    #[test]
    fn simulate_writes_full_trace() {
        let cfg = parse_config(E1.as_bytes()).unwrap();
        let out = cmd_simulate(&cfg).unwrap();
        assert_eq!(out.exit_code(), 0);
        let csv = out.trace_csv.unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,delta,avg_residual,x1_1,x2_1,xhat1_1,xhat2_1"
        );
        assert_eq!(lines.count(), cfg.sim.steps + 1);
    }

    #[test]
    fn sweep_tail_decreases() {
        let cfg = parse_config(E1.as_bytes()).unwrap();
        let out = cmd_sweep(&cfg, &default_sweep_taus()).unwrap();
        let rows = out.report.sweep.unwrap();
        assert_eq!(rows.len(), 8);
        let tail: Vec<f64> = rows.iter().skip(3).map(|r| r.radius_c).collect();
        assert!(tail.windows(2).all(|w| w[1] < w[0]), "{tail:?}");
        assert!(*tail.last().unwrap() < 1e-5);
    }

    #[test]
    fn reports_are_reproducible() {
        let mut cfg = parse_config(E1.as_bytes()).unwrap();
        cfg.sim.x0 = InitState::Random { scale: 2.0 };
        cfg.seed = 42;
        let a = cmd_simulate(&cfg).unwrap();
        let b = cmd_simulate(&cfg).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.trace_csv, b.trace_csv);
    }
}
