//! Conservative natural policy gradient primal-dual loop.
//!
//! Each outer iteration `k`:
//! 1. runs `N_sgd` SGD steps on the compatible function approximation error
//!    and averages the iterates into the direction `omega`,
//! 2. estimates every constraint return from `N_constraint` rollouts,
//! 3. updates `theta += eta1 * omega` and
//!    `lambda_i = clamp(lambda_i - eta2 * (J_hat_gi - kappa), 0, sigma_lambda)`.
//!
//! Exact returns and gradient norms are computed alongside for the trace
//! only; they never feed back into the updates.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cmdp::{Cmdp, PolicyMatrix};
use crate::error::{Error, Result};
use crate::lp;
use crate::policy::{self, ExactEvaluation, FeatureMap, PolicyParams};
use crate::sampler::{self, GenerativeModel, RngStream};

/// Dual cap used when no positive Slater margin is available.
pub const FALLBACK_SIGMA_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Outer iterations `K`.
    pub iterations: usize,
    /// SGD steps per outer iteration.
    pub n_sgd: usize,
    /// Rollouts per constraint-return estimate.
    pub n_constraint: usize,
    pub eta1: f64,
    pub eta2: f64,
    /// SGD step; `None` means `1 / (4 G^2)`.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub kappa: f64,
    /// Dual cap; `None` means `2 / ((1 - gamma) phi_hat)` from the LP Slater
    /// margin, or [`FALLBACK_SIGMA_LAMBDA`].
    #[serde(default)]
    pub sigma_lambda: Option<f64>,
    #[serde(default)]
    pub warm_start_omega: bool,
    #[serde(default)]
    pub seed: u64,
    /// Fisher lower bound used by the step-size helper only.
    #[serde(default = "default_mu_f")]
    pub mu_f: f64,
}

fn default_mu_f() -> f64 {
    0.1
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl SolverConfig {
    /// `K = 7000`, `N = 100`, `eta1 = eta2 = 0.1`, `kappa = 0.5`.
    pub fn standard() -> Self {
        Self {
            iterations: 7000,
            n_sgd: 100,
            n_constraint: 100,
            eta1: 0.1,
            eta2: 0.1,
            alpha: None,
            kappa: 0.5,
            sigma_lambda: None,
            warm_start_omega: false,
            seed: 0,
            mu_f: default_mu_f(),
        }
    }

    /// Same as [`SolverConfig::standard`] with `kappa = 1`.
    pub fn extended() -> Self {
        Self {
            kappa: 1.0,
            ..Self::standard()
        }
    }

    pub fn check(&self, gamma: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.iterations == 0 || self.n_sgd == 0 || self.n_constraint == 0 {
            return bad("iterations, n_sgd and n_constraint must be at least 1".into());
        }
        if !(self.eta1 > 0.0 && self.eta2 > 0.0) {
            return bad(format!("step sizes must be positive (eta1 = {}, eta2 = {})", self.eta1, self.eta2));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0) {
                return bad(format!("alpha = {alpha} must be positive"));
            }
        }
        if !(self.kappa >= 0.0 && self.kappa < 1.0 / (1.0 - gamma)) {
            return bad(format!(
                "kappa = {} must lie in [0, 1/(1-gamma)) = [0, {})",
                self.kappa,
                1.0 / (1.0 - gamma)
            ));
        }
        if let Some(sigma) = self.sigma_lambda {
            if !(sigma > 0.0) {
                return bad(format!("sigma_lambda = {sigma} must be positive"));
            }
        }
        Ok(())
    }
}

/// Default dual cap from a Slater margin.
pub fn default_sigma_lambda(gamma: f64, slater_margin: f64) -> f64 {
    if slater_margin > 0.0 && slater_margin.is_finite() {
        2.0 / ((1.0 - gamma) * slater_margin)
    } else {
        FALLBACK_SIGMA_LAMBDA
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub kappa: f64,
}

impl DualState {
    pub fn zeros(num_constraints: usize, kappa: f64) -> Self {
        Self {
            lambda: vec![0.0; num_constraints],
            kappa,
        }
    }
}

/// `theta + eta1 omega` and the projected dual step.
pub fn primal_dual_step(
    p: &PolicyParams,
    dual: &DualState,
    omega: &[f64],
    j_hat: &[f64],
    eta1: f64,
    eta2: f64,
    sigma_lambda: f64,
) -> Result<(PolicyParams, DualState)> {
    if omega.len() != p.dim() || j_hat.len() != dual.lambda.len() {
        return Err(Error::DimensionMismatch(format!(
            "omega {} vs theta {}, J_hat {} vs lambda {}",
            omega.len(),
            p.dim(),
            j_hat.len(),
            dual.lambda.len()
        )));
    }
    let theta = p.theta.iter().zip(omega).map(|(t, w)| t + eta1 * w).collect();
    let lambda = dual
        .lambda
        .iter()
        .zip(j_hat)
        .map(|(l, j)| (l - eta2 * (j - dual.kappa)).clamp(0.0, sigma_lambda))
        .collect();
    Ok((
        PolicyParams { theta },
        DualState {
            lambda,
            kappa: dual.kappa,
        },
    ))
}

/// Inputs of the theoretical conservative margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaInputs {
    pub iterations: usize,
    pub eta2: f64,
    pub gamma: f64,
    pub num_constraints: usize,
    pub sigma_lambda: f64,
    #[serde(default)]
    pub eps_bias: f64,
    #[serde(default)]
    pub eps_kn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaValue {
    pub kappa: f64,
    /// Formula value before clipping.
    pub raw: f64,
    pub clipped: bool,
}

/// `kappa = (1/(eta2 K)) sqrt(2 eta2 K (sqrt(eps_bias)/(1-gamma) + eps_KN
/// + (2 I sigma_lambda + 1)/(1-gamma)) + 4 eta2^2 K / (1-gamma)^2)`,
/// clipped to `0.99 / (1 - gamma)`.
///
/// The sum of optimal multipliers in the bound is replaced by its cap
/// `I * sigma_lambda`.
pub fn kappa_from_theory(inputs: &KappaInputs) -> Result<KappaValue> {
    let KappaInputs {
        iterations,
        eta2,
        gamma,
        num_constraints,
        sigma_lambda,
        eps_bias,
        eps_kn,
    } = *inputs;
    if iterations == 0 || !(eta2 > 0.0) || !(gamma > 0.0 && gamma < 1.0) || !(sigma_lambda > 0.0) {
        return Err(Error::Invalid(
            "K, eta2 and sigma_lambda must be positive and gamma in (0, 1)".into(),
        ));
    }
    if !(eps_bias >= 0.0 && eps_kn >= 0.0) {
        return Err(Error::Invalid("error terms must be non-negative".into()));
    }
    let h = 1.0 - gamma;
    let k = iterations as f64;
    let dual_term = (2.0 * num_constraints as f64 * sigma_lambda + 1.0) / h;
    let radicand = 2.0 * eta2 * k * (eps_bias.sqrt() / h + eps_kn + dual_term)
        + 4.0 * eta2 * eta2 * k / (h * h);
    let raw = radicand.sqrt() / (eta2 * k);
    let cap = 0.99 / h;
    Ok(KappaValue {
        kappa: raw.min(cap),
        raw,
        clipped: raw > cap,
    })
}

/// Policy table and score vectors at one `theta`.
struct Snapshot {
    policy: PolicyMatrix,
    scores: Vec<f64>,
    dim: usize,
}

impl Snapshot {
    fn new(f: &FeatureMap, p: &PolicyParams) -> Result<Self> {
        let policy = policy::policy_matrix(f, p)?;
        let scores = policy::score_table(f, &policy);
        Ok(Self {
            policy,
            scores,
            dim: f.dim(),
        })
    }

    #[inline]
    fn score(&self, pair: usize) -> &[f64] {
        &self.scores[pair * self.dim..(pair + 1) * self.dim]
    }
}

#[allow(clippy::too_many_arguments)]
fn sgd_from_snapshot(
    m: &GenerativeModel<'_>,
    snap: &Snapshot,
    lambda: &[f64],
    steps: usize,
    alpha: f64,
    start: &[f64],
    iteration: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let c = m.cmdp();
    let h = 1.0 - c.gamma;
    let mut omega = start.to_vec();
    let mut sum = vec![0.0; snap.dim];
    for step in 1..=steps {
        let s = sampler::sample_visitation_state(m, &snap.policy, rng);
        let a = sampler::sample_categorical(snap.policy.row(s), rng);
        let advantage = sampler::estimate_lagrangian_advantage(m, &snap.policy, lambda, s, a, rng)?;
        let psi = snap.score(c.pair(s, a));
        let prediction: f64 = h * psi.iter().zip(&omega).map(|(x, w)| x * w).sum::<f64>();
        let scale = alpha * 2.0 * h * (prediction - advantage);
        for ((w, x), acc) in omega.iter_mut().zip(psi).zip(sum.iter_mut()) {
            *w -= scale * x;
            *acc += *w;
        }
        if !scale.is_finite() || omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                step,
                alpha,
            });
        }
    }
    Ok(sum.into_iter().map(|x| x / steps as f64).collect())
}

/// Averaged-SGD estimate of the natural gradient direction at `(p, lambda)`.
///
/// Each step draws `s ~ d_rho`, `a ~ pi(.|s)` and an advantage estimate, and
/// moves along `-2 (1-gamma) [(1-gamma) score . omega - A_hat] score`. The
/// returned direction is the mean of the `steps` post-update iterates.
#[allow(clippy::too_many_arguments)]
pub fn sgd_npg_direction(
    m: &GenerativeModel<'_>,
    f: &FeatureMap,
    p: &PolicyParams,
    lambda: &[f64],
    steps: usize,
    alpha: f64,
    start: Option<&[f64]>,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    f.check_compatible(m.cmdp())?;
    if steps == 0 || !(alpha > 0.0) {
        return Err(Error::Invalid("SGD needs at least one step and alpha > 0".into()));
    }
    let snap = Snapshot::new(f, p)?;
    let zeros = vec![0.0; f.dim()];
    let start = start.unwrap_or(&zeros);
    if start.len() != f.dim() {
        return Err(Error::DimensionMismatch("SGD start point has the wrong length".into()));
    }
    sgd_from_snapshot(m, &snap, lambda, steps, alpha, start, 0, rng)
}

/// Metrics of one outer iteration, evaluated at the iterate `(theta_k, lambda_k)`
/// the iteration started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub j_r_exact: f64,
    pub j_g_exact: Vec<f64>,
    pub j_g_hat: Vec<f64>,
    pub lambda: Vec<f64>,
    pub kappa: f64,
    pub omega_norm: f64,
    pub grad_l_norm_exact: f64,
    /// Cumulative transitions drawn up to the end of this iteration.
    pub transitions_total: u64,
    /// Milliseconds since the start of the run.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: SolverConfig,
    pub sigma_lambda: f64,
    pub alpha: f64,
    pub slater_margin: f64,
    pub records: Vec<IterationRecord>,
    pub final_params: PolicyParams,
    pub final_dual: DualState,
    pub warnings: Vec<String>,
}

impl RunTrace {
    pub fn num_constraints(&self) -> usize {
        self.final_dual.lambda.len()
    }

    pub fn csv_header(num_constraints: usize) -> Vec<String> {
        let mut header = vec!["iter".to_string(), "j_r_exact".to_string()];
        for prefix in ["j_g_exact_", "j_g_hat_", "lambda_"] {
            header.extend((0..num_constraints).map(|i| format!("{prefix}{i}")));
        }
        header.extend(
            ["kappa", "omega_norm", "gradL_norm_exact", "transitions_total", "wall_ms"]
                .iter()
                .map(|s| s.to_string()),
        );
        header
    }

    /// Writes the trace as CSV. With `wall_clock = false` the `wall_ms`
    /// column is zero so reruns are byte-identical.
    pub fn write_csv<W: Write>(&self, out: W, wall_clock: bool) -> Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        writer.write_record(Self::csv_header(self.num_constraints()))?;
        for r in &self.records {
            let mut row = vec![r.iter.to_string(), r.j_r_exact.to_string()];
            for values in [&r.j_g_exact, &r.j_g_hat, &r.lambda] {
                row.extend(values.iter().map(f64::to_string));
            }
            row.push(r.kappa.to_string());
            row.push(r.omega_norm.to_string());
            row.push(r.grad_l_norm_exact.to_string());
            row.push(r.transitions_total.to_string());
            row.push(if wall_clock { r.wall_ms.to_string() } else { "0".to_string() });
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, wall_clock: bool) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, wall_clock)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: &Path, wall_clock: bool) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv_string(wall_clock)?.as_bytes())
    }

    /// Running average `(1/k) sum_{j<=k} J_gi(theta_j)` of the exact
    /// constraint value.
    pub fn running_average_j_g(&self, constraint: usize) -> Vec<f64> {
        running_average(self.records.iter().map(|r| r.j_g_exact[constraint]))
    }

    pub fn running_average_j_r(&self) -> Vec<f64> {
        running_average(self.records.iter().map(|r| r.j_r_exact))
    }
}

pub fn running_average(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .enumerate()
        .map(|(k, v)| {
            sum += v;
            sum / (k + 1) as f64
        })
        .collect()
}

/// Runs the full primal-dual loop from `theta = 0`, `lambda = 0`.
pub fn run(c: &Cmdp, f: &FeatureMap, cfg: &SolverConfig) -> Result<RunTrace> {
    let report = c.validate();
    if !report.is_ok() {
        return Err(Error::Invalid(format!("CMDP: {report}")));
    }
    f.check_compatible(c)?;
    cfg.check(c.gamma)?;

    let mut warnings = Vec::new();
    let slater = lp::slater_margin(c)?;
    if c.num_constraints() > 0 && slater < cfg.kappa {
        warnings.push(format!(
            "Slater margin {slater:.6} is below kappa = {}; the conservative problem may be infeasible",
            cfg.kappa
        ));
    }
    let sigma_lambda = cfg
        .sigma_lambda
        .unwrap_or_else(|| default_sigma_lambda(c.gamma, slater));
    let g = f.score_bound();
    let alpha = match cfg.alpha {
        Some(a) => a,
        None if g > 0.0 => 1.0 / (4.0 * g * g),
        None => return Err(Error::Invalid("feature map is identically zero".into())),
    };

    let model = GenerativeModel::new(c);
    let mut params = PolicyParams::zeros(f.dim());
    let mut dual = DualState::zeros(c.num_constraints(), cfg.kappa);
    let mut omega = vec![0.0; f.dim()];
    let mut records = Vec::with_capacity(cfg.iterations);
    let started = Instant::now();

    for k in 0..cfg.iterations {
        let mut rng = RngStream::substream(cfg.seed, k as u64);
        let exact = ExactEvaluation::new(c, f, &params, &dual.lambda)?;
        let snap = Snapshot {
            policy: exact.policy.clone(),
            scores: exact.scores.clone(),
            dim: f.dim(),
        };
        let start = if cfg.warm_start_omega {
            omega.clone()
        } else {
            vec![0.0; f.dim()]
        };
        omega = sgd_from_snapshot(&model, &snap, &dual.lambda, cfg.n_sgd, alpha, &start, k + 1, &mut rng)?;
        let j_hat = (0..c.num_constraints())
            .map(|i| sampler::estimate_constraint_return(&model, &snap.policy, i, cfg.n_constraint, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        records.push(IterationRecord {
            iter: k + 1,
            j_r_exact: exact.j_reward,
            j_g_exact: exact.j_constraints.clone(),
            j_g_hat: j_hat.clone(),
            lambda: dual.lambda.clone(),
            kappa: dual.kappa,
            omega_norm: omega.iter().map(|x| x * x).sum::<f64>().sqrt(),
            grad_l_norm_exact: exact.lagrangian_gradient.norm(),
            transitions_total: model.transitions(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        (params, dual) = primal_dual_step(&params, &dual, &omega, &j_hat, cfg.eta1, cfg.eta2, sigma_lambda)?;
    }

    Ok(RunTrace {
        config: cfg.clone(),
        sigma_lambda,
        alpha,
        slater_margin: slater,
        records,
        final_params: params,
        final_dual: dual,
        warnings,
    })
}
