//! Softmax policies over linear features: `pi(a|s) ∝ exp(<phi(s,a), theta>)`.
//!
//! Besides the policy itself this module holds the exact first-order
//! quantities the stochastic solver is checked against: score vectors,
//! the Fisher information, policy and Lagrangian gradients, and the exact
//! natural gradient direction `F^+ grad J_L`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cmdp::{self, Cmdp, PolicyMatrix, Signal};
use crate::error::{Error, Result};

/// Eigenvalues of the Fisher matrix at or below this are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Row-per-pair feature matrix of shape `(S * A) x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    num_states: usize,
    num_actions: usize,
    dim: usize,
    rows: Vec<f64>,
    seed: Option<u64>,
    tabular: bool,
}

impl FeatureMap {
    pub fn new(num_states: usize, num_actions: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("feature dimension must be at least 1".into()));
        }
        if rows.len() != num_states * num_actions * dim {
            return Err(Error::DimensionMismatch(format!(
                "feature map has {} entries, expected {}x{}",
                rows.len(),
                num_states * num_actions,
                dim
            )));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("feature map has non-finite entries".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            dim,
            rows,
            seed: None,
            tabular: false,
        })
    }

    /// Identity features: one coordinate per pair, i.e. the full tabular softmax.
    pub fn tabular(num_states: usize, num_actions: usize) -> Self {
        let n = num_states * num_actions;
        let mut rows = vec![0.0; n * n];
        for i in 0..n {
            rows[i * n + i] = 1.0;
        }
        Self {
            num_states,
            num_actions,
            dim: n,
            rows,
            seed: None,
            tabular: true,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_tabular(&self) -> bool {
        self.tabular
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.dim;
        &self.rows[start..start + self.dim]
    }

    /// `B_phi`: the largest Euclidean row norm.
    pub fn norm_bound(&self) -> f64 {
        self.rows
            .chunks(self.dim)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Score-norm bound `G = 2 B_phi`.
    pub fn score_bound(&self) -> f64 {
        2.0 * self.norm_bound()
    }

    pub fn check_compatible(&self, c: &Cmdp) -> Result<()> {
        if self.num_states != c.num_states || self.num_actions != c.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "feature map is for {}x{}, CMDP is {}x{}",
                self.num_states, self.num_actions, c.num_states, c.num_actions
            )));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: FeatureFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FeatureFile::from(self))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json_string()?.as_bytes())
    }
}

/// Gaussian feature rows scaled to unit norm, so `B_phi = 1` and `G = 2`.
pub fn random_features(num_states: usize, num_actions: usize, dim: usize, seed: u64) -> Result<FeatureMap> {
    if dim == 0 {
        return Err(Error::Invalid("feature dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(num_states * num_actions * dim);
    for _ in 0..num_states * num_actions {
        let row: Vec<f64> = loop {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if row.iter().any(|x: &f64| *x != 0.0) {
                break row;
            }
        };
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.extend(row.iter().map(|x| x / norm));
    }
    let mut map = FeatureMap::new(num_states, num_actions, dim, rows)?;
    map.seed = Some(seed);
    Ok(map)
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureFile {
    num_states: usize,
    num_actions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    tabular: bool,
}

impl From<&FeatureMap> for FeatureFile {
    fn from(f: &FeatureMap) -> Self {
        if f.tabular {
            return Self {
                num_states: f.num_states,
                num_actions: f.num_actions,
                d: Some(f.dim),
                rows: None,
                seed: None,
                tabular: true,
            };
        }
        Self {
            num_states: f.num_states,
            num_actions: f.num_actions,
            d: Some(f.dim),
            rows: Some(f.rows.chunks(f.dim).map(<[f64]>::to_vec).collect()),
            seed: f.seed,
            tabular: false,
        }
    }
}

impl TryFrom<FeatureFile> for FeatureMap {
    type Error = Error;

    fn try_from(file: FeatureFile) -> Result<Self> {
        if file.tabular {
            let map = FeatureMap::tabular(file.num_states, file.num_actions);
            if file.d.is_some_and(|d| d != map.dim) {
                return Err(Error::DimensionMismatch(
                    "tabular feature map must have d = num_states * num_actions".into(),
                ));
            }
            return Ok(map);
        }
        let rows = file
            .rows
            .ok_or_else(|| Error::Invalid("feature file needs `rows` or `tabular: true`".into()))?;
        let dim = file
            .d
            .or_else(|| rows.first().map(Vec::len))
            .unwrap_or(0);
        if rows.len() != file.num_states * file.num_actions || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "feature rows must be [{}][{dim}]",
                file.num_states * file.num_actions
            )));
        }
        let mut map = FeatureMap::new(
            file.num_states,
            file.num_actions,
            dim,
            rows.into_iter().flatten().collect(),
        )?;
        map.seed = file.seed;
        Ok(map)
    }
}

/// Policy parameter vector `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: vec![0.0; dim],
        }
    }

    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("policy parameters must be finite".into()));
        }
        Ok(Self { theta })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Regularity constants of the parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    /// Score-norm bound.
    pub g: f64,
    /// Score smoothness.
    pub m: f64,
    /// Smoothness of the value function in `theta`.
    pub l_j: f64,
    /// Assumed Fisher lower bound.
    pub mu_f: f64,
}

impl SmoothnessConstants {
    pub fn new(g: f64, m: f64, mu_f: f64, gamma: f64) -> Self {
        let h = 1.0 - gamma;
        Self {
            g,
            m,
            l_j: m / (h * h) + 2.0 * g * g / (h * h * h),
            mu_f,
        }
    }

    /// `G = 2 B_phi`; for softmax-linear policies the Hessian of `log pi` is a
    /// negative feature covariance, so `M = B_phi^2`.
    pub fn for_features(f: &FeatureMap, gamma: f64, mu_f: f64) -> Self {
        let b = f.norm_bound();
        Self::new(2.0 * b, b * b, mu_f, gamma)
    }

    /// Primal step `mu_F^2 / (4 G^2 L_J)`.
    pub fn primal_step(&self) -> f64 {
        self.mu_f * self.mu_f / (4.0 * self.g * self.g * self.l_j)
    }

    /// SGD step `1 / (4 G^2)`.
    pub fn sgd_step(&self) -> f64 {
        1.0 / (4.0 * self.g * self.g)
    }
}

fn check_params(f: &FeatureMap, p: &PolicyParams) -> Result<()> {
    if p.dim() != f.dim {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, feature dimension is {}",
            p.dim(),
            f.dim
        )));
    }
    Ok(())
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in logits.iter_mut() {
        *z /= total;
    }
}

fn distribution_unchecked(f: &FeatureMap, p: &PolicyParams, s: usize) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..f.num_actions).map(|a| dot(f.row(s, a), &p.theta)).collect();
    softmax_in_place(&mut logits);
    logits
}

/// `pi(. | s)` for the softmax-linear policy.
pub fn action_distribution(f: &FeatureMap, p: &PolicyParams, s: usize) -> Result<Vec<f64>> {
    check_params(f, p)?;
    if s >= f.num_states {
        return Err(Error::Invalid(format!("state {s} out of range")));
    }
    Ok(distribution_unchecked(f, p, s))
}

/// The full `[s][a]` table of the softmax-linear policy.
pub fn policy_matrix(f: &FeatureMap, p: &PolicyParams) -> Result<PolicyMatrix> {
    check_params(f, p)?;
    let mut probs = Vec::with_capacity(f.num_states * f.num_actions);
    for s in 0..f.num_states {
        probs.extend(distribution_unchecked(f, p, s));
    }
    Ok(PolicyMatrix::from_rows_unchecked(f.num_states, f.num_actions, probs))
}

/// Score vectors `phi(s,a) - E_{a'~pi}[phi(s,a')]` for every pair, flat as
/// `(s * A + a) * d + k`.
pub fn score_table(f: &FeatureMap, pi: &PolicyMatrix) -> Vec<f64> {
    let d = f.dim;
    let mut table = Vec::with_capacity(f.num_states * f.num_actions * d);
    let mut mean = vec![0.0; d];
    for s in 0..f.num_states {
        mean.iter_mut().for_each(|x| *x = 0.0);
        for (a, &prob) in pi.row(s).iter().enumerate() {
            for (m, x) in mean.iter_mut().zip(f.row(s, a)) {
                *m += prob * x;
            }
        }
        for a in 0..f.num_actions {
            table.extend(f.row(s, a).iter().zip(&mean).map(|(x, m)| x - m));
        }
    }
    table
}

/// `grad_theta log pi(a|s)`.
pub fn score(f: &FeatureMap, p: &PolicyParams, s: usize, a: usize) -> Result<Vec<f64>> {
    let dist = action_distribution(f, p, s)?;
    if a >= f.num_actions {
        return Err(Error::Invalid(format!("action {a} out of range")));
    }
    let mut out = f.row(s, a).to_vec();
    for (b, &prob) in dist.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(f.row(s, b)) {
            *o -= prob * x;
        }
    }
    Ok(out)
}

fn fisher_from(d_pairs: &[f64], scores: &[f64], dim: usize) -> DMatrix<f64> {
    let mut fisher = DMatrix::zeros(dim, dim);
    for (w, psi) in d_pairs.iter().zip(scores.chunks(dim)) {
        if *w == 0.0 {
            continue;
        }
        let v = DVector::from_column_slice(psi);
        fisher.syger(*w, &v, &v, 1.0);
    }
    fisher.fill_upper_triangle_with_lower_triangle();
    fisher
}

/// `F(theta) = E_{s~d_rho, a~pi}[score score^T]`.
pub fn exact_fisher(c: &Cmdp, f: &FeatureMap, p: &PolicyParams) -> Result<DMatrix<f64>> {
    f.check_compatible(c)?;
    let pi = policy_matrix(f, p)?;
    let occ = cmdp::exact_occupancy(c, &pi)?;
    Ok(fisher_from(&occ, &score_table(f, &pi), f.dim))
}

fn gradient_from(c: &Cmdp, occ: &[f64], scores: &[f64], q: &[f64], dim: usize) -> DVector<f64> {
    let mut grad = DVector::zeros(dim);
    for ((w, psi), qv) in occ.iter().zip(scores.chunks(dim)).zip(q) {
        let weight = w * qv;
        for (g, x) in grad.iter_mut().zip(psi) {
            *g += weight * x;
        }
    }
    grad / (1.0 - c.gamma)
}

/// Exact policy gradient `(1/(1-gamma)) sum d(s,a) score(s,a) Q(s,a)`.
pub fn exact_policy_gradient(
    c: &Cmdp,
    f: &FeatureMap,
    p: &PolicyParams,
    sig: Signal,
) -> Result<Vec<f64>> {
    f.check_compatible(c)?;
    let pi = policy_matrix(f, p)?;
    let occ = cmdp::exact_occupancy(c, &pi)?;
    let q = cmdp::exact_action_values(c, &pi, sig)?;
    Ok(gradient_from(c, &occ, &score_table(f, &pi), &q, f.dim)
        .iter()
        .copied()
        .collect())
}

fn check_multipliers(c: &Cmdp, lambda: &[f64]) -> Result<()> {
    if lambda.len() != c.num_constraints() {
        return Err(Error::DimensionMismatch(format!(
            "lambda has {} entries, CMDP has {} constraints",
            lambda.len(),
            c.num_constraints()
        )));
    }
    Ok(())
}

/// Lagrangian action values `Q_r + sum_i lambda_i Q_gi`, flat over pairs.
pub fn exact_lagrangian_q(c: &Cmdp, pi: &PolicyMatrix, lambda: &[f64]) -> Result<Vec<f64>> {
    check_multipliers(c, lambda)?;
    let mut q = cmdp::exact_action_values(c, pi, Signal::Reward)?;
    for (i, &l) in lambda.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let qg = cmdp::exact_action_values(c, pi, Signal::Constraint(i))?;
        q.iter_mut().zip(&qg).for_each(|(x, y)| *x += l * y);
    }
    Ok(q)
}

/// Lagrangian advantage `A_L(s,a) = Q_L(s,a) - V_L(s)`, flat over pairs.
pub fn exact_lagrangian_advantage(c: &Cmdp, pi: &PolicyMatrix, lambda: &[f64]) -> Result<Vec<f64>> {
    let mut q = exact_lagrangian_q(c, pi, lambda)?;
    for s in 0..c.num_states {
        let row = &mut q[s * c.num_actions..(s + 1) * c.num_actions];
        let v: f64 = row.iter().zip(pi.row(s)).map(|(x, p)| x * p).sum();
        row.iter_mut().for_each(|x| *x -= v);
    }
    Ok(q)
}

/// `grad J_r + sum_i lambda_i grad J_gi`.
pub fn exact_lagrangian_gradient(
    c: &Cmdp,
    f: &FeatureMap,
    p: &PolicyParams,
    lambda: &[f64],
) -> Result<Vec<f64>> {
    f.check_compatible(c)?;
    let pi = policy_matrix(f, p)?;
    let occ = cmdp::exact_occupancy(c, &pi)?;
    let q = exact_lagrangian_q(c, &pi, lambda)?;
    Ok(gradient_from(c, &occ, &score_table(f, &pi), &q, f.dim)
        .iter()
        .copied()
        .collect())
}

/// Minimum-norm solution of `F x = b` through a truncated eigendecomposition.
pub fn pseudo_inverse_solve(fisher: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(fisher.clone());
    let mut coeffs = eig.eigenvectors.transpose() * rhs;
    for (c, &lambda) in coeffs.iter_mut().zip(eig.eigenvalues.iter()) {
        *c = if lambda > PINV_CUTOFF { *c / lambda } else { 0.0 };
    }
    eig.eigenvectors * coeffs
}

/// Exact natural gradient direction `F(theta)^+ grad J_L(theta, lambda)`.
pub fn exact_npg_direction(
    c: &Cmdp,
    f: &FeatureMap,
    p: &PolicyParams,
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let eval = ExactEvaluation::new(c, f, p, lambda)?;
    Ok(eval.npg_direction().iter().copied().collect())
}

/// All exact first-order quantities at one `(theta, lambda)`, sharing the
/// linear solves.
#[derive(Debug, Clone)]
pub struct ExactEvaluation {
    pub policy: PolicyMatrix,
    pub occupancy: Vec<f64>,
    pub scores: Vec<f64>,
    pub fisher: DMatrix<f64>,
    pub lagrangian_gradient: DVector<f64>,
    pub j_reward: f64,
    pub j_constraints: Vec<f64>,
}

impl ExactEvaluation {
    pub fn new(c: &Cmdp, f: &FeatureMap, p: &PolicyParams, lambda: &[f64]) -> Result<Self> {
        f.check_compatible(c)?;
        check_multipliers(c, lambda)?;
        let policy = policy_matrix(f, p)?;
        let visitation = cmdp::exact_visitation(c, &policy)?;
        let occupancy = cmdp::occupancy_from(c, &policy, &visitation);
        let scores = score_table(f, &policy);
        let fisher = fisher_from(&occupancy, &scores, f.dim);

        let ret = |v: &[f64]| -> f64 { c.rho.iter().zip(v).map(|(r, x)| r * x).sum() };
        let v_r = cmdp::exact_state_values(c, &policy, Signal::Reward)?;
        let mut q_l = cmdp::action_values_from(c, Signal::Reward, &v_r);
        let j_reward = ret(&v_r);
        let mut j_constraints = Vec::with_capacity(c.num_constraints());
        for (i, &l) in lambda.iter().enumerate() {
            let sig = Signal::Constraint(i);
            let v_g = cmdp::exact_state_values(c, &policy, sig)?;
            j_constraints.push(ret(&v_g));
            if l != 0.0 {
                let q_g = cmdp::action_values_from(c, sig, &v_g);
                q_l.iter_mut().zip(&q_g).for_each(|(x, y)| *x += l * y);
            }
        }
        let lagrangian_gradient = gradient_from(c, &occupancy, &scores, &q_l, f.dim);
        Ok(Self {
            policy,
            occupancy,
            scores,
            fisher,
            lagrangian_gradient,
            j_reward,
            j_constraints,
        })
    }

    pub fn npg_direction(&self) -> DVector<f64> {
        pseudo_inverse_solve(&self.fisher, &self.lagrangian_gradient)
    }
}
