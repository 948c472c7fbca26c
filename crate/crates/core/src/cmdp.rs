//! Tabular constrained MDPs and their exact (linear-algebra) evaluation.
//!
//! Tables are stored flat and row-major, keyed by the dense pair index
//! `s * num_actions + a`. The transition tensor adds the successor state as
//! the innermost axis.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stochasticity tolerance for transition rows, `rho` and policy rows.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite constrained MDP `(S, A, P, r, g, gamma, rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    /// `P[s][a][s']` at `(s * A + a) * S + s'`.
    pub transition: Vec<f64>,
    /// `r[s][a]` at `s * A + a`.
    pub reward: Vec<f64>,
    /// One `[s][a]` table per constraint.
    pub constraints: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub generator_seed: Option<u64>,
}

/// Selects which per-step signal an evaluation routine integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    Reward,
    Constraint(usize),
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signal::Reward => write!(f, "reward"),
            Signal::Constraint(i) => write!(f, "constraint {i}"),
        }
    }
}

impl Cmdp {
    /// Builds a CMDP after checking that every table has the right length.
    /// Value-level invariants are checked separately by [`Cmdp::validate`].
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
        constraints: Vec<Vec<f64>>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Invalid(
                "num_states and num_actions must be positive".into(),
            ));
        }
        let pairs = num_states * num_actions;
        if transition.len() != pairs * num_states {
            return Err(Error::DimensionMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                pairs * num_states
            )));
        }
        if reward.len() != pairs {
            return Err(Error::DimensionMismatch(format!(
                "reward has {} entries, expected {pairs}",
                reward.len()
            )));
        }
        for (i, g) in constraints.iter().enumerate() {
            if g.len() != pairs {
                return Err(Error::DimensionMismatch(format!(
                    "constraint {i} has {} entries, expected {pairs}",
                    g.len()
                )));
            }
        }
        if rho.len() != num_states {
            return Err(Error::DimensionMismatch(format!(
                "rho has {} entries, expected {num_states}",
                rho.len()
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            gamma,
            transition,
            reward,
            constraints,
            rho,
            generator_seed: None,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Successor distribution `P(. | s, a)`.
    #[inline]
    pub fn next_state_probs(&self, s: usize, a: usize) -> &[f64] {
        let start = self.pair(s, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// Per-pair table for `sig`.
    pub fn signal_table(&self, sig: Signal) -> Result<&[f64]> {
        match sig {
            Signal::Reward => Ok(&self.reward),
            Signal::Constraint(i) => self.constraints.get(i).map(Vec::as_slice).ok_or_else(|| {
                Error::Invalid(format!(
                    "constraint index {i} out of range (I = {})",
                    self.constraints.len()
                ))
            }),
        }
    }

    /// Upper bound on |V| implied by the signal ranges.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    /// Checks every value-level invariant and lists the violations.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            violations.push(Violation::Discount(self.gamma));
        }
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.next_state_probs(s, a);
                if let Some(&p) = row.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
                    violations.push(Violation::TransitionEntry { s, a, value: p });
                }
                let sum: f64 = row.iter().sum();
                if !((sum - 1.0).abs() <= STOCHASTIC_TOL) {
                    violations.push(Violation::TransitionRowSum { s, a, sum });
                }
                let r = self.reward[self.pair(s, a)];
                if !(0.0..=1.0).contains(&r) {
                    violations.push(Violation::Reward { s, a, value: r });
                }
                for (i, g) in self.constraints.iter().enumerate() {
                    let v = g[self.pair(s, a)];
                    if !(-1.0..=1.0).contains(&v) {
                        violations.push(Violation::Constraint { i, s, a, value: v });
                    }
                }
            }
        }
        for (s, &p) in self.rho.iter().enumerate() {
            if !(p >= 0.0) {
                violations.push(Violation::RhoEntry { s, value: p });
            }
        }
        let rho_sum: f64 = self.rho.iter().sum();
        if !((rho_sum - 1.0).abs() <= STOCHASTIC_TOL) {
            violations.push(Violation::RhoSum(rho_sum));
        }
        ValidationReport { violations }
    }

    /// Returns the CMDP if it validates, otherwise an `Invalid` error
    /// carrying the itemized report.
    pub fn validated(self) -> Result<Self> {
        let report = self.validate();
        if report.is_ok() {
            Ok(self)
        } else {
            Err(Error::Invalid(report.to_string()))
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: CmdpFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CmdpFile::from(self))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json_string()?.as_bytes())
    }
}

/// One failed invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Discount(f64),
    TransitionEntry { s: usize, a: usize, value: f64 },
    TransitionRowSum { s: usize, a: usize, sum: f64 },
    Reward { s: usize, a: usize, value: f64 },
    Constraint { i: usize, s: usize, a: usize, value: f64 },
    RhoEntry { s: usize, value: f64 },
    RhoSum(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Discount(g) => write!(f, "gamma = {g} outside (0, 1)"),
            Violation::TransitionEntry { s, a, value } => {
                write!(f, "P[{s}][{a}] has entry {value} outside [0, 1]")
            }
            Violation::TransitionRowSum { s, a, sum } => {
                write!(f, "P[{s}][{a}] sums to {sum}, expected 1")
            }
            Violation::Reward { s, a, value } => {
                write!(f, "r[{s}][{a}] = {value} outside [0, 1]")
            }
            Violation::Constraint { i, s, a, value } => {
                write!(f, "g{i}[{s}][{a}] = {value} outside [-1, 1]")
            }
            Violation::RhoEntry { s, value } => write!(f, "rho[{s}] = {value} is negative"),
            Violation::RhoSum(sum) => write!(f, "rho sums to {sum}, expected 1"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let items: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", items.join("; "))
    }
}

/// A stationary stochastic policy as an explicit `[s][a]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMatrix {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyMatrix {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        for s in 0..num_states {
            let row = &probs[s * num_actions..(s + 1) * num_actions];
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Invalid(format!("policy row {s} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Invalid(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        Self {
            num_states: actions.len(),
            num_actions,
            probs,
        }
    }

    /// Rows are trusted to be normalized; used by the softmax policy.
    pub(crate) fn from_rows_unchecked(
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Self {
        Self {
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    fn check_compatible(&self, c: &Cmdp) -> Result<()> {
        if self.num_states != c.num_states || self.num_actions != c.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, CMDP is {}x{}",
                self.num_states, self.num_actions, c.num_states, c.num_actions
            )));
        }
        Ok(())
    }
}

/// State-to-state kernel `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`.
fn policy_kernel(c: &Cmdp, pi: &PolicyMatrix) -> DMatrix<f64> {
    let n = c.num_states;
    let mut kernel = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..c.num_actions {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (next, &q) in c.next_state_probs(s, a).iter().enumerate() {
                kernel[(s, next)] += p * q;
            }
        }
    }
    kernel
}

/// `I - gamma * P_pi`.
fn resolvent_system(c: &Cmdp, pi: &PolicyMatrix) -> DMatrix<f64> {
    let n = c.num_states;
    DMatrix::identity(n, n) - policy_kernel(c, pi) * c.gamma
}

fn solve_dense(system: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("I - gamma P_pi is not invertible".into()))
}

/// Policy-averaged signal `h_pi(s) = sum_a pi(a|s) h(s,a)`.
fn averaged_signal(c: &Cmdp, pi: &PolicyMatrix, table: &[f64]) -> DVector<f64> {
    DVector::from_fn(c.num_states, |s, _| {
        (0..c.num_actions)
            .map(|a| pi.prob(s, a) * table[c.pair(s, a)])
            .sum()
    })
}

/// Solves `(I - gamma P_pi) V = h_pi`.
pub fn exact_state_values(c: &Cmdp, pi: &PolicyMatrix, sig: Signal) -> Result<Vec<f64>> {
    pi.check_compatible(c)?;
    let table = c.signal_table(sig)?;
    let values = solve_dense(resolvent_system(c, pi), averaged_signal(c, pi, table))?;
    Ok(values.iter().copied().collect())
}

/// `Q(s,a) = h(s,a) + gamma * sum_s' P(s'|s,a) V(s')`, flat over pairs.
pub fn exact_action_values(c: &Cmdp, pi: &PolicyMatrix, sig: Signal) -> Result<Vec<f64>> {
    let values = exact_state_values(c, pi, sig)?;
    Ok(action_values_from(c, sig, &values))
}

pub(crate) fn action_values_from(c: &Cmdp, sig: Signal, values: &[f64]) -> Vec<f64> {
    let table = c.signal_table(sig).expect("signal checked by caller");
    let mut q = Vec::with_capacity(c.num_pairs());
    for s in 0..c.num_states {
        for a in 0..c.num_actions {
            let future: f64 = c
                .next_state_probs(s, a)
                .iter()
                .zip(values)
                .map(|(p, v)| p * v)
                .sum();
            q.push(table[c.pair(s, a)] + c.gamma * future);
        }
    }
    q
}

/// Expected discounted return `J = sum_s rho(s) V(s)`.
pub fn exact_return(c: &Cmdp, pi: &PolicyMatrix, sig: Signal) -> Result<f64> {
    let values = exact_state_values(c, pi, sig)?;
    Ok(c.rho.iter().zip(&values).map(|(r, v)| r * v).sum())
}

/// Discounted state visitation `d = (1 - gamma) rho^T (I - gamma P_pi)^-1`.
pub fn exact_visitation(c: &Cmdp, pi: &PolicyMatrix) -> Result<Vec<f64>> {
    pi.check_compatible(c)?;
    let system = resolvent_system(c, pi).transpose();
    let x = solve_dense(system, DVector::from_column_slice(&c.rho))?;
    Ok(x.iter().map(|v| (1.0 - c.gamma) * v).collect())
}

/// State-action occupancy `d(s,a) = d_rho(s) pi(a|s)`, flat over pairs.
pub fn exact_occupancy(c: &Cmdp, pi: &PolicyMatrix) -> Result<Vec<f64>> {
    let visitation = exact_visitation(c, pi)?;
    Ok(occupancy_from(c, pi, &visitation))
}

pub(crate) fn occupancy_from(c: &Cmdp, pi: &PolicyMatrix, visitation: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(c.num_pairs());
    for (s, &ds) in visitation.iter().enumerate() {
        d.extend(pi.row(s).iter().map(|p| ds * p));
    }
    d
}

/// Parameters of the random instance generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub num_constraints: usize,
    pub gamma: f64,
    #[serde(default = "default_reward_low")]
    pub reward_low: f64,
    #[serde(default = "default_reward_high")]
    pub reward_high: f64,
    #[serde(default = "default_constraint_low")]
    pub constraint_low: f64,
    #[serde(default = "default_constraint_high")]
    pub constraint_high: f64,
}

fn default_reward_low() -> f64 {
    0.0
}
fn default_reward_high() -> f64 {
    1.0
}
fn default_constraint_low() -> f64 {
    -0.71
}
fn default_constraint_high() -> f64 {
    0.29
}

impl CmdpSpec {
    /// Random instance family with the default signal ranges
    /// `r ~ U(0, 1)` and `g ~ U(-0.71, 0.29)`.
    pub fn new(num_states: usize, num_actions: usize, num_constraints: usize, gamma: f64) -> Self {
        Self {
            num_states,
            num_actions,
            num_constraints,
            gamma,
            reward_low: default_reward_low(),
            reward_high: default_reward_high(),
            constraint_low: default_constraint_low(),
            constraint_high: default_constraint_high(),
        }
    }

    /// 10 states, 5 actions, one constraint, gamma = 0.8.
    pub fn standard_preset() -> Self {
        Self::new(10, 5, 1, 0.8)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.num_states == 0 || self.num_actions == 0 {
            return bad("num_states and num_actions must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma = {} outside (0, 1)", self.gamma));
        }
        if !(self.reward_low < self.reward_high
            && self.reward_low >= 0.0
            && self.reward_high <= 1.0)
        {
            return bad(format!(
                "reward bounds [{}, {}] must satisfy 0 <= low < high <= 1",
                self.reward_low, self.reward_high
            ));
        }
        if !(self.constraint_low < self.constraint_high
            && self.constraint_low >= -1.0
            && self.constraint_high <= 1.0)
        {
            return bad(format!(
                "constraint bounds [{}, {}] must satisfy -1 <= low < high <= 1",
                self.constraint_low, self.constraint_high
            ));
        }
        Ok(())
    }
}

/// Random CMDP: transition entries `U(0,1)` then row-normalized, rewards and
/// constraints uniform on their configured ranges, uniform `rho`.
pub fn random_cmdp(spec: &CmdpSpec, seed: u64) -> Result<Cmdp> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (spec.num_states, spec.num_actions);

    let mut transition = Vec::with_capacity(n * m * n);
    for _ in 0..n * m {
        let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            transition.extend(row.iter().map(|p| p / sum));
        } else {
            transition.extend(std::iter::repeat_n(1.0 / n as f64, n));
        }
    }
    let mut uniform_table = |low: f64, high: f64| -> Vec<f64> {
        (0..n * m)
            .map(|_| low + (high - low) * rng.random::<f64>())
            .collect()
    };
    let reward = uniform_table(spec.reward_low, spec.reward_high);
    let constraints = (0..spec.num_constraints)
        .map(|_| uniform_table(spec.constraint_low, spec.constraint_high))
        .collect();
    let rho = vec![1.0 / n as f64; n];

    let mut cmdp = Cmdp::new(n, m, spec.gamma, transition, reward, constraints, rho)?;
    cmdp.generator_seed = Some(seed);
    Ok(cmdp)
}

/// On-disk layout with nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CmdpFile {
    num_states: usize,
    num_actions: usize,
    num_constraints: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    constraints: Vec<Vec<Vec<f64>>>,
    rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator_seed: Option<u64>,
}

impl From<&Cmdp> for CmdpFile {
    fn from(c: &Cmdp) -> Self {
        let (n, m) = (c.num_states, c.num_actions);
        let nest = |table: &[f64]| -> Vec<Vec<f64>> {
            table.chunks(m).map(<[f64]>::to_vec).collect()
        };
        Self {
            num_states: n,
            num_actions: m,
            num_constraints: c.constraints.len(),
            gamma: c.gamma,
            transition: c
                .transition
                .chunks(m * n)
                .map(|block| block.chunks(n).map(<[f64]>::to_vec).collect())
                .collect(),
            reward: nest(&c.reward),
            constraints: c.constraints.iter().map(|g| nest(g)).collect(),
            rho: c.rho.clone(),
            generator_seed: c.generator_seed,
        }
    }
}

impl TryFrom<CmdpFile> for Cmdp {
    type Error = Error;

    fn try_from(file: CmdpFile) -> Result<Self> {
        let (n, m) = (file.num_states, file.num_actions);
        let mismatch = |what: &str| Error::DimensionMismatch(format!("CMDP file: {what}"));
        if file.transition.len() != n
            || file
                .transition
                .iter()
                .any(|rows| rows.len() != m || rows.iter().any(|r| r.len() != n))
        {
            return Err(mismatch("transition must be [num_states][num_actions][num_states]"));
        }
        if file.reward.len() != n || file.reward.iter().any(|r| r.len() != m) {
            return Err(mismatch("reward must be [num_states][num_actions]"));
        }
        if file.constraints.len() != file.num_constraints {
            return Err(mismatch("constraints length differs from num_constraints"));
        }
        if file
            .constraints
            .iter()
            .any(|g| g.len() != n || g.iter().any(|r| r.len() != m))
        {
            return Err(mismatch("each constraint must be [num_states][num_actions]"));
        }
        let flatten2 = |t: Vec<Vec<f64>>| t.into_iter().flatten().collect::<Vec<_>>();
        let transition = file.transition.into_iter().flatten().flatten().collect();
        let mut c = Cmdp::new(
            n,
            m,
            file.gamma,
            transition,
            flatten2(file.reward),
            file.constraints.into_iter().map(flatten2).collect(),
            file.rho,
        )?;
        c.generator_seed = file.generator_seed;
        Ok(c)
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn random_policy(n: usize, m: usize, seed: u64) -> PolicyMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(n * m);
        for _ in 0..n {
            let row: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            probs.extend(row.iter().map(|p| p / sum));
        }
        PolicyMatrix::from_rows_unchecked(n, m, probs)
    }

    #[test]
    fn generated_instance_validates() {
        let c = random_cmdp(&CmdpSpec::standard_preset(), 42).unwrap();
        assert!(c.validate().is_ok(), "{}", c.validate());
    }

    #[test]
    fn short_transition_row_is_reported() {
        let mut c = random_cmdp(&CmdpSpec::standard_preset(), 1).unwrap();
        let start = (c.pair(3, 2)) * c.num_states;
        let row = &mut c.transition[start..start + c.num_states];
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p *= 0.9 / sum);
        let report = c.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            report.violations[0],
            Violation::TransitionRowSum { s: 3, a: 2, .. }
        ));
        assert!(report.to_string().contains("P[3][2]"));
    }

    #[test]
    fn out_of_range_reward_is_reported() {
        let mut c = random_cmdp(&CmdpSpec::standard_preset(), 1).unwrap();
        let idx = c.pair(4, 1);
        c.reward[idx] = 1.5;
        let report = c.validate();
        assert_eq!(
            report.violations,
            vec![Violation::Reward { s: 4, a: 1, value: 1.5 }]
        );
        assert!(report.to_string().contains("[0, 1]"));
    }

    #[test]
    fn single_state_value_is_geometric_sum() {
        let c = single_state(1.0, 0.8);
        let pi = PolicyMatrix::uniform(1, 1);
        let v = exact_state_values(&c, &pi, Signal::Reward).unwrap();
        assert!((v[0] - 5.0).abs() < 1e-12);
        let q = exact_action_values(&c, &pi, Signal::Reward).unwrap();
        assert!((q[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_state_chain_values() {
        let c = two_state_chain(0.5);
        let pi = PolicyMatrix::uniform(2, 1);
        let v = exact_state_values(&c, &pi, Signal::Reward).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        let q = exact_action_values(&c, &pi, Signal::Reward).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-12 && q[1].abs() < 1e-12);
        let d = exact_visitation(&c, &pi).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
        let occ = exact_occupancy(&c, &pi).unwrap();
        assert!((occ[0] - 0.5).abs() < 1e-12 && (occ[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_state_visitation_matches_series() {
        // (1 - gamma) * sum_t gamma^t Pr(s_t = s), truncated far past double precision.
        let gamma: f64 = 0.5;
        let mut series = [0.0f64; 2];
        for t in 0..200 {
            let s = if t == 0 { 0 } else { 1 };
            series[s] += (1.0 - gamma) * gamma.powi(t);
        }
        let c = two_state_chain(gamma);
        let d = exact_visitation(&c, &PolicyMatrix::uniform(2, 1)).unwrap();
        for s in 0..2 {
            assert!((d[s] - series[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_reward_return() {
        let mut c = random_cmdp(&CmdpSpec::standard_preset(), 3).unwrap();
        c.reward.iter_mut().for_each(|r| *r = 0.3);
        let pi = random_policy(10, 5, 9);
        assert!((exact_return(&c, &pi, Signal::Reward).unwrap() - 1.5).abs() < 1e-12);
        c.reward.iter_mut().for_each(|r| *r = 0.0);
        assert_eq!(exact_return(&c, &pi, Signal::Reward).unwrap(), 0.0);
    }

    #[test]
    fn single_state_two_action_occupancy() {
        let c = Cmdp::new(1, 2, 0.9, vec![1.0, 1.0], vec![0.0, 1.0], vec![], vec![1.0]).unwrap();
        let d = exact_occupancy(&c, &PolicyMatrix::uniform(1, 2)).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert_eq!(exact_visitation(&c, &PolicyMatrix::uniform(1, 2)).unwrap(), vec![1.0]);
    }

    #[test]
    fn values_match_iterative_evaluation() {
        let c = random_cmdp(&CmdpSpec::standard_preset(), 42).unwrap();
        let pi = PolicyMatrix::uniform(10, 5);
        let h = averaged_signal(&c, &pi, &c.reward);
        let kernel = policy_kernel(&c, &pi);
        let mut v = DVector::zeros(10);
        for _ in 0..500 {
            v = &h + &kernel * &v * c.gamma;
        }
        let exact = exact_state_values(&c, &pi, Signal::Reward).unwrap();
        for s in 0..10 {
            assert!((exact[s] - v[s]).abs() < 1e-8);
        }
    }

    #[test]
    fn single_action_generator_gives_unit_transition() {
        let c = random_cmdp(&CmdpSpec::new(1, 1, 1, 0.9), 5).unwrap();
        assert_eq!(c.transition, vec![1.0]);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = CmdpSpec::standard_preset();
        assert_eq!(random_cmdp(&spec, 42).unwrap(), random_cmdp(&spec, 42).unwrap());
        assert_ne!(random_cmdp(&spec, 42).unwrap(), random_cmdp(&spec, 43).unwrap());
    }

    #[test]
    fn generator_rejects_bad_bounds() {
        let mut spec = CmdpSpec::standard_preset();
        spec.constraint_low = -1.5;
        assert!(random_cmdp(&spec, 0).is_err());
        let mut spec = CmdpSpec::standard_preset();
        spec.reward_low = 0.8;
        spec.reward_high = 0.2;
        assert!(random_cmdp(&spec, 0).is_err());
    }

    #[test]
    fn constraint_entries_have_expected_mean() {
        let spec = CmdpSpec::standard_preset();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for seed in 0..20_000 {
            let c = random_cmdp(&spec, seed).unwrap();
            for &g in &c.constraints[0] {
                sum += g;
                sum_sq += g * g;
                count += 1;
            }
        }
        assert_eq!(count, 1_000_000);
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        let se = (var / count as f64).sqrt();
        let expected = (-0.71 + 0.29) / 2.0;
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn json_round_trip_preserves_instance() {
        let c = random_cmdp(&CmdpSpec::new(3, 2, 2, 0.7), 11).unwrap();
        let back = Cmdp::from_json_str(&c.to_json_string().unwrap()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn json_with_wrong_shape_is_rejected() {
        let c = random_cmdp(&CmdpSpec::new(3, 2, 1, 0.7), 11).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&c.to_json_string().unwrap()).unwrap();
        value["reward"][0] = serde_json::json!([0.1]);
        let err = Cmdp::from_json_str(&value.to_string()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn exact_oracles_are_consistent(
            seed in 0u64..10_000,
            n in 1usize..7,
            m in 1usize..5,
            gamma in 0.05f64..0.97,
        ) {
            let c = random_cmdp(&CmdpSpec::new(n, m, 1, gamma), seed).unwrap();
            let pi = random_policy(n, m, seed ^ 0xdead_beef);
            let kernel = policy_kernel(&c, &pi);
            let bound = c.value_bound();
            let occ = exact_occupancy(&c, &pi).unwrap();
            prop_assert!((occ.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(occ.iter().all(|d| *d >= 0.0));

            for sig in [Signal::Reward, Signal::Constraint(0)] {
                let table = c.signal_table(sig).unwrap();
                let v = exact_state_values(&c, &pi, sig).unwrap();
                let vv = DVector::from_column_slice(&v);
                let residual = &vv - averaged_signal(&c, &pi, table) - &kernel * &vv * gamma;
                prop_assert!(residual.amax() <= 1e-10);
                for &x in &v {
                    prop_assert!(x.abs() <= bound + 1e-10);
                    if sig == Signal::Reward {
                        prop_assert!(x >= -1e-12);
                    }
                }
                let q = exact_action_values(&c, &pi, sig).unwrap();
                for s in 0..n {
                    let avg: f64 = (0..m).map(|a| pi.prob(s, a) * q[c.pair(s, a)]).sum();
                    prop_assert!((avg - v[s]).abs() <= 1e-10);
                }
                let j = exact_return(&c, &pi, sig).unwrap();
                let dual: f64 = table.iter().zip(&occ).map(|(h, d)| h * d).sum::<f64>() / (1.0 - gamma);
                prop_assert!((j - dual).abs() <= 1e-10);
            }

            // Flow identity.
            for s in 0..n {
                let lhs: f64 = (0..m).map(|a| occ[c.pair(s, a)]).sum();
                let mut inflow = 0.0;
                for sp in 0..n {
                    for a in 0..m {
                        inflow += occ[c.pair(sp, a)] * c.next_state_probs(sp, a)[s];
                    }
                }
                let rhs = c.rho[s] * (1.0 - gamma) + gamma * inflow;
                prop_assert!((lhs - rhs).abs() <= 1e-10);
            }
        }
    }
}
