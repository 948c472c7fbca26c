//! Occupancy-measure linear programming baseline.
//!
//! The constrained problem over stationary policies is equivalent to a linear
//! program over discounted state-action occupancies:
//!
//! ```text
//! max  <r, phi> / (1 - gamma)
//! s.t. sum_a phi(s,a) - gamma sum_{s',a} P(s|s',a) phi(s',a) = (1 - gamma) rho(s)
//!      <g_i, phi> >= kappa (1 - gamma)
//!      phi >= 0
//! ```
//!
//! It is solved with a dense two-phase simplex using Bland's rule, which is
//! exact enough at these sizes to serve as the reference optimum.

use serde::{Deserialize, Serialize};

use crate::cmdp::{Cmdp, PolicyMatrix};
use crate::error::{Error, Result};

/// Primal feasibility tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Reduced-cost optimality tolerance.
pub const OPTIMALITY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;
/// States whose occupancy mass is at or below this are treated as unreached.
pub const UNREACHED_MASS: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

/// `max c^T x` subject to row constraints and `x >= 0`.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    num_vars: usize,
    objective: Vec<f64>,
    rows: Vec<(Vec<f64>, Relation, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal {
        x: Vec<f64>,
        objective: f64,
        /// Largest reduced cost at termination; `<= OPTIMALITY_TOL` certifies
        /// the basis.
        max_reduced_cost: f64,
    },
    Infeasible,
    Unbounded,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        Self {
            num_vars: objective.len(),
            objective,
            rows: Vec::new(),
        }
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, rel: Relation, rhs: f64) -> &mut Self {
        assert_eq!(coeffs.len(), self.num_vars, "row width must match the objective");
        self.rows.push((coeffs, rel, rhs));
        self
    }

    pub fn solve(&self) -> LpOutcome {
        Tableau::build(self).solve(&self.objective)
    }
}

struct Tableau {
    /// `m x (cols + 1)`; the last column is the right-hand side.
    cells: Vec<Vec<f64>>,
    basis: Vec<usize>,
    num_structural: usize,
    /// Columns at or past this index are artificial.
    first_artificial: usize,
    cols: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars;
        let rows: Vec<(Vec<f64>, Relation, f64)> = lp
            .rows
            .iter()
            .map(|(a, rel, b)| {
                if *b < 0.0 {
                    let flipped = match rel {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    (a.iter().map(|x| -x).collect(), flipped, -b)
                } else {
                    (a.clone(), *rel, *b)
                }
            })
            .collect();
        let num_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
        let num_artificial = rows.iter().filter(|r| r.1 != Relation::Le).count();
        let first_artificial = n + num_slack;
        let cols = first_artificial + num_artificial;

        let mut cells = Vec::with_capacity(rows.len());
        let mut basis = Vec::with_capacity(rows.len());
        let (mut slack, mut artificial) = (n, first_artificial);
        for (a, rel, b) in rows {
            let mut row = vec![0.0; cols + 1];
            row[..n].copy_from_slice(&a);
            row[cols] = b;
            match rel {
                Relation::Le => {
                    row[slack] = 1.0;
                    basis.push(slack);
                    slack += 1;
                }
                Relation::Ge => {
                    row[slack] = -1.0;
                    slack += 1;
                    row[artificial] = 1.0;
                    basis.push(artificial);
                    artificial += 1;
                }
                Relation::Eq => {
                    row[artificial] = 1.0;
                    basis.push(artificial);
                    artificial += 1;
                }
            }
            cells.push(row);
        }
        Self {
            cells,
            basis,
            num_structural: n,
            first_artificial,
            cols,
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.cols + 1;
        let p = self.cells[row][col];
        for j in 0..width {
            self.cells[row][j] /= p;
        }
        let pivot_row = self.cells[row].clone();
        for (i, r) in self.cells.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let factor = r[col];
            if factor != 0.0 {
                for j in 0..width {
                    r[j] -= factor * pivot_row[j];
                }
                r[col] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    fn reduced_costs(&self, costs: &[f64], allowed: usize) -> Vec<f64> {
        (0..allowed)
            .map(|j| {
                costs[j]
                    - self
                        .cells
                        .iter()
                        .zip(&self.basis)
                        .map(|(r, &b)| costs[b] * r[j])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Maximizes `costs` over columns `< allowed` with Bland's rule.
    /// Returns `false` if the objective is unbounded.
    fn optimize(&mut self, costs: &[f64], allowed: usize) -> bool {
        loop {
            let reduced = self.reduced_costs(costs, allowed);
            let Some(entering) = (0..allowed).find(|&j| reduced[j] > OPTIMALITY_TOL) else {
                return true;
            };
            let rhs = self.cols;
            let mut leaving: Option<(usize, f64)> = None;
            for (i, r) in self.cells.iter().enumerate() {
                let a = r[entering];
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = r[rhs].max(0.0) / a;
                leaving = match leaving {
                    None => Some((i, ratio)),
                    Some((best, best_ratio)) => {
                        if ratio < best_ratio - 1e-15
                            || (ratio <= best_ratio + 1e-15 && self.basis[i] < self.basis[best])
                        {
                            Some((i, ratio))
                        } else {
                            Some((best, best_ratio))
                        }
                    }
                };
            }
            match leaving {
                Some((row, _)) => self.pivot(row, entering),
                None => return false,
            }
        }
    }

    fn solve(mut self, objective: &[f64]) -> LpOutcome {
        let rhs = self.cols;
        if self.first_artificial < self.cols {
            let mut phase_one = vec![0.0; self.cols];
            phase_one[self.first_artificial..].iter_mut().for_each(|c| *c = -1.0);
            self.optimize(&phase_one, self.cols);
            let infeasibility: f64 = self
                .cells
                .iter()
                .zip(&self.basis)
                .filter(|(_, &b)| b >= self.first_artificial)
                .map(|(r, _)| r[rhs])
                .sum();
            if infeasibility > FEASIBILITY_TOL {
                return LpOutcome::Infeasible;
            }
            // Drive remaining (zero-level) artificials out of the basis; rows
            // with no usable pivot are redundant and dropped.
            let mut i = 0;
            while i < self.cells.len() {
                if self.basis[i] >= self.first_artificial {
                    let col = (0..self.first_artificial).find(|&j| self.cells[i][j].abs() > 1e-9);
                    match col {
                        Some(j) => self.pivot(i, j),
                        None => {
                            self.cells.remove(i);
                            self.basis.remove(i);
                            continue;
                        }
                    }
                }
                i += 1;
            }
        }

        let mut costs = vec![0.0; self.cols];
        costs[..self.num_structural].copy_from_slice(objective);
        if !self.optimize(&costs, self.first_artificial) {
            return LpOutcome::Unbounded;
        }
        let max_reduced_cost = self
            .reduced_costs(&costs, self.first_artificial)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut x = vec![0.0; self.num_structural];
        for (r, &b) in self.cells.iter().zip(&self.basis) {
            if b < self.num_structural {
                x[b] = r[rhs].max(0.0);
            }
        }
        let value = x.iter().zip(objective).map(|(a, b)| a * b).sum();
        LpOutcome::Optimal {
            x,
            objective: value,
            max_reduced_cost,
        }
    }
}

/// A discounted state-action occupancy measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub num_states: usize,
    pub num_actions: usize,
    /// Flat over pairs `s * A + a`.
    pub phi: Vec<f64>,
}

impl OccupancyMeasure {
    /// Largest violation of the flow equalities.
    pub fn flow_residual(&self, c: &Cmdp) -> f64 {
        flow_rows(c)
            .iter()
            .zip(&c.rho)
            .map(|(row, rho)| {
                let lhs: f64 = row.iter().zip(&self.phi).map(|(a, x)| a * x).sum();
                (lhs - (1.0 - c.gamma) * rho).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn total_mass(&self) -> f64 {
        self.phi.iter().sum()
    }
}

/// Coefficients of the flow equality for every state.
fn flow_rows(c: &Cmdp) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; c.num_pairs()]; c.num_states];
    for sp in 0..c.num_states {
        for a in 0..c.num_actions {
            let col = c.pair(sp, a);
            rows[sp][col] += 1.0;
            for (s, &p) in c.next_state_probs(sp, a).iter().enumerate() {
                rows[s][col] -= c.gamma * p;
            }
        }
    }
    rows
}

fn occupancy_program(c: &Cmdp, objective: Vec<f64>, extra_vars: usize) -> LinearProgram {
    let mut lp = LinearProgram::new(objective);
    for (row, rho) in flow_rows(c).into_iter().zip(&c.rho) {
        let mut coeffs = row;
        coeffs.resize(c.num_pairs() + extra_vars, 0.0);
        lp.add_row(coeffs, Relation::Eq, (1.0 - c.gamma) * rho);
    }
    lp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LpSolutionFile", try_from = "LpSolutionFile")]
pub struct LpSolution {
    pub status: LpStatus,
    /// `<r, phi*> / (1 - gamma)`.
    pub objective: Option<f64>,
    /// `<g_i, phi*> / (1 - gamma)` per constraint.
    pub constraint_values: Vec<f64>,
    pub phi_star: Option<OccupancyMeasure>,
}

/// Serialized form: `phi` is flat over `s * A + a`.
#[derive(Serialize, Deserialize)]
struct LpSolutionFile {
    status: LpStatus,
    objective: Option<f64>,
    constraint_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_actions: Option<usize>,
    phi: Option<Vec<f64>>,
}

impl From<LpSolution> for LpSolutionFile {
    fn from(sol: LpSolution) -> Self {
        let (num_states, num_actions, phi) = match sol.phi_star {
            Some(o) => (Some(o.num_states), Some(o.num_actions), Some(o.phi)),
            None => (None, None, None),
        };
        Self {
            status: sol.status,
            objective: sol.objective,
            constraint_values: sol.constraint_values,
            num_states,
            num_actions,
            phi,
        }
    }
}

impl TryFrom<LpSolutionFile> for LpSolution {
    type Error = String;

    fn try_from(file: LpSolutionFile) -> std::result::Result<Self, String> {
        let phi_star = match (file.phi, file.num_states, file.num_actions) {
            (Some(phi), Some(n), Some(m)) if phi.len() == n * m => Some(OccupancyMeasure {
                num_states: n,
                num_actions: m,
                phi,
            }),
            (None, _, _) => None,
            _ => return Err("phi needs num_states and num_actions matching its length".into()),
        };
        Ok(Self {
            status: file.status,
            objective: file.objective,
            constraint_values: file.constraint_values,
            phi_star,
        })
    }
}

impl LpSolution {
    fn without_solution(status: LpStatus) -> Self {
        Self {
            status,
            objective: None,
            constraint_values: Vec::new(),
            phi_star: None,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// Best occupancy measure subject to every constraint value being at least
/// `kappa`.
pub fn solve_occupancy_lp(c: &Cmdp, kappa: f64) -> Result<LpSolution> {
    if !(kappa >= 0.0) {
        return Err(Error::Invalid(format!("kappa = {kappa} must be non-negative")));
    }
    let h = 1.0 - c.gamma;
    let mut lp = occupancy_program(c, c.reward.clone(), 0);
    for g in &c.constraints {
        lp.add_row(g.clone(), Relation::Ge, kappa * h);
    }
    match lp.solve() {
        LpOutcome::Optimal { x, .. } => {
            let dot = |t: &[f64]| t.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / h;
            Ok(LpSolution {
                status: LpStatus::Optimal,
                objective: Some(dot(&c.reward)),
                constraint_values: c.constraints.iter().map(|g| dot(g)).collect(),
                phi_star: Some(OccupancyMeasure {
                    num_states: c.num_states,
                    num_actions: c.num_actions,
                    phi: x,
                }),
            })
        }
        LpOutcome::Infeasible => Ok(LpSolution::without_solution(LpStatus::Infeasible)),
        LpOutcome::Unbounded => Ok(LpSolution::without_solution(LpStatus::Unbounded)),
    }
}

/// Slater margin: `max_phi min_i <g_i, phi> / (1 - gamma)`. Infinite when the
/// CMDP has no constraints.
pub fn slater_margin(c: &Cmdp) -> Result<f64> {
    if c.constraints.is_empty() {
        return Ok(f64::INFINITY);
    }
    let h = 1.0 - c.gamma;
    let pairs = c.num_pairs();
    // Free margin t = t_plus - t_minus appended after the occupancy variables.
    let mut objective = vec![0.0; pairs + 2];
    objective[pairs] = 1.0;
    objective[pairs + 1] = -1.0;
    let mut lp = occupancy_program(c, objective, 2);
    for g in &c.constraints {
        let mut row = g.clone();
        row.push(-h);
        row.push(h);
        lp.add_row(row, Relation::Ge, 0.0);
    }
    match lp.solve() {
        LpOutcome::Optimal { objective, .. } => Ok(objective),
        other => Err(Error::Infeasible(format!(
            "Slater program did not solve: {other:?}"
        ))),
    }
}

/// `pi(a|s) = phi(s,a) / sum_a phi(s,a)`, uniform on unreached states.
pub fn policy_from_occupancy(phi: &OccupancyMeasure) -> Result<PolicyMatrix> {
    let (n, m) = (phi.num_states, phi.num_actions);
    if phi.phi.len() != n * m {
        return Err(Error::DimensionMismatch(format!(
            "occupancy has {} entries, expected {}",
            phi.phi.len(),
            n * m
        )));
    }
    let mut probs = Vec::with_capacity(n * m);
    for s in 0..n {
        let row: Vec<f64> = phi.phi[s * m..(s + 1) * m].iter().map(|x| x.max(0.0)).collect();
        let mass: f64 = row.iter().sum();
        if mass <= UNREACHED_MASS {
            probs.extend(std::iter::repeat_n(1.0 / m as f64, m));
        } else {
            probs.extend(row.iter().map(|x| x / mass));
        }
    }
    PolicyMatrix::new(n, m, probs)
}
