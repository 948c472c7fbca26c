//! Seeded experiment orchestration: one shared instance, paired runs over a
//! list of conservative margins, aggregation across seeds and the LP
//! reference values.

use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{random_cmdp, Cmdp, CmdpSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::lp::{self, LpSolution};
use crate::policy::{random_features, FeatureMap};
use crate::sampler::RngStream;
use crate::solver::{self, RunTrace, SolverConfig};

/// Fraction of the final iterations that forms the verdict window.
pub const FINAL_WINDOW_FRACTION: f64 = 0.2;

/// Crate version plus `git describe` output when built from a checkout.
pub const VERSION: &str = env!("CNPG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// Unit-norm Gaussian rows of dimension `dim`.
    Random { dim: usize },
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cmdp: CmdpSpec,
    pub features: FeatureSpec,
    pub solver: SolverConfig,
    pub kappa_values: Vec<f64>,
    pub num_runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    /// Record real `wall_ms` values in the trace files.
    #[serde(default)]
    pub wall_clock: bool,
}

impl ExperimentConfig {
    /// Default comparison: 10x5 instances, `d = 35`, `kappa in {0, 0.5}`,
    /// five seeds.
    pub fn standard() -> Self {
        Self {
            cmdp: CmdpSpec::standard_preset(),
            features: FeatureSpec::Random { dim: 35 },
            solver: SolverConfig::standard(),
            kappa_values: vec![0.0, 0.5],
            num_runs: 5,
            master_seed: 0,
            output_dir: None,
            workers: 0,
            wall_clock: false,
        }
    }

    /// Forty seeds with `kappa in {0, 1}`.
    pub fn extended() -> Self {
        Self {
            solver: SolverConfig::extended(),
            kappa_values: vec![0.0, 1.0],
            num_runs: 40,
            ..Self::standard()
        }
    }

    pub fn check(&self) -> Result<()> {
        self.cmdp.check()?;
        if self.num_runs == 0 {
            return Err(Error::Invalid("num_runs must be at least 1".into()));
        }
        if self.kappa_values.is_empty() {
            return Err(Error::Invalid("kappa_values is empty".into()));
        }
        if let FeatureSpec::Random { dim: 0 } = self.features {
            return Err(Error::Invalid("feature dimension must be positive".into()));
        }
        for &kappa in &self.kappa_values {
            SolverConfig {
                kappa,
                ..self.solver.clone()
            }
            .check(self.cmdp.gamma)?;
        }
        Ok(())
    }

    /// Solver seed of run `index`; shared by every kappa.
    pub fn run_seed(&self, index: usize) -> u64 {
        RngStream::substream(self.master_seed, index as u64).next_u64()
    }
}

/// The instance and feature map drawn from `master_seed`.
pub fn build_instance(cfg: &ExperimentConfig) -> Result<(Cmdp, FeatureMap)> {
    let c = random_cmdp(&cfg.cmdp, cfg.master_seed)?;
    let f = match cfg.features {
        FeatureSpec::Random { dim } => random_features(
            cfg.cmdp.num_states,
            cfg.cmdp.num_actions,
            dim,
            cfg.master_seed.wrapping_add(1),
        )?,
        FeatureSpec::Tabular => FeatureMap::tabular(cfg.cmdp.num_states, cfg.cmdp.num_actions),
    };
    Ok((c, f))
}

/// Column view of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceColumns {
    pub kappa: f64,
    pub iter: Vec<usize>,
    pub j_r: Vec<f64>,
    /// `j_g[i][k]`.
    pub j_g: Vec<Vec<f64>>,
    pub grad_l_norm: Vec<f64>,
}

impl TraceColumns {
    pub fn from_trace(t: &RunTrace) -> Self {
        let n = t.num_constraints();
        Self {
            kappa: t.config.kappa,
            iter: t.records.iter().map(|r| r.iter).collect(),
            j_r: t.records.iter().map(|r| r.j_r_exact).collect(),
            j_g: (0..n).map(|i| t.records.iter().map(|r| r.j_g_exact[i]).collect()).collect(),
            grad_l_norm: t.records.iter().map(|r| r.grad_l_norm_exact).collect(),
        }
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let name = path.display();
        let mut reader = csv::Reader::from_path(path)?;
        let header = reader.headers()?.clone();
        let num_constraints = header.iter().filter(|h| h.starts_with("j_g_exact_")).count();
        let expected = RunTrace::csv_header(num_constraints);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Invalid(format!("{name}: unexpected trace header")));
        }
        let kappa_col = 2 + 3 * num_constraints;
        let mut out = Self {
            kappa: f64::NAN,
            iter: Vec::new(),
            j_r: Vec::new(),
            j_g: vec![Vec::new(); num_constraints],
            grad_l_norm: Vec::new(),
        };
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let field = |col: usize| -> Result<f64> {
                record[col]
                    .parse::<f64>()
                    .map_err(|e| Error::Invalid(format!("{name}: row {}: column {col}: {e}", line + 1)))
            };
            out.iter.push(field(0)? as usize);
            out.j_r.push(field(1)?);
            for (i, col) in out.j_g.iter_mut().enumerate() {
                col.push(field(2 + i)?);
            }
            let kappa = field(kappa_col)?;
            if line == 0 {
                out.kappa = kappa;
            } else if kappa != out.kappa {
                return Err(Error::Invalid(format!("{name}: kappa changes inside the trace")));
            }
            out.grad_l_norm.push(field(kappa_col + 2)?);
        }
        if out.iter.is_empty() {
            return Err(Error::Invalid(format!("{name}: trace has no rows")));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.iter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iter.is_empty()
    }

    pub fn num_constraints(&self) -> usize {
        self.j_g.len()
    }
}

/// Start index of the final window for a run of `len` iterations.
pub fn final_window_start(len: usize) -> usize {
    let width = ((len as f64 * FINAL_WINDOW_FRACTION).ceil() as usize).clamp(1, len.max(1));
    len - width
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// First 1-based iteration at which every running-average constraint value
/// is non-negative.
pub fn first_nonneg_iter(running_jg: &[Vec<f64>]) -> Option<usize> {
    let len = running_jg.first().map_or(0, Vec::len);
    (0..len).find(|&k| running_jg.iter().all(|c| c[k] >= 0.0)).map(|k| k + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaAggregate {
    pub kappa: f64,
    pub num_traces: usize,
    pub iter: Vec<usize>,
    pub j_r_mean: Vec<f64>,
    pub j_r_std: Vec<f64>,
    /// `j_g_mean[i][k]`.
    pub j_g_mean: Vec<Vec<f64>>,
    pub j_g_std: Vec<Vec<f64>>,
    /// Running average of the seed-mean `J_g`, per constraint.
    pub running_j_g_mean: Vec<Vec<f64>>,
    /// Per constraint: mean of `running_j_g_mean` over the final window.
    pub final_window_jg_mean: Vec<f64>,
    /// Per constraint: minimum of `running_j_g_mean` over the final window.
    pub final_window_jg_min: Vec<f64>,
    /// Final-window running average is non-negative for every constraint.
    pub zero_violation: bool,
}

/// Across-seed statistics per kappa. Standard deviations use the
/// population convention (divide by `n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub kappas: Vec<KappaAggregate>,
}

impl AggregateSummary {
    pub fn from_columns(traces: &[(String, TraceColumns)]) -> Result<Self> {
        let (first_name, first) = traces
            .first()
            .ok_or_else(|| Error::Invalid("no traces to aggregate".into()))?;
        for (name, t) in traces {
            if t.len() != first.len() || t.num_constraints() != first.num_constraints() || t.iter != first.iter {
                return Err(Error::Invalid(format!(
                    "{name}: trace shape ({} rows, {} constraints) differs from {first_name} ({} rows, {} constraints)",
                    t.len(),
                    t.num_constraints(),
                    first.len(),
                    first.num_constraints()
                )));
            }
        }
        let mut kappas: Vec<f64> = Vec::new();
        for (_, t) in traces {
            if !kappas.contains(&t.kappa) {
                kappas.push(t.kappa);
            }
        }
        kappas.sort_by(f64::total_cmp);

        let len = first.len();
        let window = final_window_start(len);
        let stats = |series: &[&Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
            let n = series.len() as f64;
            (0..len)
                .map(|k| {
                    let m = series.iter().map(|s| s[k]).sum::<f64>() / n;
                    let v = series.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / n;
                    (m, v.sqrt())
                })
                .unzip()
        };
        let kappas = kappas
            .into_iter()
            .map(|kappa| {
                let group: Vec<&TraceColumns> = traces.iter().map(|(_, t)| t).filter(|t| t.kappa == kappa).collect();
                let (j_r_mean, j_r_std) = stats(&group.iter().map(|t| &t.j_r).collect::<Vec<_>>());
                let (j_g_mean, j_g_std): (Vec<_>, Vec<_>) = (0..first.num_constraints())
                    .map(|i| stats(&group.iter().map(|t| &t.j_g[i]).collect::<Vec<_>>()))
                    .unzip();
                let running: Vec<Vec<f64>> = j_g_mean
                    .iter()
                    .map(|m| solver::running_average(m.iter().copied()))
                    .collect();
                let final_window_jg_mean: Vec<f64> = running.iter().map(|r| mean(&r[window..])).collect();
                let final_window_jg_min: Vec<f64> = running
                    .iter()
                    .map(|r| r[window..].iter().copied().fold(f64::INFINITY, f64::min))
                    .collect();
                KappaAggregate {
                    kappa,
                    num_traces: group.len(),
                    iter: first.iter.clone(),
                    j_r_mean,
                    j_r_std,
                    j_g_mean,
                    j_g_std,
                    zero_violation: final_window_jg_min.iter().all(|&v| v >= 0.0),
                    running_j_g_mean: running,
                    final_window_jg_mean,
                    final_window_jg_min,
                }
            })
            .collect();
        Ok(Self { kappas })
    }

    pub fn get(&self, kappa: f64) -> Option<&KappaAggregate> {
        self.kappas.iter().find(|k| k.kappa == kappa)
    }

    /// `kappa, iter, j_r_mean, j_r_std, j_g0_mean, j_g0_std, ...`
    pub fn to_csv_string(&self) -> Result<String> {
        let num_constraints = self.kappas.first().map_or(0, |k| k.j_g_mean.len());
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["kappa".to_string(), "iter".into(), "j_r_mean".into(), "j_r_std".into()];
        for i in 0..num_constraints {
            header.push(format!("j_g{i}_mean"));
            header.push(format!("j_g{i}_std"));
        }
        writer.write_record(&header)?;
        for agg in &self.kappas {
            for k in 0..agg.iter.len() {
                let mut row = vec![
                    agg.kappa.to_string(),
                    agg.iter[k].to_string(),
                    agg.j_r_mean[k].to_string(),
                    agg.j_r_std[k].to_string(),
                ];
                for i in 0..num_constraints {
                    row.push(agg.j_g_mean[i][k].to_string());
                    row.push(agg.j_g_std[i][k].to_string());
                }
                writer.write_record(&row)?;
            }
        }
        let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Reads trace CSV files and aggregates them per kappa.
pub fn aggregate_runs<P: AsRef<Path>>(paths: &[P]) -> Result<AggregateSummary> {
    let traces = paths
        .iter()
        .map(|p| Ok((p.as_ref().display().to_string(), TraceColumns::read_csv(p.as_ref())?)))
        .collect::<Result<Vec<_>>>()?;
    AggregateSummary::from_columns(&traces)
}

/// One row of the kappa comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub kappa: f64,
    /// Seed mean of the final-window mean of `J_r`.
    pub final_window_jr_mean: f64,
    /// Per constraint: final-window mean of the seed-mean running average.
    pub final_window_jg_mean: Vec<f64>,
    pub zero_violation: bool,
    /// First iteration at which the seed-mean running average is
    /// non-negative.
    pub first_nonneg_iter: Option<usize>,
    /// The same per seed.
    pub first_nonneg_iter_per_run: Vec<Option<usize>>,
    /// LP optimum of the kappa-tightened problem.
    pub lp_objective: Option<f64>,
    /// `J_LP(kappa = 0) - final_window_jr_mean`.
    pub lp_gap: Option<f64>,
}

/// Verdict file entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kappa: f64,
    pub final_window_jg_mean: Vec<f64>,
    pub zero_violation: bool,
    pub first_nonneg_iter: Option<usize>,
    pub lp_objective: Option<f64>,
    pub lp_gap: Option<f64>,
}

impl From<&ComparisonRow> for Verdict {
    fn from(r: &ComparisonRow) -> Self {
        Self {
            kappa: r.kappa,
            final_window_jg_mean: r.final_window_jg_mean.clone(),
            zero_violation: r.zero_violation,
            first_nonneg_iter: r.first_nonneg_iter,
            lp_objective: r.lp_objective,
            lp_gap: r.lp_gap,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub kappa: f64,
    pub run_index: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunTrace, String>,
    pub trace_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub cmdp: Cmdp,
    pub features: FeatureMap,
    pub slater_margin: f64,
    /// LP solutions, one per kappa in `config.kappa_values` plus `kappa = 0`.
    pub lp: Vec<(f64, LpSolution)>,
    pub runs: Vec<RunResult>,
    pub summary: AggregateSummary,
    pub comparison: Vec<ComparisonRow>,
}

impl ExperimentOutcome {
    pub fn traces(&self, kappa: f64) -> impl Iterator<Item = &RunTrace> {
        self.runs
            .iter()
            .filter(move |r| r.kappa == kappa)
            .filter_map(|r| r.outcome.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(|r| r.outcome.is_err())
    }

    pub fn lp_objective(&self, kappa: f64) -> Option<f64> {
        self.lp.iter().find(|(k, _)| *k == kappa).and_then(|(_, s)| s.objective)
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        self.comparison.iter().map(Verdict::from).collect()
    }
}

/// Per-run metadata written next to each trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceMeta {
    pub version: String,
    pub master_seed: u64,
    pub run_index: usize,
    pub seed: u64,
    pub config: SolverConfig,
    pub sigma_lambda: f64,
    pub alpha: f64,
    pub slater_margin: f64,
    pub warnings: Vec<String>,
}

pub fn trace_file_name(kappa: f64, run_index: usize) -> String {
    format!("trace_kappa{kappa}_run{run_index:03}.csv")
}

fn kappa_compare_rows(
    summary: &AggregateSummary,
    runs: &[RunResult],
    lp: &[(f64, LpSolution)],
) -> Vec<ComparisonRow> {
    let lp_at = |kappa: f64| lp.iter().find(|(k, _)| *k == kappa).and_then(|(_, s)| s.objective);
    let lp_base = lp_at(0.0);
    summary
        .kappas
        .iter()
        .map(|agg| {
            let traces: Vec<&RunTrace> = runs
                .iter()
                .filter(|r| r.kappa == agg.kappa)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            let window = final_window_start(agg.iter.len());
            let final_window_jr_mean = mean(
                &traces
                    .iter()
                    .map(|t| mean(&t.records[window..].iter().map(|r| r.j_r_exact).collect::<Vec<_>>()))
                    .collect::<Vec<_>>(),
            );
            let first_nonneg_iter_per_run = traces
                .iter()
                .map(|t| {
                    let running: Vec<Vec<f64>> = (0..t.num_constraints()).map(|i| t.running_average_j_g(i)).collect();
                    first_nonneg_iter(&running)
                })
                .collect();
            ComparisonRow {
                kappa: agg.kappa,
                final_window_jr_mean,
                final_window_jg_mean: agg.final_window_jg_mean.clone(),
                zero_violation: agg.zero_violation,
                first_nonneg_iter: first_nonneg_iter(&agg.running_j_g_mean),
                first_nonneg_iter_per_run,
                lp_objective: lp_at(agg.kappa),
                lp_gap: lp_base.map(|b| b - final_window_jr_mean),
            }
        })
        .collect()
}

/// Comparison table of an experiment's kappa values.
pub fn compare_kappa(outcome: &ExperimentOutcome) -> Vec<ComparisonRow> {
    kappa_compare_rows(&outcome.summary, &outcome.runs, &outcome.lp)
}

/// Runs every `(kappa, seed)` pair on the instance drawn from the master
/// seed. Failed runs are recorded and the remaining runs continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.check()?;
    let (cmdp, features) = build_instance(cfg)?;
    let slater_margin = lp::slater_margin(&cmdp)?;

    let mut lp_kappas = vec![0.0];
    lp_kappas.extend(cfg.kappa_values.iter().copied().filter(|&k| k != 0.0));
    let lp = lp_kappas
        .iter()
        .map(|&k| Ok((k, lp::solve_occupancy_lp(&cmdp, k)?)))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(f64, usize)> = cfg
        .kappa_values
        .iter()
        .flat_map(|&k| (0..cfg.num_runs).map(move |j| (k, j)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let runs: Vec<RunResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(kappa, run_index)| {
                let seed = cfg.run_seed(run_index);
                let solver_cfg = SolverConfig {
                    kappa,
                    seed,
                    ..cfg.solver.clone()
                };
                let outcome = solver::run(&cmdp, &features, &solver_cfg).map_err(|e| e.to_string());
                RunResult {
                    kappa,
                    run_index,
                    seed,
                    outcome,
                    trace_path: None,
                }
            })
            .collect()
    });

    let columns: Vec<(String, TraceColumns)> = runs
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .ok()
                .map(|t| (trace_file_name(r.kappa, r.run_index), TraceColumns::from_trace(t)))
        })
        .collect();
    if columns.is_empty() {
        let first = runs.iter().find_map(|r| r.outcome.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::Invalid(format!("every run failed; first error: {first}")));
    }
    let summary = AggregateSummary::from_columns(&columns)?;
    let comparison = kappa_compare_rows(&summary, &runs, &lp);

    let mut outcome = ExperimentOutcome {
        config: cfg.clone(),
        cmdp,
        features,
        slater_margin,
        lp,
        runs,
        summary,
        comparison,
    };
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&mut outcome, dir)?;
    }
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_outputs(outcome: &mut ExperimentOutcome, dir: &Path) -> Result<()> {
    let cfg = &outcome.config;
    write_atomic(&dir.join("cmdp.json"), outcome.cmdp.to_json_string()?.as_bytes())?;
    write_atomic(&dir.join("features.json"), outcome.features.to_json_string()?.as_bytes())?;
    write_json(
        &dir.join("experiment.json"),
        &serde_json::json!({ "version": VERSION, "config": cfg }),
    )?;
    for run in &mut outcome.runs {
        let Ok(trace) = &run.outcome else { continue };
        let path = dir.join(trace_file_name(run.kappa, run.run_index));
        trace.save_csv(&path, cfg.wall_clock)?;
        let meta = TraceMeta {
            version: VERSION.to_string(),
            master_seed: cfg.master_seed,
            run_index: run.run_index,
            seed: run.seed,
            config: trace.config.clone(),
            sigma_lambda: trace.sigma_lambda,
            alpha: trace.alpha,
            slater_margin: trace.slater_margin,
            warnings: trace.warnings.clone(),
        };
        write_json(&path.with_extension("meta.json"), &meta)?;
        run.trace_path = Some(path);
    }
    write_atomic(&dir.join("summary.csv"), outcome.summary.to_csv_string()?.as_bytes())?;
    write_json(&dir.join("verdict.json"), &outcome.verdicts())?;
    write_json(&dir.join("comparison.json"), &outcome.comparison)?;
    let failures: Vec<_> = outcome
        .failures()
        .map(|r| {
            serde_json::json!({
                "kappa": r.kappa,
                "run_index": r.run_index,
                "seed": r.seed,
                "error": r.outcome.as_ref().err(),
            })
        })
        .collect();
    if !failures.is_empty() {
        write_json(&dir.join("failures.json"), &failures)?;
    }
    Ok(())
}
