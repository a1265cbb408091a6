//! Experiment orchestration: wires a learner to an environment through the
//! query ledger, tracks regret against the best expert in hindsight, and
//! aggregates repetitions and budget sweeps.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{AdvicePolicy, LearnerConfig, ObservedLosses, RoundTrace};
use crate::environments::{load_matrix_csv, matrix_environment, Environment, LedgerSummary, LossOracle, QueryLedger};
use crate::primitives::check_budget;
use crate::{AdviceEfficientLearner, Error, FullInfoHedge, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    AdviceEfficient,
    FullInfoBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum MatrixSource {
    Path { path: PathBuf },
    Inline { losses: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BernoulliParams {
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftingParams {
    pub base_means: Vec<f64>,
    pub drift_period: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ArmParams {
    Means { arm_means: Vec<f64> },
    MatrixPath { arm_matrix: PathBuf },
    MatrixInline { arm_losses: Vec<Vec<f64>> },
}

/// Environment description as it appears in a config file. Seeds are not part
/// of it; each repetition derives its own environment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    Matrix(MatrixSource),
    Bernoulli(BernoulliParams),
    Drifting(DriftingParams),
    BanditAdapter(ArmParams),
}

fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

impl EnvironmentSpec {
    /// Resolves file references against `base_dir` and loads them, so the environment
    /// can be instantiated repeatedly without touching the filesystem.
    pub fn load_files(self, base_dir: &Path) -> Result<Self> {
        Ok(match self {
            EnvironmentSpec::Matrix(MatrixSource::Path { path }) => EnvironmentSpec::Matrix(MatrixSource::Inline {
                losses: load_matrix_csv(&resolve(base_dir, &path))?,
            }),
            EnvironmentSpec::BanditAdapter(ArmParams::MatrixPath { arm_matrix }) => {
                EnvironmentSpec::BanditAdapter(ArmParams::MatrixInline {
                    arm_losses: load_matrix_csv(&resolve(base_dir, &arm_matrix))?,
                })
            }
            other => other,
        })
    }

    pub fn build(&self, seed: u64) -> Result<Environment> {
        match self {
            EnvironmentSpec::Matrix(MatrixSource::Inline { losses }) => matrix_environment(losses.clone()),
            EnvironmentSpec::Matrix(MatrixSource::Path { path }) => matrix_environment(load_matrix_csv(path)?),
            EnvironmentSpec::Bernoulli(p) => Environment::bernoulli(p.means.clone(), seed),
            EnvironmentSpec::Drifting(p) => Environment::drifting(p.base_means.clone(), p.drift_period, seed),
            EnvironmentSpec::BanditAdapter(ArmParams::Means { arm_means }) => {
                Ok(Environment::bandit(Environment::bernoulli(arm_means.clone(), seed)?))
            }
            EnvironmentSpec::BanditAdapter(ArmParams::MatrixPath { arm_matrix }) => {
                Ok(Environment::bandit(matrix_environment(load_matrix_csv(arm_matrix)?)?))
            }
            EnvironmentSpec::BanditAdapter(ArmParams::MatrixInline { arm_losses }) => {
                Ok(Environment::bandit(matrix_environment(arm_losses.clone())?))
            }
        }
    }
}

fn default_repetitions() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub environment: EnvironmentSpec,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_budget(self.m, self.n)?;
        if self.t == 0 {
            return Err(Error::invalid("T must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        let env = self.environment.build(0)?;
        if env.n_experts() != self.n {
            return Err(Error::invalid(format!(
                "environment has {} experts but N={}",
                env.n_experts(),
                self.n
            )));
        }
        if let Some(h) = env.horizon() {
            if h < self.t {
                return Err(Error::invalid(format!("environment defines {h} rounds but T={}", self.t)));
            }
        }
        Ok(())
    }

    /// Experts queried per round by the configured algorithm.
    pub fn budget(&self) -> usize {
        match self.algorithm {
            Algorithm::AdviceEfficient => self.m,
            Algorithm::FullInfoBaseline => self.n,
        }
    }

    pub fn repetition_seed(&self, r: usize) -> u64 {
        self.base_seed.wrapping_add(r as u64)
    }
}

const ENV_STREAM: u64 = 1;
const ALGO_STREAM: u64 = 2;

/// Seed for the environment of the run with `seed`; independent of the algorithm and of `M`.
pub fn environment_seed(seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ENV_STREAM);
    rng.next_u64()
}

/// Random stream driving the learner's sampling in the run with `seed`.
pub fn algorithm_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ALGO_STREAM);
    rng
}

/// `2 sqrt((N / M) t ln N)`.
pub fn regret_bound(n: usize, m: usize, t: usize) -> f64 {
    2.0 * ((n as f64 / m as f64) * t as f64 * (n as f64).ln()).sqrt()
}

pub fn bound_curve(n: usize, m: usize, horizon: usize) -> Vec<f64> {
    (1..=horizon).map(|t| regret_bound(n, m, t)).collect()
}

/// Outcome of a single run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    /// Per-round traces; empty unless requested.
    pub traces: Vec<RoundTrace<f64>>,
    pub cumulative_loss: Vec<f64>,
    /// `regret[t - 1]` is the learner's loss minus the best expert's true loss over rounds `1..=t`.
    pub regret: Vec<f64>,
    pub best_expert: usize,
    pub ledger: LedgerSummary,
}

/// Drives `policy` for `horizon` rounds against `env`. The ledger allows
/// exactly `budget` distinct expert queries per round.
pub fn run_policy<P, O, R>(
    policy: &mut P,
    env: &O,
    budget: usize,
    horizon: usize,
    rng: &mut R,
    keep_traces: bool,
) -> Result<RunOutcome>
where
    P: AdvicePolicy<f64>,
    O: LossOracle + ?Sized,
    R: rand::Rng + ?Sized,
{
    let n = env.n_experts();
    if policy.n_experts() != n {
        return Err(Error::invalid(format!(
            "learner expects {} experts, environment has {n}",
            policy.n_experts()
        )));
    }
    let mut ledger = QueryLedger::new(budget);
    let mut traces = Vec::new();
    let mut cumulative_loss = Vec::with_capacity(horizon);
    let mut regret = Vec::with_capacity(horizon);
    let mut expert_totals = vec![0.0; n];
    let mut learner_total = 0.0;
    for round in 1..=horizon {
        ledger.open_round(round)?;
        let sample = policy.begin_round(rng)?;
        let mut losses = ObservedLosses::new();
        for &h in sample.observed() {
            let v = ledger.query(env, h)?;
            losses.insert(h, crate::LossValue::new(v)?);
        }
        ledger.close_round()?;
        let trace = policy.feed_losses(&losses)?;
        learner_total += trace.algorithm_loss;
        for (total, v) in expert_totals.iter_mut().zip(env.loss_row(round)?) {
            *total += v;
        }
        let best = expert_totals.iter().copied().fold(f64::INFINITY, f64::min);
        cumulative_loss.push(learner_total);
        regret.push(learner_total - best);
        if keep_traces {
            traces.push(trace);
        }
    }
    let best_expert = (0..n).fold(0, |b, h| if expert_totals[h] < expert_totals[b] { h } else { b });
    Ok(RunOutcome {
        traces,
        cumulative_loss,
        regret,
        best_expert,
        ledger: ledger.summary(),
    })
}

fn run_seeded(config: &ExperimentConfig, seed: u64, keep_traces: bool) -> Result<RunOutcome> {
    check_budget(config.m, config.n)?;
    let env = config.environment.build(environment_seed(seed))?;
    let mut rng = algorithm_rng(seed);
    match config.algorithm {
        Algorithm::AdviceEfficient => {
            let mut learner = AdviceEfficientLearner::<f64>::new(LearnerConfig::new(config.n, config.m)?)?;
            run_policy(&mut learner, &env, config.budget(), config.t, &mut rng, keep_traces)
        }
        Algorithm::FullInfoBaseline => {
            let mut learner = FullInfoHedge::<f64>::new(config.n)?;
            run_policy(&mut learner, &env, config.budget(), config.t, &mut rng, keep_traces)
        }
    }
}

/// One full run with traces retained.
pub fn run_once(config: &ExperimentConfig, seed: u64) -> Result<(Vec<RoundTrace<f64>>, Vec<f64>)> {
    config.validate()?;
    let out = run_seeded(config, seed, true)?;
    Ok((out.traces, out.regret))
}

/// Summary statistics of a quantity over repetitions, per round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation; zero for a single repetition.
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl CurveStats {
    fn from_runs(curves: &[&[f64]]) -> Self {
        let t = curves[0].len();
        let r = curves.len() as f64;
        let mut stats = CurveStats {
            mean: vec![0.0; t],
            std: vec![0.0; t],
            min: vec![f64::INFINITY; t],
            max: vec![f64::NEG_INFINITY; t],
        };
        for c in curves {
            for (i, &v) in c.iter().enumerate() {
                stats.mean[i] += v;
                stats.min[i] = stats.min[i].min(v);
                stats.max[i] = stats.max[i].max(v);
            }
        }
        stats.mean.iter_mut().for_each(|m| *m /= r);
        if curves.len() > 1 {
            for c in curves {
                for (i, &v) in c.iter().enumerate() {
                    stats.std[i] += (v - stats.mean[i]).powi(2);
                }
            }
            stats.std.iter_mut().for_each(|s| *s = (*s / (r - 1.0)).sqrt());
        }
        stats
    }

    pub fn last_mean(&self) -> f64 {
        *self.mean.last().expect("non-empty curve")
    }

    pub fn last_std(&self) -> f64 {
        *self.std.last().expect("non-empty curve")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub cumulative_loss: CurveStats,
    pub regret: CurveStats,
    pub bound: Vec<f64>,
    pub best_experts: Vec<usize>,
    pub ledger: LedgerSummary,
}

impl ExperimentResult {
    pub fn final_mean_regret(&self) -> f64 {
        self.regret.last_mean()
    }

    pub fn final_bound(&self) -> f64 {
        *self.bound.last().expect("non-empty bound")
    }
}

/// Runs `config.repetitions` independent runs; repetition `r` uses seed
/// `base_seed + r`. Repetitions run in parallel and are aggregated in index order.
pub fn run_repeated(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.repetitions).map(|r| config.repetition_seed(r)).collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| run_seeded(config, seed, false))
        .collect::<Result<Vec<_>>>()?;
    let regret: Vec<&[f64]> = runs.iter().map(|r| r.regret.as_slice()).collect();
    let losses: Vec<&[f64]> = runs.iter().map(|r| r.cumulative_loss.as_slice()).collect();
    let ledger = LedgerSummary {
        budget: config.budget(),
        rounds: runs.iter().map(|r| r.ledger.rounds).sum(),
        min_per_round: runs.iter().map(|r| r.ledger.min_per_round).min().unwrap_or(0),
        max_per_round: runs.iter().map(|r| r.ledger.max_per_round).max().unwrap_or(0),
        total_queries: runs.iter().map(|r| r.ledger.total_queries).sum(),
    };
    if ledger.max_per_round != config.budget() || ledger.min_per_round != config.budget() {
        return Err(Error::Invariant(format!(
            "per-round query counts in [{}, {}], budget {}",
            ledger.min_per_round,
            ledger.max_per_round,
            config.budget()
        )));
    }
    Ok(ExperimentResult {
        config: config.clone(),
        cumulative_loss: CurveStats::from_runs(&losses),
        regret: CurveStats::from_runs(&regret),
        bound: bound_curve(config.n, config.budget(), config.t),
        best_experts: runs.iter().map(|r| r.best_expert).collect(),
        ledger,
        seeds,
    })
}

/// One result per budget in `m_values`. Environment seeds depend only on the
/// repetition, so every budget sees the same loss realizations.
pub fn sweep_m(config: &ExperimentConfig, m_values: &[usize]) -> Result<Vec<ExperimentResult>> {
    if m_values.is_empty() {
        return Err(Error::invalid("no M values to sweep"));
    }
    for &m in m_values {
        check_budget(m, config.n)?;
    }
    m_values
        .iter()
        .map(|&m| run_repeated(&ExperimentConfig { m, ..config.clone() }))
        .collect()
}
