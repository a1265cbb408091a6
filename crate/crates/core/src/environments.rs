//! Loss-generating environments and the per-round query ledger.
//!
//! Every environment is oblivious: the loss of expert `h` in round `i` is a
//! fixed function of the construction parameters (and seed), so query order
//! and repetition never change what is returned. Rounds are numbered from 1.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Error, Result};

/// Source of per-round expert losses in `[0, 1]`.
pub trait LossOracle {
    fn n_experts(&self) -> usize;

    /// Last round with defined losses, if the environment is finite.
    fn horizon(&self) -> Option<usize>;

    fn loss(&self, round: usize, expert: usize) -> Result<f64>;

    /// Losses of every expert in `round`. Harness-side only; a learner never sees this.
    fn loss_row(&self, round: usize) -> Result<Vec<f64>> {
        (0..self.n_experts()).map(|h| self.loss(round, h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    /// Explicit `T x N` table.
    Matrix { losses: Vec<Vec<f64>> },
    /// Independent Bernoulli losses with fixed means.
    Bernoulli { means: Vec<f64>, seed: u64 },
    /// Bernoulli losses whose means rotate one position every `period` rounds.
    Drifting { base_means: Vec<f64>, period: usize, seed: u64 },
    /// `K` arms as `K` experts, expert `h` always playing arm `h`.
    Bandit { arms: Box<Environment> },
}

/// Arm specification for [`bandit_adapter`].
#[derive(Debug, Clone, PartialEq)]
pub enum ArmSource {
    Means(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

pub fn matrix_environment(losses: Vec<Vec<f64>>) -> Result<Environment> {
    let n = losses.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::invalid("loss matrix must have at least one row and one column"));
    }
    for (t, row) in losses.iter().enumerate() {
        if row.len() != n {
            return Err(Error::invalid(format!("row {} has {} entries, expected {n}", t + 1, row.len())));
        }
        if let Some(h) = row.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "loss {} at row {}, column {} outside [0,1]",
                row[h],
                t + 1,
                h + 1
            )));
        }
    }
    Ok(Environment::Matrix { losses })
}

/// Bernoulli environment whose seed is drawn from `rng`.
pub fn bernoulli_environment<R: Rng + ?Sized>(means: Vec<f64>, rng: &mut R) -> Result<Environment> {
    Environment::bernoulli(means, rng.next_u64())
}

pub fn drifting_environment<R: Rng + ?Sized>(
    base_means: Vec<f64>,
    drift_period: usize,
    rng: &mut R,
) -> Result<Environment> {
    Environment::drifting(base_means, drift_period, rng.next_u64())
}

pub fn bandit_adapter<R: Rng + ?Sized>(arms: ArmSource, rng: &mut R) -> Result<Environment> {
    let inner = match arms {
        ArmSource::Means(means) => bernoulli_environment(means, rng)?,
        ArmSource::Matrix(m) => matrix_environment(m)?,
    };
    Ok(Environment::Bandit { arms: Box::new(inner) })
}

fn check_means(means: &[f64]) -> Result<()> {
    if means.is_empty() {
        return Err(Error::invalid("at least one mean is required"));
    }
    if let Some(h) = means.iter().position(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::invalid(format!("mean {} of expert {h} outside [0,1]", means[h])));
    }
    Ok(())
}

impl Environment {
    pub fn bernoulli(means: Vec<f64>, seed: u64) -> Result<Self> {
        check_means(&means)?;
        Ok(Environment::Bernoulli { means, seed })
    }

    pub fn drifting(base_means: Vec<f64>, period: usize, seed: u64) -> Result<Self> {
        check_means(&base_means)?;
        if period == 0 {
            return Err(Error::invalid("drift period must be at least 1"));
        }
        Ok(Environment::Drifting { base_means, period, seed })
    }

    pub fn bandit(arms: Environment) -> Self {
        Environment::Bandit { arms: Box::new(arms) }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Environment::Matrix { .. } => "matrix",
            Environment::Bernoulli { .. } => "bernoulli",
            Environment::Drifting { .. } => "drifting",
            Environment::Bandit { .. } => "bandit-adapter",
        }
    }

    /// Mean loss of `expert` in `round` for the drifting environment.
    fn drifted_mean(base_means: &[f64], period: usize, round: usize, expert: usize) -> f64 {
        let n = base_means.len();
        let shift = (round - 1) / period;
        base_means[(expert + shift) % n]
    }

    fn check_query(&self, round: usize, expert: usize) -> Result<()> {
        if round == 0 {
            return Err(Error::invalid("rounds are numbered from 1"));
        }
        if let Some(t) = self.horizon() {
            if round > t {
                return Err(Error::invalid(format!("round {round} beyond horizon {t}")));
            }
        }
        if expert >= self.n_experts() {
            return Err(Error::invalid(format!("expert {expert} out of range for N={}", self.n_experts())));
        }
        Ok(())
    }
}

/// Stream for one round of a seeded environment; the `h`-th uniform drawn from
/// it belongs to expert `h`.
fn round_stream(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

fn bernoulli_draw(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if rng.random::<f64>() < mean {
        1.0
    } else {
        0.0
    }
}

impl LossOracle for Environment {
    fn n_experts(&self) -> usize {
        match self {
            Environment::Matrix { losses } => losses[0].len(),
            Environment::Bernoulli { means, .. } => means.len(),
            Environment::Drifting { base_means, .. } => base_means.len(),
            Environment::Bandit { arms } => arms.n_experts(),
        }
    }

    fn horizon(&self) -> Option<usize> {
        match self {
            Environment::Matrix { losses } => Some(losses.len()),
            Environment::Bandit { arms } => arms.horizon(),
            _ => None,
        }
    }

    fn loss(&self, round: usize, expert: usize) -> Result<f64> {
        self.check_query(round, expert)?;
        Ok(match self {
            Environment::Matrix { losses } => losses[round - 1][expert],
            Environment::Bernoulli { means, seed } => {
                let mut rng = round_stream(*seed, round);
                // each f64 consumes one u64, i.e. two 32-bit words
                rng.set_word_pos(2 * expert as u128);
                bernoulli_draw(&mut rng, means[expert])
            }
            Environment::Drifting { base_means, period, seed } => {
                let mut rng = round_stream(*seed, round);
                rng.set_word_pos(2 * expert as u128);
                bernoulli_draw(&mut rng, Self::drifted_mean(base_means, *period, round, expert))
            }
            Environment::Bandit { arms } => arms.loss(round, expert)?,
        })
    }

    fn loss_row(&self, round: usize) -> Result<Vec<f64>> {
        self.check_query(round, 0)?;
        Ok(match self {
            Environment::Matrix { losses } => losses[round - 1].clone(),
            Environment::Bernoulli { means, seed } => {
                let mut rng = round_stream(*seed, round);
                means.iter().map(|&m| bernoulli_draw(&mut rng, m)).collect()
            }
            Environment::Drifting { base_means, period, seed } => {
                let mut rng = round_stream(*seed, round);
                (0..base_means.len())
                    .map(|h| bernoulli_draw(&mut rng, Self::drifted_mean(base_means, *period, round, h)))
                    .collect()
            }
            Environment::Bandit { arms } => arms.loss_row(round)?,
        })
    }
}

/// Reads a `T x N` loss matrix: no header, comma-separated decimals, every
/// row the same width, every value a finite number in `[0, 1]`.
pub fn load_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(rows.len() + 1, |p| p.line() as usize);
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                let v: f64 = field.parse().map_err(|_| {
                    Error::invalid(format!("{}:{line}: column {}: {field:?} is not a number", path.display(), col + 1))
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "{}:{line}: column {}: loss {field} outside [0,1]",
                        path.display(),
                        col + 1
                    )));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

/// Counts the distinct experts queried in each round and refuses to exceed
/// the per-round budget.
#[derive(Debug, Clone)]
pub struct QueryLedger {
    budget: usize,
    current: Option<(usize, BTreeSet<usize>)>,
    per_round: Vec<usize>,
    total_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerSummary {
    pub budget: usize,
    pub rounds: usize,
    pub min_per_round: usize,
    pub max_per_round: usize,
    pub total_queries: usize,
}

impl QueryLedger {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            current: None,
            per_round: Vec::new(),
            total_queries: 0,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn open_round(&mut self, round: usize) -> Result<()> {
        if let Some((open, _)) = &self.current {
            return Err(Error::Invariant(format!("round {open} still open when opening {round}")));
        }
        self.current = Some((round, BTreeSet::new()));
        Ok(())
    }

    /// Answers a query through the ledger. A query that would make the round's
    /// distinct count exceed the budget is refused.
    pub fn query<O: LossOracle + ?Sized>(&mut self, oracle: &O, expert: usize) -> Result<f64> {
        let Some((round, seen)) = &mut self.current else {
            return Err(Error::Invariant("query outside an open round".into()));
        };
        if !seen.contains(&expert) && seen.len() == self.budget {
            return Err(Error::Invariant(format!(
                "round {round}: query for expert {expert} exceeds budget of {} experts",
                self.budget
            )));
        }
        let value = oracle.loss(*round, expert)?;
        seen.insert(expert);
        self.total_queries += 1;
        Ok(value)
    }

    /// Closes the round; the distinct count must equal the budget exactly.
    pub fn close_round(&mut self) -> Result<usize> {
        let Some((round, seen)) = self.current.take() else {
            return Err(Error::Invariant("no open round to close".into()));
        };
        if seen.len() != self.budget {
            return Err(Error::Invariant(format!(
                "round {round}: {} distinct experts queried, budget is {}",
                seen.len(),
                self.budget
            )));
        }
        self.per_round.push(seen.len());
        Ok(seen.len())
    }

    pub fn per_round(&self) -> &[usize] {
        &self.per_round
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            budget: self.budget,
            rounds: self.per_round.len(),
            min_per_round: self.per_round.iter().copied().min().unwrap_or(0),
            max_per_round: self.per_round.iter().copied().max().unwrap_or(0),
            total_queries: self.total_queries,
        }
    }
}
