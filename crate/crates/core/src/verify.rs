//! Brute-force oracles for the sampling scheme and the estimator.
//!
//! Every check here enumerates all `(primary, extra subset)` outcomes of one
//! round, `N * C(N - 1, M - 1)` of them, each with probability
//! `q(primary) / C(N - 1, M - 1)`. Nothing goes through the sampler, so the
//! results are independent of [`crate::sample_experts`].

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution as _, Exp1};
use serde::Serialize;

use crate::primitives::check_budget;
use crate::{
    importance_weighted_estimate, inclusion_probability, sample_experts, Error, LossValue, Rational,
    Result, SamplingDistribution, Scalar,
};

/// Largest `N` the enumeration oracles accept.
pub const MAX_ENUMERATION_N: usize = 10;

/// Inclusion probability used as the estimator's denominator; swappable so
/// the checks can be pointed at a deliberately wrong formula.
pub type InclusionFn<S> = fn(&SamplingDistribution<S>, usize, usize) -> Result<S>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorMoments<S> {
    pub mean: Vec<S>,
    pub second_moment: Vec<S>,
    pub variance: Vec<S>,
    /// `E[sum_h q(h) L_h^2]`.
    pub weighted_second_moment: S,
    /// `max_h |E[L_h] - loss_h|`.
    pub max_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnumerationReport<S> {
    /// Exact `P(h observed)` from enumeration.
    pub inclusion: Vec<S>,
    pub inclusion_closed_form: Vec<S>,
    pub max_inclusion_deviation: f64,
    pub moments: Option<EstimatorMoments<S>>,
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Calls `visit(weight, primary, observed)` for every outcome of one round.
fn for_each_outcome<S: Scalar>(
    q: &SamplingDistribution<S>,
    m: usize,
    mut visit: impl FnMut(&S, &[usize]) -> Result<()>,
) -> Result<()> {
    let n = q.len();
    if n > MAX_ENUMERATION_N {
        return Err(Error::Infeasible(format!(
            "enumeration over N={n} experts exceeds the limit of {MAX_ENUMERATION_N}"
        )));
    }
    check_budget(m, n)?;
    let subsets = S::from_count(binomial(n - 1, m - 1));
    for (primary, qp) in q.probs().iter().enumerate() {
        let weight = qp.clone() / subsets.clone();
        let others = (0..n).filter(|&h| h != primary);
        for extras in others.combinations(m - 1) {
            let mut observed = extras;
            observed.push(primary);
            visit(&weight, &observed)?;
        }
    }
    Ok(())
}

fn exact_inclusion<S: Scalar>(q: &SamplingDistribution<S>, m: usize) -> Result<Vec<S>> {
    let mut incl = vec![S::zero(); q.len()];
    for_each_outcome(q, m, |w, observed| {
        for &h in observed {
            incl[h] = incl[h].clone() + w.clone();
        }
        Ok(())
    })?;
    Ok(incl)
}

fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.clone() - y.clone()).as_f64().abs())
        .fold(0.0, f64::max)
}

pub fn enumerate_inclusion<S: Scalar>(q: &SamplingDistribution<S>, m: usize) -> Result<EnumerationReport<S>> {
    enumerate_inclusion_with(q, m, inclusion_probability)
}

pub fn enumerate_inclusion_with<S: Scalar>(
    q: &SamplingDistribution<S>,
    m: usize,
    closed_form: InclusionFn<S>,
) -> Result<EnumerationReport<S>> {
    let inclusion = exact_inclusion(q, m)?;
    let inclusion_closed_form = (0..q.len()).map(|h| closed_form(q, h, m)).collect::<Result<Vec<S>>>()?;
    Ok(EnumerationReport {
        max_inclusion_deviation: max_abs_diff(&inclusion, &inclusion_closed_form),
        inclusion,
        inclusion_closed_form,
        moments: None,
    })
}

pub fn enumerate_estimator_moments<S: Scalar>(
    q: &SamplingDistribution<S>,
    losses: &[LossValue<S>],
    m: usize,
) -> Result<EnumerationReport<S>> {
    enumerate_estimator_moments_with(q, losses, m, inclusion_probability)
}

/// Exact moments of the importance-weighted estimates, with `weight` giving
/// the denominator for each observed expert.
pub fn enumerate_estimator_moments_with<S: Scalar>(
    q: &SamplingDistribution<S>,
    losses: &[LossValue<S>],
    m: usize,
    weight: InclusionFn<S>,
) -> Result<EnumerationReport<S>> {
    let n = q.len();
    if losses.len() != n {
        return Err(Error::invalid(format!("{} losses for {n} experts", losses.len())));
    }
    let mut report = enumerate_inclusion_with(q, m, weight)?;
    let denom = &report.inclusion_closed_form;
    let mut mean = vec![S::zero(); n];
    let mut second = vec![S::zero(); n];
    let mut weighted = S::zero();
    for_each_outcome(q, m, |w, observed| {
        for &h in observed {
            let est = importance_weighted_estimate(&losses[h], denom[h].clone(), true)?;
            let sq = est.clone() * est.clone();
            mean[h] = mean[h].clone() + w.clone() * est;
            second[h] = second[h].clone() + w.clone() * sq.clone();
            weighted = weighted.clone() + w.clone() * q.probs()[h].clone() * sq;
        }
        Ok(())
    })?;
    let truth: Vec<S> = losses.iter().map(|l| l.value().clone()).collect();
    let variance = second
        .iter()
        .zip(&mean)
        .map(|(s, mu)| s.clone() - mu.clone() * mu.clone())
        .collect();
    report.moments = Some(EstimatorMoments {
        max_bias: max_abs_diff(&mean, &truth),
        mean,
        second_moment: second,
        variance,
        weighted_second_moment: weighted,
    });
    Ok(report)
}

/// `sum_h q(h) (N - 1) / (q(h) (N - M) + M - 1)`.
///
/// Experts with `q(h) = 0` contribute nothing (with `M = 1` their term would
/// read 0/0). For `N = 1` the sum is the single term's limit, 1.
pub fn lemma2_value<S: Scalar>(q: &SamplingDistribution<S>, m: usize) -> Result<S> {
    let n = q.len();
    check_budget(m, n)?;
    if n == 1 {
        return Ok(S::one());
    }
    let n1 = S::from_count(n - 1);
    let nm = S::from_count(n - m);
    let m1 = S::from_count(m - 1);
    let mut sum = S::zero();
    for p in q.probs() {
        if p.is_zero() {
            continue;
        }
        sum = sum + p.clone() * n1.clone() / (p.clone() * nm.clone() + m1.clone());
    }
    Ok(sum)
}

/// Point drawn uniformly from the probability simplex (symmetric Dirichlet(1)).
pub fn dirichlet_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

fn renormalized(mut q: Vec<f64>) -> Option<SamplingDistribution<f64>> {
    let total: f64 = q.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    q.iter_mut().for_each(|p| *p /= total);
    SamplingDistribution::new(q).ok()
}

/// Random-restart hill climbing for the largest value of [`lemma2_value`] over
/// the simplex. Each restart starts from a Dirichlet(1) point and perturbs one
/// coordinate at a time, keeping improvements, with a geometrically shrinking step.
pub fn lemma2_max_search<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    trials: usize,
    rng: &mut R,
) -> Result<(f64, SamplingDistribution<f64>)> {
    check_budget(m, n)?;
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    const STEPS: usize = 60;
    const DECAY: f64 = 0.93;
    let mut best: Option<(f64, SamplingDistribution<f64>)> = None;
    for _ in 0..trials {
        let mut q = renormalized(dirichlet_uniform(n, rng)).expect("Dirichlet draw is a distribution");
        let mut value = lemma2_value(&q, m)?;
        let mut step = 0.25;
        for _ in 0..STEPS {
            let h = rng.random_range(0..n);
            let mut cand = q.probs().to_vec();
            cand[h] = (cand[h] + step * (2.0 * rng.random::<f64>() - 1.0)).max(0.0);
            if let Some(cand) = renormalized(cand) {
                let v = lemma2_value(&cand, m)?;
                if v > value {
                    value = v;
                    q = cand;
                }
            }
            step *= DECAY;
        }
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, q));
        }
    }
    Ok(best.expect("trials >= 1"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_deviation: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: &str, max_deviation: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            max_deviation,
            threshold,
            pass: max_deviation <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Largest `N` for the enumeration checks, at most [`MAX_ENUMERATION_N`].
    pub max_n: usize,
    /// Random distributions per `(N, M)` for the enumeration checks.
    pub instances: usize,
    /// Largest `N` for the appendix inequality checks.
    pub lemma_max_n: usize,
    pub dirichlet_draws: usize,
    pub search_trials: usize,
    pub sampler_draws: usize,
    pub seed: u64,
    /// Closed form under test for the estimator's denominator.
    pub inclusion: InclusionFn<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            max_n: 8,
            instances: 20,
            lemma_max_n: 12,
            dirichlet_draws: 1000,
            search_trials: 50,
            sampler_draws: 100_000,
            seed: 0x5eed,
            inclusion: inclusion_probability,
        }
    }
}

pub const EXACT_TOL: f64 = 1e-12;
pub const LEMMA_TOL: f64 = 1e-9;
/// Allowed distance, in standard errors, between sampled and exact frequencies.
pub const SAMPLER_Z: f64 = 3.0;

fn random_losses<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<LossValue<f64>> {
    (0..n).map(|_| LossValue::new(rng.random::<f64>()).expect("uniform in [0,1)")).collect()
}

/// Small-denominator rational distribution for exact checks.
fn random_rational_q<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SamplingDistribution<Rational> {
    let weights: Vec<i64> = (0..n).map(|_| rng.random_range(1..=20)).collect();
    let total: i64 = weights.iter().sum();
    SamplingDistribution::new(weights.into_iter().map(|w| Rational::new(w.into(), total.into())).collect())
        .expect("exact rationals sum to one")
}

/// Sampled inclusion frequencies of [`sample_experts`] against the exact ones;
/// returns the largest per-expert z-score.
pub fn sampler_agreement<R: Rng + ?Sized>(
    q: &SamplingDistribution<f64>,
    m: usize,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let exact = exact_inclusion(q, m)?;
    let mut counts = vec![0usize; q.len()];
    for _ in 0..draws {
        for &h in sample_experts(q, m, rng)?.observed() {
            counts[h] += 1;
        }
    }
    let d = draws as f64;
    Ok(counts
        .iter()
        .zip(&exact)
        .map(|(&c, &p)| {
            let se = (p * (1.0 - p) / d).sqrt();
            let diff = (c as f64 / d - p).abs();
            if se == 0.0 {
                if diff == 0.0 { 0.0 } else { f64::INFINITY }
            } else {
                diff / se
            }
        })
        .fold(0.0, f64::max))
}

/// Runs every check and collects the results. Returns an error only for
/// unusable options; failed checks are reported, not raised.
pub fn run_suite(opts: &SuiteOptions) -> Result<VerifyReport> {
    if opts.max_n < 2 || opts.max_n > MAX_ENUMERATION_N {
        return Err(Error::Infeasible(format!(
            "max N for enumeration must lie in [2, {MAX_ENUMERATION_N}], got {}",
            opts.max_n
        )));
    }
    let mut rng = crate::Rng::seed_from_u64(opts.seed);
    let mut inclusion_dev = 0.0f64;
    let mut inclusion_sum_dev = 0.0f64;
    let mut bias = 0.0f64;
    let mut second_excess = 0.0f64;
    let mut variance_excess = 0.0f64;
    let mut edge_m1 = 0.0f64;
    let mut edge_mn = 0.0f64;
    let mut exact_dev = 0.0f64;

    for n in 2..=opts.max_n {
        for m in 1..=n {
            for _ in 0..opts.instances {
                let q = renormalized(dirichlet_uniform(n, &mut rng)).expect("Dirichlet draw");
                let losses = random_losses(n, &mut rng);
                let report = enumerate_estimator_moments_with(&q, &losses, m, opts.inclusion)?;
                let moments = report.moments.as_ref().expect("moments requested");
                inclusion_dev = inclusion_dev.max(report.max_inclusion_deviation);
                inclusion_sum_dev = inclusion_sum_dev.max((report.inclusion.iter().sum::<f64>() - m as f64).abs());
                bias = bias.max(moments.max_bias);
                second_excess = second_excess.max(moments.weighted_second_moment - n as f64 / m as f64);
                if m >= 2 {
                    let cap = (n - 1) as f64 / (m - 1) as f64;
                    for v in &moments.variance {
                        variance_excess = variance_excess.max(v - cap);
                    }
                }
                for h in 0..n {
                    let closed = (opts.inclusion)(&q, h, m)?;
                    if m == 1 {
                        edge_m1 = edge_m1.max((closed - q.probs()[h]).abs());
                    }
                    if m == n {
                        edge_mn = edge_mn.max((closed - 1.0).abs());
                    }
                }
            }
            if n <= 6 {
                let q = random_rational_q(n, &mut rng);
                let report = enumerate_inclusion(&q, m)?;
                exact_dev = exact_dev.max(report.max_inclusion_deviation);
            }
        }
    }

    let mut lemma_excess = 0.0f64;
    let mut uniform_dev = 0.0f64;
    let mut search_excess = 0.0f64;
    for n in 2..=opts.lemma_max_n {
        for m in 1..=n {
            let cap = n as f64 / m as f64;
            for _ in 0..opts.dirichlet_draws {
                let q = renormalized(dirichlet_uniform(n, &mut rng)).expect("Dirichlet draw");
                lemma_excess = lemma_excess.max(lemma2_value(&q, m)? - cap);
            }
            let uniform = SamplingDistribution::<f64>::uniform(n)?;
            uniform_dev = uniform_dev.max((lemma2_value(&uniform, m)? - cap).abs());
            let (found, _) = lemma2_max_search(n, m, opts.search_trials, &mut rng)?;
            search_excess = search_excess.max(found - cap);
        }
    }

    let sampler_q = SamplingDistribution::new(vec![0.4, 0.25, 0.15, 0.12, 0.08])?;
    let z = sampler_agreement(&sampler_q, 3, opts.sampler_draws, &mut rng)?;

    let checks = vec![
        CheckResult::new("inclusion_probability_exact", inclusion_dev, EXACT_TOL),
        CheckResult::new("inclusion_sum_equals_m", inclusion_sum_dev, EXACT_TOL),
        CheckResult::new("inclusion_exact_rational", exact_dev, 0.0),
        CheckResult::new("edge_m_equals_1", edge_m1, 0.0),
        CheckResult::new("edge_m_equals_n", edge_mn, 0.0),
        CheckResult::new("estimator_unbiased", bias, EXACT_TOL),
        CheckResult::new("weighted_second_moment_bound", second_excess.max(0.0), EXACT_TOL),
        CheckResult::new("variance_bound", variance_excess.max(0.0), EXACT_TOL),
        CheckResult::new("lemma2_random_simplex", lemma_excess.max(0.0), LEMMA_TOL),
        CheckResult::new("lemma2_uniform_attains_bound", uniform_dev, EXACT_TOL),
        CheckResult::new("lemma2_max_search", search_excess.max(0.0), LEMMA_TOL),
        CheckResult::new("sampler_agreement", z, SAMPLER_Z),
    ];
    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.pass),
        checks,
    })
}

/// Variant of the closed form with the wrong extra-sampling ratio `M / N`;
/// used as a negative control for the suite.
pub fn corrupted_inclusion_probability(q: &SamplingDistribution<f64>, h: usize, m: usize) -> Result<f64> {
    let n = q.len();
    check_budget(m, n)?;
    let qh = *q.prob(h)?;
    Ok(qh + (1.0 - qh) * m as f64 / n as f64)
}

impl<S: Scalar> EnumerationReport<S> {
    pub fn inclusion_sum(&self) -> S {
        self.inclusion.iter().fold(S::zero(), |a, b| a + b.clone())
    }
}
