//! Round-structured learners and the best-expert oracle.
//!
//! Learners follow a two-phase protocol: [`AdvicePolicy::begin_round`] returns
//! the experts whose losses must be fetched, and [`AdvicePolicy::feed_losses`]
//! accepts losses for exactly those experts. Nothing else reaches the learner.

use std::collections::BTreeMap;

use num_traits::Float;
use rand::Rng;
use serde::Serialize;

use crate::primitives::{check_budget, draw_primary};
use crate::{
    compute_distribution, importance_weighted_estimate, inclusion_probability, learning_rate,
    sample_experts, CumulativeEstimates, Error, LossValue, Result, SampleSet, SamplingDistribution,
    Scalar,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LearnerConfig {
    pub n: usize,
    pub m: usize,
    /// Fixed learning rate for tests; `None` uses the anytime schedule.
    pub eta_override: Option<f64>,
}

impl LearnerConfig {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        check_budget(m, n)?;
        Ok(Self {
            n,
            m,
            eta_override: None,
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || eta.is_infinite() {
            return Err(Error::invalid(format!("eta override {eta} must be finite and non-negative")));
        }
        self.eta_override = Some(eta);
        Ok(self)
    }

    fn eta<F: Float>(&self, round: usize, m: usize) -> Result<F> {
        match self.eta_override {
            Some(eta) => Ok(F::from(eta).expect("finite eta")),
            None => learning_rate(round, self.n, m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    AwaitingSample,
    AwaitingLosses,
}

/// Losses reported for the observed experts of one round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservedLosses<F>(BTreeMap<usize, LossValue<F>>);

impl<F: Scalar> ObservedLosses<F> {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    /// Validates every loss against `[0, 1]`.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, F)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (h, v) in pairs {
            if map.insert(h, LossValue::new(v)?).is_some() {
                return Err(Error::Protocol(format!("loss for expert {h} reported twice")));
            }
        }
        Ok(Self(map))
    }

    pub fn insert(&mut self, h: usize, loss: LossValue<F>) {
        self.0.insert(h, loss);
    }

    pub fn get(&self, h: usize) -> Option<&LossValue<F>> {
        self.0.get(&h)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LossValue<F>)> {
        self.0.iter().map(|(h, l)| (*h, l))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_keys(&self, sample: &SampleSet) -> Result<()> {
        if self.0.keys().copied().eq(sample.observed().iter().copied()) {
            return Ok(());
        }
        let missing: Vec<_> = sample.observed().iter().filter(|h| !self.0.contains_key(h)).collect();
        let extra: Vec<_> = self.0.keys().filter(|h| !sample.contains(**h)).collect();
        Err(Error::Protocol(format!(
            "losses must cover exactly the observed experts (missing {missing:?}, unexpected {extra:?})"
        )))
    }
}

/// Everything that happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace<F> {
    pub round: usize,
    pub eta: F,
    pub sample: SampleSet,
    pub distribution: SamplingDistribution<F>,
    pub observed_losses: BTreeMap<usize, F>,
    pub algorithm_loss: F,
    pub estimates_delta: Vec<F>,
}

/// A learner driven through the two-phase round protocol.
pub trait AdvicePolicy<F> {
    fn n_experts(&self) -> usize;

    /// Number of expert losses fetched per round.
    fn budget(&self) -> usize;

    fn begin_round<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<SampleSet>;

    fn feed_losses(&mut self, losses: &ObservedLosses<F>) -> Result<RoundTrace<F>>;
}

#[derive(Debug, Clone)]
struct PendingRound<F> {
    eta: F,
    sample: SampleSet,
    q: SamplingDistribution<F>,
}

/// Exponential weights over importance-weighted estimates, observing `M` of
/// `N` experts per round.
#[derive(Debug, Clone)]
pub struct AdviceEfficientLearner<F> {
    config: LearnerConfig,
    estimates: CumulativeEstimates<F>,
    round: usize,
    pending: Option<PendingRound<F>>,
}

impl<F: Float + Scalar> AdviceEfficientLearner<F> {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        check_budget(config.m, config.n)?;
        Ok(Self {
            estimates: CumulativeEstimates::zeros(config.n),
            config,
            round: 1,
            pending: None,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn estimates(&self) -> &CumulativeEstimates<F> {
        &self.estimates
    }

    /// Index of the round in progress or about to start, from 1.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn phase(&self) -> Phase {
        if self.pending.is_some() {
            Phase::AwaitingLosses
        } else {
            Phase::AwaitingSample
        }
    }

    /// Distribution the next (or current) round samples from.
    pub fn distribution(&self) -> Result<SamplingDistribution<F>> {
        match &self.pending {
            Some(p) => Ok(p.q.clone()),
            None => compute_distribution(&self.estimates, self.config.eta(self.round, self.config.m)?),
        }
    }
}

impl<F: Float + Scalar> AdvicePolicy<F> for AdviceEfficientLearner<F> {
    fn n_experts(&self) -> usize {
        self.config.n
    }

    fn budget(&self) -> usize {
        self.config.m
    }

    fn begin_round<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<SampleSet> {
        if self.pending.is_some() {
            return Err(Error::Protocol(format!(
                "round {} already begun; feed its losses first",
                self.round
            )));
        }
        let eta = self.config.eta(self.round, self.config.m)?;
        let q = compute_distribution(&self.estimates, eta)?;
        let sample = sample_experts(&q, self.config.m, rng)?;
        self.pending = Some(PendingRound {
            eta,
            sample: sample.clone(),
            q,
        });
        Ok(sample)
    }

    fn feed_losses(&mut self, losses: &ObservedLosses<F>) -> Result<RoundTrace<F>> {
        let Some(pending) = &self.pending else {
            return Err(Error::Protocol(format!("round {} has not begun", self.round)));
        };
        losses.check_keys(&pending.sample)?;
        let mut delta = vec![F::zero(); self.config.n];
        for (h, loss) in losses.iter() {
            let p = inclusion_probability(&pending.q, h, self.config.m)?;
            delta[h] = importance_weighted_estimate(loss, p, true)?;
        }
        self.estimates.accumulate(&delta)?;
        let pending = self.pending.take().expect("checked above");
        let trace = build_trace(self.round, pending, losses, delta);
        self.round += 1;
        Ok(trace)
    }
}

/// Full-information exponential weights: observes every expert and adds true
/// losses with the `M = N` schedule `sqrt(ln N / i)`.
#[derive(Debug, Clone)]
pub struct FullInfoHedge<F> {
    config: LearnerConfig,
    totals: CumulativeEstimates<F>,
    round: usize,
    pending: Option<PendingRound<F>>,
}

impl<F: Float + Scalar> FullInfoHedge<F> {
    pub fn new(n: usize) -> Result<Self> {
        Self::with_config(LearnerConfig::new(n, n)?)
    }

    /// Uses `config.n` and `config.eta_override`; `config.m` is ignored.
    pub fn with_config(config: LearnerConfig) -> Result<Self> {
        let config = LearnerConfig { m: config.n, ..config };
        check_budget(config.m, config.n)?;
        Ok(Self {
            totals: CumulativeEstimates::zeros(config.n),
            config,
            round: 1,
            pending: None,
        })
    }

    pub fn cumulative_losses(&self) -> &CumulativeEstimates<F> {
        &self.totals
    }

    pub fn round(&self) -> usize {
        self.round
    }
}

impl<F: Float + Scalar> AdvicePolicy<F> for FullInfoHedge<F> {
    fn n_experts(&self) -> usize {
        self.config.n
    }

    fn budget(&self) -> usize {
        self.config.n
    }

    fn begin_round<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<SampleSet> {
        if self.pending.is_some() {
            return Err(Error::Protocol(format!(
                "round {} already begun; feed its losses first",
                self.round
            )));
        }
        let eta = self.config.eta(self.round, self.config.n)?;
        let q = compute_distribution(&self.totals, eta)?;
        let primary = draw_primary(&q, rng)?;
        let sample = SampleSet::new(primary, (0..self.config.n).collect(), self.config.n)?;
        self.pending = Some(PendingRound {
            eta,
            sample: sample.clone(),
            q,
        });
        Ok(sample)
    }

    fn feed_losses(&mut self, losses: &ObservedLosses<F>) -> Result<RoundTrace<F>> {
        let Some(pending) = &self.pending else {
            return Err(Error::Protocol(format!("round {} has not begun", self.round)));
        };
        losses.check_keys(&pending.sample)?;
        let delta: Vec<F> = losses.iter().map(|(_, l)| *l.value()).collect();
        self.totals.accumulate(&delta)?;
        let pending = self.pending.take().expect("checked above");
        let trace = build_trace(self.round, pending, losses, delta);
        self.round += 1;
        Ok(trace)
    }
}

fn build_trace<F: Scalar>(
    round: usize,
    pending: PendingRound<F>,
    losses: &ObservedLosses<F>,
    estimates_delta: Vec<F>,
) -> RoundTrace<F> {
    let observed_losses: BTreeMap<usize, F> =
        losses.iter().map(|(h, l)| (h, l.value().clone())).collect();
    let algorithm_loss = observed_losses[&pending.sample.primary()].clone();
    RoundTrace {
        round,
        eta: pending.eta,
        sample: pending.sample,
        distribution: pending.q,
        observed_losses,
        algorithm_loss,
        estimates_delta,
    }
}

/// Expert with the smallest total loss over the rows of `true_losses` (one row
/// per round), with ties broken toward the smallest index.
pub fn best_expert_in_hindsight<S: Scalar>(true_losses: &[Vec<S>]) -> Result<(usize, S)> {
    let n = true_losses.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::invalid("empty loss matrix"));
    }
    let mut sums = vec![S::zero(); n];
    for (t, row) in true_losses.iter().enumerate() {
        if row.len() != n {
            return Err(Error::invalid(format!("row {t} has {} entries, expected {n}", row.len())));
        }
        for (s, v) in sums.iter_mut().zip(row) {
            LossValue::new(v.clone())?;
            *s = s.clone() + v.clone();
        }
    }
    let mut best = 0;
    for h in 1..n {
        if sums[h] < sums[best] {
            best = h;
        }
    }
    Ok((best, sums.swap_remove(best)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> crate::Rng {
        crate::Rng::seed_from_u64(seed)
    }

    fn feed_from_row<P: AdvicePolicy<f64>>(p: &mut P, sample: &SampleSet, row: &[f64]) -> RoundTrace<f64> {
        let losses = ObservedLosses::from_pairs(sample.observed().iter().map(|&h| (h, row[h]))).unwrap();
        p.feed_losses(&losses).unwrap()
    }

    #[test]
    fn first_round_is_uniform() {
        for (n, m) in [(1, 1), (4, 2), (7, 7), (9, 1)] {
            let mut l = crate::Learner::new(LearnerConfig::new(n, m).unwrap()).unwrap();
            l.begin_round(&mut rng(0)).unwrap();
            let q = l.distribution().unwrap();
            assert!(q.probs().iter().all(|&p| (p - 1.0 / n as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn single_expert_always_sampled() {
        let mut l = crate::Learner::new(LearnerConfig::new(1, 1).unwrap()).unwrap();
        let mut r = rng(1);
        for _ in 0..20 {
            let s = l.begin_round(&mut r).unwrap();
            assert_eq!((s.primary(), s.observed()), (0, &[0usize][..]));
            feed_from_row(&mut l, &s, &[0.4]);
        }
    }

    #[test]
    fn full_observation_sees_everyone() {
        let mut l = crate::Learner::new(LearnerConfig::new(3, 3).unwrap()).unwrap();
        let mut r = rng(2);
        for _ in 0..20 {
            let s = l.begin_round(&mut r).unwrap();
            assert_eq!(s.observed(), &[0, 1, 2]);
            let t = feed_from_row(&mut l, &s, &[0.1, 0.5, 0.9]);
            assert_eq!(t.estimates_delta, vec![0.1, 0.5, 0.9]);
        }
    }

    #[test]
    fn begin_twice_is_protocol_violation() {
        let mut l = crate::Learner::new(LearnerConfig::new(3, 2).unwrap()).unwrap();
        let mut r = rng(3);
        l.begin_round(&mut r).unwrap();
        assert!(matches!(l.begin_round(&mut r), Err(Error::Protocol(_))));
        assert!(matches!(
            crate::Learner::new(LearnerConfig::new(3, 2).unwrap())
                .unwrap()
                .feed_losses(&ObservedLosses::new()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn wrong_keys_rejected_and_round_kept_open() {
        let mut l = crate::Learner::new(LearnerConfig::new(4, 2).unwrap()).unwrap();
        let s = l.begin_round(&mut rng(4)).unwrap();
        let missing = ObservedLosses::from_pairs([(s.primary(), 0.5)]).unwrap();
        assert!(matches!(l.feed_losses(&missing), Err(Error::Protocol(_))));
        let mut extra: Vec<(usize, f64)> = s.observed().iter().map(|&h| (h, 0.5)).collect();
        let outsider = (0..4).find(|h| !s.contains(*h)).unwrap();
        extra.push((outsider, 0.5));
        let extra = ObservedLosses::from_pairs(extra).unwrap();
        assert!(matches!(l.feed_losses(&extra), Err(Error::Protocol(_))));
        assert_eq!(l.phase(), Phase::AwaitingLosses);
        feed_from_row(&mut l, &s, &[0.5; 4]);
        assert_eq!(l.phase(), Phase::AwaitingSample);
        assert_eq!(l.round(), 2);
    }

    #[test]
    fn out_of_range_loss_rejected() {
        assert!(matches!(
            ObservedLosses::from_pairs([(0, 1.2)]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn two_expert_single_query_estimate() {
        let mut l = crate::Learner::new(LearnerConfig::new(2, 1).unwrap()).unwrap();
        let s = l.begin_round(&mut rng(5)).unwrap();
        let mut row = [0.0; 2];
        row[s.primary()] = 0.5;
        let t = feed_from_row(&mut l, &s, &row);
        let mut expect = vec![0.0; 2];
        expect[s.primary()] = 1.0;
        assert_eq!(t.estimates_delta, expect);
        assert_eq!(t.algorithm_loss, 0.5);
    }

    #[test]
    fn zero_losses_still_advance() {
        let mut l = crate::Learner::new(LearnerConfig::new(5, 2).unwrap()).unwrap();
        let mut r = rng(6);
        for i in 1..=3 {
            let s = l.begin_round(&mut r).unwrap();
            feed_from_row(&mut l, &s, &[0.0; 5]);
            assert_eq!(l.round(), i + 1);
            assert_eq!(l.estimates().totals(), &[0.0; 5]);
        }
    }

    #[test]
    fn eta_override_matches_hand_trajectory() {
        // M = N, fixed eta = ln 2: after one round with losses (0, 1) the
        // weights are (1, 1/2).
        let cfg = LearnerConfig::new(2, 2).unwrap().with_eta(std::f64::consts::LN_2).unwrap();
        let mut l = crate::Learner::new(cfg).unwrap();
        let s = l.begin_round(&mut rng(7)).unwrap();
        feed_from_row(&mut l, &s, &[0.0, 1.0]);
        let q = l.distribution().unwrap();
        assert!((q.probs()[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn trace_invariants_and_budget() {
        let mut l = crate::Learner::new(LearnerConfig::new(10, 3).unwrap()).unwrap();
        let mut r = rng(8);
        let mut prev = vec![0.0; 10];
        for i in 0..300 {
            let s = l.begin_round(&mut r).unwrap();
            assert_eq!(s.len(), 3);
            let row: Vec<f64> = (0..10).map(|h| ((h * 7 + i * 3) % 11) as f64 / 10.0).collect();
            let t = feed_from_row(&mut l, &s, &row);
            assert_eq!(t.algorithm_loss, t.observed_losses[&s.primary()]);
            for (h, (&d, &p)) in t.estimates_delta.iter().zip(&prev).enumerate() {
                assert!(d >= 0.0);
                if !s.contains(h) {
                    assert_eq!(d, 0.0);
                }
                assert!(l.estimates().totals()[h] >= p);
            }
            prev = l.estimates().totals().to_vec();
        }
    }

    #[test]
    fn f32_learner_runs() {
        let mut l = crate::Learner32::new(LearnerConfig::new(6, 2).unwrap()).unwrap();
        let mut r = rng(9);
        for _ in 0..100 {
            let s = l.begin_round(&mut r).unwrap();
            let losses = ObservedLosses::from_pairs(
                s.observed().iter().map(|&h| (h, if h == 0 { 0.0f32 } else { 1.0 })),
            )
            .unwrap();
            l.feed_losses(&losses).unwrap();
        }
        assert_eq!(l.distribution().unwrap().argmax(), 0);
    }

    #[test]
    fn same_seed_same_traces() {
        let run = || {
            let mut l = crate::Learner::new(LearnerConfig::new(8, 3).unwrap()).unwrap();
            let mut r = rng(10);
            (0..50)
                .map(|i| {
                    let s = l.begin_round(&mut r).unwrap();
                    let row: Vec<f64> = (0..8).map(|h| ((h + i) % 3) as f64 / 2.0).collect();
                    feed_from_row(&mut l, &s, &row)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hedge_matches_full_observation_learner() {
        let mut a = crate::Learner::new(LearnerConfig::new(5, 5).unwrap()).unwrap();
        let mut b = crate::Hedge::new(5).unwrap();
        let (mut ra, mut rb) = (rng(11), rng(11));
        for i in 0..100 {
            let row: Vec<f64> = (0..5).map(|h| ((h * 3 + i) % 7) as f64 / 6.0).collect();
            let sa = a.begin_round(&mut ra).unwrap();
            let sb = b.begin_round(&mut rb).unwrap();
            assert_eq!(sa, sb);
            let ta = feed_from_row(&mut a, &sa, &row);
            let tb = feed_from_row(&mut b, &sb, &row);
            assert_eq!(ta.distribution, tb.distribution);
        }
    }

    #[test]
    fn best_expert_cases() {
        assert_eq!(best_expert_in_hindsight(&[vec![0.3], vec![0.4]]).unwrap(), (0, 0.7));
        let m = vec![vec![1.0, 0.2, 0.2], vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0], vec![1.0, 0.0, 0.0]];
        let (h, s) = best_expert_in_hindsight(&m).unwrap();
        assert_eq!(h, 1);
        assert!((s - 3.2).abs() < 1e-12);
        assert!(best_expert_in_hindsight::<f64>(&[]).is_err());
        assert!(best_expert_in_hindsight(&[vec![0.1], vec![]]).is_err());
        assert!(best_expert_in_hindsight(&[vec![1.1]]).is_err());
    }

    #[test]
    fn best_expert_matches_scan() {
        use rand::Rng as _;
        let mut r = rng(12);
        let m: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| r.random::<f64>()).collect()).collect();
        let sums: Vec<f64> = (0..8).map(|h| m.iter().map(|row| row[h]).sum()).collect();
        let (h, s) = best_expert_in_hindsight(&m).unwrap();
        let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(h, sums.iter().position(|&x| x == min).unwrap());
        assert_eq!(s, min);
    }
}
