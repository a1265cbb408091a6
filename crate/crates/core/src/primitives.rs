//! Exponential weights, the two-stage expert sampler, inclusion probabilities
//! and importance-weighted loss estimates.

use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::{Error, Result, Scalar};

/// Probability vector over experts.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SamplingDistribution<S> {
    probs: Vec<S>,
}

impl<S: Scalar> SamplingDistribution<S> {
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("distribution over zero experts"));
        }
        let mut sum = 0.0;
        for (h, p) in probs.iter().enumerate() {
            let v = p.as_f64();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("probability {v} of expert {h} outside [0,1]")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > S::normalization_tolerance() {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("distribution over zero experts"));
        }
        let p = S::one() / S::from_count(n);
        Ok(Self { probs: vec![p; n] })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn prob(&self, h: usize) -> Result<&S> {
        self.probs
            .get(h)
            .ok_or_else(|| Error::invalid(format!("expert {h} out of range for N={}", self.len())))
    }

    /// Most likely expert; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (h, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = h;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<S> {
        self.probs
    }
}

/// Running sums of importance-weighted loss estimates, one per expert.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulativeEstimates<S> {
    totals: Vec<S>,
    round_index: usize,
}

impl<S: Scalar> CumulativeEstimates<S> {
    pub fn zeros(n: usize) -> Self {
        Self {
            totals: vec![S::zero(); n],
            round_index: 0,
        }
    }

    pub fn from_totals(totals: Vec<S>, round_index: usize) -> Result<Self> {
        if let Some(h) = totals.iter().position(|t| !(*t >= S::zero())) {
            return Err(Error::invalid(format!("negative or NaN estimate for expert {h}")));
        }
        Ok(Self { totals, round_index })
    }

    pub fn totals(&self) -> &[S] {
        &self.totals
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    /// Number of completed rounds folded into the totals.
    pub fn round_index(&self) -> usize {
        self.round_index
    }

    /// Adds `deltas` entrywise and closes the round. Deltas must be non-negative.
    pub fn accumulate(&mut self, deltas: &[S]) -> Result<()> {
        if deltas.len() != self.totals.len() {
            return Err(Error::invalid(format!(
                "{} deltas for {} experts",
                deltas.len(),
                self.totals.len()
            )));
        }
        if let Some(h) = deltas.iter().position(|d| !(*d >= S::zero())) {
            return Err(Error::InvalidState(format!("negative estimate for expert {h}")));
        }
        for (t, d) in self.totals.iter_mut().zip(deltas) {
            *t = t.clone() + d.clone();
        }
        self.round_index += 1;
        Ok(())
    }
}

/// The expert played this round plus every expert whose advice is fetched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleSet {
    primary: usize,
    observed: Vec<usize>,
}

impl SampleSet {
    /// Builds a sample over `n` experts. `observed` is stored sorted.
    pub fn new(primary: usize, mut observed: Vec<usize>, n: usize) -> Result<Self> {
        observed.sort_unstable();
        if observed.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("observed experts are not distinct"));
        }
        if observed.last().is_some_and(|&h| h >= n) {
            return Err(Error::invalid(format!("observed expert out of range for N={n}")));
        }
        if observed.binary_search(&primary).is_err() {
            return Err(Error::invalid(format!("primary expert {primary} not observed")));
        }
        Ok(Self { primary, observed })
    }

    pub fn primary(&self) -> usize {
        self.primary
    }

    /// Observed experts in ascending order.
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn contains(&self, h: usize) -> bool {
        self.observed.binary_search(&h).is_ok()
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }
}

/// A loss in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct LossValue<S>(S);

impl<S: Scalar> LossValue<S> {
    pub fn new(value: S) -> Result<Self> {
        if value >= S::zero() && value <= S::one() {
            Ok(Self(value))
        } else {
            Err(Error::invalid(format!("loss {value:?} outside [0,1]")))
        }
    }

    pub fn value(&self) -> &S {
        &self.0
    }

    pub fn into_inner(self) -> S {
        self.0
    }
}

impl LossValue<f64> {
    pub fn get(&self) -> f64 {
        self.0
    }
}

/// Exponential-weights distribution `q(h) ∝ exp(-eta * totals(h))`.
///
/// The minimum total is subtracted before exponentiating, so the largest weight
/// is exactly one and the normalizer never underflows.
pub fn compute_distribution<F: Float + Scalar>(
    estimates: &CumulativeEstimates<F>,
    eta: F,
) -> Result<SamplingDistribution<F>> {
    if estimates.is_empty() {
        return Err(Error::invalid("empty estimates vector"));
    }
    if !(eta >= F::zero()) || eta.is_infinite() {
        return Err(Error::invalid(format!("learning rate {eta:?} must be finite and non-negative")));
    }
    let n = estimates.len();
    if eta == F::zero() {
        return SamplingDistribution::uniform(n);
    }
    let totals = estimates.totals();
    let min = totals.iter().copied().fold(F::infinity(), F::min);
    let weights: Vec<F> = totals.iter().map(|&t| (-eta * (t - min)).exp()).collect();
    let norm = weights.iter().copied().fold(F::zero(), |a, b| a + b);
    SamplingDistribution::new(weights.into_iter().map(|w| w / norm).collect())
}

/// Anytime rate `sqrt(M ln N / (round N))`.
pub fn learning_rate<F: Float>(round: usize, n: usize, m: usize) -> Result<F> {
    if round == 0 {
        return Err(Error::invalid("rounds are numbered from 1"));
    }
    check_budget(m, n)?;
    let cast = |x: usize| F::from(x).expect("integer representable as float");
    let (n, m, round) = (cast(n), cast(m), cast(round));
    Ok((m * n.ln() / (round * n)).sqrt())
}

/// Probability that expert `h` lands in the observed set when `m` experts are
/// observed: `q(h) + (1 - q(h)) (M - 1) / (N - 1)`.
///
/// `M = N` and `N = 1` return exactly one, `M = 1` returns `q(h)` exactly.
pub fn inclusion_probability<S: Scalar>(q: &SamplingDistribution<S>, h: usize, m: usize) -> Result<S> {
    let n = q.len();
    check_budget(m, n)?;
    let qh = q.prob(h)?.clone();
    if m == n {
        return Ok(S::one());
    }
    if m == 1 {
        return Ok(qh);
    }
    let extra = S::from_count(m - 1) / S::from_count(n - 1);
    Ok(qh.clone() + (S::one() - qh) * extra)
}

/// `loss / p_incl` for an observed expert, zero otherwise.
pub fn importance_weighted_estimate<S: Scalar>(
    loss: &LossValue<S>,
    p_incl: S,
    in_sample: bool,
) -> Result<S> {
    if !in_sample {
        return Ok(S::zero());
    }
    if !(p_incl > S::zero()) {
        return Err(Error::InvalidState(format!(
            "observed expert has inclusion probability {p_incl:?}"
        )));
    }
    Ok(loss.value().clone() / p_incl)
}

/// Draws the played expert from `q`, then `m - 1` more uniformly without
/// replacement from the rest via a partial Fisher-Yates shuffle.
///
/// With `m = N` the observed set is every expert and only the primary draw
/// consumes randomness.
pub fn sample_experts<S: Scalar, R: Rng + ?Sized>(
    q: &SamplingDistribution<S>,
    m: usize,
    rng: &mut R,
) -> Result<SampleSet> {
    let n = q.len();
    check_budget(m, n)?;
    let primary = draw_primary(q, rng)?;
    let observed = if m == n {
        (0..n).collect()
    } else {
        let mut rest: Vec<usize> = (0..n).filter(|&h| h != primary).collect();
        let (extras, _) = rest.partial_shuffle(rng, m - 1);
        let mut observed = extras.to_vec();
        observed.push(primary);
        observed
    };
    SampleSet::new(primary, observed, n)
}

/// Single draw from `q`.
pub fn draw_primary<S: Scalar, R: Rng + ?Sized>(q: &SamplingDistribution<S>, rng: &mut R) -> Result<usize> {
    if q.len() == 1 {
        return Ok(0);
    }
    let index = WeightedIndex::new(q.probs().iter().map(Scalar::as_f64))
        .map_err(|e| Error::InvalidState(format!("cannot sample from distribution: {e}")))?;
    Ok(index.sample(rng))
}

pub(crate) fn check_budget(m: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    if m == 0 || m > n {
        return Err(Error::invalid(format!("M={m} must lie in [1, N={n}]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rational;
    use approx::assert_abs_diff_eq;
    use num_traits::One;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn dist(p: &[f64]) -> SamplingDistribution<f64> {
        SamplingDistribution::new(p.to_vec()).unwrap()
    }

    fn est(t: &[f64]) -> CumulativeEstimates<f64> {
        CumulativeEstimates::from_totals(t.to_vec(), 0).unwrap()
    }

    #[test]
    fn zero_losses_give_uniform() {
        let q = compute_distribution(&est(&[0.0, 0.0, 0.0]), 0.5).unwrap();
        for p in q.probs() {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_eta_gives_uniform() {
        let q = compute_distribution(&est(&[3.0, 0.1, 70.0, 2.0]), 0.0).unwrap();
        assert_eq!(q.probs(), &[0.25; 4]);
    }

    #[test]
    fn ln2_gap_halves_weight() {
        let eta = 0.37;
        let q = compute_distribution(&est(&[0.0, std::f64::consts::LN_2 / eta]), eta).unwrap();
        assert_abs_diff_eq!(q.probs()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.probs()[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn huge_totals_do_not_underflow() {
        let q = compute_distribution(&est(&[1e6, 1e6 + 1.0, 5e6]), 10.0).unwrap();
        assert!(q.probs()[0] > 0.99);
        assert_abs_diff_eq!(q.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn distribution_rejects_bad_input() {
        let empty = CumulativeEstimates::<f64>::zeros(0);
        assert!(matches!(compute_distribution(&empty, 1.0), Err(Error::InvalidInput(_))));
        assert!(compute_distribution(&est(&[0.0]), -1.0).is_err());
        assert!(compute_distribution(&est(&[0.0]), f64::NAN).is_err());
        assert!(SamplingDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(SamplingDistribution::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn f32_distribution() {
        let e = CumulativeEstimates::<f32>::from_totals(vec![0.0, 1.0, 2.0], 0).unwrap();
        let q = compute_distribution(&e, 1.0f32).unwrap();
        assert!(q.probs()[0] > q.probs()[1] && q.probs()[1] > q.probs()[2]);
    }

    #[test]
    fn learning_rate_values() {
        assert_eq!(learning_rate::<f64>(7, 1, 1).unwrap(), 0.0);
        // sqrt(10 ln 100 / 100)
        assert_abs_diff_eq!(learning_rate::<f64>(1, 100, 10).unwrap(), 0.678_614_042_441_511_2, epsilon = 1e-12);
        for k in [1, 3, 17, 1000] {
            let a = learning_rate::<f64>(k, 50, 5).unwrap();
            let b = learning_rate::<f64>(4 * k, 50, 5).unwrap();
            assert_eq!(b, a / 2.0);
        }
        assert!(learning_rate::<f64>(0, 5, 1).is_err());
        assert!(learning_rate::<f64>(1, 5, 6).is_err());
        assert!(learning_rate::<f64>(1, 5, 0).is_err());
    }

    #[test]
    fn learning_rate_positive_and_non_increasing() {
        for n in 2..20 {
            for m in 1..=n {
                let mut prev = f64::INFINITY;
                for round in 1..200 {
                    let eta = learning_rate::<f64>(round, n, m).unwrap();
                    assert!(eta > 0.0 && eta <= prev);
                    prev = eta;
                }
            }
        }
    }

    #[test]
    fn inclusion_edges() {
        let q = dist(&[0.6, 0.3, 0.1]);
        for h in 0..3 {
            assert_eq!(inclusion_probability(&q, h, 3).unwrap(), 1.0);
            assert_eq!(inclusion_probability(&q, h, 1).unwrap(), q.probs()[h]);
        }
        assert!(inclusion_probability(&q, 3, 2).is_err());
        assert!(inclusion_probability(&q, 0, 4).is_err());
        let single = dist(&[1.0]);
        assert_eq!(inclusion_probability(&single, 0, 1).unwrap(), 1.0);
    }

    #[test]
    fn inclusion_uniform_exact() {
        for n in 2..8usize {
            let q = SamplingDistribution::<Rational>::uniform(n).unwrap();
            for m in 1..=n {
                let expect = Rational::new((m as i64).into(), (n as i64).into());
                for h in 0..n {
                    assert_eq!(inclusion_probability(&q, h, m).unwrap(), expect);
                }
            }
        }
    }

    #[test]
    fn estimate_values() {
        let l = LossValue::new(0.7).unwrap();
        assert_eq!(importance_weighted_estimate(&l, 1.0, true).unwrap(), 0.7);
        assert_eq!(importance_weighted_estimate(&l, 0.3, false).unwrap(), 0.0);
        assert_eq!(importance_weighted_estimate(&l, 0.0, false).unwrap(), 0.0);
        let half = LossValue::new(0.5).unwrap();
        let p = inclusion_probability(&dist(&[0.5, 0.5]), 0, 1).unwrap();
        assert_eq!(importance_weighted_estimate(&half, p, true).unwrap(), 1.0);
        assert!(matches!(
            importance_weighted_estimate(&l, 0.0, true),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn loss_value_bounds() {
        assert!(LossValue::new(0.0).is_ok());
        assert!(LossValue::new(1.0).is_ok());
        assert!(LossValue::new(1.0 + 1e-15).is_err());
        assert!(LossValue::new(-0.0001).is_err());
        assert!(LossValue::new(f64::NAN).is_err());
        assert!(LossValue::new(Rational::one()).is_ok());
    }

    #[test]
    fn sample_single_expert() {
        let mut rng = crate::Rng::seed_from_u64(1);
        let s = sample_experts(&dist(&[1.0]), 1, &mut rng).unwrap();
        assert_eq!((s.primary(), s.observed()), (0, &[0usize][..]));
    }

    #[test]
    fn sample_full_observation() {
        let mut rng = crate::Rng::seed_from_u64(2);
        let q = dist(&[0.1, 0.2, 0.3, 0.4]);
        for _ in 0..100 {
            let s = sample_experts(&q, 4, &mut rng).unwrap();
            assert_eq!(s.observed(), &[0, 1, 2, 3]);
        }
    }

    #[test]
    fn sample_degenerate_primary_splits_extras_evenly() {
        let mut rng = crate::Rng::seed_from_u64(3);
        let q = dist(&[1.0, 0.0, 0.0]);
        let draws = 100_000;
        let mut with_one = 0usize;
        for _ in 0..draws {
            let s = sample_experts(&q, 2, &mut rng).unwrap();
            assert_eq!(s.primary(), 0);
            assert_eq!(s.len(), 2);
            if s.contains(1) {
                with_one += 1;
            } else {
                assert!(s.contains(2));
            }
        }
        // binomial(1e5, 1/2): sd ~ 158
        let dev = (with_one as f64 - draws as f64 / 2.0).abs();
        assert!(dev < 4.0 * 158.2, "count {with_one}");
    }

    #[test]
    fn sample_rejects_bad_budget() {
        let mut rng = crate::Rng::seed_from_u64(4);
        let q = dist(&[0.5, 0.5]);
        assert!(sample_experts(&q, 0, &mut rng).is_err());
        assert!(sample_experts(&q, 3, &mut rng).is_err());
    }

    #[test]
    fn sample_set_validation() {
        assert!(SampleSet::new(0, vec![0, 0], 3).is_err());
        assert!(SampleSet::new(0, vec![0, 3], 3).is_err());
        assert!(SampleSet::new(1, vec![0, 2], 3).is_err());
        assert_eq!(SampleSet::new(2, vec![2, 0], 3).unwrap().observed(), &[0, 2]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(dist(&[0.2, 0.4, 0.4]).argmax(), 1);
        assert_eq!(dist(&[0.25; 4]).argmax(), 0);
    }

    #[test]
    fn accumulate_rejects_negative() {
        let mut e = CumulativeEstimates::<f64>::zeros(2);
        assert!(e.accumulate(&[0.1, -0.1]).is_err());
        assert!(e.accumulate(&[0.1]).is_err());
        e.accumulate(&[0.1, 0.0]).unwrap();
        assert_eq!(e.round_index(), 1);
    }

    proptest! {
        #[test]
        fn distribution_normalized(totals in prop::collection::vec(0.0f64..1e4, 1..40), eta in 0.0f64..50.0) {
            let q = compute_distribution(&est(&totals), eta).unwrap();
            prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(q.probs().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn distribution_monotone(totals in prop::collection::vec(0.0f64..20.0, 2..20), eta in 0.01f64..2.0) {
            let q = compute_distribution(&est(&totals), eta).unwrap();
            for a in 0..totals.len() {
                for b in 0..totals.len() {
                    if totals[a] < totals[b] && q.probs()[b] > 0.0 {
                        prop_assert!(q.probs()[a] > q.probs()[b]);
                    }
                }
            }
        }

        #[test]
        fn distribution_shift_invariant(totals in prop::collection::vec(0.0f64..100.0, 1..20), eta in 0.0f64..3.0, c in 0.0f64..1e3) {
            let q = compute_distribution(&est(&totals), eta).unwrap();
            let shifted: Vec<f64> = totals.iter().map(|t| t + c).collect();
            let r = compute_distribution(&est(&shifted), eta).unwrap();
            for (a, b) in q.probs().iter().zip(r.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn sample_set_shape(weights in prop::collection::vec(0.01f64..1.0, 1..15), m_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let total: f64 = weights.iter().sum();
            let q = dist(&weights.iter().map(|w| w / total).collect::<Vec<_>>());
            let n = q.len();
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let mut rng = crate::Rng::seed_from_u64(seed);
            let s = sample_experts(&q, m, &mut rng).unwrap();
            prop_assert_eq!(s.len(), m);
            prop_assert!(s.contains(s.primary()));
        }
    }
}
