//! Particle-filter marginal likelihood estimation.
//!
//! The estimator is the product over observation times of the ensemble mean
//! of the per-particle observation likelihoods,
//!
//! ```text
//! L̂ = Π_j (1/p) Σ_i w_{j,i}
//! ```
//!
//! evaluated in log space with a per-row max shift, so ensembles of thousands
//! of particles with tiny likelihoods do not underflow. Its spread is
//! reported with a first-order (delta method) approximation
//! `Var(log L̂) ≈ Σ_j s_j² / (p · mean_j²)`, with `s_j²` the sample variance
//! of row `j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resampling procedure used between observation times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplingScheme {
    #[default]
    Multinomial,
    Systematic,
}

/// Number of post-resampling copies of each particle, indexed by lineage id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleCounts(pub Vec<usize>);

impl ResampleCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Normalizes nonnegative linear weights to a probability vector.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::DegenerateEnsemble(format!("invalid weight {bad}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateEnsemble("all weights are zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Normalizes log weights (`-inf` allowed) with a max shift.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::DegenerateEnsemble("invalid log weight".into()));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateEnsemble("all weights are zero".into()));
    }
    let shifted: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    normalize_weights(&shifted)
}

/// Draws `p` copies in total, `Multinomial(p, probs)`, seeded by `seed`.
///
/// `p` uniforms are drawn from a ChaCha8 stream, sorted, and swept once
/// against the cumulative distribution.
pub fn resample_multinomial(probs: &[f64], p: usize, seed: u64) -> ResampleCounts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniforms: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
    uniforms.sort_by(f64::total_cmp);
    sweep(probs, &uniforms)
}

/// Systematic resampling: a single uniform offset `u`, points `(k + u) / p`.
pub fn resample_systematic(probs: &[f64], p: usize, seed: u64) -> ResampleCounts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let points: Vec<f64> = (0..p).map(|k| (k as f64 + u) / p as f64).collect();
    sweep(probs, &points)
}

pub fn resample(scheme: ResamplingScheme, probs: &[f64], p: usize, seed: u64) -> ResampleCounts {
    match scheme {
        ResamplingScheme::Multinomial => resample_multinomial(probs, p, seed),
        ResamplingScheme::Systematic => resample_systematic(probs, p, seed),
    }
}

/// Counts how many of the ascending `points` fall into each CDF bin.
///
/// Points beyond the accumulated total (rounding) go to the last bin with
/// positive probability, so zero-probability particles never receive copies.
fn sweep(probs: &[f64], points: &[f64]) -> ResampleCounts {
    let mut counts = vec![0usize; probs.len()];
    let last_positive = probs.iter().rposition(|p| *p > 0.0);
    let mut cumulative = 0.0;
    let mut bin = 0;
    for &u in points {
        while bin < probs.len() && cumulative + probs[bin] <= u {
            cumulative += probs[bin];
            bin += 1;
        }
        let target = if bin < probs.len() { bin } else { last_positive.unwrap_or(0) };
        counts[target] += 1;
    }
    ResampleCounts(counts)
}

/// Fraction of particles with at least one copy after resampling.
pub fn redraw_rate(counts: &ResampleCounts) -> f64 {
    let p = counts.total();
    if p == 0 {
        return 0.0;
    }
    counts.0.iter().filter(|c| **c > 0).count() as f64 / p as f64
}

/// Marginal likelihood estimate from an `n × p` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodEstimate {
    pub log_value: f64,
    /// Delta-method standard deviation of `log_value`; NaN when degenerate.
    pub log_std: f64,
    /// `log mean_j` for each row.
    pub log_means: Vec<f64>,
    /// Relative variance `s_j² / mean_j²` of each row (NaN when degenerate).
    pub relative_variances: Vec<f64>,
}

impl LikelihoodEstimate {
    /// A row had zero mean: the likelihood estimate is exactly zero.
    pub fn is_degenerate(&self) -> bool {
        self.log_value == f64::NEG_INFINITY
    }

    pub fn degenerate(rows: usize) -> Self {
        Self {
            log_value: f64::NEG_INFINITY,
            log_std: f64::NAN,
            log_means: vec![f64::NEG_INFINITY; rows],
            relative_variances: vec![f64::NAN; rows],
        }
    }

    /// Per-row means in linear space.
    pub fn means(&self) -> Vec<f64> {
        self.log_means.iter().map(|m| m.exp()).collect()
    }

    /// Per-row variance `s_j²` of the weights in linear space.
    pub fn variances(&self) -> Vec<f64> {
        self.log_means
            .iter()
            .zip(&self.relative_variances)
            .map(|(m, rv)| rv * (2.0 * m).exp())
            .collect()
    }
}

/// Estimator on linear-space weights; rows are observation times.
pub fn estimate_marginal(weights: &[Vec<f64>]) -> Result<LikelihoodEstimate> {
    let logs: Vec<Vec<f64>> = weights
        .iter()
        .map(|row| {
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                Err(Error::DegenerateEnsemble("weights must be finite and ≥ 0".into()))
            } else {
                Ok(row.iter().map(|w| w.ln()).collect())
            }
        })
        .collect::<Result<_>>()?;
    estimate_marginal_log(&logs)
}

/// Estimator on log-space weights; rows are observation times.
pub fn estimate_marginal_log(log_weights: &[Vec<f64>]) -> Result<LikelihoodEstimate> {
    let mut log_means = Vec::with_capacity(log_weights.len());
    let mut relative_variances = Vec::with_capacity(log_weights.len());
    let mut variance_sum = 0.0;
    let mut p_common = None;
    for row in log_weights {
        let p = row.len();
        if p == 0 {
            return Err(Error::InvalidObservations("empty weight row".into()));
        }
        if *p_common.get_or_insert(p) != p {
            return Err(Error::InvalidObservations("ragged weight matrix".into()));
        }
        if row.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::DegenerateEnsemble("invalid log weight".into()));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Ok(LikelihoodEstimate::degenerate(log_weights.len()));
        }
        let shifted: Vec<f64> = row.iter().map(|w| (w - max).exp()).collect();
        let mean = shifted.iter().sum::<f64>() / p as f64;
        let var = if p > 1 {
            shifted.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (p - 1) as f64
        } else {
            0.0
        };
        let rel = var / (mean * mean);
        log_means.push(max + mean.ln());
        relative_variances.push(rel);
        variance_sum += rel / p as f64;
    }
    Ok(LikelihoodEstimate {
        log_value: log_means.iter().sum(),
        log_std: variance_sum.sqrt(),
        log_means,
        relative_variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent multinomial replay: each uniform, in draw order, is
    /// located by a linear scan of the CDF.
    fn replay_multinomial(probs: &[f64], p: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0; probs.len()];
        for _ in 0..p {
            let u: f64 = rand::Rng::random(&mut rng);
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, q) in probs.iter().enumerate() {
                acc += q;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            counts[chosen] += 1;
        }
        counts
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(
            normalize_weights(&[0.0, 2.0, 0.0, 6.0]).unwrap(),
            vec![0.0, 0.25, 0.0, 0.75]
        );
        assert!(matches!(
            normalize_weights(&[0.0, 0.0, 0.0]),
            Err(Error::DegenerateEnsemble(_))
        ));
        assert!(normalize_weights(&[1.0, f64::NAN]).is_err());
        assert!(normalize_weights(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn normalize_log_survives_underflow() {
        let probs = normalize_log_weights(&[-2000.0, -2000.0 + 2f64.ln(), f64::NEG_INFINITY]).unwrap();
        assert!((probs[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((probs[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(probs[2], 0.0);
        assert!(normalize_log_weights(&[f64::NEG_INFINITY; 3]).is_err());
    }

    #[test]
    fn point_mass_resample() {
        for seed in 0..50 {
            assert_eq!(resample_multinomial(&[1.0, 0.0, 0.0], 5, seed).0, vec![5, 0, 0]);
            assert_eq!(resample_systematic(&[1.0, 0.0, 0.0], 5, seed).0, vec![5, 0, 0]);
        }
    }

    #[test]
    fn uniform_four_seed_42_matches_replay() {
        let expected = replay_multinomial(&[0.25; 4], 4, 42);
        assert_eq!(resample_multinomial(&[0.25; 4], 4, 42).0, expected);
        // Frozen from the replay above.
        assert_eq!(expected, vec![0, 1, 2, 1]);
    }

    #[test]
    fn systematic_is_low_variance() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        for seed in 0..100 {
            let c = resample_systematic(&probs, 100, seed).0;
            for (ci, pi) in c.iter().zip(probs) {
                assert!((*ci as f64 - 100.0 * pi).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn estimator_examples() {
        let e = estimate_marginal(&[vec![0.5, 0.5]]).unwrap();
        assert!((e.log_value - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(e.log_std, 0.0);

        let e = estimate_marginal(&[vec![0.2, 0.4], vec![0.1, 0.3]]).unwrap();
        assert!((e.log_value - 0.06f64.ln()).abs() < 1e-14);
        // s² = 0.02 for both rows; rel = 0.02/0.09 and 0.02/0.04; p = 2.
        let expected_std = ((0.02 / 0.09 + 0.02 / 0.04) / 2.0f64).sqrt();
        assert!((e.log_std - expected_std).abs() < 1e-14);
        let vars = e.variances();
        assert!((vars[0] - 0.02).abs() < 1e-15 && (vars[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let e = estimate_marginal(&[vec![0.3, 0.1], vec![0.0, 0.0]]).unwrap();
        assert!(e.is_degenerate());
        assert!(e.log_std.is_nan());
        assert!(estimate_marginal(&[vec![-1.0]]).is_err());
    }

    #[test]
    fn redraw_examples() {
        assert_eq!(redraw_rate(&ResampleCounts(vec![1; 4])), 1.0);
        assert_eq!(redraw_rate(&ResampleCounts(vec![2, 2, 2, 2, 0, 0, 0, 0])), 0.5);
        assert_eq!(redraw_rate(&ResampleCounts(vec![8, 0, 0, 0, 0, 0, 0, 0])), 0.125);
    }

    fn prob_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0], 1..40)
            .prop_filter("positive", |w| w.iter().sum::<f64>() > 0.0)
            .prop_map(|w| normalize_weights(&w).unwrap())
    }

    proptest! {
        #[test]
        fn resample_conserves_and_respects_zeros(probs in prob_vec(), p in 1usize..200, seed: u64) {
            for scheme in [ResamplingScheme::Multinomial, ResamplingScheme::Systematic] {
                let c = resample(scheme, &probs, p, seed);
                prop_assert_eq!(c.total(), p);
                for (ci, pi) in c.0.iter().zip(&probs) {
                    if *pi == 0.0 { prop_assert_eq!(*ci, 0); }
                }
            }
        }

        #[test]
        fn multinomial_matches_replay(probs in prob_vec(), p in 1usize..64, seed: u64) {
            // Replay uses `<` against the running sum while the sweep skips
            // bins with `<=`; both assign u to the first bin whose cumulative
            // sum exceeds it. Only exact floating ties at the CDF end differ.
            let fast = resample_multinomial(&probs, p, seed).0;
            let slow = replay_multinomial(&probs, p, seed);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn estimator_row_permutation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(0.001f64..5.0, 6), 1..5),
            shift in 0usize..6,
        ) {
            let a = estimate_marginal(&rows).unwrap();
            let rotated: Vec<Vec<f64>> = rows.iter().map(|r| {
                let mut r = r.clone(); r.rotate_left(shift); r
            }).collect();
            let b = estimate_marginal(&rotated).unwrap();
            prop_assert!((a.log_value - b.log_value).abs() < 1e-12);
            prop_assert!((a.log_std - b.log_std).abs() < 1e-12);
        }

        #[test]
        fn single_particle_is_product(ws in proptest::collection::vec(0.001f64..5.0, 1..10)) {
            let rows: Vec<Vec<f64>> = ws.iter().map(|w| vec![*w]).collect();
            let e = estimate_marginal(&rows).unwrap();
            let product: f64 = ws.iter().product();
            prop_assert!((e.log_value - product.ln()).abs() < 1e-12);
            prop_assert_eq!(e.log_std, 0.0);
        }

        #[test]
        fn constant_rows_have_zero_std(vals in proptest::collection::vec(0.001f64..5.0, 1..6), p in 1usize..50) {
            let rows: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v; p]).collect();
            prop_assert_eq!(estimate_marginal(&rows).unwrap().log_std, 0.0);
        }
    }
}
