//! Evaluation arithmetic: perplexity with a bounded history window,
//! classification and correlation metrics, and resampling tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BlockSequence;
use crate::hart::{run_sequence, ForwardMode, HartModel};
use crate::model::ModelError;
use crate::training::{derive_seed, hulm_loss_sum, TrainError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Summed NLL and target count for one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NllCount {
    pub nll: f64,
    pub count: usize,
}

impl NllCount {
    pub fn mean(&self) -> f64 {
        self.nll / self.count as f64
    }
}

pub fn perplexity_from(parts: &[NllCount]) -> Result<f64, MetricError> {
    let (s, n) = parts
        .iter()
        .fold((0.0, 0), |(s, n), p| (s + p.nll, n + p.count));
    if n == 0 {
        return Err(MetricError::Empty);
    }
    Ok((s / n as f64).exp())
}

/// Per-user loss when every non-pad block `t >= first_block` is scored
/// with the `history_blocks - 1` blocks before it as context, starting
/// each window from `U0`. Blocks before `first_block` are context only.
pub fn windowed_scores(
    model: &HartModel,
    seqs: &[BlockSequence],
    history_blocks: usize,
    mode: ForwardMode,
    first_block: usize,
) -> Result<Vec<NllCount>, MetricError> {
    if history_blocks == 0 {
        return Err(MetricError::Invalid("history_blocks must be >= 1".into()));
    }
    seqs.par_iter()
        .map(|seq| {
            let n = seq.num_nonpad_blocks;
            let mut acc = NllCount::default();
            if first_block >= n {
                return Ok(acc);
            }
            let single_pass = match mode {
                ForwardMode::Full => history_blocks >= n,
                ForwardMode::FrozenState | ForwardMode::NoRecurrence => true,
                ForwardMode::NoHistory => false,
            };
            if single_pass {
                // no block sees a different context than in its own window
                let all = seq.window(0, n);
                let mut out = run_sequence(model, &all, mode)?;
                out.logits
                    .iter_mut()
                    .take(first_block)
                    .for_each(|l| *l = None);
                let (s, c) = hulm_loss_sum(&out.logits, &all)?;
                return Ok(NllCount { nll: s, count: c });
            }
            for t in first_block..n {
                let w = seq.window((t + 1).saturating_sub(history_blocks), t + 1);
                let mut out = run_sequence(model, &w, mode)?;
                let last = w.blocks.len() - 1;
                out.logits.iter_mut().take(last).for_each(|l| *l = None);
                let (s, c) = hulm_loss_sum(&out.logits, &w)?;
                acc.nll += s;
                acc.count += c;
            }
            Ok(acc)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub perplexity: f64,
    pub nll: f64,
    pub tokens: usize,
    pub per_user: Vec<NllCount>,
}

fn to_result(per_user: Vec<NllCount>) -> Result<PerplexityResult, MetricError> {
    let perplexity = perplexity_from(&per_user)?;
    let nll = per_user.iter().map(|p| p.nll).sum();
    let tokens = per_user.iter().map(|p| p.count).sum();
    Ok(PerplexityResult {
        perplexity,
        nll,
        tokens,
        per_user,
    })
}

/// Token-weighted perplexity over every block, each conditioned on at most
/// `history_blocks - 1` earlier blocks.
pub fn perplexity(
    model: &HartModel,
    seqs: &[BlockSequence],
    history_blocks: usize,
    mode: ForwardMode,
) -> Result<PerplexityResult, MetricError> {
    if seqs.is_empty() {
        return Err(MetricError::Empty);
    }
    to_result(windowed_scores(model, seqs, history_blocks, mode, 0)?)
}

pub fn adjusted_perplexity(ppl_model: f64, ppl_baseline: f64) -> Result<f64, MetricError> {
    if !(ppl_model > 0.0 && ppl_baseline > 0.0) {
        return Err(MetricError::Invalid("perplexities must be positive".into()));
    }
    Ok(ppl_model / ppl_baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub history_blocks: usize,
    pub perplexity: f64,
    pub per_user: Vec<NllCount>,
}

/// Perplexity for each history size on the same tokens: only blocks with
/// at least `max(ks) - 1` predecessors are scored.
pub fn history_sweep(
    model: &HartModel,
    seqs: &[BlockSequence],
    ks: &[usize],
) -> Result<Vec<SweepRow>, MetricError> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricError::Invalid(
            "block counts must be non-empty and strictly ascending".into(),
        ));
    }
    let first = ks[ks.len() - 1] - 1;
    ks.iter()
        .map(|&k| {
            let r = to_result(windowed_scores(model, seqs, k, ForwardMode::Full, first)?)?;
            Ok(SweepRow {
                history_blocks: k,
                perplexity: r.perplexity,
                per_user: r.per_user,
            })
        })
        .collect()
}

/// Support-weighted mean of per-class F1 over `0..n_classes`.
pub fn weighted_f1(
    predictions: &[usize],
    golds: &[usize],
    n_classes: usize,
) -> Result<f64, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), golds.len()));
    }
    if golds.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(&bad) = predictions.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(MetricError::Invalid(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &g) in predictions.iter().zip(golds) {
        pred_count[p] += 1;
        support[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let n = golds.len() as f64;
    let mut total = 0.0;
    for c in 0..n_classes {
        if support[c] == 0 {
            continue;
        }
        let f1 = if tp[c] == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / (pred_count[c] + support[c]) as f64
        };
        total += support[c] as f64 / n * f1;
    }
    Ok(total)
}

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), golds.len()));
    }
    if golds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count() as f64
        / golds.len() as f64)
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::Invalid("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `r / sqrt(reliability)`.
pub fn disattenuated_r(r: f64, reliability: f64) -> Result<f64, MetricError> {
    if !(reliability > 0.0 && reliability <= 1.0) {
        return Err(MetricError::Invalid(format!(
            "reliability {reliability} outside (0, 1]"
        )));
    }
    Ok(r / reliability.sqrt())
}

pub const MIN_RESAMPLES: usize = 100;

fn check_resamples(n: usize) -> Result<(), MetricError> {
    if n < MIN_RESAMPLES {
        return Err(MetricError::Invalid(format!(
            "n_resamples {n} below {MIN_RESAMPLES}"
        )));
    }
    Ok(())
}

fn smoothed_p(hits: usize, n: usize) -> f64 {
    (1 + hits) as f64 / (1 + n) as f64
}

/// Paired sign-flip test with a caller-defined statistic. `stat(flips)`
/// evaluates the statistic with the pairs marked `true` swapped; it is
/// called once with no flips for the observed value. Two-sided.
pub fn permutation_test_with<F>(
    n_items: usize,
    n_resamples: usize,
    seed: u64,
    stat: F,
) -> Result<f64, MetricError>
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    if n_items == 0 {
        return Err(MetricError::Empty);
    }
    check_resamples(n_resamples)?;
    let observed = stat(&vec![false; n_items]).abs();
    let tol = 1e-12 * observed.max(1.0);
    let hits: usize = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
            let flips: Vec<bool> = (0..n_items).map(|_| rng.gen::<bool>()).collect();
            usize::from(stat(&flips).abs() >= observed - tol)
        })
        .sum();
    Ok(smoothed_p(hits, n_resamples))
}

/// Sign-flip test on the mean of paired differences `a - b`.
pub fn permutation_test(
    a: &[f64],
    b: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    permutation_test_with(d.len(), n_resamples, seed, |flips| {
        d.iter()
            .zip(flips)
            .map(|(&x, &f)| if f { -x } else { x })
            .sum::<f64>()
            / n
    })
}

/// Paired bootstrap with a caller-defined statistic over resampled index
/// lists. Two-sided: counts resamples whose centered statistic is at least
/// as extreme as the observed one.
pub fn bootstrap_test_with<F>(
    n_items: usize,
    n_resamples: usize,
    seed: u64,
    stat: F,
) -> Result<f64, MetricError>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    if n_items == 0 {
        return Err(MetricError::Empty);
    }
    check_resamples(n_resamples)?;
    let all: Vec<usize> = (0..n_items).collect();
    let observed = stat(&all);
    let tol = 1e-12 * observed.abs().max(1.0);
    let hits: usize = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
            let idx: Vec<usize> = (0..n_items).map(|_| rng.gen_range(0..n_items)).collect();
            usize::from((stat(&idx) - observed).abs() >= observed.abs() - tol)
        })
        .sum();
    Ok(smoothed_p(hits, n_resamples))
}

/// Paired bootstrap on the mean difference `a - b`.
pub fn bootstrap_test(
    a: &[f64],
    b: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    bootstrap_test_with(d.len(), n_resamples, seed, |idx| {
        idx.iter().map(|&i| d[i]).sum::<f64>() / idx.len() as f64
    })
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `xs` and U(0, 1).
pub fn ks_distance_uniform(xs: &[f64]) -> Result<f64, MetricError> {
    if xs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    Ok(s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub comparator: String,
    pub test: String,
    pub p_value: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_instance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub significance: Vec<Significance>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            per_instance: Vec::new(),
            significance: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_of_two_token_stream() {
        let p = perplexity_from(&[NllCount {
            nll: -(0.5f64.ln() + 0.25f64.ln()),
            count: 2,
        }])
        .unwrap();
        assert!((p - 2.8284).abs() < 1e-4);
        assert!(perplexity_from(&[]).is_err());
    }

    #[test]
    fn adjusted_perplexity_cases() {
        let r = |x: f64| (x * 100.0).round() / 100.0;
        assert_eq!(r(adjusted_perplexity(27.6, 53.7).unwrap()), 0.51);
        assert_eq!(r(adjusted_perplexity(27.5, 48.5).unwrap()), 0.57);
        assert_eq!(adjusted_perplexity(3.3, 3.3).unwrap(), 1.0);
    }

    #[test]
    fn weighted_f1_extremes() {
        assert_eq!(weighted_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert_eq!(weighted_f1(&[0, 0, 0, 0], &[1, 1, 1, 1], 2).unwrap(), 0.0);
        assert!(weighted_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn pearson_and_disattenuation() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            pearson_r(&x, &[1.0; 4]),
            Err(MetricError::ZeroVariance("y"))
        ));
        assert!((disattenuated_r(0.5, 0.64).unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn permutation_extremes() {
        let a = [0.3, 0.9, 1.2];
        assert_eq!(permutation_test(&a, &a, 500, 1).unwrap(), 1.0);
        let ones = [1.0; 20];
        let zeros = [0.0; 20];
        assert!(permutation_test(&ones, &zeros, 10_000, 1).unwrap() <= 0.001);
        assert!(permutation_test(&[], &[], 500, 1).is_err());
        assert!(permutation_test(&a, &a, 99, 1).is_err());
    }

    #[test]
    fn bootstrap_detects_shift() {
        let a: Vec<f64> = (0..30).map(|i| 1.0 + (i % 3) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..30).map(|i| (i % 5) as f64 * 0.1).collect();
        assert!(bootstrap_test(&a, &b, 2000, 3).unwrap() < 0.01);
        assert_eq!(bootstrap_test(&a, &a, 200, 3).unwrap(), 1.0);
    }

    #[test]
    fn ks_of_grid_is_small() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_distance_uniform(&xs).unwrap() - 0.005).abs() < 1e-12);
    }
}
