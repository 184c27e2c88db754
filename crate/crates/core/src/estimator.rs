//! Learned proximity estimator.
//!
//! A linear domain classifier on frozen features: target samples are
//! positives, candidate-pool samples are negatives, and the sigmoid output
//! `s(x) = sigmoid(w . x~ + b)` ranks candidates by closeness to the target
//! domain. At the optimum of the cross-entropy objective the classifier output
//! is `p_t(x) / (p_t(x) + p_c(x))`, a monotone transform of the density ratio,
//! so ranking by score is ranking by density ratio.
//!
//! Training uses balanced mini-batches (half target, half candidate, each
//! drawn uniformly with replacement), momentum SGD from a zero
//! initialisation, and early stopping once balanced hold-out accuracy at
//! threshold 0.5 reaches the configured level.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fsutil::write_json_atomic;
use crate::points::{check_dim, dot, Points, VectorSource};
use crate::rng::{self, Rng};
use crate::scores::{ScoreEntry, ScoreTable, ScorerKind};
use crate::store::FeatureStore;
use crate::{Error, Result};

/// Probability clamp applied inside the loss.
pub const LOSS_EPSILON: f64 = 1e-12;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityEstimator {
    pub dim: usize,
    pub bias: f64,
    pub weights: Vec<f64>,
    pub standardize: Option<Standardization>,
}

impl ProximityEstimator {
    pub fn zeros(dim: usize) -> Self {
        ProximityEstimator {
            dim,
            bias: 0.0,
            weights: vec![0.0; dim],
            standardize: None,
        }
    }

    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        let est = ProximityEstimator {
            dim: weights.len(),
            bias,
            weights,
            standardize: None,
        };
        est.check()?;
        Ok(est)
    }

    pub fn with_standardization(mut self, s: Standardization) -> Result<Self> {
        self.standardize = Some(s);
        self.check()?;
        Ok(self)
    }

    /// Checks the structural invariants (used after deserialisation too).
    pub fn check(&self) -> Result<()> {
        check_dim(self.dim, self.weights.len())?;
        if !self.bias.is_finite() || !self.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::invalid("estimator weights must be finite"));
        }
        if let Some(s) = &self.standardize {
            check_dim(self.dim, s.mean.len())?;
            check_dim(self.dim, s.scale.len())?;
            if !s.scale.iter().all(|&v| v > 0.0 && v.is_finite()) {
                return Err(Error::invalid("standardization scales must be positive"));
            }
            if !s.mean.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("standardization means must be finite"));
            }
        }
        Ok(())
    }

    /// Applies the stored standardization in place.
    pub fn transform(&self, x: &mut [f64]) {
        if let Some(s) = &self.standardize {
            for ((v, m), sc) in x.iter_mut().zip(&s.mean).zip(&s.scale) {
                *v = (*v - m) / sc;
            }
        }
    }

    /// Raw logit `w . x~ + b`.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(match &self.standardize {
            None => dot(&self.weights, x) + self.bias,
            Some(_) => {
                let mut t = x.to_vec();
                self.transform(&mut t);
                dot(&self.weights, &t) + self.bias
            }
        })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }
}

/// Proximity score of one sample. Saturated logits may round to 0 or 1; the
/// clamp lives in the loss, not here.
pub fn score_sample(est: &ProximityEstimator, x: &[f64]) -> Result<f64> {
    est.score(x)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[LOSS_EPSILON, 1 - LOSS_EPSILON]`. `labels[i]` is true for positives.
pub fn bce_loss(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::empty("bce_loss needs at least one score"));
    }
    check_dim(scores.len(), labels.len())?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
            if y {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Analytic gradient of the mean cross-entropy over a batch:
/// `mean((s(x) - y) * x~)` for the weights and `mean(s(x) - y)` for the bias.
pub fn bce_gradient(est: &ProximityEstimator, xs: &Points, labels: &[bool]) -> Result<Gradient> {
    if xs.is_empty() {
        return Err(Error::empty("gradient needs a nonempty batch"));
    }
    check_dim(est.dim, xs.dim())?;
    check_dim(xs.len(), labels.len())?;
    let mut gw = vec![0.0; est.dim];
    let mut gb = 0.0;
    let mut buf = vec![0.0; est.dim];
    for (x, &y) in xs.rows().zip(labels) {
        buf.copy_from_slice(x);
        est.transform(&mut buf);
        let residual = sigmoid(dot(&est.weights, &buf) + est.bias) - if y { 1.0 } else { 0.0 };
        for (g, v) in gw.iter_mut().zip(&buf) {
            *g += residual * v;
        }
        gb += residual;
    }
    let n = xs.len() as f64;
    gw.iter_mut().for_each(|g| *g /= n);
    Ok(Gradient {
        weights: gw,
        bias: gb / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub early_stop_accuracy: f64,
    pub val_fraction: f64,
    pub eval_every: usize,
    pub standardize_features: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            max_steps: 1000,
            step_size: 0.1,
            momentum: 0.9,
            early_stop_accuracy: 0.90,
            val_fraction: 0.1,
            eval_every: 5,
            standardize_features: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad("batch_size must be a positive even number");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.early_stop_accuracy > 0.0 && self.early_stop_accuracy <= 1.0) {
            return bad("early_stop_accuracy must lie in (0, 1]");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub steps_run: usize,
    /// Step index of each evaluation.
    pub eval_steps: Vec<usize>,
    /// Hold-out cross-entropy at each evaluation.
    pub loss_curve: Vec<f64>,
    /// Hold-out accuracy at each evaluation.
    pub val_acc_curve: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.val_acc_curve.last().copied()
    }
}

/// Draws balanced batches: `batch_size / 2` positives and `batch_size / 2`
/// negatives, each uniformly with replacement from its index list.
pub struct BalancedSampler<'a> {
    positives: &'a [usize],
    negatives: &'a [usize],
    half: usize,
    rng: Rng,
}

impl<'a> BalancedSampler<'a> {
    pub fn new(
        positives: &'a [usize],
        negatives: &'a [usize],
        batch_size: usize,
        rng: Rng,
    ) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::empty("balanced sampling needs both classes"));
        }
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(Error::invalid("batch_size must be a positive even number"));
        }
        Ok(BalancedSampler {
            positives,
            negatives,
            half: batch_size / 2,
            rng,
        })
    }

    /// Returns `(positive indices, negative indices)` for one batch.
    pub fn draw(&mut self) -> (Vec<usize>, Vec<usize>) {
        let pos = (0..self.half)
            .map(|_| self.positives[self.rng.random_range(0..self.positives.len())])
            .collect();
        let neg = (0..self.half)
            .map(|_| self.negatives[self.rng.random_range(0..self.negatives.len())])
            .collect();
        (pos, neg)
    }
}

/// Seeded per-class hold-out split: `ceil(n * fraction)` validation indices,
/// the rest for training. Both sides must stay nonempty.
fn split_class(
    n: usize,
    fraction: f64,
    rng: &mut Rng,
    label: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::empty(format!("{label} class has no samples")));
    }
    let val_n = (n as f64 * fraction).ceil() as usize;
    if val_n == 0 || val_n >= n {
        return Err(Error::invalid(format!(
            "validation split leaves an empty {label} class ({n} samples, fraction {fraction})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let train = idx.split_off(val_n);
    Ok((train, idx))
}

/// Per-dimension mean and standard deviation over the given rows of both
/// sources; zero deviations are replaced by 1.
fn fit_standardization(parts: &[(&dyn VectorSource, &[usize])], dim: usize) -> Standardization {
    let mut count = 0.0;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for (src, rows) in parts {
        for &i in rows.iter() {
            src.read_into(i, &mut buf);
            count += 1.0;
            for d in 0..dim {
                let delta = buf[d] - mean[d];
                mean[d] += delta / count;
                m2[d] += delta * (buf[d] - mean[d]);
            }
        }
    }
    let scale = m2
        .iter()
        .map(|&v| {
            let sd = (v / count).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Standardization { mean, scale }
}

fn evaluate(est: &ProximityEstimator, val: &Points, labels: &[bool]) -> Result<(f64, f64)> {
    let mut buf = vec![0.0; est.dim];
    let mut scores = Vec::with_capacity(val.len());
    let mut correct = 0usize;
    for (x, &y) in val.rows().zip(labels) {
        buf.copy_from_slice(x);
        est.transform(&mut buf);
        let z = dot(&est.weights, &buf) + est.bias;
        if (z >= 0.0) == y {
            correct += 1;
        }
        scores.push(sigmoid(z));
    }
    let loss = bce_loss(&scores, labels)?;
    Ok((loss, correct as f64 / val.len() as f64))
}

/// Trains a proximity estimator with `target` rows as positives and
/// `candidates` rows as negatives.
pub fn train_estimator(
    target: &dyn VectorSource,
    candidates: &dyn VectorSource,
    cfg: &TrainConfig,
) -> Result<(ProximityEstimator, TrainHistory)> {
    cfg.validate()?;
    check_dim(target.dim(), candidates.dim())?;
    let dim = target.dim();

    let mut split_rng = rng::stream(cfg.seed, rng::STREAM_SPLIT);
    let (pos_train, pos_val) =
        split_class(target.len(), cfg.val_fraction, &mut split_rng, "target")?;
    let (neg_train, neg_val) = split_class(
        candidates.len(),
        cfg.val_fraction,
        &mut split_rng,
        "candidate",
    )?;

    // Balanced hold-out: equal counts per class.
    let m = pos_val.len().min(neg_val.len());
    let val = Points::concat(&[
        &target.gather(&pos_val[..m]),
        &candidates.gather(&neg_val[..m]),
    ])?;
    let val_labels: Vec<bool> = (0..2 * m).map(|i| i < m).collect();

    let mut est = ProximityEstimator::zeros(dim);
    if cfg.standardize_features {
        let s = fit_standardization(&[(target, &pos_train), (candidates, &neg_train)], dim);
        est = est.with_standardization(s)?;
    }

    let mut sampler = BalancedSampler::new(
        &pos_train,
        &neg_train,
        cfg.batch_size,
        rng::stream(cfg.seed, rng::STREAM_BATCH),
    )?;
    let half = cfg.batch_size / 2;
    let batch_labels: Vec<bool> = (0..cfg.batch_size).map(|i| i < half).collect();
    let mut rows = Vec::with_capacity(cfg.batch_size * dim);
    let mut buf = vec![0.0; dim];
    let mut vel_w = vec![0.0; dim];
    let mut vel_b = 0.0;
    let mut history = TrainHistory::default();

    for step in 1..=cfg.max_steps {
        let (pos, neg) = sampler.draw();
        for &i in &pos {
            target.read_into(i, &mut buf);
            rows.extend_from_slice(&buf);
        }
        for &i in &neg {
            candidates.read_into(i, &mut buf);
            rows.extend_from_slice(&buf);
        }
        let batch = Points::from_flat(dim, std::mem::take(&mut rows))?;
        let g = bce_gradient(&est, &batch, &batch_labels)?;
        rows = batch.into_flat();
        rows.clear();
        for ((w, v), gw) in est.weights.iter_mut().zip(vel_w.iter_mut()).zip(&g.weights) {
            *v = cfg.momentum * *v + gw;
            *w -= cfg.step_size * *v;
        }
        vel_b = cfg.momentum * vel_b + g.bias;
        est.bias -= cfg.step_size * vel_b;
        history.steps_run = step;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let (loss, acc) = evaluate(&est, &val, &val_labels)?;
            history.eval_steps.push(step);
            history.loss_curve.push(loss);
            history.val_acc_curve.push(acc);
            log::debug!("step {step}: val loss {loss:.5}, val acc {acc:.4}");
            if acc >= cfg.early_stop_accuracy {
                history.stopped_early = true;
                break;
            }
        }
    }
    log::info!(
        "estimator trained: {} steps, final val acc {:.4}, early stop {}",
        history.steps_run,
        history.final_val_accuracy().unwrap_or(f64::NAN),
        history.stopped_early
    );
    Ok((est, history))
}

/// Scores every row of a vector source, in row order.
pub fn score_source(est: &ProximityEstimator, source: &dyn VectorSource) -> Result<Vec<f64>> {
    check_dim(est.dim, source.dim())?;
    Ok((0..source.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; est.dim],
            |buf, i| {
                source.read_into(i, buf);
                est.transform(buf);
                sigmoid(dot(&est.weights, buf) + est.bias)
            },
        )
        .collect())
}

/// One `learned_estimator` entry per store record, aligned with store order.
pub fn score_store(est: &ProximityEstimator, store: &FeatureStore) -> Result<ScoreTable> {
    let values = score_source(est, store)?;
    let meta = store.metadata()?;
    let entries = values
        .into_iter()
        .enumerate()
        .map(|(i, value)| ScoreEntry {
            id: store.id(i),
            dataset: meta.datasets[i].clone(),
            value,
        })
        .collect();
    Ok(ScoreTable::new(ScorerKind::LearnedEstimator, entries))
}

/// Serialized form: the estimator plus the configuration and history that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEstimator {
    #[serde(flatten)]
    pub estimator: ProximityEstimator,
    pub train_config: TrainConfig,
    pub history: TrainHistory,
}

impl TrainedEstimator {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<TrainedEstimator> {
        let file = std::fs::File::open(path)?;
        let t: TrainedEstimator = serde_json::from_reader(std::io::BufReader::new(file))?;
        t.estimator.check()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logit_scores_half() {
        let est = ProximityEstimator::zeros(3);
        assert_eq!(score_sample(&est, &[1.0, -7.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn logistic_closed_form() {
        let est = ProximityEstimator::new(vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(score_sample(&est, &[0.0, 0.0]).unwrap(), 0.5);
        let s = score_sample(&est, &[9f64.ln(), 0.0]).unwrap();
        assert!((s - 0.9).abs() < 1e-12);
        let s = score_sample(&est, &[2.1972, 0.0]).unwrap();
        assert!((s - 0.9).abs() < 1e-4);
    }

    #[test]
    fn saturated_logit_is_not_an_error() {
        let est = ProximityEstimator::new(vec![1.0], 0.0).unwrap();
        let s = score_sample(&est, &[-1e6]).unwrap();
        assert!((0.0..1e-300).contains(&s));
        let s = score_sample(&est, &[-700.0]).unwrap();
        assert!(s > 0.0 && s < 1e-300);
    }

    #[test]
    fn score_dimension_mismatch() {
        let est = ProximityEstimator::zeros(2);
        assert!(matches!(
            score_sample(&est, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bce_closed_forms() {
        let l = bce_loss(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = bce_loss(&[0.9], &[false]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let l = bce_loss(&[1.0, 0.0], &[true, false]).unwrap();
        assert!(l <= 1e-11);
        assert!(bce_loss(&[], &[]).is_err());
    }

    #[test]
    fn gradient_closed_form_and_stationarity() {
        let est = ProximityEstimator::zeros(2);
        let xs = Points::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = bce_gradient(&est, &xs, &[true]).unwrap();
        assert_eq!(g.weights, vec![-0.5, 0.0]);
        assert_eq!(g.bias, -0.5);

        // Two mirrored samples with opposite labels under a zero model: the
        // residuals cancel.
        let xs = Points::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        let g = bce_gradient(&est, &xs, &[true, false]).unwrap();
        assert_eq!(g.weights, vec![0.0, 0.0]);
        assert_eq!(g.bias, 0.0);
    }

    #[test]
    fn standardization_rejects_zero_scale() {
        let s = Standardization {
            mean: vec![0.0],
            scale: vec![0.0],
        };
        assert!(ProximityEstimator::zeros(1)
            .with_standardization(s)
            .is_err());
    }

    #[test]
    fn sampler_batches_are_balanced() {
        let pos = [0, 1, 2];
        let neg: Vec<usize> = (10..100).collect();
        let mut s = BalancedSampler::new(&pos, &neg, 128, rng::stream(1, 9)).unwrap();
        for _ in 0..20 {
            let (p, n) = s.draw();
            assert_eq!(p.len(), 64);
            assert_eq!(n.len(), 64);
            assert!(p.iter().all(|i| pos.contains(i)));
            assert!(n.iter().all(|i| neg.contains(i)));
        }
        assert!(BalancedSampler::new(&pos, &neg, 7, rng::stream(1, 9)).is_err());
    }

    #[test]
    fn split_needs_room_for_both_sides() {
        let mut r = rng::stream(0, 0);
        assert!(split_class(1, 0.1, &mut r, "t").is_err());
        assert!(split_class(0, 0.1, &mut r, "t").is_err());
        let (train, val) = split_class(20, 0.1, &mut r, "t").unwrap();
        assert_eq!((train.len(), val.len()), (18, 2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 127,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            val_fraction: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
