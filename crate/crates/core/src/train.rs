//! Training of the anomaly classifier and the temperature surrogates.
//!
//! The data are split in time at the anomaly quantile `q`; the classifier
//! sees every training anomaly plus `floor(anomalies / ratio)` good samples
//! drawn without replacement, and is selected by K-fold cross validation on
//! balanced accuracy. The surrogates are boosted regression trees fit on
//! the good training samples and scored on the good test samples.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::Models;
use crate::error::{Error, Result};
use crate::predictors::{Activation, DenseLayer, MlpClassifier, RegressionTree, TreeEnsembleRegressor, TreeNode};
use crate::schema::{AssetConfig, FeatureId, FeatureVector, PowerCurve};

/// Classifier input order.
pub const CLASSIFIER_INPUTS: [FeatureId; 6] =
    [FeatureId::P, FeatureId::TN, FeatureId::TT, FeatureId::TA, FeatureId::WS, FeatureId::PMax];
/// Nacelle surrogate inputs.
pub const N_INPUTS: [FeatureId; 6] =
    [FeatureId::TA, FeatureId::P, FeatureId::TT, FeatureId::WS, FeatureId::Month, FeatureId::Hour];
/// Transformer surrogate inputs.
pub const T_INPUTS: [FeatureId; 6] =
    [FeatureId::TA, FeatureId::P, FeatureId::TN, FeatureId::WS, FeatureId::Month, FeatureId::Hour];

// ---------------------------------------------------------------- split

#[derive(Debug, Clone)]
pub struct TemporalSplit {
    pub cutoff: NaiveDateTime,
    pub train: Vec<FeatureVector>,
    pub test: Vec<FeatureVector>,
}

/// Past/future split at the timestamp of the `ceil(q * anomalies)`-th
/// anomaly; that sample belongs to the training side.
pub fn temporal_split(data: &[FeatureVector], q: f64) -> Result<TemporalSplit> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidConfig(format!("anomaly quantile {q} not in (0, 1)")));
    }
    if data.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::InvalidData("series is not sorted by time".into()));
    }
    let anomalies: Vec<usize> = (0..data.len()).filter(|&i| data[i].is_anomalous()).collect();
    if anomalies.is_empty() {
        return Err(Error::InvalidData("series contains no anomalies".into()));
    }
    let k = ((q * anomalies.len() as f64).ceil() as usize).clamp(1, anomalies.len());
    let cut = anomalies[k - 1];
    Ok(TemporalSplit { cutoff: data[cut].timestamp, train: data[..=cut].to_vec(), test: data[cut + 1..].to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    /// Faults per good sample in the training subset.
    pub ratio: f64,
    pub seed: u64,
}

/// Every anomaly plus `floor(anomalies / ratio)` good samples, in time order.
pub fn undersample(train: &[FeatureVector], spec: &SamplerSpec) -> Result<Vec<FeatureVector>> {
    if !(spec.ratio > 0.0) {
        return Err(Error::InvalidConfig("sampling ratio must be positive".into()));
    }
    let faults: Vec<usize> = (0..train.len()).filter(|&i| train[i].is_anomalous()).collect();
    let good: Vec<usize> = (0..train.len()).filter(|&i| !train[i].is_anomalous()).collect();
    if faults.is_empty() || good.is_empty() {
        return Err(Error::Training("training set needs both classes".into()));
    }
    let mut want = (faults.len() as f64 / spec.ratio).floor() as usize;
    if want > good.len() {
        log::warn!("requested {want} good samples, only {} available", good.len());
        want = good.len();
    }
    // A prefix of one seeded shuffle, so a higher ratio keeps a subset of
    // the good samples a lower one keeps.
    let mut keep = good;
    keep.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    keep.truncate(want);
    keep.extend(faults);
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| train[i].clone()).collect())
}

// -------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(truth: &[u8], pred: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (0, _) => c.tn += 1,
                _ => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Mean recall over the classes present.
    pub fn balanced_accuracy(&self) -> f64 {
        let mut recalls = Vec::new();
        if self.tp + self.fn_ > 0 {
            recalls.push(self.tp as f64 / (self.tp + self.fn_) as f64);
        }
        if self.tn + self.fp > 0 {
            recalls.push(self.tn as f64 / (self.tn + self.fp) as f64);
        }
        if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
    }
}

/// Step-wise average precision: sum over score thresholds of the recall
/// increase times the precision; tied scores form one threshold.
pub fn average_precision(truth: &[u8], scores: &[f64]) -> f64 {
    let positives = truth.iter().filter(|&&t| t == 1).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub average_precision: f64,
    pub confusion: Confusion,
}

impl TrainReport {
    pub fn evaluate(model: &MlpClassifier, data: &[FeatureVector], curve: &PowerCurve) -> Result<Self> {
        let mut truth = Vec::with_capacity(data.len());
        let mut scores = Vec::with_capacity(data.len());
        for x in data {
            truth.push(u8::from(x.is_anomalous()));
            scores.push(model.score_sample(x, curve)?);
        }
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s > model.threshold)).collect();
        let confusion = Confusion::from_predictions(&truth, &pred);
        Ok(Self {
            accuracy: confusion.accuracy(),
            balanced_accuracy: confusion.balanced_accuracy(),
            average_precision: average_precision(&truth, &scores),
            confusion,
        })
    }
}

// ------------------------------------------------------------------ mlp

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpTrainConfig {
    pub hidden: Vec<usize>,
    pub grid: Vec<HyperParams>,
    pub folds: usize,
    pub max_epochs: usize,
    /// Epochs without improvement of validation balanced accuracy before
    /// stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Counterfactual margin as a share of the training score range.
    pub margin_fraction: f64,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        let grid = [(0.05, 0.0), (0.05, 1e-3), (0.2, 0.0), (0.2, 1e-3)]
            .into_iter()
            .map(|(learning_rate, weight_decay)| HyperParams { learning_rate, weight_decay })
            .collect();
        Self {
            hidden: vec![8, 8],
            grid,
            folds: 5,
            max_epochs: 60,
            patience: 8,
            batch_size: 32,
            margin_fraction: 0.01,
            seed: 0,
        }
    }
}

impl MlpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layers must be non-empty".into()));
        }
        if self.grid.is_empty() || self.grid.iter().any(|h| !(h.learning_rate > 0.0) || !(h.weight_decay >= 0.0)) {
            return Err(Error::InvalidConfig("bad hyperparameter grid".into()));
        }
        if self.folds < 2 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("need folds >= 2, epochs >= 1, batch >= 1".into()));
        }
        if !(self.margin_fraction >= 0.0) {
            return Err(Error::InvalidConfig("margin fraction must be non-negative".into()));
        }
        Ok(())
    }
}

/// Network in standardized input space during training.
#[derive(Debug, Clone)]
struct Net {
    w: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<f64>>,
}

impl Net {
    fn new(n_in: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut w = Vec::new();
        let mut b = Vec::new();
        for pair in sizes.windows(2) {
            let std = (2.0 / pair[0] as f64).sqrt();
            w.push(
                (0..pair[1])
                    .map(|_| (0..pair[0]).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect(),
            );
            b.push(vec![0.0; pair[1]]);
        }
        Net { w, b }
    }

    /// Activations of every layer, input first; the last entry is the score.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.w.len() - 1;
        for (l, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            let a = acts.last().expect("input layer");
            let z: Vec<f64> =
                w.iter().zip(b).map(|(r, b)| b + r.iter().zip(a).map(|(w, v)| w * v).sum::<f64>()).collect();
            acts.push(if l == last { z } else { z.into_iter().map(|v| v.max(0.0)).collect() });
        }
        acts
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.forward(x).last().expect("output layer")[0]
    }

    /// One mini-batch step of gradient descent on the logistic loss.
    fn step(&mut self, x: &[Vec<f64>], y: &[u8], batch: &[usize], hp: &HyperParams) -> f64 {
        let mut gw: Vec<Vec<Vec<f64>>> =
            self.w.iter().map(|l| l.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
        let mut gb: Vec<Vec<f64>> = self.b.iter().map(|l| vec![0.0; l.len()]).collect();
        let mut loss = 0.0;
        for &i in batch {
            let acts = self.forward(&x[i]);
            let s = acts.last().expect("output layer")[0];
            let t = f64::from(y[i]);
            // log(1 + e^s) - t s, stably
            loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s;
            let mut delta = vec![1.0 / (1.0 + (-s).exp()) - t];
            for l in (0..self.w.len()).rev() {
                let input = &acts[l];
                for (k, &d) in delta.iter().enumerate() {
                    gb[l][k] += d;
                    for (g, &a) in gw[l][k].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if l > 0 {
                    delta = (0..input.len())
                        .map(|j| {
                            if input[j] > 0.0 {
                                delta.iter().enumerate().map(|(k, d)| d * self.w[l][k][j]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        let scale = hp.learning_rate / batch.len() as f64;
        for l in 0..self.w.len() {
            for k in 0..self.w[l].len() {
                for j in 0..self.w[l][k].len() {
                    self.w[l][k][j] -= scale * gw[l][k][j] + hp.learning_rate * hp.weight_decay * self.w[l][k][j];
                }
                self.b[l][k] -= scale * gb[l][k];
            }
        }
        loss
    }

    fn epoch(&mut self, x: &[Vec<f64>], y: &[u8], batch_size: usize, hp: &HyperParams, rng: &mut ChaCha8Rng) -> f64 {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.shuffle(rng);
        let loss: f64 = order.chunks(batch_size).map(|b| self.step(x, y, b, hp)).sum();
        loss / x.len() as f64
    }

    fn balanced_accuracy(&self, x: &[Vec<f64>], y: &[u8]) -> f64 {
        let pred: Vec<u8> = x.iter().map(|v| u8::from(self.score(v) > 0.0)).collect();
        Confusion::from_predictions(y, &pred).balanced_accuracy()
    }

    /// Dense layers acting on raw inputs: the standardization is folded
    /// into the first layer.
    fn into_layers(self, std: &Standardizer) -> Vec<DenseLayer> {
        let last = self.w.len() - 1;
        self.w
            .into_iter()
            .zip(self.b)
            .enumerate()
            .map(|(l, (mut w, mut b))| {
                if l == 0 {
                    for (row, bias) in w.iter_mut().zip(b.iter_mut()) {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v /= std.sd[j];
                            *bias -= *v * std.mean[j];
                        }
                    }
                }
                let act = if l == last { Activation::Identity } else { Activation::Relu };
                DenseLayer { w, b, act }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, sd }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.sd[j]).collect()).collect()
    }
}

/// Result of a fixed-length fit.
#[derive(Debug, Clone)]
pub struct FittedMlp {
    pub layers: Vec<DenseLayer>,
    /// Mean training loss after each epoch.
    pub losses: Vec<f64>,
}

/// Fits a network for a fixed number of epochs on raw inputs.
pub fn fit_mlp(
    x: &[Vec<f64>],
    y: &[u8],
    hidden: &[usize],
    hp: &HyperParams,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<FittedMlp> {
    check_xy(x, y)?;
    let std = Standardizer::fit(x);
    let xs = std.apply(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Net::new(xs[0].len(), hidden, &mut rng);
    let losses = (0..epochs).map(|_| net.epoch(&xs, y, batch_size, hp, &mut rng)).collect();
    Ok(FittedMlp { layers: net.into_layers(&std), losses })
}

fn check_xy(x: &[Vec<f64>], y: &[u8]) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Training("inputs and labels must be non-empty and aligned".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Training("ragged input rows".into()));
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::Training("training data must contain both classes".into()));
    }
    Ok(())
}

/// Trains on `train` with early stopping on `val`; returns the best epoch
/// (1-based) and its validation balanced accuracy.
fn fit_early_stopping(
    train: (&[Vec<f64>], &[u8]),
    val: (&[Vec<f64>], &[u8]),
    cfg: &MlpTrainConfig,
    hp: &HyperParams,
    seed: u64,
) -> (usize, f64) {
    let std = Standardizer::fit(train.0);
    let (xt, xv) = (std.apply(train.0), std.apply(val.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Net::new(xt[0].len(), &cfg.hidden, &mut rng);
    let (mut best_epoch, mut best) = (1, f64::NEG_INFINITY);
    for epoch in 1..=cfg.max_epochs {
        net.epoch(&xt, train.1, cfg.batch_size, hp, &mut rng);
        let ba = net.balanced_accuracy(&xv, val.1);
        if ba > best {
            best = ba;
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    (best_epoch, best)
}

/// Stratified fold index per sample.
fn stratified_folds(y: &[u8], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; y.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    fold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub hyperparams: HyperParams,
    pub epochs: usize,
    /// Mean validation balanced accuracy across folds.
    pub cv_balanced_accuracy: f64,
}

/// Cross-validated hyperparameter choice, then a final fit on all data.
pub fn train_mlp(
    x: &[Vec<f64>],
    y: &[u8],
    inputs: &[FeatureId],
    cfg: &MlpTrainConfig,
) -> Result<(MlpClassifier, Selection)> {
    cfg.validate()?;
    check_xy(x, y)?;
    if inputs.len() != x[0].len() {
        return Err(Error::DimensionMismatch { expected: inputs.len(), got: x[0].len() });
    }
    if cfg.folds > x.len() {
        return Err(Error::Training(format!("{} folds for {} samples", cfg.folds, x.len())));
    }
    let fold = stratified_folds(y, cfg.folds, cfg.seed);
    let jobs: Vec<(usize, usize)> = (0..cfg.grid.len()).flat_map(|g| (0..cfg.folds).map(move |f| (g, f))).collect();
    let results: Vec<(usize, f64)> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (mut xt, mut yt, mut xv, mut yv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..x.len() {
                if fold[i] == f {
                    xv.push(x[i].clone());
                    yv.push(y[i]);
                } else {
                    xt.push(x[i].clone());
                    yt.push(y[i]);
                }
            }
            if !yt.contains(&0) || !yt.contains(&1) || yv.is_empty() {
                return (1, 0.0);
            }
            let seed = cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + f as u64));
            fit_early_stopping((&xt, &yt), (&xv, &yv), cfg, &cfg.grid[g], seed)
        })
        .collect();

    let mut best: Option<Selection> = None;
    for (g, hp) in cfg.grid.iter().enumerate() {
        let runs = &results[g * cfg.folds..(g + 1) * cfg.folds];
        let score = runs.iter().map(|r| r.1).sum::<f64>() / cfg.folds as f64;
        let mut epochs: Vec<usize> = runs.iter().map(|r| r.0).collect();
        epochs.sort_unstable();
        let epochs = epochs[epochs.len() / 2].max(1);
        log::debug!("grid {hp:?}: cv balanced accuracy {score:.4}, epochs {epochs}");
        if best.as_ref().is_none_or(|b| score > b.cv_balanced_accuracy) {
            best = Some(Selection { hyperparams: *hp, epochs, cv_balanced_accuracy: score });
        }
    }
    let sel = best.expect("grid is non-empty");
    let fit = fit_mlp(x, y, &cfg.hidden, &sel.hyperparams, sel.epochs, cfg.batch_size, cfg.seed)?;
    let mut model = MlpClassifier { inputs: inputs.to_vec(), layers: fit.layers, threshold: 0.0, epsilon: 0.0 };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in x {
        let s = model.score(r)?;
        lo = lo.min(s);
        hi = hi.max(s);
    }
    model.epsilon = cfg.margin_fraction * (hi - lo);
    model.validate()?;
    Ok((model, sel))
}

// ------------------------------------------------------------- boosting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self { n_trees: 30, max_depth: 3, learning_rate: 0.3, min_samples_leaf: 20, max_bins: 64 }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.max_depth) {
            return Err(Error::InvalidConfig("tree depth must be between 1 and 4".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig("learning rate must lie in (0, 1]".into()));
        }
        if self.min_samples_leaf == 0 || self.max_bins < 2 {
            return Err(Error::InvalidConfig("need min_samples_leaf >= 1 and max_bins >= 2".into()));
        }
        Ok(())
    }
}

/// Quantile bins of one feature: values in bin `b` are at most `upper[b]`
/// and at least `lower[b]`.
struct Bins {
    upper: Vec<f64>,
    lower: Vec<f64>,
    index: Vec<u16>,
}

fn bin_feature(values: &[f64], max_bins: usize) -> Bins {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let cuts: Vec<f64> = if distinct.len() <= max_bins {
        distinct
    } else {
        let mut c: Vec<f64> =
            (1..=max_bins).map(|k| sorted[(k * sorted.len() / max_bins).min(sorted.len()) - 1]).collect();
        c.dedup();
        c
    };
    let index: Vec<u16> = values.iter().map(|v| cuts.partition_point(|c| c < v) as u16).collect();
    let mut lower = vec![f64::INFINITY; cuts.len()];
    for (v, &b) in values.iter().zip(&index) {
        lower[b as usize] = lower[b as usize].min(*v);
    }
    Bins { upper: cuts, lower, index }
}

struct Grower<'a> {
    bins: &'a [Bins],
    cfg: &'a BoostConfig,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<usize>, residual: &[f64], depth: usize) -> usize {
        let id = self.nodes.len();
        let sum: f64 = rows.iter().map(|&i| residual[i]).sum();
        let n = rows.len() as f64;
        self.nodes.push(TreeNode::Leaf { value: self.cfg.learning_rate * sum / n.max(1.0) });
        if depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_samples_leaf {
            return id;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        let base = sum * sum / n;
        for (f, bins) in self.bins.iter().enumerate() {
            let nb = bins.upper.len();
            if nb < 2 {
                continue;
            }
            let mut hs = vec![0.0; nb];
            let mut hc = vec![0usize; nb];
            for &i in &rows {
                let b = bins.index[i] as usize;
                hs[b] += residual[i];
                hc[b] += 1;
            }
            let (mut ls, mut lc) = (0.0, 0usize);
            for b in 0..nb - 1 {
                ls += hs[b];
                lc += hc[b];
                let rc = rows.len() - lc;
                if lc < self.cfg.min_samples_leaf || rc < self.cfg.min_samples_leaf || hc[b] == 0 {
                    continue;
                }
                let rs = sum - ls;
                let gain = ls * ls / lc as f64 + rs * rs / rc as f64 - base;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else { return id };
        let bins = &self.bins[f];
        // Next non-empty bin above b among all samples.
        let next = (b + 1..bins.upper.len()).find(|&k| bins.lower[k].is_finite()).unwrap_or(b + 1);
        let threshold = 0.5 * (bins.upper[b] + bins.lower[next]);
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| bins.index[i] as usize <= b);
        let left = self.grow(l, residual, depth + 1);
        let right = self.grow(r, residual, depth + 1);
        self.nodes[id] = TreeNode::Split { feature: f, threshold, left, right };
        id
    }
}

/// Gradient boosting of depth-limited regression trees on squared loss.
pub fn fit_boosted(
    x: &[Vec<f64>],
    y: &[f64],
    inputs: &[FeatureId],
    cfg: &BoostConfig,
) -> Result<TreeEnsembleRegressor> {
    cfg.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Training("regressor inputs and targets must be non-empty and aligned".into()));
    }
    if x.iter().any(|r| r.len() != inputs.len()) {
        return Err(Error::DimensionMismatch { expected: inputs.len(), got: x[0].len() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite regression target".into()));
    }
    if y.iter().all(|&v| v == y[0]) {
        log::warn!("constant regression target {}; single-leaf model", y[0]);
        return Ok(TreeEnsembleRegressor {
            inputs: inputs.to_vec(),
            base: y[0],
            trees: vec![RegressionTree::leaf(0.0)],
        });
    }
    let bins: Vec<Bins> =
        (0..inputs.len()).map(|j| bin_feature(&x.iter().map(|r| r[j]).collect::<Vec<_>>(), cfg.max_bins)).collect();
    let base = y.iter().sum::<f64>() / y.len() as f64;
    let mut pred = vec![base; y.len()];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for _ in 0..cfg.n_trees {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let mut g = Grower { bins: &bins, cfg, nodes: Vec::new() };
        g.grow((0..y.len()).collect(), &residual, 0);
        let tree = RegressionTree { nodes: g.nodes };
        for (p, r) in pred.iter_mut().zip(x) {
            *p += tree.eval(r);
        }
        trees.push(tree);
    }
    let model = TreeEnsembleRegressor { inputs: inputs.to_vec(), base, trees };
    model.validate()?;
    Ok(model)
}

pub fn rmse(model: &TreeEnsembleRegressor, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (r, t) in x.iter().zip(y) {
        s += (model.predict(r)? - t).powi(2);
    }
    Ok((s / x.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorReport {
    pub target: FeatureId,
    pub train_rmse: f64,
    pub heldout_rmse: f64,
    pub trees: usize,
    pub leaves: usize,
}

fn design(data: &[FeatureVector], inputs: &[FeatureId], curve: &PowerCurve) -> Result<Vec<Vec<f64>>> {
    data.iter().map(|x| x.inputs(inputs, curve)).collect()
}

/// Fits a surrogate for `target` and scores it on `heldout`.
pub fn train_regressor(
    train: &[FeatureVector],
    heldout: &[FeatureVector],
    target: FeatureId,
    inputs: &[FeatureId],
    curve: &PowerCurve,
    cfg: &BoostConfig,
) -> Result<(TreeEnsembleRegressor, RegressorReport)> {
    if inputs.contains(&target) {
        return Err(Error::InvalidConfig(format!("{target} cannot be its own input")));
    }
    let value =
        |x: &FeatureVector| x.get(target).ok_or_else(|| Error::InvalidConfig(format!("{target} is not stored")));
    let x = design(train, inputs, curve)?;
    let y: Vec<f64> = train.iter().map(value).collect::<Result<_>>()?;
    let model = fit_boosted(&x, &y, inputs, cfg)?;
    let xh = design(heldout, inputs, curve)?;
    let yh: Vec<f64> = heldout.iter().map(value).collect::<Result<_>>()?;
    let report = RegressorReport {
        target,
        train_rmse: rmse(&model, &x, &y)?,
        heldout_rmse: rmse(&model, &xh, &yh)?,
        trees: model.trees.len(),
        leaves: model.leaf_count(),
    };
    Ok((model, report))
}

// ------------------------------------------------------------- pipeline

/// Everything the counterfactual stage needs, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub classifier: MlpClassifier,
    pub n: TreeEnsembleRegressor,
    pub t: TreeEnsembleRegressor,
    pub assets: AssetConfig,
}

impl ModelBundle {
    pub fn models(&self) -> Models {
        Models { classifier: self.classifier.clone(), n: self.n.clone(), t: self.t.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.models().validate()?;
        self.assets.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Share of anomalies before the train/test cutoff.
    pub q: f64,
    /// Faults per good sample in the classifier training subset.
    pub ratio: f64,
    pub seed: u64,
    /// Derive bounds and normalization scales from the training split
    /// instead of the whole dataset.
    pub stats_from_train: bool,
    pub mlp: MlpTrainConfig,
    pub boost: BoostConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            q: 0.7,
            ratio: 1.0,
            seed: 0,
            stats_from_train: false,
            mlp: MlpTrainConfig::default(),
            boost: BoostConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    #[serde(with = "crate::schema::timestamp_serde")]
    pub cutoff: NaiveDateTime,
    pub train_size: usize,
    pub test_size: usize,
    pub train_anomalies: usize,
    pub test_anomalies: usize,
    pub subset_size: usize,
    pub selection: Selection,
    pub classifier: TrainReport,
    pub epsilon: f64,
    pub regressors: Vec<RegressorReport>,
}

/// Split, sample, train all three models and evaluate on the test side.
pub fn train_all(
    data: &[FeatureVector],
    curve: &PowerCurve,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainingSummary)> {
    let split = temporal_split(data, cfg.q)?;
    let subset = undersample(&split.train, &SamplerSpec { ratio: cfg.ratio, seed: cfg.seed })?;
    let x = design(&subset, &CLASSIFIER_INPUTS, curve)?;
    let y: Vec<u8> = subset.iter().map(|s| u8::from(s.is_anomalous())).collect();
    let mlp_cfg = MlpTrainConfig { seed: cfg.seed, ..cfg.mlp.clone() };
    let (classifier, selection) = train_mlp(&x, &y, &CLASSIFIER_INPUTS, &mlp_cfg)?;
    let report = TrainReport::evaluate(&classifier, &split.test, curve)?;

    let good = |d: &[FeatureVector]| d.iter().filter(|x| !x.is_anomalous()).cloned().collect::<Vec<_>>();
    let (good_train, good_test) = (good(&split.train), good(&split.test));
    let (n, n_report) = train_regressor(&good_train, &good_test, FeatureId::TN, &N_INPUTS, curve, &cfg.boost)?;
    let (t, t_report) = train_regressor(&good_train, &good_test, FeatureId::TT, &T_INPUTS, curve, &cfg.boost)?;
    let assets = AssetConfig::from_dataset(if cfg.stats_from_train { &split.train } else { data }, curve.clone())?;

    let count = |d: &[FeatureVector]| d.iter().filter(|x| x.is_anomalous()).count();
    let summary = TrainingSummary {
        cutoff: split.cutoff,
        train_size: split.train.len(),
        test_size: split.test.len(),
        train_anomalies: count(&split.train),
        test_anomalies: count(&split.test),
        subset_size: subset.len(),
        selection,
        epsilon: classifier.epsilon,
        classifier: report,
        regressors: vec![n_report, t_report],
    };
    let bundle = ModelBundle { classifier, n, t, assets };
    bundle.validate()?;
    Ok((bundle, summary))
}
