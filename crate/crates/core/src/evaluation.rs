//! Linear-probe evaluation of feature tables.
//!
//! Stratified k-fold cross validation around a linear SVM whose `C` is
//! chosen on an inner split of each training fold. Features are z-scored
//! with training-fold statistics only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radiomics::{FeatureSet, FeatureTable};
use crate::rng;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const SVM_MAX_ITERATIONS: usize = 200_000;
pub const SVM_TOLERANCE: f64 = 1e-6;
pub const VALIDATION_FRACTION: f64 = 0.2;

fn n_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

fn class_members(labels: &[usize], idx: &[usize]) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); n_classes(labels)];
    for &i in idx {
        by[labels[i]].push(i);
    }
    by
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub seed: u64,
    pub test: Vec<Vec<usize>>,
    pub train: Vec<Vec<usize>>,
}

/// Each class is shuffled and dealt round-robin over the folds, starting
/// where the previous class stopped so fold sizes stay balanced.
pub fn stratified_kfold(labels: &[usize], folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let by = class_members(labels, &all);
    if let Some((c, m)) = by.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() < folds) {
        return Err(Error::Config(format!(
            "class {c} has {} samples, fewer than the {folds} folds",
            m.len()
        )));
    }
    let mut test = vec![Vec::new(); folds];
    let mut offset = 0;
    for (c, members) in by.iter().enumerate() {
        let mut m = members.clone();
        m.shuffle(&mut rng::stream(seed, rng::STREAM_FOLDS, &[0, c as u64]));
        for (p, i) in m.into_iter().enumerate() {
            test[(p + offset) % folds].push(i);
        }
        offset = (offset + members.len()) % folds;
    }
    for t in &mut test {
        t.sort_unstable();
    }
    let train = test
        .iter()
        .map(|t| all.iter().copied().filter(|i| t.binary_search(i).is_err()).collect())
        .collect();
    Ok(FoldPlan { folds, seed, test, train })
}

/// Stratified subset keeping `fraction` of each class (at least one).
pub fn stratified_subsample(labels: &[usize], idx: &[usize], fraction: f64, seed: u64, path: &[u64]) -> Vec<usize> {
    let mut out = Vec::new();
    for (c, members) in class_members(labels, idx).into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let keep = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
        let mut m = members;
        let mut p = path.to_vec();
        p.push(c as u64);
        m.shuffle(&mut rng::stream(seed, rng::STREAM_FOLDS, &p));
        out.extend_from_slice(&m[..keep]);
    }
    out.sort_unstable();
    out
}

/// Inner `(fit, validation)` split of a training fold, about 20% per class
/// held out while leaving each class at least one fitting sample.
pub fn inner_split(labels: &[usize], train: &[usize], seed: u64, fold: usize) -> (Vec<usize>, Vec<usize>) {
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for (c, members) in class_members(labels, train).into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let hold = if n < 2 { 0 } else { ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n - 1) };
        let mut m = members;
        m.shuffle(&mut rng::stream(seed, rng::STREAM_FOLDS, &[1, fold as u64, c as u64]));
        val.extend_from_slice(&m[..hold]);
        fit.extend_from_slice(&m[hold..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

/// Column means and standard deviations of the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidArgument("cannot standardize zero rows".into()));
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        // constant training columns map to zero
        let std = var.iter().map(|v| if *v > 0.0 { (v / n).sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// `w·x + b` for one class against the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub w: Vec<f64>,
    pub b: f64,
    pub objective: f64,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }
}

/// `Σ max(0, 1 − yᵢ(sᵢ + b))`.
fn hinge_sum(scores: &[f64], y: &[f64], b: f64) -> f64 {
    scores.iter().zip(y).map(|(s, y)| (1.0 - y * (s + b)).max(0.0)).sum()
}

/// Exact minimizer over `b` of the hinge sum; the midpoint of the flat
/// stretch when the minimum is not unique.
fn optimal_bias(scores: &[f64], y: &[f64]) -> f64 {
    // each term is flat beyond its breakpoint and has slope ∓1 before/after it
    let mut bp: Vec<f64> = scores.iter().zip(y).map(|(s, y)| y - s).collect();
    bp.sort_by(f64::total_cmp);
    let mut slope = -(y.iter().filter(|v| **v > 0.0).count() as i64);
    for k in 0..bp.len() {
        slope += 1;
        if slope > 0 {
            return bp[k];
        }
        if slope == 0 {
            return match bp.get(k + 1) {
                Some(next) => 0.5 * (bp[k] + next),
                None => bp[k],
            };
        }
    }
    bp.last().copied().unwrap_or(0.0)
}

/// Minimizes `½‖w‖² + C Σ max(0, 1 − yᵢ(w·xᵢ + b))` for `yᵢ ∈ {±1}` by
/// sequential minimal optimization on the dual with second-order working
/// set selection. Stops when the maximal KKT violation drops below
/// [`SVM_TOLERANCE`] or after `max_iterations` pair updates; `b` is then the
/// exact hinge minimizer for the final `w`.
pub fn train_binary_svm(x: &[Vec<f64>], y: &[f64], c: f64, max_iterations: usize) -> Result<BinarySvm> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("{} rows for {} targets", x.len(), y.len())));
    }
    if !(y.iter().any(|v| *v > 0.0) && y.iter().any(|v| *v < 0.0)) {
        return Err(Error::InvalidArgument("SVM training set has a single class".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("SVM C must be positive, got {c}")));
    }
    let n = x.len();
    let d = x[0].len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let k: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(&x[i], &x[j])).collect()).collect();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);
    for _ in 0..max_iterations {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            let diff = gmax - v;
            if diff > 0.0 {
                let quad = (k[i][i] + k[t][t] - 2.0 * k[i][t]).max(1e-12);
                let gain = -diff * diff / quad;
                if gain < best {
                    best = gain;
                    j = t;
                }
            }
        }
        if j == usize::MAX || gmax - gmin < SVM_TOLERANCE {
            break;
        }
        let (ai, aj) = (alpha[i], alpha[j]);
        let quad = (k[i][i] + k[j][j] - 2.0 * k[i][j]).max(1e-12);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else {
                if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k[t][i] * di + y[j] * k[t][j] * dj);
        }
    }
    let mut w = vec![0.0; d];
    for (a, (row, yi)) in alpha.iter().zip(x.iter().zip(y)) {
        if *a != 0.0 {
            w.iter_mut().zip(row).for_each(|(w, v)| *w += a * yi * v);
        }
    }
    let scores: Vec<f64> = x.iter().map(|row| dot(&w, row)).collect();
    let b = optimal_bias(&scores, y);
    let objective = 0.5 * dot(&w, &w) + c * hinge_sum(&scores, y, b);
    if !objective.is_finite() {
        return Err(Error::NonFinite { layer: "svm".into() });
    }
    Ok(BinarySvm { w, b, objective })
}

/// Binary problems use one machine for the positive class; more classes
/// use one-vs-rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub n_classes: usize,
    pub positive_class: usize,
    pub machines: Vec<BinarySvm>,
}

impl LinearSvm {
    pub fn train(x: &[Vec<f64>], labels: &[usize], n_classes: usize, positive_class: usize, c: f64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument("SVM needs at least two classes".into()));
        }
        let target = |k: usize| -> Vec<f64> { labels.iter().map(|l| if *l == k { 1.0 } else { -1.0 }).collect() };
        let machines = if n_classes == 2 {
            vec![train_binary_svm(x, &target(positive_class), c, SVM_MAX_ITERATIONS)?]
        } else {
            (0..n_classes)
                .map(|k| train_binary_svm(x, &target(k), c, SVM_MAX_ITERATIONS))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            n_classes,
            positive_class,
            machines,
        })
    }

    /// One score per class.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        if self.n_classes == 2 {
            let s = self.machines[0].decision(x);
            let mut out = vec![-s; 2];
            out[self.positive_class] = s;
            out
        } else {
            self.machines.iter().map(|m| m.decision(x)).collect()
        }
    }
}

/// Highest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Rank-statistic AUC with tied scores counted one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    let np = positive.iter().filter(|p| **p).count() as f64;
    let nn = positive.len() as f64 - np;
    if np == 0.0 || nn == 0.0 {
        return Err(Error::InvalidArgument("AUC needs both classes in the truth".into()));
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub class_recall: Vec<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub minor_class_recall: f64,
    pub auc: f64,
}

/// Metrics from per-class scores. Sensitivity is the recall of
/// `positive_class` and specificity the recall of the other class (binary
/// only); AUC is binary or macro one-vs-rest.
pub fn compute_metrics(
    scores: &[Vec<f64>],
    predictions: &[usize],
    truth: &[usize],
    n_classes: usize,
    positive_class: usize,
    minor_class: usize,
) -> Result<FoldMetrics> {
    if scores.len() != truth.len() || predictions.len() != truth.len() {
        return Err(Error::Shape("scores, predictions and truth differ in length".into()));
    }
    if positive_class >= n_classes || minor_class >= n_classes {
        return Err(Error::InvalidArgument("designated class out of range".into()));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (t, p) in truth.iter().zip(predictions) {
        if *t >= n_classes || *p >= n_classes {
            return Err(Error::InvalidArgument(format!("class {t} or {p} out of range")));
        }
        confusion[*t][*p] += 1;
    }
    let recall = |k: usize| {
        let row: usize = confusion[k].iter().sum();
        if row == 0 { f64::NAN } else { confusion[k][k] as f64 / row as f64 }
    };
    let class_recall: Vec<f64> = (0..n_classes).map(recall).collect();
    let present: Vec<f64> = class_recall.iter().copied().filter(|r| !r.is_nan()).collect();
    let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
    let (sensitivity, specificity) = if n_classes == 2 {
        (Some(recall(positive_class)), Some(recall(1 - positive_class)))
    } else {
        (None, None)
    };
    let auc = if n_classes == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[positive_class]).collect();
        let p: Vec<bool> = truth.iter().map(|t| *t == positive_class).collect();
        self::auc(&s, &p)?
    } else {
        let mut sum = 0.0;
        for k in 0..n_classes {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let p: Vec<bool> = truth.iter().map(|t| *t == k).collect();
            sum += self::auc(&s, &p)?;
        }
        sum / n_classes as f64
    };
    Ok(FoldMetrics {
        accuracy: correct as f64 / truth.len().max(1) as f64,
        balanced_accuracy: present.iter().sum::<f64>() / present.len().max(1) as f64,
        minor_class_recall: recall(minor_class),
        class_recall,
        sensitivity,
        specificity,
        confusion,
        auc,
    })
}

/// Balanced accuracy of a prediction set, used for choosing `C`.
pub fn balanced_accuracy(predictions: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut hit = vec![0usize; n_classes];
    let mut tot = vec![0usize; n_classes];
    for (p, t) in predictions.iter().zip(truth) {
        tot[*t] += 1;
        if p == t {
            hit[*t] += 1;
        }
    }
    let r: Vec<f64> = (0..n_classes).filter(|k| tot[*k] > 0).map(|k| hit[k] as f64 / tot[k] as f64).collect();
    r.iter().sum::<f64>() / r.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub folds: usize,
    /// Fraction of each class's training labels that is used.
    pub label_budget: f64,
    pub c_grid: Vec<f64>,
    pub seed: u64,
    /// Binary only; defaults to the most frequent class.
    pub positive_class: Option<usize>,
    /// Defaults to the least frequent class.
    pub minor_class: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            label_budget: 1.0,
            c_grid: DEFAULT_C_GRID.to_vec(),
            seed: 0,
            positive_class: None,
            minor_class: None,
        }
    }
}

/// Most frequent class (`largest = true`) or least frequent present class,
/// lowest index on ties.
pub fn extreme_class(labels: &[usize], largest: bool) -> usize {
    let mut counts = vec![0usize; n_classes(labels)];
    labels.iter().for_each(|l| counts[*l] += 1);
    let mut best = 0;
    for (k, c) in counts.iter().enumerate() {
        let better = if largest { *c > counts[best] } else { *c > 0 && (counts[best] == 0 || *c < counts[best]) };
        if better {
            best = k;
        }
    }
    best
}

/// A trained probe for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldModel {
    pub c: f64,
    pub standardizer: Standardizer,
    pub svm: LinearSvm,
    pub train_size: usize,
    pub train_class_counts: Vec<usize>,
}

fn rows<'a>(x: &'a [Vec<f64>], idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|i| x[*i].as_slice()).collect()
}

fn fit_svm(x: &[Vec<f64>], labels: &[usize], idx: &[usize], k: usize, pos: usize, c: f64) -> Result<(Standardizer, LinearSvm)> {
    let st = Standardizer::fit(&rows(x, idx))?;
    let z: Vec<Vec<f64>> = idx.iter().map(|i| st.apply(&x[*i])).collect();
    let y: Vec<usize> = idx.iter().map(|i| labels[*i]).collect();
    Ok((st.clone(), LinearSvm::train(&z, &y, k, pos, c)?))
}

/// Chooses `C` on the inner split of `train` and refits on all of `train`.
/// Only rows listed in `train` are read.
pub fn fit_fold(
    x: &[Vec<f64>],
    labels: &[usize],
    train: &[usize],
    n_classes: usize,
    positive_class: usize,
    config: &ProtocolConfig,
    fold: usize,
) -> Result<FoldModel> {
    if config.c_grid.is_empty() {
        return Err(Error::Config("empty C grid".into()));
    }
    let (fit, val) = inner_split(labels, train, config.seed, fold);
    let mut best = (f64::NEG_INFINITY, config.c_grid[0]);
    for &c in &config.c_grid {
        let (st, svm) = fit_svm(x, labels, &fit, n_classes, positive_class, c)?;
        let pred: Vec<usize> = val.iter().map(|i| argmax(&svm.scores(&st.apply(&x[*i])))).collect();
        let truth: Vec<usize> = val.iter().map(|i| labels[*i]).collect();
        let score = balanced_accuracy(&pred, &truth, n_classes);
        if score > best.0 {
            best = (score, c);
        }
    }
    let (standardizer, svm) = fit_svm(x, labels, train, n_classes, positive_class, best.1)?;
    let mut counts = vec![0usize; n_classes];
    train.iter().for_each(|i| counts[labels[*i]] += 1);
    Ok(FoldModel {
        c: best.1,
        standardizer,
        svm,
        train_size: train.len(),
        train_class_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub c: f64,
    pub train_size: usize,
    pub train_class_counts: Vec<usize>,
    pub test_size: usize,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub class_recall: Vec<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub minor_class_recall: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub feature_set: FeatureSet,
    pub n_features: usize,
    pub n_classes: usize,
    pub positive_class: usize,
    pub minor_class: usize,
    pub config: ProtocolConfig,
    pub folds: Vec<FoldReport>,
    pub mean: MeanMetrics,
}

pub const METRICS_FORMAT: &str = "siam3d-metrics";

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Stratified cross validation of one feature set.
pub fn run_protocol(table: &FeatureTable, set: FeatureSet, config: &ProtocolConfig) -> Result<MetricsReport> {
    if !(config.label_budget > 0.0 && config.label_budget <= 1.0) {
        return Err(Error::Config(format!("label budget must be in (0, 1], got {}", config.label_budget)));
    }
    let x = table.matrix(set);
    let labels = table.labels();
    let k = n_classes(&labels);
    if k < 2 {
        return Err(Error::Config("evaluation needs at least two classes".into()));
    }
    if x.first().is_none_or(|r| r.is_empty()) {
        return Err(Error::Config(format!("feature set {} has no columns", set.as_str())));
    }
    let positive = config.positive_class.unwrap_or_else(|| extreme_class(&labels, true));
    let minor = config.minor_class.unwrap_or_else(|| extreme_class(&labels, false));
    let plan = stratified_kfold(&labels, config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(plan.folds);
    for f in 0..plan.folds {
        let train = if config.label_budget < 1.0 {
            stratified_subsample(&labels, &plan.train[f], config.label_budget, config.seed, &[2, f as u64])
        } else {
            plan.train[f].clone()
        };
        let model = fit_fold(&x, &labels, &train, k, positive, config, f)?;
        let test = &plan.test[f];
        let scores: Vec<Vec<f64>> = test.iter().map(|i| model.svm.scores(&model.standardizer.apply(&x[*i]))).collect();
        let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let truth: Vec<usize> = test.iter().map(|i| labels[*i]).collect();
        folds.push(FoldReport {
            fold: f,
            c: model.c,
            train_size: model.train_size,
            train_class_counts: model.train_class_counts,
            test_size: test.len(),
            metrics: compute_metrics(&scores, &pred, &truth, k, positive, minor)?,
        });
    }
    let m = |f: fn(&FoldMetrics) -> f64| mean_of(folds.iter().map(|r| f(&r.metrics)));
    let opt = |f: fn(&FoldMetrics) -> Option<f64>| -> Option<f64> {
        folds.iter().map(|r| f(&r.metrics)).collect::<Option<Vec<f64>>>().map(|v| mean_of(v.into_iter()))
    };
    let mean = MeanMetrics {
        accuracy: m(|f| f.accuracy),
        balanced_accuracy: m(|f| f.balanced_accuracy),
        class_recall: (0..k).map(|c| mean_of(folds.iter().map(|r| r.metrics.class_recall[c]))).collect(),
        sensitivity: opt(|f| f.sensitivity),
        specificity: opt(|f| f.specificity),
        minor_class_recall: m(|f| f.minor_class_recall),
        auc: m(|f| f.auc),
    };
    Ok(MetricsReport {
        format: METRICS_FORMAT.into(),
        version: 1,
        feature_set: set,
        n_features: x[0].len(),
        n_classes: k,
        positive_class: positive,
        minor_class: minor,
        config: config.clone(),
        folds,
        mean,
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per fold plus a final `mean` row.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from("fold,c,train_size,test_size,accuracy,balanced_accuracy,sensitivity,specificity,minor_class_recall,auc\n");
    for f in &report.folds {
        let m = &f.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            f.fold,
            f.c,
            f.train_size,
            f.test_size,
            m.accuracy,
            m.balanced_accuracy,
            opt_cell(m.sensitivity),
            opt_cell(m.specificity),
            m.minor_class_recall,
            m.auc
        );
    }
    let m = &report.mean;
    let _ = writeln!(
        s,
        "mean,,,,{},{},{},{},{},{}",
        m.accuracy,
        m.balanced_accuracy,
        opt_cell(m.sensitivity),
        opt_cell(m.specificity),
        m.minor_class_recall,
        m.auc
    );
    s
}

pub fn write_metrics(json_path: &Path, csv_path: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(json_path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(json_path, e))?;
    fs::write(csv_path, metrics_csv(report)).map_err(|e| Error::io(csv_path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    /// Indices of the columns that were kept.
    pub kept: Vec<usize>,
    /// Constant columns, which have no defined correlation.
    pub dropped: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
}

impl PearsonResult {
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.matrix.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.matrix[i][j]).collect()
    }
}

/// `r = cov(xᵢ, xⱼ) / (σᵢ σⱼ)` between all non-constant columns of `N×d` rows.
pub fn pearson_matrix(x: &[Vec<f64>]) -> Result<PearsonResult> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!("correlation needs at least 2 rows, got {}", x.len())));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let mut centered: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let col: Vec<f64> = x.iter().map(|r| r[j] - mean).collect();
        if col.iter().all(|v| *v == 0.0) {
            dropped.push(j);
        } else {
            centered.push(col);
            kept.push(j);
        }
    }
    let ss: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).collect();
    let m = centered.len();
    let mut matrix = vec![vec![0.0; m]; m];
    for i in 0..m {
        matrix[i][i] = 1.0;
        for j in i + 1..m {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(PearsonResult { kept, dropped, matrix })
}

/// Density histogram of coefficients over `[−1, 1]` as CSV
/// (`bin_lo,bin_hi,count,density`).
pub fn coefficient_histogram_csv(coefficients: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for r in coefficients {
        counts[(((r + 1.0) / width) as usize).min(bins - 1)] += 1;
    }
    let total = coefficients.len().max(1) as f64;
    let mut s = String::from("bin_lo,bin_hi,count,density\n");
    for (b, c) in counts.iter().enumerate() {
        let lo = -1.0 + b as f64 * width;
        let _ = writeln!(s, "{},{},{},{}", lo, lo + width, c, *c as f64 / (total * width));
    }
    s
}
