//! Siamese pretraining with a symmetrized negative-cosine objective.
//!
//! Each step snapshots the active encoder into a frozen copy, encodes two
//! augmented views with both, and back-propagates only through the
//! predictor outputs `t = p(E_a(x))`. The frozen targets `r = E_f(x)` are
//! constants of the step.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{AdamConfig, AdamState, Mode, Tensor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `S = −(t/‖t‖)·(r/‖r‖)` and its gradient with respect to `t`; `r` is a constant.
pub fn negative_cosine(t: &[f64], r: &[f64]) -> Result<(f64, Vec<f64>)> {
    if t.len() != r.len() {
        return shape_err(format!("cosine of vectors of length {} and {}", t.len(), r.len()));
    }
    let (nt, nr) = (norm(t), norm(r));
    if nt == 0.0 || nr == 0.0 || !nt.is_finite() || !nr.is_finite() {
        return Err(Error::InvalidArgument("cosine similarity of a zero-norm vector".into()));
    }
    let cos = dot(t, r) / (nt * nr);
    let s = -cos.clamp(-1.0, 1.0);
    // dS/dt = −(r̂ − cos·t̂)/‖t‖
    let grad = t
        .iter()
        .zip(r)
        .map(|(ti, ri)| -(ri / nr - cos * ti / nt) / nt)
        .collect();
    Ok((s, grad))
}

/// Weighted symmetrized objective over a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    /// Unweighted `ℓ_i` per sample.
    pub per_sample: Vec<f64>,
    pub grad_t1: Vec<Vec<f64>>,
    pub grad_t2: Vec<Vec<f64>>,
}

/// `Σ w_i (½S(t1_i, r2_i) + ½S(t2_i, r1_i)) / Σ w_i`, with gradients for the `t` rows.
pub fn symmetrized_objective(
    t1: &[Vec<f64>],
    t2: &[Vec<f64>],
    r1: &[Vec<f64>],
    r2: &[Vec<f64>],
    weights: &[f64],
) -> Result<PairLoss> {
    let n = weights.len();
    if t1.len() != n || t2.len() != n || r1.len() != n || r2.len() != n {
        return shape_err(format!("pair loss: {n} weights for rows {}/{}/{}/{}", t1.len(), t2.len(), r1.len(), r2.len()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("sample weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("sample weights are all zero".into()));
    }
    let mut loss = 0.0;
    let mut per_sample = Vec::with_capacity(n);
    let mut grad_t1 = Vec::with_capacity(n);
    let mut grad_t2 = Vec::with_capacity(n);
    for i in 0..n {
        let (s12, g1) = negative_cosine(&t1[i], &r2[i])?;
        let (s21, g2) = negative_cosine(&t2[i], &r1[i])?;
        let l = 0.5 * s12 + 0.5 * s21;
        per_sample.push(l);
        loss += weights[i] * l;
        let c = 0.5 * weights[i] / total;
        grad_t1.push(g1.into_iter().map(|g| c * g).collect());
        grad_t2.push(g2.into_iter().map(|g| c * g).collect());
    }
    Ok(PairLoss {
        loss: loss / total,
        per_sample,
        grad_t1,
        grad_t2,
    })
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [n, _] = t.dims2("representation batch")?;
    Ok((0..n).map(|i| t.row(i).iter().map(|v| *v as f64).collect()).collect())
}

fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flat_map(|r| r.iter().map(|v| *v as f32)).collect();
    Tensor::new(vec![rows.len(), d], data)
}

/// Mean over dimensions of the population standard deviation of the
/// L2-normalized rows. Zero rows stay zero; fewer than two rows give 0.
pub fn collapse_metric(reps: &Tensor) -> f64 {
    let Ok([n, d]) = reps.dims2("representations") else {
        return 0.0;
    };
    if n < 2 || d == 0 {
        return 0.0;
    }
    let normalized: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r: Vec<f64> = reps.row(i).iter().map(|v| *v as f64).collect();
            let nr = norm(&r);
            if nr > 0.0 {
                r.iter().map(|v| v / nr).collect()
            } else {
                r
            }
        })
        .collect();
    let mut acc = 0.0;
    for j in 0..d {
        let mean = normalized.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = normalized.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        acc += var.sqrt();
    }
    acc / d as f64
}

/// Two views of the same `N` source volumes plus per-sample loss weights.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub weights: Vec<f64>,
}

impl PairBatch {
    pub fn new(x1: Tensor, x2: Tensor, weights: Vec<f64>) -> Result<Self> {
        if x1.shape() != x2.shape() {
            return shape_err(format!("views differ in shape: {:?} vs {:?}", x1.shape(), x2.shape()));
        }
        let n = x1.shape().first().copied().unwrap_or(0);
        if weights.len() != n {
            return shape_err(format!("{} weights for a batch of {n}", weights.len()));
        }
        Ok(Self { x1, x2, weights })
    }

    pub fn unweighted(x1: Tensor, x2: Tensor) -> Result<Self> {
        let n = x1.shape().first().copied().unwrap_or(0);
        Self::new(x1, x2, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiamConfig {
    pub adam: AdamConfig,
    /// Batch-norm mode of the frozen branch.
    pub frozen_bn_mode: Mode,
}

impl Default for SiamConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            frozen_bn_mode: Mode::Train,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub collapse_metric: f64,
    pub lr: f32,
    pub weights_min: f64,
    pub weights_max: f64,
}

/// Everything a loss evaluation produced, before the optimizer runs.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub objective: PairLoss,
    pub z1: Tensor,
    pub z2: Tensor,
    pub r1: Tensor,
    pub r2: Tensor,
}

#[derive(Debug, Clone)]
pub struct SiamStep {
    pub config: SiamConfig,
    pub active: EncoderState,
    pub frozen: EncoderState,
    pub optimizer: AdamState,
    pub step: u64,
}

impl SiamStep {
    pub fn new(encoder: EncoderState, config: SiamConfig) -> Self {
        Self {
            config,
            frozen: encoder.clone(),
            active: encoder,
            optimizer: AdamState::new(config.adam),
            step: 0,
        }
    }

    pub fn sync_frozen(&mut self) {
        self.frozen.clone_from(&self.active);
        self.frozen.zero_grad();
    }

    fn frozen_targets(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        // With train-mode statistics and identical parameters the frozen
        // forward is bitwise the active one.
        if self.config.frozen_bn_mode == Mode::Train && self.frozen.same_parameters(&self.active) {
            return Ok(z.clone());
        }
        Ok(self.frozen.forward(x, self.config.frozen_bn_mode)?.0)
    }

    /// Evaluates the loss and accumulates gradients into the active encoder
    /// only. Running statistics are updated from both views.
    pub fn symmetrized_loss(&mut self, pair: &PairBatch) -> Result<LossEvaluation> {
        if pair.x1.shape() != pair.x2.shape() || pair.weights.len() != pair.x1.shape().first().copied().unwrap_or(0) {
            return shape_err("inconsistent pair batch");
        }
        let (z1, enc1) = self.active.forward(&pair.x1, Mode::Train)?;
        let (z2, enc2) = self.active.forward(&pair.x2, Mode::Train)?;
        let (t1, pred1) = self.active.predict_forward(&z1, Mode::Train)?;
        let (t2, pred2) = self.active.predict_forward(&z2, Mode::Train)?;
        let r1 = self.frozen_targets(&pair.x1, &z1)?;
        let r2 = self.frozen_targets(&pair.x2, &z2)?;

        let objective = symmetrized_objective(&rows(&t1)?, &rows(&t2)?, &rows(&r1)?, &rows(&r2)?, &pair.weights)?;
        if !objective.loss.is_finite() {
            return Err(Error::NonFinite { layer: "loss".into() });
        }
        let g1 = self.active.predict_backward(&pred1, &to_tensor(&objective.grad_t1)?)?;
        let g2 = self.active.predict_backward(&pred2, &to_tensor(&objective.grad_t2)?)?;
        self.active.backward(&enc1, &g1)?;
        self.active.backward(&enc2, &g2)?;
        self.active.absorb(&enc1);
        self.active.absorb(&enc2);
        self.active.absorb_predictor(&pred1);
        self.active.absorb_predictor(&pred2);
        Ok(LossEvaluation {
            objective,
            z1,
            z2,
            r1,
            r2,
        })
    }

    /// Sync, forward, backward and one Adam update.
    pub fn train_step(&mut self, pair: &PairBatch) -> Result<StepRecord> {
        let step = self.step;
        let wrap = |e: Error| Error::Step {
            step,
            source: Box::new(e),
        };
        self.sync_frozen();
        self.active.zero_grad();
        let eval = self.symmetrized_loss(pair).map_err(wrap)?;
        self.optimizer
            .step(&mut self.active.parameters_mut())
            .map_err(wrap)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            loss: eval.objective.loss,
            collapse_metric: collapse_metric(&eval.z1),
            lr: self.optimizer.config.lr,
            weights_min: pair.weights.iter().copied().fold(f64::INFINITY, f64::min),
            weights_max: pair.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_encoder, EncoderConfig, ScalePreset};
    use crate::tensor::gradcheck::random_tensor;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            preset: ScalePreset::Custom,
            input_extent: 8,
            in_channels: 1,
            widths: vec![2, 2, 3, 4],
            residual_blocks: 1,
            pool_kernel: 2,
            pool_stride: 2,
            hidden_dim: 12,
            representation_dim: 4,
            predictor_hidden_dim: 8,
            ..EncoderConfig::desk()
        }
    }

    fn pair(seed: u64) -> PairBatch {
        PairBatch::unweighted(random_tensor(&[3, 1, 8, 8, 8], seed), random_tensor(&[3, 1, 8, 8, 8], seed + 1)).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((negative_cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().0 + 1.0).abs() < 1e-15);
        assert_eq!(negative_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().0, 0.0);
        let s = negative_cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap().0;
        assert!((s + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(negative_cosine(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let t = [0.3, -1.2, 0.8];
        let r = [1.0, 0.5, -0.4];
        let (_, g) = negative_cosine(&t, &r).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut tp = t;
            let mut tm = t;
            tp[i] += h;
            tm[i] -= h;
            let fd = (negative_cosine(&tp, &r).unwrap().0 - negative_cosine(&tm, &r).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn scale_invariance() {
        let t = [0.3, -1.2, 0.8];
        let r = [1.0, 0.5, -0.4];
        let base = negative_cosine(&t, &r).unwrap().0;
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
            let rs: Vec<f64> = r.iter().map(|v| v * c).collect();
            assert!((negative_cosine(&ts, &r).unwrap().0 - base).abs() < 1e-14);
            assert!((negative_cosine(&t, &rs).unwrap().0 - base).abs() < 1e-14);
        }
    }

    #[test]
    fn objective_minimum_and_zero_weights() {
        let t1 = vec![vec![1.0, 2.0]];
        let t2 = vec![vec![-3.0, 1.0]];
        let r1 = vec![vec![-6.0, 2.0]];
        let r2 = vec![vec![0.5, 1.0]];
        let l = symmetrized_objective(&t1, &t2, &r1, &r2, &[1.0]).unwrap();
        assert!((l.loss + 1.0).abs() < 1e-15);
        assert!(symmetrized_objective(&t1, &t2, &r1, &r2, &[0.0]).is_err());
    }

    #[test]
    fn equal_weights_reproduce_unweighted_mean() {
        let t1 = vec![vec![1.0, 2.0], vec![0.2, -1.0], vec![3.0, 0.1]];
        let t2 = vec![vec![-1.0, 2.0], vec![0.5, 0.5], vec![1.0, 1.0]];
        let r1 = vec![vec![0.3, 0.1], vec![-1.0, 2.0], vec![0.1, 4.0]];
        let r2 = vec![vec![2.0, -2.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let a = symmetrized_objective(&t1, &t2, &r1, &r2, &[1.0; 3]).unwrap();
        let b = symmetrized_objective(&t1, &t2, &r1, &r2, &[2.5; 3]).unwrap();
        let mean = a.per_sample.iter().sum::<f64>() / 3.0;
        assert_eq!(a.loss, mean);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn swapping_views_keeps_the_loss() {
        let enc = build_encoder(&tiny(), 3).unwrap();
        let p = pair(10);
        let swapped = PairBatch::unweighted(p.x2.clone(), p.x1.clone()).unwrap();
        let mut a = SiamStep::new(enc.clone(), SiamConfig::default());
        let mut b = SiamStep::new(enc, SiamConfig::default());
        let la = a.symmetrized_loss(&p).unwrap().objective.loss;
        let lb = b.symmetrized_loss(&swapped).unwrap().objective.loss;
        assert!((la - lb).abs() < 1e-12, "{la} vs {lb}");
    }

    #[test]
    fn frozen_branch_receives_no_gradient() {
        let enc = build_encoder(&tiny(), 4).unwrap();
        let mut step = SiamStep::new(enc, SiamConfig::default());
        step.sync_frozen();
        let eval = step.symmetrized_loss(&pair(20)).unwrap();
        for (_, t, learnable) in step.frozen.tensors() {
            if learnable {
                assert!(t.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
            }
        }
        // the loss does depend on the frozen outputs
        let mut r2 = rows(&eval.r2).unwrap();
        r2[0][0] += 0.5;
        let t1 = rows(&step.active.predict_forward(&eval.z1, Mode::Train).unwrap().0).unwrap();
        let t2 = rows(&step.active.predict_forward(&eval.z2, Mode::Train).unwrap().0).unwrap();
        let r1 = rows(&eval.r1).unwrap();
        let base = symmetrized_objective(&t1, &t2, &r1, &rows(&eval.r2).unwrap(), &[1.0; 3]).unwrap();
        let moved = symmetrized_objective(&t1, &t2, &r1, &r2, &[1.0; 3]).unwrap();
        assert_ne!(base.loss, moved.loss);
    }

    #[test]
    fn eval_mode_frozen_branch_runs_separately() {
        let enc = build_encoder(&tiny(), 4).unwrap();
        let cfg = SiamConfig {
            frozen_bn_mode: Mode::Eval,
            ..SiamConfig::default()
        };
        let mut step = SiamStep::new(enc, cfg);
        let eval = step.symmetrized_loss(&pair(30)).unwrap();
        assert_ne!(eval.r1.data(), eval.z1.data());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let enc = build_encoder(&tiny(), 5).unwrap();
        let cfg = SiamConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            frozen_bn_mode: Mode::Train,
        };
        let mut step = SiamStep::new(enc.clone(), cfg);
        let p = pair(40);
        let first = step.train_step(&p).unwrap().loss;
        let second = step.train_step(&p).unwrap().loss;
        assert!(step.active.same_parameters(&enc));
        // running statistics drift but train-mode outputs use batch statistics
        assert_eq!(first, second);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let run = || {
            let mut step = SiamStep::new(build_encoder(&tiny(), 6).unwrap(), SiamConfig::default());
            let p = pair(50);
            (0..4).map(|_| step.train_step(&p).unwrap().loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_the_loss_and_stays_in_range() {
        let mut step = SiamStep::new(build_encoder(&tiny(), 7).unwrap(), SiamConfig::default());
        let p = pair(60);
        let losses: Vec<f64> = (0..40).map(|_| step.train_step(&p).unwrap().loss).collect();
        assert!(losses.iter().all(|l| (-1.0..=1.0).contains(l)));
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn step_errors_carry_the_step_index() {
        let mut step = SiamStep::new(build_encoder(&tiny(), 8).unwrap(), SiamConfig::default());
        let p = pair(70);
        step.train_step(&p).unwrap();
        let bad = PairBatch::new(p.x1.clone(), p.x2.clone(), vec![0.0; 3]).unwrap();
        match step.train_step(&bad) {
            Err(Error::Step { step, .. }) => assert_eq!(step, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collapse_metric_examples() {
        let same = Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(collapse_metric(&same), 0.0);
        let d = 5;
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let eye = Tensor::new(vec![d, d], eye).unwrap();
        // each column holds one 1 and d−1 zeros
        let p = 1.0 / d as f64;
        let expected = (p * (1.0 - p)).sqrt();
        assert!((collapse_metric(&eye) - expected).abs() < 1e-15);
        let scaled: Vec<f32> = eye.data().iter().enumerate().map(|(i, v)| v * (1 + i / d) as f32 * 3.0).collect();
        let scaled = Tensor::new(vec![d, d], scaled).unwrap();
        assert!((collapse_metric(&scaled) - expected).abs() < 1e-12);
    }
}
