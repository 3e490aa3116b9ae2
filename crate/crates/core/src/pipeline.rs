//! End-to-end runs: pretraining with a batch planner, feature extraction,
//! the evaluation protocol, and hyperparameter sweeps over them.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentPolicy};
use crate::data::{network_input, Volume};
use crate::encoder::{build_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{run_protocol, MetricsReport, ProtocolConfig};
use crate::imbalance::{BatchPlanner, ClusterDiagnostics, ImbalanceMode, PlannerConfig};
use crate::radiomics::{encode_volumes, extract_all, FeatureSet, FeatureTable};
use crate::rng;
use crate::siamese::{PairBatch, SiamConfig, SiamStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub planner: PlannerConfig,
    pub augment: AugmentPolicy,
    pub siam: SiamConfig,
    /// Length of training in planner epochs, unless `iterations` is set.
    pub epochs: usize,
    /// Total iterations including the warm-up.
    pub iterations: Option<u64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            planner: PlannerConfig::default(),
            augment: AugmentPolicy::default(),
            siam: SiamConfig::default(),
            epochs: 50,
            iterations: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn total_iterations(&self, dataset_len: usize) -> u64 {
        self.iterations
            .unwrap_or(self.epochs as u64 * dataset_len.div_ceil(self.planner.batch_size.max(1)) as u64)
    }
}

/// One JSON line of the pretraining log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub mode: ImbalanceMode,
    pub warmup: bool,
    pub loss: f64,
    pub collapse_metric: f64,
    pub lr: f32,
    pub weights_min: f64,
    pub weights_max: f64,
    pub batch: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterDiagnostics>,
}

/// Trains from a fresh encoder, or continues `resume` up to the configured
/// iteration count. `log` sees every iteration.
pub fn pretrain(
    volumes: &[Volume],
    config: &PretrainConfig,
    resume: Option<SiamStep>,
    mut log: impl FnMut(&IterationLog) -> Result<()>,
) -> Result<SiamStep> {
    config.augment.validate()?;
    let e = config.encoder.input_extent;
    if let Some(v) = volumes.iter().find(|v| v.extents != [e; 3]) {
        return Err(Error::Config(format!(
            "volume {} has extents {:?} but the encoder expects {e}³",
            v.id, v.extents
        )));
    }
    let mut trainer = match resume {
        Some(t) => t,
        None => SiamStep::new(build_encoder(&config.encoder, config.seed)?, config.siam),
    };
    let mut planner = BatchPlanner::new(config.planner.clone(), volumes.len(), config.seed)?;
    planner.iteration = trainer.step;
    let total = config.total_iterations(volumes.len());
    while trainer.step < total {
        let warmup = planner.in_warmup();
        let active = &trainer.active;
        let plan = planner.next_batch(|idx| {
            let refs: Vec<&Volume> = idx.iter().map(|i| &volumes[*i]).collect();
            encode_volumes(&refs, active)
        })?;
        let mut v1 = Vec::with_capacity(plan.indices.len());
        let mut v2 = Vec::with_capacity(plan.indices.len());
        for (p, i) in plan.indices.iter().enumerate() {
            let mut r = rng::stream(config.seed, rng::STREAM_AUGMENT, &[plan.iteration, p as u64]);
            let (a, b) = make_views(&volumes[*i], &config.augment, &mut r)?;
            v1.push(a);
            v2.push(b);
        }
        let pair = PairBatch::new(
            network_input(&v1.iter().collect::<Vec<_>>())?,
            network_input(&v2.iter().collect::<Vec<_>>())?,
            plan.weights.clone(),
        )?;
        let rec = trainer.train_step(&pair)?;
        log(&IterationLog {
            iteration: plan.iteration,
            mode: plan.mode,
            warmup,
            loss: rec.loss,
            collapse_metric: rec.collapse_metric,
            lr: rec.lr,
            weights_min: rec.weights_min,
            weights_max: rec.weights_max,
            batch: plan.indices,
            cluster: plan.diagnostics,
        })?;
    }
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub pretrain: PretrainConfig,
    pub protocol: ProtocolConfig,
    pub features: FeatureSet,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            protocol: ProtocolConfig::default(),
            features: FeatureSet::Concat,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub trainer: SiamStep,
    pub table: FeatureTable,
    pub report: MetricsReport,
}

/// Pretrain, extract and evaluate.
pub fn run_experiment(volumes: &[Volume], config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let trainer = pretrain(volumes, &config.pretrain, None, |_| Ok(()))?;
    let table = extract_all(volumes, Some(&trainer.active), config.features)?;
    let report = run_protocol(&table, config.features, &config.protocol)?;
    Ok(ExperimentOutcome { trainer, table, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Number of clusters; 0 trains without the SE module.
    K,
    /// SE batch size `m`.
    Batch,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Self::K),
            "batch" | "m" => Ok(Self::Batch),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<usize>,
    pub repeats: usize,
    /// Base experiment; repeat `r` pretrains with seed `base + r`.
    pub experiment: ExperimentConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::K,
            values: vec![0, 2, 3, 5],
            repeats: 1,
            experiment: ExperimentConfig {
                features: FeatureSet::Ssl,
                pretrain: PretrainConfig {
                    planner: PlannerConfig {
                        mode: ImbalanceMode::Se,
                        ..PlannerConfig::default()
                    },
                    ..PretrainConfig::default()
                },
                ..ExperimentConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: usize,
    pub repeat: usize,
    pub seed: u64,
    pub auc: f64,
    pub minor_class_recall: f64,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
}

/// The experiment for one sweep point.
pub fn sweep_point(config: &SweepConfig, value: usize, repeat: usize) -> ExperimentConfig {
    let mut exp = config.experiment.clone();
    exp.pretrain.seed = config.experiment.pretrain.seed + repeat as u64;
    let planner = &mut exp.pretrain.planner;
    match config.param {
        SweepParam::K if value == 0 => planner.mode = ImbalanceMode::None,
        SweepParam::K => {
            planner.mode = ImbalanceMode::Se;
            planner.k = value;
        }
        SweepParam::Batch => {
            planner.mode = ImbalanceMode::Se;
            planner.m = value;
        }
    }
    exp
}

/// Runs every `(value, repeat)` point on up to `workers` threads. Points
/// are independent, so the rows do not depend on `workers`; `on_row` sees
/// them in sweep order.
pub fn run_sweep(
    volumes: &[Volume],
    config: &SweepConfig,
    workers: usize,
    mut on_row: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if config.values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if config.repeats == 0 {
        return Err(Error::Config("sweep needs at least one repeat".into()));
    }
    let points: Vec<(usize, usize)> = config
        .values
        .iter()
        .flat_map(|&v| (0..config.repeats).map(move |r| (v, r)))
        .collect();
    let run = |&(value, repeat): &(usize, usize)| -> Result<SweepRow> {
        let exp = sweep_point(config, value, repeat);
        let out = run_experiment(volumes, &exp)?;
        let m = &out.report.mean;
        Ok(SweepRow {
            param: config.param,
            value,
            repeat,
            seed: exp.pretrain.seed,
            auc: m.auc,
            minor_class_recall: m.minor_class_recall,
            balanced_accuracy: m.balanced_accuracy,
            accuracy: m.accuracy,
        })
    };
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut rows = Vec::with_capacity(points.len());
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers.clamp(1, points.len()) {
            let tx = tx.clone();
            let (next, points, run) = (&next, &points, &run);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = points.get(i) else { break };
                let row = run(p);
                let failed = row.is_err();
                if tx.send((i, row)).is_err() || failed {
                    next.store(points.len(), Ordering::Relaxed);
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        for (i, row) in rx {
            pending.insert(i, row);
            while let Some(row) = pending.remove(&rows.len()) {
                let row = row?;
                on_row(&row)?;
                rows.push(row);
            }
        }
        Ok(())
    })?;
    if rows.len() != points.len() {
        return Err(Error::InvalidArgument("sweep stopped before every point finished".into()));
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("param,value,repeat,seed,auc,minor_class_recall,balanced_accuracy,accuracy\n");
    for r in rows {
        let p = match r.param {
            SweepParam::K => "k",
            SweepParam::Batch => "batch",
        };
        s.push_str(&format!(
            "{p},{},{},{},{},{},{},{}\n",
            r.value, r.repeat, r.seed, r.auc, r.minor_class_recall, r.balanced_accuracy, r.accuracy
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::encoder::ScalePreset;

    fn tiny_config(mode: ImbalanceMode) -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig {
                preset: ScalePreset::Custom,
                input_extent: 8,
                widths: vec![2, 2, 3, 4],
                hidden_dim: 12,
                representation_dim: 4,
                predictor_hidden_dim: 8,
                ..EncoderConfig::desk()
            },
            planner: PlannerConfig {
                mode,
                k: 2,
                q: 5,
                m: 4,
                batch_size: 4,
                ..PlannerConfig::default()
            },
            iterations: Some(8),
            seed: 3,
            ..PretrainConfig::default()
        }
    }

    fn data() -> Vec<Volume> {
        synth_dataset(&SynthSpec::new(vec![3, 1], 16, 8, 2)).unwrap().1
    }

    #[test]
    fn pretrain_logs_every_iteration() {
        let vols = data();
        let mut lines = Vec::new();
        let t = pretrain(&vols, &tiny_config(ImbalanceMode::Se), None, |l| {
            lines.push(l.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(t.step, 8);
        assert_eq!(lines.len(), 8);
        assert!(lines[..4].iter().all(|l| l.warmup && l.cluster.is_none()));
        assert!(lines[4..].iter().all(|l| !l.warmup && l.cluster.is_some()));
        assert!(lines.iter().all(|l| (-1.0..=1.0).contains(&l.loss)));
    }

    #[test]
    fn resumed_pretraining_matches() {
        let vols = data();
        let cfg = tiny_config(ImbalanceMode::Re);
        let straight = pretrain(&vols, &cfg, None, |_| Ok(())).unwrap();
        let half = pretrain(&vols, &PretrainConfig { iterations: Some(5), ..cfg.clone() }, None, |_| Ok(())).unwrap();
        let resumed = pretrain(&vols, &cfg, Some(half), |_| Ok(())).unwrap();
        assert_eq!(resumed.active, straight.active);
    }

    #[test]
    fn wrong_extent_is_a_config_error() {
        let vols = synth_dataset(&SynthSpec::new(vec![3, 1], 16, 10, 2)).unwrap().1;
        assert!(matches!(
            pretrain(&vols, &tiny_config(ImbalanceMode::None), None, |_| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sweep_points() {
        let cfg = SweepConfig::default();
        assert_eq!(sweep_point(&cfg, 0, 0).pretrain.planner.mode, ImbalanceMode::None);
        let p = sweep_point(&cfg, 5, 2);
        assert_eq!((p.pretrain.planner.k, p.pretrain.seed), (5, 2));
        let b = sweep_point(&SweepConfig { param: SweepParam::Batch, ..cfg.clone() }, 4, 0);
        assert_eq!(b.pretrain.planner.m, 4);
        assert!(run_sweep(&[], &SweepConfig { values: vec![], ..cfg }, 1, |_| Ok(())).is_err());
    }
}
