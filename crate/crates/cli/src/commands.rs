use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use siam3d::data::{load_checkpoint, load_dataset, save_checkpoint, synth_dataset, write_dataset, Checkpoint, SynthSpec};
use siam3d::encoder::{build_encoder, EncoderConfig};
use siam3d::evaluation::{coefficient_histogram_csv, pearson_matrix, run_protocol, write_metrics, ProtocolConfig};
use siam3d::imbalance::ImbalanceMode;
use siam3d::pipeline::{self as pipe, ExperimentConfig, PretrainConfig, SweepConfig, SweepParam};
use siam3d::radiomics::{extract_all, read_features, write_features, FeatureSet};
use siam3d::rng;

use crate::{EvaluateArgs, ExtractArgs, PretrainArgs, SweepArgs, SynthArgs, TrainFlags};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<siam3d::Error>() {
        Some(le) if le.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

const STREAMS: [&str; 6] = [
    rng::STREAM_DATA,
    rng::STREAM_AUGMENT,
    rng::STREAM_KMEANS,
    rng::STREAM_FOLDS,
    rng::STREAM_INIT,
    rng::STREAM_PLANNER,
];

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies the JSON file's fields on top of `base`.
fn with_overrides<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(base);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !over.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, over);
    serde_json::from_value(v).with_context(|| format!("invalid config {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn parse_ratio(s: &str) -> Result<Vec<u32>> {
    s.split(':')
        .map(|p| p.trim().parse::<u32>().with_context(|| format!("invalid ratio {s:?}")))
        .collect()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut ratio = parse_ratio(&a.ratio)?;
    let mut names = None;
    if let Some(c) = &a.classes {
        match c.parse::<usize>() {
            Ok(k) if a.ratio == "250:76" && k != 2 => ratio = vec![1; k],
            Ok(k) if k != ratio.len() => bail!("--classes {k} disagrees with ratio {}", a.ratio),
            Ok(_) => {}
            Err(_) => {
                let n: Vec<String> = c.split(',').map(|s| s.trim().to_string()).collect();
                if n.len() != ratio.len() {
                    bail!("{} class names for ratio {}", n.len(), a.ratio);
                }
                names = Some(n);
            }
        }
    }
    let count = a.count.unwrap_or_else(|| ratio.iter().map(|r| *r as usize).sum());
    let spec = SynthSpec {
        class_names: names,
        separation: a.separation,
        ..SynthSpec::new(ratio, count, a.extent, a.seed)
    };
    let (manifest, volumes) = synth_dataset(&spec)?;
    write_dataset(&a.out, &manifest, &volumes)?;
    println!("{:<12} {:>7} {:>7}", "class", "count", "share");
    for (name, n) in manifest.class_names.iter().zip(&manifest.class_counts) {
        println!("{:<12} {:>7} {:>7.3}", name, n, *n as f64 / count as f64);
    }
    println!("{} volumes of {}³ written to {}", count, a.extent, a.out.display());
    Ok(())
}

fn train_config(flags: &TrainFlags, extent: usize) -> Result<PretrainConfig> {
    let mut encoder = match flags.preset.as_str() {
        "paper" => EncoderConfig::paper(),
        _ => EncoderConfig::desk(),
    };
    if encoder.input_extent != extent {
        encoder = encoder.with_extent(extent);
    }
    let mut cfg = PretrainConfig {
        encoder,
        seed: flags.seed,
        iterations: flags.iters,
        ..PretrainConfig::default()
    };
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    cfg.planner.mode = flags.mode.parse::<ImbalanceMode>()?;
    cfg.planner.k = flags.k;
    cfg.planner.q = flags.q;
    cfg.planner.m = flags.m;
    cfg.planner.batch_size = flags.batch;
    Ok(cfg)
}

#[derive(Serialize)]
struct ConfigEcho<'a, T: Serialize> {
    command: &'a str,
    data: String,
    seed: u64,
    streams: [&'static str; 6],
    config: &'a T,
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let (manifest, volumes) = load_dataset(&a.data)?;
    let cfg = with_overrides(train_config(&a.train, manifest.extent)?, a.config.as_deref())?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("config.json"),
        &ConfigEcho {
            command: "pretrain",
            data: a.data.display().to_string(),
            seed: cfg.seed,
            streams: STREAMS,
            config: &cfg,
        },
    )?;
    let resume = match &a.resume {
        Some(p) => Some(load_checkpoint(p, Some(&cfg.encoder))?.into_trainer()),
        None => None,
    };
    let log_path = a.out.join("train_log.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let mut last = None;
    let trainer = pipe::pretrain(&volumes, &cfg, resume, |line| {
        let text = serde_json::to_string(line)?;
        writeln!(log, "{text}").map_err(|e| siam3d::Error::InvalidArgument(format!("log write failed: {e}")))?;
        last = Some((line.iteration, line.loss, line.collapse_metric));
        Ok(())
    })?;
    log.flush()?;
    let ck_path = a.out.join("checkpoint.ckpt");
    save_checkpoint(&ck_path, &Checkpoint::from_trainer(&trainer))?;
    if let Some((it, loss, collapse)) = last {
        println!("iteration {it}: loss {loss:.4}, collapse metric {collapse:.4}");
    }
    println!("checkpoint written to {}", ck_path.display());
    Ok(())
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    let set: FeatureSet = a.features.parse()?;
    let (manifest, volumes) = load_dataset(&a.data)?;
    let encoder = if !set.needs_encoder() {
        None
    } else if let Some(p) = &a.checkpoint {
        let ck = load_checkpoint(p, None)?;
        let e = ck.encoder.config.input_extent;
        if e != manifest.extent {
            return Err(siam3d::Error::Config(format!(
                "checkpoint {} expects {e}³ volumes but the dataset has {}³",
                p.display(),
                manifest.extent
            ))
            .into());
        }
        Some(ck.encoder)
    } else if a.random_baseline {
        Some(build_encoder(&EncoderConfig::desk().with_extent(manifest.extent), a.seed)?)
    } else {
        bail!("--features {} needs --checkpoint or --random-baseline", set.as_str());
    };
    let table = extract_all(&volumes, encoder.as_ref(), set)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_features(&a.out, &table, set)?;
    println!(
        "{} records × {} features written to {}",
        table.records.len(),
        table.names(set).len(),
        a.out.display()
    );
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let table = read_features(&a.features)?;
    let set = match a.set.as_deref() {
        Some(s) => s.parse()?,
        None if table.ssl_dim == 0 => FeatureSet::Trad,
        None if table.trad_names.is_empty() => FeatureSet::Ssl,
        None => FeatureSet::Concat,
    };
    let base = ProtocolConfig {
        folds: a.folds,
        label_budget: a.label_budget,
        seed: a.seed,
        minor_class: a.minor_class,
        positive_class: a.positive_class,
        ..ProtocolConfig::default()
    };
    let cfg = with_overrides(base, a.config.as_deref())?;
    let report = run_protocol(&table, set, &cfg)?;
    create_dir(&a.out)?;
    write_metrics(&a.out.join("metrics.json"), &a.out.join("metrics.csv"), &report)?;
    let pearson = pearson_matrix(&table.matrix(set))?;
    let names = table.names(set);
    for j in &pearson.dropped {
        eprintln!("warning: constant column {} left out of the correlation analysis", names[*j]);
    }
    let hist = a.out.join("pearson_histogram.csv");
    fs::write(&hist, coefficient_histogram_csv(&pearson.off_diagonal(), 40)).with_context(|| format!("writing {}", hist.display()))?;
    let m = &report.mean;
    println!("feature set {} ({} features), {} folds", set.as_str(), report.n_features, report.folds.len());
    println!("accuracy           {:.4}", m.accuracy);
    println!("balanced accuracy  {:.4}", m.balanced_accuracy);
    if let (Some(se), Some(sp)) = (m.sensitivity, m.specificity) {
        println!("sensitivity        {se:.4}");
        println!("specificity        {sp:.4}");
    }
    println!("minor-class recall {:.4}", m.minor_class_recall);
    println!("AUC                {:.4}", m.auc);
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let (manifest, volumes) = load_dataset(&a.data)?;
    let features: FeatureSet = a.features.parse()?;
    let base = SweepConfig {
        param: a.param.parse::<SweepParam>()?,
        values: a.values.clone(),
        repeats: a.repeats,
        experiment: ExperimentConfig {
            pretrain: train_config(&a.train, manifest.extent)?,
            protocol: ProtocolConfig {
                folds: a.folds,
                seed: a.train.seed,
                ..ProtocolConfig::default()
            },
            features,
        },
    };
    let cfg = with_overrides(base, a.config.as_deref())?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("config.json"),
        &ConfigEcho {
            command: "sweep",
            data: a.data.display().to_string(),
            seed: cfg.experiment.pretrain.seed,
            streams: STREAMS,
            config: &cfg,
        },
    )?;
    let jl = a.out.join("sweep.jsonl");
    let mut log = BufWriter::new(File::create(&jl).with_context(|| format!("creating {}", jl.display()))?);
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = pipe::run_sweep(&volumes, &cfg, workers, |row| {
        let text = serde_json::to_string(row)?;
        writeln!(log, "{text}").map_err(|e| siam3d::Error::InvalidArgument(format!("log write failed: {e}")))?;
        eprintln!("{} = {} (repeat {}): AUC {:.4}", a.param, row.value, row.repeat, row.auc);
        Ok(())
    })?;
    log.flush()?;
    let csv = a.out.join("sweep.csv");
    fs::write(&csv, pipe::sweep_csv(&rows)).with_context(|| format!("writing {}", csv.display()))?;
    println!("{} sweep points written to {}", rows.len(), csv.display());
    Ok(())
}
