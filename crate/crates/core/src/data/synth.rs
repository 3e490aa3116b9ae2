//! Synthetic imbalanced lesion phantoms.
//!
//! Every sample is a blurred, noisy ellipsoid on a dark background. Class
//! index `c` of `K` sets the position `φ = c/(K−1)` along three recipe axes:
//! elongation of the ellipsoid, spatial frequency of the interior texture,
//! and brightness of a rim shell. Each axis also carries per-sample jitter
//! so that classes overlap; `separation` scales the class effect. The long
//! axis and the texture wave both run along z, so orientation carries no
//! sample-specific variation.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, DATASET_FORMAT, DATASET_VERSION};
use super::volume::{rescale_intensity, Volume};
use crate::augment::gaussian_blur;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Relative class sizes, class 0 first.
    pub ratio: Vec<u32>,
    pub count: usize,
    pub extent: usize,
    pub seed: u64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

fn default_separation() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn new(ratio: Vec<u32>, count: usize, extent: usize, seed: u64) -> Self {
        Self {
            ratio,
            count,
            extent,
            seed,
            separation: default_separation(),
            class_names: None,
        }
    }

    /// Binary set with the 125:38 class sizes at 16³.
    pub fn default_binary(seed: u64) -> Self {
        Self::new(vec![250, 76], 163, 16, seed)
    }

    pub fn names(&self) -> Vec<String> {
        match &self.class_names {
            Some(n) => n.clone(),
            None => (0..self.ratio.len()).map(|c| format!("class{c}")).collect(),
        }
    }
}

/// Per-class counts by largest remainder (ties to the lower class index).
pub fn class_counts(ratio: &[u32], count: usize) -> Result<Vec<usize>> {
    if ratio.is_empty() || ratio.contains(&0) {
        return Err(Error::Config(format!("class ratio must be positive, got {ratio:?}")));
    }
    let total: u64 = ratio.iter().map(|r| *r as u64).sum();
    let quotas: Vec<(u64, u64)> = ratio
        .iter()
        .map(|r| {
            let num = *r as u64 * count as u64;
            (num / total, num % total)
        })
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.0 as usize).collect();
    let mut left = count - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratio.len()).collect();
    order.sort_by(|a, b| quotas[*b].1.cmp(&quotas[*a].1).then(a.cmp(b)));
    for c in order {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    if let Some(c) = counts.iter().position(|n| *n == 0) {
        return Err(Error::Config(format!(
            "count {count} is too small to honor ratio {ratio:?}: class {c} would be empty"
        )));
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy)]
struct Recipe {
    center: [f64; 3],
    semi_axes: [f64; 3],
    frequency: f64,
    rim: f64,
    interior: f64,
}

fn recipe(spec: &SynthSpec, class: usize, index: usize) -> Recipe {
    let k = spec.ratio.len();
    let phi = if k > 1 { class as f64 / (k - 1) as f64 } else { 0.0 };
    let sep = spec.separation;
    let e = spec.extent as f64;
    let mut r = rng::stream(spec.seed, rng::STREAM_DATA, &[class as u64, index as u64]);
    let mid = (e - 1.0) / 2.0;
    let center = [0, 1, 2].map(|_| mid + r.random_range(-0.05..0.05) * e);
    let radius = e * r.random_range(0.2..0.27);
    let elong = (1.0 + 0.19 * sep * phi + r.random_range(-0.15..0.15)).max(0.8);
    let mut semi_axes = [radius / elong.sqrt(); 3];
    semi_axes[0] = radius * elong;
    let frequency = 0.08 + 0.045 * sep * phi + r.random_range(-0.03..0.03);
    Recipe {
        center,
        semi_axes,
        frequency,
        rim: 14.5 * sep * phi + r.random_range(-12.0..12.0),
        interior: 110.0 + r.random_range(-15.0..15.0),
    }
}

const BACKGROUND: f64 = 25.0;
const TEXTURE_AMPLITUDE: f64 = 25.0;
const RIM_START: f64 = 0.75;

/// Sample `index` of class `class`; depends only on `(seed, class, index)`.
pub fn synth_volume(spec: &SynthSpec, class: usize, index: usize) -> Result<Volume> {
    if spec.extent < 8 {
        return Err(Error::Config(format!("phantom extent must be at least 8, got {}", spec.extent)));
    }
    let rec = recipe(spec, class, index);
    let e = spec.extent;
    let mut data = Vec::with_capacity(e * e * e);
    let mut mask = Vec::with_capacity(e * e * e);
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let p = [z as f64, y as f64, x as f64];
                let d: [f64; 3] = [0, 1, 2].map(|a| p[a] - rec.center[a]);
                let rho = (0..3).map(|a| (d[a] / rec.semi_axes[a]).powi(2)).sum::<f64>().sqrt();
                if rho <= 1.0 {
                    let mut v = rec.interior + TEXTURE_AMPLITUDE * (2.0 * PI * rec.frequency * d[0]).cos();
                    if rho > RIM_START {
                        v += rec.rim;
                    }
                    data.push(v as f32);
                    mask.push(1);
                } else {
                    data.push(BACKGROUND as f32);
                    mask.push(0);
                }
            }
        }
    }
    let id = format!("c{class}_{index:04}");
    let vol = Volume::new(id, [e, e, e], data, Some(mask), class)?;
    let mut vol = gaussian_blur(&vol, 0.6)?;
    let mut r = rng::stream(spec.seed, rng::STREAM_DATA, &[class as u64, index as u64, 1]);
    let noise = Normal::new(0.0, 5.0).expect("positive sigma");
    for v in vol.data.iter_mut() {
        *v += noise.sample(&mut r) as f32;
    }
    rescale_intensity(&vol, 0.0, 255.0)
}

/// The whole dataset in class-major order with its manifest.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<Volume>)> {
    let counts = class_counts(&spec.ratio, spec.count)?;
    let names = spec.names();
    if names.len() != counts.len() {
        return Err(Error::Config(format!("{} class names for {} classes", names.len(), counts.len())));
    }
    let mut volumes = Vec::with_capacity(spec.count);
    let mut entries = Vec::with_capacity(spec.count);
    for (c, n) in counts.iter().enumerate() {
        for i in 0..*n {
            let v = synth_volume(spec, c, i)?;
            entries.push(ManifestEntry {
                id: v.id.clone(),
                path: format!("{}.vol", v.id),
                label: c,
                class_name: names[c].clone(),
            });
            volumes.push(v);
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        extent: spec.extent,
        class_names: names,
        class_counts: counts,
        seed: Some(spec.seed),
        synth: Some(spec.clone()),
        entries,
    };
    Ok((manifest, volumes))
}
