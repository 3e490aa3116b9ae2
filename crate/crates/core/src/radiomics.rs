//! Hand-crafted radiomics over the masked region of a volume.
//!
//! Three families, each with a name prefix: first-order intensity
//! statistics (`fo_`), mask shape descriptors (`shape_`) and gray-level
//! co-occurrence texture (`glcm_`). Learned features are appended as
//! `ssl_<i>` columns.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{network_input, Volume};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 32;
pub const GLCM_BINS: usize = 32;
pub const SSL_PREFIX: &str = "ssl_";

pub type NamedVector = Vec<(String, f64)>;

fn masked_values(vol: &Volume, mask: &[u8]) -> Result<Vec<f64>> {
    if mask.len() != vol.len() {
        return Err(Error::Shape(format!("mask of {} voxels for volume of {}", mask.len(), vol.len())));
    }
    let v: Vec<f64> = vol.data.iter().zip(mask).filter(|(_, m)| **m != 0).map(|(v, _)| *v as f64).collect();
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("empty mask for {}", vol.id)));
    }
    Ok(v)
}

/// Linear-interpolated quantile of sorted data, `q ∈ [0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Equal-width level in `0..bins` over `[min, max]`; everything is level 0
/// when the range is empty.
fn level(v: f64, min: f64, max: f64, bins: usize) -> usize {
    if max <= min {
        return 0;
    }
    (((v - min) / (max - min) * bins as f64) as usize).min(bins - 1)
}

pub fn first_order(vol: &Volume, mask: &[u8]) -> Result<NamedVector> {
    let mut v = masked_values(vol, mask)?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m = |p: i32| v.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let (m2, m3, m4) = (m(2), m(3), m(4));
    let (skewness, kurtosis) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2)) } else { (0.0, 0.0) };
    let mad = v.iter().map(|x| (x - mean).abs()).sum::<f64>() / n;
    let energy: f64 = v.iter().map(|x| x * x).sum();
    v.sort_by(f64::total_cmp);
    let (min, max) = (v[0], v[v.len() - 1]);
    let (p10, p90) = (quantile(&v, 0.1), quantile(&v, 0.9));
    let robust: Vec<f64> = v.iter().copied().filter(|x| *x >= p10 && *x <= p90).collect();
    let rmean = robust.iter().sum::<f64>() / robust.len() as f64;
    let rmad = robust.iter().map(|x| (x - rmean).abs()).sum::<f64>() / robust.len() as f64;
    let mut hist = [0usize; HISTOGRAM_BINS];
    for x in &v {
        hist[level(*x, min, max, HISTOGRAM_BINS)] += 1;
    }
    let (mut entropy, mut uniformity) = (0.0, 0.0);
    for c in hist.iter().filter(|c| **c > 0) {
        let p = *c as f64 / n;
        entropy -= p * p.log2();
        uniformity += p * p;
    }
    Ok(vec![
        ("fo_mean".into(), mean),
        ("fo_variance".into(), m2),
        ("fo_skewness".into(), skewness),
        ("fo_kurtosis".into(), kurtosis),
        ("fo_median".into(), quantile(&v, 0.5)),
        ("fo_p10".into(), p10),
        ("fo_p90".into(), p90),
        ("fo_min".into(), min),
        ("fo_max".into(), max),
        ("fo_range".into(), max - min),
        ("fo_iqr".into(), quantile(&v, 0.75) - quantile(&v, 0.25)),
        ("fo_mean_abs_dev".into(), mad),
        ("fo_robust_mean_abs_dev".into(), rmad),
        ("fo_rms".into(), (energy / n).sqrt()),
        ("fo_energy".into(), energy),
        ("fo_entropy".into(), entropy),
        ("fo_uniformity".into(), uniformity),
    ])
}

const FACES: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn inside(mask: &[u8], e: [usize; 3], p: [isize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < e[a])
        && mask[(p[0] as usize * e[1] + p[1] as usize) * e[2] + p[2] as usize] != 0
}

/// Eigenvalues of a symmetric 3×3 matrix, descending (cyclic Jacobi).
fn symmetric_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..50 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Shape descriptors of the nonzero voxels of `mask` with extents `e`.
pub fn shape_features(mask: &[u8], e: [usize; 3]) -> Result<NamedVector> {
    if mask.len() != e[0] * e[1] * e[2] {
        return Err(Error::Shape(format!("mask of {} voxels for extents {e:?}", mask.len())));
    }
    let mut coords = Vec::new();
    let mut boundary = Vec::new();
    let mut area = 0usize;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                if mask[(z * e[1] + y) * e[2] + x] == 0 {
                    continue;
                }
                let p = [z, y, x];
                let exposed = FACES
                    .iter()
                    .filter(|d| !inside(mask, e, [0, 1, 2].map(|a| p[a] as isize + d[a])))
                    .count();
                area += exposed;
                if exposed > 0 {
                    boundary.push(p.map(|c| c as f64));
                }
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
                coords.push(p.map(|c| c as f64));
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    let volume = coords.len() as f64;
    let area = area as f64;
    let mut diameter2: f64 = 0.0;
    for (i, a) in boundary.iter().enumerate() {
        for b in &boundary[i + 1..] {
            diameter2 = diameter2.max((0..3).map(|k| (a[k] - b[k]).powi(2)).sum());
        }
    }
    let mut centroid = [0.0; 3];
    for c in &coords {
        for k in 0..3 {
            centroid[k] += c[k] / volume;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for c in &coords {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (c[i] - centroid[i]) * (c[j] - centroid[j]) / volume;
            }
        }
    }
    let ev = symmetric_eigenvalues(cov).map(|l| l.max(0.0));
    let ratio = |a: f64, b: f64| if b > 0.0 { (a / b).sqrt() } else { 0.0 };
    Ok(vec![
        ("shape_voxel_volume".into(), volume),
        ("shape_surface_area".into(), area),
        ("shape_surface_volume_ratio".into(), area / volume),
        ("shape_sphericity".into(), sphericity(volume, area)),
        ("shape_max_diameter".into(), diameter2.sqrt()),
        ("shape_extent_z".into(), (hi[0] - lo[0] + 1) as f64),
        ("shape_extent_y".into(), (hi[1] - lo[1] + 1) as f64),
        ("shape_extent_x".into(), (hi[2] - lo[2] + 1) as f64),
        ("shape_major_axis".into(), 4.0 * ev[0].sqrt()),
        ("shape_minor_axis".into(), 4.0 * ev[1].sqrt()),
        ("shape_least_axis".into(), 4.0 * ev[2].sqrt()),
        ("shape_elongation".into(), ratio(ev[1], ev[0])),
        ("shape_flatness".into(), ratio(ev[2], ev[0])),
    ])
}

/// `π^{1/3} (6V)^{2/3} / A`.
pub fn sphericity(volume: f64, area: f64) -> f64 {
    std::f64::consts::PI.cbrt() * (6.0 * volume).powf(2.0 / 3.0) / area
}

/// The 13 unique directions of the 26-neighbourhood.
pub fn glcm_offsets() -> Vec<[isize; 3]> {
    let mut out = Vec::with_capacity(13);
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let d = [dz, dy, dx];
                if d.iter().find(|v| **v != 0).is_some_and(|v| *v > 0) {
                    out.push(d);
                }
            }
        }
    }
    out
}

/// Symmetric co-occurrence matrix summed over all offsets, normalized to
/// unit mass. Levels are `0..bins` over the masked range; only pairs with
/// both voxels in the mask count.
pub fn glcm_matrix(vol: &Volume, mask: &[u8], bins: usize, offsets: &[[isize; 3]]) -> Result<Vec<Vec<f64>>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("GLCM needs at least 2 bins, got {bins}")));
    }
    let values = masked_values(vol, mask)?;
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!("GLCM of {} needs at least 2 masked voxels", vol.id)));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = vol.extents;
    let mut counts = vec![vec![0u64; bins]; bins];
    let mut total = 0u64;
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                let i = vol.index(z, y, x);
                if mask[i] == 0 {
                    continue;
                }
                let a = level(vol.data[i] as f64, min, max, bins);
                for d in offsets {
                    let q = [z as isize + d[0], y as isize + d[1], x as isize + d[2]];
                    if !inside(mask, e, q) {
                        continue;
                    }
                    let j = vol.index(q[0] as usize, q[1] as usize, q[2] as usize);
                    let b = level(vol.data[j] as f64, min, max, bins);
                    counts[a][b] += 1;
                    counts[b][a] += 1;
                    total += 2;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(format!("no co-occurring voxel pairs in {}", vol.id)));
    }
    Ok(counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / total as f64).collect())
        .collect())
}

/// Texture statistics of a normalized co-occurrence matrix, levels numbered
/// from 1.
pub fn glcm_statistics(p: &[Vec<f64>]) -> NamedVector {
    let n = p.len();
    let lv = |i: usize| (i + 1) as f64;
    let mut mu = 0.0;
    for (i, row) in p.iter().enumerate() {
        mu += lv(i) * row.iter().sum::<f64>();
    }
    let mut var = 0.0;
    for (i, row) in p.iter().enumerate() {
        var += (lv(i) - mu).powi(2) * row.iter().sum::<f64>();
    }
    let (mut contrast, mut dissimilarity, mut homogeneity, mut idm) = (0.0, 0.0, 0.0, 0.0);
    let (mut energy, mut entropy, mut cov, mut max_p) = (0.0, 0.0, 0.0, 0.0f64);
    let (mut shade, mut tendency) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = p[i][j];
            if v == 0.0 {
                continue;
            }
            let d = lv(i) - lv(j);
            contrast += d * d * v;
            dissimilarity += d.abs() * v;
            homogeneity += v / (1.0 + d.abs());
            idm += v / (1.0 + d * d);
            energy += v * v;
            entropy -= v * v.log2();
            cov += (lv(i) - mu) * (lv(j) - mu) * v;
            max_p = max_p.max(v);
            let s = lv(i) + lv(j) - 2.0 * mu;
            shade += s.powi(3) * v;
            tendency += s * s * v;
        }
    }
    // a single occupied level is perfectly self-correlated
    let correlation = if var > 0.0 { cov / var } else { 1.0 };
    vec![
        ("glcm_contrast".into(), contrast),
        ("glcm_correlation".into(), correlation),
        ("glcm_energy".into(), energy),
        ("glcm_homogeneity".into(), homogeneity),
        ("glcm_entropy".into(), entropy),
        ("glcm_dissimilarity".into(), dissimilarity),
        ("glcm_inverse_difference_moment".into(), idm),
        ("glcm_max_probability".into(), max_p),
        ("glcm_cluster_shade".into(), shade),
        ("glcm_cluster_tendency".into(), tendency),
    ]
}

pub fn glcm_features(vol: &Volume, mask: &[u8], bins: usize, offsets: &[[isize; 3]]) -> Result<NamedVector> {
    Ok(glcm_statistics(&glcm_matrix(vol, mask, bins, offsets)?))
}

/// All traditional features of one volume over its mask.
pub fn traditional_features(vol: &Volume) -> Result<NamedVector> {
    let mask = vol.mask_or_full();
    let mut out = first_order(vol, &mask)?;
    out.extend(shape_features(&mask, vol.extents)?);
    out.extend(glcm_features(vol, &mask, GLCM_BINS, &glcm_offsets())?);
    Ok(out)
}

pub fn traditional_names() -> Vec<String> {
    let mut v = Volume::new("probe", [2, 2, 2], (0..8).map(|i| i as f32).collect(), None, 0).expect("valid probe");
    v.mask = Some(vec![1; 8]);
    traditional_features(&v).expect("probe extracts").into_iter().map(|(n, _)| n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Trad,
    Ssl,
    Concat,
}

impl FeatureSet {
    pub fn needs_encoder(self) -> bool {
        self != FeatureSet::Trad
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Trad => "trad",
            FeatureSet::Ssl => "ssl",
            FeatureSet::Concat => "concat",
        }
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trad" => Ok(Self::Trad),
            "ssl" => Ok(Self::Ssl),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown feature set {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub label: usize,
    pub f_trad: Vec<f64>,
    pub f_ssl: Vec<f64>,
}

impl FeatureRecord {
    pub fn f_concat(&self) -> Vec<f64> {
        let mut v = self.f_trad.clone();
        v.extend_from_slice(&self.f_ssl);
        v
    }

    pub fn features(&self, set: FeatureSet) -> Vec<f64> {
        match set {
            FeatureSet::Trad => self.f_trad.clone(),
            FeatureSet::Ssl => self.f_ssl.clone(),
            FeatureSet::Concat => self.f_concat(),
        }
    }
}

/// Records with shared column names.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub trad_names: Vec<String>,
    pub ssl_dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureTable {
    pub fn ssl_names(&self) -> Vec<String> {
        (0..self.ssl_dim).map(|i| format!("{SSL_PREFIX}{i}")).collect()
    }

    pub fn names(&self, set: FeatureSet) -> Vec<String> {
        match set {
            FeatureSet::Trad => self.trad_names.clone(),
            FeatureSet::Ssl => self.ssl_names(),
            FeatureSet::Concat => [self.trad_names.clone(), self.ssl_names()].concat(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// The `N×d` matrix of one feature set.
    pub fn matrix(&self, set: FeatureSet) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.features(set)).collect()
    }

    /// Keeps only the columns of `set`.
    pub fn restrict(&self, set: FeatureSet) -> FeatureTable {
        let keep_trad = set != FeatureSet::Ssl;
        let keep_ssl = set != FeatureSet::Trad;
        FeatureTable {
            trad_names: if keep_trad { self.trad_names.clone() } else { Vec::new() },
            ssl_dim: if keep_ssl { self.ssl_dim } else { 0 },
            records: self
                .records
                .iter()
                .map(|r| FeatureRecord {
                    id: r.id.clone(),
                    label: r.label,
                    f_trad: if keep_trad { r.f_trad.clone() } else { Vec::new() },
                    f_ssl: if keep_ssl { r.f_ssl.clone() } else { Vec::new() },
                })
                .collect(),
        }
    }
}

const ENCODE_CHUNK: usize = 16;

/// Eval-mode representations of every volume, one row each.
pub fn encode_volumes(volumes: &[&Volume], encoder: &EncoderState) -> Result<Vec<Vec<f64>>> {
    let e = encoder.config.input_extent;
    let mut out = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(ENCODE_CHUNK) {
        if let Some(v) = chunk.iter().find(|v| v.extents != [e; 3]) {
            return Err(Error::Shape(format!(
                "volume {} has extents {:?} but the encoder expects {e}³",
                v.id, v.extents
            )));
        }
        let reps = encoder.encode_eval(&network_input(chunk)?)?;
        for i in 0..chunk.len() {
            out.push(reps.row(i).iter().map(|x| *x as f64).collect());
        }
    }
    Ok(out)
}

pub fn ssl_features(volumes: &[Volume], encoder: &EncoderState) -> Result<Vec<Vec<f64>>> {
    encode_volumes(&volumes.iter().collect::<Vec<_>>(), encoder)
}

/// Feature records for a dataset; the encoder is required unless `set` is
/// [`FeatureSet::Trad`], and traditional columns are skipped for
/// [`FeatureSet::Ssl`].
pub fn extract_all(volumes: &[Volume], encoder: Option<&EncoderState>, set: FeatureSet) -> Result<FeatureTable> {
    let ssl = match (set.needs_encoder(), encoder) {
        (false, _) => None,
        (true, Some(enc)) => Some(ssl_features(volumes, enc)?),
        (true, None) => return Err(Error::Config(format!("feature set {} needs an encoder", set.as_str()))),
    };
    let with_trad = set != FeatureSet::Ssl;
    let mut records = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let f_trad = if with_trad {
            traditional_features(v)?.into_iter().map(|(_, x)| x).collect()
        } else {
            Vec::new()
        };
        records.push(FeatureRecord {
            id: v.id.clone(),
            label: v.label,
            f_trad,
            f_ssl: ssl.as_ref().map(|s| s[i].clone()).unwrap_or_default(),
        });
    }
    Ok(FeatureTable {
        trad_names: if with_trad { traditional_names() } else { Vec::new() },
        ssl_dim: ssl.as_ref().and_then(|s| s.first()).map_or(0, |r| r.len()),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub family: String,
}

/// Sidecar describing a feature CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub format: String,
    pub version: u32,
    pub feature_set: FeatureSet,
    pub records: usize,
    pub key_columns: Vec<String>,
    pub columns: Vec<ColumnSchema>,
}

pub const FEATURES_FORMAT: &str = "siam3d-features";

fn family(name: &str) -> &'static str {
    ["fo_", "shape_", "glcm_", SSL_PREFIX]
        .into_iter()
        .zip(["first_order", "shape", "glcm", "ssl"])
        .find(|(p, _)| name.starts_with(p))
        .map_or("other", |(_, f)| f)
}

pub fn feature_schema(table: &FeatureTable, set: FeatureSet) -> FeatureSchema {
    FeatureSchema {
        format: FEATURES_FORMAT.into(),
        version: 1,
        feature_set: set,
        records: table.records.len(),
        key_columns: vec!["id".into(), "label".into()],
        columns: table
            .names(set)
            .into_iter()
            .map(|n| ColumnSchema {
                family: family(&n).into(),
                name: n,
            })
            .collect(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.into(),
        detail: e.to_string(),
    }
}

/// The schema sidecar path, `<stem>.schema.json` next to the CSV.
pub fn schema_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("schema.json")
}

/// Writes the CSV (`id,label,<features…>`) and its schema sidecar.
pub fn write_features(path: &Path, table: &FeatureTable, set: FeatureSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(table.names(set));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in &table.records {
        let mut row = vec![r.id.clone(), r.label.to_string()];
        row.extend(r.features(set).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sp = schema_path(path);
    let json = serde_json::to_string_pretty(&feature_schema(table, set))?;
    fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))
}

/// Reads a feature CSV; `ssl_` columns become the learned part.
pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let bad = |detail: String| Error::Format {
        path: path.into(),
        detail,
    };
    if header.len() < 2 || header[0] != "id" || header[1] != "label" {
        return Err(bad("feature CSV must start with id,label".into()));
    }
    let names = &header[2..];
    let first_ssl = names.iter().position(|n| n.starts_with(SSL_PREFIX)).unwrap_or(names.len());
    if names[first_ssl..].iter().any(|n| !n.starts_with(SSL_PREFIX)) {
        return Err(bad("learned columns must follow the traditional ones".into()));
    }
    let mut records = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: bad number {s:?}", line + 2)));
        let label = row[1].parse::<usize>().map_err(|_| bad(format!("row {}: bad label", line + 2)))?;
        let values: Vec<f64> = row.iter().skip(2).map(num).collect::<Result<_>>()?;
        records.push(FeatureRecord {
            id: row[0].to_string(),
            label,
            f_trad: values[..first_ssl].to_vec(),
            f_ssl: values[first_ssl..].to_vec(),
        });
    }
    Ok(FeatureTable {
        trad_names: names[..first_ssl].to_vec(),
        ssl_dim: names.len() - first_ssl,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_volume, SynthSpec};
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::{Rng as _, SeedableRng};

    fn get(v: &NamedVector, name: &str) -> f64 {
        v.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name}")).1
    }

    fn cube_mask(extent: usize, lo: usize, s: usize) -> Vec<u8> {
        let mut m = vec![0u8; extent.pow(3)];
        for z in lo..lo + s {
            for y in lo..lo + s {
                for x in lo..lo + s {
                    m[(z * extent + y) * extent + x] = 1;
                }
            }
        }
        m
    }

    fn volume(extent: usize, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut d = Vec::new();
        for z in 0..extent {
            for y in 0..extent {
                for x in 0..extent {
                    d.push(f(z, y, x));
                }
            }
        }
        Volume::new("t", [extent; 3], d, None, 0).unwrap()
    }

    #[test]
    fn constant_volume() {
        let v = volume(6, |_, _, _| 5.0);
        let fo = first_order(&v, &v.mask_or_full()).unwrap();
        assert_eq!(get(&fo, "fo_mean"), 5.0);
        assert_eq!(get(&fo, "fo_variance"), 0.0);
        assert_eq!(get(&fo, "fo_entropy"), 0.0);
        assert_eq!(get(&fo, "fo_uniformity"), 1.0);
        let g = glcm_features(&v, &v.mask_or_full(), GLCM_BINS, &glcm_offsets()).unwrap();
        assert_eq!(get(&g, "glcm_contrast"), 0.0);
        assert_eq!(get(&g, "glcm_energy"), 1.0);
        assert_eq!(get(&g, "glcm_entropy"), 0.0);
    }

    #[test]
    fn two_value_histogram() {
        let v = volume(4, |z, _, _| if z < 2 { 0.0 } else { 255.0 });
        let fo = first_order(&v, &v.mask_or_full()).unwrap();
        assert_eq!(get(&fo, "fo_entropy"), 1.0);
        assert_eq!(get(&fo, "fo_mean"), 127.5);
        assert_eq!(get(&fo, "fo_uniformity"), 0.5);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert!((quantile(&s, 0.1) - 1.4).abs() < 1e-12);
        assert!((quantile(&s, 0.9) - 4.6).abs() < 1e-12);
    }

    #[test]
    fn full_mask_equals_no_mask() {
        let spec = SynthSpec::new(vec![1, 1], 2, 8, 3);
        let mut v = synth_volume(&spec, 1, 0).unwrap();
        v.mask = None;
        let a = traditional_features(&v).unwrap();
        v.mask = Some(vec![1; v.len()]);
        assert_eq!(a, traditional_features(&v).unwrap());
    }

    #[test]
    fn single_voxel_shape() {
        let m = cube_mask(3, 1, 1);
        let s = shape_features(&m, [3; 3]).unwrap();
        assert_eq!(get(&s, "shape_voxel_volume"), 1.0);
        assert_eq!(get(&s, "shape_surface_area"), 6.0);
        assert_eq!(get(&s, "shape_max_diameter"), 0.0);
        assert!(shape_features(&vec![0; 27], [3; 3]).is_err());
    }

    #[test]
    fn cube_shape_closed_forms() {
        for s in [2usize, 4, 8] {
            let e = s + 2;
            let f = shape_features(&cube_mask(e, 1, s), [e; 3]).unwrap();
            let sf = s as f64;
            assert_eq!(get(&f, "shape_voxel_volume"), sf.powi(3));
            assert_eq!(get(&f, "shape_surface_area"), 6.0 * sf * sf);
            let closed = (std::f64::consts::PI / 6.0).cbrt();
            assert!((get(&f, "shape_sphericity") - closed).abs() < 1e-12);
            assert!((get(&f, "shape_sphericity") - 0.806).abs() < 5e-4);
            assert!((get(&f, "shape_max_diameter") - (3.0f64).sqrt() * (sf - 1.0)).abs() < 1e-12);
            assert_eq!(get(&f, "shape_extent_y"), sf);
            assert!((get(&f, "shape_elongation") - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn elongated_box_axes() {
        let e = 12;
        let mut m = vec![0u8; e * e * e];
        for z in 1..3 {
            for y in 1..3 {
                for x in 0..e {
                    m[(z * e + y) * e + x] = 1;
                }
            }
        }
        let f = shape_features(&m, [e; 3]).unwrap();
        // per-axis variance of a run of n unit cells is (n²−1)/12
        let expect = |n: f64| 4.0 * ((n * n - 1.0) / 12.0).sqrt();
        assert!((get(&f, "shape_major_axis") - expect(12.0)).abs() < 1e-9);
        assert!((get(&f, "shape_minor_axis") - expect(2.0)).abs() < 1e-9);
        assert!((get(&f, "shape_least_axis") - expect(2.0)).abs() < 1e-9);
    }

    #[test]
    fn offsets_are_the_half_neighbourhood() {
        let o = glcm_offsets();
        assert_eq!(o.len(), 13);
        for d in &o {
            assert!(!o.contains(&d.map(|v| -v)));
        }
    }

    fn brute_glcm(v: &Volume, levels: &[usize], bins: usize, offsets: &[[isize; 3]]) -> Vec<Vec<f64>> {
        let e = v.extents[0] as isize;
        let mut c = vec![vec![0.0; bins]; bins];
        let mut total = 0.0;
        for a in 0..v.len() as isize {
            for b in 0..v.len() as isize {
                let pa = [a / (e * e), a / e % e, a % e];
                let pb = [b / (e * e), b / e % e, b % e];
                let d = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
                if offsets.iter().any(|o| *o == d || *o == d.map(|x| -x)) {
                    c[levels[a as usize]][levels[b as usize]] += 1.0;
                    total += 1.0;
                }
            }
        }
        c.iter().map(|r| r.iter().map(|x| x / total).collect()).collect()
    }

    #[test]
    fn checkerboard_contrast() {
        let v = volume(4, |z, y, x| if (z + y + x) % 2 == 0 { 0.0 } else { 255.0 });
        let mask = v.mask_or_full();
        let levels: Vec<usize> = v.data.iter().map(|x| if *x == 0.0 { 0 } else { GLCM_BINS - 1 }).collect();
        let gap2 = ((GLCM_BINS - 1) as f64).powi(2);
        let axis = [[0, 0, 1], [0, 1, 0], [1, 0, 0]];
        let g = glcm_features(&v, &mask, GLCM_BINS, &axis).unwrap();
        assert_eq!(get(&g, "glcm_contrast"), gap2);
        let all = glcm_offsets();
        let p = glcm_matrix(&v, &mask, GLCM_BINS, &all).unwrap();
        let q = brute_glcm(&v, &levels, GLCM_BINS, &all);
        for i in 0..GLCM_BINS {
            for j in 0..GLCM_BINS {
                assert!((p[i][j] - q[i][j]).abs() < 1e-15);
            }
        }
        let mass: f64 = p.iter().flatten().sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_changes_texture_but_not_first_order() {
        let board = volume(4, |z, y, x| if (z + y + x) % 2 == 0 { 0.0 } else { 255.0 });
        let mut sorted = board.data.clone();
        sorted.sort_by(f32::total_cmp);
        let sorted = board.with_data(sorted);
        let mask = board.mask_or_full();
        assert_eq!(first_order(&board, &mask).unwrap(), first_order(&sorted, &mask).unwrap());
        let a = glcm_features(&board, &mask, GLCM_BINS, &glcm_offsets()).unwrap();
        let b = glcm_features(&sorted, &mask, GLCM_BINS, &glcm_offsets()).unwrap();
        assert_ne!(get(&a, "glcm_contrast"), get(&b, "glcm_contrast"));
    }

    #[test]
    fn feature_count_and_prefixes() {
        let names = traditional_names();
        assert!((30..=40).contains(&names.len()), "{}", names.len());
        assert!(names.iter().all(|n| ["fo_", "shape_", "glcm_"].iter().any(|p| n.starts_with(p))));
    }

    #[test]
    fn degenerate_masks_fail() {
        let v = volume(3, |z, _, _| z as f32);
        assert!(first_order(&v, &vec![0; 27]).is_err());
        assert!(glcm_features(&v, &cube_mask(3, 1, 1), GLCM_BINS, &glcm_offsets()).is_err());
        assert!(glcm_features(&v, &v.mask_or_full(), 1, &glcm_offsets()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = SynthSpec::new(vec![1, 1], 2, 8, 3);
        let vols = vec![synth_volume(&spec, 0, 0).unwrap(), synth_volume(&spec, 1, 0).unwrap()];
        let mut table = extract_all(&vols, None, FeatureSet::Trad).unwrap();
        assert_eq!(table.records[0].f_concat(), table.records[0].f_trad);
        table.ssl_dim = 2;
        table.records.iter_mut().for_each(|r| r.f_ssl = vec![0.25, -1.0 / 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_features(&p, &table, FeatureSet::Concat).unwrap();
        assert_eq!(read_features(&p).unwrap(), table);
        let schema: FeatureSchema = serde_json::from_str(&fs::read_to_string(schema_path(&p)).unwrap()).unwrap();
        assert_eq!(schema.columns.len(), table.trad_names.len() + 2);
        assert_eq!(schema.columns.last().unwrap().family, "ssl");
    }

    proptest! {
        #[test]
        fn exterior_voxels_do_not_matter(seed in 0u64..64) {
            let spec = SynthSpec::new(vec![1, 1], 2, 10, seed);
            let v = synth_volume(&spec, (seed % 2) as usize, 0).unwrap();
            let mask = v.mask.clone().unwrap();
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f32> = v.data.iter().zip(&mask).map(|(x, m)| if *m == 1 { *x } else { r.random_range(-500.0..500.0) }).collect();
            prop_assert_eq!(traditional_features(&v).unwrap(), traditional_features(&v.with_data(noisy)).unwrap());
        }

        #[test]
        fn shape_ignores_intensity(seed in 0u64..32) {
            let spec = SynthSpec::new(vec![1, 1], 2, 10, seed);
            let v = synth_volume(&spec, 1, 0).unwrap();
            let m = v.mask.clone().unwrap();
            let a = shape_features(&m, v.extents).unwrap();
            let inverted = v.with_data(v.data.iter().map(|x| 255.0 - x).collect());
            prop_assert_eq!(a, shape_features(&inverted.mask.clone().unwrap(), inverted.extents).unwrap());
        }
    }
}
