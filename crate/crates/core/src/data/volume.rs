//! Single-volume container and its on-disk format.
//!
//! A file is one line of JSON header terminated by `\n`, followed by
//! `payload_bytes` bytes: `D·H·W` little-endian f32 intensities in z-major
//! order, then `D·H·W` mask bytes (0 or 1) when `has_mask` is set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_FORMAT: &str = "siam3d-volume";
pub const VOLUME_VERSION: u32 = 1;

/// Input range recorded by [`rescale_intensity`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaleInfo {
    pub input_min: f32,
    pub input_max: f32,
    pub lo: f32,
    pub hi: f32,
    /// The input was constant and mapped to `lo`.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    /// `[D, H, W]`.
    pub extents: [usize; 3],
    pub data: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    pub label: usize,
    pub rescale: Option<RescaleInfo>,
}

impl Volume {
    pub fn new(id: impl Into<String>, extents: [usize; 3], data: Vec<f32>, mask: Option<Vec<u8>>, label: usize) -> Result<Self> {
        let n: usize = extents.iter().product();
        if data.len() != n {
            return shape_err(format!("volume {:?} needs {n} voxels, got {}", extents, data.len()));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return shape_err(format!("mask has {} voxels, volume {n}", m.len()));
            }
        }
        Ok(Self {
            id: id.into(),
            extents,
            data,
            mask,
            label,
            rescale: None,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    /// Same metadata, new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            data,
            ..self.clone()
        }
    }

    /// The mask, or an all-ones mask when none is stored.
    pub fn mask_or_full(&self) -> Vec<u8> {
        self.mask.clone().unwrap_or_else(|| vec![1; self.len()])
    }
}

/// Stacks single-channel volumes of equal extents into `N×1×D×H×W`.
pub fn stack_volumes(volumes: &[&Volume]) -> Result<Tensor> {
    let Some(first) = volumes.first() else {
        return shape_err("cannot stack an empty list of volumes");
    };
    let e = first.extents;
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.extents != e {
            return shape_err(format!("volume {} has extents {:?}, expected {:?}", v.id, v.extents, e));
        }
        data.extend_from_slice(&v.data);
    }
    Tensor::new(vec![volumes.len(), 1, e[0], e[1], e[2]], data)
}

/// Network input for a batch: stacked volumes mapped from `[0, 255]` to `[0, 1]`.
pub fn network_input(volumes: &[&Volume]) -> Result<Tensor> {
    let mut t = stack_volumes(volumes)?;
    t.data_mut().iter_mut().for_each(|v| *v /= 255.0);
    Ok(t)
}

/// Linear map of the volume's value range onto `[lo, hi]`. A constant
/// volume maps to `lo` and is flagged as degenerate.
pub fn rescale_intensity(vol: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("rescale range [{lo}, {hi}] is empty")));
    }
    let (min, max) = vol
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let degenerate = !(max > min);
    let data = if degenerate {
        vec![lo; vol.len()]
    } else {
        let scale = (hi as f64 - lo as f64) / (max as f64 - min as f64);
        vol.data
            .iter()
            .map(|v| ((*v as f64 - min as f64) * scale + lo as f64).clamp(lo as f64, hi as f64) as f32)
            .collect()
    };
    let mut out = vol.with_data(data);
    out.rescale = Some(RescaleInfo {
        input_min: min,
        input_max: max,
        lo,
        hi,
        degenerate,
    });
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeHeader {
    format: String,
    version: u32,
    id: String,
    extents: [usize; 3],
    has_mask: bool,
    label: usize,
    rescale: Option<RescaleInfo>,
    payload_bytes: usize,
}

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let n = vol.len();
    let payload_bytes = 4 * n + if vol.mask.is_some() { n } else { 0 };
    let header = VolumeHeader {
        format: VOLUME_FORMAT.into(),
        version: VOLUME_VERSION,
        id: vol.id.clone(),
        extents: vol.extents,
        has_mask: vol.mask.is_some(),
        label: vol.label,
        rescale: vol.rescale,
        payload_bytes,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(payload_bytes);
    for v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = &vol.mask {
        out.extend_from_slice(m);
    }
    out
}

/// Splits `bytes` at the first newline and parses the JSON before it.
pub(crate) fn split_header<'a, T: serde::de::DeserializeOwned>(path: &Path, bytes: &'a [u8]) -> Result<(T, &'a [u8])> {
    let Some(nl) = bytes.iter().position(|b| *b == b'\n') else {
        return Err(Error::Format {
            path: path.into(),
            detail: "missing header line".into(),
        });
    };
    let header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format {
        path: path.into(),
        detail: format!("header: {e}"),
    })?;
    Ok((header, &bytes[nl + 1..]))
}

pub(crate) fn check_payload(path: &Path, declared: usize, expected: usize, found: usize) -> Result<()> {
    if declared != expected {
        return Err(Error::SizeMismatch {
            path: path.into(),
            detail: format!("header declares {declared} payload bytes, extents imply {expected}"),
        });
    }
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::SizeMismatch {
            path: path.into(),
            detail: format!("{} trailing bytes after the payload", found - expected),
        });
    }
    Ok(())
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let (header, payload): (VolumeHeader, _) = split_header(path, bytes)?;
    if header.format != VOLUME_FORMAT {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("not a volume file (format {:?})", header.format),
        });
    }
    if header.version != VOLUME_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: header.version,
            expected: VOLUME_VERSION,
        });
    }
    let n: usize = header.extents.iter().product();
    let expected = 4 * n + if header.has_mask { n } else { 0 };
    check_payload(path, header.payload_bytes, expected, payload.len())?;
    let data = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask = header.has_mask.then(|| payload[4 * n..].to_vec());
    let mut vol = Volume::new(header.id, header.extents, data, mask, header.label)?;
    vol.rescale = header.rescale;
    Ok(vol)
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    fs::write(path, encode_volume(vol)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_volume(seed: u64, with_mask: bool) -> Volume {
        let mut rng = crate::rng::Rng::seed_from_u64(seed);
        let data = (0..512).map(|_| rng.random_range(0.0..255.0)).collect();
        let mask = with_mask.then(|| (0..512).map(|_| rng.random_range(0..2u8)).collect());
        Volume::new("v", [8, 8, 8], data, mask, 1).unwrap()
    }

    fn bits(v: &Volume) -> Vec<u32> {
        v.data.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        let v = random_volume(1, true);
        save_volume(&p, &v).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(bits(&back), bits(&v));
        assert_eq!(back, v);
    }

    #[test]
    fn corrupted_length_is_a_size_error() {
        let p = Path::new("mem");
        let v = random_volume(2, false);
        let text = String::from_utf8_lossy(&encode_volume(&v)).into_owned();
        let bytes = encode_volume(&v);
        let nl = bytes.iter().position(|b| *b == b'\n').unwrap();
        let header = text[..nl].replace("\"payload_bytes\":2048", "\"payload_bytes\":2044");
        let mut bad = header.into_bytes();
        bad.extend_from_slice(&bytes[nl..]);
        assert!(matches!(decode_volume(p, &bad), Err(Error::SizeMismatch { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_volume(p, &longer), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn missing_mask_bytes_is_truncation() {
        let v = random_volume(3, true);
        let mut bytes = encode_volume(&v);
        bytes.truncate(bytes.len() - 512);
        assert!(matches!(decode_volume(Path::new("mem"), &bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn other_version_is_rejected() {
        let v = random_volume(4, false);
        let bytes = encode_volume(&v);
        let text = String::from_utf8(bytes[..bytes.iter().position(|b| *b == b'\n').unwrap()].to_vec()).unwrap();
        let mut bad = text.replace("\"version\":1", "\"version\":7").into_bytes();
        bad.extend_from_slice(&bytes[text.len()..]);
        assert!(matches!(
            decode_volume(Path::new("mem"), &bad),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn rescale_examples() {
        let v = Volume::new("v", [1, 1, 3], vec![0.0, 0.5, 1.0], None, 0).unwrap();
        let r = rescale_intensity(&v, 0.0, 255.0).unwrap();
        assert_eq!(r.data, vec![0.0, 127.5, 255.0]);
        assert!(!r.rescale.unwrap().degenerate);
        let c = Volume::new("c", [1, 1, 2], vec![4.0, 4.0], None, 0).unwrap();
        let r = rescale_intensity(&c, 0.0, 255.0).unwrap();
        assert_eq!(r.data, vec![0.0, 0.0]);
        assert!(r.rescale.unwrap().degenerate);
        assert!(rescale_intensity(&v, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trips(data in proptest::collection::vec(any::<f32>(), 24), mask in any::<bool>()) {
            let m = mask.then(|| (0..24).map(|i| (i % 3 == 0) as u8).collect());
            let v = Volume::new("p", [2, 3, 4], data, m, 0).unwrap();
            let back = decode_volume(Path::new("mem"), &encode_volume(&v)).unwrap();
            prop_assert_eq!(bits(&back), bits(&v));
            prop_assert_eq!(back.mask, v.mask);
        }

        #[test]
        fn rescaled_range_is_exact(data in proptest::collection::vec(-1e3f32..1e3, 2..40)) {
            let n = data.len();
            let v = Volume::new("p", [1, 1, n], data, None, 0).unwrap();
            let r = rescale_intensity(&v, 0.0, 255.0).unwrap();
            let min = r.data.iter().copied().fold(f32::INFINITY, f32::min);
            let max = r.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if r.rescale.unwrap().degenerate {
                prop_assert_eq!(max, 0.0);
            } else {
                prop_assert_eq!(min, 0.0);
                prop_assert_eq!(max, 255.0);
            }
        }
    }
}
