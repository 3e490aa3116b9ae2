//! Encoder checkpoints: a JSON header line with the configuration, its
//! fingerprint and a manifest of every tensor, then the little-endian f32
//! payload. Adam moments, when present, follow the encoder tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::volume::{check_payload, split_header};
use crate::encoder::{build_encoder, EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::siamese::{SiamConfig, SiamStep};
use crate::tensor::{AdamConfig, AdamState};

pub const CHECKPOINT_FORMAT: &str = "siam3d-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    t: u64,
    /// Offsets of `m` and `v` per learnable tensor, in parameter order.
    moments: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    fingerprint: String,
    config: EncoderConfig,
    seed: u64,
    step: u64,
    siam: Option<SiamConfig>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    payload_bytes: usize,
}

/// Encoder plus the training state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderState,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub siam: Option<SiamConfig>,
}

impl Checkpoint {
    pub fn from_encoder(encoder: &EncoderState) -> Self {
        Self {
            encoder: encoder.clone(),
            optimizer: None,
            step: 0,
            siam: None,
        }
    }

    pub fn from_trainer(trainer: &SiamStep) -> Self {
        Self {
            encoder: trainer.active.clone(),
            optimizer: Some(trainer.optimizer.clone()),
            step: trainer.step,
            siam: Some(trainer.config),
        }
    }

    /// Rebuilds a trainer; the frozen copy is re-synced at the next step.
    pub fn into_trainer(self) -> SiamStep {
        let config = self.siam.unwrap_or_default();
        let mut t = SiamStep::new(self.encoder, config);
        if let Some(opt) = self.optimizer {
            t.optimizer = opt;
        }
        t.step = self.step;
        t
    }
}

fn push_f32(buf: &mut Vec<u8>, data: &[f32]) -> usize {
    let off = buf.len();
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    off
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::new();
    let tensors = ck
        .encoder
        .tensors()
        .into_iter()
        .map(|(name, t, _)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: push_f32(&mut payload, t.data()),
        })
        .collect();
    let optimizer = ck.optimizer.as_ref().map(|o| OptimizerHeader {
        config: o.config,
        t: o.t,
        moments: o
            .m
            .iter()
            .zip(&o.v)
            .map(|(m, v)| (push_f32(&mut payload, m), push_f32(&mut payload, v)))
            .collect(),
    });
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        fingerprint: ck.encoder.config.fingerprint(),
        config: ck.encoder.config.clone(),
        seed: ck.encoder.seed,
        step: ck.step,
        siam: ck.siam,
        tensors,
        optimizer,
        payload_bytes: payload.len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

fn read_f32(path: &Path, payload: &[u8], offset: usize, len: usize) -> Result<Vec<f32>> {
    let end = offset + 4 * len;
    if end > payload.len() {
        return Err(Error::Truncated {
            path: path.into(),
            expected: end,
            found: payload.len(),
        });
    }
    Ok(payload[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Decodes a checkpoint, refusing it when `expected` has another fingerprint.
pub fn decode_checkpoint(path: &Path, bytes: &[u8], expected: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let (h, payload): (CheckpointHeader, _) = split_header(path, bytes)?;
    if h.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("not a checkpoint (format {:?})", h.format),
        });
    }
    if h.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: h.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let own = h.config.fingerprint();
    if own != h.fingerprint {
        return Err(Error::FingerprintMismatch {
            stored: h.fingerprint,
            expected: own,
        });
    }
    if let Some(want) = expected {
        let want = want.fingerprint();
        if want != h.fingerprint {
            return Err(Error::FingerprintMismatch {
                stored: h.fingerprint,
                expected: want,
            });
        }
    }
    let mut encoder = build_encoder(&h.config, h.seed)?;
    let mut total = 0usize;
    {
        let slots = encoder.tensors_mut();
        if slots.len() != h.tensors.len() {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("{} tensors listed, encoder has {}", h.tensors.len(), slots.len()),
            });
        }
        for ((name, slot, _), entry) in slots.into_iter().zip(&h.tensors) {
            if name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(Error::Format {
                    path: path.into(),
                    detail: format!("tensor {} {:?} does not match {name} {:?}", entry.name, entry.shape, slot.shape()),
                });
            }
            let data = read_f32(path, payload, entry.offset, slot.len())?;
            slot.data_mut().copy_from_slice(&data);
            total += 4 * slot.len();
        }
    }
    let optimizer = match h.optimizer {
        None => None,
        Some(o) => {
            let lens: Vec<usize> = encoder.parameters_mut().iter().map(|p| p.len()).collect();
            if !o.moments.is_empty() && o.moments.len() != lens.len() {
                return Err(Error::Format {
                    path: path.into(),
                    detail: "optimizer moments do not match the parameters".into(),
                });
            }
            let mut state = AdamState::new(o.config);
            state.t = o.t;
            for ((mo, vo), len) in o.moments.iter().zip(&lens) {
                state.m.push(read_f32(path, payload, *mo, *len)?);
                state.v.push(read_f32(path, payload, *vo, *len)?);
                total += 8 * len;
            }
            Some(state)
        }
    };
    check_payload(path, h.payload_bytes, total, payload.len())?;
    Ok(Checkpoint {
        encoder,
        optimizer,
        step: h.step,
        siam: h.siam,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ScalePreset;
    use crate::siamese::PairBatch;
    use crate::tensor::gradcheck::random_tensor;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            preset: ScalePreset::Custom,
            input_extent: 8,
            widths: vec![2, 2, 3, 4],
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
    fn round_trip_preserves_encodings() {
        let mut trainer = SiamStep::new(build_encoder(&tiny(), 1).unwrap(), SiamConfig::default());
        trainer.train_step(&pair(1)).unwrap();
        let ck = Checkpoint::from_trainer(&trainer);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p, Some(&tiny())).unwrap();
        assert_eq!(back.encoder, ck.encoder);
        assert_eq!(back.optimizer, ck.optimizer);
        let x = random_tensor(&[2, 1, 8, 8, 8], 9);
        let a = ck.encoder.encode_eval(&x).unwrap();
        let b = back.encoder.encode_eval(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn other_config_is_refused_with_both_fingerprints() {
        let ck = Checkpoint::from_encoder(&build_encoder(&tiny(), 1).unwrap());
        let bytes = encode_checkpoint(&ck);
        let other = EncoderConfig {
            hidden_dim: 13,
            ..tiny()
        };
        match decode_checkpoint(Path::new("mem"), &bytes, Some(&other)) {
            Err(Error::FingerprintMismatch { stored, expected }) => {
                assert_eq!(stored, tiny().fingerprint());
                assert_eq!(expected, other.fingerprint());
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let mut straight = SiamStep::new(build_encoder(&tiny(), 2).unwrap(), SiamConfig::default());
        for s in 0..3 {
            straight.train_step(&pair(10 + s)).unwrap();
        }
        let mut first = SiamStep::new(build_encoder(&tiny(), 2).unwrap(), SiamConfig::default());
        for s in 0..2 {
            first.train_step(&pair(10 + s)).unwrap();
        }
        let bytes = encode_checkpoint(&Checkpoint::from_trainer(&first));
        let mut resumed = decode_checkpoint(Path::new("mem"), &bytes, None).unwrap().into_trainer();
        resumed.train_step(&pair(12)).unwrap();
        assert_eq!(resumed.step, straight.step);
        assert_eq!(resumed.active, straight.active);
        assert_eq!(resumed.optimizer, straight.optimizer);
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let bytes = encode_checkpoint(&Checkpoint::from_encoder(&build_encoder(&tiny(), 1).unwrap()));
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(
            decode_checkpoint(Path::new("mem"), cut, None),
            Err(Error::Truncated { .. })
        ));
    }
}
