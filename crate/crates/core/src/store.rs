//! Bit-exact persistence for datasets and model checkpoints.
//!
//! Both formats share a frame: 4-byte magic, u32 LE version, u32 LE header
//! length, UTF-8 JSON header, then a payload of little-endian f32 arrays.
//! The header carries an FNV-1a 64 hash of the payload; readers verify it.
//! Identical inputs always produce identical bytes (no timestamps).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{EmbodimentSpec, NormStats, UnifiedSample, ValidityMask};
use crate::numcore::Tensor;
use crate::util::fnv1a64;

pub const DATASET_MAGIC: &[u8; 4] = b"MLDS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLCK";
pub const FORMAT_VERSION: u32 = 1;
const CREATED_BY: &str = concat!("multiloco ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated file: need {need} payload bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("payload hash mismatch: header {header:#x}, computed {computed:#x}")]
    HashMismatch { header: u64, computed: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("model kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("parameter manifest invalid: {0}")]
    Manifest(String),
}

// ------------------------------------------------------------------- frame

fn write_frame(path: &Path, magic: &[u8; 4], header_json: &[u8], payload: &[u8]) -> Result<(), StoreError> {
    let mut f = fs::File::create(path)?;
    f.write_all(magic)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(header_json)?;
    f.write_all(payload)?;
    Ok(())
}

fn read_frame(path: &Path, magic: &[u8; 4]) -> Result<(Vec<u8>, Vec<u8>), StoreError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(StoreError::Truncated { need: 12, have: bytes.len() });
    }
    if &bytes[0..4] != magic {
        return Err(StoreError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StoreError::BadVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(StoreError::Truncated { need: 12 + header_len, have: bytes.len() });
    }
    let header = bytes[12..12 + header_len].to_vec();
    let payload = bytes[12 + header_len..].to_vec();
    Ok((header, payload))
}

fn floats_to_bytes(out: &mut Vec<u8>, vals: &[f32]) {
    for &v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn bytes_to_floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

// ----------------------------------------------------------------- dataset

/// Declared payload array: name and element (f32) count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayDecl {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub specs: Vec<EmbodimentSpec>,
    pub unified_obs_dim: usize,
    pub unified_action_dim: usize,
    pub h_obs: usize,
    pub h_pred: usize,
    pub norm_stats: NormStats,
    pub sample_count: usize,
    pub seed: u64,
    pub created_by: String,
    pub content_hash: u64,
    pub arrays: Vec<ArrayDecl>,
}

/// Dataset-level metadata supplied at write time.
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub specs: Vec<EmbodimentSpec>,
    pub unified_obs_dim: usize,
    pub unified_action_dim: usize,
    pub h_obs: usize,
    pub h_pred: usize,
    pub norm_stats: NormStats,
    pub seed: u64,
}

pub fn write_dataset(path: &Path, samples: &[UnifiedSample], meta: &DatasetMeta) -> Result<(), StoreError> {
    let n = samples.len();
    let obs_len = n * meta.h_obs * meta.unified_obs_dim;
    let act_len = n * meta.h_pred * meta.unified_action_dim;
    let cmd_dim = meta.specs.first().map(|s| s.command_dim).unwrap_or(0);
    let cmd_len = n * cmd_dim;
    let mask_len = n * meta.unified_action_dim;

    let mut payload = Vec::with_capacity(4 * (obs_len + act_len + cmd_len + mask_len + n));
    for s in samples {
        floats_to_bytes(&mut payload, &s.obs_window);
    }
    for s in samples {
        floats_to_bytes(&mut payload, &s.action_chunk);
    }
    for s in samples {
        floats_to_bytes(&mut payload, &s.command);
    }
    for s in samples {
        floats_to_bytes(&mut payload, s.mask.bits());
    }
    for s in samples {
        floats_to_bytes(&mut payload, &[s.embodiment_id as f32]);
    }

    let header = DatasetHeader {
        specs: meta.specs.clone(),
        unified_obs_dim: meta.unified_obs_dim,
        unified_action_dim: meta.unified_action_dim,
        h_obs: meta.h_obs,
        h_pred: meta.h_pred,
        norm_stats: meta.norm_stats.clone(),
        sample_count: n,
        seed: meta.seed,
        created_by: CREATED_BY.to_string(),
        content_hash: fnv1a64(&payload),
        arrays: vec![
            ArrayDecl { name: "obs_windows".into(), len: obs_len },
            ArrayDecl { name: "action_chunks".into(), len: act_len },
            ArrayDecl { name: "commands".into(), len: cmd_len },
            ArrayDecl { name: "masks".into(), len: mask_len },
            ArrayDecl { name: "embodiment_ids".into(), len: n },
        ],
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| StoreError::Header(e.to_string()))?;
    write_frame(path, DATASET_MAGIC, &header_json, &payload)
}

pub fn read_dataset(path: &Path) -> Result<(Vec<UnifiedSample>, DatasetHeader), StoreError> {
    let (header_bytes, payload) = read_frame(path, DATASET_MAGIC)?;
    let header: DatasetHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| StoreError::Header(e.to_string()))?;

    let declared: usize = header.arrays.iter().map(|a| a.len).sum();
    if payload.len() != declared * 4 {
        return Err(StoreError::Truncated { need: declared * 4, have: payload.len() });
    }
    let computed = fnv1a64(&payload);
    if computed != header.content_hash {
        return Err(StoreError::HashMismatch { header: header.content_hash, computed });
    }

    let floats = bytes_to_floats(&payload);
    let n = header.sample_count;
    let obs_stride = header.h_obs * header.unified_obs_dim;
    let act_stride = header.h_pred * header.unified_action_dim;
    let cmd_dim = header.specs.first().map(|s| s.command_dim).unwrap_or(0);
    let mask_stride = header.unified_action_dim;

    let expect = [
        ("obs_windows", n * obs_stride),
        ("action_chunks", n * act_stride),
        ("commands", n * cmd_dim),
        ("masks", n * mask_stride),
        ("embodiment_ids", n),
    ];
    if header.arrays.len() != expect.len()
        || header.arrays.iter().zip(&expect).any(|(a, (name, len))| a.name != *name || a.len != *len)
    {
        return Err(StoreError::Header("array manifest does not match declared dims".into()));
    }

    let mut offset = 0usize;
    let obs = &floats[offset..offset + n * obs_stride];
    offset += n * obs_stride;
    let act = &floats[offset..offset + n * act_stride];
    offset += n * act_stride;
    let cmd = &floats[offset..offset + n * cmd_dim];
    offset += n * cmd_dim;
    let masks = &floats[offset..offset + n * mask_stride];
    offset += n * mask_stride;
    let ids = &floats[offset..offset + n];

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mask_bits = masks[i * mask_stride..(i + 1) * mask_stride].to_vec();
        if mask_bits.iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(StoreError::Header(format!("sample {i}: non-binary mask")));
        }
        samples.push(UnifiedSample {
            obs_window: obs[i * obs_stride..(i + 1) * obs_stride].to_vec(),
            action_chunk: act[i * act_stride..(i + 1) * act_stride].to_vec(),
            command: cmd[i * cmd_dim..(i + 1) * cmd_dim].to_vec(),
            embodiment_id: ids[i] as u32,
            mask: ValidityMask::new(mask_bits),
        });
    }
    Ok((samples, header))
}

// -------------------------------------------------------------- checkpoint

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Diffusion,
    Residual,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Diffusion => write!(f, "diffusion"),
            ModelKind::Residual => write!(f, "residual"),
        }
    }
}

/// Manifest entry: tensor name, shape, and byte offset into the payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub created_by: String,
    pub content_hash: u64,
    pub manifest: Vec<ParamDecl>,
}

pub fn write_checkpoint(
    path: &Path,
    kind: ModelKind,
    params: &BTreeMap<String, Tensor>,
    norm_stats: &NormStats,
    config: serde_json::Value,
    seed: u64,
) -> Result<(), StoreError> {
    let mut payload = Vec::new();
    let mut manifest = Vec::with_capacity(params.len());
    for (name, t) in params {
        manifest.push(ParamDecl { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() });
        floats_to_bytes(&mut payload, t.data());
    }
    let header = CheckpointHeader {
        kind,
        config,
        norm_stats: norm_stats.clone(),
        seed,
        created_by: CREATED_BY.to_string(),
        content_hash: fnv1a64(&payload),
        manifest,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| StoreError::Header(e.to_string()))?;
    write_frame(path, CHECKPOINT_MAGIC, &header_json, &payload)
}

pub fn read_checkpoint(
    path: &Path,
    expected_kind: ModelKind,
) -> Result<(BTreeMap<String, Tensor>, CheckpointHeader), StoreError> {
    let (header_bytes, payload) = read_frame(path, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| StoreError::Header(e.to_string()))?;
    if header.kind != expected_kind {
        return Err(StoreError::KindMismatch {
            expected: expected_kind.to_string(),
            found: header.kind.to_string(),
        });
    }
    let computed = fnv1a64(&payload);
    if computed != header.content_hash {
        return Err(StoreError::HashMismatch { header: header.content_hash, computed });
    }

    // Manifest must tile the payload exactly: offsets in order, no gaps,
    // no overlaps, ending at the payload length.
    let mut cursor = 0usize;
    for decl in &header.manifest {
        if decl.offset != cursor {
            return Err(StoreError::Manifest(format!(
                "'{}' at offset {}, expected {}",
                decl.name, decl.offset, cursor
            )));
        }
        cursor += decl.shape.iter().product::<usize>() * 4;
    }
    if cursor != payload.len() {
        return Err(StoreError::Manifest(format!(
            "manifest covers {cursor} bytes, payload has {}",
            payload.len()
        )));
    }

    let mut params = BTreeMap::new();
    for decl in &header.manifest {
        let numel: usize = decl.shape.iter().product();
        let bytes = &payload[decl.offset..decl.offset + numel * 4];
        let tensor = Tensor::new(decl.shape.clone(), bytes_to_floats(bytes))
            .map_err(|e| StoreError::Manifest(e.to_string()))?;
        params.insert(decl.name.clone(), tensor);
    }
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{make_mask, DimStats};

    fn toy_meta() -> DatasetMeta {
        DatasetMeta {
            specs: vec![EmbodimentSpec {
                id: 0,
                name: "pm".into(),
                obs_dim: 2,
                action_dim: 2,
                command_dim: 3,
                privileged_dim: 5,
            }],
            unified_obs_dim: 2,
            unified_action_dim: 3,
            h_obs: 2,
            h_pred: 2,
            norm_stats: toy_stats(),
            seed: 9,
        }
    }

    fn toy_stats() -> NormStats {
        NormStats {
            obs: DimStats { q05: vec![-1.0; 2], q95: vec![1.0; 2] },
            action: DimStats { q05: vec![-1.0; 3], q95: vec![1.0; 3] },
            command: DimStats { q05: vec![-1.0; 3], q95: vec![1.0; 3] },
        }
    }

    fn toy_samples(n: usize) -> Vec<UnifiedSample> {
        let meta = toy_meta();
        let mask = make_mask(&meta.specs[0], 3).unwrap();
        (0..n)
            .map(|i| UnifiedSample {
                obs_window: vec![i as f32; 4],
                action_chunk: vec![i as f32 * 0.5, -(i as f32), 0.0, 0.25, 0.5, 0.0],
                command: vec![1.0, 0.0, -1.0],
                embodiment_id: 0,
                mask: mask.clone(),
            })
            .collect()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mlds");
        let samples = toy_samples(100);
        write_dataset(&path, &samples, &toy_meta()).unwrap();
        let (back, header) = read_dataset(&path).unwrap();
        assert_eq!(back, samples);
        assert_eq!(header.sample_count, 100);
        assert_eq!(header.h_obs, 2);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mlds");
        write_dataset(&path, &[], &toy_meta()).unwrap();
        let (back, header) = read_dataset(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(header.sample_count, 0);
    }

    #[test]
    fn corrupt_payload_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mlds");
        write_dataset(&path, &toy_samples(10), &toy_meta()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(StoreError::HashMismatch { .. })));
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mlds");
        write_dataset(&path, &toy_samples(10), &toy_meta()).unwrap();

        let good = fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(StoreError::BadMagic { .. })));

        fs::write(&path, &good[..good.len() - 7]).unwrap();
        assert!(matches!(read_dataset(&path), Err(StoreError::Truncated { .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mlck");
        let mut params = BTreeMap::new();
        params.insert("net.l0.w".to_string(), Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        params.insert("net.l0.b".to_string(), Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]));
        write_checkpoint(&path, ModelKind::Diffusion, &params, &toy_stats(), serde_json::json!({"d": 1}), 7)
            .unwrap();
        let (back, header) = read_checkpoint(&path, ModelKind::Diffusion).unwrap();
        assert_eq!(back, params);
        assert_eq!(header.seed, 7);
        assert!(matches!(
            read_checkpoint(&path, ModelKind::Residual),
            Err(StoreError::KindMismatch { .. })
        ));
    }

    #[test]
    fn manifest_gap_is_a_structural_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mlck");
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        params.insert("b".to_string(), Tensor::from_vec(vec![2], vec![3.0, 4.0]));
        write_checkpoint(&path, ModelKind::Diffusion, &params, &toy_stats(), serde_json::Value::Null, 0)
            .unwrap();

        // Rewrite the header with a gap in the manifest.
        let bytes = fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        header.manifest[1].offset += 4; // overlaps the end / leaves a gap
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[0..8]);
        out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[12 + header_len..]);
        fs::write(&path, &out).unwrap();
        assert!(matches!(
            read_checkpoint(&path, ModelKind::Diffusion),
            Err(StoreError::Manifest(_))
        ));
    }

    #[test]
    fn writes_are_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mlds");
        let p2 = dir.path().join("b.mlds");
        let samples = toy_samples(25);
        write_dataset(&p1, &samples, &toy_meta()).unwrap();
        write_dataset(&p2, &samples, &toy_meta()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
