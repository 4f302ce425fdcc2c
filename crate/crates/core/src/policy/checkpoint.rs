//! Checkpoint container: adapter and base-model files.
//!
//! Layout (both kinds): an 8-byte magic, a u64-LE header length, a UTF-8 JSON
//! header, raw little-endian f64 tensor payloads in header order, and a
//! trailing CRC32 over everything before it. Tensor byte ranges are declared
//! in the header and validated against their dims on load; a failed load
//! never yields partial state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::{
    lora_target_names, AdapterState, LoraFactors, ModelWeights, PolicySpec, Tokenizer,
    TokenizerMode,
};

const ADAPTER_MAGIC: &[u8; 8] = b"GRPOADPT";
const BASE_MAGIC: &[u8; 8] = b"GRPOBASE";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic: expected {expected}, found a different file kind")]
    BadMagic { expected: &'static str },
    #[error("file is truncated or its framing is inconsistent: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("header is not valid json: {0}")]
    HeaderInvalid(String),
    #[error("tensor {name}: declared byte length {declared} != dims {dims:?} * 8")]
    TensorLenMismatch { name: String, declared: u64, dims: Vec<usize> },
    #[error("checkpoint does not match the current policy spec: {0}")]
    SpecMismatch(String),
}

/// Short hash identifying a policy spec (architecture + tokenizer).
pub fn spec_hash(spec: &PolicySpec) -> String {
    let json = serde_json::to_string(spec).expect("spec serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn crc32(bytes: &[u8]) -> u32 {
    // CRC-32/ISO-HDLC, bitwise reflected form.
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    dims: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    spec_hash: String,
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
    tensors: BTreeMap<String, TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BaseHeader {
    spec: PolicySpec,
    tokenizer_mode: TokenizerMode,
    vocab: Vec<String>,
    tensors: BTreeMap<String, TensorMeta>,
}

fn f64s_to_bytes(vals: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

fn write_container(
    path: &Path,
    magic: &[u8; 8],
    header_json: &[u8],
    payload: &[u8],
) -> Result<(), CheckpointError> {
    let mut bytes = Vec::with_capacity(8 + 8 + header_json.len() + payload.len() + 4);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header_json);
    bytes.extend_from_slice(payload);
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
}

fn read_container(
    path: &Path,
    magic: &[u8; 8],
    kind: &'static str,
) -> Result<(Vec<u8>, Vec<u8>), CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    if bytes.len() < 8 + 8 + 4 {
        return Err(CheckpointError::Truncated(format!("{} bytes total", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(CheckpointError::BadMagic { expected: kind });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| {
        CheckpointError::Truncated("header length overflows".into())
    })?;
    if header_end > body.len() {
        return Err(CheckpointError::Truncated(format!(
            "declared header of {header_len} bytes exceeds file"
        )));
    }
    Ok((bytes[16..header_end].to_vec(), body[header_end..].to_vec()))
}

fn extract_tensor(
    payload: &[u8],
    name: &str,
    meta: &TensorMeta,
) -> Result<Vec<f64>, CheckpointError> {
    let expected: usize = meta.dims.iter().product::<usize>() * 8;
    if meta.len as usize != expected {
        return Err(CheckpointError::TensorLenMismatch {
            name: name.to_string(),
            declared: meta.len,
            dims: meta.dims.clone(),
        });
    }
    let start = meta.offset as usize;
    let end = start.checked_add(meta.len as usize).filter(|&e| e <= payload.len()).ok_or_else(
        || CheckpointError::Truncated(format!("tensor {name} extends past the payload")),
    )?;
    Ok(bytes_to_f64s(&payload[start..end]))
}

/// Write an adapter checkpoint.
pub fn save_adapter(
    path: &Path,
    spec: &PolicySpec,
    adapter: &AdapterState,
) -> Result<(), CheckpointError> {
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, f) in &adapter.factors {
        for (suffix, vals, dims) in [
            ("a", &f.a, vec![adapter.rank, f.in_dim]),
            ("b", &f.b, vec![f.out_dim, adapter.rank]),
        ] {
            let bytes = f64s_to_bytes(vals);
            tensors.insert(
                format!("lora.{name}.{suffix}"),
                TensorMeta { dims, offset: payload.len() as u64, len: bytes.len() as u64 },
            );
            payload.extend_from_slice(&bytes);
        }
    }
    let header = AdapterHeader {
        spec_hash: spec_hash(spec),
        rank: adapter.rank,
        alpha: adapter.alpha,
        targets: adapter.targets.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    write_container(path, ADAPTER_MAGIC, &header_json, &payload)
}

/// Load an adapter checkpoint and validate it against the current spec.
pub fn load_adapter(path: &Path, spec: &PolicySpec) -> Result<AdapterState, CheckpointError> {
    let (header_bytes, payload) = read_container(path, ADAPTER_MAGIC, "GRPOADPT")?;
    let header: AdapterHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::HeaderInvalid(e.to_string()))?;
    if header.spec_hash != spec_hash(spec) {
        return Err(CheckpointError::SpecMismatch(format!(
            "spec hash {} != current {}",
            header.spec_hash,
            spec_hash(spec)
        )));
    }
    let expected_targets = lora_target_names(spec);
    if header.targets != expected_targets {
        return Err(CheckpointError::SpecMismatch("adapter target list differs".into()));
    }
    let mut factors = BTreeMap::new();
    for name in &header.targets {
        let shape = ModelWeights::shape_of(spec, name)
            .ok_or_else(|| CheckpointError::SpecMismatch(format!("unknown target {name}")))?;
        let (out_dim, in_dim) = (shape[0], shape[1]);
        let a_meta = header
            .tensors
            .get(&format!("lora.{name}.a"))
            .ok_or_else(|| CheckpointError::HeaderInvalid(format!("missing tensor for {name}")))?;
        let b_meta = header
            .tensors
            .get(&format!("lora.{name}.b"))
            .ok_or_else(|| CheckpointError::HeaderInvalid(format!("missing tensor for {name}")))?;
        if a_meta.dims != [header.rank, in_dim] || b_meta.dims != [out_dim, header.rank] {
            return Err(CheckpointError::SpecMismatch(format!(
                "factor dims for {name} disagree with rank {} and target shape {shape:?}",
                header.rank
            )));
        }
        let a = extract_tensor(&payload, &format!("lora.{name}.a"), a_meta)?;
        let b = extract_tensor(&payload, &format!("lora.{name}.b"), b_meta)?;
        factors.insert(name.clone(), LoraFactors { a, b, in_dim, out_dim });
    }
    Ok(AdapterState { rank: header.rank, alpha: header.alpha, targets: header.targets, factors })
}

/// Write a base-model checkpoint (weights + tokenizer).
pub fn save_base(
    path: &Path,
    weights: &ModelWeights,
    tokenizer: &Tokenizer,
) -> Result<(), CheckpointError> {
    let mut tensors = BTreeMap::new();
    let mut chunks: Vec<Vec<u8>> = Vec::new();
    let mut offset = 0u64;
    // BTreeMap iteration orders the header; payload offsets must follow it.
    let names: BTreeMap<String, ()> =
        ModelWeights::param_names(&weights.spec).into_iter().map(|n| (n, ())).collect();
    for name in names.keys() {
        let vals = weights.tensor(name).expect("named tensor");
        let dims = ModelWeights::shape_of(&weights.spec, name).expect("named tensor");
        let bytes = f64s_to_bytes(vals);
        tensors.insert(
            name.clone(),
            TensorMeta { dims, offset, len: bytes.len() as u64 },
        );
        offset += bytes.len() as u64;
        chunks.push(bytes);
    }
    let header = BaseHeader {
        spec: weights.spec.clone(),
        tokenizer_mode: tokenizer.mode(),
        vocab: tokenizer.vocab().to_vec(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let payload: Vec<u8> = chunks.concat();
    write_container(path, BASE_MAGIC, &header_json, &payload)
}

/// Load a base-model checkpoint.
pub fn load_base(path: &Path) -> Result<(ModelWeights, Tokenizer), CheckpointError> {
    let (header_bytes, payload) = read_container(path, BASE_MAGIC, "GRPOBASE")?;
    let header: BaseHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::HeaderInvalid(e.to_string()))?;
    let tokenizer = Tokenizer::from_vocab(header.tokenizer_mode, header.vocab);
    if tokenizer.tokenizer_id() != header.spec.tokenizer_id {
        return Err(CheckpointError::SpecMismatch(format!(
            "stored vocab hashes to {}, spec says {}",
            tokenizer.tokenizer_id(),
            header.spec.tokenizer_id
        )));
    }
    let mut weights = ModelWeights::init(header.spec.clone(), 0)
        .map_err(|e| CheckpointError::SpecMismatch(e.to_string()))?;
    for name in ModelWeights::param_names(&header.spec) {
        let meta = header
            .tensors
            .get(&name)
            .ok_or_else(|| CheckpointError::HeaderInvalid(format!("missing tensor {name}")))?;
        let expected = ModelWeights::shape_of(&header.spec, &name).unwrap();
        if meta.dims != expected {
            return Err(CheckpointError::SpecMismatch(format!(
                "tensor {name} has dims {:?}, spec implies {expected:?}",
                meta.dims
            )));
        }
        *weights.tensor_mut(&name).unwrap() = extract_tensor(&payload, &name, meta)?;
    }
    Ok((weights, tokenizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward_logits, Policy};

    fn spec_and_tokenizer() -> (PolicySpec, Tokenizer) {
        let tokenizer =
            Tokenizer::word_level(["alice", "bob", "is", "red"].map(String::from));
        let spec = PolicySpec {
            vocab_size: tokenizer.vocab_size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 12,
            tokenizer_id: tokenizer.tokenizer_id(),
        };
        (spec, tokenizer)
    }

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn adapter_round_trip_is_bit_exact() {
        use rand::Rng;
        let (spec, _) = spec_and_tokenizer();
        let mut adapter = AdapterState::init(&spec, 3, 6.0, 1);
        let mut rng = crate::rng::rng_from(2);
        for f in adapter.factors.values_mut() {
            for v in f.b.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_adapter(&path, &spec, &adapter).unwrap();
        let loaded = load_adapter(&path, &spec).unwrap();
        assert_eq!(adapter, loaded);

        // Forward outputs are bit-identical through a save/load cycle.
        let w = ModelWeights::init(spec, 9).unwrap();
        let before = Policy::dense(w.clone()).with_adapter(adapter).effective_weights();
        let after = Policy::dense(w).with_adapter(loaded).effective_weights();
        let a = forward_logits(&before, &[1, 2, 3]).unwrap();
        let b = forward_logits(&after, &[1, 2, 3]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_file_is_structured_error() {
        let (spec, _) = spec_and_tokenizer();
        let adapter = AdapterState::init(&spec, 2, 4.0, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_adapter(&path, &spec, &adapter).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 15, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_adapter(&path, &spec).unwrap_err();
            assert!(
                matches!(
                    err,
                    CheckpointError::Truncated(_) | CheckpointError::ChecksumMismatch { .. }
                ),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let (spec, _) = spec_and_tokenizer();
        let adapter = AdapterState::init(&spec, 2, 4.0, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_adapter(&path, &spec, &adapter).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_adapter(&path, &spec).unwrap_err(),
            CheckpointError::ChecksumMismatch { .. }
        ));
    }

    #[test]
    fn spec_mismatch_rejected() {
        let (spec, _) = spec_and_tokenizer();
        let adapter = AdapterState::init(&spec, 2, 4.0, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_adapter(&path, &spec, &adapter).unwrap();
        let other = PolicySpec { d_model: 16, n_heads: 4, ..spec };
        assert!(matches!(
            load_adapter(&path, &other).unwrap_err(),
            CheckpointError::SpecMismatch(_)
        ));
    }

    #[test]
    fn wrong_magic_rejected() {
        let (spec, tokenizer) = spec_and_tokenizer();
        let w = ModelWeights::init(spec.clone(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_base(&path, &w, &tokenizer).unwrap();
        assert!(matches!(
            load_adapter(&path, &spec).unwrap_err(),
            CheckpointError::BadMagic { .. }
        ));
    }

    #[test]
    fn header_tensor_lengths_equal_dims_times_eight() {
        let (spec, _) = spec_and_tokenizer();
        let adapter = AdapterState::init(&spec, 2, 4.0, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_adapter(&path, &spec, &adapter).unwrap();
        let (header_bytes, _) = read_container(&path, ADAPTER_MAGIC, "GRPOADPT").unwrap();
        let header: AdapterHeader = serde_json::from_slice(&header_bytes).unwrap();
        assert!(!header.tensors.is_empty());
        for (name, meta) in &header.tensors {
            let numel: usize = meta.dims.iter().product();
            assert_eq!(meta.len as usize, numel * 8, "{name}");
        }
    }

    #[test]
    fn base_round_trip_restores_weights_and_tokenizer() {
        let (spec, tokenizer) = spec_and_tokenizer();
        let w = ModelWeights::init(spec, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_base(&path, &w, &tokenizer).unwrap();
        let (loaded_w, loaded_t) = load_base(&path).unwrap();
        assert_eq!(w, loaded_w);
        assert_eq!(tokenizer.vocab(), loaded_t.vocab());
        assert_eq!(tokenizer.tokenizer_id(), loaded_t.tokenizer_id());
    }
}
