//! Named-tensor checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      5 bytes   "RBGT1"
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_tensors  u32
//! repeated n_tensors times:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   rank     u32
//!   dims     rank x u32
//!   data     prod(dims) x f32, row-major
//! ```
//!
//! Tensors appear in the canonical order of `Parameters::named_tensors`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 5] = b"RBGT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub step: usize,
    /// Free-form provenance (e.g. the run configuration).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_checkpoint(params: &Parameters, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let tensors = params.named_tensors();
    let mut out = Vec::with_capacity(64 + meta_json.len() + 4 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for x in &m.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Parameters, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    meta.model_config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut params = Parameters::zeros(&meta.model_config);
    let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for (name, tensor) in expected.iter().zip(params.tensors_mut()) {
        let name_len = r.u32()? as usize;
        let found = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        if found != name {
            return Err(Error::CorruptCheckpoint(format!(
                "expected tensor `{name}`, found `{found}`"
            )));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if dims != [tensor.rows as u32, tensor.cols as u32] {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` has shape {dims:?}, expected [{}, {}]",
                tensor.rows, tensor.cols
            )));
        }
        let raw = r.take(4 * tensor.data.len())?;
        for (x, chunk) in tensor.data.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        if !tensor.is_finite() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` has non-finite values"
            )));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((params, meta))
}

pub fn save_checkpoint(params: &Parameters, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};

    fn fixture() -> (Parameters, CheckpointMeta) {
        let cfg = ModelConfig::new(16, 12, 48);
        let p = init_params(&cfg, 3).unwrap();
        let meta = CheckpointMeta {
            model_config: cfg,
            seed: 3,
            epoch: 2,
            step: 10,
            extra: serde_json::json!({"note": "unit"}),
        };
        (p, meta)
    }

    #[test]
    fn round_trip_is_bit_exact_and_forward_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rbgt");
        let (p, meta) = fixture();
        save_checkpoint(&p, &meta, &path).unwrap();
        let (back, meta_back) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta_back);
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            let bits_a: Vec<u32> = a.data.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let toks: Vec<u32> = (0..48).map(|i| (i % 12) as u32).collect();
        assert_eq!(
            forward(&p, &toks).unwrap().logits,
            forward(&back, &toks).unwrap().logits
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (p, meta) = fixture();
        let bytes = encode_checkpoint(&p, &meta).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        // poison the last float with NaN
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&nan),
            Err(Error::CorruptCheckpoint(m)) if m.contains("non-finite")
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (p, mut meta) = fixture();
        let bytes = encode_checkpoint(&p, &meta).unwrap();
        // decode with metadata claiming a different width
        meta.model_config.d_model = 8;
        let mut forged = encode_checkpoint(&Parameters::zeros(&meta.model_config), &meta).unwrap();
        let header_len = 5 + 4 + serde_json::to_vec(&meta).unwrap().len();
        forged.truncate(header_len);
        let orig_header = 5 + 4 + u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        forged.extend_from_slice(&bytes[orig_header..]);
        assert!(matches!(
            decode_checkpoint(&forged),
            Err(Error::CorruptCheckpoint(m)) if m.contains("shape")
        ));
    }
}
