//! `S2DC` checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `S2DC`, version `u32`, config length `u32`, config JSON,
//! tensor count `u32`, then per tensor: name length `u32`, name bytes,
//! rows `u32`, cols `u32`, `rows * cols` `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::QuerySpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numkernel::{ParamSet, Tensor2};
use crate::subword::MergeTable;

pub const MAGIC: &[u8; 4] = b"S2DC";
pub const VERSION: u32 = 1;

/// Everything besides the tensors needed to rebuild and run a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Merge table in its file format.
    pub merges: String,
    pub vocab_hash: String,
    pub queries: QuerySpec,
    pub epoch: usize,
    pub seed: u64,
    pub lambda: f64,
    pub t_train: f64,
}

impl CheckpointMeta {
    pub fn merge_table(&self) -> Result<MergeTable> {
        MergeTable::from_file_string(&self.merges, Path::new("<checkpoint>"))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, meta)?)?;
    Ok(())
}

pub fn checkpoint_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.model != model.config {
        return Err(Error::Config("checkpoint metadata does not describe this model".into()));
    }
    let config = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, len_u32(config.len())?);
    out.extend_from_slice(&config);
    put_u32(&mut out, len_u32(model.tensor_count())?);
    let mut failed = None;
    model.visit("", &mut |name, t| {
        if failed.is_some() {
            return;
        }
        match (len_u32(name.len()), len_u32(t.rows()), len_u32(t.cols())) {
            (Ok(n), Ok(r), Ok(c)) => {
                put_u32(&mut out, n);
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, r);
                put_u32(&mut out, c);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => failed = Some(e),
        }
    });
    match failed {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    parse_checkpoint(&fs::read(path)?, path)
}

/// Loads a checkpoint and rejects it unless its encoder shape and ablation
/// match `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<(Model, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    check_config(expected, &model.config)?;
    Ok((model, meta))
}

pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let (a, b) = (&expected.encoder, &found.encoder);
    for (what, x, y) in [
        ("d", a.d, b.d),
        ("layers", a.layers, b.layers),
        ("attention heads", a.heads, b.heads),
        ("feed-forward width", a.ff, b.ff),
        ("cap", a.cap, b.cap),
        ("vocabulary", a.vocab, b.vocab),
    ] {
        if x != y {
            return Err(Error::Mismatch {
                what,
                expected: x,
                found: y,
            });
        }
    }
    if expected.ablation != found.ablation {
        return Err(Error::Config(format!(
            "ablation mismatch: expected {:?}, found {:?}",
            expected.ablation, found.ablation
        )));
    }
    Ok(())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not an S2DC checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}, expected {VERSION}"),
        ));
    }
    let n = r.u32("config length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let table = meta.merge_table()?;
    if table.fingerprint() != meta.vocab_hash {
        return Err(Error::format(path, "merge table does not match its recorded hash"));
    }
    if table.vocab_size() != meta.model.encoder.vocab {
        return Err(Error::Mismatch {
            what: "vocabulary",
            expected: meta.model.encoder.vocab,
            found: table.vocab_size(),
        });
    }

    // Built for shapes and names only; every value is overwritten below.
    let mut model = Model::init(meta.model.clone(), 0)?;
    let count = r.u32("tensor count")? as usize;
    if count != model.tensor_count() {
        return Err(Error::Mismatch {
            what: "tensor count",
            expected: model.tensor_count(),
            found: count,
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let raw = r.take(rows.saturating_mul(cols).saturating_mul(8), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }

    let mut k = 0;
    let mut failed = None;
    model.visit_mut("", &mut |name, t| {
        if failed.is_some() {
            return;
        }
        let (stored_name, stored) = &tensors[k];
        k += 1;
        if *stored_name != name {
            failed = Some(Error::format(
                path,
                format!("expected tensor `{name}`, found `{stored_name}`"),
            ));
        } else if stored.rows() != t.rows() {
            failed = Some(Error::Mismatch {
                what: "tensor rows",
                expected: t.rows(),
                found: stored.rows(),
            });
        } else if stored.cols() != t.cols() {
            failed = Some(Error::Mismatch {
                what: "tensor cols",
                expected: t.cols(),
                found: stored.cols(),
            });
        } else {
            *t = stored.clone();
        }
    });
    match failed {
        Some(e) => Err(e),
        None => Ok((model, meta)),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("length {n} does not fit the checkpoint format")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::Ablation;
    use crate::subword::train_bpe;

    fn fixture(ablation: Ablation) -> (Model, CheckpointMeta) {
        let table = train_bpe(&["alpha beta gamma", "beta gamma"], 6).unwrap();
        let mut cfg = ModelConfig::new(table.vocab_size());
        cfg.encoder.d = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.ff = 16;
        cfg.encoder.cap = 24;
        cfg.ablation = ablation;
        let model = Model::init(cfg.clone(), 5).unwrap();
        let meta = CheckpointMeta {
            model: cfg,
            merges: table.to_file_string(),
            vocab_hash: table.fingerprint(),
            queries: QuerySpec([("G".to_string(), "gene".to_string())].into_iter().collect()),
            epoch: 3,
            seed: 5,
            lambda: 0.1,
            t_train: 0.5,
        };
        (model, meta)
    }

    fn bits(m: &Model) -> Vec<u64> {
        let mut out = Vec::new();
        m.visit("", &mut |_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        for ablation in [
            Ablation::default(),
            Ablation {
                interactive_attention: false,
                two_dp: false,
            },
        ] {
            let (model, meta) = fixture(ablation);
            let bytes = checkpoint_bytes(&model, &meta).unwrap();
            let (back, meta2) = parse_checkpoint(&bytes, Path::new("x")).unwrap();
            assert_eq!(bits(&back), bits(&model));
            assert_eq!(meta2, meta);
            assert_eq!(checkpoint_bytes(&back, &meta2).unwrap(), bytes);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let (model, meta) = fixture(Ablation::default());
        let mut bytes = checkpoint_bytes(&model, &meta).unwrap();
        bytes[0] = b'X';
        let err = parse_checkpoint(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn bad_version_rejected() {
        let (model, meta) = fixture(Ablation::default());
        let mut bytes = checkpoint_bytes(&model, &meta).unwrap();
        bytes[4] = 9;
        let err = parse_checkpoint(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn every_truncation_rejected() {
        let (model, meta) = fixture(Ablation::default());
        let bytes = checkpoint_bytes(&model, &meta).unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(parse_checkpoint(&bytes[..cut], Path::new("x")).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn mismatched_d_names_both_values() {
        let (model, meta) = fixture(Ablation::default());
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f.path(), &model, &meta).unwrap();
        let mut expected = meta.model.clone();
        expected.encoder.d = 16;
        match load_checkpoint_expecting(f.path(), &expected) {
            Err(Error::Mismatch {
                what,
                expected,
                found,
            }) => assert_eq!((what, expected, found), ("d", 16, 8)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_shape_disagreeing_with_config_rejected() {
        let (model, mut meta) = fixture(Ablation::default());
        let bytes = checkpoint_bytes(&model, &meta).unwrap();
        // rewrite the config block to claim a wider feed-forward layer
        meta.model.encoder.ff = 32;
        let config = serde_json::to_vec(&meta).unwrap();
        let old_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&(config.len() as u32).to_le_bytes());
        forged.extend_from_slice(&config);
        forged.extend_from_slice(&bytes[12 + old_len..]);
        assert!(matches!(
            parse_checkpoint(&forged, Path::new("x")),
            Err(Error::Mismatch { .. })
        ));
    }
}
