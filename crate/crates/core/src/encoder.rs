//! Contextual encoders producing per-position vectors and the `[CLS]` vector.
//!
//! Two sources are supported: a small post-norm transformer trained jointly
//! with the heads, and precomputed embeddings read from an `S2DE` file (treated
//! as frozen).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{param_block, ParamSet, Tape, Tensor2, Var};
use crate::subword::TokenSeq;

const EMBEDDING_MAGIC: &[u8; 4] = b"S2DE";
const EMBEDDING_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

/// Per-position representations `H` (`l x d`); the `[CLS]` vector is row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSeq {
    h: Tensor2,
}

impl EncodedSeq {
    pub fn new(h: Tensor2) -> Result<Self> {
        if h.rows() == 0 {
            return Err(Error::Mismatch {
                what: "sequence length",
                expected: 1,
                found: 0,
            });
        }
        Ok(EncodedSeq { h })
    }

    pub fn h(&self) -> &Tensor2 {
        &self.h
    }

    pub fn cls(&self) -> &[f64] {
        self.h.row(0)
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.h.cols()
    }

    pub fn into_tensor(self) -> Tensor2 {
        self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub cap: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn new(vocab: usize) -> Self {
        EncoderConfig {
            vocab,
            d: 64,
            layers: 2,
            heads: 4,
            ff: 256,
            cap: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

param_block! {
    /// One post-norm transformer layer.
    LayerParams => LayerVars {
        wq, bq, wk, bk, wv, bv, wo, bo,
        ln1_gamma, ln1_beta,
        w1, b1, w2, b2,
        ln2_gamma, ln2_beta,
    }
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(d: usize, ff: usize, rng: &mut R) -> Self {
        let bd = 1.0 / (d as f64).sqrt();
        let bf = 1.0 / (ff as f64).sqrt();
        LayerParams {
            wq: Tensor2::uniform(d, d, bd, rng),
            bq: Tensor2::zeros(1, d),
            wk: Tensor2::uniform(d, d, bd, rng),
            bk: Tensor2::zeros(1, d),
            wv: Tensor2::uniform(d, d, bd, rng),
            bv: Tensor2::zeros(1, d),
            wo: Tensor2::uniform(d, d, bd, rng),
            bo: Tensor2::zeros(1, d),
            ln1_gamma: Tensor2::filled(1, d, 1.0),
            ln1_beta: Tensor2::zeros(1, d),
            w1: Tensor2::uniform(ff, d, bd, rng),
            b1: Tensor2::zeros(1, ff),
            w2: Tensor2::uniform(d, ff, bf, rng),
            b2: Tensor2::zeros(1, d),
            ln2_gamma: Tensor2::filled(1, d, 1.0),
            ln2_beta: Tensor2::zeros(1, d),
        }
    }
}

/// Piece and position embeddings plus the layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams {
    pub config: EncoderConfig,
    pub tok: Tensor2,
    pub pos: Tensor2,
    pub layers: Vec<LayerParams>,
}

pub struct EncoderVars {
    tok: Var,
    pos: Var,
    layers: Vec<LayerVars>,
}

impl ParamSet for ToyEncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor2)) {
        f(format!("{prefix}tok"), &self.tok);
        f(format!("{prefix}pos"), &self.pos);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}l{i}."), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        f(format!("{prefix}tok"), &mut self.tok);
        f(format!("{prefix}pos"), &mut self.pos);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}l{i}."), f);
        }
    }
}

impl ToyEncoderParams {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bd = 1.0 / (config.d as f64).sqrt();
        let tok = Tensor2::uniform(config.vocab, config.d, bd, rng);
        let pos = Tensor2::uniform(config.cap, config.d, bd, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(config.d, config.ff, rng))
            .collect();
        Ok(ToyEncoderParams {
            config,
            tok,
            pos,
            layers,
        })
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> EncoderVars {
        EncoderVars {
            tok: tape.param(&self.tok),
            pos: tape.param(&self.pos),
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Runs the stack on `ids`. Dropout is applied only when `rng` is given.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        vars: &EncoderVars,
        ids: &[u32],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let l = ids.len();
        if l > cfg.cap {
            return Err(Error::Mismatch {
                what: "sequence length (cap)",
                expected: cfg.cap,
                found: l,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
            return Err(Error::IdOutOfRange {
                id: bad as usize,
                vocab: cfg.vocab,
            });
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather(vars.tok, &ids)?;
        let pos = tape.rows(vars.pos, 0, l)?;
        let mut x = tape.add(tok, pos)?;
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, cfg.dropout, r)?;
        }

        let dh = cfg.d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for lv in &vars.layers {
            let q = tape.affine(x, lv.wq, lv.bq)?;
            let k = tape.affine(x, lv.wk, lv.bk)?;
            let v = tape.affine(x, lv.wv, lv.bv)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.cols(q, h * dh, dh)?;
                let kh = tape.cols(k, h * dh, dh)?;
                let vh = tape.cols(v, h * dh, dh)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let joined = tape.concat_cols(&heads)?;
            let mut attn_out = tape.affine(joined, lv.wo, lv.bo)?;
            if let Some(r) = rng.as_deref_mut() {
                attn_out = tape.dropout(attn_out, cfg.dropout, r)?;
            }
            let res = tape.add(x, attn_out)?;
            x = tape.layer_norm(res, lv.ln1_gamma, lv.ln1_beta, LN_EPS)?;

            let hidden = tape.affine(x, lv.w1, lv.b1)?;
            let hidden = tape.gelu(hidden)?;
            let mut ff_out = tape.affine(hidden, lv.w2, lv.b2)?;
            if let Some(r) = rng.as_deref_mut() {
                ff_out = tape.dropout(ff_out, cfg.dropout, r)?;
            }
            let res = tape.add(x, ff_out)?;
            x = tape.layer_norm(res, lv.ln2_gamma, lv.ln2_beta, LN_EPS)?;
        }
        Ok(x)
    }
}

/// Inference-mode encoding: the last layer's output is `H`.
pub fn encode_seq(params: &ToyEncoderParams, seq: &TokenSeq) -> Result<EncodedSeq> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = params.forward_on_tape::<rand_chacha::ChaCha8Rng>(&mut tape, &vars, seq.ids(), None)?;
    EncodedSeq::new(tape.value(h).clone())
}

/// Writes `h` as an `S2DE` file (values narrowed to `f32`).
pub fn write_embeddings(path: &Path, h: &Tensor2) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * h.len());
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(h.cols() as u32).to_le_bytes());
    for &v in h.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads precomputed embeddings for `seq`; the stored length must equal the
/// sequence length and the stored width must equal `d`.
pub fn load_embeddings(path: &Path, seq: &TokenSeq, d: usize) -> Result<EncodedSeq> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::format(path, "missing S2DE magic"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
    let version = word(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (l, width) = (word(8) as usize, word(12) as usize);
    if l != seq.len() {
        return Err(Error::Mismatch {
            what: "embedding sequence length",
            expected: seq.len(),
            found: l,
        });
    }
    if width != d {
        return Err(Error::Mismatch {
            what: "embedding dimension",
            expected: d,
            found: width,
        });
    }
    let payload = &bytes[16..];
    if payload.len() != 4 * l * width {
        return Err(Error::format(path, "truncated embedding payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EncodedSeq::new(Tensor2::from_vec(l, width, data)?)
}
