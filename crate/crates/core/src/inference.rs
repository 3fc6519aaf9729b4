//! Span decoding, surface recovery and P/R/F1 evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadOutputs;
use crate::model::Model;
use crate::numkernel::Tensor2;
use crate::subword::TokenSeq;
use crate::training::{build_structural_mask, select_candidates, MaskedSelection, StructuralMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Cells must exceed this probability.
    pub threshold: f64,
    /// Maximum `end - start` in pieces; `None` is unbounded.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            threshold: 0.5,
            max_len: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "evaluation threshold {} not in (0, 1)",
                self.threshold
            )));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("maximum span length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cells of `m_l` above the threshold and within the length cap, ordered by `(i, j)`.
pub fn decode_spans(m_l: &MaskedSelection, cfg: &DecodeConfig) -> Vec<(usize, usize, f64)> {
    let mut out: Vec<(usize, usize, f64)> = m_l
        .cells
        .iter()
        .filter(|&&((i, j), p)| {
            p > cfg.threshold && j >= i && cfg.max_len.map_or(true, |lm| j - i <= lm)
        })
        .map(|&((i, j), p)| (i, j, p))
        .collect();
    out.sort_by_key(|&(i, j, _)| (i, j));
    out
}

/// Fallback matcher without a 2D head: each start above `threshold` pairs
/// with the nearest end above `threshold` at or after it. Ends may be shared
/// by several starts.
pub fn decode_spans_1d(s: &[f64], e: &[f64], threshold: f64, mask: &StructuralMask) -> Vec<(usize, usize)> {
    let ends: Vec<usize> = (0..e.len())
        .filter(|&j| e[j] > threshold && mask.end_valid(j))
        .collect();
    (0..s.len())
        .filter(|&i| s[i] > threshold && mask.start_valid(i))
        .filter_map(|i| {
            let k = ends.partition_point(|&j| j < i);
            ends.get(k).map(|&j| (i, j))
        })
        .collect()
}

/// One extracted entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub sentence: usize,
    pub entity_type: String,
    pub start_piece: usize,
    pub end_piece: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub score: f64,
}

/// Recovers surfaces and char offsets for decoded piece spans.
pub fn to_entities(
    spans: &[(usize, usize, f64)],
    seq: &TokenSeq,
    entity_type: &str,
    sentence: usize,
) -> Result<Vec<SpanPrediction>> {
    spans
        .iter()
        .map(|&(i, j, score)| {
            let (start, end) = seq.char_range(i, j)?;
            Ok(SpanPrediction {
                sentence,
                entity_type: entity_type.to_string(),
                start_piece: i,
                end_piece: j,
                start,
                end,
                text: seq.decode_span(i, j)?,
                score,
            })
        })
        .collect()
}

/// Masked head outputs and decoded spans for one sequence.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub m: Option<Tensor2>,
    pub attention: Option<Tensor2>,
    pub selection: MaskedSelection,
    pub spans: Vec<(usize, usize, f64)>,
}

/// Inference for one `(query, sentence)` sequence.
pub fn extract(
    model: &Model,
    seq: &TokenSeq,
    select_threshold: f64,
    decode: &DecodeConfig,
) -> Result<Extraction> {
    let out = model.predict(seq)?;
    extract_from_outputs(seq, out, select_threshold, decode)
}

/// Masks raw head outputs, selects candidates and decodes spans.
///
/// `s` and `e` are thresholded at `select_threshold`; with a 2D matrix the
/// selected cells are decoded with `decode`, otherwise starts and ends are
/// paired by [`decode_spans_1d`] and filtered by the length cap.
pub fn extract_from_outputs(
    seq: &TokenSeq,
    out: HeadOutputs,
    select_threshold: f64,
    decode: &DecodeConfig,
) -> Result<Extraction> {
    let l = seq.len();
    if out.s.len() != l || out.e.len() != l {
        return Err(Error::shape("head outputs", (out.s.len(), out.e.len()), (l, l)));
    }
    if let Some(m) = &out.m {
        if (m.rows(), m.cols()) != (l, l) {
            return Err(Error::shape("2D matrix", (m.rows(), m.cols()), (l, l)));
        }
    }
    let mask = build_structural_mask(seq);
    let (mut s, mut e) = (out.s, out.e);
    mask.apply_start(&mut s);
    mask.apply_end(&mut e);
    let m = out.m.map(|mut m| {
        mask.apply_matrix(&mut m);
        m
    });
    let selection = select_candidates(&s, &e, m.as_ref(), select_threshold, &mask, None);
    let spans = if m.is_some() {
        decode_spans(&selection, decode)
    } else {
        decode_spans_1d(&s, &e, select_threshold, &mask)
            .into_iter()
            .filter(|&(i, j)| decode.max_len.map_or(true, |lm| j - i <= lm))
            .map(|(i, j)| (i, j, 0.5 * (s[i] + e[j])))
            .collect()
    };
    Ok(Extraction {
        s,
        e,
        m,
        attention: out.attention,
        selection,
        spans,
    })
}

/// A labeled span in sentence char offsets `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldSpan {
    pub sentence: usize,
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

impl From<&SpanPrediction> for GoldSpan {
    fn from(p: &SpanPrediction) -> Self {
        GoldSpan {
            sentence: p.sentence,
            entity_type: p.entity_type.clone(),
            start: p.start,
            end: p.end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Prf::from_pr(ratio(self.correct, self.predicted), ratio(self.correct, self.gold))
    }
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_type: BTreeMap<String, Counts>,
    pub total: Counts,
    pub micro: Prf,
    /// Per-type P, R and F1, each averaged over types.
    pub macro_avg: Prf,
}

/// Strict matching: a prediction is correct when sentence, type and both
/// char offsets equal a gold span. Duplicates collapse on both sides.
pub fn evaluate(pred: &[SpanPrediction], gold: &[GoldSpan]) -> EvalReport {
    let predicted: BTreeSet<GoldSpan> = pred.iter().map(GoldSpan::from).collect();
    let gold: BTreeSet<GoldSpan> = gold.iter().cloned().collect();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for p in &predicted {
        let c = per_type.entry(p.entity_type.clone()).or_default();
        c.predicted += 1;
        if gold.contains(p) {
            c.correct += 1;
        }
    }
    for g in &gold {
        per_type.entry(g.entity_type.clone()).or_default().gold += 1;
    }
    let total = per_type.values().fold(Counts::default(), |acc, c| Counts {
        predicted: acc.predicted + c.predicted,
        gold: acc.gold + c.gold,
        correct: acc.correct + c.correct,
    });
    let macro_avg = if per_type.is_empty() {
        Prf::default()
    } else {
        let n = per_type.len() as f64;
        let sum = per_type.values().map(Counts::prf).fold(Prf::default(), |a, p| Prf {
            precision: a.precision + p.precision,
            recall: a.recall + p.recall,
            f1: a.f1 + p.f1,
        });
        Prf {
            precision: sum.precision / n,
            recall: sum.recall / n,
            f1: sum.f1 / n,
        }
    };
    EvalReport {
        micro: total.prf(),
        per_type,
        total,
        macro_avg,
    }
}

impl EvalReport {
    pub fn aggregate(&self, mode: Averaging) -> Prf {
        match mode {
            Averaging::Micro => self.micro,
            Averaging::Macro => self.macro_avg,
        }
    }

    /// `P=.. R=.. F1=..` in percent with one decimal.
    pub fn headline(&self, mode: Averaging) -> String {
        let p = self.aggregate(mode);
        format!(
            "P={:.1} R={:.1} F1={:.1}",
            100.0 * p.precision,
            100.0 * p.recall,
            100.0 * p.f1
        )
    }

    pub fn table(&self, mode: Averaging) -> String {
        let width = self
            .per_type
            .keys()
            .map(String::len)
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        writeln!(
            s,
            "{:<width$}  {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}",
            "type", "pred", "gold", "corr", "P", "R", "F1"
        )
        .unwrap();
        let mut row = |name: &str, c: Option<Counts>, p: Prf| {
            let (a, b, k) = c.map_or(("-".into(), "-".into(), "-".into()), |c| {
                (c.predicted.to_string(), c.gold.to_string(), c.correct.to_string())
            });
            writeln!(
                s,
                "{:<width$}  {:>6} {:>6} {:>6}  {:>6.1} {:>6.1} {:>6.1}",
                name,
                a,
                b,
                k,
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1
            )
            .unwrap();
        };
        for (name, c) in &self.per_type {
            row(name, Some(*c), c.prf());
        }
        match mode {
            Averaging::Micro => row("micro", Some(self.total), self.micro),
            Averaging::Macro => row("macro", None, self.macro_avg),
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("type,predicted,gold,correct,precision,recall,f1\n");
        for (name, c) in &self.per_type {
            let p = c.prf();
            writeln!(
                s,
                "{name},{},{},{},{},{},{}",
                c.predicted, c.gold, c.correct, p.precision, p.recall, p.f1
            )
            .unwrap();
        }
        let t = self.total;
        let m = self.micro;
        writeln!(
            s,
            "micro,{},{},{},{},{},{}",
            t.predicted, t.gold, t.correct, m.precision, m.recall, m.f1
        )
        .unwrap();
        let m = self.macro_avg;
        writeln!(s, "macro,,,,{},{},{}", m.precision, m.recall, m.f1).unwrap();
        s
    }
}
