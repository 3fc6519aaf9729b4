//! Dataset and query ingestion, checkpoints, matrix export and the
//! command-line surface.

mod checkpoint;
mod cli;
mod data;
mod dump;
mod synth;

use rayon::prelude::*;

pub use checkpoint::{
    check_config, checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, parse_checkpoint,
    save_checkpoint, CheckpointMeta, MAGIC, VERSION,
};
pub use cli::{run_command, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
pub use data::{
    build_train_units, expand_samples, load_dataset, write_dataset, DatasetSample, EntitySpan,
    QuerySpec, QueryUnit,
};
pub use dump::{dump_matrices, fmt_value, matrix_csv, tokens_csv};
pub use synth::{nesting_rate, synthetic_corpus, synthetic_queries, CELL, DNA, PROTEIN};

use crate::error::Result;
use crate::inference::{extract, to_entities, DecodeConfig, Extraction, GoldSpan, SpanPrediction};
use crate::model::Model;
use crate::subword::{MergeTable, TokenSeq};

/// Gold spans of a dataset in evaluation form.
pub fn gold_spans(samples: &[DatasetSample]) -> Vec<GoldSpan> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            s.entities.iter().map(move |e| GoldSpan {
                sentence: k,
                entity_type: e.entity_type.clone(),
                start: e.start,
                end: e.end,
            })
        })
        .collect()
}

/// Inference settings shared by `eval` and `extract`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictConfig {
    /// Threshold on `s` and `e` for candidate selection.
    pub select_threshold: f64,
    pub decode: DecodeConfig,
    pub cap: usize,
}

/// One query unit after inference.
pub struct UnitPrediction {
    pub sentence: usize,
    pub entity_type: String,
    pub seq: TokenSeq,
    pub extraction: Extraction,
    pub entities: Vec<SpanPrediction>,
}

/// Runs every (sentence, type) unit through the model. Units are processed
/// in parallel; the output keeps the order of [`expand_samples`].
pub fn predict_samples(
    model: &Model,
    table: &MergeTable,
    queries: &QuerySpec,
    samples: &[DatasetSample],
    cfg: &PredictConfig,
) -> Result<Vec<UnitPrediction>> {
    let units = expand_samples(samples, queries)?;
    units
        .par_iter()
        .map(|u| {
            let seq = table.encode(u.query, u.text, cfg.cap)?;
            let extraction = extract(model, &seq, cfg.select_threshold, &cfg.decode)?;
            let entities = to_entities(&extraction.spans, &seq, u.entity_type, u.sentence)?;
            Ok(UnitPrediction {
                sentence: u.sentence,
                entity_type: u.entity_type.to_string(),
                seq,
                extraction,
                entities,
            })
        })
        .collect()
}

/// Flattened predictions of all units.
pub fn all_entities(units: &[UnitPrediction]) -> Vec<SpanPrediction> {
    units.iter().flat_map(|u| u.entities.iter().cloned()).collect()
}
