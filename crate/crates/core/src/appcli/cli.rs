use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::data::{build_train_units, expand_samples, load_dataset, write_dataset, DatasetSample, QuerySpec};
use super::dump::dump_matrices;
use super::synth::{synthetic_corpus, synthetic_queries};
use super::{all_entities, gold_spans, predict_samples, PredictConfig};
use crate::error::{Error, Result};
use crate::heads::Ablation;
use crate::inference::{evaluate, Averaging, DecodeConfig};
use crate::model::{Model, ModelConfig, DEFAULT_HEAD_DROPOUT};
use crate::subword::{train_bpe, MergeTable};
use crate::training::{parameter_count, train, EpochLog, LossConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "span2d", version, about = "Query-conditioned nested entity extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Score a checkpoint against a labeled dataset
    Eval(EvalArgs),
    /// Extract entities from raw text or a dataset
    Extract(ExtractArgs),
    /// Learn a BPE merge table from a text corpus
    BpeTrain(BpeArgs),
    /// Write the generated nested-entity corpus and its queries
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSONL dataset
    #[arg(long)]
    data: PathBuf,
    /// JSON map of entity type to query keywords
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Weight of the 2D term in the loss
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Candidate threshold on start/end probabilities during training
    #[arg(long, default_value_t = 0.5)]
    t_train: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Dropout on the encoder output before the heads
    #[arg(long, default_value_t = DEFAULT_HEAD_DROPOUT)]
    dropout: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Replace the gated attention heads with plain concatenation heads
    #[arg(long)]
    no_interactive_attention: bool,
    /// Drop the 2D head; spans are paired from the start/end pointers
    #[arg(long)]
    no_2dp: bool,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Existing merge table; learned from the data and queries when absent
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Merges to learn when no table is given
    #[arg(long, default_value_t = 300)]
    bpe_merges: usize,
    /// Sequence cap in pieces
    #[arg(long, default_value_t = 64)]
    cap: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ff: usize,
    /// Also write the per-epoch loss CSV here
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Threshold on cells of the 2D matrix
    #[arg(long, default_value_t = 0.5)]
    t_eval: f64,
    /// Longest span in pieces (end - start); unbounded when absent
    #[arg(long)]
    max_len: Option<usize>,
    /// Candidate threshold on start/end; defaults to the training value
    #[arg(long)]
    t_select: Option<f64>,
    /// Query file overriding the one stored in the checkpoint
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    infer: InferArgs,
    /// Report per-type averaged scores
    #[arg(long = "macro", conflicts_with = "micro")]
    macro_avg: bool,
    /// Report pooled scores (default)
    #[arg(long)]
    micro: bool,
    /// Also write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// A single sentence
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    text: Option<String>,
    /// JSONL dataset; gold entities are ignored
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    infer: InferArgs,
    /// Write s, e, m, attention and token CSVs per (sentence, type) here
    #[arg(long)]
    dump_matrices: Option<PathBuf>,
    /// Output JSONL; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BpeArgs {
    /// Text file, one sentence per line
    #[arg(long)]
    corpus: PathBuf,
    /// Number of merges to learn
    #[arg(long)]
    merges: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    sentences: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    queries_out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Extract(a) => cmd_extract(a),
        Command::BpeTrain(a) => cmd_bpe(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence { .. } | Error::Shape { .. } | Error::NotScalar { .. } | Error::NotOnTape => {
            EXIT_NUMERIC
        }
        _ => EXIT_DATA,
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let samples = load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::format(&a.data, "dataset is empty"));
    }
    let queries = QuerySpec::load(&a.queries)?;
    let table = match &a.bpe {
        Some(p) => MergeTable::load(p)?,
        None => {
            let corpus: Vec<&str> = samples
                .iter()
                .map(|s| s.text.as_str())
                .chain(queries.0.values().map(String::as_str))
                .collect();
            train_bpe(&corpus, a.bpe_merges)?
        }
    };

    let mut config = ModelConfig::new(table.vocab_size());
    config.encoder.d = a.d;
    config.encoder.layers = a.layers;
    config.encoder.heads = a.heads;
    config.encoder.ff = a.ff;
    config.encoder.cap = a.cap;
    config.head_dropout = a.dropout;
    config.ablation = Ablation {
        interactive_attention: !a.no_interactive_attention,
        two_dp: !a.no_2dp,
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        loss: LossConfig {
            lambda: a.lambda,
            threshold: a.t_train,
        },
    };
    train_cfg.loss.validate()?;

    let expanded = expand_samples(&samples, &queries)?;
    let (units, dropped) = build_train_units(&expanded, &table, a.cap)?;
    if dropped > 0 {
        log::warn!("{dropped} gold spans lost to truncation or piece misalignment");
    }
    let mut model = Model::init(config.clone(), a.seed)?;
    log::info!(
        "{} units, vocabulary {}, {} parameters",
        units.len(),
        table.vocab_size(),
        parameter_count(&model)
    );

    let mut log_file = match &a.loss_log {
        Some(p) => {
            let mut f = fs::File::create(p)?;
            writeln!(f, "{}", EpochLog::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };
    let stdout = std::io::stdout();
    writeln!(stdout.lock(), "{}", EpochLog::CSV_HEADER)?;
    let mut write_err = None;
    let logs = train(&mut model, &units, &train_cfg, |log| {
        let line = log.csv_line();
        let mut res = writeln!(stdout.lock(), "{line}");
        if let (Ok(()), Some(f)) = (&res, log_file.as_mut()) {
            res = writeln!(f, "{line}");
        }
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }

    let meta = CheckpointMeta {
        model: config,
        merges: table.to_file_string(),
        vocab_hash: table.fingerprint(),
        queries,
        epoch: logs.len(),
        seed: a.seed,
        lambda: a.lambda,
        t_train: a.t_train,
    };
    save_checkpoint(&a.out, &model, &meta)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

struct Loaded {
    model: Model,
    table: MergeTable,
    queries: QuerySpec,
    predict: PredictConfig,
}

fn load_for_inference(a: &InferArgs) -> Result<Loaded> {
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let table = meta.merge_table()?;
    let queries = match &a.queries {
        Some(p) => QuerySpec::load(p)?,
        None => meta.queries.clone(),
    };
    let decode = DecodeConfig {
        threshold: a.t_eval,
        max_len: a.max_len,
    };
    decode.validate()?;
    let select_threshold = a.t_select.unwrap_or(meta.t_train);
    if !(select_threshold > 0.0 && select_threshold < 1.0) {
        return Err(Error::Config(format!(
            "selection threshold {select_threshold} not in (0, 1)"
        )));
    }
    Ok(Loaded {
        predict: PredictConfig {
            select_threshold,
            decode,
            cap: model.config.encoder.cap,
        },
        model,
        table,
        queries,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let l = load_for_inference(&a.infer)?;
    let samples = load_dataset(&a.data)?;
    let units = predict_samples(&l.model, &l.table, &l.queries, &samples, &l.predict)?;
    let report = evaluate(&all_entities(&units), &gold_spans(&samples));
    let mode = if a.macro_avg {
        Averaging::Macro
    } else {
        Averaging::Micro
    };
    if let Some(p) = &a.csv {
        fs::write(p, report.csv())?;
    }
    let mut out = std::io::stdout().lock();
    write!(out, "{}", report.table(mode))?;
    writeln!(out, "{}", report.headline(mode))?;
    Ok(())
}

#[derive(Serialize)]
struct EntityRecord<'a> {
    #[serde(rename = "type")]
    entity_type: &'a str,
    start: usize,
    end: usize,
    text: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct SentenceRecord<'a> {
    sentence: usize,
    text: &'a str,
    entities: Vec<EntityRecord<'a>>,
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let l = load_for_inference(&a.infer)?;
    let samples: Vec<DatasetSample> = match (&a.text, &a.data) {
        (Some(t), _) => vec![DatasetSample {
            text: t.clone(),
            entities: Vec::new(),
        }],
        (None, Some(p)) => load_dataset(p)?
            .into_iter()
            .map(|s| DatasetSample {
                text: s.text,
                entities: Vec::new(),
            })
            .collect(),
        (None, None) => return Err(Error::Config("either --text or --data is required".into())),
    };
    let units = predict_samples(&l.model, &l.table, &l.queries, &samples, &l.predict)?;
    if let Some(dir) = &a.dump_matrices {
        for u in &units {
            let sub = dir.join(format!("s{:04}_{}", u.sentence, sanitize(&u.entity_type)));
            dump_matrices(&sub, &u.seq, &u.extraction)?;
        }
    }

    let mut lines = String::new();
    for (k, s) in samples.iter().enumerate() {
        let entities = units
            .iter()
            .filter(|u| u.sentence == k)
            .flat_map(|u| &u.entities)
            .map(|p| EntityRecord {
                entity_type: &p.entity_type,
                start: p.start,
                end: p.end,
                text: &p.text,
                score: p.score,
            })
            .collect();
        let rec = SentenceRecord {
            sentence: k,
            text: &s.text,
            entities,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, lines)?,
        None => std::io::stdout().lock().write_all(lines.as_bytes())?,
    }
    Ok(())
}

fn sanitize(t: &str) -> String {
    t.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn cmd_bpe(a: BpeArgs) -> Result<()> {
    let text = fs::read_to_string(&a.corpus)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let table = train_bpe(&lines, a.merges)?;
    table.save(&a.out)?;
    log::info!(
        "{} merges, vocabulary {}, sha256 {}",
        table.merges().len(),
        table.vocab_size(),
        table.fingerprint()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    write_dataset(&a.out, &synthetic_corpus(a.sentences, a.seed))?;
    synthetic_queries().save(&a.queries_out)?;
    Ok(())
}
