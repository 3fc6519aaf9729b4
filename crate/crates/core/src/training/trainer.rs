use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{term_weights, LossConfig, LossParts, BCE_EPS};
use super::mask::{build_structural_mask, select_candidates, GoldLabels, MaskedSelection, StructuralMask};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::{Model, ModelVars};
use crate::numkernel::{ParamSet, Tape, Tensor2, Var};
use crate::subword::TokenSeq;

/// One (sentence, entity type) pair with its gold spans.
#[derive(Debug, Clone)]
pub struct TrainUnit {
    pub seq: TokenSeq,
    pub mask: StructuralMask,
    pub gold: GoldLabels,
    pub entity_type: String,
}

impl TrainUnit {
    /// Builds a unit from char spans; also returns how many spans were lost
    /// to truncation or misalignment.
    pub fn new(seq: TokenSeq, spans: &[(usize, usize)], entity_type: impl Into<String>) -> (Self, usize) {
        let mask = build_structural_mask(&seq);
        let (gold, dropped) = GoldLabels::from_char_spans(&seq, &mask, spans);
        let unit = TrainUnit {
            seq,
            mask,
            gold,
            entity_type: entity_type.into(),
        };
        (unit, dropped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 42,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub f_s: f64,
    pub f_e: f64,
    pub f_m: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,f_s,f_e,f_m";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.mean_loss, self.f_s, self.f_e, self.f_m
        )
    }
}

/// Loss node of one unit plus the values that went into it.
pub struct UnitLoss {
    pub loss: Var,
    pub parts: LossParts,
    pub selection: MaskedSelection,
}

/// Builds the masked, weighted loss of one unit on `tape`.
///
/// Selection uses the training threshold with gold boundaries injected.
/// Passing `fixed` reuses a previous selection instead, which keeps the loss
/// a smooth function of the parameters (used by gradient checks).
pub fn unit_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    unit: &TrainUnit,
    cfg: &LossConfig,
    rng: Option<&mut ChaCha8Rng>,
    fixed: Option<&MaskedSelection>,
) -> Result<UnitLoss> {
    let (_, nodes) = model.forward_on_tape(tape, vars, unit.seq.ids(), rng)?;
    let mask = &unit.mask;
    let s = tape.mul_const(nodes.s, mask.start_tensor())?;
    let e = tape.mul_const(nodes.e, mask.end_tensor())?;
    let m = match nodes.m {
        Some(m) => Some(tape.mul_const(m, mask.cell_tensor())?),
        None => None,
    };

    let selection = match fixed {
        Some(sel) => sel.clone(),
        None => select_candidates(
            tape.value(s).data(),
            tape.value(e).data(),
            m.map(|m| tape.value(m)),
            cfg.threshold,
            mask,
            Some(&unit.gold),
        ),
    };

    let label = |hit: bool| if hit { 1.0 } else { 0.0 };
    let s_cells: Vec<(usize, f64)> = mask
        .valid_starts()
        .map(|i| (i, label(unit.gold.starts.contains(&i))))
        .collect();
    let e_cells: Vec<(usize, f64)> = mask
        .valid_ends()
        .map(|j| (j, label(unit.gold.ends.contains(&j))))
        .collect();
    let l = unit.seq.len();
    let m_cells: Vec<(usize, f64)> = selection
        .cells
        .iter()
        .map(|&((i, j), _)| (i * l + j, label(unit.gold.cells.contains(&(i, j)))))
        .collect();

    let (ws, we, wm) = term_weights(cfg.lambda, m.is_some());
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    if let Some(f) = tape.bce(s, &s_cells, BCE_EPS)? {
        parts.f_s = tape.value(f).data()[0];
        terms.push((f, ws));
    }
    if let Some(f) = tape.bce(e, &e_cells, BCE_EPS)? {
        parts.f_e = tape.value(f).data()[0];
        terms.push((f, we));
    }
    if let Some(m) = m {
        if let Some(f) = tape.bce(m, &m_cells, BCE_EPS)? {
            parts.f_m = tape.value(f).data()[0];
            terms.push((f, wm));
        }
    }
    let loss = if terms.is_empty() {
        tape.input(Tensor2::scalar(0.0))
    } else {
        tape.lin_comb(&terms)?
    };
    parts.total = tape.value(loss).data()[0];
    Ok(UnitLoss {
        loss,
        parts,
        selection,
    })
}

/// Loss and parameter gradients of one unit.
pub fn unit_gradients(
    model: &Model,
    unit: &TrainUnit,
    cfg: &LossConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossParts, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = unit_loss(model, &mut tape, &vars, unit, cfg, rng, None)?;
    let grads = tape.backward(out.loss)?;
    Ok((out.parts, grads.into_params()))
}

fn unit_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch AdamW training. Units of a batch are evaluated in parallel;
/// gradients are reduced in unit order so results do not depend on thread
/// scheduling. `on_epoch` sees each epoch's log as it is produced.
pub fn train(
    model: &mut Model,
    units: &[TrainUnit],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    train_monitored(model, units, cfg, |log, _| {
        on_epoch(log);
        true
    })
}

/// Like [`train`], but the callback also sees the model after each epoch
/// and stops training by returning `false`.
pub fn train_monitored(
    model: &mut Model,
    units: &[TrainUnit],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> bool,
) -> Result<Vec<EpochLog>> {
    if units.is_empty() {
        return Err(Error::Config("no training units".into()));
    }
    if cfg.batch == 0 || cfg.lr <= 0.0 {
        return Err(Error::Config(format!(
            "batch {} and lr {} must be positive",
            cfg.batch, cfg.lr
        )));
    }
    cfg.loss.validate()?;
    model.check()?;

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut sum = LossParts::default();
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<Result<(LossParts, Vec<Tensor2>)>> = batch
                .par_iter()
                .map(|&k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(cfg.seed, epoch, k));
                    unit_gradients(model, &units[k], &cfg.loss, Some(&mut rng))
                })
                .collect();
            let mut total: Option<Vec<Tensor2>> = None;
            for r in results {
                let (parts, grads) = r?;
                if !parts.total.is_finite() {
                    return Err(Error::Divergence { epoch, batch: b });
                }
                sum.total += parts.total;
                sum.f_s += parts.f_s;
                sum.f_e += parts.f_e;
                sum.f_m += parts.f_m;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_scaled(g, 1.0);
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale(inv);
                if !g.is_finite() {
                    return Err(Error::Divergence { epoch, batch: b });
                }
            }
            opt.step(model, &grads);
        }
        let n = units.len() as f64;
        let log = EpochLog {
            epoch,
            mean_loss: sum.total / n,
            f_s: sum.f_s / n,
            f_e: sum.f_e / n,
            f_m: sum.f_m / n,
        };
        logs.push(log);
        if !on_epoch(&log, model) {
            break;
        }
    }
    Ok(logs)
}

/// Total parameter count of a model.
pub fn parameter_count(model: &Model) -> usize {
    model.param_count()
}
