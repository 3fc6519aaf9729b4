//! Structural masking, candidate selection, the weighted BCE objective and
//! the optimization loop.

mod loss;
mod mask;
mod optim;
mod trainer;

pub use loss::{bce, combine, combined_loss, term_weights, Bce, LossConfig, LossParts, BCE_EPS};
pub use mask::{build_structural_mask, select_candidates, GoldLabels, MaskedSelection, StructuralMask};
pub use optim::AdamW;
pub use trainer::{parameter_count, train, train_monitored, unit_gradients, unit_loss, EpochLog, TrainConfig, TrainUnit, UnitLoss};
