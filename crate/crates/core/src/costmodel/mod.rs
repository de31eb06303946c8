//! Parameter counting, operation counting and energy estimation.

mod counts;
mod energy;
mod ops;
mod params;

pub use counts::{OpCounts, OpKind};
pub use energy::{estimate_energy, EnergyTable};
pub use ops::{count_ops, fern_mul_ratios, LayerCost, OpReport};
pub use params::{count_model_params, count_params};
