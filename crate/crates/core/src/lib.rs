//! Adversarial perturbations that steer image inpainting models toward a
//! chosen target, plus the metrics and input transformations used to
//! evaluate them.
//!
//! Images are planar RGB in `[0, 1]`. Masks use `1` for known pixels and
//! `0` for the hole to be filled.

pub mod attack;
pub mod corpus;
pub mod defense;
mod error;
pub mod imaging;
pub mod inpaint;
pub mod loss;
pub mod metrics;
pub mod nn;

pub use attack::{markpaint, markpaint_eot, project_budget, AttackConfig, AttackResult, EoTConfig};
pub use defense::{apply_defense, defense_sweep, DefenseKind, DefenseRow, DefenseSpec};
pub use error::{Error, Result};
pub use imaging::{Image, Mask, RectSpec, RngSeed};
pub use inpaint::{inpaint, input_gradient, AdapterRegistry, InpainterModel, ToyInpainter, ToyInpainterConfig};
pub use loss::{mark_loss, FeatureExtractor, LossConfig};
pub use metrics::{evaluate, ComparisonReport, MetricRow, Reference, Region};
