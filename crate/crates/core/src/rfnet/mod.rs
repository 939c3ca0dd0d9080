//! RF-bounded ResNet family: configuration, receptive-field arithmetic,
//! configuration search, network construction and empirical verification.

mod arch;
mod backbone;
mod empirical;
mod profile;
mod solve;

pub use arch::{ArchConfig, Base, BlockKind, BlockPlan};
pub use backbone::{Backbone, BackboneOutput, Block, ForwardOptions};
pub use empirical::{empirical_rf, empirical_rf_chain};
pub use profile::{output_extent, receptive_field_profile, LayerDescriptor, LayerKind, RfGeometry};
pub use solve::{candidate_configs, solve_rf_config};
