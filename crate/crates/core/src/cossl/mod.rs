//! CO-BYOL objective: paired augmentation, online/target networks, global and
//! local alignment losses and the EMA target update.

mod augment;
mod heads;
mod loss;
mod state;

pub use augment::{
    augment_batch, augment_pair, augment_view, resize_crop, sample_crop, AugmentationPolicy, ColorJitter, CropBox,
};
pub use heads::{Head, HeadConfig};
pub use loss::{downsample_local_grid, loss_global, loss_local};
pub use state::{ema_update, DualNetworkState, Losses, Network, OnlineVars, TargetVars, ViewForward};
