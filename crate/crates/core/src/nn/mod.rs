//! Tiny transformer encoders and the Adam optimizer.

mod adam;
mod config;
mod encoder;
mod params;

pub use adam::AdamState;
pub use config::{EncoderConfig, HeadKind};
pub use encoder::{Bound, EncoderModel, LayerStack, INIT_STD, LN_EPS};
pub(crate) use encoder::truncated_normal;
pub use params::{clip_global_norm, ParamSet};
