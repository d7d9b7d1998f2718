//! Decoder-only autoregressive model over layer tokens, trained with
//! next-token cross-entropy at the last context position.

mod config;
mod model;
pub mod real;
mod sample;
mod train;

pub use config::{GptConfig, LayerRanges, Layout, ParamGroup};
pub use model::{argmax, pad_context, Gpt};
pub use real::{Dtype, Real};
pub use sample::{predict_next, probabilities, sample_from_logits};
pub use train::{evaluate, train, EpochStats, Phase, TrainReport, Trainer};
pub(crate) use train::Adam;
