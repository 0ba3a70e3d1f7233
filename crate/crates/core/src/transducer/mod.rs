//! Sequence transducer: prediction and joint networks, exact loss, search.

pub mod loss;
pub mod model;
pub mod network;
pub mod search;

pub use loss::{log_likelihoods, rnnt_loss, rnnt_loss_grad, rnnt_loss_value, Lattice};
pub use model::{
    batch_gradients, finetune_step, is_decoder_param, tune_fusion, tune_fusion_with, AsrModel,
    DecodeRecord, FineTuneConfig, FineTuneState, GroupSchedule, TuningRow,
};
pub use network::{AsrModelConfig, DecoderConfig, PredState, PredictionNetwork};
pub use search::{beam_search, fused_score, greedy_decode, FusionParams, Hypothesis, SearchConfig};
