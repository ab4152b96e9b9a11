//! Minimal neural-network toolkit with hand-written backward passes.
//!
//! Every layer exposes `forward`, which returns its output and whatever it
//! needs to differentiate, and `backward`, which accumulates parameter
//! gradients into a [`Grads`] and returns the input gradient. Parameters live
//! in a [`ParamStore`] keyed by name and tagged with a [`ParamRole`], so the
//! optimizer can be restricted to a subset (for example one subject's LoRA
//! vectors) while the rest stays bit-identical.
//!
//! Sequences are `[position][channel]` matrices.

pub mod conv;
pub mod layers;
pub mod lstm;
pub mod params;
pub mod tensor;

pub use conv::{conv_out_len, Conv1d, ConvCache, Deconv1d, DeconvCache};
pub use layers::{
    gelu, gelu_backward, lora_select, LayerNorm, LayerNormCache, Linear, LoraCache, LoraFc, LoraPair, PRelu, Rff,
    LAYER_NORM_EPS,
};
pub use lstm::{Blstm, BlstmCache, Lstm, LstmCache};
pub use params::{load_params, save_params, Grads, Param, ParamId, ParamRole, ParamStore};
pub use tensor::{Scalar, Tensor};
