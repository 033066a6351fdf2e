//! Parameter storage, initialisation, optimisation and the shared layers.

mod layers;
mod params;

pub use layers::{
    apply_low_rank_adapter, check_adapter_rank, FeedForward, LayerNorm, Linear, LowRank, MultiHeadAttention,
};
pub use params::{Adam, GradBuffer, Graph, Init, Param, ParamId, ParamStore};
