//! Bidirectional prototype attention: skip-connected attention, prototype
//! co-/self-attention and their holistic concatenation.

mod attention;
mod factored;
mod holistic;

pub use attention::{
    attention, attention_backward, attention_forward, AttentionBlockParams, AttentionCache, AttentionGrads,
};
pub use factored::{
    factored_attention_backward, factored_attention_forward, prototype_co_attention, prototype_self_attention,
    BpamParams, FactoredCache, FactoredGrads, FactoredParams, Provenance, TokenLayout, TokenMatrix,
};
pub use holistic::{holistic_attention, split_holistic_grad, HolisticAttention};
