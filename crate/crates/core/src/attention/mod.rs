//! Windowed local-recognition attention, global multi-head attention, and
//! the dense masked oracle the local path is verified against.

mod global;
mod local;
mod oracle;
mod scope;

pub use global::{init_mha, mha_global, MhaParams};
pub use local::{
    init_lra, lra_embed, lra_head, lra_head_embedded, lra_head_weights, mh_lra, AttentionParams,
    LraConfig, LraEmbedding,
};
pub use oracle::{masked_oracle, masked_oracle_weights};
pub use scope::{build_scope, ScopeMask};
