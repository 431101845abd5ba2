//! Network building blocks: dense layers, two-tower score networks, masks,
//! the contrastive training loss, and Adam.

pub mod adam;
pub mod mask;
pub mod mlp;
pub mod nce;
pub mod score;

pub use adam::AdamState;
pub use mask::InputMask;
pub use mlp::{Dense, Mlp, MlpCheckpoint, MlpGrad};
pub use nce::{
    eval_reg_nce, info_nce_from_scores, info_nce_loss, reg_nce_grads, NceBatch, RegNceStats,
    RegWeights, RoleMasks,
};
pub use score::{ScoreNet, ScoreNetCheckpoint, ScoreNetConfig, ScoreNetGrad};
