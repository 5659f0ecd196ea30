//! Dense tensors, layers with hand-written backward passes, losses, and optimization.

pub mod attention;
pub mod checkpoint;
pub mod encoding;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use attention::{ts_mhsa_scores, AttentionInputs, TauMode, TsMhsa, TsMhsaCache, MASK_VALUE};
pub use checkpoint::Checkpoint;
pub use encoding::{positional_encoding_4d, positional_encoding_backward};
pub use gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
pub use layers::{Linear, Mlp, MlpCache, Module, Param};
pub use loss::{focal_loss, l2_loss, FocalParams};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tensor::Tensor;
