//! Denoiser ε_θ: weights, noise schedule, attention and the forward pass.

mod attention;
mod forward;
mod loss;
mod manifest;
mod pretrain;
mod schedule;
mod weights;

pub use attention::{attention, cross_attention, CrossMaps};
pub use forward::{depth_to_space, space_to_depth, timestep_embedding, unet_forward, AttentionStack, ForwardOutput};
pub use loss::{ldm_loss, ldm_loss_at};
pub use manifest::{load_model, save_model, ModelManifest, MANIFEST_FILE};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutput, TrainExample, MIN_DATASET_SIZE};
pub use schedule::{make_schedule, q_sample, NoiseSchedule, BETA_END, BETA_START, TRAIN_STEPS};
pub use weights::{ArchConfig, BlockWeights, TrunkWeights, UNetWeights, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub(crate) use schedule::q_sample_with;
pub(crate) use weights::{hex, ByteReader};
