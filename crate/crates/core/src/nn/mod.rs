//! Minimal 3D convolutional network engine: tensors, layers with
//! hand-written backward passes, the U-Net, loss, optimizer and checkpoints.

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod conv;
mod direct;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod tensor;
pub mod unet;

pub use activation::Activation;
pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint};
pub use loss::{hybrid_loss, LossClasses};
pub use tensor::{Scalar, Tensor5};
pub use unet::{ensure_finite, init_params, update_bn_running_stats, Dropout, Grads, UNet, UNetConfig, UNetParams, UpsampleMode};
