//! Quaternion neural network building blocks and the two-stage QSAM-Net
//! rain-streak removal model.
//!
//! Colour images are encoded per pixel as the quaternion `L + R·i + G·j + B·k`
//! and processed by quaternion convolutions, which are evaluated as grouped
//! real convolutions over component-planar feature maps.

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod quaternion;
pub mod synth;
pub mod tensor;
pub mod train;

pub use arch::{count_params, NetConfig, ParamReport, QsamNet};
pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{sample_patch, PairedDataset};
pub use error::{CheckpointError, Error, Result};
pub use image::{decode_image, encode_batch, encode_image, ColorImage};
pub use layers::{qconv2d, qinstance_norm, leaky_relu_split, sigmoid_split, Algebra, QConv2dParams, QInstanceNormParams};
pub use metrics::{psnr, rgb_to_y, ssim, MetricReport};
pub use params::{ParamId, ParamStore};
pub use quaternion::{conjugate, hamilton, modulus, Quaternion};
pub use synth::{make_dataset, synthesize, RainParams};
pub use tensor::{QTensor, Real, Shape, Tensor};
pub use train::{cosine_lr, mse_loss, Adam, LossRecord, TrainConfig, Trainer};
