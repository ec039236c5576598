//! Learnable-sampling 3D convolution: tensors, convolution kernels, the
//! deformable sampling operator with hand-written gradients, the video
//! interpolation / denoising network, synthetic data, metrics, training and
//! sampling-map visualisation.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ls3d;
pub mod metrics;
pub mod module;
pub mod net;
pub mod scalar;
pub mod synth;
pub mod tap;
pub mod tensor;
pub mod train;
pub mod viz;

pub use conv::{Conv3d, Conv3dParams};
pub use error::{Error, Result};
pub use ls3d::{Ls3dConv, Ls3dLayer, MaskField, OffsetField};
pub use metrics::EvalReport;
pub use module::{Module, ParamMut};
pub use net::{build_net, NetworkSpec, Task, VINet};
pub use scalar::{DType, Scalar};
pub use synth::ClipSpec;
pub use tap::TapIndex;
pub use tensor::{Shape5, Tensor5};
pub use train::{Checkpoint, DataSpec, TrainConfig, Trainer};
pub use viz::{OutputCoord, SamplingMap};
