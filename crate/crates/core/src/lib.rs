//! Core numerics for a frequency-aware selective-scan segmentation network.
//!
//! * [`tensor`], [`autodiff`], [`params`]: dense tensors, a reverse-mode tape
//!   and named parameter trees with a binary checkpoint format.
//! * [`freq`]: orthonormal Haar DWT, radix-2 FFT, DCT-II and band masks.
//! * [`msfm`]: the multi-scale frequency transform module in its three
//!   variants.
//! * [`encoder`]: selective scan, four-direction 2D scanning, VSS blocks and
//!   the U-shaped encoder/decoder.
//! * [`ssrae`]: input degradation, region attention and the auxiliary
//!   reconstruction encoder.
//! * [`losses`]: segmentation / reconstruction losses, the joint weight
//!   schedule and DSC / MIoU metrics.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod float;
pub mod freq;
pub mod layers;
pub mod losses;
pub mod msfm;
pub mod oracle;
pub mod params;
pub mod ssrae;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Result, TensorError};
pub use float::Float;
pub use params::ParamTree;
pub use tensor::Tensor;
