pub mod codec;
pub mod container;
pub mod entropy;
pub mod eval;
pub mod image;
pub mod overfit;
pub mod pipeline;
pub mod prob;
pub mod rd;
pub mod tensor;
pub mod train;
pub mod update;

pub use codec::{ArchConfig, CodecError, ModelKind, ModelParams};
pub use container::{read_container, write_container, Container, ContainerError, ContainerHeader, ExtraSection};
pub use image::RgbImage;
pub use rd::{bd_rate, bit_saving, psnr, RdCurve, RdError, RdInterp, RdPoint};
pub use tensor::{Graph, Real, Tensor, TensorError, Var};
