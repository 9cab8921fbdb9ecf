//! Network layers, the full model, and its optimizer.

pub mod adam;
pub mod layers;
pub mod network;
pub mod tensor;

pub use adam::Adam;
pub use layers::{Conv, NonLocal, Pointwise, TransposedConv};
pub use network::{ForwardCache, Mode, NetConfig, Network};
pub use tensor::Tensor;
