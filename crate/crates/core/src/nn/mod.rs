//! Minimal CPU tensor engine: tensors, reverse-mode autodiff, layers and
//! the RMSprop optimizer used by both training stages.

pub mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use conv::ConvGeom;
pub use graph::{BatchStats, Grads, Graph, Var};
pub use layers::{BatchNorm, BiLstm, Bound, Conv, ConvTranspose2d, Init, Linear, LstmDirection};
pub use optim::RmsProp;
pub use params::{Archive, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
