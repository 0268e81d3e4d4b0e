//! Sparse voxel 3D detection with a distance-aware attention teacher, a selective
//! state-space student, and adapter-aligned knowledge distillation between them.

pub mod autodiff;
pub mod distill;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod gradcheck;
pub mod group;
pub mod head;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seg;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod voxel;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Binding, ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
