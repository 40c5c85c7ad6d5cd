pub mod camera;
pub mod config;
pub mod error;
pub mod field;
pub mod image;
pub mod mesh;
pub mod mlp;
pub mod optim;
pub mod pipeline;
pub mod renderer;
pub mod reparam;
pub mod sdf;
pub mod synth;
pub mod trainer;
pub mod view;

pub use error::{Error, ErrorKind, Result};
