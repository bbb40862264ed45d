pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod disparity;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
