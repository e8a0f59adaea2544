pub mod bam;
pub mod border_align;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor4};
