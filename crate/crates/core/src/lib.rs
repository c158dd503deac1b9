pub mod bench;
pub mod codec;
pub mod error;
pub mod index;
pub mod paillier;
pub mod predictor;
pub mod primitives;
pub mod protocol;
pub mod service;
pub mod spatial;
pub mod transport;

pub use error::{Error, Result};
