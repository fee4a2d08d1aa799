pub mod audio;
pub mod config;
pub mod control;
pub mod engine;
pub mod error;
pub mod live;
pub mod mapping;
pub mod motion;
pub mod record;
pub mod saliency;
pub mod score;
pub mod session;
pub mod video;

pub use error::{Error, Result};
