pub mod autodiff;
pub mod corpus;
mod binio;
pub mod features;
pub mod metrics;
pub mod model;
pub mod score;
pub mod tensor;
pub mod training;

pub use binio::write_atomic;
pub use features::AcousticFeatureSequence;
pub use score::{MusicalScore, NoteEvent, PhonemeLexicon, PhonemeTokenSequence};
pub use tensor::{Tensor, TensorError};

/// Frame shift of every frame-level sequence, in seconds.
pub const FRAME_SHIFT_S: f64 = 0.015;
