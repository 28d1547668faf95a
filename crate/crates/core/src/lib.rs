//! Band-split recurrent music source separation.
//!
//! Everything numeric is generic over [`Scalar`]; the `*32` and `*64` aliases below pin the
//! common choices.

pub mod audio;
pub mod bandscheme;
pub mod datagen;
pub mod energymeter;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod spectral;
pub mod tape;
pub mod trainer;

pub use bandscheme::{build_scheme, BandScheme, Source};
pub use error::{Error, Result};
pub use model::{BandSplitModel, ModelConfig};
pub use scalar::Scalar;
pub use spectral::{ComplexSpectrogram, FrameParams, Stft, Waveform};

pub type Waveform32 = Waveform<f32>;
pub type Waveform64 = Waveform<f64>;
pub type Spectrogram32 = ComplexSpectrogram<f32>;
pub type Spectrogram64 = ComplexSpectrogram<f64>;
pub type Model32 = BandSplitModel<f32>;
pub type Model64 = BandSplitModel<f64>;
