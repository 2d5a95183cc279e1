//! Learned analysis/synthesis filterbank: a strided 1-D convolution with
//! ReLU on the way in, the matching transposed convolution on the way out.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "waveform" });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self
                .samples
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|v| v.as_f64()).collect()
    }
}

impl EncoderConfig {
    /// Number of latent frames for `samples` input samples.
    pub fn frames(&self, samples: usize) -> Result<usize> {
        if samples < self.kernel {
            return Err(Error::InputTooShort {
                required: self.kernel,
                got: samples,
            });
        }
        Ok((samples - self.kernel) / self.stride + 1)
    }

    /// Samples produced by the decoder from `frames` latent frames.
    pub fn decoded_len(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.stride + self.kernel
    }

    /// Smallest length >= `samples` that the encoder covers without remainder.
    pub fn padded_len(&self, samples: usize) -> usize {
        let base = samples.max(self.kernel);
        self.kernel + (base - self.kernel).div_ceil(self.stride) * self.stride
    }
}

/// Encoder kernel `[N, 1, L]`, no bias.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub kernel: ParamId,
}

/// Decoder transposed-convolution kernel `[N, 1, L]`, no bias.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: EncoderConfig,
    pub kernel: ParamId,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / config.kernel as f64).sqrt();
        let kernel = store.add(
            "encoder.kernel",
            Tensor::uniform(&[config.filters, 1, config.kernel], bound, rng),
        )?;
        Ok(Self { config, kernel })
    }

    /// `x: [1, T]` -> latent `[T_lat, N]`, non-negative.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let t = tape.shape(x).last().copied().unwrap_or(0);
        if t < self.config.kernel {
            return Err(Error::InputTooShort {
                required: self.config.kernel,
                got: t,
            });
        }
        let k = tape.param(self.kernel);
        let h = tape.conv1d(x, k, self.config.stride)?;
        let h = tape.relu(h)?;
        tape.permute(h, &[1, 0])
    }
}

impl Decoder {
    /// Starts as a scaled copy of the encoder taps, so with a constant mask
    /// the codec is a zero-phase filter of the input with roughly unit gain.
    pub fn new<T: Scalar>(encoder: &Encoder, store: &mut ParamStore<T>) -> Result<Self> {
        let config = encoder.config;
        let taps = store.value(encoder.kernel).clone();
        let energy: f64 = taps.data().iter().map(|v| v.as_f64().powi(2)).sum();
        let gain = 2.0 * config.stride as f64 / energy.max(1e-12);
        let kernel = store.add("decoder.kernel", taps.scale(T::from_f64_lossy(gain)))?;
        Ok(Self { config, kernel })
    }

    /// `mask, latent: [T_lat, N]` -> waveform `[1, (T_lat - 1) * stride + L]`.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, mask: Var, latent: Var) -> Result<Var> {
        if tape.shape(mask) != tape.shape(latent) {
            return Err(Error::Dimension {
                op: "decode",
                detail: format!(
                    "mask {:?} vs latent {:?}",
                    tape.shape(mask),
                    tape.shape(latent)
                ),
            });
        }
        let masked = tape.mul(mask, latent)?;
        let masked = tape.permute(masked, &[1, 0])?;
        let k = tape.param(self.kernel);
        tape.conv_transpose1d(masked, k, self.config.stride)
    }
}
