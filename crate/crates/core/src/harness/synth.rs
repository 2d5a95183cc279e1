//! Synthetic mixtures whose sources occupy disjoint frequency bands.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    /// One sinusoid per source.
    Sinusoid,
    /// Sum of `n` random sinusoids inside the band.
    NoiseBand(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub length: usize,
    pub sample_rate: u32,
    pub kind: SourceKind,
    /// Frequency band in Hz for each source.
    pub bands: Vec<(f64, f64)>,
    /// Level of sources 2..K relative to source 1, drawn uniformly in dB.
    pub snr_db: (f64, f64),
    pub seed: u64,
}

/// `k` bands separated by guard gaps of equal width, spanning 100 Hz to
/// 90% of Nyquist.
pub fn default_bands(k: usize, sample_rate: u32) -> Vec<(f64, f64)> {
    let (lo, hi) = (100.0, 0.45 * sample_rate as f64);
    let width = (hi - lo) / (2 * k - 1) as f64;
    (0..k)
        .map(|i| {
            let a = lo + 2.0 * i as f64 * width;
            (a, a + width)
        })
        .collect()
}

impl SyntheticSpec {
    pub fn new(speakers: usize, length: usize, sample_rate: u32, seed: u64) -> Self {
        Self {
            speakers,
            length,
            sample_rate,
            kind: SourceKind::Sinusoid,
            bands: default_bands(speakers, sample_rate),
            snr_db: (0.0, 0.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.len() != self.speakers {
            return Err(Error::Config(format!(
                "{} bands for {} sources",
                self.bands.len(),
                self.speakers
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let mut sorted = self.bands.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(lo, hi) in &sorted {
            if !(0.0 < lo && lo <= hi && hi < nyquist) {
                return Err(Error::Config(format!(
                    "band {lo}-{hi} Hz must satisfy 0 < lo <= hi < {nyquist}"
                )));
            }
        }
        if sorted.windows(2).any(|w| w[0].1 >= w[1].0) {
            return Err(Error::Config("source bands overlap".into()));
        }
        if self.snr_db.0 > self.snr_db.1 {
            return Err(Error::Config("snr range is reversed".into()));
        }
        if self.length == 0 {
            return Err(Error::Config("mixture length must be positive".into()));
        }
        if matches!(self.kind, SourceKind::NoiseBand(0)) {
            return Err(Error::Config("noise band needs at least one component".into()));
        }
        Ok(())
    }

    /// Mixture `index` of the stream: the sample-wise sum of its sources.
    /// Every index draws from its own RNG stream.
    pub fn mixture(&self, index: u64) -> (Waveform<f64>, Vec<Waveform<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let sr = self.sample_rate as f64;
        let mut sources = Vec::with_capacity(self.speakers);
        for (k, &(lo, hi)) in self.bands.iter().enumerate() {
            let components = match self.kind {
                SourceKind::Sinusoid => 1,
                SourceKind::NoiseBand(n) => n,
            };
            let mut s = vec![0.0; self.length];
            for _ in 0..components {
                let f = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = if components == 1 { 1.0 } else { rng.gen_range(0.2..1.0) };
                for (t, v) in s.iter_mut().enumerate() {
                    *v += amp * (2.0 * PI * f * t as f64 / sr + phase).sin();
                }
            }
            let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
            let level_db = if k == 0 {
                0.0
            } else if self.snr_db.1 > self.snr_db.0 {
                -rng.gen_range(self.snr_db.0..self.snr_db.1)
            } else {
                -self.snr_db.0
            };
            let gain = 10f64.powf(level_db / 20.0) / rms.max(1e-12);
            s.iter_mut().for_each(|v| *v *= gain);
            sources.push(Waveform {
                samples: s,
                sample_rate: self.sample_rate,
            });
        }
        let mut mix = vec![0.0; self.length];
        for s in &sources {
            for (m, v) in mix.iter_mut().zip(&s.samples) {
                *m += v;
            }
        }
        (
            Waveform {
                samples: mix,
                sample_rate: self.sample_rate,
            },
            sources,
        )
    }
}
