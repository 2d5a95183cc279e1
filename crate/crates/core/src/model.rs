//! End-to-end separator: encoder, masking network, per-speaker decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::ca::{AttentionRecord, DualBlock, DualBlockSpec, LinearParams, NormParams};
use crate::chunking::ChunkPlan;
use crate::codec::{Decoder, Encoder, Waveform};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two per-speaker `D -> D` layers producing one mask.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Clone, Debug)]
pub struct TinySepformer<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub pre_norm: NormParams,
    pub pre_linear: LinearParams,
    pub blocks: Vec<DualBlock>,
    pub post_linear: LinearParams,
    pub post_prelu: ParamId,
    pub heads: Vec<MaskHead>,
    pub decoder: Decoder,
}

/// K non-negative masks, each `[T_lat, D]`.
#[derive(Clone, Debug)]
pub struct MaskSet<T> {
    pub masks: Vec<Tensor<T>>,
}

/// K separated signals of the input's length.
#[derive(Clone, Debug)]
pub struct SourceEstimates<T> {
    pub sources: Vec<Waveform<T>>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub estimates: Vec<Var>,
    pub masks: Vec<Var>,
    pub latent: Var,
    pub attention: Vec<AttentionRecord>,
    pub plan: ChunkPlan,
}

impl<T: Scalar> TinySepformer<T> {
    /// Instantiate with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.width();
        let k = config.speakers;
        let encoder = Encoder::new(config.encoder, &mut store, &mut rng)?;
        let pre_norm = NormParams::new(&mut store, "mask.pre.norm", d)?;
        let pre_linear = LinearParams::new(&mut store, "mask.pre.linear", d, d, true, &mut rng)?;
        let spec = DualBlockSpec {
            intra: config.intra,
            inter: config.inter,
            n_intra: config.n_intra,
            n_inter: config.n_inter,
            shared: config.shared,
        };
        let blocks = (0..config.n_mask)
            .map(|i| DualBlock::new(&spec, &mut store, &format!("mask.ca[{i}]"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let post_linear =
            LinearParams::new(&mut store, "mask.post.linear", d, d * k, true, &mut rng)?;
        let post_prelu = store.add(
            "mask.post.prelu",
            Tensor::full(&[1], T::from_f64_lossy(0.25)),
        )?;
        let heads = (0..k)
            .map(|s| {
                Ok(MaskHead {
                    fc1: LinearParams::new(&mut store, &format!("mask.head[{s}].fc1"), d, d, true, &mut rng)?,
                    fc2: LinearParams::new(&mut store, &format!("mask.head[{s}].fc2"), d, d, true, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&encoder, &mut store)?;
        Ok(Self {
            config,
            params: store,
            encoder,
            pre_norm,
            pre_linear,
            blocks,
            post_linear,
            post_prelu,
            heads,
            decoder,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// `Linear(LayerNorm(H))` over `[T_lat, D]`.
    pub fn preprocess(&self, tape: &mut Tape<T>, latent: Var) -> Result<Var> {
        let h = self.pre_norm.apply(tape, latent, T::from_f64_lossy(self.config.norm_eps))?;
        self.pre_linear.apply(tape, h)
    }

    /// `N_mask` dual blocks over `[T_S, S, D]`.
    pub fn ca_stack(
        &self,
        tape: &mut Tape<T>,
        chunks: Var,
        trace: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let mut h = chunks;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, self.config.norm_eps, i, trace)?;
        }
        Ok(h)
    }

    /// `PReLU(Linear(.))` widening `[T_S, S, D]` to `[T_S, S, D * K]`.
    pub fn postprocess(&self, tape: &mut Tape<T>, chunks: Var) -> Result<Var> {
        let h = self.post_linear.apply(tape, chunks)?;
        let a = tape.param(self.post_prelu);
        tape.prelu(h, a)
    }

    /// `[T_lat, D * K]` -> K masks `[T_lat, D]`. Speaker `k` reads channels
    /// `[k * D, (k + 1) * D)`.
    pub fn mask_head(&self, tape: &mut Tape<T>, merged: Var) -> Result<Vec<Var>> {
        let d = self.config.width();
        let k = self.heads.len();
        let width = tape.shape(merged).last().copied().unwrap_or(0);
        if width != d * k {
            return Err(Error::Contract(format!(
                "mask head expects {} channels for {} speakers, got {}",
                d * k,
                k,
                width
            )));
        }
        self.heads
            .iter()
            .enumerate()
            .map(|(s, head)| {
                let h = tape.narrow(merged, 1, s * d, d)?;
                let h = head.fc1.apply(tape, h)?;
                let h = tape.relu(h)?;
                let h = head.fc2.apply(tape, h)?;
                tape.relu(h)
            })
            .collect()
    }

    /// Full pipeline on a constant waveform. Input is zero-padded so the
    /// encoder covers it exactly, and every estimate is trimmed back to
    /// the input length.
    pub fn forward(&self, tape: &mut Tape<T>, samples: &[T]) -> Result<Forward> {
        let enc = self.config.encoder;
        if samples.is_empty() {
            return Err(Error::InputTooShort {
                required: enc.kernel,
                got: 0,
            });
        }
        let padded = enc.padded_len(samples.len());
        let mut x = samples.to_vec();
        x.resize(padded, T::zero());
        let x = tape.input(Tensor::new(vec![1, padded], x)?)?;
        let latent = self.encoder.encode(tape, x)?;
        let frames = tape.shape(latent)[0];
        let hd = self.preprocess(tape, latent)?;
        let plan = ChunkPlan::new(frames, self.config.chunk)?;
        let chunks = tape.segment(hd, plan)?;
        let mut attention = Vec::new();
        let hca = self.ca_stack(tape, chunks, &mut attention)?;
        let hdk = self.postprocess(tape, hca)?;
        let merged = tape.overlap_add(hdk, plan)?;
        let masks = self.mask_head(tape, merged)?;
        let estimates = masks
            .iter()
            .map(|&m| {
                let y = self.decoder.decode(tape, m, latent)?;
                let y = tape.narrow(y, 1, 0, samples.len())?;
                tape.reshape(y, &[samples.len()])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward {
            estimates,
            masks,
            latent,
            attention,
            plan,
        })
    }

    /// Separate `x` into K sources of the same length.
    pub fn separate(&self, x: &Waveform<T>) -> Result<(SourceEstimates<T>, MaskSet<T>)> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, &x.samples)?;
        let sources = fwd
            .estimates
            .iter()
            .map(|&v| Waveform::new(tape.value(v).data().to_vec(), x.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        let masks = fwd.masks.iter().map(|&m| tape.value(m).clone()).collect();
        Ok((SourceEstimates { sources }, MaskSet { masks }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CaConfig;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        Tensor::<f64>::uniform(&[n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_data()
    }

    #[test]
    fn tiny_forward_contract() {
        let model = TinySepformer::<f64>::new(ModelConfig::tiny()).unwrap();
        let x = Waveform::new(noise(256, 1), 8000).unwrap();
        let (est, masks) = model.separate(&x).unwrap();
        assert_eq!(est.sources.len(), 2);
        for s in &est.sources {
            assert_eq!(s.len(), 256);
            assert!(s.samples.iter().all(|v| v.is_finite()));
        }
        for m in &masks.masks {
            assert_eq!(m.shape(), &[127, 16]);
            assert!(m.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn odd_lengths_are_trimmed() {
        let model = TinySepformer::<f32>::new(ModelConfig::tiny()).unwrap();
        for n in [3usize, 4, 5, 37, 100] {
            let x = Waveform::new(noise(n, n as u64).iter().map(|&v| v as f32).collect(), 8000).unwrap();
            let (est, _) = model.separate(&x).unwrap();
            assert!(est.sources.iter().all(|s| s.len() == n));
        }
    }

    #[test]
    fn preprocess_zero_latent_gives_bias() {
        let mut model = TinySepformer::<f64>::new(ModelConfig::tiny()).unwrap();
        let bias = model.pre_linear.bias.unwrap();
        model.params.get_mut(bias).value = Tensor::full(&[16], 0.5);
        let mut tape = Tape::new(&model.params);
        let z = tape.input(Tensor::zeros(&[5, 16])).unwrap();
        let y = model.preprocess(&mut tape, z).unwrap();
        assert_eq!(tape.shape(y), &[5, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn postprocess_widens_channels() {
        let mut cfg = ModelConfig::tiny();
        cfg.speakers = 3;
        cfg.encoder.filters = 8;
        cfg.intra = CaConfig { d_conv: 4, d_attn: 4, ..cfg.intra };
        cfg.inter = cfg.intra;
        let model = TinySepformer::<f64>::new(cfg).unwrap();
        let mut tape = Tape::new(&model.params);
        let x = tape
            .input(Tensor::uniform(&[3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4)))
            .unwrap();
        let y = model.postprocess(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 8, 24]);
    }

    #[test]
    fn mask_head_layout_and_errors() {
        let model = TinySepformer::<f64>::new(ModelConfig::tiny()).unwrap();
        let mut tape = Tape::new(&model.params);
        let merged = Tensor::uniform(&[4, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let m = tape.input(merged.clone()).unwrap();
        let masks = model.mask_head(&mut tape, m).unwrap();
        // speaker 1 only depends on channels [16, 32)
        let mut alt = merged.clone();
        for row in alt.data_mut().chunks_mut(32) {
            for v in &mut row[..16] {
                *v = 0.0;
            }
        }
        let m2 = tape.input(alt).unwrap();
        let masks2 = model.mask_head(&mut tape, m2).unwrap();
        assert_eq!(tape.value(masks[1]), tape.value(masks2[1]));
        let bad = tape.input(Tensor::zeros(&[4, 30])).unwrap();
        assert!(matches!(model.mask_head(&mut tape, bad), Err(Error::Contract(_))));
    }

    #[test]
    fn silence_in_silence_out() {
        let model = TinySepformer::<f32>::new(ModelConfig::tiny()).unwrap();
        let (est, _) = model.separate(&Waveform::new(vec![0.0; 200], 8000).unwrap()).unwrap();
        assert!(est.sources.iter().all(|s| s.samples.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stack_parameter_set_counts() {
        for shared in [false, true] {
            let mut cfg = ModelConfig::tiny();
            cfg.n_mask = 2;
            cfg.n_intra = 3;
            cfg.n_inter = 2;
            cfg.shared = shared;
            let model = TinySepformer::<f32>::new(cfg).unwrap();
            let sets: usize = model.blocks.iter().map(|b| b.intra.len() + b.inter.len()).sum();
            assert_eq!(sets, if shared { 2 * 2 } else { 2 * (3 + 2) });
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = TinySepformer::<f32>::new(ModelConfig::tiny()).unwrap();
        let b = TinySepformer::<f32>::new(ModelConfig::tiny()).unwrap();
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}
