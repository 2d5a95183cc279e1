//! Segmentation of a frame sequence into half-overlapping chunks, and the
//! count-normalized overlap-add that inverts it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index bookkeeping shared by [`segment`], [`overlap_add`] and the tape ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub frames: usize,
    pub chunk: usize,
    pub hop: usize,
    pub padded: usize,
    pub chunks: usize,
}

impl ChunkPlan {
    pub fn new(frames: usize, chunk: usize) -> Result<Self> {
        if chunk < 2 || chunk % 2 != 0 {
            return Err(Error::Config(format!(
                "chunk size must be even and >= 2, got {chunk}"
            )));
        }
        if frames == 0 {
            return Err(Error::Contract("cannot segment an empty sequence".into()));
        }
        let hop = chunk / 2;
        let base = frames.max(chunk);
        let padded = chunk + (base - chunk).div_ceil(hop) * hop;
        let chunks = (padded - chunk) / hop + 1;
        Ok(Self {
            frames,
            chunk,
            hop,
            padded,
            chunks,
        })
    }

    /// How many chunks cover each original frame (1 or 2).
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.padded];
        for c in 0..self.chunks {
            for j in 0..self.chunk {
                counts[c * self.hop + j] += 1;
            }
        }
        counts.truncate(self.frames);
        counts
    }

    /// `[frames, d]` -> `[chunks, chunk, d]`, zero right-padding.
    pub fn segment_raw<T: Scalar>(&self, x: &[T], d: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.chunks * self.chunk * d];
        for c in 0..self.chunks {
            for j in 0..self.chunk {
                let t = c * self.hop + j;
                if t >= self.frames {
                    break;
                }
                let dst = (c * self.chunk + j) * d;
                out[dst..dst + d].copy_from_slice(&x[t * d..(t + 1) * d]);
            }
        }
        out
    }

    /// Adjoint of [`Self::segment_raw`]: plain summation back onto frames.
    pub fn segment_adjoint<T: Scalar>(&self, g: &[T], d: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.frames * d];
        for c in 0..self.chunks {
            for j in 0..self.chunk {
                let t = c * self.hop + j;
                if t >= self.frames {
                    break;
                }
                let src = (c * self.chunk + j) * d;
                for k in 0..d {
                    out[t * d + k] += g[src + k];
                }
            }
        }
        out
    }

    /// `[chunks, chunk, d]` -> `[frames, d]`, averaging overlapping frames.
    pub fn overlap_add_raw<T: Scalar>(&self, x: &[T], d: usize) -> Vec<T> {
        let mut out = self.segment_adjoint(x, d);
        for (t, &n) in self.counts().iter().enumerate() {
            let inv = T::one() / T::from_count(n);
            if n > 1 {
                for v in &mut out[t * d..(t + 1) * d] {
                    *v *= inv;
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::overlap_add_raw`].
    pub fn overlap_add_adjoint<T: Scalar>(&self, g: &[T], d: usize) -> Vec<T> {
        let mut scaled = g.to_vec();
        for (t, &n) in self.counts().iter().enumerate() {
            if n > 1 {
                let inv = T::one() / T::from_count(n);
                for v in &mut scaled[t * d..(t + 1) * d] {
                    *v *= inv;
                }
            }
        }
        self.segment_raw(&scaled, d)
    }
}

/// Chunked features `[T_S, S, D]` plus what is needed to undo the chunking.
#[derive(Clone, Debug)]
pub struct ChunkTensor<T> {
    pub data: Tensor<T>,
    pub hop: usize,
    pub original_length: Option<usize>,
}

impl<T: Scalar> ChunkTensor<T> {
    pub fn num_chunks(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn chunk_size(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn plan(&self) -> Result<ChunkPlan> {
        let frames = self
            .original_length
            .ok_or_else(|| Error::Contract("chunk tensor lacks original_length".into()))?;
        let plan = ChunkPlan::new(frames, self.chunk_size())?;
        if plan.hop != self.hop || plan.chunks != self.num_chunks() {
            return Err(Error::Contract(format!(
                "inconsistent chunk metadata: hop {} chunks {} for {} frames",
                self.hop,
                self.num_chunks(),
                frames
            )));
        }
        Ok(plan)
    }
}

pub fn segment<T: Scalar>(hd: &Tensor<T>, chunk: usize) -> Result<ChunkTensor<T>> {
    if hd.rank() != 2 {
        return Err(Error::Dimension {
            op: "segment",
            detail: format!("expected [frames, D], got {:?}", hd.shape()),
        });
    }
    let (frames, d) = (hd.shape()[0], hd.shape()[1]);
    let plan = ChunkPlan::new(frames, chunk)?;
    let data = Tensor::new(
        vec![plan.chunks, plan.chunk, d],
        plan.segment_raw(hd.data(), d),
    )?;
    Ok(ChunkTensor {
        data,
        hop: plan.hop,
        original_length: Some(frames),
    })
}

pub fn overlap_add<T: Scalar>(chunks: &ChunkTensor<T>) -> Result<Tensor<T>> {
    let plan = chunks.plan()?;
    let d = chunks.channels();
    Tensor::new(
        vec![plan.frames, d],
        plan.overlap_add_raw(chunks.data.data(), d),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(frames: usize, d: usize) -> Tensor<f64> {
        Tensor::new(
            vec![frames, d],
            (0..frames * d).map(|v| v as f64 + 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn six_frames_chunk_four() {
        let p = ChunkPlan::new(6, 4).unwrap();
        assert_eq!((p.hop, p.padded, p.chunks), (2, 6, 2));
        let c = segment(&ramp(6, 1), 4).unwrap();
        assert_eq!(c.data.data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn single_chunk_is_input() {
        let x = ramp(4, 3);
        let c = segment(&x, 4).unwrap();
        assert_eq!(c.num_chunks(), 1);
        assert_eq!(c.data.data(), x.data());
    }

    #[test]
    fn five_frames_pads_one() {
        let p = ChunkPlan::new(5, 4).unwrap();
        assert_eq!((p.padded, p.chunks), (6, 2));
        let c = segment(&ramp(5, 1), 4).unwrap();
        assert_eq!(c.data.data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 0.0]);
    }

    #[test]
    fn short_input_pads_to_one_chunk() {
        let p = ChunkPlan::new(1, 250).unwrap();
        assert_eq!((p.padded, p.chunks), (250, 1));
    }

    #[test]
    fn odd_chunk_rejected() {
        assert!(matches!(ChunkPlan::new(6, 3), Err(Error::Config(_))));
        assert!(ChunkPlan::new(6, 0).is_err());
    }

    #[test]
    fn constant_chunks_average_to_constant() {
        let plan = ChunkPlan::new(6, 4).unwrap();
        let c = ChunkTensor {
            data: Tensor::full(&[plan.chunks, 4, 2], 1.0f64),
            hop: 2,
            original_length: Some(6),
        };
        let y = overlap_add(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn missing_length_is_contract_error() {
        let c = ChunkTensor {
            data: Tensor::<f64>::zeros(&[1, 4, 1]),
            hop: 2,
            original_length: None,
        };
        assert!(matches!(overlap_add(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn every_frame_in_one_or_two_chunks() {
        for frames in 1..40 {
            for s in [2, 4, 8] {
                let p = ChunkPlan::new(frames, s).unwrap();
                assert!(p.counts().iter().all(|&n| n == 1 || n == 2));
            }
        }
    }

    proptest! {
        #[test]
        fn segment_round_trip(frames in 1usize..60, half in 1usize..10, d in 1usize..4,
                              seed in proptest::collection::vec(-10.0f64..10.0, 240)) {
            let s = half * 2;
            let x = Tensor::new(vec![frames, d],
                (0..frames * d).map(|i| seed[i % seed.len()] * (i as f64 + 0.5)).collect()).unwrap();
            let y = overlap_add(&segment(&x, s).unwrap()).unwrap();
            prop_assert_eq!(y, x);
        }

        #[test]
        fn segment_is_linear(frames in 1usize..30, a in proptest::collection::vec(-4.0f64..4.0, 30),
                             b in proptest::collection::vec(-4.0f64..4.0, 30)) {
            let xa = Tensor::new(vec![frames, 1], a[..frames].to_vec()).unwrap();
            let xb = Tensor::new(vec![frames, 1], b[..frames].to_vec()).unwrap();
            let lhs = segment(&xa.add(&xb).unwrap(), 4).unwrap().data;
            let rhs = segment(&xa, 4).unwrap().data.add(&segment(&xb, 4).unwrap().data).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn adjoints_match(frames in 1usize..30, vals in proptest::collection::vec(-1.0f64..1.0, 64)) {
            let p = ChunkPlan::new(frames, 4).unwrap();
            let x: Vec<f64> = (0..frames).map(|i| vals[i]).collect();
            let y: Vec<f64> = (0..p.chunks * 4).map(|i| vals[(i * 7) % 64]).collect();
            let lhs: f64 = p.segment_raw(&x, 1).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(p.segment_adjoint(&y, 1)).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            let lhs2: f64 = p.overlap_add_raw(&y, 1).iter().zip(&x).map(|(a, b)| a * b).sum();
            let rhs2: f64 = y.iter().zip(p.overlap_add_adjoint(&x, 1)).map(|(a, b)| a * b).sum();
            prop_assert!((lhs2 - rhs2).abs() < 1e-12);
        }
    }
}
