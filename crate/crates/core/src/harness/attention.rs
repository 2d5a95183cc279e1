//! Extract attention weight maps from a forward pass.

use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use crate::autodiff::Tape;
use crate::ca::Path;
use crate::error::{Error, Result};
use crate::model::TinySepformer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `block:intra|inter:iteration:head`, all indices zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selector {
    pub block: usize,
    pub path: Path,
    pub iteration: usize,
    pub head: usize,
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("selector `{s}` is not block:intra|inter:iteration:head"));
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [block, path, iteration, head] = parts[..] else {
            return Err(bad());
        };
        let path = match path {
            "intra" => Path::Intra,
            "inter" => Path::Inter,
            _ => return Err(bad()),
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        Ok(Self {
            block: num(block)?,
            path,
            iteration: num(iteration)?,
            head: num(head)?,
        })
    }
}

impl Selector {
    fn validate<T>(&self, model: &TinySepformer<T>) -> Result<()> {
        let cfg = &model.config;
        let (ca, n) = match self.path {
            Path::Intra => (&cfg.intra, cfg.n_intra),
            Path::Inter => (&cfg.inter, cfg.n_inter),
        };
        let out_of_range = |what: &str, got: usize, limit: usize| {
            Err(Error::Config(format!("selector {what} {got} out of range (0..{limit})")))
        };
        if self.block >= cfg.n_mask {
            return out_of_range("block", self.block, cfg.n_mask);
        }
        if self.iteration >= n {
            return out_of_range("iteration", self.iteration, n);
        }
        if ca.d_attn == 0 {
            return Err(Error::Config(format!("{} layers have no attention path", self.path)));
        }
        if self.head >= ca.heads {
            return out_of_range("head", self.head, ca.heads);
        }
        Ok(())
    }
}

/// One `[n, n]` map per batch element: S x S per chunk for intra layers,
/// T_S x T_S per chunk position for inter layers.
pub fn attention_maps<T: Scalar>(model: &TinySepformer<T>, samples: &[T], sel: Selector) -> Result<Vec<Tensor<f64>>> {
    sel.validate(model)?;
    let mut tape = Tape::new(&model.params);
    let fwd = model.forward(&mut tape, samples)?;
    let rec = fwd
        .attention
        .iter()
        .find(|r| r.block == sel.block && r.path == sel.path && r.iteration == sel.iteration)
        .ok_or_else(|| Error::Contract("selected layer recorded no attention".into()))?;
    let w = tape
        .attention_weights(rec.node)
        .ok_or_else(|| Error::Contract("trace node is not an attention op".into()))?;
    let &[b, h, n, _] = w.shape() else {
        return Err(Error::Contract(format!("attention weights have shape {:?}", w.shape())));
    };
    Ok((0..b)
        .map(|i| {
            let start = (i * h + sel.head) * n * n;
            let data = w.data()[start..start + n * n].iter().map(|v| v.as_f64()).collect();
            Tensor::new(vec![n, n], data).expect("n x n slice")
        })
        .collect())
}

/// Write each map as a CSV grid; returns the file paths.
pub fn write_maps(dir: &FsPath, sel: Selector, maps: &[Tensor<f64>]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    maps.iter()
        .enumerate()
        .map(|(i, m)| {
            let path = dir.join(format!(
                "attn_b{}_{}_i{}_h{}_{:04}.csv",
                sel.block, sel.path, sel.iteration, sel.head, i
            ));
            let n = m.last_dim();
            let text: String = m
                .data()
                .chunks(n)
                .map(|row| {
                    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    cells.join(",") + "\n"
                })
                .collect();
            std::fs::write(&path, text)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn input() -> Vec<f64> {
        (0..256).map(|i| (i as f64 * 0.3).sin()).collect()
    }

    #[test]
    fn parse_selector() {
        let s: Selector = "0:inter:1:3".parse().unwrap();
        assert_eq!((s.block, s.path, s.iteration, s.head), (0, Path::Inter, 1, 3));
        assert!("0:sideways:0:0".parse::<Selector>().is_err());
        assert!("0:intra:0".parse::<Selector>().is_err());
    }

    #[test]
    fn shapes_and_row_sums() {
        let model = TinySepformer::<f64>::new(ModelConfig::tiny()).unwrap();
        let x = input();
        let frames = model.config.encoder.frames(256).unwrap();
        let plan = crate::chunking::ChunkPlan::new(frames, 8).unwrap();
        let intra = attention_maps(&model, &x, "0:intra:0:1".parse().unwrap()).unwrap();
        assert_eq!(intra.len(), plan.chunks);
        assert!(intra.iter().all(|m| m.shape() == [8, 8]));
        let inter = attention_maps(&model, &x, "0:inter:0:0".parse().unwrap()).unwrap();
        assert_eq!(inter.len(), 8);
        assert!(inter.iter().all(|m| m.shape() == [plan.chunks, plan.chunks]));
        for m in intra.iter().chain(&inter) {
            for row in m.data().chunks(m.last_dim()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn out_of_range_selectors() {
        let model = TinySepformer::<f64>::new(ModelConfig::tiny()).unwrap();
        let x = input();
        for sel in ["0:intra:0:2", "1:intra:0:0", "0:inter:1:0"] {
            assert!(matches!(
                attention_maps(&model, &x, sel.parse().unwrap()),
                Err(Error::Config(_))
            ));
        }
    }
}
