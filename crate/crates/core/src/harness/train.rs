//! Desk-scale training loop: uPIT negative SI-SNR, Adam, fixed synthetic
//! training set.

use std::path::PathBuf;
use std::time::Instant;

use crate::autodiff::{AdamState, Tape};
use crate::checkpoint::Checkpoint;
use crate::codec::Waveform;
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::metrics::{improvement, upit_loss};
use crate::model::TinySepformer;
use crate::scalar::Scalar;

use super::report::write_report;
use super::run::RunConfig;
use super::synth::SyntheticSpec;

/// One mixture and its sources in the working precision.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub mixture: Vec<T>,
    pub sources: Vec<Vec<T>>,
}

pub fn dataset<T: Scalar>(spec: &SyntheticSpec, n: usize) -> Vec<Example<T>> {
    let conv = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
    (0..n as u64)
        .map(|i| {
            let (mix, src) = spec.mixture(i);
            Example {
                mixture: conv(&mix.samples),
                sources: src.iter().map(|s| conv(&s.samples)).collect(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// `(step, loss)` for every step run; step numbers start at 1.
    pub losses: Vec<(u64, f64)>,
    pub start_step: u64,
    pub final_si_snri: f64,
    pub final_sdri: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
    pub seed: u64,
    pub data_seed: u64,
}

impl TrainReport {
    pub fn loss_at(&self, step: u64) -> Option<f64> {
        self.losses.iter().find(|(s, _)| *s == step).map(|&(_, l)| l)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("train.config_hash", &self.config_hash);
        kv.insert("train.seed", self.seed);
        kv.insert("train.data_seed", self.data_seed);
        kv.insert("train.start_step", self.start_step);
        kv.insert("train.end_step", self.start_step + self.losses.len() as u64);
        kv.insert("train.final_si_snri_db", self.final_si_snri);
        kv.insert("train.final_sdri_db", self.final_sdri);
        kv.insert("train.wall_time_s", self.wall_time_s);
        for (s, l) in &self.losses {
            kv.insert(format!("loss.{s:06}"), l);
        }
        kv
    }

    pub fn render_text(&self, log_every: u64) -> String {
        let mut s = format!(
            "config hash     {}\nseed            {} (data {})\nsteps           {}..{}\n",
            self.config_hash,
            self.seed,
            self.data_seed,
            self.start_step,
            self.start_step + self.losses.len() as u64
        );
        for (step, loss) in &self.losses {
            if log_every > 0 && (step % log_every == 0 || *step == self.start_step + 1) {
                s.push_str(&format!("step {step:>6}  loss {loss:>10.4}\n"));
            }
        }
        s.push_str(&format!(
            "train SI-SNRi   {:.3} dB\ntrain SDRi      {:.3} dB\nwall time       {:.2} s\n",
            self.final_si_snri, self.final_sdri, self.wall_time_s
        ));
        s
    }
}

pub struct Trained<T> {
    pub model: TinySepformer<T>,
    pub adam: AdamState<T>,
    pub report: TrainReport,
}

impl<T: Scalar> Trained<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::from_model(&self.model).with_adam(&self.model, &self.adam)
    }

    /// Write `checkpoint.tsep` and `train_report.{txt,kv}` into the run's
    /// output directory.
    pub fn save(&self, run: &RunConfig) -> Result<PathBuf> {
        std::fs::create_dir_all(&run.output_dir)?;
        let path = run.output_dir.join("checkpoint.tsep");
        self.checkpoint().save(&path)?;
        write_report(
            &run.output_dir,
            "train_report",
            &self.report.render_text(run.train.log_every),
            &self.report.to_kv(),
        )?;
        Ok(path)
    }
}

/// Loss and gradient for one batch; gradients are left in `model.params`.
pub fn batch_step<T: Scalar>(model: &mut TinySepformer<T>, batch: &[&Example<T>]) -> Result<f64> {
    let mut total = 0.0;
    let mut grads: Option<Vec<crate::tensor::Tensor<T>>> = None;
    let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
    for ex in batch {
        let mut tape = Tape::new(&model.params);
        let fwd = model.forward(&mut tape, &ex.mixture)?;
        let (loss, _) = upit_loss(&mut tape, &fwd.estimates, &ex.sources)?;
        total += tape.value(loss).item()?.as_f64();
        let loss = tape.scale(loss, scale)?;
        let g = tape.backward(loss)?;
        grads = Some(match grads {
            None => g,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
                acc
            }
        });
    }
    model.params.set_grads(grads.unwrap_or_default())?;
    Ok(total / batch.len() as f64)
}

/// Run optimizer steps `adam.step + 1 ..= until`. Step `s` uses examples
/// `(s - 1) * batch + j` modulo the set size.
pub fn run_steps<T: Scalar>(
    model: &mut TinySepformer<T>,
    adam: &mut AdamState<T>,
    data: &[Example<T>],
    batch: usize,
    until: u64,
) -> Result<Vec<(u64, f64)>> {
    let mut losses = Vec::new();
    while adam.step < until {
        let step = adam.step + 1;
        let picks: Vec<&Example<T>> = (0..batch)
            .map(|j| &data[((step - 1) as usize * batch + j) % data.len()])
            .collect();
        let loss = match batch_step(model, &picks) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        adam.step(&mut model.params)?;
        losses.push((step, loss));
    }
    Ok(losses)
}

/// Mean SI-SNRi and SDRi of the model over `data`.
pub fn mean_improvement<T: Scalar>(model: &TinySepformer<T>, data: &[Example<T>], sample_rate: u32) -> Result<(f64, f64)> {
    let mut si = 0.0;
    let mut sd = 0.0;
    for ex in data {
        let wave = Waveform::new(ex.mixture.clone(), sample_rate)?;
        let (est, _) = model.separate(&wave)?;
        let ests: Vec<Vec<f64>> = est.sources.iter().map(|w| w.to_f64()).collect();
        let tgts: Vec<Vec<f64>> = ex.sources.iter().map(|s| s.iter().map(|v| v.as_f64()).collect()).collect();
        let imp = improvement(&ests, &tgts, &wave.to_f64())?;
        si += imp.si_snri;
        sd += imp.sdri;
    }
    let n = data.len().max(1) as f64;
    Ok((si / n, sd / n))
}

/// Train per `run`, resuming from `train.resume` when set.
pub fn train<T: Scalar>(run: &RunConfig) -> Result<Trained<T>> {
    let started = Instant::now();
    let (mut model, mut adam) = match &run.train.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if ck.config != run.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            let model = ck.build_model()?;
            let mut adam = ck.adam_state(&model)?.ok_or_else(|| {
                Error::Format(format!("checkpoint {} has no optimizer state", path.display()))
            })?;
            adam.config = run.train.adam;
            (model, adam)
        }
        None => {
            let model = TinySepformer::<T>::new(run.model.clone())?;
            let adam = AdamState::new(&model.params, run.train.adam)?;
            (model, adam)
        }
    };
    let start_step = adam.step;
    let data = dataset::<T>(&run.train_data(), run.train.mixtures);
    let losses = run_steps(&mut model, &mut adam, &data, run.train.batch, run.train.steps)?;
    let (final_si_snri, final_sdri) = mean_improvement(&model, &data, run.model.sample_rate)?;
    let report = TrainReport {
        losses,
        start_step,
        final_si_snri,
        final_sdri,
        wall_time_s: started.elapsed().as_secs_f64(),
        config_hash: run.hash(),
        seed: run.model.seed,
        data_seed: run.data.seed,
    };
    Ok(Trained { model, adam, report })
}
