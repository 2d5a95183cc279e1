//! Central finite differences against tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::metrics::{fixed_assignment_loss, upit_loss};
use crate::model::TinySepformer;
use crate::tensor::Tensor;

use super::run::GradCheckSettings;
use super::synth::SyntheticSpec;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub results: Vec<CoordResult>,
    pub threshold: f64,
    pub tensors_total: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordResult> {
        self.results.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |w| w.rel_err)
    }

    pub fn tensors_covered(&self) -> usize {
        let mut names: Vec<&str> = self.results.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.len()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.threshold
    }

    /// `Err` naming the worst coordinate when the threshold is exceeded.
    pub fn check(&self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let w = self.worst().expect("failed report has results");
        Err(Error::GradCheck {
            max_rel_err: w.rel_err,
            worst: format!("{}[{}]", w.name, w.index),
            threshold: self.threshold,
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("gradcheck.coords", self.results.len());
        kv.insert("gradcheck.tensors_covered", self.tensors_covered());
        kv.insert("gradcheck.tensors_total", self.tensors_total);
        kv.insert("gradcheck.max_rel_err", format!("{:e}", self.max_rel_err()));
        kv.insert("gradcheck.threshold", format!("{:e}", self.threshold));
        kv.insert("gradcheck.passed", self.passed());
        if let Some(w) = self.worst() {
            kv.insert("gradcheck.worst", format!("{}[{}]", w.name, w.index));
        }
        kv
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "checked {} coordinates in {}/{} tensors\n",
            self.results.len(),
            self.tensors_covered(),
            self.tensors_total
        );
        if let Some(w) = self.worst() {
            s.push_str(&format!(
                "worst {}[{}]: analytic {:.6e} numeric {:.6e} rel err {:.3e}\n",
                w.name, w.index, w.analytic, w.numeric, w.rel_err
            ));
        }
        s.push_str(&format!(
            "max rel err {:.3e} (threshold {:.1e}): {}\n",
            self.max_rel_err(),
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// At least `total` coordinates, with every tensor represented.
pub fn sample_coordinates<R: Rng>(store: &ParamStore<f64>, total: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let per = total.div_ceil(store.len().max(1)).max(1);
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.value(id).len();
        for i in sample(rng, n, per.min(n)) {
            coords.push((id, i));
        }
    }
    let ids: Vec<ParamId> = store.ids().collect();
    while coords.len() < total {
        let id = ids[rng.gen_range(0..ids.len())];
        coords.push((id, rng.gen_range(0..store.value(id).len())));
    }
    coords
}

/// Smallest step tried before accepting a non-smooth estimate.
pub const MIN_STEP: f64 = 1e-7;

/// Central-difference derivative of `f` at `w`, Richardson-extrapolated
/// from steps `h` and `2h`. When the two disagree, a ReLU kink lies inside
/// the stencil and the step shrinks tenfold. Returns the estimate and the
/// step finally used.
pub fn richardson_derivative<F>(mut f: F, w: f64, h: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut h = h;
    loop {
        let d1 = (f(w + h)? - f(w - h)?) / (2.0 * h);
        let d2 = (f(w + 2.0 * h)? - f(w - 2.0 * h)?) / (4.0 * h);
        let est = (4.0 * d1 - d2) / 3.0;
        let smooth = (d1 - d2).abs() <= 1e-5 * d1.abs().max(d2.abs()) + 1e-13 / h;
        if smooth || h / 10.0 < MIN_STEP {
            return Ok((est, h));
        }
        h /= 10.0;
    }
}

/// Compare `analytic` with finite differences of `loss` at each coordinate.
/// The initial step is `h * max(1, |w|)`.
pub fn check_coordinates<F>(
    store: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    coords: &[(ParamId, usize)],
    h: f64,
    mut loss: F,
) -> Result<Vec<CoordResult>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut out = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let w = store.value(id).data()[i];
        let (numeric, _) = richardson_derivative(
            |v| {
                store.get_mut(id).value.data_mut()[i] = v;
                loss(store)
            },
            w,
            h * w.abs().max(1.0),
        )?;
        store.get_mut(id).value.data_mut()[i] = w;
        let a = analytic[id.index()].data()[i];
        out.push(CoordResult {
            name: store.get(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    Ok(out)
}

/// Check the full model on one synthetic mixture. The speaker assignment
/// is fixed at the unperturbed point so the loss stays smooth.
pub fn grad_check_model(
    model: &mut TinySepformer<f64>,
    data: &SyntheticSpec,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let spec = SyntheticSpec {
        length: settings.length,
        ..data.clone()
    };
    let (mix, src) = spec.mixture(0);
    let targets: Vec<Vec<f64>> = src.into_iter().map(|w| w.samples).collect();
    let mut store = std::mem::take(&mut model.params);
    let result = (|| {
        let (analytic, permutation) = {
            let mut tape = Tape::new(&store);
            let fwd = model.forward(&mut tape, &mix.samples)?;
            let (loss, pit) = upit_loss(&mut tape, &fwd.estimates, &targets)?;
            (tape.backward(loss)?, pit.permutation)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let coords = sample_coordinates(&store, settings.coords, &mut rng);
        let results = check_coordinates(&mut store, &analytic, &coords, settings.step, |s| {
            let mut tape = Tape::new(s);
            let fwd = model.forward(&mut tape, &mix.samples)?;
            let loss = fixed_assignment_loss(&mut tape, &fwd.estimates, &targets, &permutation)?;
            tape.value(loss).item()
        })?;
        Ok(GradCheckReport {
            results,
            threshold: settings.threshold,
            tensors_total: store.len(),
        })
    })();
    model.params = store;
    result
}
