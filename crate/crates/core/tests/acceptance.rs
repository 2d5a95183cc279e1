//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tiny_sepformer::ca::Path;
use tiny_sepformer::checkpoint::Checkpoint;
use tiny_sepformer::chunking::{overlap_add, segment, ChunkPlan};
use tiny_sepformer::codec::Waveform;
use tiny_sepformer::config::{CaConfig, ModelConfig};
use tiny_sepformer::harness::attention::{attention_maps, write_maps, Selector};
use tiny_sepformer::harness::gradcheck::grad_check_model;
use tiny_sepformer::harness::run::{GradCheckSettings, RunConfig};
use tiny_sepformer::harness::synth::SyntheticSpec;
use tiny_sepformer::harness::train::train;
use tiny_sepformer::metrics::{si_snr, si_snr_with, upit, DEFAULT_EPS};
use tiny_sepformer::params_count::{count_empirical, count_model, count_table1, parallel_even_split, CaLayerCount, SIZE_ROWS};
use tiny_sepformer::{Model32, Model64, Tensor};

const SMOKE: &str = include_str!("../../../configs/smoke.conf");

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_table1() -> Outcome {
    let t = count_table1(256, 51, 128, 128);
    ensure(
        (t.mha, t.sepconv, t.serial, t.parallel) == (262_144, 78_592, 340_736, 88_448),
        || format!("got {t:?}"),
    )?;
    let mut cases = 0;
    for p in 1..=9 {
        let d = 1u64 << p;
        for kk in [1, 3, 11, 51] {
            let t = count_table1(d, kk, d / 2, d / 2);
            ensure(t.parallel < t.serial, || format!("D={d} Kk={kk}: {t:?}"))?;
            ensure(t.parallel == parallel_even_split(d, kk), || format!("closed form D={d} Kk={kk}"))?;
            cases += 1;
        }
    }
    Ok(format!("mha 262144, sepconv 78592, serial 340736, parallel 88448; parallel < serial in {cases} cases"))
}

fn c2_table2() -> Outcome {
    let mut worst: f64 = 0.0;
    for row in SIZE_ROWS {
        let cfg = row.config();
        let analytic = count_model(&cfg).total_analytic;
        let empirical = count_empirical(&Model32::new(cfg).map_err(|e| e.to_string())?);
        ensure(analytic == empirical, || {
            format!("{}: analytic {analytic} != instantiated {empirical}", row.name)
        })?;
        let dev = analytic as f64 / (row.millions * 1e6) - 1.0;
        ensure(dev.abs() <= 0.05, || {
            format!("{} ({},{},{}): {analytic} vs {}M ({:+.2}%)", row.name, row.n_mask, row.n_intra, row.n_inter, row.millions, dev * 100.0)
        })?;
        worst = worst.max(dev.abs());
    }
    Ok(format!("{} rows within 5% (worst {:.2}%), analytic == instantiated", SIZE_ROWS.len(), worst * 100.0))
}

fn ca_set_scalars(model: &Model32, path: &str) -> usize {
    model
        .params
        .iter()
        .filter(|p| p.name.contains(&format!(".{path}[")))
        .map(|p| p.value.len())
        .sum()
}

fn c3_sharing() -> Outcome {
    let mut checked = Vec::new();
    for (n_intra, n_inter) in [(4, 3), (8, 8), (2, 5)] {
        let base = ModelConfig {
            n_mask: 2,
            n_intra,
            n_inter,
            ..ModelConfig::tiny()
        };
        let unshared = Model32::new(base.clone()).map_err(|e| e.to_string())?;
        let shared = Model32::new(ModelConfig { shared: true, ..base }).map_err(|e| e.to_string())?;
        for (path, n) in [("intra", n_intra), ("inter", n_inter)] {
            let (u, s) = (ca_set_scalars(&unshared, path), ca_set_scalars(&shared, path));
            ensure(u == s * n, || format!("{path} N={n}: unshared {u}, shared {s}"))?;
        }
        checked.push(format!("{n_intra}/{n_inter}"));
    }
    for row in SIZE_ROWS.iter().filter(|r| r.shared) {
        let shared = count_model(&row.config());
        let unshared = count_model(&ModelConfig { shared: false, ..row.config() });
        let ca = |r: &tiny_sepformer::params_count::ParamReport| r.ca_total;
        let expected = row.n_mask * (shared.intra_layer.total() * row.n_intra + shared.inter_layer.total() * row.n_inter);
        ensure(ca(&unshared) == expected, || format!("{}: analytic sharing mismatch", row.name))?;
    }
    Ok(format!("shared == unshared / N exactly for N_intra/N_inter in {}", checked.join(", ")))
}

fn gradcheck(cfg: ModelConfig, length: usize) -> Result<(f64, usize, usize, usize), String> {
    let mut model = Model64::new(cfg).map_err(|e| e.to_string())?;
    let spec = SyntheticSpec::new(2, length, 8000, 1);
    let settings = GradCheckSettings {
        length,
        ..GradCheckSettings::default()
    };
    let r = grad_check_model(&mut model, &spec, &settings).map_err(|e| e.to_string())?;
    ensure(r.passed(), || r.render_text().trim().replace('\n', "; "))?;
    Ok((r.max_rel_err(), r.results.len(), r.tensors_covered(), r.tensors_total))
}

fn c4_gradcheck() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    for shared in [false, true] {
        let n = if shared { 2 } else { 1 };
        let cfg = ModelConfig {
            shared,
            n_intra: n,
            n_inter: n,
            ..ModelConfig::tiny()
        };
        let (err, n, covered, total) = gradcheck(cfg, 256)?;
        ensure(n >= 200 && covered == total, || format!("only {n} coords over {covered}/{total} tensors"))?;
        parts.push(format!("shared={shared}: {err:.2e} over {n} coords, {covered}/{total} tensors"));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!("{} ({secs:.1}s)", parts.join("; ")))
}

fn c5_chunking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut n = 0;
    for t in [1, 4, 5, 6, 17, 250] {
        for s in [2, 4, 8, 250] {
            let x = Tensor::<f64>::uniform(&[t, 3], 10.0, &mut rng);
            let back = overlap_add(&segment(&x, s).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            ensure(back == x, || format!("T_lat={t} S={s}: max diff {}", back.max_abs_diff(&x)))?;
            n += 1;
        }
    }
    Ok(format!("bit-exact for {n} (T_lat, S) pairs"))
}

fn oracle_si_snr(e: &[f64], t: &[f64]) -> f64 {
    let me = e.iter().sum::<f64>() / e.len() as f64;
    let mt = t.iter().sum::<f64>() / t.len() as f64;
    let e: Vec<f64> = e.iter().map(|v| v - me).collect();
    let t: Vec<f64> = t.iter().map(|v| v - mt).collect();
    let dot: f64 = e.iter().zip(&t).map(|(a, b)| a * b).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let a = dot / (tt + DEFAULT_EPS);
    let st: f64 = t.iter().map(|v| (a * v).powi(2)).sum();
    let res: f64 = e.iter().zip(&t).map(|(x, y)| (x - a * y).powi(2)).sum();
    10.0 * ((st + DEFAULT_EPS) / (res + DEFAULT_EPS)).log10()
}

/// Heap's algorithm; order differs from the library's lexicographic walk.
fn heap_permutations(k: usize) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..k).collect();
    let mut c = vec![0; k];
    let mut out = vec![a.clone()];
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

fn c6_upit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for k in [2, 3] {
        for _ in 0..50 {
            let len = 64;
            let sig = |rng: &mut ChaCha8Rng| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let targets: Vec<_> = (0..k).map(|_| sig(&mut rng)).collect();
            let ests: Vec<_> = (0..k)
                .map(|_| {
                    let j = rng.gen_range(0..k);
                    let noise = sig(&mut rng);
                    targets[j].iter().zip(noise).map(|(t, n)| t + 0.8 * n).collect::<Vec<f64>>()
                })
                .collect();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for p in heap_permutations(k) {
                let l = -p.iter().enumerate().map(|(i, &j)| oracle_si_snr(&ests[i], &targets[j])).sum::<f64>() / k as f64;
                if best.as_ref().is_none_or(|(b, _)| l < *b) {
                    best = Some((l, p));
                }
            }
            let (loss, perm) = best.expect("permutations");
            let got = upit(&ests, &targets).map_err(|e| e.to_string())?;
            ensure(got.permutation == perm, || format!("K={k}: {:?} vs oracle {perm:?}", got.permutation))?;
            worst = worst.max((got.loss - loss).abs());
            ensure((got.loss - loss).abs() <= 1e-9, || format!("K={k}: loss {} vs {loss}", got.loss))?;
        }
    }
    Ok(format!("100 instances match exhaustive oracle, max loss diff {worst:.1e}"))
}

fn c7_si_snr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let e: Vec<f64> = t.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
    let base = si_snr(&e, &t).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 0.5, 2.0, 10.0, 100.0] {
        let scaled: Vec<f64> = e.iter().map(|v| v * alpha).collect();
        worst = worst.max((si_snr(&scaled, &t).map_err(|e| e.to_string())? - base).abs());
    }
    ensure(worst <= 1e-6, || format!("scale drift {worst:e} dB"))?;
    let hand = si_snr_with(&[1.0, 1.0], &[1.0, 0.0], 1e-30, false).map_err(|e| e.to_string())?;
    ensure(hand == 0.0, || format!("hand case {hand} dB"))?;
    let hand_default = si_snr_with(&[1.0, 1.0], &[1.0, 0.0], DEFAULT_EPS, false).map_err(|e| e.to_string())?;
    ensure(hand_default.abs() < 1e-6, || format!("hand case at default eps {hand_default} dB"))?;
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let norm = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    let unit: Vec<f64> = t.iter().map(|v| (v - mean) / norm).collect();
    let ceiling = si_snr(&unit, &unit).map_err(|e| e.to_string())?;
    ensure(ceiling >= 60.0, || format!("ceiling {ceiling} dB"))?;
    Ok(format!("scale drift {worst:.1e} dB, hand case 0 dB, ceiling {ceiling:.1} dB"))
}

fn c8_smoke() -> Outcome {
    let run = RunConfig::parse(SMOKE).map_err(|e| e.to_string())?;
    let m = &run.model;
    ensure(
        m.width() == 16
            && m.chunk == 8
            && (m.n_mask, m.n_intra, m.n_inter, m.speakers) == (1, 1, 1, 2)
            && (m.intra.d_attn, m.intra.d_conv, m.intra.heads) == (8, 8, 2)
            && (m.encoder.kernel, m.encoder.stride) == (4, 2)
            && run.data.length == 512
            && run.train.steps == 500
            && run.train.adam.lr == 1e-3,
        || "smoke config drifted from the acceptance definition".into(),
    )?;
    let started = Instant::now();
    let t = train::<f32>(&run).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let si = t.report.final_si_snri;
    ensure(si > 10.0, || format!("train SI-SNRi {si:.2} dB"))?;
    ensure(secs < 600.0, || format!("took {secs:.0}s"))?;
    let windows: Vec<f64> = t
        .report
        .losses
        .chunks(100)
        .map(|c| c.iter().map(|l| l.1).sum::<f64>() / c.len() as f64)
        .collect();
    ensure(windows.windows(2).all(|w| w[1] <= w[0]), || format!("windowed loss {windows:?}"))?;
    Ok(format!("train SI-SNRi {si:.2} dB after 500 steps ({secs:.1}s)"))
}

fn c9_channel_split() -> Outcome {
    let mut parts = Vec::new();
    let mut counts = Vec::new();
    for (dc, da) in [(192, 64), (128, 128), (64, 192)] {
        let split = |kernel| CaConfig {
            d_conv: dc,
            d_attn: da,
            kernel,
            ..CaConfig::intra_default()
        };
        let cfg = ModelConfig {
            n_mask: 1,
            n_intra: 1,
            n_inter: 1,
            chunk: 4,
            intra: split(51),
            inter: split(11),
            ..ModelConfig::default()
        };
        let model = Model64::new(cfg.clone()).map_err(|e| e.to_string())?;
        let x = Waveform::new(SyntheticSpec::new(2, 200, 8000, 3).mixture(0).0.samples, 8000).map_err(|e| e.to_string())?;
        let (est, _) = model.separate(&x).map_err(|e| e.to_string())?;
        ensure(
            est.sources.len() == 2 && est.sources.iter().all(|s| s.len() == 200 && s.samples.iter().all(|v| v.is_finite())),
            || format!("({dc},{da}) forward contract"),
        )?;
        // weights only, as in the closed form
        for (path, kk) in [("intra", 51u64), ("inter", 11u64)] {
            let prefix = format!("mask.ca[0].{path}[0].");
            let weights: usize = model
                .params
                .iter()
                .filter(|p| {
                    p.name.starts_with(&prefix)
                        && ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "conv.depthwise", "conv.pointwise.w"]
                            .iter()
                            .any(|s| p.name.ends_with(s))
                })
                .map(|p| p.value.len())
                .sum();
            let formula = count_table1(256, kk, da as u64, dc as u64).parallel;
            ensure(weights as u64 == formula, || format!("({dc},{da}) {path}: {weights} vs formula {formula}"))?;
        }
        counts.push((dc, da, CaLayerCount::of(&cfg.intra).total() as i64));
        let (err, ..) = gradcheck(cfg, 64)?;
        parts.push(format!("({dc},{da}) {err:.1e}"));
    }
    for w in counts.windows(2) {
        let (dc0, da0, n0) = w[0];
        let (dc1, da1, n1) = w[1];
        let f = |dc: usize, da: usize| count_table1(256, 51, da as u64, dc as u64).parallel as i64;
        // biases and norms add 3 Dc + 2 Da, and Da + Dc is fixed
        let predicted = f(dc1, da1) - f(dc0, da0) + (dc1 as i64 - dc0 as i64);
        ensure(n1 - n0 == predicted, || format!("layer delta {} vs predicted {predicted}", n1 - n0))?;
    }
    Ok(format!("forward ok, weight counts equal 4Da^2+Kk*Dc+Dc^2, grad-check max rel err {}", parts.join(", ")))
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = format!("{SMOKE}\ntrain.precision = f64\ntrain.steps = 40\ntrain.mixtures = 8\n");
    let run = RunConfig::parse(&base).map_err(|e| e.to_string())?;
    let a = train::<f64>(&run).map_err(|e| e.to_string())?;
    let b = train::<f64>(&run).map_err(|e| e.to_string())?;
    ensure(a.report.losses == b.report.losses, || "loss curves differ between identical runs".into())?;
    ensure(a.report.config_hash == b.report.config_hash, || "config hash differs".into())?;

    let ck = a.checkpoint();
    let path = dir.path().join("full.tsep");
    ck.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::<f64>::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded.to_bytes() == ck.to_bytes(), || "checkpoint bytes changed on reload".into())?;
    let rebuilt = loaded.build_model().map_err(|e| e.to_string())?;
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(
        rebuilt.params.iter().zip(a.model.params.iter()).all(|(x, y)| bits(&x.value) == bits(&y.value)),
        || "parameters not bit-identical after reload".into(),
    )?;
    let ck32 = Checkpoint::from_model(&Model32::new(run.model.clone()).map_err(|e| e.to_string())?);
    let back32 = Checkpoint::<f32>::from_bytes(&ck32.to_bytes()).map_err(|e| e.to_string())?;
    ensure(back32.to_bytes() == ck32.to_bytes(), || "f32 checkpoint bytes changed".into())?;

    let half = RunConfig::parse(&format!("{base}train.steps = 20\n")).map_err(|e| e.to_string())?;
    let first = train::<f64>(&half).map_err(|e| e.to_string())?;
    let mid = dir.path().join("mid.tsep");
    first.checkpoint().save(&mid).map_err(|e| e.to_string())?;
    let resumed_run = RunConfig::parse(&format!("{base}train.resume = {}\n", mid.display())).map_err(|e| e.to_string())?;
    let resumed = train::<f64>(&resumed_run).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for step in 21..=40 {
        let (x, y) = (a.report.loss_at(step), resumed.report.loss_at(step));
        let (Some(x), Some(y)) = (x, y) else {
            return Err(format!("missing loss at step {step}"));
        };
        worst = worst.max((x - y).abs());
    }
    ensure(worst <= 1e-6, || format!("resume drift {worst:e}"))?;
    Ok(format!("identical curves, bit-exact checkpoints, resume drift {worst:.1e}"))
}

fn c11_attention() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        n_intra: 2,
        n_inter: 2,
        ..ModelConfig::tiny()
    };
    let model = Model64::new(cfg.clone()).map_err(|e| e.to_string())?;
    let x = SyntheticSpec::new(2, 256, 8000, 4).mixture(0).0.samples;
    let frames = cfg.encoder.frames(cfg.encoder.padded_len(256)).map_err(|e| e.to_string())?;
    let plan = ChunkPlan::new(frames, cfg.chunk).map_err(|e| e.to_string())?;
    let mut rows = 0;
    let mut worst: f64 = 0.0;
    for path in [Path::Intra, Path::Inter] {
        for iteration in 0..2 {
            for head in 0..cfg.intra.heads {
                let sel = Selector { block: 0, path, iteration, head };
                let maps = attention_maps(&model, &x, sel).map_err(|e| e.to_string())?;
                let (count, n) = match path {
                    Path::Intra => (plan.chunks, cfg.chunk),
                    Path::Inter => (cfg.chunk, plan.chunks),
                };
                ensure(maps.len() == count && maps.iter().all(|m| m.shape() == [n, n]), || {
                    format!("{path} maps: {} of {:?}", maps.len(), maps[0].shape())
                })?;
                for file in write_maps(dir.path(), sel, &maps).map_err(|e| e.to_string())? {
                    let text = std::fs::read_to_string(&file).map_err(|e| e.to_string())?;
                    for line in text.lines() {
                        let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).sum();
                        worst = worst.max((sum - 1.0).abs());
                        rows += 1;
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-5, || format!("row sum off by {worst:e}"))?;
    Ok(format!(
        "{rows} dumped rows sum to 1 (max err {worst:.1e}); intra {s}x{s}, inter {c}x{c}",
        s = cfg.chunk,
        c = plan.chunks
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("Table 1 formulas", c1_table1),
        ("Table 2 model sizes", c2_table2),
        ("sharing ratio", c3_sharing),
        ("gradient fidelity", c4_gradcheck),
        ("chunking round trip", c5_chunking),
        ("uPIT correctness", c6_upit),
        ("SI-SNR properties", c7_si_snr),
        ("desk-scale learning", c8_smoke),
        ("channel division", c9_channel_split),
        ("determinism and persistence", c10_determinism),
        ("attention dumps", c11_attention),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
