//! SI-SNR, utterance-level permutation invariant training, and the
//! improvement metrics reported for separation quality.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Largest speaker count for which the exhaustive permutation search runs.
pub const MAX_PIT_SPEAKERS: usize = 4;

/// SI-SNR in dB with both signals mean-subtracted.
pub fn si_snr(est: &[f64], target: &[f64]) -> Result<f64> {
    si_snr_with(est, target, DEFAULT_EPS, true)
}

pub fn si_snr_with(est: &[f64], target: &[f64], eps: f64, zero_mean: bool) -> Result<f64> {
    if est.len() != target.len() || est.is_empty() {
        return Err(Error::Contract(format!(
            "si_snr needs equal non-empty lengths, got {} and {}",
            est.len(),
            target.len()
        )));
    }
    let (e, t) = if zero_mean {
        (centred(est), centred(target))
    } else {
        (est.to_vec(), target.to_vec())
    };
    let tt = dot(&t, &t);
    let alpha = dot(&e, &t) / (tt + eps);
    let noise: f64 = e
        .iter()
        .zip(&t)
        .map(|(&a, &b)| (a - alpha * b).powi(2))
        .sum();
    Ok(10.0 * ((alpha * alpha * tt + eps) / (noise + eps)).log10())
}

/// Plain signal-to-residual ratio in dB, used as the SDR approximation.
pub fn sdr(est: &[f64], target: &[f64]) -> Result<f64> {
    if est.len() != target.len() || est.is_empty() {
        return Err(Error::Contract(format!(
            "sdr needs equal non-empty lengths, got {} and {}",
            est.len(),
            target.len()
        )));
    }
    let residual: f64 = est.iter().zip(target).map(|(&a, &b)| (b - a).powi(2)).sum();
    Ok(10.0 * ((dot(target, target) + DEFAULT_EPS) / (residual + DEFAULT_EPS)).log10())
}

fn centred(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitResult {
    /// Negated mean SI-SNR of the chosen assignment.
    pub loss: f64,
    /// `permutation[i]` is the target assigned to estimate `i`.
    pub permutation: Vec<usize>,
    /// `per_pair[i][j]` is SI-SNR of estimate `i` against target `j`.
    pub per_pair: Vec<Vec<f64>>,
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Best assignment from a pairwise SI-SNR matrix. Ties keep the
/// lexicographically first permutation.
pub fn best_assignment(per_pair: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let k = per_pair.len();
    if k == 0 || k > MAX_PIT_SPEAKERS {
        return Err(Error::Contract(format!(
            "permutation search supports 1..={MAX_PIT_SPEAKERS} sources, got {k}"
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in permutations(k) {
        let mean = perm.iter().enumerate().map(|(i, &j)| per_pair[i][j]).sum::<f64>() / k as f64;
        if best.as_ref().is_none_or(|(_, m)| mean > *m) {
            best = Some((perm, mean));
        }
    }
    Ok(best.expect("at least one permutation"))
}

pub fn upit(ests: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<PitResult> {
    if ests.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} estimates for {} targets",
            ests.len(),
            targets.len()
        )));
    }
    let per_pair = ests
        .iter()
        .map(|e| targets.iter().map(|t| si_snr(e, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let (permutation, mean) = best_assignment(&per_pair)?;
    Ok(PitResult {
        loss: -mean,
        permutation,
        per_pair,
    })
}

/// Differentiable uPIT loss on a tape. The assignment is chosen on the
/// current values and the loss is the negated mean SI-SNR of that
/// assignment.
pub fn upit_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ests: &[Var],
    targets: &[Vec<T>],
) -> Result<(Var, PitResult)> {
    let est_vals: Vec<Vec<f64>> = ests
        .iter()
        .map(|&v| tape.value(v).data().iter().map(|x| x.as_f64()).collect())
        .collect();
    let tgt_vals: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| t.iter().map(|x| x.as_f64()).collect())
        .collect();
    let pit = upit(&est_vals, &tgt_vals)?;
    let loss = fixed_assignment_loss(tape, ests, targets, &pit.permutation)?;
    Ok((loss, pit))
}

/// Negated mean SI-SNR for a given assignment.
pub fn fixed_assignment_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ests: &[Var],
    targets: &[Vec<T>],
    permutation: &[usize],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &j) in permutation.iter().enumerate() {
        let s = tape.si_snr(ests[i], &targets[j], c(DEFAULT_EPS), true)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty assignment".into()))?;
    tape.scale(total, c(-1.0 / permutation.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub si_snri: f64,
    pub sdri: f64,
    pub permutation: Vec<usize>,
}

/// SI-SNRi and SDRi averaged over speakers under the uPIT assignment.
pub fn improvement(ests: &[Vec<f64>], targets: &[Vec<f64>], mixture: &[f64]) -> Result<Improvement> {
    let pit = upit(ests, targets)?;
    let k = ests.len() as f64;
    let mut si = 0.0;
    let mut sd = 0.0;
    for (i, &j) in pit.permutation.iter().enumerate() {
        si += pit.per_pair[i][j] - si_snr(mixture, &targets[j])?;
        sd += sdr(&ests[i], &targets[j])? - sdr(mixture, &targets[j])?;
    }
    Ok(Improvement {
        si_snri: si / k,
        sdri: sd / k,
        permutation: pit.permutation,
    })
}

pub fn si_snri(ests: &[Vec<f64>], targets: &[Vec<f64>], mixture: &[f64]) -> Result<f64> {
    Ok(improvement(ests, targets, mixture)?.si_snri)
}

pub fn sdri(ests: &[Vec<f64>], targets: &[Vec<f64>], mixture: &[f64]) -> Result<f64> {
    Ok(improvement(ests, targets, mixture)?.sdri)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn unit(mut v: Vec<f64>) -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= m);
        let n = dot(&v, &v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn hand_case_is_zero_db() {
        let v = si_snr_with(&[1.0, 1.0], &[1.0, 0.0], DEFAULT_EPS, false).unwrap();
        assert!(v.abs() < 1e-7, "{v}");
    }

    #[test]
    fn perfect_estimate_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = unit(noise(64, &mut rng));
        assert!(si_snr(&t, &t).unwrap() >= 60.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(si_snr(&[1.0], &[1.0, 2.0]).is_err());
        assert!(upit(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn upit_identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = noise(50, &mut rng);
        let b = noise(50, &mut rng);
        let direct = upit(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(direct.permutation, vec![0, 1]);
        let swapped = upit(&[b.clone(), a.clone()], &[a, b]).unwrap();
        assert_eq!(swapped.permutation, vec![1, 0]);
        assert!((direct.loss - swapped.loss).abs() < 1e-12);
    }

    #[test]
    fn tape_si_snr_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = noise(40, &mut rng);
        let t = noise(40, &mut rng);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let ev = tape.input(Tensor::new(vec![40], e.clone()).unwrap()).unwrap();
        let s = tape.si_snr(ev, &t, DEFAULT_EPS, true).unwrap();
        assert!((tape.value(s).item().unwrap() - si_snr(&e, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn no_op_separator_has_zero_improvement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = noise(80, &mut rng);
        let b = noise(80, &mut rng);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let imp = improvement(&[mix.clone(), mix.clone()], &[a.clone(), b.clone()], &mix).unwrap();
        assert!(imp.si_snri.abs() < 1e-12 && imp.sdri.abs() < 1e-12);
        let imp = improvement(&[a.clone(), b.clone()], &[a, b], &mix).unwrap();
        assert!(imp.si_snri > 0.0 && imp.sdri > 0.0);
    }

    #[test]
    fn sinusoid_mixture_improvement_matches_direct_evaluation() {
        let n = 800;
        let s1: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 200.0 * i as f64 / 8000.0).sin()).collect();
        let s2: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 800.0 * i as f64 / 8000.0).sin()).collect();
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
        let got = si_snri(&[s1.clone(), s2.clone()], &[s1.clone(), s2.clone()], &mix).unwrap();
        let direct = ((si_snr(&s1, &s1).unwrap() - si_snr(&mix, &s1).unwrap())
            + (si_snr(&s2, &s2).unwrap() - si_snr(&mix, &s2).unwrap()))
            / 2.0;
        assert!((got - direct).abs() < 1e-9);
        // equal-power orthogonal sources: the mixture sits near 0 dB
        assert!(si_snr(&mix, &s1).unwrap().abs() < 0.1);
    }

    proptest! {
        #[test]
        // The additive eps bounds how small the gain may go before the
        // residual energy is comparable to it.
        fn scale_invariance(seed in 0u64..1000, alpha in 0.1f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = noise(512, &mut rng);
            let e: Vec<f64> = t.iter().zip(noise(512, &mut rng)).map(|(a, b)| a + 0.5 * b).collect();
            let scaled: Vec<f64> = e.iter().map(|v| v * alpha).collect();
            prop_assert!((si_snr(&scaled, &t).unwrap() - si_snr(&e, &t).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn target_is_best_estimate(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = noise(32, &mut rng);
            let t = noise(32, &mut rng);
            prop_assert!(si_snr(&t, &t).unwrap() + 1e-3 >= si_snr(&e, &t).unwrap());
        }

        #[test]
        fn upit_is_optimal_and_permutation_symmetric(seed in 0u64..500, k in 2usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ests: Vec<_> = (0..k).map(|_| noise(24, &mut rng)).collect();
            let targets: Vec<_> = (0..k).map(|_| noise(24, &mut rng)).collect();
            let pit = upit(&ests, &targets).unwrap();
            for perm in permutations(k) {
                let l = -perm.iter().enumerate().map(|(i, &j)| si_snr(&ests[i], &targets[j]).unwrap()).sum::<f64>() / k as f64;
                prop_assert!(pit.loss <= l + 1e-12);
            }
            let mut rotated = targets.clone();
            rotated.rotate_left(1);
            let pit2 = upit(&ests, &rotated).unwrap();
            prop_assert!((pit.loss - pit2.loss).abs() < 1e-12);
            for i in 0..k {
                prop_assert_eq!((pit2.permutation[i] + 1) % k, pit.permutation[i]);
            }
        }
    }
}
