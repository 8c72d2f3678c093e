//! Training objectives: label-smoothed MLE, CTC, and their interpolations.
//!
//! Both pretraining stages and finetuning share the same two ingredients.
//! The filterbank-to-DSU stage interpolates MLE over the DSU sequence with
//! CTC over the blank-extended unit inventory; finetuning does the same with
//! translation targets; the DSU-to-translation stage is MLE only.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Interpolation weights and label smoothing. Defaults follow the recipe:
/// both lambdas 0.3, smoothing 0.1.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub label_smoothing_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_alpha: 0.3,
            lambda_beta: 0.3,
            label_smoothing_eps: 0.1,
        }
    }
}

/// Label sequence for CTC. Blank is always id 0 and never appears in
/// `labels`; real tokens start at 1.
#[derive(Debug, Clone)]
pub struct CtcTarget {
    pub labels: Vec<usize>,
}

impl CtcTarget {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("ctc target must be non-empty".into()));
        }
        if labels.contains(&0) {
            return Err(Error::Contract("ctc target contains blank id 0".into()));
        }
        Ok(Self { labels })
    }

    /// Minimum number of frames that can emit this target: length plus one
    /// forced blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        self.labels.len() + self.labels.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Mean over positions of `(1-eps) * NLL(target) + eps * mean-over-classes NLL`.
///
/// `logits` is `(len x vocab)`; `targets` must not contain padding.
pub fn label_smoothed_nll(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    eps: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Contract(format!("label smoothing eps {eps} not in [0,1)")));
    }
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Contract(format!(
            "label_smoothed_nll: logits {shape:?} vs {} targets",
            targets.len()
        )));
    }
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, targets);
    let nll = tape.mean(picked);
    let t1 = tape.scale(nll, -(1.0 - eps));
    let smooth = tape.mean(lp);
    let t2 = tape.scale(smooth, -eps);
    Ok(tape.add(t1, t2))
}

/// CTC negative log-likelihood of `target` given per-frame log-probabilities
/// over the blank-extended vocabulary (blank = 0). The forward algorithm runs
/// in log space; targets that need more frames than available are a defined
/// error, not `-inf`.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &CtcTarget) -> Result<Var> {
    tape.ctc_nll(log_probs, &target.labels)
}

fn interpolate(tape: &mut Tape, mle: Var, ctc: Var, lambda: f64) -> Var {
    let a = tape.scale(mle, 1.0 - lambda);
    let b = tape.scale(ctc, lambda);
    tape.add(a, b)
}

/// Filterbank-to-DSU objective: `(1-lambda_alpha) * MLE + lambda_alpha * CTC`.
///
/// `ctc_logits` must cover the unit inventory plus blank (`n_units + 1`
/// classes); they are raw logits and are log-softmaxed here.
pub fn loss_fbk2dsu(
    tape: &mut Tape,
    dec_logits: Var,
    dec_targets: &[usize],
    ctc_logits: Var,
    ctc_target: &CtcTarget,
    n_units: usize,
    weights: &LossWeights,
) -> Result<Var> {
    let ctc_vocab = tape.shape(ctc_logits)[1];
    if ctc_vocab != n_units + 1 {
        return Err(Error::Contract(format!(
            "ctc vocabulary {ctc_vocab} != units+blank {}",
            n_units + 1
        )));
    }
    let mle = label_smoothed_nll(tape, dec_logits, dec_targets, weights.label_smoothing_eps)?;
    let lp = tape.log_softmax(ctc_logits);
    let ctc = ctc_loss(tape, lp, ctc_target)?;
    Ok(interpolate(tape, mle, ctc, weights.lambda_alpha))
}

/// Finetuning objective: as [`loss_fbk2dsu`] with translation targets and CTC
/// labels over the blank-extended target vocabulary, weighted by
/// `lambda_beta`.
pub fn loss_finetune(
    tape: &mut Tape,
    dec_logits: Var,
    dec_targets: &[usize],
    ctc_logits: Var,
    ctc_target: &CtcTarget,
    weights: &LossWeights,
) -> Result<Var> {
    let mle = label_smoothed_nll(tape, dec_logits, dec_targets, weights.label_smoothing_eps)?;
    let lp = tape.log_softmax(ctc_logits);
    let ctc = ctc_loss(tape, lp, ctc_target)?;
    Ok(interpolate(tape, mle, ctc, weights.lambda_beta))
}

/// DSU-to-translation objective: label-smoothed MLE only.
pub fn loss_dsu2trl(
    tape: &mut Tape,
    dec_logits: Var,
    dec_targets: &[usize],
    eps: f64,
) -> Result<Var> {
    label_smoothed_nll(tape, dec_logits, dec_targets, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive CTC oracle: enumerate every alignment path, collapse
    /// repeats then drop blanks, and sum the probabilities of paths that
    /// produce the target. Independent of the forward-backward code.
    fn ctc_brute_force(log_probs: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
        fn collapse(path: &[usize]) -> Vec<usize> {
            let mut out = Vec::new();
            let mut prev = usize::MAX;
            for &p in path {
                if p != prev {
                    if p != 0 {
                        out.push(p);
                    }
                    prev = p;
                }
            }
            out
        }
        let mut total = f64::NEG_INFINITY;
        let n_paths = v.pow(t as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            let mut lp = 0.0;
            for tt in 0..t {
                let sym = c % v;
                c /= v;
                path.push(sym);
                lp += log_probs[tt * v + sym];
            }
            if collapse(&path) == target {
                total = if total == f64::NEG_INFINITY {
                    lp
                } else {
                    let (a, b) = if total > lp { (total, lp) } else { (lp, total) };
                    a + (b - a).exp().ln_1p()
                };
            }
        }
        -total
    }

    fn uniform_log_probs(t: usize, v: usize) -> Vec<f64> {
        vec![-(v as f64).ln(); t * v]
    }

    #[test]
    fn uniform_logits_loss_is_ln_v() {
        for eps in [0.0, 0.1, 0.5] {
            let mut tape = Tape::new();
            let logits = tape.leaf(&[2, 7], &vec![0.25; 14], false);
            let loss = label_smoothed_nll(&mut tape, logits, &[3, 6], eps).unwrap();
            assert!((tape.value(loss) - (7.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_eps_equals_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets = [1usize, 3, 0];
        let mut tape = Tape::new();
        let lv = tape.leaf(&[3, 4], &logits, false);
        let loss = label_smoothed_nll(&mut tape, lv, &targets, 0.0).unwrap();
        // plain cross-entropy by direct arithmetic
        let mut ce = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &logits[r * 4..(r + 1) * 4];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            ce += lz - row[y];
        }
        ce /= 3.0;
        assert!((tape.value(loss) - ce).abs() < 1e-12);
    }

    #[test]
    fn smoothed_loss_matches_hand_formula() {
        // V=3, logits (2,0,0), target 0, eps=0.1.
        let mut tape = Tape::new();
        let lv = tape.leaf(&[1, 3], &[2.0, 0.0, 0.0], false);
        let loss = label_smoothed_nll(&mut tape, lv, &[0], 0.1).unwrap();
        let lz = (2.0f64.exp() + 2.0).ln();
        let nll = [lz - 2.0, lz, lz];
        let expect = 0.9 * nll[0] + 0.1 * (nll[0] + nll[1] + nll[2]) / 3.0;
        assert!((tape.value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn eps_one_is_rejected() {
        let mut tape = Tape::new();
        let lv = tape.leaf(&[1, 3], &[0.0; 3], false);
        assert!(label_smoothed_nll(&mut tape, lv, &[0], 1.0).is_err());
    }

    #[test]
    fn ctc_single_frame_single_symbol() {
        // One symbol plus blank, uniform: only path "a", p = 0.5.
        let mut tape = Tape::new();
        let lp = tape.leaf(&[1, 2], &uniform_log_probs(1, 2), false);
        let target = CtcTarget::new(vec![1]).unwrap();
        let loss = ctc_loss(&mut tape, lp, &target).unwrap();
        assert!((tape.value(loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_three_paths() {
        // target "a" over {blank, a}, uniform: (a,a),(a,-),(-,a); p = 0.75.
        let mut tape = Tape::new();
        let lp = tape.leaf(&[2, 2], &uniform_log_probs(2, 2), false);
        let target = CtcTarget::new(vec![1]).unwrap();
        let loss = ctc_loss(&mut tape, lp, &target).unwrap();
        assert!((tape.value(loss) + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(2..=4); // includes blank
            let ylen = rng.gen_range(1..=3.min(t));
            let target: Vec<usize> = (0..ylen).map(|_| rng.gen_range(1..v)).collect();
            let tgt = CtcTarget::new(target.clone()).unwrap();
            if t < tgt.min_frames() {
                continue;
            }
            // random log-distributions per frame
            let mut lps = vec![0.0; t * v];
            for row in 0..t {
                let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lz = mx + raw.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                for c in 0..v {
                    lps[row * v + c] = raw[c] - lz;
                }
            }
            let mut tape = Tape::new();
            let lp = tape.leaf(&[t, v], &lps, false);
            let loss = ctc_loss(&mut tape, lp, &tgt).unwrap();
            let oracle = ctc_brute_force(&lps, t, v, &target);
            assert!(
                (tape.value(loss) - oracle).abs() <= 1e-9,
                "t={t} v={v} y={target:?}: {} vs {}",
                tape.value(loss),
                oracle
            );
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (t, v, ylen) = (8usize, 6usize, 3usize); // 5 symbols + blank
            let target: Vec<usize> = (0..ylen).map(|_| rng.gen_range(1..v)).collect();
            let labels = target.clone();
            let point: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let err = finite_diff_check(
                |tape, x| {
                    let lp = tape.log_softmax(x);
                    tape.ctc_nll(lp, &labels).unwrap()
                },
                &[t, v],
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "ctc grad err {err} for y={target:?}");
        }
    }

    #[test]
    fn ctc_is_permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t, v) = (5usize, 4usize);
        let mut lps = vec![0.0; t * v];
        for row in 0..t {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = mx + raw.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for c in 0..v {
                lps[row * v + c] = raw[c] - lz;
            }
        }
        let target = vec![1usize, 3, 2];
        // swap symbols 1 <-> 2 consistently
        let perm = [0usize, 2, 1, 3];
        let mut lps_p = lps.clone();
        for row in 0..t {
            for c in 0..v {
                lps_p[row * v + perm[c]] = lps[row * v + c];
            }
        }
        let target_p: Vec<usize> = target.iter().map(|&c| perm[c]).collect();
        let mut t1 = Tape::new();
        let a = t1.leaf(&[t, v], &lps, false);
        let l1 = ctc_loss(&mut t1, a, &CtcTarget::new(target).unwrap()).unwrap();
        let mut t2 = Tape::new();
        let b = t2.leaf(&[t, v], &lps_p, false);
        let l2 = ctc_loss(&mut t2, b, &CtcTarget::new(target_p).unwrap()).unwrap();
        assert!((t1.value(l1) - t2.value(l2)).abs() < 1e-12);
    }

    #[test]
    fn ctc_adjacent_repeat_needs_extra_frame() {
        let target = CtcTarget::new(vec![1, 1]).unwrap();
        assert_eq!(target.min_frames(), 3);
        let mut tape = Tape::new();
        let lp = tape.leaf(&[2, 3], &uniform_log_probs(2, 3), false);
        match ctc_loss(&mut tape, lp, &target) {
            Err(Error::CtcTargetTooLong { frames: 2, required: 3 }) => {}
            other => panic!("expected CtcTargetTooLong, got {other:?}"),
        }
    }

    #[test]
    fn interpolation_endpoints_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let dec: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ctc: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |alpha: f64| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let dv = tape.leaf(&[3, 4], &dec, false);
            let cv = tape.leaf(&[5, 2], &ctc, false);
            let w = LossWeights { lambda_alpha: alpha, ..Default::default() };
            let total = loss_fbk2dsu(
                &mut tape,
                dv,
                &[1, 2, 0],
                cv,
                &CtcTarget::new(vec![1]).unwrap(),
                1,
                &w,
            )
            .unwrap();
            let mle = label_smoothed_nll(&mut tape, dv, &[1, 2, 0], w.label_smoothing_eps).unwrap();
            let lp = tape.log_softmax(cv);
            let c = ctc_loss(&mut tape, lp, &CtcTarget::new(vec![1]).unwrap()).unwrap();
            (tape.value(total), tape.value(mle), tape.value(c))
        };
        let (t0, mle, ctcv) = run(0.0);
        assert!((t0 - mle).abs() < 1e-12);
        let (t1, _, _) = run(1.0);
        assert!((t1 - ctcv).abs() < 1e-12);
        let (t3, _, _) = run(0.3);
        assert!((t3 - (0.7 * mle + 0.3 * ctcv)).abs() < 1e-12);
        // 0.7 * 2.0 + 0.3 * 5.0 = 2.9 shape of the interpolation
        assert!((0.7 * 2.0 + 0.3 * 5.0 - 2.9f64).abs() < 1e-15);
    }

    #[test]
    fn fbk2dsu_rejects_vocab_mismatch() {
        let mut tape = Tape::new();
        let dv = tape.leaf(&[1, 4], &[0.0; 4], false);
        let cv = tape.leaf(&[3, 5], &[0.0; 15], false);
        let r = loss_fbk2dsu(
            &mut tape,
            dv,
            &[0],
            cv,
            &CtcTarget::new(vec![1]).unwrap(),
            3, // head says 5 classes but 3 units needs 4
            &LossWeights::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn finetune_gradient_is_interpolation_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let dec: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets = [1usize, 3];
        let grad_of = |lambda: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let dv = tape.leaf(&[2, 4], &dec, true);
            let cv = tape.leaf(&[4, 4], &uniform_log_probs(4, 4), false);
            let w = LossWeights { lambda_beta: lambda, ..Default::default() };
            let l = loss_finetune(&mut tape, dv, &targets, cv, &CtcTarget::new(vec![2]).unwrap(), &w)
                .unwrap();
            tape.backward(l).unwrap();
            tape.grad(dv).to_vec()
        };
        let g0 = grad_of(0.0);
        let g1 = grad_of(1.0);
        let g3 = grad_of(0.3);
        for i in 0..g0.len() {
            let expect = 0.7 * g0[i] + 0.3 * g1[i];
            assert!((g3[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dsu2trl_equals_label_smoothed_nll() {
        let mut tape = Tape::new();
        let dv = tape.leaf(&[2, 5], &[0.1; 10], false);
        let a = loss_dsu2trl(&mut tape, dv, &[0, 4], 0.1).unwrap();
        let b = label_smoothed_nll(&mut tape, dv, &[0, 4], 0.1).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!((tape.value(a) - 5.0f64.ln()).abs() < 1e-12);
    }
}
