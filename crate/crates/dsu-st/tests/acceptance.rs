//! Acceptance suite: one test per shipping criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them on success).
//!
//! The directional experiments (criteria 6 and 7) share one set of seeded
//! training runs through a `OnceLock`, so the suite trains each stage only
//! once per seed no matter which test asks first.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use dsu_st::decode::beam_search;
use dsu_st::dsu::{inertia, kmeans_assign, kmeans_fit, FeatureSequence};
use dsu_st::error::Result;
use dsu_st::experiment::{
    averaged_model, evaluate, finetune_system, pretrain_dsu2trl, pretrain_fbk2dsu, Pretrained,
    RecipeConfig, System, Workbench, WorkbenchConfig,
};
use dsu_st::losses::{loss_finetune, CtcTarget, LossWeights};
use dsu_st::metrics::{bleu, chrf};
use dsu_st::nn::{build_model, EncoderInput, FilterbankMatrix, Model, ModelConfig, Role};
use dsu_st::pipeline::{lr_schedule, transplant, Checkpoint};
use dsu_st::tensor::{finite_diff_check, Tape};
use dsu_st::tokenizer::{bpe_train, dedup, render_hashtag, BpeMode, BOS, EOS, PAD};

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} ({name}): {tag} — {detail}");
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// criterion 1: CTC equals brute-force alignment enumeration

/// Independent CTC oracle: enumerate every frame-level path, collapse repeats,
/// drop blanks, and log-sum the paths that spell the target.
fn ctc_oracle(log_probs: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &p in path {
            if p != prev && p != 0 {
                out.push(p);
            }
            prev = p;
        }
        out
    }
    let mut total = f64::NEG_INFINITY;
    for code in 0..v.pow(t as u32) {
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

fn random_log_dist(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Vec<f64> {
    let mut lps = vec![0.0; t * v];
    for row in 0..t {
        let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = mx + raw.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        for c in 0..v {
            lps[row * v + c] = raw[c] - lz;
        }
    }
    lps
}

fn ctc_value(log_probs: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let lp = tape.leaf(&[t, v], log_probs, false);
    let loss = tape.ctc_nll(lp, target).unwrap();
    tape.value(loss)
}

fn all_targets(v: usize, ylen: usize) -> Vec<Vec<usize>> {
    let symbols: Vec<usize> = (1..v).collect();
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..ylen {
        out = out
            .into_iter()
            .flat_map(|y| {
                symbols.iter().map(move |&s| {
                    let mut z = y.clone();
                    z.push(s);
                    z
                })
            })
            .collect();
    }
    out
}

#[test]
fn criterion_1_ctc_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut cases = 0usize;

    // exhaustive grid: T' <= 6, V <= 4 (including blank), |y| <= 3
    for t in 1..=6usize {
        for v in 2..=4usize {
            let lps = random_log_dist(&mut rng, t, v);
            for ylen in 1..=3usize.min(t) {
                for target in all_targets(v, ylen) {
                    if CtcTarget::new(target.clone()).unwrap().min_frames() > t {
                        continue;
                    }
                    let got = ctc_value(&lps, t, v, &target);
                    let want = ctc_oracle(&lps, t, v, &target);
                    worst = worst.max((got - want).abs());
                    cases += 1;
                }
            }
        }
    }

    // 1,000 random draws over the same envelope
    for _ in 0..1000 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let ylen = rng.gen_range(1..=3.min(t));
        let target: Vec<usize> = (0..ylen).map(|_| rng.gen_range(1..v)).collect();
        if CtcTarget::new(target.clone()).unwrap().min_frames() > t {
            continue;
        }
        let lps = random_log_dist(&mut rng, t, v);
        let got = ctc_value(&lps, t, v, &target);
        let want = ctc_oracle(&lps, t, v, &target);
        worst = worst.max((got - want).abs());
        cases += 1;
    }

    let elapsed = start.elapsed();
    verdict(
        1,
        "ctc oracle equivalence",
        worst <= 1e-9 && elapsed.as_secs() < 30,
        &format!("{cases} cases, worst |diff| = {worst:.2e}, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: gradient checks

fn tiny_model_config() -> ModelConfig {
    let mut c = ModelConfig::desk(Role::Scratch, 5, None, 7, Some(4));
    c.enc_layers = 2;
    c.dec_layers = 2;
    c.d_model = 8;
    c.ffn_dim_enc = 16;
    c.ffn_dim_dec = 16;
    c.heads = 2;
    c
}

/// End-to-end gradient error for one named parameter of the tiny model:
/// substitute a probe leaf for that parameter and finite-difference the
/// interpolated finetuning loss through the whole network.
fn tiny_model_param_err(model: &Model, name: &str, fbk: &FilterbankMatrix) -> f64 {
    let dec_in = [BOS, 4, 5, 6];
    let dec_tgt = [4usize, 5, 6, EOS];
    let ctc_tgt = CtcTarget::new(vec![1, 2, 3]).unwrap();
    let weights = LossWeights::default();
    let (shape, point) = model.params[name].clone();
    finite_diff_check(
        |tape, x| {
            let mut leased = model.lease(tape, false);
            leased.vars.insert(name.to_string(), x);
            let fwd = model
                .forward_s2s(tape, &leased, &EncoderInput::Fbk(fbk), &dec_in, None)
                .unwrap();
            loss_finetune(tape, fwd.dec_logits, &dec_tgt, fwd.ctc_logits.unwrap(), &ctc_tgt, &weights)
                .unwrap()
        },
        &shape,
        &point,
        1e-5,
    )
    .unwrap()
}

#[test]
fn criterion_2_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    // CTC loss gradient on random T'=8, V=5 (4 symbols + blank) instances
    let mut ctc_err = 0.0f64;
    for _ in 0..5 {
        let (t, v) = (8usize, 5usize);
        let target: Vec<usize> = (0..3).map(|_| rng.gen_range(1..v)).collect();
        let point: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = target.clone();
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
        ctc_err = ctc_err.max(err);
    }

    // every differentiable primitive, reduced to a scalar through mean
    let mut prim_err = 0.0f64;
    let point: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let other: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut check = |f: &dyn Fn(&mut Tape, dsu_st::tensor::Var) -> dsu_st::tensor::Var| {
        let err = finite_diff_check(|tape, x| f(tape, x), &[3, 4], &point, 1e-5).unwrap();
        prim_err = prim_err.max(err);
    };
    let o = other.clone();
    check(&move |t, x| {
        let y = t.leaf(&[3, 4], &o, false);
        let z = t.add(x, y);
        t.mean(z)
    });
    let o = other.clone();
    check(&move |t, x| {
        let b = t.leaf(&[4], &o[..4], false);
        let z = t.add_bias(x, b);
        t.mean(z)
    });
    let o = other.clone();
    check(&move |t, x| {
        let y = t.leaf(&[3, 4], &o, false);
        let z = t.mul(x, y);
        t.mean(z)
    });
    check(&|t, x| {
        let z = t.scale(x, -1.7);
        t.mean(z)
    });
    let o = other.clone();
    check(&move |t, x| {
        let y = t.leaf(&[4, 3], &o, false);
        let z = t.matmul(x, y);
        t.mean(z)
    });
    check(&|t, x| {
        let z = t.transpose(x);
        t.mean(z)
    });
    check(&|t, x| {
        let s = t.scale(x, 1.0 + 1e-3); // nudge off the relu kink
        let z = t.relu(s);
        t.mean(z)
    });
    check(&|t, x| {
        let s = t.softmax(x);
        let z = t.mul(s, s);
        t.mean(z)
    });
    check(&|t, x| {
        let z = t.log_softmax(x);
        t.mean(z)
    });
    let o = other.clone();
    check(&move |t, x| {
        let g = t.leaf(&[4], &o[..4], false);
        let b = t.leaf(&[4], &o[4..8], false);
        let z = t.layer_norm(x, g, b);
        t.mean(z)
    });
    let o = other.clone();
    check(&move |t, x| {
        let w = t.leaf(&[1, 12], &o, false);
        let b = t.leaf(&[1], &[0.1], false);
        let z = t.conv1d(x, w, b, 3, 2, 1);
        t.mean(z)
    });
    check(&|t, x| {
        let z = t.embed(x, &[2, 0, 1, 2]);
        t.mean(z)
    });
    check(&|t, x| {
        let lp = t.log_softmax(x);
        let z = t.pick(lp, &[1, 3, 0]);
        t.mean(z)
    });
    check(&|t, x| {
        let z = t.slice_cols(x, 1, 2);
        t.mean(z)
    });
    check(&|t, x| {
        let a = t.slice_cols(x, 0, 2);
        let b = t.slice_cols(x, 2, 2);
        let z = t.concat_cols(&[b, a]);
        t.mean(z)
    });
    check(&|t, x| {
        let z = t.concat_rows(&[x, x]);
        t.mean(z)
    });
    check(&|t, x| t.mean(x));
    check(&|t, x| {
        let z = t.sum(x);
        t.scale(z, 0.25)
    });
    check(&|t, x| {
        let m: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let z = t.mask_mul(x, m);
        t.mean(z)
    });

    // full tiny model end to end, one representative parameter per family
    let model = build_model(&tiny_model_config(), 17).unwrap();
    let mut frng = ChaCha8Rng::seed_from_u64(19);
    let fbk =
        FilterbankMatrix::new(9, 5, (0..45).map(|_| frng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut model_err = 0.0f64;
    for name in [
        "enc.sub.0.w",
        "enc.0.self.wq",
        "enc.1.ffn.w1",
        "enc.0.ln1.g",
        "dec.embed",
        "dec.0.cross.wv",
        "dec.1.self.bo",
        "out_proj.w",
        "ctc_head.w",
    ] {
        model_err = model_err.max(tiny_model_param_err(&model, name, &fbk));
    }

    let elapsed = start.elapsed();
    verdict(
        2,
        "gradient checks",
        ctc_err <= 1e-4 && prim_err <= 1e-6 && model_err <= 1e-3 && elapsed.as_secs() < 120,
        &format!(
            "ctc {ctc_err:.2e} (<=1e-4), primitives {prim_err:.2e} (<=1e-6), \
             tiny model {model_err:.2e} (<=1e-3), {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: k-means invariants

#[test]
fn criterion_3_kmeans_invariants() {
    // full-batch inertia non-increasing on 20 seeded blob datasets
    let mut worst_rise = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, d, k) = (240usize, 4usize, 5usize);
        let centers: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let samples: Vec<f64> = (0..n)
            .flat_map(|i| {
                let c = i % k;
                (0..d)
                    .map(|j| centers[c * d + j] + rng.gen_range(-0.5..0.5))
                    .collect::<Vec<f64>>()
            })
            .collect();
        let mut prev = f64::INFINITY;
        for iters in 1..=10 {
            let m = kmeans_fit(&samples, n, d, k, n, iters, seed).unwrap();
            let cur = inertia(&samples, n, d, &m.centroids, k);
            worst_rise = worst_rise.max(cur - prev);
            prev = cur;
        }
    }

    // assignment equals brute-force nearest centroid on 10,000 random frames
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (n, d, k) = (2000usize, 6usize, 12usize);
    let samples: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let model = kmeans_fit(&samples, n, d, k, 256, 8, 5).unwrap();
    let frames = 10_000usize;
    let data: Vec<f64> = (0..frames * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let feats = FeatureSequence::new("probe", frames, d, data.clone()).unwrap();
    let assigned = kmeans_assign(&model, &feats).unwrap();
    let mut mismatches = 0usize;
    for i in 0..frames {
        let x = &data[i * d..(i + 1) * d];
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..k {
            let dist: f64 =
                x.iter().zip(model.centroid(c)).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        if assigned.units[i] != best.1 {
            mismatches += 1;
        }
    }

    verdict(
        3,
        "k-means invariants",
        worst_rise <= 1e-9 && mismatches == 0,
        &format!(
            "worst inertia rise {worst_rise:.2e} over 20 seeds, \
             {mismatches}/{frames} brute-force assignment mismatches"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: tokenizer examples and properties

#[test]
fn criterion_4_tokenizer() {
    // verbatim unit-sequence examples
    let units = [1usize, 1, 1, 456, 456, 23];
    let deduped = dedup(&units);
    let ex1 = render_hashtag(&deduped) == "#1 #456 #23" && deduped == vec![1, 456, 23];

    // unit-mode BPE concatenates whole unit symbols
    let corpus = vec!["#1 #456 #23".to_string(), "#1 #456 #23".to_string()];
    let model = bpe_train(&corpus, 5, BpeMode::Dsu).unwrap();
    let ex2 = model.apply("#1 #456 #23") == vec!["#1#456#23".to_string()];

    // 1,000 random property cases: dedup idempotence and BPE determinism
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut props_ok = true;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=20);
        let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..6)).collect();
        let once = dedup(&seq);
        if dedup(&once) != once {
            props_ok = false;
            break;
        }
        let n_lines = rng.gen_range(1..=4);
        let corpus: Vec<String> = (0..n_lines)
            .map(|_| {
                let l = rng.gen_range(1..=8);
                let units: Vec<usize> = (0..l).map(|_| rng.gen_range(0..5)).collect();
                render_hashtag(&units)
            })
            .collect();
        let budget = rng.gen_range(5..=12);
        let a = bpe_train(&corpus, budget, BpeMode::Dsu).unwrap();
        let b = bpe_train(&corpus, budget, BpeMode::Dsu).unwrap();
        if a.merges != b.merges || a.apply(&corpus[0]) != b.apply(&corpus[0]) {
            props_ok = false;
            break;
        }
    }

    verdict(
        4,
        "tokenizer examples and properties",
        ex1 && ex2 && props_ok,
        &format!("dedup example {ex1}, concat example {ex2}, 1000 property cases {props_ok}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: transplant forward equivalence

#[test]
fn criterion_5_transplant_equivalence() {
    let d = 32;
    let mut enc_cfg = ModelConfig::desk(Role::Fbk2Dsu, 8, None, 20, Some(17));
    enc_cfg.d_model = d;
    let mut dec_cfg = ModelConfig::desk(Role::Dsu2Trl, 0, Some(20), 30, None);
    dec_cfg.d_model = d;
    let enc_src = build_model(&enc_cfg, 101).unwrap();
    let dec_src = build_model(&dec_cfg, 102).unwrap();

    let mut ft_cfg = ModelConfig::desk(Role::EncDecInit, 8, None, 30, Some(27));
    ft_cfg.d_model = d;
    ft_cfg.enc_layers = enc_cfg.enc_layers;
    ft_cfg.dec_layers = dec_cfg.dec_layers;
    ft_cfg.ffn_dim_enc = enc_cfg.ffn_dim_enc;
    ft_cfg.ffn_dim_dec = dec_cfg.ffn_dim_dec;
    let ft = transplant(&enc_src, &dec_src, &ft_cfg, 103).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let fbk =
        FilterbankMatrix::new(12, 8, (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let dec_tokens = [BOS, 5, 9, 12];

    // transplanted model, one pass
    let mut tape = Tape::new();
    let leased = ft.lease(&mut tape, false);
    let logits = ft
        .forward_s2s(&mut tape, &leased, &EncoderInput::Fbk(&fbk), &dec_tokens, None)
        .unwrap()
        .dec_logits;
    let got = tape.data(logits).to_vec();

    // manual composition: source encoder's encode, source decoder's decode
    let mut tape2 = Tape::new();
    let enc_leased = enc_src.lease(&mut tape2, false);
    let enc_out = enc_src
        .encode(&mut tape2, &enc_leased, &EncoderInput::Fbk(&fbk), None)
        .unwrap();
    let dec_leased = dec_src.lease(&mut tape2, false);
    let composed = dec_src
        .decode(&mut tape2, &dec_leased, enc_out, &dec_tokens, None)
        .unwrap();
    let want = tape2.data(composed).to_vec();

    let bit_exact = got == want;
    verdict(
        5,
        "transplant forward equivalence",
        bit_exact,
        &format!("{} logits compared, bit-exact: {bit_exact}", got.len()),
    );
}

// ---------------------------------------------------------------------------
// criteria 6 and 7: shared directional experiments

struct SeedScores {
    scratch: f64,
    scratch_ft_ctc_off: f64,
    enc_init: f64,
    adapter: f64,
    adapter_pt_ctc_off: f64,
}

struct Directional {
    seeds: Vec<u64>,
    scores: Vec<SeedScores>,
    elapsed_secs: f64,
}

fn eval_averaged(
    wb: &Workbench,
    report: &dsu_st::pipeline::TrainReport,
    cfg: &RecipeConfig,
) -> Result<f64> {
    let model = averaged_model(report)?;
    Ok(evaluate(wb, &model, cfg)?.bleu)
}

fn run_directional() -> Result<Directional> {
    let start = Instant::now();
    let seeds = vec![1u64, 2, 3];
    let mut scores = Vec::new();
    for &seed in &seeds {
        let dir = tempdir().unwrap();
        let wb = Workbench::build(dir.path(), &WorkbenchConfig::desk(seed))?;
        let rc = RecipeConfig::desk(seed);

        let f2d = pretrain_fbk2dsu(&wb, &rc)?;
        let d2t = pretrain_dsu2trl(&wb, &rc)?;
        let mut rc_pt_off = rc.clone();
        rc_pt_off.ctc_in_pt = false;
        let f2d_no_ctc = pretrain_fbk2dsu(&wb, &rc_pt_off)?;

        let pt = Pretrained { fbk2dsu: Some(&f2d), dsu2trl: Some(&d2t), asr: None };
        let pt_off = Pretrained { fbk2dsu: Some(&f2d_no_ctc), dsu2trl: Some(&d2t), asr: None };
        let mut rc_ft_off = rc.clone();
        rc_ft_off.ctc_in_ft = false;

        let scratch = finetune_system(&wb, System::Scratch, &pt, &rc)?;
        let scratch_off = finetune_system(&wb, System::Scratch, &pt, &rc_ft_off)?;
        let enc_init = finetune_system(&wb, System::EncInit, &pt, &rc)?;
        let adapter = finetune_system(&wb, System::DsuAdapter, &pt, &rc)?;
        let adapter_pt_off = finetune_system(&wb, System::DsuAdapter, &pt_off, &rc)?;

        scores.push(SeedScores {
            scratch: eval_averaged(&wb, &scratch, &rc)?,
            scratch_ft_ctc_off: eval_averaged(&wb, &scratch_off, &rc_ft_off)?,
            enc_init: eval_averaged(&wb, &enc_init, &rc)?,
            adapter: eval_averaged(&wb, &adapter, &rc)?,
            adapter_pt_ctc_off: eval_averaged(&wb, &adapter_pt_off, &rc)?,
        });
    }
    Ok(Directional { seeds, scores, elapsed_secs: start.elapsed().as_secs_f64() })
}

fn directional() -> &'static Directional {
    static CELL: OnceLock<Directional> = OnceLock::new();
    CELL.get_or_init(|| run_directional().expect("directional experiments"))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_adapter_beats_scratch() {
    let d = directional();
    let gaps: Vec<f64> = d.scores.iter().map(|s| s.adapter - s.scratch).collect();
    let per_seed_ok = gaps.iter().all(|&g| g >= 2.0);
    let m_scratch = mean(d.scores.iter().map(|s| s.scratch));
    let m_enc = mean(d.scores.iter().map(|s| s.enc_init));
    let m_adapter = mean(d.scores.iter().map(|s| s.adapter));
    let ordering_ok = m_adapter >= m_enc && m_enc >= m_scratch;
    let runtime_ok = d.elapsed_secs < 1200.0;
    verdict(
        6,
        "adapter vs scratch, directional",
        per_seed_ok && ordering_ok && runtime_ok,
        &format!(
            "seeds {:?}: BLEU gaps {:?} (each >= 2.0); means adapter {:.2} >= \
             enc_init {:.2} >= scratch {:.2}; shared runs took {:.0}s (< 1200)",
            d.seeds,
            gaps.iter().map(|g| (g * 100.0).round() / 100.0).collect::<Vec<_>>(),
            m_adapter,
            m_enc,
            m_scratch,
            d.elapsed_secs,
        ),
    );
}

#[test]
fn criterion_7_ctc_helps_both_stages() {
    let d = directional();
    // FT toggle on the scratch system: trained entirely in the FT stage, so
    // the comparison isolates the finetuning CTC term.
    let ft_on = mean(d.scores.iter().map(|s| s.scratch));
    let ft_off = mean(d.scores.iter().map(|s| s.scratch_ft_ctc_off));
    // PT toggle on the adapter: only the pretraining CTC term differs.
    let pt_on = mean(d.scores.iter().map(|s| s.adapter));
    let pt_off = mean(d.scores.iter().map(|s| s.adapter_pt_ctc_off));
    let ft_ok = ft_on >= ft_off;
    let pt_ok = pt_on >= pt_off - 0.1;
    verdict(
        7,
        "ctc helps on either stage",
        ft_ok && pt_ok,
        &format!(
            "FT toggle {ft_on:.2} >= {ft_off:.2}; PT toggle {pt_on:.2} >= {pt_off:.2} - 0.1"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: decoding equivalences

fn greedy(model: &Model, input: &EncoderInput, max_len: usize) -> (Vec<usize>, f64) {
    let vocab = model.config.tgt_vocab;
    let mut tape = Tape::new();
    let leased = model.lease(&mut tape, false);
    let enc_out = model.encode(&mut tape, &leased, input, None).unwrap();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let mut dec_in = vec![BOS];
        dec_in.extend(&tokens);
        let logits = model.decode(&mut tape, &leased, enc_out, &dec_in, None).unwrap();
        let lp = tape.log_softmax(logits);
        let data = tape.data(lp);
        let row = &data[(dec_in.len() - 1) * vocab..dec_in.len() * vocab];
        let (id, logp) = (0..vocab)
            .filter(|&id| id != PAD && id != BOS)
            .map(|id| (id, row[id]))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        tokens.push(id);
        log_prob += logp;
        if id == EOS {
            break;
        }
    }
    (tokens, log_prob)
}

fn seq_log_prob(model: &Model, input: &EncoderInput, seq: &[usize]) -> f64 {
    let vocab = model.config.tgt_vocab;
    let mut tape = Tape::new();
    let leased = model.lease(&mut tape, false);
    let enc_out = model.encode(&mut tape, &leased, input, None).unwrap();
    let mut dec_in = vec![BOS];
    dec_in.extend(&seq[..seq.len() - 1]);
    let logits = model.decode(&mut tape, &leased, enc_out, &dec_in, None).unwrap();
    let lp = tape.log_softmax(logits);
    let data = tape.data(lp);
    (0..seq.len()).map(|i| data[i * vocab + seq[i]]).sum()
}

#[test]
fn criterion_8_decoding_equivalences() {
    // beam = 1 equals greedy on 100 utterances
    let mut cfg = ModelConfig::desk(Role::Scratch, 6, None, 11, None);
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.d_model = 16;
    cfg.ffn_dim_enc = 32;
    cfg.ffn_dim_dec = 32;
    let model = build_model(&cfg, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut greedy_matches = 0usize;
    for _ in 0..100 {
        let t = rng.gen_range(8..=20);
        let fbk = FilterbankMatrix::new(
            t,
            6,
            (0..t * 6).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        let input = EncoderInput::Fbk(&fbk);
        let b = beam_search(&model, &input, 1, 12).unwrap();
        let (g_tokens, g_lp) = greedy(&model, &input, 12);
        if b.tokens == g_tokens && (b.log_prob - g_lp).abs() < 1e-12 {
            greedy_matches += 1;
        }
    }

    // beam = 5 equals exhaustive search on the 2-token-vocab toy model
    let mut toy_cfg = ModelConfig::desk(Role::Scratch, 4, None, 6, None);
    toy_cfg.enc_layers = 1;
    toy_cfg.dec_layers = 1;
    toy_cfg.d_model = 8;
    toy_cfg.ffn_dim_enc = 16;
    toy_cfg.ffn_dim_dec = 16;
    toy_cfg.heads = 2;
    let toy = build_model(&toy_cfg, 33).unwrap();
    let mut frng = ChaCha8Rng::seed_from_u64(34);
    let fbk =
        FilterbankMatrix::new(8, 4, (0..32).map(|_| frng.gen_range(-1.0..1.0)).collect()).unwrap();
    let input = EncoderInput::Fbk(&fbk);
    let max_len = 3;
    let cands: Vec<usize> = (0..6).filter(|&id| id != PAD && id != BOS).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack: Vec<Vec<usize>> = cands.iter().map(|&c| vec![c]).collect();
    while let Some(seq) = stack.pop() {
        let done = *seq.last().unwrap() == EOS;
        if done {
            let score = seq_log_prob(&toy, &input, &seq);
            if best.as_ref().map_or(true, |(_, s)| score > *s) {
                best = Some((seq.clone(), score));
            }
        } else if seq.len() < max_len {
            for &c in &cands {
                let mut next = seq.clone();
                next.push(c);
                stack.push(next);
            }
        }
    }
    let (oracle_seq, oracle_score) = best.expect("some finished sequence");
    let hyp = beam_search(&toy, &input, 5, max_len).unwrap();
    let exhaustive_ok =
        hyp.finished && hyp.tokens == oracle_seq && (hyp.log_prob - oracle_score).abs() <= 1e-9;

    verdict(
        8,
        "decoding equivalences",
        greedy_matches == 100 && exhaustive_ok,
        &format!(
            "beam=1 == greedy on {greedy_matches}/100 utterances; \
             beam=5 == exhaustive on toy model: {exhaustive_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 9: metric and schedule fixtures

#[test]
fn criterion_9_metric_fixtures() {
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    let ident = s(&["the quick brown fox", "jumps over the lazy dog today"]);
    let bleu_ident = bleu(&ident, &ident).unwrap();
    let chrf_ident = chrf(&ident, &ident).unwrap();

    // two-sentence fixture, hand-computed:
    // clipped n-gram precisions p1=8/9, p2=5/7, p3=4/5, p4=3/3; BP=1
    let hyp = s(&["the cat sat on the mat", "a small dog"]);
    let refs = s(&["the cat sat on the mat", "a big dog"]);
    let bleu_expect = 100.0 * (8.0 / 9.0 * 5.0 / 7.0 * 4.0 / 5.0f64).powf(0.25);
    let bleu_got = bleu(&hyp, &refs).unwrap();

    // chrF on a 7/7-char pair sharing the 6-char prefix: per order n the
    // precision, recall and F are all (7-n)/(8-n)
    let chrf_expect = 100.0
        * (6.0 / 7.0 + 5.0 / 6.0 + 4.0 / 5.0 + 3.0 / 4.0 + 2.0 / 3.0 + 1.0 / 2.0)
        / 6.0;
    let chrf_got = chrf(&s(&["abcdefg"]), &s(&["abcdefh"])).unwrap();

    let warmup = 4000usize;
    let peak = 5e-4;
    let lr_at_warmup = lr_schedule(warmup, warmup, peak);
    let lr_at_4x = lr_schedule(4 * warmup, warmup, peak);

    let pass = (bleu_ident - 100.0).abs() < 1e-9
        && (chrf_ident - 100.0).abs() < 1e-9
        && (bleu_got - bleu_expect).abs() <= 1e-6
        && (chrf_got - chrf_expect).abs() <= 1e-6
        && lr_at_warmup == peak
        && lr_at_4x == peak / 2.0;
    verdict(
        9,
        "metric and schedule fixtures",
        pass,
        &format!(
            "bleu identity {bleu_ident:.6}, fixture {bleu_got:.6} vs {bleu_expect:.6}; \
             chrf identity {chrf_ident:.6}, fixture {chrf_got:.6} vs {chrf_expect:.6}; \
             lr(warmup)={lr_at_warmup:e}, lr(4*warmup)={lr_at_4x:e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 10: end-to-end determinism

fn end_to_end_once(seed: u64) -> Result<(String, String, String)> {
    let dir = tempdir().unwrap();
    let mut wc = WorkbenchConfig::desk(seed);
    wc.synth.langs = vec![("ca".into(), 60), ("fa".into(), 20), ("ar".into(), 8)];
    let wb = Workbench::build(dir.path(), &wc)?;
    let mut rc = RecipeConfig::desk(seed);
    rc.pt_steps = 40;
    rc.ft_steps = 40;
    let f2d = pretrain_fbk2dsu(&wb, &rc)?;
    let d2t = pretrain_dsu2trl(&wb, &rc)?;
    let pt = Pretrained { fbk2dsu: Some(&f2d), dsu2trl: Some(&d2t), asr: None };
    let ft = finetune_system(&wb, System::DsuAdapter, &pt, &rc)?;
    let ckpt_hash = Checkpoint::from_model(&ft.model, rc.ft_steps, None).params_hash();
    let card = evaluate(&wb, &averaged_model(&ft)?, &rc)?;
    let report = serde_json::to_string(&card).expect("serializable score card");
    Ok((ckpt_hash, ft.trajectory_hash.clone(), report))
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let a = end_to_end_once(21).unwrap();
    let b = end_to_end_once(21).unwrap();
    let pass = a == b;
    verdict(
        10,
        "end-to-end determinism",
        pass,
        &format!(
            "checkpoint hash {}…, trajectory hash {}…, score reports identical: {pass}",
            &a.0[..12],
            &a.1[..12]
        ),
    );
}
