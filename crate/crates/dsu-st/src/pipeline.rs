//! The three-stage training recipe: data filtering, SpecAugment, the
//! inverse-square-root schedule, Adam, checkpointing, encoder/decoder
//! transplant, and checkpoint averaging.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{label_smoothed_nll, loss_finetune, CtcTarget, LossWeights};
use crate::nn::{
    build_model, init_param, EncoderInput, FilterbankMatrix, Model, ModelConfig, Role,
};
use crate::tensor::{Tape, Var};
use crate::tokenizer::BOS;

// ---------------------------------------------------------------------------
// data filtering

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterLimits {
    pub max_frames: usize,
    pub max_ssl_frames: usize,
    pub max_tokens: usize,
}

impl FilterLimits {
    /// Full-scale limits: 3K filterbank frames, 320K SSL frames, 1,024 tokens.
    pub fn full_scale() -> Self {
        Self { max_frames: 3000, max_ssl_frames: 320_000, max_tokens: 1024 }
    }

    pub fn desk_scale() -> Self {
        Self { max_frames: 256, max_ssl_frames: 256, max_tokens: 128 }
    }
}

/// Drops items whose `(fbk_frames, ssl_frames, tokens)` exceed any limit.
pub fn filter_dataset<T, F>(items: Vec<T>, limits: &FilterLimits, measure: F) -> Result<Vec<T>>
where
    F: Fn(&T) -> (usize, usize, usize),
{
    if limits.max_frames == 0 || limits.max_ssl_frames == 0 || limits.max_tokens == 0 {
        return Err(Error::Contract("filter limits must be positive".into()));
    }
    let kept: Vec<T> = items
        .into_iter()
        .filter(|it| {
            let (f, s, t) = measure(it);
            f <= limits.max_frames && s <= limits.max_ssl_frames && t <= limits.max_tokens
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Data("filtering removed every utterance".into()));
    }
    Ok(kept)
}

// ---------------------------------------------------------------------------
// SpecAugment

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpecAugmentParams {
    pub f: usize,
    pub t: usize,
    pub m_f: usize,
    pub m_t: usize,
}

impl Default for SpecAugmentParams {
    fn default() -> Self {
        Self { f: 30, t: 40, m_f: 2, m_t: 2 }
    }
}

/// Zeroes `m_f` frequency bands of width `~U[0,F]` and `m_t` time spans of
/// width `~U[0,T]`; widths are clipped to the input size.
pub fn spec_augment(fbk: &mut FilterbankMatrix, p: &SpecAugmentParams, rng: &mut ChaCha8Rng) {
    for _ in 0..p.m_f {
        let w = rng.gen_range(0..=p.f.min(fbk.d));
        let start = rng.gen_range(0..=fbk.d - w);
        for r in 0..fbk.t {
            for c in start..start + w {
                fbk.data[r * fbk.d + c] = 0.0;
            }
        }
    }
    for _ in 0..p.m_t {
        let w = rng.gen_range(0..=p.t.min(fbk.t));
        let start = rng.gen_range(0..=fbk.t - w);
        for r in start..start + w {
            for c in 0..fbk.d {
                fbk.data[r * fbk.d + c] = 0.0;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// optimization

/// Inverse-square-root schedule: `peak * min(step/warmup, sqrt(warmup/step))`.
pub fn lr_schedule(step: usize, warmup: usize, peak: f64) -> f64 {
    assert!(step >= 1 && warmup >= 1, "lr_schedule needs step, warmup >= 1");
    let s = step as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(grad_clip: Option<f64>) -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, grad_clip, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.t += 1;
        let scale = match self.grad_clip {
            Some(c) => {
                let norm: f64 = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = &mut model.params.get_mut(name).expect("unknown parameter").1;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const CKPT_MAGIC: &[u8; 4] = b"DSUC";
const CKPT_VERSION: u32 = 1;

/// SHA-256 of the serialized model config; guards checkpoint loading.
pub fn config_fingerprint(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub step: usize,
    pub dev_metric: Option<f64>,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: usize, dev_metric: Option<f64>) -> Self {
        Self {
            fingerprint: config_fingerprint(&model.config),
            step,
            dev_metric,
            params: model.params.clone(),
        }
    }

    /// Restores a model, refusing configs that do not match the fingerprint
    /// and shapes that disagree with the stored table.
    pub fn into_model(self, config: &ModelConfig) -> Result<Model> {
        let expect = config_fingerprint(config);
        if expect != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: hex(&expect),
                got: hex(&self.fingerprint),
            });
        }
        let reference = build_model(config, 0)?;
        for (name, (shape, _)) in &reference.params {
            match self.params.get(name) {
                Some((got, _)) if got == shape => {}
                Some((got, _)) => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        got: got.clone(),
                    })
                }
                None => {
                    return Err(Error::Format {
                        path: "<checkpoint>".into(),
                        reason: format!("missing parameter {name}"),
                    })
                }
            }
        }
        Ok(Model { config: config.clone(), params: self.params })
    }

    /// Hex SHA-256 over all parameter bytes, in name order.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, (shape, data)) in &self.params {
            h.update(name.as_bytes());
            for s in shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&self.fingerprint)?;
        w.write_all(&(self.step as u64).to_le_bytes())?;
        match self.dev_metric {
            Some(d) => {
                w.write_all(&[1])?;
                w.write_all(&d.to_le_bytes())?;
            }
            None => w.write_all(&[0, 0, 0, 0, 0, 0, 0, 0, 0])?,
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, (shape, data)) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for s in shape {
                w.write_all(&(*s as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        if &buf4 != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        r.read_exact(&mut buf4)?;
        if u32::from_le_bytes(buf4) != CKPT_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint)?;
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let step = u64::from_le_bytes(buf8) as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        r.read_exact(&mut buf8)?;
        let dev_metric = (flag[0] == 1).then(|| f64::from_le_bytes(buf8));
        r.read_exact(&mut buf4)?;
        let n_params = u32::from_le_bytes(buf4) as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            r.read_exact(&mut buf4)?;
            let mut name = vec![0u8; u32::from_le_bytes(buf4) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
            r.read_exact(&mut buf4)?;
            let rank = u32::from_le_bytes(buf4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut buf4)?;
                shape.push(u32::from_le_bytes(buf4) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf8)?;
                data.push(f64::from_le_bytes(buf8));
            }
            if params.insert(name, (shape, data)).is_some() {
                return Err(bad("duplicate parameter"));
            }
        }
        Ok(Self { fingerprint, step, dev_metric, params })
    }
}

/// Elementwise mean of the last `n` checkpoints of a series.
pub fn average_checkpoints(series: &[Checkpoint], n: usize) -> Result<Checkpoint> {
    if n == 0 || series.len() < n {
        return Err(Error::Contract(format!(
            "need at least {n} checkpoints, got {}",
            series.len()
        )));
    }
    let tail = &series[series.len() - n..];
    let first = &tail[0];
    let mut out = first.clone();
    for ck in &tail[1..] {
        if ck.fingerprint != first.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: hex(&first.fingerprint),
                got: hex(&ck.fingerprint),
            });
        }
        for (name, (shape, data)) in &ck.params {
            let (eshape, acc) = out.params.get_mut(name).ok_or_else(|| Error::Contract(
                format!("checkpoint series disagrees on parameter {name}"),
            ))?;
            if eshape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: eshape.clone(),
                    got: shape.clone(),
                });
            }
            for (a, b) in acc.iter_mut().zip(data) {
                *a += b;
            }
        }
    }
    for (_, data) in out.params.values_mut() {
        for v in data {
            *v /= n as f64;
        }
    }
    out.step = tail.last().unwrap().step;
    out.dev_metric = None;
    Ok(out)
}

// ---------------------------------------------------------------------------
// transplant

/// Builds a finetuning model initialized from pretrained sources.
///
/// All modes copy the full encoder frontend and stack from `enc_src`.
/// `encdec_init` and `dsu_adapter` additionally copy the decoder, its
/// embedding, and the output projection from `dec_src`; `dsu_adapter` keeps
/// one freshly initialized adapter layer on top of the copied encoder. The
/// CTC head is always fresh. Every parameter stays trainable.
pub fn transplant(
    enc_src: &Model,
    dec_src: &Model,
    ft_config: &ModelConfig,
    seed: u64,
) -> Result<Model> {
    if !matches!(
        ft_config.role,
        Role::AsrPt | Role::EncInit | Role::EncDecInit | Role::DsuAdapter
    ) {
        return Err(Error::Config(format!(
            "transplant target role must be an init mode, got {:?}",
            ft_config.role
        )));
    }
    if enc_src.config.d_model != ft_config.d_model || dec_src.config.d_model != ft_config.d_model {
        return Err(Error::Config("transplant requires equal d_model on all sides".into()));
    }
    if enc_src.config.layernorm_style != ft_config.layernorm_style
        || dec_src.config.layernorm_style != ft_config.layernorm_style
    {
        return Err(Error::Config("transplant requires one layer-norm style throughout".into()));
    }
    let mut model = build_model(ft_config, seed)?;
    let copy = |model: &mut Model, src: &Model, name: &str| -> Result<()> {
        let (sshape, sdata) = src.params.get(name).ok_or_else(|| Error::Contract(
            format!("source model lacks parameter {name}"),
        ))?;
        let (dshape, ddata) = model.params.get_mut(name).unwrap();
        if sshape != dshape {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: dshape.clone(),
                got: sshape.clone(),
            });
        }
        ddata.copy_from_slice(sdata);
        Ok(())
    };
    let names: Vec<String> = model.params.keys().cloned().collect();
    for name in names {
        if name.starts_with("enc.") {
            copy(&mut model, enc_src, &name)?;
        } else if matches!(ft_config.role, Role::EncDecInit | Role::DsuAdapter)
            && (name.starts_with("dec.") || name.starts_with("out_proj."))
        {
            copy(&mut model, dec_src, &name)?;
        }
        // adapter.* and ctc_head.* keep their fresh init
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fbk2DsuPt,
    Dsu2TrlPt,
    AsrPt,
    StFt,
    StScratch,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageBudget {
    pub batch_budget: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub max_steps: usize,
}

/// Full-scale budgets, `{effective batch size, warm-up, peak lr, max steps}`.
pub const FULL_FBK2TOKEN_BUDGET: StageBudget =
    StageBudget { batch_budget: 32_000, warmup: 25_000, peak_lr: 2e-3, max_steps: 60_000 };
pub const FULL_DSU2TRL_BUDGET: StageBudget =
    StageBudget { batch_budget: 80_000, warmup: 10_000, peak_lr: 5e-4, max_steps: 50_000 };
/// Recorded for completeness; this baseline needs external SSL weights and is
/// not trainable here.
pub const FULL_HU_TRANSFORMER_BUDGET: StageBudget =
    StageBudget { batch_budget: 4_000_000, warmup: 4_000, peak_lr: 1e-4, max_steps: 300_000 };

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    /// Source frames (fbk stages) or source tokens (token stages) per batch.
    pub batch_budget: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub max_steps: usize,
    pub weights: LossWeights,
    pub specaugment: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub dev_fraction: f64,
    pub grad_clip: Option<f64>,
}

impl StagePlan {
    pub fn desk(stage: Stage, max_steps: usize, seed: u64) -> Self {
        Self {
            stage,
            batch_budget: 400,
            warmup: max_steps / 10 + 1,
            peak_lr: 3e-3,
            max_steps,
            weights: LossWeights::default(),
            specaugment: false,
            seed,
            checkpoint_every: (max_steps / 6).max(1),
            dev_fraction: 0.05,
            grad_clip: Some(5.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_budget == 0 || self.max_steps == 0 {
            return Err(Error::Contract("stage budgets must be positive".into()));
        }
        if self.warmup == 0 || self.warmup >= self.max_steps {
            return Err(Error::Contract(format!(
                "warmup {} must be in [1, max_steps {})",
                self.warmup, self.max_steps
            )));
        }
        if !(0.0..0.5).contains(&self.dev_fraction) {
            return Err(Error::Contract("dev fraction must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// One training utterance: speech or token source, decoder target ending in
/// EOS, optional CTC labels in the blank-extended id space.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub fbk: Option<FilterbankMatrix>,
    pub src_tokens: Option<Vec<usize>>,
    pub ctc_labels: Option<Vec<usize>>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn src_len(&self) -> usize {
        match (&self.fbk, &self.src_tokens) {
            (Some(f), _) => f.t,
            (_, Some(t)) => t.len(),
            _ => 0,
        }
    }
}

pub struct TrainReport {
    pub model: Model,
    pub checkpoints: Vec<Checkpoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub dev_losses: Vec<(usize, f64)>,
    /// SHA-256 folded over the parameter table after every step.
    pub trajectory_hash: String,
}

fn stage_matches_role(stage: Stage, role: Role) -> bool {
    match stage {
        Stage::Fbk2DsuPt | Stage::AsrPt => role == Role::Fbk2Dsu,
        Stage::Dsu2TrlPt => role == Role::Dsu2Trl,
        Stage::StFt => matches!(role, Role::AsrPt | Role::EncInit | Role::EncDecInit | Role::DsuAdapter),
        Stage::StScratch => role == Role::Scratch,
    }
}

fn example_loss(
    tape: &mut Tape,
    model: &Model,
    leased: &crate::nn::Leased,
    ex: &Example,
    weights: &LossWeights,
    pt_lambda: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let input = match (&ex.fbk, &ex.src_tokens) {
        (Some(f), _) => EncoderInput::Fbk(f),
        (_, Some(t)) => EncoderInput::Tokens(t),
        _ => return Err(Error::Contract(format!("example {} has no source", ex.id))),
    };
    if ex.target.is_empty() {
        return Err(Error::Contract(format!("example {} has empty target", ex.id)));
    }
    let mut dec_in = vec![BOS];
    dec_in.extend(&ex.target[..ex.target.len() - 1]);
    let fwd = model.forward_s2s(tape, leased, &input, &dec_in, dropout_rng)?;
    match (fwd.ctc_logits, &ex.ctc_labels) {
        (Some(ctc_logits), Some(labels)) => {
            let target = CtcTarget::new(labels.clone())?;
            let mut w = weights.clone();
            if pt_lambda {
                // the finetune helper interpolates with lambda_beta
                w.lambda_beta = w.lambda_alpha;
            }
            loss_finetune(tape, fwd.dec_logits, &ex.target, ctc_logits, &target, &w)
        }
        _ => label_smoothed_nll(tape, fwd.dec_logits, &ex.target, weights.label_smoothing_eps),
    }
}

/// Mean eval-mode loss over a held-out set.
pub fn dev_loss(model: &Model, dev: &[Example], weights: &LossWeights, pt_lambda: bool) -> Result<f64> {
    let mut total = 0.0;
    for ex in dev {
        let mut tape = Tape::new();
        let leased = model.lease(&mut tape, false);
        let l = example_loss(&mut tape, model, &leased, ex, weights, pt_lambda, None)?;
        total += tape.data(l)[0];
    }
    Ok(total / dev.len() as f64)
}

fn pack_batches(order: &[usize], lens: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut cur_len = 0;
    for &i in order {
        if !cur.is_empty() && cur_len + lens[i] > budget {
            batches.push(std::mem::take(&mut cur));
            cur_len = 0;
        }
        cur_len += lens[i];
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Runs one training stage and returns the checkpoint series.
///
/// Deterministic given `(plan, model, data)`: the dev split, batch packing,
/// SpecAugment masks, and dropout all derive from `plan.seed`.
pub fn train_stage(plan: &StagePlan, mut model: Model, data: &[Example]) -> Result<TrainReport> {
    plan.validate()?;
    if !stage_matches_role(plan.stage, model.config.role) {
        return Err(Error::Contract(format!(
            "stage {:?} does not train a {:?} model",
            plan.stage, model.config.role
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let pt_lambda = matches!(plan.stage, Stage::Fbk2DsuPt | Stage::AsrPt);

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut ids: Vec<usize> = (0..data.len()).collect();
    ids.shuffle(&mut rng);
    let n_dev = if plan.dev_fraction > 0.0 && data.len() >= 2 {
        ((data.len() as f64 * plan.dev_fraction) as usize).max(1)
    } else {
        0
    };
    let dev: Vec<Example> = ids[..n_dev].iter().map(|&i| data[i].clone()).collect();
    let mut train_ids: Vec<usize> = ids[n_dev..].to_vec();
    if train_ids.is_empty() {
        return Err(Error::Data("dev split consumed all examples".into()));
    }
    // sort by source length so batches pack similar lengths together
    train_ids.sort_by_key(|&i| (data[i].src_len(), i));
    let lens: Vec<usize> = data.iter().map(Example::src_len).collect();

    let mut opt = Adam::new(plan.grad_clip);
    let mut traj = Sha256::new();
    let mut checkpoints = Vec::new();
    let mut dev_losses = Vec::new();
    let mut initial_loss = f64::NAN;
    #[allow(unused_assignments)]
    let mut final_loss = f64::NAN;

    let mut step = 0;
    'outer: loop {
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let batches = pack_batches(&order, &lens, plan.batch_budget);
        for batch in batches {
            step += 1;
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (step as u64).rotate_left(17));
            let mut tape = Tape::new();
            let leased = model.lease(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in &batch {
                let ex = if plan.specaugment && data[i].fbk.is_some() {
                    let mut ex = data[i].clone();
                    spec_augment(ex.fbk.as_mut().unwrap(), &SpecAugmentParams::default(), &mut rng);
                    ex
                } else {
                    data[i].clone()
                };
                let l = example_loss(&mut tape, &model, &leased, &ex, &plan.weights, pt_lambda, Some(&mut dropout_rng))?;
                losses.push(l);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l);
            }
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: batch.iter().map(|&i| data[i].id.clone()).collect(),
                });
            }
            if step == 1 {
                initial_loss = loss_val;
            }
            final_loss = loss_val;
            tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, &var) in &leased.vars {
                grads.insert(name.clone(), tape.grad(var).to_vec());
            }
            opt.step(&mut model, &grads, lr_schedule(step, plan.warmup, plan.peak_lr));
            for (name, (_, p)) in &model.params {
                traj.update(name.as_bytes());
                for v in p {
                    traj.update(v.to_le_bytes());
                }
            }
            if step % plan.checkpoint_every == 0 || step == plan.max_steps {
                let dm = if dev.is_empty() {
                    None
                } else {
                    Some(dev_loss(&model, &dev, &plan.weights, pt_lambda)?)
                };
                if let Some(d) = dm {
                    dev_losses.push((step, d));
                }
                checkpoints.push(Checkpoint::from_model(&model, step, dm));
            }
            if step == plan.max_steps {
                break 'outer;
            }
        }
    }

    Ok(TrainReport {
        model,
        checkpoints,
        initial_loss,
        final_loss,
        dev_losses,
        trajectory_hash: hex(&traj.finalize()),
    })
}

/// Last checkpoint of a series (pretraining encoder source).
pub fn last_checkpoint(series: &[Checkpoint]) -> Result<&Checkpoint> {
    series.last().ok_or_else(|| Error::Contract("empty checkpoint series".into()))
}

/// Checkpoint with the lowest recorded dev loss, falling back to the last.
pub fn best_checkpoint(series: &[Checkpoint]) -> Result<&Checkpoint> {
    series
        .iter()
        .filter(|c| c.dev_metric.is_some())
        .min_by(|a, b| a.dev_metric.partial_cmp(&b.dev_metric).unwrap())
        .map_or_else(|| last_checkpoint(series), Ok)
}

/// Replaces the CTC head with a fresh seeded init (used when re-targeting a
/// pretrained model before finetuning).
pub fn reset_ctc_head(model: &mut Model, seed: u64) {
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["ctc_head.b", "ctc_head.w"] {
        if let Some((shape, data)) = model.params.get_mut(name) {
            *data = init_param(name, shape, d, &mut rng);
        }
    }
}
