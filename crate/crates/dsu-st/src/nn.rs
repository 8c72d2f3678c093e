//! Transformer encoder-decoder building blocks and the model roles of the
//! recipe: filterbank-to-DSU, DSU-to-translation, and the finetuning
//! configurations (scratch, ASR pretraining, enc-init, encdec-init,
//! DSU-adapter).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use crate::tokenizer::BOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Fbk2Dsu,
    Dsu2Trl,
    Scratch,
    AsrPt,
    EncInit,
    EncDecInit,
    DsuAdapter,
}

impl Role {
    /// Filterbank input (vs token input on the encoder side).
    pub fn uses_fbk(&self) -> bool {
        !matches!(self, Role::Dsu2Trl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnStyle {
    Pre,
    Post,
}

/// Dense speech features, `t x d` row-major, expected per-channel normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankMatrix {
    pub t: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FilterbankMatrix {
    pub fn new(t: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if t == 0 || data.len() != t * d {
            return Err(Error::Data(format!(
                "filterbank: {t}x{d} does not match {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("filterbank contains non-finite values".into()));
        }
        Ok(Self { t, d, data })
    }

    /// Zero-mean unit-variance normalization per channel.
    pub fn normalize_channels(&mut self) {
        for c in 0..self.d {
            let mut mean = 0.0;
            for r in 0..self.t {
                mean += self.data[r * self.d + c];
            }
            mean /= self.t as f64;
            let mut var = 0.0;
            for r in 0..self.t {
                let v = self.data[r * self.d + c] - mean;
                var += v * v;
            }
            var /= self.t as f64;
            let inv = 1.0 / (var.sqrt() + 1e-8);
            for r in 0..self.t {
                self.data[r * self.d + c] = (self.data[r * self.d + c] - mean) * inv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub role: Role,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub ffn_dim_enc: usize,
    pub ffn_dim_dec: usize,
    pub heads: usize,
    /// Encoder-side vocabulary for token-input roles.
    pub src_vocab: Option<usize>,
    pub tgt_vocab: usize,
    pub layernorm_style: LnStyle,
    pub adapter_layers: usize,
    /// Filterbank feature dimension for fbk-input roles.
    pub feat_dim: usize,
    /// Blank-extended CTC head size; `None` disables the head.
    pub ctc_vocab: Option<usize>,
    /// Share the encoder embedding with the decoder table (joint vocabulary).
    pub shared_embed: bool,
    pub dropout: f64,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        match self.role {
            Role::DsuAdapter if self.adapter_layers != 1 => {
                return fail("role dsu_adapter requires adapter_layers = 1".into())
            }
            Role::EncInit | Role::EncDecInit if self.adapter_layers != 0 => {
                return fail(format!("role {:?} requires adapter_layers = 0", self.role))
            }
            Role::Dsu2Trl if self.layernorm_style != LnStyle::Pre => {
                return fail("role dsu2trl requires pre layer-normalization".into())
            }
            _ => {}
        }
        if self.role.uses_fbk() {
            if self.feat_dim == 0 {
                return fail("fbk-input role needs feat_dim > 0".into());
            }
        } else if self.src_vocab.is_none() && !self.shared_embed {
            return fail("token-input role needs src_vocab or shared_embed".into());
        }
        if self.tgt_vocab == 0 {
            return fail("tgt_vocab must be positive".into());
        }
        Ok(())
    }

    /// Full-scale filterbank-to-token geometry: 12-6 layers, 256/4096 dims.
    pub fn full_scale_fbk2dsu(dsu_vocab: usize, n_units: usize) -> Self {
        Self {
            role: Role::Fbk2Dsu,
            enc_layers: 12,
            dec_layers: 6,
            d_model: 256,
            ffn_dim_enc: 4096,
            ffn_dim_dec: 4096,
            heads: 4,
            src_vocab: None,
            tgt_vocab: dsu_vocab,
            layernorm_style: LnStyle::Pre,
            adapter_layers: 0,
            feat_dim: 80,
            ctc_vocab: Some(n_units + 1),
            shared_embed: false,
            dropout: 0.1,
            max_src_len: 3000,
            max_tgt_len: 1024,
        }
    }

    /// Full-scale DSU-to-translation geometry: 6-6 layers, 256/2048 dims,
    /// pre layer-normalization.
    pub fn full_scale_dsu2trl(src_vocab: usize, tgt_vocab: usize, joint: bool) -> Self {
        Self {
            role: Role::Dsu2Trl,
            enc_layers: 6,
            dec_layers: 6,
            d_model: 256,
            ffn_dim_enc: 2048,
            ffn_dim_dec: 2048,
            heads: 4,
            src_vocab: if joint { None } else { Some(src_vocab) },
            tgt_vocab,
            layernorm_style: LnStyle::Pre,
            adapter_layers: 0,
            feat_dim: 0,
            ctc_vocab: None,
            shared_embed: joint,
            dropout: 0.1,
            max_src_len: 1024,
            max_tgt_len: 1024,
        }
    }

    /// Desk-scale geometry shared by the experiment suite.
    pub fn desk(role: Role, feat_dim: usize, src_vocab: Option<usize>, tgt_vocab: usize, ctc_vocab: Option<usize>) -> Self {
        let adapter_layers = usize::from(role == Role::DsuAdapter);
        Self {
            role,
            enc_layers: if role == Role::Dsu2Trl { 2 } else { 3 },
            dec_layers: 2,
            d_model: 32,
            ffn_dim_enc: if role == Role::Dsu2Trl { 64 } else { 96 },
            ffn_dim_dec: 64,
            heads: 4,
            src_vocab,
            tgt_vocab,
            layernorm_style: LnStyle::Pre,
            adapter_layers,
            feat_dim,
            ctc_vocab,
            shared_embed: false,
            dropout: 0.0,
            max_src_len: 512,
            max_tgt_len: 128,
        }
    }
}

/// Output length of the two stride-2 subsampling convolutions.
pub fn conv_subsample_len(t: usize) -> Result<usize> {
    if t < 4 {
        return Err(Error::Contract(format!(
            "conv subsample needs at least 4 frames, got {t}"
        )));
    }
    Ok(t.div_ceil(2).div_ceil(2))
}

/// Named parameter table. Shapes are fixed by the config; values are the
/// state being trained.
pub type ParamTable = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamTable,
}

/// Parameters leased into a tape for one recorded graph.
pub struct Leased {
    pub vars: BTreeMap<String, Var>,
}

pub enum EncoderInput<'a> {
    Fbk(&'a FilterbankMatrix),
    Tokens(&'a [usize]),
}

pub struct Forward {
    pub dec_logits: Var,
    pub ctc_logits: Option<Var>,
    pub enc_out: Var,
}

fn layer_param_specs(prefix: &str, d: usize, ffn: usize, cross: bool) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    let attn = |v: &mut Vec<(String, Vec<usize>)>, name: &str| {
        for p in ["wq", "wk", "wv", "wo"] {
            v.push((format!("{prefix}.{name}.{p}"), vec![d, d]));
        }
        for p in ["bq", "bk", "bv", "bo"] {
            v.push((format!("{prefix}.{name}.{p}"), vec![d]));
        }
    };
    attn(&mut v, "self");
    v.push((format!("{prefix}.ln1.g"), vec![d]));
    v.push((format!("{prefix}.ln1.b"), vec![d]));
    if cross {
        attn(&mut v, "cross");
        v.push((format!("{prefix}.ln2.g"), vec![d]));
        v.push((format!("{prefix}.ln2.b"), vec![d]));
    }
    v.push((format!("{prefix}.ffn.w1"), vec![d, ffn]));
    v.push((format!("{prefix}.ffn.b1"), vec![ffn]));
    v.push((format!("{prefix}.ffn.w2"), vec![ffn, d]));
    v.push((format!("{prefix}.ffn.b2"), vec![d]));
    let ln_ffn = if cross { "ln3" } else { "ln2" };
    v.push((format!("{prefix}.{ln_ffn}.g"), vec![d]));
    v.push((format!("{prefix}.{ln_ffn}.b"), vec![d]));
    v
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut v = Vec::new();
    if cfg.role.uses_fbk() {
        v.push(("enc.sub.0.w".into(), vec![d, cfg.feat_dim * 3]));
        v.push(("enc.sub.0.b".into(), vec![d]));
        v.push(("enc.sub.1.w".into(), vec![d, d * 3]));
        v.push(("enc.sub.1.b".into(), vec![d]));
    } else if !cfg.shared_embed {
        v.push(("enc.embed".into(), vec![cfg.src_vocab.unwrap(), d]));
    }
    for i in 0..cfg.enc_layers {
        v.extend(layer_param_specs(&format!("enc.{i}"), d, cfg.ffn_dim_enc, false));
    }
    for i in 0..cfg.adapter_layers {
        v.extend(layer_param_specs(&format!("adapter.{i}"), d, cfg.ffn_dim_enc, false));
    }
    if cfg.layernorm_style == LnStyle::Pre {
        v.push(("enc.final_ln.g".into(), vec![d]));
        v.push(("enc.final_ln.b".into(), vec![d]));
        v.push(("dec.final_ln.g".into(), vec![d]));
        v.push(("dec.final_ln.b".into(), vec![d]));
    }
    v.push(("dec.embed".into(), vec![cfg.tgt_vocab, d]));
    for i in 0..cfg.dec_layers {
        v.extend(layer_param_specs(&format!("dec.{i}"), d, cfg.ffn_dim_dec, true));
    }
    v.push(("out_proj.w".into(), vec![d, cfg.tgt_vocab]));
    v.push(("out_proj.b".into(), vec![cfg.tgt_vocab]));
    if let Some(cv) = cfg.ctc_vocab {
        v.push(("ctc_head.w".into(), vec![d, cv]));
        v.push(("ctc_head.b".into(), vec![cv]));
    }
    v
}

/// Fresh init for one named parameter: Glorot-style uniform for projections,
/// `N(0, d_model^-0.5)` for embeddings, identity-shaped layer norms, zero
/// biases.
pub fn init_param(name: &str, shape: &[usize], d_model: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let last = name.rsplit('.').next().unwrap_or("");
    if name.ends_with("embed") {
        let std = (d_model as f64).powf(-0.5);
        // Box-Muller, seeded
        return (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
    }
    match last {
        "g" => vec![1.0; n],
        "b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => vec![0.0; n],
        _ => {
            debug_assert_eq!(shape.len(), 2, "unexpected init for {name}");
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        }
    }
}

/// Builds a model with freshly initialized parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = param_specs(config);
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut params = ParamTable::new();
    for (name, shape) in specs {
        let data = init_param(&name, &shape, config.d_model, &mut rng);
        params.insert(name, (shape, data));
    }
    Ok(Model { config: config.clone(), params })
}

fn sinusoidal_pos(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = (pos as f64 * freq).sin();
            out[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    out
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|(_, d)| d.len()).sum()
    }

    pub fn lease(&self, tape: &mut Tape, requires_grad: bool) -> Leased {
        let mut vars = BTreeMap::new();
        for (name, (shape, data)) in &self.params {
            vars.insert(name.clone(), tape.leaf(shape, data, requires_grad));
        }
        Leased { vars }
    }

    fn p(&self, leased: &Leased, name: &str) -> Var {
        *leased
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn attention(
        &self,
        tape: &mut Tape,
        leased: &Leased,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: Option<&[f64]>,
    ) -> Var {
        let d = self.config.d_model;
        let h = self.config.heads;
        let dh = d / h;
        let wq = self.p(leased, &format!("{prefix}.wq"));
        let wk = self.p(leased, &format!("{prefix}.wk"));
        let wv = self.p(leased, &format!("{prefix}.wv"));
        let wo = self.p(leased, &format!("{prefix}.wo"));
        let bq = self.p(leased, &format!("{prefix}.bq"));
        let bk = self.p(leased, &format!("{prefix}.bk"));
        let bv = self.p(leased, &format!("{prefix}.bv"));
        let bo = self.p(leased, &format!("{prefix}.bo"));
        let q0 = tape.matmul(q_in, wq);
        let q = tape.add_bias(q0, bq);
        let k0 = tape.matmul(kv_in, wk);
        let k = tape.add_bias(k0, bk);
        let v0 = tape.matmul(kv_in, wv);
        let v = tape.add_bias(v0, bv);
        let mask_var = mask.map(|m| {
            let rows = tape.shape(q)[0];
            let cols = tape.shape(k)[0];
            debug_assert_eq!(m.len(), rows * cols);
            tape.leaf(&[rows, cols], m, false)
        });
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = tape.slice_cols(q, i * dh, dh);
            let kh = tape.slice_cols(k, i * dh, dh);
            let vh = tape.slice_cols(v, i * dh, dh);
            let kt = tape.transpose(kh);
            let scores0 = tape.matmul(qh, kt);
            let mut scores = tape.scale(scores0, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask_var {
                scores = tape.add(scores, m);
            }
            let probs = tape.softmax(scores);
            heads.push(tape.matmul(probs, vh));
        }
        let cat = tape.concat_cols(&heads);
        let o = tape.matmul(cat, wo);
        tape.add_bias(o, bo)
    }

    fn maybe_dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(r) if rate > 0.0 => {
                let n = tape.data(x).len();
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..n)
                    .map(|_| if r.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mask_mul(x, mask)
            }
            _ => x,
        }
    }

    fn ln(&self, tape: &mut Tape, leased: &Leased, prefix: &str, x: Var) -> Var {
        let g = self.p(leased, &format!("{prefix}.g"));
        let b = self.p(leased, &format!("{prefix}.b"));
        tape.layer_norm(x, g, b)
    }

    fn ffn(&self, tape: &mut Tape, leased: &Leased, prefix: &str, x: Var) -> Var {
        let w1 = self.p(leased, &format!("{prefix}.w1"));
        let b1 = self.p(leased, &format!("{prefix}.b1"));
        let w2 = self.p(leased, &format!("{prefix}.w2"));
        let b2 = self.p(leased, &format!("{prefix}.b2"));
        let h0 = tape.matmul(x, w1);
        let h1 = tape.add_bias(h0, b1);
        let h2 = tape.relu(h1);
        let o = tape.matmul(h2, w2);
        tape.add_bias(o, b2)
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        leased: &Leased,
        prefix: &str,
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        match self.config.layernorm_style {
            LnStyle::Pre => {
                let n1 = self.ln(tape, leased, &format!("{prefix}.ln1"), x);
                let a = self.attention(tape, leased, &format!("{prefix}.self"), n1, n1, None);
                let a = self.maybe_dropout(tape, a, rng);
                let x = tape.add(x, a);
                let n2 = self.ln(tape, leased, &format!("{prefix}.ln2"), x);
                let f = self.ffn(tape, leased, &format!("{prefix}.ffn"), n2);
                let f = self.maybe_dropout(tape, f, rng);
                tape.add(x, f)
            }
            LnStyle::Post => {
                let a = self.attention(tape, leased, &format!("{prefix}.self"), x, x, None);
                let a = self.maybe_dropout(tape, a, rng);
                let x1 = tape.add(x, a);
                let x1 = self.ln(tape, leased, &format!("{prefix}.ln1"), x1);
                let f = self.ffn(tape, leased, &format!("{prefix}.ffn"), x1);
                let f = self.maybe_dropout(tape, f, rng);
                let x2 = tape.add(x1, f);
                self.ln(tape, leased, &format!("{prefix}.ln2"), x2)
            }
        }
    }

    /// Runs the encoder stack (plus adapter layers) on speech or token input.
    pub fn encode(
        &self,
        tape: &mut Tape,
        leased: &Leased,
        input: &EncoderInput,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let mut x = match input {
            EncoderInput::Fbk(fbk) => {
                if !self.config.role.uses_fbk() {
                    return Err(Error::Contract("model takes token input, got fbk".into()));
                }
                if fbk.d != self.config.feat_dim {
                    return Err(Error::Contract(format!(
                        "feature dim {} != configured {}",
                        fbk.d, self.config.feat_dim
                    )));
                }
                if fbk.t > self.config.max_src_len {
                    return Err(Error::Contract(format!(
                        "source length {} exceeds maximum {}",
                        fbk.t, self.config.max_src_len
                    )));
                }
                conv_subsample_len(fbk.t)?;
                let xin = tape.leaf(&[fbk.t, fbk.d], &fbk.data, false);
                let w0 = self.p(leased, "enc.sub.0.w");
                let b0 = self.p(leased, "enc.sub.0.b");
                let w1 = self.p(leased, "enc.sub.1.w");
                let b1 = self.p(leased, "enc.sub.1.b");
                let c0 = tape.conv1d(xin, w0, b0, 3, 2, 1);
                let r0 = tape.relu(c0);
                let c1 = tape.conv1d(r0, w1, b1, 3, 2, 1);
                tape.relu(c1)
            }
            EncoderInput::Tokens(ids) => {
                if self.config.role.uses_fbk() {
                    return Err(Error::Contract("model takes fbk input, got tokens".into()));
                }
                if ids.is_empty() {
                    return Err(Error::Contract("empty encoder token input".into()));
                }
                if ids.len() > self.config.max_src_len {
                    return Err(Error::Contract(format!(
                        "source length {} exceeds maximum {}",
                        ids.len(),
                        self.config.max_src_len
                    )));
                }
                let table_name = if self.config.shared_embed { "dec.embed" } else { "enc.embed" };
                let vocab = self.params[table_name].0[0];
                if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                    return Err(Error::Contract(format!(
                        "encoder token id {bad} >= vocab {vocab}"
                    )));
                }
                let table = self.p(leased, table_name);
                let e = tape.embed(table, ids);
                tape.scale(e, (d as f64).sqrt())
            }
        };
        let len = tape.shape(x)[0];
        let pos = sinusoidal_pos(len, d);
        let pos_var = tape.leaf(&[len, d], &pos, false);
        x = tape.add(x, pos_var);
        x = self.maybe_dropout(tape, x, &mut dropout_rng);
        for i in 0..self.config.enc_layers {
            x = self.encoder_layer(tape, leased, &format!("enc.{i}"), x, &mut dropout_rng);
        }
        for i in 0..self.config.adapter_layers {
            x = self.encoder_layer(tape, leased, &format!("adapter.{i}"), x, &mut dropout_rng);
        }
        if self.config.layernorm_style == LnStyle::Pre {
            x = self.ln(tape, leased, "enc.final_ln", x);
        }
        Ok(x)
    }

    /// Runs the decoder stack over `dec_tokens` (BOS-leading) attending to
    /// `enc_out`, returning logits `(len x tgt_vocab)`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        leased: &Leased,
        enc_out: Var,
        dec_tokens: &[usize],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        if dec_tokens.first() != Some(&BOS) {
            return Err(Error::Contract("decoder input must begin with BOS".into()));
        }
        if dec_tokens.len() > self.config.max_tgt_len {
            return Err(Error::Contract(format!(
                "target length {} exceeds maximum {}",
                dec_tokens.len(),
                self.config.max_tgt_len
            )));
        }
        if let Some(&bad) = dec_tokens.iter().find(|&&i| i >= self.config.tgt_vocab) {
            return Err(Error::Contract(format!(
                "decoder token id {bad} >= vocab {}",
                self.config.tgt_vocab
            )));
        }
        let table = self.p(leased, "dec.embed");
        let e = tape.embed(table, dec_tokens);
        let mut x = tape.scale(e, (d as f64).sqrt());
        let len = dec_tokens.len();
        let pos = sinusoidal_pos(len, d);
        let pos_var = tape.leaf(&[len, d], &pos, false);
        x = tape.add(x, pos_var);
        x = self.maybe_dropout(tape, x, &mut dropout_rng);
        // causal mask: -inf above the diagonal
        let mut mask = vec![0.0; len * len];
        for r in 0..len {
            for c in r + 1..len {
                mask[r * len + c] = -1e30;
            }
        }
        for i in 0..self.config.dec_layers {
            let prefix = format!("dec.{i}");
            match self.config.layernorm_style {
                LnStyle::Pre => {
                    let n1 = self.ln(tape, leased, &format!("{prefix}.ln1"), x);
                    let a =
                        self.attention(tape, leased, &format!("{prefix}.self"), n1, n1, Some(&mask));
                    let a = self.maybe_dropout(tape, a, &mut dropout_rng);
                    x = tape.add(x, a);
                    let n2 = self.ln(tape, leased, &format!("{prefix}.ln2"), x);
                    let c =
                        self.attention(tape, leased, &format!("{prefix}.cross"), n2, enc_out, None);
                    let c = self.maybe_dropout(tape, c, &mut dropout_rng);
                    x = tape.add(x, c);
                    let n3 = self.ln(tape, leased, &format!("{prefix}.ln3"), x);
                    let f = self.ffn(tape, leased, &format!("{prefix}.ffn"), n3);
                    let f = self.maybe_dropout(tape, f, &mut dropout_rng);
                    x = tape.add(x, f);
                }
                LnStyle::Post => {
                    let a =
                        self.attention(tape, leased, &format!("{prefix}.self"), x, x, Some(&mask));
                    let a = self.maybe_dropout(tape, a, &mut dropout_rng);
                    let x1 = tape.add(x, a);
                    let x1 = self.ln(tape, leased, &format!("{prefix}.ln1"), x1);
                    let c =
                        self.attention(tape, leased, &format!("{prefix}.cross"), x1, enc_out, None);
                    let c = self.maybe_dropout(tape, c, &mut dropout_rng);
                    let x2 = tape.add(x1, c);
                    let x2 = self.ln(tape, leased, &format!("{prefix}.ln2"), x2);
                    let f = self.ffn(tape, leased, &format!("{prefix}.ffn"), x2);
                    let f = self.maybe_dropout(tape, f, &mut dropout_rng);
                    let x3 = tape.add(x2, f);
                    x = self.ln(tape, leased, &format!("{prefix}.ln3"), x3);
                }
            }
        }
        if self.config.layernorm_style == LnStyle::Pre {
            x = self.ln(tape, leased, "dec.final_ln", x);
        }
        let w = self.p(leased, "out_proj.w");
        let b = self.p(leased, "out_proj.b");
        let logits = tape.matmul(x, w);
        Ok(tape.add_bias(logits, b))
    }

    /// Full forward: decoder logits plus CTC logits off the last encoder
    /// layer through a dedicated projection.
    pub fn forward_s2s(
        &self,
        tape: &mut Tape,
        leased: &Leased,
        input: &EncoderInput,
        dec_tokens: &[usize],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let enc_out = self.encode(tape, leased, input, dropout_rng.as_deref_mut())?;
        let dec_logits = self.decode(tape, leased, enc_out, dec_tokens, dropout_rng)?;
        let ctc_logits = if self.config.ctc_vocab.is_some() {
            let w = self.p(leased, "ctc_head.w");
            let b = self.p(leased, "ctc_head.b");
            let l = tape.matmul(enc_out, w);
            Some(tape.add_bias(l, b))
        } else {
            None
        };
        Ok(Forward { dec_logits, ctc_logits, enc_out })
    }
}
