//! End-to-end harness over the synthetic benchmark: discretize speech into
//! units, train the two pretraining models, transplant, finetune, decode,
//! and score. Used by the command-line driver and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{beam_search, DEFAULT_BEAM};
use crate::dsu::{
    kmeans_assign, kmeans_fit, read_feature_file, read_manifest, sample_training_pool,
    KmeansModel, ManifestEntry, PoolGroup,
};
use crate::error::{Error, Result};
use crate::losses::{CtcTarget, LossWeights};
use crate::metrics::{bleu, chrf, full_scale_grouping, report_groups, EvalReport};
use crate::nn::{
    build_model, conv_subsample_len, EncoderInput, FilterbankMatrix, Model, ModelConfig, Role,
};
use crate::pipeline::{
    average_checkpoints, best_checkpoint, train_stage, transplant, Example, Stage, StagePlan,
    TrainReport,
};
use crate::synth::{gen_data, SynthSpec};
use crate::tokenizer::{
    bpe_train, build_vocab, dedup, render_hashtag, BpeModel, BpeMode, VocabMode, VocabSet,
    Vocabulary, EOS, RESERVED,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Speech to discrete-unit tokens (first pretraining stage).
    Fbk2Dsu,
    /// Discrete-unit tokens to translation (second pretraining stage).
    Dsu2Trl,
    /// Speech to transcript (ASR pretraining baseline).
    Asr,
    /// Speech to translation (finetuning and scratch training).
    St,
}

pub struct TokenizerSet {
    pub dsu_bpe: BpeModel,
    pub asr_bpe: BpeModel,
    pub trl_bpe: BpeModel,
    pub dsu_vocab: Vocabulary,
    pub asr_vocab: Vocabulary,
    pub trl_vocab: Vocabulary,
}

/// Everything the recipe stages need, loaded once: manifest, normalized
/// filterbanks, unit strings, tokenizers, and a train/test split.
pub struct Workbench {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub fbk: BTreeMap<String, FilterbankMatrix>,
    pub dsu_text: BTreeMap<String, String>,
    pub toks: TokenizerSet,
    pub kmeans: KmeansModel,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkbenchConfig {
    pub synth: SynthSpec,
    /// Unit inventory size for k-means.
    pub k: usize,
    pub kmeans_iters: usize,
    /// Utterances sampled per resource tier for the k-means pool.
    pub pool_quota: usize,
    pub dsu_vocab_size: usize,
    pub text_vocab_size: usize,
    /// Fraction of utterances held out for scoring.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl WorkbenchConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            synth: SynthSpec::desk(seed),
            k: 8,
            kmeans_iters: 15,
            pool_quota: 40,
            dsu_vocab_size: 8,
            text_vocab_size: 12,
            eval_fraction: 0.25,
            seed,
        }
    }
}

fn tier_groups(entries: &[ManifestEntry], quota: usize) -> Vec<PoolGroup> {
    let grouping = full_scale_grouping();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in entries {
        *counts.entry(e.lang.as_str()).or_default() += 1;
    }
    let mut groups = Vec::new();
    for (name, langs) in &grouping.groups {
        let present: Vec<String> =
            langs.iter().filter(|l| counts.contains_key(l.as_str())).cloned().collect();
        if present.is_empty() {
            continue;
        }
        let total: usize = present.iter().map(|l| counts[l.as_str()]).sum();
        groups.push(PoolGroup { name: name.clone(), langs: present, quota: quota.min(total) });
    }
    groups
}

impl Workbench {
    /// Generates the dataset (if absent), trains k-means, encodes units, and
    /// trains the tokenizers. Artifacts land under `root` and are reused when
    /// already present and readable.
    pub fn build(root: &Path, cfg: &WorkbenchConfig) -> Result<Workbench> {
        let manifest_path = root.join("manifest.tsv");
        if !manifest_path.exists() {
            gen_data(&cfg.synth, root)?;
        }
        let entries = read_manifest(&manifest_path)?;

        let kmeans_path = root.join("kmeans.json");
        let kmeans = if kmeans_path.exists() {
            KmeansModel::load(&kmeans_path)?
        } else {
            let groups = tier_groups(&entries, cfg.pool_quota);
            let (pool, n, d) = sample_training_pool(&entries, &groups, root, cfg.seed)?;
            let k = cfg.k.min(n / 2).max(2);
            let model = kmeans_fit(&pool, n, d, k, n, cfg.kmeans_iters, cfg.seed)?;
            model.save(&kmeans_path)?;
            model
        };

        let mut fbk = BTreeMap::new();
        let mut dsu_text = BTreeMap::new();
        for e in &entries {
            let raw = read_feature_file(&root.join(&e.fbk_path))?;
            let mut f = FilterbankMatrix::new(raw.t, raw.d, raw.data)?;
            f.normalize_channels();
            fbk.insert(e.id.clone(), f);
            let ssl = read_feature_file(&root.join(&e.feat_path))?;
            let units = kmeans_assign(&kmeans, &ssl)?.units;
            dsu_text.insert(e.id.clone(), render_hashtag(&dedup(&units)));
        }

        // train/test split shared by every system under this seed
        let mut ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5147);
        ids.shuffle(&mut rng);
        let n_test = ((ids.len() as f64 * cfg.eval_fraction) as usize).clamp(1, ids.len() - 1);
        let test_ids = ids[..n_test].to_vec();
        let train_ids = ids[n_test..].to_vec();

        let by_id: BTreeMap<&str, &ManifestEntry> =
            entries.iter().map(|e| (e.id.as_str(), e)).collect();
        let train_corpus = |f: &dyn Fn(&ManifestEntry) -> String| -> Vec<String> {
            train_ids.iter().map(|id| f(by_id[id.as_str()])).collect()
        };
        let dsu_corpus: Vec<String> =
            train_ids.iter().map(|id| dsu_text[id].clone()).collect();
        let dsu_bpe = bpe_train(&dsu_corpus, cfg.dsu_vocab_size, BpeMode::Dsu)?;
        let asr_bpe = bpe_train(
            &train_corpus(&|e| e.transcript.clone()),
            cfg.text_vocab_size,
            BpeMode::Text,
        )?;
        let trl_bpe = bpe_train(
            &train_corpus(&|e| e.translation.clone()),
            cfg.text_vocab_size,
            BpeMode::Text,
        )?;
        let dsu_vocab = match build_vocab(Some(&dsu_bpe), &trl_bpe, VocabMode::Separate)? {
            VocabSet::Separate { src, .. } => src,
            _ => unreachable!(),
        };
        let asr_vocab = Vocabulary::from_symbols(asr_bpe.vocab_symbols())?;
        let trl_vocab = Vocabulary::from_symbols(trl_bpe.vocab_symbols())?;

        Ok(Workbench {
            root: root.to_path_buf(),
            entries,
            fbk,
            dsu_text,
            toks: TokenizerSet { dsu_bpe, asr_bpe, trl_bpe, dsu_vocab, asr_vocab, trl_vocab },
            kmeans,
            train_ids,
            test_ids,
        })
    }

    pub fn entry(&self, id: &str) -> &ManifestEntry {
        self.entries.iter().find(|e| e.id == id).expect("unknown utterance id")
    }

    fn target_ids(&self, kind: TaskKind, e: &ManifestEntry) -> Vec<usize> {
        let (bpe, vocab, text): (&BpeModel, &Vocabulary, &str) = match kind {
            TaskKind::Fbk2Dsu => (&self.toks.dsu_bpe, &self.toks.dsu_vocab, &self.dsu_text[&e.id]),
            TaskKind::Asr => (&self.toks.asr_bpe, &self.toks.asr_vocab, &e.transcript),
            TaskKind::Dsu2Trl | TaskKind::St => {
                (&self.toks.trl_bpe, &self.toks.trl_vocab, &e.translation)
            }
        };
        let mut ids = vocab.encode(&bpe.apply(text));
        ids.push(EOS);
        ids
    }

    fn target_vocab(&self, kind: TaskKind) -> &Vocabulary {
        match kind {
            TaskKind::Fbk2Dsu => &self.toks.dsu_vocab,
            TaskKind::Asr => &self.toks.asr_vocab,
            TaskKind::Dsu2Trl | TaskKind::St => &self.toks.trl_vocab,
        }
    }

    /// Assembles training examples for one task. With `with_ctc`, targets are
    /// mirrored into the blank-extended CTC space; utterances too short to
    /// emit their target through the subsampled encoder are dropped.
    pub fn examples(&self, kind: TaskKind, ids: &[String], with_ctc: bool) -> Result<Vec<Example>> {
        let vocab = self.target_vocab(kind);
        let mut out = Vec::new();
        for id in ids {
            let e = self.entry(id);
            let target = self.target_ids(kind, e);
            let (fbk, src_tokens) = match kind {
                TaskKind::Dsu2Trl => {
                    let dsu = self
                        .toks
                        .dsu_vocab
                        .encode(&self.toks.dsu_bpe.apply(&self.dsu_text[id]));
                    (None, Some(dsu))
                }
                _ => (Some(self.fbk[id].clone()), None),
            };
            let ctc_labels = if with_ctc && kind != TaskKind::Dsu2Trl {
                // CTC supervises the content stream; bare word boundary
                // markers would stretch the target past the subsampled
                // frame budget, so only the attention decoder models them.
                let labels: Vec<usize> = target
                    .iter()
                    .take(target.len() - 1) // no EOS in the CTC target
                    .filter(|&&t| vocab.token_of(t) != crate::tokenizer::WORD_MARKER)
                    .filter_map(|&t| vocab.ctc_label_of(t))
                    .collect();
                if labels.is_empty() {
                    None
                } else {
                    let frames = conv_subsample_len(fbk.as_ref().unwrap().t)?;
                    if CtcTarget::new(labels.clone())?.min_frames() > frames {
                        continue; // too short to emit the target
                    }
                    Some(labels)
                }
            } else {
                None
            };
            out.push(Example { id: id.clone(), fbk, src_tokens, ctc_labels, target });
        }
        if out.is_empty() {
            return Err(Error::Data("no usable examples for task".into()));
        }
        Ok(out)
    }

    /// Desk-scale model config for a task; `with_ctc` attaches the auxiliary
    /// head for speech-input tasks.
    pub fn model_config(&self, kind: TaskKind, role: Role, with_ctc: bool) -> ModelConfig {
        let vocab = self.target_vocab(kind);
        let (feat_dim, src_vocab) = match kind {
            TaskKind::Dsu2Trl => (0, Some(self.toks.dsu_vocab.len())),
            _ => (self.fbk.values().next().map_or(0, |f| f.d), None),
        };
        let ctc = (with_ctc && kind != TaskKind::Dsu2Trl).then(|| vocab.ctc_vocab_size());
        ModelConfig::desk(role, feat_dim, src_vocab, vocab.len(), ctc)
    }
}

// ---------------------------------------------------------------------------
// systems

/// The six runnable systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Scratch,
    AsrPt,
    Dsu2Trl,
    EncInit,
    EncDecInit,
    DsuAdapter,
}

impl System {
    pub fn all() -> [System; 6] {
        [
            System::Scratch,
            System::AsrPt,
            System::Dsu2Trl,
            System::EncInit,
            System::EncDecInit,
            System::DsuAdapter,
        ]
    }

    pub fn needs_fbk2dsu_pt(&self) -> bool {
        matches!(self, System::EncInit | System::EncDecInit | System::DsuAdapter)
    }

    pub fn needs_dsu2trl_pt(&self) -> bool {
        matches!(
            self,
            System::Dsu2Trl | System::EncDecInit | System::DsuAdapter
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub pt_steps: usize,
    pub ft_steps: usize,
    pub seed: u64,
    /// Auxiliary CTC in the unit pretraining stage.
    pub ctc_in_pt: bool,
    /// Auxiliary CTC in the speech-translation finetuning stage.
    pub ctc_in_ft: bool,
    pub weights: LossWeights,
    pub beam: usize,
    pub max_decode_len: usize,
    /// Fraction of the training split used for ST finetuning; pretraining
    /// always sees the full split. Models the data-scarce ST condition.
    pub ft_fraction: f64,
    /// Peak learning rate for the ST finetuning stage (all systems). Lower
    /// than the pretraining peak so transplanted weights are not washed out.
    pub ft_peak_lr: f64,
}

impl RecipeConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            pt_steps: 1500,
            ft_steps: 600,
            seed,
            ctc_in_pt: true,
            ctc_in_ft: true,
            // a lighter auxiliary weight suits the finetuning stage at desk
            // scale; the pretraining interpolation keeps its default
            weights: LossWeights { lambda_beta: 0.1, ..LossWeights::default() },
            beam: DEFAULT_BEAM,
            max_decode_len: 24,
            ft_fraction: 1.0,
            ft_peak_lr: 1e-3,
        }
    }
}

fn plan_for(stage: Stage, steps: usize, cfg: &RecipeConfig) -> StagePlan {
    let mut plan = StagePlan::desk(stage, steps, cfg.seed);
    plan.weights = cfg.weights;
    if matches!(stage, Stage::StFt | Stage::StScratch) {
        plan.peak_lr = cfg.ft_peak_lr;
    }
    plan
}

/// Trains the speech-to-units pretraining model.
pub fn pretrain_fbk2dsu(wb: &Workbench, cfg: &RecipeConfig) -> Result<TrainReport> {
    let mc = wb.model_config(TaskKind::Fbk2Dsu, Role::Fbk2Dsu, cfg.ctc_in_pt);
    let model = build_model(&mc, cfg.seed)?;
    let data = wb.examples(TaskKind::Fbk2Dsu, &wb.train_ids, cfg.ctc_in_pt)?;
    train_stage(&plan_for(Stage::Fbk2DsuPt, cfg.pt_steps, cfg), model, &data)
}

/// Trains the units-to-translation pretraining model.
pub fn pretrain_dsu2trl(wb: &Workbench, cfg: &RecipeConfig) -> Result<TrainReport> {
    let mc = wb.model_config(TaskKind::Dsu2Trl, Role::Dsu2Trl, false);
    let model = build_model(&mc, cfg.seed)?;
    let data = wb.examples(TaskKind::Dsu2Trl, &wb.train_ids, false)?;
    train_stage(&plan_for(Stage::Dsu2TrlPt, cfg.pt_steps, cfg), model, &data)
}

/// Trains the ASR pretraining model (speech to transcript).
pub fn pretrain_asr(wb: &Workbench, cfg: &RecipeConfig) -> Result<TrainReport> {
    let mc = wb.model_config(TaskKind::Asr, Role::Fbk2Dsu, cfg.ctc_in_pt);
    let model = build_model(&mc, cfg.seed)?;
    let data = wb.examples(TaskKind::Asr, &wb.train_ids, cfg.ctc_in_pt)?;
    train_stage(&plan_for(Stage::AsrPt, cfg.pt_steps, cfg), model, &data)
}

/// Pretrained sources a system needs before finetuning.
pub struct Pretrained<'a> {
    pub fbk2dsu: Option<&'a TrainReport>,
    pub dsu2trl: Option<&'a TrainReport>,
    pub asr: Option<&'a TrainReport>,
}

/// Builds and finetunes (or trains from scratch) the ST model for a system.
/// `System::Dsu2Trl` has no ST finetuning stage; call `evaluate` on its
/// pretraining model directly.
pub fn finetune_system(
    wb: &Workbench,
    system: System,
    pt: &Pretrained,
    cfg: &RecipeConfig,
) -> Result<TrainReport> {
    let missing = |what: &str| Error::Contract(format!("{system:?} needs a {what} model"));
    let init = match system {
        System::Dsu2Trl => {
            return Err(Error::Contract(
                "dsu2trl is evaluated directly on its pretraining model".into(),
            ))
        }
        System::Scratch => {
            let mc = wb.model_config(TaskKind::St, Role::Scratch, cfg.ctc_in_ft);
            build_model(&mc, cfg.seed)?
        }
        System::AsrPt => {
            let enc = &pt.asr.ok_or_else(|| missing("speech-to-transcript"))?.model;
            let mc = wb.model_config(TaskKind::St, Role::AsrPt, cfg.ctc_in_ft);
            transplant(enc, enc, &mc, cfg.seed)?
        }
        System::EncInit => {
            let enc = &pt.fbk2dsu.ok_or_else(|| missing("speech-to-units"))?.model;
            let mc = wb.model_config(TaskKind::St, Role::EncInit, cfg.ctc_in_ft);
            transplant(enc, enc, &mc, cfg.seed)?
        }
        System::EncDecInit | System::DsuAdapter => {
            let enc = &pt.fbk2dsu.ok_or_else(|| missing("speech-to-units"))?.model;
            let dec_report = pt.dsu2trl.ok_or_else(|| missing("units-to-translation"))?;
            let dec_cfg = dec_report.model.config.clone();
            let best = best_checkpoint(&dec_report.checkpoints)?.clone().into_model(&dec_cfg)?;
            let role = if system == System::DsuAdapter { Role::DsuAdapter } else { Role::EncDecInit };
            let mc = wb.model_config(TaskKind::St, role, cfg.ctc_in_ft);
            transplant(enc, &best, &mc, cfg.seed)?
        }
    };
    let stage = if system == System::Scratch { Stage::StScratch } else { Stage::StFt };
    if !(0.0..=1.0).contains(&cfg.ft_fraction) || cfg.ft_fraction == 0.0 {
        return Err(Error::Contract("ft_fraction must be in (0, 1]".into()));
    }
    let n_ft = ((wb.train_ids.len() as f64 * cfg.ft_fraction).ceil() as usize)
        .clamp(1, wb.train_ids.len());
    let data = wb.examples(TaskKind::St, &wb.train_ids[..n_ft], cfg.ctc_in_ft)?;
    train_stage(&plan_for(stage, cfg.ft_steps, cfg), init, &data)
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreCard {
    pub bleu: f64,
    pub chrf: f64,
    pub per_lang_bleu: BTreeMap<String, f64>,
    pub hypotheses: Vec<(String, String)>,
}

fn detok(vocab: &Vocabulary, ids: &[usize]) -> String {
    let toks: Vec<String> = ids
        .iter()
        .filter(|&&id| id >= RESERVED.len())
        .map(|&id| vocab.token_of(id).to_string())
        .collect();
    BpeModel::detokenize(&toks)
}

/// Checkpoint-averaged model from a training run: the mean of the last
/// (up to) five saved checkpoints, which smooths step-to-step decode
/// variance before scoring.
pub fn averaged_model(report: &TrainReport) -> Result<Model> {
    let n = report.checkpoints.len().min(5).max(1);
    average_checkpoints(&report.checkpoints, n)?.into_model(&report.model.config)
}

/// Decodes the held-out set and scores against the reference translations.
pub fn evaluate(wb: &Workbench, model: &Model, cfg: &RecipeConfig) -> Result<ScoreCard> {
    let vocab = &wb.toks.trl_vocab;
    if model.config.tgt_vocab != vocab.len() {
        return Err(Error::Contract("model does not decode the translation vocabulary".into()));
    }
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut langs = Vec::new();
    for id in &wb.test_ids {
        let e = wb.entry(id);
        let dsu_tokens;
        let input = if model.config.role == Role::Dsu2Trl {
            dsu_tokens = wb.toks.dsu_vocab.encode(&wb.toks.dsu_bpe.apply(&wb.dsu_text[id]));
            EncoderInput::Tokens(&dsu_tokens)
        } else {
            EncoderInput::Fbk(&wb.fbk[id])
        };
        let hyp = beam_search(model, &input, cfg.beam, cfg.max_decode_len)?;
        hyps.push(detok(vocab, &hyp.tokens));
        refs.push(e.translation.clone());
        langs.push(e.lang.clone());
    }
    let mut per_lang_bleu = BTreeMap::new();
    let uniq: std::collections::BTreeSet<&String> = langs.iter().collect();
    for lang in uniq {
        let (h, r): (Vec<String>, Vec<String>) = hyps
            .iter()
            .zip(&refs)
            .zip(&langs)
            .filter(|(_, l)| *l == lang)
            .map(|((h, r), _)| (h.clone(), r.clone()))
            .unzip();
        per_lang_bleu.insert(lang.clone(), bleu(&h, &r)?);
    }
    Ok(ScoreCard {
        bleu: bleu(&hyps, &refs)?,
        chrf: chrf(&hyps, &refs)?,
        per_lang_bleu,
        hypotheses: wb.test_ids.iter().cloned().zip(hyps).collect(),
    })
}

/// Grouped report over the per-language scores of a card.
pub fn grouped_report(metric: &str, card: &ScoreCard) -> Result<EvalReport> {
    report_groups(metric, &card.per_lang_bleu, &full_scale_grouping())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg(seed: u64) -> WorkbenchConfig {
        let mut cfg = WorkbenchConfig::desk(seed);
        cfg.synth.langs = vec![("ca".into(), 12), ("ar".into(), 6)];
        cfg.synth.n_phonemes = 5;
        cfg.k = 8;
        cfg.kmeans_iters = 5;
        cfg.pool_quota = 8;
        cfg.dsu_vocab_size = 24;
        cfg.text_vocab_size = 24;
        cfg
    }

    #[test]
    fn workbench_builds_and_splits_deterministically() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(4);
        let wb = Workbench::build(dir.path(), &cfg).unwrap();
        assert_eq!(wb.train_ids.len() + wb.test_ids.len(), 18);
        assert!(!wb.test_ids.is_empty());
        // artifacts are reused: a second build sees the same split and units
        let wb2 = Workbench::build(dir.path(), &cfg).unwrap();
        assert_eq!(wb.train_ids, wb2.train_ids);
        assert_eq!(wb.dsu_text, wb2.dsu_text);
    }

    #[test]
    fn examples_cover_all_tasks() {
        let dir = tempdir().unwrap();
        let wb = Workbench::build(dir.path(), &tiny_cfg(5)).unwrap();
        let st = wb.examples(TaskKind::St, &wb.train_ids, true).unwrap();
        assert!(st.iter().all(|e| e.fbk.is_some() && e.ctc_labels.is_some()));
        assert!(st.iter().all(|e| e.target.last() == Some(&EOS)));
        let d2t = wb.examples(TaskKind::Dsu2Trl, &wb.train_ids, false).unwrap();
        assert!(d2t.iter().all(|e| e.src_tokens.is_some() && e.ctc_labels.is_none()));
        let f2d = wb.examples(TaskKind::Fbk2Dsu, &wb.train_ids, true).unwrap();
        assert!(f2d.iter().all(|e| e.ctc_labels.as_ref().is_some_and(|l| !l.contains(&0))));
    }

    #[test]
    fn full_recipe_runs_and_scores() {
        let dir = tempdir().unwrap();
        let wb = Workbench::build(dir.path(), &tiny_cfg(6)).unwrap();
        let mut rc = RecipeConfig::desk(6);
        rc.pt_steps = 12;
        rc.ft_steps = 12;
        let f2d = pretrain_fbk2dsu(&wb, &rc).unwrap();
        let d2t = pretrain_dsu2trl(&wb, &rc).unwrap();
        let pt = Pretrained { fbk2dsu: Some(&f2d), dsu2trl: Some(&d2t), asr: None };
        let ft = finetune_system(&wb, System::DsuAdapter, &pt, &rc).unwrap();
        let card = evaluate(&wb, &ft.model, &rc).unwrap();
        assert!((0.0..=100.0).contains(&card.bleu));
        assert_eq!(card.hypotheses.len(), wb.test_ids.len());
        assert!(card.per_lang_bleu.contains_key("ca"));
        // the unit-to-translation model is evaluated directly
        let card2 = evaluate(&wb, &d2t.model, &rc).unwrap();
        assert!((0.0..=100.0).contains(&card2.bleu));
    }
}
