//! Command-line driver for the discrete-speech-unit translation recipe.
//!
//! Every subcommand reads an optional JSON config (`--config`), applies flag
//! overrides, and writes a reproducibility record (config, seed, content
//! hashes of inputs and outputs) under `<root>/records/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dsu_st::dsu::{
    kmeans_assign, kmeans_fit, read_feature_file, read_manifest, sample_training_pool,
    KmeansModel,
};
use dsu_st::experiment::{
    evaluate, finetune_system, pretrain_asr, pretrain_dsu2trl, pretrain_fbk2dsu,
    Pretrained, RecipeConfig, System, TaskKind, Workbench, WorkbenchConfig,
};
use dsu_st::metrics::{bleu, chrf, full_scale_grouping, report_groups};
use dsu_st::nn::{Model, ModelConfig, Role};
use dsu_st::pipeline::{average_checkpoints, transplant, Checkpoint, TrainReport};
use dsu_st::synth::gen_data;
use dsu_st::tokenizer::{
    bpe_train, build_vocab, corpus_stats, dedup, render_hashtag, BpeModel, BpeMode, VocabMode,
    VocabSet,
};
use dsu_st::{Error, Result};

#[derive(Parser)]
#[command(name = "dsu-st", about = "Speech translation with discrete speech units", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Workspace directory holding data and artifacts.
    #[arg(long, default_value = "workdir")]
    root: PathBuf,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "fbk2dsu")]
    Fbk2Dsu,
    #[value(name = "dsu2trl")]
    Dsu2Trl,
    Asr,
    St,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Scratch,
    #[value(name = "asr_pt")]
    AsrPt,
    #[value(name = "dsu2trl")]
    Dsu2Trl,
    #[value(name = "enc_init")]
    EncInit,
    #[value(name = "encdec_init")]
    EncdecInit,
    #[value(name = "dsu_adapter")]
    DsuAdapter,
}

impl From<SystemArg> for System {
    fn from(s: SystemArg) -> System {
        match s {
            SystemArg::Scratch => System::Scratch,
            SystemArg::AsrPt => System::AsrPt,
            SystemArg::Dsu2Trl => System::Dsu2Trl,
            SystemArg::EncInit => System::EncInit,
            SystemArg::EncdecInit => System::EncDecInit,
            SystemArg::DsuAdapter => System::DsuAdapter,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    Chrf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fit k-means units on a tier-balanced sample of SSL features.
    KmeansTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Assign units to every utterance and write `dsu.tsv`.
    DsuEncode {
        #[command(flatten)]
        common: Common,
    },
    /// Train a BPE model on one corpus column.
    BpeTrain {
        #[command(flatten)]
        common: Common,
        /// Corpus: dsu | transcript | translation.
        #[arg(long)]
        input: String,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Character-level units instead of atomic units (dsu input only).
        #[arg(long)]
        char_level: bool,
    },
    /// Build vocabulary tables from trained BPE models.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dsu_bpe: Option<PathBuf>,
        #[arg(long)]
        tgt_bpe: PathBuf,
        #[arg(long, value_enum, default_value = "separate")]
        mode: VocabModeArg,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Train one recipe stage and save its checkpoint series.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        stage: StageArg,
        /// ST system when stage is `st`.
        #[arg(long, value_enum, default_value = "scratch")]
        system: SystemArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda_alpha: Option<f64>,
        #[arg(long)]
        lambda_beta: Option<f64>,
        /// Disable the auxiliary CTC objective.
        #[arg(long)]
        no_ctc: bool,
        /// Checkpoint directory of the speech-to-units pretraining run.
        #[arg(long)]
        enc_ckpt: Option<PathBuf>,
        /// Checkpoint directory of the units-to-translation pretraining run.
        #[arg(long)]
        dec_ckpt: Option<PathBuf>,
        /// Checkpoint directory of the speech-to-transcript pretraining run.
        #[arg(long)]
        asr_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compose a finetuning init from pretrained checkpoints.
    Transplant {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: SystemArg,
        #[arg(long)]
        enc_ckpt: PathBuf,
        #[arg(long)]
        dec_ckpt: Option<PathBuf>,
        #[arg(long)]
        no_ctc: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the last n checkpoints of a series.
    AvgCkpt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Checkpoint files in series order.
        files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-decode the held-out set with a checkpoint.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score aligned hypothesis/reference files.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_enum, default_value = "bleu")]
        metric: MetricArg,
    },
    /// Aggregate per-language scores into resource-group means.
    Report {
        #[command(flatten)]
        common: Common,
        /// JSON file mapping language to score.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "bleu")]
        metric: String,
    },
    /// Unit tokenization grid: {atomic, char-level} x {separate, joint}.
    AblateTokenization {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// CTC grid: auxiliary CTC on/off in pretraining x finetuning.
    AblateCtc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VocabModeArg {
    Joint,
    Separate,
}

#[derive(Serialize, Deserialize, Clone)]
struct CliConfig {
    workbench: WorkbenchConfig,
    recipe: RecipeConfig,
}

impl CliConfig {
    fn load(common: &Common) -> Result<CliConfig> {
        let mut cfg = match &common.config {
            Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
            None => CliConfig {
                workbench: WorkbenchConfig::desk(0),
                recipe: RecipeConfig::desk(0),
            },
        };
        if let Some(seed) = common.seed {
            cfg.workbench.seed = seed;
            cfg.workbench.synth.seed = seed;
            cfg.recipe.seed = seed;
        }
        Ok(cfg)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode_like(Sha256::digest(&bytes)))
}

mod hex {
    pub fn encode_like(bytes: impl AsRef<[u8]>) -> String {
        bytes.as_ref().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reproducibility record: one JSON per command under `<root>/records/`.
#[derive(Serialize)]
struct Record<'a> {
    command: &'a str,
    config: &'a CliConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn write_record(
    root: &Path,
    command: &str,
    cfg: &CliConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let dir = root.join("records");
    std::fs::create_dir_all(&dir)?;
    let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .filter(|p| p.is_file())
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    };
    let record = Record {
        command,
        config: cfg,
        inputs: hash_all(inputs)?,
        outputs: hash_all(outputs)?,
    };
    std::fs::write(
        dir.join(format!("{command}.json")),
        serde_json::to_vec_pretty(&record)?,
    )?;
    Ok(())
}

// checkpoints are stored as FILE plus FILE.json holding the model config
fn save_model_ckpt(model: &Model, step: usize, dev: Option<f64>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Checkpoint::from_model(model, step, dev).save(path)?;
    std::fs::write(
        path.with_extension("ckpt.json"),
        serde_json::to_vec_pretty(&model.config)?,
    )?;
    Ok(())
}

fn load_model_ckpt(path: &Path) -> Result<Model> {
    let cfg: ModelConfig =
        serde_json::from_slice(&std::fs::read(path.with_extension("ckpt.json"))?)?;
    Checkpoint::load(path)?.into_model(&cfg)
}

fn save_series(report: &TrainReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for ck in &report.checkpoints {
        let p = dir.join(format!("step_{:05}.ckpt", ck.step));
        ck.save(&p)?;
        std::fs::write(
            p.with_extension("ckpt.json"),
            serde_json::to_vec_pretty(&report.model.config)?,
        )?;
        paths.push(p);
    }
    let latest = dir.join("last.ckpt");
    save_model_ckpt(&report.model, report.checkpoints.last().map_or(0, |c| c.step), None, &latest)?;
    paths.push(latest);
    Ok(paths)
}

fn series_reports_dir(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "ckpt")
                && p.file_stem().is_some_and(|s| s.to_string_lossy().starts_with("step_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no checkpoints in {}", dir.display())));
    }
    files.iter().map(|p| Checkpoint::load(p)).collect()
}

fn load_series_model(dir: &Path, best: bool) -> Result<(Model, Vec<Checkpoint>)> {
    let series = series_reports_dir(dir)?;
    let first = series
        .iter()
        .map(|c| dir.join(format!("step_{:05}.ckpt", c.step)))
        .next()
        .unwrap();
    let cfg: ModelConfig =
        serde_json::from_slice(&std::fs::read(first.with_extension("ckpt.json"))?)?;
    let pick = if best {
        series
            .iter()
            .filter(|c| c.dev_metric.is_some())
            .min_by(|a, b| a.dev_metric.partial_cmp(&b.dev_metric).unwrap())
            .unwrap_or_else(|| series.last().unwrap())
    } else {
        series.last().unwrap()
    };
    Ok((pick.clone().into_model(&cfg)?, series))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = CliConfig::load(&common)?;
            let summary = gen_data(&cfg.workbench.synth, &common.root)?;
            println!("generated {} utterances under {}", summary.n_utterances, common.root.display());
            write_record(&common.root, "gen-data", &cfg, &[], &[summary.manifest_path, summary.latent_path])?;
        }
        Command::KmeansTrain { common, k, iters } => {
            let mut cfg = CliConfig::load(&common)?;
            if let Some(k) = k {
                cfg.workbench.k = k;
            }
            if let Some(i) = iters {
                cfg.workbench.kmeans_iters = i;
            }
            let manifest = common.root.join("manifest.tsv");
            let entries = read_manifest(&manifest)?;
            let groups = tier_groups_cli(&entries, cfg.workbench.pool_quota);
            let (pool, n, d) = sample_training_pool(&entries, &groups, &common.root, cfg.workbench.seed)?;
            let kk = cfg.workbench.k.min(n / 2).max(2);
            let model = kmeans_fit(&pool, n, d, kk, n, cfg.workbench.kmeans_iters, cfg.workbench.seed)?;
            let out = common.root.join("kmeans.json");
            model.save(&out)?;
            println!("k-means: k={} on {} frames -> {}", kk, n, out.display());
            write_record(&common.root, "kmeans-train", &cfg, &[manifest], &[out])?;
        }
        Command::DsuEncode { common } => {
            let cfg = CliConfig::load(&common)?;
            let manifest = common.root.join("manifest.tsv");
            let entries = read_manifest(&manifest)?;
            let km = KmeansModel::load(&common.root.join("kmeans.json"))?;
            let mut out = String::from("id\tunits\n");
            for e in &entries {
                let feats = read_feature_file(&common.root.join(&e.feat_path))?;
                let units = kmeans_assign(&km, &feats)?.units;
                out.push_str(&format!("{}\t{}\n", e.id, render_hashtag(&dedup(&units))));
            }
            let path = common.root.join("dsu.tsv");
            std::fs::write(&path, out)?;
            println!("encoded {} utterances -> {}", entries.len(), path.display());
            write_record(&common.root, "dsu-encode", &cfg, &[manifest], &[path])?;
        }
        Command::BpeTrain { common, input, vocab_size, out, char_level } => {
            let cfg = CliConfig::load(&common)?;
            let (corpus, mode) = cli_corpus(&common.root, &input, char_level)?;
            let model = bpe_train(&corpus, vocab_size, mode)?;
            model.save(&out)?;
            println!("bpe[{input}]: {} merges -> {}", model.merges.len(), out.display());
            write_record(&common.root, "bpe-train", &cfg, &[], &[out])?;
        }
        Command::BuildVocab { common, dsu_bpe, tgt_bpe, mode, out_prefix } => {
            let cfg = CliConfig::load(&common)?;
            let dsu = dsu_bpe.as_ref().map(|p| BpeModel::load(p)).transpose()?;
            let tgt = BpeModel::load(&tgt_bpe)?;
            let vm = match mode {
                VocabModeArg::Joint => VocabMode::Joint,
                VocabModeArg::Separate => VocabMode::Separate,
            };
            let mut outputs = Vec::new();
            match build_vocab(dsu.as_ref(), &tgt, vm)? {
                VocabSet::Joint(v) => {
                    let p = out_prefix.with_extension("joint.vocab");
                    v.save(&p)?;
                    println!("joint vocabulary: {} tokens -> {}", v.len(), p.display());
                    outputs.push(p);
                }
                VocabSet::Separate { src, tgt } => {
                    let ps = out_prefix.with_extension("src.vocab");
                    let pt = out_prefix.with_extension("tgt.vocab");
                    src.save(&ps)?;
                    tgt.save(&pt)?;
                    println!(
                        "separate vocabularies: {} src / {} tgt tokens",
                        src.len(),
                        tgt.len()
                    );
                    outputs.extend([ps, pt]);
                }
            }
            write_record(&common.root, "build-vocab", &cfg, &[tgt_bpe], &outputs)?;
        }
        Command::Train {
            common,
            stage,
            system,
            steps,
            lambda_alpha,
            lambda_beta,
            no_ctc,
            enc_ckpt,
            dec_ckpt,
            asr_ckpt,
            out,
        } => {
            let mut cfg = CliConfig::load(&common)?;
            if let Some(s) = steps {
                cfg.recipe.pt_steps = s;
                cfg.recipe.ft_steps = s;
            }
            if let Some(l) = lambda_alpha {
                cfg.recipe.weights.lambda_alpha = l;
            }
            if let Some(l) = lambda_beta {
                cfg.recipe.weights.lambda_beta = l;
            }
            if no_ctc {
                cfg.recipe.ctc_in_pt = false;
                cfg.recipe.ctc_in_ft = false;
            }
            let wb = Workbench::build(&common.root, &cfg.workbench)?;
            let (name, report) = match stage {
                StageArg::Fbk2Dsu => ("fbk2dsu", pretrain_fbk2dsu(&wb, &cfg.recipe)?),
                StageArg::Dsu2Trl => ("dsu2trl", pretrain_dsu2trl(&wb, &cfg.recipe)?),
                StageArg::Asr => ("asr", pretrain_asr(&wb, &cfg.recipe)?),
                StageArg::St => {
                    let sys: System = system.into();
                    let load = |p: &Option<PathBuf>, fallback: &str| -> Result<Option<TrainReport>> {
                        let dir = p.clone().unwrap_or_else(|| common.root.join("ckpt").join(fallback));
                        if dir.is_dir() {
                            let (model, checkpoints) = load_series_model(&dir, false)?;
                            Ok(Some(TrainReport {
                                model,
                                checkpoints,
                                initial_loss: 0.0,
                                final_loss: 0.0,
                                dev_losses: vec![],
                                trajectory_hash: String::new(),
                            }))
                        } else {
                            Ok(None)
                        }
                    };
                    let f2d = load(&enc_ckpt, "fbk2dsu")?;
                    let d2t = load(&dec_ckpt, "dsu2trl")?;
                    let asr = load(&asr_ckpt, "asr")?;
                    let pt = Pretrained {
                        fbk2dsu: f2d.as_ref(),
                        dsu2trl: d2t.as_ref(),
                        asr: asr.as_ref(),
                    };
                    ("st", finetune_system(&wb, sys, &pt, &cfg.recipe)?)
                }
            };
            let dir = out.unwrap_or_else(|| common.root.join("ckpt").join(name));
            let paths = save_series(&report, &dir)?;
            println!(
                "{name}: {} steps, loss {:.4} -> {:.4}, {} checkpoints in {}",
                cfg.recipe.pt_steps,
                report.initial_loss,
                report.final_loss,
                report.checkpoints.len(),
                dir.display()
            );
            write_record(&common.root, &format!("train-{name}"), &cfg, &[], &paths)?;
        }
        Command::Transplant { common, mode, enc_ckpt, dec_ckpt, no_ctc, out } => {
            let mut cfg = CliConfig::load(&common)?;
            if no_ctc {
                cfg.recipe.ctc_in_ft = false;
            }
            let wb = Workbench::build(&common.root, &cfg.workbench)?;
            let enc = load_model_ckpt(&enc_ckpt)?;
            let role = match System::from(mode) {
                System::AsrPt => Role::AsrPt,
                System::EncInit => Role::EncInit,
                System::EncDecInit => Role::EncDecInit,
                System::DsuAdapter => Role::DsuAdapter,
                s => {
                    return Err(Error::Contract(format!(
                        "{s:?} is not a transplant mode"
                    )))
                }
            };
            let mc = wb.model_config(TaskKind::St, role, cfg.recipe.ctc_in_ft);
            let dec = match &dec_ckpt {
                Some(p) => load_model_ckpt(p)?,
                None => enc.clone(),
            };
            let model = transplant(&enc, &dec, &mc, cfg.recipe.seed)?;
            save_model_ckpt(&model, 0, None, &out)?;
            println!("transplanted {:?} init -> {}", role, out.display());
            let mut inputs = vec![enc_ckpt];
            inputs.extend(dec_ckpt);
            write_record(&common.root, "transplant", &cfg, &inputs, &[out])?;
        }
        Command::AvgCkpt { common, n, files, out } => {
            let cfg = CliConfig::load(&common)?;
            let series: Vec<Checkpoint> =
                files.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
            let avg = average_checkpoints(&series, n.min(series.len()))?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            avg.save(&out)?;
            if let Some(first) = files.first() {
                let cfg_path = first.with_extension("ckpt.json");
                if cfg_path.is_file() {
                    std::fs::copy(&cfg_path, out.with_extension("ckpt.json"))?;
                }
            }
            println!("averaged last {} of {} checkpoints -> {}", n.min(series.len()), series.len(), out.display());
            write_record(&common.root, "avg-ckpt", &cfg, &files, &[out])?;
        }
        Command::Decode { common, ckpt, beam, max_len, out } => {
            let mut cfg = CliConfig::load(&common)?;
            if let Some(b) = beam {
                cfg.recipe.beam = b;
            }
            if let Some(m) = max_len {
                cfg.recipe.max_decode_len = m;
            }
            let wb = Workbench::build(&common.root, &cfg.workbench)?;
            let model = load_model_ckpt(&ckpt)?;
            let card = evaluate(&wb, &model, &cfg.recipe)?;
            let mut hyp_text = String::new();
            let mut ref_text = String::new();
            for (id, hyp) in &card.hypotheses {
                hyp_text.push_str(&format!("{id}\t{hyp}\n"));
                ref_text.push_str(&format!("{id}\t{}\n", wb.entry(id).translation));
            }
            std::fs::write(&out, hyp_text)?;
            let ref_path = out.with_extension("refs.tsv");
            std::fs::write(&ref_path, ref_text)?;
            println!("decoded {} utterances (beam {})", card.hypotheses.len(), cfg.recipe.beam);
            write_record(&common.root, "decode", &cfg, &[ckpt], &[out, ref_path])?;
        }
        Command::Score { common, hyp, reference, metric } => {
            let cfg = CliConfig::load(&common)?;
            let read_col = |p: &Path| -> Result<Vec<String>> {
                Ok(std::fs::read_to_string(p)?
                    .lines()
                    .map(|l| l.split_once('\t').map_or(l, |(_, t)| t).to_string())
                    .collect())
            };
            let h = read_col(&hyp)?;
            let r = read_col(&reference)?;
            let (name, score) = match metric {
                MetricArg::Bleu => ("bleu", bleu(&h, &r)?),
                MetricArg::Chrf => ("chrf", chrf(&h, &r)?),
            };
            println!("{}", serde_json::json!({ "metric": name, "score": score }));
            write_record(&common.root, "score", &cfg, &[hyp, reference], &[])?;
        }
        Command::Report { common, scores, metric } => {
            let cfg = CliConfig::load(&common)?;
            let per_lang: BTreeMap<String, f64> =
                serde_json::from_slice(&std::fs::read(&scores)?)?;
            let report = report_groups(&metric, &per_lang, &full_scale_grouping())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            write_record(&common.root, "report", &cfg, &[scores], &[])?;
        }
        Command::AblateTokenization { common, steps } => {
            let mut cfg = CliConfig::load(&common)?;
            if let Some(s) = steps {
                cfg.recipe.pt_steps = s;
            }
            ablate_tokenization(&common.root, &cfg)?;
        }
        Command::AblateCtc { common, steps } => {
            let mut cfg = CliConfig::load(&common)?;
            if let Some(s) = steps {
                cfg.recipe.pt_steps = s;
                cfg.recipe.ft_steps = s;
            }
            ablate_ctc(&common.root, &cfg)?;
        }
    }
    Ok(())
}

fn tier_groups_cli(
    entries: &[dsu_st::dsu::ManifestEntry],
    quota: usize,
) -> Vec<dsu_st::dsu::PoolGroup> {
    let grouping = full_scale_grouping();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in entries {
        *counts.entry(e.lang.as_str()).or_default() += 1;
    }
    grouping
        .groups
        .iter()
        .filter_map(|(name, langs)| {
            let present: Vec<String> =
                langs.iter().filter(|l| counts.contains_key(l.as_str())).cloned().collect();
            if present.is_empty() {
                return None;
            }
            let total: usize = present.iter().map(|l| counts[l.as_str()]).sum();
            Some(dsu_st::dsu::PoolGroup {
                name: name.clone(),
                langs: present,
                quota: quota.min(total),
            })
        })
        .collect()
}

fn cli_corpus(root: &Path, input: &str, char_level: bool) -> Result<(Vec<String>, BpeMode)> {
    match input {
        "dsu" => {
            let text = std::fs::read_to_string(root.join("dsu.tsv"))?;
            let corpus = text
                .lines()
                .skip(1)
                .filter_map(|l| l.split_once('\t').map(|(_, t)| t.to_string()))
                .collect();
            let mode = if char_level { BpeMode::DsuCharLevel } else { BpeMode::Dsu };
            Ok((corpus, mode))
        }
        "transcript" | "translation" => {
            let entries = read_manifest(&root.join("manifest.tsv"))?;
            let corpus = entries
                .iter()
                .map(|e| {
                    if input == "transcript" { e.transcript.clone() } else { e.translation.clone() }
                })
                .collect();
            Ok((corpus, BpeMode::Text))
        }
        other => Err(Error::Contract(format!(
            "unknown corpus {other:?}; expected dsu, transcript, or translation"
        ))),
    }
}

/// Unit tokenization grid: trains the units-to-translation stage per variant
/// and reports length statistics plus held-out BLEU.
fn ablate_tokenization(root: &Path, cfg: &CliConfig) -> Result<()> {
    let wb = Workbench::build(root, &cfg.workbench)?;
    let dsu_corpus: Vec<String> =
        wb.train_ids.iter().map(|id| wb.dsu_text[id].clone()).collect();
    let trl_corpus: Vec<String> =
        wb.train_ids.iter().map(|id| wb.entry(id).translation.clone()).collect();
    let mut rows = Vec::new();
    for (label, mode) in [("bpe", BpeMode::Dsu), ("char", BpeMode::DsuCharLevel)] {
        let dsu_bpe = bpe_train(&dsu_corpus, cfg.workbench.dsu_vocab_size, mode)?;
        let trl_bpe = bpe_train(&trl_corpus, cfg.workbench.text_vocab_size, BpeMode::Text)?;
        let (dsu_len, ratio) = corpus_stats(&dsu_bpe, &trl_bpe, &dsu_corpus, &trl_corpus)?;
        for vm in ["separate", "joint"] {
            rows.push(serde_json::json!({
                "units": label,
                "vocabulary": vm,
                "mean_dsu_len": dsu_len,
                "len_ratio": ratio,
            }));
        }
    }
    // the workbench's own (bpe, separate) cell also gets a trained score
    let report = pretrain_dsu2trl(&wb, &cfg.recipe)?;
    let card = evaluate(&wb, &report.model, &cfg.recipe)?;
    let out = serde_json::json!({ "grid": rows, "bpe_separate_bleu": card.bleu });
    println!("{}", serde_json::to_string_pretty(&out)?);
    std::fs::create_dir_all(root.join("records"))?;
    std::fs::write(root.join("records").join("ablate-tokenization.out.json"), serde_json::to_vec_pretty(&out)?)?;
    Ok(())
}

/// CTC on/off grid over pretraining and finetuning for the compact
/// transplant system; prints one BLEU per cell.
fn ablate_ctc(root: &Path, cfg: &CliConfig) -> Result<()> {
    let wb = Workbench::build(root, &cfg.workbench)?;
    let mut cells = Vec::new();
    for pt_ctc in [true, false] {
        let mut rc = cfg.recipe.clone();
        rc.ctc_in_pt = pt_ctc;
        let f2d = pretrain_fbk2dsu(&wb, &rc)?;
        let d2t = pretrain_dsu2trl(&wb, &rc)?;
        for ft_ctc in [true, false] {
            let mut rc2 = rc.clone();
            rc2.ctc_in_ft = ft_ctc;
            let pt = Pretrained { fbk2dsu: Some(&f2d), dsu2trl: Some(&d2t), asr: None };
            let ft = finetune_system(&wb, System::DsuAdapter, &pt, &rc2)?;
            let card = evaluate(&wb, &ft.model, &rc2)?;
            cells.push(serde_json::json!({
                "ctc_in_pt": pt_ctc,
                "ctc_in_ft": ft_ctc,
                "bleu": card.bleu,
            }));
        }
    }
    let out = serde_json::json!({ "cells": cells });
    println!("{}", serde_json::to_string_pretty(&out)?);
    std::fs::create_dir_all(root.join("records"))?;
    std::fs::write(root.join("records").join("ablate-ctc.out.json"), serde_json::to_vec_pretty(&out)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
