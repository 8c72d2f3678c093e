//! Tokenization of text and DSU sequences.
//!
//! DSU sequences are first collapsed (consecutive repeats merged) and
//! rendered as hashtag strings, e.g. `#1 #456 #23`. BPE can then be applied;
//! in DSU mode the whitespace between units is ignored and each `#n` unit is
//! an atomic base symbol, so `#1 #456 #23` becomes `#1#456#23` before
//! merging. Text mode works on characters with an explicit word-boundary
//! marker so detokenization is exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word-boundary marker used by text-mode BPE.
pub const WORD_MARKER: &str = "\u{2581}";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Collapses maximal runs of equal units to a single occurrence.
pub fn dedup(units: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(units.len());
    for &u in units {
        if out.last() != Some(&u) {
            out.push(u);
        }
    }
    out
}

/// Space-joined `#<index>` rendering.
pub fn render_hashtag(units: &[usize]) -> String {
    units
        .iter()
        .map(|u| format!("#{u}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpeMode {
    /// Character-level over words, with a word-boundary marker.
    Text,
    /// Atomic `#n` units; whitespace between units ignored.
    Dsu,
    /// Character-level over the whitespace-stripped hashtag string. This
    /// reproduces splits inside a unit like `#45 6#2 3`.
    DsuCharLevel,
}

impl BpeMode {
    fn tag(&self) -> &'static str {
        match self {
            BpeMode::Text => "text",
            BpeMode::Dsu => "dsu",
            BpeMode::DsuCharLevel => "dsu_char",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "text" => Some(BpeMode::Text),
            "dsu" => Some(BpeMode::Dsu),
            "dsu_char" => Some(BpeMode::DsuCharLevel),
            _ => None,
        }
    }
}

/// Ordered merge table plus the base symbol inventory it was trained over.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    pub mode: BpeMode,
    /// (left, right, merged), in training order.
    pub merges: Vec<(String, String, String)>,
    /// Sorted distinct base symbols seen in the training corpus.
    pub base_symbols: Vec<String>,
}

/// Splits one line into base symbols for the given mode.
pub fn base_symbols_of(line: &str, mode: BpeMode) -> Vec<String> {
    match mode {
        BpeMode::Text => {
            let mut out = Vec::new();
            for word in line.split_whitespace() {
                out.push(WORD_MARKER.to_string());
                for ch in word.chars() {
                    out.push(ch.to_string());
                }
            }
            out
        }
        BpeMode::Dsu => line.split_whitespace().map(|s| s.to_string()).collect(),
        BpeMode::DsuCharLevel => line
            .split_whitespace()
            .collect::<String>()
            .chars()
            .map(|c| c.to_string())
            .collect(),
    }
}

/// Trains greedy pair-merge BPE.
///
/// The most frequent adjacent pair is merged repeatedly until the vocabulary
/// (base inventory plus merged symbols) reaches `target_vocab_size` or no
/// pair occurs twice. Frequency ties break on the lexicographically smallest
/// merged string.
pub fn bpe_train(corpus: &[String], target_vocab_size: usize, mode: BpeMode) -> Result<BpeModel> {
    if corpus.is_empty() || corpus.iter().all(|l| l.trim().is_empty()) {
        return Err(Error::Data("bpe: empty training corpus".into()));
    }
    let mut seqs: Vec<Vec<String>> = corpus
        .iter()
        .map(|l| base_symbols_of(l, mode))
        .filter(|s| !s.is_empty())
        .collect();
    let mut inventory: std::collections::BTreeSet<String> =
        seqs.iter().flatten().cloned().collect();
    if target_vocab_size < inventory.len() {
        return Err(Error::Contract(format!(
            "bpe: target vocab {target_vocab_size} below base inventory {}",
            inventory.len()
        )));
    }

    let mut merges = Vec::new();
    while inventory.len() < target_vocab_size {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ma = format!("{}{}", pa.0, pa.1);
                    let mb = format!("{}{}", pb.0, pb.1);
                    mb.cmp(&ma) // reversed: smaller string wins under max
                })
            })
            .map(|(p, _)| p.clone());
        let Some((left, right)) = best else { break };
        let merged = format!("{left}{right}");
        for s in seqs.iter_mut() {
            apply_one_merge(s, &left, &right, &merged);
        }
        inventory.insert(merged.clone());
        merges.push((left, right, merged));
    }

    let base_symbols = corpus
        .iter()
        .flat_map(|l| base_symbols_of(l, mode))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(BpeModel { mode, merges, base_symbols })
}

fn apply_one_merge(seq: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < seq.len() {
        if seq[i] == left && seq[i + 1] == right {
            seq[i] = merged.to_string();
            seq.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

impl BpeModel {
    /// Segments `input` by replaying the merge list in training order.
    pub fn apply(&self, input: &str) -> Vec<String> {
        let mut seq = base_symbols_of(input, self.mode);
        for (l, r, m) in &self.merges {
            apply_one_merge(&mut seq, l, r, m);
        }
        seq
    }

    /// Inverse of [`apply`](Self::apply) for in-inventory symbols.
    pub fn detokenize(tokens: &[String]) -> String {
        let joined: String = tokens.concat();
        joined
            .split(WORD_MARKER)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Full vocabulary: base inventory then merged symbols in merge order.
    pub fn vocab_symbols(&self) -> Vec<String> {
        let mut out = self.base_symbols.clone();
        for (_, _, m) in &self.merges {
            out.push(m.clone());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("mode={}\n", self.mode.tag());
        for (l, r, m) in &self.merges {
            s.push_str(&format!("{l}\t{r}\t{m}\n"));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Loads mode and merges; the base inventory is reconstructed lazily from
    /// inputs at apply time and from the vocabulary file for id mapping.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let mode = lines
            .next()
            .and_then(|l| l.strip_prefix("mode="))
            .and_then(BpeMode::from_tag)
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: "missing mode line".into(),
            })?;
        let mut merges = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("bad merge line `{line}`"),
                });
            }
            merges.push((f[0].to_string(), f[1].to_string(), f[2].to_string()));
        }
        Ok(BpeModel { mode, merges, base_symbols: Vec::new() })
    }
}

/// Token table with fixed reserved ids: pad=0, bos=1, eos=2, unk=3.
///
/// CTC uses a separate id space derived from this table: blank=0 and real
/// tokens renumbered from 1 (pad/bos/eos excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_symbols<I: IntoIterator<Item = String>>(symbols: I) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: BTreeMap<String, usize> =
            tokens.iter().cloned().zip(0..).collect();
        for s in symbols {
            if ids.contains_key(&s) {
                continue;
            }
            ids.insert(s.clone(), tokens.len());
            tokens.push(s);
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token_of(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    /// Size of the blank-extended CTC table for this vocabulary.
    pub fn ctc_vocab_size(&self) -> usize {
        self.tokens.len() - RESERVED.len() + 2 // blank + unk + real tokens
    }

    /// Maps a decoder token id into the CTC id space (blank=0, unk=1,
    /// real tokens from 2). Pad/bos/eos have no CTC id.
    pub fn ctc_label_of(&self, id: usize) -> Option<usize> {
        if id >= UNK {
            Some(id - UNK + 1)
        } else {
            None
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\n"));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("bad vocab line {}", i + 1),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("bad id on line {}", i + 1),
            })?;
            if id != tokens.len() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("non-contiguous id {id} on line {}", i + 1),
                });
            }
            tokens.push(tok.to_string());
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("reserved token {r} missing at id {i}"),
                });
            }
        }
        let ids = tokens.iter().cloned().zip(0..).collect();
        Ok(Self { tokens, ids })
    }
}

/// Joint or separate source/target vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub enum VocabSet {
    Joint(Vocabulary),
    Separate { src: Vocabulary, tgt: Vocabulary },
}

impl VocabSet {
    pub fn src(&self) -> &Vocabulary {
        match self {
            VocabSet::Joint(v) => v,
            VocabSet::Separate { src, .. } => src,
        }
    }

    pub fn tgt(&self) -> &Vocabulary {
        match self {
            VocabSet::Joint(v) => v,
            VocabSet::Separate { tgt, .. } => tgt,
        }
    }

    pub fn is_joint(&self) -> bool {
        matches!(self, VocabSet::Joint(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    Joint,
    Separate,
}

/// Builds the vocabulary tables for pretraining.
///
/// Separate mode returns one table per side. Joint mode returns a single
/// table containing both inventories; a text token colliding with a DSU
/// token is disambiguated by prefixing the DSU copy with `#`.
pub fn build_vocab(
    dsu_bpe: Option<&BpeModel>,
    tgt_bpe: &BpeModel,
    mode: VocabMode,
) -> Result<VocabSet> {
    let tgt_syms = tgt_bpe.vocab_symbols();
    match mode {
        VocabMode::Separate => {
            let src = match dsu_bpe {
                Some(m) => Vocabulary::from_symbols(m.vocab_symbols())?,
                None => {
                    return Err(Error::Contract(
                        "separate vocabularies need a DSU-side model".into(),
                    ))
                }
            };
            let tgt = Vocabulary::from_symbols(tgt_syms)?;
            Ok(VocabSet::Separate { src, tgt })
        }
        VocabMode::Joint => {
            let mut symbols = tgt_syms;
            let existing: std::collections::BTreeSet<String> =
                symbols.iter().cloned().collect();
            if let Some(m) = dsu_bpe {
                for s in m.vocab_symbols() {
                    if existing.contains(&s) {
                        symbols.push(format!("#{s}"));
                    } else {
                        symbols.push(s);
                    }
                }
            }
            Ok(VocabSet::Joint(Vocabulary::from_symbols(symbols)?))
        }
    }
}

/// Mean post-BPE DSU length and the DSU-per-target-token length ratio over
/// aligned corpora.
pub fn corpus_stats(
    dsu_bpe: &BpeModel,
    tgt_bpe: &BpeModel,
    dsu_corpus: &[String],
    tgt_corpus: &[String],
) -> Result<(f64, f64)> {
    if dsu_corpus.len() != tgt_corpus.len() || dsu_corpus.is_empty() {
        return Err(Error::Data(format!(
            "corpus_stats: {} DSU lines vs {} target lines",
            dsu_corpus.len(),
            tgt_corpus.len()
        )));
    }
    let mean = |bpe: &BpeModel, corpus: &[String]| -> f64 {
        let total: usize = corpus.iter().map(|l| bpe.apply(l).len()).sum();
        total as f64 / corpus.len() as f64
    };
    let dsu_len = mean(dsu_bpe, dsu_corpus);
    let tgt_len = mean(tgt_bpe, tgt_corpus);
    Ok((dsu_len, dsu_len / tgt_len))
}
