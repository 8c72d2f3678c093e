//! Corpus BLEU (4-gram, 13a-style tokenization, exponential smoothing) and
//! chrF (character 6-grams, beta = 2), plus grouped reporting.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// 13a tokenization

/// Splits punctuation the way the mteval "13a" tokenizer does: ASCII
/// punctuation gets surrounding spaces, except that apostrophes never split,
/// periods and commas stay attached between digits, and hyphens stay attached
/// except directly after a digit. Known divergences from the reference
/// implementation are listed in `fixtures/tokenization_13a.tsv`.
pub fn tokenize_13a(s: &str) -> Vec<String> {
    let s = s
        .replace("<skipped>", "")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace('\u{a0}', " ");
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len() + 16);
    for (i, &c) in chars.iter().enumerate() {
        let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
        let next_digit = i + 1 < chars.len() && chars[i + 1].is_ascii_digit();
        let split = match c {
            '.' | ',' => !(prev_digit && next_digit),
            '-' => prev_digit,
            '\'' => false,
            _ => c.is_ascii_punctuation(),
        };
        if split {
            out.push(' ');
            out.push(c);
            out.push(' ');
        } else {
            out.push(c);
        }
    }
    out.split_whitespace().map(str::to_string).collect()
}

// ---------------------------------------------------------------------------
// BLEU

const BLEU_ORDER: usize = 4;

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in `[0, 100]`: clipped 4-gram precisions under 13a
/// tokenization, exponential smoothing for zero-match orders, brevity
/// penalty.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "bleu needs aligned non-empty corpora, got {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let ht = tokenize_13a(h);
        let rt = tokenize_13a(r);
        hyp_len += ht.len();
        ref_len += rt.len();
        for (n, (m, t)) in matches.iter_mut().zip(&mut totals).enumerate() {
            let hc = ngram_counts(&ht, n + 1);
            let rc = ngram_counts(&rt, n + 1);
            for (g, c) in &hc {
                *t += c;
                *m += c.min(rc.get(g).unwrap_or(&0));
            }
        }
    }
    if totals.iter().any(|&t| t == 0) {
        return Ok(0.0);
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    for n in 0..BLEU_ORDER {
        let p = if matches[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * totals[n] as f64)
        } else {
            100.0 * matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / BLEU_ORDER as f64).exp())
}

// ---------------------------------------------------------------------------
// chrF

const CHRF_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

/// Corpus chrF in `[0, 100]`: character n-grams up to order 6 on
/// whitespace-stripped text, per-order F-beta (beta = 2) averaged over
/// effective orders.
pub fn chrf(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "chrf needs aligned non-empty corpora, got {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; CHRF_ORDER];
    let mut hyp_total = [0usize; CHRF_ORDER];
    let mut ref_total = [0usize; CHRF_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        let hc: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 0..CHRF_ORDER {
            let hg = ngram_counts(&hc, n + 1);
            let rg = ngram_counts(&rc, n + 1);
            hyp_total[n] += hg.values().sum::<usize>();
            ref_total[n] += rg.values().sum::<usize>();
            for (g, c) in &hg {
                matches[n] += c.min(rg.get(g).unwrap_or(&0));
            }
        }
    }
    let mut f_sum = 0.0;
    let mut effective = 0;
    for n in 0..CHRF_ORDER {
        if hyp_total[n] == 0 && ref_total[n] == 0 {
            continue;
        }
        effective += 1;
        if hyp_total[n] == 0 || ref_total[n] == 0 {
            continue; // f = 0
        }
        let p = matches[n] as f64 / hyp_total[n] as f64;
        let r = matches[n] as f64 / ref_total[n] as f64;
        let denom = CHRF_BETA * CHRF_BETA * p + r;
        if denom > 0.0 {
            f_sum += (1.0 + CHRF_BETA * CHRF_BETA) * p * r / denom;
        }
    }
    if effective == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * f_sum / effective as f64)
}

// ---------------------------------------------------------------------------
// grouped reporting

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grouping {
    /// Group name -> member languages; each language in exactly one group.
    pub groups: Vec<(String, Vec<String>)>,
}

/// Resource grouping used at full scale.
pub fn full_scale_grouping() -> Grouping {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    Grouping {
        groups: vec![
            ("High".into(), set(&["ca", "de", "es", "fr"])),
            ("Mid".into(), set(&["fa", "it", "pt", "ru", "zh"])),
            (
                "Low".into(),
                set(&["ar", "cy", "et", "id", "ja", "lv", "mn", "nl", "sl", "sv", "ta", "tr"]),
            ),
        ],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub per_language: BTreeMap<String, f64>,
    pub group_means: BTreeMap<String, f64>,
    /// Unweighted mean over all languages.
    pub all: f64,
}

/// Unweighted group means plus the overall mean.
pub fn report_groups(
    metric: &str,
    per_language: &BTreeMap<String, f64>,
    grouping: &Grouping,
) -> Result<EvalReport> {
    if per_language.is_empty() {
        return Err(Error::Contract("no per-language scores".into()));
    }
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for (g, langs) in &grouping.groups {
        for l in langs {
            if owner.insert(l, g).is_some() {
                return Err(Error::Contract(format!("language {l} in multiple groups")));
            }
        }
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (lang, score) in per_language {
        let g = owner.get(lang.as_str()).ok_or_else(|| {
            Error::Contract(format!("language {lang} not assigned to any group"))
        })?;
        let e = sums.entry(g.to_string()).or_insert((0.0, 0));
        e.0 += score;
        e.1 += 1;
    }
    let group_means = sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
    let all = per_language.values().sum::<f64>() / per_language.len() as f64;
    Ok(EvalReport { metric: metric.into(), per_language: per_language.clone(), group_means, all })
}
