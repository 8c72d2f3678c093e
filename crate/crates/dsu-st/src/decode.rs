//! Length-bounded beam-search generation.

use crate::error::{Error, Result};
use crate::nn::{EncoderInput, Model};
use crate::tensor::Tape;
use crate::tokenizer::{BOS, EOS, PAD};

pub const DEFAULT_BEAM: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, EOS-terminated iff `finished`; BOS not included.
    pub tokens: Vec<usize>,
    /// Sum of token log-probs; no length normalization.
    pub log_prob: f64,
    pub finished: bool,
}

/// Candidate continuations: everything except padding and BOS.
fn candidate_ids(vocab: usize) -> impl Iterator<Item = usize> {
    (0..vocab).filter(|&id| id != PAD && id != BOS)
}

/// Standard beam search over the decoder, expanding the top `beam` tokens per
/// hypothesis per step. Returns the best finished hypothesis, or the best
/// unfinished one (flagged) if nothing finishes within `max_len` tokens.
pub fn beam_search(
    model: &Model,
    input: &EncoderInput,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Contract("beam and max_len must be positive".into()));
    }
    let vocab = model.config.tgt_vocab;
    let mut tape = Tape::new();
    let leased = model.lease(&mut tape, false);
    let enc_out = model.encode(&mut tape, &leased, input, None)?;

    let mut live = vec![Hypothesis { tokens: vec![], log_prob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut dec_in = vec![BOS];
            dec_in.extend(&hyp.tokens);
            let logits = model.decode(&mut tape, &leased, enc_out, &dec_in, None)?;
            let lp = tape.log_softmax(logits);
            let data = tape.data(lp);
            let row = &data[(dec_in.len() - 1) * vocab..dec_in.len() * vocab];
            let mut scored: Vec<(usize, f64)> =
                candidate_ids(vocab).map(|id| (id, row[id])).collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(id, logp) in scored.iter().take(beam) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(id);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + logp,
                    finished: id == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
        candidates.truncate(beam);
        live = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        // stop once no live hypothesis can beat the best finished one
        if let Some(best) = finished.iter().map(|h| h.log_prob).max_by(f64::total_cmp) {
            if live.iter().all(|h| h.log_prob <= best) {
                break;
            }
        }
        if live.is_empty() {
            break;
        }
    }

    let best_of = |hyps: Vec<Hypothesis>| {
        hyps.into_iter()
            .max_by(|a, b| a.log_prob.partial_cmp(&b.log_prob).unwrap())
    };
    if let Some(best) = best_of(finished) {
        return Ok(best);
    }
    best_of(live).ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}
