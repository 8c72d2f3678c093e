//! Synthetic speech-translation benchmark: latent phoneme sequences rendered
//! as noisy "filterbank" frames and low-noise "SSL" features, with
//! deterministic transcripts and translations.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsu::{write_feature_file, write_manifest, FeatureSequence, ManifestEntry};
use crate::error::{Error, Result};
use crate::tokenizer::dedup;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Language code and utterance count per language.
    pub langs: Vec<(String, usize)>,
    /// Phoneme inventory size; at most 26 so phonemes map to letters.
    pub n_phonemes: usize,
    pub d_fbk: usize,
    pub d_ssl: usize,
    /// Inclusive range of frames each phoneme spans in the filterbank.
    pub frames_per_phoneme: (usize, usize),
    /// Inclusive range of latent phonemes per utterance.
    pub phonemes_per_utt: (usize, usize),
    pub noise_fbk: f64,
    pub noise_ssl: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Default tiers: one High (400), one Mid (80), one Low (12) language.
    pub fn desk(seed: u64) -> Self {
        Self {
            langs: vec![("ca".into(), 400), ("fa".into(), 80), ("ar".into(), 12)],
            n_phonemes: 8,
            d_fbk: 8,
            d_ssl: 6,
            frames_per_phoneme: (4, 8),
            phonemes_per_utt: (4, 8),
            noise_fbk: 0.05,
            noise_ssl: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Contract(format!("synth spec: {m}")));
        if self.langs.is_empty() || self.langs.iter().any(|(_, n)| *n == 0) {
            return fail("per-language counts must be positive");
        }
        if self.n_phonemes < 2 {
            return fail("need at least 2 phonemes");
        }
        if self.n_phonemes > 26 {
            return fail("phoneme inventory exceeds 26, cannot map to letters");
        }
        if self.frames_per_phoneme.0 < 2 || self.frames_per_phoneme.0 > self.frames_per_phoneme.1 {
            return fail("frames per phoneme must be an increasing range with min >= 2");
        }
        if self.phonemes_per_utt.0 < 2 || self.phonemes_per_utt.0 > self.phonemes_per_utt.1 {
            return fail("phonemes per utterance must be an increasing range with min >= 2");
        }
        if self.d_fbk == 0 || self.d_ssl == 0 {
            return fail("feature dims must be positive");
        }
        if self.noise_fbk < 0.0 || self.noise_ssl < 0.0 {
            return fail("noise levels must be non-negative");
        }
        Ok(())
    }
}

fn phoneme_letter(p: usize) -> char {
    (b'a' + p as u8) as char
}

/// Transcript: phoneme letters, chunked into 3-letter words.
pub fn render_transcript(latent: &[usize]) -> String {
    latent
        .chunks(3)
        .map(|c| c.iter().map(|&p| phoneme_letter(p)).collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Translation: each consecutive phoneme bigram becomes a deterministic
/// two-letter word; an odd trailing phoneme pairs with itself.
pub fn render_translation(latent: &[usize]) -> String {
    let mut words = Vec::new();
    let mut i = 0;
    while i < latent.len() {
        let p = latent[i];
        let q = if i + 1 < latent.len() { latent[i + 1] } else { p };
        words.push(format!("{}{}", phoneme_letter(p), phoneme_letter(q)));
        i += 2;
    }
    words.join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub manifest_path: PathBuf,
    pub latent_path: PathBuf,
    pub n_utterances: usize,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates the dataset directory: `fbk/` and `ssl/` feature files, a
/// manifest, and a latent phoneme record. Fully determined by `spec`.
pub fn gen_data(spec: &SynthSpec, out_dir: &Path) -> Result<GenSummary> {
    spec.validate()?;
    let fbk_dir = out_dir.join("fbk");
    let ssl_dir = out_dir.join("ssl");
    std::fs::create_dir_all(&fbk_dir)?;
    std::fs::create_dir_all(&ssl_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // per-phoneme templates, shared across languages
    let fbk_templates: Vec<Vec<f64>> = (0..spec.n_phonemes)
        .map(|_| (0..spec.d_fbk).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ssl_templates: Vec<Vec<f64>> = (0..spec.n_phonemes)
        .map(|_| (0..spec.d_ssl).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let mut entries = Vec::new();
    let mut latent_lines = String::from("id\tphonemes\n");
    for (lang, count) in &spec.langs {
        for u in 0..*count {
            let id = format!("{lang}_{u:04}");
            let len = rng.gen_range(spec.phonemes_per_utt.0..=spec.phonemes_per_utt.1);
            let latent: Vec<usize> =
                (0..len).map(|_| rng.gen_range(0..spec.n_phonemes)).collect();

            let mut fbk = Vec::new();
            let mut ssl = Vec::new();
            let mut ssl_frames = 0;
            for &p in &latent {
                let reps = rng.gen_range(spec.frames_per_phoneme.0..=spec.frames_per_phoneme.1);
                for _ in 0..reps {
                    for c in 0..spec.d_fbk {
                        fbk.push(fbk_templates[p][c] + spec.noise_fbk * gaussian(&mut rng));
                    }
                }
                // SSL runs at half the frame rate, floor 2 so dedup stays
                // nontrivial
                let ssl_reps = (reps / 2).max(2);
                ssl_frames += ssl_reps;
                for _ in 0..ssl_reps {
                    for c in 0..spec.d_ssl {
                        ssl.push(ssl_templates[p][c] + spec.noise_ssl * gaussian(&mut rng));
                    }
                }
            }
            let n_fbk = fbk.len() / spec.d_fbk;
            let fbk_path = fbk_dir.join(format!("{id}.dsuf"));
            let ssl_path = ssl_dir.join(format!("{id}.dsuf"));
            write_feature_file(&fbk_path, &FeatureSequence::new(&id, n_fbk, spec.d_fbk, fbk)?)?;
            write_feature_file(&ssl_path, &FeatureSequence::new(&id, ssl_frames, spec.d_ssl, ssl)?)?;

            latent_lines.push_str(&format!(
                "{id}\t{}\n",
                latent.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
            ));
            entries.push(ManifestEntry {
                id,
                feat_path: format!("ssl/{lang}_{u:04}.dsuf"),
                fbk_path: format!("fbk/{lang}_{u:04}.dsuf"),
                n_frames: ssl_frames,
                transcript: render_transcript(&latent),
                // translation reads off the deduplicated sequence, so it is
                // recoverable from the unit sequence after dedup
                translation: render_translation(&dedup(&latent)),
                lang: lang.clone(),
            });
        }
    }
    let manifest_path = out_dir.join("manifest.tsv");
    write_manifest(&manifest_path, &entries)?;
    let latent_path = out_dir.join("latent.tsv");
    std::fs::write(&latent_path, latent_lines)?;
    Ok(GenSummary { manifest_path, latent_path, n_utterances: entries.len() })
}

/// Reads the latent record written by [`gen_data`].
pub fn read_latent(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "missing tab".into(),
        })?;
        let latent = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: "non-numeric phoneme id".into(),
            })?;
        out.push((id.to_string(), latent));
    }
    Ok(out)
}
