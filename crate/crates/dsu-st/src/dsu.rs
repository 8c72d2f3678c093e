//! Discrete speech units: mini-batch k-means over SSL-proxy features.
//!
//! Features arrive as per-utterance binary files (`DSUF` container) listed in
//! a TSV manifest. A k-means model trained on a sampled frame pool maps every
//! frame to its nearest centroid; the resulting index sequence is the DSU
//! sequence for the utterance. Consecutive-repeat merging happens later, in
//! the tokenizer.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"DSUF";
pub const FEATURE_VERSION: u32 = 1;

/// Dense feature matrix for one utterance, `t x d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub t: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, t: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if t == 0 || data.len() != t * d {
            return Err(Error::Data(format!(
                "feature sequence: {t}x{d} does not match {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature sequence contains non-finite values".into()));
        }
        Ok(Self { id: id.into(), t, d, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.d..(r + 1) * self.d]
    }
}

/// Writes the `DSUF` container: magic, u32 version, u32 T, u32 D, then
/// `T*D` little-endian f32 values.
pub fn write_feature_file(path: &Path, feat: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + feat.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(feat.t as u32).to_le_bytes());
    buf.extend_from_slice(&(feat.d as u32).to_le_bytes());
    for v in &feat.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(bad("missing DSUF magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if u32_at(4) != FEATURE_VERSION {
        return Err(bad("unsupported version"));
    }
    let t = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    if bytes.len() != 16 + t * d * 4 {
        return Err(bad("payload length mismatch"));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(id, t, d, data)
}

pub const MANIFEST_HEADER: &str = "id\tfeat_path\tfbk_path\tn_frames\ttranscript\ttranslation\tlang";

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feat_path: String,
    pub fbk_path: String,
    pub n_frames: usize,
    pub transcript: String,
    pub translation: String,
    pub lang: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "bad or missing manifest header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: expected 7 fields, got {}", i + 2, f.len()),
            });
        }
        out.push(ManifestEntry {
            id: f[0].to_string(),
            feat_path: f[1].to_string(),
            fbk_path: f[2].to_string(),
            n_frames: f[3].parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: bad n_frames", i + 2),
            })?,
            transcript: f[4].to_string(),
            translation: f[5].to_string(),
            lang: f[6].to_string(),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id, e.feat_path, e.fbk_path, e.n_frames, e.transcript, e.translation, e.lang
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Cluster index sequence for one utterance, one unit per source frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsuSequence {
    pub id: String,
    pub units: Vec<usize>,
}

/// Trained k-means model. Centroids are pairwise distinct after `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmeansModel {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub trained_on: usize,
}

impl KmeansModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances of every sample to its nearest centroid.
pub fn inertia(samples: &[f64], n: usize, d: usize, centroids: &[f64], k: usize) -> f64 {
    (0..n)
        .map(|i| {
            let x = &samples[i * d..(i + 1) * d];
            (0..k)
                .map(|c| sq_dist(x, &centroids[c * d..(c + 1) * d]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// k-means++ seeding. Fails if fewer than `k` distinct points exist.
fn kmeans_pp_init(
    samples: &[f64],
    n: usize,
    d: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&samples[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(&samples[i * d..(i + 1) * d], &centroids[0..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return Err(Error::Data(
                "kmeans: fewer distinct samples than clusters".into(),
            ));
        }
        let mut r = rng.gen_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if r < w {
                chosen = i;
                break;
            }
            r -= w;
        }
        let start = centroids.len();
        centroids.extend_from_slice(&samples[chosen * d..(chosen + 1) * d]);
        let c = &centroids[start..start + d].to_vec();
        for i in 0..n {
            let nd = sq_dist(&samples[i * d..(i + 1) * d], c);
            if nd < dist[i] {
                dist[i] = nd;
            }
        }
    }
    Ok(centroids)
}

fn nearest(x: &[f64], centroids: &[f64], k: usize, d: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let dd = sq_dist(x, &centroids[c * d..(c + 1) * d]);
        if dd < best_d {
            best_d = dd;
            best = c;
        }
    }
    best
}

/// Fits k-means on `n` samples of dimension `d`.
///
/// With `batch_size == n` every iteration is a full Lloyd step, so inertia is
/// non-increasing. Otherwise the standard streaming mini-batch update is
/// used: per-centroid counts with `centroid += (x - centroid) / count`.
/// Clusters that end an iteration empty are re-seeded to the point farthest
/// from its assigned centroid.
pub fn kmeans_fit(
    samples: &[f64],
    n: usize,
    d: usize,
    k: usize,
    batch_size: usize,
    iters: usize,
    seed: u64,
) -> Result<KmeansModel> {
    if k < 2 {
        return Err(Error::Contract("kmeans: k must be >= 2".into()));
    }
    if k > n {
        return Err(Error::Contract(format!("kmeans: k={k} exceeds n={n}")));
    }
    if batch_size == 0 || batch_size > n {
        return Err(Error::Contract(format!(
            "kmeans: batch_size {batch_size} not in 1..={n}"
        )));
    }
    assert_eq!(samples.len(), n * d);

    let mut centroids = None;
    for attempt in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt * 0x9e37_79b9));
        match kmeans_pp_init(samples, n, d, k, &mut rng) {
            Ok(c) => {
                centroids = Some((c, rng));
                break;
            }
            Err(_) => continue,
        }
    }
    let (mut centroids, mut rng) = centroids.ok_or_else(|| {
        Error::Data("kmeans: could not seed k distinct centroids after re-seeding".into())
    })?;

    let full_batch = batch_size == n;
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        if full_batch {
            // Lloyd step: exact means of current assignment.
            let assign: Vec<usize> = (0..n)
                .map(|i| nearest(&samples[i * d..(i + 1) * d], &centroids, k, d))
                .collect();
            let mut sums = vec![0.0; k * d];
            let mut cnt = vec![0usize; k];
            for (i, &c) in assign.iter().enumerate() {
                cnt[c] += 1;
                for j in 0..d {
                    sums[c * d + j] += samples[i * d + j];
                }
            }
            for c in 0..k {
                if cnt[c] > 0 {
                    for j in 0..d {
                        centroids[c * d + j] = sums[c * d + j] / cnt[c] as f64;
                    }
                }
            }
            reseed_empty(&mut centroids, samples, n, d, k, &cnt);
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut seen = vec![0usize; k];
            for &i in idx.iter().take(batch_size) {
                let x = &samples[i * d..(i + 1) * d];
                let c = nearest(x, &centroids, k, d);
                counts[c] += 1;
                seen[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                for j in 0..d {
                    centroids[c * d + j] += eta * (x[j] - centroids[c * d + j]);
                }
            }
            reseed_empty(&mut centroids, samples, n, d, k, &seen);
        }
    }

    // pairwise-distinct invariant
    for a in 0..k {
        for b in a + 1..k {
            if sq_dist(&centroids[a * d..(a + 1) * d], &centroids[b * d..(b + 1) * d]) == 0.0 {
                return Err(Error::Data(format!("kmeans: centroids {a} and {b} collapsed")));
            }
        }
    }

    Ok(KmeansModel { k, dim: d, centroids, trained_on: n })
}

/// Moves each centroid that captured nothing onto the sample currently
/// farthest from its own centroid.
fn reseed_empty(centroids: &mut [f64], samples: &[f64], n: usize, d: usize, k: usize, counts: &[usize]) {
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far_i = 0;
        let mut far_d = -1.0;
        for i in 0..n {
            let x = &samples[i * d..(i + 1) * d];
            let own = nearest(x, centroids, k, d);
            let dd = sq_dist(x, &centroids[own * d..(own + 1) * d]);
            if dd > far_d {
                far_d = dd;
                far_i = i;
            }
        }
        centroids[c * d..(c + 1) * d]
            .copy_from_slice(&samples[far_i * d..(far_i + 1) * d]);
    }
}

/// Maps every frame to its nearest centroid (squared Euclidean distance,
/// ties to the lowest centroid index).
pub fn kmeans_assign(model: &KmeansModel, features: &FeatureSequence) -> Result<DsuSequence> {
    if features.d != model.dim {
        return Err(Error::Contract(format!(
            "kmeans assign: feature dim {} != model dim {}",
            features.d, model.dim
        )));
    }
    let units = (0..features.t)
        .map(|r| nearest(features.row(r), &model.centroids, model.k, model.dim))
        .collect();
    Ok(DsuSequence { id: features.id.clone(), units })
}

/// Per-group sampling quota for the k-means training pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolGroup {
    pub name: String,
    pub langs: Vec<String>,
    pub quota: usize,
}

/// Samples `quota` utterances from each group (deterministically under
/// `seed`), loads their feature files relative to `root`, and concatenates
/// all frames into one `(n x d)` pool.
pub fn sample_training_pool(
    entries: &[ManifestEntry],
    groups: &[PoolGroup],
    root: &Path,
    seed: u64,
) -> Result<(Vec<f64>, usize, usize)> {
    let mut by_lang: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        by_lang.entry(e.lang.as_str()).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&ManifestEntry> = Vec::new();
    for g in groups {
        let mut pool: Vec<&ManifestEntry> = Vec::new();
        for lang in &g.langs {
            if let Some(v) = by_lang.get(lang.as_str()) {
                pool.extend(v.iter().copied());
            }
        }
        if pool.is_empty() {
            return Err(Error::Data(format!("empty sampling group `{}`", g.name)));
        }
        if g.quota > pool.len() {
            return Err(Error::Data(format!(
                "group `{}` quota {} exceeds {} available utterances",
                g.name,
                g.quota,
                pool.len()
            )));
        }
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        pool.shuffle(&mut rng);
        chosen.extend(pool.into_iter().take(g.quota));
    }

    let mut frames = Vec::new();
    let mut d = 0;
    let mut n = 0;
    for e in &chosen {
        let feat = read_feature_file(&root.join(&e.feat_path))?;
        if d == 0 {
            d = feat.d;
        } else if feat.d != d {
            return Err(Error::Data(format!(
                "feature dim mismatch in pool at utterance {}",
                e.id
            )));
        }
        n += feat.t;
        frames.extend_from_slice(&feat.data);
    }
    Ok((frames, n, d))
}
