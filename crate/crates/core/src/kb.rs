//! External multi-modal knowledge base of (entity, image) pairs.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::FeatureVec;
use crate::data::{parse_jsonl, DataConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBaseEntry {
    pub wiki_id: String,
    pub name: String,
    pub entity_embedding: FeatureVec,
    pub image_feature: FeatureVec,
}

impl KnowledgeBaseEntry {
    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        if self.entity_embedding.len() != cfg.d_e {
            return Err(Error::dim(
                format!("entity_embedding of {}", self.wiki_id),
                cfg.d_e,
                self.entity_embedding.len(),
            ));
        }
        if self.image_feature.len() != cfg.d_v {
            return Err(Error::dim(
                format!("image_feature of {}", self.wiki_id),
                cfg.d_v,
                self.image_feature.len(),
            ));
        }
        if !self.entity_embedding.is_finite() || !self.image_feature.is_finite() {
            return Err(Error::Schema(format!("{}: non-finite feature", self.wiki_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KnowledgeBaseEntry>,
    index: HashMap<String, usize>,
}

impl KnowledgeBase {
    /// Builds a base keeping the first occurrence of each `wiki_id`.
    /// Returns the base and the number of dropped duplicates.
    pub fn from_entries(entries: impl IntoIterator<Item = KnowledgeBaseEntry>) -> (Self, usize) {
        let mut kb = KnowledgeBase::default();
        let mut dups = 0;
        for e in entries {
            if kb.index.contains_key(&e.wiki_id) {
                dups += 1;
                continue;
            }
            kb.index.insert(e.wiki_id.clone(), kb.entries.len());
            kb.entries.push(e);
        }
        (kb, dups)
    }

    pub fn entries(&self) -> &[KnowledgeBaseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, wiki_id: &str) -> Option<usize> {
        self.index.get(wiki_id).copied()
    }

    pub fn get(&self, wiki_id: &str) -> Option<&KnowledgeBaseEntry> {
        self.position(wiki_id).map(|i| &self.entries[i])
    }

    /// Stacks entity embeddings (n × d_e) and image features (n × d_v).
    pub fn matrices(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.len();
        let d_e = self.entries.first().map_or(0, |e| e.entity_embedding.len());
        let d_v = self.entries.first().map_or(0, |e| e.image_feature.len());
        let mut ue = Array2::zeros((n, d_e));
        let mut uv = Array2::zeros((n, d_v));
        for (i, e) in self.entries.iter().enumerate() {
            for (j, &x) in e.entity_embedding.0.iter().enumerate() {
                ue[[i, j]] = f64::from(x);
            }
            for (j, &x) in e.image_feature.0.iter().enumerate() {
                uv[[i, j]] = f64::from(x);
            }
        }
        (ue, uv)
    }
}

pub fn parse_kb(text: &str, cfg: &DataConfig) -> Result<(KnowledgeBase, usize)> {
    let entries = parse_jsonl(text, |e: &KnowledgeBaseEntry| e.validate(cfg))?;
    Ok(KnowledgeBase::from_entries(entries))
}

pub fn load_kb(path: impl AsRef<Path>, cfg: &DataConfig) -> Result<(KnowledgeBase, usize)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kb(&text, cfg)
}

pub fn save_kb(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<()> {
    crate::data::write_jsonl(path, kb.entries())
}

/// Seeded random partition into (train, held_out); each side keeps input order.
pub fn split_kb(kb: &KnowledgeBase, ratio: f64, seed: u64) -> Result<(KnowledgeBase, KnowledgeBase)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Ratio(ratio));
    }
    let n = kb.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratio).round() as usize;
    let mut train_idx = order[..n_train].to_vec();
    let mut held_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    held_idx.sort_unstable();
    let pick = |idx: &[usize]| KnowledgeBase::from_entries(idx.iter().map(|&i| kb.entries[i].clone())).0;
    Ok((pick(&train_idx), pick(&held_idx)))
}

/// Parameters of the clustered synthetic base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthKbConfig {
    pub entities: usize,
    pub clusters: usize,
    pub d_e: usize,
    pub d_v: usize,
    pub latent_dim: usize,
    /// Spread of cluster centres in latent space.
    pub center_scale: f64,
    /// Spread of entities around their cluster centre.
    pub member_scale: f64,
    /// Independent observation noise on each modality.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthKbConfig {
    fn default() -> Self {
        SynthKbConfig {
            entities: 200,
            clusters: 8,
            d_e: 16,
            d_v: 32,
            latent_dim: 8,
            center_scale: 2.0,
            member_scale: 1.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Clustered Gaussian entity/image pairs.
///
/// Each entity owns a latent point drawn around one of `clusters` centres;
/// its text embedding and image feature are two fixed random linear views of
/// that point plus independent noise, so the pairs are linearly alignable.
pub fn synth_kb(cfg: &SynthKbConfig) -> Vec<KnowledgeBaseEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut gauss = |scale: f64| scale * std.sample(&mut rng);
    let k = cfg.latent_dim;
    let text_view: Vec<f64> = (0..cfg.d_e * k).map(|_| gauss(1.0 / (k as f64).sqrt())).collect();
    let image_view: Vec<f64> = (0..cfg.d_v * k).map(|_| gauss(1.0 / (k as f64).sqrt())).collect();
    let centers: Vec<Vec<f64>> = (0..cfg.clusters.max(1))
        .map(|_| (0..k).map(|_| gauss(cfg.center_scale)).collect())
        .collect();
    (0..cfg.entities)
        .map(|i| {
            let c = &centers[i % centers.len()];
            let z: Vec<f64> = c.iter().map(|&m| m + gauss(cfg.member_scale)).collect();
            let view = |w: &[f64], d: usize, gauss: &mut dyn FnMut(f64) -> f64| {
                let v: Vec<f64> = (0..d)
                    .map(|r| (0..k).map(|j| w[r * k + j] * z[j]).sum::<f64>() + gauss(cfg.noise))
                    .collect();
                FeatureVec::from_f64(&v)
            };
            let entity_embedding = view(&text_view, cfg.d_e, &mut gauss);
            let image_feature = view(&image_view, cfg.d_v, &mut gauss);
            KnowledgeBaseEntry {
                wiki_id: format!("Q{}", i + 1),
                name: synth_name(i),
                entity_embedding,
                image_feature,
            }
        })
        .collect()
}

/// Deterministic, pronounceable, capitalised single-token name for index `i`.
pub fn synth_name(i: usize) -> String {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "h", "j",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut x = i;
    let mut s = String::new();
    for _ in 0..3 {
        s.push_str(ONSETS[x % 16]);
        x /= 16;
        s.push_str(VOWELS[(i / 7 + s.len()) % 5]);
    }
    if x > 0 {
        s.push_str(&x.to_string());
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => s,
    }
}
