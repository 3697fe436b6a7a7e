//! Caption metrics: BLEU-4, ROUGE-L, CIDEr-D, entity F1, and the
//! entity-masked protocol.
//!
//! Normalisation, applied identically to hypotheses and references:
//! 1. delete every ASCII punctuation character;
//! 2. split on Unicode whitespace;
//! 3. (masked mode only) replace entity spans by their class label, matching
//!    case-sensitively;
//! 4. lowercase each token.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::EntityRef;
use crate::error::{Error, Result};

const EPS: f64 = 1e-9;
const CIDER_SIGMA: f64 = 6.0;

/// Punctuation-stripped, whitespace-split tokens with case preserved.
pub fn split_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub fn normalize(text: &str) -> Vec<String> {
    split_tokens(text).into_iter().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalInstance {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub hyp_entities: Vec<EntityRef>,
    pub ref_entities: Vec<EntityRef>,
}

impl EvalInstance {
    /// Normalised single-reference instance.
    pub fn from_text(hyp: &str, reference: &str) -> Self {
        EvalInstance {
            hypothesis: normalize(hyp),
            references: vec![normalize(reference)],
            ..Default::default()
        }
    }
}

fn check_corpus(corpus: &[EvalInstance]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(i) = corpus.iter().position(|c| c.references.is_empty()) {
        return Err(Error::Schema(format!("instance {i} has no reference")));
    }
    Ok(())
}

type Ngram<'a> = &'a [String];

/// Ordered so that floating-point reductions over n-grams are reproducible.
fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU-4: `BP · exp(¼ Σ log p_n)` with
/// `p_n = (clipped_n + 1e-9) / (total_n + 1e-9)` summed over the corpus, and
/// the brevity penalty against the closest reference length (shorter wins
/// ties).
pub fn bleu4(corpus: &[EvalInstance]) -> Result<f64> {
    check_corpus(corpus)?;
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for inst in corpus {
        let h = &inst.hypothesis;
        hyp_len += h.len();
        ref_len += inst
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let mut max_ref: HashMap<Ngram, usize> = HashMap::new();
            for r in &inst.references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
            clipped[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let log_p: f64 = (0..4)
        .map(|k| ((clipped[k] as f64 + EPS) / (total[k] as f64 + EPS)).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((bp * log_p.exp()).clamp(0.0, 1.0))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with β = 1.2, taking the best precision and best recall
/// over the references.
pub fn rouge_l_instance(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    const BETA: f64 = 1.2;
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in refs {
        let l = lcs_len(hyp, reference) as f64;
        if !hyp.is_empty() {
            p = p.max(l / hyp.len() as f64);
        }
        if !reference.is_empty() {
            r = r.max(l / reference.len() as f64);
        }
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    (1.0 + BETA * BETA) * p * r / (r + BETA * BETA * p)
}

pub fn rouge_l(corpus: &[EvalInstance]) -> Result<f64> {
    check_corpus(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|i| rouge_l_instance(&i.hypothesis, &i.references))
        .sum();
    Ok(total / corpus.len() as f64)
}

struct CiderVec {
    weights: [BTreeMap<Vec<String>, f64>; 4],
    norms: [f64; 4],
    /// Bigram count, used for the length penalty (as in the reference scorer).
    length: f64,
}

fn cider_vec(tokens: &[String], df: &HashMap<Vec<String>, f64>, log_n: f64) -> CiderVec {
    let mut weights: [BTreeMap<Vec<String>, f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    let mut length = 0.0;
    for n in 1..=4 {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let w = tf as f64 * (log_n - d);
            norms[n - 1] += w * w;
            if n == 2 {
                length += tf as f64;
            }
            weights[n - 1].insert(g.to_vec(), w);
        }
    }
    CiderVec {
        weights,
        norms: norms.map(f64::sqrt),
        length,
    }
}

/// Per-instance CIDEr-D scores (mean over n of clipped TF-IDF cosine times
/// a Gaussian length penalty, averaged over references, times 10).
/// Document frequencies come from the references.
pub fn cider_d_scores(corpus: &[EvalInstance]) -> Result<Vec<f64>> {
    check_corpus(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::CorpusTooSmall {
            min: 2,
            got: corpus.len(),
        });
    }
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for inst in corpus {
        let mut seen: HashSet<Ngram> = HashSet::new();
        for r in &inst.references {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_default() += 1.0;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    Ok(corpus
        .iter()
        .map(|inst| {
            let h = cider_vec(&inst.hypothesis, &df, log_n);
            let mut score = [0.0; 4];
            for r in &inst.references {
                let rv = cider_vec(r, &df, log_n);
                let delta = h.length - rv.length;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                for (k, s) in score.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (g, &wh) in &h.weights[k] {
                        if let Some(&wr) = rv.weights[k].get(g) {
                            v += wh.min(wr) * wr;
                        }
                    }
                    if h.norms[k] != 0.0 && rv.norms[k] != 0.0 {
                        v /= h.norms[k] * rv.norms[k];
                    }
                    *s += v * penalty;
                }
            }
            let mean = score.iter().sum::<f64>() / 4.0;
            mean / inst.references.len() as f64 * 10.0
        })
        .collect())
}

pub fn cider_d(corpus: &[EvalInstance]) -> Result<f64> {
    let s = cider_d_scores(corpus)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EntityMatchConfig {
    pub averaging: Averaging,
    /// Compare surfaces after lowercasing.
    pub case_fold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(matched: f64, hyp: f64, reference: f64) -> Prf {
    let precision = if hyp > 0.0 { matched / hyp } else { 0.0 };
    let recall = if reference > 0.0 { matched / reference } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf { precision, recall, f1 }
}

/// Multiset intersection size of the two surface lists.
pub fn entity_matches(hyp: &[EntityRef], reference: &[EntityRef], case_fold: bool) -> usize {
    let key = |e: &EntityRef| {
        if case_fold {
            e.surface.to_lowercase()
        } else {
            e.surface.clone()
        }
    };
    let mut pool: HashMap<String, usize> = HashMap::new();
    for e in reference {
        *pool.entry(key(e)).or_default() += 1;
    }
    hyp.iter()
        .filter(|e| match pool.get_mut(&key(e)) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Exact-surface entity precision / recall / F1. Instances with no entity
/// on either side are skipped.
pub fn entity_f1(corpus: &[EvalInstance], cfg: &EntityMatchConfig) -> Prf {
    let counts: Vec<(f64, f64, f64)> = corpus
        .iter()
        .filter(|i| !(i.hyp_entities.is_empty() && i.ref_entities.is_empty()))
        .map(|i| {
            (
                entity_matches(&i.hyp_entities, &i.ref_entities, cfg.case_fold) as f64,
                i.hyp_entities.len() as f64,
                i.ref_entities.len() as f64,
            )
        })
        .collect();
    match cfg.averaging {
        Averaging::Micro => {
            let (m, h, r) = counts
                .iter()
                .fold((0.0, 0.0, 0.0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            prf(m, h, r)
        }
        Averaging::Macro => {
            if counts.is_empty() {
                return Prf::default();
            }
            let k = counts.len() as f64;
            let sum = counts
                .iter()
                .map(|&(m, h, r)| prf(m, h, r))
                .fold(Prf::default(), |a, p| Prf {
                    precision: a.precision + p.precision,
                    recall: a.recall + p.recall,
                    f1: a.f1 + p.f1,
                });
            Prf {
                precision: sum.precision / k,
                recall: sum.recall / k,
                f1: sum.f1 / k,
            }
        }
    }
}

/// Surface lookup used for masking and for recognising entities in
/// generated text. Matching is longest-first, left to right, without
/// overlaps; among equally long surfaces the first registered wins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gazetteer {
    entries: Vec<(Vec<String>, EntityRef)>,
}

impl Gazetteer {
    pub fn new(entities: impl IntoIterator<Item = EntityRef>) -> Self {
        let mut seen = HashSet::new();
        let entries = entities
            .into_iter()
            .filter(|e| seen.insert(e.surface.clone()))
            .map(|e| (split_tokens(&e.surface), e))
            .filter(|(t, _)| !t.is_empty())
            .collect();
        Gazetteer { entries }
    }

    fn longest_at(&self, tokens: &[String], i: usize) -> Option<(usize, &EntityRef)> {
        let mut best: Option<(usize, &EntityRef)> = None;
        for (surface, e) in &self.entries {
            let n = surface.len();
            if i + n <= tokens.len() && tokens[i..i + n] == surface[..] && best.is_none_or(|(b, _)| n > b) {
                best = Some((n, e));
            }
        }
        best
    }

    /// Non-overlapping matches as `(start, len, entity)`.
    pub fn find(&self, tokens: &[String]) -> Vec<(usize, usize, &EntityRef)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match self.longest_at(tokens, i) {
                Some((n, e)) => {
                    out.push((i, n, e));
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn recognize(&self, tokens: &[String]) -> Vec<EntityRef> {
        self.find(tokens).into_iter().map(|(_, _, e)| e.clone()).collect()
    }

    pub fn mask(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut last = 0;
        for (start, n, e) in self.find(tokens) {
            out.extend_from_slice(&tokens[last..start]);
            out.push(e.entity_class.label().to_string());
            last = start + n;
        }
        out.extend_from_slice(&tokens[last..]);
        out
    }
}

/// Replaces each matched entity span with one class-label token.
pub fn mask_entities(tokens: &[String], entities: &[EntityRef]) -> Vec<String> {
    Gazetteer::new(entities.iter().cloned()).mask(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    Standard,
    EntityMasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_f1: Option<f64>,
}

/// A generated caption; entities are recognised with the reference
/// gazetteer when not supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub image_id: String,
    pub caption_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<EntityRef>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub image_id: String,
    pub caption_text: String,
    #[serde(default)]
    pub entities: Vec<EntityRef>,
}

/// Builds evaluation instances, aligned by image id in reference order.
pub fn align(hyps: &[Hypothesis], refs: &[Reference], mode: EvalMode) -> Result<Vec<EvalInstance>> {
    let mut by_id: BTreeMap<&str, &Hypothesis> = BTreeMap::new();
    for h in hyps {
        if by_id.insert(&h.image_id, h).is_some() {
            return Err(Error::Alignment(format!("duplicate hypothesis for {}", h.image_id)));
        }
    }
    let mut ref_ids = HashSet::new();
    for r in refs {
        if !ref_ids.insert(r.image_id.as_str()) {
            return Err(Error::Alignment(format!("duplicate reference for {}", r.image_id)));
        }
    }
    if let Some(extra) = by_id.keys().find(|id| !ref_ids.contains(*id)) {
        return Err(Error::Alignment(format!("hypothesis {extra} has no reference")));
    }
    let gazetteer = Gazetteer::new(refs.iter().flat_map(|r| r.entities.iter().cloned()));
    refs.iter()
        .map(|r| {
            let h = by_id
                .get(r.image_id.as_str())
                .ok_or_else(|| Error::Alignment(format!("reference {} has no hypothesis", r.image_id)))?;
            let h_tokens = split_tokens(&h.caption_text);
            let r_tokens = split_tokens(&r.caption_text);
            let hyp_entities = match &h.entities {
                Some(e) => e.clone(),
                None => gazetteer.recognize(&h_tokens),
            };
            let (h_tokens, r_tokens) = match mode {
                EvalMode::Standard => (h_tokens, r_tokens),
                EvalMode::EntityMasked => (
                    mask_entities(&h_tokens, &hyp_entities),
                    mask_entities(&r_tokens, &r.entities),
                ),
            };
            let lower = |t: Vec<String>| t.into_iter().map(|w| w.to_lowercase()).collect();
            Ok(EvalInstance {
                hypothesis: lower(h_tokens),
                references: vec![lower(r_tokens)],
                hyp_entities,
                ref_entities: r.entities.clone(),
            })
        })
        .collect()
}

pub fn report(corpus: &[EvalInstance], mode: EvalMode, entity_cfg: &EntityMatchConfig) -> Result<CorpusReport> {
    let (p, r, f) = match mode {
        EvalMode::Standard => {
            let e = entity_f1(corpus, entity_cfg);
            (Some(e.precision), Some(e.recall), Some(e.f1))
        }
        EvalMode::EntityMasked => (None, None, None),
    };
    Ok(CorpusReport {
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider_d: cider_d(corpus)?,
        entity_precision: p,
        entity_recall: r,
        entity_f1: f,
    })
}

pub fn evaluate_corpus(
    hyps: &[Hypothesis],
    refs: &[Reference],
    mode: EvalMode,
    entity_cfg: &EntityMatchConfig,
) -> Result<CorpusReport> {
    let corpus = align(hyps, refs, mode)?;
    report(&corpus, mode, entity_cfg)
}
