//! Cross-modal entity matching: linear projections of entity embeddings and
//! image features into a shared space, cosine similarity, and a hinge loss
//! over the hardest in-batch negatives on both sides.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::codec::TensorPayload;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::trainer::{adam_step, clip_gradients, lr_at_step, AdamState, OptimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    /// d × d_e
    pub w_e: Mat,
    /// d × d_v
    pub w_v: Mat,
    pub delta: f64,
    pub seed: u64,
}

impl MatcherParams {
    pub fn new_random(d: usize, d_e: usize, d_v: usize, delta: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
        };
        let w_e = init(d, d_e);
        let w_v = init(d, d_v);
        MatcherParams { w_e, w_v, delta, seed }
    }

    pub fn d(&self) -> usize {
        self.w_e.nrows()
    }

    pub fn d_e(&self) -> usize {
        self.w_e.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_e.nrows() != self.w_v.nrows() {
            return Err(Error::dim("common space", self.w_e.nrows(), self.w_v.nrows()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.delta)));
        }
        if !self.w_e.iter().chain(self.w_v.iter()).all(|v| v.is_finite()) {
            return Err(Error::Schema("non-finite matcher weights".into()));
        }
        Ok(())
    }

    fn project_e(&self, u: ArrayView1<f64>) -> ndarray::Array1<f64> {
        self.w_e.dot(&u)
    }

    fn project_v(&self, u: ArrayView1<f64>) -> ndarray::Array1<f64> {
        self.w_v.dot(&u)
    }
}

fn cosine(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Cosine similarity of the projected pair; 0 if either projection vanishes.
pub fn similarity(entity: &[f64], image: &[f64], params: &MatcherParams) -> Result<f64> {
    if entity.len() != params.d_e() {
        return Err(Error::dim("entity embedding", params.d_e(), entity.len()));
    }
    if image.len() != params.d_v() {
        return Err(Error::dim("image feature", params.d_v(), image.len()));
    }
    let pe = params.project_e(ArrayView1::from(entity));
    let pv = params.project_v(ArrayView1::from(image));
    Ok(cosine(&pe, &pv))
}

/// Positive pairs; row `i` of `entities` pairs with row `i` of `images`.
#[derive(Debug, Clone)]
pub struct MatchBatch {
    pub entities: Mat,
    pub images: Mat,
}

impl MatchBatch {
    pub fn len(&self) -> usize {
        self.entities.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct MarginLoss {
    pub loss: f64,
    pub grad_w_e: Mat,
    pub grad_w_v: Mat,
}

/// Mean over positives of the two hardest-negative hinge terms.
///
/// Negatives are the other batch members; ties go to the lowest index and a
/// hinge argument of exactly zero contributes no gradient.
pub fn margin_loss(batch: &MatchBatch, params: &MatcherParams) -> Result<MarginLoss> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if batch.images.nrows() != b {
        return Err(Error::Shape(format!(
            "{b} entities but {} images",
            batch.images.nrows()
        )));
    }
    if batch.entities.ncols() != params.d_e() {
        return Err(Error::dim("entity embedding", params.d_e(), batch.entities.ncols()));
    }
    if batch.images.ncols() != params.d_v() {
        return Err(Error::dim("image feature", params.d_v(), batch.images.ncols()));
    }
    let mut tape = Tape::new();
    let ue = tape.leaf(batch.entities.clone());
    let uv = tape.leaf(batch.images.clone());
    let we = tape.leaf(params.w_e.clone());
    let wv = tape.leaf(params.w_v.clone());
    let pe = tape.matmul_nt(ue, we);
    let pv = tape.matmul_nt(uv, wv);
    let ne = tape.normalize_rows(pe);
    let nv = tape.normalize_rows(pv);
    let sim = tape.matmul_nt(ne, nv);
    let s = tape.value(sim);

    let mut loss = 0.0;
    let mut ds = Mat::zeros((b, b));
    let w = 1.0 / b as f64;
    for i in 0..b {
        let pos = s[[i, i]];
        // hardest negative entity for image i, hardest negative image for entity i
        let hard_e = argmax_excluding((0..b).map(|j| s[[j, i]]), i);
        let hard_v = argmax_excluding((0..b).map(|j| s[[i, j]]), i);
        let he = params.delta + s[[hard_e, i]] - pos;
        if he > 0.0 {
            loss += w * he;
            ds[[hard_e, i]] += w;
            ds[[i, i]] -= w;
        }
        let hv = params.delta + s[[i, hard_v]] - pos;
        if hv > 0.0 {
            loss += w * hv;
            ds[[i, hard_v]] += w;
            ds[[i, i]] -= w;
        }
    }
    let mut grads = tape.backward(&[(sim, ds)]);
    Ok(MarginLoss {
        loss,
        grad_w_e: grads.take_or_zeros(we, params.w_e.dim()),
        grad_w_v: grads.take_or_zeros(wv, params.w_v.dim()),
    })
}

fn argmax_excluding(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in values.enumerate() {
        if j == skip {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j).unwrap_or(0)
}

/// Similarity matrix `S[i][j] = sim(entity_i, image_j)` for two KB matrices.
pub fn similarity_matrix(entities: &Mat, images: &Mat, params: &MatcherParams) -> Mat {
    let normalize = |m: Mat| {
        let mut m = m;
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        m
    };
    let pe = normalize(entities.dot(&params.w_e.t()));
    let pv = normalize(images.dot(&params.w_v.t()));
    pe.dot(&pv.t())
}

/// Fraction of entities whose own image is the top-scoring image (ties to
/// the lowest index).
pub fn recall_at_1(kb: &KnowledgeBase, params: &MatcherParams) -> f64 {
    if kb.is_empty() {
        return 0.0;
    }
    let (ue, uv) = kb.matrices();
    let s = similarity_matrix(&ue, &uv, params);
    let hits = (0..kb.len())
        .filter(|&i| argmax_excluding(s.row(i).iter().copied(), usize::MAX) == i)
        .count();
    hits as f64 / kb.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Common-space dimension.
    pub d: usize,
    pub delta: f64,
    pub epochs: usize,
    pub optim: OptimConfig,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            d: 512,
            delta: 0.2,
            epochs: 50,
            optim: OptimConfig::default(),
        }
    }
}

impl MatcherConfig {
    /// Settings sized for the synthetic desk-scale knowledge base.
    pub fn desk() -> Self {
        MatcherConfig {
            d: 32,
            delta: 0.2,
            epochs: 50,
            optim: OptimConfig {
                base_lr: 1e-2,
                init_lr: 1e-4,
                warmup_steps: 50,
                clip_norm: 1.0,
                batch_size: 16,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall_at_1: f64,
}

/// Trains the projections and returns the parameters with the best held-out
/// recall@1 (epoch 0 is the initialisation), plus the per-epoch log.
pub fn train_matcher(
    train: &KnowledgeBase,
    val: &KnowledgeBase,
    cfg: &MatcherConfig,
) -> Result<(MatcherParams, Vec<MatcherEpoch>)> {
    if train.is_empty() {
        return Err(Error::Config("matcher training set is empty".into()));
    }
    let first = &train.entries()[0];
    let (d_e, d_v) = (first.entity_embedding.len(), first.image_feature.len());
    let seed = cfg.optim.seed;
    let mut params = MatcherParams::new_random(cfg.d, d_e, d_v, cfg.delta, seed);
    let (ue, uv) = train.matrices();
    let bs = cfg.optim.batch_size.max(2);
    let batches_per_epoch = (train.len() / bs).max(1);
    let mut optim = cfg.optim.clone();
    optim.total_steps = (cfg.epochs * batches_per_epoch).max(1);
    if optim.warmup_steps >= optim.total_steps {
        optim.warmup_steps = optim.total_steps / 10;
    }
    let eval_set = if val.is_empty() { train } else { val };
    let mut best = (recall_at_1(eval_set, &params), params.clone());
    let mut log = vec![MatcherEpoch {
        epoch: 0,
        loss: f64::NAN,
        val_recall_at_1: best.0,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut state = AdamState::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = MatchBatch {
                entities: ue.select(ndarray::Axis(0), chunk),
                images: uv.select(ndarray::Axis(0), chunk),
            };
            let out = margin_loss(&batch, &params)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence(format!("matcher loss {} at epoch {epoch}", out.loss)));
            }
            total += out.loss;
            count += 1;
            let mut grads = [out.grad_w_e, out.grad_w_v];
            clip_gradients(&mut grads, optim.clip_norm);
            let lr = lr_at_step(step.min(optim.total_steps), &optim)?;
            adam_step(&mut [&mut params.w_e, &mut params.w_v], &grads, &mut state, lr, &optim)?;
            step += 1;
        }
        let recall = recall_at_1(eval_set, &params);
        log.push(MatcherEpoch {
            epoch,
            loss: total / count.max(1) as f64,
            val_recall_at_1: recall,
        });
        if recall > best.0 {
            best = (recall, params.clone());
        }
    }
    Ok((best.1, log))
}

/// A text-side node offered for matching.
#[derive(Debug, Clone, Copy)]
pub struct TextCandidate<'a> {
    pub id: &'a str,
    pub embedding: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy)]
pub struct VisualCandidate<'a> {
    pub id: &'a str,
    pub feature: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub text_node: String,
    pub visual_node: String,
    pub sim: f64,
}

/// Every (text, visual) pair with similarity strictly above `threshold`,
/// sorted by (text id, visual id).
pub fn match_entities(
    text: &[TextCandidate<'_>],
    visual: &[VisualCandidate<'_>],
    params: &MatcherParams,
    threshold: f64,
) -> Result<Vec<EntityMatch>> {
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (-1, 1)")));
    }
    let projected: Vec<_> = visual
        .iter()
        .map(|v| {
            if v.feature.len() != params.d_v() {
                return Err(Error::dim(
                    format!("feature of {}", v.id),
                    params.d_v(),
                    v.feature.len(),
                ));
            }
            Ok(params.project_v(ArrayView1::from(v.feature)))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for t in text {
        let Some(emb) = t.embedding else { continue };
        if emb.len() != params.d_e() {
            return Err(Error::dim(format!("embedding of {}", t.id), params.d_e(), emb.len()));
        }
        let pe = params.project_e(ArrayView1::from(emb));
        for (v, pv) in visual.iter().zip(&projected) {
            let sim = cosine(&pe, pv);
            if sim > threshold {
                out.push(EntityMatch {
                    text_node: t.id.to_string(),
                    visual_node: v.id.to_string(),
                    sim,
                });
            }
        }
    }
    out.sort_by(|a, b| (&a.text_node, &a.visual_node).cmp(&(&b.text_node, &b.visual_node)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherHeader {
    pub d: usize,
    pub d_e: usize,
    pub d_v: usize,
    pub delta: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatcherCheckpoint {
    header: MatcherHeader,
    tensors: BTreeMap<String, TensorPayload>,
}

impl MatcherParams {
    pub fn header(&self) -> MatcherHeader {
        MatcherHeader {
            d: self.d(),
            d_e: self.d_e(),
            d_v: self.d_v(),
            delta: self.delta,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut tensors = BTreeMap::new();
        tensors.insert("W_e".to_string(), TensorPayload::from_array(&self.w_e));
        tensors.insert("W_v".to_string(), TensorPayload::from_array(&self.w_v));
        Ok(serde_json::to_string_pretty(&MatcherCheckpoint {
            header: self.header(),
            tensors,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: MatcherCheckpoint = serde_json::from_str(text)?;
        let get = |name: &str| {
            ck.tensors
                .get(name)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor {name}")))?
                .to_array()
        };
        let w_e = get("W_e")?;
        let w_v = get("W_v")?;
        let h = &ck.header;
        if w_e.dim() != (h.d, h.d_e) {
            return Err(Error::Shape(format!(
                "W_e is {:?}, header says ({}, {})",
                w_e.dim(),
                h.d,
                h.d_e
            )));
        }
        if w_v.dim() != (h.d, h.d_v) {
            return Err(Error::Shape(format!(
                "W_v is {:?}, header says ({}, {})",
                w_v.dim(),
                h.d,
                h.d_v
            )));
        }
        let p = MatcherParams {
            w_e,
            w_v,
            delta: h.delta,
            seed: h.seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
