//! The captioning model: graph encoder and decoder trained jointly on the
//! caption cross-entropy, with the matcher and all input features frozen.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::codec::{matrix_to_array, FeatureVec, TensorPayload};
use crate::data::{ArticleAnnotations, ImageAnnotations, MultiModalGraph};
use crate::decoder::{
    assemble_on_tape, caption_loss_on_tape, generate, Ablation, ArticleInput, DecodeMode, DecoderConfig, DecoderParams,
    DecoderWeights, GraphRows, Memory, Segment,
};
use crate::error::{Error, Result};
use crate::gat::{encode_on_tape, GatConfig, GatParams, GatWeights, GraphInputs};
use crate::graph::induced_subgraph;
use crate::trainer::{adam_step, clip_gradients, lr_at_step, AdamState, OptimConfig};
use crate::vocab::{Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    pub decoder: DecoderConfig,
    pub gat: GatConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub ablation: Ablation,
    /// Minimum occurrences for a word to enter the vocabulary.
    pub min_count: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            decoder: DecoderConfig::default(),
            gat: GatConfig::default(),
            optim: OptimConfig::default(),
            epochs: 20,
            ablation: Ablation::Full,
            min_count: 1,
        }
    }
}

impl CaptionerConfig {
    /// Settings that fit a few dozen toy samples in well under a minute.
    pub fn desk() -> Self {
        CaptionerConfig {
            optim: OptimConfig {
                base_lr: 3e-3,
                init_lr: 1e-5,
                warmup_steps: 50,
                clip_norm: 1.0,
                batch_size: 8,
                ..OptimConfig::default()
            },
            epochs: 60,
            ..CaptionerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.gat.heads == 0 || !self.decoder.d_model.is_multiple_of(self.gat.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of GAT heads {}",
                self.decoder.d_model, self.gat.heads
            )));
        }
        let mut o = self.optim.clone();
        o.total_steps = o.total_steps.max(o.warmup_steps + 1);
        o.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerWeights<T> {
    pub gat: GatWeights<T>,
    pub dec: DecoderWeights<T>,
}

pub type CaptionerParams = CaptionerWeights<Mat>;

impl<T> CaptionerWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> CaptionerWeights<U> {
        CaptionerWeights {
            gat: self.gat.map(&mut f),
            dec: self.dec.map(&mut f),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = self.gat.named();
        out.extend(self.dec.named());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.gat.tensors_mut();
        out.extend(self.dec.tensors_mut());
        out
    }
}

impl CaptionerParams {
    pub fn new_random(cfg: &CaptionerConfig, vocab: usize, d_e: usize, d_v: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gat = GatParams::new_random(&cfg.gat, d_e, d_v, cfg.decoder.d_model, &mut rng)?;
        let dec = DecoderParams::new_random(&cfg.decoder, vocab, d_e, d_v, &mut rng)?;
        Ok(CaptionerParams { gat, dec })
    }

    pub fn bind(&self, tape: &mut Tape) -> CaptionerWeights<Var> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

/// What the graph segment of one sample is computed from.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    Absent,
    /// Run the encoder on these nodes.
    Encode(GraphInputs),
    /// Raw visual node features.
    Raw(Mat),
}

/// One (article, image, caption) instance turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub article: ArticleInput,
    pub image: Mat,
    pub graph: GraphSource,
    /// Caption ids followed by EOS; empty when there is no reference.
    pub target: Vec<usize>,
}

/// Copy of `g` where nodes without a feature carry zeros of their modality.
fn with_zero_features(g: &MultiModalGraph, d_e: usize, d_v: usize) -> MultiModalGraph {
    let mut g = g.clone();
    for n in &mut g.nodes {
        if n.feature.is_none() {
            let d = if n.kind.is_text() { d_e } else { d_v };
            n.feature = Some(FeatureVec(vec![0.0; d]));
        }
    }
    g
}

pub fn graph_source(
    graph: Option<&MultiModalGraph>,
    ablation: Ablation,
    gat: &GatConfig,
    d_e: usize,
    d_v: usize,
) -> Result<GraphSource> {
    let Some(g) = graph else {
        return Ok(GraphSource::Absent);
    };
    let encode = |g: &MultiModalGraph| -> Result<GraphSource> {
        if g.nodes.is_empty() {
            return Ok(GraphSource::Absent);
        }
        let g = with_zero_features(g, d_e, d_v);
        Ok(GraphSource::Encode(GraphInputs::from_graph(
            &g,
            d_e,
            d_v,
            gat.add_reverse_edges,
        )?))
    };
    match ablation {
        Ablation::WithoutGraph => Ok(GraphSource::Absent),
        Ablation::Full => encode(g),
        Ablation::TextSubgraphOnly => encode(&induced_subgraph(g, |n| n.kind.is_text())),
        Ablation::ImageSubgraphOnly => {
            let rows: Vec<FeatureVec> = g
                .nodes
                .iter()
                .filter(|n| n.kind.is_visual())
                .map(|n| n.feature.clone().unwrap_or_else(|| FeatureVec(vec![0.0; d_v])))
                .collect();
            if let Some(bad) = rows.iter().find(|r| r.len() != d_v) {
                return Err(Error::dim("visual node feature", d_v, bad.len()));
            }
            Ok(if rows.is_empty() {
                GraphSource::Absent
            } else {
                GraphSource::Raw(matrix_to_array(&rows, d_v))
            })
        }
    }
}

/// Words of the article, embedded by the decoder, when no token features exist.
pub fn article_input(
    article: &ArticleAnnotations,
    vocab: &Vocabulary,
    d_e: usize,
    max_len: usize,
) -> Result<ArticleInput> {
    match &article.token_features {
        Some(rows) => {
            if let Some(bad) = rows.iter().find(|r| r.len() != d_e) {
                return Err(Error::dim(
                    format!("token features of {}", article.article_id),
                    d_e,
                    bad.len(),
                ));
            }
            let n = rows.len().min(max_len);
            Ok(ArticleInput::Features(matrix_to_array(&rows[..n], d_e)))
        }
        None => {
            let mut ids = vocab.encode(&article.text);
            ids.truncate(max_len);
            Ok(ArticleInput::Tokens(ids))
        }
    }
}

/// Caption ids truncated to `max_len`, then EOS.
pub fn caption_target(caption: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(caption);
    ids.truncate(max_len);
    ids.push(EOS);
    ids
}

#[allow(clippy::too_many_arguments)]
pub fn prepare_sample(
    image_id: &str,
    article: &ArticleAnnotations,
    image: &ImageAnnotations,
    graph: Option<&MultiModalGraph>,
    caption: Option<&str>,
    vocab: &Vocabulary,
    cfg: &CaptionerConfig,
    d_e: usize,
    d_v: usize,
) -> Result<Sample> {
    if let Some(bad) = image.global_features.iter().find(|r| r.len() != d_v) {
        return Err(Error::dim(format!("global features of {image_id}"), d_v, bad.len()));
    }
    Ok(Sample {
        image_id: image_id.to_string(),
        article: article_input(article, vocab, d_e, cfg.decoder.max_article_len)?,
        image: if image.global_features.is_empty() {
            Array2::zeros((0, d_v))
        } else {
            matrix_to_array(&image.global_features, d_v)
        },
        graph: graph_source(graph, cfg.ablation, &cfg.gat, d_e, d_v)?,
        target: caption
            .map(|c| caption_target(c, vocab, cfg.decoder.max_caption_len))
            .unwrap_or_default(),
    })
}

fn memory_on_tape(
    tape: &mut Tape,
    w: &CaptionerWeights<Var>,
    cfg: &CaptionerConfig,
    sample: &Sample,
) -> Result<(Var, [usize; 3])> {
    let rows = match &sample.graph {
        GraphSource::Absent => GraphRows::Absent,
        GraphSource::Encode(inputs) => GraphRows::Encoded(encode_on_tape(tape, &w.gat, inputs, cfg.gat.leaky_slope)),
        GraphSource::Raw(m) => GraphRows::Raw(m.clone()),
    };
    assemble_on_tape(tape, &w.dec, &cfg.decoder, &sample.article, &sample.image, rows)
}

/// Summed caption loss, token count and parameter gradients for one sample.
pub fn sample_gradients(
    params: &CaptionerParams,
    cfg: &CaptionerConfig,
    sample: &Sample,
) -> Result<(f64, usize, CaptionerParams)> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let (memory, _) = memory_on_tape(&mut tape, &w, cfg, sample)?;
    let (loss, tokens) = caption_loss_on_tape(&mut tape, &w.dec, &cfg.decoder, memory, &sample.target)?;
    let mut g = tape.backward(&[(loss, Mat::from_elem((1, 1), 1.0))]);
    let grads = w.map(|&v| g.take_or_zeros(v, tape.shape(v)));
    Ok((tape.value(loss)[[0, 0]], tokens, grads))
}

pub fn sample_loss(params: &CaptionerParams, cfg: &CaptionerConfig, sample: &Sample) -> Result<f64> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let (memory, _) = memory_on_tape(&mut tape, &w, cfg, sample)?;
    let (loss, _) = caption_loss_on_tape(&mut tape, &w.dec, &cfg.decoder, memory, &sample.target)?;
    Ok(tape.value(loss)[[0, 0]])
}

pub fn sample_memory(params: &CaptionerParams, cfg: &CaptionerConfig, sample: &Sample) -> Result<Memory> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let (m, counts) = memory_on_tape(&mut tape, &w, cfg, sample)?;
    let segments = [Segment::Text, Segment::Image, Segment::Graph]
        .into_iter()
        .zip(counts)
        .flat_map(|(s, n)| std::iter::repeat_n(s, n))
        .collect();
    Ok(Memory {
        rows: tape.value(m).clone(),
        segments,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub config: CaptionerConfig,
    pub vocab: Vocabulary,
    pub d_e: usize,
    pub d_v: usize,
    pub seed: u64,
    pub params: CaptionerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed loss over the epoch divided by the number of target tokens.
    pub loss_per_token: f64,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Trains encoder and decoder jointly. Deterministic for a given `seed`:
/// the batch order comes from a seeded shuffle and gradients are summed in
/// sample order.
pub fn train_captioner(
    samples: &[Sample],
    vocab: Vocabulary,
    d_e: usize,
    d_v: usize,
    cfg: &CaptionerConfig,
    seed: u64,
) -> Result<(CaptionModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut params = CaptionerParams::new_random(cfg, vocab.len(), d_e, d_v, seed)?;
    let mut log = Vec::new();
    if samples.is_empty() || cfg.epochs == 0 {
        return Ok((
            CaptionModel {
                config: cfg.clone(),
                vocab,
                d_e,
                d_v,
                seed,
                params,
            },
            log,
        ));
    }
    let batch = cfg.optim.batch_size;
    let batches = samples.len().div_ceil(batch);
    let mut optim = cfg.optim.clone();
    optim.total_steps = (cfg.epochs * batches).max(1);
    if optim.warmup_steps >= optim.total_steps {
        optim.warmup_steps = optim.total_steps / 10;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut tokens, mut norm_sum) = (0.0, 0usize, 0.0);
        let mut lr = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc = params.zeros_like_all();
            for &i in chunk {
                let (l, n, g) = sample_gradients(&params, cfg, &samples[i])?;
                if !l.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss on {} in epoch {epoch}",
                        samples[i].image_id
                    )));
                }
                loss_sum += l;
                tokens += n;
                for (a, g) in acc.iter_mut().zip(g.named()) {
                    *a += g.1;
                }
            }
            let k = 1.0 / chunk.len() as f64;
            for a in &mut acc {
                a.mapv_inplace(|v| v * k);
            }
            norm_sum += clip_gradients(&mut acc, optim.clip_norm);
            lr = lr_at_step(step.min(optim.total_steps), &optim)?;
            adam_step(&mut params.tensors_mut(), &acc, &mut state, lr, &optim)?;
            step += 1;
            if params.named().iter().any(|(_, m)| m.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence(format!("non-finite parameters after step {step}")));
            }
        }
        log.push(EpochLog {
            epoch,
            loss_per_token: loss_sum / tokens.max(1) as f64,
            grad_norm: norm_sum / batches as f64,
            lr,
        });
    }
    Ok((
        CaptionModel {
            config: cfg.clone(),
            vocab,
            d_e,
            d_v,
            seed,
            params,
        },
        log,
    ))
}

impl CaptionerParams {
    fn zeros_like_all(&self) -> Vec<Mat> {
        self.named().into_iter().map(|(_, m)| Mat::zeros(m.dim())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionHeader {
    pub config: CaptionerConfig,
    pub vocab: Vocabulary,
    pub d_e: usize,
    pub d_v: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    header: CaptionHeader,
    tensors: BTreeMap<String, TensorPayload>,
}

impl CaptionModel {
    /// Mean per-token loss over `samples`.
    pub fn loss_per_token(&self, samples: &[Sample]) -> Result<f64> {
        let (mut total, mut tokens) = (0.0, 0);
        for s in samples {
            total += sample_loss(&self.params, &self.config, s)?;
            tokens += s.target.iter().filter(|&&t| t != crate::vocab::PAD).count();
        }
        Ok(total / tokens.max(1) as f64)
    }

    pub fn generate_ids(&self, sample: &Sample, mode: DecodeMode, max_len: usize) -> Result<Vec<usize>> {
        let memory = sample_memory(&self.params, &self.config, sample)?;
        generate(&memory, &self.params.dec, &self.config.decoder, mode, max_len)
    }

    pub fn caption(&self, sample: &Sample, mode: DecodeMode, max_len: usize) -> Result<String> {
        self.vocab.decode(&self.generate_ids(sample, mode, max_len)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            header: CaptionHeader {
                config: self.config.clone(),
                vocab: self.vocab.clone(),
                d_e: self.d_e,
                d_v: self.d_v,
                seed: self.seed,
            },
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(k, m)| (k, TensorPayload::from_array(m)))
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        let h = ckpt.header;
        let mut params = CaptionerParams::new_random(&h.config, h.vocab.len(), h.d_e, h.d_v, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(k, _)| k).collect();
        if ckpt.tensors.len() != names.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.tensors.len(),
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let payload = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor {name}")))?;
            let m = payload.to_array()?;
            if m.dim() != slot.dim() {
                return Err(Error::Shape(format!(
                    "tensor {name}: stored {:?}, expected {:?}",
                    m.dim(),
                    slot.dim()
                )));
            }
            *slot = m;
        }
        Ok(CaptionModel {
            config: h.config,
            vocab: h.vocab,
            d_e: h.d_e,
            d_v: h.d_v,
            seed: h.seed,
            params,
        })
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
