//! Pre-norm transformer caption decoder. Each layer runs causal
//! self-attention over the caption prefix, cross-attention over the memory
//! `[text; image; graph]`, and a ReLU feed-forward block.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_at, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::vocab::{BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_caption_len: usize,
    pub max_article_len: usize,
    pub ln_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            max_caption_len: 50,
            max_article_len: 512,
            ln_eps: 1e-5,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.max_caption_len == 0 {
            return Err(Error::Config("d_ff and max_caption_len must be positive".into()));
        }
        Ok(())
    }
}

/// Which graph rows reach the memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-graph")]
    WithoutGraph,
    /// Raw object / face features in place of graph encodings.
    #[serde(rename = "image-sg")]
    ImageSubgraphOnly,
    /// Encodings of the text sub-graph alone.
    #[serde(rename = "text-sg")]
    TextSubgraphOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::WithoutGraph,
        Ablation::ImageSubgraphOnly,
        Ablation::TextSubgraphOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutGraph => "no-graph",
            Ablation::ImageSubgraphOnly => "image-sg",
            Ablation::TextSubgraphOnly => "text-sg",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation {s:?}; expected full|no-graph|image-sg|text-sg"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Text = 0,
    Image = 1,
    Graph = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub self_attn: Attention<T>,
    pub ln2_g: T,
    pub ln2_b: T,
    pub cross_attn: Attention<T>,
    pub ln3_g: T,
    pub ln3_b: T,
    pub ff_w1: T,
    pub ff_b1: T,
    pub ff_w2: T,
    pub ff_b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights<T> {
    /// V × d
    pub tok_emb: T,
    /// (max_caption_len + 1) × d, prefix positions
    pub pos_emb: T,
    /// max_article_len × d, article token positions
    pub text_pos: T,
    /// 3 × d, one row per memory segment
    pub seg_emb: T,
    /// d_e × d
    pub mem_text: T,
    /// d_v × d, shared by image rows and raw visual node features
    pub mem_image: T,
    pub layers: Vec<DecoderLayer<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
    /// d × V
    pub out_w: T,
    /// 1 × V
    pub out_b: T,
}

pub type DecoderParams = DecoderWeights<Mat>;

impl<T> Attention<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
        }
    }
}

impl<T> DecoderLayer<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderLayer<U> {
        DecoderLayer {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            self_attn: self.self_attn.map(f),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            cross_attn: self.cross_attn.map(f),
            ln3_g: f(&self.ln3_g),
            ln3_b: f(&self.ln3_b),
            ff_w1: f(&self.ff_w1),
            ff_b1: f(&self.ff_b1),
            ff_w2: f(&self.ff_w2),
            ff_b2: f(&self.ff_b2),
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &T)> {
        vec![
            (format!("{prefix}.ln1_g"), &self.ln1_g),
            (format!("{prefix}.ln1_b"), &self.ln1_b),
            (format!("{prefix}.self.wq"), &self.self_attn.wq),
            (format!("{prefix}.self.wk"), &self.self_attn.wk),
            (format!("{prefix}.self.wv"), &self.self_attn.wv),
            (format!("{prefix}.self.wo"), &self.self_attn.wo),
            (format!("{prefix}.ln2_g"), &self.ln2_g),
            (format!("{prefix}.ln2_b"), &self.ln2_b),
            (format!("{prefix}.cross.wq"), &self.cross_attn.wq),
            (format!("{prefix}.cross.wk"), &self.cross_attn.wk),
            (format!("{prefix}.cross.wv"), &self.cross_attn.wv),
            (format!("{prefix}.cross.wo"), &self.cross_attn.wo),
            (format!("{prefix}.ln3_g"), &self.ln3_g),
            (format!("{prefix}.ln3_b"), &self.ln3_b),
            (format!("{prefix}.ff_w1"), &self.ff_w1),
            (format!("{prefix}.ff_b1"), &self.ff_b1),
            (format!("{prefix}.ff_w2"), &self.ff_w2),
            (format!("{prefix}.ff_b2"), &self.ff_b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.self_attn.wq,
            &mut self.self_attn.wk,
            &mut self.self_attn.wv,
            &mut self.self_attn.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.cross_attn.wq,
            &mut self.cross_attn.wk,
            &mut self.cross_attn.wv,
            &mut self.cross_attn.wo,
            &mut self.ln3_g,
            &mut self.ln3_b,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
        ]
    }
}

impl<T> DecoderWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DecoderWeights<U> {
        DecoderWeights {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            text_pos: f(&self.text_pos),
            seg_emb: f(&self.seg_emb),
            mem_text: f(&self.mem_text),
            mem_image: f(&self.mem_image),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            lnf_g: f(&self.lnf_g),
            lnf_b: f(&self.lnf_b),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
        }
    }

    /// Tensors in a fixed order, with stable names; matches `tensors_mut`.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("dec.tok_emb".to_string(), &self.tok_emb),
            ("dec.pos_emb".to_string(), &self.pos_emb),
            ("dec.text_pos".to_string(), &self.text_pos),
            ("dec.seg_emb".to_string(), &self.seg_emb),
            ("dec.mem_text".to_string(), &self.mem_text),
            ("dec.mem_image".to_string(), &self.mem_image),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("dec.l{i}")));
        }
        out.push(("dec.lnf_g".to_string(), &self.lnf_g));
        out.push(("dec.lnf_b".to_string(), &self.lnf_b));
        out.push(("dec.out_w".to_string(), &self.out_w));
        out.push(("dec.out_b".to_string(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.text_pos,
            &mut self.seg_emb,
            &mut self.mem_text,
            &mut self.mem_image,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.out_w, &mut self.out_b]);
        out
    }
}

impl DecoderParams {
    pub fn new_random<R: Rng>(cfg: &DecoderConfig, vocab: usize, d_e: usize, d_v: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut normal = |r: usize, c: usize, std: f64| {
            let n = Normal::new(0.0, std).unwrap();
            Mat::from_shape_fn((r, c), |_| n.sample(rng))
        };
        let scaled = |fan_in: usize| 1.0 / (fan_in.max(1) as f64).sqrt();
        let tok_emb = normal(vocab, d, scaled(d));
        let pos_emb = normal(cfg.max_caption_len + 1, d, 0.1);
        let text_pos = normal(cfg.max_article_len, d, 0.1);
        let seg_emb = normal(3, d, 0.1);
        let mem_text = normal(d_e, d, scaled(d_e));
        let mem_image = normal(d_v, d, scaled(d_v));
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut attn = || Attention {
                wq: normal(d, d, scaled(d)),
                wk: normal(d, d, scaled(d)),
                wv: normal(d, d, scaled(d)),
                wo: normal(d, d, scaled(d)),
            };
            let self_attn = attn();
            let cross_attn = attn();
            layers.push(DecoderLayer {
                ln1_g: Mat::ones((1, d)),
                ln1_b: Mat::zeros((1, d)),
                self_attn,
                ln2_g: Mat::ones((1, d)),
                ln2_b: Mat::zeros((1, d)),
                cross_attn,
                ln3_g: Mat::ones((1, d)),
                ln3_b: Mat::zeros((1, d)),
                ff_w1: normal(d, cfg.d_ff, scaled(d)),
                ff_b1: Mat::zeros((1, cfg.d_ff)),
                ff_w2: normal(cfg.d_ff, d, scaled(cfg.d_ff)),
                ff_b2: Mat::zeros((1, d)),
            });
        }
        Ok(DecoderParams {
            tok_emb,
            pos_emb,
            text_pos,
            seg_emb,
            mem_text,
            mem_image,
            layers,
            lnf_g: Mat::ones((1, d)),
            lnf_b: Mat::zeros((1, d)),
            out_w: normal(d, vocab, scaled(d)),
            out_b: Mat::zeros((1, vocab)),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| Mat::zeros(m.dim()))
    }

    pub fn bind(&self, tape: &mut Tape) -> DecoderWeights<Var> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

// ---------------------------------------------------------------------------
// Memory

/// The article side of the memory: precomputed token features (L × d_e)
/// or article token ids embedded with the decoder's own table.
#[derive(Debug, Clone, PartialEq)]
pub enum ArticleInput {
    Features(Mat),
    Tokens(Vec<usize>),
}

impl ArticleInput {
    pub fn len(&self) -> usize {
        match self {
            ArticleInput::Features(m) => m.nrows(),
            ArticleInput::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph rows as they enter memory assembly on a tape.
#[derive(Debug, Clone)]
pub enum GraphRows {
    Absent,
    /// n × d_model encoder output
    Encoded(Var),
    /// n × d_v visual node features, projected like image rows
    Raw(Mat),
}

/// Assembled memory matrix plus the segment of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    pub rows: Mat,
    pub segments: Vec<Segment>,
}

impl Memory {
    /// Row counts of the text, image and graph segments.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.segments {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Everything the graph segment can be built from under any ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMemory {
    /// Encoder output per node, n × d_model.
    pub encodings: Mat,
    /// Per node, whether it belongs to the text sub-graph.
    pub is_text: Vec<bool>,
    /// Features of the object and face nodes, in node order.
    pub raw_visual: Mat,
}

fn segment_row(tape: &mut Tape, seg_emb: Var, s: Segment) -> Var {
    tape.slice_rows(seg_emb, s as usize, 1)
}

/// Builds the memory on `tape`. Returns the memory and its segment counts.
pub fn assemble_on_tape(
    tape: &mut Tape,
    w: &DecoderWeights<Var>,
    cfg: &DecoderConfig,
    article: &ArticleInput,
    image: &Mat,
    graph: GraphRows,
) -> Result<(Var, [usize; 3])> {
    let d_e = tape.shape(w.mem_text).0;
    let d_v = tape.shape(w.mem_image).0;
    let vocab = tape.shape(w.tok_emb).0;
    let mut parts = Vec::new();
    let mut counts = [0usize; 3];

    let l_t = article.len().min(cfg.max_article_len).min(tape.shape(w.text_pos).0);
    if l_t > 0 {
        let x = match article {
            ArticleInput::Features(f) => {
                if f.ncols() != d_e {
                    return Err(Error::dim("article token features", d_e, f.ncols()));
                }
                let rows = tape.leaf(f.slice(ndarray::s![..l_t, ..]).to_owned());
                tape.matmul(rows, w.mem_text)
            }
            ArticleInput::Tokens(ids) => {
                if let Some(&bad) = ids[..l_t].iter().find(|&&t| t >= vocab) {
                    return Err(Error::UnknownTokenId(bad));
                }
                tape.gather_rows(w.tok_emb, &ids[..l_t])
            }
        };
        let pos = tape.slice_rows(w.text_pos, 0, l_t);
        let x = tape.add(x, pos);
        let seg = segment_row(tape, w.seg_emb, Segment::Text);
        parts.push(tape.add_row(x, seg));
        counts[0] = l_t;
    }

    if image.nrows() > 0 {
        if image.ncols() != d_v {
            return Err(Error::dim("image region features", d_v, image.ncols()));
        }
        let rows = tape.leaf(image.clone());
        let x = tape.matmul(rows, w.mem_image);
        let seg = segment_row(tape, w.seg_emb, Segment::Image);
        parts.push(tape.add_row(x, seg));
        counts[1] = image.nrows();
    }

    let graph_part = match graph {
        GraphRows::Absent => None,
        GraphRows::Encoded(v) => {
            let (n, c) = tape.shape(v);
            if c != cfg.d_model {
                return Err(Error::dim("graph encodings", cfg.d_model, c));
            }
            (n > 0).then_some(v)
        }
        GraphRows::Raw(m) => {
            if m.nrows() == 0 {
                None
            } else {
                if m.ncols() != d_v {
                    return Err(Error::dim("visual node features", d_v, m.ncols()));
                }
                let rows = tape.leaf(m);
                Some(tape.matmul(rows, w.mem_image))
            }
        }
    };
    if let Some(g) = graph_part {
        counts[2] = tape.shape(g).0;
        let seg = segment_row(tape, w.seg_emb, Segment::Graph);
        parts.push(tape.add_row(g, seg));
    }

    if parts.is_empty() {
        return Err(Error::EmptyMemory);
    }
    Ok((tape.concat_rows(&parts), counts))
}

/// Applies the ablation to `graph` and assembles `[text; image; graph]`.
pub fn assemble_memory(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    article: &ArticleInput,
    image: &Mat,
    graph: Option<&GraphMemory>,
    ablation: Ablation,
) -> Result<Memory> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let rows = match (graph, ablation) {
        (None, _) | (_, Ablation::WithoutGraph) => GraphRows::Absent,
        (Some(g), Ablation::Full) => GraphRows::Encoded(tape.leaf(g.encodings.clone())),
        (Some(g), Ablation::ImageSubgraphOnly) => GraphRows::Raw(g.raw_visual.clone()),
        (Some(g), Ablation::TextSubgraphOnly) => {
            if g.is_text.len() != g.encodings.nrows() {
                return Err(Error::dim("graph text flags", g.encodings.nrows(), g.is_text.len()));
            }
            let keep: Vec<usize> = (0..g.is_text.len()).filter(|&i| g.is_text[i]).collect();
            let all = tape.leaf(g.encodings.clone());
            GraphRows::Encoded(tape.gather_rows(all, &keep))
        }
    };
    let (m, counts) = assemble_on_tape(&mut tape, &w, cfg, article, image, rows)?;
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

// ---------------------------------------------------------------------------
// Decoder stack

fn causal_mask(t: usize) -> Rc<Array2<bool>> {
    Rc::new(Array2::from_shape_fn((t, t), |(i, j)| j <= i))
}

fn attention(tape: &mut Tape, a: &Attention<Var>, x: Var, ctx: Var, heads: usize, mask: &Rc<Array2<bool>>) -> Var {
    let q = tape.matmul(x, a.wq);
    let k = tape.matmul(ctx, a.wk);
    let v = tape.matmul(ctx, a.wv);
    let d = tape.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let s = tape.matmul_nt(qh, kh);
        let s = tape.scale(s, scale);
        let p = tape.masked_softmax(s, mask.clone());
        outs.push(tape.matmul(p, vh));
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    tape.matmul(cat, a.wo)
}

fn check_prefix(prefix: &[usize], vocab: usize, positions: usize) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::Length { len: 0, max: positions });
    }
    if prefix.len() > positions {
        return Err(Error::Length {
            len: prefix.len(),
            max: positions,
        });
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= vocab) {
        return Err(Error::UnknownTokenId(bad));
    }
    Ok(())
}

/// Logits (T × V) for every prefix position.
pub fn logits_on_tape(
    tape: &mut Tape,
    w: &DecoderWeights<Var>,
    cfg: &DecoderConfig,
    memory: Var,
    prefix: &[usize],
) -> Result<Var> {
    check_prefix(prefix, tape.shape(w.tok_emb).0, tape.shape(w.pos_emb).0)?;
    let t = prefix.len();
    let emb = tape.gather_rows(w.tok_emb, prefix);
    let pos = tape.slice_rows(w.pos_emb, 0, t);
    let mut x = tape.add(emb, pos);
    let causal = causal_mask(t);
    let full = Rc::new(Array2::from_elem((t, tape.shape(memory).0), true));
    for l in &w.layers {
        let h = tape.layer_norm(x, l.ln1_g, l.ln1_b, cfg.ln_eps);
        let a = attention(tape, &l.self_attn, h, h, cfg.heads, &causal);
        x = tape.add(x, a);
        let h = tape.layer_norm(x, l.ln2_g, l.ln2_b, cfg.ln_eps);
        let c = attention(tape, &l.cross_attn, h, memory, cfg.heads, &full);
        x = tape.add(x, c);
        let h = tape.layer_norm(x, l.ln3_g, l.ln3_b, cfg.ln_eps);
        let f = tape.matmul(h, l.ff_w1);
        let f = tape.add_row(f, l.ff_b1);
        let f = tape.relu(f);
        let f = tape.matmul(f, l.ff_w2);
        let f = tape.add_row(f, l.ff_b2);
        x = tape.add(x, f);
    }
    let x = tape.layer_norm(x, w.lnf_g, w.lnf_b, cfg.ln_eps);
    let logits = tape.matmul(x, w.out_w);
    Ok(tape.add_row(logits, w.out_b))
}

/// Teacher-forced summed negative log-likelihood of `gold` (PAD targets
/// skipped). The prefix is `[BOS] + gold[..n-1]`, so `gold` should end in EOS.
pub fn caption_loss_on_tape(
    tape: &mut Tape,
    w: &DecoderWeights<Var>,
    cfg: &DecoderConfig,
    memory: Var,
    gold: &[usize],
) -> Result<(Var, usize)> {
    let max = cfg.max_caption_len + 1;
    if gold.len() > max {
        return Err(Error::Length { len: gold.len(), max });
    }
    if gold.is_empty() {
        return Ok((tape.leaf(Mat::zeros((1, 1))), 0));
    }
    let vocab = tape.shape(w.tok_emb).0;
    if let Some(&bad) = gold.iter().find(|&&t| t >= vocab) {
        return Err(Error::UnknownTokenId(bad));
    }
    let mut prefix = Vec::with_capacity(gold.len());
    prefix.push(BOS);
    prefix.extend_from_slice(&gold[..gold.len() - 1]);
    let logits = logits_on_tape(tape, w, cfg, memory, &prefix)?;
    let targets: Vec<Option<usize>> = gold.iter().map(|&t| (t != PAD).then_some(t)).collect();
    let counted = targets.iter().flatten().count();
    Ok((tape.cross_entropy(logits, &targets), counted))
}

/// All-position logits for a fixed memory.
pub fn decode_logits(memory: &Memory, prefix: &[usize], params: &DecoderParams, cfg: &DecoderConfig) -> Result<Mat> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let m = tape.leaf(memory.rows.clone());
    let out = logits_on_tape(&mut tape, &w, cfg, m, prefix)?;
    Ok(tape.value(out).clone())
}

/// Next-token distribution after `prefix`.
pub fn decoder_step(
    memory: &Memory,
    prefix: &[usize],
    params: &DecoderParams,
    cfg: &DecoderConfig,
) -> Result<Vec<f64>> {
    let logits = decode_logits(memory, prefix, params, cfg)?;
    let last = logits.row(logits.nrows() - 1);
    let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = last.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

#[derive(Debug, Clone)]
pub struct CaptionLoss {
    pub loss: f64,
    pub grads: DecoderParams,
    /// Gradient with respect to the memory rows.
    pub memory_grad: Mat,
}

pub fn caption_loss(
    memory: &Memory,
    gold: &[usize],
    params: &DecoderParams,
    cfg: &DecoderConfig,
) -> Result<CaptionLoss> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let m = tape.leaf(memory.rows.clone());
    let (loss, _) = caption_loss_on_tape(&mut tape, &w, cfg, m, gold)?;
    let mut g = tape.backward(&[(loss, Mat::from_elem((1, 1), 1.0))]);
    let grads = w.map(|&v| g.take_or_zeros(v, tape.shape(v)));
    let memory_grad = g.take_or_zeros(m, memory.rows.dim());
    Ok(CaptionLoss {
        loss: tape.value(loss)[[0, 0]],
        grads,
        memory_grad,
    })
}

// ---------------------------------------------------------------------------
// Search

/// Anything that yields next-token log-probabilities for a prefix
/// starting with BOS.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

pub struct DecoderScorer<'a> {
    pub params: &'a DecoderParams,
    pub cfg: &'a DecoderConfig,
    pub memory: &'a Memory,
}

impl StepScorer for DecoderScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = decode_logits(self.memory, prefix, self.params, self.cfg)?;
        let last = logits.row(logits.nrows() - 1).to_vec();
        Ok((0..last.len()).map(|t| log_softmax_at(&last, t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize, length_penalty: f64 },
}

impl DecodeMode {
    pub fn beam(width: usize) -> Self {
        DecodeMode::Beam {
            width,
            length_penalty: 0.0,
        }
    }
}

/// PAD and BOS can never be emitted.
fn allowed(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Caption tokens (without BOS / EOS) chosen greedily, lowest id on ties.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    while prefix.len() - 1 < max_len {
        let lp = scorer.log_probs(&prefix)?;
        let mut best: Option<usize> = None;
        for (t, &v) in lp.iter().enumerate() {
            if allowed(t) && best.is_none_or(|b| v > lp[b]) {
                best = Some(t);
            }
        }
        match best {
            None | Some(EOS) => break,
            Some(t) => prefix.push(t),
        }
    }
    Ok(prefix.split_off(1))
}

struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    /// generated tokens, counting a final EOS
    len: usize,
}

/// Shrinking beam search: a hypothesis that emits EOS (or reaches
/// `max_len` tokens) is set aside and the beam narrows by one. The result
/// maximises `score / len^length_penalty`, earliest-finished on ties.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &S,
    width: usize,
    length_penalty: f64,
    max_len: usize,
) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let mut live = vec![Hyp {
        tokens: vec![BOS],
        score: 0.0,
        len: 0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    if max_len == 0 {
        return Ok(Vec::new());
    }
    while !live.is_empty() && finished.len() < width {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens)?;
            for (t, &v) in lp.iter().enumerate() {
                if allowed(t) {
                    cands.push((h.score + v, b, t));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let room = width - finished.len();
        let mut next = Vec::with_capacity(room);
        for &(score, b, t) in cands.iter().take(room) {
            let parent = &live[b];
            let len = parent.len + 1;
            if t == EOS {
                finished.push(Hyp {
                    tokens: parent.tokens.clone(),
                    score,
                    len,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                let h = Hyp { tokens, score, len };
                if len >= max_len {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            }
        }
        live = next;
    }
    let norm = |h: &Hyp| {
        if length_penalty == 0.0 {
            h.score
        } else {
            h.score / (h.len.max(1) as f64).powf(length_penalty)
        }
    };
    let mut best: Option<&Hyp> = None;
    for h in finished.iter().chain(live.iter()) {
        if best.is_none_or(|b| norm(h) > norm(b)) {
            best = Some(h);
        }
    }
    Ok(best.map(|h| h.tokens[1..].to_vec()).unwrap_or_default())
}

pub fn generate_with<S: StepScorer + ?Sized>(scorer: &S, mode: DecodeMode, max_len: usize) -> Result<Vec<usize>> {
    match mode {
        DecodeMode::Greedy => greedy(scorer, max_len),
        DecodeMode::Beam { width, length_penalty } => beam_search(scorer, width, length_penalty, max_len),
    }
}

pub fn generate(
    memory: &Memory,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    mode: DecodeMode,
    max_len: usize,
) -> Result<Vec<usize>> {
    let scorer = DecoderScorer { params, cfg, memory };
    generate_with(&scorer, mode, max_len.min(cfg.max_caption_len))
}
