//! Two-layer graph attention encoder over the multi-modal graph.
//!
//! Node `i` attends over its in-neighbours (sources of edges `j → i`) plus
//! itself. Layer 1 concatenates `H` heads and applies ELU; layer 2 averages
//! `H` heads of width `d_model`.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::MultiModalGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub heads: usize,
    pub leaky_slope: f64,
    /// Also pass messages against edge direction.
    pub add_reverse_edges: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            heads: 4,
            leaky_slope: 0.2,
            add_reverse_edges: false,
        }
    }
}

/// Per-head projection `w[h]` (d_in × d_out) and attention vector `a[h]`
/// (1 × 2·d_out, target half first).
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer<T> {
    pub w: Vec<T>,
    pub a: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatWeights<T> {
    /// d_e × d_model
    pub p_text: T,
    /// d_v × d_model
    pub p_visual: T,
    pub layer1: GatLayer<T>,
    pub layer2: GatLayer<T>,
}

pub type GatParams = GatWeights<Mat>;

impl<T> GatWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GatWeights<U> {
        let mut layer = |l: &GatLayer<T>| GatLayer {
            w: l.w.iter().map(&mut f).collect(),
            a: l.a.iter().map(&mut f).collect(),
        };
        let layer1 = layer(&self.layer1);
        let layer2 = layer(&self.layer2);
        GatWeights {
            p_text: f(&self.p_text),
            p_visual: f(&self.p_visual),
            layer1,
            layer2,
        }
    }

    pub fn heads(&self) -> usize {
        self.layer1.w.len()
    }

    /// Tensors in a fixed order, with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("gat.p_text".to_string(), &self.p_text),
            ("gat.p_visual".to_string(), &self.p_visual),
        ];
        for (li, l) in [&self.layer1, &self.layer2].into_iter().enumerate() {
            for (h, (w, a)) in l.w.iter().zip(&l.a).enumerate() {
                out.push((format!("gat.l{}.h{h}.w", li + 1), w));
                out.push((format!("gat.l{}.h{h}.a", li + 1), a));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.p_text, &mut self.p_visual];
        for l in [&mut self.layer1, &mut self.layer2] {
            for (w, a) in l.w.iter_mut().zip(l.a.iter_mut()) {
                out.push(w);
                out.push(a);
            }
        }
        out
    }
}

impl GatParams {
    pub fn new_random<R: Rng>(cfg: &GatConfig, d_e: usize, d_v: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        let h = cfg.heads;
        if h == 0 || !d_model.is_multiple_of(h) {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of heads {h}"
            )));
        }
        let d1 = d_model / h;
        let mut init = |r: usize, c: usize, fan_in: usize| {
            let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            Mat::from_shape_fn((r, c), |_| n.sample(rng))
        };
        let p_text = init(d_e, d_model, d_e);
        let p_visual = init(d_v, d_model, d_v);
        let mut layer = |d_in: usize, d_out: usize| GatLayer {
            w: (0..h).map(|_| init(d_in, d_out, d_in)).collect(),
            a: (0..h).map(|_| init(1, 2 * d_out, d_out)).collect(),
        };
        let layer1 = layer(d_model, d1);
        let layer2 = layer(d_model, d_model);
        Ok(GatParams {
            p_text,
            p_visual,
            layer1,
            layer2,
        })
    }

    pub fn d_model(&self) -> usize {
        self.p_text.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| Mat::zeros(m.dim()))
    }

    pub fn bind(&self, tape: &mut Tape) -> GatWeights<Var> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEncoding {
    pub node_id: String,
    pub vector: Vec<f64>,
}

/// Attention mask: `mask[i][j]` iff `j == i` or there is an edge `j → i`.
pub fn adjacency(graph: &MultiModalGraph, add_reverse: bool) -> Array2<bool> {
    let n = graph.nodes.len();
    let index = graph.index();
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        mask[[i, i]] = true;
    }
    for e in &graph.edges {
        if let (Some(&s), Some(&d)) = (index.get(e.src.as_str()), index.get(e.dst.as_str())) {
            mask[[d, s]] = true;
            if add_reverse {
                mask[[s, d]] = true;
            }
        }
    }
    mask
}

/// Node features grouped by modality, remembering node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    pub text: Mat,
    pub visual: Mat,
    /// For node `k`, its row in `[text; visual]`.
    pub order: Vec<usize>,
    pub mask: Array2<bool>,
}

impl GraphInputs {
    pub fn from_graph(graph: &MultiModalGraph, d_e: usize, d_v: usize, add_reverse: bool) -> Result<Self> {
        let mut text = Vec::new();
        let mut visual = Vec::new();
        let mut slots = Vec::with_capacity(graph.nodes.len());
        for n in &graph.nodes {
            let f = n.feature.as_ref().ok_or_else(|| {
                Error::dim(
                    format!("feature of node {}", n.node_id),
                    if n.kind.is_text() { d_e } else { d_v },
                    0,
                )
            })?;
            let (dim, bucket, is_text) = if n.kind.is_text() {
                (d_e, &mut text, true)
            } else {
                (d_v, &mut visual, false)
            };
            if f.len() != dim {
                return Err(Error::dim(format!("feature of node {}", n.node_id), dim, f.len()));
            }
            slots.push((is_text, bucket.len() / dim.max(1)));
            bucket.extend(f.to_f64());
        }
        let n_text = text.len() / d_e.max(1);
        let n_vis = visual.len() / d_v.max(1);
        let order = slots
            .into_iter()
            .map(|(is_text, k)| if is_text { k } else { n_text + k })
            .collect();
        Ok(GraphInputs {
            text: Mat::from_shape_vec((n_text, d_e), text).map_err(|e| Error::Shape(e.to_string()))?,
            visual: Mat::from_shape_vec((n_vis, d_v), visual).map_err(|e| Error::Shape(e.to_string()))?,
            order,
            mask: adjacency(graph, add_reverse),
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Projects modality features to `d_model` and restores node order.
pub fn project_on_tape(tape: &mut Tape, w: &GatWeights<Var>, inputs: &GraphInputs) -> Var {
    let t = tape.leaf(inputs.text.clone());
    let v = tape.leaf(inputs.visual.clone());
    let pt = tape.matmul(t, w.p_text);
    let pv = tape.matmul(v, w.p_visual);
    let stacked = tape.concat_rows(&[pt, pv]);
    tape.gather_rows(stacked, &inputs.order)
}

fn head_attention(tape: &mut Tape, x: Var, w: Var, a: Var, mask: &Rc<Array2<bool>>, slope: f64) -> (Var, Var) {
    let wh = tape.matmul(x, w);
    let d = tape.shape(wh).1;
    let a_target = tape.slice_cols(a, 0, d);
    let a_source = tape.slice_cols(a, d, d);
    let s_t = tape.matmul_nt(wh, a_target);
    let s_s = tape.matmul_nt(a_source, wh);
    let e = tape.outer_sum(s_t, s_s);
    let e = tape.leaky_relu(e, slope);
    let alpha = tape.masked_softmax(e, mask.clone());
    (alpha, wh)
}

/// Attention matrices of one layer (one per head) and the layer output.
pub fn layer_on_tape(
    tape: &mut Tape,
    layer: &GatLayer<Var>,
    x: Var,
    mask: &Rc<Array2<bool>>,
    slope: f64,
    concat: bool,
) -> (Vec<Var>, Var) {
    let mut alphas = Vec::new();
    let mut outs = Vec::new();
    for (&w, &a) in layer.w.iter().zip(&layer.a) {
        let (alpha, wh) = head_attention(tape, x, w, a, mask, slope);
        outs.push(tape.matmul(alpha, wh));
        alphas.push(alpha);
    }
    let out = if concat {
        let c = tape.concat_cols(&outs);
        tape.elu(c)
    } else {
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = tape.add(acc, o);
        }
        tape.scale(acc, 1.0 / outs.len() as f64)
    };
    (alphas, out)
}

/// Full encoder on a tape; returns the `n × d_model` encodings.
pub fn encode_on_tape(tape: &mut Tape, w: &GatWeights<Var>, inputs: &GraphInputs, slope: f64) -> Var {
    let x0 = project_on_tape(tape, w, inputs);
    let mask = Rc::new(inputs.mask.clone());
    let (_, h1) = layer_on_tape(tape, &w.layer1, x0, &mask, slope, true);
    let (_, h2) = layer_on_tape(tape, &w.layer2, h1, &mask, slope, false);
    h2
}

fn check_params(params: &GatParams, cfg: &GatConfig) -> Result<()> {
    if params.heads() == 0 || params.layer2.w.len() != params.heads() {
        return Err(Error::Config("GAT needs at least one head in both layers".into()));
    }
    if !(cfg.leaky_slope.is_finite()) {
        return Err(Error::Config("leaky slope must be finite".into()));
    }
    Ok(())
}

/// Initial node features (`n × d_model`) in graph node order.
pub fn project_inputs(graph: &MultiModalGraph, params: &GatParams) -> Result<Mat> {
    let inputs = GraphInputs::from_graph(graph, params.p_text.nrows(), params.p_visual.nrows(), false)?;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let x = project_on_tape(&mut tape, &w, &inputs);
    Ok(tape.value(x).clone())
}

/// Row-stochastic attention matrix of each head of `layer` for `features`.
pub fn attention_coefficients(layer: &GatLayer<Mat>, features: &Mat, mask: &Array2<bool>, slope: f64) -> Vec<Mat> {
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let l = GatLayer {
        w: layer.w.iter().map(|m| tape.leaf(m.clone())).collect(),
        a: layer.a.iter().map(|m| tape.leaf(m.clone())).collect(),
    };
    let mask = Rc::new(mask.clone());
    let (alphas, _) = layer_on_tape(&mut tape, &l, x, &mask, slope, true);
    alphas.into_iter().map(|a| tape.value(a).clone()).collect()
}

pub fn gat_forward(graph: &MultiModalGraph, params: &GatParams, cfg: &GatConfig) -> Result<Vec<NodeEncoding>> {
    check_params(params, cfg)?;
    if graph.nodes.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = GraphInputs::from_graph(
        graph,
        params.p_text.nrows(),
        params.p_visual.nrows(),
        cfg.add_reverse_edges,
    )?;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let out = encode_on_tape(&mut tape, &w, &inputs, cfg.leaky_slope);
    let values = tape.value(out);
    Ok(graph
        .nodes
        .iter()
        .zip(values.rows())
        .map(|(n, row)| NodeEncoding {
            node_id: n.node_id.clone(),
            vector: row.to_vec(),
        })
        .collect())
}

/// Parameter gradients of `sum(upstream ⊙ encodings)`.
pub fn gat_backward(graph: &MultiModalGraph, params: &GatParams, cfg: &GatConfig, upstream: &Mat) -> Result<GatParams> {
    check_params(params, cfg)?;
    if graph.nodes.is_empty() {
        return Ok(params.zeros_like());
    }
    let inputs = GraphInputs::from_graph(
        graph,
        params.p_text.nrows(),
        params.p_visual.nrows(),
        cfg.add_reverse_edges,
    )?;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let out = encode_on_tape(&mut tape, &w, &inputs, cfg.leaky_slope);
    if tape.shape(out) != upstream.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match encodings {:?}",
            upstream.dim(),
            tape.shape(out)
        )));
    }
    let mut grads = tape.backward(&[(out, upstream.clone())]);
    Ok(w.map(|&v| grads.take_or_zeros(v, tape.shape(v))))
}
