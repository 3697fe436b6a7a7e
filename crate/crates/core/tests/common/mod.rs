//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code under test except for plain data types.

#![allow(
    dead_code,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use mmkg_core::autodiff::Mat;
use mmkg_core::codec::FeatureVec;
use mmkg_core::data::{
    ArticleAnnotations, CorefChain, EdgeKind, EntityClass, EntityMention, GraphEdge, GraphNode, MultiModalGraph,
    NodeKind, RelationTriple,
};
use mmkg_core::decoder::{DecoderConfig, DecoderParams};
use mmkg_core::gat::GatParams;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn rand_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rand_feature(rng: &mut impl Rng, d: usize) -> FeatureVec {
    FeatureVec((0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// One verdict line on the real stdout, visible even when the harness
/// captures test output.
pub fn verdict(name: &str, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "\n{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

/// Entry-wise relative error, with a floor on the denominator so that
/// entries that are both ~0 are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central difference of `f` with respect to every entry of `m`.
pub fn numeric_grad(m: &mut Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(m.dim());
    for idx in 0..m.len() {
        let (r, c) = (idx / m.ncols(), idx % m.ncols());
        let orig = m[[r, c]];
        m[[r, c]] = orig + h;
        let up = f(m);
        m[[r, c]] = orig - h;
        let down = f(m);
        m[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `w` (rows × cols) times `x` (cols).
pub fn mat_vec(w: &Mat, x: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|r| {
            let mut s = 0.0;
            for c in 0..w.ncols() {
                s += w[[r, c]] * x[c];
            }
            s
        })
        .collect()
}

/// `x` (rows of `w`) times `w`, i.e. a row vector through a right-multiplied matrix.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.ncols())
        .map(|c| {
            let mut s = 0.0;
            for r in 0..w.nrows() {
                s += x[r] * w[[r, c]];
            }
            s
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

// ---------------------------------------------------------------------------
// Text sub-graph

const SURFACES: [&str; 6] = ["Alonso", "Toyota", "Hamilton", "Paris", "Merkel", "Apple"];
const RELATIONS: [&str; 5] = ["won", "met", "visited", "joined", "thanked"];

/// Random annotations with up to `max_triples` triples and `max_chains`
/// disjoint coreference chains. When `dangling` is set, one triple cites a
/// mention id that does not exist.
pub fn random_article(
    rng: &mut ChaCha8Rng,
    max_triples: usize,
    max_chains: usize,
    dangling: bool,
) -> ArticleAnnotations {
    let n = rng.random_range(1..=24usize);
    let entities: Vec<EntityMention> = (0..n)
        .map(|i| {
            // small start range so span ties (and their tie-breaks) occur
            let start = rng.random_range(0..40usize);
            EntityMention {
                id: format!("m{i}"),
                surface: SURFACES[rng.random_range(0..SURFACES.len())].to_string(),
                entity_class: EntityClass::Person,
                char_span: [start, start + rng.random_range(1..4usize)],
                wiki_id: None,
                embedding: rng.random_bool(0.8).then(|| rand_feature(rng, 4)),
            }
        })
        .collect();
    let mut triples: Vec<RelationTriple> = (0..rng.random_range(0..=max_triples))
        .map(|_| {
            let s = rng.random_range(0..60usize);
            RelationTriple {
                head_id: format!("m{}", rng.random_range(0..n)),
                relation_text: RELATIONS[rng.random_range(0..RELATIONS.len())].to_string(),
                relation_span: [s, s + 3],
                tail_id: format!("m{}", rng.random_range(0..n)),
                relation_embedding: rng.random_bool(0.3).then(|| rand_feature(rng, 4)),
            }
        })
        .collect();
    if dangling {
        triples.push(RelationTriple {
            head_id: "m0".into(),
            relation_text: "won".into(),
            relation_span: [0, 3],
            tail_id: "missing".into(),
            relation_embedding: None,
        });
    }
    let mut ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
    ids.shuffle(rng);
    let mut chains = Vec::new();
    let mut rest = &ids[..];
    for _ in 0..rng.random_range(0..=max_chains) {
        if rest.len() < 2 {
            break;
        }
        let k = rng.random_range(2..=rest.len().min(5));
        chains.push(CorefChain(rest[..k].to_vec()));
        rest = &rest[k..];
    }
    ArticleAnnotations {
        article_id: "a".into(),
        text: String::new(),
        entities,
        triples,
        coref_chains: chains,
        token_features: None,
    }
}

/// Same annotations with every list shuffled.
pub fn shuffled_article(a: &ArticleAnnotations, rng: &mut ChaCha8Rng) -> ArticleAnnotations {
    let mut b = a.clone();
    b.entities.shuffle(rng);
    b.triples.shuffle(rng);
    b.coref_chains.shuffle(rng);
    for c in &mut b.coref_chains {
        c.0.shuffle(rng);
    }
    b
}

/// A relation node seen from outside: label, provenance, endpoints and the
/// kinds of its two edges.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RelationView {
    pub label: String,
    pub source_ref: String,
    pub head: String,
    pub tail: String,
    pub in_kind: EdgeKind,
    pub out_kind: EdgeKind,
    pub feature: Option<Vec<u32>>,
}

/// Text sub-graph up to the naming of relation nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextGraphView {
    /// (node id, kind, label, feature bits)
    pub entities: BTreeSet<(String, NodeKind, String, Option<Vec<u32>>)>,
    pub relations: Vec<RelationView>,
    pub edge_count: usize,
}

fn bits(f: &Option<FeatureVec>) -> Option<Vec<u32>> {
    f.as_ref().map(|v| v.0.iter().map(|x| x.to_bits()).collect())
}

pub fn view_of(g: &MultiModalGraph) -> TextGraphView {
    let kinds: HashMap<&str, NodeKind> = g.nodes.iter().map(|n| (n.node_id.as_str(), n.kind)).collect();
    let entities = g
        .nodes
        .iter()
        .filter(|n| n.kind != NodeKind::Relation)
        .map(|n| (n.node_id.clone(), n.kind, n.label.clone(), bits(&n.feature)))
        .collect();
    let mut relations: Vec<RelationView> = g
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Relation)
        .map(|n| {
            let ins: Vec<&GraphEdge> = g.edges.iter().filter(|e| e.dst == n.node_id).collect();
            let outs: Vec<&GraphEdge> = g.edges.iter().filter(|e| e.src == n.node_id).collect();
            assert_eq!(ins.len(), 1, "relation {} in-degree", n.node_id);
            assert_eq!(outs.len(), 1, "relation {} out-degree", n.node_id);
            assert_ne!(kinds[ins[0].src.as_str()], NodeKind::Relation);
            RelationView {
                label: n.label.clone(),
                source_ref: n.source_ref.clone(),
                head: ins[0].src.clone(),
                tail: outs[0].dst.clone(),
                in_kind: ins[0].kind,
                out_kind: outs[0].kind,
                feature: bits(&n.feature),
            }
        })
        .collect();
    relations.sort();
    TextGraphView {
        entities,
        relations,
        edge_count: g.edges.len(),
    }
}

/// Brute-force construction straight from the rules: every triple owns a
/// relation node; a chain keeps only its earliest mention (start, then end,
/// then id) and edges touching the others move to it.
pub fn reference_text_graph(a: &ArticleAnnotations) -> Result<TextGraphView, String> {
    let find = |id: &str| a.entities.iter().find(|e| e.id == id);
    let mut rep: HashMap<String, String> = HashMap::new();
    for chain in &a.coref_chains {
        let mut best: Option<&EntityMention> = None;
        for id in &chain.0 {
            let m = find(id).ok_or(format!("chain member {id} missing"))?;
            let better = match best {
                None => true,
                Some(b) => {
                    m.char_span[0] < b.char_span[0]
                        || (m.char_span[0] == b.char_span[0] && m.char_span[1] < b.char_span[1])
                        || (m.char_span == b.char_span && m.id < b.id)
                }
            };
            if better {
                best = Some(m);
            }
        }
        for id in &chain.0 {
            rep.insert(id.clone(), best.unwrap().id.clone());
        }
    }
    let rep_of = |id: &str| rep.get(id).cloned().unwrap_or_else(|| id.to_string());
    for t in &a.triples {
        for id in [&t.head_id, &t.tail_id] {
            if find(id).is_none() {
                return Err(format!("triple cites {id}"));
            }
        }
    }
    let head_reps: BTreeSet<String> = a.triples.iter().map(|t| rep_of(&t.head_id)).collect();
    let mut entities = BTreeSet::new();
    let mut relations = Vec::new();
    for t in &a.triples {
        let (h, x) = (rep_of(&t.head_id), rep_of(&t.tail_id));
        for r in [&h, &x] {
            let m = find(r).unwrap();
            let kind = if head_reps.contains(r) {
                NodeKind::Head
            } else {
                NodeKind::Tail
            };
            entities.insert((format!("ent:{r}"), kind, m.surface.clone(), bits(&m.embedding)));
        }
        let feature = match &t.relation_embedding {
            Some(f) => Some(f.clone()),
            None => {
                let present: Vec<Vec<f64>> = [find(&h).unwrap(), find(&x).unwrap()]
                    .iter()
                    .filter_map(|m| m.embedding.as_ref().map(|e| e.to_f64()))
                    .collect();
                if present.is_empty() {
                    None
                } else {
                    let n = present.len() as f64;
                    let mean: Vec<f64> = (0..present[0].len())
                        .map(|j| present.iter().map(|v| v[j]).sum::<f64>() / n)
                        .collect();
                    Some(FeatureVec::from_f64(&mean))
                }
            }
        };
        let kind = |orig: &str, r: &str| {
            if orig == r {
                EdgeKind::Triple
            } else {
                EdgeKind::CorefRewire
            }
        };
        relations.push(RelationView {
            label: t.relation_text.clone(),
            source_ref: format!("{}|{}|{}", t.head_id, t.relation_text, t.tail_id),
            head: format!("ent:{h}"),
            tail: format!("ent:{x}"),
            in_kind: kind(&t.head_id, &h),
            out_kind: kind(&t.tail_id, &x),
            feature: bits(&feature),
        });
    }
    relations.sort();
    let edge_count = 2 * relations.len();
    Ok(TextGraphView {
        entities,
        relations,
        edge_count,
    })
}

// ---------------------------------------------------------------------------
// Graphs for the encoder

/// `n` nodes, two text nodes per visual node, each ordered pair linked with
/// probability `p_edge`. Text→text edges are TRIPLE, text→visual CROSS_MODAL;
/// no edges leave visual nodes, as in built graphs.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d_e: usize, d_v: usize, p_edge: f64) -> MultiModalGraph {
    let nodes: Vec<GraphNode> = (0..n)
        .map(|i| {
            let text = i % 3 != 2;
            GraphNode {
                node_id: format!("n{i:02}"),
                kind: if text { NodeKind::Head } else { NodeKind::Face },
                label: String::new(),
                feature: Some(rand_feature(rng, if text { d_e } else { d_v })),
                source_ref: String::new(),
            }
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (ti, tj) = (nodes[i].kind.is_text(), nodes[j].kind.is_text());
            if i != j && ti && rng.random_bool(p_edge) {
                edges.push(GraphEdge {
                    src: nodes[i].node_id.clone(),
                    dst: nodes[j].node_id.clone(),
                    kind: if tj { EdgeKind::Triple } else { EdgeKind::CrossModal },
                });
            }
        }
    }
    MultiModalGraph { nodes, edges }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Neighbourhood of `i`: itself plus every source of an edge into `i`.
pub fn in_neighbours(g: &MultiModalGraph, i: usize) -> BTreeSet<usize> {
    let idx: HashMap<&str, usize> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(k, n)| (n.node_id.as_str(), k))
        .collect();
    let mut out = BTreeSet::from([i]);
    for e in &g.edges {
        if idx[e.dst.as_str()] == i {
            out.insert(idx[e.src.as_str()]);
        }
    }
    out
}

/// One attention layer with explicit loops over heads, nodes and
/// neighbours. Returns per-head outputs and per-head coefficient maps.
pub fn slow_gat_layer(
    x: &[Vec<f64>],
    w: &[Mat],
    a: &[Mat],
    neigh: &[BTreeSet<usize>],
    slope: f64,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<BTreeMap<usize, f64>>>) {
    let mut outs = Vec::new();
    let mut alphas = Vec::new();
    for h in 0..w.len() {
        let wh: Vec<Vec<f64>> = x.iter().map(|row| vec_mat(row, &w[h])).collect();
        let d = w[h].ncols();
        let av: Vec<f64> = a[h].iter().copied().collect();
        let (a_t, a_s) = av.split_at(d);
        let mut head_out = Vec::new();
        let mut head_alpha = Vec::new();
        for i in 0..x.len() {
            let scores: BTreeMap<usize, f64> = neigh[i]
                .iter()
                .map(|&j| (j, leaky(dot(a_t, &wh[i]) + dot(a_s, &wh[j]), slope)))
                .collect();
            let max = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.values().map(|s| (s - max).exp()).sum();
            let alpha: BTreeMap<usize, f64> = scores.iter().map(|(&j, s)| (j, (s - max).exp() / z)).collect();
            let mut o = vec![0.0; d];
            for (&j, &al) in &alpha {
                for k in 0..d {
                    o[k] += al * wh[j][k];
                }
            }
            head_out.push(o);
            head_alpha.push(alpha);
        }
        outs.push(head_out);
        alphas.push(head_alpha);
    }
    (outs, alphas)
}

/// Slow two-layer encoder: modality projection, concatenated heads with
/// ELU, then averaged heads.
pub fn slow_gat(g: &MultiModalGraph, p: &GatParams, slope: f64) -> Vec<Vec<f64>> {
    let n = g.nodes.len();
    let x0: Vec<Vec<f64>> = g
        .nodes
        .iter()
        .map(|node| {
            let f = node.feature.as_ref().unwrap().to_f64();
            vec_mat(&f, if node.kind.is_text() { &p.p_text } else { &p.p_visual })
        })
        .collect();
    let neigh: Vec<BTreeSet<usize>> = (0..n).map(|i| in_neighbours(g, i)).collect();
    let (h1, _) = slow_gat_layer(&x0, &p.layer1.w, &p.layer1.a, &neigh, slope);
    let x1: Vec<Vec<f64>> = (0..n)
        .map(|i| h1.iter().flat_map(|head| head[i].iter().map(|&v| elu(v))).collect())
        .collect();
    let (h2, _) = slow_gat_layer(&x1, &p.layer2.w, &p.layer2.a, &neigh, slope);
    let heads = h2.len() as f64;
    (0..n)
        .map(|i| {
            let d = h2[0][i].len();
            (0..d)
                .map(|k| h2.iter().map(|head| head[i][k]).sum::<f64>() / heads)
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Decoder

fn layer_norm(x: &[f64], g: &Mat, b: &Mat, eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * g[[0, j]] + b[[0, j]])
        .collect()
}

/// Multi-head attention of `queries` over `keys`, with `visible(i, j)`
/// deciding which keys query `i` may look at.
fn slow_attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    wo: &Mat,
    heads: usize,
    visible: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let d = wq.ncols();
    let dh = d / heads;
    let q: Vec<Vec<f64>> = queries.iter().map(|r| vec_mat(r, wq)).collect();
    let k: Vec<Vec<f64>> = keys.iter().map(|r| vec_mat(r, wk)).collect();
    let v: Vec<Vec<f64>> = keys.iter().map(|r| vec_mat(r, wv)).collect();
    let mut out = Vec::new();
    for i in 0..queries.len() {
        let mut cat = vec![0.0; d];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let mut scores = Vec::new();
            for j in 0..keys.len() {
                if visible(i, j) {
                    let s = dot(&q[i][span.clone()], &k[j][span.clone()]) / (dh as f64).sqrt();
                    scores.push((j, s));
                }
            }
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            for (j, s) in scores {
                let p = (s - max).exp() / z;
                for c in span.clone() {
                    cat[c] += p * v[j][c];
                }
            }
        }
        out.push(vec_mat(&cat, wo));
    }
    out
}

/// Logits for every prefix position, computed row by row.
pub fn slow_decoder_logits(p: &DecoderParams, cfg: &DecoderConfig, memory: &Mat, prefix: &[usize]) -> Vec<Vec<f64>> {
    let mem: Vec<Vec<f64>> = memory.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut x: Vec<Vec<f64>> = prefix
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..cfg.d_model)
                .map(|j| p.tok_emb[[id, j]] + p.pos_emb[[t, j]])
                .collect()
        })
        .collect();
    let add = |x: &mut Vec<Vec<f64>>, y: Vec<Vec<f64>>| {
        for (a, b) in x.iter_mut().zip(y) {
            for (u, v) in a.iter_mut().zip(b) {
                *u += v;
            }
        }
    };
    for l in &p.layers {
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &l.ln1_g, &l.ln1_b, cfg.ln_eps))
            .collect();
        let a = &l.self_attn;
        let s = slow_attention(&h, &h, &a.wq, &a.wk, &a.wv, &a.wo, cfg.heads, |i, j| j <= i);
        add(&mut x, s);
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &l.ln2_g, &l.ln2_b, cfg.ln_eps))
            .collect();
        let a = &l.cross_attn;
        let c = slow_attention(&h, &mem, &a.wq, &a.wk, &a.wv, &a.wo, cfg.heads, |_, _| true);
        add(&mut x, c);
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &l.ln3_g, &l.ln3_b, cfg.ln_eps))
            .collect();
        let f: Vec<Vec<f64>> = h
            .iter()
            .map(|r| {
                let hidden: Vec<f64> = vec_mat(r, &l.ff_w1)
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (v + l.ff_b1[[0, j]]).max(0.0))
                    .collect();
                vec_mat(&hidden, &l.ff_w2)
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v + l.ff_b2[[0, j]])
                    .collect()
            })
            .collect();
        add(&mut x, f);
    }
    x.iter()
        .map(|r| {
            let h = layer_norm(r, &p.lnf_g, &p.lnf_b, cfg.ln_eps);
            vec_mat(&h, &p.out_w)
                .iter()
                .enumerate()
                .map(|(j, v)| v + p.out_b[[0, j]])
                .collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

// ---------------------------------------------------------------------------
// Matcher

/// Hinge loss with every negative enumerated explicitly.
pub fn enumerated_margin_loss(entities: &Mat, images: &Mat, w_e: &Mat, w_v: &Mat, delta: f64) -> f64 {
    let b = entities.nrows();
    let pe: Vec<Vec<f64>> = (0..b).map(|i| mat_vec(w_e, &entities.row(i).to_vec())).collect();
    let pv: Vec<Vec<f64>> = (0..b).map(|i| mat_vec(w_v, &images.row(i).to_vec())).collect();
    let sim = |i: usize, j: usize| cosine(&pe[i], &pv[j]);
    let mut total = 0.0;
    for i in 0..b {
        let pos = sim(i, i);
        let mut worst_entity = f64::NEG_INFINITY;
        let mut worst_image = f64::NEG_INFINITY;
        for j in 0..b {
            if j != i {
                worst_entity = worst_entity.max(delta + sim(j, i) - pos);
                worst_image = worst_image.max(delta + sim(i, j) - pos);
            }
        }
        total += worst_entity.max(0.0) + worst_image.max(0.0);
    }
    total / b as f64
}

// ---------------------------------------------------------------------------
// CIDEr-D

fn grams(tokens: &[String], n: usize) -> HashMap<Vec<String>, f64> {
    let mut out = HashMap::new();
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
    }
    out
}

/// CIDEr-D as the community scorer computes it: document frequencies over
/// each image's reference set, log(#images) as the idf numerator, clipped
/// tf-idf products, a Gaussian penalty (σ = 6) on the difference in bigram
/// counts, mean over n = 1..4 and references, times ten.
pub fn reference_cider(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for rs in refs {
        let mut seen = BTreeSet::new();
        for r in rs {
            for n in 1..=4 {
                seen.extend(grams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (refs.len() as f64).ln();
    let vec = |tokens: &[String]| {
        let mut v = Vec::new();
        let mut norm = Vec::new();
        for n in 1..=4 {
            let tf = grams(tokens, n);
            let w: HashMap<Vec<String>, f64> = tf
                .into_iter()
                .map(|(g, c)| {
                    let idf = log_n - df.get(&g).copied().unwrap_or(0.0).max(1.0).ln();
                    (g, c * idf)
                })
                .collect();
            norm.push(w.values().map(|x| x * x).sum::<f64>().sqrt());
            v.push(w);
        }
        let bigrams = tokens.len().saturating_sub(1) as f64;
        (v, norm, bigrams)
    };
    hyps.iter()
        .zip(refs)
        .map(|(h, rs)| {
            let (vh, nh, lh) = vec(h);
            let mut acc = 0.0;
            for r in rs {
                let (vr, nr, lr) = vec(r);
                for n in 0..4 {
                    let mut val = 0.0;
                    for (g, &x) in &vh[n] {
                        let y = vr[n].get(g).copied().unwrap_or(0.0);
                        val += x.min(y) * y;
                    }
                    if nh[n] != 0.0 && nr[n] != 0.0 {
                        val /= nh[n] * nr[n];
                    }
                    acc += val * (-(lh - lr).powi(2) / (2.0 * 36.0)).exp();
                }
            }
            acc / 4.0 / rs.len() as f64 * 10.0
        })
        .collect()
}
