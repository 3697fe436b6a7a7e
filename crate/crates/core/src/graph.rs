//! Text sub-graph, image sub-graph, and their cross-modal merge.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::codec::FeatureVec;
use crate::data::{
    ArticleAnnotations, DetectionKind, EdgeKind, EntityMention, GraphEdge, GraphNode, ImageAnnotations,
    MultiModalGraph, NodeKind,
};
use crate::error::{Error, Result};
use crate::matcher::{match_entities, EntityMatch, MatcherParams, TextCandidate, VisualCandidate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub max_objects: usize,
    pub max_faces: usize,
    pub min_score: f64,
    pub threshold: f64,
    /// Allow cross-modal edges out of RELATION nodes.
    pub link_relations: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            max_objects: 64,
            max_faces: 4,
            min_score: 0.3,
            threshold: 0.4,
            link_relations: true,
        }
    }
}

pub fn entity_node_id(mention_id: &str) -> String {
    format!("ent:{mention_id}")
}

pub fn relation_node_id(k: usize) -> String {
    format!("rel:{k:04}")
}

fn order_key(m: &EntityMention) -> (usize, usize, &str) {
    (m.char_span[0], m.char_span[1], m.id.as_str())
}

/// Maps every mention id to the earliest mention of its coreference chain.
pub fn coref_representatives(article: &ArticleAnnotations) -> Result<HashMap<String, String>> {
    let mut reps = HashMap::new();
    for chain in &article.coref_chains {
        let members: Vec<&EntityMention> = chain
            .0
            .iter()
            .map(|id| {
                article
                    .entity(id)
                    .ok_or_else(|| Error::Reference(format!("coref chain cites unknown entity id {id:?}")))
            })
            .collect::<Result<_>>()?;
        let rep = members.iter().min_by(|a, b| order_key(a).cmp(&order_key(b))).unwrap();
        for m in &members {
            reps.insert(m.id.clone(), rep.id.clone());
        }
    }
    Ok(reps)
}

/// Builds the text sub-graph.
///
/// Each triple owns a RELATION node with edges head→relation→tail. Mentions
/// of a coreference chain collapse onto its earliest mention; edges touching a
/// collapsed mention are rewired to the representative and tagged
/// `COREF_REWIRE`. Triples are processed in a canonical order so the output
/// does not depend on input ordering.
pub fn build_text_subgraph(article: &ArticleAnnotations) -> Result<MultiModalGraph> {
    let reps = coref_representatives(article)?;
    let rep_of = |id: &str| reps.get(id).map(String::as_str).unwrap_or(id).to_string();
    let mention = |id: &str| {
        article
            .entity(id)
            .ok_or_else(|| Error::Reference(format!("triple cites unknown entity id {id:?}")))
    };

    let mut triples: Vec<_> = article
        .triples
        .iter()
        .map(|t| Ok((mention(&t.head_id)?, t, mention(&t.tail_id)?)))
        .collect::<Result<_>>()?;
    triples.sort_by_cached_key(|&(h, t, x)| {
        let emb_bits: Option<Vec<u32>> = t
            .relation_embedding
            .as_ref()
            .map(|f| f.0.iter().map(|v| v.to_bits()).collect());
        (
            order_key(h),
            t.relation_span,
            t.relation_text.as_str(),
            order_key(x),
            emb_bits,
        )
    });

    let mut heads = BTreeSet::new();
    let mut entities = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut relation_nodes = Vec::new();
    for (k, (h, t, x)) in triples.iter().enumerate() {
        let head = rep_of(&h.id);
        let tail = rep_of(&x.id);
        let rel = relation_node_id(k);
        let kind_for = |orig: &str, rep: &str| {
            if orig == rep {
                EdgeKind::Triple
            } else {
                EdgeKind::CorefRewire
            }
        };
        edges.insert(GraphEdge {
            src: entity_node_id(&head),
            dst: rel.clone(),
            kind: kind_for(&h.id, &head),
        });
        edges.insert(GraphEdge {
            src: rel.clone(),
            dst: entity_node_id(&tail),
            kind: kind_for(&x.id, &tail),
        });
        heads.insert(head.clone());
        let head_m = mention(&head)?;
        let tail_m = mention(&tail)?;
        entities.insert((order_key(head_m), head.clone()));
        entities.insert((order_key(tail_m), tail.clone()));
        let feature = t
            .relation_embedding
            .clone()
            .or_else(|| mean_feature(&[head_m.embedding.as_ref(), tail_m.embedding.as_ref()]));
        relation_nodes.push(GraphNode {
            node_id: rel,
            kind: NodeKind::Relation,
            label: t.relation_text.clone(),
            feature,
            source_ref: format!("{}|{}|{}", t.head_id, t.relation_text, t.tail_id),
        });
    }

    let mut nodes: Vec<GraphNode> = entities
        .into_iter()
        .map(|(_, id)| {
            let m = article.entity(&id).expect("representative exists");
            GraphNode {
                node_id: entity_node_id(&id),
                kind: if heads.contains(&id) {
                    NodeKind::Head
                } else {
                    NodeKind::Tail
                },
                label: m.surface.clone(),
                feature: m.embedding.clone(),
                source_ref: id,
            }
        })
        .collect();
    nodes.extend(relation_nodes);
    Ok(MultiModalGraph {
        nodes,
        edges: edges.into_iter().collect(),
    })
}

fn mean_feature(parts: &[Option<&FeatureVec>]) -> Option<FeatureVec> {
    let present: Vec<&FeatureVec> = parts.iter().flatten().copied().collect();
    let first = present.first()?;
    let n = present.len() as f64;
    let mean: Vec<f64> = (0..first.len())
        .map(|j| present.iter().map(|v| f64::from(v.0[j])).sum::<f64>() / n)
        .collect();
    Some(FeatureVec::from_f64(&mean))
}

/// Score-filters, ranks, and truncates detections into OBJECT / FACE nodes.
pub fn build_image_subgraph(image: &ImageAnnotations, cfg: &GraphConfig) -> MultiModalGraph {
    let mut objects: Vec<(usize, &crate::data::Detection)> = image
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.kind == DetectionKind::Object && d.score >= cfg.min_score)
        .collect();
    let mut faces: Vec<(usize, &crate::data::Detection)> = image
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.kind == DetectionKind::Face)
        .collect();
    // stable: equal scores keep detection order
    objects.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    faces.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    objects.truncate(cfg.max_objects);
    faces.truncate(cfg.max_faces);

    let node = |prefix: &str, kind, rank: usize, (idx, d): (usize, &crate::data::Detection)| GraphNode {
        node_id: format!("{prefix}:{rank:03}"),
        kind,
        label: d.class_label.clone().unwrap_or_else(|| prefix.to_string()),
        feature: Some(d.feature.clone()),
        source_ref: format!("{}#{idx}", image.image_id),
    };
    let mut nodes: Vec<GraphNode> = objects
        .into_iter()
        .enumerate()
        .map(|(r, d)| node("obj", NodeKind::Object, r, d))
        .collect();
    nodes.extend(
        faces
            .into_iter()
            .enumerate()
            .map(|(r, d)| node("face", NodeKind::Face, r, d)),
    );
    MultiModalGraph {
        nodes,
        edges: Vec::new(),
    }
}

/// Text/visual node pairs whose matcher similarity exceeds `cfg.threshold`,
/// sorted by (text id, visual id).
pub fn cross_modal_matches(
    text: &MultiModalGraph,
    image: &MultiModalGraph,
    matcher: &MatcherParams,
    cfg: &GraphConfig,
) -> Result<Vec<EntityMatch>> {
    let text_feats: Vec<(String, Option<Vec<f64>>)> = text
        .nodes
        .iter()
        .filter(|n| n.kind.is_text())
        .filter(|n| cfg.link_relations || n.kind != NodeKind::Relation)
        .map(|n| (n.node_id.clone(), n.feature.as_ref().map(FeatureVec::to_f64)))
        .collect();
    let vis_feats: Vec<(String, Vec<f64>)> = image
        .nodes
        .iter()
        .filter(|n| n.kind.is_visual())
        .map(|n| {
            let f = n
                .feature
                .as_ref()
                .ok_or_else(|| Error::Schema(format!("visual node {} has no feature", n.node_id)))?;
            Ok((n.node_id.clone(), f.to_f64()))
        })
        .collect::<Result<_>>()?;
    let tc: Vec<TextCandidate> = text_feats
        .iter()
        .map(|(id, f)| TextCandidate {
            id,
            embedding: f.as_deref(),
        })
        .collect();
    let vc: Vec<VisualCandidate> = vis_feats
        .iter()
        .map(|(id, f)| VisualCandidate { id, feature: f })
        .collect();
    match_entities(&tc, &vc, matcher, cfg.threshold)
}

/// Unions both sub-graphs and adds a CROSS_MODAL edge for every text/visual
/// pair whose matcher similarity exceeds `cfg.threshold`.
pub fn build_mmkg(
    text: &MultiModalGraph,
    image: &MultiModalGraph,
    matcher: &MatcherParams,
    cfg: &GraphConfig,
) -> Result<MultiModalGraph> {
    let matches = cross_modal_matches(text, image, matcher, cfg)?;
    let mut nodes = text.nodes.clone();
    nodes.extend(image.nodes.iter().cloned());
    let mut edges: BTreeSet<GraphEdge> = text.edges.iter().chain(&image.edges).cloned().collect();
    edges.extend(matches.into_iter().map(|m| GraphEdge {
        src: m.text_node,
        dst: m.visual_node,
        kind: EdgeKind::CrossModal,
    }));
    let g = MultiModalGraph {
        nodes,
        edges: edges.into_iter().collect(),
    };
    g.validate()?;
    Ok(g)
}

/// Full per-(article, image) graph construction.
pub fn build_graph(
    article: &ArticleAnnotations,
    image: &ImageAnnotations,
    matcher: &MatcherParams,
    cfg: &GraphConfig,
) -> Result<MultiModalGraph> {
    let t = build_text_subgraph(article)?;
    let i = build_image_subgraph(image, cfg);
    build_mmkg(&t, &i, matcher, cfg)
}

/// Sub-graph induced by the nodes satisfying `keep`.
pub fn induced_subgraph(g: &MultiModalGraph, keep: impl Fn(&GraphNode) -> bool) -> MultiModalGraph {
    let nodes: Vec<GraphNode> = g.nodes.iter().filter(|n| keep(n)).cloned().collect();
    let ids: BTreeSet<&str> = nodes.iter().map(|n| n.node_id.as_str()).collect();
    let edges = g
        .edges
        .iter()
        .filter(|e| ids.contains(e.src.as_str()) && ids.contains(e.dst.as_str()))
        .cloned()
        .collect();
    MultiModalGraph { nodes, edges }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: BTreeMap<NodeKind, usize>,
    pub edges: BTreeMap<EdgeKind, usize>,
    pub components: usize,
}

impl GraphStats {
    pub fn node_total(&self) -> usize {
        self.nodes.values().sum()
    }

    pub fn edge_total(&self) -> usize {
        self.edges.values().sum()
    }
}

/// Counts by kind and connected components of the undirected projection.
pub fn graph_stats(g: &MultiModalGraph) -> GraphStats {
    let mut stats = GraphStats::default();
    for n in &g.nodes {
        *stats.nodes.entry(n.kind).or_default() += 1;
    }
    for e in &g.edges {
        *stats.edges.entry(e.kind).or_default() += 1;
    }
    let index = g.index();
    let mut adj = vec![Vec::new(); g.nodes.len()];
    for e in &g.edges {
        if let (Some(&a), Some(&b)) = (index.get(e.src.as_str()), index.get(e.dst.as_str())) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut seen = vec![false; g.nodes.len()];
    for start in 0..g.nodes.len() {
        if seen[start] {
            continue;
        }
        stats.components += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    stats
}
