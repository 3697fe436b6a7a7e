//! Annotation records, graph schema, and their validating loaders.
//!
//! Spans are byte offsets into the article text. Feature vectors are
//! base64 `f32` (see [`crate::codec`]). Every loader either returns a fully
//! validated value or a typed error.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{FeatureMatrix, FeatureVec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub d_e: usize,
    pub d_v: usize,
    pub max_article_len: usize,
    pub max_caption_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            d_e: 1024,
            d_v: 2048,
            max_article_len: 512,
            max_caption_len: 50,
        }
    }
}

impl DataConfig {
    pub fn desk(d_e: usize, d_v: usize) -> Self {
        DataConfig {
            d_e,
            d_v,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityClass {
    Person,
    Org,
    Facility,
    Artifact,
    Gpe,
    Date,
    Other,
}

impl EntityClass {
    pub fn label(self) -> &'static str {
        match self {
            EntityClass::Person => "PERSON",
            EntityClass::Org => "ORG",
            EntityClass::Facility => "FACILITY",
            EntityClass::Artifact => "ARTIFACT",
            EntityClass::Gpe => "GPE",
            EntityClass::Date => "DATE",
            EntityClass::Other => "OTHER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub id: String,
    pub surface: String,
    pub entity_class: EntityClass,
    pub char_span: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wiki_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<FeatureVec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTriple {
    pub head_id: String,
    pub relation_text: String,
    pub relation_span: [usize; 2],
    pub tail_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_embedding: Option<FeatureVec>,
}

/// Mention ids referring to one entity, ordered by span start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorefChain(pub Vec<String>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleAnnotations {
    pub article_id: String,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub triples: Vec<RelationTriple>,
    #[serde(default)]
    pub coref_chains: Vec<CorefChain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_features: Option<FeatureMatrix>,
}

impl ArticleAnnotations {
    pub fn entity(&self, id: &str) -> Option<&EntityMention> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entities {
            let [s, t] = e.char_span;
            if s >= t {
                return Err(Error::Schema(format!(
                    "entity {}: span start {s} must precede end {t}",
                    e.id
                )));
            }
            if t > self.text.len() {
                return Err(Error::Schema(format!(
                    "entity {}: span end {t} beyond text of {} bytes",
                    e.id,
                    self.text.len()
                )));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Schema(format!("duplicate entity id {}", e.id)));
            }
            if let Some(emb) = &e.embedding {
                check_vec(&format!("embedding of entity {}", e.id), emb, cfg.d_e)?;
            }
        }
        for (k, t) in self.triples.iter().enumerate() {
            for id in [&t.head_id, &t.tail_id] {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Reference(format!("triple {k} cites unknown entity id {id:?}")));
                }
            }
            if t.head_id == t.tail_id {
                return Err(Error::Schema(format!(
                    "triple {k}: head and tail are both {}",
                    t.head_id
                )));
            }
            if t.relation_text.trim().is_empty() {
                return Err(Error::Schema(format!("triple {k}: empty relation text")));
            }
            if let Some(emb) = &t.relation_embedding {
                check_vec(&format!("relation embedding of triple {k}"), emb, cfg.d_e)?;
            }
        }
        let spans: HashMap<&str, [usize; 2]> = self.entities.iter().map(|e| (e.id.as_str(), e.char_span)).collect();
        let mut chained = HashSet::new();
        for (k, chain) in self.coref_chains.iter().enumerate() {
            if chain.0.len() < 2 {
                return Err(Error::Schema(format!("coref chain {k} has fewer than 2 mentions")));
            }
            let mut prev = None;
            for id in &chain.0 {
                let span = spans
                    .get(id.as_str())
                    .ok_or_else(|| Error::Reference(format!("coref chain {k} cites unknown entity id {id:?}")))?;
                if !chained.insert(id.as_str()) {
                    return Err(Error::Schema(format!("mention {id} appears twice in coref chains")));
                }
                if let Some(p) = prev {
                    if span[0] < p {
                        return Err(Error::Schema(format!("coref chain {k} is not sorted by span start")));
                    }
                }
                prev = Some(span[0]);
            }
        }
        if let Some(rows) = &self.token_features {
            if rows.len() > cfg.max_article_len {
                return Err(Error::Length {
                    len: rows.len(),
                    max: cfg.max_article_len,
                });
            }
            for (i, row) in rows.iter().enumerate() {
                check_vec(&format!("token feature row {i}"), row, cfg.d_e)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DetectionKind {
    Object,
    Face,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub kind: DetectionKind,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    pub feature: FeatureVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image_id: String,
    /// Optional pairing hint used when no captions file is supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article_id: Option<String>,
    #[serde(default)]
    pub global_features: FeatureMatrix,
    #[serde(default)]
    pub detections: Vec<Detection>,
}

impl ImageAnnotations {
    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        for (i, row) in self.global_features.iter().enumerate() {
            check_vec(&format!("global feature row {i}"), row, cfg.d_v)?;
        }
        for (i, d) in self.detections.iter().enumerate() {
            let [_, _, w, h] = d.bbox;
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Schema(format!("detection {i}: non-positive box size")));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Schema(format!("detection {i}: score {} outside [0,1]", d.score)));
            }
            check_vec(&format!("detection {i} feature"), &d.feature, cfg.d_v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub article_id: String,
    pub caption_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub caption_tokens: Vec<u32>,
}

impl CaptionRecord {
    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        let n = if self.caption_tokens.is_empty() {
            self.caption_text.split_whitespace().count()
        } else {
            self.caption_tokens.len()
        };
        if n > cfg.max_caption_len {
            return Err(Error::Length {
                len: n,
                max: cfg.max_caption_len,
            });
        }
        Ok(())
    }
}

/// Entity surface plus class, as used for evaluation and masking.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub surface: String,
    pub entity_class: EntityClass,
}

/// One line of `entities.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityListRecord {
    pub image_id: String,
    pub entities: Vec<EntityRef>,
}

// ---------------------------------------------------------------------------
// Graph schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeKind {
    Head,
    Relation,
    Tail,
    Object,
    Face,
}

impl NodeKind {
    pub fn is_text(self) -> bool {
        matches!(self, NodeKind::Head | NodeKind::Relation | NodeKind::Tail)
    }

    pub fn is_visual(self) -> bool {
        !self.is_text()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    Triple,
    CorefRewire,
    CrossModal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: String,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureVec>,
    #[serde(default)]
    pub source_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MultiModalGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl MultiModalGraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id.as_str(), i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut kinds = HashMap::new();
        for n in &self.nodes {
            if kinds.insert(n.node_id.as_str(), n.kind).is_some() {
                return Err(Error::Schema(format!("duplicate node id {}", n.node_id)));
            }
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            let src = *kinds
                .get(e.src.as_str())
                .ok_or_else(|| Error::Schema(format!("edge source {} is not a node", e.src)))?;
            let dst = *kinds
                .get(e.dst.as_str())
                .ok_or_else(|| Error::Schema(format!("edge target {} is not a node", e.dst)))?;
            if !seen.insert(e) {
                return Err(Error::Schema(format!(
                    "duplicate edge {} -> {} ({:?})",
                    e.src, e.dst, e.kind
                )));
            }
            match e.kind {
                EdgeKind::CrossModal if !(src.is_text() && dst.is_visual()) => {
                    return Err(Error::Schema(format!(
                        "cross-modal edge {} -> {} must run from a text node to a visual node",
                        e.src, e.dst
                    )));
                }
                EdgeKind::Triple | EdgeKind::CorefRewire if !(src.is_text() && dst.is_text()) => {
                    return Err(Error::Schema(format!(
                        "text edge {} -> {} touches a visual node",
                        e.src, e.dst
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn save_graph(graph: &MultiModalGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(graph)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<MultiModalGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<MultiModalGraph> {
    let g: MultiModalGraph = serde_json::from_str(text)?;
    g.validate()?;
    Ok(g)
}

// ---------------------------------------------------------------------------
// JSONL loaders

fn check_vec(what: &str, v: &FeatureVec, dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::dim(what, dim, v.len()));
    }
    if !v.is_finite() {
        return Err(Error::Schema(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn with_line(line: usize, e: Error) -> Error {
    match e {
        Error::Schema(m) => Error::Schema(format!("line {line}: {m}")),
        Error::Reference(m) => Error::Reference(format!("line {line}: {m}")),
        Error::Dimension { what, expected, got } => Error::Dimension {
            what: format!("line {line}: {what}"),
            expected,
            got,
        },
        other => other,
    }
}

/// Parses every non-blank line of a JSONL document, validating each record.
pub fn parse_jsonl<T, F>(text: &str, mut validate: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: FnMut(&T) -> Result<()>,
{
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| with_line(i + 1, e.into()))?;
        validate(&rec).map_err(|e| with_line(i + 1, e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T, F>(path: impl AsRef<Path>, validate: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: FnMut(&T) -> Result<()>,
{
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, validate)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_article_annotations(path: impl AsRef<Path>, cfg: &DataConfig) -> Result<Vec<ArticleAnnotations>> {
    read_jsonl(path, |a: &ArticleAnnotations| a.validate(cfg))
}

pub fn load_image_annotations(path: impl AsRef<Path>, cfg: &DataConfig) -> Result<Vec<ImageAnnotations>> {
    read_jsonl(path, |a: &ImageAnnotations| a.validate(cfg))
}

pub fn load_captions(path: impl AsRef<Path>, cfg: &DataConfig) -> Result<Vec<CaptionRecord>> {
    read_jsonl(path, |c: &CaptionRecord| c.validate(cfg))
}

pub fn load_entity_lists(path: impl AsRef<Path>) -> Result<Vec<EntityListRecord>> {
    read_jsonl(path, |_: &EntityListRecord| Ok(()))
}
