//! Dataset directories and the glue between graph building and captioning.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::captioner::{prepare_sample, CaptionerConfig, Sample};
use crate::data::{
    load_article_annotations, load_captions, load_image_annotations, ArticleAnnotations, CaptionRecord, DataConfig,
    ImageAnnotations, MultiModalGraph,
};
use crate::decoder::Ablation;
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig};
use crate::matcher::MatcherParams;
use crate::synth::SynthCorpus;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub articles: Vec<ArticleAnnotations>,
    pub images: Vec<ImageAnnotations>,
    pub captions: Vec<CaptionRecord>,
}

/// One image with its article and, when known, its reference caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub image: usize,
    pub article: usize,
    pub caption: Option<usize>,
}

impl Dataset {
    /// Reads `articles.jsonl`, `images.jsonl` and, if present, `captions.jsonl`.
    pub fn load(dir: impl AsRef<Path>, cfg: &DataConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let captions_path = dir.join("captions.jsonl");
        Ok(Dataset {
            articles: load_article_annotations(dir.join("articles.jsonl"), cfg)?,
            images: load_image_annotations(dir.join("images.jsonl"), cfg)?,
            captions: if captions_path.exists() {
                load_captions(captions_path, cfg)?
            } else {
                Vec::new()
            },
        })
    }

    pub fn from_synth(c: &SynthCorpus) -> Self {
        Dataset {
            articles: c.articles.clone(),
            images: c.images.clone(),
            captions: c.captions.clone(),
        }
    }

    /// Pairs every image with an article: through its caption record when
    /// one exists, otherwise through the image's own `article_id`.
    pub fn pairs(&self) -> Result<Vec<Pair>> {
        let articles: HashMap<&str, usize> = self
            .articles
            .iter()
            .enumerate()
            .map(|(i, a)| (a.article_id.as_str(), i))
            .collect();
        let captions: HashMap<&str, usize> = self
            .captions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.image_id.as_str(), i))
            .collect();
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let caption = captions.get(img.image_id.as_str()).copied();
                let article_id = caption
                    .map(|c| self.captions[c].article_id.as_str())
                    .or(img.article_id.as_deref())
                    .ok_or_else(|| Error::Reference(format!("image {} has no article", img.image_id)))?;
                let article = *articles.get(article_id).ok_or_else(|| {
                    Error::Reference(format!("image {} cites unknown article {article_id:?}", img.image_id))
                })?;
                Ok(Pair {
                    image: i,
                    article,
                    caption,
                })
            })
            .collect()
    }

    /// Caption words, plus the words of any article without token features.
    pub fn vocabulary(&self, min_count: usize) -> Vocabulary {
        let texts = self.captions.iter().map(|c| c.caption_text.as_str()).chain(
            self.articles
                .iter()
                .filter(|a| a.token_features.is_none())
                .map(|a| a.text.as_str()),
        );
        Vocabulary::build(texts, min_count)
    }

    /// One graph per image, keyed by image id.
    pub fn build_graphs(
        &self,
        matcher: &MatcherParams,
        cfg: &GraphConfig,
    ) -> Result<BTreeMap<String, MultiModalGraph>> {
        self.pairs()?
            .into_iter()
            .map(|p| {
                let img = &self.images[p.image];
                let g = build_graph(&self.articles[p.article], img, matcher, cfg)?;
                Ok((img.image_id.clone(), g))
            })
            .collect()
    }

    /// Model inputs for every image; `graphs` must cover every image unless
    /// the ablation drops the graph.
    pub fn samples(
        &self,
        graphs: &BTreeMap<String, MultiModalGraph>,
        vocab: &Vocabulary,
        cfg: &CaptionerConfig,
        d_e: usize,
        d_v: usize,
    ) -> Result<Vec<Sample>> {
        self.pairs()?
            .into_iter()
            .map(|p| {
                let img = &self.images[p.image];
                let graph = graphs.get(&img.image_id);
                if graph.is_none() && cfg.ablation != Ablation::WithoutGraph {
                    return Err(Error::Reference(format!("no graph for image {}", img.image_id)));
                }
                let caption = p.caption.map(|c| self.captions[c].caption_text.as_str());
                prepare_sample(
                    &img.image_id,
                    &self.articles[p.article],
                    img,
                    graph,
                    caption,
                    vocab,
                    cfg,
                    d_e,
                    d_v,
                )
            })
            .collect()
    }
}
