//! Synthetic news corpus whose captions can only be predicted through the
//! graph.
//!
//! Each article mentions two people and an organisation and is paired with
//! two images. Image `k` shows a face of person `k` (its feature is that
//! person's knowledge-base image feature plus noise) and carries the same
//! uninformative global features as its sibling, so the caption
//! `"<name> speaks at the <event>"` is determined by which face the image
//! holds and which article entity that face matches.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::FeatureVec;
use crate::data::{
    write_jsonl, ArticleAnnotations, CaptionRecord, CorefChain, Detection, DetectionKind, EntityClass,
    EntityListRecord, EntityMention, EntityRef, ImageAnnotations, RelationTriple,
};
use crate::error::{Error, Result};
use crate::kb::{synth_kb, KnowledgeBase, KnowledgeBaseEntry, SynthKbConfig};

const EVENTS: [&str; 10] = [
    "summit", "match", "rally", "gala", "trial", "final", "concert", "parade", "forum", "launch",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusConfig {
    pub articles: usize,
    pub kb: SynthKbConfig,
    /// Background objects per image (one extra below the score cut).
    pub objects: usize,
    /// Standard deviation of the noise added to face features.
    pub face_noise: f64,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            articles: 25,
            kb: SynthKbConfig::default(),
            objects: 2,
            face_noise: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub kb: Vec<KnowledgeBaseEntry>,
    pub articles: Vec<ArticleAnnotations>,
    pub images: Vec<ImageAnnotations>,
    pub captions: Vec<CaptionRecord>,
    pub entities: Vec<EntityListRecord>,
}

struct TextBuilder {
    text: String,
    words: Vec<String>,
}

impl TextBuilder {
    /// Appends `word` and returns its byte span.
    fn push(&mut self, word: &str) -> [usize; 2] {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        let start = self.text.len();
        self.text.push_str(word);
        self.words.push(word.to_string());
        [start, self.text.len()]
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    let n = Normal::new(0.0, std).unwrap();
    (0..d).map(|_| n.sample(rng)).collect()
}

pub fn synth_corpus(cfg: &SynthCorpusConfig) -> Result<SynthCorpus> {
    let n_people = 2 * cfg.articles;
    if n_people + cfg.articles > cfg.kb.entities {
        return Err(Error::Config(format!(
            "{} articles need {} knowledge-base entities, only {} configured",
            cfg.articles,
            n_people + cfg.articles,
            cfg.kb.entities
        )));
    }
    let kb = synth_kb(&cfg.kb);
    let (d_e, d_v) = (cfg.kb.d_e, cfg.kb.d_v);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut word_features: HashMap<String, FeatureVec> = HashMap::new();
    let global = FeatureVec(vec![0.1; d_v]);

    let mut out = SynthCorpus {
        kb: kb.clone(),
        articles: Vec::new(),
        images: Vec::new(),
        captions: Vec::new(),
        entities: Vec::new(),
    };
    for a in 0..cfg.articles {
        let people = [&kb[2 * a], &kb[2 * a + 1]];
        let org = &kb[kb.len() - 1 - a];
        let event = EVENTS[a % EVENTS.len()];
        let article_id = format!("art{a:03}");

        let mut t = TextBuilder {
            text: String::new(),
            words: Vec::new(),
        };
        let mention = |id: &str, e: &KnowledgeBaseEntry, span: [usize; 2], class: EntityClass| EntityMention {
            id: id.to_string(),
            surface: e.name.clone(),
            entity_class: class,
            char_span: span,
            wiki_id: Some(e.wiki_id.clone()),
            embedding: Some(e.entity_embedding.clone()),
        };
        let s0 = t.push(&people[0].name);
        let r0 = t.push("met");
        let s1 = t.push(&people[1].name);
        for w in ["at", "the", event, "."] {
            t.push(w);
        }
        let s3 = t.push(&people[0].name);
        let r1 = t.push("thanked");
        let s2 = t.push(&org.name);
        t.push(".");
        let s4 = t.push(&people[1].name);
        for w in ["spoke", "later", "."] {
            t.push(w);
        }
        let entities = vec![
            mention("m0", people[0], s0, EntityClass::Person),
            mention("m1", people[1], s1, EntityClass::Person),
            mention("m2", org, s2, EntityClass::Org),
            mention("m3", people[0], s3, EntityClass::Person),
            mention("m4", people[1], s4, EntityClass::Person),
        ];
        let triples = vec![
            RelationTriple {
                head_id: "m0".into(),
                relation_text: "met".into(),
                relation_span: r0,
                tail_id: "m1".into(),
                relation_embedding: None,
            },
            RelationTriple {
                head_id: "m3".into(),
                relation_text: "thanked".into(),
                relation_span: r1,
                tail_id: "m2".into(),
                relation_embedding: None,
            },
        ];
        let token_features = t
            .words
            .iter()
            .map(|w| {
                word_features
                    .entry(w.clone())
                    .or_insert_with(|| FeatureVec::from_f64(&gaussian_vec(&mut rng, d_e, 1.0)))
                    .clone()
            })
            .collect();
        out.articles.push(ArticleAnnotations {
            article_id: article_id.clone(),
            text: t.text,
            entities,
            triples,
            coref_chains: vec![
                CorefChain(vec!["m0".into(), "m3".into()]),
                CorefChain(vec!["m1".into(), "m4".into()]),
            ],
            token_features: Some(token_features),
        });

        for (k, person) in people.iter().enumerate() {
            let image_id = format!("img{a:03}_{k}");
            let face: Vec<f64> = person
                .image_feature
                .to_f64()
                .iter()
                .zip(gaussian_vec(&mut rng, d_v, cfg.face_noise))
                .map(|(x, n)| x + n)
                .collect();
            let mut detections = vec![Detection {
                kind: DetectionKind::Face,
                bbox: [10.0, 10.0, 40.0, 40.0],
                score: 0.95,
                class_label: None,
                feature: FeatureVec::from_f64(&face),
            }];
            for o in 0..=cfg.objects {
                let score = if o == cfg.objects {
                    0.1
                } else {
                    rng.random_range(0.4..0.9)
                };
                detections.push(Detection {
                    kind: DetectionKind::Object,
                    bbox: [60.0 + o as f64, 20.0, 30.0, 30.0],
                    score,
                    class_label: Some("object".into()),
                    feature: FeatureVec::from_f64(&gaussian_vec(&mut rng, d_v, 1.0)),
                });
            }
            out.images.push(ImageAnnotations {
                image_id: image_id.clone(),
                article_id: Some(article_id.clone()),
                global_features: vec![global.clone()],
                detections,
            });
            out.captions.push(CaptionRecord {
                image_id: image_id.clone(),
                article_id: article_id.clone(),
                caption_text: format!("{} speaks at the {event}", person.name),
                caption_tokens: Vec::new(),
            });
            out.entities.push(EntityListRecord {
                image_id,
                entities: vec![EntityRef {
                    surface: person.name.clone(),
                    entity_class: EntityClass::Person,
                }],
            });
        }
    }
    Ok(out)
}

impl SynthCorpus {
    pub fn knowledge_base(&self) -> KnowledgeBase {
        KnowledgeBase::from_entries(self.kb.iter().cloned()).0
    }

    /// Writes `kb.jsonl`, `articles.jsonl`, `images.jsonl`, `captions.jsonl`
    /// and `entities.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(dir.join("kb.jsonl"), &self.kb)?;
        write_jsonl(dir.join("articles.jsonl"), &self.articles)?;
        write_jsonl(dir.join("images.jsonl"), &self.images)?;
        write_jsonl(dir.join("captions.jsonl"), &self.captions)?;
        write_jsonl(dir.join("entities.jsonl"), &self.entities)
    }
}
