use std::fs;
use std::path::Path;

use mmkg_core::codec::encode_f32;
use mmkg_core::data::{
    load_article_annotations, load_entity_lists, load_graph, save_graph, DataConfig, EdgeKind, EntityClass, NodeKind,
};
use mmkg_core::error::Error;
use mmkg_core::graph::GraphConfig;
use mmkg_core::kb::load_kb;
use mmkg_core::matcher::MatcherParams;
use mmkg_core::pipeline::Dataset;
use ndarray::Array2;
use serde_json::json;

const TEXT: &str = "Obama visited the White House . He praised it .";

fn feat(v: &[f32]) -> String {
    encode_f32(v)
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) {
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, body).unwrap();
}

fn write_dataset(dir: &Path) {
    write_lines(
        &dir.join("articles.jsonl"),
        &[json!({
            "article_id": "a0",
            "text": TEXT,
            "entities": [
                {"id": "e0", "surface": "Obama", "entity_class": "PERSON", "char_span": [0, 5],
                 "wiki_id": "Q76", "embedding": feat(&[1.0, 0.0])},
                {"id": "e1", "surface": "White House", "entity_class": "FACILITY", "char_span": [18, 29],
                 "embedding": feat(&[0.0, 1.0])},
                {"id": "e2", "surface": "He", "entity_class": "PERSON", "char_span": [32, 34]},
                {"id": "e3", "surface": "it", "entity_class": "FACILITY", "char_span": [43, 45]}
            ],
            "triples": [
                {"head_id": "e2", "relation_text": "praised", "relation_span": [35, 42], "tail_id": "e3"},
                {"head_id": "e0", "relation_text": "visited", "relation_span": [6, 13], "tail_id": "e1"}
            ],
            "coref_chains": [["e0", "e2"], ["e1", "e3"]]
        })],
    );
    write_lines(
        &dir.join("images.jsonl"),
        &[
            json!({
                "image_id": "img0",
                "global_features": [feat(&[0.5, 0.5])],
                "detections": [
                    {"kind": "OBJECT", "bbox": [0.0, 0.0, 4.0, 3.0], "score": 0.1, "feature": feat(&[1.0, 0.0])},
                    {"kind": "FACE", "bbox": [1.0, 1.0, 1.0, 1.0], "score": 0.8, "feature": feat(&[1.0, 0.1])},
                    {"kind": "OBJECT", "bbox": [0.0, 0.0, 9.0, 5.0], "score": 0.9, "class_label": "building",
                     "feature": feat(&[0.05, 1.0])}
                ]
            }),
            json!({"image_id": "img1", "article_id": "a0", "global_features": [feat(&[0.0, 1.0])]}),
        ],
    );
    write_lines(
        &dir.join("captions.jsonl"),
        &[json!({"image_id": "img0", "article_id": "a0", "caption_text": "Obama at the White House"})],
    );
}

fn identity_matcher() -> MatcherParams {
    MatcherParams {
        w_e: Array2::eye(2),
        w_v: Array2::eye(2),
        delta: 0.2,
        seed: 0,
    }
}

#[test]
fn extractor_output_builds_the_expected_graph() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let data = Dataset::load(dir.path(), &DataConfig::desk(2, 2)).unwrap();
    let pairs = data.pairs().unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[0].caption, Some(0));
    assert_eq!((pairs[1].article, pairs[1].caption), (0, None));

    let cfg = GraphConfig {
        link_relations: false,
        ..GraphConfig::default()
    };
    let graphs = data.build_graphs(&identity_matcher(), &cfg).unwrap();
    let g = &graphs["img0"];
    let nodes: Vec<(&str, NodeKind, &str)> = g
        .nodes
        .iter()
        .map(|n| (n.node_id.as_str(), n.kind, n.label.as_str()))
        .collect();
    assert_eq!(
        nodes,
        [
            ("ent:e0", NodeKind::Head, "Obama"),
            ("ent:e1", NodeKind::Tail, "White House"),
            ("rel:0000", NodeKind::Relation, "visited"),
            ("rel:0001", NodeKind::Relation, "praised"),
            ("obj:000", NodeKind::Object, "building"),
            ("face:000", NodeKind::Face, "face"),
        ]
    );
    assert_eq!(g.nodes[3].source_ref, "e2|praised|e3");
    assert_eq!(g.nodes[4].source_ref, "img0#2");
    // relation without its own embedding averages its endpoints
    assert_eq!(g.nodes[3].feature.as_ref().unwrap().0, [0.5, 0.5]);

    let edges: Vec<(&str, &str, EdgeKind)> = g
        .edges
        .iter()
        .map(|e| (e.src.as_str(), e.dst.as_str(), e.kind))
        .collect();
    let expected = [
        ("ent:e0", "face:000", EdgeKind::CrossModal),
        ("ent:e0", "rel:0000", EdgeKind::Triple),
        ("ent:e0", "rel:0001", EdgeKind::CorefRewire),
        ("ent:e1", "obj:000", EdgeKind::CrossModal),
        ("rel:0000", "ent:e1", EdgeKind::Triple),
        ("rel:0001", "ent:e1", EdgeKind::CorefRewire),
    ];
    let mut sorted = edges.clone();
    sorted.sort();
    assert_eq!(sorted, expected);

    // the caption-less image has no detections, so only the text side remains
    assert_eq!(graphs["img1"].nodes.len(), 4);

    let path = dir.path().join("img0.graph.json");
    save_graph(g, &path).unwrap();
    assert_eq!(&load_graph(&path).unwrap(), g);
}

#[test]
fn loader_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("articles.jsonl");
    write_lines(
        &path,
        &[
            json!({"article_id": "a0", "text": "x y"}),
            json!({"article_id": "a1", "text": "x y", "entities": [
                {"id": "e0", "surface": "x", "entity_class": "OTHER", "char_span": [0, 1], "embedding": feat(&[1.0])}
            ]}),
        ],
    );
    match load_article_annotations(&path, &DataConfig::desk(2, 2)) {
        Err(Error::Dimension { what, expected, got }) => {
            assert!(what.starts_with("line 2"), "{what}");
            assert_eq!((expected, got), (2, 1));
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }

    fs::write(&path, "{\"article_id\": \"a0\", \"text\": \"ab\", \"entities\": [{\"id\": \"e0\", \"surface\": \"a\", \"entity_class\": \"PERSON\", \"char_span\": [1, 1]}]}\n").unwrap();
    assert!(
        matches!(load_article_annotations(&path, &DataConfig::desk(2, 2)), Err(Error::Schema(m)) if m.starts_with("line 1"))
    );

    write_lines(&dir.path().join("images.jsonl"), &[json!({"image_id": "i0"})]);
    let err = Dataset::load(dir.path(), &DataConfig::desk(2, 2))
        .and_then(|d| d.pairs())
        .unwrap_err();
    assert!(matches!(err, Error::Schema(_) | Error::Reference(_)), "{err:?}");
}

#[test]
fn kb_and_entity_lists_load() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb.jsonl");
    write_lines(
        &kb,
        &[
            json!({"wiki_id": "Q1", "name": "One", "entity_embedding": feat(&[1.0, 2.0]), "image_feature": feat(&[3.0])}),
            json!({"wiki_id": "Q2", "name": "Two", "entity_embedding": feat(&[0.0, 2.0]), "image_feature": feat(&[1.0])}),
            json!({"wiki_id": "Q1", "name": "Again", "entity_embedding": feat(&[5.0, 5.0]), "image_feature": feat(&[5.0])}),
        ],
    );
    let (kb, dropped) = load_kb(&kb, &DataConfig::desk(2, 1)).unwrap();
    assert_eq!((kb.len(), dropped), (2, 1));
    assert_eq!(kb.get("Q1").unwrap().name, "One");
    assert_eq!(kb.get("Q2").unwrap().entity_embedding.0, [0.0, 2.0]);

    let ents = dir.path().join("entities.jsonl");
    write_lines(
        &ents,
        &[json!({"image_id": "img0", "entities": [{"surface": "Obama", "entity_class": "PERSON"}]})],
    );
    let lists = load_entity_lists(&ents).unwrap();
    assert_eq!(lists[0].entities[0].entity_class, EntityClass::Person);
}

#[test]
fn matcher_checkpoint_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("matcher.ckpt");
    let m = MatcherParams::new_random(4, 3, 2, 0.2, 11);
    m.save(&path).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(
        raw["header"],
        json!({"d": 4, "d_e": 3, "d_v": 2, "delta": 0.2, "seed": 11})
    );
    assert!(raw["tensors"]["W_e"].is_object() && raw["tensors"]["W_v"].is_object());

    let loaded = MatcherParams::load(&path).unwrap();
    assert_eq!(loaded.header(), m.header());
    for (a, b) in loaded.w_e.iter().zip(&m.w_e) {
        assert_eq!(*a, *b as f32 as f64);
    }

    let mut broken = raw.clone();
    broken["header"]["d"] = json!(5);
    fs::write(&path, broken.to_string()).unwrap();
    assert!(matches!(MatcherParams::load(&path), Err(Error::Shape(_))));
}
