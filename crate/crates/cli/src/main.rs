mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmkg_core::captioner::{train_captioner, CaptionModel};
use mmkg_core::data::{
    load_captions, load_entity_lists, load_graph, read_jsonl, save_graph, write_jsonl, DataConfig, EdgeKind,
    MultiModalGraph, NodeKind,
};
use mmkg_core::decoder::{Ablation, DecodeMode};
use mmkg_core::graph::{build_image_subgraph, build_mmkg, build_text_subgraph, cross_modal_matches, graph_stats};
use mmkg_core::kb::{load_kb, save_kb, split_kb, synth_kb, KnowledgeBase};
use mmkg_core::matcher::{recall_at_1, train_matcher, MatcherParams};
use mmkg_core::metrics::{evaluate_corpus, EvalMode, Hypothesis, Reference};
use mmkg_core::pipeline::Dataset;
use mmkg_core::synth::synth_corpus;
use rayon::prelude::*;

use crate::config::Config;

#[derive(Parser)]
#[command(
    name = "mmkg",
    version,
    about = "Multi-modal knowledge graphs for entity-aware image captioning"
)]
struct Cli {
    /// TOML or JSON configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small synthetic-scale settings instead of the defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, default_value = "toml")]
    config_format: String,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-base utilities.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Write a synthetic corpus directory plus a matching config.toml.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        articles: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    TrainMatcher(TrainMatcherArgs),
    /// Link the text nodes of one graph to the visual nodes of another.
    Match {
        #[arg(long)]
        graph_text: PathBuf,
        #[arg(long)]
        graph_image: PathBuf,
        #[arg(long)]
        matcher: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Merged graph; matches are printed as JSON lines either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    BuildGraph(BuildGraphArgs),
    TrainCaptioner(TrainCaptionerArgs),
    Generate(GenerateArgs),
    Evaluate(EvaluateArgs),
}

#[derive(Subcommand)]
enum KbCommand {
    /// Check every entry and report duplicates.
    Validate {
        kb: PathBuf,
        #[arg(long)]
        dim_e: Option<usize>,
        #[arg(long)]
        dim_v: Option<usize>,
    },
    /// Write a clustered synthetic knowledge base.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        dim_e: Option<usize>,
        #[arg(long)]
        dim_v: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct TrainMatcherArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the base used for training; the rest selects the best epoch.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Dataset directory; overridden by --articles / --images.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    articles: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    matcher: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the text and image sub-graphs.
    #[arg(long)]
    subgraphs: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCaptionerArgs {
    #[arg(long)]
    data: PathBuf,
    /// Prebuilt graphs; built on the fly with the matcher when absent.
    #[arg(long)]
    graphs: Option<PathBuf>,
    #[arg(long)]
    matcher: PathBuf,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    graphs: Option<PathBuf>,
    /// Beam width; 0 decodes greedily.
    #[arg(long, default_value_t = 0)]
    beam: usize,
    #[arg(long, default_value_t = 0.0)]
    length_penalty: f64,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    EntityMasked,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyps: PathBuf,
    /// Reference captions (captions.jsonl).
    #[arg(long)]
    refs: PathBuf,
    /// Reference entity lists (entities.jsonl).
    #[arg(long)]
    entities: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "standard")]
    mode: Mode,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None if cli.desk => Config::desk(),
        None => Config::default(),
    };
    if cli.print_config {
        print!("{}", cfg.to_format(&cli.config_format)?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given; see --help");
    };
    match command {
        Command::Kb(KbCommand::Validate { kb, dim_e, dim_v }) => {
            let data = dims(&cfg.data, dim_e, dim_v);
            let (base, dropped) = load_kb(&kb, &data)?;
            println!("{} entries, {} duplicate ids dropped", base.len(), dropped);
        }
        Command::Kb(KbCommand::Synth {
            out,
            entities,
            dim_e,
            dim_v,
            seed,
        }) => {
            let mut s = cfg.synth.kb;
            s.entities = entities.unwrap_or(s.entities);
            s.d_e = dim_e.unwrap_or(s.d_e);
            s.d_v = dim_v.unwrap_or(s.d_v);
            s.seed = seed.unwrap_or(s.seed);
            let (base, _) = KnowledgeBase::from_entries(synth_kb(&s));
            save_kb(&base, &out)?;
            println!("wrote {} entries to {}", base.len(), out.display());
        }
        Command::SynthCorpus { out, articles, seed } => {
            cfg.synth.articles = articles.unwrap_or(cfg.synth.articles);
            cfg.synth.seed = seed.unwrap_or(cfg.synth.seed);
            let corpus = synth_corpus(&cfg.synth)?;
            corpus.write(&out)?;
            let mut written = if cli.config.is_some() {
                cfg.clone()
            } else {
                Config::desk()
            };
            written.synth = cfg.synth.clone();
            written.data = DataConfig::desk(cfg.synth.kb.d_e, cfg.synth.kb.d_v);
            fs::write(out.join("config.toml"), written.to_toml()?)?;
            println!(
                "wrote {} articles, {} images, {} knowledge-base entries to {}",
                corpus.articles.len(),
                corpus.images.len(),
                corpus.kb.len(),
                out.display()
            );
        }
        Command::TrainMatcher(a) => cmd_train_matcher(&mut cfg, a)?,
        Command::Match {
            graph_text,
            graph_image,
            matcher,
            threshold,
            out,
        } => {
            let m = MatcherParams::load(&matcher)?;
            cfg.graph.threshold = threshold.unwrap_or(cfg.graph.threshold);
            let text = load_graph(&graph_text)?;
            let image = load_graph(&graph_image)?;
            for found in cross_modal_matches(&text, &image, &m, &cfg.graph)? {
                println!("{}", serde_json::to_string(&found)?);
            }
            if let Some(out) = out {
                save_graph(&build_mmkg(&text, &image, &m, &cfg.graph)?, out)?;
            }
        }
        Command::BuildGraph(a) => cmd_build_graph(&mut cfg, a)?,
        Command::TrainCaptioner(a) => cmd_train_captioner(&mut cfg, a)?,
        Command::Generate(a) => cmd_generate(a)?,
        Command::Evaluate(a) => cmd_evaluate(&cfg, a)?,
    }
    Ok(())
}

fn dims(data: &DataConfig, dim_e: Option<usize>, dim_v: Option<usize>) -> DataConfig {
    DataConfig {
        d_e: dim_e.unwrap_or(data.d_e),
        d_v: dim_v.unwrap_or(data.d_v),
        ..*data
    }
}

fn data_config(cfg: &Config, m: &MatcherParams) -> DataConfig {
    dims(&cfg.data, Some(m.d_e()), Some(m.d_v()))
}

fn cmd_train_matcher(cfg: &mut Config, a: TrainMatcherArgs) -> Result<()> {
    let mc = &mut cfg.matcher;
    mc.epochs = a.epochs.unwrap_or(mc.epochs);
    mc.optim.batch_size = a.batch.unwrap_or(mc.optim.batch_size);
    mc.optim.seed = a.seed.unwrap_or(mc.optim.seed);
    let (base, _) = load_kb(&a.kb, &cfg.data)?;
    let (train, held) = split_kb(&base, a.split, mc.optim.seed)?;
    let (params, log) = train_matcher(&train, &held, mc)?;
    if let Some(path) = &a.log {
        write_jsonl(path, &log)?;
    }
    params.save(&a.out)?;
    let best = log.iter().map(|e| e.val_recall_at_1).fold(0.0, f64::max);
    println!(
        "held-out recall@1 {best:.4}, full-base recall@1 {:.4}; wrote {}",
        recall_at_1(&base, &params),
        a.out.display()
    );
    Ok(())
}

fn load_dataset(
    data: Option<&Path>,
    articles: Option<PathBuf>,
    images: Option<PathBuf>,
    captions: Option<PathBuf>,
    cfg: &DataConfig,
) -> Result<Dataset> {
    let pick = |explicit: Option<PathBuf>, name: &str| -> Result<PathBuf> {
        explicit
            .or_else(|| data.map(|d| d.join(name)))
            .with_context(|| format!("pass --data or the {name} path"))
    };
    let articles = pick(articles, "articles.jsonl")?;
    let images = pick(images, "images.jsonl")?;
    let captions = captions.or_else(|| data.map(|d| d.join("captions.jsonl")).filter(|p| p.exists()));
    Ok(Dataset {
        articles: mmkg_core::data::load_article_annotations(articles, cfg)?,
        images: mmkg_core::data::load_image_annotations(images, cfg)?,
        captions: match captions {
            Some(p) => load_captions(p, cfg)?,
            None => Vec::new(),
        },
    })
}

const NODE_KINDS: [NodeKind; 5] = [
    NodeKind::Head,
    NodeKind::Relation,
    NodeKind::Tail,
    NodeKind::Object,
    NodeKind::Face,
];
const EDGE_KINDS: [EdgeKind; 3] = [EdgeKind::Triple, EdgeKind::CorefRewire, EdgeKind::CrossModal];

fn stats_row(image_id: &str, g: &MultiModalGraph) -> String {
    let s = graph_stats(g);
    let mut cols = vec![image_id.to_string()];
    cols.extend(
        NODE_KINDS
            .iter()
            .map(|k| s.nodes.get(k).copied().unwrap_or(0).to_string()),
    );
    cols.extend(
        EDGE_KINDS
            .iter()
            .map(|k| s.edges.get(k).copied().unwrap_or(0).to_string()),
    );
    cols.push(s.components.to_string());
    cols.join("\t")
}

fn cmd_build_graph(cfg: &mut Config, a: BuildGraphArgs) -> Result<()> {
    let m = MatcherParams::load(&a.matcher)?;
    cfg.graph.threshold = a.threshold.unwrap_or(cfg.graph.threshold);
    let data = load_dataset(
        a.data.as_deref(),
        a.articles,
        a.images,
        a.captions,
        &data_config(cfg, &m),
    )?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let pairs = data.pairs()?;
    let rows: Vec<String> = pairs
        .par_iter()
        .map(|p| -> Result<String> {
            let image = &data.images[p.image];
            let id = &image.image_id;
            let text = build_text_subgraph(&data.articles[p.article])?;
            let visual = build_image_subgraph(image, &cfg.graph);
            let g = build_mmkg(&text, &visual, &m, &cfg.graph)?;
            if a.subgraphs {
                save_graph(&text, a.out.join(format!("{id}.text.json")))?;
                save_graph(&visual, a.out.join(format!("{id}.image.json")))?;
            }
            save_graph(&g, a.out.join(format!("{id}.graph.json")))?;
            Ok(stats_row(id, &g))
        })
        .collect::<Result<_>>()?;
    let mut header = vec!["image_id".to_string()];
    header.extend(NODE_KINDS.iter().map(|k| format!("nodes_{}", kind_name(k))));
    header.extend(EDGE_KINDS.iter().map(|k| format!("edges_{}", kind_name(k))));
    header.push("components".into());
    let mut tsv = header.join("\t") + "\n";
    for r in &rows {
        tsv.push_str(r);
        tsv.push('\n');
    }
    fs::write(a.out.join("stats.tsv"), tsv)?;
    println!("wrote {} graphs to {}", rows.len(), a.out.display());
    Ok(())
}

fn kind_name<T: serde::Serialize>(k: &T) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_lowercase))
        .unwrap_or_default()
}

fn load_graph_dir(dir: &Path) -> Result<BTreeMap<String, MultiModalGraph>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(id) = name.strip_suffix(".graph.json") {
            out.insert(id.to_string(), load_graph(&path)?);
        }
    }
    Ok(out)
}

fn graphs_for(
    data: &Dataset,
    dir: Option<&Path>,
    m: Option<&MatcherParams>,
    cfg: &Config,
) -> Result<BTreeMap<String, MultiModalGraph>> {
    match (dir, m) {
        (Some(d), _) => load_graph_dir(d),
        (None, Some(m)) => Ok(data.build_graphs(m, &cfg.graph)?),
        (None, None) => Ok(BTreeMap::new()),
    }
}

fn cmd_train_captioner(cfg: &mut Config, a: TrainCaptionerArgs) -> Result<()> {
    let m = MatcherParams::load(&a.matcher)?;
    let cc = &mut cfg.captioner;
    cc.ablation = a.ablation.unwrap_or(cc.ablation);
    cc.epochs = a.epochs.unwrap_or(cc.epochs);
    let data = Dataset::load(&a.data, &data_config(cfg, &m))?;
    ensure!(!data.captions.is_empty(), "{} has no captions.jsonl", a.data.display());
    let graphs = graphs_for(&data, a.graphs.as_deref(), Some(&m), cfg)?;
    let cc = &cfg.captioner;
    let vocab = data.vocabulary(cc.min_count);
    let samples = data.samples(&graphs, &vocab, cc, m.d_e(), m.d_v())?;
    let (model, log) = train_captioner(&samples, vocab, m.d_e(), m.d_v(), cc, a.seed)?;
    for e in &log {
        eprintln!(
            "epoch {:>4}  loss/token {:.4}  grad norm {:.4}  lr {:.2e}",
            e.epoch, e.loss_per_token, e.grad_norm, e.lr
        );
    }
    if let Some(path) = &a.log {
        write_jsonl(path, &log)?;
    }
    model.save(&a.out)?;
    println!(
        "trained {} on {} samples, final loss/token {:.4}; wrote {}",
        cc.ablation,
        samples.len(),
        log.last().map_or(f64::NAN, |e| e.loss_per_token),
        a.out.display()
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let model = CaptionModel::load(&a.ckpt)?;
    let data_cfg = DataConfig {
        max_article_len: model
            .config
            .decoder
            .max_article_len
            .max(DataConfig::default().max_article_len),
        ..DataConfig::desk(model.d_e, model.d_v)
    };
    let mut data = Dataset::load(&a.data, &data_cfg)?;
    // references are not needed to decode
    data.captions.clear();
    let needs_graph = model.config.ablation != Ablation::WithoutGraph;
    ensure!(
        !needs_graph || a.graphs.is_some(),
        "--graphs is required for the {} model",
        model.config.ablation
    );
    let graphs = graphs_for(&data, a.graphs.as_deref(), None, &Config::default())?;
    let samples = data.samples(&graphs, &model.vocab, &model.config, model.d_e, model.d_v)?;
    let mode = match a.beam {
        0 => DecodeMode::Greedy,
        w => DecodeMode::Beam {
            width: w,
            length_penalty: a.length_penalty,
        },
    };
    let hyps: Vec<Hypothesis> = samples
        .par_iter()
        .map(|s| {
            Ok(Hypothesis {
                image_id: s.image_id.clone(),
                caption_text: model.caption(s, mode, a.max_len)?,
                entities: None,
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&a.out, &hyps)?;
    println!("wrote {} captions to {}", hyps.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &Config, a: EvaluateArgs) -> Result<()> {
    let hyps: Vec<Hypothesis> = read_jsonl(&a.hyps, |_: &Hypothesis| Ok(()))?;
    let captions = load_captions(
        &a.refs,
        &DataConfig {
            max_caption_len: usize::MAX,
            ..cfg.data
        },
    )?;
    let mut entities: BTreeMap<String, _> = match &a.entities {
        Some(p) => load_entity_lists(p)?
            .into_iter()
            .map(|r| (r.image_id, r.entities))
            .collect(),
        None => BTreeMap::new(),
    };
    let refs: Vec<Reference> = captions
        .into_iter()
        .map(|c| Reference {
            entities: entities.remove(&c.image_id).unwrap_or_default(),
            image_id: c.image_id,
            caption_text: c.caption_text,
        })
        .collect();
    let mode = match a.mode {
        Mode::Standard => EvalMode::Standard,
        Mode::EntityMasked => EvalMode::EntityMasked,
    };
    let report = evaluate_corpus(&hyps, &refs, mode, &cfg.evaluation)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.report {
        Some(p) => fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if a.report.is_some() {
        println!(
            "BLEU-4 {:.4}  ROUGE-L {:.4}  CIDEr-D {:.4}{}",
            report.bleu4,
            report.rouge_l,
            report.cider_d,
            report
                .entity_f1
                .map_or(String::new(), |f| format!("  entity F1 {f:.4}"))
        );
    }
    Ok(())
}
