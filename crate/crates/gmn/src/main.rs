use clap::{Parser, Subcommand};
use gmn::config::{ModelConfig, Variant};
use gmn::embed::check_compat;
use gmn::evalrun::{
    dump_preference, dump_relevance, evaluate, run_ablation, run_sweep, train_model, SweepKnob,
};
use gmn::graph::{ingest_logs, DualGraph, NodeId, NodeKind};
use gmn::params::{ParamStore, ResolvedConfig};
use gmn::synth::{load_val, synthesize, write_val, SynthParams, ValGroup};
use gmn::train::{export_embeddings, retrieve_topk};
use gmn::Result;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "gmn",
    version,
    about = "Bi-level graph matching for video retrieval over a dual interaction graph"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a binary graph from two interaction logs and a feature table.
    BuildGraph {
        /// Video-watch log: user, video, timestamp (tab-separated).
        #[arg(long)]
        uv_log: PathBuf,
        /// Item-purchase log: user, item, timestamp (tab-separated).
        #[arg(long)]
        ui_log: PathBuf,
        /// Feature table: node key then field:id pairs (tab-separated).
        #[arg(long)]
        features: PathBuf,
        /// Output graph path (a key sidecar lands next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-topic dataset: a graph plus held-out samples.
    Synth {
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        videos: usize,
        #[arg(long, default_value_t = 1000)]
        items: usize,
        #[arg(long, default_value_t = 10)]
        topics: usize,
        /// Subtopics per topic; 1 disables the fine scale.
        #[arg(long, default_value_t = 4)]
        subtopics: usize,
        /// Fewest active topics per user mixture.
        #[arg(long, default_value_t = 2)]
        active_min: usize,
        /// Most active topics per user mixture.
        #[arg(long, default_value_t = 3)]
        active_max: usize,
        /// 1.0 couples purchases to watches exactly; 0.0 decouples them.
        #[arg(long, default_value_t = 0.8)]
        signal: f64,
        /// Fraction of purchases that ignore the user's topic mixture.
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        /// Fraction of edges that ignore their preferred subtopic.
        #[arg(long, default_value_t = 0.1)]
        sub_noise: f64,
        #[arg(long, default_value_t = 10)]
        videos_per_user: usize,
        #[arg(long, default_value_t = 30)]
        items_per_user: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory for graph.bin and val.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Held-out samples: user, video, label (tab-separated).
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Score held-out samples with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Also print the node-relevance matrix for this user key.
        #[arg(long)]
        dump_relevance: Option<String>,
        /// Also print first-round pooling assignments for this user key.
        #[arg(long)]
        dump_preference: Option<String>,
    },
    /// Rank the highest-scoring videos for one user.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// User key as it appeared in the logs.
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Export user and video vectors as single-precision text tables.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare the analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Rank of the factored relevance metric; 0 keeps it full.
        #[arg(long, default_value_t = 0)]
        metric_rank: usize,
        /// Check through a fixed dropout mask as well.
        #[arg(long)]
        dropout: bool,
    },
    /// Train every requested variant under every seed on one dataset.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Comma-separated variant names; defaults to all of them.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Optional per-cell results table (tab-separated).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model across one knob's values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// preference-count or metric-rank.
        #[arg(long)]
        knob: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_validation() { 2 } else { 1 });
        }
    }
}

fn load_store(checkpoint: &Path, graph: &DualGraph) -> Result<ParamStore> {
    let store = ParamStore::load(checkpoint)?;
    check_compat(&store.rc, graph)?;
    Ok(store)
}

fn load_val_groups(path: &Path, graph: &DualGraph) -> Result<Vec<ValGroup>> {
    let (groups, skipped) = load_val(path, graph)?;
    if skipped > 0 {
        eprintln!("note: skipped {skipped} held-out samples naming nodes absent from the graph");
    }
    Ok(groups)
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::BuildGraph {
            uv_log,
            ui_log,
            features,
            out,
        } => {
            let graph = ingest_logs(&uv_log, &ui_log, &features)?;
            graph.save(&out)?;
            let s = &graph.stats;
            println!(
                "graph: {} users, {} videos, {} items",
                graph.n_users(),
                graph.n_videos(),
                graph.n_items()
            );
            println!(
                "edges: {} watch, {} purchase ({} duplicates collapsed)",
                s.uv_edges, s.ui_edges, s.duplicate_edges
            );
            if s.skipped_unknown_key > 0 {
                println!("skipped {} edges with unknown keys", s.skipped_unknown_key);
            }
            if s.unused_feature_rows > 0 {
                println!("{} feature rows never appeared in a log", s.unused_feature_rows);
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
        Cmd::Synth {
            users,
            videos,
            items,
            topics,
            subtopics,
            active_min,
            active_max,
            signal,
            noise,
            sub_noise,
            videos_per_user,
            items_per_user,
            seed,
            out,
        } => {
            let params = SynthParams {
                users,
                videos,
                items,
                topics,
                subtopics,
                active_min,
                active_max,
                signal,
                noise,
                sub_noise,
                videos_per_user,
                items_per_user,
                seed,
            };
            let data = synthesize(&params)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| gmn::Error::io(out.display().to_string(), e))?;
            let graph_path = out.join("graph.bin");
            let val_path = out.join("val.tsv");
            data.graph.save(&graph_path)?;
            write_val(&val_path, &data.graph, &data.val)?;
            let samples: usize = data.val.iter().map(|g| g.samples.len()).sum();
            println!(
                "graph: {} users, {} videos, {} items",
                data.graph.n_users(),
                data.graph.n_videos(),
                data.graph.n_items()
            );
            println!("held out: {} samples in {} groups", samples, data.val.len());
            println!("wrote {} and {}", graph_path.display(), val_path.display());
            Ok(0)
        }
        Cmd::Train {
            config,
            graph,
            val,
            out,
            variant,
        } => {
            let model = ModelConfig::load(&config.display().to_string())?;
            let variant = Variant::parse(&variant)?;
            let graph = DualGraph::load(&graph)?;
            let val = load_val_groups(&val, &graph)?;
            let rc = ResolvedConfig::resolve(&model, &graph, variant)?;
            let trained = train_model(&rc, &graph, &val, |e| {
                println!(
                    "epoch {:>3}  loss {:.4}  penalty {:.4}  pairs {}  val-auc {:.2}  val-hit1 {:.2}",
                    e.epoch,
                    e.data_loss,
                    e.reg_loss,
                    e.pairs,
                    pct(e.val_auc),
                    pct(e.val_hit1)
                );
            })?;
            trained.store.save(&out)?;
            println!(
                "best epoch {} with val-auc {:.2}{}",
                trained.best_epoch,
                pct(trained.best_auc),
                if trained.stopped_early {
                    " (stopped early)"
                } else {
                    ""
                }
            );
            println!("wrote {}", out.display());
            Ok(0)
        }
        Cmd::Eval {
            checkpoint,
            graph,
            val,
            dump_relevance: rel_key,
            dump_preference: pref_key,
        } => {
            let graph = DualGraph::load(&graph)?;
            let store = load_store(&checkpoint, &graph)?;
            let val = load_val_groups(&val, &graph)?;
            let report = evaluate(&store, &graph, &val);
            println!("samples {} in {} groups", report.samples, report.groups);
            println!("auc {:.2}", pct(report.auc));
            println!("hit@1 {:.2}", pct(report.hit1));
            println!(
                "precision {:.2}  recall {:.2}  bce {:.4}  predicted-positive {}",
                pct(report.threshold.precision),
                pct(report.threshold.recall),
                report.threshold.bce,
                report.threshold.predicted_pos
            );
            if let Some(key) = rel_key {
                let user = graph.require(NodeKind::User, &key)?;
                println!("# relevance user={key}");
                print!("{}", dump_relevance(&store, &graph, user)?);
            }
            if let Some(key) = pref_key {
                let user = graph.require(NodeKind::User, &key)?;
                println!("# preference user={key}");
                print!("{}", dump_preference(&store, &graph, user)?);
            }
            Ok(0)
        }
        Cmd::Retrieve {
            checkpoint,
            graph,
            user,
            k,
        } => {
            let graph = DualGraph::load(&graph)?;
            let store = load_store(&checkpoint, &graph)?;
            let uid = graph.require(NodeKind::User, &user)?;
            for (rank, (video, score)) in retrieve_topk(&store, &graph, uid, k).iter().enumerate()
            {
                println!(
                    "{}\t{}\t{:.6}",
                    rank + 1,
                    graph.key(NodeId::video(*video)),
                    score
                );
            }
            Ok(0)
        }
        Cmd::Export {
            checkpoint,
            graph,
            out_dir,
        } => {
            let graph = DualGraph::load(&graph)?;
            let store = load_store(&checkpoint, &graph)?;
            export_embeddings(&store, &graph, &out_dir)?;
            println!(
                "wrote {} user and {} video vectors to {}",
                graph.n_users(),
                graph.n_videos(),
                out_dir.display()
            );
            Ok(0)
        }
        Cmd::Gradcheck {
            d,
            seed,
            variant,
            metric_rank,
            dropout,
        } => {
            let variant = Variant::parse(&variant)?;
            let report = gmn::gradcheck::gradcheck(d, seed, variant, metric_rank, dropout)?;
            for (name, err) in &report.tensors {
                println!("{name:<14} {err:.3e}");
            }
            println!(
                "checked {} coordinates, worst {:.3e}, threshold {:.1e}: {}",
                report.coordinates,
                report.worst,
                report.threshold,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            Ok(if report.passed() { 0 } else { 2 })
        }
        Cmd::Ablate {
            config,
            graph,
            val,
            variants,
            seeds,
            out,
        } => {
            let model = ModelConfig::load(&config.display().to_string())?;
            let graph = DualGraph::load(&graph)?;
            let val = load_val_groups(&val, &graph)?;
            let variants: Vec<Variant> = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| Variant::parse(n))
                    .collect::<Result<_>>()?,
                None => Variant::ALL.to_vec(),
            };
            let cells = run_ablation(&model, &graph, &val, &variants, &seeds, |c| {
                println!(
                    "variant {:<22} seed {:>3}  auc {:.2}  hit@1 {:.2}  best-epoch {}",
                    c.variant.name(),
                    c.seed,
                    pct(c.auc),
                    pct(c.hit1),
                    c.best_epoch
                );
            })?;
            println!("---");
            for &variant in &variants {
                let aucs: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.variant == variant)
                    .map(|c| c.auc)
                    .collect();
                let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
                let var = aucs
                    .iter()
                    .map(|a| (a - mean) * (a - mean))
                    .sum::<f64>()
                    / aucs.len() as f64;
                println!(
                    "variant {:<22} mean-auc {:.2}  sd {:.2}  over {} seeds",
                    variant.name(),
                    pct(mean),
                    pct(var.sqrt()),
                    aucs.len()
                );
            }
            if let Some(path) = out {
                use std::io::Write;
                let mut w = Vec::new();
                writeln!(w, "variant\tseed\tauc\thit1\tbest_epoch").unwrap();
                for c in &cells {
                    writeln!(
                        w,
                        "{}\t{}\t{:.6}\t{:.6}\t{}",
                        c.variant.name(),
                        c.seed,
                        c.auc,
                        c.hit1,
                        c.best_epoch
                    )
                    .unwrap();
                }
                std::fs::write(&path, w)
                    .map_err(|e| gmn::Error::io(path.display().to_string(), e))?;
                println!("wrote {}", path.display());
            }
            Ok(0)
        }
        Cmd::Sweep {
            config,
            graph,
            val,
            knob,
            values,
            seeds,
        } => {
            let model = ModelConfig::load(&config.display().to_string())?;
            let graph = DualGraph::load(&graph)?;
            let val = load_val_groups(&val, &graph)?;
            let knob = SweepKnob::parse(&knob)?;
            if values.is_empty() {
                return Err(gmn::Error::Config("no sweep values given".into()));
            }
            let cells = run_sweep(&model, &graph, &val, knob, &values, &seeds, |c| {
                println!(
                    "{} {:>4}  seed {:>3}  auc {:.2}",
                    knob.name(),
                    c.value,
                    c.seed,
                    pct(c.auc)
                );
            })?;
            println!("---");
            for &value in &values {
                let aucs: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.value == value)
                    .map(|c| c.auc)
                    .collect();
                let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
                println!(
                    "{} {:>4}  mean-auc {:.2}  over {} seeds",
                    knob.name(),
                    value,
                    pct(mean),
                    aucs.len()
                );
            }
            Ok(0)
        }
    }
}
