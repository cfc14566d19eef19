//! Evaluation over held-out groups and the drivers that train, ablate and
//! sweep whole models.

use crate::config::{ModelConfig, Variant};
use crate::graph::{DualGraph, NodeId};
use crate::metrics::{hit_at_one, rank_auc, threshold_metrics, ThresholdMetrics};
use crate::model::{forward_user, score, video_tower};
use crate::params::{ParamStore, ResolvedConfig};
use crate::synth::ValGroup;
use crate::train::train_epoch;
use crate::{Error, Result};
use rayon::prelude::*;
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub auc: f64,
    pub threshold: ThresholdMetrics,
    pub hit1: f64,
    pub groups: usize,
    pub samples: usize,
}

/// Score every held-out sample with dropout disabled. One forward pass per
/// user; each candidate video costs only a tower average and a dot product.
pub fn evaluate(store: &ParamStore, graph: &DualGraph, val: &[ValGroup]) -> EvalReport {
    let d = store.rc.model.node_width();
    let scored: Vec<Vec<(f64, bool)>> = val
        .par_iter()
        .map(|g| {
            let fwd = forward_user(&store.values, &store.rc, graph, g.user, None);
            g.samples
                .iter()
                .map(|&(v, pos)| {
                    let a = video_tower(&store.values, graph, v, d);
                    (score(&fwd.z_u, &a), pos)
                })
                .collect()
        })
        .collect();
    let flat: Vec<(f64, bool)> = scored.iter().flatten().copied().collect();
    EvalReport {
        auc: rank_auc(&flat),
        threshold: threshold_metrics(&flat),
        hit1: hit_at_one(&scored),
        groups: val.len(),
        samples: flat.len(),
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean ranking loss per pair over the epoch's batches.
    pub data_loss: f64,
    /// Penalty term at the end of the epoch.
    pub reg_loss: f64,
    pub pairs: usize,
    pub val_auc: f64,
    pub val_hit1: f64,
}

#[derive(Debug)]
pub struct Trained {
    /// The parameters from the best validation epoch.
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_auc: f64,
    pub stopped_early: bool,
}

/// Train a fresh model, tracking the best validation ranking quality and
/// stopping after `patience` epochs without improvement (0 disables).
/// Without any held-out groups every epoch counts as an improvement, so the
/// full budget runs and the final parameters win.
pub fn train_model(
    rc: &ResolvedConfig,
    graph: &DualGraph,
    val: &[ValGroup],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained> {
    let mut store = ParamStore::init(rc.clone(), rc.model.seed);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    for epoch in 0..rc.model.epochs {
        let stats = train_epoch(&mut store, graph, epoch)?;
        let report = evaluate(&store, graph, val);
        let entry = EpochLog {
            epoch,
            data_loss: stats.data_loss,
            reg_loss: stats.reg_loss,
            pairs: stats.pairs,
            val_auc: report.auc,
            val_hit1: report.hit1,
        };
        on_epoch(&entry);
        log.push(entry);
        let improved = val.is_empty() || best.as_ref().is_none_or(|&(_, b, _)| report.auc > b);
        if improved {
            best = Some((epoch, report.auc, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if rc.model.patience > 0 && since_best >= rc.model.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_auc, best_store) =
        best.ok_or_else(|| Error::Invalid("no training epochs ran".into()))?;
    Ok(Trained {
        store: best_store,
        log,
        best_epoch,
        best_auc,
        stopped_early,
    })
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub auc: f64,
    pub hit1: f64,
    pub best_epoch: usize,
}

/// Train every variant under every seed on the same graph and held-out set,
/// so cells sharing a seed are paired observations.
pub fn run_ablation(
    model: &ModelConfig,
    graph: &DualGraph,
    val: &[ValGroup],
    variants: &[Variant],
    seeds: &[u64],
    mut on_cell: impl FnMut(&AblationCell),
) -> Result<Vec<AblationCell>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let mut m = model.clone();
            m.seed = seed;
            let rc = ResolvedConfig::resolve(&m, graph, variant)?;
            let trained = train_model(&rc, graph, val, |_| {})?;
            let report = evaluate(&trained.store, graph, val);
            let cell = AblationCell {
                variant,
                seed,
                auc: trained.best_auc,
                hit1: report.hit1,
                best_epoch: trained.best_epoch,
            };
            on_cell(&cell);
            out.push(cell);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKnob {
    /// Number of pooling centers entering the first summary round.
    PreferenceCount,
    /// Rank of the factored node-relevance metric (0 keeps it full).
    MetricRank,
}

impl SweepKnob {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "preference-count" => Ok(SweepKnob::PreferenceCount),
            "metric-rank" => Ok(SweepKnob::MetricRank),
            other => Err(Error::Config(format!(
                "unknown sweep knob {other:?}, expected preference-count or metric-rank"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepKnob::PreferenceCount => "preference-count",
            SweepKnob::MetricRank => "metric-rank",
        }
    }

    fn apply(self, model: &mut ModelConfig, value: usize) {
        match self {
            SweepKnob::PreferenceCount => {
                model.k1 = value;
                model.k2 = value;
            }
            SweepKnob::MetricRank => model.metric_rank = value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: usize,
    pub seed: u64,
    pub auc: f64,
}

/// Train the full model across one knob's values, every seed per value.
pub fn run_sweep(
    model: &ModelConfig,
    graph: &DualGraph,
    val: &[ValGroup],
    knob: SweepKnob,
    values: &[usize],
    seeds: &[u64],
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    let mut out = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut m = model.clone();
            m.seed = seed;
            knob.apply(&mut m, value);
            let rc = ResolvedConfig::resolve(&m, graph, Variant::Full)?;
            let trained = train_model(&rc, graph, val, |_| {})?;
            let cell = SweepCell {
                value,
                seed,
                auc: trained.best_auc,
            };
            on_cell(&cell);
            out.push(cell);
        }
    }
    Ok(out)
}

/// Node-level relevance matrix for one user as text: item keys across the
/// header, one row per subgraph video.
pub fn dump_relevance(store: &ParamStore, graph: &DualGraph, user: u32) -> Result<String> {
    let fwd = forward_user(&store.values, &store.rc, graph, user, None);
    let nm = fwd.nm.as_ref().ok_or_else(|| {
        Error::Invalid(
            "node matching did not run for this user (disabled by the variant or a side is empty)"
                .into(),
        )
    })?;
    let mut out = String::from("video");
    for &i in &fwd.items {
        write!(out, "\t{}", graph.key(NodeId::item(i))).unwrap();
    }
    out.push('\n');
    for (r, &v) in fwd.videos.iter().enumerate() {
        write!(out, "{}", graph.key(NodeId::video(v))).unwrap();
        for c in 0..fwd.items.len() {
            write!(out, "\t{:.6e}", nm.rel[[r, c]]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// First-round soft assignments for one user as text: one row per subgraph
/// node, one column per pooling center on its side.
pub fn dump_preference(store: &ParamStore, graph: &DualGraph, user: u32) -> Result<String> {
    use crate::model::Stage;
    let fwd = forward_user(&store.values, &store.rc, graph, user, None);
    let Some(stage) = fwd.stages.first() else {
        return Err(Error::Invalid(
            "preference matching did not run for this user (disabled by the variant or no nodes)"
                .into(),
        ));
    };
    let mut out = String::from("side\tkey\tassignments...\n");
    let mut side = |label: &str, keys: &[u32], assign: &ndarray::Array2<f64>, video: bool| {
        for (r, &n) in keys.iter().enumerate() {
            let key = if video {
                graph.key(NodeId::video(n))
            } else {
                graph.key(NodeId::item(n))
            };
            write!(out, "{label}\t{key}").unwrap();
            for c in 0..assign.ncols() {
                write!(out, "\t{:.6e}", assign[[r, c]]).unwrap();
            }
            out.push('\n');
        }
    };
    match stage {
        Stage::Both(round) => {
            side("video", &fwd.videos, &round.pool_v.assign, true);
            side("item", &fwd.items, &round.pool_i.assign, false);
        }
        Stage::One {
            video_side: true,
            pool,
            ..
        } => side("video", &fwd.videos, &pool.assign, true),
        Stage::One { pool, .. } => side("item", &fwd.items, &pool.assign, false),
    }
    Ok(out)
}
