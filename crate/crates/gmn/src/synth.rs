//! Synthetic dual-graph generator with planted two-scale topic structure.
//!
//! Topics partition the video and item catalogs into contiguous blocks, and
//! each topic block splits further into subtopic sub-blocks. Every user gets
//! a topic mixture for watching and a second mixture for buying, plus one
//! preferred subtopic per side inside each topic. A `signal` knob couples
//! the buying side to the watching side (mixture and subtopics alike):
//! 1.0 copies them, 0.0 draws them independently. A `noise` knob makes a
//! fraction of purchases topic-agnostic, and `sub_noise` lets edges stray
//! from the preferred subtopic within their topic. Watch histories are
//! split per user by time, the most recent fifth becoming held-out retrieval
//! positives that never enter the graph.

use crate::graph::{mix, DualGraph, GraphBuilder, NodeKind};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub users: usize,
    pub videos: usize,
    pub items: usize,
    pub topics: usize,
    /// Subtopics per topic; the fine structure only cross-graph attention
    /// can exploit. 1 disables the second scale.
    pub subtopics: usize,
    /// Inclusive range of active topics per user mixture.
    pub active_min: usize,
    pub active_max: usize,
    /// 1.0 couples buying to watching exactly; 0.0 decouples them.
    pub signal: f64,
    /// Probability that a purchase ignores the user's mixture entirely.
    pub noise: f64,
    /// Probability that an edge ignores its preferred subtopic (staying
    /// inside its topic).
    pub sub_noise: f64,
    pub videos_per_user: usize,
    pub items_per_user: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            users: 1000,
            videos: 500,
            items: 1000,
            topics: 10,
            subtopics: 4,
            active_min: 2,
            active_max: 3,
            signal: 0.8,
            noise: 0.25,
            sub_noise: 0.1,
            videos_per_user: 10,
            items_per_user: 30,
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.users == 0 || self.videos == 0 || self.items == 0 {
            return Err(Error::Config("all universe sizes must be positive".into()));
        }
        if self.subtopics == 0 {
            return Err(Error::Config("subtopics must be at least 1".into()));
        }
        let cells = self.topics * self.subtopics;
        if cells > self.videos || cells > self.items {
            return Err(Error::Config(
                "more topic/subtopic cells than catalog entries on one side".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.signal)
            || !(0.0..=1.0).contains(&self.noise)
            || !(0.0..=1.0).contains(&self.sub_noise)
        {
            return Err(Error::Config(
                "signal, noise and sub_noise must lie in [0, 1]".into(),
            ));
        }
        if self.active_min == 0 || self.active_min > self.active_max {
            return Err(Error::Config(
                "active topic range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.videos_per_user == 0 || self.videos_per_user > self.videos {
            return Err(Error::Config("videos_per_user out of range".into()));
        }
        if self.items_per_user == 0 || self.items_per_user > self.items {
            return Err(Error::Config("items_per_user out of range".into()));
        }
        Ok(())
    }
}

/// Topic of catalog entry `idx` when `total` entries split into contiguous
/// blocks of near-equal size.
pub fn block_topic(idx: usize, total: usize, topics: usize) -> usize {
    idx * topics / total
}

/// Half-open index range `[lo, hi)` of one topic's block.
fn block_range(topic: usize, total: usize, topics: usize) -> (usize, usize) {
    let lo = (topic * total).div_ceil(topics);
    let hi = ((topic + 1) * total).div_ceil(topics);
    (lo, hi)
}

/// Half-open range of one subtopic's sub-block inside its topic block.
fn sub_range(
    topic: usize,
    sub: usize,
    total: usize,
    topics: usize,
    subtopics: usize,
) -> (usize, usize) {
    let (lo, hi) = block_range(topic, total, topics);
    let (slo, shi) = block_range(sub, hi - lo, subtopics);
    (lo + slo, lo + shi)
}

/// `(topic, subtopic)` of one catalog entry.
pub fn cell_of(idx: usize, total: usize, topics: usize, subtopics: usize) -> (usize, usize) {
    let t = block_topic(idx, total, topics);
    let (lo, hi) = block_range(t, total, topics);
    (t, block_topic(idx - lo, hi - lo, subtopics))
}

/// One user's planted mixtures, per-topic subtopic preferences, and drawn
/// edges (catalog indices, in draw order; the position doubles as the
/// timestamp).
#[derive(Debug, Clone)]
pub struct UserPlan {
    pub theta_v: Vec<f64>,
    pub theta_i: Vec<f64>,
    /// Preferred subtopic per topic when watching / when buying.
    pub sub_v: Vec<usize>,
    pub sub_i: Vec<usize>,
    pub video_edges: Vec<u32>,
    pub item_edges: Vec<u32>,
}

/// The generator output before any graph assembly.
#[derive(Debug, Clone)]
pub struct Raw {
    pub params: SynthParams,
    pub plans: Vec<UserPlan>,
}

const SALT_PLAN: u64 = 0x504c;
const SALT_VAL: u64 = 0x56414c;

/// Draw a sparse topic mixture: an active-count in the configured range,
/// uniform weights in `[0.5, 1.5]` over the chosen topics, normalized.
fn draw_mixture(rng: &mut ChaCha8Rng, topics: usize, lo: usize, hi: usize) -> Vec<f64> {
    let lo = lo.min(topics);
    let hi = hi.min(topics);
    let active = rng.gen_range(lo..=hi);
    let mut chosen: Vec<usize> = Vec::with_capacity(active);
    while chosen.len() < active {
        let t = rng.gen_range(0..topics);
        if !chosen.contains(&t) {
            chosen.push(t);
        }
    }
    let mut theta = vec![0.0; topics];
    let mut sum = 0.0;
    for &t in &chosen {
        let w = rng.gen_range(0.5..1.5);
        theta[t] = w;
        sum += w;
    }
    for v in &mut theta {
        *v /= sum;
    }
    theta
}

fn draw_topic(rng: &mut ChaCha8Rng, theta: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (t, &w) in theta.iter().enumerate() {
        acc += w;
        if u < acc {
            return t;
        }
    }
    theta.len() - 1
}

/// Draw `count` distinct catalog entries. Topic-agnostic noise draws pick a
/// uniform cell; the rest pick a topic from the mixture, then the preferred
/// subtopic (or a uniform one with probability `sub_noise`), then a uniform
/// entry in that sub-block. Duplicate draws retry a bounded number of times,
/// then the remainder fills from the lowest unused indices so generation
/// always terminates.
#[allow(clippy::too_many_arguments)]
fn draw_edges(
    rng: &mut ChaCha8Rng,
    theta: &[f64],
    prefer: &[usize],
    noise: f64,
    sub_noise: f64,
    count: usize,
    total: usize,
    topics: usize,
    subtopics: usize,
) -> Vec<u32> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < 50 * count + 100 {
        attempts += 1;
        let (t, s) = if noise > 0.0 && rng.gen::<f64>() < noise {
            (rng.gen_range(0..topics), rng.gen_range(0..subtopics))
        } else {
            let t = draw_topic(rng, theta);
            let s = if sub_noise > 0.0 && rng.gen::<f64>() < sub_noise {
                rng.gen_range(0..subtopics)
            } else {
                prefer[t]
            };
            (t, s)
        };
        let (lo, hi) = sub_range(t, s, total, topics, subtopics);
        let idx = (lo + rng.gen_range(0..hi - lo)) as u32;
        if seen.insert(idx) {
            out.push(idx);
        }
    }
    let mut fill = 0u32;
    while out.len() < count {
        if seen.insert(fill) {
            out.push(fill);
        }
        fill += 1;
    }
    out
}

/// Generate every user's mixtures and edges. Each user has an independent
/// counter-derived generator, so the output is insensitive to generation
/// order and fully determined by the seed.
pub fn plant(params: &SynthParams) -> Result<Raw> {
    params.validate()?;
    let mut plans = Vec::with_capacity(params.users);
    for u in 0..params.users {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(params.seed, u as u64, SALT_PLAN));
        let theta_v = draw_mixture(&mut rng, params.topics, params.active_min, params.active_max);
        let theta_indep =
            draw_mixture(&mut rng, params.topics, params.active_min, params.active_max);
        let theta_i: Vec<f64> = theta_v
            .iter()
            .zip(&theta_indep)
            .map(|(a, b)| params.signal * a + (1.0 - params.signal) * b)
            .collect();
        // One preferred subtopic per topic and side; the buying side copies
        // the watching side with probability `signal`.
        let sub_v: Vec<usize> = (0..params.topics)
            .map(|_| rng.gen_range(0..params.subtopics))
            .collect();
        let sub_i: Vec<usize> = sub_v
            .iter()
            .map(|&s| {
                if rng.gen_bool(params.signal) {
                    s
                } else {
                    rng.gen_range(0..params.subtopics)
                }
            })
            .collect();
        let video_edges = draw_edges(
            &mut rng,
            &theta_v,
            &sub_v,
            0.0,
            params.sub_noise,
            params.videos_per_user,
            params.videos,
            params.topics,
            params.subtopics,
        );
        let item_edges = draw_edges(
            &mut rng,
            &theta_i,
            &sub_i,
            params.noise,
            params.sub_noise,
            params.items_per_user,
            params.items,
            params.topics,
            params.subtopics,
        );
        plans.push(UserPlan {
            theta_v,
            theta_i,
            sub_v,
            sub_i,
            video_edges,
            item_edges,
        });
    }
    Ok(Raw {
        params: params.clone(),
        plans,
    })
}

/// Per-user most-frequent topic of the drawn edges on each side, ties going
/// to the smaller topic id.
pub fn realized_modal_topics(raw: &Raw) -> Vec<(usize, usize)> {
    let p = &raw.params;
    raw.plans
        .iter()
        .map(|plan| {
            let modal = |edges: &[u32], total: usize| {
                let mut counts = vec![0usize; p.topics];
                for &e in edges {
                    counts[block_topic(e as usize, total, p.topics)] += 1;
                }
                counts
                    .iter()
                    .enumerate()
                    .max_by_key(|&(t, &c)| (c, usize::MAX - t))
                    .map(|(t, _)| t)
                    .unwrap()
            };
            (
                modal(&plan.video_edges, p.videos),
                modal(&plan.item_edges, p.items),
            )
        })
        .collect()
}

/// Plug-in mutual information between two categorical samples, in nats,
/// with the Miller-Madow bias correction subtracted. Slightly negative
/// results are possible for independent variables.
pub fn mutual_information_mm(pairs: &[(usize, usize)], kx: usize, ky: usize) -> f64 {
    let n = pairs.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint = vec![0usize; kx * ky];
    let mut mx = vec![0usize; kx];
    let mut my = vec![0usize; ky];
    for &(x, y) in pairs {
        joint[x * ky + y] += 1;
        mx[x] += 1;
        my[y] += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let nonzero = |counts: &[usize]| counts.iter().filter(|&&c| c > 0).count() as f64;
    let plugin = entropy(&mx) + entropy(&my) - entropy(&joint);
    // Miller-Madow corrects each entropy by (K - 1) / 2n; combining the
    // three corrections penalizes the joint table's extra cells.
    plugin - ((nonzero(&mx) - 1.0) + (nonzero(&my) - 1.0) - (nonzero(&joint) - 1.0)) / (2.0 * nf)
}

/// One evaluation group: every held-out sample for one user (graph indices).
#[derive(Debug, Clone, PartialEq)]
pub struct ValGroup {
    pub user: u32,
    /// `(video, is_positive)` samples.
    pub samples: Vec<(u32, bool)>,
}

/// A ready-to-train instance: the graph built from the training edges, and
/// held-out per-user retrieval groups.
#[derive(Debug)]
pub struct Synth {
    pub graph: DualGraph,
    pub val: Vec<ValGroup>,
}

pub const NEGATIVES_PER_VAL_POSITIVE: usize = 4;

/// Assemble the training graph and validation groups from planted edges.
pub fn assemble(raw: &Raw) -> Result<Synth> {
    let p = &raw.params;
    let mut b = GraphBuilder::new();
    // Register features for the full catalogs so vocabulary sizes do not
    // depend on which entries happened to be drawn.
    for u in 0..p.users {
        b.feature_row(&format!("u{u}"), &[("id", u as u32)])?;
    }
    for v in 0..p.videos {
        b.feature_row(&format!("v{v}"), &[("id", (p.users + v) as u32)])?;
    }
    for i in 0..p.items {
        b.feature_row(&format!("i{i}"), &[("id", (p.users + p.videos + i) as u32)])?;
    }
    // Training edges: everything except each user's most recent fifth of
    // watches. Item edges are not split; retrieval is over videos.
    let mut val_edges: Vec<(usize, Vec<u32>)> = Vec::new();
    for (u, plan) in raw.plans.iter().enumerate() {
        let n = plan.video_edges.len();
        let n_val = n / 5;
        let n_train = n - n_val;
        for (ts, &v) in plan.video_edges[..n_train].iter().enumerate() {
            b.uv(&format!("u{u}"), &format!("v{v}"), ts as i64);
        }
        if n_val > 0 {
            val_edges.push((u, plan.video_edges[n_train..].to_vec()));
        }
        for (ts, &i) in plan.item_edges.iter().enumerate() {
            b.ui(&format!("u{u}"), &format!("i{i}"), ts as i64);
        }
    }
    let graph = b.build()?;

    // Validation groups against the graph's dense indices; positives whose
    // video never made it into the training graph are dropped.
    let mut val = Vec::with_capacity(val_edges.len());
    for (u, videos) in val_edges {
        let Some(user) = graph.lookup(NodeKind::User, &format!("u{u}")) else {
            continue; // the user had no training edge at all
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(p.seed, u as u64, SALT_VAL));
        let full_set: HashSet<u32> = raw.plans[u].video_edges.iter().copied().collect();
        let n_graph_videos = graph.n_videos() as u32;
        let mut samples = Vec::new();
        for v in &videos {
            let Some(gv) = graph.lookup(NodeKind::Video, &format!("v{v}")) else {
                continue;
            };
            samples.push((gv, true));
            let mut drawn = 0;
            let mut attempts = 0;
            while drawn < NEGATIVES_PER_VAL_POSITIVE && attempts < 10_000 {
                attempts += 1;
                let cand = rng.gen_range(0..n_graph_videos);
                let synth_idx: u32 = graph.key(crate::graph::NodeId::video(cand))[1..]
                    .parse()
                    .expect("generated video keys are v<idx>");
                if !full_set.contains(&synth_idx) {
                    samples.push((cand, false));
                    drawn += 1;
                }
            }
        }
        if !samples.is_empty() {
            val.push(ValGroup { user, samples });
        }
    }
    Ok(Synth { graph, val })
}

pub fn synthesize(params: &SynthParams) -> Result<Synth> {
    assemble(&plant(params)?)
}

/// Write validation groups as text: `user_key TAB video_key TAB 0|1`.
pub fn write_val(path: &Path, graph: &DualGraph, groups: &[ValGroup]) -> Result<()> {
    use std::io::Write;
    let mut w = Vec::new();
    for g in groups {
        let ukey = graph.key(crate::graph::NodeId::user(g.user));
        for &(v, pos) in &g.samples {
            writeln!(
                w,
                "{ukey}\t{}\t{}",
                graph.key(crate::graph::NodeId::video(v)),
                if pos { 1 } else { 0 }
            )
            .unwrap();
        }
    }
    std::fs::write(path, w).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read validation groups back, grouping consecutive lines per user.
/// Samples naming nodes absent from the graph are skipped and counted.
pub fn load_val(path: &Path, graph: &DualGraph) -> Result<(Vec<ValGroup>, usize)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut groups: Vec<ValGroup> = Vec::new();
    let mut skipped = 0usize;
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(ukey), Some(vkey), Some(label)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                line: no + 1,
                what: "expected user, video and label columns".into(),
            });
        };
        let positive = match label.trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    line: no + 1,
                    what: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let (Some(u), Some(v)) = (
            graph.lookup(NodeKind::User, ukey),
            graph.lookup(NodeKind::Video, vkey),
        ) else {
            skipped += 1;
            continue;
        };
        match groups.last_mut() {
            Some(g) if g.user == u => g.samples.push((v, positive)),
            _ => groups.push(ValGroup {
                user: u,
                samples: vec![(v, positive)],
            }),
        }
    }
    Ok((groups, skipped))
}
