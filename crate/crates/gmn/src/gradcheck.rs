//! Finite-difference verification of the whole analytic gradient.
//!
//! Builds a fixed micro graph, forms a small ranking loss with frozen
//! negatives and dropout masks (so the loss is a pure function of the
//! parameters), and compares the hand-derived gradient of every coordinate
//! against a central difference.

use crate::config::{FieldSpec, ModelConfig, Variant};
use crate::graph::{mix, DualGraph, GraphBuilder};
use crate::model::{
    backward_user, forward_user, score, video_tower, video_tower_backward,
};
use crate::params::{ParamStore, ResolvedConfig, Tensors};
use crate::train::{dropout_mask, sample_negatives, sigmoid, softplus};
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const THRESHOLD: f64 = 1e-4;
const SALT_CHECK: u64 = 0x4744;

/// Three users over four videos and five items, every neighborhood distinct,
/// the first user carrying the densest subgraph.
pub fn micro_graph() -> DualGraph {
    let mut b = GraphBuilder::new();
    let users = ["u0", "u1", "u2"];
    let videos = ["v0", "v1", "v2", "v3"];
    let items = ["i0", "i1", "i2", "i3", "i4"];
    let mut id = 0u32;
    for key in users.iter().chain(&videos).chain(&items) {
        b.feature_row(key, &[("id", id)]).unwrap();
        id += 1;
    }
    for (ts, v) in ["v0", "v1", "v2"].iter().enumerate() {
        b.uv("u0", v, ts as i64);
    }
    for (ts, v) in ["v0", "v3"].iter().enumerate() {
        b.uv("u1", v, ts as i64);
    }
    for (ts, v) in ["v1", "v3"].iter().enumerate() {
        b.uv("u2", v, ts as i64);
    }
    for (ts, i) in ["i0", "i1", "i2", "i3"].iter().enumerate() {
        b.ui("u0", i, ts as i64);
    }
    for (ts, i) in ["i0", "i4"].iter().enumerate() {
        b.ui("u1", i, ts as i64);
    }
    for (ts, i) in ["i2", "i3", "i4"].iter().enumerate() {
        b.ui("u2", i, ts as i64);
    }
    b.build().expect("static micro graph")
}

fn micro_config(d: usize, seed: u64, metric_rank: usize, with_dropout: bool) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.fields = vec![FieldSpec {
        name: "id".into(),
        dim: d,
    }];
    cfg.k1 = 2;
    cfg.k2 = 2;
    cfg.levels = 1;
    cfg.temperature = 1.0;
    cfg.metric_rank = metric_rank;
    cfg.hidden = 16;
    cfg.lr = 0.01;
    cfg.lambda = 0.01;
    cfg.dropout = if with_dropout { 0.75 } else { 1.0 };
    cfg.dropout_is_keep = true;
    cfg.cap_videos = 8;
    cfg.cap_items = 8;
    cfg.negatives = 2;
    cfg.seed = seed;
    cfg
}

/// One frozen ranking task: a user, a dropout mask, and positive/negative
/// video pairs, all independent of the parameters.
struct Task {
    user: u32,
    mask: Option<Vec<f64>>,
    pairs: Vec<(u32, u32)>,
}

fn build_tasks(rc: &ResolvedConfig, graph: &DualGraph) -> Vec<Task> {
    let cfg = &rc.model;
    let mut tasks = Vec::new();
    for user in 0..graph.n_users() as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, user as u64, SALT_CHECK));
        let positives: Vec<u32> = graph
            .user_videos(user)
            .iter()
            .take(2)
            .map(|&(v, _)| v)
            .collect();
        let mut pairs = Vec::new();
        for &pos in &positives {
            for neg in sample_negatives(graph, user, cfg.negatives, &mut rng) {
                pairs.push((pos, neg));
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let mask = dropout_mask(cfg.dropout_keep(), cfg.fusion_width(), &mut rng);
        tasks.push(Task { user, mask, pairs });
    }
    tasks
}

fn loss(store: &ParamStore, graph: &DualGraph, tasks: &[Task]) -> f64 {
    let rc = &store.rc;
    let d = rc.model.node_width();
    let mut total = 0.0;
    for t in tasks {
        let fwd = forward_user(&store.values, rc, graph, t.user, t.mask.clone());
        for &(pos, neg) in &t.pairs {
            let s_pos = score(&fwd.z_u, &video_tower(&store.values, graph, pos, d));
            let s_neg = score(&fwd.z_u, &video_tower(&store.values, graph, neg, d));
            total += softplus(s_neg - s_pos);
        }
    }
    total + rc.model.lambda * store.sq_norm()
}

fn analytic(store: &ParamStore, graph: &DualGraph, tasks: &[Task]) -> Tensors {
    let rc = &store.rc;
    let d = rc.model.node_width();
    let mut grads = Tensors::zeros(rc);
    for t in tasks {
        let fwd = forward_user(&store.values, rc, graph, t.user, t.mask.clone());
        let mut d_z = vec![0.0; d];
        for &(pos, neg) in &t.pairs {
            let a_pos = video_tower(&store.values, graph, pos, d);
            let a_neg = video_tower(&store.values, graph, neg, d);
            let s_pos = score(&fwd.z_u, &a_pos);
            let s_neg = score(&fwd.z_u, &a_neg);
            let g = sigmoid(s_neg - s_pos); // d softplus(m)/dm
            for j in 0..d {
                d_z[j] += g * (a_neg[j] - a_pos[j]);
            }
            let d_a_pos: Vec<f64> = fwd.z_u.iter().map(|&z| -g * z).collect();
            let d_a_neg: Vec<f64> = fwd.z_u.iter().map(|&z| g * z).collect();
            video_tower_backward(&mut grads, graph, pos, &d_a_pos);
            video_tower_backward(&mut grads, graph, neg, &d_a_neg);
        }
        backward_user(&fwd, &store.values, rc, graph, &d_z, &mut grads);
    }
    // The penalty contributes only through active tensors.
    let lambda = rc.model.lambda;
    let mask = store.active_mask();
    let values: Vec<Vec<f64>> = store
        .values
        .flat()
        .iter()
        .map(|(_, s)| s.to_vec())
        .collect();
    for ((g, active), v) in grads.flat_mut().into_iter().zip(mask).zip(values) {
        if active {
            for (gj, vj) in g.1.iter_mut().zip(v) {
                *gj += 2.0 * lambda * vj;
            }
        }
    }
    grads
}

#[derive(Debug)]
pub struct GradReport {
    /// Worst relative error per tensor, in declaration order.
    pub tensors: Vec<(String, f64)>,
    pub worst: f64,
    pub threshold: f64,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

/// Compare the analytic gradient of every parameter coordinate against a
/// central finite difference on the micro graph.
pub fn gradcheck(
    d: usize,
    seed: u64,
    variant: Variant,
    metric_rank: usize,
    with_dropout: bool,
) -> Result<GradReport> {
    let graph = micro_graph();
    let cfg = micro_config(d, seed, metric_rank, with_dropout);
    cfg.validate()?;
    let rc = ResolvedConfig::resolve(&cfg, &graph, variant)?;
    let mut store = ParamStore::init(rc, seed);
    let tasks = build_tasks(&store.rc, &graph);
    let grads = analytic(&store, &graph, &tasks);

    let names: Vec<String> = grads.flat().iter().map(|(n, _)| n.clone()).collect();
    let sizes: Vec<usize> = grads.flat().iter().map(|(_, s)| s.len()).collect();
    let mut tensors = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    let mut coordinates = 0usize;
    for (t, (name, size)) in names.into_iter().zip(sizes).enumerate() {
        let mut tensor_worst = 0.0f64;
        for j in 0..size {
            let a = grads.flat()[t].1[j];
            let orig = store.values.flat()[t].1[j];
            store.values.flat_mut()[t].1[j] = orig + FD_STEP;
            let up = loss(&store, &graph, &tasks);
            store.values.flat_mut()[t].1[j] = orig - FD_STEP;
            let down = loss(&store, &graph, &tasks);
            store.values.flat_mut()[t].1[j] = orig;
            let f = (up - down) / (2.0 * FD_STEP);
            let err = (a - f).abs() / a.abs().max(f.abs()).max(1.0);
            tensor_worst = tensor_worst.max(err);
            coordinates += 1;
        }
        worst = worst.max(tensor_worst);
        tensors.push((name, tensor_worst));
    }
    Ok(GradReport {
        tensors,
        worst,
        threshold: THRESHOLD,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let started = Instant::now();
        let report = gradcheck(8, 7, Variant::Full, 0, false).unwrap();
        assert!(report.passed(), "worst {:.3e}", report.worst);
        assert!(report.coordinates > 1000, "checked {}", report.coordinates);
        assert!(
            started.elapsed().as_secs() < 10,
            "took {:?}",
            started.elapsed()
        );
    }

    #[test]
    fn factored_metric_and_dropout_gradients_match() {
        let report = gradcheck(8, 11, Variant::Full, 2, true).unwrap();
        assert!(report.passed(), "worst {:.3e}", report.worst);
        let names: Vec<&str> = report.tensors.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"metric.left"));
        assert!(names.contains(&"metric.right"));
    }

    #[test]
    fn ablated_variants_pass_and_skip_their_frozen_tensors() {
        for variant in [Variant::NoNodeMatching, Variant::NoUiGraph] {
            let report = gradcheck(6, 3, variant, 0, false).unwrap();
            assert!(report.passed(), "{variant:?} worst {:.3e}", report.worst);
        }
    }

    #[test]
    fn report_names_every_tensor_and_worst_is_the_max() {
        let report = gradcheck(4, 1, Variant::Full, 0, false).unwrap();
        assert!(!report.tensors.is_empty());
        let max = report
            .tensors
            .iter()
            .map(|&(_, e)| e)
            .fold(0.0f64, f64::max);
        assert_eq!(max, report.worst);
        assert!(report.tensors.iter().any(|(n, _)| n == "metric"));
        assert!(report.tensors.iter().any(|(n, _)| n == "mlp.w1"));
    }
}
