//! Training: pairwise ranking loss over sampled negatives, batched gradient
//! accumulation, and the Adam step. An epoch is bit-reproducible for a given
//! config: users are shuffled by a seeded key, every user gets its own
//! counter-derived generator for negatives and dropout, and batches are cut
//! into a fixed number of chunks whose partial gradients merge in chunk
//! order no matter how the thread pool schedules them.

use crate::graph::{mix, DualGraph};
use crate::model::{
    backward_user, forward_user, score, video_tower, video_tower_backward, Forward,
};
use crate::params::{ParamStore, Tensors};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SALT_SHUFFLE: u64 = 0x5348;
const SALT_NEGATIVE: u64 = 0x4e45;
const SALT_DROPOUT: u64 = 0x4452;

/// Numerically safe `ln(1 + e^t)`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic sigmoid, evaluated without overflowing either tail.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Ranking loss over (positive, negative) score pairs plus the L2 penalty:
/// each pair contributes `ln(1 + exp(neg - pos))`.
pub fn bpr_loss(pairs: &[(f64, f64)], lambda: f64, sq_norm: f64) -> f64 {
    pairs.iter().map(|&(p, n)| softplus(n - p)).sum::<f64>() + lambda * sq_norm
}

/// Draw `count` independent uniform negatives for `user`: videos the user
/// has no edge to. Falls back to enumerating the complement when the watched
/// set covers most of the catalog; returns fewer (possibly zero) draws only
/// when no negative exists at all.
pub fn sample_negatives(
    graph: &DualGraph,
    user: u32,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let n_videos = graph.n_videos() as u32;
    let watched = graph.user_videos(user).len() as u32;
    let candidates = n_videos - watched;
    if candidates == 0 {
        return Vec::new();
    }
    // When rejection sampling would thrash, enumerate what is left instead.
    if candidates * 4 <= n_videos {
        let pool: Vec<u32> = (0..n_videos)
            .filter(|&v| !graph.user_has_video(user, v))
            .collect();
        return (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v = rng.gen_range(0..n_videos);
        if !graph.user_has_video(user, v) {
            out.push(v);
        }
    }
    out
}

/// Inverted-dropout mask over the fused representation: each coordinate is
/// kept with probability `keep` and scaled by `1/keep`, so evaluation needs
/// no rescaling. Returns `None` when dropout is off.
pub fn dropout_mask(keep: f64, width: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    if keep >= 1.0 {
        return None;
    }
    let scale = 1.0 / keep;
    Some(
        (0..width)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect(),
    )
}

/// Loss and pair count from one user's positives under the current params,
/// with gradients accumulated into `grads`.
fn user_pass(
    store_values: &Tensors,
    rc: &crate::params::ResolvedConfig,
    graph: &DualGraph,
    user: u32,
    epoch: usize,
    grads: &mut Tensors,
) -> (f64, usize) {
    let cfg = &rc.model;
    let d = cfg.node_width();
    let positives = graph.user_videos(user);
    if positives.is_empty() {
        return (0.0, 0);
    }
    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix(
        mix(cfg.seed, epoch as u64, SALT_DROPOUT),
        user as u64,
        SALT_DROPOUT,
    ));
    let mask = dropout_mask(cfg.dropout_keep(), cfg.fusion_width(), &mut drop_rng);
    let fwd: Forward = forward_user(store_values, rc, graph, user, mask);

    let mut neg_rng = ChaCha8Rng::seed_from_u64(mix(
        mix(cfg.seed, epoch as u64, SALT_NEGATIVE),
        user as u64,
        SALT_NEGATIVE,
    ));
    let mut d_z = vec![0.0; d];
    let mut loss = 0.0;
    let mut pairs = 0;
    for &(pos, _) in positives {
        let a_pos = video_tower(store_values, graph, pos, d);
        let s_pos = score(&fwd.z_u, &a_pos);
        let negatives = sample_negatives(graph, user, cfg.negatives, &mut neg_rng);
        let mut d_s_pos = 0.0;
        for neg in negatives {
            let a_neg = video_tower(store_values, graph, neg, d);
            let s_neg = score(&fwd.z_u, &a_neg);
            let t = s_neg - s_pos;
            loss += softplus(t);
            pairs += 1;
            let g = sigmoid(t); // d loss / d s_neg
            d_s_pos -= g;
            for j in 0..d {
                d_z[j] += g * a_neg[j];
            }
            let d_a_neg: Vec<f64> = fwd.z_u.iter().map(|z| g * z).collect();
            video_tower_backward(grads, graph, neg, &d_a_neg);
        }
        for j in 0..d {
            d_z[j] += d_s_pos * a_pos[j];
        }
        let d_a_pos: Vec<f64> = fwd.z_u.iter().map(|z| d_s_pos * z).collect();
        video_tower_backward(grads, graph, pos, &d_a_pos);
    }
    backward_user(&fwd, store_values, rc, graph, &d_z, grads);
    (loss, pairs)
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    /// Mean ranking loss per (positive, negative) pair over the epoch.
    pub data_loss: f64,
    /// `lambda * |params|^2` at the end of the epoch.
    pub reg_loss: f64,
    pub pairs: usize,
    pub batches: usize,
}

/// One pass over every user with at least one positive: forward, backward,
/// and an Adam step per batch of users.
pub fn train_epoch(store: &mut ParamStore, graph: &DualGraph, epoch: usize) -> Result<EpochStats> {
    let cfg = store.rc.model.clone();
    let mut users: Vec<u32> = (0..graph.n_users() as u32)
        .filter(|&u| !graph.user_videos(u).is_empty())
        .collect();
    // Seeded shuffle: order users by a keyed hash, fresh each epoch.
    users.sort_by_key(|&u| (mix(mix(cfg.seed, epoch as u64, SALT_SHUFFLE), u as u64, 1), u));

    let mut total_loss = 0.0;
    let mut total_pairs = 0usize;
    let mut batches = 0usize;
    for batch in users.chunks(cfg.batch_users.max(1)) {
        store.zero_grads();
        let chunk_size = batch.len().div_ceil(cfg.threads.max(1));
        let values = &store.values;
        let rc = &store.rc;
        let parts: Vec<(Tensors, f64, usize)> = batch
            .par_chunks(chunk_size)
            .map(|chunk| {
                let mut grads = Tensors::zeros(rc);
                let mut loss = 0.0;
                let mut pairs = 0;
                for &u in chunk {
                    let (l, p) = user_pass(values, rc, graph, u, epoch, &mut grads);
                    loss += l;
                    pairs += p;
                }
                (grads, loss, pairs)
            })
            .collect();
        for (part, loss, pairs) in parts {
            store.grads.accumulate(&part);
            total_loss += loss;
            total_pairs += pairs;
        }
        if !total_loss.is_finite() {
            return Err(Error::Invalid(format!(
                "training diverged: non-finite loss in epoch {epoch}"
            )));
        }
        store.adam_step(cfg.lr, cfg.lambda);
        batches += 1;
    }
    Ok(EpochStats {
        data_loss: if total_pairs > 0 {
            total_loss / total_pairs as f64
        } else {
            0.0
        },
        reg_loss: cfg.lambda * store.sq_norm(),
        pairs: total_pairs,
        batches,
    })
}

/// Score every video for `user` and keep the top `k`, ordered by descending
/// score with ascending video index breaking ties.
pub fn retrieve_topk(
    store: &ParamStore,
    graph: &DualGraph,
    user: u32,
    k: usize,
) -> Vec<(u32, f64)> {
    let d = store.rc.model.node_width();
    let fwd = forward_user(&store.values, &store.rc, graph, user, None);
    let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
    for v in 0..graph.n_videos() as u32 {
        let s = score(&fwd.z_u, &video_tower(&store.values, graph, v, d));
        // Insertion position under (score desc, index asc).
        let pos = best
            .partition_point(|&(bv, bs)| bs > s || (bs == s && bv < v));
        if pos < k {
            best.insert(pos, (v, s));
            best.truncate(k);
        }
    }
    best
}

/// Write the user vectors and video towers as single-precision text, one
/// node per line: key, then the vector entries.
pub fn export_embeddings(
    store: &ParamStore,
    graph: &DualGraph,
    out_dir: &std::path::Path,
) -> Result<()> {
    use std::io::Write;
    let d = store.rc.model.node_width();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let user_path = out_dir.join("users.tsv");
    let mut w = Vec::new();
    for u in 0..graph.n_users() as u32 {
        let fwd = forward_user(&store.values, &store.rc, graph, u, None);
        write!(w, "{}", graph.key(crate::graph::NodeId::user(u))).unwrap();
        for z in &fwd.z_u {
            write!(w, "\t{:.6e}", *z as f32).unwrap();
        }
        writeln!(w).unwrap();
    }
    std::fs::write(&user_path, w).map_err(|e| Error::io(user_path.display().to_string(), e))?;

    let video_path = out_dir.join("videos.tsv");
    let mut w = Vec::new();
    for v in 0..graph.n_videos() as u32 {
        let a = video_tower(&store.values, graph, v, d);
        write!(w, "{}", graph.key(crate::graph::NodeId::video(v))).unwrap();
        for x in &a {
            write!(w, "\t{:.6e}", *x as f32).unwrap();
        }
        writeln!(w).unwrap();
    }
    std::fs::write(&video_path, w).map_err(|e| Error::io(video_path.display().to_string(), e))?;
    Ok(())
}

/// Parse one exported embedding file back into key-indexed vectors.
pub fn read_embeddings(path: &std::path::Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let key = parts
            .next()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::Malformed {
                path: path.display().to_string(),
                line: idx + 1,
                what: "empty line".into(),
            })?;
        let vec: Vec<f64> = parts
            .map(|p| {
                p.parse().map_err(|_| Error::Malformed {
                    path: path.display().to_string(),
                    line: idx + 1,
                    what: format!("bad number {p:?}"),
                })
            })
            .collect::<Result<_>>()?;
        out.push((key.to_string(), vec));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FieldSpec, ModelConfig, Variant};
    use crate::graph::GraphBuilder;
    use crate::params::ResolvedConfig;

    #[test]
    fn ranking_loss_matches_frozen_values() {
        // Equal scores: ln 2. A two-point gap: ln(1 + e^-2).
        let ln2 = std::f64::consts::LN_2;
        assert!((bpr_loss(&[(1.0, 1.0)], 0.0, 0.0) - ln2).abs() < 1e-12);
        assert!((bpr_loss(&[(2.0, 0.0)], 0.0, 0.0) - 0.12692801104297263).abs() < 1e-12);
        // The penalty adds once, scaled by lambda.
        assert!((bpr_loss(&[(1.0, 1.0)], 0.5, 4.0) - (ln2 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable_in_both_tails() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-800.0) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-30.0).is_finite());
    }

    #[test]
    fn sigmoid_is_the_softplus_slope() {
        let h = 1e-6;
        for &t in &[-5.0, -0.7, 0.0, 0.3, 4.0] {
            let fd = (softplus(t + h) - softplus(t - h)) / (2.0 * h);
            assert!((sigmoid(t) - fd).abs() < 1e-8, "t={t}");
        }
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    /// A catalog of `n_videos` videos where user 0 watched the first
    /// `watched` of them. Nodes only exist once a log line mentions them, so
    /// a second user watches everything to put the whole catalog in play.
    fn catalog_graph(n_videos: usize, watched: usize) -> DualGraph {
        let mut b = GraphBuilder::new();
        b.feature_row("u0", &[("id", 0)]).unwrap();
        b.feature_row("pad", &[("id", 1)]).unwrap();
        for v in 0..n_videos {
            b.feature_row(&format!("v{v}"), &[("id", (v + 2) as u32)])
                .unwrap();
        }
        b.feature_row("i0", &[("id", (n_videos + 2) as u32)]).unwrap();
        for v in 0..watched {
            b.uv("u0", &format!("v{v}"), v as i64);
        }
        for v in 0..n_videos {
            b.uv("pad", &format!("v{v}"), v as i64);
        }
        b.ui("u0", "i0", 0);
        b.build().unwrap()
    }

    #[test]
    fn negative_samples_avoid_watched_videos_and_stay_uniform() {
        let graph = catalog_graph(50, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0usize; 50];
        let draws = 47_000;
        for v in sample_negatives(&graph, 0, draws, &mut rng) {
            assert!(!graph.user_has_video(0, v));
            counts[v as usize] += 1;
        }
        for &c in &counts[..3] {
            assert_eq!(c, 0);
        }
        // Pearson statistic against the uniform null over the 47 candidates:
        // mean 46, sd sqrt(92); stay within five sigmas.
        let expected = draws as f64 / 47.0;
        let chi2: f64 = counts[3..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 46.0 + 5.0 * 92.0_f64.sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn negative_sampling_survives_a_nearly_exhausted_catalog() {
        let graph = catalog_graph(50, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let negs = sample_negatives(&graph, 0, 1000, &mut rng);
        assert_eq!(negs.len(), 1000);
        assert!(negs.iter().all(|&v| v == 48 || v == 49));
        assert!(negs.contains(&48));
        assert!(negs.contains(&49));
        // Fully exhausted: nothing to draw.
        let graph = catalog_graph(50, 50);
        assert!(sample_negatives(&graph, 0, 4, &mut rng).is_empty());
    }

    #[test]
    fn dropout_mask_scales_kept_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = dropout_mask(0.75, 4000, &mut rng).unwrap();
        let kept = mask.iter().filter(|&&m| m != 0.0).count();
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.75).abs() < 1e-15));
        // Loose binomial bound: 3000 +- 5 sigma (~137).
        assert!((kept as f64 - 3000.0).abs() < 140.0, "kept {kept}");
        assert!(dropout_mask(1.0, 10, &mut rng).is_none());
    }

    /// A denser toy: four users, six videos, five items.
    fn train_graph() -> DualGraph {
        let mut b = GraphBuilder::new();
        let mut id = 0u32;
        for u in 0..4 {
            b.feature_row(&format!("u{u}"), &[("id", id)]).unwrap();
            id += 1;
        }
        for v in 0..6 {
            b.feature_row(&format!("v{v}"), &[("id", id)]).unwrap();
            id += 1;
        }
        for i in 0..5 {
            b.feature_row(&format!("i{i}"), &[("id", id)]).unwrap();
            id += 1;
        }
        let uv = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 4), (3, 4), (3, 5)];
        for (n, &(u, v)) in uv.iter().enumerate() {
            b.uv(&format!("u{u}"), &format!("v{v}"), n as i64);
        }
        let ui = [(0, 0), (0, 1), (1, 2), (2, 2), (2, 3), (3, 4), (3, 0)];
        for (n, &(u, i)) in ui.iter().enumerate() {
            b.ui(&format!("u{u}"), &format!("i{i}"), n as i64);
        }
        b.build().unwrap()
    }

    fn train_store(graph: &DualGraph, lr: f64, dropout_keep: f64) -> ParamStore {
        let mut cfg = ModelConfig::default();
        cfg.fields = vec![FieldSpec {
            name: "id".into(),
            dim: 4,
        }];
        cfg.hidden = 8;
        cfg.k1 = 2;
        cfg.k2 = 2;
        cfg.lr = lr;
        cfg.lambda = 1e-4;
        cfg.dropout = dropout_keep;
        cfg.dropout_is_keep = true;
        cfg.batch_users = 3;
        cfg.threads = 2;
        cfg.negatives = 4;
        let rc = ResolvedConfig::resolve(&cfg, graph, Variant::Full).unwrap();
        ParamStore::init(rc, 42)
    }

    #[test]
    fn identical_seeds_train_bit_identically() {
        let graph = train_graph();
        let mut a = train_store(&graph, 0.01, 0.8);
        let mut b = train_store(&graph, 0.01, 0.8);
        for epoch in 0..2 {
            let sa = train_epoch(&mut a, &graph, epoch).unwrap();
            let sb = train_epoch(&mut b, &graph, epoch).unwrap();
            assert_eq!(sa.data_loss.to_bits(), sb.data_loss.to_bits());
        }
        for ((_, x), (_, y)) in a.values.flat().iter().zip(b.values.flat().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let graph = train_graph();
        let mut store = train_store(&graph, 0.0, 1.0);
        let before: Vec<Vec<u64>> = store
            .values
            .flat()
            .iter()
            .map(|(_, s)| s.iter().map(|v| v.to_bits()).collect())
            .collect();
        let stats = train_epoch(&mut store, &graph, 0).unwrap();
        assert!(stats.data_loss.is_finite());
        assert!(stats.pairs > 0);
        for ((_, s), b) in store.values.flat().iter().zip(&before) {
            let now: Vec<u64> = s.iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, b);
        }
    }

    #[test]
    fn training_reduces_the_ranking_loss() {
        let graph = train_graph();
        let mut store = train_store(&graph, 0.02, 1.0);
        let first = train_epoch(&mut store, &graph, 0).unwrap();
        let mut last = first;
        for epoch in 1..15 {
            last = train_epoch(&mut store, &graph, epoch).unwrap();
        }
        assert!(
            last.data_loss < first.data_loss,
            "no improvement: {} -> {}",
            first.data_loss,
            last.data_loss
        );
    }

    #[test]
    fn retrieval_matches_a_full_sort_and_prefixes_nest() {
        let graph = train_graph();
        let mut store = train_store(&graph, 0.02, 1.0);
        for epoch in 0..3 {
            train_epoch(&mut store, &graph, epoch).unwrap();
        }
        let d = store.rc.model.node_width();
        for user in 0..4u32 {
            let fwd = forward_user(&store.values, &store.rc, &graph, user, None);
            let mut all: Vec<(u32, f64)> = (0..graph.n_videos() as u32)
                .map(|v| (v, score(&fwd.z_u, &video_tower(&store.values, &graph, v, d))))
                .collect();
            all.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then_with(|| a.0.cmp(&b.0))
            });
            let full = retrieve_topk(&store, &graph, user, graph.n_videos());
            assert_eq!(full.len(), all.len());
            for ((va, sa), (vb, sb)) in full.iter().zip(&all) {
                assert_eq!(va, vb);
                assert_eq!(sa.to_bits(), sb.to_bits());
            }
            let mut prev: Option<Vec<u32>> = None;
            for k in 1..=6 {
                let got: Vec<u32> = retrieve_topk(&store, &graph, user, k)
                    .iter()
                    .map(|&(v, _)| v)
                    .collect();
                assert_eq!(got.len(), k.min(graph.n_videos()));
                if let Some(p) = &prev {
                    assert_eq!(&got[..p.len()], p.as_slice());
                }
                prev = Some(got);
            }
        }
    }

    #[test]
    fn equal_scores_break_ties_by_video_index() {
        let graph = train_graph();
        let mut store = train_store(&graph, 0.0, 1.0);
        // Identical embeddings for every node make every tower equal, so all
        // scores collapse to one value.
        let first_row: Vec<f64> = store.values.tables[0].row(0).to_vec();
        for mut row in store.values.tables[0].outer_iter_mut() {
            row.assign(&ndarray::ArrayView1::from(&first_row));
        }
        let top = retrieve_topk(&store, &graph, 0, 4);
        let ids: Vec<u32> = top.iter().map(|&(v, _)| v).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        let s0 = top[0].1;
        assert!(top.iter().all(|&(_, s)| (s - s0).abs() < 1e-12));
    }

    #[test]
    fn exported_embeddings_reproduce_scores_in_single_precision() {
        let graph = train_graph();
        let mut store = train_store(&graph, 0.02, 1.0);
        for epoch in 0..3 {
            train_epoch(&mut store, &graph, epoch).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        export_embeddings(&store, &graph, dir.path()).unwrap();
        let users = read_embeddings(&dir.path().join("users.tsv")).unwrap();
        let videos = read_embeddings(&dir.path().join("videos.tsv")).unwrap();
        assert_eq!(users.len(), 4);
        assert_eq!(videos.len(), 6);
        let d = store.rc.model.node_width();
        for (u, (ukey, uvec)) in users.iter().enumerate() {
            assert_eq!(ukey, &format!("u{u}"));
            let fwd = forward_user(&store.values, &store.rc, &graph, u as u32, None);
            for (v, (_, vvec)) in videos.iter().enumerate() {
                let exact = score(
                    &fwd.z_u,
                    &video_tower(&store.values, &graph, v as u32, d),
                );
                let approx: f64 = uvec.iter().zip(vvec).map(|(a, b)| a * b).sum();
                assert!(
                    (exact - approx).abs() <= 1e-5 * exact.abs().max(1.0),
                    "user {u} video {v}: {exact} vs {approx}"
                );
            }
        }
    }
}
