//! The full scoring pipeline for one user: embed the capped subgraph, run
//! one mean-aggregation pass over the bipartite neighborhoods, match the two
//! sides at the node level and again at the preference level, fuse, and
//! project to the user vector that is dotted against a video tower.
//!
//! Ablation variants reroute rather than reshape: a disabled matching stage
//! zero-pads its half, a disabled graph side empties its node list, and all
//! downstream widths stay identical so every variant shares one MLP shape.
//! Backwards are hand-derived and accumulate into a caller-owned gradient
//! set; there is no autodiff anywhere.

use crate::embed::{node_embedding, node_embedding_backward, pairwise_mean};
use crate::graph::{DualGraph, NodeId};
use crate::matchnode::{match_nodes, match_nodes_backward, NodeMatch};
use crate::params::{ResolvedConfig, Tensors};
use crate::pref::{
    mean_rows, mean_rows_backward, pool, pool_backward, pref_round, pref_round_backward, Pool,
    PrefRound,
};
use ndarray::Array2;

/// One executed preference-level round. When only one side of the subgraph
/// exists there is nothing to match against, so that round is a pooling step
/// whose output is zero-padded to the round's full width.
#[derive(Debug, Clone)]
pub enum Stage {
    Both(PrefRound),
    One {
        video_side: bool,
        pool: Pool,
        /// `[pooled centers | zeros]`, the width-doubled round output.
        h_out: Array2<f64>,
    },
}

impl Stage {
    fn out_v(&self) -> Option<&Array2<f64>> {
        match self {
            Stage::Both(r) => Some(&r.hv),
            Stage::One {
                video_side: true,
                h_out,
                ..
            } => Some(h_out),
            _ => None,
        }
    }
    fn out_i(&self) -> Option<&Array2<f64>> {
        match self {
            Stage::Both(r) => Some(&r.hi),
            Stage::One {
                video_side: false,
                h_out,
                ..
            } => Some(h_out),
            _ => None,
        }
    }
}

/// Forward cache for one user: every intermediate the backward pass reads.
#[derive(Debug, Clone)]
pub struct Forward {
    pub user: u32,
    /// Subgraph node lists after variant routing (a disabled side is empty).
    pub videos: Vec<u32>,
    pub items: Vec<u32>,
    /// Neighborhood-averaged representations of the subgraph nodes.
    pub xv: Array2<f64>,
    pub xi: Array2<f64>,
    /// Mean of the raw subgraph embeddings per side; falls back to the
    /// user's own embedding when the side is empty.
    pub p_u: Vec<f64>,
    pub q_u: Vec<f64>,
    /// Node-level matching cache, when both sides existed and the stage ran.
    pub nm: Option<NodeMatch>,
    /// Node-stage outputs, twice the node width (the cross half may be zero).
    pub hv0: Array2<f64>,
    pub hi0: Array2<f64>,
    pub stages: Vec<Stage>,
    /// Per-side summaries at the full summary width (zero when absent).
    pub gv: Vec<f64>,
    pub gi: Vec<f64>,
    /// `[gv | gi | p_u | q_u]` before and after dropout scaling.
    pub fused: Vec<f64>,
    pub dropped: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    /// The user vector scored against video towers.
    pub z_u: Vec<f64>,
}

fn raw_embedding(values: &Tensors, graph: &DualGraph, node: NodeId, out: &mut [f64]) {
    node_embedding(&values.tables, graph.features(node), out);
}

/// Neighborhood-averaged representation of one video: the mean of its
/// watchers' embeddings, or its own embedding when nobody watched it.
pub fn video_tower(values: &Tensors, graph: &DualGraph, video: u32, d: usize) -> Vec<f64> {
    tower(values, graph, NodeId::video(video), graph.video_users(video), d)
}

/// The same aggregation for an item node.
pub fn item_tower(values: &Tensors, graph: &DualGraph, item: u32, d: usize) -> Vec<f64> {
    tower(values, graph, NodeId::item(item), graph.item_users(item), d)
}

fn tower(
    values: &Tensors,
    graph: &DualGraph,
    node: NodeId,
    users: &[(u32, i64)],
    d: usize,
) -> Vec<f64> {
    let mut own = vec![0.0; d];
    raw_embedding(values, graph, node, &mut own);
    if users.is_empty() {
        return own;
    }
    let mut buf = vec![0.0; users.len() * d];
    for (slot, &(u, _)) in users.iter().enumerate() {
        raw_embedding(values, graph, NodeId::user(u), &mut buf[slot * d..(slot + 1) * d]);
    }
    let rows: Vec<&[f64]> = buf.chunks_exact(d).collect();
    pairwise_mean(&rows, &own)
}

/// Backward of a tower: the gradient splits evenly over the watchers'
/// embedding rows, or lands on the node's own row when it had none.
pub fn tower_backward(
    grads: &mut Tensors,
    graph: &DualGraph,
    node: NodeId,
    users: &[(u32, i64)],
    d_a: &[f64],
) {
    if users.is_empty() {
        node_embedding_backward(&mut grads.tables, graph.features(node), d_a);
        return;
    }
    let share: Vec<f64> = d_a.iter().map(|g| g / users.len() as f64).collect();
    for &(u, _) in users {
        node_embedding_backward(&mut grads.tables, graph.features(NodeId::user(u)), &share);
    }
}

pub fn video_tower_backward(grads: &mut Tensors, graph: &DualGraph, video: u32, d_a: &[f64]) {
    tower_backward(grads, graph, NodeId::video(video), graph.video_users(video), d_a);
}

pub fn item_tower_backward(grads: &mut Tensors, graph: &DualGraph, item: u32, d_a: &[f64]) {
    tower_backward(grads, graph, NodeId::item(item), graph.item_users(item), d_a);
}

fn pad_to(mut v: Vec<f64>, width: usize) -> Vec<f64> {
    debug_assert!(v.len() <= width);
    v.resize(width, 0.0);
    v
}

/// Append a zero block on the right: `[h | 0]`, doubling the width.
fn pad_cols(h: &Array2<f64>) -> Array2<f64> {
    let (n, w) = h.dim();
    let mut out = Array2::zeros((n, 2 * w));
    out.slice_mut(ndarray::s![.., ..w]).assign(h);
    out
}

/// Run the whole pipeline for one user. `mask` is the inverted-dropout scale
/// vector for the fused representation (absent at evaluation time).
pub fn forward_user(
    values: &Tensors,
    rc: &ResolvedConfig,
    graph: &DualGraph,
    user: u32,
    mask: Option<Vec<f64>>,
) -> Forward {
    let cfg = &rc.model;
    let variant = rc.variant;
    let d = cfg.node_width();
    let sub = graph.extract_subgraph(user, cfg.cap_videos, cfg.cap_items, cfg.seed);
    let videos = if variant.use_uv() { sub.videos } else { Vec::new() };
    let items = if variant.use_ui() { sub.items } else { Vec::new() };
    let (nv, ni) = (videos.len(), items.len());

    let mut x_u = vec![0.0; d];
    raw_embedding(values, graph, NodeId::user(user), &mut x_u);

    // Neighborhood-averaged side matrices for matching.
    let mut xv = Array2::zeros((nv, d));
    for (r, &v) in videos.iter().enumerate() {
        let a = video_tower(values, graph, v, d);
        xv.row_mut(r).assign(&ndarray::ArrayView1::from(&a));
    }
    let mut xi = Array2::zeros((ni, d));
    for (r, &i) in items.iter().enumerate() {
        let b = item_tower(values, graph, i, d);
        xi.row_mut(r).assign(&ndarray::ArrayView1::from(&b));
    }

    // Raw-embedding means per side for the user's own aggregate.
    let p_u = side_mean(values, graph, &videos, NodeId::video, &x_u, d);
    let q_u = side_mean(values, graph, &items, NodeId::item, &x_u, d);

    // Node-level matching (needs both sides).
    let (nm, hv0, hi0) = if variant.node_matching() && nv > 0 && ni > 0 {
        let nm = match_nodes(&xv, &xi, &values.metric);
        let (hv0, hi0) = (nm.hv.clone(), nm.hi.clone());
        (Some(nm), hv0, hi0)
    } else {
        (None, pad_cols(&xv), pad_cols(&xi))
    };

    // Preference-level rounds.
    let mut stages = Vec::new();
    let e = cfg.summary_width();
    let (gv, gi);
    if variant.pref_matching() && (nv > 0 || ni > 0) {
        let mut hv_cur = hv0.clone();
        let mut hi_cur = hi0.clone();
        for level in 1..=cfg.levels {
            let cv = &values.cent_v[level - 1];
            let ci = &values.cent_i[level - 1];
            if nv > 0 && ni > 0 {
                let r = pref_round(&hv_cur, &hi_cur, cv, ci, cfg.temperature);
                hv_cur = r.hv.clone();
                hi_cur = r.hi.clone();
                stages.push(Stage::Both(r));
            } else if nv > 0 {
                let p = pool(&hv_cur, cv, cfg.temperature);
                let h_out = pad_cols(&p.z);
                hv_cur = h_out.clone();
                stages.push(Stage::One {
                    video_side: true,
                    pool: p,
                    h_out,
                });
            } else {
                let p = pool(&hi_cur, ci, cfg.temperature);
                let h_out = pad_cols(&p.z);
                hi_cur = h_out.clone();
                stages.push(Stage::One {
                    video_side: false,
                    pool: p,
                    h_out,
                });
            }
        }
        gv = if nv > 0 { mean_rows(&hv_cur).to_vec() } else { vec![0.0; e] };
        gi = if ni > 0 { mean_rows(&hi_cur).to_vec() } else { vec![0.0; e] };
    } else {
        gv = if nv > 0 {
            pad_to(mean_rows(&hv0).to_vec(), e)
        } else {
            vec![0.0; e]
        };
        gi = if ni > 0 {
            pad_to(mean_rows(&hi0).to_vec(), e)
        } else {
            vec![0.0; e]
        };
    }

    // Fuse, drop, project.
    let mut fused = Vec::with_capacity(cfg.fusion_width());
    fused.extend_from_slice(&gv);
    fused.extend_from_slice(&gi);
    fused.extend_from_slice(&p_u);
    fused.extend_from_slice(&q_u);
    debug_assert_eq!(fused.len(), cfg.fusion_width());
    let dropped: Vec<f64> = match &mask {
        Some(m) => fused.iter().zip(m).map(|(f, s)| f * s).collect(),
        None => fused.clone(),
    };
    let hidden_pre: Vec<f64> = (0..cfg.hidden)
        .map(|h| {
            let mut s = values.b1[h];
            for (j, &f) in dropped.iter().enumerate() {
                s += values.w1[[h, j]] * f;
            }
            s
        })
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let z_u: Vec<f64> = (0..d)
        .map(|o| {
            let mut s = values.b2[o];
            for (h, &v) in hidden.iter().enumerate() {
                s += values.w2[[o, h]] * v;
            }
            s
        })
        .collect();

    Forward {
        user,
        videos,
        items,
        xv,
        xi,
        p_u,
        q_u,
        nm,
        hv0,
        hi0,
        stages,
        gv,
        gi,
        fused,
        dropped,
        mask,
        hidden_pre,
        hidden,
        z_u,
    }
}

fn side_mean(
    values: &Tensors,
    graph: &DualGraph,
    nodes: &[u32],
    make: fn(u32) -> NodeId,
    own: &[f64],
    d: usize,
) -> Vec<f64> {
    if nodes.is_empty() {
        return own.to_vec();
    }
    let mut buf = vec![0.0; nodes.len() * d];
    for (slot, &n) in nodes.iter().enumerate() {
        raw_embedding(values, graph, make(n), &mut buf[slot * d..(slot + 1) * d]);
    }
    let rows: Vec<&[f64]> = buf.chunks_exact(d).collect();
    pairwise_mean(&rows, own)
}

/// Retrieval score: the user vector dotted with a video tower.
pub fn score(z_u: &[f64], a_t: &[f64]) -> f64 {
    z_u.iter().zip(a_t).map(|(a, b)| a * b).sum()
}

/// Push `d_z` (the accumulated gradient on this user's vector) back through
/// the entire user pipeline into `grads`.
pub fn backward_user(
    fwd: &Forward,
    values: &Tensors,
    rc: &ResolvedConfig,
    graph: &DualGraph,
    d_z: &[f64],
    grads: &mut Tensors,
) {
    let cfg = &rc.model;
    let d = cfg.node_width();
    let e = cfg.summary_width();
    let (nv, ni) = (fwd.videos.len(), fwd.items.len());

    // MLP backward.
    let hidden_n = cfg.hidden;
    let mut d_hidden = vec![0.0; hidden_n];
    for o in 0..d {
        grads.b2[o] += d_z[o];
        for h in 0..hidden_n {
            grads.w2[[o, h]] += d_z[o] * fwd.hidden[h];
            d_hidden[h] += values.w2[[o, h]] * d_z[o];
        }
    }
    let fw = cfg.fusion_width();
    let mut d_dropped = vec![0.0; fw];
    for h in 0..hidden_n {
        if fwd.hidden_pre[h] <= 0.0 {
            continue;
        }
        let g = d_hidden[h];
        grads.b1[h] += g;
        for j in 0..fw {
            grads.w1[[h, j]] += g * fwd.dropped[j];
            d_dropped[j] += values.w1[[h, j]] * g;
        }
    }
    let d_fused: Vec<f64> = match &fwd.mask {
        Some(m) => d_dropped.iter().zip(m).map(|(g, s)| g * s).collect(),
        None => d_dropped,
    };
    let (d_gv, rest) = d_fused.split_at(e);
    let (d_gi, rest) = rest.split_at(e);
    let (d_pu, d_qu) = rest.split_at(d);

    // User-aggregate means over raw embeddings.
    side_mean_backward(grads, graph, &fwd.videos, NodeId::video, fwd.user, d_pu);
    side_mean_backward(grads, graph, &fwd.items, NodeId::item, fwd.user, d_qu);

    // Summaries back to the node-stage outputs.
    let mut d_hv0 = Array2::zeros(fwd.hv0.dim());
    let mut d_hi0 = Array2::zeros(fwd.hi0.dim());
    if cfg.levels > 0 && !fwd.stages.is_empty() {
        // Gradient on each side's final stage output.
        let mut d_hv_cur: Option<Array2<f64>> = fwd.stages.last().and_then(Stage::out_v).map(|h| {
            let mut g = Array2::zeros(h.dim());
            mean_rows_backward(d_gv, &mut g);
            g
        });
        let mut d_hi_cur: Option<Array2<f64>> = fwd.stages.last().and_then(Stage::out_i).map(|h| {
            let mut g = Array2::zeros(h.dim());
            mean_rows_backward(d_gi, &mut g);
            g
        });
        for (idx, stage) in fwd.stages.iter().enumerate().rev() {
            // Inputs to this stage are the previous stage's outputs.
            let hv_in = if idx == 0 {
                &fwd.hv0
            } else {
                fwd.stages[idx - 1].out_v().unwrap_or(&fwd.hv0)
            };
            let hi_in = if idx == 0 {
                &fwd.hi0
            } else {
                fwd.stages[idx - 1].out_i().unwrap_or(&fwd.hi0)
            };
            let cv = &values.cent_v[idx];
            let ci = &values.cent_i[idx];
            match stage {
                Stage::Both(r) => {
                    let mut d_hv_in = Array2::zeros(hv_in.dim());
                    let mut d_hi_in = Array2::zeros(hi_in.dim());
                    pref_round_backward(
                        r,
                        hv_in,
                        hi_in,
                        cv,
                        ci,
                        cfg.temperature,
                        d_hv_cur.as_ref().unwrap(),
                        d_hi_cur.as_ref().unwrap(),
                        &mut d_hv_in,
                        &mut d_hi_in,
                        &mut grads.cent_v[idx],
                        &mut grads.cent_i[idx],
                    );
                    d_hv_cur = Some(d_hv_in);
                    d_hi_cur = Some(d_hi_in);
                }
                Stage::One { video_side, pool: p, .. } => {
                    // Output was `[pooled | 0]`; only the left block carries
                    // gradient back into the pooling.
                    if *video_side {
                        let w = p.z.ncols();
                        let d_out = d_hv_cur.as_ref().unwrap();
                        let d_zv = d_out.slice(ndarray::s![.., ..w]).to_owned();
                        let mut d_h_in = Array2::zeros(hv_in.dim());
                        pool_backward(
                            p,
                            hv_in,
                            cv,
                            cfg.temperature,
                            &d_zv,
                            &mut d_h_in,
                            &mut grads.cent_v[idx],
                        );
                        d_hv_cur = Some(d_h_in);
                    } else {
                        let w = p.z.ncols();
                        let d_out = d_hi_cur.as_ref().unwrap();
                        let d_zi = d_out.slice(ndarray::s![.., ..w]).to_owned();
                        let mut d_h_in = Array2::zeros(hi_in.dim());
                        pool_backward(
                            p,
                            hi_in,
                            ci,
                            cfg.temperature,
                            &d_zi,
                            &mut d_h_in,
                            &mut grads.cent_i[idx],
                        );
                        d_hi_cur = Some(d_h_in);
                    }
                }
            }
        }
        if let Some(g) = d_hv_cur {
            d_hv0 += &g;
        }
        if let Some(g) = d_hi_cur {
            d_hi0 += &g;
        }
    } else {
        // No preference rounds ran: the summaries are padded means of the
        // node-stage outputs.
        if nv > 0 {
            mean_rows_backward(&d_gv[..fwd.hv0.ncols()], &mut d_hv0);
        }
        if ni > 0 {
            mean_rows_backward(&d_gi[..fwd.hi0.ncols()], &mut d_hi0);
        }
    }

    // Node stage back to the side matrices.
    let mut d_xv = Array2::zeros((nv, d));
    let mut d_xi = Array2::zeros((ni, d));
    match &fwd.nm {
        Some(nm) => {
            match_nodes_backward(
                nm,
                &fwd.xv,
                &fwd.xi,
                &values.metric,
                &d_hv0,
                &d_hi0,
                &mut d_xv,
                &mut d_xi,
                &mut grads.metric,
            );
        }
        None => {
            if nv > 0 {
                d_xv += &d_hv0.slice(ndarray::s![.., ..d]);
            }
            if ni > 0 {
                d_xi += &d_hi0.slice(ndarray::s![.., ..d]);
            }
        }
    }

    // Side matrices back to embedding rows through the towers.
    for (r, &v) in fwd.videos.iter().enumerate() {
        let row: Vec<f64> = d_xv.row(r).to_vec();
        video_tower_backward(grads, graph, v, &row);
    }
    for (r, &i) in fwd.items.iter().enumerate() {
        let row: Vec<f64> = d_xi.row(r).to_vec();
        item_tower_backward(grads, graph, i, &row);
    }
}

fn side_mean_backward(
    grads: &mut Tensors,
    graph: &DualGraph,
    nodes: &[u32],
    make: fn(u32) -> NodeId,
    user: u32,
    d_mean: &[f64],
) {
    if nodes.is_empty() {
        node_embedding_backward(&mut grads.tables, graph.features(NodeId::user(user)), d_mean);
        return;
    }
    let share: Vec<f64> = d_mean.iter().map(|g| g / nodes.len() as f64).collect();
    for &n in nodes {
        node_embedding_backward(&mut grads.tables, graph.features(make(n)), &share);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FieldSpec, ModelConfig, Variant};
    use crate::graph::GraphBuilder;
    use crate::matchnode::match_nodes;
    use crate::params::{ParamStore, ResolvedConfig};
    use crate::pref::pref_round;

    /// Two users, three videos, four items; ids namespaced into one field.
    fn toy_graph() -> DualGraph {
        let mut b = GraphBuilder::new();
        for (key, id) in [
            ("u0", 0),
            ("u1", 1),
            ("v0", 2),
            ("v1", 3),
            ("v2", 4),
            ("i0", 5),
            ("i1", 6),
            ("i2", 7),
            ("i3", 8),
        ] {
            b.feature_row(key, &[("id", id)]).unwrap();
        }
        b.uv("u0", "v0", 1);
        b.uv("u0", "v1", 2);
        b.uv("u1", "v1", 1);
        b.uv("u1", "v2", 2);
        b.ui("u0", "i0", 1);
        b.ui("u0", "i1", 2);
        b.ui("u0", "i2", 3);
        b.ui("u1", "i2", 1);
        b.ui("u1", "i3", 2);
        b.build().unwrap()
    }

    fn toy_config(d: usize, hidden: usize) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.fields = vec![FieldSpec {
            name: "id".into(),
            dim: d,
        }];
        cfg.hidden = hidden;
        cfg.k1 = 2;
        cfg.k2 = 2;
        cfg.levels = 1;
        cfg.temperature = 1.0;
        cfg
    }

    fn toy_store(variant: Variant, d: usize, hidden: usize, seed: u64) -> (DualGraph, ParamStore) {
        let graph = toy_graph();
        let rc = ResolvedConfig::resolve(&toy_config(d, hidden), &graph, variant).unwrap();
        let store = ParamStore::init(rc, seed);
        (graph, store)
    }

    #[test]
    fn an_identity_mlp_exposes_the_video_summary() {
        let d = 3;
        let (graph, mut store) = toy_store(Variant::Full, d, 2 * d, 5);
        // hidden = [relu(f_j); relu(-f_j)] for the first d fused coordinates,
        // then z_j = relu(f_j) - relu(-f_j) = f_j.
        store.values.w1.fill(0.0);
        store.values.w2.fill(0.0);
        for j in 0..d {
            store.values.w1[[j, j]] = 1.0;
            store.values.w1[[d + j, j]] = -1.0;
            store.values.w2[[j, j]] = 1.0;
            store.values.w2[[j, d + j]] = -1.0;
        }
        let fwd = forward_user(&store.values, &store.rc, &graph, 0, None);
        for j in 0..d {
            assert!((fwd.z_u[j] - fwd.fused[j]).abs() < 1e-12);
            assert!((fwd.fused[j] - fwd.gv[j]).abs() < 1e-12);
        }
        let a_t = video_tower(&store.values, &graph, 2, d);
        let s = score(&fwd.z_u, &a_t);
        let manual: f64 = (0..d).map(|j| fwd.gv[j] * a_t[j]).sum();
        assert!((s - manual).abs() < 1e-12);
    }

    #[test]
    fn forward_wiring_matches_a_manual_composition() {
        let d = 3;
        let (graph, store) = toy_store(Variant::Full, d, 4, 9);
        let cfg = &store.rc.model;
        let u = 0u32;
        let fwd = forward_user(&store.values, &store.rc, &graph, u, None);

        // Rebuild the same pipeline step by step from the primitives.
        let sub = graph.extract_subgraph(u, cfg.cap_videos, cfg.cap_items, cfg.seed);
        assert_eq!(fwd.videos, sub.videos);
        let mut xv = Array2::zeros((sub.videos.len(), d));
        for (r, &v) in sub.videos.iter().enumerate() {
            xv.row_mut(r)
                .assign(&ndarray::ArrayView1::from(&video_tower(&store.values, &graph, v, d)));
        }
        let mut xi = Array2::zeros((sub.items.len(), d));
        for (r, &i) in sub.items.iter().enumerate() {
            xi.row_mut(r)
                .assign(&ndarray::ArrayView1::from(&item_tower(&store.values, &graph, i, d)));
        }
        let nm = match_nodes(&xv, &xi, &store.values.metric);
        let r1 = pref_round(
            &nm.hv,
            &nm.hi,
            &store.values.cent_v[0],
            &store.values.cent_i[0],
            cfg.temperature,
        );
        let gv = mean_rows(&r1.hv);
        let gi = mean_rows(&r1.hi);
        for (a, b) in gv.iter().zip(&fwd.gv) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in gi.iter().zip(&fwd.gi) {
            assert!((a - b).abs() < 1e-12);
        }
        // And the head.
        let mut fused = gv.to_vec();
        fused.extend_from_slice(gi.as_slice().unwrap());
        fused.extend_from_slice(&fwd.p_u);
        fused.extend_from_slice(&fwd.q_u);
        let mut z = vec![0.0; d];
        for o in 0..d {
            let mut acc = store.values.b2[o];
            for h in 0..cfg.hidden {
                let mut pre = store.values.b1[h];
                for (j, &f) in fused.iter().enumerate() {
                    pre += store.values.w1[[h, j]] * f;
                }
                acc += store.values.w2[[o, h]] * pre.max(0.0);
            }
            z[o] = acc;
        }
        for (a, b) in z.iter().zip(&fwd.z_u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_concat_reduces_to_mean_pooled_towers() {
        let d = 3;
        let (graph, store) = toy_store(Variant::DualConcat, d, 4, 13);
        let cfg = &store.rc.model;
        let u = 1u32;
        let fwd = forward_user(&store.values, &store.rc, &graph, u, None);

        // Independent reduced model: no matching anywhere, summaries are the
        // zero-padded means of the neighborhood-averaged towers.
        let sub = graph.extract_subgraph(u, cfg.cap_videos, cfg.cap_items, cfg.seed);
        let e = cfg.summary_width();
        let mut gv = vec![0.0; e];
        for &v in &sub.videos {
            let t = video_tower(&store.values, &graph, v, d);
            for j in 0..d {
                gv[j] += t[j] / sub.videos.len() as f64;
            }
        }
        let mut gi = vec![0.0; e];
        for &i in &sub.items {
            let t = item_tower(&store.values, &graph, i, d);
            for j in 0..d {
                gi[j] += t[j] / sub.items.len() as f64;
            }
        }
        for (a, b) in gv.iter().zip(&fwd.gv) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in gi.iter().zip(&fwd.gi) {
            assert!((a - b).abs() < 1e-10);
        }
        // Cross halves and the padded tail must be exactly zero.
        assert!(fwd.gv[d..].iter().all(|&v| v == 0.0));
        assert!(fwd.gi[d..].iter().all(|&v| v == 0.0));
        assert!(fwd.nm.is_none());
        assert!(fwd.stages.is_empty());
    }

    #[test]
    fn a_disabled_graph_side_empties_cleanly() {
        let d = 3;
        for (variant, video_side) in [(Variant::NoUvGraph, true), (Variant::NoUiGraph, false)] {
            let (graph, store) = toy_store(variant, d, 4, 21);
            let fwd = forward_user(&store.values, &store.rc, &graph, 0, None);
            let mut x_u = vec![0.0; d];
            node_embedding(&store.values.tables, graph.features(NodeId::user(0)), &mut x_u);
            if video_side {
                assert!(fwd.videos.is_empty());
                assert!(!fwd.items.is_empty());
                assert!(fwd.gv.iter().all(|&v| v == 0.0));
                assert!(fwd.gi.iter().any(|&v| v != 0.0));
                // The video-side aggregate falls back to the user itself.
                assert_eq!(fwd.p_u, x_u);
            } else {
                assert!(fwd.items.is_empty());
                assert!(fwd.gi.iter().all(|&v| v == 0.0));
                assert_eq!(fwd.q_u, x_u);
            }
            assert!(fwd.z_u.iter().all(|v| v.is_finite()));
            // Backward must also run without touching the missing side.
            let mut grads = Tensors::zeros(&store.rc);
            let d_z = vec![1.0; d];
            backward_user(&fwd, &store.values, &store.rc, &graph, &d_z, &mut grads);
        }
    }

    /// End-to-end finite differences on `score(z_u, a_t)` for one user and
    /// one target, over every parameter coordinate.
    fn fd_whole_model(variant: Variant, metric_rank: usize) {
        let d = 3;
        let graph = toy_graph();
        let mut cfg = toy_config(d, 4);
        cfg.metric_rank = metric_rank;
        let rc = ResolvedConfig::resolve(&cfg, &graph, variant).unwrap();
        let mut store = ParamStore::init(rc, 31);
        let (user, target) = (0u32, 2u32);

        let probe = |values: &Tensors, rc: &ResolvedConfig| {
            let fwd = forward_user(values, rc, &graph, user, None);
            let a_t = video_tower(values, &graph, target, d);
            score(&fwd.z_u, &a_t)
        };

        store.zero_grads();
        let fwd = forward_user(&store.values, &store.rc, &graph, user, None);
        let a_t = video_tower(&store.values, &graph, target, d);
        backward_user(&fwd, &store.values, &store.rc, &graph, &a_t, &mut store.grads);
        video_tower_backward(&mut store.grads, &graph, target, &fwd.z_u);

        let h = 1e-5;
        let rel_err = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1.0);
        let n_tensors = store.values.flat().len();
        for t in 0..n_tensors {
            let len = store.values.flat()[t].1.len();
            let name = store.values.flat()[t].0.clone();
            for j in 0..len {
                let orig = store.values.flat()[t].1[j];
                store.values.flat_mut()[t].1[j] = orig + h;
                let up = probe(&store.values, &store.rc);
                store.values.flat_mut()[t].1[j] = orig - h;
                let dn = probe(&store.values, &store.rc);
                store.values.flat_mut()[t].1[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let analytic = store.grads.flat()[t].1[j];
                assert!(
                    rel_err(analytic, fd) < 1e-6,
                    "{name}[{j}]: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn whole_model_backward_matches_finite_differences() {
        fd_whole_model(Variant::Full, 0);
    }

    #[test]
    fn whole_model_backward_matches_finite_differences_low_rank() {
        fd_whole_model(Variant::Full, 2);
    }

    #[test]
    fn ablated_backward_matches_finite_differences() {
        fd_whole_model(Variant::NoNodeMatching, 0);
        fd_whole_model(Variant::NoPrefMatching, 0);
        fd_whole_model(Variant::NoUvGraph, 0);
        fd_whole_model(Variant::NoUiGraph, 0);
        fd_whole_model(Variant::DualConcat, 0);
    }

    #[test]
    fn dropout_mask_scales_forward_and_backward() {
        let d = 3;
        let (graph, mut store) = toy_store(Variant::Full, d, 4, 17);
        let fw = store.rc.model.fusion_width();
        // A mask that keeps every other coordinate at double weight.
        let mask: Vec<f64> = (0..fw).map(|j| if j % 2 == 0 { 2.0 } else { 0.0 }).collect();
        let fwd = forward_user(&store.values, &store.rc, &graph, 0, Some(mask.clone()));
        for j in 0..fw {
            assert_eq!(fwd.dropped[j], fwd.fused[j] * mask[j]);
        }
        // FD through the masked head on one w1 entry and one table entry.
        let probe = |values: &Tensors, rc: &ResolvedConfig| {
            let f = forward_user(values, rc, &graph, 0, Some(mask.clone()));
            f.z_u.iter().sum::<f64>()
        };
        store.zero_grads();
        let d_z = vec![1.0; d];
        backward_user(&fwd, &store.values, &store.rc, &graph, &d_z, &mut store.grads);
        let h = 1e-5;
        for (t, j) in [(0usize, 4usize), (1, 2)] {
            let orig = store.values.flat()[t].1[j];
            store.values.flat_mut()[t].1[j] = orig + h;
            let up = probe(&store.values, &store.rc);
            store.values.flat_mut()[t].1[j] = orig - h;
            let dn = probe(&store.values, &store.rc);
            store.values.flat_mut()[t].1[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let analytic = store.grads.flat()[t].1[j];
            assert!(
                (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0) < 1e-6,
                "tensor {t} coord {j}: {analytic} vs {fd}"
            );
        }
    }
}
