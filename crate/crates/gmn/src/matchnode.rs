//! Node-level matching between a user's watched videos and purchased items.
//!
//! Given the two embedding matrices of one user's subgraph, a learned
//! bilinear metric scores every video-item pair, the score table is
//! normalized twice (row softmax toward items, column softmax toward
//! videos), and each node is extended with the attention-weighted summary of
//! the other side. Every forward op here has a matching hand-derived
//! backward; gradients accumulate into caller-owned buffers.

use crate::params::Metric;
use ndarray::{Array2, Axis};

/// Full forward cache for one matching: everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct NodeMatch {
    /// Pairwise relevance, one row per video, one column per item.
    pub rel: Array2<f64>,
    /// Row-stochastic normalization of `rel` (each video attends over items).
    pub sr: Array2<f64>,
    /// Column-stochastic normalization (each item attends over videos).
    pub sc: Array2<f64>,
    /// Videos extended with their item summaries: `[xv | sr * xi]`.
    pub hv: Array2<f64>,
    /// Items extended with their video summaries: `[xi | sc^T * xv]`.
    pub hi: Array2<f64>,
}

/// Bilinear relevance `xv * metric * xi^T`. The low-rank form multiplies
/// through the thin factors without ever materializing the full metric.
pub fn relevance(xv: &Array2<f64>, xi: &Array2<f64>, metric: &Metric) -> Array2<f64> {
    match metric {
        Metric::Full(m) => xv.dot(m).dot(&xi.t()),
        Metric::LowRank { left, right } => {
            let a = xv.dot(left); // nv x p
            let b = xi.dot(&right.t()); // ni x p
            a.dot(&b.t())
        }
    }
}

/// Backward of [`relevance`]: accumulates into the embedding gradients and
/// the metric gradient. `d_metric` must be the same shape family as `metric`.
pub fn relevance_backward(
    xv: &Array2<f64>,
    xi: &Array2<f64>,
    metric: &Metric,
    d_rel: &Array2<f64>,
    d_xv: &mut Array2<f64>,
    d_xi: &mut Array2<f64>,
    d_metric: &mut Metric,
) {
    match (metric, d_metric) {
        (Metric::Full(m), Metric::Full(dm)) => {
            // rel = xv m xi^T
            *d_xv += &d_rel.dot(&xi.dot(&m.t()));
            *dm += &xv.t().dot(d_rel).dot(xi);
            *d_xi += &d_rel.t().dot(&xv.dot(m));
        }
        (
            Metric::LowRank { left, right },
            Metric::LowRank {
                left: dl,
                right: dr,
            },
        ) => {
            // rel = (xv left)(xi right^T)^T = a b^T
            let a = xv.dot(left);
            let b = xi.dot(&right.t());
            let d_a = d_rel.dot(&b);
            let d_b = d_rel.t().dot(&a);
            *dl += &xv.t().dot(&d_a);
            *dr += &d_b.t().dot(xi);
            *d_xv += &d_a.dot(&left.t());
            *d_xi += &d_b.dot(right);
        }
        _ => unreachable!("metric and its gradient buffer disagree on form"),
    }
}

fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

/// Gradient of a softmax output `y` back to its logits:
/// `d_logit = y * (d_y - <y, d_y>)`.
fn softmax_slice_backward(y: &[f64], d_y: &[f64], d_logit: &mut [f64]) {
    let dot: f64 = y.iter().zip(d_y).map(|(a, b)| a * b).sum();
    for ((dl, &yi), &dyi) in d_logit.iter_mut().zip(y).zip(d_y) {
        *dl += yi * (dyi - dot);
    }
}

/// Normalize a relevance table both ways: softmax over each row (the item
/// axis) and over each column (the video axis). Max-subtraction keeps the
/// exponentials in range, so the result is invariant to shifting every score
/// by a constant.
pub fn normalize_dual(rel: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (nv, ni) = rel.dim();
    let mut sr = Array2::zeros((nv, ni));
    let mut sc = Array2::zeros((nv, ni));
    for (src, mut dst) in rel.outer_iter().zip(sr.outer_iter_mut()) {
        softmax_slice(src.as_slice().unwrap(), dst.as_slice_mut().unwrap());
    }
    let mut col = vec![0.0; nv];
    let mut out = vec![0.0; nv];
    for i in 0..ni {
        for v in 0..nv {
            col[v] = rel[[v, i]];
        }
        softmax_slice(&col, &mut out);
        for v in 0..nv {
            sc[[v, i]] = out[v];
        }
    }
    (sr, sc)
}

/// Backward of [`normalize_dual`]: both normalizations read the same table,
/// so their logit gradients add.
pub fn normalize_dual_backward(
    sr: &Array2<f64>,
    sc: &Array2<f64>,
    d_sr: &Array2<f64>,
    d_sc: &Array2<f64>,
) -> Array2<f64> {
    let (nv, ni) = sr.dim();
    let mut d_rel = Array2::zeros((nv, ni));
    for ((y, dy), mut dl) in sr
        .outer_iter()
        .zip(d_sr.outer_iter())
        .zip(d_rel.outer_iter_mut())
    {
        softmax_slice_backward(
            y.as_slice().unwrap(),
            dy.as_slice().unwrap(),
            dl.as_slice_mut().unwrap(),
        );
    }
    let mut y = vec![0.0; nv];
    let mut dy = vec![0.0; nv];
    let mut dl = vec![0.0; nv];
    for i in 0..ni {
        for v in 0..nv {
            y[v] = sc[[v, i]];
            dy[v] = d_sc[[v, i]];
            dl[v] = 0.0;
        }
        softmax_slice_backward(&y, &dy, &mut dl);
        for v in 0..nv {
            d_rel[[v, i]] += dl[v];
        }
    }
    d_rel
}

/// Extend each side with its attention-weighted view of the other:
/// `hv = [xv | sr * xi]`, `hi = [xi | sc^T * xv]`.
pub fn propagate(
    xv: &Array2<f64>,
    xi: &Array2<f64>,
    sr: &Array2<f64>,
    sc: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let cross_v = sr.dot(xi);
    let cross_i = sc.t().dot(xv);
    let hv = ndarray::concatenate(Axis(1), &[xv.view(), cross_v.view()]).unwrap();
    let hi = ndarray::concatenate(Axis(1), &[xi.view(), cross_i.view()]).unwrap();
    (hv, hi)
}

/// Backward of [`propagate`]. Embedding gradients accumulate in place; the
/// attention-weight gradients are returned for the normalization backward.
pub fn propagate_backward(
    xv: &Array2<f64>,
    xi: &Array2<f64>,
    sr: &Array2<f64>,
    sc: &Array2<f64>,
    d_hv: &Array2<f64>,
    d_hi: &Array2<f64>,
    d_xv: &mut Array2<f64>,
    d_xi: &mut Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d = xv.ncols();
    let d_hv_own = d_hv.slice(ndarray::s![.., ..d]);
    let d_cross_v = d_hv.slice(ndarray::s![.., d..]);
    let d_hi_own = d_hi.slice(ndarray::s![.., ..d]);
    let d_cross_i = d_hi.slice(ndarray::s![.., d..]);
    *d_xv += &d_hv_own;
    *d_xi += &d_hi_own;
    // cross_v = sr xi
    let d_sr = d_cross_v.dot(&xi.t());
    *d_xi += &sr.t().dot(&d_cross_v);
    // cross_i = sc^T xv
    let d_sc = xv.dot(&d_cross_i.t());
    *d_xv += &sc.dot(&d_cross_i);
    (d_sr, d_sc)
}

/// The whole matching step: relevance, dual normalization, propagation.
pub fn match_nodes(xv: &Array2<f64>, xi: &Array2<f64>, metric: &Metric) -> NodeMatch {
    debug_assert!(xv.nrows() > 0 && xi.nrows() > 0);
    let rel = relevance(xv, xi, metric);
    let (sr, sc) = normalize_dual(&rel);
    let (hv, hi) = propagate(xv, xi, &sr, &sc);
    NodeMatch { rel, sr, sc, hv, hi }
}

/// Backward of [`match_nodes`], chaining the three stage backwards.
pub fn match_nodes_backward(
    nm: &NodeMatch,
    xv: &Array2<f64>,
    xi: &Array2<f64>,
    metric: &Metric,
    d_hv: &Array2<f64>,
    d_hi: &Array2<f64>,
    d_xv: &mut Array2<f64>,
    d_xi: &mut Array2<f64>,
    d_metric: &mut Metric,
) {
    let (d_sr, d_sc) = propagate_backward(xv, xi, &nm.sr, &nm.sc, d_hv, d_hi, d_xv, d_xi);
    let d_rel = normalize_dual_backward(&nm.sr, &nm.sc, &d_sr, &d_sc);
    relevance_backward(xv, xi, metric, &d_rel, d_xv, d_xi, d_metric);
}
