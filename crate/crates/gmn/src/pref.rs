//! Preference-level matching: each side of the subgraph is softly pooled
//! into a few preference centers, the two sets of centers are matched
//! against each other with plain dot-product relevance, and the widened
//! centers feed the next round (with half as many centers) until a final
//! mean produces one summary vector per side.

use crate::matchnode::{normalize_dual, normalize_dual_backward, propagate, propagate_backward};
use ndarray::{Array1, Array2};

/// Forward cache of one soft pooling: assignments, per-center mass and the
/// mass-normalized centers.
#[derive(Debug, Clone)]
pub struct Pool {
    /// Row-stochastic soft assignment of each input row to each center.
    pub assign: Array2<f64>,
    /// Total assigned mass per center, clamped away from zero for division.
    pub mass: Array1<f64>,
    /// Pooled centers, one row per center.
    pub z: Array2<f64>,
}

/// Softly assign each row of `h` to a center by tempered dot-product
/// affinity, then average the rows into each center weighted by assignment.
/// With a single center the assignment is identically one and the pooled
/// center is exactly the row mean.
pub fn pool(h: &Array2<f64>, cents: &Array2<f64>, tau: f64) -> Pool {
    let (n, w) = h.dim();
    let k = cents.nrows();
    debug_assert_eq!(cents.ncols(), w);
    debug_assert!(n > 0);
    let mut assign = Array2::zeros((n, k));
    for (row, mut a) in h.outer_iter().zip(assign.outer_iter_mut()) {
        let mut max = f64::NEG_INFINITY;
        for (c, cent) in cents.outer_iter().enumerate() {
            a[c] = row.dot(&cent) / tau;
            max = max.max(a[c]);
        }
        let mut z = 0.0;
        for c in 0..k {
            a[c] = (a[c] - max).exp();
            z += a[c];
        }
        for c in 0..k {
            a[c] /= z;
        }
    }
    let mut mass = Array1::<f64>::zeros(k);
    let mut z = Array2::zeros((k, w));
    for (row, a) in h.outer_iter().zip(assign.outer_iter()) {
        for c in 0..k {
            mass[c] += a[c];
            for j in 0..w {
                z[[c, j]] += a[c] * row[j];
            }
        }
    }
    for c in 0..k {
        mass[c] = mass[c].max(1e-300);
        for j in 0..w {
            z[[c, j]] /= mass[c];
        }
    }
    Pool { assign, mass, z }
}

/// Backward of [`pool`]: accumulates into `d_h` and `d_cents`.
pub fn pool_backward(
    p: &Pool,
    h: &Array2<f64>,
    cents: &Array2<f64>,
    tau: f64,
    d_z: &Array2<f64>,
    d_h: &mut Array2<f64>,
    d_cents: &mut Array2<f64>,
) {
    let (n, w) = h.dim();
    let k = cents.nrows();
    // Direct path: z_c = (sum_n a_nc h_n) / m_c. Each input row receives the
    // assignment-weighted center gradients; each assignment weight sees the
    // row's offset from its center.
    let mut d_assign = Array2::zeros((n, k));
    for nn in 0..n {
        for c in 0..k {
            let m = p.mass[c];
            let a = p.assign[[nn, c]];
            let mut dot_offset = 0.0;
            for j in 0..w {
                d_h[[nn, j]] += a / m * d_z[[c, j]];
                dot_offset += (h[[nn, j]] - p.z[[c, j]]) * d_z[[c, j]];
            }
            d_assign[[nn, c]] = dot_offset / m;
        }
    }
    // Softmax path back to the affinity logits, then into rows and centers.
    for nn in 0..n {
        let a_row = p.assign.row(nn);
        let da_row = d_assign.row(nn);
        let dot: f64 = a_row.iter().zip(da_row.iter()).map(|(x, y)| x * y).sum();
        for c in 0..k {
            let d_logit = a_row[c] * (da_row[c] - dot);
            for j in 0..w {
                d_h[[nn, j]] += d_logit * cents[[c, j]] / tau;
                d_cents[[c, j]] += d_logit * h[[nn, j]] / tau;
            }
        }
    }
}

/// Dot-product relevance between pooled centers (no learned metric here).
pub fn dot_relevance(zv: &Array2<f64>, zi: &Array2<f64>) -> Array2<f64> {
    zv.dot(&zi.t())
}

pub fn dot_relevance_backward(
    zv: &Array2<f64>,
    zi: &Array2<f64>,
    d_rel: &Array2<f64>,
    d_zv: &mut Array2<f64>,
    d_zi: &mut Array2<f64>,
) {
    *d_zv += &d_rel.dot(zi);
    *d_zi += &d_rel.t().dot(zv);
}

/// One full matching round at the preference level. Inputs are the current
/// per-node (or per-center) representations of both sides; outputs are the
/// matched centers, twice as wide and `k` per side.
#[derive(Debug, Clone)]
pub struct PrefRound {
    pub pool_v: Pool,
    pub pool_i: Pool,
    pub sr: Array2<f64>,
    pub sc: Array2<f64>,
    /// Matched video-side centers, `k1 x 2w`.
    pub hv: Array2<f64>,
    /// Matched item-side centers, `k2 x 2w`.
    pub hi: Array2<f64>,
}

pub fn pref_round(
    hv_in: &Array2<f64>,
    hi_in: &Array2<f64>,
    cent_v: &Array2<f64>,
    cent_i: &Array2<f64>,
    tau: f64,
) -> PrefRound {
    let pool_v = pool(hv_in, cent_v, tau);
    let pool_i = pool(hi_in, cent_i, tau);
    let rel = dot_relevance(&pool_v.z, &pool_i.z);
    let (sr, sc) = normalize_dual(&rel);
    let (hv, hi) = propagate(&pool_v.z, &pool_i.z, &sr, &sc);
    PrefRound {
        pool_v,
        pool_i,
        sr,
        sc,
        hv,
        hi,
    }
}

pub fn pref_round_backward(
    r: &PrefRound,
    hv_in: &Array2<f64>,
    hi_in: &Array2<f64>,
    cent_v: &Array2<f64>,
    cent_i: &Array2<f64>,
    tau: f64,
    d_hv_out: &Array2<f64>,
    d_hi_out: &Array2<f64>,
    d_hv_in: &mut Array2<f64>,
    d_hi_in: &mut Array2<f64>,
    d_cent_v: &mut Array2<f64>,
    d_cent_i: &mut Array2<f64>,
) {
    let (k1, w) = r.pool_v.z.dim();
    let k2 = r.pool_i.z.nrows();
    let mut d_zv = Array2::zeros((k1, w));
    let mut d_zi = Array2::zeros((k2, w));
    let (d_sr, d_sc) = propagate_backward(
        &r.pool_v.z,
        &r.pool_i.z,
        &r.sr,
        &r.sc,
        d_hv_out,
        d_hi_out,
        &mut d_zv,
        &mut d_zi,
    );
    let d_rel = normalize_dual_backward(&r.sr, &r.sc, &d_sr, &d_sc);
    dot_relevance_backward(&r.pool_v.z, &r.pool_i.z, &d_rel, &mut d_zv, &mut d_zi);
    pool_backward(&r.pool_v, hv_in, cent_v, tau, &d_zv, d_hv_in, d_cent_v);
    pool_backward(&r.pool_i, hi_in, cent_i, tau, &d_zi, d_hi_in, d_cent_i);
}

/// Plain mean over rows, the terminal reduction of the preference stack.
pub fn mean_rows(h: &Array2<f64>) -> Array1<f64> {
    debug_assert!(h.nrows() > 0);
    h.mean_axis(ndarray::Axis(0)).unwrap()
}

/// Backward of [`mean_rows`]: every row shares the gradient equally.
pub fn mean_rows_backward(d_g: &[f64], d_h: &mut Array2<f64>) {
    let inv = 1.0 / d_h.nrows() as f64;
    for mut row in d_h.outer_iter_mut() {
        for (r, &g) in row.iter_mut().zip(d_g) {
            *r += g * inv;
        }
    }
}
