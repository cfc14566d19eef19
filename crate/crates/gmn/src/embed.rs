//! Node features to dense vectors: every node's representation is the
//! concatenation of one embedding-table row per categorical field, and
//! one-hop aggregates are plain means over neighbor representations.

use crate::graph::{DualGraph, NodeId};
use crate::params::ResolvedConfig;
use crate::{Error, Result};
use ndarray::Array2;

/// Concatenate the table rows selected by one node's feature ids into `out`.
/// Feature ids are validated up front by [`check_compat`]; an out-of-range id
/// here is a programming error and panics.
pub fn node_embedding(tables: &[Array2<f64>], feats: &[u32], out: &mut [f64]) {
    debug_assert_eq!(tables.len(), feats.len());
    let mut off = 0;
    for (t, &id) in tables.iter().zip(feats) {
        let w = t.ncols();
        for j in 0..w {
            out[off + j] = t[[id as usize, j]];
        }
        off += w;
    }
    debug_assert_eq!(off, out.len());
}

/// Scatter a gradient with respect to a node's concatenated embedding back
/// into the per-field table gradients.
pub fn node_embedding_backward(grads: &mut [Array2<f64>], feats: &[u32], d_out: &[f64]) {
    let mut off = 0;
    for (g, &id) in grads.iter_mut().zip(feats) {
        let w = g.ncols();
        for j in 0..w {
            g[[id as usize, j]] += d_out[off + j];
        }
        off += w;
    }
    debug_assert_eq!(off, d_out.len());
}

fn pairwise_sum(rows: &[&[f64]]) -> Vec<f64> {
    match rows.len() {
        1 => rows[0].to_vec(),
        n => {
            let mid = n / 2;
            let mut left = pairwise_sum(&rows[..mid]);
            let right = pairwise_sum(&rows[mid..]);
            for (a, b) in left.iter_mut().zip(&right) {
                *a += b;
            }
            left
        }
    }
}

/// Mean of `rows`, summed pairwise so reordering the inputs cannot shift the
/// result beyond last-bit noise. An empty neighborhood falls back to the
/// node's own representation, so aggregation never produces a zero hole.
pub fn pairwise_mean(rows: &[&[f64]], own: &[f64]) -> Vec<f64> {
    if rows.is_empty() {
        return own.to_vec();
    }
    let mut sum = pairwise_sum(rows);
    let inv = 1.0 / rows.len() as f64;
    for v in &mut sum {
        *v *= inv;
    }
    sum
}

/// Check that a graph can be driven with parameters resolved elsewhere
/// (typically a loaded checkpoint): same fields in the same order, identical
/// vocabulary sizes, and every stored feature id within range.
pub fn check_compat(rc: &ResolvedConfig, graph: &DualGraph) -> Result<()> {
    if rc.model.fields.len() != graph.fields.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} fields but the graph has {}",
            rc.model.fields.len(),
            graph.fields.len()
        )));
    }
    for ((f, &vocab), table) in rc.model.fields.iter().zip(&rc.vocabs).zip(&graph.fields) {
        if f.name != table.name {
            return Err(Error::Config(format!(
                "checkpoint field {:?} does not match graph field {:?}",
                f.name, table.name
            )));
        }
        if vocab != table.vocab {
            return Err(Error::Config(format!(
                "field {:?}: checkpoint vocabulary {} but graph vocabulary {}",
                f.name, vocab, table.vocab
            )));
        }
    }
    let nodes = (0..graph.n_users() as u32)
        .map(NodeId::user)
        .chain((0..graph.n_videos() as u32).map(NodeId::video))
        .chain((0..graph.n_items() as u32).map(NodeId::item));
    for node in nodes {
        for (field, &id) in graph.features(node).iter().enumerate() {
            if id >= rc.vocabs[field] {
                return Err(Error::Vocab {
                    field: graph.fields[field].name.clone(),
                    id,
                    vocab: rc.vocabs[field],
                });
            }
        }
    }
    Ok(())
}
