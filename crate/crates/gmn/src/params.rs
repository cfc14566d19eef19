//! Trainable state: embedding tables, the relevance metric, pooling centroids
//! and the fusion MLP, each paired with a gradient buffer and Adam moments.
//!
//! Tensors are enumerated in one fixed declaration order everywhere — init,
//! the optimizer, the L2 norm, checkpoints and the gradient checker — so a
//! checkpoint is fully described by its embedded config echo and the same
//! bytes always come back out.

use crate::config::{ModelConfig, Variant};
use crate::graph::{ByteReader, DualGraph};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// The node-relevance metric: full rank `d x d`, or a rank-`p` factorization
/// `left (d x p) * right (p x d)` when the config asks for one.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Full(Array2<f64>),
    LowRank {
        left: Array2<f64>,
        right: Array2<f64>,
    },
}

/// One full set of model tensors. Used for parameter values, gradients and
/// both Adam moments, which all share shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    /// Per-field embedding tables, `vocab x field_dim`.
    pub tables: Vec<Array2<f64>>,
    pub metric: Metric,
    /// Pooling centroids per matching round, `k x width`, video side.
    pub cent_v: Vec<Array2<f64>>,
    /// Item side.
    pub cent_i: Vec<Array2<f64>>,
    /// Fusion MLP: hidden layer (ReLU) then a linear projection to `d`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Config resolved against a concrete graph: vocabulary sizes are known and a
/// variant is chosen. This is exactly what a checkpoint embeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    /// Vocabulary size per configured field, in field order.
    pub vocabs: Vec<u32>,
}

impl ResolvedConfig {
    /// Resolve field vocabularies against a graph's feature table. Feature
    /// rows are indexed by field position, so the config must list exactly
    /// the graph's fields, in the graph's order.
    pub fn resolve(model: &ModelConfig, graph: &DualGraph, variant: Variant) -> Result<ResolvedConfig> {
        model.validate()?;
        if model.fields.len() != graph.fields.len() {
            return Err(Error::Config(format!(
                "config lists {} fields but the graph has {}",
                model.fields.len(),
                graph.fields.len()
            )));
        }
        let mut vocabs = Vec::with_capacity(model.fields.len());
        for (f, table) in model.fields.iter().zip(&graph.fields) {
            if f.name != table.name {
                return Err(Error::Config(format!(
                    "config field {:?} does not match graph field {:?} (order matters)",
                    f.name, table.name
                )));
            }
            if table.vocab == 0 {
                return Err(Error::Config(format!("field {:?} has an empty vocabulary", f.name)));
            }
            vocabs.push(table.vocab);
        }
        Ok(ResolvedConfig {
            model: model.clone(),
            variant,
            vocabs,
        })
    }

    /// Canonical text: the model config plus `variant` and `vocab.*` lines and
    /// the derived widths (informational, validated on parse).
    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        s.push_str(&format!("variant = {}\n", self.variant.name()));
        for (f, v) in self.model.fields.iter().zip(&self.vocabs) {
            s.push_str(&format!("vocab.{} = {}\n", f.name, v));
        }
        s.push_str(&format!("# node_width = {}\n", self.model.node_width()));
        s.push_str(&format!("# summary_width = {}\n", self.model.summary_width()));
        s.push_str(&format!("# fusion_width = {}\n", self.model.fusion_width()));
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<ResolvedConfig> {
        let mut model_lines = String::new();
        let mut variant = Variant::Full;
        let mut vocab_lines: Vec<(String, u32)> = Vec::new();
        for line in text.lines() {
            let bare = line.split('#').next().unwrap_or("").trim();
            if bare.is_empty() {
                continue;
            }
            if let Some((key, value)) = bare.split_once('=') {
                let key = key.trim();
                let value = value.trim();
                if key == "variant" {
                    variant = Variant::parse(value)?;
                    continue;
                }
                if let Some(field) = key.strip_prefix("vocab.") {
                    let v: u32 = value.parse().map_err(|_| {
                        Error::Format {
                            path: origin.into(),
                            what: format!("bad vocabulary size {value:?} for {field:?}"),
                        }
                    })?;
                    vocab_lines.push((field.to_string(), v));
                    continue;
                }
            }
            model_lines.push_str(line);
            model_lines.push('\n');
        }
        let model = ModelConfig::parse(&model_lines, origin)?;
        let mut vocabs = Vec::with_capacity(model.fields.len());
        for f in &model.fields {
            let v = vocab_lines
                .iter()
                .find(|(name, _)| name == &f.name)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::Format {
                    path: origin.into(),
                    what: format!("missing vocab.{} line", f.name),
                })?;
            vocabs.push(v);
        }
        Ok(ResolvedConfig {
            model,
            variant,
            vocabs,
        })
    }
}

impl Tensors {
    /// Allocate zeroed tensors with the shapes the config dictates.
    pub fn zeros(rc: &ResolvedConfig) -> Tensors {
        let d = rc.model.node_width();
        let tables = rc
            .model
            .fields
            .iter()
            .zip(&rc.vocabs)
            .map(|(f, &v)| Array2::zeros((v as usize, f.dim)))
            .collect();
        let metric = if rc.model.metric_rank == 0 {
            Metric::Full(Array2::zeros((d, d)))
        } else {
            Metric::LowRank {
                left: Array2::zeros((d, rc.model.metric_rank)),
                right: Array2::zeros((rc.model.metric_rank, d)),
            }
        };
        let mut cent_v = Vec::with_capacity(rc.model.levels);
        let mut cent_i = Vec::with_capacity(rc.model.levels);
        for level in 1..=rc.model.levels {
            let (k1, k2) = rc.model.round_k(level);
            let w = rc.model.pref_width(level);
            cent_v.push(Array2::zeros((k1, w)));
            cent_i.push(Array2::zeros((k2, w)));
        }
        Tensors {
            tables,
            metric,
            cent_v,
            cent_i,
            w1: Array2::zeros((rc.model.hidden, rc.model.fusion_width())),
            b1: Array1::zeros(rc.model.hidden),
            w2: Array2::zeros((d, rc.model.hidden)),
            b2: Array1::zeros(d),
        }
    }

    pub fn zero_fill(&mut self) {
        for (_, s) in self.flat_mut() {
            s.fill(0.0);
        }
    }

    /// Flat views over every tensor in declaration order.
    pub fn flat(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, t) in self.tables.iter().enumerate() {
            out.push((format!("table.{i}"), t.as_slice().unwrap()));
        }
        match &self.metric {
            Metric::Full(m) => out.push(("metric".into(), m.as_slice().unwrap())),
            Metric::LowRank { left, right } => {
                out.push(("metric.left".into(), left.as_slice().unwrap()));
                out.push(("metric.right".into(), right.as_slice().unwrap()));
            }
        }
        for (i, c) in self.cent_v.iter().enumerate() {
            out.push((format!("cent_v.{}", i + 1), c.as_slice().unwrap()));
        }
        for (i, c) in self.cent_i.iter().enumerate() {
            out.push((format!("cent_i.{}", i + 1), c.as_slice().unwrap()));
        }
        out.push(("mlp.w1".into(), self.w1.as_slice().unwrap()));
        out.push(("mlp.b1".into(), self.b1.as_slice().unwrap()));
        out.push(("mlp.w2".into(), self.w2.as_slice().unwrap()));
        out.push(("mlp.b2".into(), self.b2.as_slice().unwrap()));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, t) in self.tables.iter_mut().enumerate() {
            out.push((format!("table.{i}"), t.as_slice_mut().unwrap()));
        }
        match &mut self.metric {
            Metric::Full(m) => out.push(("metric".into(), m.as_slice_mut().unwrap())),
            Metric::LowRank { left, right } => {
                out.push(("metric.left".into(), left.as_slice_mut().unwrap()));
                out.push(("metric.right".into(), right.as_slice_mut().unwrap()));
            }
        }
        for (i, c) in self.cent_v.iter_mut().enumerate() {
            out.push((format!("cent_v.{}", i + 1), c.as_slice_mut().unwrap()));
        }
        for (i, c) in self.cent_i.iter_mut().enumerate() {
            out.push((format!("cent_i.{}", i + 1), c.as_slice_mut().unwrap()));
        }
        out.push(("mlp.w1".into(), self.w1.as_slice_mut().unwrap()));
        out.push(("mlp.b1".into(), self.b1.as_slice_mut().unwrap()));
        out.push(("mlp.w2".into(), self.w2.as_slice_mut().unwrap()));
        out.push(("mlp.b2".into(), self.b2.as_slice_mut().unwrap()));
        out
    }

    /// Tensor shapes in declaration order, for serialization headers.
    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for t in &self.tables {
            out.push(t.shape().to_vec());
        }
        match &self.metric {
            Metric::Full(m) => out.push(m.shape().to_vec()),
            Metric::LowRank { left, right } => {
                out.push(left.shape().to_vec());
                out.push(right.shape().to_vec());
            }
        }
        for c in &self.cent_v {
            out.push(c.shape().to_vec());
        }
        for c in &self.cent_i {
            out.push(c.shape().to_vec());
        }
        out.push(self.w1.shape().to_vec());
        out.push(vec![self.b1.len()]);
        out.push(self.w2.shape().to_vec());
        out.push(vec![self.b2.len()]);
        out
    }

    /// Add `other` into `self`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Tensors) {
        let mut mine = self.flat_mut();
        let theirs = other.flat();
        debug_assert_eq!(mine.len(), theirs.len());
        for ((_, dst), (_, src)) in mine.iter_mut().zip(theirs.iter()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }
}

/// Everything the trainer mutates: values, gradient buffer, Adam moments and
/// the step counter, plus the resolved config that fixes all shapes.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub rc: ResolvedConfig,
    pub values: Tensors,
    pub grads: Tensors,
    pub adam_m: Tensors,
    pub adam_v: Tensors,
    pub step: u64,
}

/// Xavier-uniform bound for a `fan_in x fan_out` weight.
fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_xavier(rng: &mut ChaCha8Rng, arr: &mut Array2<f64>, fan_in: usize, fan_out: usize, scale: f64) {
    let b = xavier_bound(fan_in, fan_out) * scale;
    for v in arr.as_slice_mut().unwrap() {
        *v += rng.gen_range(-b..=b);
    }
}

impl ParamStore {
    /// Deterministic initialization: weights Xavier-uniform, biases zero, the
    /// metric an identity (or truncated identity in low-rank form) plus small
    /// Xavier noise. The draw sequence depends only on shapes and the seed, so
    /// every variant of the same config starts from identical tensors.
    pub fn init(rc: ResolvedConfig, seed: u64) -> ParamStore {
        let mut values = Tensors::zeros(&rc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rc.model.node_width();
        for (t, f) in values.tables.iter_mut().zip(&rc.model.fields) {
            let vocab = t.nrows();
            fill_xavier(&mut rng, t, vocab, f.dim, 1.0);
        }
        match &mut values.metric {
            Metric::Full(m) => {
                for i in 0..d {
                    m[[i, i]] = 1.0;
                }
                fill_xavier(&mut rng, m, d, d, 0.01);
            }
            Metric::LowRank { left, right } => {
                let p = left.ncols();
                for i in 0..p {
                    left[[i, i]] = 1.0;
                    right[[i, i]] = 1.0;
                }
                fill_xavier(&mut rng, left, d, p, 0.01);
                fill_xavier(&mut rng, right, p, d, 0.01);
            }
        }
        for c in values.cent_v.iter_mut().chain(values.cent_i.iter_mut()) {
            let (k, w) = (c.nrows(), c.ncols());
            fill_xavier(&mut rng, c, k, w, 1.0);
        }
        let (h, fin) = (values.w1.nrows(), values.w1.ncols());
        fill_xavier(&mut rng, &mut values.w1, fin, h, 1.0);
        let (dout, hin) = (values.w2.nrows(), values.w2.ncols());
        fill_xavier(&mut rng, &mut values.w2, hin, dout, 1.0);
        // biases stay zero

        let grads = Tensors::zeros(&rc);
        let adam_m = Tensors::zeros(&rc);
        let adam_v = Tensors::zeros(&rc);
        ParamStore {
            rc,
            values,
            grads,
            adam_m,
            adam_v,
            step: 0,
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero_fill();
    }

    /// Which tensors actually feed the loss under the current variant; the
    /// others are left out of the optimizer step and the L2 norm so an
    /// ablation never drags unused components around via weight decay.
    pub fn active_mask(&self) -> Vec<bool> {
        let v = self.rc.variant;
        let mut mask = vec![true; self.values.tables.len()];
        match &self.values.metric {
            Metric::Full(_) => mask.push(v.metric_active()),
            Metric::LowRank { .. } => {
                mask.push(v.metric_active());
                mask.push(v.metric_active());
            }
        }
        for _ in &self.values.cent_v {
            mask.push(v.cent_v_active());
        }
        for _ in &self.values.cent_i {
            mask.push(v.cent_i_active());
        }
        mask.extend_from_slice(&[true, true, true, true]); // MLP
        mask
    }

    /// Squared L2 norm over active tensors.
    pub fn sq_norm(&self) -> f64 {
        let mask = self.active_mask();
        self.values
            .flat()
            .iter()
            .zip(&mask)
            .filter(|(_, &a)| a)
            .map(|((_, s), _)| s.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// One Adam step with decoupled-from-nothing classic L2: the regularizer
    /// contributes `2*lambda*theta` to the gradient before the moment update.
    pub fn adam_step(&mut self, lr: f64, lambda: f64) {
        let mask = self.active_mask();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let mut values = self.values.flat_mut();
        let grads = self.grads.flat();
        let mut ms = self.adam_m.flat_mut();
        let mut vs = self.adam_v.flat_mut();
        for i in 0..values.len() {
            if !mask[i] {
                continue;
            }
            let val = &mut values[i].1;
            let g = &grads[i].1;
            let m = &mut ms[i].1;
            let v = &mut vs[i].1;
            for j in 0..val.len() {
                let grad = g[j] + 2.0 * lambda * val[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                val[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    // ---- checkpoints -------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.serialize()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        for (name, s) in self.values.flat() {
            if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "tensor {name} contains a non-finite value {bad}"
                )));
            }
        }
        let mut w: Vec<u8> = Vec::new();
        w.write_all(CKPT_MAGIC).unwrap();
        let echo = self.rc.to_text();
        w.write_all(&(echo.len() as u64).to_le_bytes()).unwrap();
        w.write_all(echo.as_bytes()).unwrap();
        let flat = self.values.flat();
        let shapes = self.values.shapes();
        w.write_all(&(flat.len() as u64).to_le_bytes()).unwrap();
        for ((name, data), shape) in flat.iter().zip(&shapes) {
            w.write_all(&(name.len() as u64).to_le_bytes()).unwrap();
            w.write_all(name.as_bytes()).unwrap();
            w.write_all(&(shape.len() as u64).to_le_bytes()).unwrap();
            for &dim in shape {
                w.write_all(&(dim as u64).to_le_bytes()).unwrap();
            }
            for v in data.iter() {
                w.write_all(&v.to_le_bytes()).unwrap();
            }
        }
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ParamStore::deserialize(&bytes, &path.display().to_string())
    }

    pub fn deserialize(bytes: &[u8], origin: &str) -> Result<ParamStore> {
        let mut r = ByteReader::new(bytes, origin);
        r.expect_magic(CKPT_MAGIC)?;
        let echo_len = r.u64()? as usize;
        let echo = String::from_utf8(r.bytes(echo_len)?.to_vec())
            .map_err(|_| r.format_err("config echo is not UTF-8"))?;
        let rc = ResolvedConfig::parse(&echo, origin)?;
        let mut store = ParamStore {
            values: Tensors::zeros(&rc),
            grads: Tensors::zeros(&rc),
            adam_m: Tensors::zeros(&rc),
            adam_v: Tensors::zeros(&rc),
            rc,
            step: 0,
        };
        let n_tensors = r.u64()? as usize;
        let expect_shapes = store.values.shapes();
        let mut flat = store.values.flat_mut();
        if n_tensors != flat.len() {
            return Err(Error::Shape {
                what: format!("{origin}: tensor count"),
                expected: flat.len().to_string(),
                got: n_tensors.to_string(),
            });
        }
        for (i, (name, data)) in flat.iter_mut().enumerate() {
            let name_len = r.u64()? as usize;
            let got_name = String::from_utf8(r.bytes(name_len)?.to_vec())
                .map_err(|_| r.format_err("tensor name is not UTF-8"))?;
            if &got_name != name {
                return Err(Error::Shape {
                    what: format!("{origin}: tensor {i} name"),
                    expected: name.clone(),
                    got: got_name,
                });
            }
            let rank = r.u64()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            if dims != expect_shapes[i] {
                return Err(Error::Shape {
                    what: format!("{origin}: tensor {name}"),
                    expected: format!("{:?}", expect_shapes[i]),
                    got: format!("{dims:?}"),
                });
            }
            for v in data.iter_mut() {
                *v = r.f64()?;
            }
        }
        if !r.at_end() {
            return Err(r.format_err("trailing bytes after tensors"));
        }
        Ok(store)
    }
}

const CKPT_MAGIC: &[u8; 5] = b"GMNP1";
