//! Flat-text configuration: one `key = value` per line, `#` comments.
//!
//! The same struct drives training and inference; checkpoints embed the
//! resolved text (plus vocabulary sizes and derived widths) so a model can be
//! reloaded without the original file.

use crate::{Error, Result};
use std::fmt::Write as _;

/// One embedding field: a name matching a column of the feature table and the
/// width of its embedding rows. Node width `d` is the sum over fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub dim: usize,
}

/// Model variants: the full bi-level matcher plus the ablations used to
/// attribute retrieval quality to individual components. Disabling a side
/// routes the pipeline through the same empty-neighbourhood code paths as a
/// genuinely isolated user, so every variant shares one implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Node-level and preference-level matching on both graphs.
    Full,
    /// Skip node-level matching: enriched node embeddings are the one-hop
    /// embeddings zero-padded to double width.
    NoNodeMatching,
    /// Skip preference pooling and matching: each side's summary is the plain
    /// mean of its enriched node embeddings, zero-padded to summary width.
    NoPrefMatching,
    /// Drop the user-video graph side entirely.
    NoUvGraph,
    /// Drop the user-item graph side entirely.
    NoUiGraph,
    /// Both matching levels off: a dual-tower mean-pooling concat model.
    DualConcat,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoNodeMatching,
        Variant::NoPrefMatching,
        Variant::NoUvGraph,
        Variant::NoUiGraph,
        Variant::DualConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNodeMatching => "no-node-matching",
            Variant::NoPrefMatching => "no-pref-matching",
            Variant::NoUvGraph => "no-uv-graph",
            Variant::NoUiGraph => "no-ui-graph",
            Variant::DualConcat => "dual-concat-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }

    pub fn node_matching(self) -> bool {
        !matches!(self, Variant::NoNodeMatching | Variant::DualConcat)
    }

    pub fn pref_matching(self) -> bool {
        !matches!(self, Variant::NoPrefMatching | Variant::DualConcat)
    }

    pub fn use_uv(self) -> bool {
        self != Variant::NoUvGraph
    }

    pub fn use_ui(self) -> bool {
        self != Variant::NoUiGraph
    }

    /// Does the metric matrix receive gradient under this variant?
    pub fn metric_active(self) -> bool {
        self.node_matching() && self.use_uv() && self.use_ui()
    }

    pub fn cent_v_active(self) -> bool {
        self.pref_matching() && self.use_uv()
    }

    pub fn cent_i_active(self) -> bool {
        self.pref_matching() && self.use_ui()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding fields, concatenated in this order.
    pub fields: Vec<FieldSpec>,
    /// Preference counts for the video / item side of the first pooling level.
    pub k1: usize,
    pub k2: usize,
    /// Number of preference matching rounds. Pooled widths double per round.
    pub levels: usize,
    /// Softmax temperature of the pooling assignment.
    pub temperature: f64,
    /// Rank of the node-relevance metric matrix; 0 keeps it full rank.
    pub metric_rank: usize,
    /// Hidden width of the fusion MLP.
    pub hidden: usize,
    pub lr: f64,
    /// L2 coefficient applied to all active parameters.
    pub lambda: f64,
    /// Dropout rate on the fusion MLP input, training only.
    pub dropout: f64,
    /// If true, `dropout` is read as a keep probability instead of a drop
    /// probability. Off by default; frameworks disagree on the convention and
    /// this switch lets either reading be reproduced.
    pub dropout_is_keep: bool,
    /// Neighbourhood caps for the per-user subgraph (most recent first).
    pub cap_videos: usize,
    pub cap_items: usize,
    /// Negatives sampled per positive during training.
    pub negatives: usize,
    /// Users per training batch.
    pub batch_users: usize,
    pub epochs: usize,
    /// Early-stopping patience on validation AUC; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    /// Gradient-merge chunk count. Fixing it keeps training bit-deterministic
    /// for a given config regardless of how many worker threads actually run.
    pub threads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fields: vec![FieldSpec {
                name: "id".into(),
                dim: 128,
            }],
            k1: 4,
            k2: 4,
            levels: 1,
            temperature: 1.0,
            metric_rank: 0,
            hidden: 256,
            lr: 0.0015,
            lambda: 0.01,
            dropout: 0.75,
            dropout_is_keep: false,
            cap_videos: 50,
            cap_items: 50,
            negatives: 4,
            batch_users: 256,
            epochs: 30,
            patience: 3,
            seed: 7,
            threads: 8,
        }
    }
}

impl ModelConfig {
    /// Node embedding width `d`: the sum of per-field widths.
    pub fn node_width(&self) -> usize {
        self.fields.iter().map(|f| f.dim).sum()
    }

    /// Width of the pooled preference vectors entering round `level` (1-based).
    /// Round 1 pools node embeddings enriched to `2d`; each round's propagation
    /// doubles the width again.
    pub fn pref_width(&self, level: usize) -> usize {
        self.node_width() * (1 << level)
    }

    /// Width of each side's final preference summary.
    pub fn summary_width(&self) -> usize {
        self.node_width() * (1 << (self.levels + 1))
    }

    /// Input width of the fusion MLP: both preference summaries plus both
    /// one-hop user embeddings.
    pub fn fusion_width(&self) -> usize {
        2 * self.summary_width() + 2 * self.node_width()
    }

    /// Preference count used by pooling round `level` (1-based): the first
    /// round uses (k1, k2), later rounds halve (floor 1).
    pub fn round_k(&self, level: usize) -> (usize, usize) {
        let mut k1 = self.k1;
        let mut k2 = self.k2;
        for _ in 1..level {
            k1 = (k1 / 2).max(1);
            k2 = (k2 / 2).max(1);
        }
        (k1, k2)
    }

    /// Effective keep probability of the fusion-input dropout.
    pub fn dropout_keep(&self) -> f64 {
        if self.dropout_is_keep {
            self.dropout
        } else {
            1.0 - self.dropout
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Config("no embedding fields configured".into()));
        }
        for f in &self.fields {
            if f.dim == 0 {
                return Err(Error::Config(format!("field {:?} has width 0", f.name)));
            }
            if f.name.is_empty() || f.name.contains(|c: char| c.is_whitespace() || c == ':') {
                return Err(Error::Config(format!("bad field name {:?}", f.name)));
            }
        }
        let mut names: Vec<&str> = self.fields.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.fields.len() {
            return Err(Error::Config("duplicate field name".into()));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::Config("preference counts must be >= 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.metric_rank > self.node_width() {
            return Err(Error::Config(format!(
                "metric_rank {} exceeds node width {}",
                self.metric_rank,
                self.node_width()
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        let keep = self.dropout_keep();
        if !(0.0..=1.0).contains(&self.dropout) || keep <= 0.0 {
            return Err(Error::Config(format!(
                "dropout {} leaves keep probability {}",
                self.dropout, keep
            )));
        }
        if self.cap_videos == 0 || self.cap_items == 0 {
            return Err(Error::Config("subgraph caps must be >= 1".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("negatives must be >= 1".into()));
        }
        if self.batch_users == 0 {
            return Err(Error::Config("batch_users must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse the flat `key = value` text format. Unknown keys are rejected so
    /// that typos fail loudly instead of silently training the wrong model.
    pub fn parse(text: &str, path: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Malformed {
                path: path.into(),
                line: lineno,
                what: format!("expected `key = value`, got {raw:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: String| Error::Malformed {
                path: path.into(),
                line: lineno,
                what,
            };
            match key {
                "fields" => cfg.fields = parse_fields(value).map_err(bad)?,
                "k1" => cfg.k1 = parse_num(key, value).map_err(bad)?,
                "k2" => cfg.k2 = parse_num(key, value).map_err(bad)?,
                "levels" => cfg.levels = parse_num(key, value).map_err(bad)?,
                "temperature" => cfg.temperature = parse_num(key, value).map_err(bad)?,
                "metric_rank" => cfg.metric_rank = parse_num(key, value).map_err(bad)?,
                "hidden" => cfg.hidden = parse_num(key, value).map_err(bad)?,
                "lr" => cfg.lr = parse_num(key, value).map_err(bad)?,
                "lambda" => cfg.lambda = parse_num(key, value).map_err(bad)?,
                "dropout" => cfg.dropout = parse_num(key, value).map_err(bad)?,
                "dropout_is_keep" => cfg.dropout_is_keep = parse_bool(value).map_err(bad)?,
                "cap_videos" => cfg.cap_videos = parse_num(key, value).map_err(bad)?,
                "cap_items" => cfg.cap_items = parse_num(key, value).map_err(bad)?,
                "negatives" => cfg.negatives = parse_num(key, value).map_err(bad)?,
                "batch_users" => cfg.batch_users = parse_num(key, value).map_err(bad)?,
                "epochs" => cfg.epochs = parse_num(key, value).map_err(bad)?,
                "patience" => cfg.patience = parse_num(key, value).map_err(bad)?,
                "seed" => cfg.seed = parse_num(key, value).map_err(bad)?,
                "threads" => cfg.threads = parse_num(key, value).map_err(bad)?,
                _ => return Err(bad(format!("unknown config key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &str) -> Result<ModelConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelConfig::parse(&text, path)
    }

    /// Canonical text form: fixed key order, round-trips through `parse`.
    pub fn to_text(&self) -> String {
        let fields = self
            .fields
            .iter()
            .map(|f| format!("{}:{}", f.name, f.dim))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let _ = writeln!(s, "fields = {fields}");
        let _ = writeln!(s, "k1 = {}", self.k1);
        let _ = writeln!(s, "k2 = {}", self.k2);
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "metric_rank = {}", self.metric_rank);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "dropout_is_keep = {}", self.dropout_is_keep);
        let _ = writeln!(s, "cap_videos = {}", self.cap_videos);
        let _ = writeln!(s, "cap_items = {}", self.cap_items);
        let _ = writeln!(s, "negatives = {}", self.negatives);
        let _ = writeln!(s, "batch_users = {}", self.batch_users);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }
}

fn parse_fields(value: &str) -> std::result::Result<Vec<FieldSpec>, String> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, dim) = part
            .split_once(':')
            .ok_or_else(|| format!("field spec {part:?} is not name:width"))?;
        let dim: usize = dim
            .trim()
            .parse()
            .map_err(|_| format!("bad field width in {part:?}"))?;
        out.push(FieldSpec {
            name: name.trim().to_string(),
            dim,
        });
    }
    if out.is_empty() {
        return Err("fields list is empty".into());
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value {value:?} for {key}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad boolean {value:?}")),
    }
}
