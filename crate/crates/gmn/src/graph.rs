//! The dual interaction graph: two bipartite edge sets (user-video and
//! user-item) sharing one user set, plus per-node categorical features.
//!
//! Nodes are addressed by dense per-kind indices assigned in first-seen order
//! during ingestion; the original string keys live in side tables (and in a
//! text sidecar next to the binary graph file). Adjacency is kept in a
//! canonical order — timestamp descending, index ascending — so that
//! serialization is reproducible byte for byte and "most recent first"
//! truncation is a plain prefix.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    User,
    Video,
    Item,
}

impl NodeKind {
    pub fn tag(self) -> &'static str {
        match self {
            NodeKind::User => "U",
            NodeKind::Video => "V",
            NodeKind::Item => "I",
        }
    }
}

/// Kind-qualified dense node handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: u32,
}

impl NodeId {
    pub fn user(index: u32) -> Self {
        NodeId {
            kind: NodeKind::User,
            index,
        }
    }
    pub fn video(index: u32) -> Self {
        NodeId {
            kind: NodeKind::Video,
            index,
        }
    }
    pub fn item(index: u32) -> Self {
        NodeId {
            kind: NodeKind::Item,
            index,
        }
    }
}

/// One feature field as discovered from the feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTable {
    pub name: String,
    /// Vocabulary size: max feature id seen in the table, plus one.
    pub vocab: u32,
}

/// Counters accumulated while ingesting logs; reported, never fatal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub uv_lines: usize,
    pub ui_lines: usize,
    pub uv_edges: usize,
    pub ui_edges: usize,
    /// Edges collapsed because the same (user, target) pair re-occurred;
    /// the surviving edge keeps the most recent timestamp.
    pub duplicate_edges: usize,
    /// Edges dropped because an endpoint key was absent from the feature table.
    pub skipped_unknown_key: usize,
    /// Feature rows for keys that never appeared in any log.
    pub unused_feature_rows: usize,
}

/// A user's capped 1-hop neighbourhood on both graphs: the unit of matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSubgraph {
    pub user: u32,
    pub videos: Vec<u32>,
    pub items: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct DualGraph {
    pub fields: Vec<FieldTable>,
    // Per-kind features, row-major with stride fields.len().
    feat: [Vec<u32>; 3],
    // Forward and reverse adjacency, canonical (ts desc, index asc) order.
    uv_by_user: Vec<Vec<(u32, i64)>>,
    uv_by_video: Vec<Vec<(u32, i64)>>,
    ui_by_user: Vec<Vec<(u32, i64)>>,
    ui_by_item: Vec<Vec<(u32, i64)>>,
    // Sorted video-index list per user, for O(log n) membership checks.
    uv_user_sorted: Vec<Vec<u32>>,
    keys: [Vec<String>; 3],
    index: [HashMap<String, u32>; 3],
    pub stats: IngestStats,
}

fn kind_slot(kind: NodeKind) -> usize {
    match kind {
        NodeKind::User => 0,
        NodeKind::Video => 1,
        NodeKind::Item => 2,
    }
}

impl DualGraph {
    pub fn n_users(&self) -> usize {
        self.keys[0].len()
    }
    pub fn n_videos(&self) -> usize {
        self.keys[1].len()
    }
    pub fn n_items(&self) -> usize {
        self.keys[2].len()
    }
    pub fn n_nodes(&self, kind: NodeKind) -> usize {
        self.keys[kind_slot(kind)].len()
    }

    pub fn key(&self, node: NodeId) -> &str {
        &self.keys[kind_slot(node.kind)][node.index as usize]
    }

    pub fn lookup(&self, kind: NodeKind, key: &str) -> Option<u32> {
        self.index[kind_slot(kind)].get(key).copied()
    }

    pub fn require(&self, kind: NodeKind, key: &str) -> Result<u32> {
        self.lookup(kind, key).ok_or_else(|| Error::UnknownKey {
            kind: match kind {
                NodeKind::User => "user",
                NodeKind::Video => "video",
                NodeKind::Item => "item",
            },
            key: key.to_string(),
        })
    }

    /// Feature ids of a node, one per field, in field order.
    pub fn features(&self, node: NodeId) -> &[u32] {
        let nf = self.fields.len();
        let base = node.index as usize * nf;
        &self.feat[kind_slot(node.kind)][base..base + nf]
    }

    pub fn user_videos(&self, u: u32) -> &[(u32, i64)] {
        &self.uv_by_user[u as usize]
    }
    pub fn user_items(&self, u: u32) -> &[(u32, i64)] {
        &self.ui_by_user[u as usize]
    }
    pub fn video_users(&self, v: u32) -> &[(u32, i64)] {
        &self.uv_by_video[v as usize]
    }
    pub fn item_users(&self, i: u32) -> &[(u32, i64)] {
        &self.ui_by_item[i as usize]
    }

    /// Does user `u` have a user-video edge to `v`?
    pub fn user_has_video(&self, u: u32, v: u32) -> bool {
        self.uv_user_sorted[u as usize].binary_search(&v).is_ok()
    }

    /// The matching unit: the `cap`-most-recent neighbours of `u` on each
    /// graph. Ties in the timestamp are broken by a shuffle keyed on
    /// `(seed, user)`, so results are deterministic given the seed and the
    /// seed has no effect when timestamps are distinct.
    pub fn extract_subgraph(&self, u: u32, cap_videos: usize, cap_items: usize, seed: u64) -> UserSubgraph {
        UserSubgraph {
            user: u,
            videos: cap_recent(self.user_videos(u), cap_videos, seed, u, 0x56),
            items: cap_recent(self.user_items(u), cap_items, seed, u, 0x49),
        }
    }

    // ---- persistence -------------------------------------------------------

    /// Write the binary graph file plus a `<path>.keys.tsv` sidecar with the
    /// dense-id-to-key mapping. The byte stream depends only on graph content.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path.display().to_string(), e))?;

        let side = sidecar_path(path);
        let file = std::fs::File::create(&side).map_err(|e| Error::io(side.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        self.write_keys(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(side.display().to_string(), e))?;
        Ok(())
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write cannot fail");
        buf
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for n in [self.n_users(), self.n_videos(), self.n_items(), self.fields.len()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for f in &self.fields {
            w.write_all(&(f.name.len() as u64).to_le_bytes())?;
            w.write_all(f.name.as_bytes())?;
            w.write_all(&(f.vocab as u64).to_le_bytes())?;
        }
        for kind in 0..3 {
            for id in &self.feat[kind] {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        write_csr(w, &self.uv_by_user)?;
        write_csr(w, &self.ui_by_user)?;
        Ok(())
    }

    fn write_keys<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (kind, tag) in [(0, "U"), (1, "V"), (2, "I")] {
            for (i, key) in self.keys[kind].iter().enumerate() {
                writeln!(w, "{tag}\t{i}\t{key}")?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DualGraph> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let side = sidecar_path(path);
        let keys_text =
            std::fs::read_to_string(&side).map_err(|e| Error::io(side.display().to_string(), e))?;
        DualGraph::deserialize(&bytes, &keys_text, &path.display().to_string())
    }

    pub fn deserialize(bytes: &[u8], keys_text: &str, origin: &str) -> Result<DualGraph> {
        let mut r = ByteReader::new(bytes, origin);
        r.expect_magic(MAGIC)?;
        let n_users = r.u64()? as usize;
        let n_videos = r.u64()? as usize;
        let n_items = r.u64()? as usize;
        let n_fields = r.u64()? as usize;
        let mut fields = Vec::with_capacity(n_fields);
        for _ in 0..n_fields {
            let len = r.u64()? as usize;
            let name = String::from_utf8(r.bytes(len)?.to_vec())
                .map_err(|_| r.format_err("field name is not UTF-8"))?;
            let vocab = r.u64()? as u32;
            fields.push(FieldTable { name, vocab });
        }
        let mut feat: [Vec<u32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (slot, n) in [(0, n_users), (1, n_videos), (2, n_items)] {
            feat[slot] = (0..n * n_fields).map(|_| r.u32()).collect::<Result<_>>()?;
        }
        let uv_by_user = read_csr(&mut r, n_users, n_videos)?;
        let ui_by_user = read_csr(&mut r, n_users, n_items)?;
        if !r.at_end() {
            return Err(r.format_err("trailing bytes after adjacency"));
        }

        let mut keys: [Vec<String>; 3] = [
            vec![String::new(); n_users],
            vec![String::new(); n_videos],
            vec![String::new(); n_items],
        ];
        let mut seen = [0usize; 3];
        for (idx, line) in keys_text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (tag, i, key) = match (parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(i), Some(k)) => (t, i, k),
                _ => {
                    return Err(Error::Malformed {
                        path: format!("{origin}.keys.tsv"),
                        line: idx + 1,
                        what: "expected kind\\tindex\\tkey".into(),
                    })
                }
            };
            let slot = match tag {
                "U" => 0,
                "V" => 1,
                "I" => 2,
                _ => {
                    return Err(Error::Malformed {
                        path: format!("{origin}.keys.tsv"),
                        line: idx + 1,
                        what: format!("unknown kind tag {tag:?}"),
                    })
                }
            };
            let i: usize = i.parse().map_err(|_| Error::Malformed {
                path: format!("{origin}.keys.tsv"),
                line: idx + 1,
                what: "bad index".into(),
            })?;
            if i >= keys[slot].len() {
                return Err(Error::Malformed {
                    path: format!("{origin}.keys.tsv"),
                    line: idx + 1,
                    what: format!("index {i} out of range"),
                });
            }
            keys[slot][i] = key.to_string();
            seen[slot] += 1;
        }
        if seen != [n_users, n_videos, n_items] {
            return Err(Error::Format {
                path: format!("{origin}.keys.tsv"),
                what: format!(
                    "key counts {seen:?} do not match graph sizes [{n_users}, {n_videos}, {n_items}]"
                ),
            });
        }

        let index = [make_index(&keys[0]), make_index(&keys[1]), make_index(&keys[2])];
        let uv_by_video = reverse_adjacency(&uv_by_user, n_videos);
        let ui_by_item = reverse_adjacency(&ui_by_user, n_items);
        let uv_user_sorted = sorted_targets(&uv_by_user);
        Ok(DualGraph {
            fields,
            feat,
            uv_by_user,
            uv_by_video,
            ui_by_user,
            ui_by_item,
            uv_user_sorted,
            keys,
            index,
            stats: IngestStats::default(),
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".keys.tsv");
    std::path::PathBuf::from(s)
}

const MAGIC: &[u8; 5] = b"GMNG1";

fn write_csr<W: Write>(w: &mut W, adj: &[Vec<(u32, i64)>]) -> std::io::Result<()> {
    let mut offset = 0u64;
    w.write_all(&offset.to_le_bytes())?;
    for row in adj {
        offset += row.len() as u64;
        w.write_all(&offset.to_le_bytes())?;
    }
    for row in adj {
        for (t, _) in row {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    for row in adj {
        for (_, ts) in row {
            w.write_all(&ts.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_csr(r: &mut ByteReader, n: usize, n_targets: usize) -> Result<Vec<Vec<(u32, i64)>>> {
    let mut offsets = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        offsets.push(r.u64()? as usize);
    }
    if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(r.format_err("offsets are not non-decreasing from zero"));
    }
    let m = *offsets.last().unwrap();
    let mut targets = Vec::with_capacity(m);
    for _ in 0..m {
        let t = r.u32()?;
        if t as usize >= n_targets {
            return Err(r.format_err("edge target out of range"));
        }
        targets.push(t);
    }
    let mut stamps = Vec::with_capacity(m);
    for _ in 0..m {
        stamps.push(r.i64()?);
    }
    let mut adj = Vec::with_capacity(n);
    for i in 0..n {
        adj.push(
            (offsets[i]..offsets[i + 1])
                .map(|e| (targets[e], stamps[e]))
                .collect(),
        );
    }
    Ok(adj)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: String,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], origin: &str) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            origin: origin.to_string(),
        }
    }
    pub(crate) fn format_err(&self, what: &str) -> Error {
        Error::Format {
            path: self.origin.clone(),
            what: format!("{what} (at byte {})", self.pos),
        }
    }
    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self
            .bytes
            .get(..magic.len())
            .ok_or_else(|| self.format_err("file too short for magic"))?;
        if got != magic {
            return Err(self.format_err("bad magic"));
        }
        self.pos = magic.len();
        Ok(())
    }
    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.format_err("unexpected end of file"))?;
        self.pos = end;
        Ok(s)
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        self.fixed().map(u64::from_le_bytes)
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.fixed().map(u32::from_le_bytes)
    }
    pub(crate) fn i64(&mut self) -> Result<i64> {
        self.fixed().map(i64::from_le_bytes)
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        self.fixed().map(f64::from_le_bytes)
    }
    fn fixed<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.format_err("unexpected end of file"))?;
        self.pos = end;
        Ok(s.try_into().unwrap())
    }
    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn make_index(keys: &[String]) -> HashMap<String, u32> {
    keys.iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), i as u32))
        .collect()
}

fn reverse_adjacency(fwd: &[Vec<(u32, i64)>], n_targets: usize) -> Vec<Vec<(u32, i64)>> {
    let mut rev: Vec<Vec<(u32, i64)>> = vec![Vec::new(); n_targets];
    for (src, row) in fwd.iter().enumerate() {
        for &(t, ts) in row {
            rev[t as usize].push((src as u32, ts));
        }
    }
    for row in &mut rev {
        canonical_sort(row);
    }
    rev
}

fn sorted_targets(fwd: &[Vec<(u32, i64)>]) -> Vec<Vec<u32>> {
    fwd.iter()
        .map(|row| {
            let mut t: Vec<u32> = row.iter().map(|&(v, _)| v).collect();
            t.sort_unstable();
            t
        })
        .collect()
}

/// Canonical adjacency order: newest first, index ascending among equals.
fn canonical_sort(row: &mut [(u32, i64)]) {
    row.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Keep the `cap` most recent neighbours. Entries with tied timestamps are
/// ordered by a shuffle drawn from `(seed, node, salt)` so truncation among
/// equals is unbiased but reproducible.
fn cap_recent(row: &[(u32, i64)], cap: usize, seed: u64, node: u32, salt: u64) -> Vec<u32> {
    if row.len() <= cap {
        let has_tie = row.windows(2).any(|w| w[0].1 == w[1].1);
        if !has_tie {
            return row.iter().map(|&(t, _)| t).collect();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, node as u64, salt));
    let mut keyed: Vec<(i64, u64, u32)> = row
        .iter()
        .map(|&(t, ts)| (ts, rng.gen::<u64>(), t))
        .collect();
    // ts desc, then the random key: the key only decides order among ties.
    keyed.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(cap).map(|(_, _, t)| t).collect()
}

/// splitmix64-style mixing of a seed with per-node salts.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---- construction ----------------------------------------------------------

/// Programmatic graph construction; `ingest_logs` is a thin file front-end.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    fields: Vec<String>,
    vocab: Vec<u32>,
    features: HashMap<String, Vec<u32>>,
    uv: Vec<(String, String, i64)>,
    ui: Vec<(String, String, i64)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    /// Register a node's features: `(field name, feature id)` pairs. The first
    /// row fixes the field set; every later row must cover exactly the same
    /// fields.
    pub fn feature_row(&mut self, key: &str, pairs: &[(&str, u32)]) -> Result<()> {
        if self.fields.is_empty() {
            for (name, _) in pairs {
                self.fields.push(name.to_string());
                self.vocab.push(0);
            }
            if self.fields.is_empty() {
                return Err(Error::Invalid(format!("feature row for {key:?} has no fields")));
            }
        }
        let mut row = vec![u32::MAX; self.fields.len()];
        for (name, id) in pairs {
            let slot = self
                .fields
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| Error::Invalid(format!("feature row for {key:?}: unknown field {name:?}")))?;
            if row[slot] != u32::MAX {
                return Err(Error::Invalid(format!(
                    "feature row for {key:?}: field {name:?} listed twice"
                )));
            }
            row[slot] = *id;
            self.vocab[slot] = self.vocab[slot].max(id + 1);
        }
        if let Some(slot) = row.iter().position(|&v| v == u32::MAX) {
            return Err(Error::Invalid(format!(
                "feature row for {key:?} is missing field {:?}",
                self.fields[slot]
            )));
        }
        self.features.insert(key.to_string(), row);
        Ok(())
    }

    pub fn uv(&mut self, user: &str, video: &str, ts: i64) {
        self.uv.push((user.to_string(), video.to_string(), ts));
    }

    pub fn ui(&mut self, user: &str, item: &str, ts: i64) {
        self.ui.push((user.to_string(), item.to_string(), ts));
    }

    pub fn build(mut self) -> Result<DualGraph> {
        if self.fields.is_empty() {
            return Err(Error::Invalid("no feature rows supplied".into()));
        }
        let mut stats = IngestStats {
            uv_lines: self.uv.len(),
            ui_lines: self.ui.len(),
            ..IngestStats::default()
        };

        let mut keys: [Vec<String>; 3] = Default::default();
        let mut index: [HashMap<String, u32>; 3] = Default::default();
        let mut feat: [Vec<u32>; 3] = Default::default();
        let features = &self.features;
        let mut used = std::collections::HashSet::new();
        let intern = |slot: usize,
                          key: &str,
                          keys: &mut [Vec<String>; 3],
                          index: &mut [HashMap<String, u32>; 3],
                          feat: &mut [Vec<u32>; 3],
                          used: &mut std::collections::HashSet<String>|
         -> Option<u32> {
            if let Some(&i) = index[slot].get(key) {
                return Some(i);
            }
            let row = features.get(key)?;
            let i = keys[slot].len() as u32;
            keys[slot].push(key.to_string());
            index[slot].insert(key.to_string(), i);
            feat[slot].extend_from_slice(row);
            used.insert(key.to_string());
            Some(i)
        };

        // Dense ids in first-seen order: the video log first, then the item log.
        let mut uv_edges: Vec<(u32, u32, i64)> = Vec::with_capacity(self.uv.len());
        for (user, video, ts) in std::mem::take(&mut self.uv) {
            let u = intern(0, &user, &mut keys, &mut index, &mut feat, &mut used);
            let v = intern(1, &video, &mut keys, &mut index, &mut feat, &mut used);
            match (u, v) {
                (Some(u), Some(v)) => uv_edges.push((u, v, ts)),
                _ => stats.skipped_unknown_key += 1,
            }
        }
        let mut ui_edges: Vec<(u32, u32, i64)> = Vec::with_capacity(self.ui.len());
        for (user, item, ts) in std::mem::take(&mut self.ui) {
            let u = intern(0, &user, &mut keys, &mut index, &mut feat, &mut used);
            let i = intern(2, &item, &mut keys, &mut index, &mut feat, &mut used);
            match (u, i) {
                (Some(u), Some(i)) => ui_edges.push((u, i, ts)),
                _ => stats.skipped_unknown_key += 1,
            }
        }
        stats.unused_feature_rows = features.len() - used.len();

        let n_users = keys[0].len();
        let n_videos = keys[1].len();
        let n_items = keys[2].len();
        let uv_by_user = collapse(&mut uv_edges, n_users, &mut stats);
        let ui_by_user = collapse(&mut ui_edges, n_users, &mut stats);
        stats.uv_edges = uv_by_user.iter().map(Vec::len).sum();
        stats.ui_edges = ui_by_user.iter().map(Vec::len).sum();

        let fields = self
            .fields
            .iter()
            .zip(&self.vocab)
            .map(|(name, &vocab)| FieldTable {
                name: name.clone(),
                vocab,
            })
            .collect();
        let uv_by_video = reverse_adjacency(&uv_by_user, n_videos);
        let ui_by_item = reverse_adjacency(&ui_by_user, n_items);
        let uv_user_sorted = sorted_targets(&uv_by_user);
        Ok(DualGraph {
            fields,
            feat,
            uv_by_user,
            uv_by_video,
            ui_by_user,
            ui_by_item,
            uv_user_sorted,
            keys,
            index,
            stats,
        })
    }
}

/// Sort raw edges, collapse duplicates keeping the most recent timestamp, and
/// bucket them per source in canonical order.
fn collapse(edges: &mut Vec<(u32, u32, i64)>, n_sources: usize, stats: &mut IngestStats) -> Vec<Vec<(u32, i64)>> {
    // (source, target) groups with newest first inside each group.
    edges.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(b.2.cmp(&a.2)));
    let mut adj: Vec<Vec<(u32, i64)>> = vec![Vec::new(); n_sources];
    let mut prev: Option<(u32, u32)> = None;
    for &(s, t, ts) in edges.iter() {
        if prev == Some((s, t)) {
            stats.duplicate_edges += 1;
            continue;
        }
        prev = Some((s, t));
        adj[s as usize].push((t, ts));
    }
    for row in &mut adj {
        canonical_sort(row);
    }
    adj
}

/// Ingest the two interaction logs and the feature table.
///
/// Log lines are `user_key \t target_key \t unix_timestamp`; feature-table
/// lines are `node_key \t field:id \t field:id ...`. Malformed lines are hard
/// errors carrying the line number; edges whose endpoints are missing from the
/// feature table are skipped and counted in [`IngestStats`].
pub fn ingest_logs(uv_log: &Path, ui_log: &Path, feature_table: &Path) -> Result<DualGraph> {
    let mut builder = GraphBuilder::new();
    parse_feature_table(feature_table, &mut builder)?;
    for (path, is_uv) in [(uv_log, true), (ui_log, false)] {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (user, target, ts) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(u), Some(t), Some(ts), None) if !u.is_empty() && !t.is_empty() => (u, t, ts),
                _ => {
                    return Err(Error::Malformed {
                        path: path.display().to_string(),
                        line: idx + 1,
                        what: "expected user\\ttarget\\ttimestamp".into(),
                    })
                }
            };
            let ts: i64 = ts.parse().map_err(|_| Error::Malformed {
                path: path.display().to_string(),
                line: idx + 1,
                what: format!("bad timestamp {ts:?}"),
            })?;
            if is_uv {
                builder.uv(user, target, ts);
            } else {
                builder.ui(user, target, ts);
            }
        }
    }
    builder.build()
}

fn parse_feature_table(path: &Path, builder: &mut GraphBuilder) -> Result<()> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let key = parts.next().unwrap_or("");
        if key.is_empty() {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                line: idx + 1,
                what: "empty node key".into(),
            });
        }
        let mut pairs: Vec<(&str, u32)> = Vec::new();
        for part in parts {
            let (name, id) = part.split_once(':').ok_or_else(|| Error::Malformed {
                path: path.display().to_string(),
                line: idx + 1,
                what: format!("feature {part:?} is not field:id"),
            })?;
            let id: u32 = id.parse().map_err(|_| Error::Malformed {
                path: path.display().to_string(),
                line: idx + 1,
                what: format!("bad feature id in {part:?}"),
            })?;
            pairs.push((name, id));
        }
        builder.feature_row(key, &pairs).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            what: e.to_string(),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three users, a couple of videos and items; u1 ends up with videos
    /// {v1, v2} and items {i1..i4}.
    fn toy() -> DualGraph {
        let mut b = GraphBuilder::new();
        for key in ["u1", "u2", "u3", "v1", "v2", "v3", "i1", "i2", "i3", "i4"] {
            b.feature_row(key, &[("id", intern_id(key))]).unwrap();
        }
        b.uv("u1", "v1", 10);
        b.uv("u1", "v2", 20);
        b.uv("u2", "v2", 30);
        b.uv("u3", "v3", 40);
        b.ui("u1", "i1", 1);
        b.ui("u1", "i2", 2);
        b.ui("u1", "i3", 3);
        b.ui("u1", "i4", 4);
        b.ui("u2", "i4", 5);
        b.build().unwrap()
    }

    fn intern_id(key: &str) -> u32 {
        // stable toy feature ids: u* → 0.., v* → 10.., i* → 20..
        let n: u32 = key[1..].parse().unwrap();
        match key.as_bytes()[0] {
            b'u' => n,
            b'v' => 10 + n,
            _ => 20 + n,
        }
    }

    #[test]
    fn dense_ids_follow_first_seen_order() {
        let g = toy();
        assert_eq!(g.lookup(NodeKind::User, "u1"), Some(0));
        assert_eq!(g.lookup(NodeKind::User, "u2"), Some(1));
        assert_eq!(g.lookup(NodeKind::Video, "v1"), Some(0));
        assert_eq!(g.lookup(NodeKind::Video, "v2"), Some(1));
        assert_eq!(g.lookup(NodeKind::Item, "i1"), Some(0));
        assert_eq!(g.key(NodeId::item(3)), "i4");
    }

    #[test]
    fn one_hop_counts_match_the_toy() {
        let g = toy();
        let u1 = g.lookup(NodeKind::User, "u1").unwrap();
        let sub = g.extract_subgraph(u1, 50, 50, 7);
        assert_eq!(sub.videos.len(), 2);
        assert_eq!(sub.items.len(), 4);
        // Newest first.
        assert_eq!(sub.videos, vec![1, 0]);
        assert_eq!(sub.items, vec![3, 2, 1, 0]);
    }

    #[test]
    fn membership_and_reverse_adjacency() {
        let g = toy();
        assert!(g.user_has_video(0, 0));
        assert!(!g.user_has_video(2, 0));
        let v2 = g.lookup(NodeKind::Video, "v2").unwrap();
        let users: Vec<u32> = g.video_users(v2).iter().map(|&(u, _)| u).collect();
        assert_eq!(users, vec![1, 0]); // u2 at ts 30, then u1 at ts 20
    }

    #[test]
    fn caps_keep_the_most_recent() {
        let mut b = GraphBuilder::new();
        b.feature_row("u", &[("id", 0)]).unwrap();
        for n in 0..60 {
            let key = format!("v{n}");
            b.feature_row(&key, &[("id", n + 1)]).unwrap();
            b.uv("u", &key, n as i64);
        }
        let g = b.build().unwrap();
        let sub = g.extract_subgraph(0, 50, 50, 1);
        assert_eq!(sub.videos.len(), 50);
        // Videos 10..59 survive; 0..9 (oldest) are dropped.
        let mut kept = sub.videos.clone();
        kept.sort_unstable();
        assert_eq!(kept, (10..60).collect::<Vec<u32>>());
    }

    #[test]
    fn tie_break_is_seeded_and_deterministic() {
        let mut b = GraphBuilder::new();
        b.feature_row("u", &[("id", 0)]).unwrap();
        for n in 0..20 {
            let key = format!("v{n}");
            b.feature_row(&key, &[("id", n + 1)]).unwrap();
            b.uv("u", &key, 5); // all timestamps tie
        }
        let g = b.build().unwrap();
        let a = g.extract_subgraph(0, 8, 8, 42);
        let b2 = g.extract_subgraph(0, 8, 8, 42);
        assert_eq!(a, b2, "same seed, same selection");
        let c = g.extract_subgraph(0, 8, 8, 43);
        assert_ne!(a.videos, c.videos, "different seed shuffles the tie differently");

        // Distinct timestamps: the seed must not matter.
        let g = toy();
        let x = g.extract_subgraph(0, 1, 2, 1);
        let y = g.extract_subgraph(0, 1, 2, 999);
        assert_eq!(x, y);
    }

    #[test]
    fn duplicates_collapse_keeping_newest_timestamp() {
        let mut b = GraphBuilder::new();
        b.feature_row("u", &[("id", 0)]).unwrap();
        b.feature_row("v", &[("id", 1)]).unwrap();
        b.uv("u", "v", 10);
        b.uv("u", "v", 30);
        b.uv("u", "v", 20);
        let g = b.build().unwrap();
        assert_eq!(g.stats.duplicate_edges, 2);
        assert_eq!(g.user_videos(0), &[(0, 30)]);
    }

    #[test]
    fn unknown_keys_are_skipped_and_counted() {
        let mut b = GraphBuilder::new();
        b.feature_row("u", &[("id", 0)]).unwrap();
        b.feature_row("v", &[("id", 1)]).unwrap();
        b.uv("u", "v", 1);
        b.uv("u", "ghost", 2);
        b.uv("phantom", "v", 3);
        let g = b.build().unwrap();
        assert_eq!(g.stats.skipped_unknown_key, 2);
        assert_eq!(g.stats.uv_edges, 1);
        assert_eq!(g.n_videos(), 1);
    }

    #[test]
    fn feature_rows_must_cover_all_fields() {
        let mut b = GraphBuilder::new();
        b.feature_row("a", &[("id", 1), ("topic", 2)]).unwrap();
        let err = b.feature_row("b", &[("id", 3)]).unwrap_err();
        assert!(err.to_string().contains("missing field"), "{err}");
    }

    #[test]
    fn ingest_reports_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let uv = dir.path().join("uv.tsv");
        let ui = dir.path().join("ui.tsv");
        let ft = dir.path().join("features.tsv");
        std::fs::write(&ft, "u\tid:0\nv\tid:1\n").unwrap();
        std::fs::write(&uv, "u\tv\t10\nu\tv\n").unwrap();
        std::fs::write(&ui, "").unwrap();
        let err = ingest_logs(&uv, &ui, &ft).unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }

        std::fs::write(&uv, "u\tv\tnot_a_ts\n").unwrap();
        let err = ingest_logs(&uv, &ui, &ft).unwrap_err();
        assert!(err.to_string().contains("timestamp"), "{err}");
    }

    #[test]
    fn ingest_files_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let uv = dir.path().join("uv.tsv");
        let ui = dir.path().join("ui.tsv");
        let ft = dir.path().join("features.tsv");
        std::fs::write(&ft, "u1\tid:0\nu2\tid:1\nv1\tid:2\ni1\tid:3\nnever\tid:9\n").unwrap();
        std::fs::write(&uv, "u1\tv1\t100\nu2\tv1\t200\nu1\tmissing\t5\n").unwrap();
        std::fs::write(&ui, "u1\ti1\t50\n").unwrap();
        let g = ingest_logs(&uv, &ui, &ft).unwrap();
        assert_eq!(g.n_users(), 2);
        assert_eq!(g.n_videos(), 1);
        assert_eq!(g.n_items(), 1);
        assert_eq!(g.stats.skipped_unknown_key, 1);
        assert_eq!(g.stats.unused_feature_rows, 1);
        assert_eq!(g.fields[0].vocab, 10); // max id 9, plus one
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let g = toy();
        let bytes = g.serialize();
        let mut keys = Vec::new();
        g.write_keys(&mut keys).unwrap();
        let keys_text = String::from_utf8(keys).unwrap();
        let back = DualGraph::deserialize(&bytes, &keys_text, "mem").unwrap();
        assert_eq!(back.serialize(), bytes);
        assert_eq!(back.n_users(), g.n_users());
        assert_eq!(back.user_videos(0), g.user_videos(0));
        assert_eq!(back.item_users(3), g.item_users(3));
        assert_eq!(back.features(NodeId::video(1)), g.features(NodeId::video(1)));
    }

    #[test]
    fn save_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.bin");
        let g = toy();
        g.save(&path).unwrap();
        let back = DualGraph::load(&path).unwrap();
        assert_eq!(back.serialize(), g.serialize());
        assert_eq!(back.key(NodeId::user(2)), "u3");
        assert_eq!(back.lookup(NodeKind::Item, "i2"), Some(1));
    }

    #[test]
    fn deserialize_rejects_corruption() {
        let g = toy();
        let mut bytes = g.serialize();
        let mut keys = Vec::new();
        g.write_keys(&mut keys).unwrap();
        let keys_text = String::from_utf8(keys).unwrap();

        let err = DualGraph::deserialize(&bytes[..3], &keys_text, "mem").unwrap_err();
        assert!(err.to_string().contains("magic") || err.to_string().contains("short"));

        bytes[0] = b'X';
        let err = DualGraph::deserialize(&bytes, &keys_text, "mem").unwrap_err();
        assert!(err.to_string().contains("magic"));

        let bytes = g.serialize();
        let err = DualGraph::deserialize(&bytes, "U\t0\tu1\n", "mem").unwrap_err();
        assert!(err.to_string().contains("key counts"), "{err}");
    }
}
