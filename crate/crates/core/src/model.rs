//! Preference-score models (matrix factorization and LightGCN) and top-k retrieval.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{IdMaps, InteractionLog};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model dimensions must be positive (users={n_users}, items={n_items}, dim={dim})")]
    ZeroDimension {
        n_users: usize,
        n_items: usize,
        dim: usize,
    },
    #[error("LightGCN needs at least one propagation layer")]
    NoLayers,
    #[error("LightGCN model has no propagation graph attached")]
    MissingGraph,
    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("graph shape {graph:?} does not match model shape {model:?}")]
    ShapeMismatch {
        graph: (usize, usize),
        model: (usize, usize),
    },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Row-major `rows x dim` matrix of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    /// Panics unless `values.len() == rows * dim`.
    pub fn from_values(rows: usize, dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * dim, "embedding buffer size mismatch");
        Self { rows, dim, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mf,
    #[serde(rename = "lightgcn")]
    LightGcn,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(ModelKind::Mf),
            "lightgcn" | "lgcn" => Ok(ModelKind::LightGcn),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mf => "mf",
            ModelKind::LightGcn => "lightgcn",
        })
    }
}

/// Symmetrically normalized user-item adjacency `D^-1/2 A D^-1/2`, stored from both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    n_users: usize,
    n_items: usize,
    user_offsets: Vec<usize>,
    user_nbrs: Vec<(u32, f64)>,
    item_offsets: Vec<usize>,
    item_nbrs: Vec<(u32, f64)>,
}

impl NormalizedGraph {
    pub fn from_log(log: &InteractionLog) -> Self {
        let weight =
            |u: u32, i: u32| 1.0 / ((log.user_degree(u) * log.item_degree(i)) as f64).sqrt();
        let mut user_offsets = Vec::with_capacity(log.n_users() + 1);
        let mut user_nbrs = Vec::with_capacity(log.n_interactions());
        user_offsets.push(0);
        for u in 0..log.n_users() as u32 {
            user_nbrs.extend(log.items_of(u).iter().map(|&i| (i, weight(u, i))));
            user_offsets.push(user_nbrs.len());
        }
        let mut item_offsets = Vec::with_capacity(log.n_items() + 1);
        let mut item_nbrs = Vec::with_capacity(log.n_interactions());
        item_offsets.push(0);
        for i in 0..log.n_items() as u32 {
            item_nbrs.extend(log.users_of(i).iter().map(|&u| (u, weight(u, i))));
            item_offsets.push(item_nbrs.len());
        }
        Self {
            n_users: log.n_users(),
            n_items: log.n_items(),
            user_offsets,
            user_nbrs,
            item_offsets,
            item_nbrs,
        }
    }

    fn user_row(&self, u: usize) -> &[(u32, f64)] {
        &self.user_nbrs[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    fn item_row(&self, i: usize) -> &[(u32, f64)] {
        &self.item_nbrs[self.item_offsets[i]..self.item_offsets[i + 1]]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_users, self.n_items)
    }
}

/// Layer-mean LightGCN propagation: `(1/(L+1)) * sum_{l=0..L} A^l E`.
///
/// The operator is symmetric, so the same call maps gradients with respect to
/// the propagated embeddings back onto the base embeddings. `n_layers = 0` is
/// the identity.
pub fn propagate(
    graph: &NormalizedGraph,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    n_layers: usize,
) -> (EmbeddingTable, EmbeddingTable) {
    let dim = users.dim();
    let mut acc_u = users.clone();
    let mut acc_i = items.clone();
    let mut cur_u = Cow::Borrowed(users);
    let mut cur_i = Cow::Borrowed(items);
    for _ in 0..n_layers {
        let mut next_u = EmbeddingTable::zeros(users.rows(), dim);
        for u in 0..users.rows() {
            let out = next_u.row_mut(u);
            for &(i, w) in graph.user_row(u) {
                axpy(w, cur_i.row(i as usize), out);
            }
        }
        let mut next_i = EmbeddingTable::zeros(items.rows(), dim);
        for i in 0..items.rows() {
            let out = next_i.row_mut(i);
            for &(u, w) in graph.item_row(i) {
                axpy(w, cur_u.row(u as usize), out);
            }
        }
        axpy(1.0, next_u.values(), acc_u.values_mut());
        axpy(1.0, next_i.values(), acc_i.values_mut());
        cur_u = Cow::Owned(next_u);
        cur_i = Cow::Owned(next_i);
    }
    let norm = 1.0 / (n_layers as f64 + 1.0);
    acc_u.scale(norm);
    acc_i.scale(norm);
    (acc_u, acc_i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub n_layers: usize,
    /// Standard deviation of the Gaussian initializer; `None` means `0.1 / sqrt(dim)`.
    pub init_scale: Option<f64>,
}

impl ModelSpec {
    pub fn mf(n_users: usize, n_items: usize, dim: usize) -> Self {
        Self {
            kind: ModelKind::Mf,
            n_users,
            n_items,
            dim,
            n_layers: 0,
            init_scale: None,
        }
    }

    pub fn lightgcn(n_users: usize, n_items: usize, dim: usize, n_layers: usize) -> Self {
        Self {
            kind: ModelKind::LightGcn,
            n_layers,
            ..Self::mf(n_users, n_items, dim)
        }
    }

    pub fn resolved_init_scale(&self) -> f64 {
        self.init_scale
            .unwrap_or_else(|| 0.1 / (self.dim.max(1) as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub(crate) kind: ModelKind,
    pub(crate) user_emb: EmbeddingTable,
    pub(crate) item_emb: EmbeddingTable,
    pub(crate) graph: Option<NormalizedGraph>,
    pub(crate) n_layers: usize,
    pub(crate) seed: u64,
}

impl Model {
    /// Gaussian-initialized model, users drawn before items from one ChaCha8 stream.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.n_users == 0 || spec.n_items == 0 || spec.dim == 0 {
            return Err(ModelError::ZeroDimension {
                n_users: spec.n_users,
                n_items: spec.n_items,
                dim: spec.dim,
            });
        }
        if spec.kind == ModelKind::LightGcn && spec.n_layers == 0 {
            return Err(ModelError::NoLayers);
        }
        let scale = spec.resolved_init_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize| {
            let mut t = EmbeddingTable::zeros(rows, spec.dim);
            if scale > 0.0 {
                let normal = Normal::new(0.0, scale).expect("finite positive scale");
                t.values_mut()
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng));
            }
            t
        };
        let user_emb = draw(spec.n_users);
        let item_emb = draw(spec.n_items);
        Ok(Self {
            kind: spec.kind,
            user_emb,
            item_emb,
            graph: None,
            n_layers: if spec.kind == ModelKind::Mf { 0 } else { spec.n_layers },
            seed,
        })
    }

    /// Assembles a model from explicit tables. For LightGCN `n_layers = 0` is allowed
    /// and makes propagation the identity.
    pub fn from_parts(
        kind: ModelKind,
        user_emb: EmbeddingTable,
        item_emb: EmbeddingTable,
        n_layers: usize,
    ) -> Result<Self> {
        if user_emb.dim() != item_emb.dim() || user_emb.dim() == 0 {
            return Err(ModelError::ZeroDimension {
                n_users: user_emb.rows(),
                n_items: item_emb.rows(),
                dim: user_emb.dim().min(item_emb.dim()),
            });
        }
        Ok(Self {
            kind,
            user_emb,
            item_emb,
            graph: None,
            n_layers,
            seed: 0,
        })
    }

    /// Attaches the normalized adjacency of `train`. Ignored for MF.
    pub fn attach_graph(&mut self, train: &InteractionLog) -> Result<()> {
        if self.kind == ModelKind::Mf {
            return Ok(());
        }
        let g = NormalizedGraph::from_log(train);
        if g.shape() != (self.n_users(), self.n_items()) {
            return Err(ModelError::ShapeMismatch {
                graph: g.shape(),
                model: (self.n_users(), self.n_items()),
            });
        }
        self.graph = Some(g);
        Ok(())
    }

    pub fn with_graph(mut self, train: &InteractionLog) -> Result<Self> {
        self.attach_graph(train)?;
        Ok(self)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.dim()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn user_embeddings(&self) -> &EmbeddingTable {
        &self.user_emb
    }

    pub fn item_embeddings(&self) -> &EmbeddingTable {
        &self.item_emb
    }

    pub fn user_embeddings_mut(&mut self) -> &mut EmbeddingTable {
        &mut self.user_emb
    }

    pub fn item_embeddings_mut(&mut self) -> &mut EmbeddingTable {
        &mut self.item_emb
    }

    pub fn graph(&self) -> Option<&NormalizedGraph> {
        self.graph.as_ref()
    }

    /// Embeddings the scores are computed from: the base tables for MF, propagated ones for LightGCN.
    pub fn propagate(&self) -> Result<(EmbeddingTable, EmbeddingTable)> {
        match self.kind {
            ModelKind::Mf => Ok((self.user_emb.clone(), self.item_emb.clone())),
            ModelKind::LightGcn => {
                let g = self.graph.as_ref().ok_or(ModelError::MissingGraph)?;
                Ok(propagate(g, &self.user_emb, &self.item_emb, self.n_layers))
            }
        }
    }

    /// A frozen scoring view. Propagation runs once here, not per score.
    pub fn scorer(&self) -> Result<Scorer<'_>> {
        match self.kind {
            ModelKind::Mf => Ok(Scorer {
                users: Cow::Borrowed(&self.user_emb),
                items: Cow::Borrowed(&self.item_emb),
            }),
            ModelKind::LightGcn => {
                let (u, i) = self.propagate()?;
                Ok(Scorer {
                    users: Cow::Owned(u),
                    items: Cow::Owned(i),
                })
            }
        }
    }

    /// Preference score of one pair. For LightGCN this propagates the whole
    /// graph; use [`Model::scorer`] for repeated scoring.
    pub fn score(&self, u: u32, i: u32) -> Result<f64> {
        self.check_indices(u, i)?;
        self.scorer()?.score(u, i)
    }

    fn check_indices(&self, u: u32, i: u32) -> Result<()> {
        if u as usize >= self.n_users() {
            return Err(ModelError::IndexOutOfRange {
                what: "user",
                index: u as usize,
                size: self.n_users(),
            });
        }
        if i as usize >= self.n_items() {
            return Err(ModelError::IndexOutOfRange {
                what: "item",
                index: i as usize,
                size: self.n_items(),
            });
        }
        Ok(())
    }
}

pub struct Scorer<'a> {
    users: Cow<'a, EmbeddingTable>,
    items: Cow<'a, EmbeddingTable>,
}

impl Scorer<'_> {
    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn score(&self, u: u32, i: u32) -> Result<f64> {
        if u as usize >= self.n_users() {
            return Err(ModelError::IndexOutOfRange {
                what: "user",
                index: u as usize,
                size: self.n_users(),
            });
        }
        if i as usize >= self.n_items() {
            return Err(ModelError::IndexOutOfRange {
                what: "item",
                index: i as usize,
                size: self.n_items(),
            });
        }
        Ok(dot(self.users.row(u as usize), self.items.row(i as usize)))
    }

    pub fn user_scores(&self, u: u32) -> Vec<f64> {
        let eu = self.users.row(u as usize);
        (0..self.n_items()).map(|i| dot(eu, self.items.row(i))).collect()
    }
}

/// Descending score, ascending index on ties.
#[inline]
fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top `k` items of one score vector, skipping the sorted `exclude` list.
pub fn rank_scores(scores: &[f64], exclude: &[u32], k: usize) -> Vec<(u32, f64)> {
    let mut cand: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .filter(|(i, _)| exclude.binary_search(i).is_err())
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, rank_order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_order);
    cand
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    None,
    TrainPositives,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserList {
    pub user: u32,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Per-user top-k lists, sorted by user index.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationRun {
    pub k: usize,
    pub lists: Vec<UserList>,
    pub exclusion: Exclusion,
}

impl RecommendationRun {
    pub fn list(&self, user: u32) -> Option<&UserList> {
        self.lists
            .binary_search_by_key(&user, |l| l.user)
            .ok()
            .map(|p| &self.lists[p])
    }

    /// `user<TAB>rank<TAB>item<TAB>score`, ranks starting at 1.
    pub fn write_tsv<W: Write>(&self, mut out: W, ids: &IdMaps) -> std::io::Result<()> {
        writeln!(out, "user\trank\titem\tscore")?;
        for l in &self.lists {
            for (rank, (&i, &s)) in l.items.iter().zip(&l.scores).enumerate() {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    ids.users.token(l.user),
                    rank + 1,
                    ids.items.token(i),
                    s
                )?;
            }
        }
        Ok(())
    }
}

/// Top-k recommendation for `users`, excluding each user's positives in `exclude`.
///
/// Lists are independent per user; `parallel` only changes scheduling, never the output.
pub fn top_k(
    scorer: &Scorer<'_>,
    users: &[u32],
    k: usize,
    exclude: Option<&InteractionLog>,
    parallel: bool,
) -> Result<RecommendationRun> {
    if k == 0 {
        return Err(ModelError::ZeroK);
    }
    let mut users = users.to_vec();
    users.sort_unstable();
    users.dedup();
    if let Some(&u) = users.last() {
        if u as usize >= scorer.n_users() {
            return Err(ModelError::IndexOutOfRange {
                what: "user",
                index: u as usize,
                size: scorer.n_users(),
            });
        }
    }
    let one = |&u: &u32| {
        let scores = scorer.user_scores(u);
        let ex = exclude.map(|l| l.items_of(u)).unwrap_or(&[]);
        let ranked = rank_scores(&scores, ex, k);
        UserList {
            user: u,
            items: ranked.iter().map(|r| r.0).collect(),
            scores: ranked.iter().map(|r| r.1).collect(),
        }
    };
    let lists = if parallel {
        users.par_iter().map(one).collect()
    } else {
        users.iter().map(one).collect()
    };
    Ok(RecommendationRun {
        k,
        lists,
        exclusion: if exclude.is_some() {
            Exclusion::TrainPositives
        } else {
            Exclusion::None
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    header: CheckpointHeader,
    user_embeddings: Vec<f64>,
    item_embeddings: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"IPLM";
const BINARY_VERSION: u32 = 1;

impl Model {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            kind: self.kind,
            n_users: self.n_users(),
            n_items: self.n_items(),
            dim: self.dim(),
            n_layers: self.n_layers,
            seed: self.seed,
        }
    }

    fn from_checkpoint(h: CheckpointHeader, users: Vec<f64>, items: Vec<f64>) -> Result<Self> {
        if users.len() != h.n_users * h.dim || items.len() != h.n_items * h.dim {
            return Err(ModelError::Malformed("embedding length does not match header".into()));
        }
        if !users.iter().chain(&items).all(|v| v.is_finite()) {
            return Err(ModelError::Malformed("non-finite embedding value".into()));
        }
        let mut m = Model::from_parts(
            h.kind,
            EmbeddingTable::from_values(h.n_users, h.dim, users),
            EmbeddingTable::from_values(h.n_items, h.dim, items),
            h.n_layers,
        )?;
        m.seed = h.seed;
        Ok(m)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        let ck = JsonCheckpoint {
            header: self.header(),
            user_embeddings: self.user_emb.values().to_vec(),
            item_embeddings: self.item_emb.values().to_vec(),
        };
        serde_json::to_writer(out, &ck)?;
        Ok(())
    }

    /// The graph is not stored; LightGCN checkpoints need [`Model::attach_graph`] after loading.
    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let ck: JsonCheckpoint = serde_json::from_reader(input)?;
        Self::from_checkpoint(ck.header, ck.user_embeddings, ck.item_embeddings)
    }

    /// `IPLM`, version, kind byte, then N, M, d, L, seed as u64 and the
    /// row-major f64 values (users, then items), all little-endian.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        out.write_all(&[match self.kind {
            ModelKind::Mf => 0u8,
            ModelKind::LightGcn => 1u8,
        }])?;
        let h = self.header();
        for v in [h.n_users, h.n_items, h.dim, h.n_layers] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&h.seed.to_le_bytes())?;
        for v in self.user_emb.values().iter().chain(self.item_emb.values()) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Malformed("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != BINARY_VERSION {
            return Err(ModelError::Malformed("unsupported version".into()));
        }
        let mut kind = [0u8; 1];
        input.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => ModelKind::Mf,
            1 => ModelKind::LightGcn,
            k => return Err(ModelError::Malformed(format!("unknown kind byte {k}"))),
        };
        let mut b8 = [0u8; 8];
        let mut next = || -> Result<u64> {
            input.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n_users = next()? as usize;
        let n_items = next()? as usize;
        let dim = next()? as usize;
        let n_layers = next()? as usize;
        let seed = next()?;
        let total = n_users
            .checked_add(n_items)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| ModelError::Malformed("header overflow".into()))?;
        let mut values = Vec::with_capacity(total.min(1 << 28));
        for _ in 0..total {
            values.push(f64::from_bits(next()?));
        }
        let items = values.split_off(n_users * dim);
        let h = CheckpointHeader {
            kind,
            n_users,
            n_items,
            dim,
            n_layers,
            seed,
        };
        Self::from_checkpoint(h, values, items)
    }

    /// Saves as binary when the extension is `.bin`, JSON otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(file)
        } else {
            self.write_json(file)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(file)
        } else {
            Self::read_json(file)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mf(users: &[&[f64]], items: &[&[f64]]) -> Model {
        let d = users[0].len();
        Model::from_parts(
            ModelKind::Mf,
            EmbeddingTable::from_values(users.len(), d, users.concat()),
            EmbeddingTable::from_values(items.len(), d, items.concat()),
            0,
        )
        .unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let spec = ModelSpec::mf(100, 50, 16);
        let a = Model::init(&spec, 3).unwrap();
        let b = Model::init(&spec, 3).unwrap();
        assert_eq!((a.user_emb.rows(), a.user_emb.dim()), (100, 16));
        assert_eq!((a.item_emb.rows(), a.item_emb.dim()), (50, 16));
        assert_eq!(a.user_emb, b.user_emb);
        assert_eq!(a.item_emb, b.item_emb);
        let c = Model::init(&spec, 4).unwrap();
        assert_ne!(a.user_emb, c.user_emb);
    }

    #[test]
    fn zero_scale_gives_zero_scores() {
        let spec = ModelSpec {
            init_scale: Some(0.0),
            ..ModelSpec::mf(4, 3, 2)
        };
        let m = Model::init(&spec, 1).unwrap();
        for u in 0..4 {
            for i in 0..3 {
                assert_eq!(m.score(u, i).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn init_errors() {
        assert!(matches!(
            Model::init(&ModelSpec::mf(3, 3, 0), 0),
            Err(ModelError::ZeroDimension { .. })
        ));
        assert!(matches!(
            Model::init(&ModelSpec::lightgcn(3, 3, 2, 0), 0),
            Err(ModelError::NoLayers)
        ));
    }

    #[test]
    fn mf_dot_product() {
        let m = mf(&[&[1.0, 0.0]], &[&[0.5, 2.0], &[0.0, 0.0]]);
        assert_eq!(m.score(0, 0).unwrap(), 0.5);
        assert_eq!(m.score(0, 1).unwrap(), 0.0);
        assert!(matches!(m.score(1, 0), Err(ModelError::IndexOutOfRange { what: "user", .. })));
        assert!(matches!(m.score(0, 2), Err(ModelError::IndexOutOfRange { what: "item", .. })));
    }

    #[test]
    fn zero_layer_lightgcn_matches_mf() {
        let base = mf(&[&[1.0, -2.0], &[0.3, 0.4]], &[&[0.5, 2.0], &[1.5, -1.0], &[0.2, 0.1]]);
        let log = InteractionLog::from_index_pairs(2, 3, [(0, 0), (1, 1), (1, 2)]);
        let lgcn = Model::from_parts(
            ModelKind::LightGcn,
            base.user_emb.clone(),
            base.item_emb.clone(),
            0,
        )
        .unwrap()
        .with_graph(&log)
        .unwrap();
        for u in 0..2 {
            for i in 0..3 {
                assert_eq!(lgcn.score(u, i).unwrap(), base.score(u, i).unwrap());
            }
        }
    }

    #[test]
    fn single_edge_propagation() {
        // user 0 <-> item 0, both degree 1; item 1 isolated
        let log = InteractionLog::from_index_pairs(1, 2, [(0, 0)]);
        let g = NormalizedGraph::from_log(&log);
        let users = EmbeddingTable::from_values(1, 2, vec![1.0, 3.0]);
        let items = EmbeddingTable::from_values(2, 2, vec![5.0, -1.0, 2.0, 4.0]);
        let (pu, pi) = propagate(&g, &users, &items, 1);
        assert_eq!(pu.row(0), &[3.0, 1.0]);
        assert_eq!(pi.row(0), &[3.0, 1.0]);
        // isolated: (e0 + 0) / 2
        assert_eq!(pi.row(1), &[1.0, 2.0]);

        let (_, pi3) = propagate(&g, &users, &items, 3);
        assert_eq!(pi3.row(1), &[0.5, 1.0]);
    }

    #[test]
    fn lightgcn_needs_graph() {
        let m = Model::init(&ModelSpec::lightgcn(2, 2, 2, 2), 0).unwrap();
        assert!(matches!(m.score(0, 0), Err(ModelError::MissingGraph)));
        let wrong = InteractionLog::from_index_pairs(3, 2, [(0, 0)]);
        let mut m2 = m.clone();
        assert!(matches!(m2.attach_graph(&wrong), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn ranking_examples() {
        let scores = [0.9, 0.1, 0.5];
        let ids = |r: Vec<(u32, f64)>| r.into_iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(ids(rank_scores(&scores, &[], 2)), vec![0, 2]);
        assert_eq!(ids(rank_scores(&scores, &[0], 2)), vec![2, 1]);
        assert_eq!(ids(rank_scores(&[1.0; 5], &[], 3)), vec![0, 1, 2]);
        assert_eq!(ids(rank_scores(&scores, &[0, 1], 2)), vec![2]);
    }

    #[test]
    fn top_k_excludes_train() {
        let m = mf(&[&[1.0], &[-1.0]], &[&[3.0], &[2.0], &[1.0]]);
        let train = InteractionLog::from_index_pairs(2, 3, [(0, 0), (1, 2)]);
        let run = top_k(&m.scorer().unwrap(), &[1, 0], 2, Some(&train), false).unwrap();
        assert_eq!(run.exclusion, Exclusion::TrainPositives);
        assert_eq!(run.list(0).unwrap().items, vec![1, 2]);
        assert_eq!(run.list(1).unwrap().items, vec![1, 0]);
        let par = top_k(&m.scorer().unwrap(), &[0, 1], 2, Some(&train), true).unwrap();
        assert_eq!(par, run);
        assert!(matches!(top_k(&m.scorer().unwrap(), &[0], 0, None, false), Err(ModelError::ZeroK)));
    }

    #[test]
    fn checkpoints_round_trip() {
        let m = Model::init(&ModelSpec::lightgcn(5, 4, 3, 2), 11).unwrap();
        let mut json = Vec::new();
        m.write_json(&mut json).unwrap();
        let back = Model::read_json(json.as_slice()).unwrap();
        assert_eq!(back.header(), m.header());
        assert_eq!(back.user_emb, m.user_emb);
        let mut bin = Vec::new();
        m.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 4 + 4 + 1 + 5 * 8 + (5 + 4) * 3 * 8);
        let back = Model::read_binary(bin.as_slice()).unwrap();
        assert_eq!(back.item_emb, m.item_emb);
        assert_eq!(back.header(), m.header());
        bin[0] = b'X';
        assert!(Model::read_binary(bin.as_slice()).is_err());
    }

    #[test]
    fn run_export() {
        let m = mf(&[&[1.0]], &[&[3.0], &[2.0]]);
        let log = InteractionLog::from_index_pairs(1, 2, [(0, 0)]);
        let run = top_k(&m.scorer().unwrap(), &[0], 2, None, false).unwrap();
        let mut out = Vec::new();
        run.write_tsv(&mut out, log.ids()).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "user\trank\titem\tscore\n0\t1\t0\t3\n0\t2\t1\t2\n");
    }

    proptest! {
        #[test]
        fn constant_shift_keeps_ranking(
            scores in prop::collection::vec(-50i32..50, 1..40),
            shift in -100i32..100,
            k in 1usize..10,
        ) {
            let a: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
            let b: Vec<f64> = scores.iter().map(|&s| (s + shift) as f64).collect();
            let ra: Vec<u32> = rank_scores(&a, &[], k).into_iter().map(|x| x.0).collect();
            let rb: Vec<u32> = rank_scores(&b, &[], k).into_iter().map(|x| x.0).collect();
            prop_assert_eq!(ra, rb);
        }

        #[test]
        fn top_k_never_hits_exclusion(
            seed in any::<u64>(),
            edges in prop::collection::vec((0u32..6, 0u32..9), 0..30),
            k in 1usize..12,
        ) {
            let train = InteractionLog::from_index_pairs(6, 9, edges);
            let m = Model::init(&ModelSpec::mf(6, 9, 3), seed).unwrap();
            let users: Vec<u32> = (0..6).collect();
            let run = top_k(&m.scorer().unwrap(), &users, k, Some(&train), false).unwrap();
            for l in &run.lists {
                let avail = 9 - train.items_of(l.user).len();
                prop_assert_eq!(l.items.len(), k.min(avail));
                for &i in &l.items {
                    prop_assert!(!train.contains(l.user, i));
                }
                for w in l.scores.windows(2) {
                    prop_assert!(w[0] >= w[1]);
                }
            }
        }

        #[test]
        fn propagation_is_linear(
            seed in any::<u64>(),
            alpha in -3.0f64..3.0,
            edges in prop::collection::vec((0u32..5, 0u32..4), 1..15),
        ) {
            let log = InteractionLog::from_index_pairs(5, 4, edges);
            let g = NormalizedGraph::from_log(&log);
            let m = Model::init(&ModelSpec::lightgcn(5, 4, 3, 2), seed).unwrap();
            let (u1, i1) = propagate(&g, &m.user_emb, &m.item_emb, 3);
            let mut su = m.user_emb.clone();
            let mut si = m.item_emb.clone();
            su.scale(alpha);
            si.scale(alpha);
            let (u2, i2) = propagate(&g, &su, &si, 3);
            for (a, b) in u1.values().iter().chain(i1.values()).zip(u2.values().iter().chain(i2.values())) {
                prop_assert!((a * alpha - b).abs() <= 1e-12 * (1.0 + b.abs()));
                prop_assert!(b.is_finite());
            }
        }
    }
}
