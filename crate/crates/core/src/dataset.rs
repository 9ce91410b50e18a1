//! Interaction logs: ingestion, per-item stratified splits and popularity counts.
//!
//! Internal user and item indices are dense and assigned in order of first
//! appearance in the source. Split members share the index maps of the log
//! they were cut from, so an item that only occurs in the test split keeps its
//! global index and simply has no training interactions.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read interaction source: {0}")]
    Io(#[from] std::io::Error),
    #[error("no valid interaction rows ({malformed} malformed, {filtered} below threshold)")]
    NoValidRows { malformed: usize, filtered: usize },
    #[error("column {column} is out of range: widest row has {widest} columns")]
    ColumnOutOfRange { column: usize, widest: usize },
    #[error("invalid format spec: {0}")]
    InvalidFormat(String),
    #[error("split ratios must be positive and sum to 1, got ({0}, {1}, {2})")]
    InvalidRatios(f64, f64, f64),
    #[error("cannot split an empty interaction log")]
    EmptyLog,
    #[error("failed to write split manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Field separator of a delimited interaction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delimiter {
    Tab,
    Comma,
    /// MovieLens `::` separator.
    DoubleColon,
}

impl Delimiter {
    pub fn as_str(self) -> &'static str {
        match self {
            Delimiter::Tab => "\t",
            Delimiter::Comma => ",",
            Delimiter::DoubleColon => "::",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Delimiter::Tab => "tab",
            Delimiter::Comma => "comma",
            Delimiter::DoubleColon => "double-colon",
        }
    }
}

impl std::str::FromStr for Delimiter {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" | "\\t" | "\t" => Ok(Delimiter::Tab),
            "comma" | "," => Ok(Delimiter::Comma),
            "double-colon" | "::" => Ok(Delimiter::DoubleColon),
            other => Err(DatasetError::InvalidFormat(format!("unknown delimiter {other:?}"))),
        }
    }
}

/// Column layout of a delimited interaction file. Column indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub delimiter: Delimiter,
    pub user_col: usize,
    pub item_col: usize,
    pub rating_col: Option<usize>,
    /// Rows whose rating is below this value are dropped. Requires `rating_col`.
    pub rating_threshold: Option<f64>,
    pub has_header: bool,
}

impl FormatSpec {
    pub fn new(delimiter: Delimiter) -> Self {
        Self {
            delimiter,
            user_col: 0,
            item_col: 1,
            rating_col: None,
            rating_threshold: None,
            has_header: false,
        }
    }

    /// `user::item::rating::timestamp`, every rating kept.
    pub fn movielens() -> Self {
        Self {
            rating_col: Some(2),
            ..Self::new(Delimiter::DoubleColon)
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.rating_threshold = Some(threshold);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.user_col == self.item_col {
            return Err(DatasetError::InvalidFormat(
                "user and item columns must differ".into(),
            ));
        }
        if self.rating_threshold.is_some() && self.rating_col.is_none() {
            return Err(DatasetError::InvalidFormat(
                "rating threshold set without a rating column".into(),
            ));
        }
        Ok(())
    }

    fn max_col(&self) -> usize {
        self.user_col
            .max(self.item_col)
            .max(self.rating_col.unwrap_or(0))
    }
}

/// One positive user-item record as it appears in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub weight: Option<f64>,
}

/// Bijection between external tokens and dense internal indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl IdMap {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: u32) -> &str {
        &self.tokens[idx as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&idx) = self.index.get(token) {
            return idx;
        }
        let idx = self.tokens.len() as u32;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), idx);
        idx
    }

    /// Identity map `"0".."n-1"`, used for synthetic logs.
    pub fn sequential(n: usize) -> Self {
        let mut map = Self::default();
        for i in 0..n {
            map.intern(&i.to_string());
        }
        map
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub users: IdMap,
    pub items: IdMap,
}

/// Sparse positive interactions stored in both orientations (CSR by user and by item).
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    n_users: usize,
    n_items: usize,
    user_offsets: Vec<usize>,
    user_items: Vec<u32>,
    item_offsets: Vec<usize>,
    item_users: Vec<u32>,
    ids: Arc<IdMaps>,
}

impl InteractionLog {
    /// Builds a log from internal index pairs. Duplicate pairs collapse to one.
    ///
    /// Panics if an index is outside `ids`.
    pub fn from_pairs(ids: Arc<IdMaps>, pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let n_users = ids.users.len();
        let n_items = ids.items.len();
        let mut pairs: Vec<(u32, u32)> = pairs.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert!(
            pairs
                .iter()
                .all(|&(u, i)| (u as usize) < n_users && (i as usize) < n_items),
            "interaction index outside id maps"
        );

        let mut user_offsets = vec![0usize; n_users + 1];
        for &(u, _) in &pairs {
            user_offsets[u as usize + 1] += 1;
        }
        for u in 0..n_users {
            user_offsets[u + 1] += user_offsets[u];
        }
        let user_items: Vec<u32> = pairs.iter().map(|&(_, i)| i).collect();

        let mut item_offsets = vec![0usize; n_items + 1];
        for &(_, i) in &pairs {
            item_offsets[i as usize + 1] += 1;
        }
        for i in 0..n_items {
            item_offsets[i + 1] += item_offsets[i];
        }
        let mut cursor = item_offsets.clone();
        let mut item_users = vec![0u32; pairs.len()];
        // pairs are sorted by user, so each item's user list comes out sorted
        for &(u, i) in &pairs {
            item_users[cursor[i as usize]] = u;
            cursor[i as usize] += 1;
        }

        Self {
            n_users,
            n_items,
            user_offsets,
            user_items,
            item_offsets,
            item_users,
            ids,
        }
    }

    /// Synthetic log over `n_users` x `n_items` with sequential external ids.
    pub fn from_index_pairs(
        n_users: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (u32, u32)>,
    ) -> Self {
        let ids = IdMaps {
            users: IdMap::sequential(n_users),
            items: IdMap::sequential(n_items),
        };
        Self::from_pairs(Arc::new(ids), pairs)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_interactions(&self) -> usize {
        self.user_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_items.is_empty()
    }

    /// Sorted items of user `u`.
    pub fn items_of(&self, u: u32) -> &[u32] {
        let u = u as usize;
        &self.user_items[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    /// Sorted users of item `i`.
    pub fn users_of(&self, i: u32) -> &[u32] {
        let i = i as usize;
        &self.item_users[self.item_offsets[i]..self.item_offsets[i + 1]]
    }

    pub fn contains(&self, u: u32, i: u32) -> bool {
        self.items_of(u).binary_search(&i).is_ok()
    }

    pub fn user_degree(&self, u: u32) -> usize {
        let u = u as usize;
        self.user_offsets[u + 1] - self.user_offsets[u]
    }

    pub fn item_degree(&self, i: u32) -> usize {
        let i = i as usize;
        self.item_offsets[i + 1] - self.item_offsets[i]
    }

    /// Start offset of each user's run in [`Self::pairs`] order, plus a final sentinel.
    pub(crate) fn user_offsets(&self) -> &[usize] {
        &self.user_offsets
    }

    pub(crate) fn flat_items(&self) -> &[u32] {
        &self.user_items
    }

    /// All `(user, item)` pairs, ordered by user then item.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.n_users as u32).flat_map(move |u| self.items_of(u).iter().map(move |&i| (u, i)))
    }

    pub fn ids(&self) -> &Arc<IdMaps> {
        &self.ids
    }

    /// Writes `user<TAB>item` rows using external ids.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (u, i) in self.pairs() {
            writeln!(
                out,
                "{}\t{}",
                self.ids.users.token(u),
                self.ids.items.token(i)
            )?;
        }
        Ok(())
    }

    /// A log over the same index space restricted to a subset of pairs.
    pub fn with_pairs(&self, pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self::from_pairs(Arc::clone(&self.ids), pairs)
    }
}

/// Counters reported by [`parse_interactions`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub rows: usize,
    pub malformed: usize,
    pub filtered: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone)]
pub struct Parsed {
    pub log: InteractionLog,
    pub report: ParseReport,
}

fn parse_row<'a>(line: &'a str, spec: &FormatSpec) -> Option<(Vec<&'a str>, Interaction)> {
    let fields: Vec<&str> = line.split(spec.delimiter.as_str()).map(str::trim).collect();
    if fields.len() <= spec.max_col() {
        return None;
    }
    let user = fields[spec.user_col];
    let item = fields[spec.item_col];
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let weight = match spec.rating_col {
        Some(c) => Some(fields[c].parse::<f64>().ok().filter(|w| w.is_finite())?),
        None => None,
    };
    let interaction = Interaction {
        user: user.to_owned(),
        item: item.to_owned(),
        weight,
    };
    Some((fields, interaction))
}

/// Parses a delimited interaction source into a deduplicated, densely indexed log.
pub fn parse_interactions<R: Read>(source: R, spec: &FormatSpec) -> Result<Parsed> {
    spec.validate()?;
    let reader = BufReader::new(source);
    let mut ids = IdMaps::default();
    let mut pairs = Vec::new();
    let mut report = ParseReport::default();
    let mut widest = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if spec.has_header && lineno == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        report.rows += 1;
        let Some((fields, row)) = parse_row(&line, spec) else {
            widest = widest.max(line.split(spec.delimiter.as_str()).count());
            report.malformed += 1;
            continue;
        };
        widest = widest.max(fields.len());
        if let (Some(threshold), Some(w)) = (spec.rating_threshold, row.weight) {
            if w < threshold {
                report.filtered += 1;
                continue;
            }
        }
        let u = ids.users.intern(&row.user);
        let i = ids.items.intern(&row.item);
        pairs.push((u, i));
    }

    if pairs.is_empty() {
        if report.malformed > 0 && widest <= spec.max_col() {
            return Err(DatasetError::ColumnOutOfRange {
                column: spec.max_col(),
                widest,
            });
        }
        return Err(DatasetError::NoValidRows {
            malformed: report.malformed,
            filtered: report.filtered,
        });
    }
    if report.malformed > 0 {
        log::warn!("skipped {} malformed interaction rows", report.malformed);
    }

    let raw = pairs.len();
    let log = InteractionLog::from_pairs(Arc::new(ids), pairs);
    report.duplicates = raw - log.n_interactions();
    Ok(Parsed { log, report })
}

pub fn parse_file(path: impl AsRef<Path>, spec: &FormatSpec) -> Result<Parsed> {
    parse_interactions(fs::File::open(path)?, spec)
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        let ok = parts.iter().all(|p| p.is_finite() && *p > 0.0)
            && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::InvalidRatios(
                self.train,
                self.validation,
                self.test,
            ))
        }
    }

    /// Bucket sizes for `n` interactions: floors first, then the leftover
    /// interactions go one each to the largest fractional remainders, ties
    /// resolved train, validation, test.
    pub fn bucket_counts(&self, n: usize) -> [usize; 3] {
        let ratios = [self.train, self.validation, self.test];
        let mut counts = [0usize; 3];
        let mut fracs = [0f64; 3];
        for b in 0..3 {
            let exact = ratios[b] * n as f64;
            // absorb representation error such as 0.7 * 30 = 20.999999999999996
            let floor = (exact + 1e-9).floor();
            counts[b] = floor as usize;
            fracs[b] = (exact - floor).max(0.0);
        }
        let assigned: usize = counts.iter().sum();
        // remainders are compared at 1e-9 resolution so 0.7 * 2 ties with 0.2 * 2
        let key = fracs.map(|f| (f * 1e9).round() as i64);
        let mut order = [0usize, 1, 2];
        // stable sort keeps train < val < test among equal remainders
        order.sort_by(|&a, &b| key[b].cmp(&key[a]));
        for &b in order.iter().take(n.saturating_sub(assigned)) {
            counts[b] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub train: InteractionLog,
    pub validation: InteractionLog,
    pub test: InteractionLog,
    pub seed: u64,
    pub ratios: SplitRatios,
}

/// Splits each item's interactions independently by `ratios`.
///
/// Items are visited in index order and their users shuffled with a single
/// ChaCha8 stream seeded from `seed`, so equal seeds give identical bundles.
pub fn stratified_split(log: &InteractionLog, ratios: SplitRatios, seed: u64) -> Result<SplitBundle> {
    ratios.validate()?;
    if log.is_empty() {
        return Err(DatasetError::EmptyLog);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<(u32, u32)>; 3] = Default::default();
    let mut users = Vec::new();
    for i in 0..log.n_items() as u32 {
        users.clear();
        users.extend_from_slice(log.users_of(i));
        users.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.bucket_counts(users.len());
        for (pos, &u) in users.iter().enumerate() {
            let bucket = if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            };
            parts[bucket].push((u, i));
        }
    }
    let [train, validation, test] = parts.map(|p| log.with_pairs(p));
    Ok(SplitBundle {
        train,
        validation,
        test,
        seed,
        ratios,
    })
}

/// Keeps roughly `fraction` of every item's interactions, drawn uniformly
/// per item with the same rounding rule as the splitter. Items always keep at
/// least one interaction.
pub fn subsample_per_item(log: &InteractionLog, fraction: f64, seed: u64) -> Result<InteractionLog> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFormat(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut users = Vec::new();
    for i in 0..log.n_items() as u32 {
        users.clear();
        users.extend_from_slice(log.users_of(i));
        users.shuffle(&mut rng);
        let n = ((fraction * users.len() as f64).round() as usize).clamp(1, users.len().max(1));
        kept.extend(users.iter().take(n).map(|&u| (u, i)));
    }
    Ok(log.with_pairs(kept))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub n_users: usize,
    pub n_items: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitBundle {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            ratios: self.ratios,
            n_users: self.train.n_users(),
            n_items: self.train.n_items(),
            train: self.train.n_interactions(),
            validation: self.validation.n_interactions(),
            test: self.test.n_interactions(),
        }
    }

    /// Writes `train.tsv`, `validation.tsv`, `test.tsv` and `split.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, log) in [
            ("train.tsv", &self.train),
            ("validation.tsv", &self.validation),
            ("test.tsv", &self.test),
        ] {
            let file = fs::File::create(dir.join(name))?;
            let mut w = std::io::BufWriter::new(file);
            log.write_tsv(&mut w)?;
            w.flush()?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("split.json"), manifest)?;
        Ok(())
    }
}

/// Observed item popularity and user degree of one log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopularityStats {
    pub q_star: Vec<u32>,
    pub user_degree: Vec<u32>,
    pub gamma: Option<f64>,
}

pub fn popularity(log: &InteractionLog) -> PopularityStats {
    PopularityStats {
        q_star: (0..log.n_items() as u32)
            .map(|i| log.item_degree(i) as u32)
            .collect(),
        user_degree: (0..log.n_users() as u32)
            .map(|u| log.user_degree(u) as u32)
            .collect(),
        gamma: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, spec: &FormatSpec) -> Result<Parsed> {
        parse_interactions(text.as_bytes(), spec)
    }

    fn assert_transposed(log: &InteractionLog) {
        for u in 0..log.n_users() as u32 {
            for &i in log.items_of(u) {
                assert!(log.users_of(i).binary_search(&u).is_ok());
            }
        }
        for i in 0..log.n_items() as u32 {
            for &u in log.users_of(i) {
                assert!(log.contains(u, i));
            }
        }
    }

    #[test]
    fn parses_three_rows() {
        let parsed = parse("u1,i1\nu1,i2\nu2,i1\n", &FormatSpec::new(Delimiter::Comma)).unwrap();
        let log = parsed.log;
        assert_eq!((log.n_users(), log.n_items(), log.n_interactions()), (2, 2, 3));
        assert_eq!(log.ids().users.get("u2"), Some(1));
        assert_eq!(log.ids().items.token(1), "i2");
        assert_transposed(&log);
    }

    #[test]
    fn duplicates_collapse() {
        let parsed = parse("u1,i1\nu1,i1\nu2,i1\n", &FormatSpec::new(Delimiter::Comma)).unwrap();
        assert_eq!(parsed.log.n_interactions(), 2);
        assert_eq!(parsed.report.duplicates, 1);
        assert_eq!(parsed.log.users_of(0), &[0, 1]);
    }

    #[test]
    fn movielens_threshold_matches_hand_filter() {
        let rows = [
            "1::1193::5::978300760",
            "1::661::3::978302109",
            "1::914::3::978301968",
            "1::3408::4::978300275",
            "2::1193::4::978298413",
            "2::1357::5::978298709",
            "2::3068::4::978299000",
            "3::1193::3::978297867",
            "3::661::2::978298147",
            "3::3408::5::978297039",
        ];
        let text = rows.join("\n");
        let kept_by_hand: Vec<(&str, &str)> = rows
            .iter()
            .filter_map(|r| {
                let f: Vec<&str> = r.split("::").collect();
                (f[2].parse::<f64>().unwrap() >= 4.0).then_some((f[0], f[1]))
            })
            .collect();
        assert_eq!(kept_by_hand.len(), 6);

        let parsed = parse(&text, &FormatSpec::movielens().with_threshold(4.0)).unwrap();
        assert_eq!(parsed.report.filtered, 4);
        let log = &parsed.log;
        assert_eq!(log.n_interactions(), kept_by_hand.len());
        for (u, i) in kept_by_hand {
            let u = log.ids().users.get(u).unwrap();
            let i = log.ids().items.get(i).unwrap();
            assert!(log.contains(u, i));
        }
        // rating 3 row is gone
        assert!(log.ids().items.get("661").is_none());

        let all = parse(&text, &FormatSpec::movielens()).unwrap();
        assert_eq!(all.log.n_interactions(), 10);
    }

    #[test]
    fn malformed_rows_counted() {
        let parsed = parse("u1,i1\nbroken\nu2,i2\n,i3\n", &FormatSpec::new(Delimiter::Comma)).unwrap();
        assert_eq!(parsed.report.malformed, 2);
        assert_eq!(parsed.log.n_interactions(), 2);
    }

    #[test]
    fn parse_errors() {
        let spec = FormatSpec::new(Delimiter::Comma);
        assert!(matches!(parse("", &spec), Err(DatasetError::NoValidRows { .. })));
        let wide = FormatSpec {
            item_col: 4,
            ..spec.clone()
        };
        assert!(matches!(
            parse("a,b\nc,d\n", &wide),
            Err(DatasetError::ColumnOutOfRange { column: 4, widest: 2 })
        ));
        let bad = FormatSpec {
            rating_threshold: Some(3.0),
            ..spec
        };
        assert!(matches!(parse("a,b", &bad), Err(DatasetError::InvalidFormat(_))));
    }

    #[test]
    fn header_and_tab() {
        let spec = FormatSpec {
            has_header: true,
            ..FormatSpec::new(Delimiter::Tab)
        };
        let parsed = parse("user\titem\n7\t8\n", &spec).unwrap();
        assert_eq!(parsed.log.n_interactions(), 1);
        assert_eq!(parsed.log.ids().users.token(0), "7");
    }

    #[test]
    fn bucket_rounding() {
        let r = SplitRatios::default();
        assert_eq!(r.bucket_counts(10), [7, 1, 2]);
        assert_eq!(r.bucket_counts(1), [1, 0, 0]);
        assert_eq!(r.bucket_counts(2), [2, 0, 0]);
        assert_eq!(r.bucket_counts(3), [2, 0, 1]);
        assert_eq!(r.bucket_counts(30), [21, 3, 6]);
        assert_eq!(r.bucket_counts(0), [0, 0, 0]);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let pairs: Vec<(u32, u32)> = (0..40u32)
            .flat_map(|u| (0..15u32).filter(move |i| (u * 7 + i * 3) % 4 != 0).map(move |i| (u, i)))
            .collect();
        let log = InteractionLog::from_index_pairs(40, 15, pairs);
        let a = stratified_split(&log, SplitRatios::default(), 9).unwrap();
        let b = stratified_split(&log, SplitRatios::default(), 9).unwrap();
        let c = stratified_split(&log, SplitRatios::default(), 10).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train, c.train);
        for i in 0..15 {
            assert_eq!(a.train.item_degree(i), c.train.item_degree(i));
            assert_eq!(a.test.item_degree(i), c.test.item_degree(i));
        }

        let mut union: Vec<(u32, u32)> = a
            .train
            .pairs()
            .chain(a.validation.pairs())
            .chain(a.test.pairs())
            .collect();
        let total = union.len();
        union.sort_unstable();
        union.dedup();
        assert_eq!(union.len(), total, "members overlap");
        assert_eq!(union, log.pairs().collect::<Vec<_>>());
        for member in [&a.train, &a.validation, &a.test] {
            assert!(Arc::ptr_eq(member.ids(), log.ids()));
            assert_transposed(member);
        }

        let full = popularity(&log);
        let parts = [popularity(&a.train), popularity(&a.validation), popularity(&a.test)];
        for i in 0..15 {
            let sum: u32 = parts.iter().map(|p| p.q_star[i]).sum();
            assert_eq!(sum, full.q_star[i]);
        }
    }

    #[test]
    fn split_errors() {
        let log = InteractionLog::from_index_pairs(1, 1, [(0, 0)]);
        assert!(matches!(
            SplitRatios::new(0.7, 0.1, 0.1),
            Err(DatasetError::InvalidRatios(..))
        ));
        let bad = SplitRatios {
            train: 0.7,
            validation: 0.1,
            test: 0.1,
        };
        assert!(stratified_split(&log, bad, 0).is_err());
        let empty = InteractionLog::from_index_pairs(1, 1, []);
        assert!(matches!(
            stratified_split(&empty, SplitRatios::default(), 0),
            Err(DatasetError::EmptyLog)
        ));
        let single = stratified_split(&log, SplitRatios::default(), 0).unwrap();
        assert_eq!(single.train.n_interactions(), 1);
    }

    #[test]
    fn popularity_counts() {
        let log = InteractionLog::from_index_pairs(2, 3, [(0, 0), (1, 0), (0, 1)]);
        let stats = popularity(&log);
        assert_eq!(stats.q_star, vec![2, 1, 0]);
        assert_eq!(stats.user_degree, vec![2, 1]);
        assert_eq!(stats.q_star.iter().sum::<u32>(), 3);
    }

    #[test]
    fn writes_split_files() {
        let log = InteractionLog::from_index_pairs(3, 2, [(0, 0), (1, 0), (2, 0), (0, 1)]);
        let bundle = stratified_split(&log, SplitRatios::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.write_to(dir.path()).unwrap();
        let manifest: SplitManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("split.json")).unwrap()).unwrap();
        assert_eq!(manifest.seed, 1);
        assert_eq!(manifest.train + manifest.validation + manifest.test, 4);
        let train = fs::read_to_string(dir.path().join("train.tsv")).unwrap();
        assert_eq!(train.lines().count(), manifest.train);
    }

    #[test]
    fn subsample_keeps_every_item() {
        let pairs: Vec<(u32, u32)> = (0..50u32).flat_map(|u| (0..4u32).map(move |i| (u, i))).collect();
        let log = InteractionLog::from_index_pairs(50, 5, pairs);
        let sub = subsample_per_item(&log, 0.1, 3).unwrap();
        for i in 0..4 {
            assert_eq!(sub.item_degree(i), 5);
        }
        assert_eq!(sub.item_degree(4), 0);
    }
}
