//! Entity store, mention→entity prior tables, and top-C candidate selection.
//!
//! # File formats
//!
//! A knowledge base on disk is a directory with two tab-separated files.
//! Real numbers are written with 17 significant digits and round-trip exactly.
//!
//! `entities.tsv`, one entity per line:
//!
//! ```text
//! entity_id <TAB> title <TAB> E <TAB> v_1 <TAB> ... <TAB> v_E [<TAB> description]
//! ```
//!
//! `priors.tsv`, one normalized mention per line, candidates in table order:
//!
//! ```text
//! mention <TAB> entity_id <TAB> prior [<TAB> entity_id <TAB> prior ...]
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{format_f64, parse_f64, Tensor};

pub const ENTITIES_FILE: &str = "entities.tsv";
pub const PRIORS_FILE: &str = "priors.tsv";

const PRIOR_SUM_TOL: f64 = 1e-9;

/// Lowercase, trim, and collapse internal whitespace to single spaces.
pub fn normalize_mention(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityRecord {
    pub entity_id: String,
    pub title: String,
    /// `1 × E`.
    pub embedding: Tensor,
    pub description: Option<String>,
}

impl EntityRecord {
    pub fn new(entity_id: impl Into<String>, title: impl Into<String>, embedding: Vec<f64>) -> Self {
        EntityRecord {
            entity_id: entity_id.into(),
            title: title.into(),
            embedding: Tensor::row(embedding),
            description: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.numel()
    }
}

/// Entities in insertion order, indexed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityStore {
    entities: Vec<EntityRecord>,
    index: HashMap<String, usize>,
}

impl EntityStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: EntityRecord) -> Result<()> {
        if self.index.contains_key(&record.entity_id) {
            return Err(Error::Integrity(format!("duplicate entity_id `{}`", record.entity_id)));
        }
        if !record.embedding.is_finite() {
            return Err(Error::Integrity(format!("entity `{}` has a non-finite embedding", record.entity_id)));
        }
        if let Some(dim) = self.dim() {
            if record.dim() != dim {
                return Err(Error::shape("EntityStore::insert", &[1, dim], record.embedding.shape()));
            }
        }
        self.index.insert(record.entity_id.clone(), self.entities.len());
        self.entities.push(record);
        Ok(())
    }

    pub fn get(&self, entity_id: &str) -> Option<&EntityRecord> {
        self.index.get(entity_id).map(|&i| &self.entities[i])
    }

    /// Embedding dimension E, or `None` for an empty store.
    pub fn dim(&self) -> Option<usize> {
        self.entities.first().map(EntityRecord::dim)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityRecord> {
        self.entities.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorEntry {
    pub entity_id: String,
    pub prior: f64,
}

/// `p(entity | mention)` lists, keyed by normalized mention.
///
/// Each list is sorted by descending prior with ties broken by ascending
/// entity id; priors lie in `(0, 1]` and sum to at most one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MentionPriorTable {
    entries: BTreeMap<String, Vec<PriorEntry>>,
}

fn sort_entries(list: &mut [PriorEntry]) {
    list.sort_by(|a, b| {
        b.prior.total_cmp(&a.prior).then_with(|| a.entity_id.cmp(&b.entity_id))
    });
}

fn check_entries(mention: &str, list: &[PriorEntry]) -> std::result::Result<(), String> {
    if list.is_empty() {
        return Err(format!("mention `{mention}` has no entities"));
    }
    let mut sum = 0.0;
    for e in list {
        if !(e.prior > 0.0 && e.prior <= 1.0) {
            return Err(format!("prior {} for `{}` outside (0, 1]", e.prior, e.entity_id));
        }
        sum += e.prior;
    }
    if sum > 1.0 + PRIOR_SUM_TOL {
        return Err(format!("priors for `{mention}` sum to {sum}"));
    }
    let sorted = list.windows(2).all(|w| {
        w[0].prior > w[1].prior || (w[0].prior == w[1].prior && w[0].entity_id < w[1].entity_id)
    });
    if !sorted {
        return Err(format!("entities of `{mention}` not in (prior desc, id asc) order"));
    }
    Ok(())
}

impl MentionPriorTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a list for `mention` (normalized here), sorting it into table order.
    pub fn insert(&mut self, mention: &str, mut list: Vec<PriorEntry>) -> Result<()> {
        let key = normalize_mention(mention);
        sort_entries(&mut list);
        check_entries(&key, &list).map_err(Error::Integrity)?;
        self.entries.insert(key, list);
        Ok(())
    }

    pub fn get(&self, mention: &str) -> Option<&[PriorEntry]> {
        self.entries.get(&normalize_mention(mention)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[PriorEntry])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// mention → entity_id → non-negative count, one per statistics source.
pub type CountTable = BTreeMap<String, BTreeMap<String, f64>>;

/// Averages per-source conditional distributions into one prior table.
///
/// For each source the counts of a mention are normalized to a distribution;
/// the prior is the arithmetic mean over the sources whose counts for that
/// mention are not all zero. Mentions with no such source are left out.
pub fn build_prior_table(sources: &[CountTable]) -> Result<MentionPriorTable> {
    if sources.is_empty() {
        return Err(Error::Usage("build_prior_table needs at least one source".into()));
    }
    // mention -> entity -> (sum of per-source probabilities); mention -> contributing sources
    let mut mass: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut contributors: BTreeMap<String, usize> = BTreeMap::new();

    for (s, source) in sources.iter().enumerate() {
        let mut merged: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (mention, counts) in source {
            for (entity, &count) in counts {
                if !(count >= 0.0) || !count.is_finite() {
                    return Err(Error::Usage(format!(
                        "source {s}: count {count} for ({mention}, {entity}) is not a non-negative number"
                    )));
                }
                *merged
                    .entry(normalize_mention(mention))
                    .or_default()
                    .entry(entity.clone())
                    .or_default() += count;
            }
        }
        for (mention, counts) in merged {
            let total: f64 = counts.values().sum();
            if total <= 0.0 {
                continue;
            }
            *contributors.entry(mention.clone()).or_default() += 1;
            let slot = mass.entry(mention).or_default();
            for (entity, count) in counts {
                if count > 0.0 {
                    *slot.entry(entity).or_default() += count / total;
                }
            }
        }
    }

    let mut table = MentionPriorTable::new();
    for (mention, probs) in mass {
        let k = contributors[&mention] as f64;
        let mut list: Vec<PriorEntry> = probs
            .into_iter()
            .map(|(entity_id, p)| PriorEntry {
                entity_id,
                prior: (p / k).min(1.0),
            })
            .collect();
        sort_entries(&mut list);
        table.entries.insert(mention, list);
    }
    Ok(table)
}

/// Token range `start..end` (end exclusive) inside an assembled sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        TokenSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub entity_id: String,
    pub prior: f64,
    /// `1 × E`.
    pub embedding: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub span: TokenSpan,
    pub mention: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn with_span(mut self, span: TokenSpan) -> Self {
        self.span = span;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// The `c` highest-prior entities for `mention`, embeddings attached.
///
/// An unknown mention gives an empty set. The returned span is empty; callers
/// that link against a sentence set it with [`CandidateSet::with_span`].
pub fn select_candidates(
    table: &MentionPriorTable,
    store: &EntityStore,
    mention: &str,
    c: usize,
) -> Result<CandidateSet> {
    if c == 0 {
        return Err(Error::Usage("candidate count C must be at least 1".into()));
    }
    let key = normalize_mention(mention);
    let mut candidates = Vec::new();
    if let Some(list) = table.entries.get(&key) {
        for entry in list.iter().take(c) {
            let record = store.get(&entry.entity_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "mention `{key}` links to `{}`, which is not in the entity store",
                    entry.entity_id
                ))
            })?;
            candidates.push(Candidate {
                entity_id: entry.entity_id.clone(),
                prior: entry.prior,
                embedding: record.embedding.clone(),
            });
        }
    }
    Ok(CandidateSet {
        span: TokenSpan::default(),
        mention: key,
        candidates,
    })
}

fn check_field(what: &str, s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Usage(format!("{what} `{s}` contains a tab or newline")));
    }
    Ok(())
}

/// Writes `entities.tsv` and `priors.tsv` into `dir`, creating it if needed.
pub fn save_kb(store: &EntityStore, table: &MentionPriorTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(ENTITIES_FILE))?);
    for e in store.iter() {
        check_field("entity id", &e.entity_id)?;
        check_field("title", &e.title)?;
        if e.entity_id.is_empty() {
            return Err(Error::Usage("empty entity id".into()));
        }
        let mut line = format!("{}\t{}\t{}", e.entity_id, e.title, e.dim());
        for v in e.embedding.data() {
            line.push('\t');
            line.push_str(&format_f64(*v));
        }
        if let Some(d) = &e.description {
            check_field("description", d)?;
            line.push('\t');
            line.push_str(d);
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;

    let mut out = BufWriter::new(fs::File::create(dir.join(PRIORS_FILE))?);
    for (mention, list) in table.iter() {
        let mut line = mention.to_string();
        for e in list {
            check_field("entity id", &e.entity_id)?;
            line.push('\t');
            line.push_str(&e.entity_id);
            line.push('\t');
            line.push_str(&format_f64(e.prior));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_kb(dir: &Path) -> Result<(EntityStore, MentionPriorTable)> {
    Ok((load_entities(&dir.join(ENTITIES_FILE))?, load_priors(&dir.join(PRIORS_FILE))?))
}

pub fn load_entities(path: &Path) -> Result<EntityStore> {
    let text = fs::read_to_string(path)?;
    let mut store = EntityStore::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::parse(path, lineno, "expected entity_id, title, E, values"));
        }
        let dim: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad dimension `{}`", fields[2])))?;
        let n = fields.len() - 3;
        if n != dim && n != dim + 1 {
            return Err(Error::parse(path, lineno, format!("expected {dim} values, found {n} fields")));
        }
        let mut values = Vec::with_capacity(dim);
        for f in &fields[3..3 + dim] {
            let v = parse_f64(f).ok_or_else(|| Error::parse(path, lineno, format!("bad number `{f}`")))?;
            values.push(v);
        }
        let mut record = EntityRecord::new(fields[0], fields[1], values);
        record.description = (n == dim + 1).then(|| fields[3 + dim].to_string());
        if record.entity_id.is_empty() {
            return Err(Error::parse(path, lineno, "empty entity id"));
        }
        store.insert(record).map_err(|e| match e {
            Error::Integrity(msg) => Error::Integrity(format!("{}:{lineno}: {msg}", path.display())),
            other => Error::parse(path, lineno, other.to_string()),
        })?;
    }
    Ok(store)
}

pub fn load_priors(path: &Path) -> Result<MentionPriorTable> {
    let text = fs::read_to_string(path)?;
    let mut table = MentionPriorTable::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len().is_multiple_of(2) {
            return Err(Error::parse(path, lineno, "expected mention followed by (entity_id, prior) pairs"));
        }
        let mention = fields[0];
        if normalize_mention(mention) != mention || mention.is_empty() {
            return Err(Error::parse(path, lineno, format!("mention `{mention}` is not normalized")));
        }
        let mut list = Vec::with_capacity(fields.len() / 2);
        for pair in fields[1..].chunks(2) {
            let prior = parse_f64(pair[1]).ok_or_else(|| Error::parse(path, lineno, format!("bad prior `{}`", pair[1])))?;
            list.push(PriorEntry {
                entity_id: pair[0].to_string(),
                prior,
            });
        }
        check_entries(mention, &list).map_err(|msg| Error::parse(path, lineno, msg))?;
        if table.entries.insert(mention.to_string(), list).is_some() {
            return Err(Error::parse(path, lineno, format!("duplicate mention `{mention}`")));
        }
    }
    Ok(table)
}
