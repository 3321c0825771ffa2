//! Interaction-log ingestion and the timestamp-partitioned split.
//!
//! Raw `(user, item, timestamp)` records are mapped onto dense index spaces,
//! duplicate pairs are collapsed onto their most recent occurrence, and the
//! log is cut at a global timestamp so that training strictly precedes the
//! held-out validation and test periods.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tgraph::PositiveSampleSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Tsv,
    Csv,
}

impl LogFormat {
    fn delimiter(self) -> u8 {
        match self {
            LogFormat::Tsv => b'\t',
            LogFormat::Csv => b',',
        }
    }
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(LogFormat::Tsv),
            "csv" => Ok(LogFormat::Csv),
            other => Err(Error::invalid(format!("unknown log format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

/// Parses a delimited log whose first three columns are user, item and an
/// integer timestamp in seconds. Extra columns are ignored.
pub fn parse_log<R: Read>(source: R, format: LogFormat) -> Result<Vec<RawEvent>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .quoting(format == LogFormat::Csv)
        .delimiter(format.delimiter())
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected at least 3 fields, found {}", record.len()),
            });
        }
        let (user_key, item_key, ts) = (&record[0], &record[1], &record[2]);
        if user_key.is_empty() || item_key.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty user or item key".into(),
            });
        }
        let timestamp: i64 = ts.parse().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp {ts:?} is not an integer"),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                line,
                message: format!("negative timestamp {timestamp}"),
            });
        }
        events.push(RawEvent {
            user_key: user_key.to_owned(),
            item_key: item_key.to_owned(),
            timestamp,
        });
    }
    Ok(events)
}

/// Dense index space over opaque keys, assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vocabulary whose keys are the decimal renderings of `0..len`.
    pub fn numbered(len: usize) -> Self {
        let mut vocab = Self::new();
        for i in 0..len {
            vocab.intern(&i.to_string());
        }
        vocab
    }

    pub fn intern(&mut self, key: &str) -> u32 {
        if let Some(&idx) = self.index.get(key) {
            return idx;
        }
        let idx = self.keys.len() as u32;
        self.keys.push(key.to_owned());
        self.index.insert(key.to_owned(), idx);
        idx
    }

    pub fn get(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn key(&self, idx: u32) -> Option<&str> {
        self.keys.get(idx as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: u32, item: u32, timestamp: i64) -> Self {
        Self {
            user,
            item,
            timestamp,
        }
    }

    fn chrono_key(&self) -> (i64, u32, u32) {
        (self.timestamp, self.user, self.item)
    }
}

/// Deduplicated, chronologically sorted interactions over shared vocabularies.
///
/// Sorted by timestamp, ties broken by `(user, item)`. Each `(user, item)`
/// pair appears at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    users: Arc<Vocabulary>,
    items: Arc<Vocabulary>,
}

impl InteractionLog {
    /// Builds a log from already-indexed interactions. Duplicate pairs keep
    /// their latest timestamp.
    pub fn from_interactions(
        interactions: Vec<Interaction>,
        users: Arc<Vocabulary>,
        items: Arc<Vocabulary>,
    ) -> Result<Self> {
        for it in &interactions {
            if it.user as usize >= users.len() {
                return Err(Error::IndexOutOfRange {
                    kind: "user",
                    index: it.user as usize,
                    size: users.len(),
                });
            }
            if it.item as usize >= items.len() {
                return Err(Error::IndexOutOfRange {
                    kind: "item",
                    index: it.item as usize,
                    size: items.len(),
                });
            }
            if it.timestamp < 0 {
                return Err(Error::invalid("negative timestamp"));
            }
        }
        let mut latest: HashMap<(u32, u32), i64> = HashMap::with_capacity(interactions.len());
        for it in interactions {
            latest
                .entry((it.user, it.item))
                .and_modify(|t| *t = (*t).max(it.timestamp))
                .or_insert(it.timestamp);
        }
        let mut interactions: Vec<Interaction> = latest
            .into_iter()
            .map(|((user, item), timestamp)| Interaction::new(user, item, timestamp))
            .collect();
        interactions.sort_unstable_by_key(Interaction::chrono_key);
        Ok(Self {
            interactions,
            users,
            items,
        })
    }

    /// Subset of an existing log; the caller guarantees the sort and
    /// uniqueness invariants still hold.
    fn sibling(&self, interactions: Vec<Interaction>) -> Self {
        Self {
            interactions,
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
        }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_vocab(&self) -> &Vocabulary {
        &self.users
    }

    pub fn item_vocab(&self) -> &Vocabulary {
        &self.items
    }

    /// Sorted item indices per user.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users()];
        for it in &self.interactions {
            out[it.user as usize].push(it.item);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.interactions.iter().map(|it| (it.user, it.item))
    }
}

/// Assigns dense indices in first-seen order, collapses duplicate pairs onto
/// their latest timestamp and sorts chronologically.
pub fn build_log(events: &[RawEvent]) -> Result<InteractionLog> {
    if events.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    let mut users = Vocabulary::new();
    let mut items = Vocabulary::new();
    let interactions = events
        .iter()
        .map(|e| {
            Interaction::new(
                users.intern(&e.user_key),
                items.intern(&e.item_key),
                e.timestamp,
            )
        })
        .collect();
    InteractionLog::from_interactions(interactions, Arc::new(users), Arc::new(items))
}

/// What to do with held-out interactions whose item never occurs in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColdItemPolicy {
    #[default]
    Keep,
    Drop,
}

impl std::str::FromStr for ColdItemPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep" => Ok(ColdItemPolicy::Keep),
            "drop" => Ok(ColdItemPolicy::Drop),
            other => Err(Error::invalid(format!("unknown cold-item policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub train_fraction: f64,
    pub val_fraction_of_holdout: f64,
    pub cold_items: ColdItemPolicy,
    /// Fixed cutting timestamp; overrides `train_fraction` when set.
    pub cut_timestamp: Option<i64>,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction_of_holdout: 0.5,
            cold_items: ColdItemPolicy::Keep,
            cut_timestamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionLog,
    pub validation: InteractionLog,
    pub test: InteractionLog,
    pub cutting_timestamp: i64,
    /// Holdout interactions dropped because their user never trains.
    pub removed_cold_user: usize,
    /// Holdout interactions dropped under [`ColdItemPolicy::Drop`].
    pub removed_cold_item: usize,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Writes one JSON record per interaction, train first.
    pub fn write_manifest<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            split: &'static str,
            user_index: u32,
            item_index: u32,
            timestamp: i64,
        }
        for (name, log) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            for it in log.interactions() {
                let row = Row {
                    split: name,
                    user_index: it.user,
                    item_index: it.item,
                    timestamp: it.timestamp,
                };
                serde_json::to_writer(&mut out, &row)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

// Absorbs float noise in fraction * count products such as 0.8 * 10.
const FRACTION_SLACK: f64 = 1e-9;

/// Global-timestamp split.
///
/// The cut is the smallest logged timestamp `t` with at least
/// `train_fraction * |log|` interactions strictly before it. Interactions
/// before the cut train; the rest form the holdout, whose chronologically
/// first `val_fraction_of_holdout` share becomes validation and the remainder
/// test. Holdout interactions of users absent from training are removed.
/// With `cut_timestamp` set, everything strictly before it trains.
pub fn timestamp_split(log: &InteractionLog, opts: &SplitOptions) -> Result<SplitDataset> {
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must lie in (0, 1)"));
    }
    if !(0.0..=1.0).contains(&opts.val_fraction_of_holdout) {
        return Err(Error::invalid("val_fraction_of_holdout must lie in [0, 1]"));
    }
    let all = log.interactions();
    let target = opts.train_fraction * all.len() as f64;

    // `all` is sorted, so the first index of each distinct timestamp equals
    // the number of interactions strictly before it.
    let cut_index = match opts.cut_timestamp {
        Some(t) => Some(all.partition_point(|it| it.timestamp < t)).filter(|&i| i < all.len()),
        None => (0..all.len())
            .filter(|&i| i == 0 || all[i].timestamp != all[i - 1].timestamp)
            .find(|&i| i as f64 + FRACTION_SLACK >= target),
    }
    .ok_or(Error::EmptySplit("holdout"))?;
    if cut_index == 0 {
        return Err(Error::EmptySplit("train"));
    }
    let cutting_timestamp = all[cut_index].timestamp;
    let (train, holdout) = all.split_at(cut_index);

    let val_len = ((opts.val_fraction_of_holdout * holdout.len() as f64) + FRACTION_SLACK)
        .floor()
        .min(holdout.len() as f64) as usize;
    let (val_part, test_part) = holdout.split_at(val_len);

    let train_users: HashSet<u32> = train.iter().map(|it| it.user).collect();
    let train_items: HashSet<u32> = train.iter().map(|it| it.item).collect();
    let mut removed_cold_user = 0;
    let mut removed_cold_item = 0;
    let mut keep = |part: &[Interaction]| -> Vec<Interaction> {
        part.iter()
            .filter(|it| {
                if !train_users.contains(&it.user) {
                    removed_cold_user += 1;
                    false
                } else if opts.cold_items == ColdItemPolicy::Drop
                    && !train_items.contains(&it.item)
                {
                    removed_cold_item += 1;
                    false
                } else {
                    true
                }
            })
            .copied()
            .collect()
    };
    let validation = keep(val_part);
    let test = keep(test_part);

    Ok(SplitDataset {
        train: log.sibling(train.to_vec()),
        validation: log.sibling(validation),
        test: log.sibling(test),
        cutting_timestamp,
        removed_cold_user,
        removed_cold_item,
    })
}

/// Removes every copy of any pair that also occurs in validation or test.
pub fn leakage_filter(pss: &PositiveSampleSet, split: &SplitDataset) -> PositiveSampleSet {
    let held_out: HashSet<(u32, u32)> = split
        .validation
        .pairs()
        .chain(split.test.pairs())
        .collect();
    if held_out.is_empty() {
        return pss.clone();
    }
    pss.retain(|u, p| !held_out.contains(&(u, p)))
}
