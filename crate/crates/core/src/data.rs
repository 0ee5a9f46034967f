//! Event streams: the tab-separated event file, side-information files,
//! dense re-indexing and the chronological per-user split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One interaction as written in the event file (raw ids).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
    pub category: u64,
}

/// Events in global chronological order, ties by user then item.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
}

fn field<T: std::str::FromStr>(raw: Option<&str>, name: &str, line: usize) -> Result<T> {
    let raw = raw.ok_or_else(|| Error::Data {
        line,
        msg: format!("missing {name}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Data {
        line,
        msg: format!("invalid {name} `{raw}`"),
    })
}

/// Parses `user<TAB>item<TAB>timestamp<TAB>category` lines. Blank lines are
/// skipped. Each user's events must appear with strictly increasing
/// timestamps, and an item must keep one category.
pub fn parse_events(text: &str) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    let mut last_ts: HashMap<u64, i64> = HashMap::new();
    let mut item_cat: HashMap<u64, u64> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let user = field(parts.next(), "user id", line)?;
        let item = field(parts.next(), "item id", line)?;
        let timestamp = field(parts.next(), "timestamp", line)?;
        let category = field(parts.next(), "category id", line)?;
        if parts.next().is_some() {
            return Err(Error::Data {
                line,
                msg: "expected 4 tab-separated fields".into(),
            });
        }
        if let Some(&prev) = last_ts.get(&user) {
            if timestamp <= prev {
                return Err(Error::Data {
                    line,
                    msg: format!("timestamp {timestamp} for user {user} does not follow {prev}"),
                });
            }
        }
        last_ts.insert(user, timestamp);
        if let Some(&c) = item_cat.get(&item) {
            if c != category {
                return Err(Error::Data {
                    line,
                    msg: format!("item {item} has category {category}, earlier {c}"),
                });
            }
        }
        item_cat.insert(item, category);
        out.push(Event {
            user,
            item,
            timestamp,
            category,
        });
    }
    Ok(out)
}

fn sort_events(events: &mut [Event]) {
    events.sort_by_key(|e| (e.timestamp, e.user, e.item));
}

/// Drops users and items with fewer than `min_count` events, repeating until
/// every survivor meets the threshold, so the filter is idempotent.
pub fn filter_min_count(mut events: Vec<Event>, min_count: usize) -> Vec<Event> {
    loop {
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for e in &events {
            *users.entry(e.user).or_default() += 1;
            *items.entry(e.item).or_default() += 1;
        }
        let before = events.len();
        events.retain(|e| users[&e.user] >= min_count && items[&e.item] >= min_count);
        if events.len() == before {
            return events;
        }
    }
}

/// Parses, filters and sorts an event file's contents.
pub fn ingest_str(text: &str, min_count: usize) -> Result<EventStream> {
    let events = parse_events(text)?;
    if events.is_empty() {
        log::warn!("event file contains no events");
    }
    let mut events = filter_min_count(events, min_count);
    sort_events(&mut events);
    Ok(EventStream { events })
}

pub fn ingest(path: &Path, min_count: usize) -> Result<EventStream> {
    ingest_str(&std::fs::read_to_string(path)?, min_count)
}

pub fn write_events(stream: &EventStream) -> String {
    let mut out = String::new();
    for e in &stream.events {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.user, e.item, e.timestamp, e.category));
    }
    out
}

/// Parses `item<TAB>category<TAB>f1,f2,...` lines. Every row must carry the
/// same number of finite features.
pub fn parse_item_side(text: &str) -> Result<BTreeMap<u64, (u64, Vec<f64>)>> {
    let mut out = BTreeMap::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let item: u64 = field(parts.next(), "item id", line)?;
        let cat: u64 = field(parts.next(), "category id", line)?;
        let feats: Vec<f64> = match parts.next() {
            None => Vec::new(),
            Some(f) if f.trim().is_empty() => Vec::new(),
            Some(f) => f
                .split(',')
                .map(|x| field::<f64>(Some(x), "feature", line))
                .collect::<Result<_>>()?,
        };
        if parts.next().is_some() {
            return Err(Error::Data { line, msg: "too many fields".into() });
        }
        if feats.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data { line, msg: "non-finite feature".into() });
        }
        if *width.get_or_insert(feats.len()) != feats.len() {
            return Err(Error::Data { line, msg: "feature count differs from earlier rows".into() });
        }
        if out.insert(item, (cat, feats)).is_some() {
            return Err(Error::Data { line, msg: format!("duplicate item {item}") });
        }
    }
    Ok(out)
}

/// Largest accepted categorical feature value (exclusive); bounds embedding tables.
pub const MAX_FEATURE_VALUE: usize = 1 << 20;

/// Parses `user<TAB>v1,v2,...` categorical feature lines.
pub fn parse_user_side(text: &str) -> Result<BTreeMap<u64, Vec<usize>>> {
    let mut out = BTreeMap::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let user: u64 = field(parts.next(), "user id", line)?;
        let feats: Vec<usize> = match parts.next() {
            None => Vec::new(),
            Some(f) if f.trim().is_empty() => Vec::new(),
            Some(f) => f
                .split(',')
                .map(|x| field::<usize>(Some(x), "feature value", line))
                .collect::<Result<_>>()?,
        };
        if parts.next().is_some() {
            return Err(Error::Data { line, msg: "too many fields".into() });
        }
        if *width.get_or_insert(feats.len()) != feats.len() {
            return Err(Error::Data { line, msg: "feature count differs from earlier rows".into() });
        }
        if let Some(&x) = feats.iter().find(|&&x| x >= MAX_FEATURE_VALUE) {
            return Err(Error::Data { line, msg: format!("feature value {x} exceeds {MAX_FEATURE_VALUE}") });
        }
        if out.insert(user, feats).is_some() {
            return Err(Error::Data { line, msg: format!("duplicate user {user}") });
        }
    }
    Ok(out)
}

/// Parses a request file: one user id per line. Blank lines and `#`
/// comments are skipped; order and repeats are kept.
pub fn parse_requests(text: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        out.push(field(Some(body), "user id", i + 1)?);
    }
    Ok(out)
}

/// Event with dense user, item and category indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseEvent {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub category: usize,
}

/// Densely indexed dataset with side information.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub events: Vec<DenseEvent>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub item_category: Vec<usize>,
    pub category_ids: Vec<u64>,
    pub item_features: Option<Tensor>,
    pub user_features: Vec<Vec<usize>>,
    pub feature_vocab: Vec<usize>,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_ids.len()
    }

    /// Re-indexes a stream. Items without side features get none at all when
    /// `items` is empty; users without features get a single constant feature.
    pub fn from_stream(
        stream: &EventStream,
        items: &BTreeMap<u64, (u64, Vec<f64>)>,
        users: &BTreeMap<u64, Vec<usize>>,
    ) -> Result<Self> {
        let user_ids: Vec<u64> = stream.events.iter().map(|e| e.user).collect::<BTreeSet<_>>().into_iter().collect();
        let item_ids: Vec<u64> = stream.events.iter().map(|e| e.item).collect::<BTreeSet<_>>().into_iter().collect();
        let cat_ids: Vec<u64> = stream.events.iter().map(|e| e.category).collect::<BTreeSet<_>>().into_iter().collect();
        let uidx: HashMap<u64, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let iidx: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let cidx: HashMap<u64, usize> = cat_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let mut item_category = vec![0; item_ids.len()];
        let events: Vec<DenseEvent> = stream
            .events
            .iter()
            .map(|e| {
                let item = iidx[&e.item];
                item_category[item] = cidx[&e.category];
                DenseEvent {
                    user: uidx[&e.user],
                    item,
                    timestamp: e.timestamp,
                    category: cidx[&e.category],
                }
            })
            .collect();
        let item_features = if items.is_empty() || item_ids.is_empty() {
            None
        } else {
            let width = items.values().next().map_or(0, |(_, f)| f.len());
            if width == 0 {
                None
            } else {
                let mut data = Vec::with_capacity(item_ids.len() * width);
                for id in &item_ids {
                    let (_, f) = items.get(id).ok_or_else(|| {
                        Error::Input(format!("item {id} has no row in the item side file"))
                    })?;
                    data.extend_from_slice(f);
                }
                Some(Tensor::new(vec![item_ids.len(), width], data)?)
            }
        };
        let (user_features, feature_vocab) = if users.is_empty() {
            (vec![vec![0]; user_ids.len()], vec![1])
        } else {
            let width = users.values().next().map_or(0, |f| f.len());
            let mut vocab = vec![0; width];
            let mut feats = Vec::with_capacity(user_ids.len());
            for id in &user_ids {
                let f = users.get(id).ok_or_else(|| {
                    Error::Input(format!("user {id} has no row in the user side file"))
                })?;
                for (v, &x) in vocab.iter_mut().zip(f) {
                    *v = (*v).max(x + 1);
                }
                feats.push(f.clone());
            }
            (feats, vocab)
        };
        Ok(Self {
            events,
            user_ids,
            item_ids,
            item_category,
            category_ids: cat_ids,
            item_features,
            user_features,
            feature_vocab,
        })
    }

    /// Loads `events.tsv` plus optional `items.tsv` and `users.tsv` from `dir`.
    pub fn load_dir(dir: &Path, min_count: usize) -> Result<Self> {
        let stream = ingest(&dir.join("events.tsv"), min_count)?;
        let items = match std::fs::read_to_string(dir.join("items.tsv")) {
            Ok(t) => parse_item_side(&t)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let users = match std::fs::read_to_string(dir.join("users.tsv")) {
            Ok(t) => parse_user_side(&t)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Self::from_stream(&stream, &items, &users)
    }

    pub fn to_stream(&self) -> EventStream {
        EventStream {
            events: self
                .events
                .iter()
                .map(|e| Event {
                    user: self.user_ids[e.user],
                    item: self.item_ids[e.item],
                    timestamp: e.timestamp,
                    category: self.category_ids[e.category],
                })
                .collect(),
        }
    }

    /// Writes `events.tsv`, `items.tsv` and `users.tsv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("events.tsv"), write_events(&self.to_stream()).as_bytes())?;
        let mut items = String::new();
        for (i, id) in self.item_ids.iter().enumerate() {
            let feats = self.item_features.as_ref().map_or(String::new(), |f| {
                f.row(i).iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
            });
            let cat = self.category_ids[self.item_category[i]];
            items.push_str(&format!("{id}\t{cat}\t{feats}\n"));
        }
        write_atomic(&dir.join("items.tsv"), items.as_bytes())?;
        let mut users = String::new();
        for (u, id) in self.user_ids.iter().enumerate() {
            let f: Vec<String> = self.user_features[u].iter().map(|x| x.to_string()).collect();
            users.push_str(&format!("{id}\t{}\n", f.join(",")));
        }
        write_atomic(&dir.join("users.tsv"), users.as_bytes())?;
        Ok(())
    }

    /// Every user's items in chronological order.
    pub fn sequences(&self) -> Vec<Vec<DenseEvent>> {
        let mut seqs = vec![Vec::new(); self.n_users()];
        for e in &self.events {
            seqs[e.user].push(*e);
        }
        seqs
    }
}

/// Sizes of the validation and test windows for a sequence of length `n`;
/// sequences shorter than 3 keep everything as history.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let tail = ((n as f64 * 0.1).round() as usize).max(1);
    (n - 2 * tail, tail, tail)
}

/// Chronological per-user split: history, validation, test.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub history: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    /// History events of all users in global chronological order.
    pub train_events: Vec<DenseEvent>,
}

impl Split {
    pub fn new(data: &Dataset) -> Self {
        let seqs = data.sequences();
        let mut history = Vec::with_capacity(seqs.len());
        let mut validation = Vec::with_capacity(seqs.len());
        let mut test = Vec::with_capacity(seqs.len());
        let mut cut: Vec<i64> = Vec::with_capacity(seqs.len());
        for s in &seqs {
            let (h, v, _) = split_sizes(s.len());
            history.push(s[..h].iter().map(|e| e.item).collect());
            validation.push(s[h..h + v].iter().map(|e| e.item).collect());
            test.push(s[h + v..].iter().map(|e| e.item).collect());
            cut.push(if h == 0 { i64::MIN } else { s[h - 1].timestamp });
        }
        let train_events = data
            .events
            .iter()
            .filter(|e| e.timestamp <= cut[e.user])
            .copied()
            .collect();
        Self {
            history,
            validation,
            test,
            train_events,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_small_files() {
        assert!(ingest_str("", 5).unwrap().events.is_empty());
        let s = ingest_str("2\t1\t30\t0\n1\t1\t10\t0\n1\t2\t20\t1\n", 1).unwrap();
        let ts: Vec<i64> = s.events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![10, 20, 30]);
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let r = parse_events("1\t2\t3\t4\n1\tx\t5\t4\n");
        assert!(matches!(r, Err(Error::Data { line: 2, .. })));
        let r = parse_events("1\t2\t3\n");
        assert!(matches!(r, Err(Error::Data { line: 1, .. })));
        let r = parse_events("1\t2\t3\t4\t5\n");
        assert!(matches!(r, Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn timestamp_regression_rejected() {
        let r = parse_events("1\t2\t30\t0\n1\t3\t20\t0\n");
        assert!(matches!(r, Err(Error::Data { line: 2, .. })));
        let r = parse_events("1\t2\t30\t0\n1\t3\t30\t0\n");
        assert!(matches!(r, Err(Error::Data { line: 2, .. })));
    }

    #[test]
    fn min_count_drops_sparse_users() {
        let mut text = String::new();
        for t in 0..5 {
            text.push_str(&format!("1\t7\t{t}\t0\n"));
        }
        for t in 0..4 {
            text.push_str(&format!("2\t7\t{}\t0\n", 100 + t));
        }
        let s = ingest_str(&text, 5).unwrap();
        assert_eq!(s.events.len(), 5);
        assert!(s.events.iter().all(|e| e.user == 1));
    }

    #[test]
    fn filter_reaches_a_fixed_point() {
        // Dropping user 2 leaves item 8 with 4 events, which then drops user 1's
        // fifth event and finally user 1.
        let mut text = String::new();
        for t in 0..4 {
            text.push_str(&format!("1\t7\t{t}\t0\n"));
        }
        text.push_str("1\t8\t10\t0\n");
        for t in 0..4 {
            text.push_str(&format!("2\t8\t{}\t0\n", 100 + t));
        }
        let s = ingest_str(&text, 5).unwrap();
        assert!(s.events.is_empty());
        let again = ingest_str(&write_events(&s), 5).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn split_sizes_are_chronological_tenths() {
        assert_eq!(split_sizes(30), (24, 3, 3));
        assert_eq!(split_sizes(3), (1, 1, 1));
        assert_eq!(split_sizes(2), (2, 0, 0));
        assert_eq!(split_sizes(25), (19, 3, 3));
    }

    #[test]
    fn requests_skip_comments_and_keep_order() {
        assert_eq!(parse_requests("7\n\n# all\n3  # again\n7\n").unwrap(), vec![7, 3, 7]);
        assert!(matches!(parse_requests("1\nx\n"), Err(Error::Data { line: 2, .. })));
    }
}
