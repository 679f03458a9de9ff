//! Implicit-feedback data model: the click/purchase event log, dense id
//! remapping, and the per-user split of the catalog into purchased,
//! clicked-only and non-clicked items.
//!
//! Event files are tab-separated text, one event per line:
//!
//! ```text
//! user_id<TAB>item_id<TAB>timestamp_ms<TAB>click|purchase
//! ```
//!
//! Blank lines and lines starting with `#` are skipped.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Click,
    Purchase,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Click => "click",
            EventKind::Purchase => "purchase",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "click" => Ok(EventKind::Click),
            "purchase" => Ok(EventKind::Purchase),
            other => Err(format!("unknown event kind `{other}` (expected click|purchase)")),
        }
    }
}

/// An event keyed by external identifiers, as read from a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
    pub kind: EventKind,
}

impl RawEvent {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64, kind: EventKind) -> Self {
        RawEvent {
            user: user.into(),
            item: item.into(),
            timestamp,
            kind,
        }
    }
}

/// An event over dense user and item indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub timestamp: u64,
    pub kind: EventKind,
}

/// Bijection between external string ids and dense indices `0..len`.
#[derive(Clone, Debug, Default)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for IdMap {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
    }
}

impl Eq for IdMap {}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map whose dense index is the position in `ids`.
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (pos, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), pos as u32).is_some() {
                return Err(Error::Config(format!("duplicate id `{id}` in id list")));
            }
        }
        Ok(IdMap { ids, index })
    }

    /// Returns the index of `id`, assigning the next free one on first sight.
    pub fn intern(&mut self, id: &str) -> u32 {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len() as u32;
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), idx);
        idx
    }

    pub fn get(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: u32) -> &str {
        &self.ids[idx as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Deduplicated event stream over dense indices. Holds the binary purchase
/// and click matrices in event form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionLog {
    events: Vec<Event>,
    users: IdMap,
    items: IdMap,
}

impl InteractionLog {
    /// Assembles a log from already-remapped parts. Indices are checked
    /// against the maps.
    pub fn from_parts(events: Vec<Event>, users: IdMap, items: IdMap) -> Result<Self> {
        for e in &events {
            if e.user as usize >= users.len() {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: e.user as usize,
                    len: users.len(),
                });
            }
            if e.item as usize >= items.len() {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: e.item as usize,
                    len: items.len(),
                });
            }
        }
        Ok(InteractionLog { events, users, items })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    /// Number of users.
    pub fn n(&self) -> usize {
        self.users.len()
    }

    /// Number of items.
    pub fn m(&self) -> usize {
        self.items.len()
    }

    pub fn to_raw(&self) -> Vec<RawEvent> {
        self.events
            .iter()
            .map(|e| RawEvent {
                user: self.users.id(e.user).to_owned(),
                item: self.items.id(e.item).to_owned(),
                timestamp: e.timestamp,
                kind: e.kind,
            })
            .collect()
    }

    /// Sorted, distinct item indices per user for one event kind.
    pub fn items_by_user(&self, kind: EventKind) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n()];
        for e in self.events.iter().filter(|e| e.kind == kind) {
            out[e.user as usize].push(e.item);
        }
        for items in &mut out {
            items.sort_unstable();
            items.dedup();
        }
        out
    }

    /// Writes the log in the tab-separated event format.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.events {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                self.users.id(e.user),
                self.items.id(e.item),
                e.timestamp,
                e.kind
            )?;
        }
        Ok(())
    }
}

/// Parses tab-separated events. Line numbers in errors are 1-based.
pub fn parse_events<R: BufRead>(reader: R) -> Result<Vec<RawEvent>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_line(line).map_err(|message| Error::Parse { line: line_no, message })?);
    }
    Ok(out)
}

fn parse_line(line: &str) -> Result<RawEvent, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item id".to_owned());
    }
    let timestamp = fields[2]
        .parse::<u64>()
        .map_err(|e| format!("bad timestamp `{}`: {e}", fields[2]))?;
    let kind = fields[3].parse::<EventKind>()?;
    Ok(RawEvent::new(fields[0], fields[1], timestamp, kind))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<RawEvent>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(file))
}

/// Remaps external ids to dense indices in first-appearance order and
/// collapses duplicate (user, item, kind) triples. A collapsed event keeps
/// its first position in the stream and the earliest timestamp seen.
pub fn build_log<I>(raw_events: I) -> Result<InteractionLog>
where
    I: IntoIterator<Item = RawEvent>,
{
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut events: Vec<Event> = Vec::new();
    let mut seen: HashMap<(u32, u32, EventKind), usize> = HashMap::new();

    for raw in raw_events {
        let user = users.intern(&raw.user);
        let item = items.intern(&raw.item);
        match seen.get(&(user, item, raw.kind)) {
            Some(&pos) => {
                let kept = &mut events[pos];
                kept.timestamp = kept.timestamp.min(raw.timestamp);
            }
            None => {
                seen.insert((user, item, raw.kind), events.len());
                events.push(Event {
                    user,
                    item,
                    timestamp: raw.timestamp,
                    kind: raw.kind,
                });
            }
        }
    }

    if events.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(InteractionLog { events, users, items })
}

/// Makes every purchased item also a clicked item: a purchase with no
/// matching click gets a synthetic click at the purchase timestamp, placed
/// right after the purchase in the stream.
pub fn enforce_click_closure(log: InteractionLog) -> InteractionLog {
    let clicked: std::collections::HashSet<(u32, u32)> = log
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Click)
        .map(|e| (e.user, e.item))
        .collect();

    let mut events = Vec::with_capacity(log.events.len());
    for e in &log.events {
        events.push(*e);
        if e.kind == EventKind::Purchase && !clicked.contains(&(e.user, e.item)) {
            events.push(Event {
                kind: EventKind::Click,
                ..*e
            });
        }
    }
    InteractionLog { events, ..log }
}

/// Drops users with fewer than `min_purchases` distinct purchases or fewer
/// than `min_clicks` distinct clicks, then re-densifies users and items in
/// first-appearance order over the surviving events.
pub fn filter_users(log: &InteractionLog, min_purchases: usize, min_clicks: usize) -> Result<InteractionLog> {
    let mut purchases = vec![0usize; log.n()];
    let mut clicks = vec![0usize; log.n()];
    for e in &log.events {
        match e.kind {
            EventKind::Purchase => purchases[e.user as usize] += 1,
            EventKind::Click => clicks[e.user as usize] += 1,
        }
    }
    let keep: Vec<bool> = purchases
        .iter()
        .zip(&clicks)
        .map(|(&p, &c)| p >= min_purchases && c >= min_clicks)
        .collect();

    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let events: Vec<Event> = log
        .events
        .iter()
        .filter(|e| keep[e.user as usize])
        .map(|e| Event {
            user: users.intern(log.users.id(e.user)),
            item: items.intern(log.items.id(e.item)),
            ..*e
        })
        .collect();

    if events.is_empty() {
        return Err(Error::EmptyResult {
            min_purchases,
            min_clicks,
        });
    }
    Ok(InteractionLog { events, users, items })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ItemClass {
    Purchased,
    ClickedOnly,
    NonClicked,
}

/// One user's view of the catalog: purchased items, clicked-but-not-purchased
/// items, and (implicitly) everything else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriPartition {
    purchased: Vec<u32>,
    clicked_only: Vec<u32>,
    universe_size: usize,
}

impl TriPartition {
    /// Builds the partition from a user's purchases and clicks. Purchased
    /// items are removed from the clicked-only set whether or not they were
    /// clicked.
    pub fn from_history(
        purchases: impl IntoIterator<Item = u32>,
        clicks: impl IntoIterator<Item = u32>,
        universe_size: usize,
    ) -> Self {
        let mut purchased: Vec<u32> = purchases.into_iter().collect();
        purchased.sort_unstable();
        purchased.dedup();
        let mut clicked_only: Vec<u32> = clicks
            .into_iter()
            .filter(|i| purchased.binary_search(i).is_err())
            .collect();
        clicked_only.sort_unstable();
        clicked_only.dedup();
        debug_assert!(purchased
            .iter()
            .chain(&clicked_only)
            .all(|&i| (i as usize) < universe_size));
        TriPartition {
            purchased,
            clicked_only,
            universe_size,
        }
    }

    pub fn purchased(&self) -> &[u32] {
        &self.purchased
    }

    pub fn clicked_only(&self) -> &[u32] {
        &self.clicked_only
    }

    pub fn universe_size(&self) -> usize {
        self.universe_size
    }

    pub fn non_clicked_len(&self) -> usize {
        self.universe_size - self.purchased.len() - self.clicked_only.len()
    }

    pub fn is_purchased(&self, item: u32) -> bool {
        self.purchased.binary_search(&item).is_ok()
    }

    pub fn is_clicked_only(&self, item: u32) -> bool {
        self.clicked_only.binary_search(&item).is_ok()
    }

    pub fn is_non_clicked(&self, item: u32) -> bool {
        (item as usize) < self.universe_size && !self.is_purchased(item) && !self.is_clicked_only(item)
    }

    pub fn class_of(&self, item: u32) -> ItemClass {
        if self.is_purchased(item) {
            ItemClass::Purchased
        } else if self.is_clicked_only(item) {
            ItemClass::ClickedOnly
        } else {
            ItemClass::NonClicked
        }
    }

    pub fn class_len(&self, class: ItemClass) -> usize {
        match class {
            ItemClass::Purchased => self.purchased.len(),
            ItemClass::ClickedOnly => self.clicked_only.len(),
            ItemClass::NonClicked => self.non_clicked_len(),
        }
    }

    /// Items in neither explicit set, ascending.
    pub fn non_clicked(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.universe_size as u32).filter(move |&i| self.is_non_clicked(i))
    }
}

/// Training log, held-out future purchases, and the per-user partitions
/// derived from the training log alone.
#[derive(Clone, Debug)]
pub struct Dataset {
    train: InteractionLog,
    test_purchases: Vec<Vec<u32>>,
    partitions: Vec<TriPartition>,
}

impl Dataset {
    pub fn new(train: InteractionLog, test_purchases: Vec<Vec<u32>>) -> Result<Self> {
        let (n, m) = (train.n(), train.m());
        if test_purchases.len() != n {
            return Err(Error::Config(format!(
                "test purchases cover {} users, training log has {n}",
                test_purchases.len()
            )));
        }
        let purchases = train.items_by_user(EventKind::Purchase);
        let clicks = train.items_by_user(EventKind::Click);
        let partitions: Vec<TriPartition> = purchases
            .into_iter()
            .zip(clicks)
            .map(|(p, c)| TriPartition::from_history(p, c, m))
            .collect();

        let mut test = test_purchases;
        for (u, items) in test.iter_mut().enumerate() {
            items.sort_unstable();
            items.dedup();
            if let Some(&bad) = items.iter().find(|&&i| i as usize >= m) {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: bad as usize,
                    len: m,
                });
            }
            if let Some(&dup) = items.iter().find(|&&i| partitions[u].is_purchased(i)) {
                return Err(Error::Config(format!(
                    "user `{}` has item `{}` in both train and test purchases",
                    train.users().id(u as u32),
                    train.items().id(dup)
                )));
            }
        }
        Ok(Dataset {
            train,
            test_purchases: test,
            partitions,
        })
    }

    /// Builds a dataset directly over dense indices, with users named
    /// `u0..` and items `i0..`. Each purchase also gets a click.
    pub fn from_index_sets(m: usize, purchases: &[Vec<u32>], clicks: &[Vec<u32>], test: &[Vec<u32>]) -> Result<Self> {
        let n = purchases.len();
        if clicks.len() != n || test.len() != n {
            return Err(Error::Config("purchase, click and test lists differ in length".into()));
        }
        let users = IdMap::from_ids((0..n).map(|u| format!("u{u}")).collect())?;
        let items = IdMap::from_ids((0..m).map(|i| format!("i{i}")).collect())?;
        let mut events = Vec::new();
        let mut t = 0;
        for u in 0..n {
            let mut clicked: Vec<u32> = clicks[u].iter().chain(&purchases[u]).copied().collect();
            clicked.sort_unstable();
            clicked.dedup();
            for (kind, list) in [(EventKind::Click, &clicked), (EventKind::Purchase, &purchases[u])] {
                for &item in list {
                    events.push(Event {
                        user: u as u32,
                        item,
                        timestamp: t,
                        kind,
                    });
                    t += 1;
                }
            }
        }
        let log = InteractionLog::from_parts(events, users, items)?;
        Dataset::new(log, test.to_vec())
    }

    /// Dataset with an empty held-out set.
    pub fn train_only(train: InteractionLog) -> Result<Self> {
        let n = train.n();
        Self::new(train, vec![Vec::new(); n])
    }

    /// Same training data, different held-out purchases.
    pub fn with_test(&self, test_purchases: Vec<Vec<u32>>) -> Result<Self> {
        Self::new(self.train.clone(), test_purchases)
    }

    pub fn train(&self) -> &InteractionLog {
        &self.train
    }

    pub fn n(&self) -> usize {
        self.train.n()
    }

    pub fn m(&self) -> usize {
        self.train.m()
    }

    pub fn test_purchases(&self, u: usize) -> &[u32] {
        &self.test_purchases[u]
    }

    pub fn all_test_purchases(&self) -> &[Vec<u32>] {
        &self.test_purchases
    }

    pub fn partitions(&self) -> &[TriPartition] {
        &self.partitions
    }
}

/// The three-set partition of user `u`.
pub fn partition(dataset: &Dataset, u: usize) -> Result<&TriPartition> {
    dataset.partitions.get(u).ok_or(Error::IndexOutOfRange {
        what: "user",
        index: u,
        len: dataset.n(),
    })
}
