//! Data preparation: chronological train/test split, the synthetic log
//! generator, model checkpoints and on-disk dataset directories.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::error::{Error, Result};
use crate::interactions::{
    enforce_click_closure, parse_events, Dataset, Event, EventKind, IdMap, InteractionLog, RawEvent,
};
use crate::latent_model::{dot, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    /// Share of each user's purchases, in time order, that goes to training.
    pub purchase_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { purchase_fraction: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct SplitOutput {
    pub dataset: Dataset,
    /// Clicks after each user's last training purchase; dropped.
    pub discarded_clicks: usize,
}

/// Splits each user's purchases by time: the first `ceil(fraction * count)`
/// train, the rest are held out. Ties in timestamp keep log order. Only
/// clicks up to the user's last training purchase are kept, then the click
/// closure is re-applied to the training log.
pub fn chronological_split(log: &InteractionLog, cfg: &SplitConfig) -> Result<Dataset> {
    split_with_stats(log, cfg).map(|s| s.dataset)
}

pub fn split_with_stats(log: &InteractionLog, cfg: &SplitConfig) -> Result<SplitOutput> {
    let frac = cfg.purchase_fraction;
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!(
            "purchase fraction must be in (0, 1), got {frac}"
        )));
    }
    let n = log.n();
    let mut purchases: Vec<Vec<(u64, usize)>> = vec![Vec::new(); n];
    for (pos, e) in log.events().iter().enumerate() {
        if e.kind == EventKind::Purchase {
            purchases[e.user as usize].push((e.timestamp, pos));
        }
    }

    let mut train_event = vec![false; log.events().len()];
    let mut cutoff = vec![0u64; n];
    let mut test: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (u, list) in purchases.iter_mut().enumerate() {
        if list.len() < 2 {
            return Err(Error::Split {
                user: log.users().id(u as u32).to_owned(),
                count: list.len(),
            });
        }
        list.sort_unstable();
        let n_train = ((frac * list.len() as f64).ceil() as usize).clamp(1, list.len());
        for &(_, pos) in &list[..n_train] {
            train_event[pos] = true;
        }
        cutoff[u] = list[n_train - 1].0;
        test[u] = list[n_train..].iter().map(|&(_, pos)| log.events()[pos].item).collect();
    }

    let mut discarded = 0;
    let mut events = Vec::new();
    for (pos, e) in log.events().iter().enumerate() {
        let keep = match e.kind {
            EventKind::Purchase => train_event[pos],
            EventKind::Click => {
                let ok = e.timestamp <= cutoff[e.user as usize];
                discarded += usize::from(!ok);
                ok
            }
        };
        if keep {
            events.push(*e);
        }
    }
    let train = InteractionLog::from_parts(events, log.users().clone(), log.items().clone())?;
    let train = enforce_click_closure(train);
    log::info!("split: {n} users, {discarded} post-cutoff clicks discarded");
    Ok(SplitOutput {
        dataset: Dataset::new(train, test)?,
        discarded_clicks: discarded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub m: usize,
    pub true_k: usize,
    pub clicks_per_user: usize,
    pub purchases_per_user: usize,
    /// Selection temperature; smaller is closer to picking the top scores.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            m: 300,
            true_k: 8,
            clicks_per_user: 30,
            purchases_per_user: 6,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.true_k == 0 {
            return Err(Error::Config("users, items and planted k must be positive".into()));
        }
        if self.purchases_per_user > self.clicks_per_user || self.clicks_per_user > self.m {
            return Err(Error::Config(format!(
                "need purchases ({}) <= clicks ({}) <= items ({})",
                self.purchases_per_user, self.clicks_per_user, self.m
            )));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::Config(format!("noise must be positive, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Draws `count` distinct indices from `pool` without replacement with
/// probability proportional to `exp(score / noise)`, in draw order
/// (Gumbel-top-k).
fn weighted_draw(pool: &[u32], scores: &[f64], count: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let mut keyed: Vec<(f64, u32)> = pool
        .iter()
        .map(|&i| (scores[i as usize] / noise + gumbel.sample(rng), i))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Generates a click/purchase log from planted Gaussian factors. Each user
/// clicks `clicks_per_user` items drawn by preference, then purchases
/// `purchases_per_user` of the clicked items, again by preference. Each
/// purchase immediately follows its click in time, and clicks are time
/// ordered by draw order.
///
/// Users are named `u0..`, items `i0..`; indices match the returned planted
/// parameters (whose biases are zero).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(InteractionLog, ModelParams)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut planted = ModelParams::zeros(cfg.n, cfg.m, cfg.true_k);
    for v in planted.user_factors.iter_mut().chain(planted.item_factors.iter_mut()) {
        *v = StandardNormal.sample(&mut rng);
    }

    let all_items: Vec<u32> = (0..cfg.m as u32).collect();
    let mut events = Vec::with_capacity(cfg.n * (cfg.clicks_per_user + cfg.purchases_per_user));
    let mut t = 0u64;
    for u in 0..cfg.n {
        let scores: Vec<f64> = (0..cfg.m).map(|i| dot(planted.user(u), planted.item(i))).collect();
        let clicks = weighted_draw(&all_items, &scores, cfg.clicks_per_user, cfg.noise, &mut rng);
        let mut bought = weighted_draw(&clicks, &scores, cfg.purchases_per_user, cfg.noise, &mut rng);
        bought.sort_unstable();
        for &item in &clicks {
            let user = u as u32;
            events.push(Event {
                user,
                item,
                timestamp: t,
                kind: EventKind::Click,
            });
            if bought.binary_search(&item).is_ok() {
                events.push(Event {
                    user,
                    item,
                    timestamp: t + 1,
                    kind: EventKind::Purchase,
                });
            }
            t += 2;
        }
    }
    let users = IdMap::from_ids((0..cfg.n).map(|u| format!("u{u}")).collect())?;
    let items = IdMap::from_ids((0..cfg.m).map(|i| format!("i{i}")).collect())?;
    Ok((InteractionLog::from_parts(events, users, items)?, planted))
}

/// Fixed 3-user, 6-item training set used to check exact-gradient ascent.
pub fn tiny_instance() -> Dataset {
    Dataset::from_index_sets(
        6,
        &[vec![0], vec![2, 3], vec![5]],
        &[vec![1, 2], vec![4], vec![0, 3]],
        &[vec![3], vec![0], vec![1]],
    )
    .expect("valid fixture")
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"P3SMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 12;

fn checkpoint_len(n: u64, m: u64, k: u64) -> u64 {
    HEADER_LEN + 8 * (n * k + m * k + m)
}

/// Serializes parameters: magic, version, then n, m, k as little-endian
/// u32, then user factors, item factors and item biases as little-endian
/// f64, all row-major.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let (n, m, k) = (params.n() as u64, params.m() as u64, params.k() as u64);
    let mut buf = Vec::with_capacity(checkpoint_len(n, m, k) as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [params.n(), params.m(), params.k()] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in params
        .user_factors
        .iter()
        .chain(&params.item_factors)
        .chain(&params.item_bias)
    {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let actual = bytes.len() as u64;
    if actual < HEADER_LEN {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected: HEADER_LEN,
            actual,
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    let (n, m, k) = (word(12) as usize, word(16) as usize, word(20) as usize);
    let expected = checkpoint_len(n as u64, m as u64, k as u64);
    if actual != expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected,
            actual,
        });
    }
    let mut floats = bytes[HEADER_LEN as usize..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let user_factors: Vec<f64> = floats.by_ref().take(n * k).collect();
    let item_factors: Vec<f64> = floats.by_ref().take(m * k).collect();
    let item_bias: Vec<f64> = floats.collect();
    ModelParams::from_parts(n, m, k, user_factors, item_factors, item_bias)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub const USERS_FILE: &str = "users.txt";
pub const ITEMS_FILE: &str = "items.txt";
pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const EVENTS_FILE: &str = "events.tsv";

fn id_lines(map: &IdMap) -> Vec<u8> {
    let mut out = Vec::new();
    for id in map.ids() {
        out.extend_from_slice(id.as_bytes());
        out.push(b'\n');
    }
    out
}

fn read_ids(path: &Path) -> Result<IdMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ids = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<String>>>()
        .map_err(|e| Error::io(path, e))?;
    IdMap::from_ids(ids)
}

/// Writes a split dataset as a directory: the user and item id lists (one
/// per line, in index order), the training log, and the held-out purchases
/// in event format (timestamps are not kept and written as 0).
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = dataset.train();
    write_atomic(dir.join(USERS_FILE), &id_lines(train.users()))?;
    write_atomic(dir.join(ITEMS_FILE), &id_lines(train.items()))?;
    let mut buf = Vec::new();
    train
        .write_tsv(&mut buf)
        .map_err(|e| Error::io(dir.join(TRAIN_FILE), e))?;
    write_atomic(dir.join(TRAIN_FILE), &buf)?;
    let mut test = Vec::new();
    for (u, items) in dataset.all_test_purchases().iter().enumerate() {
        for &i in items {
            let _ = writeln!(
                test,
                "{}\t{}\t0\tpurchase",
                train.users().id(u as u32),
                train.items().id(i)
            );
        }
    }
    write_atomic(dir.join(TEST_FILE), &test)
}

fn remap(raw: Vec<RawEvent>, users: &IdMap, items: &IdMap) -> Result<Vec<Event>> {
    raw.into_iter()
        .map(|r| {
            Ok(Event {
                user: users.get(&r.user).ok_or(Error::UnknownId {
                    what: "user",
                    id: r.user.clone(),
                })?,
                item: items.get(&r.item).ok_or(Error::UnknownId {
                    what: "item",
                    id: r.item.clone(),
                })?,
                timestamp: r.timestamp,
                kind: r.kind,
            })
        })
        .collect()
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let users = read_ids(&dir.join(USERS_FILE))?;
    let items = read_ids(&dir.join(ITEMS_FILE))?;
    let train_raw = crate::interactions::read_events(dir.join(TRAIN_FILE))?;
    let test_raw = crate::interactions::read_events(dir.join(TEST_FILE))?;
    let train_events = remap(train_raw, &users, &items)?;
    let mut test = vec![Vec::new(); users.len()];
    for e in remap(test_raw, &users, &items)? {
        if e.kind != EventKind::Purchase {
            return Err(Error::Config(format!(
                "{}: held-out events must be purchases",
                TEST_FILE
            )));
        }
        test[e.user as usize].push(e.item);
    }
    Dataset::new(InteractionLog::from_parts(train_events, users, items)?, test)
}

/// Reads the RecSys Challenge 2015 files: `session,timestamp,item,...`
/// comma-separated rows with ISO-8601 timestamps. Sessions become users,
/// rows of the clicks file become clicks and rows of the buys file become
/// purchases.
pub fn read_recsys2015(clicks: impl AsRef<Path>, buys: impl AsRef<Path>) -> Result<Vec<RawEvent>> {
    let mut out = Vec::new();
    for (path, kind) in [
        (clicks.as_ref(), EventKind::Click),
        (buys.as_ref(), EventKind::Purchase),
    ] {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: lineno + 1,
                message: format!("{}: {message}", path.display()),
            };
            let mut fields = line.split(',');
            let (Some(session), Some(ts), Some(item)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err("expected session,timestamp,item".into()));
            };
            let when = chrono::DateTime::parse_from_rfc3339(ts)
                .map_err(|e| parse_err(format!("bad timestamp `{ts}`: {e}")))?;
            let ms = u64::try_from(when.timestamp_millis()).map_err(|_| parse_err("negative timestamp".into()))?;
            out.push(RawEvent::new(session, item, ms, kind));
        }
    }
    Ok(out)
}

/// Parses an event file from disk. Accepts a file path or a directory
/// holding `events.tsv`.
pub fn read_event_source(path: impl AsRef<Path>) -> Result<Vec<RawEvent>> {
    let path = path.as_ref();
    let file_path = if path.is_dir() {
        path.join(EVENTS_FILE)
    } else {
        path.to_path_buf()
    };
    let file = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
    parse_events(BufReader::new(file))
}
