//! Review parsing, the implicit-feedback corpus and the leave-one-out split.
//!
//! Any review counts as an interaction; ratings are carried along but never
//! used for ranking. Each user with at least two distinct interacted items
//! holds out their latest one for testing, and gets 99 sampled negatives
//! drawn from items they never touched.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of sampled negatives per evaluation candidate list.
pub const EVAL_NEGATIVES: usize = 99;

/// Share of malformed lines above which a line-oriented parse fails.
const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewRecord {
    pub user_key: String,
    pub item_key: String,
    pub rating: f64,
    pub comment_text: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionRecord {
    pub item_key: String,
    pub description_text: String,
}

/// A line that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-indexed line number in the input.
    pub line: usize,
    pub message: String,
}

/// Records parsed from a line-oriented file plus the lines that were rejected.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
    /// Non-blank lines seen.
    pub lines: usize,
}

#[derive(Deserialize)]
struct RawReview {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    overall: f64,
    #[serde(rename = "reviewText", default)]
    review_text: Option<String>,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawDescription {
    Text(String),
    Paragraphs(Vec<String>),
}

#[derive(Deserialize)]
struct RawMeta {
    asin: String,
    #[serde(default)]
    description: Option<RawDescription>,
}

fn parse_lines<R, T, F>(reader: R, what: &'static str, mut parse: F) -> Result<Parsed<T>>
where
    R: BufRead,
    F: FnMut(&str) -> std::result::Result<T, String>,
{
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut lines = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse(&line) {
            Ok(r) => records.push(r),
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    if !errors.is_empty() {
        log::warn!("{what}: {} of {lines} lines malformed", errors.len());
    }
    if errors.len() as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        let first = &errors[0];
        return Err(Error::Malformed {
            what,
            bad: errors.len(),
            total: lines,
            first_line: first.line,
            first_message: first.message.clone(),
        });
    }
    Ok(Parsed { records, errors, lines })
}

/// Parses the per-line JSON review format (`reviewerID`, `asin`, `overall`,
/// `reviewText`, `unixReviewTime`).
pub fn parse_reviews<R: BufRead>(reader: R) -> Result<Parsed<ReviewRecord>> {
    parse_lines(reader, "reviews", |line| {
        let raw: RawReview = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if raw.reviewer_id.is_empty() || raw.asin.is_empty() {
            return Err("empty reviewerID or asin".to_string());
        }
        Ok(ReviewRecord {
            user_key: raw.reviewer_id,
            item_key: raw.asin,
            rating: raw.overall,
            comment_text: raw.review_text.unwrap_or_default(),
            timestamp: raw.unix_review_time,
        })
    })
}

/// Parses per-line JSON item metadata. `description` may be a string or a
/// list of paragraphs (joined with a space); a missing one is empty.
pub fn parse_descriptions<R: BufRead>(reader: R) -> Result<Parsed<DescriptionRecord>> {
    parse_lines(reader, "metadata", |line| {
        let raw: RawMeta = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if raw.asin.is_empty() {
            return Err("empty asin".to_string());
        }
        let description_text = match raw.description {
            None => String::new(),
            Some(RawDescription::Text(s)) => s,
            Some(RawDescription::Paragraphs(p)) => p.join(" "),
        };
        Ok(DescriptionRecord { item_key: raw.asin, description_text })
    })
}

/// One implicit-feedback observation in dense index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: u64,
}

/// Dense key <-> index mapping, in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct KeyIndex {
    keys: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl KeyIndex {
    fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.lookup.get(key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.to_string());
        self.lookup.insert(key.to_string(), id);
        id
    }

    pub fn get(&self, key: &str) -> Option<u32> {
        self.lookup.get(key).copied()
    }

    pub fn key(&self, id: u32) -> &str {
        &self.keys[id as usize]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct InteractionCorpus {
    pub users: KeyIndex,
    pub items: KeyIndex,
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Candidate lists for evaluable test users: 99 negatives, then the test item.
    pub candidates: BTreeMap<u32, Vec<u32>>,
    /// Test users with fewer than 99 never-interacted items.
    pub excluded_users: Vec<u32>,
    /// Every interacted item per user (train and test), sorted.
    user_items: Vec<Vec<u32>>,
    test_by_user: Vec<Option<u32>>,
}

impl InteractionCorpus {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// `y[m, n]` over the full interaction set.
    pub fn interacted(&self, user: u32, item: u32) -> bool {
        self.user_items[user as usize].binary_search(&item).is_ok()
    }

    pub fn user_items(&self, user: u32) -> &[u32] {
        &self.user_items[user as usize]
    }

    pub fn test_item(&self, user: u32) -> Option<u32> {
        self.test_by_user[user as usize]
    }

    pub fn is_test_pair(&self, user: u32, item: u32) -> bool {
        self.test_item(user) == Some(item)
    }

    pub fn total_interactions(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    pub fn split_manifest(&self) -> SplitManifest {
        let row = |x: &Interaction| [x.user as u64, x.item as u64, x.timestamp];
        SplitManifest {
            train: self.train.iter().map(row).collect(),
            test: self.test.iter().map(row).collect(),
            candidates: self.candidates.clone(),
        }
    }
}

/// Audit form of the split: `{train: [[m,n,t]...], test: [...], candidates: {m: [n...]}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<[u64; 3]>,
    pub test: Vec<[u64; 3]>,
    pub candidates: BTreeMap<u32, Vec<u32>>,
}

/// Builds the index maps, the leave-one-out split and the evaluation candidates.
///
/// Repeated reviews of the same (user, item) collapse into one interaction
/// whose position is that of the latest review. The latest interaction of
/// each user is held out; equal timestamps resolve to the later input line.
pub fn build_corpus(reviews: &[ReviewRecord], seed: u64) -> Result<InteractionCorpus> {
    if reviews.is_empty() {
        return Err(Error::Empty("no reviews to build a corpus from"));
    }
    let mut users = KeyIndex::default();
    let mut items = KeyIndex::default();
    // per user: item -> (timestamp, input position) of its latest review
    let mut latest: Vec<HashMap<u32, (u64, usize)>> = Vec::new();
    for (pos, r) in reviews.iter().enumerate() {
        let m = users.intern(&r.user_key);
        let n = items.intern(&r.item_key);
        if m as usize == latest.len() {
            latest.push(HashMap::new());
        }
        let slot = latest[m as usize].entry(n).or_insert((r.timestamp, pos));
        if (r.timestamp, pos) > *slot {
            *slot = (r.timestamp, pos);
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut user_items = Vec::with_capacity(latest.len());
    let mut test_by_user = vec![None; latest.len()];
    for (m, per_item) in latest.iter().enumerate() {
        let mut ordered: Vec<(u64, usize, u32)> =
            per_item.iter().map(|(&n, &(t, pos))| (t, pos, n)).collect();
        ordered.sort_unstable();
        let held_out = if ordered.len() >= 2 { ordered.pop() } else { None };
        for &(t, _, n) in &ordered {
            train.push(Interaction { user: m as u32, item: n, timestamp: t });
        }
        if let Some((t, _, n)) = held_out {
            test.push(Interaction { user: m as u32, item: n, timestamp: t });
            test_by_user[m] = Some(n);
        }
        let mut all: Vec<u32> = per_item.keys().copied().collect();
        all.sort_unstable();
        user_items.push(all);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = BTreeMap::new();
    let mut excluded_users = Vec::new();
    let num_items = items.len() as u32;
    for t in &test {
        let seen = &user_items[t.user as usize];
        let pool: Vec<u32> = (0..num_items).filter(|n| seen.binary_search(n).is_err()).collect();
        if pool.len() < EVAL_NEGATIVES {
            log::warn!(
                "user {} has only {} never-interacted items; excluded from evaluation",
                users.key(t.user),
                pool.len()
            );
            excluded_users.push(t.user);
            continue;
        }
        let mut list: Vec<u32> = index::sample(&mut rng, pool.len(), EVAL_NEGATIVES)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        list.push(t.item);
        candidates.insert(t.user, list);
    }

    Ok(InteractionCorpus {
        users,
        items,
        train,
        test,
        candidates,
        excluded_users,
        user_items,
        test_by_user,
    })
}

/// Blanks the comment of every review that belongs to a held-out test pair.
pub fn strip_test_comments(reviews: &[ReviewRecord], corpus: &InteractionCorpus) -> Vec<ReviewRecord> {
    let test_pairs: HashSet<(&str, &str)> = corpus
        .test
        .iter()
        .map(|t| (corpus.users.key(t.user), corpus.items.key(t.item)))
        .collect();
    reviews
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if test_pairs.contains(&(r.user_key.as_str(), r.item_key.as_str())) {
                r.comment_text.clear();
            }
            r
        })
        .collect()
}
