//! Interaction-log parsing, implicit-feedback conversion, dense id
//! assignment and the per-user train/test split.
//!
//! Two layouts are supported: tab-separated `user item rating timestamp`
//! and comma-separated `user item rating` with an optional header line.
//! Every parsed event counts as a positive regardless of its rating value;
//! duplicate (user, item) pairs collapse to one interaction.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw event from an interaction log, before id assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user_token: String,
    pub item_token: String,
    /// The rating column, kept only for inspection; conversion to implicit
    /// feedback ignores it.
    pub weight: f64,
}

/// Supported input layouts.  The tab-separated form is the default, being
/// the layout of the classic MovieLens logs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputFormat {
    /// `user \t item \t rating \t timestamp`.
    #[default]
    #[serde(rename = "tsv-4col")]
    Tsv4Col,
    /// `user,item,rating`, optionally preceded by a header line.
    #[serde(rename = "csv-3col")]
    Csv3Col,
}

/// Parses an interaction log line by line.  Lines are 1-indexed in error
/// messages.  For the CSV layout, a first line whose third field is not a
/// number is treated as a header and skipped.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    format: InputFormat,
) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        match format {
            InputFormat::Tsv4Col => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 4 {
                    return Err(parse_err(
                        line_no,
                        format!("expected 4 tab-separated fields, found {}", fields.len()),
                    ));
                }
                out.push(to_interaction(line_no, fields[0], fields[1], fields[2])?);
            }
            InputFormat::Csv3Col => {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        format!("expected 3 comma-separated fields, found {}", fields.len()),
                    ));
                }
                // Header detection: only the first line may carry one, and
                // only when its rating column is not numeric.
                if line_no == 1 && fields[2].trim().parse::<f64>().is_err() {
                    continue;
                }
                out.push(to_interaction(line_no, fields[0], fields[1], fields[2])?);
            }
        }
    }
    Ok(out)
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse { line, message }
}

fn to_interaction(
    line_no: usize,
    user: &str,
    item: &str,
    rating: &str,
) -> Result<RawInteraction> {
    let user = user.trim();
    let item = item.trim();
    if user.is_empty() || item.is_empty() {
        return Err(parse_err(line_no, "empty user or item field".into()));
    }
    let weight = rating.trim().parse::<f64>().map_err(|_| {
        parse_err(line_no, format!("rating '{}' is not a number", rating.trim()))
    })?;
    Ok(RawInteraction {
        user_token: user.to_string(),
        item_token: item.to_string(),
        weight,
    })
}

/// Bijection between external string tokens and dense `u32` ids, assigned
/// in order of first appearance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    fn get_or_insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Dense id for a token, if it was seen during ingestion.
    pub fn encode(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Original token for a dense id.
    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Implicit-feedback dataset with dense ids and a frozen train/test split.
/// Positive lists are sorted ascending and duplicate-free.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Training positives per user id.
    pub train_pos: Vec<Vec<u32>>,
    /// Held-out positives per user id; disjoint from `train_pos`.
    pub test_pos: Vec<Vec<u32>>,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

impl InteractionDataset {
    pub fn num_train_interactions(&self) -> usize {
        self.train_pos.iter().map(Vec::len).sum()
    }

    pub fn num_test_interactions(&self) -> usize {
        self.test_pos.iter().map(Vec::len).sum()
    }

    /// All (user, item) training pairs in user-id order.
    pub fn train_pairs(&self) -> Vec<(u32, u32)> {
        let mut pairs = Vec::with_capacity(self.num_train_interactions());
        for (u, items) in self.train_pos.iter().enumerate() {
            pairs.extend(items.iter().map(|&i| (u as u32, i)));
        }
        pairs
    }

    /// Whether `item` is one of `user`'s training positives.
    pub fn is_train_pos(&self, user: u32, item: u32) -> bool {
        self.train_pos[user as usize].binary_search(&item).is_ok()
    }

    /// Summary of the split parameters, serialized next to run outputs.
    pub fn split_manifest(&self, seed: u64, test_fraction: f64) -> SplitManifest {
        SplitManifest {
            seed,
            test_fraction,
            num_users: self.num_users,
            num_items: self.num_items,
        }
    }
}

/// Parameters that fully determine a split, for reproduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub num_users: usize,
    pub num_items: usize,
}

/// Converts raw events into an [`InteractionDataset`].
///
/// Ids are dense and assigned by first appearance.  Each user's
/// deduplicated items are split so that exactly
/// `floor(test_fraction * n)` of them are held out, chosen uniformly by a
/// generator seeded with `seed`; users whose holdout would leave no
/// training positive keep everything in train.  The same inputs always
/// produce the same split.
pub fn build_dataset(
    raw: &[RawInteraction],
    test_fraction: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }

    let mut user_ids = IdMap::default();
    let mut item_ids = IdMap::default();
    let mut per_user: Vec<Vec<u32>> = Vec::new();
    for r in raw {
        let u = user_ids.get_or_insert(&r.user_token) as usize;
        let i = item_ids.get_or_insert(&r.item_token);
        if u == per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[u].push(i);
    }
    for items in &mut per_user {
        items.sort_unstable();
        items.dedup();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_pos = Vec::with_capacity(per_user.len());
    let mut test_pos = Vec::with_capacity(per_user.len());
    for items in &per_user {
        let n = items.len();
        let mut n_test = (test_fraction * n as f64).floor() as usize;
        if n - n_test < 1 {
            n_test = 0;
        }
        if n_test == 0 {
            train_pos.push(items.clone());
            test_pos.push(Vec::new());
            continue;
        }
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng);
        let mut test: Vec<u32> = shuffled[..n_test].to_vec();
        let mut train: Vec<u32> = shuffled[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        train_pos.push(train);
        test_pos.push(test);
    }

    Ok(InteractionDataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        train_pos,
        test_pos,
        user_ids,
        item_ids,
    })
}
