//! A generated CTR-like task whose labels can only be predicted from
//! neighbors.
//!
//! Records carry a `user` key plus binary distractor fields. Each user's
//! history is a run of episodes: an episode opens with five records of
//! random label and continues with records labelled by the majority of the
//! five most recent earlier records of the same user. Because the majority
//! then repeats, an episode settles on one label. Episode labels are drawn so
//! that every user has exactly as many clicks as non-clicks in the training
//! slice, so the user id alone says nothing about the label.
//!
//! The last episode of every user opens at the end of the training slice and
//! continues through validation and test. Distractor values are split exactly
//! half and half over the training slice, which gives them a retrieval weight
//! of exactly zero: the top five neighbors of a record are then the five most
//! recent earlier records of its user, which is precisely what the label rule
//! reads.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RawRow, RawTable, SplitRatios};
use crate::{Error, Result};

/// Records the label rule looks back over.
pub const WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    /// Finished episodes per user before the final one.
    pub episodes_per_user: usize,
    /// Validation records per user; test gets as many, train eight times as many.
    pub records_per_split: usize,
    pub num_distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { num_users: 100, episodes_per_user: 4, records_per_split: 6, num_distractors: 15, seed: 42 }
    }
}

impl SyntheticConfig {
    /// Split ratios that put the boundaries exactly where the generator expects them.
    pub fn split() -> SplitRatios {
        SplitRatios::new(0.8, 0.1, 0.1)
    }

    fn train_per_user(&self) -> usize {
        8 * self.records_per_split
    }

    fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.records_per_split == 0 {
            return Err(Error::invalid("num_users and records_per_split must be positive"));
        }
        let earlier = self.train_per_user().saturating_sub(WINDOW);
        if self.episodes_per_user == 0 || earlier < self.episodes_per_user * 8 {
            return Err(Error::invalid(format!(
                "{} training records per user cannot hold {} earlier episodes of at least 8 records",
                self.train_per_user(),
                self.episodes_per_user
            )));
        }
        Ok(())
    }
}

fn majority(history: &VecDeque<u8>) -> u8 {
    let ones = history.iter().filter(|&&l| l == 1).count();
    u8::from(2 * ones > history.len())
}

/// Opening labels of an episode whose majority is `click`.
fn openers(rng: &mut ChaCha8Rng, click: bool) -> Vec<u8> {
    let ones = if click { rng.random_range(3..=WINDOW) } else { rng.random_range(0..3) };
    let mut labels: Vec<u8> = (0..WINDOW).map(|i| u8::from(i < ones)).collect();
    labels.shuffle(rng);
    labels
}

/// Earlier episodes of one user holding exactly `ones` clicks in total, so
/// that every user has the same click count in the training slice.
fn plan_earlier(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, ones: usize) -> Result<VecDeque<Option<u8>>> {
    let episodes = cfg.episodes_per_user;
    let earlier = cfg.train_per_user() - WINDOW;
    for _ in 0..100_000 {
        let mut lens = vec![8; episodes];
        for _ in 0..earlier - 8 * episodes {
            lens[rng.random_range(0..episodes)] += 1;
        }
        let plan: Vec<(usize, bool, Vec<u8>)> = lens
            .into_iter()
            .map(|len| {
                let click = rng.random_bool(0.5);
                (len, click, openers(rng, click))
            })
            .collect();
        let total: usize = plan
            .iter()
            .map(|(len, click, open)| open.iter().map(|&l| l as usize).sum::<usize>() + if *click { len - WINDOW } else { 0 })
            .sum();
        if total == ones {
            return Ok(plan
                .into_iter()
                .flat_map(|(len, _, open)| open.into_iter().map(Some).chain(std::iter::repeat_n(None, len - WINDOW)))
                .collect());
        }
    }
    Err(Error::invalid("could not balance clicks per user; use more records per split"))
}

/// Random interleaving of per-user event counts: returns the user of each slot.
fn interleave(rng: &mut ChaCha8Rng, counts: &[usize]) -> Vec<usize> {
    let mut slots: Vec<usize> = counts.iter().enumerate().flat_map(|(u, &n)| std::iter::repeat_n(u, n)).collect();
    slots.shuffle(rng);
    slots
}

/// Generates the table in chronological order, timestamps `0..N`.
pub fn generate(cfg: &SyntheticConfig) -> Result<RawTable> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let users = cfg.num_users;

    // Per user, the planned training events: an opener's label, or None for a rule record.
    let mut earlier_plans: Vec<VecDeque<Option<u8>>> = Vec::with_capacity(users);
    let mut final_openers: Vec<VecDeque<Option<u8>>> = Vec::with_capacity(users);
    for _ in 0..users {
        let click = rng.random_bool(0.5);
        let last = openers(&mut rng, click);
        let ones = last.iter().filter(|&&l| l == 1).count();
        earlier_plans.push(plan_earlier(&mut rng, cfg, cfg.train_per_user() / 2 - ones)?);
        final_openers.push(last.into_iter().map(Some).collect());
    }

    let mut history: Vec<VecDeque<u8>> = vec![VecDeque::with_capacity(WINDOW); users];
    let mut events: Vec<(usize, u8)> = Vec::new();
    let mut emit = |history: &mut Vec<VecDeque<u8>>, user: usize, planned: Option<u8>| {
        let h = &mut history[user];
        let label = planned.unwrap_or_else(|| majority(h));
        if h.len() == WINDOW {
            h.pop_front();
        }
        h.push_back(label);
        events.push((user, label));
    };

    let earlier = cfg.train_per_user() - WINDOW;
    for user in interleave(&mut rng, &vec![earlier; users]) {
        emit(&mut history, user, earlier_plans[user].pop_front().expect("counts match"));
    }
    for user in interleave(&mut rng, &vec![WINDOW; users]) {
        emit(&mut history, user, final_openers[user].pop_front().expect("counts match"));
    }
    for _ in 0..2 {
        for user in interleave(&mut rng, &vec![cfg.records_per_split; users]) {
            emit(&mut history, user, None);
        }
    }

    let train_len = users * cfg.train_per_user();
    let mut distractors: Vec<Vec<bool>> = Vec::with_capacity(cfg.num_distractors);
    for _ in 0..cfg.num_distractors {
        let mut col: Vec<bool> = (0..train_len).map(|i| i < train_len / 2).collect();
        col.shuffle(&mut rng);
        col.extend((train_len..events.len()).map(|_| rng.random_bool(0.5)));
        distractors.push(col);
    }

    let rows = events
        .iter()
        .enumerate()
        .map(|(i, &(user, label))| {
            let mut values = Vec::with_capacity(1 + cfg.num_distractors);
            values.push(format!("u{user}"));
            values.extend(distractors.iter().map(|col| if col[i] { "a" } else { "b" }.to_owned()));
            RawRow { values, label, timestamp: Some(i as i64) }
        })
        .collect();
    let mut field_names = vec!["user".to_owned()];
    field_names.extend((1..=cfg.num_distractors).map(|d| format!("d{d}")));
    Ok(RawTable { label_name: "label".into(), timestamp_name: Some("ts".into()), field_names, rows })
}

/// Generates and encodes the task with its matching split.
pub fn dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    generate(cfg)?.into_dataset(SyntheticConfig::split())
}

/// Writes `table` as a headed CSV with columns `label, ts, <fields...>`.
pub fn write_csv<W: Write>(table: &RawTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![table.label_name.clone()];
    header.extend(table.timestamp_name.clone());
    header.extend(table.field_names.iter().cloned());
    out.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.label.to_string()];
        if table.timestamp_name.is_some() {
            rec.push(row.timestamp.map(|t| t.to_string()).unwrap_or_default());
        }
        rec.extend(row.values.iter().cloned());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
