//! Field-match BM25 retrieval over a reference pool.
//!
//! The relevance of a candidate `c` to a query `q` is
//!
//! ```text
//! s(q, c) = sum_f  ln((N - n_f + 0.5) / (n_f + 0.5)) * [q_f == c_f]
//! ```
//!
//! where `N` is the pool size and `n_f` the number of pool records holding the
//! query's value in field `f`. Missing values (id 0) are never indexed and
//! never match. Weights are not clamped, so very common values score negative.
//!
//! Candidates are ranked by score, then by recency: larger `(timestamp, index)`
//! wins ties. Every eligible candidate takes part in the ranking, including
//! those with a zero or negative score.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::data::{Record, MISSING_ID};
use crate::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"RATI";
const INDEX_VERSION: u16 = 1;

/// Which pool records a query may retrieve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eligibility {
    /// Only records whose `(timestamp, index)` is below the query's. Used for training queries.
    StrictlyEarlier,
    /// Every pool record. Used for validation and test queries against the training pool.
    WholePool,
}

/// Inverted index over a reference pool.
///
/// Postings hold pool positions; pool records are kept in ascending
/// `(timestamp, index)` order so position order is recency order.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    num_fields: usize,
    record_indices: Vec<usize>,
    timestamps: Vec<i64>,
    /// `postings[f][v]` lists the pool positions whose field `f` holds value `v`.
    postings: Vec<Vec<Vec<u32>>>,
}

/// Top-K neighbors of one query, padded to exactly K slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Record indices; meaningless where `mask` is false.
    pub neighbor_indices: Vec<usize>,
    /// Scores; `-inf` on padding so the sequence stays non-increasing.
    pub scores: Vec<f64>,
    /// `true` for a real neighbor, `false` for padding.
    pub mask: Vec<bool>,
}

impl RetrievalResult {
    fn padded(mut hits: Vec<(f64, u32)>, k: usize, index: &RetrievalIndex) -> Self {
        hits.truncate(k);
        let mut out = RetrievalResult {
            neighbor_indices: Vec::with_capacity(k),
            scores: Vec::with_capacity(k),
            mask: Vec::with_capacity(k),
        };
        for &(score, pos) in &hits {
            out.neighbor_indices.push(index.record_indices[pos as usize]);
            out.scores.push(score);
            out.mask.push(true);
        }
        for _ in hits.len()..k {
            out.neighbor_indices.push(0);
            out.scores.push(f64::NEG_INFINITY);
            out.mask.push(false);
        }
        out
    }

    pub fn k(&self) -> usize {
        self.mask.len()
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(record index, score)` of the real neighbors, best first.
    pub fn neighbors(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.neighbor_indices
            .iter()
            .zip(&self.scores)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|((&i, &s), _)| (i, s))
    }
}

impl RetrievalIndex {
    /// Indexes `pool`, which must be sorted by `(timestamp, index)` with distinct indices.
    pub fn build(pool: &[Record]) -> Result<Self> {
        let first = pool.first().ok_or_else(|| Error::invalid("cannot index an empty pool"))?;
        if pool.len() > u32::MAX as usize {
            return Err(Error::invalid("pool too large"));
        }
        let num_fields = first.field_ids.len();
        let mut postings: Vec<Vec<Vec<u32>>> = vec![Vec::new(); num_fields];
        for (pos, rec) in pool.iter().enumerate() {
            if rec.field_ids.len() != num_fields {
                return Err(Error::data(format!(
                    "pool record {} has {} fields, expected {num_fields}",
                    rec.index,
                    rec.field_ids.len()
                )));
            }
            if pos > 0 && pool[pos - 1].order_key() >= rec.order_key() {
                return Err(Error::data("pool must be sorted by (timestamp, index) without duplicates"));
            }
            for (field, &id) in postings.iter_mut().zip(&rec.field_ids) {
                if id == MISSING_ID {
                    continue;
                }
                let id = id as usize;
                if field.len() <= id {
                    field.resize(id + 1, Vec::new());
                }
                field[id].push(pos as u32);
            }
        }
        Ok(RetrievalIndex {
            num_fields,
            record_indices: pool.iter().map(|r| r.index).collect(),
            timestamps: pool.iter().map(|r| r.timestamp).collect(),
            postings,
        })
    }

    /// `N_P`.
    pub fn pool_size(&self) -> usize {
        self.record_indices.len()
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    /// Record indices of the pool, in pool order.
    pub fn pool_indices(&self) -> &[usize] {
        &self.record_indices
    }

    /// Number of distinct indexed `(field, value)` terms.
    pub fn num_terms(&self) -> usize {
        self.postings.iter().flatten().filter(|p| !p.is_empty()).count()
    }

    /// `N_P(v)` for value `v` of field `field`; 0 for missing or unseen values.
    pub fn doc_freq(&self, field: usize, value: u32) -> usize {
        self.posting_positions(field, value).len()
    }

    /// Record indices holding `value` in `field`, ascending.
    pub fn postings(&self, field: usize, value: u32) -> Vec<usize> {
        self.posting_positions(field, value)
            .iter()
            .map(|&p| self.record_indices[p as usize])
            .collect()
    }

    fn posting_positions(&self, field: usize, value: u32) -> &[u32] {
        if value == MISSING_ID {
            return &[];
        }
        self.postings
            .get(field)
            .and_then(|f| f.get(value as usize))
            .map_or(&[], Vec::as_slice)
    }

    /// IDF-style weight of matching `value` in `field`.
    pub fn term_weight(&self, field: usize, value: u32) -> f64 {
        let n = self.pool_size() as f64;
        let df = self.doc_freq(field, value) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores one candidate directly, field by field.
    pub fn bm25_score(&self, query: &Record, candidate: &Record) -> f64 {
        let mut score = 0.0;
        for (f, (&q, &c)) in query.field_ids.iter().zip(&candidate.field_ids).enumerate() {
            if q != MISSING_ID && q == c {
                score += self.term_weight(f, q);
            }
        }
        score
    }

    fn check_query(&self, query: &Record, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if query.field_ids.len() != self.num_fields {
            return Err(Error::invalid(format!(
                "query has {} fields, index has {}",
                query.field_ids.len(),
                self.num_fields
            )));
        }
        Ok(())
    }

    /// Top-`k` neighbors of `query`.
    pub fn retrieve(&self, query: &Record, k: usize, eligibility: Eligibility) -> Result<RetrievalResult> {
        self.check_query(query, k)?;
        let mut scratch = Scratch::new(self.pool_size());
        Ok(self.retrieve_with(&mut scratch, query, k, eligibility, true))
    }

    /// [`retrieve`](Self::retrieve) for many queries. Output order follows `queries`.
    pub fn retrieve_batch(
        &self,
        queries: &[Record],
        k: usize,
        eligibility: Eligibility,
    ) -> Result<Vec<RetrievalResult>> {
        self.batch(queries, k, eligibility, true)
    }

    /// Like [`retrieve_batch`](Self::retrieve_batch), but only candidates
    /// sharing at least one field value with the query are ranked; the
    /// remaining slots are padding. Meant for inspecting relevance by hand.
    pub fn retrieve_batch_matching(
        &self,
        queries: &[Record],
        k: usize,
        eligibility: Eligibility,
    ) -> Result<Vec<RetrievalResult>> {
        self.batch(queries, k, eligibility, false)
    }

    fn batch(&self, queries: &[Record], k: usize, eligibility: Eligibility, fill: bool) -> Result<Vec<RetrievalResult>> {
        for q in queries {
            self.check_query(q, k)?;
        }
        Ok(queries
            .par_iter()
            .map_init(
                || Scratch::new(self.pool_size()),
                |scratch, q| self.retrieve_with(scratch, q, k, eligibility, fill),
            )
            .collect())
    }

    fn retrieve_with(
        &self,
        scratch: &mut Scratch,
        query: &Record,
        k: usize,
        eligibility: Eligibility,
        fill: bool,
    ) -> RetrievalResult {
        let limit = match eligibility {
            Eligibility::WholePool => self.pool_size(),
            Eligibility::StrictlyEarlier => self.strictly_earlier_len(query),
        } as u32;
        scratch.begin();

        // Accumulate in field order so sums match bm25_score bit for bit.
        for (f, &q) in query.field_ids.iter().enumerate() {
            let postings = self.posting_positions(f, q);
            if postings.is_empty() {
                continue;
            }
            let w = self.term_weight(f, q);
            let end = postings.partition_point(|&p| p < limit);
            for &pos in &postings[..end] {
                scratch.add(pos, w);
            }
        }

        let mut hits: Vec<(f64, u32)> = scratch.touched.iter().map(|&p| (scratch.score[p as usize], p)).collect();
        // Untouched candidates all score 0; only the k most recent can make the cut.
        let mut zeros = 0;
        let mut pos = if fill { limit } else { 0 };
        while zeros < k && pos > 0 {
            pos -= 1;
            if !scratch.is_touched(pos) {
                hits.push((0.0, pos));
                zeros += 1;
            }
        }

        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(rank_order);
        RetrievalResult::padded(hits, k, self)
    }

    fn strictly_earlier_len(&self, query: &Record) -> usize {
        let key = query.order_key();
        let (mut lo, mut hi) = (0, self.pool_size());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if (self.timestamps[mid], self.record_indices[mid]) < key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, INDEX_MAGIC, INDEX_VERSION)?;
        w.write_u64::<LittleEndian>(self.pool_size() as u64)?;
        w.write_u32::<LittleEndian>(self.num_fields as u32)?;
        for (&idx, &ts) in self.record_indices.iter().zip(&self.timestamps) {
            w.write_u64::<LittleEndian>(idx as u64)?;
            w.write_i64::<LittleEndian>(ts)?;
        }
        for field in &self.postings {
            let terms: Vec<(usize, &Vec<u32>)> =
                field.iter().enumerate().filter(|(_, p)| !p.is_empty()).collect();
            w.write_u32::<LittleEndian>(terms.len() as u32)?;
            for (value, positions) in terms {
                w.write_u32::<LittleEndian>(value as u32)?;
                w.write_u32::<LittleEndian>(positions.len() as u32)?;
                for &p in positions {
                    w.write_u64::<LittleEndian>(self.record_indices[p as usize] as u64)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, INDEX_MAGIC, INDEX_VERSION)?;
        let n = binio::read_u64(r)? as usize;
        if n == 0 || n > u32::MAX as usize {
            return Err(Error::format(format!("invalid pool size {n}")));
        }
        let num_fields = binio::read_u32(r)? as usize;
        let mut record_indices = Vec::with_capacity(n.min(1 << 24));
        let mut timestamps = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            record_indices.push(binio::read_u64(r)? as usize);
            timestamps.push(binio::read_i64(r)?);
        }
        for i in 1..n {
            if (timestamps[i - 1], record_indices[i - 1]) >= (timestamps[i], record_indices[i]) {
                return Err(Error::format("pool records are not in chronological order"));
            }
        }
        let mut postings = Vec::with_capacity(num_fields);
        for _ in 0..num_fields {
            let num_terms = binio::read_u32(r)? as usize;
            let mut field: Vec<Vec<u32>> = Vec::new();
            let mut last_value = 0;
            for _ in 0..num_terms {
                let value = binio::read_u32(r)? as usize;
                if value <= last_value {
                    return Err(Error::format("term values must be ascending and non-zero"));
                }
                last_value = value;
                let df = binio::read_u32(r)? as usize;
                let mut positions = Vec::with_capacity(df.min(n));
                for _ in 0..df {
                    let idx = binio::read_u64(r)? as usize;
                    let pos = record_indices
                        .binary_search(&idx)
                        .map_err(|_| Error::format(format!("posting {idx} is not a pool record")))?;
                    if positions.last().is_some_and(|&last| last >= pos as u32) {
                        return Err(Error::format("postings must be strictly ascending"));
                    }
                    positions.push(pos as u32);
                }
                field.resize(value + 1, Vec::new());
                field[value] = positions;
            }
            postings.push(field);
        }
        binio::expect_eof(r)?;
        Ok(RetrievalIndex { num_fields, record_indices, timestamps, postings })
    }
}

/// Best first: higher score, then more recent pool position.
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(b.1.cmp(&a.1))
}

/// Per-worker dense accumulator, reset in O(touched) between queries.
struct Scratch {
    score: Vec<f64>,
    stamp: Vec<u32>,
    epoch: u32,
    touched: Vec<u32>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch { score: vec![0.0; n], stamp: vec![0; n], epoch: 0, touched: Vec::new() }
    }

    fn begin(&mut self) {
        self.touched.clear();
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.fill(0);
            self.epoch = 1;
        }
    }

    fn is_touched(&self, pos: u32) -> bool {
        self.stamp[pos as usize] == self.epoch
    }

    fn add(&mut self, pos: u32, w: f64) {
        let p = pos as usize;
        if self.stamp[p] != self.epoch {
            self.stamp[p] = self.epoch;
            self.score[p] = 0.0;
            self.touched.push(pos);
        }
        self.score[p] += w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: usize, timestamp: i64, ids: &[u32]) -> Record {
        Record { field_ids: ids.to_vec(), label: 0, timestamp, index }
    }

    fn pool_abc() -> Vec<Record> {
        // field 0 values: a=1, a=1, b=2, c=3
        vec![rec(0, 0, &[1, 1]), rec(1, 1, &[1, 2]), rec(2, 2, &[2, 2]), rec(3, 3, &[3, 2])]
    }

    #[test]
    fn doc_freq_and_postings() {
        let idx = RetrievalIndex::build(&pool_abc()).unwrap();
        assert_eq!(idx.pool_size(), 4);
        assert_eq!(idx.doc_freq(0, 1), 2);
        assert_eq!(idx.postings(0, 1), vec![0, 1]);
        assert_eq!(idx.doc_freq(1, 2), 3);
        assert_eq!(idx.doc_freq(0, 9), 0);
    }

    #[test]
    fn missing_values_are_not_indexed() {
        let pool = vec![rec(0, 0, &[1, 0]), rec(1, 1, &[1, 2])];
        let idx = RetrievalIndex::build(&pool).unwrap();
        assert_eq!(idx.postings(1, 2), vec![1]);
        assert_eq!(idx.doc_freq(1, 0), 0);
        let q = rec(5, 5, &[0, 0]);
        assert_eq!(idx.bm25_score(&q, &pool[0]), 0.0);
    }

    #[test]
    fn single_record_pool() {
        let idx = RetrievalIndex::build(&[rec(0, 0, &[4, 7])]).unwrap();
        assert_eq!(idx.pool_size(), 1);
        assert_eq!(idx.doc_freq(0, 4), 1);
        assert_eq!(idx.doc_freq(1, 7), 1);
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(RetrievalIndex::build(&[]).is_err());
    }

    #[test]
    fn score_examples() {
        let idx = RetrievalIndex::build(&pool_abc()).unwrap();
        // no match
        assert_eq!(idx.bm25_score(&rec(9, 9, &[3, 1]), &pool_abc()[1]), 0.0);
        // value b occurs once among 4: ln(3.5 / 1.5)
        let s = idx.bm25_score(&rec(9, 9, &[2, 9]), &pool_abc()[2]);
        assert!((s - (7.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((s - 0.84730).abs() < 1e-5);
        // field 1 value 2 occurs 3 times: ln(1.5 / 3.5), kept negative
        let s = idx.bm25_score(&rec(9, 9, &[9, 2]), &pool_abc()[3]);
        assert!((s + 0.84730).abs() < 1e-5);
    }

    #[test]
    fn first_query_gets_only_padding() {
        let pool = pool_abc();
        let idx = RetrievalIndex::build(&pool).unwrap();
        let r = idx.retrieve(&pool[0], 3, Eligibility::StrictlyEarlier).unwrap();
        assert_eq!(r.mask, vec![false; 3]);
        assert_eq!(r.k(), 3);
    }

    #[test]
    fn ties_prefer_recency() {
        // candidates at ts 10 and 20 share the same positive-weight match; later ones match nothing
        let pool = vec![
            rec(0, 10, &[1, 5]),
            rec(1, 20, &[1, 6]),
            rec(2, 30, &[2, 7]),
            rec(3, 40, &[3, 8]),
            rec(4, 42, &[4, 10]),
            rec(5, 44, &[5, 11]),
        ];
        let idx = RetrievalIndex::build(&pool).unwrap();
        let q = rec(6, 50, &[1, 9]);
        let r = idx.retrieve(&q, 2, Eligibility::StrictlyEarlier).unwrap();
        let ts: Vec<i64> = r.neighbors().map(|(i, _)| pool[i].timestamp).collect();
        assert_eq!(ts, vec![20, 10]);
        assert_eq!(r.scores[0], r.scores[1]);
    }

    #[test]
    fn zero_score_candidates_fill_remaining_slots() {
        let pool = pool_abc();
        let idx = RetrievalIndex::build(&pool).unwrap();
        let q = rec(9, 9, &[3, 9]);
        let r = idx.retrieve(&q, 3, Eligibility::WholePool).unwrap();
        let got: Vec<usize> = r.neighbors().map(|(i, _)| i).collect();
        // record 3 matches; then most recent zero scorers
        assert_eq!(got, vec![3, 2, 1]);
        assert_eq!(&r.scores[1..], &[0.0, 0.0]);
    }

    #[test]
    fn negative_scores_rank_below_zero() {
        let pool = pool_abc();
        let idx = RetrievalIndex::build(&pool).unwrap();
        // field 1 value 2 has a negative weight
        let q = rec(9, 9, &[9, 2]);
        let r = idx.retrieve(&q, 4, Eligibility::WholePool).unwrap();
        let got: Vec<usize> = r.neighbors().map(|(i, _)| i).collect();
        assert_eq!(got, vec![0, 3, 2, 1]);
    }

    #[test]
    fn k_zero_is_an_error() {
        let pool = pool_abc();
        let idx = RetrievalIndex::build(&pool).unwrap();
        assert!(idx.retrieve(&pool[1], 0, Eligibility::WholePool).is_err());
        assert!(idx.retrieve_batch(&pool, 0, Eligibility::WholePool).is_err());
    }

    #[test]
    fn empty_batch() {
        let idx = RetrievalIndex::build(&pool_abc()).unwrap();
        assert!(idx.retrieve_batch(&[], 5, Eligibility::WholePool).unwrap().is_empty());
    }

    #[test]
    fn matching_only_pads_instead_of_filling() {
        let pool = pool_abc();
        let idx = RetrievalIndex::build(&pool).unwrap();
        let mut q = pool[0].clone();
        q.field_ids = vec![9; q.field_ids.len()];
        let r = idx.retrieve_batch_matching(std::slice::from_ref(&q), 3, Eligibility::WholePool).unwrap();
        assert_eq!(r[0].num_real(), 0);
        let filled = idx.retrieve(&q, 3, Eligibility::WholePool).unwrap();
        assert_eq!(filled.num_real(), 3);
        // a real match is returned even when it scores below zero
        let r = idx.retrieve_batch_matching(&pool[..1], 4, Eligibility::WholePool).unwrap();
        assert!(r[0].neighbors().all(|(i, _)| pool[i].field_ids.iter().zip(&pool[0].field_ids).any(|(a, b)| a == b && *a != 0)));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let pool = pool_abc();
        let idx = RetrievalIndex::build(&pool).unwrap();
        let mut bytes = Vec::new();
        idx.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RATI");
        let back = RetrievalIndex::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert!(matches!(
            RetrievalIndex::read_from(&mut &bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(RetrievalIndex::read_from(&mut v2.as_slice()), Err(Error::Format(_))));
    }
}
