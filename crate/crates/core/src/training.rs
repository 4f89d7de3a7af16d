//! Training loop, metrics, evaluation and the variant ablation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::model::{Activation, Example, ModelConfig, RatModel, Variant};
use crate::retrieval::{Eligibility, RetrievalIndex, RetrievalResult};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

/// Examples per gradient chunk. Chunks are reduced in a fixed order, so
/// results do not depend on how many threads computed them.
const GRAD_CHUNK: usize = 32;
const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub activation: Activation,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation AUC gain before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub logloss_clip_eps: f64,
    /// Record wall-clock milliseconds in the training log. Off by default
    /// because it makes logs differ between identical runs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 5,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 4,
            variant: Variant::Cascade,
            activation: Activation::Gelu,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 10,
            early_stop_patience: 2,
            seed: 42,
            logloss_clip_eps: 1e-7,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::invalid("learning_rate and adam_eps must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.logloss_clip_eps > 0.0 && self.logloss_clip_eps < 0.5) {
            return Err(Error::invalid("logloss_clip_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            vocab_sizes,
            k: self.k,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            variant: self.variant,
            activation: self.activation,
        }
    }
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn logloss(preds: &[f64], labels: &[u8], clip_eps: f64) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("logloss of an empty set"));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(clip_eps, 1.0 - clip_eps);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Area under the ROC curve from average ranks; tied predictions count half.
pub fn auc(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::data(format!("AUC needs both classes, got {pos} positive and {neg} negative")));
    }
    if preds.iter().any(|p| p.is_nan()) {
        return Err(Error::Numeric("NaN prediction".into()));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    // sum of 2 * rank over positives, kept in integers so ties are exact
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean (i + j + 2) / 2
        let twice_mean = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mean * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match parameters"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Retrieved neighbors for every record of a dataset, computed once.
///
/// Training queries only see strictly earlier training records; validation
/// and test queries see the whole training pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub train: Vec<RetrievalResult>,
    pub valid: Vec<RetrievalResult>,
    pub test: Vec<RetrievalResult>,
}

impl Neighbors {
    pub fn compute(ds: &Dataset, index: &RetrievalIndex, k: usize) -> Result<Self> {
        if index.pool_size() != ds.train().len() || index.pool_indices() != (0..ds.train().len()).collect::<Vec<_>>() {
            return Err(Error::invalid("retrieval index was not built over this dataset's training split"));
        }
        let n = Neighbors {
            train: index.retrieve_batch(ds.train(), k, Eligibility::StrictlyEarlier)?,
            valid: index.retrieve_batch(ds.valid(), k, Eligibility::WholePool)?,
            test: index.retrieve_batch(ds.test(), k, Eligibility::WholePool)?,
        };
        n.check_no_leakage(ds)?;
        Ok(n)
    }

    pub fn k(&self) -> usize {
        self.train.first().map_or(0, RetrievalResult::k)
    }

    /// Fails if any training query sees a neighbor that is not strictly earlier.
    pub fn check_no_leakage(&self, ds: &Dataset) -> Result<()> {
        let records = ds.records();
        for (q, r) in ds.train().iter().zip(&self.train) {
            for (idx, _) in r.neighbors() {
                if records[idx].order_key() >= q.order_key() {
                    return Err(Error::data(format!("record {} retrieved later record {idx}", q.index)));
                }
            }
        }
        Ok(())
    }
}

fn examples<'a>(records: &'a [Record], neighbors: &[RetrievalResult], pool: &'a [Record]) -> Result<Vec<Example<'a>>> {
    if records.len() != neighbors.len() {
        return Err(Error::invalid(format!("{} records vs {} neighbor lists", records.len(), neighbors.len())));
    }
    records.iter().zip(neighbors).map(|(r, n)| Example::from_retrieval(r, n, pool)).collect()
}

/// Mean logloss of a batch and its gradient for every parameter.
///
/// The batch is cut into fixed chunks that may run in parallel; their
/// gradients are summed in chunk order.
pub fn loss_and_grads(model: &RatModel, batch: &[Example], labels: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    if batch.len() != labels.len() || batch.is_empty() {
        return Err(Error::invalid(format!("{} examples vs {} labels", batch.len(), labels.len())));
    }
    let total = batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .zip(labels.par_chunks(GRAD_CHUNK))
        .map(|(ex, y)| {
            let mut g = Graph::new(model.params());
            let (x, mask) = model.embed(&mut g, ex)?;
            let z = model.forward(&mut g, x, &mask, None)?;
            let l = g.bce_with_logits(z, y)?;
            let l = g.scale(l, ex.len() as f64 / total);
            g.backward(l)?;
            let grads = (0..model.params().len()).map(|id| g.param_grad(id)).collect();
            Ok((g.value(l).item()?, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for part in parts {
        let (l, gs) = part?;
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok((loss, grads))
}

/// Mean logloss of a batch without gradients.
pub fn batch_loss(model: &RatModel, batch: &[Example], labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new(model.params());
    let (x, mask) = model.embed(&mut g, batch)?;
    let z = model.forward(&mut g, x, &mask, None)?;
    let l = g.bce_with_logits(z, labels)?;
    g.value(l).item()
}

/// Click probabilities for many examples, computed in parallel chunks.
pub fn predict_all(model: &RatModel, examples: &[Example]) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = examples.par_chunks(PREDICT_CHUNK).map(|c| model.predict(c)).collect();
    let mut out = Vec::with_capacity(examples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Epoch {
        epoch: usize,
        step: u64,
        train_logloss: f64,
        valid_auc: f64,
        valid_logloss: f64,
        wall_ms: Option<u64>,
    },
    Final {
        best_epoch: usize,
        best_valid_auc: f64,
        test_auc: f64,
        test_logloss: f64,
        seed: u64,
        wall_ms: Option<u64>,
    },
}

/// Writes `log` as JSON lines.
pub fn write_log<W: Write>(log: &[LogRecord], mut w: W) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUC.
    pub model: RatModel,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    pub test: EvalReport,
}

/// Builds the neighbor cache and trains.
pub fn train(ds: &Dataset, index: &RetrievalIndex, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let neighbors = Neighbors::compute(ds, index, cfg.k)?;
    train_with_neighbors(ds, &neighbors, cfg)
}

/// Trains with precomputed neighbors; deterministic for a given seed.
pub fn train_with_neighbors(ds: &Dataset, neighbors: &Neighbors, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if neighbors.k() != cfg.k {
        return Err(Error::invalid(format!("neighbors were retrieved with k={}, config has k={}", neighbors.k(), cfg.k)));
    }
    neighbors.check_no_leakage(ds)?;
    let start = Instant::now();
    let wall = |cfg: &TrainConfig| cfg.log_wall_time.then(|| start.elapsed().as_millis() as u64);

    let pool = ds.records();
    let train_ex = examples(ds.train(), &neighbors.train, pool)?;
    let train_y: Vec<f64> = ds.train().iter().map(|r| f64::from(r.label)).collect();
    let valid_ex = examples(ds.valid(), &neighbors.valid, pool)?;
    let valid_y: Vec<u8> = ds.valid().iter().map(|r| r.label).collect();

    let mut model = RatModel::new(cfg.model_config(ds.vocab_sizes()), cfg.seed)?;
    let mut adam = Adam::new(model.params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let ex: Vec<Example> = batch.iter().map(|&i| train_ex[i].clone()).collect();
            let y: Vec<f64> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grads) = loss_and_grads(&model, &ex, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss} at step {}", adam.steps() + 1)));
            }
            loss_sum += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grads)?;
        }

        let preds = predict_all(&model, &valid_ex)?;
        let valid_auc = auc(&preds, &valid_y)?;
        let valid_logloss = logloss(&preds, &valid_y, cfg.logloss_clip_eps)?;
        log.push(LogRecord::Epoch {
            epoch,
            step: adam.steps(),
            train_logloss: loss_sum / order.len() as f64,
            valid_auc,
            valid_logloss,
            wall_ms: wall(cfg),
        });
        if best.as_ref().is_none_or(|(_, a, _)| valid_auc > *a) {
            best = Some((epoch, valid_auc, model.params().to_vec()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let (best_epoch, best_valid_auc, params) = best.expect("at least one epoch ran");
    for (dst, src) in model.params_mut().iter_mut().zip(params) {
        *dst = src;
    }
    let test = evaluate(&model, ds, Split::Test, neighbors, cfg, &[], None)?;
    log.push(LogRecord::Final {
        best_epoch,
        best_valid_auc,
        test_auc: test.auc,
        test_logloss: test.logloss,
        seed: cfg.seed,
        wall_ms: wall(cfg),
    });
    Ok(TrainOutcome { model, log, best_epoch, best_valid_auc, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (expected train, valid or test)"))),
        }
    }
}

/// A named subset of an evaluated slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    /// Every record.
    All,
    /// Records of the given percentage of least frequent users.
    Tail(u32),
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::All => f.write_str("all"),
            Segment::Tail(q) => write!(f, "tail{q}"),
        }
    }
}

impl FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Segment::All);
        }
        let q = s
            .strip_prefix("tail")
            .and_then(|q| q.parse::<u32>().ok())
            .filter(|q| (1..=100).contains(q))
            .ok_or_else(|| Error::invalid(format!("bad segment {s:?} (expected all or tail1..tail100)")))?;
        Ok(Segment::Tail(q))
    }
}

/// Parses a comma-separated segment list such as `tail10,tail20`.
pub fn parse_segments(s: &str) -> Result<Vec<Segment>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub n: usize,
    /// `None` when the segment holds a single class.
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub segments: BTreeMap<String, SegmentReport>,
}

/// Metrics for `preds` against `labels`, plus one entry per named subset
/// given as record positions into the slice.
pub fn report(
    preds: &[f64],
    labels: &[u8],
    clip_eps: f64,
    segments: &[(String, Vec<usize>)],
) -> Result<EvalReport> {
    let mut out = EvalReport {
        auc: auc(preds, labels)?,
        logloss: logloss(preds, labels, clip_eps)?,
        n: preds.len(),
        segments: BTreeMap::new(),
    };
    for (name, members) in segments {
        let p: Vec<f64> = members.iter().map(|&i| preds[i]).collect();
        let y: Vec<u8> = members.iter().map(|&i| labels[i]).collect();
        let seg = SegmentReport { n: p.len(), auc: auc(&p, &y).ok(), logloss: logloss(&p, &y, clip_eps).ok() };
        out.segments.insert(name.clone(), seg);
    }
    Ok(out)
}

/// Positions in `records` of each requested segment.
///
/// Users are the ids of field `user_field`; they are ranked by how often they
/// appear in `train` (fewest first, ties by id), and `tail q` takes the
/// records of the `ceil(q% * users)` lowest-ranked users. Users seen only in
/// the evaluated slice count zero training records.
pub fn segment_members(
    train: &[Record],
    records: &[Record],
    user_field: usize,
    segments: &[Segment],
) -> Result<Vec<(String, Vec<usize>)>> {
    let user = |r: &Record| {
        r.field_ids
            .get(user_field)
            .copied()
            .ok_or_else(|| Error::invalid(format!("user field {user_field} out of range")))
    };
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for r in train {
        *counts.entry(user(r)?).or_default() += 1;
    }
    for r in records {
        counts.entry(user(r)?).or_default();
    }
    let mut ranked: Vec<(usize, u32)> = counts.iter().map(|(&u, &c)| (c, u)).collect();
    ranked.sort_unstable();

    let mut out = Vec::with_capacity(segments.len());
    for &seg in segments {
        let members = match seg {
            Segment::All => (0..records.len()).collect(),
            Segment::Tail(q) => {
                let take = (ranked.len() * q as usize).div_ceil(100);
                let tail: std::collections::HashSet<u32> = ranked[..take].iter().map(|&(_, u)| u).collect();
                let mut m = Vec::new();
                for (i, r) in records.iter().enumerate() {
                    if tail.contains(&user(r)?) {
                        m.push(i);
                    }
                }
                m
            }
        };
        out.push((seg.to_string(), members));
    }
    Ok(out)
}

/// Evaluates `model` on one split. Segments need `user_field`.
pub fn evaluate(
    model: &RatModel,
    ds: &Dataset,
    split: Split,
    neighbors: &Neighbors,
    cfg: &TrainConfig,
    segments: &[Segment],
    user_field: Option<usize>,
) -> Result<EvalReport> {
    let (records, nb) = match split {
        Split::Train => (ds.train(), &neighbors.train),
        Split::Valid => (ds.valid(), &neighbors.valid),
        Split::Test => (ds.test(), &neighbors.test),
    };
    let ex = examples(records, nb, ds.records())?;
    let preds = predict_all(model, &ex)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let members = if segments.is_empty() {
        Vec::new()
    } else {
        let field = user_field.ok_or_else(|| Error::invalid("segments need a user field"))?;
        segment_members(ds.train(), records, field, segments)?
    };
    report(&preds, &labels, cfg.logloss_clip_eps, &members)
}

/// Timing rounds per variant in [`ablate`]; the median is reported.
const TIMING_ROUNDS: usize = 5;

/// Median-of-repeats forward time per example, in microseconds, measured
/// on one thread over `examples` in batches of `batch`.
pub fn forward_time_us(model: &RatModel, examples: &[Example], batch: usize, repeats: usize) -> Result<f64> {
    if examples.is_empty() || batch == 0 || repeats == 0 {
        return Err(Error::invalid("timing needs examples, a batch size and repeats"));
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for chunk in examples.chunks(batch) {
            std::hint::black_box(model.predict(chunk)?);
        }
        times.push(start.elapsed().as_secs_f64() * 1e6 / examples.len() as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub auc: f64,
    pub logloss: f64,
    pub params: usize,
    pub runtime_us: f64,
}

/// Trains the four block designs with the same data and seed; rows come in
/// the order JM, CE, PA, CASCADE.
pub fn ablate(ds: &Dataset, index: &RetrievalIndex, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let neighbors = Neighbors::compute(ds, index, cfg.k)?;
    let test_ex = examples(ds.test(), &neighbors.test, ds.records())?;
    let mut trained = Vec::with_capacity(Variant::ABLATION.len());
    for variant in Variant::ABLATION {
        let cfg = TrainConfig { variant, ..cfg.clone() };
        trained.push((variant, train_with_neighbors(ds, &neighbors, &cfg)?));
    }
    // Timing rounds alternate between the models so that drift in machine
    // load hits every variant alike.
    let mut times = vec![Vec::with_capacity(TIMING_ROUNDS); trained.len()];
    for _ in 0..TIMING_ROUNDS {
        for ((_, out), t) in trained.iter().zip(&mut times) {
            t.push(forward_time_us(&out.model, &test_ex, PREDICT_CHUNK, 1)?);
        }
    }
    Ok(trained
        .into_iter()
        .zip(times)
        .map(|((variant, out), mut t)| {
            t.sort_by(f64::total_cmp);
            AblationRow {
                variant: variant.label().to_owned(),
                auc: out.test.auc,
                logloss: out.test.logloss,
                params: out.model.num_params(),
                runtime_us: t[t.len() / 2],
            }
        })
        .collect())
}

/// Writes the ablation table as CSV with header `variant,auc,logloss,params,runtime_us`.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
