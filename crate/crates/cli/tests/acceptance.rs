//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The desk-scale training comparison (criteria 5 and 6) dominates the run
//! time: three seeds, five block designs each, on a single thread.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rat_core::data::Record;
use rat_core::model::{AttentionStats, Example, ModelConfig, RatModel, Variant};
use rat_core::retrieval::{Eligibility, RetrievalIndex, RetrievalResult};
use rat_core::synthetic::{self, SyntheticConfig};
use rat_core::tensor::{Mask, Tensor};
use rat_core::training::{self, auc, logloss, AblationRow, Neighbors, TrainConfig};

const SEEDS: [u64; 3] = [42, 43, 44];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

fn report(name: &str, start: Instant, v: &Verdict) -> bool {
    let status = if v.pass { "PASS" } else { "FAIL" };
    println!("{status} criterion {name}: {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
    v.pass
}

fn main() {
    let single: [(&str, fn() -> Verdict); 4] = [
        ("1 (retrieval oracle equivalence)", retrieval_oracle),
        ("2 (leakage invariant)", leakage),
        ("3 (gradient correctness)", gradients),
        ("4 (complexity accounting)", complexity),
    ];
    let mut failed = 0;
    for (name, check) in single {
        let start = Instant::now();
        failed += usize::from(!report(name, start, &check()));
    }

    // 5 and 6 share their training runs
    let start = Instant::now();
    let (five, six) = variant_runs();
    failed += usize::from(!report("5 (variant ordering)", start, &five));
    failed += usize::from(!report("6 (synthetic learnability)", start, &six));

    let rest: [(&str, fn() -> Verdict); 4] = [
        ("7 (mask correctness)", mask_correctness),
        ("8 (neighbor permutation invariance)", permutation_invariance),
        ("9 (metric oracles)", metrics),
        ("10 (training determinism)", determinism),
    ];
    for (name, check) in rest {
        let start = Instant::now();
        failed += usize::from(!report(name, start, &check()));
    }
    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}

// ---------------------------------------------------------------------------
// 1. retrieval

fn random_pool(rng: &mut ChaCha8Rng, n: usize, fields: usize, vocab: u32) -> Vec<Record> {
    let mut ts = 0i64;
    (0..n)
        .map(|index| {
            ts += rng.random_range(0..3);
            let field_ids = (0..fields).map(|_| rng.random_range(0..=vocab)).collect();
            Record { field_ids, label: rng.random_range(0..2), timestamp: ts, index }
        })
        .collect()
}

/// Sorts every eligible candidate by score, then by recency. Document
/// frequencies are counted from the pool directly.
fn brute_force(pool: &[Record], df: &[HashMap<u32, usize>], q: &Record, k: usize, elig: Eligibility) -> Vec<(usize, f64)> {
    let n = pool.len() as f64;
    let mut scored: Vec<(f64, i64, usize)> = pool
        .iter()
        .filter(|c| elig == Eligibility::WholePool || c.order_key() < q.order_key())
        .map(|c| {
            let mut s = 0.0;
            for (f, (&a, &b)) in q.field_ids.iter().zip(&c.field_ids).enumerate() {
                if a != 0 && a == b {
                    let d = df[f][&a] as f64;
                    s += ((n - d + 0.5) / (d + 0.5)).ln();
                }
            }
            (s, c.timestamp, c.index)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2)));
    scored.into_iter().take(k).map(|(s, _, i)| (i, s)).collect()
}

fn agrees(got: &RetrievalResult, want: &[(usize, f64)], k: usize) -> bool {
    got.k() == k
        && got.num_real() == want.len()
        && want.iter().enumerate().all(|(slot, &(i, s))| {
            got.mask[slot] && got.neighbor_indices[slot] == i && (got.scores[slot] - s).abs() <= 1e-12
        })
        && got.mask[want.len()..].iter().all(|&m| !m)
}

fn retrieval_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut mismatches) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=500);
        let fields = rng.random_range(1..=6);
        let vocab = rng.random_range(1..=20);
        let pool = random_pool(&mut rng, n, fields, vocab);
        let index = RetrievalIndex::build(&pool).unwrap();
        let mut df = vec![HashMap::new(); fields];
        for r in &pool {
            for (f, &v) in r.field_ids.iter().enumerate() {
                *df[f].entry(v).or_insert(0) += 1;
            }
        }
        let queries: Vec<Record> = (0..30).map(|_| pool[rng.random_range(0..n)].clone()).collect();
        for k in [1, 5, 10] {
            for elig in [Eligibility::StrictlyEarlier, Eligibility::WholePool] {
                let batch = index.retrieve_batch(&queries, k, elig).unwrap();
                for (q, b) in queries.iter().zip(&batch) {
                    let single = index.retrieve(q, k, elig).unwrap();
                    let want = brute_force(&pool, &df, q, k, elig);
                    checked += 1;
                    if single != *b || !agrees(b, &want, k) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        mismatches == 0 && secs < 10.0,
        format!("{checked} queries over 100 pools, {mismatches} mismatches, {secs:.2}s (limit 10s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. leakage

fn leakage() -> Verdict {
    // every training retrieval of a full synthetic run
    let ds = synthetic::dataset(&task(SEEDS[0])).unwrap();
    let index = RetrievalIndex::build(ds.train()).unwrap();
    let nb = Neighbors::compute(&ds, &index, 5).unwrap();
    let mut real = 0;
    let mut bad = 0;
    for (q, r) in ds.train().iter().zip(&nb.train) {
        for (i, _) in r.neighbors() {
            real += 1;
            bad += usize::from(ds.records()[i].order_key() >= q.order_key());
        }
    }

    // 10k random queries against a random pool
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pool = random_pool(&mut rng, 500, 5, 8);
    let index = RetrievalIndex::build(&pool).unwrap();
    let last = pool.last().unwrap().timestamp;
    let queries: Vec<Record> = (0..10_000)
        .map(|_| Record {
            field_ids: (0..5).map(|_| rng.random_range(0..9)).collect(),
            label: 0,
            timestamp: rng.random_range(-1..=last + 1),
            index: rng.random_range(0..600),
        })
        .collect();
    let results = index.retrieve_batch(&queries, 5, Eligibility::StrictlyEarlier).unwrap();
    let mut random_real = 0;
    for (q, r) in queries.iter().zip(&results) {
        for (i, _) in r.neighbors() {
            random_real += 1;
            bad += usize::from(pool[i].order_key() >= q.order_key());
        }
    }
    Verdict::new(
        bad == 0,
        format!("{real} training neighbors + {random_real} neighbors of 10000 random queries, {bad} not strictly earlier"),
    )
}

// ---------------------------------------------------------------------------
// 3. gradients

fn max_gradient_error(model: &RatModel, ex: &[Example], labels: &[f64]) -> f64 {
    let (_, grads) = training::loss_and_grads(model, ex, labels).unwrap();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (id, grad) in grads.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe.params()[id].data()[i];
            probe.params_mut()[id].data_mut()[i] = orig + h;
            let up = training::batch_loss(&probe, ex, labels).unwrap();
            probe.params_mut()[id].data_mut()[i] = orig - h;
            let down = training::batch_loss(&probe, ex, labels).unwrap();
            probe.params_mut()[id].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let pool: [(&[u32], u8); 3] = [(&[1, 2], 1), (&[3, 1], 0), (&[2, 3], 1)];
    let ex = vec![
        Example { fields: &[1, 1], slots: vec![Some(pool[0]), Some(pool[1])] },
        Example { fields: &[2, 3], slots: vec![Some(pool[2]), None] },
        Example { fields: &[3, 2], slots: vec![Some(pool[1]), Some(pool[0])] },
    ];
    let labels = [1.0, 0.0, 1.0];
    let mut parts = Vec::new();
    let mut pass = true;
    for variant in [Variant::Cascade, Variant::JointModeling, Variant::CascadedEncoder, Variant::ParallelAttention] {
        let cfg = ModelConfig { k: 2, embed_dim: 4, num_blocks: 1, ..ModelConfig::new(vec![3, 3], variant) };
        let mut model = RatModel::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let err = max_gradient_error(&model, &ex, &labels);
        pass &= err <= 1e-4;
        parts.push(format!("{} {err:.1e}", variant.label()));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    Verdict::new(pass, format!("max relative error {} (limit 1e-4), {secs:.1}s (limit 60s)", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 4. complexity

fn complexity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<u32>> = (0..24).map(|_| (0..3).map(|_| rng.random_range(0..5)).collect()).collect();
    let ex: Vec<Example> = (0..4)
        .map(|i| Example {
            fields: &rows[i * 6],
            slots: (1..6).map(|j| (j + i < 8).then(|| (rows[i * 6 + j].as_slice(), (j % 2) as u8))).collect(),
        })
        .collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (variant, want) in [(Variant::Cascade, 240), (Variant::JointModeling, 576)] {
        let model = RatModel::new(ModelConfig::new(vec![4, 4, 4], variant), 1).unwrap();
        let got = model.count_attention_entries(&ex).unwrap();
        pass &= got == want && AttentionStats::closed_form(variant, 5, 3) == want;
        parts.push(format!("{} {got}/layer (expected {want})", variant.label()));
    }
    Verdict::new(pass, format!("K=5 F=3: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 5 and 6. training on the synthetic task

fn task(seed: u64) -> SyntheticConfig {
    SyntheticConfig { num_users: 40, num_distractors: 19, seed, ..Default::default() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn variant_runs() -> (Verdict, Verdict) {
    let mut rows: Vec<Vec<AblationRow>> = Vec::new();
    let mut intra = Vec::new();
    for seed in SEEDS {
        let ds = synthetic::dataset(&task(seed)).unwrap();
        let index = RetrievalIndex::build(ds.train()).unwrap();
        let cfg = TrainConfig { max_epochs: 5, seed, ..Default::default() };
        rows.push(training::ablate(&ds, &index, &cfg).unwrap());
        let out = training::train(&ds, &index, &TrainConfig { variant: Variant::IntraOnly, ..cfg }).unwrap();
        intra.push(out.test.auc);
    }
    let stat = |name: &str, f: fn(&AblationRow) -> f64| {
        median(rows.iter().map(|r| f(r.iter().find(|x| x.variant == name).unwrap())).collect())
    };
    let cascade_auc = stat("CASCADE", |r| r.auc);
    let mut pass5 = true;
    let mut aucs = Vec::new();
    for name in ["JM", "CE", "PA"] {
        let a = stat(name, |r| r.auc);
        pass5 &= cascade_auc >= a - 0.01;
        aucs.push(format!("{name} {a:.4}"));
    }
    let (t_cascade, t_jm) = (stat("CASCADE", |r| r.runtime_us), stat("JM", |r| r.runtime_us));
    let speedup = 1.0 - t_cascade / t_jm;
    pass5 &= speedup >= 0.10;
    let five = Verdict::new(
        pass5,
        format!(
            "median test AUC CASCADE {cascade_auc:.4} vs {}; forward {t_cascade:.0}us vs JM {t_jm:.0}us ({:.0}% faster, need 10%)",
            aucs.join(", "),
            100.0 * speedup
        ),
    );

    let cascade: Vec<f64> =
        rows.iter().map(|r| r.iter().find(|x| x.variant == "CASCADE").unwrap().auc).collect();
    let pass6 = cascade.iter().all(|&a| a >= 0.90) && intra.iter().all(|&a| a <= 0.60);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/");
    let six = Verdict::new(
        pass6,
        format!(
            "seeds {SEEDS:?}: CASCADE test AUC {} (need >= 0.90), intra-only {} (need <= 0.60)",
            fmt(&cascade),
            fmt(&intra)
        ),
    );
    (five, six)
}

// ---------------------------------------------------------------------------
// 7 and 8. masks and neighbor sets

const ALL: [Variant; 5] =
    [Variant::Cascade, Variant::JointModeling, Variant::CascadedEncoder, Variant::ParallelAttention, Variant::IntraOnly];

fn random_model(variant: Variant, seed: u64) -> RatModel {
    let mut model = RatModel::new(ModelConfig::new(vec![5, 5, 5], variant), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

/// A random input `[1, K+1, F+1, D]` at K=5, F=3, D=16 and its mask.
fn random_input(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let x = (0..6 * 4 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask = (0..6).map(|s| s == 0 || rng.random_bool(0.5)).collect();
    (x, mask)
}

fn predict(model: &RatModel, x: Vec<f64>, mask: Vec<bool>) -> f64 {
    let x = Tensor::new(vec![1, 6, 4, 16], x).unwrap();
    let mask = Mask::new(vec![1, 6], mask).unwrap();
    model.predict_inputs(&x, &mask).unwrap()[0]
}

fn mask_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut changed = 0;
    let mut padded = 0;
    for i in 0..1000 {
        let model = random_model(ALL[i % ALL.len()], 700 + (i % ALL.len()) as u64);
        let (x, mask) = random_input(&mut rng);
        let mut noisy = x.clone();
        for (s, &m) in mask.iter().enumerate() {
            if !m {
                padded += 1;
                for v in &mut noisy[s * 64..(s + 1) * 64] {
                    *v += rng.random_range(-100.0..100.0);
                }
            }
        }
        let a = predict(&model, x, mask.clone());
        let b = predict(&model, noisy, mask);
        changed += usize::from(a.to_bits() != b.to_bits());
    }
    Verdict::new(
        changed == 0,
        format!("1000 inputs over all variants, {padded} padded rows perturbed, {changed} predictions changed"),
    )
}

fn permutation_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let model = random_model(ALL[i % ALL.len()], 800 + (i % ALL.len()) as u64);
        let (x, mask) = random_input(&mut rng);
        let mut order: Vec<usize> = (1..6).collect();
        for j in (1..order.len()).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        let mut px = x[..64].to_vec();
        let mut pmask = vec![true];
        for &s in &order {
            px.extend_from_slice(&x[s * 64..(s + 1) * 64]);
            pmask.push(mask[s]);
        }
        let a = predict(&model, x, mask);
        let b = predict(&model, px, pmask);
        worst = worst.max((a - b).abs());
    }
    Verdict::new(worst <= 1e-9, format!("1000 inputs over all variants, max |change| {worst:.2e} (limit 1e-9)"))
}

// ---------------------------------------------------------------------------
// 9. metrics

fn pairwise_auc(preds: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &y) in preds.iter().zip(labels) {
        for (q, &z) in preds.iter().zip(labels) {
            if y == 1 && z == 0 {
                den += 1.0;
                num += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn metrics() -> Verdict {
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
    let examples = [
        close(logloss(&[0.5], &[1], 1e-7).unwrap(), 0.693147, 1e-6),
        close(logloss(&[1.0], &[1], 1e-7).unwrap(), 1e-7, 1e-12),
        close(logloss(&[0.9, 0.1], &[1, 0], 1e-7).unwrap(), 0.105361, 1e-6),
        auc(&[0.9, 0.1], &[1, 0]).unwrap() == 1.0,
        auc(&[0.5, 0.5], &[1, 0]).unwrap() == 0.5,
        auc(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap() == 0.5,
        auc(&[0.3, 0.4], &[1, 1]).is_err(),
    ];
    let passed = examples.iter().filter(|&&ok| ok).count();

    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..80);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = rng.random_range(1..20);
        let preds: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        worst = worst.max((auc(&preds, &labels).unwrap() - pairwise_auc(&preds, &labels)).abs());
    }
    Verdict::new(
        passed == examples.len() && worst <= 1e-12,
        format!("{passed}/{} worked examples, 1000 random AUC cases max error {worst:.1e} (limit 1e-12)", examples.len()),
    )
}

// ---------------------------------------------------------------------------
// 10. determinism of the train command

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let rat = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_rat")).args(args).output().unwrap();
        assert!(out.status.success(), "rat {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let p = |path: &Path| path.to_str().unwrap().to_owned();
    rat(&["synth", "--out", &p(dir.path()), "--users", "8", "--distractors", "4"]);
    let config = p(&dir.path().join("rat.toml"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    rat(&["train", "--config", &config, "--out", &p(&a), "--seed", "42"]);
    rat(&["train", "--config", &config, "--out", &p(&b), "--seed", "42"]);
    let same = ["model.ratm", "train_log.jsonl"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let bytes = std::fs::metadata(a.join("model.ratm")).unwrap().len();
    Verdict::new(same, format!("two train runs, seed 42: checkpoints ({bytes} bytes) and logs identical: {same}"))
}
