//! The retrieval-augmented transformer.
//!
//! One example is a `(K+1) x (F+1)` grid of tokens: row 0 is the target,
//! rows `1..=K` its retrieved neighbors, column 0 a label token and columns
//! `1..=F` the field embeddings. The target's label token is always the
//! "unknown" row of the label table; neighbors use their observed label.
//!
//! Blocks mix tokens along the field axis (intra-sample attention, one
//! attention per row) and along the sample axis (cross-sample attention, one
//! attention per column). Every sub-layer is pre-norm with a residual:
//! `x + sublayer(LN(x))`. The head reads the final hidden state of token
//! `(0, 0)`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::data::Record;
use crate::retrieval::RetrievalResult;
use crate::tensor::{sigmoid, Graph, Mask, Tensor, Var};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"RATM";
const CHECKPOINT_VERSION: u16 = 1;

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.01;

/// Label-table rows.
pub const LABEL_UNCLICK: usize = 0;
pub const LABEL_CLICK: usize = 1;
pub const LABEL_UNKNOWN: usize = 2;

/// How a block mixes tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Intra-sample then cross-sample attention, then the MLP.
    Cascade,
    /// One attention over all `(K+1)(F+1)` tokens, then the MLP.
    #[serde(rename = "jm")]
    JointModeling,
    /// `2L` half-blocks alternating intra-only and cross-only, each with its own MLP.
    #[serde(rename = "ce")]
    CascadedEncoder,
    /// Intra and cross attention side by side at half width, concatenated.
    #[serde(rename = "pa")]
    ParallelAttention,
    /// Intra-sample attention on the target row alone; neighbors are ignored.
    #[serde(rename = "intra")]
    IntraOnly,
}

impl Variant {
    /// The four block designs compared by the ablation, in table order.
    pub const ABLATION: [Variant; 4] =
        [Variant::JointModeling, Variant::CascadedEncoder, Variant::ParallelAttention, Variant::Cascade];

    /// Upper-case label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Cascade => "CASCADE",
            Variant::JointModeling => "JM",
            Variant::CascadedEncoder => "CE",
            Variant::ParallelAttention => "PA",
            Variant::IntraOnly => "INTRA",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Variant::Cascade => "cascade",
            Variant::JointModeling => "jm",
            Variant::CascadedEncoder => "ce",
            Variant::ParallelAttention => "pa",
            Variant::IntraOnly => "intra",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cascade" => Ok(Variant::Cascade),
            "jm" => Ok(Variant::JointModeling),
            "ce" => Ok(Variant::CascadedEncoder),
            "pa" => Ok(Variant::ParallelAttention),
            "intra" => Ok(Variant::IntraOnly),
            _ => Err(Error::invalid(format!("unknown variant {s:?} (expected cascade, jm, ce, pa or intra)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Distinct training values per field; table `f` has `vocab_sizes[f] + 1` rows.
    pub vocab_sizes: Vec<usize>,
    pub k: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(vocab_sizes: Vec<usize>, variant: Variant) -> Self {
        ModelConfig {
            vocab_sizes,
            k: 5,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 4,
            variant,
            activation: Activation::Gelu,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if self.vocab_sizes.is_empty() {
            return Err(Error::invalid("model needs at least one field"));
        }
        if d == 0 || self.num_blocks == 0 || self.num_heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("embed_dim, num_blocks, num_heads and mlp_ratio must be positive"));
        }
        if d % self.num_heads != 0 {
            return Err(Error::invalid(format!("num_heads {} does not divide embed_dim {d}", self.num_heads)));
        }
        if self.variant == Variant::ParallelAttention && (d % 2 != 0 || (d / 2) % self.num_heads != 0) {
            return Err(Error::invalid(format!(
                "parallel attention needs num_heads {} to divide embed_dim/2 = {}",
                self.num_heads,
                d as f64 / 2.0
            )));
        }
        Ok(())
    }
}

/// Query-key pairs scored by attention, summed over every attention call.
///
/// Counts are per head-group: multi-head attention over `L` tokens adds
/// `L * L` no matter how many heads share it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    pub entries: u64,
}

impl AttentionStats {
    /// Closed-form entries per example for one layer of `variant`.
    /// A layer of the cascaded encoder is one intra plus one cross half-block.
    pub fn closed_form(variant: Variant, k: usize, f: usize) -> u64 {
        let (s, t) = ((k + 1) as u64, (f + 1) as u64);
        match variant {
            Variant::Cascade | Variant::CascadedEncoder | Variant::ParallelAttention => s * t * t + t * s * s,
            Variant::JointModeling => (s * t) * (s * t),
            Variant::IntraOnly => t * t,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Qkv {
    q: Linear,
    k: Linear,
    v: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Mixer {
    Intra { qkv: Qkv, out: Linear },
    Cross { qkv: Qkv, out: Linear },
    Joint { qkv: Qkv, out: Linear },
    Parallel { intra: Qkv, cross: Qkv, out: Linear },
}

#[derive(Clone, Debug)]
struct Block {
    mixers: Vec<(Norm, Mixer)>,
    mlp_norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    fields: Vec<usize>,
    labels: usize,
    blocks: Vec<Block>,
    head: Linear,
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let a = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("numel matches"))
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("numel matches"))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.uniform(format!("{name}.w"), &[din, dout], din);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[d]));
        Norm { gamma, beta }
    }

    fn qkv(&mut self, name: &str, din: usize, dout: usize) -> Qkv {
        Qkv {
            q: self.linear(&format!("{name}.q"), din, dout),
            k: self.linear(&format!("{name}.k"), din, dout),
            v: self.linear(&format!("{name}.v"), din, dout),
        }
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize, kinds: &[&str]) -> Block {
        let mut mixers = Vec::new();
        for (i, kind) in kinds.iter().enumerate() {
            let prefix = format!("{name}.{kind}");
            let norm = self.norm(&format!("{name}.ln{}", i + 1), d);
            let mixer = match *kind {
                "intra" => Mixer::Intra { qkv: self.qkv(&prefix, d, d), out: self.linear(&format!("{prefix}.o"), d, d) },
                "cross" => Mixer::Cross { qkv: self.qkv(&prefix, d, d), out: self.linear(&format!("{prefix}.o"), d, d) },
                "joint" => Mixer::Joint { qkv: self.qkv(&prefix, d, d), out: self.linear(&format!("{prefix}.o"), d, d) },
                "parallel" => Mixer::Parallel {
                    intra: self.qkv(&format!("{prefix}.intra"), d, d / 2),
                    cross: self.qkv(&format!("{prefix}.cross"), d, d / 2),
                    out: self.linear(&format!("{prefix}.o"), d, d),
                },
                other => unreachable!("unknown mixer {other}"),
            };
            mixers.push((norm, mixer));
        }
        let mlp_norm = self.norm(&format!("{name}.ln{}", kinds.len() + 1), d);
        let fc1 = self.linear(&format!("{name}.mlp.fc1"), d, hidden);
        let fc2 = self.linear(&format!("{name}.mlp.fc2"), hidden, d);
        Block { mixers, mlp_norm, fc1, fc2 }
    }
}

/// One target with its retrieved neighbors, ready to embed.
///
/// `slots` has one entry per neighbor slot; `None` marks padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<'a> {
    pub fields: &'a [u32],
    pub slots: Vec<Option<(&'a [u32], u8)>>,
}

impl<'a> Example<'a> {
    /// Pairs `target` with the records `neighbors` points at in `pool`,
    /// where `pool[i].index == i`.
    pub fn from_retrieval(target: &'a Record, neighbors: &RetrievalResult, pool: &'a [Record]) -> Result<Self> {
        let mut slots = Vec::with_capacity(neighbors.k());
        for (&idx, &real) in neighbors.neighbor_indices.iter().zip(&neighbors.mask) {
            if !real {
                slots.push(None);
                continue;
            }
            let rec = pool
                .get(idx)
                .ok_or_else(|| Error::invalid(format!("neighbor index {idx} out of pool range {}", pool.len())))?;
            slots.push(Some((&rec.field_ids[..], rec.label)));
        }
        Ok(Example { fields: &target.field_ids, slots })
    }
}

#[derive(Clone, Debug)]
pub struct RatModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl RatModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = config.mlp_ratio * d;
        let mut b = Builder { names: Vec::new(), tensors: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

        let fields = config
            .vocab_sizes
            .iter()
            .enumerate()
            .map(|(f, &v)| b.normal(format!("embed.field{f}"), &[v + 1, d], EMBED_STD))
            .collect();
        let labels = b.normal("embed.label".into(), &[3, d], EMBED_STD);

        let mut blocks = Vec::new();
        for l in 0..config.num_blocks {
            let name = format!("block{l}");
            match config.variant {
                Variant::Cascade => blocks.push(b.block(&name, d, hidden, &["intra", "cross"])),
                Variant::JointModeling => blocks.push(b.block(&name, d, hidden, &["joint"])),
                Variant::ParallelAttention => blocks.push(b.block(&name, d, hidden, &["parallel"])),
                Variant::IntraOnly => blocks.push(b.block(&name, d, hidden, &["intra"])),
                Variant::CascadedEncoder => {
                    blocks.push(b.block(&format!("{name}a"), d, hidden, &["intra"]));
                    blocks.push(b.block(&format!("{name}b"), d, hidden, &["cross"]));
                }
            }
        }
        let w = b.push("head.w".into(), Tensor::zeros(&[d, 1]));
        let bias = b.push("head.b".into(), Tensor::zeros(&[1]));
        let layout = Layout { fields, labels, blocks, head: Linear { w, b: bias } };
        Ok(RatModel { config, names: b.names, params: b.tensors, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter tensors in declaration order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Scalar parameters excluding the embedding tables.
    pub fn num_dense_params(&self) -> usize {
        self.params.iter().zip(&self.names).filter(|(_, n)| !n.starts_with("embed.")).map(|(t, _)| t.numel()).sum()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() != self.config.num_fields() {
            return Err(Error::shape(format!("{} field ids, model has {} fields", ids.len(), self.config.num_fields())));
        }
        for (f, (&id, &v)) in ids.iter().zip(&self.config.vocab_sizes).enumerate() {
            if id as usize > v {
                return Err(Error::invalid(format!("id {id} out of range for field {f} (vocab {v})")));
            }
        }
        Ok(())
    }

    /// Token picks for a batch: `(table, row)` per token, `(K+1)(F+1)` per example.
    /// Table `F` is the label table, table `F+1` the padding row.
    fn picks(&self, examples: &[Example]) -> Result<(Vec<(usize, usize)>, Mask)> {
        let nf = self.config.num_fields();
        let k = self.config.k;
        let (label_table, pad_table) = (nf, nf + 1);
        let mut picks = Vec::with_capacity(examples.len() * (k + 1) * (nf + 1));
        let mut mask = Vec::with_capacity(examples.len() * (k + 1));
        for ex in examples {
            if ex.slots.len() != k {
                return Err(Error::shape(format!("example has {} neighbor slots, model expects {k}", ex.slots.len())));
            }
            self.check_ids(ex.fields)?;
            picks.push((label_table, LABEL_UNKNOWN));
            picks.extend(ex.fields.iter().enumerate().map(|(f, &id)| (f, id as usize)));
            mask.push(true);
            for slot in &ex.slots {
                match slot {
                    Some((ids, label)) => {
                        self.check_ids(ids)?;
                        let row = if *label == 1 { LABEL_CLICK } else { LABEL_UNCLICK };
                        picks.push((label_table, row));
                        picks.extend(ids.iter().enumerate().map(|(f, &id)| (f, id as usize)));
                        mask.push(true);
                    }
                    None => {
                        picks.extend(std::iter::repeat_n((pad_table, 0), nf + 1));
                        mask.push(false);
                    }
                }
            }
        }
        Ok((picks, Mask::new(vec![examples.len(), k + 1], mask)?))
    }

    /// Stacks one example into its `[K+1, F+1, D]` input and `[K+1]` neighbor mask.
    /// Padded rows are zero.
    pub fn build_input(&self, example: &Example) -> Result<(Tensor, Mask)> {
        let d = self.config.embed_dim;
        let (picks, mask) = self.picks(std::slice::from_ref(example))?;
        let mut data = Vec::with_capacity(picks.len() * d);
        for &(table, row) in &picks {
            if table == self.config.num_fields() + 1 {
                data.extend(std::iter::repeat_n(0.0, d));
            } else {
                let t = if table == self.config.num_fields() {
                    &self.params[self.layout.labels]
                } else {
                    &self.params[self.layout.fields[table]]
                };
                data.extend_from_slice(&t.data()[row * d..(row + 1) * d]);
            }
        }
        let s = self.config.k + 1;
        let t = self.config.num_fields() + 1;
        let mask = Mask::new(vec![s], mask.data().to_vec())?;
        Ok((Tensor::new(vec![s, t, d], data)?, mask))
    }

    /// Differentiable embedding of a batch: `[B, K+1, F+1, D]` plus the `[B, K+1]` mask.
    pub fn embed(&self, g: &mut Graph, examples: &[Example]) -> Result<(Var, Mask)> {
        let (picks, mask) = self.picks(examples)?;
        let d = self.config.embed_dim;
        let mut sources: Vec<Var> = self.layout.fields.iter().map(|&id| g.param(id)).collect();
        sources.push(g.param(self.layout.labels));
        sources.push(g.constant(Tensor::zeros(&[1, d])));
        let rows = g.gather_rows(&sources, &picks)?;
        let shape = [examples.len(), self.config.k + 1, self.config.num_fields() + 1, d];
        Ok((g.reshape(rows, &shape)?, mask))
    }

    /// Logits `[B]` for inputs `x: [B, K+1, F+1, D]` with neighbor mask `[B, K+1]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &Mask, stats: Option<&mut AttentionStats>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (s, t, d) = (self.config.k + 1, self.config.num_fields() + 1, self.config.embed_dim);
        if shape.len() != 4 || shape[1..] != [s, t, d] {
            return Err(Error::shape(format!("input {shape:?}, expected [B, {s}, {t}, {d}]")));
        }
        let b = shape[0];
        let mut local = AttentionStats::default();
        let stats = stats.unwrap_or(&mut local);

        let (mut h, ctx) = if self.config.variant == Variant::IntraOnly {
            let flat = g.reshape(x, &[b * s, t * d])?;
            let targets = g.gather_rows(&[flat], &(0..b).map(|i| (0, i * s)).collect::<Vec<_>>())?;
            let h = g.reshape(targets, &[b, 1, t, d])?;
            let ctx = self.context(g, h, None)?;
            (h, ctx)
        } else {
            (x, self.context(g, x, Some(mask))?)
        };
        for block in &self.layout.blocks {
            h = self.run_block(g, h, block, &ctx, stats)?;
        }

        let rows = ctx.s;
        let flat = g.reshape(h, &[b * rows * t, d])?;
        let readout = g.gather_rows(&[flat], &(0..b).map(|i| (0, i * rows * t)).collect::<Vec<_>>())?;
        let logits = self.linear(g, readout, self.layout.head)?;
        g.reshape(logits, &[b])
    }

    /// Number of blocks; twice `num_blocks` for the cascaded encoder.
    pub fn num_block_layers(&self) -> usize {
        self.layout.blocks.len()
    }

    /// Block `block` applied to `x: [B, S, F+1, D]` with neighbor mask `[B, S]`.
    pub fn block_forward(&self, g: &mut Graph, x: Var, mask: &Mask, block: usize) -> Result<Var> {
        let ctx = self.context(g, x, Some(mask))?;
        let block = self.block(block)?;
        self.run_block(g, x, block, &ctx, &mut AttentionStats::default())
    }

    /// `x + ISA(LN(x))` using the intra-sample sub-layer of block `block`.
    pub fn isa_forward(&self, g: &mut Graph, x: Var, block: usize) -> Result<Var> {
        let ctx = self.context(g, x, None)?;
        let (norm, mixer) = self.find_mixer(block, |m| matches!(m, Mixer::Intra { .. }))?;
        let n = self.layer_norm(g, x, norm)?;
        let m = self.mix(g, n, &mixer, &ctx, &mut AttentionStats::default())?;
        g.add(x, m)
    }

    /// `x + CSA(LN(x))` using the cross-sample sub-layer of block `block`.
    pub fn csa_forward(&self, g: &mut Graph, x: Var, mask: &Mask, block: usize) -> Result<Var> {
        let ctx = self.context(g, x, Some(mask))?;
        let (norm, mixer) = self.find_mixer(block, |m| matches!(m, Mixer::Cross { .. }))?;
        let n = self.layer_norm(g, x, norm)?;
        let m = self.mix(g, n, &mixer, &ctx, &mut AttentionStats::default())?;
        g.add(x, m)
    }

    fn block(&self, block: usize) -> Result<&Block> {
        self.layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::invalid(format!("block {block} out of range ({})", self.layout.blocks.len())))
    }

    fn find_mixer(&self, block: usize, pred: impl Fn(&Mixer) -> bool) -> Result<(Norm, Mixer)> {
        self.block(block)?
            .mixers
            .iter()
            .find(|(_, m)| pred(m))
            .copied()
            .ok_or_else(|| Error::invalid(format!("block {block} has no such attention sub-layer")))
    }

    /// Validates `x: [B, S, F+1, D]` and derives the masks for it.
    fn context(&self, g: &Graph, x: Var, mask: Option<&Mask>) -> Result<MaskContext> {
        let shape = g.shape(x);
        let (t, d) = (self.config.num_fields() + 1, self.config.embed_dim);
        if shape.len() != 4 || shape[2..] != [t, d] {
            return Err(Error::shape(format!("input {shape:?}, expected [B, S, {t}, {d}]")));
        }
        let (b, s) = (shape[0], shape[1]);
        let mask = match mask {
            Some(m) => m.clone(),
            None => Mask::new(vec![b, s], vec![true; b * s])?,
        };
        if mask.shape() != [b, s] {
            return Err(Error::shape(format!("mask {:?}, expected [{b}, {s}]", mask.shape())));
        }
        if (0..b).any(|i| !mask.data()[i * s]) {
            return Err(Error::invalid("target rows must be unmasked"));
        }
        Ok(MaskContext::new(&mask, b, s, t, d))
    }

    fn run_block(&self, g: &mut Graph, x: Var, block: &Block, ctx: &MaskContext, stats: &mut AttentionStats) -> Result<Var> {
        let mut h = x;
        for (norm, mixer) in &block.mixers {
            let n = self.layer_norm(g, h, *norm)?;
            let m = self.mix(g, n, mixer, ctx, stats)?;
            h = g.add(h, m)?;
        }
        let n = self.layer_norm(g, h, block.mlp_norm)?;
        let u = self.linear(g, n, block.fc1)?;
        let u = match self.config.activation {
            Activation::Gelu => g.gelu(u),
            Activation::Relu => g.relu(u),
        };
        let u = self.linear(g, u, block.fc2)?;
        g.add(h, u)
    }

    /// Click probabilities for prebuilt inputs.
    pub fn predict_inputs(&self, x: &Tensor, mask: &Mask) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let logits = self.forward(&mut g, xv, mask, None)?;
        Ok(g.value(logits).data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Click probabilities for a batch of examples.
    pub fn predict(&self, examples: &[Example]) -> Result<Vec<f64>> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let (x, mask) = self.embed(&mut g, examples)?;
        let logits = self.forward(&mut g, x, &mask, None)?;
        Ok(g.value(logits).data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Attention entries per example per layer measured on a forward pass
    /// over `examples`.
    pub fn count_attention_entries(&self, examples: &[Example]) -> Result<u64> {
        let mut g = Graph::new(&self.params);
        let (x, mask) = self.embed(&mut g, examples)?;
        let mut stats = AttentionStats::default();
        self.forward(&mut g, x, &mask, Some(&mut stats))?;
        Ok(stats.entries / (examples.len() as u64 * self.config.num_blocks as u64))
    }

    fn linear(&self, g: &mut Graph, x: Var, lin: Linear) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let din = *shape.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        let dout = self.params[lin.w].shape()[1];
        let rows = shape.iter().product::<usize>() / din.max(1);
        let flat = g.reshape(x, &[rows, din])?;
        let w = g.param(lin.w);
        let y = g.matmul(flat, w)?;
        let bias = g.param(lin.b);
        let y = g.add_bias(y, bias)?;
        let mut out = shape;
        *out.last_mut().expect("non-empty") = dout;
        g.reshape(y, &out)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, norm: Norm) -> Result<Var> {
        let (gamma, beta) = (g.param(norm.gamma), g.param(norm.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn mix(&self, g: &mut Graph, h: Var, mixer: &Mixer, ctx: &MaskContext, stats: &mut AttentionStats) -> Result<Var> {
        match *mixer {
            Mixer::Intra { qkv, out } => {
                let c = self.intra(g, h, qkv, ctx, stats)?;
                self.linear(g, c, out)
            }
            Mixer::Cross { qkv, out } => {
                let c = self.cross(g, h, qkv, ctx, stats)?;
                let o = self.linear(g, c, out)?;
                // padded samples keep their residual value
                if ctx.any_padding {
                    g.mul_const(o, &ctx.real_rows_factor())
                } else {
                    Ok(o)
                }
            }
            Mixer::Joint { qkv, out } => {
                let (b, s, t) = (ctx.b, ctx.s, ctx.t);
                let tokens = g.reshape(h, &[b, s * t, ctx.d])?;
                let c = self.attend(g, tokens, qkv, Some(&ctx.joint_keys), stats)?;
                let c = g.reshape(c, &[b, s, t, ctx.d])?;
                self.linear(g, c, out)
            }
            Mixer::Parallel { intra, cross, out } => {
                let a = self.intra(g, h, intra, ctx, stats)?;
                let c = self.cross(g, h, cross, ctx, stats)?;
                let both = g.concat_last(&[a, c])?;
                self.linear(g, both, out)
            }
        }
    }

    /// Attention over the field axis, independently per sample row.
    fn intra(&self, g: &mut Graph, h: Var, qkv: Qkv, ctx: &MaskContext, stats: &mut AttentionStats) -> Result<Var> {
        let (b, s, t, d) = (ctx.b, ctx.s, ctx.t, ctx.d);
        let rows = g.reshape(h, &[b * s, t, d])?;
        let c = self.attend(g, rows, qkv, None, stats)?;
        let dm = *g.shape(c).last().expect("rank 3");
        g.reshape(c, &[b, s, t, dm])
    }

    /// Attention over the sample axis, independently per field column.
    /// Padded samples are masked as keys.
    fn cross(&self, g: &mut Graph, h: Var, qkv: Qkv, ctx: &MaskContext, stats: &mut AttentionStats) -> Result<Var> {
        let (b, s, t, d) = (ctx.b, ctx.s, ctx.t, ctx.d);
        let cols = g.permute(h, &[0, 2, 1, 3])?;
        let cols = g.reshape(cols, &[b * t, s, d])?;
        let c = self.attend(g, cols, qkv, Some(&ctx.cross_keys), stats)?;
        let dm = *g.shape(c).last().expect("rank 3");
        let c = g.reshape(c, &[b, t, s, dm])?;
        g.permute(c, &[0, 2, 1, 3])
    }

    /// Multi-head self-attention of `x: [N, L, D]`, returning the concatenated
    /// head outputs `[N, L, Dq]` before the output projection.
    fn attend(&self, g: &mut Graph, x: Var, qkv: Qkv, keys: Option<&Mask>, stats: &mut AttentionStats) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, l) = (shape[0], shape[1]);
        let heads = self.config.num_heads;
        let q = self.linear(g, x, qkv.q)?;
        let k = self.linear(g, x, qkv.k)?;
        let v = self.linear(g, x, qkv.v)?;
        let dm = *g.shape(q).last().expect("rank 3");
        let dh = dm / heads;

        let q = g.reshape(q, &[n, l, heads, dh])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &[n, l, heads, dh])?;
        let k = g.permute(k, &[0, 2, 1, 3])?;
        let v = g.reshape(v, &[n, l, heads, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;

        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores, keys)?;
        stats.entries += (n * l * l) as u64;
        let c = g.matmul(weights, v)?;
        let c = g.permute(c, &[0, 2, 1, 3])?;
        g.reshape(c, &[n, l, dm])
    }

    /// Writes a checkpoint; `echo` is stored verbatim (the training config).
    pub fn save(&self, path: impl AsRef<Path>, echo: &str) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, echo)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, returning the model and the stored echo.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, echo: &str) -> Result<()> {
        binio::write_header(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        binio::write_str(w, echo)?;
        let config = serde_json::to_string(&self.config).map_err(|e| Error::format(e.to_string()))?;
        binio::write_str(w, &config)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.params) {
            binio::write_str(w, name)?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &dim in t.shape() {
                w.write_u64::<LittleEndian>(dim as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, String)> {
        binio::read_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let echo = binio::read_str(r)?;
        let config: ModelConfig = serde_json::from_str(&binio::read_str(r)?)
            .map_err(|e| Error::format(format!("bad model config: {e}")))?;
        let mut model = RatModel::new(config, 0)?;
        let count = binio::read_u32(r)? as usize;
        if count != model.params.len() {
            return Err(Error::format(format!("checkpoint has {count} tensors, model has {}", model.params.len())));
        }
        for i in 0..count {
            let name = binio::read_str(r)?;
            if name != model.names[i] {
                return Err(Error::format(format!("tensor {i} is {name:?}, expected {:?}", model.names[i])));
            }
            let rank = binio::read_u32(r)? as usize;
            let shape = (0..rank).map(|_| binio::read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if shape != model.params[i].shape() {
                return Err(Error::format(format!("tensor {name} has shape {shape:?}")));
            }
            for v in model.params[i].data_mut() {
                *v = binio::read_f64(r)?;
            }
        }
        binio::expect_eof(r)?;
        Ok((model, echo))
    }
}

/// Masks derived once per forward pass from the `[B, K+1]` neighbor mask.
struct MaskContext {
    b: usize,
    s: usize,
    t: usize,
    d: usize,
    any_padding: bool,
    /// `[B*T, 1, 1, S]`: key mask for cross-sample attention.
    cross_keys: Mask,
    /// `[B, 1, 1, S*T]`: key mask for joint attention.
    joint_keys: Mask,
    /// `[B, S]`: whether each sample row is real.
    rows: Vec<bool>,
}

impl MaskContext {
    fn new(mask: &Mask, b: usize, s: usize, t: usize, d: usize) -> Self {
        let real = |i: usize, j: usize| mask.data()[i * s + j];
        let mut cross = Vec::with_capacity(b * t * s);
        for i in 0..b {
            for _ in 0..t {
                cross.extend((0..s).map(|j| real(i, j)));
            }
        }
        let mut joint = Vec::with_capacity(b * s * t);
        for i in 0..b {
            for j in 0..s {
                joint.extend(std::iter::repeat_n(real(i, j), t));
            }
        }
        MaskContext {
            b,
            s,
            t,
            d,
            any_padding: cross.iter().any(|&m| !m),
            cross_keys: Mask::new(vec![b * t, 1, 1, s], cross).expect("sizes match"),
            joint_keys: Mask::new(vec![b, 1, 1, s * t], joint).expect("sizes match"),
            rows: mask.data().to_vec(),
        }
    }

    /// `[B, S, T, D]` with 1 on real rows and 0 on padded rows.
    fn real_rows_factor(&self) -> Tensor {
        let width = self.t * self.d;
        let data = self.rows.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width)).collect();
        Tensor::new(vec![self.b, self.s, self.t, self.d], data).expect("sizes match")
    }
}
