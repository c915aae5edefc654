//! A small decoder-only language model built from hybrid blocks.
//!
//! ```text
//! h = embed(tokens)
//! per layer:  h += mixer(RMSNorm(h));  h += SwiGLU(RMSNorm(h))
//! logits = RMSNorm(h) · embedᵀ
//! ```
//!
//! Sequences whose length is not a multiple of the chunk size are padded on
//! the right with [`crate::task::PAD`]; padded positions never influence real
//! ones (everything is causal) and padded chunks receive no score gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{
    block_backward, block_forward, init_block_params, linear_backward, BlockConfig, BlockMacs,
    BlockOverrides, BlockSaved, LayerKind,
};
use crate::error::{Error, Result};
use crate::flops::MacCounts;
use crate::numerics::activation::{silu, silu_grad};
use crate::numerics::linalg::{gemm_a_bt_acc, gemm_at_b_acc, matmul};
use crate::numerics::loss::{cross_entropy_sum, cross_entropy_sum_backward, IGNORE_INDEX};
use crate::numerics::norm::{rmsnorm, rmsnorm_backward};
use crate::params::ParamStore;
use crate::real::{Precision, Real};
use crate::router::{ChunkRouting, Route};
use crate::task::PAD;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub vocab: usize,
    pub n_layers: usize,
    /// One entry per layer.
    pub layer_pattern: Vec<LayerKind>,
    pub block: BlockConfig,
    /// MLP hidden width is `mlp_mult · d_model`, rounded up to a multiple of 8.
    pub mlp_mult: f64,
    pub embed_init_std: f64,
    pub seed: u64,
    pub precision: Precision,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 256,
            n_layers: 2,
            layer_pattern: vec![LayerKind::Hybrid; 2],
            block: BlockConfig::default(),
            mlp_mult: 8.0 / 3.0,
            embed_init_std: 0.02,
            seed: 0,
            precision: Precision::F32,
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.vocab < 2 || self.n_layers == 0 {
            return Err(Error::Config(String::from(
                "vocab must be ≥ 2 and n_layers ≥ 1",
            )));
        }
        if self.layer_pattern.len() != self.n_layers {
            return Err(Error::Config(format!(
                "layer_pattern has {} entries for {} layers",
                self.layer_pattern.len(),
                self.n_layers
            )));
        }
        if self.mlp_mult.is_nan() || self.mlp_mult <= 0.0 {
            return Err(Error::Config(String::from("mlp_mult must be positive")));
        }
        self.train.validate(self.block.chunk)
    }

    pub fn mlp_hidden(&self) -> usize {
        let raw = num_traits::Float::ceil(self.mlp_mult * self.block.d_model as f64) as usize;
        raw.div_ceil(8) * 8
    }

    pub fn layer_config(&self, layer: usize) -> BlockConfig {
        BlockConfig {
            kind: self.layer_pattern[layer],
            ..self.block.clone()
        }
    }

    /// Length after right-padding to a whole number of chunks.
    pub fn padded_len(&self, len: usize) -> usize {
        len.div_ceil(self.block.chunk) * self.block.chunk
    }
}

/// How hybrid layers choose their routing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RoutingMode {
    #[default]
    Learned,
    AllSoftmax,
    AllLinear,
    /// An evenly spread fraction of chunks goes to softmax.
    Fraction(f64),
}

impl RoutingMode {
    /// Forced routing for `n_chunks`, or `None` when learned.
    pub fn forced<T: Real>(&self, n_groups: usize, n_chunks: usize) -> Option<ChunkRouting<T>> {
        match *self {
            RoutingMode::Learned => None,
            RoutingMode::AllSoftmax => {
                Some(ChunkRouting::uniform(n_groups, n_chunks, Route::Softmax))
            }
            RoutingMode::AllLinear => {
                Some(ChunkRouting::uniform(n_groups, n_chunks, Route::Linear))
            }
            RoutingMode::Fraction(p) => Some(ChunkRouting::with_fraction(n_groups, n_chunks, p)),
        }
    }

    /// Forced route for a single chunk index (decode side).
    pub fn forced_chunk(&self, chunk: usize) -> Option<Route> {
        match *self {
            RoutingMode::Learned => None,
            RoutingMode::AllSoftmax => Some(Route::Softmax),
            RoutingMode::AllLinear => Some(Route::Linear),
            RoutingMode::Fraction(p) => {
                let p = p.clamp(0.0, 1.0);
                let hi = num_traits::Float::floor((chunk + 1) as f64 * p);
                let lo = num_traits::Float::floor(chunk as f64 * p);
                Some(if hi > lo {
                    Route::Softmax
                } else {
                    Route::Linear
                })
            }
        }
    }
}

impl core::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RoutingMode::Learned => f.write_str("learned"),
            RoutingMode::AllSoftmax => f.write_str("all_softmax"),
            RoutingMode::AllLinear => f.write_str("all_linear"),
            RoutingMode::Fraction(p) => write!(f, "fraction:{p}"),
        }
    }
}

impl core::str::FromStr for RoutingMode {
    type Err = Error;

    /// `learned`, `all_softmax`, `all_linear`, or `fraction:<p>` with `p` in [0, 1].
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(RoutingMode::Learned),
            "all_softmax" => Ok(RoutingMode::AllSoftmax),
            "all_linear" => Ok(RoutingMode::AllLinear),
            _ => {
                let p = s
                    .strip_prefix("fraction:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p));
                p.map(RoutingMode::Fraction).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown routing `{s}`; expected learned, all_softmax, all_linear or fraction:<p in [0,1]>"
                    ))
                })
            }
        }
    }
}

/// Per-call overrides applied to every hybrid layer.
#[derive(Debug, Clone, Default)]
pub struct ModelOverrides<T> {
    pub routing: RoutingMode,
    /// Per-layer fixed routing; takes precedence over `routing`.
    pub fixed: Option<Vec<ChunkRouting<T>>>,
    pub merge: Option<(f64, f64)>,
    pub gate_open: bool,
}

impl<T: Real> ModelOverrides<T> {
    pub fn routing(mode: RoutingMode) -> Self {
        ModelOverrides {
            routing: mode,
            fixed: None,
            merge: None,
            gate_open: false,
        }
    }

    /// Freezes the given per-layer routing (score path severed).
    pub fn frozen(routings: Vec<ChunkRouting<T>>) -> Self {
        ModelOverrides {
            routing: RoutingMode::Learned,
            fixed: Some(routings),
            merge: None,
            gate_open: false,
        }
    }

    fn block(&self, layer: usize, cfg: &BlockConfig, n_chunks: usize) -> BlockOverrides<T> {
        let routing = match &self.fixed {
            Some(f) => Some(f[layer].clone()),
            None => self.routing.forced(cfg.h_lin, n_chunks),
        };
        BlockOverrides {
            routing,
            merge: self.merge,
            gate_open: self.gate_open,
        }
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("layers.{layer}.")
}

/// Initializes every model parameter from `cfg.seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let d = cfg.block.d_model;
    let hid = cfg.mlp_hidden();
    store.insert(
        "embed",
        Tensor::randn(&[cfg.vocab, d], cfg.embed_init_std, &mut rng),
    )?;
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        store.insert(&format!("{p}norm1"), Tensor::ones(&[d]))?;
        init_block_params(
            &mut store,
            &format!("{p}mixer."),
            &cfg.layer_config(l),
            &mut rng,
        )?;
        store.insert(&format!("{p}norm2"), Tensor::ones(&[d]))?;
        let sd = 1.0 / num_traits::Float::sqrt(d as f64);
        store.insert(
            &format!("{p}mlp.w_gate"),
            Tensor::randn(&[d, hid], sd, &mut rng),
        )?;
        store.insert(
            &format!("{p}mlp.w_up"),
            Tensor::randn(&[d, hid], sd, &mut rng),
        )?;
        let sd_down = 1.0 / num_traits::Float::sqrt(hid as f64);
        store.insert(
            &format!("{p}mlp.w_down"),
            Tensor::randn(&[hid, d], sd_down, &mut rng),
        )?;
    }
    store.insert("final_norm", Tensor::ones(&[d]))?;
    Ok(store)
}

#[derive(Debug, Clone)]
struct LayerSaved<T> {
    h_in: Tensor<T>,
    block: BlockSaved<T>,
    h_mid: Tensor<T>,
    b: Tensor<T>,
    g: Tensor<T>,
    u: Tensor<T>,
    act: Tensor<T>,
}

/// Forward state for one (padded) sequence.
#[derive(Debug, Clone)]
pub struct ModelSaved<T> {
    tokens: Vec<u32>,
    len: usize,
    layers: Vec<LayerSaved<T>>,
    h_final: Tensor<T>,
    hf: Tensor<T>,
    /// Padded logits, `[L_pad × V]`.
    pub logits: Tensor<T>,
    pub macs: MacCounts,
}

impl<T: Real> ModelSaved<T> {
    /// Routing of every layer (forced layers included).
    pub fn routings(&self) -> Vec<ChunkRouting<T>> {
        self.layers
            .iter()
            .map(|l| l.block.routing().clone())
            .collect()
    }

    pub fn block(&self, layer: usize) -> &BlockSaved<T> {
        &self.layers[layer].block
    }

    /// Real (unpadded) length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for the real positions, `[L × V]`.
    pub fn real_logits(&self) -> Result<Tensor<T>> {
        let v = self.logits.shape()[1];
        Tensor::new(&[self.len, v], self.logits.data()[..self.len * v].to_vec())
    }
}

pub(crate) fn embed_rows<T: Real>(embed: &Tensor<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    let (vocab, d) = (embed.shape()[0], embed.shape()[1]);
    let mut h = Tensor::zeros(&[tokens.len(), d]);
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= vocab {
            return Err(Error::OutOfVocab { token: t, vocab });
        }
        h.row_mut(i).copy_from_slice(embed.row(t));
    }
    Ok(h)
}

pub(crate) fn mlp_forward<T: Real>(
    b: &Tensor<T>,
    store: &ParamStore<T>,
    p: &str,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = matmul(b, store.value(&format!("{p}mlp.w_gate"))?)?;
    let u = matmul(b, store.value(&format!("{p}mlp.w_up"))?)?;
    let mut act = g.map(silu);
    for (a, &uu) in act.data_mut().iter_mut().zip(u.data()) {
        *a *= uu;
    }
    let m = matmul(&act, store.value(&format!("{p}mlp.w_down"))?)?;
    Ok((m, g, u, act))
}

/// Forward over one sequence. Returns the real-length logits `[L × V]`.
pub fn model_forward<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    tokens: &[u32],
    overrides: &ModelOverrides<T>,
) -> Result<(Tensor<T>, ModelSaved<T>)> {
    let saved = forward_padded(cfg, store, tokens, overrides)?;
    Ok((saved.real_logits()?, saved))
}

pub(crate) fn forward_padded<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    tokens: &[u32],
    overrides: &ModelOverrides<T>,
) -> Result<ModelSaved<T>> {
    if tokens.is_empty() {
        return Err(Error::invalid("model_forward", "empty sequence"));
    }
    if let Some(f) = &overrides.fixed {
        if f.len() != cfg.n_layers {
            return Err(Error::shape(
                "model_forward routing",
                &[f.len()],
                &[cfg.n_layers],
            ));
        }
    }
    let len = tokens.len();
    let c = cfg.block.chunk;
    let len_pad = cfg.padded_len(len);
    let n_chunks = len_pad / c;
    let mut padded = tokens.to_vec();
    padded.resize(len_pad, PAD);
    let valid: Vec<bool> = (0..n_chunks).map(|t| (t + 1) * c <= len).collect();
    let eps = T::lit(cfg.block.norm_eps);
    let embed = store.value("embed")?;
    let mut h = embed_rows(embed, &padded)?;
    let mut macs = MacCounts::default();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        let bcfg = cfg.layer_config(l);
        let a = rmsnorm(&h, store.value(&format!("{p}norm1"))?, eps)?;
        let bo = overrides.block(l, &bcfg, n_chunks);
        let (y, block) = block_forward(&a, store, &format!("{p}mixer."), &bcfg, &bo, Some(&valid))?;
        add_block_macs(&mut macs, &block.macs);
        let h_in = h.clone();
        h.add_assign(&y)?;
        let h_mid = h.clone();
        let b = rmsnorm(&h, store.value(&format!("{p}norm2"))?, eps)?;
        let (m, g, u, act) = mlp_forward(&b, store, &p)?;
        macs.mlp += (3 * len_pad * cfg.block.d_model * cfg.mlp_hidden()) as u64;
        h.add_assign(&m)?;
        layers.push(LayerSaved {
            h_in,
            block,
            h_mid,
            b,
            g,
            u,
            act,
        });
    }
    let hf = rmsnorm(&h, store.value("final_norm")?, eps)?;
    let (vocab, d) = (embed.shape()[0], embed.shape()[1]);
    let mut logits = Tensor::zeros(&[len_pad, vocab]);
    gemm_a_bt_acc(
        hf.data(),
        embed.data(),
        logits.data_mut(),
        len_pad,
        d,
        vocab,
    );
    macs.logits += (len_pad * d * vocab) as u64;
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            op: "model_forward",
        });
    }
    Ok(ModelSaved {
        tokens: padded,
        len,
        layers,
        h_final: h,
        hf,
        logits,
        macs,
    })
}

fn add_block_macs(m: &mut MacCounts, b: &BlockMacs) {
    m.attn_softmax += b.softmax;
    m.attn_linear += b.linear;
    m.projections += b.projections;
}

/// Accumulates parameter gradients for `dlogits` (`[L_pad × V]`, or the real
/// length, in which case the padded rows are treated as zero).
pub fn model_backward<T: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    saved: &ModelSaved<T>,
    dlogits: &Tensor<T>,
) -> Result<()> {
    let len_pad = saved.tokens.len();
    let vocab = cfg.vocab;
    let d = cfg.block.d_model;
    let dl = if dlogits.shape() == [len_pad, vocab] {
        dlogits.clone()
    } else if dlogits.shape() == [saved.len, vocab] {
        let mut full = Tensor::zeros(&[len_pad, vocab]);
        full.data_mut()[..saved.len * vocab].copy_from_slice(dlogits.data());
        full
    } else {
        return Err(Error::shape(
            "model_backward",
            dlogits.shape(),
            &[len_pad, vocab],
        ));
    };
    if saved.layers.len() != cfg.n_layers {
        return Err(Error::StaleState(
            "model saved state has another layer count",
        ));
    }
    let eps = T::lit(cfg.block.norm_eps);

    // tied output projection
    let mut dhf = Tensor::zeros(&[len_pad, d]);
    gemm_acc_rows(
        dl.data(),
        store.value("embed")?.data(),
        dhf.data_mut(),
        len_pad,
        vocab,
        d,
    );
    gemm_at_b_acc(
        dl.data(),
        saved.hf.data(),
        store.grad_mut("embed")?.data_mut(),
        len_pad,
        vocab,
        d,
    );
    let (mut dh, dg) = rmsnorm_backward(&saved.h_final, store.value("final_norm")?, eps, &dhf)?;
    store.grad_mut("final_norm")?.add_assign(&dg)?;

    for l in (0..cfg.n_layers).rev() {
        let p = layer_prefix(l);
        let ls = &saved.layers[l];
        // MLP
        let dact = linear_backward(store, &format!("{p}mlp.w_down"), None, &ls.act, &dh)?;
        let mut dgate = Tensor::zeros(ls.g.shape());
        let mut dup = Tensor::zeros(ls.u.shape());
        for i in 0..dact.len() {
            let (g, u, da) = (ls.g.data()[i], ls.u.data()[i], dact.data()[i]);
            dgate.data_mut()[i] = da * u * silu_grad(g);
            dup.data_mut()[i] = da * silu(g);
        }
        let mut db = linear_backward(store, &format!("{p}mlp.w_gate"), None, &ls.b, &dgate)?;
        db.add_assign(&linear_backward(
            store,
            &format!("{p}mlp.w_up"),
            None,
            &ls.b,
            &dup,
        )?)?;
        let (dh_mid, dgn) =
            rmsnorm_backward(&ls.h_mid, store.value(&format!("{p}norm2"))?, eps, &db)?;
        store.grad_mut(&format!("{p}norm2"))?.add_assign(&dgn)?;
        dh.add_assign(&dh_mid)?;
        // mixer
        let bcfg = cfg.layer_config(l);
        let da = block_backward(&dh, &ls.block, store, &bcfg)?;
        let (dh_in, dgn) =
            rmsnorm_backward(&ls.h_in, store.value(&format!("{p}norm1"))?, eps, &da)?;
        store.grad_mut(&format!("{p}norm1"))?.add_assign(&dgn)?;
        dh.add_assign(&dh_in)?;
    }
    let ge = store.grad_mut("embed")?;
    for (i, &t) in saved.tokens.iter().enumerate() {
        let row = &mut ge.data_mut()[t as usize * d..(t as usize + 1) * d];
        for (g, &v) in row.iter_mut().zip(dh.row(i)) {
            *g += v;
        }
    }
    Ok(())
}

/// `c[m×n] += a[m×k] · b[k×n]` where `b` is stored row-major `k × n`.
fn gemm_acc_rows<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    crate::numerics::linalg::gemm_acc(a, b, c, m, k, n);
}

/// One training sequence: tokens plus per-position targets
/// ([`IGNORE_INDEX`] for positions without loss).
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub targets: Vec<i64>,
}

/// Result of one sequence's forward/backward.
#[derive(Debug, Clone)]
pub struct SeqOutcome<T> {
    pub loss_sum: T,
    pub count: usize,
    pub routings: Vec<ChunkRouting<T>>,
    pub macs: MacCounts,
}

fn padded_targets(sample: &Sample, len_pad: usize) -> Result<Vec<i64>> {
    if sample.targets.len() != sample.tokens.len() {
        return Err(Error::shape(
            "sample",
            &[sample.tokens.len()],
            &[sample.targets.len()],
        ));
    }
    let mut t = sample.targets.clone();
    t.resize(len_pad, IGNORE_INDEX);
    Ok(t)
}

/// A sequence without targets contributes nothing rather than failing; the
/// batch-level check rejects batches with no targets at all.
fn loss_or_zero<T: Real>(logits: &Tensor<T>, targets: &[i64]) -> Result<(T, usize)> {
    if targets.iter().all(|&t| t == IGNORE_INDEX) {
        return Ok((T::zero(), 0));
    }
    cross_entropy_sum(logits, targets, IGNORE_INDEX)
}

/// Loss sum and target count of one sequence, forward only.
pub fn sequence_loss<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    sample: &Sample,
    overrides: &ModelOverrides<T>,
) -> Result<SeqOutcome<T>> {
    let saved = forward_padded(cfg, store, &sample.tokens, overrides)?;
    let targets = padded_targets(sample, saved.tokens.len())?;
    let (loss_sum, count) = loss_or_zero(&saved.logits, &targets)?;
    Ok(SeqOutcome {
        loss_sum,
        count,
        routings: saved.routings(),
        macs: saved.macs,
    })
}

/// Forward and backward of one sequence; gradients of `scale · loss_sum`
/// are accumulated into `store`.
pub fn sequence_grad<T: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    sample: &Sample,
    scale: T,
    overrides: &ModelOverrides<T>,
) -> Result<SeqOutcome<T>> {
    let saved = forward_padded(cfg, store, &sample.tokens, overrides)?;
    let targets = padded_targets(sample, saved.tokens.len())?;
    let (loss_sum, count) = loss_or_zero(&saved.logits, &targets)?;
    if count > 0 {
        let dlogits = cross_entropy_sum_backward(&saved.logits, &targets, IGNORE_INDEX, scale)?;
        model_backward(cfg, store, &saved, &dlogits)?;
    }
    Ok(SeqOutcome {
        loss_sum,
        count,
        routings: saved.routings(),
        macs: saved.macs,
    })
}

/// Number of non-ignored targets in a batch.
pub fn target_count(batch: &[Sample]) -> usize {
    batch
        .iter()
        .map(|s| s.targets.iter().filter(|&&t| t != IGNORE_INDEX).count())
        .sum()
}

/// Adds per-sequence loss sums in sorted order, so the total does not depend
/// on the order of the batch.
pub fn ordered_total<T: Real>(sums: &[T]) -> T {
    let mut v = sums.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    v.into_iter().fold(T::zero(), |acc, x| acc + x)
}

/// Mean cross-entropy over every non-ignored target of the batch.
pub fn batch_loss<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    batch: &[Sample],
    overrides: &ModelOverrides<T>,
) -> Result<T> {
    let mut sums = Vec::with_capacity(batch.len());
    let mut count = 0;
    for s in batch {
        if s.targets.iter().all(|&t| t == IGNORE_INDEX) {
            continue;
        }
        let o = sequence_loss(cfg, store, s, overrides)?;
        sums.push(o.loss_sum);
        count += o.count;
    }
    if count == 0 {
        return Err(Error::NoTargets);
    }
    Ok(ordered_total(&sums) / T::from_usize(count))
}

/// Logits for a batch of equal-length sequences, `[B × L × V]`, plus the
/// routing of every (sequence, layer).
pub fn model_forward_batch<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    tokens: &[Vec<u32>],
    overrides: &ModelOverrides<T>,
) -> Result<(Tensor<T>, Vec<Vec<ChunkRouting<T>>>)> {
    let len = tokens.first().map(|t| t.len()).unwrap_or(0);
    if tokens.iter().any(|t| t.len() != len) || len == 0 {
        return Err(Error::invalid(
            "model_forward_batch",
            "sequences must be non-empty and of equal length",
        ));
    }
    let mut data = Vec::with_capacity(tokens.len() * len * cfg.vocab);
    let mut routings = Vec::with_capacity(tokens.len());
    for t in tokens {
        let (logits, saved) = model_forward(cfg, store, t, overrides)?;
        data.extend_from_slice(logits.data());
        routings.push(saved.routings());
    }
    Ok((
        Tensor::new(&[tokens.len(), len, cfg.vocab], data)?,
        routings,
    ))
}

/// Parameters plus config.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = init_params(&cfg)?;
        Ok(Model { cfg, params })
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        overrides: &ModelOverrides<T>,
    ) -> Result<(Tensor<T>, ModelSaved<T>)> {
        model_forward(&self.cfg, &self.params, tokens, overrides)
    }
}


#[cfg(test)]
mod tests {
    use super::tests_support::tiny_cfg;
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn logits_shape_and_padding() {
        let cfg = tiny_cfg();
        let m = Model::<f64>::new(cfg).unwrap();
        let (logits, saved) = m
            .forward(&[3, 4, 5, 6, 7, 8], &ModelOverrides::default())
            .unwrap();
        assert_eq!(logits.shape(), &[6, 12]);
        assert_eq!(saved.logits.shape(), &[8, 12]);
        assert!(matches!(
            m.forward(&[99], &ModelOverrides::default()),
            Err(Error::OutOfVocab { token: 99, .. })
        ));
    }

    #[test]
    fn routing_mode_round_trips_through_text() {
        for m in [
            RoutingMode::Learned,
            RoutingMode::AllSoftmax,
            RoutingMode::AllLinear,
            RoutingMode::Fraction(0.25),
        ] {
            assert_eq!(m.to_string().parse::<RoutingMode>().unwrap(), m);
        }
        assert!("fraction:1.5".parse::<RoutingMode>().is_err());
        assert!("dense".parse::<RoutingMode>().is_err());
    }

    #[test]
    fn mlp_hidden_rounds_to_eight() {
        let cfg = ModelConfig {
            block: BlockConfig {
                d_model: 10,
                ..BlockConfig::default()
            },
            ..ModelConfig::default()
        };
        assert_eq!(cfg.mlp_hidden(), 32);
    }

    #[test]
    fn fraction_mode_matches_routing_pattern() {
        let r: ChunkRouting<f64> = RoutingMode::Fraction(0.25).forced(1, 8).unwrap();
        for t in 0..8 {
            assert_eq!(
                Some(r.get(0, t)),
                RoutingMode::Fraction(0.25).forced_chunk(t)
            );
        }
    }
}
