//! The hybrid token-mixer block.
//!
//! ```text
//! q,k,v = SiLU(conv4(X W_{q,k,v}))                 shared by both paths
//! softmax path: RMSNorm(q), RMSNorm(k) per head (+ rope) → masked attention
//! linear path:  group-mean q,k,v → L2(q), L2(k) → Gated DeltaNet
//! O  = w⁰·RMSNorm(O_nla) + w¹·RMSNorm(O_la broadcast to the group)
//! Y  = (O ⊙ σ(X W_g + b_g)) W_out
//! ```
//!
//! Each linear head owns a group of `G = h_softmax / h_lin` softmax heads and
//! one routing decision per chunk. Merge weights are a softmax over the two
//! ops of a per-group projection of the flattened `q`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attn::{
    masked_attention_backward, masked_attention_forward, rope_apply, rope_backward, AttnSaved,
    ColumnMask,
};
use crate::error::{Error, Result};
use crate::gdn::{gdn_chunkwise_backward, gdn_chunkwise_forward, GdnOptions, GdnSaved};
use crate::numerics::activation::{sigmoid, silu, silu_grad, softplus};
use crate::numerics::conv::{depthwise_causal_conv, depthwise_causal_conv_backward};
use crate::numerics::linalg::matmul;
use crate::numerics::norm::{l2_normalize, l2_normalize_backward, rmsnorm, rmsnorm_backward};
use crate::params::ParamStore;
use crate::real::Real;
use crate::router::{compute_scores, route, score_backward, ChunkRouting, Route};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LayerKind {
    /// Learned per-chunk routing between both paths.
    #[default]
    Hybrid,
    /// Linear path only (pure Gated DeltaNet mixer).
    GdnOnly,
    /// Softmax path only (plain attention mixer).
    SoftmaxOnly,
}

/// Variant switches. All off is the default block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Ablations {
    /// Same-chunk correlations come from the softmax path only; the linear
    /// path reads just the decayed entering state.
    pub sattn_out: bool,
    /// Same-chunk correlations come from the linear path only; the softmax
    /// diagonal chunk is hidden.
    pub gdn_out: bool,
    /// Softmax-routed chunks leave the linear state untouched (no decay).
    pub no_linear_decay: bool,
    /// One RMSNorm after the weighted sum instead of one per path.
    pub single_norm: bool,
    /// Merge weights fixed at (0.5, 0.5).
    pub fixed_weights: bool,
    /// Merge weights projected from the block input instead of `q`.
    pub weights_from_x: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BlockConfig {
    pub d_model: usize,
    pub h_softmax: usize,
    pub h_lin: usize,
    pub d_head: usize,
    /// Routing chunk size `C`.
    pub chunk: usize,
    /// Linear-path kernel sub-chunk size `c`.
    pub sub_chunk: usize,
    pub rope: bool,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub l2_eps: f64,
    pub conv_width: usize,
    pub score_bias: bool,
    pub score_init_std: f64,
    pub kind: LayerKind,
    pub ablations: Ablations,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            d_model: 128,
            h_softmax: 4,
            h_lin: 2,
            d_head: 32,
            chunk: 16,
            sub_chunk: 16,
            rope: false,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
            l2_eps: 1e-6,
            conv_width: 4,
            score_bias: false,
            score_init_std: 0.02,
            kind: LayerKind::Hybrid,
            ablations: Ablations::default(),
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(String::from(msg)));
        if self.d_model == 0 || self.h_softmax == 0 || self.h_lin == 0 || self.d_head == 0 {
            return bad("d_model, h_softmax, h_lin and d_head must be positive");
        }
        if self.h_softmax % self.h_lin != 0 {
            return bad("h_softmax must be a multiple of h_lin");
        }
        if self.chunk == 0 || self.sub_chunk == 0 || self.chunk % self.sub_chunk != 0 {
            return bad("sub_chunk must divide chunk");
        }
        if self.rope && self.d_head % 2 != 0 {
            return bad("rope needs an even d_head");
        }
        if self.conv_width == 0 {
            return bad("conv_width must be positive");
        }
        if !(self.norm_eps > 0.0 && self.l2_eps > 0.0) {
            return bad("norm_eps and l2_eps must be positive");
        }
        Ok(())
    }

    /// Softmax heads per linear head.
    pub fn group_size(&self) -> usize {
        self.h_softmax / self.h_lin
    }

    pub fn group_of_head(&self) -> Vec<usize> {
        (0..self.h_softmax).map(|h| h / self.group_size()).collect()
    }

    /// Width of the flattened head outputs, `h_softmax · d_head`.
    pub fn inner(&self) -> usize {
        self.h_softmax * self.d_head
    }

    pub fn has_softmax(&self) -> bool {
        self.kind != LayerKind::GdnOnly
    }

    pub fn has_linear(&self) -> bool {
        self.kind != LayerKind::SoftmaxOnly
    }

    pub fn learns_routing(&self) -> bool {
        self.kind == LayerKind::Hybrid
    }

    pub fn learns_weights(&self) -> bool {
        self.kind == LayerKind::Hybrid && !self.ablations.fixed_weights
    }

    /// Linear-path options as the block runs them; the ablations only apply
    /// to hybrid layers.
    pub fn effective_gdn_options(&self) -> GdnOptions {
        let mut opts = self.gdn_options();
        if self.kind != LayerKind::Hybrid {
            opts.inner_output = true;
            opts.decay_softmax_chunks = true;
        }
        opts
    }

    /// Merge weights fixed by the layer kind, an override or the ablation;
    /// `None` when they are learned.
    pub fn fixed_merge(&self, merge_override: Option<(f64, f64)>) -> Option<(f64, f64)> {
        match self.kind {
            LayerKind::GdnOnly => Some((0.0, 1.0)),
            LayerKind::SoftmaxOnly => Some((1.0, 0.0)),
            LayerKind::Hybrid => {
                merge_override.or(self.ablations.fixed_weights.then_some((0.5, 0.5)))
            }
        }
    }

    /// Whether the softmax path sees its own chunk.
    pub fn softmax_diagonal(&self) -> bool {
        !(self.kind == LayerKind::Hybrid && self.ablations.gdn_out)
    }

    pub fn single_norm(&self) -> bool {
        self.kind == LayerKind::Hybrid && self.ablations.single_norm
    }

    pub fn gdn_options(&self) -> GdnOptions {
        GdnOptions {
            chunk: self.chunk,
            sub_chunk: self.sub_chunk,
            inner_output: !self.ablations.sattn_out,
            decay_softmax_chunks: !self.ablations.no_linear_decay,
        }
    }
}

/// Forced choices that replace learned quantities.
#[derive(Debug, Clone, Default)]
pub struct BlockOverrides<T> {
    /// Fixed routing; severs the score path (no `w_score` gradient).
    pub routing: Option<ChunkRouting<T>>,
    /// Fixed merge weights `(w⁰, w¹)`.
    pub merge: Option<(f64, f64)>,
    /// Replace the output gate by 1.
    pub gate_open: bool,
}

fn pname(prefix: &str, s: &str) -> String {
    format!("{prefix}{s}")
}

/// Names of the parameters a block of this config owns, in init order.
pub fn block_param_shapes(cfg: &BlockConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, inner, hl, kw, dh) = (
        cfg.d_model,
        cfg.inner(),
        cfg.h_lin,
        cfg.conv_width,
        cfg.d_head,
    );
    let mut v: Vec<(&'static str, Vec<usize>)> = vec![
        ("q_proj", vec![d, inner]),
        ("k_proj", vec![d, inner]),
        ("v_proj", vec![d, inner]),
        ("q_conv", vec![inner, kw]),
        ("k_conv", vec![inner, kw]),
        ("v_conv", vec![inner, kw]),
    ];
    if cfg.has_softmax() {
        v.push(("q_norm", vec![dh]));
        v.push(("k_norm", vec![dh]));
        v.push(("o_norm_nla", vec![dh]));
    }
    if cfg.has_linear() {
        v.push(("a_proj", vec![d, hl]));
        v.push(("a_bias", vec![hl]));
        v.push(("b_proj", vec![d, hl]));
        v.push(("b_bias", vec![hl]));
        if !(cfg.kind == LayerKind::Hybrid && cfg.ablations.single_norm) {
            v.push(("o_norm_la", vec![dh]));
        }
    }
    if cfg.learns_routing() {
        v.push(("w_score", vec![d, 2 * hl]));
        if cfg.score_bias {
            v.push(("score_bias", vec![2 * hl]));
        }
    }
    if cfg.learns_weights() {
        let src = if cfg.ablations.weights_from_x {
            d
        } else {
            inner
        };
        v.push(("w_proj", vec![src, 2 * hl]));
    }
    v.push(("gate_proj", vec![d, inner]));
    v.push(("gate_bias", vec![inner]));
    v.push(("out_proj", vec![inner, d]));
    v
}

/// Draws every block parameter into `store` under `prefix`.
pub fn init_block_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in block_param_shapes(cfg) {
        let t = match name {
            "q_norm" | "k_norm" | "o_norm_nla" | "o_norm_la" => Tensor::ones(&shape),
            "b_bias" | "gate_bias" | "score_bias" => Tensor::zeros(&shape),
            // α = exp(−softplus(a)) spread over [0.9, 0.999] across heads
            "a_bias" => {
                let n = shape[0];
                Tensor::from_fn(&shape, |i| {
                    let frac = if n == 1 {
                        0.5
                    } else {
                        i as f64 / (n - 1) as f64
                    };
                    let decay = 0.9 + 0.099 * frac;
                    let sp = -num_traits::Float::ln(decay);
                    T::lit(num_traits::Float::ln(num_traits::Float::exp(sp) - 1.0))
                })
            }
            "q_conv" | "k_conv" | "v_conv" => {
                let bound = 1.0 / num_traits::Float::sqrt(shape[1] as f64);
                Tensor::rand_uniform(&shape, -bound, bound, rng)
            }
            "w_score" => Tensor::randn(&shape, cfg.score_init_std, rng),
            "w_proj" => Tensor::randn(&shape, 0.02, rng),
            _ => Tensor::randn(&shape, 1.0 / num_traits::Float::sqrt(shape[0] as f64), rng),
        };
        store.insert(&pname(prefix, name), t)?;
    }
    Ok(())
}

/// Multiply-adds by component for one forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockMacs {
    pub softmax: u64,
    pub linear: u64,
    pub projections: u64,
}

/// Everything the backward needs.
#[derive(Debug, Clone)]
pub struct BlockSaved<T> {
    prefix: String,
    x: Tensor<T>,
    len: usize,
    proj: [Tensor<T>; 3],
    pre_act: [Tensor<T>; 3],
    /// SiLU outputs, `[L × h × d]`.
    qkv: [Tensor<T>; 3],
    attn: Option<SoftmaxSaved<T>>,
    lin: Option<LinearSaved<T>>,
    routing: ChunkRouting<T>,
    routing_learned: bool,
    valid_chunks: Option<Vec<bool>>,
    /// `[L × h_lin × 2]`
    w: Tensor<T>,
    w_learned: bool,
    merge: MergeSaved<T>,
    gate: Option<Tensor<T>>,
    /// Merged heads before the gate, `[L × h·d]`.
    m: Tensor<T>,
    z: Tensor<T>,
    pub macs: BlockMacs,
}

#[derive(Debug, Clone)]
struct SoftmaxSaved<T> {
    qr: Tensor<T>,
    kr: Tensor<T>,
    mask: ColumnMask,
    o: Tensor<T>,
    saved: AttnSaved<T>,
}

#[derive(Debug, Clone)]
struct LinearSaved<T> {
    ql: Tensor<T>,
    kl: Tensor<T>,
    qn: Tensor<T>,
    kn: Tensor<T>,
    vl: Tensor<T>,
    za: Tensor<T>,
    zb: Tensor<T>,
    alpha: Tensor<T>,
    beta: Tensor<T>,
    o: Tensor<T>,
    saved: GdnSaved<T>,
}

#[derive(Debug, Clone)]
enum MergeSaved<T> {
    /// Per-path norms; `None` for an absent path.
    PerPath {
        n_nla: Option<Tensor<T>>,
        n_la: Option<Tensor<T>>,
    },
    /// Single norm over the weighted sum `s`.
    Single { s: Tensor<T> },
}

impl<T: Real> BlockSaved<T> {
    pub fn routing(&self) -> &ChunkRouting<T> {
        &self.routing
    }

    /// Linear state after the last chunk, `[h_lin × d × d]`.
    pub fn final_linear_state(&self) -> Option<&crate::gdn::LinearState<T>> {
        self.lin.as_ref().map(|l| l.saved.final_state())
    }

    /// Softmax-path keys after norm/rope, `[L × h × d]`.
    pub fn softmax_keys(&self) -> Option<&Tensor<T>> {
        self.attn.as_ref().map(|a| &a.kr)
    }

    /// Shared values, `[L × h × d]`.
    pub fn values(&self) -> &Tensor<T> {
        &self.qkv[2]
    }

    /// q/k/v projections before the convolution, `[L × h·d]` each.
    pub fn projections(&self) -> &[Tensor<T>; 3] {
        &self.proj
    }

    pub fn merge_weights(&self) -> &Tensor<T> {
        &self.w
    }
}

pub(crate) fn linear<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if let Some(b) = bias {
        let n = b.len();
        for row in y.data_mut().chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    Ok(y)
}

/// Accumulates `dW += xᵀ dy` (and `db += Σ dy`) into the store and returns `dx`.
pub(crate) fn linear_backward<T: Real>(
    store: &mut ParamStore<T>,
    w_name: &str,
    b_name: Option<&str>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let w = store.value(w_name)?;
    let (m, k, n) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut dx = Tensor::zeros(x.shape());
    crate::numerics::linalg::gemm_a_bt_acc(dy.data(), w.data(), dx.data_mut(), m, n, k);
    crate::numerics::linalg::gemm_at_b_acc(
        x.data(),
        dy.data(),
        store.grad_mut(w_name)?.data_mut(),
        m,
        k,
        n,
    );
    if let Some(b) = b_name {
        let db = store.grad_mut(b)?;
        for row in dy.data().chunks_exact(n) {
            for (g, &v) in db.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    Ok(dx)
}

fn linear_macs<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> u64 {
    (x.rows() * w.shape()[0] * w.shape()[1]) as u64
}

/// `[L × h × d] → [L × h_lin × d]`: mean over the heads of each group.
pub(crate) fn group_mean<T: Real>(x: &Tensor<T>, groups: usize) -> Tensor<T> {
    let (len, heads, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let g = heads / groups;
    let inv = T::one() / T::from_usize(g);
    let mut y = Tensor::zeros(&[len, groups, d]);
    for t in 0..len {
        for h in 0..heads {
            let src = &x.data()[(t * heads + h) * d..(t * heads + h + 1) * d];
            let dst = &mut y.data_mut()[(t * groups + h / g) * d..(t * groups + h / g + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    y.data_mut().iter_mut().for_each(|v| *v *= inv);
    y
}

fn group_mean_backward<T: Real>(dy: &Tensor<T>, heads: usize, dx: &mut Tensor<T>) {
    let (len, groups, d) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let g = heads / groups;
    let inv = T::one() / T::from_usize(g);
    for t in 0..len {
        for h in 0..heads {
            let src = &dy.data()[(t * groups + h / g) * d..(t * groups + h / g + 1) * d];
            let dst = &mut dx.data_mut()[(t * heads + h) * d..(t * heads + h + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v * inv;
            }
        }
    }
}

/// Softmax over each `(w⁰, w¹)` logit pair.
pub(crate) fn pair_softmax<T: Real>(logits: &Tensor<T>, groups: usize) -> Tensor<T> {
    let len = logits.rows();
    let mut w = Tensor::zeros(&[len, groups, 2]);
    for (o, l) in w
        .data_mut()
        .chunks_exact_mut(2)
        .zip(logits.data().chunks_exact(2))
    {
        let m = if l[0] > l[1] { l[0] } else { l[1] };
        let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
        let s = e0 + e1;
        o[0] = e0 / s;
        o[1] = e1 / s;
    }
    w
}

/// Merges per-head softmax outputs with per-group linear outputs.
///
/// `o_nla: [L × h × d]`, `o_la: [L × h_lin × d]`, `w: [L × h_lin × 2]`;
/// output `[L × h × d]` is `w⁰·RMSNorm(o_nla) + w¹·RMSNorm(o_la)`.
pub fn merge_outputs<T: Real>(
    o_nla: &Tensor<T>,
    o_la: &Tensor<T>,
    w: &Tensor<T>,
    gamma_nla: &Tensor<T>,
    gamma_la: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if o_nla.rank() != 3
        || o_la.rank() != 3
        || o_nla.shape()[0] != o_la.shape()[0]
        || o_nla.shape()[2] != o_la.shape()[2]
    {
        return Err(Error::shape("merge_outputs", o_nla.shape(), o_la.shape()));
    }
    if w.shape() != [o_la.shape()[0], o_la.shape()[1], 2] || o_nla.shape()[1] % o_la.shape()[1] != 0
    {
        return Err(Error::shape(
            "merge_outputs weights",
            w.shape(),
            o_la.shape(),
        ));
    }
    let n1 = rmsnorm(o_nla, gamma_nla, eps)?;
    let n2 = rmsnorm(o_la, gamma_la, eps)?;
    Ok(combine(
        Some(&n1),
        Some(&n2),
        w,
        o_nla.shape()[1],
        o_nla.shape()[2],
    ))
}

/// `w⁰·a + w¹·b` with `b` broadcast across each group; absent terms are 0.
pub(crate) fn combine<T: Real>(
    a: Option<&Tensor<T>>,
    b: Option<&Tensor<T>>,
    w: &Tensor<T>,
    heads: usize,
    d: usize,
) -> Tensor<T> {
    let (len, groups) = (w.shape()[0], w.shape()[1]);
    let g = heads / groups;
    let mut out = Tensor::zeros(&[len, heads, d]);
    for t in 0..len {
        for h in 0..heads {
            let gi = h / g;
            let (w0, w1) = (
                w.data()[(t * groups + gi) * 2],
                w.data()[(t * groups + gi) * 2 + 1],
            );
            let o = &mut out.data_mut()[(t * heads + h) * d..(t * heads + h + 1) * d];
            if let Some(a) = a {
                let src = &a.data()[(t * heads + h) * d..(t * heads + h + 1) * d];
                for (x, &v) in o.iter_mut().zip(src) {
                    *x += w0 * v;
                }
            }
            if let Some(b) = b {
                let src = &b.data()[(t * groups + gi) * d..(t * groups + gi + 1) * d];
                for (x, &v) in o.iter_mut().zip(src) {
                    *x += w1 * v;
                }
            }
        }
    }
    out
}

fn check_routing<T: Real>(cfg: &BlockConfig, r: &ChunkRouting<T>, n_chunks: usize) -> Result<()> {
    r.check_dims(cfg.h_lin, n_chunks)
}

/// Forward for one sequence `x: [L × d_model]`, `L` a multiple of `chunk`.
/// `valid_chunks` marks chunks holding real tokens (padding gets no score
/// gradient).
pub fn block_forward<T: Real>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    overrides: &BlockOverrides<T>,
    valid_chunks: Option<&[bool]>,
) -> Result<(Tensor<T>, BlockSaved<T>)> {
    cfg.validate()?;
    if x.rank() != 2 || x.shape()[1] != cfg.d_model {
        return Err(Error::shape("block_forward", x.shape(), &[0, cfg.d_model]));
    }
    let len = x.shape()[0];
    if len % cfg.chunk != 0 {
        return Err(Error::NotDivisible {
            op: "block_forward",
            len,
            chunk: cfg.chunk,
        });
    }
    let n_chunks = len / cfg.chunk;
    let (h, hl, dh) = (cfg.h_softmax, cfg.h_lin, cfg.d_head);
    let p = |s: &str| pname(prefix, s);
    let eps = T::lit(cfg.norm_eps);
    let mut macs = BlockMacs::default();

    // shared projections
    let mut proj: Vec<Tensor<T>> = Vec::with_capacity(3);
    let mut pre: Vec<Tensor<T>> = Vec::with_capacity(3);
    let mut act: Vec<Tensor<T>> = Vec::with_capacity(3);
    for s in ["q", "k", "v"] {
        let w = store.value(&p(&format!("{s}_proj")))?;
        let y = matmul(x, w)?;
        macs.projections += linear_macs(x, w);
        let c = depthwise_causal_conv(&y, store.value(&p(&format!("{s}_conv")))?, None)?;
        macs.projections += (len * cfg.inner() * cfg.conv_width) as u64;
        act.push(c.map(silu).reshape(&[len, h, dh])?);
        proj.push(y);
        pre.push(c);
    }

    let (routing, routing_learned) = match (&overrides.routing, cfg.kind) {
        (_, LayerKind::GdnOnly) => (ChunkRouting::uniform(hl, n_chunks, Route::Linear), false),
        (_, LayerKind::SoftmaxOnly) => (ChunkRouting::uniform(hl, n_chunks, Route::Softmax), false),
        (Some(r), LayerKind::Hybrid) => {
            check_routing(cfg, r, n_chunks)?;
            (r.clone(), false)
        }
        (None, LayerKind::Hybrid) => {
            let bias = if cfg.score_bias {
                Some(store.value(&p("score_bias"))?)
            } else {
                None
            };
            let w_score = store.value(&p("w_score"))?;
            let scores = compute_scores(x, w_score, bias, cfg.chunk)?;
            macs.projections += (len * cfg.d_model + n_chunks * cfg.d_model * 2 * hl) as u64;
            (route(&scores)?, true)
        }
    };

    let attn = if cfg.has_softmax() {
        let qn = rmsnorm(&act[0], store.value(&p("q_norm"))?, eps)?;
        let kn = rmsnorm(&act[1], store.value(&p("k_norm"))?, eps)?;
        let (qr, kr) = if cfg.rope {
            let pos: Vec<usize> = (0..len).collect();
            (
                rope_apply(&qn, &pos, cfg.rope_theta)?,
                rope_apply(&kn, &pos, cfg.rope_theta)?,
            )
        } else {
            (qn, kn)
        };
        let mut mask = ColumnMask::from_routing(&routing, cfg.chunk);
        mask.diagonal = cfg.softmax_diagonal();
        let (o, saved) = masked_attention_forward(&qr, &kr, &act[2], &mask, &cfg.group_of_head())?;
        macs.softmax += saved.macs;
        Some(SoftmaxSaved {
            qr,
            kr,
            mask,
            o,
            saved,
        })
    } else {
        None
    };

    let lin = if cfg.has_linear() {
        let ql = group_mean(&act[0], hl);
        let kl = group_mean(&act[1], hl);
        let vl = group_mean(&act[2], hl);
        let l2 = T::lit(cfg.l2_eps);
        let qn = l2_normalize(&ql, l2)?;
        let kn = l2_normalize(&kl, l2)?;
        let za = linear(
            x,
            store.value(&p("a_proj"))?,
            Some(store.value(&p("a_bias"))?),
        )?;
        let zb = linear(
            x,
            store.value(&p("b_proj"))?,
            Some(store.value(&p("b_bias"))?),
        )?;
        macs.projections += 2 * (len * cfg.d_model * hl) as u64;
        let alpha = za.map(|z| (-softplus(z)).exp());
        let beta = zb.map(sigmoid);
        let opts = cfg.effective_gdn_options();
        let (o, saved) =
            gdn_chunkwise_forward(&qn, &kn, &vl, &alpha, &beta, &routing, &opts, None)?;
        macs.linear += saved.macs;
        Some(LinearSaved {
            ql,
            kl,
            qn,
            kn,
            vl,
            za,
            zb,
            alpha,
            beta,
            o,
            saved,
        })
    } else {
        None
    };

    let (w, w_learned) = match cfg.fixed_merge(overrides.merge) {
        Some((a, b)) => {
            let mut w = Tensor::zeros(&[len, hl, 2]);
            for pair in w.data_mut().chunks_exact_mut(2) {
                pair[0] = T::lit(a);
                pair[1] = T::lit(b);
            }
            (w, false)
        }
        None => {
            let src = if cfg.ablations.weights_from_x {
                x.clone()
            } else {
                act[0].clone().reshape(&[len, cfg.inner()])?
            };
            let wp = store.value(&p("w_proj"))?;
            macs.projections += linear_macs(&src, wp);
            (pair_softmax(&matmul(&src, wp)?, hl), true)
        }
    };

    let single = cfg.single_norm();
    let (m, merge) = if single {
        let s = combine(
            attn.as_ref().map(|a| &a.o),
            lin.as_ref().map(|l| &l.o),
            &w,
            h,
            dh,
        );
        let m = rmsnorm(&s, store.value(&p("o_norm_nla"))?, eps)?;
        (m, MergeSaved::Single { s })
    } else {
        let n_nla = match &attn {
            Some(a) => Some(rmsnorm(&a.o, store.value(&p("o_norm_nla"))?, eps)?),
            None => None,
        };
        let n_la = match &lin {
            Some(l) => Some(rmsnorm(&l.o, store.value(&p("o_norm_la"))?, eps)?),
            None => None,
        };
        let m = combine(n_nla.as_ref(), n_la.as_ref(), &w, h, dh);
        (m, MergeSaved::PerPath { n_nla, n_la })
    };
    let m = m.reshape(&[len, cfg.inner()])?;

    let (z, gate) = if overrides.gate_open {
        (m.clone(), None)
    } else {
        let gl = linear(
            x,
            store.value(&p("gate_proj"))?,
            Some(store.value(&p("gate_bias"))?),
        )?;
        macs.projections += linear_macs(x, store.value(&p("gate_proj"))?);
        let gs = gl.map(sigmoid);
        let mut z = m.clone();
        for (a, &g) in z.data_mut().iter_mut().zip(gs.data()) {
            *a *= g;
        }
        (z, Some(gs))
    };
    let out_w = store.value(&p("out_proj"))?;
    let y = matmul(&z, out_w)?;
    macs.projections += linear_macs(&z, out_w);

    let [p0, p1, p2]: [Tensor<T>; 3] = proj
        .try_into()
        .map_err(|_| Error::invalid("block", "qkv"))?;
    let [c0, c1, c2]: [Tensor<T>; 3] =
        pre.try_into().map_err(|_| Error::invalid("block", "qkv"))?;
    let [a0, a1, a2]: [Tensor<T>; 3] =
        act.try_into().map_err(|_| Error::invalid("block", "qkv"))?;
    let saved = BlockSaved {
        prefix: String::from(prefix),
        x: x.clone(),
        len,
        proj: [p0, p1, p2],
        pre_act: [c0, c1, c2],
        qkv: [a0, a1, a2],
        attn,
        lin,
        routing,
        routing_learned,
        valid_chunks: valid_chunks.map(|v| v.to_vec()),
        w,
        w_learned,
        merge,
        gate,
        m,
        z,
        macs,
    };
    Ok((y, saved))
}

/// Backward for [`block_forward`]. Parameter gradients are accumulated into
/// `store`; returns `dX`.
pub fn block_backward<T: Real>(
    dy: &Tensor<T>,
    saved: &BlockSaved<T>,
    store: &mut ParamStore<T>,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    let len = saved.len;
    if dy.shape() != [len, cfg.d_model] {
        return Err(Error::shape(
            "block_backward",
            dy.shape(),
            &[len, cfg.d_model],
        ));
    }
    if saved.z.shape() != [len, cfg.inner()] {
        return Err(Error::StaleState(
            "block saved state does not match the config",
        ));
    }
    let prefix = saved.prefix.as_str();
    let p = |s: &str| pname(prefix, s);
    let (h, hl, dh) = (cfg.h_softmax, cfg.h_lin, cfg.d_head);
    let eps = T::lit(cfg.norm_eps);
    let x = &saved.x;

    let dz = linear_backward(store, &p("out_proj"), None, &saved.z, dy)?;
    let mut dx = Tensor::zeros(x.shape());

    // gate
    let dm = match &saved.gate {
        None => dz,
        Some(gs) => {
            let mut dm = dz.clone();
            let mut dgl = Tensor::zeros(gs.shape());
            for i in 0..dm.len() {
                let g = gs.data()[i];
                dm.data_mut()[i] = dz.data()[i] * g;
                dgl.data_mut()[i] = dz.data()[i] * saved.m.data()[i] * g * (T::one() - g);
            }
            dx.add_assign(&linear_backward(
                store,
                &p("gate_proj"),
                Some(&p("gate_bias")),
                x,
                &dgl,
            )?)?;
            dm
        }
    };
    let dm = dm.reshape(&[len, h, dh])?;

    // merge
    let g = cfg.group_size();
    let mut dw = Tensor::<T>::zeros(&[len, hl, 2]);
    let mut d_onla: Option<Tensor<T>> = saved.attn.as_ref().map(|_| Tensor::zeros(&[len, h, dh]));
    let mut d_ola: Option<Tensor<T>> = saved.lin.as_ref().map(|_| Tensor::zeros(&[len, hl, dh]));
    match &saved.merge {
        MergeSaved::PerPath { n_nla, n_la } => {
            let mut dn1 = n_nla.as_ref().map(|_| Tensor::<T>::zeros(&[len, h, dh]));
            let mut dn2 = n_la.as_ref().map(|_| Tensor::<T>::zeros(&[len, hl, dh]));
            for t in 0..len {
                for hh in 0..h {
                    let gi = hh / g;
                    let wi = (t * hl + gi) * 2;
                    let (w0, w1) = (saved.w.data()[wi], saved.w.data()[wi + 1]);
                    let r = (t * h + hh) * dh..(t * h + hh + 1) * dh;
                    let rg = (t * hl + gi) * dh..(t * hl + gi + 1) * dh;
                    let dmr = &dm.data()[r.clone()];
                    if let (Some(n1), Some(d1)) = (n_nla, dn1.as_mut()) {
                        let src = &n1.data()[r.clone()];
                        let mut acc = T::zero();
                        for ((o, &a), &s) in d1.data_mut()[r.clone()].iter_mut().zip(dmr).zip(src) {
                            *o += w0 * a;
                            acc += a * s;
                        }
                        dw.data_mut()[wi] += acc;
                    }
                    if let (Some(n2), Some(d2)) = (n_la, dn2.as_mut()) {
                        let src = &n2.data()[rg.clone()];
                        let mut acc = T::zero();
                        for ((o, &a), &s) in d2.data_mut()[rg.clone()].iter_mut().zip(dmr).zip(src)
                        {
                            *o += w1 * a;
                            acc += a * s;
                        }
                        dw.data_mut()[wi + 1] += acc;
                    }
                }
            }
            if let (Some(a), Some(d1)) = (&saved.attn, dn1) {
                let (dx1, dg) = rmsnorm_backward(&a.o, store.value(&p("o_norm_nla"))?, eps, &d1)?;
                store.grad_mut(&p("o_norm_nla"))?.add_assign(&dg)?;
                d_onla = Some(dx1);
            }
            if let (Some(l), Some(d2)) = (&saved.lin, dn2) {
                let (dx2, dg) = rmsnorm_backward(&l.o, store.value(&p("o_norm_la"))?, eps, &d2)?;
                store.grad_mut(&p("o_norm_la"))?.add_assign(&dg)?;
                d_ola = Some(dx2);
            }
        }
        MergeSaved::Single { s } => {
            let (ds, dg) = rmsnorm_backward(s, store.value(&p("o_norm_nla"))?, eps, &dm)?;
            store.grad_mut(&p("o_norm_nla"))?.add_assign(&dg)?;
            for t in 0..len {
                for hh in 0..h {
                    let gi = hh / g;
                    let wi = (t * hl + gi) * 2;
                    let (w0, w1) = (saved.w.data()[wi], saved.w.data()[wi + 1]);
                    let r = (t * h + hh) * dh..(t * h + hh + 1) * dh;
                    let rg = (t * hl + gi) * dh..(t * hl + gi + 1) * dh;
                    let dsr = &ds.data()[r.clone()];
                    if let (Some(a), Some(d1)) = (&saved.attn, d_onla.as_mut()) {
                        let mut acc = T::zero();
                        for ((o, &v), &src) in d1.data_mut()[r.clone()]
                            .iter_mut()
                            .zip(dsr)
                            .zip(&a.o.data()[r.clone()])
                        {
                            *o += w0 * v;
                            acc += v * src;
                        }
                        dw.data_mut()[wi] += acc;
                    }
                    if let (Some(l), Some(d2)) = (&saved.lin, d_ola.as_mut()) {
                        let mut acc = T::zero();
                        for ((o, &v), &src) in d2.data_mut()[rg.clone()]
                            .iter_mut()
                            .zip(dsr)
                            .zip(&l.o.data()[rg.clone()])
                        {
                            *o += w1 * v;
                            acc += v * src;
                        }
                        dw.data_mut()[wi + 1] += acc;
                    }
                }
            }
        }
    }

    let mut dq = Tensor::<T>::zeros(&[len, h, dh]);
    let mut dk = Tensor::<T>::zeros(&[len, h, dh]);
    let mut dv = Tensor::<T>::zeros(&[len, h, dh]);

    // merge weights
    if saved.w_learned {
        let mut dl = Tensor::zeros(&[len, 2 * hl]);
        for ((o, wv), dwv) in dl
            .data_mut()
            .chunks_exact_mut(2)
            .zip(saved.w.data().chunks_exact(2))
            .zip(dw.data().chunks_exact(2))
        {
            let mean = wv[0] * dwv[0] + wv[1] * dwv[1];
            o[0] = wv[0] * (dwv[0] - mean);
            o[1] = wv[1] * (dwv[1] - mean);
        }
        if cfg.ablations.weights_from_x {
            dx.add_assign(&linear_backward(store, &p("w_proj"), None, x, &dl)?)?;
        } else {
            let src = saved.qkv[0].clone().reshape(&[len, cfg.inner()])?;
            let dsrc = linear_backward(store, &p("w_proj"), None, &src, &dl)?;
            dq.add_assign(&dsrc.reshape(&[len, h, dh])?)?;
        }
    }

    // paths
    let mut dscore_nla = Tensor::<T>::zeros(&[hl, saved.routing.n_chunks()]);
    let mut dscore_la = Tensor::<T>::zeros(&[hl, saved.routing.n_chunks()]);
    if let (Some(a), Some(d_o)) = (&saved.attn, d_onla) {
        let gr = masked_attention_backward(
            &d_o,
            &a.saved,
            &a.qr,
            &a.kr,
            &saved.qkv[2],
            &a.mask,
            &cfg.group_of_head(),
            false,
        )?;
        dscore_nla = gr.dscore;
        dv.add_assign(&gr.dv)?;
        let (dqn, dkn) = if cfg.rope {
            let pos: Vec<usize> = (0..len).collect();
            (
                rope_backward(&gr.dq, &pos, cfg.rope_theta)?,
                rope_backward(&gr.dk, &pos, cfg.rope_theta)?,
            )
        } else {
            (gr.dq, gr.dk)
        };
        let (dq1, dgq) = rmsnorm_backward(&saved.qkv[0], store.value(&p("q_norm"))?, eps, &dqn)?;
        let (dk1, dgk) = rmsnorm_backward(&saved.qkv[1], store.value(&p("k_norm"))?, eps, &dkn)?;
        store.grad_mut(&p("q_norm"))?.add_assign(&dgq)?;
        store.grad_mut(&p("k_norm"))?.add_assign(&dgk)?;
        dq.add_assign(&dq1)?;
        dk.add_assign(&dk1)?;
    }
    if let (Some(l), Some(d_o)) = (&saved.lin, d_ola) {
        let opts = cfg.effective_gdn_options();
        let gr = gdn_chunkwise_backward(
            &d_o,
            &l.saved,
            &l.qn,
            &l.kn,
            &l.vl,
            &l.alpha,
            &l.beta,
            &saved.routing,
            &opts,
            None,
        )?;
        dscore_la = gr.dscore;
        let l2 = T::lit(cfg.l2_eps);
        let dql = l2_normalize_backward(&l.ql, l2, &gr.dq)?;
        let dkl = l2_normalize_backward(&l.kl, l2, &gr.dk)?;
        group_mean_backward(&dql, h, &mut dq);
        group_mean_backward(&dkl, h, &mut dk);
        group_mean_backward(&gr.dv, h, &mut dv);
        // α = exp(−softplus(z)) ⇒ dα/dz = −α·σ(z); β = σ(z) ⇒ dβ/dz = β(1−β)
        let mut dza = Tensor::zeros(l.za.shape());
        for i in 0..dza.len() {
            dza.data_mut()[i] = -gr.dalpha.data()[i] * l.alpha.data()[i] * sigmoid(l.za.data()[i]);
        }
        let mut dzb = Tensor::zeros(l.zb.shape());
        for i in 0..dzb.len() {
            let b = l.beta.data()[i];
            dzb.data_mut()[i] = gr.dbeta.data()[i] * b * (T::one() - b);
        }
        dx.add_assign(&linear_backward(
            store,
            &p("a_proj"),
            Some(&p("a_bias")),
            x,
            &dza,
        )?)?;
        dx.add_assign(&linear_backward(
            store,
            &p("b_proj"),
            Some(&p("b_bias")),
            x,
            &dzb,
        )?)?;
    }

    // router (straight-through)
    if saved.routing_learned {
        let w_score = store.value(&p("w_score"))?.clone();
        let (dws, dxs, dbias) = score_backward(
            &dscore_nla,
            &dscore_la,
            &saved.routing,
            x,
            &w_score,
            cfg.chunk,
            saved.valid_chunks.as_deref(),
        )?;
        store.grad_mut(&p("w_score"))?.add_assign(&dws)?;
        if cfg.score_bias {
            store.grad_mut(&p("score_bias"))?.add_assign(&dbias)?;
        }
        dx.add_assign(&dxs)?;
    }

    // SiLU, conv, projections
    for (i, (s, d)) in ["q", "k", "v"].iter().zip([dq, dk, dv]).enumerate() {
        let mut dc = d.reshape(&[len, cfg.inner()])?;
        for (g, &c) in dc.data_mut().iter_mut().zip(saved.pre_act[i].data()) {
            *g *= silu_grad(c);
        }
        let conv_name = p(&format!("{s}_conv"));
        let (dproj, dkern) =
            depthwise_causal_conv_backward(&saved.proj[i], store.value(&conv_name)?, &dc)?;
        store.grad_mut(&conv_name)?.add_assign(&dkern)?;
        dx.add_assign(&linear_backward(
            store,
            &p(&format!("{s}_proj")),
            None,
            x,
            &dproj,
        )?)?;
    }
    Ok(dx)
}
