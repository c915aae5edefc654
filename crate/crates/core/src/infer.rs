//! Token-by-token decoding with routing-aware caches.
//!
//! Tokens of the chunk in progress sit in a buffer. Their outputs do not
//! depend on the chunk's own routing: the softmax path always reads its own
//! chunk, and the linear path runs the delta rule from the committed state.
//! When the chunk completes, each group routes it. A softmax-routed chunk
//! moves its keys and values into the KV cache and only decays the committed
//! linear state; a linear-routed chunk replaces the committed state with the
//! one the buffer built up. Only softmax-routed tokens are ever cached.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attn::{rope_apply, OnlineRow};
use crate::block::{combine, group_mean, linear, pair_softmax, BlockConfig, LayerKind};
use crate::error::{Error, Result};
use crate::gdn::{recurrent_step_in_place, LinearState};
use crate::model::{forward_padded, layer_prefix, mlp_forward, ModelConfig, ModelOverrides};
use crate::numerics::activation::{sigmoid, silu, softplus};
use crate::numerics::conv::depthwise_causal_conv;
use crate::numerics::linalg::{dot, gemm_a_bt_acc, matmul};
use crate::numerics::norm::{l2_normalize, rmsnorm};
use crate::numerics::pool::chunk_mean;
use crate::params::ParamStore;
use crate::real::Real;
use crate::router::{route_one, score_row, ChunkRouting, Route};
use crate::tensor::Tensor;

/// Decode-time memory of one layer.
#[derive(Debug, Clone)]
struct LayerCache<T> {
    /// Last `kw − 1` pre-convolution rows of q, k, v (oldest first).
    conv_tail: Option<[Tensor<T>; 3]>,
    /// Per group, softmax-routed keys and values as `[rows × G × d]`.
    kv_k: Vec<Vec<T>>,
    kv_v: Vec<Vec<T>>,
    /// Buffered keys (after norm and rope) and values of the open chunk,
    /// `[n × h × d]`.
    buf_k: Vec<T>,
    buf_v: Vec<T>,
    /// Buffered block inputs of the open chunk, `[n × d_model]`.
    buf_x: Vec<T>,
    /// State as of the last completed chunk.
    committed: Option<LinearState<T>>,
    /// `committed` advanced through the open chunk by the delta rule.
    pending: Option<LinearState<T>>,
    /// Per group, running `Σ ln α` over the open chunk.
    log_alpha: Vec<T>,
    /// Routing of every completed chunk, `[chunk][group]`.
    routes: Vec<Vec<Route>>,
}

impl<T: Real> LayerCache<T> {
    fn new(cfg: &BlockConfig) -> Self {
        let (hl, d) = (cfg.h_lin, cfg.d_head);
        let lin = cfg.has_linear().then(|| LinearState::zeros(hl, d, d));
        let tail = (cfg.conv_width > 1).then(|| {
            let z = Tensor::zeros(&[cfg.conv_width - 1, cfg.inner()]);
            [z.clone(), z.clone(), z]
        });
        LayerCache {
            conv_tail: tail,
            kv_k: vec![Vec::new(); hl],
            kv_v: vec![Vec::new(); hl],
            buf_k: Vec::new(),
            buf_v: Vec::new(),
            buf_x: Vec::new(),
            committed: lin.clone(),
            pending: lin,
            log_alpha: vec![T::zero(); hl],
            routes: Vec::new(),
        }
    }
}

/// Everything decoding needs to continue a sequence.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    overrides: ModelOverrides<T>,
    layers: Vec<LayerCache<T>>,
    pos: usize,
}

/// Scalars held by a [`DecodeState`], summed over layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Footprint {
    /// Cached softmax keys and values.
    pub kv: usize,
    /// Committed linear states.
    pub linear: usize,
    /// Open-chunk buffers, including the pending linear state.
    pub buffer: usize,
}

impl Footprint {
    pub fn total(&self) -> usize {
        self.kv + self.linear + self.buffer
    }
}

impl<T: Real> DecodeState<T> {
    pub fn new(cfg: &ModelConfig, overrides: ModelOverrides<T>) -> Result<Self> {
        cfg.validate()?;
        if let Some(f) = &overrides.fixed {
            if f.len() != cfg.n_layers {
                return Err(Error::shape("decode routing", &[f.len()], &[cfg.n_layers]));
            }
        }
        Ok(DecodeState {
            overrides,
            layers: (0..cfg.n_layers)
                .map(|l| LayerCache::new(&cfg.layer_config(l)))
                .collect(),
            pos: 0,
        })
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Routing of completed chunks for `layer`, as `[chunk][group]`.
    pub fn routes(&self, layer: usize) -> &[Vec<Route>] {
        &self.layers[layer].routes
    }

    /// Cached softmax rows (tokens) per group of `layer`.
    pub fn kv_rows(&self, layer: usize, cfg: &ModelConfig) -> Vec<usize> {
        let row = cfg.block.group_size() * cfg.block.d_head;
        self.layers[layer]
            .kv_k
            .iter()
            .map(|k| k.len() / row)
            .collect()
    }

    /// Rows in the open-chunk buffer.
    pub fn buffered(&self, cfg: &ModelConfig) -> usize {
        self.pos % cfg.block.chunk
    }

    pub fn footprint(&self) -> Footprint {
        let mut f = Footprint::default();
        for l in &self.layers {
            f.kv += l.kv_k.iter().chain(&l.kv_v).map(Vec::len).sum::<usize>();
            f.linear += l.committed.as_ref().map_or(0, |s| s.s.len());
            f.buffer += l.buf_k.len() + l.buf_v.len() + l.buf_x.len();
            f.buffer += l.pending.as_ref().map_or(0, |s| s.s.len()) + l.log_alpha.len();
            if let Some(t) = &l.conv_tail {
                f.buffer += t.iter().map(Tensor::len).sum::<usize>();
            }
        }
        f
    }
}

/// See [`DecodeState::footprint`].
pub fn state_footprint<T: Real>(state: &DecodeState<T>) -> Footprint {
    state.footprint()
}

/// KV scalars the cache must hold for one layer, given the number of
/// softmax-routed chunks of each group.
pub fn expected_kv_scalars(cfg: &BlockConfig, softmax_chunks: &[usize]) -> usize {
    softmax_chunks
        .iter()
        .map(|&n| cfg.chunk * n * cfg.group_size() * 2 * cfg.d_head)
        .sum()
}

fn truncate_routing<T: Real>(r: &ChunkRouting<T>, n_chunks: usize) -> Result<ChunkRouting<T>> {
    if r.n_chunks() < n_chunks {
        return Err(Error::Capacity {
            needed: n_chunks,
            available: r.n_chunks(),
        });
    }
    let mut choice = Vec::with_capacity(r.n_groups() * n_chunks);
    for g in 0..r.n_groups() {
        for t in 0..n_chunks {
            choice.push(r.get(g, t));
        }
    }
    ChunkRouting::from_choices(r.n_groups(), n_chunks, choice)
}

/// Runs the training forward over the complete chunks of `tokens`, fills the
/// caches from it, then decodes the remainder. Returns the state and the
/// logits of every position, `[L × V]`.
pub fn prefill<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    tokens: &[u32],
    overrides: &ModelOverrides<T>,
) -> Result<(DecodeState<T>, Tensor<T>)> {
    if tokens.is_empty() {
        return Err(Error::invalid(
            "prefill",
            "empty prompt; start from DecodeState::new instead",
        ));
    }
    let mut state = DecodeState::new(cfg, overrides.clone())?;
    let c = cfg.block.chunk;
    let n_full = tokens.len() / c * c;
    let mut logits = Vec::with_capacity(tokens.len() * cfg.vocab);
    if n_full > 0 {
        let n_chunks = n_full / c;
        let mut ov = overrides.clone();
        if let Some(f) = &overrides.fixed {
            ov.fixed = Some(
                f.iter()
                    .map(|r| truncate_routing(r, n_chunks))
                    .collect::<Result<_>>()?,
            );
        }
        let saved = forward_padded(cfg, store, &tokens[..n_full], &ov)?;
        logits.extend_from_slice(saved.logits.data());
        for (l, cache) in state.layers.iter_mut().enumerate() {
            let bcfg = cfg.layer_config(l);
            let block = saved.block(l);
            let routing = block.routing();
            let (h, d, g) = (bcfg.h_softmax, bcfg.d_head, bcfg.group_size());
            if let Some(keys) = block.softmax_keys() {
                let vals = block.values();
                for t in 0..n_chunks {
                    for grp in 0..bcfg.h_lin {
                        if routing.get(grp, t) != Route::Softmax {
                            continue;
                        }
                        for r in t * c..(t + 1) * c {
                            let o = (r * h + grp * g) * d;
                            cache.kv_k[grp].extend_from_slice(&keys.data()[o..o + g * d]);
                            cache.kv_v[grp].extend_from_slice(&vals.data()[o..o + g * d]);
                        }
                    }
                }
            }
            if let Some(s) = block.final_linear_state() {
                cache.committed = Some(s.clone());
                cache.pending = Some(s.clone());
            }
            if let Some(tail) = cache.conv_tail.as_mut() {
                let kw1 = bcfg.conv_width - 1;
                for (dst, proj) in tail.iter_mut().zip(block.projections()) {
                    let w = proj.last_dim();
                    for r in 0..kw1 {
                        // rows before the sequence start stay zero
                        if let Some(src) = (n_full + r).checked_sub(kw1) {
                            dst.row_mut(r)
                                .copy_from_slice(&proj.data()[src * w..(src + 1) * w]);
                        }
                    }
                }
            }
            cache.routes = (0..n_chunks)
                .map(|t| (0..bcfg.h_lin).map(|grp| routing.get(grp, t)).collect())
                .collect();
        }
        state.pos = n_full;
    }
    for &tok in &tokens[n_full..] {
        logits.extend(decode_step(cfg, store, &mut state, tok)?);
    }
    Ok((state, Tensor::new(&[tokens.len(), cfg.vocab], logits)?))
}

/// Consumes one token and returns its next-token logits.
pub fn decode_step<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    state: &mut DecodeState<T>,
    token: u32,
) -> Result<Vec<T>> {
    if state.layers.len() != cfg.n_layers {
        return Err(Error::StaleState("decode state has another layer count"));
    }
    let embed = store.value("embed")?;
    let (vocab, d) = (embed.shape()[0], embed.shape()[1]);
    if token as usize >= vocab {
        return Err(Error::OutOfVocab {
            token: token as usize,
            vocab,
        });
    }
    let eps = T::lit(cfg.block.norm_eps);
    let mut h = Tensor::new(&[1, d], embed.row(token as usize).to_vec())?;
    let pos = state.pos;
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        let bcfg = cfg.layer_config(l);
        let a = rmsnorm(&h, store.value(&alloc::format!("{p}norm1"))?, eps)?;
        let y = block_decode(
            &bcfg,
            store,
            &alloc::format!("{p}mixer."),
            &mut state.layers[l],
            &a,
            pos,
            &state.overrides,
            l,
        )?;
        h.add_assign(&y)?;
        let b = rmsnorm(&h, store.value(&alloc::format!("{p}norm2"))?, eps)?;
        let (m, ..) = mlp_forward(&b, store, &p)?;
        h.add_assign(&m)?;
    }
    let hf = rmsnorm(&h, store.value("final_norm")?, eps)?;
    let mut logits = vec![T::zero(); vocab];
    gemm_a_bt_acc(hf.data(), embed.data(), &mut logits, 1, d, vocab);
    state.pos += 1;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "decode_step" });
    }
    Ok(logits)
}

fn forced_route<T: Real>(
    ov: &ModelOverrides<T>,
    layer: usize,
    chunk: usize,
    group: usize,
) -> Result<Option<Route>> {
    match &ov.fixed {
        Some(f) => {
            let r = &f[layer];
            if chunk >= r.n_chunks() {
                return Err(Error::Capacity {
                    needed: chunk + 1,
                    available: r.n_chunks(),
                });
            }
            Ok(Some(r.get(group, chunk)))
        }
        None => Ok(ov.routing.forced_chunk(chunk)),
    }
}

/// One token through one block. `x` is `[1 × d_model]`.
fn block_decode<T: Real>(
    cfg: &BlockConfig,
    store: &ParamStore<T>,
    prefix: &str,
    cache: &mut LayerCache<T>,
    x: &Tensor<T>,
    pos: usize,
    ov: &ModelOverrides<T>,
    layer: usize,
) -> Result<Tensor<T>> {
    let p = |s: &str| alloc::format!("{prefix}{s}");
    let (h, hl, dh, c) = (cfg.h_softmax, cfg.h_lin, cfg.d_head, cfg.chunk);
    let g = cfg.group_size();
    let eps = T::lit(cfg.norm_eps);

    let mut act: Vec<Tensor<T>> = Vec::with_capacity(3);
    for (i, s) in ["q", "k", "v"].into_iter().enumerate() {
        let y = matmul(x, store.value(&p(&alloc::format!("{s}_proj")))?)?;
        let kern = store.value(&p(&alloc::format!("{s}_conv")))?;
        let conv = depthwise_causal_conv(&y, kern, cache.conv_tail.as_ref().map(|t| &t[i]))?;
        if let Some(tail) = cache.conv_tail.as_mut() {
            let t = &mut tail[i];
            let (rows, w) = (t.rows(), t.last_dim());
            t.data_mut().copy_within(w.., 0);
            t.data_mut()[(rows - 1) * w..].copy_from_slice(y.data());
        }
        act.push(conv.map(silu).reshape(&[1, h, dh])?);
    }
    cache.buf_x.extend_from_slice(x.data());
    let n_buf = cache.buf_x.len() / cfg.d_model;
    let chunk_idx = pos / c;

    let o_nla = if cfg.has_softmax() {
        let qn = rmsnorm(&act[0], store.value(&p("q_norm"))?, eps)?;
        let kn = rmsnorm(&act[1], store.value(&p("k_norm"))?, eps)?;
        let (qr, kr) = if cfg.rope {
            (
                rope_apply(&qn, &[pos], cfg.rope_theta)?,
                rope_apply(&kn, &[pos], cfg.rope_theta)?,
            )
        } else {
            (qn, kn)
        };
        cache.buf_k.extend_from_slice(kr.data());
        cache.buf_v.extend_from_slice(act[2].data());
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut scores = vec![T::zero(); c];
        let mut o = Tensor::zeros(&[1, h, dh]);
        for head in 0..h {
            let (grp, hi) = (head / g, head % g);
            let q = &qr.data()[head * dh..(head + 1) * dh];
            let mut row = OnlineRow::new(dh);
            let cached = cache.kv_k[grp].len() / (g * dh);
            for ch in 0..cached / c {
                let base = (ch * c * g + hi) * dh;
                row.absorb(
                    q,
                    &cache.kv_k[grp],
                    &cache.kv_v[grp],
                    base,
                    g * dh,
                    c,
                    scale,
                    &mut scores,
                );
            }
            if cfg.softmax_diagonal() {
                row.absorb(
                    q,
                    &cache.buf_k,
                    &cache.buf_v,
                    head * dh,
                    h * dh,
                    n_buf,
                    scale,
                    &mut scores,
                );
            }
            row.finish(&mut o.data_mut()[head * dh..(head + 1) * dh]);
        }
        Some(o)
    } else {
        None
    };

    let o_la = if cfg.has_linear() {
        let l2 = T::lit(cfg.l2_eps);
        let qn = l2_normalize(&group_mean(&act[0], hl), l2)?;
        let kn = l2_normalize(&group_mean(&act[1], hl), l2)?;
        let vl = group_mean(&act[2], hl);
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
        let opts = cfg.effective_gdn_options();
        let pending = cache
            .pending
            .as_mut()
            .ok_or(Error::StaleState("missing linear state"))?;
        let committed = cache
            .committed
            .as_ref()
            .ok_or(Error::StaleState("missing linear state"))?;
        let mut o = Tensor::zeros(&[1, hl, dh]);
        for grp in 0..hl {
            let alpha = (-softplus(za.data()[grp])).exp();
            let beta = sigmoid(zb.data()[grp]);
            cache.log_alpha[grp] += alpha.ln();
            let q = &qn.data()[grp * dh..(grp + 1) * dh];
            let k = &kn.data()[grp * dh..(grp + 1) * dh];
            let v = &vl.data()[grp * dh..(grp + 1) * dh];
            let out = &mut o.data_mut()[grp * dh..(grp + 1) * dh];
            recurrent_step_in_place(pending.head_mut(grp), q, k, v, alpha, beta, out);
            if !opts.inner_output {
                let e = cache.log_alpha[grp].exp();
                let s = committed.head(grp);
                for (a, o) in out.iter_mut().enumerate() {
                    *o = e * dot(&s[a * dh..(a + 1) * dh], q);
                }
            }
        }
        Some(o)
    } else {
        None
    };

    let w = match cfg.fixed_merge(ov.merge) {
        Some((a, b)) => {
            let mut w = Tensor::zeros(&[1, hl, 2]);
            for pair in w.data_mut().chunks_exact_mut(2) {
                pair[0] = T::lit(a);
                pair[1] = T::lit(b);
            }
            w
        }
        None => {
            let src = if cfg.ablations.weights_from_x {
                x.clone()
            } else {
                act[0].clone().reshape(&[1, cfg.inner()])?
            };
            pair_softmax(&matmul(&src, store.value(&p("w_proj"))?)?, hl)
        }
    };
    let m = if cfg.single_norm() {
        let s = combine(o_nla.as_ref(), o_la.as_ref(), &w, h, dh);
        rmsnorm(&s, store.value(&p("o_norm_nla"))?, eps)?
    } else {
        let n_nla = match &o_nla {
            Some(o) => Some(rmsnorm(o, store.value(&p("o_norm_nla"))?, eps)?),
            None => None,
        };
        let n_la = match &o_la {
            Some(o) => Some(rmsnorm(o, store.value(&p("o_norm_la"))?, eps)?),
            None => None,
        };
        combine(n_nla.as_ref(), n_la.as_ref(), &w, h, dh)
    };
    let mut z = m.reshape(&[1, cfg.inner()])?;
    if !ov.gate_open {
        let gl = linear(
            x,
            store.value(&p("gate_proj"))?,
            Some(store.value(&p("gate_bias"))?),
        )?;
        for (a, &gv) in z.data_mut().iter_mut().zip(gl.data()) {
            *a *= sigmoid(gv);
        }
    }
    let y = matmul(&z, store.value(&p("out_proj"))?)?;

    if n_buf == c {
        commit_chunk(cfg, store, prefix, cache, chunk_idx, ov, layer)?;
    }
    Ok(y)
}

/// Routes the completed chunk per group and moves the buffer accordingly.
fn commit_chunk<T: Real>(
    cfg: &BlockConfig,
    store: &ParamStore<T>,
    prefix: &str,
    cache: &mut LayerCache<T>,
    chunk_idx: usize,
    ov: &ModelOverrides<T>,
    layer: usize,
) -> Result<()> {
    let (hl, dh, h, g, c) = (
        cfg.h_lin,
        cfg.d_head,
        cfg.h_softmax,
        cfg.group_size(),
        cfg.chunk,
    );
    let routes: Vec<Route> = match cfg.kind {
        LayerKind::GdnOnly => vec![Route::Linear; hl],
        LayerKind::SoftmaxOnly => vec![Route::Softmax; hl],
        LayerKind::Hybrid => {
            let mut forced = Vec::with_capacity(hl);
            for grp in 0..hl {
                forced.push(forced_route(ov, layer, chunk_idx, grp)?);
            }
            if forced.iter().all(Option::is_some) {
                forced.into_iter().flatten().collect()
            } else {
                let d = cfg.d_model;
                let mut mean = vec![T::zero(); d];
                chunk_mean(&cache.buf_x, d, &mut mean);
                let bias = if cfg.score_bias {
                    Some(store.value(&alloc::format!("{prefix}score_bias"))?)
                } else {
                    None
                };
                let row = score_row(
                    &mean,
                    store.value(&alloc::format!("{prefix}w_score"))?,
                    bias,
                );
                (0..hl)
                    .map(|grp| route_one(row[2 * grp], row[2 * grp + 1], grp, chunk_idx))
                    .collect::<Result<_>>()?
            }
        }
    };
    let decay_softmax = cfg.effective_gdn_options().decay_softmax_chunks;
    for (grp, &route) in routes.iter().enumerate() {
        if route == Route::Softmax && cfg.has_softmax() {
            for r in 0..c {
                let o = (r * h + grp * g) * dh;
                cache.kv_k[grp].extend_from_slice(&cache.buf_k[o..o + g * dh]);
                cache.kv_v[grp].extend_from_slice(&cache.buf_v[o..o + g * dh]);
            }
        }
        if let (Some(committed), Some(pending)) = (cache.committed.as_mut(), cache.pending.as_mut())
        {
            match route {
                Route::Linear => committed.head_mut(grp).copy_from_slice(pending.head(grp)),
                Route::Softmax if decay_softmax => {
                    let decay = cache.log_alpha[grp].exp();
                    committed.head_mut(grp).iter_mut().for_each(|x| *x *= decay);
                }
                Route::Softmax => {}
            }
            pending.head_mut(grp).copy_from_slice(committed.head(grp));
        }
        cache.log_alpha[grp] = T::zero();
    }
    cache.routes.push(routes);
    cache.buf_k.clear();
    cache.buf_v.clear();
    cache.buf_x.clear();
    Ok(())
}

/// How the next token is picked from logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature(f64),
}

/// Picks a token; greedy ties go to the lowest id.
pub fn sample<T: Real, R: Rng + ?Sized>(logits: &[T], sampler: Sampler, rng: &mut R) -> u32 {
    match sampler {
        Sampler::Greedy => argmax(logits) as u32,
        Sampler::Temperature(t) if t <= 0.0 => argmax(logits) as u32,
        Sampler::Temperature(t) => {
            let m = logits
                .iter()
                .map(|v| v.to_f64_lossy())
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits
                .iter()
                .map(|v| num_traits::Float::exp((v.to_f64_lossy() - m) / t))
                .collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    return i as u32;
                }
                u -= wi;
            }
            (w.len() - 1) as u32
        }
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Prefills `prompt` and appends `n_new` sampled tokens.
pub fn generate<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    prompt: &[u32],
    n_new: usize,
    sampler: Sampler,
    overrides: &ModelOverrides<T>,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::invalid("generate", "empty prompt"));
    }
    let (mut state, logits) = prefill(cfg, store, prompt, overrides)?;
    let mut out = Vec::with_capacity(n_new);
    let mut last = logits.row(prompt.len() - 1).to_vec();
    for _ in 0..n_new {
        let tok = sample(&last, sampler, rng);
        out.push(tok);
        last = decode_step(cfg, store, &mut state, tok)?;
    }
    Ok(out)
}
