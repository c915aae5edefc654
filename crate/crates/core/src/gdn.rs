//! Gated DeltaNet linear attention.
//!
//! State layout is value-major: `S` is `[d_v × d_k]` per head and `o = S q`.
//! One recurrent step is
//!
//! ```text
//! S' = α·(S − β·(S k) kᵀ) + β·v kᵀ,    o = S' q
//! ```
//!
//! The chunkwise kernel writes a sub-chunk of `n` steps starting from `S₀`
//! as `S_i = e^{g_i} S₀ + Σ_{j≤i} e^{g_i−g_j} u_j k_jᵀ`, with `g` the running
//! sum of `ln α` and the pseudo-values `u` obtained by forward substitution
//! through the unit lower-triangular system
//!
//! ```text
//! u_i + Σ_{j<i} β_i e^{g_i−g_j} (k_i·k_j) u_j = β_i (v_i − e^{g_i} S₀ k_i)
//! ```
//!
//! Routing acts at the granularity of routing chunks (`C`, a multiple of the
//! sub-chunk size `c`). Outputs inside a chunk always follow the exact
//! recurrence from the state entering the chunk. The state leaving a chunk is
//! the full update for linear-routed chunks; for softmax-routed chunks only
//! the chunk's cumulative decay is applied and its writes are dropped.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::linalg::{axpy, dot};
use crate::real::Real;
use crate::router::{ChunkRouting, Route};
use crate::tensor::{check_finite, Tensor};

/// Per-head linear memory, `[h × d_v × d_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearState<T> {
    pub s: Tensor<T>,
}

impl<T: Real> LinearState<T> {
    pub fn zeros(heads: usize, dv: usize, dk: usize) -> Self {
        LinearState {
            s: Tensor::zeros(&[heads, dv, dk]),
        }
    }

    pub fn heads(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn head(&self, h: usize) -> &[T] {
        let n = self.s.shape()[1] * self.s.shape()[2];
        &self.s.data()[h * n..(h + 1) * n]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut [T] {
        let n = self.s.shape()[1] * self.s.shape()[2];
        &mut self.s.data_mut()[h * n..(h + 1) * n]
    }
}

/// One exact recurrent step on a `[d_v × d_k]` head state, in place.
/// Returns nothing; `out` receives `S' q`.
pub fn recurrent_step_in_place<T: Real>(
    s: &mut [T],
    q: &[T],
    k: &[T],
    v: &[T],
    alpha: T,
    beta: T,
    out: &mut [T],
) {
    let dk = k.len();
    for (a, row) in s.chunks_exact_mut(dk).enumerate() {
        let sk = dot(row, k);
        let coef = beta * (v[a] - alpha * sk);
        for (x, &kb) in row.iter_mut().zip(k) {
            *x = alpha * *x + coef * kb;
        }
        out[a] = dot(row, q);
    }
}

/// `(o, S')` for one step from head state `s` (`[d_v × d_k]`).
pub fn gdn_recurrent_step<T: Real>(
    s: &Tensor<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    alpha: T,
    beta: T,
) -> Result<(Vec<T>, Tensor<T>)> {
    if s.rank() != 2 || s.shape()[1] != k.len() || q.len() != k.len() || s.shape()[0] != v.len() {
        return Err(Error::shape(
            "gdn_recurrent_step",
            s.shape(),
            &[v.len(), k.len()],
        ));
    }
    let mut s2 = s.clone();
    let mut o = vec![T::zero(); v.len()];
    recurrent_step_in_place(s2.data_mut(), q, k, v, alpha, beta, &mut o);
    Ok((o, s2))
}

/// `exp(Σ ln α)` over a chunk, summed in order. Decay-only evolution through a
/// softmax-routed chunk multiplies the state by exactly this value.
pub fn chunk_decay<T: Real>(alpha: impl IntoIterator<Item = T>) -> T {
    let mut g = T::zero();
    for a in alpha {
        g += a.ln();
    }
    g.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GdnOptions {
    /// Routing chunk size `C`.
    pub chunk: usize,
    /// Kernel sub-chunk size `c`; must divide `chunk`.
    pub sub_chunk: usize,
    /// Include the within-chunk term in the output. Off gives outputs from the
    /// decayed entering state only.
    pub inner_output: bool,
    /// Apply the cumulative decay across softmax-routed chunks.
    pub decay_softmax_chunks: bool,
}

impl GdnOptions {
    pub fn new(chunk: usize) -> Self {
        GdnOptions {
            chunk,
            sub_chunk: chunk,
            inner_output: true,
            decay_softmax_chunks: true,
        }
    }

    fn fingerprint(&self) -> u64 {
        (self.chunk as u64) << 32
            ^ (self.sub_chunk as u64) << 8
            ^ (self.inner_output as u64) << 1
            ^ self.decay_softmax_chunks as u64
    }
}

#[derive(Debug, Clone)]
pub struct GdnSaved<T> {
    /// State entering each chunk, plus the final state: `n_chunks + 1` items.
    pub states: Vec<LinearState<T>>,
    pub macs: u64,
    fingerprint: u64,
}

impl<T: Real> GdnSaved<T> {
    pub fn final_state(&self) -> &LinearState<T> {
        self.states.last().expect("at least the initial state")
    }
}

#[derive(Debug, Clone)]
pub struct GdnGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dalpha: Tensor<T>,
    pub dbeta: Tensor<T>,
    pub ds0: LinearState<T>,
    /// `[h × n_chunks]`: ⟨adjoint of the leaving state, chunk contribution⟩
    /// for linear-routed chunks, zero otherwise.
    pub dscore: Tensor<T>,
    pub macs: u64,
}

// ---------------------------------------------------------------------------
// sub-chunk kernel
// ---------------------------------------------------------------------------

struct SubInputs<'a, T> {
    q: &'a [T],
    k: &'a [T],
    v: &'a [T],
    /// ln α
    a: &'a [T],
    b: &'a [T],
    n: usize,
    dk: usize,
    dv: usize,
}

/// Intermediates of one sub-chunk, kept for the backward.
struct SubFwd<T> {
    e: Vec<T>,
    /// `e^{g_i − g_j}` for `j ≤ i`, row-major `n × n`.
    dmat: Vec<T>,
    kk: Vec<T>,
    qk: Vec<T>,
    sk: Vec<T>,
    sq: Vec<T>,
    r: Vec<T>,
    u: Vec<T>,
}

fn sub_forward<T: Real>(
    x: &SubInputs<'_, T>,
    s0: &[T],
    out: Option<&mut [T]>,
    s1: Option<&mut [T]>,
    macs: &mut u64,
) -> SubFwd<T> {
    let (n, dk, dv) = (x.n, x.dk, x.dv);
    let mut g = vec![T::zero(); n];
    let mut acc = T::zero();
    for i in 0..n {
        acc += x.a[i];
        g[i] = acc;
    }
    let e: Vec<T> = g.iter().map(|&v| v.exp()).collect();
    let mut dmat = vec![T::zero(); n * n];
    let mut kk = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            dmat[i * n + j] = (g[i] - g[j]).exp();
        }
        for j in 0..i {
            kk[i * n + j] = dot(&x.k[i * dk..(i + 1) * dk], &x.k[j * dk..(j + 1) * dk]);
        }
    }
    *macs += (n * (n.saturating_sub(1)) / 2 * dk) as u64;

    let mut sk = vec![T::zero(); n * dv];
    for i in 0..n {
        let ki = &x.k[i * dk..(i + 1) * dk];
        for a in 0..dv {
            sk[i * dv + a] = dot(&s0[a * dk..(a + 1) * dk], ki);
        }
    }
    *macs += (n * dv * dk) as u64;

    let mut r = vec![T::zero(); n * dv];
    let mut u = vec![T::zero(); n * dv];
    for i in 0..n {
        for a in 0..dv {
            r[i * dv + a] = x.v[i * dv + a] - e[i] * sk[i * dv + a];
        }
        let (done, rest) = u.split_at_mut(i * dv);
        let ui = &mut rest[..dv];
        for a in 0..dv {
            ui[a] = x.b[i] * r[i * dv + a];
        }
        for j in 0..i {
            let aij = x.b[i] * dmat[i * n + j] * kk[i * n + j];
            axpy(-aij, &done[j * dv..(j + 1) * dv], ui);
        }
    }
    *macs += (n * (n.saturating_sub(1)) / 2 * dv) as u64;

    let mut qk = vec![T::zero(); n * n];
    let mut sq = vec![T::zero(); n * dv];
    if let Some(out) = out {
        for i in 0..n {
            let qi = &x.q[i * dk..(i + 1) * dk];
            for j in 0..=i {
                qk[i * n + j] = dot(qi, &x.k[j * dk..(j + 1) * dk]);
            }
            for a in 0..dv {
                sq[i * dv + a] = dot(&s0[a * dk..(a + 1) * dk], qi);
            }
            let oi = &mut out[i * dv..(i + 1) * dv];
            for a in 0..dv {
                oi[a] = e[i] * sq[i * dv + a];
            }
            for j in 0..=i {
                axpy(
                    dmat[i * n + j] * qk[i * n + j],
                    &u[j * dv..(j + 1) * dv],
                    oi,
                );
            }
        }
        *macs += (n * (n + 1) / 2 * (dk + dv) + n * dv * dk) as u64;
    }

    if let Some(s1) = s1 {
        let last = n - 1;
        for (x1, &x0) in s1.iter_mut().zip(s0) {
            *x1 = e[last] * x0;
        }
        for j in 0..n {
            let w = dmat[last * n + j];
            let kj = &x.k[j * dk..(j + 1) * dk];
            for a in 0..dv {
                axpy(w * u[j * dv + a], kj, &mut s1[a * dk..(a + 1) * dk]);
            }
        }
        *macs += (n * dv * dk) as u64;
    }

    SubFwd {
        e,
        dmat,
        kk,
        qk,
        sk,
        sq,
        r,
        u,
    }
}

struct SubGrads<'a, T> {
    dq: &'a mut [T],
    dk: &'a mut [T],
    dv: &'a mut [T],
    da: &'a mut [T],
    db: &'a mut [T],
}

/// Accumulates input gradients and writes the entering-state adjoint into
/// `ds0` (overwritten).
fn sub_backward<T: Real>(
    x: &SubInputs<'_, T>,
    s0: &[T],
    f: &SubFwd<T>,
    d_out: Option<&[T]>,
    ds1: Option<&[T]>,
    gr: &mut SubGrads<'_, T>,
    ds0: &mut [T],
    macs: &mut u64,
) {
    let (n, dk, dv) = (x.n, x.dk, x.dv);
    ds0.fill(T::zero());
    let mut de = vec![T::zero(); n];
    let mut dd = vec![T::zero(); n * n];
    let mut du = vec![T::zero(); n * dv];
    let mut tmp = vec![T::zero(); dv];

    if let Some(ds1) = ds1 {
        let last = n - 1;
        for (g0, &g1) in ds0.iter_mut().zip(ds1) {
            *g0 += f.e[last] * g1;
        }
        de[last] += dot(ds1, s0);
        for j in 0..n {
            let w = f.dmat[last * n + j];
            let kj = &x.k[j * dk..(j + 1) * dk];
            for a in 0..dv {
                tmp[a] = dot(&ds1[a * dk..(a + 1) * dk], kj);
            }
            axpy(w, &tmp, &mut du[j * dv..(j + 1) * dv]);
            let uj = &f.u[j * dv..(j + 1) * dv];
            dd[last * n + j] += dot(uj, &tmp);
            let dkj = &mut gr.dk[j * dk..(j + 1) * dk];
            for a in 0..dv {
                axpy(w * uj[a], &ds1[a * dk..(a + 1) * dk], dkj);
            }
        }
        *macs += (2 * n * dv * dk) as u64;
    }

    if let Some(d_out) = d_out {
        for i in 0..n {
            let doi = &d_out[i * dv..(i + 1) * dv];
            let qi = &x.q[i * dk..(i + 1) * dk];
            de[i] += dot(doi, &f.sq[i * dv..(i + 1) * dv]);
            let dqi = &mut gr.dq[i * dk..(i + 1) * dk];
            for a in 0..dv {
                let w = f.e[i] * doi[a];
                axpy(w, qi, &mut ds0[a * dk..(a + 1) * dk]);
                axpy(w, &s0[a * dk..(a + 1) * dk], dqi);
            }
            for j in 0..=i {
                let dij = f.dmat[i * n + j];
                let qkij = f.qk[i * n + j];
                axpy(dij * qkij, doi, &mut du[j * dv..(j + 1) * dv]);
                let dc = dot(doi, &f.u[j * dv..(j + 1) * dv]);
                dd[i * n + j] += dc * qkij;
                let dqk = dc * dij;
                axpy(
                    dqk,
                    &x.k[j * dk..(j + 1) * dk],
                    &mut gr.dq[i * dk..(i + 1) * dk],
                );
                axpy(dqk, qi, &mut gr.dk[j * dk..(j + 1) * dk]);
            }
        }
        *macs += (2 * n * dv * dk + n * (n + 1) / 2 * (2 * dv + 2 * dk)) as u64;
    }

    for i in (0..n).rev() {
        let bi = x.b[i];
        let (before, rest) = du.split_at_mut(i * dv);
        let dui = &rest[..dv];
        gr.db[i] += dot(dui, &f.r[i * dv..(i + 1) * dv]);
        for j in 0..i {
            let dij = f.dmat[i * n + j];
            let kkij = f.kk[i * n + j];
            let aij = bi * dij * kkij;
            let da_ij = -dot(dui, &f.u[j * dv..(j + 1) * dv]);
            axpy(-aij, dui, &mut before[j * dv..(j + 1) * dv]);
            gr.db[i] += da_ij * dij * kkij;
            dd[i * n + j] += da_ij * bi * kkij;
            let dkk = da_ij * bi * dij;
            let (ki, kj) = (i * dk, j * dk);
            for c in 0..dk {
                let (a, b) = (x.k[ki + c], x.k[kj + c]);
                gr.dk[ki + c] += dkk * b;
                gr.dk[kj + c] += dkk * a;
            }
        }
        // r_i = v_i − e_i S₀ k_i, with dr_i = β_i du_i
        let ki = &x.k[i * dk..(i + 1) * dk];
        let mut de_i = T::zero();
        for a in 0..dv {
            let dr = bi * dui[a];
            gr.dv[i * dv + a] += dr;
            de_i -= dr * f.sk[i * dv + a];
            axpy(-f.e[i] * dr, ki, &mut ds0[a * dk..(a + 1) * dk]);
            axpy(
                -f.e[i] * dr,
                &s0[a * dk..(a + 1) * dk],
                &mut gr.dk[i * dk..(i + 1) * dk],
            );
        }
        de[i] += de_i;
    }
    *macs += (n * (n.saturating_sub(1)) / 2 * (2 * dv + 2 * dk) + 2 * n * dv * dk) as u64;

    let mut dg = vec![T::zero(); n];
    for i in 0..n {
        dg[i] += de[i] * f.e[i];
        for j in 0..i {
            let w = dd[i * n + j] * f.dmat[i * n + j];
            dg[i] += w;
            dg[j] -= w;
        }
    }
    let mut run = T::zero();
    for m in (0..n).rev() {
        run += dg[m];
        gr.da[m] += run;
    }
}

// ---------------------------------------------------------------------------
// chunkwise forward / backward
// ---------------------------------------------------------------------------

fn check_inputs<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    routing: &ChunkRouting<T>,
    opts: &GdnOptions,
) -> Result<(usize, usize, usize, usize)> {
    if q.rank() != 3 || k.shape() != q.shape() || v.rank() != 3 || v.shape()[..2] != q.shape()[..2]
    {
        return Err(Error::shape("gdn_chunkwise", q.shape(), v.shape()));
    }
    let (len, heads, dk, dv) = (q.shape()[0], q.shape()[1], q.shape()[2], v.shape()[2]);
    if alpha.shape() != [len, heads] || beta.shape() != [len, heads] {
        return Err(Error::shape(
            "gdn_chunkwise gates",
            alpha.shape(),
            &[len, heads],
        ));
    }
    if opts.chunk == 0 || len % opts.chunk != 0 {
        return Err(Error::NotDivisible {
            op: "gdn_chunkwise",
            len,
            chunk: opts.chunk,
        });
    }
    if opts.sub_chunk == 0 || opts.chunk % opts.sub_chunk != 0 {
        return Err(Error::invalid(
            "gdn_chunkwise",
            "sub-chunk size must divide the routing chunk size",
        ));
    }
    routing.check_dims(heads, len / opts.chunk)?;
    if alpha
        .data()
        .iter()
        .any(|&a| !(a > T::zero() && a <= T::one()))
    {
        return Err(Error::invalid("gdn_chunkwise", "alpha must lie in (0, 1]"));
    }
    Ok((len, heads, dk, dv))
}

fn routing_fingerprint<T: Real>(routing: &ChunkRouting<T>) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &r in routing.choices() {
        h = (h ^ r as u64).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Gathers the rows `[start, start+n)` of head `h` from a `[L × heads × d]`
/// buffer into `dst` (`n × d`).
fn gather_rows<T: Copy>(
    src: &[T],
    heads: usize,
    d: usize,
    h: usize,
    start: usize,
    n: usize,
    dst: &mut [T],
) {
    for r in 0..n {
        let o = ((start + r) * heads + h) * d;
        dst[r * d..(r + 1) * d].copy_from_slice(&src[o..o + d]);
    }
}

fn scatter_add_rows<T: Real>(
    src: &[T],
    heads: usize,
    d: usize,
    h: usize,
    start: usize,
    n: usize,
    dst: &mut [T],
) {
    for r in 0..n {
        let o = ((start + r) * heads + h) * d;
        for c in 0..d {
            dst[o + c] += src[r * d + c];
        }
    }
}

/// Per-head, per-chunk scratch holding gathered inputs.
struct ChunkBufs<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Real> ChunkBufs<T> {
    fn load(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        alpha: &Tensor<T>,
        beta: &Tensor<T>,
        h: usize,
        start: usize,
        n: usize,
    ) -> Self {
        let (heads, dk, dv) = (q.shape()[1], q.shape()[2], v.shape()[2]);
        let mut bufs = ChunkBufs {
            q: vec![T::zero(); n * dk],
            k: vec![T::zero(); n * dk],
            v: vec![T::zero(); n * dv],
            a: vec![T::zero(); n],
            b: vec![T::zero(); n],
        };
        gather_rows(q.data(), heads, dk, h, start, n, &mut bufs.q);
        gather_rows(k.data(), heads, dk, h, start, n, &mut bufs.k);
        gather_rows(v.data(), heads, dv, h, start, n, &mut bufs.v);
        for r in 0..n {
            bufs.a[r] = alpha.data()[(start + r) * heads + h].ln();
            bufs.b[r] = beta.data()[(start + r) * heads + h];
        }
        bufs
    }

    fn sub(&self, off: usize, n: usize, dk: usize, dv: usize) -> SubInputs<'_, T> {
        SubInputs {
            q: &self.q[off * dk..(off + n) * dk],
            k: &self.k[off * dk..(off + n) * dk],
            v: &self.v[off * dv..(off + n) * dv],
            a: &self.a[off..off + n],
            b: &self.b[off..off + n],
            n,
            dk,
            dv,
        }
    }
}

/// Chunkwise forward. `q, k: [L × h × d_k]` (k normalized by the caller),
/// `v: [L × h × d_v]`, `alpha, beta: [L × h]`, one routing group per head.
pub fn gdn_chunkwise_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    routing: &ChunkRouting<T>,
    opts: &GdnOptions,
    s0: Option<&LinearState<T>>,
) -> Result<(Tensor<T>, GdnSaved<T>)> {
    let (len, heads, dk, dv) = check_inputs(q, k, v, alpha, beta, routing, opts)?;
    let n_chunks = len / opts.chunk;
    let (c, sc) = (opts.chunk, opts.sub_chunk);
    let init = match s0 {
        Some(s) if s.s.shape() == [heads, dv, dk] => s.clone(),
        Some(s) => {
            return Err(Error::shape(
                "gdn_chunkwise s0",
                s.s.shape(),
                &[heads, dv, dk],
            ))
        }
        None => LinearState::zeros(heads, dv, dk),
    };
    let mut out = Tensor::zeros(&[len, heads, dv]);
    let mut states = Vec::with_capacity(n_chunks + 1);
    states.push(init);
    let mut macs = 0u64;
    let mut o_buf = vec![T::zero(); sc * dv];
    let mut run = vec![T::zero(); dv * dk];
    let mut next = vec![T::zero(); dv * dk];
    for t in 0..n_chunks {
        let mut leaving = states[t].clone();
        for h in 0..heads {
            let bufs = ChunkBufs::load(q, k, v, alpha, beta, h, t * c, c);
            let entering = states[t].head(h);
            let route = routing.get(h, t);
            run.copy_from_slice(entering);
            for s in 0..c / sc {
                let x = bufs.sub(s * sc, sc, dk, dv);
                let last = s + 1 == c / sc;
                let need_state = !(last && route == Route::Softmax);
                sub_forward(
                    &x,
                    &run,
                    opts.inner_output.then_some(&mut o_buf[..]),
                    need_state.then_some(&mut next[..]),
                    &mut macs,
                );
                if opts.inner_output {
                    scatter_add_rows(&o_buf, heads, dv, h, t * c + s * sc, sc, out.data_mut());
                }
                if need_state {
                    core::mem::swap(&mut run, &mut next);
                }
            }
            if !opts.inner_output {
                // o_i = e^{G_i} S_t q_i with G the running log-decay from chunk start
                let mut g = T::zero();
                for r in 0..c {
                    g += bufs.a[r];
                    let e = g.exp();
                    let qr = &bufs.q[r * dk..(r + 1) * dk];
                    let o = ((t * c + r) * heads + h) * dv;
                    for a in 0..dv {
                        out.data_mut()[o + a] = e * dot(&entering[a * dk..(a + 1) * dk], qr);
                    }
                }
                macs += (c * dv * dk) as u64;
            }
            let dst = leaving.head_mut(h);
            match route {
                Route::Linear => dst.copy_from_slice(&run),
                Route::Softmax if opts.decay_softmax_chunks => {
                    let decay = chunk_decay(bufs.a.iter().map(|&a| a.exp()));
                    for x in dst.iter_mut() {
                        *x *= decay;
                    }
                }
                Route::Softmax => {}
            }
        }
        states.push(leaving);
    }
    check_finite("gdn_chunkwise_forward", out.data())?;
    Ok((
        out,
        GdnSaved {
            states,
            macs,
            fingerprint: routing_fingerprint(routing) ^ opts.fingerprint(),
        },
    ))
}

/// Backward of [`gdn_chunkwise_forward`] with the routing held fixed.
pub fn gdn_chunkwise_backward<T: Real>(
    d_out: &Tensor<T>,
    saved: &GdnSaved<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    routing: &ChunkRouting<T>,
    opts: &GdnOptions,
    d_final: Option<&LinearState<T>>,
) -> Result<GdnGrads<T>> {
    let (len, heads, dk, dv) = check_inputs(q, k, v, alpha, beta, routing, opts)?;
    let n_chunks = len / opts.chunk;
    if d_out.shape() != [len, heads, dv] {
        return Err(Error::shape(
            "gdn_chunkwise_backward",
            d_out.shape(),
            &[len, heads, dv],
        ));
    }
    if saved.states.len() != n_chunks + 1
        || saved.states[0].s.shape() != [heads, dv, dk]
        || saved.fingerprint != routing_fingerprint(routing) ^ opts.fingerprint()
    {
        return Err(Error::StaleState(
            "gdn saved state does not match routing, options, or shape",
        ));
    }
    let (c, sc) = (opts.chunk, opts.sub_chunk);
    let n_sub = c / sc;
    let mut dq = Tensor::zeros(q.shape());
    let mut dk_t = Tensor::zeros(k.shape());
    let mut dv_t = Tensor::zeros(v.shape());
    let mut dlog_a = vec![T::zero(); len * heads];
    let mut dbeta = Tensor::zeros(beta.shape());
    let mut dscore = Tensor::zeros(&[heads, n_chunks]);
    let mut macs = 0u64;
    let mut d_state = match d_final {
        Some(d) if d.s.shape() == [heads, dv, dk] => d.clone(),
        Some(d) => return Err(Error::shape("gdn d_final", d.s.shape(), &[heads, dv, dk])),
        None => LinearState::zeros(heads, dv, dk),
    };

    let mut sub_states = vec![T::zero(); (n_sub + 1) * dv * dk];
    let mut scratch_macs = 0u64;
    let mut ds_run = vec![T::zero(); dv * dk];
    let mut ds_prev = vec![T::zero(); dv * dk];
    for t in (0..n_chunks).rev() {
        for h in 0..heads {
            let bufs = ChunkBufs::load(q, k, v, alpha, beta, h, t * c, c);
            let entering = saved.states[t].head(h);
            let leaving = saved.states[t + 1].head(h);
            let route = routing.get(h, t);
            let ds_leave: Vec<T> = d_state.head(h).to_vec();
            let ds_enter = d_state.head_mut(h);
            ds_enter.fill(T::zero());

            // replay sub-chunk entering states
            sub_states[..dv * dk].copy_from_slice(entering);
            for s in 0..n_sub {
                let x = bufs.sub(s * sc, sc, dk, dv);
                let (cur, nxt) = sub_states.split_at_mut((s + 1) * dv * dk);
                let need = s + 1 < n_sub || route == Route::Linear;
                if need {
                    sub_forward(
                        &x,
                        &cur[s * dv * dk..],
                        None,
                        Some(&mut nxt[..dv * dk]),
                        &mut scratch_macs,
                    );
                }
            }

            match route {
                Route::Linear => {
                    ds_run.copy_from_slice(&ds_leave);
                    // the alternative is the state a softmax-routed chunk would leave
                    let decay = if opts.decay_softmax_chunks {
                        chunk_decay(bufs.a.iter().map(|&a| a.exp()))
                    } else {
                        T::one()
                    };
                    let mut s = T::zero();
                    for ((&d, &l), &e) in ds_leave.iter().zip(leaving).zip(entering) {
                        s += d * (l - decay * e);
                    }
                    dscore.data_mut()[h * n_chunks + t] = s;
                }
                Route::Softmax => {
                    ds_run.fill(T::zero());
                    if opts.decay_softmax_chunks {
                        let decay = chunk_decay(bufs.a.iter().map(|&a| a.exp()));
                        let inner = dot(&ds_leave, entering) * decay;
                        for r in 0..c {
                            dlog_a[(t * c + r) * heads + h] += inner;
                        }
                        for (d, &l) in ds_enter.iter_mut().zip(&ds_leave) {
                            *d += decay * l;
                        }
                    } else {
                        for (d, &l) in ds_enter.iter_mut().zip(&ds_leave) {
                            *d += l;
                        }
                    }
                }
            }

            let mut gq = vec![T::zero(); c * dk];
            let mut gk = vec![T::zero(); c * dk];
            let mut gv = vec![T::zero(); c * dv];
            let mut ga = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            let mut d_o = vec![T::zero(); sc * dv];
            let mut o_scratch = vec![T::zero(); sc * dv];
            for s in (0..n_sub).rev() {
                let x = bufs.sub(s * sc, sc, dk, dv);
                let s_in = &sub_states[s * dv * dk..(s + 1) * dv * dk];
                let has_state = s + 1 < n_sub || route == Route::Linear;
                let d_out_sub = if opts.inner_output {
                    gather_rows(d_out.data(), heads, dv, h, t * c + s * sc, sc, &mut d_o);
                    Some(&d_o[..])
                } else {
                    None
                };
                let f = sub_forward(
                    &x,
                    s_in,
                    opts.inner_output.then_some(&mut o_scratch[..]),
                    None,
                    &mut scratch_macs,
                );
                let off = s * sc;
                let mut gr = SubGrads {
                    dq: &mut gq[off * dk..(off + sc) * dk],
                    dk: &mut gk[off * dk..(off + sc) * dk],
                    dv: &mut gv[off * dv..(off + sc) * dv],
                    da: &mut ga[off..off + sc],
                    db: &mut gb[off..off + sc],
                };
                sub_backward(
                    &x,
                    s_in,
                    &f,
                    d_out_sub,
                    has_state.then_some(&ds_run[..]),
                    &mut gr,
                    &mut ds_prev,
                    &mut macs,
                );
                core::mem::swap(&mut ds_run, &mut ds_prev);
            }
            for (d, &g) in ds_enter.iter_mut().zip(&ds_run) {
                *d += g;
            }

            if !opts.inner_output {
                let mut g = T::zero();
                let mut de = vec![T::zero(); c];
                let mut es = vec![T::zero(); c];
                for r in 0..c {
                    g += bufs.a[r];
                    es[r] = g.exp();
                }
                for r in 0..c {
                    let e = es[r];
                    let qr = &bufs.q[r * dk..(r + 1) * dk];
                    let o = ((t * c + r) * heads + h) * dv;
                    let dor = &d_out.data()[o..o + dv];
                    for a in 0..dv {
                        let srow = &entering[a * dk..(a + 1) * dk];
                        de[r] += dor[a] * dot(srow, qr);
                        axpy(e * dor[a], srow, &mut gq[r * dk..(r + 1) * dk]);
                        axpy(e * dor[a], qr, &mut ds_enter[a * dk..(a + 1) * dk]);
                    }
                }
                let mut run = T::zero();
                for r in (0..c).rev() {
                    run += de[r] * es[r];
                    ga[r] += run;
                }
                macs += (3 * c * dv * dk) as u64;
            }

            scatter_add_rows(&gq, heads, dk, h, t * c, c, dq.data_mut());
            scatter_add_rows(&gk, heads, dk, h, t * c, c, dk_t.data_mut());
            scatter_add_rows(&gv, heads, dv, h, t * c, c, dv_t.data_mut());
            for r in 0..c {
                dlog_a[(t * c + r) * heads + h] += ga[r];
                dbeta.data_mut()[(t * c + r) * heads + h] += gb[r];
            }
        }
    }
    let mut dalpha = Tensor::zeros(alpha.shape());
    for ((d, &g), &a) in dalpha.data_mut().iter_mut().zip(&dlog_a).zip(alpha.data()) {
        *d = g / a;
    }
    Ok(GdnGrads {
        dq,
        dk: dk_t,
        dv: dv_t,
        dalpha,
        dbeta,
        ds0: d_state,
        dscore,
        macs,
    })
}
