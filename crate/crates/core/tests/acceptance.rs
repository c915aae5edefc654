//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown.
//! Exits nonzero when any criterion fails.

mod common;

use std::time::Instant;

use common::*;
use hybrid_attn_core::attn::{masked_attention_backward, masked_attention_forward, ColumnMask};
use hybrid_attn_core::block::{
    block_backward, block_forward, init_block_params, Ablations, BlockConfig, BlockOverrides,
    LayerKind,
};
use hybrid_attn_core::flops::{fit_reports, CostFeatures};
use hybrid_attn_core::gdn::{
    gdn_chunkwise_backward, gdn_chunkwise_forward, GdnOptions, LinearState,
};
use hybrid_attn_core::infer::{decode_step, prefill, DecodeState};
use hybrid_attn_core::model::{
    init_params, model_forward, ModelConfig, ModelOverrides, RoutingMode,
};
use hybrid_attn_core::stats::routing_stats;
use hybrid_attn_core::task::{accuracy, gen_batch, TaskSpec};
use hybrid_attn_core::train::{train_step, AdamW, TrainConfig};
use hybrid_attn_core::{ChunkRouting, ParamStore, Real, Route, Tensor};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// 1. chunkwise GDN vs the token-by-token reference
// ---------------------------------------------------------------------------

fn routing_as<T: Real>(r: &ChunkRouting<f64>) -> ChunkRouting<T> {
    ChunkRouting::from_choices(r.n_groups(), r.n_chunks(), r.choices().to_vec()).unwrap()
}

fn gdn_run<T: Real>(
    c: &GdnCase,
    routing: &ChunkRouting<f64>,
    opts: &GdnOptions,
) -> (Vec<f64>, Vec<f64>) {
    let cast = |t: &Tensor<f64>| t.cast::<T>();
    let (out, saved) = gdn_chunkwise_forward(
        &cast(&c.q),
        &cast(&c.k),
        &cast(&c.v),
        &cast(&c.alpha),
        &cast(&c.beta),
        &routing_as::<T>(routing),
        opts,
        None,
    )
    .unwrap();
    let f = |t: &Tensor<T>| t.data().iter().map(|x| x.to_f64_lossy()).collect();
    (f(&out), f(&saved.final_state().s))
}

fn criterion_1() -> Outcome {
    let (len, heads, d) = (128, 2, 16);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for chunk in [16, 32] {
        for seed in 0..5 {
            let case = GdnCase::random(len, heads, d, 100 + seed);
            let routing = random_routing(heads, len / chunk, &mut rng(200 + seed));
            for sub in [chunk, 8] {
                let opts = GdnOptions {
                    sub_chunk: sub,
                    ..GdnOptions::new(chunk)
                };
                let (ro, rs) = gdn_reference(&case, chunk, &gates_of(&routing), true);
                let (o, s) = gdn_run::<f64>(&case, &routing, &opts);
                worst64 = worst64
                    .max(max_abs_diff(&o, ro.data()))
                    .max(max_abs_diff(&s, &rs));
                let c32 = case.rounded_to_f32();
                let (ro, rs) = gdn_reference(&c32, chunk, &gates_of(&routing), true);
                let (o, s) = gdn_run::<f32>(&c32, &routing, &opts);
                worst32 = worst32
                    .max(max_abs_diff(&o, ro.data()))
                    .max(max_abs_diff(&s, &rs));
            }
        }
    }
    outcome(
        worst32 <= 1e-4 && worst64 <= 1e-10,
        format!("max |diff| f32 {worst32:.2e} (≤ 1e-4), f64 {worst64:.2e} (≤ 1e-10)"),
    )
}

// ---------------------------------------------------------------------------
// 2. softmax path with every chunk active vs dense causal attention
// ---------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let (len, heads, d, chunk) = (64, 4, 16, 16);
    let mut r = rng(2);
    let round = |t: Tensor<f64>| t.cast::<f32>().cast::<f64>();
    let q = round(Tensor::randn(&[len, heads, d], 1.0, &mut r));
    let k = round(Tensor::randn(&[len, heads, d], 1.0, &mut r));
    let v = round(Tensor::randn(&[len, heads, d], 1.0, &mut r));
    let mask = ColumnMask::all_active(2, len / chunk, chunk);
    let (o, _) = masked_attention_forward(
        &q.cast::<f32>(),
        &k.cast::<f32>(),
        &v.cast::<f32>(),
        &mask,
        &[0, 0, 1, 1],
    )
    .unwrap();
    let dense = weighted_attention(&q, &k, &v, &|_, _, _| 1.0);
    let diff = max_abs_diff(&o.cast::<f64>().into_data(), dense.data());
    outcome(diff <= 1e-5, format!("max |diff| f32 {diff:.2e} (≤ 1e-5)"))
}

// ---------------------------------------------------------------------------
// 3. per-entry mask gradient and its column sums vs continuous-mask FD
// ---------------------------------------------------------------------------

const FD_FLOOR: f64 = 1e-6;

fn criterion_3() -> Outcome {
    let (len, heads, d, chunk, groups) = (16, 4, 8, 4, 2);
    let n_chunks = len / chunk;
    let goh = [0, 0, 1, 1];
    let mut r = rng(3);
    let q = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
    let k = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
    let v = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
    let active = vec![true, false, true, true, true, true, false, true];
    let mask = ColumnMask::new(groups, n_chunks, chunk, active.clone()).unwrap();
    let (_, saved) = masked_attention_forward(&q, &k, &v, &mask, &goh).unwrap();
    let g = masked_attention_backward(&w, &saved, &q, &k, &v, &mask, &goh, true).unwrap();
    let mg = g.mask_grad.unwrap();
    let base = mask_weight(&active, n_chunks, chunk, &goh);
    let loss = |wt: &dyn Fn(usize, usize, usize) -> f64| {
        dot(weighted_attention(&q, &k, &v, wt).data(), w.data())
    };
    let step = 1e-5;
    let (mut worst, mut entries) = (0.0f64, 0);
    for h in 0..heads {
        for i in 0..len {
            for j in 0..=i {
                if base(h, i, j) == 0.0 {
                    continue;
                }
                let fd = central(
                    |m| {
                        loss(&|hh, ii, jj| {
                            if (hh, ii, jj) == (h, i, j) {
                                m
                            } else {
                                base(hh, ii, jj)
                            }
                        })
                    },
                    1.0,
                    step,
                );
                let an = mg.data()[(h * len + i) * len + j];
                worst = worst.max(rel_err(an, fd, FD_FLOOR));
                entries += 1;
            }
        }
    }
    let mut worst_col = 0.0f64;
    let mut zero_ok = true;
    for grp in 0..groups {
        for t in 0..n_chunks {
            let an = g.dscore.get(&[grp, t]);
            if !active[grp * n_chunks + t] {
                zero_ok &= an == 0.0;
                continue;
            }
            let fd = central(
                |m| {
                    loss(&|hh, ii, jj| {
                        let b = base(hh, ii, jj);
                        if goh[hh] == grp && jj / chunk == t && ii / chunk > t {
                            b * m
                        } else {
                            b
                        }
                    })
                },
                1.0,
                step,
            );
            worst_col = worst_col.max(rel_err(an, fd, FD_FLOOR));
        }
    }
    outcome(
        worst <= 1e-4 && worst_col <= 1e-4 && zero_ok,
        format!(
            "{entries} active entries max rel {worst:.2e}, column sums max rel {worst_col:.2e} (≤ 1e-4), inactive columns zero: {zero_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. linear-path routing gradient vs continuous-gate FD
// ---------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let (len, heads, d, chunk) = (64, 2, 8, 16);
    let n_chunks = len / chunk;
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    let mut checked = 0;
    for (seed, decay) in [(4u64, true), (5, false), (6, true)] {
        let case = GdnCase::random(len, heads, d, seed);
        let routing = random_routing(heads, n_chunks, &mut rng(seed + 50));
        let mut r = rng(seed + 60);
        let w = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let ws = Tensor::<f64>::randn(&[heads, d, d], 1.0, &mut r);
        let opts = GdnOptions {
            decay_softmax_chunks: decay,
            ..GdnOptions::new(chunk)
        };
        let (_, saved) = gdn_chunkwise_forward(
            &case.q,
            &case.k,
            &case.v,
            &case.alpha,
            &case.beta,
            &routing,
            &opts,
            None,
        )
        .unwrap();
        let grads = gdn_chunkwise_backward(
            &w,
            &saved,
            &case.q,
            &case.k,
            &case.v,
            &case.alpha,
            &case.beta,
            &routing,
            &opts,
            Some(&LinearState { s: ws.clone() }),
        )
        .unwrap();
        let gates = gates_of(&routing);
        let loss = |gates: &[f64]| {
            let (o, s) = gdn_reference(&case, chunk, gates, decay);
            dot(o.data(), w.data()) + dot(&s, ws.data())
        };
        for h in 0..heads {
            for t in 0..n_chunks {
                let an = grads.dscore.get(&[h, t]);
                if routing.get(h, t) == Route::Softmax {
                    zero_ok &= an == 0.0;
                    continue;
                }
                let fd = central(
                    |gm| {
                        let mut g = gates.clone();
                        g[h * n_chunks + t] = gm;
                        loss(&g)
                    },
                    1.0,
                    1e-5,
                );
                worst = worst.max(rel_err(an, fd, FD_FLOOR));
                checked += 1;
            }
        }
    }
    outcome(
        worst <= 1e-3 && zero_ok,
        format!(
            "{checked} linear chunks max rel {worst:.2e} (≤ 1e-3), softmax chunks zero: {zero_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. full-block parameter gradients, routing frozen
// ---------------------------------------------------------------------------

fn small_block() -> BlockConfig {
    BlockConfig {
        d_model: 8,
        h_softmax: 2,
        h_lin: 1,
        d_head: 4,
        chunk: 4,
        sub_chunk: 4,
        score_bias: true,
        ..BlockConfig::default()
    }
}

fn block_fd(cfg: &BlockConfig, seed: u64, mixed: bool) -> (f64, usize, usize) {
    let len = 16;
    let mut store = ParamStore::<f64>::new();
    init_block_params(&mut store, "b.", cfg, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 1);
    let x = Tensor::randn(&[len, cfg.d_model], 1.0, &mut r);
    let wy = Tensor::randn(&[len, cfg.d_model], 1.0, &mut r);
    let learned = block_forward(&x, &store, "b.", cfg, &BlockOverrides::default(), None)
        .unwrap()
        .1
        .routing()
        .clone();
    let routing = if mixed {
        random_routing(cfg.h_lin, len / cfg.chunk, &mut r)
    } else {
        learned
    };
    let ov = BlockOverrides {
        routing: Some(
            ChunkRouting::from_choices(
                routing.n_groups(),
                routing.n_chunks(),
                routing.choices().to_vec(),
            )
            .unwrap(),
        ),
        ..BlockOverrides::default()
    };
    let loss = |st: &ParamStore<f64>, x: &Tensor<f64>| {
        block_forward(x, st, "b.", cfg, &ov, None)
            .unwrap()
            .0
            .dot(&wy)
    };
    let (_, saved) = block_forward(&x, &store, "b.", cfg, &ov, None).unwrap();
    let dx = block_backward(&wy, &saved, &mut store, cfg).unwrap();
    let h = 1e-6;
    let (mut worst, mut coords, mut tensors) = (0.0f64, 0, 0);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        tensors += 1;
        let n = store.value(name).unwrap().len();
        for i in (0..n).step_by(n.div_ceil(8)) {
            let bump = |delta: f64| {
                let mut s = store.clone();
                s.param_mut(name).unwrap().value.data_mut()[i] += delta;
                loss(&s, &x)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max(rel_err(store.grad(name).unwrap().data()[i], fd, FD_FLOOR));
            coords += 1;
        }
    }
    for i in (0..x.len()).step_by(7) {
        let bump = |delta: f64| {
            let mut xx = x.clone();
            xx.data_mut()[i] += delta;
            loss(&store, &xx)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        worst = worst.max(rel_err(dx.data()[i], fd, FD_FLOOR));
    }
    (worst, coords, tensors)
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    let mut min_coords = usize::MAX;
    let mut tensors = 0;
    for (seed, cfg, mixed) in [
        (7, small_block(), false),
        (8, small_block(), true),
        (
            9,
            BlockConfig {
                rope: true,
                h_softmax: 4,
                h_lin: 2,
                d_head: 2,
                sub_chunk: 2,
                ..small_block()
            },
            true,
        ),
    ] {
        let (w, c, t) = block_fd(&cfg, seed, mixed);
        worst = worst.max(w);
        min_coords = min_coords.min(c);
        tensors += t;
    }
    outcome(
        worst <= 1e-3 && min_coords >= 64,
        format!(
            "3 configs, {tensors} tensors, ≥ {min_coords} coordinates each config, max rel {worst:.2e} (≤ 1e-3)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. token-by-token decode vs one-shot forward
// ---------------------------------------------------------------------------

fn decode_cfg() -> ModelConfig {
    ModelConfig {
        vocab: 64,
        n_layers: 2,
        layer_pattern: vec![LayerKind::Hybrid; 2],
        block: BlockConfig {
            d_model: 32,
            h_softmax: 4,
            h_lin: 2,
            d_head: 8,
            chunk: 16,
            sub_chunk: 16,
            rope: true,
            score_init_std: 0.5,
            ..BlockConfig::default()
        },
        embed_init_std: 1.0,
        seed: 6,
        ..ModelConfig::default()
    }
}

fn criterion_6() -> Outcome {
    let cfg = decode_cfg();
    let store = init_params::<f32>(&cfg).unwrap();
    let ov = ModelOverrides::<f32>::default();
    let mut r = rng(66);
    let mut worst = 0.0f64;
    let mut softmax_chunks = 0;
    let mut total_chunks = 0;
    for _ in 0..20 {
        let tokens: Vec<u32> = (0..96).map(|_| r.gen_range(0..cfg.vocab as u32)).collect();
        let (full, saved) = model_forward(&cfg, &store, &tokens, &ov).unwrap();
        for rt in saved.routings() {
            softmax_chunks += rt.count(Route::Softmax);
            total_chunks += rt.choices().len();
        }
        let mut st = DecodeState::new(&cfg, ov.clone()).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            let l = decode_step(&cfg, &store, &mut st, t).unwrap();
            for (a, b) in l.iter().zip(full.row(i)) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    outcome(
        worst <= 1e-4,
        format!(
            "20 × 96 tokens, max |diff| f32 {worst:.2e} (≤ 1e-4); {softmax_chunks}/{total_chunks} chunks softmax-routed"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. attention multiply-adds vs the fitted complexity expression
// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let cfg = ModelConfig::default();
    let store = init_params::<f32>(&cfg).unwrap();
    let lengths = [256, 512, 1024, 2048];
    let mut r = rng(7);
    let tokens: Vec<u32> = (0..2048)
        .map(|_| r.gen_range(0..cfg.vocab as u32))
        .collect();
    let mut runs = Vec::new();
    for p in [0.0, 0.25, 0.5, 1.0] {
        for &len in &lengths {
            let ov = ModelOverrides::<f32>::routing(RoutingMode::Fraction(p));
            let (_, saved) = model_forward(&cfg, &store, &tokens[..len], &ov).unwrap();
            let mut f = CostFeatures {
                softmax: 0.0,
                linear: 0.0,
            };
            for rt in saved.routings() {
                f.add(&CostFeatures::from_routing(&rt, cfg.block.chunk));
            }
            runs.push((len, saved.macs, f));
        }
    }
    let (fit, reports) = fit_reports(runs).unwrap();
    let worst = reports
        .iter()
        .map(|r| r.relative_error())
        .fold(0.0, f64::max);
    let worst_at = reports
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.relative_error().total_cmp(&b.1.relative_error()))
        .map(|(i, r)| format!("p={} L={}", [0.0, 0.25, 0.5, 1.0][i / 4], r.len))
        .unwrap_or_default();
    let attn = |i: usize| reports[i].counted.attention() as f64;
    let lin_ratio = attn(3) / attn(2);
    let sm_ratio = attn(15) / attn(14);
    let pass = worst <= 0.05 && (1.9..=2.1).contains(&lin_ratio) && (3.6..=4.4).contains(&sm_ratio);
    outcome(
        pass,
        format!(
            "a={:.3} b={:.3}; max rel err {worst:.4} at {worst_at} (≤ 0.05); doubling all-linear {lin_ratio:.3} ∈ [1.9, 2.1], all-softmax {sm_ratio:.3} ∈ [3.6, 4.4]",
            fit.a, fit.b
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. KV footprint holds exactly the softmax-routed chunks
// ---------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let cfg = ModelConfig {
        block: BlockConfig {
            chunk: 8,
            sub_chunk: 8,
            ..decode_cfg().block
        },
        ..decode_cfg()
    };
    let b = &cfg.block;
    let store = init_params::<f64>(&cfg).unwrap();
    let mut r = rng(8);
    let mut checks = 0;
    let mut ok = true;
    let mut detail = String::new();
    for mode in [
        RoutingMode::Learned,
        RoutingMode::AllSoftmax,
        RoutingMode::AllLinear,
        RoutingMode::Fraction(0.5),
    ] {
        let ov = ModelOverrides::<f64>::routing(mode);
        for (len, extra) in [(37, 0), (64, 11), (101, 4)] {
            let tokens: Vec<u32> = (0..len + extra)
                .map(|_| r.gen_range(0..cfg.vocab as u32))
                .collect();
            let (mut st, _) = prefill(&cfg, &store, &tokens[..len], &ov).unwrap();
            for &t in &tokens[len..] {
                decode_step(&cfg, &store, &mut st, t).unwrap();
            }
            let committed = (len + extra) / b.chunk;
            let (_, saved) = model_forward(&cfg, &store, &tokens, &ov).unwrap();
            let mut expected = 0;
            let mut softmax_pairs = 0;
            for rt in saved.routings() {
                for g in 0..rt.n_groups() {
                    for t in 0..committed {
                        if rt.get(g, t) == Route::Softmax {
                            softmax_pairs += 1;
                            expected += b.chunk * b.group_size() * 2 * b.d_head;
                        }
                    }
                }
            }
            // C · (softmax chunks, counted per group and averaged over groups) · h_softmax · 2 · d_head
            let by_heads = b.chunk * softmax_pairs * b.h_softmax * 2 * b.d_head / b.h_lin;
            let kv = st.footprint().kv;
            let uniform_ok = match mode {
                RoutingMode::AllSoftmax => {
                    kv == b.chunk * committed * cfg.n_layers * b.h_softmax * 2 * b.d_head
                }
                RoutingMode::AllLinear => kv == 0,
                _ => true,
            };
            ok &= kv == expected && kv == by_heads && uniform_ok;
            checks += 1;
            if kv != expected {
                detail.push_str(&format!(
                    " [{mode} L={}: kv {kv} vs {expected}]",
                    len + extra
                ));
            }
        }
    }
    outcome(
        ok,
        format!("{checks} (routing, length) cases, KV scalars exact{detail}"),
    )
}

// ---------------------------------------------------------------------------
// 9. MQAR: learned routing vs the all-linear and all-softmax overrides
// ---------------------------------------------------------------------------

fn mqar_task(seed: u64) -> TaskSpec {
    TaskSpec {
        n_pairs: 16,
        key_vocab: 64,
        val_vocab: 64,
        seq_len: 256,
        seed: 1000 + seed,
        ..TaskSpec::default()
    }
}

fn mqar_cfg(seed: u64) -> ModelConfig {
    let steps = 3000;
    ModelConfig {
        vocab: mqar_task(seed).vocab(),
        n_layers: 2,
        layer_pattern: vec![LayerKind::Hybrid; 2],
        block: BlockConfig {
            d_model: 64,
            h_softmax: 4,
            h_lin: 2,
            d_head: 16,
            chunk: 16,
            sub_chunk: 16,
            ..BlockConfig::default()
        },
        mlp_mult: 2.0,
        seed,
        train: TrainConfig {
            lr: 3e-3,
            lr_init: 0.0,
            lr_min: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            total_steps: steps,
            batch: 4,
            seq_len: 256,
            ..TrainConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Trains for the configured steps and returns (query accuracy, overall
/// softmax fraction) on held-out sequences.
fn mqar_run(seed: u64, mode: RoutingMode) -> (f64, f64) {
    let cfg = mqar_cfg(seed);
    let task = mqar_task(seed);
    let ov = ModelOverrides::<f32>::routing(mode);
    let mut params = init_params::<f32>(&cfg).unwrap();
    let mut opt = AdamW::new(&params);
    let batch = cfg.train.batch;
    for step in 0..cfg.train.total_steps {
        let data = gen_batch(&task, step * batch as u64, batch).unwrap();
        train_step(&cfg, &mut params, &mut opt, &data, &ov).unwrap();
    }
    let eval = TaskSpec {
        seed: 900_000 + seed,
        ..task.clone()
    };
    let (mut correct, mut total) = (0, 0);
    let mut routings = Vec::new();
    for s in gen_batch(&eval, 0, 32).unwrap() {
        let (logits, saved) = model_forward(&cfg, &params, &s.tokens, &ov).unwrap();
        let (c, n) = accuracy(&logits, &s.targets, &task).unwrap();
        correct += c;
        total += n;
        routings.push(saved.routings());
    }
    (
        correct as f64 / total as f64,
        routing_stats(&routings).overall(),
    )
}

fn criterion_9() -> Outcome {
    let (sm_acc, _) = mqar_run(0, RoutingMode::AllSoftmax);
    let mut lines = vec![format!("all-softmax acc {sm_acc:.3} (≥ 0.90)")];
    let mut passes = 0;
    let mut tried = 0;
    for seed in 0..3u64 {
        let (acc, frac) = mqar_run(seed, RoutingMode::Learned);
        let (lin, _) = mqar_run(seed, RoutingMode::AllLinear);
        let ok = acc >= lin && frac > 0.0 && frac < 1.0;
        tried += 1;
        passes += ok as usize;
        lines.push(format!(
            "seed {seed}: learned {acc:.3} vs all-linear {lin:.3}, softmax fraction {frac:.3} → {}",
            if ok { "ok" } else { "miss" }
        ));
        // the first seed decides unless it misses
        if (tried == 1 && ok) || passes >= 2 || tried - passes >= 2 {
            break;
        }
    }
    let comparative = if tried == 1 { passes == 1 } else { passes >= 2 };
    outcome(sm_acc >= 0.9 && comparative, lines.join("; "))
}

// ---------------------------------------------------------------------------
// 10. every ablation flag changes the output; off reproduces the default
// ---------------------------------------------------------------------------

fn ablation_output(cfg: &BlockConfig, x: &Tensor<f64>) -> Tensor<f64> {
    let mut store = ParamStore::<f64>::new();
    init_block_params(&mut store, "b.", cfg, &mut rng(10)).unwrap();
    let routing = ChunkRouting::from_choices(
        cfg.h_lin,
        4,
        vec![
            Route::Softmax,
            Route::Linear,
            Route::Softmax,
            Route::Linear,
            Route::Linear,
            Route::Softmax,
            Route::Linear,
            Route::Linear,
        ],
    )
    .unwrap();
    let ov = BlockOverrides {
        routing: Some(routing),
        ..BlockOverrides::default()
    };
    block_forward(x, &store, "b.", cfg, &ov, None).unwrap().0
}

fn criterion_10() -> Outcome {
    let cfg = BlockConfig {
        d_model: 16,
        h_softmax: 4,
        h_lin: 2,
        d_head: 4,
        chunk: 4,
        sub_chunk: 4,
        ..BlockConfig::default()
    };
    let x = Tensor::randn(&[16, 16], 1.0, &mut rng(11));
    let base = ablation_output(&cfg, &x);
    type Flag = fn(&mut Ablations) -> &mut bool;
    let flags: [(&str, Flag); 6] = [
        ("sattn_out", |a| &mut a.sattn_out),
        ("gdn_out", |a| &mut a.gdn_out),
        ("no_linear_decay", |a| &mut a.no_linear_decay),
        ("single_norm", |a| &mut a.single_norm),
        ("fixed_weights", |a| &mut a.fixed_weights),
        ("weights_from_x", |a| &mut a.weights_from_x),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, flag) in flags {
        let mut on = cfg.clone();
        *flag(&mut on.ablations) = true;
        let diff = ablation_output(&on, &x).max_abs_diff(&base);
        let mut off = on.clone();
        *flag(&mut off.ablations) = false;
        let same = ablation_output(&off, &x)
            .data()
            .iter()
            .zip(base.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ok &= diff > 1e-6 && same;
        parts.push(format!(
            "{name} Δ={diff:.2e}{}",
            if same { "" } else { " (off differs!)" }
        ));
    }
    outcome(
        ok,
        format!("{} (> 1e-6; off bitwise equal)", parts.join(", ")),
    )
}

fn main() {
    type Criterion = (u32, &'static str, f64, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "GDN chunkwise vs recurrent oracle", 5.0, criterion_1),
        (
            2,
            "softmax path vs dense causal attention",
            1.0,
            criterion_2,
        ),
        (3, "mask gradient vs continuous-mask FD", 10.0, criterion_3),
        (
            4,
            "linear routing gradient vs continuous-gate FD",
            10.0,
            criterion_4,
        ),
        (5, "block parameter gradients vs FD", 60.0, criterion_5),
        (6, "decode vs one-shot forward", 30.0, criterion_6),
        (7, "attention cost accounting", 60.0, criterion_7),
        (8, "KV footprint", f64::INFINITY, criterion_8),
        (9, "MQAR comparative", 1800.0, criterion_9),
        (10, "ablation flag coverage", f64::INFINITY, criterion_10),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        let in_time = secs <= budget;
        let pass = o.pass && in_time;
        failed += !pass as usize;
        let budget = if budget.is_finite() {
            format!(" / {budget:.0}s")
        } else {
            String::new()
        };
        println!(
            "criterion {n:>2} {}: {name}: {} [{secs:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
