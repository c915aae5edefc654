//! Properties that hold for every input, checked with proptest.

mod common;

use common::*;
use hybrid_attn_core::attn::{masked_attention_backward, masked_attention_forward, ColumnMask};
use hybrid_attn_core::block::{BlockConfig, LayerKind};
use hybrid_attn_core::gdn::{
    gdn_chunkwise_backward, gdn_chunkwise_forward, GdnOptions, LinearState,
};
use hybrid_attn_core::model::{
    batch_loss, init_params, model_forward, ModelConfig, ModelOverrides, RoutingMode,
};
use hybrid_attn_core::stats::routing_stats;
use hybrid_attn_core::task::{gen_batch, TaskSpec};
use hybrid_attn_core::{ChunkRouting, Route, Tensor};
use proptest::prelude::*;

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab: 32,
        n_layers: 2,
        layer_pattern: vec![LayerKind::Hybrid, LayerKind::Hybrid],
        block: BlockConfig {
            d_model: 16,
            h_softmax: 2,
            h_lin: 1,
            d_head: 8,
            chunk: 4,
            sub_chunk: 4,
            rope: true,
            score_init_std: 0.5,
            ..BlockConfig::default()
        },
        embed_init_std: 1.0,
        seed,
        ..ModelConfig::default()
    }
}

fn routes(bits: &[bool], groups: usize, chunks: usize) -> ChunkRouting<f64> {
    let choices = bits
        .iter()
        .map(|&b| if b { Route::Softmax } else { Route::Linear })
        .collect();
    ChunkRouting::from_choices(groups, chunks, choices).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_ignores_a_shared_key_offset(
        seed in 0u64..1000,
        active in proptest::collection::vec(any::<bool>(), 8),
        offset in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        let (len, heads, d, chunk) = (16, 2, 4, 4);
        let mut r = rng(seed);
        let q = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let mut shifted = k.clone();
        for (i, x) in shifted.data_mut().iter_mut().enumerate() {
            *x += offset[i % d];
        }
        let mask = ColumnMask::new(2, 4, chunk, active).unwrap();
        let (a, _) = masked_attention_forward(&q, &k, &v, &mask, &[0, 1]).unwrap();
        let (b, _) = masked_attention_forward(&q, &shifted, &v, &mask, &[0, 1]).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn routing_gradients_vanish_where_unused(
        seed in 0u64..1000,
        active in proptest::collection::vec(any::<bool>(), 8),
    ) {
        let (len, heads, d, chunk) = (16, 2, 4, 4);
        let mut r = rng(seed);
        let q = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[len, heads, d], 1.0, &mut r);
        let mask = ColumnMask::new(2, 4, chunk, active.clone()).unwrap();
        let (_, saved) = masked_attention_forward(&q, &k, &v, &mask, &[0, 1]).unwrap();
        let g = masked_attention_backward(&w, &saved, &q, &k, &v, &mask, &[0, 1], false).unwrap();
        for (i, &on) in active.iter().enumerate() {
            if !on || i % 4 == 3 {
                // inactive, or the last chunk, which no later query sees
                prop_assert_eq!(g.dscore.data()[i], 0.0);
            }
        }

        let case = GdnCase::random(len, heads, d, seed);
        let routing = routes(&active, heads, 4);
        let opts = GdnOptions::new(chunk);
        let (_, saved) = gdn_chunkwise_forward(
            &case.q, &case.k, &case.v, &case.alpha, &case.beta, &routing, &opts, None,
        ).unwrap();
        let g = gdn_chunkwise_backward(
            &w, &saved, &case.q, &case.k, &case.v, &case.alpha, &case.beta, &routing, &opts, None,
        ).unwrap();
        for (i, &softmax) in active.iter().enumerate() {
            if softmax {
                prop_assert_eq!(g.dscore.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn softmax_chunks_only_decay_the_state(seed in 0u64..1000) {
        let (len, heads, d, chunk) = (16, 2, 4, 4);
        let case = GdnCase::random(len, heads, d, seed);
        let s0 = LinearState { s: Tensor::randn(&[heads, d, d], 1.0, &mut rng(seed + 1)) };
        let routing = ChunkRouting::<f64>::uniform(heads, 4, Route::Softmax);
        let (_, saved) = gdn_chunkwise_forward(
            &case.q, &case.k, &case.v, &case.alpha, &case.beta, &routing,
            &GdnOptions::new(chunk), Some(&s0),
        ).unwrap();
        let fin = saved.final_state();
        for h in 0..heads {
            let decay: f64 = (0..len).map(|i| case.alpha.get(&[i, h])).product();
            for x in 0..d * d {
                let want = s0.s.data()[h * d * d + x] * decay;
                prop_assert!((fin.s.data()[h * d * d + x] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_is_causal_and_deterministic(
        seed in 0u64..50,
        tokens in proptest::collection::vec(2u32..32, 9..24),
        pos in 0usize..24,
        replacement in 2u32..32,
    ) {
        let cfg = tiny_model(seed);
        let store = init_params::<f64>(&cfg).unwrap();
        let ov = ModelOverrides::<f64>::default();
        let pos = pos % tokens.len();
        let (a, _) = model_forward(&cfg, &store, &tokens, &ov).unwrap();
        let (again, _) = model_forward(&cfg, &store, &tokens, &ov).unwrap();
        prop_assert_eq!(a.data(), again.data());
        let mut changed = tokens.clone();
        changed[pos] = replacement;
        let (b, _) = model_forward(&cfg, &store, &changed, &ov).unwrap();
        for i in 0..pos {
            prop_assert_eq!(a.row(i), b.row(i), "position {} moved after editing {}", i, pos);
        }
    }

    #[test]
    fn batch_loss_ignores_sequence_order(seed in 0u64..50, rot in 1usize..4) {
        let cfg = ModelConfig {
            vocab: TaskSpec::default().vocab(),
            ..tiny_model(seed)
        };
        let task = TaskSpec { n_pairs: 4, seq_len: 32, seed, ..TaskSpec::default() };
        let store = init_params::<f64>(&cfg).unwrap();
        let batch = gen_batch(&task, 0, 4).unwrap();
        let mut permuted = batch.clone();
        permuted.rotate_left(rot);
        let ov = ModelOverrides::<f64>::default();
        let a = batch_loss(&cfg, &store, &batch, &ov).unwrap();
        let b = batch_loss(&cfg, &store, &permuted, &ov).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn routing_fractions_are_proportions(
        layers in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 1..4),
    ) {
        let seqs: Vec<Vec<ChunkRouting<f64>>> = (0..3)
            .map(|_| layers.iter().map(|bits| routes(bits, 3, 4)).collect())
            .collect();
        let stats = routing_stats(&seqs);
        for f in stats.fractions().iter().flatten().chain(&stats.layer_fractions()) {
            prop_assert!((0.0..=1.0).contains(f));
        }
        let softmax = layers.iter().flatten().filter(|&&b| b).count();
        let total = layers.len() * 12;
        prop_assert!((stats.overall() - softmax as f64 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn forced_fraction_routes_the_requested_share(p in 0.0f64..=1.0, chunks in 1usize..40) {
        let r = RoutingMode::Fraction(p).forced::<f64>(2, chunks).unwrap();
        let got = r.count(Route::Softmax) as f64 / (2 * chunks) as f64;
        prop_assert!(got <= p && p - got < 1.0 / chunks as f64);
    }
}
