//! The velocity network: configuration, parameters, forward/backward,
//! checkpointing and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod params;
pub mod real;

pub use checkpoint::{params_checksum, Checkpoint};
pub use network::{
    adaln_modulate, aligned_pe, masked_attention, mm_attention, sinusoidal_pe, NetSession,
    SeqMeta, StepMask, Trace, VelocityNet,
};
pub use params::{LayerP, LinearP, MlpP, ModulationP, NetConfig, NetParams};
pub use real::{Precision, Real};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CondVocab;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn vocab_sizes() -> Vec<usize> {
        CondVocab { base_year: 2023, n_years: 2, categories: vec!["E3A".into(), "PV".into()] }.sizes()
    }

    fn tiny_net(seed: u64) -> VelocityNet<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        VelocityNet::init(NetConfig::tiny(vocab_sizes()), &mut rng).unwrap()
    }

    fn tiny_meta() -> SeqMeta {
        SeqMeta { padded_len: 16, valid_len: 16, steps_per_day: 8, first_weekday: 2 }
    }

    fn codes() -> Vec<usize> {
        vec![0, 6, 3, 2, 1, 1]
    }

    /// Random but padded-region-zero input.
    fn input(rng: &mut impl Rng, meta: &SeqMeta) -> Vec<f64> {
        (0..meta.padded_len)
            .map(|i| if i < meta.valid_len { rng.gen_range(-1.0..1.0) } else { 0.0 })
            .collect()
    }

    #[test]
    fn zero_final_projection_gives_zero_output() {
        let net = tiny_net(11);
        let meta = tiny_meta();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x = input(&mut rng, &meta);
        let out = net.forward(&x, 0.3, &codes(), &meta).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    fn randomize(net: &mut VelocityNet<f64>, seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for s in net.params.flat_slices_mut() {
            for v in s {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut net = tiny_net(1);
        randomize(&mut net, 2);
        for (padded, valid) in [(16usize, 16usize), (16, 8), (24, 16)] {
            let meta = SeqMeta { padded_len: padded, valid_len: valid, steps_per_day: 8, first_weekday: 4 };
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            let x = input(&mut rng, &meta);
            let out = net.forward(&x, 0.7, &codes(), &meta).unwrap();
            assert_eq!(out.len(), padded);
            assert!(out[valid..].iter().all(|&v| v == 0.0));
            assert!(out[..valid].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn padded_tail_cannot_influence_valid_outputs() {
        let mut net = tiny_net(4);
        randomize(&mut net, 5);
        let meta = SeqMeta { padded_len: 24, valid_len: 16, steps_per_day: 8, first_weekday: 1 };
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut x1 = input(&mut rng, &meta);
        let mut x2 = x1.clone();
        for v in &mut x2[16..] {
            *v = 0.5;
        }
        let o1 = net.forward(&x1, 0.2, &codes(), &meta).unwrap();
        let o2 = net.forward(&x2, 0.2, &codes(), &meta).unwrap();
        assert_eq!(o1[..16], o2[..16]);
        // Also bit-reproducible.
        let o3 = net.forward(&mut x1, 0.2, &codes(), &meta).unwrap();
        assert_eq!(o1, o3);
    }

    #[test]
    fn mask_equivalence_truncated_vs_padded() {
        let mut net = tiny_net(7);
        randomize(&mut net, 8);
        let valid = 16;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let meta_full = SeqMeta { padded_len: 32, valid_len: valid, steps_per_day: 8, first_weekday: 3 };
        let x_full = input(&mut rng, &meta_full);
        let meta_trunc = SeqMeta { padded_len: valid, valid_len: valid, steps_per_day: 8, first_weekday: 3 };
        let x_trunc = x_full[..valid].to_vec();
        let of = net.forward(&x_full, 0.5, &codes(), &meta_full).unwrap();
        let ot = net.forward(&x_trunc, 0.5, &codes(), &meta_trunc).unwrap();
        for i in 0..valid {
            assert!(
                (of[i] - ot[i]).abs() < 1e-10,
                "step {i}: padded {} vs truncated {}",
                of[i],
                ot[i]
            );
        }
    }

    #[test]
    fn rejects_nan_input_and_bad_codes() {
        let net = tiny_net(12);
        let meta = tiny_meta();
        let mut x = vec![0.0; 16];
        x[3] = f64::NAN;
        assert!(matches!(
            net.forward(&x, 0.5, &codes(), &meta),
            Err(crate::error::Error::Numeric(_))
        ));
        let x = vec![0.0; 16];
        let mut bad = codes();
        bad[1] = 99;
        assert!(net.forward(&x, 0.5, &bad, &meta).is_err());
        assert!(net.forward(&x, 0.5, &codes()[..3], &meta).is_err());
    }

    #[test]
    fn aligned_pe_examples() {
        let net = tiny_net(13);
        let d = net.config.model_dim;
        // w = 0 is the plain pipeline.
        let a = aligned_pe(5, 0, 8, &net.params, d);
        let b = aligned_pe(5, 0, 8, &net.params, d);
        assert_eq!(a, b);
        // t=0, w=3, day=96 equals the pipeline at 288.
        let shifted = aligned_pe(0, 3, 96, &net.params, d);
        let direct = aligned_pe(288, 0, 96, &net.params, d);
        assert_eq!(shifted, direct);
        // Different (t, w) with equal shifted index agree.
        let x1 = aligned_pe(16, 1, 8, &net.params, d); // 16 + 8
        let x2 = aligned_pe(0, 3, 8, &net.params, d); // 0 + 24
        assert_eq!(x1, x2);
    }

    #[test]
    fn masked_attention_examples() {
        let net = tiny_net(14);
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let layer = &net.params.layers[0];
        let n = 6;
        let d = net.config.model_dim;
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));

        // V = T: identical to unmasked attention.
        let full = StepMask { valid_tokens: n, seq_tokens: n };
        let o_full = masked_attention(&x, &full, layer, net.config.n_heads).unwrap();
        let cat_out = mm_attention(&x, &Array2::zeros((0, d)), &full, layer, net.config.n_heads).unwrap();
        assert_eq!(o_full, cat_out);

        // V < T: first V rows equal attention over the truncated sequence.
        let v = 4;
        let masked = StepMask { valid_tokens: v, seq_tokens: n };
        let o_masked = masked_attention(&x, &masked, layer, net.config.n_heads).unwrap();
        let x_trunc = x.slice(ndarray::s![..v, ..]).to_owned();
        let o_trunc = masked_attention(
            &x_trunc,
            &StepMask { valid_tokens: v, seq_tokens: v },
            layer,
            net.config.n_heads,
        )
        .unwrap();
        for i in 0..v {
            for j in 0..d {
                assert!((o_masked[(i, j)] - o_trunc[(i, j)]).abs() < 1e-12);
            }
        }

        // V = 0 is an error.
        assert!(masked_attention(&x, &StepMask { valid_tokens: 0, seq_tokens: n }, layer, net.config.n_heads).is_err());
    }

    #[test]
    fn single_valid_step_returns_value_projection() {
        let mut net = tiny_net(16);
        randomize(&mut net, 17);
        let d = net.config.model_dim;
        // Identity output map isolates the per-head attention result.
        net.params.layers[0].wo.w = Array2::eye(d);
        net.params.layers[0].wo.b = Array1::zeros(d);
        let layer = &net.params.layers[0];
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let x = Array2::from_shape_fn((5, d), |_| rng.gen_range(-1.0..1.0));
        let mask = StepMask { valid_tokens: 1, seq_tokens: 5 };
        let out = masked_attention(&x, &mask, layer, net.config.n_heads).unwrap();
        // Softmax over a single unmasked key: output row 0 is V row 0.
        let v_row = crate::nn::ops::linear_fwd(&x, &layer.wv);
        for j in 0..d {
            assert!((out[(0, j)] - v_row[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn condition_token_order_is_meaningful() {
        let mut net = tiny_net(19);
        randomize(&mut net, 20);
        let meta = tiny_meta();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x = input(&mut rng, &meta);

        // Swapping two condition values between slots changes the output,
        // because slot embeddings are tied to positions, not to fields.
        // (Fields 4 and 5 share vocabulary size 2, so the swap is encodable.)
        let c1 = vec![0, 6, 3, 2, 1, 0];
        let c2 = vec![0, 6, 3, 2, 0, 1];
        let o1 = net.forward(&x, 0.4, &c1, &meta).unwrap();
        let o2 = net.forward(&x, 0.4, &c2, &meta).unwrap();
        assert!(o1.iter().zip(&o2).any(|(a, b)| (a - b).abs() > 1e-12));

        // With slot embeddings tied (all equal) and the two tables tied,
        // swapping the values between the two slots no longer matters.
        let d = net.config.model_dim;
        for j in 0..6 {
            let row: Vec<f64> = (0..d).map(|i| 0.01 * i as f64).collect();
            net.params.slot_embed.row_mut(j).assign(&Array1::from(row));
        }
        let table = net.params.cond_tables[4].clone();
        net.params.cond_tables[5] = table;
        let o1 = net.forward(&x, 0.4, &c1, &meta).unwrap();
        let o2 = net.forward(&x, 0.4, &c2, &meta).unwrap();
        for (a, b) in o1.iter().zip(&o2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adaln_modulate_examples() {
        let mut net = tiny_net(22);
        randomize(&mut net, 23);
        let d = net.config.model_dim;
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let x = Array2::from_shape_fn((4, d), |_| rng.gen_range(-1.0..1.0));
        let cond = Array2::from_shape_fn((1, d), |_| rng.gen_range(-1.0..1.0));

        // Zero gate: residual passthrough no matter the sublayer.
        let mut mp = net.params.layers[0].attn_mod.clone();
        mp.sigma.l2.w.fill(0.0);
        mp.sigma.l2.b.fill(0.0);
        let out = adaln_modulate(&x, &cond, &mp, |h| h.mapv(|v| v * 100.0 + 3.0));
        assert_eq!(out, x);

        // lambda=1, beta=0, sigma=1 reduces to a standard pre-norm block.
        let mut mp = net.params.layers[0].attn_mod.clone();
        for mlp in [&mut mp.lambda, &mut mp.beta, &mut mp.sigma] {
            mlp.l1.w.fill(0.0);
            mlp.l1.b.fill(0.0);
            mlp.l2.w.fill(0.0);
        }
        mp.lambda.l2.b.fill(1.0);
        mp.beta.l2.b.fill(0.0);
        mp.sigma.l2.b.fill(1.0);
        let out = adaln_modulate(&x, &cond, &mp, |h| h.mapv(|v| v * 2.0));
        let (xhat, _) = crate::nn::ops::layernorm_fwd(&x);
        let expect = &x + &xhat.mapv(|v| v * 2.0);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linearity_and_unused_params() {
        let mut net = tiny_net(25);
        randomize(&mut net, 26);
        let meta = tiny_meta();
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let x = input(&mut rng, &meta);
        let c = codes();
        let (_, trace) = net.forward_traced(&x, 0.6, &c, &meta).unwrap();
        let d_out: Vec<f64> = (0..meta.padded_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g1 = NetParams::zeros(&net.config);
        net.backward(&trace, &d_out, &meta, &mut g1);
        let d_out2: Vec<f64> = d_out.iter().map(|v| v * 2.0).collect();
        let mut g2 = NetParams::zeros(&net.config);
        net.backward(&trace, &d_out2, &meta, &mut g2);
        for (a, b) in g1.flat_slices().iter().zip(g2.flat_slices().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        // Rows of condition tables that were never indexed get zero gradient.
        let unused_row = 1 - c[0];
        assert!(g1.cond_tables[0].row(unused_row).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn session_backward_without_forward_is_state_error() {
        let net = tiny_net(28);
        let mut session = NetSession::new(&net);
        let d_out = vec![0.0; 16];
        assert!(matches!(
            session.backward(&d_out),
            Err(crate::error::Error::State(_))
        ));
        let meta = tiny_meta();
        let x = vec![0.1; 16];
        session.forward(&x, 0.5, &codes(), &meta).unwrap();
        assert!(session.backward(&d_out).is_ok());
        // Trace is consumed.
        assert!(session.backward(&d_out).is_err());
    }

    #[test]
    fn gradcheck_small_subset() {
        // The full sweep runs in the acceptance suite; keep a quick guard
        // here on a very small input.
        let mut net = tiny_net(29);
        randomize(&mut net, 30);
        let meta = SeqMeta { padded_len: 8, valid_len: 8, steps_per_day: 4, first_weekday: 5 };
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let x = input(&mut rng, &meta);
        let report =
            gradcheck::finite_difference_check(&mut net, &x, 0.35, &codes(), &meta, 1e-5, 99).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {} (worst tensors: {:?})",
            report.max_rel_error,
            {
                let mut v = report.per_tensor.clone();
                v.sort_by(|a, b| b.1.total_cmp(&a.1));
                v.truncate(5);
                v
            }
        );
    }
}
