//! Differentiable computation substrate: tensors, a reverse-mode tape,
//! parameter storage, network building blocks and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_gradients, EntryLocation, GradCheckConfig, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    scaled_dot_attention, sinusoid_2d, Activation, AttentionOutput, Conv, ConvStage, FeedForward,
    LayerNorm, Linear, MultiHeadAttention, MultiHeadOutput, UpsampleMerge,
};
pub use params::{Initializer, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        Initializer::new(seed).uniform(shape, 1.0)
    }

    #[test]
    fn attention_single_key_copies_value() {
        let mut g = Graph::<f64>::new();
        let q = g.input(seeded(&[3, 4], 1));
        let k = g.input(seeded(&[1, 4], 2));
        let v = g.input(t(&[1, 2], &[0.5, -2.0]));
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert!(g.value(out.weights).data().iter().all(|&w| w == 1.0));
        for row in g.value(out.output).data().chunks(2) {
            assert_eq!(row, &[0.5, -2.0]);
        }
    }

    #[test]
    fn attention_orthogonal_query_is_uniform() {
        let mut g = Graph::<f64>::new();
        let q = g.input(t(&[1, 2], &[0.0, 0.0]));
        let k = g.input(seeded(&[5, 2], 3));
        let v = g.input(seeded(&[5, 3], 4));
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for &w in g.value(out.weights).data() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_computed_case() {
        // logits (1/√2, 0): softmax = (e^{1/√2}, 1) / (e^{1/√2} + 1)
        let mut g = Graph::<f64>::new();
        let q = g.input(t(&[1, 2], &[1.0, 0.0]));
        let k = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = g.input(t(&[2, 1], &[1.0, 0.0]));
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        let w = g.value(out.weights).data();
        assert!((w[0] - 0.6698).abs() < 1e-4, "{w:?}");
        assert!((w[1] - 0.3302).abs() < 1e-4);
        assert!((g.value(out.output).data()[0] - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn attention_masked_positions_are_exactly_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.input(seeded(&[2, 3], 5));
        let k = g.input(seeded(&[4, 3], 6));
        let v = g.input(seeded(&[4, 2], 7));
        let allowed = [true, false, true, false];
        let out = scaled_dot_attention(&mut g, q, k, v, Some(&allowed)).unwrap();
        let w = g.value(out.weights).data();
        for row in w.chunks(4) {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_all_masked_row_is_rejected() {
        let mut g = Graph::<f64>::new();
        let q = g.input(seeded(&[2, 3], 5));
        let k = g.input(seeded(&[2, 3], 6));
        let v = g.input(seeded(&[2, 2], 7));
        let allowed = [true, true, false, false];
        let err = scaled_dot_attention(&mut g, q, k, v, Some(&allowed)).err().unwrap();
        assert!(matches!(err, crate::Error::DegenerateAttention { row: 1 }));
    }

    #[test]
    fn conv_stage_shapes_and_zero_input() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        let stage = ConvStage::new(&mut store, &mut init, "s", 1, 16, 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 64, 64]));
        let y = stage.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[16, 16, 16]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bad = g.input(Tensor::zeros(&[1, 30, 30]));
        assert!(stage.forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn conv_stage_identity_kernel_subsamples() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        let mut stage = ConvStage::new(&mut store, &mut init, "s", 1, 1, 2).unwrap();
        stage.activation = Activation::Identity;
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        store.get_mut(stage.conv.w).value = t(&[1, 1, 3, 3], &kernel);
        let input = seeded(&[1, 8, 8], 9);
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = stage.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4]);
        for oy in 0..4 {
            for ox in 0..4 {
                assert_eq!(
                    g.value(y).data()[oy * 4 + ox],
                    input.data()[(2 * oy) * 8 + 2 * ox]
                );
            }
        }
    }

    #[test]
    fn upsample_merge_shapes_and_nearest_blocks() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(1);
        let merge = UpsampleMerge::new(&mut store, &mut init, "m", 3, 2, 5).unwrap();
        let mut g = Graph::new();
        let low = g.input(Tensor::full(&[3, 4, 4], 0.75));
        let skip = g.input(seeded(&[2, 8, 8], 2));
        let y = merge.forward(&mut g, &store, low, skip).unwrap();
        assert_eq!(g.shape(y), &[5, 8, 8]);
        let up = g.upsample_nearest(low, 2);
        assert!(g.value(up).data().iter().all(|&v| v == 0.75));

        let wrong = g.input(seeded(&[2, 6, 6], 2));
        assert!(merge.forward(&mut g, &store, low, wrong).is_err());
    }

    #[test]
    fn upsample_merge_zero_low_depends_only_on_skip_weights() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(1);
        let merge = UpsampleMerge::new(&mut store, &mut init, "m", 3, 2, 4).unwrap();
        let skip_t = seeded(&[2, 8, 8], 2);
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let low = g.input(Tensor::zeros(&[3, 4, 4]));
            let skip = g.input(skip_t.clone());
            let y = merge.forward(&mut g, store, low, skip).unwrap();
            g.value(y).clone()
        };
        let base = run(&store);
        // Scrambling the weights that read the coarse channels changes nothing.
        let w = &mut store.get_mut(merge.conv.w).value;
        let data = w.data_mut();
        for co in 0..4 {
            for ci in 0..3 {
                for k in 0..9 {
                    data[(co * 5 + ci) * 9 + k] = 7.0;
                }
            }
        }
        assert_eq!(run(&store), base);
    }

    #[test]
    fn gradcheck_linear_map_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(3);
        let lin = Linear::new(&mut store, &mut init, "lin", 4, 3, false).unwrap();
        let mut inputs = vec![seeded(&[2, 4], 8)];
        let report = check_gradients(
            &mut store,
            &mut inputs,
            |g, s, v| Ok(lin.forward(g, s, v[0])),
            &GradCheckConfig {
                tolerance: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradcheck_primitives() {
        let cfg = GradCheckConfig::default();
        let mut store = ParamStore::<f64>::new();
        let cases: Vec<(Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>)> = vec![
            (vec![seeded(&[3, 4], 1)], Box::new(|g, v| g.gelu(v[0]))),
            (vec![seeded(&[3, 4], 1)], Box::new(|g, v| g.sigmoid(v[0]))),
            (
                vec![seeded(&[3, 4], 1)],
                Box::new(|g, v| g.softmax_rows(v[0], Some(&[true, false, true, true])).unwrap()),
            ),
            (
                vec![seeded(&[3, 4], 1), seeded(&[4], 2), seeded(&[4], 3)],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
            ),
            (
                vec![seeded(&[2, 6, 6], 1), seeded(&[3, 2, 3, 3], 2), seeded(&[3], 3)],
                Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2)),
            ),
            (
                vec![seeded(&[2, 3, 3], 1)],
                Box::new(|g, v| g.upsample_bilinear(v[0], 4)),
            ),
            (
                vec![seeded(&[2, 3, 3], 1)],
                Box::new(|g, v| g.upsample_nearest(v[0], 2)),
            ),
            (
                vec![seeded(&[5, 3], 1)],
                Box::new(|g, v| g.gather(v[0], &[4, 0, 4, 2])),
            ),
            (
                vec![seeded(&[4, 3], 1)],
                Box::new(|g, v| g.masked_mean_rows(v[0], &[true, false, true, true])),
            ),
            (
                vec![seeded(&[4, 3], 1), seeded(&[4, 2], 2)],
                Box::new(|g, v| {
                    let a = g.slice_cols(v[0], 1, 2);
                    let c = g.concat_cols(&[a, v[1]]);
                    let tr = g.transpose(c);
                    g.sum_rows(tr)
                }),
            ),
            (
                vec![seeded(&[6], 1)],
                Box::new(|g, v| {
                    let p = g.sigmoid(v[0]);
                    g.bce_prob(p, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 1e-7)
                }),
            ),
            (
                vec![seeded(&[2, 4, 4], 1)],
                Box::new(|g, v| {
                    let target: Vec<f64> = (0..32).map(|i| (i % 3 == 0) as u8 as f64).collect();
                    let a = g.bce_logits(v[0], &target);
                    let b = g.dice_loss(v[0], &target, 1.0);
                    g.add(a, b)
                }),
            ),
        ];
        for (i, (mut inputs, f)) in cases.into_iter().enumerate() {
            let report =
                check_gradients(&mut store, &mut inputs, |g, _, v| Ok(f(g, v)), &cfg).unwrap();
            assert!(report.passed(), "case {i}: {report:?}");
        }
    }

    #[test]
    fn gradcheck_attention_random_3x4() {
        let mut store = ParamStore::<f64>::new();
        let mut inputs = vec![seeded(&[3, 4], 0), seeded(&[3, 4], 1), seeded(&[3, 4], 2)];
        let report = check_gradients(
            &mut store,
            &mut inputs,
            |g, _, v| Ok(scaled_dot_attention(g, v[0], v[1], v[2], None)?.output),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradcheck_reports_non_finite_location() {
        let mut store = ParamStore::<f64>::new();
        let mut inputs = vec![t(&[2], &[1.0, f64::NAN])];
        let err = check_gradients(
            &mut store,
            &mut inputs,
            |g, _, v| Ok(g.gelu(v[0])),
            &GradCheckConfig::default(),
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("entry 1"), "{err}");
    }

    proptest! {
        #[test]
        fn attention_rows_sum_to_one(nq in 1usize..6, nk in 1usize..6, d in 1usize..6, seed in 0u64..1000) {
            let mut g = Graph::<f64>::new();
            let q = g.input(Initializer::new(seed).uniform(&[nq, d], 3.0));
            let k = g.input(Initializer::new(seed + 1).uniform(&[nk, d], 3.0));
            let v = g.input(Initializer::new(seed + 2).uniform(&[nk, 2], 1.0));
            let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
            prop_assert_eq!(g.shape(out.output), &[nq, 2]);
            for row in g.value(out.weights).data().chunks(nk) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn stage_shapes_follow_contract(c_in in 1usize..4, c_out in 1usize..6, k in 1usize..5, s in prop::sample::select(vec![2usize, 4])) {
            let mut store = ParamStore::<f32>::new();
            let mut init = Initializer::new(0);
            let stage = ConvStage::new(&mut store, &mut init, "s", c_in, c_out, s).unwrap();
            let merge = UpsampleMerge::new(&mut store, &mut init, "m", c_out, c_in, 3).unwrap();
            let side = k * s * 2;
            let mut g = Graph::new();
            let x = g.input(Tensor::zeros(&[c_in, side, side]));
            let y = stage.forward(&mut g, &store, x).unwrap();
            prop_assert_eq!(g.shape(y), &[c_out, side / s, side / s]);
            let skip = g.input(Tensor::zeros(&[c_in, 2 * side / s, 2 * side / s]));
            let z = merge.forward(&mut g, &store, y, skip).unwrap();
            prop_assert_eq!(g.shape(z), &[3, 2 * side / s, 2 * side / s]);
        }
    }
}
