//! Weakly supervised lesion localizer and report generator.

mod model;

pub use model::{
    aggregate, aggregate_values, bce_loss, DetConfig, DetTrace, Detector, DetectorOutput, BCE_EPS,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{check_gradients, GradCheckConfig, Graph, Initializer, Tensor};
    use crate::locparse::{parse_report, LocationLabel};
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn image(side: usize, seed: u64) -> Vec<f32> {
        Initializer::new(seed)
            .uniform::<f32>(&[side * side], 1.0)
            .into_data()
    }

    fn micro() -> DetConfig {
        DetConfig {
            image_size: 32,
            widths: vec![2, 3, 4],
            strides: vec![4, 2, 2],
            fused: 4,
            d_q: 4,
            n_queries: 3,
            heads: 2,
            decoder_layers: 1,
        }
    }

    #[test]
    fn aggregate_two_by_two_case() {
        let a = aggregate_values(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        let e = std::f64::consts::E;
        assert!((a.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((a.data()[0] - 0.7311).abs() < 1e-4 && (a.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn aggregate_degenerate_cases() {
        let v = [0.3, -1.25, 2.0];
        let rows: Vec<f64> = v.iter().cycle().take(12).copied().collect();
        let a = aggregate_values(&t(&[4, 3], &rows), &Initializer::new(1).uniform(&[6, 3], 2.0)).unwrap();
        for row in a.data().chunks(3) {
            assert_eq!(row, &v);
        }
        let x = Initializer::new(2).uniform::<f64>(&[5, 3], 1.0);
        let a = aggregate_values(&x, &Tensor::zeros(&[2, 3])).unwrap();
        for row in a.data().chunks(3) {
            for c in 0..3 {
                let mean = (0..5).map(|r| x.data()[r * 3 + c]).sum::<f64>() / 5.0;
                assert!((row[c] - mean).abs() < 1e-15);
            }
        }
        assert!(aggregate_values(&x, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn bce_worked_examples() {
        let half = [0.5; 6];
        for code in [0u8, 21, 63] {
            let y = LocationLabel::from_code(code).targets();
            assert!((bce_loss(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        }
        let p = [0.9, 0.1, 0.1, 0.1, 0.1, 0.8];
        let y = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let expected = -(5.0 * 0.9f64.ln() + 0.8f64.ln()) / 6.0;
        let l = bce_loss(&p, &y).unwrap();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.1250).abs() < 1e-3);
        assert!(bce_loss(&y, &y).unwrap() < 1e-5);
        assert!(bce_loss(&p, &[0.5, 0.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn tape_bce_matches_plain() {
        let p = [0.9, 0.1, 0.1, 0.1, 0.1, 0.8];
        let y = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut g = Graph::<f64>::new();
        let pv = g.input(t(&[6], &p));
        let l = g.bce_prob(pv, &y, BCE_EPS);
        assert!((g.value(l).data()[0] - bce_loss(&p, &y).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn detect_shape_and_determinism() {
        let det = Detector::<f32>::new(DetConfig::default(), 0).unwrap();
        let img = image(64, 3);
        let x = det.detect(&img).unwrap();
        assert_eq!(x.shape(), &[10, 64]);
        assert_eq!(det.detect(&img).unwrap(), x);
        let out = det.predict_labels(&img, 0.5).unwrap();
        assert!(out.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
        let strict = det.predict_labels(&img, 0.999_999).unwrap();
        for (b, p) in strict.label.bits().iter().zip(strict.probabilities) {
            assert_eq!(*b, p >= 0.999_999);
        }
        assert!(det.predict_labels(&img, 1.0).is_err());
        assert!(det.detect(&image(40, 0)).is_err());
    }

    #[test]
    fn report_round_trip_on_untrained_model() {
        let det = Detector::<f32>::new(DetConfig::default(), 5).unwrap();
        for seed in 0..4 {
            let img = image(64, seed);
            for tau in [0.3, 0.5, 0.7] {
                let r = det.generate_report(&img, tau).unwrap();
                assert_eq!(parse_report(&r), det.predict_labels(&img, tau).unwrap().label);
            }
        }
    }

    #[test]
    fn aggregate_gradients() {
        let mut store = crate::diffkit::ParamStore::<f64>::new();
        let mut inputs = vec![
            Initializer::new(1).uniform::<f64>(&[5, 8], 1.0),
            Initializer::new(2).uniform::<f64>(&[6, 8], 1.0),
        ];
        let r = check_gradients(
            &mut store,
            &mut inputs,
            |g, _, v| Ok(aggregate(g, v[0], v[1])?.0),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn head_and_bce_gradients() {
        let det = Detector::<f64>::new(micro(), 4).unwrap();
        let mut store = det.store.clone();
        let mut inputs = vec![Initializer::new(3).uniform::<f64>(&[6, 4], 1.0)];
        let y = LocationLabel::from_code(37).targets();
        let r = check_gradients(
            &mut store,
            &mut inputs,
            |g, s, v| {
                let p = det.head_graph(g, s, v[0]);
                Ok(g.bce_prob(p, &y, BCE_EPS))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn micro_detector_gradients() {
        let det = Detector::<f64>::new(micro(), 6).unwrap();
        let mut store = det.store.clone();
        let mut inputs = vec![Initializer::new(7).uniform::<f64>(&[1, 32, 32], 1.0)];
        let label = LocationLabel::from_code(9);
        let r = check_gradients(
            &mut store,
            &mut inputs,
            |g, s, v| det.loss_graph(g, s, v[0], &label),
            &GradCheckConfig {
                max_entries_per_tensor: 16,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn every_zone_covers_some_tokens() {
        for (side, grid) in [(64, 8), (32, 4), (64, 4)] {
            let m = model::zone_token_mask(side, grid, grid);
            assert_eq!(m.len(), 6 * grid * grid);
            for (z, row) in m.chunks(grid * grid).enumerate() {
                assert!(row.iter().any(|&b| b), "side {side} grid {grid} zone {z}");
                assert!(!row.iter().all(|&b| b), "side {side} grid {grid} zone {z}");
            }
        }
    }

    proptest! {
        #[test]
        fn aggregation_is_convex(seed in 0u64..500, n in 1usize..8, d in 1usize..6) {
            let x = Initializer::new(seed).uniform::<f64>(&[n, d], 3.0);
            let q = Initializer::new(seed + 1).uniform::<f64>(&[6, d], 3.0);
            let mut g = Graph::new();
            let (xv, qv) = (g.input(x.clone()), g.input(q));
            let (a, w) = aggregate(&mut g, xv, qv).unwrap();
            for row in g.value(w).data().chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for c in 0..d {
                let col: Vec<f64> = (0..n).map(|r| x.data()[r * d + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for r in 0..6 {
                    let v = g.value(a).data()[r * d + c];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn bce_moves_toward_target(code in 0u8..64, p in proptest::array::uniform6(0.01f64..0.99), k in 0usize..6, step in 0.001f64..0.5) {
            let y = LocationLabel::from_code(code).targets();
            let base = bce_loss(&p, &y).unwrap();
            prop_assert!(base >= 0.0);
            let mut q = p;
            q[k] = if y[k] == 1.0 { (p[k] + step).min(0.995) } else { (p[k] - step).max(0.005) };
            if q[k] != p[k] {
                prop_assert!(bce_loss(&q, &y).unwrap() < base);
            }
        }
    }
}
