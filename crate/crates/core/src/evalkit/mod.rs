//! Segmentation and label metrics, the ablation runner and figure exports.

mod ablation;
mod metrics;
mod report;
mod viz;

pub use ablation::{evaluate_ablation, AblationInputs, AblationModels, Mode};
pub use metrics::{adjusted_rand_index, label_metrics, seg_metrics, LabelMetrics, RegionScores, SegScores};
pub use report::{MetricsReport, SampleRow};
pub use viz::{export_attention_maps, normalize_panel, AttentionExport};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KeyValues;
    use crate::data_forge::{generate_sample, GeneratorConfig, Sample};
    use crate::lerg_detector::{DetConfig, Detector};
    use crate::seg_net::{SegConfig, SegNet};

    fn samples(n: usize) -> (Vec<Sample>, Vec<String>) {
        let s: Vec<Sample> = (0..n).map(|i| generate_sample(&GeneratorConfig::default(), i).unwrap()).collect();
        let ids = (0..n).map(|i| format!("case_{i}")).collect();
        (s, ids)
    }

    #[test]
    fn panel_normalization() {
        assert_eq!(normalize_panel(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        assert_eq!(normalize_panel(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn modes_and_requirements() {
        let (s, ids) = samples(4);
        let guided = SegNet::<f32>::new(SegConfig::default(), 0).unwrap();
        let free = SegNet::<f32>::new(SegConfig::default(), 1).unwrap();
        let det = Detector::<f32>::new(DetConfig::default(), 2).unwrap();
        let inputs = AblationInputs {
            samples: &s,
            ids: &ids,
            threshold: 0.5,
            tau: 0.5,
            meta: KeyValues::new(),
        };
        // Full text runs without a detector.
        let only_guided = AblationModels {
            guided: Some(&guided),
            ..Default::default()
        };
        let r = evaluate_ablation(only_guided, &inputs, &[Mode::FullText]).unwrap();
        assert_eq!(r[0].samples.len(), 4);
        assert!(evaluate_ablation(only_guided, &inputs, &[Mode::SelfGuided]).is_err());

        let all = AblationModels {
            guided: Some(&guided),
            text_free: Some(&free),
            detector: Some(&det),
        };
        let a = evaluate_ablation(all, &inputs, &Mode::ALL).unwrap();
        let b = evaluate_ablation(all, &inputs, &Mode::ALL).unwrap();
        assert_eq!(a, b);
        // Text-free results do not depend on the detector.
        let other = Detector::<f32>::new(DetConfig::default(), 9).unwrap();
        let c = evaluate_ablation(AblationModels { detector: Some(&other), ..all }, &inputs, &[Mode::TextFree]).unwrap();
        assert_eq!(c[0], a[0]);
        // Self-guided equals full-text wherever the generated report is exact.
        for ((sg, ft), smp) in a[1].samples.iter().zip(&a[2].samples).zip(&s) {
            if sg.report == smp.report {
                assert_eq!(sg.scores, ft.scores);
            }
        }
        let kv = a[1].to_kv();
        assert!(kv.get("detector.macro_f1").is_some());
        assert_eq!(a[1].to_table().lines().count(), 5);
        for row in &a[0].samples {
            assert_eq!(row.report, "");
        }
    }

    #[test]
    fn attention_export_files() {
        let (s, _) = samples(1);
        let net = SegNet::<f32>::new(SegConfig::default(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = export_attention_maps(&net, &s[0].image, &s[0].report, Some(&s[0].mask), dir.path()).unwrap();
        assert_eq!(out.files.len(), 6);
        assert_eq!(out.panel.len(), 64 * 64);
        assert!(out.panel.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for f in &out.files {
            assert!(f.exists());
        }
        let (w, h, _) = crate::data_forge::read_gray(&out.files[2]).unwrap();
        assert_eq!((w, h), (64, 64));
    }
}
