//! Public-API checks against brute-force oracles.

use fedexdnn::encoder::{EncoderConfig, EncoderParams};
use fedexdnn::eval::{auc, best_f1, metrics_at, ScoredSet};
use fedexdnn::exdnn::{score_embedding, ExemplarSet};
use fedexdnn::fedserver::{avg_exemplars, fedavg_encoders, merge_exemplars};
use fedexdnn::model::{LocalModel, TrainDiagnostics};
use fedexdnn::numkernel::Tensor;
use proptest::prelude::*;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60)
        .prop_flat_map(|n| (prop::collection::vec(-8i32..8, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
        .prop_map(|(s, l)| (s.into_iter().map(|v| f64::from(v) / 4.0).collect(), l))
}

fn upload(id: usize, encoder: EncoderParams, rows: Vec<Vec<f64>>, n: usize) -> LocalModel {
    LocalModel {
        client_id: id,
        encoder,
        exemplars: ExemplarSet::from_rows(&rows).unwrap(),
        sample_count: n,
        diagnostics: TrainDiagnostics {
            epochs: 0,
            steps: 0,
            loss_curve: vec![],
            final_loss: Default::default(),
        },
    }
}

proptest! {
    #[test]
    fn auc_is_the_pairwise_statistic((s, l) in scored()) {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let got = auc(&ScoredSet::new(s, l).unwrap()).unwrap();
        prop_assert!((got - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn best_f1_beats_every_threshold((s, l) in scored()) {
        let set = ScoredSet::new(s.clone(), l).unwrap();
        let best = best_f1(&set).unwrap();
        prop_assert_eq!(metrics_at(&set, best.threshold), best);
        for &t in &s {
            prop_assert!(metrics_at(&set, t).f1 <= best.f1);
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling((s, l) in scored(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = auc(&ScoredSet::new(s.clone(), l.clone()).unwrap()).unwrap();
        let moved = auc(&ScoredSet::new(s.iter().map(|v| a * v + b).collect(), l).unwrap()).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn score_is_bounded(e in prop::collection::vec(-3.0f64..3.0, 4), c in prop::collection::vec(-3.0f64..3.0, 12)) {
        prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
        let rows: Vec<&[f64]> = c.chunks(4).collect();
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let s = score_embedding(&e, &ExemplarSet::from_rows(&rows).unwrap()).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn fedavg_is_the_weighted_mean(counts in prop::collection::vec(1usize..100, 1..5), seed in 0u64..1000) {
        let cfg = EncoderConfig::new(2);
        let ups: Vec<LocalModel> = counts
            .iter()
            .enumerate()
            .map(|(c, &n)| upload(c, EncoderParams::init(&cfg, seed + c as u64).unwrap(), vec![vec![1.0; cfg.embed_dim]], n))
            .collect();
        let avg = fedavg_encoders(&ups).unwrap();
        let total: usize = counts.iter().sum();
        for i in 0..avg.values.len() {
            let expected: f64 = ups.iter().map(|u| u.sample_count as f64 * u.encoder.values[i]).sum::<f64>() / total as f64;
            prop_assert!((avg.values[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_rows_stay_in_the_pooled_box(q in prop::collection::vec(0.01f64..1.0, 12), x in prop::collection::vec(-2.0f64..2.0, 18)) {
        let q = Tensor::matrix(6, 2, q).unwrap();
        let pooled = Tensor::matrix(6, 3, x).unwrap();
        let merged = merge_exemplars(&q, &pooled, 0).unwrap().exemplars;
        for z in 0..2 {
            for c in 0..3 {
                let col: Vec<f64> = (0..6).map(|i| pooled.at(i, c)).collect();
                let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                let v = merged.exemplar(z)[c];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn slot_average_of_identical_uploads_is_identity() {
    let cfg = EncoderConfig::new(1);
    let rows = vec![vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5], vec![0.0, -1.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]];
    let ups: Vec<LocalModel> =
        (0..3).map(|c| upload(c, EncoderParams::zeros(&cfg).unwrap(), rows.clone(), 10)).collect();
    let out = avg_exemplars(&ups, 0).unwrap().exemplars;
    assert_eq!(out, ExemplarSet::from_rows(&rows).unwrap());
}
