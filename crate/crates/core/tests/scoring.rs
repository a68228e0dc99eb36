use eyedent::eval::{self, EnrollmentTemplate, Setting, SplitSpec, TestStream};
use eyedent::model::EmbeddingVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// coarse grid so ties are common
fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-8i32..8).prop_map(|k| k as f64 / 8.0), 1..40)
}

/// Probability a genuine score beats an impostor score, ties counting half.
fn pairwise_auc(g: &[f64], im: &[f64]) -> f64 {
    let mut twice = 0u64;
    for a in g {
        for b in im {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * g.len() * im.len()) as f64
}

proptest! {
    #[test]
    fn roc_sweep_is_monotone_and_counts_strictly_greater(g in scores(), im in scores()) {
        let curve = eval::roc(&g, &im, Setting::Verification).unwrap();
        prop_assert_eq!((curve.points[0].fpr, curve.points[0].tpr), (1.0, 1.0));
        let last = curve.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (0.0, 0.0));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr <= w[0].fpr && w[1].tpr <= w[0].tpr);
        }
        for p in &curve.points {
            prop_assert_eq!(p.tp, g.iter().filter(|&&s| s > p.threshold).count());
            prop_assert_eq!(p.fp, im.iter().filter(|&&s| s > p.threshold).count());
        }
    }

    #[test]
    fn auc_equals_pairwise_ranking(g in scores(), im in scores()) {
        let a = eval::auc(&eval::roc(&g, &im, Setting::Impostor).unwrap());
        prop_assert!((a - pairwise_auc(&g, &im)).abs() < 1e-12);
        let swapped = eval::auc(&eval::roc(&im, &g, Setting::Impostor).unwrap());
        prop_assert!((a + swapped - 1.0).abs() < 1e-12);
        let e = eval::eer(&eval::roc(&g, &im, Setting::Impostor).unwrap());
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn eer_survives_the_csv_round_trip(g in scores(), im in scores()) {
        let curve = eval::roc(&g, &im, Setting::Confusion).unwrap();
        let mut buf = Vec::new();
        eval::write_roc_csv(&mut buf, &curve).unwrap();
        let back = eval::read_roc_csv(buf.as_slice(), g.len(), im.len()).unwrap();
        prop_assert_eq!(back.setting, Setting::Confusion);
        prop_assert_eq!(eval::eer(&back), eval::eer(&curve));
        prop_assert_eq!(eval::auc(&back), eval::auc(&curve));
    }

    #[test]
    fn running_max_never_decreases(
        enrolled in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..6),
        test in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..20),
    ) {
        let template = EnrollmentTemplate {
            user_id: "u".into(),
            embeddings: enrolled.into_iter().map(EmbeddingVector::new).collect(),
        };
        let test: Vec<EmbeddingVector> = test.into_iter().map(EmbeddingVector::new).collect();
        let Ok(trace) = eval::match_score(&template, &test) else { return Ok(()) };
        prop_assert_eq!(trace.per_window.len(), test.len());
        for (i, w) in trace.running_max.windows(2).enumerate() {
            prop_assert!(w[1] >= w[0]);
            prop_assert!(trace.running_max[i + 1] >= trace.per_window[i + 1]);
        }
        prop_assert!(trace.running_max.iter().all(|s| (-1.0 - 1e-9..=1.0 + 1e-9).contains(s)));
    }

    #[test]
    fn fusion_is_the_elementwise_mean(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
        let (l, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let fused = eval::binocular_fuse(&l, &r).unwrap();
        for ((f, a), b) in fused.iter().zip(&l).zip(&r) {
            prop_assert!((f - (a + b) / 2.0).abs() < 1e-15);
            prop_assert!(*f >= a.min(*b) && *f <= a.max(*b));
        }
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i:02}")).collect()
}

#[test]
fn resampled_sets_are_disjoint_and_cover_the_population() {
    let spec = SplitSpec {
        train: 6,
        enrolled: 3,
        impostors: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let p = eval::resample_protocol(&ids(10), spec, &mut rng).unwrap();
        let mut all: Vec<_> = p.train.iter().chain(&p.enrolled).chain(&p.impostors).cloned().collect();
        all.sort();
        assert_eq!(all, ids(10));
        assert_eq!((p.train.len(), p.enrolled.len(), p.impostors.len()), (6, 3, 1));
    }
    let err = eval::resample_protocol(&ids(9), spec, &mut rng).unwrap_err();
    assert!(err.to_string().contains("10"), "{err}");
}

#[test]
fn each_identity_lands_in_each_role_at_its_share() {
    let spec = SplitSpec {
        train: 6,
        enrolled: 3,
        impostors: 1,
    };
    let draws = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [[0usize; 3]; 10];
    for _ in 0..draws {
        let p = eval::resample_protocol(&ids(10), spec, &mut rng).unwrap();
        for (role, set) in [&p.train, &p.enrolled, &p.impostors].iter().enumerate() {
            for id in set.iter() {
                counts[id[1..].parse::<usize>().unwrap()][role] += 1;
            }
        }
    }
    for c in counts {
        for (role, share) in [0.6, 0.3, 0.1].iter().enumerate() {
            let f = c[role] as f64 / draws as f64;
            // several binomial standard deviations at 5000 draws
            assert!((f - share).abs() < 0.035, "role {role}: {f} vs {share}");
        }
    }
}

#[test]
fn identification_scores_route_by_setting() {
    let t = |u: &str, v: Vec<f32>| EnrollmentTemplate {
        user_id: u.into(),
        embeddings: vec![EmbeddingVector::new(v)],
    };
    let templates = vec![t("a", vec![1.0, 0.0]), t("b", vec![0.0, 1.0])];
    let stream = |u: &str, v: Vec<f32>| TestStream {
        user_id: u.into(),
        embeddings: vec![EmbeddingVector::new(v)],
    };
    let streams = vec![stream("a", vec![1.0, 0.1]), stream("z", vec![-1.0, 0.0])];
    let s = eval::identification_scores(&templates, &streams).unwrap();
    assert_eq!(s.genuine.len(), 1);
    assert_eq!(s.confusion.len(), 1);
    assert_eq!(s.impostor.len(), 2);
    assert!(s.impostor.iter().all(|&x| x <= 0.0));
    assert_eq!(s.decisions.len(), 4);
}
