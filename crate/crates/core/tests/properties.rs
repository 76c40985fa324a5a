use proptest::prelude::*;

use tabcf::baselines::{wachter_cf, WachterConfig};
use tabcf::classifier::BlackBoxClassifier;
use tabcf::data::{Dataset, Feature, FeatureSchema, FittedPreprocessor};
use tabcf::diffusion::denoiser::categorical_posterior;
use tabcf::metrics::{one_validity, sparsity, LofIndex};
use tabcf::nn::{Activation, Dense, DenseNet, Mat};
use tabcf::rules::{apply_rules, simplify_rules, Atom, DecisionTree, Node, Op, Rule};
use tabcf::synthetic::{two_blobs, BlobConfig};
use tabcf::train::TrainingCurve;

fn schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        Feature::numerical("a"),
        Feature::numerical("b"),
        Feature::categorical("c", ["x", "y", "z"]),
    ])
    .unwrap()
}

fn row() -> impl Strategy<Value = Vec<f64>> {
    (-5.0..5.0f64, -5.0..5.0f64, 0..3usize).prop_map(|(a, b, c)| vec![a, b, c as f64])
}

fn atom() -> impl Strategy<Value = Atom> {
    let op = prop_oneof![Just(Op::Gt), Just(Op::Ge), Just(Op::Lt), Just(Op::Le)];
    (0..3usize, op, -4.0..4.0f64).prop_map(|(f, op, t)| {
        let (feature, threshold) = match f {
            0 => ("a", t),
            1 => ("b", t),
            _ => ("c", ((t + 4.0) / 3.0).floor()),
        };
        Atom { feature: feature.into(), op, threshold }
    })
}

fn rule_set() -> impl Strategy<Value = Vec<Rule>> {
    prop::collection::vec(
        prop::collection::vec(atom(), 0..4).prop_map(|atoms| Rule { atoms, path: vec![], support: 0, purity: 1.0 }),
        0..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trips(rows in prop::collection::vec(row(), 20..60)) {
        let s = schema();
        let labels: Vec<u8> = (0..rows.len()).map(|i| (i % 2) as u8).collect();
        let mut rows = rows;
        // every category must be seen during fitting
        for (i, r) in rows.iter_mut().take(3).enumerate() {
            r[2] = i as f64;
        }
        let d = Dataset::new(s, Mat::from_rows(&rows).unwrap(), labels, None).unwrap();
        let pp = FittedPreprocessor::fit(&d, 1000).unwrap();
        let back = pp.decode(&pp.encode(&d.rows).unwrap()).unwrap();
        for (x, y) in d.rows.as_slice().iter().zip(back.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn sparsity_is_a_symmetric_count(a in row(), b in row()) {
        let s = schema();
        let ab = sparsity(&a, &b, &s, 1e-3).unwrap();
        prop_assert_eq!(ab, sparsity(&b, &a, &s, 1e-3).unwrap());
        prop_assert_eq!(sparsity(&a, &a, &s, 1e-3).unwrap(), 0);
        prop_assert!(ab <= s.len());
    }

    #[test]
    fn simplify_is_idempotent_and_preserves_matches(rules in rule_set(), rows in prop::collection::vec(row(), 1..80)) {
        let s = schema();
        let simple = simplify_rules(&rules, &s).unwrap();
        prop_assert_eq!(&simplify_rules(&simple, &s).unwrap(), &simple);
        let m = Mat::from_rows(&rows).unwrap();
        let labels = vec![0u8; rows.len()];
        let (before, _) = apply_rules(&rules, &s, &m, &labels).unwrap();
        let (after, _) = apply_rules(&simple, &s, &m, &labels).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn apply_matches_any_rule(rules in rule_set(), rows in prop::collection::vec(row(), 1..40)) {
        let s = schema();
        let m = Mat::from_rows(&rows).unwrap();
        let labels: Vec<u8> = (0..rows.len()).map(|i| (i % 2) as u8).collect();
        let (matched, metrics) = apply_rules(&rules, &s, &m, &labels).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let any = rules.iter().any(|rule| rule.matches(&s, r).unwrap());
            prop_assert_eq!(matched[i], any);
        }
        prop_assert_eq!(metrics.attacks + metrics.benign, rows.len());
    }

    #[test]
    fn tree_leaves_recount_training_rows(rows in prop::collection::vec(row(), 2..60), seed in 0u64..1000) {
        let s = schema();
        let labels: Vec<u8> = rows.iter().enumerate().map(|(i, r)| u8::from((r[0] + r[2] + (seed + i as u64) as f64 * 0.37).sin() > 0.0)).collect();
        let m = Mat::from_rows(&rows).unwrap();
        let tree = DecisionTree::fit(&m, &labels, &s).unwrap();
        let mut recount = vec![[0usize; 2]; tree.nodes.len()];
        for (r, &l) in rows.iter().zip(&labels) {
            recount[tree.leaf_of(r)][l as usize] += 1;
        }
        for leaf in tree.leaves() {
            prop_assert_eq!(tree.nodes[leaf].counts(), recount[leaf]);
            let is_leaf = matches!(tree.nodes[leaf], Node::Leaf { .. });
            prop_assert!(is_leaf);
        }
        // unlimited depth fits every row unless identical rows disagree
        if tree.impure_leaves == 0 {
            for (r, &l) in rows.iter().zip(&labels) {
                prop_assert_eq!(tree.predict(r), l);
            }
        }
    }

    #[test]
    fn categorical_posterior_is_a_distribution(
        k in 2usize..6,
        c in 0usize..6,
        raw in prop::collection::vec(0.01..1.0f64, 6),
        t in 1usize..100,
        back in 1usize..100,
    ) {
        let c = c % k;
        let mut x_t = vec![0.0; k];
        x_t[c] = 1.0;
        let z: f64 = raw[..k].iter().sum();
        let x0: Vec<f64> = raw[..k].iter().map(|v| v / z).collect();
        let schedule = tabcf::diffusion::NoiseSchedule::linear_scaled(100).unwrap();
        let s = t.saturating_sub(back);
        let p = categorical_posterior(&x_t, &x0, schedule.alpha_bar(t), schedule.alpha_bar(s));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn lof_is_positive_and_finite(pts in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 6..40), q in (-5.0..5.0f64, -5.0..5.0f64)) {
        let rows: Vec<Vec<f64>> = pts.iter().map(|&(a, b)| vec![a, b]).collect();
        let index = LofIndex::new(Mat::from_rows(&rows).unwrap(), 5).unwrap();
        let lof = index.lof(&[q.0, q.1]);
        prop_assert!(lof.is_finite() && lof > 0.0);
    }
}

/// A single sigmoid unit on the encoded `sep` column with a gentle slope, so
/// the output never saturates.
fn logistic_on_sep(width: usize) -> BlackBoxClassifier {
    let mut w = Mat::zeros(width, 1);
    w.set(0, 0, 0.8);
    BlackBoxClassifier {
        net: DenseNet::from_layers(vec![Dense { weight: w, bias: vec![0.0], activation: Activation::Sigmoid }]).unwrap(),
        schema_hash: String::new(),
        curve: TrainingCurve::default(),
        degenerate: false,
    }
}

#[test]
fn wachter_reaches_every_query_on_a_separable_logistic_model() {
    let d = two_blobs(&BlobConfig { rows: 1000, ..Default::default() }, 5).unwrap();
    let pp = FittedPreprocessor::fit(&d, 500).unwrap();
    let bb = logistic_on_sep(pp.encoded_width());
    let queries: Vec<usize> = d.indices_with_label(1).into_iter().take(100).collect();
    let probs = bb.predict_proba(&pp.encode(&d.rows.select_rows(&queries)).unwrap()).unwrap();
    let attack_side: Vec<usize> = queries.into_iter().zip(probs).filter(|(_, p)| *p >= 0.5).map(|(i, _)| i).collect();
    assert!(attack_side.len() > 80);
    let batches: Vec<_> = attack_side
        .iter()
        .map(|&i| wachter_cf(&bb, &pp, i, d.rows.row(i), 0, &WachterConfig::default()).unwrap())
        .collect();
    assert_eq!(one_validity(&batches).unwrap(), 1.0);
    // only the separating feature needs to move
    let s = pp.schema();
    for b in &batches {
        let changed = sparsity(&b.query, b.candidates.row(0), s, 1e-3).unwrap();
        assert!(changed <= 2, "query {} changed {changed} features", b.query_id);
    }
}
