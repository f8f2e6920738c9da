use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::phrase_classifier::ScoreMatrix;

fn set(source: AttributeSource, rows: &[Vec<f64>]) -> AttributeSet {
    let ids = (0..rows.len()).map(|i| format!("im{i}")).collect();
    let names = (0..rows[0].len()).map(|j| format!("f{j}")).collect();
    AttributeSet::new(source, ids, names, rows.concat()).unwrap()
}

#[test]
fn log_likelihood_matches_elementwise_log() {
    let probs = vec![0.5, 0.25, 0.9, 1e-3, 0.999, 0.1];
    let m = ScoreMatrix::new(vec!["a".into(), "b".into()], vec!["p".into(), "q".into(), "r".into()], probs.clone()).unwrap();
    let e = embed_attributes(&m, false).unwrap();
    for (v, p) in e.data.iter().zip(&probs) {
        assert_eq!(*v, p.ln());
    }
    assert_eq!(e.data[0], 0.5f64.ln());
    assert_eq!(embed_attributes(&m, true).unwrap().data, probs);
}

/// Three well-separated Gaussian blobs in 2-d.
fn blobs(seed: u64, per: usize) -> (AttributeSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.push(vec![ctr[0] + rng.random_range(-0.5..0.5), ctr[1] + rng.random_range(-0.5..0.5)]);
            y.push(c);
        }
    }
    (set(AttributeSource::Texture, &rows), y)
}

#[test]
fn separable_three_class_reaches_full_train_accuracy() {
    let (x, y) = blobs(1, 20);
    let m = train_linear(&x, &y, 3, &LinearConfig::default()).unwrap();
    assert_eq!(m.accuracy(&x, &y).unwrap(), 1.0);
}

#[test]
fn missing_class_is_an_error() {
    let (x, y) = blobs(1, 5);
    let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i] != 2).collect();
    let ys: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
    assert!(train_linear(&x.select_rows(&keep), &ys, 3, &LinearConfig::default()).is_err());
}

/// Source A tells class 0 from {1, 2}; source B tells class 1 from {0, 2}.
fn two_sources(seed: u64, per: usize) -> (AttributeSet, AttributeSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..3 {
        for _ in 0..per {
            let noise = |rng: &mut ChaCha8Rng| rng.random_range(-0.3..0.3);
            a.push(vec![if c == 0 { 1.0 } else { -1.0 } + noise(&mut rng), noise(&mut rng)]);
            b.push(vec![if c == 1 { 1.0 } else { -1.0 } + noise(&mut rng), noise(&mut rng)]);
            y.push(c);
        }
    }
    (set(AttributeSource::CubShape, &a), set(AttributeSource::Texture, &b), y)
}

#[test]
fn combined_attributes_beat_single_sources() {
    let (a, b, y) = two_sources(3, 30);
    let c = AttributeSet::combine(&[&a, &b]).unwrap();
    assert_eq!(c.cols(), 4);
    let cfg = LinearConfig::default();
    let acc = |x: &AttributeSet| train_linear(x, &y, 3, &cfg).unwrap().accuracy(x, &y).unwrap();
    let (aa, ab, ac) = (acc(&a), acc(&b), acc(&c));
    assert!(ac >= aa && ac >= ab, "{aa} {ab} {ac}");
    assert_eq!(ac, 1.0);
}

#[test]
fn l2_selection_and_k_sweep() {
    let (x, y) = blobs(5, 15);
    let (v, yv) = blobs(6, 5);
    let cands = [1e-3, 1e-1, 10.0];
    let (m, curve) = select_l2((&x, &y), (&v, &yv), 3, &cands, &LinearConfig::default()).unwrap();
    assert_eq!(curve.len(), 3);
    let best = curve.iter().map(|c| c.1).fold(0.0, f64::max);
    assert_eq!(curve.iter().find(|c| c.0 == m.l2).unwrap().1, best);
    let pts = accuracy_vs_k((&x, &y), (&v, &yv), (&v, &yv), 3, &[1, 2, 5], &cands, &LinearConfig::default()).unwrap();
    assert_eq!(pts.iter().map(|p| p.k).collect::<Vec<_>>(), vec![1, 2, 2]);
    assert!(pts[1].test_accuracy >= pts[0].test_accuracy);
}

fn hand_model(weights: Vec<f64>) -> LinearModel {
    let d = weights.len() / 2;
    LinearModel {
        feature_names: (0..d).map(|i| format!("phrase{i}")).collect(),
        n_classes: 2,
        mean: vec![0.0; d],
        scale: vec![1.0; d],
        weights,
        bias: vec![0.0; 2],
        l2: 0.0,
    }
}

#[test]
fn zero_weights_give_empty_cloud() {
    assert!(weight_cloud(&hand_model(vec![0.0; 8]), 1, 15).unwrap().is_empty());
}

#[test]
fn cloud_order_matches_sort_oracle() {
    // class 0 weights: 0.5, -2, 3, 0, -0.1, 0.5
    let w0 = [0.5, -2.0, 3.0, 0.0, -0.1, 0.5];
    let weights: Vec<f64> = w0.iter().flat_map(|&w| [w, -w]).collect();
    let m = hand_model(weights);
    let cloud = weight_cloud(&m, 0, 2).unwrap();
    let got: Vec<(&str, f64)> = cloud.iter().map(|e| (e.phrase.as_str(), e.weight)).collect();
    assert_eq!(got, vec![("phrase2", 3.0), ("phrase0", 0.5), ("phrase1", -2.0), ("phrase4", -0.1)]);
    assert!(weight_cloud(&m, 2, 2).is_err());
    assert!(cloud_tsv(&cloud).starts_with("class\tphrase\tweight\n"));
}

#[test]
fn bird_attribute_groups_have_expected_sizes() {
    let groups: [(&str, usize); 28] = [
        ("bill_shape", 9), ("wing_color", 15), ("upperparts_color", 15), ("underparts_color", 15),
        ("breast_pattern", 4), ("back_color", 15), ("tail_shape", 6), ("upper_tail_color", 15),
        ("head_pattern", 11), ("breast_color", 15), ("throat_color", 15), ("eye_color", 14),
        ("bill_length", 3), ("forehead_color", 15), ("under_tail_color", 15), ("nape_color", 15),
        ("belly_color", 15), ("wing_shape", 5), ("size", 5), ("shape", 14), ("back_pattern", 4),
        ("tail_pattern", 4), ("belly_pattern", 4), ("primary_color", 15), ("leg_color", 15),
        ("bill_color", 15), ("crown_color", 15), ("wing_pattern", 4),
    ];
    let mut counts = std::collections::BTreeMap::new();
    for (g, n) in groups {
        for k in 0..n {
            *counts.entry(AttributeSource::of_cub_attribute(&format!("has_{g}::v{k}"))).or_insert(0) += 1;
        }
    }
    assert_eq!(counts[&AttributeSource::CubShape], 42);
    assert_eq!(counts[&AttributeSource::CubPattern], 31);
    assert_eq!(counts[&AttributeSource::CubColor], 239);
}

#[test]
fn bird_dataset_loads_with_majority_vote() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    std::fs::create_dir_all(r.join("attributes")).unwrap();
    std::fs::write(r.join("images.txt"), "1 001.A/a.jpg\n2 002.B/b.jpg\n").unwrap();
    std::fs::write(r.join("image_class_labels.txt"), "1 1\n2 2\n").unwrap();
    std::fs::write(r.join("train_test_split.txt"), "1 1\n2 0\n").unwrap();
    std::fs::write(r.join("attributes.txt"), "1 has_bill_shape::curved\n2 has_wing_color::blue\n3 has_head_pattern::spotted\n").unwrap();
    std::fs::write(
        r.join("attributes").join("image_attribute_labels.txt"),
        "1 1 1 3 1.0\n1 1 1 3 1.0\n1 1 0 3 1.0\n1 2 1 3 1.0\n1 2 0 3 1.0\n2 3 1 4 2.0\n",
    )
    .unwrap();
    let d = CubDataset::load(r).unwrap();
    assert_eq!(d.labels, vec![0, 1]);
    assert_eq!(d.is_train, vec![true, false]);
    assert_eq!(d.num_classes(), 2);
    // 2 of 3 votes → present; 1 of 2 → absent; 1 of 1 → present
    assert_eq!(d.attributes, vec![1, 0, 0, 0, 0, 1]);
    let shape = d.attribute_set(AttributeSource::CubShape).unwrap();
    assert_eq!((shape.cols(), shape.data.clone()), (1, vec![1.0, 0.0]));
    assert!(d.attribute_set(AttributeSource::Texture).is_err());
}

#[test]
fn truncation_keeps_leading_columns() {
    let s = set(AttributeSource::Texture, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
    let t = s.truncate(2);
    assert_eq!((t.names.clone(), t.data.clone()), (vec!["f0".to_string(), "f1".to_string()], vec![1.0, 2.0, 4.0, 5.0]));
    assert!(s.to_tsv().starts_with("image_id\tf0\tf1\tf2\n"));
}
