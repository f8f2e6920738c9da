use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{build_vocabulary, Description, TextureImage};
use crate::nn::gradcheck::check_inputs;

#[test]
fn margin_exactly_met_gives_zero() {
    let a = [0.0, 0.0];
    let (lp, _) = triplet_losses(&a, &a, &[5.0, 0.0], &[1.0, 0.0]);
    assert_eq!(lp, 0.0);
}

#[test]
fn negative_colocated_with_positive_gives_margin() {
    let a = [0.3f64, -1.0, 2.0];
    let p = [1.0, 1.0, 1.0];
    let (lp, li) = triplet_losses(&a, &p, &a, &p);
    assert!((lp - 1.0).abs() < 1e-12 && (li - 1.0).abs() < 1e-12);
}

#[test]
fn batched_loss_matches_scalar_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = 6;
    let dim = 256;
    let mk = |rng: &mut ChaCha8Rng| Tensor::<f64>::randn(&[rows, dim], 0.05, rng);
    let (a, p, an, pn) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let mut expected = 0.0;
    for r in 0..rows {
        let (lp, li) = triplet_losses(a.row_slice(r), p.row_slice(r), an.row_slice(r), pn.row_slice(r));
        expected += lp + li;
    }
    expected /= rows as f64;
    let tape = Tape::new();
    let vs: Vec<Var> = [&a, &p, &an, &pn].iter().map(|t| tape.constant((*t).clone())).collect();
    let l = triplet_loss(&tape, vs[0], vs[1], vs[2], vs[3]);
    assert!((tape.value(l).data()[0] - expected).abs() < 1e-10);
}

#[test]
fn triplet_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // small spread keeps every hinge active, away from its kink
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[3, 8], 0.1, &mut rng)).collect();
    let errs = check_inputs(&inputs, 1e-6, |t, v| triplet_loss(t, v[0], v[1], v[2], v[3]));
    for e in errs {
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn losses_are_nonnegative_and_zero_when_margins_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let v: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let (lp, li) = triplet_losses(&v[0], &v[1], &v[2], &v[3]);
        assert!(lp >= 0.0 && li >= 0.0);
    }
    let (lp, li) = triplet_losses(&[0.0], &[0.0], &[2.0], &[2.0]);
    assert_eq!((lp, li), (0.0, 0.0));
}

#[test]
fn sampling_skips_when_no_negative_exists() {
    let set = PairSet::new(3, 2, [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (t, skipped) = sample_triplets(&set.pairs(), &set, &mut rng);
    assert!(t.is_empty());
    assert_eq!(skipped, 6);
}

#[test]
fn sampling_forces_the_only_valid_negative() {
    let set = PairSet::new(2, 2, [(0, 0), (1, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (t, skipped) = sample_triplets(&[(0, 0)], &set, &mut rng);
        assert_eq!(skipped, 0);
        assert_eq!(
            t[0],
            Triplet {
                anchor: 0,
                positive: 0,
                negative_image: 1,
                negative_text: 1
            }
        );
    }
}

#[test]
fn sampling_is_seeded_and_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<(usize, usize)> = (0..40)
        .flat_map(|i| {
            let k = rng.random_range(1..4);
            (0..k).map(move |j| (i, (i * 7 + j * 3) % 15)).collect::<Vec<_>>()
        })
        .collect();
    let set = PairSet::new(40, 15, pairs);
    let run = |seed| sample_triplets(&set.pairs(), &set, &mut ChaCha8Rng::seed_from_u64(seed));
    let (a, _) = run(3);
    let (b, _) = run(3);
    assert_eq!(a, b);
    assert!(a.iter().all(|t| t.is_valid(&set)));
}

fn store(points: &[(&str, Vec<f64>)]) -> EmbeddingStore {
    EmbeddingStore::new(
        Modality::Image,
        points.iter().map(|p| p.0.to_string()).collect(),
        points[0].1.len(),
        points.iter().flat_map(|p| p.1.clone()).collect(),
    )
    .unwrap()
}

#[test]
fn retrieval_sorts_by_distance_and_is_translation_invariant() {
    let pts = vec![
        ("a", vec![0.0f64, 0.0]),
        ("b", vec![1.0, 1.0]),
        ("c", vec![-0.5, 0.2]),
        ("d", vec![3.0, -1.0]),
        ("e", vec![0.1, 0.1]),
    ];
    let q = [0.2f64, 0.0];
    let mut oracle: Vec<(f64, &str)> = pts.iter().map(|(id, v)| ((v[0] - q[0]).powi(2) + (v[1] - q[1]).powi(2), *id)).collect();
    oracle.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let got = retrieve(&q, &store(&pts)).unwrap();
    assert_eq!(got, oracle.iter().map(|o| o.1.to_string()).collect::<Vec<_>>());
    let shifted: Vec<(&str, Vec<f64>)> = pts.iter().map(|(id, v)| (*id, vec![v[0] + 2.5, v[1] - 7.0])).collect();
    assert_eq!(retrieve(&[q[0] + 2.5, q[1] - 7.0], &store(&shifted)).unwrap(), got);
    assert_eq!(retrieve(&[3.0, -1.0], &store(&pts)).unwrap()[0], "d");
}

#[test]
fn empty_universe_is_an_error() {
    let empty = EmbeddingStore::new(Modality::Text, vec![], 2, vec![]).unwrap();
    assert!(retrieve(&[0.0, 0.0], &empty).is_err());
}

#[test]
fn embedding_store_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let s = store(&[("x", vec![1.5, -2.0, 0.0]), ("y/z", vec![3.0, 4.0, 5.0])]);
    s.save(&path).unwrap();
    assert_eq!(EmbeddingStore::load(&path, Modality::Image).unwrap(), s);
}

fn tiny_config() -> MetricConfig {
    MetricConfig {
        backbone: BackboneConfig::tiny(),
        layer_spec: vec![1, 2],
        input: ImageInput::with_size(8),
        joint_dim: 8,
        word_dim: 6,
        lstm_hidden: 4,
        epochs: 2,
        batch_size: 4,
        optimizer: AdamConfig::with_lr(1e-3),
        hflip: false,
        seed: 3,
        ..MetricConfig::default()
    }
}

fn toy() -> (Corpus, Vocabulary) {
    let colors = [[200u8, 30, 30], [30, 30, 200], [30, 200, 30], [220, 220, 220]];
    let names = ["red", "blue", "green", "white"];
    let mut images = Vec::new();
    let mut descs = Vec::new();
    for (i, (c, n)) in colors.iter().zip(names).enumerate() {
        let id = format!("img{i}");
        images.push(TextureImage::in_memory(&id, "flat", Split::Train, image::RgbImage::from_pixel(8, 8, image::Rgb(*c))));
        descs.push(Description::parse(&id, &format!("{n} color, flat")).unwrap());
    }
    let corpus = Corpus::new(images, descs).unwrap();
    let vocab = build_vocabulary(corpus.descriptions(), 1, 1).unwrap();
    (corpus, vocab)
}

#[test]
fn embeddings_have_joint_dimension() {
    let (corpus, vocab) = toy();
    for kind in [TextEncoderKind::MeanPool, TextEncoderKind::Recurrent] {
        let config = MetricConfig { text_encoder: kind, ..tiny_config() };
        let model = MetricModel::<f64>::new(config, vocab.words().to_vec(), None).unwrap();
        let e = model.embed_corpus(&corpus).unwrap();
        assert_eq!((e.len(), e.dim), (4, 8));
        let t = model.embed_texts(vocab.phrases()).unwrap();
        assert_eq!(t.dim, 8);
    }
}

#[test]
fn contextual_without_encoder_is_a_config_error() {
    let config = MetricConfig { text_encoder: TextEncoderKind::Contextual, ..tiny_config() };
    assert!(matches!(MetricModel::<f64>::new(config, vec![], None), Err(Error::Config(_))));
}

#[test]
fn training_runs_in_both_modes_and_round_trips() {
    let (corpus, vocab) = toy();
    for mode in [TextMode::Phrase, TextMode::Description] {
        let out = train_metric::<f64>(&corpus, &vocab, MetricConfig { mode, ..tiny_config() }, None).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|h| h.train_loss.is_finite()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        out.model.save(&path).unwrap();
        let back = MetricModel::<f64>::load(&path, None).unwrap();
        assert_eq!(back.store.digest(), out.model.store.digest());
        let a = out.model.embed_texts(vocab.phrases()).unwrap();
        let b = back.embed_texts(vocab.phrases()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn early_stopping_triggers_when_frozen() {
    let (corpus, vocab) = toy();
    let config = MetricConfig {
        epochs: 10,
        patience: Some(2),
        freeze: vec![String::new()],
        ..tiny_config()
    };
    let out = train_metric::<f64>(&corpus, &vocab, config, None).unwrap();
    assert_eq!(out.stop, StopReason::EarlyStopped { epoch: 2 });
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn scorer_prefers_nearer_images() {
    let (corpus, vocab) = toy();
    let model = MetricModel::<f64>::new(tiny_config(), vocab.words().to_vec(), None).unwrap();
    let images = model.embed_corpus(&corpus).unwrap();
    let q = model.embed_text("red color").unwrap();
    let best = retrieve(&q, &images).unwrap()[0].clone();
    let scorer = MetricScorer { model: &model, images, name: "metric".into() };
    let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
    let s = scorer.score("red color", &ids).unwrap();
    let argmax = (0..4).max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap()).unwrap();
    assert_eq!(ids[argmax], best);
    assert!(scorer.score("red", &["nope".to_string()]).is_err());
}
