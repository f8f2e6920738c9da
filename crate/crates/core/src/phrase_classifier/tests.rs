use super::*;
use crate::corpus::{build_vocabulary, Description, Split, TextureImage};
use crate::nn::gradcheck::check_params;

fn tiny_config() -> ClassifierConfig {
    ClassifierConfig {
        backbone: BackboneConfig::tiny(),
        layer_spec: vec![1, 2],
        hidden: 8,
        input: ImageInput::with_size(8),
        epochs: 2,
        batch_size: 4,
        optimizer: AdamConfig::with_lr(1e-3),
        hflip: false,
        seed: 1,
        patience: None,
        checkpoint_dir: None,
        freeze: Vec::new(),
    }
}

fn toy_corpus() -> (Corpus, Vocabulary) {
    let colors = [[200u8, 30, 30], [30, 30, 200], [30, 200, 30], [220, 220, 220]];
    let names = ["red", "blue", "green", "white"];
    let mut images = Vec::new();
    let mut descs = Vec::new();
    for (i, (c, n)) in colors.iter().zip(names).enumerate() {
        let id = format!("img{i}");
        images.push(TextureImage::in_memory(&id, "flat", Split::Train, image::RgbImage::from_pixel(8, 8, image::Rgb(*c))));
        descs.push(Description::parse(&id, &format!("{n}, flat")).unwrap());
    }
    let corpus = Corpus::new(images, descs).unwrap();
    let vocab = build_vocabulary(corpus.descriptions(), 1, 1).unwrap();
    (corpus, vocab)
}

#[test]
fn head_output_strictly_inside_unit_interval() {
    let (corpus, vocab) = toy_corpus();
    let model = PhraseClassifier::<f64>::new(tiny_config(), vocab.phrases().to_vec()).unwrap();
    let m = model.score_corpus(&corpus).unwrap();
    assert_eq!((m.rows(), m.cols()), (4, 5));
    assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn bce_head_gradients_match_finite_differences() {
    let (_, vocab) = toy_corpus();
    let mut config = tiny_config();
    config.hidden = 3;
    let phrases = vocab.phrases()[..4].to_vec();
    let model = PhraseClassifier::<f64>::new(config, phrases).unwrap();
    let mut store = model.store.clone();
    store.set_trainable("backbone", false);
    let x = Tensor::new(vec![3, 3, 8, 8], (0..576).map(|i| (i * 37 % 101) as f64 / 50.0 - 1.0).collect());
    let y = Tensor::new(vec![3, 4], vec![1., 0., 0., 1., 0., 1., 0., 0., 1., 1., 0., 1.]);
    let errs = check_params(&store, 1e-5, |tape, s| {
        let mut s = s.clone();
        let xv = tape.constant(x.clone());
        let logits = model.logits_train(tape, &mut s, xv);
        let p = tape.sigmoid(logits);
        tape.bce_probs(p, &y, 1e-7)
    });
    assert!(!errs.is_empty());
    for (name, e) in errs {
        assert!(e < 1e-4, "{name}: {e}");
    }
}

#[test]
fn frozen_model_has_constant_loss() {
    let (corpus, vocab) = toy_corpus();
    let mut config = tiny_config();
    config.freeze = vec![String::new()];
    config.epochs = 3;
    let out = train_classifier::<f64>(&corpus, &vocab, config).unwrap();
    let l0 = out.history[0].train_loss;
    for h in &out.history {
        assert!((h.train_loss - l0).abs() < 1e-12 * l0);
    }
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let (corpus, vocab) = toy_corpus();
    let out = train_classifier::<f32>(&corpus, &vocab, tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    out.model.save(&p).unwrap();
    let back = PhraseClassifier::<f32>::load(&p).unwrap();
    assert_eq!(back.score_corpus(&corpus).unwrap(), out.model.score_corpus(&corpus).unwrap());
}

#[test]
fn vocabulary_phrases_score_as_matrix_entries() {
    let (corpus, vocab) = toy_corpus();
    let model = PhraseClassifier::<f64>::new(tiny_config(), vocab.phrases().to_vec()).unwrap();
    let m = model.score_corpus(&corpus).unwrap();
    for r in 0..m.rows() {
        for (c, p) in vocab.phrases().iter().enumerate() {
            assert_eq!(score_phrase(&vocab, m.row(r), p).score, m.get(r, c));
        }
    }
}
