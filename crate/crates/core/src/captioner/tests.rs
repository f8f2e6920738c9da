use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{Description, TextureImage};

/// First-order Markov toy model with a fixed random transition table over
/// `<start>`, `<end>`, `a`, `b`.
struct Toy {
    table: Vec<Vec<f64>>,
}

impl Toy {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..4)
            .map(|_| {
                let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|v| (v / z).ln()).collect()
            })
            .collect();
        Toy { table }
    }
}

impl StepModel for Toy {
    type State = ();
    fn vocab_size(&self) -> usize {
        4
    }
    fn initial(&self) {}
    fn step(&self, _: &(), token: usize) -> (Vec<f64>, ()) {
        (self.table[token].clone(), ())
    }
}

fn toy_search(beam: usize) -> SearchConfig {
    SearchConfig {
        beam,
        max_len: 3,
        start: 0,
        end: 1,
        banned: vec![0],
    }
}

#[test]
fn beam_five_matches_exhaustive_enumeration() {
    for seed in 0..200 {
        let toy = Toy::random(seed);
        let all = enumerate_sequences(&toy, &toy_search(5));
        assert_eq!(all.len(), 7);
        let best = all.iter().max_by(|a, b| a.log_prob.total_cmp(&b.log_prob)).unwrap();
        let got = beam_search(&toy, &toy_search(5));
        assert_eq!(got.tokens, best.tokens, "seed {seed}");
        assert!((got.log_prob - best.log_prob).abs() < 1e-12);
    }
}

#[test]
fn beam_one_equals_greedy() {
    for seed in 0..200 {
        let toy = Toy::random(seed);
        for max_len in 1..6 {
            let cfg = SearchConfig { max_len, ..toy_search(1) };
            assert_eq!(beam_search(&toy, &cfg), greedy_search(&toy, &cfg));
        }
    }
}

#[test]
fn beam_scores_at_least_greedy_on_toy() {
    for seed in 0..200 {
        let toy = Toy::random(seed);
        let b = beam_search(&toy, &toy_search(5));
        let g = greedy_search(&toy, &toy_search(5));
        assert!(b.log_prob >= g.log_prob - 1e-12);
    }
}

#[test]
fn unfinished_hypothesis_is_flagged() {
    let toy = Toy::random(1);
    let cfg = SearchConfig { banned: vec![0, 1], ..toy_search(3) };
    let h = beam_search(&toy, &cfg);
    assert!(!h.finished);
    assert!(!greedy_search(&toy, &cfg).finished);
}

fn corpus() -> Corpus {
    let colors = [[200u8, 30, 30], [30, 30, 200], [30, 200, 30]];
    let descs = ["red dots, white background", "blue stripes", "green and white squares"];
    let mut images = Vec::new();
    let mut ds = Vec::new();
    for (i, (c, d)) in colors.iter().zip(descs).enumerate() {
        let id = format!("img{i}");
        images.push(TextureImage::in_memory(&id, "flat", Split::Train, image::RgbImage::from_pixel(8, 8, image::Rgb(*c))));
        ds.push(Description::parse(&id, d).unwrap());
    }
    Corpus::new(images, ds).unwrap()
}

fn tiny() -> CaptionerConfig {
    CaptionerConfig {
        backbone: BackboneConfig::tiny(),
        input: ImageInput::with_size(8),
        embed_dim: 6,
        hidden: 8,
        attention_dim: 5,
        word_min_count: 1,
        epochs: 5,
        batch_size: 3,
        hflip: false,
        beam: 2,
        max_len: 8,
        seed: 2,
        encoder_lr: 1e-3,
        decoder_lr: 4e-3,
        ..CaptionerConfig::default()
    }
}

#[test]
fn vocabulary_keeps_commas_and_specials() {
    let c = corpus();
    let v = CaptionVocab::build(c.descriptions(), 1);
    assert_eq!(&v.words()[..4], &[PAD, START, END, UNK]);
    assert!(v.words().contains(&",".to_string()));
    let ids = v.encode(&c.descriptions()[0]);
    assert_eq!(v.decode(&ids), "red dots, white background");
    assert_eq!(v.id("never-seen"), CaptionVocab::UNK);
}

#[test]
fn untrained_model_is_near_uniform() {
    let c = corpus();
    let v = CaptionVocab::build(c.descriptions(), 1);
    let n = v.len() as f64;
    let model = Captioner::<f64>::new(tiny(), v).unwrap();
    let loss = teacher_forced_loss(&model, &c, &[0, 1, 2]).unwrap();
    let ppl = loss.exp();
    assert!((ppl - n).abs() / n < 0.05, "perplexity {ppl} vs vocabulary {n}");
}

#[test]
fn attention_is_normalized_each_step() {
    let c = corpus();
    let model = Captioner::<f64>::new(tiny(), CaptionVocab::build(c.descriptions(), 1)).unwrap();
    let cache = ImageCache::<f64>::new(&c, &model.config.input).unwrap();
    let enc = model.encode_image(cache.get(0));
    let stepper = model.stepper(&enc);
    let mut state = stepper.initial();
    let mut tok = CaptionVocab::START;
    for _ in 0..4 {
        let (lp, s) = stepper.step(&state, tok);
        let alpha = &s.as_ref().unwrap().alpha;
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        tok = 4;
        state = s;
    }
}

#[test]
fn loss_decreases_and_decoding_is_deterministic() {
    let c = corpus();
    let out = train_captioner::<f64>(&c, CaptionerConfig { patience: None, ..tiny() }).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let a = out.model.caption_corpus(&c, 3, 8).unwrap();
    let b = out.model.caption_corpus(&c, 3, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(captions_tsv(&a).lines().count(), 3);
}

#[test]
fn checkpoint_round_trip_reproduces_captions() {
    let c = corpus();
    let out = train_captioner::<f64>(&c, CaptionerConfig { epochs: 1, ..tiny() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cap.ckpt");
    out.model.save(&path).unwrap();
    let back = Captioner::<f64>::load(&path).unwrap();
    assert_eq!(back.caption_corpus(&c, 2, 8).unwrap(), out.model.caption_corpus(&c, 2, 8).unwrap());
}

#[test]
fn caption_gradients_match_finite_differences() {
    use crate::nn::gradcheck::check_params;
    let c = corpus();
    let model = Captioner::<f64>::new(tiny(), CaptionVocab::build(c.descriptions(), 1)).unwrap();
    let mut store = model.store.clone();
    store.set_trainable("backbone", false);
    let cache = ImageCache::<f64>::new(&c, &model.config.input).unwrap();
    let x = stack(&[cache.get(0).clone(), cache.get(1).clone()]);
    let caps = vec![model.vocab.encode(&c.descriptions()[0]), model.vocab.encode(&c.descriptions()[1])];
    let errs = check_params(&store, 1e-5, |tape, s| {
        let xv = tape.constant(x.clone());
        model.loss(tape, s, xv, &caps)
    });
    for (name, e) in errs {
        assert!(e < 1e-4, "{name}: {e}");
    }
}
