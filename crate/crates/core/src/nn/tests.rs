use super::gradcheck::{check_inputs, check_params};
use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn assert_small(errs: &[f64]) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "input {i}: relative error {e}");
    }
}

#[test]
fn pointwise_and_matmul_gradients() {
    let mut r = rng();
    let a = rand_t(&[3, 4], &mut r);
    let b = rand_t(&[4, 2], &mut r);
    let errs = check_inputs(&[a, b], H, |t, v| {
        let m = t.matmul(v[0], v[1]);
        let s = t.sigmoid(m);
        let th = t.tanh(m);
        let e = t.exp(t.scale(m, 0.3));
        let p = t.mul(s, th);
        let q = t.add(p, e);
        let q = t.sub(q, t.square(s));
        t.sum(t.relu(t.add_scalar(q, 0.1)))
    });
    assert_small(&errs);
}

#[test]
fn broadcast_gradients() {
    let mut r = rng();
    let a = rand_t(&[3, 4], &mut r);
    let row = rand_t(&[4], &mut r);
    let col = rand_t(&[3, 1], &mut r);
    let errs = check_inputs(&[a, row, col], H, |t, v| {
        let x = t.add_row(v[0], v[1]);
        let x = t.mul_row(x, v[1]);
        let x = t.mul_col(x, v[2]);
        let s = t.sum_cols(x);
        t.sum(t.square(s))
    });
    assert_small(&errs);
}

#[test]
fn layout_gradients() {
    let mut r = rng();
    let a = rand_t(&[3, 4], &mut r);
    let b = rand_t(&[3, 2], &mut r);
    let errs = check_inputs(&[a, b], H, |t, v| {
        let c = t.concat_cols(&[v[0], v[1]]);
        let s = t.slice_cols(c, 1, 4);
        let g = t.select_rows(s, vec![2, 0, 2]);
        let rr = t.concat_rows(&[g, s]);
        let m = t.segment_mean(rr, vec![0..2, 2..2, 2..6]);
        let rep = t.repeat_rows(m, 2);
        let resh = t.reshape(rep, vec![4, 6]);
        t.sum(t.square(t.mean_rows(resh)))
    });
    assert_small(&errs);
}

#[test]
fn softmax_and_ln_gradients() {
    let mut r = rng();
    let a = rand_t(&[2, 5], &mut r);
    let w = rand_t(&[2, 5], &mut r);
    let errs = check_inputs(&[a, w], H, |t, v| {
        let s = t.softmax_rows(v[0]);
        let l = t.ln(t.add_scalar(s, 0.5));
        t.sum(t.mul(l, v[1]))
    });
    assert_small(&errs);
}

#[test]
fn batch_norm_gradients() {
    let mut r = rng();
    let x = rand_t(&[5, 3], &mut r);
    let g = rand_t(&[3], &mut r);
    let b = rand_t(&[3], &mut r);
    let w = rand_t(&[5, 3], &mut r);
    let errs = check_inputs(&[x, g, b, w], H, |t, v| {
        let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5);
        t.sum(t.mul(t.square(y), v[3]))
    });
    assert_small(&errs);
}

#[test]
fn conv_gradients_both_paddings() {
    for padding in [Padding::Zero, Padding::Circular] {
        for stride in [1, 2] {
            let mut r = rng();
            let x = rand_t(&[2, 2, 5, 5], &mut r);
            let w = rand_t(&[3, 2, 3, 3], &mut r);
            let b = rand_t(&[3], &mut r);
            let errs = check_inputs(&[x, w, b], H, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], ConvGeometry { stride, pad: 1, padding });
                let grid = t.to_grid(y);
                let pooled = t.spatial_mean(y);
                t.add(t.sum(t.square(grid)), t.sum(t.tanh(pooled)))
            });
            assert_small(&errs);
        }
    }
}

#[test]
fn attention_pooling_gradients() {
    let mut r = rng();
    let alpha = rand_t(&[2, 3], &mut r);
    let feats = rand_t(&[6, 4], &mut r);
    let errs = check_inputs(&[alpha, feats], H, |t, v| {
        let a = t.softmax_rows(v[0]);
        let o = t.weighted_rows(a, v[1]);
        t.sum(t.square(o))
    });
    assert_small(&errs);
}

#[test]
fn loss_gradients() {
    let mut r = rng();
    let logits = rand_t(&[3, 4], &mut r);
    let labels = Tensor::new(vec![3, 4], vec![1., 0., 0., 1., 0., 0., 1., 1., 1., 0., 0., 0.]);
    let errs = check_inputs(&[logits.clone()], H, |t, v| t.bce_with_logits(v[0], &labels));
    assert_small(&errs);
    let errs = check_inputs(&[logits.clone()], H, |t, v| {
        let p = t.sigmoid(v[0]);
        t.bce_probs(p, &labels, 1e-7)
    });
    assert_small(&errs);
    let errs = check_inputs(&[logits], H, |t, v| t.cross_entropy(v[0], &[Some(1), None, Some(3)]));
    assert_small(&errs);
}

#[test]
fn bce_from_logits_matches_clamped_probability_form() {
    let logits = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 4.0, -3.0]);
    let labels = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    let t = Tape::<f64>::new();
    let x = t.constant(logits);
    let a = t.bce_with_logits(x, &labels);
    let b = t.bce_probs(t.sigmoid(x), &labels, 1e-7);
    assert!((t.value(a).data()[0] - t.value(b).data()[0]).abs() < 1e-9);
}

#[test]
fn layer_param_gradients() {
    let mut r = rng();
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", "default", 3, 4, &mut r);
    let cell = LstmCell::new(&mut store, "lstm", "default", 4, 2, &mut r);
    let x = rand_t(&[2, 3], &mut r);
    let errs = check_params(&store, H, |t, s| {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, s, xv);
        let h0 = t.constant(Tensor::zeros(&[2, 2]));
        let (h1, c1) = cell.step(t, s, y, h0, h0);
        let (h2, _) = cell.step(t, s, y, h1, c1);
        t.sum(t.square(h2))
    });
    for (name, e) in errs {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn batch_norm_layer_eval_uses_running_stats() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", "default", 2);
    let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
    for _ in 0..200 {
        let t = Tape::new();
        let xv = t.constant(x.clone());
        bn.forward(&t, &mut store, xv, true);
    }
    let rm = store.value(bn.running_mean).data().to_vec();
    assert!((rm[0] - 2.5).abs() < 1e-6 && (rm[1] - 25.0).abs() < 1e-6);
    let t = Tape::new();
    let xv = t.constant(x.clone());
    let train = t.value(bn.forward(&t, &mut store.clone(), xv, true));
    let eval = t.value(bn.forward(&t, &mut store, xv, false));
    for (a, b) in train.data().iter().zip(eval.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", "default", Tensor::row(vec![3.0, -2.0]));
    let mut opt = Adam::new(AdamConfig::with_lr(0.1));
    for _ in 0..500 {
        let t = Tape::new();
        let w = t.param(&store, id);
        let loss = t.sum(t.square(t.add_scalar(w, -1.0)));
        let g = t.backward(loss).param_grads();
        opt.step(&mut store, &g);
    }
    for v in store.value(id).data() {
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
}

#[test]
fn frozen_params_receive_no_update() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", "default", Tensor::row(vec![1.0, 2.0]));
    store.freeze_all();
    let t = Tape::new();
    let w = t.param(&store, id);
    let loss = t.sum(t.square(w));
    let g = t.backward(loss).param_grads();
    assert!(g.is_empty());
    let mut opt = Adam::new(AdamConfig::with_lr(0.1));
    opt.step(&mut store, &g);
    assert_eq!(store.value(id).data(), &[1.0, 2.0]);
}
