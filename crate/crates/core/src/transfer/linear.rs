use serde::{Deserialize, Serialize};

use super::AttributeSet;
use crate::nn::{Adam, AdamConfig, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    /// L2 penalty `λ/2 · ‖W‖²` (the bias is not penalized).
    pub l2: f64,
    /// Full-batch optimizer steps.
    pub iterations: usize,
    pub lr: f64,
    /// Standardize each feature with training mean and deviation.
    pub standardize: bool,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            l2: 1e-3,
            iterations: 500,
            lr: 0.05,
            standardize: true,
        }
    }
}

/// Multinomial logistic regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_names: Vec<String>,
    pub n_classes: usize,
    /// Per-feature shift and scale applied before the weights.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[features, classes]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub l2: f64,
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn weight(&self, feature: usize, class: usize) -> f64 {
        self.weights[feature * self.n_classes + class]
    }

    fn standardized(&self, x: &AttributeSet) -> Vec<f64> {
        let d = self.n_features();
        x.data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) / self.scale[i % d])
            .collect()
    }

    /// Class logits `[rows, classes]`.
    pub fn logits(&self, x: &AttributeSet) -> Result<Vec<f64>> {
        if x.cols() != self.n_features() {
            return Err(Error::Shape(format!("model has {} features, input {}", self.n_features(), x.cols())));
        }
        let xs = Tensor::new(vec![x.rows(), x.cols()], self.standardized(x));
        let w = Tensor::new(vec![self.n_features(), self.n_classes], self.weights.clone());
        let mut z = xs.matmul(&w).into_data();
        for row in z.chunks_mut(self.n_classes) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Arg-max class per row (ties to the smaller class).
    pub fn predict(&self, x: &AttributeSet) -> Result<Vec<usize>> {
        Ok(self
            .logits(x)?
            .chunks(self.n_classes)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &AttributeSet, y: &[usize]) -> Result<f64> {
        if y.len() != x.rows() {
            return Err(Error::Shape(format!("{} labels for {} rows", y.len(), x.rows())));
        }
        if y.is_empty() {
            return Err(Error::Empty("no rows to evaluate".into()));
        }
        let p = self.predict(x)?;
        Ok(p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
    }
}

fn softmax_rows(z: &mut [f64], c: usize) {
    for row in z.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Fits on `(x, y)` with full-batch Adam on mean cross-entropy plus L2.
pub fn train_linear(x: &AttributeSet, y: &[usize], n_classes: usize, config: &LinearConfig) -> Result<LinearModel> {
    let (n, d) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", y.len())));
    }
    if n == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Config(format!("label {bad} outside {n_classes} classes")));
    }
    let mut seen = vec![false; n_classes];
    y.iter().for_each(|&c| seen[c] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("class {missing} has no training example")));
    }
    let (mean, scale) = if config.standardize {
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let scale = var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        (mean, scale)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let mut model = LinearModel {
        feature_names: x.names.clone(),
        n_classes,
        mean,
        scale,
        weights: vec![0.0; d * n_classes],
        bias: vec![0.0; n_classes],
        l2: config.l2,
    };
    let xs = Tensor::new(vec![n, d], model.standardized(x));
    let xt = xs.transpose();
    let mut store = ParamStore::<f64>::new();
    let wid = store.add("weights", "linear", Tensor::zeros(&[d, n_classes]));
    let bid = store.add("bias", "linear", Tensor::zeros(&[n_classes]));
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    for _ in 0..config.iterations {
        let w = store.value(wid);
        let b = store.value(bid);
        let mut p = xs.matmul(w).into_data();
        for row in p.chunks_mut(n_classes) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        softmax_rows(&mut p, n_classes);
        for (r, &c) in y.iter().enumerate() {
            p[r * n_classes + c] -= 1.0;
        }
        p.iter_mut().for_each(|v| *v /= n as f64);
        let g = Tensor::new(vec![n, n_classes], p);
        let mut gw = xt.matmul(&g);
        for (gv, wv) in gw.data_mut().iter_mut().zip(w.data()) {
            *gv += config.l2 * wv;
        }
        let mut gb = vec![0.0; n_classes];
        for row in g.data().chunks(n_classes) {
            for (s, v) in gb.iter_mut().zip(row) {
                *s += v;
            }
        }
        opt.step(&mut store, &[(wid, gw), (bid, Tensor::new(vec![n_classes], gb))]);
    }
    model.weights = store.value(wid).data().to_vec();
    model.bias = store.value(bid).data().to_vec();
    Ok(model)
}

/// Fits one model per L2 strength and keeps the best validation accuracy
/// (ties to the earlier candidate). Returns the model and every
/// `(l2, validation accuracy)`.
pub fn select_l2(
    train: (&AttributeSet, &[usize]),
    val: (&AttributeSet, &[usize]),
    n_classes: usize,
    candidates: &[f64],
    base: &LinearConfig,
) -> Result<(LinearModel, Vec<(f64, f64)>)> {
    if candidates.is_empty() {
        return Err(Error::Config("no L2 candidates".into()));
    }
    let mut best: Option<(LinearModel, f64)> = None;
    let mut curve = Vec::with_capacity(candidates.len());
    for &l2 in candidates {
        let m = train_linear(train.0, train.1, n_classes, &LinearConfig { l2, ..base.clone() })?;
        let acc = m.accuracy(val.0, val.1)?;
        curve.push((l2, acc));
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((m, acc));
        }
    }
    Ok((best.expect("nonempty").0, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub k: usize,
    pub l2: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Test accuracy using only the first `k` features, for each `k`.
pub fn accuracy_vs_k(
    train: (&AttributeSet, &[usize]),
    val: (&AttributeSet, &[usize]),
    test: (&AttributeSet, &[usize]),
    n_classes: usize,
    ks: &[usize],
    candidates: &[f64],
    base: &LinearConfig,
) -> Result<Vec<AccuracyPoint>> {
    ks.iter()
        .map(|&k| {
            let (tr, va, te) = (train.0.truncate(k), val.0.truncate(k), test.0.truncate(k));
            let (model, curve) = select_l2((&tr, train.1), (&va, val.1), n_classes, candidates, base)?;
            let val_accuracy = curve
                .iter()
                .find(|(l, _)| *l == model.l2)
                .map(|c| c.1)
                .unwrap_or(f64::NAN);
            Ok(AccuracyPoint {
                k: tr.cols(),
                l2: model.l2,
                val_accuracy,
                test_accuracy: model.accuracy(&te, test.1)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudEntry {
    pub class: usize,
    pub phrase: String,
    pub weight: f64,
}

/// The `top_k` most positive weights of `class` (largest first) followed by
/// its `top_k` most negative weights (most negative first). Zero weights are
/// left out; ties go to the earlier feature.
pub fn weight_cloud(model: &LinearModel, class: usize, top_k: usize) -> Result<Vec<CloudEntry>> {
    if class >= model.n_classes {
        return Err(Error::UnknownId(format!("class {class} (model has {})", model.n_classes)));
    }
    let w: Vec<(usize, f64)> = (0..model.n_features()).map(|f| (f, model.weight(f, class))).collect();
    let mut pos: Vec<(usize, f64)> = w.iter().copied().filter(|x| x.1 > 0.0).collect();
    let mut neg: Vec<(usize, f64)> = w.iter().copied().filter(|x| x.1 < 0.0).collect();
    pos.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    neg.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(pos
        .into_iter()
        .take(top_k)
        .chain(neg.into_iter().take(top_k))
        .map(|(f, weight)| CloudEntry {
            class,
            phrase: model.feature_names[f].clone(),
            weight,
        })
        .collect())
}

/// `class \t phrase \t weight` records.
pub fn cloud_tsv(entries: &[CloudEntry]) -> String {
    let mut s = String::from("class\tphrase\tweight\n");
    for e in entries {
        s.push_str(&format!("{}\t{}\t{:.6}\n", e.class, e.phrase, e.weight));
    }
    s
}
