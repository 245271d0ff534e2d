//! Two-layer feature encoder, bias-free linear classifier, their exact
//! reverse-mode gradients and a decoupled-weight-decay Adam optimizer.
//!
//! Forward map: `f = act(X W1 + b1) W2 + b2`, `s = f W`.

use std::fs;
use std::path::Path;

use ndarray::{Array, Array1, Array2, Axis, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Bypasses the nonlinearity; the encoder becomes affine.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// H x C weights.
    pub w: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub classifier: Classifier,
}

/// Gradients with the same layout as [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub clf: Array2<f64>,
}

fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a))
}

impl EncoderParams {
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        EncoderParams {
            w1: glorot(input_dim, hidden_dim, rng),
            b1: Array1::zeros(hidden_dim),
            w2: glorot(hidden_dim, feature_dim, rng),
            b2: Array1::zeros(feature_dim),
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn check(&self) -> Result<()> {
        let (d, h1) = self.w1.dim();
        let (h1b, h) = self.w2.dim();
        if self.b1.len() != h1 || h1b != h1 || self.b2.len() != h {
            return Err(Error::Shape(format!(
                "inconsistent encoder: w1 {d}x{h1}, b1 {}, w2 {h1b}x{h}, b2 {}",
                self.b1.len(),
                self.b2.len()
            )));
        }
        Ok(())
    }

    /// Hidden activations and output features.
    pub fn forward_trace(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check()?;
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, encoder expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut hidden = x.dot(&self.w1) + &self.b1;
        if self.activation == Activation::Tanh {
            hidden.mapv_inplace(f64::tanh);
        }
        let f = hidden.dot(&self.w2) + &self.b2;
        Ok((hidden, f))
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_trace(x).map(|(_, f)| f)
    }
}

impl Classifier {
    pub fn init<R: Rng>(feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Classifier {
            w: glorot(feature_dim, num_classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.ncols()
    }

    /// Raw class logits `s = f W`.
    pub fn classify(&self, f: &Array2<f64>) -> Result<Array2<f64>> {
        if f.ncols() != self.w.nrows() {
            return Err(Error::Shape(format!(
                "features have {} columns, classifier expects {}",
                f.ncols(),
                self.w.nrows()
            )));
        }
        Ok(f.dot(&self.w))
    }
}

impl Model {
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Model {
            encoder: EncoderParams::init(input_dim, hidden_dim, feature_dim, rng),
            classifier: Classifier::init(feature_dim, num_classes, rng),
        }
    }

    /// Features and logits for a descriptor matrix.
    pub fn predict(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let f = self.encoder.forward(x)?;
        let s = self.classifier.classify(&f)?;
        Ok((f, s))
    }

    /// Exact gradients of a loss whose upstream derivatives w.r.t. the
    /// logits and the features are `grad_s` and `grad_f`. Contributions from
    /// both paths are summed.
    pub fn backward(&self, x: &Array2<f64>, grad_s: &Array2<f64>, grad_f: &Array2<f64>) -> Result<ModelGrads> {
        let (hidden, f) = self.encoder.forward_trace(x)?;
        self.backward_with(x, &hidden, &f, grad_s, grad_f)
    }

    pub(crate) fn backward_with(
        &self,
        x: &Array2<f64>,
        hidden: &Array2<f64>,
        f: &Array2<f64>,
        grad_s: &Array2<f64>,
        grad_f: &Array2<f64>,
    ) -> Result<ModelGrads> {
        let m = x.nrows();
        if grad_s.dim() != (m, self.classifier.num_classes()) || grad_f.dim() != (m, self.encoder.feature_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradients {:?}/{:?} do not match {m} points",
                grad_s.dim(),
                grad_f.dim()
            )));
        }
        let enc = &self.encoder;
        let clf = f.t().dot(grad_s);
        let gf = grad_f + &grad_s.dot(&self.classifier.w.t());
        let w2 = hidden.t().dot(&gf);
        let b2 = gf.sum_axis(Axis(0));
        let mut gh = gf.dot(&enc.w2.t());
        if enc.activation == Activation::Tanh {
            Zip::from(&mut gh).and(hidden).for_each(|g, &h| *g *= 1.0 - h * h);
        }
        let w1 = x.t().dot(&gh);
        let b1 = gh.sum_axis(Axis(0));
        Ok(ModelGrads { w1, b1, w2, b2, clf })
    }
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        let e = &model.encoder;
        ModelGrads {
            w1: Array2::zeros(e.w1.dim()),
            b1: Array1::zeros(e.b1.len()),
            w2: Array2::zeros(e.w2.dim()),
            b2: Array1::zeros(e.b2.len()),
            clf: Array2::zeros(model.classifier.w.dim()),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
        self.clf += &other.clf;
    }

    pub fn is_zero(&self) -> bool {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.clf.iter())
            .all(|&v| v == 0.0)
    }
}

/// AdamW state: moment buffers mirror the model's parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: ModelGrads,
    v: ModelGrads,
}

impl AdamState {
    pub fn new(model: &Model, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ModelGrads::zeros_like(model),
            v: ModelGrads::zeros_like(model),
        }
    }

    /// One decoupled-weight-decay Adam update of every parameter tensor.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads) {
        self.step += 1;
        let t = self.step as i32;
        let hp = Hyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            wd: self.weight_decay,
            bc1: 1.0 - self.beta1.powi(t),
            bc2: 1.0 - self.beta2.powi(t),
        };
        let e = &mut model.encoder;
        update(&mut e.w1, &mut self.m.w1, &mut self.v.w1, &grads.w1, &hp);
        update(&mut e.b1, &mut self.m.b1, &mut self.v.b1, &grads.b1, &hp);
        update(&mut e.w2, &mut self.m.w2, &mut self.v.w2, &grads.w2, &hp);
        update(&mut e.b2, &mut self.m.b2, &mut self.v.b2, &grads.b2, &hp);
        update(&mut model.classifier.w, &mut self.m.clf, &mut self.v.clf, &grads.clf, &hp);
    }
}

struct Hyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
}

fn update<D: Dimension>(p: &mut Array<f64, D>, m: &mut Array<f64, D>, v: &mut Array<f64, D>, g: &Array<f64, D>, hp: &Hyper) {
    Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / hp.bc1;
        let v_hat = *v / hp.bc2;
        *p -= hp.lr * hp.wd * *p;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    });
}

// Checkpoints: u32 LE header length, JSON header, then the declared tensors
// as raw LE f64 in header order.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub activation: Activation,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    /// K x H primitive centroids, when the model was trained with them.
    pub primitives: Option<Array2<f64>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let e = &self.model.encoder;
        let mut tensors: Vec<(&str, Vec<usize>, Vec<f64>)> = vec![
            ("w1", e.w1.shape().to_vec(), e.w1.iter().copied().collect()),
            ("b1", e.b1.shape().to_vec(), e.b1.to_vec()),
            ("w2", e.w2.shape().to_vec(), e.w2.iter().copied().collect()),
            ("b2", e.b2.shape().to_vec(), e.b2.to_vec()),
            (
                "classifier",
                self.model.classifier.w.shape().to_vec(),
                self.model.classifier.w.iter().copied().collect(),
            ),
        ];
        if let Some(p) = &self.primitives {
            tensors.push(("primitives", p.shape().to_vec(), p.iter().copied().collect()));
        }
        let header = CheckpointHeader {
            activation: e.activation,
            step: self.step,
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.to_string(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
        if bytes.len() < 4 {
            return Err("truncated checkpoint".into());
        }
        let hlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let body = bytes.get(4..4 + hlen).ok_or("truncated checkpoint header")?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        let mut off = 4 + hlen;
        let mut take = |entry: &TensorEntry| -> std::result::Result<Vec<f64>, String> {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(off..off + n * 8)
                .ok_or_else(|| format!("truncated tensor {}", entry.name))?;
            off += n * 8;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut mats = std::collections::BTreeMap::new();
        for entry in &header.tensors {
            let data = take(entry)?;
            mats.insert(entry.name.clone(), (entry.shape.clone(), data));
        }
        if off != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - off));
        }
        let mut get2 = |name: &str| -> std::result::Result<Array2<f64>, String> {
            let (shape, data) = mats.remove(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if shape.len() != 2 {
                return Err(format!("tensor {name} must be 2-d"));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| e.to_string())
        };
        let w1 = get2("w1")?;
        let w2 = get2("w2")?;
        let classifier = get2("classifier")?;
        let primitives = get2("primitives").ok();
        let mut get1 = |name: &str| -> std::result::Result<Array1<f64>, String> {
            let (shape, data) = mats.remove(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if shape.len() != 1 {
                return Err(format!("tensor {name} must be 1-d"));
            }
            Ok(Array1::from(data))
        };
        let b1 = get1("b1")?;
        let b2 = get1("b2")?;
        let encoder = EncoderParams {
            w1,
            b1,
            w2,
            b2,
            activation: header.activation,
        };
        encoder.check().map_err(|e| e.to_string())?;
        if classifier.nrows() != encoder.feature_dim() {
            return Err("classifier rows do not match feature dim".into());
        }
        if let Some(p) = &primitives {
            if p.ncols() != encoder.feature_dim() {
                return Err("primitive columns do not match feature dim".into());
            }
        }
        Ok(Checkpoint {
            model: Model {
                encoder,
                classifier: Classifier { w: classifier },
            },
            step: header.step,
            primitives,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
        Checkpoint::decode(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let enc = EncoderParams {
            w1: Array2::zeros((4, 3)),
            b1: Array1::zeros(3),
            w2: Array2::zeros((3, 2)),
            b2: Array1::zeros(2),
            activation: Activation::Tanh,
        };
        let x = rand_mat(5, 4, &mut rng());
        assert!(enc.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_path_returns_bias() {
        let enc = EncoderParams {
            w1: Array2::zeros((4, 3)),
            b1: Array1::zeros(3),
            w2: Array2::eye(3),
            b2: array![0.5, -1.0, 2.0],
            activation: Activation::Tanh,
        };
        let f = enc.forward(&rand_mat(6, 4, &mut rng())).unwrap();
        for row in f.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let enc = EncoderParams::init(4, 3, 2, &mut rng());
        assert!(matches!(enc.forward(&Array2::zeros((2, 5))), Err(Error::Shape(_))));
    }

    #[test]
    fn classify_selects_rows_for_one_hot_features() {
        let mut r = rng();
        let clf = Classifier { w: rand_mat(3, 4, &mut r) };
        let f = Array2::eye(3);
        let s = clf.classify(&f).unwrap();
        assert_eq!(s, clf.w);
        let zero = Classifier { w: Array2::zeros((3, 4)) };
        assert!(zero.classify(&rand_mat(5, 3, &mut r)).unwrap().iter().all(|&v| v == 0.0));
        assert!(clf.classify(&Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let model = Model::init(4, 5, 3, 2, &mut r);
        let x = rand_mat(6, 4, &mut r);
        let g = model.backward(&x, &Array2::zeros((6, 2)), &Array2::zeros((6, 3))).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn linear_mode_matches_closed_form() {
        let mut r = rng();
        let mut model = Model::init(4, 5, 3, 2, &mut r);
        model.encoder.activation = Activation::Identity;
        let x = rand_mat(6, 4, &mut r);
        let up = rand_mat(6, 3, &mut r);
        let g = model.backward(&x, &Array2::zeros((6, 2)), &up).unwrap();
        // d/dW1 of sum(up * (X W1 + b1) W2) = X^T up W2^T
        let expected = x.t().dot(&up.dot(&model.encoder.w2.t()));
        for (a, b) in g.w1.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let hidden = x.dot(&model.encoder.w1) + &model.encoder.b1;
        let expected_w2 = hidden.t().dot(&up);
        for (a, b) in g.w2.iter().zip(expected_w2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut r = rng();
        let mut model = Model::init(3, 4, 2, 2, &mut r);
        let before = model.clone();
        let mut adam = AdamState::new(&model, 0.01, 0.0);
        adam.step(&mut model, &ModelGrads::zeros_like(&before));
        assert_eq!(model, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_descends_against_constant_gradient() {
        let mut r = rng();
        let mut model = Model::init(3, 4, 2, 2, &mut r);
        let before = model.clone();
        let mut grads = ModelGrads::zeros_like(&model);
        grads.w1.fill(0.3);
        grads.clf.fill(-0.2);
        let mut adam = AdamState::new(&model, 0.01, 0.0);
        for _ in 0..50 {
            adam.step(&mut model, &grads);
        }
        assert_eq!(adam.step, 50);
        assert!(model.encoder.w1.iter().zip(before.encoder.w1.iter()).all(|(a, b)| a < b));
        assert!(model.classifier.w.iter().zip(before.classifier.w.iter()).all(|(a, b)| a > b));
        assert_eq!(model.encoder.w2, before.encoder.w2);
    }

    #[test]
    fn adam_weight_decay_shrinks() {
        let mut r = rng();
        let mut model = Model::init(3, 4, 2, 2, &mut r);
        let before = model.clone();
        let mut adam = AdamState::new(&model, 0.1, 0.5);
        adam.step(&mut model, &ModelGrads::zeros_like(&before));
        for (a, b) in model.encoder.w1.iter().zip(before.encoder.w1.iter()) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng();
        let ckpt = Checkpoint {
            model: Model::init(13, 8, 4, 6, &mut r),
            step: 17,
            primitives: Some(rand_mat(5, 4, &mut r)),
        };
        let back = Checkpoint::decode(&ckpt.encode()).unwrap();
        assert_eq!(back, ckpt);
        let bytes = ckpt.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
