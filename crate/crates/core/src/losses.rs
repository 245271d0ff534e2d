//! Training objectives and their analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! the tensor it consumes: scores `s` (M x C) for the classification losses
//! and features `f` (M x H) for the clustering loss.

use ndarray::{Array1, Array2, Axis};

use crate::clustering::{AffinityMatrix, PrimitiveSet};
use crate::error::{Error, Result};
use crate::matching::{PseudoLabels, IGNORE};
use crate::scenegen::SceneLabels;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Values of the enabled loss terms and their summed upstream gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub l_cam: f64,
    pub l_us: f64,
    pub l_match: f64,
    pub grads_s: Array2<f64>,
    pub grads_f: Array2<f64>,
}

impl LossBundle {
    pub fn zeros(m: usize, c: usize, h: usize) -> Self {
        LossBundle {
            l_cam: 0.0,
            l_us: 0.0,
            l_match: 0.0,
            grads_s: Array2::zeros((m, c)),
            grads_f: Array2::zeros((m, h)),
        }
    }

    pub fn total(&self) -> f64 {
        self.l_cam + self.l_us + self.l_match
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean-pooled logits squashed by a logistic, binary cross-entropy per class.
pub fn loss_cam(s: &Array2<f64>, y: &SceneLabels) -> Result<(f64, Array2<f64>)> {
    let (m, c) = s.dim();
    if m == 0 {
        return Err(Error::InvalidArgument("CAM loss needs at least one point".into()));
    }
    if y.num_classes() != c {
        return Err(Error::Shape(format!("{c} score columns, {} labels", y.num_classes())));
    }
    let pooled = s.mean_axis(Axis(0)).expect("m >= 1");
    let mut loss = 0.0;
    let mut col_grad = Array1::zeros(c);
    for j in 0..c {
        let t = if y.contains(j) { 1.0 } else { 0.0 };
        let z = pooled[j];
        // -t ln σ(z) - (1-t) ln(1-σ(z)) = softplus(z) - t z
        loss += softplus(z) - t * z;
        col_grad[j] = (sigmoid(z) - t) / m as f64;
    }
    let grad = Array2::from_shape_fn((m, c), |(_, j)| col_grad[j]);
    Ok((loss, grad))
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Mean softmax cross-entropy over points whose label is not [`IGNORE`].
pub fn loss_dense(s: &Array2<f64>, labels: &[i32]) -> Result<(f64, Array2<f64>)> {
    let (m, c) = s.dim();
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} points", labels.len())));
    }
    let mut grad = Array2::zeros((m, c));
    let count = labels.iter().filter(|&&l| l != IGNORE).count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l < 0 || l as usize >= c {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {c} classes")));
        }
        let lp = log_softmax_row(s.row(i));
        loss -= lp[l as usize];
        let mut g = grad.row_mut(i);
        for j in 0..c {
            g[j] = lp[j].exp() / count as f64;
        }
        g[l as usize] -= 1.0 / count as f64;
    }
    Ok((loss / count as f64, grad))
}

/// Dense cross-entropy against pseudo-labels, which are constants here.
pub fn loss_match(s: &Array2<f64>, pseudo: &PseudoLabels) -> Result<(f64, Array2<f64>)> {
    loss_dense(s, &pseudo.0)
}

/// Cross-entropy of the softmax over primitives of `f̂ · c_k / τ` against
/// the K-means assignment, where `f̂` is the unit-normalized feature. The
/// gradient is taken through the normalization back to the raw `f`;
/// centroids are constants.
pub fn loss_us(f: &Array2<f64>, prims: &PrimitiveSet, aff: &AffinityMatrix, tau: f64) -> Result<(f64, Array2<f64>)> {
    let (m, h) = f.dim();
    let k = prims.len();
    if prims.centroids.ncols() != h {
        return Err(Error::Shape(format!("features have {h} columns, primitives {}", prims.centroids.ncols())));
    }
    if aff.assign.len() != m {
        return Err(Error::Shape(format!("{} assignments for {m} points", aff.assign.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut grad = Array2::zeros((m, h));
    if m == 0 {
        return Ok((0.0, grad));
    }
    let cents = &prims.centroids;
    let mut loss = 0.0;
    for i in 0..m {
        let target = aff.assign[i];
        if target >= k {
            return Err(Error::Shape(format!("primitive id {target} out of range for K={k}")));
        }
        let row = f.row(i);
        let norm = row.dot(&row).sqrt();
        if norm <= 1e-12 {
            // Zero feature: uniform softmax, no usable direction.
            loss += (k as f64).ln();
            continue;
        }
        let unit = &row / norm;
        let logits = cents.dot(&unit) / tau;
        let lp = log_softmax_row(logits.view());
        loss -= lp[target];
        let mut dlogits = lp.mapv(f64::exp);
        dlogits[target] -= 1.0;
        // d/d f̂ = Σ_k dlogits_k c_k / τ, then project out the radial part.
        let g_unit = cents.t().dot(&dlogits) / tau;
        let radial = g_unit.dot(&unit);
        let g = (&g_unit - &(&unit * radial)) / (norm * m as f64);
        grad.row_mut(i).assign(&g);
    }
    Ok((loss / m as f64, grad))
}

/// Sign of the descent direction `-∂L/∂s` as -1, 0 or +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrices {
    pub cam: Array2<i8>,
    pub dense: Array2<i8>,
}

fn sign_of_descent(g: &Array2<f64>) -> Array2<i8> {
    g.mapv(|v| {
        if v < 0.0 {
            1
        } else if v > 0.0 {
            -1
        } else {
            0
        }
    })
}

/// Direction in which each score is pushed by the CAM loss and by the dense
/// loss against `y_point`.
pub fn grad_sign_analysis(s: &Array2<f64>, y: &SceneLabels, y_point: &[i32]) -> Result<SignMatrices> {
    let (_, g_cam) = loss_cam(s, y)?;
    let (_, g_dense) = loss_dense(s, y_point)?;
    Ok(SignMatrices {
        cam: sign_of_descent(&g_cam),
        dense: sign_of_descent(&g_dense),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(bits: &[bool]) -> SceneLabels {
        SceneLabels { present: bits.to_vec() }
    }

    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut p = x.clone();
            p[idx] += h;
            let mut q = x.clone();
            q[idx] -= h;
            g[idx] = (f(&p) - f(&q)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt()).max(1e-8);
        diff / scale
    }

    #[test]
    fn cam_zero_scores() {
        let (l, _) = loss_cam(&Array2::zeros((5, 2)), &labels(&[true, false])).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cam_saturates_to_zero() {
        let s = array![[60.0, -60.0], [60.0, -60.0]];
        let (l, g) = loss_cam(&s, &labels(&[true, false])).unwrap();
        assert!(l < 1e-20);
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn cam_rejects_empty() {
        assert!(loss_cam(&Array2::zeros((0, 2)), &labels(&[true, false])).is_err());
    }

    #[test]
    fn cam_permutation_invariant() {
        let s = array![[1.0, -2.0, 0.5], [0.3, 0.1, -1.0], [2.0, 2.0, 2.0]];
        let p = array![[2.0, 2.0, 2.0], [1.0, -2.0, 0.5], [0.3, 0.1, -1.0]];
        let y = labels(&[true, false, true]);
        assert_eq!(loss_cam(&s, &y).unwrap().0, loss_cam(&p, &y).unwrap().0);
    }

    #[test]
    fn dense_uniform_logits() {
        let (l, _) = loss_dense(&Array2::zeros((3, 4)), &[0, 3, 2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dense_all_ignored() {
        let (l, g) = loss_dense(&array![[1.0, 2.0]], &[IGNORE]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn match_confident_correct_labels() {
        let s = array![[30.0, 0.0], [0.0, 30.0]];
        let (l, _) = loss_match(&s, &PseudoLabels(vec![0, 1])).unwrap();
        assert!(l < 1e-12);
        let (l, _) = loss_match(&s, &PseudoLabels(vec![IGNORE, IGNORE])).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn us_equal_inner_products_give_log_k() {
        let prims = PrimitiveSet {
            centroids: array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            epoch_computed: 0,
        };
        let f = array![[2.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let aff = AffinityMatrix { assign: vec![1, 3] };
        let (l, _) = loss_us(&f, &prims, &aff, 0.1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn us_vanishes_at_small_temperature() {
        let prims = PrimitiveSet {
            centroids: array![[1.0, 0.0], [0.0, 1.0]],
            epoch_computed: 0,
        };
        let f = array![[3.0, 0.0], [0.0, 0.5]];
        let aff = AffinityMatrix { assign: vec![0, 1] };
        let (l, _) = loss_us(&f, &prims, &aff, 0.01).unwrap();
        assert!(l < 1e-20);
        let (wrong, _) = loss_us(&f, &prims, &AffinityMatrix { assign: vec![1, 0] }, 0.01).unwrap();
        assert!(wrong > 50.0);
    }

    #[test]
    fn us_is_scale_invariant_in_features() {
        let prims = PrimitiveSet {
            centroids: array![[0.6, 0.8], [1.0, 0.0]],
            epoch_computed: 0,
        };
        let aff = AffinityMatrix { assign: vec![0] };
        let (a, _) = loss_us(&array![[1.0, 2.0]], &prims, &aff, 0.1).unwrap();
        let (b, _) = loss_us(&array![[5.0, 10.0]], &prims, &aff, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (m, c, h, k) = (5, 4, 3, 6);
            let s = Array2::from_shape_simple_fn((m, c), || rng.random_range(-2.0..2.0));
            let y = labels(&[true, false, true, rng.random_bool(0.5)]);
            let (_, g) = loss_cam(&s, &y).unwrap();
            let n = numeric_grad(&s, |x| loss_cam(x, &y).unwrap().0);
            assert!(rel_err(&g, &n) < 1e-6);

            let lab: Vec<i32> = (0..m).map(|_| rng.random_range(-1..c as i32)).collect();
            let (_, g) = loss_dense(&s, &lab).unwrap();
            let n = numeric_grad(&s, |x| loss_dense(x, &lab).unwrap().0);
            assert!(rel_err(&g, &n) < 1e-6);

            let prims = PrimitiveSet {
                centroids: crate::clustering::normalize_rows(&Array2::from_shape_simple_fn((k, h), || {
                    rng.random_range(-1.0..1.0)
                })),
                epoch_computed: 0,
            };
            let f = Array2::from_shape_simple_fn((m, h), || rng.random_range(-1.0..1.0));
            let aff = AffinityMatrix {
                assign: (0..m).map(|_| rng.random_range(0..k)).collect(),
            };
            let (_, g) = loss_us(&f, &prims, &aff, 0.5).unwrap();
            let n = numeric_grad(&f, |x| loss_us(x, &prims, &aff, 0.5).unwrap().0);
            assert!(rel_err(&g, &n) < 1e-6, "{}", rel_err(&g, &n));
        }
    }

    #[test]
    fn cam_pushes_every_present_class() {
        let s = array![[0.3, -0.2, 1.0], [-1.0, 0.4, 0.0]];
        let y = labels(&[true, true, false]);
        let signs = grad_sign_analysis(&s, &y, &[0, 1]).unwrap();
        for row in signs.cam.rows() {
            assert_eq!(row.to_vec(), vec![1, 1, -1]);
        }
        for (i, row) in signs.dense.rows().into_iter().enumerate() {
            assert_eq!(row.iter().filter(|&&v| v == 1).count(), 1);
            assert_eq!(row[i], 1);
        }
    }

    #[test]
    fn stationary_cam_column_has_zero_sign() {
        // σ(40) rounds to exactly 1.0 in f64.
        assert_eq!(sigmoid(40.0), 1.0);
        let s = array![[40.0, 0.0], [40.0, 0.0]];
        let signs = grad_sign_analysis(&s, &labels(&[true, false]), &[0, 0]).unwrap();
        assert_eq!(signs.cam.column(0).to_vec(), vec![0, 0]);
        assert_eq!(signs.cam.column(1).to_vec(), vec![-1, -1]);
    }

    #[test]
    fn bundle_total() {
        let mut b = LossBundle::zeros(2, 3, 4);
        b.l_cam = 1.0;
        b.l_us = 0.5;
        assert_eq!(b.total(), 1.5);
        assert_eq!(b.grads_f.dim(), (2, 4));
    }
}
