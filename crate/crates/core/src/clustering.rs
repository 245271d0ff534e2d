//! Dataset-wide K-means over supervoxel features ("primitives") and the
//! per-point nearest-primitive affinity.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

/// K unit-norm feature centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveSet {
    pub centroids: Array2<f64>,
    pub epoch_computed: usize,
}

impl PrimitiveSet {
    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.nrows() == 0
    }
}

/// Point-to-primitive assignment for one scene (row-wise one-hot matrix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityMatrix {
    pub assign: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    /// Inertia after every assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().expect("at least one assignment")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and squared distance per row.
fn assign_rows(points: ArrayView2<f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    let cents: Vec<&[f64]> = centroids.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.par_iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (k, c) in cents.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .collect()
}

fn kmeans_plus_plus<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i).as_slice().unwrap(), points.row(chosen[0]).as_slice().unwrap()))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut pick = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if pick < d {
                    idx = i;
                    break;
                }
                pick -= d;
            }
            idx
        } else {
            // All remaining points coincide with a chosen center.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = points.row(next).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i).as_slice().unwrap(), &c));
        }
    }
    let mut out = Array2::zeros((k, points.ncols()));
    for (r, &i) in chosen.iter().enumerate() {
        out.row_mut(r).assign(&points.row(i));
    }
    out
}

/// Independent k-means++ starts per `kmeans` call; the lowest final inertia
/// wins (earliest start on ties).
pub const KMEANS_RESTARTS: usize = 10;

/// Lloyd's algorithm with k-means++ seeding, restarted `KMEANS_RESTARTS`
/// times from one seeded stream. Each start stops at an assignment fixpoint
/// or after `max_iter` centroid updates. Empty clusters are re-seeded at the
/// point farthest from its current centroid. The returned trace belongs to
/// the winning start.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= K <= rows, got K={k}, rows={n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("k-means input has non-finite values".into()));
    }
    let points = points.as_standard_layout();
    let points = points.view();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(points, k, max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia() < b.inertia()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

fn lloyd(points: ArrayView2<f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = points.nrows();
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut assigned = assign_rows(points, &centroids);
    let mut trace = vec![assigned.iter().map(|a| a.1).sum::<f64>()];

    for _ in 0..max_iter {
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assigned.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &points.row(i);
        }
        let mut dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = sums.row_mut(c);
                row /= counts[c] as f64;
                centroids.row_mut(c).assign(&row);
            } else {
                let far = (0..n).fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                centroids.row_mut(c).assign(&points.row(far));
                dist[far] = 0.0;
            }
        }
        let next = assign_rows(points, &centroids);
        trace.push(next.iter().map(|a| a.1).sum());
        let converged = next.iter().zip(&assigned).all(|(a, b)| a.0 == b.0);
        assigned = next;
        if converged {
            break;
        }
    }
    KMeansResult {
        centroids,
        labels: assigned.into_iter().map(|a| a.0).collect(),
        inertia_trace: trace,
    }
}

/// Scales every row to unit L2 norm; zero rows stay zero.
pub fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 1e-12 {
            row /= n;
        }
    }
    out
}

/// Clusters encoder outputs of the supervoxel mean descriptors into `k`
/// primitives. With `warmup`, clustering runs on `[encoded | handcrafted]`
/// and only the encoded slice of each centroid is kept.
pub fn compute_primitives(
    sv_features: &Array2<f64>,
    encoder: &EncoderParams,
    k: usize,
    warmup: bool,
    seed: u64,
    max_iter: usize,
) -> Result<PrimitiveSet> {
    if sv_features.nrows() < k {
        return Err(Error::InvalidArgument(format!(
            "{} supervoxels cannot form {k} primitives",
            sv_features.nrows()
        )));
    }
    let encoded = normalize_rows(&encoder.forward(sv_features)?);
    let h = encoded.ncols();
    let result = if warmup {
        let joint = concatenate(Axis(1), &[encoded.view(), sv_features.view()]).expect("row counts agree");
        kmeans(joint.view(), k, seed, max_iter)?
    } else {
        kmeans(encoded.view(), k, seed, max_iter)?
    };
    let centroids = normalize_rows(&result.centroids.slice(s![.., ..h]).to_owned());
    Ok(PrimitiveSet {
        centroids,
        epoch_computed: 0,
    })
}

/// Nearest primitive for every point by Euclidean distance between the
/// L2-normalized feature and the centroid; ties go to the lowest index.
pub fn assign_affinity(f: &Array2<f64>, prims: &PrimitiveSet) -> Result<AffinityMatrix> {
    if f.ncols() != prims.centroids.ncols() {
        return Err(Error::Shape(format!(
            "features have {} columns, primitives {}",
            f.ncols(),
            prims.centroids.ncols()
        )));
    }
    let unit = normalize_rows(f);
    let cents = prims.centroids.as_standard_layout();
    let assign = unit
        .rows()
        .into_iter()
        .map(|row| {
            let row = row.to_vec();
            let mut best = (0usize, f64::INFINITY);
            for (k, c) in cents.rows().into_iter().enumerate() {
                let d = sq_dist(&row, c.as_slice().unwrap());
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect();
    Ok(AffinityMatrix { assign })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn k_points_k_clusters_zero_inertia() {
        let pts = array![[0.0, 1.0], [3.0, 4.0], [-2.0, 5.0], [7.0, 7.0]];
        let r = kmeans(pts.view(), 4, 3, 50).unwrap();
        assert_eq!(r.inertia(), 0.0);
        let mut got: Vec<Vec<f64>> = r.centroids.rows().into_iter().map(|c| c.to_vec()).collect();
        let mut want: Vec<Vec<f64>> = pts.rows().into_iter().map(|c| c.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn one_dimensional_two_clusters() {
        let pts = array![[0.0], [1.0], [9.0], [10.0]];
        for seed in 0..10 {
            let r = kmeans(pts.view(), 2, seed, 50).unwrap();
            let mut c: Vec<f64> = r.centroids.iter().copied().collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![0.5, 9.5]);
            assert_eq!(r.inertia(), 1.0);
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let pts = Array2::from_shape_simple_fn((60, 3), || rng.random_range(-1.0..1.0));
            let r = kmeans(pts.view(), 7, seed, 100).unwrap();
            for w in r.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", r.inertia_trace);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = Array2::from_shape_simple_fn((40, 4), || rng.random_range(-1.0..1.0));
        assert_eq!(kmeans(pts.view(), 5, 9, 30).unwrap(), kmeans(pts.view(), 5, 9, 30).unwrap());
    }

    #[test]
    fn rejects_too_few_rows() {
        assert!(kmeans(Array2::<f64>::zeros((2, 2)).view(), 3, 0, 10).is_err());
    }

    #[test]
    fn duplicate_points_still_seed() {
        let pts = array![[1.0], [1.0], [1.0], [2.0]];
        let r = kmeans(pts.view(), 3, 0, 10).unwrap();
        assert_eq!(r.inertia(), 0.0);
    }

    #[test]
    fn affinity_picks_matching_centroid() {
        let prims = PrimitiveSet {
            centroids: array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
            epoch_computed: 0,
        };
        let f = array![[0.0, 3.0], [-2.0, 0.0], [5.0, 0.0]];
        assert_eq!(assign_affinity(&f, &prims).unwrap().assign, vec![1, 2, 0]);
    }

    #[test]
    fn affinity_tie_goes_to_lower_index() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut c = Array2::zeros((6, 2));
        c.row_mut(0).assign(&array![-1.0, 0.0]);
        c.row_mut(1).assign(&array![0.0, -1.0]);
        c.row_mut(2).assign(&array![1.0, 0.0]);
        c.row_mut(3).assign(&array![-s, -s]);
        c.row_mut(4).assign(&array![-s, s]);
        c.row_mut(5).assign(&array![0.0, 1.0]);
        let prims = PrimitiveSet {
            centroids: c,
            epoch_computed: 0,
        };
        // (1,1)/sqrt2 is equidistant to centroids 2 and 5.
        let f = array![[1.0, 1.0]];
        assert_eq!(assign_affinity(&f, &prims).unwrap().assign, vec![2]);
    }

    #[test]
    fn primitives_are_unit_norm_and_keep_feature_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = EncoderParams::init(13, 8, 5, &mut rng);
        let sv = Array2::from_shape_simple_fn((50, 13), || rng.random::<f64>());
        for warmup in [false, true] {
            let p = compute_primitives(&sv, &enc, 6, warmup, 4, 50).unwrap();
            assert_eq!(p.centroids.dim(), (6, 5));
            for row in p.centroids.rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        assert!(compute_primitives(&sv.slice(s![..3, ..]).to_owned(), &enc, 6, false, 0, 10).is_err());
    }
}
