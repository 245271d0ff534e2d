//! Handcrafted per-point descriptors and supervoxel over-segmentation.
//!
//! Descriptor layout (13 columns):
//!
//! | cols  | content                                                  |
//! |-------|----------------------------------------------------------|
//! | 0..3  | unit normal                                              |
//! | 3     | height z                                                 |
//! | 4..7  | RGB                                                      |
//! | 7..10 | linearity, planarity, scattering of the k-NN covariance  |
//! | 10..13| share of neighbor normals dominated by the x, y, z axis  |
//!
//! Columns are min-max scaled to `[0, 1]` over a whole dataset.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scenegen::PointCloud;

pub const NUM_HAND_FEATURES: usize = 13;
pub const DEFAULT_K_NN: usize = 12;
pub const DEFAULT_VOXEL_SIZE: f64 = 0.25;
pub const DEFAULT_ANGLE_THRESH_DEG: f64 = 30.0;

/// Per-point descriptor matrix (M x 13).
#[derive(Debug, Clone, PartialEq)]
pub struct HandFeatures(pub Array2<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct SupervoxelPartition {
    pub sv_of_point: Vec<usize>,
    /// S x D mean descriptors.
    pub sv_features: Array2<f64>,
    pub sv_sizes: Vec<usize>,
}

impl SupervoxelPartition {
    pub fn len(&self) -> usize {
        self.sv_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sv_sizes.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct LocalShape {
    normal: [f64; 3],
    /// Covariance eigenvalues, descending.
    eigenvalues: [f64; 3],
}

fn to_f64(p: &[f32; 3]) -> [f64; 3] {
    p.map(f64::from)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Indices of the `k` nearest points to each point (including itself),
/// ties broken by index.
fn knn(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    points
        .par_iter()
        .map(|p| {
            let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(j, q)| (sq_dist(p, q), j)).collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
                d.truncate(k);
            }
            d.sort_unstable_by(cmp);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Flips `n` so that z >= 0, falling back to x then y when z vanishes.
pub fn canonicalize_normal(n: [f64; 3]) -> [f64; 3] {
    const EPS: f64 = 1e-9;
    let flip = if n[2].abs() > EPS {
        n[2] < 0.0
    } else if n[0].abs() > EPS {
        n[0] < 0.0
    } else {
        n[1] < 0.0
    };
    if flip {
        n.map(|v| -v)
    } else {
        n
    }
}

fn local_shape(points: &[[f64; 3]], neighbors: &[usize]) -> LocalShape {
    let k = neighbors.len() as f64;
    let mut mean = [0.0; 3];
    for &j in neighbors {
        for d in 0..3 {
            mean[d] += points[j][d];
        }
    }
    mean.iter_mut().for_each(|v| *v /= k);
    let mut cov = Matrix3::<f64>::zeros();
    for &j in neighbors {
        let v = Vector3::new(points[j][0] - mean[0], points[j][1] - mean[1], points[j][2] - mean[2]);
        cov += v * v.transpose();
    }
    cov /= k;
    if cov.trace() <= 1e-30 {
        return LocalShape {
            normal: [0.0, 0.0, 1.0],
            eigenvalues: [0.0; 3],
        };
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let smallest = eig.eigenvectors.column(order[2]);
    let norm = smallest.norm();
    let normal = canonicalize_normal([smallest[0] / norm, smallest[1] / norm, smallest[2] / norm]);
    LocalShape {
        normal,
        eigenvalues: order.map(|i| eig.eigenvalues[i].max(0.0)),
    }
}

fn check_knn(m: usize, k_nn: usize) -> Result<()> {
    if k_nn < 3 {
        return Err(Error::InvalidArgument(format!("k_nn must be >= 3, got {k_nn}")));
    }
    if m <= k_nn {
        return Err(Error::InvalidArgument(format!("need more than k_nn={k_nn} points, got {m}")));
    }
    Ok(())
}

/// Smallest-eigenvalue eigenvector of each point's k-NN covariance,
/// sign-canonicalized (see [`canonicalize_normal`]).
pub fn estimate_normals(pc: &PointCloud, k_nn: usize) -> Result<Vec<[f64; 3]>> {
    check_knn(pc.len(), k_nn)?;
    let points: Vec<[f64; 3]> = pc.positions.iter().map(to_f64).collect();
    let nbrs = knn(&points, k_nn);
    Ok(nbrs.par_iter().map(|n| local_shape(&points, n).normal).collect())
}

fn dominant_axis(n: &[f64; 3]) -> usize {
    let a = n.map(f64::abs);
    if a[0] >= a[1] && a[0] >= a[2] {
        0
    } else if a[1] >= a[2] {
        1
    } else {
        2
    }
}

/// Unscaled descriptors for one scene.
pub fn raw_hand_features(pc: &PointCloud, normals: &[[f64; 3]], k_nn: usize) -> Result<Array2<f64>> {
    check_knn(pc.len(), k_nn)?;
    if normals.len() != pc.len() {
        return Err(Error::Shape(format!("{} normals for {} points", normals.len(), pc.len())));
    }
    let points: Vec<[f64; 3]> = pc.positions.iter().map(to_f64).collect();
    let nbrs = knn(&points, k_nn);
    let rows: Vec<[f64; NUM_HAND_FEATURES]> = (0..pc.len())
        .into_par_iter()
        .map(|i| {
            let shape = local_shape(&points, &nbrs[i]);
            let [l1, l2, l3] = shape.eigenvalues;
            let (lin, plan, scat) = if l1 > 0.0 {
                ((l1 - l2) / l1, (l2 - l3) / l1, l3 / l1)
            } else {
                (0.0, 0.0, 0.0)
            };
            let mut hist = [0.0; 3];
            for &j in &nbrs[i] {
                hist[dominant_axis(&normals[j])] += 1.0;
            }
            let kf = nbrs[i].len() as f64;
            let n = normals[i];
            let c = pc.colors[i];
            [
                n[0],
                n[1],
                n[2],
                points[i][2],
                c[0] as f64,
                c[1] as f64,
                c[2] as f64,
                lin,
                plan,
                scat,
                hist[0] / kf,
                hist[1] / kf,
                hist[2] / kf,
            ]
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((pc.len(), NUM_HAND_FEATURES), flat).expect("row length is fixed"))
}

/// Per-column min-max scaling fitted over many matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit<'a>(mats: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Self {
        let mut min = vec![f64::INFINITY; NUM_HAND_FEATURES];
        let mut max = vec![f64::NEG_INFINITY; NUM_HAND_FEATURES];
        for m in mats {
            for row in m.rows() {
                for (d, &v) in row.iter().enumerate() {
                    min[d] = min[d].min(v);
                    max[d] = max[d].max(v);
                }
            }
        }
        ColumnScaler { min, max }
    }

    /// Maps each column to `[0, 1]`; constant columns map to 0.
    pub fn apply(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut out = raw.clone();
        for mut row in out.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                let span = self.max[d] - self.min[d];
                *v = if span > 0.0 {
                    ((*v - self.min[d]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        out
    }
}

/// Descriptors for a single cloud, scaled over that cloud alone.
pub fn compute_hand_features(pc: &PointCloud, normals: &[[f64; 3]], k_nn: usize) -> Result<HandFeatures> {
    let raw = raw_hand_features(pc, normals, k_nn)?;
    let scaler = ColumnScaler::fit([raw.view()]);
    Ok(HandFeatures(scaler.apply(&raw)))
}

/// Normals and dataset-scaled descriptors for every cloud.
pub fn compute_dataset_features(clouds: &[&PointCloud], k_nn: usize) -> Result<Vec<(Vec<[f64; 3]>, HandFeatures)>> {
    let mut raws = Vec::with_capacity(clouds.len());
    for pc in clouds {
        let normals = estimate_normals(pc, k_nn)?;
        let raw = raw_hand_features(pc, &normals, k_nn)?;
        raws.push((normals, raw));
    }
    let scaler = ColumnScaler::fit(raws.iter().map(|(_, r)| r.view()));
    Ok(raws
        .into_iter()
        .map(|(n, r)| (n, HandFeatures(scaler.apply(&r))))
        .collect())
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Voxel-seeded region growing: grid buckets of `voxel_size` are joined with
/// their 6-neighbors when the bucket mean normals are within
/// `angle_thresh_deg` (orientation-agnostic).
pub fn build_supervoxels(
    pc: &PointCloud,
    normals: &[[f64; 3]],
    features: &HandFeatures,
    voxel_size: f64,
    angle_thresh_deg: f64,
) -> Result<SupervoxelPartition> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel_size must be > 0, got {voxel_size}")));
    }
    let m = pc.len();
    if normals.len() != m || features.0.nrows() != m {
        return Err(Error::Shape("normals/features do not match the cloud".into()));
    }
    // The grid is anchored at the cloud's lower corner.
    let mut origin = [f64::INFINITY; 3];
    for p in &pc.positions {
        for d in 0..3 {
            origin[d] = origin[d].min(p[d] as f64);
        }
    }
    let key_of = |p: &[f32; 3]| {
        let mut k = [0i64; 3];
        for d in 0..3 {
            k[d] = ((p[d] as f64 - origin[d]) / voxel_size).floor() as i64;
        }
        k
    };
    let mut keys: Vec<[i64; 3]> = pc.positions.iter().map(key_of).collect();
    let point_keys = keys.clone();
    keys.sort_unstable();
    keys.dedup();
    let id_of: HashMap<[i64; 3], usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let bucket_of_point: Vec<usize> = point_keys.iter().map(|k| id_of[k]).collect();

    let nb = keys.len();
    let mut normal_sum = vec![[0.0f64; 3]; nb];
    for (i, &b) in bucket_of_point.iter().enumerate() {
        for d in 0..3 {
            normal_sum[b][d] += normals[i][d];
        }
    }
    let mean_normal: Vec<Option<[f64; 3]>> = normal_sum
        .iter()
        .map(|s| {
            let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
            (n > 1e-12).then(|| s.map(|v| v / n))
        })
        .collect();

    let cos_thresh = angle_thresh_deg.to_radians().cos();
    let mut uf = UnionFind((0..nb).collect());
    for (id, key) in keys.iter().enumerate() {
        for axis in 0..3 {
            let mut nk = *key;
            nk[axis] += 1;
            let Some(&other) = id_of.get(&nk) else { continue };
            if let (Some(a), Some(b)) = (mean_normal[id], mean_normal[other]) {
                let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs();
                if cos > cos_thresh {
                    uf.union(id, other);
                }
            }
        }
    }

    // Contiguous ids in order of each region's smallest bucket id.
    let mut region_id = vec![usize::MAX; nb];
    let mut next = 0;
    for b in 0..nb {
        let r = uf.find(b);
        if region_id[r] == usize::MAX {
            region_id[r] = next;
            next += 1;
        }
        region_id[b] = region_id[r];
    }
    let sv_of_point: Vec<usize> = bucket_of_point.iter().map(|&b| region_id[b]).collect();
    Ok(partition_from_assignment(sv_of_point, next, &features.0))
}

pub(crate) fn partition_from_assignment(sv_of_point: Vec<usize>, s: usize, features: &Array2<f64>) -> SupervoxelPartition {
    let d = features.ncols();
    let mut sums = Array2::<f64>::zeros((s, d));
    let mut sizes = vec![0usize; s];
    for (i, &sv) in sv_of_point.iter().enumerate() {
        sizes[sv] += 1;
        let mut row = sums.row_mut(sv);
        row += &features.row(i);
    }
    for (sv, mut row) in sums.rows_mut().into_iter().enumerate() {
        row /= sizes[sv] as f64;
    }
    SupervoxelPartition {
        sv_of_point,
        sv_features: sums,
        sv_sizes: sizes,
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"WFT1";

pub fn encode_feature_cache(features: &Array2<f64>) -> Vec<u8> {
    let (m, d) = features.dim();
    let mut out = Vec::with_capacity(12 + m * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_cache(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err("bad magic".into());
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + m * d * 4 {
        return Err(format!("expected {} bytes for {m}x{d}, found {}", 12 + m * d * 4, bytes.len()));
    }
    let vals: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((m, d), vals).map_err(|e| e.to_string())
}

pub fn write_feature_cache(path: &Path, features: &HandFeatures) -> Result<()> {
    fs::write(path, encode_feature_cache(&features.0))?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<HandFeatures> {
    let bytes = fs::read(path)?;
    decode_feature_cache(&bytes)
        .map(HandFeatures)
        .map_err(|msg| Error::format(path, msg))
}
