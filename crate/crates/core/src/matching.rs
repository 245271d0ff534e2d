//! Primitive-to-class label propagation for one scene.
//!
//! The cost matrix scores every primitive present in the scene against every
//! class in the scene's tag set. Classes are matched to primitives either
//! jointly (maximum-score injective assignment, Hungarian algorithm) or
//! independently (per-class argmax). Matched primitives then hand their class
//! to all their member points; everything else is ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::clustering::{kmeans, AffinityMatrix, PrimitiveSet};
use crate::encoder::Classifier;
use crate::error::{Error, Result};
use crate::scenegen::SceneLabels;

pub const IGNORE: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// K' x C' scores, higher is better.
    pub e: Array2<f64>,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssignmentMap {
    /// Primitive id -> class id. Primitives not in the map are unassigned.
    pub pi: BTreeMap<usize, usize>,
    pub total_score: f64,
    /// Scene classes left without a primitive.
    pub unmatched_classes: Vec<usize>,
}

impl AssignmentMap {
    pub fn class_of(&self, primitive: usize) -> Option<usize> {
        self.pi.get(&primitive).copied()
    }

    pub fn matched_classes(&self) -> BTreeSet<usize> {
        self.pi.values().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels(pub Vec<i32>);

/// Mean feature of each primitive's member points in this scene, and
/// whether the primitive has any member. Absent rows are zero.
pub fn primitive_scene_features(f: &Array2<f64>, aff: &AffinityMatrix, k: usize) -> Result<(Array2<f64>, Vec<bool>)> {
    if aff.assign.len() != f.nrows() {
        return Err(Error::Shape(format!("{} assignments for {} points", aff.assign.len(), f.nrows())));
    }
    let mut sums = Array2::<f64>::zeros((k, f.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &p) in aff.assign.iter().enumerate() {
        if p >= k {
            return Err(Error::Shape(format!("primitive id {p} out of range for K={k}")));
        }
        counts[p] += 1;
        let mut row = sums.row_mut(p);
        row += &f.row(i);
    }
    for (p, mut row) in sums.rows_mut().into_iter().enumerate() {
        if counts[p] > 0 {
            row /= counts[p] as f64;
        }
    }
    Ok((sums, counts.into_iter().map(|c| c > 0).collect()))
}

/// Scores of present primitives (rows) against present classes (columns).
pub fn build_cost_matrix(prim_features: &Array2<f64>, present: &[bool], clf: &Classifier, y: &SceneLabels) -> Result<CostMatrix> {
    let row_ids: Vec<usize> = present.iter().enumerate().filter_map(|(k, &p)| p.then_some(k)).collect();
    let col_ids = y.classes();
    if col_ids.is_empty() {
        return Err(Error::InvalidArgument("scene has no labelled classes".into()));
    }
    if row_ids.is_empty() {
        return Err(Error::InvalidArgument("scene has no present primitive".into()));
    }
    if y.num_classes() != clf.num_classes() {
        return Err(Error::Shape(format!(
            "scene labels cover {} classes, classifier {}",
            y.num_classes(),
            clf.num_classes()
        )));
    }
    let mut e = Array2::zeros((row_ids.len(), col_ids.len()));
    for (i, &k) in row_ids.iter().enumerate() {
        let fk = prim_features.row(k);
        for (j, &c) in col_ids.iter().enumerate() {
            e[[i, j]] = fk.dot(&clf.w.column(c));
        }
    }
    Ok(CostMatrix { e, row_ids, col_ids })
}

struct LapSolution {
    /// Column assigned to each row.
    col_of_row: Vec<usize>,
    cost: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// shortest augmenting path with potentials. Equivalent to padding the rows
/// with constant-cost dummies up to a square problem.
fn solve_lap(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> LapSolution {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] > 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| c(i + 1, col_of_row[i] + 1)).sum();
    LapSolution {
        col_of_row,
        cost: total,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

/// Maximum-score injective assignment of every scene class to a present
/// primitive; remaining primitives stay unassigned. Among equal-score optima
/// the assignment whose primitive sequence (ordered by class id) is
/// lexicographically smallest is returned.
pub fn hungarian_match(cm: &CostMatrix) -> Result<AssignmentMap> {
    let (kp, cp) = cm.e.dim();
    if kp < cp {
        return Err(Error::UnmatchableScene {
            primitives: kp,
            classes: cp,
        });
    }
    let max_e = cm.e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Rows = classes, columns = primitives; the shift keeps costs >= 0 and
    // preserves the argmax assignment.
    let cost: Vec<Vec<f64>> = (0..cp).map(|c| (0..kp).map(|k| max_e - cm.e[[k, c]]).collect()).collect();
    let scale = cost.iter().flatten().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-9 * scale * cp as f64;

    let all_rows: Vec<usize> = (0..cp).collect();
    let all_cols: Vec<usize> = (0..kp).collect();
    let best = solve_lap(&cost, &all_rows, &all_cols);

    let mut chosen: Vec<usize> = Vec::with_capacity(cp);
    let mut fixed_cost = 0.0;
    for class in 0..cp {
        let rest_rows: Vec<usize> = (class + 1..cp).collect();
        let mut pick = best.col_of_row[class];
        for col in 0..kp {
            if chosen.contains(&col) {
                continue;
            }
            // Columns outside the tight set cannot appear in any optimum.
            if (cost[class][col] - best.u[class] - best.v[col]).abs() > tol {
                continue;
            }
            let rest_cols: Vec<usize> = (0..kp).filter(|c| *c != col && !chosen.contains(c)).collect();
            let rest = if rest_rows.is_empty() {
                0.0
            } else {
                solve_lap(&cost, &rest_rows, &rest_cols).cost
            };
            if fixed_cost + cost[class][col] + rest <= best.cost + tol {
                pick = col;
                break;
            }
        }
        fixed_cost += cost[class][pick];
        chosen.push(pick);
    }

    let mut pi = BTreeMap::new();
    let mut total = 0.0;
    for (class, &col) in chosen.iter().enumerate() {
        pi.insert(cm.row_ids[col], cm.col_ids[class]);
        total += cm.e[[col, class]];
    }
    Ok(AssignmentMap {
        pi,
        total_score: total,
        unmatched_classes: Vec::new(),
    })
}

/// Classifies every primitive by its best-scoring scene class (lowest class
/// on ties), then keeps one primitive per class: the highest-scoring one
/// (lowest id on ties). Classes that win no primitive stay unmatched.
pub fn naive_match(cm: &CostMatrix) -> AssignmentMap {
    let (kp, cp) = cm.e.dim();
    let mut keep: Vec<Option<(usize, f64)>> = vec![None; cp];
    for k in 0..kp {
        let row = cm.e.row(k);
        let mut class = 0;
        for c in 1..cp {
            if row[c] > row[class] {
                class = c;
            }
        }
        let score = row[class];
        if keep[class].is_none_or(|(_, best)| score > best) {
            keep[class] = Some((k, score));
        }
    }
    let mut pi = BTreeMap::new();
    let mut unmatched = Vec::new();
    let mut total = 0.0;
    for (class, slot) in keep.iter().enumerate() {
        match slot {
            Some((k, score)) => {
                pi.insert(cm.row_ids[*k], cm.col_ids[class]);
                total += score;
            }
            None => unmatched.push(cm.col_ids[class]),
        }
    }
    AssignmentMap {
        pi,
        total_score: total,
        unmatched_classes: unmatched,
    }
}

/// Groups the primitive centroids into `group_k` clusters.
pub fn group_primitives(prims: &PrimitiveSet, group_k: usize, seed: u64) -> Result<Vec<usize>> {
    if group_k == 0 || group_k >= prims.len() {
        return Err(Error::InvalidArgument(format!(
            "group count {group_k} must be in [1, {})",
            prims.len()
        )));
    }
    Ok(kmeans(prims.centroids.view(), group_k, seed, 100)?.labels)
}

/// Groups holding primitives of two or more classes lose all assignments;
/// groups holding a single class propagate it to every member.
pub fn filter_with_groups(pi: &AssignmentMap, groups: &[usize]) -> AssignmentMap {
    let mut classes_in: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&k, &c) in &pi.pi {
        if let Some(&g) = groups.get(k) {
            classes_in.entry(g).or_default().insert(c);
        }
    }
    let mut out = BTreeMap::new();
    for (k, &g) in groups.iter().enumerate() {
        if let Some(set) = classes_in.get(&g) {
            if set.len() == 1 {
                out.insert(k, *set.iter().next().unwrap());
            }
        }
    }
    let kept: BTreeSet<usize> = out.values().copied().collect();
    let mut unmatched: BTreeSet<usize> = pi.unmatched_classes.iter().copied().collect();
    unmatched.extend(pi.pi.values().filter(|c| !kept.contains(c)));
    AssignmentMap {
        pi: out,
        total_score: pi.total_score,
        unmatched_classes: unmatched.into_iter().collect(),
    }
}

pub fn filter_assignments(pi: &AssignmentMap, prims: &PrimitiveSet, group_k: usize, seed: u64) -> Result<AssignmentMap> {
    let groups = group_primitives(prims, group_k, seed)?;
    Ok(filter_with_groups(pi, &groups))
}

/// Each point takes the class of its primitive, or [`IGNORE`].
pub fn densify_labels(pi: &AssignmentMap, aff: &AffinityMatrix) -> PseudoLabels {
    PseudoLabels(
        aff.assign
            .iter()
            .map(|&k| pi.class_of(k).map_or(IGNORE, |c| c as i32))
            .collect(),
    )
}

pub const PSEUDO_MAGIC: &[u8; 4] = b"WPL1";

pub fn encode_pseudo_labels(labels: &PseudoLabels) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.0.len() * 4);
    out.extend_from_slice(PSEUDO_MAGIC);
    out.extend_from_slice(&(labels.0.len() as u32).to_le_bytes());
    for l in &labels.0 {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_pseudo_labels(bytes: &[u8]) -> std::result::Result<PseudoLabels, String> {
    if bytes.len() < 8 || &bytes[0..4] != PSEUDO_MAGIC {
        return Err("bad magic or truncated header".into());
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * m {
        return Err(format!("expected {} bytes, found {}", 8 + 4 * m, bytes.len()));
    }
    let labels: Vec<i32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(bad) = labels.iter().find(|&&l| l < IGNORE) {
        return Err(format!("invalid label {bad}"));
    }
    Ok(PseudoLabels(labels))
}

pub fn write_pseudo_labels(path: &Path, labels: &PseudoLabels) -> Result<()> {
    fs::write(path, encode_pseudo_labels(labels))?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabels> {
    let bytes = fs::read(path)?;
    decode_pseudo_labels(&bytes).map_err(|msg| Error::format(path, msg))
}
