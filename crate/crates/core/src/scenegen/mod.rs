//! Synthetic indoor scenes with per-point ground truth and scene-level tags.
//!
//! Every object is an axis-aligned proxy (see [`proxy`]) sampled on its
//! surface, perturbed by isotropic Gaussian noise and painted with a
//! class-characteristic color. Generation is a pure function of its inputs
//! and seed.

pub mod format;
pub mod proxy;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use proxy::{CLASS_NAMES, NUM_PROXY_CLASSES};
use proxy::{Proxy, CLASS_PALETTES, COLOR_JITTER};

/// One scene: positions in meters, colors in `[0, 1]`, one class per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub gt_labels: Vec<u32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks the structural invariants against a class count.
    pub fn validate(&self, num_classes: usize) -> std::result::Result<(), String> {
        let m = self.positions.len();
        if m == 0 {
            return Err("point cloud is empty".into());
        }
        if self.colors.len() != m || self.gt_labels.len() != m {
            return Err(format!(
                "length mismatch: {} positions, {} colors, {} labels",
                m,
                self.colors.len(),
                self.gt_labels.len()
            ));
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(format!("non-finite position at point {i}"));
        }
        if let Some(i) = self
            .colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(format!("color out of [0,1] at point {i}"));
        }
        if let Some(i) = self.gt_labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(format!("label {} out of range at point {i}", self.gt_labels[i]));
        }
        Ok(())
    }

    /// Keeps the points for which `keep` returns true.
    pub fn retain_labels(&self, mut keep: impl FnMut(u32) -> bool) -> PointCloud {
        let mut out = PointCloud {
            positions: Vec::new(),
            colors: Vec::new(),
            gt_labels: Vec::new(),
        };
        for i in 0..self.len() {
            if keep(self.gt_labels[i]) {
                out.positions.push(self.positions[i]);
                out.colors.push(self.colors[i]);
                out.gt_labels.push(self.gt_labels[i]);
            }
        }
        out
    }
}

/// Scene-level multi-hot tag vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub present: Vec<bool>,
}

impl SceneLabels {
    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.present.get(class).copied().unwrap_or(false)
    }

    /// Present class ids in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.present
            .iter()
            .enumerate()
            .filter_map(|(c, &p)| p.then_some(c))
            .collect()
    }

    pub fn as_bits(&self) -> Vec<u8> {
        self.present.iter().map(|&p| p as u8).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: SceneLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub classes_to_place: Vec<usize>,
    pub objects_per_class: usize,
    pub points_per_object: usize,
    /// Standard deviation of the positional noise, meters.
    pub noise_sigma: f64,
    pub room_extent: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            classes_to_place: (0..NUM_PROXY_CLASSES).collect(),
            objects_per_class: 2,
            points_per_object: 150,
            noise_sigma: 0.01,
            room_extent: [6.0, 5.0, 3.0],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes_to_place.is_empty() {
            return Err(Error::InvalidSpec("classes_to_place is empty".into()));
        }
        if let Some(&c) = self.classes_to_place.iter().find(|&&c| c >= NUM_PROXY_CLASSES) {
            return Err(Error::InvalidSpec(format!(
                "class {c} has no proxy (only {NUM_PROXY_CLASSES} classes)"
            )));
        }
        if self.objects_per_class == 0 || self.points_per_object == 0 {
            return Err(Error::InvalidSpec("object and point counts must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.room_extent.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidSpec("room_extent must be positive".into()));
        }
        Ok(())
    }
}

/// Attempts allowed when looking for a furniture spot clear of earlier pieces.
const PLACEMENT_ATTEMPTS: usize = 64;
/// Minimum floor gap kept between furniture footprints.
const FURNITURE_GAP: f64 = 0.1;

/// Places a proxy, resampling furniture until its footprint clears the
/// furniture already in the room. A crowded room keeps the last attempt.
fn place_clear<R: Rng>(class: usize, room: [f64; 3], placed: &[Proxy], rng: &mut R) -> Proxy {
    let mut proxy = Proxy::place(class, room, rng);
    if !proxy.is_furniture() {
        return proxy;
    }
    for _ in 1..PLACEMENT_ATTEMPTS {
        let blocked = placed
            .iter()
            .any(|other| other.is_furniture() && proxy.footprints_overlap(other, FURNITURE_GAP));
        if !blocked {
            break;
        }
        proxy = Proxy::place(class, room, rng);
    }
    proxy
}

/// Places and samples the proxies requested by `spec`. Returns the proxies
/// alongside the cloud so callers can check surface membership.
pub(crate) fn generate_scene_with_proxies(spec: &SceneSpec, seed: u64) -> Result<(PointCloud, Vec<Proxy>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, COLOR_JITTER).expect("constant jitter is valid");
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("validated sigma"));

    let total = spec.classes_to_place.len() * spec.objects_per_class * spec.points_per_object;
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(total),
        colors: Vec::with_capacity(total),
        gt_labels: Vec::with_capacity(total),
    };
    let mut proxies = Vec::new();
    for &class in &spec.classes_to_place {
        for _ in 0..spec.objects_per_class {
            let proxy = place_clear(class, spec.room_extent, &proxies, &mut rng);
            let palette = &CLASS_PALETTES[class];
            let base = palette[rng.random_range(0..palette.len())];
            let color = [0, 1, 2].map(|i| (base[i] + jitter.sample(&mut rng)).clamp(0.0, 1.0) as f32);
            for _ in 0..spec.points_per_object {
                let mut p = proxy.sample_surface(&mut rng);
                if let Some(n) = &noise {
                    for v in &mut p {
                        *v += n.sample(&mut rng);
                    }
                }
                cloud.positions.push(p.map(|v| v as f32));
                cloud.colors.push(color);
                cloud.gt_labels.push(class as u32);
            }
            proxies.push(proxy);
        }
    }
    Ok((cloud, proxies))
}

/// Generates one labelled scene. Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    generate_scene_with_proxies(spec, seed).map(|(cloud, _)| cloud)
}

pub fn derive_scene_labels(cloud: &PointCloud, num_classes: usize) -> SceneLabels {
    let mut present = vec![false; num_classes];
    for &l in &cloud.gt_labels {
        if let Some(p) = present.get_mut(l as usize) {
            *p = true;
        }
    }
    SceneLabels { present }
}

/// How per-scene class subsets are drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CooccurPolicy {
    /// Subsets are sampled so that no class pair appears together in every
    /// scene where either of them appears.
    Free,
    /// Every scene contains all of these classes.
    Forced(Vec<usize>),
}

impl std::str::FromStr for CooccurPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "free" {
            return Ok(CooccurPolicy::Free);
        }
        let list = s
            .strip_prefix("forced=")
            .ok_or_else(|| format!("unknown co-occurrence policy {s:?} (expected free or forced=a,b)"))?;
        let classes = list
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad class id {t:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if classes.is_empty() {
            return Err("forced policy needs at least one class".into());
        }
        Ok(CooccurPolicy::Forced(classes))
    }
}

/// Probability that a non-forced class is placed in a scene.
pub const PRESENCE_PROBABILITY: f64 = 0.5;

/// Chairs mostly come with a table: `(table, chair, P(chair | table),
/// P(chair | no table))`.
const CHAIR_WITH_TABLE: (usize, usize, f64, f64) = (2, 3, 0.8, 0.15);

/// Smallest number of classes placed in each scene.
pub const MIN_CLASSES_PER_SCENE: usize = 2;

const MAX_RESAMPLES: usize = 1000;

/// Scene-by-class presence counts: `counts[a][b]` is the number of subsets
/// containing both `a` and `b`.
pub(crate) fn subset_cooccurrence(subsets: &[Vec<bool>], num_classes: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for s in subsets {
        for a in 0..num_classes {
            if !s[a] {
                continue;
            }
            for b in 0..num_classes {
                if s[b] {
                    counts[a][b] += 1;
                }
            }
        }
    }
    counts
}

/// Pairs `(a, b)`, `a < b`, that occur in exactly the same subsets.
pub(crate) fn has_perfect_pair_list(counts: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let c = counts.len();
    (0..c)
        .flat_map(|a| (a + 1..c).map(move |b| (a, b)))
        .filter(|&(a, b)| counts[a][b] > 0 && counts[a][b] == counts[a][a] && counts[a][b] == counts[b][b])
        .collect()
}

pub(crate) fn has_perfect_pair(counts: &[Vec<usize>]) -> bool {
    !has_perfect_pair_list(counts).is_empty()
}

/// Generates `n_scenes` scenes whose class subsets follow `policy`. The class
/// universe is `base_spec.classes_to_place`; other spec fields are shared.
pub fn generate_dataset(n_scenes: usize, policy: &CooccurPolicy, base_spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    if n_scenes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 scenes, got {n_scenes}")));
    }
    base_spec.validate()?;
    let c = NUM_PROXY_CLASSES;
    let mut universe = base_spec.classes_to_place.clone();
    universe.sort_unstable();
    universe.dedup();
    let forced: Vec<usize> = match policy {
        CooccurPolicy::Free => Vec::new(),
        CooccurPolicy::Forced(s) => {
            if let Some(&bad) = s.iter().find(|&&k| !universe.contains(&k)) {
                return Err(Error::InvalidArgument(format!("forced class {bad} is not in the class universe")));
            }
            s.clone()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_classes = MIN_CLASSES_PER_SCENE.min(universe.len());
    let mut subsets: Option<Vec<Vec<bool>>> = None;
    for _ in 0..MAX_RESAMPLES {
        let candidate: Vec<Vec<bool>> = (0..n_scenes)
            .map(|_| sample_subset(&universe, &forced, min_classes, c, &mut rng))
            .collect();
        let counts = subset_cooccurrence(&candidate, c);
        let every_class_seen = universe.iter().all(|&k| counts[k][k] > 0);
        let ok = match policy {
            CooccurPolicy::Free => every_class_seen && !has_perfect_pair(&counts),
            CooccurPolicy::Forced(_) => every_class_seen,
        };
        if ok {
            subsets = Some(candidate);
            break;
        }
    }
    let subsets = subsets.ok_or(Error::PolicyUnsatisfiable { attempts: MAX_RESAMPLES })?;

    let mut scenes = Vec::with_capacity(n_scenes);
    for subset in subsets {
        let spec = SceneSpec {
            classes_to_place: (0..c).filter(|&k| subset[k]).collect(),
            ..base_spec.clone()
        };
        let cloud = generate_scene(&spec, rng.next_u64())?;
        let labels = derive_scene_labels(&cloud, c);
        scenes.push(Scene { cloud, labels });
    }
    Ok(Dataset {
        scenes,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed,
    })
}

fn sample_subset<R: Rng>(universe: &[usize], forced: &[usize], min_classes: usize, c: usize, rng: &mut R) -> Vec<bool> {
    let mut present = vec![false; c];
    let (table, chair, with, without) = CHAIR_WITH_TABLE;
    for &k in universe {
        let p = if k == chair && universe.contains(&table) {
            if present[table] { with } else { without }
        } else {
            PRESENCE_PROBABILITY
        };
        present[k] = forced.contains(&k) || rng.random_bool(p);
    }
    let mut missing: Vec<usize> = universe.iter().copied().filter(|&k| !present[k]).collect();
    missing.shuffle(rng);
    let mut have = present.iter().filter(|&&p| p).count();
    for k in missing {
        if have >= min_classes {
            break;
        }
        present[k] = true;
        have += 1;
    }
    present
}

/// Removes every point of `class_a` from one randomly chosen scene and every
/// point of `class_b` from a different one, among the scenes holding both.
pub fn break_cooccurrence(ds: &Dataset, class_a: usize, class_b: usize, seed: u64) -> Result<Dataset> {
    let c = ds.num_classes();
    if class_a == class_b || class_a >= c || class_b >= c {
        return Err(Error::Cooccurrence(format!("invalid class pair ({class_a}, {class_b})")));
    }
    let both: Vec<usize> = ds
        .scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.labels.contains(class_a) && s.labels.contains(class_b))
        .map(|(i, _)| i)
        .collect();
    if both.len() < 2 {
        return Err(Error::Cooccurrence(format!(
            "classes {class_a} and {class_b} share {} scene(s); need at least 2",
            both.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = both.choose_multiple(&mut rng, 2).copied().collect();
    let (drop_a, drop_b) = (picked[0], picked[1]);

    let mut out = ds.clone();
    for (scene_idx, class) in [(drop_a, class_a), (drop_b, class_b)] {
        let scene = &mut out.scenes[scene_idx];
        scene.cloud = scene.cloud.retain_labels(|l| l as usize != class);
        scene.labels = derive_scene_labels(&scene.cloud, c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(classes: Vec<usize>) -> SceneSpec {
        SceneSpec {
            classes_to_place: classes,
            objects_per_class: 1,
            points_per_object: 50,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn two_class_scene_has_both_classes() {
        let pc = generate_scene(&small_spec(vec![0, 3]), 7).unwrap();
        assert_eq!(pc.len(), 100);
        assert!(pc.gt_labels.iter().all(|&l| l == 0 || l == 3));
        let labels = derive_scene_labels(&pc, NUM_PROXY_CLASSES);
        assert_eq!(labels.classes(), vec![0, 3]);
        pc.validate(NUM_PROXY_CLASSES).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(vec![0, 3]);
        assert_eq!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 7).unwrap());
        assert_ne!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 8).unwrap());
    }

    #[test]
    fn zero_noise_points_lie_on_proxy_surface() {
        for class in 0..NUM_PROXY_CLASSES {
            let spec = SceneSpec {
                noise_sigma: 0.0,
                ..small_spec(vec![class])
            };
            let (pc, proxies) = generate_scene_with_proxies(&spec, 21).unwrap();
            for p in &pc.positions {
                let p = p.map(f64::from);
                let d = proxies.iter().map(|x| x.surface_distance(p)).fold(f64::INFINITY, f64::min);
                // f32 storage rounds coordinates by at most ~3e-7 m at room scale.
                assert!(d < 1e-6, "class {class}: point {p:?} is {d} m off surface");
            }
        }
    }

    #[test]
    fn wall_points_lie_on_room_boundary() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            objects_per_class: 3,
            ..small_spec(vec![1])
        };
        let pc = generate_scene(&spec, 5).unwrap();
        let [ex, ey, _] = spec.room_extent;
        for p in &pc.positions {
            let (x, y) = (p[0] as f64, p[1] as f64);
            let on = x.abs() < 1e-6 || (x - ex).abs() < 1e-6 || y.abs() < 1e-6 || (y - ey).abs() < 1e-6;
            assert!(on, "{p:?}");
        }
    }

    #[test]
    fn rejects_empty_class_list() {
        assert!(matches!(generate_scene(&small_spec(vec![]), 1), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn scene_labels_definition() {
        let pc = |labels: Vec<u32>| PointCloud {
            positions: vec![[0.0; 3]; labels.len()],
            colors: vec![[0.0; 3]; labels.len()],
            gt_labels: labels,
        };
        assert_eq!(derive_scene_labels(&pc(vec![0, 0, 3]), 4).present, vec![true, false, false, true]);
        assert_eq!(derive_scene_labels(&pc(vec![2]), 3).present, vec![false, false, true]);
        assert!(derive_scene_labels(&pc(vec![0, 1, 2]), 3).present.iter().all(|&p| p));
    }

    #[test]
    fn generated_labels_match_placed_classes() {
        let spec = small_spec(vec![1, 2, 5]);
        for seed in 0..5 {
            let pc = generate_scene(&spec, seed).unwrap();
            assert_eq!(derive_scene_labels(&pc, NUM_PROXY_CLASSES).classes(), vec![1, 2, 5]);
        }
    }

    #[test]
    fn forced_policy_places_classes_everywhere() {
        let ds = generate_dataset(10, &CooccurPolicy::Forced(vec![0, 1]), &small_spec((0..6).collect()), 3).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.scenes.iter().all(|s| s.labels.contains(0) && s.labels.contains(1)));
    }

    #[test]
    fn free_policy_has_no_perfect_pairs() {
        let ds = generate_dataset(20, &CooccurPolicy::Free, &small_spec((0..6).collect()), 9).unwrap();
        let subsets: Vec<Vec<bool>> = ds.scenes.iter().map(|s| s.labels.present.clone()).collect();
        let counts = subset_cooccurrence(&subsets, 6);
        for a in 0..6 {
            for b in a + 1..6 {
                let perfect = counts[a][b] == counts[a][a] && counts[a][b] == counts[b][b];
                assert!(!perfect, "pair ({a},{b}) co-occurs perfectly: {counts:?}");
            }
        }
    }

    #[test]
    fn dataset_needs_two_scenes() {
        assert!(generate_dataset(1, &CooccurPolicy::Free, &SceneSpec::default(), 0).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let spec = small_spec((0..6).collect());
        let a = generate_dataset(6, &CooccurPolicy::Free, &spec, 4).unwrap();
        let b = generate_dataset(6, &CooccurPolicy::Free, &spec, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn break_cooccurrence_modifies_two_scenes() {
        let ds = generate_dataset(10, &CooccurPolicy::Forced(vec![0, 1]), &small_spec((0..6).collect()), 3).unwrap();
        let fixed = break_cooccurrence(&ds, 0, 1, 17).unwrap();
        let changed: Vec<usize> = (0..10).filter(|&i| ds.scenes[i] != fixed.scenes[i]).collect();
        assert_eq!(changed.len(), 2);
        let missing_a = fixed.scenes.iter().filter(|s| !s.labels.contains(0)).count();
        let missing_b = fixed.scenes.iter().filter(|s| !s.labels.contains(1)).count();
        assert_eq!((missing_a, missing_b), (1, 1));
        let lost_a = fixed.scenes.iter().position(|s| !s.labels.contains(0)).unwrap();
        let lost_b = fixed.scenes.iter().position(|s| !s.labels.contains(1)).unwrap();
        assert_ne!(lost_a, lost_b);
        assert!(fixed.scenes[lost_a].cloud.gt_labels.iter().all(|&l| l != 0));
    }

    #[test]
    fn break_cooccurrence_requires_shared_scenes() {
        let mut ds = generate_dataset(4, &CooccurPolicy::Forced(vec![0]), &small_spec(vec![0, 1]), 2).unwrap();
        for s in &mut ds.scenes {
            s.cloud = s.cloud.retain_labels(|l| l != 1);
            s.labels = derive_scene_labels(&s.cloud, 6);
        }
        assert!(matches!(break_cooccurrence(&ds, 0, 1, 0), Err(Error::Cooccurrence(_))));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("free".parse::<CooccurPolicy>().unwrap(), CooccurPolicy::Free);
        assert_eq!("forced=0,1".parse::<CooccurPolicy>().unwrap(), CooccurPolicy::Forced(vec![0, 1]));
        assert!("sometimes".parse::<CooccurPolicy>().is_err());
        assert!("forced=a".parse::<CooccurPolicy>().is_err());
    }
}
