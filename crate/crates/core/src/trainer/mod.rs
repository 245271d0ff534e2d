//! Training schedule: periodic primitive recomputation with a handcrafted
//! warm-up, per-scene loss evaluation, delayed matching loss, and one Adam
//! step per scene.

mod eval;
mod experiments;

pub use eval::{argmax_rows, evaluate, evaluate_predictions, EvalReport};
pub use experiments::{
    ablate, bootstrap, cooccurrence_matrix, detect_perfect_cooccurrence, kept_labels_are_sound, AblationConfig,
    AblationRow, AblationTable, BootstrapOutcome,
};

use std::fmt::Write as _;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{assign_affinity, compute_primitives, AffinityMatrix, PrimitiveSet};
use crate::encoder::{AdamState, Checkpoint, Model};
use crate::error::{Error, Result};
use crate::features::{
    build_supervoxels, compute_dataset_features, DEFAULT_ANGLE_THRESH_DEG, DEFAULT_K_NN, DEFAULT_VOXEL_SIZE,
    NUM_HAND_FEATURES,
};
use crate::losses::{loss_cam, loss_dense, loss_match, loss_us, DEFAULT_TEMPERATURE};
use crate::matching::{
    build_cost_matrix, densify_labels, filter_with_groups, group_primitives, hungarian_match, naive_match,
    primitive_scene_features, AssignmentMap, PseudoLabels,
};
use crate::scenegen::{Dataset, SceneLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Hungarian,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub cam: bool,
    pub us: bool,
    #[serde(rename = "match")]
    pub matching: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            cam: true,
            us: true,
            matching: true,
        }
    }
}

/// Granularity of the training-time point-to-primitive assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityLevel {
    /// Each point goes to the primitive nearest its own feature.
    Point,
    /// Each supervoxel's mean descriptor is encoded and assigned; its points
    /// inherit that primitive.
    Supervoxel,
}

/// Per-epoch learning-rate policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` at epoch 0 towards 0 at the last epoch.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub k: usize,
    pub kmeans_period: usize,
    pub kmeans_max_iter: usize,
    pub warmup_epochs: usize,
    pub match_delay_epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub affinity: AffinityLevel,
    pub weight_decay: f64,
    pub tau: f64,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub losses: LossToggles,
    pub matcher: Matcher,
    pub filter: bool,
    /// Primitive groups for filtering, as a fraction of K (floored).
    pub filter_group_fraction: f64,
    pub w_cam: f64,
    pub w_us: f64,
    pub w_match: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            k: 48,
            kmeans_period: 10,
            kmeans_max_iter: 50,
            warmup_epochs: 30,
            match_delay_epochs: 8,
            lr: 4e-2,
            lr_schedule: LrSchedule::Cosine,
            affinity: AffinityLevel::Supervoxel,
            weight_decay: 1e-4,
            tau: DEFAULT_TEMPERATURE,
            hidden_dim: 32,
            feature_dim: 16,
            losses: LossToggles::default(),
            matcher: Matcher::Hungarian,
            filter: true,
            filter_group_fraction: 0.4,
            w_cam: 1.0,
            w_us: 1.0,
            w_match: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.match_delay_epochs > self.epochs {
            return bad(format!(
                "match_delay_epochs {} exceeds epochs {}",
                self.match_delay_epochs, self.epochs
            ));
        }
        if self.k < num_classes {
            return bad(format!("k={} must be at least the class count {num_classes}", self.k));
        }
        if self.kmeans_period == 0 || self.kmeans_max_iter == 0 {
            return bad("kmeans_period and kmeans_max_iter must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.tau > 0.0) {
            return bad("lr and tau must be > 0, weight_decay >= 0".into());
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return bad("hidden_dim and feature_dim must be >= 1".into());
        }
        if self.filter && self.group_count() == 0 {
            return bad(format!(
                "filter_group_fraction {} leaves no primitive groups for k={}",
                self.filter_group_fraction, self.k
            ));
        }
        if !(self.filter_group_fraction > 0.0 && self.filter_group_fraction < 1.0) {
            return bad("filter_group_fraction must be in (0, 1)".into());
        }
        if [self.w_cam, self.w_us, self.w_match].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be >= 0".into());
        }
        Ok(())
    }

    fn group_count(&self) -> usize {
        (self.filter_group_fraction * self.k as f64).floor() as usize
    }

    fn needs_primitives(&self) -> bool {
        self.losses.us || self.losses.matching
    }
}

/// Descriptor and supervoxel settings used to prepare a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub k_nn: usize,
    pub voxel_size: f64,
    pub angle_thresh_deg: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            k_nn: DEFAULT_K_NN,
            voxel_size: DEFAULT_VOXEL_SIZE,
            angle_thresh_deg: DEFAULT_ANGLE_THRESH_DEG,
        }
    }
}

/// One scene with everything training needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    /// M x 13 dataset-scaled descriptors.
    pub x: Array2<f64>,
    pub sv_features: Array2<f64>,
    pub sv_of_point: Vec<usize>,
    pub labels: SceneLabels,
    pub gt: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub scenes: Vec<PreparedScene>,
    pub num_classes: usize,
    /// All supervoxel descriptors stacked scene by scene.
    pub sv_features: Array2<f64>,
}

impl PreparedDataset {
    pub fn new(ds: &Dataset, cfg: &FeatureConfig) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("dataset has no scenes".into()));
        }
        let clouds: Vec<_> = ds.scenes.iter().map(|s| &s.cloud).collect();
        let feats = compute_dataset_features(&clouds, cfg.k_nn)?;
        let mut scenes = Vec::with_capacity(ds.len());
        for (scene, (normals, hand)) in ds.scenes.iter().zip(feats) {
            let sv = build_supervoxels(&scene.cloud, &normals, &hand, cfg.voxel_size, cfg.angle_thresh_deg)?;
            scenes.push(PreparedScene {
                x: hand.0,
                sv_features: sv.sv_features,
                sv_of_point: sv.sv_of_point,
                labels: scene.labels.clone(),
                gt: scene.cloud.gt_labels.clone(),
            });
        }
        let views: Vec<_> = scenes.iter().map(|s| s.sv_features.view()).collect();
        let sv_features = concatenate(Axis(0), &views).expect("descriptor widths agree");
        Ok(PreparedDataset {
            scenes,
            num_classes: ds.num_classes(),
            sv_features,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub primitives: Option<PrimitiveSet>,
    pub step: u64,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            primitives: self.primitives.as_ref().map(|p| p.centroids.clone()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        TrainedModel {
            model: ck.model,
            primitives: ck.primitives.map(|centroids| PrimitiveSet {
                centroids,
                epoch_computed: 0,
            }),
            step: ck.step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cam: f64,
    pub l_us: f64,
    pub l_match: f64,
    /// Scenes whose matching loss term was applied this epoch.
    pub matched_scene_fraction: f64,
    /// Scenes with fewer present primitives than classes this epoch.
    pub unmatchable_scenes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,l_cam,l_us,l_match,matched_scene_fraction";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.l_cam, r.l_us, r.l_match, r.matched_scene_fraction
            );
        }
        out
    }

    pub fn total_unmatchable(&self) -> usize {
        self.epochs.iter().map(|r| r.unmatchable_scenes).sum()
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds from the run seed.
pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_KMEANS: u64 = 1 << 20;
const TAG_GROUPS: u64 = 2 << 20;

/// Class assignment for one scene's primitives under the configured matcher.
pub fn match_scene(
    model: &Model,
    f: &Array2<f64>,
    prims: &PrimitiveSet,
    labels: &SceneLabels,
    matcher: Matcher,
) -> Result<(AssignmentMap, AffinityMatrix)> {
    let aff = assign_affinity(f, prims)?;
    match_with_affinity(model, f, prims, aff, labels, matcher)
}

/// As [`match_scene`], with the point-to-primitive affinity supplied.
pub fn match_with_affinity(
    model: &Model,
    f: &Array2<f64>,
    prims: &PrimitiveSet,
    aff: AffinityMatrix,
    labels: &SceneLabels,
    matcher: Matcher,
) -> Result<(AssignmentMap, AffinityMatrix)> {
    let (fbar, present) = primitive_scene_features(f, &aff, prims.len())?;
    let cm = build_cost_matrix(&fbar, &present, &model.classifier, labels)?;
    let map = match matcher {
        Matcher::Hungarian => hungarian_match(&cm)?,
        Matcher::Naive => naive_match(&cm),
    };
    Ok((map, aff))
}

/// Trains a fresh model on `data` with the configured schedule and losses.
pub fn train(data: &PreparedDataset, cfg: &TrainConfig) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate(data.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, TAG_INIT));
    let mut model = Model::init(NUM_HAND_FEATURES, cfg.hidden_dim, cfg.feature_dim, data.num_classes, &mut rng);
    let mut adam = AdamState::new(&model, cfg.lr, cfg.weight_decay);
    let mut prims: Option<PrimitiveSet> = None;
    let mut groups: Option<Vec<usize>> = None;
    let mut history = TrainHistory::default();
    let n = data.len() as f64;

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        if cfg.needs_primitives() && epoch % cfg.kmeans_period == 0 {
            let mut p = compute_primitives(
                &data.sv_features,
                &model.encoder,
                cfg.k,
                epoch < cfg.warmup_epochs,
                mix_seed(cfg.seed, TAG_KMEANS + epoch as u64),
                cfg.kmeans_max_iter,
            )?;
            p.epoch_computed = epoch;
            groups = if cfg.filter && cfg.losses.matching {
                Some(group_primitives(&p, cfg.group_count(), mix_seed(cfg.seed, TAG_GROUPS + epoch as u64))?)
            } else {
                None
            };
            prims = Some(p);
        }
        let match_active = cfg.losses.matching && epoch >= cfg.match_delay_epochs;
        let mut rec = EpochRecord {
            epoch,
            l_cam: 0.0,
            l_us: 0.0,
            l_match: 0.0,
            matched_scene_fraction: 0.0,
            unmatchable_scenes: 0,
        };
        let mut matched = 0usize;
        for scene in &data.scenes {
            let (hidden, f) = model.encoder.forward_trace(&scene.x)?;
            let s = model.classifier.classify(&f)?;
            let mut grad_s = Array2::zeros(s.dim());
            let mut grad_f = Array2::zeros(f.dim());
            if cfg.losses.cam {
                let (l, g) = loss_cam(&s, &scene.labels)?;
                rec.l_cam += l;
                grad_s.scaled_add(cfg.w_cam, &g);
            }
            if let Some(p) = prims.as_ref() {
                let aff = match cfg.affinity {
                    AffinityLevel::Point => assign_affinity(&f, p)?,
                    AffinityLevel::Supervoxel => {
                        let sv = assign_affinity(&model.encoder.forward(&scene.sv_features)?, p)?;
                        AffinityMatrix {
                            assign: scene.sv_of_point.iter().map(|&v| sv.assign[v]).collect(),
                        }
                    }
                };
                if cfg.losses.us {
                    let (l, g) = loss_us(&f, p, &aff, cfg.tau)?;
                    rec.l_us += l;
                    grad_f.scaled_add(cfg.w_us, &g);
                }
                if match_active {
                    match match_with_affinity(&model, &f, p, aff, &scene.labels, cfg.matcher) {
                        Ok((map, aff)) => {
                            let map = match groups.as_ref() {
                                Some(g) => filter_with_groups(&map, g),
                                None => map,
                            };
                            let pseudo = densify_labels(&map, &aff);
                            let (l, g) = loss_match(&s, &pseudo)?;
                            rec.l_match += l;
                            grad_s.scaled_add(cfg.w_match, &g);
                            if !map.pi.is_empty() {
                                matched += 1;
                            }
                        }
                        Err(Error::UnmatchableScene { .. }) => rec.unmatchable_scenes += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            let grads = model.backward_with(&scene.x, &hidden, &f, &grad_s, &grad_f)?;
            adam.step(&mut model, &grads);
        }
        rec.l_cam /= n;
        rec.l_us /= n;
        rec.l_match /= n;
        rec.matched_scene_fraction = matched as f64 / n;
        history.epochs.push(rec);
    }
    Ok((
        TrainedModel {
            model,
            primitives: prims,
            step: adam.step,
        },
        history,
    ))
}

/// Trains a fresh model with the dense loss only, against fixed per-scene
/// targets (`IGNORE` entries are skipped). History reports that loss in the
/// `l_match` column.
pub fn train_dense(data: &PreparedDataset, targets: &[PseudoLabels], cfg: &TrainConfig) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate(data.num_classes)?;
    if targets.len() != data.len() {
        return Err(Error::Shape(format!("{} target sets for {} scenes", targets.len(), data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, TAG_INIT));
    let mut model = Model::init(NUM_HAND_FEATURES, cfg.hidden_dim, cfg.feature_dim, data.num_classes, &mut rng);
    let mut adam = AdamState::new(&model, cfg.lr, cfg.weight_decay);
    let mut history = TrainHistory::default();
    let n = data.len() as f64;
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let mut total = 0.0;
        let mut used = 0usize;
        for (scene, target) in data.scenes.iter().zip(targets) {
            let (hidden, f) = model.encoder.forward_trace(&scene.x)?;
            let s = model.classifier.classify(&f)?;
            let (l, g) = loss_dense(&s, &target.0)?;
            total += l;
            if target.0.iter().any(|&t| t >= 0) {
                used += 1;
            }
            let grads = model.backward_with(&scene.x, &hidden, &f, &g, &Array2::zeros(f.dim()))?;
            adam.step(&mut model, &grads);
        }
        history.epochs.push(EpochRecord {
            epoch,
            l_cam: 0.0,
            l_us: 0.0,
            l_match: total / n,
            matched_scene_fraction: used as f64 / n,
            unmatchable_scenes: 0,
        });
    }
    Ok((
        TrainedModel {
            model,
            primitives: None,
            step: adam.step,
        },
        history,
    ))
}
