use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{argmax_rows, evaluate, train, train_dense, LossToggles, Matcher, PreparedDataset, TrainConfig, TrainHistory, TrainedModel};
use super::eval::EvalReport;
use crate::error::Result;
use crate::matching::{PseudoLabels, IGNORE};
use crate::scenegen::{has_perfect_pair_list, subset_cooccurrence, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    pub before: EvalReport,
    pub after: EvalReport,
    pub model: TrainedModel,
    pub history: TrainHistory,
    /// Per-scene retraining targets (`IGNORE` where the prediction was dropped).
    pub targets: Vec<PseudoLabels>,
    pub kept_fraction: f64,
}

/// Keeps each point's predicted class when the scene tags contain it, then
/// trains a fresh model on the kept labels with the dense loss alone.
pub fn bootstrap(trained: &TrainedModel, data: &PreparedDataset, cfg: &TrainConfig) -> Result<BootstrapOutcome> {
    let before = evaluate(trained, data)?;
    let mut targets = Vec::with_capacity(data.len());
    let (mut kept, mut total) = (0usize, 0usize);
    for scene in &data.scenes {
        let (_, s) = trained.model.predict(&scene.x)?;
        let labels: Vec<i32> = argmax_rows(&s)
            .into_iter()
            .map(|c| if scene.labels.contains(c) { c as i32 } else { IGNORE })
            .collect();
        kept += labels.iter().filter(|&&l| l != IGNORE).count();
        total += labels.len();
        targets.push(PseudoLabels(labels));
    }
    let (model, history) = train_dense(data, &targets, cfg)?;
    let after = evaluate(&model, data)?;
    Ok(BootstrapOutcome {
        before,
        after,
        model,
        history,
        targets,
        kept_fraction: if total == 0 { 0.0 } else { kept as f64 / total as f64 },
    })
}

/// True when no kept label names a class outside its scene's tag set.
pub fn kept_labels_are_sound(targets: &[PseudoLabels], data: &PreparedDataset) -> bool {
    targets.len() == data.len()
        && targets.iter().zip(&data.scenes).all(|(t, s)| {
            t.0.len() == s.x.nrows() && t.0.iter().all(|&l| l == IGNORE || (l >= 0 && s.labels.contains(l as usize)))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub k_sweep: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2, 3, 4],
            k_sweep: vec![8, 16, 48, 96],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub k: usize,
    pub miou_per_seed: Vec<f64>,
    pub miou_median: f64,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,k,miou_median,miou_per_seed";

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let per_seed: Vec<String> = r.miou_per_seed.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{},{},{},{}", r.variant, r.k, r.miou_median, per_seed.join(";"));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const VARIANT_CAM: &str = "cam";
pub const VARIANT_CAM_US: &str = "cam+us";
pub const VARIANT_CAM_MATCH: &str = "cam+match";
pub const VARIANT_NAIVE: &str = "cam+us+match(naive)";
pub const VARIANT_FULL: &str = "cam+us+match(hungarian)";

fn loss_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |cam, us, matching, matcher| TrainConfig {
        losses: LossToggles { cam, us, matching },
        matcher,
        ..base.clone()
    };
    vec![
        (VARIANT_CAM.into(), with(true, false, false, base.matcher)),
        (VARIANT_CAM_US.into(), with(true, true, false, base.matcher)),
        (VARIANT_CAM_MATCH.into(), with(true, false, true, Matcher::Hungarian)),
        (VARIANT_NAIVE.into(), with(true, true, true, Matcher::Naive)),
        (VARIANT_FULL.into(), with(true, true, true, Matcher::Hungarian)),
    ]
}

/// Trains every loss variant and every K of the sweep (full losses, Hungarian
/// matching) once per seed. Identical configurations are trained once.
pub fn ablate(data: &PreparedDataset, base: &TrainConfig, abl: &AblationConfig) -> Result<AblationTable> {
    let mut variants = loss_variants(base);
    let full = variants.last().expect("five variants").1.clone();
    for &k in &abl.k_sweep {
        variants.push((format!("K={k}"), TrainConfig { k, ..full.clone() }));
    }
    let mut cache: HashMap<String, EvalReport> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        let mut reports = Vec::with_capacity(abl.seeds.len());
        for &seed in &abl.seeds {
            let run = TrainConfig { seed, ..cfg.clone() };
            let key = serde_json::to_string(&run)?;
            let report = match cache.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let (model, _) = train(data, &run)?;
                    let r = evaluate(&model, data)?;
                    cache.insert(key, r.clone());
                    r
                }
            };
            reports.push(report);
        }
        let per_seed: Vec<f64> = reports.iter().map(|r| r.miou).collect();
        rows.push(AblationRow {
            variant: name,
            k: cfg.k,
            miou_median: median(&per_seed),
            miou_per_seed: per_seed,
            reports,
        });
    }
    Ok(AblationTable {
        seeds: abl.seeds.clone(),
        rows,
    })
}

/// `counts[a][b]`: scenes tagged with both `a` and `b`; the diagonal holds
/// per-class scene counts.
pub fn cooccurrence_matrix(ds: &Dataset) -> Vec<Vec<usize>> {
    let subsets: Vec<Vec<bool>> = ds.scenes.iter().map(|s| s.labels.present.clone()).collect();
    subset_cooccurrence(&subsets, ds.num_classes())
}

/// Class pairs that appear in exactly the same scenes.
pub fn detect_perfect_cooccurrence(counts: &[Vec<usize>]) -> Vec<(usize, usize)> {
    has_perfect_pair_list(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{break_cooccurrence, generate_dataset, CooccurPolicy, SceneSpec};
    use crate::trainer::tests::small_data;

    fn spec() -> SceneSpec {
        SceneSpec {
            points_per_object: 20,
            objects_per_class: 1,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn forced_pair_is_detected_and_broken() {
        let ds = generate_dataset(10, &CooccurPolicy::Forced(vec![0, 1]), &spec(), 2).unwrap();
        let counts = cooccurrence_matrix(&ds);
        assert_eq!(counts[0][1], 10);
        assert_eq!(counts[0][0], 10);
        assert_eq!(counts[1][1], 10);
        assert_eq!(detect_perfect_cooccurrence(&counts), vec![(0, 1)]);
        let fixed = break_cooccurrence(&ds, 0, 1, 5).unwrap();
        assert!(detect_perfect_cooccurrence(&cooccurrence_matrix(&fixed)).is_empty());
    }

    #[test]
    fn cooccurrence_is_symmetric() {
        let ds = generate_dataset(8, &CooccurPolicy::Free, &spec(), 4).unwrap();
        let c = cooccurrence_matrix(&ds);
        for a in 0..c.len() {
            for b in 0..c.len() {
                assert_eq!(c[a][b], c[b][a]);
            }
        }
        assert!(detect_perfect_cooccurrence(&c).is_empty());
    }

    #[test]
    fn disjoint_and_empty_counts() {
        let counts = vec![vec![2, 0], vec![0, 3]];
        assert!(detect_perfect_cooccurrence(&counts).is_empty());
        assert!(detect_perfect_cooccurrence(&[]).is_empty());
        assert!(detect_perfect_cooccurrence(&[vec![0, 0], vec![0, 0]]).is_empty());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            k: 8,
            warmup_epochs: 1,
            match_delay_epochs: 1,
            hidden_dim: 4,
            feature_dim: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_rows() {
        let data = small_data();
        let abl = AblationConfig {
            seeds: vec![0, 1, 2],
            k_sweep: vec![6, 8],
        };
        let table = ablate(&data, &tiny(), &abl).unwrap();
        let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, vec![VARIANT_CAM, VARIANT_CAM_US, VARIANT_CAM_MATCH, VARIANT_NAIVE, VARIANT_FULL, "K=6", "K=8"]);
        for r in &table.rows {
            assert_eq!(r.miou_per_seed.len(), 3);
            assert_eq!(r.miou_median, median(&r.miou_per_seed));
        }
        // K=8 is the full configuration again.
        assert_eq!(table.row("K=8").unwrap().miou_per_seed, table.row(VARIANT_FULL).unwrap().miou_per_seed);
        assert_eq!(table.to_csv().lines().count(), 8);
    }

    #[test]
    fn bootstrap_keeps_only_tagged_classes() {
        let data = small_data();
        let (model, _) = train(&data, &tiny()).unwrap();
        let out = bootstrap(&model, &data, &tiny()).unwrap();
        assert!(kept_labels_are_sound(&out.targets, &data));
        assert!((0.0..=1.0).contains(&out.kept_fraction));
        assert_eq!(out.history.epochs.len(), 2);
    }

    #[test]
    fn bootstrap_with_all_classes_tagged_keeps_everything() {
        let mut data = small_data();
        for s in &mut data.scenes {
            s.labels.present = vec![true; data.num_classes];
        }
        let (model, _) = train(&data, &tiny()).unwrap();
        let out = bootstrap(&model, &data, &tiny()).unwrap();
        assert_eq!(out.kept_fraction, 1.0);
    }
}
