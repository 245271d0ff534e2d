//! On-disk scene files and the dataset manifest.
//!
//! Scene file (`WPC1`): 4-byte magic, `u32` LE point count `M`, then `M`
//! records of six LE `f32` (x, y, z, r, g, b) followed by one LE `i32`
//! label. Manifest: JSON `{"class_names": [...], "scenes": [{"path", "labels"}]}`
//! with paths relative to the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, PointCloud, Scene, SceneLabels};
use crate::error::{Error, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"WPC1";
const RECORD_BYTES: usize = 7 * 4;

pub fn encode_scene(cloud: &PointCloud) -> Vec<u8> {
    let m = cloud.len();
    let mut out = Vec::with_capacity(8 + m * RECORD_BYTES);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for i in 0..m {
        for v in cloud.positions[i].iter().chain(cloud.colors[i].iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(cloud.gt_labels[i] as i32).to_le_bytes());
    }
    out
}

/// Decodes a scene, rejecting labels outside `[0, num_classes)`.
pub fn decode_scene(bytes: &[u8], num_classes: usize) -> std::result::Result<PointCloud, String> {
    if bytes.len() < 8 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != SCENE_MAGIC {
        return Err(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])));
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if m == 0 {
        return Err("scene has zero points".into());
    }
    let expected = 8 + m * RECORD_BYTES;
    if bytes.len() < expected {
        return Err(format!("truncated: {} points need {expected} bytes, found {}", m, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(format!("{} trailing bytes after {m} records", bytes.len() - expected));
    }
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(m),
        colors: Vec::with_capacity(m),
        gt_labels: Vec::with_capacity(m),
    };
    for i in 0..m {
        let base = 8 + i * RECORD_BYTES;
        cloud.positions.push([f32_at(base), f32_at(base + 4), f32_at(base + 8)]);
        cloud.colors.push([f32_at(base + 12), f32_at(base + 16), f32_at(base + 20)]);
        let label = i32::from_le_bytes(bytes[base + 24..base + 28].try_into().unwrap());
        if label < 0 || label as usize >= num_classes {
            return Err(format!("label {label} out of range [0,{num_classes}) at point {i}"));
        }
        cloud.gt_labels.push(label as u32);
    }
    cloud.validate(num_classes)?;
    Ok(cloud)
}

pub fn write_scene(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_scene(cloud))?;
    Ok(())
}

pub fn read_scene(path: &Path, num_classes: usize) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_scene(&bytes, num_classes).map_err(|msg| Error::format(path, msg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub labels: Vec<u8>,
}

/// Writes every scene plus `manifest.json` into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, scene) in ds.scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.wpc");
        write_scene(&dir.join(&name), &scene.cloud)?;
        entries.push(ManifestEntry {
            path: name,
            labels: scene.labels.as_bits(),
        });
    }
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        scenes: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a dataset. Scene tags come from the manifest, not from the points.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read(manifest_path).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let c = manifest.class_names.len();
    if c == 0 {
        return Err(Error::format(manifest_path, "class_names is empty"));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        if entry.labels.len() != c || entry.labels.iter().any(|&b| b > 1) {
            return Err(Error::format(
                manifest_path,
                format!("scene {} labels must be {c} bits", entry.path),
            ));
        }
        let labels = SceneLabels {
            present: entry.labels.iter().map(|&b| b == 1).collect(),
        };
        if !labels.present.iter().any(|&p| p) {
            return Err(Error::format(manifest_path, format!("scene {} has no labels", entry.path)));
        }
        let cloud = read_scene(&root.join(&entry.path), c)?;
        scenes.push(Scene { cloud, labels });
    }
    Ok(Dataset {
        scenes,
        class_names: manifest.class_names,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneSpec};
    use proptest::prelude::*;

    fn scene() -> PointCloud {
        generate_scene(&SceneSpec::default(), 5).unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wpc");
        let pc = scene();
        write_scene(&path, &pc).unwrap();
        assert_eq!(read_scene(&path, 6).unwrap(), pc);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_scene(&scene());
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(decode_scene(&bytes, 6).unwrap_err().contains("magic"));
    }

    #[test]
    fn rejects_zero_points() {
        let mut bytes = SCENE_MAGIC.to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(decode_scene(&bytes, 6).unwrap_err().contains("zero"));
    }

    #[test]
    fn rejects_truncated_record() {
        let bytes = encode_scene(&scene());
        assert!(decode_scene(&bytes[..bytes.len() - 3], 6).unwrap_err().contains("truncated"));
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut bytes = encode_scene(&scene());
        let off = 8 + 24;
        bytes[off..off + 4].copy_from_slice(&9i32.to_le_bytes());
        assert!(decode_scene(&bytes, 6).unwrap_err().contains("out of range"));
        bytes[off..off + 4].copy_from_slice(&(-1i32).to_le_bytes());
        assert!(decode_scene(&bytes, 6).is_err());
    }

    #[test]
    fn read_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.wpc");
        fs::write(&path, b"WPC1\x05").unwrap();
        let msg = read_scene(&path, 6).unwrap_err().to_string();
        assert!(msg.contains("broken.wpc"), "{msg}");
    }

    #[test]
    fn dataset_round_trip() {
        let ds = crate::scenegen::generate_dataset(
            3,
            &crate::scenegen::CooccurPolicy::Free,
            &SceneSpec {
                points_per_object: 20,
                ..SceneSpec::default()
            },
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back.scenes, ds.scenes);
        assert_eq!(back.class_names, ds.class_names);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            pts in prop::collection::vec(
                (prop::array::uniform3(-50.0f32..50.0), prop::array::uniform3(0.0f32..=1.0), 0u32..6),
                1..40,
            )
        ) {
            let pc = PointCloud {
                positions: pts.iter().map(|p| p.0).collect(),
                colors: pts.iter().map(|p| p.1).collect(),
                gt_labels: pts.iter().map(|p| p.2).collect(),
            };
            prop_assert_eq!(decode_scene(&encode_scene(&pc), 6).unwrap(), pc);
        }
    }
}
