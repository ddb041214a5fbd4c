//! On-disk dataset layout: images/, annotations/, manifest.json.

use std::fs;
use std::path::{Path, PathBuf};

use sonoqa_core::anatomy::Section;
use sonoqa_core::eval::EvalSample;
use sonoqa_core::phantom::{
    generate_dataset_into, sample_paths, AnnotationFile, DatasetConfig, Manifest, ManifestEntry,
    Split,
};

use crate::imageio;
use crate::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Generate a dataset under `out`, streaming each sample to disk, and
/// write the manifest. Returns the manifest.
pub fn write_dataset(
    config: &DatasetConfig,
    seed: u64,
    out: &Path,
    image_ext: &str,
) -> CliResult<Manifest> {
    if image_ext != "png" && image_ext != "pgm" {
        return Err(CliError::Usage(format!("unsupported image format '{image_ext}'")));
    }
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("annotations"))?;

    let mut entries = Vec::new();
    generate_dataset_into(config, seed, |planned, sample| {
        let (image_rel, ann_rel) = sample_paths(planned.section, planned.index, image_ext);
        let image_path = out.join(&image_rel);
        let ann_path = out.join(&ann_rel);
        // the closure reports core errors; IO errors are wrapped below
        imageio::write_image(&image_path, &sample.image)
            .map_err(|e| sonoqa_core::Error::Data(e.to_string()))?;
        let file = sample.annotation_file(image_rel.clone());
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| sonoqa_core::Error::Data(e.to_string()))?;
        fs::write(&ann_path, json).map_err(|e| sonoqa_core::Error::Data(e.to_string()))?;
        entries.push(ManifestEntry {
            image: image_rel,
            annotation: ann_rel,
            section: planned.section,
            split: planned.split,
        });
        Ok(())
    })?;

    let manifest =
        Manifest { version: 1, seed, image_size: config.image_size, samples: entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Data(format!("manifest encode: {e}")))?;
    fs::write(out.join(MANIFEST_NAME), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let raw = fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| CliError::Data(format!("corrupt manifest {}: {e}", path.display())))
}

/// One loaded sample with its split and section.
pub struct LoadedSample {
    pub section: Section,
    pub split: Split,
    pub sample: EvalSample,
}

/// Load every sample of the requested split (all splits when None).
pub fn load_split(dir: &Path, manifest: &Manifest, split: Option<Split>) -> CliResult<Vec<LoadedSample>> {
    let mut out = Vec::new();
    for entry in &manifest.samples {
        if split.is_some_and(|s| s != entry.split) {
            continue;
        }
        let image = imageio::read_image(&dir.join(&entry.image))?;
        let ann_path: PathBuf = dir.join(&entry.annotation);
        let raw = fs::read_to_string(&ann_path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", ann_path.display())))?;
        let file: AnnotationFile = serde_json::from_str(&raw)
            .map_err(|e| CliError::Data(format!("corrupt annotation {}: {e}", ann_path.display())))?;
        if file.section != entry.section {
            return Err(CliError::Data(format!(
                "{}: annotation section disagrees with manifest",
                ann_path.display()
            )));
        }
        out.push(LoadedSample {
            section: entry.section,
            split: entry.split,
            sample: EvalSample {
                image,
                section: file.section,
                annotations: file.annotations()?,
                plane_standard: file.plane_standard(),
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_load_roundtrip_and_split_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { head: 10, abdominal: 5, heart: 5, ..DatasetConfig::default() };
        let manifest = write_dataset(&cfg, 9, dir.path(), "png").unwrap();
        assert_eq!(manifest.samples.len(), 20);

        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, manifest);

        let train = load_split(dir.path(), &manifest, Some(Split::Train)).unwrap();
        let val = load_split(dir.path(), &manifest, Some(Split::Val)).unwrap();
        let test = load_split(dir.path(), &manifest, Some(Split::Test)).unwrap();
        // per-section 3:1:1: head 6/2/2, abdominal 3/1/1, heart 3/1/1
        assert_eq!((train.len(), val.len(), test.len()), (12, 4, 4));
        for s in &train {
            assert!(!s.sample.annotations.is_empty());
        }
    }

    #[test]
    fn regenerating_gives_identical_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { head: 5, abdominal: 0, heart: 0, ..DatasetConfig::default() };
        write_dataset(&cfg, 4, dir_a.path(), "png").unwrap();
        write_dataset(&cfg, 4, dir_b.path(), "png").unwrap();
        for name in ["manifest.json", "images/head_0003.png", "annotations/head_0003.json"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }
}
