//! Dataset directories: one image file per sample plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use microdiff::io::{read_microstructure, write_microstructure};
use microdiff::synth::{generate_dataset, GenSpec};
use microdiff::{Error, Microstructure};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub seed: u64,
    pub volume_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: GenSpec,
    pub label: Option<usize>,
    pub items: Vec<ManifestItem>,
}

/// File name for image `index` of a microstructure with `dims` axes.
pub fn image_name(prefix: &str, index: usize, dims: usize) -> String {
    let ext = if dims == 2 { "pgm" } else { "raw" };
    format!("{prefix}_{index:05}.{ext}")
}

/// Generate `count` samples from `spec` into `dir`.
pub fn write_dataset(dir: &Path, spec: &GenSpec, count: usize, label: Option<usize>) -> Result<Manifest> {
    spec.validate()?;
    let samples = generate_dataset(spec, count)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut items = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = image_name("sample", i, s.microstructure.dims());
        write_microstructure(&dir.join(&file), &s.microstructure)?;
        items.push(ManifestItem {
            file,
            seed: s.seed,
            volume_fraction: s.microstructure.volume_fraction(),
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        label,
        items,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub struct LoadedData {
    pub images: Vec<Microstructure>,
    pub labels: Option<Vec<usize>>,
}

/// Load and concatenate dataset directories. Either every directory carries
/// a label or none does.
pub fn load_datasets(dirs: &[PathBuf]) -> Result<LoadedData> {
    if dirs.is_empty() {
        return Err(Error::Invalid("no dataset directories given".into()).into());
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut labelled = None;
    for dir in dirs {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match (labelled, m.label.is_some()) {
            (None, l) => labelled = Some(l),
            (Some(a), b) if a != b => {
                return Err(Error::Invalid("cannot mix labelled and unlabelled datasets".into()).into())
            }
            _ => {}
        }
        for item in &m.items {
            let ms = read_microstructure(&dir.join(&item.file), m.spec.periodic)
                .with_context(|| format!("reading {}", item.file))?;
            if let Some(first) = images.first() {
                let first: &Microstructure = first;
                if first.shape() != ms.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: first.shape().to_vec(),
                        actual: ms.shape().to_vec(),
                    }
                    .into());
                }
            }
            images.push(ms);
            if let Some(l) = m.label {
                labels.push(l);
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Invalid("datasets contain no images".into()).into());
    }
    Ok(LoadedData {
        images,
        labels: (labelled == Some(true)).then_some(labels),
    })
}
