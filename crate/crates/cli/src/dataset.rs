//! Dataset directory layout: `<root>/<mode>/<index>_clean.png` and
//! `<index>_rain.png` pairs plus a `manifest.json` recording the generator
//! configuration and per-sample metadata.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ssattn_core::raingen::{clamp01, generate_scene, GenConfig};
use ssattn_core::tensor::Tensor;

use crate::pngio::{load_png, save_png};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub count: usize,
    pub samples: Vec<SampleMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: u64,
    pub clean: String,
    pub rain: String,
    pub eta: f64,
    /// Number of raindrop-mask pixels; zero in streak-only scenes.
    pub drop_pixels: usize,
    /// Total streak-map mass; zero in drop-only scenes.
    pub streak_energy: f64,
}

/// Generates `count` pairs under `<root>/<mode>/` and writes the manifest.
pub fn write_dataset(root: &Path, gen: &GenConfig, count: usize) -> Result<Manifest> {
    let dir = root.join(gen.mode.dir_name());
    std::fs::create_dir_all(&dir)?;
    let mut samples = Vec::with_capacity(count);
    for index in 0..count as u64 {
        let scene = generate_scene(gen, index)?;
        let clean_name = format!("{index}_clean.png");
        let rain_name = format!("{index}_rain.png");
        save_png(&dir.join(&clean_name), &clamp01(&scene.background))?;
        save_png(&dir.join(&rain_name), &clamp01(&scene.degraded))?;
        samples.push(SampleMeta {
            index,
            clean: clean_name,
            rain: rain_name,
            eta: scene.eta,
            drop_pixels: scene.drop_mask.data().iter().filter(|&&v| v > 0.0).count(),
            streak_energy: scene.streaks.data().iter().sum(),
        });
    }
    let manifest = Manifest {
        config: gen.clone(),
        count,
        samples,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Directory a mode's files live in.
pub fn mode_dir(root: &Path, gen: &GenConfig) -> PathBuf {
    root.join(gen.mode.dir_name())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&json)?)
}

/// Loads all (rain, clean) pairs in manifest order.
pub fn load_pairs(dir: &Path) -> Result<Vec<(Tensor, Tensor)>> {
    let manifest = read_manifest(dir)?;
    if manifest.samples.len() != manifest.count {
        bail!(
            "manifest claims {} samples but lists {}",
            manifest.count,
            manifest.samples.len()
        );
    }
    manifest
        .samples
        .iter()
        .map(|s| {
            let rain = load_png(&dir.join(&s.rain))?;
            let clean = load_png(&dir.join(&s.clean))?;
            Ok((rain, clean))
        })
        .collect()
}
