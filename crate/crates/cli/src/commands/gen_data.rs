//! `ssattn gen-data`: paired synthetic rain scenes on disk.

use std::path::PathBuf;

use anyhow::Result;

use crate::config::RunConfig;
use crate::dataset::{write_dataset, Manifest};

pub struct GenSummary {
    pub dir: PathBuf,
    pub count: usize,
    pub manifest: Manifest,
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenSummary> {
    let mut cfg = cfg.clone();
    let out = cfg.out_dir.clone();
    cfg.gen.config.seed = cfg.resolved_seed();
    cfg.finalize(&out)?;
    let manifest = write_dataset(&out, &cfg.gen.config, cfg.gen.count)?;
    Ok(GenSummary {
        dir: out.join(cfg.gen.config.mode.dir_name()),
        count: cfg.gen.count,
        manifest,
    })
}
