//! Run configuration: a JSON file plus command-line overrides, resolved once
//! and written back to `<out>/resolved_config.json` so any run can be
//! replayed from that single file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ssattn_core::model::{ModelConfig, TrainConfig};
use ssattn_core::raingen::GenConfig;

pub const SEED_ENV: &str = "SSATTN_SEED";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Resolved seed; flag > config file > SSATTN_SEED env > 0.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub gen: GenSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub visualize: VizSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSection {
    #[serde(flatten)]
    pub config: GenConfig,
    /// Number of (clean, rain) pairs to generate.
    pub count: usize,
}

impl Default for GenSection {
    fn default() -> GenSection {
        GenSection {
            config: GenConfig::default(),
            count: 20,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub params: TrainConfig,
    /// Directory holding the training pairs (a mode directory with manifest).
    pub data_dir: PathBuf,
    /// Optional held-out set evaluated after training (used by sweeps and
    /// the ablation table).
    pub test_data_dir: Option<PathBuf>,
    /// Ablation switches: no-ud, no-rs, ssa-no-ud, ssa-no-rs, lr-no-ud,
    /// lr-no-rs (comma separated on the command line).
    pub ablate: Vec<String>,
    /// Attention variant in the sampling slot: ssa | wsa | csa | sa.
    pub attn: String,
    /// Parameter sweep spec: `name=start:end:count` over beta/gamma/alpha/k.
    pub sweep: Option<String>,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            params: TrainConfig::default(),
            data_dir: PathBuf::from("data/rds"),
            test_data_dir: None,
            ablate: Vec::new(),
            attn: "ssa".to_string(),
            sweep: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection {
            checkpoint: PathBuf::from("runs/train/checkpoint.bin"),
            data_dir: PathBuf::from("data/rds-test"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VizSection {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Decoder stage whose sampling is drawn (0 = coarsest).
    pub stage: usize,
    /// Window index (row-major at the stage's resolution).
    pub window: usize,
}

impl Default for VizSection {
    fn default() -> VizSection {
        VizSection {
            checkpoint: PathBuf::from("runs/train/checkpoint.bin"),
            image: PathBuf::from("input.png"),
            stage: 2,
            window: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let json = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Ok(serde_json::from_str(&json)?)
    }

    /// Seed resolution: explicit value, then the environment, then zero.
    pub fn resolved_seed(&self) -> u64 {
        if let Some(s) = self.seed {
            return s;
        }
        std::env::var(SEED_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }

    /// Pins the seed and writes the replayable config into the out dir.
    pub fn finalize(&mut self, out_dir: &Path) -> Result<()> {
        self.seed = Some(self.resolved_seed());
        self.out_dir = out_dir.to_path_buf();
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("resolved_config.json"), json)?;
        Ok(())
    }
}
