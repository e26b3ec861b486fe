//! Command implementations. Each takes a resolved [`RunConfig`], works under
//! its `out_dir`, and returns a summary the binary prints.

mod eval;
mod gen_data;
mod gradcheck;
mod train;
mod visualize;

pub use eval::{cmd_eval, evaluate_pairs};
pub use gen_data::{cmd_gen_data, GenSummary};
pub use gradcheck::cmd_gradcheck;
pub use train::{cmd_train, SweepPoint, TrainSummary};
pub use visualize::cmd_visualize;

use anyhow::{bail, Result};
use ssattn_core::attention::{IrmAblation, SamplingVariant};
use ssattn_core::model::{Model, ModelConfig};
use ssattn_core::params::ParamStore;
use ssattn_core::rng::rng_from_seed;

use crate::config::RunConfig;

/// Parses the comma-separated ablation switches. `no-ud` and `no-rs` are the
/// short names for the sampling-side and local-side ranking ablations.
pub fn parse_ablations(switches: &[String]) -> Result<IrmAblation> {
    let mut abl = IrmAblation::default();
    for s in switches {
        for part in s.split(',').filter(|p| !p.is_empty()) {
            match part.trim() {
                "no-ud" | "ssa-no-ud" => abl.ssa_no_ud = true,
                "no-rs" | "lr-no-rs" => abl.lr_no_rs = true,
                "ssa-no-rs" => abl.ssa_no_rs = true,
                "lr-no-ud" => abl.lr_no_ud = true,
                other => bail!("unknown ablation switch '{other}'"),
            }
        }
    }
    Ok(abl)
}

/// Builds the model with seed-determined initialization.
pub fn build_model(cfg: &RunConfig, model_cfg: &ModelConfig) -> Result<(ParamStore, Model)> {
    let variant: SamplingVariant = cfg.train.attn.parse()?;
    let mut rng = rng_from_seed(cfg.resolved_seed());
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, model_cfg, variant, &mut rng)?;
    Ok((store, model))
}
