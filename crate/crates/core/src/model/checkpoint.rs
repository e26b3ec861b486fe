//! Flat binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SSATTNC1"
//! version  u32      currently 1
//! digest   u64      FNV-1a of the canonical model-config JSON
//! count    u32      number of parameter records
//! then per parameter, in registration order:
//!   name_len u32, name bytes (utf-8),
//!   ndim u32, dims u64 * ndim,
//!   data f64 * product(dims)
//! ```
//!
//! The digest pins a checkpoint to the architecture that wrote it; loading
//! into a differently configured model is a config error, not a crash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::ModelConfig;

const MAGIC: &[u8; 8] = b"SSATTNC1";
const VERSION: u32 = 1;

/// FNV-1a over the canonical config JSON.
pub fn config_digest(cfg: &ModelConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("model config serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, digest: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&digest.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore, digest: u64) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::config(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::config(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let found = read_u64(&mut r)?;
    if found != digest {
        return Err(Error::config(
            "checkpoint was written by a different model configuration",
        ));
    }
    let count = read_u32(&mut r)? as usize;
    if count != store.len() {
        return Err(Error::config(format!(
            "checkpoint has {count} parameters, model expects {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::config("checkpoint parameter name is not utf-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut n = 1usize;
        for _ in 0..ndim {
            n *= read_u64(&mut r)? as usize;
        }
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.load(&name, data)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::SamplingVariant;
    use crate::model::Model;
    use crate::rng::rng_from_seed;

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("ssattn-ckpt-{tag}-{}", std::process::id()))
    }

    #[test]
    fn roundtrip_restores_every_parameter() {
        let cfg = ModelConfig {
            levels: 2,
            channels: vec![4, 8],
            irm_blocks: vec![1, 1],
            heads: vec![1, 2],
            latent_blocks: 1,
            latent_heads: 2,
            window_side: 2,
            ..ModelConfig::default()
        };
        let mut rng = rng_from_seed(3);
        let mut store = ParamStore::new();
        let _model = Model::new(&mut store, &cfg, SamplingVariant::Ssa, &mut rng).unwrap();
        let digest = config_digest(&cfg);
        let path = temp_path("roundtrip");
        save_checkpoint(&path, &store, digest).unwrap();

        let mut rng2 = rng_from_seed(999);
        let mut store2 = ParamStore::new();
        let _model2 = Model::new(&mut store2, &cfg, SamplingVariant::Ssa, &mut rng2).unwrap();
        load_checkpoint(&path, &mut store2, digest).unwrap();
        for ((_, n1, v1), (_, n2, v2)) in store.iter().zip(store2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.data(), v2.data());
        }

        // wrong digest is rejected
        assert!(load_checkpoint(&path, &mut store2, digest ^ 1).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn digest_tracks_config_changes() {
        let a = ModelConfig::default();
        let mut b = ModelConfig::default();
        b.window_side = 8;
        assert_ne!(config_digest(&a), config_digest(&b));
        assert_eq!(config_digest(&a), config_digest(&ModelConfig::default()));
    }
}
