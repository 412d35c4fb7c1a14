//! Single-file training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DSCKPT01"
//! version    u32      currently 1
//! dtype      u8       element width in bytes (4 = f32, 8 = f64)
//! config     u32 len + TOML snapshot of the TrainConfig
//! iteration  u64
//! sampler    u64 ×4   epoch_a, pos_a, epoch_b, pos_b
//! params     u32 count, then per entry (sorted by name):
//!              name   u32 len + UTF-8 bytes
//!              shape  u32 ndim + u64 ×ndim
//!              data   len·dtype raw bytes
//! optimizers 3 blocks (generator, disc A, disc B), each:
//!              t      u64
//!              slots  u32 count, then per entry (sorted by name):
//!                       name, shape as above, m bytes, v bytes
//! ```
//!
//! Saves go through a sibling `.tmp` file plus rename, so a process killed
//! mid-write never leaves a truncated checkpoint under the final name.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;

use crate::bytes::{put_array, put_str, put_u32, put_u64, Reader};
use crate::config::{Seeder, TrainConfig};
use crate::data::{BatchSampler, SamplerState};
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::tensor::Element;
use crate::train::{Adam, TrainState};

const MAGIC: &[u8; 8] = b"DSCKPT01";
const VERSION: u32 = 1;

fn put_adam<F: Element>(out: &mut Vec<u8>, opt: &Adam<F>) {
    put_u64(out, opt.t);
    put_u32(out, opt.slots().len() as u32);
    for (name, (m, v)) in opt.slots() {
        put_str(out, name);
        put_array(out, m);
        put_array(out, v);
    }
}

fn read_adam<F: Element>(r: &mut Reader, beta1: f64, beta2: f64) -> Result<Adam<F>> {
    let t = r.u64()?;
    let n = r.u32()? as usize;
    let mut slots = BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let m = r.array()?;
        let v = r.array()?;
        slots.insert(name, (m, v));
    }
    Ok(Adam::restore(beta1, beta2, t, slots))
}

/// Element width (4 = f32, 8 = f64) stored in a checkpoint, read from the
/// header without loading the payload.
pub fn checkpoint_dtype(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut head = [0u8; 13];
    let mut file = std::fs::File::open(path)?;
    file.read_exact(&mut head).map_err(|_| {
        Error::Checkpoint(format!("{} is too short to be a checkpoint", path.display()))
    })?;
    if &head[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    Ok(head[12] as usize)
}

pub fn checkpoint_save<F: Element>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(F::BYTES as u8);
    put_str(&mut out, &state.cfg.to_toml());
    put_u64(&mut out, state.iteration);
    put_u64(&mut out, state.sampler.state_a.epoch);
    put_u64(&mut out, state.sampler.state_a.pos);
    put_u64(&mut out, state.sampler.state_b.epoch);
    put_u64(&mut out, state.sampler.state_b.pos);

    let mut params = state.bundle.all_params();
    params.sort_by(|a, b| a.name().cmp(b.name()));
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_str(&mut out, p.name());
        put_array(&mut out, &p.data);
    }
    put_adam(&mut out, &state.opt_g);
    put_adam(&mut out, &state.opt_d_a);
    put_adam(&mut out, &state.opt_d_b);

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load<F: Element>(path: &Path) -> Result<TrainState<F>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);

    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic {:02x?})",
            path.display(),
            magic
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let dtype = r.u8()? as usize;
    if dtype != F::BYTES {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {}-byte elements but {} ({} bytes) was requested",
            dtype,
            F::DTYPE,
            F::BYTES
        )));
    }
    let cfg = TrainConfig::from_toml(&r.str()?)?;
    let iteration = r.u64()?;
    let state_a = SamplerState {
        epoch: r.u64()?,
        pos: r.u64()?,
    };
    let state_b = SamplerState {
        epoch: r.u64()?,
        pos: r.u64()?,
    };

    // Rebuild the model shell, then overwrite every tensor by name so the
    // stored values land on structurally identical parameters.
    let mut bundle: ModelBundle<F> = ModelBundle::init(&cfg);
    let mut by_name: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
    let n_params = r.u32()? as usize;
    for _ in 0..n_params {
        let name = r.str()?;
        let data = r.array()?;
        if by_name.insert(name.clone(), data).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    let mut live = bundle.all_params_mut();
    if live.len() != n_params {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model built from its config has {}",
            n_params,
            live.len()
        )));
    }
    for p in live.iter_mut() {
        let stored = by_name.remove(p.name()).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter {}", p.name()))
        })?;
        if stored.shape() != p.data.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in checkpoint, expected {:?}",
                p.name(),
                stored.shape(),
                p.data.shape()
            )));
        }
        p.data = stored;
    }

    let opt_g = read_adam(&mut r, cfg.adam_beta1, cfg.adam_beta2)?;
    let opt_d_a = read_adam(&mut r, cfg.adam_beta1, cfg.adam_beta2)?;
    let opt_d_b = read_adam(&mut r, cfg.adam_beta1, cfg.adam_beta2)?;
    if !r.done() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            r.remaining()
        )));
    }

    let sampler = BatchSampler::restore(Seeder::new(cfg.seed), cfg.random_crop, state_a, state_b);
    Ok(TrainState {
        bundle,
        iteration,
        opt_g,
        opt_d_a,
        opt_d_b,
        sampler,
        cfg,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::train::train_step;
    use crate::types::{Domain, ImageBatch};

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            image_height: 32,
            image_width: 64,
            base_width: 4,
            batch_size: 1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn batch<F: Element>(cfg: &TrainConfig, domain: Domain, seed: u64) -> ImageBatch<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.batch_size, cfg.image_height, cfg.image_width, 3];
        let data = ArrayD::from_shape_fn(IxDyn(&shape), |_| F::f(rng.gen_range(-0.9..0.9)));
        ImageBatch::new(data, domain).unwrap()
    }

    fn trained_state(cfg: &TrainConfig) -> TrainState<f64> {
        let mut state = TrainState::new(cfg);
        let x_a = batch(cfg, Domain::Adverse, 1);
        let x_b = batch(cfg, Domain::Normal, 2);
        train_step(&mut state, &x_a, &x_b, cfg).unwrap();
        state.sampler.state_a.pos = 5;
        state.sampler.state_b.epoch = 2;
        state
    }

    #[test]
    fn round_trip_restores_everything_bitwise() {
        let cfg = toy_cfg();
        let state = trained_state(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        checkpoint_save(&state, &path).unwrap();
        let loaded: TrainState<f64> = checkpoint_load(&path).unwrap();

        assert_eq!(loaded.iteration, state.iteration);
        assert_eq!(loaded.cfg, state.cfg);
        assert_eq!(loaded.sampler.state_a, state.sampler.state_a);
        assert_eq!(loaded.sampler.state_b, state.sampler.state_b);
        let orig = state.bundle.all_params();
        let back = loaded.bundle.all_params();
        assert_eq!(orig.len(), back.len());
        for (a, b) in orig.iter().zip(back.iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.data, b.data, "parameter {} drifted", a.name());
        }
        assert_eq!(loaded.opt_g.t, state.opt_g.t);
        assert_eq!(loaded.opt_g.slots(), state.opt_g.slots());
        assert_eq!(loaded.opt_d_a.slots(), state.opt_d_a.slots());
        assert_eq!(loaded.opt_d_b.slots(), state.opt_d_b.slots());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let err = checkpoint_load::<f64>(&path).err().unwrap();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let cfg = toy_cfg();
        let state = TrainState::<f64>::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        checkpoint_save(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = checkpoint_load::<f64>(&path).err().unwrap();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let cfg = toy_cfg();
        let state = TrainState::<f32>::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        checkpoint_save(&state, &path).unwrap();
        let err = checkpoint_load::<f64>(&path).err().unwrap();
        assert!(err.to_string().contains("f64"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected_not_panicking() {
        let cfg = toy_cfg();
        let state = TrainState::<f64>::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        checkpoint_save(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = checkpoint_load::<f64>(&path).err().unwrap();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn no_stray_tmp_file_after_save() {
        let cfg = toy_cfg();
        let state = TrainState::<f64>::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        checkpoint_save(&state, &path).unwrap();
        let entries: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0], "x.ckpt");
    }
}
