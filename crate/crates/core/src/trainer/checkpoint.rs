use std::fs;
use std::io::Write;
use std::path::Path;

use crate::binio::Reader;
use crate::dynamics::Models;
use crate::error::{Error, Result};
use crate::numerics::{CounterRng, OptState, ParamStore, Tensor};

use super::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const STORES: [&str; 4] = ["online", "target", "idm", "fdm"];

fn store<'a>(m: &'a Models<f32>, name: &str) -> &'a ParamStore<f32> {
    match name {
        "online" => &m.online,
        "target" => &m.target,
        "idm" => &m.idm,
        _ => &m.fdm,
    }
}

fn store_mut<'a>(m: &'a mut Models<f32>, name: &str) -> &'a mut ParamStore<f32> {
    match name {
        "online" => &mut m.online,
        "target" => &mut m.target,
        "idm" => &mut m.idm,
        _ => &mut m.fdm,
    }
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for s in STORES {
        for (name, t) in store(&state.models, s).iter() {
            tensors.push((format!("{s}.{name}"), t));
        }
    }
    for (key, m, _) in state.opt.moments() {
        tensors.push((format!("opt.m.{key}"), m));
    }
    for (key, _, v) in state.opt.moments() {
        tensors.push((format!("opt.v.{key}"), v));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut buf, name, t)?;
    }
    for w in state.rng.state() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let json = serde_json::to_vec(&state.config)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(buf);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let step = r.u64("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u64("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("{name} size overflows")))?;
        let data = r.f32s(n, &name)?;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    let mut words = [0u64; 4];
    for w in &mut words {
        *w = r.u64("rng state")?;
    }
    let json_len = r.u32("config length")? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(json_len, "config")?)?;
    r.finish()?;
    config.validate()?;

    let mut models = Models::<f32>::init(config.model(), config.seed)?;
    let mut opt = OptState::new(config.optimizer());
    opt.set_step(step);
    let mut seen = 0usize;
    let mut first = Vec::new();
    for (name, t) in tensors {
        if let Some(key) = name.strip_prefix("opt.m.") {
            first.push((key.to_owned(), t));
            continue;
        }
        if let Some(key) = name.strip_prefix("opt.v.") {
            let pos = first
                .iter()
                .position(|(k, _)| k == key)
                .ok_or_else(|| Error::Malformed(format!("second moment {key} without a first moment")))?;
            let (k, m) = first.swap_remove(pos);
            opt.insert_moments(k, m, t)?;
            continue;
        }
        let (s, pname) = name
            .split_once('.')
            .filter(|(s, _)| STORES.contains(s))
            .ok_or_else(|| Error::Malformed(format!("unexpected tensor {name}")))?;
        let slot = store_mut(&mut models, s)
            .get_mut(pname)
            .ok_or_else(|| Error::Malformed(format!("tensor {name} not in the configured model")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Malformed(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        seen += 1;
    }
    let expected: usize = STORES.iter().map(|s| store(&models, s).len()).sum();
    if seen != expected || !first.is_empty() {
        return Err(Error::Malformed(format!(
            "checkpoint holds {seen} of {expected} model tensors and {} unpaired moments",
            first.len()
        )));
    }
    Ok(TrainState {
        config,
        models,
        opt,
        step,
        rng: CounterRng::from_state(words),
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("afck.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
