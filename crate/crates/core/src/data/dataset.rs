//! Binary trajectory dataset (little-endian):
//!
//! ```text
//! "AFRO" | u32 version=1 | u32 n_traj
//! per trajectory:
//!   u32 L | u32 n_points | u32 action_dim | u64 seed
//!   f32 frames[L * n_points * 3]
//!   f32 actions[(L - 1) * action_dim]
//! ```
//!
//! A `<path>.meta.json` sidecar carries the generator config and global seed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{Error, Result};

use super::cloud::PointCloud;
use super::scene::{SceneConfig, Trajectory};

pub const DATASET_MAGIC: [u8; 4] = *b"AFRO";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: SceneConfig,
    pub global_seed: u64,
    pub n_trajectories: usize,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn encode_dataset(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty dataset".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trajs.len() as u32).to_le_bytes());
    for t in trajs {
        t.validate()?;
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.n_points() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.action_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&t.seed.to_le_bytes());
        for f in &t.frames {
            for p in f.points() {
                for v in p {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for row in &t.actions {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Trajectory>> {
    let mut r = Reader::new(buf);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let n = r.u32("trajectory count")? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let l = r.u32("L")? as usize;
        let np = r.u32("n_points")? as usize;
        let ad = r.u32("action_dim")? as usize;
        let seed = r.u64("seed")?;
        if l == 0 || np == 0 {
            return Err(Error::Malformed(format!("trajectory {i} has L={l}, n_points={np}")));
        }
        let raw = r.f32s(l * np * 3, "frames")?;
        let frames = raw
            .chunks_exact(np * 3)
            .map(|f| PointCloud::new(f.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()))
            .collect::<Result<Vec<_>>>()?;
        let acts = r.f32s((l - 1) * ad, "actions")?;
        let actions = if ad == 0 {
            vec![Vec::new(); l - 1]
        } else {
            acts.chunks_exact(ad).map(<[f32]>::to_vec).collect()
        };
        out.push(Trajectory::new(frames, actions, seed)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_dataset(trajs: &[Trajectory], path: &Path) -> Result<()> {
    let bytes = encode_dataset(trajs)?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let p = meta_path(path);
    let s = serde_json::to_string_pretty(meta)?;
    fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let p = meta_path(path);
    let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::generate_trajectory;

    fn sample() -> Vec<Trajectory> {
        let cfg = SceneConfig {
            n_points: 64,
            length: 5,
            ..Default::default()
        };
        (0..3).map(|s| generate_trajectory(&cfg, s).unwrap()).collect()
    }

    #[test]
    fn round_trip() {
        let t = sample();
        let back = decode_dataset(&encode_dataset(&t).unwrap()).unwrap();
        assert_eq!(back.len(), t.len());
        assert!(t.iter().zip(&back).all(|(a, b)| a.same_data(b)));
    }

    #[test]
    fn header_layout() {
        let t = sample();
        let b = encode_dataset(&t).unwrap();
        assert_eq!(&b[..4], b"AFRO");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 64);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 2);
        let per = 4 + 4 + 4 + 8 + 5 * 64 * 3 * 4 + 4 * 2 * 4;
        assert_eq!(b.len(), 12 + 3 * per);
    }

    #[test]
    fn corrupt_magic() {
        let mut b = encode_dataset(&sample()).unwrap();
        b[0] = b'X';
        let e = decode_dataset(&b).unwrap_err();
        assert!(e.to_string().contains("bad magic"));
    }

    #[test]
    fn future_version_rejected() {
        let mut b = encode_dataset(&sample()).unwrap();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_dataset(&b), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn truncation_detected() {
        let b = encode_dataset(&sample()).unwrap();
        for cut in [3, 10, 30, b.len() - 1] {
            assert!(matches!(decode_dataset(&b[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn empty_write_rejected() {
        assert!(encode_dataset(&[]).is_err());
    }

    #[test]
    fn file_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.afro");
        let t = sample();
        write_dataset(&t, &p).unwrap();
        let meta = DatasetMeta {
            generator: SceneConfig::default(),
            global_seed: 17,
            n_trajectories: 3,
        };
        write_meta(&p, &meta).unwrap();
        assert!(dir.path().join("d.afro.meta.json").exists());
        assert_eq!(read_meta(&p).unwrap(), meta);
        assert_eq!(read_dataset(&p).unwrap().len(), 3);
    }
}
