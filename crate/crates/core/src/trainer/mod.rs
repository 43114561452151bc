//! Pre-training loop, checkpoints and metrics.

mod checkpoint;
mod config;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_pair, Trajectory};
use crate::dynamics::{make_noise_schedule, Models, NoiseSchedule, ScheduleKind};
use crate::encoder::{ema_update, momentum_schedule, tokenize, EncoderConfig, Tokenized};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, randn, CounterRng, OptState, ParamGroup, Stream, Tape};
use crate::objective::bidirectional_loss;

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub models: Models<f32>,
    pub opt: OptState<f32>,
    pub step: u64,
    /// Source of per-step diffusion steps and noise.
    pub rng: CounterRng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            models: Models::init(config.model(), config.seed)?,
            opt: OptState::new(config.optimizer()),
            step: 0,
            rng: CounterRng::for_stream(config.seed, Stream::Noise, 0),
            config,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_noise_schedule(self.config.diffusion_steps, ScheduleKind::Cosine)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub inv: f64,
    pub var: f64,
    pub cov: f64,
    pub total_future: f64,
    pub total_history: f64,
    pub total: f64,
    pub ema_m: f64,
    pub wall_ms: f64,
}

/// Tokenized frames, `[trajectory][frame]`.
pub struct TokenCache {
    pub frames: Vec<Vec<Tokenized>>,
}

impl TokenCache {
    pub fn build(trajs: &[Trajectory], cfg: &EncoderConfig) -> Result<Self> {
        let frames = trajs
            .par_iter()
            .map(|t| t.frames.iter().map(|f| tokenize(f, cfg.tokens, cfg.group_size)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(Self { frames })
    }
}

/// A batch of `(𝒫_t, 𝒫_{t+k})` pairs as `(trajectory, t)` indices.
pub type PairBatch = Vec<(usize, usize)>;

/// Where an epoch's pairs come from and how they are grouped.
pub fn epoch_batches(cfg: &TrainConfig, trajs: &[Trajectory], epoch: usize) -> Result<Vec<PairBatch>> {
    let mut rng = CounterRng::for_stream(cfg.seed, Stream::Shuffle, epoch as u32);
    let mut pairs = Vec::with_capacity(trajs.len() * cfg.pairs_per_trajectory);
    for (i, traj) in trajs.iter().enumerate() {
        for _ in 0..cfg.pairs_per_trajectory {
            pairs.push((i, sample_pair(traj, cfg.k, &mut rng)?.t));
        }
    }
    rng.shuffle(&mut pairs);
    Ok(pairs
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[_]>::to_vec)
        .collect())
}

pub fn steps_per_epoch(cfg: &TrainConfig, n_trajectories: usize) -> usize {
    let n = n_trajectories * cfg.pairs_per_trajectory;
    n / cfg.batch_size + usize::from(n % cfg.batch_size >= 2)
}

/// One optimization step: loss, backward, AdamW on the trainable networks,
/// then the EMA update of the target encoder.
pub fn training_step(
    state: &mut TrainState,
    sched: &NoiseSchedule,
    current: &[&Tokenized],
    future: &[&Tokenized],
    epoch: usize,
    total_steps: u64,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let cfg = &state.config;
    let b = current.len();
    let rows = b * cfg.tokens;
    let taus: Vec<usize> = (0..b)
        .map(|_| 1 + state.rng.below(cfg.diffusion_steps as u64) as usize)
        .collect();
    let eps_f = randn(vec![rows, cfg.dim], 1.0, &mut state.rng);
    let eps_h = randn(vec![rows, cfg.dim], 1.0, &mut state.rng);

    let mut tape = Tape::new();
    let bound = state.models.bind(&mut tape)?;
    let obj = cfg.objective_config();
    let result = bidirectional_loss(
        &mut tape,
        &state.models,
        &bound,
        sched,
        current,
        future,
        &taus,
        &eps_f,
        &eps_h,
        &obj,
    )
    .and_then(|(loss, parts)| Ok((tape.backward(loss)?, parts)));
    let (grads, parts) = match result {
        Ok(v) => v,
        Err(e) => {
            if e.is_numerical() {
                dump_diagnostics(state, &e);
            }
            return Err(e);
        }
    };

    let g_online = bound.online.grads(&grads);
    let g_idm = bound.idm.grads(&grads);
    let g_fdm = bound.fdm.grads(&grads);
    let models = &mut state.models;
    let mut groups = [
        ParamGroup {
            name: "online",
            params: &mut models.online,
            grads: &g_online,
        },
        ParamGroup {
            name: "idm",
            params: &mut models.idm,
            grads: &g_idm,
        },
        ParamGroup {
            name: "fdm",
            params: &mut models.fdm,
            grads: &g_fdm,
        },
    ];
    if let Err(e) = adamw_step(&mut state.opt, &mut groups) {
        dump_diagnostics(state, &e);
        return Err(e);
    }
    let m = momentum_schedule(state.step, total_steps, state.config.ema_m0);
    ema_update(&mut state.models.target, &state.models.online, m)?;
    state.step += 1;
    Ok(MetricsRecord {
        epoch,
        step: state.step,
        inv: parts.inv,
        var: parts.var,
        cov: parts.cov,
        total_future: parts.total_future,
        total_history: parts.total_history,
        total: parts.total,
        ema_m: m,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn dump_diagnostics(state: &TrainState, err: &Error) {
    log::error!("step {}: {err}", state.step);
    let m = &state.models;
    for (group, store) in [("online", &m.online), ("target", &m.target), ("idm", &m.idm), ("fdm", &m.fdm)] {
        for (name, t) in store.iter() {
            let finite = t.all_finite();
            let norm = t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if !finite || !norm.is_finite() {
                log::error!("  {group}.{name}: non-finite values");
            } else {
                log::debug!("  {group}.{name}: l2 {norm:.4e}");
            }
        }
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.afck"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.afck")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}

fn validate_data(cfg: &TrainConfig, trajs: &[Trajectory]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one trajectory".into()));
    }
    for (i, t) in trajs.iter().enumerate() {
        if t.len() < cfg.k + 1 {
            return Err(Error::InvalidArgument(format!(
                "trajectory {i} has {} frames, interval k={} needs at least {}",
                t.len(),
                cfg.k,
                cfg.k + 1
            )));
        }
    }
    if steps_per_epoch(cfg, trajs.len()) == 0 {
        return Err(Error::InvalidArgument("dataset too small for a batch of 2".into()));
    }
    Ok(())
}

/// Opens the metrics log for `state`: a fresh file with a header at step 0,
/// otherwise the existing file cut back to `step` records.
fn open_metrics(dir: &Path, state: &TrainState, header: &serde_json::Value) -> Result<BufWriter<fs::File>> {
    let path = metrics_path(dir);
    let keep = if state.step == 0 {
        vec![serde_json::to_string(header)?]
    } else {
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let lines = BufReader::new(f)
            .lines()
            .take(state.step as usize + 1)
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&path, e))?;
        if lines.len() != state.step as usize + 1 {
            return Err(Error::Malformed(format!(
                "{} holds {} records, resume needs {}",
                path.display(),
                lines.len().saturating_sub(1),
                state.step
            )));
        }
        lines
    };
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for l in keep {
        writeln!(w, "{l}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(w)
}

/// Trains from `state` to `state.config.epochs`, writing periodic and final
/// checkpoints and the metrics log into `dir`.
pub fn train(mut state: TrainState, trajs: &[Trajectory], dir: &Path) -> Result<TrainState> {
    let cfg = state.config.clone();
    cfg.validate()?;
    validate_data(&cfg, trajs)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per_epoch = steps_per_epoch(&cfg, trajs.len());
    let total_steps = (per_epoch * cfg.epochs) as u64;
    if !state.step.is_multiple_of(per_epoch as u64) || state.step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "checkpoint step {} is not an epoch boundary of this run ({per_epoch} steps per epoch)",
            state.step
        )));
    }
    let start_epoch = (state.step / per_epoch as u64) as usize;
    let sched = state.schedule()?;
    let cache = TokenCache::build(trajs, &cfg.model().encoder)?;
    let header = serde_json::json!({
        "config": &cfg,
        "n_trajectories": trajs.len(),
        "steps_per_epoch": per_epoch,
        "total_steps": total_steps,
    });
    let mut metrics = open_metrics(dir, &state, &header)?;
    let mpath = metrics_path(dir);

    for epoch in start_epoch..cfg.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(&cfg, trajs, epoch)?;
        for batch in &batches {
            let current: Vec<&Tokenized> = batch.iter().map(|&(i, t)| &cache.frames[i][t]).collect();
            let future: Vec<&Tokenized> = batch.iter().map(|&(i, t)| &cache.frames[i][t + cfg.k]).collect();
            let rec = training_step(&mut state, &sched, &current, &future, epoch, total_steps)?;
            sum += rec.total;
            writeln!(metrics, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&mpath, e))?;
        }
        metrics.flush().map_err(|e| Error::io(&mpath, e))?;
        log::info!(
            "epoch {}/{} step {} mean loss {:.5}",
            epoch + 1,
            cfg.epochs,
            state.step,
            sum / batches.len() as f64
        );
        if (epoch + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&state, &checkpoint_path(dir, epoch + 1))?;
        }
    }
    save_checkpoint(&state, &final_checkpoint_path(dir))?;
    Ok(state)
}
