//! Inverse dynamics (latent actions from feature differences) and forward
//! dynamics (single-pass conditional denoising of teacher features).

mod fdm;
mod idm;
mod schedule;

pub use fdm::{adaln, condition_vector, fdm_denoise, fdm_forward, init_fdm, timestep_embedding, FdmShape, FdmTrace};
pub use idm::{action_input, idm_forward, infer_latent_action, init_idm, Direction, IdmInput, LatentAction};
pub use schedule::{make_noise_schedule, noise_batch, noise_feature, noise_with_abar, NoiseSchedule, ScheduleKind};

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, encode_frozen, init_encoder, pool, EncoderConfig, Tokenized};
use crate::error::{Error, Result};
use crate::numerics::{Bound, CounterRng, ParamStore, Real, Stream, Tape, Tensor, Var};

/// Architecture of all four networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_act: usize,
    pub idm_hidden: usize,
    pub idm_input: IdmInput,
    pub cond_width: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            d_act: 16,
            idm_hidden: 64,
            idm_input: IdmInput::Diff,
            cond_width: 64,
            time_dim: 32,
            blocks: 4,
            ffn_hidden: 128,
            diffusion_steps: 100,
        }
    }
}

impl ModelConfig {
    pub fn fdm_shape(&self) -> FdmShape {
        FdmShape {
            dim: self.encoder.dim,
            d_act: self.d_act,
            cond_width: self.cond_width,
            time_dim: self.time_dim,
            blocks: self.blocks,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let positive = [
            ("tokens", e.tokens),
            ("group size", e.group_size),
            ("feature dim", e.dim),
            ("encoder hidden", e.hidden),
            ("latent action dim", self.d_act),
            ("idm hidden", self.idm_hidden),
            ("condition width", self.cond_width),
            ("blocks", self.blocks),
            ("ffn hidden", self.ffn_hidden),
            ("diffusion steps", self.diffusion_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time embedding width {} must be even and positive", self.time_dim)));
        }
        Ok(())
    }
}

/// Online encoder, EMA target encoder, inverse and forward dynamics models.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<T> {
    pub config: ModelConfig,
    pub online: ParamStore<T>,
    pub target: ParamStore<T>,
    pub idm: ParamStore<T>,
    pub fdm: ParamStore<T>,
}

impl<T: Real> Models<T> {
    /// Fresh weights from the init stream of `seed`; the target starts as a copy of the online encoder.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let online = init_encoder(&config.encoder, &mut CounterRng::for_stream(seed, Stream::Init, 0))?;
        let idm = init_idm(
            config.idm_input,
            config.encoder.dim,
            config.idm_hidden,
            config.d_act,
            &mut CounterRng::for_stream(seed, Stream::Init, 1),
        )?;
        let fdm = init_fdm(&config.fdm_shape(), &mut CounterRng::for_stream(seed, Stream::Init, 2))?;
        Ok(Self {
            config,
            target: online.clone(),
            online,
            idm,
            fdm,
        })
    }

    pub fn cast<U: Real>(&self) -> Models<U> {
        Models {
            config: self.config,
            online: self.online.cast(),
            target: self.target.cast(),
            idm: self.idm.cast(),
            fdm: self.fdm.cast(),
        }
    }

    /// Binds the trainable networks; the target encoder never goes on a tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundModels> {
        Ok(BoundModels {
            online: self.online.bind(tape)?,
            idm: self.idm.bind(tape)?,
            fdm: self.fdm.bind(tape)?,
        })
    }

    /// Teacher features `[B·M, D]` with no gradient tracking.
    pub fn teacher(&self, batch: &[&Tokenized]) -> Result<Tensor<T>> {
        encode_frozen(&self.target, &self.config.encoder, batch)
    }
}

#[derive(Clone, Debug)]
pub struct BoundModels {
    pub online: Bound,
    pub idm: Bound,
    pub fdm: Bound,
}

/// Prediction and alignment target of one branch, both `[B·M, D]`.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub pred: Var,
    pub target: Var,
    pub alpha: Var,
}

/// Predicts the teacher tokens of the `to` state from the `from` state's
/// online features and the latent action of `from → to`.
#[allow(clippy::too_many_arguments)]
pub fn predict_branch<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &BoundModels,
    sched: &NoiseSchedule,
    z_from: Var,
    z_to: Var,
    teacher_to: &Tensor<T>,
    taus: &[usize],
    eps: &Tensor<T>,
) -> Result<BranchOutput> {
    let m = cfg.encoder.tokens;
    let p_from = pool(tape, z_from, m)?;
    let p_to = pool(tape, z_to, m)?;
    let alpha = idm_forward(tape, &b.idm, cfg.idm_input, p_from, p_to)?;
    let noisy = noise_batch(teacher_to, taus, m, eps, sched)?;
    let noisy = tape.constant(noisy)?;
    let target = tape.constant(teacher_to.clone())?;
    let pred = fdm_forward(tape, &b.fdm, &cfg.fdm_shape(), noisy, p_from, alpha, taus, None)?;
    Ok(BranchOutput { pred, target, alpha })
}

/// `(ẑ_{t+k}, z̃_{t+k})` for a batch of `(𝒫_t, 𝒫_{t+k})` pairs.
#[allow(clippy::too_many_arguments)]
pub fn predict_future<T: Real>(
    tape: &mut Tape<T>,
    models: &Models<T>,
    b: &BoundModels,
    sched: &NoiseSchedule,
    current: &[&Tokenized],
    future: &[&Tokenized],
    taus: &[usize],
    eps: &Tensor<T>,
) -> Result<BranchOutput> {
    if current.len() != future.len() || current.len() != taus.len() {
        return Err(Error::shape(
            "predict_future",
            format!("{} current, {} future, {} steps", current.len(), future.len(), taus.len()),
        ));
    }
    let cfg = &models.config;
    let z_t = encode_batch(tape, &b.online, &cfg.encoder, current)?;
    let z_tk = encode_batch(tape, &b.online, &cfg.encoder, future)?;
    let teacher = models.teacher(future)?;
    predict_branch(tape, cfg, b, sched, z_t, z_tk, &teacher, taus, eps)
}

/// `(ẑ_t, z̃_t)`: the same computation as [`predict_future`] with the pair reversed.
#[allow(clippy::too_many_arguments)]
pub fn predict_history<T: Real>(
    tape: &mut Tape<T>,
    models: &Models<T>,
    b: &BoundModels,
    sched: &NoiseSchedule,
    current: &[&Tokenized],
    future: &[&Tokenized],
    taus: &[usize],
    eps: &Tensor<T>,
) -> Result<BranchOutput> {
    predict_future(tape, models, b, sched, future, current, taus, eps)
}
