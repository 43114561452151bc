use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const COSINE_OFFSET: f64 = 0.008;
const ABAR_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown noise schedule {other:?}"))),
        }
    }
}

/// Cumulative signal weights `ᾱ_0 = 1, ᾱ_1, …, ᾱ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    abar: Vec<f64>,
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.abar.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn abar(&self, tau: usize) -> f64 {
        self.abar[tau]
    }

    pub fn abars(&self) -> &[f64] {
        &self.abar
    }

    pub fn snr(&self, tau: usize) -> f64 {
        let a = self.abar[tau];
        a / (1.0 - a)
    }
}

pub fn make_noise_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidArgument("noise schedule needs at least one step".into()));
    }
    let ScheduleKind::Cosine = kind;
    let f = |tau: f64| {
        let c = ((tau / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    let f0 = f(0.0);
    let abar = (0..=steps)
        .map(|t| if t == 0 { 1.0 } else { (f(t as f64) / f0).clamp(ABAR_FLOOR, 1.0) })
        .collect();
    Ok(NoiseSchedule { abar, kind })
}

/// `√ᾱ·z + √(1−ᾱ)·ε`, elementwise.
pub fn noise_with_abar<T: Real>(z: &Tensor<T>, abar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() {
        return Err(Error::shape(
            "noise_feature",
            format!("feature {:?} vs noise {:?}", z.shape(), eps.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&abar) {
        return Err(Error::InvalidArgument(format!("signal weight {abar} outside [0, 1]")));
    }
    let a = T::from_f64c(abar.sqrt());
    let s = T::from_f64c((1.0 - abar).sqrt());
    let data = z.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + s * e).collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Noises `z` at step `tau` of `sched`.
pub fn noise_feature<T: Real>(z: &Tensor<T>, tau: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if tau > sched.steps() {
        return Err(Error::InvalidArgument(format!("step {tau} beyond schedule length {}", sched.steps())));
    }
    noise_with_abar(z, sched.abar(tau), eps)
}

/// Noises a `[B·M, D]` batch where each block of `rows_per_item` rows has its own step.
pub fn noise_batch<T: Real>(
    z: &Tensor<T>,
    taus: &[usize],
    rows_per_item: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() || z.rows() != taus.len() * rows_per_item {
        return Err(Error::shape(
            "noise_batch",
            format!("{:?} rows for {} items of {rows_per_item}", z.shape(), taus.len()),
        ));
    }
    let width = rows_per_item * z.cols();
    let mut out = Vec::with_capacity(z.len());
    for (i, &tau) in taus.iter().enumerate() {
        if tau > sched.steps() {
            return Err(Error::InvalidArgument(format!("step {tau} beyond schedule length {}", sched.steps())));
        }
        let a = T::from_f64c(sched.abar(tau).sqrt());
        let s = T::from_f64c((1.0 - sched.abar(tau)).sqrt());
        let span = i * width..(i + 1) * width;
        out.extend(z.data()[span.clone()].iter().zip(&eps.data()[span]).map(|(&x, &e)| a * x + s * e));
    }
    Tensor::new(z.shape().to_vec(), out)
}
