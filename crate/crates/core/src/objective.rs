//! VICReg alignment loss and the bidirectional training objective.

use serde::{Deserialize, Serialize};

use crate::dynamics::{predict_branch, BoundModels, Models, NoiseSchedule};
use crate::encoder::{encode_batch, pool, Tokenized};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

const STD_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VicregWeights {
    pub inv: f64,
    pub var: f64,
    pub cov: f64,
    pub var_threshold: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self {
            inv: 25.0,
            var: 25.0,
            cov: 1.0,
            var_threshold: 1.0,
        }
    }
}

impl VicregWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.inv, self.var, self.cov, self.var_threshold].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights and variance threshold must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn combine(&self, inv: f64, var: f64, cov: f64) -> f64 {
        self.inv * inv + self.var * var + self.cov * cov
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    #[default]
    Vicreg,
    Mse,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vicreg" => Ok(Self::Vicreg),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("objective must be vicreg or mse, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vicreg => "vicreg",
            Self::Mse => "mse",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub weights: VicregWeights,
    pub no_history: bool,
    /// Invariance on the `M × D` tokens instead of pooled features.
    pub token_level_inv: bool,
}

/// Term values summed over branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub inv: f64,
    pub var: f64,
    pub cov: f64,
    pub total_future: f64,
    pub total_history: f64,
    pub total: f64,
}

/// Tape handles of the three VICReg terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct VicregTerms {
    pub inv: Var,
    pub var: Var,
    pub cov: Var,
    pub total: Var,
}

pub fn mse_only_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let d = tape.square(d)?;
    tape.mean_all(d)
}

fn centered<T: Real>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Var> {
    let mean = tape.mean_blocks(x, n)?;
    let mean = tape.repeat_rows(mean, n)?;
    tape.sub(x, mean)
}

fn var_term<T: Real>(tape: &mut Tape<T>, xc: Var, n: usize, threshold: f64) -> Result<Var> {
    let sq = tape.square(xc)?;
    let var = tape.mean_blocks(sq, n)?;
    let var = tape.scale(var, T::from_f64c(n as f64 / (n - 1) as f64))?;
    let var = tape.add_scalar(var, T::from_f64c(STD_EPS))?;
    let std = tape.sqrt(var)?;
    let gap = tape.scale(std, -T::one())?;
    let gap = tape.add_scalar(gap, T::from_f64c(threshold))?;
    let hinge = tape.relu(gap)?;
    tape.mean_all(hinge)
}

fn cov_term<T: Real>(tape: &mut Tape<T>, xc: Var, n: usize) -> Result<Var> {
    let d = tape.value(xc).cols();
    let xt = tape.transpose(xc)?;
    let c = tape.matmul(xt, xc)?;
    let c = tape.scale(c, T::from_f64c(1.0 / (n - 1) as f64))?;
    let c2 = tape.square(c)?;
    let mask = tape.constant(Tensor::from_fn(vec![d, d], |i| {
        if i / d == i % d {
            T::zero()
        } else {
            T::one()
        }
    }))?;
    let off = tape.mul(c2, mask)?;
    let s = tape.sum_all(off)?;
    tape.scale(s, T::from_f64c(1.0 / d as f64))
}

/// VICReg on `[B, D]` pooled predictions and targets. Variance and
/// covariance are taken on both sides and averaged.
pub fn vicreg<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, w: &VicregWeights) -> Result<VicregTerms> {
    let (ps, ts) = (tape.value(pred).shape().to_vec(), tape.value(target).shape().to_vec());
    if ps != ts || ps.len() != 2 {
        return Err(Error::shape("vicreg", format!("prediction {ps:?} vs target {ts:?}")));
    }
    let n = ps[0];
    if n < 2 {
        return Err(Error::InvalidArgument(format!("VICReg needs a batch of at least 2, got {n}")));
    }
    let inv = mse_only_loss(tape, pred, target)?;
    let half = T::from_f64c(0.5);
    let pc = centered(tape, pred, n)?;
    let tc = centered(tape, target, n)?;
    let vp = var_term(tape, pc, n, w.var_threshold)?;
    let vt = var_term(tape, tc, n, w.var_threshold)?;
    let var = tape.add(vp, vt)?;
    let var = tape.scale(var, half)?;
    let cp = cov_term(tape, pc, n)?;
    let ct = cov_term(tape, tc, n)?;
    let cov = tape.add(cp, ct)?;
    let cov = tape.scale(cov, half)?;

    let a = tape.scale(inv, T::from_f64c(w.inv))?;
    let b = tape.scale(var, T::from_f64c(w.var))?;
    let c = tape.scale(cov, T::from_f64c(w.cov))?;
    let total = tape.add(a, b)?;
    let total = tape.add(total, c)?;
    Ok(VicregTerms { inv, var, cov, total })
}

/// Evaluates [`vicreg`] on plain tensors; returns `(inv, var, cov, total)`.
pub fn vicreg_values<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, w: &VicregWeights) -> Result<[f64; 4]> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone())?;
    let t = tape.constant(target.clone())?;
    let terms = vicreg(&mut tape, p, t, w)?;
    let get = |v: Var| tape.value(v).item().to_f64c();
    Ok([get(terms.inv), get(terms.var), get(terms.cov), get(terms.total)])
}

struct BranchLoss {
    total: Var,
    inv: Var,
    var: Var,
    cov: Var,
}

fn branch_loss<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ObjectiveConfig,
    tokens: usize,
    pred: Var,
    target: Var,
) -> Result<BranchLoss> {
    let pp = pool(tape, pred, tokens)?;
    let pt = pool(tape, target, tokens)?;
    let terms = vicreg(tape, pp, pt, &cfg.weights)?;
    let inv = if cfg.token_level_inv {
        mse_only_loss(tape, pred, target)?
    } else {
        terms.inv
    };
    let total = match cfg.kind {
        ObjectiveKind::Mse => inv,
        ObjectiveKind::Vicreg if cfg.token_level_inv => {
            let a = tape.scale(inv, T::from_f64c(cfg.weights.inv))?;
            let b = tape.scale(terms.var, T::from_f64c(cfg.weights.var))?;
            let c = tape.scale(terms.cov, T::from_f64c(cfg.weights.cov))?;
            let s = tape.add(a, b)?;
            tape.add(s, c)?
        }
        ObjectiveKind::Vicreg => terms.total,
    };
    Ok(BranchLoss {
        total,
        inv,
        var: terms.var,
        cov: terms.cov,
    })
}

/// Future and history branches on the same pairs and steps with separate
/// noise draws; returns the scalar loss and its breakdown. Under the MSE
/// objective the variance and covariance terms are still reported but do
/// not enter the loss.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_loss<T: Real>(
    tape: &mut Tape<T>,
    models: &Models<T>,
    b: &BoundModels,
    sched: &NoiseSchedule,
    current: &[&Tokenized],
    future: &[&Tokenized],
    taus: &[usize],
    eps_future: &Tensor<T>,
    eps_history: &Tensor<T>,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    let n = current.len();
    if n < 2 || future.len() != n || taus.len() != n {
        return Err(Error::InvalidArgument(format!(
            "bidirectional loss needs matching batches of at least 2 (got {n}, {}, {} steps)",
            future.len(),
            taus.len()
        )));
    }
    let mc = &models.config;
    let m = mc.encoder.tokens;
    let z_t = encode_batch(tape, &b.online, &mc.encoder, current)?;
    let z_tk = encode_batch(tape, &b.online, &mc.encoder, future)?;

    let teacher_tk = models.teacher(future)?;
    let fwd = predict_branch(tape, mc, b, sched, z_t, z_tk, &teacher_tk, taus, eps_future)?;
    let lf = branch_loss(tape, cfg, m, fwd.pred, fwd.target)?;

    let val = |tape: &Tape<T>, v: Var| tape.value(v).item().to_f64c();
    let mut out = LossBreakdown {
        inv: val(tape, lf.inv),
        var: val(tape, lf.var),
        cov: val(tape, lf.cov),
        total_future: val(tape, lf.total),
        ..Default::default()
    };
    let mut total = lf.total;
    if !cfg.no_history {
        let teacher_t = models.teacher(current)?;
        let bwd = predict_branch(tape, mc, b, sched, z_tk, z_t, &teacher_t, taus, eps_history)?;
        let lh = branch_loss(tape, cfg, m, bwd.pred, bwd.target)?;
        out.inv += val(tape, lh.inv);
        out.var += val(tape, lh.var);
        out.cov += val(tape, lh.cov);
        out.total_history = val(tape, lh.total);
        total = tape.add(lf.total, lh.total)?;
    }
    out.total = val(tape, total);
    Ok((total, out))
}
