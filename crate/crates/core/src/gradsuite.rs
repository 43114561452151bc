//! Finite-difference gradient checks for every tape op and for the full
//! training loss, run in 64-bit.

use std::time::Instant;

use serde::Serialize;

use crate::data::PointCloud;
use crate::dynamics::{make_noise_schedule, IdmInput, ModelConfig, Models, ScheduleKind};
use crate::encoder::{tokenize, EncoderConfig, Tokenized};
use crate::error::Result;
use crate::numerics::{grad_check, randn, CounterRng, ParamStore, Stream, Tape, Tensor, Var};
use crate::objective::{bidirectional_loss, vicreg, ObjectiveConfig, ObjectiveKind, VicregWeights};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS_PER_OP: usize = 20;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var], &[Tensor<f64>]) -> Result<Var>;

/// One differentiable case: trainable input shapes, constant inputs drawn
/// per point, and the graph reduced to a scalar by a fixed random weighting.
struct OpCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    consts: Vec<Vec<usize>>,
    /// Positive inputs (for `sqrt`).
    positive: bool,
    build: Box<Build>,
}

fn case(
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    build: impl Fn(&mut Tape<f64>, &[Var], &[Tensor<f64>]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        consts: Vec::new(),
        positive: false,
        build: Box::new(build),
    }
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone())?;
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("matmul", vec![vec![3, 4], vec![4, 5]], |t, v, _| t.matmul(v[0], v[1])),
        case("add", vec![vec![3, 4], vec![3, 4]], |t, v, _| t.add(v[0], v[1])),
        case("sub", vec![vec![3, 4], vec![3, 4]], |t, v, _| t.sub(v[0], v[1])),
        case("mul", vec![vec![3, 4], vec![3, 4]], |t, v, _| t.mul(v[0], v[1])),
        case("add_row", vec![vec![3, 4], vec![4]], |t, v, _| t.add_row(v[0], v[1])),
        case("scale", vec![vec![3, 4]], |t, v, _| t.scale(v[0], -1.7)),
        case("add_scalar", vec![vec![3, 4]], |t, v, _| t.add_scalar(v[0], 0.3)),
        case("gelu", vec![vec![4, 5]], |t, v, _| t.gelu(v[0])),
        case("relu", vec![vec![4, 5]], |t, v, _| t.relu(v[0])),
        case("square", vec![vec![4, 5]], |t, v, _| t.square(v[0])),
        case("layer_norm", vec![vec![4, 6]], |t, v, _| t.layer_norm(v[0], 1e-6)),
        case("softmax_rows", vec![vec![4, 5]], |t, v, _| t.softmax_rows(v[0])),
        case("transpose", vec![vec![3, 5]], |t, v, _| t.transpose(v[0])),
        case("repeat_rows", vec![vec![2, 3]], |t, v, _| t.repeat_rows(v[0], 3)),
        case("mean_blocks", vec![vec![6, 3]], |t, v, _| t.mean_blocks(v[0], 3)),
        case("max_blocks", vec![vec![8, 3]], |t, v, _| t.max_blocks(v[0], 4)),
        case("block_matmul_nt", vec![vec![6, 4], vec![6, 4]], |t, v, _| t.block_matmul_nt(v[0], v[1], 3)),
        case("block_matmul", vec![vec![6, 3], vec![6, 4]], |t, v, _| t.block_matmul(v[0], v[1], 3)),
        case("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v, _| t.concat_cols(&[v[0], v[1]])),
        case("sum_all", vec![vec![3, 4]], |t, v, _| t.sum_all(v[0])),
        case("mean_all", vec![vec![3, 4]], |t, v, _| t.mean_all(v[0])),
        case("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |t, v, _| t.linear(v[0], v[1], Some(v[2]))),
        case("attention", vec![vec![6, 4], vec![6, 4], vec![6, 4]], |t, v, _| t.attention(v[0], v[1], v[2], 3)),
        case("gelu_chain", vec![vec![3, 4], vec![4, 4], vec![4, 2]], |t, v, _| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.gelu(h)?;
            let h = t.matmul(h, v[2])?;
            t.gelu(h)
        }),
        case("vicreg", vec![vec![6, 5], vec![6, 5]], |t, v, _| {
            Ok(vicreg(t, v[0], v[1], &VicregWeights::default())?.total)
        }),
    ];
    let mut sqrt = case("sqrt", vec![vec![4, 5]], |t, v, _| t.sqrt(v[0]));
    sqrt.positive = true;
    cases.push(sqrt);
    let mut stop = case("vicreg_fixed_target", vec![vec![6, 5]], |t, v, c| {
        let target = t.constant(c[0].clone())?;
        Ok(vicreg(t, v[0], target, &VicregWeights::default())?.total)
    });
    stop.consts = vec![vec![6, 5]];
    cases.push(stop);
    cases
}

fn split(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::new(s.clone(), flat[at..at + n].to_vec())?);
        at += n;
    }
    Ok(out)
}

fn run_case(c: &OpCase, points: usize, rng: &mut CounterRng) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..points {
        let n: usize = c.inputs.iter().map(|s| s.iter().product::<usize>()).sum();
        let point: Vec<f64> = (0..n)
            .map(|_| {
                let x = rng.normal();
                if c.positive {
                    0.2 + x.abs()
                } else {
                    x
                }
            })
            .collect();
        let consts: Vec<Tensor<f64>> = c.consts.iter().map(|s| randn(s.clone(), 1.0, rng)).collect();
        let probe_shape = {
            let mut tape = Tape::new();
            let vars = split(&point, &c.inputs)?
                .into_iter()
                .map(|t| tape.param(t))
                .collect::<Result<Vec<_>>>()?;
            let y = (c.build)(&mut tape, &vars, &consts)?;
            tape.value(y).shape().to_vec()
        };
        let weights = randn(probe_shape, 1.0, rng);
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let vars = split(x, &c.inputs)?
                .into_iter()
                .map(|t| tape.param(t))
                .collect::<Result<Vec<_>>>()?;
            let y = (c.build)(&mut tape, &vars, &consts)?;
            let loss = weighted_sum(&mut tape, y, &weights)?;
            let g = tape.backward(loss)?;
            let grad = vars.iter().flat_map(|&v| g.get_or_zeros(v).into_data()).collect();
            Ok((tape.value(loss).item(), grad))
        };
        worst = worst.max(grad_check(f, &point, FD_STEP)?.max_rel_err);
    }
    Ok(CheckResult {
        name: c.name.to_string(),
        points,
        max_rel_err: worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Random directions in parameter space along which the full loss is
/// differenced. Each directional derivative mixes every parameter's
/// gradient, so none is accidentally tiny next to the rounding floor.
pub const LOSS_DIRECTIONS: usize = 32;

/// A model small enough to check quickly.
pub fn tiny_model_config(idm_input: IdmInput) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            tokens: 4,
            group_size: 6,
            dim: 6,
            hidden: 6,
        },
        d_act: 3,
        idm_hidden: 6,
        idm_input,
        cond_width: 4,
        time_dim: 4,
        blocks: 2,
        ffn_hidden: 6,
        diffusion_steps: 10,
    }
}

fn random_cloud(n: usize, rng: &mut CounterRng) -> Result<PointCloud> {
    PointCloud::new((0..n).map(|_| [0, 1, 2].map(|_| rng.normal() as f32)).collect())
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut CounterRng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
}

fn loss_case(name: &str, idm_input: IdmInput, objective: ObjectiveConfig, points: usize, rng: &mut CounterRng) -> Result<CheckResult> {
    let start = Instant::now();
    let cfg = tiny_model_config(idm_input);
    let sched = make_noise_schedule(cfg.diffusion_steps, ScheduleKind::Cosine)?;
    let batch = 3;
    let rows = batch * cfg.encoder.tokens;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let mut models = Models::<f64>::init(cfg, rng.next_u64())?;
        jitter(&mut models.online, rng);
        jitter(&mut models.target, rng);
        jitter(&mut models.idm, rng);
        jitter(&mut models.fdm, rng);
        let toks: Vec<Tokenized> = (0..2 * batch)
            .map(|_| tokenize(&random_cloud(24, rng)?, cfg.encoder.tokens, cfg.encoder.group_size))
            .collect::<Result<_>>()?;
        let (cur, fut) = toks.split_at(batch);
        let cur: Vec<&Tokenized> = cur.iter().collect();
        let fut: Vec<&Tokenized> = fut.iter().collect();
        let taus: Vec<usize> = (0..batch).map(|_| 1 + rng.below(cfg.diffusion_steps as u64) as usize).collect();
        let eps_f = randn(vec![rows, cfg.encoder.dim], 1.0, rng);
        let eps_h = randn(vec![rows, cfg.encoder.dim], 1.0, rng);

        let mut base = models.online.flatten();
        base.extend(models.idm.flatten());
        base.extend(models.fdm.flatten());
        let dirs: Vec<Vec<f64>> = (0..LOSS_DIRECTIONS)
            .map(|_| {
                let d: Vec<f64> = base.iter().map(|_| rng.normal()).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                d.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        let f = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut x = base.clone();
            for (d, &ui) in dirs.iter().zip(u) {
                for (xi, di) in x.iter_mut().zip(d) {
                    *xi += ui * di;
                }
            }
            let mut m = models.clone();
            let rest = m.online.unflatten_from(&x)?;
            let rest = m.idm.unflatten_from(rest)?;
            m.fdm.unflatten_from(rest)?;
            let mut tape = Tape::new();
            let b = m.bind(&mut tape)?;
            let (loss, _) = bidirectional_loss(&mut tape, &m, &b, &sched, &cur, &fut, &taus, &eps_f, &eps_h, &objective)?;
            let g = tape.backward(loss)?;
            let grad: Vec<f64> = [&b.online, &b.idm, &b.fdm]
                .iter()
                .flat_map(|bound| bound.grads(&g))
                .flat_map(Tensor::into_data)
                .collect();
            let proj = dirs.iter().map(|d| d.iter().zip(&grad).map(|(a, b)| a * b).sum()).collect();
            Ok((tape.value(loss).item(), proj))
        };
        let r = grad_check(f, &vec![0.0; LOSS_DIRECTIONS], FD_STEP)?;
        worst = worst.max(r.max_rel_err);
    }
    Ok(CheckResult {
        name: name.to_string(),
        points,
        max_rel_err: worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every check: primitive ops coordinate-wise at [`POINTS_PER_OP`]
/// points, the full loss along [`LOSS_DIRECTIONS`] directions at `loss_points` points.
pub fn run_suite(seed: u64, loss_points: usize) -> Result<Vec<CheckResult>> {
    let mut rng = CounterRng::for_stream(seed, Stream::Check, 0);
    let mut out = Vec::new();
    for c in op_cases() {
        out.push(run_case(&c, POINTS_PER_OP, &mut rng)?);
    }
    let vicreg_cfg = ObjectiveConfig::default();
    out.push(loss_case("bidirectional_loss", IdmInput::Diff, vicreg_cfg, loss_points, &mut rng)?);
    out.push(loss_case(
        "bidirectional_loss_concat_token_inv",
        IdmInput::Concat,
        ObjectiveConfig {
            token_level_inv: true,
            ..vicreg_cfg
        },
        loss_points,
        &mut rng,
    )?);
    out.push(loss_case(
        "bidirectional_loss_mse",
        IdmInput::Diff,
        ObjectiveConfig {
            kind: ObjectiveKind::Mse,
            ..vicreg_cfg
        },
        loss_points,
        &mut rng,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_suite(7, POINTS_PER_OP).unwrap() {
            println!("{:<40} {:>3} {:.2e} {:.2}s", r.name, r.points, r.max_rel_err, r.seconds);
            assert!(r.passed(), "{r:?}");
        }
    }
}
