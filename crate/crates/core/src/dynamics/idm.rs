use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dense, init_dense, Bound, CounterRng, ParamStore, Real, Tape, Tensor, Var};

/// What the inverse model sees: the pooled feature difference, or both
/// pooled features side by side (the ablation without differencing).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdmInput {
    #[default]
    Diff,
    Concat,
}

impl std::str::FromStr for IdmInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff" => Ok(Self::Diff),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("idm input must be diff or concat, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for IdmInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Diff => "diff",
            Self::Concat => "concat",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// One latent action per transition.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAction<T> {
    pub vector: Vec<T>,
    pub direction: Direction,
}

pub fn init_idm<T: Real>(input: IdmInput, dim: usize, hidden: usize, d_act: usize, rng: &mut CounterRng) -> Result<ParamStore<T>> {
    let d_in = match input {
        IdmInput::Diff => dim,
        IdmInput::Concat => 2 * dim,
    };
    let mut s = ParamStore::new();
    init_dense(&mut s, "l1", d_in, hidden, rng)?;
    init_dense(&mut s, "l2", hidden, hidden, rng)?;
    init_dense(&mut s, "out", hidden, d_act, rng)?;
    Ok(s)
}

/// Latent actions for transitions `from → to` given pooled `[B, D]` features.
pub fn idm_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, input: IdmInput, from: Var, to: Var) -> Result<Var> {
    let x = match input {
        IdmInput::Diff => tape.sub(to, from)?,
        IdmInput::Concat => tape.concat_cols(&[from, to])?,
    };
    idm_head(tape, p, x)
}

fn idm_head<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    let h = dense(tape, p, "l1", x)?;
    let h = tape.gelu(h)?;
    let h = dense(tape, p, "l2", h)?;
    let h = tape.gelu(h)?;
    dense(tape, p, "out", h)
}

/// The vector the inverse model reads for one transition. Forward: the
/// action taking `z_a` to `z_b`; backward: the action taking `z_b` back to
/// `z_a`, so with differencing the input is negated.
pub fn action_input<T: Real>(input: IdmInput, pooled_a: &[T], pooled_b: &[T], direction: Direction) -> Result<Vec<T>> {
    if pooled_a.len() != pooled_b.len() || pooled_a.is_empty() {
        return Err(Error::shape(
            "infer_latent_action",
            format!("pooled features of length {} and {}", pooled_a.len(), pooled_b.len()),
        ));
    }
    let (from, to) = match direction {
        Direction::Forward => (pooled_a, pooled_b),
        Direction::Backward => (pooled_b, pooled_a),
    };
    Ok(match input {
        IdmInput::Diff => to.iter().zip(from).map(|(&t, &f)| t - f).collect(),
        IdmInput::Concat => from.iter().chain(to).copied().collect(),
    })
}

pub fn infer_latent_action<T: Real>(
    params: &ParamStore<T>,
    input: IdmInput,
    pooled_a: &[T],
    pooled_b: &[T],
    direction: Direction,
) -> Result<LatentAction<T>> {
    let x = action_input(input, pooled_a, pooled_b, direction)?;
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape)?;
    let x = tape.constant(Tensor::matrix(1, x.len(), x)?)?;
    let out = idm_head(&mut tape, &p, x)?;
    Ok(LatentAction {
        vector: tape.value(out).data().to_vec(),
        direction,
    })
}
