//! Tensors, reverse-mode gradients, AdamW and random streams.

mod gradcheck;
mod optim;
mod params;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, tape_closure, GradCheckReport};
pub use optim::{adamw_step, AdamWConfig, OptState, ParamGroup};
pub use params::{Bound, ParamStore};
pub use real::Real;
pub use rng::{CounterRng, Stream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Normal(0, std²) initialized tensor drawn from `rng`.
pub fn randn<T: Real>(shape: Vec<usize>, std: f64, rng: &mut CounterRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64c(rng.normal() * std))
}

/// Adds `<name>.w` (fan-in scaled normal) and `<name>.b` (zeros).
pub(crate) fn init_dense<T: Real>(
    s: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut CounterRng,
) -> crate::Result<()> {
    s.insert(format!("{name}.w"), randn(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng))?;
    s.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]))
}

/// `x·W + b` using the `<name>.w` / `<name>.b` parameters.
pub(crate) fn dense<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> crate::Result<Var> {
    tape.linear(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))))
}
