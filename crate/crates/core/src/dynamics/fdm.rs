use crate::error::{Error, Result};
use crate::numerics::{dense, init_dense, randn, Bound, CounterRng, ParamStore, Real, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Shape hyperparameters of the forward dynamics model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FdmShape {
    pub dim: usize,
    pub d_act: usize,
    pub cond_width: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
}

impl FdmShape {
    pub fn cond_dim(&self) -> usize {
        3 * self.cond_width
    }
}

/// Interleaved `(sin, cos)` pairs at frequencies `10000^(−2i/dim)`.
pub fn timestep_embedding(tau: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = tau as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

pub fn init_fdm<T: Real>(s: &FdmShape, rng: &mut CounterRng) -> Result<ParamStore<T>> {
    if !s.time_dim.is_multiple_of(2) || s.blocks == 0 {
        return Err(Error::InvalidArgument(format!(
            "time embedding width {} must be even and block count {} positive",
            s.time_dim, s.blocks
        )));
    }
    let (d, w, c) = (s.dim, s.cond_width, s.cond_dim());
    let mut p = ParamStore::new();
    for (name, d_in) in [("cond.z", d), ("cond.a", s.d_act), ("cond.t", s.time_dim)] {
        init_dense(&mut p, &format!("{name}.1"), d_in, w, rng)?;
        init_dense(&mut p, &format!("{name}.2"), w, w, rng)?;
    }
    let zero_head = |p: &mut ParamStore<T>, name: String| -> Result<()> {
        p.insert(format!("{name}.w"), Tensor::zeros(vec![c, d]))?;
        p.insert(format!("{name}.b"), Tensor::zeros(vec![d]))
    };
    for b in 0..s.blocks {
        for head in ["scale1", "shift1", "gate1", "scale2", "shift2", "gate2"] {
            zero_head(&mut p, format!("blk{b}.{head}"))?;
        }
        for m in ["q", "k", "v", "o"] {
            p.insert(format!("blk{b}.attn.{m}"), randn(vec![d, d], 1.0 / (d as f64).sqrt(), rng))?;
        }
        init_dense(&mut p, &format!("blk{b}.ffn.1"), d, s.ffn_hidden, rng)?;
        init_dense(&mut p, &format!("blk{b}.ffn.2"), s.ffn_hidden, d, rng)?;
    }
    zero_head(&mut p, "final.scale".into())?;
    zero_head(&mut p, "final.shift".into())?;
    p.insert("proj.w", Tensor::eye(d))?;
    p.insert("proj.b", Tensor::zeros(vec![d]))?;
    Ok(p)
}

/// `c = [MLP_z(z̄), MLP_α(α), MLP_τ(emb(τ))]`, one row per batch element.
pub fn condition_vector<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    s: &FdmShape,
    pooled: Var,
    alpha: Var,
    taus: &[usize],
) -> Result<Var> {
    let emb: Vec<T> = taus
        .iter()
        .flat_map(|&t| timestep_embedding(t, s.time_dim))
        .map(T::from_f64c)
        .collect();
    let emb = tape.constant(Tensor::matrix(taus.len(), s.time_dim, emb)?)?;
    let mut parts = Vec::with_capacity(3);
    for (name, x) in [("cond.z", pooled), ("cond.a", alpha), ("cond.t", emb)] {
        let h = dense(tape, p, &format!("{name}.1"), x)?;
        let h = tape.gelu(h)?;
        parts.push(dense(tape, p, &format!("{name}.2"), h)?);
    }
    tape.concat_cols(&parts)
}

/// `LN(x)·(1 + scale) + shift` with per-item `[B, D]` modulation broadcast
/// over each item's `tokens` rows.
pub fn adaln<T: Real>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var, tokens: usize) -> Result<Var> {
    let ln = tape.layer_norm(x, T::from_f64c(LN_EPS))?;
    let scale = tape.add_scalar(scale, T::one())?;
    let scale = tape.repeat_rows(scale, tokens)?;
    let shift = tape.repeat_rows(shift, tokens)?;
    let y = tape.mul(ln, scale)?;
    tape.add(y, shift)
}

/// Residual stream states of one denoising pass: the block inputs followed
/// by the last block's output.
pub struct FdmTrace {
    pub residual: Vec<Var>,
}

/// Single-pass denoising of `[B·M, D]` noisy tokens.
#[allow(clippy::too_many_arguments)]
pub fn fdm_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    s: &FdmShape,
    z_noisy: Var,
    pooled_cond: Var,
    alpha: Var,
    taus: &[usize],
    mut trace: Option<&mut FdmTrace>,
) -> Result<Var> {
    let rows = tape.value(z_noisy).rows();
    if taus.is_empty() || !rows.is_multiple_of(taus.len()) {
        return Err(Error::shape("fdm_denoise", format!("{rows} token rows for {} items", taus.len())));
    }
    let tokens = rows / taus.len();
    let c = condition_vector(tape, p, s, pooled_cond, alpha, taus)?;
    let gc = tape.gelu(c)?;
    let mut x = z_noisy;
    for b in 0..s.blocks {
        if let Some(t) = trace.as_deref_mut() {
            t.residual.push(x);
        }
        let head = |tape: &mut Tape<T>, name: &str| dense(tape, p, &format!("blk{b}.{name}"), gc);
        let (sc1, sh1, g1) = (head(tape, "scale1")?, head(tape, "shift1")?, head(tape, "gate1")?);
        let (sc2, sh2, g2) = (head(tape, "scale2")?, head(tape, "shift2")?, head(tape, "gate2")?);

        let h = adaln(tape, x, sc1, sh1, tokens)?;
        let q = tape.matmul(h, p.var(&format!("blk{b}.attn.q")))?;
        let k = tape.matmul(h, p.var(&format!("blk{b}.attn.k")))?;
        let v = tape.matmul(h, p.var(&format!("blk{b}.attn.v")))?;
        let a = tape.attention(q, k, v, tokens)?;
        let a = tape.matmul(a, p.var(&format!("blk{b}.attn.o")))?;
        let g1 = tape.repeat_rows(g1, tokens)?;
        let a = tape.mul(a, g1)?;
        x = tape.add(x, a)?;

        let h = adaln(tape, x, sc2, sh2, tokens)?;
        let h = dense(tape, p, &format!("blk{b}.ffn.1"), h)?;
        let h = tape.gelu(h)?;
        let h = dense(tape, p, &format!("blk{b}.ffn.2"), h)?;
        let g2 = tape.repeat_rows(g2, tokens)?;
        let h = tape.mul(h, g2)?;
        x = tape.add(x, h)?;
    }
    if let Some(t) = trace {
        t.residual.push(x);
    }
    let sc = dense(tape, p, "final.scale", gc)?;
    let sh = dense(tape, p, "final.shift", gc)?;
    let y = adaln(tape, x, sc, sh, tokens)?;
    dense(tape, p, "proj", y)
}

/// Gradient-free denoising of one item's `M × D` tokens.
pub fn fdm_denoise<T: Real>(
    params: &ParamStore<T>,
    s: &FdmShape,
    z_noisy: &Tensor<T>,
    pooled_cond: &[T],
    alpha: &[T],
    tau: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape)?;
    let z = tape.constant(z_noisy.clone())?;
    let zc = tape.constant(Tensor::matrix(1, pooled_cond.len(), pooled_cond.to_vec())?)?;
    let a = tape.constant(Tensor::matrix(1, alpha.len(), alpha.to_vec())?)?;
    let out = fdm_forward(&mut tape, &p, s, z, zc, a, &[tau], None)?;
    Ok(tape.value(out).clone())
}
