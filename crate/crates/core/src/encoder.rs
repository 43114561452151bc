//! Point-cloud tokenizer and token encoder.
//!
//! A cloud is split into `M` groups of `g` points around FPS centers. Each
//! group goes through a shared per-point MLP and a max-pool; a small MLP
//! embeds the group center; one attention layer mixes the `M` tokens.

use serde::{Deserialize, Serialize};

use crate::data::{fps_indices, Point, PointCloud};
use crate::error::{Error, Result};
use crate::numerics::{dense, init_dense, randn, Bound, CounterRng, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Tokens per cloud (M).
    pub tokens: usize,
    /// Points per group (g).
    pub group_size: usize,
    /// Feature width (D).
    pub dim: usize,
    /// Hidden width of the per-point and center MLPs.
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            group_size: 64,
            dim: 64,
            hidden: 32,
        }
    }
}

/// A cloud split into groups. `groups` holds `tokens * group_size` points,
/// group by group, relative to their center.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub centers: Vec<Point>,
    pub groups: Vec<Point>,
    pub group_size: usize,
}

impl Tokenized {
    pub fn tokens(&self) -> usize {
        self.centers.len()
    }

    pub fn group(&self, i: usize) -> &[Point] {
        &self.groups[i * self.group_size..(i + 1) * self.group_size]
    }
}

/// Centers come from `fps(cloud, m, 0)`; each group is the `g` nearest
/// points to its center (ties by lower index), nearest first.
pub fn tokenize(cloud: &PointCloud, m: usize, g: usize) -> Result<Tokenized> {
    let n = cloud.len();
    if m > n {
        return Err(Error::InvalidArgument(format!("{m} tokens requested from {n} points")));
    }
    if g == 0 || g > n {
        return Err(Error::InvalidArgument(format!("group size {g} invalid for {n} points")));
    }
    let pts = cloud.points();
    let centers: Vec<Point> = fps_indices(cloud, m, 0)?.into_iter().map(|i| pts[i]).collect();
    let mut groups = Vec::with_capacity(m * g);
    let mut order: Vec<(f32, usize)> = Vec::with_capacity(n);
    for c in &centers {
        order.clear();
        order.extend(pts.iter().enumerate().map(|(i, p)| {
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i)
        }));
        order.select_nth_unstable_by(g - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &mut order[..g];
        near.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        groups.extend(near.iter().map(|&(_, i)| {
            let p = pts[i];
            [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
        }));
    }
    Ok(Tokenized {
        centers,
        groups,
        group_size: g,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Student,
    Teacher,
    Predicted,
}

/// `M × D` token features of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTokens<T> {
    pub tokens: Tensor<T>,
    pub source: FeatureSource,
}

impl<T: Real> FeatureTokens<T> {
    /// Mean over tokens.
    pub fn pool(&self) -> Vec<T> {
        let (m, d) = (self.tokens.rows(), self.tokens.cols());
        let mut out = vec![T::zero(); d];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(self.tokens.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize(m).unwrap();
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

pub fn init_encoder<T: Real>(cfg: &EncoderConfig, rng: &mut CounterRng) -> Result<ParamStore<T>> {
    let (h, d) = (cfg.hidden, cfg.dim);
    let mut s = ParamStore::new();
    init_dense(&mut s, "point1", 3, h, rng)?;
    init_dense(&mut s, "point2", h, d, rng)?;
    init_dense(&mut s, "pos1", 3, h, rng)?;
    init_dense(&mut s, "pos2", h, d, rng)?;
    for name in ["mix.q", "mix.k", "mix.v", "mix.o"] {
        s.insert(format!("{name}.w"), randn(vec![d, d], 1.0 / (d as f64).sqrt(), rng))?;
    }
    Ok(s)
}

pub(crate) fn mlp2<T: Real>(tape: &mut Tape<T>, p: &Bound, a: &str, b: &str, x: Var) -> Result<Var> {
    let h = dense(tape, p, a, x)?;
    let h = tape.gelu(h)?;
    dense(tape, p, b, h)
}

/// Encodes a batch of tokenized clouds into `[B·M, D]` token features.
pub fn encode_batch<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &EncoderConfig, batch: &[&Tokenized]) -> Result<Var> {
    let (m, g) = (cfg.tokens, cfg.group_size);
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty encoder batch".into()));
    }
    for t in batch {
        if t.tokens() != m || t.group_size != g {
            return Err(Error::shape(
                "encode",
                format!("tokenized as {}x{}, encoder expects {m}x{g}", t.tokens(), t.group_size),
            ));
        }
    }
    let b = batch.len();
    let rel: Vec<T> = batch
        .iter()
        .flat_map(|t| t.groups.iter().flatten().map(|&v| T::from_f32(v).unwrap()))
        .collect();
    let centers: Vec<T> = batch
        .iter()
        .flat_map(|t| t.centers.iter().flatten().map(|&v| T::from_f32(v).unwrap()))
        .collect();
    let rel = tape.constant(Tensor::matrix(b * m * g, 3, rel)?)?;
    let centers = tape.constant(Tensor::matrix(b * m, 3, centers)?)?;

    let per_point = mlp2(tape, p, "point1", "point2", rel)?;
    let pooled = tape.max_blocks(per_point, g)?;
    let pos = mlp2(tape, p, "pos1", "pos2", centers)?;
    let x = tape.add(pooled, pos)?;

    let y = tape.layer_norm(x, T::from_f64c(1e-6))?;
    let q = tape.matmul(y, p.var("mix.q.w"))?;
    let k = tape.matmul(y, p.var("mix.k.w"))?;
    let v = tape.matmul(y, p.var("mix.v.w"))?;
    let a = tape.attention(q, k, v, m)?;
    let o = tape.matmul(a, p.var("mix.o.w"))?;
    tape.add(x, o)
}

/// Gradient-free encoding of one tokenized cloud.
pub fn encode_tokens<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    tokens: &Tokenized,
    source: FeatureSource,
) -> Result<FeatureTokens<T>> {
    Ok(FeatureTokens {
        tokens: encode_frozen(params, cfg, &[tokens])?,
        source,
    })
}

/// Tokenizes and encodes a cloud without gradient tracking.
pub fn encode<T: Real>(params: &ParamStore<T>, cfg: &EncoderConfig, cloud: &PointCloud) -> Result<FeatureTokens<T>> {
    let t = tokenize(cloud, cfg.tokens, cfg.group_size)?;
    encode_tokens(params, cfg, &t, FeatureSource::Student)
}

/// Batched gradient-free encoding; returns `[B·M, D]`.
pub fn encode_frozen<T: Real>(params: &ParamStore<T>, cfg: &EncoderConfig, batch: &[&Tokenized]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape)?;
    let z = encode_batch(&mut tape, &p, cfg, batch)?;
    Ok(tape.value(z).clone())
}

/// Mean over each cloud's tokens: `[B·M, D] -> [B, D]`.
pub fn pool<T: Real>(tape: &mut Tape<T>, z: Var, tokens: usize) -> Result<Var> {
    tape.mean_blocks(z, tokens)
}

/// `target ← m·target + (1 − m)·online`, elementwise.
pub fn ema_update<T: Real>(target: &mut ParamStore<T>, online: &ParamStore<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if !target.same_layout(online) {
        return Err(Error::shape("ema_update", "target and online stores differ in layout"));
    }
    let m = T::from_f64c(momentum);
    let one_m = T::from_f64c(1.0 - momentum);
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        for (x, &y) in t.data_mut().iter_mut().zip(o.data()) {
            *x = m * *x + one_m * y;
        }
    }
    Ok(())
}

/// Cosine ramp from `m0` at step 0 to 1 at `total_steps`.
pub fn momentum_schedule(step: u64, total_steps: u64, m0: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    1.0 - (1.0 - m0) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = CounterRng::new(seed, 0);
        PointCloud::new(
            (0..n)
                .map(|_| [r.uniform() as f32, r.uniform() as f32, r.uniform() as f32 * 0.2])
                .collect(),
        )
        .unwrap()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            tokens: 4,
            group_size: 8,
            dim: 16,
            hidden: 8,
        }
    }

    #[test]
    fn single_group_is_centered_cloud() {
        let c = cloud(10, 1);
        let t = tokenize(&c, 1, 10).unwrap();
        assert_eq!(t.centers[0], c.points()[0]);
        let mut got: Vec<_> = t.groups.iter().map(|p| p.map(f32::to_bits)).collect();
        let ctr = c.points()[0];
        let mut want: Vec<_> = c
            .points()
            .iter()
            .map(|p| [p[0] - ctr[0], p[1] - ctr[1], p[2] - ctr[2]].map(f32::to_bits))
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn translation_moves_centers_only() {
        let c = cloud(64, 2);
        let shift = [0.5f32, -0.25, 0.125];
        let a = tokenize(&c, 4, 8).unwrap();
        let b = tokenize(&c.translated(shift), 4, 8).unwrap();
        for (ca, cb) in a.centers.iter().zip(&b.centers) {
            for i in 0..3 {
                assert!((cb[i] - ca[i] - shift[i]).abs() < 1e-6);
            }
        }
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            for i in 0..3 {
                assert!((ga[i] - gb[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_clusters_get_one_center_each() {
        let mut pts: Vec<Point> = cloud(20, 3).points().to_vec();
        pts.extend(cloud(20, 4).points().iter().map(|p| [p[0] + 10.0, p[1], p[2]]));
        let t = tokenize(&PointCloud::new(pts).unwrap(), 2, 5).unwrap();
        assert!(t.centers[0][0] < 5.0 && t.centers[1][0] > 5.0);
    }

    #[test]
    fn too_many_tokens() {
        assert!(tokenize(&cloud(3, 0), 4, 1).is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let cfg = small_cfg();
        let p: ParamStore<f32> = init_encoder(&cfg, &mut CounterRng::new(0, 1)).unwrap();
        let c = cloud(64, 5);
        let a = encode(&p, &cfg, &c).unwrap();
        let b = encode(&p, &cfg, &c).unwrap();
        assert_eq!(a.tokens.shape(), &[4, 16]);
        assert_eq!(a, b);
    }

    #[test]
    fn group_order_does_not_matter() {
        let cfg = small_cfg();
        let p: ParamStore<f32> = init_encoder(&cfg, &mut CounterRng::new(0, 1)).unwrap();
        let t = tokenize(&cloud(64, 6), 4, 8).unwrap();
        let mut shuffled = t.clone();
        let mut r = CounterRng::new(1, 1);
        for gi in 0..4 {
            r.shuffle(&mut shuffled.groups[gi * 8..(gi + 1) * 8]);
        }
        assert_ne!(t.groups, shuffled.groups);
        let a = encode_tokens(&p, &cfg, &t, FeatureSource::Student).unwrap();
        let b = encode_tokens(&p, &cfg, &shuffled, FeatureSource::Student).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn pool_examples() {
        let z = FeatureTokens {
            tokens: Tensor::<f64>::matrix(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap(),
            source: FeatureSource::Student,
        };
        assert_eq!(z.pool(), vec![1.0, 1.0]);
        let one = FeatureTokens {
            tokens: Tensor::<f64>::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(),
            source: FeatureSource::Teacher,
        };
        assert_eq!(one.pool(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn ema_examples() {
        let mut t = ParamStore::<f64>::new();
        t.insert("w", Tensor::full(vec![3], 1.0)).unwrap();
        let mut o = ParamStore::<f64>::new();
        o.insert("w", Tensor::zeros(vec![3])).unwrap();
        let mut t1 = t.clone();
        ema_update(&mut t1, &o, 1.0).unwrap();
        assert_eq!(t1, t);
        let mut t2 = t.clone();
        ema_update(&mut t2, &o, 0.996).unwrap();
        assert_eq!(t2.get("w").unwrap().data(), &[0.996; 3]);
        ema_update(&mut t2, &o, 0.0).unwrap();
        assert_eq!(t2, o);
        assert!(ema_update(&mut t2, &o, 1.5).is_err());
    }

    #[test]
    fn momentum_endpoints() {
        assert!((momentum_schedule(0, 1000, 0.996) - 0.996).abs() < 1e-15);
        assert_eq!(momentum_schedule(1000, 1000, 0.996), 1.0);
        assert!((momentum_schedule(500, 1000, 0.996) - 0.998).abs() < 1e-15);
    }
}
