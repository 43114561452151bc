//! Linear probes of latent actions, collapse statistics and 2-D feature embeddings.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::dynamics::{idm_forward, Models};
use crate::encoder::{encode_frozen, tokenize, Tokenized};
use crate::error::{Error, Result};
use crate::numerics::{CounterRng, Stream, Tape, Tensor};
use crate::trainer::TrainConfig;

const TRAIN_FRACTION: f64 = 0.8;
const RIDGE: f64 = 1e-6;
const ENCODE_CHUNK: usize = 256;

/// Least-squares fit with intercept: `coef` is `(1 + p) × a`, intercept row first.
#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coef: DMatrix<f64>,
    pub ridge: bool,
}

impl OlsFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        with_intercept(x) * &self.coef
    }
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    d.columns_mut(1, x.ncols()).copy_from(x);
    d
}

/// Solves the normal equations by Cholesky; adds a `1e-6` ridge when the
/// Gram matrix is not positive definite.
pub fn fit_ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<OlsFit> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("fit_ols", format!("{} inputs vs {} targets", x.nrows(), y.nrows())));
    }
    let d = with_intercept(x);
    let gram = d.transpose() * &d;
    let rhs = d.transpose() * y;
    if let Some(ch) = gram.clone().cholesky() {
        let coef = ch.solve(&rhs);
        if coef.iter().all(|v| v.is_finite()) {
            return Ok(OlsFit { coef, ridge: false });
        }
    }
    let scale = gram.diagonal().max().max(1.0);
    let n = gram.nrows();
    let reg = gram + DMatrix::identity(n, n) * (RIDGE * scale);
    let ch = reg
        .cholesky()
        .ok_or(Error::NonFinite { op: "fit_ols" })?;
    log::warn!("probe design matrix is rank deficient; fitted with ridge {RIDGE}");
    Ok(OlsFit {
        coef: ch.solve(&rhs),
        ridge: true,
    })
}

/// Mean over target columns of `1 − SS_res / SS_tot`. A column with zero
/// spread scores 1 if predicted exactly and 0 otherwise.
pub fn r_squared(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for c in 0..y.ncols() {
        let col = y.column(c);
        let mean = col.mean();
        let ss_tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = col.iter().zip(pred.column(c).iter()).map(|(a, b)| (a - b).powi(2)).sum();
        total += if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    total / y.ncols() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    /// Held-out R², averaged over target dimensions.
    pub r2: f64,
    pub r2_train: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub ridge: bool,
}

/// OLS with intercept from latent actions to ground-truth actions, fit on
/// the first 80% of rows and scored on the rest.
pub fn linear_probe(alphas: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<ProbeFit> {
    let n = alphas.nrows();
    if actions.nrows() != n {
        return Err(Error::shape("linear_probe", format!("{n} latent actions vs {} targets", actions.nrows())));
    }
    let n_train = (n as f64 * TRAIN_FRACTION).floor() as usize;
    if n <= alphas.ncols() + 1 || n_train <= alphas.ncols() + 1 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "{n} samples are too few to probe {} latent dimensions",
            alphas.ncols()
        )));
    }
    let (xtr, xte) = (alphas.rows(0, n_train).into_owned(), alphas.rows(n_train, n - n_train).into_owned());
    let (ytr, yte) = (actions.rows(0, n_train).into_owned(), actions.rows(n_train, n - n_train).into_owned());
    let fit = fit_ols(&xtr, &ytr)?;
    Ok(ProbeFit {
        r2: r_squared(&fit.predict(&xte), &yte),
        r2_train: r_squared(&fit.predict(&xtr), &ytr),
        n_train,
        n_test: n - n_train,
        ridge: fit.ridge,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub per_dim_std: Vec<f64>,
    pub min_std: f64,
    pub median_std: f64,
}

/// Unbiased per-column standard deviations of `N × D` features.
pub fn collapse_metrics(features: &DMatrix<f64>) -> Result<CollapseMetrics> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("collapse metrics need at least 2 rows, got {n}")));
    }
    let per_dim_std: Vec<f64> = features
        .column_iter()
        .map(|c| {
            let mean = c.mean();
            (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        })
        .collect();
    let mut sorted = per_dim_std.clone();
    sorted.sort_by(f64::total_cmp);
    let d = sorted.len();
    let median_std = if d % 2 == 1 {
        sorted[d / 2]
    } else {
        0.5 * (sorted[d / 2 - 1] + sorted[d / 2])
    };
    Ok(CollapseMetrics {
        min_std: sorted[0],
        median_std,
        per_dim_std,
    })
}

#[derive(Clone, Debug)]
pub struct PcaEmbedding {
    /// `N × dims` projections of the centered features.
    pub coords: DMatrix<f64>,
    /// Columns are unit principal directions.
    pub components: DMatrix<f64>,
    pub explained: Vec<f64>,
}

/// Projects centered features onto the leading eigenvectors of their
/// covariance. Each component is flipped so its largest-magnitude loading
/// is positive.
pub fn pca_embed(features: &DMatrix<f64>, dims: usize) -> Result<PcaEmbedding> {
    let (n, d) = features.shape();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 rows, got {n}")));
    }
    if dims == 0 || dims > d {
        return Err(Error::InvalidArgument(format!("cannot embed {d} features into {dims} dimensions")));
    }
    let mean = features.row_mean();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = DMatrix::zeros(d, dims);
    let mut explained = Vec::with_capacity(dims);
    for (j, &i) in order.iter().take(dims).enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v = -v;
        }
        components.set_column(j, &v);
        explained.push(if total > 0.0 { eig.eigenvalues[i].max(0.0) / total } else { 0.0 });
    }
    Ok(PcaEmbedding {
        coords: centered * &components,
        components,
        explained,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub r2: f64,
    pub r2_shuffled: f64,
    pub per_dim_std: Vec<f64>,
    pub min_std: f64,
    pub median_std: f64,
    pub n_samples: usize,
    pub config: TrainConfig,
}

fn tokenize_all(trajs: &[Trajectory], m: &Models<f32>) -> Result<Vec<Tokenized>> {
    let e = &m.config.encoder;
    trajs
        .par_iter()
        .flat_map_iter(|t| t.frames.iter().map(|f| tokenize(f, e.tokens, e.group_size)))
        .collect()
}

fn pooled_features(params: &crate::numerics::ParamStore<f32>, m: &Models<f32>, tokens: &[Tokenized]) -> Result<DMatrix<f64>> {
    let e = &m.config.encoder;
    let chunks: Vec<Tensor<f32>> = tokens
        .par_chunks(ENCODE_CHUNK)
        .map(|c| {
            let refs: Vec<&Tokenized> = c.iter().collect();
            encode_frozen(params, e, &refs)
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(tokens.len(), e.dim);
    let mut row = 0;
    for z in &chunks {
        for item in 0..z.rows() / e.tokens {
            for t in 0..e.tokens {
                for (c, &v) in z.row(item * e.tokens + t).iter().enumerate() {
                    out[(row, c)] += v as f64 / e.tokens as f64;
                }
            }
            row += 1;
        }
    }
    Ok(out)
}

/// Pooled features of every frame, `[Σ L_i, D]`, trajectory-major.
pub fn frame_features(models: &Models<f32>, trajs: &[Trajectory], teacher: bool) -> Result<DMatrix<f64>> {
    let tokens = tokenize_all(trajs, models)?;
    let params = if teacher { &models.target } else { &models.online };
    pooled_features(params, models, &tokens)
}

/// Forward latent actions for every pair `(t, t+k)`, with the summed
/// ground-truth action over `[t, t+k)` as the target. Rows are trajectory-major.
pub fn latent_action_dataset(
    models: &Models<f32>,
    trajs: &[Trajectory],
    k: usize,
    online: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a_dim = trajs.first().map(Trajectory::action_dim).unwrap_or(0);
    let mut from = Vec::new();
    let mut to = Vec::new();
    let mut targets = Vec::new();
    let mut base = 0;
    for tr in trajs {
        if tr.len() <= k {
            return Err(Error::InvalidArgument(format!("trajectory of length {} has no pairs at k={k}", tr.len())));
        }
        for t in 0..tr.len() - k {
            from.push(base + t);
            to.push(base + t + k);
            targets.extend(tr.summed_action(t, k).into_iter().map(f64::from));
        }
        base += tr.len();
    }
    let d = online.ncols();
    let gather = |idx: &[usize]| -> Result<Tensor<f32>> {
        let data = idx.iter().flat_map(|&i| online.row(i).iter().map(|&v| v as f32).collect::<Vec<_>>()).collect();
        Tensor::matrix(idx.len(), d, data)
    };
    let mut tape = Tape::new();
    let p = models.idm.bind_frozen(&mut tape)?;
    let a = tape.constant(gather(&from)?)?;
    let b = tape.constant(gather(&to)?)?;
    let alpha = idm_forward(&mut tape, &p, models.config.idm_input, a, b)?;
    let alpha = tape.value(alpha);
    let x = DMatrix::from_row_iterator(alpha.rows(), alpha.cols(), alpha.data().iter().map(|&v| v as f64));
    let y = DMatrix::from_row_slice(from.len(), a_dim, &targets);
    Ok((x, y))
}

/// Probe and collapse statistics of a trained model on a dataset.
pub fn run_probe(models: &Models<f32>, config: &TrainConfig, trajs: &[Trajectory]) -> Result<ProbeReport> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("probe needs at least one trajectory".into()));
    }
    if trajs.iter().any(|t| t.action_dim() == 0) {
        return Err(Error::InvalidArgument("probe needs ground-truth actions".into()));
    }
    let online = frame_features(models, trajs, false)?;
    let teacher = frame_features(models, trajs, true)?;
    let (x, y) = latent_action_dataset(models, trajs, config.k, &online)?;
    let fit = linear_probe(&x, &y)?;

    let mut perm: Vec<usize> = (0..y.nrows()).collect();
    CounterRng::for_stream(config.seed, Stream::Probe, 0).shuffle(&mut perm);
    let shuffled = y.select_rows(perm.iter());
    let control = linear_probe(&x, &shuffled)?;

    let collapse = collapse_metrics(&teacher)?;
    Ok(ProbeReport {
        r2: fit.r2,
        r2_shuffled: control.r2,
        per_dim_std: collapse.per_dim_std,
        min_std: collapse.min_std,
        median_std: collapse.median_std,
        n_samples: x.nrows(),
        config: config.clone(),
    })
}

pub fn write_report(report: &ProbeReport, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(report)?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<ProbeReport> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// PCA of pooled online features as CSV `index,x,y,traj_id,frame`.
pub fn embedding_csv(models: &Models<f32>, trajs: &[Trajectory]) -> Result<String> {
    let feats = frame_features(models, trajs, false)?;
    let pca = pca_embed(&feats, 2)?;
    let mut out = String::from("index,x,y,traj_id,frame\n");
    let mut row = 0;
    for (ti, tr) in trajs.iter().enumerate() {
        for f in 0..tr.len() {
            out.push_str(&format!(
                "{row},{},{},{ti},{f}\n",
                pca.coords[(row, 0)],
                pca.coords[(row, 1)]
            ));
            row += 1;
        }
    }
    Ok(out)
}
