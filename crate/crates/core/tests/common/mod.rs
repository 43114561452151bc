//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use latent_dyn::data::{generate_dataset, Point, SceneConfig, Trajectory};
use latent_dyn::trainer::TrainConfig;

/// Greedy max-min selection recomputing every distance from scratch.
pub fn fps_oracle(pts: &[Point], m: usize, start: usize) -> Vec<usize> {
    let d2 = |a: &Point, b: &Point| -> f64 { (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum() };
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in pts.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let near = chosen.iter().map(|&c| d2(p, &pts[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| near > bd) {
                best = Some((near, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Least squares with intercept via the normal equations; returns
/// `[intercept, w_1..w_d]` for each target column.
pub fn ols_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = x[0].len() + 1;
    let rows: Vec<Vec<f64>> = x.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
    let mut xtx = vec![vec![0.0; d]; d];
    for r in &rows {
        for i in 0..d {
            for j in 0..d {
                xtx[i][j] += r[i] * r[j];
            }
        }
    }
    (0..y[0].len())
        .map(|k| {
            let xty: Vec<f64> = (0..d).map(|i| rows.iter().zip(y).map(|(r, t)| r[i] * t[k]).sum()).collect();
            solve(xtx.clone(), xty)
        })
        .collect()
}

/// Unbiased standard deviation, mean first.
pub fn two_pass_std(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// A model and scene small enough for end-to-end runs in tests.
pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        pairs_per_trajectory: 2,
        dim: 8,
        tokens: 4,
        group_size: 8,
        encoder_hidden: 8,
        d_act: 4,
        idm_hidden: 8,
        cond_width: 8,
        ffn_hidden: 8,
        blocks: 2,
        diffusion_steps: 10,
        checkpoint_every: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

pub fn tiny_scene() -> SceneConfig {
    SceneConfig {
        n_points: 64,
        length: 8,
        ..SceneConfig::default()
    }
}

pub fn tiny_dataset(count: usize) -> Vec<Trajectory> {
    generate_dataset(&tiny_scene(), count, 11).unwrap()
}
