//! Acceptance criteria A1-A9, one line each. Set `ACCEPTANCE_STRICT=1` to
//! turn any FAIL into a non-zero exit.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::fps_oracle;
use latent_dyn::data::{
    decode_dataset, encode_dataset, fps_indices, generate_dataset, Point, PointCloud, SceneConfig, Trajectory,
};
use latent_dyn::dynamics::{
    action_input, fdm_denoise, fdm_forward, make_noise_schedule, noise_feature, noise_with_abar, predict_future,
    predict_history, Direction, FdmTrace, IdmInput, Models, ScheduleKind,
};
use latent_dyn::encoder::{ema_update, tokenize, Tokenized};
use latent_dyn::eval::{run_probe, ProbeReport};
use latent_dyn::gradsuite::{run_suite, POINTS_PER_OP, TOLERANCE};
use latent_dyn::numerics::{randn, CounterRng, Tape, Tensor};
use latent_dyn::objective::{vicreg_values, ObjectiveKind, VicregWeights};
use latent_dyn::trainer::{
    checkpoint_path, decode_checkpoint, encode_checkpoint, final_checkpoint_path, load_checkpoint, metrics_path, train,
    TrainConfig, TrainState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: &str, title: &str, o: &Outcome, failures: &mut Vec<String>) {
    println!("{id} {} {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        failures.push(id.to_string());
    }
}

fn a1() -> Outcome {
    let start = Instant::now();
    let results = run_suite(0, POINTS_PER_OP).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    Outcome {
        pass: failed.is_empty() && secs <= 120.0 && results.iter().all(|r| r.points >= 20),
        detail: format!(
            "{} checks, worst {} at {:.2e} (limit {TOLERANCE:.0e}), {secs:.1} s (limit 120 s){}",
            results.len(),
            worst.name,
            worst.max_rel_err,
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(" ")) }
        ),
    }
}

fn a2() -> Outcome {
    let cfg = TrainConfig::desk().model();
    let s = cfg.fdm_shape();
    let m = cfg.encoder.tokens;
    let mut worst_ln = 0.0f64;
    let mut blocks_exact = true;
    for seed in 0..8u64 {
        let models: Models<f32> = Models::init(cfg, seed).unwrap();
        let mut rng = CounterRng::new(seed, 77);
        let z = randn::<f32>(vec![2 * m, s.dim], 1.0, &mut rng);
        let zc = randn::<f32>(vec![2, s.dim], 1.0, &mut rng);
        let a = randn::<f32>(vec![2, s.d_act], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = models.fdm.bind(&mut tape).unwrap();
        let (zv, zcv, av) = (tape.constant(z.clone()).unwrap(), tape.constant(zc.clone()).unwrap(), tape.constant(a.clone()).unwrap());
        let mut trace = FdmTrace { residual: Vec::new() };
        fdm_forward(&mut tape, &p, &s, zv, zcv, av, &[1, s_steps()], Some(&mut trace)).unwrap();
        blocks_exact &= trace.residual.len() == s.blocks + 1;
        blocks_exact &= trace.residual.windows(2).all(|w| tape.value(w[0]) == tape.value(w[1]));

        let item = Tensor::matrix(m, s.dim, z.data()[..m * s.dim].to_vec()).unwrap();
        let tau = 1 + (seed as usize * 13) % s_steps();
        let out = fdm_denoise(&models.fdm, &s, &item, &zc.data()[..s.dim], &a.data()[..s.d_act], tau).unwrap();
        for r in 0..m {
            let row: Vec<f64> = item.data()[r * s.dim..(r + 1) * s.dim].iter().map(|&v| v as f64).collect();
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for (c, v) in row.iter().enumerate() {
                let want = (v - mean) / (var + 1e-6).sqrt();
                worst_ln = worst_ln.max((out.data()[r * s.dim + c] as f64 - want).abs());
            }
        }
    }
    Outcome {
        pass: blocks_exact && worst_ln <= 1e-6,
        detail: format!(
            "{} blocks identical bitwise: {blocks_exact}; max |denoise - LN(z)| {worst_ln:.2e} (limit 1e-6)",
            TrainConfig::desk().blocks
        ),
    }
}

fn s_steps() -> usize {
    TrainConfig::desk().diffusion_steps
}

fn a3() -> Outcome {
    let sched = make_noise_schedule(s_steps(), ScheduleKind::Cosine).unwrap();
    let (draws, dim) = (10_000usize, 512usize);
    let n = (draws * dim) as f64;
    let z = Tensor::<f64>::zeros(vec![draws, dim]);
    let mut lines = Vec::new();
    let mut pass = true;
    for tau in [1usize, 25, 50, 75, 100] {
        let eps = randn::<f64>(vec![draws, dim], 1.0, &mut CounterRng::new(tau as u64, 303));
        let x = noise_feature(&z, tau, &eps, &sched).unwrap();
        let target = 1.0 - sched.abar(tau);
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mean_ok = mean.abs() <= 4.0 * (target / n).sqrt();
        let var_ok = (var - target).abs() <= 4.0 * target * (2.0 / (n - 1.0)).sqrt();
        pass &= mean_ok && var_ok;
        lines.push(format!("tau {tau}: var {var:.5} vs {target:.5}"));
    }
    let eps = randn::<f64>(vec![4, dim], 1.0, &mut CounterRng::new(1, 304));
    let zr = randn::<f64>(vec![4, dim], 1.0, &mut CounterRng::new(2, 304));
    let identity = noise_with_abar(&zr, 1.0, &eps).unwrap() == zr;
    pass &= identity;
    Outcome {
        pass,
        detail: format!("{}; identity at abar=1: {identity}", lines.join(", ")),
    }
}

fn a4() -> Outcome {
    let mut rng = CounterRng::new(4, 404);
    let mut checked = 0;
    let mut mismatches = 0;
    for cloud_idx in 0..200 {
        let n = 1 + rng.below(12) as usize;
        // half the clouds live on a coarse grid so distance ties are common
        let grid = cloud_idx % 2 == 0;
        let pts: Vec<Point> = (0..n)
            .map(|_| {
                [0; 3].map(|_| if grid { rng.below(4) as f32 } else { rng.uniform_range(-1.0, 1.0) as f32 })
            })
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        for m in 1..=n {
            for start in 0..n {
                checked += 1;
                if fps_indices(&cloud, m, start).unwrap() != fps_oracle(&pts, m, start) {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches over {checked} (cloud, m, start) cases on 200 clouds"),
    }
}

struct DeskRun {
    report: ProbeReport,
    seconds: f64,
}

fn desk_run(name: &str, trajs: &[Trajectory], root: &Path, edit: impl FnOnce(&mut TrainConfig)) -> DeskRun {
    let mut cfg = TrainConfig::desk();
    edit(&mut cfg);
    let start = Instant::now();
    let state = train(TrainState::new(cfg.clone()).unwrap(), trajs, &root.join(name)).expect("desk run trains");
    let seconds = start.elapsed().as_secs_f64();
    let report = run_probe(&state.models, &cfg, trajs).unwrap();
    println!(
        "   {name}: {seconds:.0} s, R2 {:.3}, shuffled {:.3}, teacher std min {:.4} median {:.4}",
        report.r2, report.r2_shuffled, report.min_std, report.median_std
    );
    DeskRun { report, seconds }
}

fn a8(root: &Path) -> Outcome {
    let trajs = generate_dataset(&SceneConfig::default(), 24, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint_every: 1,
        ..TrainConfig::desk()
    };
    let run = |name: &str| {
        train(TrainState::new(cfg.clone()).unwrap(), &trajs, &root.join(name)).unwrap();
        fs::read(final_checkpoint_path(&root.join(name))).unwrap()
    };
    let first = run("det_a");
    let second = run("det_b");
    let resumed_dir = root.join("det_resume");
    fs::create_dir_all(&resumed_dir).unwrap();
    fs::copy(metrics_path(&root.join("det_a")), metrics_path(&resumed_dir)).unwrap();
    let state = load_checkpoint(&checkpoint_path(&root.join("det_a"), 1)).unwrap();
    train(state, &trajs, &resumed_dir).unwrap();
    let resumed = fs::read(final_checkpoint_path(&resumed_dir)).unwrap();
    Outcome {
        pass: first == second && first == resumed,
        detail: format!(
            "repeat run identical: {}; resume from epoch 1 identical: {} ({} bytes, desk model, 24 trajectories, 3 epochs)",
            first == second,
            first == resumed,
            first.len()
        ),
    }
}

fn a9() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let cfg = TrainConfig::desk();
    let base: Models<f32> = Models::init(cfg.model(), 1).unwrap();
    let online = Models::<f32>::init(cfg.model(), 2).unwrap().online;

    let (mut frozen, mut follow) = (base.target.clone(), base.target.clone());
    for _ in 0..10 {
        ema_update(&mut frozen, &online, 1.0).unwrap();
        ema_update(&mut follow, &online, 0.0).unwrap();
    }
    checks.push(("ema m=1 keeps target", frozen == base.target));
    checks.push(("ema m=0 copies online", follow == online));

    let mut rng = CounterRng::new(9, 909);
    let mut shift_ok = true;
    for _ in 0..1000 {
        let mut grid = || (0..cfg.dim).map(|_| (rng.below(8001) as f32 - 4000.0) / 8.0).collect::<Vec<f32>>();
        let (a, b, c) = (grid(), grid(), grid());
        let add = |x: &[f32]| x.iter().zip(&c).map(|(p, q)| p + q).collect::<Vec<f32>>();
        for dir in [Direction::Forward, Direction::Backward] {
            let plain = action_input(IdmInput::Diff, &a, &b, dir).unwrap();
            let moved = action_input(IdmInput::Diff, &add(&a), &add(&b), dir).unwrap();
            shift_ok &= plain.iter().zip(&moved).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    checks.push(("difference shift invariance", shift_ok));

    let scene = SceneConfig { length: 6, ..SceneConfig::default() };
    let trajs = generate_dataset(&scene, 2, 3).unwrap();
    let toks: Vec<Tokenized> = trajs
        .iter()
        .flat_map(|t| t.frames[..3].iter().map(|f| tokenize(f, cfg.tokens, cfg.group_size).unwrap()))
        .collect();
    let a: Vec<&Tokenized> = toks[..3].iter().collect();
    let b: Vec<&Tokenized> = toks[3..].iter().collect();
    let sched = make_noise_schedule(cfg.diffusion_steps, ScheduleKind::Cosine).unwrap();
    let eps = randn::<f32>(vec![3 * cfg.tokens, cfg.dim], 1.0, &mut CounterRng::new(5, 5));
    let taus = [1, 40, 100];
    let branch = |history: bool| {
        let mut tape = Tape::new();
        let bound = base.bind(&mut tape).unwrap();
        let o = if history {
            predict_history(&mut tape, &base, &bound, &sched, &a, &b, &taus, &eps).unwrap()
        } else {
            predict_future(&mut tape, &base, &bound, &sched, &b, &a, &taus, &eps).unwrap()
        };
        [o.pred, o.target, o.alpha].map(|v| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    checks.push(("history equals reversed future", branch(true) == branch(false)));

    let w = VicregWeights::default();
    let x = randn::<f64>(vec![16, 8], 1.0, &mut CounterRng::new(6, 6));
    let av = 1.5 * (3.0f64 / 4.0).sqrt();
    let orth = Tensor::matrix(4, 2, vec![av, av, av, -av, -av, av, -av, -av]).unwrap();
    let [_, var0, cov0, _] = vicreg_values(&orth, &orth, &w).unwrap();
    checks.push(("vicreg inv zero on equal inputs", vicreg_values(&x, &x, &w).unwrap()[0] == 0.0));
    checks.push(("vicreg var zero above threshold", var0 == 0.0));
    checks.push(("vicreg cov zero when decorrelated", cov0.abs() < 1e-28));

    let data = generate_dataset(&SceneConfig::default(), 5, 12).unwrap();
    let back = decode_dataset(&encode_dataset(&data).unwrap()).unwrap();
    checks.push((
        "dataset round trip",
        encode_dataset(&back).unwrap() == encode_dataset(&data).unwrap() && data.iter().zip(&back).all(|(p, q)| p.same_data(q)),
    ));
    let mut state = TrainState::new(cfg.clone()).unwrap();
    state.step = 17;
    state.opt.set_step(17);
    state.rng.next_u64();
    let bytes = encode_checkpoint(&state).unwrap();
    let restored = decode_checkpoint(&bytes).unwrap();
    checks.push(("checkpoint round trip", restored == state && encode_checkpoint(&restored).unwrap() == bytes));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome {
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} invariant checks hold", checks.len())
        } else {
            format!("failing: {}", failed.join(", "))
        },
    }
}

fn main() {
    let mut failures = Vec::new();
    report("A1", "gradient correctness", &a1(), &mut failures);
    report("A2", "AdaLN-Zero identity at init", &a2(), &mut failures);
    report("A3", "noising statistics", &a3(), &mut failures);
    report("A4", "FPS oracle equivalence", &a4(), &mut failures);

    let root = tempfile::tempdir().unwrap();
    let trajs = generate_dataset(&SceneConfig::default(), 200, 0).unwrap();
    let full = desk_run("vicreg", &trajs, root.path(), |_| {});
    let mse = desk_run("mse", &trajs, root.path(), |c| c.objective = ObjectiveKind::Mse);
    let no_hist = desk_run("no_history", &trajs, root.path(), |c| c.no_history = true);
    let concat = desk_run("concat", &trajs, root.path(), |c| c.idm_input = IdmInput::Concat);
    let slowest = [&full, &mse, &no_hist, &concat].iter().map(|r| r.seconds).fold(0.0, f64::max);

    let ratio = mse.report.median_std / full.report.median_std;
    report(
        "A5",
        "collapse ablation",
        &Outcome {
            pass: full.report.min_std >= 0.1 && ratio <= 0.2 && slowest <= 1800.0,
            detail: format!(
                "VICReg min std {:.4} (>= 0.1); MSE median {:.4} is {:.1}% of VICReg median {:.4} (<= 20%); slowest run {slowest:.0} s (<= 1800 s)",
                full.report.min_std,
                mse.report.median_std,
                100.0 * ratio,
                full.report.median_std
            ),
        },
        &mut failures,
    );
    report(
        "A6",
        "latent-action decodability",
        &Outcome {
            pass: full.report.r2 >= 0.7 && full.report.r2_shuffled <= 0.1,
            detail: format!(
                "held-out R2 {:.3} (>= 0.7), shuffled control {:.3} (<= 0.1), {} transitions",
                full.report.r2, full.report.r2_shuffled, full.report.n_samples
            ),
        },
        &mut failures,
    );
    report(
        "A7",
        "ablation ordering",
        &Outcome {
            pass: no_hist.report.r2 <= full.report.r2 + 0.02 && concat.report.r2 <= full.report.r2 + 0.02,
            detail: format!(
                "full {:.3}, no-history {:.3}, concat {:.3} (each <= full + 0.02)",
                full.report.r2, no_hist.report.r2, concat.report.r2
            ),
        },
        &mut failures,
    );
    report("A8", "determinism and resume", &a8(root.path()), &mut failures);
    report("A9", "exact algebraic invariants", &a9(), &mut failures);

    println!("{} of 9 criteria passed", 9 - failures.len());
    if !failures.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
