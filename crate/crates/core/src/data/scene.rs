//! Synthetic tabletop scenes: a table plane, one pushed box and static
//! boxes, resampled independently every frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CounterRng, Stream};

use super::cloud::{Aabb, Point, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_points: usize,
    /// Frames per trajectory.
    pub length: usize,
    /// Movable boxes; the first one is pushed, the others stay put.
    pub n_objects: usize,
    pub n_distractors: usize,
    /// Per-step push components are drawn from `[-action_bound, action_bound]`.
    pub action_bound: f32,
    /// Table extent is the x/y footprint; z bounds object heights.
    pub workspace: Aabb,
    /// Std of additive Gaussian noise on point heights (clipped at zero).
    pub depth_noise: f32,
    /// Share of points sampled from the table plane.
    pub table_fraction: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 512,
            length: 40,
            n_objects: 1,
            n_distractors: 1,
            action_bound: 0.03,
            workspace: Aabb {
                min: [-0.3, -0.3, 0.0],
                max: [0.3, 0.3, 0.4],
            },
            depth_noise: 0.002,
            table_fraction: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn action_dim(&self) -> usize {
        2
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_objects == 0 {
            return bad("scene.n_objects must be at least 1");
        }
        if self.workspace.validate().is_err() {
            return bad("scene.workspace is empty");
        }
        if self.length < 2 {
            return bad("scene.length must be at least 2");
        }
        if self.n_points < self.n_objects + self.n_distractors + 1 {
            return bad("scene.n_points too small for the number of surfaces");
        }
        if !(self.action_bound > 0.0) {
            return bad("scene.action_bound must be positive");
        }
        if !(self.depth_noise >= 0.0) {
            return bad("scene.depth_noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.table_fraction) {
            return bad("scene.table_fraction must lie in [0, 1)");
        }
        let span = (0..2).map(|i| self.workspace.max[i] - self.workspace.min[i]).fold(f32::INFINITY, f32::min);
        if span <= 4.0 * (MAX_HALF + MARGIN) {
            return bad("scene.workspace too small for objects");
        }
        Ok(())
    }
}

const MIN_HALF: f32 = 0.03;
const MAX_HALF: f32 = 0.08;
const MARGIN: f32 = 0.02;

/// Box resting on the table.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxObject {
    /// Center of the footprint, x/y.
    pub center: [f32; 2],
    pub half: [f32; 2],
    pub height: f32,
    pub actuated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDescriptor {
    /// Object layout at frame 0.
    pub objects: Vec<BoxObject>,
    /// Per frame, per point: 0 = table, 1 + i = object `i`.
    pub labels: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<PointCloud>,
    /// `frames.len() - 1` rows of `action_dim` values.
    pub actions: Vec<Vec<f32>>,
    pub seed: u64,
    /// Present for freshly generated trajectories; not serialized.
    pub scene: Option<SceneDescriptor>,
}

impl Trajectory {
    pub fn new(frames: Vec<PointCloud>, actions: Vec<Vec<f32>>, seed: u64) -> Result<Self> {
        let t = Self {
            frames,
            actions,
            seed,
            scene: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument("trajectory has no frames".into()));
        }
        if self.actions.len() + 1 != self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} actions for {} frames",
                self.actions.len(),
                self.frames.len()
            )));
        }
        let n = self.frames[0].len();
        if self.frames.iter().any(|f| f.len() != n) {
            return Err(Error::InvalidArgument("frames differ in point count".into()));
        }
        let a = self.action_dim();
        if self.actions.iter().any(|r| r.len() != a) {
            return Err(Error::InvalidArgument("ragged action rows".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.frames[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Sum of the actions applied over frames `[t, t + k)`.
    pub fn summed_action(&self, t: usize, k: usize) -> Vec<f32> {
        let mut s = vec![0.0f32; self.action_dim()];
        for row in &self.actions[t..t + k] {
            for (a, &v) in s.iter_mut().zip(row) {
                *a += v;
            }
        }
        s
    }

    /// Equality of the serialized content (frames, actions, seed).
    pub fn same_data(&self, other: &Self) -> bool {
        self.frames == other.frames && self.actions == other.actions && self.seed == other.seed
    }
}

/// Per-trajectory seed derived from a global seed and the trajectory index.
pub fn trajectory_seed(global_seed: u64, index: u32) -> u64 {
    CounterRng::for_stream(global_seed, Stream::Data, index).next_u64()
}

fn overlaps(a: &BoxObject, b: &BoxObject) -> bool {
    (0..2).all(|i| (a.center[i] - b.center[i]).abs() < a.half[i] + b.half[i] + MARGIN)
}

fn layout(cfg: &SceneConfig, rng: &mut CounterRng) -> Result<Vec<BoxObject>> {
    let ws = &cfg.workspace;
    let count = cfg.n_objects + cfg.n_distractors;
    let zmax = (ws.max[2] - ws.min[2]).min(0.15);
    let mut objects: Vec<BoxObject> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..1000 {
            let half = [
                rng.uniform_range(MIN_HALF as f64, MAX_HALF as f64) as f32,
                rng.uniform_range(MIN_HALF as f64, MAX_HALF as f64) as f32,
            ];
            let height = rng.uniform_range(0.3 * zmax as f64, zmax as f64) as f32;
            let center = [0, 1].map(|a| {
                let lo = ws.min[a] + half[a] + MARGIN;
                let hi = ws.max[a] - half[a] - MARGIN;
                rng.uniform_range(lo as f64, hi as f64) as f32
            });
            let cand = BoxObject {
                center,
                half,
                height,
                actuated: i == 0,
            };
            if objects.iter().all(|o| !overlaps(o, &cand)) {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config("could not place objects without overlap; enlarge the workspace".into()));
        }
    }
    Ok(objects)
}

/// Point budget per surface: table first, then objects in order.
fn allocate(cfg: &SceneConfig, n_boxes: usize) -> Vec<usize> {
    let table = ((cfg.n_points as f32 * cfg.table_fraction).round() as usize).min(cfg.n_points - n_boxes);
    let rest = cfg.n_points - table;
    let base = rest / n_boxes;
    let extra = rest % n_boxes;
    let mut out = vec![table];
    out.extend((0..n_boxes).map(|i| base + usize::from(i < extra)));
    out
}

fn sample_box_surface(b: &BoxObject, center: [f32; 2], z0: f32, rng: &mut CounterRng) -> Point {
    let (hx, hy, h) = (b.half[0] as f64, b.half[1] as f64, b.height as f64);
    // top, ±x sides, ±y sides (the bottom face rests on the table)
    let areas = [4.0 * hx * hy, 2.0 * hy * h, 2.0 * hy * h, 2.0 * hx * h, 2.0 * hx * h];
    let total: f64 = areas.iter().sum();
    let mut r = rng.uniform() * total;
    let mut face = 0;
    while face < areas.len() - 1 && r >= areas[face] {
        r -= areas[face];
        face += 1;
    }
    let u = rng.uniform() * 2.0 - 1.0;
    let w = rng.uniform();
    let (x, y, z) = match face {
        0 => (u * hx, (rng.uniform() * 2.0 - 1.0) * hy, h),
        1 => (hx, u * hy, w * h),
        2 => (-hx, u * hy, w * h),
        3 => (u * hx, hy, w * h),
        _ => (u * hx, -hy, w * h),
    };
    [center[0] + x as f32, center[1] + y as f32, z0 + z as f32]
}

fn render(
    cfg: &SceneConfig,
    objects: &[BoxObject],
    actuated_center: [f32; 2],
    budget: &[usize],
    rng: &mut CounterRng,
) -> Result<(PointCloud, Vec<u8>)> {
    let ws = &cfg.workspace;
    let z0 = ws.min[2];
    let mut pts: Vec<(Point, u8)> = Vec::with_capacity(cfg.n_points);
    for _ in 0..budget[0] {
        let x = rng.uniform_range(ws.min[0] as f64, ws.max[0] as f64) as f32;
        let y = rng.uniform_range(ws.min[1] as f64, ws.max[1] as f64) as f32;
        pts.push(([x, y, z0], 0));
    }
    for (i, (o, &count)) in objects.iter().zip(&budget[1..]).enumerate() {
        let c = if o.actuated { actuated_center } else { o.center };
        for _ in 0..count {
            pts.push((sample_box_surface(o, c, z0, rng), (i + 1) as u8));
        }
    }
    if cfg.depth_noise > 0.0 {
        for (p, _) in &mut pts {
            let z = p[2] + (rng.normal() * cfg.depth_noise as f64) as f32;
            p[2] = z.max(z0);
        }
    }
    rng.shuffle(&mut pts);
    let labels = pts.iter().map(|(_, l)| *l).collect();
    Ok((PointCloud::new(pts.into_iter().map(|(p, _)| p).collect())?, labels))
}

/// Generates one trajectory. The first movable box translates by
/// `actions[t]` (x, y) between frames `t` and `t + 1`; everything else is
/// static. Deterministic in `(cfg, seed)`.
pub fn generate_trajectory(cfg: &SceneConfig, seed: u64) -> Result<Trajectory> {
    generate_with(cfg, seed, None)
}

/// Same as [`generate_trajectory`] with a fixed push sequence
/// (`actions.len() == cfg.length - 1`).
pub fn generate_scripted(cfg: &SceneConfig, seed: u64, actions: Vec<[f32; 2]>) -> Result<Trajectory> {
    if actions.len() + 1 != cfg.length {
        return Err(Error::InvalidArgument("need length - 1 actions".into()));
    }
    generate_with(cfg, seed, Some(actions))
}

fn generate_with(cfg: &SceneConfig, seed: u64, scripted: Option<Vec<[f32; 2]>>) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = CounterRng::for_stream(seed, Stream::Data, 0);
    let objects = layout(cfg, &mut rng)?;
    let budget = allocate(cfg, objects.len());
    let act = &objects[0];
    let lo = [0, 1].map(|a| cfg.workspace.min[a] + act.half[a] + MARGIN);
    let hi = [0, 1].map(|a| cfg.workspace.max[a] - act.half[a] - MARGIN);

    let mut pos = act.center;
    let mut frames = Vec::with_capacity(cfg.length);
    let mut labels = Vec::with_capacity(cfg.length);
    let mut actions = Vec::with_capacity(cfg.length - 1);
    for t in 0..cfg.length {
        let (f, l) = render(cfg, &objects, pos, &budget, &mut rng)?;
        frames.push(f);
        labels.push(l);
        if t + 1 == cfg.length {
            break;
        }
        let a = match &scripted {
            Some(s) => s[t],
            None => {
                let b = cfg.action_bound as f64;
                let mut a = [rng.uniform_range(-b, b) as f32, rng.uniform_range(-b, b) as f32];
                // bounce off the table edge instead of leaving it
                for ax in 0..2 {
                    if pos[ax] + a[ax] < lo[ax] || pos[ax] + a[ax] > hi[ax] {
                        a[ax] = -a[ax];
                    }
                }
                a
            }
        };
        pos = [pos[0] + a[0], pos[1] + a[1]];
        actions.push(a.to_vec());
    }
    Ok(Trajectory {
        frames,
        actions,
        seed,
        scene: Some(SceneDescriptor { objects, labels }),
    })
}

/// A `(t, t + k)` frame pair drawn from a trajectory.
#[derive(Clone, Copy, Debug)]
pub struct FramePair<'a> {
    pub t: usize,
    pub current: &'a PointCloud,
    pub future: &'a PointCloud,
}

/// Draws `t` uniformly from `[0, L - 1 - k]`.
pub fn sample_pair<'a>(traj: &'a Trajectory, k: usize, rng: &mut CounterRng) -> Result<FramePair<'a>> {
    let l = traj.len();
    if k == 0 || k >= l {
        return Err(Error::InvalidArgument(format!("interval k={k} needs 1 <= k < L={l}")));
    }
    let t = rng.below((l - k) as u64) as usize;
    Ok(FramePair {
        t,
        current: &traj.frames[t],
        future: &traj.frames[t + k],
    })
}

/// Draws `count` pairs.
pub fn sample_pairs<'a>(
    traj: &'a Trajectory,
    k: usize,
    count: usize,
    rng: &mut CounterRng,
) -> Result<Vec<FramePair<'a>>> {
    (0..count).map(|_| sample_pair(traj, k, rng)).collect()
}
