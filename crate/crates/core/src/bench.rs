//! Synthetic race benchmark: procedural tracks over a shared gate pool, the
//! spline expert, speed feasibility, the task-matrix runs, the K-network
//! baseline and the DDIM-step / seed sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{
    assemble_budget, certify_gates, coverage_deltas, tube_radius, ContractionEstimate, Gate, OdeConstant, QuadEnsemble,
    TubeCertificate, VehicleStack, GATE_SIZES,
};
use crate::denoiser::{learned_field, measure_eta, train_on, Arch, Datum, LossWeighting, TinyDenoiser, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::sampler::{ddim_sample, paired_sample};
use crate::schedule::{build_cosine_schedule, eps_to_score, plan_ddim, DdimStepPlan, NoiseLevel, NoiseSchedule};
use crate::score::{
    decomposition_error, lipschitz_per_factor, ActionChunk, ComposedScore, Condition, ExpertMap, FactorSpace,
    GaussianTaskFamily, Observation, SamplePlan, ScoreField, TableExpert, KEYPOINTS,
};
use crate::sensitivity::{empirical_amplification, forcings_along, jacobians_along, ltv_constant, residual_gap};
use crate::vecops::{mean, std_dev};
use crate::vehicle::{chunk_to_plan, rollout, ChunkFrame, QuadState, WaypointPlan};

pub const TRACK_NAMES: [&str; 8] = ["race1", "race2", "race3", "race4", "race5", "race6", "race7", "race8"];
pub const GATE_COUNTS: [usize; 8] = [8, 9, 7, 10, 5, 3, 2, 2];
pub const DESCRIPTORS: [&str; 8] = [
    "complex, U-turns",
    "corkscrew",
    "right-to-left sweep",
    "long winding",
    "short loop",
    "simple run",
    "height change",
    "U-turn",
];
/// (track, gate size) pairs kept out of training.
pub const HELD_OUT: [[usize; 2]; 6] = [[0, 2], [3, 1], [4, 2], [5, 0], [6, 1], [7, 2]];
pub const SPEED_BRACKET: (f64, f64) = (0.5, 12.0);
pub const SEARCH_ITERS: usize = 12;
/// Arc distance from a gate inside which the expert slows down (m).
pub const SLOWDOWN_RADIUS: f64 = 2.0;
/// Longest simulated flight (s).
pub const MAX_FLIGHT: f64 = 150.0;

const LATTICE_SPACING: f64 = 5.0;
const JITTER: f64 = 0.75;
const BASE_HEIGHT: f64 = 2.0;
const HEIGHT_JITTER: f64 = 0.3;
/// Distance of the start and exit knots from the first and last gate (m).
const LEAD: f64 = 3.0;
const MIN_SPACING: f64 = 2.0;
const MAX_SPACING: f64 = 15.0;
const GENERATION_TRIES: u64 = 16;
const ARC_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: String,
    pub descriptor: String,
    pub seed: u64,
    /// Gates in flying order; normals follow the spline tangent.
    pub gates: Vec<Gate>,
    pub start: Vector3<f64>,
    pub exit: Vector3<f64>,
    /// Gate half-width per gate size (m).
    pub half_widths: [f64; 3],
}

impl Track {
    pub fn half_width(&self, size: usize) -> f64 {
        self.half_widths[size]
    }

    fn knots(&self) -> Vec<Vector3<f64>> {
        let mut k = vec![self.start];
        k.extend(self.gates.iter().map(|g| g.center));
        k.push(self.exit);
        k
    }
}

/// Lattice node sequence of a track, with optional per-gate heights and
/// entry/exit headings (default: along the first and last gate leg).
struct Layout {
    nodes: Vec<(usize, usize)>,
    heights: Option<Vec<f64>>,
    entry: Option<[f64; 2]>,
    exit: Option<[f64; 2]>,
}

fn layouts() -> Vec<Layout> {
    let plain = |nodes: Vec<(usize, usize)>| Layout {
        nodes,
        heights: None,
        entry: None,
        exit: None,
    };
    let ring = vec![(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1), (1, 0)];
    vec![
        plain(vec![(0, 0), (1, 0), (2, 0), (3, 0), (3, 1), (2, 1), (1, 1), (0, 1)]),
        Layout {
            heights: Some((0..ring.len()).map(|i| 1.0 + 0.3 * i as f64).collect()),
            nodes: ring,
            entry: None,
            exit: None,
        },
        plain(vec![(3, 0), (3, 1), (3, 2), (2, 3), (1, 3), (0, 2), (0, 1)]),
        plain(vec![
            (0, 0),
            (0, 1),
            (1, 1),
            (1, 0),
            (2, 0),
            (2, 1),
            (2, 2),
            (3, 2),
            (3, 3),
            (2, 3),
        ]),
        plain(vec![(1, 1), (2, 1), (3, 2), (2, 3), (1, 2)]),
        plain(vec![(0, 2), (1, 2), (2, 2)]),
        Layout {
            nodes: vec![(1, 0), (2, 0)],
            heights: Some(vec![1.0, 3.5]),
            entry: None,
            exit: None,
        },
        Layout {
            nodes: vec![(2, 2), (2, 3)],
            heights: None,
            entry: Some([1.0, 0.0]),
            exit: Some([-1.0, 0.0]),
        },
    ]
}

/// The eight tracks, deterministic in `seed`. Gate positions come from a
/// shared jittered 4x4 lattice spanning a 20 m arena; each track visits its
/// own node sequence.
pub fn generate_tracks(seed: u64) -> Result<Vec<Track>> {
    let half_widths = [GATE_SIZES[0].1, GATE_SIZES[1].1, GATE_SIZES[2].1];
    'attempt: for attempt in 0..GENERATION_TRIES {
        let mut r = rng::stream(seed, 0x7AC0 + attempt);
        let mut pool = [[Vector3::zeros(); 4]; 4];
        for row in pool.iter_mut() {
            for node in row.iter_mut() {
                *node = Vector3::new(
                    r.random_range(-JITTER..JITTER),
                    r.random_range(-JITTER..JITTER),
                    BASE_HEIGHT + r.random_range(-HEIGHT_JITTER..HEIGHT_JITTER),
                );
            }
        }
        let mut tracks = Vec::with_capacity(8);
        for (t, lay) in layouts().into_iter().enumerate() {
            let centers: Vec<Vector3<f64>> = lay
                .nodes
                .iter()
                .enumerate()
                .map(|(g, &(i, j))| {
                    let n = pool[i][j];
                    let z = lay.heights.as_ref().map_or(n.z, |h| h[g]);
                    Vector3::new(
                        (i as f64 - 1.5) * LATTICE_SPACING + n.x,
                        (j as f64 - 1.5) * LATTICE_SPACING + n.y,
                        z,
                    )
                })
                .collect();
            for w in centers.windows(2) {
                let d = (w[1] - w[0]).norm();
                if !(MIN_SPACING..=MAX_SPACING).contains(&d) {
                    continue 'attempt;
                }
            }
            let heading = |h: Option<[f64; 2]>, a: Vector3<f64>, b: Vector3<f64>| match h {
                Some([x, y]) => Vector3::new(x, y, 0.0).normalize(),
                None => {
                    let d = b - a;
                    Vector3::new(d.x, d.y, 0.0).normalize()
                }
            };
            let n = centers.len();
            let start = centers[0] - heading(lay.entry, centers[0], centers[1]) * LEAD;
            let exit = centers[n - 1] + heading(lay.exit, centers[n - 2], centers[n - 1]) * LEAD;
            let mut knots = vec![start];
            knots.extend(&centers);
            knots.push(exit);
            let spline = Spline3::through(&knots)?;
            let gates = centers
                .iter()
                .enumerate()
                .map(|(g, c)| Gate {
                    center: *c,
                    normal: spline.tangent(spline.t[g + 1]),
                })
                .collect();
            tracks.push(Track {
                id: TRACK_NAMES[t].into(),
                descriptor: DESCRIPTORS[t].into(),
                seed,
                gates,
                start,
                exit,
                half_widths,
            });
        }
        return Ok(tracks);
    }
    invalid(format!(
        "no track layout satisfied the spacing bounds after {GENERATION_TRIES} tries"
    ))
}

/// Natural cubic spline of one coordinate.
#[derive(Debug, Clone)]
struct Natural {
    y: Vec<f64>,
    m: Vec<f64>,
}

/// Chord-length parametrised natural cubic spline in 3D.
#[derive(Debug, Clone)]
struct Spline3 {
    t: Vec<f64>,
    dims: [Natural; 3],
}

impl Spline3 {
    fn through(knots: &[Vector3<f64>]) -> Result<Self> {
        if knots.len() < 2 {
            return invalid("spline needs at least two knots");
        }
        let mut t = vec![0.0];
        for w in knots.windows(2) {
            let h = (w[1] - w[0]).norm();
            if !(h > 1e-9) {
                return invalid("degenerate spline: coincident knots");
            }
            t.push(t.last().unwrap() + h);
        }
        let dim = |k: usize| {
            let y: Vec<f64> = knots.iter().map(|p| p[k]).collect();
            let m = natural_moments(&t, &y);
            Natural { y, m }
        };
        Ok(Self {
            dims: [dim(0), dim(1), dim(2)],
            t,
        })
    }

    fn segment(&self, x: f64) -> usize {
        self.t.partition_point(|&a| a <= x).clamp(1, self.t.len() - 1) - 1
    }

    fn eval(&self, x: f64) -> Vector3<f64> {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        Vector3::from_fn(|k, _| {
            let n = &self.dims[k];
            a * n.y[i] + b * n.y[i + 1] + ((a.powi(3) - a) * n.m[i] + (b.powi(3) - b) * n.m[i + 1]) * h * h / 6.0
        })
    }

    fn tangent(&self, x: f64) -> Vector3<f64> {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        let d = Vector3::from_fn(|k, _| {
            let n = &self.dims[k];
            (n.y[i + 1] - n.y[i]) / h + ((1.0 - 3.0 * a * a) * n.m[i] + (3.0 * b * b - 1.0) * n.m[i + 1]) * h / 6.0
        });
        d.normalize()
    }

    /// Dense `(parameter, arc length)` table.
    fn arc_table(&self) -> (Vec<f64>, Vec<f64>) {
        let mut ts = vec![0.0];
        let mut s = vec![0.0];
        let mut prev = self.eval(0.0);
        for i in 0..self.t.len() - 1 {
            for j in 1..=ARC_SAMPLES {
                let x = self.t[i] + (self.t[i + 1] - self.t[i]) * j as f64 / ARC_SAMPLES as f64;
                let p = self.eval(x);
                s.push(s.last().unwrap() + (p - prev).norm());
                ts.push(x);
                prev = p;
            }
        }
        (ts, s)
    }
}

/// Second derivatives of the natural spline (zero at both ends), by the
/// tridiagonal Thomas sweep.
fn natural_moments(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut c = vec![0.0; inner];
    let mut d = vec![0.0; inner];
    for k in 0..inner {
        let i = k + 1;
        let (h0, h1) = (t[i] - t[i - 1], t[i + 1] - t[i]);
        let rhs = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
        let diag = 2.0 * (h0 + h1);
        if k == 0 {
            c[k] = h1 / diag;
            d[k] = rhs / diag;
        } else {
            let den = diag - h0 * c[k - 1];
            c[k] = h1 / den;
            d[k] = (rhs - h0 * d[k - 1]) / den;
        }
    }
    for k in (0..inner).rev() {
        m[k + 1] = if k + 1 < inner { d[k] - c[k] * m[k + 2] } else { d[k] };
    }
    m
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let i = xs.partition_point(|&a| a <= x).clamp(1, xs.len() - 1) - 1;
    let span = xs[i + 1] - xs[i];
    let f = if span > 0.0 {
        ((x - xs[i]) / span).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ys[i] + f * (ys[i + 1] - ys[i])
}

/// Splits `total` intervals over segments proportionally to `lengths`,
/// at least one each (largest remainder).
fn allocate(lengths: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = lengths.iter().sum();
    let ideal: Vec<f64> = lengths.iter().map(|l| total as f64 * l / sum).collect();
    let mut n: Vec<usize> = ideal.iter().map(|x| (x.floor() as usize).max(1)).collect();
    while n.iter().sum::<usize>() < total {
        let i = (0..n.len())
            .max_by(|&a, &b| (ideal[a] - n[a] as f64).total_cmp(&(ideal[b] - n[b] as f64)))
            .unwrap();
        n[i] += 1;
    }
    while n.iter().sum::<usize>() > total {
        let i = (0..n.len())
            .filter(|&i| n[i] > 1)
            .min_by(|&a, &b| (ideal[a] - n[a] as f64).total_cmp(&(ideal[b] - n[b] as f64)))
            .unwrap();
        n[i] -= 1;
    }
    n
}

/// Keypoint positions of the track spline: arc-length spacing within each
/// knot-to-knot leg, every knot pinned to a keypoint. Returns positions and
/// their arc lengths, plus the arc length of each gate.
fn resample(track: &Track) -> Result<(Vec<Vector3<f64>>, Vec<f64>, Vec<f64>)> {
    let knots = track.knots();
    if knots.len() > KEYPOINTS {
        return invalid(format!("{} knots exceed the {KEYPOINTS} keypoints", knots.len()));
    }
    let spline = Spline3::through(&knots)?;
    let (ts, s) = spline.arc_table();
    let knot_s: Vec<f64> = spline.t.iter().map(|&t| interp(&ts, &s, t)).collect();
    let lengths: Vec<f64> = knot_s.windows(2).map(|w| w[1] - w[0]).collect();
    let alloc = allocate(&lengths, KEYPOINTS - 1);
    let mut pos = Vec::with_capacity(KEYPOINTS);
    let mut arc = Vec::with_capacity(KEYPOINTS);
    for (leg, &n) in alloc.iter().enumerate() {
        for j in 0..n {
            let sj = knot_s[leg] + lengths[leg] * j as f64 / n as f64;
            let tj = if j == 0 { spline.t[leg] } else { interp(&s, &ts, sj) };
            pos.push(spline.eval(tj));
            arc.push(sj);
        }
    }
    pos.push(*knots.last().unwrap());
    arc.push(*knot_s.last().unwrap());
    let gate_s = knot_s[1..knot_s.len() - 1].to_vec();
    Ok((pos, arc, gate_s))
}

/// Spline length of a track (m).
pub fn track_length(track: &Track) -> Result<f64> {
    let (_, s) = Spline3::through(&track.knots())?.arc_table();
    Ok(*s.last().unwrap())
}

/// Speed multiplier at arc distance `d` from the nearest gate.
pub fn slowdown(d: f64, half_width: f64) -> f64 {
    let floor = (half_width / GATE_SIZES[2].1).min(1.0);
    if d >= SLOWDOWN_RADIUS {
        1.0
    } else {
        floor + (1.0 - floor) * d.max(0.0) / SLOWDOWN_RADIUS
    }
}

/// 32-keypoint reference at target `speed`, slowed near gates according to
/// the gate size.
pub fn expert_reference(track: &Track, size: usize, speed: f64) -> Result<ActionChunk> {
    if !(speed > 0.0 && speed.is_finite()) {
        return invalid(format!("speed must be positive, got {speed}"));
    }
    let (pos, arc, gate_s) = resample(track)?;
    let r = track.half_width(size);
    let kp: Vec<[f64; 4]> = pos
        .iter()
        .zip(&arc)
        .map(|(p, s)| {
            let d = gate_s.iter().map(|g| (g - s).abs()).fold(f64::INFINITY, f64::min);
            [p.x, p.y, p.z, speed * slowdown(d, r)]
        })
        .collect();
    ActionChunk::from_keypoints(&kp)
}

/// Gate-by-gate passage: gates are taken in order, each needing a
/// plane crossing along its normal within `half_width` of the center,
/// after the previous passage.
pub fn gate_passage(path: &[Vector3<f64>], gates: &[Gate], half_width: f64) -> Vec<bool> {
    let mut from = 0;
    gates
        .iter()
        .map(|g| {
            for k in from..path.len().saturating_sub(1) {
                let s0 = (path[k] - g.center).dot(&g.normal);
                let s1 = (path[k + 1] - g.center).dot(&g.normal);
                if s0 < 0.0 && s1 >= 0.0 {
                    let x = path[k] + (path[k + 1] - path[k]) * (s0 / (s0 - s1));
                    if (x - g.center).norm() < half_width {
                        from = k + 1;
                        return true;
                    }
                }
            }
            false
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flight {
    pub gates_passed: usize,
    pub gates_total: usize,
    pub crashed: bool,
    /// Mean ground speed over the flight (m/s).
    pub flown_speed: f64,
}

impl Flight {
    pub fn clean(&self) -> bool {
        !self.crashed && self.gates_passed == self.gates_total
    }
}

/// Time to fly the plan at its own speeds, with the carrot's speed floor.
fn plan_time(plan: &WaypointPlan, min_speed: f64) -> f64 {
    plan.points
        .windows(2)
        .map(|w| {
            let v = (0.5 * (w[0].v.norm() + w[1].v.norm())).max(min_speed);
            (w[1].p - w[0].p).norm() / v
        })
        .sum()
}

/// Flies a physical chunk from rest at its first keypoint and scores the
/// track's gates. Divergence or dropping below the ground counts as a crash.
pub fn fly_chunk(stack: &VehicleStack, chunk: &ActionChunk, track: &Track, size: usize) -> Result<Flight> {
    let plan = chunk_to_plan(chunk)?;
    let duration = (plan_time(&plan, stack.carrot.min_speed) + 3.0).min(MAX_FLIGHT);
    let x0 = QuadState::at_rest(plan.points[0].p);
    let ro = rollout(&x0, &plan, &stack.gains, &stack.params, &stack.carrot, duration)?;
    let path = ro.positions();
    let passed = gate_passage(&path, &track.gates, track.half_width(size));
    let crashed = ro.crashed.is_some() || path.iter().any(|p| p.z < 0.0);
    let flown: f64 = path.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let secs = ro.dt * (path.len() - 1) as f64;
    Ok(Flight {
        gates_passed: passed.iter().filter(|&&p| p).count(),
        gates_total: track.gates.len(),
        crashed,
        flown_speed: if secs > 0.0 { flown / secs } else { 0.0 },
    })
}

/// Highest target speed in [`SPEED_BRACKET`] at which the expert plan
/// passes every gate, by bisection; `None` if even the floor fails.
pub fn feasibility_search(track: &Track, size: usize, stack: &VehicleStack) -> Result<Option<f64>> {
    let feasible =
        |v: f64| -> Result<bool> { Ok(fly_chunk(stack, &expert_reference(track, size, v)?, track, size)?.clean()) };
    let (mut lo, mut hi) = SPEED_BRACKET;
    if !feasible(lo)? {
        return Ok(None);
    }
    if feasible(hi)? {
        return Ok(Some(hi));
    }
    for _ in 0..SEARCH_ITERS {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// Normalisation frame for chunks: centred on the arena floor plan at gate
/// height, 10 m to one unit.
pub fn arena_frame() -> ChunkFrame {
    ChunkFrame {
        center: [0.0, 0.0, BASE_HEIGHT],
        scale: 10.0,
    }
}

/// `track_size`, e.g. `race3_standard`.
pub fn parse_task(space: &FactorSpace, name: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidArgument(format!("unknown task {name:?}; expected e.g. race3_standard"));
    let (t, g) = name.rsplit_once('_').ok_or_else(bad)?;
    Ok(vec![
        space.value_index(0, t).ok_or_else(bad)?,
        space.value_index(1, g).ok_or_else(bad)?,
    ])
}

pub fn factor_space() -> FactorSpace {
    FactorSpace::new(
        vec!["track".into(), "gate_size".into()],
        vec![
            TRACK_NAMES.iter().map(|s| s.to_string()).collect(),
            GATE_SIZES.iter().map(|s| s.0.to_string()).collect(),
        ],
    )
    .expect("static factor space")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrix {
    pub space: FactorSpace,
    /// Indexed by flat task.
    pub max_speed: Vec<Option<f64>>,
    pub held_out: Vec<Vec<usize>>,
}

impl TaskMatrix {
    pub fn build(tracks: &[Track], stack: &VehicleStack, exec: Exec) -> Result<Self> {
        let space = factor_space();
        let tasks = space.all_tasks();
        let max_speed = exec.try_map(&tasks, |z| feasibility_search(&tracks[z[0]], z[1], stack))?;
        Self::from_speeds(max_speed)
    }

    pub fn from_speeds(max_speed: Vec<Option<f64>>) -> Result<Self> {
        let space = factor_space();
        if max_speed.len() != space.n_tasks() {
            return invalid(format!("{} speeds for {} tasks", max_speed.len(), space.n_tasks()));
        }
        let m = Self {
            space,
            max_speed,
            held_out: HELD_OUT.iter().map(|h| h.to_vec()).collect(),
        };
        m.check_coverage()?;
        Ok(m)
    }

    pub fn feasible(&self, z: &[usize]) -> bool {
        self.space.flat_index(z).is_ok_and(|f| self.max_speed[f].is_some())
    }

    pub fn is_held_out(&self, z: &[usize]) -> bool {
        self.held_out.iter().any(|h| h[..] == z[..])
    }

    /// Feasible tasks outside the held-out set: the training tasks.
    pub fn held_in(&self) -> Vec<Vec<usize>> {
        self.space
            .all_tasks()
            .into_iter()
            .filter(|z| self.feasible(z) && !self.is_held_out(z))
            .collect()
    }

    /// Every feasible task; the evaluation set.
    pub fn feasible_tasks(&self) -> Vec<Vec<usize>> {
        self.space
            .all_tasks()
            .into_iter()
            .filter(|z| self.feasible(z))
            .collect()
    }

    /// Each value of a held-out task must occur in some training task.
    pub fn check_coverage(&self) -> Result<()> {
        let train = self.held_in();
        for h in &self.held_out {
            for (i, &v) in h.iter().enumerate() {
                if !train.iter().any(|z| z[i] == v) {
                    return invalid(format!(
                        "value {} of factor {} in held-out task {h:?} has no training task",
                        self.space.values[i][v], self.space.names[i]
                    ));
                }
            }
        }
        Ok(())
    }

    /// Target speed of the expert on task `z`: the maximum feasible speed,
    /// or the bracket floor for infeasible tasks.
    pub fn target_speed(&self, z: &[usize]) -> Result<f64> {
        Ok(self.max_speed[self.space.flat_index(z)?].unwrap_or(SPEED_BRACKET.0))
    }

    pub fn task_name(&self, z: &[usize]) -> String {
        format!("{}_{}", self.space.values[0][z[0]], self.space.values[1][z[1]])
    }

    /// Inverse of [`TaskMatrix::task_name`].
    pub fn parse_task(&self, name: &str) -> Result<Vec<usize>> {
        parse_task(&self.space, name)
    }
}

/// Expert references for every task, in the normalized frame.
pub fn expert_table(tracks: &[Track], matrix: &TaskMatrix, frame: &ChunkFrame) -> Result<TableExpert> {
    let tasks = matrix.space.all_tasks();
    let rows = tasks
        .iter()
        .map(|z| Ok(frame.normalize(&expert_reference(&tracks[z[0]], z[1], matrix.target_speed(z)?)?)))
        .collect::<Result<Vec<_>>>()?;
    TableExpert::new(matrix.space.clone(), rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One network without factor input.
    Baseline,
    /// Shared factored network, sampled through the composed score.
    FactoredComposed,
    /// Shared factored network, sampled with both factors in one condition.
    FactoredJoint,
    /// Twelve unconditional networks combined in eps space.
    Knet,
    /// Factored network trained on every feasible task.
    Oracle,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::FactoredComposed => "factored-composed",
            ModelKind::FactoredJoint => "factored-joint",
            ModelKind::Knet => "knet",
            ModelKind::Oracle => "oracle",
        }
    }
}

/// `eps_track(z1) + eps_gate(z2) - eps_null`, each component evaluated
/// without factor input.
pub struct KnetField<'a> {
    pub uncond: Box<dyn ScoreField + 'a>,
    pub track: Vec<Option<Box<dyn ScoreField + 'a>>>,
    pub gate: Vec<Option<Box<dyn ScoreField + 'a>>>,
}

pub fn knet_compose<'a>(
    track_nets: Vec<Option<Box<dyn ScoreField + 'a>>>,
    gate_nets: Vec<Option<Box<dyn ScoreField + 'a>>>,
    uncond: Box<dyn ScoreField + 'a>,
) -> Result<KnetField<'a>> {
    let d = uncond.dim();
    if track_nets.iter().chain(&gate_nets).flatten().any(|f| f.dim() != d) {
        return invalid("marginal networks disagree on the action dimension");
    }
    Ok(KnetField {
        uncond,
        track: track_nets,
        gate: gate_nets,
    })
}

fn bare(f: &dyn ScoreField) -> Condition {
    Condition::unconditional(f.n_factors())
}

fn pick<'s>(nets: &'s [Option<Box<dyn ScoreField + '_>>], v: usize, what: &str) -> Result<&'s dyn ScoreField> {
    match nets.get(v) {
        Some(Some(n)) => Ok(&**n),
        _ => Err(Error::Condition(format!("no marginal network for {what} value {v}"))),
    }
}

impl KnetField<'_> {
    fn parts(&self, c: &Condition) -> Result<[&dyn ScoreField; 3]> {
        let z = c
            .values()
            .filter(|z| z.len() == 2)
            .ok_or_else(|| Error::Condition("K-network composition needs a (track, gate size) condition".into()))?;
        Ok([
            pick(&self.track, z[0], "track")?,
            pick(&self.gate, z[1], "gate size")?,
            &*self.uncond,
        ])
    }

    pub fn covers(&self, z: &[usize]) -> bool {
        self.parts(&Condition::joint(z)).is_ok()
    }
}

impl ScoreField for KnetField<'_> {
    fn dim(&self) -> usize {
        self.uncond.dim()
    }

    fn n_factors(&self) -> usize {
        2
    }

    fn score(&self, a: &[f64], level: NoiseLevel, o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        eps_to_score(&self.eps(a, level, o, c)?, level)
    }

    fn eps(&self, a: &[f64], level: NoiseLevel, o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        let [t, g, u] = self.parts(c)?;
        let et = t.eps(a, level, o, &bare(t))?;
        let eg = g.eps(a, level, o, &bare(g))?;
        let eu = u.eps(a, level, o, &bare(u))?;
        Ok(et.iter().zip(&eg).zip(&eu).map(|((x, y), w)| x + y - w).collect())
    }

    fn eps_jacobian(
        &self,
        a: &[f64],
        level: NoiseLevel,
        o: &Observation,
        c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        let [t, g, u] = match self.parts(c) {
            Ok(p) => p,
            Err(e) => return Some(Err(e)),
        };
        let jt = t.eps_jacobian(a, level, o, &bare(t))?;
        let jg = g.eps_jacobian(a, level, o, &bare(g))?;
        let ju = u.eps_jacobian(a, level, o, &bare(u))?;
        Some((|| Ok(jt? + jg? - ju?))())
    }
}

/// Trained networks of the roster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModels {
    pub baseline: TinyDenoiser,
    pub factored: TinyDenoiser,
    pub knet_uncond: TinyDenoiser,
    pub knet_track: Vec<Option<TinyDenoiser>>,
    pub knet_gate: Vec<Option<TinyDenoiser>>,
    pub oracle: Option<TinyDenoiser>,
    /// Loss curve per network, keyed by network name.
    pub losses: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
    pub level_dim: usize,
    pub sigma_data: f64,
    pub train: TrainConfig,
    pub oracle: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            emb_dim: 32,
            level_dim: 16,
            sigma_data: 0.5,
            train: TrainConfig {
                lr: 3e-3,
                epochs: 160,
                steps_per_epoch: 100,
                cosine_decay: true,
                weighting: LossWeighting::CleanAction,
                ..TrainConfig::default()
            },
            oracle: false,
        }
    }
}

impl ModelConfig {
    fn arch(&self, d: usize, cards: Vec<usize>, train_steps: usize) -> Arch {
        let mut a = Arch::new(d, cards, train_steps);
        a.hidden = self.hidden.clone();
        a.emb_dim = self.emb_dim;
        a.level_dim = self.level_dim;
        a.sigma_data = self.sigma_data;
        a
    }
}

struct Job {
    name: String,
    factored: bool,
    tasks: Vec<Vec<usize>>,
}

/// Trains every network of the roster on the held-in tasks (the oracle on
/// all feasible tasks). Networks train independently and in parallel; each
/// has its own seed derived from the config seed and its name.
pub fn train_models(
    expert: &TableExpert,
    matrix: &TaskMatrix,
    schedule: &NoiseSchedule,
    mc: &ModelConfig,
    exec: Exec,
) -> Result<TrainedModels> {
    let train = matrix.held_in();
    if train.is_empty() {
        return invalid("no feasible training tasks");
    }
    let job = |name: String, factored: bool, tasks: Vec<Vec<usize>>| Job { name, factored, tasks };
    let mut jobs = vec![
        job("baseline".into(), false, train.clone()),
        job("factored".into(), true, train.clone()),
        job("knet_uncond".into(), false, train.clone()),
    ];
    for (i, name) in [(0usize, "track"), (1, "gate")] {
        for v in 0..matrix.space.cardinality(i) {
            let slice: Vec<Vec<usize>> = train.iter().filter(|z| z[i] == v).cloned().collect();
            jobs.push(job(format!("knet_{name}_{}", matrix.space.values[i][v]), false, slice));
        }
    }
    if mc.oracle {
        jobs.push(job("oracle".into(), true, matrix.feasible_tasks()));
    }
    let o = Observation::default();
    let cards = matrix.space.values.iter().map(Vec::len).collect::<Vec<_>>();
    let d = expert.dim;
    let results = exec.try_map(&jobs, |j| -> Result<Option<(TinyDenoiser, Vec<f64>)>> {
        if j.tasks.is_empty() {
            return Ok(None);
        }
        let seed = rng::hash_words(std::iter::once(mc.train.seed).chain(j.name.bytes().map(u64::from)));
        let arch = mc.arch(d, if j.factored { cards.clone() } else { vec![] }, schedule.train_steps);
        let mut net = TinyDenoiser::new(arch, seed)?;
        let data = j
            .tasks
            .iter()
            .map(|z| {
                Ok(Datum {
                    a0: expert.reference(&o, z)?,
                    o,
                    z: if j.factored { z.clone() } else { vec![] },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = TrainConfig {
            seed,
            ..mc.train.clone()
        };
        let losses = train_on(&mut net, &data, schedule, &cfg)?;
        Ok(Some((net, losses)))
    })?;
    let mut losses = BTreeMap::new();
    let mut nets: BTreeMap<String, TinyDenoiser> = BTreeMap::new();
    for (j, r) in jobs.iter().zip(results) {
        if let Some((net, l)) = r {
            losses.insert(j.name.clone(), l);
            nets.insert(j.name.clone(), net);
        }
    }
    let mut take = |name: &str| nets.remove(name);
    let missing = |n: &str| Error::InvalidArgument(format!("network {n} was not trained"));
    let baseline = take("baseline").ok_or_else(|| missing("baseline"))?;
    let factored = take("factored").ok_or_else(|| missing("factored"))?;
    let knet_uncond = take("knet_uncond").ok_or_else(|| missing("knet_uncond"))?;
    let knet_track = matrix.space.values[0]
        .iter()
        .map(|v| take(&format!("knet_track_{v}")))
        .collect();
    let knet_gate = matrix.space.values[1]
        .iter()
        .map(|v| take(&format!("knet_gate_{v}")))
        .collect();
    let oracle = take("oracle");
    Ok(TrainedModels {
        baseline,
        factored,
        knet_uncond,
        knet_track,
        knet_gate,
        oracle,
        losses,
    })
}

/// Score fields of every model kind, learned or closed-form.
pub struct Roster<'a> {
    pub baseline: Box<dyn ScoreField + 'a>,
    pub factored: Box<dyn ScoreField + 'a>,
    /// Whether the factored field can be conditioned jointly on held-out
    /// tasks (closed-form families cannot: they have no mass there).
    pub joint: bool,
    pub knet: KnetField<'a>,
    pub oracle: Option<Box<dyn ScoreField + 'a>>,
}

impl<'a> Roster<'a> {
    pub fn learned(m: &'a TrainedModels) -> Result<Self> {
        let boxed = |n: &'a TinyDenoiser| -> Box<dyn ScoreField + 'a> { Box::new(learned_field(n)) };
        Ok(Self {
            baseline: boxed(&m.baseline),
            factored: boxed(&m.factored),
            joint: true,
            knet: knet_compose(
                m.knet_track.iter().map(|n| n.as_ref().map(boxed)).collect(),
                m.knet_gate.iter().map(|n| n.as_ref().map(boxed)).collect(),
                boxed(&m.knet_uncond),
            )?,
            oracle: m.oracle.as_ref().map(boxed),
        })
    }

    /// Exact Dirac fields of each model's training set: the assumption-
    /// controlled counterpart of [`Roster::learned`].
    pub fn closed_form(expert: &TableExpert, matrix: &TaskMatrix, oracle: bool) -> Result<Roster<'static>> {
        let train = matrix.held_in();
        let fam = |support: &[Vec<usize>]| -> Result<Box<dyn ScoreField>> {
            Ok(Box::new(GaussianTaskFamily::dirac(expert.clone(), support)?))
        };
        let slice = |i: usize, v: usize| -> Result<Option<Box<dyn ScoreField>>> {
            let s: Vec<Vec<usize>> = train.iter().filter(|z| z[i] == v).cloned().collect();
            if s.is_empty() {
                Ok(None)
            } else {
                fam(&s).map(Some)
            }
        };
        Ok(Roster {
            baseline: fam(&train)?,
            factored: fam(&train)?,
            joint: false,
            knet: knet_compose(
                (0..matrix.space.cardinality(0))
                    .map(|v| slice(0, v))
                    .collect::<Result<_>>()?,
                (0..matrix.space.cardinality(1))
                    .map(|v| slice(1, v))
                    .collect::<Result<_>>()?,
                fam(&train)?,
            )?,
            oracle: if oracle {
                Some(fam(&matrix.feasible_tasks())?)
            } else {
                None
            },
        })
    }

    pub fn has(&self, kind: ModelKind) -> bool {
        match kind {
            ModelKind::FactoredJoint => self.joint,
            ModelKind::Oracle => self.oracle.is_some(),
            _ => true,
        }
    }

    /// Denoised normalized chunk of `kind` for task `z`.
    pub fn sample(
        &self,
        kind: ModelKind,
        plan: &DdimStepPlan,
        z: &[usize],
        seed: u64,
        stream: u64,
    ) -> Result<Vec<f64>> {
        let o = Observation::default();
        let joint = Condition::joint(z);
        let path = match kind {
            ModelKind::Baseline => ddim_sample(&*self.baseline, plan, &o, &bare(&*self.baseline), seed, stream)?,
            ModelKind::FactoredComposed => ddim_sample(
                &ComposedScore { inner: &*self.factored },
                plan,
                &o,
                &joint,
                seed,
                stream,
            )?,
            ModelKind::FactoredJoint if self.joint => ddim_sample(&*self.factored, plan, &o, &joint, seed, stream)?,
            ModelKind::Knet => ddim_sample(&self.knet, plan, &o, &joint, seed, stream)?,
            ModelKind::Oracle if self.oracle.is_some() => {
                ddim_sample(&**self.oracle.as_ref().unwrap(), plan, &o, &joint, seed, stream)?
            }
            _ => return invalid(format!("model {} is not in this roster", kind.name())),
        };
        Ok(path.clean().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Training,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub model: ModelKind,
    pub task: Vec<usize>,
    pub name: String,
    pub seed: u64,
    pub split: Split,
    pub gates_passed: usize,
    pub gates_total: usize,
    pub crashed: bool,
    /// Mean keypoint speed of the generated chunk (m/s).
    pub mean_speed: f64,
    /// The same for the expert reference.
    pub reference_speed: f64,
    pub flown_speed: f64,
    /// Sampling or planning failure; recorded as a crash.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: ModelKind,
    /// `all`, `training` or `held-out`.
    pub split: String,
    pub tasks: usize,
    pub gates_passed: usize,
    pub gates_total: usize,
    pub passage: f64,
    pub crashes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ddim_steps: usize,
    pub rows: Vec<TaskRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl RunReport {
    pub fn from_rows(ddim_steps: usize, rows: Vec<TaskRow>) -> Self {
        let mut models: Vec<ModelKind> = rows.iter().map(|r| r.model).collect();
        models.sort();
        models.dedup();
        let mut aggregates = Vec::new();
        for m in models {
            for split in ["all", "training", "held-out"] {
                let sel: Vec<&TaskRow> = rows
                    .iter()
                    .filter(|r| {
                        r.model == m
                            && match split {
                                "training" => r.split == Split::Training,
                                "held-out" => r.split == Split::HeldOut,
                                _ => true,
                            }
                    })
                    .collect();
                let passed: usize = sel.iter().map(|r| r.gates_passed).sum();
                let total: usize = sel.iter().map(|r| r.gates_total).sum();
                aggregates.push(AggregateRow {
                    model: m,
                    split: split.into(),
                    tasks: sel.len(),
                    gates_passed: passed,
                    gates_total: total,
                    passage: if total > 0 { passed as f64 / total as f64 } else { 0.0 },
                    crashes: sel.iter().filter(|r| r.crashed).count(),
                });
            }
        }
        Self {
            ddim_steps,
            rows,
            aggregates,
        }
    }

    pub fn aggregate(&self, model: ModelKind, split: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.model == model && a.split == split)
    }

    /// Passage rate of `model` on `split`, zero when absent.
    pub fn passage(&self, model: ModelKind, split: &str) -> f64 {
        self.aggregate(model, split).map_or(0.0, |a| a.passage)
    }

    /// Mean generated speed of `model` on task `z` over seeds.
    pub fn mean_speed(&self, model: ModelKind, z: &[usize]) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.task[..] == z[..] && r.error.is_none())
            .map(|r| r.mean_speed)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from(
            "model,task,seed,split,gates_passed,gates_total,crashed,mean_speed,reference_speed,flown_speed,error\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{}",
                r.model.name(),
                r.name,
                r.seed,
                if r.split == Split::Training {
                    "training"
                } else {
                    "held-out"
                },
                r.gates_passed,
                r.gates_total,
                r.crashed,
                r.mean_speed,
                r.reference_speed,
                r.flown_speed,
                r.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }

    /// One line per model: passage on all / training / held-out tasks and
    /// the crash count over all tasks.
    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("model,all,training,held_out,crashes\n");
        let mut models: Vec<ModelKind> = self.aggregates.iter().map(|a| a.model).collect();
        models.dedup();
        for m in models {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{}",
                m.name(),
                self.passage(m, "all"),
                self.passage(m, "training"),
                self.passage(m, "held-out"),
                self.aggregate(m, "all").map_or(0, |a| a.crashes)
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub models: Vec<ModelKind>,
    pub ddim_steps: usize,
    pub seeds: Vec<u64>,
    /// Tasks to run; all feasible tasks when `None`.
    pub tasks: Option<Vec<Vec<usize>>>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            models: vec![
                ModelKind::Baseline,
                ModelKind::FactoredComposed,
                ModelKind::FactoredJoint,
                ModelKind::Knet,
            ],
            ddim_steps: 50,
            seeds: vec![0],
            tasks: None,
        }
    }
}

/// Everything a matrix run needs besides the models.
pub struct Bench {
    pub tracks: Vec<Track>,
    pub matrix: TaskMatrix,
    pub expert: TableExpert,
    pub schedule: NoiseSchedule,
    pub frame: ChunkFrame,
    pub stack: VehicleStack,
}

impl Bench {
    pub fn prepare(
        track_seed: u64,
        train_steps: usize,
        frame: ChunkFrame,
        stack: VehicleStack,
        exec: Exec,
    ) -> Result<Self> {
        let tracks = generate_tracks(track_seed)?;
        let matrix = TaskMatrix::build(&tracks, &stack, exec)?;
        Self::with_matrix(tracks, matrix, train_steps, frame, stack)
    }

    pub fn with_matrix(
        tracks: Vec<Track>,
        matrix: TaskMatrix,
        train_steps: usize,
        frame: ChunkFrame,
        stack: VehicleStack,
    ) -> Result<Self> {
        let expert = expert_table(&tracks, &matrix, &frame)?;
        Ok(Self {
            schedule: build_cosine_schedule(train_steps)?,
            tracks,
            matrix,
            expert,
            frame,
            stack,
        })
    }

    pub fn split(&self, z: &[usize]) -> Split {
        if self.matrix.is_held_out(z) {
            Split::HeldOut
        } else {
            Split::Training
        }
    }

    /// Physical chunk from a normalized sample, then the flight on the task.
    pub fn fly_sample(&self, x: &[f64], z: &[usize]) -> Result<(ActionChunk, Flight)> {
        let chunk = self.frame.denormalize(x)?;
        let f = fly_chunk(&self.stack, &chunk, &self.tracks[z[0]], z[1])?;
        Ok((chunk, f))
    }

    /// Every (model, task, seed) rollout. Failures are recorded as crashed
    /// rows; the matrix never aborts on one task.
    pub fn run_matrix(&self, roster: &Roster<'_>, spec: &RunSpec, exec: Exec) -> Result<RunReport> {
        for m in &spec.models {
            if !roster.has(*m) {
                return invalid(format!("model {} is not available in this roster", m.name()));
            }
        }
        let plan = plan_ddim(&self.schedule, spec.ddim_steps)?;
        let tasks = spec.tasks.clone().unwrap_or_else(|| self.matrix.feasible_tasks());
        let mut items = Vec::new();
        for &m in &spec.models {
            for z in &tasks {
                for &s in &spec.seeds {
                    items.push((m, z.clone(), s));
                }
            }
        }
        let o = Observation::default();
        let rows = exec.try_map(&items, |(m, z, seed)| -> Result<TaskRow> {
            let reference = self.frame.denormalize(&self.expert.reference(&o, z)?)?;
            let stream = self.matrix.space.flat_index(z)? as u64;
            let outcome = roster
                .sample(*m, &plan, z, *seed, stream)
                .and_then(|x| self.fly_sample(&x, z));
            let gates_total = self.tracks[z[0]].gates.len();
            let mut row = TaskRow {
                model: *m,
                task: z.clone(),
                name: self.matrix.task_name(z),
                seed: *seed,
                split: self.split(z),
                gates_passed: 0,
                gates_total,
                crashed: true,
                mean_speed: 0.0,
                reference_speed: chunk_speed(&reference),
                flown_speed: 0.0,
                error: None,
            };
            match outcome {
                Ok((chunk, f)) => {
                    row.gates_passed = f.gates_passed;
                    row.crashed = f.crashed;
                    row.mean_speed = chunk_speed(&chunk);
                    row.flown_speed = f.flown_speed;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            Ok(row)
        })?;
        Ok(RunReport::from_rows(spec.ddim_steps, rows))
    }
}

pub fn chunk_speed(c: &ActionChunk) -> f64 {
    mean(&(0..KEYPOINTS).map(|j| c.speed(j)).collect::<Vec<_>>())
}

/// Per track, whether the generated mean speed is nondecreasing from
/// narrow to wide over the sizes present in the report.
pub fn speed_ordering(report: &RunReport, model: ModelKind) -> Vec<(usize, bool, Vec<f64>)> {
    (0..TRACK_NAMES.len())
        .filter_map(|t| {
            let v: Vec<f64> = (0..GATE_SIZES.len())
                .filter_map(|s| report.mean_speed(model, &[t, s]))
                .collect();
            (v.len() >= 2).then(|| (t, v.windows(2).all(|w| w[0] <= w[1]), v))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    DdimSteps,
    Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub ddim_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    /// DDIM steps used by the seed sweep.
    pub base_steps: usize,
    pub models: Vec<ModelKind>,
    /// Score budget for the steady-state radius (score units).
    pub eps_s: f64,
    pub contraction: ContractionEstimate,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            kind: SweepKind::DdimSteps,
            ddim_steps: vec![10, 20, 30, 50],
            seeds: (0..10).collect(),
            base_steps: 50,
            models: vec![ModelKind::FactoredComposed],
            eps_s: 15.4,
            contraction: ContractionEstimate::new(0.9, 0.05, 0.01),
        }
    }
}

/// One sweep point on one held-out combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    pub combo: String,
    pub passage_held_out: f64,
    pub samples: usize,
    pub c_emp_mean: f64,
    pub c_ltv_mean: f64,
    pub c_ltv_std: f64,
    /// `std / mean` of the LTV constant over the samples.
    pub c_ltv_cv: f64,
    pub r_ss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<RunReport>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("point,combo,passage_held_out,samples,c_emp_mean,c_ltv_mean,c_ltv_std,c_ltv_cv,r_ss\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.point,
                r.combo,
                r.passage_held_out,
                r.samples,
                r.c_emp_mean,
                r.c_ltv_mean,
                r.c_ltv_std,
                r.c_ltv_cv,
                r.r_ss
            );
        }
        s
    }
}

impl Bench {
    /// Sensitivity of the composed score against the joint one along the
    /// joint (nominal) path: `(C_emp, C_ltv)` for each seed.
    pub fn composition_constants(
        &self,
        roster: &Roster<'_>,
        plan: &DdimStepPlan,
        z: &[usize],
        seeds: &[u64],
        exec: Exec,
    ) -> Result<Vec<(Option<f64>, f64)>> {
        let o = Observation::default();
        let c = Condition::joint(z);
        let composed = ComposedScore {
            inner: &*roster.factored,
        };
        let nominal: &dyn ScoreField = if roster.joint { &*roster.factored } else { &roster.knet };
        let stream = self.matrix.space.flat_index(z)? as u64;
        seeds
            .iter()
            .map(|&s| {
                let pair = paired_sample(&composed, nominal, plan, &o, &c, &c, s, stream)?;
                let jac = jacobians_along(nominal, &pair.b, &o, exec)?;
                let ltv = ltv_constant(plan, &jac)?;
                let amp = empirical_amplification(&composed, nominal, &pair, &o)?;
                Ok((amp.value(), ltv.c_ltv))
            })
            .collect()
    }

    pub fn sweep(&self, roster: &Roster<'_>, spec: &SweepSpec, exec: Exec) -> Result<SweepTable> {
        let points: Vec<(String, usize, Vec<u64>)> = match spec.kind {
            SweepKind::DdimSteps => spec
                .ddim_steps
                .iter()
                .map(|&n| (format!("N={n}"), n, spec.seeds.clone()))
                .collect(),
            SweepKind::Seeds => spec
                .seeds
                .iter()
                .map(|&s| (format!("seed={s}"), spec.base_steps, vec![s]))
                .collect(),
        };
        let mut rows = Vec::new();
        let mut reports = Vec::new();
        let mut per_combo: BTreeMap<String, Vec<(Option<f64>, f64)>> = BTreeMap::new();
        for (label, n, seeds) in &points {
            let report = self.run_matrix(
                roster,
                &RunSpec {
                    models: spec.models.clone(),
                    ddim_steps: *n,
                    seeds: seeds.clone(),
                    tasks: None,
                },
                exec,
            )?;
            let passage = report.passage(ModelKind::FactoredComposed, "held-out");
            let plan = plan_ddim(&self.schedule, *n)?;
            for z in self.matrix.held_out.iter().filter(|z| self.matrix.feasible(z)) {
                let consts = self.composition_constants(roster, &plan, z, seeds, exec)?;
                let name = self.matrix.task_name(z);
                per_combo
                    .entry(name.clone())
                    .or_default()
                    .extend(consts.iter().cloned());
                rows.push(self.sweep_row(label, &name, passage, &consts, spec)?);
            }
            reports.push(report);
        }
        if spec.kind == SweepKind::Seeds {
            for (name, consts) in &per_combo {
                rows.push(self.sweep_row("all", name, f64::NAN, consts, spec)?);
            }
        }
        Ok(SweepTable {
            kind: spec.kind,
            rows,
            reports,
        })
    }

    fn sweep_row(
        &self,
        point: &str,
        combo: &str,
        passage: f64,
        consts: &[(Option<f64>, f64)],
        spec: &SweepSpec,
    ) -> Result<SweepRow> {
        let ltv: Vec<f64> = consts.iter().map(|c| c.1).collect();
        let emp: Vec<f64> = consts.iter().filter_map(|c| c.0).collect();
        let m = mean(&ltv);
        let sd = std_dev(&ltv);
        let r_ss = tube_radius(spec.eps_s, m, &spec.contraction, 0.0, 0)?.steady;
        Ok(SweepRow {
            point: point.into(),
            combo: combo.into(),
            passage_held_out: passage,
            samples: ltv.len(),
            c_emp_mean: mean(&emp),
            c_ltv_mean: m,
            c_ltv_std: sd,
            c_ltv_cv: if m > 0.0 { sd / m } else { 0.0 },
            r_ss,
        })
    }
}

/// One row of the residual-gap diagnostic: composed against nominal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub name: String,
    pub task: Vec<usize>,
    pub seed: u64,
    pub split: Split,
    pub actual: f64,
    pub linearized: f64,
    pub ltv_bound: f64,
    pub c_emp: Option<f64>,
    pub c_ltv: f64,
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut s = String::from("task,seed,split,actual,linearized,ltv_bound,c_emp,c_ltv\n");
    for r in rows {
        let split = if r.split == Split::HeldOut {
            "held-out"
        } else {
            "training"
        };
        let emp = r.c_emp.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{},{},{split},{:.6},{:.6},{:.6},{emp},{:.6}",
            r.name, r.seed, r.actual, r.linearized, r.ltv_bound, r.c_ltv
        );
    }
    s
}

/// Measured parts of the score budget that do not depend on the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetParts {
    pub eps_d: f64,
    pub eta: f64,
    pub lipschitz: Vec<f64>,
}

/// Slow expert flights used to fit the closed-loop contraction constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    /// Number of held-in tasks whose references are flown.
    pub tasks: usize,
    /// Reference speed (m/s).
    pub speed: f64,
    pub offsets: Vec<f64>,
    pub command_scales: Vec<f64>,
    pub duration: f64,
    pub step: f64,
    pub c_ref: f64,
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            tasks: 4,
            speed: 1.0,
            offsets: vec![0.1, 0.3],
            command_scales: vec![0.001, 0.005],
            duration: 8.0,
            step: 0.1,
            c_ref: 0.005,
            seed: 0,
        }
    }
}

impl Bench {
    pub fn contraction_ensemble(&self, spec: &EnsembleSpec) -> Result<QuadEnsemble> {
        let chunks = self
            .matrix
            .held_in()
            .iter()
            .take(spec.tasks)
            .map(|z| {
                Ok(self
                    .frame
                    .normalize(&expert_reference(&self.tracks[z[0]], z[1], spec.speed)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuadEnsemble {
            chunks,
            frame: self.frame.clone(),
            offsets: spec.offsets.clone(),
            command_scales: spec.command_scales.clone(),
            duration: spec.duration,
            step: spec.step,
            c_ref: spec.c_ref,
            seed: spec.seed,
        })
    }

    /// `(actual, linearized, ltv_bound)` and both constants for each task
    /// and seed, composed sample against the nominal one.
    pub fn diagnose(
        &self,
        roster: &Roster<'_>,
        plan: &DdimStepPlan,
        tasks: &[Vec<usize>],
        seeds: &[u64],
        exec: Exec,
    ) -> Result<Vec<DiagnosticRow>> {
        let o = Observation::default();
        let composed = ComposedScore {
            inner: &*roster.factored,
        };
        let nominal: &dyn ScoreField = if roster.joint { &*roster.factored } else { &roster.knet };
        let mut rows = Vec::new();
        for z in tasks {
            let c = Condition::joint(z);
            let stream = self.matrix.space.flat_index(z)? as u64;
            for &seed in seeds {
                let pair = paired_sample(&composed, nominal, plan, &o, &c, &c, seed, stream)?;
                let jac = jacobians_along(nominal, &pair.b, &o, exec)?;
                let ltv = ltv_constant(plan, &jac)?;
                let forcings = forcings_along(&composed, nominal, &pair, &o)?;
                let gap = residual_gap(pair.gap, plan, &jac, &forcings, &ltv.phi_norms)?;
                rows.push(DiagnosticRow {
                    name: self.matrix.task_name(z),
                    task: z.clone(),
                    seed,
                    split: self.split(z),
                    actual: gap.actual,
                    linearized: gap.linearized,
                    ltv_bound: gap.ltv_bound,
                    c_emp: empirical_amplification(&composed, nominal, &pair, &o)?.value(),
                    c_ltv: ltv.c_ltv,
                });
            }
        }
        Ok(rows)
    }

    /// Decomposition error (max over noised expert states), per-factor
    /// Lipschitz constants of the factored field, and `eta` of `learned`
    /// against the exact field of the training set (0 without one).
    pub fn measure_budget(
        &self,
        roster: &Roster<'_>,
        learned: Option<&dyn ScoreField>,
        plan: &DdimStepPlan,
        samples: SamplePlan,
        exec: Exec,
    ) -> Result<BudgetParts> {
        let o = Observation::default();
        let train = self.matrix.held_in();
        let field = &*roster.factored;
        let eps_d = decomposition_error(field, &self.expert, &train, &o, &self.schedule, &samples, exec)?.max;
        let lipschitz = (0..self.matrix.space.k())
            .map(|i| {
                lipschitz_per_factor(
                    field,
                    &self.matrix.space,
                    i,
                    &self.expert,
                    &train,
                    &o,
                    &self.schedule,
                    &samples,
                    exec,
                )
            })
            .collect::<Result<Vec<f64>>>()?;
        let eta = match learned {
            Some(net) => {
                let truth = GaussianTaskFamily::dirac(self.expert.clone(), &train)?;
                measure_eta(
                    net,
                    &truth,
                    &self.expert,
                    &train,
                    &o,
                    &self.schedule,
                    plan,
                    samples.samples_per_task,
                    samples.seed,
                    exec,
                )?
                .eta_sup
            }
            None => 0.0,
        };
        Ok(BudgetParts { eps_d, eta, lipschitz })
    }

    /// Tube certificate for task `z`. The nominal is the expert reference
    /// (the exact sample of the joint policy), `C_ode` is `C_ltv` of the
    /// nominal field along its sampling path.
    #[allow(clippy::too_many_arguments)]
    pub fn certify_task(
        &self,
        roster: &Roster<'_>,
        z: &[usize],
        plan: &DdimStepPlan,
        parts: &BudgetParts,
        contraction: ContractionEstimate,
        seed: u64,
        delta0: f64,
        tolerance: f64,
        exec: Exec,
    ) -> Result<TubeCertificate> {
        self.matrix.space.flat_index(z)?;
        let o = Observation::default();
        let chunk = self.frame.denormalize(&self.expert.reference(&o, z)?)?;
        let nominal: Vec<Vector3<f64>> = (0..KEYPOINTS).map(|j| Vector3::from(chunk.position(j))).collect();
        let c_ltv = self.composition_constants(roster, plan, z, &[seed], exec)?[0].1;
        let delta = coverage_deltas(&self.matrix.space, &self.matrix.held_in(), z);
        let budget = assemble_budget(parts.eps_d, parts.eta, self.matrix.space.k(), &parts.lipschitz, &delta)?;
        let Some(&(_, gate_radius)) = GATE_SIZES.get(z[1]) else {
            return invalid(format!("no gate size {}", z[1]));
        };
        certify_gates(
            &nominal,
            &self.tracks[z[0]].gates,
            gate_radius,
            budget,
            OdeConstant::Ltv(c_ltv),
            contraction,
            delta0,
            tolerance,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracks() -> Vec<Track> {
        generate_tracks(0).unwrap()
    }

    #[test]
    fn task_names_round_trip() {
        let space = factor_space();
        for z in space.all_tasks() {
            let n = format!("{}_{}", space.values[0][z[0]], space.values[1][z[1]]);
            assert_eq!(parse_task(&space, &n).unwrap(), z);
        }
        for bad in ["race9_narrow", "race1", "race1_tiny", ""] {
            assert!(parse_task(&space, bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn registry_matches_gate_counts() {
        let t = tracks();
        assert_eq!(t.len(), 8);
        for (tr, &n) in t.iter().zip(&GATE_COUNTS) {
            assert_eq!(tr.gates.len(), n, "{}", tr.id);
            for g in &tr.gates {
                assert!((g.normal.norm() - 1.0).abs() < 1e-12);
                assert!(g.center.x.abs() < 10.0 && g.center.y.abs() < 10.0);
            }
        }
        assert_eq!(t[4].gates.len(), 5);
        let r7 = &t[6].gates;
        assert!((r7[1].center.z - r7[0].center.z).abs() > 1.0);
        assert_eq!(t, generate_tracks(0).unwrap());
        assert_ne!(t, generate_tracks(1).unwrap());
    }

    #[test]
    fn u_turn_reverses_heading() {
        let t = &tracks()[7];
        assert!(t.gates[0].normal.x > 0.5 && t.gates[1].normal.x < -0.5);
    }

    #[test]
    fn natural_spline_matches_closed_form() {
        // three equally spaced knots: m1 = 1.5 (y0 - 2 y1 + y2) / h^2
        let t = [0.0, 1.0, 2.0];
        let y = [0.0, 1.0, 0.0];
        let m = natural_moments(&t, &y);
        assert_eq!(m[0], 0.0);
        assert_eq!(m[2], 0.0);
        assert!((m[1] + 3.0).abs() < 1e-12);
        // four knots against a dense solve
        let t = [0.0, 1.0, 2.5, 3.0];
        let y = [1.0, -1.0, 2.0, 0.5];
        let m = natural_moments(&t, &y);
        let a = nalgebra::Matrix2::new(2.0 * 2.5, 1.5, 1.5, 2.0 * 2.0);
        let b = nalgebra::Vector2::new(6.0 * (3.0 / 1.5 + 2.0), 6.0 * (-1.5 / 0.5 - 3.0 / 1.5));
        let x = a.lu().solve(&b).unwrap();
        assert!((m[1] - x[0]).abs() < 1e-12 && (m[2] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn reference_pins_gates_and_keeps_length() {
        for tr in tracks() {
            let c = expert_reference(&tr, 1, 3.0).unwrap();
            for g in &tr.gates {
                let best = (0..KEYPOINTS)
                    .map(|j| (Vector3::from(c.position(j)) - g.center).norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-6, "{} gate off its keypoint by {best}", tr.id);
            }
            let (pos, arc, _) = resample(&tr).unwrap();
            let len = track_length(&tr).unwrap();
            assert!((arc[KEYPOINTS - 1] - len).abs() < 1e-9 * len);
            if tr.id == "race6" {
                let poly: f64 = pos.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
                assert!((poly - len).abs() < 0.01 * len, "{poly} vs {len}");
            }
        }
    }

    #[test]
    fn straight_track_is_collinear() {
        let mut tr = tracks()[5].clone();
        tr.gates = vec![
            Gate {
                center: Vector3::new(0.0, 0.0, 2.0),
                normal: Vector3::x(),
            },
            Gate {
                center: Vector3::new(5.0, 0.0, 2.0),
                normal: Vector3::x(),
            },
        ];
        tr.start = Vector3::new(-3.0, 0.0, 2.0);
        tr.exit = Vector3::new(8.0, 0.0, 2.0);
        let c = expert_reference(&tr, 2, 2.0).unwrap();
        for j in 0..KEYPOINTS {
            let p = c.position(j);
            assert!(p[1].abs() < 1e-9 && (p[2] - 2.0).abs() < 1e-9);
        }
        assert!(expert_reference(&tr, 2, 0.0).is_err());
        tr.start = tr.gates[0].center;
        assert!(expert_reference(&tr, 2, 2.0).is_err());
    }

    #[test]
    fn slowdown_ramp() {
        assert_eq!(slowdown(3.0, 0.3), 1.0);
        assert!((slowdown(0.0, 0.3) - 0.3).abs() < 1e-12);
        assert!((slowdown(1.0, 0.3) - 0.65).abs() < 1e-12);
        assert_eq!(slowdown(0.0, 1.0), 1.0);
    }

    #[test]
    fn passage_counts_in_order() {
        let gates = vec![
            Gate {
                center: Vector3::new(1.0, 0.0, 0.0),
                normal: Vector3::x(),
            },
            Gate {
                center: Vector3::new(2.0, 0.0, 0.0),
                normal: Vector3::x(),
            },
        ];
        let line: Vec<Vector3<f64>> = (0..31).map(|k| Vector3::new(0.1 * k as f64, 0.2, 0.0)).collect();
        assert_eq!(gate_passage(&line, &gates, 0.3), vec![true, true]);
        assert_eq!(gate_passage(&line, &gates, 0.1), vec![false, false]);
        let back: Vec<Vector3<f64>> = line.iter().rev().cloned().collect();
        assert_eq!(gate_passage(&back, &gates, 0.3), vec![false, false]);
    }

    #[test]
    fn expert_flies_its_own_track_slowly() {
        let stack = VehicleStack::default();
        let tr = &tracks()[5];
        let f = fly_chunk(&stack, &expert_reference(tr, 2, 1.0).unwrap(), tr, 2).unwrap();
        assert!(f.clean(), "{f:?}");
    }

    #[test]
    fn feasibility_monotone_in_gate_size() {
        let stack = VehicleStack::default();
        let tr = &tracks()[5];
        let v: Vec<Option<f64>> = (0..3).map(|s| feasibility_search(tr, s, &stack).unwrap()).collect();
        assert!(v[2].is_some());
        for w in v.windows(2) {
            if let Some(a) = w[0] {
                assert!(w[1].unwrap() >= a, "{v:?}");
            }
        }
        assert!(v[2].unwrap() > v[0].unwrap_or(0.0), "{v:?}");
    }

    #[test]
    fn coverage_is_enforced() {
        let mut speeds = vec![Some(2.0); 24];
        assert!(TaskMatrix::from_speeds(speeds.clone()).is_ok());
        // race6 only feasible at narrow, which is held out
        let f = factor_space();
        speeds[f.flat_index(&[5, 1]).unwrap()] = None;
        speeds[f.flat_index(&[5, 2]).unwrap()] = None;
        assert!(TaskMatrix::from_speeds(speeds).is_err());
    }

    #[test]
    fn knet_of_identical_nets_is_that_net() {
        let space = factor_space();
        let expert = TableExpert::from_fn(space.clone(), |z| vec![z[0] as f64 * 0.1, z[1] as f64 * 0.2]).unwrap();
        let all = space.all_tasks();
        let fam = || -> Box<dyn ScoreField> { Box::new(GaussianTaskFamily::new(expert.clone(), &all, 0.1).unwrap()) };
        let k = knet_compose(
            (0..8).map(|_| Some(fam())).collect(),
            (0..3).map(|_| Some(fam())).collect(),
            fam(),
        )
        .unwrap();
        let one = fam();
        let lvl = build_cosine_schedule(100).unwrap().level(40);
        let a = [0.3, -0.2];
        let o = Observation::default();
        let e = k.eps(&a, lvl, &o, &Condition::joint(&[2, 1])).unwrap();
        let e1 = one.eps(&a, lvl, &o, &Condition::unconditional(2)).unwrap();
        for (x, y) in e.iter().zip(&e1) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut gaps: Vec<Option<Box<dyn ScoreField>>> = (0..8).map(|_| Some(fam())).collect();
        gaps[3] = None;
        let k = knet_compose(gaps, (0..3).map(|_| Some(fam())).collect(), fam()).unwrap();
        assert!(!k.covers(&[3, 0]));
        assert!(k.eps(&a, lvl, &o, &Condition::joint(&[3, 0])).is_err());
    }

    #[test]
    fn aggregates_are_row_sums() {
        let row = |m, split, p, t, c| TaskRow {
            model: m,
            task: vec![0, 0],
            name: "x".into(),
            seed: 0,
            split,
            gates_passed: p,
            gates_total: t,
            crashed: c,
            mean_speed: 1.0,
            reference_speed: 1.0,
            flown_speed: 1.0,
            error: None,
        };
        let rows = vec![
            row(ModelKind::Baseline, Split::Training, 3, 8, false),
            row(ModelKind::Baseline, Split::HeldOut, 1, 2, true),
            row(ModelKind::Knet, Split::HeldOut, 2, 2, false),
        ];
        let r = RunReport::from_rows(50, rows);
        let all = r.aggregate(ModelKind::Baseline, "all").unwrap();
        assert_eq!(
            (all.gates_passed, all.gates_total, all.crashes, all.tasks),
            (4, 10, 1, 2)
        );
        assert_eq!(r.passage(ModelKind::Baseline, "held-out"), 0.5);
        assert_eq!(r.passage(ModelKind::Knet, "training"), 0.0);
        assert!(r
            .aggregate_csv()
            .starts_with("model,all,training,held_out,crashes\nbaseline,0.4000"));
    }
}
