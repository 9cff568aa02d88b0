//! Contraction fitting, score budgets, tube radii and gate certificates.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::score::FactorSpace;
use crate::vecops::{dist, norm};
use crate::vehicle::{chunk_to_plan, rollout, CarrotParams, ChunkFrame, Gains, QuadState, VehicleParams};

/// Grid over which the contraction rate is searched: 0.01, 0.02, ..., 0.99.
pub const LAMBDA_GRID: usize = 99;
/// Allowed miss of the nominal trajectory at a gate center (m).
pub const NOMINAL_TOLERANCE: f64 = 1e-2;
/// Paper-default gate half-widths.
pub const GATE_SIZES: [(&str, f64); 3] = [("narrow", 0.3), ("standard", 0.762), ("wide", 1.0)];

/// `(|dx_t|, |da_t|, |dx_{t+1}|)` from one step of a paired run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTriple {
    pub dx: f64,
    pub da: f64,
    pub dx_next: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionEstimate {
    pub lambda: f64,
    pub b_kappa: f64,
    pub w: f64,
    /// Command scale used to rank candidate rates.
    pub c_ref: f64,
    pub n_triples: usize,
    /// Smallest slack over the data; zero up to rounding when the fit is tight.
    pub min_slack: f64,
    pub ensemble: String,
}

impl ContractionEstimate {
    pub fn new(lambda: f64, b_kappa: f64, w: f64) -> Self {
        Self {
            lambda,
            b_kappa,
            w,
            c_ref: 0.0,
            n_triples: 0,
            min_slack: 0.0,
            ensemble: "given".into(),
        }
    }

    pub fn holds(&self, t: &StepTriple) -> bool {
        t.dx_next <= self.lambda * t.dx + self.b_kappa * t.da + self.w + 1e-12 * (1.0 + t.dx_next)
    }
}

/// Cheapest `(B, w) >= 0` with `B da_i + w >= r_i` for all `i`, minimizing
/// `B c + w`. The objective is convex piecewise linear in `B`, so a
/// ternary search over `B` finds the minimizer.
fn fit_bw(r: &[f64], da: &[f64], c: f64) -> (f64, f64) {
    let w_at = |b: f64| r.iter().zip(da).fold(0.0f64, |m, (ri, di)| m.max(ri - b * di));
    let w_inf = r
        .iter()
        .zip(da)
        .filter(|(_, d)| **d == 0.0)
        .fold(0.0f64, |m, (ri, _)| m.max(*ri));
    // B beyond which w is pinned by the command-free rows
    let b_hi = r
        .iter()
        .zip(da)
        .filter(|(_, d)| **d > 0.0)
        .fold(0.0f64, |m, (ri, di)| m.max((ri - w_inf) / di));
    let f = |b: f64| b * c + w_at(b);
    if c <= 0.0 {
        return (b_hi, w_inf);
    }
    let (mut lo, mut hi) = (0.0, b_hi);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    // snap to the tightest breakpoint so exact data give exact constants
    let mut best = (hi, f(hi));
    for b in [0.0, b_hi] {
        let v = f(b);
        if v <= best.1 + 1e-15 * (1.0 + best.1) {
            best = (b, v);
        }
    }
    let b = best.0;
    (b, w_at(b))
}

/// Tightest `(lambda, B, w)` consistent with every triple. For each grid
/// rate the cheapest `(B, w)` is found at command scale `c_ref`; the rate
/// minimizing `(B c_ref + w) / (1 - lambda)` wins.
///
/// `c_ref` should be the command mismatch the certificate will be used at.
/// The rate is only identified when the ensemble's state offsets are well
/// beyond the steady-state radius at `c_ref`. A fit is rejected as
/// non-contracting when it lands on the top of the grid or needs a per-step
/// disturbance larger than every observed deviation.
pub fn fit_contraction(triples: &[StepTriple], c_ref: f64, ensemble: &str) -> Result<ContractionEstimate> {
    if triples.is_empty() {
        return invalid("no step triples");
    }
    if triples
        .iter()
        .any(|t| !(t.dx >= 0.0 && t.da >= 0.0 && t.dx_next >= 0.0) || !t.dx_next.is_finite())
    {
        return invalid("step triples must be finite and non-negative");
    }
    let da: Vec<f64> = triples.iter().map(|t| t.da).collect();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for g in 1..=LAMBDA_GRID {
        let lambda = g as f64 / 100.0;
        let r: Vec<f64> = triples.iter().map(|t| t.dx_next - lambda * t.dx).collect();
        let (b, w) = fit_bw(&r, &da, c_ref);
        let cost = (b * c_ref + w) / (1.0 - lambda);
        if best.is_none_or(|x| cost < x.3) {
            best = Some((lambda, b, w, cost));
        }
    }
    let (lambda, b_kappa, w, _) = best.expect("grid is non-empty");
    let max_dx = triples.iter().map(|t| t.dx).fold(0.0, f64::max);
    if g_is_top(lambda) || (w > 0.0 && w >= max_dx) {
        return Err(Error::NotContracting { lambda });
    }
    let min_slack = triples
        .iter()
        .map(|t| lambda * t.dx + b_kappa * t.da + w - t.dx_next)
        .fold(f64::INFINITY, f64::min);
    Ok(ContractionEstimate {
        lambda,
        b_kappa,
        w,
        c_ref,
        n_triples: triples.len(),
        min_slack,
        ensemble: ensemble.into(),
    })
}

fn g_is_top(lambda: f64) -> bool {
    lambda >= LAMBDA_GRID as f64 / 100.0
}

/// `x' = a x + b u + w` with scalar gains on `R^dim`; `w` has fixed norm
/// `noise` and a random direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPlant {
    pub a: f64,
    pub b: f64,
    pub noise: f64,
    pub dim: usize,
}

impl LinearPlant {
    pub fn step(&self, x: &[f64], u: &[f64], r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        let w = if self.noise > 0.0 {
            let d = rng::normal_vec(r, self.dim);
            let n = norm(&d);
            d.into_iter().map(|v| self.noise * v / n).collect()
        } else {
            vec![0.0; self.dim]
        };
        x.iter()
            .zip(u)
            .zip(&w)
            .map(|((xi, ui), wi)| self.a * xi + self.b * ui + wi)
            .collect()
    }

    /// States `x_0..=x_T` under the action sequence.
    pub fn run(&self, x0: &[f64], actions: &[Vec<f64>], noise_seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(noise_seed, 0x1A);
        let mut xs = vec![x0.to_vec()];
        for u in actions {
            let next = self.step(xs.last().unwrap(), u, &mut r);
            xs.push(next);
        }
        xs
    }

    /// Paired runs: offset-only pairs with shared commands, and
    /// command-only pairs from a shared start.
    pub fn ensemble(&self, offsets: &[f64], command_scales: &[f64], steps: usize, seed: u64) -> Vec<StepTriple> {
        let mut r = rng::stream(seed, 0x1B);
        let mut triples = Vec::new();
        let unit = |r: &mut rand_chacha::ChaCha8Rng, s: f64| {
            let d = rng::normal_vec(r, self.dim);
            let n = norm(&d);
            d.into_iter().map(|v| s * v / n).collect::<Vec<f64>>()
        };
        let mut push = |xa: &[Vec<f64>], xb: &[Vec<f64>], ua: &[Vec<f64>], ub: &[Vec<f64>]| {
            for t in 0..steps {
                triples.push(StepTriple {
                    dx: dist(&xa[t], &xb[t]),
                    da: dist(&ua[t], &ub[t]),
                    dx_next: dist(&xa[t + 1], &xb[t + 1]),
                });
            }
        };
        for (j, &o) in offsets.iter().enumerate() {
            let u: Vec<Vec<f64>> = (0..steps).map(|_| rng::normal_vec(&mut r, self.dim)).collect();
            let x0 = rng::normal_vec(&mut r, self.dim);
            let d = unit(&mut r, o);
            let x1: Vec<f64> = x0.iter().zip(&d).map(|(a, b)| a + b).collect();
            let xa = self.run(&x0, &u, seed ^ (2 * j as u64));
            let xb = self.run(&x1, &u, seed ^ (2 * j as u64 + 1));
            push(&xa, &xb, &u, &u);
        }
        for (j, &s) in command_scales.iter().enumerate() {
            let u: Vec<Vec<f64>> = (0..steps).map(|_| rng::normal_vec(&mut r, self.dim)).collect();
            let x0 = rng::normal_vec(&mut r, self.dim);
            let dir = unit(&mut r, s);
            let v: Vec<Vec<f64>> = u
                .iter()
                .map(|ut| ut.iter().zip(&dir).map(|(a, b)| a + b).collect())
                .collect();
            let xa = self.run(&x0, &u, seed ^ (0x100 + 2 * j as u64));
            let xb = self.run(&x0, &v, seed ^ (0x101 + 2 * j as u64));
            push(&xa, &xb, &u, &v);
        }
        triples
    }
}

/// Paired closed-loop flights on the quadrotor stack. Each reference chunk
/// is flown against a copy with an initial position offset, and against a
/// copy whose normalized chunk is perturbed by a random direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadEnsemble {
    /// Normalized reference chunks.
    pub chunks: Vec<Vec<f64>>,
    pub frame: ChunkFrame,
    pub offsets: Vec<f64>,
    pub command_scales: Vec<f64>,
    pub duration: f64,
    /// Sampling interval of the step triples (s).
    pub step: f64,
    pub c_ref: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleStack {
    pub params: VehicleParams,
    pub gains: Gains,
    pub carrot: CarrotParams,
}

impl VehicleStack {
    /// Flies a normalized chunk from rest at its first keypoint (plus offset).
    pub fn fly(
        &self,
        frame: &ChunkFrame,
        chunk: &[f64],
        offset: Vector3<f64>,
        duration: f64,
    ) -> Result<crate::vehicle::Rollout> {
        let c = frame.denormalize(chunk)?;
        let plan = chunk_to_plan(&c)?;
        let start = QuadState::at_rest(plan.points[0].p + offset);
        rollout(&start, &plan, &self.gains, &self.params, &self.carrot, duration)
    }
}

pub fn estimate_contraction(stack: &VehicleStack, ens: &QuadEnsemble, exec: Exec) -> Result<ContractionEstimate> {
    if ens.chunks.is_empty() || !(ens.step > 0.0) {
        return invalid("ensemble needs chunks and a positive step");
    }
    let stride = (ens.step / stack.params.dt).round().max(1.0) as usize;
    let jobs: Vec<(usize, bool, f64)> = (0..ens.chunks.len())
        .flat_map(|c| {
            ens.offsets
                .iter()
                .map(move |&o| (c, true, o))
                .chain(ens.command_scales.iter().map(move |&s| (c, false, s)))
        })
        .collect();
    let per = exec.try_map_range(jobs.len(), |j| {
        let (c, is_offset, mag) = jobs[j];
        let mut r = rng::stream(ens.seed, j as u64);
        let base = ens.chunks[c].clone();
        let a = stack.fly(&ens.frame, &base, Vector3::zeros(), ens.duration)?;
        let (b, da) = if is_offset {
            let d = Vector3::from_vec(rng::normal_vec(&mut r, 3)).normalize() * mag;
            (stack.fly(&ens.frame, &base, d, ens.duration)?, 0.0)
        } else {
            let d = rng::normal_vec(&mut r, base.len());
            let n = norm(&d);
            let pert: Vec<f64> = base.iter().zip(&d).map(|(x, y)| x + mag * y / n).collect();
            // clamping speeds can shrink the realized perturbation
            let realized = dist(&ens.frame.normalize(&ens.frame.denormalize(&pert)?), &base);
            (stack.fly(&ens.frame, &pert, Vector3::zeros(), ens.duration)?, realized)
        };
        if a.crashed.is_some() || b.crashed.is_some() {
            return Err(Error::InvalidArgument(format!("ensemble rollout {j} crashed")));
        }
        let n = a.states.len().min(b.states.len());
        let gap: Vec<f64> = (0..n)
            .step_by(stride)
            .map(|k| (a.states[k].p - b.states[k].p).norm())
            .collect();
        Ok::<Vec<StepTriple>, Error>(
            gap.windows(2)
                .map(|w| StepTriple {
                    dx: w[0],
                    da,
                    dx_next: w[1],
                })
                .collect(),
        )
    })?;
    let triples: Vec<StepTriple> = per.into_iter().flatten().collect();
    let desc = format!(
        "quad: {} chunks, offsets {:?}, command scales {:?}, {} s at {} s steps",
        ens.chunks.len(),
        ens.offsets,
        ens.command_scales,
        ens.duration,
        ens.step
    );
    fit_contraction(&triples, ens.c_ref, &desc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBudget {
    /// Decomposition term standing in for `2 sqrt(G M)`.
    pub eps_d: f64,
    pub eta: f64,
    pub k: usize,
    pub lipschitz: Vec<f64>,
    pub delta: Vec<f64>,
    pub eps_s: f64,
}

impl ScoreBudget {
    pub fn coverage_term(&self) -> f64 {
        self.lipschitz.iter().zip(&self.delta).map(|(l, d)| l * d).sum()
    }

    pub fn eta_term(&self) -> f64 {
        (2 * self.k).saturating_sub(1) as f64 * self.eta
    }

    pub fn recompute(&self) -> f64 {
        self.eps_d + self.eta_term() + self.coverage_term()
    }
}

pub fn assemble_budget(eps_d: f64, eta: f64, k: usize, lipschitz: &[f64], delta: &[f64]) -> Result<ScoreBudget> {
    if lipschitz.len() != delta.len() {
        return invalid("one Lipschitz constant per coverage distance");
    }
    if [eps_d, eta]
        .iter()
        .chain(lipschitz)
        .chain(delta)
        .any(|x| !(*x >= 0.0) || !x.is_finite())
    {
        return invalid("budget parts must be finite and non-negative");
    }
    let mut b = ScoreBudget {
        eps_d,
        eta,
        k,
        lipschitz: lipschitz.to_vec(),
        delta: delta.to_vec(),
        eps_s: 0.0,
    };
    b.eps_s = b.recompute();
    Ok(b)
}

/// Per-factor coverage distance of `z`: how far each value sits from the
/// nearest value of that factor seen in training.
pub fn coverage_deltas(space: &FactorSpace, train: &[Vec<usize>], z: &[usize]) -> Vec<f64> {
    (0..space.k())
        .map(|i| {
            train
                .iter()
                .map(|t| space.distance(i, z[i], t[i]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeRadius {
    pub at_t: f64,
    pub steady: f64,
}

/// `lambda^t delta0 + (B C eps + w) / (1 - lambda)`.
pub fn tube_radius(eps_s: f64, c_ode: f64, k: &ContractionEstimate, delta0: f64, t: u32) -> Result<TubeRadius> {
    if !(0.0..1.0).contains(&k.lambda) {
        return invalid(format!("contraction rate {} is not below one", k.lambda));
    }
    if [eps_s, c_ode, k.b_kappa, k.w, delta0].iter().any(|x| !(*x >= 0.0)) {
        return invalid("tube inputs must be non-negative");
    }
    let steady = (k.b_kappa * c_ode * eps_s + k.w) / (1.0 - k.lambda);
    Ok(TubeRadius {
        at_t: k.lambda.powi(t as i32) * delta0 + steady,
        steady,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeConstant {
    Analytic(f64),
    Ltv(f64),
    Empirical(f64),
}

impl OdeConstant {
    pub fn value(self) -> f64 {
        match self {
            Self::Analytic(v) | Self::Ltv(v) | Self::Empirical(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub center: Vector3<f64>,
    /// Unit normal pointing in the direction of travel.
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub gate: usize,
    pub nominal_miss: f64,
    pub margin: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeCertificate {
    pub budget: ScoreBudget,
    pub c_ode: OdeConstant,
    pub contraction: ContractionEstimate,
    /// Initial offset with the nominal tolerance already added.
    pub delta0: f64,
    pub r_ss: f64,
    pub radius: f64,
    pub gate_radius: f64,
    pub gates: Vec<GateVerdict>,
    pub certified: bool,
    /// Gate sizes whose half-width exceeds the tube radius.
    pub certifiable: Vec<String>,
}

impl TubeCertificate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn summary(&self) -> String {
        let verdict = if self.certified { "certified" } else { "not certified" };
        format!(
            "{verdict}: R = {:.4} m (delta0 {:.4} + R_ss {:.4}) vs r = {:.3} m; eps_s = {:.4}, C_ode = {:.4}, lambda = {:.2}, B = {:.4}, w = {:.4}; certifiable sizes: {}",
            self.radius,
            self.delta0,
            self.r_ss,
            self.gate_radius,
            self.budget.eps_s,
            self.c_ode.value(),
            self.contraction.lambda,
            self.contraction.b_kappa,
            self.contraction.w,
            if self.certifiable.is_empty() { "none".to_string() } else { self.certifiable.join(", ") }
        )
    }
}

fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = b - a;
    let l2 = d.norm_squared();
    let f = if l2 > 0.0 {
        ((p - a).dot(&d) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + d * f - p).norm()
}

/// Closest approach of a polyline to a point.
pub fn closest_approach(path: &[Vector3<f64>], p: &Vector3<f64>) -> f64 {
    match path.len() {
        0 => f64::INFINITY,
        1 => (path[0] - p).norm(),
        _ => path
            .windows(2)
            .map(|w| point_segment_distance(p, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Verdict per gate for a tube of radius `radius`: certified iff the
/// radius is below the half-width. Refuses when the nominal path itself
/// misses a gate center by more than `tolerance`.
pub fn gate_verdicts(
    nominal: &[Vector3<f64>],
    gates: &[Gate],
    radius: f64,
    gate_radius: f64,
    tolerance: f64,
) -> Result<Vec<GateVerdict>> {
    gates
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let miss = closest_approach(nominal, &g.center);
            if miss > tolerance {
                return Err(Error::NominalMissesGate {
                    gate: i,
                    miss,
                    tolerance,
                });
            }
            Ok(GateVerdict {
                gate: i,
                nominal_miss: miss,
                margin: gate_radius - radius,
                certified: radius < gate_radius,
            })
        })
        .collect()
}

/// Assembles the tube and checks it against every gate.
#[allow(clippy::too_many_arguments)]
pub fn certify_gates(
    nominal: &[Vector3<f64>],
    gates: &[Gate],
    gate_radius: f64,
    budget: ScoreBudget,
    c_ode: OdeConstant,
    contraction: ContractionEstimate,
    delta0: f64,
    tolerance: f64,
) -> Result<TubeCertificate> {
    let delta0 = delta0 + tolerance;
    let tube = tube_radius(budget.eps_s, c_ode.value(), &contraction, delta0, 0)?;
    let radius = tube.at_t;
    let verdicts = gate_verdicts(nominal, gates, radius, gate_radius, tolerance)?;
    Ok(TubeCertificate {
        certified: verdicts.iter().all(|v| v.certified),
        certifiable: GATE_SIZES
            .iter()
            .filter(|(_, r)| radius < *r)
            .map(|(n, _)| n.to_string())
            .collect(),
        gates: verdicts,
        budget,
        c_ode,
        contraction,
        delta0,
        r_ss: tube.steady,
        radius,
        gate_radius,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tighter {
    Factored,
    Joint,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundComparison {
    pub factored: f64,
    pub joint: f64,
    /// `sqrt(sum L_i^2) |delta|`
    pub cauchy_schwarz: f64,
    pub tighter: Tighter,
}

pub fn factored_vs_joint(eps_d: f64, lipschitz: &[f64], delta: &[f64], l_joint: f64) -> Result<BoundComparison> {
    if lipschitz.len() != delta.len() || !(l_joint >= 0.0) {
        return invalid("mismatched factor lists or negative joint constant");
    }
    let factored = eps_d + lipschitz.iter().zip(delta).map(|(l, d)| l * d).sum::<f64>();
    let dn = norm(delta);
    let joint = l_joint * dn;
    let tighter = if factored < joint {
        Tighter::Factored
    } else if joint < factored {
        Tighter::Joint
    } else {
        Tighter::Tie
    };
    Ok(BoundComparison {
        factored,
        joint,
        cauchy_schwarz: norm(lipschitz) * dn,
        tighter,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeCheck {
    pub max_deviation: f64,
    pub contained: bool,
}

pub fn empirical_tube_check(nominal: &[Vector3<f64>], other: &[Vector3<f64>], radius: f64) -> Result<TubeCheck> {
    if nominal.len() != other.len() {
        return invalid(format!("rollouts have {} and {} samples", nominal.len(), other.len()));
    }
    let max_deviation = nominal
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    Ok(TubeCheck {
        max_deviation,
        contained: max_deviation <= radius,
    })
}
