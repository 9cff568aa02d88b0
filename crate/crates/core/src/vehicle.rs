//! Rigid-body quadrotor, geometric SE(3) tracking controller and the
//! keypoint-to-waypoint carrot tracker.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::score::{ActionChunk, KEYPOINTS};

pub const GRAVITY: f64 = 9.81;
pub const PLAN_POINTS: usize = 256;
pub const SIM_HZ: f64 = 600.0;

/// Plant constants. Inertia is a flat disc of the frame radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub thrust_max: f64,
    pub torque_max: [f64; 3],
    pub dt: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let (m, r) = (0.5, 0.125);
        Self {
            mass: m,
            inertia: [m * r * r / 4.0, m * r * r / 4.0, m * r * r / 2.0],
            thrust_max: 4.0 * m * GRAVITY,
            torque_max: [0.5, 0.5, 0.1],
            dt: 1.0 / SIM_HZ,
        }
    }
}

impl VehicleParams {
    fn j(&self) -> Vector3<f64> {
        Vector3::from(self.inertia)
    }
}

/// Position loop gains act on acceleration, attitude gains on angular
/// acceleration (both are scaled by mass or inertia inside the law).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Gains {
    pub kx: f64,
    pub kv: f64,
    pub kr: f64,
    pub kw: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            kx: 16.0,
            kv: 8.0,
            kr: 400.0,
            kw: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub p: Vector3<f64>,
    /// Body-to-world rotation, `(w, x, y, z)` storage via nalgebra.
    pub q: Quaternion<f64>,
    pub v: Vector3<f64>,
    /// Body-frame angular rate.
    pub w: Vector3<f64>,
}

impl QuadState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            q: Quaternion::identity(),
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        UnitQuaternion::new_normalize(self.q).to_rotation_matrix().into_inner()
    }

    pub fn yaw(&self) -> f64 {
        UnitQuaternion::new_normalize(self.q).euler_angles().2
    }

    pub fn to_array(&self) -> [f64; 13] {
        [
            self.p.x, self.p.y, self.p.z, self.q.w, self.q.i, self.q.j, self.q.k, self.v.x, self.v.y, self.v.z,
            self.w.x, self.w.y, self.w.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    fn axpy(&self, h: f64, d: &QuadState) -> QuadState {
        QuadState {
            p: self.p + d.p * h,
            q: self.q + d.q * h,
            v: self.v + d.v * h,
            w: self.w + d.w * h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub thrust: f64,
    pub torque: Vector3<f64>,
}

impl ControlInput {
    pub fn zero() -> Self {
        Self {
            thrust: 0.0,
            torque: Vector3::zeros(),
        }
    }

    pub fn saturate(self, vp: &VehicleParams) -> Self {
        let t = Vector3::from_fn(|i, _| self.torque[i].clamp(-vp.torque_max[i], vp.torque_max[i]));
        Self {
            thrust: self.thrust.clamp(0.0, vp.thrust_max),
            torque: t,
        }
    }
}

fn derivative(x: &QuadState, u: &ControlInput, vp: &VehicleParams, accel_noise: &Vector3<f64>) -> QuadState {
    let r = UnitQuaternion::new_normalize(x.q);
    let j = vp.j();
    let acc = r * Vector3::new(0.0, 0.0, u.thrust / vp.mass) - Vector3::new(0.0, 0.0, GRAVITY) + accel_noise;
    let jw = j.component_mul(&x.w);
    let wdot = (u.torque - x.w.cross(&jw)).component_div(&j);
    QuadState {
        p: x.v,
        q: x.q * Quaternion::from_imag(x.w) * 0.5,
        v: acc,
        w: wdot,
    }
}

fn rk4(x: &QuadState, u: &ControlInput, vp: &VehicleParams, dt: f64, noise: &Vector3<f64>) -> QuadState {
    let k1 = derivative(x, u, vp, noise);
    let k2 = derivative(&x.axpy(dt / 2.0, &k1), u, vp, noise);
    let k3 = derivative(&x.axpy(dt / 2.0, &k2), u, vp, noise);
    let k4 = derivative(&x.axpy(dt, &k3), u, vp, noise);
    let mut out = QuadState {
        p: x.p + (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * (dt / 6.0),
        q: x.q + (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0),
        v: x.v + (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) * (dt / 6.0),
        w: x.w + (k1.w + k2.w * 2.0 + k3.w * 2.0 + k4.w) * (dt / 6.0),
    };
    out.q = out.q.normalize();
    out
}

/// One RK4 step of the Newton-Euler equations with zero-order-hold input.
pub fn quad_step(x: &QuadState, u: &ControlInput, vp: &VehicleParams, dt: f64) -> QuadState {
    rk4(x, u, vp, dt, &Vector3::zeros())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub yaw: f64,
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Geometric tracking law on SE(3), saturated to actuator limits.
pub fn se3_control(x: &QuadState, target: &Waypoint, gains: &Gains, vp: &VehicleParams) -> ControlInput {
    let e3 = Vector3::z();
    let r = x.rotation();
    let acc = -gains.kx * (x.p - target.p) - gains.kv * (x.v - target.v) + GRAVITY * e3;
    let thrust = vp.mass * acc.dot(&(r * e3));
    let b3 = if acc.norm() > 1e-9 { acc.normalize() } else { e3 };
    let b1c = Vector3::new(target.yaw.cos(), target.yaw.sin(), 0.0);
    let b2 = b3.cross(&b1c);
    let b2 = if b2.norm() > 1e-9 {
        b2.normalize()
    } else {
        // heading is undefined when the thrust axis is horizontal along b1c
        b3.cross(&Vector3::x()).normalize()
    };
    let rd = Matrix3::from_columns(&[b2.cross(&b3), b2, b3]);
    let er = 0.5 * vee(&(rd.transpose() * r - r.transpose() * rd));
    let j = vp.j();
    let alpha = -gains.kr * er - gains.kw * x.w;
    let torque = j.component_mul(&alpha) + x.w.cross(&j.component_mul(&x.w));
    ControlInput { thrust, torque }.saturate(vp)
}

/// Dense plan with arc-length bookkeeping for the carrot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointPlan {
    pub points: Vec<Waypoint>,
    /// Cumulative polyline length at each point.
    pub arc: Vec<f64>,
}

impl WaypointPlan {
    pub fn new(points: Vec<Waypoint>) -> Result<Self> {
        if points.is_empty()
            || points
                .iter()
                .any(|w| !(w.p.iter().chain(w.v.iter()).all(|x| x.is_finite()) && w.yaw.is_finite()))
        {
            return invalid("waypoint plan must be non-empty and finite");
        }
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            arc.push(arc.last().unwrap() + (w[1].p - w[0].p).norm());
        }
        Ok(Self { points, arc })
    }

    pub fn hover(p: Vector3<f64>, yaw: f64) -> Self {
        Self::new(vec![
            Waypoint {
                p,
                v: Vector3::zeros(),
                yaw
            };
            PLAN_POINTS
        ])
        .expect("finite hover plan")
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    /// Segment index and fraction at arc length `s` (clamped).
    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self
            .arc
            .partition_point(|&a| a <= s)
            .saturating_sub(1)
            .min(self.points.len().saturating_sub(2));
        if self.points.len() < 2 {
            return (0, 0.0);
        }
        let seg = self.arc[i + 1] - self.arc[i];
        let f = if seg > 0.0 {
            ((s - self.arc[i]) / seg).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (i, f)
    }

    /// Interpolated waypoint at arc length `s`; returns the segment index.
    pub fn at_arc(&self, s: f64) -> (Waypoint, usize) {
        let (i, f) = self.locate(s);
        if self.points.len() < 2 {
            return (self.points[0], 0);
        }
        let (a, b) = (&self.points[i], &self.points[i + 1]);
        let wp = Waypoint {
            p: a.p.lerp(&b.p, f),
            v: a.v.lerp(&b.v, f),
            yaw: if f < 0.5 { a.yaw } else { b.yaw },
        };
        (wp, i)
    }

    /// Arc length of the closest point on segments `from..=to`.
    fn project(&self, p: &Vector3<f64>, from: usize, to: usize) -> f64 {
        let mut best = (f64::INFINITY, self.arc[from]);
        for i in from..to.min(self.points.len() - 1) {
            let (a, b) = (self.points[i].p, self.points[i + 1].p);
            let d = b - a;
            let l2 = d.norm_squared();
            let f = if l2 > 0.0 {
                ((p - a).dot(&d) / l2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dist = (a + d * f - p).norm();
            if dist < best.0 {
                best = (dist, self.arc[i] + f * l2.sqrt());
            }
        }
        best.1
    }
}

/// Linear interpolation of the 32 keypoints to the dense plan. Velocity is
/// the segment tangent times the interpolated speed; zero-length segments
/// reuse the nearest defined tangent.
pub fn chunk_to_plan(chunk: &ActionChunk) -> Result<WaypointPlan> {
    let kp: Vec<(Vector3<f64>, f64)> = (0..KEYPOINTS)
        .map(|i| {
            let k = chunk.keypoint(i);
            (Vector3::new(k[0], k[1], k[2]), k[3])
        })
        .collect();
    if kp
        .iter()
        .any(|(p, s)| !(p.iter().all(|x| x.is_finite()) && s.is_finite()))
    {
        return invalid("non-finite keypoint");
    }
    let mut tangents: Vec<Option<Vector3<f64>>> =
        kp.windows(2).map(|w| (w[1].0 - w[0].0).try_normalize(1e-12)).collect();
    let first = tangents
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::InvalidArgument("all keypoints coincide".into()))?;
    let mut prev = first;
    for t in &mut tangents {
        match t {
            Some(v) => prev = *v,
            None => *t = Some(prev),
        }
    }
    let tangents: Vec<Vector3<f64>> = tangents.into_iter().flatten().collect();
    let mut yaw_prev = f64::atan2(first.y, first.x);
    let n_seg = (KEYPOINTS - 1) as f64;
    let points = (0..PLAN_POINTS)
        .map(|j| {
            let u = j as f64 * n_seg / (PLAN_POINTS - 1) as f64;
            let i = (u.floor() as usize).min(KEYPOINTS - 2);
            let f = u - i as f64;
            let p = kp[i].0.lerp(&kp[i + 1].0, f);
            let speed = (1.0 - f) * kp[i].1 + f * kp[i + 1].1;
            let t = tangents[i];
            if t.x.hypot(t.y) > 1e-9 {
                yaw_prev = f64::atan2(t.y, t.x);
            }
            Waypoint {
                p,
                v: t * speed.max(0.0),
                yaw: yaw_prev,
            }
        })
        .collect();
    WaypointPlan::new(points)
}

/// Affine map between physical chunks and the normalized space the
/// denoiser works in: positions relative to `center`, everything over `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkFrame {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Default for ChunkFrame {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            scale: 10.0,
        }
    }
}

impl ChunkFrame {
    pub fn normalize(&self, c: &ActionChunk) -> Vec<f64> {
        c.data
            .chunks_exact(4)
            .flat_map(|k| {
                [
                    (k[0] - self.center[0]) / self.scale,
                    (k[1] - self.center[1]) / self.scale,
                    (k[2] - self.center[2]) / self.scale,
                    k[3] / self.scale,
                ]
            })
            .collect()
    }

    /// Inverse of [`normalize`](Self::normalize), with speeds clamped at zero.
    pub fn denormalize(&self, x: &[f64]) -> Result<ActionChunk> {
        let data = x
            .chunks_exact(4)
            .flat_map(|k| {
                [
                    k[0] * self.scale + self.center[0],
                    k[1] * self.scale + self.center[1],
                    k[2] * self.scale + self.center[2],
                    k[3] * self.scale,
                ]
            })
            .collect();
        Ok(ActionChunk::new(data)?.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarrotParams {
    /// Maximum carrot lead over the vehicle's projection onto the plan (m).
    pub lookahead: f64,
    /// Minimum carrot speed so stalled plans still finish (m/s).
    pub min_speed: f64,
    /// Rollout aborts as a crash past this distance from the origin.
    pub position_bound: f64,
    /// Standard deviation of white acceleration noise (m/s^2), off by default.
    pub accel_noise: f64,
    pub noise_seed: u64,
}

impl Default for CarrotParams {
    fn default() -> Self {
        Self {
            lookahead: 0.5,
            min_speed: 0.1,
            position_bound: 1e3,
            accel_noise: 0.0,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub dt: f64,
    pub states: Vec<QuadState>,
    /// Plan segment tracked at each step (one fewer than `states`).
    pub waypoint_index: Vec<usize>,
    /// Step at which the vehicle diverged, if it did.
    pub crashed: Option<usize>,
}

impl Rollout {
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.states.iter().map(|s| s.p).collect()
    }

    /// `t, 13 state values, waypoint index`; the initial state has index 0.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz,waypoint\n");
        for (k, st) in self.states.iter().enumerate() {
            let _ = write!(s, "{}", k as f64 * self.dt);
            for x in st.to_array() {
                let _ = write!(s, ",{x}");
            }
            let wi = if k == 0 { 0 } else { self.waypoint_index[k - 1] };
            let _ = writeln!(s, ",{wi}");
        }
        s
    }
}

/// Closed-loop flight of `plan` for `duration` seconds. The carrot moves
/// along the plan at the planned speed, never more than `lookahead` ahead of
/// the vehicle's projection.
pub fn rollout(
    x0: &QuadState,
    plan: &WaypointPlan,
    gains: &Gains,
    vp: &VehicleParams,
    carrot: &CarrotParams,
    duration: f64,
) -> Result<Rollout> {
    if !(duration >= 0.0) || !(vp.dt > 0.0) {
        return invalid("duration must be non-negative and dt positive");
    }
    let steps = (duration / vp.dt).round() as usize;
    let mut states = Vec::with_capacity(steps + 1);
    let mut wpi = Vec::with_capacity(steps);
    let mut x = *x0;
    states.push(x);
    let mut noise_rng = rng::stream(carrot.noise_seed, 0x401);
    let mut proj_seg = 0usize;
    let mut s_proj = plan.project(&x.p, 0, plan.points.len());
    let mut s_c = s_proj;
    for step in 0..steps {
        let (target, seg) = plan.at_arc(s_c);
        let u = se3_control(&x, &target, gains, vp);
        let noise = if carrot.accel_noise > 0.0 {
            Vector3::from_fn(|_, _| {
                let n: f64 = StandardNormal.sample(&mut noise_rng);
                carrot.accel_noise * n
            })
        } else {
            Vector3::zeros()
        };
        x = rk4(&x, &u, vp, vp.dt, &noise);
        if !x.is_finite() || x.p.norm() > carrot.position_bound {
            wpi.push(seg);
            states.push(x);
            return Ok(Rollout {
                dt: vp.dt,
                states,
                waypoint_index: wpi,
                crashed: Some(step),
            });
        }
        // projection is searched in a short forward window so loops in the
        // plan cannot make it jump ahead
        let (lo, _) = plan.locate(s_proj);
        proj_seg = proj_seg.max(lo.saturating_sub(1));
        s_proj = s_proj.max(plan.project(&x.p, proj_seg, proj_seg + 8));
        let speed = target.v.norm().max(carrot.min_speed);
        s_c = (s_c + speed * vp.dt).min(s_proj + carrot.lookahead).min(plan.length());
        wpi.push(seg);
        states.push(x);
    }
    Ok(Rollout {
        dt: vp.dt,
        states,
        waypoint_index: wpi,
        crashed: None,
    })
}
