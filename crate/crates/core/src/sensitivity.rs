//! Sensitivity of the clean sample to score mismatch: the uniform Grönwall
//! constant, the path-dependent LTV constant, measured amplification and the
//! residual-gap decomposition.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::sampler::{DdimPath, PairedPaths};
use crate::schedule::{DdimStepPlan, NoiseLevel, NoiseSchedule, OdeCoefficients};
use crate::score::{Condition, ExpertMap, Observation, ScoreField};
use crate::vecops::{norm, sub};

/// Finite-difference step for Jacobians of fields without an analytic one.
pub const FD_STEP: f64 = 1e-4;
pub const POWER_TOL: f64 = 1e-13;
pub const POWER_MAX_ITER: usize = 500;

/// Piecewise-constant `L_a(sigma)` on equal bins over `[0, sigma_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProfile {
    pub sigma_max: f64,
    pub values: Vec<f64>,
}

impl LipschitzProfile {
    pub fn constant(sigma_max: f64, l: f64) -> Self {
        Self {
            sigma_max,
            values: vec![l],
        }
    }

    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        let b = self.bins();
        (0..=b).map(|i| self.sigma_max * i as f64 / b as f64).collect()
    }

    pub fn bin_of(&self, sigma: f64) -> usize {
        let b = self.bins();
        ((sigma / self.sigma_max * b as f64) as usize).min(b - 1)
    }

    pub fn at(&self, sigma: f64) -> f64 {
        self.values[self.bin_of(sigma)]
    }

    /// Per-bin max of `f` over `probes` evenly spaced points including both edges.
    pub fn from_fn(sigma_max: f64, bins: usize, probes: usize, f: impl Fn(f64) -> f64) -> Self {
        let w = sigma_max / bins as f64;
        let values = (0..bins)
            .map(|i| {
                (0..probes.max(2))
                    .map(|p| f(w * (i as f64 + p as f64 / (probes.max(2) - 1) as f64)))
                    .fold(0.0, f64::max)
            })
            .collect();
        Self { sigma_max, values }
    }

    /// Max score-Jacobian spectral norm over noised expert states at every
    /// training level, binned by sigma. Empty bins take the larger neighbour.
    #[allow(clippy::too_many_arguments)]
    pub fn estimate(
        field: &dyn ScoreField,
        expert: &dyn ExpertMap,
        tasks: &[Vec<usize>],
        o: &Observation,
        schedule: &NoiseSchedule,
        bins: usize,
        samples_per_level: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        let smax = schedule.sigma_max();
        let per_level = exec.try_map_range(schedule.train_steps, |k| {
            let mut r = rng::stream(seed, k as u64);
            let level = schedule.level(k);
            let mut best: f64 = 0.0;
            for s in 0..samples_per_level {
                let task = &tasks[s % tasks.len()];
                let a0 = expert.reference(o, task)?;
                let xi = rng::normal_vec(&mut r, a0.len());
                let a: Vec<f64> = a0
                    .iter()
                    .zip(&xi)
                    .map(|(m, e)| level.alpha() * m + level.sigma() * e)
                    .collect();
                let j = score_jacobian_at(field, &a, level, o, &Condition::joint(task))?;
                best = best.max(spectral_norm(&j));
            }
            Ok::<f64, Error>(best)
        })?;
        let mut values: Vec<Option<f64>> = vec![None; bins];
        let probe = Self {
            sigma_max: smax,
            values: vec![0.0; bins],
        };
        for (k, l) in per_level.into_iter().enumerate() {
            let b = probe.bin_of(schedule.sigma(k));
            values[b] = Some(values[b].map_or(l, |v: f64| v.max(l)));
        }
        if values.iter().all(Option::is_none) {
            return invalid("no samples landed in any bin");
        }
        let filled = (0..bins)
            .map(|i| {
                values[i].unwrap_or_else(|| {
                    let lo = values[..i].iter().rev().flatten().next();
                    let hi = values[i + 1..].iter().flatten().next();
                    lo.into_iter().chain(hi).cloned().fold(0.0, f64::max)
                })
            })
            .collect();
        Ok(Self {
            sigma_max: smax,
            values: filled,
        })
    }

    /// Grönwall constant for this profile.
    pub fn gronwall(&self, coeffs: &dyn OdeCoefficients) -> Result<f64> {
        gronwall_constant(coeffs, |s| self.at(s), &self.edges())
    }
}

/// `C = int_0^smax |g(s)| exp( int_0^s (|f| + |g| L_a) ) ds`.
///
/// Both integrals are advanced together as a two-state ODE with an adaptive
/// Dormand-Prince 5(4) pair, restarted at every breakpoint of `l_a`.
pub fn gronwall_constant(coeffs: &dyn OdeCoefficients, l_a: impl Fn(f64) -> f64, breakpoints: &[f64]) -> Result<f64> {
    let smax = coeffs.sigma_max();
    let mut knots: Vec<f64> = breakpoints.iter().cloned().filter(|&b| b > 0.0 && b < smax).collect();
    knots.push(0.0);
    knots.push(smax);
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut y = [0.0, 0.0];
    for w in knots.windows(2) {
        // L_a is evaluated at the panel midpoint so a step landing on an
        // edge never reads the neighbouring bin.
        let l = l_a(0.5 * (w[0] + w[1]));
        if !(l >= 0.0) {
            return invalid(format!("L_a must be non-negative, got {l}"));
        }
        let rhs = |s: f64, y: &[f64; 2]| {
            let (f, g) = (coeffs.drift(s).abs(), coeffs.diffusion(s).abs());
            [f + g * l, g * y[0].exp()]
        };
        y = dopri5(rhs, w[0], w[1], y, 1e-11);
    }
    Ok(y[1])
}

fn dopri5(f: impl Fn(f64, &[f64; 2]) -> [f64; 2], a: f64, b: f64, y0: [f64; 2], rtol: f64) -> [f64; 2] {
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let mut t = a;
    let mut y = y0;
    let mut h = (b - a) / 64.0;
    while t < b {
        if t + h > b {
            h = b - t;
        }
        let mut k = [[0.0; 2]; 7];
        k[0] = f(t, &y);
        for s in 0..6 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s + 1) {
                ys[0] += h * A[s][j] * kj[0];
                ys[1] += h * A[s][j] * kj[1];
            }
            k[s + 1] = f(t + C[s] * h, &ys);
        }
        // the sixth stage row holds the 5th-order weights; k[6] is FSAL
        let mut y5 = y;
        for j in 0..6 {
            y5[0] += h * A[5][j] * k[j][0];
            y5[1] += h * A[5][j] * k[j][1];
        }
        let mut err: f64 = 0.0;
        for i in 0..2 {
            let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum::<f64>() * h;
            let sc = 1e-300 + rtol * y[i].abs().max(y5[i].abs());
            err = err.max((e / sc).abs());
        }
        if err <= 1.0 || h.abs() < 1e-14 * (b - a) {
            t += h;
            y = y5;
        }
        let fac = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= fac;
    }
    y
}

/// Largest absolute eigenvalue of a symmetric matrix via the dense solver.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0, |a: f64, e| a.max(e.abs()))
}

/// Operator 2-norm of a general matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Power iteration on a symmetric positive semidefinite matrix from the
/// normalized all-ones vector. Stops once the eigen-residual is below
/// `tol * lambda`; `None` if that never happens.
pub fn power_iteration(p: &DMatrix<f64>, tol: f64, max_iter: usize) -> Option<f64> {
    let n = p.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..max_iter {
        let w = p * &v;
        let lambda = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return Some(0.0);
        }
        if (&w - &v * lambda).norm() <= tol * lambda.abs() {
            return Some(lambda);
        }
        v = w / wn;
    }
    None
}

/// `d eps_hat / d a`. Analytic when the field provides a score Jacobian
/// (`-sigma ds/da`) or an eps Jacobian; central differences with
/// [`FD_STEP`] otherwise.
pub fn jacobian_at(
    field: &dyn ScoreField,
    a: &[f64],
    level: NoiseLevel,
    o: &Observation,
    c: &Condition,
) -> Result<DMatrix<f64>> {
    let j = if let Some(js) = field.score_jacobian(a, level, o, c) {
        js? * -level.sigma()
    } else if let Some(je) = field.eps_jacobian(a, level, o, c) {
        je?
    } else {
        fd_jacobian(|x| field.eps(x, level, o, c), a, FD_STEP)?
    };
    check_finite(&j)?;
    Ok(j)
}

/// `ds/da`, analytic or by central differences.
pub fn score_jacobian_at(
    field: &dyn ScoreField,
    a: &[f64],
    level: NoiseLevel,
    o: &Observation,
    c: &Condition,
) -> Result<DMatrix<f64>> {
    let j = if let Some(js) = field.score_jacobian(a, level, o, c) {
        js?
    } else if let Some(je) = field.eps_jacobian(a, level, o, c) {
        let s = level.sigma();
        if s <= 0.0 {
            return Err(Error::ZeroNoise { level: level.index });
        }
        je? / -s
    } else {
        fd_jacobian(|x| field.score(x, level, o, c), a, FD_STEP)?
    };
    check_finite(&j)?;
    Ok(j)
}

fn check_finite(j: &DMatrix<f64>) -> Result<()> {
    if let Some(idx) = j.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteJacobian { coord: idx / j.nrows() });
    }
    Ok(())
}

pub fn fd_jacobian(f: impl Fn(&[f64]) -> Result<Vec<f64>>, a: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = a.len();
    let mut j = DMatrix::zeros(f(a)?.len(), n);
    let mut x = a.to_vec();
    for col in 0..n {
        x[col] = a[col] + h;
        let fp = f(&x)?;
        x[col] = a[col] - h;
        let fm = f(&x)?;
        x[col] = a[col];
        for (row, (p, m)) in fp.iter().zip(&fm).enumerate() {
            j[(row, col)] = (p - m) / (2.0 * h);
        }
    }
    Ok(j)
}

/// Eps Jacobians at every evaluated state of a path.
pub fn jacobians_along(
    field: &dyn ScoreField,
    path: &DdimPath,
    o: &Observation,
    exec: Exec,
) -> Result<Vec<DMatrix<f64>>> {
    exec.try_map_range(path.plan.n_steps, |k| {
        jacobian_at(field, &path.states[k], path.plan.level(k), o, &path.condition)
    })
}

pub fn step_matrix(plan: &DdimStepPlan, k: usize, j: &DMatrix<f64>) -> DMatrix<f64> {
    let n = j.nrows();
    j * plan.c2[k] + DMatrix::identity(n, n) * plan.c1[k]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvResult {
    pub c_ltv: f64,
    /// `|Phi_{k+1,N}|_2` for `k = 0..N`.
    pub phi_norms: Vec<f64>,
    /// Steps where power iteration stalled and the dense solver was used.
    pub dense_fallback_steps: Vec<usize>,
}

/// Backward Gramian recursion `P_N = I`, `P_k = M_k^T P_{k+1} M_k` with
/// `C_ltv = sum_k |c2(k)| sqrt(|P_{k+1}|_2)`.
pub fn ltv_constant(plan: &DdimStepPlan, jacobians: &[DMatrix<f64>]) -> Result<LtvResult> {
    let n_steps = plan.n_steps;
    if jacobians.len() != n_steps {
        return invalid(format!("{} jacobians for {n_steps} steps", jacobians.len()));
    }
    let dim = jacobians.first().map_or(0, |j| j.nrows());
    let mut p = DMatrix::<f64>::identity(dim, dim);
    let mut phi_norms = vec![0.0; n_steps];
    let mut dense_fallback_steps = Vec::new();
    for k in (0..n_steps).rev() {
        let lam = match power_iteration(&p, POWER_TOL, POWER_MAX_ITER) {
            Some(l) => l,
            None => {
                dense_fallback_steps.push(k);
                spectral_norm_sym(&p)
            }
        };
        phi_norms[k] = lam.max(0.0).sqrt();
        let m = step_matrix(plan, k, &jacobians[k]);
        p = m.transpose() * &p * &m;
        p = (&p + p.transpose()) * 0.5;
    }
    dense_fallback_steps.reverse();
    let c_ltv = (0..n_steps).map(|k| plan.c2[k].abs() * phi_norms[k]).sum();
    Ok(LtvResult {
        c_ltv,
        phi_norms,
        dense_fallback_steps,
    })
}

/// `Phi_{k+1,N} = M_{N-1} ... M_{k+1}` for every `k`, built right to left.
pub fn transition_matrices(plan: &DdimStepPlan, jacobians: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let n_steps = plan.n_steps;
    let dim = jacobians.first().map_or(0, |j| j.nrows());
    let mut out = vec![DMatrix::identity(dim, dim); n_steps];
    for k in (0..n_steps.saturating_sub(1)).rev() {
        out[k] = &out[k + 1] * step_matrix(plan, k + 1, &jacobians[k + 1]);
    }
    out
}

/// Spectral norms of the explicit products; cross-check for [`ltv_constant`].
pub fn explicit_phi_norms(plan: &DdimStepPlan, jacobians: &[DMatrix<f64>]) -> Vec<f64> {
    transition_matrices(plan, jacobians).iter().map(spectral_norm).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Amplification {
    Measured {
        c_emp: f64,
        gap: f64,
        max_score_gap: f64,
    },
    /// The score gap along the path is below 1e-12.
    NoMismatch {
        gap: f64,
    },
}

impl Amplification {
    pub fn value(&self) -> Option<f64> {
        match self {
            Amplification::Measured { c_emp, .. } => Some(*c_emp),
            Amplification::NoMismatch { .. } => None,
        }
    }
}

/// `|a_N - b_N| / max_k |s_a - s_b|`, the score gap taken along path `b`
/// (the nominal). Each field is evaluated with its own path's condition.
pub fn empirical_amplification(
    field_a: &dyn ScoreField,
    field_b: &dyn ScoreField,
    pair: &PairedPaths,
    o: &Observation,
) -> Result<Amplification> {
    let nominal = &pair.b;
    let mut max_gap: f64 = 0.0;
    for k in 0..nominal.plan.n_steps {
        let lvl = nominal.plan.level(k);
        let x = &nominal.states[k];
        let sa = field_a.score(x, lvl, o, &pair.a.condition)?;
        let sb = field_b.score(x, lvl, o, &nominal.condition)?;
        max_gap = max_gap.max(norm(&sub(&sa, &sb)));
    }
    if max_gap < 1e-12 {
        return Ok(Amplification::NoMismatch { gap: pair.gap });
    }
    Ok(Amplification::Measured {
        c_emp: pair.gap / max_gap,
        gap: pair.gap,
        max_score_gap: max_gap,
    })
}

/// `Delta eps_k = eps_a(b_k) - eps_b(b_k)` along the nominal path `b`.
pub fn forcings_along(
    field_a: &dyn ScoreField,
    field_b: &dyn ScoreField,
    pair: &PairedPaths,
    o: &Observation,
) -> Result<Vec<Vec<f64>>> {
    let nominal = &pair.b;
    (0..nominal.plan.n_steps)
        .map(|k| {
            let lvl = nominal.plan.level(k);
            let x = &nominal.states[k];
            Ok(sub(
                &field_a.eps(x, lvl, o, &pair.a.condition)?,
                &field_b.eps(x, lvl, o, &nominal.condition)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualGap {
    pub actual: f64,
    pub linearized: f64,
    pub ltv_bound: f64,
}

impl ResidualGap {
    pub fn linearization_ratio(&self) -> f64 {
        self.linearized / self.actual
    }

    pub fn alignment_ratio(&self) -> f64 {
        self.ltv_bound / self.linearized
    }
}

/// `actual` is the measured clean-end gap; `linearized` propagates the
/// forcings through the nominal step maps; `ltv_bound` uses norms only.
pub fn residual_gap(
    actual: f64,
    plan: &DdimStepPlan,
    jacobians: &[DMatrix<f64>],
    forcings: &[Vec<f64>],
    phi_norms: &[f64],
) -> Result<ResidualGap> {
    let n_steps = plan.n_steps;
    if jacobians.len() != n_steps || forcings.len() != n_steps || phi_norms.len() != n_steps {
        return invalid("jacobians, forcings and norms must have one entry per step");
    }
    let dim = forcings.first().map_or(0, Vec::len);
    let mut delta = DVector::<f64>::zeros(dim);
    for k in 0..n_steps {
        let m = step_matrix(plan, k, &jacobians[k]);
        delta = m * delta + DVector::from_column_slice(&forcings[k]) * plan.c2[k];
    }
    let ltv_bound = (0..n_steps)
        .map(|k| plan.c2[k].abs() * phi_norms[k] * norm(&forcings[k]))
        .sum();
    Ok(ResidualGap {
        actual,
        linearized: delta.norm(),
        ltv_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub c_ana: f64,
    pub c_ltv: f64,
    pub c_emp: Option<f64>,
    pub phi_norms: Vec<f64>,
    pub forcing_norms: Vec<f64>,
    pub residual: ResidualGap,
    /// `C_ltv <= C_ana` on this instance.
    pub ltv_within_ana: bool,
    pub dense_fallback_steps: Vec<usize>,
}

impl SensitivityReport {
    /// Analyses a pair whose path `b` is the nominal. Jacobians are taken
    /// from `field_b` along that path.
    pub fn build(
        field_a: &dyn ScoreField,
        field_b: &dyn ScoreField,
        pair: &PairedPaths,
        o: &Observation,
        c_ana: f64,
        exec: Exec,
    ) -> Result<Self> {
        let jac = jacobians_along(field_b, &pair.b, o, exec)?;
        let ltv = ltv_constant(&pair.b.plan, &jac)?;
        let forcings = forcings_along(field_a, field_b, pair, o)?;
        let residual = residual_gap(pair.gap, &pair.b.plan, &jac, &forcings, &ltv.phi_norms)?;
        let amp = empirical_amplification(field_a, field_b, pair, o)?;
        Ok(Self {
            c_ana,
            c_ltv: ltv.c_ltv,
            c_emp: amp.value(),
            forcing_norms: forcings.iter().map(|f| norm(f)).collect(),
            phi_norms: ltv.phi_norms,
            residual,
            ltv_within_ana: ltv.c_ltv <= c_ana,
            dense_fallback_steps: ltv.dense_fallback_steps,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `step,phi_norm,forcing_norm`
    pub fn profile_csv(&self) -> String {
        let mut s = String::from("step,phi_norm,forcing_norm\n");
        for (k, (p, f)) in self.phi_norms.iter().zip(&self.forcing_norms).enumerate() {
            let _ = writeln!(s, "{k},{p},{f}");
        }
        s
    }
}

/// Default `L_a` profile bin count.
pub const PROFILE_BINS: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::paired_sample;
    use crate::schedule::{build_cosine_schedule, plan_ddim, ConstantCoefficients};
    use crate::score::{perturb_field, FactorSpace, GaussianTaskFamily, TableExpert};
    use approx::assert_relative_eq;

    #[test]
    fn gronwall_forcing_only() {
        // f = 0, g = 2, L = 0 on [0, 1.5] -> 3
        let c = ConstantCoefficients {
            drift: 0.0,
            diffusion: 2.0,
            sigma_max: 1.5,
        };
        let v = gronwall_constant(&c, |_| 0.0, &[]).unwrap();
        assert_relative_eq!(v, 3.0, max_relative = 1e-9);
    }

    #[test]
    fn gronwall_constant_coefficients_closed_form() {
        for (f, g, l, s) in [(0.3, 0.7, 1.2, 2.0), (-0.5, 1.0, 0.0, 1.0), (1.0, -0.4, 3.0, 0.8)] {
            let c = ConstantCoefficients {
                drift: f,
                diffusion: g,
                sigma_max: s,
            };
            let rate = f64::abs(f) + f64::abs(g) * l;
            let want = g.abs() * ((rate * s).exp() - 1.0) / rate;
            let got = gronwall_constant(&c, |_| l, &[0.25, 0.5]).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-6);
        }
        let c = ConstantCoefficients {
            drift: 0.0,
            diffusion: 1.0,
            sigma_max: 1.0,
        };
        assert!(gronwall_constant(&c, |_| -1.0, &[]).is_err());
    }

    #[test]
    fn gronwall_vp_piecewise_closed_form() {
        // With |f| = |g| = s/(1-s^2), substitute u = -ln(1-s^2)/2: each panel
        // with constant L contributes e^{I0} (e^{(1+L) du} - 1) / (1 + L).
        let sched = build_cosine_schedule(100).unwrap();
        let prof = LipschitzProfile::from_fn(sched.sigma_max(), 16, 3, |s| 1.0 + 2.0 * (1.0 - s));
        let u = |s: f64| -0.5 * (1.0 - s * s).ln();
        let (mut inner, mut want) = (0.0f64, 0.0f64);
        for w in prof.edges().windows(2) {
            let l = prof.at(0.5 * (w[0] + w[1]));
            let du = u(w[1]) - u(w[0]);
            want += inner.exp() * (((1.0 + l) * du).exp() - 1.0) / (1.0 + l);
            inner += (1.0 + l) * du;
        }
        assert_relative_eq!(prof.gronwall(&sched).unwrap(), want, max_relative = 1e-6);
    }

    #[test]
    fn power_iteration_agrees_with_dense() {
        let mut r = rng::stream(2, 0);
        let a = DMatrix::from_vec(20, 20, rng::normal_vec(&mut r, 400));
        let p = a.transpose() * &a;
        let l = power_iteration(&p, 1e-12, 5000).unwrap();
        assert_relative_eq!(l, spectral_norm_sym(&p), max_relative = 1e-10);
        assert_eq!(power_iteration(&DMatrix::zeros(3, 3), 1e-10, 10), Some(0.0));
    }

    fn dirac_family(dim: usize) -> GaussianTaskFamily {
        let space = FactorSpace::with_cardinalities(&[2]).unwrap();
        let e = TableExpert::from_fn(space, |z| (0..dim).map(|j| 0.1 * j as f64 + z[0] as f64).collect()).unwrap();
        GaussianTaskFamily::full(e, 0.0).unwrap()
    }

    #[test]
    fn dirac_jacobian_is_scaled_identity() {
        let f = dirac_family(6);
        let lvl = NoiseLevel {
            index: 3,
            alpha_bar: 0.36,
        };
        let j = jacobian_at(&f, &[0.1; 6], lvl, &Observation::default(), &Condition::joint(&[1])).unwrap();
        let want = DMatrix::<f64>::identity(6, 6) / 0.8;
        assert!((j - want).amax() <= 1e-10);
    }

    #[test]
    fn finite_differences_are_exact_for_linear_fields() {
        let mut r = rng::stream(4, 0);
        let a = DMatrix::from_vec(5, 5, rng::normal_vec(&mut r, 25));
        let b = rng::normal_vec(&mut r, 5);
        let f = |x: &[f64]| {
            Ok((&a * DVector::from_column_slice(x) + DVector::from_column_slice(&b))
                .as_slice()
                .to_vec())
        };
        let j = fd_jacobian(f, &[0.3, -1.0, 2.0, 0.0, 5.0], FD_STEP).unwrap();
        assert!((j - &a).amax() <= 1e-6);
    }

    #[test]
    fn zero_jacobians_give_product_of_c1() {
        let sched = build_cosine_schedule(100).unwrap();
        let plan = plan_ddim(&sched, 20).unwrap();
        let jac = vec![DMatrix::zeros(4, 4); 20];
        let res = ltv_constant(&plan, &jac).unwrap();
        let mut want = 0.0;
        for k in 0..20 {
            let prod: f64 = plan.c1[k + 1..].iter().map(|c| c.abs()).product();
            assert_relative_eq!(res.phi_norms[k], prod, max_relative = 1e-12);
            want += plan.c2[k].abs() * prod;
        }
        assert_relative_eq!(res.c_ltv, want, max_relative = 1e-12);
        assert!(res.dense_fallback_steps.is_empty());
    }

    #[test]
    fn recursion_matches_explicit_products() {
        let sched = build_cosine_schedule(100).unwrap();
        let plan = plan_ddim(&sched, 10).unwrap();
        let mut r = rng::stream(8, 0);
        let jac: Vec<DMatrix<f64>> = (0..10)
            .map(|_| DMatrix::from_vec(12, 12, rng::normal_vec(&mut r, 144)) * 0.2)
            .collect();
        let res = ltv_constant(&plan, &jac).unwrap();
        for (a, b) in res.phi_norms.iter().zip(explicit_phi_norms(&plan, &jac)) {
            assert_relative_eq!(*a, b, max_relative = 1e-10);
        }
        assert!(ltv_constant(&plan, &jac[..3]).is_err());
    }

    #[test]
    fn amplification_guards_identical_fields() {
        let f = dirac_family(4);
        let sched = build_cosine_schedule(100).unwrap();
        let plan = plan_ddim(&sched, 10).unwrap();
        let o = Observation::default();
        let c = Condition::joint(&[0]);
        let pair = paired_sample(&f, &f, &plan, &o, &c, &c, 0, 0).unwrap();
        assert!(matches!(
            empirical_amplification(&f, &f, &pair, &o).unwrap(),
            Amplification::NoMismatch { .. }
        ));
    }

    #[test]
    fn residual_gap_zero_forcing_and_aligned_forcing() {
        let sched = build_cosine_schedule(100).unwrap();
        let plan = plan_ddim(&sched, 8).unwrap();
        let mut r = rng::stream(6, 0);
        let jac: Vec<DMatrix<f64>> = (0..8)
            .map(|_| DMatrix::from_vec(5, 5, rng::normal_vec(&mut r, 25)) * 0.3)
            .collect();
        let ltv = ltv_constant(&plan, &jac).unwrap();
        let zero = vec![vec![0.0; 5]; 8];
        let g = residual_gap(0.0, &plan, &jac, &zero, &ltv.phi_norms).unwrap();
        assert_eq!((g.actual, g.linearized, g.ltv_bound), (0.0, 0.0, 0.0));

        // forcing along the top right-singular vector of Phi_{k+1,N}, with
        // signs chosen so all images share the same left direction: only
        // possible for one step at a time, so force a single step.
        let phis = transition_matrices(&plan, &jac);
        for k in [0, 3, 7] {
            let svd = phis[k].clone().svd(true, true);
            let i = svd.singular_values.imax();
            let v = svd.v_t.as_ref().unwrap().row(i).transpose();
            let mut forc = zero.clone();
            forc[k] = (v * 0.7).as_slice().to_vec();
            let g = residual_gap(0.0, &plan, &jac, &forc, &ltv.phi_norms).unwrap();
            assert_relative_eq!(g.linearized, g.ltv_bound, max_relative = 1e-8);
        }
    }

    #[test]
    fn perturbed_dirac_gap_is_below_ltv() {
        let f = dirac_family(8);
        let sched = build_cosine_schedule(100).unwrap();
        let plan = plan_ddim(&sched, 50).unwrap();
        let o = Observation::default();
        let c = Condition::joint(&[1]);
        let p = perturb_field(&f, 0.05, 3).unwrap();
        let pair = paired_sample(&p, &f, &plan, &o, &c, &c, 1, 0).unwrap();
        let rep = SensitivityReport::build(&p, &f, &pair, &o, f64::INFINITY, Exec::Sequential).unwrap();
        let c_emp = rep.c_emp.unwrap();
        assert!(c_emp <= rep.c_ltv * 1.1 + 1e-8, "{c_emp} vs {}", rep.c_ltv);
        let r = rep.residual;
        assert!(r.actual <= r.linearized * 1.1 + 1e-8);
        assert!(r.linearized <= r.ltv_bound * 1.1 + 1e-8);
        assert!(rep.to_json().unwrap().contains("c_ltv"));
        assert_eq!(rep.profile_csv().lines().count(), 51);
    }

    #[test]
    fn profile_estimate_bins_every_level() {
        let f = dirac_family(3);
        let sched = build_cosine_schedule(100).unwrap();
        let tasks = f.expert.space.all_tasks();
        let prof = LipschitzProfile::estimate(
            &f,
            &f.expert,
            &tasks,
            &Observation::default(),
            &sched,
            16,
            2,
            0,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(prof.bins(), 16);
        // Dirac: |ds/da| = 1/sigma^2, largest in the first bin
        let s0 = sched.sigma(0);
        assert_relative_eq!(prof.values[0], 1.0 / (s0 * s0), max_relative = 1e-9);
        assert!(prof.values.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}
