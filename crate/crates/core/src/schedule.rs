//! Forward-noising schedule, DDIM step plans and the continuous-time
//! coefficients of the variance-preserving probability-flow ODE.
//!
//! Conventions: level `k` has cumulative signal fraction `alpha_bar[k]`,
//! `alpha(k) = sqrt(alpha_bar[k])` and `sigma(k) = sqrt(1 - alpha_bar[k])`, so
//! `alpha^2 + sigma^2 = 1` at every level. Level 0 is the least noisy.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Offset of the squared-cosine schedule; keeps the first beta away from zero.
pub const COSINE_OFFSET: f64 = 0.008;
/// Per-level beta cap of the squared-cosine schedule.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub alpha_bar: Vec<f64>,
    /// Tag naming the ladder construction and the ODE convention.
    pub convention: String,
}

/// One noise level of a schedule, or the clean endpoint (`alpha_bar == 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub index: usize,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    pub fn alpha(&self) -> f64 {
        self.alpha_bar.sqrt()
    }

    pub fn sigma(&self) -> f64 {
        (1.0 - self.alpha_bar).max(0.0).sqrt()
    }
}

/// Squared-cosine ladder: `alpha_bar(t) = cos^2((t + s) / (1 + s) * pi / 2)`,
/// discretised through per-level betas capped at [`MAX_BETA`].
pub fn build_cosine_schedule(train_steps: usize) -> Result<NoiseSchedule> {
    if train_steps < 2 {
        return invalid(format!("train_steps must be >= 2, got {train_steps}"));
    }
    let f = |t: f64| {
        let x = (t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let n = train_steps as f64;
    let mut alpha_bar = Vec::with_capacity(train_steps);
    let mut prod = 1.0;
    for j in 0..train_steps {
        let beta = (1.0 - f((j + 1) as f64 / n) / f(j as f64 / n)).min(MAX_BETA);
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar, "cosine-vp")
}

impl NoiseSchedule {
    /// Validates a ladder: strictly decreasing values in (0, 1].
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, convention: &str) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return invalid("schedule needs at least two levels");
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return invalid("alpha_bar values must lie in (0, 1]");
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return invalid("alpha_bar must be strictly decreasing");
        }
        Ok(Self {
            train_steps: alpha_bar.len(),
            alpha_bar,
            convention: convention.to_string(),
        })
    }

    pub fn level(&self, k: usize) -> NoiseLevel {
        NoiseLevel {
            index: k,
            alpha_bar: self.alpha_bar[k],
        }
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha_bar[k].sqrt()
    }

    pub fn sigma(&self, k: usize) -> f64 {
        (1.0 - self.alpha_bar[k]).sqrt()
    }

    /// Sigma of the noisiest training level.
    pub fn sigma_max(&self) -> f64 {
        self.sigma(self.train_steps - 1)
    }

    /// Variance-preserving probability-flow coefficients at noise std `sigma`.
    ///
    /// Parameterised by sigma with `alpha = sqrt(1 - sigma^2)`, the reverse
    /// ODE `da/dsigma = f_dr a + g_tilde s` has
    /// `f_dr = dlog(alpha)/dsigma = -sigma / (1 - sigma^2)` and
    /// `g_tilde = -(sigma - f_dr sigma^2) = -sigma / (1 - sigma^2)`.
    pub fn continuous_coeffs(&self, sigma: f64) -> Result<(f64, f64)> {
        let smax = self.sigma_max();
        if !(0.0..=smax).contains(&sigma) {
            return invalid(format!("sigma {sigma} outside [0, {smax}]"));
        }
        let c = -sigma / (1.0 - sigma * sigma);
        Ok((c, c))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: NoiseSchedule = serde_json::from_str(s)?;
        Self::from_alpha_bar(raw.alpha_bar, &raw.convention)
    }
}

/// Drift and diffusion coefficients of a reverse-time ODE on `[0, sigma_max]`.
pub trait OdeCoefficients: Sync {
    fn drift(&self, sigma: f64) -> f64;
    fn diffusion(&self, sigma: f64) -> f64;
    fn sigma_max(&self) -> f64;
}

impl OdeCoefficients for NoiseSchedule {
    fn drift(&self, sigma: f64) -> f64 {
        -sigma / (1.0 - sigma * sigma)
    }

    fn diffusion(&self, sigma: f64) -> f64 {
        -sigma / (1.0 - sigma * sigma)
    }

    fn sigma_max(&self) -> f64 {
        NoiseSchedule::sigma_max(self)
    }
}

/// Constant coefficients on `[0, sigma_max]`; a closed-form test fixture.
#[derive(Debug, Clone, Copy)]
pub struct ConstantCoefficients {
    pub drift: f64,
    pub diffusion: f64,
    pub sigma_max: f64,
}

impl OdeCoefficients for ConstantCoefficients {
    fn drift(&self, _: f64) -> f64 {
        self.drift
    }

    fn diffusion(&self, _: f64) -> f64 {
        self.diffusion
    }

    fn sigma_max(&self) -> f64 {
        self.sigma_max
    }
}

/// DDIM update coefficients for a step from `alpha_bar_cur` to `alpha_bar_next`:
/// `a_next = c1 a + c2 eps_hat`.
pub fn ddim_coefficients(alpha_bar_cur: f64, alpha_bar_next: f64) -> (f64, f64) {
    let c1 = (alpha_bar_next / alpha_bar_cur).sqrt();
    let c2 = (1.0 - alpha_bar_next).sqrt() - (alpha_bar_next * (1.0 - alpha_bar_cur) / alpha_bar_cur).sqrt();
    (c1, c2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdimStepPlan {
    pub n_steps: usize,
    /// Training levels evaluated at steps `0..n_steps`, strictly decreasing.
    pub level_indices: Vec<usize>,
    /// `alpha_bar` at each evaluated level.
    pub alpha_bar: Vec<f64>,
    /// `alpha_bar` reached after each step; the last entry is the clean end (1).
    pub alpha_bar_next: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

impl DdimStepPlan {
    pub fn level(&self, k: usize) -> NoiseLevel {
        NoiseLevel {
            index: self.level_indices[k],
            alpha_bar: self.alpha_bar[k],
        }
    }

    /// Sigma after step `k` (zero after the final step).
    pub fn sigma_next(&self, k: usize) -> f64 {
        (1.0 - self.alpha_bar_next[k]).max(0.0).sqrt()
    }
}

/// Evenly strided plan: levels `(n-1)*r, ..., r, 0` with `r = train_steps / n`,
/// followed by a final step to the clean endpoint.
pub fn plan_ddim(schedule: &NoiseSchedule, n_steps: usize) -> Result<DdimStepPlan> {
    let t = schedule.train_steps;
    if n_steps == 0 || n_steps > t {
        return invalid(format!("n_steps must be in [1, {t}], got {n_steps}"));
    }
    let stride = t / n_steps;
    let level_indices: Vec<usize> = (0..n_steps).rev().map(|i| i * stride).collect();
    let alpha_bar: Vec<f64> = level_indices.iter().map(|&l| schedule.alpha_bar[l]).collect();
    let mut alpha_bar_next: Vec<f64> = alpha_bar[1..].to_vec();
    alpha_bar_next.push(1.0);
    let (c1, c2) = alpha_bar
        .iter()
        .zip(&alpha_bar_next)
        .map(|(&a, &b)| ddim_coefficients(a, b))
        .unzip();
    Ok(DdimStepPlan {
        n_steps,
        level_indices,
        alpha_bar,
        alpha_bar_next,
        c1,
        c2,
    })
}

/// `score = -eps / sqrt(1 - alpha_bar)`.
pub fn eps_to_score(eps: &[f64], level: NoiseLevel) -> Result<Vec<f64>> {
    let s = level.sigma();
    if s <= 0.0 {
        return Err(Error::ZeroNoise { level: level.index });
    }
    Ok(eps.iter().map(|e| -e / s).collect())
}

/// Inverse bridge: `eps = -sqrt(1 - alpha_bar) * score`.
pub fn score_to_eps(score: &[f64], level: NoiseLevel) -> Vec<f64> {
    let s = level.sigma();
    score.iter().map(|v| -v * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Independent high-precision evaluation (40 digits) of the same ladder.
    const ORACLE_T100: [(usize, f64); 7] = [
        (0, 0.999_368_718_401_658_48),
        (1, 0.998_252_486_466_134_55),
        (25, 0.835_620_576_950_887_39),
        (49, 0.493_843_590_440_637_71),
        (50, 0.478_264_632_945_478_22),
        (98, 0.000_242_857_227_935_005_63),
        (99, 2.428_572_279_350_056_3e-7),
    ];

    #[test]
    fn cosine_ladder_matches_oracle() {
        let s = build_cosine_schedule(100).unwrap();
        assert_eq!(s.alpha_bar.len(), 100);
        for (k, v) in ORACLE_T100 {
            assert!((s.alpha_bar[k] - v).abs() <= 1e-12, "level {k}");
        }
        assert!(s.alpha_bar[0] > 0.999);
        assert!(s.alpha_bar[99] < 1e-6);
    }

    #[test]
    fn minimal_ladder_is_valid() {
        let s = build_cosine_schedule(2).unwrap();
        assert_eq!(s.alpha_bar.len(), 2);
        assert!(s.alpha_bar[1] < s.alpha_bar[0]);
        assert!(build_cosine_schedule(1).is_err());
        assert!(build_cosine_schedule(0).is_err());
    }

    #[test]
    fn variance_preserving_and_monotone() {
        for t in [2, 10, 100, 1000] {
            let s = build_cosine_schedule(t).unwrap();
            for k in 0..t {
                assert!((s.alpha(k).powi(2) + s.sigma(k).powi(2) - 1.0).abs() <= 1e-12);
            }
            for k in 1..t {
                assert!(s.sigma(k) > s.sigma(k - 1));
            }
        }
    }

    #[test]
    fn ddim_plan_matches_hand_evaluation() {
        let s = build_cosine_schedule(100).unwrap();
        let p = plan_ddim(&s, 50).unwrap();
        assert_eq!(p.n_steps, 50);
        assert_eq!(&p.level_indices[..3], &[98, 96, 94]);
        assert_eq!(*p.level_indices.last().unwrap(), 0);
        let spots = [
            (0, 2.999_028_722_057_055_3, -1.999_757_279_085_904_5),
            (24, 1.032_066_139_143_039_6, -0.045_066_265_193_083_793),
            (49, 1.000_315_790_321_502_9, -0.025_133_252_207_642_088),
        ];
        for (k, c1, c2) in spots {
            assert_relative_eq!(p.c1[k], c1, max_relative = 1e-12);
            assert_relative_eq!(p.c2[k], c2, max_relative = 1e-11);
        }
    }

    #[test]
    fn identity_step_coefficients() {
        let (c1, c2) = ddim_coefficients(0.37, 0.37);
        assert!((c1 - 1.0).abs() < 1e-15);
        assert!(c2.abs() < 1e-15);
        // continuity as alpha_bar_next approaches alpha_bar_cur
        let mut prev = f64::INFINITY;
        for d in [1e-2, 1e-4, 1e-6, 1e-8] {
            let (_, c2) = ddim_coefficients(0.5, 0.5 + d);
            assert!(c2.abs() < prev);
            prev = c2.abs();
        }
    }

    #[test]
    fn full_plan_reproduces_ladder_and_coarse_plans_are_subsequences() {
        let s = build_cosine_schedule(100).unwrap();
        let full = plan_ddim(&s, 100).unwrap();
        assert_eq!(full.level_indices, (0..100).rev().collect::<Vec<_>>());
        for n in [10, 20, 30, 50] {
            let p = plan_ddim(&s, n).unwrap();
            assert_eq!(p.n_steps, n);
            assert!(p.level_indices.windows(2).all(|w| w[0] > w[1]));
            assert!(p.level_indices.iter().all(|l| full.level_indices.contains(l)));
            for k in 0..n {
                let (c1, c2) = ddim_coefficients(p.alpha_bar[k], p.alpha_bar_next[k]);
                assert!((p.c1[k] - c1).abs() <= 1e-12 && (p.c2[k] - c2).abs() <= 1e-12);
            }
        }
        assert!(plan_ddim(&s, 0).is_err());
        assert!(plan_ddim(&s, 101).is_err());
    }

    #[test]
    fn continuous_coefficients() {
        let s = build_cosine_schedule(100).unwrap();
        assert_eq!(s.continuous_coeffs(0.0).unwrap(), (0.0, 0.0));
        let (f, g) = s.continuous_coeffs(0.6).unwrap();
        // -0.6 / 0.64
        assert_relative_eq!(f, -0.9375, max_relative = 1e-15);
        assert_relative_eq!(g, -0.9375, max_relative = 1e-15);
        assert!(s.continuous_coeffs(-0.1).is_err());
        assert!(s.continuous_coeffs(1.0).is_err());
    }

    #[test]
    fn tabulated_forcing_integral_is_finite() {
        // L_a = 0: C = int |g| exp(int |f|) dsigma with coefficients held
        // piecewise constant (left value) on 1000 sigma points.
        let s = build_cosine_schedule(100).unwrap();
        let smax = s.sigma_max();
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| smax * i as f64 / (n - 1) as f64).collect();
        let mut inner: f64 = 0.0;
        let mut c = 0.0;
        for w in xs.windows(2) {
            let (f, g) = s.continuous_coeffs(w[0]).unwrap();
            let dx = w[1] - w[0];
            c += g.abs() * inner.exp() * dx;
            inner += f.abs() * dx;
        }
        assert!(c.is_finite() && c > 0.0);
    }

    #[test]
    fn bridge_examples() {
        let lvl = NoiseLevel {
            index: 3,
            alpha_bar: 0.75,
        };
        assert_eq!(eps_to_score(&[0.0, 0.0], lvl).unwrap(), vec![0.0, 0.0]);
        let s = eps_to_score(&[1.0, -2.0, 0.5], lvl).unwrap();
        for (v, e) in s.iter().zip([-2.0, 4.0, -1.0]) {
            assert!((v - e).abs() < 1e-15);
        }
        let clean = NoiseLevel {
            index: 0,
            alpha_bar: 1.0,
        };
        assert!(eps_to_score(&[1.0], clean).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = build_cosine_schedule(10).unwrap();
        let back = NoiseSchedule::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bridge_round_trip(v in proptest::collection::vec(-50.0f64..50.0, 1..16), ab in 0.001f64..0.999) {
                let lvl = NoiseLevel { index: 1, alpha_bar: ab };
                let back = eps_to_score(&score_to_eps(&v, lvl), lvl).unwrap();
                for (a, b) in v.iter().zip(&back) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }
        }
    }
}
