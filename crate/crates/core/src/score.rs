//! Score fields over factored conditions: analytic task families, the
//! composed score, deterministic perturbations, and the interaction and
//! Lipschitz diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::schedule::{score_to_eps, NoiseLevel, NoiseSchedule};
use crate::vecops::{dist, log_sum_exp, mean, norm, percentile, sub};
use rand::Rng;

pub const KEYPOINTS: usize = 32;
pub const CHUNK_DIM: usize = KEYPOINTS * 4;

/// Posterior mass below this is treated as this (log-space floor).
pub const POSTERIOR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpace {
    pub names: Vec<String>,
    pub values: Vec<Vec<String>>,
}

impl FactorSpace {
    pub fn new(names: Vec<String>, values: Vec<Vec<String>>) -> Result<Self> {
        if names.len() != values.len() {
            return invalid("factor names and value lists differ in length");
        }
        if let Some(i) = values.iter().position(|v| v.is_empty()) {
            return invalid(format!("factor {i} has no values"));
        }
        Ok(Self { names, values })
    }

    /// Factors `f0, f1, ...` with values `v0, v1, ...`.
    pub fn with_cardinalities(cards: &[usize]) -> Result<Self> {
        Self::new(
            (0..cards.len()).map(|i| format!("f{i}")).collect(),
            cards
                .iter()
                .map(|&n| (0..n).map(|v| format!("v{v}")).collect())
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn cardinality(&self, i: usize) -> usize {
        self.values[i].len()
    }

    pub fn value_index(&self, i: usize, name: &str) -> Option<usize> {
        self.values[i].iter().position(|v| v == name)
    }

    /// Values of every factor sit on orthonormal axes of their own space.
    pub fn embedding(&self, i: usize, v: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.cardinality(i)];
        e[v] = 1.0;
        e
    }

    pub fn distance(&self, i: usize, u: usize, w: usize) -> f64 {
        dist(&self.embedding(i, u), &self.embedding(i, w))
    }

    pub fn n_tasks(&self) -> usize {
        self.values.iter().map(Vec::len).product()
    }

    /// Mixed-radix index with the last factor varying fastest.
    pub fn flat_index(&self, z: &[usize]) -> Result<usize> {
        if z.len() != self.k() {
            return invalid(format!("task has {} slots, expected {}", z.len(), self.k()));
        }
        let mut idx = 0;
        for (i, &v) in z.iter().enumerate() {
            if v >= self.cardinality(i) {
                return invalid(format!("value {v} out of range for factor {i}"));
            }
            idx = idx * self.cardinality(i) + v;
        }
        Ok(idx)
    }

    pub fn task(&self, mut flat: usize) -> Vec<usize> {
        let mut z = vec![0; self.k()];
        for i in (0..self.k()).rev() {
            z[i] = flat % self.cardinality(i);
            flat /= self.cardinality(i);
        }
        z
    }

    pub fn all_tasks(&self) -> Vec<Vec<usize>> {
        (0..self.n_tasks()).map(|f| self.task(f)).collect()
    }
}

/// One slot per factor; `None` is the null token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub slots: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMode {
    Joint,
    Single(usize),
    Unconditional,
    /// More than one but not all slots set.
    Partial,
}

impl Condition {
    pub fn joint(z: &[usize]) -> Self {
        Self {
            slots: z.iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn single(k: usize, i: usize, v: usize) -> Self {
        let mut slots = vec![None; k];
        slots[i] = Some(v);
        Self { slots }
    }

    pub fn unconditional(k: usize) -> Self {
        Self { slots: vec![None; k] }
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn mode(&self) -> ConditionMode {
        let set: Vec<usize> = (0..self.k()).filter(|&i| self.slots[i].is_some()).collect();
        match set.len() {
            0 => ConditionMode::Unconditional,
            1 => ConditionMode::Single(set[0]),
            n if n == self.k() => ConditionMode::Joint,
            _ => ConditionMode::Partial,
        }
    }

    pub fn is_full(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    pub fn values(&self) -> Option<Vec<usize>> {
        self.slots.iter().copied().collect()
    }

    pub fn admits(&self, z: &[usize]) -> bool {
        self.slots.iter().zip(z).all(|(s, &v)| s.is_none_or(|s| s == v))
    }

    pub fn validate(&self, space: &FactorSpace) -> Result<()> {
        if self.k() != space.k() {
            return Err(Error::Condition(format!(
                "{} slots for {} factors",
                self.k(),
                space.k()
            )));
        }
        for (i, s) in self.slots.iter().enumerate() {
            if let Some(v) = s {
                if *v >= space.cardinality(i) {
                    return Err(Error::Condition(format!("value {v} invalid for factor {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Opaque observation handle. The open-loop benchmark keys experts on the task
/// alone, so most maps ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
}

/// 32 keypoints of `(x, y, z, speed)`, flattened keypoint-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != CHUNK_DIM {
            return invalid(format!("chunk has {} entries, expected {CHUNK_DIM}", data.len()));
        }
        Ok(Self { data })
    }

    pub fn from_keypoints(kp: &[[f64; 4]]) -> Result<Self> {
        Self::new(kp.iter().flatten().copied().collect())
    }

    pub fn keypoint(&self, j: usize) -> [f64; 4] {
        let s = &self.data[4 * j..4 * j + 4];
        [s[0], s[1], s[2], s[3]]
    }

    pub fn position(&self, j: usize) -> [f64; 3] {
        let k = self.keypoint(j);
        [k[0], k[1], k[2]]
    }

    pub fn speed(&self, j: usize) -> f64 {
        self.data[4 * j + 3]
    }

    /// Clamp speeds to be non-negative; applied once after denoising.
    pub fn finalize(mut self) -> Self {
        for j in 0..KEYPOINTS {
            let s = &mut self.data[4 * j + 3];
            *s = s.max(0.0);
        }
        self
    }
}

/// Deterministic reference chunk per (observation, task).
pub trait ExpertMap: Sync {
    fn dim(&self) -> usize;
    fn reference(&self, o: &Observation, task: &[usize]) -> Result<Vec<f64>>;
}

/// One stored reference per task of the full product space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableExpert {
    pub space: FactorSpace,
    pub dim: usize,
    pub table: Vec<Vec<f64>>,
}

impl TableExpert {
    pub fn new(space: FactorSpace, table: Vec<Vec<f64>>) -> Result<Self> {
        if table.len() != space.n_tasks() {
            return invalid(format!("{} table rows for {} tasks", table.len(), space.n_tasks()));
        }
        let dim = table.first().map_or(0, Vec::len);
        if dim == 0 || table.iter().any(|r| r.len() != dim) {
            return invalid("table rows must share a nonzero dimension");
        }
        Ok(Self { space, dim, table })
    }

    pub fn from_fn(space: FactorSpace, f: impl Fn(&[usize]) -> Vec<f64>) -> Result<Self> {
        let table = space.all_tasks().iter().map(|z| f(z)).collect();
        Self::new(space, table)
    }

    /// `a0*(z) = base + sum_i offsets[i][z_i]`.
    pub fn additive(space: FactorSpace, base: Vec<f64>, offsets: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if offsets.len() != space.k() {
            return invalid("one offset table per factor required");
        }
        Self::from_fn(space, |z| {
            let mut a = base.clone();
            for (i, &v) in z.iter().enumerate() {
                for (x, d) in a.iter_mut().zip(&offsets[i][v]) {
                    *x += d;
                }
            }
            a
        })
    }
}

impl ExpertMap for TableExpert {
    fn dim(&self) -> usize {
        self.dim
    }

    fn reference(&self, _: &Observation, task: &[usize]) -> Result<Vec<f64>> {
        Ok(self.table[self.space.flat_index(task)?].clone())
    }
}

/// An evaluatable score `s(a, level, o, c)`.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    fn n_factors(&self) -> usize;
    fn score(&self, a: &[f64], level: NoiseLevel, o: &Observation, c: &Condition) -> Result<Vec<f64>>;

    /// Noise prediction; the default goes through the score bridge.
    fn eps(&self, a: &[f64], level: NoiseLevel, o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        Ok(score_to_eps(&self.score(a, level, o, c)?, level))
    }

    /// Analytic `ds/da`, when the field has one.
    fn score_jacobian(
        &self,
        _a: &[f64],
        _level: NoiseLevel,
        _o: &Observation,
        _c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        None
    }

    /// Analytic `d eps_hat / da`, for fields that predict noise natively.
    fn eps_jacobian(
        &self,
        _a: &[f64],
        _level: NoiseLevel,
        _o: &Observation,
        _c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        None
    }

    fn gaussian_family(&self) -> Option<&GaussianTaskFamily> {
        None
    }
}

/// `-(a - alpha a0*) / sigma^2` for the Dirac target of task `z`.
pub fn dirac_score(
    expert: &dyn ExpertMap,
    a: &[f64],
    level: NoiseLevel,
    o: &Observation,
    z: &[usize],
) -> Result<Vec<f64>> {
    let s2 = 1.0 - level.alpha_bar;
    if s2 <= 0.0 {
        return Err(Error::ZeroNoise { level: level.index });
    }
    let alpha = level.alpha();
    let a0 = expert.reference(o, z)?;
    Ok(a.iter().zip(&a0).map(|(x, m)| -(x - alpha * m) / s2).collect())
}

/// Finite task family with per-task clean law `N(a0*(z), tau^2 I)` and a
/// prior over a support set. Full conditions use the task's own Gaussian;
/// partial conditions mix over the consistent support tasks. `tau = 0` is
/// the Dirac expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTaskFamily {
    pub expert: TableExpert,
    /// Flat task indices with positive prior mass.
    pub support: Vec<usize>,
    /// Unnormalized log prior, aligned with `support`.
    pub log_prior: Vec<f64>,
    pub tau: f64,
}

struct Posterior {
    alpha: f64,
    v: f64,
    /// (flat task, normalized weight)
    weights: Vec<(usize, f64)>,
}

impl GaussianTaskFamily {
    pub fn new(expert: TableExpert, support: &[Vec<usize>], tau: f64) -> Result<Self> {
        let w = vec![1.0; support.len()];
        Self::with_prior(expert, support, &w, tau)
    }

    pub fn dirac(expert: TableExpert, support: &[Vec<usize>]) -> Result<Self> {
        Self::new(expert, support, 0.0)
    }

    /// Full product support with a uniform prior.
    pub fn full(expert: TableExpert, tau: f64) -> Result<Self> {
        let all = expert.space.all_tasks();
        Self::new(expert, &all, tau)
    }

    pub fn with_prior(expert: TableExpert, support: &[Vec<usize>], prior: &[f64], tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return invalid("tau must be finite and non-negative");
        }
        if support.is_empty() || support.len() != prior.len() {
            return invalid("support must be nonempty with one prior weight per task");
        }
        if prior.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return invalid("prior weights must be positive");
        }
        let mut flat = Vec::with_capacity(support.len());
        for z in support {
            let f = expert.space.flat_index(z)?;
            if flat.contains(&f) {
                return invalid(format!("task {z:?} listed twice"));
            }
            flat.push(f);
        }
        Ok(Self {
            expert,
            support: flat,
            log_prior: prior.iter().map(|p| p.ln()).collect(),
            tau,
        })
    }

    pub fn space(&self) -> &FactorSpace {
        &self.expert.space
    }

    fn mean(&self, flat: usize) -> &[f64] {
        &self.expert.table[flat]
    }

    /// `(alpha, v)` with per-coordinate noised variance `v = alpha^2 tau^2 + sigma^2`.
    pub fn variance(&self, level: NoiseLevel) -> Result<(f64, f64)> {
        let alpha = level.alpha();
        let v = alpha * alpha * self.tau * self.tau + (1.0 - level.alpha_bar).max(0.0);
        if v <= 0.0 {
            return Err(Error::ZeroNoise { level: level.index });
        }
        Ok((alpha, v))
    }

    fn log_terms(&self, a: &[f64], alpha: f64, v: f64, c: &Condition) -> Vec<(usize, f64)> {
        self.support
            .iter()
            .zip(&self.log_prior)
            .filter(|(&f, _)| c.admits(&self.space().task(f)))
            .map(|(&f, &lp)| {
                let d2: f64 = a.iter().zip(self.mean(f)).map(|(x, m)| (x - alpha * m).powi(2)).sum();
                (f, lp - d2 / (2.0 * v))
            })
            .collect()
    }

    fn posterior(&self, a: &[f64], level: NoiseLevel, c: &Condition) -> Result<Posterior> {
        let (alpha, v) = self.variance(level)?;
        let terms = self.log_terms(a, alpha, v, c);
        if terms.is_empty() {
            return Err(Error::Condition(format!(
                "no support task is consistent with {:?}",
                c.slots
            )));
        }
        let lse = log_sum_exp(terms.iter().map(|t| t.1));
        let weights = terms
            .into_iter()
            .map(|(f, l)| {
                let w = (l - lse).exp();
                (f, if w < POSTERIOR_FLOOR { 0.0 } else { w })
            })
            .collect();
        Ok(Posterior { alpha, v, weights })
    }

    fn posterior_mean(&self, p: &Posterior) -> Vec<f64> {
        let mut m = vec![0.0; self.expert.dim];
        for &(f, w) in &p.weights {
            for (x, y) in m.iter_mut().zip(self.mean(f)) {
                *x += w * y;
            }
        }
        m
    }

    fn posterior_cov(&self, p: &Posterior) -> DMatrix<f64> {
        let n = self.expert.dim;
        let mbar = DVector::from_vec(self.posterior_mean(p));
        let mut cov = DMatrix::zeros(n, n);
        for &(f, w) in &p.weights {
            if w == 0.0 {
                continue;
            }
            let d = DVector::from_column_slice(self.mean(f)) - &mbar;
            cov.ger(w, &d, &d, 1.0);
        }
        cov
    }

    /// Upper bound on the spectral norm of the score Jacobian at noise std
    /// `sigma`, valid for every `a` and every condition.
    pub fn lipschitz_bound(&self, sigma: f64) -> f64 {
        let a2 = 1.0 - sigma * sigma;
        let v = a2 * self.tau * self.tau + sigma * sigma;
        let mut diam2: f64 = 0.0;
        for (i, &f) in self.support.iter().enumerate() {
            for &g in &self.support[i + 1..] {
                diam2 = diam2.max(dist(self.mean(f), self.mean(g)).powi(2));
            }
        }
        (1.0 / v).max(a2 / (v * v) * diam2 / 4.0 - 1.0 / v)
    }

    fn log_posterior_mass(&self, a: &[f64], alpha: f64, v: f64, z: &[usize], keep: Option<usize>) -> f64 {
        let k = self.space().k();
        let all = self.log_terms(a, alpha, v, &Condition::unconditional(k));
        let cond = match keep {
            Some(i) => Condition::single(k, i, z[i]),
            None => Condition::joint(z),
        };
        let num = log_sum_exp(self.log_terms(a, alpha, v, &cond).into_iter().map(|t| t.1));
        (num - log_sum_exp(all.into_iter().map(|t| t.1))).max(POSTERIOR_FLOOR.ln())
    }
}

impl ScoreField for GaussianTaskFamily {
    fn dim(&self) -> usize {
        self.expert.dim
    }

    fn n_factors(&self) -> usize {
        self.space().k()
    }

    fn score(&self, a: &[f64], level: NoiseLevel, _o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        c.validate(self.space())?;
        let (alpha, v) = self.variance(level)?;
        let m = match c.values() {
            Some(z) => self.mean(self.space().flat_index(&z)?).to_vec(),
            None => self.posterior_mean(&self.posterior(a, level, c)?),
        };
        Ok(a.iter().zip(&m).map(|(x, m)| -(x - alpha * m) / v).collect())
    }

    fn score_jacobian(
        &self,
        a: &[f64],
        level: NoiseLevel,
        _o: &Observation,
        c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        Some((|| {
            c.validate(self.space())?;
            let n = self.expert.dim;
            let (alpha, v) = self.variance(level)?;
            let mut j = DMatrix::from_diagonal_element(n, n, -1.0 / v);
            if !c.is_full() {
                let p = self.posterior(a, level, c)?;
                j += self.posterior_cov(&p) * (alpha / v).powi(2);
            }
            Ok(j)
        })())
    }

    fn gaussian_family(&self) -> Option<&GaussianTaskFamily> {
        Some(self)
    }
}

/// `Delta_i = s(., single(i, z_i)) - s(., unconditional)`; zero for the null token.
pub fn factor_correction(
    field: &dyn ScoreField,
    i: usize,
    a: &[f64],
    level: NoiseLevel,
    o: &Observation,
    z_i: Option<usize>,
) -> Result<Vec<f64>> {
    let k = field.n_factors();
    let Some(v) = z_i else {
        return Ok(vec![0.0; a.len()]);
    };
    let s_i = field.score(a, level, o, &Condition::single(k, i, v))?;
    let s_0 = field.score(a, level, o, &Condition::unconditional(k))?;
    Ok(sub(&s_i, &s_0))
}

fn require_full(c: &Condition) -> Result<Vec<usize>> {
    c.values()
        .ok_or_else(|| Error::Condition("composition needs every factor set".into()))
}

/// `s_comp = s_null + sum_i (s_i - s_null)` using `K + 1` evaluations of `field`.
pub fn compose(
    field: &dyn ScoreField,
    a: &[f64],
    level: NoiseLevel,
    o: &Observation,
    z: &Condition,
) -> Result<Vec<f64>> {
    let z = require_full(z)?;
    let k = z.len();
    let s0 = field.score(a, level, o, &Condition::unconditional(k))?;
    let mut out = s0.clone();
    for (i, &v) in z.iter().enumerate() {
        let si = field.score(a, level, o, &Condition::single(k, i, v))?;
        for ((x, s), b) in out.iter_mut().zip(&si).zip(&s0) {
            *x += s - b;
        }
    }
    Ok(out)
}

/// Evaluates full conditions through [`compose`]; other conditions pass through.
pub struct ComposedScore<'a> {
    pub inner: &'a dyn ScoreField,
}

impl ScoreField for ComposedScore<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn n_factors(&self) -> usize {
        self.inner.n_factors()
    }

    fn score(&self, a: &[f64], level: NoiseLevel, o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        if c.is_full() {
            compose(self.inner, a, level, o, c)
        } else {
            self.inner.score(a, level, o, c)
        }
    }

    fn eps(&self, a: &[f64], level: NoiseLevel, o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        if !c.is_full() {
            return self.inner.eps(a, level, o, c);
        }
        let z = require_full(c)?;
        let k = z.len();
        let e0 = self.inner.eps(a, level, o, &Condition::unconditional(k))?;
        let mut out = e0.clone();
        for (i, &v) in z.iter().enumerate() {
            let ei = self.inner.eps(a, level, o, &Condition::single(k, i, v))?;
            for ((x, e), b) in out.iter_mut().zip(&ei).zip(&e0) {
                *x += e - b;
            }
        }
        Ok(out)
    }

    fn score_jacobian(
        &self,
        a: &[f64],
        level: NoiseLevel,
        o: &Observation,
        c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        if !c.is_full() {
            return self.inner.score_jacobian(a, level, o, c);
        }
        compose_jacobians(c, |cc| self.inner.score_jacobian(a, level, o, cc))
    }

    fn eps_jacobian(
        &self,
        a: &[f64],
        level: NoiseLevel,
        o: &Observation,
        c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        if !c.is_full() {
            return self.inner.eps_jacobian(a, level, o, c);
        }
        compose_jacobians(c, |cc| self.inner.eps_jacobian(a, level, o, cc))
    }
}

fn compose_jacobians(
    c: &Condition,
    jac: impl Fn(&Condition) -> Option<Result<DMatrix<f64>>>,
) -> Option<Result<DMatrix<f64>>> {
    let k = c.k();
    let j0 = jac(&Condition::unconditional(k))?;
    Some((|| {
        let j0 = j0?;
        let mut out = j0.clone();
        for (i, v) in c.slots.iter().enumerate() {
            let ji = jac(&Condition::single(k, i, v.expect("full condition"))).ok_or(Error::NoAnalyticPosterior)??;
            out += ji - &j0;
        }
        Ok(out)
    })())
}

/// `s' = s + eps * u(a, level, c)` with a unit direction `u` drawn from a
/// hash of the inputs, so `|s - s'| = eps` exactly and repeated evaluations
/// agree bitwise. The analytic Jacobian, if any, is the inner field's.
pub struct PerturbedScore<'a> {
    pub inner: &'a dyn ScoreField,
    pub epsilon: f64,
    pub seed: u64,
}

pub fn perturb_field(field: &dyn ScoreField, epsilon: f64, seed: u64) -> Result<PerturbedScore<'_>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return invalid("epsilon must be finite and non-negative");
    }
    Ok(PerturbedScore {
        inner: field,
        epsilon,
        seed,
    })
}

impl PerturbedScore<'_> {
    pub fn direction(&self, a: &[f64], level: NoiseLevel, c: &Condition) -> Vec<f64> {
        let words = [self.seed, level.index as u64, level.alpha_bar.to_bits()]
            .into_iter()
            .chain(c.slots.iter().map(|s| s.map_or(u64::MAX, |v| v as u64)))
            .chain(a.iter().map(|x| x.to_bits()));
        let mut r = rng::stream(rng::hash_words(words), 0);
        loop {
            let u = rng::normal_vec(&mut r, a.len());
            let n = norm(&u);
            if n > 1e-12 {
                return u.iter().map(|x| x / n).collect();
            }
        }
    }
}

impl ScoreField for PerturbedScore<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn n_factors(&self) -> usize {
        self.inner.n_factors()
    }

    fn score(&self, a: &[f64], level: NoiseLevel, o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        let mut s = self.inner.score(a, level, o, c)?;
        if self.epsilon > 0.0 {
            let u = self.direction(a, level, c);
            for (x, d) in s.iter_mut().zip(u) {
                *x += self.epsilon * d;
            }
        }
        Ok(s)
    }

    fn score_jacobian(
        &self,
        a: &[f64],
        level: NoiseLevel,
        o: &Observation,
        c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        self.inner.score_jacobian(a, level, o, c)
    }
}

fn family_of(field: &dyn ScoreField) -> Result<&GaussianTaskFamily> {
    field.gaussian_family().ok_or(Error::NoAnalyticPosterior)
}

fn support_task(fam: &GaussianTaskFamily, z: &[usize]) -> Result<()> {
    let f = fam.space().flat_index(z)?;
    if fam.support.contains(&f) {
        Ok(())
    } else {
        Err(Error::Condition(format!("task {z:?} is outside the family support")))
    }
}

/// `g = log p(z | a) - sum_i log p(z_i | a)` by Bayes over the support.
pub fn interaction_log_ratio(field: &dyn ScoreField, z: &[usize], a: &[f64], level: NoiseLevel) -> Result<f64> {
    let fam = family_of(field)?;
    support_task(fam, z)?;
    let (alpha, v) = fam.variance(level)?;
    let joint = fam.log_posterior_mass(a, alpha, v, z, None);
    let marg: f64 = (0..z.len())
        .map(|i| fam.log_posterior_mass(a, alpha, v, z, Some(i)))
        .sum();
    Ok(joint - marg)
}

/// `grad g = s_joint - s_comp`.
pub fn interaction_gradient(field: &dyn ScoreField, z: &[usize], a: &[f64], level: NoiseLevel) -> Result<Vec<f64>> {
    let fam = family_of(field)?;
    support_task(fam, z)?;
    let o = Observation::default();
    let c = Condition::joint(z);
    Ok(sub(&fam.score(a, level, &o, &c)?, &compose(fam, a, level, &o, &c)?))
}

/// `Hess g = (alpha / v)^2 [(K - 1) Cov_all - sum_i Cov_i]`, where each
/// covariance is of the task means under the corresponding posterior.
pub fn interaction_hessian(field: &dyn ScoreField, z: &[usize], a: &[f64], level: NoiseLevel) -> Result<DMatrix<f64>> {
    let fam = family_of(field)?;
    support_task(fam, z)?;
    let k = z.len();
    let p_all = fam.posterior(a, level, &Condition::unconditional(k))?;
    let c = (p_all.alpha / p_all.v).powi(2);
    let mut h = fam.posterior_cov(&p_all) * (k as f64 - 1.0);
    for (i, &v) in z.iter().enumerate() {
        h -= fam.posterior_cov(&fam.posterior(a, level, &Condition::single(k, i, v))?);
    }
    Ok(h * c)
}

/// Grid estimates `(G, M)` = (max |g|, max spectral norm of Hess g) over `points`.
pub fn interaction_bounds(
    field: &dyn ScoreField,
    z: &[usize],
    level: NoiseLevel,
    points: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let mut g_max: f64 = 0.0;
    let mut m_max: f64 = 0.0;
    for p in points {
        g_max = g_max.max(interaction_log_ratio(field, z, p, level)?.abs());
        let h = interaction_hessian(field, z, p, level)?;
        let eig = h.symmetric_eigenvalues();
        m_max = m_max.max(eig.iter().fold(0.0, |m: f64, e| m.max(e.abs())));
    }
    Ok((g_max, m_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub samples_per_task: usize,
    pub seed: u64,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            samples_per_task: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            p95: percentile(xs, 0.95),
            max: xs.iter().cloned().fold(0.0, f64::max),
            count: xs.len(),
        }
    }
}

/// A state from the noised expert law: uniform training level, then
/// `a = alpha a0* + sigma xi`.
pub fn noised_expert_state(
    expert: &dyn ExpertMap,
    o: &Observation,
    task: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(NoiseLevel, Vec<f64>)> {
    let k = rng.random_range(0..schedule.train_steps);
    let level = schedule.level(k);
    let a0 = expert.reference(o, task)?;
    let xi = rng::normal_vec(rng, a0.len());
    let (al, s) = (level.alpha(), level.sigma());
    Ok((level, a0.iter().zip(&xi).map(|(m, e)| al * m + s * e).collect()))
}

/// Statistics of `|s_joint - s_comp|` over noised expert states of each task.
#[allow(clippy::too_many_arguments)]
pub fn decomposition_error(
    field: &dyn ScoreField,
    expert: &dyn ExpertMap,
    tasks: &[Vec<usize>],
    o: &Observation,
    schedule: &NoiseSchedule,
    plan: &SamplePlan,
    exec: Exec,
) -> Result<ErrorStats> {
    let per_task = exec.try_map_range(tasks.len(), |t| {
        let mut r = rng::stream(plan.seed, t as u64);
        let c = Condition::joint(&tasks[t]);
        (0..plan.samples_per_task)
            .map(|_| {
                let (lvl, a) = noised_expert_state(expert, o, &tasks[t], schedule, &mut r)?;
                let sj = field.score(&a, lvl, o, &c)?;
                let sc = compose(field, &a, lvl, o, &c)?;
                Ok(dist(&sj, &sc))
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(ErrorStats::from_samples(&per_task.concat()))
}

/// Max over value pairs and sampled noised expert states of
/// `|s(., z_i) - s(., z_i')| / dist_i(z_i, z_i')` with single-factor conditions.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_per_factor(
    field: &dyn ScoreField,
    space: &FactorSpace,
    i: usize,
    expert: &dyn ExpertMap,
    tasks: &[Vec<usize>],
    o: &Observation,
    schedule: &NoiseSchedule,
    plan: &SamplePlan,
    exec: Exec,
) -> Result<f64> {
    let n = space.cardinality(i);
    if n < 2 {
        return invalid(format!("factor {i} has a single value"));
    }
    let k = space.k();
    let per_task = exec.try_map_range(tasks.len(), |t| {
        let mut r = rng::stream(plan.seed, (i as u64) << 32 | t as u64);
        let mut best: f64 = 0.0;
        for _ in 0..plan.samples_per_task {
            let (lvl, a) = noised_expert_state(expert, o, &tasks[t], schedule, &mut r)?;
            let s: Vec<Vec<f64>> = (0..n)
                .map(|v| field.score(&a, lvl, o, &Condition::single(k, i, v)))
                .collect::<Result<_>>()?;
            for u in 0..n {
                for w in u + 1..n {
                    best = best.max(dist(&s[u], &s[w]) / space.distance(i, u, w));
                }
            }
        }
        Ok::<f64, Error>(best)
    })?;
    Ok(per_task.into_iter().fold(0.0, f64::max))
}
