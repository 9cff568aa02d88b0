//! A small eps-prediction MLP with per-factor embedding tables, learned null
//! rows and factor-dropout training.
//!
//! Input is `[c_in a; level encoding; sum_i emb_i(z_i)]` and hidden layers
//! use SiLU. The raw output `F` is read as a clean-action estimate
//! `x0 = sigma_data F`, and the noise prediction is the matching
//! `(a - alpha x0) / sigma`. Gradients are written out by hand for this
//! fixed architecture.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::sampler::ddim_sample;
use crate::schedule::{eps_to_score, DdimStepPlan, NoiseLevel, NoiseSchedule};
use crate::score::{compose, noised_expert_state, Condition, ExpertMap, Observation, ScoreField};
use crate::vecops::dist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
    pub level_dim: usize,
    pub cardinalities: Vec<usize>,
    pub train_steps: usize,
    /// Data scale: sets the input normalisation and the output scale.
    #[serde(default = "default_sigma_data")]
    pub sigma_data: f64,
}

fn default_sigma_data() -> f64 {
    0.5
}

impl Arch {
    pub fn new(action_dim: usize, cardinalities: Vec<usize>, train_steps: usize) -> Self {
        Self {
            action_dim,
            hidden: vec![256, 256],
            emb_dim: 32,
            level_dim: 16,
            cardinalities,
            train_steps,
            sigma_data: default_sigma_data(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.action_dim + self.level_dim + self.emb_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    /// One table per factor with `cardinality + 1` rows; the last row is null.
    pub embeddings: Vec<DMatrix<f64>>,
}

impl Params {
    fn zeros_like(&self) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            embeddings: self
                .embeddings
                .iter()
                .map(|e| DMatrix::zeros(e.nrows(), e.ncols()))
                .collect(),
        }
    }

    /// Flat parameter groups; the flag marks groups subject to weight decay.
    fn groups(&self) -> Vec<(&[f64], bool)> {
        let mut g: Vec<(&[f64], bool)> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            g.push((w.as_slice(), true));
            g.push((b.as_slice(), false));
        }
        g.extend(self.embeddings.iter().map(|e| (e.as_slice(), false)));
        g
    }

    fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut g: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            g.push(w.as_mut_slice());
            g.push(b.as_mut_slice());
        }
        g.extend(self.embeddings.iter_mut().map(|e| e.as_mut_slice()));
        g
    }

    pub fn count(&self) -> usize {
        self.groups().iter().map(|g| g.0.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups().iter().flat_map(|g| g.0.iter().copied()).collect()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return invalid(format!("{} values for {} parameters", flat.len(), self.count()));
        }
        let mut off = 0;
        for g in self.groups_mut() {
            g.copy_from_slice(&flat[off..off + g.len()]);
            off += g.len();
        }
        Ok(())
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDenoiser {
    pub arch: Arch,
    pub params: Params,
    /// `seen[i][v]`: value `v` of factor `i` appeared unmasked in training.
    /// Unseen values read the null row.
    pub seen: Vec<Vec<bool>>,
    /// Cosine ladder for `arch.train_steps`.
    alpha_bar: Vec<f64>,
}

struct Cache {
    /// Layer inputs: `acts[0]` is the network input.
    acts: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
}

impl TinyDenoiser {
    /// LeCun-normal weights, zero biases. All rows of an embedding table,
    /// the null row included, start from the same draw.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        if arch.action_dim == 0 || arch.hidden.is_empty() || arch.hidden.contains(&0) {
            return invalid("action_dim and hidden widths must be positive");
        }
        let alpha_bar = crate::schedule::build_cosine_schedule(arch.train_steps)?.alpha_bar;
        if !(arch.sigma_data > 0.0) {
            return invalid("sigma_data must be positive");
        }
        let mut r = rng::stream(seed, 0xDE);
        let mut dims = vec![arch.input_dim()];
        dims.extend(&arch.hidden);
        dims.push(arch.action_dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let s = 1.0 / (w[0] as f64).sqrt();
            let vals: Vec<f64> = rng::normal_vec(&mut r, w[0] * w[1]).iter().map(|x| x * s).collect();
            weights.push(DMatrix::from_vec(w[1], w[0], vals));
            biases.push(DVector::zeros(w[1]));
        }
        let embeddings = arch
            .cardinalities
            .iter()
            .map(|&c| {
                let row: Vec<f64> = rng::normal_vec(&mut r, arch.emb_dim).iter().map(|x| 0.5 * x).collect();
                DMatrix::from_fn(c + 1, arch.emb_dim, |_, j| row[j])
            })
            .collect();
        Ok(Self {
            params: Params {
                weights,
                biases,
                embeddings,
            },
            seen: arch.cardinalities.iter().map(|&c| vec![false; c]).collect(),
            alpha_bar,
            arch,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.arch.cardinalities.len()
    }

    fn level_encoding(&self, level: usize, out: &mut [f64]) {
        let half = self.arch.level_dim / 2;
        for j in 0..half {
            let w = 1000f64.powf(-(j as f64) / half as f64);
            out[2 * j] = (level as f64 * w).sin();
            out[2 * j + 1] = (level as f64 * w).cos();
        }
    }

    /// `(c_in, c_skip, c_out)` at a level: the raw network sees `c_in a`
    /// (unit variance under the noised data law) and the noise prediction
    /// is `c_skip a - c_out F`.
    fn precond(&self, level: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar[level];
        let (alpha, sigma, sd) = (ab.sqrt(), (1.0 - ab).sqrt(), self.arch.sigma_data);
        let d = (sigma * sigma + sd * sd * ab).sqrt();
        (1.0 / d, 1.0 / sigma, alpha * sd / sigma)
    }

    fn emb_row(&self, i: usize, slot: Option<usize>) -> usize {
        match slot {
            Some(v) if self.seen[i][v] => v,
            _ => self.arch.cardinalities[i],
        }
    }

    pub fn mark_seen(&mut self, c: &Condition) {
        for (i, s) in c.slots.iter().enumerate() {
            if let Some(v) = s {
                self.seen[i][*v] = true;
            }
        }
    }

    fn check_condition(&self, c: &Condition) -> Result<()> {
        if c.k() != self.n_factors() {
            return Err(Error::Condition(format!(
                "{} slots for {} factors",
                c.k(),
                self.n_factors()
            )));
        }
        for (i, s) in c.slots.iter().enumerate() {
            if let Some(v) = s {
                if *v >= self.arch.cardinalities[i] {
                    return Err(Error::Condition(format!("value {v} invalid for factor {i}")));
                }
            }
        }
        Ok(())
    }

    fn input(&self, a: &[&[f64]], levels: &[usize], conds: &[&Condition]) -> Result<DMatrix<f64>> {
        let (d, le) = (self.arch.action_dim, self.arch.level_dim);
        let mut x = DMatrix::zeros(self.arch.input_dim(), a.len());
        for (b, ((ab, &lv), c)) in a.iter().zip(levels).zip(conds).enumerate() {
            if ab.len() != d {
                return invalid(format!("action has {} entries, expected {d}", ab.len()));
            }
            self.check_condition(c)?;
            if lv >= self.arch.train_steps {
                return invalid(format!(
                    "level {lv} outside the {}-level schedule",
                    self.arch.train_steps
                ));
            }
            let c_in = self.precond(lv).0;
            let mut col = x.column_mut(b);
            let col = col.as_mut_slice();
            for (xi, ai) in col[..d].iter_mut().zip(ab.iter()) {
                *xi = c_in * ai;
            }
            self.level_encoding(lv, &mut col[d..d + le]);
            for (i, s) in c.slots.iter().enumerate() {
                let row = self.params.embeddings[i].row(self.emb_row(i, *s));
                for (j, v) in row.iter().enumerate() {
                    col[d + le + j] += v;
                }
            }
        }
        Ok(x)
    }

    fn forward_cached(&self, x: DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        let n_layers = self.params.weights.len();
        let mut acts = vec![x];
        let mut pre = Vec::with_capacity(n_layers - 1);
        for l in 0..n_layers {
            let mut z = &self.params.weights[l] * &acts[l];
            for mut col in z.column_iter_mut() {
                col += &self.params.biases[l];
            }
            if l + 1 == n_layers {
                return (z, Cache { acts, pre });
            }
            acts.push(z.map(silu));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    fn head(&self, a: &[&[f64]], levels: &[usize], mut f: DMatrix<f64>) -> DMatrix<f64> {
        for (b, (ab, &lv)) in a.iter().zip(levels).enumerate() {
            let (_, skip, out) = self.precond(lv);
            for (y, x) in f.column_mut(b).iter_mut().zip(ab.iter()) {
                *y = skip * x - out * *y;
            }
        }
        f
    }

    /// Batched noise prediction, one column per sample.
    pub fn forward(&self, a: &[&[f64]], levels: &[usize], conds: &[&Condition]) -> Result<DMatrix<f64>> {
        let f = self.forward_cached(self.input(a, levels, conds)?).0;
        Ok(self.head(a, levels, f))
    }

    pub fn eps(&self, a: &[f64], level: usize, c: &Condition) -> Result<Vec<f64>> {
        Ok(self.forward(&[a], &[level], &[c])?.as_slice().to_vec())
    }

    /// Exact `d eps / d a` as the layerwise product.
    pub fn input_jacobian(&self, a: &[f64], level: usize, c: &Condition) -> Result<DMatrix<f64>> {
        let (_, cache) = self.forward_cached(self.input(&[a], &[level], &[c])?);
        let d = self.arch.action_dim;
        let (c_in, skip, out) = self.precond(level);
        let mut j = self.params.weights[0].columns(0, d).into_owned();
        for (l, z) in cache.pre.iter().enumerate() {
            for (r, zr) in z.column(0).iter().enumerate() {
                let g = silu_grad(*zr);
                j.row_mut(r).scale_mut(g);
            }
            j = &self.params.weights[l + 1] * j;
        }
        j *= -out * c_in;
        for i in 0..d {
            j[(i, i)] += skip;
        }
        Ok(j)
    }

    /// `v^T d eps / d a` by reverse mode.
    pub fn vjp(&self, a: &[f64], level: usize, c: &Condition, v: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_cached(self.input(&[a], &[level], &[c])?);
        let (c_in, skip, out) = self.precond(level);
        let dy = DMatrix::from_column_slice(v.len(), 1, v) * -out;
        let (dx, _) = self.backward(&cache, dy, false);
        Ok(dx
            .column(0)
            .rows(0, self.arch.action_dim)
            .iter()
            .zip(v)
            .map(|(g, vi)| skip * vi + c_in * g)
            .collect())
    }

    /// Returns the input gradient and, when `params` is set, parameter
    /// gradients (embeddings left empty; the caller scatters them).
    fn backward(&self, cache: &Cache, dy: DMatrix<f64>, params: bool) -> (DMatrix<f64>, Option<Params>) {
        let n_layers = self.params.weights.len();
        let mut grads = params.then(|| self.params.zeros_like());
        let mut dz = dy;
        for l in (0..n_layers).rev() {
            if let Some(g) = grads.as_mut() {
                g.weights[l] = &dz * cache.acts[l].transpose();
                g.biases[l] = dz.column_sum();
            }
            let da = self.params.weights[l].transpose() * &dz;
            if l == 0 {
                return (da, grads);
            }
            dz = da.zip_map(&cache.pre[l - 1], |g, z| g * silu_grad(z));
        }
        unreachable!("network has at least one layer")
    }

    /// Mean squared eps error over batch and coordinates, with gradients.
    pub fn loss_and_grad(
        &self,
        a: &[&[f64]],
        levels: &[usize],
        conds: &[&Condition],
        target: &DMatrix<f64>,
        weighting: LossWeighting,
    ) -> Result<(f64, Params)> {
        let x = self.input(a, levels, conds)?;
        let (f, cache) = self.forward_cached(x);
        let y = self.head(a, levels, f);
        let n = (y.nrows() * y.ncols()) as f64;
        let mut diff = &y - target;
        let mut dy = DMatrix::zeros(diff.nrows(), diff.ncols());
        for (b, &lv) in levels.iter().enumerate() {
            let c_out = self.precond(lv).2;
            let w = match weighting {
                LossWeighting::Eps => 1.0,
                LossWeighting::CleanAction => 1.0 / (c_out * c_out),
            };
            dy.set_column(b, &(diff.column(b) * (-2.0 * w * c_out / n)));
            diff.column_mut(b).scale_mut(w.sqrt());
        }
        let loss = diff.norm_squared() / n;
        let (dx, grads) = self.backward(&cache, dy, true);
        let mut grads = grads.expect("parameter gradients requested");
        let off = self.arch.action_dim + self.arch.level_dim;
        for (b, c) in conds.iter().enumerate() {
            for (i, s) in c.slots.iter().enumerate() {
                let row = self.emb_row(i, *s);
                for j in 0..self.arch.emb_dim {
                    grads.embeddings[i][(row, j)] += dx[(off + j, b)];
                }
            }
        }
        Ok((loss, grads))
    }

    pub fn save(&self, path: &Path, header_extra: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "format": "facdiff-tiny-denoiser",
            "version": 1,
            "arch": self.arch,
            "seen": self.seen,
            "n_params": self.params.count(),
            "extra": header_extra,
        });
        let h = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(h.len() as u64).to_le_bytes())?;
        f.write_all(&h)?;
        for v in self.params.flatten() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint; returns the network and the header's `extra` field.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let mut h = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut h)?;
        let header: serde_json::Value = serde_json::from_slice(&h)?;
        let arch: Arch = serde_json::from_value(header["arch"].clone())?;
        let mut net = Self::new(arch, 0)?; // rebuilds the ladder; weights are overwritten below
        net.seen = serde_json::from_value(header["seen"].clone())?;
        if net.seen.len() != net.arch.cardinalities.len()
            || net.seen.iter().zip(&net.arch.cardinalities).any(|(s, &c)| s.len() != c)
        {
            return invalid("checkpoint seen table does not match the architecture");
        }
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        if buf.len() % 8 != 0 {
            return invalid("checkpoint payload is not a whole number of doubles");
        }
        let flat: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.params.load_flat(&flat)?;
        Ok((net, header["extra"].clone()))
    }
}

/// Per-sample weight of the squared noise-prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeighting {
    /// Plain `|eps_hat - eps|^2`.
    #[default]
    Eps,
    /// `sigma^2 / (alpha^2 sigma_data^2)` times the above, which is the
    /// clean-action error `|x0_hat - x0|^2 / sigma_data^2`: every level
    /// counts equally instead of the low-noise ones dominating.
    CleanAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub p_drop: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Cosine decay of the learning rate to zero over the run.
    #[serde(default)]
    pub cosine_decay: bool,
    #[serde(default)]
    pub weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 10,
            steps_per_epoch: 100,
            p_drop: 0.1,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            cosine_decay: false,
            weighting: LossWeighting::Eps,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Learning rate for the zero-based optimiser step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let total = self.total_steps().max(1) as f64;
        if self.cosine_decay {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * (t as f64 / total).min(1.0)).cos())
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_drop) {
            return invalid(format!("p_drop must be in [0, 1], got {}", self.p_drop));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return invalid("batch_size and lr must be positive");
        }
        Ok(())
    }
}

/// Decoupled weight decay Adam. Decay applies to weight matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(net: &TinyDenoiser) -> Self {
        let n = net.params.count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut TinyDenoiser, grads: &Params, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let lr = cfg.lr_at(self.t - 1);
        let decay: Vec<bool> = net.params.groups().iter().map(|g| g.1).collect();
        let mut off = 0;
        for ((p, (g, _)), dec) in net.params.groups_mut().into_iter().zip(grads.groups()).zip(decay) {
            for (j, (pj, gj)) in p.iter_mut().zip(g).enumerate() {
                let i = off + j;
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * gj;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * gj * gj;
                let upd = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + 1e-8);
                if dec {
                    *pj -= lr * cfg.weight_decay * *pj;
                }
                *pj -= lr * upd;
            }
            off += p.len();
        }
    }
}

/// Clean chunk with its task, one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Datum {
    pub a0: Vec<f64>,
    pub o: Observation,
    pub z: Vec<usize>,
}

/// One denoising-score-matching step: uniform level, Gaussian noise,
/// independent per-factor null substitution with probability `p_drop`.
pub fn dsm_step(
    net: &mut TinyDenoiser,
    opt: &mut AdamW,
    batch: &[Datum],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let d = net.arch.action_dim;
    let mut noisy = Vec::with_capacity(batch.len());
    let mut levels = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len());
    let mut target = DMatrix::zeros(d, batch.len());
    for (b, x) in batch.iter().enumerate() {
        let k = rng.random_range(0..schedule.train_steps);
        let lv = schedule.level(k);
        let e = rng::normal_vec(rng, d);
        noisy.push(
            x.a0.iter()
                .zip(&e)
                .map(|(m, n)| lv.alpha() * m + lv.sigma() * n)
                .collect::<Vec<f64>>(),
        );
        target.column_mut(b).copy_from_slice(&e);
        levels.push(k);
        conds.push(Condition {
            slots: x
                .z
                .iter()
                .map(|&v| (rng.random::<f64>() >= cfg.p_drop).then_some(v))
                .collect(),
        });
    }
    for c in &conds {
        net.mark_seen(c);
    }
    let refs: Vec<&[f64]> = noisy.iter().map(Vec::as_slice).collect();
    let crefs: Vec<&Condition> = conds.iter().collect();
    let (loss, grads) = net.loss_and_grad(&refs, &levels, &crefs, &target, cfg.weighting)?;
    opt.step(net, &grads, cfg);
    Ok(loss)
}

/// Trains on tasks drawn uniformly from `tasks`; returns the per-step losses.
/// Fails on the first non-finite loss.
pub fn train(
    net: &mut TinyDenoiser,
    expert: &dyn ExpertMap,
    tasks: &[Vec<usize>],
    o: &Observation,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return invalid("no training tasks");
    }
    let data: Vec<Datum> = tasks
        .iter()
        .map(|z| {
            Ok(Datum {
                a0: expert.reference(o, z)?,
                o: *o,
                z: z.clone(),
            })
        })
        .collect::<Result<_>>()?;
    train_on(net, &data, schedule, cfg)
}

/// Trains on examples drawn uniformly from `data`. An empty task vector in
/// a datum suits a network without factor slots.
pub fn train_on(
    net: &mut TinyDenoiser,
    data: &[Datum],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("no training data");
    }
    let mut r = rng::stream(cfg.seed, 0x7EA1);
    let mut opt = AdamW::new(net);
    let total = cfg.total_steps();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let batch: Vec<Datum> = (0..cfg.batch_size)
            .map(|_| data[r.random_range(0..data.len())].clone())
            .collect();
        let l = dsm_step(net, &mut opt, &batch, schedule, cfg, &mut r)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { step });
        }
        losses.push(l);
    }
    Ok(losses)
}

/// The network as a score field through the eps bridge.
pub struct LearnedField<'a> {
    pub net: &'a TinyDenoiser,
}

pub fn learned_field(net: &TinyDenoiser) -> LearnedField<'_> {
    LearnedField { net }
}

impl ScoreField for LearnedField<'_> {
    fn dim(&self) -> usize {
        self.net.arch.action_dim
    }

    fn n_factors(&self) -> usize {
        self.net.n_factors()
    }

    fn score(&self, a: &[f64], level: NoiseLevel, _o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        eps_to_score(&self.net.eps(a, level.index, c)?, level)
    }

    fn eps(&self, a: &[f64], level: NoiseLevel, _o: &Observation, c: &Condition) -> Result<Vec<f64>> {
        self.net.eps(a, level.index, c)
    }

    fn eps_jacobian(
        &self,
        a: &[f64],
        level: NoiseLevel,
        _o: &Observation,
        c: &Condition,
    ) -> Option<Result<DMatrix<f64>>> {
        Some(self.net.input_jacobian(a, level.index, c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaReport {
    pub eta_sup: f64,
    /// `(task, eps_s)` for every task in the sup set.
    pub per_combo: Vec<(Vec<usize>, f64)>,
}

/// Conditions probed for `eta`: each task's joint condition, every
/// single-factor condition whose value occurs in `tasks`, and the null one.
pub fn eta_conditions(tasks: &[Vec<usize>]) -> Vec<Condition> {
    let k = tasks.first().map_or(0, Vec::len);
    let mut out: Vec<Condition> = tasks.iter().map(|z| Condition::joint(z)).collect();
    for i in 0..k {
        let mut vals: Vec<usize> = tasks.iter().map(|z| z[i]).collect();
        vals.sort_unstable();
        vals.dedup();
        out.extend(vals.into_iter().map(|v| Condition::single(k, i, v)));
    }
    out.push(Condition::unconditional(k));
    out
}

/// Sup-norm score gap between `learned` and the closed-form `truth` over
/// noised expert states and the states of each task's nominal DDIM path
/// under `truth`, for every condition in [`eta_conditions`]. `eps_s(z)` is
/// the joint-condition gap along task `z`'s nominal path, a subset of the
/// states and conditions behind `eta_sup`.
#[allow(clippy::too_many_arguments)]
pub fn measure_eta(
    learned: &dyn ScoreField,
    truth: &dyn ScoreField,
    expert: &dyn ExpertMap,
    tasks: &[Vec<usize>],
    o: &Observation,
    schedule: &NoiseSchedule,
    plan: &DdimStepPlan,
    samples_per_task: usize,
    seed: u64,
    exec: Exec,
) -> Result<EtaReport> {
    let conds = eta_conditions(tasks);
    let gap = |a: &[f64], lv: NoiseLevel, c: &Condition| -> Result<f64> {
        Ok(dist(&learned.score(a, lv, o, c)?, &truth.score(a, lv, o, c)?))
    };
    let per_task = exec.try_map_range(tasks.len(), |t| {
        let z = &tasks[t];
        let nominal = ddim_sample(truth, plan, o, &Condition::joint(z), seed, t as u64)?;
        let mut states: Vec<(NoiseLevel, Vec<f64>)> = (0..plan.n_steps)
            .map(|k| (plan.level(k), nominal.states[k].clone()))
            .collect();
        let mut eps_s: f64 = 0.0;
        for (lv, a) in &states {
            eps_s = eps_s.max(gap(a, *lv, &Condition::joint(z))?);
        }
        let mut r = rng::stream(seed ^ 0xE7A, t as u64);
        for _ in 0..samples_per_task {
            states.push(noised_expert_state(expert, o, z, schedule, &mut r)?);
        }
        let mut sup: f64 = 0.0;
        for (lv, a) in &states {
            for c in &conds {
                sup = sup.max(gap(a, *lv, c)?);
            }
        }
        Ok::<(f64, f64), Error>((sup, eps_s))
    })?;
    Ok(EtaReport {
        eta_sup: per_task.iter().map(|p| p.0).fold(0.0, f64::max),
        per_combo: tasks.iter().cloned().zip(per_task.iter().map(|p| p.1)).collect(),
    })
}

/// `|s_learned^comp - s_truth^comp|` at a point.
pub fn composed_gap(
    learned: &dyn ScoreField,
    truth: &dyn ScoreField,
    a: &[f64],
    level: NoiseLevel,
    o: &Observation,
    z: &[usize],
) -> Result<f64> {
    let c = Condition::joint(z);
    Ok(dist(
        &compose(learned, a, level, o, &c)?,
        &compose(truth, a, level, o, &c)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_cosine_schedule, plan_ddim};
    use crate::score::{FactorSpace, GaussianTaskFamily, TableExpert};
    use crate::sensitivity::fd_jacobian;

    fn small_arch() -> Arch {
        Arch {
            action_dim: 3,
            hidden: vec![5, 4],
            emb_dim: 2,
            level_dim: 4,
            cardinalities: vec![2, 3],
            train_steps: 10,
            sigma_data: 0.5,
        }
    }

    fn perturb_embeddings(net: &mut TinyDenoiser, seed: u64) {
        for s in &mut net.seen {
            s.fill(true);
        }
        let mut r = rng::stream(seed, 1);
        for e in &mut net.params.embeddings {
            for x in e.iter_mut() {
                *x += 0.3 * rng::normal_vec(&mut r, 1)[0];
            }
        }
    }

    #[test]
    fn backprop_matches_central_differences() {
        for seed in 0..3 {
            let mut net = TinyDenoiser::new(small_arch(), seed).unwrap();
            perturb_embeddings(&mut net, seed);
            let mut r = rng::stream(seed, 2);
            let a: Vec<Vec<f64>> = (0..4).map(|_| rng::normal_vec(&mut r, 3)).collect();
            let refs: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
            let conds = [
                Condition::joint(&[1, 2]),
                Condition::single(2, 0, 0),
                Condition::unconditional(2),
                Condition::single(2, 1, 1),
            ];
            let crefs: Vec<&Condition> = conds.iter().collect();
            let levels = [0, 3, 7, 9];
            let target = DMatrix::from_vec(3, 4, rng::normal_vec(&mut r, 12));
            let w = if seed == 1 {
                LossWeighting::CleanAction
            } else {
                LossWeighting::Eps
            };
            let (_, g) = net.loss_and_grad(&refs, &levels, &crefs, &target, w).unwrap();
            let flat_g = g.flatten();
            let theta = net.params.flatten();
            let h = 1e-5;
            for i in 0..theta.len() {
                let mut p = net.clone();
                let mut t = theta.clone();
                t[i] += h;
                p.params.load_flat(&t).unwrap();
                let lp = p.loss_and_grad(&refs, &levels, &crefs, &target, w).unwrap().0;
                t[i] -= 2.0 * h;
                p.params.load_flat(&t).unwrap();
                let lm = p.loss_and_grad(&refs, &levels, &crefs, &target, w).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(flat_g[i].abs()).max(1e-6);
                assert!((fd - flat_g[i]).abs() <= tol, "param {i}: fd {fd} vs bp {}", flat_g[i]);
            }
        }
    }

    #[test]
    fn input_jacobian_and_vjp_agree_with_finite_differences() {
        let mut arch = small_arch();
        arch.action_dim = 6;
        let mut net = TinyDenoiser::new(arch, 4).unwrap();
        perturb_embeddings(&mut net, 4);
        let c = Condition::single(2, 1, 2);
        let a = rng::normal_vec(&mut rng::stream(1, 1), 6);
        let j = net.input_jacobian(&a, 5, &c).unwrap();
        let fd = fd_jacobian(|x| net.eps(x, 5, &c), &a, 1e-4).unwrap();
        let mut r = rng::stream(3, 3);
        for _ in 0..10 {
            let v = DVector::from_vec(rng::normal_vec(&mut r, 6));
            let (jv, fv) = (&j * &v, &fd * &v);
            assert!((&jv - &fv).norm() <= 1e-4 * jv.norm());
            let u = rng::normal_vec(&mut r, 6);
            let bt = net.vjp(&a, 5, &c, &u).unwrap();
            let want = j.transpose() * DVector::from_column_slice(&u);
            for (x, y) in bt.iter().zip(want.iter()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    fn single_task_expert() -> TableExpert {
        let space = FactorSpace::with_cardinalities(&[2, 2]).unwrap();
        TableExpert::from_fn(space, |z| vec![0.5, -0.2 + z[0] as f64, 0.3 * z[1] as f64, 0.1]).unwrap()
    }

    #[test]
    fn overfits_a_single_datum() {
        let e = single_task_expert();
        let sched = build_cosine_schedule(10).unwrap();
        let mut arch = Arch::new(4, vec![2, 2], 10);
        arch.hidden = vec![32, 32];
        let mut net = TinyDenoiser::new(arch, 0).unwrap();
        let mut opt = AdamW::new(&net);
        let cfg = TrainConfig {
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let datum = Datum {
            a0: e.table[0].clone(),
            o: Observation::default(),
            z: vec![0, 0],
        };
        // fixed batch noise so the loss is a deterministic function of theta
        let mut losses = Vec::new();
        for _ in 0..500 {
            let mut r = rng::stream(42, 0);
            losses.push(dsm_step(&mut net, &mut opt, &vec![datum.clone(); 8], &sched, &cfg, &mut r).unwrap());
        }
        assert!(losses[499] * 10.0 <= losses[0], "{} -> {}", losses[0], losses[499]);
        assert!(dsm_step(&mut net, &mut opt, &[], &sched, &cfg, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn saturated_dropout_leaves_factor_rows_at_null() {
        let e = single_task_expert();
        let sched = build_cosine_schedule(10).unwrap();
        let mut arch = Arch::new(4, vec![2, 2], 10);
        arch.hidden = vec![16];
        let mut net = TinyDenoiser::new(arch, 1).unwrap();
        let cfg = TrainConfig {
            p_drop: 1.0,
            epochs: 1,
            steps_per_epoch: 50,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        train(
            &mut net,
            &e,
            &e.space.all_tasks(),
            &Observation::default(),
            &sched,
            &cfg,
        )
        .unwrap();
        let a = [0.1, 0.2, 0.3, 0.4];
        let u = net.eps(&a, 3, &Condition::unconditional(2)).unwrap();
        assert_eq!(net.eps(&a, 3, &Condition::joint(&[1, 0])).unwrap(), u);
        assert_eq!(net.eps(&a, 3, &Condition::single(2, 1, 1)).unwrap(), u);
    }

    #[test]
    fn zero_dropout_never_touches_null_rows() {
        let e = single_task_expert();
        let sched = build_cosine_schedule(10).unwrap();
        let mut arch = Arch::new(4, vec![2, 2], 10);
        arch.hidden = vec![16];
        let mut net = TinyDenoiser::new(arch, 1).unwrap();
        let before: Vec<Vec<f64>> = net
            .params
            .embeddings
            .iter()
            .map(|t| t.row(t.nrows() - 1).iter().copied().collect())
            .collect();
        let cfg = TrainConfig {
            p_drop: 0.0,
            epochs: 1,
            steps_per_epoch: 20,
            ..TrainConfig::default()
        };
        train(
            &mut net,
            &e,
            &e.space.all_tasks(),
            &Observation::default(),
            &sched,
            &cfg,
        )
        .unwrap();
        for (t, b) in net.params.embeddings.iter().zip(before) {
            assert_eq!(t.row(t.nrows() - 1).iter().copied().collect::<Vec<_>>(), b);
        }
        assert!(TrainConfig {
            p_drop: 1.5,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn training_is_reproducible_and_fresh_nets_are_finite() {
        let e = single_task_expert();
        let sched = build_cosine_schedule(10).unwrap();
        let mut arch = Arch::new(4, vec![2, 2], 10);
        arch.hidden = vec![8];
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 10,
            ..TrainConfig::default()
        };
        let run = || {
            let mut n = TinyDenoiser::new(arch.clone(), 5).unwrap();
            let l = train(&mut n, &e, &e.space.all_tasks(), &Observation::default(), &sched, &cfg).unwrap();
            (n, l)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
        let f = learned_field(&a);
        for k in 0..10 {
            for x in [-3.0, 0.0, 3.0] {
                let s = f
                    .score(
                        &[x; 4],
                        sched.level(k),
                        &Observation::default(),
                        &Condition::unconditional(2),
                    )
                    .unwrap();
                assert!(s.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = TinyDenoiser::new(small_arch(), 9).unwrap();
        let dir = std::env::temp_dir().join(format!("facdiff-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("net.bin");
        net.save(&p, serde_json::json!({"seed": 9})).unwrap();
        let (back, extra) = TinyDenoiser::load(&p).unwrap();
        assert_eq!(back, net);
        assert_eq!(extra["seed"], 9);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn eta_is_zero_for_the_true_field_and_bounds_per_combo() {
        let e = single_task_expert();
        let sched = build_cosine_schedule(20).unwrap();
        let plan = plan_ddim(&sched, 10).unwrap();
        let tasks = vec![vec![0, 0], vec![0, 1], vec![1, 0]];
        let fam = GaussianTaskFamily::new(e.clone(), &tasks, 0.1).unwrap();
        let o = Observation::default();
        let r = measure_eta(&fam, &fam, &e, &tasks, &o, &sched, &plan, 8, 0, Exec::Sequential).unwrap();
        assert_eq!(r.eta_sup, 0.0);
        let net = TinyDenoiser::new(Arch::new(4, vec![2, 2], 20), 0).unwrap();
        let lf = learned_field(&net);
        let r = measure_eta(&lf, &fam, &e, &tasks, &o, &sched, &plan, 8, 0, Exec::Sequential).unwrap();
        assert!(r.eta_sup > 0.0);
        assert!(r.per_combo.iter().all(|(_, v)| *v <= r.eta_sup));
        assert_eq!(eta_conditions(&tasks).len(), 3 + 2 + 2 + 1);
    }
}
