//! Variational nearest-neighbor Gaussian process over the spatio-temporal
//! residual field.
//!
//! The prior factorizes in a fixed point ordering (time-major), with each
//! point conditioning on at most `m` earlier points chosen by kernel
//! correlation. The variational family is a fully factorized Gaussian over
//! inducing values placed at the training points, which makes every ELBO
//! term computable from one m x m Cholesky, so a minibatch gives an unbiased
//! O(m^3)-per-point estimate of the full ELBO.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in km between two (lat, lon) pairs in degrees.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().atan2((1.0 - a).sqrt())
}

fn m32(d: f64, ell: f64) -> f64 {
    let s = 3.0_f64.sqrt() * d / ell;
    (1.0 + s) * (-s).exp()
}

fn m52(d: f64, ell: f64) -> f64 {
    let s = 5.0_f64.sqrt() * d / ell;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Matern(nu = 3/2) correlation.
pub fn matern32(d: f64, lengthscale: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::Domain(format!("negative distance {d}")));
    }
    if lengthscale <= 0.0 {
        return Err(Error::Domain(format!("non-positive lengthscale {lengthscale}")));
    }
    Ok(m32(d, lengthscale))
}

/// Matern(nu = 5/2) correlation.
pub fn matern52(d: f64, lengthscale: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::Domain(format!("negative distance {d}")));
    }
    if lengthscale <= 0.0 {
        return Err(Error::Domain(format!("non-positive lengthscale {lengthscale}")));
    }
    Ok(m52(d, lengthscale))
}

/// Separable kernel hyperparameters. The bracketed tuning ranges
/// (spatial 50-800 km, temporal 2-24 steps, nugget 1e-6..1e-2) are enforced
/// by the hyperparameter search, not here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub spatial_lengthscale_km: f64,
    pub temporal_lengthscale: f64,
    pub nugget: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            signal_variance: 1.0,
            spatial_lengthscale_km: 200.0,
            temporal_lengthscale: 6.0,
            nugget: 1e-4,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("signal_variance", self.signal_variance),
            ("spatial_lengthscale_km", self.spatial_lengthscale_km),
            ("temporal_lengthscale", self.temporal_lengthscale),
            ("nugget", self.nugget),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("kernel {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn from_logs(logs: &[f64; 4]) -> Self {
        Self {
            signal_variance: logs[0].exp(),
            spatial_lengthscale_km: logs[1].exp(),
            temporal_lengthscale: logs[2].exp(),
            nugget: logs[3].exp(),
        }
    }

    fn to_logs(self) -> [f64; 4] {
        [
            self.signal_variance.ln(),
            self.spatial_lengthscale_km.ln(),
            self.temporal_lengthscale.ln(),
            self.nugget.ln(),
        ]
    }
}

/// One spatio-temporal coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StPoint {
    pub latitude: f64,
    pub longitude: f64,
    pub time: f64,
}

impl StPoint {
    fn same_coords(&self, other: &StPoint) -> bool {
        self.latitude == other.latitude
            && self.longitude == other.longitude
            && self.time == other.time
    }
}

/// Separable covariance: spatial Matern-3/2 x temporal Matern-5/2, plus a
/// nugget on coincident coordinates.
pub fn st_kernel(p1: &StPoint, p2: &StPoint, params: &KernelParams) -> f64 {
    let d_sp = haversine_km(p1.latitude, p1.longitude, p2.latitude, p2.longitude);
    let d_tm = (p1.time - p2.time).abs();
    let corr = m32(d_sp, params.spatial_lengthscale_km) * m52(d_tm, params.temporal_lengthscale);
    let nug = if p1.same_coords(p2) { params.nugget } else { 0.0 };
    params.signal_variance * corr + nug
}

/// Kernel correlation without signal variance or nugget; used to rank
/// neighbor candidates.
fn st_correlation(p1: &StPoint, p2: &StPoint, params: &KernelParams) -> f64 {
    let d_sp = haversine_km(p1.latitude, p1.longitude, p2.latitude, p2.longitude);
    let d_tm = (p1.time - p2.time).abs();
    m32(d_sp, params.spatial_lengthscale_km) * m52(d_tm, params.temporal_lengthscale)
}

/// One training residual with its provenance keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub location_id: i64,
    pub event_code: i64,
    pub time_index: i64,
    pub point: StPoint,
    pub value: f64,
}

/// Residual observations sorted lexicographically by
/// (time, location id, event code), the ordering the neighbor graph uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualField {
    entries: Vec<ResidualEntry>,
}

impl ResidualField {
    pub fn new(mut entries: Vec<ResidualEntry>) -> Self {
        entries.sort_by(|a, b| {
            (a.time_index, a.location_id, a.event_code)
                .cmp(&(b.time_index, b.location_id, b.event_code))
        });
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ResidualEntry] {
        &self.entries
    }

    pub fn point(&self, i: usize) -> &StPoint {
        &self.entries[i].point
    }

    pub fn value(&self, i: usize) -> f64 {
        self.entries[i].value
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    /// Deterministic subsample down to `budget` points (keeps ordering).
    pub fn subsample(&self, budget: usize, seed: u64) -> ResidualField {
        if budget == 0 || self.entries.len() <= budget {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        // partial Fisher-Yates
        for i in 0..budget {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut keep: Vec<usize> = idx[..budget].to_vec();
        keep.sort_unstable();
        ResidualField { entries: keep.into_iter().map(|i| self.entries[i].clone()).collect() }
    }
}

/// In-place Cholesky; returns false if the matrix is not positive definite.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L L^T x = b` given the lower factor.
fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Jitter ladder: 1e-8 escalating tenfold to 1e-4.
const JITTERS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Conditional factor of one point on its neighbor set:
/// `u_j | u_N ~ N(b^T u_N, f)`.
#[derive(Debug, Clone)]
struct Factor {
    b: Vec<f64>,
    f: f64,
}

/// Computes the conditional factor for `target` given `neighbors`, escalating
/// diagonal jitter until the neighbor covariance factorizes.
fn conditional_factor(
    target: &StPoint,
    neighbors: &[&StPoint],
    kernel: &KernelParams,
) -> Result<Factor> {
    let m = neighbors.len();
    let k_self = st_kernel(target, target, kernel);
    if m == 0 {
        return Ok(Factor { b: Vec::new(), f: k_self + JITTERS[0] });
    }
    let mut cross = vec![0.0; m];
    for (i, p) in neighbors.iter().enumerate() {
        cross[i] = st_kernel(target, p, kernel);
    }
    let mut base = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let v = st_kernel(neighbors[i], neighbors[j], kernel);
            base[i * m + j] = v;
            base[j * m + i] = v;
        }
    }
    for &jitter in &JITTERS {
        let mut mat = base.clone();
        for i in 0..m {
            mat[i * m + i] += jitter;
        }
        if cholesky_in_place(&mut mat, m) {
            let b = chol_solve(&mat, m, &cross);
            let explained: f64 = cross.iter().zip(&b).map(|(c, w)| c * w).sum();
            // jitter applies to the full bordered diagonal, self term included
            let f = (k_self + jitter - explained).max(1e-12);
            return Ok(Factor { b, f });
        }
    }
    Err(Error::Numeric(format!(
        "neighbor covariance not positive definite after jitter escalation (m = {m})"
    )))
}

/// Ordered neighbor sets: point `j` conditions on the `m` predecessors with
/// the highest kernel correlation (ties broken toward the lower index).
pub fn build_neighbor_graph(
    field: &ResidualField,
    m: usize,
    kernel: &KernelParams,
) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::Domain("neighbor count m must be >= 1".into()));
    }
    kernel.validate()?;
    let n = field.len();
    let mut sets = Vec::with_capacity(n);
    // top-m candidates as (corr, idx), kept sorted by (corr desc, idx asc)
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(m + 1);
    for j in 0..n {
        top.clear();
        let pj = field.point(j);
        for i in (0..j).rev() {
            let pi = field.point(i);
            // points are time-sorted, so the temporal factor alone bounds
            // every remaining candidate's correlation
            let bound = m52((pj.time - pi.time).abs(), kernel.temporal_lengthscale);
            if top.len() == m && bound < top[m - 1].0 {
                break;
            }
            let corr = st_correlation(pj, pi, kernel);
            let pos = top
                .binary_search_by(|&(c, idx)| {
                    c.partial_cmp(&corr)
                        .unwrap()
                        .reverse()
                        .then(idx.cmp(&i))
                })
                .unwrap_or_else(|e| e);
            top.insert(pos, (corr, i));
            if top.len() > m {
                top.pop();
            }
        }
        let mut set: Vec<usize> = top.iter().map(|&(_, i)| i).collect();
        set.sort_unstable();
        sets.push(set);
    }
    Ok(sets)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VnngpFitConfig {
    pub m: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optimize kernel hyperparameters in log space jointly with the
    /// variational parameters (the default); otherwise they stay frozen at
    /// their initial values.
    pub optimize_kernel: bool,
    /// Full-data ELBO evaluation cadence for the trace (0 = only start/end).
    pub eval_every: usize,
    /// Subsample the field to this many inducing points (0 = keep all).
    pub max_inducing: usize,
    /// Initial observation-noise variance; defaults to half the residual
    /// variance when unset.
    pub noise_init: Option<f64>,
}

impl Default for VnngpFitConfig {
    fn default() -> Self {
        Self {
            m: 15,
            steps: 1000,
            learning_rate: 0.05,
            batch_size: 64,
            seed: 11,
            optimize_kernel: true,
            eval_every: 100,
            max_inducing: 0,
            noise_init: None,
        }
    }
}

/// Fitted (or in-training) model state. Inducing points sit at the training
/// points; the variational distribution is mean-field Gaussian.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VnngpModel {
    pub kernel: KernelParams,
    pub m: usize,
    field: ResidualField,
    neighbors: Vec<Vec<usize>>,
    var_mean: Vec<f64>,
    var_log_var: Vec<f64>,
    log_noise: f64,
    fitted: bool,
}

impl VnngpModel {
    /// Unfitted model with the prior-centered initialization.
    pub fn init(
        field: ResidualField,
        kernel: KernelParams,
        m: usize,
        noise_init: Option<f64>,
    ) -> Result<Self> {
        if field.is_empty() {
            return Err(Error::Config("empty residual field".into()));
        }
        kernel.validate()?;
        let neighbors = build_neighbor_graph(&field, m, &kernel)?;
        let n = field.len();
        let values = field.values();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let noise0 = noise_init.unwrap_or((0.5 * var).max(1e-4));
        Ok(Self {
            m,
            field,
            neighbors,
            var_mean: vec![0.0; n],
            var_log_var: vec![(0.5 * kernel.signal_variance).max(1e-6).ln(); n],
            log_noise: noise0.ln(),
            kernel,
            fitted: false,
        })
    }

    pub fn len(&self) -> usize {
        self.field.len()
    }

    pub fn is_empty(&self) -> bool {
        self.field.is_empty()
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn variational_mean(&self, i: usize) -> f64 {
        self.var_mean[i]
    }

    pub fn variational_variance(&self, i: usize) -> f64 {
        self.var_log_var[i].exp()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn inducing_point(&self, i: usize) -> &StPoint {
        self.field.point(i)
    }

    #[cfg(test)]
    pub(crate) fn set_variational(&mut self, means: &[f64], vars: &[f64]) {
        self.var_mean.copy_from_slice(means);
        for (slot, v) in self.var_log_var.iter_mut().zip(vars) {
            *slot = v.ln();
        }
        self.fitted = true;
    }

    fn factor(&self, j: usize, kernel: &KernelParams) -> Result<Factor> {
        let nbrs: Vec<&StPoint> = self.neighbors[j].iter().map(|&i| self.field.point(i)).collect();
        conditional_factor(self.field.point(j), &nbrs, kernel)
    }

    /// KL(q(u_j) || p(u_j | u_N(j))) in expectation over q of the neighbors.
    fn kl_term_with(&self, j: usize, factor: &Factor) -> f64 {
        let v_j = self.var_log_var[j].exp();
        let mut pred = 0.0;
        let mut prop = 0.0;
        for (k, &i) in self.neighbors[j].iter().enumerate() {
            pred += factor.b[k] * self.var_mean[i];
            prop += factor.b[k] * factor.b[k] * self.var_log_var[i].exp();
        }
        let delta = self.var_mean[j] - pred;
        0.5 * ((factor.f / v_j).ln() - 1.0 + (v_j + delta * delta + prop) / factor.f)
    }

    pub fn kl_term(&self, j: usize) -> Result<f64> {
        let factor = self.factor(j, &self.kernel)?;
        Ok(self.kl_term_with(j, &factor))
    }

    /// Expected log-likelihood of residual `i` under q (the latent at a
    /// training point is its own inducing value).
    fn data_term(&self, i: usize) -> f64 {
        let noise = self.log_noise.exp();
        let r = self.field.value(i);
        let m_i = self.var_mean[i];
        let v_i = self.var_log_var[i].exp();
        -0.5 * (2.0 * std::f64::consts::PI * noise).ln()
            - ((r - m_i) * (r - m_i) + v_i) / (2.0 * noise)
    }

    /// Unbiased minibatch ELBO estimate: both the data and KL sums are
    /// subsampled over `batch` and rescaled by `n / |batch|`.
    pub fn elbo_minibatch(&self, batch: &[usize]) -> Result<f64> {
        self.elbo_minibatch_with(batch, &self.kernel)
    }

    fn elbo_minibatch_with(&self, batch: &[usize], kernel: &KernelParams) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("empty minibatch".into()));
        }
        let scale = self.len() as f64 / batch.len() as f64;
        let mut total = 0.0;
        for &i in batch {
            let factor = self.factor(i, kernel)?;
            total += self.data_term(i) - self.kl_term_with(i, &factor);
        }
        Ok(scale * total)
    }

    /// Draws a batch of the given size with the seed and evaluates
    /// [`Self::elbo_minibatch`] on it.
    pub fn elbo_minibatch_seeded(&self, batch_size: usize, seed: u64) -> Result<f64> {
        if batch_size == 0 {
            return Err(Error::Domain("empty minibatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<usize> =
            (0..batch_size.min(self.len())).map(|_| rng.random_range(0..self.len())).collect();
        self.elbo_minibatch(&batch)
    }

    /// Exact full-data ELBO.
    pub fn elbo_full(&self) -> Result<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.elbo_minibatch(&all)
    }

    /// Posterior predictive mean and variance at an arbitrary point,
    /// conditioning on the `m` nearest inducing points of the query.
    pub fn predict_residual(&self, point: &StPoint) -> Result<(f64, f64)> {
        if !self.fitted {
            return Err(Error::State("predict_residual on an unfitted model".into()));
        }
        let nbrs = self.query_neighbors(point);
        let m = nbrs.len();
        let k_star_star = st_kernel(point, point, &self.kernel);
        if m == 0 {
            return Ok((0.0, k_star_star));
        }
        let pts: Vec<&StPoint> = nbrs.iter().map(|&i| self.field.point(i)).collect();
        let factor = conditional_factor(point, &pts, &self.kernel)?;
        let mut mean = 0.0;
        let mut extra = 0.0;
        for (k, &i) in nbrs.iter().enumerate() {
            mean += factor.b[k] * self.var_mean[i];
            extra += factor.b[k] * factor.b[k] * self.var_log_var[i].exp();
        }
        // factor.f is k** - k*^T K^-1 k* (plus jitter); adding the propagated
        // variational variance gives the predictive variance
        let variance = (factor.f + extra).max(0.0);
        Ok((mean, variance))
    }

    /// Nearest inducing points of a query by kernel correlation, found by an
    /// outward scan from the query time with the temporal bound as cutoff.
    fn query_neighbors(&self, point: &StPoint) -> Vec<usize> {
        let n = self.len();
        let m = self.m.min(n);
        let split = self.field.entries().partition_point(|e| e.point.time < point.time);
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(m + 1);
        let mut left = split as i64 - 1;
        let mut right = split;
        loop {
            let dt_left = if left >= 0 {
                (point.time - self.field.point(left as usize).time).abs()
            } else {
                f64::INFINITY
            };
            let dt_right = if right < n {
                (self.field.point(right).time - point.time).abs()
            } else {
                f64::INFINITY
            };
            if dt_left.is_infinite() && dt_right.is_infinite() {
                break;
            }
            let (idx, dt, from_left) =
                if dt_left <= dt_right { (left as usize, dt_left, true) } else { (right, dt_right, false) };
            let bound = m52(dt, self.kernel.temporal_lengthscale);
            if top.len() == m && bound < top[m - 1].0 {
                // no remaining candidate on this side can enter the top-m
                if from_left {
                    left = -1;
                } else {
                    right = n;
                }
                continue;
            }
            let corr = st_correlation(point, self.field.point(idx), &self.kernel);
            let pos = top
                .binary_search_by(|&(c, i)| {
                    c.partial_cmp(&corr).unwrap().reverse().then(i.cmp(&idx))
                })
                .unwrap_or_else(|e| e);
            top.insert(pos, (corr, idx));
            if top.len() > m {
                top.pop();
            }
            if from_left {
                left -= 1;
            } else {
                right += 1;
            }
        }
        let mut set: Vec<usize> = top.into_iter().map(|(_, i)| i).collect();
        set.sort_unstable();
        set
    }

    /// Plain-text hyperparameter summary for reports.
    pub fn hyperparams_dump(&self) -> String {
        let noise = self.noise_variance();
        let lambda = shrinkage_factor(self.kernel.signal_variance, noise).unwrap_or(f64::NAN);
        format!(
            "signal_variance = {}\nspatial_lengthscale_km = {}\ntemporal_lengthscale = {}\nnugget = {}\nnoise_variance = {}\nshrinkage_factor = {}\ninducing_points = {}\nm = {}\n",
            self.kernel.signal_variance,
            self.kernel.spatial_lengthscale_km,
            self.kernel.temporal_lengthscale,
            self.kernel.nugget,
            noise,
            lambda,
            self.len(),
            self.m
        )
    }
}

/// GP shrinkage factor `sigma_k^2 / (sigma_k^2 + sigma^2)`; the posterior-mean
/// contraction ratio reported as an empirical diagnostic.
pub fn shrinkage_factor(signal_variance: f64, noise_variance: f64) -> Result<f64> {
    if !(signal_variance > 0.0) || !(noise_variance > 0.0) {
        return Err(Error::Domain(format!(
            "shrinkage factor needs positive variances, got ({signal_variance}, {noise_variance})"
        )));
    }
    Ok(signal_variance / (signal_variance + noise_variance))
}

/// Stochastic gradient ascent on the minibatch ELBO. Variational parameters
/// and the noise use analytic gradients; kernel hyperparameters, when
/// optimized, use central differences in log space on the same minibatch.
pub fn fit_vnngp(
    field: &ResidualField,
    init: KernelParams,
    config: &VnngpFitConfig,
) -> Result<(VnngpModel, Vec<f64>)> {
    if field.is_empty() {
        return Err(Error::Config("empty residual field".into()));
    }
    let field = if config.max_inducing > 0 {
        field.subsample(config.max_inducing, config.seed ^ 0x5eed)
    } else {
        field.clone()
    };
    let mut model = VnngpModel::init(field, init, config.m, config.noise_init)?;
    let mut trace = Vec::new();
    trace.push(model.elbo_full()?);

    let n = model.len();
    let batch_size = config.batch_size.max(1).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // flat parameter vector: [var_mean | var_log_var | log_noise | kernel logs]
    let n_kernel = if config.optimize_kernel { 4 } else { 0 };
    let dim = 2 * n + 1 + n_kernel;
    let mut adam = crate::autodiff::AdamState::new(dim);
    let adam_cfg = crate::autodiff::AdamConfig::with_lr(config.learning_rate);

    for step in 0..config.steps {
        let batch: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        let scale = n as f64 / batch.len() as f64;
        let noise = model.log_noise.exp();

        let mut grad = vec![0.0; dim];
        let mut elbo_batch = 0.0;
        for &i in &batch {
            let factor = model.factor(i, &model.kernel)?;
            // data term
            let r = model.field.value(i);
            let m_i = model.var_mean[i];
            let v_i = model.var_log_var[i].exp();
            elbo_batch += model.data_term(i);
            grad[i] += scale * (r - m_i) / noise;
            grad[n + i] += scale * (-v_i / (2.0 * noise));
            grad[2 * n] += scale
                * noise
                * (-1.0 / (2.0 * noise) + ((r - m_i) * (r - m_i) + v_i) / (2.0 * noise * noise));

            // KL term (subtracted from the ELBO)
            elbo_batch -= model.kl_term_with(i, &factor);
            let mut pred = 0.0;
            for (k, &nb) in model.neighbors[i].iter().enumerate() {
                pred += factor.b[k] * model.var_mean[nb];
            }
            let delta = model.var_mean[i] - pred;
            grad[i] -= scale * delta / factor.f;
            grad[n + i] -= scale * 0.5 * (1.0 / factor.f - 1.0 / v_i) * v_i;
            for (k, &nb) in model.neighbors[i].iter().enumerate() {
                let v_nb = model.var_log_var[nb].exp();
                grad[nb] -= scale * (-factor.b[k] * delta / factor.f);
                grad[n + nb] -= scale * (0.5 * factor.b[k] * factor.b[k] / factor.f) * v_nb;
            }
        }
        elbo_batch *= scale;
        if !elbo_batch.is_finite() {
            return Err(Error::Numeric(format!("non-finite ELBO at step {step}")));
        }

        if config.optimize_kernel {
            let logs = model.kernel.to_logs();
            let h = 1e-4;
            for (ki, _) in logs.iter().enumerate() {
                let mut lp = logs;
                lp[ki] += h;
                let up = model.elbo_minibatch_with(&batch, &KernelParams::from_logs(&lp))?;
                let mut lm = logs;
                lm[ki] -= h;
                let dn = model.elbo_minibatch_with(&batch, &KernelParams::from_logs(&lm))?;
                grad[2 * n + 1 + ki] = (up - dn) / (2.0 * h);
            }
        }

        // ascent: Adam minimizes, so negate
        for g in grad.iter_mut() {
            *g = -*g;
        }
        let mut flat = Vec::with_capacity(dim);
        flat.extend_from_slice(&model.var_mean);
        flat.extend_from_slice(&model.var_log_var);
        flat.push(model.log_noise);
        if config.optimize_kernel {
            flat.extend_from_slice(&model.kernel.to_logs());
        }
        crate::autodiff::adam_step(&mut flat, &grad, &mut adam, &adam_cfg)?;
        model.var_mean.copy_from_slice(&flat[..n]);
        model.var_log_var.copy_from_slice(&flat[n..2 * n]);
        model.log_noise = flat[2 * n];
        if config.optimize_kernel {
            let logs: [f64; 4] = flat[2 * n + 1..].try_into().unwrap();
            model.kernel = KernelParams::from_logs(&logs);
        }

        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let e = model.elbo_full()?;
            if !e.is_finite() {
                return Err(Error::Numeric(format!("non-finite full ELBO at step {step}")));
            }
            trace.push(e);
        }
    }
    let final_elbo = model.elbo_full()?;
    trace.push(final_elbo);
    if !final_elbo.is_finite() {
        return Err(Error::Numeric("non-finite ELBO after fitting".into()));
    }
    model.fitted = true;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_point(i: usize, t: i64) -> StPoint {
        // roughly 1 km spacing along a meridian
        StPoint { latitude: 0.008993 * i as f64, longitude: 0.0, time: t as f64 }
    }

    fn entry(loc: i64, t: i64, point: StPoint, value: f64) -> ResidualEntry {
        ResidualEntry { location_id: loc, event_code: 1, time_index: t, point, value }
    }

    #[test]
    fn matern_examples() {
        assert_relative_eq!(matern32(0.0, 2.0).unwrap(), 1.0);
        assert!(matern32(1e9, 1.0).unwrap() < 1e-10);
        let expect32 = (1.0 + 3.0_f64.sqrt()) * (-(3.0_f64.sqrt())).exp();
        assert_relative_eq!(matern32(5.0, 5.0).unwrap(), expect32, epsilon = 1e-12);
        assert_relative_eq!(matern32(5.0, 5.0).unwrap(), 0.4834, epsilon = 1e-4);

        assert_relative_eq!(matern52(0.0, 3.0).unwrap(), 1.0);
        let expect52 = (1.0 + 5.0_f64.sqrt() + 5.0 / 3.0) * (-(5.0_f64.sqrt())).exp();
        assert_relative_eq!(matern52(3.0, 3.0).unwrap(), expect52, epsilon = 1e-12);
        assert_relative_eq!(matern52(3.0, 3.0).unwrap(), 0.5240, epsilon = 1e-4);
        // monotone decay
        let mut prev = 1.0;
        for d in 1..100 {
            let v = matern52(d as f64 * 0.3, 4.0).unwrap();
            assert!(v <= prev);
            prev = v;
        }
        assert!(matern32(-1.0, 1.0).is_err());
        assert!(matern52(1.0, 0.0).is_err());
    }

    #[test]
    fn st_kernel_examples() {
        let k = KernelParams {
            signal_variance: 2.0,
            spatial_lengthscale_km: 100.0,
            temporal_lengthscale: 4.0,
            nugget: 1e-3,
        };
        let p = StPoint { latitude: 10.0, longitude: 20.0, time: 5.0 };
        assert_relative_eq!(st_kernel(&p, &p, &k), 2.0 + 1e-3, epsilon = 1e-12);

        // same location, |dt| = temporal lengthscale
        let q = StPoint { time: 9.0, ..p };
        assert_relative_eq!(st_kernel(&p, &q, &k), 2.0 * 0.52399, epsilon = 1e-3);

        // separability: product of the two one-dimensional correlations
        let k1 = KernelParams { signal_variance: 1.0, ..k };
        let r = StPoint { latitude: 10.5, longitude: 20.0, time: 9.0 };
        let d_sp = haversine_km(p.latitude, p.longitude, r.latitude, r.longitude);
        let expect = matern32(d_sp, 100.0).unwrap() * matern52(4.0, 4.0).unwrap();
        assert_relative_eq!(st_kernel(&p, &r, &k1), expect, epsilon = 1e-12);
    }

    #[test]
    fn kernel_symmetry_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = KernelParams::default();
        for _ in 0..200 {
            let p1 = StPoint {
                latitude: rng.random::<f64>() * 60.0 - 30.0,
                longitude: rng.random::<f64>() * 120.0 - 60.0,
                time: (rng.random::<f64>() * 100.0).round(),
            };
            let p2 = StPoint {
                latitude: rng.random::<f64>() * 60.0 - 30.0,
                longitude: rng.random::<f64>() * 120.0 - 60.0,
                time: (rng.random::<f64>() * 100.0).round(),
            };
            assert_eq!(st_kernel(&p1, &p2, &k), st_kernel(&p2, &p1, &k));
        }
    }

    #[test]
    fn random_kernel_matrix_is_positive_definite() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = KernelParams { nugget: 1e-4, ..KernelParams::default() };
        let n = 20;
        let pts: Vec<StPoint> = (0..n)
            .map(|_| StPoint {
                latitude: rng.random::<f64>() * 10.0,
                longitude: rng.random::<f64>() * 10.0,
                time: rng.random::<f64>() * 50.0,
            })
            .collect();
        let mut mat = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                mat[i * n + j] = st_kernel(&pts[i], &pts[j], &k);
            }
        }
        assert!(cholesky_in_place(&mut mat, n), "kernel matrix with nugget not PD");
    }

    #[test]
    fn neighbor_graph_basics() {
        let k = KernelParams::default();
        // n = 1: single empty neighbor set
        let single = ResidualField::new(vec![entry(0, 0, grid_point(0, 0), 0.3)]);
        let sets = build_neighbor_graph(&single, 3, &k).unwrap();
        assert_eq!(sets, vec![Vec::<usize>::new()]);

        // saturation: m >= n-1 gives every predecessor
        let field = ResidualField::new(
            (0..5).map(|t| entry(0, t, grid_point(0, t), t as f64)).collect(),
        );
        let sets = build_neighbor_graph(&field, 10, &k).unwrap();
        for (j, set) in sets.iter().enumerate() {
            assert_eq!(set, &(0..j).collect::<Vec<_>>());
        }

        // 5 collinear equi-spaced temporal points, m = 2: the two nearest
        // predecessors in time, verified by exhaustive comparison
        let sets = build_neighbor_graph(&field, 2, &k).unwrap();
        assert_eq!(sets[4], vec![2, 3]);
        assert_eq!(sets[3], vec![1, 2]);
        assert_eq!(sets[2], vec![0, 1]);
        for j in 0..5 {
            let pj = field.point(j);
            let mut corrs: Vec<(f64, usize)> = (0..j)
                .map(|i| (st_correlation(pj, field.point(i), &k), i))
                .collect();
            corrs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expect: Vec<usize> = corrs.iter().take(2).map(|&(_, i)| i).collect();
            expect.sort_unstable();
            assert_eq!(sets[j], expect);
        }
    }

    /// Independent dense oracle: ELBO computed from the full jittered kernel
    /// matrix via Gauss-Jordan inversion and LU log-determinant.
    fn dense_elbo_oracle(model: &VnngpModel) -> f64 {
        let n = model.len();
        let jitter = JITTERS[0];
        let mut kmat = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                kmat[i * n + j] =
                    st_kernel(model.inducing_point(i), model.inducing_point(j), &model.kernel);
            }
            kmat[i * n + i] += jitter;
        }
        // inverse via Gauss-Jordan
        let mut aug = vec![0.0; n * 2 * n];
        for i in 0..n {
            for j in 0..n {
                aug[i * 2 * n + j] = kmat[i * n + j];
            }
            aug[i * 2 * n + n + i] = 1.0;
        }
        let mut logdet = 0.0;
        for col in 0..n {
            // partial pivot
            let mut piv = col;
            for r in col + 1..n {
                if aug[r * 2 * n + col].abs() > aug[piv * 2 * n + col].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for c in 0..2 * n {
                    aug.swap(col * 2 * n + c, piv * 2 * n + c);
                }
                // a swap flips the determinant sign; the kernel matrix is PD
                // so the product of pivots stays positive overall
            }
            let d = aug[col * 2 * n + col];
            logdet += d.abs().ln();
            for c in 0..2 * n {
                aug[col * 2 * n + c] /= d;
            }
            for r in 0..n {
                if r != col {
                    let factor = aug[r * 2 * n + col];
                    if factor != 0.0 {
                        for c in 0..2 * n {
                            aug[r * 2 * n + c] -= factor * aug[col * 2 * n + c];
                        }
                    }
                }
            }
        }
        let kinv = |i: usize, j: usize| aug[i * 2 * n + n + j];

        let means: Vec<f64> = (0..n).map(|i| model.variational_mean(i)).collect();
        let vars: Vec<f64> = (0..n).map(|i| model.variational_variance(i)).collect();
        let mut quad = 0.0;
        let mut trace = 0.0;
        for i in 0..n {
            trace += kinv(i, i) * vars[i];
            for j in 0..n {
                quad += means[i] * kinv(i, j) * means[j];
            }
        }
        let sum_log_v: f64 = vars.iter().map(|v| v.ln()).sum();
        let kl = 0.5 * (trace + quad - n as f64 + logdet - sum_log_v);

        let data: f64 = (0..n).map(|i| model.data_term(i)).sum();
        data - kl
    }

    fn small_model(n: usize, m: usize, seed: u64) -> VnngpModel {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<ResidualEntry> = (0..n)
            .map(|i| {
                entry(
                    i as i64,
                    i as i64,
                    StPoint {
                        latitude: rng.random::<f64>() * 0.5,
                        longitude: rng.random::<f64>() * 0.5,
                        time: i as f64,
                    },
                    rng.random::<f64>() * 2.0 - 1.0,
                )
            })
            .collect();
        let field = ResidualField::new(entries);
        let kernel = KernelParams {
            signal_variance: 1.3,
            spatial_lengthscale_km: 80.0,
            temporal_lengthscale: 3.0,
            nugget: 1e-3,
        };
        let mut model = VnngpModel::init(field, kernel, m, Some(0.4)).unwrap();
        // non-trivial variational state
        let means: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let vars: Vec<f64> = (0..n).map(|i| 0.2 + 0.05 * (i % 4) as f64).collect();
        model.set_variational(&means, &vars);
        model
    }

    #[test]
    fn elbo_matches_dense_oracle_at_saturation() {
        for n in [3usize, 6, 10] {
            let model = small_model(n, n - 1, 42 + n as u64);
            let full = model.elbo_full().unwrap();
            let oracle = dense_elbo_oracle(&model);
            assert!(
                (full - oracle).abs() < 1e-8,
                "n = {n}: vecchia {full} vs dense {oracle}"
            );
        }
    }

    #[test]
    fn kl_zero_when_q_equals_independent_prior() {
        // far-separated points: correlations underflow to zero, prior is
        // independent, and q set to the prior marginals gives KL = 0
        let kernel = KernelParams {
            signal_variance: 2.0,
            spatial_lengthscale_km: 1.0,
            temporal_lengthscale: 1.0,
            nugget: 1e-4,
        };
        let entries: Vec<ResidualEntry> = (0..3)
            .map(|i| {
                entry(
                    i,
                    i * 100_000,
                    StPoint { latitude: 0.0, longitude: (i as f64) * 90.0 - 90.0, time: (i * 100_000) as f64 },
                    0.5,
                )
            })
            .collect();
        let mut model =
            VnngpModel::init(ResidualField::new(entries), kernel, 2, Some(0.3)).unwrap();
        let prior_var = 2.0 + 1e-4 + JITTERS[0];
        model.set_variational(&[0.0; 3], &[prior_var; 3]);
        for j in 0..3 {
            assert!(model.kl_term(j).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn minibatch_estimator_is_unbiased() {
        let model = small_model(30, 5, 7);
        let full = model.elbo_full().unwrap();
        let draws = 1000;
        let mean: f64 = (0..draws)
            .map(|s| model.elbo_minibatch_seeded(10, s as u64).unwrap())
            .sum::<f64>()
            / draws as f64;
        let rel = (mean - full).abs() / full.abs();
        assert!(rel < 0.01, "mean {mean} vs full {full} (rel {rel})");
    }

    #[test]
    fn batch_of_all_points_equals_full_elbo() {
        let model = small_model(12, 4, 9);
        let all: Vec<usize> = (0..12).collect();
        assert_eq!(model.elbo_minibatch(&all).unwrap(), model.elbo_full().unwrap());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let n = 8;
        let model = small_model(n, 3, 21);
        let batch: Vec<usize> = (0..n).collect();
        let h = 1e-6;
        // numeric gradient via perturbing one coordinate of a cloned model
        let perturb = |which: &str, idx: usize, delta: f64| -> f64 {
            let mut m2 = model.clone();
            match which {
                "mean" => m2.var_mean[idx] += delta,
                "logvar" => m2.var_log_var[idx] += delta,
                _ => m2.log_noise += delta,
            }
            m2.elbo_minibatch(&batch).unwrap()
        };
        // analytic gradients mirror the fit loop
        let noise = model.noise_variance();
        for i in 0..n {
            let factor = model.factor(i, &model.kernel).unwrap();
            let r = model.field.value(i);
            let mut data_dm = (r - model.var_mean[i]) / noise;
            let mut pred = 0.0;
            for (k, &nb) in model.neighbors[i].iter().enumerate() {
                pred += factor.b[k] * model.var_mean[nb];
            }
            let delta = model.var_mean[i] - pred;
            data_dm -= delta / factor.f;
            // contributions of i's mean to other points' KL terms
            for j in 0..n {
                if j == i {
                    continue;
                }
                let fj = model.factor(j, &model.kernel).unwrap();
                if let Some(k) = model.neighbors[j].iter().position(|&x| x == i) {
                    let mut pj = 0.0;
                    for (kk, &nb) in model.neighbors[j].iter().enumerate() {
                        pj += fj.b[kk] * model.var_mean[nb];
                    }
                    let dj = model.var_mean[j] - pj;
                    data_dm -= -fj.b[k] * dj / fj.f;
                }
            }
            let numeric = (perturb("mean", i, h) - perturb("mean", i, -h)) / (2.0 * h);
            assert!(
                (data_dm - numeric).abs() / (data_dm.abs() + numeric.abs() + 1e-9) < 1e-5,
                "mean grad {i}: analytic {data_dm} vs numeric {numeric}"
            );
        }
        // noise gradient
        let mut dn = 0.0;
        for i in 0..n {
            let r = model.field.value(i);
            let m_i = model.var_mean[i];
            let v_i = model.variational_variance(i);
            dn += noise
                * (-1.0 / (2.0 * noise) + ((r - m_i) * (r - m_i) + v_i) / (2.0 * noise * noise));
        }
        let numeric = (perturb("noise", 0, h) - perturb("noise", 0, -h)) / (2.0 * h);
        assert!(
            (dn - numeric).abs() / (dn.abs() + numeric.abs() + 1e-9) < 1e-5,
            "noise grad: analytic {dn} vs numeric {numeric}"
        );
    }

    #[test]
    fn zero_field_posterior_means_stay_near_zero() {
        let entries: Vec<ResidualEntry> = (0..40)
            .map(|i| entry((i % 4) as i64, (i / 4) as i64, grid_point(i % 4, (i / 4) as i64), 0.0))
            .collect();
        let field = ResidualField::new(entries);
        let cfg = VnngpFitConfig {
            m: 5,
            steps: 400,
            learning_rate: 0.05,
            batch_size: 20,
            seed: 3,
            optimize_kernel: false,
            eval_every: 0,
            max_inducing: 0,
            noise_init: Some(0.5),
        };
        let (model, trace) = fit_vnngp(&field, KernelParams::default(), &cfg).unwrap();
        for i in 0..model.len() {
            assert!(model.variational_mean(i).abs() < 1e-2);
        }
        assert!(trace.last().unwrap() >= &trace[0]);
    }

    #[test]
    fn recovers_known_gp_draw() {
        use rand::{Rng, SeedableRng};
        // 1-d spatial Matern-3/2 draw: 50 points 1km apart, lengthscale 5km
        let n_total = 50;
        let kernel = KernelParams {
            signal_variance: 1.0,
            spatial_lengthscale_km: 5.0,
            temporal_lengthscale: 10.0,
            nugget: 1e-6,
        };
        let pts: Vec<StPoint> = (0..n_total).map(|i| grid_point(i, 0)).collect();
        // sample f ~ N(0, K) via Cholesky on the dense matrix
        let mut kmat = vec![0.0; n_total * n_total];
        for i in 0..n_total {
            for j in 0..n_total {
                kmat[i * n_total + j] = st_kernel(&pts[i], &pts[j], &kernel);
            }
            kmat[i * n_total + i] += 1e-9;
        }
        assert!(cholesky_in_place(&mut kmat, n_total));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<f64> = (0..n_total)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let f: Vec<f64> = (0..n_total)
            .map(|i| (0..=i).map(|j| kmat[i * n_total + j] * z[j]).sum())
            .collect();
        let noise_sd = 0.1;
        let obs: Vec<f64> = f
            .iter()
            .map(|&fv| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                fv + noise_sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();

        // train on even indices, hold out odd
        let train: Vec<usize> = (0..n_total).step_by(2).collect();
        let held: Vec<usize> = (1..n_total).step_by(2).collect();
        let entries: Vec<ResidualEntry> =
            train.iter().map(|&i| entry(i as i64, 0, pts[i], obs[i])).collect();
        let field = ResidualField::new(entries);
        let cfg = VnngpFitConfig {
            m: 10,
            steps: 1500,
            learning_rate: 0.05,
            batch_size: 25,
            seed: 5,
            optimize_kernel: false,
            eval_every: 0,
            max_inducing: 0,
            noise_init: Some(0.05),
        };
        let (model, trace) = fit_vnngp(&field, kernel, &cfg).unwrap();
        assert!(trace.last().unwrap() > &trace[0], "ELBO should improve");

        // exact GP regression oracle on the dense training problem
        let nt = train.len();
        let mut ktr = vec![0.0; nt * nt];
        for a in 0..nt {
            for b in 0..nt {
                ktr[a * nt + b] = st_kernel(&pts[train[a]], &pts[train[b]], &kernel);
            }
            ktr[a * nt + a] += noise_sd * noise_sd;
        }
        assert!(cholesky_in_place(&mut ktr, nt));
        let ytr: Vec<f64> = train.iter().map(|&i| obs[i]).collect();
        let alpha = chol_solve(&ktr, nt, &ytr);

        let mut sq_vnngp = 0.0;
        let mut sq_exact = 0.0;
        for &i in &held {
            let (mean, var) = model.predict_residual(&pts[i]).unwrap();
            assert!(var >= 0.0);
            sq_vnngp += (mean - f[i]) * (mean - f[i]);
            let exact: f64 = (0..nt)
                .map(|a| st_kernel(&pts[i], &pts[train[a]], &kernel) * alpha[a])
                .sum();
            sq_exact += (exact - f[i]) * (exact - f[i]);
        }
        let rmse_vnngp = (sq_vnngp / held.len() as f64).sqrt();
        let rmse_exact = (sq_exact / held.len() as f64).sqrt();
        let prior_sd = kernel.signal_variance.sqrt();
        assert!(
            rmse_vnngp < prior_sd,
            "posterior RMSE {rmse_vnngp} should beat prior sd {prior_sd} (exact oracle: {rmse_exact})"
        );

        // posterior variance at inducing points never exceeds the prior
        let prior_var = kernel.signal_variance + kernel.nugget;
        for i in 0..model.len() {
            let (_, var) = model.predict_residual(model.inducing_point(i)).unwrap();
            assert!(
                var <= prior_var + 1e-6,
                "posterior variance {var} above prior {prior_var} at point {i}"
            );
        }
    }

    #[test]
    fn prediction_far_query_reverts_to_prior() {
        let model = small_model(10, 4, 3);
        let mut model = model;
        model.fitted = true;
        let far = StPoint { latitude: 80.0, longitude: 170.0, time: 1e7 };
        let (mean, var) = model.predict_residual(&far).unwrap();
        assert!(mean.abs() < 1e-10);
        let prior = model.kernel.signal_variance + model.kernel.nugget;
        assert!((var - prior).abs() < 1e-6, "var {var} vs prior {prior}");
    }

    #[test]
    fn prediction_at_inducing_point_matches_variational_mean() {
        // tiny nugget: the posterior mean at a data location collapses to
        // that point's variational mean; checked against a dense oracle
        let n = 5;
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let entries: Vec<ResidualEntry> = (0..n)
            .map(|i| entry(i as i64, (i * 3) as i64, grid_point(3 * i, (i * 3) as i64), 0.0))
            .collect();
        let kernel = KernelParams {
            signal_variance: 1.0,
            spatial_lengthscale_km: 4.0,
            temporal_lengthscale: 5.0,
            nugget: 1e-8,
        };
        let mut model =
            VnngpModel::init(ResidualField::new(entries), kernel, n - 1, Some(0.1)).unwrap();
        let means: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        model.set_variational(&means, &[1e-6; 5]);
        for i in 0..n {
            let (mean, _) = model.predict_residual(model.inducing_point(i)).unwrap();
            assert!(
                (mean - means[i]).abs() < 1e-2,
                "point {i}: predicted {mean} vs variational {}",
                means[i]
            );
        }
    }

    #[test]
    fn predictive_variance_nonnegative_for_random_queries() {
        use rand::{Rng, SeedableRng};
        let mut model = small_model(25, 6, 13);
        model.fitted = true;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let q = StPoint {
                latitude: rng.random::<f64>() * 2.0 - 1.0,
                longitude: rng.random::<f64>() * 2.0 - 1.0,
                time: rng.random::<f64>() * 40.0 - 5.0,
            };
            let (_, var) = model.predict_residual(&q).unwrap();
            assert!(var >= 0.0, "negative predictive variance {var}");
        }
    }

    #[test]
    fn unfitted_model_prediction_is_state_error() {
        let model = small_model(5, 2, 1);
        let mut unfitted = model.clone();
        unfitted.fitted = false;
        let p = grid_point(0, 0);
        assert!(matches!(unfitted.predict_residual(&p), Err(Error::State(_))));
    }

    #[test]
    fn fit_is_deterministic() {
        let entries: Vec<ResidualEntry> = (0..30)
            .map(|i| {
                entry(
                    (i % 3) as i64,
                    (i / 3) as i64,
                    grid_point(i % 3, (i / 3) as i64),
                    ((i * 7 % 13) as f64 - 6.0) / 6.0,
                )
            })
            .collect();
        let field = ResidualField::new(entries);
        let cfg = VnngpFitConfig {
            m: 4,
            steps: 100,
            learning_rate: 0.05,
            batch_size: 10,
            seed: 19,
            optimize_kernel: true,
            eval_every: 20,
            max_inducing: 0,
            noise_init: None,
        };
        let (m1, t1) = fit_vnngp(&field, KernelParams::default(), &cfg).unwrap();
        let (m2, t2) = fit_vnngp(&field, KernelParams::default(), &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1.var_mean, m2.var_mean);
        assert_eq!(m1.kernel, m2.kernel);
    }

    #[test]
    fn shrinkage_examples() {
        assert_relative_eq!(shrinkage_factor(1.0, 1.0).unwrap(), 0.5);
        assert_relative_eq!(shrinkage_factor(4.0, 1.0).unwrap(), 0.8);
        assert!(shrinkage_factor(1.0, 1e-12).unwrap() > 0.999999);
        assert!(shrinkage_factor(0.0, 1.0).is_err());
        assert!(shrinkage_factor(1.0, -1.0).is_err());
    }
}
