//! Zero-inflated negative-binomial pathway for highly sparse series.
//!
//! The distribution is a point mass at zero (probability `pi`) mixed with a
//! negative binomial in mean/dispersion form (`mu`, `alpha`; variance
//! `mu + alpha * mu^2`). A small network maps the forecaster's 19 quantiles
//! to the three conditional parameters through softplus / softplus / sigmoid
//! heads, and is trained by minimizing the negative log-likelihood of the
//! observed counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{AdamConfig, AdamState, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to `pi` inside likelihood evaluations; keeps `log` finite at
/// the boundary without moving any interior optimum.
const PI_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZinbParams {
    pub mu: f64,
    pub alpha: f64,
    pub pi: f64,
}

impl ZinbParams {
    pub fn new(mu: f64, alpha: f64, pi: f64) -> Result<Self> {
        let p = Self { mu, alpha, pi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Domain(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Domain(format!("pi must lie in (0, 1), got {}", self.pi)));
        }
        Ok(())
    }
}

fn validate_nb(mu: f64, alpha: f64) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Domain(format!("mu must be positive, got {mu}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Log pmf of the negative binomial in mean/dispersion form: with `r = 1/alpha`
/// and `p = 1/(1 + alpha*mu)`,
/// `P(k) = Gamma(k+r)/(Gamma(r) k!) p^r (1-p)^k`.
pub fn nb_log_pmf(k: u32, mu: f64, alpha: f64) -> Result<f64> {
    validate_nb(mu, alpha)?;
    let r = 1.0 / alpha;
    let am = alpha * mu;
    let log_1p_am = am.ln_1p();
    let kf = k as f64;
    // r*ln(p) = -r*ln(1+am); ln(1-p) = ln(am) - ln(1+am)
    let mut lp = -r * log_1p_am;
    if k > 0 {
        lp += ln_gamma(kf + r) - ln_gamma(r) - ln_gamma(kf + 1.0) + kf * (am.ln() - log_1p_am);
    }
    Ok(lp)
}

pub fn nb_pmf(k: u32, mu: f64, alpha: f64) -> Result<f64> {
    Ok(nb_log_pmf(k, mu, alpha)?.exp())
}

/// Zero-inflated pmf: `pi + (1-pi) P_NB(0)` at zero, `(1-pi) P_NB(k)` above.
pub fn zinb_pmf(k: u32, params: &ZinbParams) -> Result<f64> {
    params.validate()?;
    let nb = nb_pmf(k, params.mu, params.alpha)?;
    Ok(if k == 0 { params.pi + (1.0 - params.pi) * nb } else { (1.0 - params.pi) * nb })
}

/// Log pmf evaluated in log space; the `k = 0` branch uses log-sum-exp.
pub fn zinb_log_pmf(k: u32, params: &ZinbParams) -> Result<f64> {
    params.validate()?;
    let pi = params.pi.clamp(PI_CLAMP, 1.0 - PI_CLAMP);
    let log_nb = nb_log_pmf(k, params.mu, params.alpha)?;
    if k == 0 {
        let a = pi.ln();
        let b = (1.0 - pi).ln() + log_nb;
        let m = a.max(b);
        Ok(m + ((a - m).exp() + (b - m).exp()).ln())
    } else {
        Ok((1.0 - pi).ln() + log_nb)
    }
}

/// Negative log-likelihood of `counts` under per-observation parameters.
pub fn zinb_nll(counts: &[u32], params: &[ZinbParams]) -> Result<f64> {
    if counts.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} counts vs {} parameter triples",
            counts.len(),
            params.len()
        )));
    }
    let mut nll = 0.0;
    for (&k, p) in counts.iter().zip(params) {
        nll -= zinb_log_pmf(k, p)?;
    }
    Ok(nll)
}

/// ZINB expectation `(1 - pi) * mu`, the sparse-pathway point forecast.
pub fn zinb_point_forecast(params: &ZinbParams) -> f64 {
    (1.0 - params.pi) * params.mu
}

/// Analytic ZINB variance `(1-pi) mu (1 + alpha*mu + pi*mu)`.
pub fn zinb_variance(params: &ZinbParams) -> f64 {
    (1.0 - params.pi) * params.mu * (1.0 + params.alpha * params.mu + params.pi * params.mu)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZinbTrainConfig {
    pub hidden_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ZinbTrainConfig {
    fn default() -> Self {
        Self { hidden_width: 64, epochs: 80, batch_size: 128, learning_rate: 5e-3, seed: 13 }
    }
}

/// Two shared tanh hidden layers followed by softplus / softplus / sigmoid
/// output heads producing `(mu, alpha, pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZinbHeadModel {
    pub input_width: usize,
    pub hidden_width: usize,
    pub params: ParamSet,
}

impl ZinbHeadModel {
    pub fn init(input_width: usize, hidden_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let mut dense = |params: &mut ParamSet, name: &str, rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            let data: Vec<f64> =
                (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
            params.push(
                &format!("{name}.weight"),
                Tensor::from_vec(vec![rows, cols], data).unwrap(),
            );
            params.push(&format!("{name}.bias"), Tensor::zeros(&[cols]));
        };
        dense(&mut params, "shared1", input_width, hidden_width);
        dense(&mut params, "shared2", hidden_width, hidden_width);
        dense(&mut params, "head_mu", hidden_width, 1);
        dense(&mut params, "head_alpha", hidden_width, 1);
        dense(&mut params, "head_pi", hidden_width, 1);
        Self { input_width, hidden_width, params }
    }

    /// All-zero weights; outputs collapse to the head biases.
    pub fn zeroed(input_width: usize, hidden_width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(input_width, hidden_width, &mut rng);
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for name in names {
            let t = model.params.tensor_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        model
    }

    /// Tape forward pass for a `[batch, input_width]` feature leaf. Returns
    /// `(mu, alpha, z_pi)` node ids, each `[batch, 1]`; `pi = sigmoid(z_pi)`.
    fn forward_graph(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        features: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let get =
            |name: &str| -> NodeId { leaves[self.params.index(name).expect("parameter name")] };
        let mut dense = |g: &mut Graph, x: NodeId, name: &str| -> Result<NodeId> {
            let w = get(&format!("{name}.weight"));
            let b = get(&format!("{name}.bias"));
            let xw = g.matmul(x, w)?;
            g.add(xw, b)
        };
        let h1 = dense(g, features, "shared1")?;
        let h1 = g.tanh(h1);
        let h2 = dense(g, h1, "shared2")?;
        let h2 = g.tanh(h2);
        let mu_raw = dense(g, h2, "head_mu")?;
        let mu = g.softplus(mu_raw);
        let alpha_raw = dense(g, h2, "head_alpha")?;
        let alpha = g.softplus(alpha_raw);
        let z_pi = dense(g, h2, "head_pi")?;
        Ok((mu, alpha, z_pi))
    }

    /// Plain forward pass for one quantile vector.
    pub fn predict(&self, quantiles: &[f64]) -> Result<ZinbParams> {
        if quantiles.len() != self.input_width {
            return Err(Error::Shape(format!(
                "expected {} quantile features, got {}",
                self.input_width,
                quantiles.len()
            )));
        }
        if quantiles.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite quantile feature".into()));
        }
        let mut g = Graph::new();
        let leaves = self.params.leaves(&mut g);
        let feats = g.leaf(Tensor::from_vec(vec![1, self.input_width], quantiles.to_vec())?);
        let (mu, alpha, z_pi) = self.forward_graph(&mut g, &leaves, feats)?;
        let mu = g.value(mu).data()[0];
        let alpha = g.value(alpha).data()[0];
        let z = g.value(z_pi).data()[0];
        let pi = crate::autodiff::stable_sigmoid(z);
        // softplus can underflow to exactly 0 for very negative activations;
        // nudge into the open domain.
        ZinbParams::new(mu.max(1e-12), alpha.max(1e-12), pi.clamp(PI_CLAMP, 1.0 - PI_CLAMP))
    }
}

/// Maps the forecaster quantiles to ZINB parameters; alias for
/// [`ZinbHeadModel::predict`].
pub fn zinb_predict(head: &ZinbHeadModel, quantiles: &[f64]) -> Result<ZinbParams> {
    head.predict(quantiles)
}

/// Builds the stable tape NLL for a batch: `counts` are constants, the
/// distribution parameters come from the head's forward pass.
fn zinb_nll_graph(
    g: &mut Graph,
    mu: NodeId,
    alpha: NodeId,
    z_pi: NodeId,
    counts: &[u32],
) -> Result<NodeId> {
    let n = counts.len();
    let k: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let lgamma_k1: Vec<f64> = k.iter().map(|&kf| ln_gamma(kf + 1.0)).collect();
    let mask0: Vec<f64> = counts.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();
    let maskp: Vec<f64> = mask0.iter().map(|&m| 1.0 - m).collect();

    let kk = g.leaf(Tensor::from_vec(vec![n, 1], k)?);
    let lgk1 = g.leaf(Tensor::from_vec(vec![n, 1], lgamma_k1)?);
    let m0 = g.leaf(Tensor::from_vec(vec![n, 1], mask0)?);
    let mp = g.leaf(Tensor::from_vec(vec![n, 1], maskp)?);

    // r = 1/alpha via exp(-log alpha); L = log(1 + alpha*mu)
    let log_alpha = g.log(alpha);
    let neg_log_alpha = g.neg(log_alpha);
    let r = g.exp(neg_log_alpha);
    let am = g.mul(alpha, mu)?;
    let am1 = g.add_scalar(am, 1.0);
    let big_l = g.log(am1);

    // log NB(0) = -r * L
    let rl = g.mul(r, big_l)?;
    let log_nb0 = g.neg(rl);

    // log NB(k) = lgamma(k+r) - lgamma(r) - lgamma(k+1) + k*(log(am) - L) - r*L
    let kpr = g.add(kk, r)?;
    let lg_kpr = g.lgamma(kpr);
    let lg_r = g.lgamma(r);
    let log_am = g.log(am);
    let log_1mp = g.sub(log_am, big_l)?;
    let k_term = g.mul(kk, log_1mp)?;
    let t1 = g.sub(lg_kpr, lg_r)?;
    let t2 = g.sub(t1, lgk1)?;
    let t3 = g.add(t2, k_term)?;
    let log_nbk = g.add(t3, log_nb0)?;

    // log pi = -softplus(-z); log(1-pi) = -softplus(z)
    let neg_z = g.neg(z_pi);
    let sp_negz = g.softplus(neg_z);
    let log_pi = g.neg(sp_negz);
    let sp_z = g.softplus(z_pi);
    let log_1mpi = g.neg(sp_z);

    // log P(0) = logsumexp(log pi, log(1-pi) + log NB(0)) = a + softplus(b - a)
    let b_branch = g.add(log_1mpi, log_nb0)?;
    let b_minus_a = g.sub(b_branch, log_pi)?;
    let sp = g.softplus(b_minus_a);
    let log_p0 = g.add(log_pi, sp)?;

    let log_pk = g.add(log_1mpi, log_nbk)?;

    let ll0 = g.mul(m0, log_p0)?;
    let llp = g.mul(mp, log_pk)?;
    let ll = g.add(ll0, llp)?;
    let total = g.sum(ll);
    Ok(g.neg(total))
}

/// Tape-evaluated NLL for explicit parameter values; the dual route used by
/// tests to pin the training loss against the plain evaluation.
pub fn zinb_nll_tape(counts: &[u32], params: &[ZinbParams]) -> Result<f64> {
    let n = counts.len();
    if n != params.len() {
        return Err(Error::Shape(format!("{} counts vs {} params", n, params.len())));
    }
    let mut g = Graph::new();
    let mu = g.leaf(Tensor::from_vec(vec![n, 1], params.iter().map(|p| p.mu).collect())?);
    let alpha = g.leaf(Tensor::from_vec(vec![n, 1], params.iter().map(|p| p.alpha).collect())?);
    let z: Vec<f64> = params.iter().map(|p| (p.pi / (1.0 - p.pi)).ln()).collect();
    let z_pi = g.leaf(Tensor::from_vec(vec![n, 1], z)?);
    let root = zinb_nll_graph(&mut g, mu, alpha, z_pi, counts)?;
    Ok(g.value(root).scalar_value())
}

/// Training set for the sparse pathway: one row per (series, time) with the
/// forecaster's quantile vector as features and the observed count as target.
#[derive(Debug, Clone, Default)]
pub struct ZinbTrainingSet {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<u32>,
}

impl ZinbTrainingSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Fits the head by Adam on the tape NLL. Returns the model together with the
/// full-data NLL after each epoch.
pub fn train_zinb_head(
    set: &ZinbTrainingSet,
    config: &ZinbTrainConfig,
) -> Result<(ZinbHeadModel, Vec<f64>)> {
    if set.is_empty() {
        return Err(Error::Config("empty sparse-series training set".into()));
    }
    if set.features.len() != set.targets.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} targets",
            set.features.len(),
            set.targets.len()
        )));
    }
    let width = set.features[0].len();
    if set.features.iter().any(|f| f.len() != width) {
        return Err(Error::Shape("ragged feature rows".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ZinbHeadModel::init(width, config.hidden_width, &mut rng);
    let mut adam = AdamState::new(model.params.total_scalars());
    let adam_cfg = AdamConfig::with_lr(config.learning_rate);

    let n = set.len();
    let batch = config.batch_size.max(1).min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let mut epoch_nll = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let mut feats = Vec::with_capacity(batch * width);
            let mut counts = Vec::with_capacity(batch);
            for &i in &idx {
                feats.extend_from_slice(&set.features[i]);
                counts.push(set.targets[i]);
            }
            let mut g = Graph::new();
            let leaves = model.params.leaves(&mut g);
            let f = g.leaf(Tensor::from_vec(vec![batch, width], feats)?);
            let (mu, alpha, z_pi) = model.forward_graph(&mut g, &leaves, f)?;
            let nll = zinb_nll_graph(&mut g, mu, alpha, z_pi, &counts)?;
            let loss = g.scale(nll, 1.0 / batch as f64);
            if !g.value(loss).scalar_value().is_finite() {
                return Err(Error::Numeric("non-finite ZINB training loss".into()));
            }
            let grads = g.backward(loss)?;
            let param_grads: Vec<Tensor> = leaves.iter().map(|id| grads[id.0].clone()).collect();
            model.params.apply_grads(&param_grads, &mut adam, &adam_cfg)?;
        }
        epoch_nll.push(full_nll(&model, set)?);
    }
    Ok((model, epoch_nll))
}

fn full_nll(model: &ZinbHeadModel, set: &ZinbTrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for (f, &k) in set.features.iter().zip(&set.targets) {
        let p = model.predict(f)?;
        total -= zinb_log_pmf(k, &p)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nb_pmf_at_zero_closed_form() {
        let (mu, alpha) = (5.0, 0.5);
        let expect = (1.0 + alpha * mu).powf(-1.0 / alpha);
        assert_relative_eq!(nb_pmf(0, mu, alpha).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn nb_poisson_limit() {
        let (mu, alpha, k) = (2.0, 1e-6, 3u32);
        let poisson = (-mu + (k as f64) * mu.ln() - ln_gamma(k as f64 + 1.0)).exp();
        let nb = nb_pmf(k, mu, alpha).unwrap();
        assert!((nb - poisson).abs() < 1e-4, "nb={nb} poisson={poisson}");
    }

    #[test]
    fn nb_normalizes() {
        let total: f64 = (0..=1000).map(|k| nb_pmf(k, 5.0, 0.5).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-8, "total={total}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(nb_pmf(1, -1.0, 0.5).is_err());
        assert!(nb_pmf(1, 1.0, 0.0).is_err());
        assert!(ZinbParams::new(1.0, 0.5, 1.0).is_err());
        assert!(ZinbParams::new(1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn zinb_degenerate_and_reduction() {
        let near_one = ZinbParams::new(5.0, 0.5, 1.0 - 1e-9).unwrap();
        assert!(zinb_pmf(0, &near_one).unwrap() > 1.0 - 1e-6);
        assert!(zinb_pmf(3, &near_one).unwrap() < 1e-6);

        // pi -> 0 reduces to the NB pmf
        let tiny_pi = ZinbParams::new(5.0, 0.5, 1e-12).unwrap();
        for k in [0u32, 1, 4, 10] {
            assert_relative_eq!(
                zinb_pmf(k, &tiny_pi).unwrap(),
                nb_pmf(k, 5.0, 0.5).unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn zinb_normalizes() {
        let p = ZinbParams::new(5.0, 0.5, 0.3).unwrap();
        let total: f64 = (0..=1000).map(|k| zinb_pmf(k, &p).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-8, "total={total}");
    }

    #[test]
    fn normalization_and_moments_on_grid() {
        // 10-point parameter grid: brute-force mean/variance identities.
        let grid = [
            (0.5, 0.2, 0.1),
            (1.0, 0.5, 0.3),
            (2.0, 1.0, 0.5),
            (3.0, 0.4, 0.2),
            (5.0, 0.5, 0.3),
            (8.0, 0.3, 0.6),
            (10.0, 0.1, 0.05),
            (0.8, 2.0, 0.4),
            (4.0, 0.05, 0.7),
            (6.5, 0.8, 0.15),
        ];
        for (mu, alpha, pi) in grid {
            let p = ZinbParams::new(mu, alpha, pi).unwrap();
            let mut total = 0.0;
            let mut mean = 0.0;
            let mut second = 0.0;
            for k in 0..=1000u32 {
                let pk = zinb_pmf(k, &p).unwrap();
                total += pk;
                mean += k as f64 * pk;
                second += (k as f64) * (k as f64) * pk;
            }
            assert!((total - 1.0).abs() < 1e-8, "normalization at {mu},{alpha},{pi}");
            let var = second - mean * mean;
            assert!(
                (mean - zinb_point_forecast(&p)).abs() < 1e-4,
                "mean identity at {mu},{alpha},{pi}: {mean} vs {}",
                zinb_point_forecast(&p)
            );
            assert!(
                (var - zinb_variance(&p)).abs() < 1e-4,
                "variance identity at {mu},{alpha},{pi}: {var} vs {}",
                zinb_variance(&p)
            );

            // NB-only moment checks against mu and mu + alpha*mu^2
            let mut nb_mean = 0.0;
            let mut nb_second = 0.0;
            for k in 0..=1000u32 {
                let pk = nb_pmf(k, mu, alpha).unwrap();
                nb_mean += k as f64 * pk;
                nb_second += (k as f64) * (k as f64) * pk;
            }
            assert!((nb_mean - mu).abs() < 1e-4);
            assert!((nb_second - nb_mean * nb_mean - (mu + alpha * mu * mu)).abs() < 1e-4);
        }
    }

    #[test]
    fn point_forecast_matches_truncated_expectation() {
        let p = ZinbParams::new(3.0, 0.4, 0.2).unwrap();
        let brute: f64 = (0..=2000u32).map(|k| k as f64 * zinb_pmf(k, &p).unwrap()).sum();
        assert!((brute - zinb_point_forecast(&p)).abs() < 1e-6);
        assert_relative_eq!(zinb_point_forecast(&ZinbParams::new(4.0, 0.3, 0.5).unwrap()), 2.0);
    }

    #[test]
    fn nll_single_count_is_neg_log_pmf() {
        let p = ZinbParams::new(2.0, 0.7, 0.25).unwrap();
        let nll = zinb_nll(&[3], &[p]).unwrap();
        assert_relative_eq!(nll, -zinb_pmf(3, &p).unwrap().ln(), epsilon = 1e-10);
    }

    #[test]
    fn nll_all_zero_counts_pi_near_one() {
        let p = ZinbParams::new(2.0, 0.7, 1.0 - 1e-7).unwrap();
        let nll = zinb_nll(&[0; 10], &[p; 10]).unwrap();
        assert!(nll < 1e-5, "nll={nll}");
    }

    #[test]
    fn nll_matches_naive_evaluation_and_tape() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = Vec::new();
        let mut params = Vec::new();
        for _ in 0..20 {
            counts.push(rng.random_range(0..15u32));
            params.push(
                ZinbParams::new(
                    0.5 + rng.random::<f64>() * 8.0,
                    0.05 + rng.random::<f64>() * 1.5,
                    0.05 + rng.random::<f64>() * 0.9,
                )
                .unwrap(),
            );
        }
        let naive: f64 =
            counts.iter().zip(&params).map(|(&k, p)| -zinb_pmf(k, p).unwrap().ln()).sum();
        let stable = zinb_nll(&counts, &params).unwrap();
        assert!((stable - naive).abs() < 1e-10, "stable={stable} naive={naive}");
        let tape = zinb_nll_tape(&counts, &params).unwrap();
        assert!((tape - naive).abs() < 1e-8, "tape={tape} naive={naive}");
    }

    #[test]
    fn nll_gradient_check() {
        use crate::autodiff::grad_check;
        use rand::{Rng, SeedableRng};
        // d(NLL)/d(head weights) through the full forward pass
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ZinbHeadModel::init(4, 6, &mut rng);
        let feats: Vec<f64> = (0..3 * 4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let counts = [0u32, 2, 5];
        for pi in 0..model.params.len() {
            let (name, tensor) = model.params.entry(pi);
            let name = name.to_string();
            let tensor = tensor.clone();
            let model_ref = &model;
            let feats_ref = &feats;
            let err = grad_check(
                |g, xid| {
                    let mut leaves = Vec::with_capacity(model_ref.params.len());
                    for i in 0..model_ref.params.len() {
                        let (n, t) = model_ref.params.entry(i);
                        if n == name {
                            leaves.push(xid);
                        } else {
                            leaves.push(g.leaf(t.clone()));
                        }
                    }
                    let f = g.leaf(Tensor::from_vec(vec![3, 4], feats_ref.clone()).unwrap());
                    let (mu, alpha, z_pi) = model_ref.forward_graph(g, &leaves, f)?;
                    zinb_nll_graph(g, mu, alpha, z_pi, &counts)
                },
                &tensor,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-3, "param {name}: err = {err}");
        }
    }

    #[test]
    fn predict_respects_domains_and_zeroed_head() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ZinbHeadModel::init(19, 8, &mut rng);
        for _ in 0..50 {
            let q: Vec<f64> = (0..19).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let p = model.predict(&q).unwrap();
            assert!(p.mu > 0.0 && p.alpha > 0.0 && p.pi > 0.0 && p.pi < 1.0);
        }
        // zero weights collapse to softplus(bias) deterministically
        let zeroed = ZinbHeadModel::zeroed(19, 8);
        let p1 = zeroed.predict(&vec![1.0; 19]).unwrap();
        let p2 = zeroed.predict(&vec![-7.0; 19]).unwrap();
        assert_eq!(p1, p2);
        assert_relative_eq!(p1.mu, crate::autodiff::stable_softplus(0.0), epsilon = 1e-12);

        assert!(model.predict(&[f64::NAN; 19]).is_err());
        assert!(model.predict(&[0.0; 5]).is_err());
    }

    /// Inverse-cdf ZINB sampler used only by the consistency test.
    fn sample_zinb(p: &ZinbParams, rng: &mut ChaCha8Rng) -> u32 {
        if rng.random::<f64>() < p.pi {
            return 0;
        }
        let u: f64 = rng.random();
        let mut k = 0u32;
        let mut pk = nb_pmf(0, p.mu, p.alpha).unwrap();
        let mut acc = pk;
        let r = 1.0 / p.alpha;
        let one_minus_p = p.alpha * p.mu / (1.0 + p.alpha * p.mu);
        while acc < u && k < 100_000 {
            pk *= (k as f64 + r) / (k as f64 + 1.0) * one_minus_p;
            acc += pk;
            k += 1;
        }
        k
    }

    #[test]
    fn training_recovers_simulated_parameters() {
        use rand::SeedableRng;
        let truth = ZinbParams::new(5.0, 0.5, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 5000;
        let feats: Vec<f64> = (0..19).map(|i| (i as f64) / 10.0).collect();
        let set = ZinbTrainingSet {
            features: (0..n).map(|_| feats.clone()).collect(),
            targets: (0..n).map(|_| sample_zinb(&truth, &mut rng)).collect(),
        };
        let cfg = ZinbTrainConfig {
            hidden_width: 16,
            epochs: 120,
            batch_size: 512,
            learning_rate: 5e-3,
            seed: 4,
        };
        let (model, nlls) = train_zinb_head(&set, &cfg).unwrap();
        assert!(nlls.last().unwrap() < &nlls[0]);
        let fitted = model.predict(&feats).unwrap();
        assert!(
            (fitted.mu - truth.mu).abs() / truth.mu < 0.2,
            "mu: {} vs {}",
            fitted.mu,
            truth.mu
        );
        assert!(
            (fitted.alpha - truth.alpha).abs() / truth.alpha < 0.2,
            "alpha: {} vs {}",
            fitted.alpha,
            truth.alpha
        );
        assert!(
            (fitted.pi - truth.pi).abs() / truth.pi < 0.2,
            "pi: {} vs {}",
            fitted.pi,
            truth.pi
        );
    }

    #[test]
    fn all_zero_targets_push_pi_up() {
        let feats: Vec<f64> = vec![0.5; 19];
        let set = ZinbTrainingSet {
            features: (0..400).map(|_| feats.clone()).collect(),
            targets: vec![0; 400],
        };
        let cfg = ZinbTrainConfig {
            hidden_width: 8,
            epochs: 60,
            batch_size: 128,
            learning_rate: 1e-2,
            seed: 2,
        };
        let (model, nlls) = train_zinb_head(&set, &cfg).unwrap();
        let fitted = model.predict(&feats).unwrap();
        assert!(fitted.pi > 0.5, "pi = {}", fitted.pi);
        assert!(nlls.last().unwrap() < &nlls[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let set = ZinbTrainingSet {
            features: (0..100).map(|i| vec![(i % 7) as f64 * 0.1; 19]).collect(),
            targets: (0..100).map(|i| (i % 5) as u32).collect(),
        };
        let cfg = ZinbTrainConfig {
            hidden_width: 8,
            epochs: 5,
            batch_size: 32,
            learning_rate: 5e-3,
            seed: 11,
        };
        let (m1, n1) = train_zinb_head(&set, &cfg).unwrap();
        let (m2, n2) = train_zinb_head(&set, &cfg).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn empty_training_set_is_config_error() {
        let set = ZinbTrainingSet::default();
        assert!(matches!(
            train_zinb_head(&set, &ZinbTrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
