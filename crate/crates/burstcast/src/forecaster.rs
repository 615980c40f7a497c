//! Global quantile forecaster over log-transformed counts.
//!
//! One model is shared across all series; series identity enters only through
//! static location / event-code embeddings. The encoder is: per-group input
//! projections -> variable-selection gated residual network -> causal
//! multi-head self-attention over the lookback window -> gated residual
//! network -> one linear head per quantile level. Multi-step forecasts are
//! produced recursively one step at a time by the pipeline, so no decoder is
//! needed. Quantile crossing is resolved by sorting the head outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::panel::{log_transform, EventPanel, SeriesKey};

pub const NUM_QUANTILES: usize = 19;

/// The 19 quantile levels 0.05, 0.10, ..., 0.95.
pub fn default_quantile_levels() -> Vec<f64> {
    (1..=NUM_QUANTILES).map(|i| i as f64 * 0.05).collect()
}

/// Index of the median level in the default grid.
pub const MEDIAN_INDEX: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub hidden_width: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub lookback: usize,
    pub quantile_levels: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub static_embed_dim: usize,
    /// Periods of the sinusoidal time encodings (time steps).
    pub time_enc_periods: Vec<f64>,
    /// Shared log-transform offset.
    pub epsilon: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            attention_heads: 4,
            dropout: 0.1,
            learning_rate: 3e-4,
            lookback: 16,
            quantile_levels: default_quantile_levels(),
            epochs: 8,
            batch_size: 64,
            seed: 7,
            static_embed_dim: 16,
            time_enc_periods: vec![52.0, 26.0],
            epsilon: 1.0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.hidden_width % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_width {} must be a positive multiple of attention_heads {}",
                self.hidden_width, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lookback == 0 {
            return Err(Error::Config("lookback must be >= 1".into()));
        }
        if self.quantile_levels.is_empty()
            || self
                .quantile_levels
                .windows(2)
                .any(|w| w[0] >= w[1])
            || self.quantile_levels.first().copied().unwrap_or(0.0) <= 0.0
            || self.quantile_levels.last().copied().unwrap_or(1.0) >= 1.0
        {
            return Err(Error::Config(
                "quantile_levels must be strictly increasing inside (0, 1)".into(),
            ));
        }
        if self.time_enc_periods.is_empty() || self.time_enc_periods.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("time_enc_periods must be positive".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.static_embed_dim == 0 {
            return Err(Error::Config("static_embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    fn num_quantiles(&self) -> usize {
        self.quantile_levels.len()
    }

    fn median_index(&self) -> usize {
        // level closest to 0.5
        self.quantile_levels
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 0.5).abs().partial_cmp(&(b.1 - 0.5).abs()).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Pinball (quantile) loss `tau*max(y-q, 0) + (1-tau)*max(q-y, 0)`.
pub fn pinball_loss(y: f64, q: f64, tau: f64) -> Result<f64> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::Domain(format!("quantile level {tau} outside (0, 1)")));
    }
    Ok(tau * (y - q).max(0.0) + (1.0 - tau) * (q - y).max(0.0))
}

/// Per-series, per-horizon vector of conditional quantiles on the log scale,
/// sorted non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub series: SeriesKey,
    pub origin: i64,
    pub horizon: u32,
    pub q: Vec<f64>,
}

impl QuantileForecast {
    pub fn median(&self, config: &ForecasterConfig) -> f64 {
        self.q[config.median_index()]
    }
}

/// Resolves quantile crossing by sorting in place.
pub fn sort_quantiles(q: &mut [f64]) {
    q.sort_by(|a, b| a.partial_cmp(b).expect("non-finite quantile"));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterModel {
    pub config: ForecasterConfig,
    pub location_ids: Vec<i64>,
    pub event_codes: Vec<i64>,
    pub params: ParamSet,
}

/// Per-epoch mean training pinball loss (full pass, evaluation mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

struct BatchInput {
    loc_idx: Vec<usize>,
    code_idx: Vec<usize>,
    /// `[batch * lookback]` log-counts, window-major.
    windows: Vec<f64>,
    /// Absolute time index of each window step, same layout.
    times: Vec<f64>,
}

impl BatchInput {
    fn len(&self) -> usize {
        self.loc_idx.len()
    }
}

fn grn_param_spec(name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Vec<(String, Vec<usize>)> {
    let mut spec = vec![
        (format!("{name}.w1"), vec![d_in, d_hidden]),
        (format!("{name}.b1"), vec![d_hidden]),
        (format!("{name}.w2"), vec![d_hidden, d_out]),
        (format!("{name}.b2"), vec![d_out]),
        (format!("{name}.wg"), vec![d_in, d_out]),
        (format!("{name}.bg"), vec![d_out]),
        (format!("{name}.ln_gain"), vec![d_out]),
        (format!("{name}.ln_bias"), vec![d_out]),
    ];
    if d_in != d_out {
        spec.insert(6, (format!("{name}.skip"), vec![d_in, d_out]));
    }
    spec
}

impl ForecasterModel {
    fn param_spec(config: &ForecasterConfig, n_loc: usize, n_code: usize) -> Vec<(String, Vec<usize>)> {
        let d = config.hidden_width;
        let e = config.static_embed_dim;
        let l = config.lookback;
        let nq = config.num_quantiles();
        let tdim = 2 * config.time_enc_periods.len();
        let vsn_in = 1 + tdim + 2 * e;
        let dh = d / config.attention_heads;

        let mut spec: Vec<(String, Vec<usize>)> = vec![
            ("loc_embed".into(), vec![n_loc, e]),
            ("code_embed".into(), vec![n_code, e]),
            ("pos_embed".into(), vec![l, d]),
            ("proj_value.weight".into(), vec![1, d]),
            ("proj_value.bias".into(), vec![d]),
            ("proj_time.weight".into(), vec![tdim, d]),
            ("proj_time.bias".into(), vec![d]),
            ("proj_loc.weight".into(), vec![e, d]),
            ("proj_loc.bias".into(), vec![d]),
            ("proj_code.weight".into(), vec![e, d]),
            ("proj_code.bias".into(), vec![d]),
        ];
        spec.extend(grn_param_spec("grn_vs", vsn_in, d, 4));
        spec.extend(grn_param_spec("grn_pre", d, d, d));
        for h in 0..config.attention_heads {
            spec.push((format!("attn.h{h}.wq"), vec![d, dh]));
            spec.push((format!("attn.h{h}.wk"), vec![d, dh]));
            spec.push((format!("attn.h{h}.wv"), vec![d, dh]));
        }
        spec.push(("attn.wo".into(), vec![d, d]));
        spec.push(("attn.wo_bias".into(), vec![d]));
        spec.push(("attn.ln_gain".into(), vec![d]));
        spec.push(("attn.ln_bias".into(), vec![d]));
        spec.extend(grn_param_spec("grn_post", d, d, d));
        spec.push(("head.weight".into(), vec![d, nq]));
        spec.push(("head.bias".into(), vec![nq]));
        spec
    }

    pub fn init(
        config: &ForecasterConfig,
        location_ids: Vec<i64>,
        event_codes: Vec<i64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let spec = Self::param_spec(config, location_ids.len(), event_codes.len());
        let mut params = ParamSet::new();
        for (name, shape) in spec {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".bias")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with(".bg")
                || name.ends_with(".ln_bias")
            {
                vec![0.0; n]
            } else if name.ends_with(".ln_gain") {
                vec![1.0; n]
            } else if name.ends_with("_embed") {
                (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * 0.1).collect()
            } else {
                let fan_in = shape[0].max(1) as f64;
                let scale = 1.0 / fan_in.sqrt();
                (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
            };
            params.push(&name, Tensor::from_vec(shape, data)?);
        }
        Ok(Self { config: config.clone(), location_ids, event_codes, params })
    }

    /// All-zero parameters except unit layer-norm gains: the head output is
    /// identically zero, so the model predicts a zero log-intensity.
    pub fn zeroed(config: &ForecasterConfig, location_ids: Vec<i64>, event_codes: Vec<i64>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(config, location_ids, event_codes, &mut rng)?;
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for name in names {
            let keep_ones = name.ends_with(".ln_gain");
            let t = model.params.tensor_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = if keep_ones { 1.0 } else { 0.0 };
            }
        }
        Ok(model)
    }

    pub fn location_index(&self, id: i64) -> Option<usize> {
        self.location_ids.iter().position(|&l| l == id)
    }

    pub fn code_index(&self, code: i64) -> Option<usize> {
        self.event_codes.iter().position(|&c| c == code)
    }

    fn grn(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        name: &str,
        x: NodeId,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<NodeId> {
        let get = |n: &str| -> NodeId { leaves[self.params.index(n).expect("grn param")] };
        let w1 = get(&format!("{name}.w1"));
        let b1 = get(&format!("{name}.b1"));
        let xw1 = g.matmul(x, w1)?;
        let pre1 = g.add(xw1, b1)?;
        let mut h = g.relu(pre1);
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                h = g.dropout(h, rate, rng);
            }
        }
        let w2 = get(&format!("{name}.w2"));
        let b2 = get(&format!("{name}.b2"));
        let hw2 = g.matmul(h, w2)?;
        let h2 = g.add(hw2, b2)?;
        let wg = get(&format!("{name}.wg"));
        let bg = get(&format!("{name}.bg"));
        let xwg = g.matmul(x, wg)?;
        let gate_pre = g.add(xwg, bg)?;
        let gate = g.sigmoid(gate_pre);
        let gated = g.mul(gate, h2)?;
        let base = if self.params.index(&format!("{name}.skip")).is_some() {
            let skip = get(&format!("{name}.skip"));
            g.matmul(x, skip)?
        } else {
            x
        };
        let pre_ln = g.add(base, gated)?;
        let ln = g.layer_norm(pre_ln, 1e-5)?;
        let gain = get(&format!("{name}.ln_gain"));
        let bias = get(&format!("{name}.ln_bias"));
        let scaled = g.mul(ln, gain)?;
        g.add(scaled, bias)
    }

    /// Raw (unsorted) quantile outputs `[batch, n_quantiles]`.
    fn forward(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        input: &BatchInput,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let b = input.len();
        let l = cfg.lookback;
        let d = cfg.hidden_width;
        let e = cfg.static_embed_dim;
        let tdim = 2 * cfg.time_enc_periods.len();
        let dh = d / cfg.attention_heads;
        let get = |n: &str| -> NodeId { leaves[self.params.index(n).expect("param")] };
        let rate = cfg.dropout;

        // dynamic inputs
        let values = g.leaf(Tensor::from_vec(vec![b, l, 1], input.windows.clone())?);
        let mut tfeat = Vec::with_capacity(b * l * tdim);
        for &t in &input.times {
            for p in &cfg.time_enc_periods {
                let arg = 2.0 * std::f64::consts::PI * t / p;
                tfeat.push(arg.sin());
                tfeat.push(arg.cos());
            }
        }
        let times = g.leaf(Tensor::from_vec(vec![b, l, tdim], tfeat)?);

        // static embeddings, broadcast over the window
        let ones_l = g.leaf(Tensor::filled(&[1, l, 1], 1.0));
        let loc_rows = g.embedding_lookup(get("loc_embed"), &input.loc_idx)?;
        let loc_rows = g.reshape(loc_rows, vec![b, 1, e])?;
        let loc_bcast = g.mul(loc_rows, ones_l)?;
        let code_rows = g.embedding_lookup(get("code_embed"), &input.code_idx)?;
        let code_rows = g.reshape(code_rows, vec![b, 1, e])?;
        let code_bcast = g.mul(code_rows, ones_l)?;

        // per-group projections into the model width
        let mut proj = |g: &mut Graph, x: NodeId, name: &str| -> Result<NodeId> {
            let w = get(&format!("{name}.weight"));
            let bias = get(&format!("{name}.bias"));
            let xw = g.matmul(x, w)?;
            g.add(xw, bias)
        };
        let xi_value = proj(g, values, "proj_value")?;
        let xi_time = proj(g, times, "proj_time")?;
        let xi_loc = proj(g, loc_bcast, "proj_loc")?;
        let xi_code = proj(g, code_bcast, "proj_code")?;

        // variable selection: softmax weights over the four feature groups
        let vsn_in = g.concat(&[values, times, loc_bcast, code_bcast], 2)?;
        let sel_logits = self.grn(
            g,
            leaves,
            "grn_vs",
            vsn_in,
            dropout_rng.as_deref_mut().map(|r| (rate, r)),
        )?;
        let sel = g.softmax(sel_logits, 2)?;
        let groups = [xi_value, xi_time, xi_loc, xi_code];
        let mut combined: Option<NodeId> = None;
        for (gi, &xi) in groups.iter().enumerate() {
            let w = g.slice(sel, 2, gi, 1)?;
            let term = g.mul(w, xi)?;
            combined = Some(match combined {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let combined = combined.expect("nonempty groups");

        let pos = get("pos_embed");
        let x = g.add(combined, pos)?;
        let x = self.grn(g, leaves, "grn_pre", x, dropout_rng.as_deref_mut().map(|r| (rate, r)))?;

        // causal multi-head self-attention
        let mut mask = vec![0.0; l * l];
        for i in 0..l {
            for j in (i + 1)..l {
                mask[i * l + j] = -1e9;
            }
        }
        let mask = g.leaf(Tensor::from_vec(vec![l, l], mask)?);
        let mut heads = Vec::with_capacity(cfg.attention_heads);
        for h in 0..cfg.attention_heads {
            let q = g.matmul(x, get(&format!("attn.h{h}.wq")))?;
            let k = g.matmul(x, get(&format!("attn.h{h}.wk")))?;
            let v = g.matmul(x, get(&format!("attn.h{h}.wv")))?;
            let scores = g.matmul_ext(q, k, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = g.add(scores, mask)?;
            let attn = g.softmax(scores, 2)?;
            heads.push(g.matmul(attn, v)?);
        }
        let ctx = g.concat(&heads, 2)?;
        let ctx = g.matmul(ctx, get("attn.wo"))?;
        let ctx = g.add(ctx, get("attn.wo_bias"))?;
        let res = g.add(x, ctx)?;
        let ln = g.layer_norm(res, 1e-5)?;
        let ln = g.mul(ln, get("attn.ln_gain"))?;
        let x = g.add(ln, get("attn.ln_bias"))?;

        let x = self.grn(g, leaves, "grn_post", x, dropout_rng.as_deref_mut().map(|r| (rate, r)))?;

        // last window step feeds the quantile heads
        let last = g.select(x, 1, l - 1)?;
        let out = g.matmul(last, get("head.weight"))?;
        g.add(out, get("head.bias"))
    }

    /// Evaluation-mode raw outputs for a batch; `[batch][n_quantiles]`,
    /// unsorted.
    fn predict_raw_batch(&self, input: &BatchInput) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let leaves = self.params.leaves(&mut g);
        let out = self.forward(&mut g, &leaves, input, None)?;
        let nq = self.config.num_quantiles();
        let data = g.value(out).data();
        Ok((0..input.len()).map(|i| data[i * nq..(i + 1) * nq].to_vec()).collect())
    }

    /// Sorted quantile forecast for the step following `origin`, given the
    /// log-count window that ends at `origin`.
    pub fn predict_quantiles(
        &self,
        series: SeriesKey,
        history_window: &[f64],
        origin: i64,
    ) -> Result<QuantileForecast> {
        let l = self.config.lookback;
        if history_window.len() != l {
            return Err(Error::Shape(format!(
                "window length {} does not match lookback {}",
                history_window.len(),
                l
            )));
        }
        let li = self
            .location_index(series.location_id)
            .ok_or_else(|| Error::Validation(format!("unknown location {}", series.location_id)))?;
        let ci = self
            .code_index(series.event_code)
            .ok_or_else(|| Error::Validation(format!("unknown event code {}", series.event_code)))?;
        let times: Vec<f64> =
            (0..l).map(|u| (origin - (l as i64 - 1) + u as i64) as f64).collect();
        let input = BatchInput {
            loc_idx: vec![li],
            code_idx: vec![ci],
            windows: history_window.to_vec(),
            times,
        };
        let mut q = self.predict_raw_batch(&input)?.pop().expect("one row");
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite quantile output".into()));
        }
        sort_quantiles(&mut q);
        Ok(QuantileForecast { series, origin, horizon: 1, q })
    }
}

fn build_batch(
    panel: &EventPanel,
    config: &ForecasterConfig,
    samples: &[(usize, usize, usize)], // (loc_idx, code_idx, origin offset)
) -> (BatchInput, Vec<f64>) {
    let l = config.lookback;
    let mut input = BatchInput {
        loc_idx: Vec::with_capacity(samples.len()),
        code_idx: Vec::with_capacity(samples.len()),
        windows: Vec::with_capacity(samples.len() * l),
        times: Vec::with_capacity(samples.len() * l),
    };
    let mut targets = Vec::with_capacity(samples.len());
    for &(li, ci, t_off) in samples {
        let series = panel.series_by_index(li, ci);
        input.loc_idx.push(li);
        input.code_idx.push(ci);
        for u in 0..l {
            let off = t_off + 1 - l + u;
            input.windows.push(log_transform(series[off], config.epsilon));
            input.times.push((panel.start_index + off as i64) as f64);
        }
        targets.push(log_transform(series[t_off + 1], config.epsilon));
    }
    (input, targets)
}

/// Tape pinball loss of raw head outputs against log-scale targets, averaged
/// over the batch and quantile levels (equal weights).
fn pinball_loss_graph(
    g: &mut Graph,
    out: NodeId,
    targets: &[f64],
    levels: &[f64],
) -> Result<NodeId> {
    let b = targets.len();
    let nq = levels.len();
    let y = g.leaf(Tensor::from_vec(vec![b, 1], targets.to_vec())?);
    let tau = g.leaf(Tensor::from_vec(vec![1, nq], levels.to_vec())?);
    let one_minus_tau =
        g.leaf(Tensor::from_vec(vec![1, nq], levels.iter().map(|t| 1.0 - t).collect())?);
    let diff = g.sub(y, out)?;
    let under = g.relu(diff);
    let neg_diff = g.neg(diff);
    let over = g.relu(neg_diff);
    let a = g.mul(tau, under)?;
    let bterm = g.mul(one_minus_tau, over)?;
    let total = g.add(a, bterm)?;
    Ok(g.mean(total))
}

/// All (loc, code, origin-offset) training samples with a full lookback and a
/// one-step target inside the panel.
fn training_samples(panel: &EventPanel, lookback: usize) -> Vec<(usize, usize, usize)> {
    let t = panel.num_steps();
    let mut samples = Vec::new();
    if t < lookback + 1 {
        return samples;
    }
    for li in 0..panel.num_locations() {
        for ci in 0..panel.num_codes() {
            for t_off in (lookback - 1)..(t - 1) {
                samples.push((li, ci, t_off));
            }
        }
    }
    samples
}

/// Trains the global forecaster on one-step-ahead pinball loss over all
/// series. Deterministic given the config seed. The reported per-epoch loss
/// is a full evaluation-mode pass over the training samples.
pub fn train_forecaster(
    panel: &EventPanel,
    config: &ForecasterConfig,
) -> Result<(ForecasterModel, TrainReport)> {
    config.validate()?;
    if panel.num_steps() < config.lookback + 1 {
        return Err(Error::Config(format!(
            "panel has {} steps; lookback {} needs at least {}",
            panel.num_steps(),
            config.lookback,
            config.lookback + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let loc_ids: Vec<i64> = panel.locations.iter().map(|l| l.id).collect();
    let codes = panel.event_codes.clone();
    let mut model = ForecasterModel::init(config, loc_ids, codes, &mut rng)?;

    let samples = training_samples(panel, config.lookback);
    let n = samples.len();
    let batch = config.batch_size.min(n).max(1);
    let steps_per_epoch = n.div_ceil(batch);

    let mut adam = AdamState::new(model.params.total_scalars());
    let adam_cfg = AdamConfig::with_lr(config.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x00d2_0b0d);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let chosen: Vec<(usize, usize, usize)> =
                (0..batch).map(|_| samples[rng.random_range(0..n)]).collect();
            let (input, targets) = build_batch(panel, config, &chosen);
            let mut g = Graph::new();
            let leaves = model.params.leaves(&mut g);
            let dr = if config.dropout > 0.0 { Some(&mut dropout_rng) } else { None };
            let out = model.forward(&mut g, &leaves, &input, dr)?;
            let loss = pinball_loss_graph(&mut g, out, &targets, &config.quantile_levels)?;
            let loss_v = g.value(loss).scalar_value();
            if !loss_v.is_finite() {
                return Err(Error::Numeric("non-finite training loss".into()));
            }
            let grads = g.backward(loss)?;
            let param_grads: Vec<Tensor> = leaves.iter().map(|id| grads[id.0].clone()).collect();
            model.params.apply_grads(&param_grads, &mut adam, &adam_cfg)?;
        }
        epoch_losses.push(evaluate_loss(&model, panel, &samples)?);
    }
    Ok((model, TrainReport { epoch_losses }))
}

/// Mean pinball loss over `samples` in evaluation mode (no dropout).
fn evaluate_loss(
    model: &ForecasterModel,
    panel: &EventPanel,
    samples: &[(usize, usize, usize)],
) -> Result<f64> {
    let config = &model.config;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(256) {
        let (input, targets) = build_batch(panel, config, chunk);
        let rows = model.predict_raw_batch(&input)?;
        for (row, &y) in rows.iter().zip(&targets) {
            for (&q, &tau) in row.iter().zip(&config.quantile_levels) {
                total += pinball_loss(y, q, tau)?;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// One training residual `log(y + eps) - median forecast` per (series, t)
/// with a full lookback, tagged with the series' spatio-temporal coordinates.
pub fn training_residuals(
    model: &ForecasterModel,
    panel: &EventPanel,
) -> Result<crate::vnngp::ResidualField> {
    let config = &model.config;
    let l = config.lookback;
    if panel.num_steps() < l + 1 {
        return Err(Error::Config("panel shorter than lookback + 1".into()));
    }
    let med = config.median_index();
    let mut entries = Vec::new();
    // batch all (series, t) forward passes
    let samples = training_samples(panel, l);
    for chunk in samples.chunks(256) {
        let (input, targets) = build_batch(panel, config, chunk);
        let rows = model.predict_raw_batch(&input)?;
        for ((&(li, ci, t_off), mut row), &target) in
            chunk.iter().zip(rows.into_iter()).zip(&targets)
        {
            sort_quantiles(&mut row);
            let g_hat = row[med];
            let loc = &panel.locations[li];
            let t_abs = panel.start_index + (t_off + 1) as i64;
            entries.push(crate::vnngp::ResidualEntry {
                location_id: loc.id,
                event_code: panel.event_codes[ci],
                time_index: t_abs,
                point: crate::vnngp::StPoint {
                    latitude: loc.latitude,
                    longitude: loc.longitude,
                    time: t_abs as f64,
                },
                value: target - g_hat,
            });
        }
    }
    Ok(crate::vnngp::ResidualField::new(entries))
}

/// Quantile features over the training range for the sparse-pathway head:
/// returns `(features, targets)` aligned rows for the given series.
pub fn training_quantile_features(
    model: &ForecasterModel,
    panel: &EventPanel,
    series_filter: &[SeriesKey],
) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    let config = &model.config;
    let l = config.lookback;
    let mut features = Vec::new();
    let mut targets_out = Vec::new();
    let wanted: std::collections::BTreeSet<SeriesKey> = series_filter.iter().copied().collect();
    let samples: Vec<(usize, usize, usize)> = training_samples(panel, l)
        .into_iter()
        .filter(|&(li, ci, _)| {
            wanted.contains(&SeriesKey {
                location_id: panel.locations[li].id,
                event_code: panel.event_codes[ci],
            })
        })
        .collect();
    for chunk in samples.chunks(256) {
        let (input, _) = build_batch(panel, config, chunk);
        let rows = model.predict_raw_batch(&input)?;
        for (&(li, ci, t_off), mut row) in chunk.iter().zip(rows.into_iter()) {
            sort_quantiles(&mut row);
            features.push(row);
            targets_out.push(panel.series_by_index(li, ci)[t_off + 1]);
        }
    }
    Ok((features, targets_out))
}
