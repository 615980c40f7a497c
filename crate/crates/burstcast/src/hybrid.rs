//! The full forecasting pipeline: sparsity router, burst gate, pathway
//! combination, variance propagation, and the autoregressive multi-step
//! loop.
//!
//! Per (series, origin) the router inspects the recent zero fraction once and
//! fixes the pathway for the whole horizon. The bursty pathway corrects the
//! forecaster's median with the GP residual mean whenever the gate fires; the
//! sparse pathway replaces the point forecast with the ZINB expectation.
//! For steps beyond the first, the previous step's own count forecast is
//! re-log-transformed and fed back into the input window, and the gate sees
//! it as the last known value.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::forecaster::{
    train_forecaster, training_quantile_features, training_residuals, ForecasterConfig,
    ForecasterModel, TrainReport,
};
use crate::panel::{
    empirical_count_quantile, inverse_log_transform, sparsity_metric, EventPanel, SeriesKey,
};
use crate::vnngp::{fit_vnngp, KernelParams, ResidualField, StPoint, VnngpFitConfig, VnngpModel};
use crate::zinb::{
    train_zinb_head, zinb_point_forecast, zinb_variance, ZinbHeadModel, ZinbTrainConfig,
};

/// Gaussian 95th-percentile z-value used to read a standard deviation off the
/// (q05, q95) spread.
const Z_95: f64 = 1.6449;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pathway {
    Sparse,
    Bursty,
}

impl Pathway {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pathway::Sparse => "sparse",
            Pathway::Bursty => "bursty",
        }
    }
}

/// How the burst gate is driven.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    /// Peaks-over-threshold or predictive-failure conditions on live data.
    Operational,
    /// Fires exactly when the forecast time index is a multiple of `period`
    /// (simulation-only mode for schedule-driven experiments).
    Schedule { period: i64 },
    /// Always corrected (simulation-only stress mode).
    AlwaysOn,
    /// Never corrected; the bursty pathway collapses to the raw forecaster.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Sparse-route threshold on the windowed zero fraction (strict >).
    pub theta_sparse: f64,
    /// Window length for the sparsity metric.
    pub lookback: usize,
    /// Log-transform offset, shared with the forecaster.
    pub epsilon: f64,
    /// Quantile level for the peaks-over-threshold branch.
    pub pot_quantile: f64,
    /// Multiplier in the predictive-failure branch.
    pub failure_factor: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            theta_sparse: 0.9,
            lookback: 16,
            epsilon: 1.0,
            pot_quantile: 0.95,
            failure_factor: 0.7,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.theta_sparse && self.theta_sparse <= 1.0) {
            return Err(Error::Config(format!(
                "theta_sparse {} outside (0, 1]",
                self.theta_sparse
            )));
        }
        if !(0.0 < self.pot_quantile && self.pot_quantile < 1.0) {
            return Err(Error::Config(format!(
                "pot_quantile {} outside (0, 1)",
                self.pot_quantile
            )));
        }
        if !(0.0 < self.failure_factor && self.failure_factor <= 1.0) {
            return Err(Error::Config(format!(
                "failure_factor {} outside (0, 1]",
                self.failure_factor
            )));
        }
        if self.lookback == 0 {
            return Err(Error::Config("router lookback must be >= 1".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Forecast-time behavior switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub router: RouterConfig,
    pub gate_mode: GateMode,
    /// Ignore the router and send every series down the bursty pathway.
    pub force_bursty: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { router: RouterConfig::default(), gate_mode: GateMode::Operational, force_bursty: false }
    }
}

/// One forecast cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub series: SeriesKey,
    pub origin: i64,
    pub horizon: u32,
    /// Count-scale point forecast.
    pub point: f64,
    /// Bursty pathway: variance of the log-intensity. Sparse pathway: the
    /// analytic ZINB count variance (flagged in the manifest).
    pub variance: f64,
    pub pathway: Pathway,
    pub gate: bool,
    /// Forecaster median on the log scale.
    pub median_log: f64,
    /// Applied residual correction (0 when ungated or sparse).
    pub residual: f64,
}

/// Sparse if the zero fraction strictly exceeds the threshold.
pub fn route(sparsity: f64, theta_sparse: f64) -> Pathway {
    if sparsity > theta_sparse {
        Pathway::Sparse
    } else {
        Pathway::Bursty
    }
}

/// Burst indicator: previous value is a historical outlier
/// (`y_prev > q95_hist`) or the forecaster appears to be failing low
/// (`g_hat < log(failure_factor * y_prev + epsilon)`).
pub fn burst_gate(
    y_prev: f64,
    q95_hist: f64,
    g_hat: f64,
    epsilon: f64,
    failure_factor: f64,
) -> bool {
    y_prev > q95_hist || g_hat < (failure_factor * y_prev + epsilon).ln()
}

/// Gated log-intensity `g_hat + B * w_hat`.
pub fn combine_bursty(g_hat: f64, gate: bool, w_hat: f64) -> f64 {
    g_hat + if gate { w_hat } else { 0.0 }
}

/// Variance of the combined log-intensity: quantile-spread variance of the
/// forecaster plus, when gated, the GP predictive variance.
/// `sigma_g = (q_hi - q_lo) / (2 * 1.6449)` with the outermost levels.
pub fn predictive_variance(quantiles: &[f64], gate: bool, s2: f64) -> f64 {
    let spread = quantiles.last().unwrap_or(&0.0) - quantiles.first().unwrap_or(&0.0);
    let sigma_g = spread / (2.0 * Z_95);
    sigma_g * sigma_g + if gate { s2 } else { 0.0 }
}

/// Which residuals stage 2 trains on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ResidualSubset {
    /// All training-range residuals.
    All,
    /// Only residuals at times that are multiples of `period` (the
    /// schedule-driven specialist used by the recurrent-burst experiments).
    SpikeSchedule { period: i64 },
    /// Residuals over an explicit window, possibly beyond the training end;
    /// using future data is flagged as lookahead in the fit summary.
    Window { start: i64, end: i64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub forecaster: ForecasterConfig,
    pub kernel: KernelParams,
    pub vnngp: VnngpFitConfig,
    pub zinb: ZinbTrainConfig,
    pub router: RouterConfig,
    pub residual_subset: ResidualSubset,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            forecaster: ForecasterConfig::default(),
            kernel: KernelParams::default(),
            vnngp: VnngpFitConfig::default(),
            zinb: ZinbTrainConfig::default(),
            router: RouterConfig::default(),
            residual_subset: ResidualSubset::All,
        }
    }
}

/// Everything the forecast loop needs, trained and frozen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridModels {
    pub forecaster: ForecasterModel,
    pub vnngp: Option<VnngpModel>,
    pub zinb: Option<ZinbHeadModel>,
    /// Per-series POT threshold, frozen over the training range.
    pub q95: Vec<(SeriesKey, f64)>,
    pub train_end: i64,
}

impl HybridModels {
    pub fn q95_for(&self, series: SeriesKey) -> Result<f64> {
        self.q95
            .iter()
            .find(|(k, _)| *k == series)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Validation(format!("series {series} missing a POT threshold")))
    }
}

/// Diagnostics from one two-stage fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub forecaster_report: TrainReport,
    pub vnngp_elbo_trace: Vec<f64>,
    pub zinb_epoch_nll: Vec<f64>,
    pub sparse_series: Vec<SeriesKey>,
    pub zinb_skipped: bool,
    pub residual_points: usize,
    /// True when the residual subset reached beyond the training end.
    pub lookahead: bool,
}

/// Stage 1 trains the global forecaster on the training range; stage 2 fits
/// the GP on the forecaster's residual surface and the ZINB head on the
/// router-selected sparse subset.
pub fn two_stage_fit(
    panel: &EventPanel,
    train_end: i64,
    config: &TwoStageConfig,
) -> Result<(HybridModels, FitSummary)> {
    config.router.validate()?;
    let lookback = config.forecaster.lookback;
    let train_steps = train_end - panel.start_index + 1;
    if train_steps < lookback as i64 + 10 {
        return Err(Error::Config(format!(
            "training range of {train_steps} steps is shorter than lookback + 10"
        )));
    }
    let train_panel = panel.truncated(train_end)?;
    let (forecaster, forecaster_report) = train_forecaster(&train_panel, &config.forecaster)?;

    // stage 2a: residual field for the GP
    let (field, lookahead) = match config.residual_subset {
        ResidualSubset::All => (training_residuals(&forecaster, &train_panel)?, false),
        ResidualSubset::SpikeSchedule { period } => {
            if period <= 0 {
                return Err(Error::Config("spike period must be positive".into()));
            }
            let all = training_residuals(&forecaster, &train_panel)?;
            let entries: Vec<_> = all
                .entries()
                .iter()
                .filter(|e| e.time_index % period == 0)
                .cloned()
                .collect();
            (ResidualField::new(entries), false)
        }
        ResidualSubset::Window { start, end } => {
            if end < start {
                return Err(Error::Config(format!("residual window {start}..{end} is empty")));
            }
            let scope = panel.truncated(end.min(panel.end_index()))?;
            let all = training_residuals(&forecaster, &scope)?;
            let entries: Vec<_> = all
                .entries()
                .iter()
                .filter(|e| e.time_index >= start && e.time_index <= end)
                .cloned()
                .collect();
            (ResidualField::new(entries), end > train_end)
        }
    };
    let residual_points = field.len();
    let (vnngp, vnngp_elbo_trace) = if field.is_empty() {
        (None, Vec::new())
    } else {
        let (model, trace) = fit_vnngp(&field, config.kernel, &config.vnngp)?;
        (Some(model), trace)
    };

    // stage 2b: ZINB head on the sparse subset (training-range sparsity)
    let train_off_end = (train_end - panel.start_index) as usize;
    let mut sparse_series = Vec::new();
    for key in train_panel.series_keys() {
        let counts = train_panel.series(key)?;
        let s = sparsity_metric(&counts[..=train_off_end])?;
        if route(s, config.router.theta_sparse) == Pathway::Sparse {
            sparse_series.push(key);
        }
    }
    let (zinb, zinb_epoch_nll, zinb_skipped) = if sparse_series.is_empty() {
        (None, Vec::new(), true)
    } else {
        let (features, targets) =
            training_quantile_features(&forecaster, &train_panel, &sparse_series)?;
        let set = crate::zinb::ZinbTrainingSet { features, targets };
        let (head, nlls) = train_zinb_head(&set, &config.zinb)?;
        (Some(head), nlls, false)
    };

    // frozen POT thresholds
    let mut q95 = Vec::new();
    for key in train_panel.series_keys() {
        let counts = train_panel.series(key)?;
        let q = empirical_count_quantile(&counts[..=train_off_end], config.router.pot_quantile)?;
        q95.push((key, q));
    }

    let models = HybridModels { forecaster, vnngp, zinb, q95, train_end };
    let summary = FitSummary {
        forecaster_report,
        vnngp_elbo_trace,
        zinb_epoch_nll,
        sparse_series,
        zinb_skipped,
        residual_points,
        lookahead,
    };
    Ok((models, summary))
}

fn history_window(
    panel: &EventPanel,
    series: SeriesKey,
    origin: i64,
    lookback: usize,
) -> Result<Vec<u32>> {
    let counts = panel.series(series)?;
    let t_off = origin - panel.start_index;
    if t_off < lookback as i64 - 1 || t_off >= panel.num_steps() as i64 {
        return Err(Error::Config(format!(
            "origin {origin} leaves less than {lookback} steps of history"
        )));
    }
    let t_off = t_off as usize;
    Ok(counts[t_off + 1 - lookback..=t_off].to_vec())
}

/// H-step autoregressive forecast for one series from one origin. Step 1 uses
/// true history; later steps feed the previous forecast back into the window.
/// The pathway is chosen once per (series, origin).
pub fn forecast_series(
    models: &HybridModels,
    panel: &EventPanel,
    series: SeriesKey,
    origin: i64,
    horizon: u32,
    config: &PipelineConfig,
) -> Result<Vec<ForecastRecord>> {
    config.router.validate()?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    let eps = config.router.epsilon;
    let f_lookback = models.forecaster.config.lookback;

    // route once per (series, origin) on the recent zero fraction
    let router_window = history_window(panel, series, origin, config.router.lookback)?;
    let sparsity = sparsity_metric(&router_window)?;
    let mut pathway =
        if config.force_bursty { Pathway::Bursty } else { route(sparsity, config.router.theta_sparse) };
    if pathway == Pathway::Sparse && models.zinb.is_none() {
        // no head was trained (no sparse series at fit time): fall back
        pathway = Pathway::Bursty;
    }

    let counts_window = history_window(panel, series, origin, f_lookback)?;
    let mut window_logs: Vec<f64> =
        counts_window.iter().map(|&y| crate::panel::log_transform(y, eps)).collect();
    let mut y_prev: f64 = *counts_window.last().unwrap() as f64;
    let q95 = models.q95_for(series)?;
    let location = panel
        .location(series.location_id)
        .ok_or_else(|| Error::Validation(format!("unknown location {}", series.location_id)))?;
    let (lat, lon) = (location.latitude, location.longitude);

    let mut records = Vec::with_capacity(horizon as usize);
    for h in 1..=horizon {
        let target_time = origin + h as i64;
        let qf = models.forecaster.predict_quantiles(series, &window_logs, target_time - 1)?;
        let g_hat = qf.median(&models.forecaster.config);

        let record = match pathway {
            Pathway::Sparse => {
                let head = models.zinb.as_ref().expect("sparse pathway requires a head");
                let params = head.predict(&qf.q)?;
                ForecastRecord {
                    series,
                    origin,
                    horizon: h,
                    point: zinb_point_forecast(&params),
                    variance: zinb_variance(&params),
                    pathway: Pathway::Sparse,
                    gate: false,
                    median_log: g_hat,
                    residual: 0.0,
                }
            }
            Pathway::Bursty => {
                let gate = match config.gate_mode {
                    GateMode::Off => false,
                    GateMode::AlwaysOn => models.vnngp.is_some(),
                    GateMode::Schedule { period } => {
                        models.vnngp.is_some() && target_time % period == 0
                    }
                    GateMode::Operational => {
                        models.vnngp.is_some()
                            && burst_gate(y_prev, q95, g_hat, eps, config.router.failure_factor)
                    }
                };
                let (w_hat, s2) = if gate {
                    let gp = models.vnngp.as_ref().expect("gate requires a fitted GP");
                    gp.predict_residual(&StPoint {
                        latitude: lat,
                        longitude: lon,
                        time: target_time as f64,
                    })?
                } else {
                    (0.0, 0.0)
                };
                let mu = combine_bursty(g_hat, gate, w_hat);
                ForecastRecord {
                    series,
                    origin,
                    horizon: h,
                    point: inverse_log_transform(mu, eps),
                    variance: predictive_variance(&qf.q, gate, s2),
                    pathway: Pathway::Bursty,
                    gate,
                    median_log: g_hat,
                    residual: if gate { w_hat } else { 0.0 },
                }
            }
        };

        // feed the forecast back as the newest window entry
        window_logs.rotate_left(1);
        let last = window_logs.len() - 1;
        window_logs[last] = (record.point + eps).ln();
        y_prev = record.point;
        records.push(record);
    }
    Ok(records)
}

/// Standalone forecaster baseline: the raw median quantile inverted to the
/// count scale, with the same autoregressive feedback. Kept as an
/// independent code path so the hybrid's ungated equivalence can be checked
/// against it.
pub fn forecaster_only_series(
    models: &HybridModels,
    panel: &EventPanel,
    series: SeriesKey,
    origin: i64,
    horizon: u32,
    router: &RouterConfig,
) -> Result<Vec<ForecastRecord>> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    let eps = router.epsilon;
    let f_lookback = models.forecaster.config.lookback;
    let counts_window = history_window(panel, series, origin, f_lookback)?;
    let mut window_logs: Vec<f64> =
        counts_window.iter().map(|&y| crate::panel::log_transform(y, eps)).collect();
    let mut records = Vec::with_capacity(horizon as usize);
    for h in 1..=horizon {
        let target_time = origin + h as i64;
        let qf = models.forecaster.predict_quantiles(series, &window_logs, target_time - 1)?;
        let g_hat = qf.median(&models.forecaster.config);
        let point = inverse_log_transform(g_hat, eps);
        records.push(ForecastRecord {
            series,
            origin,
            horizon: h,
            point,
            variance: predictive_variance(&qf.q, false, 0.0),
            pathway: Pathway::Bursty,
            gate: false,
            median_log: g_hat,
            residual: 0.0,
        });
        window_logs.rotate_left(1);
        let last = window_logs.len() - 1;
        window_logs[last] = (point + eps).ln();
    }
    Ok(records)
}

/// Writes records in the forecast CSV schema
/// `location_id,event_code,origin,horizon,point,variance,pathway,gate`.
pub fn write_forecast_csv(records: &[ForecastRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "location_id,event_code,origin,horizon,point,variance,pathway,gate")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.series.location_id,
            r.series.event_code,
            r.origin,
            r.horizon,
            r.point,
            r.variance,
            r.pathway.as_str(),
            u8::from(r.gate)
        )?;
    }
    Ok(())
}
