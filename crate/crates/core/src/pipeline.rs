//! End-to-end forecasting and evaluation over sliding windows.
//!
//! For every window and channel the history is max-normalized and split
//! into low and high frequency parts. Each part is normalized again and
//! serialized (all channels interleaved in one prompt), the backend
//! continues both prompts, and the parsed rows are mapped back, refined,
//! recombined and scored against the normalized target.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{
    build_prompt, parse_output, ChannelOffset, CodecConfig, DroppedRow, Layout, ParseReport,
};
use crate::data::{
    load_csv_dataset, max_normalize, split_windows, ChannelSet, DataError, NormState, Series,
    Window,
};
use crate::decompose::{
    decompose_at, select_cutoff, CutoffTrial, FilterSpec, DEFAULT_ALPHA, DEFAULT_GRID_HZ,
};
use crate::gateway::{budget, count_tokens, Gateway, GenParams, TokenScheme};
use crate::metrics::{ks_statistic, mae, mse};
use crate::postprocess::{
    gaussian_match, recombine, refine_low, train_refiner, PostprocessError, RefinerConfig,
    RefinerModel,
};
use crate::report::{
    Aggregates, EvalReport, LatencyStats, RefinerStatus, RunMetadata, SweepPoint, WindowFailure,
    WindowRecord, SCHEMA_VERSION,
};

/// Multivariate runs use at most this many leading channels by default.
pub const DEFAULT_CHANNELS: usize = 6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("prompt for H={horizon}, C={features} needs {needed} tokens, over the {limit}-token context (set override_budget to run anyway)")]
    BudgetExceeded {
        horizon: usize,
        features: usize,
        needed: usize,
        limit: usize,
    },
}

fn config_err(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSettings {
    pub config: RefinerConfig,
    /// Leading share of the windows whose predictions become training pairs
    /// instead of being scored.
    pub calibration_fraction: f64,
}

impl Default for RefinerSettings {
    fn default() -> Self {
        Self {
            config: RefinerConfig::default(),
            calibration_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    /// Dataset feature indices; defaults to the first [`DEFAULT_CHANNELS`].
    pub channels: Option<Vec<usize>>,
    pub horizon: usize,
    /// Window step; defaults to the horizon (non-overlapping targets).
    pub stride: Option<usize>,
    pub max_windows: Option<usize>,
    pub alpha: f64,
    pub grid: Vec<f64>,
    /// Filter shape; its cutoff is replaced by the selected grid value.
    pub filter: FilterSpec,
    pub decimals: u32,
    pub token_scheme: TokenScheme,
    pub override_budget: bool,
    pub gen: GenParams,
    /// Set `max_tokens` to the prompt's token count for every call.
    pub auto_max_tokens: bool,
    pub refiner: Option<RefinerSettings>,
    pub gaussian_match: bool,
    pub seed: u64,
    pub cache_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            channels: None,
            horizon: 96,
            stride: None,
            max_windows: None,
            alpha: DEFAULT_ALPHA,
            grid: DEFAULT_GRID_HZ.to_vec(),
            filter: FilterSpec::default(),
            decimals: 2,
            token_scheme: TokenScheme::per_char(4096),
            override_budget: false,
            gen: GenParams::default(),
            auto_max_tokens: true,
            refiner: Some(RefinerSettings::default()),
            gaussian_match: true,
            seed: 0,
            cache_path: None,
            out_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err(
                "alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if self.filter.order == 0 {
            return Err(config_err("filter.order", "must be >= 1"));
        }
        if !(self.filter.sample_rate_hz.is_finite() && self.filter.sample_rate_hz > 0.0) {
            return Err(config_err("filter.sample_rate_hz", "must be positive"));
        }
        if self.horizon < self.filter.min_len() {
            return Err(config_err(
                "horizon",
                format!(
                    "must be at least {} for an order-{} filter",
                    self.filter.min_len(),
                    self.filter.order
                ),
            ));
        }
        if self.stride == Some(0) {
            return Err(config_err("stride", "must be >= 1"));
        }
        if self.grid.is_empty() {
            return Err(config_err("grid", "must not be empty"));
        }
        let nyquist = self.filter.sample_rate_hz / 2.0;
        if let Some(f) = self.grid.iter().find(|&&f| !(f > 0.0 && f < nyquist)) {
            return Err(config_err(
                "grid",
                format!("cutoff {f} Hz is outside (0, {nyquist})"),
            ));
        }
        if !(1..=2).contains(&self.decimals) {
            return Err(config_err(
                "decimals",
                format!("must be 1 or 2, got {}", self.decimals),
            ));
        }
        if self.token_scheme.context_limit == 0 {
            return Err(config_err("token_scheme.context_limit", "must be positive"));
        }
        if let Some(ch) = &self.channels {
            if ch.is_empty() {
                return Err(config_err("channels", "must not be empty"));
            }
        }
        self.gen
            .validate()
            .map_err(|e| config_err("gen", e.to_string()))?;
        if let Some(r) = &self.refiner {
            if !(r.calibration_fraction > 0.0 && r.calibration_fraction < 1.0) {
                return Err(config_err(
                    "refiner.calibration_fraction",
                    format!("must lie in (0, 1), got {}", r.calibration_fraction),
                ));
            }
            self.refiner_config()
                .expect("refiner present")
                .validate()
                .map_err(|e| config_err("refiner.config", e.to_string()))?;
        }
        Ok(())
    }

    /// Refiner config with horizon and seed taken from the run.
    pub fn refiner_config(&self) -> Option<RefinerConfig> {
        self.refiner.as_ref().map(|r| RefinerConfig {
            horizon: self.horizon,
            seed: self.seed,
            ..r.config.clone()
        })
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            decimals: self.decimals,
            ..CodecConfig::default()
        }
    }

    /// SHA-256 of the config with output locations removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.cache_path = None;
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Per-channel preparation shared by generation and scoring.
struct ChannelPrep {
    state: NormState,
    hist_high: Series,
    target_n: Vec<f64>,
    target_raw: Vec<f64>,
    f_cut: f64,
    trace: Vec<CutoffTrial>,
    low_n: Series,
    low_state: Option<NormState>,
    high_n: Series,
    high_state: Option<NormState>,
}

struct WindowGen {
    prep: Vec<ChannelPrep>,
    low: ParseReport,
    high: ParseReport,
    latency_ms: [f64; 2],
    cached: [bool; 2],
}

impl WindowGen {
    fn valid_prefix(&self) -> usize {
        self.low.valid_rows.min(self.high.valid_rows)
    }

    /// Predicted low component of channel `c` in history-normalized units.
    fn pred_low(&self, c: usize, n: usize) -> Vec<f64> {
        component(&self.low, c, n, self.prep[c].low_state.as_ref())
    }

    fn pred_high(&self, c: usize, n: usize) -> Vec<f64> {
        component(&self.high, c, n, self.prep[c].high_state.as_ref())
    }
}

fn component(parse: &ParseReport, c: usize, n: usize, state: Option<&NormState>) -> Vec<f64> {
    match state {
        Some(s) => s.invert(&parse.column(c)[..n]),
        // the component was identically zero
        None => vec![0.0; n],
    }
}

/// Per-window diagnostics kept outside the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub channel: usize,
    pub f_cut: f64,
    pub cutoff_trace: Vec<CutoffTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub window: usize,
    pub offset: usize,
    pub calibration: bool,
    pub channels: Vec<ChannelTrace>,
    pub low_dropped: Vec<DroppedRow>,
    pub high_dropped: Vec<DroppedRow>,
    pub latency_ms: [f64; 2],
    pub cached: [bool; 2],
    pub error: Option<String>,
}

/// Gateway activity during one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub windows_failed: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub traces: Vec<WindowTrace>,
    pub summary: RunSummary,
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(i, item);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Normalizes a component for its prompt; `None` state for an all-zero one.
fn normalize_component(s: &Series) -> (Series, Option<NormState>) {
    match max_normalize(s) {
        Ok((n, st)) => (n, Some(st)),
        Err(_) => (s.clone(), None),
    }
}

fn prepare_channel(
    hist: &Series,
    target: &Series,
    cfg: &PipelineConfig,
) -> Result<ChannelPrep, (String, String)> {
    let (hist_n, state) =
        max_normalize(hist).map_err(|e| ("normalize".to_string(), e.to_string()))?;
    let split = select_cutoff(&hist_n, &cfg.grid, cfg.alpha, &cfg.filter)
        .map_err(|e| ("decompose".to_string(), e.to_string()))?;
    let (low_n, low_state) = normalize_component(&split.low);
    let (high_n, high_state) = normalize_component(&split.high);
    Ok(ChannelPrep {
        state,
        target_n: state.apply(target.values()),
        target_raw: target.values().to_vec(),
        hist_high: split.high,
        f_cut: split.f_cut,
        trace: split.trace,
        low_n,
        low_state,
        high_n,
        high_state,
    })
}

fn generate_window(
    w: &Window,
    cfg: &PipelineConfig,
    gateway: &Gateway,
) -> Result<WindowGen, (String, String)> {
    let prep = w
        .history
        .channels()
        .iter()
        .zip(w.target.channels())
        .map(|(h, t)| prepare_channel(h, t, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let c = prep.len();
    let layout = if c == 1 {
        Layout::Univariate
    } else {
        Layout::Multivariate
    };
    let offsets = ChannelOffset::default_set(c, cfg.decimals);
    let codec = cfg.codec();
    let mut parsed = Vec::with_capacity(2);
    let mut latency_ms = [0.0; 2];
    let mut cached = [false; 2];
    let picks: [fn(&ChannelPrep) -> Series; 2] = [|p| p.low_n.clone(), |p| p.high_n.clone()];
    for (k, pick) in picks.into_iter().enumerate() {
        let set = ChannelSet::new(prep.iter().map(pick).collect())
            .map_err(|e| ("prompt".to_string(), e.to_string()))?;
        let prompt = build_prompt(&set, &offsets, layout, &codec)
            .map_err(|e| ("prompt".to_string(), e.to_string()))?;
        let mut params = GenParams {
            seed: cfg.seed,
            ..cfg.gen
        };
        if cfg.auto_max_tokens {
            params.max_tokens = count_tokens(&prompt.text(), cfg.token_scheme.kind).max(1) as u32;
        }
        let g = gateway
            .generate(&prompt, &params, cfg.override_budget)
            .map_err(|e| ("generate".to_string(), e.to_string()))?;
        latency_ms[k] = g.latency_ms;
        cached[k] = g.cached;
        parsed.push(parse_output(&g.text, c, &offsets, cfg.horizon, &codec));
    }
    let high = parsed.pop().expect("two components");
    let low = parsed.pop().expect("two components");
    Ok(WindowGen {
        prep,
        low,
        high,
        latency_ms,
        cached,
    })
}

/// Truth low component of the target, split at the history's cutoff.
fn target_parts(p: &ChannelPrep, cfg: &PipelineConfig) -> Option<(Vec<f64>, Vec<f64>)> {
    let t = Series::new(p.target_n.clone(), 0).ok()?;
    let (low, high) = decompose_at(&t, &cfg.filter.with_cutoff(p.f_cut)).ok()?;
    Some((low.into_values(), high.into_values()))
}

fn score_window(
    index: usize,
    w: &Window,
    g: &WindowGen,
    channel_ids: &[usize],
    refiner: Option<&RefinerModel>,
    cfg: &PipelineConfig,
) -> Result<Vec<WindowRecord>, (String, String)> {
    let n = g.valid_prefix();
    if n == 0 {
        return Err((
            "parse".to_string(),
            format!(
                "no valid rows (low: {} dropped, high: {} dropped)",
                g.low.dropped_rows, g.high.dropped_rows
            ),
        ));
    }
    let fail = |stage: &str, e: &dyn std::fmt::Display| (stage.to_string(), e.to_string());
    let mut out = Vec::with_capacity(g.prep.len());
    for (c, p) in g.prep.iter().enumerate() {
        let mut low = Series::new(g.pred_low(c, n), c).map_err(|e| fail("parse", &e))?;
        let mut refined = false;
        if let Some(model) = refiner {
            if n == cfg.horizon {
                low = refine_low(model, &low).map_err(|e| fail("refine", &e))?;
                refined = true;
            }
        }
        let mut high = Series::new(g.pred_high(c, n), c).map_err(|e| fail("parse", &e))?;
        let mut matched = false;
        if cfg.gaussian_match {
            match gaussian_match(&high, &p.hist_high) {
                Ok(m) => {
                    high = m;
                    matched = true;
                }
                Err(PostprocessError::DegeneratePrediction { sigma }) => {
                    log::debug!("window {index} channel {c}: high component left as predicted (sigma {sigma})");
                }
                Err(e) => return Err(fail("gaussian_match", &e)),
            }
        }
        let forecast = recombine(&low, &high).map_err(|e| fail("recombine", &e))?;
        let truth = &p.target_n[..n];
        let raw = p.state.invert(forecast.values());
        let parts = target_parts(p, cfg);
        let metric =
            |r: Result<f64, _>| r.map_err(|e: crate::metrics::MetricsError| fail("metrics", &e));
        out.push(WindowRecord {
            window: index,
            offset: w.offset,
            channel: channel_ids[c],
            f_cut: p.f_cut,
            valid_rows: n,
            dropped_rows: g.low.dropped_rows + g.high.dropped_rows,
            short: n < cfg.horizon,
            refined,
            gaussian_matched: matched,
            mse: metric(mse(forecast.values(), truth))?,
            mae: metric(mae(forecast.values(), truth))?,
            mse_low: parts
                .as_ref()
                .map(|(l, _)| mse(low.values(), &l[..n]))
                .transpose()
                .ok()
                .flatten(),
            mae_low: parts
                .as_ref()
                .map(|(l, _)| mae(low.values(), &l[..n]))
                .transpose()
                .ok()
                .flatten(),
            ks_high: parts
                .as_ref()
                .map(|(_, h)| ks_statistic(high.values(), &h[..n]))
                .transpose()
                .ok()
                .flatten(),
            mse_raw: metric(mse(&raw, &p.target_raw[..n]))?,
            mae_raw: metric(mae(&raw, &p.target_raw[..n]))?,
        });
    }
    Ok(out)
}

/// Loads the configured dataset and runs the pipeline on it.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    gateway: &Gateway,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("dataset", "no dataset path given"))?;
    let (set, ids) = match &cfg.channels {
        Some(ids) => (load_csv_dataset(path, Some(ids))?, ids.clone()),
        None => {
            let all = load_csv_dataset(path, None)?;
            let ids: Vec<usize> = (0..all.num_channels().min(DEFAULT_CHANNELS)).collect();
            (all.select(&ids)?, ids)
        }
    };
    run_on_set(cfg, &set, &ids, gateway)
}

/// Runs the pipeline on an in-memory channel set; `channel_ids` labels the
/// channels in the report.
pub fn run_on_set(
    cfg: &PipelineConfig,
    set: &ChannelSet,
    channel_ids: &[usize],
    gateway: &Gateway,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    if channel_ids.len() != set.num_channels() {
        return Err(config_err("channels", "one id per channel is required"));
    }
    let h = cfg.horizon;
    let mut windows = split_windows(set, h, cfg.stride.unwrap_or(h))?;
    if let Some(max) = cfg.max_windows {
        windows.truncate(max);
    }
    let need = budget(h, set.num_channels(), &cfg.token_scheme, &cfg.codec());
    if !need.feasible && !cfg.override_budget {
        return Err(PipelineError::BudgetExceeded {
            horizon: h,
            features: set.num_channels(),
            needed: need.total,
            limit: need.limit,
        });
    }

    let calls_before = gateway.backend_calls();
    let hits_before = gateway.cache_hits();
    let generated = par_map(&windows, gateway.max_in_flight(), |_, w| {
        generate_window(w, cfg, gateway)
    });

    let refiner_cfg = cfg.refiner_config();
    let calibration = match &cfg.refiner {
        Some(r) => (windows.len() as f64 * r.calibration_fraction).floor() as usize,
        None => 0,
    };
    let mut status = RefinerStatus {
        enabled: refiner_cfg.is_some(),
        trained: false,
        calibration_windows: calibration,
        train_pairs: 0,
        final_val_loss: None,
        note: None,
    };
    let mut model = None;
    if let Some(rcfg) = &refiner_cfg {
        let mut pairs = Vec::new();
        for g in generated[..calibration].iter().flatten() {
            if g.valid_prefix() < h {
                continue;
            }
            for (c, p) in g.prep.iter().enumerate() {
                if let Some((truth, _)) = target_parts(p, cfg) {
                    let pred = Series::new(g.pred_low(c, h), c);
                    let truth = Series::new(truth, c);
                    if let (Ok(pred), Ok(truth)) = (pred, truth) {
                        pairs.push((pred, truth));
                    }
                }
            }
        }
        status.train_pairs = pairs.len();
        match train_refiner(&pairs, rcfg) {
            Ok((m, log)) => {
                status.trained = true;
                status.final_val_loss = Some(log.final_val_loss());
                model = Some(m);
            }
            Err(e) => {
                log::warn!("refiner not trained: {e}");
                status.note = Some(format!("refiner not trained: {e}"));
            }
        }
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::with_capacity(windows.len());
    let mut latencies = Vec::new();
    for (i, (w, g)) in windows.iter().zip(&generated).enumerate() {
        let is_cal = i < calibration;
        let mut trace = WindowTrace {
            window: i,
            offset: w.offset,
            calibration: is_cal,
            channels: Vec::new(),
            low_dropped: Vec::new(),
            high_dropped: Vec::new(),
            latency_ms: [0.0; 2],
            cached: [false; 2],
            error: None,
        };
        let scored = match g {
            Ok(g) => {
                latencies.extend(g.latency_ms);
                trace.channels = g
                    .prep
                    .iter()
                    .enumerate()
                    .map(|(c, p)| ChannelTrace {
                        channel: channel_ids[c],
                        f_cut: p.f_cut,
                        cutoff_trace: p.trace.clone(),
                    })
                    .collect();
                trace.low_dropped = g.low.dropped_reasons.clone();
                trace.high_dropped = g.high.dropped_reasons.clone();
                trace.latency_ms = g.latency_ms;
                trace.cached = g.cached;
                if is_cal {
                    Ok(Vec::new())
                } else {
                    score_window(i, w, g, channel_ids, model.as_ref(), cfg)
                }
            }
            Err(e) => Err(e.clone()),
        };
        match scored {
            Ok(r) => records.extend(r),
            Err((stage, message)) => {
                log::warn!("window {i} ({stage}): {message}");
                trace.error = Some(format!("{stage}: {message}"));
                failures.push(WindowFailure {
                    window: i,
                    offset: w.offset,
                    stage,
                    message,
                });
            }
        }
        traces.push(trace);
    }

    let windows_failed = failures.len();
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        run: RunMetadata {
            config_hash: cfg.hash(),
            backend_id: gateway.backend_id(),
            seed: cfg.seed,
            horizon: h,
            alpha: cfg.alpha,
            channels: channel_ids.to_vec(),
            windows_total: windows.len(),
            windows_scored: windows.len()
                - calibration.min(windows.len())
                - failures.iter().filter(|f| f.window >= calibration).count(),
            windows_failed,
            refiner: status,
            latency: LatencyStats::of(&latencies),
        },
        aggregates: Aggregates::compute(&records),
        windows: records,
        failures,
    };
    Ok(PipelineOutput {
        report,
        traces,
        summary: RunSummary {
            backend_calls: gateway.backend_calls() - calls_before,
            cache_hits: gateway.cache_hits() - hits_before,
            windows_failed,
        },
    })
}

/// Valid output lines for the first window's normalized history at each
/// feature count, once per gateway.
pub fn valid_lines_sweep(
    set: &ChannelSet,
    horizon: usize,
    feature_counts: &[usize],
    gateways: &[&Gateway],
    params: &GenParams,
    codec: &CodecConfig,
) -> Result<Vec<SweepPoint>, PipelineError> {
    let mut points = Vec::new();
    for &c in feature_counts {
        if c == 0 || c > set.num_channels() {
            return Err(config_err(
                "features",
                format!("feature count {c} outside 1..={}", set.num_channels()),
            ));
        }
        let ids: Vec<usize> = (0..c).collect();
        let w = split_windows(&set.select(&ids)?, horizon, horizon)?.remove(0);
        let hist = w
            .history
            .channels()
            .iter()
            .map(|s| max_normalize(s).map(|(n, _)| n))
            .collect::<Result<Vec<_>, _>>()?;
        let layout = if c == 1 {
            Layout::Univariate
        } else {
            Layout::Multivariate
        };
        let offsets = ChannelOffset::default_set(c, codec.decimals);
        let prompt = build_prompt(&ChannelSet::new(hist)?, &offsets, layout, codec)
            .map_err(|e| config_err("codec", e.to_string()))?;
        for gw in gateways {
            let valid = match gw.generate(&prompt, params, true) {
                Ok(g) => parse_output(&g.text, c, &offsets, horizon, codec).valid_rows,
                Err(e) => {
                    log::warn!("sweep C={c} on {}: {e}", gw.backend_id());
                    0
                }
            };
            points.push(SweepPoint {
                features: c,
                backend: gw.backend_id(),
                valid_lines: valid,
                expected_lines: horizon,
            });
        }
    }
    Ok(points)
}
