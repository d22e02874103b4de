//! `llmpred` command-line interface.

mod config;
mod error;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use llmpred::codec::CodecConfig;
use llmpred::data::{load_csv_dataset, max_normalize};
use llmpred::decompose::{select_cutoff, DEFAULT_GRID_HZ};
use llmpred::gateway::{budget, TokenKind, TokenScheme};
use llmpred::pipeline::{run_pipeline, PipelineOutput};
use llmpred::report::{emit_report, write_text, ReportFormat};
use serde_json::json;

use crate::config::CliConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "llmpred",
    version,
    about = "Zero-shot time-series forecasting with language models"
)]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select cutoff frequencies and split channels into low/high parts.
    Decompose(DecomposeArgs),
    /// Token budget per feature count.
    Budget(BudgetArgs),
    /// Run the pipeline and write the report and traces.
    Forecast(RunArgs),
    /// Run the pipeline and write the report in every format.
    Evaluate(RunArgs),
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset feature indices (repeat or comma-separate); all by default.
    #[arg(long, value_delimiter = ',')]
    channel: Vec<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Inclusive alpha range `lo..hi[:step]`, step 0.1 by default.
    #[arg(long)]
    alpha_sweep: Option<String>,
    /// Candidate cutoffs in Hz, comma-separated.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Only use the first H samples of each channel.
    #[arg(long = "h")]
    horizon: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long = "h", default_value_t = 96)]
    horizon: usize,
    /// Inclusive feature-count range `lo..hi`.
    #[arg(long, default_value = "1..10")]
    c_range: String,
    #[arg(long, default_value = "per_char")]
    scheme: String,
    #[arg(long, default_value_t = 4096)]
    limit: usize,
    #[arg(long, default_value_t = 2)]
    decimals: u32,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    channel: Vec<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "h")]
    horizon: Option<usize>,
    /// `mock:<mode>` or `openai-compatible:<url>`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// JSONL response cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    max_windows: Option<usize>,
    #[arg(long)]
    no_refiner: bool,
    #[arg(long)]
    override_budget: bool,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn config_err(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// `lo..hi` inclusive, or a single value.
fn parse_usize_range(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || config_err("c_range", format!("expected lo..hi, got {s:?}"));
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo..=hi).collect())
}

/// `lo..hi[:step]` inclusive; values are snapped to 1e-9 so `0.4..0.8`
/// yields exactly five points.
fn parse_alpha_sweep(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || config_err("alpha_sweep", format!("expected lo..hi[:step], got {s:?}"));
    let (range, step) = match s.split_once(':') {
        Some((r, st)) => (r, st.trim().parse::<f64>().map_err(|_| bad())?),
        None => (s, 0.1),
    };
    let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(step > 0.0) || lo > hi {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    let alphas: Vec<f64> = (0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect();
    for &a in &alphas {
        check_alpha(a)?;
    }
    Ok(alphas)
}

fn check_alpha(a: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(config_err("alpha", format!("must lie in [0, 1], got {a}")))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn cmd_decompose(args: DecomposeArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let p = cfg.pipeline;
    let dataset = args
        .dataset
        .or(p.dataset)
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    let alphas = match (&args.alpha_sweep, args.alpha) {
        (Some(s), _) => parse_alpha_sweep(s)?,
        (None, Some(a)) => vec![a],
        (None, None) => vec![p.alpha],
    };
    for &a in &alphas {
        check_alpha(a)?;
    }
    let grid = if args.grid.is_empty() {
        if p.grid.is_empty() {
            DEFAULT_GRID_HZ.to_vec()
        } else {
            p.grid
        }
    } else {
        args.grid
    };
    let selection = (!args.channel.is_empty()).then_some(args.channel.as_slice());
    let set = load_csv_dataset(&dataset, selection)?;
    let ids: Vec<usize> = match selection {
        Some(s) => s.to_vec(),
        None => (0..set.num_channels()).collect(),
    };

    let mut splits = Vec::new();
    let mut trace = String::from("alpha,channel,f,m_mse,m_cos,m,selected\n");
    for &alpha in &alphas {
        for (series, &id) in set.channels().iter().zip(&ids) {
            let series = match args.horizon {
                Some(h) => series.slice(0, h.min(series.len()))?,
                None => series.clone(),
            };
            let (normalized, _) = max_normalize(&series)?;
            let split = select_cutoff(&normalized, &grid, alpha, &p.filter)?;
            for t in &split.trace {
                trace.push_str(&format!(
                    "{alpha},{id},{},{},{},{},{}\n",
                    t.f,
                    t.m_mse,
                    t.m_cos,
                    t.m.map(|m| m.to_string()).unwrap_or_default(),
                    t.f == split.f_cut
                ));
            }
            splits.push(json!({
                "channel": id,
                "alpha": alpha,
                "f_cut": split.f_cut,
                "len": normalized.len(),
                "trace": split.trace,
                "low": split.low.values(),
                "high": split.high.values(),
            }));
        }
    }
    let doc = json!({ "dataset": dataset, "grid": grid, "splits": splits });
    let text = serde_json::to_string_pretty(&doc).expect("json value");
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_text(&dir.join("decompose.json"), &text)?;
        write_text(&dir.join("decompose_trace.csv"), &trace)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_budget(args: BudgetArgs) -> Result<(), CliError> {
    let kind: TokenKind = args
        .scheme
        .parse()
        .map_err(|m: String| config_err("scheme", m))?;
    if args.limit == 0 {
        return Err(config_err("limit", "must be positive"));
    }
    if args.horizon == 0 {
        return Err(config_err("h", "must be positive"));
    }
    let codec = CodecConfig {
        decimals: args.decimals,
        ..CodecConfig::default()
    };
    codec
        .validate()
        .map_err(|e| config_err("decimals", e.to_string()))?;
    let scheme = TokenScheme {
        kind,
        context_limit: args.limit,
    };
    let mut table = String::from("features,input_tokens,output_tokens,total,limit,feasible\n");
    let mut plot = String::from("x,series,value\n");
    for c in parse_usize_range(&args.c_range)? {
        let b = budget(args.horizon, c, &scheme, &codec);
        table.push_str(&format!(
            "{c},{},{},{},{},{}\n",
            b.input_tokens, b.output_tokens, b.total, b.limit, b.feasible
        ));
        for (series, v) in [
            ("input_tokens", b.input_tokens),
            ("output_tokens", b.output_tokens),
            ("total", b.total),
        ] {
            plot.push_str(&format!("{c},{series},{v}\n"));
        }
    }
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_text(&dir.join("budget.csv"), &table)?;
        write_text(&dir.join("budget_plotdata.csv"), &plot)?;
    }
    print!("{table}");
    Ok(())
}

fn resolve_run_config(args: &RunArgs) -> Result<CliConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let p = &mut cfg.pipeline;
    if let Some(d) = &args.dataset {
        p.dataset = Some(d.clone());
    }
    if !args.channel.is_empty() {
        p.channels = Some(args.channel.clone());
    }
    if let Some(a) = args.alpha {
        p.alpha = a;
    }
    if let Some(h) = args.horizon {
        p.horizon = h;
    }
    if let Some(s) = args.seed {
        p.seed = s;
    }
    if let Some(d) = &args.out_dir {
        p.out_dir = Some(d.clone());
    }
    if let Some(c) = &args.cache {
        p.cache_path = Some(c.clone());
    }
    if let Some(m) = args.max_windows {
        p.max_windows = Some(m);
    }
    if args.no_refiner {
        p.refiner = None;
    }
    if args.override_budget {
        p.override_budget = true;
    }
    if let Some(b) = &args.backend {
        cfg.backend = b.clone();
    }
    if let Some(m) = &args.model {
        cfg.model = m.clone();
    }
    if let Some(k) = &args.api_key_env {
        cfg.api_key_env = k.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run_outputs(
    out: &PipelineOutput,
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<(), CliError> {
    create_dir(dir)?;
    for &f in formats {
        emit_report(&out.report, f, dir)?;
    }
    let traces: String = out
        .traces
        .iter()
        .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
        .collect();
    write_text(&dir.join("traces.jsonl"), &traces)?;
    let summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    write_text(&dir.join("summary.json"), &summary)?;
    Ok(())
}

fn cmd_run(args: RunArgs, evaluate: bool) -> Result<(), CliError> {
    let cfg = resolve_run_config(&args)?;
    if args.print_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).expect("config serializes")
        );
        return Ok(());
    }
    let gateway = cfg.build_gateway()?;
    let out = run_pipeline(&cfg.pipeline, &gateway)?;
    let dir = cfg
        .pipeline
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    let formats: &[ReportFormat] = if evaluate {
        &ReportFormat::ALL
    } else {
        &[ReportFormat::Json]
    };
    write_run_outputs(&out, &dir, formats)?;

    let r = &out.report;
    eprintln!(
        "scored {} of {} windows ({} skipped), {} backend calls, {} cache hits; outputs in {}",
        r.run.windows_scored,
        r.run.windows_total,
        r.run.windows_failed,
        out.summary.backend_calls,
        out.summary.cache_hits,
        dir.display()
    );
    if evaluate {
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "metric,n,mean,std");
        for (name, s) in &r.aggregates.overall {
            let _ = writeln!(stdout, "{name},{},{},{}", s.n, s.mean, s.std);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Decompose(a) => cmd_decompose(a),
        Command::Budget(a) => cmd_budget(a),
        Command::Forecast(a) => cmd_run(a, false),
        Command::Evaluate(a) => cmd_run(a, true),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            let err = CliError::Usage(first.to_string());
            eprintln!("error[{}]: {err}", err.code());
            std::process::exit(err.exit_code());
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error[{}]: {e}", e.code());
        std::process::exit(e.exit_code());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_sweep_points() {
        assert_eq!(
            parse_alpha_sweep("0.4..0.8").unwrap(),
            vec![0.4, 0.5, 0.6, 0.7, 0.8]
        );
        assert_eq!(parse_alpha_sweep("0..1:0.25").unwrap().len(), 5);
        assert!(matches!(
            parse_alpha_sweep("0.5..1.5"),
            Err(CliError::Config { .. })
        ));
        assert!(parse_alpha_sweep("0.8..0.4").is_err());
    }

    #[test]
    fn feature_ranges() {
        assert_eq!(parse_usize_range("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_usize_range("3").unwrap(), vec![3]);
        assert!(parse_usize_range("0..2").is_err());
        assert!(parse_usize_range("x").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
