//! `bicb`: generate traffic, run experiments, train predictors, run the
//! property suites and export plot data.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use bicb_core::harness::experiment::{write_report, Method, Setting, TrafficKind};
use bicb_core::harness::{
    load_traffic, plot_rows, prepare_periods, read_episode_log, run_experiment_on, run_suites,
    synthetic_periods, write_campaigns, write_episode_log, write_plot, write_traffic_file, ExperimentConfig, LoadOptions, SynthConfig,
    VerifyConfig,
};
use bicb_core::model::{Campaign, DualVars};
use bicb_core::predictor::{
    predict_remaining, train_empirical_with_ids, write_logs, ModelMetadata, PredictorModel,
};

#[derive(Debug, Parser)]
#[command(name = "bicb", version, about = "Constrained auto-bidding laboratory")]
struct Cli {
    /// Random seed.
    #[arg(long, global = true, env = "BICB_SEED", default_value_t = 0)]
    seed: u64,
    /// Directory for outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// TOML settings for the subcommand (generator, experiment or suite
    /// settings); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic traffic as CSV.
    Generate(GenerateArgs),
    /// Run methods on campaigns and write the report and episode logs.
    Simulate(SimulateArgs),
    /// Fit the empirical predictor on traffic periods and write its metadata.
    Train(TrainArgs),
    /// Run the randomized property suites; exits nonzero on any failure.
    Verify(VerifyArgs),
    /// Turn episode logs into per-episode time series CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Impressions per period.
    #[arg(long)]
    n: Option<usize>,
    /// Steps per period.
    #[arg(long)]
    steps: Option<u32>,
    /// Number of periods (`day-1`, `day-2`, ...).
    #[arg(long, default_value_t = 1)]
    periods: u32,
    /// Output file [default: <out-dir>/traffic.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// `bcb` (budget only) or `bicb` (budget and CPC bounds).
    #[arg(long)]
    setting: Option<Setting>,
    /// Comma-separated methods: manual, pid, online_lp, bicb, bicb_star,
    /// offline_lp [default: all].
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Traffic CSV; synthetic traffic is generated when absent.
    #[arg(long)]
    traffic: Option<PathBuf>,
    /// Period of the traffic file to evaluate [default: the last].
    #[arg(long)]
    test_period: Option<String>,
    /// Comma-separated training periods of the traffic file [default: all
    /// others].
    #[arg(long, value_delimiter = ',')]
    train_periods: Option<Vec<String>>,
    /// Impressions per synthetic period.
    #[arg(long)]
    n: Option<usize>,
    /// Steps per period.
    #[arg(long)]
    steps: Option<u32>,
    /// Number of campaigns.
    #[arg(long)]
    campaigns: Option<usize>,
    /// Volume calibration of the empirical predictor.
    #[arg(long)]
    calibration: Option<f64>,
    /// Model metadata from `train`; supplies calibration and training
    /// periods.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Traffic CSV.
    #[arg(long)]
    traffic: PathBuf,
    /// Steps per period.
    #[arg(long, default_value_t = 48)]
    steps: u32,
    /// Comma-separated periods to train on [default: all but the evaluation
    /// period].
    #[arg(long, value_delimiter = ',')]
    periods: Option<Vec<String>>,
    /// Volume calibration.
    #[arg(long, default_value_t = 1.0)]
    calibration: f64,
    /// Held-out period: prints predicted vs actual total cost.
    #[arg(long)]
    eval_period: Option<String>,
    /// Output file [default: <out-dir>/model.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Instances in the greedy gap and LP suites.
    #[arg(long)]
    instances: Option<usize>,
    /// Largest brute-force instance.
    #[arg(long)]
    max_n: Option<usize>,
    /// Instances in the monotonicity suite.
    #[arg(long)]
    monotone_instances: Option<usize>,
    /// Grid points per monotonicity sweep.
    #[arg(long)]
    grid: Option<usize>,
    /// Solves in the convergence suite.
    #[arg(long)]
    solves: Option<usize>,
    /// Campaigns in the positivity suite.
    #[arg(long)]
    positivity_campaigns: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Episode log directory [default: <out-dir>/episodes].
    #[arg(long)]
    episodes: Option<PathBuf>,
    /// Output directory [default: <out-dir>/plots].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate(a) => generate(&cli, a),
        Command::Simulate(a) => simulate(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Verify(a) => verify(&cli, a),
        Command::Report(a) => report(&cli, a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_toml<T: DeserializeOwned>(path: &Option<PathBuf>) -> Result<Option<T>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<ExitCode> {
    let mut synth: SynthConfig = read_toml(&cli.config)?.unwrap_or_else(|| ExperimentConfig::default().synth);
    if let Some(n) = a.n {
        synth.n_impressions = n;
    }
    if let Some(s) = a.steps {
        synth.n_steps = s;
    }
    if a.periods == 0 {
        bail!("--periods must be positive");
    }
    let periods = synthetic_periods(&synth, cli.seed, a.periods)?;
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("traffic.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_traffic_file(&out, &periods)?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "wrote {}", out.display())?;
    for (id, s) in &periods {
        let n = s.impressions().len();
        // `+ 0.0` turns the empty sum's -0.0 into 0.0
        let clicks = s.impressions().iter().map(|i| i.pctr).sum::<f64>() + 0.0;
        let mean_wp = if n > 0 {
            s.impressions().iter().map(|i| i.wp).sum::<f64>() / n as f64
        } else {
            0.0
        };
        writeln!(
            stdout,
            "{id}: {n} impressions, total cost {:.4}, expected clicks {clicks:.4}, mean win price {mean_wp:.4}",
            s.total_cost() + 0.0
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<ExitCode> {
    let mut cfg: ExperimentConfig = read_toml(&cli.config)?.unwrap_or_default();
    cfg.seed = cli.seed;
    if let Some(s) = a.setting {
        cfg.setting = s;
    }
    if let Some(m) = &a.methods {
        cfg.methods = m.clone();
    }
    if let Some(p) = &a.traffic {
        cfg.traffic.source = TrafficKind::File;
        cfg.traffic.path = Some(p.clone());
    }
    if let Some(t) = &a.test_period {
        cfg.traffic.test_period = Some(t.clone());
    }
    if let Some(n) = a.n {
        cfg.synth.n_impressions = n;
    }
    if let Some(s) = a.steps {
        cfg.traffic.n_steps = s;
        cfg.synth.n_steps = s;
    }
    if let Some(c) = a.campaigns {
        cfg.campaigns.count = c;
    }
    if let Some(path) = &a.model {
        let meta: ModelMetadata = serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?;
        cfg.calibration = meta.calibration;
        if cfg.traffic.source == TrafficKind::File && cfg.traffic.train_periods.is_empty() {
            cfg.traffic.train_periods = meta.trained_on;
        }
    }
    if let Some(c) = a.calibration {
        cfg.calibration = c;
    }
    if let Some(t) = &a.train_periods {
        cfg.traffic.train_periods = t.clone();
    }
    cfg.validate()?;

    let periods = prepare_periods(&cfg)?;
    let out = run_experiment_on(&cfg, &periods)?;
    create_dir(&cli.out_dir)?;
    let report_path = cli.out_dir.join("report.csv");
    write_report(create_file(&report_path)?, &out.rows)?;
    write_campaigns(create_file(&cli.out_dir.join("campaigns.csv"))?, &out.campaigns)?;
    for (method, episodes) in &out.episodes {
        for ep in episodes {
            let name = format!("{}.csv", ep.campaign_id);
            write_episode_log(
                create_file(&cli.out_dir.join("episodes").join(method.as_str()).join(&name))?,
                &ep.log_rows(),
            )?;
            write_logs(
                create_file(&cli.out_dir.join("logs").join(method.as_str()).join(&name))?,
                &ep.log_records(),
            )?;
        }
    }
    let mut stdout = io::stdout().lock();
    write_report(&mut stdout, &out.rows)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    writeln!(stdout, "wrote {}", report_path.display())?;
    Ok(ExitCode::SUCCESS)
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<ExitCode> {
    let mut all = load_traffic(&a.traffic, LoadOptions { n_steps: a.steps })?;
    if all.is_empty() {
        bail!("{} holds no traffic", a.traffic.display());
    }
    let eval = match &a.eval_period {
        Some(id) => {
            let i = all
                .iter()
                .position(|(p, _)| p == id)
                .with_context(|| format!("evaluation period `{id}` not found"))?;
            Some(all.remove(i))
        }
        None => None,
    };
    let chosen: Vec<_> = match &a.periods {
        Some(ids) => ids
            .iter()
            .map(|id| {
                all.iter()
                    .find(|(p, _)| p == id)
                    .cloned()
                    .with_context(|| format!("training period `{id}` not found"))
            })
            .collect::<Result<_>>()?,
        None => all,
    };
    if chosen.is_empty() {
        bail!("no training periods left");
    }
    let (ids, history): (Vec<String>, Vec<_>) = chosen.into_iter().unzip();
    let model = train_empirical_with_ids(history, ids, a.calibration)?;

    let mut stdout = io::stdout().lock();
    if let Some((id, slice)) = &eval {
        // total cost at a few flat bids, as multiples of the mean win price
        let n = slice.impressions().len().max(1) as f64;
        let mean_wp = slice.impressions().iter().map(|i| i.wp).sum::<f64>() / n;
        let campaign = Campaign::budget_only("eval", f64::MAX, slice.first_step(), slice.last_step());
        let truth = train_empirical_with_ids(vec![slice.clone()], vec![id.clone()], 1.0)?;
        for k in [0.5, 1.0, 2.0] {
            let duals = DualVars::new(1.0 / (k * mean_wp), 0.0, 0.0);
            let pred = predict_remaining(&model, &campaign, campaign.start_step, &duals, &Default::default())?;
            let act = predict_remaining(&truth, &campaign, campaign.start_step, &duals, &Default::default())?;
            let rel = if act.cost > 0.0 {
                (pred.cost - act.cost).abs() / act.cost
            } else {
                0.0
            };
            writeln!(
                stdout,
                "{id}: bid {k} x mean win price: predicted cost {:.4}, actual {:.4}, relative error {rel:.4}",
                pred.cost, act.cost
            )?;
        }
    }

    let meta = model.metadata();
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("model.json"));
    let mut w = create_file(&out)?;
    serde_json::to_writer_pretty(&mut w, meta)?;
    writeln!(w)?;
    w.flush()?;
    writeln!(
        stdout,
        "trained {} on {} (calibration {}); wrote {}",
        meta.kind,
        meta.trained_on.join(","),
        meta.calibration,
        out.display()
    )?;
    Ok(ExitCode::SUCCESS)
}

fn verify(cli: &Cli, a: &VerifyArgs) -> Result<ExitCode> {
    let mut cfg: VerifyConfig = read_toml(&cli.config)?.unwrap_or_default();
    cfg.seed = cli.seed;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.gap_instances, a.instances);
    set(&mut cfg.max_n, a.max_n);
    set(&mut cfg.monotone_instances, a.monotone_instances);
    set(&mut cfg.grid_points, a.grid);
    set(&mut cfg.solver_runs, a.solves);
    set(&mut cfg.positivity_campaigns, a.positivity_campaigns);
    let reports = run_suites(&cfg)?;

    create_dir(&cli.out_dir)?;
    let path = cli.out_dir.join("verify.csv");
    let mut w = create_file(&path)?;
    writeln!(w, "suite,cases,failures,redrawn,passed")?;
    let mut stdout = io::stdout().lock();
    for r in &reports {
        writeln!(w, "{},{},{},{},{}", r.name, r.cases, r.failures, r.redrawn, r.passed())?;
        writeln!(stdout, "{}", r.summary())?;
        for e in &r.examples {
            writeln!(stdout, "  {e}")?;
        }
    }
    w.flush()?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(if reports.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<ExitCode> {
    let src = a.episodes.clone().unwrap_or_else(|| cli.out_dir.join("episodes"));
    let dst = a.out.clone().unwrap_or_else(|| cli.out_dir.join("plots"));
    if !src.is_dir() {
        bail!("episode log directory {} does not exist", src.display());
    }
    let files = csv_files(&src)?;
    if files.is_empty() {
        bail!("no episode logs under {}", src.display());
    }
    for f in &files {
        let log = read_episode_log(
            fs::File::open(f).with_context(|| format!("reading {}", f.display()))?,
            &f.display().to_string(),
        )?;
        let rel = f.strip_prefix(&src).expect("walked from src");
        write_plot(create_file(&dst.join(rel))?, &plot_rows(&log))?;
    }
    println!("wrote {} time series under {}", files.len(), dst.display());
    Ok(ExitCode::SUCCESS)
}
