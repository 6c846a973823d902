use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecmoe::harness::batch_io::{read_batch, write_batch};
use ecmoe::harness::report::{write_hist_csv, write_json, write_load_csv, DataEcho, RunReport};
use ecmoe::harness::runs::{compare_reports, route_report, solve_capped_report};
use ecmoe::harness::{gen_batch, train_toy, RouterKind, RunConfig, SyntheticSpec, TrainData};
use ecmoe::metrics::LoadStats;
use ecmoe::routing::TokenBatch;
use ecmoe::Error;

#[derive(Parser, Debug)]
#[command(name = "ecmoe", version, about = "Expert-choice MoE routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clustered batch (.moeb)
    Gen(GenArgs),
    /// Route one batch and report load statistics
    Route(RouteArgs),
    /// Route one batch with several routers
    Compare(CompareArgs),
    /// Solve one random capped expert-choice instance
    SolveCapped(SolveArgs),
    /// Train the toy MoE task
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Omit token ids from the file
    #[arg(long)]
    no_ids: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Flags mirroring the run-config keys; unset flags fall back to
/// `--config` or the defaults.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON run config to start from
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_router)]
    router: Option<RouterKind>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long, visible_alias = "cf")]
    capacity_factor: Option<f64>,
    #[arg(long, visible_alias = "cap")]
    cap_b: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    aux_loss_weight: Option<f64>,
}

#[derive(Args, Debug)]
struct OutputArgs {
    #[arg(long)]
    out: PathBuf,
    /// Per-expert load CSV (`expert_id,count`)
    #[arg(long)]
    load_csv: Option<PathBuf>,
    /// Experts-per-token histogram CSV (`num_experts,token_count`)
    #[arg(long)]
    hist_csv: Option<PathBuf>,
    /// Leave wall-clock timings out of the report
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Debug)]
struct RouteArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Batch file; when absent a batch is generated from --n/--clusters/--skew
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_router, default_value = "ec,top1,top2,hash")]
    routers: Vec<RouterKind>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Directory for `<router>_load.csv` and `<router>_hist.csv`
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    tokens: usize,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = TrainData::default().tokens)]
    tokens: usize,
    #[arg(long, default_value_t = TrainData::default().clusters)]
    clusters: usize,
    #[arg(long, default_value_t = TrainData::default().skew)]
    skew: f64,
    #[command(flatten)]
    output: OutputArgs,
}

fn parse_router(s: &str) -> Result<RouterKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            router,
            experts,
            capacity_factor,
            cap_b,
            lambda,
            max_iter,
            tol,
            d_model,
            d_hidden,
            steps,
            lr,
            seed,
            aux_loss_weight
        );
        Ok(c)
    }
}

fn write_sidecars(stats: Option<&LoadStats>, load: Option<&Path>, hist: Option<&Path>) -> Result<(), Error> {
    if let Some(stats) = stats {
        if let Some(p) = load {
            write_load_csv(p, stats)?;
        }
        if let Some(p) = hist {
            write_hist_csv(p, stats)?;
        }
    }
    Ok(())
}

fn file_echo(path: &Path, batch: &TokenBatch) -> DataEcho {
    DataEcho {
        input: Some(path.display().to_string()),
        n: batch.len(),
        d: batch.dim(),
        clusters: None,
        skew: None,
        data_seed: None,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(a) => {
            let spec = SyntheticSpec { n: a.n, d: a.d, clusters: a.clusters, skew: a.skew, seed: a.seed };
            let mut batch = gen_batch(&spec)?.batch;
            if a.no_ids {
                batch.ids = None;
            }
            write_batch(&a.out, &batch)
        }
        Command::Route(a) => {
            let batch = read_batch(&a.input)?;
            let config = RunConfig { d_model: batch.dim(), ..a.config.resolve()? };
            let report = route_report(&batch, &config, file_echo(&a.input, &batch), !a.output.no_timestamp)?;
            write_json(&a.output.out, &report)?;
            write_sidecars(report.stats.as_ref(), a.output.load_csv.as_deref(), a.output.hist_csv.as_deref())
        }
        Command::Compare(a) => {
            let mut config = a.config.resolve()?;
            let (batch, data) = match (&a.input, a.n) {
                (Some(path), _) => {
                    let b = read_batch(path)?;
                    let echo = file_echo(path, &b);
                    (b, echo)
                }
                (None, Some(n)) => {
                    let seed = a.data_seed.unwrap_or(config.seed);
                    let spec = SyntheticSpec { n, d: config.d_model, clusters: a.clusters, skew: a.skew, seed };
                    let echo = DataEcho {
                        input: None,
                        n,
                        d: config.d_model,
                        clusters: Some(a.clusters),
                        skew: Some(a.skew),
                        data_seed: Some(seed),
                    };
                    (gen_batch(&spec)?.batch, echo)
                }
                (None, None) => return Err(Error::InvalidArgument("compare needs --input or --n".into())),
            };
            config.d_model = batch.dim();
            let report = compare_reports(&batch, &config, &a.routers, &data, !a.no_timestamp)?;
            write_json(&a.out, &report)?;
            if let Some(dir) = &a.csv_dir {
                std::fs::create_dir_all(dir)?;
                for r in &report.reports {
                    let name = r.config.router.as_str();
                    write_sidecars(
                        r.stats.as_ref(),
                        Some(&dir.join(format!("{name}_load.csv"))),
                        Some(&dir.join(format!("{name}_hist.csv"))),
                    )?;
                }
            }
            Ok(())
        }
        Command::SolveCapped(a) => {
            let report = solve_capped_report(&a.config.resolve()?, a.tokens)?;
            eprintln!(
                "iterations {} residuals row {:.3e} col {:.3e} box {:.3e}",
                report.iterations_used, report.residuals.row_eq, report.residuals.col_ineq, report.residuals.box_
            );
            write_json(&a.out, &report)
        }
        Command::Train(a) => {
            let config = a.config.resolve()?;
            let data = TrainData { tokens: a.tokens, clusters: a.clusters, skew: a.skew };
            match train_toy(&config, &data, !a.output.no_timestamp) {
                Ok(report) => {
                    write_json(&a.output.out, &report)?;
                    write_sidecars(report.stats.as_ref(), a.output.load_csv.as_deref(), a.output.hist_csv.as_deref())
                }
                Err(Error::Diverged { step, loss, losses }) => {
                    let mut report = RunReport::new(
                        "train",
                        config,
                        DataEcho {
                            input: None,
                            n: data.tokens,
                            d: a.config.d_model.unwrap_or_default(),
                            clusters: Some(data.clusters),
                            skew: Some(data.skew),
                            data_seed: None,
                        },
                    );
                    report.data.d = report.config.d_model;
                    report.data.data_seed = Some(report.config.seed);
                    report.diverged_at_step = Some(step);
                    report.losses = losses.clone();
                    write_json(&a.output.out, &report)?;
                    Err(Error::Diverged { step, loss, losses })
                }
                Err(e) => Err(e),
            }
        }
    }
}

fn configure_threads() {
    let threads = std::env::var("ECMOE_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    if threads > 0 {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
