use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trg_core::checkpoint::Checkpoint;
use trg_core::config::RunConfig;
use trg_core::data::{self, Dataset};
use trg_core::experiment::{self, ResultRow};
use trg_core::gradcheck::{self, GradcheckConfig};
use trg_core::{complexity, metrics, parallel, plot, train};

type Error = Box<dyn std::error::Error + Send + Sync>;

#[derive(Parser)]
#[command(name = "trg", version, about = "Temporal reasoning graph experiments on synthetic order-sensitive clips")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON run config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Thread cap; 1 is bit-deterministic.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.trgd and val.trgd into --out (default: the config's data_dir).
    GenData,
    /// Train one model; writes metrics.csv and model.trgw.
    Train {
        /// Directory with train.trgd and val.trgd.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (default: val.trgd in the checkpoint config's data_dir).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference check of the TRG block in f64.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Train every temporal-head variant; writes ablation.csv.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the full model for each head count; writes sweep.csv.
    SweepHeads {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated head counts (default: the config's sweep_heads).
        #[arg(long, value_delimiter = ',')]
        heads: Vec<usize>,
    },
    /// Export the adjacency matrices of one sample as CSV files.
    InspectAdjacency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Render a CSV from this tool as an SVG line chart.
    Plot {
        csv: PathBuf,
        svg: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Print parameter counts of the configured model.
    Params,
}

fn resolve(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()).into())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()).into())
}

fn load_splits(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<(Dataset, Dataset), Error> {
    let dir = data.as_deref().unwrap_or(&cfg.data_dir);
    Ok(experiment::load_splits(dir)?)
}

fn write_rows(path: &Path, key: &str, rows: &[ResultRow]) -> Result<(), Error> {
    let mut buf = Vec::new();
    experiment::write_rows(&mut buf, key, rows)?;
    write_file(path, buf)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut cfg = resolve(&cli.common)?;
    if let Command::GenData = cli.command {
        if let Some(o) = &cli.common.out {
            cfg.data_dir = o.clone();
        }
    }
    if cli.common.dump_config {
        println!("{}", cfg.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    let workers = cfg.workers;
    parallel::with_workers(workers, move || dispatch(cfg, cli.command))
}

fn dispatch(cfg: RunConfig, command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenData => {
            let (tr, va) = experiment::generate_splits(&cfg)?;
            create_dir(&cfg.data_dir)?;
            for (name, ds) in [("train", &tr), ("val", &va)] {
                let path = cfg.data_dir.join(format!("{name}.trgd"));
                data::write_dataset(ds, &path)?;
                let counts: Vec<String> = ds.class_counts().iter().map(ToString::to_string).collect();
                println!("{}: {} samples, class counts [{}]", path.display(), ds.len(), counts.join(", "));
            }
        }
        Command::Train { data } => {
            let (tr, va) = load_splits(&cfg, &data)?;
            let (model, outcome) = experiment::run(&cfg, &tr, &va, |r| {
                eprintln!(
                    "epoch {:>3} {:<5} loss {:.4} top1 {:.4} top5 {:.4}",
                    r.epoch,
                    r.split.name(),
                    r.loss,
                    r.top1,
                    r.top5
                );
            })?;
            create_dir(&cfg.out_dir)?;
            write_file(&cfg.out_dir.join("metrics.csv"), metrics::metrics_csv_string(&outcome.reports))?;
            experiment::checkpoint(&cfg, &model).save(&cfg.out_dir.join("model.trgw"))?;
            println!("best val top1 {:.4}", outcome.best_val_top1);
            println!(
                "final val top1 {:.4} top5 {:.4}",
                outcome.final_val.top1, outcome.final_val.top5
            );
        }
        Command::Eval { checkpoint, dataset } => {
            let (ck_cfg, model) = experiment::restore(&Checkpoint::load(&checkpoint)?)?;
            let path = dataset.unwrap_or_else(|| ck_cfg.data_dir.join("val.trgd"));
            let ds = data::read_dataset(&path)?;
            let e = train::evaluate(&model, &ds, &ck_cfg.sampling(), ck_cfg.eval_clips, ck_cfg.eval_batch_size)?;
            print!("samples {} loss {:.6} top1 {:.6} top5 {:.6}", ds.len(), e.loss, e.top1, e.top5);
            match e.map {
                Some(m) => println!(" map {m:.6}"),
                None => println!(),
            }
        }
        Command::Gradcheck { heads, tolerance, step } => {
            let gc = GradcheckConfig {
                heads,
                tolerance,
                step,
                seed: cfg.seed,
                ..GradcheckConfig::default()
            };
            let report = gradcheck::run(&gc, None)?;
            print!("{}", report.render());
            if !report.passed() {
                let names: Vec<String> = report.failures().map(|g| format!("{}/{}", g.kind.name(), g.group)).collect();
                eprintln!("gradient check failed: {}", names.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate { data } => {
            let (tr, va) = load_splits(&cfg, &data)?;
            let rows = experiment::ablate(&cfg, &tr, &va)?;
            create_dir(&cfg.out_dir)?;
            write_rows(&cfg.out_dir.join("ablation.csv"), "variant", &rows)?;
            for r in &rows {
                println!("{:<8} top1 {:.4} top5 {:.4}", r.label, r.top1, r.top5);
            }
        }
        Command::SweepHeads { data, heads } => {
            let heads = if heads.is_empty() { cfg.sweep_heads.clone() } else { heads };
            if heads.contains(&0) {
                return Err("head counts must be positive".into());
            }
            let (tr, va) = load_splits(&cfg, &data)?;
            let rows = experiment::sweep_heads(&cfg, &heads, &tr, &va)?;
            create_dir(&cfg.out_dir)?;
            write_rows(&cfg.out_dir.join("sweep.csv"), "heads", &rows)?;
            for r in &rows {
                println!("N={:<3} top1 {:.4} top5 {:.4}", r.label, r.top1, r.top5);
            }
        }
        Command::InspectAdjacency {
            checkpoint,
            dataset,
            index,
        } => {
            let (ck_cfg, model) = experiment::restore(&Checkpoint::load(&checkpoint)?)?;
            let ds = data::read_dataset(&dataset)?;
            let stacks = experiment::inspect_adjacency(&model, &ck_cfg, &ds, index)?;
            create_dir(&cfg.out_dir)?;
            for (l, stack) in stacks.iter().enumerate() {
                for k in 0..stack.heads {
                    let path = cfg.out_dir.join(format!("adjacency_layer{l}_head{k}.csv"));
                    write_file(&path, stack.head_csv(k))?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Plot { csv, svg, title } => {
            let text = fs::read_to_string(&csv).map_err(|e| format!("cannot read {}: {e}", csv.display()))?;
            let title = title.unwrap_or_else(|| csv.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()));
            let out = plot::render_svg(&text, &title).map_err(|e| format!("{}: {e}", csv.display()))?;
            write_file(&svg, out)?;
        }
        Command::Params => {
            cfg.validate()?;
            let model = trg_core::model::Model::<f32>::build(cfg.model(), cfg.seed)?;
            print!("{}", complexity::describe(&complexity::param_count(&model)));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
