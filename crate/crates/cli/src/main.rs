use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use maskopt_cli::config::RunConfig;
use maskopt_cli::pipeline::{
    self, cmd_ablate, cmd_eval, cmd_gen_data, cmd_harvest, cmd_pipeline, cmd_probe, cmd_train,
    RunPaths,
};
use maskopt_core::train::Stage;

#[derive(Parser)]
#[command(name = "maskopt", about = "Masked-diffusion LM pipeline for offline black-box optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the offline pool, pair datasets, templates, and vocabulary.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage for every seed, resuming from checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Existing run directory produced by gen-data.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
    },
    /// Generate candidates with the latest checkpoint of each seed.
    Harvest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Score harvested candidates and write report CSVs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Ranking probe against the latest checkpoint.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// gen-data, enabled stages, harvest, eval (and probe if configured).
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; a timestamped one is created when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline for all seven stage subsets and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    match s {
        "da" => Ok(Stage::Da),
        "sft" => Ok(Stage::Sft),
        "rl" => Ok(Stage::Rl),
        other => Err(format!("unknown stage {other:?}, expected da|sft|rl")),
    }
}

fn timestamped(prefix: &str) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    PathBuf::from(format!("{prefix}_{secs}"))
}

fn main() {
    let cli = Cli::parse();
    let (name, config_path, root) = match &cli.command {
        Command::GenData { config, out } => ("gen-data", config.clone(), out.clone()),
        Command::Train { config, run, .. } => ("train", config.clone(), run.clone()),
        Command::Harvest { config, run } => ("harvest", config.clone(), run.clone()),
        Command::Eval { config, run } => ("eval", config.clone(), run.clone()),
        Command::Probe { config, run } => ("probe", config.clone(), run.clone()),
        Command::Pipeline { config, out } => (
            "pipeline",
            config.clone(),
            out.clone().unwrap_or_else(|| timestamped("run")),
        ),
        Command::Ablate { config, out } => (
            "ablate",
            config.clone(),
            out.clone().unwrap_or_else(|| timestamped("ablate")),
        ),
    };
    let paths = RunPaths::new(&root);
    let result = RunConfig::load(&config_path).and_then(|cfg| run(&cli.command, &cfg, &paths));
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            match pipeline::write_failure_record(&paths, name, &err) {
                Ok(path) => eprintln!("failure record: {}", path.display()),
                Err(write_err) => eprintln!("could not write failure record: {write_err}"),
            }
            std::process::exit(1);
        }
    }
}

fn run(command: &Command, cfg: &RunConfig, paths: &RunPaths) -> maskopt_core::Result<()> {
    match command {
        Command::GenData { .. } => {
            cmd_gen_data(cfg, paths)?;
            println!("data generated under {}", paths.root.display());
        }
        Command::Train { stage, .. } => {
            cmd_train(cfg, paths, *stage)?;
            println!("stage {stage} trained for seeds {:?}", cfg.eval.seeds);
        }
        Command::Harvest { .. } => {
            cmd_harvest(cfg, paths)?;
            println!("harvest complete");
        }
        Command::Eval { .. } => {
            let outcomes = cmd_eval(cfg, paths)?;
            for (k, v) in pipeline::outcome_summary(&outcomes) {
                println!("{k} = {v:.4}");
            }
            println!("report: {}", paths.report().display());
        }
        Command::Probe { .. } => {
            let report = cmd_probe(cfg, paths)?;
            println!(
                "probe K={} groups={}: mean rank {:.3} (random {:.1})",
                report.k, report.groups, report.mean_rank, report.random_baseline
            );
        }
        Command::Pipeline { .. } => {
            let outcomes = cmd_pipeline(cfg, paths)?;
            for (k, v) in pipeline::outcome_summary(&outcomes) {
                println!("{k} = {v:.4}");
            }
            println!("run directory: {}", paths.root.display());
        }
        Command::Ablate { .. } => {
            let rows = cmd_ablate(cfg, paths)?;
            for row in &rows {
                println!(
                    "{:<12} max_mean={} parse_fail={:.3} exhausted={}",
                    row.subset,
                    row.max_mean.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into()),
                    row.parse_failure_rate_mean,
                    row.exhausted_seeds
                );
            }
            println!("ablation table: {}", paths.root.join("ablate.csv").display());
        }
    }
    Ok(())
}
