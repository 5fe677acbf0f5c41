//! `auxscatter` command line: phantoms, Monte Carlo simulation, dataset
//! build, training, evaluation and reconstruction, one subcommand per stage.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use auxscatter::config::{configure_threads, RunConfig, Scale};
use auxscatter::geometry::Split;
use auxscatter::metrics::{NetworkPredictor, OraclePredictor, Predictor, ZeroPredictor};
use auxscatter::model::ModelKind;
use auxscatter::pipeline::{self, Layout};

#[derive(Debug, Parser)]
#[command(name = "auxscatter", version, about = "FOV-aware CBCT scatter estimation pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML file layered over the scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Preset the configuration starts from.
    #[arg(long, global = true, default_value = "desk")]
    scale: Scale,
    /// Global seed; sets both the data seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "AUXSCATTER_THREADS")]
    threads: Option<usize>,
    /// Run root receiving this stage's outputs (default: the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run root to read upstream artifacts from (default: --out).
    #[arg(long, global = true)]
    from: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Test => vec![Split::Test],
            SplitArg::All => vec![Split::Train, Split::Test],
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Unet,
    Auxnet,
    Both,
}

impl KindArg {
    fn kinds(self) -> Vec<ModelKind> {
        match self {
            KindArg::Unet => vec![ModelKind::Unet],
            KindArg::Auxnet => vec![ModelKind::Auxnet],
            KindArg::Both => vec![ModelKind::Unet, ModelKind::Auxnet],
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural head phantoms.
    Phantom,
    /// Simulate flats, primaries and Monte Carlo scatter over the FOV grid.
    Simulate {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Build normalized datasets from the projection stores.
    Dataset {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train unet, auxnet or both on the training dataset.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        kind: KindArg,
    },
    /// Score predictors on the test dataset; writes a table and plots.
    Eval {
        /// `unet`, `auxnet`, `oracle`, `zero` or a checkpoint path. Repeatable.
        #[arg(long = "predictor", default_values = ["unet", "auxnet"])]
        predictors: Vec<String>,
    },
    /// Scatter-corrected FDK reconstruction of the water cylinder.
    Recon {
        /// Network checkpoints to correct with (default: both trained models).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Run every stage end to end.
    Reproduce,
}

fn resolve(g: &Global) -> Result<RunConfig> {
    // `--seed` goes first so explicit `--set` keys override it.
    let mut overrides = Vec::new();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
        overrides.push(format!("train.seed={s}"));
    }
    overrides.extend(g.overrides.iter().cloned());
    let mut cfg = RunConfig::load(g.scale, g.config.as_deref(), &overrides)?;
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn predictor_for(spec: &str, from: &Layout, out: &Layout) -> Result<Box<dyn Predictor>> {
    Ok(match spec {
        "oracle" => Box::new(OraclePredictor),
        "zero" => Box::new(ZeroPredictor),
        "unet" | "auxnet" => {
            let kind: ModelKind = spec.parse()?;
            let own = out.checkpoint(kind);
            let p = if own.exists() { own } else { from.checkpoint(kind) };
            Box::new(load_net(&p)?)
        }
        path => Box::new(load_net(Path::new(path))?),
    })
}

fn load_net(p: &Path) -> Result<NetworkPredictor> {
    pipeline::network_predictor(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn run(cli: Cli, cfg: RunConfig) -> Result<()> {
    let out = Layout::new(&cfg.out_dir);
    let from = Layout::new(cli.global.from.clone().unwrap_or_else(|| cfg.out_dir.clone()));
    match cli.command {
        Command::Phantom => {
            pipeline::stage_phantoms(&cfg, &out)?;
        }
        Command::Simulate { split } => {
            for s in split.splits() {
                let store = pipeline::stage_simulate(&cfg, &from, &out, s)?;
                info!("store written to {}", store.display());
            }
        }
        Command::Dataset { split } => {
            for s in split.splits() {
                pipeline::stage_dataset(&cfg, &from, &out, s)?;
            }
        }
        Command::Train { kind } => {
            for k in kind.kinds() {
                let s = pipeline::stage_train(&cfg, k, &from.dataset(Split::Train), &out.model(k))?;
                println!(
                    "{}\tsteps {}\tinitial loss {:.6e}\tfinal loss {:.6e}\tsample order {}",
                    k.as_str(),
                    s.steps,
                    s.initial_loss,
                    s.final_loss,
                    s.sample_order_sha256
                );
            }
        }
        Command::Eval { predictors } => {
            let preds = predictors
                .iter()
                .map(|p| predictor_for(p, &from, &out))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&dyn Predictor> = preds.iter().map(|b| b.as_ref()).collect();
            let recs = pipeline::stage_eval(&cfg, &refs, &from.dataset(Split::Test), &out.eval())?;
            print_means(&recs);
        }
        Command::Recon { checkpoints } => {
            let cks = if checkpoints.is_empty() {
                [ModelKind::Unet, ModelKind::Auxnet]
                    .iter()
                    .map(|&k| from.checkpoint(k))
                    .filter(|p| p.exists())
                    .collect()
            } else {
                checkpoints
            };
            let rep = pipeline::stage_recon(&cfg, &cks, &out.recon())?;
            for e in &rep.entries {
                println!("{}\tcupping index {:.2} HU", e.correction, e.cupping_index_hu);
            }
        }
        Command::Reproduce => {
            let rep = pipeline::reproduce(&cfg, &out)?;
            print_means(&rep.records);
            for e in &rep.recon.entries {
                println!("{}\tcupping index {:.2} HU", e.correction, e.cupping_index_hu);
            }
        }
    }
    Ok(())
}

fn print_means(recs: &[auxscatter::metrics::EvalRecord]) {
    let mut names: Vec<&str> = Vec::new();
    for r in recs {
        if !names.contains(&r.model.as_str()) {
            names.push(&r.model);
        }
    }
    for n in names {
        if let Some(m) = auxscatter::metrics::mean_mape(recs, n, None) {
            println!("{n}\tmean MAPE {m:.4}%");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cfg = match resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = configure_threads(cli.global.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_flag_sets_both_seeds() {
        let cli = Cli::try_parse_from(["auxscatter", "--seed", "7", "phantom"]).unwrap();
        let cfg = resolve(&cli.global).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (7, 7));
    }

    #[test]
    fn explicit_set_overrides_the_seed_flag() {
        let cli = Cli::try_parse_from(["auxscatter", "--seed", "1", "--set", "train.seed=3", "train"]).unwrap();
        let cfg = resolve(&cli.global).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (1, 3));
    }

    #[test]
    fn bad_override_is_rejected() {
        let cli = Cli::try_parse_from(["auxscatter", "--set", "train.nope=1", "train"]).unwrap();
        assert!(resolve(&cli.global).is_err());
    }
}
