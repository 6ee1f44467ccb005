use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfpc::harness::{self, EvalMethod, EvalRequest, FileConfig, TrainRequest};
use cfpc::policy::FeatureMode;
use cfpc::{Error, Result};

#[derive(Parser)]
#[command(name = "cfpc", version, about = "Downlink power control for cell-free massive MIMO")]
struct Cli {
    /// TOML file with optional [sim], [train], [policy] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SimFlags {
    /// Number of UEs K.
    #[arg(long)]
    ues: Option<usize>,
    /// Number of APs L.
    #[arg(long)]
    aps: Option<usize>,
    /// Serving APs per UE.
    #[arg(long)]
    n_assoc: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw network snapshots into a dataset file.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the snapshots as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Train the policy on a dataset's UE positions.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; a fresh one is drawn when omitted.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// CSV training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the state saved next to `--out`.
        #[arg(long)]
        from_checkpoint: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use radius-limited feature sums (m).
        #[arg(long, conflicts_with = "top_n")]
        radius: Option<f64>,
        /// Use feature sums over the n strongest links.
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Evaluate allocators and write summary, CDF and per-UE CSVs.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: epa, fpa[:nu], lozano[:theta], mmf, policy.
        #[arg(long, default_value = "epa,fpa,lozano")]
        methods: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        perm_seed: Option<u64>,
    },
    /// Grid-search the FPA and Lozano exponents on a dataset.
    Tune {
        #[arg(long)]
        data: PathBuf,
        /// Write the scores as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter count, FLOPs and memory of a model.
    Complexity {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        sim: SimFlags,
    },
}

fn apply_sim(cfg: &mut FileConfig, f: &SimFlags) {
    if let Some(k) = f.ues {
        cfg.sim = cfg.sim.clone().with_ues(k);
    }
    if let Some(l) = f.aps {
        cfg.sim.num_aps = l;
    }
    if let Some(n) = f.n_assoc {
        cfg.sim.n_assoc = n;
    }
}

fn run(cli: Cli) -> Result<()> {
    harness::init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.cmd {
        Cmd::Generate {
            count,
            out,
            seed,
            json,
            sim,
        } => {
            apply_sim(&mut cfg, &sim);
            let seed = seed.unwrap_or(cfg.sim.rng_seed);
            let summary = harness::cmd_generate(&cfg.sim, count, seed, &out)?;
            if let Some(j) = json {
                let ds = cfpc::dataset::read_dataset(&out)?;
                let f = std::fs::File::create(&j).map_err(|e| Error::Config(format!("{}: {e}", j.display())))?;
                cfpc::dataset::export_json(std::io::BufWriter::new(f), &ds)?;
            }
            println!("{summary}");
        }
        Cmd::Train {
            data,
            val,
            out,
            log,
            from_checkpoint,
            epochs,
            batch,
            lr,
            momentum,
            hidden,
            patience,
            seed,
            radius,
            top_n,
        } => {
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch.unwrap_or(t.batch_size);
            t.lr = lr.unwrap_or(t.lr);
            t.momentum = momentum.unwrap_or(t.momentum);
            t.patience = patience.unwrap_or(t.patience);
            t.seed = seed.unwrap_or(t.seed);
            cfg.policy.hidden = hidden.unwrap_or(cfg.policy.hidden);
            if let Some(r) = radius {
                cfg.policy.features = FeatureMode::Scalable(cfpc::policy::Neighborhood::Radius(r));
            }
            if let Some(n) = top_n {
                cfg.policy.features = FeatureMode::Scalable(cfpc::policy::Neighborhood::TopN(n));
            }
            let req = TrainRequest {
                train_set: &data,
                val_set: val.as_deref(),
                out: &out,
                log: log.as_deref(),
                resume: from_checkpoint,
            };
            let o = harness::cmd_train(&req, &cfg.sim, &cfg.policy, &cfg.train)?;
            println!(
                "trained {} epochs{}; best validation min-SE {:.4} at epoch {}; checkpoint {}",
                o.epochs_run,
                if o.stopped_early { " (early stop)" } else { "" },
                o.best_val,
                o.best_epoch,
                out.display()
            );
        }
        Cmd::Eval {
            data,
            methods,
            checkpoint,
            out_dir,
            perm_seed,
        } => {
            if let Some(s) = perm_seed {
                cfg.eval.perm_seed = s;
            }
            let methods = EvalMethod::parse_list(&methods, &cfg.eval)?;
            let req = EvalRequest {
                data: &data,
                methods: &methods,
                checkpoint: checkpoint.as_deref(),
                out_dir: out_dir.as_deref(),
            };
            let rep = harness::cmd_eval(&req, &cfg.sim, &cfg.eval)?;
            print!("{rep}");
        }
        Cmd::Tune { data, out } => {
            let rep = harness::cmd_tune(&data, &cfg.sim, out.as_deref())?;
            print!("{rep}");
        }
        Cmd::Complexity { checkpoint, sim } => {
            apply_sim(&mut cfg, &sim);
            let rep = harness::cmd_complexity(checkpoint.as_deref(), &cfg.policy, &cfg.sim)?;
            println!("{rep}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
