//! `haptiq`: generate detent-knob data, train the latent model and the
//! phase-switching controller, and evaluate both.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use haptiq_core::detentsim::{generate_dataset, rollout_policy, ChancePolicy, OraclePolicy};
use haptiq_core::pipeline::eval::{embeddings_csv, prediction_csv};
use haptiq_core::pipeline::models::TrainLog;
use haptiq_core::pipeline::{
    eval_prediction, eval_task, load_dataset, save_dataset, train_controller, train_model, TrainedModel, ZeroPredictor,
};
use haptiq_core::qcontrol::QNetwork;
use numkit::Checkpoint;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "haptiq", version, about = "Latent haptic models and learned phase switching on a simulated detent knob")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML run configuration (sections: scenario, model, q, eval).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scripted episodes into a line-delimited JSON dataset.
    GenData {
        /// Preset scenario: stirrer, speaker or fan.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 25)]
        success: usize,
        #[arg(long, default_value_t = 25)]
        fail: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a sequence model: full, window or rnn.
    TrainElbo {
        #[arg(long, default_value = "dataset.jsonl")]
        data: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch training CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Fill the wall-time column of the report.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the Q-network on states of a trained model.
    TrainQ {
        #[arg(long, default_value = "dataset.jsonl")]
        data: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        ckpt: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Train on recorded transitions only.
        #[arg(long)]
        no_explore: bool,
        /// Per-iteration CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Multi-step frame prediction error against the all-zero reference.
    EvalPred {
        #[arg(long, default_value = "dataset.jsonl")]
        data: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-loop episodes in the simulator.
    EvalTask {
        #[arg(long, value_enum, default_value_t = PolicyKind::Learned)]
        policy: PolicyKind,
        #[arg(long, default_value = "model.ckpt")]
        ckpt: PathBuf,
        #[arg(long, default_value = "qnet.ckpt")]
        qnet: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Controller state of every recorded step, for external projection.
    ExportEmbeddings {
        #[arg(long, default_value = "dataset.jsonl")]
        data: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Learned,
    Chance,
    Oracle,
}

/// Input problems are usage errors.
struct Usage(String);

fn require(path: &Path) -> Result<(), Usage> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Usage(format!("no such file: {}", path.display())))
    }
}

fn output(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<TrainedModel> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainedModel::from_checkpoint(&ckpt)?)
}

fn check_inputs(command: &Command) -> Result<(), Usage> {
    let common = match command {
        Command::GenData { common, .. } => common,
        Command::TrainElbo { data, common, .. } => {
            require(data)?;
            common
        }
        Command::TrainQ { data, ckpt, common, .. }
        | Command::EvalPred { data, ckpt, common, .. }
        | Command::ExportEmbeddings { data, ckpt, common } => {
            require(data)?;
            require(ckpt)?;
            common
        }
        Command::EvalTask {
            policy, ckpt, qnet, common, ..
        } => {
            if *policy == PolicyKind::Learned {
                require(ckpt)?;
                require(qnet)?;
            }
            common
        }
    };
    if let Some(c) = &common.config {
        require(c)?;
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            scenario,
            success,
            fail,
            common,
        } => {
            let config = RunConfig::load(common.config.as_deref())?.scenario(scenario.as_deref())?;
            let data = generate_dataset(&config, success, fail, common.seed)?;
            let out = output(&common, "dataset.jsonl");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_dataset(&data, &out)?;
            let steps: usize = data.iter().map(|s| s.len()).sum();
            println!("{} sequences, {steps} steps -> {}", data.len(), out.display());
        }
        Command::TrainElbo {
            data,
            model,
            epochs,
            report,
            timing,
            common,
        } => {
            let spec = RunConfig::load(common.config.as_deref())?.model_spec(model.as_deref(), epochs, common.seed)?;
            let dataset = load_dataset(&data)?;
            let total = spec.elbo.epochs;
            let (trained, log) = train_model(&dataset, &spec, |s| {
                if s.epoch == 1 || s.epoch % 10 == 0 || s.epoch == total {
                    eprintln!("epoch {:>4}  elbo {:>10.3}  kl {:>8.3}", s.epoch, s.elbo, s.kl);
                }
                Ok(())
            })?;
            let out = output(&common, "model.ckpt");
            write(&out, trained.to_checkpoint().to_bytes())?;
            let csv = match &log {
                TrainLog::Elbo(r) => r.to_csv(timing),
                TrainLog::Skipped(n, r) => {
                    if *n > 0 {
                        eprintln!("skipped {n} sequences shorter than the window");
                    }
                    r.to_csv(timing)
                }
                TrainLog::Rnn(history) => {
                    let mut csv = String::from("epoch,mse\n");
                    for (i, l) in history.iter().enumerate() {
                        csv.push_str(&format!("{},{l}\n", i + 1));
                    }
                    csv
                }
            };
            if let Some(path) = report {
                write(&path, csv)?;
            }
            println!("{} model -> {}", trained.kind().name(), out.display());
        }
        Command::TrainQ {
            data,
            ckpt,
            iterations,
            no_explore,
            report,
            common,
        } => {
            let qconfig = RunConfig::load(common.config.as_deref())?.q_config(iterations, no_explore, common.seed)?;
            let dataset = load_dataset(&data)?;
            let model = load_model(&ckpt)?;
            let (q, rep) = train_controller(&model, &dataset, &qconfig)?;
            let mut out_ckpt = Checkpoint::new();
            q.to_checkpoint(&mut out_ckpt);
            let out = output(&common, "qnet.ckpt");
            write(&out, out_ckpt.to_bytes())?;
            if let Some(path) = report {
                write(&path, rep.to_csv())?;
            }
            if let Some(last) = rep.iterations.last() {
                println!(
                    "td loss {:.5}, greedy match {:.3} -> {}",
                    last.td_loss,
                    last.greedy_match,
                    out.display()
                );
            }
        }
        Command::EvalPred {
            data,
            ckpt,
            horizons,
            common,
        } => {
            let run = RunConfig::load(common.config.as_deref())?;
            let horizons = horizons.or(run.eval.horizons).unwrap_or_else(|| vec![1, 5, 10]);
            let mut dataset = load_dataset(&data)?;
            let max_h = horizons.iter().copied().max().unwrap_or(0);
            let before = dataset.len();
            dataset.retain(|s| s.len() > max_h);
            if dataset.len() < before {
                eprintln!("skipped {} sequences with at most {max_h} steps", before - dataset.len());
            }
            let model = load_model(&ckpt)?;
            let m = eval_prediction(&model, &dataset, &horizons)?;
            let c = eval_prediction(&ZeroPredictor, &dataset, &horizons)?;
            let out = output(&common, "report.csv");
            write(&out, prediction_csv(&m, &c))?;
            for (m, c) in m.iter().zip(&c) {
                println!("t+{:<3} model {:.4}  chance {:.4}", m.horizon, m.mean, c.mean);
            }
        }
        Command::EvalTask {
            policy,
            ckpt,
            qnet,
            scenario,
            episodes,
            common,
        } => {
            let run = RunConfig::load(common.config.as_deref())?;
            let scenario = run.scenario(scenario.as_deref())?;
            let n = episodes.or(run.eval.episodes).unwrap_or(100);
            let report = match policy {
                PolicyKind::Learned => {
                    let model = load_model(&ckpt)?;
                    let q = QNetwork::from_checkpoint(
                        &Checkpoint::load(&qnet).with_context(|| format!("reading {}", qnet.display()))?,
                    )?;
                    eval_task(&model, &q, &scenario, n, common.seed)?
                }
                PolicyKind::Chance => {
                    rollout_policy(&mut ChancePolicy::new(&scenario, common.seed), &scenario, n, common.seed)?
                }
                PolicyKind::Oracle => rollout_policy(&mut OraclePolicy, &scenario, n, common.seed)?,
            };
            let out = output(&common, "report.csv");
            write(&out, report.to_csv())?;
            println!(
                "{}: success {}/{} = {:.3}",
                scenario.name,
                report.successes(),
                report.episodes.len(),
                report.success_rate()
            );
        }
        Command::ExportEmbeddings { data, ckpt, common } => {
            let dataset = load_dataset(&data)?;
            let model = load_model(&ckpt)?;
            let out = output(&common, "embeddings.csv");
            write(&out, embeddings_csv(&model, &dataset)?)?;
            println!("{} states of dimension {} -> {}", dataset.iter().map(|s| s.len()).sum::<usize>(), model.state_dim(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(Usage(msg)) = check_inputs(&cli.command) {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
