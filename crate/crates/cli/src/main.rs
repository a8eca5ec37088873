mod config;
mod overlay;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rotsiam::dataset::{list_sequences, read_annotations, GROUNDTRUTH_FILE};
use rotsiam::eval::{aggregate, evaluate_sequence, write_report, EvalResult};
use rotsiam::io::{load_weights, save_weights};
use rotsiam::tracker::{read_results, track_sequence, write_results};
use rotsiam::train::{train_with_checkpoints, write_loss_trace, PairSampler};
use rotsiam::{DiskSequence, FrameSource, Model, Network};

use crate::config::Config;

#[derive(Parser)]
#[command(name = "rotsiam", version, about = "Rotation-equivariant Siamese tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        Ok(Config::load(self.config.as_deref())?.with_seed(self.seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test splits.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root (its `train` subdirectory is used when present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV (step, lr, loss).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Track one sequence directory, or every sequence below a root.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Results CSV for one sequence, or a directory for many.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score results against ground truth.
    Eval {
        /// Results CSV, or a directory of `<sequence>.csv` files.
        #[arg(long)]
        results: PathBuf,
        /// Sequence directory, or the root holding them.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the equivariance, steering, gradient and geometry checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw predicted boxes and orientation arrows onto the frames.
    Overlay {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also draw the ground-truth box.
        #[arg(long)]
        truth: bool,
    },
}

fn is_sequence(dir: &Path) -> bool {
    dir.join(GROUNDTRUTH_FILE).is_file()
}

fn sequences_under(path: &Path) -> Result<Vec<PathBuf>> {
    if is_sequence(path) {
        return Ok(vec![path.to_path_buf()]);
    }
    let found = list_sequences(path)?;
    if found.is_empty() {
        bail!("no sequences found in {}", path.display());
    }
    Ok(found)
}

fn gen(cfg: &Config, out: &Path) -> Result<()> {
    cfg.data.write(out)?;
    println!(
        "wrote {} training and {} test sequences to {}",
        cfg.data.count(rotsiam::Split::Train),
        cfg.data.count(rotsiam::Split::Test),
        out.display()
    );
    Ok(())
}

fn train(cfg: &Config, data: &Path, out: &Path, trace: Option<&Path>) -> Result<()> {
    let root = if data.join("train").is_dir() {
        data.join("train")
    } else {
        data.to_path_buf()
    };
    let seqs = sequences_under(&root)?
        .iter()
        .map(|d| Ok(Arc::new(DiskSequence::open(d)?) as Arc<dyn FrameSource>))
        .collect::<Result<Vec<_>>>()?;
    let net = Network::new(cfg.network.spec()?)?;
    let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    let sampler = PairSampler::new(seqs, &cfg.train)?;
    let outcome = train_with_checkpoints(&net, params, &sampler, &cfg.train, |step, p| {
        let path = out.with_extension(format!("step{step}.json"));
        save_weights(&path, &Model::new(net.clone(), p.clone())?)
    })?;
    if let Some(last) = outcome.trace.last() {
        println!("trained {} steps, final loss {:.4}", last.step + 1, last.loss);
    }
    if let Some(path) = trace {
        write_loss_trace(path, &outcome.trace)?;
    }
    save_weights(out, &Model::new(net, outcome.params)?)?;
    Ok(())
}

fn track(cfg: &Config, weights: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_weights(weights).with_context(|| format!("loading {}", weights.display()))?;
    let single = is_sequence(input);
    for dir in sequences_under(input)? {
        let seq = DiskSequence::open(&dir)?;
        let init = seq.annotation(0).bbox();
        let states = track_sequence(&seq, init, &model, &cfg.tracker)?;
        let path = if single {
            out.to_path_buf()
        } else {
            out.join(format!("{}.csv", seq.name()))
        };
        write_results(&path, &states)?;
        println!("{}: {} frames", seq.name(), states.len());
    }
    Ok(())
}

fn eval(results: &Path, truth: &Path, out: &Path) -> Result<()> {
    let mut scored: Vec<EvalResult> = Vec::new();
    if is_sequence(truth) {
        let rows = read_results(results)?;
        let gt = read_annotations(&truth.join(GROUNDTRUTH_FILE))?;
        scored.push(evaluate_sequence(&rows, &gt)?);
    } else {
        for dir in sequences_under(truth)? {
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let path = results.join(format!("{name}.csv"));
            if !path.is_file() {
                bail!("missing results for {name}: {}", path.display());
            }
            let gt = read_annotations(&dir.join(GROUNDTRUTH_FILE))?;
            scored.push(evaluate_sequence(&read_results(&path)?, &gt)?);
        }
    }
    let result = aggregate(&scored)?;
    write_report(out, &result)?;
    println!(
        "sequences {}  success AUC {:.4}  precision@20 {:.4}",
        scored.len(),
        result.success_auc,
        result.precision_at_20
    );
    for e in &result.sr {
        println!(
            "SR  range ±{:.2}°  IoU>{:.1}  {:.4}",
            e.range.to_degrees(),
            e.alpha,
            e.value
        );
    }
    Ok(())
}

fn check(seed: u64) -> Result<bool> {
    let outcomes = rotsiam::checks::run_all(seed)?;
    for c in &outcomes {
        println!(
            "{} {:<24} measured {:.3e}  tolerance {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        );
    }
    Ok(outcomes.iter().all(|c| c.passed))
}

fn overlay(sequence: &Path, results: &Path, out: &Path, with_truth: bool) -> Result<()> {
    let seq = DiskSequence::open(sequence)?;
    let rows = read_results(results)?;
    if rows.len() != seq.len() {
        bail!("{} result rows for {} frames", rows.len(), seq.len());
    }
    std::fs::create_dir_all(out)?;
    for (t, row) in rows.iter().enumerate() {
        let truth = with_truth.then(|| {
            let a = seq.annotation(t);
            (a.x, a.y, a.w, a.h)
        });
        let img = overlay::render(&seq.frame(t)?, row, truth);
        overlay::save(&out.join(format!("{t:06}.png")), &img)?;
    }
    println!("wrote {} frames to {}", rows.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { common, out } => gen(&common.load()?, &out),
        Command::Train {
            common,
            data,
            out,
            trace,
        } => train(&common.load()?, &data, &out, trace.as_deref()),
        Command::Track {
            common,
            weights,
            input,
            out,
        } => track(&common.load()?, &weights, &input, &out),
        Command::Eval {
            results,
            truth,
            out,
        } => eval(&results, &truth, &out),
        Command::Check { seed } => {
            if !check(seed)? {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::Overlay {
            sequence,
            results,
            out,
            truth,
        } => overlay(&sequence, &results, &out, truth),
    }
}
