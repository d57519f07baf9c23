use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use brcsgan::files::write_new;
use brcsgan::report::emit_report;
use brcsgan::run::{self, default_run_path, read_config, RunDir};
use brcsgan_core::config::ExperimentConfig;
use brcsgan_core::trainer::SweepKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "brcsgan", version, about = "BLEU-reinforced adversarial training for sequence-to-sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run directory with a synthetic corpus.
    GenData {
        /// Config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory to create (default: $BRCSGAN_OUTPUT_ROOT or run.output_dir).
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Pretrain the generator by maximum likelihood.
    PretrainGen {
        #[arg(long)]
        run: PathBuf,
    },
    /// Pretrain the discriminator up to the accuracy gate.
    PretrainDisc {
        #[arg(long)]
        run: PathBuf,
    },
    /// Adversarial training from both pretrained models.
    TrainGan {
        #[arg(long)]
        run: PathBuf,
    },
    /// Minimum-risk training from the pretrained generator.
    TrainMrt {
        #[arg(long)]
        run: PathBuf,
    },
    /// Adversarial runs over discriminator accuracy gates.
    SweepXi {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated gates.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Adversarial runs over Monte Carlo rollout counts.
    SweepN {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated rollout counts; 0 is the pretrained generator.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Translate a file of source lines.
    Decode {
        #[arg(long)]
        run: PathBuf,
        /// `pretrain`, `gan`, `mrt`, or a checkpoint path.
        #[arg(long, default_value = "gan")]
        model: String,
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Summarize a run directory into report.txt and report.csv.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, run } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => ExperimentConfig::default(),
            };
            let path = run.unwrap_or_else(|| default_run_path(&cfg));
            let dir = run::gen_data(&cfg, &path)?;
            println!("created {}", dir.path().display());
        }
        Command::PretrainGen { run } => {
            let bleu = run::pretrain_gen(&RunDir::open(&run)?)?;
            println!("pretrain-gen: best dev BLEU {bleu:.4}");
        }
        Command::PretrainDisc { run } => {
            let acc = run::pretrain_disc(&RunDir::open(&run)?)?;
            println!("pretrain-disc: held-out accuracy {acc:.4}");
        }
        Command::TrainGan { run } => {
            let bleu = run::train_gan(&RunDir::open(&run)?)?;
            println!("train-gan: best dev BLEU {bleu:.4}");
        }
        Command::TrainMrt { run } => {
            let bleu = run::train_mrt(&RunDir::open(&run)?)?;
            println!("train-mrt: best dev BLEU {bleu:.4}");
        }
        Command::SweepXi { run, grid } => {
            let dir = run::sweep(&RunDir::open(&run)?, SweepKind::Xi, grid)?;
            println!("wrote {}", dir.display());
        }
        Command::SweepN { run, grid } => {
            let dir = run::sweep(&RunDir::open(&run)?, SweepKind::Rollouts, grid)?;
            println!("wrote {}", dir.display());
        }
        Command::Decode {
            run,
            model,
            input,
            output,
            beam,
        } => {
            let text = run::decode(&RunDir::open(&run)?, &model, &input, beam)?;
            match output {
                Some(p) => write_new(&p, text.as_bytes())?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::Evaluate { hyp, reference } => {
            println!("BLEU = {:.4}", run::evaluate(&hyp, &reference)?);
        }
        Command::Report { run } => {
            print!("{}", emit_report(&run)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
