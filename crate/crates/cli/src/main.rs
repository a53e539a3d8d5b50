//! `skelnet` experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use skelnet::config::Config;
use skelnet::experiments::*;
use skelnet::report::ExperimentReport;
use skelnet::Skeleton;

#[derive(Parser)]
#[command(name = "skelnet", version, about = "Experiments on skeleton networks and their kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical kernel against the compositional kernel across widths, plus
    /// conjugate-activation agreement. Sections: `conjugate.`
    KernelConcentration(Common),
    /// Full-network SGD against last-layer SGD and the planted predictor.
    MainTheorem(Common),
    /// Second moments, weight norms and loss at initialization. Sections:
    /// `moments.`, `spectral.`, `loss.`
    InitConditions(Common),
    /// Kernel perceptron mistake and norm bounds, plus projected kernel SGD
    /// on a linear-kernel task. Sections: `sgd.`
    PerceptronBound(Common),
    /// Representation drift and weight growth during SGD.
    Drift(Common),
    /// Backprop against central differences.
    GradCheck(Common),
}

#[derive(Args)]
struct Common {
    /// Skeleton description file.
    #[arg(long)]
    skeleton: PathBuf,
    /// `key = value` overrides of the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for report.csv and summary.txt.
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 1 if any criterion fails.
    #[arg(long)]
    strict: bool,
}

impl Common {
    fn load(&self) -> Result<(Skeleton, Config)> {
        let text = std::fs::read_to_string(&self.skeleton)
            .with_context(|| format!("reading skeleton {}", self.skeleton.display()))?;
        let skeleton = Skeleton::parse(&text).with_context(|| format!("parsing {}", self.skeleton.display()))?;
        let config = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => Config::new(),
        };
        Ok((skeleton, config))
    }
}

fn run(command: &Command) -> Result<ExperimentReport> {
    Ok(match command {
        Command::KernelConcentration(c) => {
            let (skel, config) = c.load()?;
            config.check_sections(ConcentrationSettings::KEYS, &[("conjugate", ConjugateSettings::KEYS)])?;
            let conj = ConjugateSettings::from_config(&config.section("conjugate"))?;
            let mut report = kernel_concentration(&skel, &ConcentrationSettings::from_config(&config)?, c.seed)?;
            report.merge(conjugate_agreement(conj.points, conj.tol)?);
            report
        }
        Command::MainTheorem(c) => {
            let (skel, config) = c.load()?;
            config.check_known(MainTheoremSettings::KEYS)?;
            main_theorem(&skel, &MainTheoremSettings::from_config(&config)?, c.seed)?
        }
        Command::InitConditions(c) => {
            let (skel, config) = c.load()?;
            init_conditions(&skel, &config, c.seed)?
        }
        Command::PerceptronBound(c) => {
            let (skel, config) = c.load()?;
            config.check_sections(PerceptronSettings::KEYS, &[("sgd", ProjectedSgdSettings::KEYS)])?;
            let mut report = perceptron_bound(&skel, &PerceptronSettings::from_config(&config)?, c.seed)?;
            report.merge(projected_sgd(
                &ProjectedSgdSettings::from_config(&config.section("sgd"))?,
                c.seed,
            )?);
            report
        }
        Command::Drift(c) => {
            let (skel, config) = c.load()?;
            config.check_known(DriftSettings::KEYS)?;
            drift(&skel, &DriftSettings::from_config(&config)?, c.seed)?
        }
        Command::GradCheck(c) => {
            let (skel, config) = c.load()?;
            config.check_known(GradCheckSettings::KEYS)?;
            grad_check(&skel, &GradCheckSettings::from_config(&config)?, c.seed)?
        }
    })
}

fn common(command: &Command) -> &Common {
    match command {
        Command::KernelConcentration(c)
        | Command::MainTheorem(c)
        | Command::InitConditions(c)
        | Command::PerceptronBound(c)
        | Command::Drift(c)
        | Command::GradCheck(c) => c,
    }
}

fn write(report: &ExperimentReport, out: &Path) -> Result<()> {
    report
        .write(out)
        .with_context(|| format!("writing report to {}", out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = common(&cli.command);
    let result = run(&cli.command).and_then(|report| {
        write(&report, &c.out)?;
        Ok(report)
    });
    match result {
        Ok(report) => {
            print!("{}", report.summary());
            if c.strict && !report.all_pass() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
