use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use ttcf::analysis::PowerMode;
use ttcf::experiment::{self, ExperimentConfig, ModeSelect, Prepared};
use ttcf::noise::S1Denominator;
use ttcf::Error;

#[derive(Parser)]
#[command(name = "ttcf", version, about = "Two-time correlation functions of a telegraph-driven two-level system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single-time and two-time correlator series.
    Dynamics(Common),
    /// Absorption and emission spectra with peak lists.
    Spectrum(Common),
    /// Fitted rates, Δ and peak counts over a (ν, Ω) grid.
    Sweep(Common),
    /// Monte Carlo oracle against the averaged equations.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ModeSelect>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Write the kernel table as CSV.
    #[arg(long)]
    dump_kernels: Option<PathBuf>,
    #[arg(long)]
    power_mode: Option<PowerArg>,
    #[arg(long)]
    s1_denominator: Option<DenominatorArg>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of Monte Carlo paths; overrides `validate.n_paths`.
    #[arg(long)]
    paths: Option<usize>,
    /// Negate entry ROW,COL of the averaged generator (test hook).
    #[arg(long, value_parser = parse_pair, hide = true)]
    mutate_sign: Option<[usize; 2]>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PowerArg {
    Re,
    Abs2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenominatorArg {
    Nu,
    Eta,
}

fn parse_mode(s: &str) -> Result<ModeSelect, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let r = r.trim().parse().map_err(|_| "bad row index")?;
    let c = c.trim().parse().map_err(|_| "bad column index")?;
    Ok([r, c])
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(dir) = &self.out {
            cfg.output.dir = dir.clone();
        }
        if let Some(m) = self.mode {
            cfg.modes = m;
        }
        if let Some(seed) = self.seed {
            cfg.noise.seed = seed;
        }
        if let Some(p) = self.power_mode {
            cfg.analysis.power_mode = match p {
                PowerArg::Re => PowerMode::Re,
                PowerArg::Abs2 => PowerMode::Abs2,
            };
        }
        if let Some(d) = self.s1_denominator {
            cfg.set_s1_denominator(match d {
                DenominatorArg::Nu => S1Denominator::Nu,
                DenominatorArg::Eta => S1Denominator::Eta,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dump_kernels(path: Option<&Path>, p: &Prepared) -> Result<(), Error> {
    if let Some(path) = path {
        let mut w = BufWriter::new(File::create(path)?);
        p.table.dump(&mut w)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Dynamics(args) => {
            let cfg = args.load()?;
            let (p, series) = experiment::run_dynamics(&cfg)?;
            let dir = &cfg.output.dir;
            dump_kernels(args.dump_kernels.as_deref(), &p)?;
            experiment::write_resolved(dir, &cfg, &p)?;
            report(&experiment::write_dynamics(dir, &cfg, &p, &series)?);
        }
        Command::Spectrum(args) => {
            let cfg = args.load()?;
            let (p, series, spectra) = experiment::run_spectrum(&cfg)?;
            let dir = &cfg.output.dir;
            dump_kernels(args.dump_kernels.as_deref(), &p)?;
            experiment::write_resolved(dir, &cfg, &p)?;
            report(&experiment::write_dynamics(dir, &cfg, &p, &series)?);
            report(&experiment::write_spectra(dir, &cfg, &p, &spectra)?);
        }
        Command::Sweep(args) => {
            let mut cfg = args.load()?;
            if cfg.sweep.is_none() {
                cfg.sweep = Some(Default::default());
            }
            let result = experiment::run_sweep(&cfg, args.workers)?;
            let dir = &cfg.output.dir;
            std::fs::create_dir_all(dir)?;
            experiment::write_json(&dir.join("config.json"), &cfg)?;
            report(&[experiment::write_sweep(dir, &cfg, &result)?]);
            let failed = result.cells.iter().filter(|c| !c.errors.is_empty()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells recorded errors", result.cells.len());
            }
        }
        Command::Validate(args) => {
            let mut cfg = args.common.load()?;
            if let Some(n) = args.paths {
                cfg.validate.n_paths = n;
            }
            if args.mutate_sign.is_some() {
                cfg.validate.sign_mutation = args.mutate_sign;
            }
            let report = experiment::run_validate(&cfg, args.common.workers)?;
            let dir = &cfg.output.dir;
            std::fs::create_dir_all(dir)?;
            experiment::write_json(&dir.join("config.json"), &cfg)?;
            let path = dir.join("validation.json");
            experiment::write_json(&path, &report)?;
            for c in &report.correlators {
                println!(
                    "{:<3} max z = {:.3} at tau = {:.4} ({})",
                    c.label,
                    c.max_z,
                    c.at,
                    if c.pass { "pass" } else { "FAIL" }
                );
            }
            eprintln!("wrote {}", path.display());
            if !report.pass {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else if matches!(e, Error::Integrator { .. } | Error::Physicality { .. } | Error::Quadrature { .. }) {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
