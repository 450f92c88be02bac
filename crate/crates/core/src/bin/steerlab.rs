use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use steerlab::harness::config::ExperimentConfig;
use steerlab::harness::experiment::{self, Status};
use steerlab::harness::report::{self, FITS_FILE, MANIFEST_FILE, SWEEP_FILE, VALIDATORS_FILE};
use steerlab::harness::validate_config;
use steerlab::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const EXIT_IO: u8 = 3;

/// Synthetic steering simulator and bound checker.
#[derive(Parser, Debug)]
#[command(name = "steerlab", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppress progress and summaries on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the model (and planted steering set) and save them as JSON.
    GenModel,
    /// Build or extract the steering set and save it with its contrast data.
    Extract,
    /// Sweep the coefficient grid and write sweep.csv, manifest.json, fits.csv, validators.csv.
    Sweep,
    /// Validate the config, then run the requested checks.
    Validate {
        /// Only parse and validate the config.
        #[arg(long)]
        dry_run: bool,
    },
    /// Refit tanh and helpfulness curves from an existing sweep.csv.
    Fit,
    /// Summarize an existing output directory.
    Report,
}

enum Failure {
    Code(u8, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => EXIT_IO,
            Error::OracleDisagreement(_) => EXIT_VIOLATION,
            _ => EXIT_CONFIG,
        };
        Failure::Code(code, e.to_string())
    }
}

type Outcome = Result<u8, Failure>;

struct Ctx {
    cli: Cli,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.cli.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let path = self
            .cli
            .config
            .as_ref()
            .ok_or_else(|| Failure::Code(EXIT_CONFIG, "--config PATH is required".into()))?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Code(EXIT_IO, format!("{}: {e}", path.display())))?;
        let mut cfg = validate_config(&text)?;
        if let Some(seed) = self.cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.cli.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output directory for commands that read earlier results.
    fn out_dir(&self) -> Result<PathBuf, Failure> {
        if let Some(out) = &self.cli.out {
            return Ok(out.clone());
        }
        Ok(self.config()?.output_dir)
    }
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    report::write_file(path, body)
        .map_err(|e| Failure::Code(EXIT_IO, format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Code(EXIT_IO, format!("{}: {e}", dir.display())))
}

fn gen_model(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config()?;
    let (model, planted) = experiment::build_model(&cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("model.json");
    write(&path, &model.to_json()?)?;
    ctx.say(format!("wrote {}", path.display()));
    if let Some(s) = planted {
        let path = cfg.output_dir.join("planted_steering.json");
        write(&path, &s.to_json()?)?;
        ctx.say(format!("wrote {}", path.display()));
    }
    Ok(0)
}

fn extract(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config()?;
    let inst = experiment::build_instance(&cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("steering.json");
    write(&path, &inst.steering.to_json()?)?;
    ctx.say(format!("wrote {}", path.display()));
    if let Some(c) = &inst.contrast {
        let path = cfg.output_dir.join("contrast.json");
        write(&path, &c.to_json()?)?;
        ctx.say(format!("wrote {}", path.display()));
    }
    Ok(0)
}

fn sweep(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config()?;
    let result = experiment::run_experiment(&cfg)?;
    let paths = report::emit_csv_report(&result, &cfg.output_dir)
        .map_err(|e| Failure::Code(EXIT_IO, format!("{}: {e}", cfg.output_dir.display())))?;
    for p in &paths {
        ctx.say(format!("wrote {}", p.display()));
    }
    for (name, c) in &result.manifest.checks {
        ctx.say(format!("{name}: pass {} fail {} skip {}", c.pass, c.fail, c.skip));
    }
    Ok(if result.has_violation() { EXIT_VIOLATION } else { 0 })
}

fn validate(ctx: &Ctx, dry_run: bool) -> Outcome {
    let cfg = ctx.config()?;
    let sha = steerlab::rng::sha256_hex(cfg.canonical_json()?.as_bytes());
    if dry_run {
        ctx.say(format!("config ok sha256={sha}"));
        return Ok(0);
    }
    let result = experiment::run_experiment(&cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(VALIDATORS_FILE);
    write(&path, &report::validators_csv(&result))?;
    for v in &result.validators {
        ctx.say(format!(
            "{:<16} {:<28} {:>8} measured={} reference={}",
            v.check,
            v.item,
            v.status.to_string(),
            report::fmt_num(v.measured),
            report::fmt_num(v.reference)
        ));
    }
    let failed = result.validators.iter().any(|v| v.status == Status::Fail) || result.has_violation();
    Ok(if failed { EXIT_VIOLATION } else { 0 })
}

fn fit(ctx: &Ctx) -> Outcome {
    let dir = ctx.out_dir()?;
    let rows = report::read_sweep_csv(&dir.join(SWEEP_FILE))?;
    let manifest = report::read_manifest(&dir.join(MANIFEST_FILE))?;
    let cfg = match &ctx.cli.config {
        Some(_) => ctx.config()?,
        None => manifest.config.clone(),
    };
    let refit = experiment::sweep_fits(&cfg, &rows, manifest.estimates.eps_hat);
    let refit_names: Vec<&str> = refit
        .iter()
        .flat_map(|f| f.parameters.iter().map(|p| p.name.as_str()))
        .collect();
    let mut fits: Vec<_> = manifest
        .fits
        .iter()
        .filter(|f| !f.parameters.iter().any(|p| refit_names.contains(&p.name.as_str())))
        .cloned()
        .collect();
    fits.extend(refit.iter().cloned());
    let path = dir.join(FITS_FILE);
    write(&path, &report::fits_csv(&fits))?;
    for f in &refit {
        for p in &f.parameters {
            ctx.say(format!(
                "{} = {} (rss {}, r2 {})",
                p.name,
                report::fmt_num(p.estimate),
                report::fmt_num(f.rss),
                report::fmt_num(f.r2)
            ));
        }
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(0)
}

fn summarize(ctx: &Ctx) -> Outcome {
    let dir = ctx.out_dir()?;
    let manifest = report::read_manifest(&dir.join(MANIFEST_FILE))?;
    let rows = report::read_sweep_csv(&dir.join(SWEEP_FILE))?;
    let e = &manifest.estimates;
    ctx.say(format!(
        "family {} seed {} kappa {} config sha256 {}",
        serde_json::to_value(manifest.family)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
        manifest.seed,
        f64::from(manifest.kappa),
        manifest.config_sha256
    ));
    ctx.say(format!(
        "lambda_hat {} margin_hat {} slope_product {}",
        report::fmt_num(e.lambda_hat),
        report::fmt_num(e.margin_hat),
        report::fmt_num(e.slope_product)
    ));
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        ctx.say(format!(
            "grid {} rows, r_e {}..{}; renormalized behavior {} -> {}; helpfulness {} -> {}",
            rows.len(),
            report::fmt_num(first.r_e),
            report::fmt_num(last.r_e),
            report::fmt_num(first.behavior_renorm),
            report::fmt_num(last.behavior_renorm),
            report::fmt_num(first.helpfulness),
            report::fmt_num(last.helpfulness)
        ));
    }
    for f in &manifest.fits {
        for p in &f.parameters {
            ctx.say(format!("fit {} = {} (r2 {})", p.name, report::fmt_num(p.estimate), report::fmt_num(f.r2)));
        }
    }
    for (name, c) in &manifest.checks {
        ctx.say(format!("{name}: pass {} fail {} skip {}", c.pass, c.fail, c.skip));
    }
    let failed = manifest.checks.values().any(|c| c.fail > 0);
    Ok(if failed { EXIT_VIOLATION } else { 0 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let ctx = Ctx { cli };
    let outcome = match &ctx.cli.command {
        Command::GenModel => gen_model(&ctx),
        Command::Extract => extract(&ctx),
        Command::Sweep => sweep(&ctx),
        Command::Validate { dry_run } => validate(&ctx, *dry_run),
        Command::Fit => fit(&ctx),
        Command::Report => summarize(&ctx),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Code(code, msg)) => {
            eprintln!("steerlab: {msg}");
            ExitCode::from(code)
        }
    }
}
