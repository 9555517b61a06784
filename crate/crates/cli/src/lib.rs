//! `fragsim` command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use fragsim_core::lab::REPORT_SCHEMA;
use fragsim_core::{
    run_experiment, simulate, solve_malthusian, theorem_constant, truncation_sweep, DislocationModel, ExperimentConfig,
    FamilyName, FamilyParams, FragError, ModelSpec, RenewalOptions, SimOptions,
};

const CONFIG_HINT: &str = r#"a config looks like
  {"model": {"family": "uniform_binary"},
   "eta_grid": [0.0625, 0.0009765625], "replicas": 1000, "master_seed": 1,
   "functionals": [{"kind": "energy", "psi": {"type": "const", "value": 1}, "p": -0.5}]}
families: dirac_binary {b, b2}, uniform_binary, dissipative_uniform_binary {kappa}, beta_binary {gamma} + eps"#;

#[derive(Parser)]
#[command(name = "fragsim", version, about = "Fragmentation chains stopped at mass thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the Laplace exponent Φ(p).
    Phi {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_negative_numbers = true)]
        p: f64,
        /// Print Φ'(p) on a second line.
        #[arg(long)]
        derivative: bool,
    },
    /// Solve Φ(p*) = 0.
    Malthus {
        #[command(flatten)]
        model: ModelArgs,
        /// Print the full record as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Simulate one path down to a threshold and print the stopping line.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop at this time instead of running to the threshold.
        #[arg(long)]
        time_limit: Option<f64>,
        /// Stopping line as CSV (k,lambda_k); stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Event log as JSON lines.
        #[arg(long)]
        dump_events: Option<PathBuf>,
    },
    /// Limit constants for every functional of a config, one JSON object per line.
    Limits {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a replicated experiment; exit 1 when a verdict fails.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
        /// Report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-replica trace as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rerun a beta_binary experiment for several truncation levels.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Renewal-equation oracle for the first energy or empirical functional.
    Renewal {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Table as CSV (t,g,se,lower,upper,forcing).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    family: String,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    b2: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config, or a report whose embedded config is rerun.
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `replicas=200` or `model.eps=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(FragError),
}

impl From<FragError> for CliError {
    fn from(e: FragError) -> Self {
        match e {
            FragError::Config(m) => CliError::Usage(m),
            FragError::InvalidParameter(m) => CliError::Usage(m),
            other => CliError::Run(other),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Run(FragError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(FragError::Json(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first) and runs the command. Returns the exit
/// code: 0 on success, 1 when a verdict fails or a computation errors, 2 on
/// usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(passed) => i32::from(!passed),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("hint: {CONFIG_HINT}");
            2
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> CliResult<bool> {
    match command {
        Command::Phi { model, p, derivative } => {
            let m = model.build()?;
            println!("{}", m.phi(p)?);
            if derivative {
                println!("{}", m.phi_prime(p)?);
            }
            Ok(true)
        }
        Command::Malthus { model, json } => {
            let m = model.build()?;
            let d = solve_malthusian(&m)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&d)?);
            } else {
                println!("{}", d.p_star);
            }
            Ok(true)
        }
        Command::Simulate {
            model,
            alpha,
            eta,
            seed,
            time_limit,
            csv,
            dump_events,
        } => {
            let m = model.build()?;
            let opts = SimOptions {
                time_limit,
                ..SimOptions::stopped(alpha, eta)
            };
            let log = simulate(&m, opts, seed)?;
            if let Some(path) = dump_events {
                log.write_jsonl(BufWriter::new(create(&path)?))?;
            }
            let summary = if let Some(t) = time_limit {
                let blocks = log.blocks_at(t)?;
                format!("{} blocks alive at t = {t}, {} events", blocks.len(), log.events.len())
            } else {
                let state = log.stopped_state(eta)?;
                match &csv {
                    Some(path) => state.write_csv(BufWriter::new(create(path)?))?,
                    None => state.write_csv(io::stdout().lock())?,
                }
                format!(
                    "{} blocks below {eta}, {} events, total mass {}, sigma {}",
                    state.len(),
                    log.events.len(),
                    state.total_mass(),
                    log.first_passage_sigma(eta)?
                )
            };
            eprintln!("{summary}");
            Ok(true)
        }
        Command::Limits { config } => {
            let cfg = config.load()?;
            let model = DislocationModel::from_spec(&cfg.model)?;
            let d = solve_malthusian(&model)?;
            let mut out = io::stdout().lock();
            for spec in &cfg.functionals {
                let Some(phi) = spec.characteristic(d.p_star) else {
                    continue;
                };
                let c = theorem_constant(&model, d.p_star, d.phi_prime_at_star, phi.as_ref())?;
                let mut v = serde_json::to_value(c)?;
                v["functional"] = spec.label(d.p_star).into();
                writeln!(out, "{v}")?;
            }
            Ok(true)
        }
        Command::Verify { config, out, csv } => {
            let cfg = config.load()?;
            let report = run_experiment(&cfg)?;
            if let Some(path) = out {
                serde_json::to_writer_pretty(BufWriter::new(create(&path)?), &report)?;
            }
            if let Some(path) = csv {
                report.write_trace_csv(BufWriter::new(create(&path)?))?;
            }
            for f in &report.functionals {
                let last = f.levels.last();
                let constant = f
                    .constant
                    .map(|c| format!(", constant {:.6}", c.value))
                    .unwrap_or_default();
                if let Some(l) = last {
                    println!("{}: mean {:.6} ± {:.2e} at {}{constant}", f.label, l.mean, l.se, l.eta);
                }
            }
            for v in &report.verdicts {
                println!(
                    "{} {} {}: {}",
                    if v.passed { "PASS" } else { "FAIL" },
                    v.criterion,
                    v.functional,
                    v.detail
                );
            }
            Ok(report.passed)
        }
        Command::Sweep { config, eps, out } => {
            let cfg = config.load()?;
            let report = truncation_sweep(&cfg, &eps)?;
            if let Some(path) = out {
                serde_json::to_writer_pretty(BufWriter::new(create(&path)?), &report)?;
            }
            for d in &report.drift {
                println!(
                    "{} {}: eps {} -> {}, means {:.6} -> {:.6}, drift {:.3e}, 2 x pooled se {:.3e}",
                    if d.stable { "PASS" } else { "FAIL" },
                    d.functional,
                    d.eps_pair.0,
                    d.eps_pair.1,
                    d.means.0,
                    d.means.1,
                    d.drift,
                    2.0 * d.pooled_se
                );
            }
            Ok(report.passed)
        }
        Command::Renewal {
            config,
            paths,
            h,
            t_max,
            batches,
            seed,
            out,
            csv,
        } => {
            let cfg = config.load()?;
            let model = DislocationModel::from_spec(&cfg.model)?;
            let d = solve_malthusian(&model)?;
            let Some((spec, phi)) = cfg
                .functionals
                .iter()
                .find_map(|s| s.characteristic(d.p_star).map(|c| (s, c)))
            else {
                return Err(CliError::Usage(
                    "renewal needs an energy or empirical functional".into(),
                ));
            };
            let defaults = RenewalOptions::default();
            let opts = RenewalOptions {
                paths: paths.unwrap_or(defaults.paths),
                h: h.unwrap_or(defaults.h),
                t_max: t_max.unwrap_or(defaults.t_max),
                batches: batches.unwrap_or(defaults.batches),
                ..defaults
            };
            let table =
                fragsim_core::renewal_oracle(&model, d.p_star, phi.as_ref(), opts, seed.unwrap_or(cfg.master_seed))?;
            let c = theorem_constant(&model, d.p_star, d.phi_prime_at_star, phi.as_ref())?;
            if let Some(path) = out {
                serde_json::to_writer_pretty(BufWriter::new(create(&path)?), &table)?;
            }
            if let Some(path) = csv {
                table.write_csv(BufWriter::new(create(&path)?))?;
            }
            let inside = table.contains_final(c.value);
            println!(
                "{}: g({:.2}) = {:.6} ± {:.2e}, constant {:.6}{}",
                spec.label(d.p_star),
                table.t.last().copied().unwrap_or_default(),
                table.g_final(),
                table.se_final(),
                c.value,
                if inside { "" } else { " (outside the interval)" }
            );
            if table.lattice {
                println!("warning: lattice model, span {:?}", table.lattice_span);
            }
            Ok(true)
        }
    }
}

fn create(path: &Path) -> CliResult<File> {
    File::create(path).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

impl ModelArgs {
    fn build(&self) -> CliResult<DislocationModel> {
        let family: FamilyName = self.family.parse()?;
        let spec = ModelSpec {
            family,
            params: FamilyParams {
                b: self.b,
                b2: self.b2,
                kappa: self.kappa,
                gamma: self.gamma,
            },
            eps: self.eps,
        };
        Ok(DislocationModel::from_spec(&spec)?)
    }
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", self.config.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", self.config.display())))?;
        if value.get("schema").and_then(Value::as_str) == Some(REPORT_SCHEMA) {
            value = value["config"].take();
        }
        for o in &self.overrides {
            apply_override(&mut value, o)?;
        }
        Ok(ExperimentConfig::from_json(&value.to_string())?)
    }
}

/// Sets `a.b.c=value` inside `config`. The value is read as JSON when it
/// parses, as a string otherwise; the result is type-checked when the config
/// is deserialized.
fn apply_override(config: &mut Value, assignment: &str) -> CliResult<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(CliError::Usage(format!("override `{assignment}` is not KEY=VALUE")));
    };
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| json!(raw));
    let mut slot = config;
    for part in key.split('.') {
        if part.is_empty() {
            return Err(CliError::Usage(format!("override key `{key}` has an empty component")));
        }
        slot = match slot {
            Value::Object(map) => map.entry(part).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| CliError::Usage(format!("`{part}` in `{key}` is not an index")))?;
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Usage(format!("index {i} in `{key}` is out of range")))?
            }
            Value::Null => {
                *slot = json!({});
                slot.as_object_mut()
                    .expect("just set")
                    .entry(part)
                    .or_insert(Value::Null)
            }
            _ => return Err(CliError::Usage(format!("`{key}` descends into a scalar"))),
        };
    }
    *slot = parsed;
    Ok(())
}
