use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pallex_core::energy::{
    detect_marker, integrate_power, lifetime, segment_phases, segments_csv, synthesize_power,
    BitPattern, DigitalTrace, LifetimeParams, PowerModel, PowerTrace,
};
use pallex_core::graph::{earliest_start, topo_order, validate_manifest, AppManifest};
use pallex_core::handoff::{
    collect_handoff, runtime_dir_from_env, serve_handoff, HandoffEndpoint, Role,
    RUNTIME_DIR_ENV,
};
use pallex_core::sim::{
    blame_csv, blame_report, export_gantt, gantt_csv, simulate_boot, stage_profiles_from_json,
    units_from_json, BootPhases, Cores, StageProfile, Timeline, UnitProfile,
};
use pallex_core::unitgen::{
    emit_config_script, emit_stage_units, shutdown_command, Catalog, ConfigProfile, ProfileName,
    ShutdownMode,
};
use pallex_core::Micros;

/// Environment variable listing a stage's input files, colon-separated.
const INPUTS_ENV: &str = "PALLEX_INPUTS";

#[derive(Parser)]
#[command(name = "pallex", version, about = "Boot-time stage scheduling toolkit for duty-cycled Linux boards")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
#[allow(clippy::enum_variant_names)]
enum Cmd {
    /// Check a manifest; prints "ok" or one violation per line
    Validate { manifest: PathBuf },
    /// Print the stage order, or earliest start/finish times with --stage-profiles
    Graph {
        manifest: PathBuf,
        /// Stage profiles (JSON map of stage id to duration_ms and cpu_demand)
        #[arg(long)]
        stage_profiles: Option<PathBuf>,
        /// JSON map of unit name to ready time in ms
        #[arg(long)]
        unit_ready: Option<PathBuf>,
    },
    /// Render one systemd service file per stage
    GenUnits {
        manifest: PathBuf,
        /// Runtime directory written into each unit's environment
        #[arg(long, default_value = pallex_core::handoff::DEFAULT_RUNTIME_DIR)]
        runtime_dir: String,
        /// Write files into this directory instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the systemctl commands that apply a unit configuration profile
    GenConfig {
        /// EU, EU+MMS, EU+NET1, EU+NET2, EU+NET3, ALLU or ALLU-NET3
        #[arg(long)]
        profile: String,
        /// Unit catalog JSON; the built-in catalog by default
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Print the command for a shutdown mode, followed by its risk notes
    ShutdownCmd {
        /// graceful, forced or forced-forced
        #[arg(long)]
        mode: String,
    },
    /// Simulate a boot cycle and print a summary
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        /// Print the blame CSV instead of the summary
        #[arg(long, conflicts_with = "gantt")]
        blame: bool,
        /// Print the Gantt CSV instead of the summary
        #[arg(long)]
        gantt: bool,
    },
    /// Simulate a boot cycle and print per-unit blame durations
    Blame {
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Simulate a boot cycle and print every event as CSV
    Gantt {
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Integrate a power trace, measured or synthesized from a simulation
    Energy(EnergyArgs),
    /// Split a power trace at the given timestamps and report each part's energy
    Segment {
        #[arg(long)]
        trace: PathBuf,
        /// Comma-separated cut points in µs
        #[arg(long, value_delimiter = ',')]
        boundaries: Vec<u64>,
        /// Quantize voltage/current traces to the shield's resolution
        #[arg(long)]
        quantize: bool,
    },
    /// Estimate battery lifetime in hours
    Lifetime(LifetimeArgs),
    /// Run one stage: collect inputs, execute, hand the output to successors
    RunStage(RunStageArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Unit profiles (JSON array)
    #[arg(long)]
    units: Option<PathBuf>,
    /// Application manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Stage profiles (JSON map of stage id to duration_ms and cpu_demand)
    #[arg(long)]
    stage_profiles: Option<PathBuf>,
    /// Number of cores, or "inf"
    #[arg(long, default_value = "4", value_parser = parse_cores)]
    cores: Cores,
    /// Boot phase preset: rpi3 or rpizw
    #[arg(long, default_value = "rpi3")]
    preset: String,
    /// Override the bootloader duration (ms)
    #[arg(long)]
    t_btl_ms: Option<f64>,
    /// Override the kernel duration (ms)
    #[arg(long)]
    t_knl_ms: Option<f64>,
    /// Override the delay before stages are released (ms)
    #[arg(long)]
    init_delay_ms: Option<f64>,
}

#[derive(Args)]
struct EnergyArgs {
    /// Power trace CSV
    #[arg(long, conflicts_with_all = ["units", "manifest"])]
    trace: Option<PathBuf>,
    /// Quantize voltage/current traces to the shield's resolution
    #[arg(long)]
    quantize: bool,
    #[command(flatten)]
    sim: SimArgs,
    /// Baseline board power for synthesis (mW)
    #[arg(long, default_value_t = 300.0)]
    p_base: f64,
    /// Power per fully busy core for synthesis (mW)
    #[arg(long, default_value_t = 1700.0)]
    p_core: f64,
    /// Synthesis sample rate (Hz)
    #[arg(long, default_value_t = 1000.0)]
    rate: f64,
    /// Write the synthesized trace to this CSV file
    #[arg(long)]
    write_trace: Option<PathBuf>,
    /// Window start (µs); the trace start by default
    #[arg(long)]
    from_us: Option<u64>,
    /// Window end (µs); the trace end by default
    #[arg(long, conflicts_with = "digital")]
    to_us: Option<u64>,
    /// Digital trace CSV; the window ends at the completion marker
    #[arg(long, requires = "pattern")]
    digital: Option<PathBuf>,
    /// Marker bit pattern, e.g. 10101100
    #[arg(long, requires = "bit_period_us")]
    pattern: Option<String>,
    /// Marker bit period (µs)
    #[arg(long)]
    bit_period_us: Option<u64>,
    /// Digital trace sample rate (Hz); inferred from the samples by default
    #[arg(long)]
    digital_rate: Option<f64>,
}

#[derive(Args)]
struct LifetimeArgs {
    /// Battery capacity (mAh)
    #[arg(long)]
    mah: f64,
    /// Battery voltage (V)
    #[arg(long)]
    volt: f64,
    /// Energy per duty cycle (J)
    #[arg(long, conflicts_with_all = ["e_btl", "e_knl", "e_user", "e_sdn"])]
    e: Option<f64>,
    /// Bootloader energy per cycle (J)
    #[arg(long)]
    e_btl: Option<f64>,
    /// Kernel energy per cycle (J)
    #[arg(long)]
    e_knl: Option<f64>,
    /// Userspace energy per cycle (J)
    #[arg(long)]
    e_user: Option<f64>,
    /// Shutdown energy per cycle (J)
    #[arg(long)]
    e_sdn: Option<f64>,
    /// Duty cycles per hour
    #[arg(long)]
    n: f64,
}

#[derive(Args)]
struct RunStageArgs {
    #[arg(long)]
    app: String,
    #[arg(long)]
    stage: String,
    #[arg(long)]
    manifest: PathBuf,
    /// Socket directory root; PALLEX_RUNTIME_DIR or /run/pallex by default
    #[arg(long)]
    runtime_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    retry_ms: u64,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    /// Command to run; the stage's manifest command (via /bin/sh) if omitted
    #[arg(last = true)]
    command: Vec<String>,
}

fn parse_cores(s: &str) -> Result<Cores, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(Cores::Unbounded);
    }
    match s.parse::<u32>() {
        Ok(0) => Err("core count must be at least 1".into()),
        Ok(k) => Ok(Cores::Finite(k)),
        Err(_) => Err(format!("expected a positive integer or \"inf\", got {s:?}")),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<AppManifest> {
    AppManifest::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn ms(v: f64, what: &str) -> Result<Micros> {
    Micros::from_ms_f64(v).ok_or_else(|| anyhow!("{what} must be a non-negative number of ms"))
}

impl SimArgs {
    fn phases(&self) -> Result<BootPhases> {
        let mut p = BootPhases::preset(&self.preset)
            .ok_or_else(|| anyhow!("unknown preset {:?}; expected rpi3 or rpizw", self.preset))?;
        if let Some(v) = self.t_btl_ms {
            p.t_btl = ms(v, "--t-btl-ms")?;
        }
        if let Some(v) = self.t_knl_ms {
            p.t_knl = ms(v, "--t-knl-ms")?;
        }
        if let Some(v) = self.init_delay_ms {
            p.systemd_init_delay = ms(v, "--init-delay-ms")?;
        }
        Ok(p)
    }

    fn run(&self) -> Result<(Timeline, Vec<UnitProfile>)> {
        let units = match &self.units {
            Some(p) => units_from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => Vec::new(),
        };
        let manifest = match &self.manifest {
            Some(p) => load_manifest(p)?,
            None => AppManifest::new("none", ""),
        };
        let profiles: BTreeMap<String, StageProfile> = match &self.stage_profiles {
            Some(p) => stage_profiles_from_json(&read(p)?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => BTreeMap::new(),
        };
        let t = simulate_boot(&units, &manifest, &profiles, &self.phases()?, self.cores)?;
        Ok((t, units))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    match cmd {
        Cmd::Validate { manifest } => {
            let report = validate_manifest(&load_manifest(&manifest)?);
            writeln!(out, "{report}")?;
            if !report.is_ok() {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Graph {
            manifest,
            stage_profiles,
            unit_ready,
        } => {
            let m = load_manifest(&manifest)?;
            match stage_profiles {
                None => {
                    for id in topo_order(&m)? {
                        writeln!(out, "{id}")?;
                    }
                }
                Some(p) => {
                    let durations: BTreeMap<String, Micros> = stage_profiles_from_json(&read(&p)?)
                        .with_context(|| format!("parsing {}", p.display()))?
                        .into_iter()
                        .map(|(k, v)| (k, v.duration))
                        .collect();
                    let ready = match unit_ready {
                        Some(p) => {
                            let raw: BTreeMap<String, f64> = serde_json::from_str(&read(&p)?)
                                .with_context(|| format!("parsing {}", p.display()))?;
                            raw.into_iter()
                                .map(|(k, v)| Ok((k.clone(), ms(v, &k)?)))
                                .collect::<Result<_>>()?
                        }
                        None => BTreeMap::new(),
                    };
                    let windows = earliest_start(&m, &ready, &durations)?;
                    writeln!(out, "stage,start_ms,finish_ms")?;
                    for id in topo_order(&m)? {
                        let w = &windows[&id];
                        writeln!(out, "{id},{},{}", w.start, w.finish)?;
                    }
                }
            }
        }
        Cmd::GenUnits {
            manifest,
            runtime_dir,
            out: dir,
        } => {
            let files = emit_stage_units(&load_manifest(&manifest)?, &runtime_dir)?;
            match dir {
                Some(dir) => {
                    fs::create_dir_all(&dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                    for (name, text) in &files {
                        let path = dir.join(name);
                        fs::write(&path, text)
                            .with_context(|| format!("writing {}", path.display()))?;
                        writeln!(out, "{}", path.display())?;
                    }
                }
                None => {
                    for (name, text) in &files {
                        writeln!(out, "# {name}")?;
                        write!(out, "{text}")?;
                    }
                }
            }
        }
        Cmd::GenConfig { profile, catalog } => {
            let name: ProfileName = profile.parse()?;
            let catalog = match catalog {
                Some(p) => Catalog::from_json(&read(&p)?)?,
                None => Catalog::builtin(),
            };
            for line in emit_config_script(&ConfigProfile::new(name), &catalog)? {
                writeln!(out, "{line}")?;
            }
        }
        Cmd::ShutdownCmd { mode } => {
            let mode: ShutdownMode = mode.parse()?;
            let cmd = shutdown_command(mode);
            writeln!(out, "{}", cmd.command)?;
            for note in cmd.risk_notes {
                writeln!(out, "# {note}")?;
            }
        }
        Cmd::Simulate { sim, blame, gantt } => {
            let (t, units) = sim.run()?;
            if blame {
                write!(out, "{}", blame_csv(&blame_report(&t, &units)?))?;
            } else if gantt {
                write!(out, "{}", gantt_csv(&export_gantt(&t)))?;
            } else {
                writeln!(out, "cores={}", t.cores)?;
                writeln!(out, "userspace_start_ms={}", t.userspace_start())?;
                writeln!(out, "t_usi_ms={}", t.t_usi())?;
                writeln!(out, "total_ms={}", t.total())?;
            }
        }
        Cmd::Blame { sim } => {
            let (t, units) = sim.run()?;
            write!(out, "{}", blame_csv(&blame_report(&t, &units)?))?;
        }
        Cmd::Gantt { sim } => {
            let (t, _) = sim.run()?;
            write!(out, "{}", gantt_csv(&export_gantt(&t)))?;
        }
        Cmd::Energy(args) => {
            let joules = energy(&args)?;
            writeln!(out, "{joules:.3} J")?;
        }
        Cmd::Segment {
            trace,
            boundaries,
            quantize,
        } => {
            let t = PowerTrace::from_csv(&read(&trace)?, quantize)?;
            write!(out, "{}", segments_csv(&segment_phases(&t, &boundaries)?))?;
        }
        Cmd::Lifetime(a) => {
            let parts = [a.e_btl, a.e_knl, a.e_user, a.e_sdn];
            let p = match a.e {
                Some(e) => LifetimeParams {
                    battery_capacity_mah: a.mah,
                    battery_voltage_v: a.volt,
                    e_btl_j: 0.0,
                    e_knl_j: 0.0,
                    e_user_j: e,
                    e_sdn_j: 0.0,
                    cycles_per_hour: a.n,
                },
                None if parts.iter().any(Option::is_some) => LifetimeParams {
                    battery_capacity_mah: a.mah,
                    battery_voltage_v: a.volt,
                    e_btl_j: a.e_btl.unwrap_or(0.0),
                    e_knl_j: a.e_knl.unwrap_or(0.0),
                    e_user_j: a.e_user.unwrap_or(0.0),
                    e_sdn_j: a.e_sdn.unwrap_or(0.0),
                    cycles_per_hour: a.n,
                },
                None => bail!("give --e or at least one of --e-btl, --e-knl, --e-user, --e-sdn"),
            };
            writeln!(out, "{:.6} h", lifetime(&p)?)?;
        }
        Cmd::RunStage(args) => {
            drop(out);
            run_stage(&args)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn energy(a: &EnergyArgs) -> Result<f64> {
    let trace = match &a.trace {
        Some(p) => PowerTrace::from_csv(&read(p)?, a.quantize)?,
        None => {
            if a.sim.units.is_none() && a.sim.manifest.is_none() {
                bail!("give --trace, or --units/--manifest to synthesize one");
            }
            let (t, _) = a.sim.run()?;
            let model = PowerModel {
                p_base_mw: a.p_base,
                p_core_mw: a.p_core,
            };
            synthesize_power(&t, model, a.rate)?
        }
    };
    if let Some(p) = &a.write_trace {
        fs::write(p, trace.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let (first, last) = trace.span().ok_or_else(|| anyhow!("power trace is empty"))?;
    let start = a.from_us.unwrap_or(first);
    let end = match &a.digital {
        Some(p) => {
            let d = DigitalTrace::from_csv(&read(p)?, a.digital_rate)?;
            let pattern: BitPattern = a.pattern.as_deref().unwrap_or_default().parse()?;
            let period = a.bit_period_us.unwrap_or_default();
            detect_marker(&d, &pattern, period)?
                .ok_or_else(|| anyhow!("completion marker {pattern} not found in {}", p.display()))?
        }
        None => a.to_us.unwrap_or(last),
    };
    Ok(integrate_power(&trace, Some((start, end)))?)
}

fn run_stage(a: &RunStageArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let report = validate_manifest(&m);
    if !report.is_ok() {
        bail!("invalid manifest:\n{report}");
    }
    if m.app_id != a.app {
        bail!("manifest is for app {:?}, not {:?}", m.app_id, a.app);
    }
    let stage = m
        .stage(&a.stage)
        .ok_or_else(|| anyhow!("manifest has no stage {:?}", a.stage))?;
    let runtime_dir = a.runtime_dir.clone().unwrap_or_else(runtime_dir_from_env);
    let retry = Duration::from_millis(a.retry_ms);
    let timeout = Duration::from_millis(a.timeout_ms);

    let predecessors: Vec<HandoffEndpoint> = stage
        .stage_deps
        .iter()
        .map(|p| HandoffEndpoint::new(&runtime_dir, &m.app_id, p, Role::Consumer))
        .collect();
    let collected = collect_handoff(&predecessors, retry, timeout)?;

    let scratch = tempfile::Builder::new()
        .prefix(&format!("pallex-{}-{}-", m.app_id, stage.id))
        .tempdir()
        .context("creating scratch directory")?;
    let mut inputs = Vec::new();
    for (producer, payload) in &collected.payloads {
        let path = scratch.path().join(format!("{producer}.in"));
        fs::write(&path, payload).with_context(|| format!("writing {}", path.display()))?;
        inputs.push(path.to_string_lossy().into_owned());
    }

    let mut command = match a.command.split_first() {
        Some((program, rest)) => {
            let mut c = Command::new(program);
            c.args(rest);
            c
        }
        None => {
            let mut c = Command::new("/bin/sh");
            c.arg("-c").arg(&stage.command);
            c
        }
    };
    let output = command
        .env(INPUTS_ENV, inputs.join(":"))
        .env(RUNTIME_DIR_ENV, &runtime_dir)
        .stdin(Stdio::null())
        .stderr(Stdio::inherit())
        .output()
        .with_context(|| format!("running stage {}", stage.id))?;
    if !output.status.success() {
        bail!("stage {} command failed: {}", stage.id, output.status);
    }

    let successors = m.successors(&stage.id);
    if successors.is_empty() {
        let mut out = io::stdout().lock();
        out.write_all(&output.stdout)?;
        out.flush()?;
    } else {
        let endpoint = HandoffEndpoint::new(&runtime_dir, &m.app_id, &stage.id, Role::Producer);
        serve_handoff(&endpoint, &output.stdout, successors.len(), timeout)?;
    }
    Ok(())
}
