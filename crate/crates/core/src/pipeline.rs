//! Config-driven runs behind the command line tool.
//!
//! Every command reads a flat config (see [`crate::io::config`]), resolves
//! and validates it completely, then computes into its own output directory
//! and finishes by writing `manifest.txt`. The materialized config is saved
//! as `config.txt` next to the outputs, so running the same command on that
//! file replays the run.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::assimilation::{run_assimilation_from, AssimilationConfig, ErrorSeries, Truth};
use crate::error::{Error, Result};
use crate::field::{Cutoff, SpectralField};
use crate::forcing::{generate_forcing, ForcingSpec};
use crate::grid::Grid2D;
use crate::io::config::{Config, Default as D, Key, Kind, Schema};
use crate::io::csv::{cell, fmt_f64, write_table, CsvWriter};
use crate::io::manifest::{sha256_file, RunManifest};
use crate::io::obsfile::{read_observations, ObservationWriter};
use crate::io::snapshot::{read_forcing, read_snapshot, write_forcing, write_snapshot, ForcingMeta};
use crate::observation::{LowModes, ObservationLayout, ObservationStream};
use crate::recovery::{
    algorithm1, algorithm2, estimate_instant, Algorithm1Params, Algorithm2Params, RecoveryConfig, RecoveryState, Termination,
};
use crate::sensitivity::{convergence_study, SensitivityConfig, SensitivityOptions, SourceTiming, StudySeries};
use crate::solver::{run_reference_from, steps_in, EnergyRow, FlowState, InMemoryReference, ReferenceSink, Scheme, SolverConfig};
use crate::spectrum::{energy_spectrum, SpectrumAccumulator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;
pub const EXIT_DATA_EXHAUSTED: i32 = 5;
pub const EXIT_STALLED: i32 = 6;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::BlowUp { .. } => EXIT_BLOWUP,
        Error::DegenerateDenominator { .. } => EXIT_DEGENERATE,
        Error::Io { .. } | Error::Format(_) | Error::EmptyWindow { .. } => EXIT_FAILURE,
        _ => EXIT_CONFIG,
    }
}

pub fn termination_code(t: Termination) -> i32 {
    match t {
        Termination::Converged => EXIT_OK,
        Termination::DataExhausted => EXIT_DATA_EXHAUSTED,
        Termination::Stalled => EXIT_STALLED,
        Termination::Degenerate => EXIT_DEGENERATE,
    }
}

const fn key(name: &'static str, kind: Kind, default: D, doc: &'static str) -> Key {
    Key { name, kind, default, doc }
}

const SCHEMA_VERSION: Key = key("schema_version", Kind::Int, D::Value("1"), "config format version");
const SCHEME: Key = key("scheme", Kind::Str, D::Value("imex-euler"), "time stepper: imex-euler or cn-ab2");
const DT: Key = key("dt", Kind::Float, D::Unset, "time step (default depends on n)");
const SEED: Key = key("seed", Kind::Int, D::Value("0"), "forcing seed");
const K_LOW: Key = key("k_low", Kind::Float, D::Value("9"), "forcing band, lower bound (exclusive)");
const K_HIGH: Key = key("k_high", Kind::Float, D::Value("11"), "forcing band, upper bound (exclusive)");
const FORCING_NORM: Key = key("forcing_norm", Kind::Float, D::Value("1"), "L2 norm of the force");
const FORCING_FILE: Key = key("forcing_file", Kind::Str, D::Unset, "load the force from this file instead");
const MU: Key = key("mu", Kind::Float, D::Value("20"), "nudging gain");
const OBS: Key = key("obs", Kind::Str, D::Required, "reference output directory with observations.nnso");
const TRUTH: Key = key("truth", Kind::Str, D::Unset, "reference output directory used as ground truth");
const OBS_CUTOFF_OPT: Key = key("observation_cutoff", Kind::Float, D::Unset, "observation scale h (must match the stream)");
const T_START_OPT: Key = key("t_start", Kind::Float, D::Unset, "start time (default: first observation)");

pub static REFERENCE: Schema = Schema {
    name: "reference",
    keys: &[
        SCHEMA_VERSION,
        key("n", Kind::Int, D::Required, "grid size per direction"),
        key("nu", Kind::Float, D::Required, "viscosity"),
        key("t_end", Kind::Float, D::Required, "final time"),
        DT,
        SEED,
        K_LOW,
        K_HIGH,
        FORCING_NORM,
        FORCING_FILE,
        key("snapshot_interval", Kind::Float, D::Value("1"), "spacing of snapshots and energy rows"),
        key("observation_cutoff", Kind::Float, D::Value("1/32"), "observation scale h; modes |k| <= 1/h are observed"),
        key("observation_interval", Kind::Float, D::Unset, "spacing of observations (default dt)"),
        key("observation_start", Kind::Float, D::Value("0"), "first observation time"),
        key("spectrum_start", Kind::Float, D::Unset, "time-average the energy spectrum from here"),
        SCHEME,
        key("out_dir", Kind::Str, D::Value("reference"), "output directory"),
    ],
};

pub static ASSIMILATE: Schema = Schema {
    name: "assimilate",
    keys: &[
        SCHEMA_VERSION,
        OBS,
        TRUTH,
        key("nu2", Kind::Float, D::Required, "model viscosity"),
        MU,
        OBS_CUTOFF_OPT,
        DT,
        T_START_OPT,
        key("t_end", Kind::Float, D::Unset, "end time (default: last observation)"),
        key("output_interval", Kind::Float, D::Unset, "spacing of error rows (default dt)"),
        key("max_obs_gap", Kind::Float, D::Unset, "largest tolerated observation age (default dt)"),
        SCHEME,
        FORCING_FILE,
        key("out_dir", Kind::Str, D::Value("assimilation"), "output directory"),
    ],
};

pub static RECOVER: Schema = Schema {
    name: "recover",
    keys: &[
        SCHEMA_VERSION,
        OBS,
        TRUTH,
        key("algorithm", Kind::Int, D::Required, "1 (stall-triggered) or 2 (windowed)"),
        key("nu2_init", Kind::Float, D::Required, "initial viscosity guess"),
        MU,
        OBS_CUTOFF_OPT,
        DT,
        T_START_OPT,
        key("epsilon", Kind::Float, D::Value("1e-12"), "stop when |I_h w| falls below this"),
        key("delta", Kind::Float, D::Value("0.05"), "algorithm 1: relative decrease that counts as progress"),
        key("filter_steps", Kind::Int, D::Value("10"), "algorithm 1: moving-average length of |I_h w|"),
        key("stall_lag", Kind::Float, D::Value("0.25"), "algorithm 1: time lag of the stall comparison"),
        key("wait", Kind::Float, D::Value("1"), "algorithm 2: relaxation time I"),
        key("window", Kind::Float, D::Value("1"), "algorithm 2: averaging window J"),
        key("trace_every", Kind::Int, D::Value("20"), "steps between trace rows"),
        key("max_rejections", Kind::Int, D::Value("5"), "consecutive rejected estimates before giving up"),
        SCHEME,
        FORCING_FILE,
        key("out_dir", Kind::Str, D::Value("recovery"), "output directory"),
    ],
};

pub static SENSITIVITY: Schema = Schema {
    name: "sensitivity",
    keys: &[
        SCHEMA_VERSION,
        key("n", Kind::Int, D::Value("128"), "grid size per direction"),
        key("nu1", Kind::Float, D::Required, "base viscosity"),
        key("nu2", Kind::FloatList, D::Required, "quotient viscosities approaching nu1"),
        DT,
        key("t_start", Kind::Float, D::Value("0"), "start of the study window"),
        key("t_end", Kind::Float, D::Required, "end of the study window"),
        key("initial_snapshot", Kind::Str, D::Unset, "state at t_start (default: spin up from rest)"),
        SEED,
        K_LOW,
        K_HIGH,
        FORCING_NORM,
        FORCING_FILE,
        key("nudged", Kind::Bool, D::Value("false"), "also study the nudged pair"),
        MU,
        key("observation_cutoff", Kind::Float, D::Value("1/32"), "observation scale h for the nudged pair"),
        key("timing", Kind::Str, D::Value("explicit"), "time level of the source A u: explicit or implicit"),
        key("nonlinear", Kind::Bool, D::Value("true"), "keep the advection terms"),
        key("out_dir", Kind::Str, D::Value("sensitivity"), "output directory"),
    ],
};

pub static SPECTRUM: Schema = Schema {
    name: "spectrum",
    keys: &[
        SCHEMA_VERSION,
        key("input", Kind::Str, D::Required, "reference output directory"),
        key("t_start", Kind::Float, D::Required, "start of the averaging window"),
        key("t_end", Kind::Float, D::Unset, "end of the averaging window (default: last snapshot)"),
        key("out_dir", Kind::Str, D::Value("spectrum"), "output directory"),
    ],
};

pub static EXPERIMENT: Schema = Schema {
    name: "experiment",
    keys: &[
        SCHEMA_VERSION,
        key("kind", Kind::Str, D::Value("all"), "figure2, table1 or all"),
        key("n", Kind::Int, D::Value("128"), "grid size per direction"),
        key("nu1", Kind::Float, D::Value("0.01"), "true viscosity"),
        DT,
        SEED,
        K_LOW,
        K_HIGH,
        FORCING_NORM,
        FORCING_FILE,
        key("t_start", Kind::Float, D::Value("20"), "assimilation start, v(t_start) = 0"),
        key("t_end", Kind::Float, D::Value("40"), "end of reference and assimilation runs"),
        key("nu2_errors", Kind::FloatList, D::Value("10,1,0.1,0.01,0.001,0"), "relative errors of nu2 (10 = 1000%)"),
        MU,
        key("observation_cutoff", Kind::Float, D::Value("1/16"), "observation scale h"),
        key("output_interval", Kind::Float, D::Value("0.1"), "spacing of error rows"),
        key("t_eval", Kind::Float, D::Value("24"), "evaluation time of the table"),
        key("floor_window", Kind::Float, D::Value("1"), "moving-average window of the floor detector"),
        key("floor_rel", Kind::Float, D::Value("0.01"), "relative change below which the floor is reached"),
        SCHEME,
        key("out_dir", Kind::Str, D::Value("experiment"), "output directory"),
    ],
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Reference,
    Assimilate,
    Recover,
    Sensitivity,
    Spectrum,
    Experiment,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Reference,
        Command::Assimilate,
        Command::Recover,
        Command::Sensitivity,
        Command::Spectrum,
        Command::Experiment,
    ];

    pub fn name(self) -> &'static str {
        self.schema().name
    }

    pub fn schema(self) -> &'static Schema {
        match self {
            Command::Reference => &REFERENCE,
            Command::Assimilate => &ASSIMILATE,
            Command::Recover => &RECOVER,
            Command::Sensitivity => &SENSITIVITY,
            Command::Spectrum => &SPECTRUM,
            Command::Experiment => &EXPERIMENT,
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Result of a completed command.
#[derive(Debug)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub exit_code: i32,
}

type Field = SpectralField<f64>;
type Grid = Grid2D<f64>;

/// Validates `cfg` for `cmd`, then runs it under `out_root`.
///
/// Relative input paths are resolved against the working directory and
/// stored as absolute paths in the saved config.
pub fn execute(cmd: Command, mut cfg: Config, out_root: &Path) -> Result<Outcome> {
    let mut warnings = Vec::new();
    let plan = Plan::build(cmd, &mut cfg, &mut warnings)?;
    let out_dir = out_root.join(cfg.str("out_dir")?);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let text = cfg.to_text();
    crate::io::write_atomic(&out_dir.join("config.txt"), text.as_bytes())?;
    let mut m = RunManifest::new(cmd.name(), &text);
    for w in warnings {
        m.warn(w);
    }
    match plan.run(&out_dir, &mut m) {
        Ok(code) => {
            m.finish(&out_dir, code)?;
            Ok(Outcome {
                out_dir,
                manifest: m,
                exit_code: code,
            })
        }
        Err(e) => {
            m.warn(format!("aborted: {e}"));
            let _ = m.finish(&out_dir, exit_code(&e));
            Err(e)
        }
    }
}

/// Reruns the command recorded in a manifest from its saved config, writing
/// into `out_root`.
pub fn replay(manifest: &Path, out_root: &Path) -> Result<Outcome> {
    let m = RunManifest::load(manifest)?;
    let cmd = Command::from_name(&m.command).ok_or_else(|| Error::Format(format!("unknown command `{}`", m.command)))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(&m.config_file);
    if sha256_file(&cfg_path)? != m.config_sha256 {
        return Err(Error::Format(format!("{} does not match the manifest hash", cfg_path.display())));
    }
    let cfg = Config::load(&cfg_path, cmd.schema())?;
    execute(cmd, cfg, out_root)
}

fn cerr(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn positive(cfg: &Config, k: &str) -> Result<f64> {
    let v = cfg.f64(k)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(cerr(k, format!("must be positive, got {v}")))
    }
}

/// `cfg[k]` as a positive number of steps of `dt`.
fn multiple_of_dt(cfg: &Config, k: &str, dt: f64) -> Result<u64> {
    let v = cfg.f64(k)?;
    steps_in(v, dt)
        .filter(|&s| s > 0)
        .ok_or_else(|| cerr(&format!("{k}, dt"), format!("{k} = {v} is not a positive multiple of dt = {dt}")))
}

fn set_f64(cfg: &mut Config, k: &str, v: f64) -> Result<()> {
    cfg.set(k, &fmt_f64(v))
}

fn grid_of(cfg: &Config) -> Result<Grid> {
    Grid::new(cfg.usize("n")?).map_err(|e| cerr("n", e.to_string()))
}

fn default_dt(cfg: &mut Config) -> Result<f64> {
    if !cfg.has("dt") {
        let n = cfg.usize("n")?;
        let dt = SolverConfig::<f64>::new(n.max(4), 1.0, 0.0).map(|c| c.dt).unwrap_or(0.005);
        set_f64(cfg, "dt", dt)?;
    }
    positive(cfg, "dt")
}

fn scheme_of(cfg: &Config) -> Result<Scheme> {
    match cfg.str("scheme")? {
        "imex-euler" => Ok(Scheme::ImexEuler),
        "cn-ab2" => Ok(Scheme::CnAb2),
        s => Err(cerr("scheme", format!("expected imex-euler or cn-ab2, got `{s}`"))),
    }
}

fn cutoff_of(cfg: &Config, grid: &Grid) -> Result<Cutoff<f64>> {
    let c = Cutoff::from_h(cfg.f64("observation_cutoff")?).map_err(|e| cerr("observation_cutoff", e.to_string()))?;
    c.check_grid(grid).map_err(|e| cerr("observation_cutoff", e.to_string()))?;
    Ok(c)
}

fn resolve(cfg: &mut Config, k: &str, is_dir: bool) -> Result<Option<PathBuf>> {
    let Some(raw) = cfg.raw(k) else {
        return Ok(None);
    };
    let p = fs::canonicalize(raw).map_err(|e| cerr(k, format!("cannot resolve `{raw}`: {e}")))?;
    if p.is_dir() != is_dir {
        let what = if is_dir { "a directory" } else { "a file" };
        return Err(cerr(k, format!("`{}` is not {what}", p.display())));
    }
    cfg.set(k, &p.to_string_lossy())?;
    Ok(Some(p))
}

/// Where the force comes from.
#[derive(Clone, Debug)]
enum ForcingSource {
    Generate(ForcingSpec),
    File(PathBuf, ForcingSpec),
}

impl ForcingSource {
    fn from_config(cfg: &mut Config, grid: &Grid) -> Result<Self> {
        if let Some(p) = resolve(cfg, "forcing_file", false)? {
            let (f, meta) = read_forcing::<f64>(&p)?;
            if f.grid() != grid {
                return Err(cerr("forcing_file", format!("{} was stored on a different grid", p.display())));
            }
            return Ok(Self::File(p, meta.spec));
        }
        let spec = ForcingSpec {
            k_low: cfg.f64("k_low")?,
            k_high: cfg.f64("k_high")?,
            seed: cfg.u64("seed")?,
            target_l2: positive(cfg, "forcing_norm")?,
        };
        spec.validate(grid).map_err(|e| cerr("k_low, k_high", e.to_string()))?;
        Ok(Self::Generate(spec))
    }

    fn spec(&self) -> ForcingSpec {
        match self {
            Self::Generate(s) | Self::File(_, s) => *s,
        }
    }

    fn load(&self, grid: &Grid) -> Result<(Field, ForcingMeta)> {
        match self {
            Self::Generate(spec) => Ok((generate_forcing(spec, grid)?, ForcingMeta::current(*spec))),
            Self::File(p, _) => read_forcing::<f64>(p),
        }
    }

    /// Loads the force and stores a copy as `forcing.nnse` in `out`.
    fn materialize(&self, grid: &Grid, out: &Path, m: &mut RunManifest) -> Result<Field> {
        let (f, meta) = self.load(grid)?;
        let path = out.join("forcing.nnse");
        write_forcing(&path, &f, &meta)?;
        m.forcing_sha256 = Some(sha256_file(&path)?);
        m.forcing_rng = Some(meta.rng);
        Ok(f)
    }
}

/// Observation stream plus the settings shared by `assimilate` and `recover`.
struct ObsInput {
    stream: ObservationStream<f64>,
    forcing: PathBuf,
    truth: Option<PathBuf>,
    dt: f64,
    t_start: f64,
    scheme: Scheme,
    mu: f64,
}

impl ObsInput {
    fn from_config(cfg: &mut Config, warnings: &mut Vec<String>) -> Result<Self> {
        let dir = resolve(cfg, "obs", true)?.unwrap();
        let truth = resolve(cfg, "truth", true)?;
        let path = dir.join("observations.nnso");
        if !path.is_file() {
            return Err(cerr("obs", format!("{} has no observations.nnso", dir.display())));
        }
        if !cfg.has("forcing_file") {
            cfg.set("forcing_file", &dir.join("forcing.nnse").to_string_lossy())?;
        }
        let forcing = resolve(cfg, "forcing_file", false)?.unwrap();
        let stream = read_observations::<f64>(&path)?;
        if stream.len() < 2 {
            return Err(Error::TooFew {
                needed: 2,
                got: stream.len(),
            });
        }
        let h = stream.cutoff().h();
        match cfg.opt_f64("observation_cutoff")? {
            Some(c) => {
                let mine = Cutoff::from_h(c).map_err(|e| cerr("observation_cutoff", e.to_string()))?;
                let stream_r = stream.cutoff().radius();
                if (stream_r - mine.radius()).abs() > 1e-12 * stream_r {
                    return Err(Error::CutoffMismatch {
                        stream: stream_r,
                        config: mine.radius(),
                    });
                }
            }
            None => set_f64(cfg, "observation_cutoff", h)?,
        }
        if !cfg.has("dt") {
            let r = stream.records();
            set_f64(cfg, "dt", r[1].t - r[0].t)?;
        }
        let dt = positive(cfg, "dt")?;
        if !cfg.has("t_start") {
            set_f64(cfg, "t_start", stream.first_time().unwrap())?;
        }
        let t_start = cfg.f64("t_start")?;
        let (first, last) = (stream.first_time().unwrap(), stream.horizon().unwrap());
        if t_start < first - 1e-9 || t_start >= last {
            return Err(cerr("t_start", format!("{t_start} is outside the observed window [{first}, {last})")));
        }
        let mu = cfg.f64("mu")?;
        if !(mu >= 0.0) {
            return Err(cerr("mu", "must be non-negative"));
        }
        if mu * dt > 0.5 {
            warnings.push(format!("mu * dt = {} exceeds 0.5; explicit nudging may be unstable", mu * dt));
        }
        Ok(Self {
            stream,
            forcing,
            truth,
            dt,
            t_start,
            scheme: scheme_of(cfg)?,
            mu,
        })
    }

    fn grid(&self) -> &Grid {
        self.stream.layout().grid()
    }

    fn forcing(&self, m: &mut RunManifest) -> Result<Field> {
        let (f, meta) = read_forcing::<f64>(&self.forcing)?;
        if f.grid() != self.grid() {
            return Err(cerr("forcing_file", "force and observations live on different grids"));
        }
        m.forcing_sha256 = Some(sha256_file(&self.forcing)?);
        m.forcing_rng = Some(meta.rng);
        Ok(f)
    }
}

/// Snapshots stored by a reference run with `from <= t <= to`, in time order.
pub fn load_snapshots(dir: &Path, from: f64, to: f64) -> Result<Vec<FlowState<f64>>> {
    let sdir = dir.join("snapshots");
    let entries = fs::read_dir(&sdir).map_err(|e| Error::io(&sdir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nnse"))
        .collect();
    paths.sort();
    let tol = 1e-9;
    let mut out = Vec::new();
    for p in paths {
        let s = read_snapshot::<f64>(&p)?;
        if s.state.t >= from - tol && s.state.t <= to + tol {
            out.push(s.state);
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(out)
}

/// Viscosity recorded in a reference run's saved config.
pub fn reference_viscosity(dir: &Path) -> Result<f64> {
    Config::load(&dir.join("config.txt"), &REFERENCE)?.f64("nu")
}

enum Plan {
    Reference(ReferencePlan),
    Assimilate(AssimilatePlan),
    Recover(RecoverPlan),
    Sensitivity(SensitivityPlan),
    Spectrum(SpectrumPlan),
    Experiment(ExperimentPlan),
}

impl Plan {
    fn build(cmd: Command, cfg: &mut Config, warnings: &mut Vec<String>) -> Result<Self> {
        if cfg.u64("schema_version")? != 1 {
            return Err(cerr("schema_version", "only version 1 is supported"));
        }
        Ok(match cmd {
            Command::Reference => Plan::Reference(ReferencePlan::build(cfg)?),
            Command::Assimilate => Plan::Assimilate(AssimilatePlan::build(cfg, warnings)?),
            Command::Recover => Plan::Recover(RecoverPlan::build(cfg, warnings)?),
            Command::Sensitivity => Plan::Sensitivity(SensitivityPlan::build(cfg, warnings)?),
            Command::Spectrum => Plan::Spectrum(SpectrumPlan::build(cfg)?),
            Command::Experiment => Plan::Experiment(ExperimentPlan::build(cfg, warnings)?),
        })
    }

    fn run(self, out: &Path, m: &mut RunManifest) -> Result<i32> {
        match self {
            Plan::Reference(p) => p.run(out, m),
            Plan::Assimilate(p) => p.run(out, m),
            Plan::Recover(p) => p.run(out, m),
            Plan::Sensitivity(p) => p.run(out, m),
            Plan::Spectrum(p) => p.run(out, m),
            Plan::Experiment(p) => p.run(out, m),
        }
    }
}

const ENERGY_HEADER: [&str; 5] = ["t", "energy", "enstrophy", "l2norm", "h1norm"];

fn energy_cells(r: &EnergyRow<f64>) -> Vec<String> {
    [r.t, r.energy, r.enstrophy, r.l2norm, r.h1norm].map(fmt_f64).to_vec()
}

fn spectrum_rows(s: &[(usize, f64)]) -> Vec<Vec<String>> {
    s.iter().map(|(r, v)| vec![r.to_string(), fmt_f64(*v)]).collect()
}

struct ReferencePlan {
    solver: SolverConfig<f64>,
    forcing: ForcingSource,
    observation_start: f64,
    spectrum_start: Option<f64>,
}

impl ReferencePlan {
    fn build(cfg: &mut Config) -> Result<Self> {
        let grid = grid_of(cfg)?;
        let nu = positive(cfg, "nu")?;
        let t_end = cfg.f64("t_end")?;
        let dt = default_dt(cfg)?;
        if !cfg.has("observation_interval") {
            set_f64(cfg, "observation_interval", dt)?;
        }
        if steps_in(t_end, dt).is_none() || t_end < 0.0 {
            return Err(cerr("t_end, dt", format!("t_end = {t_end} is not a non-negative multiple of dt = {dt}")));
        }
        multiple_of_dt(cfg, "snapshot_interval", dt)?;
        multiple_of_dt(cfg, "observation_interval", dt)?;
        let observation_start = cfg.f64("observation_start")?;
        let spectrum_start = cfg.opt_f64("spectrum_start")?;
        if let Some(s) = spectrum_start {
            if !(s >= 0.0 && s < t_end) {
                return Err(cerr("spectrum_start", format!("{s} is outside [0, t_end)")));
            }
        }
        let forcing = ForcingSource::from_config(cfg, &grid)?;
        let spec = forcing.spec();
        let solver = SolverConfig {
            nu,
            dt,
            t_end,
            observation_cutoff: cutoff_of(cfg, &grid)?,
            grid,
            forcing: spec,
            snapshot_interval: cfg.f64("snapshot_interval")?,
            observation_interval: cfg.f64("observation_interval")?,
            scheme: scheme_of(cfg)?,
        };
        solver.validate().map_err(|e| cerr("n, nu, dt", e.to_string()))?;
        Ok(Self {
            solver,
            forcing,
            observation_start,
            spectrum_start,
        })
    }

    fn run(self, out: &Path, m: &mut RunManifest) -> Result<i32> {
        let f = self.forcing.materialize(&self.solver.grid, out, m)?;
        let layout = ObservationLayout::new(&self.solver.grid, self.solver.observation_cutoff)?;
        let mut sink = DiskSink {
            dir: out.join("snapshots"),
            obs: ObservationWriter::create(&out.join("observations.nnso"), layout)?,
            energy: CsvWriter::create(&out.join("energy.csv"), &ENERGY_HEADER)?,
            spectrum: self.spectrum_start.map(|s| (s, SpectrumAccumulator::new())),
            obs_from: self.observation_start,
            count: 0,
        };
        fs::create_dir_all(&sink.dir).map_err(|e| Error::io(&sink.dir, e))?;
        let start = FlowState::zero(&self.solver.grid, 0.0);
        run_reference_from(&self.solver, &f, start, &mut sink)?;
        sink.obs.finish()?;
        sink.energy.finish()?;
        m.output(out, "energy.csv")?;
        m.output(out, "observations.nnso")?;
        if let Some((_, acc)) = &sink.spectrum {
            write_table(&out.join("spectrum.csv"), &["r", "S"], spectrum_rows(&acc.finish()?))?;
            m.output(out, "spectrum.csv")?;
        }
        for k in 0..sink.count {
            m.output(out, &format!("snapshots/{}", snapshot_name(k)))?;
        }
        Ok(EXIT_OK)
    }
}

fn snapshot_name(k: usize) -> String {
    format!("snap_{k:06}.nnse")
}

struct DiskSink {
    dir: PathBuf,
    obs: ObservationWriter<f64>,
    energy: CsvWriter,
    spectrum: Option<(f64, SpectrumAccumulator<f64>)>,
    obs_from: f64,
    count: usize,
}

impl ReferenceSink<f64> for DiskSink {
    fn snapshot(&mut self, state: &FlowState<f64>) -> Result<()> {
        write_snapshot(&self.dir.join(snapshot_name(self.count)), state)?;
        self.count += 1;
        if let Some((from, acc)) = self.spectrum.as_mut() {
            if state.t >= *from - 1e-9 {
                acc.push(state.t, &state.u)?;
            }
        }
        Ok(())
    }

    fn observation(&mut self, t: f64, obs: LowModes<f64>) -> Result<()> {
        if t >= self.obs_from - 1e-9 {
            self.obs.push(t, &obs)?;
        }
        Ok(())
    }

    fn energy(&mut self, row: EnergyRow<f64>) -> Result<()> {
        self.energy.row(&energy_cells(&row))
    }
}

const ERROR_HEADER: [&str; 6] = ["t", "l2_err", "h1_err", "ih_err", "ih_err_sq", "denom"];

fn error_rows(s: &ErrorSeries<f64>) -> Vec<Vec<String>> {
    s.rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.t),
                cell(r.l2_err),
                cell(r.h1_err),
                fmt_f64(r.ih_err),
                fmt_f64(r.ih_err_sq),
                fmt_f64(r.denom),
            ]
        })
        .collect()
}

struct AssimilatePlan {
    input: ObsInput,
    acfg: AssimilationConfig<f64>,
}

impl AssimilatePlan {
    fn build(cfg: &mut Config, warnings: &mut Vec<String>) -> Result<Self> {
        let input = ObsInput::from_config(cfg, warnings)?;
        let dt = input.dt;
        if !cfg.has("t_end") {
            set_f64(cfg, "t_end", input.stream.horizon().unwrap())?;
        }
        let t_end = cfg.f64("t_end")?;
        if t_end > input.stream.horizon().unwrap() + 1e-9 || t_end < input.t_start {
            return Err(cerr("t_end", format!("{t_end} is outside [t_start, last observation]")));
        }
        if steps_in(t_end - input.t_start, dt).is_none() {
            return Err(cerr("t_start, t_end, dt", "the window is not a multiple of dt"));
        }
        for k in ["output_interval", "max_obs_gap"] {
            if !cfg.has(k) {
                set_f64(cfg, k, dt)?;
            }
        }
        multiple_of_dt(cfg, "output_interval", dt)?;
        let mut acfg = AssimilationConfig::new(
            positive(cfg, "nu2")?,
            input.mu,
            input.stream.cutoff(),
            dt,
            input.t_start,
            t_end,
        );
        acfg.output_interval = cfg.f64("output_interval")?;
        acfg.max_obs_gap = positive(cfg, "max_obs_gap")?;
        acfg.scheme = input.scheme;
        Ok(Self { input, acfg })
    }

    fn run(self, out: &Path, m: &mut RunManifest) -> Result<i32> {
        let f = self.input.forcing(m)?;
        let truth = match &self.input.truth {
            Some(d) => Some(load_snapshots(d, self.acfg.t_start, self.acfg.t_end)?),
            None => None,
        };
        let v0 = FlowState::zero(self.input.grid(), self.acfg.t_start);
        let truth_ref = truth.as_ref().map(|t| t as &dyn Truth<f64>);
        let (series, last) = run_assimilation_from(&self.acfg, &self.input.stream, &f, truth_ref, v0)?;
        write_table(&out.join("errors.csv"), &ERROR_HEADER, error_rows(&series))?;
        m.output(out, "errors.csv")?;
        write_snapshot(&out.join("final.nnse"), &last)?;
        m.output(out, "final.nnse")?;
        Ok(EXIT_OK)
    }
}

enum Algorithm {
    One(Algorithm1Params<f64>),
    Two(Algorithm2Params<f64>),
}

struct RecoverPlan {
    input: ObsInput,
    algorithm: Algorithm,
    nu2_init: f64,
    rcfg: RecoveryConfig<f64>,
}

impl RecoverPlan {
    fn build(cfg: &mut Config, warnings: &mut Vec<String>) -> Result<Self> {
        let input = ObsInput::from_config(cfg, warnings)?;
        let epsilon = positive(cfg, "epsilon")?;
        let algorithm = match cfg.u64("algorithm")? {
            1 => {
                let delta = cfg.f64("delta")?;
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(cerr("delta", "must lie in (0, 1)"));
                }
                multiple_of_dt(cfg, "stall_lag", input.dt)?;
                Algorithm::One(Algorithm1Params {
                    epsilon,
                    delta,
                    filter_steps: cfg.usize("filter_steps")?.max(1),
                    stall_lag: cfg.f64("stall_lag")?,
                })
            }
            2 => {
                multiple_of_dt(cfg, "wait", input.dt)?;
                multiple_of_dt(cfg, "window", input.dt)?;
                Algorithm::Two(Algorithm2Params {
                    epsilon,
                    wait: cfg.f64("wait")?,
                    window: cfg.f64("window")?,
                })
            }
            a => return Err(cerr("algorithm", format!("expected 1 or 2, got {a}"))),
        };
        let mut rcfg = RecoveryConfig::new(input.mu, input.stream.cutoff(), input.dt, input.t_start);
        rcfg.trace_every = cfg.u64("trace_every")?.max(1);
        rcfg.max_rejections = cfg.usize("max_rejections")?.max(1);
        rcfg.scheme = input.scheme;
        Ok(Self {
            nu2_init: positive(cfg, "nu2_init")?,
            input,
            algorithm,
            rcfg,
        })
    }

    fn run(self, out: &Path, m: &mut RunManifest) -> Result<i32> {
        let f = self.input.forcing(m)?;
        let nu1 = match &self.input.truth {
            Some(d) => Some(reference_viscosity(d)?),
            None => None,
        };
        let state = match &self.algorithm {
            Algorithm::One(p) => algorithm1(&self.input.stream, &f, self.nu2_init, p, &self.rcfg)?,
            Algorithm::Two(p) => algorithm2(&self.input.stream, &f, self.nu2_init, p, &self.rcfg)?,
        };
        write_recovery(out, &state, nu1, m)?;
        Ok(termination_code(state.termination))
    }
}

/// `recovery.csv`, `table.csv` and `summary.csv` of a recovery run.
pub fn write_recovery(out: &Path, s: &RecoveryState<f64>, nu1: Option<f64>, m: &mut RunManifest) -> Result<()> {
    let accepted: Vec<f64> = s.updates.iter().filter(|u| u.accepted).map(|u| u.t).collect();
    let trace = s.trace.iter().map(|p| {
        let iteration = accepted.partition_point(|&t| t <= p.t + 1e-12);
        vec![
            iteration.to_string(),
            fmt_f64(p.t),
            fmt_f64(p.nu2),
            cell(nu1.map(|n| (p.nu2 - n).abs())),
            fmt_f64(p.ih_err),
        ]
    });
    write_table(&out.join("recovery.csv"), &["iteration", "t", "nu2", "abs_err_if_truth", "ih_err"], trace)?;
    m.output(out, "recovery.csv")?;
    let table = s.updates.iter().map(|u| table_row(u.nu_before, u.ih_err_sq, u.denom, u.estimate, nu1));
    write_table(&out.join("table.csv"), &TABLE_HEADER, table)?;
    m.output(out, "table.csv")?;
    let status = format!("{:?}", s.termination).to_lowercase();
    write_table(
        &out.join("summary.csv"),
        &["termination", "iterations", "nu2", "abs_err_if_truth", "t_final"],
        [vec![
            status,
            s.iteration.to_string(),
            fmt_f64(s.nu2),
            cell(nu1.map(|n| (s.nu2 - n).abs())),
            fmt_f64(s.t_final),
        ]],
    )?;
    m.output(out, "summary.csv")
}

const TABLE_HEADER: [&str; 6] = ["nu2", "ih_w_sq", "denom", "nu_tilde", "abs_err", "improvement_ratio"];

fn table_row(nu2: f64, ih_w_sq: f64, denom: f64, est: Option<f64>, nu1: Option<f64>) -> Vec<String> {
    let abs_err = est.zip(nu1).map(|(e, n)| (e - n).abs());
    let ratio = abs_err.zip(nu1).and_then(|(a, n)| (nu2 != n).then(|| a / (nu2 - n).abs()));
    vec![fmt_f64(nu2), fmt_f64(ih_w_sq), fmt_f64(denom), cell(est), cell(abs_err), cell(ratio)]
}

struct SensitivityPlan {
    grid: Grid,
    forcing: ForcingSource,
    study: SensitivityConfig<f64>,
    t_start: f64,
    initial: Option<PathBuf>,
}

impl SensitivityPlan {
    fn build(cfg: &mut Config, warnings: &mut Vec<String>) -> Result<Self> {
        let grid = grid_of(cfg)?;
        let dt = default_dt(cfg)?;
        let t_start = cfg.f64("t_start")?;
        if t_start < 0.0 || steps_in(t_start, dt).is_none() {
            return Err(cerr("t_start, dt", format!("t_start = {t_start} is not a non-negative multiple of dt = {dt}")));
        }
        let forcing = ForcingSource::from_config(cfg, &grid)?;
        let initial = resolve(cfg, "initial_snapshot", false)?;
        let timing = match cfg.str("timing")? {
            "explicit" => SourceTiming::Explicit,
            "implicit" => SourceTiming::Implicit,
            s => return Err(cerr("timing", format!("expected explicit or implicit, got `{s}`"))),
        };
        let assimilation = if cfg.bool("nudged")? {
            let mu = positive(cfg, "mu")?;
            if mu * dt > 0.5 {
                warnings.push(format!("mu * dt = {} exceeds 0.5; explicit nudging may be unstable", mu * dt));
            }
            Some((mu, cutoff_of(cfg, &grid)?))
        } else {
            None
        };
        let study = SensitivityConfig {
            nu1: cfg.f64("nu1")?,
            nu2_sequence: cfg.f64_list("nu2")?,
            dt,
            t_end: cfg.f64("t_end")?,
            assimilation,
            options: SensitivityOptions {
                timing,
                nonlinear: cfg.bool("nonlinear")?,
            },
        };
        study.validate(&grid, t_start).map_err(|e| match e {
            Error::TooFew { needed, got } => cerr("nu2", format!("need at least {needed} viscosities, got {got}")),
            Error::EqualViscosities => cerr("nu1, nu2", e.to_string()),
            e => cerr("nu1, nu2, t_end", e.to_string()),
        })?;
        Ok(Self {
            grid,
            forcing,
            study,
            t_start,
            initial,
        })
    }

    fn run(self, out: &Path, m: &mut RunManifest) -> Result<i32> {
        let f = self.forcing.materialize(&self.grid, out, m)?;
        let u0 = match &self.initial {
            Some(p) => {
                let s = read_snapshot::<f64>(p)?.state;
                if s.u.grid() != &self.grid || (s.t - self.t_start).abs() > 1e-9 {
                    return Err(cerr("initial_snapshot, t_start, n", "snapshot grid or time does not match"));
                }
                s
            }
            None => spin_up(&self.grid, self.study.nu1, self.study.dt, self.t_start, &f, self.forcing.spec())?,
        };
        let report = convergence_study(&self.study, &f, &u0)?;
        write_study(out, "sensitivity.csv", &report.plain, m)?;
        let mut rows = vec![order_row("plain", &report.plain)];
        if let Some(n) = &report.nudged {
            write_study(out, "sensitivity_nudged.csv", n, m)?;
            rows.push(order_row("nudged", n));
        }
        write_table(&out.join("order.csv"), &["variant", "order_l2H", "order_l2V", "monotone"], rows)?;
        m.output(out, "order.csv")?;
        Ok(EXIT_OK)
    }
}

/// Integrates from rest with `nu` up to `t`, discarding everything but the final state.
fn spin_up(grid: &Grid, nu: f64, dt: f64, t: f64, f: &Field, spec: ForcingSpec) -> Result<FlowState<f64>> {
    let start = FlowState::zero(grid, 0.0);
    if t == 0.0 {
        return Ok(start);
    }
    let mut cfg = SolverConfig::new(grid.n(), nu, t)?;
    cfg.dt = dt;
    cfg.snapshot_interval = t;
    cfg.observation_interval = t;
    cfg.grid = grid.clone();
    cfg.forcing = spec;
    cfg.observation_cutoff = Cutoff::from_h(1.0)?;
    run_reference_from(&cfg, f, start, &mut Discard)
}

struct Discard;

impl ReferenceSink<f64> for Discard {
    fn snapshot(&mut self, _: &FlowState<f64>) -> Result<()> {
        Ok(())
    }
    fn observation(&mut self, _: f64, _: LowModes<f64>) -> Result<()> {
        Ok(())
    }
    fn energy(&mut self, _: EnergyRow<f64>) -> Result<()> {
        Ok(())
    }
}

fn write_study(out: &Path, name: &str, s: &StudySeries<f64>, m: &mut RunManifest) -> Result<()> {
    let rows = s.rows.iter().map(|r| {
        vec![
            fmt_f64(r.nu2),
            fmt_f64(r.delta_nu),
            fmt_f64(r.e_l2h),
            fmt_f64(r.e_l2v),
            cell(r.order),
        ]
    });
    write_table(&out.join(name), &["nu2", "delta_nu", "e_l2H", "e_l2V", "order_estimate"], rows)?;
    m.output(out, name)
}

fn order_row(name: &str, s: &StudySeries<f64>) -> Vec<String> {
    vec![name.into(), fmt_f64(s.order_h), fmt_f64(s.order_v), s.monotone.to_string()]
}

struct SpectrumPlan {
    input: PathBuf,
    t_start: f64,
    t_end: f64,
}

impl SpectrumPlan {
    fn build(cfg: &mut Config) -> Result<Self> {
        let input = resolve(cfg, "input", true)?.unwrap();
        let t_start = cfg.f64("t_start")?;
        let t_end = cfg.opt_f64("t_end")?.unwrap_or(f64::INFINITY);
        if !(t_end > t_start) {
            return Err(cerr("t_start, t_end", "empty averaging window"));
        }
        Ok(Self { input, t_start, t_end })
    }

    fn run(self, out: &Path, m: &mut RunManifest) -> Result<i32> {
        let snaps = load_snapshots(&self.input, self.t_start, self.t_end)?;
        let times: Vec<f64> = snaps.iter().map(|s| s.t).collect();
        let fields: Vec<Field> = snaps.into_iter().map(|s| s.u).collect();
        let s = energy_spectrum(&fields, &times)?;
        write_table(&out.join("spectrum.csv"), &["r", "S"], spectrum_rows(&s))?;
        m.output(out, "spectrum.csv")?;
        Ok(EXIT_OK)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ExperimentKind {
    Figure2,
    Table1,
    All,
}

struct ExperimentPlan {
    kind: ExperimentKind,
    solver: SolverConfig<f64>,
    forcing: ForcingSource,
    nu1: f64,
    errors: Vec<f64>,
    mu: f64,
    t_start: f64,
    output_interval: f64,
    t_eval: f64,
    floor_window: f64,
    floor_rel: f64,
}

impl ExperimentPlan {
    fn build(cfg: &mut Config, warnings: &mut Vec<String>) -> Result<Self> {
        let kind = match cfg.str("kind")? {
            "figure2" => ExperimentKind::Figure2,
            "table1" => ExperimentKind::Table1,
            "all" => ExperimentKind::All,
            s => return Err(cerr("kind", format!("expected figure2, table1 or all, got `{s}`"))),
        };
        let grid = grid_of(cfg)?;
        let nu1 = positive(cfg, "nu1")?;
        let dt = default_dt(cfg)?;
        let t_start = cfg.f64("t_start")?;
        let t_end = cfg.f64("t_end")?;
        if !(t_start >= 0.0 && t_end > t_start) || steps_in(t_start, dt).is_none() || steps_in(t_end, dt).is_none() {
            return Err(cerr("t_start, t_end, dt", "need 0 <= t_start < t_end, both multiples of dt"));
        }
        multiple_of_dt(cfg, "output_interval", dt)?;
        let output_interval = cfg.f64("output_interval")?;
        if steps_in(t_start, output_interval).is_none() || steps_in(t_end - t_start, output_interval).is_none() {
            return Err(cerr("t_start, t_end, output_interval", "times must fall on the output grid"));
        }
        let errors = cfg.f64_list("nu2_errors")?;
        if errors.is_empty() || errors.iter().any(|e| !(*e > -1.0)) {
            return Err(cerr("nu2_errors", "relative errors must exceed -1"));
        }
        let t_eval = cfg.f64("t_eval")?;
        if kind != ExperimentKind::Figure2
            && (t_eval < t_start || t_eval > t_end || steps_in(t_eval - t_start, output_interval).is_none())
        {
            return Err(cerr("t_eval", format!("{t_eval} is not an output time in [{t_start}, {t_end}]")));
        }
        let mu = positive(cfg, "mu")?;
        if mu * dt > 0.5 {
            warnings.push(format!("mu * dt = {} exceeds 0.5; explicit nudging may be unstable", mu * dt));
        }
        let forcing = ForcingSource::from_config(cfg, &grid)?;
        let spec = forcing.spec();
        let solver = SolverConfig {
            nu: nu1,
            dt,
            t_end,
            observation_cutoff: cutoff_of(cfg, &grid)?,
            grid,
            forcing: spec,
            snapshot_interval: output_interval,
            observation_interval: dt,
            scheme: scheme_of(cfg)?,
        };
        solver.validate().map_err(|e| cerr("n, nu1, dt", e.to_string()))?;
        Ok(Self {
            kind,
            solver,
            forcing,
            nu1,
            errors,
            mu,
            t_start,
            output_interval,
            t_eval,
            floor_window: positive(cfg, "floor_window")?,
            floor_rel: positive(cfg, "floor_rel")?,
        })
    }

    fn run(self, out: &Path, m: &mut RunManifest) -> Result<i32> {
        let f = self.forcing.materialize(&self.solver.grid, out, m)?;
        let mut reference = InMemoryReference::new(&self.solver, self.t_start)?.with_spectrum(self.t_start);
        run_reference_from(&self.solver, &f, FlowState::zero(&self.solver.grid, 0.0), &mut reference)?;
        write_table(&out.join("energy.csv"), &ENERGY_HEADER, reference.energy.iter().map(energy_cells))?;
        m.output(out, "energy.csv")?;
        let spectrum = reference.spectrum.as_ref().unwrap().finish()?;
        write_table(&out.join("spectrum.csv"), &["r", "S"], spectrum_rows(&spectrum))?;
        m.output(out, "spectrum.csv")?;

        let results: Vec<Result<(f64, ErrorSeries<f64>)>> = self
            .errors
            .par_iter()
            .map(|e| {
                let nu2 = self.nu1 * (1.0 + e);
                let mut acfg = AssimilationConfig::new(
                    nu2,
                    self.mu,
                    self.solver.observation_cutoff,
                    self.solver.dt,
                    self.t_start,
                    self.solver.t_end,
                );
                acfg.output_interval = self.output_interval;
                acfg.scheme = self.solver.scheme;
                let v0 = FlowState::zero(&self.solver.grid, self.t_start);
                run_assimilation_from(&acfg, &reference.observations, &f, Some(&reference), v0).map(|(s, _)| (nu2, s))
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        if self.kind != ExperimentKind::Table1 {
            let mut floors = Vec::new();
            for (i, ((nu2, s), e)) in results.iter().zip(&self.errors).enumerate() {
                let name = format!("series_{i:02}.csv");
                write_table(&out.join(&name), &ERROR_HEADER, error_rows(s))?;
                m.output(out, &name)?;
                floors.push(vec![
                    name,
                    fmt_f64(*nu2),
                    fmt_f64(*e),
                    cell(s.l2_floor()),
                    cell(s.ih_floor()),
                    cell(s.floor_reached_at(self.floor_window, self.floor_rel)),
                ]);
            }
            write_table(
                &out.join("floors.csv"),
                &["series", "nu2", "rel_err", "l2_floor", "ih_floor", "floor_time"],
                floors,
            )?;
            m.output(out, "floors.csv")?;
        }
        if self.kind != ExperimentKind::Figure2 {
            let mut rows = Vec::new();
            for (nu2, s) in &results {
                let r = s
                    .rows
                    .iter()
                    .find(|r| (r.t - self.t_eval).abs() <= 1e-9 * self.t_eval.abs().max(1.0))
                    .ok_or_else(|| cerr("t_eval", "no error row at t_eval"))?;
                let est = match estimate_instant(*nu2, self.mu, r.ih_err_sq, r.denom) {
                    Ok(v) => Some(v),
                    Err(Error::DegenerateDenominator { .. }) => None,
                    Err(e) => return Err(e),
                };
                rows.push(table_row(*nu2, r.ih_err_sq, r.denom, est, Some(self.nu1)));
            }
            write_table(&out.join("table1.csv"), &TABLE_HEADER, rows)?;
            m.output(out, "table1.csv")?;
        }
        Ok(EXIT_OK)
    }
}
