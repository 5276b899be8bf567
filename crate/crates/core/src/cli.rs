//! Command-line front end.
//!
//! Every verb writes its results under the output directory (`--out`, or
//! `PUF_ENDURANCE_OUT`, or `./out`). Files are written to a temporary name and
//! renamed into place. A JSON config file supplies defaults; flags win.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attack::{attack_curve, write_curve_csv, AttackDataset, AttackResult, TrainConfig};
use crate::chain::{load_chain, BuiltinPuf, ChainParams, MarkovChainSpec, SetLoop};
use crate::dist::CountDistribution;
use crate::error::{Error, Result};
use crate::lifetime::{
    geometric_grid, write_half_life_table, CombineRule, HalfLifeRow, LifetimeModel, LifetimeParams, Mode,
};
use crate::metrics::{
    distance_histogram, histogram_mean, pack, reliability, weight_histogram, write_histogram_csv, MetricsSummary,
    ResponseSet,
};
use crate::occupancy::{per_challenge_ops, sample_trajectories, EvolveOptions, PerChallengeOps};
use crate::sim::{
    challenge_stream, eval_all, pulses_for_level, read_dataset, write_dataset, Challenge, CrpRecord, DeviceConfig,
    PufInstance, PufKind,
};

pub const OUT_ENV: &str = "PUF_ENDURANCE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub min: u64,
    pub max: u64,
    pub factor: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            min: 1,
            max: 10_000_000,
            factor: 1.2,
        }
    }
}

impl GridSpec {
    fn points(&self) -> Result<Vec<u64>> {
        if self.min < 1 || self.max < self.min || !(self.factor > 1.0) {
            return Err(Error::InvalidParams(format!(
                "grid needs 1 <= min <= max and factor > 1, got {self:?}"
            )));
        }
        Ok(geometric_grid(self.min, self.max, self.factor))
    }
}

/// Contents of `--config`. Every field is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub chain: ChainParams,
    pub evolve: EvolveOptions,
    pub lifetime: LifetimeParams,
    pub grid: GridSpec,
    pub device: DeviceConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub challenge_seed: u64,
    pub devices: usize,
    pub crps: usize,
    pub repeats: usize,
    pub width: usize,
    pub sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            chain: ChainParams::default(),
            evolve: EvolveOptions::default(),
            lifetime: LifetimeParams::default(),
            grid: GridSpec::default(),
            device: DeviceConfig {
                noise_sigma: 0.5,
                ..Default::default()
            },
            train: TrainConfig::default(),
            seed: 1,
            challenge_seed: 42,
            devices: 2,
            crps: 102_400,
            repeats: 0,
            width: 128,
            sizes: (1..=9).map(|k| k * 10_000).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pufwear", version, about = "Endurance, simulation and attack tooling for NVM-based PUFs")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,

    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-challenge set/reset operation distributions of one chain.
    Analyze(AnalyzeArgs),
    /// Probability-of-death curves and half-lives.
    Lifetime(LifetimeArgs),
    /// Simulated devices and their CRP datasets.
    Simulate(SimulateArgs),
    /// Uniformity, uniqueness and reliability of CRP datasets.
    Metrics(MetricsArgs),
    /// Logistic-regression modeling attack over training sizes.
    Attack(AttackArgs),
    /// Writes a chain as a JSON chain document.
    ExportChain(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ChainArgs {
    /// Built-in chain: reap-nvm or a-mpuf.
    #[arg(long, conflicts_with = "chain")]
    pub puf: Option<BuiltinPuf>,
    /// Chain document (JSON).
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Start from the calibrated preset of each built-in chain.
    #[arg(long)]
    pub calibrated: bool,
    #[arg(long, value_parser = parse_set_loop)]
    pub set_loop: Option<SetLoop>,
    #[arg(long)]
    pub mean_set_pulses: Option<f64>,
    #[arg(long)]
    pub reset_pulses: Option<f64>,
    #[arg(long)]
    pub pulse_retry: Option<f64>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long)]
    pub n_levels: Option<usize>,
    /// Terminal-mass tolerance of the occupancy evolution.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Adds Monte Carlo columns from this many trajectories (e.g. 1e6).
    #[arg(long, value_parser = parse_count)]
    pub oracle: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LifetimeArgs {
    /// Built-in chains to evaluate (repeatable).
    #[arg(long = "puf")]
    pub pufs: Vec<BuiltinPuf>,
    /// Chain documents to evaluate (repeatable).
    #[arg(long = "chain")]
    pub chains: Vec<PathBuf>,
    #[arg(long)]
    pub calibrated: bool,
    #[arg(long, value_parser = parse_set_loop)]
    pub set_loop: Option<SetLoop>,
    #[arg(long)]
    pub mean_set_pulses: Option<f64>,
    #[arg(long)]
    pub pulse_retry: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// set, reset, combined or all.
    #[arg(long, default_value = "all")]
    pub mode: String,
    /// sum or either-exceeds.
    #[arg(long, value_parser = parse_combine)]
    pub combine: Option<CombineRule>,
    #[arg(long)]
    pub endurance_limit: Option<usize>,
    #[arg(long)]
    pub cell_count: Option<usize>,
    #[arg(long)]
    pub dead_fraction: Option<f64>,
    #[arg(long, value_parser = parse_count)]
    pub grid_min: Option<u64>,
    #[arg(long, value_parser = parse_count)]
    pub grid_max: Option<u64>,
    #[arg(long)]
    pub grid_factor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub devices: Option<usize>,
    #[arg(long, value_parser = parse_count)]
    pub crps: Option<u64>,
    /// Device `i` uses seed `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the challenge sequence shared by all devices.
    #[arg(long)]
    pub challenge_seed: Option<u64>,
    /// Simulate plain arbiter PUFs instead (only `apuf` is accepted).
    #[arg(long)]
    pub baseline: Option<String>,
    /// Extra noisy re-evaluations of the same challenges per device.
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub variation: Option<f64>,
    #[arg(long)]
    pub nvm_strength: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// CRP datasets, one per device, answering the same challenges.
    #[arg(required = true)]
    pub datasets: Vec<PathBuf>,
    /// Re-evaluations of the first dataset, for reliability.
    #[arg(long = "repeat")]
    pub repeats: Vec<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub reap: Option<PathBuf>,
    #[arg(long)]
    pub apuf: Option<PathBuf>,
    /// Comma-separated training sizes.
    #[arg(long, value_delimiter = ',', value_parser = parse_count)]
    pub sizes: Vec<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Destination file (default: `<out>/<name>.json`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let x: f64 = s.parse().map_err(|_| format!("not a count: '{s}'"))?;
    if x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64 {
        Ok(x as u64)
    } else {
        Err(format!("not a whole nonnegative count: '{s}'"))
    }
}

fn parse_set_loop(s: &str) -> std::result::Result<SetLoop, String> {
    match s {
        "geometric" => Ok(SetLoop::Geometric),
        "level-expanded" => Ok(SetLoop::LevelExpanded),
        _ => Err(format!("expected geometric or level-expanded, got '{s}'")),
    }
}

fn parse_combine(s: &str) -> std::result::Result<CombineRule, String> {
    match s {
        "sum" => Ok(CombineRule::Sum),
        "either-exceeds" => Ok(CombineRule::EitherExceeds),
        _ => Err(format!("expected sum or either-exceeds, got '{s}'")),
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParams(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

struct Ctx {
    out: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, bytes)?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx { out: cli.out, cfg };
    match cli.command {
        Command::Analyze(a) => cmd_analyze(&ctx, a),
        Command::Lifetime(a) => cmd_lifetime(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Metrics(a) => cmd_metrics(&ctx, a),
        Command::Attack(a) => cmd_attack(&ctx, a),
        Command::ExportChain(a) => cmd_export_chain(&ctx, a),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn chain_params(base: ChainParams, a: &ChainArgs) -> ChainParams {
    let mut p = base;
    if let Some(v) = a.set_loop {
        p.set_loop = v;
    }
    if let Some(v) = a.mean_set_pulses {
        p.mean_set_pulses = v;
    }
    if let Some(v) = a.reset_pulses {
        p.reset_pulses = v;
    }
    if let Some(v) = a.pulse_retry {
        p.pulse_retry = v;
    }
    if let Some(v) = a.n_pairs {
        p.n_pairs = v;
    }
    if let Some(v) = a.n_levels {
        p.n_levels = v;
    }
    p
}

fn calibrated_base(puf: BuiltinPuf, set_loop: Option<SetLoop>) -> ChainParams {
    match (puf, set_loop) {
        (BuiltinPuf::ReapNvm, Some(SetLoop::Geometric)) => ChainParams::reap_nvm_calibrated_geometric(),
        (BuiltinPuf::AMpuf, Some(SetLoop::Geometric)) => ChainParams::ampuf_calibrated_geometric(),
        (p, _) => p.calibrated_params(),
    }
}

fn evolve_opts(ctx: &Ctx, epsilon: Option<f64>) -> Result<EvolveOptions> {
    let mut o = ctx.cfg.evolve;
    if let Some(e) = epsilon {
        o.epsilon = e;
    }
    if !(o.epsilon > 0.0 && o.epsilon < 1.0) {
        return Err(Error::InvalidParams(format!("epsilon must be in (0, 1), got {}", o.epsilon)));
    }
    Ok(o)
}

/// Resolves `--puf` / `--chain` into a named chain.
fn resolve_chain(ctx: &Ctx, a: &ChainArgs) -> Result<(String, MarkovChainSpec)> {
    match (&a.chain, a.puf) {
        (Some(path), _) => Ok((file_stem(path), load_chain(path)?)),
        (None, Some(puf)) => {
            let base = if a.calibrated {
                calibrated_base(puf, a.set_loop)
            } else {
                ctx.cfg.chain
            };
            Ok((puf.name().to_string(), puf.build(&chain_params(base, a))?))
        }
        (None, None) => Err(Error::InvalidParams("one of --puf or --chain is required".into())),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "chain".into())
}

#[derive(Serialize)]
struct OracleReport {
    trajectories: u64,
    seed: u64,
    tv_set: f64,
    tv_reset: f64,
    tv_combined: f64,
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    chain: &'a str,
    states: usize,
    epsilon: f64,
    mean_set: f64,
    mean_reset: f64,
    ops: &'a PerChallengeOps,
    oracle: Option<OracleReport>,
}

fn dist_with_oracle_csv(d: &CountDistribution, mc: Option<&CountDistribution>) -> Result<Vec<u8>> {
    match mc {
        None => csv_bytes(|b| d.write_csv(b)),
        Some(m) => csv_bytes(|b| {
            let mut wr = csv::Writer::from_writer(b);
            wr.write_record(["count", "probability", "mc_probability"])?;
            for k in 0..d.pmf.len().max(m.pmf.len()) {
                wr.write_record([k.to_string(), d.prob(k).to_string(), m.prob(k).to_string()])?;
            }
            wr.flush().map_err(|e| Error::io("<csv>", e))?;
            Ok(())
        }),
    }
}

fn cmd_analyze(ctx: &Ctx, a: AnalyzeArgs) -> Result<()> {
    let (name, chain) = resolve_chain(ctx, &a.chain)?;
    let opts = evolve_opts(ctx, a.chain.epsilon)?;
    let ops = per_challenge_ops(&chain, &opts)?;
    let seed = a.seed.unwrap_or(ctx.cfg.seed);
    let mc = a.oracle.map(|n| {
        if n == 0 {
            return Err(Error::InvalidParams("--oracle needs at least one trajectory".into()));
        }
        Ok(sample_trajectories(&chain, n, seed))
    });
    let mc = mc.transpose()?;
    ctx.write(
        &format!("{name}_set.csv"),
        &dist_with_oracle_csv(&ops.set_dist, mc.as_ref().map(|m| &m.set_dist))?,
    )?;
    ctx.write(
        &format!("{name}_reset.csv"),
        &dist_with_oracle_csv(&ops.reset_dist, mc.as_ref().map(|m| &m.reset_dist))?,
    )?;
    let oracle = mc.as_ref().map(|m| OracleReport {
        trajectories: a.oracle.unwrap_or(0),
        seed,
        tv_set: ops.set_dist.tv_distance(&m.set_dist),
        tv_reset: ops.reset_dist.tv_distance(&m.reset_dist),
        tv_combined: ops.combined_dist.tv_distance(&m.combined_dist),
    });
    if let Some(o) = &oracle {
        println!("oracle TV: set {:.3e}, reset {:.3e}", o.tv_set, o.tv_reset);
    }
    let report = AnalyzeReport {
        chain: &name,
        states: chain.len(),
        epsilon: opts.epsilon,
        mean_set: ops.set_dist.mean(),
        mean_reset: ops.reset_dist.mean(),
        ops: &ops,
        oracle,
    };
    println!("{name}: mean set {:.6}, mean reset {:.6}", report.mean_set, report.mean_reset);
    ctx.write(&format!("{name}_ops.json"), &json_bytes(&report))?;
    Ok(())
}

fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    if s == "all" {
        return Ok(vec![Mode::SetOnly, Mode::ResetOnly, Mode::Combined]);
    }
    s.split(',').map(|m| m.trim().parse()).collect()
}

#[derive(Serialize)]
struct LifetimeEntry {
    puf: String,
    mode: Mode,
    half_life: u64,
    transition_decades: Option<f64>,
}

#[derive(Serialize)]
struct Ratio {
    mode: Mode,
    reap_nvm_over_a_mpuf: f64,
}

#[derive(Serialize)]
struct LifetimeReport {
    params: LifetimeParams,
    grid: GridSpec,
    results: Vec<LifetimeEntry>,
    ratios: Vec<Ratio>,
}

fn cmd_lifetime(ctx: &Ctx, a: LifetimeArgs) -> Result<()> {
    let modes = parse_modes(&a.mode)?;
    let opts = evolve_opts(ctx, a.epsilon)?;
    let mut params = ctx.cfg.lifetime;
    if let Some(v) = a.combine {
        params.combine = v;
    }
    if let Some(v) = a.endurance_limit {
        params.endurance_limit = v;
    }
    if let Some(v) = a.cell_count {
        params.cell_count = v;
    }
    if let Some(v) = a.dead_fraction {
        params.dead_fraction = v;
    }
    params.check()?;
    let mut grid = ctx.cfg.grid;
    if let Some(v) = a.grid_min {
        grid.min = v;
    }
    if let Some(v) = a.grid_max {
        grid.max = v;
    }
    if let Some(v) = a.grid_factor {
        grid.factor = v;
    }
    let points = grid.points()?;

    let chain_args = ChainArgs {
        puf: None,
        chain: None,
        calibrated: a.calibrated,
        set_loop: a.set_loop,
        mean_set_pulses: a.mean_set_pulses,
        reset_pulses: None,
        pulse_retry: a.pulse_retry,
        n_pairs: None,
        n_levels: None,
        epsilon: None,
    };
    let mut targets: Vec<(String, MarkovChainSpec)> = Vec::new();
    let pufs = if a.pufs.is_empty() && a.chains.is_empty() {
        vec![BuiltinPuf::ReapNvm, BuiltinPuf::AMpuf]
    } else {
        a.pufs.clone()
    };
    for puf in pufs {
        let args = ChainArgs {
            puf: Some(puf),
            ..chain_args.clone()
        };
        targets.push(resolve_chain(ctx, &args)?);
    }
    for path in &a.chains {
        targets.push((file_stem(path), load_chain(path)?));
    }

    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (name, chain) in &targets {
        let ops = per_challenge_ops(chain, &opts)?;
        let mut row = HalfLifeRow {
            puf: name.clone(),
            set: None,
            reset: None,
            combined: None,
        };
        for &mode in &modes {
            let model = LifetimeModel::from_ops(ops.clone(), LifetimeParams { mode, ..params })?;
            let curve = model.refined_curve(&points)?;
            ctx.write(
                &format!("lifetime_{name}_{}.csv", mode.name()),
                &csv_bytes(|b| curve.write_csv(b))?,
            )?;
            let hl = model.half_life(grid.max)?;
            println!("{name} {}: half-life {hl}", mode.name());
            match mode {
                Mode::SetOnly => row.set = Some(hl),
                Mode::ResetOnly => row.reset = Some(hl),
                Mode::Combined => row.combined = Some(hl),
            }
            results.push(LifetimeEntry {
                puf: name.clone(),
                mode,
                half_life: hl,
                transition_decades: curve.transition_span(0.01, 0.99).map(f64::log10),
            });
        }
        rows.push(row);
    }

    let mut ratios = Vec::new();
    let find = |n: &str, m: Mode| results.iter().find(|r| r.puf == n && r.mode == m).map(|r| r.half_life);
    for &mode in &modes {
        if let (Some(r), Some(am)) = (find("reap-nvm", mode), find("a-mpuf", mode)) {
            let ratio = r as f64 / am as f64;
            println!("ratio reap-nvm / a-mpuf ({}): {ratio:.2}", mode.name());
            ratios.push(Ratio {
                mode,
                reap_nvm_over_a_mpuf: ratio,
            });
        }
    }
    ctx.write("half_life.csv", &csv_bytes(|b| write_half_life_table(&rows, b))?)?;
    let report = LifetimeReport {
        params,
        grid,
        results,
        ratios,
    };
    ctx.write("lifetime.json", &json_bytes(&report))?;
    Ok(())
}

#[derive(Serialize)]
struct DeviceSummary {
    seed: u64,
    dataset: String,
    crps: usize,
    pulses_issued: u64,
    total_set_wear: u64,
    total_reset_wear: u64,
    repeats: Vec<String>,
}

fn dataset_bytes(records: &[CrpRecord]) -> Result<Vec<u8>> {
    csv_bytes(|b| write_dataset(records, b))
}

fn cmd_simulate(ctx: &Ctx, a: SimulateArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut dev = cfg.device;
    match a.baseline.as_deref() {
        None => {}
        Some("apuf") => dev.kind = PufKind::Apuf,
        Some(other) => {
            return Err(Error::InvalidParams(format!("unknown baseline '{other}' (expected apuf)")));
        }
    }
    if let Some(v) = a.noise {
        dev.noise_sigma = v;
    }
    if let Some(v) = a.variation {
        dev.variation_sigma = v;
    }
    if let Some(v) = a.nvm_strength {
        dev.nvm_strength = v;
    }
    let devices = a.devices.unwrap_or(cfg.devices);
    let crps = a.crps.map(|n| n as usize).unwrap_or(cfg.crps);
    let seed = a.seed.unwrap_or(cfg.seed);
    let challenge_seed = a.challenge_seed.unwrap_or(cfg.challenge_seed);
    let repeats = a.repeats.unwrap_or(cfg.repeats);
    if devices == 0 || crps == 0 {
        return Err(Error::InvalidParams("--devices and --crps must be at least 1".into()));
    }
    let prefix = match dev.kind {
        PufKind::ReapNvm => "reap-nvm",
        PufKind::Apuf => "apuf",
    };
    let challenges: Vec<Challenge> = challenge_stream(dev.kind, challenge_seed).take(crps).collect();
    let pulses_issued: u64 = match dev.kind {
        PufKind::ReapNvm => challenges.iter().map(|c| pulses_for_level(c.level)).sum(),
        PufKind::Apuf => 0,
    };

    let mut summaries = Vec::new();
    for i in 0..devices {
        let device_seed = seed + i as u64;
        let mut device = PufInstance::new(device_seed, dev)?;
        let fresh = device.clone();
        let records = eval_all(&mut device, &challenges, seed);
        let dataset = format!("{prefix}_{i}.jsonl");
        ctx.write(&dataset, &dataset_bytes(&records)?)?;
        ctx.write(&format!("{prefix}_{i}_device.json"), &json_bytes(&device))?;
        if device.total_set_wear() != 2 * pulses_issued {
            return Err(Error::Dataset(format!(
                "wear accounting mismatch on device {i}: {} vs {}",
                device.total_set_wear(),
                2 * pulses_issued
            )));
        }
        let mut rep_names = Vec::new();
        for k in 1..=repeats {
            let mut d = fresh.clone();
            let rep = eval_all(&mut d, &challenges, seed.wrapping_add(k as u64 * 0x1_0000_0001));
            let name = format!("{prefix}_{i}_rep{k}.jsonl");
            ctx.write(&name, &dataset_bytes(&rep)?)?;
            rep_names.push(name);
        }
        summaries.push(DeviceSummary {
            seed: device_seed,
            dataset,
            crps,
            pulses_issued,
            total_set_wear: device.total_set_wear(),
            total_reset_wear: device.total_reset_wear(),
            repeats: rep_names,
        });
    }
    #[derive(Serialize)]
    struct Report<'a> {
        config: DeviceConfig,
        challenge_seed: u64,
        devices: &'a [DeviceSummary],
    }
    ctx.write(
        &format!("{prefix}_simulate.json"),
        &json_bytes(&Report {
            config: dev,
            challenge_seed,
            devices: &summaries,
        }),
    )?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<CrpRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(f)).map_err(|e| match e {
        Error::Dataset(m) => Error::Dataset(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn same_challenges(a: &[CrpRecord], b: &[CrpRecord]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.challenge == y.challenge)
}

fn cmd_metrics(ctx: &Ctx, a: MetricsArgs) -> Result<()> {
    let width = a.width.unwrap_or(ctx.cfg.width);
    let data: Vec<Vec<CrpRecord>> = a.datasets.iter().map(|p| read_records(p)).collect::<Result<_>>()?;
    let sets: Vec<ResponseSet> = data
        .iter()
        .map(|d| pack(&d.iter().map(|r| r.response).collect::<Vec<_>>(), width))
        .collect::<Result<_>>()?;
    for (p, s) in a.datasets.iter().zip(&sets) {
        if s.words.is_empty() {
            return Err(Error::InsufficientData(format!(
                "{} holds fewer than {width} responses",
                p.display()
            )));
        }
        if s.dropped > 0 {
            eprintln!("warning: {}: dropped {} trailing bits", p.display(), s.dropped);
        }
    }

    let mut uniformity = Vec::new();
    for (i, s) in sets.iter().enumerate() {
        let h = weight_histogram(s);
        uniformity.push(100.0 * histogram_mean(&h) / width as f64);
        ctx.write(&format!("uniformity_{i}.csv"), &csv_bytes(|b| write_histogram_csv(&h, b))?)?;
    }

    let uniqueness = if sets.len() < 2 {
        eprintln!("uniqueness needs responses from at least 2 devices; skipped");
        None
    } else {
        if data.iter().any(|d| !same_challenges(&data[0], d)) {
            return Err(Error::Dataset(
                "uniqueness needs every dataset to answer the same challenges".into(),
            ));
        }
        let mut h = vec![0u64; width + 1];
        for i in 0..sets.len() - 1 {
            for j in i + 1..sets.len() {
                for (acc, c) in h.iter_mut().zip(distance_histogram(&sets[i], &sets[j])?) {
                    *acc += c;
                }
            }
        }
        ctx.write("uniqueness.csv", &csv_bytes(|b| write_histogram_csv(&h, b))?)?;
        Some(100.0 * histogram_mean(&h) / width as f64)
    };

    let reliability_pct = if a.repeats.is_empty() {
        None
    } else {
        let reps: Vec<Vec<CrpRecord>> = a.repeats.iter().map(|p| read_records(p)).collect::<Result<_>>()?;
        if reps.iter().any(|r| !same_challenges(&data[0], r)) {
            return Err(Error::Dataset(
                "repeats must answer the same challenges as the first dataset".into(),
            ));
        }
        let rep_sets: Vec<ResponseSet> = reps
            .iter()
            .map(|d| pack(&d.iter().map(|r| r.response).collect::<Vec<_>>(), width))
            .collect::<Result<_>>()?;
        let mut h = vec![0u64; width + 1];
        let mut acc = 0.0;
        for (w, reference) in sets[0].words.iter().enumerate() {
            let words: Vec<_> = rep_sets.iter().map(|s| s.words[w].clone()).collect();
            acc += reliability(reference, &words)?;
            for r in &words {
                h[reference.hamming(r)?] += 1;
            }
        }
        ctx.write("reliability.csv", &csv_bytes(|b| write_histogram_csv(&h, b))?)?;
        Some(acc / sets[0].words.len() as f64)
    };

    let summary = MetricsSummary {
        width,
        words_per_device: sets.iter().map(|s| s.words.len()).collect(),
        dropped_bits: sets.iter().map(|s| s.dropped).collect(),
        uniformity,
        uniqueness,
        reliability: reliability_pct,
    };
    for (i, u) in summary.uniformity.iter().enumerate() {
        println!("uniformity[{i}]: {u:.2}%");
    }
    if let Some(u) = summary.uniqueness {
        println!("uniqueness: {u:.2}%");
    }
    if let Some(r) = summary.reliability {
        println!("reliability: {r:.2}%");
    }
    ctx.write("metrics.json", &json_bytes(&summary))?;
    Ok(())
}

fn cmd_attack(ctx: &Ctx, a: AttackArgs) -> Result<()> {
    let sizes: Vec<usize> = if a.sizes.is_empty() {
        ctx.cfg.sizes.clone()
    } else {
        a.sizes.iter().map(|&n| n as usize).collect()
    };
    let seed = a.seed.unwrap_or(ctx.cfg.seed);
    let mut train = ctx.cfg.train;
    if let Some(v) = a.max_epochs {
        train.max_epochs = v;
    }
    if train.batch_size == 0 || !(train.learning_rate > 0.0) {
        return Err(Error::InvalidParams("batch_size and learning_rate must be positive".into()));
    }
    let mut inputs = Vec::new();
    if let Some(p) = &a.apuf {
        inputs.push((PufKind::Apuf, p));
    }
    if let Some(p) = &a.reap {
        inputs.push((PufKind::ReapNvm, p));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidParams("give --apuf and/or --reap datasets".into()));
    }
    let mut all: Vec<AttackResult> = Vec::new();
    for (kind, path) in inputs {
        let data = AttackDataset::from_records(&read_records(path)?, kind);
        let curve = attack_curve(&data, &sizes, seed, &train)?;
        for r in &curve {
            println!(
                "{kind:?} train {}: test accuracy {:.4} ({} epochs)",
                r.train_size, r.test_accuracy, r.epochs
            );
        }
        all.extend(curve);
    }
    let apuf: Vec<_> = all.iter().filter(|r| r.source == PufKind::Apuf).collect();
    let reap: Vec<_> = all.iter().filter(|r| r.source == PufKind::ReapNvm).collect();
    let separation: Vec<f64> = apuf
        .iter()
        .zip(&reap)
        .map(|(x, y)| x.test_accuracy - y.test_accuracy)
        .collect();
    if !separation.is_empty() {
        let min = separation.iter().copied().fold(f64::INFINITY, f64::min);
        println!("minimum separation: {min:.4}");
    }
    ctx.write("attack_curve.csv", &csv_bytes(|b| write_curve_csv(&all, b))?)?;
    #[derive(Serialize)]
    struct Report<'a> {
        train: TrainConfig,
        results: &'a [AttackResult],
        separation: Vec<f64>,
    }
    ctx.write(
        "attack.json",
        &json_bytes(&Report {
            train,
            results: &all,
            separation,
        }),
    )?;
    Ok(())
}

fn cmd_export_chain(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    let (name, chain) = resolve_chain(ctx, &a.chain)?;
    let bytes = chain.export_json().into_bytes();
    match a.output {
        Some(p) => {
            write_atomic(&p, &bytes)?;
            println!("wrote {}", p.display());
        }
        None => {
            ctx.write(&format!("{name}.json"), &bytes)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_accept_scientific_notation() {
        assert_eq!(parse_count("1e6"), Ok(1_000_000));
        assert_eq!(parse_count("12800"), Ok(12_800));
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("-3").is_err());
    }

    #[test]
    fn config_file_fields_are_optional() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "lifetime": {"mode": "reset-only"}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lifetime.mode, Mode::ResetOnly);
        assert_eq!(cfg.lifetime.endurance_limit, 1000);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 9}"#).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(main_with_args(["pufwear", "frobnicate"]), 1);
        assert_eq!(main_with_args(["pufwear", "--help"]), 0);
    }
}
