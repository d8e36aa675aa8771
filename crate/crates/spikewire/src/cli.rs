use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use spikewire::ann::AnnGraph;
use spikewire::calibrate::{calibrate, CalibrationConfig, CalibrationReport, Method};
use spikewire::convert::{convert, normalize_weights, ConvertOptions, Mode, SnnGraph};
use spikewire::neuron::FiringRule;
use spikewire::par::Execution;
use spikewire::sim::{self, compare, energy_report_mean, run_batch, SimOptions, SimulationTrace};
use spikewire::threshold::{IterationScheme, SolverConfig};
use spikewire::toy;

pub const TRACE_SCHEMA: &str = "spikewire.trace/1";
pub const ENERGY_SCHEMA: &str = "spikewire.energy/1";
pub const COMPARE_SCHEMA: &str = "spikewire.compare/1";

#[derive(Parser, Debug)]
#[command(name = "spikewire", version, about = "Convert ReLU/attention networks to differential-coded spiking networks")]
pub struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true, env = "SPIKEWIRE_SEQUENTIAL")]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a bundled toy model and a synthetic Gaussian dataset.
    Generate(GenerateArgs),
    /// Choose a threshold for every spiking layer.
    Calibrate(CalibrateArgs),
    /// Build the spiking graph from a model and a calibration report.
    Convert(ConvertArgs),
    /// Simulate one sample and export its trace.
    Run(RunArgs),
    /// Estimate SNN/ANN energy over a dataset.
    Energy(EnergyArgs),
    /// Tabulate ANN/SNN agreement and energy against the step count.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ToyKind {
    Mlp,
    Cnn,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TraceFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Differential,
    Rate,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Differential => Mode::Differential,
            ModeArg::Rate => Mode::Rate,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RuleArg {
    Argmin,
    Hw,
}

impl From<RuleArg> for FiringRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Argmin => FiringRule::Argmin,
            RuleArg::Hw => FiringRule::Hw,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Auto,
    Iteration,
    Percentile,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "mlp", env = "SPIKEWIRE_KIND")]
    pub kind: ToyKind,
    /// Layer widths of the MLP.
    #[arg(long, value_delimiter = ',', default_value = "16,8,4", env = "SPIKEWIRE_SIZES")]
    pub sizes: Vec<usize>,
    /// Attention embedding width and sequence length.
    #[arg(long, default_value_t = 4, env = "SPIKEWIRE_DIM")]
    pub dim: usize,
    #[arg(long, default_value_t = 3, env = "SPIKEWIRE_SEQ")]
    pub seq: usize,
    #[arg(long, default_value_t = 0, env = "SPIKEWIRE_SEED")]
    pub seed: u64,
    /// Model manifest to write (weights go next to it).
    #[arg(long, env = "SPIKEWIRE_OUT")]
    pub out: PathBuf,
    /// Dataset CSV to write alongside the model.
    #[arg(long, env = "SPIKEWIRE_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 256, env = "SPIKEWIRE_SAMPLES")]
    pub samples: usize,
    #[arg(long, default_value_t = 0.0, env = "SPIKEWIRE_MEAN", allow_negative_numbers = true)]
    pub mean: f64,
    #[arg(long, default_value_t = 1.0, env = "SPIKEWIRE_STD")]
    pub std: f64,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long, env = "SPIKEWIRE_MODEL")]
    pub model: PathBuf,
    /// CSV file (one sample per row) or directory of raw f32 files.
    #[arg(long, env = "SPIKEWIRE_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "auto", env = "SPIKEWIRE_METHOD")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 4, env = "SPIKEWIRE_N_THRESHOLDS")]
    pub n_thresholds: u32,
    #[arg(long = "timesteps-T", default_value_t = 64, env = "SPIKEWIRE_TIMESTEPS_T")]
    pub timesteps: usize,
    /// Quantization levels of the error model (default 2^n·T).
    #[arg(long = "quant-levels-N", env = "SPIKEWIRE_QUANT_LEVELS_N")]
    pub quant_levels: Option<u64>,
    #[arg(long, default_value_t = 1e-6, env = "SPIKEWIRE_EPS")]
    pub eps: f64,
    #[arg(long, default_value_t = 1.0, env = "SPIKEWIRE_THETA0")]
    pub theta0: f64,
    #[arg(long, default_value_t = 500, env = "SPIKEWIRE_MAX_ITERS")]
    pub max_iters: usize,
    /// Use undamped fixed-point updates.
    #[arg(long, env = "SPIKEWIRE_PLAIN_ITERATION")]
    pub plain_iteration: bool,
    #[arg(long, default_value_t = 0.999, env = "SPIKEWIRE_PERCENTILE_P")]
    pub percentile_p: f64,
    #[arg(long, default_value_t = 1.0, env = "SPIKEWIRE_SCALE_C")]
    pub scale_c: f64,
    #[arg(long, default_value_t = 0, env = "SPIKEWIRE_SEED")]
    pub seed: u64,
    #[arg(long, env = "SPIKEWIRE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long, env = "SPIKEWIRE_MODEL")]
    pub model: PathBuf,
    /// Calibration report.
    #[arg(long, env = "SPIKEWIRE_THRESHOLDS")]
    pub thresholds: PathBuf,
    #[arg(long, value_enum, default_value = "differential", env = "SPIKEWIRE_MODE")]
    pub mode: ModeArg,
    /// Thresholds per sign (defaults to the report's value).
    #[arg(long, env = "SPIKEWIRE_N_THRESHOLDS")]
    pub n_thresholds: Option<u32>,
    /// Fold thresholds into the weights.
    #[arg(long, env = "SPIKEWIRE_NORMALIZE")]
    pub normalize: bool,
    #[arg(long, env = "SPIKEWIRE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    /// Converted model.
    #[arg(long, env = "SPIKEWIRE_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "SPIKEWIRE_DATA")]
    pub data: PathBuf,
    #[arg(long = "timesteps-T", default_value_t = 64, env = "SPIKEWIRE_TIMESTEPS_T")]
    pub timesteps: usize,
    #[arg(long, value_enum, default_value = "argmin", env = "SPIKEWIRE_FIRING_RULE")]
    pub firing_rule: RuleArg,
    #[arg(long, default_value_t = 0, env = "SPIKEWIRE_SEED")]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Dataset row to simulate.
    #[arg(long, default_value_t = 0, env = "SPIKEWIRE_SAMPLE")]
    pub sample: usize,
    #[arg(long, value_enum, env = "SPIKEWIRE_TRACE_FORMAT")]
    pub trace_format: Option<TraceFormat>,
    /// Source ANN; adds error metrics to the metrics file.
    #[arg(long, env = "SPIKEWIRE_ANN")]
    pub ann: Option<PathBuf>,
    /// Trace file (CSV or JSON; picked from the extension unless given).
    #[arg(long, env = "SPIKEWIRE_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "SPIKEWIRE_METRICS")]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Source ANN (for its MAC count).
    #[arg(long, env = "SPIKEWIRE_ANN")]
    pub ann: PathBuf,
    #[arg(long, env = "SPIKEWIRE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, env = "SPIKEWIRE_ANN")]
    pub ann: PathBuf,
    #[arg(long, env = "SPIKEWIRE_OUT")]
    pub out: PathBuf,
}

impl Cli {
    pub fn execute(self) -> Result<()> {
        let exec = if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        match self.command {
            Command::Generate(a) => generate(a),
            Command::Calibrate(a) => cmd_calibrate(a, exec),
            Command::Convert(a) => cmd_convert(a),
            Command::Run(a) => cmd_run(a),
            Command::Energy(a) => cmd_energy(a, exec),
            Command::Compare(a) => cmd_compare(a, exec),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_ann(path: &Path) -> Result<AnnGraph> {
    AnnGraph::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_snn(path: &Path) -> Result<SnnGraph> {
    SnnGraph::load(path).with_context(|| format!("loading converted model {}", path.display()))
}

fn load_data(path: &Path, shapes: &[Vec<usize>]) -> Result<Vec<Vec<spikewire::Tensor>>> {
    toy::load_dataset(path, shapes).with_context(|| format!("loading dataset {}", path.display()))
}

fn snn_input_shapes(snn: &SnnGraph) -> Result<Vec<Vec<usize>>> {
    snn.input_ids()
        .iter()
        .map(|id| Ok(snn.shape_of(id)?.to_vec()))
        .collect()
}

fn generate(a: GenerateArgs) -> Result<()> {
    let graph = match a.kind {
        ToyKind::Mlp => toy::random_mlp(&a.sizes, a.seed)?,
        ToyKind::Cnn => toy::tiny_cnn(a.seed)?,
        ToyKind::Attention => toy::attention_head(a.dim, a.seq, a.seed)?,
    };
    graph.save(&a.out)?;
    println!("model: {} ({} nodes, {} MACs)", a.out.display(), graph.nodes().len(), graph.macs());
    if let Some(data) = &a.data {
        let samples = toy::gaussian_dataset(&graph.input_shapes(), a.samples, a.mean, a.std, a.seed.wrapping_add(1))?;
        toy::save_dataset_csv(data, &samples)?;
        println!("dataset: {} ({} samples)", data.display(), samples.len());
    }
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs, exec: Execution) -> Result<()> {
    let graph = load_ann(&a.model)?;
    let data = load_data(&a.data, &graph.input_shapes())?;
    let cfg = CalibrationConfig {
        method: match a.method {
            MethodArg::Auto => Method::Auto,
            MethodArg::Iteration => Method::Iteration,
            MethodArg::Percentile => Method::Percentile,
        },
        n_thresholds: a.n_thresholds,
        timesteps: a.timesteps,
        solver: SolverConfig {
            quant_levels: 1,
            eps: a.eps,
            max_iters: a.max_iters,
            theta0: a.theta0,
            scheme: if a.plain_iteration {
                IterationScheme::Plain
            } else {
                IterationScheme::Accelerated
            },
        },
        quant_levels: a.quant_levels,
        p: a.percentile_p,
        c: a.scale_c,
        ..Default::default()
    };
    let report = calibrate(&graph, &data, &cfg, exec)?;
    write_json(&a.out, &report)?;
    println!("calibrated {} points with {:?} on {} samples", report.points.len(), report.method, report.samples);
    for p in &report.points {
        let lo = p.thetas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.thetas.iter().copied().fold(0.0, f64::max);
        if p.thetas.len() == 1 {
            println!("  {:<16} θ = {lo:.6}", p.key);
        } else {
            println!("  {:<16} θ ∈ [{lo:.6}, {hi:.6}] over {} channels", p.key, p.thetas.len());
        }
    }
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let graph = load_ann(&a.model)?;
    let text = fs::read_to_string(&a.thresholds).with_context(|| format!("reading {}", a.thresholds.display()))?;
    let report = CalibrationReport::from_json(&text)?;
    let opts = ConvertOptions {
        mode: a.mode.into(),
        n_thresholds: a.n_thresholds.unwrap_or(report.n_thresholds),
    };
    let mut snn = convert(&graph, &report.thresholds(), opts)?;
    if a.normalize {
        snn = normalize_weights(&snn)?;
    }
    snn.validate()?;
    snn.save(&a.out)?;
    println!(
        "converted {} ANN nodes into {} SNN nodes ({} neuron layers, {} mode)",
        graph.nodes().len(),
        snn.nodes().len(),
        snn.neuron_ids().len(),
        snn.mode().name()
    );
    Ok(())
}

fn sim_options(a: &SimArgs) -> SimOptions {
    SimOptions {
        timesteps: a.timesteps,
        rule: a.firing_rule.into(),
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let snn = load_snn(&a.sim.model)?;
    let data = load_data(&a.sim.data, &snn_input_shapes(&snn)?)?;
    let Some(sample) = data.get(a.sample) else {
        return Err(spikewire::Error::InvalidParam(format!(
            "sample {} out of range ({} samples)",
            a.sample,
            data.len()
        ))
        .into());
    };
    let trace = sim::run(&snn, sample, sim_options(&a.sim))?;
    let format = a.trace_format.unwrap_or_else(|| {
        if a.out.extension().is_some_and(|e| e == "json") {
            TraceFormat::Json
        } else {
            TraceFormat::Csv
        }
    });
    match format {
        TraceFormat::Csv => fs::write(&a.out, trace.to_csv())?,
        TraceFormat::Json => write_json(&a.out, &json!({ "schema": TRACE_SCHEMA, "trace": trace.summary() }))?,
    }
    let metrics = match &a.ann {
        Some(path) => {
            let ann = load_ann(path)?;
            Some(compare(&trace, &ann.predict(sample)?, trace.timesteps)?)
        }
        None => None,
    };
    if let Some(path) = &a.metrics {
        write_json(
            path,
            &json!({
                "schema": TRACE_SCHEMA,
                "sample": a.sample,
                "summary": trace.summary(),
                "metrics": metrics,
            }),
        )?;
    }
    println!(
        "T = {}: {} spikes, {} ACs",
        trace.timesteps,
        trace.total_spikes(),
        trace.total_acs()
    );
    if let Some(m) = metrics {
        println!(
            "vs ANN: L∞ {:.3e}, L2 {:.3e}, relative L2 {:.3e}, argmax agrees: {}",
            m.linf, m.l2, m.l2_rel, m.argmax_agree
        );
    }
    Ok(())
}

fn simulate_all(a: &SimArgs, exec: Execution) -> Result<(SnnGraph, Vec<Vec<spikewire::Tensor>>, Vec<SimulationTrace>)> {
    let snn = load_snn(&a.model)?;
    let data = load_data(&a.data, &snn_input_shapes(&snn)?)?;
    let traces = run_batch(&snn, &data, sim_options(a), exec)?;
    Ok((snn, data, traces))
}

fn cmd_energy(a: EnergyArgs, exec: Execution) -> Result<()> {
    let ann = load_ann(&a.ann)?;
    let (_, _, traces) = simulate_all(&a.sim, exec)?;
    let report = energy_report_mean(&traces, ann.macs(), a.sim.timesteps)?;
    write_json(&a.out, &json!({ "schema": ENERGY_SCHEMA, "report": report }))?;
    println!(
        "T = {}: {:.1} ACs and {:.1} spikes per sample vs {} ANN MACs, energy ratio {:.4}",
        report.timesteps, report.snn_acs, report.spikes, report.ann_macs, report.ratio
    );
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    t: usize,
    linf: f64,
    l2: f64,
    l2_rel: f64,
    argmax_agreement: f64,
    energy_ratio: f64,
}

fn cmd_compare(a: CompareArgs, exec: Execution) -> Result<()> {
    let ann = load_ann(&a.ann)?;
    let (_, data, traces) = simulate_all(&a.sim, exec)?;
    if a.sim.timesteps == 0 {
        bail!(spikewire::Error::InvalidParam("timesteps must be at least 1".into()));
    }
    let reference: Vec<_> = data.iter().map(|x| ann.predict(x)).collect::<Result<_, _>>()?;
    let mut steps: Vec<usize> = std::iter::successors(Some(1usize), |t| Some(t * 2))
        .take_while(|&t| t < a.sim.timesteps)
        .collect();
    steps.push(a.sim.timesteps);
    let count = traces.len() as f64;
    let mut rows = Vec::with_capacity(steps.len());
    for &t in &steps {
        let mut row = CompareRow {
            t,
            linf: 0.0,
            l2: 0.0,
            l2_rel: 0.0,
            argmax_agreement: 0.0,
            energy_ratio: energy_report_mean(&traces, ann.macs(), t)?.ratio,
        };
        for (tr, r) in traces.iter().zip(&reference) {
            let m = compare(tr, r, t)?;
            row.linf += m.linf / count;
            row.l2 += m.l2 / count;
            row.l2_rel += m.l2_rel / count;
            row.argmax_agreement += f64::from(u8::from(m.argmax_agree)) / count;
        }
        rows.push(row);
    }
    write_json(
        &a.out,
        &json!({ "schema": COMPARE_SCHEMA, "samples": traces.len(), "rows": rows }),
    )?;
    println!("{:>6} {:>12} {:>12} {:>10} {:>8} {:>8}", "T", "mean L∞", "mean L2", "rel L2", "argmax", "energy");
    for r in &rows {
        println!(
            "{:>6} {:>12.4e} {:>12.4e} {:>9.3}% {:>7.1}% {:>8.4}",
            r.t,
            r.linf,
            r.l2,
            100.0 * r.l2_rel,
            100.0 * r.argmax_agreement,
            r.energy_ratio
        );
    }
    Ok(())
}
