//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::array::{run_program, HwConfig, Program};
use crate::compiler::{compile_lowered, lower, LayerDesc, ModelDesc};
use crate::perf::{summarize, CycleReport};
use crate::quant::{BitWidth, QTensor};
use crate::report::{model_hash, DiagnosisReport, RunMode, RunReport, TOOL_VERSION};
use crate::signal::{self, synth, Bandpass, Class, FilterConfig, Recording, SAMPLE_RATE_HZ};

pub const HW_CONFIG_ENV: &str = "SASIM_HW_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "sasim", version, about = "Sparse mixed-precision CNN accelerator simulator")]
pub struct Cli {
    /// Hardware configuration JSON (defaults to the 2x4x4x16 array at 400 MHz).
    #[arg(long, global = true, env = HW_CONFIG_ENV)]
    pub hw_config: Option<PathBuf>,
    /// Seed for every synthetic input.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Band-pass configuration JSON `{lo_hz, hi_hz, order}`.
    #[arg(long, global = true)]
    pub filter_config: Option<PathBuf>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune, calibrate, quantize and pack a model into a program file.
    Compile(CompileArgs),
    /// Execute a program on a tensor or on recordings and write a report.
    Run(RunArgs),
    /// Print the cycle report of a program.
    Bench(BenchArgs),
    /// Generate synthetic models and recordings.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    /// A width for every conv layer (`4`) or per layer index (`0=8,3=2`).
    #[arg(long)]
    pub bits_override: Option<String>,
    /// Calibration recordings (CSV or .bin); synthetic when absent.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Tensor,
    Diagnose,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub program: PathBuf,
    /// Tensor JSON in tensor mode, recordings (CSV or .bin) in diagnose mode.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Tensor)]
    pub mode: Mode,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub program: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub trials: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthClass {
    Va,
    NonVa,
    Mixed,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write the default classifier as `<name>.json` + `<name>.bin`.
    Model {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "va_default")]
        name: String,
        /// Sparsity the classifier head is fitted for.
        #[arg(long, default_value_t = 0.5)]
        fit_sparsity: f64,
    },
    /// Write synthetic recordings as CSV (or .bin by extension).
    Recordings {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SynthClass::Mixed)]
        class: SynthClass,
    },
}

pub fn read_file(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => anyhow!("file not found: {}", path.display()),
        _ => anyhow!("cannot read {}: {e}", path.display()),
    })
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    String::from_utf8(read_file(path)?).map_err(|e| anyhow!("{}: not UTF-8 text: {e}", path.display()))
}

/// Writes via a sibling temporary file so a failed run leaves no partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_hw(path: Option<&Path>) -> anyhow::Result<Option<HwConfig>> {
    let Some(path) = path else { return Ok(None) };
    let hw: HwConfig = serde_json::from_str(&read_text(path)?).map_err(|e| {
        anyhow!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())
    })?;
    hw.validate().with_context(|| path.display().to_string())?;
    Ok(Some(hw))
}

fn load_filter(path: Option<&Path>) -> anyhow::Result<Bandpass> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| anyhow!("{}: line {} column {}: {e}", p.display(), e.line(), e.column()))?,
        None => FilterConfig::default(),
    };
    Ok(Bandpass::design(SAMPLE_RATE_HZ, &cfg)?)
}

pub fn load_program(path: &Path) -> anyhow::Result<Program> {
    Program::from_bytes(&read_file(path)?).with_context(|| path.display().to_string())
}

pub fn load_recordings(path: &Path) -> anyhow::Result<Vec<Recording>> {
    let recs = if path.extension().is_some_and(|e| e == "bin") {
        signal::parse_bin(&read_file(path)?)
    } else {
        signal::parse_csv(&read_text(path)?)
    };
    recs.with_context(|| path.display().to_string())
}

pub fn write_recordings(path: &Path, recs: &[Recording]) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        write_atomic(path, &signal::to_bin(recs))
    } else {
        write_atomic(path, signal::to_csv(recs).as_bytes())
    }
}

pub fn parse_bits_override(spec: &str) -> anyhow::Result<Result<BitWidth, BTreeMap<usize, BitWidth>>> {
    let width = |s: &str| -> anyhow::Result<BitWidth> {
        let b: u32 = s.trim().parse().map_err(|_| anyhow!("`{s}` is not a bit width"))?;
        Ok(BitWidth::try_from(b)?)
    };
    if !spec.contains('=') {
        return Ok(Ok(width(spec)?));
    }
    let mut map = BTreeMap::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (idx, bits) = part.split_once('=').ok_or_else(|| anyhow!("`{part}` is not `layer=bits`"))?;
        let idx: usize = idx.trim().parse().map_err(|_| anyhow!("`{idx}` is not a layer index"))?;
        map.insert(idx, width(bits)?);
    }
    Ok(Err(map))
}

/// Calibration inputs for `model`, from recordings when given.
fn calibration(model: &ModelDesc, path: Option<&Path>, filter: &Bandpass, seed: u64) -> anyhow::Result<Vec<Vec<f64>>> {
    let takes_recordings = model.input_shape == [1, signal::RECORDING_LEN];
    match path {
        Some(p) => {
            let recs = load_recordings(p)?;
            if !takes_recordings {
                bail!("{}: recordings cannot calibrate a model with input {:?}", p.display(), model.input_shape);
            }
            Ok(recs.iter().map(|r| signal::pipeline::preprocess(r, filter)).collect())
        }
        None => Ok(synth::default_calibration(model, filter, seed)),
    }
}

fn program_hw(prog: &Program, hw: Option<HwConfig>) -> anyhow::Result<HwConfig> {
    let Some(hw) = hw else { return Ok(prog.hw) };
    let same_array = HwConfig {
        freq_hz: prog.hw.freq_hz,
        ..hw
    } == prog.hw;
    if !same_array {
        bail!("program was compiled for a different array configuration than --hw-config");
    }
    Ok(hw)
}

pub fn cmd_compile(cli: &Cli, args: &CompileArgs) -> anyhow::Result<()> {
    let hw = load_hw(cli.hw_config.as_deref())?.unwrap_or_default();
    let filter = load_filter(cli.filter_config.as_deref())?;
    let json = read_text(&args.model)?;
    let blob = read_file(&args.weights)?;
    let mut model = ModelDesc::from_json_and_blob(&json, &blob).with_context(|| args.model.display().to_string())?;
    if let Some(spec) = &args.bits_override {
        match parse_bits_override(spec).context("--bits-override")? {
            Ok(b) => model.override_all_bits(b),
            Err(map) => model.override_bits(&map)?,
        }
    }
    let calib = calibration(&model, args.calib.as_deref(), &filter, cli.seed)?;
    let lowered = lower(&model, &hw, args.sparsity, &calib).context("compile failed")?;
    let prog = compile_lowered(&lowered, &hw).context("compile failed")?;

    let (mut kept, mut total, mut ckept, mut ctotal) = (0usize, 0usize, 0usize, 0usize);
    for l in lowered.layers.iter() {
        if let Some(m) = &l.prune_mask {
            kept += m.kept();
            total += m.keep.len();
            for (start, len) in m.groups().filter(|&(_, len)| len == m.group) {
                ckept += m.keep[start..start + len].iter().filter(|&&k| k).count();
                ctotal += len;
            }
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 100.0 } else { 100.0 * a as f64 / b as f64 };
    println!(
        "mask density: {:.1}% on complete groups ({:.1}% overall, {kept}/{total} kept)",
        pct(ckept, ctotal),
        pct(kept, total)
    );
    for (i, (lp, ll)) in prog.layers.iter().zip(&lowered.layers).enumerate() {
        if lp.kind.is_conv() {
            let lens: Vec<usize> = lp.blocks.iter().flat_map(|b| b.groups.iter().map(|g| g.len())).collect();
            let (lo, hi) = (lens.iter().min().unwrap_or(&0), lens.iter().max().unwrap_or(&0));
            let density = ll.prune_mask.as_ref().map_or(1.0, |m| m.density());
            println!(
                "layer {i} {}: {}-bit, density {:.1}%, stream length {lo}..{hi} over {} groups, {} tiles",
                lp.kind.name(),
                lp.bits.bits(),
                100.0 * density,
                lens.len(),
                lp.tiles.len()
            );
        } else {
            println!("layer {i} {}: {} tiles", lp.kind.name(), lp.tiles.len());
        }
    }
    if cli.verbose {
        eprintln!("input scale 2^{}", prog.input_scale_exp);
    }
    write_atomic(&args.out, &prog.to_bytes())?;
    println!("wrote {} ({})", args.out.display(), model_hash(&prog));
    Ok(())
}

pub fn run_report(cli: &Cli, args: &RunArgs) -> anyhow::Result<RunReport> {
    let prog = load_program(&args.program)?;
    let hw = program_hw(&prog, load_hw(cli.hw_config.as_deref())?)?;
    let base = RunReport {
        tool_version: TOOL_VERSION.into(),
        hw,
        model_hash: model_hash(&prog),
        mode: RunMode::Tensor,
        output: None,
        diagnoses: Vec::new(),
        perf: summarize(&[], &hw)?,
    };
    match args.mode {
        Mode::Tensor => {
            let text = read_text(&args.input)?;
            let input: QTensor = serde_json::from_str(&text).map_err(|e| {
                anyhow!("{}: line {} column {}: {e}", args.input.display(), e.line(), e.column())
            })?;
            let (out, trace) = run_program(&prog, &input).context("run failed")?;
            Ok(RunReport {
                output: Some(out),
                perf: summarize(&trace, &hw)?,
                ..base
            })
        }
        Mode::Diagnose => {
            let filter = load_filter(cli.filter_config.as_deref())?;
            let recs = load_recordings(&args.input)?;
            let (diagnoses, inferences) = signal::diagnose_recordings(&recs, &prog, &filter)
                .with_context(|| format!("diagnose mode needs a multiple of 6 recordings in {}", args.input.display()))?;
            let perf = summarize(&inferences[0].trace, &hw)?;
            if cli.verbose {
                for (i, inf) in inferences.iter().enumerate() {
                    eprintln!("recording {i}: {} {:?}", inf.result.class, inf.result.logits);
                }
            }
            Ok(RunReport {
                mode: RunMode::Diagnose,
                diagnoses: diagnoses.iter().map(|d| DiagnosisReport::new(d, &perf)).collect(),
                perf,
                ..base
            })
        }
    }
}

pub fn cmd_run(cli: &Cli, args: &RunArgs) -> anyhow::Result<()> {
    let report = run_report(cli, args)?;
    let json = report.to_json();
    write_atomic(&args.report, json.as_bytes())?;
    let back = RunReport::from_json(&read_text(&args.report)?)?;
    if back != report {
        bail!("{}: report did not read back identically", args.report.display());
    }
    for (i, d) in report.diagnoses.iter().enumerate() {
        println!("diagnosis {i}: {} ({} VA / {} non-VA)", d.verdict, d.votes.va, d.votes.non_va);
    }
    println!("wrote {}", args.report.display());
    Ok(())
}

pub fn cmd_bench(cli: &Cli, args: &BenchArgs) -> anyhow::Result<()> {
    if args.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let prog = load_program(&args.program)?;
    let hw = program_hw(&prog, load_hw(cli.hw_config.as_deref())?)?;
    let input = QTensor::zeros(prog.input_shape.clone(), BitWidth::B8, prog.input_scale_exp);
    let mut first: Option<CycleReport> = None;
    for t in 0..args.trials {
        let start = Instant::now();
        let (_, trace) = run_program(&prog, &input)?;
        let host = start.elapsed();
        let rep = summarize(&trace, &hw)?;
        if first.is_none() {
            print!("{rep}");
        }
        println!("trial {t}: total_cycles {} host {:.3} ms", rep.total_cycles, host.as_secs_f64() * 1e3);
        match &first {
            Some(f) if f != &rep => bail!("trial {t} produced a different cycle report"),
            Some(_) => {}
            None => first = Some(rep),
        }
    }
    let rep = first.expect("at least one trial");
    println!("active_units {}", rep.active_units);
    println!(
        "simulated latency {:.3} us at {} MHz",
        rep.latency_s * 1e6,
        hw.freq_hz as f64 / 1e6
    );
    Ok(())
}

pub fn cmd_synth(cli: &Cli, cmd: &SynthCommand) -> anyhow::Result<()> {
    match cmd {
        SynthCommand::Model {
            out_dir,
            name,
            fit_sparsity,
        } => {
            let mut model = synth::default_model(cli.seed, *fit_sparsity)?;
            model.name = name.clone();
            let (json, blob) = model.to_json_and_blob()?;
            fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
            write_atomic(&out_dir.join(format!("{name}.json")), format!("{json}\n").as_bytes())?;
            write_atomic(&out_dir.join(format!("{name}.bin")), &blob)?;
            let convs = model.layers.iter().filter(|l| matches!(l, LayerDesc::Conv(_))).count();
            println!("wrote {name}: {} layers ({convs} conv), {} weight bytes", model.layers.len(), blob.len());
        }
        SynthCommand::Recordings { out, count, class } => {
            let mut rng = synth::rng(cli.seed);
            let recs: Vec<Recording> = (0..*count)
                .map(|i| {
                    let c = match class {
                        SynthClass::Va => Class::Va,
                        SynthClass::NonVa => Class::NonVa,
                        SynthClass::Mixed if i % 2 == 0 => Class::Va,
                        SynthClass::Mixed => Class::NonVa,
                    };
                    synth::recording(&mut rng, c)
                })
                .collect();
            write_recordings(out, &recs)?;
            println!("wrote {count} recordings to {}", out.display());
        }
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Command::Compile(a) => cmd_compile(cli, a),
        Command::Run(a) => cmd_run(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::Synth(c) => cmd_synth(cli, c),
    }
}
