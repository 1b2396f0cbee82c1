//! The `evk` command line.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or input data, 2 for I/O
//! failures. With `--json` a successful command prints exactly one JSON
//! document on stdout; diagnostics always go to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::deploysim::{self, DeployConfig, DeviceProfile, ModelProfile, Objective};
use crate::error::Error;
use crate::packing::{self, SampleRecord, TailPolicy};
use crate::partition::{self, EncoderProfile, ImageGeometry, PartitionPlan};
use crate::posembed;
use crate::quant::{self, format, QuantScheme};
use crate::resampler;
use crate::rlaif::{self, ResponseRecord};
use crate::schema::{self, SchemaConfig};

pub const SEED_ENV: &str = "EVK_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug, Parser)]
#[command(name = "evk", version, about = "End-side multimodal serving toolkit")]
struct Cli {
    /// Emit a single JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Choose a slice grid for an image and report its token budget.
    Plan(PlanArgs),
    /// Pack a sample manifest into fixed-length sequences.
    Pack(PackArgs),
    /// Quantize an .evwq float tensor into an .evq4 file.
    Quantize(QuantizeArgs),
    /// Expand an .evq4 file back into an .evwq float tensor.
    Dequantize(DequantizeArgs),
    /// Report reconstruction error and memory footprint.
    QuantReport(QuantReportArgs),
    /// Preference-data tools.
    Rlaif {
        #[command(subcommand)]
        command: RlaifCommand,
    },
    /// Evaluate the deployment cost model for one configuration.
    Simulate(SimulateArgs),
    /// Find the best configuration in a space.
    Search(SearchArgs),
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    width: u32,
    #[arg(long)]
    height: u32,
    #[arg(long, default_value_t = 448)]
    vit_width: u32,
    #[arg(long, default_value_t = 448)]
    vit_height: u32,
    #[arg(long, default_value_t = EncoderProfile::DEFAULT_PATCH_PX)]
    patch: u32,
    #[arg(long, default_value_t = 96)]
    queries: u32,
    #[arg(long, default_value_t = EncoderProfile::DEFAULT_MAX_IDEAL_SLICES)]
    max_slices: u32,
    /// Print the spatial token layout.
    #[arg(long)]
    emit_schema: bool,
    /// Print the interpolated position-embedding grid of every slice.
    #[arg(long)]
    emit_posembed: bool,
}

#[derive(Debug, Args)]
struct PackArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    length: usize,
    #[arg(long, value_enum, default_value_t = TailArg::Pad)]
    tail: TailArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TailArg {
    Pad,
    Drop,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = quant::DEFAULT_BLOCK_SIZE)]
    block: usize,
}

#[derive(Debug, Args)]
struct DequantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QuantReportArgs {
    /// Original float tensor (.evwq).
    #[arg(long = "in")]
    input: PathBuf,
    /// Quantized tensor to compare against; quantized on the fly when absent.
    #[arg(long)]
    quantized: Option<PathBuf>,
    #[arg(long, default_value_t = quant::DEFAULT_BLOCK_SIZE)]
    block: usize,
}

#[derive(Debug, Subcommand)]
enum RlaifCommand {
    /// Add `score` (minus the number of invalid claims) to every response.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample preference pairs from scored responses.
    Pairs {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = rlaif::DEFAULT_MAX_PAIRS_PER_INSTRUCTION)]
        max_pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// DPO loss and policy gradients for one preference pair.
    #[command(allow_negative_numbers = true)]
    DpoLoss {
        #[arg(long, default_value_t = rlaif::DEFAULT_BETA)]
        beta: f64,
        /// Winner log-prob under the policy.
        #[arg(long)]
        lwp: f64,
        /// Winner log-prob under the reference.
        #[arg(long)]
        lwr: f64,
        /// Loser log-prob under the policy.
        #[arg(long)]
        llp: f64,
        /// Loser log-prob under the reference.
        #[arg(long)]
        llr: f64,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    device: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    device: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    space: PathBuf,
    #[arg(long, value_enum)]
    objective: ObjectiveArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Throughput,
    Latency,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: EXIT_INVALID, message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
    }

    fn in_file(path: &Path, e: Error) -> Self {
        let code = if matches!(e, Error::Io(_)) { EXIT_IO } else { EXIT_INVALID };
        Self { code, message: format!("{}: {e}", path.display()) }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Io(_)) { EXIT_IO } else { EXIT_INVALID };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs one command, reading the default seed from `EVK_SEED`.
pub fn dispatch<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    dispatch_with_env(argv, env_seed.as_deref())
}

/// Like [`dispatch`] with an explicit `EVK_SEED` value.
pub fn dispatch_with_env<I, T>(argv: I, env_seed: Option<&str>) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CommandResult {
                    exit_code: EXIT_OK,
                    stdout: text,
                    stderr: String::new(),
                },
                _ => CommandResult { exit_code: EXIT_INVALID, stdout: String::new(), stderr: text },
            };
        }
    };
    let json = cli.json;
    match run(cli.command, json, env_seed) {
        Ok(stdout) => CommandResult { exit_code: EXIT_OK, stdout, stderr: String::new() },
        Err(e) => {
            let stderr = if json {
                let doc = serde_json::json!({ "error": e.message, "exit_code": e.code });
                format!("{doc}\n")
            } else {
                format!("error: {}\n", e.message)
            };
            CommandResult { exit_code: e.code, stdout: String::new(), stderr }
        }
    }
}

fn run(command: Command, json: bool, env_seed: Option<&str>) -> CliResult<String> {
    match command {
        Command::Plan(a) => plan(a, json),
        Command::Pack(a) => pack(a, json),
        Command::Quantize(a) => quantize(a, json),
        Command::Dequantize(a) => dequantize(a, json),
        Command::QuantReport(a) => quant_report(a, json),
        Command::Rlaif { command } => match command {
            RlaifCommand::Score { input, out } => rlaif_score(&input, out.as_deref(), json),
            RlaifCommand::Pairs { input, seed, max_pairs, out } => {
                let seed = resolve_seed(seed, env_seed)?;
                rlaif_pairs(&input, seed, max_pairs, &out, json)
            }
            RlaifCommand::DpoLoss { beta, lwp, lwr, llp, llr } => {
                let o = rlaif::dpo_loss(beta, lwp, lwr, llp, llr)?;
                render(json, &o, || format!("loss {:.6}\ngrad_w {:.6}\ngrad_l {:.6}\n", o.loss, o.grad_w, o.grad_l))
            }
        },
        Command::Simulate(a) => simulate(a, json),
        Command::Search(a) => search(a, json),
    }
}

fn resolve_seed(flag: Option<u64>, env_seed: Option<&str>) -> CliResult<u64> {
    match (flag, env_seed) {
        (Some(s), _) => Ok(s),
        (None, Some(raw)) => raw
            .trim()
            .parse()
            .map_err(|_| CliError::invalid(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))),
        (None, None) => Ok(0),
    }
}

fn render<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> CliResult<String> {
    if json {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::invalid(e.to_string()))?;
        s.push('\n');
        Ok(s)
    } else {
        Ok(text())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_io() {
            return CliError { code: EXIT_IO, message: format!("{}: {inner}", path.display()) };
        }
        CliError::invalid(format!("{}: field `{field}`: {inner}", path.display()))
    })?;
    de.end()
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(value)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::invalid(e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn tensor_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    #[serde(flatten)]
    plan: &'a PartitionPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    schema: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    posembed: Option<Vec<PosEmbedSummary>>,
}

#[derive(Serialize)]
struct PosEmbedSummary {
    slice: usize,
    overview: bool,
    grid_h: usize,
    grid_w: usize,
    min: f64,
    max: f64,
}

fn plan(a: PlanArgs, json: bool) -> CliResult<String> {
    let img = ImageGeometry::new(a.width, a.height)?;
    let enc = EncoderProfile::new(a.vit_width, a.vit_height, a.patch, a.queries, a.max_slices)?;
    let plan = partition::plan_partition(&img, &enc);

    let schema = a.emit_schema.then(|| schema::serialize_layout(&plan, &enc, &SchemaConfig::default()).tokens);
    let posembed = if a.emit_posembed { Some(posembed_summaries(&plan, &enc)?) } else { None };

    if json {
        return render(true, &PlanOutput { plan: &plan, schema, posembed }, String::new);
    }

    let mut out = String::new();
    if let Some(tokens) = &schema {
        for t in tokens {
            let _ = writeln!(out, "{}", t.replace('\n', "\\n"));
        }
        return Ok(out);
    }
    let _ = writeln!(
        out,
        "grid {}x{}  score {:.6}  visual tokens {}",
        plan.columns, plan.rows, plan.score, plan.visual_token_count
    );
    let _ = writeln!(out, "{:>4} {:>4} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "row", "col", "x", "y", "w", "h", "enc_w", "enc_h");
    for s in &plan.slices {
        let _ = writeln!(
            out,
            "{:>4} {:>4} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            s.row, s.col, s.src_x, s.src_y, s.src_w, s.src_h, s.enc_w, s.enc_h
        );
    }
    if let Some(o) = &plan.overview {
        let _ = writeln!(out, "overview {}x{} -> {}x{}", o.src_w, o.src_h, o.enc_w, o.enc_h);
    }
    if let Some(rows) = &posembed {
        for p in rows {
            let _ = writeln!(
                out,
                "posembed slice {}{} grid {}x{} range [{:.6}, {:.6}]",
                p.slice,
                if p.overview { " (overview)" } else { "" },
                p.grid_h,
                p.grid_w,
                p.min,
                p.max
            );
        }
    }
    Ok(out)
}

/// Resizes a synthetic sinusoidal table on the encoder's native patch grid to
/// every slice's patch grid.
fn posembed_summaries(plan: &PartitionPlan, enc: &EncoderProfile) -> CliResult<Vec<PosEmbedSummary>> {
    let (src_h, src_w) = enc.patch_grid();
    let table = resampler::pos_encode_2d(src_h, src_w, 4, resampler::DEFAULT_POS_BASE)?;
    let grid = posembed::PosEmbedGrid::new(table.into_shape_with_order((src_h, src_w, 4)).expect("table shape"))?;
    let n = plan.slices.len();
    plan.encoded_slices()
        .enumerate()
        .map(|(i, s)| {
            let (gh, gw) = s.patch_grid(enc);
            let g = posembed::interpolate_2d(&grid, gh, gw)?;
            let (min, max) = g
                .values()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            Ok(PosEmbedSummary { slice: i, overview: i >= n, grid_h: gh, grid_w: gw, min, max })
        })
        .collect()
}

#[derive(Serialize)]
struct PackSummary {
    sequences: usize,
    truncated_tokens: usize,
    dropped_tail_tokens: usize,
    pad_tokens: usize,
}

fn pack(a: PackArgs, json: bool) -> CliResult<String> {
    let samples: Vec<SampleRecord> = read_json(&a.manifest)?;
    let tail = match a.tail {
        TailArg::Pad => TailPolicy::Pad,
        TailArg::Drop => TailPolicy::Drop,
    };
    let outcome = packing::pack(&samples, a.length, tail).map_err(|e| CliError::in_file(&a.manifest, e))?;
    write_json(&a.out, &outcome.sequences)?;
    let summary = PackSummary {
        sequences: outcome.sequences.len(),
        truncated_tokens: outcome.truncated_tokens,
        dropped_tail_tokens: outcome.dropped_tail_tokens,
        pad_tokens: outcome.sequences.iter().map(|s| s.pad_length).sum(),
    };
    render(json, &summary, || {
        format!(
            "{} sequences of {} tokens; {} truncated, {} dropped, {} padding\n",
            summary.sequences, a.length, summary.truncated_tokens, summary.dropped_tail_tokens, summary.pad_tokens
        )
    })
}

#[derive(Serialize)]
struct QuantizeSummary {
    values: usize,
    blocks: usize,
    block_size: usize,
    max_scale: f32,
}

fn quantize(a: QuantizeArgs, json: bool) -> CliResult<String> {
    let t = format::read_float_tensor(open(&a.input)?, &tensor_name(&a.input))
        .map_err(|e| CliError::in_file(&a.input, e))?;
    let q = quant::quantize(&t, a.block).map_err(|e| CliError::in_file(&a.input, e))?;
    let mut w = create(&a.out)?;
    format::write_quantized(&mut w, &q).map_err(|e| CliError::in_file(&a.out, e))?;
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    let summary = QuantizeSummary {
        values: q.original_len,
        blocks: q.blocks.len(),
        block_size: q.block_size,
        max_scale: q.max_scale(),
    };
    render(json, &summary, || {
        format!("{} values in {} blocks of {}\n", summary.values, summary.blocks, summary.block_size)
    })
}

#[derive(Serialize)]
struct DequantizeSummary {
    values: usize,
}

fn dequantize(a: DequantizeArgs, json: bool) -> CliResult<String> {
    let q = format::read_quantized(open(&a.input)?, &tensor_name(&a.input))
        .map_err(|e| CliError::in_file(&a.input, e))?;
    let t = quant::dequantize(&q);
    let mut w = create(&a.out)?;
    format::write_float_tensor(&mut w, &t).map_err(|e| CliError::in_file(&a.out, e))?;
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    let summary = DequantizeSummary { values: t.values.len() };
    render(json, &summary, || format!("{} values\n", summary.values))
}

#[derive(Serialize)]
struct QuantReport {
    params: usize,
    block_size: usize,
    max_abs: f64,
    rmse: f64,
    max_scale: f32,
    fp16_bytes: u64,
    q4_bytes: u64,
}

fn quant_report(a: QuantReportArgs, json: bool) -> CliResult<String> {
    let t = format::read_float_tensor(open(&a.input)?, &tensor_name(&a.input))
        .map_err(|e| CliError::in_file(&a.input, e))?;
    let q = match &a.quantized {
        Some(path) => format::read_quantized(open(path)?, &tensor_name(path)).map_err(|e| CliError::in_file(path, e))?,
        None => quant::quantize(&t, a.block).map_err(|e| CliError::in_file(&a.input, e))?,
    };
    let err = quant::quant_error(&t, &q)?;
    let params = t.values.len() as u64;
    let report = QuantReport {
        params: t.values.len(),
        block_size: q.block_size,
        max_abs: err.max_abs,
        rmse: err.rmse,
        max_scale: q.max_scale(),
        fp16_bytes: quant::memory_footprint(params, QuantScheme::Fp16),
        q4_bytes: quant::memory_footprint(params, QuantScheme::Q4Block(q.block_size)),
    };
    render(json, &report, || {
        format!(
            "max_abs {:.6e}\nrmse {:.6e}\nfootprint fp16 {} bytes, q4 (block {}) {} bytes\n",
            report.max_abs, report.rmse, report.fp16_bytes, report.block_size, report.q4_bytes
        )
    })
}

fn rlaif_score(input: &Path, out: Option<&Path>, json: bool) -> CliResult<String> {
    let mut responses: Vec<ResponseRecord> = read_json(input)?;
    for (i, r) in responses.iter_mut().enumerate() {
        r.score = None;
        r.ensure_scored().map_err(|e| CliError::invalid(format!("{}: [{i}]: {e}", input.display())))?;
    }
    match out {
        Some(path) => {
            write_json(path, &responses)?;
            render(json, &serde_json::json!({ "responses": responses.len() }), || {
                format!("scored {} responses\n", responses.len())
            })
        }
        // the scored array is itself the document
        None => {
            let mut s = serde_json::to_string_pretty(&responses).map_err(|e| CliError::invalid(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

fn rlaif_pairs(input: &Path, seed: u64, max_pairs: usize, out: &Path, json: bool) -> CliResult<String> {
    if max_pairs == 0 {
        return Err(CliError::invalid("--max-pairs must be positive"));
    }
    let responses: Vec<ResponseRecord> = read_json(input)?;
    let pairs = rlaif::build_preference_pairs(&responses, seed, max_pairs)
        .map_err(|e| CliError::in_file(input, e))?;
    write_json(out, &pairs)?;
    render(json, &serde_json::json!({ "pairs": pairs.len(), "seed": seed }), || {
        format!("{} pairs (seed {seed})\n", pairs.len())
    })
}

fn simulate(a: SimulateArgs, json: bool) -> CliResult<String> {
    let device: DeviceProfile = read_json(&a.device)?;
    let model: ModelProfile = read_json(&a.model)?;
    let cfg: DeployConfig = read_json(&a.config)?;
    let m = deploysim::simulate(&device, &model, &cfg)?;
    render(json, &m, || {
        format!(
            "peak memory {} bytes\nencode latency {:.3} s\ndecode {:.3} tokens/s\n",
            m.peak_mem_bytes, m.encode_latency_s, m.decode_tokens_per_s
        )
    })
}

fn search(a: SearchArgs, json: bool) -> CliResult<String> {
    let device: DeviceProfile = read_json(&a.device)?;
    let model: ModelProfile = read_json(&a.model)?;
    let space: Vec<DeployConfig> = read_json(&a.space)?;
    let objective = match a.objective {
        ObjectiveArg::Throughput => Objective::MaxDecodeThroughput,
        ObjectiveArg::Latency => Objective::MinEncodeLatency,
    };
    let r = deploysim::config_search(&device, &model, &space, objective)?;
    render(json, &r, || {
        format!(
            "best #{}: {:?} loading, {} threads, {:?}, vit speedup {}\nencode latency {:.3} s, decode {:.3} tokens/s, peak memory {} bytes\n",
            r.index,
            r.config.loading,
            r.config.threads,
            r.config.quant_scheme,
            r.config.vit_accelerator_speedup,
            r.metrics.encode_latency_s,
            r.metrics.decode_tokens_per_s,
            r.metrics.peak_mem_bytes
        )
    })
}
