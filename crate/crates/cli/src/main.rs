//! `layer-reuse`: trace generation, profiling, planning, hybrid decoding,
//! cost benchmarking and report export.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error, 4 internal
//! invariant violation.

mod manifest;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use layer_reuse::artifact::{self, PolicyFile, RunDoc};
use layer_reuse::cost::{cost_model, CostParams, Precision};
use layer_reuse::engine::{fidelity_report, hybrid_decode_on, Granularity, ReuseExtras};
use layer_reuse::policy::{dp_optimize, static_jump_policy, LayerPolicy};
use layer_reuse::profile::{build_similarity_matrix, merge_matrices, sensitivity_profile};
use layer_reuse::synth::{generate_model, run_full_trace_on, SynthModelConfig};
use layer_reuse::{Error, Result};
use serde::{Deserialize, Serialize};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "layer-reuse", version, about = "Cross-layer top-k reuse toolkit")]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "LAYER_REUSE_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic model and record a full-attention decode trace.
    GenTraces(GenArgs),
    /// Build the similarity matrix and the sensitivity report from a trace.
    Profile(ProfileArgs),
    /// Plan a layer policy from a similarity matrix.
    Plan(PlanArgs),
    /// Run hybrid decoding under a policy and measure fidelity.
    Decode(DecodeArgs),
    /// Sweep the cost model over context lengths.
    Bench(BenchArgs),
    /// Export plot-ready CSV and markdown summaries.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// TOML file with any of the flag names below as keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    ctx: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Query norm relative to sqrt(head dim); larger values sharpen attention.
    #[arg(long)]
    query_gain: Option<f64>,
    /// Defaults to 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Top-k budget recorded in the trace.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Trace JSON path; the tensor sidecar goes next to it with a `.bin` extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct GenFile {
    layers: Option<usize>,
    ctx: Option<usize>,
    head_dim: Option<usize>,
    heads: Option<usize>,
    rho: Option<f64>,
    query_gain: Option<f64>,
    seed: Option<u64>,
    k: Option<usize>,
    steps: Option<usize>,
    block_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
struct GenConfig {
    model: SynthModelConfig,
    k: usize,
    steps: usize,
    block_size: usize,
}

const DEFAULT_K: usize = 64;
const DEFAULT_STEPS: usize = 4;
const DEFAULT_BLOCK_SIZE: usize = 128;

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Repeat to average the similarity matrix over several traces; the
    /// sensitivity report uses the first.
    #[arg(long, required = true)]
    trace: Vec<PathBuf>,
    /// Decode step probed by the sensitivity report.
    #[arg(long, default_value_t = 0)]
    sensitivity_step: usize,
    /// Budget for the sensitivity probe; defaults to the trace budget.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    matrix_out: Option<PathBuf>,
    #[arg(long)]
    sensitivity_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    theta: Option<f64>,
    /// Static policy with full layers at multiples of this step instead of the optimizer.
    #[arg(long, conflicts_with = "theta")]
    jump: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    /// Token budget; defaults to the trace budget. Values above the context length are clamped.
    #[arg(long)]
    budget: Option<usize>,
    /// Switch to block selection with this block size.
    #[arg(long)]
    block_size: Option<usize>,
    /// Blocks kept per full layer in block mode; defaults to ceil(budget / block size).
    #[arg(long, requires = "block_size")]
    block_budget: Option<usize>,
    /// Leading tokens every reuse layer also reads.
    #[arg(long, default_value_t = 0)]
    sinks: usize,
    /// Newest tokens every reuse layer also reads.
    #[arg(long, default_value_t = 0)]
    recent: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated context lengths; a `K` suffix multiplies by 1024.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    lengths: Vec<String>,
    #[arg(long)]
    budget: usize,
    /// Policy file; otherwise `--layers` with an optional `--jump`.
    #[arg(long, conflicts_with_all = ["layers", "jump"])]
    policy: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, requires = "layers")]
    jump: Option<usize>,
    #[arg(long, default_value_t = 1)]
    block_size: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Elements per key row across all heads.
    #[arg(long, default_value_t = 128)]
    kv_width: u64,
    /// Host link bandwidth in bytes/s.
    #[arg(long, default_value_t = 32e9)]
    link_bandwidth: f64,
    /// Device memory bandwidth in bytes/s.
    #[arg(long, default_value_t = 1.6e12)]
    hbm_bandwidth: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Similarity matrix to export as a heatmap CSV.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Policies for the side-by-side table (repeatable).
    #[arg(long)]
    policy: Vec<PathBuf>,
    /// Run results for the fidelity table (repeatable).
    #[arg(long)]
    run: Vec<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Invariant(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let res = match cli.command {
        Command::GenTraces(a) => gen_traces(&cli.out_dir, a, started),
        Command::Profile(a) => profile(&cli.out_dir, a, started),
        Command::Plan(a) => plan(&cli.out_dir, a, started),
        Command::Decode(a) => decode(&cli.out_dir, a, started),
        Command::Bench(a) => bench(&cli.out_dir, a, started),
        Command::Report(a) => report(&cli.out_dir, a, started),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(out_dir: &Path, explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| out_dir.join(default_name))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn merge_gen_config(a: &GenArgs) -> Result<GenConfig> {
    let file: GenFile = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Format {
            kind: "config",
            detail: e.to_string(),
        })?,
        None => GenFile::default(),
    };
    let d = SynthModelConfig::default();
    let model = SynthModelConfig {
        layers: a.layers.or(file.layers).unwrap_or(d.layers),
        head_dim: a.head_dim.or(file.head_dim).unwrap_or(d.head_dim),
        context_len: a.ctx.or(file.ctx).unwrap_or(d.context_len),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        rho: a.rho.or(file.rho).unwrap_or(d.rho),
        heads: a.heads.or(file.heads).unwrap_or(d.heads),
        query_gain: a.query_gain.or(file.query_gain).unwrap_or(d.query_gain),
    };
    model.validate()?;
    let cfg = GenConfig {
        model,
        k: a.k.or(file.k).unwrap_or(DEFAULT_K),
        steps: a.steps.or(file.steps).unwrap_or(DEFAULT_STEPS),
        block_size: a.block_size.or(file.block_size).unwrap_or(DEFAULT_BLOCK_SIZE),
    };
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    Ok(cfg)
}

fn gen_traces(out_dir: &Path, a: GenArgs, started: Instant) -> Result<()> {
    let cfg = merge_gen_config(&a)?;
    let out = resolve(out_dir, a.out.clone(), "trace.json");
    let model = generate_model(&cfg.model)?;
    let stream = model.unroll(cfg.steps)?;
    let trace = run_full_trace_on(&stream, cfg.k, cfg.block_size)?;
    let mut m = RunManifest::new("gen-traces", &cfg, Some(cfg.model.seed));
    if let Some(c) = &a.config {
        m = m.input(c);
    }
    let m = m.output(&out).output(&out.with_extension("bin"));
    artifact::write_trace(&out, &trace, Some(&stream), Some(&m.hash()))?;
    m.write(started)
}

fn profile(out_dir: &Path, a: ProfileArgs, started: Instant) -> Result<()> {
    let traces = a
        .trace
        .iter()
        .map(|p| artifact::read_trace(p).map(|l| l.trace))
        .collect::<Result<Vec<_>>>()?;
    let trace = &traces[0];
    if traces.iter().any(|t| t.budget != trace.budget) {
        return Err(Error::Config("traces disagree on the top-k budget".into()));
    }
    let k = a.k.unwrap_or(trace.budget);
    let matrix_out = resolve(out_dir, a.matrix_out, "matrix.json");
    let sens_out = resolve(out_dir, a.sensitivity_out, "sensitivity.json");

    let matrices = traces.iter().map(build_similarity_matrix).collect::<Result<Vec<_>>>()?;
    let matrix = merge_matrices(&matrices)?;
    let model = generate_model(&trace.config)?;
    let sens = sensitivity_profile(&model, a.sensitivity_step, k)?;

    let config = serde_json::json!({ "sensitivityStep": a.sensitivity_step, "k": k });
    let mut m = RunManifest::new("profile", config, Some(trace.config.seed));
    for p in &a.trace {
        m = m.input(p);
    }
    let m = m
        .output(&matrix_out)
        .output(&sens_out);
    let hash = m.hash();
    artifact::write_bytes(&matrix_out, &artifact::encode_matrix(&matrix, trace.budget, Some(&hash))?)?;
    artifact::write_bytes(&sens_out, &artifact::encode_sensitivity(&sens, Some(&hash))?)?;
    m.write(started)
}

fn plan(out_dir: &Path, a: PlanArgs, started: Instant) -> Result<()> {
    let mf = artifact::read_matrix(&a.matrix)?;
    let out = resolve(out_dir, a.out, "policy.json");
    let file = match (a.theta, a.jump) {
        (Some(theta), None) => PolicyFile::planned(&dp_optimize(&mf.matrix, theta)?),
        (None, Some(step)) => {
            let mut policy = static_jump_policy(mf.matrix.layers(), step)?;
            policy.matrix_hash = Some(mf.matrix.content_hash());
            PolicyFile {
                cum_similarity: Some(policy.cum_similarity(&mf.matrix)?),
                policy,
            }
        }
        _ => return Err(Error::Config("plan needs exactly one of --theta or --jump".into())),
    };
    let config = serde_json::json!({ "theta": a.theta, "jump": a.jump });
    let m = RunManifest::new("plan", config, None).input(&a.matrix).output(&out);
    artifact::write_bytes(&out, &file.encode(Some(&m.hash()))?)?;
    m.write(started)
}

fn decode(out_dir: &Path, a: DecodeArgs, started: Instant) -> Result<()> {
    let loaded = artifact::read_trace(&a.trace)?;
    let trace = loaded.trace;
    let policy = artifact::read_policy(&a.policy)?;
    let out = resolve(out_dir, a.out, "run.json");
    let csv_out = out.with_extension("csv");

    // The cache grows by one row per step, so the largest useful budget is
    // the length it reaches at the final step.
    let n = trace.config.context_len + trace.step_count() - 1;
    let mut budget = a.budget.unwrap_or(trace.budget);
    if budget > n {
        eprintln!("warning: budget {budget} exceeds the cache length {n}; clamping to {n}");
        budget = n;
    }
    let granularity = match a.block_size {
        None => Granularity::Token { budget },
        Some(block_size) => Granularity::Block {
            budget: a.block_budget.unwrap_or_else(|| budget.div_ceil(block_size.max(1))),
            block_size,
        },
    };
    let extras = ReuseExtras {
        sinks: a.sinks,
        recent: a.recent,
    };

    let stream = generate_model(&trace.config)?.unroll(trace.step_count())?;
    for t in 0..trace.step_count() {
        for l in 0..trace.layers() {
            if stream.layer_query(t, l) != trace.record(t, l).query {
                return Err(Error::Invariant(format!(
                    "regenerated model disagrees with the trace at step {t}, layer {l}"
                )));
            }
        }
    }
    let run = hybrid_decode_on(&stream, &policy.policy, granularity, extras)?;
    let fidelity = fidelity_report(&trace, &run)?;
    let doc = RunDoc::new(&run, &policy, fidelity)?;

    let config = serde_json::json!({ "granularity": granularity, "extras": extras });
    let m = RunManifest::new("decode", config, Some(trace.config.seed))
        .input(&a.trace)
        .input(&a.policy)
        .output(&out)
        .output(&csv_out);
    artifact::write_bytes(&out, &artifact::to_json_bytes(&doc, Some(&m.hash()))?)?;
    artifact::write_bytes(&csv_out, artifact::fidelity_csv(&doc.fidelity).as_bytes())?;
    m.write(started)
}

fn parse_length(s: &str) -> Result<u64> {
    let t = s.trim();
    let (digits, scale) = match t.strip_suffix(['k', 'K']) {
        Some(d) => (d, 1024),
        None => (t, 1),
    };
    digits
        .parse::<u64>()
        .ok()
        .filter(|&v| v > 0)
        .map(|v| v * scale)
        .ok_or_else(|| Error::Config(format!("invalid context length {s:?}")))
}

fn bench(out_dir: &Path, a: BenchArgs, started: Instant) -> Result<()> {
    let lengths = a
        .lengths
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_length(s))
        .collect::<Result<Vec<_>>>()?;
    if lengths.is_empty() {
        return Err(Error::Config("--lengths needs at least one value".into()));
    }
    let out = resolve(out_dir, a.out, "bench.csv");
    let mut m = RunManifest::new(
        "bench",
        serde_json::json!({
            "lengths": lengths,
            "budget": a.budget,
            "layers": a.layers,
            "jump": a.jump,
            "blockSize": a.block_size,
            "precision": a.precision,
            "kvWidth": a.kv_width,
            "linkBandwidth": a.link_bandwidth,
            "hbmBandwidth": a.hbm_bandwidth,
        }),
        None,
    );
    let policy: LayerPolicy = match (&a.policy, a.layers) {
        (Some(p), _) => {
            m = m.input(p);
            artifact::read_policy(p)?.policy
        }
        (None, Some(l)) => match a.jump {
            Some(s) => static_jump_policy(l, s)?,
            None => LayerPolicy::all_full(l),
        },
        (None, None) => return Err(Error::Config("bench needs --policy or --layers".into())),
    };
    let precision = match a.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };

    // One worker per length; results are joined in input order.
    let reports = std::thread::scope(|s| {
        let handles: Vec<_> = lengths
            .iter()
            .map(|&n| {
                let policy = &policy;
                s.spawn(move || {
                    cost_model(
                        policy,
                        &CostParams {
                            context_len: n,
                            budget: a.budget as u64,
                            block_size: a.block_size,
                            bytes_per_elem: precision.bytes(),
                            kv_width: a.kv_width,
                            link_bandwidth: a.link_bandwidth,
                            hbm_bandwidth: a.hbm_bandwidth,
                        },
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Invariant("bench worker panicked".into()))?)
            .collect::<Result<Vec<_>>>()
    })?;

    let mut csv = String::from("length,bytesRatio,predictedSpeedup\n");
    for (n, r) in lengths.iter().zip(&reports) {
        csv.push_str(&format!("{n},{},{}\n", r.bytes_ratio, r.predicted_speedup));
    }
    let m = m.output(&out);
    artifact::write_bytes(&out, csv.as_bytes())?;
    m.write(started)
}

fn report(out_dir: &Path, a: ReportArgs, started: Instant) -> Result<()> {
    if a.matrix.is_none() && a.policy.is_empty() && a.run.is_empty() {
        return Err(Error::Config("report needs --matrix, --policy or --run inputs".into()));
    }
    let mut m = RunManifest::new("report", serde_json::Value::Null, None);
    let mut writes: Vec<(PathBuf, String)> = Vec::new();
    if let Some(p) = &a.matrix {
        let mf = artifact::read_matrix(p)?;
        m = m.input(p);
        writes.push((out_dir.join("heatmap.csv"), artifact::matrix_heatmap_csv(&mf.matrix)));
    }
    if !a.policy.is_empty() {
        let mut rows = Vec::new();
        for p in &a.policy {
            rows.push((p.display().to_string(), artifact::read_policy(p)?));
            m = m.input(p);
        }
        writes.push((out_dir.join("policies.md"), report::policy_table(&rows)));
    }
    if !a.run.is_empty() {
        let mut rows = Vec::new();
        for p in &a.run {
            rows.push((p.display().to_string(), artifact::read_run(p)?));
            m = m.input(p);
        }
        writes.push((out_dir.join("fidelity.md"), report::fidelity_table(&rows)));
    }
    for (p, _) in &writes {
        m = m.output(p);
    }
    for (p, body) in &writes {
        artifact::write_bytes(p, body.as_bytes())?;
    }
    m.write(started)
}
