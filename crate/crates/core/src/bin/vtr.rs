use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vtr_core::analysis::{attention_sum_per_layer, bias_histograms_csv, position_bias_histogram};
use vtr_core::cost_model::{
    average_retention, flops_total, flops_uniform, solve_r1, ModelDims, Preset,
};
use vtr_core::encoder_scan::ScoreSource;
use vtr_core::pipeline::{
    run_pipeline, ModelOptions, PipelineOptions, PruneOptions, ScanOptions, OUT_DIR_ENV,
};
use vtr_core::trace_io::{
    generate_synthetic_decoder, generate_synthetic_encoder, read_decoder_bundle,
    write_decoder_bundle, write_encoder_bundle, DecoderSynthParams, Dtype, EncoderSynthParams,
    SeqLayout, VisualBoost,
};
use vtr_core::Error;

/// Visual token reduction: trace generation, two-stage pruning, cost model
/// and attention analysis.
#[derive(Parser)]
#[command(name = "vtr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic encoder or decoder trace bundle
    Gen(GenArgs),
    /// Run selection, merging, pruning and costing over trace bundles
    Pipeline(PipelineArgs),
    /// Prefill FLOPs for a token count or per-layer profile
    Flops(FlopsArgs),
    /// Average-retention arithmetic, or the r1 needed for a target
    Budget(BudgetArgs),
    /// Attention measurements over a decoder trace
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Encoder,
    Decoder,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("grid dims must be at least 1".into());
    }
    Ok((h, w))
}

fn parse_boost(s: &str) -> Result<VisualBoost, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected FIRST:LAST:STRENGTH, got `{s}`"));
    };
    Ok(VisualBoost {
        first_layer: a.parse().map_err(|e| format!("bad first layer: {e}"))?,
        last_layer: b.parse().map_err(|e| format!("bad last layer: {e}"))?,
        strength: c.parse().map_err(|e| format!("bad strength: {e}"))?,
    })
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_source(s: &str) -> Result<ScoreSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    seed: u64,
    /// Bundle directory to create
    #[arg(long)]
    out: PathBuf,
    /// Patch grid (encoder), or the visual-token grid (decoder)
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Layer count (encoder depth or decoder depth)
    #[arg(long, visible_alias = "k")]
    layers: Option<usize>,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Encoder embedding width
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Encoder distance-decay weight at layer 1
    #[arg(long, default_value_t = 0.0)]
    locality: f64,
    #[arg(long)]
    no_cls: bool,
    #[arg(long)]
    no_self_attn: bool,
    /// Decoder text tokens before the image
    #[arg(long, default_value_t = 5)]
    pre: usize,
    /// Decoder visual tokens (overrides --grid)
    #[arg(long)]
    visual: Option<usize>,
    /// Decoder text tokens after the image
    #[arg(long, default_value_t = 10)]
    post: usize,
    /// Decoder recency-bias strength at layer 1
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    /// Decoder visual-attention boost band, FIRST:LAST:STRENGTH
    #[arg(long, value_parser = parse_boost)]
    boost: Option<VisualBoost>,
    /// Store tensors as f64 instead of f32
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// Directory of samples, each with encoder/ and decoder/ bundles
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    r1: Option<f64>,
    /// Target average retention; r1 is solved from it
    #[arg(long, conflicts_with = "r1")]
    target: Option<f64>,
    #[arg(long)]
    r2: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "K")]
    n_layers: Option<usize>,
    #[arg(long)]
    global_fraction: Option<f64>,
    #[arg(long)]
    local_layer: Option<usize>,
    #[arg(long)]
    output_layer: Option<usize>,
    /// Window grid, ROWSxCOLS
    #[arg(long, value_parser = parse_grid)]
    windows: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_source)]
    score_source: Option<ScoreSource>,
    #[arg(long)]
    n_text: Option<usize>,
}

#[derive(Args)]
struct DimsArgs {
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long = "K")]
    n_layers: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
}

impl DimsArgs {
    fn dims(&self) -> Result<ModelDims, Error> {
        let base = self.preset.unwrap_or(Preset::Llava15).info().dims;
        let dims = ModelDims {
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            d: self.d.unwrap_or(base.d),
            m: self.m.unwrap_or(base.m),
        };
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    dims: DimsArgs,
    /// Uniform visual tokens per layer (may be fractional)
    #[arg(long, required_unless_present = "profile", conflicts_with = "profile")]
    tokens: Option<f64>,
    /// Comma-separated per-layer visual token counts
    #[arg(long, value_delimiter = ',')]
    profile: Option<Vec<usize>>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Target average retention; prints the r1 that reaches it
    #[arg(long, required_unless_present = "r1", conflicts_with = "r1")]
    target: Option<f64>,
    /// Stage-one retention; prints the resulting average retention
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long, default_value_t = 0.333)]
    r2: f64,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long = "K", default_value_t = 32)]
    n_layers: usize,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-layer, per-head attention mass on the visual span (layer,head,sum)
    AttentionSum {
        #[arg(long)]
        trace: PathBuf,
        /// Emit the per-layer head mean (layer,mean_sum) instead
        #[arg(long)]
        head_mean: bool,
        /// Output file, or a directory to write attention_sums.csv into
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid histogram of tokens kept by last-instruction attention (layer,row,col,count)
    Bias {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,8,16")]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        retention: f64,
        #[arg(long, value_parser = parse_grid)]
        grid: (usize, usize),
        /// Output file, or a directory to write bias_histogram.csv into
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to `out` (a file, or a directory that receives `default_name`), or
/// to stdout when no path is given.
fn emit(text: &str, out: Option<&Path>, default_name: &str) -> Result<(), Error> {
    match out {
        Some(p) => {
            let target = if p.is_dir() {
                p.join(default_name)
            } else {
                p.to_path_buf()
            };
            fs::write(&target, text).map_err(|e| Error::Io {
                path: target.clone(),
                source: e,
            })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), Error> {
    let dtype = if a.f64 { Dtype::F64 } else { Dtype::F32 };
    let manifest = match a.kind {
        Kind::Encoder => {
            let (grid_h, grid_w) = a.grid.unwrap_or((24, 24));
            let params = EncoderSynthParams {
                seed: a.seed,
                grid_h,
                grid_w,
                layers: a.layers.unwrap_or(24),
                heads: a.heads,
                embed_dim: a.dim,
                locality_strength: a.locality,
                with_cls: !a.no_cls,
                with_self_attention: !a.no_self_attn,
            };
            let trace = generate_synthetic_encoder(&params)?;
            write_encoder_bundle(&a.out, &trace, dtype)?
        }
        Kind::Decoder => {
            let n_visual = match (a.visual, a.grid) {
                (Some(n), _) => n,
                (None, Some((h, w))) => h * w,
                (None, None) => 576,
            };
            let params = DecoderSynthParams {
                seed: a.seed,
                layers: a.layers.unwrap_or(32),
                heads: a.heads,
                layout: SeqLayout {
                    n_pre_text: a.pre,
                    n_visual,
                    n_post_text: a.post,
                },
                position_bias_strength: a.bias,
                visual_boost: a.boost,
            };
            let trace = generate_synthetic_decoder(&params)?;
            write_decoder_bundle(&a.out, &trace, dtype)?
        }
    };
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<(), String> {
    let file = match &a.config {
        Some(p) => PipelineOptions::from_file(p).map_err(|e| format!("[config] {e}"))?,
        None => PipelineOptions::default(),
    };
    let env = PipelineOptions {
        out_dir: std::env::var_os(OUT_DIR_ENV).map(PathBuf::from),
        ..Default::default()
    };
    let (window_rows, window_cols) = a.windows.unzip();
    let flags = PipelineOptions {
        preset: a.preset,
        encoder_trace: a.encoder,
        decoder_trace: a.decoder,
        batch_dir: a.batch,
        out_dir: a.out,
        n_text_total: a.n_text,
        scan: ScanOptions {
            r1: a.r1,
            target_avg: a.target,
            global_fraction: a.global_fraction,
            local_layer: a.local_layer,
            output_layer: a.output_layer,
            window_rows,
            window_cols,
            score_source: a.score_source,
        },
        prune: PruneOptions { k: a.k, r2: a.r2 },
        model: ModelOptions {
            n_layers: a.n_layers,
            d: None,
            m: None,
        },
    };
    let cfg = file
        .merged(env)
        .merged(flags)
        .resolve()
        .map_err(|e| format!("[config] {e}"))?;
    let results = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    for (name, r) in results {
        let label = if name.is_empty() {
            String::new()
        } else {
            format!("{name}: ")
        };
        match r {
            Ok(o) => {
                let rep = &o.report;
                println!(
                    "{label}selected={} global={} local={} retained={} total_flops={:.6e} \
                     uniform_flops={:.6e} avg_retention={:.6} kv_fraction={:.6} speedup={:.4}",
                    o.selection.budget(),
                    o.selection.global_indices.len(),
                    o.selection.local_indices.len(),
                    o.profile.retained.len(),
                    rep.total_flops,
                    rep.total_flops_uniform,
                    rep.avg_retention_overall,
                    rep.kv_fraction,
                    rep.prefill_speedup_estimate,
                );
            }
            Err(e) => failures.push(format!("{label}{e}")),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("\n"))
    }
}

fn cmd_flops(a: FlopsArgs) -> Result<(), Error> {
    let dims = a.dims.dims()?;
    let total = match (&a.profile, a.tokens) {
        (Some(p), _) => flops_total(p, &dims)?,
        (None, Some(t)) => {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::Config {
                    field: "tokens".into(),
                    reason: format!("{t} is not a nonnegative count"),
                });
            }
            flops_uniform(t, &dims)
        }
        (None, None) => unreachable!("clap requires one of --tokens/--profile"),
    };
    println!("{total:.6e}");
    Ok(())
}

fn cmd_budget(a: BudgetArgs) -> Result<(), Error> {
    match (a.target, a.r1) {
        (Some(t), _) => println!("r1={}", solve_r1(t, a.r2, a.k, a.n_layers)?),
        (None, Some(r1)) => println!(
            "average_retention={}",
            average_retention(r1, a.r2, a.k, a.n_layers)?
        ),
        (None, None) => unreachable!("clap requires one of --target/--r1"),
    }
    Ok(())
}

fn cmd_analyze(c: AnalyzeCommand) -> Result<(), Error> {
    match c {
        AnalyzeCommand::AttentionSum {
            trace,
            head_mean,
            out,
        } => {
            let dec = read_decoder_bundle(&trace)?;
            let curve = attention_sum_per_layer(&dec);
            let text = if head_mean {
                curve.head_mean_csv()
            } else {
                curve.to_csv()
            };
            emit(&text, out.as_deref(), "attention_sums.csv")
        }
        AnalyzeCommand::Bias {
            trace,
            layers,
            retention,
            grid,
            out,
        } => {
            let dec = read_decoder_bundle(&trace)?;
            let hists = layers
                .iter()
                .map(|&l| position_bias_histogram(&dec, l, retention, grid.0, grid.1))
                .collect::<Result<Vec<_>, _>>()?;
            emit(
                &bias_histograms_csv(&hists),
                out.as_deref(),
                "bias_histogram.csv",
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a).map_err(|e| format!("[gen] {e}")),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Flops(a) => cmd_flops(a).map_err(|e| format!("[flops] {e}")),
        Command::Budget(a) => cmd_budget(a).map_err(|e| format!("[budget] {e}")),
        Command::Analyze(c) => cmd_analyze(c).map_err(|e| format!("[analyze] {e}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
