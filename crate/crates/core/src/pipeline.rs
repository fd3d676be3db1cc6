//! End-to-end run: encoder selection and merging, decoder pruning, costing.
//!
//! Configuration comes in layers. [`PipelineOptions`] holds optional fields and
//! is what a config file deserializes into; flag overrides are another
//! `PipelineOptions` merged on top, and [`PipelineOptions::resolve`] fills anything
//! still unset from the chosen model preset.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::{build_report, solve_r1, CostReport, ModelDims, Preset};
use crate::decoder_prune::{prune_at_layer, text_attention_scores, LayerTokenProfile, PruneConfig};
use crate::encoder_scan::{merge_tokens, select_tokens, ScanConfig, ScoreSource, TokenSelection};
use crate::error::{Error, Result};
use crate::trace_io::{
    read_decoder_bundle, read_encoder_bundle, write_tensor, DecoderTrace, EncoderTrace,
};

/// Output directory override, between flags and the config file in
/// precedence.
pub const OUT_DIR_ENV: &str = "VTR_OUT_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanOptions {
    pub r1: Option<f64>,
    pub target_avg: Option<f64>,
    pub global_fraction: Option<f64>,
    pub local_layer: Option<usize>,
    pub output_layer: Option<usize>,
    pub window_rows: Option<usize>,
    pub window_cols: Option<usize>,
    pub score_source: Option<ScoreSource>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneOptions {
    pub k: Option<usize>,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    #[serde(rename = "K")]
    pub n_layers: Option<usize>,
    pub d: Option<usize>,
    pub m: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub preset: Option<Preset>,
    pub encoder_trace: Option<PathBuf>,
    pub decoder_trace: Option<PathBuf>,
    /// Directory of samples, each holding `encoder/` and `decoder/` bundles.
    pub batch_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub n_text_total: Option<usize>,
    pub scan: ScanOptions,
    pub prune: PruneOptions,
    pub model: ModelOptions,
}

fn pick<T>(over: Option<T>, base: Option<T>) -> Option<T> {
    over.or(base)
}

impl PipelineOptions {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut opts: PipelineOptions = toml::from_str(&text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut opts.encoder_trace,
            &mut opts.decoder_trace,
            &mut opts.batch_dir,
            &mut opts.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(opts)
    }

    /// Fields set in `over` win. Setting either `r1` or `target_avg` in
    /// `over` clears the other one from `self`.
    pub fn merged(self, over: PipelineOptions) -> PipelineOptions {
        let (r1, target_avg) = if over.scan.r1.is_some() || over.scan.target_avg.is_some() {
            (over.scan.r1, over.scan.target_avg)
        } else {
            (self.scan.r1, self.scan.target_avg)
        };
        PipelineOptions {
            preset: pick(over.preset, self.preset),
            encoder_trace: pick(over.encoder_trace, self.encoder_trace),
            decoder_trace: pick(over.decoder_trace, self.decoder_trace),
            batch_dir: pick(over.batch_dir, self.batch_dir),
            out_dir: pick(over.out_dir, self.out_dir),
            n_text_total: pick(over.n_text_total, self.n_text_total),
            scan: ScanOptions {
                r1,
                target_avg,
                global_fraction: pick(over.scan.global_fraction, self.scan.global_fraction),
                local_layer: pick(over.scan.local_layer, self.scan.local_layer),
                output_layer: pick(over.scan.output_layer, self.scan.output_layer),
                window_rows: pick(over.scan.window_rows, self.scan.window_rows),
                window_cols: pick(over.scan.window_cols, self.scan.window_cols),
                score_source: pick(over.scan.score_source, self.scan.score_source),
            },
            prune: PruneOptions {
                k: pick(over.prune.k, self.prune.k),
                r2: pick(over.prune.r2, self.prune.r2),
            },
            model: ModelOptions {
                n_layers: pick(over.model.n_layers, self.model.n_layers),
                d: pick(over.model.d, self.model.d),
                m: pick(over.model.m, self.model.m),
            },
        }
    }

    /// Fills unset fields from the preset (LLaVA-1.5 when none is named) and
    /// checks everything that can be checked without the traces.
    pub fn resolve(self) -> Result<PipelineConfig> {
        if self.scan.r1.is_some() && self.scan.target_avg.is_some() {
            return Err(Error::config("r1", "set either r1 or target_avg, not both"));
        }
        let info = self.preset.unwrap_or(Preset::Llava15).info();
        let dims = ModelDims {
            n_layers: self.model.n_layers.unwrap_or(info.dims.n_layers),
            d: self.model.d.unwrap_or(info.dims.d),
            m: self.model.m.unwrap_or(info.dims.m),
        };
        dims.validate()?;
        let prune = PruneConfig {
            k: self.prune.k.unwrap_or(info.prune_layer),
            r2: self.prune.r2.unwrap_or(0.333),
            n_layers: dims.n_layers,
        };
        prune.validate()?;
        let r1 = match (self.scan.r1, self.scan.target_avg) {
            (Some(r1), _) => r1,
            (None, Some(t)) => solve_r1(t, prune.r2, prune.k, prune.n_layers)
                .map_err(|e| Error::config("target_avg", e.to_string()))?,
            (None, None) => 0.5,
        };
        let defaults = ScanConfig::default();
        let scan = ScanConfig {
            r1,
            global_fraction: self
                .scan
                .global_fraction
                .unwrap_or(defaults.global_fraction),
            local_layer: self.scan.local_layer.unwrap_or(info.local_layer),
            output_layer: self.scan.output_layer.unwrap_or(info.output_layer),
            window_rows: self.scan.window_rows.unwrap_or(defaults.window_rows),
            window_cols: self.scan.window_cols.unwrap_or(defaults.window_cols),
            score_source: self.scan.score_source.unwrap_or(info.score_source),
        };
        let inputs = match (self.batch_dir, self.encoder_trace, self.decoder_trace) {
            (Some(dir), None, None) => Inputs::Batch(dir),
            (None, Some(encoder), Some(decoder)) => Inputs::Single { encoder, decoder },
            (Some(_), _, _) => {
                return Err(Error::config(
                    "batch_dir",
                    "batch_dir excludes encoder_trace/decoder_trace",
                ))
            }
            (None, None, _) => return Err(Error::config("encoder_trace", "missing")),
            (None, Some(_), None) => return Err(Error::config("decoder_trace", "missing")),
        };
        Ok(PipelineConfig {
            scan,
            prune,
            dims,
            inputs,
            n_text_total: self.n_text_total,
            out_dir: self.out_dir.unwrap_or_else(|| PathBuf::from("vtr-out")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    Single { encoder: PathBuf, decoder: PathBuf },
    Batch(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scan: ScanConfig,
    pub prune: PruneConfig,
    pub dims: ModelDims,
    pub inputs: Inputs,
    /// Defaults to the decoder trace's text-token count.
    pub n_text_total: Option<usize>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    LoadEncoder,
    Select,
    Merge,
    LoadDecoder,
    TextScores,
    Prune,
    Report,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::LoadEncoder => "load-encoder",
            Stage::Select => "select",
            Stage::Merge => "merge",
            Stage::LoadDecoder => "load-decoder",
            Stage::TextScores => "text-scores",
            Stage::Prune => "prune",
            Stage::Report => "report",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub selection: TokenSelection,
    pub profile: LayerTokenProfile,
    pub report: CostReport,
}

/// Runs both stages and the cost model on in-memory traces.
pub fn run_on_traces(
    encoder: &EncoderTrace,
    decoder: &DecoderTrace,
    cfg: &PipelineConfig,
) -> std::result::Result<PipelineOutcome, StageError> {
    let mut selection = select_tokens(encoder, &cfg.scan).at(Stage::Select)?;
    merge_tokens(encoder.embeddings(), &mut selection).at(Stage::Merge)?;

    let layout = decoder.layout();
    if layout.n_visual != selection.budget() {
        return Err(Error::Layout(format!(
            "decoder trace has {} visual tokens, stage one kept {}",
            layout.n_visual,
            selection.budget()
        )))
        .at(Stage::TextScores);
    }
    if cfg.prune.k > decoder.n_layers() {
        return Err(Error::config(
            "k",
            format!(
                "{} exceeds decoder trace depth {}",
                cfg.prune.k,
                decoder.n_layers()
            ),
        ))
        .at(Stage::TextScores);
    }
    let scores =
        text_attention_scores(decoder, cfg.prune.k, layout.visual_span()).at(Stage::TextScores)?;
    let profile = prune_at_layer(scores.data(), &cfg.prune, selection.budget()).at(Stage::Prune)?;
    let n_text = cfg.n_text_total.unwrap_or_else(|| layout.n_text());
    let report = build_report(&selection, &profile, &cfg.dims, n_text).at(Stage::Report)?;
    Ok(PipelineOutcome {
        selection,
        profile,
        report,
    })
}

#[derive(Serialize)]
struct PruneReport<'a> {
    k: usize,
    r2: f64,
    n_merged: usize,
    n_retained: usize,
    retained: &'a [usize],
    counts: &'a [usize],
}

pub const SELECTION_FILE: &str = "selection.toml";
pub const MERGED_FILE: &str = "merged_embeddings.vscn";
pub const PRUNE_FILE: &str = "prune.toml";
pub const COST_CSV: &str = "cost.csv";
pub const COST_SUMMARY: &str = "cost_summary.toml";

/// Writes every artifact of one run into `dir`.
pub fn write_outcome(dir: &Path, outcome: &PipelineOutcome, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    put(SELECTION_FILE, outcome.selection.to_report())?;
    if let Some(m) = &outcome.selection.merged_embeddings {
        write_tensor(dir.join(MERGED_FILE), m)?;
    }
    let prune = PruneReport {
        k: cfg.prune.k,
        r2: cfg.prune.r2,
        n_merged: outcome.profile.n_merged,
        n_retained: outcome.profile.retained.len(),
        retained: &outcome.profile.retained,
        counts: &outcome.profile.counts,
    };
    put(
        PRUNE_FILE,
        toml::to_string(&prune).expect("prune report serializes"),
    )?;
    put(COST_CSV, outcome.report.to_csv())?;
    put(COST_SUMMARY, outcome.report.to_summary())?;
    Ok(())
}

fn run_single(
    encoder: &Path,
    decoder: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> std::result::Result<PipelineOutcome, StageError> {
    let enc = read_encoder_bundle(encoder).at(Stage::LoadEncoder)?;
    let dec = read_decoder_bundle(decoder).at(Stage::LoadDecoder)?;
    let outcome = run_on_traces(&enc, &dec, cfg)?;
    write_outcome(out_dir, &outcome, cfg).at(Stage::Write)?;
    Ok(outcome)
}

/// Per-sample result of a batch run, in sample-name order.
pub type BatchResult = Vec<(String, std::result::Result<PipelineOutcome, StageError>)>;

/// Loads traces from disk, runs, and writes artifacts. Batch samples run in
/// parallel, each into its own `out_dir/<sample>/`.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<BatchResult, StageError> {
    match &cfg.inputs {
        Inputs::Single { encoder, decoder } => {
            let r = run_single(encoder, decoder, &cfg.out_dir, cfg);
            Ok(vec![(String::new(), r)])
        }
        Inputs::Batch(dir) => {
            let entries = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))
                .at(Stage::Config)?;
            let mut names: Vec<String> = entries
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().into_string().ok())
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::config(
                    "batch_dir",
                    format!("{} has no samples", dir.display()),
                ))
                .at(Stage::Config);
            }
            Ok(names
                .into_par_iter()
                .map(|name| {
                    let sample = dir.join(&name);
                    let r = run_single(
                        &sample.join("encoder"),
                        &sample.join("decoder"),
                        &cfg.out_dir.join(&name),
                        cfg,
                    );
                    (name, r)
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_preset() {
        let file = PipelineOptions {
            preset: Some(Preset::Qwen25Vl),
            encoder_trace: Some("e".into()),
            decoder_trace: Some("d".into()),
            scan: ScanOptions {
                r1: Some(0.4),
                ..Default::default()
            },
            prune: PruneOptions {
                k: Some(10),
                r2: None,
            },
            ..Default::default()
        };
        let flags = PipelineOptions {
            prune: PruneOptions {
                k: Some(12),
                r2: None,
            },
            scan: ScanOptions {
                target_avg: Some(0.2),
                ..Default::default()
            },
            ..Default::default()
        };
        let cfg = file.merged(flags).resolve().unwrap();
        assert_eq!(cfg.prune.k, 12);
        assert_eq!(cfg.dims.n_layers, 28);
        assert_eq!(cfg.scan.local_layer, 8);
        assert_eq!(cfg.scan.score_source, ScoreSource::SelfAvg);
        let expect = solve_r1(0.2, 0.333, 12, 28).unwrap();
        assert_eq!(cfg.scan.r1, expect);
    }

    #[test]
    fn resolve_names_bad_fields() {
        let base = PipelineOptions {
            encoder_trace: Some("e".into()),
            decoder_trace: Some("d".into()),
            ..Default::default()
        };
        let bad_k = base.clone().merged(PipelineOptions {
            prune: PruneOptions {
                k: Some(40),
                r2: None,
            },
            ..Default::default()
        });
        match bad_k.resolve() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "k"),
            other => panic!("{other:?}"),
        }
        let infeasible = base.clone().merged(PipelineOptions {
            scan: ScanOptions {
                target_avg: Some(0.9),
                ..Default::default()
            },
            ..Default::default()
        });
        match infeasible.resolve() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "target_avg"),
            other => panic!("{other:?}"),
        }
        let no_dec = PipelineOptions {
            encoder_trace: Some("e".into()),
            ..Default::default()
        };
        assert!(no_dec.resolve().is_err());
    }

    #[test]
    fn config_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            r#"
preset = "llava15"
encoder_trace = "enc"
decoder_trace = "dec"
n_text_total = 63

[scan]
target_avg = 0.111
window_rows = 2
window_cols = 2
score_source = "cls"

[prune]
k = 16
r2 = 0.333

[model]
K = 32
"#,
        )
        .unwrap();
        let opts = PipelineOptions::from_file(&path).unwrap();
        assert_eq!(
            opts.encoder_trace.as_deref(),
            Some(dir.path().join("enc").as_path())
        );
        let cfg = opts.resolve().unwrap();
        assert!((cfg.scan.r1 - 0.1665).abs() < 1e-3);
        assert_eq!(cfg.n_text_total, Some(63));

        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(
            PipelineOptions::from_file(&path),
            Err(Error::Config { .. })
        ));
    }
}
