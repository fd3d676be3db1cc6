//! Trace bundles: a `manifest.toml` plus one tensor file per array.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor_file::{read_tensor, write_tensor_as, Dtype};
use super::trace::{DecoderTrace, EncoderLayer, EncoderTrace, SeqLayout};

pub const MANIFEST_NAME: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderDims>,
    #[serde(default)]
    pub layers: Vec<LayerFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_pre_text: usize,
    pub n_visual: usize,
    pub n_post_text: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFiles {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_attention: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_attention: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_instr_attention: Option<String>,
}

/// Accepts either a bundle directory or the manifest path itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Trace(format!("{}: {e}", mpath.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Trace(format!(
            "{}: unsupported manifest version {}",
            mpath.display(),
            manifest.version
        )));
    }
    let dir = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let text = toml::to_string(manifest)
        .map_err(|e| Error::Trace(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes tensors first and the manifest last, so a visible manifest always
/// refers to complete files.
pub fn write_encoder_bundle(dir: &Path, trace: &EncoderTrace, dtype: Dtype) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let mut layers = Vec::with_capacity(trace.n_layers());
    for (i, layer) in trace.layers().iter().enumerate() {
        let index = i + 1;
        let mut files = LayerFiles {
            index,
            cls_attention: None,
            self_attention: None,
            last_instr_attention: None,
        };
        if let Some(t) = &layer.cls_attention {
            let name = format!("cls_attn_l{index:03}.vscn");
            write_tensor_as(dir.join(&name), t, dtype)?;
            files.cls_attention = Some(name);
        }
        if let Some(t) = &layer.self_attention {
            let name = format!("self_attn_l{index:03}.vscn");
            write_tensor_as(dir.join(&name), t, dtype)?;
            files.self_attention = Some(name);
        }
        layers.push(files);
    }
    let emb_name = "embeddings.vscn".to_string();
    write_tensor_as(dir.join(&emb_name), trace.embeddings(), dtype)?;
    let (grid_h, grid_w) = trace.grid();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind: TraceKind::Encoder,
        embeddings: Some(emb_name),
        encoder: Some(EncoderDims {
            grid_h,
            grid_w,
            n_layers: trace.n_layers(),
            n_heads: trace.n_heads(),
            embed_dim: trace.embed_dim(),
        }),
        decoder: None,
        layers,
    };
    write_manifest(dir, &manifest)
}

pub fn write_decoder_bundle(dir: &Path, trace: &DecoderTrace, dtype: Dtype) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let mut layers = Vec::with_capacity(trace.n_layers());
    for (i, t) in trace.layers().iter().enumerate() {
        let index = i + 1;
        let name = format!("last_instr_attn_l{index:03}.vscn");
        write_tensor_as(dir.join(&name), t, dtype)?;
        layers.push(LayerFiles {
            index,
            cls_attention: None,
            self_attention: None,
            last_instr_attention: Some(name),
        });
    }
    let layout = trace.layout();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind: TraceKind::Decoder,
        embeddings: None,
        encoder: None,
        decoder: Some(DecoderDims {
            n_layers: trace.n_layers(),
            n_heads: trace.n_heads(),
            n_pre_text: layout.n_pre_text,
            n_visual: layout.n_visual,
            n_post_text: layout.n_post_text,
        }),
        layers,
    };
    write_manifest(dir, &manifest)
}

fn ordered_layers(manifest: &Manifest, n_layers: usize) -> Result<Vec<&LayerFiles>> {
    if manifest.layers.len() != n_layers {
        return Err(Error::Trace(format!(
            "manifest lists {} layers, dims say {n_layers}",
            manifest.layers.len()
        )));
    }
    let mut out: Vec<&LayerFiles> = manifest.layers.iter().collect();
    out.sort_by_key(|l| l.index);
    for (i, l) in out.iter().enumerate() {
        if l.index != i + 1 {
            return Err(Error::Trace(format!(
                "manifest layer indices must be 1..={n_layers}, found {}",
                l.index
            )));
        }
    }
    Ok(out)
}

pub fn read_encoder_bundle(path: &Path) -> Result<EncoderTrace> {
    let (m, dir) = read_manifest(path)?;
    if m.kind != TraceKind::Encoder {
        return Err(Error::Trace(format!(
            "{} is not an encoder bundle",
            dir.display()
        )));
    }
    let dims = m
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Trace("encoder manifest lacks [encoder] dims".into()))?;
    let load = |name: &Option<String>| -> Result<Option<_>> {
        name.as_ref().map(|n| read_tensor(dir.join(n))).transpose()
    };
    let mut layers = Vec::with_capacity(dims.n_layers);
    for files in ordered_layers(&m, dims.n_layers)? {
        layers.push(EncoderLayer {
            cls_attention: load(&files.cls_attention)?,
            self_attention: load(&files.self_attention)?,
        });
    }
    let embeddings = load(&m.embeddings)?
        .ok_or_else(|| Error::Trace("encoder manifest lacks embeddings".into()))?;
    if embeddings.ndim() != 2 || embeddings.shape()[1] != dims.embed_dim {
        return Err(Error::Trace(format!(
            "embeddings shape {:?} disagrees with embed_dim {}",
            embeddings.shape(),
            dims.embed_dim
        )));
    }
    EncoderTrace::new(dims.grid_h, dims.grid_w, dims.n_heads, layers, embeddings)
}

pub fn read_decoder_bundle(path: &Path) -> Result<DecoderTrace> {
    let (m, dir) = read_manifest(path)?;
    if m.kind != TraceKind::Decoder {
        return Err(Error::Trace(format!(
            "{} is not a decoder bundle",
            dir.display()
        )));
    }
    let dims = m
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Trace("decoder manifest lacks [decoder] dims".into()))?;
    let mut layers = Vec::with_capacity(dims.n_layers);
    for files in ordered_layers(&m, dims.n_layers)? {
        let name = files.last_instr_attention.as_ref().ok_or_else(|| {
            Error::Trace(format!("layer {} lacks last_instr_attention", files.index))
        })?;
        layers.push(read_tensor(dir.join(name))?);
    }
    let layout = SeqLayout {
        n_pre_text: dims.n_pre_text,
        n_visual: dims.n_visual,
        n_post_text: dims.n_post_text,
    };
    DecoderTrace::new(dims.n_heads, layout, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::synth::{
        generate_synthetic_decoder, generate_synthetic_encoder, DecoderSynthParams,
        EncoderSynthParams,
    };

    #[test]
    fn encoder_bundle_round_trip_f64() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_synthetic_encoder(&EncoderSynthParams {
            seed: 5,
            grid_h: 3,
            grid_w: 4,
            layers: 3,
            ..Default::default()
        })
        .unwrap();
        let mpath = write_encoder_bundle(dir.path(), &t, Dtype::F64).unwrap();
        assert!(mpath.ends_with(MANIFEST_NAME));
        assert_eq!(read_encoder_bundle(dir.path()).unwrap(), t);
        assert_eq!(read_encoder_bundle(&mpath).unwrap(), t);
        assert!(read_decoder_bundle(dir.path()).is_err());
    }

    #[test]
    fn decoder_bundle_round_trip_f32() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_synthetic_decoder(&DecoderSynthParams {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        write_decoder_bundle(dir.path(), &t, Dtype::F32).unwrap();
        let back = read_decoder_bundle(dir.path()).unwrap();
        assert_eq!(back.layout(), t.layout());
        for (a, b) in t.layers().iter().zip(back.layers()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
    }

    #[test]
    fn manifest_text_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_synthetic_decoder(&DecoderSynthParams {
            layers: 2,
            ..Default::default()
        })
        .unwrap();
        write_decoder_bundle(dir.path(), &t, Dtype::F32).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(text.contains("kind = \"decoder\""));
        assert!(text.contains("last_instr_attn_l002.vscn"));
    }

    #[test]
    fn loader_rejects_unnormalized_rows() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_synthetic_decoder(&DecoderSynthParams {
            layers: 1,
            ..Default::default()
        })
        .unwrap();
        write_decoder_bundle(dir.path(), &t, Dtype::F64).unwrap();
        let mut data = t.layers()[0].data().to_vec();
        data[0] += 0.01;
        let skewed = crate::numerics::Tensor::new(t.layers()[0].shape().to_vec(), data).unwrap();
        crate::trace_io::write_tensor(dir.path().join("last_instr_attn_l001.vscn"), &skewed)
            .unwrap();
        assert!(matches!(
            read_decoder_bundle(dir.path()),
            Err(Error::Trace(_))
        ));
    }
}
