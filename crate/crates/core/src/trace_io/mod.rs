//! Tensor container format, trace types, on-disk bundles and seeded
//! synthetic trace generators.

mod bundle;
mod synth;
mod tensor_file;
mod trace;

pub use bundle::{
    manifest_path, read_decoder_bundle, read_encoder_bundle, read_manifest, write_decoder_bundle,
    write_encoder_bundle, DecoderDims, EncoderDims, LayerFiles, Manifest, TraceKind, MANIFEST_NAME,
    MANIFEST_VERSION,
};
pub use synth::{
    generate_synthetic_decoder, generate_synthetic_encoder, locality_weight, recency_weight,
    DecoderSynthParams, EncoderSynthParams, VisualBoost,
};
pub use tensor_file::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, write_tensor_as, Dtype,
    FORMAT_VERSION, MAGIC,
};
pub use trace::{DecoderTrace, EncoderLayer, EncoderTrace, SeqLayout, ROW_SUM_TOL};
