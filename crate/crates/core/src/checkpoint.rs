//! Network checkpoint file.
//!
//! # Layout (`BPNN`, version 1, little-endian)
//!
//! | offset   | type     | field                                  |
//! |----------|----------|----------------------------------------|
//! | 0        | [u8; 4]  | magic `BPNN`                           |
//! | 4        | u32      | version (1)                            |
//! | 8        | u32      | layer count `L`                        |
//! | 12       | u32 × 4  | input height, width; output height, width |
//! | 28       | 24 × L   | layer headers (below)                  |
//! | 28+24L   | u64      | parameter count `P`                    |
//! | 36+24L   | f64 × P  | parameters, declaration order          |
//! | end-4    | u32      | CRC-32 (IEEE) of the parameter bytes   |
//!
//! A layer header is `kind: u8` (0 dense, 1 conv2d, 2 relu, 3 dropout), three
//! zero bytes, three u32 fields and an f64:
//! dense `(in_dim, out_dim, 0)`, conv2d `(kernel_size, in_channels, out_channels)`,
//! relu and dropout `(0, 0, 0)`; the f64 is the dropout rate (0 otherwise).
//!
//! Parameters of a layer are its weights followed by its bias. Dense weights are
//! `[out][in]`, conv weights `[out][in][ky][kx]`.

use std::path::Path;

use crate::binfmt::{f64s_from, Reader, Writer};
use crate::error::{invalid, FormatError, Result};
use crate::neural_net::{LayerSpec, NetworkParams, NetworkSpec};

const MAGIC: [u8; 4] = *b"BPNN";
const VERSION: u32 = 1;

pub fn encode_checkpoint(spec: &NetworkSpec, params: &NetworkParams) -> Result<Vec<u8>> {
    if params.len() != spec.param_count() || params.layer_count() != spec.layers.len() {
        return Err(invalid("parameters do not match spec"));
    }
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    w.u32(spec.layers.len() as u32);
    for v in [
        spec.input_shape.0,
        spec.input_shape.1,
        spec.output_shape.0,
        spec.output_shape.1,
    ] {
        w.u32(v as u32);
    }
    for layer in &spec.layers {
        let (kind, a, b, c, rate) = match *layer {
            LayerSpec::Dense { in_dim, out_dim } => (0u8, in_dim, out_dim, 0, 0.0),
            LayerSpec::Conv2d {
                kernel_size,
                in_channels,
                out_channels,
            } => (1, kernel_size, in_channels, out_channels, 0.0),
            LayerSpec::Relu => (2, 0, 0, 0, 0.0),
            LayerSpec::Dropout { rate } => (3, 0, 0, 0, rate),
        };
        w.u8(kind);
        w.bytes(&[0, 0, 0]);
        w.u32(a as u32);
        w.u32(b as u32);
        w.u32(c as u32);
        w.f64(rate);
    }
    w.u64(params.len() as u64);
    let start = w.len();
    w.f64s(params.as_slice());
    Ok(w.seal(start))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkSpec, NetworkParams)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let n_layers = r.u32()? as usize;
    let input_shape = (r.u32()? as usize, r.u32()? as usize);
    let output_shape = (r.u32()? as usize, r.u32()? as usize);
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for i in 0..n_layers {
        let kind = r.u8()?;
        r.take(3)?;
        let (a, b, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let rate = r.f64()?;
        layers.push(match kind {
            0 => LayerSpec::Dense {
                in_dim: a,
                out_dim: b,
            },
            1 => LayerSpec::Conv2d {
                kernel_size: a,
                in_channels: b,
                out_channels: c,
            },
            2 => LayerSpec::Relu,
            3 => LayerSpec::Dropout { rate },
            k => return Err(FormatError::Structure(format!("layer {i}: unknown kind {k}")).into()),
        });
    }
    let declared = r.u64()? as usize;
    let payload = r.sealed_payload()?;
    let spec = NetworkSpec::new(input_shape, output_shape, layers)
        .map_err(|e| FormatError::Shape(format!("layer spec: {e}")))?;
    if declared != spec.param_count() || payload.len() != declared * 8 {
        return Err(FormatError::Shape(format!(
            "spec needs {} parameters, header declares {declared}, payload holds {}",
            spec.param_count(),
            payload.len() / 8
        ))
        .into());
    }
    let params = NetworkParams::from_flat(&spec, f64s_from(payload))?;
    if !params.is_finite() {
        return Err(FormatError::Structure("non-finite parameter".into()).into());
    }
    Ok((spec, params))
}

pub fn save_checkpoint(
    spec: &NetworkSpec,
    params: &NetworkParams,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(spec, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkSpec, NetworkParams)> {
    decode_checkpoint(&std::fs::read(path)?)
}
