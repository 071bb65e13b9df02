//! Synthetic heat-source scenes and simulated observations.
//!
//! A scene is a constant background plus isotropic Gaussian blobs. Sample `i` of
//! a dataset with master seed `s` uses `sᵢ = split_seed(s, i)`; the scene is drawn
//! from `split_seed(sᵢ, 0)` and the observation noise from `split_seed(sᵢ, 1)`.
//!
//! # Dataset file (`BPDS`, version 1, little-endian)
//!
//! | offset | type     | field                              |
//! |--------|----------|------------------------------------|
//! | 0      | [u8; 4]  | magic `BPDS`                       |
//! | 4      | u32      | version (1)                        |
//! | 8      | u8       | task (0 deblur, 1 superres)        |
//! | 9      | u8       | supervised (0 or 1)                |
//! | 10     | u16      | reserved, 0                        |
//! | 12     | u32      | sample count                       |
//! | 16     | u32 × 2  | source height, width               |
//! | 24     | u32 × 2  | observation height, width          |
//! | 32     | u32      | downsample factor                  |
//! | 36     | u32      | psf size                           |
//! | 40     | f64      | noise variance                     |
//! | 48     | u64      | generator seed                     |
//! | 56     | f64 × k² | psf weights, row-major             |
//! | ...    | f64 ...  | per sample: `f` (if supervised), then `g` |
//! | end-4  | u32      | CRC-32 (IEEE) of bytes 56..end-4   |

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::binfmt::{f64s_from, Reader, Writer};
use crate::error::{invalid, FormatError, Result};
use crate::forward_ops::{
    compose, Convolution, Downsample, LinearOperator, Operator, PointwiseMap, PsfKernel,
};
use crate::grid::ImageGrid;
use crate::rng::{split_seed, stream_rng};

const MAGIC: [u8; 4] = *b"BPDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 56;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: (usize, usize),
    pub blob_count_range: (usize, usize),
    pub amplitude_range: (f64, f64),
    pub blob_sigma_range: (f64, f64),
    pub background_level: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: (128, 128),
            blob_count_range: (2, 6),
            amplitude_range: (0.5, 1.0),
            blob_sigma_range: (2.0, 10.0),
            background_level: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(invalid("scene size must be positive"));
        }
        if self.blob_count_range.0 > self.blob_count_range.1 {
            return Err(invalid("blob_count_range min exceeds max"));
        }
        let (a0, a1) = self.amplitude_range;
        if !(a0.is_finite() && a1.is_finite() && a0 <= a1 && a0 >= 0.0) {
            return Err(invalid(
                "amplitude_range must be finite, non-negative and ordered",
            ));
        }
        let (s0, s1) = self.blob_sigma_range;
        if !(s0 > 0.0 && s1.is_finite() && s0 <= s1) {
            return Err(invalid("blob_sigma_range must be positive and ordered"));
        }
        if !self.background_level.is_finite() {
            return Err(invalid("background_level must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub amplitude: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Deblur,
    Superres,
}

impl Task {
    fn tag(self) -> u8 {
        match self {
            Task::Deblur => 0,
            Task::Superres => 1,
        }
    }
}

/// `H` for deblurring, `H D` (downsample, then blur on the coarse grid) for
/// super-resolution.
pub fn forward_operator(
    task: Task,
    source_shape: (usize, usize),
    psf: &PsfKernel,
    factor: usize,
) -> Result<Operator> {
    match task {
        Task::Deblur => Convolution::shared(source_shape, psf.clone()),
        Task::Superres => {
            let d = Downsample::shared(source_shape, factor)?;
            let h = Convolution::shared(d.output_shape(), psf.clone())?;
            compose(h, d)
        }
    }
}

/// Blob parameters behind [`generate_source_image`].
pub fn sample_blobs(cfg: &SceneConfig, seed: u64) -> Result<Vec<Blob>> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, 0);
    let (h, w) = cfg.size;
    let k = rng.random_range(cfg.blob_count_range.0..=cfg.blob_count_range.1);
    let blobs = (0..k)
        .map(|_| {
            let cy = rng.random::<f64>() * h as f64;
            let cx = rng.random::<f64>() * w as f64;
            let amplitude = rng.random_range(cfg.amplitude_range.0..=cfg.amplitude_range.1);
            let sigma = rng.random_range(cfg.blob_sigma_range.0..=cfg.blob_sigma_range.1);
            Blob {
                center: (cy, cx),
                amplitude,
                sigma,
            }
        })
        .collect();
    Ok(blobs)
}

pub fn render_blobs(size: (usize, usize), background: f64, blobs: &[Blob]) -> ImageGrid {
    ImageGrid::from_fn(size.0, size.1, |y, x| {
        let mut v = background;
        for b in blobs {
            let dy = y as f64 - b.center.0;
            let dx = x as f64 - b.center.1;
            v += b.amplitude * (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
        }
        v
    })
}

pub fn generate_source_image(cfg: &SceneConfig, seed: u64) -> Result<ImageGrid> {
    let blobs = sample_blobs(cfg, seed)?;
    Ok(render_blobs(cfg.size, cfg.background_level, &blobs))
}

/// `g = op(f) + ε`, `ε ~ N(0, noise_variance)` iid from `stream_rng(seed, 0)`.
pub fn simulate_observation(
    f: &ImageGrid,
    op: &dyn LinearOperator,
    noise_variance: f64,
    seed: u64,
) -> Result<ImageGrid> {
    simulate_observation_with(f, &PointwiseMap::identity(), op, noise_variance, seed)
}

/// Observation through a pointwise map first: `g = op(Φ(f)) + ε`.
pub fn simulate_observation_with(
    f: &ImageGrid,
    phi: &PointwiseMap,
    op: &dyn LinearOperator,
    noise_variance: f64,
    seed: u64,
) -> Result<ImageGrid> {
    if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
        return Err(invalid(format!(
            "noise variance must be non-negative, got {noise_variance}"
        )));
    }
    let mut g = op.apply(&phi.apply(f))?;
    if noise_variance > 0.0 {
        let sd = noise_variance.sqrt();
        let mut rng = stream_rng(seed, 0);
        for v in g.values_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sd * e;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub g: ImageGrid,
    pub f: Option<ImageGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub task: Task,
    pub source_shape: (usize, usize),
    pub noise_variance: f64,
    pub psf: PsfKernel,
    pub downsample_factor: usize,
    pub generator_seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_supervised(&self) -> bool {
        self.samples.first().is_some_and(|s| s.f.is_some())
    }

    pub fn observation_shape(&self) -> (usize, usize) {
        let k = self.downsample_factor;
        (self.source_shape.0 / k, self.source_shape.1 / k)
    }

    pub fn forward_operator(&self) -> Result<Operator> {
        forward_operator(
            self.task,
            self.source_shape,
            &self.psf,
            self.downsample_factor,
        )
    }

    /// Copy with the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            task: self.task,
            source_shape: self.source_shape,
            noise_variance: self.noise_variance,
            psf: self.psf.clone(),
            downsample_factor: self.downsample_factor,
            generator_seed: self.generator_seed,
        }
    }

    /// Drops every label.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    g: s.g.clone(),
                    f: None,
                })
                .collect(),
            ..self.clone_meta()
        }
    }

    /// Checks the labelling and shape invariants.
    pub fn validate(&self) -> Result<()> {
        let supervised = self.is_supervised();
        let g_shape = self.observation_shape();
        if self.task == Task::Deblur && self.downsample_factor != 1 {
            return Err(invalid("deblur datasets must have downsample factor 1"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.f.is_some() != supervised {
                return Err(invalid(format!(
                    "sample {i}: labelled and unlabelled samples are mixed"
                )));
            }
            if s.g.shape() != g_shape {
                return Err(invalid(format!(
                    "sample {i}: observation shape {:?}, expected {g_shape:?}",
                    s.g.shape()
                )));
            }
            if let Some(f) = &s.f {
                if f.shape() != self.source_shape {
                    return Err(invalid(format!("sample {i}: source shape mismatch")));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    pub task: Task,
    pub psf: PsfKernel,
    pub downsample_factor: usize,
    pub noise_variance: f64,
    pub count: usize,
    pub supervised: bool,
    pub seed: u64,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.scene.validate()?;
    if spec.count == 0 {
        return Err(invalid("dataset count must be at least 1"));
    }
    let factor = match spec.task {
        Task::Deblur => 1,
        Task::Superres => spec.downsample_factor,
    };
    let op = forward_operator(spec.task, spec.scene.size, &spec.psf, factor)?;
    let samples = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let s = split_seed(spec.seed, i as u64);
            let f = generate_source_image(&spec.scene, split_seed(s, 0))?;
            let g = simulate_observation(&f, op.as_ref(), spec.noise_variance, split_seed(s, 1))?;
            Ok(Sample {
                g,
                f: spec.supervised.then_some(f),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        task: spec.task,
        source_shape: spec.scene.size,
        noise_variance: spec.noise_variance,
        psf: spec.psf.clone(),
        downsample_factor: factor,
        generator_seed: spec.seed,
    })
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| invalid(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    w.u8(ds.task.tag());
    w.u8(ds.is_supervised() as u8);
    w.u16(0);
    w.u32(to_u32(ds.len(), "sample count")?);
    let (gh, gw) = ds.observation_shape();
    for v in [
        ds.source_shape.0,
        ds.source_shape.1,
        gh,
        gw,
        ds.downsample_factor,
        ds.psf.size(),
    ] {
        w.u32(to_u32(v, "dimension")?);
    }
    w.f64(ds.noise_variance);
    w.u64(ds.generator_seed);
    debug_assert_eq!(w.len(), HEADER_LEN);
    w.f64s(ds.psf.weights());
    for s in &ds.samples {
        if let Some(f) = &s.f {
            w.f64s(f.values());
        }
        w.f64s(s.g.values());
    }
    Ok(w.seal(HEADER_LEN))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let task = match r.u8()? {
        0 => Task::Deblur,
        1 => Task::Superres,
        t => return Err(FormatError::Structure(format!("unknown task tag {t}")).into()),
    };
    let supervised = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(FormatError::Structure(format!("bad supervised flag {v}")).into()),
    };
    let _reserved = r.u16()?;
    let count = r.u32()? as usize;
    let (fh, fw) = (r.u32()? as usize, r.u32()? as usize);
    let (gh, gw) = (r.u32()? as usize, r.u32()? as usize);
    let factor = r.u32()? as usize;
    let psf_size = r.u32()? as usize;
    let noise_variance = r.f64()?;
    let generator_seed = r.u64()?;
    let payload = r.sealed_payload()?;

    let structure = |m: String| -> crate::error::Error { FormatError::Structure(m).into() };
    if factor == 0 || fh == 0 || fw == 0 || gh * factor != fh || gw * factor != fw {
        return Err(structure(format!(
            "inconsistent shapes: source {fh}x{fw}, observation {gh}x{gw}, factor {factor}"
        )));
    }
    if task == Task::Deblur && factor != 1 {
        return Err(structure("deblur dataset with factor != 1".into()));
    }
    let per_sample = gh * gw + if supervised { fh * fw } else { 0 };
    let expected = (psf_size * psf_size + count * per_sample) * 8;
    if payload.len() != expected {
        return Err(structure(format!(
            "payload is {} bytes, header implies {expected} ({count} samples)",
            payload.len()
        )));
    }
    let values = f64s_from(payload);
    let (psf_vals, rest) = values.split_at(psf_size * psf_size);
    let psf =
        PsfKernel::new(psf_size, psf_vals.to_vec()).map_err(|e| structure(format!("psf: {e}")))?;
    let mut samples = Vec::with_capacity(count);
    let mut chunks = rest.chunks_exact(per_sample);
    for i in 0..count {
        let chunk = chunks.next().expect("length checked");
        let (f_part, g_part) = chunk.split_at(if supervised { fh * fw } else { 0 });
        let f = if supervised {
            Some(
                ImageGrid::new(fh, fw, f_part.to_vec())
                    .map_err(|e| structure(format!("sample {i}: {e}")))?,
            )
        } else {
            None
        };
        let g = ImageGrid::new(gh, gw, g_part.to_vec())
            .map_err(|e| structure(format!("sample {i}: {e}")))?;
        samples.push(Sample { g, f });
    }
    Ok(Dataset {
        samples,
        task,
        source_shape: (fh, fw),
        noise_variance,
        psf,
        downsample_factor: factor,
        generator_seed,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
