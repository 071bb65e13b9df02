//! Run configuration, read from a TOML file.
//!
//! Every section and key is optional; omitted keys take the defaults shown in
//! `configs/default.toml`. Unknown keys are rejected. Relative paths in
//! `[paths]` resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::analytic_bayes::{VarianceMethod, DEFAULT_CG_MAX_ITER, DEFAULT_CG_TOL};
use crate::datagen::{DatasetSpec, SceneConfig, Task};
use crate::error::{Error, Result};
use crate::forward_ops::PsfKernel;
use crate::losses::LossWeights;
use crate::neural_net::Architecture;
use crate::trainer::{OptimizerKind, TrainConfig, TrainMode};
use crate::uq_inference::DEFAULT_PASSES;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub size: [usize; 2],
    pub blob_count: [usize; 2],
    pub amplitude: [f64; 2],
    pub blob_sigma: [f64; 2],
    pub background: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let d = SceneConfig::default();
        Self {
            size: [d.size.0, d.size.1],
            blob_count: [d.blob_count_range.0, d.blob_count_range.1],
            amplitude: [d.amplitude_range.0, d.amplitude_range.1],
            blob_sigma: [d.blob_sigma_range.0, d.blob_sigma_range.1],
            background: d.background_level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Deblur,
    Superres,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    pub task: TaskName,
    pub psf_size: usize,
    pub psf_sigma: f64,
    pub downsample_factor: usize,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            task: TaskName::Deblur,
            psf_size: 9,
            psf_sigma: 2.0,
            downsample_factor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub supervised: bool,
    pub noise_variance: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 1000,
            supervised: true,
            noise_variance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub dropout_after: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            hidden_channels: a.hidden_channels,
            kernel_size: a.kernel_size,
            dropout_rate: a.dropout_rate,
            dropout_after: a.dropout_after,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Defaults to the dataset's labelling.
    pub mode: Option<ModeName>,
    pub optimizer: OptimizerName,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub divergence_factor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: None,
            optimizer: OptimizerName::Adam,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            split_fraction: t.split_fraction,
            divergence_factor: t.divergence_factor,
        }
    }
}

/// Variances may be written as the string `"inf"` to switch a term off.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub v_f: f64,
    pub v_eps: f64,
    pub v_prior: f64,
    pub gamma_w: f64,
    pub beta: f64,
    /// Constant prior mean image value.
    pub f_bar: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            v_f: w.v_f,
            v_eps: w.v_eps,
            v_prior: w.v_prior,
            gamma_w: w.gamma_w,
            beta: w.beta,
            f_bar: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceName {
    Dense,
    Hutchinson,
    None,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticSection {
    pub v_eps: f64,
    pub v_f: f64,
    pub f_bar: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub variance: VarianceName,
    pub probes: usize,
    pub seed: u64,
}

impl Default for AnalyticSection {
    fn default() -> Self {
        Self {
            v_eps: 1e-4,
            v_f: 0.1,
            f_bar: 0.0,
            cg_tol: DEFAULT_CG_TOL,
            cg_max_iter: DEFAULT_CG_MAX_ITER,
            variance: VarianceName::Hutchinson,
            probes: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub passes: usize,
    pub seed: u64,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            passes: DEFAULT_PASSES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub peak: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { peak: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: "dataset.bpds".into(),
            checkpoint: "model.bpnn".into(),
            history: "history.tsv".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub operator: OperatorSection,
    pub data: DataSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub analytic: AnalyticSection,
    pub infer: InferSection,
    pub metrics: MetricsSection,
    pub paths: PathsSection,
}

fn cfg_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(cfg_err(key, format!("must be positive, got {v}")))
    }
}

fn positive_finite(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(
            key,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

fn finite(key: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(key, format!("must be finite, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(cfg_err(key, "must be at least 1"))
    }
}

/// Pulls the offending key out of a deserializer message.
fn key_from_message(msg: &str) -> Option<String> {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            return rest.find('`').map(|j| rest[..j].to_string());
        }
    }
    None
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = key_from_message(&msg).unwrap_or_else(|| match e.span() {
                Some(s) => line_key(text, s.start),
                None => "<document>".into(),
            });
            cfg_err(&key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and resolves relative `[paths]` entries against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.dataset,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.history,
            &mut cfg.paths.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        nonzero("scene.size", s.size[0].min(s.size[1]))?;
        if s.blob_count[0] > s.blob_count[1] {
            return Err(cfg_err("scene.blob_count", "min exceeds max"));
        }
        if !(s.amplitude[0] >= 0.0
            && s.amplitude[0] <= s.amplitude[1]
            && s.amplitude[1].is_finite())
        {
            return Err(cfg_err(
                "scene.amplitude",
                "must be finite, non-negative and ordered",
            ));
        }
        if !(s.blob_sigma[0] > 0.0
            && s.blob_sigma[0] <= s.blob_sigma[1]
            && s.blob_sigma[1].is_finite())
        {
            return Err(cfg_err("scene.blob_sigma", "must be positive and ordered"));
        }
        finite("scene.background", s.background)?;

        let o = &self.operator;
        if o.psf_size.is_multiple_of(2) {
            return Err(cfg_err(
                "operator.psf_size",
                format!("must be odd, got {}", o.psf_size),
            ));
        }
        positive_finite("operator.psf_sigma", o.psf_sigma)?;
        nonzero("operator.downsample_factor", o.downsample_factor)?;
        match o.task {
            TaskName::Deblur if o.downsample_factor != 1 => {
                return Err(cfg_err(
                    "operator.downsample_factor",
                    "must be 1 for deblurring",
                ));
            }
            TaskName::Superres => {
                if o.downsample_factor < 2 {
                    return Err(cfg_err(
                        "operator.downsample_factor",
                        "must be at least 2 for super-resolution",
                    ));
                }
                if !s.size[0].is_multiple_of(o.downsample_factor)
                    || !s.size[1].is_multiple_of(o.downsample_factor)
                {
                    return Err(cfg_err(
                        "operator.downsample_factor",
                        "must divide scene.size",
                    ));
                }
            }
            _ => {}
        }
        let obs = self.observation_shape();
        if o.psf_size > obs.0 || o.psf_size > obs.1 {
            return Err(cfg_err("operator.psf_size", "exceeds the observation grid"));
        }

        nonzero("data.count", self.data.count)?;
        let nv = self.data.noise_variance;
        if !(nv >= 0.0 && nv.is_finite()) {
            return Err(cfg_err(
                "data.noise_variance",
                format!("must be non-negative, got {nv}"),
            ));
        }

        let n = &self.network;
        if n.kernel_size.is_multiple_of(2) {
            return Err(cfg_err("network.kernel_size", "must be odd"));
        }
        if n.hidden_channels.contains(&0) {
            return Err(cfg_err(
                "network.hidden_channels",
                "channel counts must be positive",
            ));
        }
        if !(0.0..1.0).contains(&n.dropout_rate) {
            return Err(cfg_err(
                "network.dropout_rate",
                format!("must lie in [0, 1), got {}", n.dropout_rate),
            ));
        }
        if n.dropout_after
            .iter()
            .any(|&l| l == 0 || l > n.hidden_channels.len())
        {
            return Err(cfg_err(
                "network.dropout_after",
                "entries must name hidden layers 1..=len",
            ));
        }

        let t = &self.train;
        positive_finite("train.learning_rate", t.learning_rate)?;
        nonzero("train.batch_size", t.batch_size)?;
        if !(t.split_fraction > 0.0 && t.split_fraction < 1.0) {
            return Err(cfg_err("train.split_fraction", "must lie in (0, 1)"));
        }
        if !(t.divergence_factor > 1.0) {
            return Err(cfg_err("train.divergence_factor", "must exceed 1"));
        }

        let l = &self.loss;
        positive("loss.v_f", l.v_f)?;
        positive("loss.v_eps", l.v_eps)?;
        positive("loss.v_prior", l.v_prior)?;
        if !(l.gamma_w >= 0.0 && l.gamma_w.is_finite()) {
            return Err(cfg_err("loss.gamma_w", "must be non-negative"));
        }
        if l.beta != 1.0 && l.beta != 2.0 {
            return Err(cfg_err(
                "loss.beta",
                format!("must be 1 or 2, got {}", l.beta),
            ));
        }
        finite("loss.f_bar", l.f_bar)?;

        let a = &self.analytic;
        positive_finite("analytic.v_eps", a.v_eps)?;
        positive_finite("analytic.v_f", a.v_f)?;
        finite("analytic.f_bar", a.f_bar)?;
        positive_finite("analytic.cg_tol", a.cg_tol)?;
        nonzero("analytic.cg_max_iter", a.cg_max_iter)?;
        if a.variance == VarianceName::Hutchinson {
            nonzero("analytic.probes", a.probes)?;
        }

        if self.infer.passes < 2 {
            return Err(cfg_err(
                "infer.passes",
                "MC dropout needs at least 2 passes",
            ));
        }
        positive_finite("metrics.peak", self.metrics.peak)?;
        Ok(())
    }

    pub fn task(&self) -> Task {
        match self.operator.task {
            TaskName::Deblur => Task::Deblur,
            TaskName::Superres => Task::Superres,
        }
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.scene.size[0], self.scene.size[1])
    }

    pub fn observation_shape(&self) -> (usize, usize) {
        let k = self.operator.downsample_factor.max(1);
        (self.scene.size[0] / k, self.scene.size[1] / k)
    }

    pub fn scene_config(&self) -> SceneConfig {
        let s = &self.scene;
        SceneConfig {
            size: (s.size[0], s.size[1]),
            blob_count_range: (s.blob_count[0], s.blob_count[1]),
            amplitude_range: (s.amplitude[0], s.amplitude[1]),
            blob_sigma_range: (s.blob_sigma[0], s.blob_sigma[1]),
            background_level: s.background,
        }
    }

    pub fn psf(&self) -> Result<PsfKernel> {
        PsfKernel::gaussian(self.operator.psf_size, self.operator.psf_sigma)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            scene: self.scene_config(),
            task: self.task(),
            psf: self.psf()?,
            downsample_factor: self.operator.downsample_factor,
            noise_variance: self.data.noise_variance,
            count: self.data.count,
            supervised: self.data.supervised,
            seed: self.data.seed,
        })
    }

    pub fn architecture(&self) -> Architecture {
        let n = &self.network;
        Architecture {
            hidden_channels: n.hidden_channels.clone(),
            kernel_size: n.kernel_size,
            dropout_rate: n.dropout_rate,
            dropout_after: n.dropout_after.clone(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let l = &self.loss;
        LossWeights {
            v_f: l.v_f,
            v_eps: l.v_eps,
            v_prior: l.v_prior,
            gamma_w: l.gamma_w,
            beta: l.beta,
        }
    }

    /// `supervised` fills in the mode when `train.mode` is absent.
    pub fn train_config(&self, supervised: bool) -> TrainConfig {
        let t = &self.train;
        let mode = match t.mode {
            Some(ModeName::Supervised) => TrainMode::Supervised,
            Some(ModeName::Unsupervised) => TrainMode::Unsupervised,
            None if supervised => TrainMode::Supervised,
            None => TrainMode::Unsupervised,
        };
        TrainConfig {
            mode,
            optimizer: match t.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::Adam,
            },
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            loss_weights: self.loss_weights(),
            seed: t.seed,
            split_fraction: t.split_fraction,
            divergence_factor: t.divergence_factor,
        }
    }

    /// `None` when `analytic.variance = "none"`.
    pub fn variance_method(&self) -> Option<VarianceMethod> {
        match self.analytic.variance {
            VarianceName::Dense => Some(VarianceMethod::Dense),
            VarianceName::Hutchinson => Some(VarianceMethod::Hutchinson {
                probes: self.analytic.probes,
                seed: self.analytic.seed,
            }),
            VarianceName::None => None,
        }
    }
}

/// `section.key` of the assignment on the line containing byte `offset`.
fn line_key(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut consumed = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed
                .trim_matches(|c| c == '[' || c == ']')
                .trim()
                .to_string();
        }
        if consumed + line.len() >= offset {
            let key = trimmed.split('=').next().unwrap_or("").trim();
            return match (
                section.is_empty(),
                key.is_empty() || trimmed.starts_with('['),
            ) {
                (_, true) if !section.is_empty() => section,
                (true, _) => key.to_string(),
                _ => format!("{section}.{key}"),
            };
        }
        consumed += line.len() + 1;
    }
    "<document>".into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.scene_config(), SceneConfig::default());
        assert_eq!(c.architecture(), Architecture::default());
        assert_eq!(c.loss_weights(), LossWeights::default());
    }

    #[test]
    fn unknown_key_named() {
        match RunConfig::from_toml_str("[train]\nlearning_rat = 0.1\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "learning_rat"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml_str("[trian]\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "trian"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_value_named() {
        match RunConfig::from_toml_str("[train]\nlearning_rate = -1.0\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml_str("[train]\nepochs = \"many\"\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.epochs"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml_str("[operator]\ntask = \"superres\"\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "operator.downsample_factor"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inf_variance_accepted() {
        let c = RunConfig::from_toml_str("[loss]\nv_eps = inf\n").unwrap();
        assert!(c.loss.v_eps.is_infinite());
    }

    #[test]
    fn mode_follows_dataset_when_absent() {
        let c = RunConfig::default();
        assert_eq!(c.train_config(false).mode, TrainMode::Unsupervised);
        assert_eq!(c.train_config(true).mode, TrainMode::Supervised);
    }
}
