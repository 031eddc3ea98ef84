use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvdet::anchor::AnchorConfig;
use mvdet::center::CenterConfig;
use mvdet::losses::LossWeights;
use mvdet::metrics::LetConfig;
use mvdet::neck::Activation;
use mvdet::voxel::FrameSampling;
use mvdet::GridSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Anchor,
    #[default]
    Center,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    #[default]
    Mono,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Infer,
    Train,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeckSection {
    /// Weight file, relative to the config file's directory.
    pub weights: Option<PathBuf>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the fixed head weights.
    pub seed: u64,
    pub head: HeadKind,
    pub temporal: TemporalMode,
    pub sampling: SamplingMode,
    pub sampling_seed: u64,
    /// Replace neck and heads by the ideal head outputs built from ground truth.
    pub oracle_maps: bool,
    pub grid: GridSpec,
    pub anchor: AnchorConfig,
    pub center: CenterConfig,
    #[serde(rename = "let")]
    pub let_metric: LetConfig,
    pub loss: LossWeights,
    pub neck: NeckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            head: HeadKind::default(),
            temporal: TemporalMode::default(),
            sampling: SamplingMode::default(),
            sampling_seed: 0,
            oracle_maps: false,
            grid: GridSpec::default(),
            anchor: AnchorConfig::default(),
            center: CenterConfig::default(),
            let_metric: LetConfig::default(),
            loss: LossWeights::default(),
            neck: NeckSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; a relative weight path is resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        if let Some(w) = &cfg.neck.weights {
            if w.is_relative() {
                cfg.neck.weights = Some(base_dir.join(w));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.anchor.validate()?;
        self.let_metric.validate()?;
        self.loss.validate()?;
        if self.center.max_peaks == 0 || self.center.circle_radius.iter().any(|r| !(*r > 0.0)) {
            bail!("center: max_peaks must be positive and circle radii positive");
        }
        if !(self.center.min_overlap > 0.0 && self.center.min_overlap < 1.0) {
            bail!("center: min_overlap must lie in (0, 1)");
        }
        if let Some(w) = &self.neck.weights {
            if !w.is_file() {
                bail!("neck weights `{}` do not exist", w.display());
            }
        }
        Ok(())
    }

    pub fn frame_sampling(&self, frame: usize) -> FrameSampling {
        match self.sampling {
            SamplingMode::Infer => FrameSampling::Infer,
            SamplingMode::Train => FrameSampling::Train {
                seed: self.sampling_seed.wrapping_add(frame as u64),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
