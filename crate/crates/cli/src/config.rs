//! File configuration and its merge with command-line flags. Every flag has
//! a key of the same name (dashes become underscores); flags win.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rgbdi_flow::estimator::VisualNoise;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub frames: Option<usize>,
    pub imu: Option<bool>,
    pub marginalize: Option<bool>,
    pub stride: Option<usize>,
    pub history: Option<usize>,
    pub seed: Option<u64>,
    pub pyramid: Option<usize>,
    pub workers: Option<usize>,
    pub visual_noise: Option<String>,
    pub euclidean_depth: Option<bool>,
    pub index: Option<usize>,
    pub length: Option<usize>,
    pub trajectory: Option<String>,
    pub scene: Option<PathBuf>,
    pub depth_noise: Option<f64>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Marks errors caused by the user's input (exit code 2).
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

macro_rules! input_bail {
    ($($arg:tt)*) => {
        return Err(anyhow::Error::new($crate::config::InputError(format!($($arg)*))))
    };
}
pub(crate) use input_bail;

/// `sigma` in cm/s, or `estimated`.
pub fn parse_visual_noise(s: &str) -> Result<VisualNoise> {
    if s.eq_ignore_ascii_case("estimated") {
        return Ok(VisualNoise::Estimated);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(VisualNoise::Fixed(v)),
        _ => bail!("visual noise must be a positive number or `estimated`, got `{s}`"),
    }
}

/// Fully resolved settings of a `run` or `flowfield` invocation; written
/// next to the results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub frames: usize,
    pub imu: bool,
    pub marginalize: bool,
    pub stride: usize,
    pub history: usize,
    pub pyramid: usize,
    pub workers: Option<usize>,
    pub visual_noise: String,
    pub euclidean_depth: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.frames) {
            input_bail!("--frames must be between 2 and 5, got {}", self.frames);
        }
        if self.marginalize && self.frames < 3 {
            input_bail!("marginalization needs --frames 3 or more");
        }
        if self.stride == 0 {
            input_bail!("--stride must be at least 1");
        }
        if self.pyramid == 0 {
            input_bail!("--pyramid must be at least 1");
        }
        if self.workers == Some(0) {
            input_bail!("--workers must be at least 1");
        }
        if let Err(e) = parse_visual_noise(&self.visual_noise) {
            input_bail!("{e}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Random,
    Orbit,
    Static,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "orbit" => Ok(Self::Orbit),
            "static" => Ok(Self::Static),
            _ => Err(format!("unknown trajectory `{s}` (random, orbit, static)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateConfig {
    pub out: PathBuf,
    pub length: usize,
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    pub scene: Option<PathBuf>,
    pub depth_noise: f64,
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            input_bail!("--length must be at least 2 frames");
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            input_bail!("--depth-noise must be a non-negative number");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visual_noise_values() {
        assert_eq!(parse_visual_noise("2.5").unwrap(), VisualNoise::Fixed(2.5));
        assert_eq!(parse_visual_noise("Estimated").unwrap(), VisualNoise::Estimated);
        assert!(parse_visual_noise("0").is_err());
        assert!(parse_visual_noise("x").is_err());
    }

    #[test]
    fn file_rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("frames = 3\nimu = false\n").is_ok());
        assert!(toml::from_str::<FileConfig>("frame = 3\n").is_err());
    }
}
