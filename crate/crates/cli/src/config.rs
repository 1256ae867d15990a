//! Run configuration: one TOML file with a table per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajdest::eval::EvalConfig;
use trajdest::ingest::SynthConfig;
use trajdest::models::ModelConfig;
use trajdest::partition::PartitionConfig;
use trajdest::preprocess::{PreprocessConfig, TauThreshold};
use trajdest::train::TrainConfig;

use crate::error::{invalid, CliResult};

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "TRAJDEST_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the train / validation / test split.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub ingest: IngestSection,
    pub synth: SynthConfig,
    pub preprocess: PreprocessSection,
    pub partition: PartitionSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data_dir: PathBuf::from("data"),
            ingest: IngestSection::default(),
            synth: SynthConfig::default(),
            preprocess: PreprocessSection::default(),
            partition: PartitionSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Porto,
    Crawdad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    pub format: DataFormat,
    /// Porto CSV file or CRAWDAD directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// CSV `date,hour,temperature_c,precip_mm`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weather: Option<PathBuf>,
    /// Local time offset for the metadata bins, DST ignored.
    pub utc_offset_s: i32,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            format: DataFormat::Porto,
            input: None,
            weather: None,
            utc_offset_s: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Porto,
    SanFrancisco,
    /// Synthetic city: its own padded bbox and a fixed τ of 2.65.
    Synthetic,
}

/// Preprocessing preset plus per-field overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    /// Chosen from the trip source when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_duration_s: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_duration_s: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed_limit_kmh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_threshold: Option<TauThreshold>,
}

impl PreprocessSection {
    /// `synth_bbox` is used by the synthetic preset.
    pub fn resolve(
        &self,
        preset: Preset,
        synth_bbox: Option<[f64; 4]>,
    ) -> CliResult<PreprocessConfig> {
        let mut cfg = match preset {
            Preset::Porto => PreprocessConfig::porto(),
            Preset::SanFrancisco => PreprocessConfig::san_francisco(),
            Preset::Synthetic => PreprocessConfig {
                bbox: synth_bbox.ok_or_else(|| {
                    invalid("synthetic preset needs the synth bbox; run `trajdest synth` first")
                })?,
                tau_threshold: TauThreshold::Fixed(2.65),
                ..PreprocessConfig::porto()
            },
        };
        if let Some(v) = self.min_duration_s {
            cfg.min_duration_s = v;
        }
        if let Some(v) = self.max_duration_s {
            cfg.max_duration_s = v;
        }
        if let Some(v) = self.speed_limit_kmh {
            cfg.speed_limit_kmh = v;
        }
        if let Some(v) = self.bbox {
            cfg.bbox = v;
        }
        if let Some(v) = self.tau_threshold {
            cfg.tau_threshold = v;
        }
        cfg.validate()
            .map_err(|e| invalid(format!("[preprocess] {e}")))?;
        Ok(cfg)
    }
}

/// Either a leaf capacity or a target region count; the capacity wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points_per_region_max: Option<usize>,
    pub target_regions: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            points_per_region_max: None,
            target_regions: 64,
        }
    }
}

impl PartitionSection {
    pub fn resolve(&self, n_points: usize) -> CliResult<PartitionConfig> {
        match self.points_per_region_max {
            Some(n) => PartitionConfig::new(n).map_err(|e| invalid(format!("[partition] {e}"))),
            None if self.target_regions == 0 => {
                Err(invalid("[partition] target_regions must be at least 1"))
            }
            None => Ok(PartitionConfig::for_target_regions(
                n_points,
                self.target_regions,
            )),
        }
    }
}

impl RunConfig {
    /// Reads `path` if given, else the defaults; then applies the data
    /// directory override.
    pub fn load(path: Option<&Path>, data_dir_override: Option<PathBuf>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| invalid(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(dir) = data_dir_override {
            cfg.data_dir = dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train
            .validate()
            .map_err(|e| invalid(format!("[train] {e}")))?;
        let mut model = self.model.clone();
        if model.n_regions == 0 {
            model.n_regions = 1;
        }
        model
            .validate()
            .map_err(|e| invalid(format!("[model] {e}")))?;
        if self.synth.n_trips == 0 {
            return Err(invalid("[synth] n_trips must be at least 1"));
        }
        if !(self.eval.histogram_bin_m > 0.0) {
            return Err(invalid("[eval] histogram_bin_m must be positive"));
        }
        if self
            .eval
            .completion_levels
            .iter()
            .any(|&p| p == 0 || p >= 100)
        {
            return Err(invalid("[eval] completion levels must be in 1..=99"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[preprocess]\nbox = [0, 1, 0, 1]").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig =
            toml::from_str("[train]\nepochs = 3\n[preprocess]\ntau_threshold = \"p90\"").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        let pre = cfg.preprocess.resolve(Preset::Porto, None).unwrap();
        assert_eq!(pre.tau_threshold, TauThreshold::Percentile(90.0));
    }

    #[test]
    fn synthetic_preset_needs_bbox() {
        let s = PreprocessSection::default();
        assert!(s.resolve(Preset::Synthetic, None).is_err());
        let cfg = s
            .resolve(Preset::Synthetic, Some([41.0, 41.1, -8.7, -8.6]))
            .unwrap();
        assert_eq!(cfg.tau_threshold, TauThreshold::Fixed(2.65));
    }
}
