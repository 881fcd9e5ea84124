//! Run configuration: one JSON document, with dot-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{Activation, EmbeddingScheme, MixerConfig, TimeAveraging};
use crate::channel::{ChannelParams, InitPatternKind, InitPatternSpec};
use crate::diffusion::{GenerationConfig, NormalizationMode};
use crate::error::{Error, Result};
use crate::oracle::{ForwardLawConfig, GenerationCheckConfig};
use crate::schedule::{Schedule, Stepping, DEFAULT_MAX_TIME};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub max_time: u32,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { max_time: DEFAULT_MAX_TIME }
    }
}

/// Network sizes; the grid shape comes from the dataset section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub hidden_mult: usize,
    pub embed_dim: usize,
    pub embedding_scheme: EmbeddingScheme,
    pub averaging: TimeAveraging,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = MixerConfig::new(1, 1);
        Self {
            n_blocks: m.n_blocks,
            hidden_mult: m.hidden_mult,
            embed_dim: m.embed_dim,
            embedding_scheme: m.embedding_scheme,
            averaging: m.averaging,
            activation: m.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub steps: usize,
    pub eps_hybrid: f64,
    pub stepping: Stepping,
    /// Input scaling of the network; defaults to the training setting.
    pub normalization: Option<NormalizationMode>,
    /// Observation pattern of a single `generate` run.
    pub pattern: InitPatternKind,
    /// Overrides every pattern's default SNR.
    pub snr_db: Option<f64>,
    /// Test channels used per run (taken from the front of the test set).
    pub n_samples: usize,
    /// Patterns and steppings of the `eval` table.
    pub eval_patterns: Vec<InitPatternKind>,
    pub eval_steppings: Vec<Stepping>,
    pub eval_seeds: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            steps: g.steps,
            eps_hybrid: g.eps_hybrid,
            stepping: g.stepping,
            normalization: None,
            pattern: InitPatternKind::PilotCar,
            snr_db: None,
            n_samples: 256,
            eval_patterns: sweep_patterns().to_vec(),
            eval_steppings: vec![Stepping::TAU_LINEAR, Stepping::TAU_WATERFILLING],
            eval_seeds: 3,
        }
    }
}

impl GenerateSection {
    pub fn generation(&self, record_trajectory: bool) -> GenerationConfig {
        GenerationConfig { steps: self.steps, eps_hybrid: self.eps_hybrid, stepping: self.stepping, record_trajectory }
    }

    pub fn pattern_spec(&self, kind: InitPatternKind) -> InitPatternSpec {
        InitPatternSpec { snr_db: self.snr_db, ..InitPatternSpec::new(kind) }
    }
}

/// Columns of the stepping sweep.
pub fn sweep_patterns() -> [InitPatternKind; 5] {
    [
        InitPatternKind::Exp,
        InitPatternKind::Salt,
        InitPatternKind::SaltRec,
        InitPatternKind::Pilot,
        InitPatternKind::PilotCar,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub channel: ChannelParams,
    /// Existing dataset files; otherwise `<out>/train.nidf` and
    /// `<out>/test.nidf`, synthesized in memory when absent.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_antennas: 8,
            n_subcarriers: 16,
            n_train: 4096,
            n_test: 1024,
            channel: ChannelParams::default(),
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub forward: ForwardLawConfig,
    pub generation: GenerationCheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    /// `train.seed` is replaced by a value derived from `seed`.
    pub train: TrainConfig,
    pub generate: GenerateSection,
    pub dataset: DatasetSection,
    pub oracle: OracleSection,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            generate: GenerateSection::default(),
            dataset: DatasetSection::default(),
            oracle: OracleSection::default(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides. Values are parsed as JSON, falling back to a plain string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        // Round-trip through the typed form so every key exists before overriding.
        let base: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        doc = serde_json::to_value(&base)?;
        for item in overrides {
            set_path(&mut doc, item)?;
        }
        let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.mixer().validate()?;
        self.train.validate()?;
        let d = &self.dataset;
        if d.n_antennas == 0 || d.n_subcarriers == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        d.channel.validate()?;
        let g = &self.generate;
        if g.steps == 0 || g.n_samples == 0 || g.eval_seeds == 0 {
            return Err(Error::Config("generate.steps, n_samples and eval_seeds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&g.eps_hybrid) {
            return Err(Error::Config(format!("eps_hybrid {} outside [0, 1]", g.eps_hybrid)));
        }
        for kind in g.eval_patterns.iter().copied().chain([g.pattern]) {
            g.pattern_spec(kind).validate(d.n_antennas, d.n_subcarriers)?;
        }
        for p in [&d.train_path, &d.test_path].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("dataset file {} not found", p.display()),
                )));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.schedule.max_time)
    }

    pub fn mixer(&self) -> MixerConfig {
        let m = &self.model;
        MixerConfig {
            n_antennas: self.dataset.n_antennas,
            n_subcarriers: self.dataset.n_subcarriers,
            n_blocks: m.n_blocks,
            hidden_mult: m.hidden_mult,
            embed_dim: m.embed_dim,
            embedding_scheme: m.embedding_scheme,
            averaging: m.averaging,
            activation: m.activation,
            max_time: self.schedule.max_time,
        }
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let keyed = RunConfig { out: PathBuf::new(), ..self.clone() };
        let text = serde_json::to_string(&keyed).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Provenance line written at the top of every CSV file.
    pub fn header(&self) -> String {
        format!("# config_sha256={} seed={}", self.hash(), self.seed)
    }
}

/// Applies one `a.b.c=value` override to a JSON document.
pub fn set_path(doc: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(c.dataset.n_train, 4096);
        assert_eq!(c.dataset.n_test, 1024);
    }

    #[test]
    fn overrides_apply_and_typos_fail() {
        let c = RunConfig::load(
            None,
            &["train.epochs=3".into(), "generate.stepping=alpha-linear".into(), "seed=7".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.generate.stepping, Stepping::ALPHA_LINEAR);
        assert_eq!(c.seed, 7);
        assert!(RunConfig::load(None, &["train.epoch=3".into()]).is_err());
        assert!(RunConfig::load(None, &["train".into()]).is_err());
        assert!(RunConfig::load(None, &["train.batch_size=0".into()]).is_err());
    }

    #[test]
    fn unknown_keys_in_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"n_blocks": 2, "width": 3}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(Error::Config(_))));
        std::fs::write(&p, r#"{"model": {"n_blocks": 2}}"#).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap().model.n_blocks, 2);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        let moved = RunConfig { out: PathBuf::from("elsewhere"), ..RunConfig::default() };
        assert_eq!(a.hash(), moved.hash());
        assert!(a.header().starts_with("# config_sha256="));
    }
}
