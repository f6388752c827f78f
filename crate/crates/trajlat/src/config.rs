//! One JSON document configures a whole run. Unknown keys are rejected
//! everywhere, the canonical hash is stable under key reordering, and
//! `--set a.b.c=value` style overrides edit the document before parsing.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{generate, GeneratorKind, GeneratorSpec, Trajectory};
use crate::error::TrajError;
use crate::infer::EvalConfig;
use crate::latent::Family;
use crate::model::{DecoderConfig, EncoderConfig, TrajModel};
use crate::train::TrainConfig;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub generator: GeneratorSpec,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sources: Vec<SourceConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub family: Family,
    /// Gumbel temperature (box family only, but always recorded).
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale profile: a small model over a 2000-trajectory mix of
    /// lissajous walkers and bouncing branchers, five joints each.
    pub fn desk() -> RunConfig {
        let gen = |kind| GeneratorSpec {
            kind,
            joints: 5,
            duration: 8.0,
            fps: 25.0,
            noise_std: 0.1,
            flip_prob: 0.5,
        };
        let mut train = TrainConfig::default();
        train.batch = 4;
        train.window_frames = 30;
        train.steps = 20_000;
        train.checkpoint_every = 2_000;
        RunConfig {
            seed: 7,
            out_dir: "runs/desk".into(),
            data: DataConfig {
                sources: vec![
                    SourceConfig { generator: gen(GeneratorKind::LissajousWalker), count: 1000 },
                    SourceConfig { generator: gen(GeneratorKind::BounceBranch), count: 1000 },
                ],
            },
            model: ModelConfig {
                encoder: EncoderConfig {
                    layers: 2,
                    heads: 2,
                    hidden: 64,
                    latent: 16,
                    fourier_bands: 16,
                    ffn: 128,
                    max_points: 64,
                },
                decoder: DecoderConfig { blocks: 2, hidden: 128 },
                family: Family::Box,
                beta: 0.01,
            },
            train,
            eval: EvalConfig::default(),
        }
    }

    /// Full-scale profile; same shape, bigger everything.
    pub fn full() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.out_dir = "runs/full".into();
        for s in &mut cfg.data.sources {
            s.count = 10_000;
            s.generator.joints = 13;
        }
        cfg.model.encoder = EncoderConfig {
            layers: 4,
            heads: 4,
            hidden: 256,
            latent: 32,
            fourier_bands: 16,
            ffn: 512,
            max_points: 128,
        };
        cfg.model.decoder = DecoderConfig { blocks: 3, hidden: 256 };
        cfg.train.batch = 64;
        cfg.train.steps = 200_000;
        cfg.train.checkpoint_every = 10_000;
        cfg
    }

    pub fn from_value(v: Value) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| TrajError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_value(load_value(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.sources.is_empty() {
            return Err(TrajError::Config("data: at least one source required".into()));
        }
        let joints = self.data.sources[0].generator.joints;
        for s in &self.data.sources {
            s.generator.validate()?;
            if s.count == 0 {
                return Err(TrajError::Config("data: source count must be positive".into()));
            }
            if s.generator.joints != joints {
                return Err(TrajError::Config(format!(
                    "data: sources disagree on joints ({} vs {joints})",
                    s.generator.joints
                )));
            }
        }
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        if !(self.model.beta > 0.0) {
            return Err(TrajError::Config("model: beta must be positive".into()));
        }
        self.train.validate(self.model.family)?;
        self.eval.validate()
    }

    /// Point dimensionality (2·joints) shared by all sources.
    pub fn point_dim(&self) -> usize {
        2 * self.data.sources[0].generator.joints
    }

    pub fn build_model(&self, rng: &mut impl Rng) -> Result<TrajModel> {
        TrajModel::new(
            self.model.encoder,
            self.model.decoder,
            self.point_dim(),
            self.model.family,
            self.model.beta,
            rng,
        )
    }

    /// All sources generated back to back, each from its own derived seed, so
    /// ids stay unique even when sources share a generator kind.
    pub fn generate_all(&self) -> Result<Vec<Trajectory>> {
        let mut out = Vec::new();
        for (i, s) in self.data.sources.iter().enumerate() {
            out.extend(generate(&s.generator, s.count, self.seed.wrapping_add(i as u64))?);
        }
        Ok(out)
    }

    pub fn to_value(&self) -> Result<Value> {
        serde_json::to_value(self).map_err(|e| TrajError::Config(format!("config: {e}")))
    }

    /// sha256 of the canonical serialization: objects with sorted keys, so
    /// the hash is invariant to key order in the source document.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(&self.to_value()?)?;
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn load_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| TrajError::Config(format!("{}: {e}", path.display())))
}

/// Apply one `key.path=value` override to a config document. Path segments
/// address object fields or array indices and must already exist; values
/// parse as JSON when possible and fall back to strings.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| TrajError::Config(format!("--set expects key=value, got '{assignment}'")))?;
    if path.is_empty() {
        return Err(TrajError::Config("--set expects a non-empty key".into()));
    }
    let segments: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let next = match cur {
            Value::Object(map) => map.get_mut(*seg).ok_or_else(|| {
                TrajError::Config(format!("unknown config key '{path}' (no field '{seg}')"))
            })?,
            Value::Array(arr) => {
                let ix: usize = seg.parse().map_err(|_| {
                    TrajError::Config(format!(
                        "unknown config key '{path}' ('{seg}' is not an array index)"
                    ))
                })?;
                let len = arr.len();
                arr.get_mut(ix).ok_or_else(|| {
                    TrajError::Config(format!(
                        "unknown config key '{path}' (index {ix} out of bounds, len {len})"
                    ))
                })?
            }
            _ => {
                return Err(TrajError::Config(format!(
                    "unknown config key '{path}' ('{seg}' indexes into a scalar)"
                )))
            }
        };
        if i + 1 == segments.len() {
            *next = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            return Ok(());
        }
        cur = next;
    }
    unreachable!("loop returns on the last segment")
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_desk_preset_is_valid() {
        let cfg = RunConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.encoder.hidden, 64);
        assert_eq!(cfg.model.encoder.latent, 16);
        assert_eq!(cfg.model.beta, 0.01);
        assert_eq!(cfg.train.batch, 4);
        assert_eq!(cfg.train.window_frames, 30);
        assert_eq!(cfg.point_dim(), 10);
        assert_eq!(cfg.data.sources.iter().map(|s| s.count).sum::<usize>(), 2000);
        RunConfig::full().validate().unwrap();
    }

    #[test]
    fn test_roundtrip_and_hash_stability() {
        let cfg = RunConfig::desk();
        let v = cfg.to_value().unwrap();
        let back = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());

        // same document with keys in different orders hashes identically
        let a = r#"{"seed": 3, "out_dir": "x", "data": {"sources": [{"count": 5,
            "generator": {"kind": "lissajous_walker", "joints": 2, "duration": 2.0,
            "fps": 25.0, "noise_std": 0.0}}]},
            "model": {"encoder": {"layers": 1, "heads": 1, "hidden": 8, "latent": 4,
            "fourier_bands": 2, "ffn": 8, "max_points": 16},
            "decoder": {"blocks": 1, "hidden": 8}, "family": "box", "beta": 0.05}}"#;
        let b = r#"{"model": {"beta": 0.05, "family": "box",
            "decoder": {"hidden": 8, "blocks": 1},
            "encoder": {"max_points": 16, "ffn": 8, "fourier_bands": 2, "latent": 4,
            "hidden": 8, "heads": 1, "layers": 1}},
            "data": {"sources": [{"generator": {"noise_std": 0.0, "fps": 25.0,
            "duration": 2.0, "joints": 2, "kind": "lissajous_walker"}, "count": 5}]},
            "out_dir": "x", "seed": 3}"#;
        let ca = RunConfig::from_value(serde_json::from_str(a).unwrap()).unwrap();
        let cb = RunConfig::from_value(serde_json::from_str(b).unwrap()).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ca.hash().unwrap(), cb.hash().unwrap());
        // defaults were filled in
        assert_eq!(ca.train.batch, 64);
        assert_eq!(ca.eval.m, 10);
        // and a changed value changes the hash
        let mut cc = ca.clone();
        cc.seed = 4;
        assert_ne!(ca.hash().unwrap(), cc.hash().unwrap());
    }

    #[test]
    fn test_unknown_keys_rejected_at_every_level() {
        let mut v = RunConfig::desk().to_value().unwrap();
        v["bogus"] = Value::from(1);
        assert!(RunConfig::from_value(v).is_err());

        let mut v = RunConfig::desk().to_value().unwrap();
        v["model"]["encoder"]["hiden"] = Value::from(8);
        let err = RunConfig::from_value(v).unwrap_err().to_string();
        assert!(err.contains("hiden"), "{err}");

        let mut v = RunConfig::desk().to_value().unwrap();
        v["data"]["sources"][0]["generator"]["jointz"] = Value::from(3);
        assert!(RunConfig::from_value(v).is_err());
    }

    #[test]
    fn test_apply_set_overrides() {
        let mut v = RunConfig::desk().to_value().unwrap();
        apply_set(&mut v, "train.batch=8").unwrap();
        apply_set(&mut v, "train.optim.lr_max=0.0005").unwrap();
        apply_set(&mut v, "model.family=gaussian").unwrap();
        apply_set(&mut v, "train.loss.mode=symmetric").unwrap();
        apply_set(&mut v, "data.sources.0.count=50").unwrap();
        apply_set(&mut v, "out_dir=elsewhere").unwrap();
        apply_set(&mut v, "train.loss.re_encoding_enabled=false").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.train.optim.lr_max, 5e-4);
        assert_eq!(cfg.model.family, Family::Gaussian);
        assert_eq!(cfg.data.sources[0].count, 50);
        assert_eq!(cfg.out_dir, "elsewhere");
        assert!(!cfg.train.loss.re_encoding_enabled);
    }

    #[test]
    fn test_apply_set_rejects_bad_keys() {
        let mut v = RunConfig::desk().to_value().unwrap();
        let err = apply_set(&mut v, "train.batc=8").unwrap_err().to_string();
        assert!(err.contains("train.batc"), "{err}");
        let err = apply_set(&mut v, "data.sources.9.count=5").unwrap_err().to_string();
        assert!(err.contains("out of bounds"), "{err}");
        assert!(apply_set(&mut v, "seed.deeper=1").is_err());
        assert!(apply_set(&mut v, "no_equals_sign").is_err());
        assert!(apply_set(&mut v, "=5").is_err());
        // wrong value type surfaces when the document is parsed
        apply_set(&mut v, "train.batch=not_a_number").unwrap();
        assert!(RunConfig::from_value(v).is_err());
    }

    #[test]
    fn test_validation_failures() {
        let mut cfg = RunConfig::desk();
        cfg.data.sources[1].generator.joints = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk();
        cfg.model.family = Family::Gaussian; // default loss mode is conditional
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk();
        cfg.data.sources.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk();
        cfg.model.beta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_generate_all_unique_ids() {
        let mut cfg = RunConfig::desk();
        for s in &mut cfg.data.sources {
            s.count = 4;
            s.generator.duration = 1.0;
        }
        // duplicate the first source: same kind twice must still give unique ids
        let dup = cfg.data.sources[0].clone();
        cfg.data.sources.push(dup);
        let trajs = cfg.generate_all().unwrap();
        assert_eq!(trajs.len(), 12);
        let mut ids: Vec<&str> = trajs.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 12);
        // deterministic
        let again = cfg.generate_all().unwrap();
        assert_eq!(trajs[0].points, again[0].points);
    }

    #[test]
    fn test_build_model_matches_config() {
        use rand::SeedableRng;
        let mut cfg = RunConfig::desk();
        cfg.model.encoder = EncoderConfig {
            layers: 1,
            heads: 1,
            hidden: 8,
            latent: 4,
            fourier_bands: 2,
            ffn: 8,
            max_points: 16,
        };
        cfg.model.decoder = DecoderConfig { blocks: 1, hidden: 8 };
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let model = cfg.build_model(&mut rng).unwrap();
        assert_eq!(model.k, 10);
        assert_eq!(model.family, Family::Box);
    }
}
