//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown and duplicate keys are
//! rejected, as are missing required keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{DomainShift, SceneSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::jdot::JointCostConfig;
use crate::nn::{MultiLevelWeights, OptimConfig, SegNetConfig};
use crate::ot::SinkhornConfig;

/// Parsed key/value pairs with the line number each came from.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(format!("line {}: empty key", n + 1));
            }
            if entries.insert(k.to_string(), (n + 1, v.to_string())).is_some() {
                return Err(format!("line {}: duplicate key {k:?}", n + 1));
            }
        }
        Ok(Self { entries })
    }

    /// Rejects any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> std::result::Result<(), String> {
        match self.entries.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, (line, _))) => Err(format!("line {line}: unknown key {k:?}")),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn required(&self, key: &str) -> std::result::Result<&str, String> {
        self.raw(key).ok_or_else(|| format!("missing required key {key:?}"))
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<Option<T>, String> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("line {line}: cannot parse {key} = {v:?}")),
        }
    }

    pub fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> std::result::Result<T, String> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<Option<Vec<T>>, String> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| format!("line {line}: cannot parse {key} = {v:?}")))
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    fn triple(&self, key: &str, default: [f64; 3]) -> std::result::Result<[f64; 3], String> {
        match self.list::<f64>(key)? {
            None => Ok(default),
            Some(v) if v.len() == 1 => Ok([v[0]; 3]),
            Some(v) => v.try_into().map_err(|_| format!("{key} needs 1 or 3 values")),
        }
    }
}

fn read_kv(path: &Path, allowed: &[&str]) -> Result<KeyValues> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = KeyValues::parse(&text).map_err(|m| Error::data(path, m))?;
    kv.check_keys(allowed).map_err(|m| Error::Config(format!("{}: {m}", path.display())))?;
    Ok(kv)
}

fn config_err(path: &Path) -> impl Fn(String) -> Error + '_ {
    move |m| Error::Config(format!("{}: {m}", path.display()))
}

/// Scene spec file: `side`, `num_classes`, `shapes_min`, `shapes_max`, `seed`, `count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateSpec {
    pub scene: SceneSpec,
    pub count: usize,
}

const SPEC_KEYS: &[&str] = &["side", "num_classes", "shapes_min", "shapes_max", "seed", "count"];

impl GenerateSpec {
    pub fn from_kv(kv: &KeyValues) -> std::result::Result<Self, String> {
        kv.check_keys(SPEC_KEYS)?;
        let d = SceneSpec::default();
        let scene = SceneSpec {
            side: kv.or("side", d.side)?,
            num_classes: kv.or("num_classes", d.num_classes)?,
            shapes_min: kv.or("shapes_min", d.shapes_min)?,
            shapes_max: kv.or("shapes_max", d.shapes_max)?,
            seed: kv.or("seed", d.seed)?,
        };
        scene.validate().map_err(|e| e.to_string())?;
        let count: usize = kv.required("count")?.parse().map_err(|_| "count must be an integer".to_string())?;
        if count == 0 {
            return Err("count must be positive".into());
        }
        Ok(Self { scene, count })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&read_kv(path, SPEC_KEYS)?).map_err(config_err(path))
    }
}

const SHIFT_KEYS: &[&str] = &["gain", "bias", "noise_sigma", "texture_freq", "seed"];

/// Shift file: `gain`, `bias` (1 or 3 comma-separated values), `noise_sigma`, `texture_freq`, `seed`.
pub fn shift_from_kv(kv: &KeyValues) -> std::result::Result<ShiftSpec, String> {
    kv.check_keys(SHIFT_KEYS)?;
    let shift = DomainShift {
        channel_gain: kv.triple("gain", [1.0; 3])?,
        channel_bias: kv.triple("bias", [0.0; 3])?,
        noise_sigma: kv.or("noise_sigma", 0.0)?,
        texture_freq: kv.or("texture_freq", 0.0)?,
    };
    shift.validate().map_err(|e| e.to_string())?;
    Ok(ShiftSpec {
        shift,
        seed: kv.or("seed", 0)?,
    })
}

pub fn load_shift(path: &Path) -> Result<ShiftSpec> {
    shift_from_kv(&read_kv(path, SHIFT_KEYS)?).map_err(config_err(path))
}

/// How the per-step coupling is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CouplingCost {
    /// Squared Euclidean distance between flattened input images.
    #[default]
    Image,
    /// The joint output/label cost at each level.
    Joint,
}

impl CouplingCost {
    /// Image distances are in the hundreds for 32×32 RGB, joint costs near one.
    pub fn default_lambda(self) -> f64 {
        match self {
            Self::Image => 0.1,
            Self::Joint => 10.0,
        }
    }
}

impl std::str::FromStr for CouplingCost {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "image" => Ok(Self::Image),
            "joint" => Ok(Self::Joint),
            _ => Err(format!("unknown coupling_cost {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source_data: PathBuf,
    pub target_data: PathBuf,
    /// Labeled target-domain set for periodic evaluation.
    pub eval_data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Per-step loss log (`step,lr,total,seg_0,...,ot_0,...`).
    pub loss_log: Option<PathBuf>,
    pub optim: OptimConfig,
    pub sinkhorn: SinkhornConfig,
    pub joint: JointCostConfig,
    pub weights: MultiLevelWeights,
    pub coupling_cost: CouplingCost,
    /// `false` skips every OT computation regardless of the weights.
    pub ot_enabled: bool,
    pub batch_source: usize,
    pub batch_target: usize,
    pub init_seed: u64,
    pub sample_seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub model_widths: [usize; 3],
    /// Batch used by `export-coupling` (defaults to the first `batch_*` indices).
    pub export_source: Option<Vec<usize>>,
    pub export_target: Option<Vec<usize>>,
}

const RUN_KEYS: &[&str] = &[
    "source_data",
    "target_data",
    "eval_data",
    "checkpoint",
    "metrics",
    "loss_log",
    "max_iterations",
    "base_lr",
    "momentum",
    "weight_decay",
    "poly_power",
    "sinkhorn_lambda",
    "sinkhorn_tolerance",
    "sinkhorn_max_iterations",
    "alpha",
    "beta",
    "seg_weight_low",
    "seg_weight_high",
    "ot_weight_low",
    "ot_weight_high",
    "coupling_cost",
    "ot_enabled",
    "batch_source",
    "batch_target",
    "init_seed",
    "sample_seed",
    "eval_interval",
    "model_widths",
    "export_source",
    "export_target",
];

impl RunConfig {
    /// Relative paths are resolved against `base`.
    pub fn from_kv(kv: &KeyValues, base: &Path) -> std::result::Result<Self, String> {
        kv.check_keys(RUN_KEYS)?;
        let path = |k: &str| -> std::result::Result<PathBuf, String> { Ok(base.join(kv.required(k)?)) };
        let opt_path = |k: &str| kv.raw(k).map(|v| base.join(v));
        let od = OptimConfig::default();
        let optim = OptimConfig {
            base_lr: kv.or("base_lr", od.base_lr)?,
            momentum: kv.or("momentum", od.momentum)?,
            weight_decay: kv.or("weight_decay", od.weight_decay)?,
            poly_power: kv.or("poly_power", od.poly_power)?,
            max_iterations: kv.required("max_iterations")?.parse().map_err(|_| "max_iterations must be an integer".to_string())?,
        };
        optim.validate().map_err(|e| e.to_string())?;
        let sd = SinkhornConfig::default();
        let coupling_cost = kv.or("coupling_cost", CouplingCost::Image)?;
        let sinkhorn = SinkhornConfig {
            lambda: kv.or("sinkhorn_lambda", coupling_cost.default_lambda())?,
            tolerance: kv.or("sinkhorn_tolerance", sd.tolerance)?,
            max_iterations: kv.or("sinkhorn_max_iterations", sd.max_iterations)?,
        };
        sinkhorn.validate().map_err(|e| e.to_string())?;
        let jd = JointCostConfig::default();
        let joint = JointCostConfig {
            alpha: kv.or("alpha", jd.alpha)?,
            beta: kv.or("beta", jd.beta)?,
        };
        let wd = MultiLevelWeights::default();
        let weights = MultiLevelWeights::new(
            vec![kv.or("seg_weight_low", wd.seg_weights[0])?, kv.or("seg_weight_high", wd.seg_weights[1])?],
            vec![kv.or("ot_weight_low", wd.ot_weights[0])?, kv.or("ot_weight_high", wd.ot_weights[1])?],
        )
        .map_err(|e| e.to_string())?;
        let model_widths = match kv.list::<usize>("model_widths")? {
            None => SegNetConfig::default().widths,
            Some(v) => v.try_into().map_err(|_| "model_widths needs 3 values".to_string())?,
        };
        let cfg = Self {
            source_data: path("source_data")?,
            target_data: path("target_data")?,
            eval_data: opt_path("eval_data"),
            checkpoint: path("checkpoint")?,
            metrics: path("metrics")?,
            loss_log: opt_path("loss_log"),
            optim,
            sinkhorn,
            joint,
            weights,
            coupling_cost,
            ot_enabled: kv.or("ot_enabled", true)?,
            batch_source: kv.or("batch_source", 8)?,
            batch_target: kv.or("batch_target", 8)?,
            init_seed: kv.or("init_seed", 0)?,
            sample_seed: kv.or("sample_seed", 1)?,
            eval_interval: kv.or("eval_interval", 0)?,
            model_widths,
            export_source: kv.list("export_source")?,
            export_target: kv.list("export_target")?,
        };
        if cfg.batch_source == 0 || cfg.batch_target == 0 {
            return Err("batch sizes must be positive".into());
        }
        if cfg.model_widths.contains(&0) {
            return Err("model_widths must be positive".into());
        }
        if !(cfg.joint.alpha >= 0.0 && cfg.joint.beta >= 0.0 && cfg.joint.alpha.is_finite() && cfg.joint.beta.is_finite()) {
            return Err("alpha and beta must be finite and non-negative".into());
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, base: &Path) -> std::result::Result<Self, String> {
        Self::from_kv(&KeyValues::parse(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = read_kv(path, RUN_KEYS)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&kv, base).map_err(config_err(path))
    }

    /// True when some level's OT term is computed.
    pub fn ot_active(&self) -> bool {
        self.ot_enabled && self.weights.ot_active()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
        # comment
        source_data = src
        target_data = tgt
        checkpoint = out/model.bin   # trailing comment
        metrics = out/metrics.csv
        max_iterations = 10
    ";

    #[test]
    fn defaults_fill_optional_keys() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.source_data, Path::new("/base/src"));
        assert_eq!(cfg.checkpoint, Path::new("/base/out/model.bin"));
        assert_eq!(cfg.optim.max_iterations, 10);
        assert_eq!(cfg.optim.base_lr, 2.5e-4);
        assert_eq!(cfg.batch_source, 8);
        assert_eq!(cfg.coupling_cost, CouplingCost::Image);
        assert_eq!(cfg.weights, MultiLevelWeights::default());
        assert!(cfg.ot_active());
    }

    #[test]
    fn rejects_unknown_missing_and_duplicate() {
        let err = RunConfig::parse(&format!("{MINIMAL}\nlearning_rate = 1"), Path::new(".")).unwrap_err();
        assert!(err.contains("unknown key"), "{err}");
        let err = RunConfig::parse("source_data = a", Path::new(".")).unwrap_err();
        assert!(err.contains("missing required key"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}\nalpha = 1\nalpha = 2"), Path::new(".")).unwrap_err();
        assert!(err.contains("duplicate"), "{err}");
        assert!(RunConfig::parse(&format!("{MINIMAL}\ncoupling_cost = feature"), Path::new(".")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}\nmodel_widths = 1,2"), Path::new(".")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}\nbatch_target = 0"), Path::new(".")).is_err());
    }

    #[test]
    fn overrides_are_applied() {
        let text = format!(
            "{MINIMAL}\ncoupling_cost = joint\not_weight_low = 0\not_weight_high = 0\nmodel_widths = 4, 8, 8\nexport_source = 1,2"
        );
        let cfg = RunConfig::parse(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.coupling_cost, CouplingCost::Joint);
        assert!(!cfg.ot_active());
        assert_eq!(cfg.model_widths, [4, 8, 8]);
        assert_eq!(cfg.export_source, Some(vec![1, 2]));
    }

    #[test]
    fn spec_and_shift_files() {
        let kv = KeyValues::parse("side = 16\ncount = 3\nseed = 4").unwrap();
        let g = GenerateSpec::from_kv(&kv).unwrap();
        assert_eq!((g.scene.side, g.count, g.scene.seed), (16, 3, 4));
        assert!(GenerateSpec::from_kv(&KeyValues::parse("side = 16").unwrap()).is_err());

        let kv = KeyValues::parse("gain = 0.5, 1, 1.5\nbias = 0.1\nnoise_sigma = 0.02\nseed = 9").unwrap();
        let s = shift_from_kv(&kv).unwrap();
        assert_eq!(s.shift.channel_gain, [0.5, 1.0, 1.5]);
        assert_eq!(s.shift.channel_bias, [0.1; 3]);
        assert_eq!(s.seed, 9);
        assert!(shift_from_kv(&KeyValues::parse("noise_sigma = -1").unwrap()).is_err());
        assert!(shift_from_kv(&KeyValues::parse("gain = 1,2").unwrap()).is_err());
    }
}
