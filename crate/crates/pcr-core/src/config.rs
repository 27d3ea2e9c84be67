//! Flat key-value run configuration shared by the CLI commands.
//!
//! One `key = value` pair per line, `#` comments. Unknown keys are rejected
//! and every path is validated before any work starts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::heatmap::HeatmapCodec;
use crate::model::PcrConfig;

/// Everything a run needs: model structure, training and threshold knobs,
/// optional data paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PcrConfig,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub sigma: f64,
    pub nms_threshold: f64,
    pub hn_score_threshold: f64,
    pub pseudo_threshold: f64,
    /// Per-joint OKS falloff; defaults to the COCO table when the joint
    /// count is 17, otherwise to 1.0 per joint.
    pub kappas: Vec<f64>,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = PcrConfig::default_full();
        let kappas = EvalConfig::coco17().kappas;
        RunConfig {
            model,
            seed: 0,
            lr: 1.0,
            steps: 100,
            sigma: HeatmapCodec::DEFAULT_SIGMA,
            nms_threshold: 0.9,
            hn_score_threshold: 0.5,
            pseudo_threshold: 0.9,
            kappas,
            annotations: None,
            images: None,
            detections: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub const KNOWN_KEYS: &'static [&'static str] = &[
        "k",
        "l",
        "channels",
        "joints",
        "input_h",
        "input_w",
        "image_channels",
        "encoder_channels",
        "aux",
        "seed",
        "lr",
        "steps",
        "sigma",
        "nms_threshold",
        "hn_score_threshold",
        "pseudo_threshold",
        "kappas",
        "annotations",
        "images",
        "detections",
        "out",
    ];

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut kappas_set = false;
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim();
            if !Self::KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if !seen.insert(key.clone()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            match key.as_str() {
                "k" => cfg.model.cams_per_decoder = value.parse().map_err(|_| bad("integer"))?,
                "l" => cfg.model.levels = value.parse().map_err(|_| bad("integer"))?,
                "channels" => {
                    cfg.model.channels = parse_list(value).ok_or_else(|| bad("channel list"))?
                }
                "encoder_channels" => {
                    cfg.model.encoder_channels = parse_list(value).ok_or_else(|| bad("channel list"))?
                }
                "joints" => cfg.model.joints = value.parse().map_err(|_| bad("integer"))?,
                "input_h" => cfg.model.input_h = value.parse().map_err(|_| bad("integer"))?,
                "input_w" => cfg.model.input_w = value.parse().map_err(|_| bad("integer"))?,
                "image_channels" => {
                    cfg.model.image_channels = value.parse().map_err(|_| bad("integer"))?
                }
                "aux" => cfg.model.aux_enabled = parse_bool(value).ok_or_else(|| bad("boolean"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
                "steps" => cfg.steps = value.parse().map_err(|_| bad("integer"))?,
                "sigma" => cfg.sigma = value.parse().map_err(|_| bad("number"))?,
                "nms_threshold" => cfg.nms_threshold = value.parse().map_err(|_| bad("number"))?,
                "hn_score_threshold" => {
                    cfg.hn_score_threshold = value.parse().map_err(|_| bad("number"))?
                }
                "pseudo_threshold" => {
                    cfg.pseudo_threshold = value.parse().map_err(|_| bad("number"))?
                }
                "kappas" => {
                    cfg.kappas = parse_float_list(value).ok_or_else(|| bad("number list"))?;
                    kappas_set = true;
                }
                "annotations" => cfg.annotations = Some(PathBuf::from(value)),
                "images" => cfg.images = Some(PathBuf::from(value)),
                "detections" => cfg.detections = Some(PathBuf::from(value)),
                "out" => cfg.out = Some(PathBuf::from(value)),
                _ => unreachable!("key list checked above"),
            }
        }
        if !kappas_set {
            cfg.kappas = if cfg.model.joints == 17 {
                EvalConfig::coco17().kappas
            } else {
                vec![1.0; cfg.model.joints]
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.kappas.len() != self.model.joints {
            return Err(Error::Config(format!(
                "{} kappas for {} joints",
                self.kappas.len(),
                self.model.joints
            )));
        }
        if self.kappas.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::Config("kappas must be > 0".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be > 0".into()));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::Config("nms_threshold must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.hn_score_threshold) {
            return Err(Error::Config("hn_score_threshold must be in [0, 1]".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a finite non-negative number".into()));
        }
        Ok(())
    }

    /// Checks that every path the command needs exists before work starts.
    pub fn require_paths(&self, need: &[(&str, &Option<PathBuf>)]) -> Result<()> {
        for (name, path) in need {
            match path {
                None => return Err(Error::Config(format!("missing required path '{name}'"))),
                Some(p) if !p.exists() => {
                    return Err(Error::Data(format!("{name} path {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            kappas: self.kappas.clone(),
            ..EvalConfig::uniform(self.model.joints)
        }
    }

    pub fn codec(&self) -> Result<HeatmapCodec> {
        HeatmapCodec::new(
            self.model.joints,
            self.model.heatmap_h(),
            self.model.heatmap_w(),
            PcrConfig::HEATMAP_STRIDE as f64,
            self.sigma,
        )
    }
}

fn parse_list(value: &str) -> Option<Vec<usize>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return None;
    }
    items.iter().map(|s| s.parse().ok()).collect()
}

fn parse_float_list(value: &str) -> Option<Vec<f64>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return None;
    }
    items.iter().map(|s| s.parse().ok()).collect()
}

fn parse_bool(value: &str) -> Option<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}
