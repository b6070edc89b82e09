//! Flat `key = value` configuration.
//!
//! One setting per line. `#` starts a comment that runs to the end of the
//! line; blank lines are ignored. Keys are lowercase identifiers; a key given
//! twice keeps its last value. Lists are comma separated and booleans are
//! `true` or `false`. Command-line overrides use the same `key=value` form
//! and are applied after the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{Backend, ExtractorConfig};
use crate::inlier::{InlierMode, DEFAULT_CONSISTENCY_DIM};
use crate::matching::FusionNorm;
use crate::solver::Model;
use crate::training::{Fault, TrainConfig};

use super::PairSpec;

/// Raw settings with the line each came from (0 for overrides).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, (String, usize)>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key = value, found '{line}'")))?;
            let key = k.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
                return Err(Error::parse(i + 1, format!("invalid key '{key}'")));
            }
            s.values.insert(key.to_string(), (v.trim().to_string(), i + 1));
        }
        Ok(s)
    }

    /// Applies one `key=value` override.
    pub fn set_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override '{item}' is not key=value")))?;
        self.values.insert(k.trim().to_string(), (v.trim().to_string(), 0));
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    fn where_(&self, key: &str) -> String {
        match self.values.get(key) {
            Some((_, 0)) | None => format!("override {key}"),
            Some((_, l)) => format!("line {l} ({key})"),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get_raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{}: cannot parse '{v}': {e}", self.where_(key)))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.get_raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::Config(format!("{}: cannot parse '{s}': {e}", self.where_(key))))
                })
                .collect(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Sorted `key = value` lines, independent of file order and comments.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .map(|(k, (v, _))| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Every key [`RunConfig::from_settings`] understands.
pub const KNOWN_KEYS: &[&str] = &[
    "k", "iterations", "alpha", "fusion_norm", "dual", "inlier_fraction",
    "backend", "layer_widths", "k_feat", "feature_seed", "center_block",
    "inlier_mode", "consistency_dim", "inlier_seed",
    "gamma", "rho", "lambda", "huber_beta", "learning_rate", "momentum", "grad_clip", "steps", "cosine_decay",
    "seed",
    "use_gc", "use_in", "use_gs", "use_sc", "stop_gradient_svd", "fault",
    "shapes", "shape_points", "n_points", "rot_range_deg", "trans_range", "keep_fraction",
    "noise_sigma", "noise_clip", "train_pairs", "eval_pairs", "data_seed", "eval_seed",
];

/// Everything a run needs, resolved from [`Settings`] with defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub extractor: ExtractorConfig,
    pub inlier_mode: InlierMode,
    pub consistency_dim: usize,
    pub inlier_seed: u64,
    pub train: TrainConfig,
    pub pair: PairSpec,
    pub shapes: Vec<String>,
    /// Points sampled per shape before pairs are drawn.
    pub shape_points: usize,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    /// Seed of the training pairs.
    pub data_seed: u64,
    /// Seed of the held-out pairs.
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_settings(&Settings::default()).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        if let Some(bad) = s.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("{}: unknown key", s.where_(bad))));
        }
        let mut train = TrainConfig::default();
        let p = &mut train.pipeline;
        p.k = s.get("k", 8)?;
        p.iterations = s.get("iterations", 3)?;
        p.matching.alpha = s.get("alpha", 8.0)?;
        p.matching.norm = s.get("fusion_norm", FusionNorm::PerNeighborhood)?;
        p.matching.dual = s.get("dual", true)?;
        p.inlier_fraction = s.get("inlier_fraction", 0.3)?;
        train.gamma = s.get("gamma", train.gamma)?;
        train.rho = s.get("rho", train.rho)?;
        train.lambda = s.get("lambda", train.lambda)?;
        train.huber_beta = s.get("huber_beta", train.huber_beta)?;
        train.learning_rate = s.get("learning_rate", train.learning_rate)?;
        train.momentum = s.get("momentum", train.momentum)?;
        train.grad_clip = s.get("grad_clip", train.grad_clip)?;
        train.steps = s.get("steps", 2000)?;
        train.cosine_decay = s.get("cosine_decay", false)?;
        train.seed = s.get("seed", 0)?;
        train.use_global_consistency = s.get("use_gc", true)?;
        train.use_inlier_neighborhood = s.get("use_in", true)?;
        train.use_geometric_structure = s.get("use_gs", true)?;
        train.use_spatial_consistency = s.get("use_sc", true)?;
        train.stop_gradient_svd = s.get("stop_gradient_svd", false)?;
        train.fault = match s.get_raw("fault") {
            None | Some("none") => None,
            Some("confidence-head") => Some(Fault::ConfidenceHeadSign),
            Some(v) => return Err(Error::Config(format!("{}: unknown fault '{v}'", s.where_("fault")))),
        };
        train.validate()?;

        let k = train.pipeline.k;
        let extractor = ExtractorConfig {
            backend: s.get("backend", Backend::EdgeConv)?,
            layer_widths: s.get_list("layer_widths", vec![16, 16])?,
            k_feat: s.get("k_feat", k)?,
            seed: s.get("feature_seed", 0)?,
            center_block: s.get("center_block", false)?,
        };
        extractor.validate()?;

        let pair = PairSpec {
            n_points: s.get("n_points", 256)?,
            rot_range_deg: s.get("rot_range_deg", 45.0)?,
            trans_range: s.get("trans_range", 0.5)?,
            keep_fraction: s.get("keep_fraction", 1.0)?,
            noise_sigma: s.get("noise_sigma", 0.0)?,
            noise_clip: s.get("noise_clip", 1.0)?,
            seed: 0,
        };
        pair.validate(k)?;
        let shapes = s.get_list(
            "shapes",
            ["sphere", "torus", "box-frame", "helix", "bunny-like-composite"]
                .map(String::from)
                .to_vec(),
        )?;
        if shapes.is_empty() {
            return Err(Error::Config("shapes must name at least one shape".into()));
        }
        let shape_points = s.get("shape_points", 2 * pair.n_points)?;
        Ok(Self {
            extractor,
            inlier_mode: s.get("inlier_mode", InlierMode::Anchor)?,
            consistency_dim: s.get("consistency_dim", DEFAULT_CONSISTENCY_DIM)?,
            inlier_seed: s.get("inlier_seed", 1)?,
            train,
            pair,
            shapes,
            shape_points,
            train_pairs: s.get("train_pairs", 40)?,
            eval_pairs: s.get("eval_pairs", 20)?,
            data_seed: s.get("data_seed", 100)?,
            eval_seed: s.get("eval_seed", 900)?,
        })
    }

    pub fn init_model(&self) -> Result<Model> {
        Model::init(
            &self.extractor,
            self.inlier_mode,
            self.train.pipeline.k,
            self.consistency_dim,
            self.inlier_seed,
        )
    }
}
