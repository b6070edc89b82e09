//! Central-difference verification of the analytic training gradient.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate, TrainConfig};
use crate::data::config::{RunConfig, Settings};
use crate::data::suite::pair_set;
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::inlier::InlierMode;
use crate::solver::Model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that two gradients that
    /// are both essentially zero compare equal. The floor actually used is
    /// raised to [`GradCheckConfig::effective_floor`] when round-off in the
    /// central difference would otherwise dominate.
    pub floor: f64,
}

/// Round-off of one loss evaluation in units of `eps * |loss|`. The loss
/// is a sum over many terms, so a handful of ulps is typical.
const ROUNDOFF_ULPS: f64 = 10.0;

impl GradCheckConfig {
    /// Central differences carry about `eps * |loss| / h` of round-off. A
    /// gradient is compared relatively only when that noise stays below
    /// `tolerance` times its magnitude; smaller ones are compared absolutely.
    pub fn effective_floor(&self, loss: f64) -> f64 {
        let noise = ROUNDOFF_ULPS * f64::EPSILON * loss.abs() / self.step;
        self.floor.max(noise / self.tolerance)
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A selection, argmax or activation sign changed inside `[-h, h]`, so
    /// the central difference straddles a kink and is not compared.
    NonSmooth,
}

impl CheckStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "FAIL",
            Self::NonSmooth => "non-smooth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub block: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor used for the relative errors.
    pub floor: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(|e| e.status == CheckStatus::Fail)
    }

    pub fn count(&self, status: CheckStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    /// Largest relative error among compared entries.
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.status != CheckStatus::NonSmooth)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table, one parameter per line, followed by a summary line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:<14} {:>14} {:>14} {:>10}  status",
            "index", "block", "analytic", "numeric", "rel_err"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:>6}  {:<14} {:>14.6e} {:>14.6e} {:>10.2e}  {}",
                e.index,
                e.block,
                e.analytic,
                e.numeric,
                e.rel_error,
                e.status.name()
            );
        }
        let _ = writeln!(
            out,
            "{} parameters: {} pass, {} fail, {} non-smooth; max rel error {:.3e} (tolerance {:e}, floor {:.1e}); {}",
            self.entries.len(),
            self.count(CheckStatus::Pass),
            self.count(CheckStatus::Fail),
            self.count(CheckStatus::NonSmooth),
            self.max_rel_error(),
            self.tolerance,
            self.floor,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// The standard micro instance: eight source and eight reference points of
/// one builtin shape, `K = 3`, one iteration and a two-layer edge
/// convolution of width 4. Loss weights and switches are copied from `base`.
pub fn micro_instance(
    seed: u64,
    mode: InlierMode,
    base: &TrainConfig,
) -> Result<(PointCloud, PointCloud, Model, TrainConfig)> {
    let mut s = Settings::default();
    s.set("backend", "edgeconv");
    s.set("layer_widths", "4,4");
    s.set("k", 3);
    s.set("iterations", 1);
    s.set("alpha", 2.0);
    s.set("inlier_fraction", 0.5);
    s.set("consistency_dim", 4);
    s.set("n_points", 8);
    s.set("keep_fraction", 1.0);
    s.set("shapes", "bunny-like-composite");
    let micro = RunConfig::from_settings(&s)?;
    let mut config = TrainConfig {
        pipeline: micro.train.pipeline,
        ..base.clone()
    };
    config.pipeline.matching.dual = base.pipeline.matching.dual;
    let model = Model::init(&micro.extractor, mode, 3, 4, seed + 1)?;
    let pair = pair_set(&micro, 1, seed, 1.0)?.remove(0);
    Ok((pair.p, pair.q, model, config))
}

/// Parameter blocks that have a gradient path under `config`. The inlier
/// network only influences the losses through the solve, and only the motion
/// losses read the solve.
pub fn reachable_blocks(model: &Model, config: &TrainConfig) -> Vec<(String, usize, usize)> {
    let through_solve = !config.stop_gradient_svd
        && (config.use_global_consistency || config.use_inlier_neighborhood);
    let features = through_solve
        || config.use_inlier_neighborhood
        || config.use_geometric_structure
        || config.use_spatial_consistency;
    model
        .blocks()
        .into_iter()
        .filter(|(name, _, _)| {
            if name.starts_with("inlier.") {
                through_solve
            } else {
                features
            }
        })
        .collect()
}

/// Compares the analytic gradient of the total loss with central
/// differences, one parameter at a time. Every iteration starts from the
/// source position of the unperturbed run, matching the analytic gradient,
/// which treats those positions as constants.
pub fn grad_check(
    p: &PointCloud,
    q: &PointCloud,
    model: &Model,
    config: &TrainConfig,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = evaluate(p, q, model, config, None, true)?;
    let analytic = base.gradient.as_deref().expect("gradient requested");
    let theta = model.flat();
    let targets: Vec<(usize, String)> = reachable_blocks(model, config)
        .into_iter()
        .flat_map(|(name, off, len)| (off..off + len).map(move |i| (i, name.clone())))
        .collect();
    let h = check.step;
    let floor = check.effective_floor(base.loss.total);
    let entries = targets
        .into_par_iter()
        .map(|(i, block)| -> Result<ParamCheck> {
            let probe = |delta: f64| -> Result<(f64, u64)> {
                let mut m = model.clone();
                let mut v = theta.clone();
                v[i] += delta;
                m.set_flat(&v)?;
                let e = evaluate(p, q, &m, config, Some(&base.sources), false)?;
                Ok((e.loss.total, e.routing))
            };
            let (plus, r_plus) = probe(h)?;
            let (minus, r_minus) = probe(-h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            let status = if r_plus != base.routing || r_minus != base.routing {
                CheckStatus::NonSmooth
            } else if rel_error < check.tolerance {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
            Ok(ParamCheck {
                index: i,
                block,
                analytic: a,
                numeric,
                rel_error,
                status,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        loss: base.loss.total,
        step: h,
        tolerance: check.tolerance,
        floor,
        entries,
    })
}
