//! Self-supervised losses, their reverse mode through the whole pipeline, and
//! a momentum optimizer.
//!
//! Each iteration's source cloud is treated as a constant: gradients flow
//! through the features, matching, reference copy, inlier scores and solve
//! of every iteration, but not into the position the previous iterations
//! moved the source to.

pub mod gradcheck;
mod losses;

pub use losses::*;

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::edgeconv_backward;
use crate::geometry::{apply_transform, Point3, PointCloud};
use crate::inlier::{angle, score_backward_impl, sign_code};
use crate::matching::{matching_backward, reference_copy_backward};
use crate::solver::{
    forward_iteration, weighted_svd_backward, IterationTrace, Model, PipelineConfig, ReferenceState,
};

/// A deliberately wrong backward path, for testing the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient of the confidence head `l`.
    ConfidenceHeadSign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pipeline: PipelineConfig,
    pub gamma: f64,
    pub rho: f64,
    pub lambda: f64,
    pub huber_beta: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescale the gradient to at most this Euclidean norm before the
    /// update; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: usize,
    /// Anneal the learning rate along a half cosine from its configured
    /// value to 0 over `steps`.
    pub cosine_decay: bool,
    pub seed: u64,
    pub use_global_consistency: bool,
    pub use_inlier_neighborhood: bool,
    pub use_geometric_structure: bool,
    pub use_spatial_consistency: bool,
    /// Treat the solved motion as a constant.
    pub stop_gradient_svd: bool,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            gamma: 1.0,
            rho: 0.1,
            lambda: 0.1,
            huber_beta: 1.0,
            learning_rate: 1e-3,
            momentum: 0.9,
            grad_clip: 1.0,
            steps: 200,
            cosine_decay: false,
            seed: 0,
            use_global_consistency: true,
            use_inlier_neighborhood: true,
            use_geometric_structure: true,
            use_spatial_consistency: true,
            stop_gradient_svd: false,
            fault: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        for (name, v) in [("gamma", self.gamma), ("rho", self.rho), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.huber_beta.is_finite() && self.huber_beta > 0.0) {
            return Err(Error::Config("huber_beta must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The four loss values of one iteration, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub l_gc: f64,
    pub l_in: f64,
    pub l_gs: f64,
    pub l_sc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_gc: f64,
    pub l_in: f64,
    pub l_gs: f64,
    pub l_sc: f64,
    pub total: f64,
    pub per_iteration: Vec<LossTerms>,
}

/// Sums the terms over iterations and weights them into the total.
pub fn total_loss(per_iteration: &[LossTerms], gamma: f64, rho: f64, lambda: f64) -> Result<LossBreakdown> {
    if per_iteration.is_empty() {
        return Err(Error::Size("no iterations to sum".into()));
    }
    if [gamma, rho, lambda].iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::Config("trade-off weights must be non-negative".into()));
    }
    let mut out = LossBreakdown {
        per_iteration: per_iteration.to_vec(),
        ..LossBreakdown::default()
    };
    for t in per_iteration {
        out.l_gc += t.l_gc;
        out.l_in += t.l_in;
        out.l_gs += t.l_gs;
        out.l_sc += t.l_sc;
        out.total += t.l_gc + gamma * t.l_in + rho * t.l_gs + lambda * t.l_sc;
    }
    Ok(out)
}

/// Loss, optional gradient, and the fingerprint of every non-smooth choice
/// made along the way.
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// In [`Model::flat`] order.
    pub gradient: Option<Vec<f64>>,
    /// Source position at the start of each iteration.
    pub sources: Vec<PointCloud>,
    /// Equal fingerprints mean the same selection, argmax, nearest-neighbor
    /// and activation-sign pattern, so the loss is smooth between the two
    /// parameter vectors that produced them.
    pub routing: u64,
}

/// Runs the pipeline on `(p, q)`, evaluates the losses and, if asked, their
/// gradient with respect to every model parameter.
///
/// With `sources`, iteration `l` starts from `sources[l]` instead of the
/// position reached by the previous iterations, which lets a finite
/// difference hold the trajectory fixed.
pub fn evaluate(
    p: &PointCloud,
    q: &PointCloud,
    model: &Model,
    config: &TrainConfig,
    sources: Option<&[PointCloud]>,
    with_gradient: bool,
) -> Result<Evaluation> {
    config.validate()?;
    let iters = config.pipeline.iterations;
    if sources.is_some_and(|s| s.len() != iters) {
        return Err(Error::Contract("one source cloud per iteration is required".into()));
    }
    let reference = ReferenceState::new(q, model, &config.pipeline)?;
    let mut hasher = DefaultHasher::new();
    for tape in [&reference.0.tape, &reference.0.tape_hat].into_iter().flatten() {
        tape.hash_routing(&mut hasher);
    }
    let mut gradient = with_gradient.then(|| vec![0.0; model.num_params()]);
    let mut terms = Vec::with_capacity(iters);
    let mut used = Vec::with_capacity(iters);
    let mut current = p.clone();
    for l in 0..iters {
        let source = sources.map_or(&current, |s| &s[l]);
        let step = (|| {
            let trace = forward_iteration(source, &reference, model, &config.pipeline)?;
            let (t, grads) = iteration_losses(&trace, &reference, config, with_gradient, &mut hasher)?;
            if let Some(g) = gradient.as_mut() {
                iteration_backward(&trace, &reference, model, config, grads, g)?;
            }
            Ok((t, trace.solve.transform))
        })()
        .map_err(|e: Error| e.at_iteration(l + 1))?;
        terms.push(step.0);
        used.push(source.clone());
        current = apply_transform(&step.1, source);
    }
    Ok(Evaluation {
        loss: total_loss(&terms, config.gamma, config.rho, config.lambda)?,
        gradient,
        sources: used,
        routing: hasher.finish(),
    })
}

/// Upstream gradients of one iteration's weighted losses.
struct IterationGrads {
    d_r: Matrix3<f64>,
    d_t: Vector3<f64>,
    d_copy: Vec<Point3>,
    d_g: Option<Array2<f64>>,
}

fn iteration_losses(
    trace: &IterationTrace,
    reference: &ReferenceState,
    config: &TrainConfig,
    with_gradient: bool,
    hasher: &mut DefaultHasher,
) -> Result<(LossTerms, IterationGrads)> {
    let src = &trace.source;
    let transform = &trace.solve.transform;
    let mut terms = LossTerms::default();
    let mut g = IterationGrads {
        d_r: Matrix3::zeros(),
        d_t: Vector3::zeros(),
        d_copy: vec![Point3::zeros(); src.cloud.len()],
        d_g: None,
    };
    for tape in [&src.tape, &src.tape_hat].into_iter().flatten() {
        tape.hash_routing(hasher);
    }
    trace.score_tape.hash_routing(hasher);
    for &i in &trace.inliers.indices {
        hasher.write_usize(i);
    }
    hasher.write_u8(trace.svd_tape.reflected() as u8);

    if config.use_global_consistency {
        let moved = apply_transform(transform, &src.cloud);
        let (v, d_moved, routing) =
            global_consistency_with_grad(&moved, &reference.0.cloud, config.huber_beta);
        terms.l_gc = v;
        for j in routing {
            hasher.write_usize(j);
        }
        if with_gradient {
            let (d_r, d_t) = moved_points_backward(&src.cloud, &d_moved);
            g.d_r += d_r;
            g.d_t += d_t;
        }
    }
    if config.use_inlier_neighborhood {
        let (v, tg) =
            inlier_neighborhood_with_grad(&trace.inliers, transform, &src.idx, &src.cloud, &trace.copy);
        terms.l_in = v;
        add_scaled(&mut g, &tg, config.gamma);
    }
    if config.use_geometric_structure {
        let (v, tg) = geometric_structure_with_grad(&trace.inliers, &src.idx, &src.cloud, &trace.copy);
        terms.l_gs = v;
        add_scaled(&mut g, &tg, config.rho);
        hash_structure_signs(trace, hasher);
    }
    if config.use_spatial_consistency {
        let (v, d_g, targets) = spatial_consistency_with_grad(&trace.map.g, &trace.inliers.indices)?;
        terms.l_sc = v;
        for j in targets {
            hasher.write_usize(j);
        }
        if with_gradient {
            g.d_g = Some(d_g * config.lambda);
        }
    }
    Ok((terms, g))
}

fn add_scaled(g: &mut IterationGrads, term: &TermGrads, scale: f64) {
    g.d_r += term.d_r * scale;
    g.d_t += term.d_t * scale;
    for (a, b) in g.d_copy.iter_mut().zip(&term.d_copy) {
        *a += b * scale;
    }
}

/// Signs of the edge and angle differences inside the structure loss, whose
/// absolute values are non-smooth at zero.
fn hash_structure_signs(trace: &IterationTrace, hasher: &mut DefaultHasher) {
    let (p, q) = (trace.source.cloud.points(), trace.copy.points());
    for &i in &trace.inliers.indices {
        let row = trace.source.idx.row(i);
        let e = |c: &[Point3], k: usize| c[i] - c[row[k]];
        for k in 0..row.len() {
            let da = angle(&e(p, k), &e(p, 0)) - angle(&e(q, k), &e(q, 0));
            hasher.write_u8(sign_code(da));
            hasher.write_u8(((e(p, k) - e(q, k)).norm() == 0.0) as u8);
        }
    }
}

fn iteration_backward(
    trace: &IterationTrace,
    reference: &ReferenceState,
    model: &Model,
    config: &TrainConfig,
    mut g: IterationGrads,
    out: &mut [f64],
) -> Result<()> {
    let n = trace.source.cloud.len();
    let feature_len = model.extractor.params().map_or(0, |p| p.len());
    let mut dw = vec![0.0; n];
    let solve_used = g.d_r != Matrix3::zeros() || g.d_t != Vector3::zeros();
    if !config.stop_gradient_svd && solve_used {
        let sg = weighted_svd_backward(&trace.svd_tape, &g.d_r, &g.d_t)?;
        for (h, &i) in trace.inliers.indices.iter().enumerate() {
            g.d_copy[i] += sg.q[h];
            dw[i] += sg.w[h];
        }
    }
    if dw.iter().any(|&v| v != 0.0) {
        let flip = config.fault == Some(Fault::ConfidenceHeadSign);
        let ig = score_backward_impl(&trace.score_tape, &model.inlier, &dw, flip)?;
        for (o, v) in out[feature_len..].iter_mut().zip(&ig.params) {
            *o += v;
        }
        // The source is a constant here, so ig.p is dropped.
        for (a, b) in g.d_copy.iter_mut().zip(&ig.q) {
            *a += b;
        }
    }
    let Some(params) = model.extractor.params() else {
        return Ok(());
    };
    let copy_used = g.d_copy.iter().any(|v| *v != Point3::zeros());
    if !copy_used && g.d_g.is_none() {
        return Ok(());
    }
    let d_f = copy_used.then(|| reference_copy_backward(&g.d_copy, &reference.0.cloud));
    let inputs = trace.matching_inputs(reference);
    let mg = matching_backward(&trace.map, &inputs, &config.pipeline.matching, d_f.as_ref(), g.d_g.as_ref())?;
    let src = &trace.source;
    let pairs = [
        (&src.tape, &mg.fp),
        (&src.tape_hat, &mg.fp_hat),
        (&reference.0.tape, &mg.fq),
        (&reference.0.tape_hat, &mg.fq_hat),
    ];
    for (tape, d) in pairs {
        let tape = tape
            .as_ref()
            .ok_or_else(|| Error::Contract("learned features were computed without a tape".into()))?;
        let (dp, _) = edgeconv_backward(tape, params, d)?;
        for (o, v) in out[..feature_len].iter_mut().zip(&dp) {
            *o += v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// One momentum step on one pair: `v <- mu v + g`, `theta <- theta - lr v`,
/// with `g` clipped to `grad_clip`. `velocity` must have one entry per model
/// parameter. Returns the loss and the unclipped gradient norm.
pub fn train_step(
    p: &PointCloud,
    q: &PointCloud,
    model: &mut Model,
    velocity: &mut [f64],
    config: &TrainConfig,
) -> Result<(LossBreakdown, f64)> {
    if velocity.len() != model.num_params() {
        return Err(Error::Contract("velocity length differs from the parameter count".into()));
    }
    let eval = evaluate(p, q, model, config, None, true)?;
    let grad = eval.gradient.expect("gradient requested");
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if config.grad_clip > 0.0 && norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };
    if config.learning_rate > 0.0 {
        let mut theta = model.flat();
        for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = config.momentum * *v + scale * g;
            *t -= config.learning_rate * *v;
        }
        model.set_flat(&theta)?;
    }
    Ok((eval.loss, norm))
}

/// Header of the training log. Columns are tab-separated; floats use
/// shortest round-trip notation.
pub const LOG_HEADER: &str = "step\tl_gc\tl_in\tl_gs\tl_sc\ttotal\tgrad_norm";

pub fn log_line(r: &StepReport) -> String {
    let l = &r.loss;
    format!(
        "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
        r.step, l.l_gc, l.l_in, l.l_gs, l.l_sc, l.total, r.grad_norm
    )
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    velocity: Vec<f64>,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = vec![0.0; model.num_params()];
        Ok(Self {
            model,
            config,
            velocity,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Learning rate of the next step.
    pub fn learning_rate(&self) -> f64 {
        if !self.config.cosine_decay || self.config.steps == 0 {
            return self.config.learning_rate;
        }
        let progress = (self.step as f64 / self.config.steps as f64).min(1.0);
        0.5 * self.config.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn step(&mut self, p: &PointCloud, q: &PointCloud) -> Result<StepReport> {
        let config = TrainConfig {
            learning_rate: self.learning_rate(),
            ..self.config.clone()
        };
        let (loss, grad_norm) = train_step(p, q, &mut self.model, &mut self.velocity, &config)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            grad_norm,
        })
    }

    /// Runs `config.steps` steps, one pair each, visiting `pairs` in a
    /// seeded shuffled order per pass. Writes [`LOG_HEADER`] and one line
    /// per step to `log`.
    pub fn fit(
        &mut self,
        pairs: &[(PointCloud, PointCloud)],
        mut log: impl Write,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        if pairs.is_empty() {
            return Err(Error::Size("no training pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut reports = Vec::with_capacity(self.config.steps);
        writeln!(log, "{LOG_HEADER}")?;
        for _ in 0..self.config.steps {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled above");
            let report = self.step(&pairs[i].0, &pairs[i].1)?;
            writeln!(log, "{}", log_line(&report))?;
            on_step(&report);
            reports.push(report);
        }
        Ok(reports)
    }
}
