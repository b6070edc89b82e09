//! Static-graph edge convolution.
//!
//! Layer `l` maps point features `x` (N x C_in) to N x C_l: for each point
//! `i` and neighbor `k`, a shared two-layer perceptron is applied to
//! `concat(x_i, x_k - x_i)`, and the per-channel maximum over neighbors is
//! kept. All layers reuse the neighborhood graph built from the input
//! coordinates.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Backend, ExtractorConfig, FeatureExtractor, FeatureMatrix};
use crate::error::{Error, Result};
use crate::geometry::{NeighborhoodIndex, PointCloud};
use crate::nn::Mlp;

/// Learnable scalars of the edge-convolution backend, flattened layer by
/// layer in the order of [`Mlp`]'s layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureParams {
    config: ExtractorConfig,
    values: Vec<f64>,
}

fn layer_mlps(config: &ExtractorConfig) -> Vec<Mlp> {
    let mut c_in = 3;
    config
        .layer_widths
        .iter()
        .map(|&c| {
            let mlp = Mlp::new(vec![2 * c_in, c, c], true, true);
            c_in = c;
            mlp
        })
        .collect()
}

impl FeatureParams {
    /// Seeded initialization for the configured layer widths.
    pub fn init(config: &ExtractorConfig) -> Result<Self> {
        config.validate()?;
        if config.backend != Backend::EdgeConv {
            return Err(Error::Config("feature parameters exist only for edgeconv".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let values = layer_mlps(config)
            .iter()
            .flat_map(|m| m.init(&mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            values,
        })
    }

    pub fn from_values(config: ExtractorConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = Self::param_count(&config);
        if values.len() != expected {
            return Err(Error::Config(format!(
                "layout {:?} needs {expected} parameters, got {}",
                config.layer_widths,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature parameters".into()));
        }
        Ok(Self { config, values })
    }

    pub fn param_count(config: &ExtractorConfig) -> usize {
        layer_mlps(config).iter().map(Mlp::num_params).sum()
    }

    pub fn zeros(config: &ExtractorConfig) -> Result<Self> {
        Self::from_values(config.clone(), vec![0.0; Self::param_count(config)])
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(name, offset, len)` of every layer block, for reports.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut off = 0;
        layer_mlps(&self.config)
            .iter()
            .enumerate()
            .map(|(l, m)| {
                let n = m.num_params();
                let b = (format!("edgeconv.{l}"), off, n);
                off += n;
                b
            })
            .collect()
    }
}

impl FeatureExtractor for FeatureParams {
    fn id(&self) -> &'static str {
        "edgeconv"
    }

    fn dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn extract(&self, cloud: &PointCloud, index: &NeighborhoodIndex) -> Result<FeatureMatrix> {
        edgeconv_forward(cloud, index, self).map(|(f, _)| f)
    }
}

struct LayerTape {
    /// Input features of the layer, N x C_in.
    input: Array2<f64>,
    /// Perceptron traces, one per (point, neighbor) pair.
    traces: Vec<f64>,
    /// Winning neighbor slot per (point, output channel).
    argmax: Vec<usize>,
}

/// Everything the backward pass needs; tied to one forward call.
pub struct EdgeConvTape {
    config: ExtractorConfig,
    k: usize,
    neighbors: Vec<usize>,
    layers: Vec<LayerTape>,
}

impl EdgeConvTape {
    pub fn num_points(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn output_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Feeds the max-pooling winners and activation signs to `state`.
    pub fn hash_routing<H: std::hash::Hasher>(&self, state: &mut H) {
        for layer in &self.layers {
            for &a in &layer.argmax {
                state.write_usize(a);
            }
            for &v in &layer.traces {
                state.write_u8(crate::inlier::sign_code(v));
            }
        }
    }
}

pub fn edgeconv_forward(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    params: &FeatureParams,
) -> Result<(FeatureMatrix, EdgeConvTape)> {
    let config = &params.config;
    if index.k() != config.k_feat {
        return Err(Error::Config(format!(
            "edge convolution configured for K = {}, index has K = {}",
            config.k_feat,
            index.k()
        )));
    }
    if index.len() != cloud.len() {
        return Err(Error::Contract("index does not belong to this cloud".into()));
    }
    if params.values.len() != FeatureParams::param_count(config) {
        return Err(Error::Config("parameter vector does not match layout".into()));
    }
    let n = cloud.len();
    let k = index.k();
    let neighbors: Vec<usize> = (0..n).flat_map(|i| index.row(i).to_vec()).collect();

    let mut x = Array2::<f64>::zeros((n, 3));
    for (i, p) in cloud.points().iter().enumerate() {
        x[[i, 0]] = p.x;
        x[[i, 1]] = p.y;
        x[[i, 2]] = p.z;
    }

    let mut layers = Vec::with_capacity(config.layer_widths.len());
    let mut p_off = 0;
    for mlp in layer_mlps(config) {
        let w = &params.values[p_off..p_off + mlp.num_params()];
        p_off += mlp.num_params();
        let c_in = x.ncols();
        let c_out = mlp.output_dim();
        let tl = mlp.trace_len();
        let center = config.center_block;

        let per_point: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x.row(i);
                let mut traces = vec![0.0; k * tl];
                let mut best = vec![f64::NEG_INFINITY; c_out];
                let mut arg = vec![0usize; c_out];
                let mut input = vec![0.0; 2 * c_in];
                let mut h = vec![0.0; c_out];
                for slot in 0..k {
                    let j = neighbors[i * k + slot];
                    let xj = x.row(j);
                    for c in 0..c_in {
                        input[c] = if center { xi[c] } else { 0.0 };
                        input[c_in + c] = xj[c] - xi[c];
                    }
                    mlp.forward(w, &input, &mut traces[slot * tl..(slot + 1) * tl], &mut h);
                    for c in 0..c_out {
                        let better = h[c] > best[c]
                            || (h[c] == best[c] && j < neighbors[i * k + arg[c]]);
                        if better {
                            best[c] = h[c];
                            arg[c] = slot;
                        }
                    }
                }
                (best, traces, arg)
            })
            .collect();

        let mut out = Array2::<f64>::zeros((n, c_out));
        let mut traces = Vec::with_capacity(n * k * tl);
        let mut argmax = Vec::with_capacity(n * c_out);
        for (i, (best, tr, arg)) in per_point.into_iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&best));
            traces.extend(tr);
            argmax.extend(arg);
        }
        layers.push(LayerTape {
            input: std::mem::replace(&mut x, out),
            traces,
            argmax,
        });
    }

    let features = FeatureMatrix::new(x, "edgeconv")?;
    Ok((
        features,
        EdgeConvTape {
            config: config.clone(),
            k,
            neighbors,
            layers,
        },
    ))
}

/// Reverse mode of [`edgeconv_forward`]: gradients of
/// `<d_features, features>` with respect to the parameters and to the input
/// coordinates (N x 3). Max pooling routes each channel's gradient to its
/// winning neighbor only.
pub fn edgeconv_backward(
    tape: &EdgeConvTape,
    params: &FeatureParams,
    d_features: &Array2<f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = tape.num_points();
    if d_features.dim() != (n, tape.output_dim()) {
        return Err(Error::Contract(format!(
            "feature gradient has shape {:?}, expected ({n}, {})",
            d_features.dim(),
            tape.output_dim()
        )));
    }
    if params.config != tape.config {
        return Err(Error::Contract("parameters do not match the tape's layout".into()));
    }
    let k = tape.k;
    let mlps = layer_mlps(&tape.config);
    let mut offsets = Vec::with_capacity(mlps.len());
    let mut off = 0;
    for m in &mlps {
        offsets.push(off);
        off += m.num_params();
    }
    let mut d_params = vec![0.0; off];
    let mut d_out = d_features.clone();

    for (l, mlp) in mlps.iter().enumerate().rev() {
        let layer = &tape.layers[l];
        let c_in = layer.input.ncols();
        let c_out = mlp.output_dim();
        let tl = mlp.trace_len();
        let w = &params.values[offsets[l]..offsets[l] + mlp.num_params()];
        let dw = &mut d_params[offsets[l]..offsets[l] + mlp.num_params()];
        let mut d_in = Array2::<f64>::zeros((n, c_in));
        let mut g = vec![0.0; c_out];
        let mut du = vec![0.0; 2 * c_in];
        for i in 0..n {
            for slot in 0..k {
                let mut any = false;
                for c in 0..c_out {
                    g[c] = if layer.argmax[i * c_out + c] == slot {
                        d_out[[i, c]]
                    } else {
                        0.0
                    };
                    any |= g[c] != 0.0;
                }
                if !any {
                    continue;
                }
                du.iter_mut().for_each(|v| *v = 0.0);
                let trace = &layer.traces[(i * k + slot) * tl..(i * k + slot + 1) * tl];
                mlp.backward(w, trace, &g, dw, Some(&mut du));
                let j = tape.neighbors[i * k + slot];
                for c in 0..c_in {
                    let center = if tape.config.center_block { du[c] } else { 0.0 };
                    d_in[[i, c]] += center - du[c_in + c];
                    d_in[[j, c]] += du[c_in + c];
                }
            }
        }
        d_out = d_in;
    }
    Ok((d_params, d_out))
}
