//! Small fully connected networks over flat parameter slices, with
//! hand-written reverse mode.
//!
//! Layout of one linear layer inside the flat slice: the `out x in` weight
//! matrix row-major, followed by `out` biases (when enabled).

use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// A perceptron with leaky-rectifier activations between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    dims: Vec<usize>,
    bias: bool,
    activate_last: bool,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`.
    pub fn new(dims: Vec<usize>, bias: bool, activate_last: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        assert!(dims.iter().all(|&d| d > 0), "layer widths must be positive");
        Self {
            dims,
            bias,
            activate_last,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[0], w[1]))
    }

    fn layer_params(&self, inputs: usize, outputs: usize) -> usize {
        inputs * outputs + if self.bias { outputs } else { 0 }
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|(i, o)| self.layer_params(i, o)).sum()
    }

    /// Scalars recorded per evaluation: the input and every pre-activation.
    pub fn trace_len(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Weights uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`;
    /// biases start at zero.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (i, o) in self.layers() {
            let a = (6.0 / (i + o) as f64).sqrt();
            out.extend((0..i * o).map(|_| rng.random_range(-a..=a)));
            if self.bias {
                out.extend(std::iter::repeat_n(0.0, o));
            }
        }
        out
    }

    fn is_activated(&self, layer: usize) -> bool {
        layer + 2 < self.dims.len() || self.activate_last
    }

    /// Evaluates the network, writing the trace needed by `backward`.
    pub fn forward(&self, params: &[f64], input: &[f64], trace: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(params.len(), self.num_params());
        debug_assert_eq!(input.len(), self.input_dim());
        debug_assert_eq!(trace.len(), self.trace_len());
        debug_assert_eq!(out.len(), self.output_dim());
        trace[..input.len()].copy_from_slice(input);
        let mut act: Vec<f64> = input.to_vec();
        let mut p_off = 0;
        let mut z_off = input.len();
        for (layer, (ni, no)) in self.layers().enumerate() {
            let w = &params[p_off..p_off + ni * no];
            let b = self.bias.then(|| &params[p_off + ni * no..p_off + ni * no + no]);
            let z = &mut trace[z_off..z_off + no];
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &w[r * ni..(r + 1) * ni];
                let mut s: f64 = row.iter().zip(&act).map(|(a, b)| a * b).sum();
                if let Some(b) = b {
                    s += b[r];
                }
                *zr = s;
            }
            act.clear();
            if self.is_activated(layer) {
                act.extend(z.iter().map(|&v| leaky_relu(v)));
            } else {
                act.extend_from_slice(z);
            }
            p_off += self.layer_params(ni, no);
            z_off += no;
        }
        out.copy_from_slice(&act);
    }

    /// Accumulates `d out / d params` into `d_params` and, when given,
    /// `d out / d input` into `d_input`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &[f64],
        d_out: &[f64],
        d_params: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let n_layers = self.dims.len() - 1;
        // Offsets of each layer's parameters and pre-activations.
        let mut p_offs = Vec::with_capacity(n_layers);
        let mut z_offs = Vec::with_capacity(n_layers);
        let mut p = 0;
        let mut z = self.dims[0];
        for (ni, no) in self.layers() {
            p_offs.push(p);
            z_offs.push(z);
            p += self.layer_params(ni, no);
            z += no;
        }

        let mut grad: Vec<f64> = d_out.to_vec();
        for layer in (0..n_layers).rev() {
            let (ni, no) = (self.dims[layer], self.dims[layer + 1]);
            let zs = &trace[z_offs[layer]..z_offs[layer] + no];
            if self.is_activated(layer) {
                for (g, &zv) in grad.iter_mut().zip(zs) {
                    *g *= leaky_relu_grad(zv);
                }
            }
            let input: Vec<f64> = if layer == 0 {
                trace[..ni].to_vec()
            } else {
                let prev = &trace[z_offs[layer - 1]..z_offs[layer - 1] + ni];
                if self.is_activated(layer - 1) {
                    prev.iter().map(|&v| leaky_relu(v)).collect()
                } else {
                    prev.to_vec()
                }
            };
            let po = p_offs[layer];
            let w = &params[po..po + ni * no];
            for (r, &g) in grad.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let dw = &mut d_params[po + r * ni..po + (r + 1) * ni];
                for (d, &a) in dw.iter_mut().zip(&input) {
                    *d += g * a;
                }
            }
            if self.bias {
                for (d, &g) in d_params[po + ni * no..po + ni * no + no].iter_mut().zip(&grad) {
                    *d += g;
                }
            }
            if layer == 0 && d_input.is_none() {
                break;
            }
            let mut prev = vec![0.0; ni];
            for (r, &g) in grad.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (pv, &wv) in prev.iter_mut().zip(&w[r * ni..(r + 1) * ni]) {
                    *pv += g * wv;
                }
            }
            grad = prev;
        }
        if let Some(d_input) = d_input {
            for (d, g) in d_input.iter_mut().zip(&grad) {
                *d += g;
            }
        }
    }
}
