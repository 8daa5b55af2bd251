//! Fully connected networks with reverse-mode gradients.
//!
//! Networks are plain parameter vectors plus a [`NetworkSpec`]. Evaluation is
//! batched over rows: a batch of inputs is assembled into one matrix
//! `[x | time features | condition]`, pushed through the dense layers, and the
//! activations are kept on a [`Tape`] so that any output cotangent can be
//! pulled back to the parameters (training) or to `x` (guidance).
//!
//! Parameter layout, per layer in order: the weight matrix `W` stored
//! row-major with shape `(out, in)`, followed by the bias of length `out`.

mod adam;
mod checkpoint;

pub use adam::{polyak_update, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How the diffusion time enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeEmbedding {
    None,
    ConcatScalar,
    /// `dim / 2` sine and `dim / 2` cosine features with geometric frequencies.
    Sinusoidal(usize),
}

impl TimeEmbedding {
    pub fn width(self) -> usize {
        match self {
            TimeEmbedding::None => 0,
            TimeEmbedding::ConcatScalar => 1,
            TimeEmbedding::Sinusoidal(d) => d,
        }
    }

    const MAX_FREQUENCY: f64 = 100.0;

    fn write(self, t: f64, out: &mut [f64]) {
        match self {
            TimeEmbedding::None => {}
            TimeEmbedding::ConcatScalar => out[0] = t,
            TimeEmbedding::Sinusoidal(d) => {
                let half = d / 2;
                for k in 0..half {
                    let freq = if half > 1 {
                        (Self::MAX_FREQUENCY.ln() * k as f64 / (half - 1) as f64).exp()
                    } else {
                        1.0
                    };
                    out[k] = (freq * t).sin();
                    out[half + k] = (freq * t).cos();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
    /// Width of the raw condition vector concatenated to the input.
    #[serde(default)]
    pub cond_dim: usize,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        NetworkSpec {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activation: Activation::Silu,
            time_embedding: TimeEmbedding::Sinusoidal(16),
            cond_dim: 0,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_time_embedding(mut self, time_embedding: TimeEmbedding) -> Self {
        self.time_embedding = time_embedding;
        self
    }

    pub fn with_cond_dim(mut self, cond_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("network widths must all be >= 1"));
        }
        if let TimeEmbedding::Sinusoidal(d) = self.time_embedding {
            if d == 0 || d % 2 != 0 {
                return Err(Error::invalid("sinusoidal embedding width must be even and > 0"));
            }
        }
        Ok(())
    }

    /// Width of the assembled first-layer input.
    pub fn total_input(&self) -> usize {
        self.input_dim + self.time_embedding.width() + self.cond_dim
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.total_input());
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// A batch of network inputs. `t` must hold one time per row unless the spec
/// has no time embedding; `cond` must be present iff `cond_dim > 0`.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub x: ArrayView2<'a, f64>,
    pub t: Option<&'a [f64]>,
    pub cond: Option<ArrayView2<'a, f64>>,
}

impl<'a> NetInput<'a> {
    pub fn new(x: ArrayView2<'a, f64>) -> Self {
        NetInput { x, t: None, cond: None }
    }

    pub fn with_time(mut self, t: &'a [f64]) -> Self {
        self.t = Some(t);
        self
    }

    pub fn with_cond(mut self, cond: Option<ArrayView2<'a, f64>>) -> Self {
        self.cond = cond;
        self
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }
}

/// Cached activations of one batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each dense layer (the first is the assembled input).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl Network {
    /// Fan-in scaled uniform weights and zero biases, deterministic in `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for w in spec.layer_dims().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Network { spec, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::DimMismatch {
                expected: spec.param_count(),
                got: params.len(),
                context: "network parameters",
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)> {
        let dims = self.spec.layer_dims();
        let mut offset = 0;
        let mut out = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wv = ArrayView2::from_shape((fan_out, fan_in), &self.params[offset..offset + fan_in * fan_out])
                .expect("layout matches spec");
            offset += fan_in * fan_out;
            let bv = ArrayView2::from_shape((1, fan_out), &self.params[offset..offset + fan_out])
                .expect("layout matches spec");
            offset += fan_out;
            out.push((wv, bv));
        }
        out
    }

    fn assemble(&self, input: &NetInput<'_>) -> Result<Array2<f64>> {
        let spec = &self.spec;
        let rows = input.rows();
        if input.x.ncols() != spec.input_dim {
            return Err(Error::DimMismatch {
                expected: spec.input_dim,
                got: input.x.ncols(),
                context: "network input",
            });
        }
        let emb = spec.time_embedding.width();
        if emb > 0 {
            match input.t {
                Some(t) if t.len() == rows => {}
                Some(t) => {
                    return Err(Error::DimMismatch {
                        expected: rows,
                        got: t.len(),
                        context: "time vector",
                    })
                }
                None => return Err(Error::invalid("network expects a time input")),
            }
        }
        match (spec.cond_dim, input.cond) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::invalid("network takes no condition")),
            (_, None) => return Err(Error::invalid("network expects a condition input")),
            (d, Some(c)) => {
                if c.ncols() != d || c.nrows() != rows {
                    return Err(Error::DimMismatch {
                        expected: d,
                        got: c.ncols(),
                        context: "condition input",
                    });
                }
            }
        }
        let mut a = Array2::zeros((rows, spec.total_input()));
        a.slice_mut(s![.., ..spec.input_dim]).assign(&input.x);
        if emb > 0 {
            let t = input.t.expect("checked above");
            for (mut row, &ti) in a.rows_mut().into_iter().zip(t) {
                let row = row.as_slice_mut().expect("standard layout");
                spec.time_embedding
                    .write(ti, &mut row[spec.input_dim..spec.input_dim + emb]);
            }
        }
        if let Some(c) = input.cond {
            a.slice_mut(s![.., spec.input_dim + emb..]).assign(&c);
        }
        Ok(a)
    }

    /// Batched forward pass keeping the activations for a later backward pass.
    pub fn forward_tape(&self, input: &NetInput<'_>) -> Result<Tape> {
        let mut layer_inputs = Vec::with_capacity(self.spec.hidden.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.spec.hidden.len());
        let mut h = self.assemble(input)?;
        let act = self.spec.activation;
        let n_layers = self.spec.hidden.len() + 1;
        for (l, (w, b)) in self.layers().into_iter().enumerate() {
            let z = h.dot(&w.t()) + b;
            layer_inputs.push(h);
            if l + 1 == n_layers {
                return Ok(Tape {
                    layer_inputs,
                    pre_activations,
                    output: z,
                });
            }
            h = z.mapv(|v| act.apply(v));
            pre_activations.push(z);
        }
        unreachable!("a network always has an output layer")
    }

    pub fn forward_batch(&self, input: &NetInput<'_>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(input)?.output)
    }

    /// Single-point forward pass.
    pub fn forward(&self, x: &[f64], t: Option<f64>, c: Option<&[f64]>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let tv = t.map(|t| [t]);
        let cv = c.map(|c| ArrayView2::from_shape((1, c.len()), c).expect("row vector"));
        let input = NetInput {
            x: xv,
            t: tv.as_ref().map(|t| &t[..]),
            cond: cv,
        };
        let out = self.forward_batch(&input)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Pulls an output cotangent back through the tape. Returns the gradient
    /// with respect to the parameters (if requested) and to the assembled input.
    pub fn backward(
        &self,
        tape: &Tape,
        cotangent: ArrayView2<'_, f64>,
        want_params: bool,
    ) -> (Option<Vec<f64>>, Array2<f64>) {
        assert_eq!(cotangent.dim(), tape.output.dim(), "cotangent shape");
        let act = self.spec.activation;
        let layers = self.layers();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
        let mut g = cotangent.to_owned();
        for l in (0..layers.len()).rev() {
            let (w, _) = layers[l];
            if want_params {
                let dw = g.t().dot(&tape.layer_inputs[l]);
                let db = g.sum_axis(Axis(0));
                grads.push((dw, db));
            }
            let mut g_prev = g.dot(&w);
            if l > 0 {
                ndarray::Zip::from(&mut g_prev)
                    .and(&tape.pre_activations[l - 1])
                    .for_each(|gp, &z| *gp *= act.derivative(z));
            }
            g = g_prev;
        }
        let param_grad = want_params.then(|| {
            let mut flat = Vec::with_capacity(self.params.len());
            for (dw, db) in grads.into_iter().rev() {
                flat.extend(dw.iter());
                flat.extend(db.iter());
            }
            flat
        });
        (param_grad, g)
    }

    /// Reverse-mode parameter gradient of a scalar loss of the batch outputs.
    ///
    /// `loss` receives the network outputs and returns the loss value together
    /// with its gradient with respect to those outputs.
    pub fn grad_params<F>(&self, input: &NetInput<'_>, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<'_, f64>) -> (f64, Array2<f64>),
    {
        let tape = self.forward_tape(input)?;
        let (value, cot) = loss(tape.output.view());
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        if cot.dim() != tape.output.dim() {
            return Err(Error::DimMismatch {
                expected: tape.output.len(),
                got: cot.len(),
                context: "loss cotangent",
            });
        }
        let (grad, _) = self.backward(&tape, cot.view(), true);
        Ok((value, grad.expect("requested")))
    }

    /// Outputs and the vector-Jacobian product `cotangent^T d out / d x` per row.
    pub fn input_vjp_batch(
        &self,
        input: &NetInput<'_>,
        cotangent: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let tape = self.forward_tape(input)?;
        if cotangent.dim() != tape.output.dim() {
            return Err(Error::DimMismatch {
                expected: tape.output.ncols(),
                got: cotangent.ncols(),
                context: "input cotangent",
            });
        }
        let (_, g) = self.backward(&tape, cotangent, false);
        let gx = g.slice(s![.., ..self.spec.input_dim]).to_owned();
        Ok((tape.output, gx))
    }

    /// Gradient of a scalar head with respect to `x`, one row per input row.
    pub fn input_grad_batch(&self, input: &NetInput<'_>) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.spec.output_dim != 1 {
            return Err(Error::invalid("input gradient requires a scalar-output network"));
        }
        let ones = Array2::ones((input.rows(), 1));
        self.input_vjp_batch(input, ones.view())
    }

    /// Gradient of the scalar output with respect to a single input point.
    pub fn grad_input(&self, x: &[f64], t: Option<f64>, c: Option<&[f64]>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let tv = t.map(|t| [t]);
        let cv = c.map(|c| ArrayView2::from_shape((1, c.len()), c).expect("row vector"));
        let input = NetInput {
            x: xv,
            t: tv.as_ref().map(|t| &t[..]),
            cond: cv,
        };
        let (_, g) = self.input_grad_batch(&input)?;
        Ok(g.into_raw_vec_and_offset().0)
    }
}

#[cfg(test)]
mod tests;
