//! Fixed-topology multilayer perceptron with hand-written reverse mode and Adam.
//!
//! Layout of a network with `hidden_depth = D`:
//!
//! ```text
//! input -> [Linear -> (LayerNorm) -> GELU] x D -> Linear -> output
//! ```
//!
//! Parameters live in one flat [`ParamStore`]. Per layer the order is
//! weights (row-major, `fan_out x fan_in`), bias, then layer-norm gain and
//! shift when enabled.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DFPMLP\0\x01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_width: usize,
    /// Number of hidden layers; zero gives a single affine map.
    pub hidden_depth: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl MlpConfig {
    /// Desk-scale network: width 64, two hidden layers.
    pub fn desk(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_width: 64,
            hidden_depth: 2,
            activation: Activation::Gelu,
            layer_norm: false,
        }
    }

    /// Full-size network: width 512, four hidden layers.
    pub fn full(input_dim: usize, output_dim: usize) -> Self {
        Self {
            hidden_width: 512,
            hidden_depth: 4,
            ..Self::desk(input_dim, output_dim)
        }
    }

    pub fn with_layer_norm(self, layer_norm: bool) -> Self {
        Self { layer_norm, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidConfig(format!(
                "all network dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Mlp::layout(self).1
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    /// Offsets of layer-norm gain and shift.
    ln: Option<(usize, usize)>,
    hidden: bool,
}

/// Flat parameter vector and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            grads: vec![0.0; n],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let grads = vec![0.0; values.len()];
        Self { values, grads }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// `self <- rate * source + (1 - rate) * self`, elementwise.
    pub fn blend_towards(&mut self, source: &[f64], rate: f64) {
        debug_assert_eq!(self.values.len(), source.len());
        for (t, &s) in self.values.iter_mut().zip(source) {
            *t = rate * s + (1.0 - rate) * *t;
        }
    }
}

/// Intermediate activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Normalized pre-activations (layer-norm layers only).
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    /// Argument of GELU for hidden layers, and its tanh term.
    gelu_in: Vec<Vec<f64>>,
    gelu_t: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// The tanh term of the GELU approximation.
#[inline]
fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_A * x * x * x)).tanh()
}

#[inline]
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Dot product with four independent accumulators so it vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, a_rest) = a[..n].split_at(n - n % 4);
    let (b4, b_rest) = b[..n].split_at(n - n % 4);
    let mut acc = [0.0; 4];
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = a_rest.iter().zip(b_rest).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug)]
pub struct Mlp {
    cfg: MlpConfig,
    layers: Vec<Layer>,
    n_params: usize,
    forward_calls: AtomicU64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            layers: self.layers.clone(),
            n_params: self.n_params,
            forward_calls: AtomicU64::new(self.forward_calls()),
        }
    }
}

impl Mlp {
    pub fn new(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let (layers, n_params) = Self::layout(&cfg);
        Ok(Self {
            cfg,
            layers,
            n_params,
            forward_calls: AtomicU64::new(0),
        })
    }

    fn layout(cfg: &MlpConfig) -> (Vec<Layer>, usize) {
        let mut layers = Vec::with_capacity(cfg.hidden_depth + 1);
        let mut off = 0;
        let mut fan_in = cfg.input_dim;
        for i in 0..=cfg.hidden_depth {
            let hidden = i < cfg.hidden_depth;
            let fan_out = if hidden {
                cfg.hidden_width
            } else {
                cfg.output_dim
            };
            let w = off;
            let b = w + fan_in * fan_out;
            off = b + fan_out;
            let ln = if hidden && cfg.layer_norm {
                let g = off;
                off += 2 * fan_out;
                Some((g, g + fan_out))
            } else {
                None
            };
            layers.push(Layer {
                fan_in,
                fan_out,
                w,
                b,
                ln,
                hidden,
            });
            fan_in = fan_out;
        }
        (layers, off)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// Number of forward passes executed through this network object.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Fan-in scaled uniform initialisation; layer-norm gain 1, shift 0.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::zeros(self.n_params);
        for l in &self.layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for v in &mut p.values[l.w..l.b + l.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            if let Some((g, _)) = l.ln {
                p.values[g..g + l.fan_out].fill(1.0);
            }
        }
        p
    }

    fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.values.len() != self.n_params || params.grads.len() != self.n_params {
            return Err(Error::DimensionMismatch {
                context: "mlp parameters",
                expected: self.n_params,
                got: params.values.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(params, input)?.output)
    }

    /// Forward pass that keeps everything [`Mlp::backward_tape`] needs.
    pub fn forward_tape(&self, params: &ParamStore, input: &[f64]) -> Result<Tape> {
        self.check_params(params)?;
        if input.len() != self.cfg.input_dim {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.cfg.input_dim,
                got: input.len(),
            });
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);

        let v = &params.values;
        let mut tape = Tape::default();
        let mut x = input.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = v[l.b..l.b + l.fan_out].to_vec();
            let weights = &v[l.w..l.w + l.fan_in * l.fan_out];
            for (zo, row) in z.iter_mut().zip(weights.chunks_exact(l.fan_in)) {
                *zo += dot(row, &x);
            }
            let next = if l.hidden {
                if let Some((g, s)) = l.ln {
                    let n = l.fan_out as f64;
                    let mean = z.iter().sum::<f64>() / n;
                    let var = z.iter().map(|zi| (zi - mean).powi(2)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = z.iter().map(|zi| (zi - mean) * inv_std).collect();
                    for (o, zo) in z.iter_mut().enumerate() {
                        *zo = v[g + o] * xhat[o] + v[s + o];
                    }
                    tape.xhat.push(xhat);
                    tape.inv_std.push(inv_std);
                }
                let t: Vec<f64> = z.iter().map(|&u| gelu_tanh(u)).collect();
                let a: Vec<f64> = z.iter().zip(&t).map(|(&u, &ti)| 0.5 * u * (1.0 + ti)).collect();
                tape.gelu_in.push(z);
                tape.gelu_t.push(t);
                a
            } else {
                z
            };
            if next.iter().any(|a| !a.is_finite()) {
                return Err(Error::NonFinite {
                    layer: li,
                    stage: "forward",
                });
            }
            tape.inputs.push(std::mem::replace(&mut x, next));
        }
        tape.output = x;
        Ok(tape)
    }

    /// Accumulates `d(output_grad . output)/d params` into `params.grads` and
    /// returns the gradient with respect to the input.
    pub fn backward_tape(
        &self,
        params: &mut ParamStore,
        tape: &Tape,
        output_grad: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if output_grad.len() != self.cfg.output_dim {
            return Err(Error::DimensionMismatch {
                context: "mlp output gradient",
                expected: self.cfg.output_dim,
                got: output_grad.len(),
            });
        }
        let mut g = output_grad.to_vec();
        let mut ln_idx = tape.xhat.len();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.hidden {
                let u = &tape.gelu_in[li];
                let t = &tape.gelu_t[li];
                for ((gi, &ui), &ti) in g.iter_mut().zip(u).zip(t) {
                    *gi *= gelu_grad(ui, ti);
                }
                if let Some((gain, shift)) = l.ln {
                    ln_idx -= 1;
                    let xhat = &tape.xhat[ln_idx];
                    let inv_std = tape.inv_std[ln_idx];
                    let n = l.fan_out as f64;
                    let mut dxhat = vec![0.0; l.fan_out];
                    for o in 0..l.fan_out {
                        params.grads[gain + o] += g[o] * xhat[o];
                        params.grads[shift + o] += g[o];
                        dxhat[o] = g[o] * params.values[gain + o];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
                    for o in 0..l.fan_out {
                        g[o] = inv_std * (dxhat[o] - mean_d - xhat[o] * mean_dx);
                    }
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: li,
                    stage: "backward",
                });
            }
            let x = &tape.inputs[li];
            let mut gx = vec![0.0; l.fan_in];
            let span = l.w..l.w + l.fan_in * l.fan_out;
            let w_rows = params.values[span.clone()].chunks_exact(l.fan_in);
            let gw_rows = params.grads[span].chunks_exact_mut(l.fan_in);
            for ((&go, w_row), gw_row) in g.iter().zip(w_rows).zip(gw_rows) {
                if go == 0.0 {
                    continue;
                }
                for ((gw, gxi), (&xi, &wi)) in gw_row.iter_mut().zip(gx.iter_mut()).zip(x.iter().zip(w_row)) {
                    *gw += go * xi;
                    *gxi += go * wi;
                }
            }
            for (gb, &go) in params.grads[l.b..l.b + l.fan_out].iter_mut().zip(&g) {
                *gb += go;
            }
            g = gx;
        }
        Ok(g)
    }

    /// Recomputes the forward pass, then back-propagates `output_grad`.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        input: &[f64],
        output_grad: &[f64],
    ) -> Result<Vec<f64>> {
        let tape = self.forward_tape(params, input)?;
        self.backward_tape(params, &tape, output_grad)
    }

    pub fn encode_checkpoint(&self, params: &ParamStore) -> Result<Vec<u8>> {
        self.check_params(params)?;
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        write_config(&mut w, &self.cfg);
        w.f64s(&params.values);
        Ok(w.finish())
    }

    /// Decodes a checkpoint written by [`Mlp::encode_checkpoint`].
    pub fn decode_checkpoint(data: &[u8]) -> Result<(Mlp, ParamStore)> {
        let mut r = Reader::open(data, CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported mlp version {version}")));
        }
        let cfg = read_config(&mut r)?;
        let values = r.f64s()?;
        r.expect_end()?;
        let mlp = Mlp::new(cfg)?;
        if values.len() != mlp.n_params {
            return Err(Error::DimensionMismatch {
                context: "checkpoint parameters",
                expected: mlp.n_params,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter in checkpoint".into()));
        }
        Ok((mlp, ParamStore::from_values(values)))
    }
}

fn write_config(w: &mut Writer, cfg: &MlpConfig) {
    w.u32(cfg.input_dim as u32);
    w.u32(cfg.output_dim as u32);
    w.u32(cfg.hidden_width as u32);
    w.u32(cfg.hidden_depth as u32);
    w.u8(match cfg.activation {
        Activation::Gelu => 0,
    });
    w.u8(cfg.layer_norm as u8);
}

fn read_config(r: &mut Reader<'_>) -> Result<MlpConfig> {
    let input_dim = r.u32()? as usize;
    let output_dim = r.u32()? as usize;
    let hidden_width = r.u32()? as usize;
    let hidden_depth = r.u32()? as usize;
    let activation = match r.u8()? {
        0 => Activation::Gelu,
        a => return Err(Error::Format(format!("unknown activation tag {a}"))),
    };
    let layer_norm = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad layer-norm flag {b}"))),
    };
    Ok(MlpConfig {
        input_dim,
        output_dim,
        hidden_width,
        hidden_depth,
        activation,
        layer_norm,
    })
}

/// Adam optimiser state for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one bias-corrected Adam update and clears the gradients.
    ///
    /// Non-finite gradients leave parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::DimensionMismatch {
                context: "adam state",
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        if let Some(index) = params.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = params.grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params.values[i] -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        params.zero_grads();
        Ok(())
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.f64s(&self.first_moment);
        w.f64s(&self.second_moment);
        w.u64(self.step_count);
        w.f64(self.lr);
        w.f64(self.beta1);
        w.f64(self.beta2);
        w.f64(self.eps);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let first_moment = r.f64s()?;
        let second_moment = r.f64s()?;
        if first_moment.len() != second_moment.len() {
            return Err(Error::Format("adam moment lengths differ".into()));
        }
        Ok(Self {
            first_moment,
            second_moment,
            step_count: r.u64()?,
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        })
    }
}
