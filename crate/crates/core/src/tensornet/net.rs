//! Fully connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat buffer, layer by layer, each layer storing its
//! weight matrix (row-major, `out x in`) followed by its bias. Gradients use the
//! same layout so they can be handed to [`AdamState`](super::AdamState) as-is.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::linalg::{matvec, matvec_t};
use crate::error::{dim_check, EmdError, Result};

/// Nonlinearity applied between layers (never after the last one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedNet {
    widths: Vec<usize>,
    cond_width: usize,
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input of every layer; entry 0 is `[input, cond]`.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every layer; the last one is the net output.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("tape has at least one layer")
    }
}

impl FeedNet {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        cond_width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, cond_width, activation)?;
        for l in 0..net.n_layers() {
            let (rows, cols) = net.layer_shape(l);
            let scale = 1.0 / (cols as f64).sqrt();
            let start = net.layer_offset(l);
            for w in &mut net.params[start..start + rows * cols] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], cond_width: usize, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(EmdError::Config(
                "a network needs at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(EmdError::Config("layer widths must be positive".into()));
        }
        let mut net = FeedNet {
            widths: widths.to_vec(),
            cond_width,
            activation,
            params: Vec::new(),
        };
        let total = net.layer_offset(net.n_layers());
        net.params = vec![0.0; total];
        Ok(net)
    }

    /// Builds a net from an explicit flat parameter vector.
    pub fn from_params(
        widths: &[usize],
        cond_width: usize,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, cond_width, activation)?;
        dim_check("parameter vector", net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn cond_width(&self) -> usize {
        self.cond_width
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(rows, cols)` of the weight matrix of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let cols = if l == 0 {
            self.widths[0] + self.cond_width
        } else {
            self.widths[l]
        };
        (self.widths[l + 1], cols)
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| {
                let (r, c) = self.layer_shape(k);
                r * c + r
            })
            .sum()
    }

    /// Weight matrix and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (r, c) = self.layer_shape(l);
        let start = self.layer_offset(l);
        let (w, rest) = self.params[start..start + r * c + r].split_at(r * c);
        (w, rest)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (r, c) = self.layer_shape(l);
        let start = self.layer_offset(l);
        self.params[start..start + r * c + r].split_at_mut(r * c)
    }

    fn check_inputs(&self, input: &[f64], cond: &[f64]) -> Result<()> {
        dim_check("network input", self.widths[0], input.len())?;
        dim_check("network conditioning", self.cond_width, cond.len())
    }

    pub fn forward(&self, input: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(input, cond)?;
        let mut x: Vec<f64> = input.iter().chain(cond).copied().collect();
        let mut offset = 0;
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (rows, cols) = self.layer_shape(l);
            let w = &self.params[offset..offset + rows * cols];
            let b = &self.params[offset + rows * cols..offset + rows * cols + rows];
            offset += rows * cols + rows;
            let mut y = vec![0.0; rows];
            matvec(w, rows, cols, &x, &mut y);
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += bi;
            }
            if l != last {
                y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            x = y;
        }
        Ok(x)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn trace(&self, input: &[f64], cond: &[f64]) -> Result<Tape> {
        self.check_inputs(input, cond)?;
        let n = self.n_layers();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        layer_inputs.push(input.iter().chain(cond).copied().collect::<Vec<_>>());
        let mut offset = 0;
        for l in 0..n {
            let (rows, cols) = self.layer_shape(l);
            let w = &self.params[offset..offset + rows * cols];
            let b = &self.params[offset + rows * cols..offset + rows * cols + rows];
            offset += rows * cols + rows;
            let mut y = vec![0.0; rows];
            matvec(w, rows, cols, &layer_inputs[l], &mut y);
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += bi;
            }
            if l + 1 < n {
                layer_inputs.push(y.iter().map(|&v| self.activation.apply(v)).collect());
            }
            pre.push(y);
        }
        Ok(Tape { layer_inputs, pre })
    }

    /// Pulls `cotangent` back through a recorded pass.
    ///
    /// When `param_grad` is given, `scale * d<cotangent, out>/d params` is
    /// added into it. Returns the cotangent of the data input (conditioning
    /// features excluded).
    pub fn pullback(
        &self,
        tape: &Tape,
        cotangent: &[f64],
        mut param_grad: Option<(&mut [f64], f64)>,
    ) -> Result<Vec<f64>> {
        dim_check("output cotangent", self.output_width(), cotangent.len())?;
        if let Some((g, _)) = &param_grad {
            dim_check("parameter gradient buffer", self.params.len(), g.len())?;
        }
        let n = self.n_layers();
        let mut g: Vec<f64> = cotangent.to_vec();
        let mut offset = self.params.len();
        for l in (0..n).rev() {
            let (rows, cols) = self.layer_shape(l);
            offset -= rows * cols + rows;
            if l + 1 < n {
                for (gi, &p) in g.iter_mut().zip(&tape.pre[l]) {
                    *gi *= self.activation.derivative(p);
                }
            }
            if let Some((acc, scale)) = param_grad.as_mut() {
                let scale = *scale;
                let x = &tape.layer_inputs[l];
                let (dw, db) = acc[offset..offset + rows * cols + rows].split_at_mut(rows * cols);
                for r in 0..rows {
                    let gr = scale * g[r];
                    db[r] += gr;
                    if gr != 0.0 {
                        for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                            *d += gr * xv;
                        }
                    }
                }
            }
            let w = &self.params[offset..offset + rows * cols];
            let mut up = vec![0.0; cols];
            matvec_t(w, rows, cols, &g, &mut up);
            g = up;
        }
        g.truncate(self.widths[0]);
        Ok(g)
    }

    /// Parameter gradient and input cotangent of `<cotangent, forward(input, cond)>`.
    pub fn backward(
        &self,
        input: &[f64],
        cond: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = self.trace(input, cond)?;
        let mut grads = vec![0.0; self.params.len()];
        let input_cot = self.pullback(&tape, cotangent, Some((&mut grads, 1.0)))?;
        Ok((grads, input_cot))
    }

    /// Input cotangent only (no parameter gradient).
    pub fn input_vjp(&self, input: &[f64], cond: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let tape = self.trace(input, cond)?;
        self.pullback(&tape, cotangent, None)
    }
}
