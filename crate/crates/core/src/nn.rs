//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Everything here works on row-major [`Mat`] batches: one example per row.
//! Values are stored as `f64`; weights are narrowed to `f32` only when
//! persisted through [`crate::container`].

use std::fmt;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite matrix value {bad}"
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("Mat::from_rows row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Selects a subset of rows (in the given order).
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::shape("Mat::hcat rows", self.rows, other.rows));
        }
        let cols = self.cols + other.cols;
        let mut out = Mat::zeros(self.rows, cols);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            dst[..self.cols].copy_from_slice(self.row(r));
            dst[self.cols..].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "softmax" => Activation::Softmax,
            "identity" => Activation::Identity,
            other => return Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        })
    }

    fn apply_row(self, row: &mut [f64]) {
        match self {
            Activation::Relu => row.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => row.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Softmax => softmax_in_place(row),
            Activation::Identity => {}
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One fully connected layer. `weight` is `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn pre_activation(&self, x: &Mat) -> Mat {
        let (n_in, n_out) = (self.weight.rows(), self.weight.cols());
        let mut out = Mat::zeros(x.rows(), n_out);
        let w = self.weight.as_slice();
        for r in 0..x.rows() {
            let xr = x.row(r);
            let o = out.row_mut(r);
            o.copy_from_slice(&self.bias);
            for i in 0..n_in {
                let xi = xr[i];
                if xi == 0.0 {
                    continue;
                }
                let wi = &w[i * n_out..(i + 1) * n_out];
                for (oj, &wij) in o.iter_mut().zip(wi) {
                    *oj += xi * wij;
                }
            }
        }
        out
    }
}

/// Gradients for every layer of a [`DenseNet`], shaped like its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Mat, Vec<f64>)>,
}

impl Grads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Mat::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.as_mut_slice()
                .iter_mut()
                .zip(ow.as_slice())
                .for_each(|(a, b)| *a += b);
            b.iter_mut().zip(ob).for_each(|(a, b)| *a += b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.is_finite() && b.iter().all(|v| v.is_finite()))
    }
}

/// Activations recorded by [`DenseNet::forward_trace`]; `values[0]` is the
/// input and `values[i + 1]` the post-activation output of layer `i`.
#[derive(Clone, Debug)]
pub struct Trace {
    pub values: Vec<Mat>,
}

impl Trace {
    pub fn output(&self) -> &Mat {
        self.values.last().expect("trace always holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
}

impl DenseNet {
    /// Builds a network with layer widths `sizes` (input first) and He-uniform
    /// initialization.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network needs at least two positive widths, got {sizes:?}"
            )));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    weight: Mat {
                        rows: fan_in,
                        cols: fan_out,
                        data,
                    },
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        DenseNet::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(format!("layer {i} bias"), l.output_dim(), l.bias.len()));
            }
            if i + 1 < layers.len() {
                if l.activation == Activation::Softmax {
                    return Err(Error::InvalidArgument(format!(
                        "softmax is only allowed at the output, found at layer {i}"
                    )));
                }
                let next = layers[i + 1].input_dim();
                if next != l.output_dim() {
                    return Err(Error::shape(format!("layer {} input", i + 1), l.output_dim(), next));
                }
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = Self::layer_forward(layer, &cur);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &Mat) -> Result<Trace> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, values.last().unwrap());
            values.push(next);
        }
        Ok(Trace { values })
    }

    fn layer_forward(layer: &Dense, x: &Mat) -> Mat {
        let mut z = layer.pre_activation(x);
        for r in 0..z.rows() {
            layer.activation.apply_row(z.row_mut(r));
        }
        z
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("layer 0 input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Backpropagates `upstream` (dL/d output, same shape as the output)
    /// through a recorded trace. Returns parameter gradients summed over the
    /// batch and the gradient with respect to the input.
    pub fn backward(&self, trace: &Trace, upstream: &Mat) -> Result<(Grads, Mat)> {
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::shape("backward trace length", self.layers.len() + 1, trace.values.len()));
        }
        let out = trace.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::shape(
                "backward upstream gradient",
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut grads = Grads::zeros_like(self);
        let mut delta = upstream.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let y = &trace.values[li + 1];
            let x = &trace.values[li];
            activation_backward(layer.activation, y, &mut delta);

            let (n_in, n_out) = (layer.input_dim(), layer.output_dim());
            let (gw, gb) = &mut grads.layers[li];
            let gw = gw.as_mut_slice();
            let w = layer.weight.as_slice();
            let mut dx = Mat::zeros(x.rows(), n_in);
            for r in 0..x.rows() {
                let d = delta.row(r);
                gb.iter_mut().zip(d).for_each(|(g, v)| *g += v);
                let xr = x.row(r);
                let dxr = dx.row_mut(r);
                for i in 0..n_in {
                    let wi = &w[i * n_out..(i + 1) * n_out];
                    let mut acc = 0.0;
                    for (wij, dj) in wi.iter().zip(d) {
                        acc += wij * dj;
                    }
                    dxr[i] = acc;
                    let xi = xr[i];
                    if xi != 0.0 {
                        let gwi = &mut gw[i * n_out..(i + 1) * n_out];
                        for (g, dj) in gwi.iter_mut().zip(d) {
                            *g += xi * dj;
                        }
                    }
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }

    /// Convenience: gradient of `sum(upstream * f(x))` with respect to `x`.
    pub fn input_gradient(&self, x: &Mat, upstream: &Mat) -> Result<Mat> {
        let trace = self.forward_trace(x)?;
        Ok(self.backward(&trace, upstream)?.1)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Compact description used in container headers, e.g.
    /// `4x128:relu,128x1:sigmoid`.
    pub fn layout(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}x{}:{}", l.input_dim(), l.output_dim(), l.activation.name()))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn activation_backward(act: Activation, y: &Mat, delta: &mut Mat) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for (d, &v) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (d, &v) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *d *= v * (1.0 - v);
            }
        }
        Activation::Softmax => {
            for r in 0..y.rows() {
                let yr = y.row(r);
                let dr = delta.row_mut(r);
                let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, &v) in dr.iter_mut().zip(yr) {
                    *d = v * (*d - dot);
                }
            }
        }
    }
}

/// Bias-corrected Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// `shapes` are the lengths of each parameter tensor, in the order they
    /// will be passed to [`AdamState::step`].
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_net(net: &DenseNet, lr: f64) -> Self {
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        AdamState::new(&shapes, lr)
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam tensor count", self.m.len(), format!("{} params / {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(format!("adam tensor {i}"), self.m[i].len(), format!("{} params / {} grads", p.len(), g.len())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut DenseNet, grads: &Grads) -> Result<()> {
        self.step(net.param_slices_mut(), grads.slices())
    }
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy and its derivative with respect to `p`.
pub fn bce_loss(p: f64, y: f64) -> (f64, f64) {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = -y / p + (1.0 - y) / (1.0 - p);
    (loss, grad)
}

/// Mean BCE over a column of probabilities; returns the loss and dL/dp per row.
pub fn bce_batch(probs: &Mat, labels: &[f64]) -> (f64, Mat) {
    let n = probs.rows().max(1) as f64;
    let mut grad = Mat::zeros(probs.rows(), 1);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate().take(probs.rows()) {
        let (l, g) = bce_loss(probs.get(r, 0), y);
        total += l;
        grad.set(r, 0, g / n);
    }
    (total / n, grad)
}
