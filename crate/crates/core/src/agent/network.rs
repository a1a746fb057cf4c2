//! Q-network with hand-written forward and backward passes.
//!
//! Activations are batched row-major buffers. Spatial activations use the
//! `[batch, channel, row, col]` layout; flat ones `[batch, feature]`.
//! Fully-connected weights are stored input-major (`[in, out]`) so that a
//! sparse binary input only touches the rows of its on-pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels;
use crate::error::{Error, Result};
use crate::flow::{FlowShape, GridSpec};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Convolution {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    MaxPool {
        window: usize,
    },
    Flatten,
    FullyConnected {
        units: usize,
    },
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    pub input: GridSpec,
    pub layers: Vec<LayerSpec>,
    pub output_units: usize,
}

impl NetworkArchitecture {
    pub fn new(input: GridSpec, layers: Vec<LayerSpec>, output_units: usize) -> Result<Self> {
        let arch = NetworkArchitecture {
            input,
            layers,
            output_units,
        };
        arch.plan()?;
        Ok(arch)
    }

    /// Flatten -> FC(128) -> ReLU -> FC(64) -> ReLU -> FC(actions).
    pub fn fully_connected(input: GridSpec, output_units: usize) -> Self {
        NetworkArchitecture {
            input,
            layers: fully_connected_layers(output_units),
            output_units,
        }
    }

    /// Two 3x3 convolutions with 32 and 64 filters, each followed by batch
    /// normalization, ReLU and 2x2 max-pooling, then FC(128) -> BatchNorm ->
    /// ReLU -> FC(64) -> ReLU -> FC(actions).
    pub fn convolutional(input: GridSpec, output_units: usize) -> Self {
        NetworkArchitecture {
            input,
            layers: convolutional_layers(output_units),
            output_units,
        }
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .plan()?
            .iter()
            .flat_map(|l| l.param_shapes.iter())
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm))
    }

    fn plan(&self) -> Result<Vec<PlannedLayer>> {
        let mut dims = Dims::Spatial {
            c: 1,
            h: self.input.height,
            w: self.input.width,
        };
        let mut param_idx = 0;
        let mut buffer_idx = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for (k, spec) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {k} ({spec:?}): {msg}"));
            let (out_dims, param_shapes, buffer_shapes) = match *spec {
                LayerSpec::Convolution {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Dims::Spatial { c, h, w } = dims else {
                        return Err(bad("needs a spatial input".into()));
                    };
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("filters, kernel and stride must be positive".into()));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(bad(format!("kernel larger than padded input {h}x{w}")));
                    }
                    let ho = (h + 2 * padding - kernel) / stride + 1;
                    let wo = (w + 2 * padding - kernel) / stride + 1;
                    (
                        Dims::Spatial {
                            c: filters,
                            h: ho,
                            w: wo,
                        },
                        vec![vec![filters, c, kernel, kernel], vec![filters]],
                        vec![],
                    )
                }
                LayerSpec::BatchNorm => {
                    let ch = dims.channels();
                    (dims, vec![vec![ch], vec![ch]], vec![vec![ch], vec![ch]])
                }
                LayerSpec::MaxPool { window } => {
                    let Dims::Spatial { c, h, w } = dims else {
                        return Err(bad("needs a spatial input".into()));
                    };
                    if window == 0 || window > h || window > w {
                        return Err(bad(format!("window does not fit input {h}x{w}")));
                    }
                    (
                        Dims::Spatial {
                            c,
                            h: h / window,
                            w: w / window,
                        },
                        vec![],
                        vec![],
                    )
                }
                LayerSpec::Flatten => (Dims::Flat(dims.len()), vec![], vec![]),
                LayerSpec::FullyConnected { units } => {
                    let Dims::Flat(n) = dims else {
                        return Err(bad("needs a flat input; add a flatten layer".into()));
                    };
                    if units == 0 {
                        return Err(bad("units must be positive".into()));
                    }
                    (Dims::Flat(units), vec![vec![n, units], vec![units]], vec![])
                }
                LayerSpec::Relu => (dims, vec![], vec![]),
            };
            out.push(PlannedLayer {
                spec: spec.clone(),
                in_dims: dims,
                out_dims,
                param_idx,
                buffer_idx,
                param_shapes: param_shapes.clone(),
                buffer_shapes: buffer_shapes.clone(),
            });
            param_idx += param_shapes.len();
            buffer_idx += buffer_shapes.len();
            dims = out_dims;
        }
        match (self.layers.last(), dims) {
            (Some(LayerSpec::FullyConnected { .. }), Dims::Flat(n)) if n == self.output_units => Ok(out),
            _ => Err(Error::Config(format!(
                "network must end in a fully-connected layer with {} units",
                self.output_units
            ))),
        }
    }
}

pub fn fully_connected_layers(actions: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::FullyConnected { units: 128 },
        LayerSpec::Relu,
        LayerSpec::FullyConnected { units: 64 },
        LayerSpec::Relu,
        LayerSpec::FullyConnected { units: actions },
    ]
}

pub fn convolutional_layers(actions: usize) -> Vec<LayerSpec> {
    let conv = |filters| LayerSpec::Convolution {
        filters,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    vec![
        conv(32),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        conv(64),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Flatten,
        LayerSpec::FullyConnected { units: 128 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::FullyConnected { units: 64 },
        LayerSpec::Relu,
        LayerSpec::FullyConnected { units: actions },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dims {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Dims {
    fn len(&self) -> usize {
        match *self {
            Dims::Spatial { c, h, w } => c * h * w,
            Dims::Flat(n) => n,
        }
    }

    fn channels(&self) -> usize {
        match *self {
            Dims::Spatial { c, .. } => c,
            Dims::Flat(n) => n,
        }
    }

    fn spatial(&self) -> usize {
        match *self {
            Dims::Spatial { h, w, .. } => h * w,
            Dims::Flat(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PlannedLayer {
    spec: LayerSpec,
    in_dims: Dims,
    out_dims: Dims,
    param_idx: usize,
    buffer_idx: usize,
    param_shapes: Vec<Vec<usize>>,
    buffer_shapes: Vec<Vec<usize>>,
}

/// A named, row-major tensor of 64-bit values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let mut t = Tensor::zeros(name, shape);
        t.values.fill(value);
        t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Whether batch normalization uses batch statistics (training) or the
/// running estimates (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Learnable tensors of a Q-network plus its batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetworkParams {
    arch: NetworkArchitecture,
    plan: Vec<PlannedLayer>,
    tensors: Vec<Tensor>,
    buffers: Vec<Tensor>,
}

/// Gradients with the same layout as [`QNetworkParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.values.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Intermediate values saved by [`QNetworkParams::forward_batch`] for backprop.
#[derive(Debug)]
pub struct ForwardCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

#[derive(Debug)]
enum Aux {
    None,
    Pool(Vec<u32>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

impl QNetworkParams {
    /// Glorot-uniform weights (`+-sqrt(6 / (fan_in + fan_out))`), zero biases,
    /// unit batch-norm scales.
    pub fn init<R: Rng + ?Sized>(arch: &NetworkArchitecture, rng: &mut R) -> Result<Self> {
        let mut net = QNetworkParams::zeros(arch)?;
        for layer in &net.plan {
            match layer.spec {
                LayerSpec::Convolution { .. } | LayerSpec::FullyConnected { .. } => {
                    let (fan_in, fan_out) = fans(&layer.param_shapes[0]);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in &mut net.tensors[layer.param_idx].values {
                        *v = rng.gen_range(-limit..=limit);
                    }
                }
                _ => {}
            }
        }
        Ok(net)
    }

    /// All learnable values zero except batch-norm scales (1) and running
    /// variances (1).
    pub fn zeros(arch: &NetworkArchitecture) -> Result<Self> {
        let plan = arch.plan()?;
        let mut tensors = Vec::new();
        let mut buffers = Vec::new();
        for (k, layer) in plan.iter().enumerate() {
            match layer.spec {
                LayerSpec::Convolution { .. } | LayerSpec::FullyConnected { .. } => {
                    tensors.push(Tensor::zeros(format!("layer{k}.weight"), layer.param_shapes[0].clone()));
                    tensors.push(Tensor::zeros(format!("layer{k}.bias"), layer.param_shapes[1].clone()));
                }
                LayerSpec::BatchNorm => {
                    tensors.push(Tensor::filled(
                        format!("layer{k}.gamma"),
                        layer.param_shapes[0].clone(),
                        1.0,
                    ));
                    tensors.push(Tensor::zeros(format!("layer{k}.beta"), layer.param_shapes[1].clone()));
                    buffers.push(Tensor::zeros(
                        format!("layer{k}.running_mean"),
                        layer.buffer_shapes[0].clone(),
                    ));
                    buffers.push(Tensor::filled(
                        format!("layer{k}.running_var"),
                        layer.buffer_shapes[1].clone(),
                        1.0,
                    ));
                }
                _ => {}
            }
        }
        Ok(QNetworkParams {
            arch: arch.clone(),
            plan,
            tensors,
            buffers,
        })
    }

    /// Rebuilds a network from stored tensors, checking every name and shape.
    pub fn from_tensors(arch: &NetworkArchitecture, tensors: Vec<Tensor>, buffers: Vec<Tensor>) -> Result<Self> {
        let mut net = QNetworkParams::zeros(arch)?;
        check_layout(&net.tensors, &tensors, "parameter")?;
        check_layout(&net.buffers, &buffers, "buffer")?;
        net.tensors = tensors;
        net.buffers = buffers;
        net.check_finite()?;
        Ok(net)
    }

    pub fn architecture(&self) -> &NetworkArchitecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn num_actions(&self) -> usize {
        self.arch.output_units
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in self.tensors.iter().chain(&self.buffers) {
            if !kernels::all_finite(&t.values) {
                let v = t.values.iter().find(|v| !v.is_finite()).expect("non-finite value");
                return Err(Error::Numeric(format!("tensor {} holds {v}", t.name)));
            }
        }
        Ok(())
    }

    /// Overwrites every tensor with `other`'s values.
    pub fn copy_from(&mut self, other: &QNetworkParams) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Shape("cannot copy between different architectures".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.values.copy_from_slice(&src.values);
        }
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    /// Q-values for one observation, in inference mode.
    pub fn forward(&self, obs: &FlowShape) -> Result<Vec<f64>> {
        let input = self.encode(std::iter::once(obs))?;
        self.predict_batch(&input, 1)
    }

    /// Flattens observations into a `[batch, H*W]` input buffer.
    pub fn encode<'a>(&self, shapes: impl IntoIterator<Item = &'a FlowShape>) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in shapes {
            s.grid().check_same(&self.arch.input, "network input")?;
            out.extend(s.pixels().iter().map(|&p| p as f64));
        }
        Ok(out)
    }

    /// Inference-mode outputs for a batch, without keeping activations.
    pub fn predict_batch(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(input, batch)?;
        let mut x = input.to_vec();
        for (k, layer) in self.plan.iter().enumerate() {
            let (y, _) = self.layer_forward(k, layer, &x, batch, Mode::Inference);
            x = y;
        }
        check_outputs(&x)?;
        Ok(x)
    }

    /// Batched forward pass that records what [`Self::backward`] needs.
    pub fn forward_batch(&self, input: &[f64], batch: usize, mode: Mode) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input, batch)?;
        let mut cache = ForwardCache {
            batch,
            inputs: Vec::with_capacity(self.plan.len()),
            aux: Vec::with_capacity(self.plan.len()),
        };
        let mut x = input.to_vec();
        for (k, layer) in self.plan.iter().enumerate() {
            let (y, aux) = self.layer_forward(k, layer, &x, batch, mode);
            cache.inputs.push(x);
            cache.aux.push(aux);
            x = y;
        }
        check_outputs(&x)?;
        Ok((x, cache))
    }

    /// Folds the batch statistics seen in a training-mode pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, aux) in self.plan.iter().zip(&cache.aux) {
            if let Aux::Norm { mean, var, .. } = aux {
                let m = cache.batch * layer.in_dims.spatial();
                let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                let (rm, rv) = self.buffers.split_at_mut(layer.buffer_idx + 1);
                let rm = &mut rm[layer.buffer_idx].values;
                let rv = &mut rv[0].values;
                for c in 0..mean.len() {
                    rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
                    rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c] * unbias;
                }
            }
        }
    }

    /// Backpropagates `grad_out` (`[batch, outputs]`) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Gradients {
        let mut grads = self.zero_gradients();
        let n = cache.batch;
        let mut dy = grad_out.to_vec();
        for k in (0..self.plan.len()).rev() {
            let layer = &self.plan[k];
            let x = &cache.inputs[k];
            // Nothing upstream has parameters: the input gradient is unused.
            let need_dx = self.plan[..k].iter().any(|l| !l.param_shapes.is_empty());
            dy = match (&layer.spec, &cache.aux[k]) {
                (LayerSpec::FullyConnected { .. }, _) => {
                    let (dw, db) = grad_pair(&mut grads, layer.param_idx);
                    dense_backward(
                        x,
                        &dy,
                        &self.tensors[layer.param_idx].values,
                        dw,
                        db,
                        n,
                        layer.in_dims.len(),
                        layer.out_dims.len(),
                        need_dx,
                    )
                }
                (
                    LayerSpec::Convolution {
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    _,
                ) => {
                    let (dw, db) = grad_pair(&mut grads, layer.param_idx);
                    let g = ConvGeom::new(layer, *kernel, *stride, *padding);
                    conv_backward(x, &dy, &self.tensors[layer.param_idx].values, dw, db, n, &g, need_dx)
                }
                (LayerSpec::Relu, _) => dy.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
                (LayerSpec::MaxPool { .. }, Aux::Pool(argmax)) => {
                    let mut dx = vec![0.0; x.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += dy[o];
                    }
                    dx
                }
                (LayerSpec::BatchNorm, Aux::Norm { xhat, inv_std, .. }) => {
                    let (dgamma, dbeta) = grad_pair(&mut grads, layer.param_idx);
                    let gamma = &self.tensors[layer.param_idx].values;
                    batch_norm_backward(&dy, xhat, inv_std, gamma, dgamma, dbeta, n, layer.in_dims)
                }
                (LayerSpec::BatchNorm, _) => {
                    // Inference-mode normalization is a fixed affine map.
                    let (dgamma, dbeta) = grad_pair(&mut grads, layer.param_idx);
                    let gamma = &self.tensors[layer.param_idx].values;
                    let rm = &self.buffers[layer.buffer_idx].values;
                    let rv = &self.buffers[layer.buffer_idx + 1].values;
                    let (ch, sp) = (layer.in_dims.channels(), layer.in_dims.spatial());
                    let mut dx = vec![0.0; x.len()];
                    for b in 0..n {
                        for c in 0..ch {
                            let inv = 1.0 / (rv[c] + BN_EPS).sqrt();
                            for s in 0..sp {
                                let i = (b * ch + c) * sp + s;
                                dgamma[c] += dy[i] * (x[i] - rm[c]) * inv;
                                dbeta[c] += dy[i];
                                dx[i] = dy[i] * gamma[c] * inv;
                            }
                        }
                    }
                    dx
                }
                (LayerSpec::Flatten, _) => dy,
                (LayerSpec::MaxPool { .. }, _) => unreachable!("max-pool cache always records argmax"),
            };
        }
        grads
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<()> {
        let per = self.arch.input.cells();
        if batch == 0 || input.len() != batch * per {
            return Err(Error::Shape(format!(
                "input of {} values for batch {batch} of {per}-pixel observations",
                input.len()
            )));
        }
        Ok(())
    }

    fn layer_forward(&self, k: usize, layer: &PlannedLayer, x: &[f64], n: usize, mode: Mode) -> (Vec<f64>, Aux) {
        debug_assert_eq!(x.len(), n * layer.in_dims.len(), "layer {k}");
        match layer.spec {
            LayerSpec::FullyConnected { .. } => {
                let w = &self.tensors[layer.param_idx].values;
                let b = &self.tensors[layer.param_idx + 1].values;
                (
                    dense_forward(x, w, b, n, layer.in_dims.len(), layer.out_dims.len()),
                    Aux::None,
                )
            }
            LayerSpec::Convolution {
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = &self.tensors[layer.param_idx].values;
                let b = &self.tensors[layer.param_idx + 1].values;
                let g = ConvGeom::new(layer, kernel, stride, padding);
                (conv_forward(x, w, b, n, &g), Aux::None)
            }
            LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
            LayerSpec::Flatten => (x.to_vec(), Aux::None),
            LayerSpec::MaxPool { window } => {
                let (y, idx) = max_pool_forward(x, n, layer.in_dims, layer.out_dims, window);
                (y, Aux::Pool(idx))
            }
            LayerSpec::BatchNorm => {
                let gamma = &self.tensors[layer.param_idx].values;
                let beta = &self.tensors[layer.param_idx + 1].values;
                match mode {
                    Mode::Train => batch_norm_train(x, gamma, beta, n, layer.in_dims),
                    Mode::Inference => {
                        let rm = &self.buffers[layer.buffer_idx].values;
                        let rv = &self.buffers[layer.buffer_idx + 1].values;
                        (batch_norm_infer(x, gamma, beta, rm, rv, n, layer.in_dims), Aux::None)
                    }
                }
            }
        }
    }
}

fn check_layout(expected: &[Tensor], got: &[Tensor], what: &str) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "{} {what} tensors, architecture needs {}",
            got.len(),
            expected.len()
        )));
    }
    for (e, g) in expected.iter().zip(got) {
        if e.name != g.name || e.shape != g.shape || g.values.len() != e.values.len() {
            return Err(Error::Checkpoint(format!(
                "{what} tensor {} {:?} does not match architecture slot {} {:?}",
                g.name, g.shape, e.name, e.shape
            )));
        }
    }
    Ok(())
}

fn check_outputs(y: &[f64]) -> Result<()> {
    if !kernels::all_finite(y) {
        let v = y.iter().find(|v| !v.is_finite()).expect("non-finite value");
        return Err(Error::Numeric(format!("network produced {v}")));
    }
    Ok(())
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [fan_in, fan_out] => (*fan_in, *fan_out),
        [out_c, in_c, kh, kw] => (in_c * kh * kw, out_c * kh * kw),
        _ => unreachable!("weights are 2-D or 4-D"),
    }
}

fn grad_pair(grads: &mut Gradients, idx: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = grads.tensors.split_at_mut(idx + 1);
    (&mut a[idx].values, &mut b[0].values)
}

fn dense_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    kernels::dense_rows(&mut y, x, w, n, inp, out);
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    n: usize,
    inp: usize,
    out: usize,
    need_dx: bool,
) -> Vec<f64> {
    kernels::dense_weight_grad(dw, x, dy, n, inp, out);
    let mut dx = if need_dx { vec![0.0; n * inp] } else { Vec::new() };
    for s in 0..n {
        let g = &dy[s * out..(s + 1) * out];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        kernels::add_assign(db, g);
    }
    if need_dx {
        kernels::dense_input_grad(&mut dx, dy, w, n, inp, out);
    }
    dx
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(layer: &PlannedLayer, k: usize, stride: usize, pad: usize) -> Self {
        let (Dims::Spatial { c: cin, h, w }, Dims::Spatial { c: cout, h: ho, w: wo }) = (layer.in_dims, layer.out_dims)
        else {
            unreachable!("convolution is planned on spatial dims")
        };
        ConvGeom {
            cin,
            h,
            w,
            cout,
            ho,
            wo,
            k,
            stride,
            pad,
        }
    }

    /// Output positions whose input coordinate `o * stride + t - pad` lies
    /// in `0..limit`.
    fn valid(&self, t: usize, limit: usize, outputs: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(t).div_ceil(self.stride);
        let hi = (limit + self.pad).saturating_sub(t).div_ceil(self.stride).min(outputs);
        lo..hi.max(lo)
    }
}

fn conv_forward(x: &[f64], wt: &[f64], b: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_sp = g.ho * g.wo;
    let mut y = vec![0.0; n * g.cout * out_sp];
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        for co in 0..g.cout {
            let yo = &mut y[(s * g.cout + co) * out_sp..(s * g.cout + co + 1) * out_sp];
            yo.fill(b[co]);
            for ci in 0..g.cin {
                for ki in 0..g.k {
                    let rows = g.valid(ki, g.h, g.ho);
                    for kj in 0..g.k {
                        let wv = wt[((co * g.cin + ci) * g.k + ki) * g.k + kj];
                        let cols = g.valid(kj, g.w, g.wo);
                        for oi in rows.clone() {
                            let src = (ci * g.h + oi * g.stride + ki - g.pad) * g.w + kj;
                            let out = &mut yo[oi * g.wo..(oi + 1) * g.wo];
                            if g.stride == 1 {
                                let xr = &xs[src + cols.start - g.pad..src + cols.end - g.pad];
                                for (o, &xv) in out[cols.clone()].iter_mut().zip(xr) {
                                    *o += wv * xv;
                                }
                            } else {
                                for oj in cols.clone() {
                                    out[oj] += wv * xs[src + oj * g.stride - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    dy: &[f64],
    wt: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_sp = g.ho * g.wo;
    let mut dx = if need_dx { vec![0.0; n * in_len] } else { Vec::new() };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        for co in 0..g.cout {
            let go = &dy[(s * g.cout + co) * out_sp..(s * g.cout + co + 1) * out_sp];
            db[co] += go.iter().sum::<f64>();
            for ci in 0..g.cin {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let widx = ((co * g.cin + ci) * g.k + ki) * g.k + kj;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        let cols = g.valid(kj, g.w, g.wo);
                        for oi in g.valid(ki, g.h, g.ho) {
                            let src = (ci * g.h + oi * g.stride + ki - g.pad) * g.w + kj;
                            for oj in cols.clone() {
                                let xi = src + oj * g.stride - g.pad;
                                let gv = go[oi * g.wo + oj];
                                acc += gv * xs[xi];
                                if need_dx {
                                    dx[s * in_len + xi] += gv * wv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    dx
}

fn max_pool_forward(x: &[f64], n: usize, in_dims: Dims, out_dims: Dims, p: usize) -> (Vec<f64>, Vec<u32>) {
    let (Dims::Spatial { c, h, w }, Dims::Spatial { h: ho, w: wo, .. }) = (in_dims, out_dims) else {
        unreachable!("max-pool is planned on spatial dims")
    };
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                // Ties resolve to the first position in row-major window order.
                let mut best = base + oi * p * w + oj * p;
                for di in 0..p {
                    for dj in 0..p {
                        let at = base + (oi * p + di) * w + oj * p + dj;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

fn batch_norm_train(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, dims: Dims) -> (Vec<f64>, Aux) {
    let (ch, sp) = (dims.channels(), dims.spatial());
    let m = (n * sp) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for b in 0..n {
        for c in 0..ch {
            for s in 0..sp {
                mean[c] += x[(b * ch + c) * sp + s];
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for c in 0..ch {
            for s in 0..sp {
                let d = x[(b * ch + c) * sp + s] - mean[c];
                var[c] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for c in 0..ch {
            for s in 0..sp {
                let i = (b * ch + c) * sp + s;
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    (
        y,
        Aux::Norm {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

fn batch_norm_infer(x: &[f64], gamma: &[f64], beta: &[f64], rm: &[f64], rv: &[f64], n: usize, dims: Dims) -> Vec<f64> {
    let (ch, sp) = (dims.channels(), dims.spatial());
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for c in 0..ch {
            let inv = 1.0 / (rv[c] + BN_EPS).sqrt();
            for s in 0..sp {
                let i = (b * ch + c) * sp + s;
                y[i] = gamma[c] * (x[i] - rm[c]) * inv + beta[c];
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn batch_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    n: usize,
    dims: Dims,
) -> Vec<f64> {
    let (ch, sp) = (dims.channels(), dims.spatial());
    let m = (n * sp) as f64;
    let mut sum_dxhat = vec![0.0; ch];
    let mut sum_dxhat_xhat = vec![0.0; ch];
    for b in 0..n {
        for c in 0..ch {
            for s in 0..sp {
                let i = (b * ch + c) * sp + s;
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
                let dxh = dy[i] * gamma[c];
                sum_dxhat[c] += dxh;
                sum_dxhat_xhat[c] += dxh * xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for c in 0..ch {
            for s in 0..sp {
                let i = (b * ch + c) * sp + s;
                let dxh = dy[i] * gamma[c];
                dx[i] = inv_std[c] / m * (m * dxh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c]);
            }
        }
    }
    dx
}
