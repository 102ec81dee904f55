//! Layer graphs with reverse-mode differentiation.
//!
//! A `Graph` is a DAG of layers over one data input and an optional integer
//! time index. `forward` runs the graph for a whole batch and records the
//! activations on a `Tape`; `backward` replays the tape in reverse and
//! accumulates parameter gradients analytically.

mod descriptor;
mod kernels;
#[cfg(test)]
mod tests;

pub use descriptor::graph_from_descriptor;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::rng;
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// One layer kind plus its hyperparameters. The spec of a layer fully
/// determines its output shape from its input shape(s).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv1d { in_channels: usize, out_channels: usize, kernel: usize },
    LayerNorm { channels: usize },
    Silu,
    Relu,
    Sigmoid,
    NearestUpsample { factor: usize },
    StridedDownsample { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    SinusoidalTimeEmbedding { dim: usize },
    SkipConcat,
    BroadcastAdd,
    Reshape { dims: Vec<usize> },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::LayerNorm { .. } => "layer-norm",
            LayerSpec::Silu => "silu",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::NearestUpsample { .. } => "nearest-upsample",
            LayerSpec::StridedDownsample { .. } => "strided-downsample",
            LayerSpec::SinusoidalTimeEmbedding { .. } => "sinusoidal-time-embedding",
            LayerSpec::SkipConcat => "skip-concat",
            LayerSpec::BroadcastAdd => "broadcast-add",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerSpec::SkipConcat | LayerSpec::BroadcastAdd => 2,
            _ => 1,
        }
    }

    /// (weight shape, bias shape) for parameterized layers.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            LayerSpec::Dense { input, output } => Some((vec![*input, *output], vec![*output])),
            LayerSpec::Conv1d { in_channels, out_channels, kernel } => {
                Some((vec![*out_channels, *in_channels, *kernel], vec![*out_channels]))
            }
            LayerSpec::StridedDownsample { in_channels, out_channels, kernel, .. } => {
                Some((vec![*out_channels, *in_channels, *kernel], vec![*out_channels]))
            }
            LayerSpec::LayerNorm { channels } => Some((vec![*channels], vec![*channels])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { input, .. } => *input,
            LayerSpec::Conv1d { in_channels, kernel, .. } => in_channels * kernel,
            LayerSpec::StridedDownsample { in_channels, kernel, .. } => in_channels * kernel,
            _ => 1,
        }
    }
}

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Port {
    /// The graph's data input.
    Input,
    /// The integer time index (only consumed by the time embedding).
    Time,
    /// Output of an earlier node.
    Node(usize),
}

#[derive(Debug, Clone)]
pub struct LayerNode {
    pub spec: LayerSpec,
    pub inputs: Vec<Port>,
}

/// Shape attached to a port during inference. `TimeMarker` is the
/// pseudo-shape of the time input.
#[derive(Debug, Clone, PartialEq, Eq)]
enum PortShape {
    Tensor(Vec<usize>),
    TimeMarker,
}

const NORM_EPS: Real = 1e-5;

/// Per-sample layer-norm context saved for the backward pass.
#[derive(Debug, Clone)]
struct NormCtx {
    xhat: Tensor,
    inv_sigma: Vec<Real>,
}

/// Validated layer DAG; nodes are stored in topological order.
#[derive(Debug, Clone)]
pub struct Graph {
    prefix: String,
    nodes: Vec<LayerNode>,
    shapes: Vec<Vec<usize>>,
    output: usize,
    input_shape: Vec<usize>,
    uses_time: bool,
}

pub struct GraphBuilder {
    input_shape: Vec<usize>,
    nodes: Vec<LayerNode>,
    shapes: Vec<Vec<usize>>,
    uses_time: bool,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        GraphBuilder { input_shape, nodes: Vec::new(), shapes: Vec::new(), uses_time: false }
    }

    fn port_shape(&self, port: Port) -> Result<PortShape> {
        match port {
            Port::Input => Ok(PortShape::Tensor(self.input_shape.clone())),
            Port::Time => Ok(PortShape::TimeMarker),
            Port::Node(i) => {
                if i >= self.nodes.len() {
                    return Err(Error::config(format!("node reference @{i} out of range")));
                }
                Ok(PortShape::Tensor(self.shapes[i].clone()))
            }
        }
    }

    /// Append a layer; returns a port for its output.
    pub fn add(&mut self, spec: LayerSpec, inputs: &[Port]) -> Result<Port> {
        if inputs.len() != spec.arity() {
            return Err(Error::config(format!(
                "{} expects {} input(s), got {}",
                spec.kind_name(),
                spec.arity(),
                inputs.len()
            )));
        }
        let shapes = inputs.iter().map(|&p| self.port_shape(p)).collect::<Result<Vec<_>>>()?;
        let out_shape = infer_shape(&spec, &shapes)?;
        if matches!(spec, LayerSpec::SinusoidalTimeEmbedding { .. }) {
            self.uses_time = true;
        }
        let idx = self.nodes.len();
        self.nodes.push(LayerNode { spec, inputs: inputs.to_vec() });
        self.shapes.push(out_shape);
        Ok(Port::Node(idx))
    }

    pub fn finish(self, output: Port, prefix: &str) -> Result<Graph> {
        let output = match output {
            Port::Node(i) if i < self.nodes.len() => i,
            _ => return Err(Error::config("graph output must be a node".to_string())),
        };
        Ok(Graph {
            prefix: prefix.to_string(),
            nodes: self.nodes,
            shapes: self.shapes,
            output,
            input_shape: self.input_shape,
            uses_time: self.uses_time,
        })
    }
}

fn infer_shape(spec: &LayerSpec, inputs: &[PortShape]) -> Result<Vec<usize>> {
    let cfg = |msg: String| Error::Config(msg);
    let tensor_in = |i: usize| -> Result<&Vec<usize>> {
        match &inputs[i] {
            PortShape::Tensor(s) => Ok(s),
            PortShape::TimeMarker => Err(cfg(format!(
                "{} cannot consume the time index",
                spec.kind_name()
            ))),
        }
    };
    match spec {
        LayerSpec::Dense { input, output } => {
            let s = tensor_in(0)?;
            if s.as_slice() != [*input] {
                return Err(cfg(format!("dense expects input [{input}], got {s:?}")));
            }
            Ok(vec![*output])
        }
        LayerSpec::Conv1d { in_channels, out_channels, kernel } => {
            if kernel % 2 == 0 {
                return Err(cfg(format!("conv1d kernel width must be odd, got {kernel}")));
            }
            let s = tensor_in(0)?;
            if s.len() != 2 || s[0] != *in_channels {
                return Err(cfg(format!(
                    "conv1d expects input [{in_channels}, L], got {s:?}"
                )));
            }
            Ok(vec![*out_channels, s[1]])
        }
        LayerSpec::StridedDownsample { in_channels, out_channels, kernel, stride } => {
            if kernel % 2 == 0 {
                return Err(cfg(format!("downsample kernel width must be odd, got {kernel}")));
            }
            if *stride < 1 {
                return Err(cfg("downsample stride must be >= 1".to_string()));
            }
            let s = tensor_in(0)?;
            if s.len() != 2 || s[0] != *in_channels {
                return Err(cfg(format!(
                    "downsample expects input [{in_channels}, L], got {s:?}"
                )));
            }
            let lout = (s[1] + 2 * (kernel / 2) - kernel) / stride + 1;
            Ok(vec![*out_channels, lout])
        }
        LayerSpec::LayerNorm { channels } => {
            let s = tensor_in(0)?;
            let ok = match s.len() {
                1 => s[0] == *channels,
                2 => s[0] == *channels,
                _ => false,
            };
            if !ok {
                return Err(cfg(format!(
                    "layer-norm over {channels} channels cannot apply to {s:?}"
                )));
            }
            Ok(s.clone())
        }
        LayerSpec::Silu | LayerSpec::Relu | LayerSpec::Sigmoid => Ok(tensor_in(0)?.clone()),
        LayerSpec::NearestUpsample { factor } => {
            if *factor < 1 {
                return Err(cfg("upsample factor must be >= 1".to_string()));
            }
            let s = tensor_in(0)?;
            if s.len() != 2 {
                return Err(cfg(format!("nearest-upsample expects [C, L], got {s:?}")));
            }
            Ok(vec![s[0], s[1] * factor])
        }
        LayerSpec::SinusoidalTimeEmbedding { dim } => {
            if *dim < 4 || dim % 2 != 0 {
                return Err(cfg(format!("time embedding dim must be even and >= 4, got {dim}")));
            }
            match inputs[0] {
                PortShape::TimeMarker => Ok(vec![*dim]),
                _ => Err(cfg("time embedding must read the time port".to_string())),
            }
        }
        LayerSpec::SkipConcat => {
            let a = tensor_in(0)?;
            let b = tensor_in(1)?;
            match (a.len(), b.len()) {
                (1, 1) => Ok(vec![a[0] + b[0]]),
                (2, 2) if a[1] == b[1] => Ok(vec![a[0] + b[0], a[1]]),
                _ => Err(cfg(format!("skip-concat cannot join {a:?} and {b:?}"))),
            }
        }
        LayerSpec::BroadcastAdd => {
            let a = tensor_in(0)?;
            let b = tensor_in(1)?;
            if a == b {
                Ok(a.clone())
            } else if a.len() == 2 && b.len() == 1 && a[0] == b[0] {
                Ok(a.clone())
            } else {
                Err(cfg(format!("broadcast-add cannot join {a:?} and {b:?}")))
            }
        }
        LayerSpec::Reshape { dims } => {
            let s = tensor_in(0)?;
            let from: usize = s.iter().product();
            let to: usize = dims.iter().product();
            if from != to {
                return Err(cfg(format!("reshape {s:?} -> {dims:?} changes element count")));
            }
            Ok(dims.clone())
        }
    }
}

/// Activation record from one forward pass, consumed by `backward`.
#[derive(Debug)]
pub struct Tape {
    input: Tensor,
    values: Vec<Tensor>,
    norm_ctx: Vec<Option<NormCtx>>,
    batch: usize,
    consumed: bool,
}

impl Tape {
    /// Output value of an intermediate node (testing/diagnostics).
    pub fn node_value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }
}

impl Graph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes[self.output]
    }

    pub fn uses_time(&self) -> bool {
        self.uses_time
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn weight_name(&self, idx: usize) -> String {
        format!("{}n{:03}.weight", self.prefix, idx)
    }

    fn bias_name(&self, idx: usize) -> String {
        format!("{}n{:03}.bias", self.prefix, idx)
    }

    /// Number of scalar parameters the graph owns.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.spec.param_shapes())
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    /// Define this graph's parameters. Dense/conv weights draw from
    /// Normal(0, 2/fan_in), biases start at zero, norm gains at one.
    pub fn init_params(&self, params: &mut ParameterSet, seed: u64) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some((wshape, bshape)) = node.spec.param_shapes() else { continue };
            match node.spec {
                LayerSpec::LayerNorm { .. } => {
                    params.define(self.weight_name(idx), Tensor::full(wshape, 1.0))?;
                    params.define(self.bias_name(idx), Tensor::zeros(bshape))?;
                }
                _ => {
                    let std = (2.0 / node.spec.fan_in() as Real).sqrt();
                    let mut r = rng::rng_from(seed, &[0x1217, idx as u64]);
                    let n: usize = wshape.iter().product();
                    let data: Vec<Real> =
                        (0..n).map(|_| std * r.sample::<Real, _>(StandardNormal)).collect();
                    params.define(self.weight_name(idx), Tensor::new(wshape, data)?)?;
                    params.define(self.bias_name(idx), Tensor::zeros(bshape))?;
                }
            }
        }
        Ok(())
    }

    fn resolve_params(&self, params: &ParameterSet) -> Result<Vec<Option<(usize, usize)>>> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(idx, node)| {
                if node.spec.param_shapes().is_none() {
                    return Ok(None);
                }
                let w = params.id_of(&self.weight_name(idx)).ok_or_else(|| {
                    Error::config(format!("missing parameter {}", self.weight_name(idx)))
                })?;
                let b = params.id_of(&self.bias_name(idx)).ok_or_else(|| {
                    Error::config(format!("missing parameter {}", self.bias_name(idx)))
                })?;
                Ok(Some((w, b)))
            })
            .collect()
    }

    /// Run the graph over a batch. `input` is `[batch, ...input_shape]`;
    /// `time` carries one integer step per batch row and must be present
    /// exactly when the graph contains a time embedding.
    pub fn forward(
        &self,
        params: &ParameterSet,
        input: &Tensor,
        time: Option<&[usize]>,
    ) -> Result<(Tensor, Tape)> {
        let batch = self.check_input(input, time)?;
        let ids = self.resolve_params(params)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut norm_ctx: Vec<Option<NormCtx>> = vec![None; self.nodes.len()];

        for (idx, node) in self.nodes.iter().enumerate() {
            let fetch = |port: Port| -> &Tensor {
                match port {
                    Port::Input => input,
                    Port::Node(i) => &values[i],
                    Port::Time => unreachable!("time port is handled by the embedding"),
                }
            };
            let out = match &node.spec {
                LayerSpec::SinusoidalTimeEmbedding { dim } => {
                    time_embedding(time.expect("validated"), *dim)
                }
                spec => {
                    let a = fetch(node.inputs[0]);
                    match spec {
                        LayerSpec::Dense { input: n_in, output: n_out } => {
                            let (w, b) = ids[idx].expect("dense has params");
                            let mut y = Tensor::zeros(vec![batch, *n_out]);
                            kernels::dense_forward(
                                a.data(),
                                params.value(w).data(),
                                params.value(b).data(),
                                batch,
                                *n_in,
                                *n_out,
                                y.data_mut(),
                            );
                            y
                        }
                        LayerSpec::Conv1d { in_channels, out_channels, kernel } => {
                            let (w, b) = ids[idx].expect("conv has params");
                            let lin = a.shape()[2];
                            let mut y = Tensor::zeros(vec![batch, *out_channels, lin]);
                            kernels::conv1d_forward(
                                a.data(),
                                params.value(w).data(),
                                params.value(b).data(),
                                batch,
                                *in_channels,
                                *out_channels,
                                lin,
                                *kernel,
                                1,
                                lin,
                                y.data_mut(),
                            );
                            y
                        }
                        LayerSpec::StridedDownsample {
                            in_channels,
                            out_channels,
                            kernel,
                            stride,
                        } => {
                            let (w, b) = ids[idx].expect("downsample has params");
                            let lin = a.shape()[2];
                            let lout = self.shapes[idx][1];
                            let mut y = Tensor::zeros(vec![batch, *out_channels, lout]);
                            kernels::conv1d_forward(
                                a.data(),
                                params.value(w).data(),
                                params.value(b).data(),
                                batch,
                                *in_channels,
                                *out_channels,
                                lin,
                                *kernel,
                                *stride,
                                lout,
                                y.data_mut(),
                            );
                            y
                        }
                        LayerSpec::LayerNorm { .. } => {
                            let (w, b) = ids[idx].expect("norm has params");
                            let (y, ctx) = layer_norm_forward(
                                a,
                                params.value(w).data(),
                                params.value(b).data(),
                                batch,
                            );
                            norm_ctx[idx] = Some(ctx);
                            y
                        }
                        LayerSpec::Silu => a.map(|x| x * sigmoid(x)),
                        LayerSpec::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
                        LayerSpec::Sigmoid => a.map(sigmoid),
                        LayerSpec::NearestUpsample { factor } => upsample_forward(a, *factor),
                        LayerSpec::SkipConcat => {
                            concat_forward(a, fetch(node.inputs[1]), batch)
                        }
                        LayerSpec::BroadcastAdd => {
                            broadcast_add_forward(a, fetch(node.inputs[1]), batch)
                        }
                        LayerSpec::Reshape { dims } => {
                            let mut shape = vec![batch];
                            shape.extend_from_slice(dims);
                            a.reshape(shape)?
                        }
                        LayerSpec::SinusoidalTimeEmbedding { .. } => unreachable!(),
                    }
                }
            };
            out.check_finite(&format!("{} (node {})", node.spec.kind_name(), idx))?;
            values.push(out);
        }

        let output = values[self.output].clone();
        Ok((output, Tape { input: input.clone(), values, norm_ctx, batch, consumed: false }))
    }

    fn check_input(&self, input: &Tensor, time: Option<&[usize]>) -> Result<usize> {
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape {
            return Err(Error::config(format!(
                "graph expects input [batch, {:?}], got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let batch = input.shape()[0];
        match (self.uses_time, time) {
            (true, Some(t)) if t.len() == batch => {}
            (true, Some(t)) => {
                return Err(Error::config(format!(
                    "time index length {} does not match batch {batch}",
                    t.len()
                )))
            }
            (true, None) => {
                return Err(Error::config("graph contains a time embedding but no time index was given".to_string()))
            }
            (false, Some(_)) => {
                return Err(Error::config("graph has no time embedding but a time index was given".to_string()))
            }
            (false, None) => {}
        }
        Ok(batch)
    }

    /// Reverse pass. Accumulates parameter gradients into `params` and
    /// returns the gradient with respect to the graph input.
    pub fn backward(
        &self,
        params: &mut ParameterSet,
        tape: &mut Tape,
        output_gradient: &Tensor,
    ) -> Result<Tensor> {
        if tape.consumed {
            return Err(Error::usage("tape already consumed by a previous backward".to_string()));
        }
        tape.consumed = true;
        let batch = tape.batch;
        if output_gradient.shape() != tape.values[self.output].shape() {
            return Err(Error::usage(format!(
                "output gradient shape {:?} does not match output {:?}",
                output_gradient.shape(),
                tape.values[self.output].shape()
            )));
        }
        let ids = self.resolve_params(params)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut input_grad = Tensor::zeros(tape.input.shape().to_vec());
        grads[self.output] = Some(output_gradient.clone());

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let value_of = |port: Port| -> &Tensor {
                match port {
                    Port::Input => &tape.input,
                    Port::Node(i) => &tape.values[i],
                    Port::Time => unreachable!(),
                }
            };
            // gradient(s) w.r.t. this node's tensor inputs, in input order
            let din: Vec<Option<Tensor>> = match &node.spec {
                LayerSpec::Dense { input: n_in, output: n_out } => {
                    let (wid, bid) = ids[idx].expect("dense has params");
                    let x = value_of(node.inputs[0]);
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let (w, dw, db) = params.entry_pair_mut(wid, bid);
                    kernels::dense_backward(
                        x.data(),
                        w.data(),
                        dy.data(),
                        batch,
                        *n_in,
                        *n_out,
                        dx.data_mut(),
                        dw.data_mut(),
                        db.data_mut(),
                    );
                    vec![Some(dx)]
                }
                LayerSpec::Conv1d { in_channels, out_channels, kernel } => {
                    let (wid, bid) = ids[idx].expect("conv has params");
                    let x = value_of(node.inputs[0]);
                    let lin = x.shape()[2];
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let (w, dw, db) = params.entry_pair_mut(wid, bid);
                    kernels::conv1d_backward(
                        x.data(),
                        w.data(),
                        dy.data(),
                        batch,
                        *in_channels,
                        *out_channels,
                        lin,
                        *kernel,
                        1,
                        lin,
                        dx.data_mut(),
                        dw.data_mut(),
                        db.data_mut(),
                    );
                    vec![Some(dx)]
                }
                LayerSpec::StridedDownsample { in_channels, out_channels, kernel, stride } => {
                    let (wid, bid) = ids[idx].expect("downsample has params");
                    let x = value_of(node.inputs[0]);
                    let lin = x.shape()[2];
                    let lout = self.shapes[idx][1];
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let (w, dw, db) = params.entry_pair_mut(wid, bid);
                    kernels::conv1d_backward(
                        x.data(),
                        w.data(),
                        dy.data(),
                        batch,
                        *in_channels,
                        *out_channels,
                        lin,
                        *kernel,
                        *stride,
                        lout,
                        dx.data_mut(),
                        dw.data_mut(),
                        db.data_mut(),
                    );
                    vec![Some(dx)]
                }
                LayerSpec::LayerNorm { channels } => {
                    let (wid, bid) = ids[idx].expect("norm has params");
                    let ctx = tape.norm_ctx[idx].as_ref().expect("norm context recorded");
                    let (gain, dgain, dbias) = params.entry_pair_mut(wid, bid);
                    let dx = layer_norm_backward(
                        &dy,
                        ctx,
                        gain.data(),
                        *channels,
                        batch,
                        dgain.data_mut(),
                        dbias.data_mut(),
                    );
                    vec![Some(dx)]
                }
                LayerSpec::Silu => {
                    let x = value_of(node.inputs[0]);
                    let mut dx = dy.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        let s = sigmoid(xv);
                        *d *= s * (1.0 + xv * (1.0 - s));
                    }
                    vec![Some(dx)]
                }
                LayerSpec::Relu => {
                    let x = value_of(node.inputs[0]);
                    let mut dx = dy.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    vec![Some(dx)]
                }
                LayerSpec::Sigmoid => {
                    let y = &tape.values[idx];
                    let mut dx = dy.clone();
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (1.0 - yv);
                    }
                    vec![Some(dx)]
                }
                LayerSpec::NearestUpsample { factor } => {
                    let x = value_of(node.inputs[0]);
                    vec![Some(upsample_backward(&dy, x.shape(), *factor))]
                }
                LayerSpec::SinusoidalTimeEmbedding { .. } => vec![None],
                LayerSpec::SkipConcat => {
                    let a = value_of(node.inputs[0]);
                    let b = value_of(node.inputs[1]);
                    let (da, db) = concat_backward(&dy, a.shape(), b.shape(), batch);
                    vec![Some(da), Some(db)]
                }
                LayerSpec::BroadcastAdd => {
                    let b = value_of(node.inputs[1]);
                    let db = broadcast_add_backward_side(&dy, b.shape(), batch);
                    vec![Some(dy.clone()), Some(db)]
                }
                LayerSpec::Reshape { .. } => {
                    let x = value_of(node.inputs[0]);
                    vec![Some(dy.reshape(x.shape().to_vec())?)]
                }
            };

            for (port, d) in node.inputs.iter().zip(din) {
                let Some(d) = d else { continue };
                match port {
                    Port::Input => accumulate(&mut input_grad, &d),
                    Port::Node(i) => match &mut grads[*i] {
                        Some(g) => accumulate(g, &d),
                        slot @ None => *slot = Some(d),
                    },
                    Port::Time => {}
                }
            }
        }
        Ok(input_grad)
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

/// Sinusoidal embedding of integer steps: [sin(t*f_i) .. cos(t*f_i) ..]
/// with geometrically spaced frequencies from 1 down to 1/10000.
fn time_embedding(time: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let batch = time.len();
    let mut data = vec![0.0; batch * dim];
    let denom = if half > 1 { (half - 1) as Real } else { 1.0 };
    for (b, &t) in time.iter().enumerate() {
        let row = &mut data[b * dim..(b + 1) * dim];
        for i in 0..half {
            let freq = (-(10000.0_f64.ln() as Real) * i as Real / denom).exp();
            let arg = t as Real * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
    }
    Tensor::new(vec![batch, dim], data).expect("shape consistent")
}

/// Per-sample normalization over all non-batch elements, per-channel affine.
fn layer_norm_forward(x: &Tensor, gain: &[Real], bias: &[Real], batch: usize) -> (Tensor, NormCtx) {
    let per = x.numel() / batch;
    let channels = gain.len();
    let tail = per / channels; // elements per channel (1 for vectors)
    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    let mut inv_sigma = vec![0.0; batch];
    for b in 0..batch {
        let xs = &x.data()[b * per..(b + 1) * per];
        let mean = xs.iter().sum::<Real>() / per as Real;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / per as Real;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_sigma[b] = inv;
        let xh = &mut xhat.data_mut()[b * per..(b + 1) * per];
        for (h, &v) in xh.iter_mut().zip(xs) {
            *h = (v - mean) * inv;
        }
        let ys = &mut y.data_mut()[b * per..(b + 1) * per];
        for c in 0..channels {
            let (g, be) = (gain[c], bias[c]);
            for l in 0..tail {
                ys[c * tail + l] = g * xh[c * tail + l] + be;
            }
        }
    }
    (y, NormCtx { xhat, inv_sigma })
}

fn layer_norm_backward(
    dy: &Tensor,
    ctx: &NormCtx,
    gain: &[Real],
    channels: usize,
    batch: usize,
    dgain: &mut [Real],
    dbias: &mut [Real],
) -> Tensor {
    let per = dy.numel() / batch;
    let tail = per / channels;
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    for b in 0..batch {
        let dys = &dy.data()[b * per..(b + 1) * per];
        let xh = &ctx.xhat.data()[b * per..(b + 1) * per];
        let inv = ctx.inv_sigma[b];
        // g = dy * gain (per channel); dx = (g - mean(g) - xhat*mean(g*xhat)) * inv
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..channels {
            let g = gain[c];
            for l in 0..tail {
                let idx = c * tail + l;
                let gv = dys[idx] * g;
                m1 += gv;
                m2 += gv * xh[idx];
                dgain[c] += dys[idx] * xh[idx];
                dbias[c] += dys[idx];
            }
        }
        m1 /= per as Real;
        m2 /= per as Real;
        let dxs = &mut dx.data_mut()[b * per..(b + 1) * per];
        for c in 0..channels {
            let g = gain[c];
            for l in 0..tail {
                let idx = c * tail + l;
                dxs[idx] = (dys[idx] * g - m1 - xh[idx] * m2) * inv;
            }
        }
    }
    dx
}

fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let (batch, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lo = l * factor;
    let mut y = Tensor::zeros(vec![batch, c, lo]);
    for bc in 0..batch * c {
        let src = &x.data()[bc * l..(bc + 1) * l];
        let dst = &mut y.data_mut()[bc * lo..(bc + 1) * lo];
        for (j, &v) in src.iter().enumerate() {
            dst[j * factor..(j + 1) * factor].fill(v);
        }
    }
    y
}

fn upsample_backward(dy: &Tensor, in_shape: &[usize], factor: usize) -> Tensor {
    let (batch, c, l) = (in_shape[0], in_shape[1], in_shape[2]);
    let lo = l * factor;
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for bc in 0..batch * c {
        let src = &dy.data()[bc * lo..(bc + 1) * lo];
        let dst = &mut dx.data_mut()[bc * l..(bc + 1) * l];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[j * factor..(j + 1) * factor].iter().sum();
        }
    }
    dx
}

fn concat_forward(a: &Tensor, b: &Tensor, batch: usize) -> Tensor {
    let pa = a.numel() / batch;
    let pb = b.numel() / batch;
    let mut shape = a.shape().to_vec();
    shape[1] += b.shape()[1];
    let mut y = Tensor::zeros(shape);
    let per = pa + pb;
    for i in 0..batch {
        y.data_mut()[i * per..i * per + pa].copy_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        y.data_mut()[i * per + pa..(i + 1) * per].copy_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    y
}

fn concat_backward(dy: &Tensor, a_shape: &[usize], b_shape: &[usize], batch: usize) -> (Tensor, Tensor) {
    let pa: usize = a_shape[1..].iter().product();
    let pb: usize = b_shape[1..].iter().product();
    let per = pa + pb;
    let mut da = Tensor::zeros(a_shape.to_vec());
    let mut db = Tensor::zeros(b_shape.to_vec());
    for i in 0..batch {
        da.data_mut()[i * pa..(i + 1) * pa].copy_from_slice(&dy.data()[i * per..i * per + pa]);
        db.data_mut()[i * pb..(i + 1) * pb].copy_from_slice(&dy.data()[i * per + pa..(i + 1) * per]);
    }
    (da, db)
}

fn broadcast_add_forward(a: &Tensor, b: &Tensor, batch: usize) -> Tensor {
    let mut y = a.clone();
    if a.shape() == b.shape() {
        for (d, &s) in y.data_mut().iter_mut().zip(b.data()) {
            *d += s;
        }
        return y;
    }
    // a: [batch, C, L], b: [batch, C]
    let (c, l) = (a.shape()[1], a.shape()[2]);
    for bi in 0..batch {
        for ci in 0..c {
            let add = b.data()[bi * c + ci];
            let row = &mut y.data_mut()[(bi * c + ci) * l..][..l];
            for v in row {
                *v += add;
            }
        }
    }
    y
}

fn broadcast_add_backward_side(dy: &Tensor, b_shape: &[usize], batch: usize) -> Tensor {
    if dy.shape() == b_shape {
        return dy.clone();
    }
    let (c, l) = (dy.shape()[1], dy.shape()[2]);
    let mut db = Tensor::zeros(b_shape.to_vec());
    for bi in 0..batch {
        for ci in 0..c {
            let row = &dy.data()[(bi * c + ci) * l..][..l];
            db.data_mut()[bi * c + ci] = row.iter().sum();
        }
    }
    db
}

