//! The layer vocabulary: convolutions (standard and separable), batch
//! normalization, activations, pooling, dense, softmax and residual blocks.
//!
//! All convolutions are same-padded, stride 1; all downsampling happens in
//! pooling layers. A separable convolution applies the 1×1 pointwise stage
//! first and the per-channel spatial stage second, with a single bias after
//! the depthwise stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Id, Tape};
use crate::tensor::{he_normal_init, Tensor};

pub const LEAKY_RELU_ALPHA: f64 = 0.1;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d { k: usize, c_out: usize },
    SeparableConv2d { k: usize, c_out: usize },
    BatchNorm,
    Relu,
    LeakyRelu,
    MaxPool { k: usize },
    GlobalAvgPool,
    Flatten,
    Dense { units: usize },
    Softmax,
    /// `relu(body(x) + skip(x))` with a 1×1 channel projection on the skip
    /// when the body changes the channel count.
    Residual { body: Vec<Layer> },
}

/// Per-sample shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat { d: usize },
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Spatial { h, w, c } => write!(f, "{h} x {w} x {c}"),
            Shape::Flat { d } => write!(f, "{d}"),
        }
    }
}

impl Layer {
    /// Output shape as a pure function of input shape and hyperparameters.
    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        use Layer::*;
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                Shape::Spatial { h, w, c } => Ok((h, w, c)),
                Shape::Flat { .. } => {
                    Err(Error::ShapeMismatch(format!("{what} needs a spatial input, got {input}")))
                }
            }
        };
        match self {
            Conv2d { k, c_out } | SeparableConv2d { k, c_out } => {
                let (h, w, _) = spatial("conv")?;
                if k % 2 == 0 {
                    return Err(Error::InvalidArgument(format!("conv kernel must be odd, got {k}")));
                }
                Ok(Shape::Spatial { h, w, c: *c_out })
            }
            BatchNorm | Relu | LeakyRelu => Ok(input),
            MaxPool { k } => {
                let (h, w, c) = spatial("maxpool")?;
                if *k == 0 || h % k != 0 || w % k != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "maxpool window {k} does not divide {h}x{w}"
                    )));
                }
                Ok(Shape::Spatial { h: h / k, w: w / k, c })
            }
            GlobalAvgPool => {
                let (_, _, c) = spatial("global_avg_pool")?;
                Ok(Shape::Flat { d: c })
            }
            Flatten => match input {
                Shape::Spatial { h, w, c } => Ok(Shape::Flat { d: h * w * c }),
                Shape::Flat { .. } => Ok(input),
            },
            Dense { units } => match input {
                Shape::Flat { .. } => Ok(Shape::Flat { d: *units }),
                Shape::Spatial { .. } => {
                    Err(Error::ShapeMismatch("dense needs a flat input".into()))
                }
            },
            Softmax => match input {
                Shape::Flat { .. } => Ok(input),
                Shape::Spatial { .. } => {
                    Err(Error::ShapeMismatch("softmax needs a flat input".into()))
                }
            },
            Residual { body } => {
                let (h, w, _) = spatial("residual")?;
                let out = out_shape_stack(body, input)?;
                match out {
                    Shape::Spatial { h: oh, w: ow, .. } if oh == h && ow == w => Ok(out),
                    _ => Err(Error::ShapeMismatch(format!(
                        "residual body must preserve spatial dims, {input} -> {out}"
                    ))),
                }
            }
        }
    }

    /// Trainable parameter count. Batch norm counts gamma and beta;
    /// a residual skip projection counts its 1×1 kernel.
    pub fn param_count(&self, input: Shape) -> Result<usize> {
        use Layer::*;
        let c_in = match input {
            Shape::Spatial { c, .. } => c,
            Shape::Flat { d } => d,
        };
        Ok(match self {
            Conv2d { k, c_out } => k * k * c_in * c_out + c_out,
            SeparableConv2d { k, c_out } => c_in * c_out + k * k * c_out + c_out,
            BatchNorm => 2 * c_in,
            Dense { units } => c_in * units + units,
            Residual { body } => {
                let mut total = 0;
                let mut shape = input;
                for l in body {
                    total += l.param_count(shape)?;
                    shape = l.out_shape(shape)?;
                }
                let c_out = match shape {
                    Shape::Spatial { c, .. } => c,
                    Shape::Flat { d } => d,
                };
                if c_out != c_in {
                    total += c_in * c_out;
                }
                total
            }
            _ => 0,
        })
    }
}

pub fn out_shape_stack(layers: &[Layer], input: Shape) -> Result<Shape> {
    let mut shape = input;
    for l in layers {
        shape = l.out_shape(shape)?;
    }
    Ok(shape)
}

pub fn param_count_stack(layers: &[Layer], input: Shape) -> Result<usize> {
    let mut shape = input;
    let mut total = 0;
    for l in layers {
        total += l.param_count(shape)?;
        shape = l.out_shape(shape)?;
    }
    Ok(total)
}

/// Learned state per layer, aligned one-to-one with a [`Layer`] list.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv2d {
        kernel: Tensor<f32>,
        bias: Tensor<f32>,
    },
    Separable {
        pointwise: Tensor<f32>,
        depthwise: Tensor<f32>,
        bias: Tensor<f32>,
    },
    BatchNorm {
        gamma: Tensor<f32>,
        beta: Tensor<f32>,
        running_mean: Tensor<f32>,
        running_var: Tensor<f32>,
    },
    Dense {
        w: Tensor<f32>,
        b: Tensor<f32>,
    },
    Residual {
        body: Vec<LayerParams>,
        projection: Option<Tensor<f32>>,
    },
    None,
}

impl LayerParams {
    /// Visit every tensor with a dotted name; `trainable` is false for
    /// batch-norm running statistics.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<f32>, bool)) {
        match self {
            LayerParams::Conv2d { kernel, bias } => {
                f(format!("{prefix}.kernel"), kernel, true);
                f(format!("{prefix}.bias"), bias, true);
            }
            LayerParams::Separable { pointwise, depthwise, bias } => {
                f(format!("{prefix}.pointwise"), pointwise, true);
                f(format!("{prefix}.depthwise"), depthwise, true);
                f(format!("{prefix}.bias"), bias, true);
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                f(format!("{prefix}.gamma"), gamma, true);
                f(format!("{prefix}.beta"), beta, true);
                f(format!("{prefix}.running_mean"), running_mean, false);
                f(format!("{prefix}.running_var"), running_var, false);
            }
            LayerParams::Dense { w, b } => {
                f(format!("{prefix}.w"), w, true);
                f(format!("{prefix}.b"), b, true);
            }
            LayerParams::Residual { body, projection } => {
                for (i, p) in body.iter().enumerate() {
                    p.visit(&format!("{prefix}.body{i}"), f);
                }
                if let Some(proj) = projection {
                    f(format!("{prefix}.projection"), proj, true);
                }
            }
            LayerParams::None => {}
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f32>, bool)) {
        match self {
            LayerParams::Conv2d { kernel, bias } => {
                f(format!("{prefix}.kernel"), kernel, true);
                f(format!("{prefix}.bias"), bias, true);
            }
            LayerParams::Separable { pointwise, depthwise, bias } => {
                f(format!("{prefix}.pointwise"), pointwise, true);
                f(format!("{prefix}.depthwise"), depthwise, true);
                f(format!("{prefix}.bias"), bias, true);
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                f(format!("{prefix}.gamma"), gamma, true);
                f(format!("{prefix}.beta"), beta, true);
                f(format!("{prefix}.running_mean"), running_mean, false);
                f(format!("{prefix}.running_var"), running_var, false);
            }
            LayerParams::Dense { w, b } => {
                f(format!("{prefix}.w"), w, true);
                f(format!("{prefix}.b"), b, true);
            }
            LayerParams::Residual { body, projection } => {
                for (i, p) in body.iter_mut().enumerate() {
                    p.visit_mut(&format!("{prefix}.body{i}"), f);
                }
                if let Some(proj) = projection {
                    f(format!("{prefix}.projection"), proj, true);
                }
            }
            LayerParams::None => {}
        }
    }
}

/// Initialize parameters for a layer stack: He-normal weights, zero biases,
/// unit gamma / zero beta and identity running statistics for batch norm.
pub fn init_params(layers: &[Layer], input: Shape, rng: &mut Rng) -> Result<Vec<LayerParams>> {
    let mut shape = input;
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let c_in = match shape {
            Shape::Spatial { c, .. } => c,
            Shape::Flat { d } => d,
        };
        let p = match l {
            Layer::Conv2d { k, c_out } => LayerParams::Conv2d {
                kernel: he_normal_init(rng, vec![*k, *k, c_in, *c_out], k * k * c_in)?,
                bias: Tensor::zeros(vec![*c_out]),
            },
            Layer::SeparableConv2d { k, c_out } => LayerParams::Separable {
                pointwise: he_normal_init(rng, vec![1, 1, c_in, *c_out], c_in)?,
                depthwise: he_normal_init(rng, vec![*k, *k, *c_out], k * k)?,
                bias: Tensor::zeros(vec![*c_out]),
            },
            Layer::BatchNorm => LayerParams::BatchNorm {
                gamma: Tensor::full(vec![c_in], 1.0),
                beta: Tensor::zeros(vec![c_in]),
                running_mean: Tensor::zeros(vec![c_in]),
                running_var: Tensor::full(vec![c_in], 1.0),
            },
            Layer::Dense { units } => LayerParams::Dense {
                w: he_normal_init(rng, vec![c_in, *units], c_in)?,
                b: Tensor::zeros(vec![*units]),
            },
            Layer::Residual { body } => {
                let body_params = init_params(body, shape, rng)?;
                let out_c = match out_shape_stack(body, shape)? {
                    Shape::Spatial { c, .. } => c,
                    Shape::Flat { d } => d,
                };
                let projection = if out_c != c_in {
                    Some(he_normal_init(rng, vec![1, 1, c_in, out_c], c_in)?)
                } else {
                    None
                };
                LayerParams::Residual { body: body_params, projection }
            }
            _ => LayerParams::None,
        };
        shape = l.out_shape(shape)?;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Run a layer stack on the tape. Parameters are registered as leaves
/// (trainable iff `mode == Train`); the ids of trainable leaves are pushed
/// onto `trainable_ids` in the same order as `visit` enumerates tensors.
/// Train-mode batch norm updates the running statistics in place.
pub fn forward_stack(
    tape: &mut Tape<f32>,
    layers: &[Layer],
    params: &mut [LayerParams],
    x: Id,
    mode: Mode,
    trainable_ids: &mut Vec<Id>,
) -> Result<Id> {
    if layers.len() != params.len() {
        return Err(Error::InvalidArgument("layers and params differ in length".into()));
    }
    let train = mode == Mode::Train;
    let mut cur = x;
    for (layer, param) in layers.iter().zip(params.iter_mut()) {
        cur = match (layer, param) {
            (Layer::Conv2d { .. }, LayerParams::Conv2d { kernel, bias }) => {
                let k = tape.leaf(kernel.clone(), train);
                let b = tape.leaf(bias.clone(), train);
                if train {
                    trainable_ids.push(k);
                    trainable_ids.push(b);
                }
                let y = tape.conv2d(cur, k)?;
                tape.bias_add(y, b)?
            }
            (Layer::SeparableConv2d { .. }, LayerParams::Separable { pointwise, depthwise, bias }) => {
                let pw = tape.leaf(pointwise.clone(), train);
                let dw = tape.leaf(depthwise.clone(), train);
                let b = tape.leaf(bias.clone(), train);
                if train {
                    trainable_ids.push(pw);
                    trainable_ids.push(dw);
                    trainable_ids.push(b);
                }
                let y = tape.conv2d(cur, pw)?;
                let y = tape.depthwise_conv2d(y, dw)?;
                tape.bias_add(y, b)?
            }
            (Layer::BatchNorm, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                let g = tape.leaf(gamma.clone(), train);
                let bt = tape.leaf(beta.clone(), train);
                if train {
                    trainable_ids.push(g);
                    trainable_ids.push(bt);
                    let (y, mean, var) =
                        tape.batch_norm_train(cur, g, bt, BATCH_NORM_EPS as f32)?;
                    let m = BATCH_NORM_MOMENTUM as f32;
                    for (r, b) in running_mean.data_mut().iter_mut().zip(&mean) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                    for (r, b) in running_var.data_mut().iter_mut().zip(&var) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                    y
                } else {
                    tape.batch_norm_infer(
                        cur,
                        g,
                        bt,
                        running_mean.data(),
                        running_var.data(),
                        BATCH_NORM_EPS as f32,
                    )?
                }
            }
            (Layer::Relu, LayerParams::None) => tape.relu(cur)?,
            (Layer::LeakyRelu, LayerParams::None) => {
                tape.leaky_relu(cur, LEAKY_RELU_ALPHA as f32)?
            }
            (Layer::MaxPool { k }, LayerParams::None) => tape.maxpool(cur, *k)?,
            (Layer::GlobalAvgPool, LayerParams::None) => tape.global_avg_pool(cur)?,
            (Layer::Flatten, LayerParams::None) => {
                let s = tape.value(cur).shape().to_vec();
                let n = s[0];
                let d: usize = s[1..].iter().product();
                tape.reshape(cur, vec![n, d])?
            }
            (Layer::Dense { .. }, LayerParams::Dense { w, b }) => {
                let wid = tape.leaf(w.clone(), train);
                let bid = tape.leaf(b.clone(), train);
                if train {
                    trainable_ids.push(wid);
                    trainable_ids.push(bid);
                }
                tape.dense(cur, wid, bid)?
            }
            (Layer::Softmax, LayerParams::None) => tape.softmax(cur)?,
            (Layer::Residual { body }, LayerParams::Residual { body: body_params, projection }) => {
                let y = forward_stack(tape, body, body_params, cur, mode, trainable_ids)?;
                let skip = match projection {
                    Some(proj) => {
                        let pid = tape.leaf(proj.clone(), train);
                        if train {
                            trainable_ids.push(pid);
                        }
                        tape.conv2d(cur, pid)?
                    }
                    None => cur,
                };
                let sum = tape.add(y, skip)?;
                tape.relu(sum)?
            }
            (l, p) => {
                return Err(Error::InvalidArgument(format!(
                    "layer/params mismatch: {l:?} with {p:?}"
                )))
            }
        };
    }
    Ok(cur)
}

/// Write tape gradients back into the parameter stack, in the same
/// traversal order `forward_stack` used to register leaves.
pub fn collect_grads(
    tape: &Tape<f32>,
    grads: &crate::tape::GradMap<f32>,
    trainable_ids: &[Id],
) -> Vec<Tensor<f32>> {
    trainable_ids
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
        })
        .collect()
}

/// Mutable references to the trainable tensors, in `visit` order.
pub fn trainable_tensors_mut(params: &mut [LayerParams]) -> Vec<&mut Tensor<f32>> {
    let mut out: Vec<*mut Tensor<f32>> = Vec::new();
    for (i, p) in params.iter_mut().enumerate() {
        p.visit_mut(&format!("{i}"), &mut |_, t, trainable| {
            if trainable {
                out.push(t as *mut Tensor<f32>);
            }
        });
    }
    // each pointer refers to a distinct field of the params tree
    out.into_iter().map(|p| unsafe { &mut *p }).collect()
}
