//! Expert-weight compression with depthwise-separable convolutions.
//!
//! Each expert's `W1ᵀ` and `W2` (both `d_ff×h`) are stacked into a
//! two-channel image and pushed through valid (unpadded) depthwise,
//! pointwise and average-pool stages until one pixel with `t'` channels
//! remains. The result stands in for the learned expert embedding `S_e`.
//! Filters are seeded once and stay fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::Expert;
use crate::tensor::{BackwardRule, Rng, Tape, Tensor, TensorError, TensorResult, Var};

/// `[channels, height, width]`
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConvStage {
    Depthwise {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Pointwise {
        in_channels: usize,
        out_channels: usize,
    },
    AvgPool {
        window: [usize; 2],
        stride: [usize; 2],
    },
}

fn window_out(extent: usize, k: usize, s: usize) -> Option<usize> {
    (k >= 1 && s >= 1 && k <= extent).then(|| (extent - k) / s + 1)
}

impl ConvStage {
    pub fn output_shape(&self, input: Shape3) -> TensorResult<Shape3> {
        let [c, h, w] = input;
        let windowed = |k: [usize; 2], s: [usize; 2], op| match (
            window_out(h, k[0], s[0]),
            window_out(w, k[1], s[1]),
        ) {
            (Some(oh), Some(ow)) => Ok([c, oh, ow]),
            _ => Err(TensorError::Dimension {
                op,
                lhs: input.to_vec(),
                rhs: k.to_vec(),
            }),
        };
        match *self {
            ConvStage::Depthwise { kernel, stride } => windowed(kernel, stride, "depthwise_conv"),
            ConvStage::AvgPool { window, stride } => windowed(window, stride, "avg_pool"),
            ConvStage::Pointwise {
                in_channels,
                out_channels,
            } => {
                if in_channels != c || out_channels == 0 {
                    return Err(TensorError::Dimension {
                        op: "pointwise_conv",
                        lhs: input.to_vec(),
                        rhs: vec![in_channels, out_channels],
                    });
                }
                Ok([out_channels, h, w])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvPipelineSpec {
    pub stages: Vec<ConvStage>,
    pub output_dim: usize,
}

impl ConvPipelineSpec {
    /// Full-size pipeline for 8 experts with `h = 768`, `d_ff = 3072`.
    pub fn reference() -> Self {
        Self {
            stages: vec![
                ConvStage::Depthwise {
                    kernel: [5, 5],
                    stride: [5, 5],
                },
                ConvStage::Pointwise {
                    in_channels: 2,
                    out_channels: 32,
                },
                ConvStage::AvgPool {
                    window: [16, 6],
                    stride: [16, 6],
                },
                ConvStage::Depthwise {
                    kernel: [3, 3],
                    stride: [3, 3],
                },
                ConvStage::Pointwise {
                    in_channels: 32,
                    out_channels: 128,
                },
                ConvStage::AvgPool {
                    window: [8, 8],
                    stride: [8, 8],
                },
            ],
            output_dim: 128,
        }
    }

    /// Same stage pattern scaled to a `2×height×width` input: 2×2 windows
    /// (clipped to the extent), 8 mid channels, and a final pool over
    /// whatever extent remains.
    pub fn scaled(height: usize, width: usize, output_dim: usize) -> Self {
        const MID: usize = 8;
        let mut stages = Vec::new();
        let (mut h, mut w) = (height, width);
        let mut shrink = |stages: &mut Vec<ConvStage>, pool: bool| {
            let (kh, kw) = (h.min(2), w.min(2));
            let (kernel, stride) = ([kh, kw], [kh, kw]);
            stages.push(if pool {
                ConvStage::AvgPool {
                    window: kernel,
                    stride,
                }
            } else {
                ConvStage::Depthwise { kernel, stride }
            });
            h = (h - kh) / kh + 1;
            w = (w - kw) / kw + 1;
        };
        shrink(&mut stages, false);
        stages.push(ConvStage::Pointwise {
            in_channels: 2,
            out_channels: MID,
        });
        shrink(&mut stages, true);
        shrink(&mut stages, false);
        stages.push(ConvStage::Pointwise {
            in_channels: MID,
            out_channels: output_dim,
        });
        stages.push(ConvStage::AvgPool {
            window: [h, w],
            stride: [h, w],
        });
        Self { stages, output_dim }
    }

    /// Input shape followed by every stage's output shape.
    pub fn shape_chain(&self, input: Shape3) -> Result<Vec<Shape3>> {
        let mut chain = vec![input];
        for stage in &self.stages {
            let next = stage.output_shape(*chain.last().unwrap())?;
            chain.push(next);
        }
        let out = *chain.last().unwrap();
        if out != [self.output_dim, 1, 1] {
            return Err(Error::config(format!(
                "pipeline ends at {out:?}, expected [{}, 1, 1]",
                self.output_dim
            )));
        }
        Ok(chain)
    }
}

/// A pipeline bound to an input shape, with fixed filters.
#[derive(Debug, Clone)]
pub struct ConvPipeline {
    spec: ConvPipelineSpec,
    input: Shape3,
    /// Depthwise: `C×kh×kw`; pointwise: `out×in`; pooling: none.
    filters: Vec<Option<Tensor>>,
}

impl ConvPipeline {
    pub fn new(spec: ConvPipelineSpec, input: Shape3, rng: &mut Rng) -> Result<Self> {
        let chain = spec.shape_chain(input)?;
        let filters = spec
            .stages
            .iter()
            .zip(&chain)
            .map(|(stage, shape)| match *stage {
                ConvStage::Depthwise { kernel, .. } => {
                    let fan_in = (kernel[0] * kernel[1]) as f64;
                    Some(rng.gaussian_tensor([shape[0], kernel[0], kernel[1]], fan_in.powf(-0.5)))
                }
                ConvStage::Pointwise {
                    in_channels,
                    out_channels,
                } => Some(rng.gaussian_tensor(
                    [out_channels, in_channels],
                    (in_channels as f64).powf(-0.5),
                )),
                ConvStage::AvgPool { .. } => None,
            })
            .collect();
        Ok(Self {
            spec,
            input,
            filters,
        })
    }

    pub fn spec(&self) -> &ConvPipelineSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut cur = x.clone();
        for (stage, filter) in self.spec.stages.iter().zip(&self.filters) {
            cur = conv_stage_forward(&cur, stage, filter.as_ref())?;
        }
        Ok(cur.reshape([1, self.spec.output_dim])?)
    }

    /// Differentiable forward of a `C×H×W` input; returns a `1×t'` row.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut cur = x;
        for (stage, filter) in self.spec.stages.iter().zip(&self.filters) {
            let out = conv_stage_forward(tape.value(cur), stage, filter.as_ref())?;
            let rule = StageGrad {
                stage: *stage,
                filter: filter.clone(),
            };
            cur = tape.custom(&[cur], out, Box::new(rule));
        }
        Ok(tape.reshape(cur, &[1, self.spec.output_dim])?)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input {
            return Err(Error::config(format!(
                "pipeline built for input {:?}, got {shape:?}",
                self.input
            )));
        }
        Ok(())
    }
}

fn dims3(x: &Tensor) -> TensorResult<Shape3> {
    match *x.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(TensorError::Contract(format!(
            "expected a C×H×W tensor, got {:?}",
            x.shape()
        ))),
    }
}

/// One valid (unpadded) stage on a `C×H×W` tensor.
pub fn conv_stage_forward(
    x: &Tensor,
    stage: &ConvStage,
    filter: Option<&Tensor>,
) -> TensorResult<Tensor> {
    let [c, h, w] = dims3(x)?;
    let [oc, oh, ow] = stage.output_shape([c, h, w])?;
    let xd = x.data();
    let mut out = vec![0.0; oc * oh * ow];
    match *stage {
        ConvStage::Depthwise { kernel, stride } => {
            let k = filter.expect("depthwise filter").data();
            let [kh, kw] = kernel;
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for u in 0..kh {
                            let row = ch * h * w + (i * stride[0] + u) * w + j * stride[1];
                            for v in 0..kw {
                                acc += xd[row + v] * k[(ch * kh + u) * kw + v];
                            }
                        }
                        out[(ch * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        ConvStage::Pointwise { .. } => {
            let wts = filter.expect("pointwise filter").data();
            let plane = h * w;
            for o in 0..oc {
                let dst = &mut out[o * plane..(o + 1) * plane];
                for ch in 0..c {
                    let a = wts[o * c + ch];
                    for (d, s) in dst.iter_mut().zip(&xd[ch * plane..(ch + 1) * plane]) {
                        *d += a * s;
                    }
                }
            }
        }
        ConvStage::AvgPool { window, stride } => {
            let [ph, pw] = window;
            let norm = 1.0 / (ph * pw) as f64;
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for u in 0..ph {
                            let row = ch * h * w + (i * stride[0] + u) * w + j * stride[1];
                            acc += xd[row..row + pw].iter().sum::<f64>();
                        }
                        out[(ch * oh + i) * ow + j] = acc * norm;
                    }
                }
            }
        }
    }
    Tensor::new([oc, oh, ow], out)
}

struct StageGrad {
    stage: ConvStage,
    filter: Option<Tensor>,
}

impl BackwardRule for StageGrad {
    fn name(&self) -> &'static str {
        match self.stage {
            ConvStage::Depthwise { .. } => "depthwise_conv",
            ConvStage::Pointwise { .. } => "pointwise_conv",
            ConvStage::AvgPool { .. } => "avg_pool",
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let [c, h, w] = dims3(x).unwrap();
        let [oc, oh, ow] = dims3(output).unwrap();
        let mut gx = vec![0.0; x.numel()];
        match self.stage {
            ConvStage::Depthwise { kernel, stride } => {
                let k = self.filter.as_ref().unwrap().data();
                let [kh, kw] = kernel;
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g[(ch * oh + i) * ow + j];
                            for u in 0..kh {
                                let row = ch * h * w + (i * stride[0] + u) * w + j * stride[1];
                                for v in 0..kw {
                                    gx[row + v] += go * k[(ch * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                }
            }
            ConvStage::Pointwise { .. } => {
                let wts = self.filter.as_ref().unwrap().data();
                let plane = h * w;
                for o in 0..oc {
                    let src = &g[o * plane..(o + 1) * plane];
                    for ch in 0..c {
                        let a = wts[o * c + ch];
                        for (d, s) in gx[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                            *d += a * s;
                        }
                    }
                }
            }
            ConvStage::AvgPool { window, stride } => {
                let [ph, pw] = window;
                let norm = 1.0 / (ph * pw) as f64;
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g[(ch * oh + i) * ow + j] * norm;
                            for u in 0..ph {
                                let row = ch * h * w + (i * stride[0] + u) * w + j * stride[1];
                                gx[row..row + pw].iter_mut().for_each(|v| *v += go);
                            }
                        }
                    }
                }
            }
        }
        vec![gx]
    }
}

/// Channel 0 is `W1ᵀ`, channel 1 is `W2`; both `d_ff×h`.
pub fn stack_expert(w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let w1t = w1.transpose()?;
    if w1t.shape() != w2.shape() {
        return Err(Error::config(format!(
            "cannot stack W1ᵀ {:?} with W2 {:?}",
            w1t.shape(),
            w2.shape()
        )));
    }
    let (f, h) = w2.dims2()?;
    let mut data = w1t.into_data();
    data.extend_from_slice(w2.data());
    Ok(Tensor::new([2, f, h], data)?)
}

/// Compresses `N` experts, given as `(W1, W2)` pairs, into an `N×t'` table.
pub fn compress_expert_weights(
    bank: &[(Tensor, Tensor)],
    pipeline: &ConvPipeline,
) -> Result<Tensor> {
    let t = pipeline.output_dim();
    let mut out = Vec::with_capacity(bank.len() * t);
    for (w1, w2) in bank {
        let img = stack_expert(w1, w2)?;
        out.extend_from_slice(pipeline.forward(&img)?.data());
    }
    Ok(Tensor::new([bank.len(), t], out)?)
}

/// Tape version of [`compress_expert_weights`]. Gradients reach the
/// expert weights only if their vars require them.
pub fn compress_on_tape(tape: &mut Tape, bank: &[Expert], pipeline: &ConvPipeline) -> Result<Var> {
    let t = pipeline.output_dim();
    let mut table = tape.constant(Tensor::zeros([bank.len(), t]));
    for (e, expert) in bank.iter().enumerate() {
        let (h, f) = tape.value(expert.w1).dims2()?;
        let w1t = tape.transpose(expert.w1)?;
        let a = tape.reshape(w1t, &[1, f * h])?;
        let b = tape.reshape(expert.w2, &[1, f * h])?;
        let img = tape.concat_cols(a, b)?;
        let img = tape.reshape(img, &[2, f, h])?;
        let row = pipeline.forward_on_tape(tape, img)?;
        table = tape.index_add_rows(table, row, &[e])?;
    }
    Ok(table)
}
