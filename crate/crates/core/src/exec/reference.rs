//! Naive NHWC interpreter: straight topological evaluation with
//! scalar-simple kernels. This is the trusted side of the differential pair.
//!
//! Cross-backend arithmetic contract (kept by both interpreters so bug-free
//! runs agree exactly): convolution and average-pool windows accumulate in
//! f64 over cells in ascending (kh, kw, ci) order, skipping out-of-bounds
//! cells; sigmoid/tanh/softmax evaluate through f64; float-to-int casts
//! truncate toward zero and saturate; integer division by zero yields zero.

use std::collections::BTreeMap;

use crate::exec::weights::{bias_tensor, const_tensor, filter_tensor};
use crate::ir::{ModelNode, ModelSpec, NodeId, Op, ParamValue};
use crate::shapecalc::{infer_shapes, TensorMeta};
use crate::tensor::{numel, strides, DType, Tensor, TensorData};

/// Per-node outputs of one run: graph outputs plus a tap for every node.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outputs: Vec<Tensor>,
    pub taps: BTreeMap<NodeId, Tensor>,
}

/// Runtime failure of the interpreter itself (not a differential finding).
#[derive(Debug, Clone, thiserror::Error)]
#[error("node {node} ({op}): {message}")]
pub struct Fault {
    pub node: NodeId,
    pub op: String,
    pub message: String,
}

fn fault(node: &ModelNode, message: impl Into<String>) -> Fault {
    Fault {
        node: node.id,
        op: node.op.clone(),
        message: message.into(),
    }
}

pub fn run_reference(model: &ModelSpec, inputs: &[Tensor]) -> Result<RunOutput, Fault> {
    let metas = infer_shapes(model).map_err(|e| Fault {
        node: 0,
        op: String::new(),
        message: format!("shape inference failed: {e}"),
    })?;
    let order = model.topo_order().map_err(|e| Fault {
        node: 0,
        op: String::new(),
        message: e.to_string(),
    })?;

    let mut env: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    let placeholders = model.placeholder_ids();
    if placeholders.len() != inputs.len() {
        return Err(Fault {
            node: 0,
            op: "Placeholder".into(),
            message: format!(
                "model wants {} inputs, got {}",
                placeholders.len(),
                inputs.len()
            ),
        });
    }
    for (i, &pid) in placeholders.iter().enumerate() {
        if inputs[i].shape != model.inputs[i] {
            return Err(Fault {
                node: pid,
                op: "Placeholder".into(),
                message: format!(
                    "input {} has shape {:?}, declared {:?}",
                    i, inputs[i].shape, model.inputs[i]
                ),
            });
        }
        env.insert(pid, inputs[i].clone());
    }

    for id in order {
        let node = model.node(id).expect("topo order yields known nodes");
        if node.op == "Placeholder" {
            continue;
        }
        let operands: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|(src, _)| env.get(src).expect("inputs precede consumers"))
            .collect();
        let out = eval_node(node, &operands, model.weights_seed, &metas)?;
        env.insert(id, out);
    }

    let outputs = model
        .sink_ids()
        .iter()
        .map(|id| env[id].clone())
        .collect();
    Ok(RunOutput { outputs, taps: env })
}

fn int_param(node: &ModelNode, name: &str) -> Result<i64, Fault> {
    node.params
        .get(name)
        .and_then(ParamValue::as_int)
        .ok_or_else(|| fault(node, format!("missing int param {name}")))
}

fn list_param<'a>(node: &'a ModelNode, name: &str) -> Result<&'a [i64], Fault> {
    node.params
        .get(name)
        .and_then(ParamValue::as_int_list)
        .ok_or_else(|| fault(node, format!("missing list param {name}")))
}

fn eval_node(
    node: &ModelNode,
    operands: &[&Tensor],
    weights_seed: u64,
    metas: &BTreeMap<NodeId, TensorMeta>,
) -> Result<Tensor, Fault> {
    let op = Op::from_name(&node.op)
        .ok_or_else(|| fault(node, "not executable by the built-in backends"))?;
    match op {
        Op::Placeholder => unreachable!("handled by the driver"),
        Op::Const => {
            let meta = &metas[&node.id];
            Ok(const_tensor(weights_seed, node.id, &meta.shape, meta.dtype))
        }
        Op::Conv2d => {
            let input = operands[0];
            let [fh, fw] = [int_param(node, "filter_h")?, int_param(node, "filter_w")?];
            let oc = int_param(node, "out_channels")?;
            let ic = input.shape[3];
            let filter = filter_tensor(weights_seed, node.id, &[fh, fw, ic, oc]);
            Ok(conv2d_nhwc(
                input,
                &filter,
                [int_param(node, "pad_h")?, int_param(node, "pad_w")?],
                [int_param(node, "stride_h")?, int_param(node, "stride_w")?],
                [int_param(node, "dilation_h")?, int_param(node, "dilation_w")?],
            ))
        }
        Op::DepthwiseConv2d => {
            let input = operands[0];
            let [fh, fw] = [int_param(node, "filter_h")?, int_param(node, "filter_w")?];
            let mult = int_param(node, "multiplier")?;
            let ic = input.shape[3];
            let filter = filter_tensor(weights_seed, node.id, &[fh, fw, ic, mult]);
            Ok(depthwise_conv2d_nhwc(
                input,
                &filter,
                [int_param(node, "pad_h")?, int_param(node, "pad_w")?],
                [int_param(node, "stride_h")?, int_param(node, "stride_w")?],
                [int_param(node, "dilation_h")?, int_param(node, "dilation_w")?],
            ))
        }
        Op::MaxPool => {
            let input = operands[0];
            Ok(maxpool_nhwc(
                input,
                [int_param(node, "ksize_h")?, int_param(node, "ksize_w")?],
                [int_param(node, "pad_h")?, int_param(node, "pad_w")?],
                [int_param(node, "stride_h")?, int_param(node, "stride_w")?],
            ))
        }
        Op::AvgPool => {
            let input = operands[0];
            Ok(avgpool_nhwc(
                input,
                [int_param(node, "ksize_h")?, int_param(node, "ksize_w")?],
                [int_param(node, "pad_h")?, int_param(node, "pad_w")?],
                [int_param(node, "stride_h")?, int_param(node, "stride_w")?],
            ))
        }
        Op::BiasAdd => {
            let input = operands[0];
            let c = input.shape[3];
            let bias = bias_tensor(weights_seed, node.id, c);
            Ok(bias_add_nhwc(input, &bias))
        }
        Op::Add => binary_elementwise(node, operands, |a, b| a + b, |a, b| a.wrapping_add(b)),
        Op::Sub => binary_elementwise(node, operands, |a, b| a - b, |a, b| a.wrapping_sub(b)),
        Op::Mul => binary_elementwise(node, operands, |a, b| a * b, |a, b| a.wrapping_mul(b)),
        Op::RealDiv => binary_elementwise(
            node,
            operands,
            |a, b| a / b,
            |a, b| if b == 0 { 0 } else { a.wrapping_div(b) },
        ),
        Op::Relu => unary_elementwise(operands[0], |x| if x.is_nan() { x } else { x.max(0.0) }, |x| x.max(0)),
        Op::Relu6 => unary_elementwise(operands[0], |x| x.clamp(0.0, 6.0), |x| x.clamp(0, 6)),
        Op::Sigmoid => Ok(float_unary(operands[0], |x| {
            (1.0 / (1.0 + (-x).exp())) as f32
        })),
        Op::Tanh => Ok(float_unary(operands[0], |x| x.tanh() as f32)),
        Op::Softmax => Ok(softmax_last_axis(operands[0])),
        Op::Concat => {
            let axis = int_param(node, "axis")? as usize;
            concat(node, operands, axis)
        }
        Op::Reshape => {
            let target = list_param(node, "shape")?.to_vec();
            if numel(&target) != operands[0].len() {
                return Err(fault(node, "reshape element count mismatch"));
            }
            let mut out = operands[0].clone();
            out.shape = target;
            Ok(out)
        }
        Op::Transpose => {
            let perm = list_param(node, "perm")?;
            Ok(transpose(operands[0], perm))
        }
        Op::Slice => {
            let begin = list_param(node, "begin")?;
            let size = list_param(node, "size")?;
            for d in 0..operands[0].shape.len() {
                if begin[d] < 0 || begin[d] + size[d] > operands[0].shape[d] {
                    return Err(fault(node, format!("slice out of bounds on dim {d}")));
                }
            }
            Ok(slice(operands[0], begin, size))
        }
        Op::Pad => {
            let paddings = list_param(node, "paddings")?;
            Ok(pad_zero(operands[0], paddings))
        }
        Op::Cast => {
            let dtype = node
                .params
                .get("dtype")
                .and_then(ParamValue::as_str)
                .and_then(DType::from_name)
                .ok_or_else(|| fault(node, "missing dtype param"))?;
            Ok(cast(operands[0], dtype))
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels

pub fn conv2d_nhwc(
    input: &Tensor,
    filter: &Tensor,
    pad: [i64; 2],
    stride: [i64; 2],
    dilation: [i64; 2],
) -> Tensor {
    let x = input.as_f32().expect("conv input is f32");
    let w = filter.as_f32().expect("filter is f32");
    let [n, ih, iw, ic] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let [fh, fw, _, oc] = [filter.shape[0], filter.shape[1], filter.shape[2], filter.shape[3]];
    let oh = crate::shapecalc::conv_out_dim(ih, fh, pad[0], stride[0], dilation[0]);
    let ow = crate::shapecalc::conv_out_dim(iw, fw, pad[1], stride[1], dilation[1]);
    let xs = strides(&input.shape);
    let ws = strides(&filter.shape);
    let mut out = vec![0f32; (n * oh * ow * oc) as usize];
    let mut idx = 0;
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                for co in 0..oc {
                    let mut acc = 0f64;
                    for ky in 0..fh {
                        let src_y = y * stride[0] - pad[0] + ky * dilation[0];
                        if src_y < 0 || src_y >= ih {
                            continue;
                        }
                        for kx in 0..fw {
                            let src_x = xo * stride[1] - pad[1] + kx * dilation[1];
                            if src_x < 0 || src_x >= iw {
                                continue;
                            }
                            for ci in 0..ic {
                                let xv = x[b as usize * xs[0]
                                    + src_y as usize * xs[1]
                                    + src_x as usize * xs[2]
                                    + ci as usize];
                                let wv = w[ky as usize * ws[0]
                                    + kx as usize * ws[1]
                                    + ci as usize * ws[2]
                                    + co as usize];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[idx] = acc as f32;
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_f32(&[n, oh, ow, oc], out)
}

pub fn depthwise_conv2d_nhwc(
    input: &Tensor,
    filter: &Tensor,
    pad: [i64; 2],
    stride: [i64; 2],
    dilation: [i64; 2],
) -> Tensor {
    let x = input.as_f32().expect("conv input is f32");
    let w = filter.as_f32().expect("filter is f32");
    let [n, ih, iw, ic] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let [fh, fw, _, mult] = [filter.shape[0], filter.shape[1], filter.shape[2], filter.shape[3]];
    let oh = crate::shapecalc::conv_out_dim(ih, fh, pad[0], stride[0], dilation[0]);
    let ow = crate::shapecalc::conv_out_dim(iw, fw, pad[1], stride[1], dilation[1]);
    let oc = ic * mult;
    let xs = strides(&input.shape);
    let ws = strides(&filter.shape);
    let mut out = vec![0f32; (n * oh * ow * oc) as usize];
    let mut idx = 0;
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                for ci in 0..ic {
                    for m in 0..mult {
                        let mut acc = 0f64;
                        for ky in 0..fh {
                            let src_y = y * stride[0] - pad[0] + ky * dilation[0];
                            if src_y < 0 || src_y >= ih {
                                continue;
                            }
                            for kx in 0..fw {
                                let src_x = xo * stride[1] - pad[1] + kx * dilation[1];
                                if src_x < 0 || src_x >= iw {
                                    continue;
                                }
                                let xv = x[b as usize * xs[0]
                                    + src_y as usize * xs[1]
                                    + src_x as usize * xs[2]
                                    + ci as usize];
                                let wv = w[ky as usize * ws[0]
                                    + kx as usize * ws[1]
                                    + ci as usize * ws[2]
                                    + m as usize];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                        // Output channel layout is ci * mult + m.
                        out[idx] = acc as f32;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::from_f32(&[n, oh, ow, oc], out)
}

pub fn maxpool_nhwc(input: &Tensor, ksize: [i64; 2], pad: [i64; 2], stride: [i64; 2]) -> Tensor {
    pool_nhwc(input, ksize, pad, stride, PoolMode::Max)
}

pub fn avgpool_nhwc(input: &Tensor, ksize: [i64; 2], pad: [i64; 2], stride: [i64; 2]) -> Tensor {
    pool_nhwc(input, ksize, pad, stride, PoolMode::Avg)
}

enum PoolMode {
    Max,
    Avg,
}

/// Padding cells are excluded: max ranges over in-bounds cells only
/// (NaN-propagating) and avg divides by the in-bounds cell count.
fn pool_nhwc(
    input: &Tensor,
    ksize: [i64; 2],
    pad: [i64; 2],
    stride: [i64; 2],
    mode: PoolMode,
) -> Tensor {
    let x = input.as_f32().expect("pool input is f32");
    let [n, ih, iw, c] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let oh = crate::shapecalc::conv_out_dim(ih, ksize[0], pad[0], stride[0], 1);
    let ow = crate::shapecalc::conv_out_dim(iw, ksize[1], pad[1], stride[1], 1);
    let xs = strides(&input.shape);
    let mut out = vec![0f32; (n * oh * ow * c) as usize];
    let mut idx = 0;
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut acc = 0f64;
                    let mut count = 0u32;
                    let mut saw_nan = false;
                    for ky in 0..ksize[0] {
                        let src_y = y * stride[0] - pad[0] + ky;
                        if src_y < 0 || src_y >= ih {
                            continue;
                        }
                        for kx in 0..ksize[1] {
                            let src_x = xo * stride[1] - pad[1] + kx;
                            if src_x < 0 || src_x >= iw {
                                continue;
                            }
                            let v = x[b as usize * xs[0]
                                + src_y as usize * xs[1]
                                + src_x as usize * xs[2]
                                + ch as usize];
                            if v.is_nan() {
                                saw_nan = true;
                            }
                            best = best.max(v);
                            acc += v as f64;
                            count += 1;
                        }
                    }
                    out[idx] = match mode {
                        PoolMode::Max => {
                            if saw_nan {
                                f32::NAN
                            } else {
                                best
                            }
                        }
                        PoolMode::Avg => {
                            if count == 0 {
                                0.0
                            } else {
                                (acc / count as f64) as f32
                            }
                        }
                    };
                    idx += 1;
                }
            }
        }
    }
    Tensor {
        shape: vec![n, oh, ow, c],
        data: TensorData::F32(out),
    }
}

pub fn bias_add_nhwc(input: &Tensor, bias: &Tensor) -> Tensor {
    let x = input.as_f32().expect("bias-add input is f32");
    let b = bias.as_f32().expect("bias is f32");
    let c = input.shape[3] as usize;
    let out = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[i % c])
        .collect();
    Tensor {
        shape: input.shape.clone(),
        data: TensorData::F32(out),
    }
}

fn binary_elementwise(
    node: &ModelNode,
    operands: &[&Tensor],
    f: fn(f32, f32) -> f32,
    g: fn(i64, i64) -> i64,
) -> Result<Tensor, Fault> {
    let (a, b) = (operands[0], operands[1]);
    if a.shape != b.shape || a.dtype() != b.dtype() {
        return Err(fault(node, "operand shape/dtype mismatch at runtime"));
    }
    let data = match (&a.data, &b.data) {
        (TensorData::F32(x), TensorData::F32(y)) => {
            TensorData::F32(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
        }
        (TensorData::I32(x), TensorData::I32(y)) => TensorData::I32(
            x.iter()
                .zip(y)
                .map(|(&p, &q)| g(p as i64, q as i64) as i32)
                .collect(),
        ),
        (TensorData::I8(x), TensorData::I8(y)) => TensorData::I8(
            x.iter()
                .zip(y)
                .map(|(&p, &q)| g(p as i64, q as i64) as i8)
                .collect(),
        ),
        _ => return Err(fault(node, "mixed dtypes")),
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

fn unary_elementwise(input: &Tensor, f: fn(f32) -> f32, g: fn(i64) -> i64) -> Result<Tensor, Fault> {
    let data = match &input.data {
        TensorData::F32(x) => TensorData::F32(x.iter().map(|&v| f(v)).collect()),
        TensorData::I32(x) => TensorData::I32(x.iter().map(|&v| g(v as i64) as i32).collect()),
        TensorData::I8(x) => TensorData::I8(x.iter().map(|&v| g(v as i64) as i8).collect()),
    };
    Ok(Tensor {
        shape: input.shape.clone(),
        data,
    })
}

fn float_unary(input: &Tensor, f: impl Fn(f64) -> f32) -> Tensor {
    let x = input.as_f32().expect("float-only operator");
    Tensor {
        shape: input.shape.clone(),
        data: TensorData::F32(x.iter().map(|&v| f(v as f64)).collect()),
    }
}

pub fn softmax_last_axis(input: &Tensor) -> Tensor {
    let x = input.as_f32().expect("softmax input is f32");
    let axis = *input.shape.last().expect("softmax needs rank >= 1") as usize;
    let mut out = vec![0f32; x.len()];
    for chunk in 0..x.len() / axis {
        let s = &x[chunk * axis..(chunk + 1) * axis];
        let mut max = f32::NEG_INFINITY;
        let mut saw_nan = false;
        for &v in s {
            if v.is_nan() {
                saw_nan = true;
            }
            max = max.max(v);
        }
        let dst = &mut out[chunk * axis..(chunk + 1) * axis];
        if saw_nan {
            dst.fill(f32::NAN);
            continue;
        }
        let mut sum = 0f64;
        let mut exps = vec![0f64; axis];
        for (i, &v) in s.iter().enumerate() {
            let e = ((v - max) as f64).exp();
            exps[i] = e;
            sum += e;
        }
        for (i, &e) in exps.iter().enumerate() {
            dst[i] = (e / sum) as f32;
        }
    }
    Tensor {
        shape: input.shape.clone(),
        data: TensorData::F32(out),
    }
}

fn concat(node: &ModelNode, operands: &[&Tensor], axis: usize) -> Result<Tensor, Fault> {
    let first = operands[0];
    let rank = first.shape.len();
    if axis >= rank {
        return Err(fault(node, "concat axis out of range at runtime"));
    }
    for t in operands {
        if t.shape.len() != rank || t.dtype() != first.dtype() {
            return Err(fault(node, "concat operand mismatch at runtime"));
        }
        for d in 0..rank {
            if d != axis && t.shape[d] != first.shape[d] {
                return Err(fault(node, "concat non-axis dim mismatch at runtime"));
            }
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = operands.iter().map(|t| t.shape[axis]).sum();
    let outer: i64 = shape[..axis].iter().product();
    let inner: i64 = shape[axis + 1..].iter().product();

    macro_rules! cat {
        ($variant:ident, $ty:ty) => {{
            let mut out: Vec<$ty> = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for t in operands {
                    let rows = t.shape[axis];
                    let data = match &t.data {
                        TensorData::$variant(v) => v,
                        _ => unreachable!("dtype checked above"),
                    };
                    let start = (o * rows * inner) as usize;
                    out.extend_from_slice(&data[start..start + (rows * inner) as usize]);
                }
            }
            TensorData::$variant(out)
        }};
    }
    let data = match first.dtype() {
        DType::F32 => cat!(F32, f32),
        DType::I32 => cat!(I32, i32),
        DType::I8 => cat!(I8, i8),
    };
    Ok(Tensor { shape, data })
}

/// `out[o] = in[i]` with `i[perm[d]] = o[d]`.
pub fn transpose(input: &Tensor, perm: &[i64]) -> Tensor {
    let rank = input.shape.len();
    let out_shape: Vec<i64> = perm.iter().map(|&p| input.shape[p as usize]).collect();
    let in_strides = strides(&input.shape);
    let out_strides = strides(&out_shape);
    let out_n = numel(&out_shape);

    let mut mapping = vec![0usize; out_n];
    for (flat, slot) in mapping.iter_mut().enumerate() {
        let mut rem = flat;
        let mut in_idx = 0usize;
        for d in 0..rank {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            in_idx += c * in_strides[perm[d] as usize];
        }
        *slot = in_idx;
    }

    let data = match &input.data {
        TensorData::F32(v) => TensorData::F32(mapping.iter().map(|&i| v[i]).collect()),
        TensorData::I32(v) => TensorData::I32(mapping.iter().map(|&i| v[i]).collect()),
        TensorData::I8(v) => TensorData::I8(mapping.iter().map(|&i| v[i]).collect()),
    };
    Tensor {
        shape: out_shape,
        data,
    }
}

pub fn slice(input: &Tensor, begin: &[i64], size: &[i64]) -> Tensor {
    let rank = input.shape.len();
    let in_strides = strides(&input.shape);
    let out_n = numel(size);
    let out_strides = strides(size);
    let mut mapping = vec![0usize; out_n];
    for (flat, slot) in mapping.iter_mut().enumerate() {
        let mut rem = flat;
        let mut in_idx = 0usize;
        for d in 0..rank {
            let c = (rem / out_strides[d]) as i64 + begin[d];
            rem %= out_strides[d];
            in_idx += c as usize * in_strides[d];
        }
        *slot = in_idx;
    }
    let data = match &input.data {
        TensorData::F32(v) => TensorData::F32(mapping.iter().map(|&i| v[i]).collect()),
        TensorData::I32(v) => TensorData::I32(mapping.iter().map(|&i| v[i]).collect()),
        TensorData::I8(v) => TensorData::I8(mapping.iter().map(|&i| v[i]).collect()),
    };
    Tensor {
        shape: size.to_vec(),
        data,
    }
}

pub fn pad_zero(input: &Tensor, paddings: &[i64]) -> Tensor {
    let rank = input.shape.len();
    let out_shape: Vec<i64> = input
        .shape
        .iter()
        .enumerate()
        .map(|(d, &dim)| dim + paddings[2 * d] + paddings[2 * d + 1])
        .collect();
    let mut out = Tensor::zeros(&out_shape, input.dtype());
    let in_strides = strides(&input.shape);
    let out_strides = strides(&out_shape);
    let n = input.len();
    for flat in 0..n {
        let mut rem = flat;
        let mut out_idx = 0usize;
        for d in 0..rank {
            let c = (rem / in_strides[d]) as i64 + paddings[2 * d];
            rem %= in_strides[d];
            out_idx += c as usize * out_strides[d];
        }
        match (&input.data, &mut out.data) {
            (TensorData::F32(src), TensorData::F32(dst)) => dst[out_idx] = src[flat],
            (TensorData::I32(src), TensorData::I32(dst)) => dst[out_idx] = src[flat],
            (TensorData::I8(src), TensorData::I8(dst)) => dst[out_idx] = src[flat],
            _ => unreachable!("zeros preserves dtype"),
        }
    }
    out
}

/// Float-to-int casts truncate toward zero and saturate (NaN becomes 0);
/// int-to-int casts truncate bits.
pub fn cast(input: &Tensor, dtype: DType) -> Tensor {
    if input.dtype() == dtype {
        return input.clone();
    }
    let n = input.len();
    let data = match dtype {
        DType::F32 => TensorData::F32(match &input.data {
            TensorData::I32(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::F32(v) => v.clone(),
        }),
        DType::I32 => TensorData::I32(match &input.data {
            TensorData::F32(v) => v.iter().map(|&x| x as i32).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as i32).collect(),
            TensorData::I32(v) => v.clone(),
        }),
        DType::I8 => TensorData::I8(match &input.data {
            TensorData::F32(v) => v.iter().map(|&x| x as i8).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as i8).collect(),
            TensorData::I8(v) => v.clone(),
        }),
    };
    debug_assert_eq!(
        match &data {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        },
        n
    );
    Tensor {
        shape: input.shape.clone(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{node, ModelSpec};

    #[test]
    fn relu_definition() {
        let model = ModelSpec {
            nodes: vec![node(0, "Placeholder", &[]), node(1, "Relu", &[0])],
            inputs: vec![vec![3]],
            weights_seed: 0,
        };
        let input = Tensor::from_f32(&[3], vec![-1.0, 0.0, 2.0]);
        let run = run_reference(&model, &[input]).unwrap();
        assert_eq!(run.outputs[0].as_f32().unwrap(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_propagates_nan() {
        let model = ModelSpec {
            nodes: vec![node(0, "Placeholder", &[]), node(1, "Relu", &[0])],
            inputs: vec![vec![2]],
            weights_seed: 0,
        };
        let input = Tensor::from_f32(&[2], vec![f32::NAN, -3.0]);
        let run = run_reference(&model, &[input]).unwrap();
        let out = run.outputs[0].as_f32().unwrap();
        assert!(out[0].is_nan());
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn realdiv_by_zero_is_ieee_not_a_fault() {
        let model = ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                node(1, "Placeholder", &[]),
                node(2, "RealDiv", &[0, 1]),
            ],
            inputs: vec![vec![2], vec![2]],
            weights_seed: 0,
        };
        let a = Tensor::from_f32(&[2], vec![1.0, 0.0]);
        let b = Tensor::from_f32(&[2], vec![0.0, 0.0]);
        let run = run_reference(&model, &[a, b]).unwrap();
        let out = run.outputs[0].as_f32().unwrap();
        assert_eq!(out[0], f32::INFINITY);
        assert!(out[1].is_nan());
    }

    #[test]
    fn identity_kernel_conv_reproduces_input() {
        // 1x1 filter, identity over a single channel.
        let input = Tensor::from_f32(&[1, 3, 3, 1], (1..=9).map(|v| v as f32).collect());
        let filter = Tensor::from_f32(&[1, 1, 1, 1], vec![1.0]);
        let out = conv2d_nhwc(&input, &filter, [0, 0], [1, 1], [1, 1]);
        assert_eq!(out.shape, vec![1, 3, 3, 1]);
        assert_eq!(out.as_f32().unwrap(), input.as_f32().unwrap());
    }

    #[test]
    fn conv_known_answer_with_padding() {
        // 2x2 input, all-ones 3x3 filter, SAME padding 1: every output is the
        // sum of the in-bounds neighborhood.
        let input = Tensor::from_f32(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let filter = Tensor::from_f32(&[3, 3, 1, 1], vec![1.0; 9]);
        let out = conv2d_nhwc(&input, &filter, [1, 1], [1, 1], [1, 1]);
        assert_eq!(out.shape, vec![1, 2, 2, 1]);
        assert_eq!(out.as_f32().unwrap(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn avgpool_excludes_padding() {
        let input = Tensor::from_f32(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        // 3x3 kernel, pad 1: corner windows see 4 valid cells.
        let out = avgpool_nhwc(&input, [3, 3], [1, 1], [1, 1]);
        assert_eq!(out.as_f32().unwrap(), &[2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn maxpool_ignores_padding_cells() {
        let input = Tensor::from_f32(&[1, 2, 2, 1], vec![-1.0, -2.0, -3.0, -4.0]);
        let out = maxpool_nhwc(&input, [3, 3], [1, 1], [1, 1]);
        // All-negative windows must stay negative: pad is not zero.
        assert_eq!(out.as_f32().unwrap(), &[-1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn transpose_round_trips_through_inverse() {
        let input = Tensor::from_f32(&[1, 2, 3, 4], (0..24).map(|v| v as f32).collect());
        let perm = [0i64, 2, 3, 1];
        let out = transpose(&input, &perm);
        assert_eq!(out.shape, vec![1, 3, 4, 2]);
        let inv = [0i64, 3, 1, 2];
        let back = transpose(&out, &inv);
        assert_eq!(back, input);
    }

    #[test]
    fn slice_extracts_the_window() {
        let input = Tensor::from_f32(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = slice(&input, &[1, 1], &[1, 2]);
        assert_eq!(out.shape, vec![1, 2]);
        assert_eq!(out.as_f32().unwrap(), &[4.0, 5.0]);
    }

    #[test]
    fn cast_truncates_and_saturates() {
        let input = Tensor::from_f32(&[5], vec![0.7, -0.7, 200.0, -200.0, f32::NAN]);
        let out = cast(&input, DType::I8);
        match &out.data {
            TensorData::I8(v) => assert_eq!(v, &[0, 0, 127, -128, 0]),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let input = Tensor::from_f32(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let out = softmax_last_axis(&input);
        let v = out.as_f32().unwrap();
        for row in v.chunks(3) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
