//! The "optimized" interpreter: an independently coded execution path that
//! converts activations to NCHW for spatial kernels, fuses
//! Conv2d+BiasAdd+Relu and Mul+Add patterns, and hosts the seeded-defect
//! catalog. With an empty bug mask it must agree with the reference
//! interpreter on every model (both sides keep the arithmetic contract
//! described in `reference`).

use std::collections::{BTreeMap, BTreeSet};

use crate::exec::weights::{bias_tensor, const_tensor, filter_tensor};
use crate::ir::{ModelNode, ModelSpec, NodeId, Op, ParamValue};
use crate::shapecalc::infer_shapes;
use crate::tensor::{numel, strides, DType, Tensor, TensorData};

/// Catalog of seeded defects. Each is triggered only by a specific
/// structural pattern; everything else executes cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum SeededBug {
    /// f32 -> i8 cast rounds to nearest instead of truncating.
    CastRound,
    /// Concat with more than two operands zero-fills the last operand's region.
    ConcatDrop,
    /// AvgPool divides by the full window size, counting padded cells.
    AvgPoolIncludePad,
    /// MaxPool treats padded cells as zeros instead of excluding them.
    MaxPoolZeroPad,
    /// The fused Conv2d+BiasAdd+Relu kernel forgets the final Relu.
    FusedReluSkip,
    /// Strided Conv2d reads its window one row too low.
    ConvStrideOffset,
    /// Sigmoid saturates inputs at or below -10 to 1.0.
    SigmoidSaturate,
    /// Transpose writes the right shape but permutes data with a clamped
    /// inverse index map (no effect on involutions).
    TransposeReverse,
    /// Slice reads from the origin, ignoring `begin`.
    SliceIgnoreBegin,
    /// Standalone BiasAdd broadcasts bias[0] over every channel.
    BiasBroadcastFirst,
    /// Inference aborts when a Softmax is fed directly by a Concat.
    InferAbort,
    /// Conversion rejects DepthwiseConv2d with dilation above one.
    ConvertRejectDilatedDw,
}

impl SeededBug {
    pub fn name(self) -> &'static str {
        match self {
            SeededBug::CastRound => "cast-round",
            SeededBug::ConcatDrop => "concat-drop",
            SeededBug::AvgPoolIncludePad => "avgpool-include-pad",
            SeededBug::MaxPoolZeroPad => "maxpool-zero-pad",
            SeededBug::FusedReluSkip => "fused-relu-skip",
            SeededBug::ConvStrideOffset => "conv-stride-offset",
            SeededBug::SigmoidSaturate => "sigmoid-saturate",
            SeededBug::TransposeReverse => "transpose-reverse",
            SeededBug::SliceIgnoreBegin => "slice-ignore-begin",
            SeededBug::BiasBroadcastFirst => "bias-broadcast-first",
            SeededBug::InferAbort => "infer-abort",
            SeededBug::ConvertRejectDilatedDw => "convert-reject-dilated-dw",
        }
    }

    pub fn from_name(name: &str) -> Option<SeededBug> {
        Self::all().into_iter().find(|b| b.name() == name)
    }

    pub fn all() -> Vec<SeededBug> {
        vec![
            SeededBug::CastRound,
            SeededBug::ConcatDrop,
            SeededBug::AvgPoolIncludePad,
            SeededBug::MaxPoolZeroPad,
            SeededBug::FusedReluSkip,
            SeededBug::ConvStrideOffset,
            SeededBug::SigmoidSaturate,
            SeededBug::TransposeReverse,
            SeededBug::SliceIgnoreBegin,
            SeededBug::BiasBroadcastFirst,
            SeededBug::InferAbort,
            SeededBug::ConvertRejectDilatedDw,
        ]
    }

    /// The ten data-comparison defects used by the seeded campaigns.
    pub fn standard_ten() -> BugMask {
        Self::all()
            .into_iter()
            .filter(|b| !matches!(b, SeededBug::InferAbort | SeededBug::ConvertRejectDilatedDw))
            .collect()
    }
}

pub type BugMask = BTreeSet<SeededBug>;

pub fn parse_bug_mask(csv: &str) -> Result<BugMask, String> {
    let mut mask = BugMask::new();
    for item in csv.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "all" => mask.extend(SeededBug::all()),
            "standard" => mask.extend(SeededBug::standard_ten()),
            name => {
                let bug = SeededBug::from_name(name)
                    .ok_or_else(|| format!("unknown seeded bug {name:?}"))?;
                mask.insert(bug);
            }
        }
    }
    Ok(mask)
}

/// Engine-visible failure of the optimized path, by pipeline stage.
#[derive(Debug, Clone, thiserror::Error)]
pub enum EngineFailure {
    #[error("convert stage rejected model (code {code}, op {op}): {message}")]
    Convert {
        code: i32,
        op: String,
        message: String,
    },
    #[error("inference aborted at {op}: {message}")]
    Infer { op: String, message: String },
}

#[derive(Debug, Clone)]
pub struct OptimizedRun {
    pub outputs: Vec<Tensor>,
    /// Per-node outputs in NHWC, keyed by original node id. Nodes fused into
    /// a pattern interior have no tap; the pattern-final node carries one.
    pub taps: BTreeMap<NodeId, Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizedOptions {
    pub bugs: BugMask,
    pub fuse: bool,
}

impl OptimizedOptions {
    pub fn clean() -> OptimizedOptions {
        OptimizedOptions {
            bugs: BugMask::new(),
            fuse: true,
        }
    }

    pub fn with_bugs(bugs: BugMask) -> OptimizedOptions {
        OptimizedOptions { bugs, fuse: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Nhwc,
    Nchw,
}

/// Fusion plan: pattern-final node id -> fused pattern.
enum Fused {
    ConvBiasRelu { conv: NodeId, bias: NodeId },
    MulAdd { mul: NodeId },
}

pub fn run_optimized(
    model: &ModelSpec,
    inputs: &[Tensor],
    opts: &OptimizedOptions,
) -> (Result<OptimizedRun, EngineFailure>, BTreeSet<SeededBug>) {
    let mut fired = BTreeSet::new();
    let result = run_optimized_inner(model, inputs, opts, &mut fired);
    (result, fired)
}

fn run_optimized_inner(
    model: &ModelSpec,
    inputs: &[Tensor],
    opts: &OptimizedOptions,
    fired: &mut BTreeSet<SeededBug>,
) -> Result<OptimizedRun, EngineFailure> {
    let bug = |b: SeededBug| opts.bugs.contains(&b);

    // Convert stage: validate, reject what the "engine" does not support.
    let metas = match infer_shapes(model) {
        Ok(metas) => metas,
        Err(e) => {
            let (code, op) = match &e {
                crate::shapecalc::ShapeError::ForeignOperator { op, .. } => (3, op.clone()),
                _ => (2, String::new()),
            };
            return Err(EngineFailure::Convert {
                code,
                op,
                message: e.to_string(),
            });
        }
    };
    if bug(SeededBug::ConvertRejectDilatedDw) {
        for node in &model.nodes {
            if node.op == "DepthwiseConv2d" {
                let dil = |k: &str| node.params.get(k).and_then(ParamValue::as_int).unwrap_or(1);
                if dil("dilation_h") > 1 || dil("dilation_w") > 1 {
                    fired.insert(SeededBug::ConvertRejectDilatedDw);
                    return Err(EngineFailure::Convert {
                        code: 108,
                        op: "DepthwiseConv2d".to_string(),
                        message: "check failed: dilated depthwise not supported".to_string(),
                    });
                }
            }
        }
    }

    // Fusion pass.
    let mut fused: BTreeMap<NodeId, Fused> = BTreeMap::new();
    let mut interior: BTreeSet<NodeId> = BTreeSet::new();
    if opts.fuse {
        for node in &model.nodes {
            if node.op == "Relu" && node.inputs.len() == 1 {
                let bias_id = node.inputs[0].0;
                let Some(bias) = model.node(bias_id) else { continue };
                if bias.op != "BiasAdd" || model.consumers(bias_id).len() != 1 {
                    continue;
                }
                let conv_id = bias.inputs[0].0;
                let Some(conv) = model.node(conv_id) else { continue };
                if conv.op != "Conv2d" || model.consumers(conv_id).len() != 1 {
                    continue;
                }
                if interior.contains(&conv_id) || interior.contains(&bias_id) {
                    continue;
                }
                fused.insert(
                    node.id,
                    Fused::ConvBiasRelu {
                        conv: conv_id,
                        bias: bias_id,
                    },
                );
                interior.insert(conv_id);
                interior.insert(bias_id);
            }
        }
        for node in &model.nodes {
            if node.op == "Add" && node.inputs.len() == 2 {
                // The fused multiply-add kernel is float-only.
                if metas[&node.id].dtype != crate::tensor::DType::F32 {
                    continue;
                }
                for slot in 0..2 {
                    let mul_id = node.inputs[slot].0;
                    if node.inputs[1 - slot].0 == mul_id {
                        continue; // both operands from the same producer
                    }
                    let Some(mul) = model.node(mul_id) else { continue };
                    if mul.op != "Mul"
                        || model.consumers(mul_id).len() != 1
                        || interior.contains(&mul_id)
                        || fused.contains_key(&mul_id)
                    {
                        continue;
                    }
                    fused.insert(node.id, Fused::MulAdd { mul: mul_id });
                    interior.insert(mul_id);
                    break;
                }
            }
        }
    }

    // Inference stage.
    if bug(SeededBug::InferAbort) {
        for node in &model.nodes {
            if node.op == "Softmax" {
                let feeds_from_concat = node
                    .inputs
                    .iter()
                    .any(|(src, _)| model.node(*src).map(|n| n.op == "Concat").unwrap_or(false));
                if feeds_from_concat {
                    fired.insert(SeededBug::InferAbort);
                    return Err(EngineFailure::Infer {
                        op: "Softmax".to_string(),
                        message: "free(): invalid next size".to_string(),
                    });
                }
            }
        }
    }

    let order = model.topo_order().expect("validated above");
    let mut env: BTreeMap<NodeId, (Tensor, Layout)> = BTreeMap::new();
    for (i, pid) in model.placeholder_ids().into_iter().enumerate() {
        env.insert(pid, (inputs[i].clone(), Layout::Nhwc));
    }

    let fetch = |env: &BTreeMap<NodeId, (Tensor, Layout)>, id: NodeId, want: Layout| -> Tensor {
        let (t, have) = env.get(&id).expect("inputs precede consumers");
        convert_layout(t, *have, want)
    };

    for id in order {
        if interior.contains(&id) {
            continue;
        }
        let node = model.node(id).expect("topo order yields known nodes");
        if node.op == "Placeholder" {
            continue;
        }

        let (out, layout) = if let Some(pattern) = fused.get(&id) {
            match pattern {
                Fused::ConvBiasRelu { conv, bias } => {
                    let conv_node = model.node(*conv).unwrap();
                    let x = fetch(&env, conv_node.inputs[0].0, Layout::Nchw);
                    let out = fused_conv_bias_relu(
                        &x,
                        conv_node,
                        *bias,
                        model.weights_seed,
                        opts,
                        fired,
                    );
                    (out, Layout::Nchw)
                }
                Fused::MulAdd { mul } => {
                    let mul_node = model.node(*mul).unwrap();
                    let (x0, layout) = env.get(&mul_node.inputs[0].0).cloned().unwrap();
                    let y = fetch(&env, mul_node.inputs[1].0, layout);
                    let other = node
                        .inputs
                        .iter()
                        .map(|(src, _)| *src)
                        .find(|src| *src != *mul)
                        .expect("mul-add has a second operand");
                    let z = fetch(&env, other, layout);
                    (fused_mul_add(&x0, &y, &z), layout)
                }
            }
        } else {
            eval_optimized(node, model, &mut env, opts, fired, &fetch)?
        };
        env.insert(id, (out, layout));
    }

    let taps: BTreeMap<NodeId, Tensor> = env
        .iter()
        .map(|(&id, (t, l))| (id, convert_layout(t, *l, Layout::Nhwc)))
        .collect();
    let outputs = model.sink_ids().iter().map(|id| taps[id].clone()).collect();
    Ok(OptimizedRun { outputs, taps })
}

fn eval_optimized(
    node: &ModelNode,
    model: &ModelSpec,
    env: &mut BTreeMap<NodeId, (Tensor, Layout)>,
    opts: &OptimizedOptions,
    fired: &mut BTreeSet<SeededBug>,
    fetch: &dyn Fn(&BTreeMap<NodeId, (Tensor, Layout)>, NodeId, Layout) -> Tensor,
) -> Result<(Tensor, Layout), EngineFailure> {
    let bug = |b: SeededBug| opts.bugs.contains(&b);
    let op = Op::from_name(&node.op).expect("validated in convert stage");
    let ip = |k: &str| node.params.get(k).and_then(ParamValue::as_int).unwrap_or(0);
    let lp = |k: &str| {
        node.params
            .get(k)
            .and_then(ParamValue::as_int_list)
            .map(<[i64]>::to_vec)
            .unwrap_or_default()
    };

    let out = match op {
        Op::Placeholder => unreachable!("handled by the driver"),
        Op::Const => {
            let shape = lp("shape");
            let dtype = node
                .params
                .get("dtype")
                .and_then(ParamValue::as_str)
                .and_then(DType::from_name)
                .unwrap_or(DType::F32);
            (
                const_tensor(model.weights_seed, node.id, &shape, dtype),
                Layout::Nhwc,
            )
        }
        Op::Conv2d => {
            let x = fetch(env, node.inputs[0].0, Layout::Nchw);
            let ic = x.shape[1];
            let filter = filter_tensor(
                model.weights_seed,
                node.id,
                &[ip("filter_h"), ip("filter_w"), ic, ip("out_channels")],
            );
            let w = hwio_to_oihw(&filter);
            let out = conv2d_nchw(
                &x,
                &w,
                [ip("pad_h"), ip("pad_w")],
                [ip("stride_h"), ip("stride_w")],
                [ip("dilation_h"), ip("dilation_w")],
                bug(SeededBug::ConvStrideOffset),
                fired,
            );
            (out, Layout::Nchw)
        }
        Op::DepthwiseConv2d => {
            let x = fetch(env, node.inputs[0].0, Layout::Nchw);
            let ic = x.shape[1];
            let filter = filter_tensor(
                model.weights_seed,
                node.id,
                &[ip("filter_h"), ip("filter_w"), ic, ip("multiplier")],
            );
            let out = depthwise_conv2d_nchw(
                &x,
                &filter,
                [ip("pad_h"), ip("pad_w")],
                [ip("stride_h"), ip("stride_w")],
                [ip("dilation_h"), ip("dilation_w")],
            );
            (out, Layout::Nchw)
        }
        Op::MaxPool | Op::AvgPool => {
            let x = fetch(env, node.inputs[0].0, Layout::Nchw);
            let out = pool_nchw(
                &x,
                [ip("ksize_h"), ip("ksize_w")],
                [ip("pad_h"), ip("pad_w")],
                [ip("stride_h"), ip("stride_w")],
                op == Op::MaxPool,
                opts,
                fired,
            );
            (out, Layout::Nchw)
        }
        Op::BiasAdd => {
            let x = fetch(env, node.inputs[0].0, Layout::Nchw);
            let bias = bias_tensor(model.weights_seed, node.id, x.shape[1]);
            let broadcast_first = bug(SeededBug::BiasBroadcastFirst);
            if broadcast_first && x.shape[1] > 1 {
                fired.insert(SeededBug::BiasBroadcastFirst);
            }
            (bias_add_nchw(&x, &bias, broadcast_first), Layout::Nchw)
        }
        Op::Add | Op::Mul | Op::Sub | Op::RealDiv => {
            let (a, layout) = env.get(&node.inputs[0].0).cloned().unwrap();
            let b = fetch(env, node.inputs[1].0, layout);
            (binary_flat(op, &a, &b), layout)
        }
        Op::Relu | Op::Relu6 | Op::Tanh => {
            let (x, layout) = env.get(&node.inputs[0].0).cloned().unwrap();
            (unary_flat(op, &x), layout)
        }
        Op::Sigmoid => {
            let (x, layout) = env.get(&node.inputs[0].0).cloned().unwrap();
            let saturate = bug(SeededBug::SigmoidSaturate);
            let data = x.as_f32().expect("sigmoid input is f32");
            let mut out = Vec::with_capacity(data.len());
            for &v in data {
                if saturate && v <= -10.0 {
                    fired.insert(SeededBug::SigmoidSaturate);
                    out.push(1.0);
                } else {
                    out.push((1.0 / (1.0 + (-(v as f64)).exp())) as f32);
                }
            }
            (
                Tensor {
                    shape: x.shape.clone(),
                    data: TensorData::F32(out),
                },
                layout,
            )
        }
        Op::Softmax => {
            let x = fetch(env, node.inputs[0].0, Layout::Nhwc);
            (softmax_channel_last(&x), Layout::Nhwc)
        }
        Op::Concat => {
            let operands: Vec<Tensor> = node
                .inputs
                .iter()
                .map(|(src, _)| fetch(env, *src, Layout::Nhwc))
                .collect();
            let drop_last = bug(SeededBug::ConcatDrop) && operands.len() > 2;
            if drop_last {
                fired.insert(SeededBug::ConcatDrop);
            }
            (
                concat_coordwise(&operands, ip("axis") as usize, drop_last),
                Layout::Nhwc,
            )
        }
        Op::Reshape => {
            let x = fetch(env, node.inputs[0].0, Layout::Nhwc);
            let mut out = x.clone();
            out.shape = lp("shape");
            (out, Layout::Nhwc)
        }
        Op::Transpose => {
            let x = fetch(env, node.inputs[0].0, Layout::Nhwc);
            let perm = lp("perm");
            let reverse = bug(SeededBug::TransposeReverse) && !is_involution(&perm);
            if reverse {
                fired.insert(SeededBug::TransposeReverse);
            }
            (transpose_opt(&x, &perm, reverse), Layout::Nhwc)
        }
        Op::Slice => {
            let x = fetch(env, node.inputs[0].0, Layout::Nhwc);
            let begin = lp("begin");
            let size = lp("size");
            let ignore_begin =
                bug(SeededBug::SliceIgnoreBegin) && begin.iter().any(|&b| b != 0);
            if ignore_begin {
                fired.insert(SeededBug::SliceIgnoreBegin);
            }
            let effective: Vec<i64> = if ignore_begin {
                vec![0; begin.len()]
            } else {
                begin
            };
            (slice_opt(&x, &effective, &size), Layout::Nhwc)
        }
        Op::Pad => {
            let x = fetch(env, node.inputs[0].0, Layout::Nhwc);
            (pad_opt(&x, &lp("paddings")), Layout::Nhwc)
        }
        Op::Cast => {
            let (x, layout) = env.get(&node.inputs[0].0).cloned().unwrap();
            let dtype = node
                .params
                .get("dtype")
                .and_then(ParamValue::as_str)
                .and_then(DType::from_name)
                .unwrap_or(DType::F32);
            let round = bug(SeededBug::CastRound);
            (cast_opt(&x, dtype, round, fired), layout)
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layout plumbing

fn permute4(t: &Tensor, perm: [usize; 4]) -> Tensor {
    let shape: Vec<i64> = perm.iter().map(|&p| t.shape[p]).collect();
    let in_strides = strides(&t.shape);
    let out_strides = strides(&shape);
    let n = numel(&shape);
    let mut map = vec![0usize; n];
    for (flat, slot) in map.iter_mut().enumerate() {
        let mut rem = flat;
        let mut idx = 0;
        for d in 0..4 {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            idx += c * in_strides[perm[d]];
        }
        *slot = idx;
    }
    let data = match &t.data {
        TensorData::F32(v) => TensorData::F32(map.iter().map(|&i| v[i]).collect()),
        TensorData::I32(v) => TensorData::I32(map.iter().map(|&i| v[i]).collect()),
        TensorData::I8(v) => TensorData::I8(map.iter().map(|&i| v[i]).collect()),
    };
    Tensor { shape, data }
}

fn convert_layout(t: &Tensor, have: Layout, want: Layout) -> Tensor {
    if have == want || t.shape.len() != 4 {
        return t.clone();
    }
    match (have, want) {
        (Layout::Nhwc, Layout::Nchw) => permute4(t, [0, 3, 1, 2]),
        (Layout::Nchw, Layout::Nhwc) => permute4(t, [0, 2, 3, 1]),
        _ => t.clone(),
    }
}

/// Filter [fh, fw, ic, oc] -> [oc, ic, fh, fw].
fn hwio_to_oihw(t: &Tensor) -> Tensor {
    permute4(t, [3, 2, 0, 1])
}

// ---------------------------------------------------------------------------
// NCHW kernels

#[allow(clippy::too_many_arguments)]
fn conv2d_nchw(
    x: &Tensor,
    w_oihw: &Tensor,
    pad: [i64; 2],
    stride: [i64; 2],
    dilation: [i64; 2],
    stride_offset_bug: bool,
    fired: &mut BTreeSet<SeededBug>,
) -> Tensor {
    let xv = x.as_f32().expect("conv input is f32");
    let wv = w_oihw.as_f32().expect("filter is f32");
    let [n, ic, ih, iw] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let [oc, _, fh, fw] = [
        w_oihw.shape[0],
        w_oihw.shape[1],
        w_oihw.shape[2],
        w_oihw.shape[3],
    ];
    let oh = crate::shapecalc::conv_out_dim(ih, fh, pad[0], stride[0], dilation[0]);
    let ow = crate::shapecalc::conv_out_dim(iw, fw, pad[1], stride[1], dilation[1]);
    let xs = strides(&x.shape);
    let ws = strides(&w_oihw.shape);
    let offset = if stride_offset_bug && stride[0] >= 2 {
        fired.insert(SeededBug::ConvStrideOffset);
        1
    } else {
        0
    };
    let mut out = vec![0f32; (n * oc * oh * ow) as usize];
    let os = strides(&[n, oc, oh, ow]);
    for b in 0..n {
        for co in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    // Accumulation order (ky, kx, ci) matches the reference
                    // kernel so bug-free runs agree bit for bit.
                    let mut acc = 0f64;
                    for ky in 0..fh {
                        let sy = y * stride[0] - pad[0] + ky * dilation[0] + offset;
                        if sy < 0 || sy >= ih {
                            continue;
                        }
                        for kx in 0..fw {
                            let sx = xo * stride[1] - pad[1] + kx * dilation[1];
                            if sx < 0 || sx >= iw {
                                continue;
                            }
                            for ci in 0..ic {
                                let xi = b as usize * xs[0]
                                    + ci as usize * xs[1]
                                    + sy as usize * xs[2]
                                    + sx as usize;
                                let wi = co as usize * ws[0]
                                    + ci as usize * ws[1]
                                    + ky as usize * ws[2]
                                    + kx as usize;
                                acc += xv[xi] as f64 * wv[wi] as f64;
                            }
                        }
                    }
                    out[b as usize * os[0]
                        + co as usize * os[1]
                        + y as usize * os[2]
                        + xo as usize] = acc as f32;
                }
            }
        }
    }
    Tensor::from_f32(&[n, oc, oh, ow], out)
}

fn depthwise_conv2d_nchw(
    x: &Tensor,
    w_hwim: &Tensor,
    pad: [i64; 2],
    stride: [i64; 2],
    dilation: [i64; 2],
) -> Tensor {
    let xv = x.as_f32().expect("conv input is f32");
    let wv = w_hwim.as_f32().expect("filter is f32");
    let [n, ic, ih, iw] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let [fh, fw, _, mult] = [
        w_hwim.shape[0],
        w_hwim.shape[1],
        w_hwim.shape[2],
        w_hwim.shape[3],
    ];
    let oh = crate::shapecalc::conv_out_dim(ih, fh, pad[0], stride[0], dilation[0]);
    let ow = crate::shapecalc::conv_out_dim(iw, fw, pad[1], stride[1], dilation[1]);
    let oc = ic * mult;
    let xs = strides(&x.shape);
    let ws = strides(&w_hwim.shape);
    let mut out = vec![0f32; (n * oc * oh * ow) as usize];
    let os = strides(&[n, oc, oh, ow]);
    for b in 0..n {
        for ci in 0..ic {
            for m in 0..mult {
                let co = ci * mult + m;
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0f64;
                        for ky in 0..fh {
                            let sy = y * stride[0] - pad[0] + ky * dilation[0];
                            if sy < 0 || sy >= ih {
                                continue;
                            }
                            for kx in 0..fw {
                                let sx = xo * stride[1] - pad[1] + kx * dilation[1];
                                if sx < 0 || sx >= iw {
                                    continue;
                                }
                                let xi = b as usize * xs[0]
                                    + ci as usize * xs[1]
                                    + sy as usize * xs[2]
                                    + sx as usize;
                                let wi = ky as usize * ws[0]
                                    + kx as usize * ws[1]
                                    + ci as usize * ws[2]
                                    + m as usize;
                                acc += xv[xi] as f64 * wv[wi] as f64;
                            }
                        }
                        out[b as usize * os[0]
                            + co as usize * os[1]
                            + y as usize * os[2]
                            + xo as usize] = acc as f32;
                    }
                }
            }
        }
    }
    Tensor::from_f32(&[n, oc, oh, ow], out)
}

fn fused_conv_bias_relu(
    x: &Tensor,
    conv_node: &ModelNode,
    bias_id: NodeId,
    weights_seed: u64,
    opts: &OptimizedOptions,
    fired: &mut BTreeSet<SeededBug>,
) -> Tensor {
    let ip = |k: &str| conv_node.params.get(k).and_then(ParamValue::as_int).unwrap_or(0);
    let ic = x.shape[1];
    let filter = filter_tensor(
        weights_seed,
        conv_node.id,
        &[ip("filter_h"), ip("filter_w"), ic, ip("out_channels")],
    );
    let w = hwio_to_oihw(&filter);
    // The fused kernel has its own loop nest; the stride-offset defect
    // lives only in the standalone convolution path.
    let mut out = conv2d_nchw(
        x,
        &w,
        [ip("pad_h"), ip("pad_w")],
        [ip("stride_h"), ip("stride_w")],
        [ip("dilation_h"), ip("dilation_w")],
        false,
        fired,
    );
    let bias = bias_tensor(weights_seed, bias_id, out.shape[1]);
    let bv = bias.as_f32().unwrap().to_vec();
    let skip_relu = opts.bugs.contains(&SeededBug::FusedReluSkip);
    if skip_relu {
        fired.insert(SeededBug::FusedReluSkip);
    }
    let [_, c, h, wdim] = [out.shape[0], out.shape[1], out.shape[2], out.shape[3]];
    let plane = (h * wdim) as usize;
    let data = out.as_f32_mut().unwrap();
    for (i, v) in data.iter_mut().enumerate() {
        let ch = (i / plane) % c as usize;
        let mut r = *v + bv[ch];
        if !skip_relu && !r.is_nan() {
            r = r.max(0.0);
        }
        *v = r;
    }
    out
}

fn fused_mul_add(x: &Tensor, y: &Tensor, z: &Tensor) -> Tensor {
    // Separate f32 multiply then add, matching the unfused sequence.
    let xv = x.as_f32().expect("fused mul-add is float-only");
    let yv = y.as_f32().expect("fused mul-add is float-only");
    let zv = z.as_f32().expect("fused mul-add is float-only");
    let out = xv
        .iter()
        .zip(yv)
        .zip(zv)
        .map(|((&a, &b), &c)| {
            let m = a * b;
            m + c
        })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data: TensorData::F32(out),
    }
}

fn pool_nchw(
    x: &Tensor,
    ksize: [i64; 2],
    pad: [i64; 2],
    stride: [i64; 2],
    is_max: bool,
    opts: &OptimizedOptions,
    fired: &mut BTreeSet<SeededBug>,
) -> Tensor {
    let xv = x.as_f32().expect("pool input is f32");
    let [n, c, ih, iw] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let oh = crate::shapecalc::conv_out_dim(ih, ksize[0], pad[0], stride[0], 1);
    let ow = crate::shapecalc::conv_out_dim(iw, ksize[1], pad[1], stride[1], 1);
    let xs = strides(&x.shape);
    let include_pad = !is_max && opts.bugs.contains(&SeededBug::AvgPoolIncludePad);
    let zero_pad = is_max && opts.bugs.contains(&SeededBug::MaxPoolZeroPad);
    let full = (ksize[0] * ksize[1]) as u32;
    let mut out = vec![0f32; (n * c * oh * ow) as usize];
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut acc = 0f64;
                    let mut count = 0u32;
                    let mut saw_nan = false;
                    for ky in 0..ksize[0] {
                        let sy = y * stride[0] - pad[0] + ky;
                        if sy < 0 || sy >= ih {
                            continue;
                        }
                        for kx in 0..ksize[1] {
                            let sx = xo * stride[1] - pad[1] + kx;
                            if sx < 0 || sx >= iw {
                                continue;
                            }
                            let v = xv[b as usize * xs[0]
                                + ch as usize * xs[1]
                                + sy as usize * xs[2]
                                + sx as usize];
                            if v.is_nan() {
                                saw_nan = true;
                            }
                            best = best.max(v);
                            acc += v as f64;
                            count += 1;
                        }
                    }
                    let clipped = count < full;
                    out[idx] = if is_max {
                        if saw_nan {
                            f32::NAN
                        } else if zero_pad && clipped && best < 0.0 {
                            fired.insert(SeededBug::MaxPoolZeroPad);
                            0.0
                        } else {
                            best
                        }
                    } else if count == 0 {
                        0.0
                    } else if include_pad && clipped {
                        fired.insert(SeededBug::AvgPoolIncludePad);
                        (acc / full as f64) as f32
                    } else {
                        (acc / count as f64) as f32
                    };
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_f32(&[n, c, oh, ow], out)
}

fn bias_add_nchw(x: &Tensor, bias: &Tensor, broadcast_first: bool) -> Tensor {
    let xv = x.as_f32().expect("bias-add input is f32");
    let bv = bias.as_f32().unwrap();
    let [_, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let plane = (h * w) as usize;
    let out = xv
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = if broadcast_first { 0 } else { (i / plane) % c as usize };
            v + bv[ch]
        })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data: TensorData::F32(out),
    }
}

fn binary_flat(op: Op, a: &Tensor, b: &Tensor) -> Tensor {
    let data = match (&a.data, &b.data) {
        (TensorData::F32(x), TensorData::F32(y)) => {
            let f: fn(f32, f32) -> f32 = match op {
                Op::Add => |p, q| p + q,
                Op::Sub => |p, q| p - q,
                Op::Mul => |p, q| p * q,
                _ => |p, q| p / q,
            };
            TensorData::F32(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
        }
        (TensorData::I32(x), TensorData::I32(y)) => {
            let f: fn(i32, i32) -> i32 = match op {
                Op::Add => i32::wrapping_add,
                Op::Sub => i32::wrapping_sub,
                Op::Mul => i32::wrapping_mul,
                _ => |p, q| if q == 0 { 0 } else { p.wrapping_div(q) },
            };
            TensorData::I32(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
        }
        (TensorData::I8(x), TensorData::I8(y)) => {
            let f: fn(i8, i8) -> i8 = match op {
                Op::Add => i8::wrapping_add,
                Op::Sub => i8::wrapping_sub,
                Op::Mul => i8::wrapping_mul,
                _ => |p, q| if q == 0 { 0 } else { p.wrapping_div(q) },
            };
            TensorData::I8(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
        }
        _ => panic!("mixed dtypes reach binary_flat"),
    };
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

fn unary_flat(op: Op, x: &Tensor) -> Tensor {
    let data = match &x.data {
        TensorData::F32(v) => {
            let f: fn(f32) -> f32 = match op {
                Op::Relu => |p| if p.is_nan() { p } else { p.max(0.0) },
                Op::Relu6 => |p| p.clamp(0.0, 6.0),
                _ => |p| (p as f64).tanh() as f32,
            };
            TensorData::F32(v.iter().map(|&p| f(p)).collect())
        }
        TensorData::I32(v) => {
            let f: fn(i32) -> i32 = match op {
                Op::Relu => |p| p.max(0),
                Op::Relu6 => |p| p.clamp(0, 6),
                _ => panic!("tanh on integers"),
            };
            TensorData::I32(v.iter().map(|&p| f(p)).collect())
        }
        TensorData::I8(v) => {
            let f: fn(i8) -> i8 = match op {
                Op::Relu => |p| p.max(0),
                Op::Relu6 => |p| p.clamp(0, 6),
                _ => panic!("tanh on integers"),
            };
            TensorData::I8(v.iter().map(|&p| f(p)).collect())
        }
    };
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

fn softmax_channel_last(x: &Tensor) -> Tensor {
    let v = x.as_f32().expect("softmax input is f32");
    let width = *x.shape.last().unwrap() as usize;
    let mut out = vec![0f32; v.len()];
    for (src, dst) in v.chunks(width).zip(out.chunks_mut(width)) {
        let mut max = f32::NEG_INFINITY;
        let mut saw_nan = false;
        for &p in src {
            saw_nan |= p.is_nan();
            max = max.max(p);
        }
        if saw_nan {
            dst.fill(f32::NAN);
            continue;
        }
        let exps: Vec<f64> = src.iter().map(|&p| ((p - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (d, e) in dst.iter_mut().zip(&exps) {
            *d = (e / sum) as f32;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: TensorData::F32(out),
    }
}

fn concat_coordwise(operands: &[Tensor], axis: usize, drop_last: bool) -> Tensor {
    let first = &operands[0];
    let mut shape = first.shape.clone();
    shape[axis] = operands.iter().map(|t| t.shape[axis]).sum();
    let mut out = Tensor::zeros(&shape, first.dtype());
    let out_strides = strides(&shape);
    let mut axis_base = 0i64;
    let kept = if drop_last {
        operands.len() - 1
    } else {
        operands.len()
    };
    for t in &operands[..kept] {
        let in_strides = strides(&t.shape);
        let rank = t.shape.len();
        for flat in 0..t.len() {
            let mut rem = flat;
            let mut out_idx = 0usize;
            for d in 0..rank {
                let mut c = (rem / in_strides[d]) as i64;
                rem %= in_strides[d];
                if d == axis {
                    c += axis_base;
                }
                out_idx += c as usize * out_strides[d];
            }
            match (&t.data, &mut out.data) {
                (TensorData::F32(src), TensorData::F32(dst)) => dst[out_idx] = src[flat],
                (TensorData::I32(src), TensorData::I32(dst)) => dst[out_idx] = src[flat],
                (TensorData::I8(src), TensorData::I8(dst)) => dst[out_idx] = src[flat],
                _ => panic!("concat operand dtype drift"),
            }
        }
        axis_base += t.shape[axis];
    }
    out
}

fn is_involution(perm: &[i64]) -> bool {
    perm.iter()
        .enumerate()
        .all(|(d, &p)| perm.get(p as usize).copied() == Some(d as i64))
}

fn transpose_opt(x: &Tensor, perm: &[i64], reverse: bool) -> Tensor {
    let rank = x.shape.len();
    let out_shape: Vec<i64> = perm.iter().map(|&p| x.shape[p as usize]).collect();
    let in_strides = strides(&x.shape);
    let out_strides = strides(&out_shape);
    let n = numel(&out_shape);
    let mut inv = vec![0usize; rank];
    for (d, &p) in perm.iter().enumerate() {
        inv[p as usize] = d;
    }
    let mut map = vec![0usize; n];
    let mut coord = vec![0i64; rank];
    for (flat, slot) in map.iter_mut().enumerate() {
        let mut rem = flat;
        for d in 0..rank {
            coord[d] = (rem / out_strides[d]) as i64;
            rem %= out_strides[d];
        }
        let mut idx = 0usize;
        for d in 0..rank {
            let c = if reverse {
                // Clamped wrong-direction index map: right shape, wrong data.
                coord[perm[d] as usize].min(x.shape[d] - 1)
            } else {
                coord[inv[d]]
            };
            idx += c as usize * in_strides[d];
        }
        *slot = idx;
    }
    let data = match &x.data {
        TensorData::F32(v) => TensorData::F32(map.iter().map(|&i| v[i]).collect()),
        TensorData::I32(v) => TensorData::I32(map.iter().map(|&i| v[i]).collect()),
        TensorData::I8(v) => TensorData::I8(map.iter().map(|&i| v[i]).collect()),
    };
    Tensor {
        shape: out_shape,
        data,
    }
}

fn slice_opt(x: &Tensor, begin: &[i64], size: &[i64]) -> Tensor {
    let rank = x.shape.len();
    let in_strides = strides(&x.shape);
    let out_strides = strides(size);
    let n = numel(size);
    let mut map = vec![0usize; n];
    for (flat, slot) in map.iter_mut().enumerate() {
        let mut rem = flat;
        let mut idx = 0usize;
        for d in 0..rank {
            let c = (rem / out_strides[d]) as i64 + begin[d];
            rem %= out_strides[d];
            idx += c as usize * in_strides[d];
        }
        *slot = idx;
    }
    let data = match &x.data {
        TensorData::F32(v) => TensorData::F32(map.iter().map(|&i| v[i]).collect()),
        TensorData::I32(v) => TensorData::I32(map.iter().map(|&i| v[i]).collect()),
        TensorData::I8(v) => TensorData::I8(map.iter().map(|&i| v[i]).collect()),
    };
    Tensor {
        shape: size.to_vec(),
        data,
    }
}

fn pad_opt(x: &Tensor, paddings: &[i64]) -> Tensor {
    let rank = x.shape.len();
    let out_shape: Vec<i64> = x
        .shape
        .iter()
        .enumerate()
        .map(|(d, &dim)| dim + paddings[2 * d] + paddings[2 * d + 1])
        .collect();
    let mut out = Tensor::zeros(&out_shape, x.dtype());
    let in_strides = strides(&x.shape);
    let out_strides = strides(&out_shape);
    for flat in 0..x.len() {
        let mut rem = flat;
        let mut idx = 0usize;
        for d in 0..rank {
            let c = (rem / in_strides[d]) as i64 + paddings[2 * d];
            rem %= in_strides[d];
            idx += c as usize * out_strides[d];
        }
        match (&x.data, &mut out.data) {
            (TensorData::F32(src), TensorData::F32(dst)) => dst[idx] = src[flat],
            (TensorData::I32(src), TensorData::I32(dst)) => dst[idx] = src[flat],
            (TensorData::I8(src), TensorData::I8(dst)) => dst[idx] = src[flat],
            _ => unreachable!("zeros preserves dtype"),
        }
    }
    out
}

fn cast_opt(x: &Tensor, dtype: DType, round: bool, fired: &mut BTreeSet<SeededBug>) -> Tensor {
    if x.dtype() == dtype {
        return x.clone();
    }
    let data = match (&x.data, dtype) {
        (TensorData::F32(v), DType::I8) => TensorData::I8(
            v.iter()
                .map(|&p| {
                    if round {
                        let rounded = p.round();
                        if rounded != p.trunc() {
                            fired.insert(SeededBug::CastRound);
                        }
                        rounded as i8
                    } else {
                        p as i8
                    }
                })
                .collect(),
        ),
        (TensorData::F32(v), DType::I32) => TensorData::I32(v.iter().map(|&p| p as i32).collect()),
        (TensorData::I32(v), DType::F32) => TensorData::F32(v.iter().map(|&p| p as f32).collect()),
        (TensorData::I32(v), DType::I8) => TensorData::I8(v.iter().map(|&p| p as i8).collect()),
        (TensorData::I8(v), DType::F32) => TensorData::F32(v.iter().map(|&p| p as f32).collect()),
        (TensorData::I8(v), DType::I32) => TensorData::I32(v.iter().map(|&p| p as i32).collect()),
        (TensorData::F32(v), DType::F32) => TensorData::F32(v.clone()),
        (TensorData::I32(v), DType::I32) => TensorData::I32(v.clone()),
        (TensorData::I8(v), DType::I8) => TensorData::I8(v.clone()),
    };
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::reference::run_reference;
    use crate::exec::weights::synthesize_inputs;
    use crate::ir::{node, node_with_params, ModelSpec};

    fn conv_chain_model() -> ModelSpec {
        ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                node_with_params(
                    1,
                    "Conv2d",
                    &[0],
                    &[
                        ("out_channels", ParamValue::Int(4)),
                        ("filter_h", ParamValue::Int(3)),
                        ("filter_w", ParamValue::Int(3)),
                        ("stride_h", ParamValue::Int(1)),
                        ("stride_w", ParamValue::Int(1)),
                        ("dilation_h", ParamValue::Int(1)),
                        ("dilation_w", ParamValue::Int(1)),
                        ("pad_h", ParamValue::Int(1)),
                        ("pad_w", ParamValue::Int(1)),
                    ],
                ),
                node(2, "BiasAdd", &[1]),
                node(3, "Relu", &[2]),
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 42,
        }
    }

    #[test]
    fn clean_run_matches_reference_exactly() {
        let model = conv_chain_model();
        let inputs = synthesize_inputs(&model);
        let ref_run = run_reference(&model, &inputs).unwrap();
        let (opt_run, fired) = run_optimized(&model, &inputs, &OptimizedOptions::clean());
        let opt_run = opt_run.unwrap();
        assert!(fired.is_empty());
        assert_eq!(ref_run.outputs.len(), opt_run.outputs.len());
        for (a, b) in ref_run.outputs.iter().zip(&opt_run.outputs) {
            assert_eq!(a, b, "bug-free backends must agree bit for bit");
        }
    }

    #[test]
    fn fusion_on_and_off_agree() {
        let model = conv_chain_model();
        let inputs = synthesize_inputs(&model);
        let fused = run_optimized(&model, &inputs, &OptimizedOptions::clean())
            .0
            .unwrap();
        let unfused = run_optimized(
            &model,
            &inputs,
            &OptimizedOptions {
                bugs: BugMask::new(),
                fuse: false,
            },
        )
        .0
        .unwrap();
        assert_eq!(fused.outputs, unfused.outputs);
    }

    #[test]
    fn fused_taps_surface_at_the_pattern_final_node() {
        let model = conv_chain_model();
        let inputs = synthesize_inputs(&model);
        let (run, _) = run_optimized(&model, &inputs, &OptimizedOptions::clean());
        let run = run.unwrap();
        assert!(run.taps.contains_key(&3), "relu tap exists");
        assert!(!run.taps.contains_key(&1), "conv is fused interior");
        assert!(!run.taps.contains_key(&2), "bias-add is fused interior");
    }

    #[test]
    fn fused_relu_skip_diverges() {
        let model = conv_chain_model();
        let inputs = synthesize_inputs(&model);
        let ref_run = run_reference(&model, &inputs).unwrap();
        let mask: BugMask = [SeededBug::FusedReluSkip].into_iter().collect();
        let (opt_run, fired) =
            run_optimized(&model, &inputs, &OptimizedOptions::with_bugs(mask));
        let opt_run = opt_run.unwrap();
        assert!(fired.contains(&SeededBug::FusedReluSkip));
        assert_ne!(ref_run.outputs[0], opt_run.outputs[0]);
    }

    #[test]
    fn convert_reject_fires_on_dilated_depthwise() {
        let model = ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                node_with_params(
                    1,
                    "DepthwiseConv2d",
                    &[0],
                    &[
                        ("multiplier", ParamValue::Int(1)),
                        ("filter_h", ParamValue::Int(3)),
                        ("filter_w", ParamValue::Int(3)),
                        ("stride_h", ParamValue::Int(1)),
                        ("stride_w", ParamValue::Int(1)),
                        ("dilation_h", ParamValue::Int(2)),
                        ("dilation_w", ParamValue::Int(1)),
                        ("pad_h", ParamValue::Int(2)),
                        ("pad_w", ParamValue::Int(1)),
                    ],
                ),
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 1,
        };
        let inputs = synthesize_inputs(&model);
        let mask: BugMask = [SeededBug::ConvertRejectDilatedDw].into_iter().collect();
        let (result, fired) = run_optimized(&model, &inputs, &OptimizedOptions::with_bugs(mask));
        assert!(fired.contains(&SeededBug::ConvertRejectDilatedDw));
        match result {
            Err(EngineFailure::Convert { code, op, .. }) => {
                assert_eq!(code, 108);
                assert_eq!(op, "DepthwiseConv2d");
            }
            other => panic!("expected convert failure, got {other:?}"),
        }
    }

    #[test]
    fn bug_mask_parsing() {
        let mask = parse_bug_mask("cast-round, concat-drop").unwrap();
        assert_eq!(mask.len(), 2);
        assert_eq!(parse_bug_mask("standard").unwrap().len(), 10);
        assert_eq!(parse_bug_mask("all").unwrap().len(), 12);
        assert!(parse_bug_mask("bogus").is_err());
    }
}
