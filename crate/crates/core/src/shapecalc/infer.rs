//! Deterministic forward shape/dtype propagation in topological order.
//! Every model the pipeline emits must pass this; a located failure here is
//! the built-in analog of a conversion-stage rejection.

use std::collections::BTreeMap;

use crate::ir::{ModelNode, ModelSpec, NodeId, Op};
use crate::shapecalc::ShapeError;
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub shape: Vec<i64>,
    pub dtype: DType,
}

impl TensorMeta {
    pub fn f32(shape: &[i64]) -> TensorMeta {
        TensorMeta {
            shape: shape.to_vec(),
            dtype: DType::F32,
        }
    }
}

fn err(node: &ModelNode, reason: impl Into<String>, operands: &[&TensorMeta]) -> ShapeError {
    ShapeError::Inference {
        node: node.id,
        op: node.op.clone(),
        reason: reason.into(),
        operands: operands.iter().map(|m| m.shape.clone()).collect(),
    }
}

fn int_param(node: &ModelNode, name: &str) -> Result<i64, ShapeError> {
    node.params
        .get(name)
        .and_then(|v| v.as_int())
        .ok_or_else(|| ShapeError::BadParam {
            node: node.id,
            op: node.op.clone(),
            param: name.to_string(),
        })
}

fn list_param<'a>(node: &'a ModelNode, name: &str) -> Result<&'a [i64], ShapeError> {
    node.params
        .get(name)
        .and_then(|v| v.as_int_list())
        .ok_or_else(|| ShapeError::BadParam {
            node: node.id,
            op: node.op.clone(),
            param: name.to_string(),
        })
}

fn str_param<'a>(node: &'a ModelNode, name: &str) -> Result<&'a str, ShapeError> {
    node.params
        .get(name)
        .and_then(|v| v.as_str())
        .ok_or_else(|| ShapeError::BadParam {
            node: node.id,
            op: node.op.clone(),
            param: name.to_string(),
        })
}

/// Spatial output extent under the conventional floor formula. The
/// SAME-preserving solver only emits parameters where this coincides with
/// the plain quotient form, so the two views of conv arithmetic agree on
/// every generated model.
pub fn conv_out_dim(input: i64, filter: i64, pad: i64, stride: i64, dilation: i64) -> i64 {
    let eff = dilation * (filter - 1) + 1;
    (input + 2 * pad - eff).div_euclid(stride) + 1
}

/// Operators whose built-in kernels are float-only.
pub fn requires_f32(op: Op) -> bool {
    matches!(
        op,
        Op::Conv2d
            | Op::DepthwiseConv2d
            | Op::BiasAdd
            | Op::Sigmoid
            | Op::Tanh
            | Op::Softmax
            | Op::MaxPool
            | Op::AvgPool
    )
}

/// Infers the output meta of every node. Total on valid models; otherwise
/// returns the first failure in topological order.
pub fn infer_shapes(model: &ModelSpec) -> Result<BTreeMap<NodeId, TensorMeta>, ShapeError> {
    let order = model.topo_order()?;
    let mut metas: BTreeMap<NodeId, TensorMeta> = BTreeMap::new();
    let placeholder_shape: BTreeMap<NodeId, &Vec<i64>> = model
        .placeholder_ids()
        .into_iter()
        .zip(model.inputs.iter())
        .collect();

    for id in order {
        let node = model.node(id).expect("topo order yields known nodes");
        let inputs: Vec<&TensorMeta> = node
            .inputs
            .iter()
            .map(|(src, _)| metas.get(src).expect("inputs precede consumers"))
            .collect();
        let meta = infer_node(node, &inputs, &placeholder_shape)?;
        metas.insert(id, meta);
    }
    Ok(metas)
}

pub(crate) fn infer_node(
    node: &ModelNode,
    inputs: &[&TensorMeta],
    placeholder_shape: &BTreeMap<NodeId, &Vec<i64>>,
) -> Result<TensorMeta, ShapeError> {
    let op = Op::from_name(&node.op).ok_or_else(|| ShapeError::ForeignOperator {
        node: node.id,
        op: node.op.clone(),
    })?;

    if requires_f32(op) && inputs.iter().any(|m| m.dtype != DType::F32) {
        return Err(err(node, "operator requires f32 operands", inputs));
    }

    match op {
        Op::Placeholder => {
            let shape = placeholder_shape
                .get(&node.id)
                .ok_or_else(|| err(node, "placeholder without a declared shape", inputs))?;
            Ok(TensorMeta::f32(shape))
        }
        Op::Const => {
            let shape = list_param(node, "shape")?.to_vec();
            let dtype = match node.params.get("dtype").and_then(|v| v.as_str()) {
                Some(name) => DType::from_name(name).ok_or_else(|| ShapeError::BadParam {
                    node: node.id,
                    op: node.op.clone(),
                    param: "dtype".to_string(),
                })?,
                None => DType::F32,
            };
            if shape.iter().any(|&d| d <= 0) {
                return Err(err(node, "const shape must be positive", inputs));
            }
            Ok(TensorMeta { shape, dtype })
        }
        Op::Conv2d | Op::DepthwiseConv2d => {
            let input = inputs[0];
            let [n, h, w, c] = rank4(node, input, inputs)?;
            let (fh, fw) = (int_param(node, "filter_h")?, int_param(node, "filter_w")?);
            let (ph, pw) = (int_param(node, "pad_h")?, int_param(node, "pad_w")?);
            let (sh, sw) = (int_param(node, "stride_h")?, int_param(node, "stride_w")?);
            let (dh, dw) = (int_param(node, "dilation_h")?, int_param(node, "dilation_w")?);
            if sh < 1 || sw < 1 || dh < 1 || dw < 1 || fh < 1 || fw < 1 || ph < 0 || pw < 0 {
                return Err(err(node, "conv parameters out of range", inputs));
            }
            let oh = conv_out_dim(h, fh, ph, sh, dh);
            let ow = conv_out_dim(w, fw, pw, sw, dw);
            if oh < 1 || ow < 1 {
                return Err(err(node, "conv output would be empty", inputs));
            }
            let oc = match op {
                Op::Conv2d => int_param(node, "out_channels")?,
                _ => c * int_param(node, "multiplier")?,
            };
            if oc < 1 {
                return Err(err(node, "output channels out of range", inputs));
            }
            Ok(TensorMeta::f32(&[n, oh, ow, oc]))
        }
        Op::MaxPool | Op::AvgPool => {
            let input = inputs[0];
            let [n, h, w, c] = rank4(node, input, inputs)?;
            let (kh, kw) = (int_param(node, "ksize_h")?, int_param(node, "ksize_w")?);
            let (ph, pw) = (int_param(node, "pad_h")?, int_param(node, "pad_w")?);
            let (sh, sw) = (int_param(node, "stride_h")?, int_param(node, "stride_w")?);
            if kh < 1 || kw < 1 || sh < 1 || sw < 1 || ph < 0 || pw < 0 {
                return Err(err(node, "pool parameters out of range", inputs));
            }
            let oh = conv_out_dim(h, kh, ph, sh, 1);
            let ow = conv_out_dim(w, kw, pw, sw, 1);
            if oh < 1 || ow < 1 {
                return Err(err(node, "pool output would be empty", inputs));
            }
            Ok(TensorMeta {
                shape: vec![n, oh, ow, c],
                dtype: input.dtype,
            })
        }
        Op::BiasAdd => {
            let input = inputs[0];
            rank4(node, input, inputs)?;
            Ok(input.clone())
        }
        Op::Add | Op::Mul | Op::Sub | Op::RealDiv => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape != b.shape {
                return Err(err(node, "elementwise operands differ in shape", inputs));
            }
            if a.dtype != b.dtype {
                return Err(err(node, "elementwise operands differ in dtype", inputs));
            }
            Ok(a.clone())
        }
        Op::Relu | Op::Relu6 | Op::Sigmoid | Op::Tanh | Op::Softmax => Ok(inputs[0].clone()),
        Op::Concat => {
            let axis = int_param(node, "axis")?;
            let first = inputs[0];
            let rank = first.shape.len() as i64;
            if axis < 0 || axis >= rank {
                return Err(err(node, format!("axis {axis} out of range"), inputs));
            }
            let mut axis_total = 0;
            for m in inputs {
                if m.shape.len() as i64 != rank {
                    return Err(err(node, "concat operands differ in rank", inputs));
                }
                if m.dtype != first.dtype {
                    return Err(err(node, "concat operands differ in dtype", inputs));
                }
                for (d, (&got, &want)) in m.shape.iter().zip(first.shape.iter()).enumerate() {
                    if d as i64 != axis && got != want {
                        return Err(err(
                            node,
                            format!("concat operands differ on non-axis dim {d}"),
                            inputs,
                        ));
                    }
                }
                axis_total += m.shape[axis as usize];
            }
            let mut shape = first.shape.clone();
            shape[axis as usize] = axis_total;
            Ok(TensorMeta {
                shape,
                dtype: first.dtype,
            })
        }
        Op::Reshape => {
            let input = inputs[0];
            let target = list_param(node, "shape")?.to_vec();
            if target.iter().any(|&d| d <= 0) {
                return Err(err(node, "reshape target must be positive", inputs));
            }
            let have: i64 = input.shape.iter().product();
            let want: i64 = target.iter().product();
            if have != want {
                return Err(err(
                    node,
                    format!("reshape element count {have} != {want}"),
                    inputs,
                ));
            }
            Ok(TensorMeta {
                shape: target,
                dtype: input.dtype,
            })
        }
        Op::Transpose => {
            let input = inputs[0];
            let perm = list_param(node, "perm")?;
            let rank = input.shape.len();
            let mut seen = vec![false; rank];
            if perm.len() != rank {
                return Err(err(node, "perm length != rank", inputs));
            }
            for &p in perm {
                if p < 0 || p as usize >= rank || seen[p as usize] {
                    return Err(err(node, "perm is not a permutation", inputs));
                }
                seen[p as usize] = true;
            }
            let shape = perm.iter().map(|&p| input.shape[p as usize]).collect();
            Ok(TensorMeta {
                shape,
                dtype: input.dtype,
            })
        }
        Op::Slice => {
            let input = inputs[0];
            let begin = list_param(node, "begin")?;
            let size = list_param(node, "size")?;
            let rank = input.shape.len();
            if begin.len() != rank || size.len() != rank {
                return Err(err(node, "begin/size length != rank", inputs));
            }
            for d in 0..rank {
                if begin[d] < 0 || size[d] < 1 || begin[d] + size[d] > input.shape[d] {
                    return Err(err(
                        node,
                        format!("slice out of bounds on dim {d}"),
                        inputs,
                    ));
                }
            }
            Ok(TensorMeta {
                shape: size.to_vec(),
                dtype: input.dtype,
            })
        }
        Op::Pad => {
            let input = inputs[0];
            let paddings = list_param(node, "paddings")?;
            let rank = input.shape.len();
            if paddings.len() != 2 * rank {
                return Err(err(node, "paddings length != 2*rank", inputs));
            }
            if paddings.iter().any(|&p| p < 0) {
                return Err(err(node, "negative padding", inputs));
            }
            let shape = input
                .shape
                .iter()
                .enumerate()
                .map(|(d, &dim)| dim + paddings[2 * d] + paddings[2 * d + 1])
                .collect();
            Ok(TensorMeta {
                shape,
                dtype: input.dtype,
            })
        }
        Op::Cast => {
            let input = inputs[0];
            let dtype = DType::from_name(str_param(node, "dtype")?).ok_or_else(|| {
                ShapeError::BadParam {
                    node: node.id,
                    op: node.op.clone(),
                    param: "dtype".to_string(),
                }
            })?;
            Ok(TensorMeta {
                shape: input.shape.clone(),
                dtype,
            })
        }
    }
}

fn rank4(
    node: &ModelNode,
    input: &TensorMeta,
    all: &[&TensorMeta],
) -> Result<[i64; 4], ShapeError> {
    match input.shape.as_slice() {
        &[n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(err(node, "operator requires a rank-4 NHWC operand", all)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{node, node_with_params, ModelSpec, ParamValue};

    #[test]
    fn relu_is_elementwise() {
        let model = ModelSpec {
            nodes: vec![node(0, "Placeholder", &[]), node(1, "Relu", &[0])],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 0,
        };
        let metas = infer_shapes(&model).unwrap();
        assert_eq!(metas[&1].shape, vec![1, 8, 8, 3]);
    }

    #[test]
    fn concat_sums_axis() {
        let model = ModelSpec {
            nodes: vec![
                node_with_params(
                    0,
                    "Const",
                    &[],
                    &[("shape", ParamValue::IntList(vec![1, 8, 8, 3]))],
                ),
                node_with_params(
                    1,
                    "Const",
                    &[],
                    &[("shape", ParamValue::IntList(vec![1, 8, 8, 4]))],
                ),
                node_with_params(2, "Concat", &[0, 1], &[("axis", ParamValue::Int(3))]),
            ],
            inputs: vec![],
            weights_seed: 0,
        };
        let metas = infer_shapes(&model).unwrap();
        assert_eq!(metas[&2].shape, vec![1, 8, 8, 7]);
    }

    #[test]
    fn mismatched_add_is_located() {
        let model = ModelSpec {
            nodes: vec![
                node_with_params(
                    0,
                    "Const",
                    &[],
                    &[("shape", ParamValue::IntList(vec![1, 8, 8, 3]))],
                ),
                node_with_params(
                    1,
                    "Const",
                    &[],
                    &[("shape", ParamValue::IntList(vec![1, 4, 8, 3]))],
                ),
                node(2, "Add", &[0, 1]),
            ],
            inputs: vec![],
            weights_seed: 0,
        };
        match infer_shapes(&model) {
            Err(ShapeError::Inference { node, .. }) => assert_eq!(node, 2),
            other => panic!("expected located inference error, got {other:?}"),
        }
    }

    #[test]
    fn conv_same_params_preserve_shape() {
        let model = ModelSpec {
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
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 0,
        };
        let metas = infer_shapes(&model).unwrap();
        assert_eq!(metas[&1].shape, vec![1, 8, 8, 4]);
    }

    #[test]
    fn foreign_operator_is_reported() {
        let model = ModelSpec {
            nodes: vec![node(0, "Placeholder", &[]), node(1, "Pow", &[0])],
            inputs: vec![vec![1, 4, 4, 1]],
            weights_seed: 0,
        };
        assert!(matches!(
            infer_shapes(&model),
            Err(ShapeError::ForeignOperator { node: 1, .. })
        ));
    }
}
