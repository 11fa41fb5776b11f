//! SAME-preserving parameter solving and whole-model parameter assignment.
//!
//! For padded spatial operators the solver enumerates every
//! (filter, stride, dilation, pad) tuple satisfying
//! `out = (in + 2*pad - dilation*(filter-1)) / stride = in` together with
//! `0 <= pad <= filter`, `1 <= stride <= max_stride` and
//! `1 <= dilation <= max_dilation`, then samples uniformly among the
//! solutions. Shape-free parameters are sampled straight from their domain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{
    BlockInstance, Graph, ModelNode, ModelSpec, NodeId, Op, OperatorKind, ParamDomain, ParamValue,
    Params,
};
use crate::rng::SplitMix64;
use crate::shapecalc::infer::{infer_node, TensorMeta};
use crate::shapecalc::ShapeError;

/// Caps for the padded-operator constraint system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_stride: i64,
    pub max_dilation: i64,
    pub filter_sizes: Vec<i64>,
    pub pool_sizes: Vec<i64>,
}

impl Default for SolverConfig {
    fn default() -> SolverConfig {
        SolverConfig {
            max_stride: 2,
            max_dilation: 2,
            filter_sizes: vec![1, 3, 5],
            pool_sizes: vec![1, 3, 5],
        }
    }
}

impl SolverConfig {
    /// A configuration must admit a stride-1 solution independent of the
    /// input extent, otherwise whole shape classes become ungenerable.
    pub fn validate(&self) -> Result<(), String> {
        if self.max_stride < 1 || self.max_dilation < 1 {
            return Err("stride/dilation caps must be at least 1".into());
        }
        if self.filter_sizes.is_empty() || self.pool_sizes.is_empty() {
            return Err("filter/pool size sets must be non-empty".into());
        }
        let stride1 = |sizes: &[i64], max_d: i64| {
            sizes.iter().any(|&f| {
                (1..=max_d).any(|d| {
                    let rhs = d * (f - 1);
                    rhs % 2 == 0 && rhs / 2 <= f
                })
            })
        };
        if !stride1(&self.filter_sizes, self.max_dilation) {
            return Err("no stride-1 convolution solution under these caps".into());
        }
        if !stride1(&self.pool_sizes, 1) {
            return Err("no stride-1 pooling solution under these caps".into());
        }
        Ok(())
    }
}

/// One solved (filter, stride, dilation, pad) tuple for a single spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisSolution {
    pub filter: i64,
    pub stride: i64,
    pub dilation: i64,
    pub pad: i64,
}

/// All tuples keeping the output extent equal to `input` on one axis.
pub fn enumerate_axis_solutions(
    input: i64,
    sizes: &[i64],
    max_stride: i64,
    max_dilation: i64,
) -> Vec<AxisSolution> {
    let mut out = Vec::new();
    for &filter in sizes {
        for stride in 1..=max_stride {
            for dilation in 1..=max_dilation {
                let rhs = input * (stride - 1) + dilation * (filter - 1);
                if rhs % 2 != 0 {
                    continue;
                }
                let pad = rhs / 2;
                if pad < 0 || pad > filter {
                    continue;
                }
                out.push(AxisSolution {
                    filter,
                    stride,
                    dilation,
                    pad,
                });
            }
        }
    }
    out
}

pub fn sample_domain(domain: &ParamDomain, rng: &mut SplitMix64) -> Option<ParamValue> {
    match domain {
        ParamDomain::Discrete { values } => Some(rng.choose(values).clone()),
        ParamDomain::IntRange { low, high } => Some(ParamValue::Int(rng.int_in(*low, *high))),
        ParamDomain::ShapeDependent => None,
    }
}

fn sampled_or(
    kind: &OperatorKind,
    name: &str,
    rng: &mut SplitMix64,
    fallback: ParamValue,
) -> ParamValue {
    kind.param_schema
        .iter()
        .find(|s| s.name == name)
        .and_then(|s| sample_domain(&s.domain, rng))
        .unwrap_or(fallback)
}

/// Solves SAME-preserving parameters for a padded spatial operator on the
/// given NHWC input shape.
pub fn solve_same_shape_params(
    input_shape: &[i64],
    op: Op,
    kind: &OperatorKind,
    cfg: &SolverConfig,
    rng: &mut SplitMix64,
) -> Result<Params, ShapeError> {
    let [_, h, w, _] = match input_shape {
        &[n, h, w, c] => [n, h, w, c],
        _ => {
            return Err(ShapeError::Unsatisfiable {
                op: op.name().to_string(),
                shape: input_shape.to_vec(),
            })
        }
    };
    let (sizes, max_dilation, filter_key) = match op {
        Op::Conv2d | Op::DepthwiseConv2d => (&cfg.filter_sizes, cfg.max_dilation, "filter"),
        Op::MaxPool | Op::AvgPool => (&cfg.pool_sizes, 1, "ksize"),
        _ => panic!("solve_same_shape_params on non-spatial operator {op:?}"),
    };
    let h_solutions = enumerate_axis_solutions(h, sizes, cfg.max_stride, max_dilation);
    let w_solutions = enumerate_axis_solutions(w, sizes, cfg.max_stride, max_dilation);
    if h_solutions.is_empty() || w_solutions.is_empty() {
        return Err(ShapeError::Unsatisfiable {
            op: op.name().to_string(),
            shape: input_shape.to_vec(),
        });
    }
    let hs = *rng.choose(&h_solutions);
    let ws = *rng.choose(&w_solutions);

    let mut params = Params::new();
    params.insert(format!("{filter_key}_h"), ParamValue::Int(hs.filter));
    params.insert(format!("{filter_key}_w"), ParamValue::Int(ws.filter));
    params.insert("stride_h".into(), ParamValue::Int(hs.stride));
    params.insert("stride_w".into(), ParamValue::Int(ws.stride));
    params.insert("pad_h".into(), ParamValue::Int(hs.pad));
    params.insert("pad_w".into(), ParamValue::Int(ws.pad));
    if matches!(op, Op::Conv2d | Op::DepthwiseConv2d) {
        params.insert("dilation_h".into(), ParamValue::Int(hs.dilation));
        params.insert("dilation_w".into(), ParamValue::Int(ws.dilation));
    }
    params.insert("padding".into(), ParamValue::Str("SAME".into()));
    match op {
        Op::Conv2d => {
            params.insert(
                "out_channels".into(),
                sampled_or(kind, "out_channels", rng, ParamValue::Int(4)),
            );
        }
        Op::DepthwiseConv2d => {
            params.insert(
                "multiplier".into(),
                sampled_or(kind, "multiplier", rng, ParamValue::Int(1)),
            );
        }
        _ => {}
    }
    Ok(params)
}

/// Shape vocabulary for graph inputs, const sources and the tensor-shape
/// mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDomain {
    pub batch: Vec<i64>,
    pub spatial: Vec<i64>,
    pub channel: Vec<i64>,
}

impl Default for ShapeDomain {
    fn default() -> ShapeDomain {
        ShapeDomain {
            batch: vec![1],
            spatial: vec![4, 8, 16, 32, 64],
            channel: vec![1, 3, 4, 8, 16],
        }
    }
}

impl ShapeDomain {
    /// Free per-dim sampling over the whole grid; this is the space the
    /// tensor-shape mutation explores.
    pub fn sample(&self, rng: &mut SplitMix64) -> Vec<i64> {
        vec![
            *rng.choose(&self.batch),
            *rng.choose(&self.spatial),
            *rng.choose(&self.spatial),
            *rng.choose(&self.channel),
        ]
    }

    /// One of the fixed preset shapes (square spatial extents zipped with
    /// the channel ladder) used when shape mutation is off: five presets
    /// under the default domain.
    pub fn preset(&self, rng: &mut SplitMix64) -> Vec<i64> {
        let count = self.spatial.len().max(self.channel.len()).max(1);
        let i = rng.below(count);
        let spatial = self.spatial[i % self.spatial.len()];
        vec![
            self.batch[i % self.batch.len()],
            spatial,
            spatial,
            self.channel[i % self.channel.len()],
        ]
    }

    /// Per-dim value sets in NHWC order.
    pub fn dim_choices(&self, dim: usize) -> &[i64] {
        match dim {
            0 => &self.batch,
            1 | 2 => &self.spatial,
            _ => &self.channel,
        }
    }

    pub fn contains(&self, shape: &[i64]) -> bool {
        shape.len() == 4
            && shape
                .iter()
                .enumerate()
                .all(|(d, v)| self.dim_choices(d).contains(v))
    }
}

pub fn sample_input_shape(domain: &ShapeDomain, rng: &mut SplitMix64) -> Vec<i64> {
    domain.sample(rng)
}

/// Assigns concrete parameters to every node of an expanded graph and packs
/// the result into a model. `input_shapes` must align with the graph's
/// Placeholder nodes in id order. Metas are propagated leniently: operand
/// mismatches that the adapter pass repairs are tolerated here.
pub fn assign_params(
    expanded: &Graph,
    schemas: &BTreeMap<NodeId, OperatorKind>,
    input_shapes: &[Vec<i64>],
    cfg: &SolverConfig,
    domain: &ShapeDomain,
    rng: &mut SplitMix64,
    weights_seed: u64,
) -> Result<ModelSpec, ShapeError> {
    let order = expanded.topo_order().map_err(|_| ShapeError::Model(
        crate::ir::ModelError::Cyclic,
    ))?;

    let placeholder_ids: Vec<NodeId> = {
        let mut ids: Vec<NodeId> = expanded
            .nodes
            .iter()
            .filter(|n| {
                matches!(&n.block, Some(BlockInstance::Operator(name)) if name == "Placeholder")
            })
            .map(|n| n.id)
            .collect();
        ids.sort_unstable();
        ids
    };
    assert_eq!(
        placeholder_ids.len(),
        input_shapes.len(),
        "input shape count must match placeholder count"
    );
    let shape_by_placeholder: BTreeMap<NodeId, &Vec<i64>> = placeholder_ids
        .iter()
        .copied()
        .zip(input_shapes.iter())
        .collect();

    let mut metas: BTreeMap<NodeId, TensorMeta> = BTreeMap::new();
    let mut nodes: Vec<ModelNode> = Vec::with_capacity(expanded.node_count());

    for &id in &order {
        let gnode = expanded.node(id).expect("topo order yields known nodes");
        let op_name = match &gnode.block {
            Some(BlockInstance::Operator(name)) => name.clone(),
            _ => panic!("assign_params expects an expanded graph"),
        };
        let kind = schemas
            .get(&id)
            .cloned()
            .unwrap_or_else(|| OperatorKind::resolve(&op_name));
        let in_edges = expanded.in_edges(id);
        let input_metas: Vec<TensorMeta> = in_edges
            .iter()
            .map(|e| metas.get(&e.src).expect("inputs precede consumers").clone())
            .collect();

        let params = assign_node_params(
            &op_name,
            &kind,
            &input_metas,
            cfg,
            domain,
            rng,
        )?;

        let mnode = ModelNode {
            id,
            op: op_name,
            params,
            inputs: in_edges.iter().map(|e| (e.src, e.src_slot)).collect(),
        };
        let meta = lenient_node_meta(&mnode, &input_metas, &shape_by_placeholder)?;
        metas.insert(id, meta);
        nodes.push(mnode);
    }

    nodes.sort_by_key(|n| n.id);
    Ok(ModelSpec {
        nodes,
        inputs: input_shapes.to_vec(),
        weights_seed,
    })
}

fn assign_node_params(
    op_name: &str,
    kind: &OperatorKind,
    inputs: &[TensorMeta],
    cfg: &SolverConfig,
    domain: &ShapeDomain,
    rng: &mut SplitMix64,
) -> Result<Params, ShapeError> {
    let Some(op) = Op::from_name(op_name) else {
        // Foreign operator: sample whatever closed domains the corpus gave it.
        let mut params = Params::new();
        for spec in &kind.param_schema {
            if let Some(v) = sample_domain(&spec.domain, rng) {
                params.insert(spec.name.clone(), v);
            }
        }
        return Ok(params);
    };

    match op {
        Op::Conv2d | Op::DepthwiseConv2d | Op::MaxPool | Op::AvgPool => {
            let shape = inputs
                .first()
                .map(|m| m.shape.clone())
                .unwrap_or_else(|| domain.sample(rng));
            solve_same_shape_params(&shape, op, kind, cfg, rng)
        }
        Op::Const => {
            let mut params = Params::new();
            params.insert("shape".into(), ParamValue::IntList(domain.preset(rng)));
            params.insert(
                "dtype".into(),
                sampled_or(kind, "dtype", rng, ParamValue::Str("f32".into())),
            );
            Ok(params)
        }
        Op::Concat => {
            let mut params = Params::new();
            params.insert("axis".into(), sampled_or(kind, "axis", rng, ParamValue::Int(3)));
            Ok(params)
        }
        Op::Reshape => {
            let input = inputs.first().cloned().unwrap_or(TensorMeta::f32(&[1, 4, 4, 1]));
            let mut dims = input.shape.clone();
            rng.shuffle(&mut dims);
            let mut params = Params::new();
            params.insert("shape".into(), ParamValue::IntList(dims));
            Ok(params)
        }
        Op::Transpose => {
            let rank = inputs.first().map(|m| m.shape.len()).unwrap_or(4);
            let mut perm: Vec<i64> = (0..rank as i64).collect();
            rng.shuffle(&mut perm);
            let mut params = Params::new();
            params.insert("perm".into(), ParamValue::IntList(perm));
            Ok(params)
        }
        Op::Slice => {
            let input = inputs.first().cloned().unwrap_or(TensorMeta::f32(&[1, 4, 4, 1]));
            let mut begin = Vec::new();
            let mut size = Vec::new();
            for &dim in &input.shape {
                let b = rng.int_in(0, dim - 1);
                let s = rng.int_in(1, dim - b);
                begin.push(b);
                size.push(s);
            }
            let mut params = Params::new();
            params.insert("begin".into(), ParamValue::IntList(begin));
            params.insert("size".into(), ParamValue::IntList(size));
            Ok(params)
        }
        Op::Pad => {
            let rank = inputs.first().map(|m| m.shape.len()).unwrap_or(4);
            let mut paddings = vec![0i64; 2 * rank];
            // Batch stays unpadded; spatial and channel dims take 0..=2.
            for d in 1..rank {
                paddings[2 * d] = rng.int_in(0, 2);
                paddings[2 * d + 1] = rng.int_in(0, 2);
            }
            let mut params = Params::new();
            params.insert("paddings".into(), ParamValue::IntList(paddings));
            Ok(params)
        }
        Op::Cast => {
            let mut params = Params::new();
            params.insert(
                "dtype".into(),
                sampled_or(kind, "dtype", rng, ParamValue::Str("f32".into())),
            );
            Ok(params)
        }
        _ => {
            let mut params = Params::new();
            for spec in &kind.param_schema {
                if let Some(v) = sample_domain(&spec.domain, rng) {
                    params.insert(spec.name.clone(), v);
                }
            }
            Ok(params)
        }
    }
}

/// Node meta under the lenient rules: aggregation operand mismatches resolve
/// to the slot-0 operand (what the adapter pass will enforce), foreign
/// operators pass their first operand through.
pub(crate) fn lenient_node_meta(
    node: &ModelNode,
    inputs: &[TensorMeta],
    placeholder_shape: &BTreeMap<NodeId, &Vec<i64>>,
) -> Result<TensorMeta, ShapeError> {
    let input_refs: Vec<&TensorMeta> = inputs.iter().collect();
    match infer_node(node, &input_refs, placeholder_shape) {
        Ok(meta) => Ok(meta),
        Err(ShapeError::ForeignOperator { .. }) => Ok(inputs
            .first()
            .cloned()
            .unwrap_or(TensorMeta::f32(&[1, 8, 8, 3]))),
        Err(e) => {
            let Some(op) = Op::from_name(&node.op) else {
                return Err(e);
            };
            if !op.is_aggregation() || inputs.is_empty() {
                return Err(e);
            }
            let first = &inputs[0];
            if inputs.iter().any(|m| m.shape.len() != first.shape.len()) {
                return Err(e);
            }
            let mut shape = first.shape.clone();
            if op == Op::Concat {
                let axis = node
                    .params
                    .get("axis")
                    .and_then(|v| v.as_int())
                    .unwrap_or(-1);
                if axis < 0 || axis as usize >= shape.len() {
                    return Err(e);
                }
                shape[axis as usize] = inputs.iter().map(|m| m.shape[axis as usize]).sum();
            }
            Ok(TensorMeta {
                shape,
                dtype: first.dtype,
            })
        }
    }
}

/// Total meta propagation usable on models the strict pass rejects
/// (mismatched aggregations before adapter insertion, foreign operators).
/// Coincides with `infer_shapes` on every valid model.
pub fn lenient_shapes(model: &ModelSpec) -> Result<BTreeMap<NodeId, TensorMeta>, ShapeError> {
    let order = model.topo_order()?;
    let placeholder_shape: BTreeMap<NodeId, &Vec<i64>> = model
        .placeholder_ids()
        .into_iter()
        .zip(model.inputs.iter())
        .collect();
    let mut metas: BTreeMap<NodeId, TensorMeta> = BTreeMap::new();
    for id in order {
        let node = model.node(id).expect("topo order yields known nodes");
        let inputs: Vec<TensorMeta> = node
            .inputs
            .iter()
            .map(|(src, _)| metas[src].clone())
            .collect();
        let meta = lenient_node_meta(node, &inputs, &placeholder_shape)?;
        metas.insert(id, meta);
    }
    Ok(metas)
}
