//! Built-in operator registry: names, arities and parameter schemas for the
//! operator set both interpreters can execute. Corpus files may reference
//! operators outside this set; those are carried through generation and
//! serialization but can only be executed by an external engine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Built-in operators. `from_name` returns `None` for foreign operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Placeholder,
    Const,
    Conv2d,
    DepthwiseConv2d,
    BiasAdd,
    Add,
    Mul,
    Sub,
    RealDiv,
    Relu,
    Relu6,
    Sigmoid,
    Tanh,
    Softmax,
    MaxPool,
    AvgPool,
    Concat,
    Reshape,
    Transpose,
    Slice,
    Pad,
    Cast,
}

pub const ALL_OPS: [Op; 22] = [
    Op::Placeholder,
    Op::Const,
    Op::Conv2d,
    Op::DepthwiseConv2d,
    Op::BiasAdd,
    Op::Add,
    Op::Mul,
    Op::Sub,
    Op::RealDiv,
    Op::Relu,
    Op::Relu6,
    Op::Sigmoid,
    Op::Tanh,
    Op::Softmax,
    Op::MaxPool,
    Op::AvgPool,
    Op::Concat,
    Op::Reshape,
    Op::Transpose,
    Op::Slice,
    Op::Pad,
    Op::Cast,
];

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Placeholder => "Placeholder",
            Op::Const => "Const",
            Op::Conv2d => "Conv2d",
            Op::DepthwiseConv2d => "DepthwiseConv2d",
            Op::BiasAdd => "BiasAdd",
            Op::Add => "Add",
            Op::Mul => "Mul",
            Op::Sub => "Sub",
            Op::RealDiv => "RealDiv",
            Op::Relu => "Relu",
            Op::Relu6 => "Relu6",
            Op::Sigmoid => "Sigmoid",
            Op::Tanh => "Tanh",
            Op::Softmax => "Softmax",
            Op::MaxPool => "MaxPool",
            Op::AvgPool => "AvgPool",
            Op::Concat => "Concat",
            Op::Reshape => "Reshape",
            Op::Transpose => "Transpose",
            Op::Slice => "Slice",
            Op::Pad => "Pad",
            Op::Cast => "Cast",
        }
    }

    pub fn from_name(name: &str) -> Option<Op> {
        ALL_OPS.iter().copied().find(|op| op.name() == name)
    }

    pub fn arity(self) -> Arity {
        match self {
            Op::Placeholder | Op::Const => Arity::Fixed(0),
            Op::Add | Op::Mul | Op::Sub | Op::RealDiv => Arity::Fixed(2),
            Op::Concat => Arity::Variadic { min: 2 },
            _ => Arity::Fixed(1),
        }
    }

    /// Multi-input operators whose operands must agree in shape/dtype before
    /// execution; the adapter pass targets exactly these.
    pub fn is_aggregation(self) -> bool {
        matches!(
            self,
            Op::Add | Op::Mul | Op::Sub | Op::RealDiv | Op::Concat
        )
    }

    /// Operators with solver-owned padding/stride parameters.
    pub fn is_padded_spatial(self) -> bool {
        matches!(
            self,
            Op::Conv2d | Op::DepthwiseConv2d | Op::MaxPool | Op::AvgPool
        )
    }

    /// Default parameter schema for generation. Solver-owned parameters are
    /// `ShapeDependent`; the rest are sampled directly from their domain.
    pub fn param_schema(self) -> Vec<ParamSpec> {
        fn disc(name: &str, values: &[i64]) -> ParamSpec {
            ParamSpec {
                name: name.to_string(),
                domain: ParamDomain::Discrete {
                    values: values.iter().map(|&v| ParamValue::Int(v)).collect(),
                },
            }
        }
        fn strs(name: &str, values: &[&str]) -> ParamSpec {
            ParamSpec {
                name: name.to_string(),
                domain: ParamDomain::Discrete {
                    values: values
                        .iter()
                        .map(|v| ParamValue::Str(v.to_string()))
                        .collect(),
                },
            }
        }
        fn solved(name: &str) -> ParamSpec {
            ParamSpec {
                name: name.to_string(),
                domain: ParamDomain::ShapeDependent,
            }
        }

        match self {
            Op::Conv2d => vec![
                disc("out_channels", &[1, 3, 4, 8, 16]),
                solved("filter_h"),
                solved("filter_w"),
                solved("stride_h"),
                solved("stride_w"),
                solved("dilation_h"),
                solved("dilation_w"),
                solved("pad_h"),
                solved("pad_w"),
                strs("padding", &["SAME"]),
            ],
            Op::DepthwiseConv2d => vec![
                disc("multiplier", &[1, 2]),
                solved("filter_h"),
                solved("filter_w"),
                solved("stride_h"),
                solved("stride_w"),
                solved("dilation_h"),
                solved("dilation_w"),
                solved("pad_h"),
                solved("pad_w"),
                strs("padding", &["SAME"]),
            ],
            Op::MaxPool | Op::AvgPool => vec![
                solved("ksize_h"),
                solved("ksize_w"),
                solved("stride_h"),
                solved("stride_w"),
                solved("pad_h"),
                solved("pad_w"),
                strs("padding", &["SAME"]),
            ],
            Op::Concat => vec![disc("axis", &[0, 1, 2, 3])],
            Op::Reshape => vec![solved("shape")],
            Op::Transpose => vec![solved("perm")],
            Op::Slice => vec![solved("begin"), solved("size")],
            Op::Pad => vec![solved("paddings")],
            Op::Cast => vec![strs("dtype", &["f32", "i32", "i8"])],
            Op::Const => vec![solved("shape"), strs("dtype", &["f32"])],
            _ => vec![],
        }
    }
}

/// How many inputs an operator accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arity {
    Fixed(u32),
    Variadic { min: u32 },
}

impl Arity {
    pub fn min(self) -> u32 {
        match self {
            Arity::Fixed(n) => n,
            Arity::Variadic { min } => min,
        }
    }

    pub fn accepts(self, count: u32) -> bool {
        match self {
            Arity::Fixed(n) => count == n,
            Arity::Variadic { min } => count >= min,
        }
    }
}

/// Arity used for operators referenced by a corpus but unknown to the
/// built-in registry. Treating them as unary matches how subgraph in-degrees
/// are conventionally declared.
pub const FOREIGN_ARITY: Arity = Arity::Fixed(1);

pub fn arity_of(name: &str) -> Arity {
    Op::from_name(name).map(Op::arity).unwrap_or(FOREIGN_ARITY)
}

/// A concrete parameter value as it appears in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Str(String),
    IntList(Vec<i64>),
}

impl ParamValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int_list(&self) -> Option<&[i64]> {
        match self {
            ParamValue::IntList(v) => Some(v),
            _ => None,
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

/// Value domain of one operator parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamDomain {
    Discrete { values: Vec<ParamValue> },
    IntRange { low: i64, high: i64 },
    /// Owned by the shapes-and-parameters solver.
    ShapeDependent,
}

impl ParamDomain {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ParamDomain::Discrete { values } if values.is_empty() => {
                Err("discrete domain is empty".to_string())
            }
            ParamDomain::IntRange { low, high } if low > high => {
                Err(format!("integer range {low}..{high} is inverted"))
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match self {
            ParamDomain::Discrete { values } => values.contains(value),
            ParamDomain::IntRange { low, high } => value
                .as_int()
                .map(|v| *low <= v && v <= *high)
                .unwrap_or(false),
            ParamDomain::ShapeDependent => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub domain: ParamDomain,
}

/// An operator type as seen by the generator: name, arity class and the
/// parameter schema in effect for a given occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorKind {
    pub name: String,
    pub arity: Arity,
    pub param_schema: Vec<ParamSpec>,
}

impl OperatorKind {
    pub fn builtin(op: Op) -> OperatorKind {
        OperatorKind {
            name: op.name().to_string(),
            arity: op.arity(),
            param_schema: op.param_schema(),
        }
    }

    pub fn foreign(name: &str) -> OperatorKind {
        OperatorKind {
            name: name.to_string(),
            arity: FOREIGN_ARITY,
            param_schema: vec![],
        }
    }

    pub fn resolve(name: &str) -> OperatorKind {
        match Op::from_name(name) {
            Some(op) => OperatorKind::builtin(op),
            None => OperatorKind::foreign(name),
        }
    }
}
