//! Operator registry: dynamism classes, attribute schemas, and the
//! forward/backward transfer functions over the shape/value lattice.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AttrValue, DType, GraphError, Node};
use crate::shape::{ShapeInfo, ValueInfo};
use crate::sym::{ArithOp, DimValue, SymError};

/// Default cap on the length of tracked integer values.
pub const DEFAULT_VALUE_CAP: usize = 32;

/// `Slice` ends at or beyond this magnitude mean "to the end of the axis".
pub const SLICE_END: i64 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DynClass {
    #[serde(rename = "ISDO")]
    Isdo,
    #[serde(rename = "ISDOS")]
    Isdos,
    #[serde(rename = "ISVDOS")]
    Isvdos,
    #[serde(rename = "EDO")]
    Edo,
}

impl DynClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DynClass::Isdo => "ISDO",
            DynClass::Isdos => "ISDOS",
            DynClass::Isvdos => "ISVDOS",
            DynClass::Edo => "EDO",
        }
    }
}

/// How an op participates in fusion groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionRole {
    Elementwise,
    Broadcast,
    Reduction,
    Heavy,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Shape,
    ConstantOfShape,
    EyeLike,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Round,
    Cast,
    Softmax,
    Concat,
    Conv,
    MatMul,
    MaxPool,
    AveragePool,
    Gather,
    ReduceSum,
    ReduceMean,
    Transpose,
    Unsqueeze,
    Reshape,
    Slice,
    Expand,
    Range,
    Resize,
    Upsample,
    TopK,
    NonZero,
    NonMaxSuppression,
    If,
    Loop,
    Switch,
    Combine,
    Opaque,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrKind {
    Int,
    Ints,
    Str,
}

#[derive(Clone, Copy, Debug)]
pub struct AttrSpec {
    pub name: &'static str,
    pub kind: AttrKind,
    pub required: bool,
}

const fn attr(name: &'static str, kind: AttrKind) -> AttrSpec {
    AttrSpec {
        name,
        kind,
        required: false,
    }
}

const fn req(name: &'static str, kind: AttrKind) -> AttrSpec {
    AttrSpec {
        name,
        kind,
        required: true,
    }
}

/// Static description of one operator.
#[derive(Clone, Copy, Debug)]
pub struct OpSpec {
    pub name: &'static str,
    pub kind: OpKind,
    pub class: DynClass,
    pub min_inputs: usize,
    /// `None` for variadic.
    pub max_inputs: Option<usize>,
    pub min_outputs: usize,
    pub max_outputs: Option<usize>,
    pub attrs: &'static [AttrSpec],
    /// Inputs whose values determine the output shape.
    pub shape_inputs: &'static [usize],
    pub fusion: FusionRole,
    /// Any attribute key is accepted.
    pub open_attrs: bool,
}

use AttrKind::{Int, Ints, Str};
use DynClass::{Edo, Isdo, Isdos, Isvdos};

#[allow(clippy::too_many_arguments)]
const fn spec(
    name: &'static str,
    kind: OpKind,
    class: DynClass,
    inputs: (usize, Option<usize>),
    outputs: (usize, Option<usize>),
    attrs: &'static [AttrSpec],
    shape_inputs: &'static [usize],
    fusion: FusionRole,
) -> OpSpec {
    OpSpec {
        name,
        kind,
        class,
        min_inputs: inputs.0,
        max_inputs: inputs.1,
        min_outputs: outputs.0,
        max_outputs: outputs.1,
        attrs,
        shape_inputs,
        fusion,
        open_attrs: false,
    }
}

const ONE: (usize, Option<usize>) = (1, Some(1));
const TWO: (usize, Option<usize>) = (2, Some(2));
const POOL_ATTRS: &[AttrSpec] = &[
    req("kernel_shape", Ints),
    attr("pads", Ints),
    attr("strides", Ints),
];
const REDUCE_ATTRS: &[AttrSpec] = &[attr("axes", Ints), attr("keepdims", Int)];
const DTYPE_ATTR: &[AttrSpec] = &[attr("dtype", Str)];

const fn opaque_spec(name: &'static str, kind: OpKind) -> OpSpec {
    OpSpec {
        name,
        kind,
        class: Edo,
        min_inputs: 0,
        max_inputs: None,
        min_outputs: 1,
        max_outputs: None,
        attrs: &[],
        shape_inputs: &[],
        fusion: FusionRole::None,
        open_attrs: true,
    }
}

/// The full catalog, in a stable order.
pub static CATALOG: &[OpSpec] = &[
    spec("Shape", OpKind::Shape, Isdo, ONE, ONE, &[], &[], FusionRole::None),
    spec(
        "ConstantOfShape",
        OpKind::ConstantOfShape,
        Isdo,
        ONE,
        ONE,
        &[attr("value", Int), attr("dtype", Str)],
        &[],
        FusionRole::None,
    ),
    spec("EyeLike", OpKind::EyeLike, Isdo, ONE, ONE, DTYPE_ATTR, &[], FusionRole::None),
    spec("Add", OpKind::Add, Isdos, TWO, ONE, &[], &[], FusionRole::Broadcast),
    spec("Sub", OpKind::Sub, Isdos, TWO, ONE, &[], &[], FusionRole::Broadcast),
    spec("Mul", OpKind::Mul, Isdos, TWO, ONE, &[], &[], FusionRole::Broadcast),
    spec("Div", OpKind::Div, Isdos, TWO, ONE, &[], &[], FusionRole::Broadcast),
    spec("Relu", OpKind::Relu, Isdos, ONE, ONE, &[], &[], FusionRole::Elementwise),
    spec("Sigmoid", OpKind::Sigmoid, Isdos, ONE, ONE, &[], &[], FusionRole::Elementwise),
    spec("Round", OpKind::Round, Isdos, ONE, ONE, &[], &[], FusionRole::Elementwise),
    spec("Cast", OpKind::Cast, Isdos, ONE, ONE, &[req("to", Str)], &[], FusionRole::Elementwise),
    spec("Softmax", OpKind::Softmax, Isdos, ONE, ONE, &[attr("axis", Int)], &[], FusionRole::Reduction),
    spec("Concat", OpKind::Concat, Isdos, (1, None), ONE, &[req("axis", Int)], &[], FusionRole::None),
    spec(
        "Conv",
        OpKind::Conv,
        Isdos,
        (2, Some(3)),
        ONE,
        &[attr("pads", Ints), attr("strides", Ints), attr("group", Int)],
        &[],
        FusionRole::Heavy,
    ),
    spec("MatMul", OpKind::MatMul, Isdos, TWO, ONE, &[], &[], FusionRole::Heavy),
    spec("MaxPool", OpKind::MaxPool, Isdos, ONE, ONE, POOL_ATTRS, &[], FusionRole::Heavy),
    spec("AveragePool", OpKind::AveragePool, Isdos, ONE, ONE, POOL_ATTRS, &[], FusionRole::Heavy),
    spec("Gather", OpKind::Gather, Isdos, TWO, ONE, &[attr("axis", Int)], &[], FusionRole::None),
    spec("ReduceSum", OpKind::ReduceSum, Isdos, ONE, ONE, REDUCE_ATTRS, &[], FusionRole::Reduction),
    spec("ReduceMean", OpKind::ReduceMean, Isdos, ONE, ONE, REDUCE_ATTRS, &[], FusionRole::Reduction),
    spec("Transpose", OpKind::Transpose, Isdos, ONE, ONE, &[attr("perm", Ints)], &[], FusionRole::None),
    spec("Unsqueeze", OpKind::Unsqueeze, Isdos, ONE, ONE, &[req("axes", Ints)], &[], FusionRole::None),
    spec("Reshape", OpKind::Reshape, Isvdos, TWO, ONE, &[], &[1], FusionRole::None),
    spec("Slice", OpKind::Slice, Isvdos, (3, Some(5)), ONE, &[], &[1, 2, 3, 4], FusionRole::None),
    spec("Expand", OpKind::Expand, Isvdos, TWO, ONE, &[], &[1], FusionRole::None),
    spec("Range", OpKind::Range, Isvdos, (3, Some(3)), ONE, &[], &[0, 1, 2], FusionRole::None),
    spec("Resize", OpKind::Resize, Isvdos, TWO, ONE, &[], &[1], FusionRole::None),
    spec("Upsample", OpKind::Upsample, Isvdos, TWO, ONE, &[], &[1], FusionRole::None),
    spec("TopK", OpKind::TopK, Isvdos, TWO, TWO, &[attr("axis", Int)], &[1], FusionRole::None),
    spec("NonZero", OpKind::NonZero, Edo, ONE, ONE, &[], &[], FusionRole::None),
    spec(
        "NonMaxSuppression",
        OpKind::NonMaxSuppression,
        Edo,
        (2, Some(5)),
        ONE,
        &[],
        &[],
        FusionRole::None,
    ),
    opaque_spec("If", OpKind::If),
    opaque_spec("Loop", OpKind::Loop),
    spec("Switch", OpKind::Switch, Edo, TWO, (2, None), &[], &[], FusionRole::None),
    spec("Combine", OpKind::Combine, Edo, (2, None), ONE, &[], &[], FusionRole::None),
];

static OPAQUE: OpSpec = opaque_spec("Opaque", OpKind::Opaque);

pub fn lookup(name: &str) -> Option<&'static OpSpec> {
    CATALOG.iter().find(|s| s.name == name)
}

/// The catalog record governing `node` (opaque nodes get the generic EDO record).
pub fn spec_of(node: &Node) -> &'static OpSpec {
    if node.opaque {
        return &OPAQUE;
    }
    lookup(&node.op).unwrap_or(&OPAQUE)
}

/// Validate arity and attributes of `node` against its catalog entry.
pub fn check_schema(node: &Node) -> Result<(), GraphError> {
    let bad = |msg: String| GraphError::Schema {
        node: node.id.clone(),
        op: node.op.clone(),
        msg,
    };
    if node.opaque {
        if node.outputs.is_empty() {
            return Err(bad("an opaque node needs at least one output".into()));
        }
        return Ok(());
    }
    let Some(spec) = lookup(&node.op) else {
        return Err(GraphError::UnknownOp {
            node: node.id.clone(),
            op: node.op.clone(),
        });
    };
    let within = |n: usize, lo: usize, hi: Option<usize>| n >= lo && hi.is_none_or(|h| n <= h);
    if !within(node.inputs.len(), spec.min_inputs, spec.max_inputs) {
        return Err(bad(format!(
            "expects {} inputs, got {}",
            arity_text(spec.min_inputs, spec.max_inputs),
            node.inputs.len()
        )));
    }
    if !within(node.outputs.len(), spec.min_outputs, spec.max_outputs) {
        return Err(bad(format!(
            "expects {} outputs, got {}",
            arity_text(spec.min_outputs, spec.max_outputs),
            node.outputs.len()
        )));
    }
    if spec.open_attrs {
        return Ok(());
    }
    for (key, value) in &node.attrs {
        let Some(a) = spec.attrs.iter().find(|a| a.name == key) else {
            return Err(bad(format!("unknown attribute `{key}`")));
        };
        let ok = matches!(
            (a.kind, value),
            (AttrKind::Int, AttrValue::Int(_))
                | (AttrKind::Ints, AttrValue::Ints(_))
                | (AttrKind::Str, AttrValue::Str(_))
        );
        if !ok {
            return Err(bad(format!("attribute `{key}` has the wrong type")));
        }
    }
    for a in spec.attrs.iter().filter(|a| a.required) {
        if !node.attrs.contains_key(a.name) {
            return Err(bad(format!("missing attribute `{}`", a.name)));
        }
    }
    for key in ["dtype", "to"] {
        if let Some(s) = node.attr_str(key) {
            if DType::parse(s).is_none() {
                return Err(bad(format!("unknown dtype `{s}`")));
            }
        }
    }
    if node.kind() == OpKind::Combine && node.inputs.len() < 2 {
        return Err(bad("Combine needs at least two inputs".into()));
    }
    Ok(())
}

fn arity_text(lo: usize, hi: Option<usize>) -> String {
    match hi {
        Some(h) if h == lo => lo.to_string(),
        Some(h) => format!("{lo}..={h}"),
        None => format!("at least {lo}"),
    }
}

/// Effective class of `node`: an ISVDOS node whose shape-determining inputs
/// are all statically known (`known_value(name)`) behaves as ISDOS.
pub fn classify(node: &Node, known_value: impl Fn(&str) -> bool) -> DynClass {
    let spec = spec_of(node);
    if spec.class != DynClass::Isvdos {
        return spec.class;
    }
    let all_known = spec
        .shape_inputs
        .iter()
        .filter_map(|i| node.inputs.get(*i))
        .all(|t| known_value(t));
    if all_known {
        DynClass::Isdos
    } else {
        DynClass::Isvdos
    }
}

/// Output dtypes of `node` given its input dtypes.
pub fn output_dtypes(node: &Node, ins: &[DType]) -> Result<Vec<DType>, String> {
    let attr_dtype = |key: &str, default: DType| -> DType {
        node.attr_str(key).and_then(DType::parse).unwrap_or(default)
    };
    let first = ins.first().copied().unwrap_or(DType::F32);
    let n = node.outputs.len();
    let out = match node.kind() {
        OpKind::Shape | OpKind::NonZero | OpKind::NonMaxSuppression => vec![DType::I64],
        OpKind::ConstantOfShape => vec![attr_dtype("dtype", DType::F32)],
        OpKind::EyeLike => vec![attr_dtype("dtype", first)],
        OpKind::Cast => vec![attr_dtype("to", first)],
        OpKind::TopK => vec![first, DType::I64],
        OpKind::Switch => vec![first; n],
        OpKind::Combine => {
            if ins.iter().any(|d| *d != first) {
                return Err("Combine inputs must share one dtype".into());
            }
            vec![first]
        }
        OpKind::If | OpKind::Loop | OpKind::Opaque => vec![attr_dtype("dtype", DType::F32); n],
        OpKind::Range => {
            if !first.is_integer() {
                return Err("Range operands must be integers".into());
            }
            vec![first]
        }
        _ => vec![first],
    };
    Ok(out)
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum OpError {
    #[error("{what}: {a} vs {b}")]
    Contradiction {
        what: String,
        a: DimValue,
        b: DimValue,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sym(#[from] SymError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, OpError> {
    Err(OpError::Invalid(msg.into()))
}

fn contradiction<T>(what: &str, a: &DimValue, b: &DimValue) -> Result<T, OpError> {
    Err(OpError::Contradiction {
        what: what.to_string(),
        a: a.clone(),
        b: b.clone(),
    })
}

fn ap(op: ArithOp, a: &DimValue, b: &DimValue) -> Result<DimValue, OpError> {
    Ok(DimValue::apply(op, a, b)?)
}

fn k(v: i64) -> DimValue {
    DimValue::Known(v)
}

/// Broadcast one dimension pair. The result is sound for every runtime
/// instantiation under which the broadcast succeeds.
pub fn broadcast_dim(a: &DimValue, b: &DimValue) -> Result<DimValue, OpError> {
    use DimValue::*;
    Ok(match (a, b) {
        _ if a == b => a.clone(),
        (Known(1), x) | (x, Known(1)) => x.clone(),
        (Undef, _) | (_, Undef) => Undef,
        (Known(_), Known(_)) => return contradiction("broadcast of unequal dims", a, b),
        (Known(v), _) | (_, Known(v)) => Known(*v),
        (Nac, _) | (_, Nac) => Nac,
        (Sym(x), Sym(y)) => DimValue::from_expr(x.maximum(y)?),
    })
}

/// Unify two dims that must be equal at runtime.
pub fn unify_dim(what: &str, a: &DimValue, b: &DimValue) -> Result<DimValue, OpError> {
    use DimValue::*;
    Ok(match (a, b) {
        _ if a == b => a.clone(),
        (Undef, _) | (_, Undef) => Undef,
        (Known(_), Known(_)) => return contradiction(what, a, b),
        (Nac, _) | (_, Nac) => Nac,
        (Known(v), Sym(_)) | (Sym(_), Known(v)) => Known(*v),
        (Sym(_), Sym(_)) => Nac,
    })
}

/// Numpy-style broadcast of two ranked shapes.
pub fn broadcast_shapes(a: &[DimValue], b: &[DimValue]) -> Result<Vec<DimValue>, OpError> {
    let r = a.len().max(b.len());
    let one = k(1);
    (0..r)
        .map(|i| {
            let x = if i + a.len() >= r { &a[i + a.len() - r] } else { &one };
            let y = if i + b.len() >= r { &b[i + b.len() - r] } else { &one };
            broadcast_dim(x, y)
        })
        .collect()
}

fn norm_axis(axis: i64, rank: usize) -> Result<usize, OpError> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return invalid(format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(a as usize)
}

/// Per-output shape and value cells.
pub type Cell = (ShapeInfo, ValueInfo);

/// Input lattice cells of one node plus the node's dtypes.
pub struct OpInputs<'a> {
    pub shapes: &'a [ShapeInfo],
    pub values: &'a [ValueInfo],
    pub in_dtypes: &'a [DType],
    pub out_dtypes: &'a [DType],
    pub value_cap: usize,
}

impl OpInputs<'_> {
    fn shape(&self, i: usize) -> &ShapeInfo {
        &self.shapes[i]
    }

    fn value(&self, i: usize) -> &ValueInfo {
        &self.values[i]
    }
}

/// Outcome of a shape computation before values are attached.
enum Shaped {
    /// All outputs carry the same lattice tag.
    Undef,
    Nac,
    Shapes(Vec<ShapeInfo>),
}

macro_rules! ranked {
    ($ins:expr, $i:expr) => {
        match $ins.shape($i) {
            ShapeInfo::Undef => return Ok(Shaped::Undef),
            ShapeInfo::Nac => return Ok(Shaped::Nac),
            ShapeInfo::Ranked(d) => d,
        }
    };
}

/// Tracked elements of a value input; `Err` carries the lattice tag to
/// propagate when the value is not available.
fn tracked(v: &ValueInfo) -> Result<&[DimValue], bool> {
    match v {
        ValueInfo::Tracked(e) => Ok(e),
        ValueInfo::Undef => Err(true),
        ValueInfo::Nac => Err(false),
    }
}

fn ints_attr(node: &Node, key: &str, len: usize, default: i64) -> Vec<i64> {
    node.attr_ints(key).map_or_else(|| vec![default; len], <[i64]>::to_vec)
}

fn forward_shapes(node: &Node, ins: &OpInputs<'_>) -> Result<Shaped, OpError> {
    let one_out = |s: Vec<DimValue>| Ok(Shaped::Shapes(vec![ShapeInfo::Ranked(s)]));
    match node.kind() {
        OpKind::Shape => {
            let d = ranked!(ins, 0);
            one_out(vec![k(d.len() as i64)])
        }
        OpKind::ConstantOfShape => {
            let s = ranked!(ins, 0);
            if s.len() != 1 {
                return invalid("shape input must be rank 1");
            }
            match tracked(ins.value(0)) {
                Ok(v) => one_out(v.to_vec()),
                Err(true) => Ok(Shaped::Undef),
                Err(false) => match &s[0] {
                    DimValue::Known(r) => one_out(vec![DimValue::Nac; *r as usize]),
                    DimValue::Undef => Ok(Shaped::Undef),
                    _ => Ok(Shaped::Nac),
                },
            }
        }
        OpKind::EyeLike => {
            let d = ranked!(ins, 0);
            if d.len() != 2 {
                return invalid("EyeLike needs a rank-2 input");
            }
            one_out(d.to_vec())
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::Round | OpKind::Cast => {
            let d = ranked!(ins, 0);
            one_out(d.to_vec())
        }
        OpKind::Softmax => {
            let d = ranked!(ins, 0);
            norm_axis(node.attr_int("axis").unwrap_or(-1), d.len())?;
            one_out(d.to_vec())
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let a = ranked!(ins, 0);
            let b = ranked!(ins, 1);
            one_out(broadcast_shapes(a, b)?)
        }
        OpKind::Concat => {
            let mut shapes = Vec::new();
            for i in 0..node.inputs.len() {
                shapes.push(ranked!(ins, i));
            }
            let r = shapes[0].len();
            if shapes.iter().any(|s| s.len() != r) {
                return invalid("Concat inputs differ in rank");
            }
            let axis = norm_axis(node.attr_int("axis").unwrap_or(0), r)?;
            let mut out = shapes[0].to_vec();
            for s in &shapes[1..] {
                for (j, d) in s.iter().enumerate() {
                    out[j] = if j == axis {
                        ap(ArithOp::Add, &out[j], d)?
                    } else {
                        unify_dim("Concat non-axis dims", &out[j], d)?
                    };
                }
            }
            one_out(out)
        }
        OpKind::Conv => {
            let x = ranked!(ins, 0);
            let w = ranked!(ins, 1);
            if x.len() < 3 || w.len() != x.len() {
                return invalid("Conv needs input and weight of equal rank >= 3");
            }
            let sp = x.len() - 2;
            let group = node.attr_int("group").unwrap_or(1);
            let cin = ap(ArithOp::Mul, &w[1], &k(group))?;
            unify_dim("Conv input channels", &x[1], &cin)?;
            if ins.shapes.len() > 2 {
                let b = ranked!(ins, 2);
                if b.len() != 1 {
                    return invalid("Conv bias must be rank 1");
                }
                unify_dim("Conv bias length", &b[0], &w[0])?;
            }
            let mut out = vec![x[0].clone(), w[0].clone()];
            out.extend(spatial(node, &x[2..], &w[2..], sp)?);
            one_out(out)
        }
        OpKind::MaxPool | OpKind::AveragePool => {
            let x = ranked!(ins, 0);
            if x.len() < 3 {
                return invalid("pooling needs rank >= 3");
            }
            let sp = x.len() - 2;
            let kernel: Vec<DimValue> =
                ints_attr(node, "kernel_shape", sp, 1).into_iter().map(k).collect();
            if kernel.len() != sp {
                return invalid("kernel_shape length mismatch");
            }
            let mut out = vec![x[0].clone(), x[1].clone()];
            out.extend(spatial(node, &x[2..], &kernel, sp)?);
            one_out(out)
        }
        OpKind::MatMul => {
            let a = ranked!(ins, 0);
            let b = ranked!(ins, 1);
            if a.len() < 2 || b.len() < 2 {
                return invalid("MatMul operands must have rank >= 2");
            }
            let (ra, rb) = (a.len(), b.len());
            unify_dim("MatMul inner dims", &a[ra - 1], &b[rb - 2])?;
            let mut out = broadcast_shapes(&a[..ra - 2], &b[..rb - 2])?;
            out.push(a[ra - 2].clone());
            out.push(b[rb - 1].clone());
            one_out(out)
        }
        OpKind::Gather => {
            let d = ranked!(ins, 0);
            let idx = ranked!(ins, 1);
            let axis = norm_axis(node.attr_int("axis").unwrap_or(0), d.len())?;
            let mut out = d[..axis].to_vec();
            out.extend(idx.iter().cloned());
            out.extend(d[axis + 1..].iter().cloned());
            one_out(out)
        }
        OpKind::ReduceSum | OpKind::ReduceMean => {
            let d = ranked!(ins, 0);
            let axes = reduce_axes(node, d.len())?;
            let keep = node.attr_int("keepdims").unwrap_or(1) != 0;
            let mut out = Vec::new();
            for (i, x) in d.iter().enumerate() {
                if axes.contains(&i) {
                    if keep {
                        out.push(k(1));
                    }
                } else {
                    out.push(x.clone());
                }
            }
            one_out(out)
        }
        OpKind::Transpose => {
            let d = ranked!(ins, 0);
            let perm = perm_of(node, d.len())?;
            one_out(perm.iter().map(|p| d[*p].clone()).collect())
        }
        OpKind::Unsqueeze => {
            let d = ranked!(ins, 0);
            let r = d.len() + node.attr_ints("axes").map_or(0, <[i64]>::len);
            let axes = unsqueeze_axes(node, r)?;
            let mut src = d.iter();
            let out = (0..r)
                .map(|i| {
                    if axes.contains(&i) {
                        k(1)
                    } else {
                        src.next().cloned().unwrap_or(DimValue::Nac)
                    }
                })
                .collect();
            one_out(out)
        }
        OpKind::Reshape => {
            let x = ranked!(ins, 0);
            let s = ranked!(ins, 1);
            if s.len() != 1 {
                return invalid("Reshape target must be rank 1");
            }
            match tracked(ins.value(1)) {
                Ok(t) => one_out(reshape_dims(x, t)?),
                Err(true) => Ok(Shaped::Undef),
                Err(false) => match &s[0] {
                    DimValue::Known(r) => one_out(vec![DimValue::Nac; *r as usize]),
                    _ => Ok(Shaped::Nac),
                },
            }
        }
        OpKind::Expand => {
            let x = ranked!(ins, 0);
            let s = ranked!(ins, 1);
            if s.len() != 1 {
                return invalid("Expand target must be rank 1");
            }
            match tracked(ins.value(1)) {
                Ok(t) => one_out(broadcast_shapes(x, t)?),
                Err(true) => Ok(Shaped::Undef),
                Err(false) => match &s[0] {
                    DimValue::Known(r) => {
                        let r = (*r as usize).max(x.len());
                        one_out(vec![DimValue::Nac; r])
                    }
                    _ => Ok(Shaped::Nac),
                },
            }
        }
        OpKind::Slice => {
            let x = ranked!(ins, 0);
            let mut args = Vec::new();
            for i in 1..node.inputs.len() {
                ranked!(ins, i);
                args.push(tracked(ins.value(i)));
            }
            if let Some(Err(undef)) = args.iter().find(|a| a.is_err()) {
                return Ok(if *undef {
                    Shaped::Undef
                } else {
                    one_out(vec![DimValue::Nac; x.len()])?
                });
            }
            let args: Vec<&[DimValue]> = args.into_iter().map(|a| a.unwrap_or(&[])).collect();
            one_out(slice_dims(x, &args)?)
        }
        OpKind::Range => {
            for i in 0..3 {
                let s = ranked!(ins, i);
                if !s.is_empty() {
                    return invalid("Range operands must be scalars");
                }
            }
            let mut vals = Vec::new();
            for i in 0..3 {
                match tracked(ins.value(i)) {
                    Ok(v) if v.len() == 1 => vals.push(v[0].clone()),
                    Ok(_) => return invalid("Range operand is not a scalar value"),
                    Err(true) => return Ok(Shaped::Undef),
                    Err(false) => return one_out(vec![DimValue::Nac]),
                }
            }
            one_out(vec![range_len(&vals[0], &vals[1], &vals[2])?])
        }
        OpKind::Resize => {
            let x = ranked!(ins, 0);
            let s = ranked!(ins, 1);
            if s.len() != 1 || s[0] != k(x.len() as i64) && s[0].is_resolved() {
                return invalid("Resize sizes must be rank 1 with one entry per axis");
            }
            match tracked(ins.value(1)) {
                Ok(t) if t.len() == x.len() => one_out(t.to_vec()),
                Ok(_) => invalid("Resize sizes length mismatch"),
                Err(true) => Ok(Shaped::Undef),
                Err(false) => one_out(vec![DimValue::Nac; x.len()]),
            }
        }
        OpKind::Upsample => {
            let x = ranked!(ins, 0);
            ranked!(ins, 1);
            match tracked(ins.value(1)) {
                Ok(t) if t.len() == x.len() => {
                    let out = x
                        .iter()
                        .zip(t)
                        .map(|(d, s)| ap(ArithOp::Mul, d, s))
                        .collect::<Result<_, _>>()?;
                    one_out(out)
                }
                Ok(_) => invalid("Upsample scales length mismatch"),
                Err(true) => Ok(Shaped::Undef),
                Err(false) => one_out(vec![DimValue::Nac; x.len()]),
            }
        }
        OpKind::TopK => {
            let x = ranked!(ins, 0);
            let ks = ranked!(ins, 1);
            if ks.len() > 1 {
                return invalid("TopK k must be a scalar or length-1 tensor");
            }
            let axis = norm_axis(node.attr_int("axis").unwrap_or(-1), x.len())?;
            let kd = match tracked(ins.value(1)) {
                Ok(v) if v.len() == 1 => v[0].clone(),
                Ok(_) => return invalid("TopK k must hold one value"),
                Err(true) => return Ok(Shaped::Undef),
                Err(false) => DimValue::Nac,
            };
            let mut out = x.to_vec();
            out[axis] = kd;
            Ok(Shaped::Shapes(vec![
                ShapeInfo::Ranked(out.clone()),
                ShapeInfo::Ranked(out),
            ]))
        }
        OpKind::NonZero => {
            let x = ranked!(ins, 0);
            one_out(vec![k(x.len() as i64), DimValue::Nac])
        }
        OpKind::NonMaxSuppression => one_out(vec![DimValue::Nac, k(3)]),
        OpKind::If | OpKind::Loop | OpKind::Opaque => Ok(Shaped::Nac),
        OpKind::Switch => {
            let s = ins.shape(0).clone();
            Ok(Shaped::Shapes(vec![s; node.outputs.len()]))
        }
        OpKind::Combine => {
            let s = ins.shapes.iter().skip(1).fold(ins.shape(0).clone(), |acc, s| acc.meet(s));
            Ok(Shaped::Shapes(vec![s]))
        }
    }
}

fn spatial(
    node: &Node,
    x: &[DimValue],
    kernel: &[DimValue],
    sp: usize,
) -> Result<Vec<DimValue>, OpError> {
    let pads = ints_attr(node, "pads", 2 * sp, 0);
    let strides = ints_attr(node, "strides", sp, 1);
    if pads.len() != 2 * sp || strides.len() != sp {
        return invalid("pads/strides length mismatch");
    }
    if strides.iter().any(|s| *s <= 0) || pads.iter().any(|p| *p < 0) {
        return invalid("strides must be positive and pads nonnegative");
    }
    (0..sp)
        .map(|i| {
            let padded = ap(ArithOp::Add, &x[i], &k(pads[i] + pads[i + sp]))?;
            let span = ap(ArithOp::Sub, &padded, &kernel[i])?;
            let q = ap(ArithOp::FloorDiv, &span, &k(strides[i]))?;
            ap(ArithOp::Add, &q, &k(1))
        })
        .collect()
}

/// Resolved reduction axes (sorted, deduplicated).
pub fn reduce_axes(node: &Node, rank: usize) -> Result<Vec<usize>, OpError> {
    let mut axes = match node.attr_ints("axes") {
        Some(a) => a.iter().map(|x| norm_axis(*x, rank)).collect::<Result<Vec<_>, _>>()?,
        None => (0..rank).collect(),
    };
    axes.sort_unstable();
    axes.dedup();
    Ok(axes)
}

pub fn perm_of(node: &Node, rank: usize) -> Result<Vec<usize>, OpError> {
    let perm: Vec<usize> = match node.attr_ints("perm") {
        Some(p) => p.iter().map(|x| norm_axis(*x, rank)).collect::<Result<_, _>>()?,
        None => (0..rank).rev().collect(),
    };
    let mut seen = perm.clone();
    seen.sort_unstable();
    if seen != (0..rank).collect::<Vec<_>>() {
        return invalid("perm is not a permutation of the input axes");
    }
    Ok(perm)
}

pub fn unsqueeze_axes(node: &Node, out_rank: usize) -> Result<Vec<usize>, OpError> {
    let mut axes = node
        .attr_ints("axes")
        .unwrap_or(&[])
        .iter()
        .map(|a| norm_axis(*a, out_rank))
        .collect::<Result<Vec<_>, _>>()?;
    axes.sort_unstable();
    let before = axes.len();
    axes.dedup();
    if axes.len() != before {
        return invalid("Unsqueeze axes repeat");
    }
    Ok(axes)
}

fn reshape_dims(x: &[DimValue], target: &[DimValue]) -> Result<Vec<DimValue>, OpError> {
    let mut out = Vec::with_capacity(target.len());
    let mut wildcard = None;
    for (i, t) in target.iter().enumerate() {
        match t {
            DimValue::Known(0) => match x.get(i) {
                Some(d) => out.push(d.clone()),
                None => return invalid("Reshape 0 entry beyond input rank"),
            },
            DimValue::Known(-1) => {
                if wildcard.replace(i).is_some() {
                    return invalid("Reshape target has two -1 entries");
                }
                out.push(DimValue::Nac);
            }
            DimValue::Known(v) if *v < 0 => return invalid("negative Reshape entry"),
            other => out.push(other.clone()),
        }
    }
    if let Some(w) = wildcard {
        let numel = x
            .iter()
            .try_fold(k(1), |acc, d| ap(ArithOp::Mul, &acc, d))?;
        let rest = out
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != w)
            .try_fold(k(1), |acc, (_, d)| ap(ArithOp::Mul, &acc, d))?;
        if rest == k(0) {
            return invalid("Reshape -1 with a zero-sized remainder");
        }
        out[w] = ap(ArithOp::FloorDiv, &numel, &rest)?;
    }
    Ok(out)
}

/// Clamp `v` into `[lo, hi]` as an expression.
fn clamp(v: &DimValue, lo: &DimValue, hi: &DimValue) -> Result<DimValue, OpError> {
    let up = ap(ArithOp::Max, v, lo)?;
    ap(ArithOp::Min, &up, hi)
}

/// Output length of slicing an axis of length `d` by `[s, e)` with step `st`.
pub fn slice_len(d: &DimValue, s: i64, e: i64, st: i64) -> Result<DimValue, OpError> {
    if st <= 0 {
        return invalid("Slice steps must be positive");
    }
    let norm = |v: i64| -> Result<DimValue, OpError> {
        if v >= SLICE_END {
            Ok(d.clone())
        } else if v <= -SLICE_END {
            Ok(k(0))
        } else if v < 0 {
            ap(ArithOp::Add, d, &k(v))
        } else {
            Ok(k(v))
        }
    };
    let start = clamp(&norm(s)?, &k(0), d)?;
    let end = clamp(&norm(e)?, &k(0), d)?;
    let span = ap(ArithOp::Sub, &end, &start)?;
    let num = ap(ArithOp::Add, &span, &k(st - 1))?;
    let len = ap(ArithOp::FloorDiv, &num, &k(st))?;
    ap(ArithOp::Max, &len, &k(0))
}

/// Decoded `Slice` parameters: `(axis, start, end, step)` per sliced axis.
pub fn slice_params(rank: usize, args: &[Vec<i64>]) -> Result<Vec<(usize, i64, i64, i64)>, OpError> {
    let starts = &args[0];
    let ends = &args[1];
    if starts.len() != ends.len() {
        return invalid("Slice starts/ends length mismatch");
    }
    let axes: Vec<usize> = match args.get(2) {
        Some(a) => a.iter().map(|x| norm_axis(*x, rank)).collect::<Result<_, _>>()?,
        None => (0..starts.len()).collect(),
    };
    let steps = args.get(3).cloned().unwrap_or_else(|| vec![1; starts.len()]);
    if axes.len() != starts.len() || steps.len() != starts.len() {
        return invalid("Slice axes/steps length mismatch");
    }
    Ok((0..starts.len())
        .map(|i| (axes[i], starts[i], ends[i], steps[i]))
        .collect())
}

fn slice_dims(x: &[DimValue], args: &[&[DimValue]]) -> Result<Vec<DimValue>, OpError> {
    let concrete: Option<Vec<Vec<i64>>> = args
        .iter()
        .map(|a| a.iter().map(DimValue::as_known).collect())
        .collect();
    let Some(concrete) = concrete else {
        // a sliced axis is unknown, but which one is only known if axes are
        let mut out = x.to_vec();
        match args.get(2).map(|a| a.iter().map(DimValue::as_known).collect::<Option<Vec<_>>>()) {
            Some(Some(axes)) => {
                for a in axes {
                    out[norm_axis(a, x.len())?] = DimValue::Nac;
                }
            }
            None if args[0].len() <= x.len() => {
                for d in out.iter_mut().take(args[0].len()) {
                    *d = DimValue::Nac;
                }
            }
            _ => out = vec![DimValue::Nac; x.len()],
        }
        return Ok(out);
    };
    let mut out = x.to_vec();
    for (axis, s, e, st) in slice_params(x.len(), &concrete)? {
        out[axis] = slice_len(&x[axis], s, e, st)?;
    }
    Ok(out)
}

/// Number of elements of `Range(start, limit, delta)`.
pub fn range_len(start: &DimValue, limit: &DimValue, delta: &DimValue) -> Result<DimValue, OpError> {
    let Some(step) = delta.as_known() else {
        return Ok(if delta.is_undef() { DimValue::Undef } else { DimValue::Nac });
    };
    if step == 0 {
        return invalid("Range delta is zero");
    }
    // ceil((limit - start) / step) == floor((limit - start + step - sign) / step)
    let span = ap(ArithOp::Sub, limit, start)?;
    let adj = if step > 0 { step - 1 } else { step + 1 };
    let num = ap(ArithOp::Add, &span, &k(adj))?;
    let n = ap(ArithOp::FloorDiv, &num, &k(step))?;
    ap(ArithOp::Max, &n, &k(0))
}

fn elementwise_values(
    op: ArithOp,
    a: &[DimValue],
    b: &[DimValue],
) -> Result<Option<Vec<DimValue>>, OpError> {
    let n = a.len().max(b.len());
    if !(a.len() == b.len() || a.len() == 1 || b.len() == 1) {
        return Ok(None);
    }
    let pick = |v: &[DimValue], i: usize| v[if v.len() == 1 { 0 } else { i }].clone();
    (0..n)
        .map(|i| ap(op, &pick(a, i), &pick(b, i)))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// Tracked output value for single-output ops, given the output shape.
fn forward_value(
    node: &Node,
    ins: &OpInputs<'_>,
    out_shape: &[DimValue],
) -> Result<ValueInfo, OpError> {
    let val = |i: usize| -> Result<&[DimValue], ValueInfo> {
        match ins.value(i) {
            ValueInfo::Tracked(v) => Ok(v),
            ValueInfo::Undef => Err(ValueInfo::Undef),
            ValueInfo::Nac => Err(ValueInfo::Nac),
        }
    };
    macro_rules! v {
        ($i:expr) => {
            match val($i) {
                Ok(v) => v,
                Err(tag) => return Ok(tag),
            }
        };
    }
    let tracked = |v: Option<Vec<DimValue>>| v.map_or(ValueInfo::Nac, ValueInfo::Tracked);
    Ok(match node.kind() {
        OpKind::Shape => match ins.shape(0) {
            ShapeInfo::Ranked(d) => ValueInfo::Tracked(d.clone()),
            ShapeInfo::Undef => ValueInfo::Undef,
            ShapeInfo::Nac => ValueInfo::Nac,
        },
        OpKind::ConstantOfShape => {
            let fill = node.attr_int("value").unwrap_or(0);
            match out_shape.first().and_then(DimValue::as_known) {
                Some(n) if out_shape.len() == 1 => ValueInfo::known(vec![fill; n as usize]),
                _ if out_shape.is_empty() => ValueInfo::known([fill]),
                _ => ValueInfo::Nac,
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let op = match node.kind() {
                OpKind::Add => ArithOp::Add,
                OpKind::Sub => ArithOp::Sub,
                OpKind::Mul => ArithOp::Mul,
                _ => ArithOp::FloorDiv,
            };
            if node.kind() == OpKind::Div && !ins.in_dtypes.iter().all(|d| d.is_integer()) {
                return Ok(ValueInfo::Nac);
            }
            let (a, b) = (v!(0), v!(1));
            tracked(elementwise_values(op, a, b)?)
        }
        OpKind::Cast => {
            let src = ins.in_dtypes[0];
            if src.is_integer() {
                ValueInfo::Tracked(v!(0).to_vec())
            } else {
                ValueInfo::Nac
            }
        }
        OpKind::Relu => {
            let a = v!(0);
            ValueInfo::Tracked(
                a.iter()
                    .map(|x| ap(ArithOp::Max, x, &k(0)))
                    .collect::<Result<_, _>>()?,
            )
        }
        OpKind::Concat => {
            let mut out = Vec::new();
            for i in 0..node.inputs.len() {
                out.extend_from_slice(v!(i));
            }
            ValueInfo::Tracked(out)
        }
        OpKind::Gather => {
            let data = v!(0);
            let idx = v!(1);
            if matches!(ins.shape(0), ShapeInfo::Ranked(d) if d.len() != 1) {
                return Ok(ValueInfo::Nac);
            }
            let n = data.len() as i64;
            let mut out = Vec::new();
            for i in idx {
                match i.as_known() {
                    Some(j) if (-n..n).contains(&j) => {
                        out.push(data[if j < 0 { j + n } else { j } as usize].clone())
                    }
                    Some(j) => return invalid(format!("Gather index {j} out of range")),
                    None => out.push(DimValue::Nac),
                }
            }
            ValueInfo::Tracked(out)
        }
        OpKind::Unsqueeze | OpKind::Reshape | OpKind::Expand => {
            let a = v!(0);
            let n = out_shape.first().and_then(DimValue::as_known).unwrap_or(1);
            if a.len() as i64 == n {
                ValueInfo::Tracked(a.to_vec())
            } else if a.len() == 1 {
                ValueInfo::Tracked(vec![a[0].clone(); n as usize])
            } else {
                ValueInfo::Nac
            }
        }
        OpKind::Slice => {
            let data = v!(0);
            let mut args = Vec::new();
            for i in 1..node.inputs.len() {
                let a: Option<Vec<i64>> = v!(i).iter().map(DimValue::as_known).collect();
                match a {
                    Some(a) => args.push(a),
                    None => return Ok(ValueInfo::Nac),
                }
            }
            let mut idx: Vec<usize> = (0..data.len()).collect();
            for (_, s, e, st) in slice_params(1, &args)? {
                idx = slice_indices(idx.len() as i64, s, e, st)
                    .into_iter()
                    .map(|i| idx[i])
                    .collect();
            }
            ValueInfo::Tracked(idx.into_iter().map(|i| data[i].clone()).collect())
        }
        OpKind::Range => {
            let (s, d) = (v!(0), v!(2));
            match (s[0].as_known(), d[0].as_known(), out_shape[0].as_known()) {
                (Some(s), Some(d), Some(n)) => ValueInfo::known((0..n).map(|i| s + i * d)),
                _ => ValueInfo::Nac,
            }
        }
        _ => ValueInfo::Nac,
    })
}

/// Concrete indices selected by slicing a length-`n` axis.
pub fn slice_indices(n: i64, s: i64, e: i64, st: i64) -> Vec<usize> {
    let norm = |v: i64| {
        let v = if v >= SLICE_END {
            n
        } else if v <= -SLICE_END {
            0
        } else if v < 0 {
            n + v
        } else {
            v
        };
        v.clamp(0, n)
    };
    let (a, b) = (norm(s), norm(e));
    (a..b).step_by(st.max(1) as usize).map(|i| i as usize).collect()
}

fn value_tracked(dtype: DType, shape: &ShapeInfo, cap: usize) -> bool {
    if !dtype.is_integer() {
        return false;
    }
    match shape {
        ShapeInfo::Ranked(d) if d.is_empty() => true,
        ShapeInfo::Ranked(d) if d.len() == 1 => d[0].as_known().is_some_and(|n| n >= 0 && n as usize <= cap),
        _ => false,
    }
}

/// Forward transfer: output shape and value cells of `node`.
pub fn forward(node: &Node, ins: &OpInputs<'_>) -> Result<Vec<Cell>, OpError> {
    let n_out = node.outputs.len();
    let shapes = match forward_shapes(node, ins)? {
        Shaped::Undef => return Ok(vec![(ShapeInfo::Undef, ValueInfo::Undef); n_out]),
        Shaped::Nac => return Ok(vec![(ShapeInfo::Nac, ValueInfo::Nac); n_out]),
        Shaped::Shapes(s) => s,
    };
    let mut out = Vec::with_capacity(n_out);
    for (i, s) in shapes.into_iter().enumerate() {
        let value = match node.kind() {
            OpKind::Switch => ins.value(0).clone(),
            OpKind::Combine => ins.values.iter().skip(1).fold(ins.value(0).clone(), |a, v| a.meet(v)),
            _ if i > 0 => ValueInfo::Nac,
            _ => match &s {
                ShapeInfo::Undef => ValueInfo::Undef,
                ShapeInfo::Nac => ValueInfo::Nac,
                ShapeInfo::Ranked(d) => {
                    if value_tracked(ins.out_dtypes[i], &s, ins.value_cap) {
                        let v = forward_value(node, ins, d)?;
                        let want = d.first().and_then(DimValue::as_known).unwrap_or(1);
                        match v {
                            ValueInfo::Tracked(e) if e.len() as i64 != want => ValueInfo::Nac,
                            v => v,
                        }
                    } else if ins.out_dtypes[i].is_integer() && s.has_undef() {
                        ValueInfo::Undef
                    } else {
                        ValueInfo::Nac
                    }
                }
            },
        };
        out.push((s, value));
    }
    Ok(out)
}

/// Backward transfer: candidate shapes for each input given the node's
/// outputs. Only `Undef` parts of the current input entries should be
/// filled from these candidates; `None` means no information.
pub fn backward(
    node: &Node,
    out_shapes: &[ShapeInfo],
    out_values: &[ValueInfo],
    in_shapes: &[ShapeInfo],
) -> Result<Vec<Option<ShapeInfo>>, OpError> {
    let n = node.inputs.len();
    let mut cand = vec![None; n];
    let out = &out_shapes[0];
    match node.kind() {
        OpKind::Relu | OpKind::Sigmoid | OpKind::Round | OpKind::Cast | OpKind::Softmax => {
            if !matches!(out, ShapeInfo::Undef) {
                cand[0] = Some(out.clone());
            }
        }
        OpKind::Transpose => {
            if let ShapeInfo::Ranked(d) = out {
                let perm = perm_of(node, d.len())?;
                let mut inv = vec![DimValue::Undef; d.len()];
                for (o, p) in perm.iter().enumerate() {
                    inv[*p] = d[o].clone();
                }
                cand[0] = Some(ShapeInfo::Ranked(inv));
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            if let ShapeInfo::Ranked(d) = out {
                for i in 0..2 {
                    let other = in_shapes[1 - i].rank();
                    let own = in_shapes[i].rank();
                    let rank = match (own, other) {
                        (Some(r), _) => Some(r),
                        (None, Some(o)) if o < d.len() => Some(d.len()),
                        _ => None,
                    };
                    if let Some(r) = rank.filter(|r| *r <= d.len()) {
                        let dims = d[d.len() - r..]
                            .iter()
                            .map(|x| if *x == k(1) { k(1) } else { DimValue::Undef })
                            .collect();
                        cand[i] = Some(ShapeInfo::Ranked(dims));
                    }
                }
            }
        }
        OpKind::Shape => {
            if let ValueInfo::Tracked(v) = &out_values[0] {
                let dims = v
                    .iter()
                    .map(|x| if x.is_resolved() { x.clone() } else { DimValue::Undef })
                    .collect();
                cand[0] = Some(ShapeInfo::Ranked(dims));
            }
        }
        _ => {}
    }
    Ok(cand)
}

/// Machine-readable catalog record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub name: String,
    pub class: DynClass,
    pub min_inputs: usize,
    pub max_inputs: Option<usize>,
    pub min_outputs: usize,
    pub max_outputs: Option<usize>,
    pub shape_input_indices: Vec<usize>,
    pub fusion: FusionRole,
}

pub fn catalog_records() -> Vec<OpRecord> {
    CATALOG
        .iter()
        .map(|s| OpRecord {
            name: s.name.to_string(),
            class: s.class,
            min_inputs: s.min_inputs,
            max_inputs: s.max_inputs,
            min_outputs: s.min_outputs,
            max_outputs: s.max_outputs,
            shape_input_indices: s.shape_inputs.to_vec(),
            fusion: s.fusion,
        })
        .collect()
}
