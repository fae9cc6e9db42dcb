//! Concrete reference interpreter over shapes and small integer values.
//!
//! Shape arithmetic here is written directly on `i64` and shares no code
//! with the lattice transfer functions, so it can serve as their oracle.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{switch_regions, Graph, Node, Producer};
use crate::mem::Lifetime;
use crate::ops::{OpKind, DEFAULT_VALUE_CAP};
use crate::rdp::RdpResult;
use crate::sym::{Env, SymError, SymbolRole};

/// Everything needed to execute a graph concretely.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcreteEnv {
    pub symbols: Env,
    /// Contents of integer graph inputs; missing ones are filled with 1.
    #[serde(default)]
    pub values: BTreeMap<String, Vec<i64>>,
    /// Switch node id to taken branch.
    #[serde(default)]
    pub branches: BTreeMap<String, usize>,
    /// Node id to a dynamic outcome (NonZero/NMS count, TopK k).
    #[serde(default)]
    pub outcomes: BTreeMap<String, i64>,
    /// Seed for outcomes not given explicitly.
    #[serde(default)]
    pub seed: u64,
}

impl ConcreteEnv {
    pub fn with_symbols(symbols: Env, seed: u64) -> Self {
        ConcreteEnv {
            symbols,
            seed,
            ..Default::default()
        }
    }
}

/// Concrete shape and, for small integer tensors, contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concrete {
    pub shape: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<i64>>,
}

impl Concrete {
    pub fn numel(&self) -> i64 {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    /// Executed node ids in order.
    pub executed: Vec<String>,
    /// Execution steps; each step lists the node ids run as one unit.
    pub steps: Vec<Vec<String>>,
    pub tensors: BTreeMap<String, Concrete>,
    /// Liveness of every intermediate tensor produced by an executed node.
    pub lifetimes: Vec<Lifetime>,
    pub live_bytes: Vec<u64>,
    pub peak: u64,
    pub branches: BTreeMap<String, usize>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("node `{node}`: {msg}")]
    Runtime { node: String, msg: String },
    #[error("input `{tensor}`: {source}")]
    Input { tensor: String, source: SymError },
    #[error("input `{0}` has a non-positive dimension")]
    BadInput(String),
    #[error("execution order is not topological")]
    BadOrder,
    #[error("Switch `{node}` selects branch {branch} of {count}")]
    BadBranch {
        node: String,
        branch: usize,
        count: usize,
    },
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic per-node generator.
pub fn node_rng(seed: u64, node: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(node))
}

struct Exec<'a> {
    g: &'a Graph,
    env: &'a ConcreteEnv,
    cap: usize,
    tensors: HashMap<String, Concrete>,
}

type Out = Result<Vec<Concrete>, String>;

fn bcast(a: &[i64], b: &[i64]) -> Result<Vec<i64>, String> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let x = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let y = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(format!("cannot broadcast {a:?} with {b:?}"));
        };
    }
    Ok(out)
}

fn axis_of(axis: i64, rank: usize) -> Result<usize, String> {
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    if (0..rank as i64).contains(&a) {
        Ok(a as usize)
    } else {
        Err(format!("axis {axis} out of range for rank {rank}"))
    }
}

fn floor_div(a: i64, b: i64) -> Result<i64, String> {
    if b == 0 {
        return Err("integer division by zero".into());
    }
    Ok(a.div_euclid(b) - if b < 0 && a.rem_euclid(b) != 0 { 1 } else { 0 })
}

fn clampi(v: i64, n: i64) -> i64 {
    let v = if v >= (1 << 31) {
        n
    } else if v <= -(1 << 31) {
        0
    } else if v < 0 {
        v + n
    } else {
        v
    };
    v.clamp(0, n)
}

fn window(d: i64, k: i64, pb: i64, pe: i64, s: i64) -> Result<i64, String> {
    if s <= 0 {
        return Err("stride must be positive".into());
    }
    let out = floor_div(d + pb + pe - k, s)? + 1;
    if out <= 0 {
        return Err(format!("window {k} does not fit extent {d}"));
    }
    Ok(out)
}

impl Exec<'_> {
    fn get(&self, t: &str) -> &Concrete {
        &self.tensors[t]
    }

    fn value_of(&self, t: &str) -> Result<Vec<i64>, String> {
        self.get(t)
            .value
            .clone()
            .ok_or_else(|| format!("contents of `{t}` are not available"))
    }

    fn tracks(&self, dtype_int: bool, shape: &[i64]) -> bool {
        dtype_int && shape.len() <= 1 && shape.iter().product::<i64>() as usize <= self.cap
    }

    fn outcome(&self, node: &Node, lo: i64, hi: i64) -> i64 {
        if let Some(v) = self.env.outcomes.get(&node.id) {
            return *v;
        }
        if hi <= lo {
            return lo;
        }
        node_rng(self.env.seed, &node.id).gen_range(lo..=hi)
    }

    fn run(&self, node: &Node) -> Out {
        let ins: Vec<&Concrete> = node.inputs.iter().map(|t| self.get(t)).collect();
        let dt_int = |i: usize| self.g.dtype(&node.outputs[i]).is_integer();
        let one = |shape: Vec<i64>, value: Option<Vec<i64>>| -> Out {
            let value = if self.tracks(dt_int(0), &shape) { value } else { None };
            Ok(vec![Concrete { shape, value }])
        };
        let v = |i: usize| ins[i].value.clone();
        match node.kind() {
            OpKind::Shape => one(vec![ins[0].shape.len() as i64], Some(ins[0].shape.clone())),
            OpKind::ConstantOfShape => {
                let shape = self.value_of(&node.inputs[0])?;
                if shape.iter().any(|d| *d < 0) {
                    return Err("negative ConstantOfShape extent".into());
                }
                let fill = node.attr_int("value").unwrap_or(0);
                let n: i64 = shape.iter().product();
                one(shape, Some(vec![fill; n.max(0) as usize]))
            }
            OpKind::EyeLike => {
                if ins[0].shape.len() != 2 {
                    return Err("EyeLike needs rank 2".into());
                }
                one(ins[0].shape.clone(), None)
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let shape = bcast(&ins[0].shape, &ins[1].shape)?;
                let all_int = node.inputs.iter().all(|t| self.g.dtype(t).is_integer());
                let value = match (v(0), v(1)) {
                    (Some(a), Some(b)) if all_int || node.kind() != OpKind::Div => {
                        let n = shape.iter().product::<i64>() as usize;
                        let pick = |x: &Vec<i64>, i: usize| x[if x.len() == 1 { 0 } else { i }];
                        if !(a.len() == n || a.len() == 1) || !(b.len() == n || b.len() == 1) {
                            None
                        } else {
                            let mut out = Vec::with_capacity(n);
                            for i in 0..n {
                                let (x, y) = (pick(&a, i), pick(&b, i));
                                out.push(match node.kind() {
                                    OpKind::Add => x + y,
                                    OpKind::Sub => x - y,
                                    OpKind::Mul => x * y,
                                    _ => floor_div(x, y)?,
                                });
                            }
                            Some(out)
                        }
                    }
                    _ => None,
                };
                one(shape, value)
            }
            OpKind::Relu => one(ins[0].shape.clone(), v(0).map(|x| x.into_iter().map(|e| e.max(0)).collect())),
            OpKind::Cast => {
                let value = if self.g.dtype(&node.inputs[0]).is_integer() { v(0) } else { None };
                one(ins[0].shape.clone(), value)
            }
            OpKind::Sigmoid | OpKind::Round => one(ins[0].shape.clone(), None),
            OpKind::Softmax => {
                axis_of(node.attr_int("axis").unwrap_or(-1), ins[0].shape.len())?;
                one(ins[0].shape.clone(), None)
            }
            OpKind::Concat => {
                let r = ins[0].shape.len();
                let axis = axis_of(node.attr_int("axis").unwrap_or(0), r)?;
                let mut shape = ins[0].shape.clone();
                let mut vals = Some(Vec::new());
                for (i, x) in ins.iter().enumerate() {
                    if x.shape.len() != r {
                        return Err("Concat rank mismatch".into());
                    }
                    if i > 0 {
                        for (j, (d, xd)) in shape.iter_mut().zip(&x.shape).enumerate() {
                            if j == axis {
                                *d += xd;
                            } else if d != xd {
                                return Err(format!("Concat dim {j} mismatch"));
                            }
                        }
                    }
                    vals = match (vals, &x.value) {
                        (Some(mut acc), Some(xv)) => {
                            acc.extend(xv);
                            Some(acc)
                        }
                        _ => None,
                    };
                }
                one(shape, vals)
            }
            OpKind::Conv => {
                let (x, w) = (&ins[0].shape, &ins[1].shape);
                if x.len() < 3 || w.len() != x.len() {
                    return Err("Conv rank mismatch".into());
                }
                let sp = x.len() - 2;
                let group = node.attr_int("group").unwrap_or(1);
                if x[1] != w[1] * group {
                    return Err(format!("Conv channels {} vs {}", x[1], w[1] * group));
                }
                if let Some(b) = ins.get(2) {
                    if b.shape != vec![w[0]] {
                        return Err("Conv bias length mismatch".into());
                    }
                }
                let pads = node.attr_ints("pads").map_or(vec![0; 2 * sp], <[i64]>::to_vec);
                let strides = node.attr_ints("strides").map_or(vec![1; sp], <[i64]>::to_vec);
                let mut shape = vec![x[0], w[0]];
                for i in 0..sp {
                    shape.push(window(x[2 + i], w[2 + i], pads[i], pads[i + sp], strides[i])?);
                }
                one(shape, None)
            }
            OpKind::MaxPool | OpKind::AveragePool => {
                let x = &ins[0].shape;
                if x.len() < 3 {
                    return Err("pool rank".into());
                }
                let sp = x.len() - 2;
                let ks = node.attr_ints("kernel_shape").unwrap_or(&[]).to_vec();
                let pads = node.attr_ints("pads").map_or(vec![0; 2 * sp], <[i64]>::to_vec);
                let strides = node.attr_ints("strides").map_or(vec![1; sp], <[i64]>::to_vec);
                if ks.len() != sp {
                    return Err("kernel_shape length".into());
                }
                let mut shape = vec![x[0], x[1]];
                for i in 0..sp {
                    shape.push(window(x[2 + i], ks[i], pads[i], pads[i + sp], strides[i])?);
                }
                one(shape, None)
            }
            OpKind::MatMul => {
                let (a, b) = (&ins[0].shape, &ins[1].shape);
                if a.len() < 2 || b.len() < 2 {
                    return Err("MatMul rank".into());
                }
                let (ra, rb) = (a.len(), b.len());
                if a[ra - 1] != b[rb - 2] {
                    return Err(format!("MatMul inner dims {} vs {}", a[ra - 1], b[rb - 2]));
                }
                let mut shape = bcast(&a[..ra - 2], &b[..rb - 2])?;
                shape.push(a[ra - 2]);
                shape.push(b[rb - 1]);
                one(shape, None)
            }
            OpKind::Gather => {
                let d = &ins[0].shape;
                let axis = axis_of(node.attr_int("axis").unwrap_or(0), d.len())?;
                let mut shape = d[..axis].to_vec();
                shape.extend(&ins[1].shape);
                shape.extend(&d[axis + 1..]);
                let mut value = None;
                if d.len() == 1 {
                    if let (Some(data), Some(idx)) = (v(0), v(1)) {
                        let n = data.len() as i64;
                        let mut out = Vec::new();
                        for i in idx {
                            if !(-n..n).contains(&i) {
                                return Err(format!("Gather index {i} out of range"));
                            }
                            out.push(data[i.rem_euclid(n) as usize]);
                        }
                        value = Some(out);
                    }
                }
                one(shape, value)
            }
            OpKind::ReduceSum | OpKind::ReduceMean => {
                let d = &ins[0].shape;
                let axes: Vec<usize> = match node.attr_ints("axes") {
                    Some(a) => a.iter().map(|x| axis_of(*x, d.len())).collect::<Result<_, _>>()?,
                    None => (0..d.len()).collect(),
                };
                let keep = node.attr_int("keepdims").unwrap_or(1) != 0;
                let shape = d
                    .iter()
                    .enumerate()
                    .filter_map(|(i, x)| match (axes.contains(&i), keep) {
                        (true, true) => Some(1),
                        (true, false) => None,
                        (false, _) => Some(*x),
                    })
                    .collect();
                one(shape, None)
            }
            OpKind::Transpose => {
                let d = &ins[0].shape;
                let perm: Vec<usize> = match node.attr_ints("perm") {
                    Some(p) => p.iter().map(|x| axis_of(*x, d.len())).collect::<Result<_, _>>()?,
                    None => (0..d.len()).rev().collect(),
                };
                let mut seen = perm.clone();
                seen.sort_unstable();
                if seen != (0..d.len()).collect::<Vec<_>>() {
                    return Err("bad perm".into());
                }
                one(perm.iter().map(|p| d[*p]).collect(), None)
            }
            OpKind::Unsqueeze => {
                let d = &ins[0].shape;
                let axes = node.attr_ints("axes").unwrap_or(&[]);
                let r = d.len() + axes.len();
                let norm: HashSet<usize> = axes.iter().map(|a| axis_of(*a, r)).collect::<Result<_, _>>()?;
                if norm.len() != axes.len() {
                    return Err("repeated Unsqueeze axis".into());
                }
                let mut src = d.iter();
                let shape = (0..r).map(|i| if norm.contains(&i) { 1 } else { *src.next().unwrap_or(&1) }).collect();
                one(shape, v(0))
            }
            OpKind::Reshape => {
                let x = &ins[0].shape;
                let target = self.value_of(&node.inputs[1])?;
                let mut shape = Vec::new();
                let mut wild = None;
                for (i, t) in target.iter().enumerate() {
                    match *t {
                        0 => shape.push(*x.get(i).ok_or("Reshape 0 beyond rank")?),
                        -1 if wild.is_none() => {
                            wild = Some(i);
                            shape.push(1);
                        }
                        t if t > 0 => shape.push(t),
                        t => return Err(format!("bad Reshape entry {t}")),
                    }
                }
                let numel: i64 = x.iter().product();
                if let Some(w) = wild {
                    let rest: i64 = shape.iter().product();
                    if rest == 0 || numel % rest != 0 {
                        return Err("Reshape -1 does not divide evenly".into());
                    }
                    shape[w] = numel / rest;
                }
                if shape.iter().product::<i64>() != numel {
                    return Err(format!("Reshape {x:?} to {shape:?} changes element count"));
                }
                one(shape, v(0))
            }
            OpKind::Expand => {
                let target = self.value_of(&node.inputs[1])?;
                let shape = bcast(&ins[0].shape, &target)?;
                let value = v(0).and_then(|x| {
                    let n = shape.iter().product::<i64>() as usize;
                    if x.len() == n {
                        Some(x)
                    } else if x.len() == 1 {
                        Some(vec![x[0]; n])
                    } else {
                        None
                    }
                });
                one(shape, value)
            }
            OpKind::Slice => {
                let x = &ins[0].shape;
                let args: Vec<Vec<i64>> = (1..node.inputs.len())
                    .map(|i| self.value_of(&node.inputs[i]))
                    .collect::<Result<_, _>>()?;
                let (starts, ends) = (&args[0], &args[1]);
                let axes: Vec<usize> = match args.get(2) {
                    Some(a) => a.iter().map(|x2| axis_of(*x2, x.len())).collect::<Result<_, _>>()?,
                    None => (0..starts.len()).collect(),
                };
                let steps = args.get(3).cloned().unwrap_or_else(|| vec![1; starts.len()]);
                if ends.len() != starts.len() || axes.len() != starts.len() || steps.len() != starts.len() {
                    return Err("Slice parameter lengths differ".into());
                }
                let mut shape = x.clone();
                let mut picks: Option<Vec<usize>> = v(0).map(|d| (0..d.len()).collect());
                for i in 0..starts.len() {
                    if steps[i] <= 0 {
                        return Err("Slice step must be positive".into());
                    }
                    let n = x[axes[i]];
                    let (a, b) = (clampi(starts[i], n), clampi(ends[i], n));
                    let idx: Vec<i64> = (a..b).step_by(steps[i] as usize).collect();
                    shape[axes[i]] = idx.len() as i64;
                    if x.len() == 1 {
                        picks = picks.map(|p| idx.iter().map(|j| p[*j as usize]).collect());
                    }
                }
                let value = match (v(0), picks) {
                    (Some(d), Some(p)) if x.len() == 1 => Some(p.into_iter().map(|j| d[j]).collect()),
                    _ => None,
                };
                one(shape, value)
            }
            OpKind::Range => {
                let s = self.value_of(&node.inputs[0])?[0];
                let l = self.value_of(&node.inputs[1])?[0];
                let d = self.value_of(&node.inputs[2])?[0];
                if d == 0 {
                    return Err("Range delta is zero".into());
                }
                let mut vals = Vec::new();
                let mut x = s;
                while (d > 0 && x < l) || (d < 0 && x > l) {
                    vals.push(x);
                    x += d;
                }
                one(vec![vals.len() as i64], Some(vals))
            }
            OpKind::Resize => {
                let sizes = self.value_of(&node.inputs[1])?;
                if sizes.len() != ins[0].shape.len() || sizes.iter().any(|s| *s <= 0) {
                    return Err("bad Resize sizes".into());
                }
                one(sizes, None)
            }
            OpKind::Upsample => {
                let scales = self.value_of(&node.inputs[1])?;
                if scales.len() != ins[0].shape.len() || scales.iter().any(|s| *s <= 0) {
                    return Err("bad Upsample scales".into());
                }
                one(ins[0].shape.iter().zip(&scales).map(|(a, b)| a * b).collect(), None)
            }
            OpKind::TopK => {
                let x = &ins[0].shape;
                let axis = axis_of(node.attr_int("axis").unwrap_or(-1), x.len())?;
                let k = match &ins[1].value {
                    Some(v) if v.len() == 1 => v[0],
                    Some(_) => return Err("TopK k must hold one value".into()),
                    None => self.outcome(node, 1, x[axis]),
                };
                if k < 0 || k > x[axis] {
                    return Err(format!("TopK k={k} exceeds extent {}", x[axis]));
                }
                let mut shape = x.clone();
                shape[axis] = k;
                let c = Concrete { shape, value: None };
                Ok(vec![c.clone(), c])
            }
            OpKind::NonZero => {
                let numel = ins[0].numel();
                let count = self.outcome(node, 1, numel.max(1));
                one(vec![ins[0].shape.len() as i64, count], None)
            }
            OpKind::NonMaxSuppression => {
                let count = self.outcome(node, 1, 10);
                one(vec![count, 3], None)
            }
            OpKind::If | OpKind::Loop | OpKind::Opaque => {
                let shape = ins.first().map_or(vec![1], |c| c.shape.clone());
                Ok(node
                    .outputs
                    .iter()
                    .map(|_| Concrete {
                        shape: shape.clone(),
                        value: None,
                    })
                    .collect())
            }
            OpKind::Switch | OpKind::Combine => unreachable!("control flow is handled by the driver"),
        }
    }
}

/// Interpret `g` under `env`, one node per step, in the graph's sweep order.
pub fn interpret(g: &Graph, env: &ConcreteEnv) -> Result<Trace, InterpError> {
    let steps: Vec<Vec<usize>> = g.topo_order().iter().map(|v| vec![*v]).collect();
    interpret_steps(g, env, &steps)
}

/// Interpret with an explicit node order, one node per step.
pub fn interpret_order(g: &Graph, env: &ConcreteEnv, order: &[usize]) -> Result<Trace, InterpError> {
    let steps: Vec<Vec<usize>> = order.iter().map(|v| vec![*v]).collect();
    interpret_steps(g, env, &steps)
}

/// Interpret with explicit steps; all nodes in one step run as a unit, so
/// tensors produced and consumed only inside a step never count as live.
pub fn interpret_steps(g: &Graph, env: &ConcreteEnv, steps: &[Vec<usize>]) -> Result<Trace, InterpError> {
    let flat: Vec<usize> = steps.iter().flatten().copied().collect();
    let all = (0..g.nodes.len()).collect();
    if !crate::graph::is_topological(g, &all, &flat) {
        return Err(InterpError::BadOrder);
    }
    let mut ex = Exec {
        g,
        env,
        cap: DEFAULT_VALUE_CAP,
        tensors: HashMap::new(),
    };
    for (i, inp) in g.inputs.iter().enumerate() {
        let shape: Vec<i64> = g
            .input_shape(i)
            .iter()
            .map(|d| d.evaluate(&env.symbols).map(|v| v.unwrap_or(0)))
            .collect::<Result<_, _>>()
            .map_err(|source| InterpError::Input {
                tensor: inp.name.clone(),
                source,
            })?;
        if shape.iter().any(|d| *d <= 0) {
            return Err(InterpError::BadInput(inp.name.clone()));
        }
        let n: i64 = shape.iter().product();
        let value = if ex.tracks(inp.dtype.is_integer(), &shape) {
            Some(env.values.get(&inp.name).cloned().unwrap_or_else(|| vec![1; n as usize]))
        } else {
            None
        };
        ex.tensors.insert(inp.name.clone(), Concrete { shape, value });
    }
    for c in &g.constants {
        let value = c.int_data.clone().filter(|_| ex.tracks(c.dtype.is_integer(), &c.shape));
        ex.tensors.insert(
            c.name.clone(),
            Concrete {
                shape: c.shape.clone(),
                value,
            },
        );
    }

    let (regions, _) = switch_regions(g);
    let region_of: HashMap<usize, usize> = regions.iter().enumerate().map(|(k, r)| (r.switch, k)).collect();
    let mut skipped: HashSet<usize> = HashSet::new();
    let mut taken: HashMap<usize, usize> = HashMap::new(); // combine node -> branch
    let mut trace = Trace::default();
    let mut birth: HashMap<String, usize> = HashMap::new();
    let mut death: HashMap<String, usize> = HashMap::new();
    let mut step_of: HashMap<usize, usize> = HashMap::new();

    for step in steps {
        let mut ran = Vec::new();
        for &ni in step {
            if skipped.contains(&ni) {
                continue;
            }
            let node = &g.nodes[ni];
            let rt = |msg: String| InterpError::Runtime {
                node: node.id.clone(),
                msg,
            };
            let outs = match node.kind() {
                OpKind::Switch => {
                    let count = node.outputs.len();
                    let b = match env.branches.get(&node.id) {
                        Some(b) => *b,
                        None => node_rng(env.seed, &node.id).gen_range(0..count),
                    };
                    if b >= count {
                        return Err(InterpError::BadBranch {
                            node: node.id.clone(),
                            branch: b,
                            count,
                        });
                    }
                    trace.branches.insert(node.id.clone(), b);
                    if let Some(&k) = region_of.get(&ni) {
                        let r = &regions[k];
                        for (o, br) in r.branches.iter().enumerate() {
                            if o != b {
                                skipped.extend(br.iter().copied());
                            }
                        }
                        taken.insert(r.combine, b);
                    }
                    let data = ex.get(&node.inputs[0]).clone();
                    // only the taken gate carries data
                    for (o, t) in node.outputs.iter().enumerate() {
                        if o == b {
                            ex.tensors.insert(t.clone(), data.clone());
                            birth.insert(t.clone(), trace.steps.len());
                        }
                    }
                    for t in &node.inputs {
                        death.insert(t.clone(), trace.steps.len());
                    }
                    ran.push(ni);
                    continue;
                }
                OpKind::Combine => {
                    let b = *taken
                        .get(&ni)
                        .ok_or_else(|| rt("Combine reached without a matching Switch".into()))?;
                    vec![ex.get(&node.inputs[b]).clone()]
                }
                _ => ex.run(node).map_err(rt)?,
            };
            let consumed: Vec<&String> = match node.kind() {
                OpKind::Combine => vec![&node.inputs[taken[&ni]]],
                _ => node.inputs.iter().collect(),
            };
            for t in consumed {
                death.insert(t.clone(), trace.steps.len());
            }
            for (t, c) in node.outputs.iter().zip(outs) {
                if c.shape.iter().any(|d| *d < 0) {
                    return Err(rt(format!("negative extent in {:?}", c.shape)));
                }
                ex.tensors.insert(t.clone(), c);
                birth.insert(t.clone(), trace.steps.len());
            }
            ran.push(ni);
        }
        if ran.is_empty() {
            continue;
        }
        for &ni in &ran {
            step_of.insert(ni, trace.steps.len());
            trace.executed.push(g.nodes[ni].id.clone());
        }
        trace.steps.push(ran.iter().map(|ni| g.nodes[*ni].id.clone()).collect());
    }

    let last = trace.steps.len().saturating_sub(1);
    let mut lifetimes: Vec<Lifetime> = Vec::new();
    for (t, &b) in &birth {
        if !matches!(g.producer(t), Some(Producer::Node { .. })) {
            continue;
        }
        let d = if g.is_output(t) {
            last
        } else {
            death.get(t).copied().unwrap_or(b).max(b)
        };
        if group_internal(g, &trace, &step_of, t) {
            continue;
        }
        let c = &ex.tensors[t];
        let size = c.numel().max(0) as u64 * g.dtype(t).size_bytes();
        lifetimes.push(Lifetime {
            tensor: t.clone(),
            size,
            birth: b,
            death: d,
        });
    }
    lifetimes.sort_by(|a, b| (a.birth, &a.tensor).cmp(&(b.birth, &b.tensor)));
    let mut live = vec![0u64; trace.steps.len()];
    for l in &lifetimes {
        for s in &mut live[l.birth..=l.death] {
            *s += l.size;
        }
    }
    trace.peak = live.iter().copied().max().unwrap_or(0);
    trace.live_bytes = live;
    trace.lifetimes = lifetimes;
    trace.tensors = ex.tensors.into_iter().collect();
    Ok(trace)
}

/// Produced and consumed only inside one multi-node step, so never
/// materialised.
fn group_internal(g: &Graph, trace: &Trace, step_of: &HashMap<usize, usize>, t: &str) -> bool {
    if g.is_output(t) {
        return false;
    }
    let Some(&sp) = g.producer_node(t).and_then(|p| step_of.get(&p)) else {
        return false;
    };
    let executed: Vec<usize> = g
        .consumers(t)
        .iter()
        .filter_map(|(c, _)| step_of.get(c).copied())
        .collect();
    trace.steps[sp].len() > 1 && !executed.is_empty() && executed.iter().all(|s| *s == sp)
}

/// Bind analysis-generated symbols to the values observed in `trace`.
pub fn bind_generated(g: &Graph, r: &RdpResult, trace: &Trace) -> Env {
    let mut env = Env::new();
    for (name, role) in r.symbols.iter() {
        if let SymbolRole::Generated { node, output, index } = role {
            let Some(n) = g.node(node) else { continue };
            let Some(t) = n.outputs.get(*output) else { continue };
            if let Some(Concrete { value: Some(v), .. }) = trace.tensors.get(t) {
                if let Some(x) = v.get(*index) {
                    env.insert(name.clone(), *x);
                }
            }
        }
    }
    env
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn graph(v: serde_json::Value) -> Graph {
        Graph::from_json(&v.to_string()).unwrap()
    }

    fn env(pairs: &[(&str, i64)]) -> ConcreteEnv {
        ConcreteEnv::with_symbols(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(), 7)
    }

    #[test]
    fn broadcast_add_instance() {
        let g = graph(json!({
            "name": "bc", "symbols": ["I", "J", "K"],
            "inputs": [
                {"name": "a", "dtype": "f32", "shape": ["I", 1, 1]},
                {"name": "b", "dtype": "f32", "shape": ["I", "J", "K"]}
            ],
            "nodes": [
                {"id": "s", "op": "Sigmoid", "inputs": ["a"], "outputs": ["sa"]},
                {"id": "add", "op": "Add", "inputs": ["sa", "b"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }));
        let t = interpret(&g, &env(&[("I", 4), ("J", 8), ("K", 16)])).unwrap();
        assert_eq!(t.tensors["y"].shape, vec![4, 8, 16]);
        // sa (16 bytes) then y (2048 bytes) with sa dead after step 1
        assert_eq!(t.live_bytes, vec![16, 16 + 2048]);
    }

    #[test]
    fn reshape_instance() {
        let g = graph(json!({
            "name": "rs", "symbols": ["N"],
            "inputs": [
                {"name": "x", "dtype": "f32", "shape": ["N", 12]},
                {"name": "t", "dtype": "i64", "shape": [3]}
            ],
            "nodes": [{"id": "r", "op": "Reshape", "inputs": ["x", "t"], "outputs": ["y"]}],
            "outputs": ["y"]
        }));
        let mut e = env(&[("N", 5)]);
        e.values.insert("t".into(), vec![5, 3, 4]);
        let t = interpret(&g, &e).unwrap();
        assert_eq!(t.tensors["y"].shape, vec![5, 3, 4]);
        e.values.insert("t".into(), vec![5, 3, 5]);
        assert!(matches!(interpret(&g, &e), Err(InterpError::Runtime { .. })));
    }

    #[test]
    fn switch_runs_one_branch() {
        let g = graph(json!({
            "name": "sw", "symbols": ["N"],
            "inputs": [
                {"name": "x", "dtype": "f32", "shape": ["N", 8]},
                {"name": "p", "dtype": "i64", "shape": [1]}
            ],
            "nodes": [
                {"id": "sw", "op": "Switch", "inputs": ["x", "p"], "outputs": ["g0", "g1", "g2"]},
                {"id": "r0", "op": "Relu", "inputs": ["g0"], "outputs": ["b0"]},
                {"id": "s1", "op": "Sigmoid", "inputs": ["g1"], "outputs": ["b1"]},
                {"id": "r1", "op": "Relu", "inputs": ["b1"], "outputs": ["c1"]},
                {"id": "cb", "op": "Combine", "inputs": ["b0", "c1", "g2"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }));
        let mut e = env(&[("N", 3)]);
        e.branches.insert("sw".into(), 1);
        let t = interpret(&g, &e).unwrap();
        assert_eq!(t.executed, vec!["sw", "s1", "r1", "cb"]);
        assert_eq!(t.tensors["y"].shape, vec![3, 8]);
        e.branches.insert("sw".into(), 2);
        let t = interpret(&g, &e).unwrap();
        assert_eq!(t.executed, vec!["sw", "cb"]);
    }

    #[test]
    fn deterministic_outcomes() {
        let g = graph(json!({
            "name": "nz", "symbols": ["N"],
            "inputs": [{"name": "x", "dtype": "f32", "shape": ["N", 4]}],
            "nodes": [{"id": "nz", "op": "NonZero", "inputs": ["x"], "outputs": ["i"]}],
            "outputs": ["i"]
        }));
        let a = interpret(&g, &env(&[("N", 9)])).unwrap();
        let b = interpret(&g, &env(&[("N", 9)])).unwrap();
        assert_eq!(a, b);
        let c = a.tensors["i"].shape[1];
        assert!((1..=36).contains(&c));
    }
}
