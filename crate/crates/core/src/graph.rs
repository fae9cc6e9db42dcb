//! The extended computational graph: a DAG of operators plus
//! `Switch`/`Combine` control-flow pairs, with its JSON form and validation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{self, OpKind};
use crate::sym::{DimValue, SymError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I64,
    I32,
    Bool,
}

impl DType {
    pub fn size_bytes(self) -> u64 {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I64 => 8,
            DType::Bool => 1,
        }
    }

    /// Integer tensors are the only ones whose contents are tracked.
    pub fn is_integer(self) -> bool {
        matches!(self, DType::I64 | DType::I32)
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" => Some(DType::F32),
            "f16" => Some(DType::F16),
            "i64" => Some(DType::I64),
            "i32" => Some(DType::I32),
            "bool" => Some(DType::Bool),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I64 => "i64",
            DType::I32 => "i32",
            DType::Bool => "bool",
        };
        f.write_str(s)
    }
}

/// One entry of a declared input shape: a literal or expression text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimSpec {
    Int(i64),
    Expr(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDecl {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<DimSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstDecl {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub int_data: Option<Vec<i64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Ints(Vec<i64>),
    Str(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub op: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub attrs: BTreeMap<String, AttrValue>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub opaque: bool,
}

impl Node {
    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<&[i64]> {
        match self.attrs.get(key) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        match self.attrs.get(key) {
            Some(AttrValue::Str(v)) => Some(v),
            _ => None,
        }
    }

    pub fn kind(&self) -> OpKind {
        if self.opaque {
            return OpKind::Opaque;
        }
        ops::lookup(&self.op).map_or(OpKind::Opaque, |s| s.kind)
    }
}

/// The serialisable graph document. Field order here is the canonical
/// output order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDef {
    pub name: String,
    #[serde(default)]
    pub symbols: Vec<String>,
    #[serde(default)]
    pub inputs: Vec<InputDecl>,
    #[serde(default)]
    pub constants: Vec<ConstDecl>,
    pub nodes: Vec<Node>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Producer {
    Input(usize),
    Constant(usize),
    Node { node: usize, output: usize },
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed graph JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("tensor `{0}` has more than one producer")]
    DuplicateProducer(String),
    #[error("node id `{0}` is used twice")]
    DuplicateNodeId(String),
    #[error("node `{node}` reads undefined tensor `{tensor}`")]
    UndefinedTensor { node: String, tensor: String },
    #[error("graph output `{0}` is never produced")]
    UnknownOutput(String),
    #[error("cycle detected through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("input `{tensor}` uses undeclared symbol `{symbol}`")]
    UndeclaredSymbol { tensor: String, symbol: String },
    #[error("input `{tensor}` has invalid dimension `{dim}`: {msg}")]
    BadDim {
        tensor: String,
        dim: String,
        msg: String,
    },
    #[error("constant `{0}`: payload length does not match its shape")]
    PayloadMismatch(String),
    #[error("node `{node}`: unknown op `{op}` (mark it \"opaque\": true to admit it)")]
    UnknownOp { node: String, op: String },
    #[error("node `{node}` ({op}): {msg}")]
    Schema { node: String, op: String, msg: String },
    #[error("duplicate symbol declaration `{0}`")]
    DuplicateSymbol(String),
}

#[derive(Clone, Debug, Default)]
struct GraphIndex {
    producers: HashMap<String, Producer>,
    consumers: HashMap<String, Vec<(usize, usize)>>,
    node_by_id: HashMap<String, usize>,
    dtypes: HashMap<String, DType>,
    input_shapes: Vec<Vec<DimValue>>,
    outputs: HashSet<String>,
    topo: Vec<usize>,
}

/// A validated graph. Dereferences to its [`GraphDef`].
#[derive(Clone, Debug)]
pub struct Graph {
    def: GraphDef,
    index: GraphIndex,
}

impl Deref for Graph {
    type Target = GraphDef;
    fn deref(&self) -> &GraphDef {
        &self.def
    }
}

/// Read and validate a graph file.
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Graph::from_json(&text)
}

fn parse_dim(spec: &DimSpec) -> Result<DimValue, SymError> {
    match spec {
        DimSpec::Int(v) => Ok(DimValue::Known(*v)),
        DimSpec::Expr(text) => DimValue::parse(text),
    }
}

impl Graph {
    pub fn from_json(text: &str) -> Result<Graph, GraphError> {
        let def: GraphDef = serde_json::from_str(text)?;
        Graph::new(def)
    }

    pub fn new(def: GraphDef) -> Result<Graph, GraphError> {
        let mut index = GraphIndex::default();

        let mut declared = BTreeSet::new();
        for s in &def.symbols {
            if !declared.insert(s.clone()) {
                return Err(GraphError::DuplicateSymbol(s.clone()));
            }
        }

        let mut claim = |name: &str, p: Producer| -> Result<(), GraphError> {
            if index.producers.insert(name.to_string(), p).is_some() {
                return Err(GraphError::DuplicateProducer(name.to_string()));
            }
            Ok(())
        };
        for (i, inp) in def.inputs.iter().enumerate() {
            claim(&inp.name, Producer::Input(i))?;
        }
        for (i, c) in def.constants.iter().enumerate() {
            claim(&c.name, Producer::Constant(i))?;
        }
        for (i, n) in def.nodes.iter().enumerate() {
            for (k, t) in n.outputs.iter().enumerate() {
                claim(t, Producer::Node { node: i, output: k })?;
            }
        }

        for (i, n) in def.nodes.iter().enumerate() {
            if index.node_by_id.insert(n.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNodeId(n.id.clone()));
            }
            for (pos, t) in n.inputs.iter().enumerate() {
                if !index.producers.contains_key(t) {
                    return Err(GraphError::UndefinedTensor {
                        node: n.id.clone(),
                        tensor: t.clone(),
                    });
                }
                index.consumers.entry(t.clone()).or_default().push((i, pos));
            }
        }
        for o in &def.outputs {
            if !index.producers.contains_key(o) {
                return Err(GraphError::UnknownOutput(o.clone()));
            }
            index.outputs.insert(o.clone());
        }

        for inp in &def.inputs {
            let mut dims = Vec::with_capacity(inp.shape.len());
            for spec in &inp.shape {
                let text = match spec {
                    DimSpec::Int(v) => v.to_string(),
                    DimSpec::Expr(s) => s.clone(),
                };
                let bad = |msg: String| GraphError::BadDim {
                    tensor: inp.name.clone(),
                    dim: text.clone(),
                    msg,
                };
                let d = parse_dim(spec).map_err(|e| bad(e.to_string()))?;
                match &d {
                    DimValue::Known(v) if *v <= 0 => {
                        return Err(bad("dimensions must be positive".into()))
                    }
                    DimValue::Known(_) => {}
                    DimValue::Sym(e) => {
                        for s in e.symbols() {
                            if !declared.contains(&s) {
                                return Err(GraphError::UndeclaredSymbol {
                                    tensor: inp.name.clone(),
                                    symbol: s,
                                });
                            }
                        }
                    }
                    _ => return Err(bad("declared dimensions must be resolved".into())),
                }
                dims.push(d);
            }
            index.input_shapes.push(dims);
        }
        for c in &def.constants {
            if c.shape.iter().any(|d| *d <= 0) {
                return Err(GraphError::BadDim {
                    tensor: c.name.clone(),
                    dim: format!("{:?}", c.shape),
                    msg: "dimensions must be positive".into(),
                });
            }
            if let Some(data) = &c.int_data {
                let numel: i64 = c.shape.iter().product();
                if data.len() as i64 != numel || !c.dtype.is_integer() {
                    return Err(GraphError::PayloadMismatch(c.name.clone()));
                }
            }
        }

        for n in &def.nodes {
            ops::check_schema(n)?;
        }

        let mut graph = Graph { def, index };
        graph.index.topo = graph.compute_topo()?;
        graph.index.dtypes = graph.infer_dtypes()?;
        Ok(graph)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.def).expect("graph serialises");
        s.push('\n');
        s
    }

    pub fn def(&self) -> &GraphDef {
        &self.def
    }

    pub fn producer(&self, tensor: &str) -> Option<Producer> {
        self.index.producers.get(tensor).copied()
    }

    /// Index of the node producing `tensor`, if it is a node output.
    pub fn producer_node(&self, tensor: &str) -> Option<usize> {
        match self.producer(tensor)? {
            Producer::Node { node, .. } => Some(node),
            _ => None,
        }
    }

    /// `(node index, input position)` pairs reading `tensor`.
    pub fn consumers(&self, tensor: &str) -> &[(usize, usize)] {
        self.index.consumers.get(tensor).map_or(&[], Vec::as_slice)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.node_by_id.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.node_index(id).map(|i| &self.def.nodes[i])
    }

    pub fn dtype(&self, tensor: &str) -> DType {
        self.index.dtypes.get(tensor).copied().unwrap_or(DType::F32)
    }

    pub fn is_output(&self, tensor: &str) -> bool {
        self.index.outputs.contains(tensor)
    }

    pub fn is_constant(&self, tensor: &str) -> bool {
        matches!(self.producer(tensor), Some(Producer::Constant(_)))
    }

    pub fn constant(&self, tensor: &str) -> Option<&ConstDecl> {
        match self.producer(tensor)? {
            Producer::Constant(i) => Some(&self.def.constants[i]),
            _ => None,
        }
    }

    /// Declared shape of graph input `i`, parsed.
    pub fn input_shape(&self, i: usize) -> &[DimValue] {
        &self.index.input_shapes[i]
    }

    /// Predecessor node indices of node `i` (deduplicated, ascending).
    pub fn predecessors(&self, i: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.def.nodes[i]
            .inputs
            .iter()
            .filter_map(|t| self.producer_node(t))
            .collect();
        set.into_iter().collect()
    }

    /// Successor node indices of node `i` (deduplicated, ascending).
    pub fn successors(&self, i: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.def.nodes[i]
            .outputs
            .iter()
            .flat_map(|t| self.consumers(t).iter().map(|(n, _)| *n))
            .collect();
        set.into_iter().collect()
    }

    /// Depth-first topological order, computed at validation time.
    pub fn topo_order(&self) -> &[usize] {
        &self.index.topo
    }

    fn compute_topo(&self) -> Result<Vec<usize>, GraphError> {
        // Kahn's algorithm first, only to detect and report cycles.
        let n = self.def.nodes.len();
        let mut indeg: Vec<usize> = (0..n).map(|i| self.predecessors(i).len()).collect();
        let mut ready: Vec<usize> = (0..n).filter(|i| indeg[*i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for s in self.successors(i) {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.push(s);
                }
            }
        }
        if seen != n {
            let stuck = (0..n)
                .filter(|i| indeg[*i] > 0)
                .map(|i| self.def.nodes[i].id.clone())
                .collect();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(topo_sort(self))
    }

    fn infer_dtypes(&self) -> Result<HashMap<String, DType>, GraphError> {
        let mut dt: HashMap<String, DType> = HashMap::new();
        for i in &self.def.inputs {
            dt.insert(i.name.clone(), i.dtype);
        }
        for c in &self.def.constants {
            dt.insert(c.name.clone(), c.dtype);
        }
        for &ni in &self.index.topo {
            let node = &self.def.nodes[ni];
            let ins: Vec<DType> = node.inputs.iter().map(|t| dt[t]).collect();
            let outs = ops::output_dtypes(node, &ins).map_err(|msg| GraphError::Schema {
                node: node.id.clone(),
                op: node.op.clone(),
                msg,
            })?;
            for (t, d) in node.outputs.iter().zip(outs) {
                dt.insert(t.clone(), d);
            }
        }
        Ok(dt)
    }
}

/// Depth-first topological order: nodes are visited in list order and each
/// node is emitted after its producers (also visited in list order).
pub fn topo_sort(g: &Graph) -> Vec<usize> {
    let n = g.nodes.len();
    let mut state = vec![0u8; n]; // 0 new, 1 on stack, 2 done
    let mut out = Vec::with_capacity(n);
    for root in 0..n {
        if state[root] != 0 {
            continue;
        }
        // explicit stack of (node, next predecessor cursor)
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        state[root] = 1;
        while let Some(&mut (v, ref mut cursor)) = stack.last_mut() {
            let preds = g.predecessors(v);
            if *cursor < preds.len() {
                let p = preds[*cursor];
                *cursor += 1;
                if state[p] == 0 {
                    state[p] = 1;
                    stack.push((p, 0));
                }
            } else {
                state[v] = 2;
                out.push(v);
                stack.pop();
            }
        }
    }
    out
}

/// `true` when `order` is a permutation of `nodes` with every edge between
/// two of them pointing forward.
pub fn is_topological(g: &Graph, nodes: &BTreeSet<usize>, order: &[usize]) -> bool {
    if order.len() != nodes.len() {
        return false;
    }
    let mut pos = HashMap::new();
    for (k, v) in order.iter().enumerate() {
        if !nodes.contains(v) || pos.insert(*v, k).is_some() {
            return false;
        }
    }
    order.iter().all(|v| {
        g.predecessors(*v)
            .iter()
            .filter(|p| nodes.contains(p))
            .all(|p| pos[p] < pos[v])
    })
}

/// A uniformly-shuffled valid topological order (random ready-node choice).
pub fn random_topo_order<R: rand::Rng>(g: &Graph, rng: &mut R) -> Vec<usize> {
    let n = g.nodes.len();
    let mut indeg: Vec<usize> = (0..n).map(|i| g.predecessors(i).len()).collect();
    let mut ready: Vec<usize> = (0..n).filter(|i| indeg[*i] == 0).collect();
    let mut out = Vec::with_capacity(n);
    while !ready.is_empty() {
        let k = rng.gen_range(0..ready.len());
        let v = ready.swap_remove(k);
        out.push(v);
        for s in g.successors(v) {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    out
}

/// A structural problem with a `Switch`/`Combine` region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub node: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.node, self.message)
    }
}

/// One `Switch` with its matching `Combine` and the node sets of each branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchRegion {
    pub switch: usize,
    pub combine: usize,
    pub branches: Vec<BTreeSet<usize>>,
}

impl SwitchRegion {
    /// Switch, Combine, and every branch node.
    pub fn all_nodes(&self) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = self.branches.iter().flatten().copied().collect();
        s.insert(self.switch);
        s.insert(self.combine);
        s
    }
}

fn descendants(g: &Graph, seeds: &[String]) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<usize> = seeds
        .iter()
        .flat_map(|t| g.consumers(t).iter().map(|(n, _)| *n))
        .collect();
    while let Some(v) = stack.pop() {
        if seen.insert(v) {
            stack.extend(g.successors(v));
        }
    }
    seen
}

/// Match every `Switch` to its `Combine` and collect branch regions.
/// Structural problems are returned as diagnostics alongside the regions
/// that could be matched.
pub fn switch_regions(g: &Graph) -> (Vec<SwitchRegion>, Vec<Diagnostic>) {
    let mut regions = Vec::new();
    let mut diags = Vec::new();
    let topo_pos: HashMap<usize, usize> =
        g.topo_order().iter().enumerate().map(|(k, v)| (*v, k)).collect();

    for (si, sw) in g.nodes.iter().enumerate() {
        if sw.kind() != OpKind::Switch {
            continue;
        }
        let diag = |msg: String| Diagnostic {
            node: sw.id.clone(),
            message: msg,
        };
        let gates = &sw.outputs;
        let desc: Vec<BTreeSet<usize>> = gates
            .iter()
            .map(|t| descendants(g, std::slice::from_ref(t)))
            .collect();

        // A Combine matches when input i comes from gate i or branch i.
        let comes_from = |t: &str, b: usize| -> bool {
            t == gates[b] || g.producer_node(t).is_some_and(|p| desc[b].contains(&p))
        };
        let mut candidates: Vec<usize> = g
            .nodes
            .iter()
            .enumerate()
            .filter(|(ci, c)| {
                c.kind() == OpKind::Combine
                    && c.inputs.len() == gates.len()
                    && desc[0].contains(ci)
                    && c.inputs.iter().enumerate().all(|(b, t)| comes_from(t, b))
            })
            .map(|(ci, _)| ci)
            .collect();
        candidates.sort_by_key(|c| topo_pos[c]);
        let Some(&ci) = candidates.first() else {
            diags.push(diag("no Combine reconverges all branches".into()));
            continue;
        };

        let mut after: BTreeSet<usize> = descendants(g, &g.nodes[ci].outputs);
        after.insert(ci);
        let branches: Vec<BTreeSet<usize>> = desc.iter().map(|d| d.difference(&after).copied().collect()).collect();

        let mut ok = true;
        for a in 0..branches.len() {
            for b in (a + 1)..branches.len() {
                if let Some(x) = branches[a].intersection(&branches[b]).next() {
                    diags.push(diag(format!(
                        "branches {a} and {b} share node `{}`",
                        g.nodes[*x].id
                    )));
                    ok = false;
                }
            }
        }
        for (b, region) in branches.iter().enumerate() {
            for &v in region {
                let node = &g.nodes[v];
                for t in &node.inputs {
                    if let Some(p) = g.producer_node(t) {
                        let foreign = p == si && *t != gates[b]
                            || branches
                                .iter()
                                .enumerate()
                                .any(|(o, r)| o != b && r.contains(&p));
                        if foreign {
                            diags.push(diag(format!(
                                "node `{}` in branch {b} reads `{t}` from another branch",
                                node.id
                            )));
                            ok = false;
                        }
                    }
                }
                for t in &node.outputs {
                    if g.is_output(t) {
                        diags.push(diag(format!(
                            "tensor `{t}` escapes branch {b} to the graph outputs"
                        )));
                        ok = false;
                    }
                    for (c, pos) in g.consumers(t) {
                        let inside = region.contains(c) || (*c == ci && *pos == b);
                        if !inside {
                            diags.push(diag(format!(
                                "tensor `{t}` escapes branch {b} to node `{}`",
                                g.nodes[*c].id
                            )));
                            ok = false;
                        }
                    }
                }
            }
        }
        for (b, gate) in gates.iter().enumerate() {
            if g.is_output(gate) {
                diags.push(diag(format!("gate `{gate}` escapes to the graph outputs")));
                ok = false;
            }
            for (c, pos) in g.consumers(gate) {
                if !(branches[b].contains(c) || (*c == ci && *pos == b)) {
                    diags.push(diag(format!(
                        "gate `{gate}` feeds node `{}` outside branch {b}",
                        g.nodes[*c].id
                    )));
                    ok = false;
                }
            }
        }
        if ok {
            regions.push(SwitchRegion {
                switch: si,
                combine: ci,
                branches,
            });
        }
    }
    (regions, diags)
}

/// Structural diagnostics for every `Switch`/`Combine` pair.
pub fn validate_switch_combine(g: &Graph) -> Vec<Diagnostic> {
    let (_, mut diags) = switch_regions(g);
    let (regions, _) = switch_regions(g);
    let matched: BTreeSet<usize> = regions.iter().map(|r| r.combine).collect();
    for (i, n) in g.nodes.iter().enumerate() {
        if n.kind() == OpKind::Combine && !matched.contains(&i) {
            let any_switch_reaches = g.nodes.iter().any(|s| {
                s.kind() == OpKind::Switch && descendants(g, &s.outputs).contains(&i)
            });
            if !any_switch_reaches {
                diags.push(Diagnostic {
                    node: n.id.clone(),
                    message: "Combine has no matching Switch".into(),
                });
            }
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn graph(v: serde_json::Value) -> Result<Graph, GraphError> {
        Graph::from_json(&v.to_string())
    }

    #[test]
    fn minimal_graph_loads() {
        let g = graph(json!({
            "name": "min", "symbols": ["N"],
            "inputs": [{"name": "x", "dtype": "f32", "shape": ["N", 3]}],
            "nodes": [{"id": "r", "op": "Relu", "inputs": ["x"], "outputs": ["y"]}],
            "outputs": ["y"]
        }))
        .unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.input_shape(0), &[DimValue::symbol("N"), DimValue::Known(3)]);
        assert_eq!(g.dtype("y"), DType::F32);
    }

    #[test]
    fn duplicate_producer_rejected() {
        let e = graph(json!({
            "name": "dup",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [2]}],
            "nodes": [
                {"id": "a", "op": "Relu", "inputs": ["x"], "outputs": ["y"]},
                {"id": "b", "op": "Sigmoid", "inputs": ["x"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }))
        .unwrap_err();
        assert!(matches!(e, GraphError::DuplicateProducer(t) if t == "y"));
    }

    #[test]
    fn cycle_rejected() {
        let e = graph(json!({
            "name": "cyc",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [2]}],
            "nodes": [
                {"id": "a", "op": "Add", "inputs": ["x", "tb"], "outputs": ["ta"]},
                {"id": "b", "op": "Relu", "inputs": ["ta"], "outputs": ["tb"]}
            ],
            "outputs": ["tb"]
        }))
        .unwrap_err();
        assert!(matches!(e, GraphError::Cycle(_)));
    }

    #[test]
    fn schema_and_symbol_errors() {
        let undeclared = graph(json!({
            "name": "s", "symbols": [],
            "inputs": [{"name": "x", "dtype": "f32", "shape": ["N"]}],
            "nodes": [], "outputs": ["x"]
        }))
        .unwrap_err();
        assert!(matches!(undeclared, GraphError::UndeclaredSymbol { .. }));
        let zero = graph(json!({
            "name": "z",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [0]}],
            "nodes": [], "outputs": ["x"]
        }))
        .unwrap_err();
        assert!(matches!(zero, GraphError::BadDim { .. }));
        let arity = graph(json!({
            "name": "a",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [2]}],
            "nodes": [{"id": "r", "op": "Relu", "inputs": ["x", "x"], "outputs": ["y"]}],
            "outputs": ["y"]
        }))
        .unwrap_err();
        assert!(matches!(arity, GraphError::Schema { .. }));
        let unknown = graph(json!({
            "name": "u",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [2]}],
            "nodes": [{"id": "r", "op": "Frobnicate", "inputs": ["x"], "outputs": ["y"]}],
            "outputs": ["y"]
        }))
        .unwrap_err();
        assert!(matches!(unknown, GraphError::UnknownOp { .. }));
        let opaque = graph(json!({
            "name": "o",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [2]}],
            "nodes": [{"id": "r", "op": "Frobnicate", "inputs": ["x"], "outputs": ["y"], "opaque": true}],
            "outputs": ["y"]
        }))
        .unwrap();
        assert_eq!(opaque.nodes[0].kind(), OpKind::Opaque);
    }

    fn diamond() -> Graph {
        graph(json!({
            "name": "diamond",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [4]}],
            "nodes": [
                {"id": "a", "op": "Relu", "inputs": ["x"], "outputs": ["ta"]},
                {"id": "b", "op": "Sigmoid", "inputs": ["ta"], "outputs": ["tb"]},
                {"id": "c", "op": "Relu", "inputs": ["ta"], "outputs": ["tc"]},
                {"id": "d", "op": "Add", "inputs": ["tb", "tc"], "outputs": ["td"]}
            ],
            "outputs": ["td"]
        }))
        .unwrap()
    }

    #[test]
    fn topo_examples() {
        let g = diamond();
        assert_eq!(g.topo_order(), &[0, 1, 2, 3]);
        let chains = graph(json!({
            "name": "chains",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [4]}],
            "nodes": [
                {"id": "p2", "op": "Relu", "inputs": ["t1"], "outputs": ["t2"]},
                {"id": "q1", "op": "Relu", "inputs": ["x"], "outputs": ["u1"]},
                {"id": "p1", "op": "Relu", "inputs": ["x"], "outputs": ["t1"]},
                {"id": "q2", "op": "Relu", "inputs": ["u1"], "outputs": ["u2"]}
            ],
            "outputs": ["t2", "u2"]
        }))
        .unwrap();
        let order = chains.topo_order().to_vec();
        let all: BTreeSet<usize> = (0..4).collect();
        assert!(is_topological(&chains, &all, &order));
        assert_eq!(order, vec![2, 0, 1, 3]);
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let g = diamond();
        let once = g.to_json();
        let twice = Graph::from_json(&once).unwrap().to_json();
        assert_eq!(once, twice);
    }

    fn switch_graph(extra_escape: bool) -> Result<Graph, GraphError> {
        let mut outputs = vec![json!("y")];
        if extra_escape {
            outputs.push(json!("b1"));
        }
        graph(json!({
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
            "outputs": outputs
        }))
    }

    #[test]
    fn three_way_switch_is_clean() {
        let g = switch_graph(false).unwrap();
        assert!(validate_switch_combine(&g).is_empty());
        let (regions, _) = switch_regions(&g);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].branches[1].len(), 2);
        assert!(regions[0].branches[2].is_empty());
    }

    #[test]
    fn escaping_branch_is_reported() {
        let g = switch_graph(true).unwrap();
        let d = validate_switch_combine(&g);
        assert!(d.iter().any(|d| d.message.contains("escapes")), "{d:?}");
    }

    #[test]
    fn nested_switch_is_allowed() {
        let g = graph(json!({
            "name": "nested",
            "inputs": [
                {"name": "x", "dtype": "f32", "shape": [4]},
                {"name": "p", "dtype": "i64", "shape": [1]},
                {"name": "q", "dtype": "i64", "shape": [1]}
            ],
            "nodes": [
                {"id": "outer", "op": "Switch", "inputs": ["x", "p"], "outputs": ["o0", "o1"]},
                {"id": "inner", "op": "Switch", "inputs": ["o0", "q"], "outputs": ["i0", "i1"]},
                {"id": "ra", "op": "Relu", "inputs": ["i0"], "outputs": ["a"]},
                {"id": "sb", "op": "Sigmoid", "inputs": ["i1"], "outputs": ["b"]},
                {"id": "ic", "op": "Combine", "inputs": ["a", "b"], "outputs": ["ci"]},
                {"id": "rc", "op": "Relu", "inputs": ["o1"], "outputs": ["c"]},
                {"id": "oc", "op": "Combine", "inputs": ["ci", "c"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }))
        .unwrap();
        assert!(validate_switch_combine(&g).is_empty());
        let (regions, _) = switch_regions(&g);
        assert_eq!(regions.len(), 2);
        let outer = regions.iter().find(|r| g.nodes[r.switch].id == "outer").unwrap();
        // the inner region nests entirely inside outer branch 0
        let inner = regions.iter().find(|r| g.nodes[r.switch].id == "inner").unwrap();
        assert!(inner.all_nodes().is_subset(&outer.branches[0]));
    }
}
