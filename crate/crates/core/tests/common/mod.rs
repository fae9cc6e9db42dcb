#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dyndag::graph::Graph;
use dyndag::interp::ConcreteEnv;
use dyndag::mem::{Lifetime, MemPlan};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn graph(v: Value) -> Graph {
    Graph::from_json(&v.to_string()).unwrap_or_else(|e| panic!("{e}: {v}"))
}

/// Random symbol bindings in 2..=16 for every declared symbol.
pub fn random_env<R: Rng>(g: &Graph, rng: &mut R, seed: u64) -> ConcreteEnv {
    let symbols = g.symbols.iter().map(|s| (s.clone(), rng.gen_range(2..=16))).collect();
    ConcreteEnv::with_symbols(symbols, seed)
}

// ---------------------------------------------------------------- orders

/// Peak live bytes of running every node of `g` in `order`: a node's outputs
/// are live from its step through the step of their last consumer, graph
/// outputs until the end.
pub fn naive_peak(g: &Graph, order: &[usize], sizes: &BTreeMap<String, u64>) -> u64 {
    let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let last = order.len().saturating_sub(1);
    let mut live = vec![0u64; order.len()];
    for (v, n) in g.nodes.iter().enumerate() {
        for t in &n.outputs {
            let birth = pos[&v];
            let mut death = g.consumers(t).iter().map(|(c, _)| pos[c]).max().unwrap_or(birth);
            if g.is_output(t) {
                death = last;
            }
            for s in &mut live[birth..=death.max(birth)] {
                *s += sizes[t];
            }
        }
    }
    live.into_iter().max().unwrap_or(0)
}

/// Minimum of `naive_peak` over every topological order, by plain
/// enumeration.
pub fn naive_min_peak(g: &Graph, sizes: &BTreeMap<String, u64>) -> u64 {
    fn go(g: &Graph, sizes: &BTreeMap<String, u64>, order: &mut Vec<usize>, used: &mut Vec<bool>, best: &mut u64) {
        if order.len() == g.nodes.len() {
            *best = (*best).min(naive_peak(g, order, sizes));
            return;
        }
        for v in 0..g.nodes.len() {
            if used[v] || g.predecessors(v).iter().any(|p| !used[*p]) {
                continue;
            }
            used[v] = true;
            order.push(v);
            go(g, sizes, order, used, best);
            order.pop();
            used[v] = false;
        }
    }
    let mut best = u64::MAX;
    go(g, sizes, &mut Vec::new(), &mut vec![false; g.nodes.len()], &mut best);
    best
}

/// Random DAG of at most `max_nodes` Concat nodes with random byte sizes.
/// Sinks are graph outputs.
pub fn random_sized_dag<R: Rng>(rng: &mut R, max_nodes: usize) -> (Graph, BTreeMap<String, u64>) {
    let n = rng.gen_range(1..=max_nodes);
    let mut nodes = Vec::new();
    let mut consumed = BTreeSet::new();
    for i in 0..n {
        let mut ins: Vec<String> = (0..i).filter(|_| rng.gen_bool(0.35)).map(|j| format!("t{j}")).collect();
        ins.truncate(3);
        if ins.is_empty() {
            ins.push("x".into());
        }
        for t in &ins {
            consumed.insert(t.clone());
        }
        nodes.push(json!({"id": format!("n{i}"), "op": "Concat", "inputs": ins, "outputs": [format!("t{i}")], "attrs": {"axis": 0}}));
    }
    let outputs: Vec<String> = (0..n).map(|i| format!("t{i}")).filter(|t| !consumed.contains(t)).collect();
    let sizes = (0..n).map(|i| (format!("t{i}"), rng.gen_range(1..=100u64))).collect();
    let g = graph(json!({
        "name": "dag",
        "inputs": [{"name": "x", "dtype": "f32", "shape": [4]}],
        "nodes": nodes,
        "outputs": outputs
    }));
    (g, sizes)
}

// ---------------------------------------------------------------- memory

/// Largest total size of lifetimes that share a step.
pub fn concurrent_lower_bound(lts: &[Lifetime]) -> u64 {
    let steps: BTreeSet<usize> = lts.iter().flat_map(|l| [l.birth, l.death]).collect();
    steps
        .iter()
        .map(|s| lts.iter().filter(|l| l.birth <= *s && *s <= l.death).map(|l| l.size).sum())
        .max()
        .unwrap_or(0)
}

/// True when the live-size profile never rises again after it starts falling.
pub fn unimodal(lts: &[Lifetime]) -> bool {
    let end = lts.iter().map(|l| l.death + 1).max().unwrap_or(0);
    let profile: Vec<u64> = (0..end)
        .map(|s| lts.iter().filter(|l| l.birth <= s && s <= l.death).map(|l| l.size).sum())
        .collect();
    let mut falling = false;
    for w in profile.windows(2) {
        if w[1] < w[0] {
            falling = true;
        } else if w[1] > w[0] && falling {
            return false;
        }
    }
    true
}

/// Problems with a placement of `lts`: missing tensors, undersized slots,
/// slots past the arena, and pairs live at once whose byte ranges meet.
pub fn placement_problems(lts: &[Lifetime], plan: &MemPlan) -> Vec<String> {
    let mut out = Vec::new();
    let placed: BTreeMap<&str, (u64, u64)> = plan.tensors.iter().map(|p| (p.tensor.as_str(), (p.offset, p.size))).collect();
    for l in lts {
        match placed.get(l.tensor.as_str()) {
            None => out.push(format!("{} unplaced", l.tensor)),
            Some((o, s)) => {
                if *s < l.size {
                    out.push(format!("{} slot too small", l.tensor));
                }
                if o + l.size > plan.arena {
                    out.push(format!("{} past arena", l.tensor));
                }
            }
        }
    }
    for (i, a) in lts.iter().enumerate() {
        for b in &lts[i + 1..] {
            let time = a.birth <= b.death && b.birth <= a.death;
            let (Some((oa, _)), Some((ob, _))) = (placed.get(a.tensor.as_str()), placed.get(b.tensor.as_str())) else {
                continue;
            };
            let space = *oa < ob + b.size && *ob < oa + a.size;
            if time && space {
                out.push(format!("{} overlaps {}", a.tensor, b.tensor));
            }
        }
    }
    out
}

// ---------------------------------------------------------------- graphs

struct Builder {
    nodes: Vec<Value>,
    next: usize,
}

impl Builder {
    fn fresh(&mut self) -> String {
        self.next += 1;
        format!("t{}", self.next)
    }

    fn node(&mut self, op: &str, inputs: &[&str], outputs: usize, attrs: Value) -> Vec<String> {
        let outs: Vec<String> = (0..outputs).map(|_| self.fresh()).collect();
        let id = format!("n{}", self.nodes.len());
        self.nodes.push(json!({"id": id, "op": op, "inputs": inputs, "outputs": outs, "attrs": attrs}));
        outs
    }

    fn one(&mut self, op: &str, inputs: &[&str], attrs: Value) -> String {
        self.node(op, inputs, 1, attrs).remove(0)
    }
}

/// Random valid graph of at most `max_nodes` nodes mixing elementwise,
/// broadcast, shape-value chains, reshapes, Switch/Combine regions, and
/// NonZero-driven dynamic row counts. Every float tensor is `[rows, 8]`.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize) -> Graph {
    let target = rng.gen_range(1..=max_nodes.max(1));
    let mut b = Builder { nodes: Vec::new(), next: 0 };
    let mut pools: Vec<Vec<String>> = vec![vec!["x".into()]];
    while b.nodes.len() + 6 <= target.max(6) {
        let pool = pools.last().unwrap().clone();
        let src = pool.choose(rng).unwrap().clone();
        let other = pool.choose(rng).unwrap().clone();
        let out = match rng.gen_range(0..11) {
            0 => b.one("Relu", &[&src], json!({})),
            1 => b.one("Sigmoid", &[&src], json!({})),
            2 => b.one("Add", &[&src, &other], json!({})),
            3 => b.one("MatMul", &[&src, "w8"], json!({})),
            4 => {
                let s = b.one("Shape", &[&src], json!({}));
                let n = b.one("Gather", &[&s, "idx0"], json!({}));
                let t = b.one("Concat", &[&n, "c8"], json!({"axis": 0}));
                b.one("Reshape", &[&src, &t], json!({}))
            }
            5 => {
                let m = b.one("ReduceMean", &[&src], json!({"axes": [1], "keepdims": 1}));
                b.one("Add", &[&src, &m], json!({}))
            }
            6 => {
                let t = b.one("Transpose", &[&src], json!({"perm": [1, 0]}));
                let r = b.one("Relu", &[&t], json!({}));
                b.one("Transpose", &[&r], json!({"perm": [1, 0]}))
            }
            7 => {
                let gate = b.one("ReduceMean", &[&src], json!({"axes": [0, 1], "keepdims": 0}));
                let g = b.node("Switch", &[&src, &gate], 2, json!({}));
                let r = b.one("Relu", &[&g[0]], json!({}));
                let s = b.one("Sigmoid", &[&g[1]], json!({}));
                b.one("Combine", &[&r, &s], json!({}))
            }
            8 => {
                let nz = b.one("NonZero", &[&src], json!({}));
                let t = b.one("Transpose", &[&nz], json!({"perm": [1, 0]}));
                let c = b.one("Cast", &[&t], json!({"to": "f32"}));
                let out = b.one("MatMul", &[&c, "w2"], json!({}));
                pools.push(vec![out]);
                continue;
            }
            9 => b.one("Softmax", &[&src], json!({"axis": -1})),
            _ => {
                let c = b.one("Concat", &[&src, &other], json!({"axis": 1}));
                b.one("MatMul", &[&c, "w16"], json!({}))
            }
        };
        pools.last_mut().unwrap().push(out);
    }
    if b.nodes.is_empty() {
        b.one("Relu", &["x"], json!({}));
    }
    let consumed: BTreeSet<String> = b
        .nodes
        .iter()
        .flat_map(|n| n["inputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()))
        .collect();
    let mut outputs: Vec<String> = b
        .nodes
        .iter()
        .flat_map(|n| n["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()))
        .filter(|t| !consumed.contains(t))
        .collect();
    outputs.dedup();
    graph(json!({
        "name": "random",
        "symbols": ["N"],
        "inputs": [{"name": "x", "dtype": "f32", "shape": ["N", 8]}],
        "constants": [
            {"name": "w8", "dtype": "f32", "shape": [8, 8]},
            {"name": "w2", "dtype": "f32", "shape": [2, 8]},
            {"name": "w16", "dtype": "f32", "shape": [16, 8]},
            {"name": "idx0", "dtype": "i64", "shape": [1], "int_data": [0]},
            {"name": "c8", "dtype": "i64", "shape": [1], "int_data": [8]}
        ],
        "nodes": b.nodes,
        "outputs": outputs
    }))
}

/// Kinds of execution-determined producer used by [`edo_chain`].
#[derive(Clone, Copy, Debug)]
pub enum Edo {
    NonZero,
    TopK,
}

/// A chain of stages. Each stage runs `fillers[i]` elementwise nodes, then an
/// execution-determined producer whose result only feeds Shape ->
/// ConstantOfShape, so the next stage starts from a symbolic shape.
pub fn edo_chain(stages: &[(usize, Edo)]) -> Graph {
    let mut b = Builder { nodes: Vec::new(), next: 0 };
    let mut cur = "x".to_string();
    for (fillers, edo) in stages {
        for i in 0..*fillers {
            let op = ["Relu", "Sigmoid", "Softmax"][i % 3];
            cur = b.one(op, &[&cur], json!({}));
        }
        let dynamic = match edo {
            Edo::NonZero => b.one("NonZero", &[&cur], json!({})),
            Edo::TopK => b.node("TopK", &[&cur, "k"], 2, json!({"axis": -1})).remove(0),
        };
        let s = b.one("Shape", &[&dynamic], json!({}));
        cur = b.one("ConstantOfShape", &[&s], json!({"value": 1}));
    }
    let y = b.one("Relu", &[&cur], json!({}));
    graph(json!({
        "name": "edo_chain",
        "symbols": ["N"],
        "inputs": [
            {"name": "x", "dtype": "f32", "shape": ["N", 8]},
            {"name": "k", "dtype": "i64", "shape": [1]}
        ],
        "nodes": b.nodes,
        "outputs": [y]
    }))
}
