//! Rank and dimension propagation: a forward/backward fixpoint over the
//! shape (S) and value (V) maps of every tensor.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Producer};
use crate::ops::{self, DynClass, OpError, OpInputs, OpKind};
use crate::shape::{ShapeInfo, ValueInfo};
use crate::sym::{DimValue, Env, SymError, SymbolTable};

#[derive(Clone, Debug)]
pub struct RdpConfig {
    pub value_cap: usize,
    /// Sweep bound is `bound_factor * max(node count, 1)`.
    pub bound_factor: usize,
}

impl Default for RdpConfig {
    fn default() -> Self {
        RdpConfig {
            value_cap: ops::DEFAULT_VALUE_CAP,
            bound_factor: 10,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RdpError {
    #[error("node `{node}`: {source}")]
    Transfer { node: String, source: OpError },
    #[error("node `{node}`: output `{tensor}` contradicts an earlier fact: {old} vs {new}")]
    Contradiction {
        node: String,
        tensor: String,
        old: DimValue,
        new: DimValue,
    },
    #[error("no fixpoint after {0} sweeps")]
    NoConvergence(usize),
    #[error("sweep order is not a topological order of the graph")]
    BadOrder,
}

/// Final analysis state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpResult {
    pub shapes: BTreeMap<String, ShapeInfo>,
    pub values: BTreeMap<String, ValueInfo>,
    /// Effective dynamism class per node id.
    pub classes: BTreeMap<String, DynClass>,
    /// Nodes with at least one output shape containing `nac`.
    pub nac_nodes: BTreeSet<String>,
    pub symbols: SymbolTable,
    pub sweeps: usize,
}

impl RdpResult {
    pub fn shape(&self, tensor: &str) -> &ShapeInfo {
        self.shapes.get(tensor).unwrap_or(&ShapeInfo::Undef)
    }

    pub fn value(&self, tensor: &str) -> &ValueInfo {
        self.values.get(tensor).unwrap_or(&ValueInfo::Undef)
    }

    /// The S/V maps only, for order-independence comparisons.
    pub fn canonical_maps(&self) -> (BTreeMap<String, String>, BTreeMap<String, String>) {
        let s = self.shapes.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
        let v = self.values.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
        (s, v)
    }

    /// A view that keeps only rank facts for node outputs: every dimension
    /// is `nac`. Graph inputs and constants keep their declared shapes.
    pub fn rank_only(&self, g: &Graph) -> RdpResult {
        let mut r = self.clone();
        for n in &g.nodes {
            for t in &n.outputs {
                if let Some(ShapeInfo::Ranked(d)) = r.shapes.get_mut(t) {
                    d.iter_mut().for_each(|x| *x = DimValue::Nac);
                }
                r.values.insert(t.clone(), ValueInfo::Nac);
            }
        }
        r
    }
}

struct State<'g> {
    g: &'g Graph,
    cfg: RdpConfig,
    shapes: BTreeMap<String, ShapeInfo>,
    values: BTreeMap<String, ValueInfo>,
    symbols: SymbolTable,
}

fn const_value(g: &Graph, name: &str, cap: usize) -> ValueInfo {
    let Some(c) = g.constant(name) else {
        return ValueInfo::Nac;
    };
    match &c.int_data {
        Some(data) if c.shape.len() <= 1 && data.len() <= cap => ValueInfo::known(data.iter().copied()),
        _ => ValueInfo::Nac,
    }
}

/// Merge a newly computed shape into the old entry, moving only downward.
fn merge_shape(old: &ShapeInfo, new: &ShapeInfo) -> Result<ShapeInfo, (DimValue, DimValue)> {
    if let (ShapeInfo::Ranked(a), ShapeInfo::Ranked(b)) = (old, new) {
        if a.len() == b.len() {
            for (x, y) in a.iter().zip(b) {
                if let (DimValue::Known(p), DimValue::Known(q)) = (x, y) {
                    if p != q {
                        return Err((x.clone(), y.clone()));
                    }
                }
            }
        }
    }
    Ok(old.meet(new))
}

impl State<'_> {
    fn sweep(&mut self, order: &[usize]) -> Result<bool, RdpError> {
        let mut changed = false;
        for &ni in order {
            changed |= self.visit(ni)?;
        }
        Ok(changed)
    }

    fn visit(&mut self, ni: usize) -> Result<bool, RdpError> {
        let g = self.g;
        let node = &g.nodes[ni];
        let err = |source: OpError| RdpError::Transfer {
            node: node.id.clone(),
            source,
        };
        let in_shapes: Vec<ShapeInfo> = node.inputs.iter().map(|t| self.shapes[t].clone()).collect();
        let in_values: Vec<ValueInfo> = node.inputs.iter().map(|t| self.values[t].clone()).collect();
        let in_dtypes: Vec<_> = node.inputs.iter().map(|t| g.dtype(t)).collect();
        let out_dtypes: Vec<_> = node.outputs.iter().map(|t| g.dtype(t)).collect();
        let ins = OpInputs {
            shapes: &in_shapes,
            values: &in_values,
            in_dtypes: &in_dtypes,
            out_dtypes: &out_dtypes,
            value_cap: self.cfg.value_cap,
        };
        let mut cells = ops::forward(node, &ins).map_err(err)?;

        if ops::spec_of(node).class == DynClass::Isdo {
            for (k, (s, v)) in cells.iter_mut().enumerate() {
                if !s.is_resolved() {
                    continue;
                }
                if let ValueInfo::Tracked(elems) = v {
                    for (i, e) in elems.iter_mut().enumerate() {
                        if e.is_nac() {
                            *e = DimValue::symbol(self.symbols.generated(&node.id, k, i));
                        }
                    }
                }
            }
        }

        let mut changed = false;
        for (t, (s, v)) in node.outputs.iter().zip(&cells) {
            let old_s = &self.shapes[t];
            let new_s = merge_shape(old_s, s).map_err(|(old, new)| RdpError::Contradiction {
                node: node.id.clone(),
                tensor: t.clone(),
                old,
                new,
            })?;
            let new_v = self.values[t].meet(v);
            if new_s != *old_s {
                self.shapes.insert(t.clone(), new_s);
                changed = true;
            }
            if new_v != self.values[t] {
                self.values.insert(t.clone(), new_v);
                changed = true;
            }
        }

        let out_shapes: Vec<ShapeInfo> = node.outputs.iter().map(|t| self.shapes[t].clone()).collect();
        let out_values: Vec<ValueInfo> = node.outputs.iter().map(|t| self.values[t].clone()).collect();
        let cands = ops::backward(node, &out_shapes, &out_values, &in_shapes).map_err(err)?;
        for (t, cand) in node.inputs.iter().zip(cands) {
            let Some(cand) = cand else { continue };
            if !matches!(g.producer(t), Some(Producer::Node { .. })) {
                continue;
            }
            let cur = &self.shapes[t];
            if !cur.has_undef() {
                continue;
            }
            if let Some(refined) = cur.refine_undef(&cand) {
                self.shapes.insert(t.clone(), refined);
                changed = true;
            }
        }
        Ok(changed)
    }
}

/// Run the analysis with the graph's depth-first sweep order.
pub fn run_rdp(g: &Graph) -> Result<RdpResult, RdpError> {
    run_rdp_with(g, g.topo_order(), &RdpConfig::default())
}

/// Run the analysis sweeping nodes in `order`, which must be topological.
pub fn run_rdp_with(g: &Graph, order: &[usize], cfg: &RdpConfig) -> Result<RdpResult, RdpError> {
    let all: BTreeSet<usize> = (0..g.nodes.len()).collect();
    if !crate::graph::is_topological(g, &all, order) {
        return Err(RdpError::BadOrder);
    }
    let mut st = State {
        g,
        cfg: cfg.clone(),
        shapes: BTreeMap::new(),
        values: BTreeMap::new(),
        symbols: SymbolTable::with_inputs(g.symbols.iter().cloned()),
    };
    for (i, inp) in g.inputs.iter().enumerate() {
        st.shapes.insert(inp.name.clone(), ShapeInfo::Ranked(g.input_shape(i).to_vec()));
        st.values.insert(inp.name.clone(), ValueInfo::Nac);
    }
    for c in &g.constants {
        st.shapes.insert(c.name.clone(), ShapeInfo::known(c.shape.iter().copied()));
        st.values.insert(c.name.clone(), const_value(g, &c.name, cfg.value_cap));
    }
    for n in &g.nodes {
        for t in &n.outputs {
            st.shapes.insert(t.clone(), ShapeInfo::Undef);
            st.values.insert(t.clone(), ValueInfo::Undef);
        }
    }

    let bound = cfg.bound_factor * g.nodes.len().max(1);
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        if sweeps > bound {
            return Err(RdpError::NoConvergence(bound));
        }
        if !st.sweep(order)? {
            break;
        }
    }

    let known_value = |t: &str| -> bool {
        g.constant(t).is_some_and(|c| c.int_data.is_some())
            || matches!(st.values.get(t), Some(ValueInfo::Tracked(v)) if v.iter().all(DimValue::is_resolved))
    };
    let classes = g
        .nodes
        .iter()
        .map(|n| (n.id.clone(), ops::classify(n, known_value)))
        .collect();
    let nac_nodes = g
        .nodes
        .iter()
        .filter(|n| n.outputs.iter().any(|t| st.shapes[t].has_nac()))
        .map(|n| n.id.clone())
        .collect();
    Ok(RdpResult {
        shapes: st.shapes,
        values: st.values,
        classes,
        nac_nodes,
        symbols: st.symbols,
        sweeps,
    })
}

/// Concrete shapes obtained by evaluating an analysis result under `env`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substituted {
    pub shapes: BTreeMap<String, Vec<i64>>,
    /// Tensors with a `nac` rank or dimension.
    pub dynamic_only: Vec<String>,
    /// Tensors still containing `undef` (diagnostics).
    pub unresolved: Vec<String>,
}

/// Evaluate every resolved shape under `env`.
pub fn substitute(result: &RdpResult, env: &Env) -> Result<Substituted, SymError> {
    let mut out = Substituted::default();
    for (t, s) in &result.shapes {
        if s.has_undef() {
            out.unresolved.push(t.clone());
        } else if s.has_nac() {
            out.dynamic_only.push(t.clone());
        } else if let ShapeInfo::Ranked(d) = s {
            let dims = d
                .iter()
                .map(|x| x.evaluate(env).map(|v| v.unwrap_or_default()))
                .collect::<Result<_, _>>()?;
            out.shapes.insert(t.clone(), dims);
        }
    }
    Ok(out)
}

/// Whether `node`'s effective class is EDO or any output has a `nac` dim.
pub fn is_dynamic_boundary(g: &Graph, r: &RdpResult, ni: usize) -> bool {
    let n = &g.nodes[ni];
    !matches!(n.kind(), OpKind::Switch | OpKind::Combine) && r.nac_nodes.contains(&n.id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn graph(v: serde_json::Value) -> Graph {
        Graph::from_json(&v.to_string()).unwrap()
    }

    fn dims(s: &[&str]) -> ShapeInfo {
        ShapeInfo::Ranked(s.iter().map(|d| DimValue::parse(d).unwrap()).collect())
    }

    #[test]
    fn shape_value_chain() {
        let g = graph(json!({
            "name": "chain", "symbols": ["N", "H", "W"],
            "inputs": [{"name": "x", "dtype": "f32", "shape": ["N", 3, "H", "W"]}],
            "constants": [
                {"name": "zero", "dtype": "i64", "shape": [1], "int_data": [0]},
                {"name": "tail", "dtype": "i64", "shape": [1], "int_data": [-1]}
            ],
            "nodes": [
                {"id": "shape", "op": "Shape", "inputs": ["x"], "outputs": ["s"]},
                {"id": "gather", "op": "Gather", "inputs": ["s", "zero"], "outputs": ["n"]},
                {"id": "cat", "op": "Concat", "inputs": ["n", "tail"], "outputs": ["tgt"], "attrs": {"axis": 0}},
                {"id": "reshape", "op": "Reshape", "inputs": ["x", "tgt"], "outputs": ["flat"]},
                {"id": "relu", "op": "Relu", "inputs": ["flat"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }));
        let r = run_rdp(&g).unwrap();
        assert_eq!(r.value("s").to_string(), "<N,3,H,W>");
        assert_eq!(r.shape("y"), &dims(&["N", "3*H*W"]));
        assert!(r.nac_nodes.is_empty());
        assert_eq!(r.classes["reshape"], DynClass::Isdos);
        let sub = substitute(&r, &Env::from([("N".into(), 2), ("H".into(), 4), ("W".into(), 5)])).unwrap();
        assert_eq!(sub.shapes["y"], vec![2, 60]);
    }

    #[test]
    fn topk_dynamic_k_marks_nac() {
        let g = graph(json!({
            "name": "topk", "symbols": ["N"],
            "inputs": [
                {"name": "x", "dtype": "f32", "shape": ["N", 100]},
                {"name": "k", "dtype": "i64", "shape": [1]}
            ],
            "nodes": [
                {"id": "topk", "op": "TopK", "inputs": ["x", "k"], "outputs": ["v", "i"], "attrs": {"axis": 1}},
                {"id": "relu", "op": "Relu", "inputs": ["v"], "outputs": ["y"]}
            ],
            "outputs": ["y", "i"]
        }));
        let r = run_rdp(&g).unwrap();
        assert_eq!(r.shape("y"), &ShapeInfo::Ranked(vec![DimValue::symbol("N"), DimValue::Nac]));
        assert!(r.nac_nodes.contains("topk") && r.nac_nodes.contains("relu"));
        assert_eq!(r.classes["topk"], DynClass::Isvdos);
    }

    fn combine_graph(second: i64) -> Graph {
        graph(json!({
            "name": "comb", "symbols": ["N"],
            "inputs": [
                {"name": "x", "dtype": "f32", "shape": ["N", 64]},
                {"name": "p", "dtype": "i64", "shape": [1]}
            ],
            "constants": [{"name": "w", "dtype": "f32", "shape": [64, second]}],
            "nodes": [
                {"id": "sw", "op": "Switch", "inputs": ["x", "p"], "outputs": ["g0", "g1"]},
                {"id": "a", "op": "Relu", "inputs": ["g0"], "outputs": ["ta"]},
                {"id": "b", "op": "MatMul", "inputs": ["g1", "w"], "outputs": ["tb"]},
                {"id": "cb", "op": "Combine", "inputs": ["ta", "tb"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }))
    }

    #[test]
    fn combine_meets_branches() {
        let r = run_rdp(&combine_graph(64)).unwrap();
        assert_eq!(r.shape("y"), &dims(&["N", "64"]));
        let r = run_rdp(&combine_graph(32)).unwrap();
        assert_eq!(r.shape("y"), &ShapeInfo::Ranked(vec![DimValue::symbol("N"), DimValue::Nac]));
    }

    #[test]
    fn contradiction_names_node() {
        let g = graph(json!({
            "name": "bad",
            "inputs": [{"name": "a", "dtype": "f32", "shape": [2, 4]}],
            "constants": [{"name": "b", "dtype": "f32", "shape": [5, 3]}],
            "nodes": [{"id": "mm", "op": "MatMul", "inputs": ["a", "b"], "outputs": ["y"]}],
            "outputs": ["y"]
        }));
        let e = run_rdp(&g).unwrap_err();
        assert!(matches!(&e, RdpError::Transfer { node, .. } if node == "mm"), "{e}");
    }

    #[test]
    fn nonzero_generates_symbols_downstream() {
        let g = graph(json!({
            "name": "nz", "symbols": ["N"],
            "inputs": [{"name": "x", "dtype": "f32", "shape": ["N", 4]}],
            "nodes": [
                {"id": "nz", "op": "NonZero", "inputs": ["x"], "outputs": ["idx"]},
                {"id": "sh", "op": "Shape", "inputs": ["idx"], "outputs": ["s"]},
                {"id": "cos", "op": "ConstantOfShape", "inputs": ["s"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }));
        let r = run_rdp(&g).unwrap();
        assert_eq!(r.value("s").to_string(), "<2,$sh_1>");
        assert_eq!(r.shape("y").to_string(), "[2,$sh_1]");
        assert!(r.nac_nodes.contains("nz"));
        assert!(!r.nac_nodes.contains("cos"));
        assert_eq!(r.sweeps, 2);
        let again = run_rdp(&g).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn result_round_trips_through_json() {
        let r = run_rdp(&combine_graph(32)).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: RdpResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back.shapes, r.shapes);
        assert_eq!(back.values, r.values);
    }
}
