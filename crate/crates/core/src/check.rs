//! Replays plans on the interpreter and reports every disagreement.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{ExecPlan, Method};
use crate::graph::{is_topological, Graph};
use crate::interp::{bind_generated, interpret_order, ConcreteEnv, InterpError, Trace};
use crate::mem::{plan, Lifetime, MemError, MemPlan, Strategy};
use crate::ops::OpKind;
use crate::rdp::RdpResult;
use crate::shape::{ShapeInfo, ValueInfo};
use crate::sym::{DimValue, Env};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    /// The global order is a topological order of the graph.
    OrderValid,
    /// Planned subgraph peaks match the observed ones.
    PeakMatch,
    /// No two simultaneously live tensors share bytes.
    NoOverlap,
    /// The arena holds the observed peak.
    ArenaCoversPeak,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: CheckKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphPeak {
    pub id: usize,
    pub method: Method,
    pub planned: Option<u64>,
    pub observed: u64,
    /// Branches that did not run make the observed peak an upper-bounded one.
    pub control_flow: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub ok: bool,
    pub observed_peak: u64,
    pub arena: u64,
    pub subgraphs: Vec<SubgraphPeak>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckError {
    #[error("plan names unknown node `{0}`")]
    UnknownNode(String),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

fn resolve_order(g: &Graph, ids: &[String]) -> Result<Vec<usize>, CheckError> {
    ids.iter()
        .map(|id| g.node_index(id).ok_or_else(|| CheckError::UnknownNode(id.clone())))
        .collect()
}

/// Lifetimes of a trace that occupy memory.
pub fn sized_lifetimes(trace: &Trace) -> Vec<Lifetime> {
    trace.lifetimes.iter().filter(|l| l.size > 0).cloned().collect()
}

/// Run the plan's global order and build a memory plan from what ran.
pub fn runtime_mem_plan(
    g: &Graph,
    env: &ConcreteEnv,
    exec: &ExecPlan,
    strategy: Strategy,
    align: u64,
) -> Result<(Trace, MemPlan), CheckError> {
    let order = resolve_order(g, &exec.global_order)?;
    let trace = interpret_order(g, env, &order)?;
    let mem = plan(&sized_lifetimes(&trace), strategy, align)?;
    Ok((trace, mem))
}

/// Observed peak of one subgraph: the most bytes produced by its members
/// that are live at any of its steps.
fn observed_peak(g: &Graph, trace: &Trace, members: &BTreeSet<&str>) -> u64 {
    let step_of: HashMap<&str, usize> = trace
        .steps
        .iter()
        .enumerate()
        .flat_map(|(s, ids)| ids.iter().map(move |id| (id.as_str(), s)))
        .collect();
    let steps: Vec<usize> = members.iter().filter_map(|m| step_of.get(m).copied()).collect();
    let ours: Vec<&Lifetime> = trace
        .lifetimes
        .iter()
        .filter(|l| {
            g.producer_node(&l.tensor)
                .is_some_and(|p| members.contains(g.nodes[p].id.as_str()))
        })
        .collect();
    steps
        .iter()
        .map(|s| ours.iter().filter(|l| l.birth <= *s && *s <= l.death).map(|l| l.size).sum())
        .max()
        .unwrap_or(0)
}

/// Re-execute `exec`'s order under `env` and check it and `mem` against
/// the observed run.
pub fn check_plan(
    g: &Graph,
    r: &RdpResult,
    env: &ConcreteEnv,
    exec: &ExecPlan,
    mem: &MemPlan,
) -> Result<CheckReport, CheckError> {
    let mut violations = Vec::new();
    let order = resolve_order(g, &exec.global_order)?;
    let all: BTreeSet<usize> = (0..g.nodes.len()).collect();
    if !is_topological(g, &all, &order) {
        violations.push(Violation {
            check: CheckKind::OrderValid,
            detail: "global order is not a topological order of the graph".into(),
        });
        return Ok(CheckReport {
            ok: false,
            observed_peak: 0,
            arena: mem.arena,
            subgraphs: Vec::new(),
            violations,
        });
    }
    for sg in &exec.subgraphs {
        let members: BTreeSet<usize> = resolve_order(g, &sg.nodes)?.into_iter().collect();
        if !is_topological(g, &members, &resolve_order(g, &sg.order)?) {
            violations.push(Violation {
                check: CheckKind::OrderValid,
                detail: format!("subgraph {} order is not topological", sg.id),
            });
        }
    }

    let trace = interpret_order(g, env, &order)?;
    let mut bindings = env.symbols.clone();
    bindings.extend(bind_generated(g, r, &trace));

    let mut subgraphs = Vec::new();
    for sg in &exec.subgraphs {
        let members: BTreeSet<&str> = sg.nodes.iter().map(String::as_str).collect();
        let observed = observed_peak(g, &trace, &members);
        let control_flow = sg
            .nodes
            .iter()
            .filter_map(|id| g.node(id))
            .any(|n| matches!(n.kind(), OpKind::Switch | OpKind::Combine));
        let planned = sg.peak.evaluate(&bindings);
        if sg.method != Method::Heuristic {
            let fine = match planned {
                Some(p) if control_flow => observed <= p,
                Some(p) => observed == p,
                None => false,
            };
            if !fine {
                violations.push(Violation {
                    check: CheckKind::PeakMatch,
                    detail: format!(
                        "subgraph {}: planned peak {} evaluates to {:?}, observed {}",
                        sg.id, sg.peak, planned, observed
                    ),
                });
            }
        }
        subgraphs.push(SubgraphPeak {
            id: sg.id,
            method: sg.method,
            planned,
            observed,
            control_flow,
        });
    }

    let actual: BTreeMap<&str, &Lifetime> = trace
        .lifetimes
        .iter()
        .filter(|l| l.size > 0)
        .map(|l| (l.tensor.as_str(), l))
        .collect();
    let placed: BTreeMap<&str, (u64, u64)> = mem
        .tensors
        .iter()
        .map(|p| (p.tensor.as_str(), (p.offset, p.size)))
        .collect();
    for (t, l) in &actual {
        match placed.get(t) {
            None => violations.push(Violation {
                check: CheckKind::NoOverlap,
                detail: format!("tensor `{t}` has no arena offset"),
            }),
            Some((_, size)) if *size < l.size => violations.push(Violation {
                check: CheckKind::NoOverlap,
                detail: format!("tensor `{t}` needs {} bytes but has {size}", l.size),
            }),
            _ => {}
        }
    }
    let live: Vec<(&str, &Lifetime, u64, u64)> = actual
        .iter()
        .filter_map(|(t, l)| placed.get(t).map(|(o, _)| (*t, *l, *o, *o + l.size)))
        .collect();
    for i in 0..live.len() {
        for j in (i + 1)..live.len() {
            let (a, la, sa, ea) = live[i];
            let (b, lb, sb, eb) = live[j];
            if la.overlaps(lb) && sa < eb && sb < ea {
                violations.push(Violation {
                    check: CheckKind::NoOverlap,
                    detail: format!("`{a}` [{sa}, {ea}) and `{b}` [{sb}, {eb}) are live together"),
                });
            }
        }
    }
    if mem.arena < trace.peak {
        violations.push(Violation {
            check: CheckKind::ArenaCoversPeak,
            detail: format!("arena {} is below the observed peak {}", mem.arena, trace.peak),
        });
    }
    Ok(CheckReport {
        ok: violations.is_empty(),
        observed_peak: trace.peak,
        arena: mem.arena,
        subgraphs,
        violations,
    })
}

fn dims_disagree(facts: &[DimValue], actual: &[i64], env: &Env) -> Option<String> {
    if facts.len() != actual.len() {
        return Some(format!("rank {} vs {}", facts.len(), actual.len()));
    }
    for (i, (f, a)) in facts.iter().zip(actual).enumerate() {
        match f.evaluate(env) {
            Ok(Some(v)) if v != *a => return Some(format!("index {i}: {f} = {v} vs {a}")),
            Err(e) => return Some(format!("index {i}: {e}")),
            _ => {}
        }
    }
    None
}

/// Compare analysis facts against a concrete run. Every resolved dim and
/// value, evaluated under the environment plus generated-symbol bindings,
/// must equal what the interpreter produced.
pub fn soundness_violations(g: &Graph, r: &RdpResult, env: &ConcreteEnv, trace: &Trace) -> Vec<String> {
    let mut bindings = env.symbols.clone();
    bindings.extend(bind_generated(g, r, trace));
    let mut out = Vec::new();
    for (t, c) in &trace.tensors {
        if let Some(ShapeInfo::Ranked(dims)) = r.shapes.get(t) {
            if let Some(d) = dims_disagree(dims, &c.shape, &bindings) {
                out.push(format!("shape of `{t}`: {d}"));
            }
        }
        if let (Some(ValueInfo::Tracked(vals)), Some(actual)) = (r.values.get(t), &c.value) {
            if let Some(d) = dims_disagree(vals, actual, &bindings) {
                out.push(format!("value of `{t}`: {d}"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{plan_exec, ExecConfig};
    use crate::rdp::run_rdp;
    use serde_json::json;

    fn static_graph() -> Graph {
        Graph::from_json(
            &json!({
                "name": "s",
                "inputs": [{"name": "x", "dtype": "f32", "shape": [4, 4]}],
                "nodes": [
                    {"id": "a", "op": "Relu", "inputs": ["x"], "outputs": ["ta"]},
                    {"id": "b", "op": "Sigmoid", "inputs": ["ta"], "outputs": ["tb"]},
                    {"id": "c", "op": "Add", "inputs": ["ta", "tb"], "outputs": ["y"]}
                ],
                "outputs": ["y"]
            })
            .to_string(),
        )
        .unwrap()
    }

    #[test]
    fn valid_plans_pass() {
        let g = static_graph();
        let r = run_rdp(&g).unwrap();
        let exec = plan_exec(&g, &r, &ExecConfig::default());
        let env = ConcreteEnv::default();
        let (_, mem) = runtime_mem_plan(&g, &env, &exec, Strategy::FromPeak, 1).unwrap();
        let rep = check_plan(&g, &r, &env, &exec, &mem).unwrap();
        assert!(rep.ok, "{:?}", rep.violations);
        assert_eq!(rep.observed_peak, 192);
        assert_eq!(rep.subgraphs[0].planned, Some(192));
    }

    #[test]
    fn overlapping_offsets_fail() {
        let g = static_graph();
        let r = run_rdp(&g).unwrap();
        let exec = plan_exec(&g, &r, &ExecConfig::default());
        let env = ConcreteEnv::default();
        let (_, mut mem) = runtime_mem_plan(&g, &env, &exec, Strategy::FromPeak, 1).unwrap();
        for p in &mut mem.tensors {
            p.offset = 0;
        }
        let rep = check_plan(&g, &r, &env, &exec, &mem).unwrap();
        assert!(!rep.ok);
        assert!(rep.violations.iter().any(|v| v.check == CheckKind::NoOverlap));
    }

    #[test]
    fn bad_order_is_reported() {
        let g = static_graph();
        let r = run_rdp(&g).unwrap();
        let mut exec = plan_exec(&g, &r, &ExecConfig::default());
        exec.global_order.reverse();
        let env = ConcreteEnv::default();
        let mem = plan(&[], Strategy::FromPeak, 1).unwrap();
        let rep = check_plan(&g, &r, &env, &exec, &mem).unwrap();
        assert_eq!(rep.violations[0].check, CheckKind::OrderValid);
    }
}
