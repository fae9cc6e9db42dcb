//! Summary statistics for one graph: fusion reduction, subgraph categories,
//! and arena sizes per memory strategy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::check::{runtime_mem_plan, sized_lifetimes, CheckError, CheckReport};
use crate::exec::{Category, ExecPlan};
use crate::fusion::{fused_steps, FusionPlan};
use crate::graph::Graph;
use crate::interp::{interpret_order, interpret_steps, ConcreteEnv};
use crate::mem::{plan_optimal, Strategy};
use crate::sym::Env;

/// Largest tensor count the report hands to the exact oracle.
pub const REPORT_ORACLE_CAP: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub layers_before: usize,
    pub layers_after: usize,
    pub layer_reduction_pct: f64,
    pub groups: usize,
    pub multi_version_groups: usize,
    pub internal_tensors: usize,
    pub bytes_eliminated: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecSummary {
    pub subgraphs: usize,
    /// Percentage of subgraphs per category.
    pub category_shares: BTreeMap<Category, f64>,
    pub methods: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemRow {
    pub env: Env,
    pub tensors: usize,
    pub lower_bound: u64,
    pub from_peak: u64,
    pub best_fit: u64,
    pub oracle: Option<u64>,
    /// Bytes of intermediate results without and with fusion.
    pub ir_bytes_unfused: u64,
    pub ir_bytes_fused: u64,
    pub ir_reduction_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub graph: String,
    pub fusion: FusionSummary,
    pub exec: ExecSummary,
    pub alignment: u64,
    pub memory: Vec<MemRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckReport>,
}

fn pct(part: f64, whole: f64) -> f64 {
    if whole == 0.0 {
        0.0
    } else {
        (part / whole * 10000.0).round() / 100.0
    }
}

fn fusion_summary(f: &FusionPlan) -> FusionSummary {
    let s = &f.stats;
    FusionSummary {
        layers_before: s.layers_before,
        layers_after: s.layers_after,
        layer_reduction_pct: pct((s.layers_before - s.layers_after) as f64, s.layers_before as f64),
        groups: f.groups.len(),
        multi_version_groups: f.groups.iter().filter(|g| g.versions > 1).count(),
        internal_tensors: s.internal_tensors.len(),
        bytes_eliminated: s.bytes_eliminated.to_string(),
    }
}

fn exec_summary(e: &ExecPlan) -> ExecSummary {
    let n = e.subgraphs.len();
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    let mut methods = BTreeMap::new();
    for s in &e.subgraphs {
        *counts.entry(s.category).or_default() += 1;
        *methods.entry(format!("{:?}", s.method)).or_default() += 1;
    }
    ExecSummary {
        subgraphs: n,
        category_shares: counts.into_iter().map(|(c, k)| (c, pct(k as f64, n as f64))).collect(),
        methods,
    }
}

fn mem_row(
    g: &Graph,
    fusion: &FusionPlan,
    exec: &ExecPlan,
    env: &ConcreteEnv,
    align: u64,
) -> Result<MemRow, CheckError> {
    let (trace, fp) = runtime_mem_plan(g, env, exec, Strategy::FromPeak, align)?;
    let (_, bf) = runtime_mem_plan(g, env, exec, Strategy::BestFit, align)?;
    let lts = sized_lifetimes(&trace);
    let oracle = plan_optimal(&lts, align, REPORT_ORACLE_CAP).ok().map(|p| p.arena);
    let order: Vec<usize> = exec.global_order.iter().filter_map(|id| g.node_index(id)).collect();
    let unfused: u64 = interpret_order(g, env, &order)?.lifetimes.iter().map(|l| l.size).sum();
    let fused: u64 = interpret_steps(g, env, &fused_steps(g, fusion))?
        .lifetimes
        .iter()
        .map(|l| l.size)
        .sum();
    Ok(MemRow {
        env: env.symbols.clone(),
        tensors: lts.len(),
        lower_bound: fp.lower_bound,
        from_peak: fp.arena,
        best_fit: bf.arena,
        oracle,
        ir_bytes_unfused: unfused,
        ir_bytes_fused: fused,
        ir_reduction_pct: pct(unfused.saturating_sub(fused) as f64, unfused as f64),
    })
}

pub fn build_report(
    g: &Graph,
    fusion: &FusionPlan,
    exec: &ExecPlan,
    envs: &[ConcreteEnv],
    align: u64,
) -> Result<Report, CheckError> {
    Ok(Report {
        graph: g.def().name.clone(),
        fusion: fusion_summary(fusion),
        exec: exec_summary(exec),
        alignment: align,
        memory: envs
            .iter()
            .map(|e| mem_row(g, fusion, exec, e, align))
            .collect::<Result<_, _>>()?,
        check: None,
    })
}

fn render_env(env: &Env) -> String {
    if env.is_empty() {
        return "-".into();
    }
    env.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

/// Plain-text table of a report.
pub fn render_table(r: &Report) -> String {
    let mut s = String::new();
    let f = &r.fusion;
    let _ = writeln!(s, "graph: {}", r.graph);
    let _ = writeln!(
        s,
        "fusion: {} -> {} layers ({:.2}% fewer), {} groups ({} multi-version), {} internal tensors, {} bytes eliminated",
        f.layers_before, f.layers_after, f.layer_reduction_pct, f.groups, f.multi_version_groups, f.internal_tensors, f.bytes_eliminated
    );
    let _ = writeln!(s, "subgraphs: {}", r.exec.subgraphs);
    for (c, p) in &r.exec.category_shares {
        let _ = writeln!(s, "  {c:?}: {p:.2}%");
    }
    for (m, k) in &r.exec.methods {
        let _ = writeln!(s, "  method {m}: {k}");
    }
    let _ = writeln!(s, "memory (alignment {}):", r.alignment);
    let _ = writeln!(
        s,
        "  {:<24} {:>7} {:>10} {:>10} {:>10} {:>10} {:>12} {:>12}",
        "env", "tensors", "lower", "from-peak", "best-fit", "oracle", "ir-unfused", "ir-fused"
    );
    for m in &r.memory {
        let oracle = m.oracle.map_or("-".to_string(), |o| o.to_string());
        let _ = writeln!(
            s,
            "  {:<24} {:>7} {:>10} {:>10} {:>10} {:>10} {:>12} {:>12}",
            render_env(&m.env),
            m.tensors,
            m.lower_bound,
            m.from_peak,
            m.best_fit,
            oracle,
            m.ir_bytes_unfused,
            m.ir_bytes_fused
        );
    }
    if let Some(c) = &r.check {
        let _ = writeln!(s, "check: {}", if c.ok { "ok" } else { "FAILED" });
        for v in &c.violations {
            let _ = writeln!(s, "  {:?}: {}", v.check, v.detail);
        }
    }
    s
}
