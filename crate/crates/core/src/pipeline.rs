//! The full chain from a graph to checked plans, plus artifact helpers.

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::check::{check_plan, runtime_mem_plan, CheckError, CheckReport};
use crate::exec::{plan_exec, ExecConfig, ExecPlan};
use crate::fusion::{build_plan, FusionPlan, DEFAULT_VERSION_CAP};
use crate::graph::Graph;
use crate::interp::ConcreteEnv;
use crate::mem::{MemPlan, Strategy, DEFAULT_ALIGNMENT};
use crate::rdp::{run_rdp_with, RdpConfig, RdpError, RdpResult};
use crate::report::{build_report, Report};
use crate::sym::Env;

pub const SCHEMA: &str = "dyndag/1";

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub rdp: RdpConfig,
    pub exec: ExecConfig,
    pub version_cap: u64,
    pub strategy: Strategy,
    pub alignment: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rdp: RdpConfig::default(),
            exec: ExecConfig::default(),
            version_cap: DEFAULT_VERSION_CAP,
            strategy: Strategy::FromPeak,
            alignment: DEFAULT_ALIGNMENT,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("analysis: {0}")]
    Analysis(#[from] RdpError),
    #[error("check: {0}")]
    Check(#[from] CheckError),
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub analysis: RdpResult,
    pub fusion: FusionPlan,
    pub exec: ExecPlan,
    pub mem: MemPlan,
    pub check: CheckReport,
    pub report: Report,
}

pub fn run_pipeline(g: &Graph, env: &ConcreteEnv, cfg: &PipelineConfig) -> Result<Artifacts, PipelineError> {
    let analysis = run_rdp_with(g, g.topo_order(), &cfg.rdp)?;
    let fusion = build_plan(g, &analysis, cfg.version_cap);
    let exec = plan_exec(g, &analysis, &cfg.exec);
    let (_, mem) = runtime_mem_plan(g, env, &exec, cfg.strategy, cfg.alignment)?;
    let check = check_plan(g, &analysis, env, &exec, &mem)?;
    let mut report = build_report(g, &fusion, &exec, std::slice::from_ref(env), cfg.alignment)?;
    report.check = Some(check.clone());
    Ok(Artifacts {
        analysis,
        fusion,
        exec,
        mem,
        check,
        report,
    })
}

/// Serialize `v` as a JSON object tagged with the artifact schema.
pub fn versioned<T: Serialize>(v: &T) -> Value {
    let inner = serde_json::to_value(v).expect("artifacts serialize");
    let mut obj = serde_json::Map::new();
    obj.insert("schema".into(), Value::String(SCHEMA.into()));
    match inner {
        Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("data".into(), other);
        }
    }
    Value::Object(obj)
}

/// Parse `A=1,B=2` bindings. An empty string yields no bindings.
pub fn parse_bindings(text: &str) -> Result<Env, String> {
    let mut env = Env::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("binding `{part}` is not NAME=VALUE"))?;
        let v: i64 = v.trim().parse().map_err(|_| format!("binding `{part}` has a non-integer value"))?;
        env.insert(k.trim().to_string(), v);
    }
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    #[test]
    fn bindings_parse() {
        let e = parse_bindings("N=64, M=3").unwrap();
        assert_eq!(e["N"], 64);
        assert_eq!(e["M"], 3);
        assert!(parse_bindings("").unwrap().is_empty());
        assert!(parse_bindings("N").is_err());
        assert!(parse_bindings("N=x").is_err());
    }

    #[test]
    fn versioned_objects_carry_schema() {
        let v = versioned(&serde_json::json!({"a": 1}));
        assert_eq!(v["schema"], SCHEMA);
        assert_eq!(v["a"], 1);
    }

    #[test]
    fn conv_block_pipeline_checks() {
        let g = Graph::from_json(bundled::get("conv_block").unwrap()).unwrap();
        let env = ConcreteEnv::with_symbols(parse_bindings("N=2,H=8,W=8").unwrap(), 1);
        let a = run_pipeline(&g, &env, &PipelineConfig::default()).unwrap();
        assert!(a.check.ok, "{:?}", a.check.violations);
        assert_eq!(a.report.fusion.layers_before, 6);
        assert_eq!(a.report.fusion.layers_after, 3);
        assert_eq!(a.report.fusion.layer_reduction_pct, 50.0);
        let row = &a.report.memory[0];
        assert!(row.ir_bytes_fused < row.ir_bytes_unfused);
    }
}
