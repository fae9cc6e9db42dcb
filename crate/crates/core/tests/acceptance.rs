//! Acceptance suite. Runs without the libtest harness so that the per-criterion
//! verdicts appear in plain `cargo test` output.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use dyndag::bundled::GRAPHS;
use dyndag::check::soundness_violations;
use dyndag::exec::{order_exhaustive, order_heuristic, partition};
use dyndag::fusion::{build_plan, fused_steps, fusibility, DEFAULT_VERSION_CAP};
use dyndag::graph::{random_topo_order, Graph};
use dyndag::interp::{interpret, interpret_steps};
use dyndag::mem::{plan_best_fit, plan_from_peak, plan_optimal, DEFAULT_ORACLE_CAP};
use dyndag::rdp::{run_rdp, run_rdp_with, RdpConfig};
use dyndag::shape::ShapeInfo;
use dyndag::sym::DimValue;
use dyndag::synth::random_lifetimes;
use rand::Rng;
use serde_json::Value;

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    ensure(t.elapsed() < limit, || format!("took {:?}, limit {limit:?}", t.elapsed()))
}

fn bundled() -> Vec<(&'static str, Graph)> {
    GRAPHS.iter().map(|(n, s)| (*n, Graph::from_json(s).unwrap())).collect()
}

fn random_dim<R: Rng>(rng: &mut R) -> DimValue {
    const EXPRS: [&str; 6] = ["N", "M", "N+1", "2*N", "N*M", "N-M"];
    match rng.gen_range(0..10) {
        0 => DimValue::Undef,
        1 => DimValue::Nac,
        2..=5 => DimValue::Known(rng.gen_range(0..5)),
        _ => DimValue::parse(EXPRS[rng.gen_range(0..EXPRS.len())]).unwrap(),
    }
}

fn c1_lattice() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(1);
    let mut checked = 0;
    for _ in 0..20_000 {
        let (a, b, c) = (random_dim(&mut rng), random_dim(&mut rng), random_dim(&mut rng));
        ensure(a.meet(&b) == b.meet(&a), || format!("commutativity: {a} {b}"))?;
        ensure(a.meet(&b).meet(&c) == a.meet(&b.meet(&c)), || format!("associativity: {a} {b} {c}"))?;
        ensure(a.meet(&a) == a, || format!("idempotence: {a}"))?;
        ensure(DimValue::Undef.meet(&a) == a, || format!("top identity: {a}"))?;
        ensure(DimValue::Nac.meet(&a) == DimValue::Nac, || format!("bottom absorption: {a}"))?;
        checked += 1;
    }
    within(t, Duration::from_secs(5))?;
    Ok(format!("{checked} triples, 0 violations, {:?}", t.elapsed()))
}

fn c2_convergence() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(2);
    let mut graphs: Vec<(String, Graph)> = bundled().into_iter().map(|(n, g)| (n.to_string(), g)).collect();
    for i in 0..100 {
        graphs.push((format!("random{i}"), random_graph(&mut rng, 200)));
    }
    let mut max_nodes = 0;
    for (name, g) in &graphs {
        max_nodes = max_nodes.max(g.nodes.len());
        let base = run_rdp(g).map_err(|e| format!("{name}: {e}"))?;
        let bound = RdpConfig::default().bound_factor * g.nodes.len().max(1);
        ensure(base.sweeps <= bound, || format!("{name}: {} sweeps", base.sweeps))?;
        let want = base.canonical_maps();
        for _ in 0..10 {
            let order = random_topo_order(g, &mut rng);
            let r = run_rdp_with(g, &order, &RdpConfig::default()).map_err(|e| format!("{name}: {e}"))?;
            ensure(r.canonical_maps() == want, || format!("{name}: maps depend on sweep order"))?;
        }
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("{} graphs (largest {max_nodes} nodes) x 10 orders, {:?}", graphs.len(), t.elapsed()))
}

fn c3_soundness() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(3);
    let mut tensors = 0;
    for (name, g) in bundled() {
        let r = run_rdp(&g).unwrap();
        let mut known: BTreeMap<String, Vec<i64>> = BTreeMap::new();
        for i in 0..20 {
            let env = random_env(&g, &mut rng, i);
            let trace = interpret(&g, &env).map_err(|e| format!("{name}: {e}"))?;
            let bad = soundness_violations(&g, &r, &env, &trace);
            ensure(bad.is_empty(), || format!("{name}: {bad:?}"))?;
            for (tn, c) in &trace.tensors {
                let s = r.shape(tn);
                if s.has_nac() {
                    continue;
                }
                ensure(!s.has_undef(), || format!("{name}: `{tn}` left unresolved: {s}"))?;
                tensors += 1;
                if let ShapeInfo::Ranked(_) = s {
                    if s.as_known().is_some() {
                        let prev = known.entry(tn.clone()).or_insert_with(|| c.shape.clone());
                        ensure(*prev == c.shape, || format!("{name}: known `{tn}` varies"))?;
                    }
                }
            }
        }
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("{tensors} tensor checks, 0 mismatches, {:?}", t.elapsed()))
}

fn c4_broadcast_pair() -> Outcome {
    let t = Instant::now();
    let g = bundled().into_iter().find(|(n, _)| *n == "broadcast_pair").unwrap().1;
    let r = run_rdp(&g).unwrap();
    let (sig, add) = (g.node_index("sigmoid").unwrap(), g.node_index("add").unwrap());
    let blind = fusibility(&g, &r.rank_only(&g), sig, add);
    ensure(blind.versions() == Some(8), || format!("without facts: {blind:?}"))?;
    let dims: Vec<String> = r.shape("a").dims().unwrap().iter().map(|d| d.to_string()).collect();
    ensure(dims == ["I", "1", "1"], || format!("derived shape {dims:?}"))?;
    let with = fusibility(&g, &r, sig, add);
    ensure(with.versions() == Some(1), || format!("with facts: {with:?}"))?;
    within(t, Duration::from_secs(1))?;
    Ok(format!("8 versions without facts, 1 with I'=I J'=1 K'=1, {:?}", t.elapsed()))
}

fn c5_fusion_preserves_shapes() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(5);
    let mut compared = 0;
    for (name, g) in bundled() {
        let r = run_rdp(&g).unwrap();
        let plan = build_plan(&g, &r, DEFAULT_VERSION_CAP);
        let steps = fused_steps(&g, &plan);
        for i in 0..10 {
            let env = random_env(&g, &mut rng, i);
            let plain = interpret(&g, &env).map_err(|e| format!("{name}: {e}"))?;
            let fused = interpret_steps(&g, &env, &steps).map_err(|e| format!("{name} fused: {e}"))?;
            for o in &g.outputs {
                ensure(plain.tensors.get(o) == fused.tensors.get(o), || format!("{name}: output `{o}` differs"))?;
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} outputs compared, 0 mismatches, {:?}", t.elapsed()))
}

fn c6_exec_optimality() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(6);
    let mut close = 0;
    let mut worst: f64 = 1.0;
    for i in 0..200 {
        let (g, sizes) = random_sized_dag(&mut rng, 8);
        let all: Vec<usize> = (0..g.nodes.len()).collect();
        let want = naive_min_peak(&g, &sizes);
        let got = order_exhaustive(&g, &all, &sizes, 8).map_err(|e| e.to_string())?;
        ensure(got.peak == want, || format!("instance {i}: exhaustive {} vs enumeration {want}", got.peak))?;
        ensure(naive_peak(&g, &got.order, &sizes) == want, || format!("instance {i}: order peak mismatch"))?;
        let h = order_heuristic(&g, &all, |t| sizes.get(t).copied()).map_err(|e| e.to_string())?;
        let ratio = h.peak as f64 / want as f64;
        worst = worst.max(ratio);
        if ratio <= 1.25 {
            close += 1;
        }
    }
    ensure(close >= 190, || format!("heuristic within 1.25x on {close}/200"))?;
    within(t, Duration::from_secs(120))?;
    Ok(format!("200/200 exact; heuristic within 1.25x on {close}/200 (worst {worst:.3}), {:?}", t.elapsed()))
}

fn c7_partition() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(7);
    for i in 0..200 {
        let k = rng.gen_range(1..=6);
        let stages: Vec<(usize, Edo)> = (0..k)
            .map(|_| (rng.gen_range(0..4), if rng.gen_bool(0.5) { Edo::NonZero } else { Edo::TopK }))
            .collect();
        let g = edo_chain(&stages);
        let r = run_rdp(&g).map_err(|e| format!("chain {i}: {e}"))?;
        ensure(r.nac_nodes.len() == k, || format!("chain {i}: {} nac producers, want {k}", r.nac_nodes.len()))?;
        let parts = partition(&g, &r);
        ensure(parts.len() == k + 1, || format!("chain {i}: {} subgraphs for k={k}", parts.len()))?;
        for p in &parts {
            let members: BTreeSet<usize> = p.iter().copied().collect();
            for v in p {
                for tn in &g.nodes[*v].outputs {
                    let cons = g.consumers(tn);
                    let interior = !cons.is_empty() && cons.iter().all(|(c, _)| members.contains(c));
                    ensure(!(interior && r.shape(tn).has_nac()), || format!("chain {i}: interior `{tn}` is nac"))?;
                }
            }
        }
    }
    Ok(format!("200 chains (k in 1..=6), all k+1 subgraphs, {:?}", t.elapsed()))
}

fn c8_mem_validity() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(8);
    let mut unimodal_count = 0;
    let mut misses = Vec::new();
    for i in 0..500 {
        let lts = random_lifetimes(&mut rng, DEFAULT_ORACLE_CAP);
        let lb = concurrent_lower_bound(&lts);
        let plans = [
            plan_from_peak(&lts, 1).unwrap(),
            plan_best_fit(&lts, 1).unwrap(),
            plan_optimal(&lts, 1, DEFAULT_ORACLE_CAP).unwrap(),
        ];
        for p in &plans {
            let bad = placement_problems(&lts, p);
            ensure(bad.is_empty(), || format!("instance {i} {:?}: {bad:?}", p.strategy))?;
            ensure(p.arena >= lb, || format!("instance {i} {:?}: arena {} < bound {lb}", p.strategy, p.arena))?;
        }
        if unimodal(&lts) {
            unimodal_count += 1;
            if plans[0].arena != lb {
                misses.push(format!("#{i} arena {} bound {lb}", plans[0].arena));
            }
        }
    }
    ensure(misses.is_empty(), || format!("from-peak above bound on unimodal {misses:?}"))?;
    Ok(format!("500 instances overlap-free; from-peak = bound on {unimodal_count}/{unimodal_count} unimodal, {:?}", t.elapsed()))
}

fn c9_mem_quality() -> Outcome {
    let t = Instant::now();
    let mut rng = rng(9);
    let (mut fp, mut bf) = (0.0, 0.0);
    for _ in 0..500 {
        let lts = random_lifetimes(&mut rng, 10);
        let o = plan_optimal(&lts, 1, 10).unwrap().arena as f64;
        fp += plan_from_peak(&lts, 1).unwrap().arena as f64 / o;
        bf += plan_best_fit(&lts, 1).unwrap().arena as f64 / o;
    }
    let (fp, bf) = (fp / 500.0, bf / 500.0);
    ensure(fp <= bf, || format!("from-peak {fp:.4} worse than best-fit {bf:.4}"))?;
    ensure(fp <= 1.10, || format!("from-peak {fp:.4} above 1.10x"))?;
    within(t, Duration::from_secs(120))?;
    Ok(format!("mean from-peak/oracle {fp:.4}, best-fit/oracle {bf:.4}, {:?}", t.elapsed()))
}

fn c10_pipeline() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = rng(10);
    let mut runs = 0;
    for (name, text) in GRAPHS {
        let g = Graph::from_json(text).unwrap();
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, text).map_err(|e| e.to_string())?;
        for i in 0..5 {
            let env: Vec<String> = g.symbols.iter().map(|s| format!("{s}={}", rng.gen_range(2..=16))).collect();
            let out = dir.path().join(format!("{name}-{i}"));
            let res = Command::new(env!("CARGO_BIN_EXE_dyndag"))
                .arg("pipeline")
                .arg(&path)
                .arg("--env")
                .arg(env.join(","))
                .arg("--seed")
                .arg(i.to_string())
                .arg("--out-dir")
                .arg(&out)
                .env_remove("DYNDAG_SEED")
                .output()
                .map_err(|e| e.to_string())?;
            ensure(res.status.success(), || {
                format!("{name} {env:?}: exit {:?}: {}", res.status.code(), String::from_utf8_lossy(&res.stderr))
            })?;
            let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
            ensure(report["check"]["ok"] == Value::Bool(true), || format!("{name}: {}", report["check"]))?;
            runs += 1;
        }
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("{runs} pipeline runs, all checks clean, {:?}", t.elapsed()))
}

fn c11_catalog() -> Outcome {
    let expected: [(&str, &[&str]); 4] = [
        ("ISDO", &["Shape", "ConstantOfShape", "EyeLike"]),
        (
            "ISDOS",
            &[
                "Add", "Sub", "Mul", "Div", "AveragePool", "Cast", "Concat", "Conv", "Gather", "MatMul", "MaxPool",
                "ReduceSum", "ReduceMean", "Relu", "Round", "Sigmoid", "Softmax",
            ],
        ),
        ("ISVDOS", &["Expand", "Range", "Reshape", "Resize", "Slice", "TopK", "Upsample"]),
        ("EDO", &["If", "Loop", "NonMaxSuppression", "NonZero", "Switch", "Combine"]),
    ];
    let out = Command::new(env!("CARGO_BIN_EXE_dyndag"))
        .args(["ops", "--json"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || "ops --json failed".into())?;
    let doc: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let classes: BTreeMap<&str, &str> = doc["ops"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| (o["name"].as_str().unwrap(), o["class"].as_str().unwrap()))
        .collect();
    let mut diffs = Vec::new();
    let mut count = 0;
    for (class, ops) in expected {
        for op in ops {
            count += 1;
            match classes.get(op) {
                Some(c) if *c == class => {}
                other => diffs.push(format!("{op}: {other:?} want {class}")),
            }
        }
    }
    ensure(diffs.is_empty(), || format!("{diffs:?}"))?;
    Ok(format!("{count} operators match, 0 diffs"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("lattice laws", c1_lattice),
        ("analysis convergence and order independence", c2_convergence),
        ("analysis soundness", c3_soundness),
        ("broadcast pair versions", c4_broadcast_pair),
        ("fusion preserves shapes", c5_fusion_preserves_shapes),
        ("execution-order optimality", c6_exec_optimality),
        ("partitioning", c7_partition),
        ("memory-plan validity", c8_mem_validity),
        ("memory-plan quality", c9_mem_quality),
        ("end-to-end pipeline", c10_pipeline),
        ("classification conformance", c11_catalog),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match res {
            Ok(msg) => println!("criterion {:>2} PASS {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
