//! Graph partitioning at dynamic boundaries and peak-memory-minimising
//! operator order per subgraph.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use petgraph::algo::condensation;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::tensor_bytes;
use crate::graph::{switch_regions, Graph};
use crate::rdp::{is_dynamic_boundary, RdpResult};
use crate::sym::{DimValue, Env, Sign, SymExpr};

pub const DEFAULT_EXHAUSTIVE_CAP: usize = 12;
/// Every symbol takes this value when symbolic comparison is indeterminate.
pub const PROBE_VALUE: i64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    AllKnown,
    MixedConst,
    NacBounded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exhaustive,
    SymbolicCompare,
    Heuristic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Peak {
    Known(u64),
    Symbolic(SymExpr),
    Deferred,
}

impl Peak {
    pub fn evaluate(&self, env: &Env) -> Option<u64> {
        match self {
            Peak::Known(v) => Some(*v),
            Peak::Symbolic(e) => e.evaluate(env).ok().map(|v| v.max(0) as u64),
            Peak::Deferred => None,
        }
    }
}

impl fmt::Display for Peak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Peak::Known(v) => write!(f, "{v}"),
            Peak::Symbolic(e) => write!(f, "{e}"),
            Peak::Deferred => f.write_str("deferred"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphPlan {
    pub id: usize,
    pub nodes: Vec<String>,
    pub category: Category,
    pub method: Method,
    pub order: Vec<String>,
    pub peak: Peak,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecPlan {
    pub subgraphs: Vec<SubgraphPlan>,
    /// Tensors crossing from one subgraph into another.
    pub boundary_tensors: Vec<String>,
    pub global_order: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("{count} nodes exceed the exhaustive search cap of {cap}")]
    CapExceeded { count: usize, cap: usize },
    #[error("size of tensor `{0}` is not known")]
    MissingSize(String),
}

/// Cost domain for order search.
pub trait Cost: Clone + fmt::Debug {
    fn zero() -> Self;
    fn plus(&self, other: &Self) -> Self;
    /// Total order used by the search; sets `guessed` when the answer is
    /// not provable.
    fn compare(&self, other: &Self, guessed: &mut bool) -> Ordering;
}

impl Cost for u64 {
    fn zero() -> Self {
        0
    }
    fn plus(&self, other: &Self) -> Self {
        self.saturating_add(*other)
    }
    fn compare(&self, other: &Self, _: &mut bool) -> Ordering {
        self.cmp(other)
    }
}

/// A symbolic size together with its value at the probe assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymCost {
    pub expr: SymExpr,
    pub probe: i64,
}

impl SymCost {
    pub fn new(expr: SymExpr) -> Self {
        let env: Env = expr.symbols().into_iter().map(|s| (s, PROBE_VALUE)).collect();
        let probe = expr.evaluate(&env).unwrap_or(i64::MAX);
        SymCost { expr, probe }
    }
}

impl Cost for SymCost {
    fn zero() -> Self {
        SymCost {
            expr: SymExpr::zero(),
            probe: 0,
        }
    }
    fn plus(&self, other: &Self) -> Self {
        match self.expr.add(&other.expr) {
            Ok(expr) => SymCost {
                expr,
                probe: self.probe.saturating_add(other.probe),
            },
            Err(_) => SymCost {
                expr: self.expr.clone(),
                probe: i64::MAX,
            },
        }
    }
    fn compare(&self, other: &Self, guessed: &mut bool) -> Ordering {
        let Ok(diff) = self.expr.sub(&other.expr) else {
            *guessed = true;
            return self.probe.cmp(&other.probe);
        };
        if diff.is_zero() {
            return Ordering::Equal;
        }
        match diff.compare_sign() {
            Sign::AlwaysNonnegative => Ordering::Greater,
            Sign::AlwaysNonpositive => Ordering::Less,
            Sign::Indeterminate => {
                *guessed = true;
                self.probe.cmp(&other.probe)
            }
        }
    }
}

fn cost_max<C: Cost>(a: &C, b: &C, guessed: &mut bool) -> C {
    if a.compare(b, guessed) == Ordering::Less {
        b.clone()
    } else {
        a.clone()
    }
}

struct ScopeTensor {
    producer: usize,
    consumers: u64,
    /// Graph output or consumed outside the scope.
    escapes: bool,
}

/// Members of one subgraph with their produced tensors, as bit sets.
struct Scope {
    members: Vec<usize>,
    preds: Vec<u64>,
    tensors: Vec<ScopeTensor>,
    names: Vec<String>,
}

impl Scope {
    fn new(g: &Graph, members: &[usize]) -> Self {
        let mut members = members.to_vec();
        members.sort_by(|a, b| g.nodes[*a].id.cmp(&g.nodes[*b].id));
        let bit: HashMap<usize, usize> = members.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let preds = members
            .iter()
            .map(|n| {
                g.predecessors(*n)
                    .iter()
                    .filter_map(|p| bit.get(p))
                    .fold(0u64, |m, b| m | (1 << b))
            })
            .collect();
        let mut tensors = Vec::new();
        let mut names = Vec::new();
        for (i, n) in members.iter().enumerate() {
            for t in &g.nodes[*n].outputs {
                let mut consumers = 0u64;
                let mut escapes = g.is_output(t);
                for (c, _) in g.consumers(t) {
                    match bit.get(c) {
                        Some(b) => consumers |= 1 << b,
                        None => escapes = true,
                    }
                }
                tensors.push(ScopeTensor {
                    producer: i,
                    consumers,
                    escapes,
                });
                names.push(t.clone());
            }
        }
        Scope {
            members,
            preds,
            tensors,
            names,
        }
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn ready(&self, done: u64, v: usize) -> bool {
        done & (1 << v) == 0 && self.preds[v] & !done == 0
    }

    /// Live bytes while `v` runs after the members in `done`.
    fn step_cost<C: Cost>(&self, done: u64, v: usize, sizes: &[C]) -> C {
        let after = done | (1 << v);
        let mut total = C::zero();
        for (t, size) in self.tensors.iter().zip(sizes) {
            if after & (1 << t.producer) == 0 {
                continue;
            }
            if t.producer == v || t.escapes || t.consumers & !done != 0 {
                total = total.plus(size);
            }
        }
        total
    }

    /// Live bytes once `v` has finished.
    fn after_cost<C: Cost>(&self, done: u64, v: usize, sizes: &[C]) -> C {
        let after = done | (1 << v);
        let mut total = C::zero();
        for (t, size) in self.tensors.iter().zip(sizes) {
            if after & (1 << t.producer) != 0 && (t.escapes || t.consumers & !after != 0) {
                total = total.plus(size);
            }
        }
        total
    }

    fn order_ids(&self, order: &[usize]) -> Vec<usize> {
        order.iter().map(|i| self.members[*i]).collect()
    }

    fn sizes<C: Cost>(&self, lookup: impl Fn(&str) -> Option<C>) -> Result<Vec<C>, ExecError> {
        self.names
            .iter()
            .map(|t| lookup(t).ok_or_else(|| ExecError::MissingSize(t.clone())))
            .collect()
    }

    fn peak<C: Cost>(&self, order: &[usize], sizes: &[C], guessed: &mut bool) -> C {
        let mut done = 0u64;
        let mut peak = C::zero();
        for &v in order {
            let c = self.step_cost(done, v, sizes);
            peak = cost_max(&peak, &c, guessed);
            done |= 1 << v;
        }
        peak
    }

    /// Minimal-peak order by memoised search over executed sets. Members are
    /// indexed in id order, so picking the lowest eligible index at each
    /// step yields the lexicographically smallest optimal sequence.
    fn search<C: Cost>(&self, sizes: &[C], guessed: &mut bool) -> (Vec<usize>, C) {
        let full = if self.len() == 64 { u64::MAX } else { (1u64 << self.len()) - 1 };
        let mut memo: HashMap<u64, C> = HashMap::new();
        fn best<C: Cost>(
            s: &Scope,
            done: u64,
            full: u64,
            sizes: &[C],
            memo: &mut HashMap<u64, C>,
            guessed: &mut bool,
        ) -> C {
            if done == full {
                return C::zero();
            }
            if let Some(c) = memo.get(&done) {
                return c.clone();
            }
            let mut out: Option<C> = None;
            for v in 0..s.len() {
                if !s.ready(done, v) {
                    continue;
                }
                let here = s.step_cost(done, v, sizes);
                let rest = best(s, done | (1 << v), full, sizes, memo, guessed);
                let c = cost_max(&here, &rest, guessed);
                if out.as_ref().is_none_or(|o| c.compare(o, guessed) == Ordering::Less) {
                    out = Some(c);
                }
            }
            let out = out.expect("a ready member exists in a DAG");
            memo.insert(done, out.clone());
            out
        }
        let total = best(self, 0, full, sizes, &mut memo, guessed);
        let mut order = Vec::with_capacity(self.len());
        let mut done = 0u64;
        while done != full {
            let target = best(self, done, full, sizes, &mut memo, guessed);
            let v = (0..self.len())
                .filter(|v| self.ready(done, *v))
                .find(|v| {
                    let here = self.step_cost(done, *v, sizes);
                    let rest = best(self, done | (1 << v), full, sizes, &mut memo, guessed);
                    cost_max(&here, &rest, guessed).compare(&target, guessed) == Ordering::Equal
                })
                .expect("optimal successor exists");
            order.push(v);
            done |= 1 << v;
        }
        (order, total)
    }

    /// Greedy: run the ready member minimising `rule`'s primary key (live
    /// bytes after the step, or during it), breaking ties by the other key
    /// and then by id.
    fn greedy<C: Cost>(&self, sizes: &[C], rule: Greedy, guessed: &mut bool) -> Vec<usize> {
        let mut done = 0u64;
        let mut order = Vec::with_capacity(self.len());
        for _ in 0..self.len() {
            let mut pick: Option<(usize, C, C)> = None;
            for v in (0..self.len()).filter(|v| self.ready(done, *v)) {
                let after = self.after_cost(done, v, sizes);
                let during = self.step_cost(done, v, sizes);
                let (k1, k2) = match rule {
                    Greedy::After => (after, during),
                    Greedy::During => (during, after),
                };
                let better = match &pick {
                    None => true,
                    Some((_, a, b)) => match k1.compare(a, guessed) {
                        Ordering::Less => true,
                        Ordering::Equal => k2.compare(b, guessed) == Ordering::Less,
                        Ordering::Greater => false,
                    },
                };
                if better {
                    pick = Some((v, k1, k2));
                }
            }
            let (v, _, _) = pick.expect("a ready member exists in a DAG");
            order.push(v);
            done |= 1 << v;
        }
        order
    }

    fn valid(&self, order: &[usize]) -> bool {
        let mut done = 0u64;
        for &v in order {
            if !self.ready(done, v) {
                return false;
            }
            done |= 1 << v;
        }
        true
    }

    /// Move single members to other positions while that lowers the peak.
    fn improve<C: Cost>(&self, mut order: Vec<usize>, sizes: &[C], guessed: &mut bool) -> (Vec<usize>, C) {
        let mut best = self.peak(&order, sizes, guessed);
        for _ in 0..LOCAL_SEARCH_PASSES {
            let mut moved = false;
            for i in 0..order.len() {
                for j in 0..order.len() {
                    if i == j {
                        continue;
                    }
                    let mut cand = order.clone();
                    let v = cand.remove(i);
                    cand.insert(j, v);
                    if !self.valid(&cand) {
                        continue;
                    }
                    let p = self.peak(&cand, sizes, guessed);
                    if p.compare(&best, guessed) == Ordering::Less {
                        order = cand;
                        best = p;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
        (order, best)
    }

    /// Best of the greedy rules and the graph's own topological order, then
    /// refined by local search when the scope is small.
    fn heuristic<C: Cost>(&self, g: &Graph, sizes: &[C], guessed: &mut bool) -> (Vec<usize>, C) {
        let bit: HashMap<usize, usize> = self.members.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let topo: Vec<usize> = g.topo_order().iter().filter_map(|n| bit.get(n).copied()).collect();
        let candidates = [
            self.greedy(sizes, Greedy::After, guessed),
            self.greedy(sizes, Greedy::During, guessed),
            topo,
        ];
        let mut best: Option<(Vec<usize>, C)> = None;
        for c in candidates {
            let (o, p) = if self.len() <= LOCAL_SEARCH_LIMIT {
                self.improve(c, sizes, guessed)
            } else {
                let p = self.peak(&c, sizes, guessed);
                (c, p)
            };
            if best.as_ref().is_none_or(|(_, b)| p.compare(b, guessed) == Ordering::Less) {
                best = Some((o, p));
            }
        }
        best.expect("at least one candidate")
    }
}

#[derive(Clone, Copy)]
enum Greedy {
    After,
    During,
}

/// Scopes up to this many members get local search after the greedy pass.
pub const LOCAL_SEARCH_LIMIT: usize = 24;
const LOCAL_SEARCH_PASSES: usize = 4;

/// Outcome of ordering one set of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Ordered<C> {
    /// Node indices in execution order.
    pub order: Vec<usize>,
    pub peak: C,
    /// Some comparison fell back to the probe assignment.
    pub guessed: bool,
}

fn check_cap(members: &[usize], cap: usize) -> Result<(), ExecError> {
    if members.len() > cap.min(64) {
        return Err(ExecError::CapExceeded {
            count: members.len(),
            cap: cap.min(64),
        });
    }
    Ok(())
}

/// Minimal-peak order of `members` for concrete tensor sizes.
pub fn order_exhaustive(
    g: &Graph,
    members: &[usize],
    sizes: &BTreeMap<String, u64>,
    cap: usize,
) -> Result<Ordered<u64>, ExecError> {
    check_cap(members, cap)?;
    let s = Scope::new(g, members);
    let sz = s.sizes(|t| sizes.get(t).copied())?;
    let mut guessed = false;
    let (order, peak) = s.search(&sz, &mut guessed);
    Ok(Ordered {
        order: s.order_ids(&order),
        peak,
        guessed,
    })
}

/// The same search with symbolic sizes compared by sign analysis.
pub fn order_symbolic(
    g: &Graph,
    members: &[usize],
    sizes: &BTreeMap<String, SymExpr>,
    cap: usize,
) -> Result<Ordered<SymExpr>, ExecError> {
    check_cap(members, cap)?;
    let s = Scope::new(g, members);
    let sz = s.sizes(|t| sizes.get(t).cloned().map(SymCost::new))?;
    let mut guessed = false;
    let (order, peak) = s.search(&sz, &mut guessed);
    Ok(Ordered {
        order: s.order_ids(&order),
        peak: peak.expr,
        guessed,
    })
}

/// Heuristic order for any cost domain; members beyond 64 keep the graph's
/// topological order.
pub fn order_heuristic<C: Cost>(
    g: &Graph,
    members: &[usize],
    sizes: impl Fn(&str) -> Option<C>,
) -> Result<Ordered<C>, ExecError> {
    let mut guessed = false;
    if members.len() <= 64 {
        let s = Scope::new(g, members);
        let sz = s.sizes(&sizes)?;
        let (order, peak) = s.heuristic(g, &sz, &mut guessed);
        return Ok(Ordered {
            order: s.order_ids(&order),
            peak,
            guessed,
        });
    }
    let set: BTreeSet<usize> = members.iter().copied().collect();
    let topo: Vec<usize> = g.topo_order().iter().copied().filter(|n| set.contains(n)).collect();
    let order = topo;
    let peak = peak_of(g, members, &order, &sizes, &mut guessed)?;
    Ok(Ordered { order, peak, guessed })
}

/// Peak live bytes of `order` over `members`, under the scope liveness rule.
pub fn peak_of<C: Cost>(
    g: &Graph,
    members: &[usize],
    order: &[usize],
    sizes: impl Fn(&str) -> Option<C>,
    guessed: &mut bool,
) -> Result<C, ExecError> {
    let set: BTreeSet<usize> = members.iter().copied().collect();
    let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let last = order.len().saturating_sub(1);
    let mut live: Vec<C> = vec![C::zero(); order.len()];
    for (i, &n) in order.iter().enumerate() {
        for t in &g.nodes[n].outputs {
            let size = sizes(t).ok_or_else(|| ExecError::MissingSize(t.clone()))?;
            let mut death = i;
            for (c, _) in g.consumers(t) {
                death = death.max(if set.contains(c) { pos[c] } else { last });
            }
            if g.is_output(t) {
                death = last;
            }
            for slot in &mut live[i..=death] {
                *slot = slot.plus(&size);
            }
        }
    }
    Ok(live.iter().fold(C::zero(), |m, c| cost_max(&m, c, guessed)))
}

/// Maximal connected regions after cutting the out-edges of every node
/// with a `nac` output shape, with each Switch/Combine region kept whole
/// and mutually dependent regions merged. Returned in execution order.
pub fn partition(g: &Graph, r: &RdpResult) -> Vec<Vec<usize>> {
    let n = g.nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    fn union(p: &mut [usize], a: usize, b: usize) {
        let (ra, rb) = (find(p, a), find(p, b));
        if ra != rb {
            p[ra.max(rb)] = ra.min(rb);
        }
    }
    for v in 0..n {
        if is_dynamic_boundary(g, r, v) {
            continue;
        }
        for s in g.successors(v) {
            union(&mut parent, v, s);
        }
    }
    let (regions, _) = switch_regions(g);
    for reg in &regions {
        for m in reg.all_nodes() {
            union(&mut parent, reg.switch, m);
        }
    }

    let mut comp_of: BTreeMap<usize, usize> = BTreeMap::new();
    for v in 0..n {
        let root = find(&mut parent, v);
        let next = comp_of.len();
        comp_of.entry(root).or_insert(next);
    }
    let mut dg: DiGraph<Vec<usize>, ()> = DiGraph::new();
    let idx: Vec<_> = (0..comp_of.len()).map(|_| dg.add_node(Vec::new())).collect();
    for v in 0..n {
        let cv = comp_of[&find(&mut parent, v)];
        dg[idx[cv]].push(v);
        for s in g.successors(v) {
            let cs = comp_of[&find(&mut parent, s)];
            if cs != cv {
                dg.update_edge(idx[cv], idx[cs], ());
            }
        }
    }
    let cond = condensation(dg, true);
    let pos: Vec<usize> = {
        let mut pos = vec![0; n];
        for (i, v) in g.topo_order().iter().enumerate() {
            pos[*v] = i;
        }
        pos
    };
    // order components topologically, earliest member first among ready ones
    let mut indeg: Vec<usize> = cond
        .node_indices()
        .map(|c| cond.neighbors_directed(c, petgraph::Direction::Incoming).count())
        .collect();
    let key = |c: petgraph::graph::NodeIndex| cond[c].iter().flatten().map(|v| pos[*v]).min().unwrap_or(0);
    let mut ready: BTreeSet<(usize, usize)> = cond
        .node_indices()
        .filter(|c| indeg[c.index()] == 0)
        .map(|c| (key(c), c.index()))
        .collect();
    let mut out = Vec::new();
    while let Some((k, c)) = ready.iter().next().copied() {
        ready.remove(&(k, c));
        let ci = petgraph::graph::NodeIndex::new(c);
        let mut members: Vec<usize> = cond[ci].iter().flatten().copied().collect();
        members.sort_by_key(|v| pos[*v]);
        out.push(members);
        for s in cond.neighbors_directed(ci, petgraph::Direction::Outgoing) {
            indeg[s.index()] -= 1;
            if indeg[s.index()] == 0 {
                ready.insert((key(s), s.index()));
            }
        }
    }
    out
}

/// Category of a set of nodes from the sizes of the tensors they produce.
pub fn categorize(g: &Graph, r: &RdpResult, members: &[usize]) -> Category {
    let mut cat = Category::AllKnown;
    for &m in members {
        for t in &g.nodes[m].outputs {
            match tensor_bytes(g, r, t) {
                DimValue::Known(_) => {}
                DimValue::Sym(_) => cat = cat.max(Category::MixedConst),
                _ => return Category::NacBounded,
            }
        }
    }
    cat
}

#[derive(Clone, Debug)]
pub struct ExecConfig {
    pub exhaustive_cap: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            exhaustive_cap: DEFAULT_EXHAUSTIVE_CAP,
        }
    }
}

fn sym_size(g: &Graph, r: &RdpResult, t: &str) -> Option<SymExpr> {
    tensor_bytes(g, r, t).as_expr()
}

/// Nac sizes are unknown until run time and are treated as empty for
/// ordering.
fn probe_size(g: &Graph, r: &RdpResult, t: &str) -> Option<SymCost> {
    Some(SymCost::new(sym_size(g, r, t).unwrap_or_default()))
}

pub fn plan_subgraph(g: &Graph, r: &RdpResult, id: usize, members: &[usize], cfg: &ExecConfig) -> SubgraphPlan {
    let category = categorize(g, r, members);
    let ids = |v: &[usize]| v.iter().map(|n| g.nodes[*n].id.clone()).collect::<Vec<_>>();
    let mut nodes = ids(members);
    nodes.sort();
    let mut diagnostics = Vec::new();
    let done = |order: Vec<usize>, method, peak, diagnostics: Vec<String>| SubgraphPlan {
        id,
        nodes: nodes.clone(),
        category,
        method,
        order: ids(&order),
        peak,
        diagnostics,
    };
    match category {
        Category::AllKnown => {
            let sizes: BTreeMap<String, u64> = members
                .iter()
                .flat_map(|m| g.nodes[*m].outputs.iter())
                .filter_map(|t| tensor_bytes(g, r, t).as_known().map(|v| (t.clone(), v.max(0) as u64)))
                .collect();
            match order_exhaustive(g, members, &sizes, cfg.exhaustive_cap) {
                Ok(o) => return done(o.order, Method::Exhaustive, Peak::Known(o.peak), diagnostics),
                Err(e) => diagnostics.push(format!("{e}; using the greedy order")),
            }
        }
        Category::MixedConst => {
            let sizes: BTreeMap<String, SymExpr> = members
                .iter()
                .flat_map(|m| g.nodes[*m].outputs.iter())
                .filter_map(|t| sym_size(g, r, t).map(|e| (t.clone(), e)))
                .collect();
            match order_symbolic(g, members, &sizes, cfg.exhaustive_cap) {
                Ok(o) if !o.guessed => return done(o.order, Method::SymbolicCompare, Peak::Symbolic(o.peak), diagnostics),
                Ok(o) => {
                    diagnostics.push("indeterminate comparison settled at the probe assignment".into());
                    return done(o.order, Method::Heuristic, Peak::Symbolic(o.peak), diagnostics);
                }
                Err(e) => diagnostics.push(format!("{e}; using the greedy order")),
            }
        }
        Category::NacBounded => {}
    }
    let o = order_heuristic(g, members, |t| probe_size(g, r, t)).expect("probe sizes always exist");
    let peak = match category {
        Category::AllKnown => Peak::Known(o.peak.probe.max(0) as u64),
        Category::MixedConst => Peak::Symbolic(o.peak.expr),
        Category::NacBounded => Peak::Deferred,
    };
    done(o.order, Method::Heuristic, peak, diagnostics)
}

pub fn plan_exec(g: &Graph, r: &RdpResult, cfg: &ExecConfig) -> ExecPlan {
    let parts = partition(g, r);
    let mut sub_of = vec![0; g.nodes.len()];
    for (i, p) in parts.iter().enumerate() {
        for v in p {
            sub_of[*v] = i;
        }
    }
    let subgraphs: Vec<SubgraphPlan> = parts
        .iter()
        .enumerate()
        .map(|(i, p)| plan_subgraph(g, r, i, p, cfg))
        .collect();
    let mut boundary = BTreeSet::new();
    for (v, n) in g.nodes.iter().enumerate() {
        for t in &n.outputs {
            if g.consumers(t).iter().any(|(c, _)| sub_of[*c] != sub_of[v]) {
                boundary.insert(t.clone());
            }
        }
    }
    let global_order = subgraphs.iter().flat_map(|s| s.order.iter().cloned()).collect();
    ExecPlan {
        subgraphs,
        boundary_tensors: boundary.into_iter().collect(),
        global_order,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdp::run_rdp;
    use serde_json::json;

    fn graph(v: serde_json::Value) -> Graph {
        Graph::from_json(&v.to_string()).unwrap()
    }

    fn all(g: &Graph) -> Vec<usize> {
        (0..g.nodes.len()).collect()
    }

    fn ids(g: &Graph, o: &[usize]) -> Vec<String> {
        o.iter().map(|n| g.nodes[*n].id.clone()).collect()
    }

    fn sizes(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn branches() -> Graph {
        // x -> a1 -> a2 \
        //   -> b1 -> b2 -> add
        graph(json!({
            "name": "two",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [1]}],
            "nodes": [
                {"id": "a1", "op": "Relu", "inputs": ["x"], "outputs": ["ta1"]},
                {"id": "a2", "op": "Relu", "inputs": ["ta1"], "outputs": ["ta2"]},
                {"id": "b1", "op": "Relu", "inputs": ["x"], "outputs": ["tb1"]},
                {"id": "b2", "op": "Relu", "inputs": ["tb1"], "outputs": ["tb2"]},
                {"id": "add", "op": "Add", "inputs": ["ta2", "tb2"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }))
    }

    #[test]
    fn chain_has_one_order() {
        let g = graph(json!({
            "name": "c",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [1]}],
            "nodes": [
                {"id": "a", "op": "Relu", "inputs": ["x"], "outputs": ["ta"]},
                {"id": "b", "op": "Relu", "inputs": ["ta"], "outputs": ["tb"]},
                {"id": "c", "op": "Relu", "inputs": ["tb"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }));
        let o = order_exhaustive(&g, &all(&g), &sizes(&[("ta", 10), ("tb", 30), ("y", 5)]), 12).unwrap();
        assert_eq!(ids(&g, &o.order), ["a", "b", "c"]);
        assert_eq!(o.peak, 40);
    }

    #[test]
    fn smaller_branch_peak_first() {
        let g = branches();
        // branch a: 100 then 1; branch b: 1 then 50
        let s = sizes(&[("ta1", 100), ("ta2", 1), ("tb1", 1), ("tb2", 50), ("y", 1)]);
        let o = order_exhaustive(&g, &all(&g), &s, 12).unwrap();
        assert_eq!(ids(&g, &o.order), ["a1", "a2", "b1", "b2", "add"]);
        assert_eq!(o.peak, 101);
        let mut guessed = false;
        let alt = [2, 3, 0, 1, 4];
        let p = peak_of(&g, &all(&g), &alt, |t| s.get(t).copied(), &mut guessed).unwrap();
        assert_eq!(p, 151);
    }

    #[test]
    fn equal_sizes_tie_break_lexicographic() {
        let g = branches();
        let s = sizes(&[("ta1", 8), ("ta2", 8), ("tb1", 8), ("tb2", 8), ("y", 8)]);
        let o = order_exhaustive(&g, &all(&g), &s, 12).unwrap();
        assert_eq!(ids(&g, &o.order), ["a1", "a2", "b1", "b2", "add"]);
    }

    #[test]
    fn cap_is_enforced() {
        let g = branches();
        let s = sizes(&[("ta1", 8), ("ta2", 8), ("tb1", 8), ("tb2", 8), ("y", 8)]);
        assert!(matches!(order_exhaustive(&g, &all(&g), &s, 3), Err(ExecError::CapExceeded { .. })));
    }

    #[test]
    fn symbolic_matches_scaled_known() {
        let g = branches();
        let n = SymExpr::symbol("N");
        let c: [(&str, u64); 5] = [("ta1", 100), ("ta2", 1), ("tb1", 1), ("tb2", 50), ("y", 1)];
        let sym: BTreeMap<String, SymExpr> = c.iter().map(|(t, k)| (t.to_string(), n.scale(*k as i64).unwrap())).collect();
        let o = order_symbolic(&g, &all(&g), &sym, 12).unwrap();
        let k = order_exhaustive(&g, &all(&g), &sizes(&c), 12).unwrap();
        assert_eq!(o.order, k.order);
        assert!(!o.guessed);
        assert_eq!(o.peak.to_string(), "(101*N)");
    }

    #[test]
    fn symbolic_constant_difference_and_probe() {
        let nm = SymExpr::parse("N*M").unwrap();
        let a = SymCost::new(nm.add(&SymExpr::lit(4)).unwrap());
        let b = SymCost::new(nm.add(&SymExpr::lit(8)).unwrap());
        let mut guessed = false;
        assert_eq!(a.compare(&b, &mut guessed), Ordering::Less);
        assert!(!guessed);
        let n = SymCost::new(SymExpr::symbol("N"));
        let m = SymCost::new(SymExpr::symbol("M"));
        assert_eq!(n.compare(&m, &mut guessed), Ordering::Equal);
        assert!(guessed);
    }

    #[test]
    fn topk_is_a_boundary() {
        let g = graph(json!({
            "name": "tk", "symbols": ["N"],
            "inputs": [{"name": "x", "dtype": "f32", "shape": ["N"]},
                       {"name": "k", "dtype": "i64", "shape": [1]}],
            "nodes": [
                {"id": "r", "op": "Relu", "inputs": ["x"], "outputs": ["a"]},
                {"id": "t", "op": "TopK", "inputs": ["a", "k"], "outputs": ["v", "i"]},
                {"id": "s", "op": "Sigmoid", "inputs": ["v"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }));
        let r = run_rdp(&g).unwrap();
        let p = plan_exec(&g, &r, &ExecConfig::default());
        let parts: Vec<Vec<String>> = p.subgraphs.iter().map(|s| s.nodes.clone()).collect();
        assert_eq!(parts, vec![vec!["r".to_string(), "t".to_string()], vec!["s".to_string()]]);
        assert_eq!(p.boundary_tensors, ["v"]);
        assert_eq!(p.global_order, ["r", "t", "s"]);
    }

    #[test]
    fn static_graph_single_all_known() {
        let g = branches();
        let r = run_rdp(&g).unwrap();
        let p = plan_exec(&g, &r, &ExecConfig::default());
        assert_eq!(p.subgraphs.len(), 1);
        assert_eq!(p.subgraphs[0].category, Category::AllKnown);
        assert_eq!(p.subgraphs[0].method, Method::Exhaustive);
    }

    #[test]
    fn long_chain_falls_back_to_topological_order() {
        let nodes: Vec<serde_json::Value> = (0..70)
            .map(|i| {
                let src = if i == 0 { "x".to_string() } else { format!("t{}", i - 1) };
                json!({"id": format!("n{i:02}"), "op": "Relu", "inputs": [src], "outputs": [format!("t{i}")]})
            })
            .collect();
        let g = graph(json!({
            "name": "long",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [4]}],
            "nodes": nodes,
            "outputs": ["t69"]
        }));
        let all: Vec<usize> = (0..70).collect();
        let o = order_heuristic(&g, &all, |_| Some(16u64)).unwrap();
        assert_eq!(o.order, all);
        assert_eq!(o.peak, 32);
        let r = run_rdp(&g).unwrap();
        let p = plan_exec(&g, &r, &ExecConfig::default());
        assert_eq!(p.subgraphs[0].method, Method::Heuristic);
        assert_eq!(p.subgraphs[0].peak, Peak::Known(32));
    }

    #[test]
    fn local_search_beats_plain_greedy() {
        // Greedy by live bytes runs the cheap producer `a` first and then
        // holds its output across the big branch.
        let g = graph(json!({
            "name": "ls",
            "inputs": [{"name": "x", "dtype": "f32", "shape": [4]}],
            "nodes": [
                {"id": "a", "op": "Relu", "inputs": ["x"], "outputs": ["ta"]},
                {"id": "b", "op": "Relu", "inputs": ["x"], "outputs": ["tb"]},
                {"id": "c", "op": "Relu", "inputs": ["tb"], "outputs": ["tc"]},
                {"id": "d", "op": "Add", "inputs": ["ta", "tc"], "outputs": ["y"]}
            ],
            "outputs": ["y"]
        }));
        let sizes: BTreeMap<String, u64> =
            [("ta", 10), ("tb", 50), ("tc", 5), ("y", 1)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let all: Vec<usize> = (0..4).collect();
        let best = order_exhaustive(&g, &all, &sizes, 12).unwrap();
        let h = order_heuristic(&g, &all, |t| sizes.get(t).copied()).unwrap();
        assert_eq!(h.peak, best.peak);
    }
}
