//! Fusion planning under symbolic shapes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{switch_regions, Graph};
use crate::ops::{spec_of, DynClass, FusionRole};
use crate::rdp::RdpResult;
use crate::shape::ShapeInfo;
use crate::sym::{ArithOp, DimValue};

pub const DEFAULT_VERSION_CAP: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    ResolvedEqual,
    ResolvedOne,
    Unresolved,
}

/// Outcome for one pair of broadcast-combined dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimResolution {
    pub node: String,
    /// Axis of the node's output, counted from the left.
    pub axis: usize,
    pub lhs: DimValue,
    pub rhs: DimValue,
    pub status: Resolution,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fusibility {
    Fusible { resolution: Vec<DimResolution> },
    MultiVersion { versions: u64, resolution: Vec<DimResolution> },
    Infusible { reason: String },
}

impl Fusibility {
    pub fn versions(&self) -> Option<u64> {
        match self {
            Fusibility::Fusible { .. } => Some(1),
            Fusibility::MultiVersion { versions, .. } => Some(*versions),
            Fusibility::Infusible { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionGroup {
    pub id: usize,
    pub members: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub resolution: Vec<DimResolution>,
    pub versions: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStats {
    pub layers_before: usize,
    pub layers_after: usize,
    /// Tensors that no longer materialise because they stay inside a group.
    pub internal_tensors: Vec<String>,
    /// Total size of `internal_tensors`; `nac` when some size is unknown.
    pub bytes_eliminated: DimValue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub version_cap: u64,
    pub groups: Vec<FusionGroup>,
    pub singletons: Vec<String>,
    pub stats: FusionStats,
}

fn role(g: &Graph, ni: usize) -> FusionRole {
    spec_of(&g.nodes[ni]).fusion
}

fn is_boundary(g: &Graph, r: &RdpResult, ni: usize) -> bool {
    let id = &g.nodes[ni].id;
    r.nac_nodes.contains(id) || r.classes.get(id) == Some(&DynClass::Edo)
}

fn classify_dim(a: &DimValue, b: &DimValue) -> Resolution {
    let one = DimValue::Known(1);
    if *a == one || *b == one {
        Resolution::ResolvedOne
    } else if a.is_nac() || b.is_nac() || a.is_undef() || b.is_undef() {
        Resolution::Unresolved
    } else if a == b || matches!((a, b), (DimValue::Known(_), _) | (_, DimValue::Known(_))) {
        // a symbolic extent meeting a constant other than 1 can only equal it
        Resolution::ResolvedEqual
    } else {
        Resolution::Unresolved
    }
}

/// Per-dimension resolution of a broadcasting node's two operands.
pub fn broadcast_resolution(g: &Graph, r: &RdpResult, ni: usize) -> Vec<DimResolution> {
    let n = &g.nodes[ni];
    if role(g, ni) != FusionRole::Broadcast || n.inputs.len() != 2 {
        return Vec::new();
    }
    let (ShapeInfo::Ranked(a), ShapeInfo::Ranked(b)) = (r.shape(&n.inputs[0]), r.shape(&n.inputs[1])) else {
        return Vec::new();
    };
    let rank = a.len().max(b.len());
    let mut out = Vec::new();
    for axis in 0..rank {
        let (Some(ai), Some(bi)) = ((axis + a.len()).checked_sub(rank), (axis + b.len()).checked_sub(rank)) else {
            continue;
        };
        out.push(DimResolution {
            node: n.id.clone(),
            axis,
            lhs: a[ai].clone(),
            rhs: b[bi].clone(),
            status: classify_dim(&a[ai], &b[bi]),
        });
    }
    out
}

fn versions_of(res: &[DimResolution]) -> u64 {
    let k = res.iter().filter(|d| d.status == Resolution::Unresolved).count() as u32;
    2u64.checked_pow(k).unwrap_or(u64::MAX)
}

/// Whether `producer` can be fused with its consumer `consumer`, and how
/// many code versions the pair needs.
pub fn fusibility(g: &Graph, r: &RdpResult, producer: usize, consumer: usize) -> Fusibility {
    let infusible = |reason: String| Fusibility::Infusible { reason };
    let (p, c) = (&g.nodes[producer], &g.nodes[consumer]);
    if !p.outputs.iter().any(|t| c.inputs.contains(t)) {
        return infusible(format!("`{}` does not feed `{}`", p.id, c.id));
    }
    for ni in [producer, consumer] {
        if is_boundary(g, r, ni) {
            return infusible(format!("`{}` has an execution-determined output shape", g.nodes[ni].id));
        }
    }
    let (rp, rc) = (role(g, producer), role(g, consumer));
    let ok_p = matches!(rp, FusionRole::Elementwise | FusionRole::Broadcast | FusionRole::Heavy);
    let ok_c = matches!(rc, FusionRole::Elementwise | FusionRole::Broadcast | FusionRole::Reduction);
    if !ok_p || !ok_c {
        return infusible(format!("{} -> {} is not in the fusion table", p.op, c.op));
    }
    let resolution = broadcast_resolution(g, r, consumer);
    match versions_of(&resolution) {
        1 => Fusibility::Fusible { resolution },
        v => Fusibility::MultiVersion { versions: v, resolution },
    }
}

/// Innermost Switch branch containing each node, as (switch node, branch).
fn branch_context(g: &Graph) -> Vec<Option<(usize, usize)>> {
    let (regions, _) = switch_regions(g);
    let mut ctx: Vec<Option<(usize, usize, usize)>> = vec![None; g.nodes.len()];
    for reg in &regions {
        for (b, nodes) in reg.branches.iter().enumerate() {
            for &n in nodes {
                // smaller regions are nested deeper
                let size = reg.all_nodes().len();
                if ctx[n].is_none_or(|(_, _, s)| size < s) {
                    ctx[n] = Some((reg.switch, b, size));
                }
            }
        }
    }
    ctx.into_iter().map(|c| c.map(|(s, b, _)| (s, b))).collect()
}

struct Builder<'a> {
    g: &'a Graph,
    r: &'a RdpResult,
    cap: u64,
    pos: Vec<usize>,
    ctx: Vec<Option<(usize, usize)>>,
    descendants: Vec<BTreeSet<usize>>,
}

impl Builder<'_> {
    /// Whether `c` can join `group` without breaking convexity.
    fn convex_with(&self, group: &BTreeSet<usize>, c: usize) -> bool {
        self.g
            .predecessors(c)
            .into_iter()
            .filter(|q| !group.contains(q))
            .all(|q| !group.iter().any(|m| self.descendants[*m].contains(&q)))
    }

    fn group_resolution(&self, members: &[usize]) -> Vec<DimResolution> {
        members
            .iter()
            .skip(1)
            .flat_map(|m| broadcast_resolution(self.g, self.r, *m))
            .collect()
    }

    /// Every producer feeding `c` from outside the group already ran, so the
    /// group stays schedulable as one step.
    fn inputs_ready(&self, set: &BTreeSet<usize>, c: usize, taken: &[bool]) -> bool {
        self.g.predecessors(c).into_iter().all(|q| set.contains(&q) || taken[q])
    }

    fn try_add(&self, members: &[usize], set: &BTreeSet<usize>, c: usize, taken: &[bool]) -> bool {
        let g = self.g;
        if set.contains(&c) || taken[c] || self.ctx[c] != self.ctx[members[0]] {
            return false;
        }
        if !self.convex_with(set, c) || !self.inputs_ready(set, c, taken) {
            return false;
        }
        if role(g, *members.last().expect("nonempty")) == FusionRole::Reduction {
            return false;
        }
        let feeders: Vec<usize> = g.predecessors(c).into_iter().filter(|p| set.contains(p)).collect();
        if feeders.is_empty() || feeders.iter().any(|p| fusibility(g, self.r, *p, c).versions().is_none()) {
            return false;
        }
        let mut grown = members.to_vec();
        grown.push(c);
        versions_of(&self.group_resolution(&grown)) <= self.cap
    }

    fn grow(&self, start: usize, taken: &[bool]) -> Vec<usize> {
        let g = self.g;
        let mut members = vec![start];
        let mut set = BTreeSet::from([start]);
        loop {
            let mut cands: BTreeSet<(usize, usize)> = BTreeSet::new();
            for &m in &members {
                for s in g.successors(m) {
                    if !set.contains(&s) {
                        cands.insert((self.pos[s], s));
                    }
                }
            }
            let Some(&(_, c)) = cands.iter().find(|(_, c)| self.try_add(&members, &set, *c, taken)) else {
                break;
            };
            members.push(c);
            set.insert(c);
        }
        members
    }
}

/// Greedy fusion along topological order.
pub fn build_plan(g: &Graph, r: &RdpResult, version_cap: u64) -> FusionPlan {
    let order = g.topo_order();
    let mut pos = vec![0; g.nodes.len()];
    for (i, n) in order.iter().enumerate() {
        pos[*n] = i;
    }
    let mut descendants = vec![BTreeSet::new(); g.nodes.len()];
    for &n in order.iter().rev() {
        let mut d = BTreeSet::new();
        for s in g.successors(n) {
            d.insert(s);
            d.extend(descendants[s].iter().copied());
        }
        descendants[n] = d;
    }
    let b = Builder {
        g,
        r,
        cap: version_cap.max(1),
        pos,
        ctx: branch_context(g),
        descendants,
    };

    let mut taken = vec![false; g.nodes.len()];
    let mut groups = Vec::new();
    let mut singletons = Vec::new();
    for &n in order {
        if taken[n] {
            continue;
        }
        let startable = matches!(
            role(g, n),
            FusionRole::Elementwise | FusionRole::Broadcast | FusionRole::Heavy
        ) && !is_boundary(g, r, n);
        let members = if startable { b.grow(n, &taken) } else { vec![n] };
        for &m in &members {
            taken[m] = true;
        }
        if members.len() == 1 {
            singletons.push(g.nodes[n].id.clone());
            continue;
        }
        let set: BTreeSet<usize> = members.iter().copied().collect();
        let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
        for &m in &members {
            for t in &g.nodes[m].inputs {
                let inside = g.producer_node(t).is_some_and(|p| set.contains(&p));
                if !inside && !inputs.contains(t) {
                    inputs.push(t.clone());
                }
            }
            for t in &g.nodes[m].outputs {
                let escapes = g.is_output(t) || g.consumers(t).iter().any(|(c, _)| !set.contains(c));
                if escapes {
                    outputs.push(t.clone());
                }
            }
        }
        let resolution = b.group_resolution(&members);
        groups.push(FusionGroup {
            id: groups.len(),
            members: members.iter().map(|m| g.nodes[*m].id.clone()).collect(),
            inputs,
            outputs,
            versions: versions_of(&resolution),
            resolution,
        });
    }
    let stats = stats(g, r, &groups, singletons.len());
    FusionPlan {
        version_cap: b.cap,
        groups,
        singletons,
        stats,
    }
}

/// Byte size of a tensor as a lattice value.
pub fn tensor_bytes(g: &Graph, r: &RdpResult, t: &str) -> DimValue {
    let elems = r.shape(t).numel().unwrap_or(DimValue::Nac);
    let width = DimValue::Known(g.dtype(t).size_bytes() as i64);
    DimValue::apply(ArithOp::Mul, &elems, &width).unwrap_or(DimValue::Nac)
}

fn stats(g: &Graph, r: &RdpResult, groups: &[FusionGroup], singles: usize) -> FusionStats {
    let mut internal = Vec::new();
    let mut total = DimValue::Known(0);
    for grp in groups {
        for id in &grp.members {
            let n = g.node(id).expect("member exists");
            for t in &n.outputs {
                if grp.outputs.contains(t) {
                    continue;
                }
                internal.push(t.clone());
                total = DimValue::apply(ArithOp::Add, &total, &tensor_bytes(g, r, t)).unwrap_or(DimValue::Nac);
            }
        }
    }
    FusionStats {
        layers_before: g.nodes.len(),
        layers_after: groups.len() + singles,
        internal_tensors: internal,
        bytes_eliminated: total,
    }
}

/// Execution steps with each group run as one unit. Groups only admit
/// members whose outside producers were placed earlier, so emitting each
/// unit at its first member in topological order is valid.
pub fn fused_steps(g: &Graph, plan: &FusionPlan) -> Vec<Vec<usize>> {
    let order = g.topo_order();
    let mut pos = vec![0; g.nodes.len()];
    for (i, n) in order.iter().enumerate() {
        pos[*n] = i;
    }
    let mut unit_of: Vec<Option<usize>> = vec![None; g.nodes.len()];
    for (u, grp) in plan.groups.iter().enumerate() {
        for m in grp.members.iter().filter_map(|m| g.node_index(m)) {
            unit_of[m] = Some(u);
        }
    }
    let mut emitted = vec![false; plan.groups.len()];
    let mut steps = Vec::new();
    for &n in order {
        match unit_of[n] {
            None => steps.push(vec![n]),
            Some(u) if !emitted[u] => {
                emitted[u] = true;
                let mut step: Vec<usize> = plan.groups[u].members.iter().filter_map(|m| g.node_index(m)).collect();
                step.sort_by_key(|m| pos[*m]);
                steps.push(step);
            }
            Some(_) => {}
        }
    }
    steps
}
