//! Arena offset assignment for tensors with known lifetimes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Producer};

pub const DEFAULT_ALIGNMENT: u64 = 64;
pub const DEFAULT_ORACLE_CAP: usize = 10;

/// One tensor's size and live step range (both ends inclusive).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lifetime {
    pub tensor: String,
    pub size: u64,
    pub birth: usize,
    pub death: usize,
}

impl Lifetime {
    pub fn new(tensor: impl Into<String>, size: u64, birth: usize, death: usize) -> Self {
        Lifetime {
            tensor: tensor.into(),
            size,
            birth,
            death,
        }
    }

    pub fn overlaps(&self, other: &Lifetime) -> bool {
        self.birth <= other.death && other.birth <= self.death
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    FromPeak,
    BestFit,
    OptimalOracle,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FromPeak => "from-peak",
            Strategy::BestFit => "best-fit",
            Strategy::OptimalOracle => "optimal-oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub tensor: String,
    pub offset: u64,
    pub size: u64,
    pub birth: usize,
    pub death: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemPlan {
    pub strategy: Strategy,
    pub alignment: u64,
    pub arena: u64,
    /// Maximum over steps of the summed sizes of live tensors.
    pub lower_bound: u64,
    pub peak_step: Option<usize>,
    pub tensors: Vec<Placement>,
}

impl MemPlan {
    pub fn offset_of(&self, tensor: &str) -> Option<u64> {
        self.tensors.iter().find(|p| p.tensor == tensor).map(|p| p.offset)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("{count} tensors exceed the oracle cap of {cap}")]
    TooLarge { count: usize, cap: usize },
    #[error("tensor `{0}` has zero size or death before birth")]
    BadLifetime(String),
}

fn align_up(v: u64, a: u64) -> u64 {
    if a <= 1 {
        v
    } else {
        v.div_ceil(a) * a
    }
}

fn validate(lts: &[Lifetime]) -> Result<(), MemError> {
    for l in lts {
        if l.size == 0 || l.death < l.birth {
            return Err(MemError::BadLifetime(l.tensor.clone()));
        }
    }
    Ok(())
}

/// Summed live size per step, indexed from 0 to the last death.
pub fn live_profile(lts: &[Lifetime]) -> Vec<u64> {
    let end = lts.iter().map(|l| l.death + 1).max().unwrap_or(0);
    let mut live = vec![0u64; end];
    for l in lts {
        for s in &mut live[l.birth..=l.death] {
            *s += l.size;
        }
    }
    live
}

/// Earliest step of maximal live size, and that size.
pub fn peak(lts: &[Lifetime]) -> Option<(usize, u64)> {
    let live = live_profile(lts);
    let max = *live.iter().max()?;
    live.iter().position(|v| *v == max).map(|p| (p, max))
}

/// Live sizes never rise after the peak step and never fall before it.
pub fn is_unimodal(lts: &[Lifetime]) -> bool {
    let live = live_profile(lts);
    let Some((p, _)) = peak(lts) else { return true };
    live[..=p].windows(2).all(|w| w[0] <= w[1]) && live[p..].windows(2).all(|w| w[0] >= w[1])
}

/// Lowest aligned offset at which `size` bytes fit among `busy` intervals.
fn lowest_fit(busy: &mut [(u64, u64)], size: u64) -> u64 {
    busy.sort_unstable();
    let mut cur = 0;
    for &(s, e) in busy.iter() {
        if s >= cur + size {
            return cur;
        }
        cur = cur.max(e);
    }
    cur
}

/// Smallest bounded gap that fits, else the top of the busy region.
fn best_fit(busy: &mut [(u64, u64)], size: u64) -> u64 {
    busy.sort_unstable();
    let mut cur = 0;
    let mut best: Option<(u64, u64)> = None; // (gap length, offset)
    for &(s, e) in busy.iter() {
        if s > cur {
            let gap = s - cur;
            if gap >= size && best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, cur));
            }
        }
        cur = cur.max(e);
    }
    best.map_or(cur, |(_, o)| o)
}

struct Packer<'a> {
    lts: &'a [Lifetime],
    align: u64,
    offsets: Vec<Option<u64>>,
}

impl Packer<'_> {
    fn busy_for(&self, i: usize) -> Vec<(u64, u64)> {
        let me = &self.lts[i];
        self.lts
            .iter()
            .zip(&self.offsets)
            .filter_map(|(l, o)| {
                let o = (*o)?;
                l.overlaps(me).then(|| (o, o + align_up(l.size, self.align)))
            })
            .collect()
    }

    fn place(&mut self, i: usize, pick: fn(&mut [(u64, u64)], u64) -> u64) {
        let mut busy = self.busy_for(i);
        let fp = align_up(self.lts[i].size, self.align);
        self.offsets[i] = Some(pick(&mut busy, fp));
    }

    fn finish(self, strategy: Strategy) -> MemPlan {
        let lts = self.lts;
        let tensors: Vec<Placement> = lts
            .iter()
            .zip(&self.offsets)
            .map(|(l, o)| Placement {
                tensor: l.tensor.clone(),
                offset: o.expect("every tensor placed"),
                size: l.size,
                birth: l.birth,
                death: l.death,
            })
            .collect();
        let arena = tensors
            .iter()
            .map(|p| p.offset + align_up(p.size, self.align))
            .max()
            .unwrap_or(0);
        let pk = peak(lts);
        MemPlan {
            strategy,
            alignment: self.align,
            arena,
            lower_bound: pk.map_or(0, |p| p.1),
            peak_step: pk.map(|p| p.0),
            tensors,
        }
    }
}

fn by_size_then_name(lts: &[Lifetime]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |a, b| {
        lts[*b]
            .size
            .cmp(&lts[*a].size)
            .then_with(|| lts[*a].tensor.cmp(&lts[*b].tensor))
    }
}

/// Peak sets up to this size have every contiguous layout tried.
pub const PEAK_PERMUTE_LIMIT: usize = 6;

/// Lay out the peak-step live set contiguously, then sweep forward placing
/// later births and backward placing earlier deaths, each in the
/// lowest-offset gap.
///
/// Several layouts of the peak set are tried (by size, by birth, by death,
/// or every permutation when the set is small) and the smallest arena wins;
/// ties keep the size-ordered layout.
pub fn plan_from_peak(lts: &[Lifetime], align: u64) -> Result<MemPlan, MemError> {
    validate(lts)?;
    let Some((p, lower)) = peak(lts) else {
        return Ok(from_peak_with(lts, align, 0, &[]));
    };
    let mut best: Option<MemPlan> = None;
    for layout in peak_layouts(lts, p) {
        let plan = from_peak_with(lts, align, p, &layout);
        if best.as_ref().is_none_or(|b| plan.arena < b.arena) {
            let done = align <= 1 && plan.arena == lower;
            best = Some(plan);
            if done {
                break;
            }
        }
    }
    Ok(best.expect("at least one layout"))
}

fn peak_layouts(lts: &[Lifetime], p: usize) -> Vec<Vec<usize>> {
    let set: Vec<usize> = (0..lts.len()).filter(|i| lts[*i].birth <= p && p <= lts[*i].death).collect();
    let cmp = by_size_then_name(lts);
    let birth = |i: &usize| lts[*i].birth;
    let death = |i: &usize| lts[*i].death;
    let mut out = Vec::new();
    let mut by_size = set.clone();
    by_size.sort_by(&cmp);
    out.push(by_size.clone());
    for asc in [true, false] {
        for key in [&death as &dyn Fn(&usize) -> usize, &birth] {
            let mut v = set.clone();
            v.sort_by(|a, b| {
                let o = key(a).cmp(&key(b));
                (if asc { o } else { o.reverse() }).then_with(|| cmp(a, b))
            });
            out.push(v);
        }
    }
    if set.len() <= PEAK_PERMUTE_LIMIT {
        let mut idx: Vec<usize> = (0..by_size.len()).collect();
        while next_permutation(&mut idx) {
            out.push(idx.iter().map(|k| by_size[*k]).collect());
        }
    }
    out
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|i| v[i - 1] < v[*i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|j| v[*j] > v[i - 1]).expect("successor exists");
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn from_peak_with(lts: &[Lifetime], align: u64, p: usize, layout: &[usize]) -> MemPlan {
    let mut pk = Packer {
        lts,
        align,
        offsets: vec![None; lts.len()],
    };
    if lts.is_empty() {
        return pk.finish(Strategy::FromPeak);
    }
    let cmp = by_size_then_name(lts);
    let mut cur = 0;
    for &i in layout {
        pk.offsets[i] = Some(cur);
        cur += align_up(lts[i].size, align);
    }

    let mut after: Vec<usize> = (0..lts.len()).filter(|i| lts[*i].birth > p).collect();
    after.sort_by(|a, b| lts[*a].birth.cmp(&lts[*b].birth).then_with(|| cmp(a, b)));
    for i in after {
        pk.place(i, lowest_fit);
    }

    let mut before: Vec<usize> = (0..lts.len()).filter(|i| lts[*i].death < p).collect();
    before.sort_by(|a, b| lts[*b].death.cmp(&lts[*a].death).then_with(|| cmp(a, b)));
    for i in before {
        pk.place(i, lowest_fit);
    }
    pk.finish(Strategy::FromPeak)
}

/// Chronological best-fit: at each birth take the smallest free gap that
/// holds the tensor, else grow the arena.
pub fn plan_best_fit(lts: &[Lifetime], align: u64) -> Result<MemPlan, MemError> {
    validate(lts)?;
    let mut pk = Packer {
        lts,
        align,
        offsets: vec![None; lts.len()],
    };
    let cmp = by_size_then_name(lts);
    let mut order: Vec<usize> = (0..lts.len()).collect();
    order.sort_by(|a, b| lts[*a].birth.cmp(&lts[*b].birth).then_with(|| cmp(a, b)));
    for i in order {
        pk.place(i, best_fit);
    }
    Ok(pk.finish(Strategy::BestFit))
}

/// Minimal arena by branch and bound. Any packing can be reproduced by
/// placing tensors in order of their offsets, each at its lowest feasible
/// offset, so the search enumerates such orders with non-decreasing
/// offsets.
pub fn plan_optimal(lts: &[Lifetime], align: u64, cap: usize) -> Result<MemPlan, MemError> {
    validate(lts)?;
    if lts.len() > cap {
        return Err(MemError::TooLarge {
            count: lts.len(),
            cap,
        });
    }
    let fp: Vec<u64> = lts.iter().map(|l| align_up(l.size, align)).collect();
    let aligned: Vec<Lifetime> = lts
        .iter()
        .zip(&fp)
        .map(|(l, f)| Lifetime {
            size: *f,
            ..l.clone()
        })
        .collect();
    let lower = peak(&aligned).map_or(0, |p| p.1);
    let seed = plan_from_peak(lts, align)?;
    let mut best_arena = seed.arena;
    let mut best: Vec<u64> = seed.tensors.iter().map(|p| p.offset).collect();

    struct Search<'a> {
        lts: &'a [Lifetime],
        fp: &'a [u64],
        lower: u64,
        offsets: Vec<Option<u64>>,
        best_arena: &'a mut u64,
        best: &'a mut Vec<u64>,
    }
    impl Search<'_> {
        fn go(&mut self, placed: usize, floor: u64, top: u64) -> bool {
            if top >= *self.best_arena {
                return false;
            }
            if placed == self.lts.len() {
                *self.best_arena = top;
                *self.best = self.offsets.iter().map(|o| o.unwrap_or(0)).collect();
                return top == self.lower;
            }
            for i in 0..self.lts.len() {
                if self.offsets[i].is_some() {
                    continue;
                }
                let mut busy: Vec<(u64, u64)> = (0..self.lts.len())
                    .filter_map(|j| {
                        let o = self.offsets[j]?;
                        self.lts[j].overlaps(&self.lts[i]).then(|| (o, o + self.fp[j]))
                    })
                    .collect();
                let off = lowest_fit(&mut busy, self.fp[i]);
                if off < floor {
                    continue;
                }
                self.offsets[i] = Some(off);
                let done = self.go(placed + 1, off, top.max(off + self.fp[i]));
                self.offsets[i] = None;
                if done {
                    return true;
                }
            }
            false
        }
    }
    if best_arena > lower {
        let mut s = Search {
            lts,
            fp: &fp,
            lower,
            offsets: vec![None; lts.len()],
            best_arena: &mut best_arena,
            best: &mut best,
        };
        s.go(0, 0, 0);
    }
    let pk = Packer {
        lts,
        align,
        offsets: best.into_iter().map(Some).collect(),
    };
    Ok(pk.finish(Strategy::OptimalOracle))
}

pub fn plan(lts: &[Lifetime], strategy: Strategy, align: u64) -> Result<MemPlan, MemError> {
    match strategy {
        Strategy::FromPeak => plan_from_peak(lts, align),
        Strategy::BestFit => plan_best_fit(lts, align),
        Strategy::OptimalOracle => plan_optimal(lts, align, DEFAULT_ORACLE_CAP),
    }
}

/// Pairs of tensors that are live together and share bytes.
pub fn find_overlaps(plan: &MemPlan) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let t = &plan.tensors;
    for i in 0..t.len() {
        for j in (i + 1)..t.len() {
            let (a, b) = (&t[i], &t[j]);
            let time = a.birth <= b.death && b.birth <= a.death;
            let space = a.offset < b.offset + b.size && b.offset < a.offset + a.size;
            if time && space {
                out.push((a.tensor.clone(), b.tensor.clone()));
            }
        }
    }
    out
}

/// Lifetimes of intermediate tensors for nodes executed in `steps`.
///
/// A tensor is born at its producer's step and dies at its last consumer's
/// step; graph outputs live to the final step. Graph inputs and constants
/// are not tracked. Tensors produced and consumed only inside one
/// multi-node step are never materialised and are omitted.
pub fn lifetimes(g: &Graph, steps: &[Vec<usize>], sizes: &BTreeMap<String, u64>) -> Vec<Lifetime> {
    let mut step_of: HashMap<usize, usize> = HashMap::new();
    for (s, nodes) in steps.iter().enumerate() {
        for n in nodes {
            step_of.insert(*n, s);
        }
    }
    let last = steps.len().saturating_sub(1);
    let mut out = Vec::new();
    for (s, nodes) in steps.iter().enumerate() {
        for &ni in nodes {
            for t in &g.nodes[ni].outputs {
                if !matches!(g.producer(t), Some(Producer::Node { .. })) {
                    continue;
                }
                let Some(&size) = sizes.get(t) else { continue };
                let uses: Vec<usize> = g
                    .consumers(t)
                    .iter()
                    .filter_map(|(c, _)| step_of.get(c).copied())
                    .collect();
                if !g.is_output(t) && nodes.len() > 1 && !uses.is_empty() && uses.iter().all(|u| *u == s) {
                    continue;
                }
                let death = if g.is_output(t) {
                    last
                } else {
                    uses.into_iter().max().unwrap_or(s).max(s)
                };
                if size > 0 {
                    out.push(Lifetime::new(t.clone(), size, s, death));
                }
            }
        }
    }
    out.sort_by(|a, b| (a.birth, &a.tensor).cmp(&(b.birth, &b.tensor)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lt(name: &str, size: u64, b: usize, d: usize) -> Lifetime {
        Lifetime::new(name, size, b, d)
    }

    #[test]
    fn contiguous_peak_layout() {
        let l = vec![lt("a", 100, 0, 2), lt("b", 50, 0, 2), lt("c", 50, 1, 2)];
        let p = plan_from_peak(&l, 1).unwrap();
        assert_eq!(
            p.tensors.iter().map(|t| t.offset).collect::<Vec<_>>(),
            vec![0, 100, 150]
        );
        assert_eq!(p.arena, 200);
        assert_eq!(plan_best_fit(&l, 1).unwrap().arena, 200);
    }

    #[test]
    fn reuse_after_peak() {
        let l = vec![lt("a", 100, 0, 1), lt("b", 50, 0, 2), lt("c", 80, 2, 3)];
        let p = plan_from_peak(&l, 1).unwrap();
        assert_eq!(p.offset_of("c"), Some(0));
        assert_eq!(p.arena, 150);
    }

    #[test]
    fn single_and_pairs() {
        let one = vec![lt("x", 40, 0, 0)];
        let p = plan_best_fit(&one, 1).unwrap();
        assert_eq!((p.tensors[0].offset, p.arena), (0, 40));
        let both = vec![lt("a", 64, 0, 1), lt("b", 32, 1, 2)];
        assert_eq!(plan_optimal(&both, 1, 10).unwrap().arena, 96);
        let apart = vec![lt("a", 64, 0, 0), lt("b", 32, 1, 1)];
        assert_eq!(plan_optimal(&apart, 1, 10).unwrap().arena, 64);
    }

    #[test]
    fn alignment_rounds_offsets() {
        let l = vec![lt("a", 10, 0, 1), lt("b", 10, 0, 1)];
        let p = plan_from_peak(&l, 64).unwrap();
        assert_eq!(p.offset_of("b"), Some(64));
        assert_eq!(p.arena, 128);
    }

    #[test]
    fn oracle_needs_peak_reordering() {
        // laying the peak set out by size leaves no 70-byte hole later
        let l = vec![
            lt("a", 40, 0, 1),
            lt("b", 30, 0, 0),
            lt("c", 30, 0, 1),
            lt("e", 20, 1, 2),
            lt("f", 70, 2, 2),
        ];
        let fp = plan_from_peak(&l, 1).unwrap();
        let opt = plan_optimal(&l, 1, 10).unwrap();
        assert!(find_overlaps(&fp).is_empty() && find_overlaps(&opt).is_empty());
        assert_eq!(opt.arena, 100);
        assert!(opt.arena <= fp.arena);
    }

    #[test]
    fn overlap_detector() {
        let mut p = plan_best_fit(&[lt("a", 8, 0, 1), lt("b", 8, 1, 2)], 1).unwrap();
        assert!(find_overlaps(&p).is_empty());
        p.tensors[1].offset = 4;
        assert_eq!(find_overlaps(&p).len(), 1);
    }
}
