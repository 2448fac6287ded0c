//! Label relation graph over dynasties, periods, shapes and characteristics.
//!
//! Nodes are stored densely in kind order: all dynasties, then periods,
//! shapes and characteristics. Subsumption edges point parent → child and
//! mean "an active child requires at least one active parent". Exclusion
//! edges forbid two nodes from being active together.
//!
//! A [`GraphView`] restricts the graph to the era nodes, the era and shape
//! nodes, or the era and characteristic nodes. The legal assignments of
//! those views are the three state spaces the losses are defined on.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest view that [`enumerate_legal`] will expand by default.
pub const DEFAULT_ENUMERATION_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Dynasty,
    Period,
    Shape,
    Characteristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeId {
    pub index: usize,
    pub kind: NodeKind,
    pub name: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("subsumption cycle through `{0}`")]
    Cycle(String),
    #[error("invalid subsumption edge `{parent}` -> `{child}`: {reason}")]
    InvalidEdge {
        parent: String,
        child: String,
        reason: &'static str,
    },
    #[error("orphan node `{node}`: {reason}")]
    Orphan { node: String, reason: &'static str },
    #[error("exclusion edge between characteristics `{0}` and `{1}` is not allowed")]
    CharacteristicExclusion(String, String),
    #[error("assignment has {got} entries, view has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("view has {nodes} nodes, above the enumeration cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
    #[error("cannot read graph file: {0}")]
    Io(String),
    #[error("cannot parse graph file: {0}")]
    Parse(String),
}

/// Generic builder input: named nodes plus raw edge lists.
#[derive(Debug, Clone, Default)]
pub struct GraphSpec {
    pub nodes: Vec<(String, NodeKind)>,
    /// `(parent, child)` pairs.
    pub subsumption: Vec<(String, String)>,
    /// Extra exclusion pairs; the mandatory ones are inserted automatically.
    pub exclusion: Vec<(String, String)>,
}

impl GraphSpec {
    pub fn node(mut self, name: impl Into<String>, kind: NodeKind) -> Self {
        self.nodes.push((name.into(), kind));
        self
    }

    pub fn edge(mut self, parent: impl Into<String>, child: impl Into<String>) -> Self {
        self.subsumption.push((parent.into(), child.into()));
        self
    }

    pub fn exclude(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.exclusion.push((a.into(), b.into()));
        self
    }
}

/// On-disk graph description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSchema {
    pub dynasties: Vec<String>,
    pub periods: Vec<PeriodEntry>,
    #[serde(default)]
    pub shapes: Vec<AttributeEntry>,
    #[serde(default)]
    pub characteristics: Vec<AttributeEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclusions: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEntry {
    pub name: String,
    pub parent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEntry {
    pub name: String,
    pub parent_periods: Vec<String>,
}

impl GraphSchema {
    pub fn to_spec(&self) -> GraphSpec {
        let mut spec = GraphSpec::default();
        for d in &self.dynasties {
            spec.nodes.push((d.clone(), NodeKind::Dynasty));
        }
        for p in &self.periods {
            spec.nodes.push((p.name.clone(), NodeKind::Period));
            spec.subsumption.push((p.parent.clone(), p.name.clone()));
        }
        for (entries, kind) in [
            (&self.shapes, NodeKind::Shape),
            (&self.characteristics, NodeKind::Characteristic),
        ] {
            for a in entries {
                spec.nodes.push((a.name.clone(), kind));
                for parent in &a.parent_periods {
                    spec.subsumption.push((parent.clone(), a.name.clone()));
                }
            }
        }
        spec.exclusion = self.exclusions.clone();
        spec
    }

    pub fn build(&self) -> Result<RelationGraph, GraphError> {
        build_graph(&self.to_spec())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let text = fs::read_to_string(path).map_err(|e| GraphError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| GraphError::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| GraphError::Parse(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| GraphError::Io(e.to_string()))
    }
}

/// Validated, immutable relation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    nodes: Vec<NodeId>,
    n_dynasties: usize,
    n_periods: usize,
    n_shapes: usize,
    n_chars: usize,
    /// Parent lists per node (global indices).
    parents: Vec<Vec<usize>>,
    /// Children lists per node (global indices).
    children: Vec<Vec<usize>>,
    /// Normalized `(lo, hi)` pairs.
    exclusion: BTreeSet<(usize, usize)>,
}

/// Validate a node/edge specification and build the graph.
///
/// Exclusion edges among all dynasties, all periods and all shapes are
/// inserted whether or not the spec lists them.
pub fn build_graph(spec: &GraphSpec) -> Result<RelationGraph, GraphError> {
    let mut seen = HashMap::new();
    for (name, _) in &spec.nodes {
        if seen.insert(name.as_str(), ()).is_some() {
            return Err(GraphError::DuplicateNode(name.clone()));
        }
    }

    // Stable reorder into kind blocks.
    let mut ordered: Vec<(&str, NodeKind)> =
        spec.nodes.iter().map(|(n, k)| (n.as_str(), *k)).collect();
    ordered.sort_by_key(|(_, k)| *k);
    let index: HashMap<&str, usize> = ordered.iter().enumerate().map(|(i, (n, _))| (*n, i)).collect();
    let nodes: Vec<NodeId> = ordered
        .iter()
        .enumerate()
        .map(|(i, (n, k))| NodeId {
            index: i,
            kind: *k,
            name: n.to_string(),
        })
        .collect();
    let count = |kind| nodes.iter().filter(|n| n.kind == kind).count();

    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(name.to_string()))
    };

    let mut parents = vec![Vec::new(); nodes.len()];
    let mut children = vec![Vec::new(); nodes.len()];
    for (p, c) in &spec.subsumption {
        let (pi, ci) = (lookup(p)?, lookup(c)?);
        if !parents[ci].contains(&pi) {
            parents[ci].push(pi);
            children[pi].push(ci);
        }
    }
    for list in parents.iter_mut().chain(children.iter_mut()) {
        list.sort_unstable();
    }
    if let Some(at) = find_cycle(&children) {
        return Err(GraphError::Cycle(nodes[at].name.clone()));
    }

    for (ci, ps) in parents.iter().enumerate() {
        let child = &nodes[ci];
        for &pi in ps {
            let parent = &nodes[pi];
            let ok = matches!(
                (parent.kind, child.kind),
                (NodeKind::Dynasty, NodeKind::Period)
                    | (NodeKind::Period, NodeKind::Shape)
                    | (NodeKind::Period, NodeKind::Characteristic)
            );
            if !ok {
                return Err(GraphError::InvalidEdge {
                    parent: parent.name.clone(),
                    child: child.name.clone(),
                    reason: "only dynasty->period and period->shape/characteristic edges are allowed",
                });
            }
        }
        match child.kind {
            NodeKind::Dynasty => {}
            NodeKind::Period if ps.is_empty() => {
                return Err(GraphError::Orphan {
                    node: child.name.clone(),
                    reason: "period without dynasty parent",
                })
            }
            NodeKind::Period if ps.len() > 1 => {
                return Err(GraphError::Orphan {
                    node: child.name.clone(),
                    reason: "multiple dynasty parents",
                })
            }
            NodeKind::Shape | NodeKind::Characteristic if ps.is_empty() => {
                return Err(GraphError::Orphan {
                    node: child.name.clone(),
                    reason: "attribute without period parent",
                })
            }
            _ => {}
        }
    }

    let mut exclusion = BTreeSet::new();
    for kind in [NodeKind::Dynasty, NodeKind::Period, NodeKind::Shape] {
        let members: Vec<usize> = nodes.iter().filter(|n| n.kind == kind).map(|n| n.index).collect();
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                exclusion.insert((a, b));
            }
        }
    }
    for (a, b) in &spec.exclusion {
        let (ai, bi) = (lookup(a)?, lookup(b)?);
        if nodes[ai].kind == NodeKind::Characteristic && nodes[bi].kind == NodeKind::Characteristic {
            return Err(GraphError::CharacteristicExclusion(a.clone(), b.clone()));
        }
        if ai != bi {
            exclusion.insert((ai.min(bi), ai.max(bi)));
        }
    }

    Ok(RelationGraph {
        n_dynasties: count(NodeKind::Dynasty),
        n_periods: count(NodeKind::Period),
        n_shapes: count(NodeKind::Shape),
        n_chars: count(NodeKind::Characteristic),
        nodes,
        parents,
        children,
        exclusion,
    })
}

/// Returns a node on a directed cycle, if any.
fn find_cycle(children: &[Vec<usize>]) -> Option<usize> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; children.len()];
    for start in 0..children.len() {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some((node, next)) = stack.pop() {
            if let Some(&child) = children[node].get(next) {
                stack.push((node, next + 1));
                match state[child] {
                    0 => {
                        state[child] = 1;
                        stack.push((child, 0));
                    }
                    1 => return Some(child),
                    _ => {}
                }
            } else {
                state[node] = 2;
            }
        }
    }
    None
}

impl RelationGraph {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_dynasties(&self) -> usize {
        self.n_dynasties
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// Number of era nodes (dynasties plus periods).
    pub fn n_era(&self) -> usize {
        self.n_dynasties + self.n_periods
    }

    pub fn n_shapes(&self) -> usize {
        self.n_shapes
    }

    pub fn n_chars(&self) -> usize {
        self.n_chars
    }

    pub fn dynasty(&self, local: usize) -> usize {
        local
    }

    pub fn period(&self, local: usize) -> usize {
        self.n_dynasties + local
    }

    pub fn shape(&self, local: usize) -> usize {
        self.n_era() + local
    }

    pub fn characteristic(&self, local: usize) -> usize {
        self.n_era() + self.n_shapes + local
    }

    /// Index of the dynasty that subsumes period `local` (dynasties occupy
    /// the first block, so this is both the global and the local index).
    pub fn period_parent(&self, local: usize) -> usize {
        self.parents[self.period(local)][0]
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn find(&self, name: &str) -> Option<&NodeId> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn find_kind(&self, name: &str, kind: NodeKind) -> Option<usize> {
        self.nodes
            .iter()
            .find(|n| n.kind == kind && n.name == name)
            .map(|n| n.index)
    }

    pub fn excludes(&self, a: usize, b: usize) -> bool {
        self.exclusion.contains(&(a.min(b), a.max(b)))
    }

    pub fn exclusion_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.exclusion.iter().copied()
    }

    /// True if every exclusion edge is one of the mandatory within-kind edges.
    pub fn has_only_mandatory_exclusions(&self) -> bool {
        self.exclusion.iter().all(|&(a, b)| {
            let (ka, kb) = (self.nodes[a].kind, self.nodes[b].kind);
            ka == kb && ka != NodeKind::Characteristic
        })
    }

    /// Returns a copy with one more exclusion edge.
    pub fn with_exclusion(&self, a: usize, b: usize) -> Result<RelationGraph, GraphError> {
        for &x in &[a, b] {
            if x >= self.nodes.len() {
                return Err(GraphError::UnknownNode(format!("#{x}")));
            }
        }
        if self.nodes[a].kind == NodeKind::Characteristic && self.nodes[b].kind == NodeKind::Characteristic {
            return Err(GraphError::CharacteristicExclusion(
                self.nodes[a].name.clone(),
                self.nodes[b].name.clone(),
            ));
        }
        let mut g = self.clone();
        if a != b {
            g.exclusion.insert((a.min(b), a.max(b)));
        }
        Ok(g)
    }

    pub fn view(&self, scope: Scope) -> GraphView<'_> {
        GraphView::new(self, scope)
    }

    /// Inverse of [`GraphSchema::build`]; extra exclusions are preserved.
    pub fn to_schema(&self) -> GraphSchema {
        let name = |i: usize| self.nodes[i].name.clone();
        let attrs = |range: std::ops::Range<usize>| {
            range
                .map(|i| AttributeEntry {
                    name: name(i),
                    parent_periods: self.parents[i].iter().map(|&p| name(p)).collect(),
                })
                .collect()
        };
        let chars_start = self.n_era() + self.n_shapes;
        GraphSchema {
            dynasties: (0..self.n_dynasties).map(name).collect(),
            periods: (0..self.n_periods)
                .map(|p| PeriodEntry {
                    name: name(self.period(p)),
                    parent: name(self.period_parent(p)),
                })
                .collect(),
            shapes: attrs(self.n_era()..chars_start),
            characteristics: attrs(chars_start..self.nodes.len()),
            exclusions: self
                .exclusion
                .iter()
                .filter(|&&(a, b)| {
                    let (ka, kb) = (self.nodes[a].kind, self.nodes[b].kind);
                    ka != kb || ka == NodeKind::Characteristic
                })
                .map(|&(a, b)| (name(a), name(b)))
                .collect(),
        }
    }
}

/// Which state space a view realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    Era,
    EraShape,
    EraCharacteristic,
}

/// A graph restricted to the nodes of one state space.
///
/// View-local positions run over the era nodes first and then over the
/// shape or characteristic block, in global order.
#[derive(Debug, Clone)]
pub struct GraphView<'g> {
    graph: &'g RelationGraph,
    scope: Scope,
    nodes: Vec<usize>,
}

impl<'g> GraphView<'g> {
    pub fn new(graph: &'g RelationGraph, scope: Scope) -> Self {
        let era = 0..graph.n_era();
        let nodes = match scope {
            Scope::Era => era.collect(),
            Scope::EraShape => era.chain(graph.n_era()..graph.n_era() + graph.n_shapes).collect(),
            Scope::EraCharacteristic => era
                .chain(graph.n_era() + graph.n_shapes..graph.len())
                .collect(),
        };
        GraphView { graph, scope, nodes }
    }

    pub fn graph(&self) -> &'g RelationGraph {
        self.graph
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    /// Global indices of the view's nodes, in view order.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// View-local position of a global node index.
    pub fn position(&self, global: usize) -> Option<usize> {
        self.nodes.binary_search(&global).ok()
    }

    pub fn contains(&self, global: usize) -> bool {
        self.position(global).is_some()
    }
}

/// Binary labeling over a view's nodes, in view order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    pub bits: Vec<bool>,
}

impl Assignment {
    pub fn new(bits: Vec<bool>) -> Self {
        Assignment { bits }
    }

    pub fn zeros(len: usize) -> Self {
        Assignment { bits: vec![false; len] }
    }

    /// Parse a string of `0`/`1` characters.
    pub fn parse(s: &str) -> Self {
        Assignment {
            bits: s.chars().map(|c| c == '1').collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl std::fmt::Display for Assignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Checks exclusion and subsumption constraints inside the view.
///
/// A child is satisfied when at least one of its in-view parents is active.
pub fn is_legal(view: &GraphView<'_>, a: &Assignment) -> Result<bool, GraphError> {
    if a.len() != view.len() {
        return Err(GraphError::LengthMismatch {
            expected: view.len(),
            got: a.len(),
        });
    }
    Ok(is_legal_unchecked(view, &a.bits))
}

pub(crate) fn is_legal_unchecked(view: &GraphView<'_>, bits: &[bool]) -> bool {
    let g = view.graph;
    let active: Vec<usize> = bits
        .iter()
        .zip(&view.nodes)
        .filter(|(b, _)| **b)
        .map(|(_, &n)| n)
        .collect();
    for (i, &a) in active.iter().enumerate() {
        if active[i + 1..].iter().any(|&b| g.excludes(a, b)) {
            return false;
        }
        let in_view: Vec<usize> = g.parents[a].iter().copied().filter(|&p| view.contains(p)).collect();
        if !in_view.is_empty() && !in_view.iter().any(|p| active.binary_search(p).is_ok()) {
            return false;
        }
    }
    true
}

/// Every legal assignment of the view, in lexicographic order of the bit
/// strings (first view node is the most significant position).
pub fn enumerate_legal(view: &GraphView<'_>) -> Result<Vec<Assignment>, GraphError> {
    enumerate_legal_capped(view, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_legal_capped(view: &GraphView<'_>, cap: usize) -> Result<Vec<Assignment>, GraphError> {
    let n = view.len();
    if n > cap || n >= usize::BITS as usize {
        return Err(GraphError::TooLarge { nodes: n, cap });
    }
    let mut out = Vec::new();
    let mut bits = vec![false; n];
    for code in 0u64..(1u64 << n) {
        for (i, b) in bits.iter_mut().enumerate() {
            *b = code >> (n - 1 - i) & 1 == 1;
        }
        if is_legal_unchecked(view, &bits) {
            out.push(Assignment::new(bits.clone()));
        }
    }
    Ok(out)
}

/// The four-dynasty, eleven-period era hierarchy of the bronze ding corpus.
pub fn bronze_ding_eras() -> GraphSpec {
    let eras: [(&str, &[&str]); 4] = [
        ("Shang", &["Early Shang", "Late Shang"]),
        ("Western Zhou", &["Early Western Zhou", "Mid Western Zhou", "Late Western Zhou"]),
        (
            "Spring and Autumn",
            &["Early Spring and Autumn", "Mid Spring and Autumn", "Late Spring and Autumn"],
        ),
        (
            "Warring States",
            &["Early Warring States", "Mid Warring States", "Late Warring States"],
        ),
    ];
    let mut spec = GraphSpec::default();
    for (dynasty, periods) in eras {
        spec = spec.node(dynasty, NodeKind::Dynasty);
        for &p in periods {
            spec = spec.node(p, NodeKind::Period).edge(dynasty, p);
        }
    }
    spec
}

/// Random hierarchy for property tests and benchmarks.
///
/// Every shape and characteristic gets between one and three period parents.
pub fn random_graph<R: rand::Rng + ?Sized>(
    rng: &mut R,
    n_dynasties: usize,
    n_periods: usize,
    n_shapes: usize,
    n_chars: usize,
) -> RelationGraph {
    assert!(n_dynasties >= 1 && n_periods >= n_dynasties);
    let mut spec = GraphSpec::default();
    for d in 0..n_dynasties {
        spec = spec.node(format!("d{d}"), NodeKind::Dynasty);
    }
    for p in 0..n_periods {
        // Cover every dynasty once before assigning the rest at random.
        let d = if p < n_dynasties { p } else { rng.random_range(0..n_dynasties) };
        spec = spec.node(format!("p{p}"), NodeKind::Period).edge(format!("d{d}"), format!("p{p}"));
    }
    for (prefix, count, kind) in [
        ("s", n_shapes, NodeKind::Shape),
        ("c", n_chars, NodeKind::Characteristic),
    ] {
        for i in 0..count {
            let name = format!("{prefix}{i}");
            spec = spec.node(name.clone(), kind);
            let k = rng.random_range(1..=n_periods.min(3));
            let mut chosen = BTreeSet::new();
            while chosen.len() < k {
                chosen.insert(rng.random_range(0..n_periods));
            }
            for p in chosen {
                spec = spec.edge(format!("p{p}"), name.clone());
            }
        }
    }
    build_graph(&spec).expect("random hierarchy is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_dynasties() -> RelationGraph {
        let spec = GraphSpec::default()
            .node("A", NodeKind::Dynasty)
            .node("B", NodeKind::Dynasty)
            .node("p1", NodeKind::Period)
            .node("p2", NodeKind::Period)
            .node("p3", NodeKind::Period)
            .edge("A", "p1")
            .edge("A", "p2")
            .edge("B", "p3");
        build_graph(&spec).unwrap()
    }

    fn chain() -> RelationGraph {
        let spec = GraphSpec::default()
            .node("d", NodeKind::Dynasty)
            .node("p", NodeKind::Period)
            .node("s", NodeKind::Shape)
            .edge("d", "p")
            .edge("p", "s");
        build_graph(&spec).unwrap()
    }

    #[test]
    fn bronze_ding_hierarchy_has_fifteen_era_nodes() {
        let g = build_graph(&bronze_ding_eras()).unwrap();
        assert_eq!(g.n_dynasties(), 4);
        assert_eq!(g.n_periods(), 11);
        assert_eq!(g.n_era(), 15);
        assert_eq!(g.view(Scope::Era).len(), 15);
    }

    #[test]
    fn minimal_graph() {
        let spec = GraphSpec::default()
            .node("d", NodeKind::Dynasty)
            .node("p", NodeKind::Period)
            .edge("d", "p");
        let g = build_graph(&spec).unwrap();
        assert_eq!((g.n_era(), g.n_shapes(), g.n_chars()), (2, 0, 0));
    }

    #[test]
    fn period_with_two_dynasties_is_rejected() {
        let spec = GraphSpec::default()
            .node("A", NodeKind::Dynasty)
            .node("B", NodeKind::Dynasty)
            .node("p", NodeKind::Period)
            .edge("A", "p")
            .edge("B", "p");
        assert_eq!(
            build_graph(&spec),
            Err(GraphError::Orphan {
                node: "p".into(),
                reason: "multiple dynasty parents"
            })
        );
    }

    #[test]
    fn structural_errors() {
        let dup = GraphSpec::default().node("x", NodeKind::Dynasty).node("x", NodeKind::Period);
        assert_eq!(build_graph(&dup), Err(GraphError::DuplicateNode("x".into())));

        let orphan = GraphSpec::default()
            .node("d", NodeKind::Dynasty)
            .node("p", NodeKind::Period)
            .edge("d", "p")
            .node("s", NodeKind::Shape);
        assert!(matches!(build_graph(&orphan), Err(GraphError::Orphan { .. })));

        let cyclic = GraphSpec::default()
            .node("d", NodeKind::Dynasty)
            .node("p", NodeKind::Period)
            .edge("d", "p")
            .edge("p", "d");
        assert!(matches!(build_graph(&cyclic), Err(GraphError::Cycle(_))));

        let unknown = GraphSpec::default().node("d", NodeKind::Dynasty).edge("d", "nope");
        assert_eq!(build_graph(&unknown), Err(GraphError::UnknownNode("nope".into())));
    }

    #[test]
    fn mandatory_exclusions_are_inserted() {
        let g = chain();
        let g2 = build_graph(
            &GraphSpec::default()
                .node("d", NodeKind::Dynasty)
                .node("p", NodeKind::Period)
                .node("q", NodeKind::Period)
                .node("s", NodeKind::Shape)
                .node("t", NodeKind::Shape)
                .node("c", NodeKind::Characteristic)
                .node("e", NodeKind::Characteristic)
                .edge("d", "p")
                .edge("d", "q")
                .edge("p", "s")
                .edge("q", "t")
                .edge("p", "c")
                .edge("p", "e"),
        )
        .unwrap();
        assert!(g.has_only_mandatory_exclusions());
        let (p, q) = (g2.period(0), g2.period(1));
        let (s, t) = (g2.shape(0), g2.shape(1));
        let (c, e) = (g2.characteristic(0), g2.characteristic(1));
        assert!(g2.excludes(p, q));
        assert!(g2.excludes(s, t));
        assert!(!g2.excludes(c, e));
        assert!(matches!(g2.with_exclusion(c, e), Err(GraphError::CharacteristicExclusion(..))));
    }

    #[test]
    fn legality_examples() {
        let g = two_dynasties();
        let v = g.view(Scope::Era);
        assert!(is_legal(&v, &Assignment::zeros(5)).unwrap());
        // A, p1, p2 active: two periods
        assert!(!is_legal(&v, &Assignment::parse("10110")).unwrap());
        // p1 without its dynasty
        assert!(!is_legal(&v, &Assignment::parse("00100")).unwrap());
        assert_eq!(
            is_legal(&v, &Assignment::zeros(3)),
            Err(GraphError::LengthMismatch { expected: 5, got: 3 })
        );
    }

    #[test]
    fn enumeration_examples() {
        let g = two_dynasties();
        let legal: Vec<String> = enumerate_legal(&g.view(Scope::Era))
            .unwrap()
            .iter()
            .map(|a| a.to_string())
            .collect();
        // order: A B p1 p2 p3
        assert_eq!(legal, ["00000", "01000", "01001", "10000", "10010", "10100"]);

        let spec = GraphSpec::default()
            .node("d", NodeKind::Dynasty)
            .node("p", NodeKind::Period)
            .edge("d", "p");
        let g = build_graph(&spec).unwrap();
        let legal: Vec<String> = enumerate_legal(&g.view(Scope::Era))
            .unwrap()
            .iter()
            .map(|a| a.to_string())
            .collect();
        assert_eq!(legal, ["00", "10", "11"]);

        let legal: Vec<String> = enumerate_legal(&chain().view(Scope::EraShape))
            .unwrap()
            .iter()
            .map(|a| a.to_string())
            .collect();
        assert_eq!(legal, ["000", "100", "110", "111"]);
    }

    #[test]
    fn enumeration_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 3, 8, 4, 12);
        assert!(matches!(
            enumerate_legal(&g.view(Scope::EraCharacteristic)),
            Err(GraphError::TooLarge { nodes: 23, cap: 20 })
        ));
    }

    #[test]
    fn schema_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 2, 5, 3, 4);
        let schema = g.to_schema();
        assert_eq!(schema.build().unwrap(), g);
        let json = serde_json::to_string(&schema).unwrap();
        let back: GraphSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(back, schema);
    }
}
