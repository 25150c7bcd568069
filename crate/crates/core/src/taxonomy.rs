//! The class tree: labeled nodes under a single virtual root.
//!
//! Nodes get dense integer ids at load time, assigned level-major in file
//! order, so model heads and metric code can index flat arrays by id. The
//! virtual root has no id; it appears in APIs as `None`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const ROOT_TOKEN: &str = "*";

/// Dense id of one taxonomy node. Ids are contiguous from zero and ordered
/// level-major, ties broken by definition order in the source file.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy io: {0}")]
    Io(#[from] std::io::Error),
    #[error("taxonomy line {line}: expected `child<TAB>parent`, got `{text}`")]
    MalformedLine { line: usize, text: String },
    #[error("taxonomy defines no nodes")]
    Empty,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("node `{child}` names unknown parent `{parent}`")]
    UnknownParent { child: String, parent: String },
    #[error("cycle through `{0}`")]
    Cycle(String),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("label path of length {got} exceeds taxonomy depth {depth}")]
    PathTooDeep { got: usize, depth: usize },
}

/// First rule a label path breaks, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathViolation {
    LengthMismatch { got: usize, depth: usize },
    EmptyPath,
    UnknownNode { level: usize },
    WrongLevel { level: usize, node_level: usize },
    NonContiguous { level: usize },
    NotChild { level: usize },
}

impl fmt::Display for PathViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathViolation::LengthMismatch { got, depth } => {
                write!(f, "path has {} levels, taxonomy depth is {}", got, depth)
            }
            PathViolation::EmptyPath => write!(f, "path has no labels"),
            PathViolation::UnknownNode { level } => {
                write!(f, "level {}: node id not in taxonomy", level)
            }
            PathViolation::WrongLevel { level, node_level } => {
                write!(f, "level {}: node belongs to level {}", level, node_level)
            }
            PathViolation::NonContiguous { level } => {
                write!(f, "level {}: label after an absent level", level)
            }
            PathViolation::NotChild { level } => {
                write!(f, "level {}: node is not a child of the level above", level)
            }
        }
    }
}

/// Root-to-leaf label assignment for one record: one entry per taxonomy
/// level, `None` marking absent levels below the labeled prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPath {
    entries: Vec<Option<NodeId>>,
}

impl LabelPath {
    pub fn new(entries: Vec<Option<NodeId>>) -> Self {
        LabelPath { entries }
    }

    pub fn entries(&self) -> &[Option<NodeId>] {
        &self.entries
    }

    /// Node at `level` (1-based), if labeled.
    pub fn at_level(&self, level: usize) -> Option<NodeId> {
        self.entries.get(level - 1).copied().flatten()
    }

    /// Number of labeled levels (length of the filled prefix).
    pub fn filled_depth(&self) -> usize {
        self.entries.iter().take_while(|e| e.is_some()).count()
    }

    /// Deepest labeled node.
    pub fn leaf(&self) -> Option<NodeId> {
        self.entries.iter().rev().find_map(|e| *e)
    }

    /// Same path cut to the first `k` levels, keeping overall length.
    pub fn truncated(&self, k: usize) -> LabelPath {
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| if i < k { *e } else { None })
            .collect();
        LabelPath { entries }
    }
}

/// Immutable class tree. Construct with [`Taxonomy::load`] or
/// [`Taxonomy::from_tsv_str`]; freely shareable afterwards.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    labels: Vec<String>,
    parents: Vec<Option<NodeId>>,
    levels_of: Vec<u32>,
    children: Vec<Vec<NodeId>>,
    by_level: Vec<Vec<NodeId>>,
    label_to_id: HashMap<String, NodeId>,
    digest: String,
}

impl Taxonomy {
    /// Parses `child_label<TAB>parent_label` lines; `*` denotes the root.
    /// Blank lines are skipped; definitions may reference parents defined on
    /// later lines.
    pub fn from_tsv_str(text: &str) -> Result<Self, TaxonomyError> {
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (child, parent) = match (fields.next(), fields.next(), fields.next()) {
                (Some(c), Some(p), None) if !c.is_empty() && !p.is_empty() && c != ROOT_TOKEN => {
                    (c, p)
                }
                _ => {
                    return Err(TaxonomyError::MalformedLine {
                        line: i + 1,
                        text: line.to_string(),
                    })
                }
            };
            edges.push((child.to_string(), parent.to_string()));
        }
        Self::from_edges(edges)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        Self::from_tsv_str(&std::fs::read_to_string(path)?)
    }

    /// Builds the tree from (child, parent) label pairs; parent `*` attaches
    /// a node to the root.
    pub fn from_edges(edges: Vec<(String, String)>) -> Result<Self, TaxonomyError> {
        if edges.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let n = edges.len();
        let mut def_index: HashMap<&str, usize> = HashMap::with_capacity(n);
        for (i, (child, _)) in edges.iter().enumerate() {
            if def_index.insert(child.as_str(), i).is_some() {
                return Err(TaxonomyError::DuplicateLabel(child.clone()));
            }
        }

        // Resolve levels by walking parent chains; a revisit within one walk
        // is a cycle, a parent label with no definition is a broken forest.
        let mut level = vec![0u32; n];
        for start in 0..n {
            if level[start] != 0 {
                continue;
            }
            let mut chain = Vec::new();
            let mut on_chain = HashMap::new();
            let mut cur = start;
            let base = loop {
                if level[cur] != 0 {
                    break level[cur];
                }
                if on_chain.insert(cur, ()).is_some() {
                    return Err(TaxonomyError::Cycle(edges[cur].0.clone()));
                }
                chain.push(cur);
                let parent = edges[cur].1.as_str();
                if parent == ROOT_TOKEN {
                    break 0;
                }
                cur = *def_index.get(parent).ok_or_else(|| {
                    TaxonomyError::UnknownParent {
                        child: edges[cur].0.clone(),
                        parent: parent.to_string(),
                    }
                })?;
            };
            let mut lv = base;
            for &node in chain.iter().rev() {
                lv += 1;
                level[node] = lv;
            }
        }

        // Dense ids: level-major, definition order within a level.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (level[i], i));
        let mut id_of_def = vec![NodeId(0); n];
        for (id, &def) in order.iter().enumerate() {
            id_of_def[def] = NodeId(id as u32);
        }

        let depth = level.iter().copied().max().unwrap() as usize;
        let mut labels = vec![String::new(); n];
        let mut parents = vec![None; n];
        let mut levels_of = vec![0u32; n];
        let mut children = vec![Vec::new(); n];
        let mut by_level = vec![Vec::new(); depth];
        let mut label_to_id = HashMap::with_capacity(n);
        for &def in &order {
            let id = id_of_def[def];
            let (child, parent) = &edges[def];
            labels[id.index()] = child.clone();
            levels_of[id.index()] = level[def];
            by_level[level[def] as usize - 1].push(id);
            label_to_id.insert(child.clone(), id);
            if parent != ROOT_TOKEN {
                let pid = id_of_def[def_index[parent.as_str()]];
                parents[id.index()] = Some(pid);
                children[pid.index()].push(id);
            }
        }

        let mut hasher = Sha256::new();
        for id in 0..n {
            hasher.update(labels[id].as_bytes());
            hasher.update(b"\t");
            match parents[id] {
                Some(p) => hasher.update(labels[p.index()].as_bytes()),
                None => hasher.update(ROOT_TOKEN.as_bytes()),
            }
            hasher.update(b"\n");
        }
        let digest = hex_string(&hasher.finalize());

        Ok(Taxonomy {
            labels,
            parents,
            levels_of,
            children,
            by_level,
            label_to_id,
            digest,
        })
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    /// Maximum level.
    pub fn depth(&self) -> usize {
        self.by_level.len()
    }

    /// SHA-256 over the canonical (id-ordered) edge list, as lowercase hex.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// The tree in its TSV form; parents precede children (id order), so
    /// the output re-ingests into an identical taxonomy.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (label, parent) in self.labels.iter().zip(&self.parents) {
            let parent = match parent {
                Some(p) => &self.labels[p.index()],
                None => "*",
            };
            out.push_str(label);
            out.push('\t');
            out.push_str(parent);
            out.push('\n');
        }
        out
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.index() < self.labels.len()
    }

    pub fn label(&self, node: NodeId) -> Result<&str, TaxonomyError> {
        self.check(node)?;
        Ok(&self.labels[node.index()])
    }

    pub fn id_of(&self, label: &str) -> Option<NodeId> {
        self.label_to_id.get(label).copied()
    }

    /// Parent id; `None` means the parent is the root.
    pub fn parent(&self, node: NodeId) -> Result<Option<NodeId>, TaxonomyError> {
        self.check(node)?;
        Ok(self.parents[node.index()])
    }

    /// 1-based level of a node.
    pub fn level(&self, node: NodeId) -> Result<usize, TaxonomyError> {
        self.check(node)?;
        Ok(self.levels_of[node.index()] as usize)
    }

    pub fn children(&self, node: NodeId) -> Result<&[NodeId], TaxonomyError> {
        self.check(node)?;
        Ok(&self.children[node.index()])
    }

    /// Ids at `level` (1-based), ascending.
    pub fn nodes_at_level(&self, level: usize) -> &[NodeId] {
        match self.by_level.get(level.wrapping_sub(1)) {
            Some(ids) => ids,
            None => &[],
        }
    }

    /// Class count of one level; heads are sized from this.
    pub fn class_count(&self, level: usize) -> usize {
        self.nodes_at_level(level).len()
    }

    /// The node plus all proper ancestors, root excluded, ordered deepest
    /// first. Its length equals the node's level.
    pub fn anc_set(&self, node: NodeId) -> Result<Vec<NodeId>, TaxonomyError> {
        self.check(node)?;
        let mut out = Vec::with_capacity(self.levels_of[node.index()] as usize);
        let mut cur = Some(node);
        while let Some(id) = cur {
            out.push(id);
            cur = self.parents[id.index()];
        }
        Ok(out)
    }

    /// Deepest node on both root paths; `None` when only the root is shared.
    pub fn lca(&self, a: NodeId, b: NodeId) -> Result<Option<NodeId>, TaxonomyError> {
        self.check(a)?;
        self.check(b)?;
        let mut x = Some(a);
        let mut y = Some(b);
        let (mut lx, mut ly) = (self.level(a)?, self.level(b)?);
        while lx > ly {
            x = self.parents[x.unwrap().index()];
            lx -= 1;
        }
        while ly > lx {
            y = self.parents[y.unwrap().index()];
            ly -= 1;
        }
        while x != y {
            x = self.parents[x.unwrap().index()];
            y = self.parents[y.unwrap().index()];
        }
        Ok(x)
    }

    /// Resolves labels to a path, padding absent levels. Linkage is not
    /// checked here; run [`Taxonomy::validate_path`] on the result.
    pub fn path_from_labels(&self, labels: &[&str]) -> Result<LabelPath, TaxonomyError> {
        if labels.len() > self.depth() {
            return Err(TaxonomyError::PathTooDeep {
                got: labels.len(),
                depth: self.depth(),
            });
        }
        let mut entries = vec![None; self.depth()];
        for (i, label) in labels.iter().enumerate() {
            let id = self
                .id_of(label)
                .ok_or_else(|| TaxonomyError::UnknownLabel(label.to_string()))?;
            entries[i] = Some(id);
        }
        Ok(LabelPath::new(entries))
    }

    /// Full path from the root down to `node`, absent below its level.
    pub fn path_to(&self, node: NodeId) -> Result<LabelPath, TaxonomyError> {
        let mut entries = vec![None; self.depth()];
        for id in self.anc_set(node)? {
            entries[self.level(id)? - 1] = Some(id);
        }
        Ok(LabelPath::new(entries))
    }

    /// First violated path rule, or Ok. Violations are data errors, so they
    /// are reported as a value rather than a hard error.
    pub fn validate_path(&self, path: &LabelPath) -> Result<(), PathViolation> {
        let entries = path.entries();
        if entries.len() != self.depth() {
            return Err(PathViolation::LengthMismatch {
                got: entries.len(),
                depth: self.depth(),
            });
        }
        let mut seen_absent_at = None;
        let mut prev: Option<NodeId> = None;
        for (i, entry) in entries.iter().enumerate() {
            let level = i + 1;
            match entry {
                None => {
                    seen_absent_at.get_or_insert(level);
                }
                Some(id) => {
                    if seen_absent_at.is_some() {
                        return Err(PathViolation::NonContiguous { level });
                    }
                    if !self.contains(*id) {
                        return Err(PathViolation::UnknownNode { level });
                    }
                    let node_level = self.levels_of[id.index()] as usize;
                    if node_level != level {
                        return Err(PathViolation::WrongLevel { level, node_level });
                    }
                    if self.parents[id.index()] != prev {
                        return Err(PathViolation::NotChild { level });
                    }
                    prev = Some(*id);
                }
            }
        }
        if prev.is_none() {
            return Err(PathViolation::EmptyPath);
        }
        Ok(())
    }

    fn check(&self, node: NodeId) -> Result<(), TaxonomyError> {
        if self.contains(node) {
            Ok(())
        } else {
            Err(TaxonomyError::UnknownNode(node))
        }
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{:02x}", b));
    }
    out
}
