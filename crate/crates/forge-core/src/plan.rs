//! Bottom-up task planning over the design tree.
//!
//! Produces the ordered, deduplicated module-generation sequence by post-order
//! traversal from the root. Structurally repeated subtrees are bypassed by
//! normalizing module names to a canonical key, so a module type instantiated
//! many times is generated exactly once, always before any module that
//! depends on it.

use crate::ir::{extract_parent_child_pairs, ChildRef, DesignArchitectureGraph, IrError};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Ordered module-generation tasks plus the instance paths each task covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    /// Module names in generation order; every child precedes its parent and
    /// the root is last.
    pub tasks: Vec<String>,
    pub provenance: IndexMap<String, Vec<String>>,
}

/// Canonical key used to recognize repeated module types: lowercased module
/// name with trailing `_<digits>` instance-index suffixes stripped.
pub fn canonical_module_key(module_name: &str) -> String {
    let mut key = module_name.to_ascii_lowercase();
    loop {
        let Some(pos) = key.rfind('_') else { break };
        let suffix = &key[pos + 1..];
        if !suffix.is_empty() && suffix.chars().all(|c| c.is_ascii_digit()) {
            key.truncate(pos);
        } else {
            break;
        }
    }
    key
}

/// Deduplicates children by canonical module key, keeping the first
/// occurrence and otherwise preserving order.
pub fn normalize_children(children: &[ChildRef]) -> Vec<ChildRef> {
    let mut seen = BTreeSet::new();
    children
        .iter()
        .filter(|c| seen.insert(canonical_module_key(&c.module_name)))
        .cloned()
        .collect()
}

/// Post-order traversal from `node`, appending each module exactly once after
/// all of its (normalized) children. Already-visited canonical keys yield
/// nothing, so shared subtrees are emitted a single time.
pub fn build_sequence(
    pairs: &[(String, ChildRef)],
    node: &str,
    visited: &mut BTreeSet<String>,
) -> Vec<String> {
    if !visited.insert(canonical_module_key(node)) {
        return Vec::new();
    }
    let children: Vec<ChildRef> = pairs
        .iter()
        .filter(|(p, _)| p == node)
        .map(|(_, c)| c.clone())
        .collect();
    let mut seq = Vec::new();
    for child in normalize_children(&children) {
        seq.extend(build_sequence(pairs, &child.module_name, visited));
    }
    seq.push(node.to_string());
    seq
}

/// Derives the optimized bottom-up task sequence for a validated graph.
pub fn plan(graph: &DesignArchitectureGraph) -> Result<TaskSequence, IrError> {
    let tree = extract_parent_child_pairs(graph)?;
    let mut visited = BTreeSet::new();
    let tasks = build_sequence(&tree.parent_child_pairs, &tree.root, &mut visited);

    let paths_by_module = graph.instance_paths(&tree.root);
    let mut provenance: IndexMap<String, Vec<String>> = IndexMap::new();
    for task in &tasks {
        let key = canonical_module_key(task);
        let mut covered: Vec<String> = paths_by_module
            .iter()
            .filter(|(module, _)| canonical_module_key(module) == key)
            .flat_map(|(_, paths)| paths.iter().cloned())
            .collect();
        covered.sort();
        provenance.insert(task.clone(), covered);
    }
    Ok(TaskSequence { tasks, provenance })
}
