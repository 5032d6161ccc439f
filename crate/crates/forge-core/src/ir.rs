//! Design IR: module descriptions plus the design architecture graph.
//!
//! The IR is the contract between specification standardization and every
//! later stage. One [`ModuleIR`] describes a single hardware module (ports,
//! parameters, child instances, functional points); the
//! [`DesignArchitectureGraph`] ties the modules together with typed
//! connection edges. The on-disk format is a UTF-8 JSON document with
//! top-level keys `design_name`, `module_irs` and `edges`; unknown keys are
//! rejected.

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Errors raised while parsing, validating or traversing the design IR.
#[derive(Debug, Error)]
pub enum IrError {
    /// The document is not well-formed (bad JSON, unknown keys, wrong shapes).
    #[error("schema error: {0}")]
    Schema(String),
    /// A structural invariant is violated; `path` points at the offending field.
    #[error("validation error at {path}: {message}")]
    Validation { path: String, message: String },
    /// The child-module references form a cycle.
    #[error("cyclic module hierarchy: {0}")]
    Cycle(String),
    /// Root identification found zero or more than one candidate.
    #[error("expected exactly one root module, found {}: [{}]", roots.len(), roots.join(", "))]
    MultiRoot { roots: Vec<String> },
    /// The design contains no modules at all.
    #[error("design contains no modules")]
    EmptyDesign,
}

impl IrError {
    fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        IrError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Signal direction of a module port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortDirection {
    Input,
    Output,
    Inout,
}

impl fmt::Display for PortDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortDirection::Input => write!(f, "input"),
            PortDirection::Output => write!(f, "output"),
            PortDirection::Inout => write!(f, "inout"),
        }
    }
}

/// One port signal of a module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortDecl {
    pub name: String,
    pub direction: PortDirection,
    /// Bit width; at least 1.
    pub width: u32,
    #[serde(default)]
    pub description: String,
}

/// Value of a module parameter: an integer or a literal string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Str(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Str(v) => write!(f, "{v}"),
        }
    }
}

/// A named compile-time parameter of a module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterDecl {
    pub name: String,
    pub value: ParamValue,
    #[serde(default)]
    pub description: String,
}

/// Whether a functional point describes combinational or sequential behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    Combinational,
    Sequential,
}

/// One atomic described behavior of a module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalPoint {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub behavior: String,
    pub timing: Timing,
    /// Port or internal-signal names this behavior touches.
    #[serde(default)]
    pub signals: Vec<String>,
}

/// A child-module instantiation inside a parent module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChildRef {
    pub instance_name: String,
    pub module_name: String,
}

/// Standardized description of one hardware module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleIR {
    pub module_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ParameterDecl>,
    pub ports: Vec<PortDecl>,
    #[serde(default)]
    pub children_modules: Vec<ChildRef>,
    #[serde(default)]
    pub functional_points: Vec<FunctionalPoint>,
    /// Estimated implementation size in source lines; 0 when unknown.
    #[serde(default)]
    pub estimated_lines: u32,
}

impl ModuleIR {
    pub fn port_names(&self) -> impl Iterator<Item = &str> {
        self.ports.iter().map(|p| p.name.as_str())
    }

    pub fn has_port(&self, name: &str) -> bool {
        self.ports.iter().any(|p| p.name == name)
    }

    pub fn child(&self, instance_name: &str) -> Option<&ChildRef> {
        self.children_modules
            .iter()
            .find(|c| c.instance_name == instance_name)
    }
}

/// How a connection edge attaches to the parent side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// Parent endpoint is a declared port of the parent module.
    Port,
    /// Parent endpoint is a label for the parent's internal logic.
    Inter,
}

/// A typed connection between a parent instance and one of its children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionEdge {
    /// Slash-separated instance path of the parent, starting at a module name
    /// (e.g. `Conv2D` or `Conv2D/stage_inst`).
    pub parent_instance_path: String,
    pub child_instance: String,
    pub kind: EdgeKind,
    /// Port name (kind=port) or internal-logic label (kind=inter).
    pub parent_endpoint: String,
    pub child_port: String,
    #[serde(default)]
    pub note: String,
}

/// The full design: every module IR plus the connection edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignArchitectureGraph {
    pub design_name: String,
    #[serde(deserialize_with = "deserialize_module_map")]
    pub module_irs: IndexMap<String, ModuleIR>,
    #[serde(default)]
    pub edges: Vec<ConnectionEdge>,
}

/// Module-level parent/child relation with an identified root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTree {
    pub root: String,
    /// One entry per ChildRef of every module: (parent module name, child ref).
    pub parent_child_pairs: Vec<(String, ChildRef)>,
}

impl DesignTree {
    /// Child refs of `module`, in declaration order.
    pub fn children_of(&self, module: &str) -> Vec<&ChildRef> {
        self.parent_child_pairs
            .iter()
            .filter(|(p, _)| p == module)
            .map(|(_, c)| c)
            .collect()
    }
}

// Duplicate module names in the JSON object are rejected rather than silently
// overwritten; merging two definitions of the same module is never safe.
fn deserialize_module_map<'de, D>(deserializer: D) -> Result<IndexMap<String, ModuleIR>, D::Error>
where
    D: Deserializer<'de>,
{
    struct ModuleMapVisitor;

    impl<'de> Visitor<'de> for ModuleMapVisitor {
        type Value = IndexMap<String, ModuleIR>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a map of module_name to module IR")
        }

        fn visit_map<A>(self, mut access: A) -> Result<Self::Value, A::Error>
        where
            A: MapAccess<'de>,
        {
            let mut out = IndexMap::with_capacity(access.size_hint().unwrap_or(0));
            while let Some((key, value)) = access.next_entry::<String, ModuleIR>()? {
                if out.insert(key.clone(), value).is_some() {
                    return Err(serde::de::Error::custom(format!(
                        "duplicate module_irs key \"{key}\""
                    )));
                }
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(ModuleMapVisitor)
}

/// Parses and validates a design IR document.
pub fn parse_design_ir(text: &str) -> Result<DesignArchitectureGraph, IrError> {
    let graph: DesignArchitectureGraph =
        serde_json::from_str(text).map_err(|e| IrError::Schema(e.to_string()))?;
    graph.validate()?;
    Ok(graph)
}

/// Serializes a validated graph as a pretty-printed JSON document.
///
/// Round-trip stable: `parse_design_ir(&serialize_design_ir(&g))` is
/// structurally equal to `g`.
pub fn serialize_design_ir(graph: &DesignArchitectureGraph) -> String {
    serde_json::to_string_pretty(graph).expect("design graph serializes")
}

impl DesignArchitectureGraph {
    /// Checks every structural invariant: per-module rules, dangling child
    /// references, hierarchy acyclicity and edge endpoint validity.
    ///
    /// Root uniqueness is deliberately not checked here; it is established
    /// during tree construction ([`extract_parent_child_pairs`]).
    pub fn validate(&self) -> Result<(), IrError> {
        for (key, module) in &self.module_irs {
            validate_module(key, module, &self.module_irs)?;
        }
        if let Some(cycle) = find_module_cycle(&self.module_irs) {
            return Err(IrError::validation(
                "module_irs",
                format!("child references form a cycle: {}", cycle.join(" -> ")),
            ));
        }
        for (i, edge) in self.edges.iter().enumerate() {
            self.validate_edge(edge)
                .map_err(|message| IrError::validation(format!("edges[{i}]"), message))?;
        }
        Ok(())
    }

    fn validate_edge(&self, edge: &ConnectionEdge) -> Result<(), String> {
        let parent = self
            .resolve_instance_path(&edge.parent_instance_path)
            .ok_or_else(|| {
                format!(
                    "parent_instance_path \"{}\" does not resolve to a module",
                    edge.parent_instance_path
                )
            })?;
        let child_ref = parent.child(&edge.child_instance).ok_or_else(|| {
            format!(
                "child_instance \"{}\" is not instantiated by module \"{}\"",
                edge.child_instance, parent.module_name
            )
        })?;
        let child = self.module_irs.get(&child_ref.module_name).ok_or_else(|| {
            format!("child module \"{}\" has no IR entry", child_ref.module_name)
        })?;
        if edge.kind == EdgeKind::Port && !parent.has_port(&edge.parent_endpoint) {
            return Err(format!(
                "kind=port but parent_endpoint \"{}\" is not a declared port of \"{}\"",
                edge.parent_endpoint, parent.module_name
            ));
        }
        if !child.has_port(&edge.child_port) {
            return Err(format!(
                "child_port \"{}\" is not a declared port of \"{}\"",
                edge.child_port, child.module_name
            ));
        }
        Ok(())
    }

    /// Resolves a slash-separated instance path to the module it denotes.
    /// The first segment is a module name; each further segment an instance.
    pub fn resolve_instance_path(&self, path: &str) -> Option<&ModuleIR> {
        let mut segments = path.split('/');
        let mut current = self.module_irs.get(segments.next()?)?;
        for inst in segments {
            let child_ref = current.child(inst)?;
            current = self.module_irs.get(&child_ref.module_name)?;
        }
        Some(current)
    }

    /// All instance paths per module type, walking the instance tree from
    /// `root`. The root itself has path equal to its module name.
    pub fn instance_paths(&self, root: &str) -> IndexMap<String, Vec<String>> {
        let mut paths: IndexMap<String, Vec<String>> = IndexMap::new();
        let mut stack = vec![(root.to_string(), root.to_string())];
        while let Some((module, path)) = stack.pop() {
            paths.entry(module.clone()).or_default().push(path.clone());
            if let Some(ir) = self.module_irs.get(&module) {
                // reversed so children come off the stack in declaration order
                for child in ir.children_modules.iter().rev() {
                    stack.push((
                        child.module_name.clone(),
                        format!("{path}/{}", child.instance_name),
                    ));
                }
            }
        }
        for v in paths.values_mut() {
            v.sort();
        }
        paths
    }

    /// Edges whose parent instance resolves to `module`.
    pub fn edges_for_parent_module(&self, module: &str) -> Vec<&ConnectionEdge> {
        self.edges
            .iter()
            .filter(|e| {
                self.resolve_instance_path(&e.parent_instance_path)
                    .map(|m| m.module_name == module)
                    .unwrap_or(false)
            })
            .collect()
    }
}

fn validate_module(
    key: &str,
    module: &ModuleIR,
    all: &IndexMap<String, ModuleIR>,
) -> Result<(), IrError> {
    let base = format!("module_irs.{key}");
    if module.module_name.is_empty() {
        return Err(IrError::validation(
            format!("{base}.module_name"),
            "module_name must be nonempty",
        ));
    }
    if key != module.module_name {
        return Err(IrError::validation(
            format!("{base}.module_name"),
            format!(
                "map key \"{key}\" does not match module_name \"{}\"",
                module.module_name
            ),
        ));
    }
    if module.ports.is_empty() {
        return Err(IrError::validation(
            format!("{base}.ports"),
            "a module must declare at least one port",
        ));
    }
    let mut port_names = BTreeSet::new();
    for (i, port) in module.ports.iter().enumerate() {
        let path = format!("{base}.ports[{i}]");
        if port.name.is_empty() {
            return Err(IrError::validation(path, "port name must be nonempty"));
        }
        if port.width < 1 {
            return Err(IrError::validation(
                format!("{path}.width"),
                format!("width of port \"{}\" must be >= 1", port.name),
            ));
        }
        if !port_names.insert(port.name.as_str()) {
            return Err(IrError::validation(
                format!("{path}.name"),
                format!("duplicate port name \"{}\"", port.name),
            ));
        }
    }
    let mut param_names = BTreeSet::new();
    for (i, param) in module.parameters.iter().enumerate() {
        if !param_names.insert(param.name.as_str()) {
            return Err(IrError::validation(
                format!("{base}.parameters[{i}].name"),
                format!("duplicate parameter name \"{}\"", param.name),
            ));
        }
    }
    let mut fp_ids = BTreeSet::new();
    for (i, fp) in module.functional_points.iter().enumerate() {
        let path = format!("{base}.functional_points[{i}]");
        if !fp_ids.insert(fp.id.as_str()) {
            return Err(IrError::validation(
                format!("{path}.id"),
                format!("duplicate functional point id \"{}\"", fp.id),
            ));
        }
        // A signals entry that differs from a declared port only by case is a
        // mistyped port reference; entries matching no port are internal nets.
        for (j, signal) in fp.signals.iter().enumerate() {
            let near_miss = module.ports.iter().any(|p| {
                p.name.eq_ignore_ascii_case(signal) && p.name != *signal
            });
            if near_miss {
                return Err(IrError::validation(
                    format!("{path}.signals[{j}]"),
                    format!("signal \"{signal}\" does not exactly match the declared port name"),
                ));
            }
        }
    }
    let mut instance_names = BTreeSet::new();
    for (i, child) in module.children_modules.iter().enumerate() {
        let path = format!("{base}.children_modules[{i}]");
        if !instance_names.insert(child.instance_name.as_str()) {
            return Err(IrError::validation(
                format!("{path}.instance_name"),
                format!("duplicate child instance name \"{}\"", child.instance_name),
            ));
        }
        if port_names.contains(child.instance_name.as_str()) {
            return Err(IrError::validation(
                format!("{path}.instance_name"),
                format!(
                    "child instance name \"{}\" collides with a port name",
                    child.instance_name
                ),
            ));
        }
        if !all.contains_key(&child.module_name) {
            return Err(IrError::validation(
                format!("{path}.module_name"),
                format!(
                    "referenced module \"{}\" has no entry in module_irs",
                    child.module_name
                ),
            ));
        }
    }
    Ok(())
}

/// Returns one cycle as a module-name chain, or None if the hierarchy is acyclic.
fn find_module_cycle(modules: &IndexMap<String, ModuleIR>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    let mut colors: BTreeMap<&str, Color> =
        modules.keys().map(|k| (k.as_str(), Color::White)).collect();

    fn visit<'a>(
        node: &'a str,
        modules: &'a IndexMap<String, ModuleIR>,
        colors: &mut BTreeMap<&'a str, Color>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        colors.insert(node, Color::Gray);
        stack.push(node);
        if let Some(ir) = modules.get(node) {
            for child in &ir.children_modules {
                let child_name = child.module_name.as_str();
                match colors.get(child_name) {
                    Some(Color::Gray) => {
                        let start = stack.iter().position(|n| *n == child_name).unwrap_or(0);
                        let mut chain: Vec<String> =
                            stack[start..].iter().map(|s| s.to_string()).collect();
                        chain.push(child_name.to_string());
                        return Some(chain);
                    }
                    Some(Color::White) => {
                        if let Some(cycle) = visit(child_name, modules, colors, stack) {
                            return Some(cycle);
                        }
                    }
                    _ => {}
                }
            }
        }
        stack.pop();
        colors.insert(node, Color::Black);
        None
    }

    let keys: Vec<&str> = modules.keys().map(|k| k.as_str()).collect();
    for key in keys {
        if colors[key] == Color::White {
            let mut stack = Vec::new();
            if let Some(cycle) = visit(key, modules, &mut colors, &mut stack) {
                return Some(cycle);
            }
        }
    }
    None
}

/// Builds the design tree from the graph, one pair per ChildRef, and
/// identifies the root module.
pub fn extract_parent_child_pairs(
    graph: &DesignArchitectureGraph,
) -> Result<DesignTree, IrError> {
    if let Some(cycle) = find_module_cycle(&graph.module_irs) {
        return Err(IrError::Cycle(cycle.join(" -> ")));
    }
    let mut pairs = Vec::new();
    for (name, module) in &graph.module_irs {
        for child in &module.children_modules {
            pairs.push((name.clone(), child.clone()));
        }
    }
    let modules: BTreeSet<String> = graph.module_irs.keys().cloned().collect();
    let root = identify_root(&pairs, &modules)?;
    Ok(DesignTree {
        root,
        parent_child_pairs: pairs,
    })
}

/// Returns the unique module that never appears as a child.
pub fn identify_root(
    pairs: &[(String, ChildRef)],
    modules: &BTreeSet<String>,
) -> Result<String, IrError> {
    if modules.is_empty() {
        return Err(IrError::EmptyDesign);
    }
    let children: BTreeSet<&str> = pairs.iter().map(|(_, c)| c.module_name.as_str()).collect();
    let roots: Vec<String> = modules
        .iter()
        .filter(|m| !children.contains(m.as_str()))
        .cloned()
        .collect();
    match roots.len() {
        1 => Ok(roots.into_iter().next().unwrap()),
        _ => Err(IrError::MultiRoot { roots }),
    }
}
