//! Prompt-graph topology: nodes own disjoint field subsets, edges fix extraction
//! order and conditions gate nodes on answers extracted earlier.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_schema_version, parse_document, read_file, ConfigError, FieldSpec, FieldValue};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Equals(String),
    NotEquals(String),
    In(Vec<String>),
}

/// Runs a node only when an earlier answer satisfies the predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub field: String,
    #[serde(flatten)]
    pub predicate: Predicate,
}

impl Condition {
    pub fn holds(&self, value: &FieldValue) -> bool {
        let text = value.to_string();
        match &self.predicate {
            Predicate::Equals(lit) => text == *lit,
            Predicate::NotEquals(lit) => text != *lit,
            Predicate::In(lits) => lits.contains(&text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub id: String,
    pub fields: Vec<String>,
    /// Node-local instruction placed ahead of the node's field instructions.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub nodes: Vec<GraphNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<GraphEdge>,
}

impl GraphSpec {
    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn index_of(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    /// Edge list as index pairs; unknown endpoints are reported against `path`.
    fn edge_indices(&self, path: &str) -> Result<Vec<(usize, usize)>, ConfigError> {
        let index = self.index_of();
        self.edges
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let from = *index.get(e.from.as_str()).ok_or_else(|| {
                    ConfigError::schema(format!("{path}.edges[{k}].from"), format!("unknown node `{}`", e.from))
                })?;
                let to = *index.get(e.to.as_str()).ok_or_else(|| {
                    ConfigError::schema(format!("{path}.edges[{k}].to"), format!("unknown node `{}`", e.to))
                })?;
                Ok((from, to))
            })
            .collect()
    }

    /// Ancestors of every node (transitive predecessors), by index.
    fn ancestors(&self, edges: &[(usize, usize)], order: &[usize]) -> Vec<HashSet<usize>> {
        let mut anc = vec![HashSet::new(); self.nodes.len()];
        for &v in order {
            let preds: Vec<usize> = edges.iter().filter(|(_, t)| *t == v).map(|(f, _)| *f).collect();
            for p in preds {
                let inherited = anc[p].clone();
                anc[v].insert(p);
                anc[v].extend(inherited);
            }
        }
        anc
    }

    /// Checks the graph against the task's fields.
    pub fn validate(&self, fields: &[FieldSpec], path: &str) -> Result<(), ConfigError> {
        if let Some(v) = self.schema_version {
            check_schema_version(v)?;
        }
        if self.nodes.is_empty() {
            return Err(ConfigError::schema(format!("{path}.nodes"), "graph has no nodes"));
        }
        let mut ids = HashSet::new();
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !ids.insert(node.id.as_str()) {
                return Err(ConfigError::schema(
                    format!("{path}.nodes[{i}].id"),
                    format!("duplicate node id `{}`", node.id),
                ));
            }
            if node.fields.is_empty() {
                return Err(ConfigError::schema(
                    format!("{path}.nodes[{i}].fields"),
                    format!("node `{}` extracts no fields", node.id),
                ));
            }
            for (j, f) in node.fields.iter().enumerate() {
                if !fields.iter().any(|spec| spec.name == *f) {
                    return Err(ConfigError::schema(
                        format!("{path}.nodes[{i}].fields[{j}]"),
                        format!("unknown field `{f}`"),
                    ));
                }
                if let Some(prev) = owner.insert(f.as_str(), i) {
                    return Err(ConfigError::schema(
                        format!("{path}.nodes[{i}].fields[{j}]"),
                        format!("field `{f}` already belongs to node `{}`", self.nodes[prev].id),
                    ));
                }
            }
        }
        for spec in fields {
            if !owner.contains_key(spec.name.as_str()) {
                return Err(ConfigError::schema(
                    format!("{path}.nodes"),
                    format!("field `{}` is not assigned to any node", spec.name),
                ));
            }
        }
        let edges = self.edge_indices(path)?;
        let order = topo_indices(self, &edges)?;
        let anc = self.ancestors(&edges, &order);
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(cond) = &node.condition else { continue };
            let cpath = format!("{path}.nodes[{i}].condition.field");
            let src = *owner
                .get(cond.field.as_str())
                .ok_or_else(|| ConfigError::schema(&cpath, format!("unknown field `{}`", cond.field)))?;
            if !anc[i].contains(&src) {
                return Err(ConfigError::schema(
                    cpath,
                    format!(
                        "node `{}` is gated on `{}`, which node `{}` may not have extracted yet",
                        node.id, cond.field, self.nodes[src].id
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Kahn's algorithm, always taking the earliest-declared ready node.
fn topo_indices(graph: &GraphSpec, edges: &[(usize, usize)]) -> Result<Vec<usize>, ConfigError> {
    let n = graph.nodes.len();
    let mut indegree = vec![0usize; n];
    for &(_, t) in edges {
        indegree[t] += 1;
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &(f, t) in edges {
            if f == v {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.insert(t);
                }
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every unplaced node still has an unplaced predecessor; walking predecessors
    // must revisit a node, which closes a cycle.
    let placed: HashSet<usize> = order.into_iter().collect();
    let start = (0..n).find(|i| !placed.contains(i)).expect("some node unplaced");
    let mut walk = vec![start];
    let mut seen: HashMap<usize, usize> = HashMap::from([(start, 0)]);
    let mut cur = start;
    loop {
        let pred = edges
            .iter()
            .find(|(f, t)| *t == cur && !placed.contains(f))
            .map(|(f, _)| *f)
            .expect("unplaced node has an unplaced predecessor");
        if let Some(&pos) = seen.get(&pred) {
            let mut cycle: Vec<String> = walk[pos..].iter().rev().map(|&i| graph.nodes[i].id.clone()).collect();
            cycle.push(cycle[0].clone());
            return Err(ConfigError::Cycle(cycle));
        }
        seen.insert(pred, walk.len());
        walk.push(pred);
        cur = pred;
    }
}

/// Deterministic topological order of the graph's nodes; ties go to declaration order.
pub fn topo_order(graph: &GraphSpec) -> Result<Vec<&GraphNode>, ConfigError> {
    let edges = graph.edge_indices("graph")?;
    Ok(topo_indices(graph, &edges)?.into_iter().map(|i| &graph.nodes[i]).collect())
}

impl GraphSpec {
    /// Loads a standalone graph document (must carry `schema_version`).
    pub fn load(path: impl AsRef<Path>, fields: &[FieldSpec]) -> Result<GraphSpec, ConfigError> {
        let path = path.as_ref();
        let graph: GraphSpec = parse_document(&read_file(path)?, &path.display().to_string())?;
        if graph.schema_version.is_none() {
            return Err(ConfigError::schema("schema_version", "graph documents must declare a schema version"));
        }
        graph.validate(fields, "graph")?;
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FieldKind;

    fn field(name: &str) -> FieldSpec {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Categorical,
            options: vec!["Yes".into(), "No".into()],
            default: FieldValue::text(""),
            metric: None,
            description: String::new(),
            placeholder: None,
        }
    }

    fn node(id: &str, fields: &[&str]) -> GraphNode {
        GraphNode {
            id: id.into(),
            fields: fields.iter().map(|s| s.to_string()).collect(),
            instruction: String::new(),
            condition: None,
        }
    }

    fn edge(a: &str, b: &str) -> GraphEdge {
        GraphEdge { from: a.into(), to: b.into() }
    }

    fn ids(order: &[&GraphNode]) -> Vec<String> {
        order.iter().map(|n| n.id.clone()).collect()
    }

    /// Every edge goes forward in `order`.
    fn respects_edges(graph: &GraphSpec, order: &[&GraphNode]) -> bool {
        let pos: HashMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        order.len() == graph.nodes.len() && graph.edges.iter().all(|e| pos[e.from.as_str()] < pos[e.to.as_str()])
    }

    #[test]
    fn linear_chain() {
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![node("C", &["c"]), node("B", &["b"]), node("A", &["a"])],
            edges: vec![edge("A", "B"), edge("B", "C")],
        };
        assert_eq!(ids(&topo_order(&g).unwrap()), ["A", "B", "C"]);
    }

    #[test]
    fn ties_follow_declaration_order() {
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![node("x", &["a"]), node("y", &["b"]), node("z", &["c"])],
            edges: vec![edge("z", "x")],
        };
        let order = topo_order(&g).unwrap();
        assert_eq!(ids(&order), ["y", "z", "x"]);
        assert!(respects_edges(&g, &order));
        assert_eq!(ids(&topo_order(&g).unwrap()), ids(&order));
    }

    #[test]
    fn two_cycle_is_reported() {
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![node("A", &["a"]), node("B", &["b"])],
            edges: vec![edge("A", "B"), edge("B", "A")],
        };
        match topo_order(&g) {
            Err(ConfigError::Cycle(cycle)) => {
                assert_eq!(cycle.len(), 3);
                assert_eq!(cycle.first(), cycle.last());
                assert!(cycle.contains(&"A".to_string()) && cycle.contains(&"B".to_string()));
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn cycle_behind_acyclic_prefix() {
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![node("S", &["s"]), node("A", &["a"]), node("B", &["b"]), node("C", &["c"])],
            edges: vec![edge("S", "A"), edge("A", "B"), edge("B", "C"), edge("C", "A")],
        };
        let Err(ConfigError::Cycle(cycle)) = topo_order(&g) else { panic!() };
        assert!(!cycle.contains(&"S".to_string()));
        assert_eq!(cycle.len(), 4);
    }

    #[test]
    fn melanoma_gate_orders_after_source() {
        let fields = [field("Mitosis described"), field("Mitosis count"), field("Ulceration")];
        let mut gated = node("mitosis_count", &["Mitosis count"]);
        gated.condition = Some(Condition {
            field: "Mitosis described".into(),
            predicate: Predicate::Equals("Yes".into()),
        });
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![gated, node("ulceration", &["Ulceration"]), node("mitosis", &["Mitosis described"])],
            edges: vec![edge("ulceration", "mitosis"), edge("mitosis", "mitosis_count")],
        };
        g.validate(&fields, "graph").unwrap();
        let order = topo_order(&g).unwrap();
        assert_eq!(ids(&order), ["ulceration", "mitosis", "mitosis_count"]);
        assert!(respects_edges(&g, &order));
    }

    #[test]
    fn condition_on_unordered_node_is_rejected() {
        let fields = [field("a"), field("b")];
        let mut gated = node("B", &["b"]);
        gated.condition = Some(Condition {
            field: "a".into(),
            predicate: Predicate::Equals("Yes".into()),
        });
        // No edge A -> B, so A is not guaranteed to run first.
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![node("A", &["a"]), gated],
            edges: vec![],
        };
        let err = g.validate(&fields, "graph").unwrap_err();
        assert!(matches!(&err, ConfigError::Schema { path, .. } if path == "graph.nodes[1].condition.field"), "{err}");
    }

    #[test]
    fn field_coverage_is_enforced() {
        let fields = [field("a"), field("b")];
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![node("A", &["a"])],
            edges: vec![],
        };
        assert!(g.validate(&fields, "graph").is_err());
        let g = GraphSpec {
            schema_version: None,
            nodes: vec![node("A", &["a", "b"]), node("B", &["b"])],
            edges: vec![],
        };
        assert!(g.validate(&fields, "graph").is_err());
    }

    #[test]
    fn predicates() {
        let c = |p| Condition { field: "f".into(), predicate: p };
        let yes = FieldValue::text("Yes");
        assert!(c(Predicate::Equals("Yes".into())).holds(&yes));
        assert!(!c(Predicate::NotEquals("Yes".into())).holds(&yes));
        assert!(c(Predicate::In(vec!["No".into(), "Yes".into()])).holds(&yes));
        assert!(c(Predicate::Equals("3".into())).holds(&FieldValue::Number(3.0)));
    }

    #[test]
    fn condition_yaml_shape() {
        let c: Condition = serde_yaml::from_str("field: x\nin: [a, b]\n").unwrap();
        assert_eq!(c.predicate, Predicate::In(vec!["a".into(), "b".into()]));
        let c: Condition = serde_yaml::from_str("field: x\nequals: \"Yes\"\n").unwrap();
        assert_eq!(c.predicate, Predicate::Equals("Yes".into()));
    }
}
