//! Plan synthesis: bound operators composed into a typed DAG with
//! pushdown points, materialization boundaries and parallelism, caching
//! and retry annotations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bind::BoundStep;
use super::operator::{DataType, OperatorFamily, Registry};
use super::{TaskError, TaskSpec};
use crate::search::ConstraintProfile;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotations {
    pub parallelism: usize,
    pub cache: bool,
    pub retries: u32,
}

/// One execution unit inside a node: an op chain producing one named
/// output channel. Ordinary nodes have a single unit with a single op;
/// chain merges extend the op list, sibling merges add units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExecUnit {
    pub channel: String,
    pub ops: Vec<(String, BTreeMap<String, String>)>,
    pub output: DataType,
    pub fallback: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: usize,
    pub step: String,
    pub family: OperatorFamily,
    pub units: Vec<ExecUnit>,
    pub inputs: Vec<DataType>,
    pub annotations: Annotations,
    pub materialize: bool,
    pub pushdown: bool,
    pub est_rows: f64,
}

impl PlanNode {
    /// The representative operator id (first op of the first unit).
    pub fn primary_op(&self) -> &str {
        &self.units[0].ops[0].0
    }

    pub fn channels(&self) -> Vec<&str> {
        self.units.iter().map(|u| u.channel.as_str()).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanEdge {
    pub from: usize,
    pub channel: String,
    pub to: usize,
    pub port: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PlanDag {
    pub nodes: Vec<PlanNode>,
    pub edges: Vec<PlanEdge>,
}

impl PlanDag {
    pub fn consumers_of(&self, node: usize) -> Vec<&PlanEdge> {
        self.edges.iter().filter(|e| e.from == node).collect()
    }

    pub fn inputs_of(&self, node: usize) -> Vec<&PlanEdge> {
        let mut edges: Vec<&PlanEdge> = self.edges.iter().filter(|e| e.to == node).collect();
        edges.sort_by_key(|e| e.port);
        edges
    }

    /// Kahn topological order as levels of mutually independent nodes.
    pub fn topo_levels(&self) -> Result<Vec<Vec<usize>>, TaskError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for e in &self.edges {
            indegree[e.to] += 1;
        }
        let mut level: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = level.len();
        let mut levels = Vec::new();
        while !level.is_empty() {
            level.sort();
            let mut next = Vec::new();
            for &node in &level {
                for e in self.consumers_of(node) {
                    indegree[e.to] -= 1;
                    if indegree[e.to] == 0 {
                        next.push(e.to);
                        seen += 1;
                    }
                }
            }
            levels.push(level);
            level = next;
        }
        if seen != n {
            let stuck = (0..n)
                .find(|&i| indegree[i] > 0)
                .map(|i| self.nodes[i].step.clone())
                .unwrap_or_default();
            return Err(TaskError::PlanningCycle(stuck));
        }
        Ok(levels)
    }

    /// Structural checks: acyclicity, port coverage and edge-type
    /// compatibility against each consumer's declared inputs.
    pub fn validate(&self) -> Result<(), TaskError> {
        self.topo_levels()?;
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs = self.inputs_of(i);
            if inputs.len() != node.inputs.len() {
                return Err(TaskError::InvalidPlan(format!(
                    "node `{}` expects {} inputs, has {}",
                    node.step,
                    node.inputs.len(),
                    inputs.len()
                )));
            }
            for (port, edge) in inputs.iter().enumerate() {
                if edge.port != port {
                    return Err(TaskError::InvalidPlan(format!(
                        "node `{}` has a gap at input port {port}",
                        node.step
                    )));
                }
                let producer = &self.nodes[edge.from];
                let unit = producer
                    .units
                    .iter()
                    .find(|u| u.channel == edge.channel)
                    .ok_or_else(|| {
                        TaskError::InvalidPlan(format!(
                            "edge references missing channel `{}` of `{}`",
                            edge.channel, producer.step
                        ))
                    })?;
                if unit.output != node.inputs[port] {
                    return Err(TaskError::InvalidPlan(format!(
                        "edge `{}` -> `{}` carries {:?}, consumer expects {:?}",
                        producer.step, node.step, unit.output, node.inputs[port]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn node_by_step(&self, step: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.step == step)
    }
}

/// Fills operator params from the task spec: dataset, constraint profile,
/// fields, question, retrieval knobs.
fn node_params(spec: &TaskSpec, step_name: &str) -> BTreeMap<String, String> {
    let mut params = BTreeMap::new();
    params.insert("dataset".to_string(), spec.dataset.clone());
    let numeric_field = spec.constraints.iter().find_map(|c| match &c.filter {
        crate::search::Filter::HasLabels { .. } => None,
        _ => Some(c.field.clone()),
    });
    let label_field = spec.constraints.iter().find_map(|c| match &c.filter {
        crate::search::Filter::HasLabels { .. } => Some(c.field.clone()),
        _ => None,
    });
    if let Some(field) = numeric_field.clone().or(label_field.clone()) {
        params.insert("constraint_field".to_string(), field);
    }
    let filters: Vec<crate::search::Filter> =
        spec.constraints.iter().map(|c| c.filter.clone()).collect();
    let profile: ConstraintProfile = crate::search::derive_profile(&filters);
    params.insert(
        "profile".to_string(),
        serde_json::to_string(&profile).expect("profile serializes"),
    );
    match step_name {
        "featurize" | "project" | "evidence" => {
            let mut fields: Vec<String> = spec.expected_outputs.clone();
            if let Some(t) = &spec.target {
                if !fields.contains(t) {
                    fields.push(t.clone());
                }
            }
            for c in &spec.constraints {
                if !fields.contains(&c.field) {
                    fields.push(c.field.clone());
                }
            }
            params.insert("fields".to_string(), fields.join(","));
        }
        "answer" => {
            params.insert(
                "question".to_string(),
                spec.target.clone().unwrap_or_default(),
            );
            params.insert("template_id".to_string(), "answer".to_string());
        }
        "retrieve" => {
            if let Some(q) = spec.preferences.get("query") {
                params.insert("query".to_string(), q.clone());
            }
            if let Some(k) = spec.preferences.get("k") {
                params.insert("k".to_string(), k.clone());
            }
            if let Some(ef) = spec.preferences.get("ef") {
                params.insert("ef".to_string(), ef.clone());
            }
        }
        _ => {}
    }
    params
}

/// Composes bound operators into an annotated DAG.
///
/// Filters are pushed below projections when type-safe (marker recorded);
/// any node consumed by two or more downstream nodes gets a
/// materialization boundary; parallelism is the minimum of the configured
/// maximum and the node's level width; caching turns on for cacheable,
/// deterministic operators; every node retries once and then switches to
/// its fallback variant.
pub fn synthesize(
    spec: &TaskSpec,
    bound: &[BoundStep],
    registry: &Registry,
    max_parallelism: usize,
) -> Result<PlanDag, TaskError> {
    let mut dag = PlanDag::default();
    let mut index_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (step, binding) in spec.steps.iter().zip(bound) {
        let op = registry
            .spec(&binding.primary)
            .ok_or_else(|| TaskError::UnbindableStep(step.name.clone()))?;
        let id = dag.nodes.len();
        index_of.insert(step.name.as_str(), id);
        let mut params = node_params(spec, &step.name);
        params.extend(step.params.clone());
        dag.nodes.push(PlanNode {
            id,
            step: step.name.clone(),
            family: step.family,
            units: vec![ExecUnit {
                channel: step.name.clone(),
                ops: vec![(binding.primary.clone(), params)],
                output: step.output,
                fallback: binding.fallback.clone(),
            }],
            inputs: step.inputs.clone(),
            annotations: Annotations {
                parallelism: 1,
                cache: op.cacheable && op.deterministic,
                retries: 1,
            },
            materialize: false,
            pushdown: false,
            est_rows: binding.est_rows,
        });
        for (port, dep) in step.depends_on.iter().enumerate() {
            let from = *index_of.get(dep.as_str()).ok_or_else(|| {
                TaskError::InvalidPlan(format!("step `{}` depends on unknown `{dep}`", step.name))
            })?;
            dag.edges.push(PlanEdge {
                from,
                channel: dag.nodes[from].step.clone(),
                to: id,
                port,
            });
        }
    }

    pushdown_filters(&mut dag, registry);

    // Materialization boundaries before fan-out.
    for i in 0..dag.nodes.len() {
        if dag.consumers_of(i).len() >= 2 {
            dag.nodes[i].materialize = true;
        }
    }
    // Parallelism from level width.
    let levels = dag.topo_levels()?;
    for level in &levels {
        let width = level.len();
        for &i in level {
            dag.nodes[i].annotations.parallelism = width.min(max_parallelism.max(1));
        }
    }
    dag.validate()?;
    Ok(dag)
}

/// Swaps filters below adjacent projections when the filter's fields
/// survive the projection, and marks filters sitting directly on a scan.
fn pushdown_filters(dag: &mut PlanDag, registry: &Registry) {
    let is_filter = |node: &PlanNode, registry: &Registry| -> bool {
        registry
            .spec(node.primary_op())
            .map(|op| op.id.starts_with("filter"))
            .unwrap_or(false)
    };
    let is_project =
        |node: &PlanNode| -> bool { node.units.len() == 1 && node.primary_op() == "project" };

    // Adjacent swap until fixpoint: project -> filter becomes
    // filter -> project when type-safe.
    loop {
        let mut swap: Option<(usize, usize)> = None;
        'outer: for filter_id in 0..dag.nodes.len() {
            if !is_filter(&dag.nodes[filter_id], registry) {
                continue;
            }
            for edge in dag.inputs_of(filter_id) {
                let producer = edge.from;
                if !is_project(&dag.nodes[producer]) {
                    continue;
                }
                // Type-safe only when the filter's constraint field
                // survives the projection.
                let filter_field = dag.nodes[filter_id].units[0].ops[0]
                    .1
                    .get("constraint_field")
                    .cloned();
                let kept = dag.nodes[producer].units[0].ops[0]
                    .1
                    .get("fields")
                    .cloned()
                    .unwrap_or_default();
                let safe = match &filter_field {
                    Some(f) => kept.split(',').any(|k| k.trim() == f),
                    None => true,
                };
                if safe && dag.consumers_of(producer).len() == 1 {
                    swap = Some((producer, filter_id));
                    break 'outer;
                }
            }
        }
        let Some((project_id, filter_id)) = swap else { break };
        // Rewire: X -> project -> filter -> Y into X -> filter -> project -> Y.
        let upstream: Vec<(usize, String)> = dag
            .inputs_of(project_id)
            .into_iter()
            .map(|e| (e.from, e.channel.clone()))
            .collect();
        let downstream: Vec<(usize, usize)> = dag
            .consumers_of(filter_id)
            .into_iter()
            .map(|e| (e.to, e.port))
            .collect();
        dag.edges.retain(|e| {
            !(e.to == project_id
                || e.to == filter_id
                || e.from == project_id
                || e.from == filter_id)
        });
        for (from, channel) in upstream {
            dag.edges.push(PlanEdge {
                from,
                channel,
                to: filter_id,
                port: 0,
            });
        }
        let filter_channel = dag.nodes[filter_id].units[0].channel.clone();
        dag.edges.push(PlanEdge {
            from: filter_id,
            channel: filter_channel,
            to: project_id,
            port: 0,
        });
        let project_channel = dag.nodes[project_id].units[0].channel.clone();
        for (to, port) in downstream {
            dag.edges.push(PlanEdge {
                from: project_id,
                channel: project_channel.clone(),
                to,
                port,
            });
        }
        dag.nodes[filter_id].pushdown = true;
    }

    // A filter fed directly by a scan already sits at its pushed position.
    for i in 0..dag.nodes.len() {
        if is_filter(&dag.nodes[i], registry) {
            let fed_by_scan = dag
                .inputs_of(i)
                .iter()
                .any(|e| dag.nodes[e.from].primary_op() == "scan");
            if fed_by_scan {
                dag.nodes[i].pushdown = true;
            }
        }
    }
}
