//! DAG optimizer: sibling merges (compatible nodes sharing a parent) and
//! chain merges (short sequential runs of fusable row operators), each
//! guarded so merged outputs stay separable and inputs stay within safe
//! limits. Every decision lands in the rewrite log with its guard
//! evaluations; the optimizer is total and returns the input plan in the
//! worst case.

use serde::{Deserialize, Serialize};

use super::operator::Registry;
use super::plan::{PlanDag, PlanEdge};
use super::TaskError;

/// Combined row estimate may not exceed twice this limit for a sibling
/// merge.
pub const SINGLE_NODE_ROW_LIMIT: f64 = 100_000.0;
/// Combined LLM token estimate must stay within this context budget.
pub const DEFAULT_CONTEXT_BUDGET: u64 = 8_192;
/// Chain merges collapse runs of at most this many fusable ops.
pub const MAX_CHAIN_LEN: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewriteEntry {
    pub rule: String,
    pub nodes: Vec<String>,
    pub guards: Vec<(String, bool)>,
    pub applied: bool,
}

/// Applies sibling and chain merges; returns the optimized plan and the
/// rewrite log justifying every attempt.
pub fn optimize_dag(
    plan: &PlanDag,
    registry: &Registry,
    context_budget: u64,
) -> Result<(PlanDag, Vec<RewriteEntry>), TaskError> {
    let mut dag = plan.clone();
    let mut log = Vec::new();
    loop {
        let merged_sibling = try_sibling_merge(&mut dag, registry, context_budget, &mut log)?;
        let merged_chain = try_chain_merge(&mut dag, registry, &mut log)?;
        if !merged_sibling && !merged_chain {
            break;
        }
    }
    dag.validate()?;
    Ok((dag, log))
}

fn llm_template_id(dag: &PlanDag, node: usize) -> Option<String> {
    dag.nodes[node].units[0]
        .ops
        .first()
        .and_then(|(_, params)| params.get("template_id").cloned())
}

fn token_estimate(dag: &PlanDag, node: usize) -> u64 {
    dag.nodes[node].units[0]
        .ops
        .first()
        .and_then(|(_, params)| params.get("token_estimate"))
        .and_then(|t| t.parse().ok())
        .unwrap_or(256)
}

/// Incoming edge set as (from, channel) pairs per port.
fn input_signature(dag: &PlanDag, node: usize) -> Vec<(usize, String)> {
    dag.inputs_of(node)
        .into_iter()
        .map(|e| (e.from, e.channel.clone()))
        .collect()
}

fn try_sibling_merge(
    dag: &mut PlanDag,
    _registry: &Registry,
    context_budget: u64,
    log: &mut Vec<RewriteEntry>,
) -> Result<bool, TaskError> {
    let n = dag.nodes.len();
    for a in 0..n {
        for b in (a + 1)..n {
            let sig_a = input_signature(dag, a);
            let sig_b = input_signature(dag, b);
            if sig_a.is_empty() || sig_a != sig_b {
                continue; // not siblings of a common parent
            }
            // Both plain enough to merge structurally.
            if dag.nodes[a].units.is_empty() || dag.nodes[b].units.is_empty() {
                continue;
            }
            let mut guards: Vec<(String, bool)> = Vec::new();
            let same_family = dag.nodes[a].family == dag.nodes[b].family;
            guards.push(("same-family".into(), same_family));
            let variant_a: Vec<&str> = dag.nodes[a].units[0]
                .ops
                .iter()
                .map(|(id, _)| id.as_str())
                .collect();
            let variant_b: Vec<&str> = dag.nodes[b].units[0]
                .ops
                .iter()
                .map(|(id, _)| id.as_str())
                .collect();
            let same_variant =
                dag.nodes[a].units.len() == 1 && dag.nodes[b].units.len() == 1 && variant_a == variant_b;
            guards.push(("same-variant".into(), same_variant));
            let is_llm = dag.nodes[a].family == super::operator::OperatorFamily::Llm;
            let llm_guard = if is_llm {
                let same_template = llm_template_id(dag, a) == llm_template_id(dag, b);
                guards.push(("same-template".into(), same_template));
                let tokens = token_estimate(dag, a) + token_estimate(dag, b);
                let within = tokens <= context_budget;
                guards.push(("token-budget".into(), within));
                same_template && within
            } else {
                let combined = dag.nodes[a].est_rows + dag.nodes[b].est_rows;
                let within = combined <= 2.0 * SINGLE_NODE_ROW_LIMIT;
                guards.push(("row-limit".into(), within));
                within
            };
            let applied = same_family && same_variant && llm_guard;
            log.push(RewriteEntry {
                rule: "sibling-merge".into(),
                nodes: vec![dag.nodes[a].step.clone(), dag.nodes[b].step.clone()],
                guards,
                applied,
            });
            if !applied {
                continue;
            }
            merge_siblings(dag, a, b);
            return Ok(true);
        }
    }
    Ok(false)
}

/// Folds node `b` into node `a`: units concatenate (channels preserved),
/// `b`'s consumers re-point at `a`, `b` is deleted.
fn merge_siblings(dag: &mut PlanDag, a: usize, b: usize) {
    let b_units = dag.nodes[b].units.clone();
    dag.nodes[a].units.extend(b_units);
    dag.nodes[a].est_rows = dag.nodes[a].est_rows.max(dag.nodes[b].est_rows);
    dag.nodes[a].materialize |= dag.nodes[b].materialize;
    let mut rewired = Vec::new();
    for e in &dag.edges {
        if e.from == b {
            rewired.push(PlanEdge {
                from: a,
                channel: e.channel.clone(),
                to: e.to,
                port: e.port,
            });
        }
    }
    dag.edges.retain(|e| e.from != b && e.to != b);
    dag.edges.extend(rewired);
    remove_node(dag, b);
}

fn try_chain_merge(
    dag: &mut PlanDag,
    registry: &Registry,
    log: &mut Vec<RewriteEntry>,
) -> Result<bool, TaskError> {
    let n = dag.nodes.len();
    for a in 0..n {
        // A chain a -> b: a single-consumer, b single-input.
        let consumers = dag.consumers_of(a);
        if consumers.len() != 1 {
            continue;
        }
        let b = consumers[0].to;
        if dag.inputs_of(b).len() != 1 {
            continue;
        }
        if dag.nodes[a].units.len() != 1 || dag.nodes[b].units.len() != 1 {
            continue;
        }
        let fusable = |node: usize| -> bool {
            dag.nodes[node].units[0]
                .ops
                .iter()
                .all(|(id, _)| registry.spec(id).map(|s| s.fusable).unwrap_or(false))
        };
        if !(fusable(a) || fusable(b)) {
            continue; // not even a candidate pair worth logging
        }
        let mut guards = Vec::new();
        guards.push(("both-fusable".into(), fusable(a) && fusable(b)));
        let combined_len = dag.nodes[a].units[0].ops.len() + dag.nodes[b].units[0].ops.len();
        guards.push((
            "chain-length".into(),
            combined_len <= MAX_CHAIN_LEN,
        ));
        let same_family = dag.nodes[a].family == dag.nodes[b].family;
        guards.push(("same-family".into(), same_family));
        let applied = fusable(a) && fusable(b) && combined_len <= MAX_CHAIN_LEN && same_family;
        log.push(RewriteEntry {
            rule: "chain-merge".into(),
            nodes: vec![dag.nodes[a].step.clone(), dag.nodes[b].step.clone()],
            guards,
            applied,
        });
        if !applied {
            continue;
        }
        // Fold b's ops into a; the fused node emits b's channel.
        let b_ops = dag.nodes[b].units[0].ops.clone();
        let b_output = dag.nodes[b].units[0].output;
        let b_channel = dag.nodes[b].units[0].channel.clone();
        let b_step = dag.nodes[b].step.clone();
        {
            let unit = &mut dag.nodes[a].units[0];
            unit.ops.extend(b_ops);
            unit.output = b_output;
            unit.channel = b_channel.clone();
        }
        dag.nodes[a].step = format!("{}+{}", dag.nodes[a].step, b_step);
        dag.nodes[a].materialize |= dag.nodes[b].materialize;
        let mut rewired = Vec::new();
        for e in &dag.edges {
            if e.from == b {
                rewired.push(PlanEdge {
                    from: a,
                    channel: e.channel.clone(),
                    to: e.to,
                    port: e.port,
                });
            }
        }
        dag.edges.retain(|e| e.from != b && e.to != b);
        dag.edges.extend(rewired);
        remove_node(dag, b);
        return Ok(true);
    }
    Ok(false)
}

/// Deletes a node, renumbering ids and edges.
fn remove_node(dag: &mut PlanDag, victim: usize) {
    dag.nodes.remove(victim);
    for (i, node) in dag.nodes.iter_mut().enumerate() {
        node.id = i;
    }
    for e in dag.edges.iter_mut() {
        if e.from > victim {
            e.from -= 1;
        }
        if e.to > victim {
            e.to -= 1;
        }
    }
}
