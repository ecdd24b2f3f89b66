//! The LLM batch optimizer: adaptive grouping by template and intent
//! affinity, shared demonstration selection under a diversity floor,
//! prompt-segment deduplication, cache-friendly scheduling and online
//! rebalancing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TaskError;
use crate::gateway::{estimate_tokens, Gateway, PromptTemplate};

/// Minimum cosine affinity between a call and its group centroid.
pub const AFFINITY_THRESHOLD: f64 = 0.8;
/// Maximum pairwise cosine between chosen demonstrations.
pub const DEMO_DIVERSITY_CEILING: f64 = 0.95;
pub const MAX_DEMOS_PER_GROUP: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LlmCall {
    pub id: String,
    pub template_id: String,
    /// Intent embedding from the feature suite's attribute encoder.
    pub embedding: Vec<f32>,
    pub slots: BTreeMap<String, String>,
    pub token_estimate: u64,
}

impl LlmCall {
    pub fn new(
        id: impl Into<String>,
        template: &PromptTemplate,
        embedding: Vec<f32>,
        slots: BTreeMap<String, String>,
    ) -> Result<Self, TaskError> {
        let rendered = template.render(&slots)?;
        Ok(LlmCall {
            id: id.into(),
            template_id: template.id.clone(),
            embedding,
            slots,
            token_estimate: estimate_tokens(&rendered),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DemoCandidate {
    pub id: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchGroup {
    pub template_id: String,
    pub members: Vec<String>,
    pub centroid: Vec<f32>,
    pub demos: Vec<String>,
    /// Normalized prompt segments shared across members, emitted once.
    pub shared_segments: Vec<String>,
    pub token_estimate: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BatchPlan {
    pub groups: Vec<BatchGroup>,
    /// Execution order; identical prefixes are adjacent to favor caching.
    pub schedule: Vec<usize>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len().min(b.len()) {
        dot += (a[i] * b[i]) as f64;
        na += (a[i] * a[i]) as f64;
        nb += (b[i] * b[i]) as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn normalize_segment(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

struct GroupDraft<'c> {
    template_id: String,
    members: Vec<&'c LlmCall>,
    centroid: Vec<f32>,
    tokens: u64,
}

impl<'c> GroupDraft<'c> {
    fn refresh_centroid(&mut self) {
        let dim = self
            .members
            .iter()
            .map(|m| m.embedding.len())
            .max()
            .unwrap_or(0);
        let mut c = vec![0.0f32; dim];
        for m in &self.members {
            for (i, v) in m.embedding.iter().enumerate() {
                c[i] += v;
            }
        }
        let norm: f32 = c.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            for x in c.iter_mut() {
                *x /= norm;
            }
        }
        self.centroid = c;
    }
}

/// Greedy agglomerative batching: a call joins the best-affinity group
/// with the same template whose centroid similarity clears the threshold
/// and whose token estimate stays within the context limit; otherwise it
/// opens a new group. Calls are processed in id order, so plans are
/// deterministic.
pub fn batch_optimize(
    calls: &[LlmCall],
    demos: &[DemoCandidate],
    context_limit: u64,
) -> Result<BatchPlan, TaskError> {
    let mut ordered: Vec<&LlmCall> = calls.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    for call in &ordered {
        if call.token_estimate > context_limit {
            return Err(TaskError::UnbatchableCall(call.id.clone()));
        }
    }

    let mut drafts: Vec<GroupDraft> = Vec::new();
    for call in ordered {
        let mut best: Option<(usize, f64)> = None;
        for (i, draft) in drafts.iter().enumerate() {
            if draft.template_id != call.template_id {
                continue;
            }
            if draft.tokens + call.token_estimate > context_limit {
                continue;
            }
            let affinity = cosine(&call.embedding, &draft.centroid);
            if affinity < AFFINITY_THRESHOLD {
                continue;
            }
            match best {
                None => best = Some((i, affinity)),
                Some((_, b)) if affinity > b => best = Some((i, affinity)),
                _ => {}
            }
        }
        match best {
            Some((i, _)) => {
                drafts[i].members.push(call);
                drafts[i].tokens += call.token_estimate;
                drafts[i].refresh_centroid();
            }
            None => {
                let mut draft = GroupDraft {
                    template_id: call.template_id.clone(),
                    members: vec![call],
                    centroid: Vec::new(),
                    tokens: call.token_estimate,
                };
                draft.refresh_centroid();
                drafts.push(draft);
            }
        }
    }

    let mut groups = Vec::with_capacity(drafts.len());
    for draft in &drafts {
        let demos = select_demos(draft, demos);
        let shared_segments = shared_segments(draft);
        // Shared segments are emitted once per group: subtract the
        // duplicate copies from the member-sum estimate.
        let dup_savings: u64 = shared_segments
            .iter()
            .map(|(text, count)| estimate_tokens(text) * (count - 1) as u64)
            .sum();
        groups.push(BatchGroup {
            template_id: draft.template_id.clone(),
            members: draft.members.iter().map(|m| m.id.clone()).collect(),
            centroid: draft.centroid.clone(),
            demos,
            shared_segments: shared_segments.into_iter().map(|(t, _)| t).collect(),
            token_estimate: draft.tokens.saturating_sub(dup_savings),
        });
    }

    // Schedule: identical prefixes adjacent (template, then first shared
    // segment, then id for determinism).
    let mut schedule: Vec<usize> = (0..groups.len()).collect();
    schedule.sort_by(|&a, &b| {
        let ka = (
            &groups[a].template_id,
            groups[a].shared_segments.first(),
            &groups[a].members,
        );
        let kb = (
            &groups[b].template_id,
            groups[b].shared_segments.first(),
            &groups[b].members,
        );
        ka.cmp(&kb)
    });

    Ok(BatchPlan { groups, schedule })
}

/// Duplicate normalized slot values across members, with their counts.
fn shared_segments(draft: &GroupDraft) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for m in &draft.members {
        for value in m.slots.values() {
            *counts.entry(normalize_segment(value)).or_insert(0) += 1;
        }
    }
    counts.into_iter().filter(|(_, c)| *c >= 2).collect()
}

/// Greedy demonstration choice maximizing marginal coverage of member
/// intents, under the pairwise diversity ceiling.
fn select_demos(draft: &GroupDraft, pool: &[DemoCandidate]) -> Vec<String> {
    let mut chosen: Vec<&DemoCandidate> = Vec::new();
    let coverage = |chosen: &[&DemoCandidate]| -> f64 {
        draft
            .members
            .iter()
            .map(|m| {
                chosen
                    .iter()
                    .map(|d| cosine(&m.embedding, &d.embedding))
                    .fold(0.0f64, f64::max)
            })
            .sum()
    };
    let mut current = 0.0;
    while chosen.len() < MAX_DEMOS_PER_GROUP {
        let mut best: Option<(&DemoCandidate, f64)> = None;
        for d in pool {
            if chosen.iter().any(|c| c.id == d.id) {
                continue;
            }
            // Diversity floor: demonstrations must cover distinct
            // patterns.
            if chosen
                .iter()
                .any(|c| cosine(&c.embedding, &d.embedding) > DEMO_DIVERSITY_CEILING)
            {
                continue;
            }
            let mut with: Vec<&DemoCandidate> = chosen.clone();
            with.push(d);
            let gain = coverage(&with) - current;
            match best {
                None => best = Some((d, gain)),
                Some((_, g)) if gain > g => best = Some((d, gain)),
                _ => {}
            }
        }
        match best {
            Some((d, gain)) if gain > 1e-9 => {
                chosen.push(d);
                current += gain;
            }
            _ => break,
        }
    }
    chosen.into_iter().map(|d| d.id.clone()).collect()
}

/// Online rebalancing: a group whose realized latency exceeds the budget
/// splits in half for subsequent waves. Returns true when a split
/// happened.
pub fn rebalance(plan: &mut BatchPlan, group: usize, realized_ms: f64, budget_ms: f64) -> bool {
    if realized_ms <= budget_ms || plan.groups[group].members.len() < 2 {
        return false;
    }
    let members = plan.groups[group].members.clone();
    let (left, right) = members.split_at(members.len() / 2);
    plan.groups[group].members = left.to_vec();
    let mut split = plan.groups[group].clone();
    split.members = right.to_vec();
    plan.groups.push(split);
    let new_idx = plan.groups.len() - 1;
    // The new half runs right after its sibling.
    if let Some(pos) = plan.schedule.iter().position(|&g| g == group) {
        plan.schedule.insert(pos + 1, new_idx);
    } else {
        plan.schedule.push(new_idx);
    }
    true
}

/// Executes a batch plan through the gateway: one grouped call per batch
/// group (cache hits aside), outputs fanned back out by call id.
pub fn run_batched(
    gateway: &Gateway,
    template: &PromptTemplate,
    plan: &BatchPlan,
    calls: &[LlmCall],
) -> Result<BTreeMap<String, Value>, TaskError> {
    let by_id: BTreeMap<&str, &LlmCall> = calls.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut outputs = BTreeMap::new();
    for &group_idx in &plan.schedule {
        let group = &plan.groups[group_idx];
        let slot_maps: Vec<BTreeMap<String, String>> = group
            .members
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|c| c.slots.clone())
                    .ok_or_else(|| TaskError::Internal(format!("unknown call `{id}`")))
            })
            .collect::<Result<_, _>>()?;
        let results = gateway.complete_batch(template, &slot_maps)?;
        for (id, value) in group.members.iter().zip(results) {
            outputs.insert(id.clone(), value);
        }
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{
        FieldSpec, GatewayBudget, JsonKind, MockBackend, PromptSegment,
    };
    use std::sync::Arc;

    fn template() -> PromptTemplate {
        PromptTemplate::new(
            "qa",
            vec![
                PromptSegment::Literal("Q: ".into()),
                PromptSegment::Slot("q".into()),
            ],
            vec![FieldSpec {
                name: "answer".into(),
                kind: JsonKind::String,
            }],
        )
        .unwrap()
    }

    fn call(id: &str, cluster: usize, text: &str) -> LlmCall {
        // Cluster embeddings: orthogonal unit axes per cluster.
        let mut embedding = vec![0.0f32; 8];
        embedding[cluster % 8] = 1.0;
        let mut slots = BTreeMap::new();
        slots.insert("q".to_string(), text.to_string());
        LlmCall::new(id, &template(), embedding, slots).unwrap()
    }

    #[test]
    fn identical_queries_form_one_group_and_one_call() {
        let calls: Vec<LlmCall> = (0..10)
            .map(|i| call(&format!("c{i}"), 0, "same question"))
            .collect();
        let plan = batch_optimize(&calls, &[], 8192).unwrap();
        assert_eq!(plan.groups.len(), 1);

        let gateway = Gateway::new(
            Arc::new(MockBackend::with_standard_rules(1)),
            GatewayBudget::unlimited(),
        );
        let outputs = run_batched(&gateway, &template(), &plan, &calls).unwrap();
        assert_eq!(gateway.backend_calls(), 1);
        assert_eq!(outputs.len(), 10);
        let first = &outputs["c0"];
        assert!(outputs.values().all(|v| v == first));
    }

    #[test]
    fn disjoint_templates_never_share_groups() {
        let a = call("a", 0, "q");
        let mut b = call("b", 0, "q");
        b.template_id = "other".into();
        let plan = batch_optimize(&[a, b], &[], 8192).unwrap();
        assert_eq!(plan.groups.len(), 2);
    }

    #[test]
    fn low_affinity_calls_split_groups() {
        // Two orthogonal intent clusters.
        let calls = vec![
            call("a", 0, "alpha"),
            call("b", 0, "beta"),
            call("c", 1, "gamma"),
            call("d", 1, "delta"),
        ];
        let plan = batch_optimize(&calls, &[], 8192).unwrap();
        assert_eq!(plan.groups.len(), 2);
        for g in &plan.groups {
            assert_eq!(g.members.len(), 2);
        }
    }

    #[test]
    fn oversized_single_call_is_unbatchable() {
        let mut c = call("big", 0, "q");
        c.token_estimate = 10_000;
        assert!(matches!(
            batch_optimize(&[c], &[], 8192),
            Err(TaskError::UnbatchableCall(_))
        ));
    }

    #[test]
    fn token_limit_caps_group_size() {
        let calls: Vec<LlmCall> = (0..10)
            .map(|i| {
                let mut c = call(&format!("c{i}"), 0, "distinct question number");
                c.token_estimate = 300;
                c
            })
            .collect();
        let plan = batch_optimize(&calls, &[], 1000).unwrap();
        // 300 tokens each, limit 1000: at most 3 per group.
        assert!(plan.groups.iter().all(|g| g.members.len() <= 3));
        let total: usize = plan.groups.iter().map(|g| g.members.len()).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn demos_cover_clusters_under_diversity_floor() {
        let calls = vec![call("a", 0, "x"), call("b", 1, "y")];
        let mut e0 = vec![0.0f32; 8];
        e0[0] = 1.0;
        let e0b = e0.clone();
        let mut e1 = vec![0.0f32; 8];
        e1[1] = 1.0;
        let demos = vec![
            DemoCandidate {
                id: "d0".into(),
                text: "cluster zero demo".into(),
                embedding: e0,
            },
            DemoCandidate {
                id: "d0-dup".into(),
                text: "near duplicate of d0".into(),
                embedding: e0b,
            },
            DemoCandidate {
                id: "d1".into(),
                text: "cluster one demo".into(),
                embedding: e1,
            },
        ];
        // Force both calls into one group by sharing the cluster.
        let calls = vec![calls[0].clone(), {
            let mut c = calls[1].clone();
            c.embedding = calls[0].embedding.clone();
            c
        }];
        let plan = batch_optimize(&calls, &demos, 8192).unwrap();
        let group = &plan.groups[0];
        assert!(group.demos.contains(&"d0".to_string()));
        // The duplicate of d0 violates the diversity ceiling.
        assert!(!group.demos.contains(&"d0-dup".to_string()));
    }

    #[test]
    fn duplicate_segments_counted_once() {
        let calls: Vec<LlmCall> = (0..4)
            .map(|i| {
                let mut slots = BTreeMap::new();
                slots.insert("q".to_string(), "  SHARED   preamble ".to_string());
                let mut c = call(&format!("c{i}"), 0, "ignored");
                c.slots = slots;
                c.token_estimate = 100;
                c
            })
            .collect();
        let plan = batch_optimize(&calls, &[], 8192).unwrap();
        let group = &plan.groups[0];
        assert_eq!(group.shared_segments, vec!["shared preamble".to_string()]);
        assert!(group.token_estimate < 400, "dedup must reduce the estimate");
    }

    #[test]
    fn rebalance_splits_slow_groups() {
        let calls: Vec<LlmCall> = (0..8).map(|i| call(&format!("c{i}"), 0, "q")).collect();
        let mut plan = batch_optimize(&calls, &[], 8192).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert!(rebalance(&mut plan, 0, 500.0, 100.0));
        assert_eq!(plan.groups.len(), 2);
        assert_eq!(plan.groups[0].members.len(), 4);
        assert_eq!(plan.groups[1].members.len(), 4);
        // Within budget: no split.
        assert!(!rebalance(&mut plan, 0, 50.0, 100.0));
    }

    #[test]
    fn clustered_workload_cuts_call_count_with_identical_outputs() {
        // 100 distinct queries in 5 intent clusters.
        let calls: Vec<LlmCall> = (0..100)
            .map(|i| call(&format!("c{i:03}"), i % 5, &format!("question number {i}")))
            .collect();
        let unbatched = Gateway::new(
            Arc::new(MockBackend::with_standard_rules(2)),
            GatewayBudget::unlimited(),
        );
        let t = template();
        let mut singles = BTreeMap::new();
        for c in &calls {
            singles.insert(c.id.clone(), unbatched.complete(&t, &c.slots).unwrap());
        }
        let unbatched_calls = unbatched.backend_calls();
        assert_eq!(unbatched_calls, 100);

        let plan = batch_optimize(&calls, &[], 1 << 20).unwrap();
        let batched = Gateway::new(
            Arc::new(MockBackend::with_standard_rules(2)),
            GatewayBudget::unlimited(),
        );
        let grouped = run_batched(&batched, &t, &plan, &calls).unwrap();
        let batched_calls = batched.backend_calls();
        assert!(
            (batched_calls as f64) <= 0.7 * unbatched_calls as f64,
            "batched {batched_calls} vs unbatched {unbatched_calls}"
        );
        assert_eq!(singles, grouped, "outputs must be bit-identical");
    }
}
