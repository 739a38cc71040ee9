//! Target-structure sampling under distribution control.
//!
//! A [`BatchPlan`] fixes, before anything is sampled, how many items each
//! type gets, how many events each passage carries and which fraction of
//! each event's roles is forced to `None`. Sampling a plan item is then a
//! pure function of the item's own seed, the pools and the ontology.

use indexmap::IndexMap;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Ontology, OntologyError};
use crate::pools::{normalize_mention, PoolKey, PoolSet};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("the ontology defines no {0} types to plan over")]
    EmptyOntology(&'static str),
    #[error("no usable candidate pool for {0}")]
    MissingPool(PoolKey),
    #[error("relation `{relation}` needs two distinct entities, found {found}")]
    InsufficientCandidates { relation: String, found: usize },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

fn default_max_density() -> usize {
    5
}

fn default_bins() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

/// Knobs for one generation run. `k` is the number of demonstrations per
/// prompt and `n` the number of instances generated per type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub n: usize,
    #[serde(default = "default_max_density")]
    pub max_density: usize,
    #[serde(default = "default_bins")]
    pub hallucination_bins: Vec<f64>,
    pub rng_seed: u64,
}

impl GenerationConfig {
    pub fn new(k: usize, n: usize, rng_seed: u64) -> Self {
        GenerationConfig {
            k,
            n,
            max_density: default_max_density(),
            hallucination_bins: default_bins(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if self.hallucination_bins.is_empty() {
            return Err(SampleError::InvalidConfig("hallucination_bins is empty".into()));
        }
        if self
            .hallucination_bins
            .iter()
            .any(|b| !(0.0..=1.0).contains(b))
        {
            return Err(SampleError::InvalidConfig(
                "hallucination bins must lie in [0, 1]".into(),
            ));
        }
        if self.hallucination_bins.windows(2).any(|w| w[0] > w[1]) {
            return Err(SampleError::InvalidConfig(
                "hallucination bins must be sorted".into(),
            ));
        }
        Ok(())
    }
}

/// One event of a target structure. `args` has an entry for every role of
/// the event type, in ontology order; `None` means the passage must not
/// express that role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpec {
    pub event_type: String,
    pub trigger: String,
    pub args: IndexMap<String, Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetStructure {
    Events {
        events: Vec<EventSpec>,
    },
    Relation {
        subject: String,
        object: String,
        relation: String,
    },
}

impl TargetStructure {
    pub fn empty() -> Self {
        TargetStructure::Events { events: Vec::new() }
    }

    pub fn events(&self) -> &[EventSpec] {
        match self {
            TargetStructure::Events { events } => events,
            TargetStructure::Relation { .. } => &[],
        }
    }

    pub fn is_relation(&self) -> bool {
        matches!(self, TargetStructure::Relation { .. })
    }

    /// Distinct event (or relation) type names in first-appearance order.
    pub fn distinct_types(&self) -> Vec<&str> {
        match self {
            TargetStructure::Events { events } => {
                let mut seen: Vec<&str> = Vec::new();
                for e in events {
                    if !seen.contains(&e.event_type.as_str()) {
                        seen.push(&e.event_type);
                    }
                }
                seen
            }
            TargetStructure::Relation { relation, .. } => vec![relation.as_str()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    pub index: usize,
    /// Event type of the first event, or the relation type for RE items.
    pub primary_event_type: String,
    pub density: usize,
    pub hallucination_bin: f64,
    pub item_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchPlan {
    pub items: Vec<PlanItem>,
}

/// Plans `n` items per event type.
///
/// Within a type, densities run over `0..=max_density` and hallucination
/// bins over the configured bins, each taken from a window of consecutive
/// residues so that every value occurs `floor` or `ceil` times, then
/// shuffled independently. The residue window of type `t` starts at `t * n`,
/// which also spreads the zero-event items evenly over types. Items are
/// interleaved across types so any prefix of the plan stays balanced.
pub fn plan_batch(config: &GenerationConfig, ontology: &Ontology) -> Result<BatchPlan, SampleError> {
    if ontology.event_types.is_empty() {
        return Err(SampleError::EmptyOntology("event"));
    }
    let types: Vec<&str> = ontology.event_types.iter().map(|e| e.name.as_str()).collect();
    plan_over(&types, config, config.max_density + 1)
}

/// Plans `n` relation items per relation type; each item is one triple.
pub fn plan_relation_batch(
    config: &GenerationConfig,
    ontology: &Ontology,
) -> Result<BatchPlan, SampleError> {
    if ontology.relation_types.is_empty() {
        return Err(SampleError::EmptyOntology("relation"));
    }
    let types: Vec<&str> = ontology.relation_types.iter().map(|r| r.name.as_str()).collect();
    let mut plan = plan_over(&types, config, 1)?;
    for item in &mut plan.items {
        item.density = 1;
        item.hallucination_bin = 0.0;
    }
    Ok(plan)
}

fn plan_over(types: &[&str], config: &GenerationConfig, densities: usize) -> Result<BatchPlan, SampleError> {
    config.validate()?;
    let n = config.n;
    let bins = &config.hallucination_bins;
    let mut rng = rng_from_seed(derive_seed(config.rng_seed, u64::MAX));

    let per_type: Vec<(Vec<usize>, Vec<f64>)> = (0..types.len())
        .map(|t| {
            let offset = t * n;
            let mut ds: Vec<usize> = (0..n).map(|j| (offset + j) % densities).collect();
            let mut bs: Vec<f64> = (0..n).map(|j| bins[(offset + j) % bins.len()]).collect();
            ds.shuffle(&mut rng);
            bs.shuffle(&mut rng);
            (ds, bs)
        })
        .collect();

    let mut items = Vec::with_capacity(n * types.len());
    for j in 0..n {
        for (t, name) in types.iter().enumerate() {
            let index = items.len();
            items.push(PlanItem {
                index,
                primary_event_type: name.to_string(),
                density: per_type[t].0[j],
                hallucination_bin: per_type[t].1[j],
                item_seed: derive_seed(config.rng_seed, index as u64),
            });
        }
    }
    Ok(BatchPlan { items })
}

/// `round(ratio * roles)` with halves rounded up.
pub fn hallucination_count(ratio: f64, roles: usize) -> usize {
    let scaled = ratio * roles as f64;
    // absorb representation error such as 0.1 * 5 = 0.5000000000000001
    let count = (scaled + 0.5 + 1e-9).floor() as usize;
    count.min(roles)
}

/// Sets exactly `hallucination_count(ratio, |roles|)` roles to `None`,
/// chosen uniformly without replacement.
pub fn apply_hallucination(mut event: EventSpec, ratio: f64, rng: &mut Rng) -> EventSpec {
    let roles = event.args.len();
    let count = hallucination_count(ratio.clamp(0.0, 1.0), roles);
    if count == 0 {
        return event;
    }
    for i in index::sample(rng, roles, count).into_iter() {
        if let Some((_, value)) = event.args.get_index_mut(i) {
            *value = None;
        }
    }
    event
}

fn pick<'a>(pools: &'a PoolSet, key: PoolKey, rng: &mut Rng) -> Result<&'a str, SampleError> {
    match pools.get(&key) {
        Some(pool) if !pool.candidates.is_empty() => {
            Ok(pool.candidates[rng.gen_range(0..pool.candidates.len())].as_str())
        }
        _ => Err(SampleError::MissingPool(key)),
    }
}

/// Builds the event structure for one plan item.
pub fn sample_target_structure(
    item: &PlanItem,
    pools: &PoolSet,
    ontology: &Ontology,
) -> Result<TargetStructure, SampleError> {
    let mut rng = rng_from_seed(item.item_seed);
    let mut events = Vec::with_capacity(item.density);
    for e in 0..item.density {
        let spec = if e == 0 {
            ontology.event_type(&item.primary_event_type)?
        } else {
            ontology
                .event_types
                .choose(&mut rng)
                .ok_or(SampleError::EmptyOntology("event"))?
        };
        let trigger = pick(
            pools,
            PoolKey::Trigger {
                event_type: spec.name.clone(),
            },
            &mut rng,
        )?
        .to_string();
        let mut args = IndexMap::with_capacity(spec.roles.len());
        for role in &spec.roles {
            let key = PoolKey::Argument {
                event_type: spec.name.clone(),
                role: role.role.clone(),
            };
            args.insert(role.role.clone(), Some(pick(pools, key, &mut rng)?.to_string()));
        }
        let event = EventSpec {
            event_type: spec.name.clone(),
            trigger,
            args,
        };
        events.push(apply_hallucination(event, item.hallucination_bin, &mut rng));
    }
    Ok(TargetStructure::Events { events })
}

fn entity_candidates(pools: &PoolSet, ontology: &Ontology, types: Option<&Vec<String>>) -> Vec<String> {
    let names: Vec<&String> = match types {
        Some(t) => t.iter().collect(),
        None => ontology.entity_types.iter().collect(),
    };
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for name in names {
        let key = PoolKey::Entity {
            entity_type: name.clone(),
        };
        for c in pools.get(&key).map(|p| p.candidates.as_slice()).unwrap_or(&[]) {
            if seen.insert(normalize_mention(c)) {
                out.push(c.clone());
            }
        }
    }
    out
}

/// Draws a (subject, object) pair of distinct entities for the item's
/// relation type.
pub fn sample_relation_structure(
    item: &PlanItem,
    entity_pools: &PoolSet,
    ontology: &Ontology,
) -> Result<TargetStructure, SampleError> {
    let spec = ontology.relation_type(&item.primary_event_type)?;
    let mut rng = rng_from_seed(item.item_seed);
    let insufficient = |found| SampleError::InsufficientCandidates {
        relation: spec.name.clone(),
        found,
    };
    let (subject, object) = if spec.subject_types.is_none() && spec.object_types.is_none() {
        let all = entity_candidates(entity_pools, ontology, None);
        if all.len() < 2 {
            return Err(insufficient(all.len()));
        }
        let pair = index::sample(&mut rng, all.len(), 2);
        (all[pair.index(0)].clone(), all[pair.index(1)].clone())
    } else {
        let subjects = entity_candidates(entity_pools, ontology, spec.subject_types.as_ref());
        let objects = entity_candidates(entity_pools, ontology, spec.object_types.as_ref());
        let subject = subjects.choose(&mut rng).ok_or_else(|| insufficient(0))?.clone();
        let others: Vec<&String> = objects.iter().filter(|o| **o != subject).collect();
        let object = (*others.choose(&mut rng).ok_or_else(|| insufficient(1))?).clone();
        (subject, object)
    };
    Ok(TargetStructure::Relation {
        subject,
        object,
        relation: spec.name.clone(),
    })
}
