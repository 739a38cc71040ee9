//! End-to-end orchestration shared by the CLI and the Python bindings.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, ChatBackend, ChatRequest};
use crate::codec::{self, AnnotatedPassage, SpanLabel};
use crate::dataset::{DataInstance, Provenance, TraceSummary};
use crate::ontology::{load_ontology_file, Ontology};
use crate::pools::{read_seeds, PoolBuilder, PoolKey, PoolSet, PoolSettings, SeedDemonstration};
use crate::prompt::{build_passage_prompt_with_types, select_demonstrations, PromptBundle, Task};
use crate::refine::{
    self, clean_completion, dedup_flags, Checkers, Dimension, EntailmentAnswerChecker, Gazetteer,
    HttpEntailmentJudge, HttpPosTagger, PosCheck, QualityFlag, RefineSettings, Reflector, StopReason, Strategy,
};
use crate::sampler::{
    plan_batch, plan_relation_batch, sample_relation_structure, sample_target_structure, BatchPlan,
    GenerationConfig, PlanItem, TargetStructure,
};
use crate::{Error, Result};

fn default_max_iterations() -> usize {
    3
}

fn default_model() -> String {
    "gpt-3.5-turbo".into()
}

fn default_temperature() -> f64 {
    0.8
}

fn default_max_tokens() -> u32 {
    512
}

fn default_reflection_tokens() -> u32 {
    64
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerCheckerKind {
    #[default]
    Lexical,
    Entailment,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckerConfig {
    pub answer_checker: AnswerCheckerKind,
    /// `{premise, hypothesis}` -> `{entailed, score}` service.
    pub entailment: Option<BackendConfig>,
    /// `{text}` -> `{tokens, pos_tags}` service.
    pub pos_tagger: Option<BackendConfig>,
    /// Recognize entities from seed annotations and entity pools.
    pub gazetteer: bool,
}

/// One run's configuration. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub task: Task,
    pub ontology: PathBuf,
    #[serde(default)]
    pub seeds: Option<PathBuf>,
    #[serde(default)]
    pub pools: Option<PathBuf>,
    pub generation: GenerationConfig,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_reflection_tokens")]
    pub reflection_max_tokens: u32,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub pool_settings: PoolSettings,
    #[serde(default)]
    pub checkers: CheckerConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_backend(base: &Path, b: &mut BackendConfig) {
    if let Some(c) = b.cassette_path.as_mut() {
        resolve(base, c);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.ontology);
        for p in [&mut cfg.seeds, &mut cfg.pools, &mut cfg.output].into_iter().flatten() {
            resolve(base, p);
        }
        resolve_backend(base, &mut cfg.backend);
        for b in [&mut cfg.checkers.entailment, &mut cfg.checkers.pos_tagger].into_iter().flatten() {
            resolve_backend(base, b);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.backend.validate()?;
        Ok(())
    }

    pub fn refine_settings(&self) -> RefineSettings {
        RefineSettings {
            strategy: self.strategy,
            max_iterations: self.max_iterations,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// Loaded inputs of a run.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: RunConfig,
    pub ontology: Ontology,
    pub seeds: Vec<SeedDemonstration>,
    pub pools: PoolSet,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

impl Workspace {
    /// Loads the ontology and seeds, and the pools when `with_pools`.
    pub fn open(config: RunConfig, with_pools: bool) -> Result<Self> {
        require(&config.ontology, "ontology")?;
        let ontology = load_ontology_file(&config.ontology)?;
        let seeds = match &config.seeds {
            Some(p) => {
                require(p, "seeds")?;
                read_seeds(p)?
            }
            None => Vec::new(),
        };
        let pools = if with_pools {
            let p = config
                .pools
                .as_ref()
                .ok_or_else(|| Error::Config("no pools file configured".into()))?;
            require(p, "pools")?;
            PoolSet::load(p)?
        } else {
            PoolSet::default()
        };
        Ok(Workspace {
            config,
            ontology,
            seeds,
            pools,
        })
    }

    pub fn plan(&self) -> Result<BatchPlan> {
        Ok(match self.config.task {
            Task::Ee => plan_batch(&self.config.generation, &self.ontology)?,
            Task::Re => plan_relation_batch(&self.config.generation, &self.ontology)?,
        })
    }

    pub fn sample(&self, item: &PlanItem) -> Result<TargetStructure> {
        Ok(match self.config.task {
            Task::Ee => sample_target_structure(item, &self.pools, &self.ontology)?,
            Task::Re => sample_relation_structure(item, &self.pools, &self.ontology)?,
        })
    }

    /// Generation prompt for `y`. An item without events still names its
    /// primary type, so the passage has a type to stay clear of.
    pub fn prompt_for(&self, y: &TargetStructure, item: &PlanItem) -> Result<PromptBundle> {
        let demos = select_demonstrations(&self.seeds, y, self.config.generation.k);
        let mut types = y.distinct_types();
        if types.is_empty() {
            types.push(&item.primary_event_type);
        }
        Ok(build_passage_prompt_with_types(y, &demos, &self.ontology, self.config.task, &types)?)
    }

    /// Every pool key the configured task needs, in ontology order.
    pub fn pool_keys(&self) -> Vec<PoolKey> {
        match self.config.task {
            Task::Ee => self
                .ontology
                .event_types
                .iter()
                .flat_map(|et| {
                    std::iter::once(PoolKey::Trigger {
                        event_type: et.name.clone(),
                    })
                    .chain(et.roles.iter().map(|r| PoolKey::Argument {
                        event_type: et.name.clone(),
                        role: r.role.clone(),
                    }))
                })
                .collect(),
            Task::Re => self
                .ontology
                .entity_types
                .iter()
                .map(|t| PoolKey::Entity { entity_type: t.clone() })
                .collect(),
        }
    }

    /// Fills every pool the task needs.
    pub fn build_pools(&self, backend: &dyn ChatBackend, workers: usize) -> Result<PoolSet> {
        let settings = &self.config.pool_settings;
        let builder = PoolBuilder::new(&self.ontology, backend, settings.clone());
        let keys = self.pool_keys();
        let pools = run_parallel(workers, &keys, |key| {
            let pool = builder.fill_pool(key, settings.target_for(key), settings.max_queries, &self.seeds)?;
            if !pool.complete {
                log::warn!("{key}: {} of {} candidates", pool.candidates.len(), pool.target_size);
            }
            Ok(pool)
        })?;
        Ok(pools.into_iter().collect())
    }

    /// Checkers as configured, built on the seeds and pools for the
    /// gazetteer.
    pub fn checkers(&self) -> Result<Checkers> {
        let cfg = &self.config.checkers;
        let mut checkers = Checkers::default();
        if let Some(b) = &cfg.entailment {
            checkers.entailment = Some(Arc::new(HttpEntailmentJudge::new(b)?));
        }
        if cfg.answer_checker == AnswerCheckerKind::Entailment {
            let judge = checkers.entailment.clone().ok_or_else(|| {
                Error::Config("answer_checker = entailment requires checkers.entailment".into())
            })?;
            checkers.answer = Arc::new(EntailmentAnswerChecker { judge });
        }
        if let Some(b) = &cfg.pos_tagger {
            checkers.pos = Some(PosCheck::nominal(Arc::new(HttpPosTagger::new(b)?)));
        }
        if cfg.gazetteer {
            let mut g = Gazetteer::default();
            for seed in &self.seeds {
                for (mention, ty) in &seed.entity_types {
                    g.insert(mention, ty);
                }
            }
            for pool in self.pools.iter() {
                if let PoolKey::Entity { entity_type } = &pool.key {
                    for c in &pool.candidates {
                        g.insert(c, entity_type);
                    }
                }
            }
            checkers.recognizer = Some(Arc::new(g));
        }
        Ok(checkers)
    }

    fn reflector<'a>(&'a self, backend: &'a dyn ChatBackend, checkers: &'a Checkers, item: &PlanItem) -> Reflector<'a> {
        Reflector {
            ontology: &self.ontology,
            backend,
            checkers,
            model_id: self.config.model_id.clone(),
            max_tokens: self.config.reflection_max_tokens,
            seed: Some(item.item_seed),
        }
    }
}

/// Maps `f` over `items` on `workers` threads, keeping input order.
pub fn run_parallel<T: Sync, R: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub workers: usize,
    pub dump_prompts: Option<PathBuf>,
    pub with_refine: bool,
}

pub fn instance_id(task: Task, index: usize) -> String {
    format!("{task}-{index:06}")
}

/// Flags for every non-empty mention of `y` that has no span, unless a
/// flag for that slot is already present.
pub fn coverage_flags(y: &TargetStructure, passage: &AnnotatedPassage, existing: &[QualityFlag]) -> Vec<QualityFlag> {
    let dim = if y.is_relation() { Dimension::RE1 } else { Dimension::EE1 };
    codec::expected_mentions(y)
        .into_iter()
        .filter(|(i, label, _)| passage.span_for(*i, label).is_none())
        .filter(|(i, label, _)| {
            !existing
                .iter()
                .any(|f| f.event_index == *i && f.slot == label.as_str() && f.dimension == dim)
        })
        .map(|(i, label, mention)| QualityFlag {
            event_index: i,
            dimension: dim,
            slot: label.as_str().to_string(),
            mention: Some(mention),
            detail: "no span for this mention in the passage".into(),
        })
        .collect()
}

/// The flags an instance should carry: the audit result plus coverage.
pub fn remaining_flags(y: &TargetStructure, passage: &AnnotatedPassage, audit: &[QualityFlag]) -> Vec<QualityFlag> {
    let mut all = audit.to_vec();
    all.extend(coverage_flags(y, passage, audit));
    dedup_flags(all)
}

struct Outcome {
    tagged: String,
    passage: AnnotatedPassage,
    strategy: Strategy,
    t: usize,
    stop_reason: StopReason,
    audit: Vec<QualityFlag>,
    recorded_at: String,
}

impl Workspace {
    #[allow(clippy::too_many_arguments)]
    fn run_refine(
        &self,
        item: &PlanItem,
        y: &TargetStructure,
        x0: &str,
        prompt: &str,
        recorded_at: String,
        backend: &dyn ChatBackend,
        checkers: &Checkers,
    ) -> Result<Outcome> {
        let settings = self.config.refine_settings();
        let reflector = self.reflector(backend, checkers, item);
        let refined = refine::refine(y, x0, prompt, &reflector, &settings).map_err(|abort| {
            log::error!("{abort}");
            Error::Refine(abort.error)
        })?;
        Ok(Outcome {
            passage: refined.report.passage,
            tagged: refined.tagged,
            strategy: settings.strategy,
            t: refined.trace.t,
            stop_reason: refined.trace.stop_reason,
            audit: refined.trace.final_flags().to_vec(),
            recorded_at: refined.last_recorded_at.unwrap_or(recorded_at),
        })
    }

    fn build_instance(&self, item: &PlanItem, y: TargetStructure, prompt_hash: String, out: Outcome) -> DataInstance {
        let flags = remaining_flags(&y, &out.passage, &out.audit);
        DataInstance {
            id: instance_id(self.config.task, item.index),
            task: self.config.task,
            passage: out.passage.text,
            structure: y,
            spans: out.passage.spans,
            provenance: Provenance {
                model_id: self.config.model_id.clone(),
                k: self.config.generation.k,
                plan_item: item.clone(),
                prompt_hash,
                strategy: out.strategy,
                trace_summary: TraceSummary {
                    t: out.t,
                    stop_reason: out.stop_reason,
                    flags_remaining: flags,
                },
            },
            created_at: out.recorded_at,
        }
    }

    /// plan item -> structure -> prompt -> completion -> decode, and
    /// refinement when `with_refine`.
    pub fn generate_item(
        &self,
        item: &PlanItem,
        backend: &dyn ChatBackend,
        checkers: &Checkers,
        opts: &GenerateOptions,
    ) -> Result<DataInstance> {
        let y = self.sample(item)?;
        let bundle = self.prompt_for(&y, item)?;
        if let Some(dir) = &opts.dump_prompts {
            let path = dir.join(format!("{}.txt", bundle.content_hash));
            fs::write(&path, &bundle.rendered).map_err(|e| Error::io(&path, e))?;
        }
        let request = ChatRequest::prompt(&self.config.model_id, bundle.rendered.clone(), self.config.temperature, self.config.max_tokens)
            .with_seed(Some(item.item_seed));
        let completion = backend.complete(&request)?;
        let x0 = clean_completion(&completion.text);
        let outcome = if opts.with_refine {
            self.run_refine(item, &y, &x0, &bundle.rendered, completion.recorded_at, backend, checkers)?
        } else {
            let report = codec::decode(&x0, &y, &self.ontology);
            Outcome {
                tagged: x0,
                passage: report.passage,
                strategy: Strategy::NoCheck,
                t: 0,
                stop_reason: StopReason::Clean,
                audit: Vec::new(),
                recorded_at: completion.recorded_at,
            }
        };
        log::debug!("{}: {}", item.index, outcome.tagged);
        Ok(self.build_instance(item, y, bundle.content_hash, outcome))
    }

    /// Generates one instance per plan item, in plan order.
    pub fn generate(
        &self,
        plan: &BatchPlan,
        backend: &dyn ChatBackend,
        checkers: &Checkers,
        opts: &GenerateOptions,
    ) -> Result<Vec<DataInstance>> {
        if let Some(dir) = &opts.dump_prompts {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        run_parallel(opts.workers, &plan.items, |item| self.generate_item(item, backend, checkers, opts))
    }

    /// Runs the configured refinement strategy on an existing instance.
    pub fn refine_instance(&self, inst: &DataInstance, backend: &dyn ChatBackend, checkers: &Checkers) -> Result<DataInstance> {
        let bundle = self.prompt_for(&inst.structure, &inst.provenance.plan_item)?;
        if bundle.content_hash != inst.provenance.prompt_hash {
            log::warn!("{}: rebuilt prompt differs from the recorded one", inst.id);
        }
        let annotated = AnnotatedPassage::new(inst.passage.clone(), inst.spans.clone());
        let x0 = codec::encode(&annotated).unwrap_or_else(|_| inst.passage.clone());
        let out = self.run_refine(&inst.provenance.plan_item, &inst.structure, &x0, &bundle.rendered, inst.created_at.clone(), backend, checkers)?;
        let mut refined = self.build_instance(&inst.provenance.plan_item, inst.structure.clone(), inst.provenance.prompt_hash.clone(), out);
        refined.id = inst.id.clone();
        refined.provenance.model_id = inst.provenance.model_id.clone();
        refined.provenance.k = inst.provenance.k;
        Ok(refined)
    }

    pub fn refine_all(&self, instances: &[DataInstance], backend: &dyn ChatBackend, checkers: &Checkers, workers: usize) -> Result<Vec<DataInstance>> {
        run_parallel(workers, instances, |inst| self.refine_instance(inst, backend, checkers))
    }

    /// Re-audits every instance and compares with its recorded flags.
    pub fn validate(
        &self,
        instances: &[DataInstance],
        backend: &dyn ChatBackend,
        checkers: &Checkers,
        strategy: Option<Strategy>,
        workers: usize,
    ) -> Result<ValidationReport> {
        let results = run_parallel(workers, instances, |inst| {
            let reflector = self.reflector(backend, checkers, &inst.provenance.plan_item);
            let problems = structural_problems(inst, &self.ontology);
            let passage = AnnotatedPassage::new(inst.passage.clone(), inst.spans.clone());
            let strategy = strategy.unwrap_or(inst.provenance.strategy);
            let audit = reflector
                .identify_errors(&inst.structure, &passage, strategy)
                .map_err(Error::Refine)?;
            let flags = remaining_flags(&inst.structure, &passage, &audit);
            Ok(InstanceValidation {
                id: inst.id.clone(),
                problems,
                consistent: flag_keys(&flags) == flag_keys(&inst.provenance.trace_summary.flags_remaining),
                flags,
            })
        })?;
        Ok(ValidationReport { instances: results })
    }
}

fn flag_keys(flags: &[QualityFlag]) -> BTreeSet<(usize, Dimension, String)> {
    flags
        .iter()
        .map(|f| (f.event_index, f.dimension, f.slot.clone()))
        .collect()
}

/// Violations of the instance schema against the ontology.
pub fn structural_problems(inst: &DataInstance, ontology: &Ontology) -> Vec<String> {
    let mut problems = Vec::new();
    let len = inst.passage.chars().count();
    match &inst.structure {
        TargetStructure::Events { events } => {
            for (i, ev) in events.iter().enumerate() {
                match ontology.event_type(&ev.event_type) {
                    Err(e) => problems.push(format!("event {}: {e}", i + 1)),
                    Ok(spec) => {
                        for role in ev.args.keys() {
                            if spec.role(role).is_none() {
                                problems.push(format!("event {}: unknown role {role}", i + 1));
                            }
                        }
                    }
                }
            }
            for s in &inst.spans {
                if let SpanLabel::Role(r) = &s.label {
                    if events.get(s.event_index).is_some_and(|e| !e.args.contains_key(r)) {
                        problems.push(format!("span {}..{} labels unknown role {r}", s.start, s.end));
                    }
                }
                if s.event_index >= events.len() {
                    problems.push(format!("span {}..{} refers to missing event {}", s.start, s.end, s.event_index + 1));
                }
            }
        }
        TargetStructure::Relation { relation, .. } => {
            if let Err(e) = ontology.relation_type(relation) {
                problems.push(e.to_string());
            }
        }
    }
    let mut spans = inst.spans.clone();
    spans.sort();
    for s in &spans {
        if s.start >= s.end || s.end > len {
            problems.push(format!("span {}..{} ({}) is out of bounds", s.start, s.end, s.label));
        }
    }
    for w in spans.windows(2) {
        if w[1].start < w[0].end {
            problems.push(format!("spans {}..{} and {}..{} overlap", w[0].start, w[0].end, w[1].start, w[1].end));
        }
    }
    problems
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceValidation {
    pub id: String,
    pub problems: Vec<String>,
    pub flags: Vec<QualityFlag>,
    /// The re-audit found exactly the recorded remaining flags.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub instances: Vec<InstanceValidation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.instances.iter().all(|i| i.problems.is_empty() && i.consistent)
    }

    pub fn flag_count(&self) -> usize {
        self.instances.iter().map(|i| i.flags.len()).sum()
    }
}

