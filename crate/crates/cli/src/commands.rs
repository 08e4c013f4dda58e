use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use semkge::eval::{self, Setting, TypingConfig};
use semkge::ingest::{self, DatasetLayout};
use semkge::ontology::ClassHierarchy;
use semkge::partition::{self, ClassKey, PartitionPlan};
use semkge::subgraph::{self, SelectionBudget};
use semkge::trainer::{TrainConfig, Trainer};
use semkge::{EmbeddingTable, Execution, ModelKind, TripleStore};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::presets;
use crate::{
    AnalyzeArgs, DataArgs, EvalEtArgs, EvalLpArgs, ExecArg, KeyArg, ModelArgs, OutArgs, PartitionArgs, PipelineArgs,
    PlanArgs, SelectArgs, SettingArg, StrategyArg, TrainArgs,
};

const CONFIG_FILE: &str = "config.kv";
const TRAIN_LOG: &str = "train_log.jsonl";

/// A problem with the command line rather than with the data.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    use semkge::Error as E;
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<E>() {
        Some(E::DivergedAt(_) | E::NonFinite) => 3,
        Some(
            E::InvalidConfig(_)
            | E::InvalidFraction(_)
            | E::InvalidPartitionCount { .. }
            | E::TooManyPartitions { .. }
            | E::TooManyWorkers { .. }
            | E::UnknownClass(_),
        ) => 1,
        _ => 2,
    }
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Parallel => Execution::Parallel,
            ExecArg::Sequential => Execution::Sequential,
        }
    }
}

// ---------------------------------------------------------------------------
// Inputs and outputs

fn layout(d: &DataArgs) -> Result<DatasetLayout> {
    let mut layout = if let Some(dir) = &d.data_dir {
        DatasetLayout::in_dir(dir)
    } else if let Some(name) = &d.dataset {
        let root = std::env::var_os("SEMKGE_DATA_DIR")
            .ok_or_else(|| usage(format!("--dataset {name} needs SEMKGE_DATA_DIR to be set (or pass --data-dir)")))?;
        DatasetLayout::in_dir(PathBuf::from(root).join(name))
    } else if d.train.is_some() {
        DatasetLayout::default()
    } else {
        return Err(usage("one of --dataset, --data-dir or --train is required"));
    };
    if let Some(p) = &d.train {
        layout.train_path = p.clone();
    }
    for (slot, flag) in [
        (&mut layout.valid_path, &d.valid),
        (&mut layout.test_path, &d.test),
        (&mut layout.type_assertions_path, &d.types),
        (&mut layout.hierarchy_path, &d.hierarchy),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    if !layout.train_path.exists() {
        return Err(anyhow!("training file {} not found", layout.train_path.display()));
    }
    Ok(layout)
}

struct Inputs {
    layout: DatasetLayout,
    store: TripleStore,
    hierarchy: Option<ClassHierarchy>,
}

fn load(d: &DataArgs, with_hierarchy: bool) -> Result<Inputs> {
    let layout = layout(d)?;
    let store = layout.load_store()?;
    eprintln!(
        "loaded {} triples, {} entities, {} relations",
        store.len(),
        store.num_entities(),
        store.num_relations()
    );
    let hierarchy = if with_hierarchy {
        layout.load_hierarchy(store.entities())?.map(|(h, report)| {
            if report.skipped_assertions > 0 {
                eprintln!(
                    "skipped {} type assertions on {} entities absent from the triples",
                    report.skipped_assertions,
                    report.unknown_entities.len()
                );
            }
            h
        })
    } else {
        None
    };
    Ok(Inputs { layout, store, hierarchy })
}

fn require_hierarchy(inputs: &Inputs) -> Result<&ClassHierarchy> {
    inputs.hierarchy.as_ref().ok_or_else(|| anyhow!("no entity type file (entity_types.tsv or --types)"))
}

fn run_dir(out: &OutArgs, seed: u64) -> Result<PathBuf> {
    let dir = match &out.out {
        Some(dir) => dir.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
            let base = out.runs_root.join(format!("{stamp}-seed{seed}"));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = PathBuf::from(format!("{}-{n}", base.display()));
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn finish(manifest: RunManifest, dir: &Path) -> Result<()> {
    manifest.write(dir)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration

fn build_config(dataset: Option<&str>, args: &ModelArgs, base: Option<TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = match base {
        Some(cfg) => cfg,
        None => presets::base_config(dataset, &args.model)?,
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_kv(&text)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_plan(store: &TripleStore, hierarchy: Option<&ClassHierarchy>, args: &PlanArgs, seed: u64) -> Result<PartitionPlan> {
    Ok(match args.strategy {
        StrategyArg::Random => partition::partition_random(store, args.k, seed)?,
        StrategyArg::Semantic => {
            let h = hierarchy.ok_or_else(|| anyhow!("semantic partitioning needs an entity type file"))?;
            let key = match args.key {
                KeyArg::Head => ClassKey::Head,
                KeyArg::Tail => ClassKey::Tail,
            };
            partition::partition_semantic(store, h, args.k, key)?
        }
    })
}

fn plan_summary(plan: &PartitionPlan, store: &TripleStore) -> String {
    let stats = partition::plan_stats(plan, store);
    let mut out = format!("{:>4} {:>10}  {}\n", "id", "triples", "label");
    for m in &plan.partitions {
        out.push_str(&format!("{:>4} {:>10}  {}\n", m.id, m.size, m.label));
    }
    out.push_str(&format!("balance {:.4}, entity overlap {:.4}\n", stats.balance, stats.entity_overlap));
    out
}

// ---------------------------------------------------------------------------
// Subcommands

pub fn analyze_classes(args: AnalyzeArgs) -> Result<()> {
    let mut manifest = RunManifest::new("analyze-classes");
    let inputs = manifest.stage("load", || load(&args.data, true))?;
    let h = require_hierarchy(&inputs)?;
    let dir = run_dir(&args.out, 0)?;
    manifest.digest_inputs(inputs.layout.input_paths())?;
    let mut tsv = String::from("class\tdepth\tdirect_count\tclosure_count\n");
    for row in h.frequency_report() {
        tsv.push_str(&format!("{}\t{}\t{}\t{}\n", row.class, row.depth, row.direct_count, row.closure_count));
    }
    fs::write(dir.join("class_report.tsv"), &tsv)?;
    print!("{tsv}");
    manifest.config = json!({ "classes": h.num_classes() });
    finish(manifest, &dir)
}

pub fn partition(args: PartitionArgs) -> Result<()> {
    let mut manifest = RunManifest::new("partition");
    let with_types = args.plan.strategy == StrategyArg::Semantic;
    let inputs = manifest.stage("load", || load(&args.data, with_types))?;
    let plan = manifest.stage("partition", || make_plan(&inputs.store, inputs.hierarchy.as_ref(), &args.plan, args.seed))?;
    let dir = run_dir(&args.out, args.seed)?;
    manifest.digest_inputs(inputs.layout.input_paths())?;
    partition::write_plan(&plan, &dir)?;
    write_json(&dir, "plan_stats.json", &partition::plan_stats(&plan, &inputs.store))?;
    print!("{}", plan_summary(&plan, &inputs.store));
    manifest.seed("partition", args.seed);
    manifest.config = json!({
        "strategy": format!("{:?}", args.plan.strategy).to_lowercase(),
        "k": args.plan.k,
        "key": format!("{:?}", args.plan.key).to_lowercase(),
    });
    finish(manifest, &dir)
}

pub fn select_subgraph(args: SelectArgs) -> Result<()> {
    let mut manifest = RunManifest::new("select-subgraph");
    let semantic = args.strategy == StrategyArg::Semantic;
    let inputs = manifest.stage("load", || load(&args.data, semantic))?;
    let selected = manifest.stage("select", || match args.strategy {
        StrategyArg::Random => Ok(subgraph::select_random(&inputs.store, args.p, args.seed)?),
        StrategyArg::Semantic => {
            let class = args.class.as_deref().ok_or_else(|| usage("--strategy semantic needs --class"))?;
            let h = require_hierarchy(&inputs)?;
            let budget = SelectionBudget { p: args.p, target_class: h.class_id(class)?, hops: args.hops };
            Ok(subgraph::select_semantic(&inputs.store, h, &budget)?)
        }
    })?;
    let dir = run_dir(&args.out, args.seed)?;
    manifest.digest_inputs(inputs.layout.input_paths())?;
    let text: String = selected.iter().map(|i| format!("{i}\n")).collect();
    fs::write(dir.join("selected.txt"), text)?;
    eprintln!("selected {} of {} training triples", selected.len(), inputs.store.train().len());
    manifest.seed("select", args.seed);
    manifest.config = json!({
        "strategy": format!("{:?}", args.strategy).to_lowercase(),
        "p": args.p,
        "class": args.class,
        "hops": args.hops,
        "selected": selected.len(),
    });
    finish(manifest, &dir)
}

/// Trains, then writes embeddings, dictionaries, the checkpoint, the log and
/// the effective configuration into `dir`.
fn train_into(
    dir: &Path,
    manifest: &mut RunManifest,
    store: &TripleStore,
    plan: &PartitionPlan,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    exec: Execution,
) -> Result<EmbeddingTable> {
    let mut trainer = match resume {
        Some(from) => Trainer::resume(from, store, plan, Some(cfg))?,
        None => Trainer::new(store, plan, cfg.clone())?,
    };
    manifest.stage("train", || Ok(trainer.run(exec)?))?;
    trainer.checkpoint(dir)?;
    ingest::write_dictionary(&dir.join(ingest::ENTITY_DICT), store.entities())?;
    ingest::write_dictionary(&dir.join(ingest::RELATION_DICT), store.relations())?;
    fs::write(dir.join(CONFIG_FILE), trainer.config().to_kv())?;
    fs::write(dir.join(TRAIN_LOG), trainer.log().to_jsonl())?;
    if let Some(last) = trainer.log().epochs.last() {
        eprintln!("epoch {}: mean loss {:.6}", last.epoch, last.mean_loss);
    }
    manifest.config = serde_json::to_value(trainer.config())?;
    Ok(trainer.finish().0)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::new("train");
    let stored = match &args.resume {
        Some(dir) => Some(read_config(dir)?),
        None => None,
    };
    let cfg = build_config(args.data.dataset.as_deref(), &args.model, stored)?;
    let inputs = manifest.stage("load", || load(&args.data, false))?;
    let plan_dir = args.plan.clone().or_else(|| {
        args.resume.clone().filter(|d| d.join(partition::PLAN_FILE).exists())
    });
    let plan = match &plan_dir {
        Some(d) => {
            let plan = partition::read_plan(d)?;
            plan.validate(inputs.store.train().len())?;
            plan
        }
        None => partition::partition_random(&inputs.store, cfg.workers, cfg.seed)?,
    };
    let dir = run_dir(&args.out, cfg.seed)?;
    manifest.digest_inputs(inputs.layout.input_paths())?;
    if let Some(d) = &plan_dir {
        manifest.digest_inputs([d.join(partition::PLAN_FILE).as_path()])?;
    }
    partition::write_plan(&plan, &dir)?;
    manifest.seed("train", cfg.seed);
    train_into(&dir, &mut manifest, &inputs.store, &plan, &cfg, args.resume.as_deref(), args.model.exec.into())?;
    finish(manifest, &dir)
}

fn read_config(dir: &Path) -> Result<TrainConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::from_kv(&text)?)
}

/// Loads embeddings trained on `store`.
fn load_table(dir: Option<&Path>, store: &TripleStore) -> Result<EmbeddingTable> {
    let dir = dir.ok_or_else(|| anyhow!("no trained table given; pass --embeddings <dir> from a train run"))?;
    if !dir.join(ingest::ENTITY_MATRIX).exists() {
        return Err(anyhow!("no trained table in {}", dir.display()));
    }
    let (table, entities, relations) = ingest::read_embeddings(dir)?;
    if entities.names() != store.entities().names() || relations.names() != store.relations().names() {
        return Err(anyhow!("embeddings in {} were trained on a different set of triples", dir.display()));
    }
    Ok(table)
}

/// `--model` if given, else the model recorded next to the embeddings.
fn resolve_model(dir: Option<&Path>, model: Option<&str>) -> Result<ModelKind> {
    match (model, dir) {
        (Some(m), _) => Ok(presets::base_config(None, m)?.model),
        (None, Some(dir)) => Ok(read_config(dir)?.model),
        (None, None) => Err(usage("--model is required without --embeddings")),
    }
}

pub fn eval_lp(args: EvalLpArgs) -> Result<()> {
    let mut manifest = RunManifest::new("eval-lp");
    let inputs = manifest.stage("load", || load(&args.data, false))?;
    let table = load_table(args.embeddings.as_deref(), &inputs.store)?;
    let model = resolve_model(args.embeddings.as_deref(), args.model.as_deref())?;
    let setting = match args.setting {
        SettingArg::Filtered => Setting::Filtered,
        SettingArg::Raw => Setting::Raw,
    };
    let report = manifest.stage("eval-lp", || Ok(eval::eval_lp(&table, &model, &inputs.store, setting, args.exec.into())?))?;
    let dir = run_dir(&args.out, 0)?;
    manifest.digest_inputs(inputs.layout.input_paths())?;
    if let Some(e) = &args.embeddings {
        manifest.digest_inputs([e.join(ingest::ENTITY_MATRIX).as_path(), e.join(ingest::RELATION_MATRIX).as_path()])?;
    }
    write_json(&dir, "eval_lp.json", &report)?;
    print!("{}", report.to_table());
    manifest.config = json!({ "model": model, "setting": report.setting });
    finish(manifest, &dir)
}

pub fn eval_et(args: EvalEtArgs) -> Result<()> {
    let mut manifest = RunManifest::new("eval-et");
    let inputs = manifest.stage("load", || load(&args.data, true))?;
    let h = require_hierarchy(&inputs)?;
    let table = load_table(args.embeddings.as_deref(), &inputs.store)?;
    let cfg = TypingConfig::default();
    let report = manifest.stage("eval-et", || Ok(eval::eval_typing(&table, h, args.seed, &cfg, args.exec.into())?))?;
    let dir = run_dir(&args.out, args.seed)?;
    manifest.digest_inputs(inputs.layout.input_paths())?;
    if let Some(e) = &args.embeddings {
        manifest.digest_inputs([e.join(ingest::ENTITY_MATRIX).as_path()])?;
    }
    write_json(&dir, "eval_et.json", &report)?;
    print!("{}", report.to_table());
    manifest.seed("split", args.seed);
    manifest.config = serde_json::to_value(&cfg)?;
    finish(manifest, &dir)
}

pub fn pipeline(args: PipelineArgs) -> Result<()> {
    let mut manifest = RunManifest::new("pipeline");
    let cfg = build_config(args.data.dataset.as_deref(), &args.model, None)?;
    let inputs = manifest.stage("load", || load(&args.data, true))?;
    let plan = manifest.stage("partition", || make_plan(&inputs.store, inputs.hierarchy.as_ref(), &args.plan, cfg.seed))?;
    let dir = run_dir(&args.out, cfg.seed)?;
    manifest.digest_inputs(inputs.layout.input_paths())?;
    partition::write_plan(&plan, &dir)?;
    write_json(&dir, "plan_stats.json", &partition::plan_stats(&plan, &inputs.store))?;
    manifest.seed("train", cfg.seed);
    manifest.seed("partition", cfg.seed);
    let exec: Execution = args.model.exec.into();
    let table = train_into(&dir, &mut manifest, &inputs.store, &plan, &cfg, None, exec)?;
    let config = manifest.config.take();
    let report = manifest.stage("eval-lp", || Ok(eval::eval_lp(&table, &cfg.model, &inputs.store, Setting::Filtered, exec)?))?;
    write_json(&dir, "eval_lp.json", &report)?;
    print!("{}", report.to_table());
    if let Some(h) = &inputs.hierarchy {
        match manifest.stage("eval-et", || Ok(eval::eval_typing(&table, h, cfg.seed, &TypingConfig::default(), exec)?)) {
            Ok(typing) => {
                write_json(&dir, "eval_et.json", &typing)?;
                print!("{}", typing.to_table());
            }
            Err(e) if matches!(e.downcast_ref::<semkge::Error>(), Some(semkge::Error::NoTypingClasses)) => {
                eprintln!("entity typing skipped: no class has enough labelled entities");
            }
            Err(e) => return Err(e),
        }
    }
    manifest.config = json!({
        "train": config,
        "plan": {
            "strategy": format!("{:?}", args.plan.strategy).to_lowercase(),
            "k": args.plan.k,
            "key": format!("{:?}", args.plan.key).to_lowercase(),
        },
    });
    finish(manifest, &dir)
}
