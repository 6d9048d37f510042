//! The five subcommands. Each writes into a fresh run directory and echoes
//! its effective configuration there as `config.txt`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use ldg::config::ModelConfig;
use ldg::eval::{
    attention_auc, evaluate, frequency_baseline, no_learn_baseline, save_auc_csv, AucRow, BlendSpec, EvalOptions,
    FrequencyTable, RankResult,
};
use ldg::events::{load_associations, load_events, AssociationState, EventKind, EventStream, NodeRegistry};
use ldg::model::{rng_for, ModelState};
use ldg::params::ParamStore;
use ldg::synth::{generate, PlantedWorld, DEFAULT_HORIZON};
use ldg::trainer::{save_metrics, train, EpochMetrics, TrainConfig};

use crate::exit::{CliError, ExitKind};
use crate::plot::training_curves;
use crate::runconfig::{Command, RunConfig};

const CONFIG_FILE: &str = "config.txt";
const PARAMS_FILE: &str = "params.ckpt";
const STATE_FILE: &str = "state.txt";

/// Creates `out/<command>-<UTC timestamp>`, adding a numeric suffix rather
/// than reusing an existing directory.
pub fn create_run_dir(out: &Path, command: Command) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    for n in 1.. {
        let name = if n == 1 {
            format!("{}-{stamp}", command.name())
        } else {
            format!("{}-{stamp}-{n}", command.name())
        };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn start_run(cfg: &RunConfig, command: Command) -> anyhow::Result<PathBuf> {
    let out = cfg.path("out").unwrap_or_else(|| PathBuf::from("runs"));
    let dir = create_run_dir(&out, command)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Path stored under `key`, which must be set and exist.
fn input_file(cfg: &RunConfig, key: &str, what: &str) -> anyhow::Result<PathBuf> {
    let p = cfg
        .path(key)
        .ok_or_else(|| CliError::new(ExitKind::MissingFile, format!("no {what} given (set {key})")))?;
    if !p.exists() {
        return Err(CliError::new(ExitKind::MissingFile, format!("{what} {} does not exist", p.display())).into());
    }
    Ok(p)
}

fn optional_file(cfg: &RunConfig, key: &str, what: &str) -> anyhow::Result<Option<PathBuf>> {
    match cfg.raw(key) {
        None => Ok(None),
        Some(_) => input_file(cfg, key, what).map(Some),
    }
}

/// Events plus optional initial associations over a common node count:
/// `nodes` when set, otherwise one past the largest id in the events file.
struct Inputs {
    stream: EventStream,
    assoc: Option<AssociationState>,
}

fn load_inputs(cfg: &RunConfig) -> anyhow::Result<Inputs> {
    let events = input_file(cfg, "events", "events file")?;
    let min_prob: f64 = cfg.require("min_prob")?;
    let registry = cfg.get::<usize>("nodes")?.map(NodeRegistry::anonymous);
    let stream = load_events(&events, registry.as_ref(), min_prob)?.stream;
    let assoc = optional_file(cfg, "assoc", "association file")?
        .map(|p| load_associations(&p, stream.n_nodes()).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    Ok(Inputs { stream, assoc })
}

/// Training part and test part of `stream` under the `train_until` key.
fn split_stream(cfg: &RunConfig, stream: &EventStream) -> anyhow::Result<(EventStream, Option<EventStream>)> {
    Ok(match cfg.get::<f64>("train_until")? {
        Some(t) => {
            let (a, b) = stream.split(t);
            (a, Some(b))
        }
        None => (stream.clone(), None),
    })
}

/// Association state after the association events of `stream`.
fn associations_after(initial: Option<&AssociationState>, stream: &EventStream) -> anyhow::Result<AssociationState> {
    let mut a = initial
        .cloned()
        .unwrap_or_else(|| AssociationState::empty(stream.n_nodes()));
    for e in stream.iter().filter(|e| e.kind == EventKind::Association) {
        a.apply_mut(e)?;
    }
    Ok(a)
}

pub fn train_config(cfg: &RunConfig, n_nodes: usize) -> anyhow::Result<TrainConfig> {
    let mut model = ModelConfig::new(n_nodes);
    model.attention = cfg.require("attention")?;
    model.prior = cfg.require("prior")?;
    model.interaction = cfg.require("interaction")?;
    model.edge_types = cfg.require("edge_types")?;
    model.dim = cfg.require("dim")?;
    model.embedding_init = cfg.require("embedding_init")?;
    let mut t = TrainConfig::new(n_nodes);
    t.model = model;
    t.epochs = cfg.require("epochs")?;
    t.lr = cfg.require("lr")?;
    t.batch = cfg.require("batch")?;
    t.nonevent_multiplier = cfg.require("nonevent_multiplier")?;
    t.validation_fraction = cfg.require("validation_fraction")?;
    t.patience = cfg.get("patience")?.unwrap_or(t.epochs);
    t.seed = cfg.require("seed")?;
    t.record_wall_time = cfg.require("record_wall_time")?;
    t.validate()?;
    Ok(t)
}

pub fn cmd_train(mut cfg: RunConfig) -> anyhow::Result<PathBuf> {
    let inputs = load_inputs(&cfg)?;
    let n = inputs.stream.n_nodes();
    // pin the node count so evaluation reads test files the same way
    cfg.set("nodes", &n.to_string())?;
    let tcfg = train_config(&cfg, n)?;
    let (fit, _) = split_stream(&cfg, &inputs.stream)?;
    let dir = start_run(&cfg, Command::Train)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir(&ckpt_dir)?;

    let mut rows: Vec<EpochMetrics> = Vec::new();
    let result = train(&fit, inputs.assoc.as_ref(), &tcfg, |m, params| {
        params.save(&ckpt_dir.join(format!("epoch{}.ckpt", m.epoch)))?;
        rows.push(m.clone());
        save_metrics(&rows, &dir.join("metrics.csv"))
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e @ ldg::Error::NonFinite(_)) => {
            let last = rows.last().map_or("none".to_string(), |m| format!("epoch{}.ckpt", m.epoch));
            return Err(anyhow::Error::new(e).context(format!(
                "training diverged in {}; last good checkpoint: {last}",
                dir.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_metrics(&outcome.metrics, &dir.join("metrics.csv"))?;
    write(&dir.join("loss.svg"), &training_curves(&outcome.metrics))?;
    outcome.params.save(&dir.join(PARAMS_FILE))?;
    outcome.state.save(&dir.join(STATE_FILE))?;
    outcome.state.nodes.save_embeddings(&dir.join("embeddings.csv"))?;
    write(
        &dir.join("summary.txt"),
        &format!(
            "best_epoch = {}\nepochs_run = {}\nstopped_early = {}\n",
            outcome.best_epoch,
            outcome.metrics.len(),
            outcome.stopped_early
        ),
    )?;
    Ok(dir)
}

/// A finished training run read back from its directory.
struct TrainedRun {
    cfg: RunConfig,
    train: TrainConfig,
    params: ParamStore,
    state: ModelState,
}

fn load_run(eval_cfg: &RunConfig) -> anyhow::Result<TrainedRun> {
    let dir = input_file(eval_cfg, "checkpoint", "checkpoint directory")?;
    for f in [CONFIG_FILE, PARAMS_FILE, STATE_FILE] {
        if !dir.join(f).exists() {
            return Err(CliError::new(
                ExitKind::MissingFile,
                format!("{} is not a finished training run (no {f})", dir.display()),
            )
            .into());
        }
    }
    let cfg = RunConfig::load(Command::Train, Some(&dir.join(CONFIG_FILE)), vec![])?;
    let n: usize = cfg.require("nodes")?;
    let train = train_config(&cfg, n)?;
    let params = ParamStore::load(&train.model, &dir.join(PARAMS_FILE))?;
    let state = ModelState::load(&dir.join(STATE_FILE))?;
    Ok(TrainedRun { cfg, train, params, state })
}

/// Training stream of a finished run, re-read from its recorded inputs.
fn training_part(run: &TrainedRun) -> anyhow::Result<(EventStream, Option<AssociationState>)> {
    let inputs = load_inputs(&run.cfg)?;
    Ok((split_stream(&run.cfg, &inputs.stream)?.0, inputs.assoc))
}

fn report(dir: &Path, r: &RankResult) -> anyhow::Result<()> {
    r.save_csv(&dir.join("results.csv"))?;
    let line = format!("MAR {:.4} HITS@10 {:.4} over {} events", r.mar, r.hits10, r.ranks.len());
    write(&dir.join("summary.txt"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

pub fn cmd_evaluate(cfg: RunConfig) -> anyhow::Result<PathBuf> {
    let mut run = load_run(&cfg)?;
    let min_prob: f64 = cfg.require("min_prob")?;
    let registry = NodeRegistry::anonymous(run.train.model.n_nodes);
    let test = match optional_file(&cfg, "events", "test events file")? {
        Some(p) => load_events(&p, Some(&registry), min_prob)?.stream,
        None => {
            let (_, test) = split_stream(&run.cfg, &load_inputs(&run.cfg)?.stream)?;
            test.ok_or_else(|| {
                CliError::new(
                    ExitKind::Config,
                    "no test events: pass --events or train with train_until set",
                )
            })?
        }
    };
    let test = match run.cfg.get::<f64>("train_until")? {
        // the same file used for training: keep only the held-out tail
        Some(t) => test.split(t).1,
        None => test,
    };
    let blend = match cfg.get::<f64>("blend_freq")? {
        Some(alpha) => Some(BlendSpec {
            table: FrequencyTable::from_stream(&training_part(&run)?.0),
            alpha,
        }),
        None => None,
    };
    let first_index = run.state.nodes.last_index.iter().flatten().max().map_or(0, |i| i + 1);
    let opts = EvalOptions {
        first_index,
        dump_scores: cfg.require("dump_scores")?,
        blend,
    };
    let seed: u64 = cfg.require("seed")?;
    let dir = start_run(&cfg, Command::Evaluate)?;
    let r = evaluate(&test, &mut run.state, &run.params, &run.train.model, &opts, &mut rng_for(seed, 300))?;
    if opts.dump_scores {
        r.save_dumps(&dir.join("scores.csv"))?;
    }
    report(&dir, &r)?;
    Ok(dir)
}

pub fn cmd_analyze(cfg: RunConfig) -> anyhow::Result<PathBuf> {
    let run = load_run(&cfg)?;
    let n = run.train.model.n_nodes;
    let (fit, run_assoc) = training_part(&run)?;
    let initial = match optional_file(&cfg, "assoc", "association file")? {
        Some(p) => Some(load_associations(&p, n)?),
        None => run_assoc,
    };
    let final_assoc = associations_after(initial.as_ref(), &fit)?;
    let initial = initial.unwrap_or_else(|| AssociationState::empty(n));
    let mut graphs = vec![("assoc", "initial", initial), ("assoc", "final", final_assoc)];
    if let Some(p) = optional_file(&cfg, "planted", "planted graph file")? {
        graphs.push(("planted", "final", load_associations(&p, n)?));
    }

    let dir = start_run(&cfg, Command::Analyze)?;
    let mut rows = Vec::new();
    for (name, snapshot, graph) in &graphs {
        match attention_auc(&run.state.attention, graph) {
            Ok(report) => rows.extend(AucRow::from_report(name, snapshot, &report)),
            Err(e) => log::warn!("skipping {name}/{snapshot}: {e}"),
        }
    }
    save_auc_csv(&rows, &dir.join("auc.csv"))?;
    run.state.attention.save_csv(&dir.join("attention_final"))?;
    for r in rows.iter().filter(|r| r.edge_type == "max") {
        println!("{} {} AUC {:.4}", r.assoc_name, r.snapshot, r.auc);
    }
    Ok(dir)
}

pub fn cmd_baseline(cfg: RunConfig) -> anyhow::Result<PathBuf> {
    let inputs = load_inputs(&cfg)?;
    let (fit, test) = split_stream(&cfg, &inputs.stream)?;
    let variant = cfg.require::<String>("variant")?;
    let result = match variant.as_str() {
        "no-learn" => {
            let test = test.unwrap_or_else(|| inputs.stream.clone());
            let assoc = match cfg.raw("train_until") {
                Some(_) => Some(associations_after(inputs.assoc.as_ref(), &fit)?),
                None => inputs.assoc.clone(),
            };
            no_learn_baseline(assoc.as_ref(), &test)
        }
        "frequency" => {
            let test = test.ok_or_else(|| {
                CliError::new(ExitKind::Config, "the frequency baseline needs train_until to count training events")
            })?;
            frequency_baseline(&FrequencyTable::from_stream(&fit), &test)
        }
        other => {
            return Err(CliError::new(
                ExitKind::Config,
                format!("unknown variant {other:?}; expected no-learn or frequency"),
            )
            .into())
        }
    };
    let dir = start_run(&cfg, Command::Baseline)?;
    report(&dir, &result?)?;
    Ok(dir)
}

pub fn cmd_synth(cfg: RunConfig) -> anyhow::Result<PathBuf> {
    let horizon: f64 = cfg.require("horizon")?;
    let mut world = PlantedWorld::with_expected_events(
        cfg.require("nodes")?,
        cfg.require("density")?,
        cfg.require("rho")?,
        cfg.require("events")?,
        cfg.require("seed")?,
    );
    if horizon <= 0.0 || !horizon.is_finite() {
        return Err(CliError::new(ExitKind::Config, "horizon must be positive").into());
    }
    // same expected count over a different window
    world.mu *= DEFAULT_HORIZON / horizon;
    world.horizon = horizon;
    world.init_fraction = cfg.require("init_fraction")?;
    world.reveal_fraction = cfg.require("reveal_fraction")?;
    let data = generate(&world)?;
    let dir = start_run(&cfg, Command::Synth)?;
    data.save(&dir)?;
    println!(
        "{} events, {} planted edges, {} initial associations",
        data.stream.len(),
        data.planted.edge_count(),
        data.assoc_init.edge_count()
    );
    Ok(dir)
}
