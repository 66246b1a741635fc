use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, Mode};
use super::{config_digest, data_root};
use crate::attack::{
    run_offline, run_online, AttackConfig, AttackReport, LocalEnv, MainMetrics, SystemKnowledge,
};
use crate::diffcore::{adam_step, AdamState, SeedStream, Tensor};
use crate::gnn::{load_checkpoint, save_checkpoint, Combine, LocalModel, ServerModel};
use crate::graphdata::{load_manifest, partition_vertical, synth_sbm, Graph};
use crate::vfl::{unflatten, GradientTrace, VflSystem};
use crate::Error;

/// One line of a sweep CSV: the aggregate outcome of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub digest: String,
    pub name: String,
    pub dataset: String,
    pub arch: String,
    pub knowledge: String,
    pub strategy: String,
    pub defense: String,
    pub seed: u64,
    /// Absent in offline mode (the protocol is not re-run).
    pub main_test_acc: Option<f64>,
    pub attack_top1_final: Option<f64>,
    pub attack_top3_final: Option<f64>,
    pub attack_top5_final: Option<f64>,
    pub attack_top1_early: Option<f64>,
    pub attack_top3_early: Option<f64>,
    pub attack_top5_early: Option<f64>,
    pub early_stop_epoch: Option<usize>,
    pub estimated_classes: Option<usize>,
    pub wall_time_s: f64,
    pub series_path: String,
}

impl ResultRow {
    fn csv_fields(&self) -> Vec<String> {
        fn opt_f(v: Option<f64>) -> String {
            v.map(|x| format!("{x}")).unwrap_or_default()
        }
        fn opt_u(v: Option<usize>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        vec![
            self.digest.clone(),
            self.name.clone(),
            self.dataset.clone(),
            self.arch.clone(),
            self.knowledge.clone(),
            self.strategy.clone(),
            self.defense.clone(),
            self.seed.to_string(),
            opt_f(self.main_test_acc),
            opt_f(self.attack_top1_final),
            opt_f(self.attack_top3_final),
            opt_f(self.attack_top5_final),
            opt_f(self.attack_top1_early),
            opt_f(self.attack_top3_early),
            opt_f(self.attack_top5_early),
            opt_u(self.early_stop_epoch),
            opt_u(self.estimated_classes),
            format!("{:.3}", self.wall_time_s),
            self.series_path.clone(),
        ]
    }
}

/// Digest used for per-row seeding: execution details (mode, file paths) are
/// normalized away so an offline replay derives the same streams as the
/// online run it replays.
fn seed_digest(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.mode = Mode::Online;
    c.trace = None;
    c.model_checkpoint = None;
    config_digest(&c)
}

fn effective_seed(cfg: &ExperimentConfig) -> u64 {
    SeedStream::derive(cfg.seed, &seed_digest(cfg))
}

fn load_graph(cfg: &ExperimentConfig, eff_seed: u64) -> Result<Graph, Error> {
    match &cfg.dataset {
        DatasetSpec::Manifest { manifest } => {
            let root = data_root();
            let path = if manifest.is_absolute() {
                manifest.clone()
            } else {
                root.join(manifest)
            };
            Ok(load_manifest(&path, &root, SeedStream::derive(eff_seed, "split"))?)
        }
        DatasetSpec::Synth {
            n_nodes,
            n_classes,
            p_in,
            p_out,
            d,
        } => Ok(synth_sbm(
            *n_nodes,
            *n_classes,
            *p_in,
            *p_out,
            *d,
            SeedStream::derive(eff_seed, "synth"),
        )?),
    }
}

fn build_attack_config(cfg: &ExperimentConfig, eff_seed: u64) -> AttackConfig {
    AttackConfig {
        knowledge: cfg.knowledge,
        strategy: cfg.strategy,
        attack_lr: cfg.attack_lr,
        attack_iterations: cfg.attack_iterations,
        early_stop_lag: cfg.early_stop_lag,
        warmup_epochs: cfg.warmup_epochs,
        ablation: cfg.ablation,
        seed: SeedStream::derive(eff_seed, "attack"),
        clone_init: cfg.clone_init,
        optimizer: cfg.attack_optimizer,
    }
}

fn build_knowledge(cfg: &ExperimentConfig, graph: &Graph, eff_seed: u64) -> SystemKnowledge {
    let gnn = cfg.gnn_config();
    let input_dim = match cfg.combine {
        Combine::Concat => gnn.hidden_dim * cfg.n_clients,
        Combine::Mean => gnn.hidden_dim,
    };
    SystemKnowledge {
        clone_input_dim: input_dim,
        n_classes: match cfg.knowledge {
            crate::attack::KnowledgeLevel::None => None,
            _ => Some(graph.n_classes),
        },
        server_widths: Some(ServerModel::candidate_widths(
            input_dim,
            graph.n_classes,
            cfg.server_layers,
        )),
        server_seed: match cfg.clone_init {
            crate::attack::CloneInit::SharedWithServer => Some(eff_seed),
            crate::attack::CloneInit::Fresh => None,
        },
    }
}

fn defense_label(cfg: &ExperimentConfig) -> String {
    match cfg.defense {
        crate::defense::DefenseConfig::None => "none".into(),
        crate::defense::DefenseConfig::Clip { tau } => format!("clip({tau})"),
        crate::defense::DefenseConfig::Laplace { b, .. } => format!("laplace({b})"),
        crate::defense::DefenseConfig::Compress { rho } => format!("compress({rho})"),
    }
}

/// Runs one experiment, writing its artifacts (series, report, trace,
/// checkpoint) under `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ResultRow, Error> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let digest = config_digest(cfg);
    let eff_seed = effective_seed(cfg);
    let started = Instant::now();

    let graph = load_graph(cfg, eff_seed)?;
    let partition = partition_vertical(&graph, cfg.n_clients, SeedStream::derive(eff_seed, "partition"))?;
    let gnn_cfg = cfg.gnn_config();
    let attack_cfg = build_attack_config(cfg, eff_seed);
    let knowledge = build_knowledge(cfg, &graph, eff_seed);

    let (report, metrics) = match cfg.mode {
        Mode::Online => {
            let mut system = VflSystem::build(
                &graph,
                &partition,
                gnn_cfg,
                cfg.combine,
                cfg.server_layers,
                cfg.main_lr,
                eff_seed,
            )?
            .with_weight_decay(cfg.weight_decay);
            let initial_model = system.client(0).model.clone();
            let (report, trace, metrics) =
                run_online(&mut system, &knowledge, &attack_cfg, cfg.epochs, &cfg.defense)?;
            if metrics.iter().any(|m| !m.loss.is_finite()) {
                return Err(Error::Numeric("main-task loss became non-finite".into()));
            }

            let trace_path = cfg
                .trace
                .clone()
                .unwrap_or_else(|| out_dir.join("trace.bin"));
            trace.write(&trace_path).map_err(crate::Error::from)?;
            let ckpt_path = cfg
                .model_checkpoint
                .clone()
                .unwrap_or_else(|| out_dir.join("attacker_model.ckpt"));
            save_checkpoint(&initial_model, eff_seed, &ckpt_path)?;

            // Embeddings at the attack-start epoch, for the class-count
            // estimation workflow.
            let start = match cfg.knowledge {
                crate::attack::KnowledgeLevel::None => cfg.warmup_epochs,
                _ => 0,
            };
            let env = attacker_env(&graph, &partition, gnn_cfg, eff_seed)?;
            let params =
                replay_params(&trace, &initial_model, cfg.main_lr, cfg.weight_decay, start)?;
            let emb = crate::attack::frozen_embeddings(&env, &params)?;
            write_embeddings_csv(&emb, &out_dir.join("embeddings.csv"))?;

            (report, Some(metrics))
        }
        Mode::Offline => {
            let trace_path = cfg.trace.clone().expect("validated");
            let trace = GradientTrace::read(&trace_path)?;
            let initial_model = match &cfg.model_checkpoint {
                Some(p) if p.exists() => load_checkpoint(p)?.0,
                _ => {
                    // The same draw VflSystem::build makes for client 0.
                    let mut rng = SeedStream::new(SeedStream::derive(eff_seed, "client/0"));
                    LocalModel::init(gnn_cfg, partition.client_feature_slices[0].len(), &mut rng)
                }
            };
            let env = attacker_env(&graph, &partition, gnn_cfg, eff_seed)?;
            let train_labels: Vec<usize> =
                env.train_idx.iter().map(|&v| graph.labels[v]).collect();
            let report = run_offline(
                &trace,
                &initial_model,
                &env,
                &knowledge,
                &attack_cfg,
                cfg.main_lr,
                cfg.weight_decay,
                &train_labels,
            )?;
            (report, None)
        }
    };

    let series_path = out_dir.join("series.jsonl");
    emit_series(&series_path, metrics.as_deref(), &report)?;
    let report_path = out_dir.join("report.json");
    let wrapped = serde_json::json!({
        "config": cfg,
        "digest": digest,
        "report": report,
        "metrics": metrics,
    });
    std::fs::write(&report_path, serde_json::to_vec_pretty(&wrapped)?)?;

    let row = ResultRow {
        digest,
        name: cfg.name.clone().unwrap_or_default(),
        dataset: cfg.dataset.label(),
        arch: format!("{:?}", cfg.arch).to_lowercase(),
        knowledge: format!("{:?}", cfg.knowledge).to_lowercase(),
        strategy: format!("{:?}", cfg.strategy).to_lowercase(),
        defense: defense_label(cfg),
        seed: cfg.seed,
        main_test_acc: metrics
            .as_ref()
            .and_then(|m| m.last().map(|r| r.test_acc)),
        attack_top1_final: report.final_accuracy.map(|t| t.top1),
        attack_top3_final: report.final_accuracy.map(|t| t.top3),
        attack_top5_final: report.final_accuracy.map(|t| t.top5),
        attack_top1_early: report.early_stop_accuracy.map(|t| t.top1),
        attack_top3_early: report.early_stop_accuracy.map(|t| t.top3),
        attack_top5_early: report.early_stop_accuracy.map(|t| t.top5),
        early_stop_epoch: report.early_stop_epoch,
        estimated_classes: report.estimated_n_classes,
        wall_time_s: started.elapsed().as_secs_f64(),
        series_path: series_path.display().to_string(),
    };
    Ok(row)
}

/// The attacker's own view of the system, rebuilt deterministically from the
/// dataset and partition (used by offline mode and the embeddings dump).
fn attacker_env(
    graph: &Graph,
    partition: &crate::graphdata::VerticalPartition,
    gnn_cfg: crate::gnn::GnnConfig,
    _eff_seed: u64,
) -> Result<LocalEnv, Error> {
    let features =
        crate::gnn::FeatureInput::from_columns(&graph.features, &partition.client_feature_slices[0])?;
    let adj = crate::graphdata::normalize_adjacency(
        graph,
        &partition.client_edges[0],
        gnn_cfg.arch.scheme(),
    )?;
    Ok(LocalEnv {
        config: gnn_cfg,
        features,
        adj,
        train_idx: std::rc::Rc::new(graph.train_nodes()),
    })
}

/// Replays the client's optimizer over the first `upto_epoch` traced
/// gradients, yielding the local parameters at that epoch.
pub fn replay_params(
    trace: &GradientTrace,
    initial: &LocalModel,
    main_lr: f64,
    weight_decay: f64,
    upto_epoch: usize,
) -> Result<Vec<Tensor>, Error> {
    let mut params: Vec<Tensor> = initial.params().iter().map(|p| (*p).clone()).collect();
    let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.shape()).collect();
    let mut opt: Vec<AdamState> = params.iter().map(AdamState::for_param).collect();
    for rec in trace.epochs().iter().take(upto_epoch) {
        let flat = Tensor::new(1, rec.grad.len(), rec.grad.clone()).map_err(crate::diffcore::DiffError::from)?;
        let grads = unflatten(&flat, &shapes)?;
        for ((p, g), st) in params.iter_mut().zip(grads.iter()).zip(opt.iter_mut()) {
            crate::vfl::decayed_adam_step(p, g, st, main_lr, weight_decay)?;
        }
    }
    Ok(params)
}

/// Per-epoch JSON-lines series: `{epoch, main_acc, attack_acc,
/// mean_abs_grad, d}`.
pub fn emit_series(
    path: &Path,
    metrics: Option<&[MainMetrics]>,
    report: &AttackReport,
) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in &report.per_epoch {
        let main_acc = metrics
            .and_then(|m| m.get(row.epoch))
            .map(|m| m.test_acc);
        let line = serde_json::json!({
            "epoch": row.epoch,
            "main_acc": main_acc,
            "attack_acc": row.top1,
            "mean_abs_grad": row.mean_abs_grad,
            "d": row.d_per_candidate.as_ref().and_then(|d| d.first().copied()),
        });
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Writes embeddings as comma-separated rows.
pub fn write_embeddings_csv(emb: &Tensor, path: &Path) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..emb.rows() {
        let row: Vec<String> = emb.row(r).iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads embeddings from comma-separated rows.
pub fn read_embeddings_csv(path: &Path) -> Result<Tensor, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: not a number: {v:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no embeddings", path.display())));
    }
    Tensor::from_rows(&rows).map_err(|e| Error::Config(format!("embeddings: {e}")))
}

/// Runs every config (resuming from per-row checkpoints), writes
/// `results.csv` in expansion order, and returns the rows.
pub fn sweep(
    configs: &[ExperimentConfig],
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<ResultRow>, Error> {
    std::fs::create_dir_all(out_dir.join("rows"))?;
    let jobs = jobs.max(1);

    let tasks: Vec<(usize, ExperimentConfig, String)> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.clone(), config_digest(c)))
        .collect();

    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<ResultRow, Error>>>> =
        (0..tasks.len()).map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let (_, cfg, digest) = &tasks[i];
                let row_path = out_dir.join("rows").join(format!("{digest}.json"));
                let outcome = if let Ok(bytes) = std::fs::read(&row_path) {
                    serde_json::from_slice::<ResultRow>(&bytes)
                        .map_err(Error::from)
                } else {
                    run(cfg, &out_dir.join("rows").join(digest)).and_then(|row| {
                        std::fs::write(&row_path, serde_json::to_vec_pretty(&row)?)?;
                        Ok(row)
                    })
                };
                *results[i].lock().expect("row lock") = Some(outcome);
            });
        }
    });

    let mut rows = Vec::with_capacity(tasks.len());
    for cell in results {
        match cell.into_inner().expect("row lock") {
            Some(Ok(row)) => rows.push(row),
            Some(Err(e)) => return Err(e),
            None => return Err(Error::Config("sweep worker dropped a row".into())),
        }
    }

    let csv_path = out_dir.join("results.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(f, "{}", super::RESULT_COLUMNS.join(","))?;
    for row in &rows {
        writeln!(f, "{}", row.csv_fields().join(","))?;
    }
    f.flush()?;
    Ok(rows)
}
