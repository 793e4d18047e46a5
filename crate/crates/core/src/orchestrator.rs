//! The active-learning loop: initial split and training, then per cycle
//! draw a candidate subset, score it, query the oracle, gate by DICE,
//! retrain and evaluate.
//!
//! Randomness is derived from `ALConfig::seed` per purpose (initial split,
//! weight init, candidate draw and shuffling of each cycle), and every
//! parallel fan-out is merged in sample order, so a machine-oracle run is a
//! pure function of (seed, config, dataset).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::initial_split;
use crate::ebu::entropy_map;
use crate::eem::{export_eem, extract_candidates, fuse, CandidatePrompt, EEMask, EemSidecar, ExtractParams};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{compute_metrics, DiceSummary, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, train, ModelConfig, UNet};
use crate::oracle::{enqueue_for_human, machine_annotate, AnnotationRecord, AnnotationSource, MachineMode};
use crate::pae::{prox_gradcam, DepthKind, DepthProvider, PaeOptions};
use crate::par::Execution;
use crate::queue::{Queue, TicketStatus};
use crate::selection::{select, SelectionDecision, SelectionInput};
use crate::types::{ALConfig, HeatKind, HeatMap, LabelMask, PoolTag, Sample, SamplePool, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Segxal,
    Random,
    EntropyOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Machine,
    Human,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthVariant {
    MidasFiles,
    Dinov2Files,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub al: ALConfig,
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub oracle: OracleMode,
    pub machine_mode: MachineMode,
    pub depth: DepthVariant,
    pub depth_dir: Option<PathBuf>,
    pub pae: PaeOptions,
    pub extract: ExtractParams,
    pub inverted_selection: bool,
    pub execution: Execution,
    /// Write EEM PNGs and prompt sidecars for every scored candidate.
    pub write_eem: bool,
    pub write_checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            al: ALConfig::default(),
            model: ModelConfig::desk(5, 64, 128),
            strategy: Strategy::Segxal,
            oracle: OracleMode::Machine,
            machine_mode: MachineMode::GroundTruth,
            depth: DepthVariant::Synthetic,
            depth_dir: None,
            pae: PaeOptions::default(),
            extract: ExtractParams::default(),
            inverted_selection: false,
            execution: Execution::default(),
            write_eem: true,
            write_checkpoints: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.al.validate()?;
        self.model.validate()?;
        if self.depth != DepthVariant::Synthetic && self.depth_dir.is_none() {
            return Err(Error::Config(format!("depth variant {:?} needs depth_dir", self.depth)));
        }
        if self.oracle == OracleMode::Human && self.strategy != Strategy::Segxal {
            return Err(Error::Config("the human oracle is only wired to the segxal strategy".into()));
        }
        Ok(())
    }

    pub fn depth_provider(&self) -> DepthProvider {
        match (self.depth, &self.depth_dir) {
            (DepthVariant::MidasFiles, Some(d)) => DepthProvider::files(DepthKind::FileMidas, d),
            (DepthVariant::Dinov2Files, Some(d)) => DepthProvider::files(DepthKind::FileDinov2, d),
            _ => DepthProvider::synthetic(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    CyclesDone,
    BudgetExhausted,
    UnlabeledExhausted,
}

/// A human-oracle cycle waiting for its tickets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingCycle {
    pub cycle: usize,
    pub ticket_ids: Vec<String>,
    pub queried: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALState {
    pub schema: String,
    /// Cycles completed.
    pub cycle: usize,
    pub pool: SamplePool,
    pub model_checkpoint_ref: Option<String>,
    /// Evaluation of the model trained on the initial labeled pool.
    pub initial_metrics: Option<MetricsReport>,
    pub per_cycle_metrics: Vec<MetricsReport>,
    pub config: RunConfig,
    pub queried_total: usize,
    pub pending: Option<PendingCycle>,
    pub stopped: Option<StopReason>,
}

impl ALState {
    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn oracle_mode(&self) -> OracleMode {
        self.config.oracle
    }

    pub fn depth_variant(&self) -> DepthVariant {
        self.config.depth
    }

    pub fn miou_trend(&self) -> Vec<f64> {
        self.per_cycle_metrics.iter().map(|m| m.miou).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.cycle > self.config.al.num_cycles {
            out.push(format!("cycle {} exceeds num_cycles {}", self.cycle, self.config.al.num_cycles));
        }
        if self.per_cycle_metrics.len() != self.cycle {
            out.push(format!(
                "{} metrics reports for {} completed cycles",
                self.per_cycle_metrics.len(),
                self.cycle
            ));
        }
        if let Err(e) = self.pool.audit() {
            out.push(e.to_string());
        }
        out
    }
}

pub fn read_state(run_dir: &Path) -> Result<ALState> {
    let path = run_dir.join("state.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| crate::types::corrupt(&bytes, &e))?;
    let found = v.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
    if found != SCHEMA_VERSION {
        return Err(Error::Schema {
            expected: SCHEMA_VERSION.into(),
            found: found.into(),
        });
    }
    serde_json::from_value(v).map_err(Error::from)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CycleOutcome {
    Completed(MetricsReport),
    Suspended { cycle: usize, waiting: usize },
    Stopped(StopReason),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Finished(StopReason),
    Suspended { cycle: usize, waiting: usize },
}

/// Per-purpose seed derived from the run seed.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.random()
}

/// Seed streams. Cycle-specific purposes add the cycle number.
pub const SEED_SPLIT: u64 = 1;
pub const SEED_INIT: u64 = 2;
pub const SEED_TRAIN: u64 = 1000;
pub const SEED_DRAW: u64 = 2000;

/// Scores of one candidate.
struct Analysis {
    prediction: LabelMask,
    score: f64,
    prompts: Vec<CandidatePrompt>,
    eem: Option<EEMask>,
}

pub struct Runner {
    pub state: ALState,
    model: UNet<f32>,
    /// Training labels of the labeled pool: ground truth for the initial
    /// split, the oracle's corrected mask for accepted samples.
    labels: BTreeMap<String, LabelMask>,
    train: Vec<Sample>,
    index: HashMap<String, usize>,
    val: Vec<Sample>,
    dir: Option<PathBuf>,
    provider: DepthProvider,
}

impl Runner {
    /// Initial split, initial training and evaluation. With `dir`, the run
    /// directory is created and `config.json`, `state.json` and `cycle_0/`
    /// are written.
    pub fn new(config: RunConfig, train_set: Vec<Sample>, val: Vec<Sample>, dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let index = check_dataset(&config, &train_set, &val)?;
        let provider = config.depth_provider();
        if config.strategy == Strategy::Segxal && config.al.fusion_alpha > 0.0 {
            let missing = provider.missing(&train_set);
            if !missing.is_empty() {
                return Err(Error::MissingDepth(missing));
            }
        }
        let ids: Vec<String> = train_set.iter().map(|s| s.id().to_string()).collect();
        let pool = initial_split(&ids, &config.al, derive_seed(config.al.seed, SEED_SPLIT))?;
        let labels = pool
            .labeled
            .iter()
            .map(|id| {
                let s = &train_set[index[id]];
                s.gt.clone()
                    .map(|g| (id.clone(), g))
                    .ok_or_else(|| Error::MissingGroundTruth(id.clone()))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let model_cfg = ModelConfig {
            init_seed: derive_seed(config.al.seed, SEED_INIT),
            ..config.model.clone()
        };
        let model = UNet::new(model_cfg)?;
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            io::write_atomic(&d.join("config.json"), &serde_json::to_vec_pretty(&config)?)?;
        }
        let mut runner = Runner {
            state: ALState {
                schema: SCHEMA_VERSION.into(),
                cycle: 0,
                pool,
                model_checkpoint_ref: None,
                initial_metrics: None,
                per_cycle_metrics: Vec::new(),
                config,
                queried_total: 0,
                pending: None,
                stopped: None,
            },
            model,
            labels,
            train: train_set,
            index,
            val,
            dir,
            provider,
        };
        let started = Instant::now();
        runner.retrain(0)?;
        let mut report = compute_metrics(&runner.model, &runner.val, runner.state.config.execution)?;
        report.samples_labeled = runner.state.pool.labeled.len();
        log::info!("initial model: mIoU={:.4}", report.miou);
        runner.write_cycle(0, &report, &[], started.elapsed().as_secs_f64())?;
        runner.state.initial_metrics = Some(report);
        runner.save_state()?;
        Ok(runner)
    }

    /// Reloads a persisted run. `train` and `val` must be the dataset the
    /// run was started with.
    pub fn resume(dir: &Path, train_set: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        let state = read_state(dir)?;
        let index = check_dataset(&state.config, &train_set, &val)?;
        let ckpt = state
            .model_checkpoint_ref
            .as_ref()
            .ok_or_else(|| Error::Precondition("run has no checkpoint to resume from".into()))?;
        let model = load_checkpoint(&dir.join(ckpt))?;
        let mut labels = BTreeMap::new();
        for id in &state.pool.labeled {
            let path = dir.join("labels").join(format!("{id}.png"));
            let mask = if path.exists() {
                io::read_label_png(&path, state.config.model.num_classes as u8)?
            } else {
                train_set[index[id]]
                    .gt
                    .clone()
                    .ok_or_else(|| Error::MissingGroundTruth(id.clone()))?
            };
            labels.insert(id.clone(), mask);
        }
        Ok(Runner {
            provider: state.config.depth_provider(),
            state,
            model,
            labels,
            train: train_set,
            index,
            val,
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn model(&self) -> &UNet<f32> {
        &self.model
    }

    pub fn labels(&self) -> &BTreeMap<String, LabelMask> {
        &self.labels
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn sample(&self, id: &str) -> &Sample {
        &self.train[self.index[id]]
    }

    fn exec(&self) -> Execution {
        self.state.config.execution
    }

    fn query_size(&self) -> usize {
        let al = &self.state.config.al;
        let n = ((al.query_fraction_per_cycle * self.train.len() as f64).round() as usize).max(1);
        match al.budget_n {
            Some(b) => n.min(b.saturating_sub(self.state.queried_total)),
            None => n,
        }
    }

    fn stop_reason(&self) -> Option<StopReason> {
        let al = &self.state.config.al;
        if self.state.cycle >= al.num_cycles {
            Some(StopReason::CyclesDone)
        } else if al.budget_n.is_some_and(|b| self.state.queried_total >= b) {
            Some(StopReason::BudgetExhausted)
        } else if self.state.pool.unlabeled.is_empty() {
            Some(StopReason::UnlabeledExhausted)
        } else {
            None
        }
    }

    /// Runs cycles until the loop stops or suspends for human annotation.
    pub fn run(&mut self) -> Result<RunOutcome> {
        loop {
            match self.run_cycle()? {
                CycleOutcome::Completed(m) => {
                    log::info!("cycle {}: mIoU={:.4}", m.cycle, m.miou);
                }
                CycleOutcome::Suspended { cycle, waiting } => return Ok(RunOutcome::Suspended { cycle, waiting }),
                CycleOutcome::Stopped(r) => return Ok(RunOutcome::Finished(r)),
            }
        }
    }

    /// One active-learning cycle.
    pub fn run_cycle(&mut self) -> Result<CycleOutcome> {
        if let Some(p) = self.state.pending.clone() {
            return self.continue_human(p);
        }
        if let Some(r) = self.stop_reason() {
            if self.state.stopped != Some(r) {
                self.state.stopped = Some(r);
                self.save_state()?;
            }
            return Ok(CycleOutcome::Stopped(r));
        }
        if self.state.pool.labeled.is_empty() {
            return Err(Error::Precondition("labeled pool is empty".into()));
        }
        let started = Instant::now();
        let cycle = self.state.cycle + 1;
        let cfg = self.state.config.clone();
        let n = self.query_size().min(self.state.pool.unlabeled.len());

        // Candidate subset D^S, uniformly from D^U.
        let subset = if cfg.strategy == Strategy::Random { n } else { n * cfg.al.candidate_subset_factor.max(1) };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.al.seed, SEED_DRAW + cycle as u64));
        let mut drawn: Vec<String> = self.state.pool.unlabeled.iter().cloned().collect();
        drawn.shuffle(&mut rng);
        drawn.truncate(subset.min(drawn.len()));
        drawn.sort();
        for id in &drawn {
            self.state.pool.transfer(id, PoolTag::Unlabeled, PoolTag::Candidate)?;
        }

        let analyses = self.analyse(&drawn)?;
        let mut order: Vec<usize> = (0..drawn.len()).collect();
        if cfg.strategy != Strategy::Random {
            order.retain(|&k| cfg.strategy != Strategy::Segxal || !analyses[k].prompts.is_empty());
            order.sort_by(|&a, &b| analyses[b].score.total_cmp(&analyses[a].score).then(drawn[a].cmp(&drawn[b])));
        }
        order.truncate(n);
        let mut chosen = vec![false; drawn.len()];
        for &k in &order {
            chosen[k] = true;
        }
        for (k, id) in drawn.iter().enumerate() {
            if !chosen[k] {
                self.state.pool.transfer(id, PoolTag::Candidate, PoolTag::Unlabeled)?;
            }
        }
        order.sort_by(|&a, &b| drawn[a].cmp(&drawn[b]));

        if let Some(dir) = self.dir.clone().filter(|_| cfg.write_eem) {
            for &k in &order {
                if let Some(eem) = &analyses[k].eem {
                    let cdir = dir.join(format!("cycle_{cycle}"));
                    let sidecar = EemSidecar::new(&drawn[k], eem, cfg.extract.percentile, &analyses[k].prompts);
                    export_eem(
                        &cdir.join("eem").join(format!("{}.png", drawn[k])),
                        &cdir.join("prompts").join(format!("{}.json", drawn[k])),
                        &sidecar,
                        eem,
                    )?;
                }
            }
        }

        if cfg.oracle == OracleMode::Human {
            let dir = self
                .dir
                .clone()
                .ok_or_else(|| Error::Precondition("human oracle needs a run directory".into()))?;
            let mut queue = Queue::open(dir.join("queue.jsonl"))?;
            let mut ticket_ids = Vec::new();
            for &k in &order {
                let a = &analyses[k];
                let eem = a.eem.as_ref().expect("segxal analyses carry an EEM");
                let t = enqueue_for_human(
                    &mut queue,
                    &dir,
                    cycle,
                    self.sample(&drawn[k]),
                    &a.prompts,
                    eem,
                    cfg.extract.percentile,
                    &a.prediction,
                )?;
                ticket_ids.push(t.ticket_id);
            }
            queue.save()?;
            let waiting = ticket_ids.len();
            self.state.pending = Some(PendingCycle {
                cycle,
                ticket_ids,
                queried: order.len(),
            });
            self.save_state()?;
            return Ok(CycleOutcome::Suspended { cycle, waiting });
        }

        let records = order
            .iter()
            .map(|&k| {
                let s = self.sample(&drawn[k]);
                match cfg.strategy {
                    Strategy::Segxal => machine_annotate(s, &analyses[k].prompts, &analyses[k].prediction, cfg.machine_mode),
                    _ => full_label_record(s),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let predictions: Vec<&LabelMask> = order.iter().map(|&k| &analyses[k].prediction).collect();
        let queried = order.len();
        self.finish_cycle(cycle, &predictions, &records, queried, started)
    }

    /// Scores the drawn candidates on a frozen model snapshot.
    fn analyse(&self, drawn: &[String]) -> Result<Vec<Analysis>> {
        let cfg = &self.state.config;
        let model = &self.model;
        let provider = &self.provider;
        let samples: Vec<&Sample> = drawn.iter().map(|id| self.sample(id)).collect();
        self.exec().try_map(&samples, |s| -> Result<Analysis> {
            let probs = model.predict_probs(&s.image)?;
            let prediction = probs.argmax();
            match cfg.strategy {
                Strategy::Random => Ok(Analysis {
                    prediction,
                    score: 0.0,
                    prompts: Vec::new(),
                    eem: None,
                }),
                Strategy::EntropyOnly => {
                    let (_, stats) = entropy_map(&probs, None)?;
                    Ok(Analysis {
                        prediction,
                        score: stats.mean,
                        prompts: Vec::new(),
                        eem: None,
                    })
                }
                Strategy::Segxal => {
                    let (ent, _) = entropy_map(&probs, None)?;
                    let prox = if cfg.al.fusion_alpha > 0.0 {
                        prox_gradcam(model, s, provider, cfg.al.depth_quantile_tau, &cfg.pae)?.map
                    } else {
                        HeatMap::zeros(ent.shape(), HeatKind::ProxGradcam)
                    };
                    let eem = fuse(&prox, &ent, cfg.al.fusion_alpha, cfg.al.fusion_beta)?;
                    let prompts = extract_candidates(s.id(), &eem, &cfg.extract)?;
                    Ok(Analysis {
                        prediction,
                        score: eem.map.mean(),
                        prompts,
                        eem: Some(eem),
                    })
                }
            }
        })
    }

    fn continue_human(&mut self, pending: PendingCycle) -> Result<CycleOutcome> {
        let started = Instant::now();
        let dir = self
            .dir
            .clone()
            .ok_or_else(|| Error::Precondition("human oracle needs a run directory".into()))?;
        let mut queue = Queue::open(dir.join("queue.jsonl"))?;
        let waiting = pending
            .ticket_ids
            .iter()
            .filter(|id| {
                !matches!(
                    queue.get(id).map(|t| t.status),
                    Some(TicketStatus::Submitted | TicketStatus::Resolved)
                )
            })
            .count();
        if waiting > 0 {
            return Ok(CycleOutcome::Suspended {
                cycle: pending.cycle,
                waiting,
            });
        }
        let mut records = Vec::new();
        let mut predictions = Vec::new();
        for id in &pending.ticket_ids {
            let t = queue.get(id).expect("counted above").clone();
            let rec = match t.status {
                TicketStatus::Submitted => queue.resolve(id)?,
                _ => t.submission.as_ref().expect("resolved tickets carry a submission").record.clone(),
            };
            predictions.push(io::read_label_png(&dir.join(&t.initial_mask), self.state.config.model.num_classes as u8)?);
            records.push(rec);
        }
        queue.save()?;
        self.state.pending = None;
        let preds: Vec<&LabelMask> = predictions.iter().collect();
        self.finish_cycle(pending.cycle, &preds, &records, pending.queried, started)
    }

    fn finish_cycle(
        &mut self,
        cycle: usize,
        predictions: &[&LabelMask],
        records: &[AnnotationRecord],
        queried: usize,
        started: Instant,
    ) -> Result<CycleOutcome> {
        let cfg = self.state.config.clone();
        let (theta, inverted) = match cfg.strategy {
            Strategy::Segxal => (cfg.al.dice_threshold_theta, cfg.inverted_selection),
            _ => (0.0, false),
        };
        let inputs: Vec<SelectionInput> = predictions
            .iter()
            .zip(records)
            .map(|(p, r)| SelectionInput { prediction: p, record: r })
            .collect();
        let decisions = select(&inputs, theta, inverted, &mut self.state.pool, cycle)?;
        for (d, r) in decisions.iter().zip(records) {
            if d.accepted {
                if let Some(dir) = &self.dir {
                    io::write_label_png(&r.corrected, &dir.join("labels").join(format!("{}.png", d.sample_id)))?;
                }
                self.labels.insert(d.sample_id.clone(), r.corrected.clone());
            }
        }
        self.state.pool.audit()?;
        self.retrain(cycle)?;
        let mut report = compute_metrics(&self.model, &self.val, self.exec())?;
        let dices: Vec<f64> = decisions.iter().map(|d| d.dice).collect();
        report.cycle = cycle;
        report.dice_distribution = DiceSummary::from_values(&dices);
        report.samples_labeled = self.state.pool.labeled.len();
        report.samples_accepted = decisions.iter().filter(|d| d.accepted).count();
        report.samples_queried = queried;
        self.state.queried_total += queried;
        self.state.cycle = cycle;
        self.state.per_cycle_metrics.push(report.clone());
        self.write_cycle(cycle, &report, &decisions, started.elapsed().as_secs_f64())?;
        self.save_state()?;
        Ok(CycleOutcome::Completed(report))
    }

    fn retrain(&mut self, cycle: usize) -> Result<()> {
        let data: Vec<_> = self
            .labels
            .iter()
            .map(|(id, mask)| (&self.train[self.index[id]].image, mask))
            .collect();
        let seed = derive_seed(self.state.config.al.seed, SEED_TRAIN + cycle as u64);
        let epochs = self.state.config.model.epochs_per_cycle;
        let exec = self.state.config.execution;
        let report = train(&mut self.model, &data, epochs, seed, exec)?;
        log::debug!("cycle {cycle} training loss {:?}", report.final_loss());
        Ok(())
    }

    fn write_cycle(&mut self, cycle: usize, report: &MetricsReport, decisions: &[SelectionDecision], wall: f64) -> Result<()> {
        let Some(dir) = self.dir.clone() else {
            return Ok(());
        };
        let cdir = dir.join(format!("cycle_{cycle}"));
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        io::write_atomic(&cdir.join("metrics.json"), &serde_json::to_vec_pretty(report)?)?;
        let mut lines = Vec::new();
        for d in decisions {
            serde_json::to_writer(&mut lines, d)?;
            lines.push(b'\n');
        }
        io::write_atomic(&cdir.join("decisions.jsonl"), &lines)?;
        io::write_atomic(
            &cdir.join("timing.json"),
            &serde_json::to_vec_pretty(&serde_json::json!({ "wall_time": wall }))?,
        )?;
        let ckpt = format!("cycle_{cycle}/checkpoint.bin");
        if self.state.config.write_checkpoints || self.state.config.oracle == OracleMode::Human {
            save_checkpoint(&self.model, &dir.join(&ckpt))?;
            self.state.model_checkpoint_ref = Some(ckpt);
        }
        Ok(())
    }

    fn save_state(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            io::write_atomic(&dir.join("state.json"), &serde_json::to_vec_pretty(&self.state)?)?;
        }
        Ok(())
    }
}

fn full_label_record(s: &Sample) -> Result<AnnotationRecord> {
    Ok(AnnotationRecord {
        sample_id: s.id().to_string(),
        corrected: s.gt.clone().ok_or_else(|| Error::MissingGroundTruth(s.id().to_string()))?,
        regions_covered: Vec::new(),
        source: AnnotationSource::MachinePseudolabel,
        annotator_id: None,
        elapsed: 0.0,
    })
}

fn check_dataset(cfg: &RunConfig, train_set: &[Sample], val: &[Sample]) -> Result<HashMap<String, usize>> {
    let want = (cfg.model.height, cfg.model.width);
    for s in train_set.iter().chain(val) {
        if s.image.shape() != want {
            return Err(Error::shape(format!("{want:?}"), format!("{:?} ({})", s.image.shape(), s.id())));
        }
        if let Some(g) = &s.gt {
            if g.num_classes as usize != cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "sample {} has C = {}, model has C = {}",
                    s.id(),
                    g.num_classes,
                    cfg.model.num_classes
                )));
            }
        }
    }
    let mut index = HashMap::with_capacity(train_set.len());
    for (k, s) in train_set.iter().enumerate() {
        if index.insert(s.id().to_string(), k).is_some() {
            return Err(Error::Config(format!("duplicate sample id {}", s.id())));
        }
    }
    Ok(index)
}

/// Override set for one ablation row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variant {
    pub name: String,
    pub fusion_alpha: Option<f64>,
    pub fusion_beta: Option<f64>,
    pub initial_label_fraction: Option<f64>,
    pub strategy: Option<Strategy>,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Variant {
            name: name.into(),
            ..Variant::default()
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        if let Some(a) = self.fusion_alpha {
            c.al.fusion_alpha = a;
        }
        if let Some(b) = self.fusion_beta {
            c.al.fusion_beta = b;
        }
        if let Some(f) = self.initial_label_fraction {
            c.al.initial_label_fraction = f;
        }
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        c
    }
}

/// The full-EEM, without-EBU and without-PAE rows.
pub fn eem_ablation_variants() -> Vec<Variant> {
    vec![
        Variant::named("with_eem"),
        Variant {
            fusion_alpha: Some(1.0),
            fusion_beta: Some(0.0),
            ..Variant::named("without_ebu")
        },
        Variant {
            fusion_alpha: Some(0.0),
            fusion_beta: Some(1.0),
            ..Variant::named("without_pae")
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub trajectory: Vec<f64>,
    pub final_miou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean final mIoU of a variant over its seeds.
    pub fn mean_final(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.final_miou).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let cycles = self.rows.iter().map(|r| r.trajectory.len()).max().unwrap_or(0);
        let mut out = String::from("variant,seed");
        for k in 1..=cycles {
            out.push_str(&format!(",cycle_{k}"));
        }
        out.push_str(",final_miou\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.variant, r.seed));
            for k in 0..cycles {
                match r.trajectory.get(k) {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{:.6}\n", r.final_miou));
        }
        out
    }
}

/// One full run per (variant, seed) with identical data.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_set: &[Sample],
    val: &[Sample],
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for v in variants {
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.al.seed = seed;
            cfg.oracle = OracleMode::Machine;
            let mut runner = Runner::new(cfg, train_set.to_vec(), val.to_vec(), None)?;
            runner.run()?;
            let trajectory = runner.state.miou_trend();
            table.rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                final_miou: trajectory.last().copied().unwrap_or(0.0),
                trajectory,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SyntheticBenchmark;

    fn tiny() -> (RunConfig, Vec<Sample>, Vec<Sample>) {
        let bench = SyntheticBenchmark {
            n_train: 20,
            n_val: 4,
            width: 32,
            height: 16,
            max_objects: 2,
            ..SyntheticBenchmark::default()
        };
        let (tr, va) = bench.generate().unwrap();
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            levels: 2,
            base_channels: 4,
            epochs_per_cycle: 2,
            ..ModelConfig::desk(5, 16, 32)
        };
        cfg.al.num_cycles = 2;
        cfg.al.query_fraction_per_cycle = 0.10;
        cfg.extract.min_region_px = 2;
        (cfg, tr, va)
    }

    #[test]
    fn random_strategy_accepts_every_candidate() {
        let (mut cfg, tr, va) = tiny();
        cfg.strategy = Strategy::Random;
        cfg.al.num_cycles = 1;
        let mut r = Runner::new(cfg, tr, va, None).unwrap();
        let before = r.state.pool.labeled.len();
        r.run().unwrap();
        assert_eq!(r.state.pool.labeled.len(), before + 2);
        assert!(r.state.violations().is_empty());
    }

    #[test]
    fn budget_stops_the_loop() {
        let (mut cfg, tr, va) = tiny();
        cfg.al.budget_n = Some(3);
        cfg.al.num_cycles = 5;
        let mut r = Runner::new(cfg, tr, va, None).unwrap();
        assert_eq!(r.run().unwrap(), RunOutcome::Finished(StopReason::BudgetExhausted));
        assert_eq!(r.state.queried_total, 3);
        assert_eq!(r.state.cycle, 2);
    }

    #[test]
    fn pool_is_conserved_and_labeled_grows() {
        let (cfg, tr, va) = tiny();
        let mut r = Runner::new(cfg, tr, va, None).unwrap();
        let total = r.state.pool.len();
        let mut last = r.state.pool.labeled.len();
        while let CycleOutcome::Completed(m) = r.run_cycle().unwrap() {
            assert_eq!(r.state.pool.len(), total);
            assert!(m.samples_labeled >= last);
            last = m.samples_labeled;
            assert!(r.state.pool.candidate.is_empty());
        }
    }

    #[test]
    fn seed_derivation_separates_purposes() {
        assert_ne!(derive_seed(1, SEED_SPLIT), derive_seed(1, SEED_INIT));
        assert_eq!(derive_seed(3, SEED_DRAW), derive_seed(3, SEED_DRAW));
    }

    #[test]
    fn ablation_table_has_one_row_per_variant_and_seed() {
        let (cfg, tr, va) = tiny();
        let t = run_ablation(&cfg, &eem_ablation_variants(), &[1], &tr, &va).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.iter().all(|r| r.trajectory.len() == 2));
        assert_eq!(t.to_csv().lines().count(), 4);
    }
}
