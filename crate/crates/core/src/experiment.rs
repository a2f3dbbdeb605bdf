//! End-to-end runs: data, partition, rounds, evaluation, artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{ingest_cifar10, BlobMeans, Dataset};
use crate::encoder::{init, write_checkpoint, ModelParams};
use crate::error::{FsslError, Result};
use crate::eval::{acc, asr, linear_probe, persistence_curve, CleanLossProbe, PersistencePoint};
use crate::federation::{
    dirichlet_partition, iid_partition, run_round, ClientState, PartitionPlan, RoundContext,
    ServerState, TrainParams,
};
use crate::poisoning::{make_poison_set, PoisonSet};
use crate::rng::RngStream;

pub const THREADS_ENV: &str = "FSSL_LAB_THREADS";

const TAG_DATA: u64 = 1;
const TAG_TEST: u64 = 2;
const TAG_PARTITION: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_POISON: u64 = 5;
const TAG_QUEUE: u64 = 6;
const TAG_PROBE: u64 = 7;
const TAG_ROOT: u64 = 8;
const TAG_ROUNDS: u64 = 9;

/// One metrics row; round 0 is the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc: f64,
    pub asr: f64,
    /// Mean local InfoNCE over every participating client's steps.
    pub l_cl: f64,
    pub l_he: f64,
    pub l_bfe: f64,
    /// Clean InfoNCE of the global model on a fixed probe set.
    pub l_clean: f64,
    /// Mean distance of malicious uploads to the previous global model.
    pub dist_to_global: f64,
    pub benign_dist: f64,
    pub attack_active: bool,
    pub defense: String,
    pub defense_excluded: usize,
    pub defense_mal_weight: f64,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub metrics: Vec<RoundMetrics>,
    pub partition: PartitionPlan,
    pub checkpoints: Vec<(usize, ModelParams<f64>)>,
    pub final_model: ModelParams<f64>,
    pub persistence: Option<Vec<PersistencePoint>>,
    /// Calibrated projection radius per malicious client.
    pub eps: Vec<Option<f64>>,
}

/// JSON run summary; embeds the resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub rounds: usize,
    pub final_acc: f64,
    pub final_asr: f64,
    pub peak_asr: f64,
    pub client_sizes: Vec<usize>,
    pub eps: Vec<Option<f64>>,
    pub persistence: Option<Vec<PersistencePoint>>,
}

impl RunOutput {
    pub fn summary(&self) -> RunSummary {
        let last = self.metrics.last();
        RunSummary {
            config: self.config.clone(),
            seed: self.config.seed,
            rounds: self.config.train.rounds,
            final_acc: last.map_or(0.0, |m| m.acc),
            final_asr: last.map_or(0.0, |m| m.asr),
            peak_asr: self.metrics.iter().map(|m| m.asr).fold(0.0, f64::max),
            client_sizes: self.partition.sizes(),
            eps: self.eps.clone(),
            persistence: self.persistence.clone(),
        }
    }

    pub fn clean_loss_trace(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.l_clean).collect()
    }
}

/// Worker count from `FSSL_LAB_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

/// Fills every default the run depends on (currently the trigger).
pub fn resolve(mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    let dim = match cfg.data.source {
        DataSource::Synthetic => cfg.data.dim,
        DataSource::Cifar10 => crate::data::CIFAR10_RECORD - 1,
    };
    cfg.data.dim = dim;
    cfg.attack.trigger = Some(cfg.attack.trigger_for(dim));
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig, root: &RngStream) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let means = BlobMeans::random_with_background(
                d.classes,
                d.dim,
                d.background,
                &mut root.derive(&[TAG_DATA]),
            )?;
            let train = means.sample(
                d.train_per_class,
                d.spread,
                &mut root.derive(&[TAG_DATA, 1]),
            );
            let test = means.sample(d.test_per_class, d.spread, &mut root.derive(&[TAG_TEST]));
            Ok((train, test))
        }
        DataSource::Cifar10 => {
            let path = d
                .train_path
                .as_ref()
                .ok_or_else(|| FsslError::config("data.train_path", "missing"))?;
            let train = ingest_cifar10(path)?;
            let test = match &d.test_path {
                Some(p) => ingest_cifar10(p)?,
                None => train.clone(),
            };
            Ok((train, test))
        }
    }
}

/// Up to `per_class` samples of each class, chosen at random.
fn probe_subset(train: &Dataset, per_class: Option<usize>, rng: &mut RngStream) -> Dataset {
    let Some(k) = per_class else {
        return train.clone();
    };
    let mut idx = Vec::new();
    for c in 0..train.classes {
        let mut pool: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
        rng.shuffle(&mut pool);
        pool.truncate(k);
        idx.extend(pool);
    }
    idx.sort_unstable();
    train.subset(&idx)
}

/// Runs with the worker count from `FSSL_LAB_THREADS` (default: all cores).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_with_threads(cfg, threads_from_env())
}

/// Runs on a dedicated pool of `threads` workers. Output does not depend on
/// the worker count.
pub fn run_experiment_with_threads(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<RunOutput> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b
        .build()
        .map_err(|e| FsslError::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = resolve(cfg.clone())?;
    let root = RngStream::new(cfg.seed, 0);
    let (train, test) = load_data(&cfg, &root)?;
    let layout = cfg.layout()?;
    let trigger = cfg.trigger();
    let t = &cfg.train;
    let hp = TrainParams {
        lr: t.lr,
        tau: t.tau,
        momentum: t.momentum,
        batch_size: t.batch_size,
        local_epochs: t.local_epochs,
        aug_sigma: t.aug_sigma,
        aug_rho: t.aug_rho,
    };
    let fed = &cfg.federation;
    let plan = match fed.alpha {
        Some(a) => dirichlet_partition(
            &train.labels,
            train.classes,
            fed.clients,
            a,
            &mut root.derive(&[TAG_PARTITION]),
        )?,
        None => iid_partition(
            &train.labels,
            train.classes,
            fed.clients,
            &mut root.derive(&[TAG_PARTITION]),
        )?,
    };
    let global = init::<f64>(&layout, &mut root.derive(&[TAG_INIT]));

    let attacking = cfg.attack.enabled && !fed.malicious.is_empty();
    let poison = if attacking {
        let all: Vec<usize> = (0..train.len()).collect();
        make_poison_set(
            &train,
            &all,
            cfg.attack.poison_ratio,
            &trigger,
            &mut root.derive(&[TAG_POISON]),
        )?
    } else {
        PoisonSet {
            indices: Vec::new(),
            samples: Vec::new(),
        }
    };

    let mut clients = Vec::with_capacity(fed.clients);
    for (id, data) in plan.assignment.iter().enumerate() {
        let mut c = ClientState::new(
            id,
            data.clone(),
            &global,
            &train,
            &hp,
            t.queue_size,
            &mut root.derive(&[TAG_QUEUE, id as u64]),
        )?;
        c.malicious = fed.malicious.contains(&id);
        clients.push(c);
    }
    let root_client = match cfg.defense {
        crate::defenses::DefenseConfig::Fltrust { root_samples } => {
            let mut r = root.derive(&[TAG_ROOT]);
            let idx = r.choose_distinct(train.len(), root_samples.min(train.len()));
            Some(ClientState::new(
                usize::MAX,
                idx,
                &global,
                &train,
                &hp,
                t.queue_size,
                &mut r,
            )?)
        }
        _ => None,
    };
    let mut server = ServerState {
        global,
        history: vec![vec![0.0; layout.param_count()]; fed.clients],
        root: root_client,
    };

    let mut prng = root.derive(&[TAG_PROBE]);
    let probe_set = probe_subset(&train, cfg.eval.probe_per_class, &mut prng);
    let clean_probe = CleanLossProbe::new(
        train.inputs(),
        cfg.eval.clean_loss_queries.min(train.len()),
        cfg.eval
            .clean_loss_negatives
            .min(train.len().saturating_sub(cfg.eval.clean_loss_queries)),
        t.aug_sigma,
        t.aug_rho,
        t.tau,
        &mut prng,
    );
    let evaluate = |model: &ModelParams<f64>| -> Result<(f64, f64, f64)> {
        let probe = linear_probe(model, &probe_set, &cfg.eval.probe)?;
        Ok((
            acc(&probe, model, &test)?,
            asr(&probe, model, &test, &trigger)?,
            clean_probe.mean_loss(model)?,
        ))
    };

    let (a0, s0, l0) = evaluate(&server.global)?;
    let mut metrics = vec![RoundMetrics {
        round: 0,
        acc: a0,
        asr: s0,
        l_cl: 0.0,
        l_he: 0.0,
        l_bfe: 0.0,
        l_clean: l0,
        dist_to_global: 0.0,
        benign_dist: 0.0,
        attack_active: false,
        defense: cfg.defense.name().to_string(),
        defense_excluded: 0,
        defense_mal_weight: 0.0,
    }];
    let mut checkpoints = Vec::new();
    let round_rng = root.derive(&[TAG_ROUNDS]);
    let ctx = RoundContext {
        train: &train,
        hp,
        attack: &cfg.attack,
        trigger: &trigger,
        poison: &poison,
        defense: &cfg.defense,
        clients_per_round: fed.clients_per_round,
        malicious_participation: fed.malicious_participation,
        rng: &round_rng,
    };
    let mut attack_ran = false;
    for round in 1..=t.rounds {
        let out = run_round(&mut server, &mut clients, round, &ctx)?;
        attack_ran |= out.attack_active;
        let (a, s, l) = evaluate(&server.global)?;
        metrics.push(RoundMetrics {
            round,
            acc: a,
            asr: s,
            l_cl: out.losses.mean_cl(),
            l_he: out.attack_losses.mean_he(),
            l_bfe: out.attack_losses.mean_bfe(),
            l_clean: l,
            dist_to_global: out.dist_to_global,
            benign_dist: out.benign_dist,
            attack_active: out.attack_active,
            defense: out.verdict.name.clone(),
            defense_excluded: out.verdict.excluded.len(),
            defense_mal_weight: out.verdict.malicious_weight,
        });
        if cfg.eval.checkpoint_every.is_some_and(|k| round % k == 0) && round != t.rounds {
            checkpoints.push((round, server.global.clone()));
        }
    }
    checkpoints.push((t.rounds, server.global.clone()));

    let persistence = cfg
        .attack
        .stop_round
        .filter(|&s| s <= t.rounds)
        .map(|stop| {
            let asr_by_round: Vec<f64> = metrics.iter().map(|m| m.asr).collect();
            persistence_curve(&asr_by_round, stop, cfg.eval.persistence_step, attack_ran)
        });
    let eps = clients
        .iter()
        .filter(|c| c.malicious)
        .map(|c| c.attack.as_ref().and_then(|a| a.eps))
        .collect();
    Ok(RunOutput {
        final_model: server.global,
        config: cfg,
        metrics,
        partition: plan,
        checkpoints,
        persistence,
        eps,
    })
}

pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for m in metrics {
        wr.serialize(m).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> FsslError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => FsslError::Io(io),
            _ => unreachable!(),
        }
    } else {
        FsslError::MalformedRecord(e.to_string())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Writes `metrics.csv`, `summary.json` and `checkpoints/round_NNNN.ckpt`.
pub fn write_artifacts(out_dir: impl AsRef<Path>, run: &RunOutput) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    write_metrics_csv(
        &run.metrics,
        BufWriter::new(File::create(dir.join(METRICS_FILE))?),
    )?;
    let json = serde_json::to_string_pretty(&run.summary())
        .map_err(|e| FsslError::InvalidArgument(e.to_string()))?;
    fs::write(dir.join(SUMMARY_FILE), json + "\n")?;
    for (round, p) in &run.checkpoints {
        let f = File::create(
            dir.join(CHECKPOINT_DIR)
                .join(format!("round_{round:04}.ckpt")),
        )?;
        let mut w = BufWriter::new(f);
        write_checkpoint(p, &mut w)?;
        w.flush()?;
    }
    Ok(())
}
