//! Turning a configuration into a simulation and running it to disk.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;

use crate::attacks::Attacker;
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::federation::{run_training_with, AttackStart, ClientId, ClientState, Mode, Role, Simulation, TrainingRun};
use crate::harness::config::{DataSource, ExperimentConfig, MaliciousSet, PartitionKind, Resolved};
use crate::harness::data::SyntheticData;
use crate::harness::idx::load_idx;
use crate::harness::metrics::{detection_rows, metrics_header, metrics_row, write_model, CsvSink, DETECTIONS_HEADER};
use crate::harness::partition::{partition_iid, partition_noniid_shards};
use crate::model::{init_model, Dataset, TrainConfig};
use crate::rng::Streams;

#[derive(Debug, Clone)]
pub struct Prepared {
    pub sim: Simulation,
    pub mode: Mode,
    pub malicious: Vec<ClientId>,
}

/// Loads or generates data, partitions it, and equips the malicious clients.
///
/// `seed` overrides the configured seed; `mode` overrides the default, which
/// is defended whenever an enabled `[defense]` section is present.
pub fn prepare(cfg: &ExperimentConfig, base_dir: &Path, seed: Option<u64>, mode: Option<Mode>) -> Result<Prepared> {
    let r = cfg.resolve(base_dir)?;
    let seed = seed.unwrap_or(r.seed);
    let streams = Streams::new(seed);
    let (train_pool, test, layout) = load_data(&r, &streams)?;

    let parts = match r.partition {
        PartitionKind::Iid => partition_iid(&train_pool, r.clients, &mut streams.stream("partition", &[]))?,
        PartitionKind::NonIidShards => {
            partition_noniid_shards(&train_pool, r.clients, &mut streams.stream("partition", &[]))?
        }
    };
    let mut clients: Vec<ClientState> = parts
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::honest(ClientId(i), d))
        .collect();

    let mut malicious = Vec::new();
    let mut subtask = None;
    let mut attack_start = AttackStart::Round(usize::MAX);
    if let Some(plan) = &r.attack {
        let spec = plan.resolve(|class| match &layout {
            Some(l) => l.trigger(class),
            None => Err(Error::config("backdoor trigger needs synthetic data")),
        })?;
        spec.validate(r.model.num_classes)?;
        malicious = match &plan.malicious {
            MaliciousSet::Ids(ids) => ids.iter().map(|&i| ClientId(i)).collect(),
            MaliciousSet::Proportion(p) => {
                let count = (p * r.clients as f64).round() as usize;
                let mut picked: Vec<ClientId> =
                    index::sample(&mut streams.stream("malicious", &[]), r.clients, count)
                        .into_iter()
                        .map(ClientId)
                        .collect();
                picked.sort_unstable();
                picked
            }
        };
        let train = if plan.iterations.is_some() || plan.learning_rate.is_some() {
            Some(TrainConfig {
                iterations: plan.iterations.unwrap_or(r.train.iterations),
                batch_size: r.train.batch_size,
                learning_rate: plan.learning_rate.unwrap_or(r.train.learning_rate),
            })
        } else {
            None
        };
        for &id in &malicious {
            let c = &mut clients[id.0];
            let poisoned = spec
                .poison(&c.data, &mut streams.stream("poison", &[id.0 as u64]))
                .map_err(|e| Error::Client {
                    client: id,
                    source: Box::new(e),
                })?;
            c.role = Role::Malicious(Box::new(Attacker {
                attack: spec,
                report: plan.report,
                poisoned,
                train,
            }));
        }
        subtask = Some(spec);
        attack_start = plan.start;
    }

    let mode = match mode {
        Some(m) => m,
        None if r.defense.is_some() => Mode::Defended,
        None => Mode::FedAvgBaseline,
    };
    if mode == Mode::Defended && r.defense.is_none() {
        return Err(Error::config("defended mode needs an enabled [defense] section"));
    }
    let sim = Simulation {
        seed,
        spec: r.model,
        train: r.train,
        clients,
        test,
        train_pool,
        per_round: r.per_round,
        rounds: r.rounds,
        defense: r.defense.clone().unwrap_or_else(DefenseConfig::default),
        dp: r.dp,
        attack_start,
        subtask,
        initial: init_model(&r.model, streams.seed_u64("init", &[])),
        record_trajectory: false,
    };
    sim.validate(mode)?;
    Ok(Prepared { sim, mode, malicious })
}

fn load_data(r: &Resolved, streams: &Streams) -> Result<(Dataset, Dataset, Option<SyntheticData>)> {
    match &r.data {
        DataSource::Synthetic {
            spec,
            per_class,
            test_per_class,
        } => {
            let layout = SyntheticData::new(*spec, &mut streams.stream("data", &[0]))?;
            let train = layout.sample(*per_class, &mut streams.stream("data", &[1]))?;
            let test = layout.sample(*test_per_class, &mut streams.stream("data", &[2]))?;
            Ok((train, test, Some(layout)))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
            None,
        )),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub run: TrainingRun,
    pub out_dir: PathBuf,
    pub malicious: Vec<ClientId>,
}

fn sink(path: &Path, header: &str) -> Result<CsvSink<BufWriter<File>>> {
    Ok(CsvSink::new(BufWriter::new(File::create(path)?), header)?)
}

/// Runs the experiment in `config`, writing `metrics.csv`, `detections.csv`,
/// `timing.csv` and `final_model.bin` to `out_dir`. Rows are flushed every
/// round, so a failed run leaves the rounds completed so far on disk.
pub fn run_experiment(config: &Path, seed: Option<u64>, mode: Option<Mode>, out_dir: &Path) -> Result<ExperimentOutput> {
    let cfg = ExperimentConfig::load(config)?;
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let prepared = prepare(&cfg, base, seed, mode)?;
    fs::create_dir_all(out_dir)?;
    let mut metrics = sink(&out_dir.join("metrics.csv"), &metrics_header(prepared.sim.spec.num_classes))?;
    let mut detections = sink(&out_dir.join("detections.csv"), DETECTIONS_HEADER)?;
    let mut timing = sink(&out_dir.join("timing.csv"), "t,wall_ms")?;
    let run = run_training_with(&prepared.sim, prepared.mode, |rec| {
        metrics.rows([metrics_row(rec)])?;
        detections.rows(detection_rows(rec))?;
        timing.rows([format!("{},{:.3}", rec.round, rec.wall_ms)])?;
        Ok(())
    })?;
    let mut model = BufWriter::new(File::create(out_dir.join("final_model.bin"))?);
    write_model(&mut model, &prepared.sim.spec, &run.final_model)?;
    model.flush()?;
    Ok(ExperimentOutput {
        run,
        out_dir: out_dir.to_path_buf(),
        malicious: prepared.malicious,
    })
}
