//! Round orchestration: client selection, update collection, and aggregation.

use std::fmt;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::attacks::{craft_update, malicious_report, Attacker, AttackSpec, ScalingSpec};
use crate::defense::{
    build_submodels, choose_d_noniid, collect_presence, ClassPresenceVector, delegate_iid, delegate_noniid, evaluate_submodel,
    penalty, tally_reports, weighted_aggregate, DefenseConfig, DelegationMode, DelegationPlan, EvaluationReport,
    Grouping, SubModel,
};
use crate::error::{Error, Result};
use crate::harness::metrics::{measure_subtask, MetricsRecord, SubModelRecord};
use crate::model::{evaluate_per_class, local_train, loss, Dataset, ModelSpec, ParameterVector, TrainConfig};
use crate::privacy::{assert_disjoint, dp_mean, perturb_global, perturb_submodel, DpConfig};
use crate::rng::Streams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub usize);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub enum Role {
    Honest,
    Malicious(Box<Attacker>),
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    pub data: Dataset,
    pub role: Role,
}

impl ClientState {
    pub fn honest(id: ClientId, data: Dataset) -> Self {
        Self {
            id,
            data,
            role: Role::Honest,
        }
    }

    pub fn attacker(&self) -> Option<&Attacker> {
        match &self.role {
            Role::Honest => None,
            Role::Malicious(a) => Some(a),
        }
    }

    pub fn is_malicious(&self) -> bool {
        self.attacker().is_some()
    }
}

#[derive(Debug, Clone)]
pub struct RoundContext {
    /// 1-based round index
    pub round: usize,
    /// Selected clients, sorted.
    pub selected: Vec<ClientId>,
    pub global: ParameterVector,
    /// Whether malicious clients run their attack this round.
    pub attack_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub owner: ClientId,
    pub delta: ParameterVector,
}

/// Uniformly random `k`-subset of `pool`, returned sorted.
pub fn select_clients<R: Rng + ?Sized>(pool: &[ClientId], k: usize, rng: &mut R) -> Result<Vec<ClientId>> {
    if k > pool.len() {
        return Err(Error::input(format!(
            "cannot select {k} clients from a pool of {}",
            pool.len()
        )));
    }
    let mut chosen: Vec<ClientId> = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

fn client<'a>(clients: &'a [ClientState], id: ClientId) -> Result<&'a ClientState> {
    clients
        .get(id.0)
        .filter(|c| c.id == id)
        .ok_or_else(|| Error::input(format!("unknown client {id}")))
}

/// Runs local training on every selected client and returns one update per
/// client, sorted by owner.
///
/// Honest clients (and malicious ones while their attack is dormant) train on
/// their own data. Active attackers train on their poisoned data and submit
/// the crafted delta; full replacement is computed against the honest deltas
/// of the same round. Each client trains on the stream `train/[round, id]`.
pub fn collect_updates(
    ctx: &RoundContext,
    clients: &[ClientState],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    streams: &Streams,
) -> Result<Vec<UpdateRecord>> {
    let selected: Vec<&ClientState> = ctx
        .selected
        .iter()
        .map(|&id| client(clients, id))
        .collect::<Result<_>>()?;
    let is_active_attacker = |c: &ClientState| ctx.attack_active && c.is_malicious();

    let trained: Vec<(ClientId, ParameterVector)> = selected
        .par_iter()
        .map(|c| {
            let mut rng = streams.stream("train", &[ctx.round as u64, c.id.0 as u64]);
            let result = match c.attacker() {
                Some(a) if ctx.attack_active => {
                    local_train(spec, &ctx.global, &a.poisoned, a.train.as_ref().unwrap_or(cfg), &mut rng)
                }
                _ => local_train(spec, &ctx.global, &c.data, cfg, &mut rng),
            };
            result
                .map(|d| (c.id, d))
                .map_err(|e| Error::Client {
                    client: c.id,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    let honest: Vec<&ParameterVector> = selected
        .iter()
        .zip(&trained)
        .filter(|(c, _)| !is_active_attacker(c))
        .map(|(_, (_, d))| d)
        .collect();

    selected
        .iter()
        .zip(&trained)
        .map(|(c, (id, delta))| {
            let delta = match c.attacker() {
                Some(a) if ctx.attack_active => {
                    let x = ctx.global.add(delta)?;
                    let others = matches!(a.attack.scaling, ScalingSpec::FullReplacement).then_some(honest.as_slice());
                    craft_update(a.attack.scaling, &x, &ctx.global, others)?
                }
                _ => delta.clone(),
            };
            Ok(UpdateRecord { owner: *id, delta })
        })
        .collect()
}

/// `w_t + mean(deltas)`, summed in owner order.
pub fn fedavg_aggregate(global: &ParameterVector, updates: &[UpdateRecord]) -> Result<ParameterVector> {
    if updates.is_empty() {
        return Err(Error::input("no updates to aggregate"));
    }
    let mut ordered: Vec<&UpdateRecord> = updates.iter().collect();
    ordered.sort_by_key(|u| u.owner);
    let mean = ParameterVector::mean(ordered.iter().map(|u| &u.delta))?;
    global.add(&mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FedAvgBaseline,
    Defended,
}

/// When malicious clients switch from honest behaviour to their attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackStart {
    /// From this 1-based round on.
    Round(usize),
    /// From the first round whose incoming global model reaches this test accuracy.
    Accuracy(f64),
}

/// A fully prepared simulation: partitioned clients, evaluation data, and
/// protocol parameters.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub seed: u64,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Indexed by client id.
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    /// Clean training data of all clients; used for the training-loss column.
    pub train_pool: Dataset,
    pub per_round: usize,
    pub rounds: usize,
    pub defense: DefenseConfig,
    pub dp: Option<DpConfig>,
    pub attack_start: AttackStart,
    /// Attack whose subtask success is measured each round.
    pub subtask: Option<AttackSpec>,
    pub initial: ParameterVector,
    pub record_trajectory: bool,
}

impl Simulation {
    pub fn validate(&self, mode: Mode) -> Result<()> {
        self.spec.validate()?;
        if self.clients.is_empty() {
            return Err(Error::config("no clients"));
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.id.0 != i {
                return Err(Error::config("client ids must be 0..N in order"));
            }
            if c.data.is_empty() {
                return Err(Error::config(format!("client {i} has no data")));
            }
            let smallest = c.attacker().map_or(c.data.len(), |a| a.poisoned.len().min(c.data.len()));
            let batch = c
                .attacker()
                .and_then(|a| a.train)
                .map_or(self.train.batch_size, |t| t.batch_size.max(self.train.batch_size));
            if batch > smallest {
                return Err(Error::config(format!(
                    "batch size {batch} exceeds the {smallest} samples of client {i}"
                )));
            }
        }
        if self.per_round == 0 || self.per_round > self.clients.len() {
            return Err(Error::config(format!(
                "clients per round K = {} must be in [1, N = {}]",
                self.per_round,
                self.clients.len()
            )));
        }
        if self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return Err(Error::config("batch size and learning rate must be positive"));
        }
        if self.initial.dim() != self.spec.param_count() {
            return Err(Error::config("initial model does not match the model spec"));
        }
        if self.test.is_empty() {
            return Err(Error::config("test set is empty"));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        if mode == Mode::Defended {
            self.defense.validate(self.per_round)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub metrics: Vec<MetricsRecord>,
    pub final_model: ParameterVector,
    /// Global model after each round, when requested.
    pub trajectory: Vec<ParameterVector>,
}

pub fn run_training(sim: &Simulation, mode: Mode) -> Result<TrainingRun> {
    run_training_with(sim, mode, |_| Ok(()))
}

/// Runs all rounds, handing each round's metrics to `on_round` as soon as the
/// round completes.
pub fn run_training_with<F>(sim: &Simulation, mode: Mode, mut on_round: F) -> Result<TrainingRun>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    sim.validate(mode)?;
    let streams = Streams::new(sim.seed);
    let pool: Vec<ClientId> = sim.clients.iter().map(|c| c.id).collect();
    let mut global = sim.initial.clone();
    let mut metrics = Vec::with_capacity(sim.rounds);
    let mut trajectory = Vec::new();
    let mut attack_active = false;
    let mut current_accuracy = if sim.rounds > 0 {
        evaluate_per_class(&sim.spec, &global, &sim.test)?.overall()
    } else {
        0.0
    };

    for round in 1..=sim.rounds {
        let started = Instant::now();
        if !attack_active {
            attack_active = match sim.attack_start {
                AttackStart::Round(r) => round >= r,
                AttackStart::Accuracy(a) => current_accuracy >= a,
            };
        }
        let selected = select_clients(&pool, sim.per_round, &mut streams.stream("select", &[round as u64]))?;
        let ctx = RoundContext {
            round,
            selected,
            global: global.clone(),
            attack_active,
        };
        let updates = collect_updates(&ctx, &sim.clients, &sim.spec, &sim.train, &streams)?;

        let (next, submodel_records) = match mode {
            Mode::FedAvgBaseline => {
                let next = match sim.dp.filter(|d| d.apply_to_global) {
                    Some(dp) => {
                        let mut ordered: Vec<&UpdateRecord> = updates.iter().collect();
                        ordered.sort_by_key(|u| u.owner);
                        let deltas: Vec<&ParameterVector> = ordered.iter().map(|u| &u.delta).collect();
                        let mut rng = streams.stream("dp", &[round as u64, u64::MAX]);
                        global.add(&dp_mean(&deltas, dp.clip, dp.sigma, &mut rng)?)?
                    }
                    None => fedavg_aggregate(&global, &updates)?,
                };
                (next, Vec::new())
            }
            Mode::Defended => defended_round(sim, &ctx, &updates, &streams)?,
        };
        global = next;
        if !global.is_finite() {
            return Err(Error::Input(format!("global model became non-finite in round {round}")));
        }

        let per_class = evaluate_per_class(&sim.spec, &global, &sim.test)?;
        current_accuracy = per_class.overall();
        let subtask_success = sim
            .subtask
            .as_ref()
            .map(|a| measure_subtask(&sim.spec, &global, a, &sim.test))
            .transpose()?;
        let record = MetricsRecord {
            round,
            attack_active,
            main_accuracy: current_accuracy,
            subtask_success,
            train_loss: loss(&sim.spec, &global, &sim.train_pool)?,
            class_accuracy: per_class.accuracies(),
            submodels: submodel_records,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_round(&record)?;
        metrics.push(record);
        if sim.record_trajectory {
            trajectory.push(global.clone());
        }
    }
    Ok(TrainingRun {
        metrics,
        final_model: global,
        trajectory,
    })
}

/// One defended aggregation: sub-models, delegation, evaluation, penalties.
fn defended_round(
    sim: &Simulation,
    ctx: &RoundContext,
    updates: &[UpdateRecord],
    streams: &Streams,
) -> Result<(ParameterVector, Vec<SubModelRecord>)> {
    let cfg = &sim.defense;
    let t = ctx.round as u64;
    let k = ctx.selected.len();
    let selected_data = || ctx.selected.iter().map(|&id| (id, &sim.clients[id.0].data));

    let presence = match cfg.mode {
        DelegationMode::NonIid => Some(collect_presence(selected_data(), cfg.presence_threshold)?),
        DelegationMode::Iid => None,
    };
    let u = match cfg.grouping {
        Grouping::SubmodelSize(u) => u,
        Grouping::SubmodelCount(d) => k / d,
        Grouping::FromPresence => {
            let d = choose_d_noniid(presence.as_deref().expect("non-IID presence"), k)?;
            k / d
        }
    };
    let (mut submodels, plan) = group_and_delegate(sim, ctx, updates, u, presence.as_deref(), streams)?;
    if let Some(dp) = sim.dp.filter(|d| d.apply_to_submodels) {
        assert_disjoint(&submodels)?;
        submodels = submodels
            .iter()
            .map(|s| {
                let mut rng = streams.stream("dp", &[t, s.id as u64]);
                perturb_submodel(s, updates, &ctx.global, dp.clip, dp.sigma, &mut rng)
            })
            .collect::<Result<_>>()?;
    }

    let poisoned: Vec<bool> = submodels
        .iter()
        .map(|s| ctx.attack_active && s.members.iter().any(|m| sim.clients[m.0].is_malicious()))
        .collect();
    let reports = gather_reports(sim, ctx, &plan, &submodels, &poisoned, streams)?;
    let counts = tally_reports(&plan, &reports)?;
    let penalties = counts
        .iter()
        .map(|&r| penalty(r, cfg.evaluators, cfg.initial_penalty))
        .collect::<Result<Vec<_>>>()?;

    let mut next = weighted_aggregate(&ctx.global, &submodels, &penalties, cfg.aggregation)?;
    if let Some(dp) = sim.dp.filter(|d| d.apply_to_global) {
        let mut rng = streams.stream("dp", &[t, u64::MAX]);
        next = perturb_global(&next, k, dp.clip, dp.sigma, &mut rng)?;
    }

    let records = submodels
        .iter()
        .map(|s| {
            let mut flagged: Vec<usize> = reports
                .iter()
                .filter(|r| r.submodel == s.id)
                .flat_map(|r| r.flagged_classes())
                .collect();
            flagged.sort_unstable();
            flagged.dedup();
            SubModelRecord {
                id: s.id,
                members: s.members.clone(),
                reports: counts[s.id],
                penalty: penalties[s.id],
                flagged_classes: flagged,
                poisoned: poisoned[s.id],
            }
        })
        .collect();
    Ok((next, records))
}

/// Regroupings tried per evaluator pool in a non-IID round before its
/// delegation is declared infeasible.
pub const MAX_REGROUPINGS: u64 = 100;

/// Shuffles updates into sub-models and delegates them.
///
/// In non-IID mode a grouping that leaves some class without enough eligible
/// holders is reshuffled. Evaluators come from the selected clients; if no
/// grouping works with them, the pool widens to every client. IID
/// feasibility does not depend on the grouping.
fn group_and_delegate(
    sim: &Simulation,
    ctx: &RoundContext,
    updates: &[UpdateRecord],
    u: usize,
    presence: Option<&[ClassPresenceVector]>,
    streams: &Streams,
) -> Result<(Vec<SubModel>, DelegationPlan)> {
    let cfg = &sim.defense;
    let t = ctx.round as u64;
    let mut everyone: Option<Vec<ClassPresenceVector>> = None;
    let mut attempt = 0;
    loop {
        let path: Vec<u64> = if attempt == 0 { vec![t] } else { vec![t, attempt] };
        let submodels = build_submodels(&ctx.global, updates, u, &mut streams.stream("submodels", &path))?;
        let mut rng = streams.stream("delegate", &path);
        let plan = match (presence, &everyone) {
            (None, _) => delegate_iid(
                &submodels,
                &ctx.selected,
                cfg.evaluators,
                cfg.max_tasks,
                sim.spec.num_classes,
                &mut rng,
            ),
            (Some(p), None) => delegate_noniid(&submodels, p, cfg.evaluators, cfg.max_tasks, &mut rng),
            (Some(_), Some(all)) => delegate_noniid(&submodels, all, cfg.evaluators, cfg.max_tasks, &mut rng),
        };
        match plan {
            Ok(plan) => return Ok((submodels, plan)),
            Err(Error::Config(_)) if presence.is_some() && attempt + 1 < 2 * MAX_REGROUPINGS => {
                attempt += 1;
                if attempt == MAX_REGROUPINGS {
                    everyone = Some(collect_presence(
                        sim.clients.iter().map(|c| (c.id, &c.data)),
                        cfg.presence_threshold,
                    )?);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

fn gather_reports(
    sim: &Simulation,
    ctx: &RoundContext,
    plan: &DelegationPlan,
    submodels: &[SubModel],
    poisoned: &[bool],
    streams: &Streams,
) -> Result<Vec<EvaluationReport>> {
    let tasks: Vec<_> = plan.tasks_by_evaluator().into_iter().collect();
    let per_evaluator: Vec<Vec<EvaluationReport>> = tasks
        .par_iter()
        .map(|(ev, list)| {
            let state = &sim.clients[ev.0];
            match state.attacker() {
                Some(a) if ctx.attack_active => {
                    let mut rng = streams.stream("report", &[ctx.round as u64, ev.0 as u64]);
                    Ok(malicious_report(*ev, list, |s| poisoned[s], a.report, &mut rng))
                }
                _ => {
                    let baseline = evaluate_per_class(&sim.spec, &ctx.global, &state.data)?;
                    list.iter()
                        .map(|(sub, classes)| {
                            evaluate_submodel(
                                *ev,
                                &sim.spec,
                                &state.data,
                                &submodels[*sub],
                                classes,
                                &baseline,
                                sim.defense.margin,
                            )
                        })
                        .collect()
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut reports: Vec<EvaluationReport> = per_evaluator.into_iter().flatten().collect();
    reports.sort_by_key(|r| (r.submodel, r.evaluator));
    Ok(reports)
}
