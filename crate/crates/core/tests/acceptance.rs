//! Acceptance gate: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --test acceptance`. Every criterion runs even when an
//! earlier one fails.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedxval::analysis::{p_evade, p_evade_exact, p_evade_montecarlo, EvasionParams, Reading};
use fedxval::attacks::{craft_update, AttackKind, AttackSpec, Attacker, ReportStrategy, ScalingSpec};
use fedxval::defense::{
    build_submodels, delegate_iid, delegate_noniid, evaluate_submodel, penalty, ClassPresenceVector, DelegationPlan,
    SubModel,
};
use fedxval::federation::{
    collect_updates, fedavg_aggregate, run_training, AttackStart, ClientState, Mode, Role, RoundContext, Simulation,
    UpdateRecord,
};
use fedxval::harness::config::ExperimentConfig;
use fedxval::harness::{partition_iid, prepare, run_experiment, SyntheticData, SyntheticSpec};
use fedxval::model::{evaluate_per_class, gradient, init_model, loss, ModelSpec, ParameterVector, Sample, TrainConfig};
use fedxval::privacy::perturb_submodel;
use fedxval::rng::Streams;
use fedxval::{ClientId, Dataset};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(out: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    if elapsed <= budget {
        out
    } else {
        outcome(
            false,
            format!("{} (took {:.1}s, budget {}s)", out.detail, elapsed.as_secs_f64(), budget.as_secs()),
        )
    }
}

// ---------------------------------------------------------------------------
// 1. penalty function

fn criterion_penalty() -> Outcome {
    for e in 3..=10 {
        for v in [0.25, 0.5, 0.75] {
            let c = penalty(1, e, v).unwrap();
            if c != v {
                return outcome(false, format!("penalty(1, {e}, {v}) = {c}"));
            }
        }
    }
    let mut runner = TestRunner::new(PtConfig {
        cases: 2000,
        ..PtConfig::default()
    });
    let strategy = (3usize..=40, 0.001f64..=1.0).prop_flat_map(|(e, v)| (Just(e), Just(v), 0..=e));
    let result = runner.run(&strategy, |(e, v, r)| {
        let c = penalty(r, e, v).map_err(|err| TestCaseError::fail(err.to_string()))?;
        prop_assert!((0.0..=1.0).contains(&c));
        if r >= 1 && (r as f64 - 1.0) / (e as f64 - 2.0) >= 0.5 {
            prop_assert_eq!(c, 0.0);
        }
        if r < e {
            let next = penalty(r + 1, e, v).unwrap();
            prop_assert!(next <= c, "penalty({}, {e}, {v}) = {next} > penalty({r}) = {c}", r + 1);
        }
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, "c(1)=v on 24 grid points; zero region and monotonicity hold on 2000 cases"),
        Err(e) => outcome(false, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// 2. evasion probability

fn criterion_evasion() -> Outcome {
    let reference = EvasionParams::new(100, 10, 10, 3, 3).unwrap();
    let exact = p_evade_exact(&reference).unwrap();
    let readings: Vec<String> = Reading::ALL
        .iter()
        .map(|&r| format!("{}={:.4e}", r.name(), p_evade(&reference, r).unwrap()))
        .collect();
    let point_ok = (exact - 3.0e-4).abs() <= 1.0e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for point in 0..20u64 {
        let k = rng.random_range(10..=100u64);
        let malicious = rng.random_range(1..=k / 2);
        let u = rng.random_range(1..=(k / 4).max(1));
        let e = rng.random_range(1..=(k - u).min(10));
        let t = rng.random_range(0..=e);
        let params = EvasionParams::new(k, malicious, u, e, t).unwrap();
        let p = p_evade_exact(&params).unwrap();
        let mc = p_evade_montecarlo(&params, 1_000_000, 77 + point).unwrap();
        // standard error under the exact probability, so zero-hit estimates are judged fairly
        let se = (p * (1.0 - p) / mc.accepted as f64).sqrt();
        let z = if se > 0.0 {
            (mc.estimate - p).abs() / se
        } else if mc.estimate == p {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
        if z > 3.0 {
            failures.push(format!("K={k} M={malicious} u={u} e={e} t={t}: exact {p:.5e} mc {:.5e}", mc.estimate));
        }
    }
    let mc_ok = failures.is_empty();
    let detail = format!(
        "K=100 Kp=10 u=10 e=3 t=3: conditional {exact:.4e} (target 3.0e-4 +/- 1.0e-4) [{}]; \
         exact vs Monte Carlo worst deviation {worst:.2} se over 20 points{}",
        readings.join(", "),
        if mc_ok { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    outcome(point_ok && mc_ok, detail)
}

// ---------------------------------------------------------------------------
// 3. replacement identity

fn criterion_replacement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 57;
    let mut worst: f64 = 0.0;
    for k in [5usize, 10, 20] {
        for _ in 0..10 {
            let mut vector = |scale: f64| ParameterVector::from_vec((0..dim).map(|_| rng.random_range(-scale..scale)).collect());
            let global = vector(1.0);
            let target = vector(1.0);
            let honest: Vec<ParameterVector> = (0..k - 1).map(|_| vector(0.5)).collect();
            let refs: Vec<&ParameterVector> = honest.iter().collect();
            let crafted = craft_update(ScalingSpec::FullReplacement, &target, &global, Some(&refs)).unwrap();
            let mut updates: Vec<UpdateRecord> = honest
                .iter()
                .enumerate()
                .map(|(i, d)| UpdateRecord {
                    owner: ClientId(i + 1),
                    delta: d.clone(),
                })
                .collect();
            updates.push(UpdateRecord {
                owner: ClientId(0),
                delta: crafted,
            });
            let next = fedavg_aggregate(&global, &updates).unwrap();
            for (a, b) in next.as_slice().iter().zip(target.as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("max |FedAvg - X| = {worst:.2e} over K in {{5, 10, 20}}"))
}

// ---------------------------------------------------------------------------
// 4. gradient correctness

fn numeric_gradient(spec: &ModelSpec, params: &ParameterVector, data: &Dataset) -> Vec<f64> {
    let h = 1e-5;
    (0..params.dim())
        .map(|i| {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            (loss(spec, &plus, data).unwrap() - loss(spec, &minus, data).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn criterion_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let d = rng.random_range(1..=8);
        let c = rng.random_range(2..=4);
        let spec = if case % 2 == 0 {
            ModelSpec::softmax_linear(d, c)
        } else {
            ModelSpec::mlp(d, rng.random_range(1..=6), c)
        };
        let params = ParameterVector::from_vec((0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let n = rng.random_range(1..=5);
        let samples: Vec<Sample> = (0..n)
            .map(|_| Sample::new((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(0..c)))
            .collect();
        let data = Dataset::new(samples, c).unwrap();
        let batch: Vec<&Sample> = data.samples().iter().collect();
        let (analytic, _) = gradient(&spec, &params, &batch).unwrap();
        let numeric = numeric_gradient(&spec, &params, &data);
        let diff: f64 = analytic
            .as_slice()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.norm_l2().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    outcome(worst <= 1e-5, format!("worst relative error {worst:.2e} over 50 instances"))
}

// ---------------------------------------------------------------------------
// 5. no-attack equivalence

const EQUIVALENCE_CONFIG: &str = r#"
seed = 0
clients = 40
per_round = 20
rounds = 10

[model]
kind = "softmax-linear"

[train]
iterations = 10
batch_size = 10
learning_rate = 0.1

[data]
source = "synthetic"
num_classes = 10
input_dim = 32
per_class = 600
test_per_class = 100
separation = 10.0
spread = 1.0

[defense]
enabled = true
submodels = 4
evaluators = 3
max_tasks = 3
initial_penalty = 0.5
margin = 0.1
"#;

fn criterion_no_attack_equivalence() -> Outcome {
    let cfg = ExperimentConfig::from_toml(EQUIVALENCE_CONFIG).unwrap();
    let mut worst: f64 = 0.0;
    let mut non_unit = 0;
    for seed in [11u64, 12, 13] {
        let mut prepared = prepare(&cfg, Path::new("."), Some(seed), None).unwrap();
        prepared.sim.record_trajectory = true;
        let defended = run_training(&prepared.sim, Mode::Defended).unwrap();
        let baseline = run_training(&prepared.sim, Mode::FedAvgBaseline).unwrap();
        non_unit += defended
            .metrics
            .iter()
            .flat_map(|m| m.penalties())
            .filter(|&c| c != 1.0)
            .count();
        for (a, b) in defended.trajectory.iter().zip(&baseline.trajectory) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(
        non_unit == 0 && worst <= 1e-12,
        format!("{non_unit} penalties below 1; max trajectory gap {worst:.2e} over 3 seeds x 10 rounds"),
    )
}

// ---------------------------------------------------------------------------
// 6 and 8. scaled label flip inside one sub-model

struct ScalingScenario {
    spec: ModelSpec,
    train: TrainConfig,
    clients: Vec<ClientState>,
    test: Dataset,
    global: ParameterVector,
}

const SCALING_CLIENTS: usize = 20;
const ATTACKER: ClientId = ClientId(0);

/// Twenty clients on separable 4-class synthetic data, a global model
/// pre-trained by honest FedAvg, and client 0 turned into a label-flipping
/// attacker that scales its update by 10. With four classes a fully flipped
/// source class costs 25 points of main-task accuracy.
fn scaling_scenario() -> ScalingScenario {
    let streams = Streams::new(600);
    let layout_spec = SyntheticSpec {
        num_classes: 4,
        ..SyntheticSpec::default()
    };
    let layout = SyntheticData::new(layout_spec, &mut streams.stream("data", &[0])).unwrap();
    let train_pool = layout.sample(300, &mut streams.stream("data", &[1])).unwrap();
    let test = layout.sample(100, &mut streams.stream("data", &[2])).unwrap();
    let parts = partition_iid(&train_pool, SCALING_CLIENTS, &mut streams.stream("partition", &[])).unwrap();
    let mut clients: Vec<ClientState> = parts
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::honest(ClientId(i), d))
        .collect();
    let spec = ModelSpec::softmax_linear(32, 4);
    let train = TrainConfig {
        iterations: 10,
        batch_size: 10,
        learning_rate: 0.1,
    };
    let warmup = Simulation {
        seed: 600,
        spec,
        train,
        clients: clients.clone(),
        test: test.clone(),
        train_pool,
        per_round: SCALING_CLIENTS,
        rounds: 10,
        defense: Default::default(),
        dp: None,
        attack_start: AttackStart::Round(usize::MAX),
        subtask: None,
        initial: init_model(&spec, 600),
        record_trajectory: false,
    };
    let global = run_training(&warmup, Mode::FedAvgBaseline).unwrap().final_model;

    let attack = AttackSpec {
        kind: AttackKind::LabelFlip { src: 1, dst: 3 },
        scaling: ScalingSpec::ScaleByFactor(10.0),
    };
    let attacker = &mut clients[ATTACKER.0];
    let poisoned = attack.poison(&attacker.data, &mut streams.stream("poison", &[0])).unwrap();
    attacker.role = Role::Malicious(Box::new(Attacker {
        attack,
        report: ReportStrategy::AlwaysClear,
        poisoned,
        train: None,
    }));
    ScalingScenario {
        spec,
        train,
        clients,
        test,
        global,
    }
}

struct ScaledRound {
    submodels: Vec<SubModel>,
    plan: DelegationPlan,
    poisoned: usize,
}

impl ScalingScenario {
    fn round(&self, seed: u64, u: usize) -> (ScaledRound, Vec<UpdateRecord>, Streams) {
        let streams = Streams::new(seed);
        let selected: Vec<ClientId> = (0..SCALING_CLIENTS).map(ClientId).collect();
        let ctx = RoundContext {
            round: 1,
            selected: selected.clone(),
            global: self.global.clone(),
            attack_active: true,
        };
        let updates = collect_updates(&ctx, &self.clients, &self.spec, &self.train, &streams).unwrap();
        let submodels = build_submodels(&self.global, &updates, u, &mut streams.stream("submodels", &[1])).unwrap();
        let plan = delegate_iid(&submodels, &selected, 3, 3, self.spec.num_classes, &mut streams.stream("delegate", &[1])).unwrap();
        let poisoned = submodels.iter().position(|s| s.has_member(ATTACKER)).unwrap();
        (
            ScaledRound {
                submodels,
                plan,
                poisoned,
            },
            updates,
            streams,
        )
    }

    /// Evaluators (all honest here) that flag each sub-model.
    fn flags(&self, submodels: &[SubModel], plan: &DelegationPlan) -> Vec<usize> {
        submodels
            .iter()
            .map(|sub| {
                plan.assignments[sub.id]
                    .iter()
                    .filter(|a| {
                        let data = &self.clients[a.evaluator.0].data;
                        let baseline = evaluate_per_class(&self.spec, &self.global, data).unwrap();
                        evaluate_submodel(a.evaluator, &self.spec, data, sub, &a.classes, &baseline, 0.1)
                            .unwrap()
                            .any_flagged()
                    })
                    .count()
            })
            .collect()
    }

    fn accuracy(&self, sub: &SubModel) -> f64 {
        evaluate_per_class(&self.spec, &sub.materialized, &self.test).unwrap().overall()
    }
}

fn criterion_scaling_mismatch(scenario: &ScalingScenario) -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for u in [2usize, 5] {
        let mut good = 0;
        let mut min_gap = f64::INFINITY;
        for r in 0..20u64 {
            let (round, _, _) = scenario.round(6000 + r, u);
            let honest: Vec<f64> = round
                .submodels
                .iter()
                .filter(|s| s.id != round.poisoned)
                .map(|s| scenario.accuracy(s))
                .collect();
            let honest_mean = honest.iter().sum::<f64>() / honest.len() as f64;
            let gap = honest_mean - scenario.accuracy(&round.submodels[round.poisoned]);
            let flags = scenario.flags(&round.submodels, &round.plan)[round.poisoned];
            min_gap = min_gap.min(gap);
            if gap >= 0.20 && flags >= 2 {
                good += 1;
            }
        }
        pass &= good >= 18;
        details.push(format!("u={u}: {good}/20 rounds (smallest accuracy gap {:.1} pp)", 100.0 * min_gap));
    }
    outcome(pass, details.join("; "))
}

fn criterion_dp_non_interference(scenario: &ScalingScenario) -> Outcome {
    let mut same = 0;
    let mut poisoned_flagged = 0;
    for r in 0..20u64 {
        let (round, updates, streams) = scenario.round(8000 + r, 5);
        let flagged = |sigma: f64| -> BTreeSet<usize> {
            let noisy: Vec<SubModel> = round
                .submodels
                .iter()
                .map(|s| {
                    let mut rng = streams.stream("dp", &[1, s.id as u64]);
                    perturb_submodel(s, &updates, &scenario.global, 15.0, sigma, &mut rng).unwrap()
                })
                .collect();
            scenario
                .flags(&noisy, &round.plan)
                .into_iter()
                .enumerate()
                .filter(|(_, n)| *n > 0)
                .map(|(i, _)| i)
                .collect()
        };
        let clean = flagged(0.0);
        let noisy = flagged(0.003);
        poisoned_flagged += usize::from(clean.contains(&round.poisoned));
        same += usize::from(clean == noisy);
    }
    outcome(
        same >= 18,
        format!("flagged sets identical in {same}/20 rounds (poisoned sub-model flagged without noise in {poisoned_flagged}/20)"),
    )
}

// ---------------------------------------------------------------------------
// 7. end-to-end defense efficacy

const EFFICACY_CONFIG: &str = r#"
seed = 0
clients = 100
per_round = 50
rounds = 50

[model]
kind = "softmax-linear"

[train]
iterations = 10
batch_size = 10
learning_rate = 0.1

[data]
source = "synthetic"
num_classes = 10
input_dim = 32
per_class = 600
test_per_class = 100
separation = 6.0
spread = 1.0

[defense]
enabled = true
submodels = 10
evaluators = 3
max_tasks = 3
initial_penalty = 0.5
margin = 0.1
"#;

const EFFICACY_ATTACK: &str = r#"
[attack]
malicious = [0]
kind = "label-flip"
src = 1
dst = 5
scaling = "factor"
factor = 50.0
iterations = 100
start_accuracy = 0.9
"#;

fn criterion_efficacy() -> Outcome {
    let attacked = ExperimentConfig::from_toml(&format!("{EFFICACY_CONFIG}{EFFICACY_ATTACK}")).unwrap();
    let clean = ExperimentConfig::from_toml(EFFICACY_CONFIG).unwrap();
    let mut pass = true;
    let mut details = Vec::new();
    for seed in [21u64, 22, 23] {
        let run = |cfg: &ExperimentConfig, mode: Mode| {
            let p = prepare(cfg, Path::new("."), Some(seed), Some(mode)).unwrap();
            run_training(&p.sim, mode).unwrap().metrics
        };
        let undefended = run(&attacked, Mode::FedAvgBaseline);
        let defended = run(&attacked, Mode::Defended);
        let reference = run(&clean, Mode::FedAvgBaseline);
        let peak = undefended
            .iter()
            .filter(|m| m.attack_active)
            .filter_map(|m| m.subtask_success)
            .fold(0.0, f64::max);
        let last = defended.last().unwrap();
        let defended_subtask = last.subtask_success.unwrap();
        let gap = (last.main_accuracy - reference.last().unwrap().main_accuracy).abs();
        let ok = defended_subtask <= 0.5 * peak && gap <= 0.02;
        pass &= ok;
        details.push(format!(
            "seed {seed}: subtask {defended_subtask:.3} vs undefended peak {peak:.3}, main-task gap {:.2} pp",
            100.0 * gap
        ));
    }
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------------------
// 9. delegation invariants

/// Exhaustive feasibility for small instances: pick, sub-model by sub-model,
/// a set of non-member evaluators that covers every class `e` times (all
/// classes at once in IID mode) without exceeding `m` tasks per client.
fn brute_force_feasible(members: &[Vec<usize>], holds: &[Vec<bool>], e: usize, m: usize, iid: bool) -> bool {
    struct Search<'a> {
        members: &'a [Vec<usize>],
        holds: &'a [Vec<bool>],
        e: usize,
        m: usize,
        iid: bool,
        dead: HashSet<(usize, Vec<usize>)>,
    }
    fn go(st: &mut Search<'_>, s: usize, load: &mut Vec<usize>) -> bool {
        let (members, holds, e, m, iid) = (st.members, st.holds, st.e, st.m, st.iid);
        if s == members.len() {
            return true;
        }
        if st.dead.contains(&(s, load.clone())) {
            return false;
        }
        let k = holds.len();
        let classes = holds[0].len();
        for mask in 0u32..(1 << k) {
            let set: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            if set.iter().any(|i| members[s].contains(i) || load[*i] >= m) {
                continue;
            }
            let ok = if iid {
                set.len() == e
            } else {
                (0..classes).all(|c| set.iter().filter(|&&i| holds[i][c]).count() >= e)
                    // minimal: every chosen client is needed for some class
                    && set.iter().all(|&i| (0..classes).any(|c| holds[i][c] && set.iter().filter(|&&j| holds[j][c]).count() == e))
            };
            if !ok {
                continue;
            }
            for &i in &set {
                load[i] += 1;
            }
            let found = go(st, s + 1, load);
            for &i in &set {
                load[i] -= 1;
            }
            if found {
                return true;
            }
        }
        st.dead.insert((s, load.clone()));
        false
    }
    let mut st = Search {
        members,
        holds,
        e,
        m,
        iid,
        dead: HashSet::new(),
    };
    go(&mut st, 0, &mut vec![0; holds.len()])
}

fn criterion_delegation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut feasible = 0;
    let mut infeasible = 0;
    let mut problems = Vec::new();
    for case in 0..1000 {
        let iid = case % 2 == 0;
        let d = rng.random_range(1..=4usize);
        let u = rng.random_range(1..=2usize);
        let k = (d * u + rng.random_range(0..=4usize)).min(10);
        let classes = rng.random_range(2..=4usize);
        let e = rng.random_range(1..=3usize);
        let m = rng.random_range(1..=3usize);
        let mut ids: Vec<usize> = (0..k).collect();
        ids.shuffle(&mut rng);
        let members: Vec<Vec<usize>> = (0..d).map(|s| ids[s * u..(s + 1) * u].to_vec()).collect();
        let holds: Vec<Vec<bool>> = (0..k)
            .map(|_| {
                let mut h: Vec<bool> = (0..classes).map(|_| rng.random_bool(0.5)).collect();
                if iid {
                    h.iter_mut().for_each(|x| *x = true);
                }
                h
            })
            .collect();
        let global = ParameterVector::zeros(1);
        let submodels: Vec<SubModel> = members
            .iter()
            .enumerate()
            .map(|(s, mem)| SubModel::new(s, mem.iter().map(|&i| ClientId(i)).collect(), &global, ParameterVector::zeros(1)).unwrap())
            .collect();
        let presence: Vec<ClassPresenceVector> = holds
            .iter()
            .enumerate()
            .map(|(i, h)| ClassPresenceVector {
                client: ClientId(i),
                present: h.clone(),
                threshold: 1,
            })
            .collect();
        let candidates: Vec<ClientId> = (0..k).map(ClientId).collect();
        let result = if iid {
            delegate_iid(&submodels, &candidates, e, m, classes, &mut rng)
        } else {
            delegate_noniid(&submodels, &presence, e, m, &mut rng)
        };
        let expected = brute_force_feasible(&members, &holds, e, m, iid);
        match result {
            Ok(plan) => {
                feasible += 1;
                if let Err(err) = plan.verify(&submodels, (!iid).then_some(presence.as_slice())) {
                    problems.push(format!("case {case}: invalid plan: {err}"));
                }
                if !expected {
                    problems.push(format!("case {case}: plan returned for an infeasible instance"));
                }
            }
            Err(err) => {
                infeasible += 1;
                if expected {
                    problems.push(format!("case {case}: feasible instance rejected: {err}"));
                }
            }
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "{feasible} valid plans, {infeasible} infeasibility reports confirmed by exhaustive search{}",
            problems.first().map(|p| format!("; first problem: {p}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. determinism

const DETERMINISM_CONFIG: &str = r#"
seed = 5
clients = 60
per_round = 20
rounds = 6

[model]
kind = "mlp"
hidden_dim = 8

[train]
iterations = 5
batch_size = 10
learning_rate = 0.1

[data]
source = "synthetic"
per_class = 120
test_per_class = 30

[partition]
kind = "noniid-shards"

[attack]
malicious = [0, 1, 2]
kind = "mislabel"
fraction = 0.5
target = 7
scaling = "factor"
factor = 5.0
start_round = 2
report = "frame-honest"
frame_rate = 0.3

[defense]
enabled = true
evaluators = 3
max_tasks = 3
submodels = 5
presence_threshold = 5

[dp]
clip = 15.0
sigma = 0.003
apply_to = ["submodels"]
"#;

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).unwrap();
    let files = ["metrics.csv", "detections.csv", "final_model.bin"];
    let mut outputs = Vec::new();
    for attempt in 0..2 {
        let out = dir.path().join(format!("out{attempt}"));
        if let Err(e) = run_experiment(&config, None, None, &out) {
            return outcome(false, format!("run failed: {e}"));
        }
        outputs.push(files.map(|f| std::fs::read(out.join(f)).unwrap()));
    }
    let rows = String::from_utf8_lossy(&outputs[0][0]).lines().count() - 1;
    let identical = outputs[0] == outputs[1];
    outcome(
        identical && rows == 6,
        format!("non-IID defended MLP run with attack, colluding reports and DP: {rows} rows, outputs byte-identical: {identical}"),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, budget: u64, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let out = within_budget(f(), start.elapsed(), Duration::from_secs(budget));
        println!(
            "criterion {n:>2} {:<30} {}  {}",
            name,
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
        failed += usize::from(!out.pass);
    };
    report(1, "penalty function", 1, &criterion_penalty);
    report(2, "evasion probability", 30, &criterion_evasion);
    report(3, "replacement identity", 1, &criterion_replacement);
    report(4, "gradient correctness", 10, &criterion_gradient);
    report(5, "no-attack equivalence", 120, &criterion_no_attack_equivalence);
    let started = Instant::now();
    let scenario = scaling_scenario();
    let setup = started.elapsed().as_secs();
    report(6, "scaling mismatch", 300 - setup.min(60), &|| criterion_scaling_mismatch(&scenario));
    report(7, "defense efficacy", 600, &criterion_efficacy);
    report(8, "dp non-interference", 300, &|| criterion_dp_non_interference(&scenario));
    report(9, "delegation invariants", 30, &criterion_delegation);
    report(10, "determinism", 60, &criterion_determinism);
    if failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
