//! Client-side cross-validation of round updates.
//!
//! Each round the server averages the `K` collected updates into `d`
//! sub-models of `u` updates each, delegates every sub-model to clients that
//! did not contribute to it, and collects per-class anomaly flags. The number
//! of distinct clients that flagged a sub-model determines its penalizing
//! coefficient, and the next global model is the penalty-weighted average of
//! sub-model deltas.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::federation::{ClientId, UpdateRecord};
use crate::model::{evaluate_per_class, ClassAccuracy, Dataset, ModelSpec, ParameterVector};

pub type SubmodelId = usize;

/// Restarts of the randomized greedy delegation before giving up.
pub const MAX_DELEGATION_RESTARTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SubModel {
    pub id: SubmodelId,
    /// Owners of the averaged updates, sorted.
    pub members: Vec<ClientId>,
    pub mean_delta: ParameterVector,
    /// `w_t + mean_delta`
    pub materialized: ParameterVector,
}

impl SubModel {
    pub fn new(
        id: SubmodelId,
        mut members: Vec<ClientId>,
        global: &ParameterVector,
        mean_delta: ParameterVector,
    ) -> Result<Self> {
        members.sort_unstable();
        let materialized = global.add(&mean_delta)?;
        Ok(Self {
            id,
            members,
            mean_delta,
            materialized,
        })
    }

    pub fn has_member(&self, c: ClientId) -> bool {
        self.members.binary_search(&c).is_ok()
    }
}

/// Shuffles the round's updates and averages every `u` consecutive ones.
pub fn build_submodels<R: Rng + ?Sized>(
    global: &ParameterVector,
    updates: &[UpdateRecord],
    u: usize,
    rng: &mut R,
) -> Result<Vec<SubModel>> {
    if u == 0 {
        return Err(Error::input("sub-model size u must be at least 1"));
    }
    if updates.is_empty() || updates.len() % u != 0 {
        return Err(Error::input(format!(
            "sub-model size {u} does not divide the {} updates",
            updates.len()
        )));
    }
    let mut order: Vec<&UpdateRecord> = updates.iter().collect();
    order.sort_by_key(|r| r.owner);
    order.shuffle(rng);
    order
        .chunks(u)
        .enumerate()
        .map(|(id, group)| {
            let mean = ParameterVector::mean(group.iter().map(|r| &r.delta))?;
            SubModel::new(id, group.iter().map(|r| r.owner).collect(), global, mean)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub evaluator: ClientId,
    /// Classes this evaluator must check, sorted.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelegationMode {
    Iid,
    NonIid,
}

/// Sub-model to evaluator assignment for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DelegationPlan {
    pub mode: DelegationMode,
    /// Indexed by sub-model id.
    pub assignments: Vec<Vec<Assignment>>,
    pub evaluators_per_target: usize,
    pub max_tasks: usize,
    pub num_classes: usize,
}

impl DelegationPlan {
    pub fn num_submodels(&self) -> usize {
        self.assignments.len()
    }

    /// Number of sub-models each client evaluates.
    pub fn load(&self) -> BTreeMap<ClientId, usize> {
        let mut load = BTreeMap::new();
        for list in &self.assignments {
            for a in list {
                *load.entry(a.evaluator).or_insert(0) += 1;
            }
        }
        load
    }

    /// Tasks of each evaluator, as `(sub-model, classes)` in sub-model order.
    pub fn tasks_by_evaluator(&self) -> BTreeMap<ClientId, Vec<(SubmodelId, Vec<usize>)>> {
        let mut out: BTreeMap<ClientId, Vec<(SubmodelId, Vec<usize>)>> = BTreeMap::new();
        for (sub, list) in self.assignments.iter().enumerate() {
            for a in list {
                out.entry(a.evaluator).or_default().push((sub, a.classes.clone()));
            }
        }
        out
    }

    pub fn classes_for(&self, sub: SubmodelId, evaluator: ClientId) -> Option<&[usize]> {
        self.assignments
            .get(sub)?
            .iter()
            .find(|a| a.evaluator == evaluator)
            .map(|a| a.classes.as_slice())
    }

    /// Checks every structural invariant of a plan. `presence` is required for
    /// non-IID plans.
    pub fn verify(&self, submodels: &[SubModel], presence: Option<&[ClassPresenceVector]>) -> Result<()> {
        let e = self.evaluators_per_target;
        if submodels.len() != self.assignments.len() {
            return Err(Error::Protocol("plan does not cover every sub-model".into()));
        }
        for (sub, list) in submodels.iter().zip(&self.assignments) {
            let mut seen = BTreeSet::new();
            for a in list {
                if sub.has_member(a.evaluator) {
                    return Err(Error::Protocol(format!(
                        "client {} evaluates sub-model {} it contributed to",
                        a.evaluator, sub.id
                    )));
                }
                if !seen.insert(a.evaluator) {
                    return Err(Error::Protocol(format!(
                        "client {} assigned twice to sub-model {}",
                        a.evaluator, sub.id
                    )));
                }
            }
            match self.mode {
                DelegationMode::Iid => {
                    if list.len() != e {
                        return Err(Error::Protocol(format!(
                            "sub-model {} has {} evaluators, expected {e}",
                            sub.id,
                            list.len()
                        )));
                    }
                    let all: Vec<usize> = (0..self.num_classes).collect();
                    if list.iter().any(|a| a.classes != all) {
                        return Err(Error::Protocol("IID assignment must cover all classes".into()));
                    }
                }
                DelegationMode::NonIid => {
                    let presence = presence
                        .ok_or_else(|| Error::Protocol("non-IID plan needs presence vectors".into()))?;
                    for class in 0..self.num_classes {
                        let holders = list.iter().filter(|a| a.classes.contains(&class)).count();
                        if holders != e {
                            return Err(Error::Protocol(format!(
                                "sub-model {} class {class} has {holders} evaluators, expected {e}",
                                sub.id
                            )));
                        }
                    }
                    for a in list {
                        let pv = presence
                            .iter()
                            .find(|p| p.client == a.evaluator)
                            .ok_or_else(|| Error::Protocol(format!("no presence vector for {}", a.evaluator)))?;
                        if a.classes.is_empty() || a.classes.iter().any(|&c| !pv.present[c]) {
                            return Err(Error::Protocol(format!(
                                "client {} assigned a class it does not hold",
                                a.evaluator
                            )));
                        }
                    }
                }
            }
        }
        if let Some((c, l)) = self.load().into_iter().find(|(_, l)| *l > self.max_tasks) {
            return Err(Error::Protocol(format!(
                "client {c} evaluates {l} sub-models, limit {}",
                self.max_tasks
            )));
        }
        Ok(())
    }
}

/// Unit-capacity bipartite flow between sub-models (capacity `e` each) and
/// clients (capacity `m` each). Returns the per-sub-model evaluator lists of a
/// maximum flow; edges are explored in the given order.
fn max_flow_assignment(
    eligible: &[Vec<usize>],
    num_clients: usize,
    e: usize,
    m: usize,
) -> Vec<Vec<usize>> {
    let d = eligible.len();
    // node ids: source 0, sub-models 1..=d, clients d+1..=d+n, sink d+n+1
    let n_nodes = d + num_clients + 2;
    let sink = n_nodes - 1;
    let mut to = Vec::new();
    let mut cap = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut add_edge = |a: usize, b: usize, c: usize, to: &mut Vec<usize>, cap: &mut Vec<usize>| {
        adj[a].push(to.len());
        to.push(b);
        cap.push(c);
        adj[b].push(to.len());
        to.push(a);
        cap.push(0);
    };
    for s in 0..d {
        add_edge(0, 1 + s, e, &mut to, &mut cap);
        for &k in &eligible[s] {
            add_edge(1 + s, 1 + d + k, 1, &mut to, &mut cap);
        }
    }
    for k in 0..num_clients {
        add_edge(1 + d + k, sink, m, &mut to, &mut cap);
    }
    loop {
        let mut prev: Vec<Option<usize>> = vec![None; n_nodes];
        let mut visited = vec![false; n_nodes];
        visited[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            if v == sink {
                break;
            }
            for &edge in &adj[v] {
                let w = to[edge];
                if cap[edge] > 0 && !visited[w] {
                    visited[w] = true;
                    prev[w] = Some(edge);
                    queue.push_back(w);
                }
            }
        }
        if !visited[sink] {
            break;
        }
        let mut v = sink;
        while let Some(edge) = prev[v] {
            cap[edge] -= 1;
            cap[edge ^ 1] += 1;
            v = to[edge ^ 1];
        }
    }
    (0..d)
        .map(|s| {
            adj[1 + s]
                .iter()
                .filter(|&&edge| edge % 2 == 0 && to[edge] > d && to[edge] != sink && cap[edge] == 0)
                .map(|&edge| to[edge] - 1 - d)
                .collect()
        })
        .collect()
}

/// IID delegation: every sub-model gets exactly `e` distinct non-member
/// evaluators from `candidates`, and no client evaluates more than `m`
/// sub-models.
///
/// Assignment is randomized greedy (least-loaded first among a shuffled
/// candidate list) with up to [`MAX_DELEGATION_RESTARTS`] restarts. Feasibility
/// is decided exactly beforehand by a bipartite max-flow, which also supplies
/// the plan if every restart fails.
pub fn delegate_iid<R: Rng + ?Sized>(
    submodels: &[SubModel],
    candidates: &[ClientId],
    e: usize,
    m: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<DelegationPlan> {
    if e == 0 {
        return Err(Error::config("evaluators per sub-model e must be at least 1"));
    }
    let d = submodels.len();
    let k = candidates.len();
    if e * d > m * k {
        return Err(Error::config(format!(
            "infeasible delegation: e*d = {e}*{d} = {} evaluation tasks exceed m*K = {m}*{k} = {} slots",
            e * d,
            m * k
        )));
    }
    let eligible: Vec<Vec<usize>> = submodels
        .iter()
        .map(|s| (0..k).filter(|&i| !s.has_member(candidates[i])).collect())
        .collect();
    if let Some(s) = submodels.iter().zip(&eligible).find(|(_, el)| el.len() < e) {
        return Err(Error::config(format!(
            "infeasible delegation: sub-model {} has {} non-member candidates, fewer than e = {e}",
            s.0.id,
            s.1.len()
        )));
    }
    if max_flow_assignment(&eligible, k, e, m).iter().any(|l| l.len() < e) {
        return Err(Error::config(format!(
            "infeasible delegation: no assignment gives {d} sub-models {e} evaluators each with at most {m} tasks per client"
        )));
    }

    let all_classes: Vec<usize> = (0..num_classes).collect();
    let mut order: Vec<usize> = (0..d).collect();
    for _ in 0..MAX_DELEGATION_RESTARTS {
        order.shuffle(rng);
        let mut load = vec![0usize; k];
        let mut picked: Vec<Vec<usize>> = vec![Vec::new(); d];
        let mut ok = true;
        for &s in &order {
            let mut pool: Vec<usize> = eligible[s].iter().copied().filter(|&i| load[i] < m).collect();
            pool.shuffle(rng);
            pool.sort_by_key(|&i| load[i]);
            if pool.len() < e {
                ok = false;
                break;
            }
            for &i in &pool[..e] {
                load[i] += 1;
            }
            picked[s] = pool[..e].to_vec();
        }
        if ok {
            return Ok(iid_plan(picked, candidates, e, m, &all_classes));
        }
    }
    // Greedy kept failing on a feasible instance; fall back to a randomized flow.
    let mut shuffled = eligible.clone();
    for l in shuffled.iter_mut() {
        l.shuffle(rng);
    }
    let picked = max_flow_assignment(&shuffled, k, e, m);
    Ok(iid_plan(picked, candidates, e, m, &all_classes))
}

fn iid_plan(picked: Vec<Vec<usize>>, candidates: &[ClientId], e: usize, m: usize, all: &[usize]) -> DelegationPlan {
    let assignments = picked
        .into_iter()
        .map(|mut list| {
            list.sort_unstable();
            list.into_iter()
                .map(|i| Assignment {
                    evaluator: candidates[i],
                    classes: all.to_vec(),
                })
                .collect()
        })
        .collect();
    DelegationPlan {
        mode: DelegationMode::Iid,
        assignments,
        evaluators_per_target: e,
        max_tasks: m,
        num_classes: all.len(),
    }
}

/// Which classes a client holds in sufficient quantity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPresenceVector {
    pub client: ClientId,
    pub present: Vec<bool>,
    pub threshold: usize,
}

impl ClassPresenceVector {
    pub fn from_dataset(client: ClientId, data: &Dataset, threshold: usize) -> Self {
        Self {
            client,
            present: data.class_counts().into_iter().map(|n| n >= threshold).collect(),
            threshold,
        }
    }
}

pub fn collect_presence<'a, I>(clients: I, threshold: usize) -> Result<Vec<ClassPresenceVector>>
where
    I: IntoIterator<Item = (ClientId, &'a Dataset)>,
{
    if threshold == 0 {
        return Err(Error::config("presence threshold must be at least 1"));
    }
    Ok(clients
        .into_iter()
        .map(|(id, data)| ClassPresenceVector::from_dataset(id, data, threshold))
        .collect())
}

/// Number of sub-models for a non-IID round: the smallest per-class holder
/// count, reduced to the largest divisor of `k` not exceeding it.
pub fn choose_d_noniid(presence: &[ClassPresenceVector], k: usize) -> Result<usize> {
    let num_classes = presence
        .first()
        .map(|p| p.present.len())
        .ok_or_else(|| Error::config("no presence vectors"))?;
    let mut counts = vec![0usize; num_classes];
    for p in presence {
        for (c, &has) in p.present.iter().enumerate() {
            counts[c] += has as usize;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::config(format!("class {c} is held by no client")));
    }
    let raw = *counts.iter().min().expect("at least one class");
    Ok(largest_divisor_at_most(k, raw))
}

pub fn largest_divisor_at_most(k: usize, bound: usize) -> usize {
    (1..=bound.min(k)).rev().find(|d| k % d == 0).unwrap_or(1)
}

/// Non-IID delegation: every (sub-model, class) pair is evaluated by exactly
/// `e` non-member clients that hold the class. A client checks all still
/// uncovered classes it holds for a sub-model, so evaluators are reused across
/// classes; candidates covering the most uncovered classes are taken first.
/// When [`MAX_DELEGATION_RESTARTS`] greedy attempts fail, an exhaustive search
/// either finds a plan or proves that none exists.
pub fn delegate_noniid<R: Rng + ?Sized>(
    submodels: &[SubModel],
    presence: &[ClassPresenceVector],
    e: usize,
    m: usize,
    rng: &mut R,
) -> Result<DelegationPlan> {
    if e == 0 {
        return Err(Error::config("evaluators per class e must be at least 1"));
    }
    let num_classes = presence
        .first()
        .map(|p| p.present.len())
        .ok_or_else(|| Error::config("no presence vectors"))?;
    for sub in submodels {
        for class in 0..num_classes {
            let holders = presence
                .iter()
                .filter(|p| p.present[class] && !sub.has_member(p.client))
                .count();
            if holders < e {
                return Err(Error::config(format!(
                    "infeasible delegation: class {class} of sub-model {} has {holders} eligible holders, fewer than e = {e}",
                    sub.id
                )));
            }
        }
    }

    let mut order: Vec<usize> = (0..submodels.len()).collect();
    for _ in 0..MAX_DELEGATION_RESTARTS {
        order.shuffle(rng);
        let mut load = vec![0usize; presence.len()];
        let mut plan: Vec<Vec<Assignment>> = vec![Vec::new(); submodels.len()];
        let mut ok = true;
        'subs: for &s in &order {
            let sub = &submodels[s];
            let mut need = vec![e; num_classes];
            let mut pool: Vec<usize> = (0..presence.len())
                .filter(|&i| !sub.has_member(presence[i].client) && load[i] < m)
                .collect();
            pool.shuffle(rng);
            while need.iter().any(|&n| n > 0) {
                let gain = |i: usize| {
                    (0..num_classes)
                        .filter(|&c| need[c] > 0 && presence[i].present[c])
                        .count()
                };
                // max gain, then min load; shuffled order breaks remaining ties
                let best = pool
                    .iter()
                    .enumerate()
                    .filter(|(_, &i)| gain(i) > 0)
                    .max_by(|(ia, &a), (ib, &b)| {
                        gain(a)
                            .cmp(&gain(b))
                            .then(load[b].cmp(&load[a]))
                            .then(ib.cmp(ia))
                    })
                    .map(|(pos, _)| pos);
                let Some(pos) = best else {
                    ok = false;
                    break 'subs;
                };
                let i = pool.swap_remove(pos);
                let classes: Vec<usize> = (0..num_classes)
                    .filter(|&c| need[c] > 0 && presence[i].present[c])
                    .collect();
                for &c in &classes {
                    need[c] -= 1;
                }
                load[i] += 1;
                plan[s].push(Assignment {
                    evaluator: presence[i].client,
                    classes,
                });
            }
            plan[s].sort_by_key(|a| a.evaluator);
        }
        if ok {
            return Ok(DelegationPlan {
                mode: DelegationMode::NonIid,
                assignments: plan,
                evaluators_per_target: e,
                max_tasks: m,
                num_classes,
            });
        }
    }
    let mut search = Exhaustive {
        submodels,
        presence,
        e,
        m,
        num_classes,
        load: vec![0; presence.len()],
        plan: vec![Vec::new(); submodels.len()],
        nodes: 0,
    };
    match search.submodel(0) {
        Some(true) => Ok(DelegationPlan {
            mode: DelegationMode::NonIid,
            assignments: search.plan,
            evaluators_per_target: e,
            max_tasks: m,
            num_classes,
        }),
        Some(false) => Err(Error::config(format!(
            "infeasible delegation: no non-IID plan exists with e = {e}, m = {m}"
        ))),
        None => Err(Error::config(format!(
            "no non-IID plan with e = {e}, m = {m} found after {MAX_DELEGATION_RESTARTS} restarts and \
             {EXHAUSTIVE_NODE_BUDGET} search nodes"
        ))),
    }
}

/// Node budget of the exhaustive non-IID search run when greedy restarts fail.
pub const EXHAUSTIVE_NODE_BUDGET: usize = 2_000_000;

/// Depth-first search over evaluator sets, one sub-model at a time.
///
/// Every feasible plan contains, per sub-model, a minimal set of holders
/// covering each class `e` times, and every minimal cover is reached by the
/// include/exclude recursion, so exhausting the tree proves infeasibility.
struct Exhaustive<'a> {
    submodels: &'a [SubModel],
    presence: &'a [ClassPresenceVector],
    e: usize,
    m: usize,
    num_classes: usize,
    load: Vec<usize>,
    plan: Vec<Vec<Assignment>>,
    nodes: usize,
}

impl Exhaustive<'_> {
    /// `Some(found)`, or `None` once the budget is spent.
    fn submodel(&mut self, s: usize) -> Option<bool> {
        if s == self.submodels.len() {
            return Some(true);
        }
        let sub = &self.submodels[s];
        let eligible: Vec<usize> = (0..self.presence.len())
            .filter(|&i| !sub.has_member(self.presence[i].client) && self.load[i] < self.m)
            .collect();
        let mut chosen = Vec::new();
        let mut cover = vec![0; self.num_classes];
        self.pick(s, &eligible, 0, &mut chosen, &mut cover)
    }

    fn pick(
        &mut self,
        s: usize,
        eligible: &[usize],
        idx: usize,
        chosen: &mut Vec<usize>,
        cover: &mut [usize],
    ) -> Option<bool> {
        self.nodes += 1;
        if self.nodes > EXHAUSTIVE_NODE_BUDGET {
            return None;
        }
        if cover.iter().all(|&n| n >= self.e) {
            return self.commit(s, chosen);
        }
        let rest = &eligible[idx..];
        let reachable = (0..self.num_classes).all(|c| {
            cover[c] + rest.iter().filter(|&&i| self.presence[i].present[c]).count() >= self.e
        });
        if !reachable {
            return Some(false);
        }
        let i = eligible[idx];
        let helps = (0..self.num_classes).any(|c| cover[c] < self.e && self.presence[i].present[c]);
        if helps {
            chosen.push(i);
            for c in 0..self.num_classes {
                cover[c] += usize::from(self.presence[i].present[c]);
            }
            let found = self.pick(s, eligible, idx + 1, chosen, cover);
            for c in 0..self.num_classes {
                cover[c] -= usize::from(self.presence[i].present[c]);
            }
            chosen.pop();
            if found != Some(false) {
                return found;
            }
        }
        self.pick(s, eligible, idx + 1, chosen, cover)
    }

    /// Gives each class to its first `e` holders in `chosen` and recurses.
    fn commit(&mut self, s: usize, chosen: &[usize]) -> Option<bool> {
        let mut classes = vec![Vec::new(); chosen.len()];
        for c in 0..self.num_classes {
            let holders = chosen.iter().enumerate().filter(|(_, &i)| self.presence[i].present[c]);
            for (slot, _) in holders.take(self.e) {
                classes[slot].push(c);
            }
        }
        let mut list: Vec<Assignment> = Vec::new();
        let mut used = Vec::new();
        for (slot, cls) in classes.into_iter().enumerate() {
            if !cls.is_empty() {
                used.push(chosen[slot]);
                list.push(Assignment {
                    evaluator: self.presence[chosen[slot]].client,
                    classes: cls,
                });
            }
        }
        list.sort_by_key(|a| a.evaluator);
        for &i in &used {
            self.load[i] += 1;
        }
        self.plan[s] = list;
        let found = self.submodel(s + 1);
        if found == Some(false) {
            for &i in &used {
                self.load[i] -= 1;
            }
            self.plan[s].clear();
        }
        found
    }
}

/// One evaluator's verdict on one sub-model: `(class, anomalous)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationReport {
    pub evaluator: ClientId,
    pub submodel: SubmodelId,
    pub flags: Vec<(usize, bool)>,
}

impl EvaluationReport {
    pub fn any_flagged(&self) -> bool {
        self.flags.iter().any(|(_, f)| *f)
    }

    pub fn flagged_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().filter(|(_, f)| *f).map(|(c, _)| *c)
    }
}

/// Honest evaluation: flag class `c` iff the sub-model's local accuracy on `c`
/// is below `baseline_c - margin`. Classes without local samples (or without
/// a baseline) are reported clear.
pub fn evaluate_submodel(
    evaluator: ClientId,
    spec: &ModelSpec,
    data: &Dataset,
    sub: &SubModel,
    classes: &[usize],
    baseline: &ClassAccuracy,
    margin: f64,
) -> Result<EvaluationReport> {
    let local = evaluate_per_class(spec, &sub.materialized, data)?;
    let flags = classes
        .iter()
        .map(|&c| {
            let flagged = match (local.accuracy(c), baseline.accuracy(c)) {
                (Some(acc), Some(base)) => acc < base - margin,
                _ => false,
            };
            (c, flagged)
        })
        .collect();
    Ok(EvaluationReport {
        evaluator,
        submodel: sub.id,
        flags,
    })
}

/// Penalizing coefficient for a sub-model reported by `r` clients out of `e`
/// evaluators; `v` is the coefficient after a single report.
///
/// `c = 1` for `r = 0`, otherwise `max(v * (1 - 4 ((r - 1) / (e - 2))^2), 0)`.
pub fn penalty(r: usize, e: usize, v: f64) -> Result<f64> {
    if e < 3 {
        return Err(Error::config(format!(
            "penalty needs at least 3 evaluators, got e = {e}"
        )));
    }
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::config(format!("initial penalty v = {v} outside (0, 1]")));
    }
    if r == 0 {
        return Ok(1.0);
    }
    let x = (r - 1) as f64 / (e - 2) as f64;
    Ok((v * (1.0 - 4.0 * x * x)).max(0.0))
}

/// Number of distinct evaluators that flagged at least one class of each
/// sub-model. Reports must match the plan exactly.
pub fn tally_reports(plan: &DelegationPlan, reports: &[EvaluationReport]) -> Result<Vec<usize>> {
    let mut flagged: Vec<BTreeSet<ClientId>> = vec![BTreeSet::new(); plan.num_submodels()];
    let mut seen = BTreeSet::new();
    for rep in reports {
        let classes = plan.classes_for(rep.submodel, rep.evaluator).ok_or_else(|| {
            Error::Protocol(format!(
                "client {} reported on sub-model {} without being assigned",
                rep.evaluator, rep.submodel
            ))
        })?;
        let reported: Vec<usize> = rep.flags.iter().map(|(c, _)| *c).collect();
        if reported != classes {
            return Err(Error::Protocol(format!(
                "report of client {} on sub-model {} covers classes {:?}, plan assigns {:?}",
                rep.evaluator, rep.submodel, reported, classes
            )));
        }
        if !seen.insert((rep.submodel, rep.evaluator)) {
            return Err(Error::Protocol(format!(
                "duplicate report of client {} on sub-model {}",
                rep.evaluator, rep.submodel
            )));
        }
        if rep.any_flagged() {
            flagged[rep.submodel].insert(rep.evaluator);
        }
    }
    Ok(flagged.into_iter().map(|s| s.len()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationForm {
    /// `w_t + (1/d) sum c_i * mean_delta_i`
    Deltas,
    /// `(1/d) sum c_i * (w_t + mean_delta_i)`
    Literal,
}

pub fn weighted_aggregate(
    global: &ParameterVector,
    submodels: &[SubModel],
    penalties: &[f64],
    form: AggregationForm,
) -> Result<ParameterVector> {
    if submodels.is_empty() {
        return Err(Error::input("no sub-models to aggregate"));
    }
    if penalties.len() != submodels.len() {
        return Err(Error::input(format!(
            "{} penalties for {} sub-models",
            penalties.len(),
            submodels.len()
        )));
    }
    let inv_d = 1.0 / submodels.len() as f64;
    match form {
        AggregationForm::Deltas => {
            let mut acc = ParameterVector::zeros(global.dim());
            for (s, c) in submodels.iter().zip(penalties) {
                acc.axpy(*c, &s.mean_delta)?;
            }
            let mut next = global.clone();
            next.axpy(inv_d, &acc)?;
            Ok(next)
        }
        AggregationForm::Literal => {
            let mut acc = ParameterVector::zeros(global.dim());
            for (s, c) in submodels.iter().zip(penalties) {
                acc.axpy(*c, &s.materialized)?;
            }
            Ok(acc.scaled(inv_d))
        }
    }
}

/// How a round's updates are grouped into sub-models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    SubmodelSize(usize),
    SubmodelCount(usize),
    /// Non-IID: derived each round from the presence vectors.
    FromPresence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseConfig {
    pub mode: DelegationMode,
    pub grouping: Grouping,
    /// evaluators per sub-model (IID) or per (sub-model, class) (non-IID)
    pub evaluators: usize,
    pub max_tasks: usize,
    pub initial_penalty: f64,
    pub margin: f64,
    pub presence_threshold: usize,
    pub aggregation: AggregationForm,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            mode: DelegationMode::Iid,
            grouping: Grouping::SubmodelCount(10),
            evaluators: 3,
            max_tasks: 3,
            initial_penalty: 0.5,
            margin: 0.1,
            presence_threshold: 1,
            aggregation: AggregationForm::Deltas,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        penalty(0, self.evaluators, self.initial_penalty)?;
        if self.max_tasks == 0 {
            return Err(Error::config("max tasks per client m must be at least 1"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("anomaly margin must be >= 0"));
        }
        if self.presence_threshold == 0 {
            return Err(Error::config("presence threshold must be at least 1"));
        }
        match self.grouping {
            Grouping::SubmodelSize(u) if u == 0 || k % u != 0 => Err(Error::config(format!(
                "sub-model size u = {u} must divide K = {k}"
            ))),
            Grouping::SubmodelCount(d) if d == 0 || k % d != 0 => Err(Error::config(format!(
                "sub-model count d = {d} must divide K = {k}"
            ))),
            Grouping::FromPresence if self.mode == DelegationMode::Iid => Err(Error::config(
                "presence-derived grouping requires non-IID delegation",
            )),
            _ => Ok(()),
        }
    }
}
