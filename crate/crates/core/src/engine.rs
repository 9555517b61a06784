//! Stopping-line simulation of fragmentation chains.
//!
//! Each block owns two random streams keyed by `(seed, block id)`: one for
//! its exponential clock and one for the shape of its dislocation. Block ids
//! are derived from the parent id and the child rank, so a block's fate is a
//! pure function of its position in the genealogical tree. Two consequences
//! are used throughout the crate:
//!
//! * the genealogy (sizes only) does not depend on the self-similarity index
//!   `α`, which only rescales waiting times by `m^{−α}`;
//! * a frozen stopping line can be resumed to a finer threshold and gives the
//!   same tree as a fresh run at that threshold.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{FragError, Result};
use crate::models::{DislocationModel, MassSplit, ModelSpec};
use crate::rng::{split_seed, stream, Purpose};

pub const ROOT_ID: u64 = 1;
pub const DEFAULT_EVENT_BUDGET: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: u64,
    pub mass: f64,
    pub birth_time: f64,
    pub parent_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub time: f64,
    pub parent_id: u64,
    pub parent_mass: f64,
    pub child_masses: Vec<f64>,
    pub dissipated: f64,
    pub child_ids: Vec<u64>,
    /// Relative sizes of the children.
    pub split: MassSplit,
}

/// Stopping rule for a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Self-similarity index.
    pub alpha: f64,
    /// Blocks of mass below `eta` are frozen.
    pub eta: f64,
    /// Optional time horizon; blocks whose clock rings later stay pending.
    pub time_limit: Option<f64>,
    pub event_budget: u64,
}

impl SimOptions {
    pub fn stopped(alpha: f64, eta: f64) -> Self {
        Self {
            alpha,
            eta,
            time_limit: None,
            event_budget: DEFAULT_EVENT_BUDGET,
        }
    }
}

/// Replayable record of one simulated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub model: ModelSpec,
    pub alpha: f64,
    pub eta: f64,
    pub seed: u64,
    pub time_limit: Option<f64>,
    pub events: Vec<SplitEvent>,
    /// Blocks below the threshold, in the order they were reached.
    pub frozen: Vec<Block>,
    /// Blocks at or above the threshold that had not split by `time_limit`.
    pub pending: Vec<Block>,
}

/// Terminal configuration of the chain stopped at the `η` stopping line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppedState {
    pub eta: f64,
    /// Frozen blocks ordered by decreasing mass (ties by id).
    pub blocks: Vec<Block>,
}

pub fn child_id(parent: u64, rank: usize) -> u64 {
    split_seed(parent, rank as u64 + 1)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_finite() && eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(FragError::InvalidParameter(format!("eta = {eta} must lie in (0, 1]")))
    }
}

struct Walker<'a> {
    model: &'a DislocationModel,
    opts: SimOptions,
    seed: u64,
    log: EventLog,
}

impl Walker<'_> {
    fn run(&mut self, roots: Vec<Block>) -> Result<()> {
        let mut stack = roots;
        stack.reverse();
        let rate = self.model.total_rate();
        while let Some(block) = stack.pop() {
            if block.mass < self.opts.eta {
                self.log.frozen.push(block);
                continue;
            }
            let clock: f64 = stream(self.seed, block.id, Purpose::Clock).sample(Exp1);
            let wait = clock / (block.mass.powf(self.opts.alpha) * rate);
            let time = block.birth_time + wait;
            if self.opts.time_limit.is_some_and(|limit| time > limit) {
                self.log.pending.push(block);
                continue;
            }
            if self.log.events.len() as u64 >= self.opts.event_budget {
                return Err(FragError::BudgetExceeded(self.opts.event_budget));
            }
            let split = self
                .model
                .sample_split(&mut stream(self.seed, block.id, Purpose::Split));
            let child_masses: Vec<f64> = split.scale(block.mass).into_iter().collect();
            let child_ids: Vec<u64> = (0..child_masses.len()).map(|k| child_id(block.id, k)).collect();
            let dissipated = (block.mass - child_masses.iter().sum::<f64>()).max(0.0);
            for (&m, &id) in child_masses.iter().zip(&child_ids).rev() {
                stack.push(Block {
                    id,
                    mass: m,
                    birth_time: time,
                    parent_id: Some(block.id),
                });
            }
            self.log.events.push(SplitEvent {
                time,
                parent_id: block.id,
                parent_mass: block.mass,
                child_masses,
                dissipated,
                child_ids,
                split,
            });
        }
        Ok(())
    }
}

/// Simulates one path from a unit-mass root under the given stopping rule.
pub fn simulate(model: &DislocationModel, opts: SimOptions, seed: u64) -> Result<EventLog> {
    check_eta(opts.eta)?;
    if !opts.alpha.is_finite() {
        return Err(FragError::InvalidParameter("alpha must be finite".into()));
    }
    let mut walker = Walker {
        model,
        opts,
        seed,
        log: EventLog {
            model: model.spec(),
            alpha: opts.alpha,
            eta: opts.eta,
            seed,
            time_limit: opts.time_limit,
            events: Vec::new(),
            frozen: Vec::new(),
            pending: Vec::new(),
        },
    };
    walker.run(vec![Block {
        id: ROOT_ID,
        mass: 1.0,
        birth_time: 0.0,
        parent_id: None,
    }])?;
    Ok(walker.log)
}

/// Simulates down to the `η` stopping line and returns the log and the frozen state.
pub fn simulate_stopped(model: &DislocationModel, alpha: f64, eta: f64, seed: u64) -> Result<(EventLog, StoppedState)> {
    let log = simulate(model, SimOptions::stopped(alpha, eta), seed)?;
    let state = log.stopped_state(eta)?;
    Ok((log, state))
}

/// Continues a mass-stopped log down to a finer threshold, reusing every
/// block's own streams.
pub fn resume(model: &DislocationModel, log: &EventLog, eta: f64, event_budget: u64) -> Result<EventLog> {
    check_eta(eta)?;
    if eta > log.eta {
        return Err(FragError::InvalidParameter(format!(
            "cannot resume to eta = {eta}, coarser than the log's {}",
            log.eta
        )));
    }
    if log.time_limit.is_some() {
        return Err(FragError::InvalidParameter(
            "only mass-stopped logs can be resumed".into(),
        ));
    }
    if model.spec() != log.model {
        return Err(FragError::InvalidParameter("model does not match the log".into()));
    }
    let mut walker = Walker {
        model,
        opts: SimOptions {
            alpha: log.alpha,
            eta,
            time_limit: None,
            event_budget,
        },
        seed: log.seed,
        log: EventLog {
            eta,
            events: log.events.clone(),
            frozen: Vec::new(),
            ..log.clone()
        },
    };
    walker.run(log.frozen.clone())?;
    Ok(walker.log)
}

impl EventLog {
    /// Sorts events by parent id, giving an order that does not depend on
    /// how the tree was traversed.
    pub fn canonical_events(&self) -> Vec<&SplitEvent> {
        let mut ev: Vec<&SplitEvent> = self.events.iter().collect();
        ev.sort_by_key(|e| e.parent_id);
        ev
    }

    fn require_resolved(&self, eta: f64) -> Result<()> {
        if self.eta > eta {
            return Err(FragError::IncompleteHorizon(format!(
                "log was simulated to eta = {}, coarser than requested {eta}",
                self.eta
            )));
        }
        if let Some(b) = self.pending.iter().find(|b| b.mass >= eta) {
            return Err(FragError::IncompleteHorizon(format!(
                "block {} of mass {} had not split by the time limit",
                b.id, b.mass
            )));
        }
        Ok(())
    }

    /// Stopping line at any `η` no finer than the log's own threshold.
    pub fn stopped_state(&self, eta: f64) -> Result<StoppedState> {
        check_eta(eta)?;
        self.require_resolved(eta)?;
        let mut blocks = Vec::new();
        for e in self.events.iter().filter(|e| e.parent_mass >= eta) {
            for (&m, &id) in e.child_masses.iter().zip(&e.child_ids) {
                if m < eta && m > 0.0 {
                    blocks.push(Block {
                        id,
                        mass: m,
                        birth_time: e.time,
                        parent_id: Some(e.parent_id),
                    });
                }
            }
        }
        Ok(StoppedState::from_blocks(eta, blocks))
    }

    /// Mass lost by dislocations of blocks of mass at least `eta`.
    pub fn dissipated_above(&self, eta: f64) -> f64 {
        neumaier(
            self.events
                .iter()
                .filter(|e| e.parent_mass >= eta)
                .map(|e| e.dissipated),
        )
    }

    fn split_times(&self) -> HashMap<u64, f64> {
        self.events.iter().map(|e| (e.parent_id, e.time)).collect()
    }

    fn all_blocks(&self) -> impl Iterator<Item = Block> + '_ {
        std::iter::once(Block {
            id: ROOT_ID,
            mass: 1.0,
            birth_time: 0.0,
            parent_id: None,
        })
        .chain(self.events.iter().flat_map(|e| {
            e.child_masses
                .iter()
                .zip(&e.child_ids)
                .filter(|(m, _)| **m > 0.0)
                .map(move |(&m, &id)| Block {
                    id,
                    mass: m,
                    birth_time: e.time,
                    parent_id: Some(e.parent_id),
                })
        }))
    }

    /// Blocks of the stopped process alive at time `t`; frozen blocks keep
    /// their frozen mass.
    pub fn live_blocks(&self, t: f64) -> Result<Vec<Block>> {
        if t.is_nan() || t < 0.0 {
            return Err(FragError::InvalidParameter(format!("time {t} must be nonnegative")));
        }
        if let Some(limit) = self.time_limit {
            if t > limit {
                return Err(FragError::IncompleteHorizon(format!(
                    "time {t} is beyond the simulated horizon {limit}"
                )));
            }
        }
        let split_at = self.split_times();
        let mut out: Vec<Block> = self
            .all_blocks()
            .filter(|b| b.birth_time <= t && split_at.get(&b.id).is_none_or(|&s| t < s))
            .collect();
        out.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Masses alive at time `t`, largest first.
    pub fn blocks_at(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.live_blocks(t)?.into_iter().map(|b| b.mass).collect())
    }

    /// First time at which every block is smaller than `eta`.
    pub fn first_passage_sigma(&self, eta: f64) -> Result<f64> {
        check_eta(eta)?;
        self.require_resolved(eta)?;
        self.events
            .iter()
            .filter(|e| e.parent_mass >= eta)
            .map(|e| e.time)
            .max_by(f64::total_cmp)
            .ok_or_else(|| FragError::IncompleteHorizon("log contains no dislocation".into()))
    }

    /// One JSON object per event: time, parent_id, parent_mass, child_masses, dissipated.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl StoppedState {
    pub fn from_blocks(eta: f64, mut blocks: Vec<Block>) -> Self {
        blocks.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.id.cmp(&b.id)));
        Self { eta, blocks }
    }

    /// State built from bare masses; ids are the ranks.
    pub fn from_masses(eta: f64, masses: &[f64]) -> Self {
        let blocks = masses
            .iter()
            .enumerate()
            .map(|(k, &m)| Block {
                id: k as u64,
                mass: m,
                birth_time: 0.0,
                parent_id: None,
            })
            .collect();
        Self::from_blocks(eta, blocks)
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.mass).collect()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        neumaier(self.blocks.iter().map(|b| b.mass))
    }

    /// CSV with columns `k,lambda_k`, `k` starting at 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "lambda_k"])?;
        for (k, b) in self.blocks.iter().enumerate() {
            wr.write_record([(k + 1).to_string(), format!("{:e}", b.mass)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Compensated (Neumaier) summation.
pub fn neumaier<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// One step of a tagged fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedStep {
    pub time: f64,
    pub parent_mass: f64,
    pub split: MassSplit,
    /// Rank of the child followed, `None` when the tagged mass was lost.
    pub chosen: Option<usize>,
    /// Mass after the step (0 once killed).
    pub mass: f64,
    /// Tilting weight `mass^{p*}` (0 once killed).
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedPath {
    pub steps: Vec<TaggedStep>,
    pub killed: bool,
    pub horizon: f64,
}

impl TaggedPath {
    /// Mass at the horizon (0 if killed).
    pub fn final_mass(&self) -> f64 {
        if self.killed {
            0.0
        } else {
            self.steps.last().map_or(1.0, |s| s.mass)
        }
    }

    pub fn final_weight(&self, p_star: f64) -> f64 {
        if self.killed {
            0.0
        } else {
            self.final_mass().powf(p_star)
        }
    }
}

/// Follows one size-biased fragment up to `horizon`.
///
/// At every dislocation the path moves to child `k` with probability `s_k`
/// and is killed with the dissipated probability `1 − Σ s_k`.
pub fn tagged_fragment_path(model: &DislocationModel, alpha: f64, horizon: f64, p_star: f64, seed: u64) -> TaggedPath {
    let mut rng = stream(seed, 0, Purpose::Tagged);
    let rate = model.total_rate();
    let mut mass = 1.0f64;
    let mut time = 0.0f64;
    let mut steps = Vec::new();
    loop {
        let clock: f64 = rng.sample(Exp1);
        let next = time + clock / (mass.powf(alpha) * rate);
        if next > horizon {
            return TaggedPath {
                steps,
                killed: false,
                horizon,
            };
        }
        time = next;
        let split = model.sample_split(&mut rng);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (k, s) in split.fractions().iter().enumerate() {
            acc += s;
            if u < acc {
                chosen = Some(k);
                break;
            }
        }
        let parent_mass = mass;
        match chosen {
            Some(k) => {
                mass *= split.fractions()[k];
                steps.push(TaggedStep {
                    time,
                    parent_mass,
                    split,
                    chosen,
                    mass,
                    weight: mass.powf(p_star),
                });
            }
            None => {
                steps.push(TaggedStep {
                    time,
                    parent_mass,
                    split,
                    chosen: None,
                    mass: 0.0,
                    weight: 0.0,
                });
                return TaggedPath {
                    steps,
                    killed: true,
                    horizon,
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::mean_se;
    use proptest::prelude::*;

    fn halving() -> DislocationModel {
        DislocationModel::dirac_binary(0.5, 0.5).unwrap()
    }

    #[test]
    fn dyadic_tree_at_one_tenth() {
        let (log, state) = simulate_stopped(&halving(), 0.0, 0.1, 1).unwrap();
        assert_eq!(log.events.len(), 15);
        assert_eq!(state.lambda(), vec![1.0 / 16.0; 16]);
    }

    #[test]
    fn dyadic_tree_at_powers_of_two() {
        // A block of mass exactly η still splits: the line holds the first
        // blocks strictly below η.
        for n in 1..=10 {
            let eta = 2f64.powi(-n);
            let (log, state) = simulate_stopped(&halving(), 0.0, eta, 9).unwrap();
            assert_eq!(log.events.len(), (1usize << (n + 1)) - 1);
            assert_eq!(state.lambda(), vec![eta / 2.0; 1 << (n + 1)]);
            // Between consecutive powers of two the line sits at η's own level.
            let (log, state) = simulate_stopped(&halving(), 0.0, 1.5 * eta, 9).unwrap();
            assert_eq!(log.events.len(), (1usize << n) - 1);
            assert_eq!(state.lambda(), vec![eta; 1 << n]);
        }
    }

    #[test]
    fn threshold_one_is_the_root_split() {
        for m in [
            DislocationModel::uniform_binary(),
            DislocationModel::beta_binary(0.5, 1e-2).unwrap(),
        ] {
            let (log, state) = simulate_stopped(&m, 0.0, 1.0, 4).unwrap();
            assert_eq!(log.events.len(), 1);
            assert_eq!(state.len(), 2);
            assert_eq!(state.total_mass(), 1.0);
            assert_eq!(log.first_passage_sigma(1.0).unwrap(), log.events[0].time);
        }
    }

    #[test]
    fn conservation_on_many_paths() {
        let m = DislocationModel::uniform_binary();
        for seed in 0..200 {
            let (_, state) = simulate_stopped(&m, 0.0, 1e-3, seed).unwrap();
            assert!((state.total_mass() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dissipation_is_accounted() {
        let m = DislocationModel::dissipative_uniform_binary(0.5).unwrap();
        for seed in 0..50 {
            let eta = 1e-3;
            let (log, state) = simulate_stopped(&m, 0.0, eta, seed).unwrap();
            let total = state.total_mass() + log.dissipated_above(eta);
            assert!((total - 1.0).abs() < 1e-12, "{total}");
            for e in &log.events {
                let kids: f64 = e.child_masses.iter().sum();
                assert!(kids < e.parent_mass);
                assert!((e.parent_mass - kids - e.dissipated).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn stopping_line_is_well_formed(seed in any::<u64>(), eta in 1e-3f64..0.9, which in 0usize..4, alpha in -1.0f64..1.0) {
            let m = [
                DislocationModel::uniform_binary(),
                DislocationModel::dissipative_uniform_binary(0.3).unwrap(),
                DislocationModel::beta_binary(0.4, 0.05).unwrap(),
                DislocationModel::dirac_binary(0.6, 0.3).unwrap(),
            ][which];
            let (log, state) = simulate_stopped(&m, alpha, eta, seed).unwrap();
            prop_assert!(log.events.iter().all(|e| e.parent_mass >= eta));
            let parent: HashMap<u64, f64> = log.events.iter().map(|e| (e.parent_id, e.parent_mass)).collect();
            for b in &state.blocks {
                prop_assert!(b.mass < eta);
                prop_assert!(parent[&b.parent_id.unwrap()] >= eta);
            }
            prop_assert!(state.lambda().windows(2).all(|w| w[0] >= w[1]));
            for e in &log.events {
                prop_assert!(e.child_masses.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(e.child_masses.iter().sum::<f64>() <= e.parent_mass * (1.0 + 1e-15));
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let m = DislocationModel::beta_binary(0.5, 1e-2).unwrap();
        let a = serde_json::to_string(&simulate_stopped(&m, 0.3, 1e-3, 77).unwrap().0).unwrap();
        let b = serde_json::to_string(&simulate_stopped(&m, 0.3, 1e-3, 77).unwrap().0).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&simulate_stopped(&m, 0.3, 1e-3, 78).unwrap().0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn jump_tree_does_not_depend_on_alpha() {
        let m = DislocationModel::dissipative_uniform_binary(0.5).unwrap();
        for seed in 0..20 {
            let (l0, s0) = simulate_stopped(&m, 0.0, 1e-3, seed).unwrap();
            for alpha in [-0.5, 0.5, 1.0] {
                let (l1, s1) = simulate_stopped(&m, alpha, 1e-3, seed).unwrap();
                assert_eq!(s0.lambda(), s1.lambda());
                let key = |l: &EventLog| {
                    l.canonical_events()
                        .iter()
                        .map(|e| (e.parent_id, e.parent_mass.to_bits(), e.child_masses.clone()))
                        .collect::<Vec<_>>()
                };
                assert_eq!(key(&l0), key(&l1));
                assert_ne!(
                    l0.first_passage_sigma(1e-3).unwrap(),
                    l1.first_passage_sigma(1e-3).unwrap()
                );
            }
        }
    }

    #[test]
    fn resuming_matches_direct_simulation() {
        let m = DislocationModel::beta_binary(0.5, 1e-2).unwrap();
        for seed in 0..10 {
            let (coarse, _) = simulate_stopped(&m, 0.5, 1e-2, seed).unwrap();
            let resumed = resume(&m, &coarse, 1e-4, DEFAULT_EVENT_BUDGET).unwrap();
            let (direct, state) = simulate_stopped(&m, 0.5, 1e-4, seed).unwrap();
            assert_eq!(resumed.stopped_state(1e-4).unwrap(), state);
            let a: Vec<_> = resumed.canonical_events().into_iter().cloned().collect();
            let b: Vec<_> = direct.canonical_events().into_iter().cloned().collect();
            assert_eq!(a, b);
            assert!(resume(&m, &direct, 1e-2, 10).is_err());
        }
    }

    #[test]
    fn nested_lines_from_one_log() {
        let m = DislocationModel::uniform_binary();
        for seed in 0..10 {
            let (fine, _) = simulate_stopped(&m, 0.0, 1e-4, seed).unwrap();
            let (_, coarse) = simulate_stopped(&m, 0.0, 1e-2, seed).unwrap();
            assert_eq!(fine.stopped_state(1e-2).unwrap(), coarse);
            assert!(coarse.stopped_state_check());
        }
    }

    impl StoppedState {
        fn stopped_state_check(&self) -> bool {
            self.blocks.iter().all(|b| b.mass < self.eta)
        }
    }

    #[test]
    fn blocks_at_examples() {
        let (log, _) = simulate_stopped(&halving(), 0.0, 0.2, 3).unwrap();
        assert_eq!(log.blocks_at(0.0).unwrap(), vec![1.0]);
        let t1 = log.events.iter().find(|e| e.parent_id == ROOT_ID).unwrap().time;
        let first_child_split = log
            .events
            .iter()
            .filter(|e| e.parent_id != ROOT_ID)
            .map(|e| e.time)
            .fold(f64::INFINITY, f64::min);
        let t = 0.5 * (t1 + first_child_split);
        assert_eq!(log.blocks_at(t).unwrap(), vec![0.5, 0.5]);

        let m = DislocationModel::uniform_binary();
        let log = simulate(
            &m,
            SimOptions {
                time_limit: Some(3.0),
                ..SimOptions::stopped(0.0, 1e-9)
            },
            5,
        )
        .unwrap();
        for t in [0.1, 0.7, 1.9, 3.0] {
            let s: f64 = neumaier(log.blocks_at(t).unwrap());
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(log.blocks_at(3.5), Err(FragError::IncompleteHorizon(_))));
        assert!(matches!(log.stopped_state(1e-3), Err(FragError::IncompleteHorizon(_))));
    }

    #[test]
    fn budget_is_enforced() {
        let m = DislocationModel::uniform_binary();
        let r = simulate(
            &m,
            SimOptions {
                event_budget: 10,
                ..SimOptions::stopped(0.0, 1e-4)
            },
            1,
        );
        assert!(matches!(r, Err(FragError::BudgetExceeded(10))));
    }

    #[test]
    fn tagged_dirac_mass_halves() {
        let p = tagged_fragment_path(&halving(), 0.0, 20.0, 0.0, 3);
        assert!(!p.killed);
        for (n, s) in p.steps.iter().enumerate() {
            assert_eq!(s.mass, 2f64.powi(-(n as i32 + 1)));
        }
    }

    #[test]
    fn tagged_uniform_log_step_mean() {
        let m = DislocationModel::uniform_binary();
        let mut steps = Vec::new();
        for seed in 0..20_000 {
            let p = tagged_fragment_path(&m, 0.0, 2.0, 0.0, seed);
            steps.extend(p.steps.iter().map(|s| -(s.mass / s.parent_mass).ln()));
        }
        let (mean, se) = mean_se(&steps);
        assert!((mean - 0.5).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn tagged_kill_probability() {
        let kappa = 0.5;
        let m = DislocationModel::dissipative_uniform_binary(kappa).unwrap();
        let mut kills = Vec::new();
        for seed in 0..40_000 {
            let p = tagged_fragment_path(&m, 0.0, 3.0, -0.24, seed);
            kills.extend(p.steps.iter().map(|s| if s.chosen.is_none() { 1.0 } else { 0.0 }));
        }
        let (mean, se) = mean_se(&kills);
        assert!((mean - (1.0 - kappa) / 4.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn sigma_grows_with_refinement() {
        let (log, _) = simulate_stopped(&halving(), 0.0, 2f64.powi(-8), 2).unwrap();
        let mut last = 0.0;
        for k in 0..=8 {
            let s = log.first_passage_sigma(2f64.powi(-k)).unwrap();
            assert!(s.is_finite() && s >= last);
            last = s;
        }
        assert!(log.first_passage_sigma(2f64.powi(-9)).is_err());
    }

    #[test]
    fn serial_formats() {
        let (log, state) = simulate_stopped(&DislocationModel::uniform_binary(), 0.0, 0.05, 8).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), log.events.len());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["time", "parent_id", "parent_mass", "child_masses", "dissipated"] {
                assert!(v.get(key).is_some(), "missing {key}");
            }
        }
        let mut buf = Vec::new();
        state.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k,lambda_k"));
        assert_eq!(lines.count(), state.len());
    }

    #[test]
    fn neumaier_recovers_cancellation() {
        assert_eq!(neumaier([1.0, 1e100, 1.0, -1e100]), 2.0);
    }
}
