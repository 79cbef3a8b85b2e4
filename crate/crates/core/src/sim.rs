//! Monte Carlo N-player simulation.
//!
//! Players are independent chains sharing one grid strategy; within a cell
//! the rates of each state are frozen, so competing exponential clocks give an
//! exact simulation. Every player draws from its own ChaCha8 stream, which
//! makes results independent of thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{Action, FlowCurve, GeneratorModel, ProbabilityVector, StrategyTable, TimeGrid};
use crate::error::{MfeError, Result};
use crate::hj::CostModel;
use crate::mfe::Equilibrium;
use crate::verify::spike_profile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SimConfig {
    pub players: usize,
    pub seed: u64,
    pub replications: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.players < 2 {
            return Err(MfeError::InvalidConfig(format!(
                "at least 2 players are needed, got {}",
                self.players
            )));
        }
        if self.replications == 0 {
            return Err(MfeError::InvalidConfig("replications must be positive".into()));
        }
        Ok(())
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(r as u64 + 1))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn player_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JumpEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

/// Per-player state snapshots at grid nodes plus the jump log.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    players: usize,
    steps: usize,
    states: usize,
    snapshots: Vec<u32>,
    events: Vec<Vec<JumpEvent>>,
}

impl PathBundle {
    pub fn players(&self) -> usize {
        self.players
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self, player: usize, k: usize) -> usize {
        self.snapshots[player * (self.steps + 1) + k] as usize
    }

    pub fn events(&self, player: usize) -> &[JumpEvent] {
        &self.events[player]
    }

    fn counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0usize; self.states];
        for p in 0..self.players {
            c[self.state(p, k)] += 1;
        }
        c
    }

    /// Full empirical measure at node `k`.
    pub fn empirical(&self, k: usize) -> ProbabilityVector {
        let n = self.players as f64;
        ProbabilityVector::new(self.counts(k).into_iter().map(|c| c as f64 / n).collect())
            .expect("counts sum to the player count")
    }

    /// `ρ^{N,-p}` at node `k`: the histogram of every player except `p`.
    pub fn leave_one_out(&self, k: usize, player: usize) -> ProbabilityVector {
        let mut c = self.counts(k);
        c[self.state(player, k)] -= 1;
        let n = (self.players - 1) as f64;
        ProbabilityVector::new(c.into_iter().map(|x| x as f64 / n).collect())
            .expect("at least one peer")
    }

    pub fn empirical_flow(&self) -> FlowCurve {
        FlowCurve::new((0..=self.steps).map(|k| self.empirical(k)).collect()).expect("nonempty")
    }

    pub fn leave_one_out_flow(&self, player: usize) -> FlowCurve {
        FlowCurve::new((0..=self.steps).map(|k| self.leave_one_out(k, player)).collect())
            .expect("nonempty")
    }
}

/// `rates[k][i]` is the frozen row `q_{t_k}^{π_k(i)}(i, ·)`.
fn frozen_rates(gen: &dyn GeneratorModel, pi: &StrategyTable, grid: &TimeGrid) -> Vec<Vec<Vec<f64>>> {
    let m = gen.states();
    (0..grid.steps())
        .map(|k| {
            (0..m)
                .map(|i| {
                    let mut row = vec![0.0; m];
                    gen.rates(grid.node(k), i, pi.get(k, i), &mut row);
                    row
                })
                .collect()
        })
        .collect()
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Picks the destination of a jump from `state` given total exit rate `exit`.
fn pick_destination(rng: &mut ChaCha8Rng, row: &[f64], state: usize, exit: f64) -> usize {
    let target = rng.random::<f64>() * exit;
    let mut acc = 0.0;
    let mut last = state;
    for (j, &q) in row.iter().enumerate() {
        if j == state || q <= 0.0 {
            continue;
        }
        acc += q;
        last = j;
        if target < acc {
            return j;
        }
    }
    last
}

fn simulate_player(
    rng: &mut ChaCha8Rng,
    rho0: &ProbabilityVector,
    rates: &[Vec<Vec<f64>>],
    grid: &TimeGrid,
) -> (Vec<u32>, Vec<JumpEvent>) {
    let n = grid.steps();
    let mut snapshots = Vec::with_capacity(n + 1);
    let mut events = Vec::new();
    let mut state = sample_categorical(rng, rho0.as_slice());
    snapshots.push(state as u32);
    for (k, cell) in rates.iter().enumerate() {
        let end = grid.node(k + 1);
        let mut t = grid.node(k);
        loop {
            let row = &cell[state];
            let exit: f64 = row.iter().enumerate().filter(|(j, _)| *j != state).map(|(_, q)| q.max(0.0)).sum();
            if exit <= 0.0 {
                break;
            }
            let wait: f64 = Exp1.sample(rng);
            t += wait / exit;
            if t >= end {
                break;
            }
            let to = pick_destination(rng, row, state, exit);
            events.push(JumpEvent { time: t, from: state, to });
            state = to;
        }
        snapshots.push(state as u32);
    }
    (snapshots, events)
}

/// Simulates `cfg.players` independent chains under `π` with i.i.d. initial
/// states drawn from `ρ0`, using `cfg.seed`.
pub fn simulate(
    gen: &dyn GeneratorModel,
    pi: &StrategyTable,
    rho0: &ProbabilityVector,
    grid: &TimeGrid,
    cfg: &SimConfig,
) -> Result<PathBundle> {
    simulate_seeded(gen, pi, rho0, grid, cfg.players, cfg.seed)
}

fn simulate_seeded(
    gen: &dyn GeneratorModel,
    pi: &StrategyTable,
    rho0: &ProbabilityVector,
    grid: &TimeGrid,
    players: usize,
    seed: u64,
) -> Result<PathBundle> {
    if players < 2 {
        return Err(MfeError::InvalidConfig(format!(
            "at least 2 players are needed, got {players}"
        )));
    }
    if rho0.len() != gen.states() {
        return Err(MfeError::DimensionMismatch {
            expected: gen.states(),
            found: rho0.len(),
        });
    }
    pi.check_admissible(gen, grid)?;
    let rates = frozen_rates(gen, pi, grid);
    let paths: Vec<(Vec<u32>, Vec<JumpEvent>)> = (0..players)
        .into_par_iter()
        .map(|p| {
            let mut rng = player_rng(seed, p as u64);
            simulate_player(&mut rng, rho0, &rates, grid)
        })
        .collect();
    let mut snapshots = Vec::with_capacity(players * (grid.steps() + 1));
    let mut events = Vec::with_capacity(players);
    for (s, e) in paths {
        snapshots.extend(s);
        events.push(e);
    }
    Ok(PathBundle {
        players,
        steps: grid.steps(),
        states: gen.states(),
        snapshots,
        events,
    })
}

/// `sup_k d(ν̂_k, ν*_k)` for the full empirical measure.
pub fn empirical_flow_error(bundle: &PathBundle, flow: &FlowCurve) -> Result<f64> {
    if flow.len() != bundle.steps + 1 {
        return Err(MfeError::GridMismatch(format!(
            "bundle has {} nodes, flow has {}",
            bundle.steps + 1,
            flow.len()
        )));
    }
    bundle.empirical_flow().sup_distance(flow)
}

/// Empirical-flow errors for replications `0..cfg.replications`.
pub fn replicated_errors(
    gen: &dyn GeneratorModel,
    pi: &StrategyTable,
    rho0: &ProbabilityVector,
    flow: &FlowCurve,
    grid: &TimeGrid,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    (0..cfg.replications)
        .map(|r| {
            let bundle = simulate_seeded(gen, pi, rho0, grid, cfg.players, cfg.replication_seed(r))?;
            empirical_flow_error(&bundle, flow)
        })
        .collect()
}

/// A one-cell spike of player `k` at grid node `node`, starting in `state`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spike {
    pub node: usize,
    pub state: usize,
    pub action: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeviationEstimate {
    pub gap: f64,
    /// Half-width of the 95% normal confidence interval.
    pub half_width: f64,
    pub samples: usize,
}

impl DeviationEstimate {
    pub fn contains(&self, x: f64) -> bool {
        (self.gap - x).abs() <= self.half_width
    }
}

/// Couples the spiked and unspiked paths of one player: both are driven by
/// the same Poisson clock of rate `Λ` and the same uniforms (uniformization),
/// so they separate only where their rates differ.
#[allow(clippy::too_many_arguments)]
fn coupled_costs(
    rng: &mut ChaCha8Rng,
    cost: &dyn CostModel,
    grid: &TimeGrid,
    spike: &Spike,
    base_rates: &[Vec<Vec<f64>>],
    spike_rates: &[Vec<f64>],
    base_actions: &StrategyTable,
    spike_actions: &[Action],
    peers: &FlowCurve,
) -> (f64, f64) {
    let n = grid.steps();
    let dt = grid.dt();
    let tau = grid.node(spike.node);
    let (mut xa, mut xb) = (spike.state, spike.state);
    let (mut ca, mut cb) = (0.0, 0.0);
    let exit = |row: &[f64], x: usize| -> f64 {
        row.iter().enumerate().filter(|(j, _)| *j != x).map(|(_, q)| q.max(0.0)).sum()
    };
    for k in spike.node..n {
        let t = grid.node(k);
        let nu = peers.at(k);
        let spiked = k == spike.node;
        let va = base_actions.get(k, xa);
        let vb = if spiked { spike_actions[xb] } else { base_actions.get(k, xb) };
        ca += dt * cost.running_total(tau, t, xa, va, nu);
        cb += dt * cost.running_total(tau, t, xb, vb, nu);

        let rows_b: &[Vec<f64>] = if spiked { spike_rates } else { &base_rates[k] };
        let lambda = (0..base_rates[k].len())
            .map(|x| exit(&base_rates[k][x], x).max(exit(&rows_b[x], x)))
            .fold(0.0, f64::max);
        if lambda <= 0.0 {
            continue;
        }
        let mut s = 0.0;
        loop {
            let wait: f64 = Exp1.sample(rng);
            s += wait / lambda;
            if s >= dt {
                break;
            }
            let u = rng.random::<f64>() * lambda;
            xa = uniformized_move(&base_rates[k][xa], xa, u);
            xb = uniformized_move(&rows_b[xb], xb, u);
        }
    }
    let nu_t = peers.at(n);
    ca += cost.terminal(tau, xa, nu_t);
    cb += cost.terminal(tau, xb, nu_t);
    (ca, cb)
}

fn uniformized_move(row: &[f64], state: usize, u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &q) in row.iter().enumerate() {
        if j == state || q <= 0.0 {
            continue;
        }
        acc += q;
        if u < acc {
            return j;
        }
    }
    state
}

/// Monte Carlo estimate of player `player`'s normalized spike gap when all
/// other players follow `π*`.
///
/// For each replication the peers are simulated once and their leave-one-out
/// histogram enters the costs; then `paths_per_replication` coupled pairs of
/// the player's own path are drawn from `spike.state` at `spike.node`.
pub fn deviation_test(
    eq: &Equilibrium,
    gen: &dyn GeneratorModel,
    cost: &dyn CostModel,
    player: usize,
    spike: Spike,
    cfg: &SimConfig,
    paths_per_replication: usize,
) -> Result<DeviationEstimate> {
    cfg.validate()?;
    let grid = eq.grid;
    if player >= cfg.players {
        return Err(MfeError::InvalidConfig(format!(
            "player {player} out of range for {} players",
            cfg.players
        )));
    }
    if spike.node >= grid.steps() || spike.state >= gen.states() {
        return Err(MfeError::InvalidConfig("spike outside the grid".into()));
    }
    let t0 = grid.node(spike.node);
    gen.check_admissible(t0, spike.state, spike.action)?;
    let base_rates = frozen_rates(gen, &eq.policy, &grid);
    let spike_actions = spike_profile(gen, t0, spike.state, spike.action);
    let m = gen.states();
    let spike_rates: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut row = vec![0.0; m];
            gen.rates(t0, i, spike_actions[i], &mut row);
            row
        })
        .collect();

    let mut diffs: Vec<f64> = Vec::with_capacity(cfg.replications * paths_per_replication);
    for r in 0..cfg.replications {
        let seed = cfg.replication_seed(r);
        let bundle = simulate_seeded(gen, &eq.policy, &eq.initial, &grid, cfg.players, seed)?;
        let peers = bundle.leave_one_out_flow(player);
        let own_seed = splitmix64(seed ^ 0xD1B5_4A32_D192_ED03);
        let batch: Vec<f64> = (0..paths_per_replication)
            .into_par_iter()
            .map(|p| {
                let mut rng = player_rng(own_seed, p as u64);
                let (ca, cb) = coupled_costs(
                    &mut rng,
                    cost,
                    &grid,
                    &spike,
                    &base_rates,
                    &spike_rates,
                    &eq.policy,
                    &spike_actions,
                    &peers,
                );
                (cb - ca) / grid.dt()
            })
            .collect();
        diffs.extend(batch);
    }
    let count = diffs.len();
    if count < 2 {
        return Err(MfeError::InvalidConfig("need at least two sample paths".into()));
    }
    let mean = diffs.iter().sum::<f64>() / count as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
    Ok(DeviationEstimate {
        gap: mean,
        half_width: 1.96 * (var / count as f64).sqrt(),
        samples: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ControlFreeModel;

    fn symmetric() -> ControlFreeModel {
        ControlFreeModel::homogeneous(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap()
    }

    #[test]
    fn zero_generator_never_jumps() {
        let gen = ControlFreeModel::homogeneous(vec![vec![0.0; 3]; 3]).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let pi = StrategyTable::constant(10, 3, 0.0);
        let rho = ProbabilityVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let cfg = SimConfig { players: 500, seed: 3, replications: 1 };
        let b = simulate(&gen, &pi, &rho, &grid, &cfg).unwrap();
        for p in 0..b.players() {
            assert!(b.events(p).is_empty());
        }
        let first = b.empirical(0);
        for k in 0..=10 {
            assert_eq!(b.empirical(k), first);
        }
    }

    #[test]
    fn same_seed_same_bundle() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let pi = StrategyTable::constant(20, 2, 0.0);
        let cfg = SimConfig { players: 300, seed: 11, replications: 1 };
        let rho = ProbabilityVector::uniform(2);
        let a = simulate(&symmetric(), &pi, &rho, &grid, &cfg).unwrap();
        let b = simulate(&symmetric(), &pi, &rho, &grid, &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(&symmetric(), &pi, &rho, &grid, &SimConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn snapshots_agree_with_event_log() {
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let pi = StrategyTable::constant(8, 2, 0.0);
        let cfg = SimConfig { players: 50, seed: 5, replications: 1 };
        let b = simulate(&symmetric(), &pi, &ProbabilityVector::dirac(2, 0), &grid, &cfg).unwrap();
        for p in 0..b.players() {
            let mut state = b.state(p, 0);
            let mut ev = b.events(p).iter().peekable();
            for k in 1..=grid.steps() {
                while let Some(e) = ev.next_if(|e| e.time < grid.node(k)) {
                    assert_eq!(e.from, state);
                    state = e.to;
                }
                assert_eq!(b.state(p, k), state);
            }
        }
    }

    #[test]
    fn leave_one_out_identity() {
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let pi = StrategyTable::constant(5, 2, 0.0);
        let n = 40;
        let cfg = SimConfig { players: n, seed: 9, replications: 1 };
        let b = simulate(&symmetric(), &pi, &ProbabilityVector::uniform(2), &grid, &cfg).unwrap();
        for k in 0..=5 {
            let full = b.empirical(k);
            for p in [0, 17, n - 1] {
                let loo = b.leave_one_out(k, p);
                let d = crate::chain::tv_distance(&full, &loo).unwrap();
                let own = b.state(p, k);
                let count = (full[own] * n as f64).round();
                let exact = 2.0 * (n as f64 - count) / (n as f64 * (n - 1) as f64);
                assert!((d - exact).abs() < 1e-12);
                assert!(d <= 2.0 / (n - 1) as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn one_player_is_rejected() {
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let pi = StrategyTable::constant(5, 2, 0.0);
        let cfg = SimConfig { players: 1, seed: 0, replications: 1 };
        assert!(simulate(&symmetric(), &pi, &ProbabilityVector::uniform(2), &grid, &cfg).is_err());
    }
}
