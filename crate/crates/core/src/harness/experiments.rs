//! Parameter sweeps: convergence grid over (alpha, epsilon) and EPC packet
//! counts over (max_hop, alpha).

use super::config::ScenarioConfig;
use super::sim::{run_scenario_with, DataSource, RunOutput};

/// Reference convergence rounds for 20 vehicles at 100 m and `max_hop = 1`,
/// per alpha, for epsilon 0.01, 0.005 and 0.001.
const REFERENCE_ROUNDS: [(f64, [f64; 3]); 6] = [
    (0.0, [4.0, 21.0, 23.0]),
    (0.1, [3.0, 11.0, 16.0]),
    (0.5, [11.0, 24.0, 29.0]),
    (0.7, [6.0, 12.0, 15.0]),
    (0.9, [3.0, 10.0, 10.0]),
    (1.0, [10.0, 17.0, 17.0]),
];
const REFERENCE_EPSILONS: [f64; 3] = [0.01, 0.005, 0.001];

/// Reference convergence round for a grid cell, where one exists.
pub fn reference_round(cfg: &ScenarioConfig, alpha: f64, epsilon: f64) -> Option<f64> {
    let matches_setup = cfg.mobility.target_density_per_km2 == 20
        && cfg.network.tx_range_m == 100.0
        && cfg.clustering.max_hop == 1
        && cfg.clusters();
    if !matches_setup {
        return None;
    }
    let e = REFERENCE_EPSILONS.iter().position(|&x| x == epsilon)?;
    REFERENCE_ROUNDS.iter().find(|(a, _)| *a == alpha).map(|(_, r)| r[e])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub epsilon: f64,
    /// Per-seed convergence round; runs that never converge count as
    /// `max_rounds`. `None` marks a failed run.
    pub rounds: Vec<Option<u64>>,
    pub censored: usize,
    pub reference: Option<f64>,
}

impl GridCell {
    pub fn failed(&self) -> usize {
        self.rounds.iter().filter(|r| r.is_none()).count()
    }

    pub fn mean_round(&self) -> Option<f64> {
        let ok: Vec<f64> = self.rounds.iter().flatten().map(|&r| r as f64).collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub alphas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn cell(&self, alpha: f64, epsilon: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.epsilon == epsilon)
    }

    /// Mean over epsilons of the seed-averaged convergence round.
    pub fn alpha_average(&self, alpha: f64) -> Option<f64> {
        let means: Vec<f64> = self
            .epsilons
            .iter()
            .map(|&e| self.cell(alpha, e).and_then(GridCell::mean_round))
            .collect::<Option<_>>()?;
        Some(means.iter().sum::<f64>() / means.len() as f64)
    }

    pub fn reference_average(&self, alpha: f64) -> Option<f64> {
        let refs: Vec<f64> = self
            .epsilons
            .iter()
            .map(|&e| self.cell(alpha, e).and_then(|c| c.reference))
            .collect::<Option<_>>()?;
        Some(refs.iter().sum::<f64>() / refs.len() as f64)
    }
}

/// One run per (alpha, seed), stopped at the smallest epsilon; the
/// convergence round for each epsilon is read off that run's history.
pub fn run_grid(base: &ScenarioConfig, alphas: &[f64], epsilons: &[f64], seeds: &[u64], source: &DataSource) -> GridResult {
    let eps_min = epsilons.iter().copied().fold(f64::INFINITY, f64::min);
    let mut cells = Vec::new();
    for &alpha in alphas {
        let mut per_seed: Vec<Option<RunOutput>> = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.clustering.alpha = alpha;
            cfg.scenario.seed = seed;
            cfg.aggregation.epsilon = eps_min;
            cfg.scenario.run_past_convergence = false;
            per_seed.push(run_scenario_with(&cfg, source).ok());
        }
        for &epsilon in epsilons {
            let mut censored = 0;
            let rounds = per_seed
                .iter()
                .map(|run| {
                    run.as_ref().map(|out| {
                        out.convergence_round(epsilon).unwrap_or_else(|| {
                            censored += 1;
                            base.scenario.max_rounds
                        })
                    })
                })
                .collect();
            cells.push(GridCell {
                alpha,
                epsilon,
                rounds,
                censored,
                reference: reference_round(base, alpha, epsilon),
            });
        }
    }
    GridResult {
        alphas: alphas.to_vec(),
        epsilons: epsilons.to_vec(),
        cells,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketCell {
    pub max_hop: u32,
    pub alpha: f64,
    /// Per-seed mean EPC packets per round; `None` marks a failed run.
    pub epc_per_round: Vec<Option<f64>>,
    pub v2v_per_round: Vec<Option<f64>>,
    pub heads_per_round: Vec<Option<f64>>,
    /// Per-seed flag: every round sent exactly two EPC packets per live vehicle.
    pub two_per_vehicle: Vec<bool>,
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let ok: Vec<f64> = xs.iter().flatten().copied().collect();
    (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
}

impl PacketCell {
    pub fn mean_epc(&self) -> Option<f64> {
        mean(&self.epc_per_round)
    }

    pub fn mean_v2v(&self) -> Option<f64> {
        mean(&self.v2v_per_round)
    }

    pub fn mean_heads(&self) -> Option<f64> {
        mean(&self.heads_per_round)
    }

    pub fn failed(&self) -> usize {
        self.epc_per_round.iter().filter(|r| r.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketTable {
    pub cells: Vec<PacketCell>,
}

impl PacketTable {
    pub fn cell(&self, max_hop: u32, alpha: f64) -> Option<&PacketCell> {
        self.cells.iter().find(|c| c.max_hop == max_hop && c.alpha == alpha)
    }
}

fn per_round(out: &RunOutput, f: impl Fn(&super::sim::RoundMetrics) -> f64) -> Option<f64> {
    (!out.rounds.is_empty()).then(|| out.rounds.iter().map(&f).sum::<f64>() / out.rounds.len() as f64)
}

/// Runs every (max_hop, alpha, seed) for the full `max_rounds`. `max_hop = 0`
/// is the no-clustering baseline, which ignores alpha and is run once per seed.
pub fn run_packet_sweep(base: &ScenarioConfig, max_hops: &[u32], alphas: &[f64], seeds: &[u64], source: &DataSource) -> PacketTable {
    let mut cells = Vec::new();
    let mut baseline: Option<PacketCell> = None;
    for &max_hop in max_hops {
        for &alpha in alphas {
            if max_hop == 0 {
                if let Some(b) = &baseline {
                    cells.push(PacketCell { alpha, ..b.clone() });
                    continue;
                }
            }
            let mut cell = PacketCell {
                max_hop,
                alpha,
                epc_per_round: Vec::new(),
                v2v_per_round: Vec::new(),
                heads_per_round: Vec::new(),
                two_per_vehicle: Vec::new(),
            };
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.set_max_hop(max_hop);
                cfg.clustering.alpha = alpha;
                cfg.scenario.seed = seed;
                cfg.scenario.run_past_convergence = true;
                match run_scenario_with(&cfg, source) {
                    Ok(out) => {
                        cell.epc_per_round.push(per_round(&out, |r| r.epc_packets as f64));
                        cell.v2v_per_round.push(per_round(&out, |r| r.v2v_packets as f64));
                        cell.heads_per_round.push(per_round(&out, |r| r.num_chs as f64));
                        cell.two_per_vehicle
                            .push(out.rounds.iter().all(|r| r.epc_packets == 2 * r.live as u64));
                    }
                    Err(_) => {
                        cell.epc_per_round.push(None);
                        cell.v2v_per_round.push(None);
                        cell.heads_per_round.push(None);
                        cell.two_per_vehicle.push(false);
                    }
                }
            }
            if max_hop == 0 {
                baseline = Some(cell.clone());
            }
            cells.push(cell);
        }
    }
    PacketTable { cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::synthetic();
        cfg.scenario.max_rounds = 6;
        cfg
    }

    #[test]
    fn single_cell_grid_matches_direct_run() {
        let base = tiny();
        let src = DataSource::load(&base).unwrap();
        let grid = run_grid(&base, &[0.9], &[0.05], &[7], &src);
        let mut cfg = base.clone();
        cfg.scenario.seed = 7;
        cfg.clustering.alpha = 0.9;
        cfg.aggregation.epsilon = 0.05;
        let direct = run_scenario_with(&cfg, &src).unwrap();
        let expect = direct.convergence_round(0.05).unwrap_or(base.scenario.max_rounds);
        assert_eq!(grid.cells[0].rounds, vec![Some(expect)]);
    }

    #[test]
    fn smaller_epsilon_never_converges_sooner() {
        let base = tiny();
        let src = DataSource::load(&base).unwrap();
        let grid = run_grid(&base, &[0.5], &[0.05, 0.01, 0.001], &[1, 2], &src);
        for s in 0..2 {
            let r: Vec<u64> = grid.cells.iter().map(|c| c.rounds[s].unwrap()).collect();
            assert!(r.windows(2).all(|w| w[0] <= w[1]), "{r:?}");
        }
    }

    #[test]
    fn reference_only_for_matching_setup() {
        let mut cfg = ScenarioConfig::default();
        assert_eq!(reference_round(&cfg, 0.9, 0.01), Some(3.0));
        assert_eq!(reference_round(&cfg, 0.9, 0.02), None);
        cfg.network.tx_range_m = 500.0;
        assert_eq!(reference_round(&cfg, 0.9, 0.01), None);
    }

    #[test]
    fn reference_averages() {
        let cfg = ScenarioConfig::default();
        let cells = REFERENCE_EPSILONS
            .iter()
            .map(|&e| GridCell {
                alpha: 0.9,
                epsilon: e,
                rounds: vec![Some(1)],
                censored: 0,
                reference: reference_round(&cfg, 0.9, e),
            })
            .collect();
        let g = GridResult {
            alphas: vec![0.9],
            epsilons: REFERENCE_EPSILONS.to_vec(),
            cells,
        };
        assert!((g.reference_average(0.9).unwrap() - 7.6667).abs() < 1e-4);
    }

    #[test]
    fn singleton_network_packets_do_not_depend_on_max_hop() {
        let mut base = tiny();
        base.mobility.target_density_per_km2 = 1;
        let src = DataSource::load(&base).unwrap();
        let t = run_packet_sweep(&base, &[1, 2, 3], &[0.9], &[3], &src);
        let e: Vec<_> = t.cells.iter().map(|c| c.mean_epc()).collect();
        assert!(e.windows(2).all(|w| w[0] == w[1]), "{e:?}");
    }
}
