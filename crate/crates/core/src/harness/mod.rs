//! Scenario configuration, the tick loop, experiments and outputs.

pub mod config;
pub mod experiments;
pub mod output;
pub mod sim;

pub use config::{DatasetKind, ExperimentSection, Mode, PartitionKind, ScenarioConfig};
pub use experiments::{run_grid, run_packet_sweep, GridCell, GridResult, PacketCell, PacketTable};
pub use output::{emit_outputs, Outputs};
pub use sim::{
    run_scenario, run_scenario_with, timer_violations, DataSource, RoundMetrics, RunOutput, Simulation, TopologyRow,
    Vehicle,
};
