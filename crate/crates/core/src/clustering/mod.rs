//! Four-state clustering machine and the selection metrics behind it.

pub mod machine;
pub mod metrics;
pub mod state;

pub use machine::{
    adopt_handover, handover_transfer, repair_topology, respond, step, step_ch, step_cm, step_in, step_se, Activity,
    Exchange, Node,
};
pub use metrics::{
    avg_cosim_pair, avg_cosim_self, average_relative_speed, cosine_similarity, relative_speed_of, self_score,
    MetricWeights,
};
pub use state::{ClusterState, ClusteringParams, Role, Vib, VibEntry};
