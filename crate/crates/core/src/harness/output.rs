//! CSV and manifest writers. Wall-clock time is deliberately left out so that
//! identical runs produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ScenarioConfig;
use super::experiments::{GridResult, PacketTable};
use super::sim::{RoundMetrics, TopologyRow};
use crate::error::{Error, Result};
use crate::netlayer::LogRecord;

pub const ROUND_METRICS_HEADER: &str = "round,epc_accuracy,num_chs,num_cms,num_se,epc_packets,v2v_packets,converged";
pub const TOPOLOGY_HEADER: &str = "tick,vehicle_id,state,ch_id,hops";
pub const GRID_HEADER: &str = "alpha,epsilon,mean_convergence_round,runs,censored,failed,reference_round";
pub const PACKETS_HEADER: &str = "max_hop,alpha,mean_epc_packets_per_round,mean_v2v_packets_per_round,mean_chs,runs,failed";

/// Everything a command may write. Absent tables become header-only files.
#[derive(Debug, Clone, Copy)]
pub struct Outputs<'a> {
    pub config: &'a ScenarioConfig,
    pub rounds: &'a [RoundMetrics],
    pub topology: &'a [TopologyRow],
    pub grid: Option<&'a GridResult>,
    pub packets: Option<&'a PacketTable>,
    pub messages: Option<&'a [LogRecord]>,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn round_metrics_csv(rounds: &[RoundMetrics]) -> String {
    let mut s = format!("{ROUND_METRICS_HEADER}\n");
    for r in rounds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.round, r.epc_accuracy, r.num_chs, r.num_cms, r.num_se, r.epc_packets, r.v2v_packets, r.converged
        );
    }
    s
}

pub fn topology_csv(rows: &[TopologyRow]) -> String {
    let mut s = format!("{TOPOLOGY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.tick, r.id, r.role, opt(r.ch_id), r.hops);
    }
    s
}

pub fn grid_csv(grid: Option<&GridResult>) -> String {
    let mut s = format!("{GRID_HEADER}\n");
    let Some(g) = grid else { return s };
    for &a in &g.alphas {
        for &e in &g.epsilons {
            if let Some(c) = g.cell(a, e) {
                let _ = writeln!(
                    s,
                    "{a},{e},{},{},{},{},{}",
                    opt(c.mean_round()),
                    c.rounds.len(),
                    c.censored,
                    c.failed(),
                    opt(c.reference)
                );
            }
        }
        let runs: usize = g.epsilons.iter().filter_map(|&e| g.cell(a, e)).map(|c| c.rounds.len()).sum();
        let censored: usize = g.epsilons.iter().filter_map(|&e| g.cell(a, e)).map(|c| c.censored).sum();
        let failed: usize = g.epsilons.iter().filter_map(|&e| g.cell(a, e)).map(|c| c.failed()).sum();
        let _ = writeln!(
            s,
            "{a},average,{},{runs},{censored},{failed},{}",
            opt(g.alpha_average(a)),
            opt(g.reference_average(a))
        );
    }
    s
}

pub fn packets_csv(table: Option<&PacketTable>) -> String {
    let mut s = format!("{PACKETS_HEADER}\n");
    let Some(t) = table else { return s };
    for c in &t.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.max_hop,
            c.alpha,
            opt(c.mean_epc()),
            opt(c.mean_v2v()),
            opt(c.mean_heads()),
            c.epc_per_round.len(),
            c.failed()
        );
    }
    s
}

pub fn messages_csv(log: &[LogRecord]) -> String {
    let mut s = format!("{}\n", LogRecord::CSV_HEADER);
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes all output files into `out_dir`, creating it if needed.
pub fn emit_outputs(out: &Outputs<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = vec![
        write(out_dir, "round_metrics.csv", &round_metrics_csv(out.rounds))?,
        write(out_dir, "grid.csv", &grid_csv(out.grid))?,
        write(out_dir, "packets.csv", &packets_csv(out.packets))?,
        write(out_dir, "topology.csv", &topology_csv(out.topology))?,
        write(out_dir, "manifest.toml", &out.config.to_toml())?,
    ];
    if let Some(log) = out.messages {
        written.push(write(out_dir, "messages.csv", &messages_csv(log))?);
    }
    Ok(written)
}
