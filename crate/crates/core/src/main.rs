use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hfl_vanet::harness::{
    emit_outputs, run_grid, run_packet_sweep, DataSource, Mode, Outputs, ScenarioConfig, Simulation,
};
use hfl_vanet::Result;

#[derive(Parser)]
#[command(name = "hfl-vanet", version, about = "Hierarchical federated learning over clustered vehicular networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run(Overrides),
    /// Convergence rounds over alphas x epsilons, averaged over seeds.
    Grid {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Mean EPC packets per round over max_hop x alpha.
    Packets {
        #[command(flatten)]
        common: Overrides,
        #[arg(long = "max-hops", value_delimiter = ',')]
        max_hops: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Parse and validate a configuration file, then print it fully resolved.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "max-hop")]
    max_hop: Option<u32>,
    /// Transmission range in metres.
    #[arg(long)]
    range: Option<f64>,
    /// Vehicles per km.
    #[arg(long)]
    density: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long = "max-rounds")]
    max_rounds: Option<u64>,
    /// Also write messages.csv with every packet.
    #[arg(long = "log-messages")]
    log_messages: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Overrides {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.scenario.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.scenario.mode = v;
        }
        if let Some(v) = self.alpha {
            cfg.clustering.alpha = v;
        }
        if let Some(v) = self.max_hop {
            cfg.set_max_hop(v);
        }
        if let Some(v) = self.range {
            cfg.network.tx_range_m = v;
        }
        if let Some(v) = self.density {
            cfg.mobility.target_density_per_km2 = v;
        }
        if let Some(v) = self.epsilon {
            cfg.aggregation.epsilon = v;
        }
        if let Some(v) = self.max_rounds {
            cfg.scenario.max_rounds = v;
        }
        if self.log_messages {
            cfg.scenario.log_messages = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(o: &Overrides) -> Result<()> {
    let cfg = o.resolve()?;
    let out = Simulation::new(cfg)?.run()?;
    for r in &out.rounds {
        eprintln!(
            "round {:>3}  acc {:.4}  CH {:>2} CM {:>2} SE {:>2}  epc {:>3} v2v {:>5}{}",
            r.round,
            r.epc_accuracy,
            r.num_chs,
            r.num_cms,
            r.num_se,
            r.epc_packets,
            r.v2v_packets,
            if r.converged { "  converged" } else { "" }
        );
    }
    let files = emit_outputs(
        &Outputs {
            config: &out.config,
            rounds: &out.rounds,
            topology: &out.topology,
            grid: None,
            packets: None,
            messages: out.messages.as_deref(),
        },
        &o.out,
    )?;
    report(&files);
    Ok(())
}

fn write_table(cfg: &ScenarioConfig, dir: &Path, grid: Option<&hfl_vanet::harness::GridResult>, packets: Option<&hfl_vanet::harness::PacketTable>) -> Result<()> {
    let files = emit_outputs(
        &Outputs {
            config: cfg,
            rounds: &[],
            topology: &[],
            grid,
            packets,
            messages: None,
        },
        dir,
    )?;
    report(&files);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(o) => run(o),
        Command::Grid {
            common,
            alphas,
            epsilons,
            seeds,
        } => (|| {
            let mut cfg = common.resolve()?;
            if let Some(v) = alphas {
                cfg.experiment.alphas = v.clone();
            }
            if let Some(v) = epsilons {
                cfg.experiment.epsilons = v.clone();
            }
            if let Some(v) = seeds {
                cfg.experiment.seeds = v.clone();
            }
            let src = DataSource::load(&cfg)?;
            let e = &cfg.experiment;
            let grid = run_grid(&cfg, &e.alphas, &e.epsilons, &e.seeds, &src);
            print!("{}", hfl_vanet::harness::output::grid_csv(Some(&grid)));
            write_table(&cfg, &common.out, Some(&grid), None)
        })(),
        Command::Packets {
            common,
            max_hops,
            alphas,
            seeds,
        } => (|| {
            let mut cfg = common.resolve()?;
            if let Some(v) = max_hops {
                cfg.experiment.max_hops = v.clone();
            }
            if let Some(v) = alphas {
                cfg.experiment.packet_alphas = v.clone();
            }
            if let Some(v) = seeds {
                cfg.experiment.seeds = v.clone();
            }
            let src = DataSource::load(&cfg)?;
            let e = &cfg.experiment;
            let table = run_packet_sweep(&cfg, &e.max_hops, &e.packet_alphas, &e.seeds, &src);
            print!("{}", hfl_vanet::harness::output::packets_csv(Some(&table)));
            write_table(&cfg, &common.out, None, Some(&table))
        })(),
        Command::ValidateConfig { config } => ScenarioConfig::load(config).and_then(|cfg| {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
