use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tokio::net::TcpListener;
use tokio::sync::watch;

use iot_testbed::gateway::GatewayConfig;
use iot_testbed::logging;
use iot_testbed::pipeline::{
    self, parse_bound, Demo, DemoOptions, PipelineError, ServeOptions, SimConfig, SimMode, VerifyOptions,
};
use iot_testbed::scenario::ScenarioFile;
use iot_testbed::simulators::config::DEFAULT_POWER_W;

#[derive(Parser)]
#[command(name = "testbed", version, about = "Desk-scale IoT testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    Traffic,
    Lighting,
}

#[derive(Subcommand)]
enum Command {
    /// Run the MQTT broker.
    Broker {
        #[arg(long, default_value_t = 1883)]
        port: u16,
    },
    /// Persist broker messages into the event log.
    Bridge {
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
        #[arg(long)]
        data_dir: PathBuf,
        /// Partitions for streams created by this run.
        #[arg(long, default_value_t = 4)]
        partitions: u32,
    },
    /// Run one simulator.
    Sim {
        kind: SimKind,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
        /// Publish [FROM, TO) and exit. Timestamps or dates.
        #[arg(long, num_args = 2, value_names = ["FROM", "TO"])]
        backfill: Option<Vec<String>>,
        /// Pace the backfill at this multiple of real time.
        #[arg(long)]
        speedup: Option<f64>,
    },
    /// Keep the store snapshot up to date with the log.
    Ingest {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Serve the HTTP API over the store.
    Serve {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Sensor labels, lamp power and CORS origin.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run every stage in one process.
    Demo {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        speedup: Option<f64>,
        /// Overrides the scenario's log.data_dir.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Rebuild the store from offset 0 and print row counts.
    Replay {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Publish a backfill end to end and check the store against a rescan.
    Verify {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 60)]
        minutes: u32,
        /// Keep the log and snapshot here.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Kill and restart the broker this many times while publishing.
        #[arg(long, default_value_t = 0)]
        inject_broker_restarts: u32,
    },
}

fn load(path: &PathBuf) -> Result<ScenarioFile, PipelineError> {
    ScenarioFile::load(path).map_err(|e| PipelineError::Config(e.to_string()))
}

/// Flips the returned signal on SIGINT or SIGTERM.
fn shutdown_signal() -> watch::Receiver<bool> {
    let (tx, rx) = watch::channel(false);
    tokio::spawn(async move {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
        log::info!("shutting down");
        let _ = tx.send(true);
    });
    rx
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

async fn run(cmd: Command) -> Result<ExitCode, PipelineError> {
    match cmd {
        Command::Broker { port } => pipeline::run_broker(port, shutdown_signal()).await?,
        Command::Bridge {
            broker,
            data_dir,
            partitions,
        } => {
            if partitions == 0 {
                return Err(PipelineError::Config("--partitions must be at least 1".into()));
            }
            pipeline::run_bridge(&broker, &data_dir, partitions, shutdown_signal()).await?
        }
        Command::Sim {
            kind,
            scenario,
            broker,
            backfill,
            speedup,
        } => {
            let scenario = load(&scenario)?;
            let sim = match kind {
                SimKind::Traffic => scenario.traffic.map(SimConfig::Traffic),
                SimKind::Lighting => scenario.lighting.map(SimConfig::Lighting),
            }
            .ok_or_else(|| PipelineError::Config("scenario has no section for this simulator".into()))?;
            let window = match backfill {
                Some(b) => Some((parse_bound(&b[0])?, parse_bound(&b[1])?)),
                None => sim.window(),
            };
            let mode = match window {
                Some((from, to)) if from < to => SimMode::Backfill { from, to, speedup },
                Some(_) => return Err(PipelineError::Config("backfill FROM must be before TO".into())),
                None => SimMode::Live,
            };
            pipeline::run_sim(sim, mode, &broker, shutdown_signal()).await?;
        }
        Command::Ingest { data_dir } => {
            pipeline::run_ingest(&data_dir, shutdown_signal()).await?;
        }
        Command::Serve {
            data_dir,
            port,
            scenario,
        } => {
            let scenario = scenario.as_ref().map(load).transpose()?;
            let opts = ServeOptions {
                data_dir,
                power_w: scenario.as_ref().map_or(DEFAULT_POWER_W, ScenarioFile::power_w),
                gateway: GatewayConfig {
                    cors_origin: scenario.as_ref().and_then(|s| s.gateway.cors_origin.clone()),
                    labels: pipeline::labels_of(scenario.as_ref()),
                    ..GatewayConfig::default()
                },
            };
            let listener = TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await?;
            pipeline::run_serve(listener, opts, shutdown_signal()).await?;
        }
        Command::Demo {
            scenario,
            speedup,
            data_dir,
        } => {
            let scenario = load(&scenario)?;
            let mut shutdown = shutdown_signal();
            let demo = Demo::start(&scenario, DemoOptions { speedup, data_dir }).await?;
            log::info!(
                "demo running: broker {} gateway http://{}",
                demo.broker_addr,
                demo.gateway_addr
            );
            let _ = shutdown.wait_for(|s| *s).await;
            print_json(&demo.stop().await?);
        }
        Command::Replay { data_dir, scenario } => {
            let power_w = match &scenario {
                Some(p) => load(p)?.power_w(),
                None => DEFAULT_POWER_W,
            };
            let report = tokio::task::spawn_blocking(move || pipeline::replay(&data_dir, power_w))
                .await
                .map_err(|e| PipelineError::Failed(e.to_string()))??;
            print_json(&report);
        }
        Command::Verify {
            scenario,
            minutes,
            data_dir,
            inject_broker_restarts,
        } => {
            let scenario = load(&scenario)?;
            let report = pipeline::verify(
                &scenario,
                VerifyOptions {
                    minutes,
                    data_dir,
                    broker_restarts: inject_broker_restarts,
                },
            )
            .await?;
            print_json(&report);
            if !report.passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            log::error!("cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
