//! Command-line grammar shared by `sting-ctl` and `sting-agent`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Options every command accepts.
#[derive(Debug, Clone, Args, PartialEq)]
pub struct Common {
    /// Print machine-readable JSON on stdout; human text and logs go to stderr.
    #[arg(long, global = true)]
    pub json: bool,

    /// More log output on stderr (repeatable). `STING_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Replaces every flow seed so runs are reproducible.
    #[arg(long, global = true, env = "STING_SEED")]
    pub seed: Option<u64>,

    /// Where runs and scenarios are stored.
    #[arg(long, global = true, env = "STING_DATA_DIR", default_value = "sting-data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone, Parser, PartialEq)]
#[command(name = "sting-ctl", version, about = "Distributed interference stress testing: controller, agents and analysis")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, PartialEq)]
pub enum Command {
    /// Run the controller: HTTP API, control broker and optional channel relay.
    Serve(ServeArgs),
    /// Validate, emit or execute scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Inspect stored run records.
    #[command(subcommand)]
    Runs(RunsCommand),
    /// Record a completion time for one step of a run.
    Annotate(AnnotateArgs),
    /// Summarize runs into CSV tables, plots or JSON.
    Analyze(AnalyzeArgs),
    /// Run the functional reference scenario on the emulated channel in
    /// virtual time and check the contention trend.
    Demo(DemoArgs),
    /// Run a headless agent.
    Agent(AgentArgs),
}

#[derive(Debug, Clone, Args, PartialEq)]
pub struct ServeArgs {
    /// HTTP API address.
    #[arg(long)]
    pub listen: String,
    /// TCP control broker address for remote agents.
    #[arg(long)]
    pub broker: Option<String>,
    /// Start a channel relay here; emulated scenarios then run through it
    /// with remote agents.
    #[arg(long, conflicts_with = "virtual_time")]
    pub relay: Option<String>,
    /// Data socket of the collector that receives SUT probes. Must be
    /// reachable by agents.
    #[arg(long, default_value = "127.0.0.1:0")]
    pub collector_bind: String,
    /// Execute runs with in-process agents on a virtual clock.
    #[arg(long = "virtual")]
    pub virtual_time: bool,
}

#[derive(Debug, Clone, Subcommand, PartialEq)]
pub enum ScenarioCommand {
    /// Check a scenario file against the schema.
    Validate { file: PathBuf },
    /// Print a reference scenario (`functional` or `parcours`) as JSON.
    Emit {
        name: String,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a scenario file and store the run.
    Run(ScenarioRunArgs),
}

#[derive(Debug, Clone, Args, PartialEq)]
pub struct ScenarioRunArgs {
    pub file: PathBuf,
    /// Submit to a running controller (`http://host:port`) instead of
    /// executing here.
    #[arg(long)]
    pub controller: Option<String>,
    /// Execute on the system clock rather than a virtual one.
    #[arg(long, conflicts_with = "controller")]
    pub real_time: bool,
    /// With --real-time: accept remote agents on this broker address.
    #[arg(long, requires = "real_time")]
    pub broker: Option<String>,
    /// With --real-time: route emulated traffic through a relay bound here.
    #[arg(long, requires = "real_time")]
    pub relay: Option<String>,
    #[arg(long, default_value = "127.0.0.1:0", requires = "real_time")]
    pub collector_bind: String,
}

#[derive(Debug, Clone, Subcommand, PartialEq)]
pub enum RunsCommand {
    List,
    /// Print one run record.
    Show { run_id: String },
    /// Copy run records to `<out>/<run_id>.json`.
    Export {
        #[arg(required = true)]
        run_ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args, PartialEq)]
pub struct AnnotateArgs {
    pub run_id: String,
    #[arg(long)]
    pub step: usize,
    /// Seconds the operator needed to complete the course.
    #[arg(long)]
    pub completion_time: f64,
    /// Annotate through a running controller (`http://host:port`).
    #[arg(long)]
    pub controller: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Plots,
    Json,
    All,
}

impl OutputFormat {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            OutputFormat::Csv => &["csv"],
            OutputFormat::Plots => &["plots"],
            OutputFormat::Json => &["json"],
            OutputFormat::All => &["csv", "plots", "json"],
        }
    }
}

#[derive(Debug, Clone, Args, PartialEq)]
pub struct AnalyzeArgs {
    #[arg(required = true)]
    pub run_ids: Vec<String>,
    /// Device whose link quality is summarized; defaults to the SUT named
    /// by the runs' scenario.
    #[arg(long)]
    pub sut: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args, PartialEq)]
pub struct DemoArgs {
    /// Number of interference steps, taken from 0, 2, 4, 6, 8 interferers.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub steps: u8,
    /// Seconds per step.
    #[arg(long, default_value_t = 60.0, value_parser = positive_seconds)]
    pub step_duration: f64,
    #[arg(long, default_value = "sting-demo")]
    pub out: PathBuf,
}

fn positive_seconds(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err("must be a positive number of seconds".into())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum TransportKind {
    Udp,
    Emulated,
}

#[derive(Debug, Clone, Args, PartialEq)]
pub struct AgentArgs {
    #[arg(long)]
    pub id: String,
    /// Control broker, `tcp://host:port`.
    #[arg(long)]
    pub controller: String,
    #[arg(long, value_enum)]
    pub transport: TransportKind,
    /// Local data-plane socket.
    #[arg(long, default_value = "127.0.0.1:0")]
    pub bind: String,
    /// Channel relay address; required with `--transport emulated`.
    #[arg(long, required_if_eq("transport", "emulated"))]
    pub relay: Option<String>,
    /// Address peers should send to, when it differs from the bound one.
    #[arg(long)]
    pub advertise: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub heartbeat_ms: u64,
    /// Append every published result to this JSON-lines file.
    #[arg(long)]
    pub spool: Option<PathBuf>,
}

/// `sting-agent`: the agent subcommand as its own binary.
#[derive(Debug, Clone, Parser, PartialEq)]
#[command(name = "sting-agent", version, about = "Headless sting agent")]
pub struct AgentCli {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub agent: AgentArgs,
}

pub fn parse_args<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}
