//! `spacehsm`: run scenarios, verify certificates against exported logs and
//! print link capacity.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use base64::Engine as _;
use clap::{Parser, Subcommand};
use spacehsm::ground::{verify_certificate, LogServer};
use spacehsm::hsm::SignedCertificate;
use spacehsm::scenario::{analytic_capacity, parse_config, run_scenario, ScenarioConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_VIOLATION: u8 = 2;

#[derive(Parser)]
#[command(
    name = "spacehsm",
    version,
    about = "Satellite HSM certificate authority simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and report its metrics.
    Run {
        config: PathBuf,
        /// Override the seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event stream as JSON lines (`-` for stdout).
        #[arg(long)]
        events_out: Option<PathBuf>,
        /// Write the final metrics as JSON.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Write the terrestrial logs in export format.
        #[arg(long)]
        log_export: Option<PathBuf>,
        /// Write each signed certificate as base64 into this directory.
        #[arg(long)]
        certs_out: Option<PathBuf>,
    },
    /// Check a certificate against an exported log.
    Verify {
        log_export: PathBuf,
        /// File holding the certificate in base64.
        cert: PathBuf,
    },
    /// Print how many requests fit in one pass.
    Capacity { config: PathBuf },
}

/// Failures that map to a specific exit code.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Violation(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    parse_config(&text)
        .map_err(|e| Failure::Config(anyhow::Error::new(e).context(path.display().to_string())))
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    if path == Path::new("-") {
        print!("{contents}");
        return Ok(());
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(
    config: &Path,
    seed: Option<u64>,
    events_out: Option<&Path>,
    metrics_out: Option<&Path>,
    log_export: Option<&Path>,
    certs_out: Option<&Path>,
) -> Result<(), Failure> {
    let mut config = load_config(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let output = run_scenario(&config).map_err(|e| Failure::Config(e.into()))?;
    if let Some(path) = events_out {
        write_out(path, &output.events_jsonl())?;
    }
    let metrics = serde_json::to_string_pretty(&output.metrics).context("serializing metrics")?;
    match metrics_out {
        Some(path) => write_out(path, &(metrics + "\n"))?,
        None if events_out != Some(Path::new("-")) => println!("{metrics}"),
        None => {}
    }
    if let Some(path) = log_export {
        let text = output
            .logs
            .as_ref()
            .map(LogServer::export)
            .unwrap_or_default();
        write_out(path, &text)?;
    }
    if let Some(dir) = certs_out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for rec in &output.certificates {
            let c = &rec.certificate;
            let name = dir.join(format!("cert-{}-{}.b64", c.signer_epoch, c.leaf_index));
            let text = base64::engine::general_purpose::STANDARD.encode(c.encode());
            write_out(&name, &(text + "\n"))?;
        }
    }
    if !output.violations.is_empty() {
        return Err(Failure::Violation(output.violations.join("; ")));
    }
    Ok(())
}

fn verify(log_export: &Path, cert: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(log_export)
        .with_context(|| format!("reading {}", log_export.display()))?;
    let logs =
        LogServer::import(&text).with_context(|| format!("importing {}", log_export.display()))?;
    let encoded =
        fs::read_to_string(cert).with_context(|| format!("reading {}", cert.display()))?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(encoded.trim())
        .context("certificate is not base64")?;
    let cert = SignedCertificate::decode(&bytes).context("decoding certificate")?;
    let logged = logs
        .prove(&cert)
        .is_some_and(|proof| verify_certificate(&cert, logs.hsm_key(), &logs, Some(&proof)));
    if logged {
        println!(
            "valid: epoch {} leaf {} is signed and logged",
            cert.signer_epoch, cert.leaf_index
        );
        Ok(())
    } else {
        Err(Failure::Violation(format!(
            "epoch {} leaf {} is not a logged certificate of this HSM",
            cert.signer_epoch, cert.leaf_index
        )))
    }
}

fn capacity(config: &Path) -> Result<(), Failure> {
    let config = load_config(config)?;
    let csr = config
        .requests()
        .iter()
        .map(|r| r.csr_bytes)
        .min()
        .unwrap_or(spacehsm::hsm::CsrMessage::DEFAULT_TOTAL_LEN);
    println!("{}", analytic_capacity(&config.link, csr));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            seed,
            events_out,
            metrics_out,
            log_export,
            certs_out,
        } => run(
            config,
            *seed,
            events_out.as_deref(),
            metrics_out.as_deref(),
            log_export.as_deref(),
            certs_out.as_deref(),
        ),
        Command::Verify { log_export, cert } => verify(log_export, cert),
        Command::Capacity { config } => capacity(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("invariant violation: {msg}");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
