//! `pcpo train`: config resolution, run manifest, training.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use pcpo::train::{self, TrainConfig};

use crate::{CliError, TrainArgs};

/// Written to `manifest.json` before training starts; immutable afterwards.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub master_seed: u64,
    pub timestamp_unix: u64,
    pub out_dir: String,
    pub code_version: String,
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))
        }
    }
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    // Resolve and validate everything before touching the output directory,
    // so a bad invocation leaves no trace.
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(env) = args.env {
        cfg.env = env.into();
    }
    if let Some(algo) = args.algo {
        cfg.algo = algo.into();
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&args.out).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            args.out.display()
        ))
    })?;

    let manifest = RunManifest {
        config: cfg.clone(),
        master_seed: cfg.seed,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        out_dir: args.out.display().to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let manifest_file = File::create(args.out.join("manifest.json"))
        .map_err(|e| CliError::Runtime(e.into()))?;
    serde_json::to_writer_pretty(BufWriter::new(manifest_file), &manifest)
        .map_err(|e| CliError::Runtime(e.into()))?;

    let out = train::run(&cfg, Some(&args.out))?;
    log::info!(
        "finished {} epochs, {} policy updates",
        out.metrics.len(),
        out.updates.len()
    );
    println!(
        "trained {} epochs -> {}",
        out.metrics.len(),
        args.out.display()
    );
    Ok(())
}
