//! `train` command: load a JSON config (model + task sections, unknown keys
//! rejected), run the toy training loop and write per-step metrics as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use blockmoe::moe::MoEConfig;
use blockmoe::trainer::{train_loop, AdamParams, SynthTaskConfig, TrainError, TrainMode};

use crate::CmdError;

pub const CSV_HEADER: &str = "step,loss,aux_loss,drop_fraction,max_expert_load";

/// On-disk configuration. Keys inside each section mirror the config struct
/// fields verbatim; missing keys take their defaults, unknown keys fail fast.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFileConfig {
    pub model: MoEConfig,
    pub task: SynthTaskConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<TrainFileConfig, CmdError> {
    let Some(path) = path else {
        return Ok(TrainFileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let cfg: TrainFileConfig = serde_json::from_str(&text)
        .map_err(|e| CmdError::Usage(format!("malformed config {}: {e}", path.display())))?;
    if cfg.task.hidden_size != cfg.model.hidden_size {
        return Err(CmdError::Usage(format!(
            "task.hidden_size {} must equal model.hidden_size {}",
            cfg.task.hidden_size, cfg.model.hidden_size
        )));
    }
    Ok(cfg)
}

pub fn parse_mode(s: &str) -> Result<TrainMode, CmdError> {
    if s == "dropless" {
        return Ok(TrainMode::Dropless);
    }
    if let Some(f) = s.strip_prefix("capacity:") {
        let f: f64 = f
            .parse()
            .map_err(|_| CmdError::Usage(format!("invalid capacity factor `{f}`")))?;
        if !(f.is_finite() && f > 0.0) {
            return Err(CmdError::Usage(format!(
                "capacity factor {f} must be positive"
            )));
        }
        return Ok(TrainMode::Capacity(f));
    }
    Err(CmdError::Usage(format!(
        "unknown mode `{s}` (expected dropless|capacity:<f>)"
    )))
}

/// Run the loop and render the metrics CSV. Divergence maps to exit code 2.
pub fn run(
    mut cfg: TrainFileConfig,
    mode: TrainMode,
    steps: usize,
    lr: f64,
    seed: Option<u64>,
) -> Result<String, CmdError> {
    if let Some(seed) = seed {
        cfg.task.seed = seed;
    }
    let hp = AdamParams {
        lr,
        ..AdamParams::default()
    };
    let metrics = train_loop(&cfg.model, &cfg.task, &hp, steps, mode).map_err(|e| match e {
        TrainError::Diverged { .. } => CmdError::Divergence(e.to_string()),
        other => CmdError::Usage(other.to_string()),
    })?;

    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in &metrics {
        // Debug float formatting is shortest-roundtrip and always keeps a
        // decimal point, so the column stays visibly fractional.
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{}\n",
            m.step,
            m.loss,
            m.aux_loss,
            m.drop_fraction,
            m.max_expert_load()
        ));
    }
    Ok(out)
}
