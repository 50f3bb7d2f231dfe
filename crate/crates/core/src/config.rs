//! Run configuration files: `[env]` and `[train]` tables plus an optional
//! hand description path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::rl::TrainConfig;

#[derive(Debug, Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Hand description file; the built-in Proto-0 hand when absent.
    pub hand: Option<String>,
    pub env: EnvConfig,
    pub train: TrainConfig,
}

pub fn parse_run_config(text: &str) -> Result<RunConfig, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
        ConfigError {
            line,
            message: e.message().to_string(),
        }
    })
}

/// Shipped configs by name: `toy` (joint tracking) and `ball`.
pub fn builtin_run_config(name: &str) -> Option<&'static str> {
    match name {
        "toy" => Some(include_str!("../config/toy.toml")),
        "ball" => Some(include_str!("../config/ball.toml")),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;
    use crate::handmodel::builtin_proto0;

    #[test]
    fn builtins_parse_and_validate() {
        let m = builtin_proto0();
        for name in ["toy", "ball"] {
            let c = parse_run_config(builtin_run_config(name).unwrap()).unwrap();
            c.env.validate(&m).unwrap();
            c.train.validate().unwrap();
            assert_eq!(c.train.actor_hidden, vec![64, 64]);
        }
        let toy = parse_run_config(builtin_run_config("toy").unwrap()).unwrap();
        assert!(matches!(toy.env.task, Task::JointTracking { .. }));
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse_run_config("[train]\nseed = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(e.line, 3);
    }
}
