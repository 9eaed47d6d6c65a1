//! Federated training: server aggregation, personalized weighted local
//! aggregation, two-phase client training and the round loop.

mod aggregate;
mod client;
mod personal;
mod run;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;

pub use aggregate::{fedprox_penalty, fedprox_term, naive_init, server_aggregate};
pub use client::{client_local_training, ClientState};
pub use personal::{personal_aggregation, update_weights, PersonalWeights};
pub use run::{evaluate, run_clients, run_experiment, ReportBody, RoundRecord, RunOutcome, RunReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fedepa,
    FedepaWoPa,
    FedepaWoUa,
    Fedavg,
    Fedprox,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fedepa,
        Method::FedepaWoPa,
        Method::FedepaWoUa,
        Method::Fedavg,
        Method::Fedprox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedepa => "fedepa",
            Method::FedepaWoPa => "fedepa_wo_pa",
            Method::FedepaWoUa => "fedepa_wo_ua",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
        }
    }

    pub fn uses_personal_aggregation(self) -> bool {
        matches!(self, Method::Fedepa | Method::FedepaWoUa)
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, Method::Fedepa | Method::FedepaWoPa)
    }

    pub fn is_personalized(self) -> bool {
        matches!(self, Method::Fedepa | Method::FedepaWoPa | Method::FedepaWoUa)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Which parameters are scored on a client's test set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Local models for the personalized methods, the global model otherwise.
    #[default]
    Auto,
    Global,
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Step size of the alignment phase; `lr` when absent.
    pub align_lr: Option<f64>,
    pub fedprox_mu: f64,
    pub align: AlignConfig,
    pub fusion: FusionMode,
    /// Half-width `d` of every encoder output.
    pub feature_dim: usize,
    /// Passes over the labeled set per round when learning `w`.
    pub w_passes: usize,
    pub lr_w: f64,
    /// Reset `w` to ones at the start of every round.
    pub reinit_weights: bool,
    pub eval_target: EvalTarget,
    /// Train clients of a round on the rayon pool.
    pub parallel_clients: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Fedepa,
            rounds: 50,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.0005,
            align_lr: None,
            fedprox_mu: 0.01,
            align: AlignConfig::default(),
            fusion: FusionMode::Full,
            feature_dim: 16,
            w_passes: 1,
            lr_w: 1.0,
            reinit_weights: false,
            eval_target: EvalTarget::Auto,
            parallel_clients: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.batch_size == 0 {
            return Err(Error::Config("rounds and batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("align_lr", self.align_lr()),
            ("fedprox_mu", self.fedprox_mu),
            ("lr_w", self.lr_w),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        self.align.validate()
    }

    pub fn align_lr(&self) -> f64 {
        self.align_lr.unwrap_or(self.lr)
    }

    /// Whether the test metrics of this run come from local models.
    pub fn evaluates_local(&self) -> bool {
        match self.eval_target {
            EvalTarget::Auto => self.method.is_personalized(),
            EvalTarget::Global => false,
            EvalTarget::Local => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("fedfoo".parse::<Method>().is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig {
            rounds: 0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            lr: f64::NAN,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
