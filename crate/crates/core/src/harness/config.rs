use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capped::{CappedOptions, DEFAULT_LAMBDA, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::routing::Router;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouterKind {
    #[serde(rename = "ec")]
    ExpertChoice,
    #[serde(rename = "ec-capped")]
    Capped,
    #[serde(rename = "top1")]
    Top1,
    #[serde(rename = "top2")]
    Top2,
    #[serde(rename = "hash")]
    Hash,
}

impl RouterKind {
    pub const ALL: [RouterKind; 5] =
        [RouterKind::ExpertChoice, RouterKind::Capped, RouterKind::Top1, RouterKind::Top2, RouterKind::Hash];

    pub fn as_str(&self) -> &'static str {
        match self {
            RouterKind::ExpertChoice => "ec",
            RouterKind::Capped => "ec-capped",
            RouterKind::Top1 => "top1",
            RouterKind::Top2 => "top2",
            RouterKind::Hash => "hash",
        }
    }

    pub fn is_token_choice(&self) -> bool {
        matches!(self, RouterKind::Top1 | RouterKind::Top2)
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouterKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown router '{s}' (ec, ec-capped, top1, top2, hash)")))
    }
}

/// Flat run configuration, serialised with exactly these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub router: RouterKind,
    pub experts: usize,
    pub capacity_factor: f64,
    pub cap_b: usize,
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub d_model: usize,
    pub d_hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub aux_loss_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            router: RouterKind::ExpertChoice,
            experts: 8,
            capacity_factor: 2.0,
            cap_b: 2,
            lambda: DEFAULT_LAMBDA,
            max_iter: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            d_model: 8,
            d_hidden: 16,
            steps: 2000,
            lr: 0.1,
            seed: 0,
            aux_loss_weight: 0.01,
        }
    }
}

impl RunConfig {
    pub fn router(&self) -> Router {
        match self.router {
            RouterKind::ExpertChoice => Router::ExpertChoice,
            RouterKind::Capped => Router::Capped(self.capped_options()),
            RouterKind::Top1 => Router::TokenChoice { top_k: 1 },
            RouterKind::Top2 => Router::TokenChoice { top_k: 2 },
            RouterKind::Hash => Router::Hash,
        }
    }

    pub fn capped_options(&self) -> CappedOptions {
        CappedOptions { cap_b: self.cap_b, lambda: self.lambda, max_iters: self.max_iter, tol: self.tol }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_exact() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        let mut want = vec![
            "router",
            "experts",
            "capacity_factor",
            "cap_b",
            "lambda",
            "max_iter",
            "tol",
            "d_model",
            "d_hidden",
            "steps",
            "lr",
            "seed",
            "aux_loss_weight",
        ];
        want.sort();
        assert_eq!(keys, want);
        assert_eq!(v["router"], "ec");
    }

    #[test]
    fn parse_and_reject_unknown() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["router"] = "ec-capped".into();
        let cfg: RunConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(cfg.router, RouterKind::Capped);
        v["extra"] = 1.into();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
        assert!("top3".parse::<RouterKind>().is_err());
        assert_eq!("top2".parse::<RouterKind>().unwrap(), RouterKind::Top2);
    }
}
