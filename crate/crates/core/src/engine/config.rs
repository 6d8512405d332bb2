use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EngineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Simulate,
    Serve,
}

/// Engine configuration. The JSON form uses these field names verbatim
/// (the total budget is `T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(rename = "T")]
    pub total_budget: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub momentum: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub k_reciprocal: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Embedding width; `None` keeps the base feature width.
    pub d_emb: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    /// Fraction of each epoch's budget given to the INTRA stage. Unspent
    /// INTRA budget moves to INTER unless this is 1.
    pub stage_split: f64,
    /// L2-normalize base features after loading.
    pub normalize: bool,
    /// Pick, ask and re-assign one pair at a time. When false each stage's
    /// pairs are selected up front and asked in order.
    pub interleave: bool,
    /// Re-apply earlier splits and merges to each epoch's fresh clustering.
    pub carry_over: bool,
    pub query_fraction: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            total_budget: 3000,
            epochs: 20,
            alpha: 1.0,
            gamma: 0.1,
            tau: 0.05,
            momentum: 0.2,
            eps: 0.4,
            min_pts: 4,
            k_reciprocal: 30,
            learning_rate: 0.05,
            batch_size: 64,
            d_emb: None,
            seed: 0,
            mode: Mode::Simulate,
            stage_split: 0.5,
            normalize: true,
            interleave: true,
            carry_over: true,
            query_fraction: 0.2,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(EngineError::Config(msg.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be a finite non-negative number");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma must be a finite non-negative number");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive");
        }
        if self.min_pts == 0 || self.k_reciprocal == 0 || self.batch_size == 0 {
            return fail("min_pts, k_reciprocal and batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a finite non-negative number");
        }
        if self.d_emb == Some(0) {
            return fail("d_emb must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.stage_split) {
            return fail("stage_split must lie in [0, 1]");
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return fail("query_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EngineConfig =
            serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::io(path, e))?;
        Self::from_json(&text)
    }

    /// INTRA share of an epoch allowance; odd remainders go to INTRA.
    pub fn intra_share(&self, allowance: usize) -> usize {
        ((allowance as f64 * self.stage_split).ceil() as usize).min(allowance)
    }
}
