//! Training modes as named strategies.
//!
//! A strategy decides which domains are trained on, which constraints it puts
//! on the loss weights, and which feature-alignment loss is used.

use crate::corpus::LabelMap;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::trainer::Hyperparams;
use crate::transfer::{
    la_mmd, param_penalty_matched, vanilla_mmd, LabeledHiddenPool, MmdConfig, MmdOutput, PenaltyOutput,
};

pub trait TransferStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether source-domain batches are drawn at all.
    fn uses_source(&self) -> bool {
        true
    }

    /// Forces the strategy's fixed weights, returning a warning per overridden value.
    fn constrain(&self, hyper: &mut Hyperparams) -> Vec<String>;

    fn feature_loss(
        &self,
        source: &LabeledHiddenPool,
        target: &LabeledHiddenPool,
        config: &MmdConfig,
    ) -> Result<MmdOutput>;

    fn param_loss(&self, source: &CrfParams, target: &CrfParams, map: &LabelMap) -> Result<PenaltyOutput> {
        param_penalty_matched(source, target, map.index_pairs())
    }
}

fn force(hyper_value: &mut f64, value: f64, key: &str, mode: &str, warnings: &mut Vec<String>) {
    if *hyper_value != value {
        warnings.push(format!("mode {mode} forces {key} = {value} (was {hyper_value})"));
        *hyper_value = value;
    }
}

pub struct LaDtl;
pub struct LaMmdOnly;
pub struct CrfL2Only;
pub struct VanillaMmdCrfL2;
pub struct NonTransfer;

impl TransferStrategy for LaDtl {
    fn name(&self) -> &'static str {
        "la_dtl"
    }

    fn constrain(&self, _: &mut Hyperparams) -> Vec<String> {
        Vec::new()
    }

    fn feature_loss(&self, s: &LabeledHiddenPool, t: &LabeledHiddenPool, c: &MmdConfig) -> Result<MmdOutput> {
        la_mmd(s, t, c)
    }
}

impl TransferStrategy for LaMmdOnly {
    fn name(&self) -> &'static str {
        "la_mmd_only"
    }

    fn constrain(&self, hyper: &mut Hyperparams) -> Vec<String> {
        let mut w = Vec::new();
        force(&mut hyper.beta, 0.0, "beta", self.name(), &mut w);
        w
    }

    fn feature_loss(&self, s: &LabeledHiddenPool, t: &LabeledHiddenPool, c: &MmdConfig) -> Result<MmdOutput> {
        la_mmd(s, t, c)
    }
}

impl TransferStrategy for CrfL2Only {
    fn name(&self) -> &'static str {
        "crf_l2_only"
    }

    fn constrain(&self, hyper: &mut Hyperparams) -> Vec<String> {
        let mut w = Vec::new();
        force(&mut hyper.alpha, 0.0, "alpha", self.name(), &mut w);
        w
    }

    fn feature_loss(&self, s: &LabeledHiddenPool, t: &LabeledHiddenPool, c: &MmdConfig) -> Result<MmdOutput> {
        la_mmd(s, t, c)
    }
}

impl TransferStrategy for VanillaMmdCrfL2 {
    fn name(&self) -> &'static str {
        "vanilla_mmd_crf_l2"
    }

    fn constrain(&self, _: &mut Hyperparams) -> Vec<String> {
        Vec::new()
    }

    fn feature_loss(&self, s: &LabeledHiddenPool, t: &LabeledHiddenPool, c: &MmdConfig) -> Result<MmdOutput> {
        vanilla_mmd(s, t, c)
    }
}

impl TransferStrategy for NonTransfer {
    fn name(&self) -> &'static str {
        "non_transfer"
    }

    fn uses_source(&self) -> bool {
        false
    }

    fn constrain(&self, hyper: &mut Hyperparams) -> Vec<String> {
        let mut w = Vec::new();
        force(&mut hyper.alpha, 0.0, "alpha", self.name(), &mut w);
        force(&mut hyper.beta, 0.0, "beta", self.name(), &mut w);
        // ε is meaningless without source batches; reset silently
        hyper.epsilon = 0.0;
        w
    }

    fn feature_loss(&self, s: &LabeledHiddenPool, t: &LabeledHiddenPool, c: &MmdConfig) -> Result<MmdOutput> {
        la_mmd(s, t, c)
    }
}

pub struct StrategyRegistry {
    strategies: Vec<Box<dyn TransferStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = StrategyRegistry::empty();
        r.register(Box::new(LaDtl));
        r.register(Box::new(LaMmdOnly));
        r.register(Box::new(CrfL2Only));
        r.register(Box::new(VanillaMmdCrfL2));
        r.register(Box::new(NonTransfer));
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry { strategies: Vec::new() }
    }

    /// Adds a strategy, replacing any registered under the same name.
    pub fn register(&mut self, strategy: Box<dyn TransferStrategy>) {
        self.strategies.retain(|s| s.name() != strategy.name());
        self.strategies.push(strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn TransferStrategy> {
        self.strategies
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{name}`; expected one of {}",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_registered() {
        let r = StrategyRegistry::default();
        assert_eq!(
            r.names(),
            [
                "la_dtl",
                "la_mmd_only",
                "crf_l2_only",
                "vanilla_mmd_crf_l2",
                "non_transfer"
            ]
        );
        assert!(matches!(r.get("la-dtl"), Err(Error::Config(_))));
    }

    #[test]
    fn constraints_force_weights() {
        let r = StrategyRegistry::default();
        let mut h = Hyperparams::default();
        let w = r.get("la_mmd_only").unwrap().constrain(&mut h);
        assert_eq!(h.beta, 0.0);
        assert_eq!(w.len(), 1);
        assert!(r.get("la_mmd_only").unwrap().constrain(&mut h).is_empty());

        let mut h = Hyperparams::default();
        r.get("non_transfer").unwrap().constrain(&mut h);
        assert_eq!((h.alpha, h.beta, h.epsilon), (0.0, 0.0, 0.0));
        let mut h = Hyperparams::default();
        assert!(r.get("la_dtl").unwrap().constrain(&mut h).is_empty());
        assert_eq!(h, Hyperparams::default());
    }
}
