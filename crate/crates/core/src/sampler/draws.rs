use serde::{Deserialize, Serialize};

use super::diagnostics::{ess, rhat, ParameterDiagnostics};
use super::nuts::TransitionInfo;
use crate::error::{Error, Result};
use crate::stats;

/// Post-warmup draws in constrained space, one row per draw.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub chain_ids: Vec<usize>,
    pub accept_stats: Vec<f64>,
    pub divergences: Vec<bool>,
    pub tree_depths: Vec<usize>,
    pub n_chains: usize,
    pub step_sizes: Vec<f64>,
    #[serde(skip)]
    pub inv_metrics: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>, n_chains: usize) -> Self {
        PosteriorDraws {
            names,
            n_chains,
            ..Default::default()
        }
    }

    pub(crate) fn push(&mut self, chain: usize, values: Vec<f64>, info: TransitionInfo) {
        self.values.push(values);
        self.chain_ids.push(chain);
        self.accept_stats.push(info.accept_stat);
        self.divergences.push(info.divergent);
        self.tree_depths.push(info.depth);
    }

    /// Appends a draw read back from storage.
    pub fn push_row(&mut self, chain: usize, values: Vec<f64>, accept_stat: f64, divergent: bool, tree_depth: usize) {
        self.values.push(values);
        self.chain_ids.push(chain);
        self.accept_stats.push(accept_stat);
        self.divergences.push(divergent);
        self.tree_depths.push(tree_depth);
        self.n_chains = self.n_chains.max(chain + 1);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let k = self.index_of(name)?;
        Ok(self.column_at(k))
    }

    pub fn column_at(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[k]).collect()
    }

    /// Draws of parameter `k` split by chain.
    pub fn chains_at(&self, k: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n_chains];
        for (row, &c) in self.values.iter().zip(&self.chain_ids) {
            out[c].push(row[k]);
        }
        out.retain(|c| !c.is_empty());
        out
    }

    pub fn mean(&self, name: &str) -> Result<f64> {
        Ok(stats::mean(&self.column(name)?))
    }

    pub fn rhat(&self, name: &str) -> Result<f64> {
        rhat(&self.chains_at(self.index_of(name)?))
    }

    pub fn ess(&self, name: &str) -> Result<f64> {
        ess(&self.chains_at(self.index_of(name)?))
    }

    pub fn n_divergent(&self) -> usize {
        self.divergences.iter().filter(|&&d| d).count()
    }

    /// Summary of every parameter selected by `keep`.
    pub fn summarize(&self, keep: impl Fn(&str) -> bool) -> Vec<ParameterDiagnostics> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| keep(n))
            .map(|(k, name)| ParameterDiagnostics::compute(name, &self.chains_at(k)))
            .collect()
    }
}
