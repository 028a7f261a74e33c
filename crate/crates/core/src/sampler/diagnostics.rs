//! Rank-normalized split R-hat, multi-chain effective sample size and
//! Monte Carlo standard error.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, std_normal_quantile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `None` when fewer than two chains or four draws per chain exist.
    pub rhat: Option<f64>,
    pub ess: f64,
    pub mcse: f64,
}

impl ParameterDiagnostics {
    pub fn compute(name: &str, chains: &[Vec<f64>]) -> Self {
        let all: Vec<f64> = chains.concat();
        let mean = stats::mean(&all);
        let sd = stats::variance(&all).sqrt();
        let ess = ess(chains).unwrap_or(f64::NAN);
        ParameterDiagnostics {
            name: name.to_string(),
            mean,
            sd,
            rhat: rhat(chains).ok(),
            ess,
            mcse: sd / ess.sqrt(),
        }
    }
}

/// Splits each chain into halves, dropping the middle draw of odd chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Ratio of pooled to within-chain variance on equal-length chains.
fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let w = chains.iter().map(|c| stats::variance(c)).sum::<f64>() / m;
    let b = n * stats::variance(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Normal scores of the pooled ranks (average ranks for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut flat: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    let s = flat.len();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for item in &flat[i..=j] {
            ranks[item.1] = r;
        }
        i = j + 1;
    }
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for c in chains {
        out.push(
            c.iter()
                .map(|_| {
                    let z = std_normal_quantile((ranks[k] - 0.375) / (s as f64 + 0.25));
                    k += 1;
                    z
                })
                .collect(),
        );
    }
    out
}

/// Split R-hat of equal-length chains without rank normalization.
pub fn split_rhat_columns(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    Ok(basic_rhat(&split_chains(chains)))
}

fn check_chains(chains: &[Vec<f64>]) -> Result<()> {
    if chains.len() < 2 {
        return Err(Error::Diagnostic("R-hat needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostic("R-hat needs equal-length chains of at least four draws".into()));
    }
    Ok(())
}

/// Rank-normalized split R-hat: the larger of the bulk and folded values.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let split = split_chains(chains);
    let bulk = basic_rhat(&rank_normalize(&split));
    let mut all: Vec<f64> = split.concat();
    all.sort_by(f64::total_cmp);
    let median = stats::quantile_sorted(&all, 0.5);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|x| (x - median).abs()).collect())
        .collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    Ok(bulk.max(tail))
}

/// Biased autocovariance at every lag, via FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = stats::mean(x);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (size as f64 * n as f64)).collect()
}

/// Effective sample size from autocorrelations pooled across chains,
/// truncated by Geyer's initial monotone sequence. Chains are split in
/// half when they hold at least eight draws each.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.is_empty() || chains[0].len() < 4 {
        return Err(Error::Diagnostic("ESS needs at least four draws".into()));
    }
    let n0 = chains[0].len();
    if chains.iter().any(|c| c.len() != n0) {
        return Err(Error::Diagnostic("ESS needs equal-length chains".into()));
    }
    let chains = if n0 >= 8 { split_chains(chains) } else { chains.to_vec() };
    let m = chains.len();
    let n = chains[0].len();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let chain_means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let nf = n as f64;
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += stats::variance(&chain_means);
    }
    let total = (m * n) as f64;
    if !(var_plus > 0.0) {
        return Ok(total);
    }
    let mean_acov = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let mut rho = vec![0.0; n + 2];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - mean_acov(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 3 <= max_t {
        let prev = rho[t - 1] + rho[t];
        if rho[t + 1] + rho[t + 2] > prev {
            rho[t + 1] = prev / 2.0;
            rho[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1]).max(1.0 / total.log10());
    Ok(total / tau)
}
