//! Sequence-level Shannon entropy from top-k token logprobs.
//!
//! Each emitted token carries its provider-reported top-k alternatives. The
//! alternatives are renormalized with a softmax, the per-token Shannon entropy
//! is taken in bits, and a completion's confidence signal is the arithmetic
//! mean over its tokens. Lower mean entropy means a more concentrated
//! next-token distribution.
//!
//! All entropies in this crate are in bits. `0 · log2 0` is taken as `0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::StepTrace;

/// Largest top-k width accepted anywhere in the crate.
pub const MAX_TOP_K: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("no logprob entries supplied")]
    EmptyInput,
    #[error("logprob at position {index} is not finite ({value})")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("entropy sequence is empty")]
    EmptySequence,
    #[error("per-token entropy at position {index} is invalid ({value})")]
    InvalidEntropy { index: usize, value: f64 },
    #[error("step {step_index} carries no token logprobs")]
    MissingLogprobs { step_index: u32 },
    #[error("token {token_index} has {have} alternatives; need between 1 and {max}")]
    InconsistentK {
        token_index: usize,
        have: usize,
        max: usize,
    },
    #[error("k limit must be between 1 and {MAX_TOP_K}, got {0}")]
    InvalidKLimit(usize),
}

/// One top-k alternative reported for an emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

/// The top-k alternatives for one emitted token, sorted by descending logprob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTokenLogprobs", into = "RawTokenLogprobs")]
pub struct TokenLogprobs {
    entries: Vec<TopLogprob>,
}

#[derive(Serialize, Deserialize)]
struct RawTokenLogprobs {
    topk: Vec<TopLogprob>,
}

impl TryFrom<RawTokenLogprobs> for TokenLogprobs {
    type Error = EntropyError;

    fn try_from(raw: RawTokenLogprobs) -> Result<Self, Self::Error> {
        TokenLogprobs::new(raw.topk)
    }
}

impl From<TokenLogprobs> for RawTokenLogprobs {
    fn from(t: TokenLogprobs) -> Self {
        RawTokenLogprobs { topk: t.entries }
    }
}

impl TokenLogprobs {
    /// Validates and sorts (stable, descending by logprob) the alternatives.
    pub fn new(mut entries: Vec<TopLogprob>) -> Result<Self, EntropyError> {
        if entries.is_empty() {
            return Err(EntropyError::EmptyInput);
        }
        if entries.len() > MAX_TOP_K {
            return Err(EntropyError::InconsistentK {
                token_index: 0,
                have: entries.len(),
                max: MAX_TOP_K,
            });
        }
        if let Some((index, e)) = entries
            .iter()
            .enumerate()
            .find(|(_, e)| !e.logprob.is_finite())
        {
            return Err(EntropyError::NonFiniteInput {
                index,
                value: e.logprob,
            });
        }
        entries.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        Ok(Self { entries })
    }

    /// Builds an entry list from bare logprob values with placeholder token text.
    pub fn from_logprobs(values: &[f64]) -> Result<Self, EntropyError> {
        Self::new(
            values
                .iter()
                .enumerate()
                .map(|(i, &logprob)| TopLogprob {
                    token: format!("<{i}>"),
                    logprob,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[TopLogprob] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.logprob)
    }
}

/// Renormalized probabilities over a token's alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Wraps probabilities that already satisfy the distribution invariants.
    pub fn from_probs(probs: Vec<f64>) -> Option<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return None;
        }
        if (compensated_sum(probs.iter().copied()) - 1.0).abs() > 1e-9 {
            return None;
        }
        Some(Self { probs })
    }
}

/// Per-token and mean entropy for one completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub per_token: Vec<f64>,
    pub mean: f64,
    pub token_count: usize,
    /// Smallest number of alternatives actually used for any token.
    pub min_effective_k: usize,
    /// Tokens that had fewer than the requested `k_limit` alternatives.
    pub short_tokens: usize,
}

/// Softmax of raw logprobs, max-subtracted so large values cannot overflow.
pub fn normalize_logprobs(raw: &[f64]) -> Result<TokenDistribution, EntropyError> {
    if raw.is_empty() {
        return Err(EntropyError::EmptyInput);
    }
    if let Some((index, &value)) = raw.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(EntropyError::NonFiniteInput { index, value });
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&l| (l - max).exp()).collect();
    // The max element contributes exactly 1, so the sum is in [1, k].
    let z = compensated_sum(exps.iter().copied());
    Ok(TokenDistribution {
        probs: exps.into_iter().map(|e| e / z).collect(),
    })
}

/// Shannon entropy in bits.
pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    let h = -compensated_sum(
        dist.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.log2()),
    );
    // Rounding can push a one-hot result to -0.0 or a uniform one a hair past log2 k.
    h.clamp(0.0, (dist.k() as f64).log2())
}

/// Arithmetic mean of per-token entropies for a single completion.
pub fn mean_entropy(per_token: &[f64]) -> Result<f64, EntropyError> {
    if per_token.is_empty() {
        return Err(EntropyError::EmptySequence);
    }
    if let Some((index, &value)) = per_token
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(EntropyError::InvalidEntropy { index, value });
    }
    Ok(compensated_sum(per_token.iter().copied()) / per_token.len() as f64)
}

/// Entropy of one token after keeping its `k_limit` most likely alternatives.
pub fn truncated_token_entropy(token: &TokenLogprobs, k_limit: usize) -> Result<f64, EntropyError> {
    let kept: Vec<f64> = token.logprobs().take(k_limit).collect();
    Ok(token_entropy(&normalize_logprobs(&kept)?))
}

/// Mean entropy of a recorded step, using at most `k_limit` alternatives per token.
///
/// Tokens with fewer than `k_limit` alternatives use what is available; the
/// shortfall is reported in the profile rather than treated as an error.
pub fn profile_completion(step: &StepTrace, k_limit: usize) -> Result<EntropyProfile, EntropyError> {
    if k_limit == 0 || k_limit > MAX_TOP_K {
        return Err(EntropyError::InvalidKLimit(k_limit));
    }
    if step.tokens.is_empty() {
        return Err(EntropyError::MissingLogprobs {
            step_index: step.step_index,
        });
    }
    let mut per_token = Vec::with_capacity(step.tokens.len());
    let mut min_effective_k = usize::MAX;
    let mut short_tokens = 0;
    for (token_index, token) in step.tokens.iter().enumerate() {
        if token.k() == 0 {
            return Err(EntropyError::InconsistentK {
                token_index,
                have: 0,
                max: k_limit,
            });
        }
        let used = token.k().min(k_limit);
        if used < k_limit {
            short_tokens += 1;
        }
        min_effective_k = min_effective_k.min(used);
        per_token.push(truncated_token_entropy(token, k_limit)?);
    }
    let mean = mean_entropy(&per_token)?;
    Ok(EntropyProfile {
        token_count: per_token.len(),
        per_token,
        mean,
        min_effective_k,
        short_tokens,
    })
}

/// Neumaier-compensated summation.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}
