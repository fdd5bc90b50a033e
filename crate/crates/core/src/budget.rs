//! Fixed-budget call allocation driven by the entropy gate.
//!
//! `alpha` calls of at most `beta` tokens are shared among `gamma` questions.
//! The `delta` confident questions get exactly one call; the remaining
//! `gamma - delta` uncertain questions share `alpha - delta` calls, i.e.
//! `(alpha - delta) / (gamma - delta)` each. The fractional share is
//! integerized by largest remainder, handing the leftover calls to the most
//! uncertain questions first, so the total is conserved exactly.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BudgetError {
    #[error("budget of {alpha} calls cannot cover {gamma} questions once each")]
    BudgetTooSmall { alpha: u64, gamma: u64 },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("plan file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetParams {
    /// Total API calls.
    pub alpha: u64,
    /// Token ceiling per call.
    pub beta: u64,
    /// Total questions.
    pub gamma: u64,
    /// Confident (gated) questions.
    pub delta: u64,
}

impl BudgetParams {
    /// Real-valued calls per uncertain question, `None` when there are none.
    pub fn enhanced_allocation(&self) -> Option<f64> {
        (self.gamma > self.delta)
            .then(|| (self.alpha - self.delta.min(self.alpha)) as f64 / (self.gamma - self.delta) as f64)
    }

    pub fn token_budget(&self) -> u128 {
        u128::from(self.alpha) * u128::from(self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub question_id: String,
    pub calls: u64,
    pub confident: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub params: BudgetParams,
    /// Confident questions first, then uncertain ones in descending-entropy order.
    pub allocations: Vec<Allocation>,
    pub surplus_calls: u64,
}

impl BudgetPlan {
    pub fn calls_for(&self, question_id: &str) -> Option<u64> {
        self.allocations
            .iter()
            .find(|a| a.question_id == question_id)
            .map(|a| a.calls)
    }

    pub fn total_calls(&self) -> u64 {
        self.allocations.iter().map(|a| a.calls).sum()
    }

    /// Writes `question_id,calls` rows.
    pub fn write_csv(&self, w: impl Write) -> Result<(), BudgetError> {
        let mut wtr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| BudgetError::File(e.to_string());
        wtr.write_record(["question_id", "calls"]).map_err(err)?;
        for a in &self.allocations {
            wtr.write_record([a.question_id.as_str(), &a.calls.to_string()])
                .map_err(err)?;
        }
        wtr.flush().map_err(|e| BudgetError::File(e.to_string()))
    }
}

/// Reads a `question_id,calls` plan file into `(id, calls)` pairs.
pub fn read_plan_csv(r: impl Read) -> Result<Vec<(String, u64)>, BudgetError> {
    #[derive(Deserialize)]
    struct Row {
        question_id: String,
        calls: u64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    rdr.deserialize::<Row>()
        .map(|row| {
            row.map(|r| (r.question_id, r.calls))
                .map_err(|e| BudgetError::File(e.to_string()))
        })
        .collect()
}

/// Builds a plan for named questions.
///
/// `uncertain_order` must be sorted by descending step-1 entropy.
pub fn plan_budget(
    alpha: u64,
    beta: u64,
    confident: &[String],
    uncertain_order: &[String],
) -> Result<BudgetPlan, BudgetError> {
    let gamma = (confident.len() + uncertain_order.len()) as u64;
    let delta = confident.len() as u64;
    if gamma == 0 {
        return Err(BudgetError::InvalidPartition("no questions".into()));
    }
    if beta == 0 {
        return Err(BudgetError::InvalidPartition("beta must be positive".into()));
    }
    if alpha < gamma {
        return Err(BudgetError::BudgetTooSmall { alpha, gamma });
    }
    let mut seen = HashSet::with_capacity(gamma as usize);
    if let Some(dup) = confident
        .iter()
        .chain(uncertain_order)
        .find(|id| !seen.insert(id.as_str()))
    {
        return Err(BudgetError::InvalidPartition(format!("duplicate question id {dup:?}")));
    }

    let mut allocations: Vec<Allocation> = confident
        .iter()
        .map(|id| Allocation { question_id: id.clone(), calls: 1, confident: true })
        .collect();
    let uncertain = gamma - delta;
    let pool = alpha - delta;
    let surplus_calls = match pool.checked_div(uncertain) {
        None => alpha - gamma,
        Some(base) => {
            // Every uncertain share is the same real number, so largest-remainder
            // reduces to floor plus one extra call for the first `extra` in order.
            let extra = pool % uncertain;
            allocations.extend(uncertain_order.iter().enumerate().map(|(rank, id)| Allocation {
                question_id: id.clone(),
                calls: base + u64::from((rank as u64) < extra),
                confident: false,
            }));
            0
        }
    };
    Ok(BudgetPlan {
        params: BudgetParams { alpha, beta, gamma, delta },
        allocations,
        surplus_calls,
    })
}

/// Builds a plan from counts alone, naming questions `q0001..`; the first
/// `delta` are confident and the rest are taken as already entropy-ordered.
pub fn plan_budget_anonymous(params: BudgetParams) -> Result<BudgetPlan, BudgetError> {
    if params.delta > params.gamma {
        return Err(BudgetError::InvalidPartition(format!(
            "delta {} exceeds gamma {}",
            params.delta, params.gamma
        )));
    }
    let ids: Vec<String> = (1..=params.gamma).map(|i| format!("q{i:04}")).collect();
    let (confident, uncertain) = ids.split_at(params.delta as usize);
    plan_budget(params.alpha, params.beta, confident, uncertain)
}

/// Independent recount of a plan against its declared budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub total_calls: u64,
    pub surplus_calls: u64,
    pub alpha: u64,
    pub token_ceiling: u128,
    pub token_budget: u128,
    /// `total_calls + surplus_calls - alpha`.
    pub discrepancy: i128,
    pub confident_single_call: bool,
    pub pass: bool,
}

pub fn verify_conservation(plan: &BudgetPlan) -> ConservationReport {
    let total_calls: u64 = plan.allocations.iter().fold(0u64, |acc, a| acc + a.calls);
    let p = plan.params;
    let discrepancy = i128::from(total_calls) + i128::from(plan.surplus_calls) - i128::from(p.alpha);
    let confident_single_call = plan
        .allocations
        .iter()
        .filter(|a| a.confident)
        .all(|a| a.calls == 1);
    let token_ceiling = u128::from(total_calls + plan.surplus_calls) * u128::from(p.beta);
    ConservationReport {
        total_calls,
        surplus_calls: plan.surplus_calls,
        alpha: p.alpha,
        token_ceiling,
        token_budget: p.token_budget(),
        discrepancy,
        confident_single_call,
        pass: discrepancy == 0 && confident_single_call && token_ceiling == p.token_budget(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a3() -> BudgetPlan {
        plan_budget_anonymous(BudgetParams { alpha: 100, beta: 8192, gamma: 50, delta: 30 }).unwrap()
    }

    /// Largest-remainder apportionment of `pool` over `n` equal real shares,
    /// computed from the fractional parts directly.
    fn largest_remainder_oracle(pool: u64, n: u64) -> Vec<u64> {
        let share = pool as f64 / n as f64;
        let mut calls: Vec<u64> = (0..n).map(|_| share.floor() as u64).collect();
        let mut left = pool - calls.iter().sum::<u64>();
        let remainders: Vec<f64> = (0..n).map(|_| share - share.floor()).collect();
        let mut idx: Vec<usize> = (0..n as usize).collect();
        // Stable: equal remainders keep priority order.
        idx.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]));
        for i in idx {
            if left == 0 {
                break;
            }
            calls[i] += 1;
            left -= 1;
        }
        calls
    }

    #[test]
    fn appendix_instance() {
        let plan = a3();
        assert_eq!(plan.params.enhanced_allocation(), Some(3.5));
        let uncertain: Vec<u64> = plan.allocations.iter().filter(|a| !a.confident).map(|a| a.calls).collect();
        assert_eq!(uncertain.len(), 20);
        assert_eq!(uncertain.iter().filter(|&&c| c == 4).count(), 10);
        assert_eq!(uncertain.iter().filter(|&&c| c == 3).count(), 10);
        assert_eq!(uncertain, largest_remainder_oracle(70, 20));
        // Most uncertain first.
        assert_eq!(uncertain[0], 4);
        assert_eq!(uncertain[19], 3);
        let report = verify_conservation(&plan);
        assert_eq!(report.total_calls, 100);
        assert_eq!(report.token_ceiling, 100 * 8192);
        assert!(report.pass);
    }

    #[test]
    fn alpha_equals_gamma() {
        for delta in [0, 7, 20] {
            let plan = plan_budget_anonymous(BudgetParams { alpha: 20, beta: 10, gamma: 20, delta }).unwrap();
            assert!(plan.allocations.iter().all(|a| a.calls == 1));
            assert_eq!(plan.surplus_calls, 0);
        }
    }

    #[test]
    fn all_confident_keeps_surplus() {
        let plan = plan_budget_anonymous(BudgetParams { alpha: 57, beta: 10, gamma: 50, delta: 50 }).unwrap();
        assert!(plan.allocations.iter().all(|a| a.calls == 1));
        assert_eq!(plan.surplus_calls, 7);
        assert_eq!(plan.params.enhanced_allocation(), None);
        assert!(verify_conservation(&plan).pass);
    }

    #[test]
    fn no_confident_questions() {
        let plan = plan_budget_anonymous(BudgetParams { alpha: 100, beta: 1, gamma: 30, delta: 0 }).unwrap();
        let calls: Vec<u64> = plan.allocations.iter().map(|a| a.calls).collect();
        assert_eq!(calls, largest_remainder_oracle(100, 30));
        assert!(verify_conservation(&plan).pass);
    }

    #[test]
    fn tampered_plan_fails() {
        let mut plan = a3();
        plan.allocations[25].calls += 1;
        let report = verify_conservation(&plan);
        assert!(!report.pass);
        assert_eq!(report.discrepancy, 1);

        let mut plan = a3();
        plan.allocations[0].calls = 2;
        plan.allocations[49].calls -= 1;
        let report = verify_conservation(&plan);
        assert_eq!(report.discrepancy, 0);
        assert!(!report.confident_single_call);
        assert!(!report.pass);
    }

    #[test]
    fn errors() {
        assert_eq!(
            plan_budget_anonymous(BudgetParams { alpha: 9, beta: 1, gamma: 10, delta: 0 }),
            Err(BudgetError::BudgetTooSmall { alpha: 9, gamma: 10 })
        );
        assert!(matches!(
            plan_budget_anonymous(BudgetParams { alpha: 20, beta: 1, gamma: 10, delta: 11 }),
            Err(BudgetError::InvalidPartition(_))
        ));
        let ids = ["a".to_string(), "a".to_string()];
        assert!(matches!(plan_budget(5, 1, &ids[..1], &ids[1..]), Err(BudgetError::InvalidPartition(_))));
    }

    #[test]
    fn plan_csv_round_trip() {
        let plan = a3();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        let rows = read_plan_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 50);
        assert_eq!(rows.iter().map(|r| r.1).sum::<u64>(), 100);
        assert_eq!(rows[30], ("q0031".to_string(), 4));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn conservation_and_fairness(gamma in 1u64..400, extra in 0u64..2000, delta_frac in 0.0f64..=1.0) {
            let delta = ((gamma as f64) * delta_frac).floor() as u64;
            let alpha = gamma + extra;
            let plan = plan_budget_anonymous(BudgetParams { alpha, beta: 8192, gamma, delta }).unwrap();
            prop_assert_eq!(plan.total_calls() + plan.surplus_calls, alpha);
            prop_assert!(verify_conservation(&plan).pass);
            let uncertain: Vec<u64> = plan.allocations.iter().filter(|a| !a.confident).map(|a| a.calls).collect();
            prop_assert!(uncertain.windows(2).all(|w| w[0] >= w[1]));
            if let (Some(max), Some(min)) = (uncertain.iter().max(), uncertain.iter().min()) {
                prop_assert!(max - min <= 1);
                prop_assert!(*min >= 1);
            }
        }

        #[test]
        fn delta_sweep_keeps_total(gamma in 1u64..100, extra in 0u64..300) {
            let alpha = gamma + extra;
            for delta in 0..=gamma {
                let plan = plan_budget_anonymous(BudgetParams { alpha, beta: 1, gamma, delta }).unwrap();
                prop_assert_eq!(plan.total_calls() + plan.surplus_calls, alpha);
            }
        }
    }
}
