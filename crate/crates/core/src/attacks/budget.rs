use serde::{Deserialize, Serialize};

use crate::data::DataRange;
use crate::error::Result;
use crate::tensor::Tensor;

/// Slack for f32 rounding in `x0 + clip(x - x0)`.
pub const BUDGET_TOLERANCE: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub pass: bool,
    pub max_deviation: f32,
    /// Flat index of the largest deviation.
    pub worst_index: Option<usize>,
    /// Flat indices whose deviation exceeds the budget.
    pub budget_violations: Vec<usize>,
    /// Flat indices outside the data range.
    pub range_violations: Vec<usize>,
}

/// Checks `‖x_adv − x0‖_∞ ≤ epsilon` and data-range validity.
pub fn verify_budget(x0: &Tensor, x_adv: &Tensor, epsilon: f32, range: DataRange) -> Result<BudgetReport> {
    x0.reshape(x_adv.shape())?;
    let mut max_deviation = 0.0f32;
    let mut worst_index = None;
    let mut budget_violations = Vec::new();
    let mut range_violations = Vec::new();
    for (i, (&a, &b)) in x0.data().iter().zip(x_adv.data()).enumerate() {
        let dev = (b - a).abs();
        if dev > max_deviation || dev.is_nan() {
            max_deviation = dev;
            worst_index = Some(i);
        }
        if !(dev <= epsilon + BUDGET_TOLERANCE) {
            budget_violations.push(i);
        }
        if !range.contains(b) {
            range_violations.push(i);
        }
    }
    Ok(BudgetReport {
        pass: budget_violations.is_empty() && range_violations.is_empty(),
        max_deviation,
        worst_index,
        budget_violations,
        range_violations,
    })
}
