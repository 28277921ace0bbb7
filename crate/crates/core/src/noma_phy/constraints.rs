use serde::{Deserialize, Serialize};

use super::rate::Allocation;

/// One violated constraint of the allocation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// Total transmit power of an SU above its budget.
    PowerBudget { su: usize, total: f64, p_max: f64 },
    NegativePower { su: usize, subchannel: usize, power: f64 },
    TooManyUsers { subchannel: usize, count: usize, max: usize },
    ChannelCap { su: usize, subchannel: usize, power: f64, cap: f64 },
    /// Membership or decoding order disagrees with the power matrix.
    Inconsistent { subchannel: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub violations: Vec<Violation>,
}

impl ConstraintReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

const TOL: f64 = 1e-9;

/// Checks the budget, nonnegativity, multiplexing and per-subchannel cap
/// constraints, collecting every violation.
pub fn check_constraints(
    alloc: &Allocation,
    max_users: usize,
    p_max: f64,
    per_channel_caps: &[f64],
) -> ConstraintReport {
    let mut violations = Vec::new();
    for (n, row) in alloc.powers.iter().enumerate() {
        let total: f64 = row.iter().filter(|p| **p > 0.0).sum();
        if total > p_max * (1.0 + TOL) {
            violations.push(Violation::PowerBudget { su: n, total, p_max });
        }
        for (k, &p) in row.iter().enumerate() {
            if p < 0.0 || p.is_nan() {
                violations.push(Violation::NegativePower {
                    su: n,
                    subchannel: k,
                    power: p,
                });
            }
            if let Some(&cap) = per_channel_caps.get(k) {
                if p > cap * (1.0 + TOL) {
                    violations.push(Violation::ChannelCap {
                        su: n,
                        subchannel: k,
                        power: p,
                        cap,
                    });
                }
            }
        }
    }
    for (k, members) in alloc.membership.iter().enumerate() {
        if members.len() > max_users {
            violations.push(Violation::TooManyUsers {
                subchannel: k,
                count: members.len(),
                max: max_users,
            });
        }
        let expected: Vec<usize> = (0..alloc.num_sus())
            .filter(|&n| alloc.powers[n][k] > 0.0)
            .collect();
        let mut sorted = members.clone();
        sorted.sort_unstable();
        if sorted != expected {
            violations.push(Violation::Inconsistent {
                subchannel: k,
                detail: "membership differs from positive powers".into(),
            });
        }
        let mut order = alloc.sic_orders.get(k).cloned().unwrap_or_default();
        order.sort_unstable();
        if order != expected {
            violations.push(Violation::Inconsistent {
                subchannel: k,
                detail: "decoding order is not a permutation of the members".into(),
            });
        }
    }
    ConstraintReport { violations }
}
