//! Randomized verifiers for the two defining axioms of the loss family.
//!
//! Substitution: composing the features with deterministic relabelings must
//! equal evaluating the original features under the pushforward
//! distribution. Projection: conditionally projecting both features onto a
//! jointly sufficient pair must never increase the loss. Deviations are
//! measured relative to `max(1, magnitude)` so the stated tolerances read as
//! absolute at desk scale and stay meaningful for exponential atoms.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{eval, ExtendedReal, LossError, LossExpr};
use crate::features::{conditional_projection, FeatureTable};
use crate::losses::project::project_tables;
use crate::probability::{pushforward, JointDistribution, SymbolMap};
use crate::sufficiency::{random_sufficient_statistic, Side};
use crate::synth::{random_feature_table, random_surjection, trial_rng, TableStyle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstitutionReport {
    pub trials: usize,
    pub max_rel_dev: f64,
    pub pass: bool,
}

/// Compares `L(φ∘ξ, ψ∘η; P_XY)` against `L(φ, ψ; P_{ξ(X),η(Y)})` over random
/// surjections and random tables.
pub fn check_substitution_axiom(
    l: &LossExpr,
    j: &JointDistribution,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<SubstitutionReport, LossError> {
    let constraints = l.constraints();
    let mut max_rel_dev: f64 = 0.0;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let k = l.dim().unwrap_or_else(|| rng.gen_range(1..=3));
        let style = if t % 2 == 0 { TableStyle::Gaussian } else { TableStyle::CauchyClipped };
        let map_x = random_surjection(&mut rng, j.alphabet_x(), "u");
        let map_y = random_surjection(&mut rng, j.alphabet_y(), "v");
        let image = pushforward(j, &map_x, &map_y);
        let mut phi = random_feature_table(&mut rng, image.alphabet_x(), k, 1.0, style);
        let mut psi = random_feature_table(&mut rng, image.alphabet_y(), k, 1.0, style);
        // Keep hard-constrained atoms on their feasible sets so both sides
        // are finite and the identity is informative.
        project_tables(&mut phi, &mut psi, &constraints, image.p_x(), image.p_y());
        let composed_f = compose_with_map(&phi, &map_x, j, true);
        let composed_g = compose_with_map(&psi, &map_y, j, false);
        let lhs = eval(l, &composed_f, &composed_g, j)?;
        let rhs = eval(l, &phi, &psi, &image)?;
        max_rel_dev = max_rel_dev.max(relative_gap(lhs, rhs));
    }
    Ok(SubstitutionReport {
        trials,
        max_rel_dev,
        pass: max_rel_dev <= tol,
    })
}

/// Rows of `table` pulled back through a symbol map (the image alphabet may
/// have been shrunk by the pushforward, so match by label).
fn compose_with_map(
    table: &FeatureTable,
    map: &SymbolMap,
    j: &JointDistribution,
    x_side: bool,
) -> FeatureTable {
    let source = if x_side { j.alphabet_x() } else { j.alphabet_y() };
    let values = DMatrix::from_fn(source.len(), table.dim(), |i, c| {
        let label = map.target().symbol(map.apply(i));
        let row = table
            .alphabet()
            .index_of(label)
            .expect("strictly positive joints reach every image symbol");
        table.values()[(row, c)]
    });
    FeatureTable::new(source.clone(), values).expect("finite rows")
}

fn relative_gap(a: ExtendedReal, b: ExtendedReal) -> f64 {
    match (a.finite(), b.finite()) {
        (None, None) => 0.0,
        (Some(x), Some(y)) => (x - y).abs() / x.abs().max(y.abs()).max(1.0),
        _ => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub trials: usize,
    /// Trials where the projected pair evaluated strictly above the original.
    pub violations: usize,
    /// Largest positive scaled excess `((lhs - rhs) / max(1, |rhs|))⁺`.
    pub max_excess: f64,
    /// Finite trials with equality within tolerance.
    pub equality_trials: usize,
    /// Equality trials whose pair was not already projection-fixed.
    pub regular_violations: usize,
    pub pass: bool,
    /// `Some(false)` when an equality trial contradicts regularity;
    /// `None` when no equality trial occurred.
    pub regular_evidence: Option<bool>,
}

/// Samples random `(f, g)` and random jointly sufficient `(s, t)` and tests
/// `L(Π f, Π g) <= L(f, g)`; also gathers regularity evidence from equality
/// cases. Draw styles rotate through Gaussian, clipped-Cauchy, `g = 0`, and
/// `f = 0` tables so degenerate equality cases actually occur.
pub fn check_projection_axiom(
    l: &LossExpr,
    j: &JointDistribution,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<ProjectionReport, LossError> {
    let constraints = l.constraints();
    let mut report = ProjectionReport {
        trials,
        violations: 0,
        max_excess: 0.0,
        equality_trials: 0,
        regular_violations: 0,
        pass: true,
        regular_evidence: None,
    };
    for t in 0..trials {
        let mut rng = trial_rng(seed.wrapping_add(1), t as u64);
        let k = l.dim().unwrap_or_else(|| rng.gen_range(1..=3));
        let style = if t % 2 == 0 { TableStyle::Gaussian } else { TableStyle::CauchyClipped };
        let mut f = random_feature_table(&mut rng, j.alphabet_x(), k, 1.0, style);
        let mut g = random_feature_table(&mut rng, j.alphabet_y(), k, 1.0, style);
        match t % 4 {
            2 => g = FeatureTable::zeros(j.alphabet_y().clone(), k),
            3 => f = FeatureTable::zeros(j.alphabet_x().clone(), k),
            _ => {}
        }
        project_tables(&mut f, &mut g, &constraints, j.p_x(), j.p_y());
        let s = random_sufficient_statistic(j, rng.gen(), Side::X);
        let st = random_sufficient_statistic(j, rng.gen(), Side::Y);
        let pf = conditional_projection(&f, &s, &j.marginal_x())?;
        let pg = conditional_projection(&g, &st, &j.marginal_y())?;
        let lhs = eval(l, &pf, &pg, j)?;
        let rhs = eval(l, &f, &g, j)?;
        match (lhs.finite(), rhs.finite()) {
            (_, None) => {} // rhs infinite: inequality holds trivially
            (None, Some(_)) => {
                report.violations += 1;
                report.max_excess = f64::INFINITY;
            }
            (Some(a), Some(b)) => {
                let scale = b.abs().max(1.0);
                let excess = (a - b) / scale;
                if excess > tol {
                    report.violations += 1;
                    report.max_excess = report.max_excess.max(excess);
                } else if excess.abs() <= tol {
                    report.equality_trials += 1;
                    let fixed = (f.values() - pf.values()).amax() <= tol
                        && (g.values() - pg.values()).amax() <= tol;
                    if !fixed {
                        report.regular_violations += 1;
                    }
                }
            }
        }
    }
    report.pass = report.violations == 0;
    report.regular_evidence = if report.equality_trials > 0 {
        Some(report.regular_violations == 0)
    } else {
        None
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{builtin_atoms, trainable_non_d_fixture, FeatureSide, NormPenalty, PairDistance};
    use crate::synth::{random_joint, random_joint_with_ties, trial_rng};

    #[test]
    fn substitution_holds_for_builtin_atoms() {
        let mut rng = trial_rng(40, 0);
        let j = random_joint(&mut rng, 6, 5);
        for (name, l) in builtin_atoms() {
            let report = check_substitution_axiom(&l, &j, 120, 41, 1e-10).unwrap();
            assert!(report.pass, "{name}: dev {}", report.max_rel_dev);
        }
    }

    #[test]
    fn projection_holds_for_builtin_atoms() {
        // Tied conditional rows give the sufficient statistics room to
        // coarsen, so the projection inequality is exercised non-vacuously.
        let mut rng = trial_rng(42, 0);
        let j = random_joint_with_ties(&mut rng, 6, 5);
        for (name, l) in builtin_atoms() {
            let report = check_projection_axiom(&l, &j, 150, 43, 1e-9).unwrap();
            assert!(report.pass, "{name}: violations {}", report.violations);
        }
    }

    #[test]
    fn raw_index_probe_fails_both_axioms() {
        let mut rng = trial_rng(44, 0);
        let j = random_joint_with_ties(&mut rng, 6, 5);
        let l = trainable_non_d_fixture(2);
        let sub = check_substitution_axiom(&l, &j, 200, 45, 1e-10).unwrap();
        assert!(!sub.pass);
        let proj = check_projection_axiom(&l, &j, 400, 46, 1e-9).unwrap();
        assert!(!proj.pass);
    }

    #[test]
    fn neg_h_without_regularizer_shows_non_regular_evidence() {
        // g = 0 makes H vanish identically, so projecting f changes the pair
        // without changing the loss: equality holds at a non-fixed point.
        let mut rng = trial_rng(47, 0);
        let j = random_joint_with_ties(&mut rng, 5, 4);
        let bare = LossExpr::neg_h_score(2);
        let report = check_projection_axiom(&bare, &j, 200, 48, 1e-9).unwrap();
        assert!(report.pass);
        assert_eq!(report.regular_evidence, Some(false));

        // The l2-regularized variant shows no such counterexample.
        let regular = LossExpr::nested_h_l2(2, 0.05);
        let report = check_projection_axiom(&regular, &j, 200, 48, 1e-9).unwrap();
        assert!(report.pass);
        assert_ne!(report.regular_evidence, Some(false));
    }

    #[test]
    fn aggregates_of_passing_atoms_pass() {
        let mut rng = trial_rng(49, 0);
        let j = random_joint(&mut rng, 5, 4);
        let l = LossExpr::Aggregate {
            terms: vec![
                (0.7, LossExpr::PairwiseJoint { k: 2, map: PairDistance::Squared }),
                (1.3, LossExpr::neg_nested_h_score(2)),
                (
                    0.2,
                    LossExpr::NormReg {
                        side: FeatureSide::G,
                        weight: 1.0,
                        penalty: NormPenalty::SquaredL2,
                    },
                ),
            ],
        };
        assert!(check_substitution_axiom(&l, &j, 150, 50, 1e-10).unwrap().pass);
        assert!(check_projection_axiom(&l, &j, 150, 51, 1e-9).unwrap().pass);
    }
}
