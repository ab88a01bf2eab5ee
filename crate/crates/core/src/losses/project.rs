//! Exact Euclidean projections onto the constraint sets of a loss tree.
//!
//! Applied after every optimizer step and when checkers need feasible random
//! tables. Fixed order: fixed-coordinate, then orthant, then ball, then
//! mean-constraint; the combinations shipped in atoms commute or nearly
//! commute at convergence, and a fixed order keeps runs deterministic.

use nalgebra::{DMatrix, DVector};

use super::{ConstraintKind, FeatureSide};
use crate::features::FeatureTable;

fn rank(kind: &ConstraintKind) -> u8 {
    match kind {
        ConstraintKind::FixedCoordinate { .. } => 0,
        ConstraintKind::NonnegativeOrthant => 1,
        ConstraintKind::Ball2 { .. } => 2,
        ConstraintKind::ZeroMean => 3,
    }
}

/// Projects one table in place.
pub fn project_matrix(m: &mut DMatrix<f64>, kinds: &[ConstraintKind], weights: &DVector<f64>) {
    let mut ordered: Vec<&ConstraintKind> = kinds.iter().collect();
    ordered.sort_by_key(|k| rank(k));
    for kind in ordered {
        match kind {
            ConstraintKind::FixedCoordinate { index, value } => {
                if *index < m.ncols() {
                    for i in 0..m.nrows() {
                        m[(i, *index)] = *value;
                    }
                }
            }
            ConstraintKind::NonnegativeOrthant => {
                for v in m.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            ConstraintKind::Ball2 { radius } => {
                for i in 0..m.nrows() {
                    let n: f64 = (0..m.ncols()).map(|c| m[(i, c)] * m[(i, c)]).sum::<f64>().sqrt();
                    if n > *radius {
                        let s = radius / n;
                        for c in 0..m.ncols() {
                            m[(i, c)] *= s;
                        }
                    }
                }
            }
            ConstraintKind::ZeroMean => {
                let mean = m.transpose() * weights;
                for i in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        m[(i, c)] -= mean[c];
                    }
                }
            }
        }
    }
}

/// Projects a feature-table pair onto every constraint of a loss tree.
pub fn project_tables(
    f: &mut FeatureTable,
    g: &mut FeatureTable,
    constraints: &[(FeatureSide, ConstraintKind)],
    p_x: &DVector<f64>,
    p_y: &DVector<f64>,
) {
    let f_kinds: Vec<ConstraintKind> = constraints
        .iter()
        .filter(|(s, _)| *s == FeatureSide::F)
        .map(|(_, k)| *k)
        .collect();
    let g_kinds: Vec<ConstraintKind> = constraints
        .iter()
        .filter(|(s, _)| *s == FeatureSide::G)
        .map(|(_, k)| *k)
        .collect();
    project_matrix(f.values_mut(), &f_kinds, p_x);
    project_matrix(g.values_mut(), &g_kinds, p_y);
}
