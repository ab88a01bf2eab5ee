//! The (S, T) representation interface and feature-adapter training.
//!
//! `S = f*(X)` and `T = g*(Y)` form a finite interface alphabet (distinct
//! rounded mode rows). Any loss in the family can then be minimized over
//! adapter tables `(φ, ψ)` on the exact interface distribution `P_{S,T}`
//! instead of the raw pair, and the composition `(φ∘f*, ψ∘g*)` attains the
//! same value. A λ-indexed family of adapters supports inference-time
//! hyperparameter tuning by linear interpolation between trained grid points.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdk::ModalDecomposition;
use crate::features::{compose, FeatureError, FeatureTable};
use crate::losses::{eval_smooth, LossError, LossExpr};
use crate::optim::{minimize, minimize_from, MinimizationResult, OptimConfig, OptimError};
use crate::probability::{pushforward, JointDistribution, ProbabilityError, SymbolMap};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
    #[error("lambda grid must be nonempty, sorted, and distinct")]
    BadGrid,
}

/// The exact pushforward of a joint onto its mode-row encodings, together
/// with the per-symbol encoders.
#[derive(Debug, Clone)]
pub struct InterfaceDistribution {
    joint: JointDistribution,
    encode_x: Vec<usize>,
    encode_y: Vec<usize>,
}

impl InterfaceDistribution {
    pub fn joint(&self) -> &JointDistribution {
        &self.joint
    }

    pub fn s_size(&self) -> usize {
        self.joint.nx()
    }

    pub fn t_size(&self) -> usize {
        self.joint.ny()
    }

    /// Index of the S symbol carrying `x`.
    pub fn encode_x(&self, x: usize) -> usize {
        self.encode_x[x]
    }

    pub fn encode_y(&self, y: usize) -> usize {
        self.encode_y[y]
    }
}

/// Builds the interface of `j` from its modal decomposition. The S alphabet
/// labels are the canonical row encodings of `f*` (a rank-zero decomposition
/// yields the single empty-row symbol).
pub fn interface_from_modes(
    j: &JointDistribution,
    md: &ModalDecomposition,
) -> InterfaceDistribution {
    let (ax, gx) = md.f_star().image_alphabet();
    let (ay, gy) = md.g_star().image_alphabet();
    let mx = SymbolMap::new(j.alphabet_x(), ax, gx.clone()).expect("total encoder");
    let my = SymbolMap::new(j.alphabet_y(), ay, gy.clone()).expect("total encoder");
    let joint = pushforward(j, &mx, &my);
    // Strictly positive joints reach every image symbol, so the pushforward
    // does not shrink and group indices remain valid row indices.
    InterfaceDistribution {
        joint,
        encode_x: gx,
        encode_y: gy,
    }
}

/// Trains an adapter pair by minimizing `l` on the interface distribution.
pub fn train_adapter(
    l: &LossExpr,
    iface: &InterfaceDistribution,
    cfg: &OptimConfig,
) -> Result<(FeatureTable, FeatureTable), AdapterError> {
    let res = minimize(l, &iface.joint, cfg)?;
    Ok((res.f, res.g))
}

/// Lifts an adapter trained on S back to a table over X by composing with
/// the modes' row encodings (and likewise for T/Y via `lift_to_y`).
pub fn lift_to_x(
    phi: &FeatureTable,
    md: &ModalDecomposition,
) -> Result<FeatureTable, AdapterError> {
    Ok(compose(phi, md.f_star())?)
}

pub fn lift_to_y(
    psi: &FeatureTable,
    md: &ModalDecomposition,
) -> Result<FeatureTable, AdapterError> {
    Ok(compose(psi, md.g_star())?)
}

/// Adapters trained on a sorted λ grid, with linear interpolation between
/// neighbors (clamped at the ends).
#[derive(Debug, Clone)]
pub struct LambdaAdapterFamily {
    grid: Vec<f64>,
    phis: Vec<FeatureTable>,
    psis: Vec<FeatureTable>,
    values: Vec<f64>,
}

impl LambdaAdapterFamily {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn grid_value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn grid_adapter(&self, i: usize) -> (&FeatureTable, &FeatureTable) {
        (&self.phis[i], &self.psis[i])
    }

    /// The interpolated adapter pair at `lambda`.
    pub fn adapter_at(&self, lambda: f64) -> (FeatureTable, FeatureTable) {
        let n = self.grid.len();
        if lambda <= self.grid[0] {
            return (self.phis[0].clone(), self.psis[0].clone());
        }
        if lambda >= self.grid[n - 1] {
            return (self.phis[n - 1].clone(), self.psis[n - 1].clone());
        }
        let hi = self.grid.iter().position(|&g| g >= lambda).expect("in range");
        let lo = hi - 1;
        let t = (lambda - self.grid[lo]) / (self.grid[hi] - self.grid[lo]);
        let lerp = |a: &FeatureTable, b: &FeatureTable| {
            FeatureTable::new(
                a.alphabet().clone(),
                a.values() * (1.0 - t) + b.values() * t,
            )
            .expect("finite")
        };
        (
            lerp(&self.phis[lo], &self.phis[hi]),
            lerp(&self.psis[lo], &self.psis[hi]),
        )
    }
}

/// Trains one adapter pair per grid point of `loss_family`.
///
/// The first grid point trains with full restarts; subsequent points descend
/// from the previous solution (continuation) and keep whichever of the warm
/// run and a fresh restart run reaches the lower value, preferring the warm
/// path on ties so the family stays continuous in λ.
pub fn train_lambda_family(
    loss_family: impl Fn(f64) -> LossExpr,
    iface: &InterfaceDistribution,
    grid: &[f64],
    cfg: &OptimConfig,
) -> Result<LambdaAdapterFamily, AdapterError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AdapterError::BadGrid);
    }
    let mut phis = Vec::with_capacity(grid.len());
    let mut psis = Vec::with_capacity(grid.len());
    let mut values = Vec::with_capacity(grid.len());
    let mut previous: Option<MinimizationResult> = None;
    for (i, &lambda) in grid.iter().enumerate() {
        let l = loss_family(lambda);
        let fresh = minimize(&l, &iface.joint, &OptimConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() })?;
        let chosen = match &previous {
            Some(prev) => {
                let warm = minimize_from(&l, &iface.joint, &prev.f, &prev.g, cfg)?;
                if warm.value <= fresh.value + 1e-9 {
                    warm
                } else {
                    fresh
                }
            }
            None => fresh,
        };
        phis.push(chosen.f.clone());
        psis.push(chosen.g.clone());
        values.push(chosen.value);
        previous = Some(chosen);
    }
    Ok(LambdaAdapterFamily {
        grid: grid.to_vec(),
        phis,
        psis,
        values,
    })
}

/// Minimizes `objective` over the search grid using interpolated adapters;
/// ties break toward the smaller λ.
pub fn tune_lambda(
    family: &LambdaAdapterFamily,
    mut objective: impl FnMut(&FeatureTable, &FeatureTable, f64) -> f64,
    search: &[f64],
) -> f64 {
    assert!(!search.is_empty());
    let mut best = (f64::INFINITY, f64::INFINITY);
    for &lambda in search {
        let (phi, psi) = family.adapter_at(lambda);
        let v = objective(&phi, &psi, lambda);
        if v < best.0 || (v == best.0 && lambda < best.1) {
            best = (v, lambda);
        }
    }
    best.1
}

/// Loss value of the family's interpolated adapter at `lambda`, evaluated on
/// the interface (smooth part; adapters are feasible by construction).
pub fn family_loss_at(
    family: &LambdaAdapterFamily,
    loss_family: impl Fn(f64) -> LossExpr,
    iface: &InterfaceDistribution,
    lambda: f64,
) -> Result<f64, AdapterError> {
    let (phi, psi) = family.adapter_at(lambda);
    Ok(eval_smooth(&loss_family(lambda), &phi, &psi, &iface.joint)?)
}

#[derive(Serialize, Deserialize)]
struct TableJson {
    symbols: Vec<String>,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BundleJson {
    grid: Vec<f64>,
    phi: Vec<TableJson>,
    psi: Vec<TableJson>,
    interface: InterfaceJson,
}

#[derive(Serialize, Deserialize)]
struct InterfaceJson {
    s: Vec<String>,
    t: Vec<String>,
    p: Vec<Vec<f64>>,
    encode_x: Vec<usize>,
    encode_y: Vec<usize>,
}

fn table_json(t: &FeatureTable) -> TableJson {
    TableJson {
        symbols: t.alphabet().symbols().to_vec(),
        rows: (0..t.len()).map(|i| t.row(i)).collect(),
    }
}

/// Serializes a trained family plus its interface as the adapter bundle
/// schema `{"grid": [...], "phi": [...], "psi": [...], "interface": {...}}`.
pub fn bundle_to_json(family: &LambdaAdapterFamily, iface: &InterfaceDistribution) -> String {
    let j = iface.joint();
    let raw = BundleJson {
        grid: family.grid.clone(),
        phi: family.phis.iter().map(table_json).collect(),
        psi: family.psis.iter().map(table_json).collect(),
        interface: InterfaceJson {
            s: j.alphabet_x().symbols().to_vec(),
            t: j.alphabet_y().symbols().to_vec(),
            p: (0..j.nx())
                .map(|i| (0..j.ny()).map(|l| j.prob(i, l)).collect())
                .collect(),
            encode_x: iface.encode_x.clone(),
            encode_y: iface.encode_y.clone(),
        },
    };
    serde_json::to_string_pretty(&raw).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdk::{modal_decompose, DEFAULT_RANK_TOL};
    use crate::losses::eval;
    use crate::synth::{dsbs, random_product_joint, trial_rng};
    use approx::assert_abs_diff_eq;

    #[test]
    fn interface_of_dsbs_is_relabeled_joint() {
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let iface = interface_from_modes(&j, &md);
        assert_eq!(iface.s_size(), 2);
        assert_eq!(iface.t_size(), 2);
        let a = iface.joint();
        // Masses are a permuted copy of the original joint.
        let mut sorted: Vec<f64> = a.mass().iter().copied().collect();
        sorted.sort_by(|u, v| u.partial_cmp(v).unwrap());
        assert_abs_diff_eq!(sorted[0], 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(sorted[3], 0.375, epsilon = 1e-12);
    }

    #[test]
    fn product_interface_collapses_to_a_point() {
        let j = random_product_joint(&mut trial_rng(21, 0), 4, 3);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(md.rank(), 0);
        let iface = interface_from_modes(&j, &md);
        assert_eq!((iface.s_size(), iface.t_size()), (1, 1));
        assert_abs_diff_eq!(iface.joint().prob(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_rows_shrink_the_interface() {
        let raw = [[0.2, 0.05], [0.2, 0.05], [0.1, 0.4]];
        let total: f64 = raw.iter().flatten().sum();
        let j = JointDistribution::from_rows(
            &["x1", "x2", "x3"],
            &["0", "1"],
            &raw.iter()
                .map(|r| r.iter().map(|v| v / total).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let iface = interface_from_modes(&j, &md);
        assert_eq!(iface.s_size(), 2);
        assert_eq!(iface.encode_x(0), iface.encode_x(1));
    }

    #[test]
    fn substitution_exactness_through_the_interface() {
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let iface = interface_from_modes(&j, &md);
        let l = LossExpr::nested_h_l2(1, 1e-3);
        let cfg = OptimConfig::brisk(1, 3);
        let (phi, psi) = train_adapter(&l, &iface, &cfg).unwrap();
        let lifted_f = lift_to_x(&phi, &md).unwrap();
        let lifted_g = lift_to_y(&psi, &md).unwrap();
        let on_j = eval(&l, &lifted_f, &lifted_g, &j).unwrap().finite().unwrap();
        let on_iface = eval(&l, &phi, &psi, iface.joint()).unwrap().finite().unwrap();
        assert_abs_diff_eq!(on_j, on_iface, epsilon = 1e-12);
    }

    #[test]
    fn single_point_family_degenerates_to_train_adapter() {
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let iface = interface_from_modes(&j, &md);
        let family_fn = |lambda: f64| LossExpr::nested_h_l2(1, lambda);
        let cfg = OptimConfig::brisk(1, 5);
        let family = train_lambda_family(family_fn, &iface, &[0.01], &cfg).unwrap();
        let (phi, psi) = train_adapter(&family_fn(0.01), &iface, &cfg).unwrap();
        assert_eq!(family.grid_adapter(0).0.values(), phi.values());
        assert_eq!(family.grid_adapter(0).1.values(), psi.values());
        assert_eq!(tune_lambda(&family, |_, _, _| 0.0, &[0.01]), 0.01);
    }

    #[test]
    fn rejects_unsorted_grid() {
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let iface = interface_from_modes(&j, &md);
        let err = train_lambda_family(
            |l| LossExpr::nested_h_l2(1, l),
            &iface,
            &[0.1, 0.1],
            &OptimConfig::brisk(1, 5),
        )
        .unwrap_err();
        assert!(matches!(err, AdapterError::BadGrid));
    }

    #[test]
    fn tune_breaks_ties_toward_smaller_lambda() {
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let iface = interface_from_modes(&j, &md);
        let family = train_lambda_family(
            |l| LossExpr::nested_h_l2(1, l),
            &iface,
            &[0.01, 0.1],
            &OptimConfig::brisk(1, 5),
        )
        .unwrap();
        let best = tune_lambda(&family, |_, _, _| 1.0, &[0.01, 0.05, 0.1]);
        assert_eq!(best, 0.01);
    }
}
