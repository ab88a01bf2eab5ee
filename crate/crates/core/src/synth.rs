//! Seeded generators for synthetic instances: joints, feature tables, maps.
//!
//! Everything here is deterministic given the seed; suites derive per-trial
//! generators by setting the ChaCha stream to a trial counter, which keeps
//! results independent of execution order.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::cdk::{modal_decompose, ModalDecomposition, DEFAULT_RANK_TOL};
use crate::features::FeatureTable;
use crate::probability::{Alphabet, JointDistribution, SymbolMap};

/// Deterministic generator for trial `counter` of the suite seeded by `seed`.
pub fn trial_rng(seed: u64, counter: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

/// A strictly positive random joint over `nx x ny` alphabets: exponential
/// weights mixed with a uniform floor so no cell collapses toward zero.
pub fn random_joint(rng: &mut impl Rng, nx: usize, ny: usize) -> JointDistribution {
    let mut mass = DMatrix::from_fn(nx, ny, |_, _| -(1.0 - rng.gen::<f64>()).ln());
    let total = mass.sum();
    mass /= total;
    let floor = 0.1 / (nx * ny) as f64;
    mass = mass * 0.9;
    mass.add_scalar_mut(floor);
    JointDistribution::validate(mass, Alphabet::indexed("x", nx), Alphabet::indexed("y", ny))
        .expect("constructed positive and normalized")
}

/// Random joint with dims drawn from `2..=max_nx` x `2..=max_ny`.
pub fn random_joint_sized(rng: &mut impl Rng, max_nx: usize, max_ny: usize) -> JointDistribution {
    let nx = rng.gen_range(2..=max_nx);
    let ny = rng.gen_range(2..=max_ny);
    random_joint(rng, nx, ny)
}

/// Random joint whose CDK spectrum is well separated: all gaps between
/// consecutive singular values (and between the smallest and zero) exceed
/// `min_gap`. Rejection-samples; strengthens dependence when needed by
/// sharpening the matrix.
pub fn random_joint_separated(
    rng: &mut impl Rng,
    nx: usize,
    ny: usize,
    min_gap: f64,
) -> (JointDistribution, ModalDecomposition) {
    loop {
        let base = random_joint(rng, nx, ny);
        // Sharpen: raise entries to a power and renormalize, which spreads
        // the spectrum away from zero while keeping strict positivity.
        let power = 1.0 + rng.gen::<f64>() * 2.0;
        let mut mass = base.mass().map(|p| p.powf(power));
        mass /= mass.sum();
        let j = JointDistribution::validate(
            mass,
            base.alphabet_x().clone(),
            base.alphabet_y().clone(),
        )
        .expect("sharpened joint stays positive");
        let md = match modal_decompose(&j, DEFAULT_RANK_TOL) {
            Ok(md) => md,
            Err(_) => continue,
        };
        if md.rank() == 0 {
            continue;
        }
        let mut gaps_ok = md.sigma[md.rank() - 1] > min_gap && md.sigma[0] < 1.0 - min_gap;
        for w in md.sigma.windows(2) {
            gaps_ok &= w[0] - w[1] > min_gap;
        }
        if gaps_ok {
            return (j, md);
        }
    }
}

/// Random strictly positive joint whose X side carries duplicated
/// conditional rows, so its minimal sufficient partition has non-trivial
/// blocks and sufficient statistics can genuinely coarsen.
pub fn random_joint_with_ties(rng: &mut impl Rng, nx: usize, ny: usize) -> JointDistribution {
    assert!(nx >= 2);
    let n_rows = (nx / 2).max(1);
    let rows: Vec<Vec<f64>> = (0..n_rows)
        .map(|_| {
            let raw: Vec<f64> = (0..ny).map(|_| 0.05 + rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    // Every conditional row is used at least once; remaining symbols pick one
    // at random, creating ties.
    let assignment: Vec<usize> = (0..nx)
        .map(|i| if i < n_rows { i } else { rng.gen_range(0..n_rows) })
        .collect();
    let px: Vec<f64> = {
        let raw: Vec<f64> = (0..nx).map(|_| 0.1 + rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let mass = DMatrix::from_fn(nx, ny, |i, l| px[i] * rows[assignment[i]][l]);
    JointDistribution::validate(mass, Alphabet::indexed("x", nx), Alphabet::indexed("y", ny))
        .expect("rows are conditional distributions")
}

/// Strictly positive random joint with exactly uniform `P_Y` on two symbols,
/// as required by the balanced-label SVM setting.
pub fn random_balanced_binary_joint(rng: &mut impl Rng, nx: usize) -> JointDistribution {
    let mut mass = DMatrix::from_fn(nx, 2, |_, _| 0.05 + rng.gen::<f64>());
    for c in 0..2 {
        let s = mass.column(c).sum();
        for r in 0..nx {
            mass[(r, c)] *= 0.5 / s;
        }
    }
    JointDistribution::validate(
        mass,
        Alphabet::indexed("x", nx),
        Alphabet::new(["-1", "1"]).expect("distinct"),
    )
    .expect("balanced construction is positive and normalized")
}

/// Balanced binary joint with strongly class-separated rows: each x leans
/// toward one label with conditional weight in `(0.75, 0.95)`, giving
/// maximal correlations well above the shrinkage thresholds of regularized
/// margin losses.
pub fn random_peaked_binary_joint(rng: &mut impl Rng, nx: usize) -> JointDistribution {
    let mut mass = DMatrix::zeros(nx, 2);
    for x in 0..nx {
        let lean = 0.75 + 0.2 * rng.gen::<f64>();
        let weight = 0.5 + rng.gen::<f64>();
        let side = rng.gen_bool(0.5);
        mass[(x, 0)] = weight * if side { lean } else { 1.0 - lean };
        mass[(x, 1)] = weight * if side { 1.0 - lean } else { lean };
    }
    // Exact balance: scale each label column to mass 1/2.
    for c in 0..2 {
        let s = mass.column(c).sum();
        for x in 0..nx {
            mass[(x, c)] *= 0.5 / s;
        }
    }
    JointDistribution::validate(
        mass,
        Alphabet::indexed("x", nx),
        Alphabet::new(["-1", "1"]).expect("distinct"),
    )
    .expect("positive and normalized")
}

/// Table styles used by the axiom checkers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableStyle {
    Gaussian,
    /// Heavy-tailed draws (ratio of normals), clipped to `[-10, 10]`.
    CauchyClipped,
}

pub fn random_feature_table(
    rng: &mut impl Rng,
    alphabet: &Alphabet,
    k: usize,
    scale: f64,
    style: TableStyle,
) -> FeatureTable {
    let values = DMatrix::from_fn(alphabet.len(), k, |_, _| match style {
        TableStyle::Gaussian => scale * gaussian(rng),
        TableStyle::CauchyClipped => {
            let denom = gaussian(rng);
            let v = gaussian(rng) / if denom.abs() < 1e-6 { 1e-6 } else { denom };
            (scale * v).clamp(-10.0, 10.0)
        }
    });
    FeatureTable::new(alphabet.clone(), values).expect("finite by construction")
}

/// Standard normal via Box-Muller.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random total (surjective) map from `source` onto a fresh alphabet of size
/// `1..=source.len()`.
pub fn random_surjection(rng: &mut impl Rng, source: &Alphabet, prefix: &str) -> SymbolMap {
    let n = source.len();
    let m = rng.gen_range(1..=n);
    // Guarantee surjectivity: the first m sources cover each target once,
    // then shuffle the assignment.
    let mut assignment: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.gen_range(0..m) }).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        assignment.swap(i, j);
    }
    let target = Alphabet::indexed(prefix, m);
    SymbolMap::new(source, target, assignment).expect("assignment in range")
}

/// The doubly symmetric binary source with correlation `rho` in `(-1, 1)`.
pub fn dsbs(rho: f64) -> JointDistribution {
    let a = (1.0 + rho) / 4.0;
    let b = (1.0 - rho) / 4.0;
    JointDistribution::from_rows(&["0", "1"], &["0", "1"], &[vec![a, b], vec![b, a]])
        .expect("valid for |rho| < 1")
}

/// Product joint with random strictly positive marginals.
pub fn random_product_joint(rng: &mut impl Rng, nx: usize, ny: usize) -> JointDistribution {
    let px: Vec<f64> = (0..nx).map(|_| 0.2 + rng.gen::<f64>()).collect();
    let py: Vec<f64> = (0..ny).map(|_| 0.2 + rng.gen::<f64>()).collect();
    let sx: f64 = px.iter().sum();
    let sy: f64 = py.iter().sum();
    let mass = DMatrix::from_fn(nx, ny, |i, l| (px[i] / sx) * (py[l] / sy));
    JointDistribution::validate(mass, Alphabet::indexed("x", nx), Alphabet::indexed("y", ny))
        .expect("product of positive marginals")
}

/// Deterministic-label empirical distribution: `X` is the sample index set,
/// `Y = label(i)`, each sample has mass `1/n`. Rows carry structural zeros.
pub fn deterministic_label_joint(labels: &[usize], n_classes: usize) -> JointDistribution {
    let n = labels.len();
    assert!(n_classes >= 1 && labels.iter().all(|&c| c < n_classes));
    let mut mass = DMatrix::zeros(n, n_classes);
    for (i, &c) in labels.iter().enumerate() {
        mass[(i, c)] = 1.0 / n as f64;
    }
    JointDistribution::with_support_zeros(
        mass,
        Alphabet::indexed("s", n),
        Alphabet::indexed("c", n_classes),
    )
    .expect("every class must appear at least once")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_joint_is_valid_and_deterministic() {
        let mut a = trial_rng(7, 0);
        let mut b = trial_rng(7, 0);
        let ja = random_joint(&mut a, 5, 4);
        let jb = random_joint(&mut b, 5, 4);
        assert_eq!(ja.mass(), jb.mass());
        assert!(ja.is_strictly_positive());
        assert!((ja.mass().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_spectrum_has_gaps() {
        let mut rng = trial_rng(3, 1);
        let (_, md) = random_joint_separated(&mut rng, 5, 4, 0.03);
        for w in md.sigma.windows(2) {
            assert!(w[0] - w[1] > 0.03);
        }
        assert!(md.sigma[md.rank() - 1] > 0.03);
    }

    #[test]
    fn balanced_binary_marginal() {
        let mut rng = trial_rng(11, 2);
        let j = random_balanced_binary_joint(&mut rng, 6);
        assert!((j.p_y()[0] - 0.5).abs() < 1e-12);
        assert!(j.is_strictly_positive());
    }

    #[test]
    fn surjection_covers_target() {
        for t in 0..20 {
            let mut rng = trial_rng(5, t);
            let a = Alphabet::indexed("x", 6);
            let m = random_surjection(&mut rng, &a, "u");
            let mut hit = vec![false; m.target().len()];
            for i in 0..6 {
                hit[m.apply(i)] = true;
            }
            assert!(hit.iter().all(|&h| h));
        }
    }

    #[test]
    fn deterministic_label_layout() {
        let j = deterministic_label_joint(&[0, 1, 2, 0, 1, 2], 3);
        assert_eq!(j.nx(), 6);
        assert_eq!(j.ny(), 3);
        assert!((j.p_y()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!(!j.is_strictly_positive());
    }
}
