//! Sufficiency tests built on exact partition arithmetic.
//!
//! A statistic `s` of `X` is sufficient exactly when symbols it merges share
//! identical conditional rows `P(Y | X = x)`; the partition criterion makes
//! every test here an exact comparison instead of a mutual-information
//! estimate. Joint sufficiency of `(f, g)` is the statement that the CDK
//! factors through the row partitions of `f` and `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdk::cdk_matrix;
use crate::features::{check_alphabet, FeatureError, FeatureTable};
use crate::probability::{Alphabet, Distribution, JointDistribution, ProbabilityError};
use crate::synth::trial_rng;

/// Total-variation tolerance for declaring two conditional rows equal.
pub const CONDITIONAL_ROW_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum SufficiencyError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
    #[error("partition blocks must cover the alphabet exactly")]
    BadPartition,
}

/// Which side of the joint a statistic lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    X,
    Y,
}

/// A partition of an alphabet into disjoint covering blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    alphabet: Alphabet,
    block_of: Vec<usize>,
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds from per-symbol block ids; ids are renumbered in order of first
    /// appearance.
    pub fn from_block_of(alphabet: Alphabet, raw: &[usize]) -> Result<Self, SufficiencyError> {
        if raw.len() != alphabet.len() {
            return Err(SufficiencyError::BadPartition);
        }
        let mut remap: Vec<usize> = Vec::new();
        let mut block_of = Vec::with_capacity(raw.len());
        for &b in raw {
            match remap.iter().position(|&r| r == b) {
                Some(n) => block_of.push(n),
                None => {
                    remap.push(b);
                    block_of.push(remap.len() - 1);
                }
            }
        }
        let mut blocks = vec![Vec::new(); remap.len()];
        for (i, &b) in block_of.iter().enumerate() {
            blocks[b].push(i);
        }
        Ok(Partition {
            alphabet,
            block_of,
            blocks,
        })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of(&self, i: usize) -> usize {
        self.block_of[i]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// True when every block of `self` is contained in a block of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.alphabet != coarser.alphabet {
            return false;
        }
        self.blocks.iter().all(|block| {
            let target = coarser.block_of[block[0]];
            block.iter().all(|&i| coarser.block_of[i] == target)
        })
    }

    /// One-dimensional feature table carrying the block id of each symbol.
    pub fn indicator_table(&self) -> FeatureTable {
        let rows: Vec<Vec<f64>> = self.block_of.iter().map(|&b| vec![b as f64]).collect();
        FeatureTable::from_rows(self.alphabet.clone(), &rows).expect("finite ids")
    }

    pub fn to_json(&self) -> String {
        let raw = PartitionJson {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|&i| self.alphabet.symbol(i).to_string()).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("serializable")
    }

    pub fn from_json(text: &str, alphabet: &Alphabet) -> Result<Self, PartitionIoError> {
        let raw: PartitionJson = serde_json::from_str(text)?;
        let mut block_of = vec![usize::MAX; alphabet.len()];
        for (b, labels) in raw.blocks.iter().enumerate() {
            for label in labels {
                let i = alphabet
                    .index_of(label)
                    .ok_or_else(|| PartitionIoError::UnknownSymbol(label.clone()))?;
                if block_of[i] != usize::MAX {
                    return Err(PartitionIoError::Overlap(label.clone()));
                }
                block_of[i] = b;
            }
        }
        if block_of.iter().any(|&b| b == usize::MAX) {
            return Err(PartitionIoError::Incomplete);
        }
        Ok(Partition::from_block_of(alphabet.clone(), &block_of)
            .expect("lengths checked above"))
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionJson {
    blocks: Vec<Vec<String>>,
}

#[derive(Debug, Error)]
pub enum PartitionIoError {
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("symbol {0:?} appears in two blocks")]
    Overlap(String),
    #[error("blocks do not cover the alphabet")]
    Incomplete,
}

/// Partition of an alphabet induced by the (rounded) rows of a table,
/// restricted to symbols with positive mass under `p`; zero-mass symbols are
/// attached to their row group anyway so the partition stays total.
fn row_partition(t: &FeatureTable) -> Partition {
    Partition::from_block_of(t.alphabet().clone(), &t.row_groups()).expect("groups cover alphabet")
}

/// True iff `f(Z)` is a function of `h(Z)` almost surely under `p`: wherever
/// two positive-mass symbols share an `h` row, they share an `f` row.
pub fn is_abstraction(f: &FeatureTable, h: &FeatureTable, p: &Distribution) -> bool {
    if f.alphabet() != h.alphabet() || p.alphabet() != f.alphabet() {
        return false;
    }
    let fg = f.row_groups();
    let hg = h.row_groups();
    let n_h = hg.iter().copied().max().map_or(0, |m| m + 1);
    let mut f_of_h = vec![usize::MAX; n_h];
    for i in 0..f.len() {
        if p.prob(i) <= 0.0 {
            continue;
        }
        let slot = &mut f_of_h[hg[i]];
        if *slot == usize::MAX {
            *slot = fg[i];
        } else if *slot != fg[i] {
            return false;
        }
    }
    true
}

/// Groups x-symbols (or y-symbols) sharing a conditional row, up to
/// [`CONDITIONAL_ROW_TOL`] in total variation.
pub fn minimal_sufficient_partition(j: &JointDistribution, side: Side) -> Partition {
    let joint = match side {
        Side::X => j.clone(),
        Side::Y => j.swapped(),
    };
    let n = joint.nx();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..joint.ny())
                .map(|l| joint.prob(i, l) / joint.p_x()[i])
                .collect()
        })
        .collect();
    let mut reps: Vec<usize> = Vec::new();
    let mut block_of = vec![0usize; n];
    for i in 0..n {
        let found = reps.iter().position(|&r| tv_distance(&rows[r], &rows[i]) <= CONDITIONAL_ROW_TOL);
        match found {
            Some(b) => block_of[i] = b,
            None => {
                reps.push(i);
                block_of[i] = reps.len() - 1;
            }
        }
    }
    let alphabet = match side {
        Side::X => j.alphabet_x().clone(),
        Side::Y => j.alphabet_y().clone(),
    };
    Partition::from_block_of(alphabet, &block_of).expect("lengths match")
}

fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// True iff the statistic `s` is sufficient for inferring the other side:
/// whenever `s` merges two symbols, their conditional rows agree.
pub fn is_sufficient(j: &JointDistribution, s: &FeatureTable) -> Result<bool, SufficiencyError> {
    is_sufficient_side(j, s, Side::X)
}

pub fn is_sufficient_side(
    j: &JointDistribution,
    s: &FeatureTable,
    side: Side,
) -> Result<bool, SufficiencyError> {
    let expected = match side {
        Side::X => j.alphabet_x(),
        Side::Y => j.alphabet_y(),
    };
    check_alphabet(s, expected, "s vs side alphabet")?;
    let minimal = minimal_sufficient_partition(j, side);
    Ok(row_partition(s).refines(&minimal))
}

/// True iff the CDK value is constant (within `tol`) on every fiber
/// `{(x, y) : f-group(x) = a, g-group(y) = b}`.
pub fn is_jointly_sufficient(
    j: &JointDistribution,
    f: &FeatureTable,
    g: &FeatureTable,
    tol: f64,
) -> Result<bool, SufficiencyError> {
    check_alphabet(f, j.alphabet_x(), "f vs X")?;
    check_alphabet(g, j.alphabet_y(), "g vs Y")?;
    let gamma = cdk_matrix(j);
    let fg = f.row_groups();
    let gg = g.row_groups();
    let nf = fg.iter().copied().max().map_or(0, |m| m + 1);
    let ng = gg.iter().copied().max().map_or(0, |m| m + 1);
    let mut lo = vec![f64::INFINITY; nf * ng];
    let mut hi = vec![f64::NEG_INFINITY; nf * ng];
    for x in 0..j.nx() {
        for y in 0..j.ny() {
            let cell = fg[x] * ng + gg[y];
            lo[cell] = lo[cell].min(gamma.value(x, y));
            hi[cell] = hi[cell].max(gamma.value(x, y));
        }
    }
    Ok(lo
        .iter()
        .zip(&hi)
        .all(|(l, h)| !h.is_finite() || h - l <= tol))
}

/// Monotone one-to-one scalar maps on `[-1, ∞)` used by the factorization
/// check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMap {
    Identity,
    /// `t -> ln(1 + t)`, turning the CDK into pointwise mutual information.
    Log1p,
    /// `t -> scale * t + shift` with `scale != 0`.
    Affine { scale: f64, shift: f64 },
}

impl TauMap {
    pub fn apply(&self, t: f64) -> f64 {
        match self {
            TauMap::Identity => t,
            TauMap::Log1p => (1.0 + t).ln(),
            TauMap::Affine { scale, shift } => scale * t + shift,
        }
    }
}

/// Verdict of the τ-factorization criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauFactorizationReport {
    /// `|τ(γ(x,y)) - fᵀ(x) g(y)| <= tol` everywhere.
    pub holds: bool,
    /// Both `Λ_f` and `Λ_g` have full rank `k`.
    pub ranks_ok: bool,
    /// Conjunction: the pair then consists of minimal sufficient statistics.
    pub minimal_sufficient: bool,
}

pub fn tau_factorization_check(
    j: &JointDistribution,
    f: &FeatureTable,
    g: &FeatureTable,
    tau: TauMap,
    tol: f64,
) -> Result<TauFactorizationReport, SufficiencyError> {
    check_alphabet(f, j.alphabet_x(), "f vs X")?;
    check_alphabet(g, j.alphabet_y(), "g vs Y")?;
    let gamma = cdk_matrix(j);
    let mut holds = f.dim() == g.dim();
    if holds {
        'outer: for x in 0..j.nx() {
            for y in 0..j.ny() {
                let inner: f64 = (0..f.dim())
                    .map(|c| f.values()[(x, c)] * g.values()[(y, c)])
                    .sum();
                if (tau.apply(gamma.value(x, y)) - inner).abs() > tol {
                    holds = false;
                    break 'outer;
                }
            }
        }
    }
    let ranks_ok = weighted_rank(f, j.p_x()) == f.dim() && weighted_rank(g, j.p_y()) == g.dim();
    Ok(TauFactorizationReport {
        holds,
        ranks_ok,
        minimal_sufficient: holds && ranks_ok,
    })
}

/// Rank of `Λ_t` via singular values of the weighted table, with the same
/// `1e-9`-relative cutoff used elsewhere.
fn weighted_rank(t: &FeatureTable, weights: &nalgebra::DVector<f64>) -> usize {
    if t.dim() == 0 {
        return 0;
    }
    let weighted = nalgebra::DMatrix::from_fn(t.len(), t.dim(), |i, c| {
        weights[i].sqrt() * t.values()[(i, c)]
    });
    let sv = crate::numeric::singular_values(&weighted);
    let top = sv.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-9 * top).count()
}

/// A uniformly random sufficient statistic: merges symbols only within
/// minimal-sufficient blocks (a uniform set partition per block), encoded as
/// a block-id table. Sufficiency holds by construction.
pub fn random_sufficient_statistic(j: &JointDistribution, seed: u64, side: Side) -> FeatureTable {
    let minimal = minimal_sufficient_partition(j, side);
    let mut rng = trial_rng(seed, match side {
        Side::X => 0,
        Side::Y => 1,
    });
    let n = minimal.alphabet().len();
    let mut block_of = vec![0usize; n];
    let mut next_id = 0;
    for block in minimal.blocks() {
        let sub = uniform_set_partition(&mut rng, block.len());
        let offset = next_id;
        for (pos, &symbol) in block.iter().enumerate() {
            block_of[symbol] = offset + sub[pos];
        }
        next_id += sub.iter().copied().max().unwrap_or(0) + 1;
    }
    Partition::from_block_of(minimal.alphabet().clone(), &block_of)
        .expect("covers alphabet")
        .indicator_table()
}

/// Uniformly random set partition of `{0..n}` via Bell-number weights:
/// the block containing element 0 has size `j` with probability
/// `C(n-1, j-1) * B(n-j) / B(n)`.
pub(crate) fn uniform_set_partition(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    assert!(n <= 24, "Bell numbers overflow u128 beyond desk scale");
    let bell = bell_numbers(n);
    let binom = binomial_table(n);
    let mut assignment = vec![usize::MAX; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut block = 0;
    while !remaining.is_empty() {
        let m = remaining.len();
        let total = bell[m];
        let mut draw = (rng.gen::<f64>() * total as f64) as u128;
        let mut size = 1;
        for j in 1..=m {
            let weight = binom[m - 1][j - 1] * bell[m - j];
            if draw < weight {
                size = j;
                break;
            }
            draw -= weight;
            size = j;
        }
        // The first remaining element anchors the block; choose size-1 more
        // uniformly at random from the rest.
        let anchor = remaining.remove(0);
        assignment[anchor] = block;
        for _ in 1..size {
            let pick = rng.gen_range(0..remaining.len());
            assignment[remaining.remove(pick)] = block;
        }
        block += 1;
    }
    assignment
}

fn bell_numbers(n: usize) -> Vec<u128> {
    // Bell triangle.
    let mut bell = vec![1u128; n + 1];
    let mut row = vec![1u128];
    for i in 1..=n {
        let mut next = Vec::with_capacity(i + 1);
        next.push(*row.last().unwrap());
        for j in 0..row.len() {
            let v = next[j] + row[j];
            next.push(v);
        }
        bell[i] = next[0];
        row = next;
    }
    bell
}

fn binomial_table(n: usize) -> Vec<Vec<u128>> {
    let mut c = vec![vec![0u128; n + 1]; n + 1];
    for i in 0..=n {
        c[i][0] = 1;
        for j in 1..=i {
            c[i][j] = c[i - 1][j - 1] + if j <= i - 1 { c[i - 1][j] } else { 0 };
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdk::{modal_decompose, DEFAULT_RANK_TOL};
    use crate::features::moments;
    use crate::synth::{dsbs, random_product_joint, trial_rng};
    use nalgebra::DMatrix;

    fn duplicated_row_joint() -> JointDistribution {
        // Rows 1 and 2 share the conditional (0.8, 0.2); row 3 differs.
        let raw = [[0.2, 0.05], [0.2, 0.05], [0.1, 0.4]];
        let total: f64 = raw.iter().flatten().sum();
        JointDistribution::from_rows(
            &["x1", "x2", "x3"],
            &["0", "1"],
            &raw.iter().map(|r| r.iter().map(|v| v / total).collect()).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn abstraction_basics() {
        let a = Alphabet::indexed("z", 3);
        let p = Distribution::uniform(a.clone());
        let injective =
            FeatureTable::from_rows(a.clone(), &[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let constant = FeatureTable::constant(a.clone(), &[7.0]);
        assert!(is_abstraction(&constant, &injective, &p));
        assert!(is_abstraction(&constant, &constant, &p));
        assert!(!is_abstraction(&injective, &constant, &p));
    }

    #[test]
    fn f_star_is_abstraction_of_identity() {
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let identity = FeatureTable::from_rows(
            j.alphabet_x().clone(),
            &[vec![0.0], vec![1.0]],
        )
        .unwrap();
        assert!(is_abstraction(
            md.f_star(),
            &identity,
            &j.marginal_x()
        ));
    }

    #[test]
    fn minimal_partition_blocks() {
        let prod = random_product_joint(&mut trial_rng(1, 0), 4, 3);
        assert_eq!(minimal_sufficient_partition(&prod, Side::X).n_blocks(), 1);

        let j = dsbs(0.5);
        assert_eq!(minimal_sufficient_partition(&j, Side::X).n_blocks(), 2);

        let dup = duplicated_row_joint();
        let p = minimal_sufficient_partition(&dup, Side::X);
        assert_eq!(p.n_blocks(), 2);
        assert_eq!(p.block_of(0), p.block_of(1));
        assert_ne!(p.block_of(0), p.block_of(2));
    }

    #[test]
    fn sufficiency_of_statistics() {
        let j = dsbs(0.5);
        let identity =
            FeatureTable::from_rows(j.alphabet_x().clone(), &[vec![0.0], vec![1.0]]).unwrap();
        assert!(is_sufficient(&j, &identity).unwrap());
        let constant = FeatureTable::constant(j.alphabet_x().clone(), &[0.0]);
        assert!(!is_sufficient(&j, &constant).unwrap());

        let prod = random_product_joint(&mut trial_rng(2, 0), 3, 3);
        let constant = FeatureTable::constant(prod.alphabet_x().clone(), &[0.0]);
        assert!(is_sufficient(&prod, &constant).unwrap());
    }

    #[test]
    fn minimal_partition_encoding_is_sufficient() {
        let dup = duplicated_row_joint();
        let s = minimal_sufficient_partition(&dup, Side::X).indicator_table();
        assert!(is_sufficient(&dup, &s).unwrap());
    }

    #[test]
    fn joint_sufficiency_cases() {
        let j = dsbs(0.5);
        let fx = FeatureTable::from_rows(j.alphabet_x().clone(), &[vec![0.0], vec![1.0]]).unwrap();
        let gy = FeatureTable::from_rows(j.alphabet_y().clone(), &[vec![0.0], vec![1.0]]).unwrap();
        assert!(is_jointly_sufficient(&j, &fx, &gy, 1e-10).unwrap());

        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        assert!(is_jointly_sufficient(&j, md.f_star(), md.g_star(), 1e-9).unwrap());

        let constant = FeatureTable::constant(j.alphabet_x().clone(), &[0.0]);
        assert!(!is_jointly_sufficient(&j, &constant, &gy, 1e-10).unwrap());
    }

    #[test]
    fn tau_factorization_verdicts() {
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        // Exact factorization from the decomposition: f = sigma f*, g = g*.
        let k = md.rank();
        let f = FeatureTable::new(
            j.alphabet_x().clone(),
            DMatrix::from_fn(j.nx(), k, |x, c| md.sigma[c] * md.f_star().values()[(x, c)]),
        )
        .unwrap();
        let g = md.g_star().clone();
        let report = tau_factorization_check(&j, &f, &g, TauMap::Identity, 1e-9).unwrap();
        assert!(report.holds && report.ranks_ok && report.minimal_sufficient);

        // A nonlinear tau breaks the bilinear factorization.
        let report = tau_factorization_check(&j, &f, &g, TauMap::Log1p, 1e-9).unwrap();
        assert!(!report.holds && !report.minimal_sufficient);

        // Duplicate columns are rank-deficient.
        let f2 = FeatureTable::new(
            j.alphabet_x().clone(),
            DMatrix::from_fn(j.nx(), 2, |x, _| f.values()[(x, 0)]),
        )
        .unwrap();
        let g2 = FeatureTable::new(
            j.alphabet_y().clone(),
            DMatrix::from_fn(j.ny(), 2, |y, _| g.values()[(y, 0)]),
        )
        .unwrap();
        let report = tau_factorization_check(&j, &f2, &g2, TauMap::Identity, 1e-9).unwrap();
        assert!(!report.ranks_ok && !report.minimal_sufficient);
    }

    #[test]
    fn random_sufficient_statistics_are_sufficient() {
        let dup = duplicated_row_joint();
        let mut seen_merged = false;
        let mut seen_identity = false;
        for seed in 0..40 {
            let s = random_sufficient_statistic(&dup, seed, Side::X);
            assert!(is_sufficient(&dup, &s).unwrap());
            let groups = s.row_groups();
            if groups[0] == groups[1] {
                seen_merged = true;
            } else {
                seen_identity = true;
            }
        }
        // Both valid coarsenings of the duplicated-row joint appear.
        assert!(seen_merged && seen_identity);

        // DSBS only admits the identity partition.
        let j = dsbs(0.5);
        for seed in 0..10 {
            let s = random_sufficient_statistic(&j, seed, Side::X);
            assert_eq!(s.row_groups(), vec![0, 1]);
        }
    }

    #[test]
    fn uniform_set_partition_is_uniform_for_n3() {
        // 5 partitions of a 3-set; frequencies should be near 1/5 each.
        let mut counts = std::collections::HashMap::new();
        let mut rng = trial_rng(99, 0);
        let trials = 20000;
        for _ in 0..trials {
            let p = uniform_set_partition(&mut rng, 3);
            *counts.entry(p).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 5);
        for &c in counts.values() {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.2).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn moments_and_modes_consistency() {
        // E[f* g*ᵀ] = diag(sigma) for the decomposition of DSBS.
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let m = moments(md.f_star(), md.g_star(), &j).unwrap();
        assert!((m.lambda_fg[(0, 0)] - 0.5).abs() < 1e-12);
        assert!(m.mean_f[0].abs() < 1e-12);
        assert!((m.lambda_f[(0, 0)] - 1.0).abs() < 1e-12);
    }
}
