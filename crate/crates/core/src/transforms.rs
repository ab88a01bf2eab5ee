//! Dependence-preserving transformations: randomized, decodable alphabet
//! expansions driven by side randomness.
//!
//! A side transform draws `Z ~ P(Z | X)` and maps `(x, z)` to a fresh symbol
//! `x̂` whose decoder recovers `x` uniquely. Applying one transform per side
//! leaves the CDK invariant up to decoding, which [`verify_cdk_invariance`]
//! checks exactly.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdk::cdk_matrix;
use crate::probability::{Alphabet, JointDistribution, ProbabilityError};

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("conditional row {row} sums to {sum}, expected 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("map is undefined at positive-probability pair (x={x}, z={z})")]
    UndefinedPair { x: String, z: usize },
    #[error("target {target} is reachable from distinct sources {a} and {b}")]
    NotDecodable { target: String, a: String, b: String },
    #[error("target {0} is never reachable")]
    UnreachableTarget(String),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("transform source alphabet does not match distribution")]
    AlphabetMismatch,
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
}

/// One side of a dependence-preserving transformation.
#[derive(Debug, Clone)]
pub struct SideTransform {
    source: Alphabet,
    p_z_given_x: DMatrix<f64>,
    target: Alphabet,
    /// `xi[x][z] = Some(target index)` wherever `P(z | x) > 0`.
    xi: Vec<Vec<Option<usize>>>,
    /// `decoder[target index] = source index`.
    decoder: Vec<usize>,
}

impl SideTransform {
    /// Validates row-stochasticity, totality of `xi` on positive-probability
    /// pairs, decodability, and decoder consistency.
    pub fn new(
        source: Alphabet,
        p_z_given_x: DMatrix<f64>,
        target: Alphabet,
        xi: Vec<Vec<Option<usize>>>,
        decoder: Vec<usize>,
    ) -> Result<Self, TransformError> {
        let nx = source.len();
        let nz = p_z_given_x.ncols();
        assert_eq!(p_z_given_x.nrows(), nx, "conditional rows match source");
        assert_eq!(xi.len(), nx);
        assert!(xi.iter().all(|r| r.len() == nz));
        assert_eq!(decoder.len(), target.len());
        for x in 0..nx {
            let sum = p_z_given_x.row(x).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(TransformError::NotRowStochastic { row: x, sum });
            }
        }
        let mut reachable = vec![false; target.len()];
        for x in 0..nx {
            for z in 0..nz {
                if p_z_given_x[(x, z)] > 0.0 {
                    let t = xi[x][z].ok_or_else(|| TransformError::UndefinedPair {
                        x: source.symbol(x).to_string(),
                        z,
                    })?;
                    reachable[t] = true;
                    if decoder[t] != x {
                        return Err(TransformError::NotDecodable {
                            target: target.symbol(t).to_string(),
                            a: source.symbol(decoder[t]).to_string(),
                            b: source.symbol(x).to_string(),
                        });
                    }
                }
            }
        }
        if let Some(t) = reachable.iter().position(|&r| !r) {
            return Err(TransformError::UnreachableTarget(
                target.symbol(t).to_string(),
            ));
        }
        Ok(SideTransform {
            source,
            p_z_given_x,
            target,
            xi,
            decoder,
        })
    }

    pub fn source_alphabet(&self) -> &Alphabet {
        &self.source
    }

    pub fn target_alphabet(&self) -> &Alphabet {
        &self.target
    }

    pub fn z_size(&self) -> usize {
        self.p_z_given_x.ncols()
    }

    pub fn conditional(&self) -> &DMatrix<f64> {
        &self.p_z_given_x
    }

    /// The unique source symbol behind a target symbol.
    pub fn decode(&self, xhat: &str) -> Result<&str, TransformError> {
        let t = self
            .target
            .index_of(xhat)
            .ok_or_else(|| TransformError::UnknownSymbol(xhat.to_string()))?;
        Ok(self.source.symbol(self.decoder[t]))
    }

    pub fn decode_index(&self, t: usize) -> usize {
        self.decoder[t]
    }

    /// `P(x̂ | x)`: total probability of zs steering x into x̂.
    pub fn transition(&self, x: usize, t: usize) -> f64 {
        (0..self.z_size())
            .filter(|&z| self.xi[x][z] == Some(t))
            .map(|z| self.p_z_given_x[(x, z)])
            .sum()
    }
}

/// A transform per side; `Z` depends only on `X` and `W` only on `Y`, so the
/// Markov structure `Z - X - Y - W` holds by construction.
#[derive(Debug, Clone)]
pub struct DptPair {
    pub x_side: SideTransform,
    pub y_side: SideTransform,
}

/// Draws a random dependence-preserving transformation for `j`.
///
/// Per side, with probability one half the degenerate case (|Z| = 1 composed
/// with a pure relabeling); otherwise |Z| is uniform on `1..=max_expansion`,
/// the conditional rows come from a flat simplex, and every `(x, z)` pair
/// receives a fresh target symbol `parent#index`, so decodability holds by
/// construction. Target alphabet order is shuffled either way.
pub fn random_dpt(j: &JointDistribution, seed: u64, max_expansion: usize) -> DptPair {
    assert!(max_expansion >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let x_side = random_side(&mut rng, j.alphabet_x(), max_expansion);
    rng.set_stream(1);
    let y_side = random_side(&mut rng, j.alphabet_y(), max_expansion);
    DptPair { x_side, y_side }
}

fn random_side(rng: &mut ChaCha12Rng, source: &Alphabet, max_expansion: usize) -> SideTransform {
    let n = source.len();
    let degenerate = rng.gen_bool(0.5);
    let nz = if degenerate { 1 } else { rng.gen_range(1..=max_expansion) };
    let p_z_given_x = if nz == 1 {
        DMatrix::from_element(n, 1, 1.0)
    } else {
        // Flat (Dirichlet(1,...,1)) simplex sampler per row.
        normalize_rows(DMatrix::from_fn(n, nz, |_, _| -(1.0 - rng.gen::<f64>()).ln()))
    };

    // Fresh target per (x, z): labels `parent#index`.
    let mut labels: Vec<String> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    let mut xi = vec![vec![None; nz]; n];
    for x in 0..n {
        for z in 0..nz {
            let label = format!("{}#{z}", source.symbol(x));
            xi[x][z] = Some(labels.len());
            labels.push(label);
            owners.push(x);
        }
    }
    // Shuffle the target order; remap xi and the decoder accordingly.
    let m = labels.len();
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let mut position = vec![0usize; m];
    for (new_pos, &old) in perm.iter().enumerate() {
        position[old] = new_pos;
    }
    let shuffled_labels: Vec<String> = perm.iter().map(|&old| labels[old].clone()).collect();
    let decoder: Vec<usize> = perm.iter().map(|&old| owners[old]).collect();
    for row in xi.iter_mut() {
        for cell in row.iter_mut() {
            *cell = cell.map(|old| position[old]);
        }
    }
    let target = Alphabet::new(shuffled_labels).expect("fresh labels distinct");
    SideTransform::new(source.clone(), p_z_given_x, target, xi, decoder)
        .expect("construction satisfies decodability")
}

fn normalize_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for r in 0..m.nrows() {
        let s = m.row(r).sum();
        for c in 0..m.ncols() {
            m[(r, c)] /= s;
        }
    }
    m
}

/// Exact image distribution
/// `P(x̂, ŷ) = Σ_{x,z,y,w} P(x,y) P(z|x) P(w|y) [ξ(x,z)=x̂][η(y,w)=ŷ]`,
/// with zero-mass target symbols pruned.
pub fn apply_dpt(j: &JointDistribution, dpt: &DptPair) -> Result<JointDistribution, TransformError> {
    if dpt.x_side.source != *j.alphabet_x() || dpt.y_side.source != *j.alphabet_y() {
        return Err(TransformError::AlphabetMismatch);
    }
    let (tx, ty) = (dpt.x_side.target.len(), dpt.y_side.target.len());
    let mut mass = DMatrix::zeros(tx, ty);
    for x in 0..j.nx() {
        for z in 0..dpt.x_side.z_size() {
            let pz = dpt.x_side.p_z_given_x[(x, z)];
            if pz == 0.0 {
                continue;
            }
            let a = dpt.x_side.xi[x][z].expect("defined on positive pairs");
            for y in 0..j.ny() {
                let pxy = j.prob(x, y);
                if pxy == 0.0 {
                    continue;
                }
                for w in 0..dpt.y_side.z_size() {
                    let pw = dpt.y_side.p_z_given_x[(y, w)];
                    if pw == 0.0 {
                        continue;
                    }
                    let b = dpt.y_side.xi[y][w].expect("defined on positive pairs");
                    mass[(a, b)] += pxy * pz * pw;
                }
            }
        }
    }
    let live_rows: Vec<usize> = (0..tx).filter(|&i| mass.row(i).sum() > 0.0).collect();
    let live_cols: Vec<usize> = (0..ty).filter(|&c| mass.column(c).sum() > 0.0).collect();
    let shrunk = DMatrix::from_fn(live_rows.len(), live_cols.len(), |a, b| {
        mass[(live_rows[a], live_cols[b])]
    });
    let ax = Alphabet::new(live_rows.iter().map(|&i| dpt.x_side.target.symbol(i)))?;
    let ay = Alphabet::new(live_cols.iter().map(|&c| dpt.y_side.target.symbol(c)))?;
    Ok(JointDistribution::with_support_zeros(shrunk, ax, ay)?)
}

/// Result of the CDK-invariance verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub max_abs_dev: f64,
    pub pass: bool,
}

/// Verifies `γ̂(x̂, ŷ) = γ(decode x̂, decode ŷ)` over all transformed cells.
pub fn verify_cdk_invariance(
    j: &JointDistribution,
    dpt: &DptPair,
    tol: f64,
) -> Result<InvarianceReport, TransformError> {
    let transformed = apply_dpt(j, dpt)?;
    let gamma = cdk_matrix(j);
    let gamma_hat = cdk_matrix(&transformed);
    let mut max_abs_dev: f64 = 0.0;
    for a in 0..transformed.nx() {
        let x = j
            .alphabet_x()
            .require(dpt.x_side.decode(transformed.alphabet_x().symbol(a))?)?;
        for b in 0..transformed.ny() {
            let y = j
                .alphabet_y()
                .require(dpt.y_side.decode(transformed.alphabet_y().symbol(b))?)?;
            max_abs_dev = max_abs_dev.max((gamma_hat.value(a, b) - gamma.value(x, y)).abs());
        }
    }
    Ok(InvarianceReport {
        max_abs_dev,
        pass: max_abs_dev <= tol,
    })
}

#[derive(Serialize, Deserialize)]
struct SideJson {
    z_size: usize,
    p_z_given_x: Vec<Vec<f64>>,
    xi: BTreeMap<String, String>,
    decoder: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct DptJson {
    x_side: SideJson,
    y_side: SideJson,
}

#[derive(Debug, Error)]
pub enum DptIoError {
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
    #[error("bad transform: {0}")]
    Bad(String),
    #[error(transparent)]
    Invalid(#[from] TransformError),
}

impl SideTransform {
    fn to_json_parts(&self) -> SideJson {
        let mut xi = BTreeMap::new();
        for x in 0..self.source.len() {
            for z in 0..self.z_size() {
                if let Some(t) = self.xi[x][z] {
                    if self.p_z_given_x[(x, z)] > 0.0 {
                        xi.insert(
                            format!("{},{z}", self.source.symbol(x)),
                            self.target.symbol(t).to_string(),
                        );
                    }
                }
            }
        }
        let decoder = (0..self.target.len())
            .map(|t| {
                (
                    self.target.symbol(t).to_string(),
                    self.source.symbol(self.decoder[t]).to_string(),
                )
            })
            .collect();
        SideJson {
            z_size: self.z_size(),
            p_z_given_x: (0..self.source.len())
                .map(|x| (0..self.z_size()).map(|z| self.p_z_given_x[(x, z)]).collect())
                .collect(),
            xi,
            decoder,
        }
    }

    fn from_json_parts(raw: SideJson, source: &Alphabet) -> Result<Self, DptIoError> {
        let nx = source.len();
        if raw.p_z_given_x.len() != nx || raw.p_z_given_x.iter().any(|r| r.len() != raw.z_size) {
            return Err(DptIoError::Bad("conditional shape mismatch".into()));
        }
        let p = DMatrix::from_fn(nx, raw.z_size, |x, z| raw.p_z_given_x[x][z]);
        let mut target_labels: Vec<String> = Vec::new();
        let mut xi = vec![vec![None; raw.z_size]; nx];
        for (key, label) in &raw.xi {
            let (xs, zs) = key
                .rsplit_once(',')
                .ok_or_else(|| DptIoError::Bad(format!("bad xi key {key:?}")))?;
            let x = source
                .index_of(xs)
                .ok_or_else(|| DptIoError::Bad(format!("unknown source {xs:?}")))?;
            let z: usize = zs
                .parse()
                .map_err(|_| DptIoError::Bad(format!("bad z index {zs:?}")))?;
            if z >= raw.z_size {
                return Err(DptIoError::Bad(format!("z index {z} out of range")));
            }
            let t = match target_labels.iter().position(|l| l == label) {
                Some(t) => t,
                None => {
                    target_labels.push(label.clone());
                    target_labels.len() - 1
                }
            };
            xi[x][z] = Some(t);
        }
        let target = Alphabet::new(target_labels.clone()).map_err(TransformError::from)?;
        let mut decoder = vec![usize::MAX; target.len()];
        for (t_label, x_label) in &raw.decoder {
            let t = target
                .index_of(t_label)
                .ok_or_else(|| DptIoError::Bad(format!("decoder names unknown target {t_label:?}")))?;
            decoder[t] = source
                .index_of(x_label)
                .ok_or_else(|| DptIoError::Bad(format!("decoder names unknown source {x_label:?}")))?;
        }
        if decoder.iter().any(|&d| d == usize::MAX) {
            return Err(DptIoError::Bad("decoder does not cover all targets".into()));
        }
        Ok(SideTransform::new(source.clone(), p, target, xi, decoder)?)
    }
}

impl DptPair {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DptJson {
            x_side: self.x_side.to_json_parts(),
            y_side: self.y_side.to_json_parts(),
        })
        .expect("serializable")
    }

    pub fn from_json(text: &str, ax: &Alphabet, ay: &Alphabet) -> Result<Self, DptIoError> {
        let raw: DptJson = serde_json::from_str(text)?;
        Ok(DptPair {
            x_side: SideTransform::from_json_parts(raw.x_side, ax)?,
            y_side: SideTransform::from_json_parts(raw.y_side, ay)?,
        })
    }
}
