//! Finite alphabets and exact probability distributions over them.
//!
//! All probabilities are plain `f64` in nats-based information units.
//! Joint distributions are strictly positive by default (every cell carries
//! mass); the one sanctioned exception is the deterministic-label regime used
//! by the collapse experiment, constructed through
//! [`JointDistribution::with_support_zeros`].

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance applied to `|sum - 1|` when ingesting external mass data.
pub const INGEST_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ProbabilityError {
    #[error("matrix shape {found_rows}x{found_cols} does not match alphabets {rows}x{cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("non-positive mass {value} at cell ({row}, {col})")]
    NonPositiveMass { row: usize, col: usize, value: f64 },
    #[error("mass does not sum to one (sum = {sum})")]
    NotNormalized { sum: f64 },
    #[error("duplicate symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("empty alphabet")]
    EmptyAlphabet,
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("no sample covers cell ({x}, {y})")]
    UncoveredSymbol { x: String, y: String },
    #[error("empty sample list")]
    NoSamples,
}

/// An ordered finite alphabet of distinct string labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn new<I, S>(symbols: I) -> Result<Self, ProbabilityError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.is_empty() {
            return Err(ProbabilityError::EmptyAlphabet);
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(ProbabilityError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Alphabet { symbols, index })
    }

    /// Alphabet `{prefix}0, {prefix}1, ...` of the given size.
    pub fn indexed(prefix: &str, n: usize) -> Self {
        Alphabet::new((0..n).map(|i| format!("{prefix}{i}"))).expect("indexed labels are distinct")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, i: usize) -> &str {
        &self.symbols[i]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn require(&self, label: &str) -> Result<usize, ProbabilityError> {
        self.index_of(label)
            .ok_or_else(|| ProbabilityError::UnknownSymbol(label.to_string()))
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.symbols.join(", "))
    }
}

/// A strictly positive probability mass function on a finite alphabet.
#[derive(Debug, Clone)]
pub struct Distribution {
    alphabet: Alphabet,
    mass: DVector<f64>,
}

impl Distribution {
    pub fn new(alphabet: Alphabet, mass: Vec<f64>) -> Result<Self, ProbabilityError> {
        if mass.len() != alphabet.len() {
            return Err(ProbabilityError::ShapeMismatch {
                rows: alphabet.len(),
                cols: 1,
                found_rows: mass.len(),
                found_cols: 1,
            });
        }
        for (i, &p) in mass.iter().enumerate() {
            if !(p > 0.0) {
                return Err(ProbabilityError::NonPositiveMass {
                    row: i,
                    col: 0,
                    value: p,
                });
            }
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > INGEST_NORM_TOL {
            return Err(ProbabilityError::NotNormalized { sum });
        }
        let mass = DVector::from_vec(mass) / sum;
        Ok(Distribution { alphabet, mass })
    }

    pub fn uniform(alphabet: Alphabet) -> Self {
        let n = alphabet.len();
        Distribution {
            alphabet,
            mass: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    pub(crate) fn from_normalized(alphabet: Alphabet, mass: DVector<f64>) -> Self {
        Distribution { alphabet, mass }
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.mass[i]
    }
}

/// A joint probability mass matrix over a pair of finite alphabets.
///
/// Construction through [`JointDistribution::validate`] enforces strict
/// positivity; [`JointDistribution::with_support_zeros`] admits structural
/// zeros (but still demands positive marginals) for the deterministic-label
/// regime, where every row holds exactly one positive cell.
#[derive(Debug, Clone)]
pub struct JointDistribution {
    x: Alphabet,
    y: Alphabet,
    mass: DMatrix<f64>,
    p_x: DVector<f64>,
    p_y: DVector<f64>,
}

impl JointDistribution {
    /// Validates a mass matrix against the alphabets: positive cells, total
    /// mass one within [`INGEST_NORM_TOL`]. The stored matrix is renormalized
    /// once so downstream sums see `|sum - 1| <= 1e-12`.
    pub fn validate(
        mass: DMatrix<f64>,
        x: Alphabet,
        y: Alphabet,
    ) -> Result<Self, ProbabilityError> {
        if mass.nrows() != x.len() || mass.ncols() != y.len() {
            return Err(ProbabilityError::ShapeMismatch {
                rows: x.len(),
                cols: y.len(),
                found_rows: mass.nrows(),
                found_cols: mass.ncols(),
            });
        }
        for i in 0..mass.nrows() {
            for j in 0..mass.ncols() {
                if !(mass[(i, j)] > 0.0) {
                    return Err(ProbabilityError::NonPositiveMass {
                        row: i,
                        col: j,
                        value: mass[(i, j)],
                    });
                }
            }
        }
        Self::finish(mass, x, y)
    }

    /// Accepts a matrix with zero cells, as produced by pushforwards of
    /// deterministic-label data. Every row and column must still carry
    /// positive total mass, and no cell may be negative.
    pub fn with_support_zeros(
        mass: DMatrix<f64>,
        x: Alphabet,
        y: Alphabet,
    ) -> Result<Self, ProbabilityError> {
        if mass.nrows() != x.len() || mass.ncols() != y.len() {
            return Err(ProbabilityError::ShapeMismatch {
                rows: x.len(),
                cols: y.len(),
                found_rows: mass.nrows(),
                found_cols: mass.ncols(),
            });
        }
        for i in 0..mass.nrows() {
            for j in 0..mass.ncols() {
                if mass[(i, j)] < 0.0 {
                    return Err(ProbabilityError::NonPositiveMass {
                        row: i,
                        col: j,
                        value: mass[(i, j)],
                    });
                }
            }
        }
        for i in 0..mass.nrows() {
            if !(mass.row(i).sum() > 0.0) {
                return Err(ProbabilityError::NonPositiveMass {
                    row: i,
                    col: 0,
                    value: 0.0,
                });
            }
        }
        for j in 0..mass.ncols() {
            if !(mass.column(j).sum() > 0.0) {
                return Err(ProbabilityError::NonPositiveMass {
                    row: 0,
                    col: j,
                    value: 0.0,
                });
            }
        }
        Self::finish(mass, x, y)
    }

    fn finish(mass: DMatrix<f64>, x: Alphabet, y: Alphabet) -> Result<Self, ProbabilityError> {
        let sum = mass.sum();
        if (sum - 1.0).abs() > INGEST_NORM_TOL {
            return Err(ProbabilityError::NotNormalized { sum });
        }
        let mass = mass / sum;
        let p_x = DVector::from_iterator(mass.nrows(), (0..mass.nrows()).map(|i| mass.row(i).sum()));
        let p_y =
            DVector::from_iterator(mass.ncols(), (0..mass.ncols()).map(|j| mass.column(j).sum()));
        Ok(JointDistribution {
            x,
            y,
            mass,
            p_x,
            p_y,
        })
    }

    /// Convenience constructor from row slices and label lists.
    pub fn from_rows(
        x: &[&str],
        y: &[&str],
        rows: &[Vec<f64>],
    ) -> Result<Self, ProbabilityError> {
        let ax = Alphabet::new(x.iter().copied())?;
        let ay = Alphabet::new(y.iter().copied())?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(ProbabilityError::ShapeMismatch {
                rows: ax.len(),
                cols: ay.len(),
                found_rows: nrows,
                found_cols: 0,
            });
        }
        let mass = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
        Self::validate(mass, ax, ay)
    }

    pub fn alphabet_x(&self) -> &Alphabet {
        &self.x
    }

    pub fn alphabet_y(&self) -> &Alphabet {
        &self.y
    }

    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn ny(&self) -> usize {
        self.y.len()
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.mass[(i, j)]
    }

    pub fn p_x(&self) -> &DVector<f64> {
        &self.p_x
    }

    pub fn p_y(&self) -> &DVector<f64> {
        &self.p_y
    }

    pub fn marginal_x(&self) -> Distribution {
        Distribution::from_normalized(self.x.clone(), self.p_x.clone())
    }

    pub fn marginal_y(&self) -> Distribution {
        Distribution::from_normalized(self.y.clone(), self.p_y.clone())
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.mass.iter().all(|&p| p > 0.0)
    }

    /// The joint of `(Y, X)`: transposed mass matrix, swapped alphabets.
    pub fn swapped(&self) -> JointDistribution {
        JointDistribution {
            x: self.y.clone(),
            y: self.x.clone(),
            mass: self.mass.transpose(),
            p_x: self.p_y.clone(),
            p_y: self.p_x.clone(),
        }
    }
}

/// Validates a raw matrix (row-major rows) into a strictly positive joint.
pub fn validate_joint(
    matrix: &[Vec<f64>],
    ax: Alphabet,
    ay: Alphabet,
) -> Result<JointDistribution, ProbabilityError> {
    let nrows = matrix.len();
    let ncols = matrix.first().map_or(0, Vec::len);
    if nrows != ax.len() || ncols != ay.len() || matrix.iter().any(|r| r.len() != ncols) {
        return Err(ProbabilityError::ShapeMismatch {
            rows: ax.len(),
            cols: ay.len(),
            found_rows: nrows,
            found_cols: ncols,
        });
    }
    let mass = DMatrix::from_fn(nrows, ncols, |i, j| matrix[i][j]);
    JointDistribution::validate(mass, ax, ay)
}

/// Empirical joint distribution `count(x, y) / n` from labeled pairs.
///
/// Every `(x, y)` cell must be observed at least once so the result is
/// strictly positive; the first uncovered cell is reported otherwise.
pub fn empirical_from_samples(
    pairs: &[(String, String)],
    ax: Alphabet,
    ay: Alphabet,
) -> Result<JointDistribution, ProbabilityError> {
    if pairs.is_empty() {
        return Err(ProbabilityError::NoSamples);
    }
    let counts = count_matrix(pairs, &ax, &ay)?;
    for i in 0..ax.len() {
        for j in 0..ay.len() {
            if counts[(i, j)] == 0.0 {
                return Err(ProbabilityError::UncoveredSymbol {
                    x: ax.symbol(i).to_string(),
                    y: ay.symbol(j).to_string(),
                });
            }
        }
    }
    JointDistribution::validate(counts / pairs.len() as f64, ax, ay)
}

/// Empirical estimation with additive smoothing: adds `eps` to every cell of
/// the empirical probability matrix, then renormalizes. Keeps raw sample data
/// with uncovered cells usable.
pub fn empirical_smoothed(
    pairs: &[(String, String)],
    ax: Alphabet,
    ay: Alphabet,
    eps: f64,
) -> Result<JointDistribution, ProbabilityError> {
    if pairs.is_empty() {
        return Err(ProbabilityError::NoSamples);
    }
    let mut mass = count_matrix(pairs, &ax, &ay)? / pairs.len() as f64;
    mass.add_scalar_mut(eps);
    let sum = mass.sum();
    JointDistribution::validate(mass / sum, ax, ay)
}

fn count_matrix(
    pairs: &[(String, String)],
    ax: &Alphabet,
    ay: &Alphabet,
) -> Result<DMatrix<f64>, ProbabilityError> {
    let mut counts = DMatrix::zeros(ax.len(), ay.len());
    for (x, y) in pairs {
        let i = ax.require(x)?;
        let j = ay.require(y)?;
        counts[(i, j)] += 1.0;
    }
    Ok(counts)
}

/// The conditional row `P(Y | X = x)`.
pub fn conditional_y_given_x(
    j: &JointDistribution,
    x: &str,
) -> Result<Distribution, ProbabilityError> {
    let i = j.alphabet_x().require(x)?;
    let row = j.mass().row(i) / j.p_x()[i];
    Ok(Distribution::from_normalized(
        j.alphabet_y().clone(),
        row.transpose(),
    ))
}

/// A total map between alphabets, used for exact pushforwards.
#[derive(Debug, Clone)]
pub struct SymbolMap {
    target: Alphabet,
    map: Vec<usize>,
}

impl SymbolMap {
    pub fn new(source: &Alphabet, target: Alphabet, map: Vec<usize>) -> Result<Self, ProbabilityError> {
        if map.len() != source.len() || map.iter().any(|&t| t >= target.len()) {
            return Err(ProbabilityError::ShapeMismatch {
                rows: source.len(),
                cols: target.len(),
                found_rows: map.len(),
                found_cols: target.len(),
            });
        }
        Ok(SymbolMap { target, map })
    }

    pub fn identity(a: &Alphabet) -> Self {
        SymbolMap {
            target: a.clone(),
            map: (0..a.len()).collect(),
        }
    }

    pub fn constant(source: &Alphabet, label: &str) -> Self {
        SymbolMap {
            target: Alphabet::new([label]).expect("single label"),
            map: vec![0; source.len()],
        }
    }

    /// Builds a map from per-source target labels; the target alphabet is the
    /// distinct labels in order of first appearance.
    pub fn from_labels(source: &Alphabet, labels: &[&str]) -> Result<Self, ProbabilityError> {
        if labels.len() != source.len() {
            return Err(ProbabilityError::ShapeMismatch {
                rows: source.len(),
                cols: 1,
                found_rows: labels.len(),
                found_cols: 1,
            });
        }
        let mut distinct: Vec<String> = Vec::new();
        let mut map = Vec::with_capacity(labels.len());
        for &l in labels {
            match distinct.iter().position(|d| d == l) {
                Some(t) => map.push(t),
                None => {
                    distinct.push(l.to_string());
                    map.push(distinct.len() - 1);
                }
            }
        }
        Ok(SymbolMap {
            target: Alphabet::new(distinct)?,
            map,
        })
    }

    pub fn target(&self) -> &Alphabet {
        &self.target
    }

    pub fn apply(&self, source_index: usize) -> usize {
        self.map[source_index]
    }
}

/// Exact image distribution of `j` under `(map_x, map_y)`.
///
/// Target symbols that receive zero mass are removed, shrinking the target
/// alphabets to the reachable image.
pub fn pushforward(
    j: &JointDistribution,
    map_x: &SymbolMap,
    map_y: &SymbolMap,
) -> JointDistribution {
    let mut mass = DMatrix::zeros(map_x.target.len(), map_y.target.len());
    for i in 0..j.nx() {
        for l in 0..j.ny() {
            mass[(map_x.apply(i), map_y.apply(l))] += j.prob(i, l);
        }
    }
    let live_rows: Vec<usize> = (0..mass.nrows()).filter(|&i| mass.row(i).sum() > 0.0).collect();
    let live_cols: Vec<usize> = (0..mass.ncols())
        .filter(|&j| mass.column(j).sum() > 0.0)
        .collect();
    let shrunk = DMatrix::from_fn(live_rows.len(), live_cols.len(), |a, b| {
        mass[(live_rows[a], live_cols[b])]
    });
    let ax = Alphabet::new(live_rows.iter().map(|&i| map_x.target.symbol(i)))
        .expect("image labels distinct");
    let ay = Alphabet::new(live_cols.iter().map(|&j| map_y.target.symbol(j)))
        .expect("image labels distinct");
    JointDistribution::with_support_zeros(shrunk, ax, ay)
        .expect("pushforward preserves total mass and positive marginals")
}

/// Mutual information in nats; `0 log 0 = 0` for structural zeros.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let mut total = 0.0;
    for i in 0..j.nx() {
        for l in 0..j.ny() {
            let p = j.prob(i, l);
            if p > 0.0 {
                total += p * (p / (j.p_x()[i] * j.p_y()[l])).ln();
            }
        }
    }
    total
}

/// Shannon entropy in nats.
pub fn entropy(d: &Distribution) -> f64 {
    -d.mass().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

#[derive(Serialize, Deserialize)]
struct JointJson {
    x: Vec<String>,
    y: Vec<String>,
    p: Vec<Vec<f64>>,
}

impl JointDistribution {
    /// Parses the distribution JSON schema
    /// `{"x": [...], "y": [...], "p": [[...], ...]}`.
    pub fn from_json(text: &str) -> Result<Self, JointIoError> {
        let raw: JointJson = serde_json::from_str(text)?;
        let ax = Alphabet::new(raw.x)?;
        let ay = Alphabet::new(raw.y)?;
        Ok(validate_joint(&raw.p, ax, ay)?)
    }

    pub fn to_json(&self) -> String {
        let raw = JointJson {
            x: self.x.symbols().to_vec(),
            y: self.y.symbols().to_vec(),
            p: (0..self.nx())
                .map(|i| (0..self.ny()).map(|j| self.prob(i, j)).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("serializable")
    }
}

#[derive(Debug, Error)]
pub enum JointIoError {
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] ProbabilityError),
    #[error("sample CSV must have header `x,y`")]
    BadCsvHeader,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Reads `x,y` sample pairs from CSV text. The header row is required.
pub fn read_sample_csv(text: &str) -> Result<Vec<(String, String)>, JointIoError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    {
        let headers = reader.headers()?;
        if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
            return Err(JointIoError::BadCsvHeader);
        }
    }
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record?;
        pairs.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn dsbs_half() -> JointDistribution {
        JointDistribution::from_rows(
            &["0", "1"],
            &["0", "1"],
            &[vec![0.375, 0.125], vec![0.125, 0.375]],
        )
        .unwrap()
    }

    #[test]
    fn validate_accepts_dsbs() {
        let j = dsbs_half();
        assert_eq!(j.nx(), 2);
        assert_abs_diff_eq!(j.mass().sum(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j.p_x()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn validate_rejects_zero_mass() {
        let ax = Alphabet::indexed("x", 2);
        let ay = Alphabet::indexed("y", 2);
        let err = validate_joint(&[vec![0.5, 0.5], vec![0.0, 0.0]], ax, ay).unwrap_err();
        assert!(matches!(err, ProbabilityError::NonPositiveMass { .. }));
    }

    #[test]
    fn validate_rejects_unnormalized() {
        let ax = Alphabet::indexed("x", 2);
        let ay = Alphabet::indexed("y", 2);
        let err = validate_joint(&[vec![0.3, 0.3], vec![0.3, 0.3]], ax, ay).unwrap_err();
        assert_eq!(err, ProbabilityError::NotNormalized { sum: 1.2 });
    }

    #[test]
    fn validate_rejects_shape_mismatch() {
        let ax = Alphabet::indexed("x", 3);
        let ay = Alphabet::indexed("y", 2);
        let err = validate_joint(&[vec![0.5, 0.5], vec![0.0, 0.0]], ax, ay).unwrap_err();
        assert!(matches!(err, ProbabilityError::ShapeMismatch { .. }));
    }

    #[test]
    fn empirical_uniform_counts() {
        let ax = Alphabet::new(["a", "b"]).unwrap();
        let ay = Alphabet::new(["0", "1"]).unwrap();
        let pairs: Vec<(String, String)> = [("a", "0"), ("a", "1"), ("b", "0"), ("b", "1")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        let j = empirical_from_samples(&pairs, ax, ay).unwrap();
        for i in 0..2 {
            for l in 0..2 {
                assert_abs_diff_eq!(j.prob(i, l), 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn empirical_reports_uncovered_cell() {
        let ax = Alphabet::new(["a", "b"]).unwrap();
        let ay = Alphabet::new(["0", "1"]).unwrap();
        let pairs: Vec<(String, String)> = [("a", "0"), ("a", "0"), ("a", "1"), ("b", "0")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        let err = empirical_from_samples(&pairs, ax, ay).unwrap_err();
        assert_eq!(
            err,
            ProbabilityError::UncoveredSymbol {
                x: "b".into(),
                y: "1".into()
            }
        );
    }

    #[test]
    fn empirical_weighted_counts_reach_dsbs() {
        let ax = Alphabet::new(["a", "b"]).unwrap();
        let ay = Alphabet::new(["0", "1"]).unwrap();
        let mut pairs = Vec::new();
        for _ in 0..3 {
            pairs.push(("a".to_string(), "0".to_string()));
        }
        pairs.push(("a".to_string(), "1".to_string()));
        pairs.push(("b".to_string(), "0".to_string()));
        for _ in 0..3 {
            pairs.push(("b".to_string(), "1".to_string()));
        }
        let j = empirical_from_samples(&pairs, ax, ay).unwrap();
        assert_abs_diff_eq!(j.prob(0, 0), 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(j.prob(0, 1), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn conditional_rows() {
        let j = dsbs_half();
        let c = conditional_y_given_x(&j, "0").unwrap();
        assert_abs_diff_eq!(c.prob(0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(c.prob(1), 0.25, epsilon = 1e-12);
        assert!(conditional_y_given_x(&j, "z").is_err());
    }

    #[test]
    fn pushforward_identity_and_merge() {
        let j = dsbs_half();
        let idx = SymbolMap::identity(j.alphabet_x());
        let idy = SymbolMap::identity(j.alphabet_y());
        let same = pushforward(&j, &idx, &idy);
        assert_abs_diff_eq!(same.prob(0, 0), 0.375, epsilon = 1e-15);

        // Merging all x marginalizes onto P_Y.
        let merge = SymbolMap::constant(j.alphabet_x(), "m");
        let p_y = pushforward(&j, &merge, &idy);
        assert_eq!(p_y.nx(), 1);
        assert_abs_diff_eq!(p_y.prob(0, 0), 0.5, epsilon = 1e-15);

        // Constant y map gives row sums.
        let const_y = SymbolMap::constant(j.alphabet_y(), "c");
        let rows = pushforward(&j, &idx, &const_y);
        assert_eq!((rows.nx(), rows.ny()), (2, 1));
        assert_abs_diff_eq!(rows.prob(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rows.prob(1, 0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn mutual_information_values() {
        // Product distribution: independence gives zero.
        let prod = JointDistribution::from_rows(
            &["0", "1"],
            &["0", "1"],
            &[vec![0.35, 0.35], vec![0.15, 0.15]],
        )
        .unwrap();
        assert_abs_diff_eq!(mutual_information(&prod), 0.0, epsilon = 1e-14);

        // Oracle: brute-force sum over the four cells.
        let brute = |cells: [[f64; 2]; 2]| -> f64 {
            let px = [cells[0][0] + cells[0][1], cells[1][0] + cells[1][1]];
            let py = [cells[0][0] + cells[1][0], cells[0][1] + cells[1][1]];
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    s += cells[i][j] * (cells[i][j] / (px[i] * py[j])).ln();
                }
            }
            s
        };
        let j = dsbs_half();
        let expected = brute([[0.375, 0.125], [0.125, 0.375]]);
        assert_abs_diff_eq!(expected, 0.130812035941137, epsilon = 1e-12);
        assert_abs_diff_eq!(mutual_information(&j), expected, epsilon = 1e-12);

        let near_identity = JointDistribution::from_rows(
            &["0", "1"],
            &["0", "1"],
            &[vec![0.49, 0.01], vec![0.01, 0.49]],
        )
        .unwrap();
        let expected = brute([[0.49, 0.01], [0.01, 0.49]]);
        assert_abs_diff_eq!(expected, 0.595108067280213, epsilon = 1e-12);
        assert_abs_diff_eq!(mutual_information(&near_identity), expected, epsilon = 1e-12);
    }

    #[test]
    fn entropy_values() {
        let a = Alphabet::indexed("z", 2);
        let u2 = Distribution::uniform(a);
        assert_abs_diff_eq!(entropy(&u2), 2.0_f64.ln(), epsilon = 1e-14);

        let a = Alphabet::indexed("z", 2);
        let d = Distribution::new(a, vec![0.75, 0.25]).unwrap();
        // Oracle: -sum p ln p by hand.
        let expected = -(0.75_f64 * 0.75_f64.ln() + 0.25 * 0.25_f64.ln());
        assert_abs_diff_eq!(expected, 0.562335144618808, epsilon = 1e-12);
        assert_abs_diff_eq!(entropy(&d), expected, epsilon = 1e-14);

        let u4 = Distribution::uniform(Alphabet::indexed("z", 4));
        assert_abs_diff_eq!(entropy(&u4), 4.0_f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn json_round_trip() {
        let j = dsbs_half();
        let text = j.to_json();
        let back = JointDistribution::from_json(&text).unwrap();
        assert_eq!(back.alphabet_x().symbols(), j.alphabet_x().symbols());
        assert_abs_diff_eq!(back.prob(1, 1), 0.375, epsilon = 1e-15);
    }

    #[test]
    fn sample_csv_requires_header() {
        assert!(read_sample_csv("x,y\na,0\nb,1\n").is_ok());
        assert!(matches!(
            read_sample_csv("a,b\n1,2\n"),
            Err(JointIoError::BadCsvHeader)
        ));
    }

    #[test]
    fn smoothing_covers_missing_cells() {
        let ax = Alphabet::new(["a", "b"]).unwrap();
        let ay = Alphabet::new(["0", "1"]).unwrap();
        let pairs: Vec<(String, String)> = [("a", "0"), ("a", "1"), ("b", "0")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        let j = empirical_smoothed(&pairs, ax, ay, 1e-6).unwrap();
        assert!(j.is_strictly_positive());
        assert!(j.prob(1, 1) > 0.0 && j.prob(1, 1) < 1e-5);
    }
}
