//! Exact feature tables over finite alphabets.
//!
//! A [`FeatureTable`] maps each symbol of an alphabet to a k-dimensional real
//! vector, stored as an `|alphabet| x k` matrix (one row per symbol). Tables
//! are immutable; every operation returns a fresh table.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cdk::ModalDecomposition;
use crate::probability::{Alphabet, Distribution, JointDistribution, ProbabilityError};

/// Decimal places used when grouping rows by value or building image
/// alphabets. Tables are constructed rather than measured, so a fixed grid
/// absorbs float noise without merging genuinely distinct rows.
pub const ROW_ROUND_DECIMALS: i32 = 12;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("values shape {found_rows}x{found_cols} does not match alphabet size {rows} x dim {cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("column index {index} out of range for dim {dim}")]
    BadIndex { index: usize, dim: usize },
    #[error("alphabet mismatch: {0}")]
    AlphabetMismatch(String),
    #[error("inner row {row} = {encoded} has no matching outer symbol")]
    UnmatchedRow { row: usize, encoded: String },
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
}

/// An exact map from a finite alphabet to `R^k`; row i is the feature vector
/// of symbol i.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    alphabet: Alphabet,
    values: DMatrix<f64>,
}

/// Rounds to the fixed decimal grid, normalizing `-0.0` to `0.0`.
pub(crate) fn round_value(v: f64) -> f64 {
    let scale = 10f64.powi(ROW_ROUND_DECIMALS);
    let r = (v * scale).round() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Canonical string encoding of a (rounded) feature row, e.g. `[1, -0.5]`.
pub fn encode_row(row: &[f64]) -> String {
    let parts: Vec<String> = row.iter().map(|&v| format!("{}", round_value(v))).collect();
    format!("[{}]", parts.join(", "))
}

impl FeatureTable {
    pub fn new(alphabet: Alphabet, values: DMatrix<f64>) -> Result<Self, FeatureError> {
        if values.nrows() != alphabet.len() {
            return Err(FeatureError::ShapeMismatch {
                rows: alphabet.len(),
                cols: values.ncols(),
                found_rows: values.nrows(),
                found_cols: values.ncols(),
            });
        }
        for i in 0..values.nrows() {
            for j in 0..values.ncols() {
                if !values[(i, j)].is_finite() {
                    return Err(FeatureError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(FeatureTable { alphabet, values })
    }

    pub fn from_rows(alphabet: Alphabet, rows: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.len() != alphabet.len() || rows.iter().any(|r| r.len() != ncols) {
            return Err(FeatureError::ShapeMismatch {
                rows: alphabet.len(),
                cols: ncols,
                found_rows: rows.len(),
                found_cols: ncols,
            });
        }
        let values = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
        Self::new(alphabet, values)
    }

    /// Table where every symbol maps to the same vector.
    pub fn constant(alphabet: Alphabet, vector: &[f64]) -> Self {
        let n = alphabet.len();
        let values = DMatrix::from_fn(n, vector.len(), |_, j| vector[j]);
        FeatureTable { alphabet, values }
    }

    pub fn zeros(alphabet: Alphabet, k: usize) -> Self {
        let n = alphabet.len();
        FeatureTable {
            alphabet,
            values: DMatrix::zeros(n, k),
        }
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    /// Feature dimension k.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Number of symbols.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Feature vector of a symbol by label.
    pub fn evaluate(&self, z: &str) -> Result<DVector<f64>, FeatureError> {
        let i = self
            .alphabet
            .index_of(z)
            .ok_or_else(|| FeatureError::UnknownSymbol(z.to_string()))?;
        Ok(self.values.row(i).transpose())
    }

    /// First `i` coordinates, `1 <= i <= k`.
    pub fn slice_prefix(&self, i: usize) -> Result<FeatureTable, FeatureError> {
        if i == 0 || i > self.dim() {
            return Err(FeatureError::BadIndex {
                index: i,
                dim: self.dim(),
            });
        }
        Ok(FeatureTable {
            alphabet: self.alphabet.clone(),
            values: self.values.columns(0, i).into_owned(),
        })
    }

    /// Group index per symbol, grouping symbols whose rounded rows coincide.
    /// Group ids are assigned in order of first appearance.
    pub fn row_groups(&self) -> Vec<usize> {
        let mut seen: Vec<String> = Vec::new();
        let mut groups = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let key = encode_row(&self.row(i));
            match seen.iter().position(|s| *s == key) {
                Some(g) => groups.push(g),
                None => {
                    seen.push(key);
                    groups.push(seen.len() - 1);
                }
            }
        }
        groups
    }

    /// The image alphabet: distinct rounded rows labeled by their canonical
    /// encodings, plus the per-symbol encoder into that alphabet.
    pub fn image_alphabet(&self) -> (Alphabet, Vec<usize>) {
        let groups = self.row_groups();
        let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
        let mut labels = vec![String::new(); n_groups];
        for i in 0..self.len() {
            if labels[groups[i]].is_empty() {
                labels[groups[i]] = encode_row(&self.row(i));
            }
        }
        let alphabet = Alphabet::new(labels).expect("distinct encodings");
        (alphabet, groups)
    }
}

/// Second-moment summary of a feature pair under a joint distribution.
#[derive(Debug, Clone)]
pub struct MomentSet {
    pub mean_f: DVector<f64>,
    pub mean_g: DVector<f64>,
    pub lambda_f: DMatrix<f64>,
    pub lambda_g: DMatrix<f64>,
    pub lambda_fg: DMatrix<f64>,
}

/// Exact moments `E[f]`, `E[g]`, `Λ_f = E[f fᵀ]`, `Λ_g`, `Λ_fg = E[f(X) gᵀ(Y)]`.
pub fn moments(
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
) -> Result<MomentSet, FeatureError> {
    check_alphabet(f, j.alphabet_x(), "f vs X")?;
    check_alphabet(g, j.alphabet_y(), "g vs Y")?;
    let dx = DMatrix::from_diagonal(j.p_x());
    let dy = DMatrix::from_diagonal(j.p_y());
    Ok(MomentSet {
        mean_f: f.values().transpose() * j.p_x(),
        mean_g: g.values().transpose() * j.p_y(),
        lambda_f: f.values().transpose() * &dx * f.values(),
        lambda_g: g.values().transpose() * &dy * g.values(),
        lambda_fg: f.values().transpose() * j.mass() * g.values(),
    })
}

pub(crate) fn check_alphabet(
    t: &FeatureTable,
    expected: &Alphabet,
    what: &str,
) -> Result<(), FeatureError> {
    if t.alphabet() != expected {
        return Err(FeatureError::AlphabetMismatch(format!(
            "{what}: {} vs {}",
            t.alphabet(),
            expected
        )));
    }
    Ok(())
}

/// Conditional projection of `f` onto the functions of `s(Z)`: within each
/// group of symbols sharing an `s` row, replaces each `f` row by the
/// `p`-weighted group mean.
pub fn conditional_projection(
    f: &FeatureTable,
    s: &FeatureTable,
    p: &Distribution,
) -> Result<FeatureTable, FeatureError> {
    check_alphabet(s, f.alphabet(), "s vs f")?;
    if p.alphabet() != f.alphabet() {
        return Err(FeatureError::AlphabetMismatch(format!(
            "p vs f: {} vs {}",
            p.alphabet(),
            f.alphabet()
        )));
    }
    let groups = s.row_groups();
    let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut weight = vec![0.0; n_groups];
    let mut mean = DMatrix::zeros(n_groups, f.dim());
    for i in 0..f.len() {
        let g = groups[i];
        weight[g] += p.prob(i);
        for c in 0..f.dim() {
            mean[(g, c)] += p.prob(i) * f.values()[(i, c)];
        }
    }
    for g in 0..n_groups {
        if weight[g] > 0.0 {
            for c in 0..f.dim() {
                mean[(g, c)] /= weight[g];
            }
        }
    }
    let values = DMatrix::from_fn(f.len(), f.dim(), |i, c| mean[(groups[i], c)]);
    Ok(FeatureTable {
        alphabet: f.alphabet().clone(),
        values,
    })
}

/// Row-wise composition `outer ∘ inner`: each inner row, canonically encoded,
/// must name a symbol of the outer table's alphabet.
pub fn compose(outer: &FeatureTable, inner: &FeatureTable) -> Result<FeatureTable, FeatureError> {
    let mut values = DMatrix::zeros(inner.len(), outer.dim());
    for i in 0..inner.len() {
        let key = encode_row(&inner.row(i));
        let o = outer
            .alphabet()
            .index_of(&key)
            .ok_or(FeatureError::UnmatchedRow {
                row: i,
                encoded: key.clone(),
            })?;
        for c in 0..outer.dim() {
            values[(i, c)] = outer.values()[(o, c)];
        }
    }
    Ok(FeatureTable {
        alphabet: inner.alphabet().clone(),
        values,
    })
}

/// Resolves sign (and, against a reference, column-permutation) ambiguity of
/// a learned feature pair.
///
/// With a reference decomposition: columns of `f` are greedily matched to
/// reference modes by largest `|E[f_i f*_j]|`, then each matched pair
/// `(f_i, g_i)` is jointly sign-flipped so `E[f_i(X) f*_i(X)] >= 0`.
///
/// Without a reference: each column pair is flipped so the first entry of the
/// `f` column with magnitude above `1e-9` is positive.
pub fn canonicalize(
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
    reference: Option<&ModalDecomposition>,
) -> Result<(FeatureTable, FeatureTable), FeatureError> {
    check_alphabet(f, j.alphabet_x(), "f vs X")?;
    check_alphabet(g, j.alphabet_y(), "g vs Y")?;
    if f.dim() != g.dim() {
        return Err(FeatureError::ShapeMismatch {
            rows: f.len(),
            cols: f.dim(),
            found_rows: g.len(),
            found_cols: g.dim(),
        });
    }
    let k = f.dim();
    let mut fv = f.values().clone();
    let mut gv = g.values().clone();

    match reference {
        Some(md) => {
            let r = md.f_star().dim().min(k);
            // Correlation of learned column i with reference mode m under P_X.
            let mut corr = DMatrix::zeros(k, r);
            for i in 0..k {
                for m in 0..r {
                    let mut c = 0.0;
                    for x in 0..f.len() {
                        c += j.p_x()[x] * fv[(x, i)] * md.f_star().values()[(x, m)];
                    }
                    corr[(i, m)] = c;
                }
            }
            // Greedy assignment on |corr|: repeatedly take the largest
            // remaining entry. Unmatched columns keep their position.
            let mut col_of_mode = vec![usize::MAX; r];
            let mut used_col = vec![false; k];
            let mut used_mode = vec![false; r];
            for _ in 0..r.min(k) {
                let mut best = (0usize, 0usize, -1.0);
                for i in 0..k {
                    if used_col[i] {
                        continue;
                    }
                    for m in 0..r {
                        if used_mode[m] {
                            continue;
                        }
                        if corr[(i, m)].abs() > best.2 {
                            best = (i, m, corr[(i, m)].abs());
                        }
                    }
                }
                let (i, m, _) = best;
                used_col[i] = true;
                used_mode[m] = true;
                col_of_mode[m] = i;
            }
            let mut order: Vec<usize> = Vec::with_capacity(k);
            for item in col_of_mode.iter().take(r) {
                if *item != usize::MAX {
                    order.push(*item);
                }
            }
            for i in 0..k {
                if !order.contains(&i) {
                    order.push(i);
                }
            }
            fv = permute_columns(&fv, &order);
            gv = permute_columns(&gv, &order);
            for m in 0..r.min(k) {
                let mut c = 0.0;
                for x in 0..f.len() {
                    c += j.p_x()[x] * fv[(x, m)] * md.f_star().values()[(x, m)];
                }
                if c < 0.0 {
                    flip_column(&mut fv, m);
                    flip_column(&mut gv, m);
                }
            }
        }
        None => {
            for c in 0..k {
                let lead = (0..fv.nrows()).find(|&i| fv[(i, c)].abs() > 1e-9);
                if let Some(i) = lead {
                    if fv[(i, c)] < 0.0 {
                        flip_column(&mut fv, c);
                        flip_column(&mut gv, c);
                    }
                }
            }
        }
    }

    Ok((
        FeatureTable {
            alphabet: f.alphabet().clone(),
            values: fv,
        },
        FeatureTable {
            alphabet: g.alphabet().clone(),
            values: gv,
        },
    ))
}

fn permute_columns(m: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), order.len(), |i, c| m[(i, order[c])])
}

fn flip_column(m: &mut DMatrix<f64>, c: usize) {
    for i in 0..m.nrows() {
        m[(i, c)] = -m[(i, c)];
    }
}

/// Principal angles (radians, ascending) between the column spans of two
/// tables in the `L²(p)` geometry. Used when near-equal singular values make
/// per-column comparisons unidentifiable.
pub fn principal_angles(
    a: &FeatureTable,
    b: &FeatureTable,
    p: &Distribution,
) -> Result<Vec<f64>, FeatureError> {
    check_alphabet(b, a.alphabet(), "b vs a")?;
    let sqrt_p = DMatrix::from_diagonal(&p.mass().map(f64::sqrt));
    let qa = orthonormal_basis(&(&sqrt_p * a.values()));
    let qb = orthonormal_basis(&(&sqrt_p * b.values()));
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return Ok(Vec::new());
    }
    let m = qa.transpose() * qb;
    let cosines: Vec<f64> = crate::numeric::singular_values(&m)
        .into_iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    Ok(cosines.into_iter().map(f64::acos).collect())
}

/// Largest principal angle; 0 when the spans coincide.
pub fn subspace_distance(
    a: &FeatureTable,
    b: &FeatureTable,
    p: &Distribution,
) -> Result<f64, FeatureError> {
    Ok(principal_angles(a, b, p)?.into_iter().fold(0.0, f64::max))
}

fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m.clone();
    }
    let svd = crate::numeric::jacobi_svd(m);
    let tol = 1e-10 * svd.singular_values.first().copied().unwrap_or(0.0).max(1e-300);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    DMatrix::from_fn(svd.u.nrows(), keep.len(), |i, c| svd.u[(i, keep[c])])
}

/// Serializes a table as CSV with header `symbol,f1,...,fk` and 17
/// significant digits per value.
pub fn to_csv(t: &FeatureTable) -> String {
    let mut out = String::from("symbol");
    for c in 0..t.dim() {
        out.push_str(&format!(",f{}", c + 1));
    }
    out.push('\n');
    for i in 0..t.len() {
        out.push_str(t.alphabet().symbol(i));
        for c in 0..t.dim() {
            out.push_str(&format!(",{:.16e}", t.values()[(i, c)]));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum FeatureCsvError {
    #[error("feature CSV must have header `symbol,f1,...,fk`")]
    BadHeader,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad float {0:?}")]
    BadFloat(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
}

pub fn from_csv(text: &str) -> Result<FeatureTable, FeatureCsvError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    {
        let headers = reader.headers()?;
        if headers.is_empty() || &headers[0] != "symbol" {
            return Err(FeatureCsvError::BadHeader);
        }
        for (c, h) in headers.iter().skip(1).enumerate() {
            if h != format!("f{}", c + 1) {
                return Err(FeatureCsvError::BadHeader);
            }
        }
    }
    let mut symbols = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        symbols.push(record[0].to_string());
        let mut row = Vec::with_capacity(record.len() - 1);
        for v in record.iter().skip(1) {
            row.push(
                v.parse::<f64>()
                    .map_err(|_| FeatureCsvError::BadFloat(v.to_string()))?,
            );
        }
        rows.push(row);
    }
    let alphabet = Alphabet::new(symbols)?;
    Ok(FeatureTable::from_rows(alphabet, &rows)?)
}
