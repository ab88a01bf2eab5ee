//! Canonical dependence kernel and its exact modal decomposition.
//!
//! The CDK of a joint distribution is `γ(x, y) = P(x,y) / (P_X(x) P_Y(y)) - 1`.
//! Dividing the joint by the square roots of its marginals instead gives the
//! whitened matrix `B(x, y) = P(x,y) / sqrt(P_X(x) P_Y(y))`, whose top
//! singular triple is `(1, sqrt(P_X), sqrt(P_Y))`. Removing that mode and
//! taking the SVD of the remainder yields the singular values `σ_i` and the
//! maximal correlation functions `f*_i, g*_i` exactly. This whitened route is
//! the rank/feature oracle for everything learned elsewhere in the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{canonicalize, from_csv, FeatureCsvError, FeatureTable};
use crate::probability::{mutual_information, pushforward, Alphabet, JointDistribution, SymbolMap};

/// Default relative threshold separating true CDK rank from float noise.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CdkError {
    #[error("top whitened singular value {sigma} deviates from 1 beyond 1e-8")]
    DegenerateTopMode { sigma: f64 },
    #[error("singular value decomposition failed to converge")]
    DecompositionFailed,
}

/// The CDK values together with the alphabets they index.
#[derive(Debug, Clone)]
pub struct CdkMatrix {
    values: DMatrix<f64>,
    x: Alphabet,
    y: Alphabet,
}

impl CdkMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn alphabet_x(&self) -> &Alphabet {
        &self.x
    }

    pub fn alphabet_y(&self) -> &Alphabet {
        &self.y
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }
}

/// Entrywise `P(x,y) / (P_X(x) P_Y(y)) - 1`.
pub fn cdk_matrix(j: &JointDistribution) -> CdkMatrix {
    let values = DMatrix::from_fn(j.nx(), j.ny(), |i, l| {
        j.prob(i, l) / (j.p_x()[i] * j.p_y()[l]) - 1.0
    });
    CdkMatrix {
        values,
        x: j.alphabet_x().clone(),
        y: j.alphabet_y().clone(),
    }
}

/// Modal decomposition `γ(x,y) = Σ_i σ_i f*_i(x) g*_i(y)` with
/// `σ_1 >= ... >= σ_K > 0` and `E[f*_i f*_j] = E[g*_i g*_j] = δ_ij`.
#[derive(Debug, Clone)]
pub struct ModalDecomposition {
    pub sigma: Vec<f64>,
    f_star: FeatureTable,
    g_star: FeatureTable,
}

impl ModalDecomposition {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn f_star(&self) -> &FeatureTable {
        &self.f_star
    }

    pub fn g_star(&self) -> &FeatureTable {
        &self.g_star
    }

    /// Builds a decomposition from parts; used when transporting modes along
    /// a decodable relabeling, where the result is known to stay valid.
    pub fn from_parts(sigma: Vec<f64>, f_star: FeatureTable, g_star: FeatureTable) -> Self {
        assert_eq!(sigma.len(), f_star.dim());
        assert_eq!(sigma.len(), g_star.dim());
        ModalDecomposition {
            sigma,
            f_star,
            g_star,
        }
    }
}

/// Decomposes the CDK of `j`, keeping modes with singular value above
/// `rank_tol` relative to the largest (absolute when the remainder is zero).
///
/// The top whitened mode must sit within `1e-8` of 1, otherwise the input is
/// reported as [`CdkError::DegenerateTopMode`].
pub fn modal_decompose(
    j: &JointDistribution,
    rank_tol: f64,
) -> Result<ModalDecomposition, CdkError> {
    let sqrt_px = j.p_x().map(f64::sqrt);
    let sqrt_py = j.p_y().map(f64::sqrt);
    let whitened = DMatrix::from_fn(j.nx(), j.ny(), |i, l| j.prob(i, l) / (sqrt_px[i] * sqrt_py[l]));

    let top = crate::numeric::singular_values(&whitened)
        .first()
        .copied()
        .unwrap_or(f64::NAN);
    if !(top - 1.0).abs().is_finite() {
        return Err(CdkError::DecompositionFailed);
    }
    if (top - 1.0).abs() > 1e-8 {
        return Err(CdkError::DegenerateTopMode { sigma: top });
    }

    // Deflate the known top mode exactly, then decompose the remainder.
    let deflated = &whitened - &sqrt_px * sqrt_py.transpose();
    let svd = crate::numeric::jacobi_svd(&deflated);

    // Relative cutoff against the leading remainder mode; when the whole
    // remainder sits at rounding level (independent pairs), fall back to the
    // absolute tolerance so noise modes are not promoted to rank.
    let s_max = svd.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = if s_max > 1e-12 { rank_tol * s_max } else { rank_tol };
    let max_rank = j.nx().min(j.ny()) - 1;
    let kept: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cutoff)
        .take(max_rank)
        .collect();

    let sigma: Vec<f64> = kept.iter().map(|&i| svd.singular_values[i]).collect();
    let fv = DMatrix::from_fn(j.nx(), kept.len(), |x, c| svd.u[(x, kept[c])] / sqrt_px[x]);
    let gv = DMatrix::from_fn(j.ny(), kept.len(), |y, c| svd.v[(y, kept[c])] / sqrt_py[y]);
    let f_star = FeatureTable::new(j.alphabet_x().clone(), fv).expect("finite modes");
    let g_star = FeatureTable::new(j.alphabet_y().clone(), gv).expect("finite modes");
    let (f_star, g_star) =
        canonicalize(&f_star, &g_star, j, None).expect("alphabets match by construction");
    Ok(ModalDecomposition {
        sigma,
        f_star,
        g_star,
    })
}

/// Reassembles `Σ_i σ_i f*_i(x) g*_i(y)`.
pub fn reconstruct_cdk(md: &ModalDecomposition) -> CdkMatrix {
    let nx = md.f_star.len();
    let ny = md.g_star.len();
    let values = DMatrix::from_fn(nx, ny, |x, y| {
        (0..md.rank())
            .map(|i| md.sigma[i] * md.f_star.values()[(x, i)] * md.g_star.values()[(y, i)])
            .sum()
    });
    CdkMatrix {
        values,
        x: md.f_star.alphabet().clone(),
        y: md.g_star.alphabet().clone(),
    }
}

/// The HGR maximal correlation `σ_1`, or 0 for independent pairs.
pub fn maximal_correlation(j: &JointDistribution) -> f64 {
    match modal_decompose(j, DEFAULT_RANK_TOL) {
        Ok(md) => md.sigma.first().copied().unwrap_or(0.0),
        Err(_) => f64::NAN,
    }
}

/// Mutual information of the pair `(f*(X), g*(Y))`, computed from the exact
/// pushforward of `j` onto the mode-row groupings.
pub fn interface_mutual_information(j: &JointDistribution, md: &ModalDecomposition) -> f64 {
    let (ax, gx) = md.f_star.image_alphabet();
    let (ay, gy) = md.g_star.image_alphabet();
    let mx = SymbolMap::new(j.alphabet_x(), ax, gx).expect("encoder is total");
    let my = SymbolMap::new(j.alphabet_y(), ay, gy).expect("encoder is total");
    mutual_information(&pushforward(j, &mx, &my))
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FeatureRef {
    Inline { symbols: Vec<String>, rows: Vec<Vec<f64>> },
    Path(String),
}

#[derive(Serialize, Deserialize)]
struct DecompositionJson {
    sigma: Vec<f64>,
    f_star: FeatureRef,
    g_star: FeatureRef,
}

#[derive(Debug, Error)]
pub enum DecompositionIoError {
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] FeatureCsvError),
    #[error("could not read feature CSV {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad feature table: {0}")]
    BadTable(String),
}

impl ModalDecomposition {
    /// Serializes with inline feature rows.
    pub fn to_json(&self) -> String {
        let inline = |t: &FeatureTable| FeatureRef::Inline {
            symbols: t.alphabet().symbols().to_vec(),
            rows: (0..t.len()).map(|i| t.row(i)).collect(),
        };
        serde_json::to_string_pretty(&DecompositionJson {
            sigma: self.sigma.clone(),
            f_star: inline(&self.f_star),
            g_star: inline(&self.g_star),
        })
        .expect("serializable")
    }

    /// Parses the decomposition JSON schema; feature tables may be inline
    /// rows or paths to feature CSV files.
    pub fn from_json(text: &str) -> Result<Self, DecompositionIoError> {
        let raw: DecompositionJson = serde_json::from_str(text)?;
        let load = |r: FeatureRef| -> Result<FeatureTable, DecompositionIoError> {
            match r {
                FeatureRef::Inline { symbols, rows } => {
                    let alphabet = Alphabet::new(symbols)
                        .map_err(|e| DecompositionIoError::BadTable(e.to_string()))?;
                    FeatureTable::from_rows(alphabet, &rows)
                        .map_err(|e| DecompositionIoError::BadTable(e.to_string()))
                }
                FeatureRef::Path(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|source| DecompositionIoError::Io {
                            path: path.clone(),
                            source,
                        })?;
                    Ok(from_csv(&text)?)
                }
            }
        };
        let f_star = load(raw.f_star)?;
        let g_star = load(raw.g_star)?;
        if raw.sigma.len() != f_star.dim() || raw.sigma.len() != g_star.dim() {
            return Err(DecompositionIoError::BadTable(
                "sigma length does not match table dims".into(),
            ));
        }
        Ok(ModalDecomposition {
            sigma: raw.sigma,
            f_star,
            g_star,
        })
    }
}

/// Checked orthonormality residual `max |E[h_i h_j] - δ_ij|` of a table.
pub fn orthonormality_residual(t: &FeatureTable, weights: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..t.dim() {
        for b in 0..t.dim() {
            let mut e = 0.0;
            for i in 0..t.len() {
                e += weights[i] * t.values()[(i, a)] * t.values()[(i, b)];
            }
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((e - target).abs());
        }
    }
    worst
}
