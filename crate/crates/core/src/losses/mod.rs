//! Loss expression trees over feature-table pairs, with exact evaluation.
//!
//! A [`LossExpr`] is a combinator tree whose leaves are expectation
//! functionals of `(f, g)` under a joint distribution. Extended values are
//! explicit: hard constraints contribute `0` or `+∞` through characteristic
//! terms, never through penalties. The [`checks`] module provides randomized
//! verifiers for the two defining axioms of the family (substitution under
//! deterministic relabelings, monotonicity under conditional projection onto
//! jointly sufficient statistics); [`grad`] supplies exact (sub)gradients of
//! every smooth term.

pub mod checks;
pub mod grad;
pub mod parse;
pub mod project;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::features::{check_alphabet, FeatureError, FeatureTable};
use crate::probability::JointDistribution;

pub use checks::{check_projection_axiom, check_substitution_axiom, ProjectionReport, SubstitutionReport};
pub use grad::{finite_diff_check, grad};
pub use parse::parse_loss;

/// Feature-value tolerance used when testing hard-constraint membership.
pub const INDICATOR_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("feature dim {found} does not match the loss dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("gradient requested at a point of infinite loss")]
    InfiniteLoss,
    #[error("aggregate weight {0} is negative")]
    NegativeWeight(f64),
    #[error("nesting weight {0} is negative")]
    NegativeNestingWeight(f64),
    #[error("constraint index {index} out of range for dim {dim}")]
    BadConstraintIndex { index: usize, dim: usize },
}

/// A finite real or `+∞`; infinities arise only from characteristic terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedReal {
    Finite(f64),
    PosInf,
}

impl ExtendedReal {
    pub fn is_finite(&self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(*v),
            ExtendedReal::PosInf => None,
        }
    }

    /// Adds with absorbing infinity.
    pub fn add(self, other: ExtendedReal) -> ExtendedReal {
        match (self, other) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => ExtendedReal::Finite(a + b),
            _ => ExtendedReal::PosInf,
        }
    }

    /// Scales by a nonnegative weight; `0 * ∞ = 0` by the extended-value
    /// convention for dropped terms.
    pub fn scale(self, w: f64) -> ExtendedReal {
        if w == 0.0 {
            return ExtendedReal::Finite(0.0);
        }
        match self {
            ExtendedReal::Finite(v) => ExtendedReal::Finite(w * v),
            ExtendedReal::PosInf => ExtendedReal::PosInf,
        }
    }
}

/// Named convex scalar maps admitted in product-expectation atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvexScalarMap {
    /// `t^2`
    Square,
    /// `|t|^p`, `p >= 1`
    AbsPow(f64),
    /// `e^t`
    Exp,
    /// `ln(1 + e^t)`
    Softplus,
    /// KL conjugate `e^(t-1)`
    KlConjugate,
    /// chi-square conjugate `t^2/4 + t`
    Chi2Conjugate,
}

impl ConvexScalarMap {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            ConvexScalarMap::Square => t * t,
            ConvexScalarMap::AbsPow(p) => t.abs().powf(*p),
            ConvexScalarMap::Exp => t.exp(),
            ConvexScalarMap::Softplus => {
                if t > 30.0 {
                    t
                } else {
                    t.exp().ln_1p()
                }
            }
            ConvexScalarMap::KlConjugate => (t - 1.0).exp(),
            ConvexScalarMap::Chi2Conjugate => t * t / 4.0 + t,
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            ConvexScalarMap::Square => 2.0 * t,
            ConvexScalarMap::AbsPow(p) => {
                if t == 0.0 {
                    0.0
                } else {
                    p * t.signum() * t.abs().powf(p - 1.0)
                }
            }
            ConvexScalarMap::Exp => t.exp(),
            ConvexScalarMap::Softplus => 1.0 / (1.0 + (-t).exp()),
            ConvexScalarMap::KlConjugate => (t - 1.0).exp(),
            ConvexScalarMap::Chi2Conjugate => t / 2.0 + 1.0,
        }
    }
}

/// Jointly convex built-in distances for pairwise atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairDistance {
    /// `‖a - b‖²`
    Squared,
    /// `‖a - b‖_p`, `p >= 1`
    PNorm(f64),
}

/// Norm-based regularization penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormPenalty {
    /// `‖v‖²`
    SquaredL2,
    /// `‖v‖_p`, `p >= 1`
    PNorm(f64),
}

/// Which table a regularizer or constraint applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSide {
    F,
    G,
}

/// Convex constraint sets enforced through characteristic terms and, during
/// optimization, by exact projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintKind {
    /// Euclidean ball of the given radius, per feature instance.
    Ball2 { radius: f64 },
    /// Componentwise nonnegativity, per feature instance.
    NonnegativeOrthant,
    /// Pins coordinate `index` (0-based) of every feature instance to `value`.
    FixedCoordinate { index: usize, value: f64 },
    /// Pins the expectation of the table to the zero vector.
    ZeroMean,
}

/// Built-in monotone wrappers `ν(Γ, E[f], E[g], Λ_fg)`, nondecreasing in the
/// first argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentMap {
    Identity,
    /// `Γ + c · tr(Λ_fg)`
    AddTraceLambda { c: f64 },
    /// `Γ + cf · ‖E[f]‖² + cg · ‖E[g]‖²`
    AddMeanSquares { cf: f64, cg: f64 },
    /// `e^Γ`
    Exp,
}

/// A loss functional over `(f, g)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum LossExpr {
    /// `E_{P_XY} [ dist(f(X), g(Y)) ]`
    PairwiseJoint { k: usize, map: PairDistance },
    /// `E_{P_X P_Y} [ dist(f(X), g(Y)) ]`
    PairwiseProduct { k: usize, map: PairDistance },
    /// `E[fᵀg] - E[f]ᵀE[g] - ½ tr(Λ_f Λ_g)`; `negated` turns the score into
    /// the loss `-H`.
    HScore { k: usize, negated: bool },
    /// `Σ_i c_i H(f_[i], g_[i])` over nested prefixes (`c_i = 1` when
    /// `weights` is `None`); `negated` as above.
    NestedHScore {
        k: usize,
        negated: bool,
        weights: Option<Vec<f64>>,
    },
    /// `-E[fᵀg] + E_X[ln E_Y e^{fᵀ(X)g(Y)}] + E[I_{1}(f_1(X))]`
    LogLoss { k: usize },
    /// `E[(1 - fᵀg)⁺] + λ E‖g_[d]‖² + E[I_{1}(f_k(X))] + I_{0}(E[g])`,
    /// with `k = d + 1`.
    Svm { d: usize, lambda: f64 },
    /// `-E_{P_XY}[fᵀg] + E_{P_X P_Y}[u(fᵀ(X)g(Y))]`
    FDiv { k: usize, u: ConvexScalarMap },
    /// `weight · E[penalty(side table)]`
    NormReg {
        side: FeatureSide,
        weight: f64,
        penalty: NormPenalty,
    },
    /// Characteristic term of a convex constraint.
    Constraint { side: FeatureSide, set: ConstraintKind },
    /// `ν(inner(f, g), E[f], E[g], Λ_fg)`
    MomentWrapped { inner: Box<LossExpr>, nu: MomentMap },
    /// `Σ_i w_i L_i` with `w_i >= 0`; infinity is absorbing.
    Aggregate { terms: Vec<(f64, LossExpr)> },
    /// Deliberate non-example that reads raw symbol indices:
    /// `Σ_x P_X(x) f_1(x) · index(x)`. Fails both axioms; shipped so the
    /// checkers have a guaranteed counterexample.
    RawIndexProbe { k: usize },
}

impl LossExpr {
    /// The negated H-score loss of dimension `k`.
    pub fn neg_h_score(k: usize) -> LossExpr {
        LossExpr::HScore { k, negated: true }
    }

    /// The negated nested H-score loss of dimension `k` with unit weights.
    pub fn neg_nested_h_score(k: usize) -> LossExpr {
        LossExpr::NestedHScore {
            k,
            negated: true,
            weights: None,
        }
    }

    /// `-H_nest(f, g) + λ (E‖f‖² + E‖g‖²)`, the workhorse regular loss.
    pub fn nested_h_l2(k: usize, lambda: f64) -> LossExpr {
        LossExpr::Aggregate {
            terms: vec![
                (1.0, LossExpr::neg_nested_h_score(k)),
                (
                    lambda,
                    LossExpr::NormReg {
                        side: FeatureSide::F,
                        weight: 1.0,
                        penalty: NormPenalty::SquaredL2,
                    },
                ),
                (
                    lambda,
                    LossExpr::NormReg {
                        side: FeatureSide::G,
                        weight: 1.0,
                        penalty: NormPenalty::SquaredL2,
                    },
                ),
            ],
        }
    }

    /// The feature dimension this loss pins down, if any. Regularizers and
    /// constraints apply at any dimension.
    pub fn dim(&self) -> Option<usize> {
        match self {
            LossExpr::PairwiseJoint { k, .. }
            | LossExpr::PairwiseProduct { k, .. }
            | LossExpr::HScore { k, .. }
            | LossExpr::NestedHScore { k, .. }
            | LossExpr::LogLoss { k }
            | LossExpr::FDiv { k, .. }
            | LossExpr::RawIndexProbe { k } => Some(*k),
            LossExpr::Svm { d, .. } => Some(d + 1),
            LossExpr::NormReg { .. } | LossExpr::Constraint { .. } => None,
            LossExpr::MomentWrapped { inner, .. } => inner.dim(),
            LossExpr::Aggregate { terms } => terms.iter().find_map(|(_, t)| t.dim()),
        }
    }

    /// Every hard constraint in the tree, including the ones built into the
    /// extended log loss and SVM atoms. Optimizers enforce these by exact
    /// projection.
    pub fn constraints(&self) -> Vec<(FeatureSide, ConstraintKind)> {
        let mut out = Vec::new();
        self.collect_constraints(&mut out);
        out
    }

    fn collect_constraints(&self, out: &mut Vec<(FeatureSide, ConstraintKind)>) {
        match self {
            LossExpr::Constraint { side, set } => out.push((*side, *set)),
            LossExpr::LogLoss { .. } => out.push((
                FeatureSide::F,
                ConstraintKind::FixedCoordinate { index: 0, value: 1.0 },
            )),
            LossExpr::Svm { d, .. } => {
                out.push((
                    FeatureSide::F,
                    ConstraintKind::FixedCoordinate { index: *d, value: 1.0 },
                ));
                out.push((FeatureSide::G, ConstraintKind::ZeroMean));
            }
            LossExpr::MomentWrapped { inner, .. } => inner.collect_constraints(out),
            LossExpr::Aggregate { terms } => {
                for (w, t) in terms {
                    if *w > 0.0 {
                        t.collect_constraints(out);
                    }
                }
            }
            _ => {}
        }
    }

    /// True when the tree contains a hinge term (nonsmooth at its kink).
    pub fn has_kinks(&self) -> bool {
        match self {
            LossExpr::Svm { .. } => true,
            LossExpr::PairwiseJoint { map, .. } | LossExpr::PairwiseProduct { map, .. } => {
                matches!(map, PairDistance::PNorm(_))
            }
            LossExpr::NormReg { penalty, .. } => matches!(penalty, NormPenalty::PNorm(_)),
            LossExpr::MomentWrapped { inner, .. } => inner.has_kinks(),
            LossExpr::Aggregate { terms } => terms.iter().any(|(_, t)| t.has_kinks()),
            _ => false,
        }
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), LossError> {
    if expected != found {
        return Err(LossError::DimMismatch { expected, found });
    }
    Ok(())
}

/// Shared per-evaluation views.
pub(crate) struct EvalContext<'a> {
    pub f: &'a DMatrix<f64>,
    pub g: &'a DMatrix<f64>,
    pub j: &'a JointDistribution,
}

impl<'a> EvalContext<'a> {
    fn new(
        f: &'a FeatureTable,
        g: &'a FeatureTable,
        j: &'a JointDistribution,
    ) -> Result<Self, LossError> {
        check_alphabet(f, j.alphabet_x(), "f vs X")?;
        check_alphabet(g, j.alphabet_y(), "g vs Y")?;
        if f.dim() != g.dim() {
            return Err(LossError::DimMismatch {
                expected: f.dim(),
                found: g.dim(),
            });
        }
        Ok(EvalContext {
            f: f.values(),
            g: g.values(),
            j,
        })
    }

    pub fn k(&self) -> usize {
        self.f.ncols()
    }

    /// `E[fᵀ(X) g(Y)] = tr(Fᵀ P G)`.
    pub fn e_joint(&self) -> f64 {
        let pg = self.j.mass() * self.g;
        self.f.zip_fold(&pg, 0.0, |acc, a, b| acc + a * b)
    }

    pub fn mean_f(&self) -> DVector<f64> {
        self.f.transpose() * self.j.p_x()
    }

    pub fn mean_g(&self) -> DVector<f64> {
        self.g.transpose() * self.j.p_y()
    }

    pub fn lambda_f(&self) -> DMatrix<f64> {
        weighted_gram(self.f, self.j.p_x())
    }

    pub fn lambda_g(&self) -> DMatrix<f64> {
        weighted_gram(self.g, self.j.p_y())
    }
}

pub(crate) fn weighted_gram(t: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let k = t.ncols();
    let mut out = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let mut acc = 0.0;
            for i in 0..t.nrows() {
                acc += w[i] * t[(i, a)] * t[(i, b)];
            }
            out[(a, b)] = acc;
            out[(b, a)] = acc;
        }
    }
    out
}

/// Validates alphabets and tree dimensions without evaluating.
pub(crate) fn validate_pair(
    l: &LossExpr,
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
) -> Result<(), LossError> {
    check_alphabet(f, j.alphabet_x(), "f vs X")?;
    check_alphabet(g, j.alphabet_y(), "g vs Y")?;
    if f.dim() != g.dim() {
        return Err(LossError::DimMismatch {
            expected: f.dim(),
            found: g.dim(),
        });
    }
    check_tree_dims(l, f.dim())
}

fn check_tree_dims(l: &LossExpr, k: usize) -> Result<(), LossError> {
    match l {
        LossExpr::MomentWrapped { inner, .. } => check_tree_dims(inner, k),
        LossExpr::Aggregate { terms } => {
            for (w, t) in terms {
                if *w < 0.0 {
                    return Err(LossError::NegativeWeight(*w));
                }
                check_tree_dims(t, k)?;
            }
            Ok(())
        }
        _ => match l.dim() {
            Some(expected) if expected != k => Err(LossError::DimMismatch { expected, found: k }),
            _ => Ok(()),
        },
    }
}

/// Evaluates the loss exactly, including characteristic terms.
pub fn eval(
    l: &LossExpr,
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
) -> Result<ExtendedReal, LossError> {
    let ctx = EvalContext::new(f, g, j)?;
    eval_inner(l, &ctx, true)
}

/// Evaluates only the smooth part: characteristic terms are dropped (they are
/// maintained by projection during optimization).
pub fn eval_smooth(
    l: &LossExpr,
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
) -> Result<f64, LossError> {
    let ctx = EvalContext::new(f, g, j)?;
    match eval_inner(l, &ctx, false)? {
        ExtendedReal::Finite(v) => Ok(v),
        ExtendedReal::PosInf => unreachable!("smooth evaluation never produces infinity"),
    }
}

fn eval_inner(
    l: &LossExpr,
    ctx: &EvalContext,
    with_indicators: bool,
) -> Result<ExtendedReal, LossError> {
    let fin = ExtendedReal::Finite;
    match l {
        LossExpr::PairwiseJoint { k, map } => {
            check_dim(*k, ctx.k())?;
            Ok(fin(pairwise_value(ctx, map, PairWeights::Joint)))
        }
        LossExpr::PairwiseProduct { k, map } => {
            check_dim(*k, ctx.k())?;
            Ok(fin(pairwise_value(ctx, map, PairWeights::Product)))
        }
        LossExpr::HScore { k, negated } => {
            check_dim(*k, ctx.k())?;
            let h = h_score_value(ctx);
            Ok(fin(if *negated { -h } else { h }))
        }
        LossExpr::NestedHScore { k, negated, weights } => {
            check_dim(*k, ctx.k())?;
            let c = nesting_weights(weights, *k)?;
            let h = nested_h_value(ctx, &c);
            Ok(fin(if *negated { -h } else { h }))
        }
        LossExpr::LogLoss { k } => {
            check_dim(*k, ctx.k())?;
            let mut v = fin(log_loss_smooth(ctx));
            if with_indicators {
                v = v.add(fixed_coordinate_indicator(ctx.f, 0, 1.0));
            }
            Ok(v)
        }
        LossExpr::Svm { d, lambda } => {
            check_dim(*d + 1, ctx.k())?;
            let mut v = fin(svm_smooth(ctx, *d, *lambda));
            if with_indicators {
                v = v.add(fixed_coordinate_indicator(ctx.f, *d, 1.0));
                v = v.add(zero_mean_indicator(&ctx.mean_g()));
            }
            Ok(v)
        }
        LossExpr::FDiv { k, u } => {
            check_dim(*k, ctx.k())?;
            Ok(fin(fdiv_value(ctx, u)))
        }
        LossExpr::NormReg { side, weight, penalty } => {
            let (t, w) = side_table(ctx, *side);
            let mut acc = 0.0;
            for i in 0..t.nrows() {
                let row: Vec<f64> = (0..t.ncols()).map(|c| t[(i, c)]).collect();
                acc += w[i] * penalty_value(penalty, &row);
            }
            Ok(fin(weight * acc))
        }
        LossExpr::Constraint { side, set } => {
            if !with_indicators {
                return Ok(fin(0.0));
            }
            let (t, w) = side_table(ctx, *side);
            Ok(constraint_indicator(set, t, w)?)
        }
        LossExpr::MomentWrapped { inner, nu } => {
            let base = eval_inner(inner, ctx, with_indicators)?;
            let v = match base {
                ExtendedReal::PosInf => return Ok(ExtendedReal::PosInf),
                ExtendedReal::Finite(v) => v,
            };
            Ok(fin(apply_moment_map(nu, v, ctx)))
        }
        LossExpr::Aggregate { terms } => {
            let mut acc = fin(0.0);
            for (w, t) in terms {
                if *w < 0.0 {
                    return Err(LossError::NegativeWeight(*w));
                }
                acc = acc.add(eval_inner(t, ctx, with_indicators)?.scale(*w));
            }
            Ok(acc)
        }
        LossExpr::RawIndexProbe { k } => {
            check_dim(*k, ctx.k())?;
            let mut acc = 0.0;
            for x in 0..ctx.f.nrows() {
                acc += ctx.j.p_x()[x] * ctx.f[(x, 0)] * x as f64;
            }
            Ok(fin(acc))
        }
    }
}

pub(crate) fn nesting_weights(weights: &Option<Vec<f64>>, k: usize) -> Result<Vec<f64>, LossError> {
    match weights {
        None => Ok(vec![1.0; k]),
        Some(c) => {
            if c.len() != k {
                return Err(LossError::DimMismatch {
                    expected: k,
                    found: c.len(),
                });
            }
            if let Some(&w) = c.iter().find(|&&w| w < 0.0) {
                return Err(LossError::NegativeNestingWeight(w));
            }
            Ok(c.clone())
        }
    }
}

pub(crate) enum PairWeights {
    Joint,
    Product,
}

fn pair_weight(ctx: &EvalContext, weights: &PairWeights, x: usize, y: usize) -> f64 {
    match weights {
        PairWeights::Joint => ctx.j.prob(x, y),
        PairWeights::Product => ctx.j.p_x()[x] * ctx.j.p_y()[y],
    }
}

fn pairwise_value(ctx: &EvalContext, map: &PairDistance, weights: PairWeights) -> f64 {
    let mut acc = 0.0;
    let k = ctx.k();
    for x in 0..ctx.f.nrows() {
        for y in 0..ctx.g.nrows() {
            let w = pair_weight(ctx, &weights, x, y);
            if w == 0.0 {
                continue;
            }
            let diff: Vec<f64> = (0..k).map(|c| ctx.f[(x, c)] - ctx.g[(y, c)]).collect();
            acc += w * match map {
                PairDistance::Squared => diff.iter().map(|v| v * v).sum::<f64>(),
                PairDistance::PNorm(p) => pnorm(&diff, *p),
            };
        }
    }
    acc
}

pub(crate) fn pnorm(v: &[f64], p: f64) -> f64 {
    v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

fn penalty_value(penalty: &NormPenalty, row: &[f64]) -> f64 {
    match penalty {
        NormPenalty::SquaredL2 => row.iter().map(|v| v * v).sum(),
        NormPenalty::PNorm(p) => pnorm(row, *p),
    }
}

fn h_score_value(ctx: &EvalContext) -> f64 {
    let mean_term = ctx.mean_f().dot(&ctx.mean_g());
    let tr = (ctx.lambda_f() * ctx.lambda_g()).trace();
    ctx.e_joint() - mean_term - 0.5 * tr
}

fn nested_h_value(ctx: &EvalContext, c: &[f64]) -> f64 {
    let k = ctx.k();
    // Per-dimension pieces; prefix i sums dims/pairs up to i.
    let pg = ctx.j.mass() * ctx.g;
    let mut e_dim = vec![0.0; k];
    for x in 0..ctx.f.nrows() {
        for d in 0..k {
            e_dim[d] += ctx.f[(x, d)] * pg[(x, d)];
        }
    }
    let mf = ctx.mean_f();
    let mg = ctx.mean_g();
    let lf = ctx.lambda_f();
    let lg = ctx.lambda_g();
    let mut total = 0.0;
    let mut linear = 0.0;
    let mut quad = 0.0;
    for i in 0..k {
        linear += e_dim[i] - mf[i] * mg[i];
        // New pairs (a, b) with max(a, b) = i.
        for a in 0..=i {
            let w = if a == i { 1.0 } else { 2.0 };
            quad += w * lf[(a, i)] * lg[(a, i)];
        }
        total += c[i] * (linear - 0.5 * quad);
    }
    total
}

fn log_loss_smooth(ctx: &EvalContext) -> f64 {
    let m = ctx.f * ctx.g.transpose();
    let mut acc = -ctx.e_joint();
    for x in 0..m.nrows() {
        acc += ctx.j.p_x()[x] * row_log_mean_exp(ctx, &m, x);
    }
    acc
}

/// `ln E_Y e^{M[x, Y]}`, max-shifted for stability.
fn row_log_mean_exp(ctx: &EvalContext, m: &DMatrix<f64>, x: usize) -> f64 {
    let top = (0..m.ncols()).map(|y| m[(x, y)]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for y in 0..m.ncols() {
        z += ctx.j.p_y()[y] * (m[(x, y)] - top).exp();
    }
    top + z.ln()
}

fn svm_smooth(ctx: &EvalContext, d: usize, lambda: f64) -> f64 {
    let m = ctx.f * ctx.g.transpose();
    let mut acc = 0.0;
    for x in 0..m.nrows() {
        for y in 0..m.ncols() {
            acc += ctx.j.prob(x, y) * (1.0 - m[(x, y)]).max(0.0);
        }
    }
    for y in 0..ctx.g.nrows() {
        let sq: f64 = (0..d).map(|c| ctx.g[(y, c)] * ctx.g[(y, c)]).sum();
        acc += lambda * ctx.j.p_y()[y] * sq;
    }
    acc
}

fn fdiv_value(ctx: &EvalContext, u: &ConvexScalarMap) -> f64 {
    let m = ctx.f * ctx.g.transpose();
    let mut acc = -ctx.e_joint();
    for x in 0..m.nrows() {
        for y in 0..m.ncols() {
            acc += ctx.j.p_x()[x] * ctx.j.p_y()[y] * u.value(m[(x, y)]);
        }
    }
    acc
}

fn side_table<'a>(ctx: &'a EvalContext, side: FeatureSide) -> (&'a DMatrix<f64>, &'a DVector<f64>) {
    match side {
        FeatureSide::F => (ctx.f, ctx.j.p_x()),
        FeatureSide::G => (ctx.g, ctx.j.p_y()),
    }
}

fn fixed_coordinate_indicator(t: &DMatrix<f64>, index: usize, value: f64) -> ExtendedReal {
    for i in 0..t.nrows() {
        if (t[(i, index)] - value).abs() > INDICATOR_TOL {
            return ExtendedReal::PosInf;
        }
    }
    ExtendedReal::Finite(0.0)
}

fn zero_mean_indicator(mean: &DVector<f64>) -> ExtendedReal {
    if mean.iter().any(|v| v.abs() > INDICATOR_TOL) {
        ExtendedReal::PosInf
    } else {
        ExtendedReal::Finite(0.0)
    }
}

fn constraint_indicator(
    set: &ConstraintKind,
    t: &DMatrix<f64>,
    w: &DVector<f64>,
) -> Result<ExtendedReal, LossError> {
    match set {
        ConstraintKind::Ball2 { radius } => {
            for i in 0..t.nrows() {
                let n: f64 = (0..t.ncols()).map(|c| t[(i, c)] * t[(i, c)]).sum::<f64>().sqrt();
                if n > radius * (1.0 + INDICATOR_TOL) + INDICATOR_TOL {
                    return Ok(ExtendedReal::PosInf);
                }
            }
            Ok(ExtendedReal::Finite(0.0))
        }
        ConstraintKind::NonnegativeOrthant => {
            for i in 0..t.nrows() {
                for c in 0..t.ncols() {
                    if t[(i, c)] < -INDICATOR_TOL {
                        return Ok(ExtendedReal::PosInf);
                    }
                }
            }
            Ok(ExtendedReal::Finite(0.0))
        }
        ConstraintKind::FixedCoordinate { index, value } => {
            if *index >= t.ncols() {
                return Err(LossError::BadConstraintIndex {
                    index: *index,
                    dim: t.ncols(),
                });
            }
            Ok(fixed_coordinate_indicator(t, *index, *value))
        }
        ConstraintKind::ZeroMean => {
            let mean = t.transpose() * w;
            Ok(zero_mean_indicator(&mean))
        }
    }
}

fn apply_moment_map(nu: &MomentMap, v: f64, ctx: &EvalContext) -> f64 {
    match nu {
        MomentMap::Identity => v,
        MomentMap::AddTraceLambda { c } => v + c * ctx.e_joint(),
        MomentMap::AddMeanSquares { cf, cg } => {
            v + cf * ctx.mean_f().norm_squared() + cg * ctx.mean_g().norm_squared()
        }
        MomentMap::Exp => v.exp(),
    }
}

/// The registry of built-in loss atoms at reference dimensions, in the
/// direction in which each is a loss to be minimized. The axiom checkers and
/// the acceptance suite run over exactly this list.
pub fn builtin_atoms() -> Vec<(&'static str, LossExpr)> {
    use LossExpr::*;
    vec![
        ("dist2(k=2)", PairwiseJoint { k: 2, map: PairDistance::Squared }),
        ("distp(k=2,p=3)", PairwiseJoint { k: 2, map: PairDistance::PNorm(3.0) }),
        ("dist2_prod(k=2)", PairwiseProduct { k: 2, map: PairDistance::Squared }),
        ("distp_prod(k=2,p=1.5)", PairwiseProduct { k: 2, map: PairDistance::PNorm(1.5) }),
        ("h(k=2)", LossExpr::neg_h_score(2)),
        ("nested_h(k=2)", LossExpr::neg_nested_h_score(2)),
        ("nested_h(k=3)+l2", LossExpr::nested_h_l2(3, 0.01)),
        ("logloss(k=3)", LogLoss { k: 3 }),
        ("svm(d=2,lambda=0.1)", Svm { d: 2, lambda: 0.1 }),
        ("fdiv(u=kl,k=2)", FDiv { k: 2, u: ConvexScalarMap::KlConjugate }),
        ("fdiv(u=chi2,k=2)", FDiv { k: 2, u: ConvexScalarMap::Chi2Conjugate }),
        ("fdiv(u=square,k=2)", FDiv { k: 2, u: ConvexScalarMap::Square }),
        ("fdiv(u=softplus,k=2)", FDiv { k: 2, u: ConvexScalarMap::Softplus }),
        ("fdiv(u=exp,k=1)", FDiv { k: 1, u: ConvexScalarMap::Exp }),
        ("l2(f)", NormReg { side: FeatureSide::F, weight: 1.0, penalty: NormPenalty::SquaredL2 }),
        ("lp(g,p=3)", NormReg { side: FeatureSide::G, weight: 1.0, penalty: NormPenalty::PNorm(3.0) }),
        (
            "dist2(k=2)+constrain(f,ball(p=2,r=1))",
            Aggregate {
                terms: vec![
                    (1.0, PairwiseJoint { k: 2, map: PairDistance::Squared }),
                    (1.0, Constraint { side: FeatureSide::F, set: ConstraintKind::Ball2 { radius: 1.0 } }),
                ],
            },
        ),
        (
            "dist2(k=2)+constrain(g,orthant)",
            Aggregate {
                terms: vec![
                    (1.0, PairwiseJoint { k: 2, map: PairDistance::Squared }),
                    (1.0, Constraint { side: FeatureSide::G, set: ConstraintKind::NonnegativeOrthant }),
                ],
            },
        ),
        (
            "wrapped(h(k=2))-tr",
            MomentWrapped {
                inner: Box::new(LossExpr::neg_h_score(2)),
                nu: MomentMap::AddTraceLambda { c: -1.0 },
            },
        ),
        (
            "wrapped(dist2(k=2))+means",
            MomentWrapped {
                inner: Box::new(PairwiseJoint { k: 2, map: PairDistance::Squared }),
                nu: MomentMap::AddMeanSquares { cf: 0.5, cg: 0.25 },
            },
        ),
    ]
}

/// Smooth atoms suitable for finite-difference gradient verification.
pub fn smooth_atoms() -> Vec<(&'static str, LossExpr)> {
    builtin_atoms()
        .into_iter()
        .filter(|(_, l)| !l.has_kinks() && l.constraints().is_empty())
        .collect()
}

/// A trainable non-D loss: strongly convex base plus the raw-index probe.
/// Its unique minimizer depends on symbol order, so learned representations
/// are not invariant under relabelings.
pub fn trainable_non_d_fixture(k: usize) -> LossExpr {
    LossExpr::Aggregate {
        terms: vec![
            (1.0, LossExpr::PairwiseJoint { k, map: PairDistance::Squared }),
            (
                0.5,
                LossExpr::NormReg {
                    side: FeatureSide::F,
                    weight: 1.0,
                    penalty: NormPenalty::SquaredL2,
                },
            ),
            (
                0.5,
                LossExpr::NormReg {
                    side: FeatureSide::G,
                    weight: 1.0,
                    penalty: NormPenalty::SquaredL2,
                },
            ),
            (1.0, LossExpr::RawIndexProbe { k }),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdk::{modal_decompose, DEFAULT_RANK_TOL};
    use crate::synth::dsbs;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn h_score_at_scaled_modes() {
        // H(c f*, c g*) = c² σ - c⁴ / 2; at c = sqrt(σ) this is σ²/2.
        let j = dsbs(0.5);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let c = md.sigma[0].sqrt();
        let f = FeatureTable::new(j.alphabet_x().clone(), md.f_star().values() * c).unwrap();
        let g = FeatureTable::new(j.alphabet_y().clone(), md.g_star().values() * c).unwrap();
        let l = LossExpr::HScore { k: 1, negated: false };
        let v = eval(&l, &f, &g, &j).unwrap().finite().unwrap();
        assert_abs_diff_eq!(v, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn log_loss_zero_features() {
        // f = (1), g = 0: both terms vanish and the indicator is satisfied.
        let j = dsbs(0.5);
        let f = FeatureTable::constant(j.alphabet_x().clone(), &[1.0]);
        let g = FeatureTable::constant(j.alphabet_y().clone(), &[0.0]);
        let v = eval(&LossExpr::LogLoss { k: 1 }, &f, &g, &j).unwrap();
        assert_abs_diff_eq!(v.finite().unwrap(), 0.0, epsilon = 1e-14);

        // Violating f_1 = 1 drives the value to infinity.
        let f_bad = FeatureTable::constant(j.alphabet_x().clone(), &[0.5]);
        let v = eval(&LossExpr::LogLoss { k: 1 }, &f_bad, &g, &j).unwrap();
        assert_eq!(v, ExtendedReal::PosInf);
    }

    #[test]
    fn svm_zero_embedding_value_is_one() {
        // h = 0, w = 0, b = 0 embeds to f = [0; 1], g = 0; the hinge sits at
        // margin zero so the loss equals 1.
        let j = dsbs(0.5);
        let f = FeatureTable::from_rows(
            j.alphabet_x().clone(),
            &[vec![0.0, 1.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let g = FeatureTable::zeros(j.alphabet_y().clone(), 2);
        let v = eval(&LossExpr::Svm { d: 1, lambda: 0.3 }, &f, &g, &j).unwrap();
        assert_abs_diff_eq!(v.finite().unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn nested_h_equals_sum_of_prefix_h() {
        let j = dsbs(0.5);
        let f = FeatureTable::from_rows(
            j.alphabet_x().clone(),
            &[vec![0.3, -1.2, 0.4], vec![-0.5, 0.8, 1.0]],
        )
        .unwrap();
        let g = FeatureTable::from_rows(
            j.alphabet_y().clone(),
            &[vec![1.1, 0.2, -0.3], vec![-0.9, 0.5, 0.6]],
        )
        .unwrap();
        let nested = LossExpr::NestedHScore { k: 3, negated: false, weights: None };
        let whole = eval(&nested, &f, &g, &j).unwrap().finite().unwrap();
        let mut expect = 0.0;
        for i in 1..=3 {
            let fi = f.slice_prefix(i).unwrap();
            let gi = g.slice_prefix(i).unwrap();
            let h = LossExpr::HScore { k: i, negated: false };
            expect += eval(&h, &fi, &gi, &j).unwrap().finite().unwrap();
        }
        assert_abs_diff_eq!(whole, expect, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_rejects_negative_weight() {
        let j = dsbs(0.5);
        let f = FeatureTable::zeros(j.alphabet_x().clone(), 1);
        let g = FeatureTable::zeros(j.alphabet_y().clone(), 1);
        let l = LossExpr::Aggregate {
            terms: vec![(-1.0, LossExpr::neg_h_score(1))],
        };
        assert_eq!(
            eval(&l, &f, &g, &j).unwrap_err(),
            LossError::NegativeWeight(-1.0)
        );
    }

    #[test]
    fn infinity_is_absorbing_and_zero_weight_drops() {
        let j = dsbs(0.5);
        let f = FeatureTable::constant(j.alphabet_x().clone(), &[-1.0]);
        let g = FeatureTable::zeros(j.alphabet_y().clone(), 1);
        let orthant = LossExpr::Constraint {
            side: FeatureSide::F,
            set: ConstraintKind::NonnegativeOrthant,
        };
        let l = LossExpr::Aggregate {
            terms: vec![(1.0, LossExpr::neg_h_score(1)), (2.0, orthant.clone())],
        };
        assert_eq!(eval(&l, &f, &g, &j).unwrap(), ExtendedReal::PosInf);
        let dropped = LossExpr::Aggregate {
            terms: vec![(1.0, LossExpr::neg_h_score(1)), (0.0, orthant)],
        };
        assert!(eval(&dropped, &f, &g, &j).unwrap().is_finite());
    }

    #[test]
    fn constraint_membership() {
        let j = dsbs(0.5);
        let inside = FeatureTable::from_rows(
            j.alphabet_x().clone(),
            &[vec![0.6, 0.0], vec![0.0, -0.8]],
        )
        .unwrap();
        let g = FeatureTable::zeros(j.alphabet_y().clone(), 2);
        let ball = LossExpr::Constraint {
            side: FeatureSide::F,
            set: ConstraintKind::Ball2 { radius: 1.0 },
        };
        assert!(eval(&ball, &inside, &g, &j).unwrap().is_finite());
        let outside =
            FeatureTable::new(j.alphabet_x().clone(), inside.values() * 2.0).unwrap();
        assert_eq!(eval(&ball, &outside, &g, &j).unwrap(), ExtendedReal::PosInf);
    }

    #[test]
    fn dim_mismatch_detected() {
        let j = dsbs(0.5);
        let f = FeatureTable::zeros(j.alphabet_x().clone(), 2);
        let g = FeatureTable::zeros(j.alphabet_y().clone(), 2);
        let err = eval(&LossExpr::neg_h_score(3), &f, &g, &j).unwrap_err();
        assert_eq!(err, LossError::DimMismatch { expected: 3, found: 2 });
    }

    #[test]
    fn moment_wrapper_trace_matches_manual() {
        let j = dsbs(0.5);
        let f = FeatureTable::from_rows(j.alphabet_x().clone(), &[vec![0.4], vec![-1.0]]).unwrap();
        let g = FeatureTable::from_rows(j.alphabet_y().clone(), &[vec![0.7], vec![0.1]]).unwrap();
        let wrapped = LossExpr::MomentWrapped {
            inner: Box::new(LossExpr::neg_h_score(1)),
            nu: MomentMap::AddTraceLambda { c: 2.0 },
        };
        let base = eval(&LossExpr::neg_h_score(1), &f, &g, &j).unwrap().finite().unwrap();
        let e_joint: f64 = {
            let m = f.values() * g.values().transpose();
            let mut acc = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    acc += j.prob(x, y) * m[(x, y)];
                }
            }
            acc
        };
        let v = eval(&wrapped, &f, &g, &j).unwrap().finite().unwrap();
        assert_abs_diff_eq!(v, base + 2.0 * e_joint, epsilon = 1e-14);
    }

    #[test]
    fn raw_index_probe_reads_symbol_order() {
        let j = dsbs(0.5);
        let f = FeatureTable::from_rows(j.alphabet_x().clone(), &[vec![2.0], vec![3.0]]).unwrap();
        let g = FeatureTable::zeros(j.alphabet_y().clone(), 1);
        let v = eval(&LossExpr::RawIndexProbe { k: 1 }, &f, &g, &j).unwrap();
        // 0.5 * 2 * 0 + 0.5 * 3 * 1
        assert_abs_diff_eq!(v.finite().unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn builtin_constraints_collected() {
        let l = LossExpr::Svm { d: 2, lambda: 0.1 };
        let cs = l.constraints();
        assert_eq!(cs.len(), 2);
        assert!(cs.contains(&(
            FeatureSide::F,
            ConstraintKind::FixedCoordinate { index: 2, value: 1.0 }
        )));
        assert!(cs.contains(&(FeatureSide::G, ConstraintKind::ZeroMean)));
    }

    #[test]
    fn nested_h_fast_path_matches_gram_identity() {
        // Cross-check the incremental quadratic term against direct matrices.
        let j = dsbs(0.3);
        let fv = DMatrix::from_row_slice(2, 2, &[0.2, -1.0, 1.4, 0.6]);
        let gv = DMatrix::from_row_slice(2, 2, &[-0.7, 0.9, 0.3, -0.2]);
        let f = FeatureTable::new(j.alphabet_x().clone(), fv).unwrap();
        let g = FeatureTable::new(j.alphabet_y().clone(), gv).unwrap();
        let nested = LossExpr::NestedHScore { k: 2, negated: false, weights: Some(vec![2.0, 0.5]) };
        let got = eval(&nested, &f, &g, &j).unwrap().finite().unwrap();
        let mut expect = 0.0;
        for (i, w) in [(1usize, 2.0), (2usize, 0.5)] {
            let fi = f.slice_prefix(i).unwrap();
            let gi = g.slice_prefix(i).unwrap();
            let h = LossExpr::HScore { k: i, negated: false };
            expect += w * eval(&h, &fi, &gi, &j).unwrap().finite().unwrap();
        }
        assert_abs_diff_eq!(got, expect, epsilon = 1e-13);
    }
}
