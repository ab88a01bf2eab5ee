//! Exact (sub)gradients of loss expressions with respect to both tables.
//!
//! Characteristic terms contribute zero gradient; optimizers keep their
//! constraint sets by projection instead. The hinge takes subgradient 0 at
//! its kink.

use nalgebra::DMatrix;

use super::{
    eval, eval_smooth, nesting_weights, pnorm, EvalContext, FeatureSide, LossError, LossExpr,
    MomentMap, NormPenalty, PairDistance,
};
use crate::features::FeatureTable;
use crate::probability::JointDistribution;

/// Gradient pair `(∂L/∂f, ∂L/∂g)` of the smooth part of `l`, after checking
/// that the full loss is finite at `(f, g)`.
pub fn grad(
    l: &LossExpr,
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LossError> {
    if !eval(l, f, g, j)?.is_finite() {
        return Err(LossError::InfiniteLoss);
    }
    grad_smooth(l, f, g, j)
}

/// Gradient of the smooth part, without the finiteness precondition.
pub fn grad_smooth(
    l: &LossExpr,
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LossError> {
    super::validate_pair(l, f, g, j)?;
    let ctx = EvalContext {
        f: f.values(),
        g: g.values(),
        j,
    };
    let mut df = DMatrix::zeros(f.len(), f.dim());
    let mut dg = DMatrix::zeros(g.len(), g.dim());
    accumulate(l, &ctx, 1.0, &mut df, &mut dg)?;
    Ok((df, dg))
}

fn accumulate(
    l: &LossExpr,
    ctx: &EvalContext,
    w: f64,
    df: &mut DMatrix<f64>,
    dg: &mut DMatrix<f64>,
) -> Result<(), LossError> {
    match l {
        LossExpr::PairwiseJoint { map, .. } => {
            pairwise_grad(ctx, map, ctx.j.mass().clone(), w, df, dg);
        }
        LossExpr::PairwiseProduct { map, .. } => {
            let weights = ctx.j.p_x() * ctx.j.p_y().transpose();
            pairwise_grad(ctx, map, weights, w, df, dg);
        }
        LossExpr::HScore { negated, .. } => {
            let sign = if *negated { -w } else { w };
            let (hf, hg) = h_score_grad(ctx);
            *df += sign * hf;
            *dg += sign * hg;
        }
        LossExpr::NestedHScore { k, negated, weights } => {
            let c = nesting_weights(weights, *k)?;
            let sign = if *negated { -w } else { w };
            let (hf, hg) = nested_h_grad(ctx, &c);
            *df += sign * hf;
            *dg += sign * hg;
        }
        LossExpr::LogLoss { .. } => {
            let q = posterior_matrix(ctx);
            let dxq = scale_rows(&q, ctx.j.p_x());
            *df += w * (&dxq * ctx.g - ctx.j.mass() * ctx.g);
            *dg += w * (dxq.transpose() * ctx.f - ctx.j.mass().transpose() * ctx.f);
        }
        LossExpr::Svm { d, lambda } => {
            let m = ctx.f * ctx.g.transpose();
            let active = DMatrix::from_fn(m.nrows(), m.ncols(), |x, y| {
                if 1.0 - m[(x, y)] > 0.0 {
                    ctx.j.prob(x, y)
                } else {
                    0.0
                }
            });
            *df -= w * (&active * ctx.g);
            *dg -= w * (active.transpose() * ctx.f);
            for y in 0..ctx.g.nrows() {
                for c in 0..*d {
                    dg[(y, c)] += w * 2.0 * lambda * ctx.j.p_y()[y] * ctx.g[(y, c)];
                }
            }
        }
        LossExpr::FDiv { u, .. } => {
            let m = ctx.f * ctx.g.transpose();
            let r = DMatrix::from_fn(m.nrows(), m.ncols(), |x, y| {
                ctx.j.p_x()[x] * ctx.j.p_y()[y] * u.derivative(m[(x, y)])
            });
            *df += w * (&r * ctx.g - ctx.j.mass() * ctx.g);
            *dg += w * (r.transpose() * ctx.f - ctx.j.mass().transpose() * ctx.f);
        }
        LossExpr::NormReg { side, weight, penalty } => {
            let scale = w * weight;
            match side {
                FeatureSide::F => norm_reg_grad(ctx.f, ctx.j.p_x(), penalty, scale, df),
                FeatureSide::G => norm_reg_grad(ctx.g, ctx.j.p_y(), penalty, scale, dg),
            }
        }
        LossExpr::Constraint { .. } => {}
        LossExpr::MomentWrapped { inner, nu } => match nu {
            MomentMap::Identity => accumulate(inner, ctx, w, df, dg)?,
            MomentMap::AddTraceLambda { c } => {
                accumulate(inner, ctx, w, df, dg)?;
                *df += (w * c) * (ctx.j.mass() * ctx.g);
                *dg += (w * c) * (ctx.j.mass().transpose() * ctx.f);
            }
            MomentMap::AddMeanSquares { cf, cg } => {
                accumulate(inner, ctx, w, df, dg)?;
                let mf = ctx.mean_f();
                let mg = ctx.mean_g();
                *df += (2.0 * w * cf) * ctx.j.p_x() * mf.transpose();
                *dg += (2.0 * w * cg) * ctx.j.p_y() * mg.transpose();
            }
            MomentMap::Exp => {
                let inner_value = smooth_value(inner, ctx)?;
                accumulate(inner, ctx, w * inner_value.exp(), df, dg)?;
            }
        },
        LossExpr::Aggregate { terms } => {
            for (tw, t) in terms {
                if *tw < 0.0 {
                    return Err(LossError::NegativeWeight(*tw));
                }
                if *tw > 0.0 {
                    accumulate(t, ctx, w * tw, df, dg)?;
                }
            }
        }
        LossExpr::RawIndexProbe { .. } => {
            for x in 0..ctx.f.nrows() {
                df[(x, 0)] += w * ctx.j.p_x()[x] * x as f64;
            }
        }
    }
    Ok(())
}

fn smooth_value(l: &LossExpr, ctx: &EvalContext) -> Result<f64, LossError> {
    // Re-wrap the raw matrices; alphabets were validated by the caller.
    let f = FeatureTable::new(ctx.j.alphabet_x().clone(), ctx.f.clone())
        .expect("validated");
    let g = FeatureTable::new(ctx.j.alphabet_y().clone(), ctx.g.clone())
        .expect("validated");
    eval_smooth(l, &f, &g, ctx.j)
}

fn pairwise_grad(
    ctx: &EvalContext,
    map: &PairDistance,
    weights: DMatrix<f64>,
    w: f64,
    df: &mut DMatrix<f64>,
    dg: &mut DMatrix<f64>,
) {
    match map {
        PairDistance::Squared => {
            let row_sums: Vec<f64> = (0..weights.nrows()).map(|x| weights.row(x).sum()).collect();
            let col_sums: Vec<f64> = (0..weights.ncols()).map(|y| weights.column(y).sum()).collect();
            let wg = &weights * ctx.g;
            let wf = weights.transpose() * ctx.f;
            for x in 0..ctx.f.nrows() {
                for c in 0..ctx.k() {
                    df[(x, c)] += w * 2.0 * (row_sums[x] * ctx.f[(x, c)] - wg[(x, c)]);
                }
            }
            for y in 0..ctx.g.nrows() {
                for c in 0..ctx.k() {
                    dg[(y, c)] += w * 2.0 * (col_sums[y] * ctx.g[(y, c)] - wf[(y, c)]);
                }
            }
        }
        PairDistance::PNorm(p) => {
            for x in 0..ctx.f.nrows() {
                for y in 0..ctx.g.nrows() {
                    let wt = weights[(x, y)];
                    if wt == 0.0 {
                        continue;
                    }
                    let diff: Vec<f64> =
                        (0..ctx.k()).map(|c| ctx.f[(x, c)] - ctx.g[(y, c)]).collect();
                    let n = pnorm(&diff, *p);
                    if n == 0.0 {
                        continue;
                    }
                    for c in 0..ctx.k() {
                        let s = diff[c].signum() * diff[c].abs().powf(p - 1.0) / n.powf(p - 1.0);
                        df[(x, c)] += w * wt * s;
                        dg[(y, c)] -= w * wt * s;
                    }
                }
            }
        }
    }
}

fn h_score_grad(ctx: &EvalContext) -> (DMatrix<f64>, DMatrix<f64>) {
    let mf = ctx.mean_f();
    let mg = ctx.mean_g();
    let lf = ctx.lambda_f();
    let lg = ctx.lambda_g();
    let df = ctx.j.mass() * ctx.g
        - ctx.j.p_x() * mg.transpose()
        - scale_rows(&(ctx.f * lg), ctx.j.p_x());
    let dg = ctx.j.mass().transpose() * ctx.f
        - ctx.j.p_y() * mf.transpose()
        - scale_rows(&(ctx.g * lf), ctx.j.p_y());
    (df, dg)
}

fn nested_h_grad(ctx: &EvalContext, c: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = c.len();
    // Dimension d participates in every prefix j >= d; pair (a, b) in every
    // prefix j >= max(a, b).
    let mut tail = vec![0.0; k + 1];
    for d in (0..k).rev() {
        tail[d] = tail[d + 1] + c[d];
    }
    let mf = ctx.mean_f();
    let mg = ctx.mean_g();
    let lf = ctx.lambda_f();
    let lg = ctx.lambda_g();
    let wq = DMatrix::from_fn(k, k, |a, b| tail[a.max(b)]);
    let pg = ctx.j.mass() * ctx.g;
    let pf = ctx.j.mass().transpose() * ctx.f;
    let mut df = DMatrix::zeros(ctx.f.nrows(), k);
    let mut dg = DMatrix::zeros(ctx.g.nrows(), k);
    let lg_w = lg.component_mul(&wq);
    let lf_w = lf.component_mul(&wq);
    let f_lgw = ctx.f * lg_w;
    let g_lfw = ctx.g * lf_w;
    for d in 0..k {
        for x in 0..ctx.f.nrows() {
            df[(x, d)] =
                tail[d] * (pg[(x, d)] - ctx.j.p_x()[x] * mg[d]) - ctx.j.p_x()[x] * f_lgw[(x, d)];
        }
        for y in 0..ctx.g.nrows() {
            dg[(y, d)] =
                tail[d] * (pf[(y, d)] - ctx.j.p_y()[y] * mf[d]) - ctx.j.p_y()[y] * g_lfw[(y, d)];
        }
    }
    (df, dg)
}

/// Model posterior `Q[x, y] = P_Y(y) e^{M[x,y]} / Σ_y' P_Y(y') e^{M[x,y']}`.
fn posterior_matrix(ctx: &EvalContext) -> DMatrix<f64> {
    let m = ctx.f * ctx.g.transpose();
    let mut q = DMatrix::zeros(m.nrows(), m.ncols());
    for x in 0..m.nrows() {
        let top = (0..m.ncols()).map(|y| m[(x, y)]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for y in 0..m.ncols() {
            let e = ctx.j.p_y()[y] * (m[(x, y)] - top).exp();
            q[(x, y)] = e;
            z += e;
        }
        for y in 0..m.ncols() {
            q[(x, y)] /= z;
        }
    }
    q
}

fn norm_reg_grad(
    t: &DMatrix<f64>,
    weights: &nalgebra::DVector<f64>,
    penalty: &NormPenalty,
    scale: f64,
    out: &mut DMatrix<f64>,
) {
    match penalty {
        NormPenalty::SquaredL2 => {
            for i in 0..t.nrows() {
                for c in 0..t.ncols() {
                    out[(i, c)] += scale * 2.0 * weights[i] * t[(i, c)];
                }
            }
        }
        NormPenalty::PNorm(p) => {
            for i in 0..t.nrows() {
                let row: Vec<f64> = (0..t.ncols()).map(|c| t[(i, c)]).collect();
                let n = pnorm(&row, *p);
                if n == 0.0 {
                    continue;
                }
                for c in 0..t.ncols() {
                    let s = row[c].signum() * row[c].abs().powf(p - 1.0) / n.powf(p - 1.0);
                    out[(i, c)] += scale * weights[i] * s;
                }
            }
        }
    }
}

fn scale_rows(m: &DMatrix<f64>, w: &nalgebra::DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, c| w[i] * m[(i, c)])
}

/// Central finite differences of the smooth part against [`grad_smooth`];
/// returns the largest relative error `|fd - analytic| / max(1, |analytic|)`.
pub fn finite_diff_check(
    l: &LossExpr,
    f: &FeatureTable,
    g: &FeatureTable,
    j: &JointDistribution,
    eps: f64,
) -> Result<f64, LossError> {
    let (df, dg) = grad_smooth(l, f, g, j)?;
    let mut worst: f64 = 0.0;
    let mut probe_f = f.clone();
    for i in 0..f.len() {
        for c in 0..f.dim() {
            let base = f.values()[(i, c)];
            probe_f.values_mut()[(i, c)] = base + eps;
            let plus = eval_smooth(l, &probe_f, g, j)?;
            probe_f.values_mut()[(i, c)] = base - eps;
            let minus = eval_smooth(l, &probe_f, g, j)?;
            probe_f.values_mut()[(i, c)] = base;
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max((fd - df[(i, c)]).abs() / df[(i, c)].abs().max(1.0));
        }
    }
    let mut probe_g = g.clone();
    for i in 0..g.len() {
        for c in 0..g.dim() {
            let base = g.values()[(i, c)];
            probe_g.values_mut()[(i, c)] = base + eps;
            let plus = eval_smooth(l, f, &probe_g, j)?;
            probe_g.values_mut()[(i, c)] = base - eps;
            let minus = eval_smooth(l, f, &probe_g, j)?;
            probe_g.values_mut()[(i, c)] = base;
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max((fd - dg[(i, c)]).abs() / dg[(i, c)].abs().max(1.0));
        }
    }
    Ok(worst)
}
