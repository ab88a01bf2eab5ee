//! Cross-module invariants on randomized instances.

use depkit::adapters::{interface_from_modes, lift_to_x, lift_to_y};
use depkit::cdk::{modal_decompose, DEFAULT_RANK_TOL};
use depkit::features::{
    canonicalize, conditional_projection, moments, subspace_distance, FeatureTable,
};
use depkit::losses::{builtin_atoms, eval};
use depkit::probability::{
    empirical_from_samples, mutual_information, pushforward, Alphabet, JointDistribution,
};
use depkit::synth::{
    random_feature_table, random_joint, random_joint_separated, random_surjection, trial_rng,
    TableStyle,
};
use depkit::transforms::{apply_dpt, random_dpt};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn joint_strategy(max_nx: usize, max_ny: usize) -> impl Strategy<Value = JointDistribution> {
    (2..=max_nx, 2..=max_ny)
        .prop_flat_map(|(nx, ny)| {
            prop::collection::vec(0.01..1.0f64, nx * ny).prop_map(move |cells| {
                let total: f64 = cells.iter().sum();
                let mass = DMatrix::from_fn(nx, ny, |i, j| cells[i * ny + j] / total);
                JointDistribution::validate(
                    mass,
                    Alphabet::indexed("x", nx),
                    Alphabet::indexed("y", ny),
                )
                .expect("positive cells normalized")
            })
        })
}

proptest! {
    #[test]
    fn pushforward_marginals_commute(j in joint_strategy(6, 5), seed in 0u64..1000) {
        let mut rng = trial_rng(seed, 0);
        let mx = random_surjection(&mut rng, j.alphabet_x(), "u");
        let my = random_surjection(&mut rng, j.alphabet_y(), "v");
        let image = pushforward(&j, &mx, &my);
        // Marginal of the pushforward == pushforward of the marginal.
        for t in 0..image.nx() {
            let mut expect = 0.0;
            for i in 0..j.nx() {
                if mx.target().symbol(mx.apply(i)) == image.alphabet_x().symbol(t) {
                    expect += j.p_x()[i];
                }
            }
            prop_assert!((image.p_x()[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_information_is_symmetric(j in joint_strategy(6, 5)) {
        let a = mutual_information(&j);
        let b = mutual_information(&j.swapped());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn projection_is_contractive_and_mean_preserving(
        j in joint_strategy(6, 5),
        seed in 0u64..1000,
    ) {
        let mut rng = trial_rng(seed, 1);
        let k = rng.gen_range(1..=3);
        let f = random_feature_table(&mut rng, j.alphabet_x(), k, 1.0, TableStyle::Gaussian);
        let s = random_feature_table(&mut rng, j.alphabet_x(), 1, 1.0, TableStyle::Gaussian);
        // Round s to few digits so groups actually merge sometimes.
        let s = FeatureTable::new(
            j.alphabet_x().clone(),
            s.values().map(|v| (v * 2.0).round() / 2.0),
        ).unwrap();
        let p = j.marginal_x();
        let proj = conditional_projection(&f, &s, &p).unwrap();
        let mut e_f = 0.0;
        let mut e_proj = 0.0;
        for i in 0..f.len() {
            for c in 0..k {
                e_f += p.prob(i) * f.values()[(i, c)].powi(2);
                e_proj += p.prob(i) * proj.values()[(i, c)].powi(2);
            }
        }
        prop_assert!(e_proj <= e_f + 1e-12);
        let mean = |t: &FeatureTable| -> Vec<f64> {
            (0..k).map(|c| (0..t.len()).map(|i| p.prob(i) * t.values()[(i, c)]).sum()).collect()
        };
        for (a, b) in mean(&f).iter().zip(mean(&proj)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // Idempotence.
        let twice = conditional_projection(&proj, &s, &p).unwrap();
        prop_assert!((twice.values() - proj.values()).amax() < 1e-12);
    }

    #[test]
    fn modes_cross_correlate_as_sigma_delta(j in joint_strategy(6, 5)) {
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let m = moments(md.f_star(), md.g_star(), &j).unwrap();
        for a in 0..md.rank() {
            for b in 0..md.rank() {
                let expect = if a == b { md.sigma[a] } else { 0.0 };
                prop_assert!((m.lambda_fg[(a, b)] - expect).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn empirical_reproduces_rational_joint_exactly() {
    // Cells proportional to integer counts recover the joint bit for bit.
    let counts = [[3usize, 1], [2, 2]];
    let ax = Alphabet::new(["a", "b"]).unwrap();
    let ay = Alphabet::new(["0", "1"]).unwrap();
    let mut pairs = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        for (l, &c) in row.iter().enumerate() {
            for _ in 0..c {
                pairs.push((
                    ax.symbol(i).to_string(),
                    ay.symbol(l).to_string(),
                ));
            }
        }
    }
    let j = empirical_from_samples(&pairs, ax, ay).unwrap();
    assert_eq!(j.prob(0, 0), 3.0 / 8.0);
    assert_eq!(j.prob(0, 1), 1.0 / 8.0);
    assert_eq!(j.prob(1, 0), 2.0 / 8.0);
    assert_eq!(j.prob(1, 1), 2.0 / 8.0);
}

#[test]
fn transformed_modes_decode_to_original_modes() {
    // With separated spectra, f* of the transformed pair, pulled back through
    // the decoder and canonically aligned, matches f* of the original.
    for t in 0..20u64 {
        let mut rng = trial_rng(210, t);
        let (j, md) = random_joint_separated(&mut rng, 5, 4, 0.05);
        let dpt = random_dpt(&j, rng.gen(), 3);
        let transformed = apply_dpt(&j, &dpt).unwrap();
        let md_hat = modal_decompose(&transformed, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(md_hat.rank(), md.rank());

        // Pull back the transformed modes through decoding; then align the
        // pulled-back pair against the original decomposition. Pulled-back
        // tables live on X but may disagree with md only by mode sign.
        let k = md.rank();
        let pull = |table: &FeatureTable, x_side: bool| -> FeatureTable {
            let n = if x_side { j.nx() } else { j.ny() };
            let mut values = DMatrix::zeros(n, k);
            let mut seen = vec![false; n];
            for a in 0..table.len() {
                let label = if x_side {
                    dpt.x_side.decode(transformed.alphabet_x().symbol(a)).unwrap()
                } else {
                    dpt.y_side.decode(transformed.alphabet_y().symbol(a)).unwrap()
                };
                let idx = if x_side {
                    j.alphabet_x().index_of(label).unwrap()
                } else {
                    j.alphabet_y().index_of(label).unwrap()
                };
                if !seen[idx] {
                    seen[idx] = true;
                    for c in 0..k {
                        values[(idx, c)] = table.values()[(a, c)];
                    }
                }
            }
            let alphabet = if x_side { j.alphabet_x() } else { j.alphabet_y() };
            FeatureTable::new(alphabet.clone(), values).unwrap()
        };
        let pf = pull(md_hat.f_star(), true);
        let pg = pull(md_hat.g_star(), false);
        let (af, ag) = canonicalize(&pf, &pg, &j, Some(&md)).unwrap();
        assert!(
            (af.values() - md.f_star().values()).amax() < 1e-6,
            "f gap {}",
            (af.values() - md.f_star().values()).amax()
        );
        assert!((ag.values() - md.g_star().values()).amax() < 1e-6);
    }
}

#[test]
fn adapter_substitution_is_exact_for_every_builtin_loss() {
    // eval(L, φ∘f*, ψ∘g*; J) equals eval(L, φ, ψ; P_ST) to 1e-12.
    let mut rng = trial_rng(211, 0);
    let (j, md) = random_joint_separated(&mut rng, 5, 4, 0.03);
    let iface = interface_from_modes(&j, &md);
    for (name, l) in builtin_atoms() {
        let k = l.dim().unwrap_or(2);
        let phi = random_feature_table(&mut rng, iface.joint().alphabet_x(), k, 1.0, TableStyle::Gaussian);
        let psi = random_feature_table(&mut rng, iface.joint().alphabet_y(), k, 1.0, TableStyle::Gaussian);
        let lifted_f = lift_to_x(&phi, &md).unwrap();
        let lifted_g = lift_to_y(&psi, &md).unwrap();
        let on_j = eval(&l, &lifted_f, &lifted_g, &j).unwrap();
        let on_iface = eval(&l, &phi, &psi, iface.joint()).unwrap();
        match (on_j.finite(), on_iface.finite()) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0), "{name}: {a} vs {b}")
            }
            (a, b) => assert_eq!(a.is_none(), b.is_none(), "{name}"),
        }
    }
}

#[test]
fn interface_is_invariant_up_to_isomorphism() {
    // The interface built from a transformed pair is a relabeling of the
    // interface built from the original: matching masses under the bijection
    // induced by decoding.
    for t in 0..10u64 {
        let mut rng = trial_rng(212, t);
        let (j, md) = random_joint_separated(&mut rng, 5, 4, 0.05);
        let dpt = random_dpt(&j, rng.gen(), 3);
        let iface = interface_from_modes(&j, &md);
        let transformed = apply_dpt(&j, &dpt).unwrap();
        let md_hat = modal_decompose(&transformed, DEFAULT_RANK_TOL).unwrap();
        let iface_hat = interface_from_modes(&transformed, &md_hat);
        assert_eq!(iface.s_size(), iface_hat.s_size());
        assert_eq!(iface.t_size(), iface_hat.t_size());

        // Bijection via decode: ŝ(x̂) must correspond to s(decode x̂).
        let mut map_s = vec![usize::MAX; iface_hat.s_size()];
        for a in 0..transformed.nx() {
            let x = j
                .alphabet_x()
                .index_of(dpt.x_side.decode(transformed.alphabet_x().symbol(a)).unwrap())
                .unwrap();
            let s_hat = iface_hat.encode_x(a);
            let s = iface.encode_x(x);
            if map_s[s_hat] == usize::MAX {
                map_s[s_hat] = s;
            } else {
                assert_eq!(map_s[s_hat], s, "decode-induced S map inconsistent");
            }
        }
        let mut map_t = vec![usize::MAX; iface_hat.t_size()];
        for b in 0..transformed.ny() {
            let y = j
                .alphabet_y()
                .index_of(dpt.y_side.decode(transformed.alphabet_y().symbol(b)).unwrap())
                .unwrap();
            let t_hat = iface_hat.encode_y(b);
            let tt = iface.encode_y(y);
            if map_t[t_hat] == usize::MAX {
                map_t[t_hat] = tt;
            } else {
                assert_eq!(map_t[t_hat], tt);
            }
        }
        for s_hat in 0..iface_hat.s_size() {
            for t_hat in 0..iface_hat.t_size() {
                let expect = iface.joint().prob(map_s[s_hat], map_t[t_hat]);
                assert!(
                    (iface_hat.joint().prob(s_hat, t_hat) - expect).abs() < 1e-9,
                    "mass mismatch at ({s_hat}, {t_hat})"
                );
            }
        }
    }
}

#[test]
fn tied_spectra_compared_by_subspace_distance() {
    // Circulant with two equal singular values: per-mode vectors are not
    // identifiable, but the 2-dim mode subspaces coincide.
    let p = 0.32 / 1.02;
    let q = 0.01 / 1.02;
    let j = JointDistribution::from_rows(
        &["0", "1", "2"],
        &["0", "1", "2"],
        &[vec![p, q, q], vec![q, p, q], vec![q, q, p]],
    )
    .unwrap();
    let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
    // A relabeled copy of the same joint decomposes into a rotated basis of
    // the same subspace.
    let j2 = JointDistribution::from_rows(
        &["0", "1", "2"],
        &["0", "1", "2"],
        &[vec![p, q, q], vec![q, p, q], vec![q, q, p]],
    )
    .unwrap();
    let md2 = modal_decompose(&j2, DEFAULT_RANK_TOL).unwrap();
    let d = subspace_distance(md.f_star(), md2.f_star(), &j.marginal_x()).unwrap();
    assert!(d < 1e-9, "subspace distance {d}");
}

#[test]
fn random_instances_have_bounded_sigma() {
    for t in 0..200u64 {
        let mut rng = trial_rng(213, t);
        let j = random_joint(&mut rng, 8, 6);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        for &s in &md.sigma {
            assert!(s <= 1.0 + 1e-9);
        }
        assert!(md.rank() <= 5);
    }
}
