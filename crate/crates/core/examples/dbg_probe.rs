use depkit::adapters::interface_from_modes;
use depkit::cdk::{modal_decompose, DEFAULT_RANK_TOL};
use depkit::experiments::l2_regularized;
use depkit::losses::LossExpr;
use depkit::optim::{minimize, OptimConfig};
use depkit::synth::{random_peaked_binary_joint, trial_rng};
use depkit::transforms::{apply_dpt, random_dpt};
use rand::Rng;

fn main() {
    let loss_id = depkit::experiments::NamedLoss::Svm as u64;
    let mut worst_a = 0.0f64;
    let mut worst_d = 0.0f64;
    for t in 0..50u64 {
        let mut rng = trial_rng(1006 + loss_id, t);
        let nx = rng.gen_range(3..=6);
        let j = random_peaked_binary_joint(&mut rng, nx);
        let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let iface = interface_from_modes(&j, &md);
        let expr = l2_regularized(LossExpr::Svm { d: 2, lambda: 0.1 }, 0.05);
        let cfg = |seed| OptimConfig { max_iters: 30000, restarts: 4, ..OptimConfig::brisk(3, seed) };
        let direct = minimize(&expr, &j, &cfg(3000 + 3 * t)).unwrap();
        let adapter = minimize(&expr, iface.joint(), &cfg(3001 + 3 * t)).unwrap();
        let dpt = random_dpt(&j, rng.gen(), 3);
        let jt = apply_dpt(&j, &dpt).unwrap();
        let trans = minimize(&expr, &jt, &cfg(3002 + 3 * t)).unwrap();
        let ga = (direct.value - adapter.value).abs();
        let gd = (direct.value - trans.value).abs();
        if ga > 1e-3 || gd > 1e-3 {
            println!("trial {t}: v {:.6} adapter gap {ga:.3e} dpt gap {gd:.3e}", direct.value);
        }
        worst_a = worst_a.max(ga);
        worst_d = worst_d.max(gd);
    }
    println!("worst adapter {worst_a:.3e}, worst dpt {worst_d:.3e}");
}
