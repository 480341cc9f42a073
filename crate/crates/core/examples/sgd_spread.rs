//! Convex optimum against SGD from several initialisations on small teacher
//! datasets, for K = 2 and K = 15 subnets.
//!
//! `cargo run --release --example sgd_spread -- [lr] [epochs] [on|off]`

use convexnet::arrangements::exact_plan;
use convexnet::dataio::{synth_teacher, TeacherSpec};
use convexnet::network::{sgd_train, SgdConfig};
use convexnet::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map_or(0.05, |s| s.parse().expect("lr"));
    let epochs: usize = args.get(2).map_or(20000, |s| s.parse().expect("epochs"));
    let projection = args.get(3).is_none_or(|s| s == "on");
    let beta = 0.002;
    for seed in 0..4u64 {
        let ds = synth_teacher(&TeacherSpec { n: 5, d: 2, m1: 3, k: 5, seed }).unwrap();
        let plan = exact_plan(&ds, 3, 500, seed).unwrap();
        let model = ConvexModel::new(&ds, &plan, beta).unwrap();
        let sol = solve(&model, &SolveConfig::default(), None).unwrap();
        println!(
            "data {seed}: P1={} P2={} convex={:.8} gap={:.1e}",
            plan.p1, plan.p2, sol.objective, sol.certificate.gap
        );
        for k in [2usize, 15] {
            let objs: Vec<f64> = (0..5u64)
                .map(|s| {
                    let cfg = SgdConfig { m1: 3, k, beta, lr, batch: 5, epochs, seed: s, projection };
                    let (_, trace) = sgd_train(&ds, &cfg).unwrap();
                    trace.last().unwrap().objective
                })
                .collect();
            let lo = objs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = objs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            println!("  K={k:2} min={lo:.8} max={hi:.8} spread={:.2e}", hi - lo);
        }
    }
}
