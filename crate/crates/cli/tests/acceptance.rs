//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints its own PASS/FAIL line; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use convexnet::arrangements::{count_bound_first, enumerate_first_layer, exact_plan, ArrangementPlan};
use convexnet::dataio::{synth_teacher, Dataset, TeacherSpec};
use convexnet::network::{
    default_drop_tol, lift_to_convex, reconstruct, sgd_train, standard_normal_matrix, LiftOptions, NetworkParams,
    SgdConfig,
};
use convexnet::solver::{certify, prox_group, solve, ConvexSolution, SolveConfig};
use convexnet::{ConvexModel, ConvexPoint, Sign};
use ndarray::{Array1, ArrayView1};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn project_all(model: &ConvexModel, p: &mut ConvexPoint) {
    for g in 0..model.num_groups() {
        let proj = model.project_group(g, &p.group(g).to_vec());
        p.group_mut(g).assign(&ArrayView1::from(&proj[..]));
    }
}

struct Tiny {
    ds: Dataset,
    plan: ArrangementPlan,
    model: ConvexModel,
    sol: ConvexSolution,
}

const TINY_SOLVE_BUDGET_S: f64 = 60.0;

/// Twenty small instances with exact first-layer enumeration; solved once
/// and shared by the criteria that need them.
fn tiny_instances() -> &'static (Vec<Tiny>, f64) {
    static CELL: OnceLock<(Vec<Tiny>, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let out = (0..20u64)
            .map(|s| {
                let n = 4 + (s as usize % 5);
                let d = 1 + (s as usize % 3);
                let m1 = 1 + (s as usize % 2);
                let beta = if s % 2 == 0 { 0.01 } else { 0.1 };
                let ds = synth_teacher(&TeacherSpec { n, d, m1, k: 3, seed: s }).unwrap();
                let plan = exact_plan(&ds, m1, 8, s).unwrap();
                let model = ConvexModel::new(&ds, &plan, beta).unwrap();
                let sol = solve(&model, &SolveConfig::default(), None).unwrap();
                Tiny { ds, plan, model, sol }
            })
            .collect();
        (out, start.elapsed().as_secs_f64())
    })
}

fn criterion_1() -> Verdict {
    let (instances, secs) = tiny_instances();
    let mut worst_obj = 0.0f64;
    let mut worst_out = 0.0f64;
    let mut worst_feas = 0.0f64;
    let mut ok = *secs < TINY_SOLVE_BUDGET_S;
    for t in instances {
        if !(t.ds.n() <= 8 && t.ds.d() <= 3 && t.plan.m1 <= 2 && t.plan.p2 <= 8) {
            ok = false;
        }
        let net = reconstruct(&t.model, &t.sol.point, default_drop_tol(&t.sol.point)).unwrap();
        let (value, feas) = t.model.objective_constrained(&t.sol.point).unwrap();
        let obj_err = (net.objective(&t.ds, t.model.beta()).unwrap() - value).abs() / (1.0 + value.abs());
        let diff = net.forward(&t.ds.x).unwrap() - t.model.predict(&t.sol.point).unwrap();
        let (out_diff, y_max) = (max_abs(diff.iter().copied()), max_abs(t.ds.y.iter().copied()));
        worst_obj = worst_obj.max(obj_err);
        if y_max > 0.0 {
            worst_out = worst_out.max(out_diff / y_max);
        }
        worst_feas = worst_feas.max(feas.max_violation);
        ok &= obj_err <= 1e-6 && out_diff <= 1e-8 * y_max && feas.max_violation <= 1e-8;
    }
    verdict(
        ok,
        format!(
            "20 instances, max rel objective diff {worst_obj:.1e}, max rel output diff {worst_out:.1e}, \
             max violation {worst_feas:.1e}, solve time {secs:.1}s"
        ),
    )
}

const TEACHER_SEEDS: [u64; 4] = [0, 1, 2, 3];

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let beta = 0.002;
    let mut ok = true;
    let mut lines = Vec::new();
    for &dseed in &TEACHER_SEEDS {
        let ds = synth_teacher(&TeacherSpec { n: 5, d: 2, m1: 3, k: 5, seed: dseed }).unwrap();
        let plan = exact_plan(&ds, 3, 500, dseed).unwrap();
        let model = ConvexModel::new(&ds, &plan, beta).unwrap();
        let sol = solve(&model, &SolveConfig::default(), None).unwrap();
        let finals = |k: usize| -> Vec<f64> {
            (0..5u64)
                .into_par_iter()
                .map(|seed| {
                    let cfg = SgdConfig {
                        m1: 3,
                        k,
                        beta,
                        lr: 0.05,
                        batch: 5,
                        epochs: 20_000,
                        seed,
                        projection: true,
                    };
                    sgd_train(&ds, &cfg).unwrap().1.last().unwrap().objective
                })
                .collect()
        };
        let spread = |v: &[f64]| {
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let (k2, k15) = (finals(2), finals(15));
        let best = k2.iter().chain(&k15).copied().fold(f64::INFINITY, f64::min);
        let this = best >= sol.objective - 1e-6 && spread(&k15) < spread(&k2);
        ok &= this;
        lines.push(format!(
            "data {dseed}: convex {:.6} min SGD {best:.6} spread K=2 {:.1e} K=15 {:.1e}",
            sol.objective,
            spread(&k2),
            spread(&k15)
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    verdict(ok, format!("{}; {secs:.1}s", lines.join("; ")))
}

fn criterion_3() -> Verdict {
    let (instances, _) = tiny_instances();
    let mut ok = true;
    let mut worst_gap = 0.0f64;
    let mut worst_weak = f64::NEG_INFINITY;
    for (s, t) in instances.iter().enumerate() {
        let cert = &t.sol.certificate;
        let rel = cert.gap / (1.0 + cert.primal_value.abs());
        worst_gap = worst_gap.max(rel);
        ok &= rel <= 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s as u64);
        for _ in 0..100 {
            let scale = rng.random_range(0.01..3.0);
            let mut p = ConvexPoint {
                coeffs: standard_normal_matrix(&mut rng, t.model.num_groups(), t.model.d(), scale),
            };
            project_all(&t.model, &mut p);
            let c = certify(&t.model, &p).unwrap();
            // the bound must also sit below the certified optimum
            let excess = (c.lower_bound - c.primal_value).max(c.lower_bound - cert.primal_value);
            worst_weak = worst_weak.max(excess);
            ok &= excess <= 1e-12;
        }
    }
    verdict(
        ok,
        format!("max rel gap {worst_gap:.1e}; max lower_bound - primal over 2000 points {worst_weak:.1e}"),
    )
}

/// Constraint values of group `g` computed straight from the plan masks.
fn oracle_constraints(ds: &Dataset, plan: &ArrangementPlan, model: &ConvexModel, g: usize, w: &[f64]) -> Vec<f64> {
    let id = model.groups()[g];
    let sign = if id.sign == Sign::Plus { 1.0 } else { -1.0 };
    let d1 = plan.first(id.i, id.j);
    let d2 = plan.second(id.l);
    let mut out = Vec::new();
    for k in 0..ds.n() {
        let xw: f64 = ds.x.row(k).iter().zip(w).map(|(a, b)| a * b).sum();
        out.push(sign * if d1.get(k) { xw } else { -xw });
    }
    for k in 0..ds.n() {
        if d1.get(k) {
            let xw: f64 = ds.x.row(k).iter().zip(w).map(|(a, b)| a * b).sum();
            out.push(if d2.get(k) { xw } else { -xw });
        }
    }
    out
}

fn criterion_4() -> Verdict {
    let (instances, _) = tiny_instances();
    let rho = 10.0;
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    let mut penalty_mismatch = 0.0f64;
    let mut points = 0;
    let mut ok = true;
    let mut idx = 0;
    while points < 10 {
        let t = &instances[idx % instances.len()];
        idx += 1;
        let p = ConvexPoint {
            coeffs: standard_normal_matrix(&mut rng, t.model.num_groups(), t.model.d(), 1.0),
        };
        let mut oracle_penalty = 0.0;
        let mut margin = f64::INFINITY;
        for g in 0..t.model.num_groups() {
            for v in oracle_constraints(&t.ds, &t.plan, &t.model, g, &p.group(g).to_vec()) {
                oracle_penalty += (-v).max(0.0);
                margin = margin.min(v.abs());
            }
        }
        penalty_mismatch =
            penalty_mismatch.max((t.model.penalty(&p).unwrap() - oracle_penalty).abs() / (1.0 + oracle_penalty));
        if margin <= 1e-4 {
            continue;
        }
        let smooth = |q: &ConvexPoint| t.model.objective_penalized(q, rho).unwrap() - t.model.regularizer(q);
        let grad = t.model.grad_smooth(&p, rho).unwrap();
        let mut fd = p.coeffs.clone();
        for (idx, fd_v) in fd.iter_mut().enumerate() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.coeffs.as_slice_mut().unwrap()[idx] += h;
            minus.coeffs.as_slice_mut().unwrap()[idx] -= h;
            *fd_v = (smooth(&plus) - smooth(&minus)) / (2.0 * h);
        }
        let err = max_abs((&fd - &grad.coeffs).iter().copied()) / max_abs(grad.coeffs.iter().copied()).max(1e-300);
        worst = worst.max(err);
        ok &= err <= 1e-5;
        points += 1;
    }
    ok &= penalty_mismatch <= 1e-12;
    verdict(
        ok,
        format!("10 points, max rel error {worst:.1e}; hinge penalty vs mask oracle {penalty_mismatch:.1e}"),
    )
}

fn criterion_5() -> Verdict {
    let exact = prox_group(&[2.0, 0.0], 1.0);
    let sub = prox_group(&[0.3, -0.4], 1.0);
    let mut ok = (exact[0] - 1.0).abs() <= 1e-15 && exact[1].abs() <= 1e-15 && sub.iter().all(|v| v.abs() <= 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..6usize);
        let tau = rng.random_range(0.0..3.0);
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let (pu, pv) = (prox_group(&u, tau), prox_group(&v, tau));
        let lhs = norm(&pu.iter().zip(&pv).map(|(a, b)| a - b).collect::<Vec<_>>());
        let rhs = norm(&u.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        worst = worst.max(lhs / rhs.max(1e-300));
        ok &= lhs <= rhs * (1.0 + 1e-12);
    }
    verdict(ok, format!("closed forms exact; max ||prox u - prox v|| / ||u - v|| = {worst:.6}"))
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let beta = 0.37;
    let mut ok = true;
    let (mut fwd, mut fixed, mut ident) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = rng.random_range(1..5usize);
        let m1 = rng.random_range(1..5usize);
        let k = rng.random_range(1..6usize);
        let mut params = NetworkParams::random_init(&mut rng, d, m1, k);
        // unbalanced on purpose
        for s in &mut params.subnets {
            let a = rng.random_range(0.05..20.0);
            s.w2 *= a;
            s.w3 /= a;
        }
        let x = standard_normal_matrix(&mut rng, 7, d, 1.0);
        let b = params.balance();
        let (f0, f1) = (params.forward(&x).unwrap(), b.forward(&x).unwrap());
        let e = max_abs((&f1 - &f0).iter().copied()) / max_abs(f0.iter().copied()).max(1e-300);
        fwd = fwd.max(e);
        ok &= e <= 1e-10;
        ok &= b.weight_decay() <= params.weight_decay();
        let bb = b.balance();
        for (s1, s2) in b.subnets.iter().zip(&bb.subnets) {
            let e = max_abs((&s1.w2 - &s2.w2).iter().copied()).max((s1.w3 - s2.w3).abs())
                / (1.0 + s1.w3.abs());
            fixed = fixed.max(e);
            ok &= e <= 1e-12;
        }
        let lhs = 0.5 * beta * b.subnets.iter().map(|s| s.w2.dot(&s.w2) + s.w3 * s.w3).sum::<f64>();
        let rhs = beta * b.subnets.iter().map(|s| s.w2.dot(&s.w2).sqrt() * s.w3.abs()).sum::<f64>();
        let e = (lhs - rhs).abs() / (1.0 + rhs.abs());
        ident = ident.max(e);
        ok &= e <= 1e-12;
    }
    verdict(
        ok,
        format!("100 sets; forward change {fwd:.1e}, fixed point {fixed:.1e}, identity {ident:.1e}"),
    )
}

fn binomial_bound(n: u64, r: u64) -> u64 {
    let binom = |n: u64, k: u64| (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1));
    2 * (0..r).map(|k| binom(n - 1, k)).sum::<u64>()
}

fn criterion_7() -> Verdict {
    let mut ok = BigUint::from(binomial_bound(5, 2)) == count_bound_first(5, 2).unwrap()
        && binomial_bound(5, 2) == 10;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut summary = Vec::new();
    for (n, r) in [(5usize, 2usize), (6, 2), (8, 3)] {
        let bound = count_bound_first(n, r).unwrap();
        let mut most = 0usize;
        for _ in 0..20 {
            // rank r embedded in d = r + 1 columns
            let a = standard_normal_matrix(&mut rng, n, r, 1.0);
            let b = standard_normal_matrix(&mut rng, r, r + 1, 1.0);
            let ds = Dataset::new(a.dot(&b), Array1::zeros(n), "rank").unwrap();
            ok &= ds.rank() == r;
            let count = enumerate_first_layer(&ds).unwrap().len();
            most = most.max(count);
            ok &= BigUint::from(count) <= bound;
        }
        summary.push(format!("(n={n}, r={r}) max count {most} <= bound {bound}"));
    }
    verdict(ok, format!("bound(5, 2) = 10; {}", summary.join(", ")))
}

fn criterion_8() -> Verdict {
    let (instances, _) = tiny_instances();
    let mut ok = true;
    let (mut worst_norm, mut worst_obj) = (0.0f64, 0.0f64);
    for (s, t) in instances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + s as u64);
        let mut p = t.model.zero_point();
        for g in 0..t.model.num_groups() {
            if t.model.groups()[g].sign == Sign::Plus {
                let w = standard_normal_matrix(&mut rng, 1, t.model.d(), 1.0);
                p.group_mut(g).assign(&w.row(0));
            }
        }
        project_all(&t.model, &mut p);
        let tol = default_drop_tol(&p);
        let net = reconstruct(&t.model, &p, tol).unwrap();
        let (q, report) = lift_to_convex(&t.model, &net, &t.plan, LiftOptions::default()).unwrap();
        ok &= report.unmatched.is_empty();
        let sorted = |pt: &ConvexPoint| {
            let mut v: Vec<f64> = pt.group_norms().into_iter().filter(|&x| x > tol).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (sorted(&p), sorted(&q));
        if a.len() != b.len() {
            ok = false;
            continue;
        }
        let scale = a.last().copied().unwrap_or(0.0);
        let e = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst_norm = worst_norm.max(e / scale.max(1e-300));
        ok &= e <= tol + 1e-12 * scale;
        let (vp, _) = t.model.objective_constrained(&p).unwrap();
        let (vq, _) = t.model.objective_constrained(&q).unwrap();
        let e = (vp - vq).abs() / vp.abs().max(1e-300);
        worst_obj = worst_obj.max(e);
        ok &= e <= 1e-9;
    }
    verdict(
        ok,
        format!("20 points; max rel group-norm diff {worst_norm:.1e}, max rel objective diff {worst_obj:.1e}"),
    )
}

fn criterion_9() -> Verdict {
    println!(
        "    not reproducible at desk scale: the CIFAR-10 and Fashion-MNIST accuracy curves, and the \
         absolute UCI table numbers (seeds and splits beyond the 80/20 ratio are unspecified). \
         Substitutes: the ordering properties of criterion 2 and the compare smoke run below."
    );
    let dir = tempfile::tempdir().unwrap();
    let csv = concat!(env!("CARGO_MANIFEST_DIR"), "/data/small.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_convexnet"))
        .args(["compare", "--csv", csv, "--seed", "3", "--train-fraction", "0.8"])
        .args(["--p1", "4", "--p2", "4", "--k", "4", "--epochs", "300", "--sgd-seeds", "3"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    if !out.status.success() {
        return verdict(false, format!("compare failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let table = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let well_formed = header.len() == 7
        && rows.len() == 4
        && rows.iter().all(|r| r.len() == header.len())
        && rows[0][0] == "convex"
        && rows[1..].iter().all(|r| r[0] == "sgd")
        && rows.iter().all(|r| r[3..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let ok = well_formed && summary["table"].as_array().is_some_and(|t| t.len() == 4);
    verdict(ok, format!("compare on bundled CSV: {} table rows, header [{}]", rows.len(), header.join(",")))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("objective equality", criterion_1),
        ("convex <= SGD, spread", criterion_2),
        ("duality-gap certificate", criterion_3),
        ("gradient correctness", criterion_4),
        ("prox correctness", criterion_5),
        ("balancing", criterion_6),
        ("arrangement bound", criterion_7),
        ("lift/reconstruct round trip", criterion_8),
        ("desk-scale substitutes", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {} ({name}): {} [{:.1}s] {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
