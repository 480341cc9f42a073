use std::path::{Path, PathBuf};
use std::time::Instant;

use convexnet::arrangements::{exact_plan, sample_plan, ArrangementPlan, PlanMode};
use convexnet::dataio::{load_csv, save_csv, synth_teacher, teacher_parts, Dataset, LabelColumn};
use convexnet::network::{
    default_drop_tol, lift_to_convex, reconstruct, sgd_train, LiftOptions, NetworkParams, SgdConfig,
};
use convexnet::solver::{certify, solve, write_trace_jsonl, SolutionDocument, TraceRecord};
use convexnet::ConvexModel;
use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::failure::Failure;

type Outcome = Result<Value, Failure>;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the numeric content, independent of file formatting.
pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.n() as u64).to_le_bytes());
    h.update((ds.d() as u64).to_le_bytes());
    for v in ds.x.iter().chain(ds.y.iter()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

// the output directory does not affect results, so it is left out
fn config_hash(cfg: &RunConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut().expect("config is an object").remove("out_dir");
    sha256_hex(v.to_string().as_bytes())
}

/// Loads or synthesises the dataset and applies the requested preprocessing.
fn load_dataset(cfg: &RunConfig, command: &str) -> Result<Dataset, Failure> {
    let ds = match (&cfg.csv, &cfg.synth) {
        (Some(path), None) => {
            if !path.exists() {
                return Err(Failure::input(format!("CSV file not found: {}", path.display()))
                    .with_path(path));
            }
            let label = cfg.label_column.map_or(LabelColumn::Last, LabelColumn::Index);
            load_csv(path, label)?
        }
        (None, Some(_)) => {
            let seed = cfg.require_seed(command)?;
            synth_teacher(&cfg.teacher_spec(seed).expect("synth spec present"))?
        }
        _ => return Err(Failure::usage("a data source is required: --csv PATH or --synth N,D,M1,K")),
    };
    let ds = if cfg.standardize { ds.standardized_features() } else { ds };
    Ok(if cfg.center_labels { ds.centered_labels() } else { ds })
}

/// Train/test split when a train fraction is configured.
fn split(cfg: &RunConfig, ds: Dataset, seed: u64) -> Result<(Dataset, Option<Dataset>), Failure> {
    match cfg.train_fraction {
        Some(f) => {
            let (train, test) = ds.split(f, seed)?;
            Ok((train, Some(test)))
        }
        None => Ok((ds, None)),
    }
}

fn build_plan(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<ArrangementPlan, Failure> {
    if let Some(path) = &cfg.plan_file {
        let plan = ArrangementPlan::from_json(&read_text(path)?).map_err(|e| Failure::from(e).with_path(path))?;
        plan.validate(ds).map_err(|e| Failure::from(e).with_path(path))?;
        return Ok(plan);
    }
    Ok(match cfg.plan_mode {
        PlanMode::Exact => exact_plan(ds, cfg.m1, cfg.p2_target, seed)?,
        PlanMode::Sampled => sample_plan(ds, cfg.m1, cfg.p1_target, cfg.p2_target, seed)?,
    })
}

fn plan_summary(plan: &ArrangementPlan) -> Value {
    json!({
        "mode": plan.mode,
        "m1": plan.m1,
        "p1": plan.p1,
        "p2": plan.p2,
        "seed": plan.seed,
        "hash": plan.content_hash(),
    })
}

/// Prediction error metrics on held-out data. The classification error is
/// reported only for labels in {0, 1} (threshold 0.5) or {-1, 1} (threshold 0).
pub fn test_metrics(pred: &Array1<f64>, y: &Array1<f64>) -> Value {
    let n = y.len().max(1) as f64;
    let mse = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let threshold = if y.iter().all(|&v| v == 0.0 || v == 1.0) {
        Some(0.5)
    } else if y.iter().all(|&v| v == -1.0 || v == 1.0) {
        Some(0.0)
    } else {
        None
    };
    let class_error = threshold.map(|t| {
        pred.iter().zip(y).filter(|(p, yv)| (**p > t) != (**yv > t)).count() as f64 / n
    });
    json!({ "mse": mse, "classification_error": class_error })
}

pub fn synth(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("synth")?;
    let spec = cfg
        .teacher_spec(seed)
        .ok_or_else(|| Failure::usage("synth needs --synth N,D,M1,K"))?;
    let (x, teacher) = teacher_parts(&spec)?;
    let ds = convexnet::dataio::from_teacher(x, &teacher, format!("teacher-s{seed}"))?;
    create_dir(&cfg.out_dir)?;
    let data_path = cfg.out_dir.join("data.csv");
    save_csv(&ds, &data_path)?;
    write_text(&cfg.out_dir.join("teacher-network.json"), &teacher.to_json()?)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    let summary = json!({
        "command": "synth",
        "data": data_path,
        "n": ds.n(),
        "d": ds.d(),
        "dataset_hash": dataset_hash(&ds),
        "config_hash": config_hash(cfg),
    });
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn plan(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("plan")?;
    let ds = load_dataset(cfg, "plan")?;
    let (train, _) = split(cfg, ds, seed)?;
    let plan = build_plan(cfg, &train, seed)?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("plan.json"), &plan.to_json()?)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    let summary = json!({
        "command": "plan",
        "dataset_hash": dataset_hash(&train),
        "config_hash": config_hash(cfg),
        "plan": plan_summary(&plan),
    });
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

struct ConvexRun {
    summary: Value,
    trace: Vec<TraceRecord>,
    network: NetworkParams,
    objective: f64,
    elapsed_s: f64,
}

fn run_convex(cfg: &RunConfig, train: &Dataset, seed: u64, out_dir: &Path) -> Result<ConvexRun, Failure> {
    let t0 = Instant::now();
    let plan = build_plan(cfg, train, seed)?;
    let plan_s = t0.elapsed().as_secs_f64();
    let model = ConvexModel::new(train, &plan, cfg.beta)?;
    let sol = solve(&model, &cfg.solver, None)?;
    let solve_s = sol.elapsed_s;
    let t1 = Instant::now();
    let network = reconstruct(&model, &sol.point, default_drop_tol(&sol.point))?;
    let reconstruct_s = t1.elapsed().as_secs_f64();
    let network_objective = network.objective(train, cfg.beta)?;

    create_dir(out_dir)?;
    write_text(&out_dir.join("plan.json"), &plan.to_json()?)?;
    write_json(&out_dir.join("solution.json"), &sol.to_document(&model)?)?;
    write_json(&out_dir.join("certificate.json"), &sol.certificate)?;
    write_trace_jsonl(out_dir.join("trace.jsonl"), &sol.trace)?;
    write_text(&out_dir.join("reconstructed-network.json"), &network.to_json()?)?;
    write_json(&out_dir.join("config.json"), cfg)?;

    let summary = json!({
        "command": "train-convex",
        "dataset_hash": dataset_hash(train),
        "config_hash": config_hash(cfg),
        "plan": plan_summary(&plan),
        "groups": model.num_groups(),
        "convex_objective": sol.objective,
        "network_objective": network_objective,
        "lower_bound": sol.certificate.lower_bound,
        "gap": sol.certificate.gap,
        "feasibility": sol.feasibility,
        "subnets": network.k(),
        "iterations": sol.stages.iter().map(|s| s.iterations).sum::<usize>(),
        "timings": {
            "plan_s": plan_s,
            "solve_s": solve_s,
            "reconstruct_s": reconstruct_s,
        },
    });
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(ConvexRun {
        summary,
        trace: sol.trace,
        network,
        objective: sol.objective,
        elapsed_s: t0.elapsed().as_secs_f64(),
    })
}

pub fn train_convex(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("train-convex")?;
    let ds = load_dataset(cfg, "train-convex")?;
    let (train, test) = split(cfg, ds, seed)?;
    let mut run = run_convex(cfg, &train, seed, &cfg.out_dir)?;
    if let Some(test) = test {
        let pred = run.network.forward(&test.x)?;
        run.summary["test"] = test_metrics(&pred, &test.y);
        write_json(&cfg.out_dir.join("summary.json"), &run.summary)?;
    }
    Ok(run.summary)
}

fn sgd_config(cfg: &RunConfig, n: usize, seed: u64) -> SgdConfig {
    SgdConfig {
        m1: cfg.m1,
        k: cfg.k,
        beta: cfg.beta,
        lr: cfg.sgd.lr,
        batch: cfg.sgd.batch.unwrap_or(n),
        epochs: cfg.sgd.epochs,
        seed,
        projection: cfg.sgd.projection,
    }
}

pub fn train_sgd(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("train-sgd")?;
    let ds = load_dataset(cfg, "train-sgd")?;
    let (train, test) = split(cfg, ds, seed)?;
    let t0 = Instant::now();
    let (params, trace) = sgd_train(&train, &sgd_config(cfg, train.n(), seed))?;
    let elapsed = t0.elapsed().as_secs_f64();
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("network.json"), &params.to_json()?)?;
    write_trace_jsonl(cfg.out_dir.join("trace.jsonl"), &trace)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    let mut summary = json!({
        "command": "train-sgd",
        "dataset_hash": dataset_hash(&train),
        "config_hash": config_hash(cfg),
        "objective": trace.last().map(|t| t.objective),
        "epochs": cfg.sgd.epochs,
        "timings": { "train_s": elapsed },
    });
    if let Some(test) = test {
        summary["test"] = test_metrics(&params.forward(&test.x)?, &test.y);
    }
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn load_model(cfg: &RunConfig, command: &str) -> Result<(Dataset, ArrangementPlan, f64), Failure> {
    let plan_path = cfg
        .plan_file
        .as_ref()
        .ok_or_else(|| Failure::usage(format!("{command} needs --plan PATH")))?;
    let ds = load_dataset(cfg, command)?;
    let ds = match (cfg.train_fraction, cfg.seed) {
        (Some(_), Some(seed)) => split(cfg, ds, seed)?.0,
        (Some(_), None) => return Err(Failure::usage("a train split needs --seed")),
        _ => ds,
    };
    let plan = ArrangementPlan::from_json(&read_text(plan_path)?)
        .map_err(|e| Failure::from(e).with_path(plan_path))?;
    plan.validate(&ds).map_err(|e| Failure::from(e).with_path(plan_path))?;
    Ok((ds, plan, cfg.beta))
}

fn load_solution(path: &Path) -> Result<SolutionDocument, Failure> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())).with_path(path))
}

pub fn reconstruct_cmd(cfg: &RunConfig, solution: &Path) -> Outcome {
    let (ds, plan, _) = load_model(cfg, "reconstruct")?;
    let doc = load_solution(solution)?;
    let model = ConvexModel::new(&ds, &plan, doc.point.beta)?;
    let point = model.point_from_document(&doc.point)?;
    let network = reconstruct(&model, &point, default_drop_tol(&point))?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("reconstructed-network.json"), &network.to_json()?)?;
    let (convex_objective, _) = model.objective_constrained(&point)?;
    let summary = json!({
        "command": "reconstruct",
        "subnets": network.k(),
        "convex_objective": convex_objective,
        "network_objective": network.objective(&ds, model.beta())?,
    });
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Certifies a convex solution, or a network after lifting it into the
/// plan's variable space.
pub fn certify_cmd(cfg: &RunConfig, solution: Option<&Path>, network: Option<&Path>) -> Outcome {
    let (ds, plan, beta) = load_model(cfg, "certify")?;
    let (model, point, lift) = match (solution, network) {
        (Some(path), None) => {
            let doc = load_solution(path)?;
            let model = ConvexModel::new(&ds, &plan, doc.point.beta)?;
            let point = model.point_from_document(&doc.point)?;
            (model, point, None)
        }
        (None, Some(path)) => {
            let params = NetworkParams::from_json(&read_text(path)?)
                .map_err(|e| Failure::from(e).with_path(path))?;
            let model = ConvexModel::new(&ds, &plan, beta)?;
            let (point, report) = lift_to_convex(&model, &params.balance(), &plan, LiftOptions::default())?;
            let network_objective = params.objective(&ds, beta)?;
            (model, point, Some((report, network_objective)))
        }
        _ => return Err(Failure::usage("certify needs exactly one of --solution or --network")),
    };
    let cert = certify(&model, &point)?;
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("certificate.json"), &cert)?;
    let mut summary = json!({
        "command": "certify",
        "primal_value": cert.primal_value,
        "lower_bound": cert.lower_bound,
        "gap": cert.gap,
        "primal_violation": cert.primal_violation,
    });
    if let Some((report, obj)) = lift {
        summary["lift"] = serde_json::to_value(&report)?;
        summary["network_objective"] = json!(obj);
        summary["equality_holds"] = json!(report.equality_holds());
    }
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct TableRow {
    method: String,
    seed: Option<u64>,
    subnets: usize,
    train_objective: f64,
    test_mse: Option<f64>,
    test_classification_error: Option<f64>,
    wall_clock_s: f64,
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    run: &'a str,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

fn table_csv(rows: &[TableRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("method,seed,subnets,train_objective,test_mse,test_classification_error,wall_clock_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            r.method,
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.subnets,
            r.train_objective,
            fmt(r.test_mse),
            fmt(r.test_classification_error),
            r.wall_clock_s
        ));
    }
    out
}

/// One convex solve against `sgd.seeds` SGD trials on the same training data.
pub fn compare(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("compare")?;
    let ds = load_dataset(cfg, "compare")?;
    let (train, test) = split(cfg, ds, seed)?;
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;

    let convex = run_convex(cfg, &train, seed, &cfg.out_dir.join("convex"))?;
    let metrics = |net: &NetworkParams| -> Result<(Option<f64>, Option<f64>), Failure> {
        Ok(match &test {
            Some(t) => {
                let m = test_metrics(&net.forward(&t.x)?, &t.y);
                (m["mse"].as_f64(), m["classification_error"].as_f64())
            }
            None => (None, None),
        })
    };
    let (mse, cls) = metrics(&convex.network)?;
    let mut rows = vec![TableRow {
        method: "convex".into(),
        seed: None,
        subnets: convex.network.k(),
        train_objective: convex.objective,
        test_mse: mse,
        test_classification_error: cls,
        wall_clock_s: convex.elapsed_s,
    }];

    let trials: Vec<u64> = (0..cfg.sgd.seeds as u64).map(|i| seed + i).collect();
    let sgd_runs = trials
        .par_iter()
        .map(|&s| {
            let t0 = Instant::now();
            let (params, trace) = sgd_train(&train, &sgd_config(cfg, train.n(), s))?;
            Ok((s, params, trace, t0.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>, convexnet::Error>>()?;
    for (s, params, trace, elapsed) in &sgd_runs {
        let (mse, cls) = metrics(params)?;
        rows.push(TableRow {
            method: "sgd".into(),
            seed: Some(*s),
            subnets: params.k(),
            train_objective: trace.last().map_or(f64::NAN, |t| t.objective),
            test_mse: mse,
            test_classification_error: cls,
            wall_clock_s: *elapsed,
        });
    }

    let mut warnings = Vec::new();
    if cfg.k < convex.network.k() {
        let msg = format!(
            "SGD architecture has K = {} subnets, fewer than the {} of the reconstructed convex solution",
            cfg.k,
            convex.network.k()
        );
        eprintln!("warning: {msg}");
        warnings.push(msg);
    }

    let trace_path: PathBuf = cfg.out_dir.join("traces.jsonl");
    let mut lines = String::new();
    for r in &convex.trace {
        lines.push_str(&serde_json::to_string(&TaggedRecord { run: "convex", record: r })?);
        lines.push('\n');
    }
    for (s, _, trace, _) in &sgd_runs {
        let tag = format!("sgd-{s}");
        for r in trace {
            lines.push_str(&serde_json::to_string(&TaggedRecord { run: &tag, record: r })?);
            lines.push('\n');
        }
    }
    write_text(&trace_path, &lines)?;
    write_text(&cfg.out_dir.join("comparison.csv"), &table_csv(&rows))?;
    write_json(&cfg.out_dir.join("comparison.json"), &rows)?;

    let best_sgd = rows
        .iter()
        .filter(|r| r.method == "sgd")
        .map(|r| r.train_objective)
        .fold(f64::INFINITY, f64::min);
    let summary = json!({
        "command": "compare",
        "dataset_hash": dataset_hash(&train),
        "config_hash": config_hash(cfg),
        "train_rows": train.n(),
        "test_rows": test.as_ref().map(|t| t.n()),
        "convex_objective": convex.objective,
        "best_sgd_objective": best_sgd,
        "gap": convex.summary["gap"],
        "warnings": warnings,
        "table": rows,
    });
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
