//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line reaches the
//! terminal. `FLOWSR_ACCEPT=1,7` restricts the run to the listed criteria.
//! Exits non-zero when any selected criterion fails.

use std::time::Instant;

use flowsr_core::autodiff::Graph;
use flowsr_core::checkpoint::{encode, model_container};
use flowsr_core::checks::{
    adjoint_battery, grad_battery, ideal_student_loss, loglog_slope, oracle_battery, solver_order_battery, CheckItem,
};
use flowsr_core::config::ConfigDoc;
use flowsr_core::data::{gen_toy2d, DatasetSpec};
use flowsr_core::degradation::DegradationSpec;
use flowsr_core::distill::{
    distill_train, record_objective, student_one_step, DistillConfig, DistillVariant, StudentBatch,
};
use flowsr_core::eval::{score_estimates, sweep_estimates, SweepMode, SweepRow, SweepSetup};
use flowsr_core::flow::{
    condition_batch, train_teacher, Discrepancy, FlowConfig, FlowCoupling, GaussianSource, TensorPool,
};
use flowsr_core::model::{ArchSpec, VelocityModel};
use flowsr_core::oracles::{GaussianFlow, GaussianFlowSpec, ValidationSettings};
use flowsr_core::random::{randn, seeded};
use flowsr_core::solvers::{solve_each, straightness, NfeStats, SolverKind, SolverSpec};
use flowsr_core::Tensor;

type Outcome = Result<(bool, String), flowsr_core::Error>;

fn battery(items: &[CheckItem]) -> (bool, String) {
    let failed: Vec<String> = items.iter().filter(|i| !i.pass).map(|i| i.to_string()).collect();
    let detail = if failed.is_empty() {
        format!("{} items", items.len())
    } else {
        format!("{}/{} items failed: {}", failed.len(), items.len(), failed.join("; "))
    };
    (failed.is_empty(), detail)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let items = grad_battery(11)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = items.iter().map(|i| i.value).fold(0.0, f64::max);
    let (ok, detail) = battery(&items);
    Ok((ok && secs < 120.0, format!("{detail}, worst rel err {worst:.2e}, {secs:.1}s (< 120s)")))
}

fn c2_stop_gradient() -> Outcome {
    // The bracket weights are registered as trainable parameters of their own;
    // every gradient reaching them must be exactly zero.
    let arch = ArchSpec::mlp(2, 2, vec![8, 8], 4);
    let student = VelocityModel::init(arch.clone(), 1)?;
    let mut teacher = VelocityModel::init(arch.clone(), 2)?;
    teacher.freeze();
    let mut rng = seeded(3);
    let batch = StudentBatch {
        x0: randn(&[6, 2, 1, 1], &mut rng),
        cond: randn(&[6, 2, 1, 1], &mut rng),
        t: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
    };
    let mut leaks = 0usize;
    let mut live_nonzero = true;
    for variant in [DistillVariant::Trajectory, DistillVariant::Boot, DistillVariant::Pinn] {
        let cfg = DistillConfig { dt: 0.1, variant, ..DistillConfig::default() };
        let mut g = Graph::new();
        let live = student.params().register(&mut g);
        let bracket = student.params().register_prefixed(&mut g, "sg.");
        let v = record_objective(&mut g, &arch, &live, Some(&bracket), &teacher, &batch, &cfg)?;
        let grads = g.param_grads(&g.backward(v.total)?);
        for (name, t) in &grads {
            if name.starts_with("sg.") {
                leaks += t.data().iter().filter(|&&x| x != 0.0).count();
            }
        }
        live_nonzero &= grads.iter().any(|(n, t)| !n.starts_with("sg.") && t.max_abs() > 0.0);
    }

    let before = encode(&model_container(&teacher, &ConfigDoc::new()));
    let data = gen_toy2d(2000, 8, 1)?;
    let cfg = DistillConfig {
        degradation: Some(DegradationSpec::new(1, 0.3)?),
        sigma_p: 0.5,
        batch: 32,
        iterations: 200,
        lr: 1e-3,
        warmup: 20,
        ema_ratio: 0.99,
        seed: 4,
        ..DistillConfig::default()
    };
    let run = distill_train(&teacher, &mut TensorPool::new(data)?, &cfg)?;
    let after = encode(&model_container(&teacher, &ConfigDoc::new()));
    let identical = before == after;
    let moved = run.student.params() != teacher.params();
    Ok((
        leaks == 0 && live_nonzero && identical && moved && run.aborted.is_none(),
        format!(
            "nonzero bracket grads {leaks}, live grads nonzero {live_nonzero}, teacher bytes identical {identical} after {} iterations",
            run.trace.len()
        ),
    ))
}

fn c3_operators() -> Outcome {
    Ok(battery(&adjoint_battery(12)?))
}

fn c4_solver_order() -> Outcome {
    let start = Instant::now();
    let items = solver_order_battery()?;
    let secs = start.elapsed().as_secs_f64();
    let slopes: Vec<String> =
        items.iter().filter(|i| i.criterion.contains('±')).map(|i| format!("{}={:.3}", i.name, i.value)).collect();
    let (ok, detail) = battery(&items);
    Ok((ok && secs < 60.0, format!("{detail}, {}, {secs:.2}s (< 60s)", slopes.join(" "))))
}

const C5_SEED: u64 = 0x5ef0;

fn c5_oracle() -> Outcome {
    // The literal three-standard-error rule at every one of the 189 points.
    // The z-scores are close to standard normal, so whether one of them
    // crosses 3 depends on the draw; the seed is fixed.
    let settings = ValidationSettings { samples: 1_600_000, max_z: 3.0, seed: C5_SEED, ..ValidationSettings::default() };
    let items = oracle_battery(&settings)?;
    let worst_z = items.iter().filter(|i| i.name.contains("mc-z")).map(|i| i.value).fold(0.0, f64::max);
    let worst_var = items.iter().filter(|i| i.name.contains("transport")).map(|i| i.value).fold(0.0, f64::max);
    let (ok, detail) = battery(&items);
    Ok((ok, format!("{detail}, worst z {worst_z:.2} (<= 3), worst variance error {:.2}% (<= 3%)", worst_var * 100.0)))
}

fn c6_teacher_convergence() -> Outcome {
    let start = Instant::now();
    let oracle = GaussianFlowSpec::new(1.0, 1.0, 1)?.validated()?;
    let cfg = FlowConfig {
        sigma_p: 1.0,
        degradation: None,
        discrepancy: Discrepancy::L2,
        t_min: 0.0,
        t_max: 1.0,
        batch: 256,
        iterations: 5000,
        lr: 1e-3,
        warmup: 200,
        ema_ratio: 0.999,
        seed: 3,
    };
    let model = VelocityModel::init(ArchSpec::mlp(1, 0, vec![64, 64], 16), 1)?;
    let run = train_teacher(model, &mut GaussianSource { std: 1.0, shape: [1, 1, 1] }, &cfg)?;
    if let Some(e) = run.aborted {
        return Err(e);
    }
    let rmse = grid_rmse(&run.model, &oracle)?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        rmse <= 0.05 && secs <= 1800.0,
        format!("grid RMSE {rmse:.4} (<= 0.05) after {} steps, {secs:.0}s (<= 1800s)", cfg.iterations),
    ))
}

/// RMSE against the closed-form velocity on 9 times × 41 points over ±2 marginal stds.
fn grid_rmse(model: &VelocityModel, oracle: &GaussianFlow) -> Result<f64, flowsr_core::Error> {
    let (mut se, mut n) = (0.0, 0.0);
    for k in 1..=9 {
        let t = k as f64 / 10.0;
        let s = oracle.spec().marginal_std(t);
        let xs = Tensor::from_fn(&[41, 1, 1, 1], |i| -2.0 * s + 4.0 * s * i as f64 / 40.0);
        let v = model.forward_ema(&xs, &Tensor::zeros(&[41, 0, 1, 1]), &[t; 41])?;
        se += v.sub(&oracle.velocity(&xs, t)?)?.sq_norm();
        n += 41.0;
    }
    Ok((se / n).sqrt())
}

/// Generic linear field for the truncation criterion. The Gaussian oracle's
/// own field is avoided: there the midpoint step's cubic error term vanishes
/// identically (see tests/truncation.rs).
fn truncation_field(t: f64) -> f64 {
    1.0 + t
}

fn c7_truncation() -> Outcome {
    let dts = [0.2, 0.1, 0.05, 0.025];
    let mut parts = Vec::new();
    let mut ok = true;
    for (kind, want, tol) in [(SolverKind::Euler, 2.0, 0.2), (SolverKind::Midpoint, 3.0, 0.3)] {
        let losses: Vec<f64> =
            dts.iter().map(|&dt| ideal_student_loss(&truncation_field, kind, dt)).collect::<Result<_, _>>()?;
        let slope = loglog_slope(&dts, &losses);
        ok &= (slope - want).abs() <= tol;
        parts.push(format!("{kind} loss slope {slope:.3} (want {want} ± {tol})"));
    }
    Ok((ok, parts.join(", ")))
}

fn ordered(rows: &[SweepRow]) -> (bool, String) {
    let (first, last) = (rows.first().unwrap(), rows.last().unwrap());
    let ok = first.psnr_mean > last.psnr_mean + 0.3 && last.proxy_mean < 0.95 * first.proxy_mean;
    let curve: Vec<String> =
        rows.iter().map(|r| format!("t={} {:.2}dB/{:.4}", r.t, r.psnr_mean, r.proxy_mean)).collect();
    (ok, curve.join(" "))
}

fn c8_tradeoff() -> Outcome {
    let deg = Some(DegradationSpec::new(4, 0.05)?);
    let sigma_p = 0.5;
    let train = DatasetSpec::textures(4000, 1).generate()?;
    let test = DatasetSpec::textures(100, 2).generate()?;
    let flow = FlowConfig {
        sigma_p,
        degradation: deg,
        discrepancy: Discrepancy::L2,
        t_min: 0.0,
        t_max: 1.0,
        batch: 32,
        iterations: 4000,
        lr: 1e-3,
        warmup: 200,
        ema_ratio: 0.999,
        seed: 3,
    };
    let arch = ArchSpec::conv(1, 1, 32, 4, vec![32; 3], 16);
    let run = train_teacher(VelocityModel::init(arch, 1)?, &mut TensorPool::new(train.clone())?, &flow)?;
    if let Some(e) = run.aborted {
        return Err(e);
    }
    let mut teacher = run.model;
    teacher.freeze();
    let cfg = DistillConfig {
        iterations: 2000,
        batch: 32,
        lr: 3e-4,
        warmup: 100,
        ema_ratio: 0.999,
        seed: 4,
        ..DistillConfig::for_flow(&flow)
    };
    let student = distill_train(&teacher, &mut TensorPool::new(train)?, &cfg)?;
    if let Some(e) = student.aborted {
        return Err(e);
    }
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let setup = SweepSetup { sigma_p, degradation: deg, seed: 9 };
    let est = sweep_estimates(&student.student, SweepMode::Student, &test, &grid, &setup)?;
    let (s_ok, s_curve) = ordered(&score_estimates(&est, &test, &grid)?);
    let est = sweep_estimates(&teacher, SweepMode::Teacher(SolverSpec::rk45(1e-3)), &test, &grid, &setup)?;
    let (t_ok, t_curve) = ordered(&score_estimates(&est, &test, &grid)?);
    Ok((s_ok && t_ok, format!("student [{s_curve}] teacher [{t_curve}]")))
}

/// Toy SR task shared by criteria 9 and 10: 8-component ring, identity
/// degradation with measurement noise 0.3.
struct ToyTask {
    train: Tensor,
    test: Tensor,
    deg: Option<DegradationSpec>,
}

impl ToyTask {
    fn new() -> Result<Self, flowsr_core::Error> {
        Ok(Self { train: gen_toy2d(20000, 8, 1)?, test: gen_toy2d(500, 8, 2)?, deg: Some(DegradationSpec::new(1, 0.3)?) })
    }

    fn flow(&self, sigma_p: f64) -> FlowConfig {
        FlowConfig {
            sigma_p,
            degradation: self.deg,
            discrepancy: Discrepancy::L2,
            t_min: 0.0,
            t_max: 1.0,
            batch: 128,
            iterations: 10_000,
            lr: 1e-3,
            warmup: 200,
            ema_ratio: 0.999,
            seed: 3,
        }
    }

    fn teacher(&self, sigma_p: f64) -> Result<VelocityModel, flowsr_core::Error> {
        let arch = ArchSpec::mlp(2, 2, vec![128, 128], 16);
        let run = train_teacher(VelocityModel::init(arch, 1)?, &mut TensorPool::new(self.train.clone())?, &self.flow(sigma_p))?;
        if let Some(e) = run.aborted {
            return Err(e);
        }
        let mut m = run.model;
        m.freeze();
        Ok(m)
    }
}

fn c9_distillation_gap() -> Outcome {
    let task = ToyTask::new()?;
    let sigma_p = 0.5;
    let teacher = task.teacher(sigma_p)?;
    let c = condition_batch(&task.test, task.deg.as_ref(), sigma_p, &mut seeded(77))?;
    let (endpoint, _) = solve_each(&teacher, &c.x0, &c.cond, (0.0, 1.0), &SolverSpec::rk45(1e-3))?;
    let mut gaps = Vec::new();
    for variant in [DistillVariant::Trajectory, DistillVariant::Boot] {
        let cfg = DistillConfig {
            variant,
            iterations: 3000,
            batch: 128,
            lr: 1e-4,
            warmup: 200,
            ema_ratio: 0.999,
            seed: 4,
            ..DistillConfig::for_flow(&task.flow(sigma_p))
        };
        let run = distill_train(&teacher, &mut TensorPool::new(task.train.clone())?, &cfg)?;
        if let Some(e) = run.aborted {
            return Err(e);
        }
        let one = student_one_step(&run.student, &c.x0, &c.cond, 1.0)?;
        gaps.push(one.sub(&endpoint)?.sq_norm() / endpoint.sq_norm());
    }
    let (ours, boot) = (gaps[0], gaps[1]);
    Ok((ours <= 0.1 && ours < boot, format!("relative MSE trajectory {ours:.4} (<= 0.1), boot {boot:.4}")))
}

fn c10_straightness() -> Outcome {
    let task = ToyTask::new()?;
    let mut s = Vec::new();
    let mut nfe = Vec::new();
    for sigma_p in [0.1, 0.8] {
        let teacher = task.teacher(sigma_p)?;
        let mut sampler =
            FlowCoupling { source: TensorPool::new(task.test.clone())?, degradation: task.deg, sigma_p };
        s.push(straightness(&teacher, &mut sampler, 32, 2000, 5)?);
        let c = condition_batch(&task.test, task.deg.as_ref(), sigma_p, &mut seeded(77))?;
        let (_, counts) = solve_each(&teacher, &c.x0, &c.cond, (0.0, 1.0), &SolverSpec::rk45(1e-3))?;
        nfe.push(NfeStats::from_counts(&counts).mean);
    }
    Ok((
        s[1] > s[0] && nfe[1] >= nfe[0],
        format!("S {:.4} -> {:.4}, mean NFE {:.1} -> {:.1} (sigma_p 0.1 -> 0.8)", s[0], s[1], nfe[0], nfe[1]),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient battery", c1_gradients),
        ("stop-gradient battery", c2_stop_gradient),
        ("operator battery", c3_operators),
        ("solver-order battery", c4_solver_order),
        ("oracle battery", c5_oracle),
        ("teacher convergence", c6_teacher_convergence),
        ("ideal-student truncation", c7_truncation),
        ("trade-off reproduction", c8_tradeoff),
        ("distillation gap", c9_distillation_gap),
        ("straightness trend", c10_straightness),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("FLOWSR_ACCEPT").ok().map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} C{id} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
