//! Randomized invariants of the core building blocks.

use proptest::prelude::*;

use flowsr_core::checkpoint::{decode, encode, Container};
use flowsr_core::config::ConfigDoc;
use flowsr_core::degradation::{downsample, lift, transpose_upsample, DegradationSpec};
use flowsr_core::distill::{boot_lambda, distill_loss, student_one_step, DistillVariant};
use flowsr_core::eval::{parse_report, perceptual_proxy, psnr, report_csv, SweepResult, SweepRow};
use flowsr_core::flow::{interpolate, interpolate_rows, perturb};
use flowsr_core::oracles::{GaussianFlowSpec, ValidationSettings};
use flowsr_core::solvers::{teacher_slope, FnField, SolverKind};
use flowsr_core::Tensor;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-3.0..3.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// An image batch `[b, c, h, w]` with sides divisible by `scale`.
fn images(scale: usize) -> impl Strategy<Value = Tensor> {
    (1..3usize, 1..3usize, 1..4usize, 1..4usize).prop_flat_map(move |(b, c, h, w)| tensor(vec![b, c, h * scale, w * scale]))
}

fn pair(shape: Vec<usize>) -> impl Strategy<Value = (Tensor, Tensor)> {
    (tensor(shape.clone()), tensor(shape))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trips(
        config in "[a-z =\n\\[\\]0-9.]{0,40}",
        shapes in prop::collection::vec(prop::collection::vec(1..4usize, 0..4), 0..4),
        seed in any::<u64>(),
    ) {
        let mut k = seed;
        let mut next = || { k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (k >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
        let params: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("p.{i}"), Tensor::from_fn(s, |_| next() * 1e3)))
            .collect();
        let ema = params.iter().map(|(n, t)| (n.clone(), t.scale(0.5))).collect();
        let c = Container { config, params, ema };
        let bytes = encode(&c);
        prop_assert_eq!(decode(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_containers_are_rejected(cut in 0usize..200) {
        let c = Container {
            config: "[flow]\nsigma_p = 0.5\n".into(),
            params: vec![("w".into(), Tensor::full(&[3, 4], 1.5))],
            ema: vec![("w".into(), Tensor::full(&[3, 4], 1.0))],
        };
        let bytes = encode(&c);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn downsample_inverts_lift(scale in 1..5usize, y in images(1), sigma in 0.0..0.5f64) {
        let spec = DegradationSpec::new(scale, sigma).unwrap();
        let back = downsample(&lift(&y, &spec).unwrap(), &spec).unwrap();
        prop_assert!(back.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn transpose_upsample_is_the_adjoint(scale in 1..5usize, x in images(4), seed in any::<u64>()) {
        prop_assume!(x.shape()[2] % scale == 0 && x.shape()[3] % scale == 0);
        let spec = DegradationSpec::new(scale, 0.0).unwrap();
        let hx = downsample(&x, &spec).unwrap();
        let mut k = seed;
        let y = Tensor::from_fn(hx.shape(), |_| { k ^= k << 13; k ^= k >> 7; k ^= k << 17; (k % 1000) as f64 / 500.0 - 1.0 });
        let lhs = hx.dot(&y).unwrap();
        let rhs = x.dot(&transpose_upsample(&y, &spec).unwrap()).unwrap();
        prop_assert!(close(lhs, rhs, 1e-12), "{lhs} vs {rhs}");
    }

    #[test]
    fn lift_preserves_block_means(scale in 1..5usize, y in images(1)) {
        let spec = DegradationSpec::new(scale, 0.0).unwrap();
        let up = lift(&y, &spec).unwrap();
        prop_assert_eq!(up.shape()[2], y.shape()[2] * scale);
        prop_assert!(close(up.data().iter().sum::<f64>(), y.data().iter().sum::<f64>() * (scale * scale) as f64, 1e-12));
    }

    #[test]
    fn interpolation_hits_both_endpoints((x0, x1) in pair(vec![3, 2, 1, 1]), t in 0.0..1.0f64) {
        prop_assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.clone());
        prop_assert!(interpolate(&x0, &x1, 1.0).unwrap().max_abs_diff(&x1).unwrap() < 1e-15);
        let mid = interpolate(&x0, &x1, t).unwrap();
        let rows = interpolate_rows(&x0, &x1, &[t, t, t]).unwrap();
        prop_assert!(mid.max_abs_diff(&rows).unwrap() < 1e-15);
        // x_t − x₀ = t·(x₁ − x₀)
        let want = x1.sub(&x0).unwrap().scale(t);
        prop_assert!(mid.sub(&x0).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn perturbation_endpoints((x, eps) in pair(vec![2, 3, 1, 1])) {
        prop_assert!(perturb(&x, 0.0, &eps).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
        prop_assert!(perturb(&x, 1.0, &eps).unwrap().max_abs_diff(&eps).unwrap() < 1e-15);
        prop_assert!(perturb(&x, 1.5, &eps).is_err());
    }

    #[test]
    fn distill_losses_are_nonnegative(
        (vt, vs) in pair(vec![4, 2, 1, 1]),
        k in tensor(vec![4, 2, 1, 1]),
        t in prop::collection::vec(0.0..0.9f64, 4),
        dt in 0.01..0.1f64,
    ) {
        for v in [DistillVariant::Trajectory, DistillVariant::Boot, DistillVariant::Pinn] {
            let l = distill_loss(v, &vt, &vs, &k, &t, dt).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite(), "{v:?}: {l}");
        }
    }

    #[test]
    fn consistent_student_has_zero_loss(
        (vt, k) in pair(vec![3, 2, 1, 1]),
        t in prop::collection::vec(0.0..0.9f64, 3),
        dt in 0.01..0.1f64,
    ) {
        // v_s = (1 − dt/s)·v_t + (dt/s)·k zeroes both the trajectory and the PINN residual
        let w: Vec<f64> = t.iter().map(|ti| dt / (ti + dt)).collect();
        let keep: Vec<f64> = w.iter().map(|wi| 1.0 - wi).collect();
        let vs = vt.scale_rows(&keep).unwrap().add(&k.scale_rows(&w).unwrap()).unwrap();
        for v in [DistillVariant::Trajectory, DistillVariant::Boot, DistillVariant::Pinn] {
            let l = distill_loss(v, &vt, &vs, &k, &t, dt).unwrap();
            prop_assert!(l < 1e-20, "{v:?}: {l}");
        }
    }

    #[test]
    fn boot_is_trajectory_over_lambda_squared(
        (vt, vs) in pair(vec![1, 3, 1, 1]),
        k in tensor(vec![1, 3, 1, 1]),
        t in 0.0..0.9f64,
        dt in 0.01..0.1f64,
    ) {
        let lambda = boot_lambda(t, dt).unwrap();
        prop_assert!(close(lambda, dt / ((t + dt) * (1.0 - t)), 1e-12));
        let traj = distill_loss(DistillVariant::Trajectory, &vt, &vs, &k, &[t], dt).unwrap();
        let boot = distill_loss(DistillVariant::Boot, &vt, &vs, &k, &[t], dt).unwrap();
        prop_assert!(close(boot, traj / (lambda * lambda), 1e-10));
    }

    #[test]
    fn rk2_slopes_are_exact_for_affine_time_fields(
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        t in prop::collection::vec(0.0..0.9f64, 3),
        dt in 0.001..0.1f64,
        x in tensor(vec![3, 2, 1, 1]),
    ) {
        let field = FnField(move |x: &Tensor, t: &[f64]| {
            let w: Vec<f64> = t.iter().map(|ti| a + b * ti).collect();
            Tensor::full(x.shape(), 1.0).scale_rows(&w).unwrap()
        });
        let cond = Tensor::zeros(&[3, 0, 1, 1]);
        for kind in [SolverKind::Midpoint, SolverKind::Heun, SolverKind::Ralston] {
            let k = teacher_slope(&field, &x, &cond, &t, dt, kind).unwrap();
            for (i, ti) in t.iter().enumerate() {
                let want = a + b * (ti + dt / 2.0);
                prop_assert!(k.row(i).iter().all(|&v| close(v, want, 1e-12)), "{kind:?}");
            }
        }
        let k = teacher_slope(&field, &x, &cond, &t, dt, SolverKind::Euler).unwrap();
        prop_assert!(close(k.row(0)[0], a + b * t[0], 1e-12));
    }

    #[test]
    fn one_step_adds_the_velocity(x0 in tensor(vec![2, 2, 1, 1]), c in -2.0..2.0f64, t in 0.0..=1.0f64) {
        let field = FnField(move |x: &Tensor, _t: &[f64]| Tensor::full(x.shape(), c));
        let cond = Tensor::zeros(&[2, 0, 1, 1]);
        let out = student_one_step(&field, &x0, &cond, t).unwrap();
        prop_assert!(out.sub(&x0).unwrap().data().iter().all(|&d| close(d, c, 1e-12)));
        prop_assert!(student_one_step(&field, &x0, &cond, 1.5).is_err());
    }

    #[test]
    fn gaussian_flow_map_scales_the_std(s0 in 0.2..3.0f64, s1 in 0.2..3.0f64, x0 in -3.0..3.0f64, t in 0.0..=1.0f64) {
        let spec = GaussianFlowSpec::new(s0, s1, 1).unwrap();
        // the Monte-Carlo gate has its own tests; only the closed form is under test here
        let settings = ValidationSettings { samples: 10_000, max_z: f64::INFINITY, ..ValidationSettings::default() };
        let flow = spec.validated_with(&settings).unwrap();
        let want = x0 * spec.marginal_std(t) / s0;
        prop_assert!(close(flow.flow_map(x0, t).unwrap(), want, 1e-8));
    }

    #[test]
    fn report_round_trips(rows in prop::collection::vec((0.0..=1.0f64, -50.0..80.0f64, 0.0..10.0f64, 0.0..2.0f64, 0.0..1.0f64, 1..10_000usize), 0..8)) {
        let result = SweepResult {
            model_id: String::new(),
            dataset_id: String::new(),
            rows: rows
                .into_iter()
                .map(|(t, pm, ps, qm, qs, n)| SweepRow { t, psnr_mean: pm, psnr_std: ps, proxy_mean: qm, proxy_std: qs, n })
                .collect(),
        };
        prop_assert_eq!(parse_report(&report_csv(&result)).unwrap(), result);
    }

    #[test]
    fn config_round_trips(entries in prop::collection::vec(("[a-z][a-z_]{0,6}", "[a-z][a-z0-9_.]{0,6}", "[a-zA-Z0-9_.,-]{1,10}"), 0..12)) {
        let mut doc = ConfigDoc::new();
        for (s, k, v) in &entries {
            doc.set(s, k, v);
        }
        prop_assert_eq!(ConfigDoc::parse(&doc.to_text()).unwrap(), doc);
    }

    #[test]
    fn proxy_is_a_symmetric_dissimilarity((x, y) in pair(vec![2, 1, 8, 8])) {
        prop_assert_eq!(perceptual_proxy(&x, &x).unwrap(), 0.0);
        let xy = perceptual_proxy(&x, &y).unwrap();
        let yx = perceptual_proxy(&y, &x).unwrap();
        prop_assert!(xy >= 0.0 && close(xy, yx, 1e-12));
        prop_assert!(close(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap(), 1e-12));
    }
}
