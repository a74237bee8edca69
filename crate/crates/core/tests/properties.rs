use maglev_mpc::gpm::{backward_costate, control_gradient, forward_integrate, gpm_solve, GpmSettings};
use maglev_mpc::ocp::{cost_gradients, dynamics_jacobians, stage_cost, ControlModel, Dynamics, OcpConfig};
use maglev_mpc::plant::{rk4_step, sample_table, AnalyticMagnet, DisturbanceSample, MagnetModel, Plant, PlantParams, PlantState, TableMagnet};
use maglev_mpc::shooting::{sqp_solve, SolveStatus, SqpSettings};
use maglev_mpc::simkit::{run_closed_loop, ControllerKind, GuidewayKind, Scenario};
use maglev_mpc::synthesis::{SynthState, SynthesisModel};
use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn scenario() -> Scenario {
    Scenario::new(PlantParams::default()).unwrap()
}

fn model() -> (ControlModel, OcpConfig) {
    let sc = scenario();
    let m = sc.control_model().unwrap();
    let cfg = sc.ocp_config(&m);
    (m, cfg)
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-8)
}

// Scaled box |x| <= 1, |u| <= 1, with the gap kept above 1.5 mm where the
// force law is still well conditioned.
fn random_point(rng: &mut ChaCha8Rng) -> (Vector3<f64>, f64) {
    let x = Vector3::new(rng.gen_range(-0.85..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    (x, rng.gen_range(-1.0..1.0))
}

#[test]
fn cost_gradient_matches_central_differences() {
    let (m, cfg) = model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cost = |x: &Vector3<f64>, u: f64| stage_cost(&m.output(x).unwrap(), u, &cfg.q, cfg.r);
    for _ in 0..100 {
        let (x, u) = random_point(&mut rng);
        let (gx, gu) = cost_gradients(&m, &x, u, &cfg).unwrap();
        let scale = Vector4::new(gx[0], gx[1], gx[2], gu).amax();
        for i in 0..3 {
            let h = 1e-6 * (1.0 + x[i].abs());
            let mut p = x;
            let mut n = x;
            p[i] += h;
            n[i] -= h;
            let fd = (cost(&p, u) - cost(&n, u)) / (2.0 * h);
            assert!(rel_err(gx[i], fd, scale) < 1e-5, "x {x:?} component {i}: {} vs {fd}", gx[i]);
        }
        let h = 1e-6;
        let fd = (cost(&x, u + h) - cost(&x, u - h)) / (2.0 * h);
        assert!(rel_err(gu, fd, scale) < 1e-5);
    }
}

#[test]
fn dynamics_jacobians_match_central_differences() {
    let (m, _) = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (x, u) = random_point(&mut rng);
        let (a, b) = dynamics_jacobians(&m, &x, u).unwrap();
        let scale = a.amax().max(b.amax());
        for j in 0..3 {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut p = x;
            let mut n = x;
            p[j] += h;
            n[j] -= h;
            let fd = (m.deriv(&p, u).unwrap() - m.deriv(&n, u).unwrap()) / (2.0 * h);
            for i in 0..3 {
                assert!(rel_err(a[(i, j)], fd[i], scale) < 1e-5, "A[{i},{j}] at {x:?}");
            }
        }
        let h = 1e-6;
        let fd = (m.deriv(&x, u + h).unwrap() - m.deriv(&x, u - h).unwrap()) / (2.0 * h);
        for i in 0..3 {
            assert!(rel_err(b[i], fd[i], scale) < 1e-5);
        }
    }
}

#[test]
fn adjoint_gradient_matches_discretized_cost() {
    let (m, cfg) = model();
    let settings = GpmSettings::converged(&cfg);
    let x0 = Vector3::new(0.3, -0.2, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let total = |u: &[f64]| forward_integrate(&m, &cfg, &x0, u).unwrap().cost;
    for _ in 0..10 {
        let u: Vec<f64> = (0..settings.grid).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let traj = forward_integrate(&m, &cfg, &x0, &u).unwrap();
        let lambda = backward_costate(&m, &cfg, &traj, &u).unwrap();
        let grad = control_gradient(&m, &cfg, &traj, &lambda, &u).unwrap();
        let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        for j in (0..u.len()).step_by(7) {
            let h = 1e-6;
            let mut p = u.clone();
            let mut n = u.clone();
            p[j] += h;
            n[j] -= h;
            // the gradient is per unit time, the cost is summed over cells
            let fd = (total(&p) - total(&n)) / (2.0 * h) / traj.h;
            assert!(rel_err(grad[j], fd, scale) < 1e-5, "cell {j}: {} vs {fd}", grad[j]);
        }
    }
}

#[test]
fn stage_cost_is_coercive_in_the_input() {
    let (m, cfg) = model();
    let y = m.output(&Vector3::new(0.2, 0.1, -0.3)).unwrap();
    let mut last = stage_cost(&y, 0.0, &cfg.q, cfg.r);
    assert!(last >= 0.0);
    for k in 1..20 {
        let c = stage_cost(&y, k as f64, &cfg.q, cfg.r);
        assert!(c > last);
        last = c;
    }
}

fn plant_flow(plant: &Plant, x0: &PlantState, u: f64, h: f64, t_end: f64) -> Vector3<f64> {
    let steps = (t_end / h).round() as usize;
    let mut x = x0.to_vector();
    for k in 0..steps {
        x = rk4_step(
            |_, v: &Vector3<f64>| plant.deriv(&PlantState::from_vector(v), u, &DisturbanceSample::default()).map(PlantState::to_vector),
            k as f64 * h,
            &x,
            h,
        )
        .unwrap();
    }
    x
}

#[test]
fn integrator_is_fourth_order_on_the_plant() {
    let params = PlantParams::default();
    let plant = Plant::analytic(params.clone()).unwrap();
    let eq = maglev_mpc::plant::equilibrium(&params, &plant.magnet, 0.010).unwrap();
    let x0 = PlantState {
        z: 0.0105,
        zdot: 0.02,
        current: eq.i0 + 0.5,
    };
    let u = eq.u0 + 20.0;
    let t_end = 0.02;
    let reference = plant_flow(&plant, &x0, u, 1e-5, t_end);
    let scale = Vector3::new(0.01, 0.1, 10.0);
    let err = |h: f64| (plant_flow(&plant, &x0, u, h, t_end) - reference).component_div(&scale).amax();
    let (e1, e2) = (err(2e-3), err(1e-3));
    let order = (e1 / e2).log2();
    assert!((3.8..=4.2).contains(&order), "order {order} ({e1:e}, {e2:e})");
}

#[test]
fn plant_and_synthesis_model_agree_under_the_shift() {
    let params = PlantParams::default();
    let plant = Plant::analytic(params.clone()).unwrap();
    let syn = SynthesisModel::new(params.clone(), plant.magnet.clone(), 0.010).unwrap();
    let eq = syn.eq;
    let scale = Vector3::new(0.01, 0.1, 10.0);
    let h = 1e-4;
    let mut xp = PlantState {
        z: eq.s0 + 4e-4,
        zdot: -0.01,
        current: eq.i0 - 0.3,
    }
    .to_vector();
    let mut xs = Vector3::new(4e-4, -0.01, -0.3);
    for k in 0..500 {
        let du = 15.0 * (k as f64 * 0.05).sin();
        xp = rk4_step(
            |_, v: &Vector3<f64>| plant.deriv(&PlantState::from_vector(v), eq.u0 + du, &DisturbanceSample::default()).map(PlantState::to_vector),
            0.0,
            &xp,
            h,
        )
        .unwrap();
        xs = rk4_step(
            |_, v: &Vector3<f64>| {
                let d = syn.deriv(&SynthState { ds: v[0], sdot: v[1], di: v[2] }, du, params.load_force)?;
                Ok::<_, maglev_mpc::Error>(Vector3::new(d.ds, d.sdot, d.di))
            },
            0.0,
            &xs,
            h,
        )
        .unwrap();
        let shifted = Vector3::new(xp[0] - eq.s0, xp[1], xp[2] - eq.i0);
        assert!((shifted - xs).component_div(&scale).amax() < 1e-10, "step {k}");
    }
}

fn dense_table(params: &PlantParams) -> MagnetModel {
    let gaps: Vec<f64> = (0..=180).map(|k| 2e-3 + 1e-4 * k as f64).collect();
    let currents: Vec<f64> = (0..=240).map(|k| 0.25 * k as f64).collect();
    let text = sample_table(&AnalyticMagnet::new(params), &gaps, &currents);
    MagnetModel::Table(Arc::new(TableMagnet::parse(&text, params.window()).unwrap()))
}

fn gap_rms(log: &maglev_mpc::simkit::SimLog) -> f64 {
    let e = log.gap_error();
    (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt()
}

#[test]
fn table_and_analytic_backends_are_interchangeable() {
    let params = PlantParams::default();
    let table = dense_table(&params);
    let analytic = MagnetModel::analytic(&params);
    for (s, i) in [(0.008, 20.0), (0.0123, 31.7), (0.017, 44.1)] {
        let a = analytic.force(s, i).unwrap();
        assert!(rel_err(table.force(s, i).unwrap(), a, a) < 1e-3);
    }
    for c in [ControllerKind::Lqr, ControllerKind::MpcRti] {
        let mut sc = scenario();
        sc.controller = c;
        let reference = run_closed_loop(&sc).unwrap();
        sc.magnet = table.clone();
        let log = run_closed_loop(&sc).unwrap();
        assert!(reference.verdict().is_stable() && log.verdict().is_stable());
        let (a, b) = (gap_rms(&reference), gap_rms(&log));
        assert!(rel_err(b, a, a) < 5e-3, "{c}: {a:e} vs {b:e}");
    }
}

#[test]
fn ideal_and_filtered_estimates_give_close_trajectories() {
    for c in [ControllerKind::Lqr, ControllerKind::MpcShooting] {
        let mut sc = scenario();
        sc.controller = c;
        sc.guideway.kind = GuidewayKind::None;
        sc.duration = 1.0;
        sc.initial = SynthState { ds: 1e-3, sdot: 0.0, di: 0.0 };
        let ideal = run_closed_loop(&sc).unwrap();
        sc.estimator.mode = maglev_mpc::estimator::EstimatorMode::Filtered;
        let filtered = run_closed_loop(&sc).unwrap();
        let (a, b) = (gap_rms(&ideal), gap_rms(&filtered));
        assert!(rel_err(b, a, a) < 0.05, "{c}: {a:e} vs {b:e}");
    }
}

#[test]
fn larger_gap_weight_never_shrinks_the_first_input() {
    let (m, cfg) = model();
    let x0 = Vector3::new(0.5, 0.0, 0.5);
    let mut last = 0.0;
    for qs in [25.0, 75.0, 150.0, 300.0, 600.0] {
        let mut c = cfg.clone();
        c.q[0] = qs;
        let r = sqp_solve(&m, &c, &x0, None, &SqpSettings::default());
        assert_eq!(r.status, SolveStatus::Converged, "Q_s = {qs}");
        assert!(r.controls[0].abs() >= last - 1e-9, "Q_s = {qs}");
        last = r.controls[0].abs();
    }
}

#[test]
fn converged_gpm_iterate_is_a_fixed_point() {
    let (m, cfg) = model();
    let x0 = Vector3::new(0.2, 0.0, 0.1);
    let settings = GpmSettings::converged(&cfg);
    let r = gpm_solve(&m, &cfg, &x0, None, &settings);
    assert_eq!(r.status, SolveStatus::Converged);
    let one = GpmSettings { max_iter: 1, ..settings };
    let again = gpm_solve(&m, &cfg, &x0, Some(&r.controls), &one);
    let diff = r.controls.iter().zip(&again.controls).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    assert!(diff < 1e-8, "{diff:e}");
}
