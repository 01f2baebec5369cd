use std::f64::consts::PI;

use qfibound::asymptotics::{branch_integral, branch_trajectory, closed_form_reference};
use qfibound::bound::{integrate_bound, IntegrationOptions};
use qfibound::channel::{build_channel, ModelConfig, ModelKind, NoiseKind, ParametricChannel};
use qfibound::dynamics::{oracle_trajectory, ControlSchedule};
use qfibound::operator::OperatorMatrix;
use qfibound::qec::{qec_qfi, qec_qfi_trajectory, CodePath};
use qfibound::span::{classify, uniform_grid, Regime, DEFAULT_SPAN_TOL};

fn catalog(model: ModelKind, noise: &[(NoiseKind, f64)]) -> ParametricChannel {
    build_channel(&ModelConfig::catalog(model, 1.0, 1.0, noise)).unwrap()
}

fn plus() -> OperatorMatrix {
    OperatorMatrix::from_real_rows(2, &[0.5, 0.5, 0.5, 0.5])
}

/// Relative phase 2∫B sin(ωs) ds; its ω-derivative squared is the |+⟩ QFI.
fn noiseless_ac_plus_qfi(t: f64) -> f64 {
    let dphi = 2.0 * (t * t.sin() + t.cos() - 1.0);
    dphi * dphi
}

#[test]
fn free_evolution_matches_phase_formula() {
    let ch = catalog(ModelKind::Ac, &[]);
    let times: Vec<f64> = (1..=8).map(|k| k as f64 * 0.75).collect();
    let run = oracle_trajectory(&ch, 1.0, &plus(), &ControlSchedule::none(), 1e-3, &times).unwrap();
    for s in run.iter().filter(|s| s.t > 0.0) {
        let want = noiseless_ac_plus_qfi(s.t);
        assert!((s.qfi - want).abs() <= 1e-6 * want.max(1.0), "t = {}: {} vs {}", s.t, s.qfi, want);
    }
}

#[test]
fn free_evolution_stays_below_bound() {
    let ch = catalog(ModelKind::Rf, &[(NoiseKind::SpontaneousEmission, 0.1)]);
    let times: Vec<f64> = (1..=10).map(|k| k as f64 * 0.6).collect();
    let opts = IntegrationOptions { checkpoints: times.clone(), ..IntegrationOptions::default() };
    let bound = integrate_bound(&ch, 1.0, 6.0, &opts).unwrap();
    let run = oracle_trajectory(&ch, 1.0, &plus(), &ControlSchedule::none(), 5e-3, &times).unwrap();
    for s in run.iter().filter(|s| s.t > 0.0) {
        assert!(s.qfi <= bound.q_at(s.t) * (1.0 + 1e-3), "t = {}", s.t);
    }
}

#[test]
fn trajectory_helpers_end_at_single_integrals() {
    let ch = catalog(ModelKind::Ac, &[(NoiseKind::SpontaneousEmission, 0.1)]);
    let times = [1.0, 2.5, 4.0, 2.0 * PI];
    let traj = branch_trajectory(&ch, 1.0, &times, Regime::Dhls).unwrap();
    let last = branch_integral(&ch, 1.0, 2.0 * PI, Regime::Dhls).unwrap();
    assert!((traj[3] / last - 1.0).abs() < 1e-7);
    assert!(traj.windows(2).all(|w| w[1] >= w[0]));

    let ch = catalog(ModelKind::Ac, &[(NoiseKind::DephasingX, 0.1)]);
    let path = CodePath::Optimal { channel: ch.clone(), omega: 1.0 };
    let traj = qec_qfi_trajectory(&ch, 1.0, &times, &path).unwrap();
    let last = qec_qfi(&ch, 1.0, 2.0 * PI, &path).unwrap();
    assert!((traj[3] / last - 1.0).abs() < 1e-7);
}

#[test]
fn dhls_branch_approaches_cubic_closed_form() {
    let ch = catalog(ModelKind::Ac, &[(NoiseKind::SpontaneousEmission, 0.1)]);
    let t = 200.0 * PI;
    let branch = branch_integral(&ch, 1.0, t, Regime::Dhls).unwrap();
    let closed = closed_form_reference(ModelKind::Ac, NoiseKind::SpontaneousEmission, 1.0, 1.0, 0.1, t).unwrap();
    assert!((branch / closed - 1.0).abs() < 0.02, "{branch} vs {closed}");
}

#[test]
fn classification_drives_branch_choice() {
    let grid = uniform_grid(20.0 * PI, 801);
    let ch = catalog(ModelKind::Rf, &[(NoiseKind::DephasingX, 0.1), (NoiseKind::DephasingZ, 0.1)]);
    let report = classify(&ch, 1.0, &grid, 4.0 * PI, DEFAULT_SPAN_TOL).unwrap();
    assert_eq!(report.overall_regime, Regime::Dhls);
    let ch = catalog(ModelKind::Rf, &[(NoiseKind::DephasingX, 0.1)]);
    let report = classify(&ch, 1.0, &grid, 4.0 * PI, DEFAULT_SPAN_TOL).unwrap();
    assert_eq!(report.overall_regime, Regime::Dhnls);
}
