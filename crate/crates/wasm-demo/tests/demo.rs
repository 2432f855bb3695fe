use shadow_da_wasm::{run_lorenz63, run_lyapunov, run_sync, MAX_STEPS};

#[test]
fn lorenz63_twin_experiment_tracks_truth() {
    let a = run_lorenz63(1.0, 5.0, 2, 2.5, 3).unwrap();
    let n = 1001;
    assert_eq!(a.truth().len(), 3 * n);
    assert_eq!(a.estimate().len(), 3 * n);
    assert_eq!(a.observations().len(), 3 * n);
    assert_eq!(a.windows(), 2);
    assert!(a.mse() < 0.5, "mse {}", a.mse());
    assert!((a.c() / a.c_truth() - 1.0).abs() < 0.2);
}

#[test]
fn lorenz63_rejects_bad_input() {
    assert!(run_lorenz63(-1.0, 5.0, 2, 2.5, 3).is_err());
    assert!(run_lorenz63(1.0, 5.0, 4, 2.5, 3).is_err());
    assert!(run_lorenz63(1.0, (MAX_STEPS as f64 + 1.0) * 0.005, 2, 2.5, 3).is_err());
}

#[test]
fn sync_curves_have_one_value_per_step() {
    let ps = [10, 25];
    let curves = run_sync(&ps, 10.0, 1).unwrap();
    let n = curves.len() / ps.len();
    assert_eq!(n, 201);
    let wide = &curves[n..];
    // The wide frame synchronizes: the error ends far below its start.
    assert!(wide[n - 1] < 1e-3 * wide[0], "{} vs {}", wide[n - 1], wide[0]);
    assert!(run_sync(&[0], 10.0, 1).is_err());
}

#[test]
fn lorenz63_spectrum_has_expected_signs() {
    let l = run_lyapunov("lorenz63", 3, 100.0, 1).unwrap();
    assert_eq!(l.len(), 3);
    assert!(l[0] > 0.5 && l[1].abs() < 0.1 && l[2] < -10.0, "{l:?}");
    assert!(run_lyapunov("nope", 3, 10.0, 1).is_err());
}
