//! Manual calibration harness for the desk-scale synthetic-recovery
//! configurations. Ignored by default; run with
//! `cargo test --test calibration -- --ignored --nocapture`.

use nir_core::metrics::ncc;
use nir_core::registrar::{register, Method, RegistrationConfig};
use nir_core::synth::{make_pair, SynthSpec};
use nir_core::volume::warp_volume;

fn spec(seed: u64) -> SynthSpec {
    let mut s = SynthSpec::new([48, 48, 48], seed);
    s.delta_max = 4.0;
    s.blob_count = 24;
    s.blob_width = [2.5, 7.0];
    s
}

fn endpoint_error(
    field: &nir_core::deform::DeformationField,
    gt: &nir_core::deform::DeformationField,
    target: &nir_core::volume::Volume,
) -> f64 {
    let data = target.intensity_data().unwrap();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (a, b)) in field.positions.iter().zip(&gt.positions).enumerate() {
        if data[i] > 0.05 {
            let d2 = (0..3)
                .map(|k| (a[k] as f64 - b[k] as f64).powi(2))
                .sum::<f64>();
            sum += d2.sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

fn run_one(cfg: RegistrationConfig, label: &str) {
    run_one_spec(cfg, label, spec(0));
}

fn run_one_spec(mut cfg: RegistrationConfig, label: &str, s: SynthSpec) {
    let (target, moving, gt) = make_pair(&s).unwrap();
    let identity = nir_core::deform::DeformationField::identity(target.domain());
    println!(
        "  baseline: identity epe={:.3} init ncc={:.4}",
        endpoint_error(&identity, &gt.field, &target),
        ncc(&moving, &target).unwrap()
    );
    cfg.snapshot_iters = vec![100, 300, 900.min(cfg.iterations)];
    let t0 = std::time::Instant::now();
    let result = register(&target, &moving, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let warped = warp_volume(&moving, &result.field).unwrap();
    let score = ncc(&warped, &target).unwrap();
    let err = endpoint_error(&result.field, &gt.field, &target);
    let stats = nir_core::deform::jacobian_stats(&result.field, [1, 1, 1]).unwrap();
    println!(
        "{label}: {secs:.1}s ncc={score:.4} epe={err:.3} nonpos={:.2e} sim0={:.3} simN={:.3}",
        stats.nonpos_fraction,
        result.trace.first().map(|p| p.sim).unwrap_or(0.0),
        result.trace.last().map(|p| p.sim).unwrap_or(0.0),
    );
    for (it, f) in &result.snapshots {
        let w = warp_volume(&moving, f).unwrap();
        println!("  iter {it}: ncc={:.4}", ncc(&w, &target).unwrap());
    }
}

#[test]
#[ignore = "manual calibration tool"]
fn calibrate_nir_d() {
    for (lr, n, sigma, hidden, iters) in [
        (5e-4, 8, 3.0, vec![32, 32], 900),
        (5e-4, 8, 1.0, vec![32, 32], 900),
        (1e-3, 8, 1.0, vec![32, 32], 900),
    ] {
        let mut cfg = RegistrationConfig::for_method(Method::NirD);
        cfg.iterations = iters;
        cfg.lr = lr;
        cfg.fourier_n = n;
        cfg.fourier_sigma = sigma;
        cfg.hidden_dims = Some(hidden.clone());
        run_one(
            cfg,
            &format!("nir-d lr={lr} n={n} sigma={sigma} hidden={hidden:?} it={iters}"),
        );
    }
}

#[test]
#[ignore = "manual calibration tool"]
fn calibrate_velocity() {
    for (method, lr, lambda, hidden, iters) in [
        (Method::NirDDiff, 2e-3, 1.0, vec![24], 900),
        (Method::NirPDiff, 2e-3, 1.0, vec![24], 900),
    ] {
        let mut cfg = RegistrationConfig::for_method(method);
        cfg.iterations = iters;
        cfg.lr = lr;
        cfg.lambda_reg = Some(lambda);
        cfg.fourier_n = 8;
        cfg.fourier_sigma = 1.0;
        cfg.hidden_dims = Some(hidden.clone());
        cfg.minipatch.count = 3;
        cfg.minipatch.patch_size = 16;
        run_one(
            cfg,
            &format!("{method:?} lr={lr} lambda={lambda} hidden={hidden:?} it={iters}"),
        );
    }
}

#[test]
#[ignore = "manual calibration tool"]
fn calibrate_fold_contrast() {
    for method in [Method::NirDDiff, Method::NirPDiff] {
        let mut cfg = RegistrationConfig::for_method(method);
        cfg.iterations = 900;
        cfg.lr = 5e-3;
        cfg.lambda_reg = Some(0.1);
        cfg.fourier_n = 8;
        cfg.fourier_sigma = 3.0;
        cfg.hidden_dims = Some(vec![16]);
        cfg.minipatch.count = 2;
        cfg.minipatch.patch_size = 12;
        let mut s = spec(0);
        s.delta_max = 6.0;
        run_one_spec(cfg, &format!("{method:?} hard delta6"), s);
    }
}

#[test]
#[ignore = "manual calibration tool"]
fn calibrate_hybrid_diff() {
    let mut cfg = RegistrationConfig::for_method(Method::NirHDiff);
    cfg.iterations = 900;
    cfg.phase1_iterations = 200;
    cfg.lr = 1e-3;
    cfg.fourier_n = 8;
    cfg.fourier_sigma = 1.0;
    cfg.hidden_dims = Some(vec![24]);
    cfg.minipatch.count = 3;
    cfg.minipatch.patch_size = 16;
    run_one(cfg, "nir-h-diff it=200+900");
}

#[test]
#[ignore = "manual calibration tool"]
fn calibrate_grid() {
    for (iters, lr, lambda) in [(300, 5e-3, 1.0), (300, 1e-2, 0.0)] {
        let mut cfg = RegistrationConfig::for_method(Method::Grid);
        cfg.iterations = iters;
        cfg.lr = lr;
        cfg.lambda_reg = Some(lambda);
        run_one(cfg, &format!("grid it={iters} lr={lr} lambda={lambda}"));
        let mut nir = RegistrationConfig::for_method(Method::NirD);
        nir.iterations = iters;
        nir.lr = lr;
        nir.lambda_reg = Some(lambda);
        nir.fourier_n = 8;
        nir.fourier_sigma = 1.0;
        nir.hidden_dims = Some(vec![32, 32]);
        run_one(nir, &format!("nir-d it={iters} lr={lr} lambda={lambda}"));
    }
}
