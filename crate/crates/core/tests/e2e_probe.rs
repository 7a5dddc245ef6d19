use rnst_core::features::Backbone;
use rnst_core::metrics::evaluate;
use rnst_core::rnst::{reconstruct, RNSTConfig};
use rnst_core::{make_phantom_pair, NoiseSpec, PhantomSpec};
use std::time::Instant;

#[test]
fn probe() {
    let backbone = Backbone::synthetic(8, 77);
    for seed in [1u64, 2, 3] {
        let spec = PhantomSpec {
            size: 128,
            contrast_gamma: 1.4,
            noise: NoiseSpec::new(20.0 / 255.0, seed),
        };
        let (clean, noisy, guidance) = make_phantom_pair(&spec).unwrap();
        let before = evaluate(&noisy, &clean).unwrap();
        let cfg = RNSTConfig {
            n_iter: 10,
            n0: 50,
            n_step: 50,
            mu: 0.13,
            lambda: 0.2,
            ..RNSTConfig::default()
        };
        let t = Instant::now();
        let (out, _trace) = reconstruct(&noisy, &guidance, &backbone, &cfg, Some(&clean)).unwrap();
        let after = evaluate(&out, &clean).unwrap();
        println!(
            "seed {seed}: PSNR {:.4} -> {:.4} (d {:.3})  SSIM {:.4} -> {:.4} (d {:.4})  ({:?})",
            before.psnr_db, after.psnr_db, after.psnr_db - before.psnr_db,
            before.ssim, after.ssim, after.ssim - before.ssim, t.elapsed()
        );
    }
}
