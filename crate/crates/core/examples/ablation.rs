//! A short ablation: trains several arms on the same scenes and scores them
//! on noisy test scenes.
//!
//! Usage: cargo run --release --example ablation [ITERATIONS]

use nvs_contrast::eval::EvalOptions;
use nvs_contrast::scene::{generate_packs, PackConfig, RealishNoise};
use nvs_contrast::train::{run_arm, summarize, summary_csv, Arm, TrainConfig};

fn main() -> nvs_contrast::Result<()> {
    let iterations = std::env::args()
        .nth(1)
        .map_or(100, |s| s.parse().expect("iteration count"));
    let pc = PackConfig {
        width: 24,
        height: 24,
        n_views: 8,
        ..Default::default()
    };
    let train_packs = generate_packs(2, &pc, None, 100)?;
    let test = generate_packs(1, &pc, Some(RealishNoise::default()), 200)?;
    let base = TrainConfig {
        iterations,
        ..TrainConfig::toy()
    };
    let eval = EvalOptions {
        n_source_views: base.n_source_views,
        views_per_scene: Some(2),
        ..Default::default()
    };
    let mut runs = Vec::new();
    for arm in [Arm::Base, Arm::Geo, Arm::Full] {
        let cfg = arm.configure(&base);
        let r = run_arm(arm.name(), &cfg, &train_packs, &test, &[0], &eval, &mut |_, _, _| {})?;
        for x in &r {
            println!(
                "{}: loss {:.5} -> {:.5}, psnr {:.2}",
                x.arm, x.first_loss, x.final_loss, x.psnr
            );
        }
        runs.extend(r);
    }
    print!("{}", summary_csv(&summarize(&runs)));
    Ok(())
}
