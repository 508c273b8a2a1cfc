//! Trains a small model on two procedural scenes and prints the metrics log.

use std::time::Instant;

use nvs_contrast::scene::{build_pack, generate_scene, PackConfig};
use nvs_contrast::train::{holdout_psnr, train, Arm, TrainConfig};

fn main() -> nvs_contrast::Result<()> {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let mut cfg = if preset == "desk" {
        TrainConfig::desk()
    } else {
        TrainConfig::toy()
    };
    if let Some(n) = std::env::args().nth(2) {
        cfg.iterations = n.parse().expect("iteration count");
    }
    if let Some(arm) = std::env::args().nth(3) {
        cfg = Arm::parse(&arm)?.configure(&cfg);
    }
    let size = if preset == "desk" { 64 } else { 32 };
    let pc = PackConfig {
        width: size,
        height: size,
        n_views: 8,
        ..Default::default()
    };
    let packs = (0..2)
        .map(|s| build_pack(generate_scene(s, 6)?, &pc, s))
        .collect::<nvs_contrast::Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let mut window = Vec::new();
    let out = train(&cfg, &packs, &[], 1, &mut |l| {
        window.push(l.l_color);
        if window.len() == 100 {
            println!(
                "iter {:>5}  mean l_color over last 100: {:.5}",
                l.iter,
                window.iter().sum::<f64>() / 100.0
            );
            window.clear();
        }
    })?;
    let dt = t0.elapsed().as_secs_f64();
    println!("{:.1} ms per iteration", 1e3 * dt / cfg.iterations as f64);
    println!(
        "psnr on training scenes: {:.2}",
        holdout_psnr(&out.model, &packs, &cfg)?
    );
    Ok(())
}
