//! Generates a few procedural scenes, writes them to disk and reads them back.
//!
//! Usage: cargo run --example gen_scenes [OUT_DIR]

use std::path::PathBuf;

use nvs_contrast::io::{load_packs, save_pack};
use nvs_contrast::scene::{depth_bounds, generate_packs, make_realish, PackConfig, RealishNoise};

fn main() -> nvs_contrast::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("nvs_gen_scenes"));
    let cfg = PackConfig {
        width: 48,
        height: 36,
        n_views: 6,
        ..Default::default()
    };
    let packs = generate_packs(2, &cfg, None, 11)?;
    for (i, pack) in packs.iter().enumerate() {
        let (near, far) = depth_bounds(pack)?;
        println!(
            "scene {i}: {} primitives, {} views, depth range [{near:.3}, {far:.3}]",
            pack.scene.primitives.len(),
            pack.views.len()
        );
        save_pack(&out.join(format!("scene_{i:04}")), pack)?;
    }
    let loaded = load_packs(&out)?;
    println!("round trip exact: {}", loaded == packs);

    let noisy = make_realish(&packs[0], RealishNoise::default(), 3)?;
    let moved = noisy
        .views
        .iter()
        .zip(&packs[0].views)
        .map(|(a, b)| (a.camera.center() - b.camera.center()).norm())
        .fold(0.0, f64::max);
    println!("realish variant: largest camera shift {moved:.4}");
    println!("written to {}", out.display());
    Ok(())
}
