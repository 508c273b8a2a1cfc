//! Renders a held-out view with an untrained model and compares it with the
//! ground truth.
//!
//! Usage: cargo run --release --example render_view [OUT.png]

use nvs_contrast::eval::{psnr, ssim};
use nvs_contrast::frame::CameraView;
use nvs_contrast::io::save_png;
use nvs_contrast::model::{nearest_views, Model};
use nvs_contrast::scene::{build_pack, depth_bounds, generate_scene, PackConfig};
use nvs_contrast::train::TrainConfig;

fn main() -> nvs_contrast::Result<()> {
    let pc = PackConfig {
        width: 32,
        height: 32,
        n_views: 6,
        ..Default::default()
    };
    let pack = build_pack(generate_scene(4, 6)?, &pc, 4)?;
    let (near, far) = depth_bounds(&pack)?;
    let model = Model::new(TrainConfig::toy().model, 7)?;
    let target = &pack.views[0];
    let idx = nearest_views(&pack.views, &target.camera, Some(0), 4);
    let sources: Vec<&CameraView> = idx.iter().map(|&i| &pack.views[i]).collect();
    let out = model.render_view(&target.camera, &sources, near, far, 256)?;
    println!("sources {idx:?}, {} pixels unseen by any source", out.n_unseen);
    println!(
        "psnr {:.2} dB, ssim {:.4}",
        psnr(&out.image, &target.image)?,
        ssim(&out.image, &target.image)?
    );
    let mean_depth = out.depth.data().iter().sum::<f64>() / out.depth.data().len() as f64;
    println!("mean rendered depth {mean_depth:.3} in [{near:.3}, {far:.3}]");
    if let Some(path) = std::env::args().nth(1) {
        save_png(path.as_ref(), &out.image)?;
        println!("saved {path}");
    }
    Ok(())
}
