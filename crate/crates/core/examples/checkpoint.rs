//! Trains briefly, saves a checkpoint, reloads it and checks that renders
//! match bit for bit.

use nvs_contrast::frame::CameraView;
use nvs_contrast::io::{load_checkpoint, save_checkpoint};
use nvs_contrast::scene::{depth_bounds, generate_packs, PackConfig};
use nvs_contrast::train::{train, TrainConfig};

fn main() -> nvs_contrast::Result<()> {
    let pc = PackConfig {
        width: 16,
        height: 16,
        n_views: 6,
        ..Default::default()
    };
    let packs = generate_packs(1, &pc, None, 9)?;
    let cfg = TrainConfig {
        iterations: 20,
        ..TrainConfig::toy()
    };
    let out = train(&cfg, &packs, &[], 0, &mut |_| {})?;
    let path = std::env::temp_dir().join("nvs_example.ckpt");
    let meta = serde_json::to_value(&cfg).expect("config serializes");
    save_checkpoint(&path, &out.model, cfg.adam, meta, out.adam_steps)?;
    let (loaded, header) = load_checkpoint(&path)?;
    println!("{} tensors after {} iterations", loaded.params.len(), header.iterations);

    let pack = &packs[0];
    let (near, far) = depth_bounds(pack)?;
    let sources: Vec<&CameraView> = pack.views[1..].iter().collect();
    let a = out.model.render_view(&pack.views[0].camera, &sources, near, far, 128)?;
    let b = loaded.render_view(&pack.views[0].camera, &sources, near, far, 128)?;
    println!("renders identical: {}", a.image == b.image && a.depth == b.depth);
    Ok(())
}
