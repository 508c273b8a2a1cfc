//! Builds geometric positive and negative pairs between three views, then
//! evaluates the weighted contrastive loss on an untrained feature network
//! and the scalar InfoNCE form on a hand-made example.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nvs_contrast::autodiff::Session;
use nvs_contrast::contrast::{build_contrast_batch, contrastive_loss, negative_weights, weighted_info_nce, TAU_PARAM};
use nvs_contrast::frame::{CameraView, Pixel};
use nvs_contrast::geometry::Camera;
use nvs_contrast::model::Model;
use nvs_contrast::scene::{build_pack, depth_bounds, generate_scene, PackConfig};
use nvs_contrast::train::TrainConfig;

fn main() -> nvs_contrast::Result<()> {
    let q_plus = Pixel::new(10.0, 10.0);
    let q_minus = [Pixel::new(11.0, 10.0), Pixel::new(20.0, 12.0), Pixel::new(40.0, 30.0)];
    let lambda = negative_weights(q_plus, &q_minus, 10.0)?;
    println!("negative weights {lambda:.4?} (sum {:.4})", lambda.iter().sum::<f64>());
    let p = [1.0, 0.0];
    let loss = weighted_info_nce(
        &p,
        &[0.9, 0.1],
        &[vec![0.8, 0.2], vec![0.0, 1.0], vec![-1.0, 0.0]],
        &lambda,
        0.1,
    )?;
    println!("scalar loss {loss:.6}");

    let pc = PackConfig {
        width: 32,
        height: 32,
        n_views: 4,
        ..Default::default()
    };
    let pack = build_pack(generate_scene(2, 6)?, &pc, 2)?;
    let (near, far) = depth_bounds(&pack)?;
    let cfg = TrainConfig::toy();
    let views: Vec<&CameraView> = pack.views[..3].iter().collect();
    let batch = build_contrast_batch(
        &views,
        &cfg.model.contrast,
        near,
        far,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    for pair in &batch.pairs {
        println!(
            "views {} -> {}: {} of {} pixels unoccluded",
            pair.i,
            pair.j,
            pair.pixels.len(),
            pair.n_drawn
        );
    }

    let model = Model::new(cfg.model.clone(), 0)?;
    let mut s = Session::train(&model.params);
    let images: Vec<_> = views.iter().map(|v| &v.image).collect();
    let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
    let maps = model.features.forward(&mut s, &images, &cams, near, far, 0)?;
    let l = contrastive_loss(&mut s, maps.enhanced, maps.grid, &batch, &cfg.model.contrast)?;
    let grads = s.param_grads(l);
    println!(
        "contrastive loss {:.6} over {} terms",
        s.value(l).item(),
        batch.n_terms()
    );
    println!("d loss / d log_tau = {:.6}", grads[TAU_PARAM].item());
    Ok(())
}
