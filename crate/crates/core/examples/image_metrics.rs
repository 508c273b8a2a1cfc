//! PSNR and SSIM of progressively degraded copies of a rendered scene view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nvs_contrast::eval::{psnr, ssim};
use nvs_contrast::frame::Image;
use nvs_contrast::scene::{build_pack, generate_scene, PackConfig};

fn main() -> nvs_contrast::Result<()> {
    let pc = PackConfig {
        width: 48,
        height: 48,
        n_views: 1,
        ..Default::default()
    };
    let gt = build_pack(generate_scene(1, 6)?, &pc, 1)?.views.remove(0).image;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>8} {:>8} {:>8}", "noise", "psnr", "ssim");
    for sigma in [0.0, 0.01, 0.03, 0.1, 0.3] {
        let data = gt
            .data()
            .iter()
            .map(|&v| (v + sigma * (rng.random::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0))
            .collect();
        let noisy = Image::new(gt.width(), gt.height(), data)?;
        println!("{sigma:>8.2} {:>8.2} {:>8.4}", psnr(&noisy, &gt)?, ssim(&noisy, &gt)?);
    }
    Ok(())
}
