//! Depth deviation and error statistics of the reference density models and
//! of an untrained network, with their histograms.

use nvs_contrast::eval::{
    collect_depth_stats, depth_histograms, Bins, DensityModel, DensityWeighting, SpikeDensity, TrainedDensity,
    UniformDensity,
};
use nvs_contrast::model::Model;
use nvs_contrast::scene::{generate_packs, PackConfig};
use nvs_contrast::train::TrainConfig;

fn main() -> nvs_contrast::Result<()> {
    let pc = PackConfig {
        width: 24,
        height: 24,
        n_views: 5,
        ..Default::default()
    };
    let packs = generate_packs(1, &pc, None, 3)?;
    let model = Model::new(TrainConfig::toy().model, 0)?;
    let untrained = TrainedDensity {
        model: &model,
        n_source_views: 4,
        chunk: 256,
    };
    let models: [(&str, &dyn DensityModel); 3] = [
        ("spike", &SpikeDensity),
        ("uniform", &UniformDensity),
        ("untrained", &untrained),
    ];
    let bins = Bins::Uniform {
        count: 10,
        lo: 0.0,
        hi: 2.0,
    };
    for (name, m) in models {
        let st = collect_depth_stats(m, &packs, DensityWeighting::Softmax, 3)?;
        let n = st.error.len() as f64;
        let mean_s = st.deviation.iter().sum::<f64>() / n;
        let mean_e = st.error.iter().sum::<f64>() / n;
        println!("{name:>9}: {n} pixels, mean S {mean_s:.4}, mean E {mean_e:.4}");
        let h = depth_histograms(&st, bins, bins)?;
        println!("           error counts {:?}", h.error.counts);
    }
    Ok(())
}
