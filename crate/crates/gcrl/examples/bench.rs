use gcrl::checkpoint;
use gcrl::numgrad::rng::*;

fn main() {
    let (model, _cfg) = checkpoint::load(std::path::Path::new("/tmp/gcrl_v0/best.ckpt")).unwrap();
    let mut rng = seed_rng(1);
    println!("mixture weights: {:?}", model.prior_s.weights(&model.store));
    for (k, comp) in model.prior_s.components().iter().enumerate() {
        let mut mean = [0.0; 2];
        let mut m2 = [0.0; 2];
        let n = 2000;
        for _ in 0..n {
            let s = comp.sample_vals(&mut rng, &model.store).unwrap();
            for d in 0..2 {
                mean[d] += s[d] / n as f64;
                m2[d] += s[d] * s[d] / n as f64;
            }
        }
        println!(
            "comp {k}: mean ({:+.3}, {:+.3}) std ({:.3}, {:.3})",
            mean[0], mean[1],
            (m2[0] - mean[0] * mean[0]).sqrt(),
            (m2[1] - mean[1] * mean[1]).sqrt()
        );
    }
    // aggregate posterior s means per domain
    for msd in ["0.1", "0.3", "0.5"] {
        let scenes = gcrl::dataio::load_scenes(
            std::path::Path::new(&format!("/tmp/gcrl_data/msd_{msd}/val.tsv")), 0, 20, 32).unwrap();
        let posts = model.infer_posteriors(&scenes[..60]).unwrap();
        let mut mean = [0.0; 2];
        let mut lv = 0.0;
        let count = posts.len() as f64;
        for (qs, _) in &posts {
            for d in 0..2 {
                mean[d] += qs.mu()[d] / count;
            }
            lv += qs.log_var().iter().sum::<f64>() / (2.0 * count);
        }
        println!("msd {msd}: mean q(s|x) mu ({:+.3}, {:+.3}), mean log_var {:+.3}", mean[0], mean[1], lv);
    }
}
