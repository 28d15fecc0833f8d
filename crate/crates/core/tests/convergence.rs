//! Full-length training on the default synthetic set. Slow (about 12
//! minutes on one core) because it runs the default 200 epochs.

use tsdn::dataio::{self, SynthConfig};
use tsdn::network::NetworkConfig;
use tsdn::par::Exec;
use tsdn::training::{epoch_means, train_loop, TrainConfig};

#[test]
fn default_training_run_converges() {
    let dir = tempfile::tempdir().unwrap();
    dataio::generate_synthetic(&SynthConfig::default(), dir.path()).unwrap();
    let images = dataio::load_train_images(dir.path(), "stripes").unwrap();
    let cfg = TrainConfig::default();
    assert_eq!(cfg.epochs, 200);
    let out = train_loop::<f32>(&images, &NetworkConfig::default(), &cfg, &dir.path().join("run"), Exec::default())
        .unwrap();
    let means = epoch_means(&out.history);
    let ratio = means[means.len() - 1] / means[0];
    println!("epoch mean loss {:.4} -> {:.4} (ratio {ratio:.3})", means[0], means[means.len() - 1]);
    assert!(ratio < 0.25, "ratio {ratio}");
}
