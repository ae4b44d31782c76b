use gca::losses::LossKind;
use gca::train::{gen_blobs, train_encoder, AugmentConfig, BlobConfig, TrainConfig};

#[test]
fn every_loss_decreases_on_default_blobs() {
    let data = gen_blobs(&BlobConfig::default()).unwrap();
    for kind in LossKind::ALL {
        let config = TrainConfig {
            loss: kind,
            ..TrainConfig::default()
        };
        let (_, history) = train_encoder(&data, &config, &AugmentConfig::default()).unwrap();
        let first = history[1].loss;
        let last = history.last().unwrap().loss;
        assert!(last < first, "{kind}: {first} -> {last}");
        if matches!(kind, LossKind::GcaInce | LossKind::GcaRince) {
            let (a0, a1) = (history[0].alignment, history.last().unwrap().alignment);
            assert!(a1 < a0, "{kind} alignment {a0} -> {a1}");
        }
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let data = gen_blobs(&BlobConfig {
        domains: 2,
        per_cell: 20,
        ..BlobConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 5,
        loss: LossKind::GcaUot,
        ..TrainConfig::default()
    };
    let a = train_encoder(&data, &config, &AugmentConfig::default()).unwrap();
    let b = train_encoder(&data, &config, &AugmentConfig::default()).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
}
