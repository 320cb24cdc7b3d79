//! Checkpoint files and seed determinism of training.

use bpp_core::bpp::BppConfig;
use bpp_core::train::{evaluate, make_pairs, train, Checkpoint, Dataset, DatasetSpec, TrainConfig};
use bpp_core::{Bpp32, Error};

fn setup() -> (TrainConfig, Dataset<f32>) {
    let cfg = TrainConfig {
        bpp: BppConfig::new(2, &[6, 4]),
        batch: 2,
        patch: 16,
        steps: 6,
        lr0: 1e-3,
        val_every: 3,
        checkpoint_every: 3,
        ..TrainConfig::default()
    };
    let data = make_pairs(&DatasetSpec::synthetic(7, 5, 24, &[2]), cfg.bpp.alignment()).unwrap();
    (cfg, data)
}

fn run(cfg: &TrainConfig, data: &Dataset<f32>) -> Vec<Vec<u8>> {
    let mut saved = Vec::new();
    let out = train(cfg, data, &mut |c| {
        saved.push(c.to_bytes()?);
        Ok(())
    })
    .unwrap();
    saved.push(out.checkpoint.to_bytes().unwrap());
    saved
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (cfg, data) = setup();
    let a = run(&cfg, &data);
    assert_eq!(a.len(), 3);
    assert_eq!(a, run(&cfg, &data));
    let other = TrainConfig { seed: 1, ..cfg };
    assert_ne!(a.last(), run(&other, &data).last());
}

#[test]
fn file_round_trip_and_restored_validation() {
    let (cfg, data) = setup();
    let out = train(&cfg, &data, &mut |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bppc");
    out.checkpoint.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let net: Bpp32 = back.network().unwrap();
    assert_eq!(net, out.net);
    let tiling = cfg.val_tiling();
    assert_eq!(
        evaluate(&net, &data.val, tiling).unwrap(),
        evaluate(&out.net, &data.val, tiling).unwrap()
    );
    assert_eq!(back.adam::<f32>().unwrap().unwrap(), out.adam);

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match Checkpoint::load(&path) {
        Err(Error::Format { offset, .. }) => assert!(offset > 0),
        other => panic!("{other:?}"),
    }
    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Unsupported(_))));
    assert!(Checkpoint::load(dir.path().join("missing.bppc")).is_err());
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let (cfg, data) = setup();
    let cfg = TrainConfig { steps: 0, ..cfg };
    let out = train(&cfg, &data, &mut |_| Ok(())).unwrap();
    let net: Bpp32 = out.checkpoint.network().unwrap();
    assert_eq!(net, Bpp32::new(cfg.bpp.clone(), cfg.seed).unwrap());
}
