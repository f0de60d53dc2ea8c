mod common;

use gauss_kgc::model::Dims;
use gauss_kgc::train::{Checkpoint, TrainError, Trainer};
use common::{run_steps, small_setup};

#[test]
fn save_load_save_is_byte_identical() {
    let (cfg, data) = small_setup(&[]);
    let mut t = Trainer::new(cfg, &data).unwrap();
    run_steps(&mut t, 6);
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    ckpt.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let loaded = Checkpoint::load(&a).unwrap();
    for ((n1, t1), (n2, t2)) in ckpt.params.iter().zip(loaded.params.iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &gauss_kgc::autodiff::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2), "{n1}");
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (cfg, data) = small_setup(&[]);
    let mut straight = Trainer::new(cfg.clone(), &data).unwrap();
    let full_log = run_steps(&mut straight, 12);

    let mut first = Trainer::new(cfg.clone(), &data).unwrap();
    let mut log = run_steps(&mut first, 7);
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), cfg, &data).unwrap();
    log.extend(run_steps(&mut resumed, 5));

    assert_eq!(log, full_log);
    assert!(log.iter().any(|r| r.dev_mrr.is_some()));
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
}

#[test]
fn wrong_dimension_names_both_values() {
    let (cfg, data) = small_setup(&[]);
    let ckpt = Trainer::new(cfg.clone(), &data).unwrap().checkpoint();
    let mut wider = cfg.clone();
    wider.set("dim", "16").unwrap();
    let err = Trainer::resume(ckpt.clone(), wider, &data).err().expect("dimension mismatch");
    assert!(matches!(err, TrainError::DimMismatch { .. }));
    let msg = err.to_string();
    assert!(msg.contains("D = 8") && msg.contains("16"), "{msg}");

    let dims = Dims {
        dim: 8,
        layers: 3,
        n_entities: data.vocab.n_entities(),
        n_relations: data.vocab.n_relations(),
    };
    let msg = ckpt.check_dims(&dims).unwrap_err().to_string();
    assert!(msg.contains('2') && msg.contains('3'), "{msg}");
}

#[test]
fn refuses_other_versions_and_damage() {
    let (cfg, data) = small_setup(&[]);
    let bytes = Trainer::new(cfg, &data).unwrap().checkpoint().to_bytes();

    let key = b"\"version\":1";
    let at = bytes.windows(key.len()).position(|w| w == key).expect("version in header");
    let mut bumped = bytes.clone();
    bumped[at + "\"version\":".len()] = b'7';
    let err = Checkpoint::from_bytes(&bumped).err();
    assert!(matches!(err, Some(TrainError::Version { found: 7, .. })), "{err:?}");

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(TrainError::Corrupt(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(TrainError::Corrupt(_))));
    assert!(Checkpoint::from_bytes(&[1, 2, 3]).is_err());
}
