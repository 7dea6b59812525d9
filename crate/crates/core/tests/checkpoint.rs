use std::path::PathBuf;

use relnet::checkpoint;
use relnet::config::{load_run_config, parse_run_config};
use relnet::train::{RunConfig, Trainer};
use relnet::Error;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

/// A shipped config shrunk to a few seconds of work.
fn small(name: &str) -> RunConfig {
    let mut overrides = vec!["data.n_samples=96".to_string(), "n_val=32".into(), "epochs=2".into()];
    if name.starts_with("hcrn") {
        overrides.extend(["data.num_clips=4".into(), "data.clip_len=4".into(), "model.d=8".into()]);
    } else {
        overrides.extend(["model.d=8".into(), "model.steps=2".into()]);
    }
    load_run_config(&shipped(name), &overrides).unwrap()
}

#[test]
fn shipped_configs_validate() {
    for name in ["hcrn-count", "hcrn-transition", "lognet-relation", "lognet-relation-gap"] {
        load_run_config(&shipped(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn resuming_without_steps_reproduces_eval_metrics() {
    for name in ["hcrn-count", "lognet-relation-gap"] {
        let mut trainer = Trainer::new(small(name)).unwrap();
        trainer.train_epoch().unwrap();
        let before = trainer.evaluate(&trainer.val_ids).unwrap();
        let dir = tempfile::tempdir().unwrap();
        checkpoint::save(dir.path(), &trainer).unwrap();
        let restored = checkpoint::load(dir.path(), None).unwrap();
        assert_eq!(restored.epoch, 1);
        assert_eq!(restored.evaluate(&restored.val_ids).unwrap(), before, "{name}");
        assert_eq!(restored.evaluate(&restored.train_ids).unwrap(), trainer.evaluate(&trainer.train_ids).unwrap());
    }
}

#[test]
fn manifest_embeds_config_and_seed() {
    let trainer = Trainer::new(small("hcrn-transition")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &trainer).unwrap();
    let m = checkpoint::read_manifest(dir.path()).unwrap();
    assert_eq!(m.seed, trainer.cfg.seed);
    assert_eq!(m.config, trainer.cfg);
    assert_eq!(m.params.len(), trainer.store.len());
    let bytes = std::fs::metadata(dir.path().join(checkpoint::WEIGHTS)).unwrap().len();
    assert_eq!(bytes as usize, 8 * trainer.store.num_scalars());
}

#[test]
fn mismatch_reports_both_signatures() {
    let trainer = Trainer::new(small("hcrn-transition")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &trainer).unwrap();
    let mut other_cfg = small("hcrn-transition");
    if let relnet::train::ModelConfig::Hcrn(m) = &mut other_cfg.model {
        m.d = 12;
    }
    let mut other = Trainer::new(other_cfg).unwrap();
    match checkpoint::restore(dir.path(), &mut other) {
        Err(Error::Checkpoint(msg)) => {
            assert!(msg.contains("checkpoint:") && msg.contains("model:"), "{msg}");
            assert!(msg.contains("[9, 8]") && msg.contains("[9, 12]"), "{msg}");
        }
        other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn truncated_weights_are_rejected() {
    let mut trainer = Trainer::new(small("hcrn-transition")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &trainer).unwrap();
    let path = dir.path().join(checkpoint::WEIGHTS);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(checkpoint::restore(dir.path(), &mut trainer), Err(Error::Checkpoint(_))));
}

#[test]
fn invalid_values_name_their_path() {
    let text = std::fs::read_to_string(shipped("hcrn-count")).unwrap();
    match parse_run_config(&text, &["model.sampling=sometimes".into()]) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "model.sampling"),
        other => panic!("{other:?}"),
    }
    match parse_run_config(&text, &["batch_size=0".into()]) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "batch_size"),
        other => panic!("{other:?}"),
    }
}
