use clickseg::io::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
use clickseg::model::{ModelConfig, ModelParams};
use clickseg::pipeline::segment;
use clickseg::sampling::{Click, ClickSet, SamplerConfig};
use clickseg::synthdata::{generate_scene, SceneSpec};
use clickseg::training::{precache_clicks, train, TrainConfig, TrainingExample};
use clickseg::Error;

fn config() -> ModelConfig {
    ModelConfig {
        num_classes: 8,
        num_prototypes: 8,
        ..ModelConfig::tiny(2)
    }
}

#[test]
fn trained_checkpoint_reloads_bit_exactly() {
    let scene = generate_scene(&SceneSpec {
        instances: (3, 3),
        points_per_instance: (30, 30),
        floor_points: 40,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let cache = precache_clicks(std::slice::from_ref(&scene), &SamplerConfig::default()).unwrap();
    let example = TrainingExample::new(&scene, &cache).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 6,
        out_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 3,
        ..Default::default()
    };
    let out = train(ModelParams::new(config()).unwrap(), &[example], &cfg).unwrap();
    for f in ["final.ckpt", "best.ckpt", "loss.csv", "step-000003.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }

    let loaded = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded.config, out.model.config);
    for id in out.model.store.ids() {
        assert_eq!(
            loaded.store.get(id),
            out.model.store.get(id),
            "{}",
            out.model.store.name(id)
        );
    }

    let clicks = ClickSet::new(vec![
        Click::new(scene.cloud.positions()[0], 0),
        Click::new(scene.cloud.positions()[40], 1),
    ]);
    let a = segment(&scene.cloud, &clicks, &out.model).unwrap();
    let b = segment(&scene.cloud, &clicks, &loaded).unwrap();
    assert_eq!(a, b);

    let path = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &path).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("final.ckpt")).unwrap()
    );
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = ModelParams::new(config()).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        read_checkpoint(&mut bad_magic.as_slice()),
        Err(Error::Checkpoint(_))
    ));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(read_checkpoint(&mut &truncated[..]).is_err());

    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0, 0, 0, 0]);
    assert!(read_checkpoint(&mut trailing.as_slice()).is_err());

    assert!(read_checkpoint(&mut bytes.as_slice()).is_ok());
}
