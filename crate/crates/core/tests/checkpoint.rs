mod common;

use common::tiny_config;
use ian_core::checkpoint::{Checkpoint, StoredTensor};
use ian_core::data::synthetic_shapes;
use ian_core::ian::{fit, FitOptions, IanModel, LossReport, MdcMode, TrainConfig, Trainer};
use ian_core::{Error, Tensor32, Tensor64};

fn trained(steps: usize) -> Trainer<f32> {
    let mut r = common::rng(1);
    let model = IanModel::<f32>::new(tiny_config(MdcMode::Standard), &mut r).unwrap();
    let mut t = Trainer::new(model, TrainConfig::default());
    let x = Tensor32::uniform([4, 3, 16, 16], -1.0, 1.0, &mut r);
    for _ in 0..steps {
        t.train_step(&x).unwrap();
    }
    t
}

#[test]
fn round_trip_is_bit_exact() {
    let t = trained(2);
    let mut ck = Checkpoint::default();
    ck.store_trainer(&t);
    ck.tensors.insert(
        "extra/f64".into(),
        StoredTensor::F64(Tensor64::new([3], vec![1e-300, -0.0, std::f64::consts::PI]).unwrap()),
    );
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let restored: Trainer<f32> = back.trainer().unwrap();
    assert_eq!(restored.model, t.model);
    assert_eq!(restored.step, 2);
    assert_eq!(restored.config, t.config);
    let (s1, m1) = t.optim.state();
    let (s2, m2) = restored.optim.state();
    assert_eq!(s1, s2);
    assert_eq!(m1, m2);
    // -0.0 keeps its sign bit
    let StoredTensor::F64(v) = &back.tensors["extra/f64"] else { panic!() };
    assert!(v.data()[1].is_sign_negative());
}

#[test]
fn unknown_metadata_survives_resave() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let t = trained(1);
    let mut ck = Checkpoint::default();
    ck.store_trainer(&t);
    ck.metadata.insert("from_the_future".into(), serde_json::json!({"x": [1, 2]}));
    ck.save(&path).unwrap();

    let mut loaded = Checkpoint::load(&path).unwrap();
    let trainer: Trainer<f32> = loaded.trainer().unwrap();
    loaded.store_trainer(&trainer);
    loaded.save(&path).unwrap();
    let again = Checkpoint::load(&path).unwrap();
    assert_eq!(again.metadata["from_the_future"], serde_json::json!({"x": [1, 2]}));
    assert_eq!(again.metadata["lambda"]["img"], 3.0);
    // no temp files left behind
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn corrupt_files_are_diagnosed() {
    let mut ck = Checkpoint::default();
    ck.store_model(&trained(0).model);
    let bytes = ck.to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(matches!(&e, Error::Checkpoint(m) if m.contains("magic")), "{e}");

    let mut bad = bytes.clone();
    bad[4] = 99;
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(matches!(&e, Error::Checkpoint(m) if m.contains("version")), "{e}");

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"IA").is_err());

    let mut partial = ck.clone();
    partial.tensors.remove("param/g.out.b");
    assert!(partial.model::<f32>().is_err());
}

fn run(epochs: usize, stop_after: Option<u64>, base: Option<&std::path::Path>, out: &std::path::Path) -> Vec<LossReport> {
    let data = synthetic_shapes::<f32>(64, 16, 5);
    let mut trainer = match base {
        Some(p) => Checkpoint::load(p).unwrap().trainer().unwrap(),
        None => {
            let model = IanModel::<f32>::new(tiny_config(MdcMode::Standard), &mut common::rng(2)).unwrap();
            Trainer::new(model, TrainConfig { seed: 9, ..TrainConfig::default() })
        }
    };
    let mut opts = FitOptions::new(epochs, 8);
    opts.checkpoint_path = Some(out.to_path_buf());
    opts.checkpoint_every = 5;
    opts.stop_after = stop_after;
    if let Some(p) = base {
        opts.base = Checkpoint::load(p).unwrap();
    }
    let mut log = Vec::new();
    fit(&mut trainer, &data.images, &opts, |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    log
}

#[test]
fn short_run_writes_a_loadable_checkpoint_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let log = run(2, None, None, &a);
    assert_eq!(log.len(), 16);
    assert_eq!(log.last().unwrap().step, 16);
    run(2, None, None, &b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let model: IanModel<f32> = Checkpoint::load(&a).unwrap().model().unwrap();
    assert!(model.generate(&Tensor32::zeros([2, 8])).unwrap().all_finite());
}

#[test]
fn resume_continues_the_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let straight = dir.path().join("straight.ckpt");
    let half = dir.path().join("half.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    let full_log = run(3, None, None, &straight);
    let first = run(3, Some(11), None, &half);
    assert_eq!(first.len(), 11);
    let second = run(3, None, Some(&half), &resumed);
    assert_eq!(second.first().unwrap().step, 12);
    let at = &full_log[11];
    let rel = (second[0].total_g - at.total_g).abs() / at.total_g.abs();
    assert!(rel < 0.1, "{rel}");
    assert_eq!(second[0], *at);
    let a = Checkpoint::load(&straight).unwrap();
    let b = Checkpoint::load(&resumed).unwrap();
    assert_eq!(a.tensors, b.tensors);
}
