#![allow(dead_code)]

use std::path::PathBuf;

use mulcpred::data::{generate_dataset, Dataset, SyntheticSpec};
use mulcpred::explain::{export_concept_bundle, PruneMask};
use mulcpred::model::{Model, ModelConfig};
use mulcpred::train::{TrainConfig, Trainer};
use mulcpred_cli::service::Session;
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub model: Model<f32>,
    pub train: Dataset,
    pub test: Dataset,
    pub bundle_dir: PathBuf,
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::desk_default().with_samples(48);
    let train = generate_dataset(&spec).unwrap();
    let test = generate_dataset(&spec.clone().with_samples(24).with_seed(99).with_first_id(10_000)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ModelConfig::desk_default(2), cfg).unwrap();
    for _ in 0..2 {
        trainer.run_epoch(&train.samples).unwrap();
    }
    let model = trainer.model;
    let bundle_dir = dir.path().join("bundle");
    export_concept_bundle(&model, &train, 2, &PruneMask::keep_all(model.config()), &bundle_dir).unwrap();
    Fixture {
        dir,
        model,
        train,
        test,
        bundle_dir,
    }
}

pub fn session(f: &Fixture) -> Session {
    let s = Session::new();
    s.load_model(f.model.clone()).unwrap();
    s.load_bundle(f.bundle_dir.clone()).unwrap();
    s.add_dataset("train", f.train.clone()).unwrap();
    s.add_dataset("test", f.test.clone()).unwrap();
    s
}
