use tqdm_core::config::RunConfig;
use tqdm_core::synthdata::DomainStyle;
use tqdm_core::train::{evaluate_domain, split_scenes, Checkpoint, TrainOutputs};
use tqdm_core::{Model32, Model64, Trainer32, Trainer64};

fn tiny() -> RunConfig {
    RunConfig {
        crop_size: 16,
        total_steps: 4,
        warmup_steps: 1,
        batch_size: 2,
        train_scenes: 4,
        val_scenes: 2,
        test_scenes: 2,
        ..RunConfig::small()
    }
}

#[test]
fn single_precision_trains_and_predicts() {
    let cfg = tiny();
    let mut t32 = Trainer32::new(&cfg).unwrap();
    let mut t64 = Trainer64::new(&cfg).unwrap();
    let s32 = t32.run(&TrainOutputs::default()).unwrap();
    let s64 = t64.run(&TrainOutputs::default()).unwrap();
    assert!(s32.last_total.is_finite());
    // same initial weights, so the first losses agree up to rounding
    assert!((s32.first_total - s64.first_total).abs() < 1e-3 * s64.first_total);
    let scene = &split_scenes(&cfg, "val", DomainStyle::Source).unwrap()[0];
    let pred = t32.model.predict(&scene.image.cast()).unwrap();
    assert_eq!(pred.labels.len(), scene.labels.labels.len());
    assert!(evaluate_domain(&t32.model, "val", DomainStyle::sketch()).is_ok());
}

#[test]
fn checkpoints_cross_precisions() {
    let cfg = tiny();
    let model = Model64::new(&cfg).unwrap();
    let trainer = Trainer64::new(&cfg).unwrap();
    let bytes = trainer.checkpoint().to_bytes().unwrap();
    let narrowed = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let direct = Model32::new(&cfg).unwrap();
    assert_eq!(narrowed.model.store().len(), direct.store().len());
    assert_eq!(model.store().len(), direct.store().len());
}
