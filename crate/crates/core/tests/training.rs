//! Training runs long enough to see learning, plus dataset round trips.

use unipaint::diffusion::NoiseSchedule;
use unipaint::model::{stage2_trainable, DenoiserModel, ModelConfig};
use unipaint::synthdata::{gen_dataset, load_dataset, save_dataset, ClipConfig};
use unipaint::trainer::{loss_windows, run_two_stage, train, TrainConfig};

fn small_model(seed: u64) -> DenoiserModel<f32> {
    DenoiserModel::new(ModelConfig { widths: [16, 32], temb_dim: 32, ..Default::default() }, seed).unwrap()
}

#[test]
fn smoke_run_halves_the_loss() {
    let clips = gen_dataset(16, &ClipConfig::new(8, 32, 32), 21).unwrap();
    let mut model = small_model(22);
    let cfg = TrainConfig { batch: 2, learning_rate: 1e-3, ..TrainConfig::for_stage(1, 500, 23) };
    let records = train(&mut model, &clips, &cfg, &NoiseSchedule::desk_default(), |_, _| Ok(())).unwrap();
    assert_eq!(records.len(), 500);
    let (first, last) = loss_windows(&records, 50);
    println!("first-50 mean {first:.4}, last-50 mean {last:.4}, ratio {:.3}", last / first);
    assert!(last < 0.5 * first, "first {first} last {last}");
}

#[test]
fn stage_two_continues_without_reinitialization() {
    let clips = gen_dataset(8, &ClipConfig::new(8, 32, 32), 31).unwrap();
    let mut model = small_model(32);
    let s1 = TrainConfig { batch: 2, learning_rate: 1e-3, ..TrainConfig::for_stage(1, 150, 33) };
    let s2 = TrainConfig { batch: 2, ..TrainConfig::for_stage(2, 50, 34) };
    let sched = NoiseSchedule::desk_default();

    let mut after_stage1 = model.clone();
    train(&mut after_stage1, &clips, &s1, &sched, |_, _| Ok(())).unwrap();
    let log = run_two_stage(&mut model, &clips, &s1, &s2, &sched).unwrap();
    let (_, end1) = loss_windows(&log.stage1, 25);
    let (start2, _) = loss_windows(&log.stage2, 25);
    assert!(start2 < 2.0 * end1, "stage 2 starts at {start2}, stage 1 ended at {end1}");

    for (name, value) in after_stage1.params() {
        let now = model.param(name).unwrap();
        if stage2_trainable(name) {
            continue;
        }
        assert_eq!(now, value, "{name} changed during stage 2");
    }
    assert!(after_stage1.params().iter().any(|(n, v)| stage2_trainable(n) && model.param(n).unwrap() != v));
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let clips = gen_dataset(3, &ClipConfig::new(4, 16, 16), 41).unwrap();
    save_dataset(dir.path(), &clips).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in clips.iter().zip(&back) {
        assert_eq!(a.video, b.video);
        assert_eq!(a.object_mask, b.object_mask);
        assert_eq!(a.prompt, b.prompt);
    }
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(51);
    model.save(dir.path(), 2).unwrap();
    let (back, stage) = DenoiserModel::<f32>::load(dir.path()).unwrap();
    assert_eq!(stage, 2);
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params(), model.params());
}
