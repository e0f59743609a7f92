use std::fs;
use std::path::Path;

use mfaf_core::checkpoint;
use mfaf_core::commands::{self, Direction, TIMING_LOG};
use mfaf_core::config::RunConfig;
use mfaf_core::data::{build_dataset, sha256_hex, Dataset, PadMode};
use mfaf_core::init::Parametrized;
use mfaf_core::train::{epoch_batches, ClassIndex, Trainer};

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(
        r#"{"dataset": {"num_classes": 6, "drones_per_class": 3, "distractors": 2},
            "mcb": {"num_classes": 6},
            "optim": {"epochs": 3}}"#,
    )
    .unwrap();
    cfg.dataset_dir = dir.join("data");
    cfg.out_dir = dir.join("run");
    cfg
}

fn param_bits(t: &Trainer) -> Vec<u32> {
    t.model
        .params()
        .iter()
        .chain(t.model.buffers().iter())
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .chain(t.sgd.velocity.iter().flat_map(|v| v.data().iter().map(|x| x.to_bits())))
        .collect()
}

#[test]
fn resumed_training_matches_uninterrupted_training_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let ds = build_dataset(&cfg.dataset, cfg.seed).unwrap();
    let index = ClassIndex::train(&ds);
    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.train_epoch(&ds, &index).unwrap();
    let ckpt = tmp.path().join("ckpt");
    checkpoint::save(&ckpt, &a).unwrap();
    let mut b = checkpoint::load(&ckpt, None).unwrap();
    assert_eq!(b.epoch, 1);
    assert_eq!(param_bits(&a), param_bits(&b));

    let batch = &epoch_batches(&index, &cfg.sampler, cfg.seed, 1)[0];
    let lr = cfg.optim.lr_at(1);
    let sa = a.step(&ds, batch, 0, lr).unwrap();
    let sb = b.step(&ds, batch, 0, lr).unwrap();
    assert_eq!(sa.loss.to_bits(), sb.loss.to_bits());
    assert_eq!(param_bits(&a), param_bits(&b));
}

#[test]
fn checkpoint_rejects_a_different_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let t = Trainer::new(cfg.clone()).unwrap();
    checkpoint::save(tmp.path(), &t).unwrap();
    let mut other = cfg.clone();
    other.mfaf.hf_branch = false;
    assert!(checkpoint::load(tmp.path(), Some(&other)).is_err());
    let mut same_model = cfg;
    same_model.optim.epochs = 9;
    assert!(checkpoint::load(tmp.path(), Some(&same_model)).is_ok());
}

fn result_files(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != TIMING_LOG {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, sha256_hex(&fs::read(&p).unwrap())));
            }
        }
    }
    out.sort();
    out
}

fn full_run(root: &Path) -> RunConfig {
    let cfg = small_config(root);
    commands::generate(&cfg, &cfg.dataset_dir).unwrap();
    let ds = Dataset::load(&cfg.dataset_dir).unwrap();
    let t = commands::train(&cfg, &ds, &cfg.out_dir, None).unwrap().trainer;
    for d in [Direction::D2s, Direction::S2d] {
        commands::evaluate(&cfg, &t.model, &ds, d, &cfg.out_dir).unwrap();
    }
    commands::shift_robustness(
        &cfg,
        &t.model,
        &ds,
        Direction::D2s,
        PadMode::Flip,
        &[0, 2, 4],
        &cfg.out_dir,
    )
    .unwrap();
    cfg
}

#[test]
fn repeated_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    full_run(tmp.path());
    let first = result_files(tmp.path());
    assert!(first.len() > 20);
    assert!(tmp.path().join("run").join(TIMING_LOG).exists());
    for sub in ["data", "run"] {
        fs::remove_dir_all(tmp.path().join(sub)).unwrap();
    }
    full_run(tmp.path());
    assert_eq!(first, result_files(tmp.path()));
}

#[test]
fn shift_row_at_zero_equals_plain_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = full_run(tmp.path());
    let t = checkpoint::load(&cfg.out_dir.join(commands::CHECKPOINT_DIR), Some(&cfg)).unwrap();
    let ds = Dataset::load(&cfg.dataset_dir).unwrap();
    let plain = commands::metrics(&t.model, &ds, &cfg, Direction::D2s, None).unwrap();
    for mode in [PadMode::Black, PadMode::Flip] {
        let rows = commands::shift_robustness(&cfg, &t.model, &ds, Direction::D2s, mode, &[0, 3], tmp.path()).unwrap();
        assert_eq!(rows[0].r1, plain.r1().unwrap());
        assert_eq!(rows[0].ap, plain.ap_mean);
        assert_eq!((rows[0].decline_r1, rows[0].decline_ap), (0.0, 0.0));
    }
    let stored: RunConfig =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(stored.hash(), cfg.hash());
}

/// Random convolutional features already separate some synthetic scenes, so
/// an untrained model lands a few times above chance but far below a trained one.
#[test]
fn untrained_model_is_far_below_trained_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.optim.epochs = 0;
    let ds = build_dataset(&cfg.dataset, cfg.seed).unwrap();
    let t = commands::train(&cfg, &ds, tmp.path(), None).unwrap().trainer;
    let r = commands::metrics(&t.model, &ds, &cfg, Direction::D2s, None).unwrap();
    assert!(r.r1().unwrap() < 0.3, "untrained R@1 {}", r.r1().unwrap());
}
