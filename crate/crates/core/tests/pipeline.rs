use fncgen_core::config::ConfigFile;
use fncgen_core::data::{CohortConfig, Dataset};
use fncgen_core::eval::evaluate;
use fncgen_core::train::{run_cv, NoObserver, RunDir};
use tempfile::TempDir;

fn tiny_config() -> ConfigFile {
    ConfigFile::from_json(
        r#"{
      "data": {"n_subjects": 24, "volume_dims": [8, 8, 8], "fnc_order": 8},
      "model": {
        "generator": {"patch": 4, "d_model": 8, "n_heads": 2, "n_blocks": 1, "ffn_hidden": 8, "fragment": 2, "head_hidden": 8},
        "discriminator": {"patch": 3, "d_model": 8, "n_heads": 2, "n_blocks": 1, "ffn_hidden": 8},
        "perceptual": {"net": {"patch": 3, "d_model": 8, "n_heads": 2, "n_blocks": 2, "ffn_hidden": 8}}
      },
      "train": {"epochs": 2, "batch_size": 4, "folds": 2, "schedule": {"lr0": 0.001, "milestones": [1]}}
    }"#,
    )
    .unwrap()
}

#[test]
fn dataset_to_checkpoint_to_report() {
    let cfg = tiny_config();
    cfg.validate().unwrap();
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    Dataset::synthetic(&cfg.data).unwrap().write(&data_dir).unwrap();
    let data = Dataset::read(&data_dir).unwrap();
    let spec = cfg.run_spec(&data).unwrap();
    let (outcomes, agg) = run_cv(&data, &spec, None, 2, &NoObserver).unwrap();
    assert_eq!(outcomes.len(), 2);
    assert_eq!(agg.folds.len(), 2);

    let run = RunDir::new(tmp.path().join("run"));
    run.create().unwrap();
    run.write_spec(&spec).unwrap();
    for out in &outcomes {
        run.write_fold(out).unwrap();
    }
    let spec2 = run.read_spec().unwrap();
    assert_eq!(spec2.hash(), spec.hash());
    spec2.check_dataset(&data, &data_dir).unwrap();

    let split = spec.split(&data).unwrap();
    for out in &outcomes {
        let ckpt = fncgen_core::checkpoint::Checkpoint::load(&run.checkpoint(out.fold)).unwrap();
        let gen = spec2.load_generator(&ckpt, &run.checkpoint(out.fold)).unwrap();
        let test: Vec<_> = split.test(out.fold).unwrap().iter().map(|&i| &data.subjects[i]).collect();
        let report = evaluate(&gen, &test, &data.partition).unwrap();
        assert_eq!(report.group_diff_pearson, out.report.group_diff_pearson);
        assert_eq!(report.subjects, out.report.subjects);
    }
}

#[test]
fn mismatched_dataset_is_a_format_error() {
    let cfg = tiny_config();
    let data = Dataset::synthetic(&cfg.data).unwrap();
    let spec = cfg.run_spec(&data).unwrap();
    let other = Dataset::synthetic(&CohortConfig { volume_dims: [12, 12, 12], ..cfg.data.clone() }).unwrap();
    let err = spec.check_dataset(&other, std::path::Path::new("elsewhere")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("format error") && msg.contains("[8, 8, 8]") && msg.contains("[12, 12, 12]"), "{msg}");
}
