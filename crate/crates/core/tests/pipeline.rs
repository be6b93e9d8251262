use std::process::Command;

use ndarray::array;

use nnkernel::metrics::recall_at_k;
use nnkernel::synth::two_blobs;
use nnkernel::train::{enroll, evaluate, train, tune_sigma, EvalMode};
use nnkernel::{Checkpoint, Dataset, Error, MlpModel, RunConfig, Split};

fn blob_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.hidden = Vec::new();
    cfg.model.embedding_dim = 2;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 10;
    cfg.train.learning_rate = 0.05;
    cfg.schedule.k_train = 20;
    cfg.schedule.update_interval = 1.0;
    cfg
}

#[test]
fn csv_and_nnkf_agree() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "label,f0,f1\n3,0.1,-2.5\n7,1e-3,4\n3,0.30000001,5.5\n").unwrap();
    let from_csv = Dataset::load(&csv).unwrap();
    assert_eq!(from_csv.features.dim(), (3, 2));
    assert_eq!(from_csv.labels, vec![0, 1, 0]);
    assert_eq!(from_csv.label_names, vec!["3", "7"]);

    let bin = dir.path().join("d.nnkf");
    from_csv.save_nnkf(&bin).unwrap();
    let from_bin = Dataset::load(&bin).unwrap();
    assert_eq!(from_bin.features, from_csv.features);
    assert_eq!(from_bin.labels, from_csv.labels);

    let again = dir.path().join("e.nnkf");
    from_bin.save_nnkf(&again).unwrap();
    assert_eq!(std::fs::read(&bin).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn malformed_csv_reports_the_line() {
    let err = Dataset::read_csv("label,f0\n0,1.0\n1,abc\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    assert!(Dataset::read_csv("label,f0\n0,NaN\n".as_bytes()).is_err());
}

#[test]
fn separable_blobs_reach_perfect_validation_recall() {
    let mut data = two_blobs(60, 2, 6.0, 0.5, 11).unwrap();
    data.assign_splits(0.25, 0.0, 0).unwrap();
    let outcome = train(&blob_config(20), &data).unwrap();
    let val = data.split(Split::Val);
    let emb = outcome.checkpoint.model.embed(val.features.view()).unwrap();
    assert_eq!(recall_at_k(emb.view(), &val.labels, &[1]).unwrap()[&1], 1.0);
    assert!(outcome.history.epochs.len() <= 20);
}

#[test]
fn saved_checkpoint_evaluates_identically() {
    let mut data = two_blobs(40, 3, 2.0, 1.0, 5).unwrap();
    data.assign_splits(0.2, 0.2, 1).unwrap();
    let mut cfg = blob_config(5);
    cfg.model.hidden = vec![6];
    let ck = train(&cfg, &data).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nnkc");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let a = evaluate(&ck, &data, EvalMode::Classification).unwrap();
    let b = evaluate(&loaded, &data, EvalMode::Classification).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let mut unseen = two_blobs(15, 3, 2.0, 1.0, 6).unwrap();
    unseen.label_names = vec!["x".into(), "y".into()];
    let a = evaluate(&ck, &unseen, EvalMode::Transfer).unwrap();
    let b = evaluate(&loaded, &unseen, EvalMode::Transfer).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn sigma_choice_tracks_blob_separation() {
    // Overlapping blobs (spread = separation / 4); for well separated blobs
    // the validation loss keeps falling as sigma shrinks.
    let grid = RunConfig::default().sigma_grid;
    for separation in [2.0, 4.0, 8.0] {
        let mut data = two_blobs(200, 2, separation, separation / 4.0, 0).unwrap();
        data.assign_splits(0.25, 0.0, 0).unwrap();
        let curve = nnkernel::train::sigma_curve(&RunConfig::default(), &MlpModel::identity(2), &data, &grid).unwrap();
        let best = curve
            .iter()
            .fold((0.0, f64::INFINITY), |b, &p| if p.1 < b.1 { p } else { b })
            .0;
        let half = separation / 2.0;
        assert!(
            best >= half / 2.0 && best <= half * 2.0,
            "separation {separation}: chose {best}"
        );
    }
    let mut data = two_blobs(20, 2, 3.0, 1.0, 0).unwrap();
    data.assign_splits(0.25, 0.0, 0).unwrap();
    assert!(matches!(
        tune_sigma(&RunConfig::default(), &data, &[]),
        Err(Error::InvalidConfig(_))
    ));
}

fn tiny_checkpoint(labels: Vec<usize>, centres: ndarray::Array2<f64>) -> Checkpoint {
    let mut cfg = RunConfig::default();
    cfg.model.input_dim = 2;
    cfg.model.hidden = Vec::new();
    cfg.model.embedding_dim = 2;
    cfg.schedule.k_train = 3;
    let num_classes = labels.iter().max().unwrap() + 1;
    cfg.trained_classes = (0..num_classes).map(|c| c.to_string()).collect();
    let bank = nnkernel::CentreBank::with_unit_weights(centres, labels, num_classes).unwrap();
    Checkpoint::new(cfg, MlpModel::identity(2), bank).unwrap()
}

#[test]
fn classification_accuracy_matches_hand_count() {
    let ck = tiny_checkpoint(vec![0, 0, 1, 1], array![[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0]]);
    // Row 2 sits on the class-1 side but is labelled 0.
    let queries = Dataset::new(array![[0.2, 0.5], [4.8, 0.4], [4.0, 0.0], [0.5, 0.1]], vec![0, 1, 0, 0]).unwrap();
    let report = evaluate(&ck, &queries, EvalMode::Classification).unwrap();
    assert_eq!(report.predictions.as_deref(), Some(&[0, 1, 1, 0][..]));
    assert_eq!(report.accuracy, Some(0.75));

    let single = tiny_checkpoint(vec![0, 0, 0], array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]]);
    let queries = Dataset::new(array![[9.0, 9.0], [-3.0, 1.0]], vec![0, 0]).unwrap();
    assert_eq!(
        evaluate(&single, &queries, EvalMode::Classification).unwrap().accuracy,
        Some(1.0)
    );
}

#[test]
fn transfer_rejects_trained_classes_and_reports_all_columns() {
    let ck = tiny_checkpoint(vec![0, 0, 1, 1], array![[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0]]);
    let overlapping = Dataset::new(array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![1, 1, 2]).unwrap();
    assert!(evaluate(&ck, &overlapping, EvalMode::Transfer).is_err());

    let fresh = two_blobs(10, 2, 5.0, 0.3, 3).unwrap();
    let mut renamed = fresh.clone();
    renamed.label_names = vec!["a".into(), "b".into()];
    let report = evaluate(&ck, &renamed, EvalMode::Transfer).unwrap();
    assert_eq!(report.metric_names(), vec!["R@1", "R@2", "R@4", "R@8", "NMI"]);
    assert!(report.to_json().unwrap().contains("\"nmi\""));
}

#[test]
fn enrollment_adds_centres_without_touching_the_network() {
    let ck = tiny_checkpoint(vec![0, 0, 1, 1], array![[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0]]);
    let mut newcomers = Dataset::new(array![[0.0, 9.0], [0.5, 9.5]], vec![0, 0]).unwrap();
    newcomers.label_names = vec!["owl".into()];
    let enrolled = enroll(&ck, &newcomers).unwrap();
    assert_eq!(enrolled.bank.len(), 6);
    assert_eq!(enrolled.bank.num_classes(), 3);
    assert_eq!(enrolled.bank.weights()[4..], [1.0, 1.0]);
    assert_eq!(enrolled.model.flat_params(), ck.model.flat_params());
    assert_eq!(enrolled.config.trained_classes, vec!["0", "1", "owl"]);

    let mut probe = Dataset::new(array![[0.2, 9.2]], vec![0]).unwrap();
    probe.label_names = vec!["owl".into()];
    assert_eq!(
        evaluate(&enrolled, &probe, EvalMode::Classification).unwrap().accuracy,
        Some(1.0)
    );
}

fn nnk(args: &[&str], dir: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nnk"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn cli_round_trip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = two_blobs(30, 3, 4.0, 0.7, 9).unwrap();
    data.save_csv(dir.path().join("train.csv")).unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{ "train": { "epochs": 50 }, "model": { "hidden": [8], "embedding_dim": 3 } }"#,
    )
    .unwrap();

    let out = nnk(
        &[
            "train",
            "--config",
            "run.json",
            "--epochs",
            "3",
            "--data",
            "train.csv",
            "--checkpoint",
            "m.nnkc",
            "--history",
            "h.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("h.json")).unwrap()).unwrap();
    assert_eq!(
        history["epochs"].as_array().unwrap().len(),
        3,
        "flag overrides the config file"
    );

    let out = nnk(
        &[
            "evaluate",
            "--data",
            "train.csv",
            "--checkpoint",
            "m.nnkc",
            "--report",
            "r.json",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() > 0.5);

    for args in [
        &[
            "train",
            "--data",
            "train.csv",
            "--checkpoint",
            "x.nnkc",
            "--sigma",
            "-1",
        ][..],
        &["train", "--data", "train.csv", "--checkpoint", "x.nnkc", "--bogus"][..],
        &["tune-sigma", "--data", "train.csv", "--grid", "0"][..],
        &["evaluate", "--data", "train.csv"][..],
    ] {
        assert_eq!(nnk(args, dir.path()).status.code(), Some(2), "{args:?}");
    }
    std::fs::write(dir.path().join("bad.json"), r#"{ "kernel": { "width": 1 } }"#).unwrap();
    assert_eq!(
        nnk(&["diagnose", "--config", "bad.json"], dir.path()).status.code(),
        Some(2)
    );
}
