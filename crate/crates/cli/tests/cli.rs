//! End-to-end drive of the `privtree` binary: every subcommand once, on a
//! deliberately tiny config, plus the machine-readable error contract.

use std::path::Path;
use std::process::{Command, Output};

fn privtree(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privtree"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const TINY: &[&str] = &[
    "--set",
    "dataset.synth.n=160",
    "--set",
    "dataset.synth.split={\"fractions\":{\"train\":0.5,\"validation\":0.2,\"test\":0.3}}",
    "--set",
    "encoder={\"kind\":\"bow\",\"embedding_dim\":8}",
    "--set",
    "levels=2",
    "--set",
    "trainer.max_epochs=2",
    "--set",
    "trainer.batch_size=16",
    "--set",
    "attack.train.max_epochs=3",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut all = args.to_vec();
    all.extend_from_slice(TINY);
    all
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let synth = assert_ok(&privtree(
        d,
        &with_tiny(&["synth", "--out", "corpus.jsonl", "--taxonomy-out", "tax.tsv"]),
    ));
    assert_eq!(synth["records"], 160);
    assert!(d.join("corpus.jsonl").exists());
    assert!(d.join("tax.tsv").exists());

    let report = assert_ok(&privtree(d, &with_tiny(&["train", "--out", "run"])));
    assert!(report["epochs_run"].as_u64().unwrap() >= 1);
    assert!(d.join("run/model.htck").exists());
    assert!(!d.join("run/privacy.json").exists());

    let dp_report = assert_ok(&privtree(
        d,
        &with_tiny(&["train", "--z", "1.0", "--out", "run-dp"]),
    ));
    assert!(dp_report["max_microbatch_norm"].is_number());
    assert!(d.join("run-dp/privacy.json").exists());

    let eval = assert_ok(&privtree(
        d,
        &with_tiny(&["evaluate", "--checkpoint", "run/model.htck"]),
    ));
    assert!(eval["acc"].is_number());

    let audit = assert_ok(&privtree(
        d,
        &with_tiny(&["audit", "--checkpoint", "run/model.htck", "--out", "features"]),
    ));
    // 80 train / 48 test records at a 50% known fraction: attack-train is
    // 40 members + 24 non-members, attack-test balances to 24 + 24.
    assert_eq!(audit["train_records"], 64);
    assert_eq!(audit["test_records"], 48);

    let attack = assert_ok(&privtree(
        d,
        &with_tiny(&[
            "attack",
            "--train",
            "features/attack_train.jsonl",
            "--test",
            "features/attack_test.jsonl",
            "--epsilon",
            "0.5",
        ]),
    ));
    assert!(attack["auc"].is_number());
    assert_eq!(attack["bound_vacuous"], false);
}

#[test]
fn sweep_variation_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let manifest = assert_ok(&privtree(
        d,
        &with_tiny(&["sweep", "--out", "runs", "--set", "z_sweep=[1.0]"]),
    ));
    assert_eq!(manifest["points"].as_array().unwrap().len(), 2);
    let manifest_path = {
        let run_dir = Path::new(manifest["run_dir"].as_str().unwrap());
        let abs = d.join(run_dir);
        std::fs::read_dir(&abs)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("manifest-"))
            })
            .expect("manifest file written")
    };

    let out = privtree(
        d,
        &[
            "plot-data",
            "--manifest",
            manifest_path.to_str().unwrap(),
        ],
    );
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("run,point,z,epsilon,metric,value\n"));
    assert!(csv.contains("NONE"));
    assert!(csv.contains("attack_auc"));

    let varied = assert_ok(&privtree(
        d,
        &with_tiny(&[
            "variation",
            "--subsample",
            "0.5",
            "--out",
            "runs",
            "--set",
            "z_sweep=[]",
        ]),
    ));
    assert!(varied["records_per_level"].is_number());
}

#[test]
fn errors_are_json_objects_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = privtree(
        dir.path(),
        &["evaluate", "--checkpoint", "does-not-exist.htck"],
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["error"]["kind"].is_string());
    assert!(err["error"]["message"].is_string());

    let out = privtree(
        dir.path(),
        &["train", "--set", "attack.known_fraction=2.0"],
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
}
