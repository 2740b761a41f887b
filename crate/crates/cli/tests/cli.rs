use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "synth.num_examples=12",
    "--set",
    "train.max_epochs=1",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.val_fraction=0.25",
];

fn uasam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uasam"))
        .current_dir(dir)
        .env_remove("UASAM_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    TINY.iter().copied().chain(args.iter().copied()).collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate_tiny(dir: &Path) {
    let o = uasam(dir, &with_tiny(&["generate", "--out", "data"]));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = uasam(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["generate", "train", "eval", "ablate", "sweep", "inspect"] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = uasam(dir.path(), &["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = uasam(dir.path(), &["--set", "train.learning_rat=0.1", "generate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn finetune_without_a_backbone_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_tiny(dir.path());
    let o = uasam(dir.path(), &with_tiny(&["train", "--stage", "finetune", "--out", "ft"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--from"), "{}", stderr(&o));
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ckpt"), b"NOTSAM1 and some bytes").unwrap();
    let o = uasam(dir.path(), &["inspect", "--from", "bad.ckpt"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = uasam(dir.path(), &with_tiny(&["train", "--stage", "pretrain", "--manifest", "nope.json"]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = uasam(dir.path(), &with_tiny(&["generate", "--out", out]));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["manifest.json", "train.json", "test.json", "data/ex00003_mask2.grid", "data/ex00007_image.grid"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn train_and_eval_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    generate_tiny(dir.path());
    for out in ["p1", "p2"] {
        let o = uasam(dir.path(), &with_tiny(&["train", "--stage", "pretrain", "--out", out]));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let m1 = fs::read(dir.path().join("p1/metrics.csv")).unwrap();
    assert_eq!(m1, fs::read(dir.path().join("p2/metrics.csv")).unwrap());

    let ft = with_tiny(&["train", "--stage", "finetune", "--from", "p1/best.ckpt", "--out", "f1"]);
    let o = uasam(dir.path(), &ft);
    assert!(o.status.success(), "{}", stderr(&o));

    for out in ["e1", "e2"] {
        let o = uasam(dir.path(), &["eval", "--from", "f1/best.ckpt", "--k-samples", "3", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("K=3"));
    }
    let e1 = fs::read(dir.path().join("e1/eval.csv")).unwrap();
    assert_eq!(e1, fs::read(dir.path().join("e2/eval.csv")).unwrap());

    let o = uasam(dir.path(), &["inspect", "--from", "f1/best.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn seed_flag_and_environment_agree() {
    let dir = tempfile::tempdir().unwrap();
    let flag = uasam(dir.path(), &with_tiny(&["--seed", "9", "generate", "--out", "a"]));
    assert!(flag.status.success());
    let env = Command::new(env!("CARGO_BIN_EXE_uasam"))
        .current_dir(dir.path())
        .env("UASAM_SEED", "9")
        .args(with_tiny(&["generate", "--out", "b"]))
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_eq!(fs::read(dir.path().join("a/config.toml")).unwrap(), fs::read(dir.path().join("b/config.toml")).unwrap());
}

#[test]
fn ablate_sweeps_beta_only_for_latent_modes() {
    let dir = tempfile::tempdir().unwrap();
    generate_tiny(dir.path());
    let o = uasam(dir.path(), &with_tiny(&["train", "--stage", "pretrain", "--manifest", "data/train.json", "--out", "pre"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let args = with_tiny(&["ablate", "--from", "pre/best.ckpt", "--mode", "plain,cmsm", "--betas", "0.1,10", "--out", "abl"]);
    let o = uasam(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "mode,beta,dice,diversity");
    assert_eq!(rows.len(), 4, "{csv}");
    assert!(rows[1].starts_with("plain,1.0,") && rows[2].starts_with("cmsm,0.1,") && rows[3].starts_with("cmsm,10.0,"), "{csv}");
}
