use std::path::Path;
use std::process::{Command, Output};

fn vpr(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpr"))
        .args(args)
        .env("VPR_OUT_ROOT", out_root)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const TINY: &str = r#"
[dataset]
kind = "moving_ball"

[model]
latent_dim = 2
deter_dim = 8
layers = 2

[training]
iterations = 4
batch_size = 2
eval_every = 2
eval_episodes = 2
checkpoint_every = 2

[evaluation]
episodes = 2
trials = 2
samples = 3
rollout_steps = 5
"#;

#[test]
fn generate_is_deterministic_in_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, "[dataset]\nkind = \"synthetic1d\"\n[model]\nnum_levels = 1\nupdate_mode = \"toy\"\n[evaluation]\nrollout_level = 1\n");
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = vpr(
            &[
                "generate",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "7",
                "--count",
                "5",
                "--out",
                out.to_str().unwrap(),
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("factor 0:"));
    }
    let a = std::fs::read(dir.path().join("a/dataset.ndjson")).unwrap();
    let b = std::fs::read(dir.path().join("b/dataset.ndjson")).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("a/config.resolved.toml").exists());
}

#[test]
fn zero_length_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vpr(&["generate", "--length", "0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, "[detector]\ngama = 1.2\n");
    let o = vpr(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_flag_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        vpr(&["train", "--bogus"], dir.path()).status.code(),
        Some(1)
    );
}

#[test]
fn missing_checkpoint_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = vpr(
        &[
            "eval",
            "--checkpoint",
            dir.path().join("nope.json").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, TINY);
    let cfg = cfg.to_str().unwrap();

    let full = dir.path().join("full");
    let o = vpr(
        &["train", "--config", cfg, "--out", full.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let part = dir.path().join("part");
    let o = vpr(
        &[
            "train",
            "--config",
            cfg,
            "--iterations",
            "2",
            "--out",
            part.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let ckpt = part.join("checkpoint.json");
    let o = vpr(
        &[
            "train",
            "--resume",
            ckpt.to_str().unwrap(),
            "--iterations",
            "4",
            "--out",
            part.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let a: serde_json::Value =
        serde_json::from_slice(&std::fs::read(full.join("checkpoint.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(&ckpt).unwrap()).unwrap();
    assert_eq!(a["params"], b["params"]);
    assert_eq!(a["adam"], b["adam"]);
    assert_eq!(a["iteration"], 4);

    let log = std::fs::read_to_string(part.join("metrics.csv")).unwrap();
    assert_eq!(
        log.lines().filter(|l| l.starts_with("iteration")).count(),
        1
    );
    assert_eq!(log.lines().count(), 5);

    let ev = dir.path().join("ev");
    let o = vpr(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--metrics",
            "f1,update_rate,disentanglement,rollout,kl_parts",
            "--level",
            "2",
            "--steps",
            "5",
            "--out",
            ev.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("run,seed,config_digest,metric,level,factor,value"));
    for m in ["f1", "mean_update_interval", "entropy", "event_accuracy"] {
        assert!(csv.contains(&format!(",{m},")), "missing {m}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["results"]["disentanglement"]["samples"], 3);
    assert!(report["config"]["dataset"]["kind"] == "moving_ball");

    let o = vpr(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--metrics",
            "psnr",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn resume_with_other_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, TINY);
    let out = dir.path().join("run");
    let o = vpr(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--iterations",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let other = dir.path().join("o.toml");
    write(&other, &TINY.replace("deter_dim = 8", "deter_dim = 6"));
    let o = vpr(
        &[
            "train",
            "--config",
            other.to_str().unwrap(),
            "--resume",
            out.join("checkpoint.json").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn outputs_default_to_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = vpr(&["generate", "--count", "2"], dir.path());
    assert!(o.status.success());
    assert!(dir.path().join("generate/dataset.ndjson").exists());
}

#[test]
fn sweep_writes_marginal_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, TINY);
    let out = dir.path().join("sw");
    let o = vpr(
        &[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--grid",
            "gamma=1.1,1.2;window=25,50,100",
            "--seeds",
            "0",
            "--iterations",
            "1",
            "--workers",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let marg = std::fs::read_to_string(out.join("sweep_marginals.csv")).unwrap();
    assert_eq!(marg.lines().count(), 1 + 2 + 3);
    let cells = std::fs::read_to_string(out.join("sweep_cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 6);
}
