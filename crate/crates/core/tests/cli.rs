use std::path::Path;
use std::process::{Command, Output};

fn sas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sas")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A config small enough to pretrain and fine-tune in well under a second.
fn tiny_config(dir: &Path) -> String {
    let text = r#"
version = 1

[backbone]
image_side = 8
channels = 1
patch = 4
d = 8
layers = 2
heads = 2
mlp_ratio = 2
num_classes_pretrain = 3

[adapter]
d_prime = 2
r = 2
r_prime = 2
m = 2

[pretrain]
lr = 0.01
betas = [0.9, 0.999]
eps = 1e-8
weight_decay = 0.0001
warmup_frac = 0.1
epochs = 2
batch_size = 8
seed = 0
precision = "f32"

[finetune]
lr = 0.01
betas = [0.9, 0.999]
eps = 1e-8
weight_decay = 0.0001
warmup_frac = 0.1
epochs = 2
batch_size = 8
seed = 0
precision = "f32"

[source]
type = "synthetic"
seed = 1
classes = 3
per_class = 4
test_per_class = 2
image_side = 8
channels = 1
noise = 0.5

[downstream]
type = "synthetic"
seed = 2
classes = 3
per_class = 4
test_per_class = 3
image_side = 8
channels = 1
noise = 0.5

[downstream.shift]
mean_shift = 1.0
contrast_scale = -1.0

[protocol]
seeds = [0, 1]
shots = [1, 2]
m_list = [1, 2]
"#;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn params_prints_reference_counts() {
    let out = sas(&["params"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for want in ["19200", "31488", "37632", "49920"] {
        assert!(text.contains(want), "{want} missing from\n{text}");
    }
}

#[test]
fn ppt_command() {
    let out = sas(&["ppt", "75.2", "49920"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "0.7504");
    assert_eq!(sas(&["ppt", "101", "0"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_enforces_tolerance() {
    let out = sas(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("checked 331 scalars"));
    assert_eq!(sas(&["gradcheck", "--tol", "0"]).status.code(), Some(4));
}

#[test]
fn default_config_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let out = sas(&["default-config"]);
    assert!(out.status.success());
    let path = dir.path().join("default.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let out = sas(&["params", "--config", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("d=32 L=12 d'=8 r=4 r'=8"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, std::fs::read_to_string(&cfg).unwrap().replace("[adapter]\n", "[adapter]\nscale = 2\n")).unwrap();
    assert_eq!(sas(&["params", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(sas(&["params", "--config", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(sas(&["params", "--m-list", "13"]).status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let p = |name: &str| d.join(name).to_str().unwrap().to_owned();

    let out = sas(&["pretrain", "--config", &cfg, "--out", &p("bb.ckpt")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let unknown = sas(&["finetune", "--variant", "prompt", "--backbone", &p("bb.ckpt"), "--config", &cfg, "--out", &p("x.csv")]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = sas(&["finetune", "--variant", "full_sas", "--backbone", &p("none.ckpt"), "--config", &cfg, "--out", &p("x.csv")]);
    assert_eq!(missing.status.code(), Some(3));

    for run in ["a", "b"] {
        let out = sas(&[
            "finetune",
            "--variant",
            "full_sas",
            "--backbone",
            &p("bb.ckpt"),
            "--config",
            &cfg,
            "--out",
            &p(&format!("{run}.csv")),
            "--model-out",
            &p(&format!("{run}.ckpt")),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for ext in ["csv", "jsonl", "ckpt"] {
        let a = std::fs::read(p(&format!("a.{ext}"))).unwrap();
        assert_eq!(a, std::fs::read(p(&format!("b.{ext}"))).unwrap(), "{ext} differs");
    }
    let rows = sas_core::results::read_results_csv(p("a.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.adapter_params == 112 && r.wall_time == 0.0));

    std::fs::write(
        p("test.toml"),
        "split = \"test\"\nseed = 2\n[source]\ntype = \"synthetic\"\nclasses = 3\nper_class = 3\nimage_side = 8\nchannels = 1\nnoise = 0.5\n[source.shift]\nmean_shift = 1.0\ncontrast_scale = -1.0\n",
    )
    .unwrap();
    let out = sas(&["eval", "--model", &p("a.ckpt"), "--data", &p("test.toml")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let expected = format!("top-1 {:.2}% on 9 examples", rows[0].top1);
    assert!(stdout(&out).contains(&expected), "{}", stdout(&out));

    let out = sas(&["ablate-m", "--config", &cfg, "--backbone", &p("bb.ckpt"), "--out", &p("m.csv")]);
    assert!(out.status.success());
    assert_eq!(sas_core::results::read_results_csv(p("m.csv")).unwrap().len(), 4);

    let out = sas(&["few-shot", "--config", &cfg, "--backbone", &p("bb.ckpt"), "--out", &p("k.csv")]);
    assert!(out.status.success());
    let rows = sas_core::results::read_results_csv(p("k.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].variant.ends_with(" k=1") && rows[3].variant.ends_with(" k=2"));
}
