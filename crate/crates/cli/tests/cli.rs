use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pairedit(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairedit"))
        .args(args)
        .env("PAIREDIT_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
# small enough to train in seconds
data = synth:dot
size = 16
m = 4
eval_pairs = 3
steps = 4
batch = 2
t_max = 10
sample_steps = 2
mx_base = 4
ae_c0 = 4
ae_c1 = 8
vit_width = 16
vit_depth = 1
vit_heads = 2
time_dim = 8
cond_patch = 4
cond_dim = 8
";

fn kv(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

#[test]
fn synth_refuses_a_non_empty_folder_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("dots");
    let o = pairedit(tmp.path(), &["synth", "--task", "dot", "--m", "3", "--size", "16", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("source/0002.png").is_file() && out.join("target/0002.png").is_file());
    assert!(out.join("manifest.json").is_file());

    let again = pairedit(tmp.path(), &["synth", "--task", "dot", "--m", "2", "--size", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("error kind=invalid-state msg="), "{}", stderr(&again));

    let forced = pairedit(
        tmp.path(),
        &["synth", "--task", "dot", "--m", "2", "--size", "16", "--out", out.to_str().unwrap(), "--force"],
    );
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert!(!out.join("source/0002.png").exists(), "stale pairs survive --force");
}

#[test]
fn bad_inputs_exit_with_code_2_and_one_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pairedit(tmp.path(), &["synth", "--task", "stripes", "--m", "2", "--size", "16", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error kind=invalid-argument"), "{}", stderr(&o));

    let o = pairedit(tmp.path(), &["train", "--config", tmp.path().join("missing.conf").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error kind=io"), "{}", stderr(&o));

    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, TINY).unwrap();
    let o = pairedit(tmp.path(), &["train", "--config", conf.to_str().unwrap(), "--ablate", "no_such_thing"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error kind=invalid-argument"), "{}", stderr(&o));

    let o = pairedit(tmp.path(), &["edit", "--ckpt", conf.to_str().unwrap(), "--in", conf.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error kind=checkpoint"), "{}", stderr(&o));
}

#[test]
fn train_edit_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let o = pairedit(tmp.path(), &["train", "--config", conf.to_str().unwrap(), "--seed", "3", "--set", "lr=1e-3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let ckpt = kv(&text, "checkpoint").expect("checkpoint line");
    assert!(Path::new(&ckpt).starts_with(tmp.path().join("tiny")));
    for key in ["fid", "psnr_mean", "diou", "n_samples", "tau"] {
        assert!(kv(&text, key).is_some(), "missing {key} in {text}");
    }
    assert_eq!(kv(&text, "n_samples").as_deref(), Some("3"));
    let log = fs::read_to_string(tmp.path().join("tiny/metrics.log")).unwrap();
    assert!(log.contains("# seed = 3") && log.contains("# lr = 0.001"), "{log}");
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 4);
    assert!(tmp.path().join("tiny/report.json").is_file());

    let data = tmp.path().join("held");
    let o = pairedit(
        tmp.path(),
        &["synth", "--task", "dot", "--m", "2", "--size", "16", "--seed", "77", "--out", data.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let src = data.join("source");
    let o = pairedit(tmp.path(), &["edit", "--ckpt", &ckpt, "--in", src.to_str().unwrap(), "--steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(src.join("0000_edit.png").is_file() && src.join("0001_edit.png").is_file());
    // a second pass skips earlier outputs
    let o = pairedit(tmp.path(), &["edit", "--ckpt", &ckpt, "--in", src.to_str().unwrap(), "--steps", "1"]);
    assert_eq!(stdout(&o).lines().count(), 2, "{}", stdout(&o));

    let big = tmp.path().join("big.png");
    image::RgbImage::new(24, 20).save(&big).unwrap();
    let o = pairedit(tmp.path(), &["edit", "--ckpt", &ckpt, "--in", big.to_str().unwrap(), "--strict"]);
    assert_eq!(o.status.code(), Some(2));
    let o = pairedit(tmp.path(), &["edit", "--ckpt", &ckpt, "--in", big.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(image::open(tmp.path().join("big_edit.png")).unwrap().width(), 16);

    fs::remove_file(src.join("0000_edit.png")).unwrap();
    fs::remove_file(src.join("0001_edit.png")).unwrap();
    let rep = tmp.path().join("rep");
    let o = pairedit(
        tmp.path(),
        &["eval", "--ckpt", &ckpt, "--data", data.to_str().unwrap(), "--out", rep.to_str().unwrap(), "--tau", "0.2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(kv(&stdout(&o), "n_samples").as_deref(), Some("2"));
    assert_eq!(kv(&stdout(&o), "tau").as_deref(), Some("0.2"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["n_samples"], 2);
    assert!(rep.join("report.txt").is_file());
}

#[test]
fn resume_continues_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("r.conf");
    fs::write(&conf, format!("{TINY}ckpt_every = 2\n")).unwrap();
    let o = pairedit(tmp.path(), &["train", "--config", conf.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = fs::read(tmp.path().join("r/checkpoint.safetensors")).unwrap();
    let mid = tmp.path().join("r/ckpt-000002.safetensors");
    let o = pairedit(
        tmp.path(),
        &["train", "--config", conf.to_str().unwrap(), "--run", "again", "--resume", mid.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(tmp.path().join("again/checkpoint.safetensors")).unwrap(), full);
    let log = fs::read_to_string(tmp.path().join("again/metrics.log")).unwrap();
    assert!(log.starts_with("# resumed step=2"), "{log}");
}
