use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = "seed = 7

[world]
train_episodes = 3
heldout_episodes = 2

[world.scene]
keyframes = 5

[base]
epochs = 1

[train]
epochs = 1
";

fn occlinker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occlinker"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = occlinker(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn fails(args: &[&str], code: i32, needle: &str) {
    let o = occlinker(args);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.contains(needle), "{args:?}: expected {needle:?} in {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.toml");
    fs::write(&p, SMOKE).unwrap();
    p
}

fn csv_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    fails(&["gen-data", "--out", s(&out)], 2, "--seed");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nbogus = 3\n").unwrap();
    fails(&["gen-data", "--config", s(&bad), "--out", s(&out)], 2, "bogus");
    let unseeded = dir.path().join("unseeded.toml");
    fs::write(&unseeded, "[world]\ntrain_episodes = 1\n").unwrap();
    fails(&["gen-data", "--config", s(&unseeded), "--out", s(&out)], 2, "seed");
    fails(&["gen-data", "--config", s(&dir.path().join("nope.toml")), "--out", s(&out)], 2, "nope.toml");
    fails(&["report", "--seed", "0", "--out", s(&out)], 2, "at least one");
}

#[test]
fn staged_commands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let p = |n: &str| dir.path().join(n);

    ok(&["pipeline", "--config", s(&cfg), "--out", s(&p("pipe"))]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&p("data"))]);
    ok(&["train-base", "--config", s(&cfg), "--data", s(&p("data")), "--out", s(&p("base"))]);
    ok(&["train-plugin", "--config", s(&cfg), "--base", s(&p("base")), "--data", s(&p("data")), "--out", s(&p("plugin"))]);
    ok(&["eval", "--config", s(&cfg), "--gt", s(&p("data")), "--base", s(&p("base")), "--plugin", s(&p("plugin")), "--out", s(&p("eval"))]);

    for f in ["base/loss.csv", "plugin/loss.csv", "plugin/epochs.csv"] {
        assert_eq!(fs::read(p("pipe").join(f)).unwrap(), fs::read(p(f)).unwrap(), "{f}");
    }
    let piped = fs::read(p("pipe/eval/plugin/report.csv")).unwrap();
    assert_eq!(piped, fs::read(p("eval/report.csv")).unwrap());

    // Saved predictions score the same when fed back in.
    ok(&["eval", "--seed", "7", "--data", s(&p("data")), "--pred", s(&p("eval/pred")), "--out", s(&p("again"))]);
    assert_eq!(piped, fs::read(p("again/report.csv")).unwrap());

    let inputs = fs::read_to_string(p("eval/inputs.json")).unwrap();
    for role in ["\"gt\"", "\"base\"", "\"plugin\"", "combined"] {
        assert!(inputs.contains(role), "{role} in {inputs}");
    }
    let echo = fs::read_to_string(p("eval/config.toml")).unwrap();
    assert!(echo.contains("seed = 7") && echo.contains("train_episodes = 3"), "{echo}");

    let tax = p("tax.json");
    fails(&["eval", "--seed", "7", "--data", s(&p("data")), "--taxonomy", s(&tax), "--pred", s(&p("eval/pred")), "--out", s(&p("t"))], 2, "tax.json");
    fs::write(&tax, r#"{"names":["a","b"],"tags":["Static","Static"]}"#).unwrap();
    let o = occlinker(&["eval", "--seed", "7", "--data", s(&p("data")), "--taxonomy", s(&tax), "--pred", s(&p("eval/pred")), "--out", s(&p("t"))]);
    assert!(!o.status.success(), "a two-class taxonomy cannot score four-class labels");
    fails(&["eval", "--seed", "7", "--data", s(&p("data")), "--pred", s(&p("nowhere")), "--out", s(&p("t2"))], 2, "nowhere");
    fs::create_dir(p("empty")).unwrap();
    fails(&["eval", "--seed", "7", "--data", s(&p("data")), "--pred", s(&p("empty")), "--out", s(&p("t2"))], 1, "heldout_000.oclt");

    ok(&["report", "--seed", "7", "--out", s(&p("rep1")), s(&p("eval"))]);
    assert_eq!(fs::read(p("rep1/summary.csv")).unwrap(), piped);
    ok(&["report", "--seed", "7", "--out", s(&p("rep2")), s(&p("eval")), s(&p("pipe/eval/base")), s(&p("missing"))]);
    let sum = fs::read_to_string(p("rep2/summary.csv")).unwrap();
    assert!(sum.starts_with("scene,frame,IoU_mean,IoU_std"));
    assert!(fs::read_to_string(p("rep2/flags.txt")).unwrap().contains("missing"));
    assert!(p("rep2/series/S_m.csv").is_file());
}

#[test]
fn pipeline_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&b)]);
    let (ca, cb) = (csv_files(&a), csv_files(&b));
    assert_eq!(ca.len(), 5);
    assert_eq!(ca, cb);
    let other = dir.path().join("c");
    ok(&["pipeline", "--config", s(&cfg), "--seed", "8", "--out", s(&other)]);
    assert_ne!(csv_files(&other), ca);
}

#[test]
fn ablation_rows_and_base_only_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let p = |n: &str| dir.path().join(n);
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&p("pipe"))]);
    let (data, base) = (p("pipe/data"), p("pipe/base"));
    ok(&["ablate", "--config", s(&cfg), "--base", s(&base), "--data", s(&data), "--variants", "M0,M4,L0", "--out", s(&p("abl"))]);
    let text = fs::read_to_string(p("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4, "{text}");
    assert!(rows.iter().skip(1).all(|r| r.contains(",ok,")), "{text}");
    let m0 = fs::read(p("abl/variants/M0/report.csv")).unwrap();
    assert_eq!(m0, fs::read(p("abl/variants/L0/report.csv")).unwrap());
    assert_eq!(m0, fs::read(p("pipe/eval/base/report.csv")).unwrap());
    assert_eq!(fs::read(p("abl/variants/M4/report.csv")).unwrap(), fs::read(p("pipe/eval/plugin/report.csv")).unwrap());

    fails(&["ablate", "--config", s(&cfg), "--base", s(&base), "--data", s(&data), "--variants", "M9", "--out", s(&p("bad"))], 2, "M9");
}
