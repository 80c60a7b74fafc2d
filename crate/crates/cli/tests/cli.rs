use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[dataset]
n_attack_pairs = 4

[autoencoder_training]
steps = 20

[rldm_training]
steps = 20

[fr.training]
steps = 30

[fr.robust_training]
steps = 5

[attack]
n_max = 6
curve_stride = 2
"#;

fn advrestore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advrestore"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    stdout(&o)
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn table_rows<'a>(report: &'a str, title_prefix: &str) -> Vec<(&'a str, Vec<f64>)> {
    let mut lines = report.lines().skip_while(|l| !l.starts_with(title_prefix)).skip(3);
    let mut rows = Vec::new();
    for l in lines.by_ref() {
        if l.trim().is_empty() {
            break;
        }
        let mut cells = l.split('|').map(str::trim);
        let label = cells.next().unwrap();
        rows.push((label, cells.map(|c| c.parse().unwrap()).collect()));
    }
    rows
}

#[test]
fn failures_have_distinct_exit_codes_and_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 2\n").unwrap();
    let o = advrestore(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr(&o).lines().count(), 1);
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));

    let o = advrestore(&["attack", "--out", out]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[missing-artifact]"), "{}", stderr(&o));

    fs::write(Path::new(out).join(".lock"), "").unwrap();
    let o = advrestore(&["gen-data", "--out", out]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).starts_with("error[locked]"));

    let o = advrestore(&["attack", "--variant", "pgd", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let o = advrestore(&[
        "attack",
        "--rho",
        "1.5",
        "--out",
        dir.path().join("other").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn staged_pipeline_with_null_attack_matches_the_benign_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let base = ["--config", config.as_str(), "--out", out_s];
    for cmd in ["gen-data", "train-autoencoder", "train-rldm", "train-fr"] {
        ok(advrestore(&[&[cmd][..], &base[..]].concat()));
    }
    assert!(out.join("data/images/0000-id00-v00-hq.pgm").exists());
    let ckpts: Vec<_> = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    assert_eq!(ckpts.len(), 7);
    let before: Vec<Vec<u8>> = ckpts.iter().map(|p| fs::read(p).unwrap()).collect();

    ok(advrestore(
        &[
            &["attack", "--variant", "fim", "--beta", "0", "--n-max", "3"][..],
            &base[..],
        ]
        .concat(),
    ));
    let results = fs::read_to_string(out.join("attacks/fim/results.toml")).unwrap();
    assert!(results.contains("n_max = 3"));
    assert!(results.contains("iterations_run = 3"));
    assert!(results.contains("[config.attack]"));
    assert!(out.join("attacks/fim/pair-000.pgm").exists());
    assert_eq!(
        fs::read_to_string(out.join("attacks/fim/loss_trace.tsv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let report = ok(advrestore(&[&["evaluate", "--variant", "fim"][..], &base[..]].concat()));
    for title in [
        "Attack success rate (%) against normally",
        "Attack success rate (%) against adversarially",
    ] {
        let rows = table_rows(&report, title);
        assert_eq!(rows.len(), 2, "{report}");
        assert_eq!(rows[0].0, "Benign");
        assert_eq!(rows[1].0, "FIM");
        assert_eq!(rows[0].1, rows[1].1);
    }
    let after: Vec<Vec<u8>> = ckpts.iter().map(|p| fs::read(p).unwrap()).collect();
    assert!(before == after, "a command modified its input checkpoints");
    let manifest = fs::read_to_string(out.join("report.toml")).unwrap();
    assert!(manifest.contains("[config.dataset]") && manifest.contains("checkpoints/surrogate.ckpt"));
}

#[test]
fn reproduce_report_is_deterministic_and_in_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let first = ok(advrestore(&["reproduce-report", "--config", &config, "--out", out_s]));
    let bytes = fs::read(out.join("report.txt")).unwrap();
    fs::remove_dir_all(&out).unwrap();
    let second = ok(advrestore(&["reproduce-report", "--config", &config, "--out", out_s]));
    assert_eq!(first, second);
    assert!(bytes == fs::read(out.join("report.txt")).unwrap());

    let rows: Vec<&str> = table_rows(&first, "Attack success rate (%) against normally")
        .into_iter()
        .map(|r| r.0)
        .collect();
    assert_eq!(rows, ["Benign", "FIM", "FIM+AdvRestore", "DFANet", "DFANet+AdvRestore"]);
    assert!(first.contains("White-box success rate (%) by iteration"));
}
