use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dac")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--n-max", "24", "--k-max", "2", "--steps", "2", "--batch", "2", "--dim", "16", "--heads", "2", "--inducing", "4",
    "--encoder-depth", "1", "--decoder-depth", "1",
];

fn train_tiny(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let ckpt = dir.join("model.ckpt");
    let mut args = vec!["train", "--out", p(&ckpt)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let out = dac(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn gen_data_is_deterministic_and_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for path in [&a, &b] {
        let out = dac(&["gen-data", "--kind", "warped", "--n-max", "30", "--k-max", "3", "--count", "4", "--seed", "9", "--out", p(path)]);
        assert_eq!(code(&out), 0);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("set_id,x1,x2,label"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 4 && r[3].parse::<usize>().unwrap() >= 1));
    let mut ids: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    ids.dedup();
    assert_eq!(ids, ["0", "1", "2", "3"]);
}

#[test]
fn train_cluster_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), &[]);
    assert_eq!(&fs::read(&ckpt).unwrap()[..8], b"DACCKPT1");

    let data = dir.path().join("data.csv");
    assert_eq!(code(&dac(&["gen-data", "--kind", "mog", "--n-max", "24", "--k-max", "2", "--count", "2", "--out", p(&data)])), 0);
    let clustered = dir.path().join("clustered.csv");
    let out = dac(&["cluster", "--ckpt", p(&ckpt), "--data", p(&data), "--threshold", "0.5", "--max-iters", "50", "--seed", "1", "--out", p(&clustered)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&clustered).unwrap();
    let input = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), input.lines().count());
    for set in ["0", "1"] {
        let mut labels: Vec<usize> = text.lines().skip(1).filter(|l| l.starts_with(&format!("{set},"))).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, (1..=labels.len()).collect::<Vec<_>>(), "labels must be 1..k");
    }

    let report = dir.path().join("report.txt");
    let out = dac(&["eval", "--ckpt", p(&ckpt), "--kind", "mog", "--n-max", "24", "--k-max", "2", "--num-datasets", "3", "--seed", "5", "--report", p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let kv = fs::read_to_string(&report).unwrap();
    for key in ["ll=", "ari=", "nmi=", "k_mae=", "time_per_dataset_seconds=", "n_datasets=3", "config.eval.seed=5"] {
        assert!(kv.lines().any(|l| l.starts_with(key)), "missing {key} in\n{kv}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.txt.json")).unwrap()).unwrap();
    assert_eq!(json["n_datasets"], 3);
    assert!(json["ari"].as_f64().is_some_and(|a| (-1.0..=1.0).contains(&a)));

    let svg = dir.path().join("plot.svg");
    let out = dac(&["plot", "--data", p(&data), "--labels", p(&clustered), "--out", p(&svg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let drawn = fs::read_to_string(&svg).unwrap();
    let n0 = input.lines().filter(|l| l.starts_with("0,")).count();
    assert_eq!(drawn.matches("<circle").count(), n0);
    assert!(drawn.starts_with("<?xml") && drawn.trim_end().ends_with("</svg>"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dac(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&dac(&["gen-data", "--kind", "circles", "--out", "x.csv"])), 2);
    assert_eq!(code(&dac(&[])), 2);

    let missing = dir.path().join("missing.ckpt");
    let data = dir.path().join("d.csv");
    assert_eq!(code(&dac(&["gen-data", "--kind", "mog", "--n-max", "20", "--out", p(&data)])), 0);
    let out = dac(&["cluster", "--ckpt", p(&missing), "--data", p(&data), "--out", p(&dir.path().join("o.csv"))]);
    assert_eq!(code(&out), 3);

    let ckpt = train_tiny(dir.path(), &[]);
    let report = dir.path().join("r.txt");
    let out = dac(&["eval", "--ckpt", p(&ckpt), "--kind", "warped", "--n-max", "20", "--num-datasets", "1", "--report", p(&report)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    let out = dac(&["cluster", "--ckpt", p(&ckpt), "--data", p(&data), "--threshold", "1.5", "--out", p(&dir.path().join("o.csv"))]);
    assert_eq!(code(&out), 3);

    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = dac(&["cluster", "--ckpt", p(&dir.path().join("junk.ckpt")), "--data", p(&data), "--out", p(&dir.path().join("o.csv"))]);
    assert_eq!(code(&out), 3);

    let out = dac(&["train", "--model", "act-st", "--density", "maf", "--out", p(&dir.path().join("x.ckpt"))]);
    assert_eq!(code(&out), 3);

    let diverge = dir.path().join("diverge.ckpt");
    let out = dac(&[
        "train", "--out", p(&diverge), "--lr", "1e30", "--steps", "5", "--n-max", "24", "--k-max", "2", "--batch", "2", "--dim", "16",
        "--heads", "2", "--inducing", "4", "--encoder-depth", "1", "--decoder-depth", "1",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn plotting_an_empty_file_gives_an_empty_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.csv");
    fs::write(&data, "set_id,x1,x2,label\n").unwrap();
    let svg = dir.path().join("e.svg");
    assert_eq!(code(&dac(&["plot", "--data", p(&data), "--out", p(&svg)])), 0);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<circle").count(), 0);
    assert!(text.trim_end().ends_with("</svg>"));
}
