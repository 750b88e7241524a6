use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
[dataset]
locations = 6
views_per_location = 3
unseen_locations = 2
distractors = 10
image_size = 16

[schedule]
steps = 4

[model]
latent_channels = 8
embed_dim = 8
decoder_channels = 8,4
head_hidden = 8

[optim]
batch = 4
epochs = 2
";

fn geodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geodiff")).args(args).output().expect("spawn geodiff")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.ini");
    fs::write(&p, TINY).unwrap();
    path(&p).to_string()
}

fn train_run(dir: &Path, name: &str) -> String {
    let cfg = tiny_config(dir);
    let run = dir.join(name);
    let out = geodiff(&["train", "--config", &cfg, "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path(&run).to_string()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(geodiff(&["--help"]).status.code(), Some(0));
    assert_eq!(geodiff(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(geodiff(&[]).status.code(), Some(1));
    assert_eq!(geodiff(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(geodiff(&["gen-data"]).status.code(), Some(1));
    assert_eq!(geodiff(&["query", "--index", "a", "--query", "b", "--k", "five"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two_with_diagnostics_on_stderr() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "[optim]\nepoch = 3\n").unwrap();
    let out = geodiff(&["gen-data", "--config", path(&bad), "--out", path(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let missing = dir.path().join("nope");
    assert_eq!(geodiff(&["eval", "--run", path(&missing)]).status.code(), Some(2));
    let garbage = dir.path().join("g.mcgt");
    fs::write(&garbage, b"not a container").unwrap();
    let out = geodiff(&["query", "--index", path(&garbage), "--query", path(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_images_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = geodiff(&["gen-data", "--config", &cfg, "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert!(manifest.lines().count() > 1);
    assert!(data.join("loc_00000").join("satellite.ppm").exists());
    assert!(data.join("loc_00000").join("drone_02.ppm").exists());
}

#[test]
fn train_then_eval_writes_metrics_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let a = train_run(dir.path(), "a");
    let b = train_run(dir.path(), "b");
    for run in [&a, &b] {
        let out = geodiff(&["eval", "--run", run]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ma = fs::read(Path::new(&a).join("metrics.csv")).unwrap();
    let mb = fs::read(Path::new(&b).join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    let text = String::from_utf8(ma).unwrap();
    // default ks are 1, 5, 10 plus the mAP row
    assert_eq!(text.lines().skip(1).count(), 4, "{text}");
    assert!(Path::new(&a).join("unseen_metrics.csv").exists());
    assert!(Path::new(&a).join("history.csv").exists());
}

#[test]
fn index_query_and_restore_pipeline() {
    let dir = TempDir::new().unwrap();
    let run = train_run(dir.path(), "run");
    let idx = dir.path().join("idx");
    let out = geodiff(&["index", "--run", &run, "--out", path(&idx)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(idx.join("ground_truth.csv").exists());

    let out = geodiff(&[
        "query",
        "--index",
        path(&idx.join("gallery.mcgt")),
        "--query",
        path(&idx.join("queries.mcgt")),
        "--k",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("query_id,rank,item_id,score"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    let first = rows[0][0];
    let ranks: Vec<&str> = rows.iter().filter(|r| r[0] == first).map(|r| r[1]).collect();
    assert_eq!(ranks, ["1", "2", "3", "4", "5"]);
    assert_eq!(rows.len() % 5, 0);

    let data = dir.path().join("data");
    let cfg = dir.path().join("tiny.ini");
    assert!(geodiff(&["gen-data", "--config", path(&cfg), "--out", path(&data)]).status.success());
    let restored = dir.path().join("restored.ppm");
    let query = data.join("loc_00000").join("drone_00.ppm");
    let out = geodiff(&["restore", "--run", &run, "--query", path(&query), "--out", path(&restored), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let header = fs::read(&restored).unwrap();
    assert!(header.starts_with(b"P6"));
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = geodiff(&["gradcheck", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("joint additivity"));
    assert!(!text.contains("FAIL"));
}
