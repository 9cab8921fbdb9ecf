use std::path::Path;
use std::process::{Command, Output};

use rzsr::image::Image;
use rzsr::io::{write_png, DepthMap};
use rzsr::patchdb::PatchDatabase;
use serde_json::Value;

const FAST: &[&str] = &["--patch-side", "8", "--width", "4", "--iters", "6", "--bp-iters", "2"];

fn rzsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rzsr")).args(args).output().expect("binary runs")
}

fn texture(w: usize, h: usize, phase: usize) -> Image {
    Image::from_fn(w, h, 3, |c, x, y| (((x / 3 + y / 2 + c + phase) % 4) as f64 / 4.0 + 0.05 * ((x * y) % 3) as f64).min(1.0))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rzsr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rzsr(&["sr", "--image", "x.png", "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(rzsr(&["sr", "--image", "x.png", "--scale", "1"]).status.code(), Some(1));
    assert_eq!(rzsr(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let out = rzsr(&["sr", "--image", s(&missing), "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.png"));
}

#[test]
fn sr_writes_doubled_image_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    write_png(&img, &texture(40, 36, 0)).unwrap();
    let depth = dir.path().join("in.dpt");
    DepthMap::from_raw(40, 36, (0..40 * 36).map(|i| (i / 40) as f64).collect()).unwrap().write_dpt(&depth).unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["sr", "--image", s(&img), "--depth", s(&depth), "--scale", "2", "--audit", "-o", s(&out)];
    args.extend(FAST);
    let res = rzsr(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let sr = rzsr::io::read_png(&out.join("sr.png")).unwrap();
    assert_eq!((sr.width(), sr.height()), (80, 72));
    let m = manifest(&out);
    assert_eq!(m["config"]["patch_side"], 8);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
    assert!(m["timings"].as_array().unwrap().iter().any(|t| t["stage"] == "training"));
    assert!(m["fallback_rate"].is_number());
    assert!(out.join("loss.csv").exists() && out.join("audit.csv").exists());
}

#[test]
fn reference_free_records_zero_retrievals() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    write_png(&img, &texture(40, 40, 1)).unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["sr", "--image", s(&img), "--mode", "reference-free", "-o", s(&out)];
    args.extend(FAST);
    assert!(rzsr(&args).status.success());
    assert_eq!(manifest(&out)["retrievals"], 0);
}

#[test]
fn sr_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    write_png(&img, &texture(40, 40, 2)).unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let mut args = vec!["sr", "--image", s(&img), "--seed", "7", "-o", s(&out)];
        args.extend(FAST);
        assert!(rzsr(&args).status.success());
        bytes.push(std::fs::read(out.join("sr.png")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    write_png(&img, &texture(40, 40, 3)).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "patch_side = 8\nwidth = 4\nmax_iters = 4\nthreshold = 0.5\n").unwrap();
    let out = dir.path().join("out");
    let res = rzsr(&["sr", "--config", s(&cfg), "--threshold", "0.7", "--image", s(&img), "-o", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(&out);
    assert_eq!(m["config"]["threshold"], 0.7);
    assert_eq!(m["config"]["max_iters"], 4);
}

#[test]
fn eval_of_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("sr"), dir.path().join("hr"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    write_png(&a.join("x.png"), &texture(24, 24, 0)).unwrap();
    write_png(&b.join("x.png"), &texture(24, 24, 0)).unwrap();
    let out = dir.path().join("m");
    assert!(rzsr(&["eval", "--sr", s(&a), "--hr", s(&b), "-o", s(&out)]).status.success());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "x.png,inf,1.000000");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn build_db_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    write_png(&img, &texture(64, 64, 0)).unwrap();
    let db_path = dir.path().join("d.rzdb");
    assert!(rzsr(&["build-db", "--image", s(&img), "--patch-side", "8", "-o", s(&db_path)]).status.success());
    let loaded = PatchDatabase::load(&db_path).unwrap();
    assert!(!loaded.entries.is_empty());
    let again = PatchDatabase::from_bytes(&loaded.to_bytes()).unwrap();
    assert_eq!(again, loaded);
    assert_eq!(std::fs::read(&db_path).unwrap(), loaded.to_bytes());
}

#[test]
fn degrade_and_kernel_gen_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    std::fs::create_dir_all(&hr).unwrap();
    for i in 0..2 {
        write_png(&hr.join(format!("{i}.png")), &texture(32, 32, i)).unwrap();
    }
    let mut sets = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let args = ["degrade", "--input", s(&hr), "-o", s(&out), "--mode", "random-kernel", "--seed", "5", "--noise", "0.01"];
        assert!(rzsr(&args).status.success());
        sets.push((std::fs::read(out.join("1.png")).unwrap(), std::fs::read(out.join("1.kernel")).unwrap()));
        assert_eq!(manifest(&out)["images"][1]["seed"], 6);
    }
    assert_eq!(sets[0], sets[1]);
    let kdir = dir.path().join("k");
    assert!(rzsr(&["kernel-gen", "--seed", "3", "--count", "2", "-o", s(&kdir)]).status.success());
    assert!(kdir.join("kernel_3.kernel").exists() && kdir.join("kernel_4.kernel").exists());
}

#[test]
fn ablate_reports_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    std::fs::create_dir_all(&hr).unwrap();
    write_png(&hr.join("t.png"), &texture(80, 80, 0)).unwrap();
    let out = dir.path().join("ab");
    let mut args = vec!["ablate", "--input", s(&hr), "-o", s(&out)];
    args.extend(FAST);
    let res = rzsr(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["reference-free", "single-scale", "exhaustive", "database"]);
}
