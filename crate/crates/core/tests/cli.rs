use std::path::Path;
use std::process::{Command, Output};

use sdlseg::volume::{read_mask, read_volume};

fn sdlseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdlseg")).args(args).output().expect("spawn sdlseg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    let o = sdlseg(&["phantom", "--out", s(dir), "--patients", "2", "--fractions", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wrote 4 CT volumes"));
}

#[test]
fn phantom_writes_manifest_and_volumes() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path());
    assert!(tmp.path().join("manifest.json").is_file());
    let ct = read_volume(tmp.path().join("P01/F1/ct.rvol")).unwrap();
    let label = read_mask(tmp.path().join("P01/F1/label.rvol")).unwrap();
    assert_eq!(ct.dims(), label.dims());
    assert!(label.count() > 0);
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path());
    let label = tmp.path().join("P00/F0/label.rvol");
    let o = sdlseg(&["eval", "--pred", s(&label), "--truth", s(&label)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("DSC: 1.000000"), "{out}");
    assert!(out.contains("HD95 (mm): 0"), "{out}");
}

#[test]
fn vote_of_identical_masks_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path());
    let label = tmp.path().join("P00/F1/label.rvol");
    let fused = tmp.path().join("fused.rvol");
    let o = sdlseg(&["vote", "--masks", s(&label), s(&label), s(&label), "--out", s(&fused)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_mask(&fused).unwrap(), read_mask(&label).unwrap());
}

#[test]
fn saliency_finds_markers() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path());
    let f = tmp.path().join("P00/F0");
    let out = tmp.path().join("sal.rvol");
    let o = sdlseg(&["saliency", "--ct", s(&f.join("ct.rvol")), "--breast", s(&f.join("breast.rvol")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cues: usize = stdout(&o).trim().trim_start_matches("cues: ").parse().unwrap();
    assert!(cues >= 1);
    let map = read_volume(&out).unwrap();
    let max = map.data().iter().cloned().fold(f32::MIN, f32::max);
    assert_eq!(max, 1.0);
}

#[test]
fn bad_usage_and_missing_files_have_distinct_codes() {
    let o = sdlseg(&["eval", "--pred"]);
    assert_eq!(o.status.code(), Some(1));
    let o = sdlseg(&["eval", "--pred", "/nonexistent/a.rvol", "--truth", "/nonexistent/b.rvol"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = sdlseg(&["phantom", "--out", "/tmp", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
}
