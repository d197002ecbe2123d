//! Acceptance gate for end-to-end determinism.

use std::fs;
use std::path::Path;
use std::process::Command;

fn run_all(out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_collapse"))
        .args(["all", "--seed", "11", "--out"])
        .arg(out)
        .status()
        .expect("binary runs");
    assert!(status.success());
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn criterion_9_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());
    let names = csv_files(a.path());
    let mut differing = Vec::new();
    for name in &names {
        if fs::read(a.path().join(name)).unwrap() != fs::read(b.path().join(name)).unwrap() {
            differing.push(name.clone());
        }
    }
    let pass = !names.is_empty() && names == csv_files(b.path()) && differing.is_empty();
    println!(
        "criterion 9 {} determinism: {} CSV files compared, differing: {:?}",
        if pass { "PASS" } else { "FAIL" },
        names.len(),
        differing
    );
    assert!(pass);
}
