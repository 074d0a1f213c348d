use std::fs;
use std::path::Path;

use phonon_core::pipeline::{run_bundled, RunReport};
use serde_json::json;

fn read_all(report: &RunReport) -> Vec<(String, Vec<u8>)> {
    report
        .manifest
        .artifacts
        .keys()
        .map(|rel| (rel.clone(), fs::read(report.dir.join(rel)).unwrap()))
        .collect()
}

fn run_in(threads: usize, name: &str, overrides: &serde_json::Value, out: &Path) -> RunReport {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| run_bundled(name, Some(overrides), out).unwrap())
}

#[test]
fn photon_capture_is_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let small = json!({
        "state_source": {"dim": 12},
        "sampling": {"n_samples": 4000},
        "tomography": {"iterations": 60, "bin_width": 0.2},
        "bootstrap": {"n_sets": 12, "n_samples_per_set": 2000},
    });
    let a = run_in(1, "photon-capture", &small, &dir.path().join("one"));
    let b = run_in(3, "photon-capture", &small, &dir.path().join("three"));
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(read_all(&a), read_all(&b));
    for rel in ["metrics.json", "ci.json", "config.json", "manifest.json"] {
        assert!(a.dir.join(rel).is_file(), "{rel}");
    }
    assert!(a.manifest.artifacts.keys().any(|k| k.starts_with("histograms/")));
}

#[test]
fn fidelity_run_reports_table_and_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let small = json!({
        "state_source": {"dim": 6},
        "sampling": {"n_samples": 3000},
        "tomography": {"iterations": 60},
        "bootstrap": null,
    });
    let a = run_in(2, "fidelity", &small, dir.path());
    let fid = a.metrics.fidelity.as_ref().expect("fidelity section");
    let table = fid.table.as_ref().expect("tabulated pairs give a table report");
    assert!((table.f_avg - 0.85).abs() < 0.01, "{}", table.f_avg);
    assert!(fid.estimate.f_avg > 0.5 && fid.estimate.f_avg <= 1.0);
    assert_eq!(a.metrics.states.len(), 8);
    assert!(a.ci.is_none());
}

#[test]
fn existing_run_directory_is_not_clobbered() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("photon-capture");
    fs::create_dir_all(&target).unwrap();
    fs::write(target.join("notes.txt"), b"keep").unwrap();
    let small = json!({"sampling": {"n_samples": 500}, "bootstrap": null});
    assert!(run_bundled("photon-capture", Some(&small), dir.path()).is_err());
    assert_eq!(fs::read(target.join("notes.txt")).unwrap(), b"keep");
}
