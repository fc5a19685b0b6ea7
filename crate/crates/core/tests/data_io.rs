//! On-disk dataset format: round trips, corruption and determinism.

use std::fs;
use std::path::Path;

use pcpr::data::io::{load_cloud, load_dataset, save_dataset};
use pcpr::data::{generate_domain, DataError, SyntheticDomainSpec};

fn spec(seed: u64) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        name: "io".into(),
        domain_id: 7,
        seed,
        num_places: 5,
        points_per_cloud: 16,
        ..SyntheticDomainSpec::default()
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn saved_datasets_load_back_identically() {
    let dataset = generate_domain(&spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&dataset, dir.path()).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded, dataset);
}

#[test]
fn generation_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_dataset(&generate_domain(&spec(11)).unwrap(), a.path()).unwrap();
    save_dataset(&generate_domain(&spec(11)).unwrap(), b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));

    let c = tempfile::tempdir().unwrap();
    save_dataset(&generate_domain(&spec(12)).unwrap(), c.path()).unwrap();
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn missing_cloud_files_are_reported() {
    let dataset = generate_domain(&spec(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&dataset, dir.path()).unwrap();
    let victim = dir.path().join("clouds").join(format!("{}.bin", dataset.train[0].sample_id));
    fs::remove_file(&victim).unwrap();
    match load_dataset(&manifest) {
        Err(DataError::MissingIndexEntry { file, .. }) => assert_eq!(file, victim),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn truncated_clouds_report_the_file_and_offset() {
    let dataset = generate_domain(&spec(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&dataset, dir.path()).unwrap();
    let victim = dir.path().join("clouds").join(format!("{}.bin", dataset.test_queries[0].sample_id));
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 5]).unwrap();
    match load_dataset(&manifest) {
        Err(DataError::Format { file, offset, .. }) => {
            assert_eq!(file, victim);
            assert_eq!(offset, bytes.len() as u64 - 5);
        }
        other => panic!("unexpected {other:?}"),
    }

    fs::write(&victim, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
    assert!(matches!(load_cloud(&victim), Err(DataError::Format { offset: 0, .. })));
}

#[test]
fn unknown_manifest_fields_are_rejected() {
    let dataset = generate_domain(&spec(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&dataset, dir.path()).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    json["surprise"] = serde_json::json!(1);
    fs::write(&manifest, json.to_string()).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(DataError::Format { .. })));
}
