//! The JSON files under `configs/` are the command-line form of the built-in
//! default matrix; this guard keeps the two in lockstep.

use perihom::experiments::{default_matrix, ExperimentConfig};
use std::path::Path;

#[test]
fn shipped_configs_match_builtin_matrix() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let matrix = default_matrix();
    for cfg in &matrix {
        let path = root.join(format!("{}.json", cfg.name));
        let loaded = ExperimentConfig::from_json_file(&path)
            .unwrap_or_else(|e| panic!("{} should load: {e}", path.display()));
        assert_eq!(
            loaded.content_hash(),
            cfg.content_hash(),
            "{} drifted from the built-in matrix entry",
            cfg.name
        );
    }
    // No stray configs either: the directory carries exactly the matrix.
    let mut on_disk: Vec<String> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    on_disk.sort();
    let mut expected: Vec<String> = matrix.iter().map(|c| format!("{}.json", c.name)).collect();
    expected.sort();
    assert_eq!(on_disk, expected);
}
