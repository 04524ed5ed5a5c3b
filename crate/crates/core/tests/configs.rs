use std::path::Path;

use triaug::harness::ExperimentConfig;

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let config = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            config.validate().unwrap();
            assert_eq!(Some(config.name.as_str()), path.file_stem().and_then(|s| s.to_str()));
            names.push(config.name);
        }
    }
    names.sort();
    assert_eq!(names, ["ce", "default", "far_ood", "near_ood", "ours", "s1x3", "s2x3"]);
}

#[test]
fn shipped_ablation_configs_match_compare_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for variant in ExperimentConfig::default().ablation_variants() {
        let loaded = ExperimentConfig::load(&dir.join(format!("{}.toml", variant.name))).unwrap();
        assert_eq!(loaded.hash(), variant.hash(), "{}", variant.name);
    }
}
