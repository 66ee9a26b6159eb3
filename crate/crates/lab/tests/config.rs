use std::path::Path;

use topo_lab::config::{ExperimentConfig, Origin};
use topo_lab::LabError;

fn parse(text: &str) -> Result<(ExperimentConfig, Origin), LabError> {
    ExperimentConfig::parse(text, Path::new("exp.toml"))
}

#[test]
fn syntax_and_unknown_keys_report_lines() {
    let e = parse("experiment = \"a\"\narch = \n").unwrap_err();
    assert!(e.to_string().starts_with("exp.toml:2:"), "{e}");
    let e = parse("experiment = \"a\"\n\n[train]\nepochz = 3\n").unwrap_err();
    assert!(e.to_string().starts_with("exp.toml:4:"), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn validation_errors_point_at_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().display().to_string().replace('\\', "/");
    let text = format!("experiment = \"a\"\ndata_dir = \"{data}\"\nlambdas = [0.1, 0.7]\n");
    let (cfg, origin) = parse(&text).unwrap();
    let e = cfg.resolve(&origin).unwrap_err();
    assert!(e.to_string().starts_with("exp.toml:3: lambdas"), "{e}");

    let text = format!("data_dir = \"{data}\"\n[ladders]\nsalt_pepper = [0.1, 1.5]\n");
    let (cfg, origin) = parse(&text).unwrap();
    let e = cfg.resolve(&origin).unwrap_err();
    assert!(e.to_string().starts_with("exp.toml:3: ladders.salt_pepper"), "{e}");

    let (mut cfg, mut origin) = parse(&format!("data_dir = \"{data}\"\n")).unwrap();
    cfg.seeds = 0;
    origin.mark("seeds");
    let e = cfg.resolve(&origin).unwrap_err();
    assert!(e.to_string().starts_with("--seeds"), "{e}");
}

#[test]
fn missing_dataset_is_a_user_error_naming_the_path() {
    let (cfg, origin) = parse("data_dir = \"/definitely/not/here\"\n").unwrap();
    let e = cfg.resolve(&origin).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("/definitely/not/here"));
}

#[test]
fn profiles_fill_training_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().display().to_string().replace('\\', "/");
    let (cfg, origin) = parse(&format!("data_dir = \"{data}\"\n")).unwrap();
    let r = cfg.resolve(&origin).unwrap();
    assert_eq!((r.epochs, r.batch_size, r.train_limit), (15, 128, None));
    assert_eq!(r.exp_dir, Path::new("out/default"));

    let (cfg, origin) = parse(&format!("data_dir = \"{data}\"\narch = \"cifar\"\nreduced = true\n")).unwrap();
    let r = cfg.resolve(&origin).unwrap();
    assert_eq!((r.epochs, r.batch_size, r.train_limit), (10, 128, Some(10_000)));

    let (cfg, origin) = parse(&format!("data_dir = \"{data}\"\nreduced = true\n[train]\nbatch_size = 32\n")).unwrap();
    assert_eq!(cfg.resolve(&origin).unwrap().batch_size, 32);
}

#[test]
fn the_shipped_configs_parse() {
    for name in ["mnist-desk.toml", "cifar-desk.toml"] {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        ExperimentConfig::load(&p).unwrap();
    }
}
