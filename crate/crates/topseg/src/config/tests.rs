use super::*;
use crate::decoder::Arch;
use crate::embed::ScaleName;

#[test]
fn empty_config_is_fully_defaulted() {
    let cfg = RunConfig::from_toml_str("").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.budget, 100.0);
    assert_eq!(cfg.jobs, 0);
    assert_eq!(cfg.paths, PathsConfig::default());
    assert_eq!(cfg.decoder, DecoderConfig::default());
    assert_eq!(cfg.eval.tolerance, 0.060);
    assert_eq!(cfg.resolved_scales().unwrap(), default_scales());
    cfg.validate().unwrap();
}

#[test]
fn sections_override_defaults() {
    let cfg = RunConfig::from_toml_str(
        r#"
        seed = 11
        budget = 50.0

        [paths]
        data_dir = "recordings"
        model_path = "models/a.bin"

        [preprocess]
        band_low = 25.0

        [decoder]
        arch = "mlp"
        epochs = 3

        [refine]
        lambda_s = 0.5

        [eval]
        tolerance = 0.1

        [synth]
        heart_rate = 90.0
        "#,
    )
    .unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.budget_fraction(), 0.5);
    assert_eq!(cfg.paths.data_dir, PathBuf::from("recordings"));
    assert_eq!(cfg.paths.model_path, PathBuf::from("models/a.bin"));
    assert_eq!(cfg.paths.output_dir, PathBuf::from("out"));
    assert_eq!(cfg.preprocess.band_low, 25.0);
    assert_eq!(cfg.decoder.arch, Arch::Mlp);
    assert_eq!(cfg.decoder.epochs, 3);
    assert_eq!(cfg.refine.lambda_s, 0.5);
    assert_eq!(cfg.eval.tolerance, 0.1);
    assert_eq!(cfg.synth.heart_rate, 90.0);
    // Untouched sections keep their defaults.
    assert_eq!(cfg.refine.lambda_b, RefineConfig::default().lambda_b);
    assert_eq!(cfg.synth.s1_dur, 100.0);
}

#[test]
fn scale_sections_tweak_individual_scales() {
    let cfg = RunConfig::from_toml_str(
        r#"
        [scales.fine]
        dim = 7

        [scales.global8]
        tau = 0.1
        "#,
    )
    .unwrap();
    let scales = cfg.resolved_scales().unwrap();
    let by_name = |n: ScaleName| scales.iter().find(|s| s.name == n).unwrap();
    assert_eq!(by_name(ScaleName::Fine).dim, 7);
    assert_eq!(by_name(ScaleName::Fine).tau, 0.010);
    assert_eq!(by_name(ScaleName::Global8).tau, 0.1);
    assert_eq!(by_name(ScaleName::Global8).dim, 41);
    assert_eq!(by_name(ScaleName::Meso), &default_scales()[3]);
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        "no_such_field = 1",
        "budget = 0.0",
        "budget = 101.0",
        "[decoder]\nkernel = 4",
        "[scales.bogus]\ndim = 3",
        "[scales.fine]\ntau = 0.0011",
        "[synth]\nheart_rate = 20.0",
        "[eval]\ntolerance = -1.0",
    ] {
        assert!(
            matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
            "expected rejection of {text:?}"
        );
    }
}

#[test]
fn load_handles_missing_path_and_files() {
    let cfg = RunConfig::load(None).unwrap();
    assert_eq!(cfg.seed, RunConfig::default().seed);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 99\n").unwrap();
    assert_eq!(RunConfig::load(Some(&path)).unwrap().seed, 99);

    let missing = dir.path().join("nope.toml");
    assert!(RunConfig::load(Some(&missing)).is_err());
}

#[test]
fn default_config_roundtrips_through_toml() {
    let cfg = RunConfig::default();
    let text = toml::to_string(&cfg).unwrap();
    let back = RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(toml::to_string(&back).unwrap(), text);
}

#[test]
fn cache_dir_resolution_prefers_config_then_env() {
    let explicit = PathsConfig {
        cache_dir: Some(PathBuf::from("/tmp/explicit")),
        ..PathsConfig::default()
    };
    std::env::set_var("TOPSEG_CACHE_DIR", "/tmp/from-env");
    assert_eq!(explicit.resolved_cache_dir(), PathBuf::from("/tmp/explicit"));
    let fallback = PathsConfig::default();
    assert_eq!(fallback.resolved_cache_dir(), PathBuf::from("/tmp/from-env"));
    std::env::remove_var("TOPSEG_CACHE_DIR");
    assert_eq!(fallback.resolved_cache_dir(), PathBuf::from("cache"));
}
