use clap::Parser;
use kinevae_cli::args::Cli;
use kinevae_cli::config::Config;
use kinevae_cli::resolve_config;

fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn defaults_then_file_then_env_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(
        &file,
        "seed = 11\n[train]\nepochs = 20\nbatch_size = 16\nlearning_rate = 0.01\n[model]\nlatent_dim = 8\n",
    )
    .unwrap();
    let cfg_path = file.to_str().unwrap();

    // Only defaults.
    let cli = Cli::parse_from(["kinevae", "train"]);
    let c = resolve_config(&cli, env(&[])).unwrap();
    assert_eq!(c, Config::default());

    // File over defaults.
    let cli = Cli::parse_from(["kinevae", "train", "--config", cfg_path]);
    let c = resolve_config(&cli, env(&[])).unwrap();
    assert_eq!(
        (c.seed, c.train.epochs, c.train.batch_size, c.model.latent_dim),
        (11, 20, 16, 8)
    );
    assert_eq!(c.train.learning_rate, 0.01);
    assert_eq!(c.model.hidden_dim, Config::default().model.hidden_dim);

    // Environment over file.
    let vars = env(&[("KINEVAE_TRAIN__EPOCHS", "30"), ("KINEVAE_SEED", "12")]);
    let c = resolve_config(&cli, vars.clone()).unwrap();
    assert_eq!((c.seed, c.train.epochs, c.train.batch_size), (12, 30, 16));

    // Flags over everything, through dedicated flags and --set alike.
    let cli = Cli::parse_from([
        "kinevae",
        "train",
        "--config",
        cfg_path,
        "--epochs",
        "40",
        "--seed",
        "13",
        "--set",
        "train.batch_size=4",
    ]);
    let c = resolve_config(&cli, vars).unwrap();
    assert_eq!((c.seed, c.train.epochs, c.train.batch_size), (13, 40, 4));
    assert_eq!(c.model.latent_dim, 8);
    assert_eq!(c.train.learning_rate, 0.01);
}

#[test]
fn dedicated_flag_beats_set_for_the_same_key() {
    let cli = Cli::parse_from(["kinevae", "train", "--set", "train.epochs=3", "--epochs", "5"]);
    assert_eq!(resolve_config(&cli, env(&[])).unwrap().train.epochs, 5);
}

#[test]
fn resolved_config_round_trips_through_toml() {
    let cli = Cli::parse_from([
        "kinevae",
        "train",
        "--alpha",
        "2.5",
        "--dataset",
        "d.kpd",
        "--grad-clip-norm",
        "1",
    ]);
    let c = resolve_config(&cli, env(&[])).unwrap();
    assert_eq!(c.objective.alpha, Some(2.5));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resolved.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    let again = resolve_config(
        &Cli::parse_from(["kinevae", "train", "--config", path.to_str().unwrap()]),
        env(&[]),
    )
    .unwrap();
    assert_eq!(again, c);
}

#[test]
fn bad_layers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    std::fs::write(&file, "[train]\nepoks = 3\n").unwrap();
    let cli = Cli::parse_from(["kinevae", "train", "--config", file.to_str().unwrap()]);
    assert!(resolve_config(&cli, env(&[])).is_err());

    let cli = Cli::parse_from(["kinevae", "train"]);
    assert!(resolve_config(&cli, env(&[("KINEVAE_TRAIN__EPOCHS", "lots")])).is_err());
    assert!(resolve_config(&cli, env(&[("KINEVAE_NOPE", "1")])).is_err());
    let cli = Cli::parse_from(["kinevae", "train", "--set", "epochs"]);
    assert!(resolve_config(&cli, env(&[])).is_err());
}
