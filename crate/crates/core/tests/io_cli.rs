use std::path::Path;

use flame::cli::{self, CliError, EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_UNHEALTHY};
use flame::fit::fit;
use flame::inference::ContrastResult;
use flame::io::{self, DrawsFile, IoError};
use flame::model::ModelSpec;
use flame::sampler::SamplerConfig;
use flame::sim::{generate_dataset, EventRate, Shape, SimConfig, TrueRaf};
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    cli::main_with_args(std::iter::once("flame").chain(args.iter().copied()))
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    std::fs::write(dir.join(name), body).unwrap();
    path(dir, name)
}

#[test]
fn simulated_files_load_back_exactly() {
    let dir = TempDir::new().unwrap();
    let cfg = SimConfig::new(TrueRaf::new(Shape::Sigmoid, EventRate::Fifty), 300, 30, 5);
    let ds = generate_dataset::<f64>(&cfg, 2).unwrap();
    let s = dir.path().join("s.csv");
    let e = dir.path().join("e.csv");
    io::write_subjects(&s, &ds).unwrap();
    io::write_episodes(&e, &ds).unwrap();
    assert_eq!(io::load_dataset(&s, &e).unwrap(), ds);
}

#[test]
fn fifteen_episode_patient() {
    let dir = TempDir::new().unwrap();
    let subjects = write(dir.path(), "s.csv", "subject_id,y,age\np1,1,67\n");
    let episodes: [(u32, u32); 15] = [
        (3, 3),
        (10, 2),
        (16, 5),
        (25, 1),
        (30, 4),
        (41, 2),
        (50, 6),
        (62, 3),
        (75, 8),
        (90, 4),
        (106, 63),
        (175, 2),
        (184, 7),
        (199, 1),
        (210, 5),
    ];
    let mut body = String::from("subject_id,start_minute,duration_minutes\n");
    for (s, d) in episodes {
        body.push_str(&format!("p1,{s},{d}\n"));
    }
    let episodes_path = write(dir.path(), "e.csv", &body);
    let ds = io::load_dataset(Path::new(&subjects), Path::new(&episodes_path)).unwrap();
    let p = &ds.subjects()[0];
    assert_eq!(p.episodes.len(), 15);
    assert_eq!(p.episodes[0].duration, 3.0);
    assert_eq!(p.episodes[0].start, Some(3.0));
    assert_eq!(p.episodes[10].duration, 63.0);
    assert_eq!(p.episodes[10].start, Some(106.0));
    assert_eq!(ds.covariate_names(), ["intercept", "age"]);
    assert_eq!(p.x, [1.0, 67.0]);
}

#[test]
fn load_errors_name_the_row() {
    let dir = TempDir::new().unwrap();
    let s = write(dir.path(), "s.csv", "subject_id,y\na,0\nb,2\n");
    let e = write(
        dir.path(),
        "e.csv",
        "subject_id,start_minute,duration_minutes\n",
    );
    let err = io::load_dataset(Path::new(&s), Path::new(&e)).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");

    let s = write(dir.path(), "s.csv", "subject_id,y\na,0\nb,1\n");
    let e = write(
        dir.path(),
        "e.csv",
        "subject_id,start_minute,duration_minutes\na,0,4\nb,7,0\n",
    );
    let err = io::load_dataset(Path::new(&s), Path::new(&e)).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");

    let e = write(
        dir.path(),
        "e.csv",
        "subject_id,start_minute,duration_minutes\nzz,0,4\n",
    );
    let err = io::load_dataset(Path::new(&s), Path::new(&e)).unwrap_err();
    assert!(matches!(err, IoError::Row { line: 2, .. }), "{err}");

    let s = write(dir.path(), "s.csv", "subject_id,y,age\na,0,\n");
    let err = io::load_dataset(Path::new(&s), Path::new(&e)).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

fn small_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 2,
        warmup: 100,
        samples: 60,
        seed,
        ..SamplerConfig::default()
    }
}

#[test]
fn draws_file_round_trip_is_bit_exact() {
    let dir = TempDir::new().unwrap();
    let cfg = SimConfig::new(TrueRaf::new(Shape::Linear, EventRate::Thirty), 120, 30, 8);
    let ds = generate_dataset::<f64>(&cfg, 0).unwrap();
    let spec = ModelSpec::new(8, 0.0, 30.0);
    let f = fit(&ds, &spec, &small_sampler(3)).unwrap();
    let file = DrawsFile {
        model: spec,
        sampler: small_sampler(3),
        covariate_names: ds.covariate_names().to_vec(),
        draws: f.draws,
    };
    let p = dir.path().join("d.bin");
    file.write(&p).unwrap();
    let back = DrawsFile::read(&p).unwrap();
    assert_eq!(back.draws.names(), file.draws.names());
    for (a, b) in back.draws.chains().iter().zip(file.draws.chains()) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.values), bits(&b.values));
        assert_eq!(bits(&a.adaptation.inv_mass), bits(&b.adaptation.inv_mass));
        assert_eq!(
            a.adaptation.step_size.to_bits(),
            b.adaptation.step_size.to_bits()
        );
        assert_eq!(a.stats, b.stats);
    }
    assert_eq!(back, file);

    // A flipped byte in the embedded hash is caught on read.
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[20] ^= 1;
    std::fs::write(&p, &bytes).unwrap();
    assert!(DrawsFile::read(&p).is_err());
}

#[test]
fn basis_below_minimum_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(run(&["simulate", "--I", "60", "--out-dir", d]), EXIT_OK);
    let subjects = path(dir.path(), cli::SUBJECTS_FILE);
    let episodes = path(dir.path(), cli::EPISODES_FILE);
    let args = [
        "fit",
        "--subjects",
        &subjects,
        "--episodes",
        &episodes,
        "--K",
        "5",
        "--out-dir",
        d,
    ];
    assert_eq!(run(&args), EXIT_INVALID);
    let cli =
        <cli::Cli as clap::Parser>::try_parse_from(std::iter::once("flame").chain(args)).unwrap();
    let err = cli::run(&cli).unwrap_err();
    assert!(matches!(err, CliError::Model(_)));
    assert!(err.to_string().contains("minimum of 6"), "{err}");
}

#[test]
fn missing_input_file_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let missing = path(dir.path(), "nope.csv");
    assert_eq!(
        run(&[
            "fit",
            "--subjects",
            &missing,
            "--episodes",
            &missing,
            "--out-dir",
            d
        ]),
        EXIT_IO
    );
    let bad = write(
        dir.path(),
        "bad.json",
        r#"{"model": {"basis_size": 12, "colour": 1}}"#,
    );
    assert_eq!(
        run(&[
            "fit",
            "--subjects",
            &missing,
            "--episodes",
            &missing,
            "--config",
            &bad
        ]),
        EXIT_INVALID
    );
}

#[test]
fn pipeline_smoke() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(
        run(&[
            "simulate",
            "--shape",
            "linear",
            "--event-rate",
            "30",
            "--I",
            "200",
            "--seed",
            "7",
            "--out-dir",
            d,
        ]),
        EXIT_OK
    );
    let subjects = path(dir.path(), cli::SUBJECTS_FILE);
    let episodes = path(dir.path(), cli::EPISODES_FILE);
    let code = run(&[
        "fit",
        "--subjects",
        &subjects,
        "--episodes",
        &episodes,
        "--seed",
        "7",
        "--chains",
        "2",
        "--warmup",
        "250",
        "--samples",
        "250",
        "--out-dir",
        d,
    ]);
    assert!(
        code == EXIT_OK || code == EXIT_UNHEALTHY,
        "fit exited {code}"
    );
    let draws = path(dir.path(), cli::DRAWS_FILE);
    let code = run(&["summarize", "--draws", &draws, "--out-dir", d]);
    assert!(
        code == EXIT_OK || code == EXIT_UNHEALTHY,
        "summarize exited {code}"
    );

    // The true RAF reaches 0.65 at 30 minutes.
    let raf = std::fs::read_to_string(dir.path().join(cli::RAF_FILE)).unwrap();
    let last: Vec<f64> = raf
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(last[0], 30.0);
    assert!(last[2] <= 0.65 && 0.65 <= last[3], "f(30) band {last:?}");
    let diag: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join(cli::DIAGNOSTICS_FILE)).unwrap(),
    )
    .unwrap();
    assert!(diag["max_rhat"].as_f64().unwrap() >= 1.0);

    let scenarios = write(
        dir.path(),
        "sc.json",
        r#"[
  {"label": "A", "covariate_profile": [1, 0]},
  {"label": "B", "episode_durations": [1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1], "covariate_profile": [1, 0]},
  {"label": "C", "episode_durations": [30], "covariate_profile": [1, 0]}
]"#,
    );
    assert_eq!(
        run(&[
            "contrast",
            "--draws",
            &draws,
            "--scenarios",
            &scenarios,
            "--out-dir",
            d
        ]),
        EXIT_OK
    );
    let result: ContrastResult = io::read_json(&dir.path().join(cli::CONTRAST_FILE)).unwrap();
    assert_eq!(result.scenarios.len(), 3);
    assert_eq!(result.differences.len(), 1);
    assert_eq!(result.differences[0].first, "B");
    assert_eq!(result.differences[0].second, "C");

    // Pairs out of range and stale draws are both refused.
    assert_eq!(
        run(&[
            "contrast",
            "--draws",
            &draws,
            "--scenarios",
            &scenarios,
            "--pairs",
            "1:4"
        ]),
        EXIT_INVALID
    );
    assert_eq!(
        run(&["summarize", "--draws", &draws, "--K", "20", "--out-dir", d]),
        EXIT_INVALID
    );
    assert_eq!(
        run(&[
            "contrast",
            "--draws",
            &draws,
            "--scenarios",
            &scenarios,
            "--domain-max",
            "60"
        ]),
        EXIT_INVALID
    );
    // Restating the spec the draws were fitted under is accepted.
    assert_eq!(
        run(&[
            "contrast",
            "--draws",
            &draws,
            "--scenarios",
            &scenarios,
            "--K",
            "30",
            "--out-dir",
            d
        ]),
        EXIT_OK
    );
}

#[test]
fn fit_domain_defaults_to_longest_episode() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(
        run(&["simulate", "--I", "60", "--seed", "2", "--out-dir", d]),
        EXIT_OK
    );
    let episodes = path(dir.path(), cli::EPISODES_FILE);
    let mut body = std::fs::read_to_string(&episodes).unwrap();
    body.push_str("1,500,42.5\n");
    std::fs::write(&episodes, body).unwrap();
    let subjects = path(dir.path(), cli::SUBJECTS_FILE);
    let fit_args = |extra: &[&'static str]| {
        let mut a = vec![
            "fit",
            "--subjects",
            &subjects,
            "--episodes",
            &episodes,
            "--chains",
            "2",
            "--warmup",
            "100",
            "--samples",
            "20",
            "--K",
            "8",
            "--out-dir",
            d,
        ];
        a.extend_from_slice(extra);
        run(&a)
    };
    let draws = dir.path().join(cli::DRAWS_FILE);
    assert_ne!(fit_args(&[]), EXIT_INVALID);
    assert_eq!(DrawsFile::read(&draws).unwrap().model.domain_hi, 43.0);
    let draws_arg = draws.to_str().unwrap();
    assert_ne!(
        run(&[
            "summarize",
            "--draws",
            draws_arg,
            "--K",
            "8",
            "--out-dir",
            d
        ]),
        EXIT_INVALID
    );
    assert_eq!(
        run(&[
            "summarize",
            "--draws",
            draws_arg,
            "--K",
            "9",
            "--out-dir",
            d
        ]),
        EXIT_INVALID
    );

    // An explicit domain that leaves an episode outside is a validation error.
    assert_eq!(fit_args(&["--domain-max", "40"]), EXIT_INVALID);
}
