use std::fmt::Write as _;
use std::path::Path;

use vfmodel::config::{Args, RunConfig};
use vfmodel::error::CliError;
use vfmodel::io::artifacts::{read_pool, write_pool};
use vfmodel::io::records::{ingest, instrument_index, write_records};
use vfmodel::io::truth::{read_truth, write_truth};
use vfmodel_core::distributions::RngStream;
use vfmodel_core::simulate::{simulate, SimulationLayout, TruthConfig};
use vfmodel_core::stage1::{PoolDraw, SamplePool};
use vfmodel_core::ModelVariant;

const HEADER: &str = "patient_id,eye,visit,years,location,sensitivity_db,reliable\n";

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn zero_reading_is_censored_and_times_start_at_the_first_visit() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{HEADER}A,OD,1,3.0,1,0,1\nA,OD,2,3.5,1,21.5,1\n");
    let ing = ingest(&write(dir.path(), "d.csv", &text)).unwrap();
    let obs = &ing.data[0].observations;
    assert!(obs[0].censored && obs[0].observed_db == 0.0);
    assert!(!obs[1].censored);
    assert_eq!((obs[0].years, obs[1].years), (0.0, 0.5));

    let dated = "patient_id,eye,visit,date,location,sensitivity_db\nB,OS,1,2020-01-01,5,20\nB,OS,2,2020-07-02,5,19\n";
    let ing = ingest(&write(dir.path(), "e.csv", dated)).unwrap();
    let t = ing.data[0].observations[1].years;
    assert!((t - 0.5).abs() < 0.01, "{t}");
}

#[test]
fn unreliable_field_and_blind_spot_rows_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from(HEADER);
    for visit in 1..=3 {
        let reliable = if visit == 2 { 0 } else { 1 };
        for loc in 1..=54 {
            writeln!(
                text,
                "A,OD,{visit},{},{loc},25,{reliable}",
                0.5 * (visit - 1) as f64
            )
            .unwrap();
        }
    }
    let ing = ingest(&write(dir.path(), "d.csv", &text)).unwrap();
    assert_eq!(ing.data[0].observations.len(), 2 * 52);
    assert_eq!(ing.dropped_unreliable, 54);
    assert_eq!(ing.dropped_blind_spot, 2 * 2);
    assert!(ing.data[0].observations.iter().all(|o| o.visit != 2));
}

#[test]
fn malformed_and_duplicate_rows_name_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = format!("{HEADER}A,OD,1,0,1,20,1\nA,OD,1,0,2,abc,1\n");
    match ingest(&write(dir.path(), "bad.csv", &bad)) {
        Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let dup = format!("{HEADER}A,OD,1,0,1,20,1\nA,OD,2,0.5,1,20,1\nA,OD,1,0,1,21,1\n");
    match ingest(&write(dir.path(), "dup.csv", &dup)) {
        Err(CliError::Parse { line, msg, .. }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("duplicate"));
        }
        other => panic!("{other:?}"),
    }
    let range = format!("{HEADER}A,OD,1,0,1,51,1\n");
    assert!(matches!(
        ingest(&write(dir.path(), "r.csv", &range)),
        Err(CliError::Parse { line: 2, .. })
    ));
    let short = format!("{HEADER}A,OD,1,0,1\n");
    assert!(matches!(
        ingest(&write(dir.path(), "s.csv", &short)),
        Err(CliError::Parse { line: 2, .. })
    ));
}

#[test]
fn simulated_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let truth = TruthConfig::model3();
    let sim = simulate(
        &truth,
        &SimulationLayout::new(4, 5),
        &mut RngStream::new(81, 0).rng(),
    )
    .unwrap();
    let path = dir.path().join("data.csv");
    write_records(&path, &sim.data).unwrap();
    let ing = ingest(&path).unwrap();
    assert_eq!(ing.data.len(), sim.data.len());
    assert_eq!(ing.dropped_blind_spot, 0);
    for (a, b) in ing.data.iter().zip(&sim.data) {
        assert_eq!(a.individual_id, b.individual_id);
        assert_eq!(a.observations.len(), b.observations.len());
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(
                (x.eye, x.visit, x.hemifield, x.location),
                (y.eye, y.visit, y.hemifield, y.location)
            );
            assert_eq!(x.censored, y.censored);
            assert_eq!(x.years.to_bits(), y.years.to_bits());
            assert_eq!(x.observed_db.to_bits(), y.observed_db.to_bits());
        }
    }
    assert!((1..=2)
        .all(|h| (1..=26).all(|l| instrument_index(h, l) != 26 && instrument_index(h, l) != 35)));

    let tpath = dir.path().join("truth.txt");
    write_truth(&tpath, &sim.truth, &sim.data).unwrap();
    let back = read_truth(&tpath).unwrap();
    assert_eq!(back.config, truth);
    let key = "P002.lambda1_e2h1l26";
    let design = vfmodel_core::Design::new(&sim.data[1]).unwrap();
    let slot = design
        .effect_names(true)
        .iter()
        .position(|n| n == "lambda1_e2h1l26")
        .unwrap();
    assert_eq!(
        back.effects[key],
        sim.truth.individuals[1].effects.to_flat(true)[slot]
    );
}

#[test]
fn pools_are_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(82, 0).rng();
    let draws: Vec<PoolDraw> = (0..50)
        .map(|_| {
            let mut u = || vfmodel_core::distributions::uniform(&mut rng);
            PoolDraw {
                alpha: [20.0 * u(), -u() / 3.0],
                beta_star: Some([2.0 + u(), -0.1 * u()]),
                c_gamma: [u() + 1e-9, u() - 0.5, 1e-300 + u()],
                c_eta: [1.0 / 3.0, 2.0f64.sqrt(), std::f64::consts::PI],
                c_lambda: [u(), 1e-17, u() * 1e12],
                sigma2_phi: Some(u() + 0.1),
                sigma2: None,
            }
        })
        .collect();
    let pool = SamplePool::new("P009", ModelVariant::Model3, draws).unwrap();
    write_pool(dir.path(), &pool).unwrap();
    let back = read_pool(dir.path(), "P009", ModelVariant::Model3).unwrap();
    assert_eq!(back, pool);
    assert!(read_pool(dir.path(), "P009", ModelVariant::Model1).is_err());
}

#[test]
fn flags_win_over_the_configuration_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(
        dir.path(),
        "run.cfg",
        "# defaults\nmodel = 2\nseed = 5\nburn_in = 300\nout = from-file\n",
    );
    let args = Args {
        seed: Some(9),
        config: Some(file.clone()),
        ..Args::default()
    };
    let cfg = RunConfig::resolve(&args).unwrap();
    assert_eq!(cfg.model, Some(ModelVariant::Model2));
    assert_eq!(cfg.seed, Some(9));
    assert_eq!(cfg.burn_in, Some(300));
    assert_eq!(cfg.out.as_deref(), Some(Path::new("from-file")));

    let unknown = write(dir.path(), "bad.cfg", "colour = blue\n");
    let err = RunConfig::resolve(&Args {
        config: Some(unknown),
        ..Args::default()
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert_eq!(
        RunConfig::resolve(&Args {
            individuals: Some(0),
            ..Args::default()
        })
        .unwrap_err()
        .exit_code(),
        1
    );
}

#[test]
fn exit_codes_follow_the_error_class() {
    use vfmodel_core::Error;
    assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
    assert_eq!(CliError::Model(Error::Config("x".into())).exit_code(), 1);
    assert_eq!(CliError::Artifact("x".into()).exit_code(), 2);
    assert_eq!(
        CliError::Model(Error::NonFinite {
            context: "x".into()
        })
        .exit_code(),
        3
    );
    assert_eq!(CliError::Model(Error::NotPositiveDefinite).exit_code(), 3);
}
