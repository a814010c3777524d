use std::fs;

use mcs_core::gmm::toy;
use mcs_core::grid::ImageGrid;
use mcs_core::guidance::{StepRecord, Trajectory};
use mcs_core::harness::*;
use mcs_core::pgm::write_pgm;
use mcs_core::rng::SeededRng;

fn config(extra: &str) -> ExperimentConfig {
    let text = format!(
        "prior = \"builtin:collision16\"\noperator = \"avgpool:s=8\"\n{extra}"
    );
    ExperimentConfig::from_toml_str(&text, None).unwrap()
}

#[test]
fn seed_list_forms() {
    assert_eq!("3..6".parse::<SeedList>().unwrap().as_slice(), &[3, 4, 5]);
    assert_eq!("3..=6".parse::<SeedList>().unwrap().as_slice(), &[3, 4, 5, 6]);
    assert_eq!("7, 1,2".parse::<SeedList>().unwrap().as_slice(), &[7, 1, 2]);
    for bad in ["5..5", "6..=5", "1,1", "", "a..b", "1,x"] {
        assert!(bad.parse::<SeedList>().is_err(), "{bad}");
    }
    let cfg = config("seeds = [4, 2]\n");
    assert_eq!(cfg.seeds.as_slice(), &[4, 2]);
}

#[test]
fn config_defaults_and_rejections() {
    let cfg = config("seeds = \"0..2\"\n");
    assert_eq!(cfg.sampler, SamplerKind::Mcs);
    assert_eq!(cfg.condition, "null");
    assert_eq!(cfg.snapshot_stride, 5);
    assert_eq!(cfg.schedule.steps, 150);
    assert_eq!(cfg.guidance.boundary, 0.6);
    let round = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), None).unwrap();
    assert_eq!(round, cfg);

    let base = "prior = \"builtin:collision16\"\noperator = \"avgpool:s=8\"\nseeds = \"0..2\"\n";
    for extra in [
        "colour = 1\n",
        "[guidance]\netaa = 1.0\n",
        "[guidance]\nboundary = 1.5\n",
        "[degradation]\nmode = \"manifest\"\n",
        "snapshot_stride = 0\n",
        "condition = \"\"\nseeds = []\n",
    ] {
        let text = format!("{base}{extra}");
        assert!(ExperimentConfig::from_toml_str(&text, None).is_err(), "{extra}");
    }
    let missing = "prior = \"nope.toml\"\noperator = \"identity\"\nseeds = \"0..1\"\n";
    assert!(ExperimentConfig::from_toml_str(missing, None).is_err());
    // unknown labels surface when the experiment is built
    let cfg = config("seeds = \"0..1\"\ncondition = \"hat\"\n");
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn zero_guidance_report_matches_unguided() {
    let guided = config("seeds = [7]\ncondition = \"plain\"\n[guidance]\neta_forward = 0.0\neta_reverse = 0.0\n");
    let mut plain = guided.clone();
    plain.sampler = SamplerKind::Unguided;
    let a = run_experiment(&guided).unwrap();
    let b = run_experiment(&plain).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.aggregates, b.aggregates);
}

#[test]
fn artifacts_are_deterministic() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = config("seeds = \"0..3\"\ncondition = \"glasses\"\n");
        cfg.output_dir = Some(d.path().to_path_buf());
        run_experiment(&cfg).unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        let a = fs::read(dirs[0].path().join(&n)).unwrap();
        let b = fs::read(dirs[1].path().join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn report_integrity() {
    let report = run_experiment(&config("seeds = \"0..6\"\n")).unwrap();
    assert!(report.is_consistent());
    let a = &report.aggregates;
    assert!((0.0..=1.0).contains(&a.response_rate));
    assert_eq!(a.label_counts.values().sum::<usize>(), 6);
    assert!(a.mean_psnr.is_some() && a.oracle_response_rate.is_some());
    let back = RunReport::from_json(&report.to_json()).unwrap();
    assert_eq!(back, report);
    let mut tampered = report.clone();
    tampered.aggregates.response_rate = 0.123;
    assert!(!tampered.is_consistent());
}

#[test]
fn trajectory_csv_round_trip_and_stats() {
    let exp = Experiment::new(&config("seeds = [3]\n")).unwrap();
    let (_, outs) = exp.run().unwrap();
    let traj = &outs[0].trajectory;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_trajectory_csv(&path, traj, (16, 16)).unwrap();
    let back = read_trajectory_csv(&path).unwrap();
    assert_eq!(&back, traj);
    let live = trajectory_stats(traj).unwrap();
    let dumped = trajectory_stats(&back).unwrap();
    assert_eq!(live, dumped);
    assert_eq!(live.len(), 31);
    assert_eq!(live.last().unwrap().variance, 0.0);
    assert!(live[0].step_variance.is_none() && live[1].step_variance.is_some());
    let csv = stats_csv(&live);
    assert_eq!(csv.lines().count(), 32);
    assert!(csv.starts_with("t,variance,pixel_variance,step_variance,vhd_energy,loss"));
}

#[test]
fn constant_trajectory_stats_vanish() {
    let mut traj = Trajectory::new(1);
    for t in (1..=4).rev() {
        traj.steps.push(StepRecord {
            t,
            measurement: None,
            loss: 0.0,
            grad_norm: 0.0,
            xhat: Some(ImageGrid::constant(4, 4, 0.1 * t as f64)),
        });
    }
    for row in trajectory_stats(&traj).unwrap() {
        assert_eq!(row.variance, 0.0);
        assert_eq!(row.pixel_variance, 0.0);
        assert!(row.vhd_energy < 1e-30);
    }
    assert!(trajectory_stats(&Trajectory::new(5)).is_err());
}

#[test]
fn malformed_trajectories_are_rejected() {
    assert!(parse_trajectory_csv("").is_err());
    assert!(parse_trajectory_csv("# height=2 width=2\nt,m,l,g\n").is_err());
    let text = "# height=1 width=2 stride=1\nt,measurement,loss,grad_norm,pixels...\n1,,0.0,0.0,0.5\n";
    assert!(parse_trajectory_csv(text).is_err());
    let ok = "# height=1 width=2 stride=1\nt,measurement,loss,grad_norm,pixels...\n1,reverse,0.5,0.25,0.5,0.75\n";
    let traj = parse_trajectory_csv(ok).unwrap();
    assert_eq!(traj.steps[0].xhat.as_ref().unwrap().values(), &[0.5, 0.75]);
}

#[test]
fn single_point_sweep_equals_run() {
    let cfg = config("seeds = \"0..4\"\ncondition = \"glasses\"\n");
    let rows = sweep(&cfg, SweepAxis::Boundary, &["0.6".to_string()]).unwrap();
    let a = run_experiment(&cfg).unwrap().aggregates;
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].response_rate, a.response_rate);
    assert_eq!(rows[0].mean_residual, a.mean_residual);
    assert_eq!(rows[0].quality, a.mean_oracle_log_density);
    assert!(sweep(&cfg, SweepAxis::Boundary, &[]).is_err());
    assert!(sweep(&cfg, SweepAxis::Boundary, &["1.2".to_string()]).is_err());
}

#[test]
fn ratio_and_grid_parsing() {
    assert_eq!(parse_ratio("1.5/1").unwrap(), (1.5, 1.0));
    assert_eq!(parse_ratio("2").unwrap(), (2.0, 1.0));
    assert!(parse_ratio("a/b").is_err());
    assert!(parse_ratio("-1/1").is_err());
    assert_eq!(parse_grid("2/1, 1/2").unwrap(), vec!["2/1", "1/2"]);
    assert!(parse_grid(" , ").is_err());
    assert!("sideways".parse::<SweepAxis>().is_err());
}

#[test]
fn manifest_round_trip() {
    let line = "face_001.pgm,2.5,8,3.25,77,42";
    let e: ManifestEntry = line.parse().unwrap();
    assert_eq!(e.to_string(), line);
    assert!("a,b".parse::<ManifestEntry>().is_err());
}

#[test]
fn synthetic_and_manifest_modes() {
    let text = "prior = \"builtin:collision16\"\noperator = \"degradation\"\nseeds = \"0..3\"\n\
                [degradation]\nmode = \"synthetic\"\nscale = 8\nquality = 90\n";
    let cfg = ExperimentConfig::from_toml_str(text, None).unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.psnr.is_some() && r.oracle_log_density.is_none()));

    // degrade a couple of ground-truth images, then sample from the manifest
    let dir = tempfile::tempdir().unwrap();
    let gt_dir = dir.path().join("gt");
    fs::create_dir_all(&gt_dir).unwrap();
    let prior = toy::collision_prior();
    let mut rng = SeededRng::new(1);
    for name in ["b.pgm", "a.pgm"] {
        let img = prior.sample(&mut rng).0.clamp(0.0, 1.0);
        write_pgm(&gt_dir.join(name), &img).unwrap();
    }
    let lq_dir = dir.path().join("lq");
    let inputs = list_pgm_inputs(&gt_dir).unwrap();
    let entries = degrade_batch(&inputs, &lq_dir, 8, 5, Some("q=95")).unwrap();
    assert_eq!(entries[0].filename, "a.pgm");
    assert_eq!(entries[0].spec.seed, 5);
    assert_eq!(entries[1].spec.seed, 4);
    assert!(entries.iter().all(|e| e.spec.quality == 95));
    assert_eq!(read_manifest(&lq_dir.join("manifest.csv")).unwrap(), entries);

    let text = "prior = \"builtin:collision16\"\noperator = \"degradation\"\nseeds = [0, 1]\n\
                [degradation]\nmode = \"manifest\"\nmanifest = \"lq/manifest.csv\"\n";
    let cfg = ExperimentConfig::from_toml_str(text, Some(dir.path())).unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.rows[0].input.as_deref(), Some("a.pgm"));
    assert!(report.rows.iter().all(|r| r.psnr.is_none() && r.gt_residual.is_none()));
}

#[test]
fn prior_files_load_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pair.toml"), toy::pair_2x2().to_toml_string()).unwrap();
    let text = "prior = \"pair.toml\"\noperator = \"avgpool:s=2\"\nseeds = \"0..2\"\ncondition = \"A\"\n";
    let cfg_path = dir.path().join("exp.toml");
    fs::write(&cfg_path, text).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
}
