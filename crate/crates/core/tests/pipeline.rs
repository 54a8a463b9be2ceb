use lora_landscape::experiments::{self, SweepConfig};
use lora_landscape::landscape::{self, Classification, Tolerances};
use lora_landscape::optimizer::{self, TrainConfig};
use lora_landscape::synthetic::{self, gen_instance, gen_operator, LossKind};

#[test]
fn saved_instance_trains_to_the_same_classified_points() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_instance(gen_operator(8, 8, 2, 6, 3).unwrap(), 1, 0.01, LossKind::Mse, 3).unwrap();
    synthetic::save_instance(&inst, dir.path()).unwrap();
    let back = synthetic::load_instance(dir.path()).unwrap();
    assert_eq!(inst, back);

    let cfg = TrainConfig { seeds: vec![0, 1, 2, 3], ..TrainConfig::default() };
    let a = optimizer::multi_seed(&inst, &cfg, LossKind::Mse).unwrap();
    let b = optimizer::multi_seed(&back, &cfg, LossKind::Mse).unwrap();
    assert_eq!(a, b);

    // ρ = 15/12 > 1: every converged run should be a global minimum
    let floor = optimizer::best_data_loss(&a).unwrap();
    let tol = Tolerances::default();
    for run in &a {
        let analysis = landscape::analyze_point(&inst, &run.point, LossKind::Mse, &tol).unwrap();
        let report = landscape::classify(analysis, run.converged, floor, &tol);
        assert_eq!(report.classification, Classification::GlobalMin, "seed {}", run.seed);
    }
}

#[test]
fn tiny_sweep_finds_a_boundary_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig { kn_grid: vec![8], seeds_per_cell: 6, ..SweepConfig::default() };
    let first = experiments::boundary_sweep(&cfg, Some(dir.path())).unwrap();
    let b = first.boundary(8).expect("boundary at KN = 8");
    assert!(b.cstar > 0.8 && b.cstar <= 2.2);
    let again = experiments::boundary_sweep(&cfg, Some(dir.path())).unwrap();
    assert_eq!(first, again);
    assert!(first.summary_tsv().starts_with("KN\tCstar\tc_emp"));
}
