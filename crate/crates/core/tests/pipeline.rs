use cdgd_core::bilevel::{run_cdgd, InnerConfig, Mode, OuterConfig};
use cdgd_core::datalab::sphere_problem;
use cdgd_core::detect::{cdgd_alpha, cdgd_t, sc_baseline, score, sn_baseline, TrainConfig};
use cdgd_core::modelzoo::{MlpSpec, TapeOnly};

fn small() -> (InnerConfig, OuterConfig) {
    (InnerConfig { steps: 30, ..InnerConfig::default() }, OuterConfig { steps: 8, ..OuterConfig::default() })
}

#[test]
fn weights_stay_in_range_and_runs_repeat() {
    let (noisy, clean) = sphere_problem(2, 40, 10, 0.4, 11).unwrap();
    let spec = MlpSpec::binary(2, vec![16]);
    let (inner, outer) = small();
    let a = run_cdgd(&noisy, &clean, &spec, &inner, &outer, Mode::Full, 5).unwrap();
    let b = run_cdgd(&noisy, &clean, &spec, &inner, &outer, Mode::Full, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 8);
    assert!(a.alpha.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.alpha.iter().any(|&v| v < 1.0));
    assert_eq!(a.peak_segments, 30);
}

#[test]
fn generic_path_gives_the_same_run() {
    let (noisy, clean) = sphere_problem(3, 24, 6, 0.25, 2).unwrap();
    let spec = MlpSpec::binary(3, vec![8]);
    let (inner, outer) = small();
    let fused = run_cdgd(&noisy, &clean, &spec, &inner, &outer, Mode::Full, 1).unwrap();
    let tape = run_cdgd(&noisy, &clean, &TapeOnly(spec), &inner, &outer, Mode::Full, 1).unwrap();
    for (x, y) in fused.alpha.iter().zip(&tape.alpha) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

#[test]
fn truncation_caps_checkpoints() {
    let (noisy, clean) = sphere_problem(2, 40, 10, 0.4, 4).unwrap();
    let spec = MlpSpec::binary(2, vec![16]);
    let (inner, outer) = small();
    let run = run_cdgd(&noisy, &clean, &spec, &inner, &outer, Mode::Truncated { window: Some(5) }, 3).unwrap();
    assert_eq!(run.peak_segments, 5);
    let per_epoch = run_cdgd(&noisy, &clean, &spec, &inner, &outer, Mode::Truncated { window: None }, 3).unwrap();
    assert_eq!(per_epoch.peak_segments, 1);
}

#[test]
fn all_four_detectors_produce_scores() {
    let (noisy, clean) = sphere_problem(2, 60, 15, 0.3, 8).unwrap();
    let truth = noisy.truth_mask();
    let spec = MlpSpec::binary(2, vec![16]);
    let (inner, outer) = small();
    let run = run_cdgd(&noisy, &clean, &spec, &inner, &outer, Mode::Full, 8).unwrap();
    let cfg = TrainConfig { epochs: 40, ..TrainConfig::default() };
    let masks = [
        cdgd_alpha(&run.alpha, 0.5),
        cdgd_t(&noisy, &run.alpha, &clean, &spec, &cfg, 8).unwrap(),
        sn_baseline(&noisy, &clean, &spec, &cfg, 8).unwrap(),
        sc_baseline(&clean, &noisy, &spec, &cfg, 8).unwrap(),
    ];
    for mask in &masks {
        assert_eq!(mask.len(), noisy.len());
        let s = score(mask, &truth).unwrap();
        assert!((0.0..=1.0).contains(&s.f1));
    }
    // weights of one reproduce the noisy-set baseline
    let ones = cdgd_t(&noisy, &vec![1.0; noisy.len()], &clean, &spec, &cfg, 8).unwrap();
    assert_eq!(ones, masks[2]);
}
