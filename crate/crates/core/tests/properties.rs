use proptest::prelude::*;
use ttsa::batch::{map_indexed, Execution};
use ttsa::engine::{self, RunConfig};
use ttsa::flows;
use ttsa::noise::NoiseSpec;
use ttsa::schedules::{clock, SchedulePair};
use ttsa::trajectories::{tracking_error_fast, weighted_noise_sup, Timescale};

fn noisy_run(name: &str, sigma: f64, seed: u64, steps: u64) -> engine::Trace {
    let sys = flows::lookup(name).unwrap();
    let rc = RunConfig::new(sys.x0.clone(), sys.y0.clone(), steps)
        .with_noise(NoiseSpec::gaussian(sigma, seed), NoiseSpec::gaussian(sigma, seed + 1_000_000));
    engine::run(&sys.system, &rc).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tracking_error_equals_weighted_noise(
        seed in 0u64..1000,
        sigma in 0.0f64..0.3,
        s in 0.0f64..20.0,
        horizon in 0.5f64..5.0,
        which in 0usize..3,
    ) {
        let name = ["flat-box", "dual-qp", "contraction"][which];
        let trace = noisy_run(name, sigma, seed, 3000);
        let pair = SchedulePair::default();
        let e = tracking_error_fast(&trace, s, horizon).unwrap();
        let d = weighted_noise_sup(&trace, &pair.fast, Timescale::Fast, s, horizon).unwrap();
        prop_assert!((e - d).abs() <= 1e-12 * (1.0 + d), "{e} vs {d}");
    }

    #[test]
    fn csv_round_trip_preserves_states_and_noise(seed in 0u64..1000) {
        let trace = noisy_run("dual-qp", 0.1, seed, 200);
        let mut buf = Vec::new();
        engine::write_csv(&trace, &mut buf).unwrap();
        let back = engine::read_csv(buf.as_slice(), &SchedulePair::default()).unwrap();
        prop_assert_eq!(back.records.len(), trace.records.len());
        for (a, b) in trace.records.iter().zip(&back.records) {
            prop_assert_eq!(a.n, b.n);
            prop_assert_eq!(&a.x, &b.x);
            prop_assert_eq!(&a.y, &b.y);
            prop_assert!((a.t - b.t).abs() < 1e-12);
        }
        // The fast noise is recovered from consecutive states.
        for (a, b) in trace.records.iter().zip(&back.records).take(back.records.len() - 1) {
            prop_assert!((a.m1[0] - b.m1[0]).abs() < 1e-9, "{} vs {}", a.m1[0], b.m1[0]);
        }
    }
}

#[test]
fn record_clocks_match_schedule_sums() {
    let trace = noisy_run("contraction", 0.0, 0, 500);
    let pair = SchedulePair::default();
    for r in trace.records.iter().step_by(50) {
        assert!((r.t - clock(&pair.fast, r.n)).abs() < 1e-12);
        assert!((r.s - clock(&pair.slow, r.n)).abs() < 1e-12);
    }
}

#[test]
fn parallel_and_sequential_batches_agree() {
    let run = |i: usize| {
        let t = noisy_run("flat-box", 0.05, i as u64, 2000);
        (t.last().x.clone(), t.last().y.clone())
    };
    assert_eq!(map_indexed(Execution::Parallel, 6, run), map_indexed(Execution::Sequential, 6, run));
}
