//! Temporary diagnostic — deleted before commit.

use fid_core::{run_point, ExperimentConfig, Mode, Outcome, ScenarioConfig, ScenarioKind};

fn ls_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xm = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - xm) * (p.0 - xm)).sum();
    sxy / sxx
}

#[test]
fn probe_satellite_modes() {
    for mode in [Mode::Passive, Mode::Active] {
        let mut pts = Vec::new();
        for (i, window) in [5usize, 10, 25, 50].into_iter().enumerate() {
            let mut scenario = ScenarioConfig::default_for(ScenarioKind::MarsSatellite);
            scenario.horizon = (16 * window).div_ceil(10);
            let cfg = ExperimentConfig {
                name: "probe_sat".into(),
                mode,
                scenario,
                windows: vec![window],
                noise_scales: vec![1.0],
                trials: 150,
                grid_per_axis: 5,
                master_seed: 0x5a7e_11e7,
                ..ExperimentConfig::default()
            };
            let (m, _) = run_point(&cfg, window, 1.0, 1000 + i as u64).expect("point");
            println!(
                "{mode} N={window:>2} K={:>2}: failure {:.3} (modeled {}, unmodeled {}), nulls {}, correct {}, avg_delay {:?}",
                cfg.scenario.horizon, m.failure_rate, m.failures_modeled, m.failures_unmodeled, m.nulls, m.correct, m.avg_delay
            );
            if let Some(d) = m.avg_delay {
                pts.push((window as f64, d));
            }
        }
        if pts.len() == 4 {
            println!("{mode} slope: {:.4}", ls_slope(&pts));
        } else {
            println!("{mode} slope: UNDEFINED ({} points)", pts.len());
        }
    }
}

#[test]
fn probe_two_tank_delay_stragglers() {
    for mode in [Mode::Passive, Mode::Active] {
        for (i, window) in [5usize, 10, 25, 50].into_iter().enumerate() {
            let cfg = ExperimentConfig {
                name: "probe_tank_delay".into(),
                mode,
                scenario: ScenarioConfig::default_for(ScenarioKind::TwoTank),
                windows: vec![window],
                noise_scales: vec![1.0],
                trials: 500,
                master_seed: 0x5eed_2026,
                ..ExperimentConfig::default()
            };
            let (m, results) = run_point(&cfg, window, 1.0, 2000 + i as u64).expect("point");
            let excesses: Vec<usize> = results
                .iter()
                .filter_map(|r| r.delay)
                .map(|d| d - (window - 1))
                .filter(|&e| e > 0)
                .collect();
            println!(
                "{mode} N={window:>2}: avg_delay {:?}, {} stragglers {:?} (failure {:.3})",
                m.avg_delay,
                excesses.len(),
                &excesses[..excesses.len().min(12)],
                m.failure_rate
            );
        }
    }
}

#[test]
fn probe_unmodeled_two_tank() {
    let mut scenario = ScenarioConfig::default_for(ScenarioKind::TwoTank);
    scenario.pi_star = 0.0;
    let cfg = ExperimentConfig {
        name: "probe".into(),
        scenario,
        windows: vec![50],
        noise_scales: vec![1.0],
        trials: 200,
        alpha: 0.05,
        no_renorm: true,
        master_seed: 0xab1a_7e5,
        ..ExperimentConfig::default()
    };
    let (metrics, results) = run_point(&cfg, 50, 1.0, 0).expect("point");
    println!(
        "unmodeled-only: failure {:.3}, nulls {}, identified {}",
        metrics.failure_rate, metrics.nulls, metrics.identified
    );
    let mut by_orifice = std::collections::BTreeMap::<String, (usize, usize, Vec<usize>)>::new();
    for r in &results {
        let entry = by_orifice.entry(r.truth_label.clone()).or_default();
        entry.1 += 1;
        if let Outcome::Identified(m) = r.decision.outcome {
            entry.0 += 1;
            entry.2.push(m);
        }
    }
    for (label, (ident, total, whos)) in &by_orifice {
        let mut counts = [0usize; 4];
        for &w in whos {
            counts[w] += 1;
        }
        println!(
            "{label}: {ident}/{total} identified, picks by hypothesis {counts:?}"
        );
    }
    let delays: Vec<usize> = results.iter().filter_map(|r| r.delay).collect();
    if !delays.is_empty() {
        let mean = delays.iter().sum::<usize>() as f64 / delays.len() as f64;
        let max = delays.iter().max().unwrap();
        println!("identification delays: mean {mean:.1}, max {max}");
    }
}
