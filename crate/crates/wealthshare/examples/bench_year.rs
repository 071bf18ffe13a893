use std::time::Instant;
use wealthshare::model::{ModelParams, Simulation};

fn main() {
    for (label, p, r) in [("critical", 0.0, 0.0), ("active", 0.045, 0.0), ("field", 0.0, 2.061153622438558e-9)] {
        let mut params = ModelParams::new(1000, 0.1, p).unwrap();
        params.redistribution = r;
        let mut sim = Simulation::new(params, 12345, 0).unwrap();
        let years = 50_000u64;
        let t0 = Instant::now();
        for _ in 0..years {
            sim.advance_year().unwrap();
        }
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "{label}: {:.1} ns/agent-year (top {:.6})",
            dt / (years as f64 * 1000.0) * 1e9,
            sim.top_share()
        );
    }
}
