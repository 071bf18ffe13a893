//! Run orchestration: replica loops with windowed observable accumulation,
//! trajectory recording, checkpoint/resume, parameter sweeps, and the CSV
//! emitters behind the three standard figures.

use crate::config::RunConfig;
use crate::csvio;
use crate::extprec::{f64_from_hex, f64_to_hex, ExtendedReal};
use crate::model::{
    field_to_redistribution, ModelError, RngState, ShareVector, Simulation,
};
use crate::stats::{
    fit_power_law, log_bin, order_parameter, FitPoint, FitResult, RankProfile, StatsError,
    TimeSeries,
};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Worker-count override for replica and sweep execution.
pub const WORKERS_ENV: &str = "WEALTHSHARE_WORKERS";

fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("worker pool")
    })
}

/// Record the trajectory every year early on, then 512 evenly spaced
/// samples per dyadic bin, keeping output bounded on long runs while the
/// log-binned statistics stay populated.
pub fn records_year(t: u64) -> bool {
    if t < (1 << 16) {
        true
    } else {
        let k = 63 - t.leading_zeros();
        t % (1u64 << (k - 9)) == 0
    }
}

/// One replica's reduced observables.
#[derive(Debug, Clone)]
pub struct ReplicaOutcome {
    /// Window mean of -ln share per configured rank.
    pub window_means: Vec<f64>,
    /// (year, sum of all shares but the richest).
    pub trajectory: TimeSeries,
}

/// A replica's live run state; drives the year loop and owns the window
/// accumulators so a checkpoint restores the run bit-exactly.
pub struct ReplicaRunner {
    config: RunConfig,
    replica: u32,
    sim: Simulation,
    window_sums: Vec<f64>,
    window_count: u64,
    trajectory: TimeSeries,
}

impl ReplicaRunner {
    pub fn new(config: &RunConfig, replica: u32) -> Result<Self, ExperimentError> {
        config
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let sim = Simulation::new(config.model.clone(), config.master_seed, replica as u64)?;
        Ok(Self {
            window_sums: vec![0.0; config.ranks.len()],
            window_count: 0,
            trajectory: TimeSeries::new(),
            config: config.clone(),
            replica,
            sim,
        })
    }

    /// First year (1-based) that enters the trailing averaging window.
    fn window_start(&self) -> u64 {
        let w = ((self.config.years as f64) * self.config.window_fraction).round() as u64;
        self.config.years - w.min(self.config.years)
    }

    pub fn year(&self) -> u64 {
        self.sim.year()
    }

    /// Advance to the given year, recording observables and checkpointing at
    /// the configured interval when a directory is given.
    pub fn advance_to(
        &mut self,
        target: u64,
        checkpoint_dir: Option<&Path>,
    ) -> Result<(), ExperimentError> {
        let window_start = self.window_start();
        while self.sim.year() < target {
            self.sim.advance_year()?;
            let t = self.sim.year();
            if t > window_start {
                for (acc, &rank) in self.window_sums.iter_mut().zip(&self.config.ranks) {
                    *acc += self.sim.neg_log_rank(rank);
                }
                self.window_count += 1;
            }
            if records_year(t) {
                self.trajectory.push(t, self.sim.residual_share()?)?;
            }
            if self.config.checkpoint_interval > 0
                && t % self.config.checkpoint_interval == 0
            {
                if let Some(dir) = checkpoint_dir {
                    self.write_checkpoint(&checkpoint_path(dir, self.replica))?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> ReplicaOutcome {
        let n = self.window_count.max(1) as f64;
        ReplicaOutcome {
            window_means: self.window_sums.iter().map(|s| s / n).collect(),
            trajectory: self.trajectory,
        }
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    /// Serialise the full run state: header, RNG position, window sums,
    /// trajectory, then one `hi lo` share pair per agent with the residual
    /// as an exact hexadecimal float literal.
    pub fn write_checkpoint(&self, path: &Path) -> Result<(), ExperimentError> {
        let rng = self.sim.rng_state();
        let mut out = String::new();
        let _ = writeln!(out, "wealthshare-checkpoint-v1");
        let _ = writeln!(out, "config_hash = {}", self.config.hash());
        let _ = writeln!(out, "replica = {}", self.replica);
        let _ = writeln!(out, "year = {}", self.sim.year());
        let seed_hex: String = rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "rng_seed = {seed_hex}");
        let _ = writeln!(out, "rng_stream = {}", rng.stream);
        let _ = writeln!(out, "rng_word_pos = {}", rng.word_pos);
        let _ = writeln!(out, "window_count = {}", self.window_count);
        let sums: Vec<String> = self.window_sums.iter().map(|&s| f64_to_hex(s)).collect();
        let _ = writeln!(out, "window_sums = {}", sums.join(","));
        let _ = writeln!(out, "trajectory_len = {}", self.trajectory.len());
        let _ = writeln!(out, "shares = {}", self.sim.shares().len());
        for &(t, v) in self.trajectory.points() {
            let _ = writeln!(out, "{t} {}", f64_to_hex(v));
        }
        for w in self.sim.shares() {
            let (hi, lo) = w.to_parts();
            let _ = writeln!(out, "{hi} {}", f64_to_hex(lo));
        }
        csvio::write_atomic(path, &out)?;
        Ok(())
    }

    /// Restore a run mid-flight. The checkpoint must match the config hash.
    pub fn resume(config: &RunConfig, path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |m: &str| ExperimentError::Checkpoint(m.to_string());
        if lines.next() != Some("wealthshare-checkpoint-v1") {
            return Err(bad("unknown checkpoint format"));
        }
        let mut kv = std::collections::HashMap::new();
        let mut header_lines = 0;
        for line in lines.by_ref() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
                header_lines += 1;
                if header_lines == 10 {
                    break;
                }
            } else {
                return Err(bad("truncated header"));
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| bad(&format!("missing {k}")))
        };
        if get("config_hash")? != config.hash() {
            return Err(ExperimentError::Checkpoint(
                "config hash differs from the running configuration".into(),
            ));
        }
        let replica: u32 = get("replica")?.parse().map_err(|_| bad("replica"))?;
        let year: u64 = get("year")?.parse().map_err(|_| bad("year"))?;
        let seed_hex = get("rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(bad("rng seed length"));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| bad("rng seed"))?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| bad("rng seed"))?;
        }
        let rng = RngState {
            seed,
            stream: get("rng_stream")?.parse().map_err(|_| bad("rng stream"))?,
            word_pos: get("rng_word_pos")?
                .parse()
                .map_err(|_| bad("rng word pos"))?,
        };
        let window_count: u64 = get("window_count")?
            .parse()
            .map_err(|_| bad("window count"))?;
        let sums_field = get("window_sums")?;
        let window_sums: Vec<f64> = if sums_field.is_empty() {
            Vec::new()
        } else {
            sums_field
                .split(',')
                .map(|s| f64_from_hex(s).map_err(|e| bad(&format!("window sums: {e}"))))
                .collect::<Result<_, _>>()?
        };
        if window_sums.len() != config.ranks.len() {
            return Err(bad("window sums disagree with configured ranks"));
        }
        let traj_len: usize = get("trajectory_len")?
            .parse()
            .map_err(|_| bad("trajectory len"))?;
        let n: usize = get("shares")?.parse().map_err(|_| bad("shares"))?;
        if n != config.model.agents {
            return Err(bad("agent count differs"));
        }
        let mut trajectory = TimeSeries::new();
        for _ in 0..traj_len {
            let line = lines.next().ok_or_else(|| bad("truncated trajectory"))?;
            let (t, v) = line.split_once(' ').ok_or_else(|| bad("trajectory row"))?;
            trajectory
                .push(
                    t.parse().map_err(|_| bad("trajectory year"))?,
                    f64_from_hex(v).map_err(|e| bad(&format!("trajectory value: {e}")))?,
                )
                .map_err(|e| bad(&format!("trajectory: {e}")))?;
        }
        let mut shares = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| bad("truncated shares"))?;
            let (hi, lo) = line.split_once(' ').ok_or_else(|| bad("share row"))?;
            let hi: u64 = hi.parse().map_err(|_| bad("share hi"))?;
            let lo = f64_from_hex(lo).map_err(|e| bad(&format!("share lo: {e}")))?;
            shares.push(
                ExtendedReal::from_parts(hi, lo)
                    .map_err(|e| bad(&format!("share: {e}")))?,
            );
        }
        let state = ShareVector::from_ranked(shares)?;
        let sim = Simulation::from_state(config.model.clone(), state, &rng, year)?;
        Ok(Self {
            config: config.clone(),
            replica,
            sim,
            window_sums,
            window_count,
            trajectory,
        })
    }
}

fn checkpoint_path(dir: &Path, replica: u32) -> PathBuf {
    dir.join(format!("replica_{replica}.ckpt"))
}

/// Aggregated output of a full multi-replica run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub profile: RankProfile,
    /// Sample- and time-averaged -ln w_1 with its error bar.
    pub order_parameter: (f64, f64),
    /// Per-replica residual-share trajectories.
    pub trajectories: Vec<TimeSeries>,
    pub config_hash: String,
}

/// Run S independent replicas (resuming any whose checkpoint is present in
/// `out_dir`), reduce the windowed averages, and emit the run directory.
pub fn run_experiment(
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult, ExperimentError> {
    config
        .validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        if config.checkpoint_interval > 0 {
            fs::create_dir_all(dir)?;
        }
    }
    let outcomes: Result<Vec<ReplicaOutcome>, ExperimentError> = worker_pool().install(|| {
        (0..config.samples)
            .into_par_iter()
            .map(|replica| {
                let ckpt = ckpt_dir.as_deref().map(|d| checkpoint_path(d, replica));
                let mut runner = match &ckpt {
                    Some(p) if p.exists() => ReplicaRunner::resume(config, p)?,
                    _ => ReplicaRunner::new(config, replica)?,
                };
                runner.advance_to(config.years, ckpt_dir.as_deref())?;
                Ok(runner.finish())
            })
            .collect()
    });
    let outcomes = outcomes?;
    let means: Vec<Vec<f64>> = outcomes.iter().map(|o| o.window_means.clone()).collect();
    let profile = RankProfile::from_replica_means(&means)?;
    let m = order_parameter(&profile)?;
    let result = ExperimentResult {
        profile,
        order_parameter: m,
        trajectories: outcomes.into_iter().map(|o| o.trajectory).collect(),
        config_hash: config.hash(),
    };
    if let Some(dir) = out_dir {
        write_run_dir(dir, config, &result)?;
    }
    Ok(result)
}

fn write_run_dir(
    dir: &Path,
    config: &RunConfig,
    result: &ExperimentResult,
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    csvio::write_atomic(&dir.join("config.txt"), &config.to_text())?;
    let mut files = vec!["config.txt".to_string(), "profile.csv".to_string()];
    csvio::write_profile(&dir.join("profile.csv"), &result.profile)?;
    for (i, traj) in result.trajectories.iter().enumerate() {
        let raw = format!("trajectory_s{i}.csv");
        csvio::write_series(&dir.join(&raw), traj)?;
        files.push(raw);
        if !traj.is_empty() {
            let binned = format!("trajectory_s{i}_binned.csv");
            csvio::write_binned(&dir.join(&binned), &log_bin(traj)?)?;
            files.push(binned);
        }
    }
    let mut manifest = format!("config_hash = {}\n", result.config_hash);
    let _ = writeln!(
        manifest,
        "order_parameter = {}",
        csvio::fmt_f64(result.order_parameter.0)
    );
    let _ = writeln!(
        manifest,
        "order_parameter_stderr = {}",
        csvio::fmt_f64(result.order_parameter.1)
    );
    for f in files {
        let _ = writeln!(manifest, "file = {f}");
    }
    csvio::write_atomic(&dir.join("manifest.txt"), &manifest)?;
    Ok(())
}

/// One grid point of a sweep: a progressivity value in the floor regime, or
/// an external field strength applied at the base progressivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepPoint {
    Progressivity(f64),
    Field(f64),
}

impl SweepPoint {
    pub fn value(&self) -> f64 {
        match self {
            SweepPoint::Progressivity(v) | SweepPoint::Field(v) => *v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone)]
pub struct SweepPointResult {
    pub point: SweepPoint,
    pub order_parameter: f64,
    pub order_parameter_err: f64,
    /// Per-point failures are isolated here instead of aborting the sweep.
    pub error: Option<String>,
}

/// Run one experiment per grid point. Points are independent; failures are
/// reported per point.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<SweepPointResult>, ExperimentError> {
    if spec.points.is_empty() {
        return Err(ExperimentError::Config("empty sweep grid".into()));
    }
    let mut results = Vec::with_capacity(spec.points.len());
    for &point in &spec.points {
        let mut config = spec.base.clone();
        match point {
            SweepPoint::Progressivity(p) => config.model.progressivity = p,
            SweepPoint::Field(h) => {
                config.model.redistribution = field_to_redistribution(h)
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
        }
        match run_experiment(&config, None) {
            Ok(r) => results.push(SweepPointResult {
                point,
                order_parameter: r.order_parameter.0,
                order_parameter_err: r.order_parameter.1,
                error: None,
            }),
            Err(e) => results.push(SweepPointResult {
                point,
                order_parameter: f64::NAN,
                order_parameter_err: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(results)
}

/// The progressivity values behind the standard trajectory figure: the
/// critical point plus four off-critical pairs.
pub const FIG1_PROGRESSIVITIES: [f64; 9] = [
    0.0, 0.005, -0.005, 0.01, -0.01, 0.02, -0.02, 0.03, -0.03,
];

fn value_tag(v: f64) -> String {
    format!("{v:+}")
}

/// Raw and log-binned residual-share trajectories, one pair of files per
/// progressivity value (single replica each).
pub fn emit_fig1(
    base: &RunConfig,
    p_values: &[f64],
    dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &p in p_values {
        let mut config = base.clone();
        config.model.progressivity = p;
        config.samples = 1;
        let result = run_experiment(&config, None)?;
        let traj = &result.trajectories[0];
        let raw = dir.join(format!("fig1_raw_p{}.csv", value_tag(p)));
        csvio::write_series(&raw, traj)?;
        let binned = dir.join(format!("fig1_binned_p{}.csv", value_tag(p)));
        csvio::write_binned(&binned, &log_bin(traj)?)?;
        written.push(raw);
        written.push(binned);
    }
    Ok(written)
}

/// Steady-state rank profile in decimal logarithm: (n, <<-log10 w_n>>, err).
pub fn emit_fig2(config: &RunConfig, dir: &Path) -> Result<PathBuf, ExperimentError> {
    let mut config = config.clone();
    config.ranks = (1..=config.model.agents).collect();
    let result = run_experiment(&config, None)?;
    fs::create_dir_all(dir)?;
    let path = dir.join("fig2_profile.csv");
    let ln10 = std::f64::consts::LN_10;
    let rows: Vec<(f64, f64, f64)> = result
        .profile
        .entries()
        .iter()
        .enumerate()
        .map(|(i, &(m, e))| ((i + 1) as f64, m / ln10, e / ln10))
        .collect();
    csvio::write_xy(&path, "n,neg_log10_share,stderr", &rows)?;
    Ok(path)
}

/// Order parameter against progressivity (floor regime plus smooth curves at
/// the given field strengths), the field response at the critical point, and
/// the two power-law fit summaries.
pub struct Fig3Output {
    pub files: Vec<PathBuf>,
    pub beta_fit: Option<FitResult>,
    pub delta_fit: Option<FitResult>,
}

pub fn emit_fig3(
    base: &RunConfig,
    p_grid: &[f64],
    h_values: &[f64],
    beta_fit_max_p: f64,
    dir: &Path,
) -> Result<Fig3Output, ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    // symbols: no redistribution (field -> 0)
    let main = sweep(&SweepSpec {
        base: base.clone(),
        points: p_grid.iter().map(|&p| SweepPoint::Progressivity(p)).collect(),
    })?;
    let main_rows: Vec<(f64, f64, f64)> = main
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| (r.point.value(), r.order_parameter, r.order_parameter_err))
        .collect();
    let main_path = dir.join("fig3_main.csv");
    csvio::write_xy(&main_path, "p,m,stderr", &main_rows)?;
    files.push(main_path);

    // smooth curves at finite field
    for &h in h_values {
        let mut with_field = base.clone();
        with_field.model.redistribution = field_to_redistribution(h)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let curve = sweep(&SweepSpec {
            base: with_field,
            points: p_grid.iter().map(|&p| SweepPoint::Progressivity(p)).collect(),
        })?;
        let rows: Vec<(f64, f64, f64)> = curve
            .iter()
            .filter(|r| r.error.is_none())
            .map(|r| (r.point.value(), r.order_parameter, r.order_parameter_err))
            .collect();
        let path = dir.join(format!("fig3_h{}.csv", value_tag(h)));
        csvio::write_xy(&path, "p,m,stderr", &rows)?;
        files.push(path);
    }

    // field response at the critical point
    let mut critical = base.clone();
    critical.model.progressivity = 0.0;
    let response = sweep(&SweepSpec {
        base: critical,
        points: h_values.iter().map(|&h| SweepPoint::Field(h)).collect(),
    })?;
    let resp_rows: Vec<(f64, f64, f64)> = response
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| (r.point.value(), r.order_parameter, r.order_parameter_err))
        .collect();
    let resp_path = dir.join("fig3_field_response.csv");
    csvio::write_xy(&resp_path, "h,m,stderr", &resp_rows)?;
    files.push(resp_path);

    let to_points = |rows: &[(f64, f64, f64)]| -> Vec<FitPoint> {
        rows.iter()
            .filter(|r| r.0 > 0.0 && r.1 > 0.0)
            .map(|&(x, y, e)| FitPoint {
                x,
                y,
                y_err: (e > 0.0).then_some(e),
            })
            .collect()
    };
    let beta_fit = fit_power_law(&to_points(&main_rows), (0.0, beta_fit_max_p)).ok();
    let delta_fit = fit_power_law(&to_points(&resp_rows), (0.0, f64::MAX)).ok();

    let mut summary = String::from("fit,exponent,stderr,goodness,points\n");
    if let Some(f) = &beta_fit {
        let _ = writeln!(
            summary,
            "beta,{},{},{},{}",
            csvio::fmt_f64(f.exponent),
            csvio::fmt_f64(f.exponent_stderr),
            csvio::fmt_f64(f.goodness),
            f.n_points
        );
    }
    if let Some(f) = &delta_fit {
        let _ = writeln!(
            summary,
            "inv_delta,{},{},{},{}",
            csvio::fmt_f64(f.exponent),
            csvio::fmt_f64(f.exponent_stderr),
            csvio::fmt_f64(f.goodness),
            f.n_points
        );
    }
    let fit_path = dir.join("fig3_fits.csv");
    csvio::write_atomic(&fit_path, &summary)?;
    files.push(fit_path);

    Ok(Fig3Output {
        files,
        beta_fit,
        delta_fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_year, replica_rng, ModelParams};
    use tempfile::tempdir;

    fn tiny_config(agents: usize, years: u64, samples: u32) -> RunConfig {
        let model = ModelParams::new(agents, 0.1, 0.02).unwrap();
        RunConfig::new(model, years, samples, 7)
    }

    #[test]
    fn recording_cadence_is_dense_then_dyadic() {
        assert!(records_year(1));
        assert!(records_year(65_535));
        let k = 17;
        let stride = 1u64 << (k - 9);
        assert!(records_year(1 << k));
        assert!(records_year((1 << k) + stride));
        assert!(!records_year((1 << k) + 1));
        // 512 records per dyadic bin
        let from = 1u64 << 20;
        let count = (from..(from << 1)).filter(|&t| records_year(t)).count();
        assert_eq!(count, 512);
    }

    #[test]
    fn tiny_run_matches_hand_chained_years() {
        // S = 1, T = 2, N = 2: the runner equals chained simulate_year calls
        let config = tiny_config(2, 2, 1);
        let result = run_experiment(&config, None).unwrap();

        let mut rng = replica_rng(config.master_seed, 0);
        let mut state = ShareVector::uniform_random(2, &mut rng).unwrap();
        let mut logs = Vec::new();
        let mut tails = Vec::new();
        for _ in 0..2 {
            let (next, obs) = simulate_year(&state, &config.model, &mut rng).unwrap();
            state = next;
            logs.push(-state.rank(1).value().ln());
            tails.push(obs.residual_share);
        }
        // window = last year only (fraction 0.5 of T = 2)
        let expect_m = logs[1];
        assert!((result.order_parameter.0 - expect_m).abs() < 1e-13);
        let traj = &result.trajectories[0];
        assert_eq!(traj.len(), 2);
        assert!((traj.points()[0].1 - tails[0]).abs() < 1e-15);
        assert!((traj.points()[1].1 - tails[1]).abs() < 1e-15);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let config = tiny_config(16, 64, 2);
        let a = run_experiment(&config, None).unwrap();
        let b = run_experiment(&config, None).unwrap();
        assert_eq!(a.order_parameter, b.order_parameter);
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(ta.points(), tb.points());
        }
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let dir = tempdir().unwrap();
        let mut config = tiny_config(16, 200, 1);
        config.checkpoint_interval = 64;

        // uninterrupted reference
        let mut full = ReplicaRunner::new(&config, 0).unwrap();
        full.advance_to(200, None).unwrap();
        let reference_shares: Vec<_> = full.simulation().shares().to_vec();
        let reference = full.finish();

        // interrupted at year 128 (checkpoint), then resumed
        let ckpt = dir.path().join("replica_0.ckpt");
        let mut first = ReplicaRunner::new(&config, 0).unwrap();
        first.advance_to(128, Some(dir.path())).unwrap();
        drop(first);
        let mut resumed = ReplicaRunner::resume(&config, &ckpt).unwrap();
        assert_eq!(resumed.year(), 128);
        resumed.advance_to(200, Some(dir.path())).unwrap();
        assert_eq!(resumed.simulation().shares(), &reference_shares[..]);
        let out = resumed.finish();
        assert_eq!(out.window_means, reference.window_means);
        assert_eq!(out.trajectory.points(), reference.trajectory.points());
    }

    #[test]
    fn resume_rejects_config_mismatch() {
        let dir = tempdir().unwrap();
        let mut config = tiny_config(16, 100, 1);
        config.checkpoint_interval = 50;
        let mut runner = ReplicaRunner::new(&config, 0).unwrap();
        runner.advance_to(100, Some(dir.path())).unwrap();
        let ckpt = dir.path().join("replica_0.ckpt");
        assert!(ckpt.exists());
        let mut other = config.clone();
        other.model.progressivity = 0.03;
        match ReplicaRunner::resume(&other, &ckpt) {
            Err(ExperimentError::Checkpoint(_)) => {}
            Err(e) => panic!("unexpected error: {e}"),
            Ok(_) => panic!("resume accepted a mismatched config"),
        }
    }

    #[test]
    fn run_dir_contains_outputs_and_manifest() {
        let dir = tempdir().unwrap();
        let config = tiny_config(8, 32, 2);
        run_experiment(&config, Some(dir.path())).unwrap();
        for f in ["config.txt", "manifest.txt", "profile.csv", "trajectory_s0.csv"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains(&config.hash()));
    }

    #[test]
    fn sweep_isolates_point_failures() {
        let base = tiny_config(8, 16, 1);
        let spec = SweepSpec {
            base,
            points: vec![
                SweepPoint::Progressivity(0.02),
                SweepPoint::Progressivity(0.95), // violates A + p < 1
            ],
        };
        let results = sweep(&spec).unwrap();
        assert!(results[0].error.is_none());
        assert!(results[1].error.is_some());
        assert!(results[0].order_parameter.is_finite());
    }

    #[test]
    fn fig_emitters_write_expected_shapes() {
        let dir = tempdir().unwrap();
        let config = tiny_config(8, 32, 2);

        let files = emit_fig1(&config, &[0.0, 0.01, -0.01], dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        for f in &files {
            assert!(f.exists());
        }

        let profile = emit_fig2(&config, dir.path()).unwrap();
        let text = fs::read_to_string(profile).unwrap();
        assert_eq!(text.lines().count(), 8 + 1, "N rows plus header");

        let out = emit_fig3(&config, &[-0.01, 0.01, 0.02, 0.03], &[0.05, 0.03], 0.05, dir.path())
            .unwrap();
        assert!(out.files.iter().all(|f| f.exists()));
        let main = fs::read_to_string(dir.path().join("fig3_main.csv")).unwrap();
        assert!(main.starts_with("p,m,stderr"));
    }
}
