//! Deterministic mean-field steady states.
//!
//! Two equivalent formulations of the same yearly map, with the post-growth
//! total replaced by its average over the factor distribution:
//!
//! * ranking-function relaxation: the ranking r(w) (number of agents with
//!   share above w) is pushed through the growth/tax/renormalise map and
//!   re-discretised to N agents each iteration, until it stops moving;
//! * duplicate-order-average: the N shares are copied once per factor atom,
//!   scaled, taxed, sorted, and contracted back to N by probability-weighted
//!   averaging of consecutive groups.
//!
//! Rankings keep their exact staircase step positions next to the channel
//! grid. A discretised ranking is a staircase, and pushing a staircase
//! through the map yields another staircase with analytically known steps,
//! so the fixed point is resolved to f64 accuracy instead of the 1/M channel
//! resolution. The channel grid remains the lookup representation for
//! arbitrary smooth inputs and for emission.
//!
//! No redistribution here: the solver covers the no-redistribution limit
//! where the transition lives, and taxes accumulated wealth only.

use crate::model::{ModelParams, TaxBase};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid ranking: {0}")]
    Ranking(String),
    #[error("share map outside the solvable regime: sqrt argument {0}")]
    Domain(f64),
    #[error("relaxation did not converge: residual {residual} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: u64 },
}

fn check_params(params: &ModelParams) -> Result<(), SolverError> {
    params
        .validate()
        .map_err(|e| SolverError::Params(e.to_string()))?;
    if params.redistribution != 0.0 {
        return Err(SolverError::Params(
            "the mean-field solver covers the no-redistribution case only".into(),
        ));
    }
    if params.tax_base != TaxBase::AccumulatedWealth {
        return Err(SolverError::Params(
            "the mean-field solver taxes accumulated wealth only".into(),
        ));
    }
    Ok(())
}

/// One staircase step: `weight` agents hold share `position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMass {
    pub position: f64,
    pub weight: f64,
}

/// Channelised monotone ranking r(w) on a uniform grid over [0, 1], with
/// optional exact staircase steps (positions descending).
#[derive(Debug, Clone)]
pub struct RankingFunction {
    /// r at w_j = j / M for j = 0..=M.
    channels: Vec<f64>,
    agents: usize,
    steps: Option<Vec<StepMass>>,
}

/// Default channel count per agent (M = 64 N).
pub const CHANNELS_PER_AGENT: usize = 64;

impl RankingFunction {
    /// Adopt channel values; must be non-increasing with r(0) = N, r(1) = 0.
    pub fn from_channels(channels: Vec<f64>, agents: usize) -> Result<Self, SolverError> {
        if channels.len() < 3 {
            return Err(SolverError::Ranking("need at least 3 channels".into()));
        }
        if (channels[0] - agents as f64).abs() > 1e-9 {
            return Err(SolverError::Ranking(format!(
                "r(0) = {} but N = {agents}",
                channels[0]
            )));
        }
        if channels[channels.len() - 1].abs() > 1e-9 {
            return Err(SolverError::Ranking(format!(
                "r(1) = {} expected 0",
                channels[channels.len() - 1]
            )));
        }
        if channels.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(SolverError::Ranking("channels increase".into()));
        }
        Ok(Self {
            channels,
            agents,
            steps: None,
        })
    }

    /// The uniform-density tentative guess r(w) = N (1 - w).
    pub fn uniform_guess(agents: usize) -> Self {
        let m = CHANNELS_PER_AGENT * agents;
        let channels = (0..=m)
            .map(|j| agents as f64 * (1.0 - j as f64 / m as f64))
            .collect();
        Self {
            channels,
            agents,
            steps: None,
        }
    }

    /// Staircase ranking of an explicit descending share list.
    pub fn from_shares(shares: &[f64], agents: usize) -> Result<Self, SolverError> {
        if shares.len() != agents {
            return Err(SolverError::Ranking(format!(
                "{} shares for {agents} agents",
                shares.len()
            )));
        }
        if shares.windows(2).any(|w| w[1] > w[0]) {
            return Err(SolverError::Ranking("shares not descending".into()));
        }
        if shares.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(SolverError::Ranking("shares outside [0, 1]".into()));
        }
        let steps: Vec<StepMass> = shares
            .iter()
            .map(|&position| StepMass {
                position,
                weight: 1.0,
            })
            .collect();
        let m = CHANNELS_PER_AGENT * agents;
        Ok(Self {
            channels: resample_channels(&steps, m),
            agents,
            steps: Some(steps),
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len() - 1
    }

    /// Staircase steps when this ranking is a discretised agent profile.
    pub fn steps(&self) -> Option<&[StepMass]> {
        self.steps.as_deref()
    }

    /// The share list of a staircase ranking (unit-weight steps).
    pub fn share_list(&self) -> Option<Vec<f64>> {
        self.steps.as_ref().map(|s| {
            debug_assert!(s.iter().all(|st| (st.weight - 1.0).abs() < 1e-9));
            s.iter().map(|st| st.position).collect()
        })
    }

    /// r(u): exact weighted count above u for staircases, linear channel
    /// interpolation otherwise. r vanishes at and beyond u = 1 only if no
    /// mass sits there; mean-field transients may push steps past 1.
    pub fn eval(&self, u: f64) -> f64 {
        if let Some(steps) = &self.steps {
            // positions descending: count weight with position > u
            let mut total = 0.0;
            for s in steps {
                if s.position > u {
                    total += s.weight;
                } else {
                    break;
                }
            }
            total
        } else {
            if u <= 0.0 {
                return self.channels[0];
            }
            if u >= 1.0 {
                // valid states carry no mass at or above 1; transients may
                return if u > 1.0 {
                    0.0
                } else {
                    *self.channels.last().unwrap()
                };
            }
            let m = self.channel_count() as f64;
            let x = u * m;
            let j = x.floor() as usize;
            let frac = x - j as f64;
            self.channels[j] * (1.0 - frac) + self.channels[j + 1] * frac
        }
    }

    /// Total wealth under the ranking.
    pub fn area(&self) -> f64 {
        if let Some(steps) = &self.steps {
            steps.iter().map(|s| s.weight * s.position).sum()
        } else {
            // trapezoid on the uniform grid
            let m = self.channel_count() as f64;
            let inner: f64 = self.channels[1..self.channels.len() - 1].iter().sum();
            (inner + 0.5 * (self.channels[0] + self.channels[self.channels.len() - 1])) / m
        }
    }
}

fn resample_channels(steps: &[StepMass], m: usize) -> Vec<f64> {
    // steps descending; r(w_j) = weight with position > w_j, clamped to [0,1]
    let mut channels = Vec::with_capacity(m + 1);
    let total: f64 = steps.iter().map(|s| s.weight).sum();
    let mut idx = 0usize;
    let mut above = total;
    // walk grid ascending, steps ascending from the back
    let mut rev: Vec<&StepMass> = steps.iter().collect();
    rev.reverse();
    for j in 0..=m {
        let w = j as f64 / m as f64;
        while idx < rev.len() && rev[idx].position <= w {
            above -= rev[idx].weight;
            idx += 1;
        }
        channels.push(above.max(0.0));
    }
    if let Some(last) = channels.last_mut() {
        // any step at exactly 1.0 still sits within [0, 1]
        if *last < 0.0 {
            *last = 0.0;
        }
    }
    channels
}

/// Mean-field state: ranking plus its share moments and correction factor.
#[derive(Debug, Clone)]
pub struct MeanFieldState {
    pub ranking: RankingFunction,
    pub mean_share: f64,
    pub mean_share_sq: f64,
    /// Correction factor multiplying the renormalised share map.
    pub correction: f64,
}

/// First and second share moments of a ranking: <w> = (1/N) Int r dw and
/// <w^2> = (2/N) Int w r dw, exactly for staircases, trapezoidal otherwise.
pub fn moments_from_ranking(r: &RankingFunction) -> (f64, f64) {
    let n = r.agents as f64;
    if let Some(steps) = r.steps() {
        let s1: f64 = steps.iter().map(|s| s.weight * s.position).sum();
        let s2: f64 = steps.iter().map(|s| s.weight * s.position * s.position).sum();
        (s1 / n, s2 / n)
    } else {
        let m = r.channel_count();
        let mf = m as f64;
        let mut int_r = 0.0;
        let mut int_wr = 0.0;
        for j in 0..=m {
            let w = j as f64 / mf;
            let weight = if j == 0 || j == m { 0.5 } else { 1.0 };
            int_r += weight * r.channels[j];
            int_wr += weight * w * r.channels[j];
        }
        (int_r / mf / n, 2.0 * int_wr / mf / n)
    }
}

/// Correction factor from the share moments and factor distribution:
/// F = 1 - p <f^2> / ((1 - A) <f>^2) * <w^2>/<w>.
pub fn compute_correction(
    mean_share: f64,
    mean_share_sq: f64,
    params: &ModelParams,
) -> f64 {
    let dist = &params.dist;
    1.0 - params.progressivity * dist.mean_sq()
        / ((1.0 - params.flat_rate) * dist.mean() * dist.mean())
        * (mean_share_sq / mean_share)
}

/// Inverse share map: the pre-growth wealth x whose post-tax renormalised
/// share is w. Smaller root of the quadratic; a rationalised form (and a
/// series branch for |p| < 1e-8) avoids cancellation as p -> 0.
pub fn map_share(
    w: f64,
    params: &ModelParams,
    correction: f64,
) -> Result<f64, SolverError> {
    let p = params.progressivity;
    let a = params.flat_rate;
    let mean_f = params.dist.mean();
    if p.abs() < 1e-8 {
        let lead = mean_f * correction * w;
        return Ok(lead * (1.0 + p * correction * w / (1.0 - a)));
    }
    let arg = 1.0 - 4.0 * p * correction * w / (1.0 - a);
    if arg < 0.0 {
        if arg < -1e-12 {
            return Err(SolverError::Domain(arg));
        }
        // clamped: w sits at the edge of the reachable range
        return Ok((1.0 - a) * mean_f / (2.0 * p));
    }
    Ok(2.0 * mean_f * correction * w / (1.0 + arg.sqrt()))
}

/// Forward share map: renormalised post-tax share of pre-growth wealth x,
/// the algebraic inverse of [`map_share`].
pub fn forward_share(x: f64, params: &ModelParams, correction: f64) -> f64 {
    let a = params.flat_rate;
    let mean_f = params.dist.mean();
    ((1.0 - a) * x - params.progressivity * x * x / mean_f)
        / ((1.0 - a) * mean_f * correction)
}

/// One relaxation sweep: r_new(w) = sum_i q_i r_old(x(w) / f_i).
///
/// For a staircase input the new steps are computed analytically (each old
/// step maps through the forward relation once per factor atom); otherwise
/// every channel is evaluated with linear interpolation of the old ranking.
pub fn iterate_ranking(
    state: &MeanFieldState,
    params: &ModelParams,
) -> Result<RankingFunction, SolverError> {
    check_params(params)?;
    let r_old = &state.ranking;
    let atoms = params.dist.atoms();
    if let Some(steps) = r_old.steps() {
        // An old step at position u maps, under atom f, to a new step at the
        // share of the grown wealth f*u, carrying q_f of its weight.
        let mut new_steps: Vec<StepMass> = Vec::with_capacity(steps.len() * atoms.len());
        for &(f, q) in atoms {
            for s in steps {
                new_steps.push(StepMass {
                    position: forward_share(f * s.position, params, state.correction),
                    weight: q * s.weight,
                });
            }
        }
        new_steps.sort_by(|a, b| b.position.total_cmp(&a.position));
        let m = r_old.channel_count();
        Ok(RankingFunction {
            channels: resample_channels(&new_steps, m),
            agents: r_old.agents,
            steps: Some(new_steps),
        })
    } else {
        let m = r_old.channel_count();
        let mf = m as f64;
        let mut channels = Vec::with_capacity(m + 1);
        for j in 0..=m {
            let w = j as f64 / mf;
            let x = map_share(w, params, state.correction)?;
            let mut r = 0.0;
            for &(f, q) in atoms {
                r += q * r_old.eval(x / f);
            }
            channels.push(r);
        }
        // pin the endpoints against interpolation residue
        channels[0] = r_old.agents as f64;
        Ok(RankingFunction {
            channels,
            agents: r_old.agents,
            steps: None,
        })
    }
}

/// Replace each horizontal unit strip of the ranking by a rectangle of the
/// same area: the output is a staircase of exactly N agent shares. Exact for
/// staircase inputs (weighted contraction of consecutive groups); channel
/// geometry integration otherwise. Total wealth is preserved.
pub fn discretize_ranking(
    r: &RankingFunction,
    agents: usize,
) -> Result<RankingFunction, SolverError> {
    let shares = if let Some(steps) = r.steps() {
        contract_steps(steps, agents)
    } else {
        slab_areas_from_channels(r, agents)?
    };
    let m = r.channel_count();
    let steps: Vec<StepMass> = shares
        .iter()
        .map(|&position| StepMass {
            position,
            weight: 1.0,
        })
        .collect();
    Ok(RankingFunction {
        channels: resample_channels(&steps, m),
        agents,
        steps: Some(steps),
    })
}

/// Weighted average of consecutive unit-weight groups of descending steps.
fn contract_steps(steps: &[StepMass], agents: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(agents);
    let mut acc = 0.0; // weighted position sum in the open group
    let mut room = 1.0; // weight still missing from the open group
    for s in steps {
        let mut left = s.weight;
        while left > 0.0 {
            let take = left.min(room);
            acc += take * s.position;
            room -= take;
            left -= take;
            if room <= 1e-15 {
                out.push(acc);
                acc = 0.0;
                room = 1.0;
                if out.len() == agents {
                    return out;
                }
            }
        }
    }
    if room < 1.0 - 1e-12 && out.len() < agents {
        out.push(acc);
    }
    while out.len() < agents {
        out.push(0.0);
    }
    out
}

/// Strip areas from channel geometry: the strip between r = k-1 and r = k
/// has area Int w(r) dr with w(r) the piecewise-linear inverse.
fn slab_areas_from_channels(
    r: &RankingFunction,
    agents: usize,
) -> Result<Vec<f64>, SolverError> {
    let m = r.channel_count();
    let mf = m as f64;
    let mut areas = vec![0.0f64; agents];
    // walk segments from w = 1 (r ~ 0) back to w = 0 (r = N)
    for j in (0..m).rev() {
        let (w_lo, w_hi) = (j as f64 / mf, (j + 1) as f64 / mf);
        let (r_hi, r_lo) = (r.channels[j], r.channels[j + 1]); // r_hi >= r_lo
        if r_hi <= r_lo {
            continue; // flat in r: no vertical extent
        }
        // w(r) linear from (r_lo -> w_hi) to (r_hi -> w_lo)
        let k_first = (r_lo.floor() as usize).min(agents.saturating_sub(1));
        let k_last = (r_hi.ceil() as usize).min(agents);
        for k in k_first..k_last {
            let (band_lo, band_hi) = (k as f64, k as f64 + 1.0);
            let a = r_lo.max(band_lo);
            let b = r_hi.min(band_hi);
            if b <= a {
                continue;
            }
            let w_at = |rv: f64| w_hi + (w_lo - w_hi) * (rv - r_lo) / (r_hi - r_lo);
            areas[k] += (b - a) * 0.5 * (w_at(a) + w_at(b));
        }
    }
    Ok(areas)
}

/// Outcome of the relaxation loop.
#[derive(Debug, Clone)]
pub struct RelaxationReport {
    pub iterations: u64,
    pub residual: f64,
    pub converged: bool,
    /// (iteration, residual) samples at power-of-two iterations plus the last.
    pub residual_history: Vec<(u64, f64)>,
}

pub const DEFAULT_RELAX_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_RELAX_MAX_ITERATIONS: u64 = 1_000_000;

/// Relax the ranking map to its fixed point: iterate + discretise + moment
/// refresh until the share list stops moving (sup-norm below `tolerance`).
///
/// The initial guess is discretised once and its positions rescaled so the
/// shares sum to one (the total-wealth normalisation every valid state must
/// satisfy; the map itself then conserves it).
pub fn relax_to_fixed_point(
    params: &ModelParams,
    init: &RankingFunction,
    tolerance: f64,
    max_iterations: u64,
) -> Result<(MeanFieldState, RelaxationReport), SolverError> {
    check_params(params)?;
    let agents = init.agents();
    let first = discretize_ranking(init, agents)?;
    let mut shares = first.share_list().expect("discretised ranking");
    let total: f64 = shares.iter().sum();
    if !(total > 0.0) {
        return Err(SolverError::Ranking("initial ranking carries no wealth".into()));
    }
    for s in &mut shares {
        *s /= total;
    }
    let mut state = state_from_shares(&shares, init.channel_count(), agents, params);

    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0u64;
    while iterations < max_iterations {
        let next = iterate_ranking(&state, params)?;
        let next = discretize_ranking(&next, agents)?;
        let new_shares = next.share_list().expect("discretised ranking");
        residual = shares
            .iter()
            .zip(&new_shares)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        shares = new_shares;
        let (m1, m2) = moments_from_ranking(&next);
        state = MeanFieldState {
            ranking: next,
            mean_share: m1,
            mean_share_sq: m2,
            correction: compute_correction(m1, m2, params),
        };
        iterations += 1;
        if iterations.is_power_of_two() {
            history.push((iterations, residual));
        }
        if residual < tolerance {
            break;
        }
    }
    history.push((iterations, residual));
    let converged = residual < tolerance;
    let report = RelaxationReport {
        iterations,
        residual,
        converged,
        residual_history: history,
    };
    if !converged {
        return Err(SolverError::NoConvergence {
            residual,
            iterations,
        });
    }
    Ok((state, report))
}

fn state_from_shares(
    shares: &[f64],
    _channels: usize,
    agents: usize,
    params: &ModelParams,
) -> MeanFieldState {
    let ranking = RankingFunction::from_shares(shares, agents)
        .expect("normalised descending share list");
    let (m1, m2) = moments_from_ranking(&ranking);
    MeanFieldState {
        ranking,
        mean_share: m1,
        mean_share_sq: m2,
        correction: compute_correction(m1, m2, params),
    }
}

/// Descending share list for the duplicate-order-average formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteShareList {
    shares: Vec<f64>,
}

impl DiscreteShareList {
    pub fn new(shares: Vec<f64>) -> Result<Self, SolverError> {
        if shares.len() < 2 {
            return Err(SolverError::Ranking("need at least 2 shares".into()));
        }
        if shares.windows(2).any(|w| w[1] > w[0]) {
            return Err(SolverError::Ranking("shares not descending".into()));
        }
        if shares.iter().any(|&s| s < 0.0) {
            return Err(SolverError::Ranking("negative share".into()));
        }
        let total: f64 = shares.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SolverError::Ranking(format!("shares sum to {total}")));
        }
        Ok(Self { shares })
    }

    /// Uniform profile 1/N.
    pub fn uniform(n: usize) -> Self {
        Self {
            shares: vec![1.0 / n as f64; n],
        }
    }

    /// Geometric profile renormalised to unit sum.
    pub fn geometric(n: usize, ratio: f64) -> Self {
        let mut shares: Vec<f64> = (0..n).map(|k| ratio.powi(k as i32)).collect();
        let total: f64 = shares.iter().sum();
        for s in &mut shares {
            *s /= total;
        }
        Self { shares }
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }

    pub fn top(&self) -> f64 {
        self.shares[0]
    }
}

/// One duplicate-order-average sweep: one scaled copy of the shares per
/// factor atom (weight = the atom probability), taxes at the mean-field
/// total, descending sort, probability-weighted contraction back to N
/// consecutive groups, renormalisation to unit sum.
///
/// For the half-doubling distribution this is exactly: duplicate and double
/// the copy, tax the 2N wealths, sort, average pairs (1st with 2nd, 3rd with
/// 4th, ...), renormalise. The weighted grouping for unequal probabilities
/// generalises that pairing.
pub fn duplicate_average_step(
    list: &DiscreteShareList,
    params: &ModelParams,
) -> Result<DiscreteShareList, SolverError> {
    check_params(params)?;
    let n = list.len();
    let atoms = params.dist.atoms();
    let mean_total = params.dist.mean(); // S' under the mean-field assumption
    let a = params.flat_rate;
    let p = params.progressivity;
    let mut grown: Vec<StepMass> = Vec::with_capacity(n * atoms.len());
    for &(f, q) in atoms {
        for &w in list.shares() {
            let wealth = f * w;
            let keep = 1.0 - a - p * wealth / mean_total;
            if !(keep > 0.0 && keep < 1.0) {
                return Err(SolverError::Params(format!(
                    "tax keep fraction {keep} outside (0, 1)"
                )));
            }
            grown.push(StepMass {
                position: wealth * keep,
                weight: q,
            });
        }
    }
    grown.sort_by(|x, y| y.position.total_cmp(&x.position));
    let mut shares = contract_steps(&grown, n);
    let total: f64 = shares.iter().sum();
    for s in &mut shares {
        *s /= total;
    }
    Ok(DiscreteShareList { shares })
}

/// Iterate [`duplicate_average_step`] to its fixed point.
pub fn duplicate_to_fixed_point(
    params: &ModelParams,
    init: &DiscreteShareList,
    tolerance: f64,
    max_iterations: u64,
) -> Result<(DiscreteShareList, u64), SolverError> {
    let mut cur = init.clone();
    for it in 1..=max_iterations {
        let next = duplicate_average_step(&cur, params)?;
        let residual = cur
            .shares()
            .iter()
            .zip(next.shares())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        cur = next;
        if residual < tolerance {
            return Ok((cur, it));
        }
    }
    Err(SolverError::NoConvergence {
        residual: f64::NAN,
        iterations: max_iterations,
    })
}
