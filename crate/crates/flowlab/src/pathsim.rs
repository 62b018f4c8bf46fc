//! Killed-chain simulation with seeded, stream-indexed randomness and
//! deterministic parallel aggregation.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::htransform::HTransform;

/// Exit rates below this are treated as absorbing.
const RATE_FLOOR: f64 = 1e-14;
/// Paths per deterministic reduction chunk.
const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("t = {t} is beyond the simulated horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
}

/// Stream-indexed RNG: sample i of stream j is a pure function of
/// (seed, j, i), independent of worker count.
#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// One trajectory of the killed chain: piecewise-constant and
/// right-continuous, recorded up to `horizon`, at the cemetery from
/// `lifetime` on (when killed).
#[derive(Debug, Clone)]
pub struct PathSample {
    start: usize,
    /// Visited (live) states; `states[k]` occupies `[jump_times[k-1], jump_times[k])`.
    states: Vec<usize>,
    /// Strictly increasing times of live-to-live jumps.
    jump_times: Vec<f64>,
    /// Killing time, if the path died before the horizon.
    lifetime: Option<f64>,
    horizon: f64,
}

/// Resolution of a hitting/entrance query on a finite path segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HitOutcome {
    Hit(f64),
    /// Killed without ever entering the target set: the true value is +inf.
    NeverByDeath,
    /// Still alive and outside the set at the horizon: undecidable.
    OpenAtHorizon,
}

impl PathSample {
    #[cfg(test)]
    pub(crate) fn from_parts(
        start: usize,
        states: Vec<usize>,
        jump_times: Vec<f64>,
        lifetime: Option<f64>,
        horizon: f64,
    ) -> Self {
        debug_assert_eq!(states.len(), jump_times.len() + 1);
        Self {
            start,
            states,
            jump_times,
            lifetime,
            horizon,
        }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn lifetime(&self) -> Option<f64> {
        self.lifetime
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// True when `t < zeta` as far as the recorded window can tell.
    pub fn alive_at(&self, t: f64) -> bool {
        match self.lifetime {
            Some(z) => t < z,
            None => true,
        }
    }

    /// Right-continuous state lookup; `None` is the cemetery.
    pub fn state_at(&self, t: f64) -> Result<Option<usize>, PathError> {
        if t > self.horizon {
            return Err(PathError::BeyondHorizon {
                t,
                horizon: self.horizon,
            });
        }
        if !self.alive_at(t) {
            return Ok(None);
        }
        let seg = self.jump_times.partition_point(|&jt| jt <= t);
        Ok(Some(self.states[seg]))
    }

    /// Segments `(state, from, to)` of the live part of the path, truncated
    /// at `min(zeta, horizon)`.
    pub fn segments(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let end = self.lifetime.unwrap_or(self.horizon);
        let n = self.states.len();
        (0..n).map(move |k| {
            let from = if k == 0 { 0.0 } else { self.jump_times[k - 1] };
            let to = if k == n - 1 { end } else { self.jump_times[k] };
            (self.states[k], from, to)
        })
    }

    /// First time in `[0, infinity)` the path sits in `target`.
    pub fn entrance_time(&self, target: &[usize]) -> HitOutcome {
        if target.contains(&self.start) {
            return HitOutcome::Hit(0.0);
        }
        for (k, &s) in self.states.iter().enumerate().skip(1) {
            if target.contains(&s) {
                return HitOutcome::Hit(self.jump_times[k - 1]);
            }
        }
        if self.lifetime.is_some() {
            HitOutcome::NeverByDeath
        } else {
            HitOutcome::OpenAtHorizon
        }
    }

    /// First time in `(0, infinity)` the path sits in `target`. On
    /// right-continuous step paths this coincides with the entrance time:
    /// a path starting in the set stays there for a positive holding time.
    pub fn hitting_time(&self, target: &[usize]) -> HitOutcome {
        self.entrance_time(target)
    }

    /// `int_0^t v(X_s) ds`, frozen after the lifetime.
    pub fn pcaf_integral(&self, rate: &DVector<f64>, t: f64) -> f64 {
        let end = match self.lifetime {
            Some(z) => t.min(z),
            None => t,
        };
        let mut acc = 0.0;
        for (state, from, to) in self.segments() {
            if from >= end {
                break;
            }
            acc += rate[state] * (to.min(end) - from);
        }
        acc
    }

    /// The shifted path `theta_s`: what the chain does from time s on,
    /// within the remaining window.
    pub fn shift(&self, s: f64) -> PathSample {
        let horizon = (self.horizon - s).max(0.0);
        if !self.alive_at(s) {
            // Already at the cemetery: a dead path with zero lifetime.
            return PathSample {
                start: self.start,
                states: vec![self.start],
                jump_times: vec![],
                lifetime: Some(0.0),
                horizon,
            };
        }
        let seg = self.jump_times.partition_point(|&jt| jt <= s);
        let states: Vec<usize> = self.states[seg..].to_vec();
        let jump_times: Vec<f64> = self.jump_times[seg..].iter().map(|&jt| jt - s).collect();
        PathSample {
            start: states[0],
            states,
            jump_times,
            lifetime: self.lifetime.map(|z| z - s),
            horizon,
        }
    }
}

/// Competing-exponentials simulation of the chain generated by `L^h`,
/// truncated at `horizon`. Two uniforms per step: holding time, then
/// destination (live states in index order, then the cemetery).
pub fn sample_path(ht: &HTransform, x0: usize, horizon: f64, rng: &mut ChaCha8Rng) -> PathSample {
    let lh = ht.generator();
    let mut states = vec![x0];
    let mut jump_times = Vec::new();
    let mut lifetime = None;
    let mut t = 0.0;
    let mut x = x0;
    loop {
        let exit_rate = -lh[(x, x)];
        if exit_rate <= RATE_FLOOR {
            break; // absorbing: sits here past any horizon
        }
        let u: f64 = rng.random();
        t -= (1.0 - u).ln() / exit_rate;
        if t >= horizon {
            break;
        }
        let dest: f64 = rng.random::<f64>() * exit_rate;
        let mut acc = 0.0;
        let mut jumped = false;
        for y in 0..ht.n() {
            if y == x {
                continue;
            }
            acc += lh[(x, y)];
            if dest < acc {
                states.push(y);
                jump_times.push(t);
                x = y;
                jumped = true;
                break;
            }
        }
        if !jumped {
            lifetime = Some(t);
            break;
        }
    }
    PathSample {
        start: x0,
        states,
        jump_times,
        lifetime,
        horizon,
    }
}

/// Flow weight at a deterministic time: `h(x0) e^{alpha t} / h(X_t)` on
/// `{t < zeta}`, zero otherwise.
pub fn weight(ht: &HTransform, path: &PathSample, t: f64) -> f64 {
    match path.state_at(t) {
        Ok(Some(y)) => ht.h()[path.start()] * (ht.alpha() * t).exp() / ht.h()[y],
        _ => 0.0,
    }
}

/// Monte Carlo estimate with the chunked deterministic reduction contract.
#[derive(Debug, Clone, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: u64,
    pub seed: u64,
}

impl McEstimate {
    /// Two-sample z score treating the estimates as independent.
    pub fn z_against(&self, other: &McEstimate) -> f64 {
        let denom = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        if denom == 0.0 {
            if (self.mean - other.mean).abs() == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - other.mean).abs() / denom
        }
    }

    /// z score against a known exact value.
    pub fn z_against_exact(&self, exact: f64) -> f64 {
        if self.std_error == 0.0 {
            if (self.mean - exact).abs() == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - exact).abs() / self.std_error
        }
    }
}

/// Per-path contribution produced by an estimator kernel.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    pub value: f64,
    pub censored: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Runs `kernel` over paths `0..n_paths`, each on its own RNG stream
/// `stream_base + i`, reducing in fixed-size chunks with compensated
/// summation. Chunks are computed in parallel but combined in index order,
/// so the result is bit-identical for any worker count.
pub fn mc_run<F>(n_paths: u64, seed: u64, stream_base: u64, kernel: F) -> (McEstimate, u64)
where
    F: Fn(&mut ChaCha8Rng, u64) -> Contribution + Sync,
{
    let n_chunks = (n_paths as usize).div_ceil(CHUNK);
    let chunks: Vec<(Kahan, Kahan, u64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = (c * CHUNK) as u64;
            let hi = ((c + 1) * CHUNK).min(n_paths as usize) as u64;
            let mut sum = Kahan::default();
            let mut sum_sq = Kahan::default();
            let mut censored = 0u64;
            for i in lo..hi {
                let mut rng = RngStream {
                    seed,
                    stream: stream_base + i,
                }
                .rng();
                let c = kernel(&mut rng, i);
                sum.add(c.value);
                sum_sq.add(c.value * c.value);
                if c.censored {
                    censored += 1;
                }
            }
            (sum, sum_sq, censored)
        })
        .collect();

    let mut sum = Kahan::default();
    let mut sum_sq = Kahan::default();
    let mut censored = 0u64;
    for (s, s2, c) in chunks {
        sum.add(s.sum);
        sum_sq.add(s2.sum);
        censored += c;
    }
    let n = n_paths as f64;
    let mean = sum.sum / n;
    let variance = if n_paths > 1 {
        ((sum_sq.sum - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    (
        McEstimate {
            mean,
            std_error: (variance / n).sqrt(),
            n_paths,
            seed,
        },
        censored,
    )
}
