//! Time grids, finite-activity Lévy measures and sampling of the driving
//! Wiener–Poisson noise.
//!
//! Noise is drawn from counter-based streams: every `(seed, path, step,
//! channel)` tuple owns an independent generator, so bundles can be sampled
//! in parallel and in any order without changing a single bit.
//!
//! The segment swap exchanges the two adjacent windows `(t-2l, t-l]` and
//! `(t-l, t]` of a bundle. It is an involution that preserves the law of the
//! noise and never touches anything after `t`.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHANNEL_BROWNIAN: u64 = 0;
const CHANNEL_JUMPS: u64 = 1;

/// Uniform time grid `t0 = s_0 < ... < s_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(t0.is_finite() && horizon.is_finite()) || t0 < 0.0 || horizon <= t0 {
            return Err(Error::Config(format!(
                "time grid requires 0 <= t0 < T, got t0={t0}, T={horizon}"
            )));
        }
        Ok(Self {
            t0,
            horizon,
            n_steps,
        })
    }

    /// Step size.
    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// The sub-grid covering steps `from..=to`.
    pub fn slice(&self, from: usize, to: usize) -> Result<TimeGrid> {
        if from >= to || to > self.n_steps {
            return Err(Error::Domain(format!(
                "invalid grid slice {from}..={to} of {} steps",
                self.n_steps
            )));
        }
        TimeGrid::new(self.time(from), self.time(to), to - from)
    }

    /// Index of the grid node equal to `t`, if `t` is a node.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let dt = self.dt();
        let r = (t - self.t0) / dt;
        let k = r.round();
        if (r - k).abs() > 1e-9 || k < 0.0 || k > self.n_steps as f64 {
            None
        } else {
            Some(k as usize)
        }
    }
}

/// A single atom `(mark, rate)` of a finite Lévy measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub mark: Vec<f64>,
    pub rate: f64,
}

/// Finite-activity Lévy measure `λ = Σ λ_i δ_{e_i}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LevyMeasure {
    pub atoms: Vec<Atom>,
}

impl LevyMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let m = Self { atoms };
        m.validate()?;
        Ok(m)
    }

    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.atoms.first().map(|a| a.mark.len());
        for (i, a) in self.atoms.iter().enumerate() {
            if !(a.rate.is_finite() && a.rate > 0.0) {
                return Err(Error::Config(format!(
                    "atom {i}: rate must be positive and finite, got {}",
                    a.rate
                )));
            }
            if Some(a.mark.len()) != dim || a.mark.is_empty() {
                return Err(Error::Dimension(format!(
                    "atom {i}: mark dimension {} inconsistent",
                    a.mark.len()
                )));
            }
            let norm = a.mark.iter().map(|e| e * e).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Config(format!("atom {i}: mark must be nonzero")));
            }
        }
        Ok(())
    }

    pub fn total_rate(&self) -> f64 {
        self.atoms.iter().map(|a| a.rate).sum()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mark_dim(&self) -> Option<usize> {
        self.atoms.first().map(|a| a.mark.len())
    }
}

/// `∫_E h(e) λ(de)` for a finite measure: `Σ_i λ_i h(e_i)`.
pub fn compensator_integral(measure: &LevyMeasure, h: impl Fn(&[f64]) -> f64) -> f64 {
    measure.atoms.iter().map(|a| a.rate * h(&a.mark)).sum()
}

pub fn mark_norm(e: &[f64]) -> f64 {
    e.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A jump inside a step. `offset` is measured from the start of the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub offset: f64,
    pub atom: usize,
    pub mark: Vec<f64>,
}

/// Sampled Brownian increments and Poisson jump events of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dim: usize,
    pub seed: u64,
    pub path: u64,
    /// Row-major `[n_steps][dim]`.
    pub brownian: Vec<f64>,
    pub jumps: Vec<Vec<JumpEvent>>,
}

impl PathBundle {
    pub fn increment(&self, step: usize) -> &[f64] {
        &self.brownian[step * self.dim..(step + 1) * self.dim]
    }

    pub fn jumps_in(&self, step: usize) -> &[JumpEvent] {
        &self.jumps[step]
    }

    pub fn jump_count(&self, step: usize) -> usize {
        self.jumps[step].len()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(seed, path, step, channel)` counter.
pub(crate) fn stream(seed: u64, path: u64, step: u64, channel: u64) -> ChaCha8Rng {
    let mut key = splitmix64(seed);
    key = splitmix64(key ^ path);
    key = splitmix64(key ^ step);
    key = splitmix64(key ^ channel);
    ChaCha8Rng::seed_from_u64(key)
}

/// Draws one bundle; `path` is the counter, not a position in a batch.
pub fn sample_path(
    measure: &LevyMeasure,
    grid: &TimeGrid,
    dim: usize,
    seed: u64,
    path: u64,
) -> Result<PathBundle> {
    if dim == 0 {
        return Err(Error::Config("Brownian dimension must be >= 1".into()));
    }
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let intensity = measure.total_rate() * dt;
    let poisson = if intensity > 0.0 {
        Some(Poisson::new(intensity).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let marks = if measure.is_empty() {
        None
    } else {
        Some(
            WeightedIndex::new(measure.atoms.iter().map(|a| a.rate))
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    };

    let mut brownian = Vec::with_capacity(grid.n_steps * dim);
    let mut jumps = Vec::with_capacity(grid.n_steps);
    for k in 0..grid.n_steps {
        let mut rng = stream(seed, path, k as u64, CHANNEL_BROWNIAN);
        for _ in 0..dim {
            let g: f64 = rng.sample(StandardNormal);
            brownian.push(g * sqrt_dt);
        }
        let mut events = Vec::new();
        if let (Some(poisson), Some(marks)) = (&poisson, &marks) {
            let mut rng = stream(seed, path, k as u64, CHANNEL_JUMPS);
            let count = poisson.sample(&mut rng) as usize;
            for _ in 0..count {
                let offset = rng.random::<f64>() * dt;
                let atom = marks.sample(&mut rng);
                events.push(JumpEvent {
                    offset,
                    atom,
                    mark: measure.atoms[atom].mark.clone(),
                });
            }
            events.sort_by(|a, b| a.offset.total_cmp(&b.offset));
        }
        jumps.push(events);
    }
    Ok(PathBundle {
        grid: *grid,
        dim,
        seed,
        path,
        brownian,
        jumps,
    })
}

/// Samples `n_paths` independent bundles with path counters `0..n_paths`.
pub fn sample_paths(
    measure: &LevyMeasure,
    grid: &TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathBundle>> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be >= 1".into()));
    }
    measure.validate()?;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| sample_path(measure, grid, dim, seed, p))
        .collect()
}

/// Exchanges the noise on `(t-2l, t-l]` and `(t-l, t]`.
pub fn segment_swap(bundle: &PathBundle, t: f64, ell: f64) -> Result<PathBundle> {
    let grid = bundle.grid;
    let dt = grid.dt();
    let m_real = ell / dt;
    let m = m_real.round();
    if !(ell > 0.0) || m < 1.0 || (m_real - m).abs() > 1e-9 {
        return Err(Error::Alignment(format!(
            "ell={ell} is not a positive multiple of the step {dt}"
        )));
    }
    let m = m as usize;
    let kt = grid.node_index(t).ok_or_else(|| {
        Error::Alignment(format!("t={t} is not a node of the bundle grid"))
    })?;
    if kt < 2 * m {
        return Err(Error::Domain(format!(
            "grid starts at {} but the swap needs history back to t-2l={}",
            grid.t0,
            t - 2.0 * ell
        )));
    }
    let mut out = bundle.clone();
    let d = bundle.dim;
    for j in 0..m {
        let a = kt - 2 * m + j;
        let b = kt - m + j;
        out.brownian[a * d..(a + 1) * d].copy_from_slice(bundle.increment(b));
        out.brownian[b * d..(b + 1) * d].copy_from_slice(bundle.increment(a));
        out.jumps[a] = bundle.jumps[b].clone();
        out.jumps[b] = bundle.jumps[a].clone();
    }
    Ok(out)
}

/// Writes `step, path, dB_1..dB_d, n_jumps, marks...` rows. Each mark is a
/// `:`-joined vector in its own column.
pub fn write_bundles_csv<W: Write>(bundles: &[PathBundle], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let d = bundles.first().map(|b| b.dim).unwrap_or(1);
    let mut header = vec!["step".to_string(), "path".to_string()];
    header.extend((1..=d).map(|i| format!("dB_{i}")));
    header.push("n_jumps".into());
    header.push("marks".into());
    w.write_record(&header)?;
    for b in bundles {
        for k in 0..b.grid.n_steps {
            let mut row = vec![k.to_string(), b.path.to_string()];
            row.extend(b.increment(k).iter().map(|v| format!("{v:e}")));
            row.push(b.jump_count(k).to_string());
            for ev in b.jumps_in(k) {
                let mark: Vec<String> = ev.mark.iter().map(|v| format!("{v}")).collect();
                row.push(mark.join(":"));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
