use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixhmmr::Dataset;
use crate::numcore::TimeGrid;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Three clusters of three-level step functions on [0, 5].
    Piecewise,
    /// Breiman's three-class waveforms on t = 1..21.
    Waveform,
    /// Two clusters of six-phase cubic curves.
    SwitchLike,
}

impl Scenario {
    pub fn generate(self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            Scenario::Piecewise => gen_piecewise_sim(n, seed),
            Scenario::Waveform => gen_waveform(n, seed),
            Scenario::SwitchLike => gen_switchlike(n, seed),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Piecewise => "piecewise",
            Scenario::Waveform => "waveform",
            Scenario::SwitchLike => "switchlike",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piecewise" => Ok(Scenario::Piecewise),
            "waveform" => Ok(Scenario::Waveform),
            "switchlike" | "switch-like" => Ok(Scenario::SwitchLike),
            other => Err(Error::invalid(format!("unknown scenario `{other}`"))),
        }
    }
}

fn unit_normal() -> Normal<f64> {
    Normal::new(0.0, 1.0).expect("unit normal")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseOptions {
    /// `levels[g][k]`: constant level of segment k in cluster g.
    pub levels: Vec<Vec<f64>>,
    pub sigma: f64,
    pub m: usize,
    pub t_end: f64,
    /// Index of the first point of every segment after the first. `None`
    /// splits the grid into equal parts.
    pub breakpoints: Option<Vec<usize>>,
}

impl Default for PiecewiseOptions {
    fn default() -> Self {
        Self {
            levels: vec![vec![6.2, 5.5, 6.0], vec![6.0, 5.3, 6.3], vec![5.5, 6.0, 5.5]],
            sigma: 0.25,
            m: 100,
            t_end: 5.0,
            breakpoints: None,
        }
    }
}

impl PiecewiseOptions {
    pub fn segment_starts(&self) -> Vec<usize> {
        let k = self.levels.first().map_or(1, Vec::len);
        let mut starts = vec![0];
        match &self.breakpoints {
            Some(b) => starts.extend(b.iter().copied()),
            None => starts.extend((1..k).map(|s| (s * self.m).div_ceil(k))),
        }
        starts
    }
}

pub fn gen_piecewise_sim(n: usize, seed: u64) -> Result<Dataset> {
    gen_piecewise_with(n, seed, &PiecewiseOptions::default())
}

/// Curves drawn with uniform cluster probabilities; cluster g is the step
/// function through `levels[g]` plus Gaussian noise.
pub fn gen_piecewise_with(n: usize, seed: u64, opts: &PiecewiseOptions) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("cannot generate zero curves"));
    }
    let g_count = opts.levels.len();
    let k = opts.levels.first().map_or(0, Vec::len);
    if g_count == 0 || k == 0 || opts.levels.iter().any(|l| l.len() != k) {
        return Err(Error::invalid("levels must be a non-empty rectangular table"));
    }
    let starts = opts.segment_starts();
    if starts.len() != k || starts.windows(2).any(|w| w[0] >= w[1]) || starts[k - 1] >= opts.m {
        return Err(Error::invalid("breakpoints must be increasing and inside the grid"));
    }
    let grid = TimeGrid::linspace(0.0, opts.t_end, opts.m)?;
    let mut rng = stream(seed, "simulate/piecewise");
    let noise = unit_normal();
    let mut curves = Array2::zeros((n, opts.m));
    let mut states = Array2::zeros((n, opts.m));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let g = rng.random_range(0..g_count);
        labels.push(g);
        let mut seg = 0;
        for j in 0..opts.m {
            while seg + 1 < k && j >= starts[seg + 1] {
                seg += 1;
            }
            states[[i, j]] = seg;
            let eps: f64 = noise.sample(&mut rng);
            curves[[i, j]] = opts.levels[g][seg] + opts.sigma * eps;
        }
    }
    let mut data = Dataset::new(curves, grid)?.with_labels(labels)?;
    data.truth_states = Some(states);
    Ok(data)
}

/// Triangular base waves: peak 6 at t = 11, 15 and 7 respectively.
pub fn waveform_base(h: usize, t: f64) -> f64 {
    let centre = match h {
        0 => 11.0,
        1 => 15.0,
        _ => 7.0,
    };
    (6.0 - (t - centre).abs()).max(0.0)
}

/// Pair of base waves mixed by each class.
pub const WAVEFORM_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Noise-free waveform of `class` with mixing weight `u`.
pub fn waveform_mean(class: usize, u: f64, t: f64) -> f64 {
    let (a, b) = WAVEFORM_PAIRS[class];
    u * waveform_base(a, t) + (1.0 - u) * waveform_base(b, t)
}

pub fn gen_waveform(n: usize, seed: u64) -> Result<Dataset> {
    gen_waveform_with(n, seed, 1.0)
}

/// Classes cycle 0, 1, 2 so the sample is balanced; u ~ U(0, 1) per curve.
pub fn gen_waveform_with(n: usize, seed: u64, noise_sd: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("cannot generate zero curves"));
    }
    let m = 21;
    let grid = TimeGrid::new((1..=m).map(|t| t as f64).collect())?;
    let mut rng = stream(seed, "simulate/waveform");
    let noise = unit_normal();
    let mut curves = Array2::zeros((n, m));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 3;
        labels.push(class);
        let u: f64 = rng.random();
        for j in 0..m {
            let eps: f64 = noise.sample(&mut rng);
            curves[[i, j]] = waveform_mean(class, u, (j + 1) as f64) + noise_sd * eps;
        }
    }
    Dataset::new(curves, grid)?.with_labels(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchOptions {
    /// Scales the per-regime offsets that distinguish cluster 1 from
    /// cluster 0; zero makes the clusters identical.
    pub separation: f64,
    pub noise_sd: f64,
    pub m: usize,
    /// Uniform jitter applied to each nominal change time.
    pub jitter: f64,
}

impl Default for SwitchOptions {
    fn default() -> Self {
        Self {
            separation: 1.0,
            noise_sd: 10.0,
            m: 111,
            jitter: 0.1,
        }
    }
}

const SWITCH_T_END: f64 = 5.5;
const SWITCH_CHANGES: [f64; 5] = [0.5, 1.0, 2.6, 3.4, 4.8];
const SWITCH_OFFSETS: [f64; 6] = [25.0, 40.0, 35.0, -50.0, 45.0, -35.0];

/// Mean of regime `k` at time `t` for the nominal (cluster 0) curve shape.
pub fn switch_regime_mean(k: usize, t: f64) -> f64 {
    match k {
        0 => 300.0 + 500.0 * t - 200.0 * t * t * t,
        1 => 520.0 - 350.0 * (t - 0.5) + 200.0 * (t - 0.5).powi(2),
        2 => 250.0 + 12.0 * (t - 1.8) - 6.0 * (t - 1.8).powi(3),
        3 => 420.0 - 900.0 * (t - 3.0).powi(2),
        4 => 260.0 - 8.0 * (t - 4.1) + 10.0 * (t - 4.1).powi(3),
        _ => 240.0 - 260.0 * (t - 4.8) + 60.0 * (t - 4.8).powi(2),
    }
}

pub fn gen_switchlike(n: usize, seed: u64) -> Result<Dataset> {
    gen_switchlike_with(n, seed, &SwitchOptions::default())
}

/// Six consecutive cubic phases with jittered change times; cluster 1 adds
/// `separation * SWITCH_OFFSETS[k]` to phase k. Clusters alternate.
pub fn gen_switchlike_with(n: usize, seed: u64, opts: &SwitchOptions) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("cannot generate zero curves"));
    }
    let grid = TimeGrid::linspace(0.0, SWITCH_T_END, opts.m)?;
    let mut rng = stream(seed, "simulate/switchlike");
    let noise = unit_normal();
    let mut curves = Array2::zeros((n, opts.m));
    let mut states = Array2::zeros((n, opts.m));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let g = i % 2;
        labels.push(g);
        let changes: Vec<f64> = SWITCH_CHANGES
            .iter()
            .map(|c| c + opts.jitter * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        for (j, &t) in grid.points().iter().enumerate() {
            let k = changes.iter().filter(|&&c| t >= c).count();
            states[[i, j]] = k;
            let offset = if g == 1 { opts.separation * SWITCH_OFFSETS[k] } else { 0.0 };
            let eps: f64 = noise.sample(&mut rng);
            curves[[i, j]] = switch_regime_mean(k, t) + offset + opts.noise_sd * eps;
        }
    }
    let mut data = Dataset::new(curves, grid)?.with_labels(labels)?;
    data.truth_states = Some(states);
    Ok(data)
}
