//! Synthetic sensor networks with a controllable shift between source and
//! target domains.
//!
//! Each domain gets its own random geometric graph. A node's reading is a
//! spatially smooth baseline plus a daily sinusoid plus AR(1) noise whose
//! innovations are diffused over the graph, all scaled by the domain's speed
//! factor.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EvalError, Result};
use crate::data::{Graph, SignalTensor};

/// 2024-01-01 00:00 UTC, a Monday.
pub const DEFAULT_START: i64 = 1_704_067_200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    pub speed_scale: f64,
    /// Hours added to the daily phase.
    pub phase_shift: f64,
    pub noise_scale: f64,
}

impl Shift {
    pub const NONE: Shift = Shift { speed_scale: 1.0, phase_shift: 0.0, noise_scale: 1.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_nodes: usize,
    pub num_sources: usize,
    pub source_days: usize,
    pub target_days: usize,
    /// Seconds per step.
    pub interval: i64,
    /// Connection radius in the unit square.
    pub radius: f64,
    pub seed: u64,
    pub base_level: f64,
    /// Standard deviation of node baselines before smoothing.
    pub node_spread: f64,
    pub amplitude: f64,
    pub noise_level: f64,
    pub ar_coeff: f64,
    /// Source `k` of `P` has its phase offset by `jitter · (k − (P−1)/2)` hours.
    pub source_phase_jitter: f64,
    pub target: Shift,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_nodes: 20,
            num_sources: 3,
            source_days: 7,
            target_days: 14,
            interval: 300,
            radius: 0.35,
            seed: 0,
            base_level: 50.0,
            node_spread: 8.0,
            amplitude: 15.0,
            noise_level: 4.0,
            ar_coeff: 0.99,
            source_phase_jitter: 1.0,
            target: Shift { speed_scale: 0.8, phase_shift: 4.0, noise_scale: 1.0 },
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvalError::Invalid(format!("synthetic spec: {m}")));
        if self.num_sources == 0 || self.num_nodes == 0 || self.source_days == 0 || self.target_days == 0 {
            return bad("counts must be positive");
        }
        if self.interval <= 0 || 86_400 % self.interval != 0 {
            return bad("interval must divide one day");
        }
        if !(self.radius > 0.0) || !(self.target.speed_scale > 0.0) || !(self.target.noise_scale > 0.0) || !(self.noise_level > 0.0) {
            return bad("scales must be positive");
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return bad("ar_coeff must lie in [0, 1)");
        }
        Ok(())
    }

    /// Flat `key=value` form, `target.` prefix for the shift.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| EvalError::Invalid(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let f = || v.parse::<f64>().map_err(|e| EvalError::Invalid(format!("`{k}`: {e}")));
            let u = || v.parse::<usize>().map_err(|e| EvalError::Invalid(format!("`{k}`: {e}")));
            match k {
                "num_nodes" => s.num_nodes = u()?,
                "num_sources" => s.num_sources = u()?,
                "source_days" => s.source_days = u()?,
                "target_days" => s.target_days = u()?,
                "interval" => s.interval = u()? as i64,
                "radius" => s.radius = f()?,
                "seed" => s.seed = v.parse().map_err(|e| EvalError::Invalid(format!("`seed`: {e}")))?,
                "base_level" => s.base_level = f()?,
                "node_spread" => s.node_spread = f()?,
                "amplitude" => s.amplitude = f()?,
                "noise_level" => s.noise_level = f()?,
                "ar_coeff" => s.ar_coeff = f()?,
                "source_phase_jitter" => s.source_phase_jitter = f()?,
                "target.speed_scale" => s.target.speed_scale = f()?,
                "target.phase_shift" => s.target.phase_shift = f()?,
                "target.noise_scale" => s.target.noise_scale = f()?,
                other => return Err(EvalError::Invalid(format!("unknown synthetic spec key `{other}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn source_shift(&self, k: usize) -> Shift {
        let centre = (self.num_sources as f64 - 1.0) / 2.0;
        Shift { phase_shift: self.source_phase_jitter * (k as f64 - centre), ..Shift::NONE }
    }
}

fn geometric_graph(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let sigma = radius / 2.0;
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return 1.0;
        }
        let d = ((pos[i].0 - pos[j].0).powi(2) + (pos[i].1 - pos[j].1).powi(2)).sqrt();
        if d <= radius {
            (-(d / sigma).powi(2)).exp()
        } else {
            0.0
        }
    })
}

fn row_normalised(a: &Array2<f64>) -> Array2<f64> {
    let mut p = a.clone();
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

fn domain(spec: &SynthSpec, days: usize, shift: Shift, domain_seed: u64) -> (Graph, SignalTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed);
    let n = spec.num_nodes;
    let adjacency = geometric_graph(n, spec.radius, &mut rng);
    let diffuse = row_normalised(&adjacency);
    let offsets = diffuse.dot(&diffuse.dot(&normal_vec(n, &mut rng)));
    let centred = &offsets - offsets.mean().unwrap_or(0.0);
    let baseline = centred * spec.node_spread + spec.base_level;
    let amp = (diffuse.dot(&normal_vec(n, &mut rng)) * 0.2 + 1.0) * spec.amplitude;
    let node_phase = diffuse.dot(&normal_vec(n, &mut rng)) * 0.5;
    let steps = days * (86_400 / spec.interval) as usize;
    let innovation = (1.0 - spec.ar_coeff * spec.ar_coeff).sqrt() * spec.noise_level * shift.noise_scale;
    let mut noise = Array1::<f64>::zeros(n);
    let mut values = Array3::zeros((n, steps, 1));
    for t in 0..steps {
        let z = diffuse.dot(&normal_vec(n, &mut rng));
        noise = &noise * spec.ar_coeff + &(z * innovation);
        let hour = (t as i64 * spec.interval).rem_euclid(86_400) as f64 / 3600.0;
        for i in 0..n {
            let daily = amp[i] * (2.0 * PI * (hour - shift.phase_shift - node_phase[i]) / 24.0).sin();
            values[[i, t, 0]] = shift.speed_scale * (baseline[i] + daily + noise[i]);
        }
    }
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let graph = Graph::new(adjacency, ids).expect("generated adjacency lies in [0, 1]");
    let signal = SignalTensor::new(values, DEFAULT_START, spec.interval, vec!["speed".into()]).expect("finite values");
    (graph, signal)
}

/// `P` source domains followed by the target domain.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<(Graph, SignalTensor)>> {
    spec.validate()?;
    let mut out: Vec<(Graph, SignalTensor)> = (0..spec.num_sources)
        .map(|k| domain(spec, spec.source_days, spec.source_shift(k), spec.seed.wrapping_mul(1000).wrapping_add(k as u64)))
        .collect();
    out.push(domain(spec, spec.target_days, spec.target, spec.seed.wrapping_mul(1000).wrapping_add(999)));
    Ok(out)
}

/// Mean over nodes and days of each hour-of-day slot.
fn hourly_profile(signal: &SignalTensor) -> [f64; 24] {
    let mut sum = [0.0; 24];
    let mut count = [0usize; 24];
    for t in 0..signal.num_steps() {
        let h = (signal.timestamp(t).rem_euclid(86_400) / 3600) as usize;
        for i in 0..signal.num_nodes() {
            sum[h] += signal.values[[i, t, 0]];
            count[h] += 1;
        }
    }
    std::array::from_fn(|h| sum[h] / count[h].max(1) as f64)
}

/// Mean absolute difference between the target's hour-of-day marginal means
/// and the average of the sources' ones.
pub fn distribution_distance(sources: &[SignalTensor], target: &SignalTensor) -> f64 {
    let profiles: Vec<[f64; 24]> = sources.iter().map(hourly_profile).collect();
    let t = hourly_profile(target);
    (0..24).map(|h| (t[h] - profiles.iter().map(|p| p[h]).sum::<f64>() / profiles.len() as f64).abs()).sum::<f64>() / 24.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bitwise_eq;

    fn small() -> SynthSpec {
        SynthSpec { num_nodes: 8, source_days: 2, target_days: 2, ..SynthSpec::default() }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.len(), 4);
        for ((ga, sa), (gb, sb)) in a.iter().zip(&b) {
            assert!(bitwise_eq(&ga.adjacency, &gb.adjacency));
            assert!(sa.values.iter().zip(sb.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(ga.adjacency.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert_eq!(sa.num_steps(), 2 * 288);
        }
        let c = generate_synthetic(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].1.values, c[0].1.values);
    }

    fn distance(phase: f64, speed: f64) -> f64 {
        let spec = SynthSpec { num_nodes: 10, source_days: 4, target_days: 4, source_phase_jitter: 0.0, target: Shift { speed_scale: speed, phase_shift: phase, noise_scale: 1.0 }, ..SynthSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        let (sources, target) = data.split_at(spec.num_sources);
        distribution_distance(&sources.iter().map(|d| d.1.clone()).collect::<Vec<_>>(), &target[0].1)
    }

    #[test]
    fn distance_grows_with_shift() {
        let d: Vec<f64> = [0.0, 2.0, 4.0].iter().map(|&p| distance(p, 1.0)).collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
        let s: Vec<f64> = [1.0, 0.9, 0.8].iter().map(|&k| distance(0.0, k)).collect();
        assert!(s[0] < s[1] && s[1] < s[2], "{s:?}");
    }

    #[test]
    fn null_shift_matches_sources() {
        // the null-shift distance is sampling noise: well below the amplitude
        let d = distance(0.0, 1.0);
        assert!(d < 0.15 * SynthSpec::default().amplitude, "{d}");
    }

    #[test]
    fn spec_text() {
        let s = SynthSpec::parse("num_nodes=12\ntarget.phase_shift=2 # hours\n").unwrap();
        assert_eq!(s.num_nodes, 12);
        assert_eq!(s.target.phase_shift, 2.0);
        assert!(SynthSpec::parse("bogus=1").is_err());
        assert!(SynthSpec::parse("interval=7").is_err());
    }
}
