//! Reference data-generating processes on `[0, 1]`.
//!
//! Six densities with exact evaluation, CDF, sampling and population
//! parameters: a truncated normal, a sinusoid, three truncated Gaussian
//! mixtures and a two-level step.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::basis::check_support;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    TruncatedNormal,
    Sinusoidal,
    GmmSym3,
    GmmSpikes5,
    GmmAsym3,
    Step,
}

impl DgpKind {
    pub const ALL: [DgpKind; 6] = [
        DgpKind::TruncatedNormal,
        DgpKind::Sinusoidal,
        DgpKind::GmmSym3,
        DgpKind::GmmSpikes5,
        DgpKind::GmmAsym3,
        DgpKind::Step,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::TruncatedNormal => "truncated_normal",
            DgpKind::Sinusoidal => "sinusoidal",
            DgpKind::GmmSym3 => "gmm_sym3",
            DgpKind::GmmSpikes5 => "gmm_spikes5",
            DgpKind::GmmAsym3 => "gmm_asym3",
            DgpKind::Step => "step",
        }
    }

    /// Short label used in tables.
    pub fn short_name(self) -> &'static str {
        match self {
            DgpKind::TruncatedNormal => "TN",
            DgpKind::Sinusoidal => "Sine",
            DgpKind::GmmSym3 => "GS3",
            DgpKind::GmmSpikes5 => "GS5",
            DgpKind::GmmAsym3 => "GA3",
            DgpKind::Step => "Step",
        }
    }

    /// Stable small integer used when deriving random seeds.
    pub fn index(self) -> u64 {
        DgpKind::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

impl FromStr for DgpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        DgpKind::ALL
            .into_iter()
            .find(|k| k.name() == lower || k.short_name().to_ascii_lowercase() == lower)
            .ok_or_else(|| Error::UnknownDgp(s.to_string()))
    }
}

impl fmt::Display for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A normal distribution restricted to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub sd: f64,
}

fn std_normal() -> Normal {
    Normal::standard()
}

impl TruncatedNormal {
    fn bounds(&self) -> (f64, f64) {
        ((0.0 - self.mean) / self.sd, (1.0 - self.mean) / self.sd)
    }

    /// `Φ(β) - Φ(α)`.
    fn mass(&self) -> f64 {
        let n = std_normal();
        let (a, b) = self.bounds();
        n.cdf(b) - n.cdf(a)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        std_normal().pdf((x - self.mean) / self.sd) / (self.sd * self.mass())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let n = std_normal();
        let (a, _) = self.bounds();
        let z = ((x.clamp(0.0, 1.0)) - self.mean) / self.sd;
        ((n.cdf(z) - n.cdf(a)) / self.mass()).clamp(0.0, 1.0)
    }

    pub fn mean_value(&self) -> f64 {
        let n = std_normal();
        let (a, b) = self.bounds();
        self.mean + self.sd * (n.pdf(a) - n.pdf(b)) / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let n = std_normal();
        let (a, b) = self.bounds();
        let z = self.mass();
        let r = (n.pdf(a) - n.pdf(b)) / z;
        self.sd * self.sd * (1.0 + (a * n.pdf(a) - b * n.pdf(b)) / z - r * r)
    }

    pub fn second_moment(&self) -> f64 {
        self.variance() + self.mean_value().powi(2)
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n = std_normal();
        let (a, b) = self.bounds();
        let (lo, hi) = (n.cdf(a), n.cdf(b));
        let u = lo + rng.random::<f64>() * (hi - lo);
        (self.mean + self.sd * n.inverse_cdf(u)).clamp(0.0, 1.0)
    }
}

/// A weighted truncated-normal component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub dist: TruncatedNormal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Mixture(Vec<Component>),
    /// `(sin(πx) + offset) / C`.
    Sinusoidal { offset: f64 },
    /// `level_1` on `[0, break)`, `level_2` on `[break, 1]`, normalized.
    Step { level_1: f64, level_2: f64, breakpoint: f64 },
}

/// Population parameters of a DGP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationTruth {
    pub mean: f64,
    pub median: f64,
    pub variance: f64,
    pub second_moment: f64,
    pub survival_at_half: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    kind: DgpKind,
    shape: Shape,
}

fn component(mean: f64, sd: f64, weight: f64) -> Component {
    Component {
        weight,
        dist: TruncatedNormal { mean, sd },
    }
}

impl DgpSpec {
    pub fn new(kind: DgpKind) -> Self {
        let shape = match kind {
            DgpKind::TruncatedNormal => Shape::Mixture(vec![component(0.5, 0.1, 1.0)]),
            DgpKind::Sinusoidal => Shape::Sinusoidal { offset: 1.1 },
            DgpKind::GmmSym3 => Shape::Mixture(vec![
                component(0.2, 0.05, 0.33),
                component(0.5, 0.05, 0.34),
                component(0.8, 0.05, 0.33),
            ]),
            DgpKind::GmmSpikes5 => {
                let mut parts: Vec<Component> = [0.45, 0.475, 0.5, 0.525, 0.55]
                    .iter()
                    .map(|&m| component(m, 0.005, 1.0 / 15.0))
                    .collect();
                parts.push(component(0.5, 0.05, 2.0 / 3.0));
                Shape::Mixture(parts)
            }
            DgpKind::GmmAsym3 => Shape::Mixture(vec![
                component(0.35, 0.1, 0.4),
                component(0.65, 0.05, 0.4),
                component(0.9, 0.2, 0.2),
            ]),
            DgpKind::Step => Shape::Step {
                level_1: 1.0,
                level_2: 0.5,
                breakpoint: 0.7,
            },
        };
        Self { kind, shape }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn kind(&self) -> DgpKind {
        self.kind
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Exact density at `x ∈ [0, 1]`.
    pub fn density(&self, x: f64) -> Result<f64> {
        check_support(x)?;
        Ok(self.density_unchecked(x))
    }

    pub(crate) fn density_unchecked(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Mixture(parts) => parts.iter().map(|c| c.weight * c.dist.pdf(x)).sum(),
            Shape::Sinusoidal { offset } => ((PI * x).sin() + offset) / sine_constant(*offset),
            Shape::Step {
                level_1,
                level_2,
                breakpoint,
            } => {
                let c = level_1 * breakpoint + level_2 * (1.0 - breakpoint);
                if x < *breakpoint {
                    level_1 / c
                } else {
                    level_2 / c
                }
            }
        }
    }

    /// Exact CDF, clamped to `[0, 1]` outside the support.
    pub fn cdf(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match &self.shape {
            Shape::Mixture(parts) => parts.iter().map(|c| c.weight * c.dist.cdf(x)).sum::<f64>().clamp(0.0, 1.0),
            Shape::Sinusoidal { offset } => {
                ((1.0 - (PI * x).cos()) / PI + offset * x) / sine_constant(*offset)
            }
            Shape::Step {
                level_1,
                level_2,
                breakpoint,
            } => {
                let c = level_1 * breakpoint + level_2 * (1.0 - breakpoint);
                if x < *breakpoint {
                    level_1 * x / c
                } else {
                    (level_1 * breakpoint + level_2 * (x - breakpoint)) / c
                }
            }
        }
    }

    /// `inf {x : F(x) ≥ p}` by bisection on the exact CDF.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(crate::error::invalid("quantile level must lie in [0, 1]"));
        }
        Ok(self.quantile_unchecked(p))
    }

    fn quantile_unchecked(&self, p: f64) -> f64 {
        if let Shape::Step {
            level_1,
            level_2,
            breakpoint,
        } = &self.shape
        {
            let c = level_1 * breakpoint + level_2 * (1.0 - breakpoint);
            let at_break = level_1 * breakpoint / c;
            return if p <= at_break {
                p * c / level_1
            } else {
                breakpoint + (p - at_break) * c / level_2
            };
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-16 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.shape {
            Shape::Mixture(parts) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = parts.len() - 1;
                for (i, c) in parts.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                parts[chosen].dist.sample(rng)
            }
            _ => self.quantile_unchecked(rng.random()),
        }
    }

    /// `n` i.i.d. draws using the given generator.
    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }

    /// `n` i.i.d. draws from a ChaCha8 stream seeded with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn population_truth(&self) -> PopulationTruth {
        let (mean, second_moment) = match &self.shape {
            Shape::Mixture(parts) => parts.iter().fold((0.0, 0.0), |(m, s), c| {
                (m + c.weight * c.dist.mean_value(), s + c.weight * c.dist.second_moment())
            }),
            Shape::Sinusoidal { offset } => {
                let c = sine_constant(*offset);
                // ∫ x sin(πx) = 1/π and ∫ x² sin(πx) = (π² - 4)/π³ on [0, 1].
                let m = (1.0 / PI + offset / 2.0) / c;
                let s = ((PI * PI - 4.0) / PI.powi(3) + offset / 3.0) / c;
                (m, s)
            }
            Shape::Step {
                level_1,
                level_2,
                breakpoint: b,
            } => {
                let c = level_1 * b + level_2 * (1.0 - b);
                let m = (level_1 * b * b / 2.0 + level_2 * (1.0 - b * b) / 2.0) / c;
                let s = (level_1 * b.powi(3) / 3.0 + level_2 * (1.0 - b.powi(3)) / 3.0) / c;
                (m, s)
            }
        };
        PopulationTruth {
            mean,
            median: self.quantile_unchecked(0.5),
            variance: second_moment - mean * mean,
            second_moment,
            survival_at_half: 1.0 - self.cdf(0.5),
        }
    }
}

fn sine_constant(offset: f64) -> f64 {
    2.0 / PI + offset
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Midpoint rule with `m` cells.
    fn integrate(f: impl Fn(f64) -> f64, m: usize) -> f64 {
        (0..m).map(|i| f((i as f64 + 0.5) / m as f64)).sum::<f64>() / m as f64
    }

    #[test]
    fn density_examples() {
        let sine = DgpSpec::new(DgpKind::Sinusoidal);
        assert_abs_diff_eq!(sine.density(0.5).unwrap(), 2.1 / (2.0 / PI + 1.1), epsilon = 1e-15);
        assert_abs_diff_eq!(sine.density(0.5).unwrap(), 1.209246, epsilon = 1e-6);
        let step = DgpSpec::new(DgpKind::Step);
        assert_abs_diff_eq!(step.density(0.9).unwrap(), 0.5 / 0.85, epsilon = 1e-15);
        assert!(step.density(1.2).is_err());
    }

    #[test]
    fn densities_integrate_to_one() {
        for kind in DgpKind::ALL {
            let d = DgpSpec::new(kind);
            let total = integrate(|x| d.density_unchecked(x), 100_000);
            assert!((total - 1.0).abs() < 1e-6, "{kind}: {total}");
        }
    }

    #[test]
    fn mixture_weights_sum_to_one() {
        for kind in DgpKind::ALL {
            if let Shape::Mixture(parts) = DgpSpec::new(kind).shape() {
                let w: f64 = parts.iter().map(|c| c.weight).sum();
                assert!((w - 1.0).abs() < 1e-12, "{kind}");
                assert!(parts.iter().all(|c| c.dist.sd > 0.0));
            }
        }
    }

    #[test]
    fn cdf_endpoints_and_monotonicity() {
        for kind in DgpKind::ALL {
            let d = DgpSpec::new(kind);
            assert_abs_diff_eq!(d.cdf(0.0), 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(d.cdf(1.0), 1.0, epsilon = 1e-12);
            let mut prev = 0.0;
            for i in 1..=2000 {
                let x = i as f64 / 2000.0;
                let v = d.cdf(x);
                // Far in a Gaussian tail the increments drop below one ulp.
                if d.density_unchecked(x) > 1e-10 {
                    assert!(v > prev, "{kind} at {i}");
                } else {
                    assert!(v >= prev, "{kind} at {i}");
                }
                prev = v;
            }
        }
    }

    #[test]
    fn cdf_is_integral_of_density() {
        for kind in DgpKind::ALL {
            let d = DgpSpec::new(kind);
            for &x in &[0.13, 0.5, 0.71, 0.95] {
                let m = 200_000;
                let approx = (0..m).map(|i| d.density_unchecked((i as f64 + 0.5) / m as f64 * x)).sum::<f64>() * x / m as f64;
                // The midpoint rule loses one cell's worth of accuracy at the step.
                let tol = if kind == DgpKind::Step { 5e-6 } else { 1e-7 };
                assert!((approx - d.cdf(x)).abs() < tol, "{kind} at {x}");
            }
        }
    }

    #[test]
    fn truth_matches_quadrature() {
        for kind in DgpKind::ALL {
            let d = DgpSpec::new(kind);
            let t = d.population_truth();
            let mean = integrate(|x| x * d.density_unchecked(x), 1_000_000);
            let second = integrate(|x| x * x * d.density_unchecked(x), 1_000_000);
            assert!((mean - t.mean).abs() < 1e-8, "{kind}");
            assert!((second - t.second_moment).abs() < 1e-8, "{kind}");
            assert!((t.variance - (t.second_moment - t.mean * t.mean)).abs() < 1e-9);
            assert!((d.cdf(t.median) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_normal_variance_is_just_below_table() {
        let t = DgpSpec::new(DgpKind::TruncatedNormal).population_truth();
        assert!(t.variance < 0.01);
        assert_abs_diff_eq!(t.variance, 0.010000, epsilon = 5e-7);
    }

    #[test]
    fn symmetric_processes_have_exact_halves() {
        for kind in [DgpKind::TruncatedNormal, DgpKind::Sinusoidal, DgpKind::GmmSym3, DgpKind::GmmSpikes5] {
            let t = DgpSpec::new(kind).population_truth();
            assert_abs_diff_eq!(t.mean, 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(t.median, 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(t.survival_at_half, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn step_truth_closed_form() {
        let t = DgpSpec::new(DgpKind::Step).population_truth();
        assert_abs_diff_eq!(t.mean, 0.745 / 1.7, epsilon = 1e-15);
        assert_abs_diff_eq!(t.median, 0.425, epsilon = 1e-15);
        assert_abs_diff_eq!(t.survival_at_half, 0.35 / 0.85, epsilon = 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_and_in_support() {
        for kind in DgpKind::ALL {
            let d = DgpSpec::new(kind);
            let a = d.sample(500, 99);
            assert_eq!(a, d.sample(500, 99));
            assert_ne!(a, d.sample(500, 100));
            assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn kolmogorov_smirnov_sanity() {
        for kind in DgpKind::ALL {
            let d = DgpSpec::new(kind);
            let mut xs = d.sample(100_000, 7 + kind.index());
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let sup = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = d.cdf(x);
                    (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
                })
                .fold(0.0, f64::max);
            assert!(sup < 0.01, "{kind}: {sup}");
        }
    }

    #[test]
    fn asymmetric_mixture_sample_mean() {
        let d = DgpSpec::new(DgpKind::GmmAsym3);
        let t = d.population_truth();
        let n = 1_000_000;
        let xs = d.sample(n, 2024);
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.559669).abs() < 3.0 * t.variance.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn names_round_trip() {
        for kind in DgpKind::ALL {
            assert_eq!(kind.name().parse::<DgpKind>().unwrap(), kind);
            assert_eq!(kind.short_name().parse::<DgpKind>().unwrap(), kind);
        }
        assert!(matches!("galaxy".parse::<DgpKind>(), Err(Error::UnknownDgp(_))));
    }
}
