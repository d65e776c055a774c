//! Embedding-noise regularizers and the noisy-retrieval simulator.
//!
//! The Gaussian regularizer draws `N(0, σ)` with `σ = λ · mean(|M|)` for an
//! embedding matrix `M`, so its strength is relative to the matrix's own
//! magnitude. The uniform regularizer follows the NEFTune scaling
//! `α / sqrt(L · d)` for an `L × d` matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Float;

pub type NoiseRng = ChaCha8Rng;

/// Folds a tuple of indices (step, sample, slot, ...) into one stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5851_f42d_4c95_7f2d, |h, &p| crate::embed::splitmix64(h ^ p))
}

/// Independent, reproducible stream for `(global_seed, stream)`.
pub fn derive_rng(global_seed: u64, stream: u64) -> NoiseRng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    Gaussian { lambda: f64 },
    Uniform { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Sequence,
    #[default]
    Neighbors,
    Both,
}

impl std::str::FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(Placement::Sequence),
            "neighbors" => Ok(Placement::Neighbors),
            "both" => Ok(Placement::Both),
            _ => Err(Error::Config(format!("unknown placement '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct RegularizerSpec {
    pub kind: Regularizer,
    pub placement: Placement,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn gaussian(lambda: f64, placement: Placement) -> Self {
        Self {
            kind: Regularizer::Gaussian { lambda },
            placement,
        }
    }

    pub fn uniform(alpha: f64, placement: Placement) -> Self {
        Self {
            kind: Regularizer::Uniform { alpha },
            placement,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            Regularizer::Gaussian { lambda } if !(lambda >= 0.0) => {
                Err(Error::Config(format!("lambda_t must be >= 0, got {lambda}")))
            }
            Regularizer::Uniform { alpha } if !(alpha >= 0.0) => {
                Err(Error::Config(format!("alpha must be >= 0, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub fn on_sequence(&self) -> Option<Regularizer> {
        matches!(self.placement, Placement::Sequence | Placement::Both).then_some(self.kind)
    }

    pub fn on_neighbors(&self) -> Option<Regularizer> {
        matches!(self.placement, Placement::Neighbors | Placement::Both).then_some(self.kind)
    }

    /// Short label used in reports, e.g. `gauss(0.2)@neighbors`.
    pub fn label(&self) -> String {
        match self.kind {
            Regularizer::None => "none".to_string(),
            Regularizer::Gaussian { lambda } => format!("gauss({lambda})@{}", self.placement_name()),
            Regularizer::Uniform { alpha } => format!("uniform({alpha})@{}", self.placement_name()),
        }
    }

    fn placement_name(&self) -> &'static str {
        match self.placement {
            Placement::Sequence => "sequence",
            Placement::Neighbors => "neighbors",
            Placement::Both => "both",
        }
    }
}

/// Inference-time read noise on the retrieved neighbor embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InferenceNoiseSpec {
    pub lambda_i: f64,
}

impl InferenceNoiseSpec {
    pub fn new(lambda_i: f64) -> Result<Self> {
        if !(lambda_i >= 0.0) {
            return Err(Error::Config(format!("lambda_i must be >= 0, got {lambda_i}")));
        }
        Ok(Self { lambda_i })
    }
}

/// `λ · mean(|M|)`.
pub fn noise_sigma<F: Float>(m: &[F], lambda: f64) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("empty embedding matrix".into()));
    }
    let mean_abs = m.iter().map(|x| x.to_f64c().abs()).sum::<f64>() / m.len() as f64;
    Ok(lambda * mean_abs)
}

/// The additive draw `E` for one matrix, or `None` when the magnitude is zero.
pub fn sample_noise<F: Float>(
    m: &[F],
    rows: usize,
    kind: Regularizer,
    rng: &mut NoiseRng,
) -> Result<Option<Vec<F>>> {
    match kind {
        Regularizer::None => Ok(None),
        Regularizer::Gaussian { lambda } => {
            let sigma = noise_sigma(m, lambda)?;
            if sigma == 0.0 {
                return Ok(None);
            }
            Ok(Some(
                (0..m.len())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        F::from_f64c(z * sigma)
                    })
                    .collect(),
            ))
        }
        Regularizer::Uniform { alpha } => {
            if alpha == 0.0 || m.is_empty() {
                return Ok(None);
            }
            let scale = alpha / (m.len() as f64).sqrt();
            debug_assert!(rows > 0 && m.len() % rows == 0);
            Ok(Some(
                (0..m.len())
                    .map(|_| F::from_f64c(rng.random_range(-1.0..=1.0) * scale))
                    .collect(),
            ))
        }
    }
}

fn add_noise<F: Float>(m: &[F], e: Option<Vec<F>>) -> Vec<F> {
    match e {
        None => m.to_vec(),
        Some(e) => m.iter().zip(e).map(|(&x, n)| x + n).collect(),
    }
}

/// `M + E` with `E ~ N(0, λ·mean|M|)` elementwise.
pub fn apply_gaussian<F: Float>(m: &[F], lambda: f64, rng: &mut NoiseRng) -> Result<Vec<F>> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let e = sample_noise(m, 1, Regularizer::Gaussian { lambda }, rng)?;
    Ok(add_noise(m, e))
}

/// `M + U·α/sqrt(L·d)` with `U ~ Uniform[-1, 1]` for an `L × d` matrix.
pub fn apply_uniform<F: Float>(m: &[F], rows: usize, alpha: f64, rng: &mut NoiseRng) -> Result<Vec<F>> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    if rows == 0 || m.len() % rows != 0 {
        return Err(Error::Shape(format!("{} elements do not form {rows} rows", m.len())));
    }
    let e = sample_noise(m, rows, Regularizer::Uniform { alpha }, rng)?;
    Ok(add_noise(m, e))
}

/// Gaussian read noise applied to a neighbor-embedding tensor at evaluation time.
pub fn apply_inference_noise<F: Float>(
    neighbor_embeddings: &[F],
    spec: InferenceNoiseSpec,
    rng: &mut NoiseRng,
) -> Result<Vec<F>> {
    apply_gaussian(neighbor_embeddings, spec.lambda_i, rng)
}

/// `mean(M²) / mean(E²)` for one fresh draw `E = noise_fn(M) - M`; infinite when `E = 0`.
pub fn measure_snr<F: Float>(m: &[F], noise_fn: impl FnOnce(&[F]) -> Vec<F>) -> f64 {
    let noisy = noise_fn(m);
    let signal = m.iter().map(|x| x.to_f64c().powi(2)).sum::<f64>() / m.len() as f64;
    let noise = m
        .iter()
        .zip(&noisy)
        .map(|(x, y)| (y.to_f64c() - x.to_f64c()).powi(2))
        .sum::<f64>()
        / m.len() as f64;
    if noise == 0.0 {
        f64::INFINITY
    } else {
        signal / noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(a: &[f32], b: &[f32]) -> (f64, f64) {
        let n = a.len() as f64;
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| f64::from(*y) - f64::from(*x)).collect();
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn sigma_examples() {
        let pm: Vec<f32> = (0..100).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        assert!((noise_sigma(&pm, 0.2).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(noise_sigma(&pm, 0.0).unwrap(), 0.0);
        let m = [1.0f32, -3.0, 2.0, 0.0];
        assert!((noise_sigma(&m, 0.4).unwrap() - 0.6).abs() < 1e-12);
        assert!(noise_sigma::<f32>(&[], 0.4).is_err());
    }

    #[test]
    fn sigma_scales_linearly() {
        let m: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        for c in [0.5, 2.0, 8.0] {
            let scaled: Vec<f64> = m.iter().map(|x| x * c).collect();
            let a = noise_sigma(&scaled, 0.3).unwrap();
            let b = c * noise_sigma(&m, 0.3).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn zero_magnitude_is_exact_identity() {
        let m: Vec<f32> = (0..64).map(|i| i as f32 * -0.25).collect();
        let mut rng = derive_rng(1, 0);
        assert_eq!(apply_gaussian(&m, 0.0, &mut rng).unwrap(), m);
        assert_eq!(apply_uniform(&m, 8, 0.0, &mut rng).unwrap(), m);
        let spec = InferenceNoiseSpec::new(0.0).unwrap();
        assert_eq!(apply_inference_noise(&m, spec, &mut rng).unwrap(), m);
    }

    #[test]
    fn gaussian_moments_on_a_million_elements() {
        let m = vec![1.0f32; 1_000_000];
        let mut rng = derive_rng(42, 0);
        let noisy = apply_gaussian(&m, 0.2, &mut rng).unwrap();
        let (mean, std) = moments(&m, &noisy);
        assert!((0.198..=0.202).contains(&std), "std {std}");
        // 3σ/√n
        assert!(mean.abs() <= 3.0 * 0.2 / 1000.0, "mean {mean}");
    }

    #[test]
    fn same_seed_same_draw() {
        let m: Vec<f32> = (0..100).map(|i| i as f32).collect();
        let a = apply_gaussian(&m, 0.3, &mut derive_rng(5, 2)).unwrap();
        let b = apply_gaussian(&m, 0.3, &mut derive_rng(5, 2)).unwrap();
        let c = apply_gaussian(&m, 0.3, &mut derive_rng(5, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_amplitude_bound() {
        let (l, d) = (64, 16);
        let m = vec![0.5f32; l * d];
        let noisy = apply_uniform(&m, l, 10.0, &mut derive_rng(0, 0)).unwrap();
        let bound = 10.0 / 32.0;
        let max = m
            .iter()
            .zip(&noisy)
            .map(|(a, b)| (b - a).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= bound + 1e-6, "max {max}");
        assert!(max > 0.9 * bound);
        for alpha in [5.0, 10.0, 15.0] {
            assert!(RegularizerSpec::uniform(alpha, Placement::Sequence).validate().is_ok());
        }
        assert!(RegularizerSpec::gaussian(-0.1, Placement::Both).validate().is_err());
    }

    #[test]
    fn inference_sweep_values_accepted() {
        for l in [0.0, 0.2, 0.4, 1.0] {
            assert!(InferenceNoiseSpec::new(l).is_ok());
        }
        assert!(InferenceNoiseSpec::new(-1.0).is_err());
    }

    #[test]
    fn snr_examples() {
        let m = vec![1.0f32; 1_000_000];
        assert_eq!(measure_snr(&m, |x| x.to_vec()), f64::INFINITY);
        let mut rng = derive_rng(9, 0);
        let snr = measure_snr(&m, |x| apply_gaussian(x, 0.2, &mut rng).unwrap());
        assert!((snr - 25.0).abs() / 25.0 < 0.05, "snr {snr}");
        // σ tracks mean|M|, so scaling M leaves the SNR unchanged
        let base: Vec<f32> = (0..200_000).map(|i| ((i % 17) as f32 - 8.0) * 0.1).collect();
        let snr_at = |c: f32| {
            let scaled: Vec<f32> = base.iter().map(|x| x * c).collect();
            let mut rng = derive_rng(3, 0);
            measure_snr(&scaled, |x| apply_gaussian(x, 0.2, &mut rng).unwrap())
        };
        let s1 = snr_at(1.0);
        for c in [0.5, 2.0] {
            assert!((snr_at(c) - s1).abs() / s1 < 1e-3);
        }
    }

    #[test]
    fn gaussian_and_uniform_snr_comparable() {
        // λ=0.2 Gaussian vs α=10 uniform on a 64×16 matrix land within one order of magnitude
        let m: Vec<f32> = (0..64 * 16).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let g = measure_snr(&m, |x| apply_gaussian(x, 0.2, &mut derive_rng(1, 0)).unwrap());
        let u = measure_snr(&m, |x| apply_uniform(x, 64, 10.0, &mut derive_rng(1, 1)).unwrap());
        assert!((g / u).log10().abs() < 1.0, "gauss {g} uniform {u}");
    }

    #[test]
    fn placement_routing() {
        let s = RegularizerSpec::gaussian(0.2, Placement::Neighbors);
        assert!(s.on_sequence().is_none() && s.on_neighbors().is_some());
        let s = RegularizerSpec::gaussian(0.2, Placement::Sequence);
        assert!(s.on_sequence().is_some() && s.on_neighbors().is_none());
        let s = RegularizerSpec::gaussian(0.2, Placement::Both);
        assert!(s.on_sequence().is_some() && s.on_neighbors().is_some());
    }
}
