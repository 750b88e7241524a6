//! Forward and reverse Gaussian diffusion over image tensors.
//!
//! Steps are 1-based: `t ∈ 1..=T`. All coefficients are held in `f64`; the
//! tensors themselves stay `f32`. Every sampling function draws its noise from
//! the caller's random source, so identical seeds give bit-identical results.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

/// The β/α/ᾱ tables for a fixed number of diffusion steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Schedule from explicit betas, each strictly inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    /// Skips the open-interval check so tests can probe the β = 0 limit.
    pub(crate) fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self { betas, alphas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ_{t-1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t. Zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·z0 + ct·z_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_prev(t);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    /// Variance of the model's reverse transition at step `t`. The last step
    /// (t = 1) is deterministic.
    pub fn reverse_variance(&self, t: usize, mode: SigmaMode) -> f64 {
        if t == 1 {
            return 0.0;
        }
        match mode {
            SigmaMode::Posterior => self.posterior_variance(t),
            SigmaMode::Beta => self.beta(t),
        }
    }
}

/// Which fixed variance the reverse process uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SigmaMode {
    /// β̃_t, the true posterior variance.
    #[default]
    Posterior,
    /// β_t, the forward variance.
    Beta,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(SigmaMode::Posterior),
            "beta" => Ok(SigmaMode::Beta),
            other => Err(Error::Config(format!("unknown sigma mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::Posterior => "posterior",
            SigmaMode::Beta => "beta",
        })
    }
}

/// Diagonal covariance: one shared value or one per element.
#[derive(Clone, Debug, PartialEq)]
pub enum Variance {
    Scalar(f64),
    PerElement(Vec<f64>),
}

impl Variance {
    fn at(&self, i: usize) -> f64 {
        match self {
            Variance::Scalar(v) => *v,
            Variance::PerElement(v) => v[i],
        }
    }
}

/// A diagonal Gaussian over an image-shaped random variable.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: ImageTensor,
    pub variance: Variance,
}

impl GaussianParams {
    pub fn new(mean: ImageTensor, variance: Variance) -> Result<Self> {
        let ok = match &variance {
            Variance::Scalar(v) => *v > 0.0 && v.is_finite(),
            Variance::PerElement(v) => {
                if v.len() != mean.len() {
                    return Err(Error::shape(format!(
                        "variance has {} entries for a mean of {}",
                        v.len(),
                        mean.len()
                    )));
                }
                v.iter().all(|x| *x > 0.0 && x.is_finite())
            }
        };
        if !ok {
            return Err(Error::Parameter("variance must be strictly positive".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn scalar_variance(&self) -> Option<f64> {
        match self.variance {
            Variance::Scalar(v) => Some(v),
            Variance::PerElement(_) => None,
        }
    }
}

fn axpby(a: f64, x: &ImageTensor, b: f64, y: &ImageTensor) -> ImageTensor {
    let (a, b) = (a as f32, b as f32);
    let data = x.data().iter().zip(y.data()).map(|(&x, &y)| a * x + b * y).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// One forward transition: √α_t·z_{t−1} + √β_t·ε.
pub fn forward_step_sample<R: Rng + ?Sized>(
    z_prev: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    sched.check_step(t)?;
    let eps = Tensor::<f32>::randn(z_prev.shape(), rng);
    Ok(axpby(sched.alpha(t).sqrt(), z_prev, sched.beta(t).sqrt(), &eps))
}

/// q(z_t | z_0) = N(√ᾱ_t·z_0, (1 − ᾱ_t) I).
pub fn forward_marginal_params(
    z0: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<GaussianParams> {
    sched.check_step(t)?;
    let scale = sched.alpha_bar(t).sqrt() as f32;
    GaussianParams::new(z0.map(|v| scale * v), Variance::Scalar(1.0 - sched.alpha_bar(t)))
}

/// z_t = √ᾱ_t·z_0 + √(1 − ᾱ_t)·ε for a caller-supplied ε.
pub fn forward_marginal_with_noise(
    z0: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    sched.check_step(t)?;
    z0.same_shape(eps)?;
    let ab = sched.alpha_bar(t);
    Ok(axpby(ab.sqrt(), z0, (1.0 - ab).sqrt(), eps))
}

/// Draws z_t from q(z_t | z_0) and returns it together with the noise used.
pub fn forward_marginal_sample<R: Rng + ?Sized>(
    z0: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    sched.check_step(t)?;
    let eps = Tensor::<f32>::randn(z0.shape(), rng);
    let zt = forward_marginal_with_noise(z0, t, sched, &eps)?;
    Ok((zt, eps))
}

/// Law of z_t along the reverse chain started from z_T = x when every clean
/// estimate equals z0: z_t ~ N(p·x + q·z0, v). Returns `(p, q, v)`.
pub fn chain_marginal_coefficients(t: usize, sched: &NoiseSchedule, mode: SigmaMode) -> Result<(f64, f64, f64)> {
    sched.check_step(t)?;
    let (mut p, mut q, mut v) = (1.0, 0.0, 0.0);
    for s in (t + 1..=sched.steps()).rev() {
        let (c0, ct) = sched.posterior_coefficients(s);
        p *= ct;
        q = c0 + ct * q;
        v = ct * ct * v + sched.reverse_variance(s, mode);
    }
    Ok((p, q, v))
}

/// Draws z_t from the chain law of [`chain_marginal_coefficients`].
pub fn chain_marginal_sample<R: Rng + ?Sized>(
    x: &ImageTensor,
    z0: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    mode: SigmaMode,
    rng: &mut R,
) -> Result<ImageTensor> {
    x.same_shape(z0)?;
    let (p, q, v) = chain_marginal_coefficients(t, sched, mode)?;
    let eps = Tensor::<f32>::randn(x.shape(), rng);
    let mean = axpby(p, x, q, z0);
    Ok(axpby(1.0, &mean, v.sqrt(), &eps))
}

/// Mean of q(z_{t−1} | z_t, z_0) without the variance bookkeeping.
pub fn posterior_mean(
    z0: &ImageTensor,
    zt: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    sched.check_step(t)?;
    z0.same_shape(zt)?;
    let (c0, ct) = sched.posterior_coefficients(t);
    Ok(axpby(c0, z0, ct, zt))
}

/// The Gaussian posterior q(z_{t−1} | z_t, z_0), defined for t ≥ 2.
pub fn posterior_params(
    z0: &ImageTensor,
    zt: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<GaussianParams> {
    sched.check_step(t)?;
    if t < 2 {
        return Err(Error::Step { t, max: sched.steps() });
    }
    let mean = posterior_mean(z0, zt, t, sched)?;
    GaussianParams::new(mean, Variance::Scalar(sched.posterior_variance(t)))
}

/// One reverse transition z_{t−1} = μ + √σ²·ε. `sigma2 = 0` is only
/// accepted at t = 1, where it returns `mu` unchanged.
pub fn reverse_step<R: Rng + ?Sized>(
    zt: &ImageTensor,
    t: usize,
    mu: &ImageTensor,
    sigma2: f64,
    rng: &mut R,
) -> Result<ImageTensor> {
    zt.same_shape(mu)?;
    if t == 0 {
        return Err(Error::Step { t, max: usize::MAX });
    }
    if !sigma2.is_finite() || sigma2 < 0.0 || (sigma2 == 0.0 && t > 1) {
        return Err(Error::Parameter(format!("reverse variance {sigma2} invalid at step {t}")));
    }
    if sigma2 == 0.0 {
        return Ok(mu.clone());
    }
    let eps = Tensor::<f32>::randn(mu.shape(), rng);
    let s = sigma2.sqrt() as f32;
    let data = mu.data().iter().zip(eps.data()).map(|(&m, &e)| m + s * e).collect();
    Ok(Tensor::from_parts(mu.shape().to_vec(), data))
}

/// KL(p ‖ q) for diagonal Gaussians, summed over elements.
pub fn gaussian_kl(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    p.mean.same_shape(&q.mean)?;
    let mut kl = 0.0;
    for (i, (&mp, &mq)) in p.mean.data().iter().zip(q.mean.data()).enumerate() {
        let vp = p.variance.at(i);
        let vq = q.variance.at(i);
        let dm = mp as f64 - mq as f64;
        kl += 0.5 * ((vq / vp).ln() + (vp + dm * dm) / vq - 1.0);
    }
    // rounding can leave a tiny negative residue for matched distributions
    Ok(kl.max(0.0))
}

/// Knobs for [`vlb`].
#[derive(Clone, Copy, Debug)]
pub struct VlbOptions {
    pub sigma: SigmaMode,
    /// Variance of the t = 1 reconstruction density, replacing the degenerate σ² = 0.
    pub recon_variance_floor: f64,
}

impl Default for VlbOptions {
    fn default() -> Self {
        Self { sigma: SigmaMode::Posterior, recon_variance_floor: 1e-4 }
    }
}

/// Single-sample estimate of the variational bound:
/// −log p(z_0 | z_1) + Σ_{t=2..T} KL(q(z_{t−1} | z_t, z_0) ‖ p(z_{t−1} | z_t)).
///
/// `denoiser(z_t, t)` returns the model's reverse mean μ_θ(z_t, t).
pub fn vlb<F, R>(
    z0: &ImageTensor,
    mut denoiser: F,
    sched: &NoiseSchedule,
    opts: VlbOptions,
    rng: &mut R,
) -> Result<f64>
where
    F: FnMut(&ImageTensor, usize) -> Result<ImageTensor>,
    R: Rng + ?Sized,
{
    let (z1, _) = forward_marginal_sample(z0, 1, sched, rng)?;
    let mu1 = denoiser(&z1, 1)?;
    z0.same_shape(&mu1)?;
    let var = sched.reverse_variance(1, opts.sigma).max(opts.recon_variance_floor);
    let log_norm = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut total: f64 = z0
        .data()
        .iter()
        .zip(mu1.data())
        .map(|(&x, &m)| {
            let d = x as f64 - m as f64;
            log_norm + d * d / (2.0 * var)
        })
        .sum();

    for t in 2..=sched.steps() {
        let (zt, _) = forward_marginal_sample(z0, t, sched, rng)?;
        let q = posterior_params(z0, &zt, t, sched)?;
        let mu = denoiser(&zt, t)?;
        let p = GaussianParams::new(mu, Variance::Scalar(sched.reverse_variance(t, opts.sigma)))?;
        total += gaussian_kl(&q, &p)?;
    }
    Ok(total)
}
