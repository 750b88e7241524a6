//! Restoration path: the network predicts the clean image ẑ_0 from (z_t, t),
//! and the reverse chain turns those predictions into posterior means.

use rand::Rng;

use crate::diffusion::{posterior_mean, reverse_step, NoiseSchedule, SigmaMode};
use crate::error::{Error, Result};
use crate::model::{timestep_embedding, JointModel};
use crate::nn::mse;
use crate::tensor::{ImageTensor, Real, Tensor};

/// Anything that can estimate the clean image from a noisy one.
pub trait CleanPredictor {
    /// ẑ_0 from z_t, with the weathered observation as side input.
    fn predict_clean(&self, zt: &ImageTensor, observation: &ImageTensor, t: usize) -> Result<ImageTensor>;

    /// Chain length the predictor was built for, if it is tied to one.
    fn steps(&self) -> Option<usize> {
        None
    }
}

impl CleanPredictor for JointModel<f32> {
    fn predict_clean(&self, zt: &ImageTensor, observation: &ImageTensor, t: usize) -> Result<ImageTensor> {
        predict_clean(self, zt, observation, t)
    }

    fn steps(&self) -> Option<usize> {
        Some(self.spec.steps)
    }
}

/// Adds the sinusoidal code of `t` to every spatial position of a
/// `[N, C, H, W]` latent.
pub(crate) fn add_time_embedding<T: Real>(latent: &mut Tensor<T>, t: usize) {
    let [_, c, h, w] = *latent.shape() else {
        unreachable!("encoder latent is 4-d")
    };
    let emb: Vec<T> = timestep_embedding(t, c).into_iter().map(T::lit).collect();
    for (i, chunk) in latent.data_mut().chunks_exact_mut(h * w).enumerate() {
        let e = emb[i % c];
        chunk.iter_mut().for_each(|v| *v += e);
    }
}

/// Adds the per-channel spatial mean of `[N, C, H, W]` to every position.
pub(crate) fn add_global_context<T: Real>(latent: &mut Tensor<T>) {
    let [_, _, h, w] = *latent.shape() else {
        unreachable!("encoder latent is 4-d")
    };
    let inv = T::lit(1.0 / (h * w) as f64);
    for plane in latent.data_mut().chunks_exact_mut(h * w) {
        let mean = plane.iter().copied().sum::<T>() * inv;
        plane.iter_mut().for_each(|v| *v += mean);
    }
}

/// Backward of [`add_global_context`]; the map is linear and self-adjoint.
pub(crate) fn global_context_backward<T: Real>(grad: &mut Tensor<T>) {
    add_global_context(grad)
}

/// Latent fed to the decoder: trunk output, optional global context, time code.
pub fn condition_latent<T: Real>(latent: &mut Tensor<T>, t: usize, global_context: bool) {
    if global_context {
        add_global_context(latent);
    }
    add_time_embedding(latent, t);
}

/// Stacks two `[N, C, H, W]` tensors along the channel axis.
pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[n, ca, h, w], &[nb, cb, hb, wb]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("channel concat needs 4-d tensors"));
    };
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!("cannot concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (pa + pb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

/// Gradient of [`concat_channels`] for its first operand.
pub(crate) fn leading_channels<T: Real>(g: &Tensor<T>, ca: usize) -> Tensor<T> {
    let [n, c, h, w] = *g.shape() else {
        unreachable!("decoder features are 4-d")
    };
    let (pa, pc) = (ca * h * w, c * h * w);
    let data = (0..n).flat_map(|i| g.data()[i * pc..i * pc + pa].iter().copied()).collect();
    Tensor::from_parts(vec![n, ca, h, w], data)
}

/// `[x, s·x, s, obs]` along the channel axis with s = t/steps.
pub(crate) fn skip_input<T: Real>(x: &Tensor<T>, obs: &Tensor<T>, t: usize, steps: usize) -> Result<Tensor<T>> {
    let s = T::lit(t as f64 / steps as f64);
    let scaled = x.map(|v| v * s);
    let [n, _, h, w] = *x.shape() else {
        return Err(Error::shape("input skip needs a 4-d tensor"));
    };
    let head = concat_channels(&concat_channels(x, &scaled)?, &Tensor::filled(&[n, 1, h, w], s))?;
    concat_channels(&head, obs)
}

/// ẑ_0 for a single image or a batch, in inference mode.
pub fn predict_clean<T: Real>(model: &JointModel<T>, zt: &Tensor<T>, observation: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    model.check_step(t)?;
    zt.same_shape(observation)?;
    let x = model.batched(zt)?;
    let obs = model.batched(observation)?;
    let mut latent = model.restoration.encoder.trunk.infer(&x)?;
    condition_latent(&mut latent, t, model.spec.global_context);
    let mut h = model.restoration.decoder.infer(&latent)?;
    if model.spec.input_skip {
        h = concat_channels(&h, &skip_input(&x, &obs, t, model.spec.steps)?)?;
    }
    model.restoration.output.infer(&h)?.reshape(zt.shape())
}

/// Runs the reverse chain from `corrupted` (taken as z_T, not re-noised) and
/// returns ẑ_0^t for t = T..1; the last entry is the restoration.
pub fn restore<P, R>(
    model: &P,
    corrupted: &ImageTensor,
    sched: &NoiseSchedule,
    sigma: SigmaMode,
    rng: &mut R,
) -> Result<Vec<ImageTensor>>
where
    P: CleanPredictor + ?Sized,
    R: Rng + ?Sized,
{
    if corrupted.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Input("corrupted image must lie in [-1, 1]".into()));
    }
    if let Some(steps) = model.steps() {
        if steps != sched.steps() {
            return Err(Error::Config(format!("model expects T = {steps}, schedule has T = {}", sched.steps())));
        }
    }
    let mut zt = corrupted.clone();
    let mut estimates = Vec::with_capacity(sched.steps());
    for t in (1..=sched.steps()).rev() {
        let z0_hat = model.predict_clean(&zt, corrupted, t)?;
        if z0_hat.shape() != zt.shape() {
            return Err(Error::Config(format!(
                "predictor returned shape {:?} for input {:?}",
                z0_hat.shape(),
                zt.shape()
            )));
        }
        let mu = posterior_mean(&z0_hat, &zt, t, sched)?;
        zt = reverse_step(&zt, t, &mu, sched.reverse_variance(t, sigma), rng)?;
        estimates.push(z0_hat);
    }
    Ok(estimates)
}

/// Mean squared error over all elements, with the gradient for `z0_hat`.
pub fn loss_res<T: Real>(z0: &Tensor<T>, z0_hat: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    mse(z0_hat, z0)
}
