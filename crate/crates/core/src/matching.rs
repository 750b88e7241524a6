//! Embeddings, the classification head, and the joint training step that
//! couples restoration and matching through the shared encoder.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::{JointModel, MatchingHead};
use crate::nn::{cross_entropy_batch, onehot_mse_batch, Mode};
use crate::restoration::{concat_channels, condition_latent, global_context_backward, leading_channels, loss_res, skip_input};
pub use crate::retrieval::EmbeddingVector;
use crate::tensor::{ImageTensor, Real, Tensor};

/// How the head's output is scored against the location label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatchingLoss {
    /// Cross-entropy on the logits.
    #[default]
    CrossEntropy,
    /// MSE between softmax probabilities and the one-hot label.
    OneHotMse,
}

impl FromStr for MatchingLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(Self::CrossEntropy),
            "onehot_mse" => Ok(Self::OneHotMse),
            _ => Err(Error::Config(format!("unknown matching loss `{s}` (cross_entropy | onehot_mse)"))),
        }
    }
}

impl fmt::Display for MatchingLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CrossEntropy => "cross_entropy",
            Self::OneHotMse => "onehot_mse",
        })
    }
}

/// Which images the matching branch sees during training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    /// Match on the restored estimate; both losses train the encoder.
    #[default]
    Joint,
    /// Match on the corrupted input directly; no decoder, no L_res.
    MatchingOnly,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "matching_only" => Ok(Self::MatchingOnly),
            _ => Err(Error::Config(format!("unknown variant `{s}` (joint | matching_only)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::MatchingOnly => "matching_only",
        })
    }
}

/// Embeddings `[N, D]` for a batch `[N, C, H, W]` (or `[D]` for a single image), inference mode.
pub fn encode_batch<T: Real>(model: &JointModel<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    let x = model.batched(img)?;
    let e = model.encoder();
    e.projection.infer(&e.trunk.infer(&x)?)
}

/// Unnormalized embedding of one image.
pub fn encode(model: &JointModel<f32>, img: &ImageTensor) -> Result<EmbeddingVector> {
    if img.shape().len() != 3 {
        return Err(Error::shape(format!("expected a single [C, H, W] image, got {:?}", img.shape())));
    }
    EmbeddingVector::new(encode_batch(model, img)?.into_data())
}

/// Scores `embeddings [N, D]` against `labels` in training mode. Head
/// gradients of `weight · loss` accumulate and the matching gradient for the
/// embeddings is returned; the loss itself is unweighted.
pub fn matching_loss<T: Real>(
    head: &mut MatchingHead<T>,
    embeddings: &Tensor<T>,
    labels: &[usize],
    kind: MatchingLoss,
    weight: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<(T, Tensor<T>)> {
    let end = match kind {
        MatchingLoss::CrossEntropy => head.logits_end(),
        MatchingLoss::OneHotMse => head.layers.len(),
    };
    let (out, cache) = head.layers.forward_range(embeddings, 0..end, Mode::Train, rng)?;
    let (loss, g) = match kind {
        MatchingLoss::CrossEntropy => cross_entropy_batch(&out, labels)?,
        MatchingLoss::OneHotMse => onehot_mse_batch(&out, labels)?,
    };
    let g = if weight == 1.0 { g } else { g.map(|v| v * T::lit(weight)) };
    let g_emb = head.layers.backward(&cache, &g)?;
    Ok((loss, g_emb))
}

/// L_all = L_res + L_mat.
pub fn total_loss(l_res: f64, l_mat: f64) -> Result<f64> {
    if !l_res.is_finite() || !l_mat.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss term (res {l_res}, mat {l_mat})")));
    }
    Ok(l_res + l_mat)
}

/// `1 − cos(a, b)`, in [0, 2].
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine distance of a zero vector".into()));
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub variant: Variant,
    pub loss: MatchingLoss,
    /// Scale applied to each term's gradient; 1 for plain L_all.
    pub res_weight: f64,
    pub mat_weight: f64,
    /// Backpropagate L_mat through ẑ_0 into the decoder and the first encoder
    /// pass. Off, ẑ_0 is a constant input to the matching branch.
    pub mat_through_restoration: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            variant: Variant::Joint,
            loss: MatchingLoss::CrossEntropy,
            res_weight: 1.0,
            mat_weight: 1.0,
            mat_through_restoration: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub res: f64,
    pub mat: f64,
    pub all: f64,
}

/// One forward/backward pass of the joint graph. Gradients accumulate into
/// `model`; no weights change.
///
/// `input` is z_t and `target` the clean batch. On the joint route the
/// restored ẑ_0 is fed back through the encoder for matching, so the encoder
/// receives gradient from both terms.
pub fn joint_step<T: Real>(
    model: &mut JointModel<T>,
    input: &Tensor<T>,
    observation: &Tensor<T>,
    target: &Tensor<T>,
    labels: &[usize],
    t: usize,
    opts: &StepOptions,
    rng: &mut dyn RngCore,
) -> Result<StepLosses> {
    let x = model.batched(input)?;
    if x.batch_len() != labels.len() {
        return Err(Error::shape(format!("{} labels for a batch of {}", labels.len(), x.batch_len())));
    }
    let scale = |g: Tensor<T>, w: f64| if w == 1.0 { g } else { g.map(|v| v * T::lit(w)) };
    match opts.variant {
        Variant::MatchingOnly => {
            let enc = &mut model.restoration.encoder;
            let (lat, c_trunk) = enc.trunk.forward(&x, Mode::Train, None)?;
            let (emb, c_proj) = enc.projection.forward(&lat, Mode::Train, None)?;
            let (l_mat, g_emb) = matching_loss(&mut model.head, &emb, labels, opts.loss, opts.mat_weight, Some(rng))?;
            let g_lat = enc.projection.backward(&c_proj, &g_emb)?;
            enc.trunk.backward(&c_trunk, &g_lat)?;
            let l_mat = l_mat.to_f64().unwrap();
            Ok(StepLosses { res: 0.0, mat: l_mat, all: total_loss(0.0, l_mat)? })
        }
        Variant::Joint => {
            model.check_step(t)?;
            let y = model.batched(target)?;
            let obs = model.batched(observation)?;
            x.same_shape(&y)?;
            x.same_shape(&obs)?;
            let enc = &mut model.restoration.encoder;
            let (mut lat, c_trunk) = enc.trunk.forward(&x, Mode::Train, None)?;
            let global = model.spec.global_context;
            condition_latent(&mut lat, t, global);
            let (h, c_dec) = model.restoration.decoder.forward(&lat, Mode::Train, None)?;
            let skip = model.spec.input_skip;
            let h_in = if skip { concat_channels(&h, &skip_input(&x, &obs, t, model.spec.steps)?)? } else { h };
            let (z0_hat, c_out) = model.restoration.output.forward(&h_in, Mode::Train, None)?;
            let (l_res, g_res) = loss_res(&y, &z0_hat)?;

            let (lat2, c_trunk2) = enc.trunk.forward(&z0_hat, Mode::Train, None)?;
            let (emb, c_proj) = enc.projection.forward(&lat2, Mode::Train, None)?;
            let (l_mat, g_emb) = matching_loss(&mut model.head, &emb, labels, opts.loss, opts.mat_weight, Some(rng))?;

            let g_lat2 = enc.projection.backward(&c_proj, &g_emb)?;
            let g_from_mat = enc.trunk.backward(&c_trunk2, &g_lat2)?;
            let mut g_z0 = scale(g_res, opts.res_weight);
            if opts.mat_through_restoration {
                g_z0 = g_z0.zip_map(&g_from_mat, |a, b| a + b)?;
            }
            let mut g_h = model.restoration.output.backward(&c_out, &g_z0)?;
            if skip {
                g_h = leading_channels(&g_h, model.spec.decoder_channels[1]);
            }
            let mut g_lat = model.restoration.decoder.backward(&c_dec, &g_h)?;
            if global {
                global_context_backward(&mut g_lat);
            }
            enc.trunk.backward(&c_trunk, &g_lat)?;

            let (res, mat) = (l_res.to_f64().unwrap(), l_mat.to_f64().unwrap());
            Ok(StepLosses { res, mat, all: total_loss(res, mat)? })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::nn::{sgd_step, LearningRates, Parameterized, SgdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn small_spec(classes: usize) -> ModelSpec {
        ModelSpec {
            image_size: 8,
            patch: 4,
            latent_channels: 6,
            embed_dim: 5,
            decoder_channels: [4, 3],
            head_hidden: 7,
            classes,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.25, 1.5).unwrap(), 1.75);
        assert!(matches!(total_loss(f64::NAN, 1.0), Err(Error::Numeric(_))));
        assert!(matches!(total_loss(0.0, f64::INFINITY), Err(Error::Numeric(_))));
    }

    #[test]
    fn cosine_distance_cases() {
        assert!(cosine_distance(&ev(&[0.3, -2.0]), &ev(&[0.3, -2.0])).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&ev(&[1.0, 0.0]), &ev(&[-1.0, 0.0])).unwrap(), 2.0);
        assert!(matches!(cosine_distance(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])), Err(Error::Input(_))));
        assert!(cosine_distance(&ev(&[1.0]), &ev(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn encode_is_deterministic_with_configured_dim() {
        let m: JointModel<f32> = JointModel::new(small_spec(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::<f32>::randn(&[3, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
        let a = encode(&m, &img).unwrap();
        assert_eq!(a.dim(), 5);
        assert_eq!(a, encode(&m, &img).unwrap());
        assert!(encode(&m, &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut m: JointModel<f64> = JointModel::new(small_spec(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // zero the final dense layer so every logit is 0
        let last = m.head.logits_end() - 1;
        for p in &mut m.head.layers.layers_mut()[last].params {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let emb = Tensor::<f64>::randn(&[3, 5], &mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, _) = matching_loss(&mut m.head, &emb, &[0, 1, 3], MatchingLoss::CrossEntropy, 1.0, Some(&mut rng)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            matching_loss(&mut m.head, &emb, &[0, 1, 4], MatchingLoss::CrossEntropy, 1.0, Some(&mut rng)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m: JointModel<f32> = JointModel::new(small_spec(4), &mut rng).unwrap();
        let x = Tensor::<f32>::randn(&[4, 3, 8, 8], &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let labels = [0, 1, 2, 3];
        let lrs = LearningRates::new([("backbone", 0.01), ("head", 0.1)]);
        let opts = StepOptions::default();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let l = joint_step(&mut m, &x, &x, &x, &labels, 3, &opts, &mut rng).unwrap();
            losses.push(l.all);
            sgd_step(&mut m, &lrs, SgdConfig::default()).unwrap();
        }
        let first: f64 = losses[..5].iter().sum();
        let last: f64 = losses[45..].iter().sum();
        assert!(last < first, "loss went from {first} to {last}");
    }

    #[test]
    fn matching_only_leaves_decoder_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m: JointModel<f64> = JointModel::new(small_spec(2), &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], &mut rng);
        let opts = StepOptions { variant: Variant::MatchingOnly, ..StepOptions::default() };
        let l = joint_step(&mut m, &x, &x, &x, &[0, 1], 1, &opts, &mut rng).unwrap();
        assert_eq!(l.res, 0.0);
        assert_eq!(l.all, l.mat);
        m.restoration.decoder.visit_params(&mut |p| assert!(p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn parse_and_display() {
        for s in ["cross_entropy", "onehot_mse"] {
            assert_eq!(s.parse::<MatchingLoss>().unwrap().to_string(), s);
        }
        for s in ["joint", "matching_only"] {
            assert_eq!(s.parse::<Variant>().unwrap().to_string(), s);
        }
        assert!("mse".parse::<MatchingLoss>().is_err());
    }
}
