//! The shared encoder, restoration decoder and classification head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ParamTensor, Parameterized};
use crate::nn::Network;
use crate::tensor::{Real, Tensor};

pub const BACKBONE_GROUP: &str = "backbone";
pub const HEAD_GROUP: &str = "head";

/// Scale on the He-initialized weights of the last deconvolution, so the
/// Tanh starts unsaturated and the decoder's ReLUs are not driven dead.
const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Shape hyperparameters for [`JointModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub embed_dim: usize,
    /// Widths of the first two deconvolutions; the last one maps to `channels`.
    pub decoder_channels: [usize; 2],
    pub head_hidden: usize,
    pub dropout: f64,
    pub classes: usize,
    /// Add the spatial mean of the latent back to every position before decoding.
    pub global_context: bool,
    /// Concatenate z_t, a copy scaled by t/steps, the constant t/steps and
    /// the weathered observation to the upsampled decoder features.
    pub input_skip: bool,
    /// Length T of the diffusion chain the decoder is conditioned on.
    pub steps: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 4,
            latent_channels: 32,
            embed_dim: 64,
            decoder_channels: [16, 8],
            head_hidden: 128,
            dropout: 0.5,
            classes: 64,
            global_context: true,
            input_skip: true,
            steps: 50,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch < 2 || self.patch % 2 != 0 {
            return err(format!("patch must be an even number >= 2, got {}", self.patch));
        }
        if self.image_size == 0 || self.image_size % self.patch != 0 {
            return err(format!("image size {} is not a multiple of patch {}", self.image_size, self.patch));
        }
        if self.channels == 0 || self.latent_channels == 0 || self.embed_dim == 0 || self.head_hidden == 0 || self.steps == 0 {
            return err("model widths must be positive".into());
        }
        if self.decoder_channels.contains(&0) {
            return err("decoder channels must be positive".into());
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.patch
    }

    fn trunk_specs(&self) -> Vec<(String, LayerSpec)> {
        let d = self.latent_channels;
        vec![
            ("enc.patch".into(), LayerSpec::PatchEmbed { in_channels: self.channels, patch: self.patch, dim: d }),
            ("enc.dense1".into(), LayerSpec::Dense { inputs: d, outputs: d }),
            ("enc.relu1".into(), LayerSpec::Relu),
            ("enc.dense2".into(), LayerSpec::Dense { inputs: d, outputs: d }),
            ("enc.relu2".into(), LayerSpec::Relu),
        ]
    }

    fn projection_specs(&self) -> Vec<(String, LayerSpec)> {
        vec![
            ("enc.pool".into(), LayerSpec::GlobalAvgPool),
            ("enc.proj".into(), LayerSpec::Dense { inputs: self.latent_channels, outputs: self.embed_dim }),
        ]
    }

    /// latent (S/p) → ×2 deconv → deconv → upsample ×p/2; the last deconv
    /// and the Tanh are in [`Self::output_specs`].
    fn decoder_specs(&self) -> Vec<(String, LayerSpec)> {
        let [c1, c2] = self.decoder_channels;
        vec![
            (
                "dec.deconv1".into(),
                LayerSpec::Deconv2d { in_channels: self.latent_channels, out_channels: c1, kernel: 4, stride: 2, padding: 1 },
            ),
            ("dec.relu1".into(), LayerSpec::Relu),
            ("dec.deconv2".into(), LayerSpec::Deconv2d { in_channels: c1, out_channels: c2, kernel: 3, stride: 1, padding: 1 }),
            ("dec.relu2".into(), LayerSpec::Relu),
            ("dec.upsample".into(), LayerSpec::UpsampleNearest { factor: self.patch / 2 }),
        ]
    }

    /// deconv → Tanh at full resolution. With the input skip, the image is
    /// concatenated to the decoder features first.
    fn output_specs(&self) -> Vec<(String, LayerSpec)> {
        let c2 = self.decoder_channels[1];
        let cin = c2 + if self.input_skip { self.skip_channels() } else { 0 };
        vec![
            (
                "dec.deconv3".into(),
                LayerSpec::Deconv2d { in_channels: cin, out_channels: self.channels, kernel: 3, stride: 1, padding: 1 },
            ),
            ("dec.tanh".into(), LayerSpec::Tanh),
        ]
    }

    /// Channels the input skip adds in front of the last deconvolution.
    pub fn skip_channels(&self) -> usize {
        3 * self.channels + 1
    }

    fn head_specs(&self) -> Vec<(String, LayerSpec)> {
        vec![
            ("head.dense1".into(), LayerSpec::Dense { inputs: self.embed_dim, outputs: self.head_hidden }),
            ("head.bn".into(), LayerSpec::BatchNorm { features: self.head_hidden }),
            ("head.dropout".into(), LayerSpec::Dropout { rate: self.dropout }),
            ("head.dense2".into(), LayerSpec::Dense { inputs: self.head_hidden, outputs: self.classes }),
            ("head.softmax".into(), LayerSpec::Softmax),
        ]
    }
}

/// Shared feature extractor: a patch trunk producing a spatial latent, and a
/// pooled projection producing the embedding.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub trunk: Network<T>,
    pub projection: Network<T>,
}

/// Encoder plus the deconvolution decoder. The decoder is split before its
/// last deconvolution, where the optional input skip joins.
#[derive(Clone, Debug)]
pub struct RestorationModel<T> {
    pub encoder: Encoder<T>,
    pub decoder: Network<T>,
    pub output: Network<T>,
}

/// dense → batchnorm → dropout → dense → softmax.
#[derive(Clone, Debug)]
pub struct MatchingHead<T> {
    pub layers: Network<T>,
}

impl<T: Real> MatchingHead<T> {
    /// Index of the softmax; layers before it produce logits.
    pub fn logits_end(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn classes(&self) -> usize {
        match self.layers.layers()[self.logits_end() - 1].spec {
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => unreachable!("head ends in dense + softmax"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointModel<T = f32> {
    pub spec: ModelSpec,
    pub restoration: RestorationModel<T>,
    pub head: MatchingHead<T>,
}

impl<T: Real> JointModel<T> {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let trunk = Network::new(spec.trunk_specs(), BACKBONE_GROUP, rng)?;
        let projection = Network::new(spec.projection_specs(), BACKBONE_GROUP, rng)?;
        let decoder = Network::new(spec.decoder_specs(), BACKBONE_GROUP, rng)?;
        let mut output = Network::new(spec.output_specs(), BACKBONE_GROUP, rng)?;
        for p in output.layers_mut()[0].params.iter_mut().filter(|p| p.name.ends_with(".weight")) {
            p.value.iter_mut().for_each(|v| *v = *v * T::lit(OUTPUT_INIT_GAIN));
        }
        let head = Network::new(spec.head_specs(), HEAD_GROUP, rng)?;
        Ok(Self {
            spec,
            restoration: RestorationModel { encoder: Encoder { trunk, projection }, decoder, output },
            head: MatchingHead { layers: head },
        })
    }

    /// Rejects t outside `1..=spec.steps`.
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.spec.steps {
            return Err(Error::Step { t, max: self.spec.steps });
        }
        Ok(())
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.restoration.encoder
    }

    pub fn cast<U: Real>(&self) -> JointModel<U> {
        let e = &self.restoration.encoder;
        JointModel {
            spec: self.spec.clone(),
            restoration: RestorationModel {
                encoder: Encoder { trunk: e.trunk.cast(), projection: e.projection.cast() },
                decoder: self.restoration.decoder.cast(),
                output: self.restoration.output.cast(),
            },
            head: MatchingHead { layers: self.head.layers.cast() },
        }
    }

    /// Checks a single image `[C, H, W]` or a batch `[N, C, H, W]` against the
    /// input shape; returns the batched form.
    pub fn batched(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let want = self.spec.image_shape();
        match x.shape() {
            s if s == want => x.clone().reshape(&[1, want[0], want[1], want[2]]),
            [_, rest @ ..] if rest == want => Ok(x.clone()),
            s => Err(Error::shape(format!("expected image {want:?} or a batch of them, got {s:?}"))),
        }
    }

    /// All networks in checkpoint order.
    pub fn networks(&self) -> [&Network<T>; 5] {
        let e = &self.restoration.encoder;
        let r = &self.restoration;
        [&e.trunk, &e.projection, &r.decoder, &r.output, &self.head.layers]
    }
}

impl<T: Real> Parameterized<T> for JointModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor<T>)) {
        for n in self.networks() {
            n.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor<T>)) {
        let e = &mut self.restoration.encoder;
        e.trunk.visit_params_mut(f);
        e.projection.visit_params_mut(f);
        self.restoration.decoder.visit_params_mut(f);
        self.restoration.output.visit_params_mut(f);
        self.head.layers.visit_params_mut(f);
    }

    fn bump_version(&mut self) {
        let e = &mut self.restoration.encoder;
        e.trunk.bump_version();
        e.projection.bump_version();
        self.restoration.decoder.bump_version();
        self.restoration.output.bump_version();
        self.head.layers.bump_version();
    }
}

/// Sinusoidal code for step `t`: sines in the first half, cosines in the second.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> JointModel<f32> {
        JointModel::new(ModelSpec { classes: 5, ..ModelSpec::default() }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn decoder_has_three_deconvs_one_upsample_and_tanh() {
        let m = model();
        let mut specs = m.restoration.decoder.specs();
        specs.extend(m.restoration.output.specs());
        let deconvs = specs.iter().filter(|s| matches!(s, LayerSpec::Deconv2d { .. })).count();
        let ups = specs.iter().filter(|s| matches!(s, LayerSpec::UpsampleNearest { .. })).count();
        assert_eq!((deconvs, ups), (3, 1));
        assert_eq!(specs.last(), Some(&&LayerSpec::Tanh));
    }

    #[test]
    fn head_has_two_dense_layers() {
        let m = model();
        let dense = m.head.layers.specs().iter().filter(|s| matches!(s, LayerSpec::Dense { .. })).count();
        assert_eq!(dense, 2);
        assert_eq!(m.head.classes(), 5);
    }

    #[test]
    fn groups_are_assigned() {
        let m = model();
        let mut groups = std::collections::BTreeSet::new();
        m.visit_params(&mut |p| {
            if let Some(g) = &p.group {
                groups.insert(g.clone());
            }
        });
        assert_eq!(groups.into_iter().collect::<Vec<_>>(), vec!["backbone", "head"]);
        m.head.layers.visit_params(&mut |p| assert_ne!(p.group.as_deref(), Some("backbone")));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec { patch: 3, image_size: 33, ..ModelSpec::default() }.validate().is_err());
        assert!(ModelSpec { image_size: 30, ..ModelSpec::default() }.validate().is_err());
        assert!(ModelSpec { classes: 1, ..ModelSpec::default() }.validate().is_err());
        assert!(ModelSpec::default().validate().is_ok());
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(0, 4);
        assert_eq!(e, vec![0.0, 0.0, 1.0, 1.0]);
        let e = timestep_embedding(3, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-12);
        assert_ne!(timestep_embedding(1, 32), timestep_embedding(2, 32));
    }
}
