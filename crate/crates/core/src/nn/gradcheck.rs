//! Central finite-difference checks of the analytic backward passes, run in
//! `f64`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::matching::{joint_step, StepOptions};
use crate::model::{JointModel, ModelSpec};
use crate::nn::{cross_entropy_batch, mse, onehot_mse_batch, LayerSpec, Mode, Network, Parameterized};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, 1e-6)`; the floor keeps exactly-zero gradients
/// from dividing by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOLERANCE
    }
}

/// Flattened snapshot of every trainable gradient, in visit order.
pub fn collect_grads<M: Parameterized<f64> + ?Sized>(model: &M) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        if p.trainable() {
            out.push(p.grad.clone())
        }
    });
    out
}

fn nudge<M: Parameterized<f64> + ?Sized>(model: &mut M, tensor: usize, elem: usize, delta: f64) {
    let mut idx = 0;
    model.visit_params_mut(&mut |p| {
        if p.trainable() {
            if idx == tensor {
                p.value[elem] += delta;
            }
            idx += 1;
        }
    });
}

/// Compares `analytic` (as from [`collect_grads`]) against central
/// differences of `loss`, probing at most `per_tensor` elements of each
/// tensor. Returns the largest relative error seen and the number of probes.
pub fn check_params<M, F>(
    model: &mut M,
    analytic: &[Vec<f64>],
    loss: F,
    per_tensor: usize,
    seed: u64,
) -> Result<(f64, usize)>
where
    M: Parameterized<f64> + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    check_params_with_step(model, analytic, loss, per_tensor, seed, FD_STEP)
}

/// [`check_params`] with an explicit finite-difference step.
pub fn check_params_with_step<M, F>(
    model: &mut M,
    analytic: &[Vec<f64>],
    mut loss: F,
    per_tensor: usize,
    seed: u64,
    step: f64,
) -> Result<(f64, usize)>
where
    M: Parameterized<f64> + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for (ti, grads) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if grads.len() <= per_tensor {
            (0..grads.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..grads.len())).collect()
        };
        for e in picks {
            nudge(model, ti, e, step);
            let up = loss(model)?;
            nudge(model, ti, e, -2.0 * step);
            let dn = loss(model)?;
            nudge(model, ti, e, step);
            let fd = (up - dn) / (2.0 * step);
            worst = worst.max(rel_err(grads[e], fd));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Same as [`check_params`] but for the gradient with respect to an input.
pub fn check_input<F>(x: &Tensor<f64>, analytic: &Tensor<f64>, mut loss: F) -> Result<(f64, usize)>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += FD_STEP;
        let mut dn = x.clone();
        dn.data_mut()[i] -= FD_STEP;
        let fd = (loss(&up)? - loss(&dn)?) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], fd));
    }
    Ok((worst, x.len()))
}

/// One representative configuration per layer kind.
pub fn layer_suite() -> Vec<(LayerSpec, Vec<usize>)> {
    vec![
        (LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 }, vec![2, 2, 5, 5]),
        (LayerSpec::Conv2d { in_channels: 2, out_channels: 2, kernel: 3, stride: 2, padding: 0 }, vec![2, 2, 7, 7]),
        (LayerSpec::Deconv2d { in_channels: 3, out_channels: 2, kernel: 4, stride: 2, padding: 1 }, vec![2, 3, 3, 3]),
        (LayerSpec::Deconv2d { in_channels: 2, out_channels: 2, kernel: 3, stride: 1, padding: 1 }, vec![1, 2, 4, 4]),
        (LayerSpec::Dense { inputs: 4, outputs: 5 }, vec![3, 4]),
        (LayerSpec::Dense { inputs: 4, outputs: 3 }, vec![2, 4, 2, 2]),
        (LayerSpec::BatchNorm { features: 3 }, vec![4, 3]),
        (LayerSpec::BatchNorm { features: 3 }, vec![2, 3, 2, 2]),
        (LayerSpec::Dropout { rate: 0.5 }, vec![2, 6]),
        (LayerSpec::Tanh, vec![2, 5]),
        (LayerSpec::Relu, vec![2, 5]),
        (LayerSpec::Softmax, vec![2, 5]),
        (LayerSpec::UpsampleNearest { factor: 2 }, vec![1, 2, 3, 3]),
        (LayerSpec::PatchEmbed { in_channels: 3, patch: 4, dim: 5 }, vec![2, 3, 8, 8]),
        (LayerSpec::GlobalAvgPool, vec![2, 3, 2, 2]),
    ]
}

/// Checks one layer with loss `Σ y ⊙ R` for a fixed random `R`, in training
/// mode (so dropout and batch statistics are exercised).
pub fn check_layer(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net: Network<f64> = Network::new(vec![("layer".into(), spec.clone())], "g", &mut rng)?;
    // randomize biases and affine BN terms too, so they are not trivially zero/one
    net.visit_params_mut(&mut |p| {
        if p.trainable() {
            for v in &mut p.value {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    });
    // keep inputs away from the ReLU kink
    let x = Tensor::from_fn(input_shape, |_| {
        let u: f64 = rng.random_range(-1.0..1.0);
        u.signum() * (0.05 + u.abs())
    });
    let dropout_seed = rng.random::<u64>();
    let run = |net: &mut Network<f64>, x: &Tensor<f64>| {
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        net.forward(x, Mode::Train, Some(&mut drng as &mut dyn RngCore))
    };
    let (y, cache) = run(&mut net, &x)?;
    let proj = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    let dot = |y: &Tensor<f64>| y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>();
    let gx = net.backward(&cache, &proj)?;

    let analytic = collect_grads(&net);
    let (perr, pcount) = check_params(&mut net, &analytic, |n| Ok(dot(&run(n, &x)?.0)), 48, seed)?;
    let mut frozen = net.clone();
    let (xerr, xcount) = check_input(&x, &gx, |xi| Ok(dot(&run(&mut frozen, xi)?.0)))?;
    Ok(GradReport {
        name: format!("{} {:?}", spec.kind(), input_shape),
        checked: pcount + xcount,
        max_rel_err: perr.max(xerr),
    })
}

/// Input-gradient checks of cross-entropy, MSE and one-hot MSE on random data.
pub fn loss_suite(seed: u64) -> Vec<Result<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(&[3, 5], |_| rng.random_range(-3.0..3.0));
    let labels = [4usize, 0, 2];
    let a = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
    let probs = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.0..1.0));
    let report = |name: &str, r: Result<(f64, usize)>| {
        r.map(|(err, n)| GradReport { name: name.to_string(), checked: n, max_rel_err: err })
    };
    vec![
        report("cross_entropy [3, 5]", {
            cross_entropy_batch(&logits, &labels)
                .and_then(|(_, g)| check_input(&logits, &g, |x| Ok(cross_entropy_batch(x, &labels)?.0)))
        }),
        report("mse [2, 3, 4]", mse(&a, &b).and_then(|(_, g)| check_input(&a, &g, |x| Ok(mse(x, &b)?.0)))),
        report("onehot_mse [3, 4]", {
            let hot = [0usize, 0, 2];
            onehot_mse_batch(&probs, &hot)
                .and_then(|(_, g)| check_input(&probs, &g, |x| Ok(onehot_mse_batch(x, &hot)?.0)))
        }),
    ]
}

/// Finite-difference results for the joint restoration + matching graph.
#[derive(Clone, Debug)]
pub struct JointGradReport {
    /// Analytic ∂L_all vs finite differences of L_all.
    pub all: GradReport,
    /// Analytic ∂L_res vs finite differences of L_res.
    pub res: GradReport,
    /// Analytic ∂L_mat vs finite differences of L_mat.
    pub mat: GradReport,
    /// Largest relative gap between ∂L_all and ∂L_res + ∂L_mat over all weights.
    pub additivity_err: f64,
}

impl JointGradReport {
    pub fn passed(&self) -> bool {
        self.all.passed() && self.res.passed() && self.mat.passed() && self.additivity_err <= REL_TOLERANCE
    }
}

/// Step used on the joint graph. Smaller than [`FD_STEP`] so central
/// differences rarely straddle a ReLU kink, but not so small that
/// cancellation noise swamps parameters with near-zero gradient.
pub const JOINT_FD_STEP: f64 = 1e-5;

/// Checks the joint graph of a tiny two-class model: each loss term on its
/// own, their sum, and additivity of the analytic gradients.
pub fn joint_graph_check(seed: u64, probes_per_tensor: usize) -> Result<JointGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec {
        image_size: 8,
        patch: 4,
        latent_channels: 4,
        embed_dim: 3,
        decoder_channels: [3, 2],
        head_hidden: 4,
        classes: 2,
        ..ModelSpec::default()
    };
    let mut model: JointModel<f64> = JointModel::new(spec, &mut rng)?;
    // zero biases put whole ReLU rows exactly on the kink
    model.visit_params_mut(&mut |p| {
        if p.trainable() && !p.name.ends_with(".weight") {
            p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    });
    let x = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let y = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let labels = [0usize, 1, 1];
    let t = 2;
    let dropout_seed: u64 = rng.random();
    let run = |m: &mut JointModel<f64>, wr: f64, wm: f64| {
        let opts = StepOptions { res_weight: wr, mat_weight: wm, mat_through_restoration: true, ..StepOptions::default() };
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        joint_step(m, &x, &x, &y, &labels, t, &opts, &mut drng)
    };
    let grads = |m: &mut JointModel<f64>, wr: f64, wm: f64| -> Result<Vec<Vec<f64>>> {
        m.zero_grad();
        run(m, wr, wm)?;
        let g = collect_grads(m);
        m.zero_grad();
        Ok(g)
    };
    let g_all = grads(&mut model, 1.0, 1.0)?;
    let g_res = grads(&mut model, 1.0, 0.0)?;
    let g_mat = grads(&mut model, 0.0, 1.0)?;

    let mut additivity_err = 0.0f64;
    for ((a, r), m) in g_all.iter().zip(&g_res).zip(&g_mat) {
        for ((&a, &r), &m) in a.iter().zip(r).zip(m) {
            additivity_err = additivity_err.max(rel_err(a, r + m));
        }
    }

    let mut check = |name: &str, analytic: &[Vec<f64>], pick: fn(&crate::matching::StepLosses) -> f64| {
        let (err, n) = check_params_with_step(
            &mut model,
            analytic,
            |m| run(m, 1.0, 1.0).map(|l| pick(&l)),
            probes_per_tensor,
            seed,
            JOINT_FD_STEP,
        )?;
        Ok::<_, crate::Error>(GradReport { name: name.to_string(), checked: n, max_rel_err: err })
    };
    let all = check("joint L_all", &g_all, |l| l.all)?;
    let res = check("joint L_res", &g_res, |l| l.res)?;
    let mat = check("joint L_mat", &g_mat, |l| l.mat)?;
    Ok(JointGradReport { all, res, mat, additivity_err })
}
