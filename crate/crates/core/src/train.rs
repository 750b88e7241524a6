//! Joint training loop and held-out evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::dataset::{generate_dataset, Dataset, LocationSample};
use crate::diffusion::{chain_marginal_sample, NoiseSchedule, SigmaMode};
use crate::error::{Error, Result};
use crate::matching::{encode_batch, joint_step, StepLosses, StepOptions, Variant};
use crate::model::{JointModel, BACKBONE_GROUP, HEAD_GROUP};
use crate::nn::{sgd_step, LearningRates, SgdConfig};
use crate::restoration::{predict_clean, restore};
use crate::retrieval::{build_index, evaluate, EmbeddingVector, GalleryIndex, GroundTruth, ItemId, MetricsReport};
use crate::tensor::{ImageTensor, Tensor};

const MODEL_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const CHAIN_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Sampled diffusion step; 0 when the loss covered the whole chain.
    pub t: usize,
    pub l_res: f64,
    pub l_mat: f64,
    pub l_all: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub recall_at_1: f64,
    pub mean_ap: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EpochEval>,
    /// Number of optimizer steps in each epoch.
    pub steps_per_epoch: usize,
}

impl TrainHistory {
    /// Mean L_all over each epoch.
    pub fn epoch_means(&self, pick: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
        if self.steps_per_epoch == 0 {
            return Vec::new();
        }
        self.steps
            .chunks(self.steps_per_epoch)
            .map(|c| c.iter().map(&pick).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// `step,t,l_res,l_mat,l_all` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,l_res,l_mat,l_all\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{:?},{:?},{:?}", r.step, r.t, r.l_res, r.l_mat, r.l_all);
        }
        s
    }

    /// `epoch,recall@1,mAP` rows.
    pub fn evals_csv(&self) -> String {
        let mut s = String::from("epoch,recall@1,mAP\n");
        for e in &self.evals {
            let _ = writeln!(s, "{},{:.6},{:.6}", e.epoch, e.recall_at_1, e.mean_ap);
        }
        s
    }
}

/// One training example: the network input before diffusion noise, its
/// clean target and the location label.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: ImageTensor,
    pub clean: ImageTensor,
    pub label: usize,
}

/// A held-out drone view.
#[derive(Clone, Debug)]
pub struct Query {
    pub id: ItemId,
    pub location_id: ItemId,
    pub corrupted: ImageTensor,
    pub clean: ImageTensor,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<TrainSample>,
    /// Held-out views of training locations.
    pub held_out: Vec<Query>,
    /// Every view of the unseen locations.
    pub unseen: Vec<Query>,
}

/// Number of views per location held out for evaluation.
pub fn held_out_count(views: usize, fraction: f64) -> usize {
    ((views as f64 * fraction).round() as usize).clamp(1, views - 1)
}

fn query_id(location: &LocationSample, view: usize, views: usize) -> ItemId {
    location.location_id * views as u64 + view as u64
}

/// The last views of each training location are held out; the rest, plus
/// each satellite view (as its own clean sample), form the training set.
pub fn split_dataset(ds: &Dataset, cfg: &ExperimentConfig) -> Split {
    let views = cfg.dataset.views_per_location;
    let hold = held_out_count(views, cfg.eval.held_out_fraction);
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for loc in &ds.locations {
        let label = loc.location_id as usize;
        for (i, v) in loc.drone_views.iter().enumerate() {
            if i < views - hold {
                train.push(TrainSample { input: v.corrupted.clone(), clean: v.clean.clone(), label });
            } else {
                held_out.push(Query {
                    id: query_id(loc, i, views),
                    location_id: loc.location_id,
                    corrupted: v.corrupted.clone(),
                    clean: v.clean.clone(),
                });
            }
        }
        train.push(TrainSample { input: loc.satellite_view.clone(), clean: loc.satellite_view.clone(), label });
    }
    let unseen = ds
        .unseen
        .iter()
        .flat_map(|loc| {
            loc.drone_views.iter().enumerate().map(move |(i, v)| Query {
                id: query_id(loc, i, views),
                location_id: loc.location_id,
                corrupted: v.corrupted.clone(),
                clean: v.clean.clone(),
            })
        })
        .collect();
    Split { train, held_out, unseen }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<JointModel<f32>> {
    JointModel::new(cfg.model_spec(), &mut rng_for(cfg.optim.seed, MODEL_STREAM))
}

pub fn learning_rates(cfg: &ExperimentConfig) -> LearningRates {
    LearningRates::new([(BACKBONE_GROUP, cfg.optim.lr_backbone), (HEAD_GROUP, cfg.optim.lr_head)])
}

/// Generates the dataset from `cfg` and trains on it.
pub fn train_joint(cfg: &ExperimentConfig) -> Result<(JointModel<f32>, TrainHistory)> {
    cfg.validate()?;
    let ds = generate_dataset(&cfg.dataset)?;
    train_on(cfg, &ds, |_, _| {})
}

/// Trains on an existing dataset. `progress(epoch, mean L_all)` is called after each epoch.
pub fn train_on(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    mut progress: impl FnMut(usize, f64),
) -> Result<(JointModel<f32>, TrainHistory)> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let split = split_dataset(ds, cfg);
    let mut model = init_model(cfg)?;
    let lrs = learning_rates(cfg);
    let sgd = SgdConfig { momentum: cfg.optim.momentum, weight_decay: cfg.optim.weight_decay };
    let opts = StepOptions {
        variant: cfg.model.variant,
        loss: cfg.model.matching_loss,
        mat_through_restoration: cfg.optim.mat_through_restoration,
        ..StepOptions::default()
    };
    let mut rng = rng_for(cfg.optim.seed, SHUFFLE_STREAM);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut gallery = None;
    for epoch in 1..=cfg.optim.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.optim.batch) {
            let inputs: Vec<ImageTensor> = chunk.iter().map(|&i| split.train[i].input.clone()).collect();
            let clean: Vec<ImageTensor> = chunk.iter().map(|&i| split.train[i].clean.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| split.train[i].label).collect();
            let x = Tensor::stack(&inputs)?;
            let y = Tensor::stack(&clean)?;
            let step = history.steps.len() + 1;
            let anchor = chain_anchor(&model, &x, &sched, opts.variant)?;
            let (t, losses) = if cfg.optim.full_chain {
                let chain = ChainBatch { x: &x, y: &y, anchor: anchor.as_ref(), labels: &labels };
                (0, full_chain_step(&mut model, &chain, &sched, cfg.schedule.sigma, &opts, &mut rng)?)
            } else {
                let t = rng.random_range(1..=sched.steps());
                let zt = noisy_input(&x, anchor.as_ref(), t, &sched, cfg.schedule.sigma, &mut rng)?;
                (t, joint_step(&mut model, &zt, &x, &y, &labels, t, &opts, &mut rng).map_err(|e| diverged(step, e))?)
            };
            sgd_step(&mut model, &lrs, sgd).map_err(|e| diverged(step, e))?;
            history.steps.push(StepRecord { step, t, l_res: losses.res, l_mat: losses.mat, l_all: losses.all });
            epoch_sum += losses.all;
            batches += 1;
        }
        history.steps_per_epoch = batches;
        progress(epoch, epoch_sum / batches as f64);
        if cfg.eval.eval_every > 0 && epoch % cfg.eval.eval_every == 0 {
            let g = match gallery.take() {
                Some(g) => g,
                None => gallery_images(ds)?,
            };
            let report = evaluate_split(&model, cfg, &sched, &split.held_out, &g)?;
            history.evals.push(EpochEval { epoch, recall_at_1: report.metrics.recall_at[&cfg.eval.ks[0]], mean_ap: report.metrics.mean_ap });
            gallery = Some(g);
        }
    }
    Ok((model, history))
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("training diverged at step {step}: {m}")),
        other => other,
    }
}

/// The joint route's one-shot estimate of the clean batch: ẑ_0 at t = T with
/// the weathered input as z_T. `None` for the matching-only variant.
fn chain_anchor(model: &JointModel<f32>, x: &ImageTensor, sched: &NoiseSchedule, variant: Variant) -> Result<Option<ImageTensor>> {
    match variant {
        Variant::MatchingOnly => Ok(None),
        Variant::Joint => predict_clean(model, x, x, sched.steps()).map(Some),
    }
}

/// z_t for the batch, drawn from the law of the reverse chain started at the
/// weathered input with `anchor` as every clean estimate. Without an anchor
/// the input is returned unchanged.
fn noisy_input(
    x: &ImageTensor,
    anchor: Option<&ImageTensor>,
    t: usize,
    sched: &NoiseSchedule,
    sigma: SigmaMode,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    match anchor {
        None => Ok(x.clone()),
        Some(e) => chain_marginal_sample(x, e, t, sched, sigma, rng),
    }
}

struct ChainBatch<'a> {
    x: &'a ImageTensor,
    y: &'a ImageTensor,
    anchor: Option<&'a ImageTensor>,
    labels: &'a [usize],
}

/// Loss averaged over every t of the chain, one backward pass per t, one
/// optimizer step.
fn full_chain_step(
    model: &mut JointModel<f32>,
    batch: &ChainBatch<'_>,
    sched: &NoiseSchedule,
    sigma: SigmaMode,
    opts: &StepOptions,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let steps = sched.steps();
    let w = 1.0 / steps as f64;
    let scaled = StepOptions { res_weight: w, mat_weight: w, ..*opts };
    let (mut res, mut mat) = (0.0, 0.0);
    for t in 1..=steps {
        let zt = noisy_input(batch.x, batch.anchor, t, sched, sigma, rng)?;
        let l = joint_step(model, &zt, batch.x, batch.y, batch.labels, t, &scaled, rng)?;
        res += l.res * w;
        mat += l.mat * w;
    }
    Ok(StepLosses { res, mat, all: crate::matching::total_loss(res, mat)? })
}

/// Gallery images with their ids, in gallery order.
pub fn gallery_images(ds: &Dataset) -> Result<Vec<(ItemId, ImageTensor)>> {
    Ok(ds.gallery().map(|(id, img)| (id, img.clone())).collect())
}

const ENCODE_CHUNK: usize = 256;

/// Inference-mode embeddings for many images.
pub fn embed_images(model: &JointModel<f32>, images: &[ImageTensor]) -> Result<Vec<EmbeddingVector>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_CHUNK) {
        let e = encode_batch(model, &Tensor::stack(chunk)?)?;
        for row in e.unstack() {
            out.push(EmbeddingVector::new(row.into_data())?);
        }
    }
    Ok(out)
}

pub fn build_gallery(model: &JointModel<f32>, gallery: &[(ItemId, ImageTensor)]) -> Result<GalleryIndex> {
    let imgs: Vec<ImageTensor> = gallery.iter().map(|(_, i)| i.clone()).collect();
    let embs = embed_images(model, &imgs)?;
    build_index(gallery.iter().map(|(id, _)| *id).zip(&embs))
}

/// Final restorations of the queries (batched through one reverse chain).
pub fn restore_queries(
    model: &JointModel<f32>,
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    corrupted: &[ImageTensor],
) -> Result<Vec<ImageTensor>> {
    let mut rng = rng_for(cfg.eval.seed, CHAIN_STREAM);
    let mut out = Vec::with_capacity(corrupted.len());
    for chunk in corrupted.chunks(ENCODE_CHUNK) {
        let x = Tensor::stack(chunk)?;
        let chain = restore(model, &x, sched, cfg.schedule.sigma, &mut rng)?;
        out.extend(chain.last().expect("chain has at least one step").unstack());
    }
    Ok(out)
}

/// Mean per-image MSE to the clean views, before and after restoration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestorationStats {
    pub corrupted_mse: f64,
    pub restored_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitReport {
    pub metrics: MetricsReport,
    /// Present for the joint variant only.
    pub restoration: Option<RestorationStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub held_out: SplitReport,
    pub unseen: Option<SplitReport>,
}

/// Embeds the queries the way `cfg.model.variant` prescribes and scores them
/// against an already embedded gallery.
fn evaluate_split(
    model: &JointModel<f32>,
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    queries: &[Query],
    gallery: &[(ItemId, ImageTensor)],
) -> Result<SplitReport> {
    let index = build_gallery(model, gallery)?;
    score_queries(model, cfg, sched, queries, &index)
}

fn score_queries(
    model: &JointModel<f32>,
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    queries: &[Query],
    index: &GalleryIndex,
) -> Result<SplitReport> {
    if queries.is_empty() {
        return Err(Error::Input("no queries to evaluate".into()));
    }
    let corrupted: Vec<ImageTensor> = queries.iter().map(|q| q.corrupted.clone()).collect();
    let (inputs, restoration) = match cfg.model.variant {
        Variant::MatchingOnly => (corrupted, None),
        Variant::Joint => {
            let restored = restore_queries(model, cfg, sched, &corrupted)?;
            let n = queries.len() as f64;
            let mut stats = RestorationStats { corrupted_mse: 0.0, restored_mse: 0.0 };
            for (q, r) in queries.iter().zip(&restored) {
                stats.corrupted_mse += q.corrupted.mse_to(&q.clean)? / n;
                stats.restored_mse += r.mse_to(&q.clean)? / n;
            }
            (restored, Some(stats))
        }
    };
    let embs = embed_images(model, &inputs)?;
    let items: Vec<(ItemId, EmbeddingVector)> = queries.iter().map(|q| q.id).zip(embs).collect();
    let truth: GroundTruth = queries.iter().map(|q| (q.id, [q.location_id].into())).collect();
    let metrics = evaluate(&items, index, &truth, &cfg.eval.ks)?;
    Ok(SplitReport { metrics, restoration })
}

/// Held-out metrics for the training locations.
pub fn run_eval(model: &JointModel<f32>, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let ds = generate_dataset(&cfg.dataset)?;
    Ok(evaluate_model(model, cfg, &ds)?.held_out.metrics)
}

/// Held-out and unseen-location evaluation on `ds`.
pub fn evaluate_model(model: &JointModel<f32>, cfg: &ExperimentConfig, ds: &Dataset) -> Result<EvalOutcome> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let split = split_dataset(ds, cfg);
    let index = build_gallery(model, &gallery_images(ds)?)?;
    let held_out = score_queries(model, cfg, &sched, &split.held_out, &index)?;
    let unseen = if split.unseen.is_empty() {
        None
    } else {
        Some(score_queries(model, cfg, &sched, &split.unseen, &index)?)
    };
    Ok(EvalOutcome { held_out, unseen })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::toy();
        c.dataset.locations = 4;
        c.dataset.views_per_location = 3;
        c.dataset.unseen_locations = 2;
        c.dataset.distractors = 5;
        c.dataset.image_size = 16;
        c.schedule.steps = 4;
        c.optim.epochs = 2;
        c.optim.batch = 4;
        c.model.latent_channels = 8;
        c.model.embed_dim = 8;
        c.model.head_hidden = 8;
        c.model.decoder_channels = [4, 4];
        c.eval.ks = vec![1, 2];
        c
    }

    #[test]
    fn held_out_counts() {
        assert_eq!(held_out_count(6, 0.2), 1);
        assert_eq!(held_out_count(10, 0.2), 2);
        assert_eq!(held_out_count(2, 0.9), 1);
    }

    #[test]
    fn split_shapes() {
        let c = tiny_config();
        let ds = generate_dataset(&c.dataset).unwrap();
        let s = split_dataset(&ds, &c);
        assert_eq!(s.held_out.len(), 4);
        assert_eq!(s.train.len(), 4 * 2 + 4);
        assert_eq!(s.unseen.len(), 2 * 3);
        let ids: std::collections::BTreeSet<_> = s.held_out.iter().chain(&s.unseen).map(|q| q.id).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut c = tiny_config();
        c.optim.epochs = 0;
        let (m, h) = train_joint(&c).unwrap();
        assert!(h.steps.is_empty());
        let fresh = init_model(&c).unwrap();
        assert_eq!(
            crate::container::model_records(&m),
            crate::container::model_records(&fresh)
        );
    }

    #[test]
    fn training_is_reproducible_and_accounted() {
        let mut c = tiny_config();
        c.eval.eval_every = 1;
        let (m1, h1) = train_joint(&c).unwrap();
        let (_, h2) = train_joint(&c).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.steps.len(), 2 * 3);
        assert_eq!(h1.evals.len(), 2);
        for (i, r) in h1.steps.iter().enumerate() {
            assert_eq!(r.step, i + 1);
            assert_eq!(r.l_all, r.l_res + r.l_mat);
            assert!((1..=4).contains(&r.t));
        }
        let report = run_eval(&m1, &c).unwrap();
        assert_eq!(report.to_csv().lines().count(), 1 + c.eval.ks.len() + 1);
    }

    #[test]
    fn full_chain_and_ablation_run() {
        let mut c = tiny_config();
        c.optim.epochs = 1;
        c.optim.full_chain = true;
        let (_, h) = train_joint(&c).unwrap();
        assert!(h.steps.iter().all(|r| r.t == 0 && r.l_all.is_finite()));
        c.optim.full_chain = false;
        c.model.variant = Variant::MatchingOnly;
        let (m, h) = train_joint(&c).unwrap();
        assert!(h.steps.iter().all(|r| r.l_res == 0.0));
        let ds = generate_dataset(&c.dataset).unwrap();
        let out = evaluate_model(&m, &c, &ds).unwrap();
        assert!(out.held_out.restoration.is_none());
        assert!(out.unseen.is_some());
    }
}
