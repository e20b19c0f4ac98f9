//! Training loops: contrastive pretraining with chunked two-phase
//! backpropagation, frozen and full fine-tuning with a linear probe,
//! learning-rate grid search, and evaluation metrics.
//!
//! Batch losses couple every instance, so a step runs in two phases:
//! chunks of the batch are forwarded to representations whose tapes are
//! dropped, the loss and its representation gradients are computed on a
//! small dedicated tape, and each chunk is re-forwarded with identical
//! dropout streams and backpropagated from its gradient slice. Chunk
//! gradients are summed in a fixed order, keeping runs bit-reproducible
//! for any worker count.

use crate::augment::{AugmentSpec, Family};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{nt_xent, ts2vec_hierarchical};
use crate::model::{
    forward_batch, head_logits, linear_map, output_length, pool_bounds, project, BoundModel,
    EncoderArch, Linear, ModelParams, EMBED_DIM, POOL_SEGMENTS, PROJ_DIM,
};
use crate::optim::AdamW;
use crate::pairing::{build_batch, PairBatch, Strategy};
use ndarray::{concatenate, Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// Fine-tuning learning-rate grid.
pub const LR_GRID: [f64; 5] = [5e-3, 1e-3, 5e-4, 1e-4, 5e-5];

/// Instances per forward chunk; bounds the working set of one tape.
const CHUNK: usize = 4;

const PURPOSE_INIT: u64 = 0;
const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_PAIR: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;
const PURPOSE_VAL_PAIR: u64 = 4;
const PURPOSE_HEAD_INIT: u64 = 5;
const PURPOSE_HEAD_SHUFFLE: u64 = 6;

/// Independent deterministic stream per (seed, purpose, a, b).
fn rng_for(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&purpose.to_le_bytes());
    s[16..24].copy_from_slice(&a.to_le_bytes());
    s[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(s)
}

fn pack(batch: u64, chunk: usize) -> u64 {
    (batch << 32) | chunk as u64
}

/// Worker cap from CRLC_SSL_THREADS; defaults to 1.
pub fn worker_threads() -> usize {
    std::env::var("CRLC_SSL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn chunk_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(size)
        .map(|s| s..(s + size).min(n))
        .collect()
}

/// Applies `f` to 0..n, possibly across scoped worker threads; results
/// come back in index order either way.
fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    let per = n.div_ceil(threads);
    std::thread::scope(|s| {
        for (ti, seg) in slots.chunks_mut(per).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, slot) in seg.iter_mut().enumerate() {
                    *slot = Some(f(ti * per + j));
                }
            });
        }
    });
    slots.into_iter().map(|o| o.expect("all slots filled")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    NtXent,
    Ts2Vec,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub tau: f64,
    pub seed: u64,
    pub family: Option<Family>,
    pub sample_rate: f64,
}

impl Default for RunConfig {
    /// Synthetic-benchmark pretraining defaults.
    fn default() -> Self {
        Self {
            strategy: Strategy::Crlc,
            loss: LossKind::NtXent,
            rounds: 3,
            epochs: 50,
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 32,
            dropout: 0.1,
            tau: 0.1,
            seed: 0,
            family: None,
            sample_rate: 100.0,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::invalid("need epochs >= 1 and batch_size >= 2"));
        }
        if self.lr <= 0.0 || self.tau <= 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("lr and tau must be positive, dropout in [0,1)"));
        }
        Ok(())
    }

    fn augment_spec(&self) -> Result<Option<AugmentSpec>> {
        if self.strategy != Strategy::Cac {
            return Ok(None);
        }
        let family = self
            .family
            .ok_or_else(|| Error::invalid("augmentation strategy needs a signal family"))?;
        Ok(Some(AugmentSpec {
            family,
            sample_rate: self.sample_rate,
        }))
    }
}

/// Surfaces strategy/dataset incompatibilities before training starts.
pub fn check_strategy(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    match cfg.strategy {
        Strategy::Crlc => {
            if ds.channels() < 4 {
                return Err(Error::StrategyInapplicable(format!(
                    "channel-subset pairing needs at least 4 channels, got {}",
                    ds.channels()
                )));
            }
        }
        Strategy::Csc => {
            if ds.paired.is_none() && ds.window_len() % 2 != 0 {
                return Err(Error::invalid(
                    "adjacent-window pairing needs paired windows or even T",
                ));
            }
        }
        Strategy::Cac => {
            cfg.augment_spec()?;
            if cfg.family == Some(Family::Eeg) && ds.window_len() <= 76 {
                return Err(Error::invalid(
                    "EEG augmentation needs more than 76 samples for the time shift",
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub projector: Linear<f32>,
    pub log: Vec<EpochRecord>,
}

/// Contrastive pretraining; deterministic given the config seed.
pub fn pretrain(
    cfg: &RunConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_strategy(cfg, train)?;
    if let Some(v) = val {
        check_strategy(cfg, v)?;
    }
    let aug = cfg.augment_spec()?;
    let mut init_rng = rng_for(cfg.seed, PURPOSE_INIT, 0, 0);
    let mut params =
        ModelParams::<f32>::init(&EncoderArch::default(), cfg.rounds, &mut init_rng);
    let mut projector = Linear::<f32>::init(EMBED_DIM, PROJ_DIM, &mut init_rng);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, PURPOSE_SHUFFLE, epoch as u64, 0));
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (bi, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let batch = build_batch(
                train,
                idx,
                cfg.strategy,
                aug.as_ref(),
                &mut rng_for(cfg.seed, PURPOSE_PAIR, epoch as u64, bi as u64),
            )?;
            let (loss, model_grads, proj_grads) =
                batch_gradients(cfg, &params, &projector, &batch, epoch as u64, bi as u64, true)?;
            let mut views: Vec<_> = params
                .tensors_mut()
                .into_iter()
                .map(|(_, v)| v)
                .collect();
            views.extend(
                projector
                    .tensors_mut("projector")
                    .into_iter()
                    .map(|(_, v)| v),
            );
            let mut grads = model_grads;
            grads.extend(proj_grads);
            opt.step(&mut views, &grads);
            loss_sum += loss;
            steps += 1;
        }
        let val_loss = match val {
            Some(v) => Some(validation_loss(cfg, &params, &projector, v, epoch as u64)?),
            None => None,
        };
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            val_loss,
            steps,
        });
    }
    Ok(PretrainOutcome {
        params,
        projector,
        log,
    })
}

/// Contiguous index batches; a trailing batch below two instances is
/// dropped (no negatives available).
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .collect()
}

fn forward_pair_on_tape(
    tape: &mut Tape<f32>,
    model: &BoundModel,
    view1: &[crate::data::Window],
    view2: &[crate::data::Window],
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
    let z1 = forward_batch(tape, model, view1, dropout, training, rng)?;
    let z2 = forward_batch(tape, model, view2, dropout, training, rng)?;
    Ok((z1, z2))
}

type GradVec = Vec<Option<ArrayD<f32>>>;

/// Loss value plus gradients for model and projector tensors (visit
/// order). With `training` false only the loss is computed.
fn batch_gradients(
    cfg: &RunConfig,
    params: &ModelParams<f32>,
    projector: &Linear<f32>,
    batch: &PairBatch,
    epoch: u64,
    bi: u64,
    training: bool,
) -> Result<(f64, GradVec, GradVec)> {
    let ranges = chunk_ranges(batch.len(), CHUNK);
    let purpose = if training {
        PURPOSE_DROPOUT
    } else {
        PURPOSE_VAL_PAIR
    };
    // Phase A: forward chunks, keep representation values only.
    let reps: Vec<Result<(ArrayD<f32>, ArrayD<f32>)>> = map_chunks(ranges.len(), |ci| {
        let r = &ranges[ci];
        let mut rng = rng_for(cfg.seed, purpose, epoch, pack(bi, ci));
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let (z1, z2) = forward_pair_on_tape(
            &mut tape,
            &model,
            &batch.view1[r.clone()],
            &batch.view2[r.clone()],
            cfg.dropout,
            training,
            &mut rng,
        )?;
        Ok((tape.value(z1).clone(), tape.value(z2).clone()))
    });
    let mut z1_parts = Vec::with_capacity(ranges.len());
    let mut z2_parts = Vec::with_capacity(ranges.len());
    for r in reps {
        let (a, b) = r?;
        z1_parts.push(a);
        z2_parts.push(b);
    }
    let views1: Vec<_> = z1_parts.iter().map(|a| a.view()).collect();
    let views2: Vec<_> = z2_parts.iter().map(|a| a.view()).collect();
    let z1_all = concatenate(Axis(0), &views1).expect("chunk shapes agree");
    let z2_all = concatenate(Axis(0), &views2).expect("chunk shapes agree");
    // Loss tape over the gathered representations.
    let mut lt = Tape::<f32>::new();
    let z1v = lt.leaf(z1_all);
    let z2v = lt.leaf(z2_all);
    let (loss, bound_proj) = match cfg.loss {
        LossKind::NtXent => {
            let bp = projector.bind(&mut lt);
            let p1 = project(&mut lt, z1v, &bp);
            let p2 = project(&mut lt, z2v, &bp);
            (nt_xent(&mut lt, p1, p2, cfg.tau)?, Some(bp))
        }
        LossKind::Ts2Vec => (ts2vec_hierarchical(&mut lt, z1v, z2v)?, None),
    };
    let loss_val = lt.scalar_value(loss) as f64;
    if !loss_val.is_finite() {
        return Err(Error::invalid(format!("non-finite loss {loss_val}")));
    }
    if !training {
        return Ok((loss_val, Vec::new(), Vec::new()));
    }
    let lg = lt.backward_scalar(loss);
    let dz1 = lg.wrt(z1v).expect("loss depends on z1").clone();
    let dz2 = lg.wrt(z2v).expect("loss depends on z2").clone();
    let proj_grads: GradVec = match bound_proj {
        Some(bp) => vec![lg.wrt(bp.weight).cloned(), lg.wrt(bp.bias).cloned()],
        None => vec![None, None],
    };
    // Phase B: re-forward with identical streams, backpropagate each
    // chunk from its gradient slice via the inner-product proxy.
    let n_model = 4 * params.blocks.len() + 2 * (3 + params.message.len());
    let chunk_grads: Vec<Result<GradVec>> = map_chunks(ranges.len(), |ci| {
        let r = &ranges[ci];
        let mut rng = rng_for(cfg.seed, PURPOSE_DROPOUT, epoch, pack(bi, ci));
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let (z1, z2) = forward_pair_on_tape(
            &mut tape,
            &model,
            &batch.view1[r.clone()],
            &batch.view2[r.clone()],
            cfg.dropout,
            true,
            &mut rng,
        )?;
        let s1 = tape.leaf(dz1.slice_axis(Axis(0), (r.clone()).into()).to_owned());
        let s2 = tape.leaf(dz2.slice_axis(Axis(0), (r.clone()).into()).to_owned());
        let m1 = tape.mul(z1, s1);
        let m2 = tape.mul(z2, s2);
        let t1 = tape.sum_all(m1);
        let t2 = tape.sum_all(m2);
        let proxy = tape.add(t1, t2);
        let g = tape.backward_scalar(proxy);
        Ok(model.vars().iter().map(|&v| g.wrt(v).cloned()).collect())
    });
    let mut acc: GradVec = vec![None; n_model];
    for cg in chunk_grads {
        for (slot, g) in acc.iter_mut().zip(cg?) {
            match (slot.as_mut(), g) {
                (Some(s), Some(g)) => *s += &g,
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }
    Ok((loss_val, acc, proj_grads))
}

fn validation_loss(
    cfg: &RunConfig,
    params: &ModelParams<f32>,
    projector: &Linear<f32>,
    val: &Dataset,
    epoch: u64,
) -> Result<f64> {
    let aug = cfg.augment_spec()?;
    let order: Vec<usize> = (0..val.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (bi, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
        let batch = build_batch(
            val,
            idx,
            cfg.strategy,
            aug.as_ref(),
            &mut rng_for(cfg.seed, PURPOSE_VAL_PAIR, epoch, bi as u64),
        )?;
        let (loss, _, _) =
            batch_gradients(cfg, params, projector, &batch, epoch, bi as u64, false)?;
        total += loss;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData(
            "validation set too small for one batch".into(),
        ));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub epochs_ran: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub head: Linear<f32>,
    pub params: ModelParams<f32>,
    pub metrics: Metrics,
}

/// Mean of per-class recalls. Classes absent from `labels` are excluded
/// (with a warning) and reported as NaN recall.
pub fn balanced_accuracy(preds: &[u32], labels: &[u32], n_classes: usize) -> (f64, Vec<f64>) {
    assert_eq!(preds.len(), labels.len());
    let mut correct = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        total[l as usize] += 1;
        if p == l {
            correct[l as usize] += 1;
        }
    }
    let mut recalls = Vec::with_capacity(n_classes);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        if total[c] == 0 {
            eprintln!("warning: class {c} absent from evaluation set, excluded");
            recalls.push(f64::NAN);
        } else {
            let r = correct[c] as f64 / total[c] as f64;
            recalls.push(r);
            sum += r;
            present += 1;
        }
    }
    (sum / present.max(1) as f64, recalls)
}

/// Pooled 4*embed features for every window, inference mode.
pub fn compute_features(params: &ModelParams<f32>, ds: &Dataset) -> Result<Array2<f32>> {
    let t_out = output_length(ds.window_len())?;
    let bounds = pool_bounds(t_out)?;
    let dim = POOL_SEGMENTS * params.arch.embed;
    let ranges = chunk_ranges(ds.len(), CHUNK);
    let feats: Vec<Result<Array2<f32>>> = map_chunks(ranges.len(), |ci| {
        let r = &ranges[ci];
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let mut rng = rng_for(0, 0, 0, 0);
        let z = forward_batch(&mut tape, &model, &ds.windows[r.clone()], 0.0, false, &mut rng)?;
        let pooled = tape.avg_pool_segments(z, &bounds);
        let flat = tape.reshape(pooled, &[r.len(), dim]);
        Ok(tape
            .value(flat)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2D features")
            .to_owned())
    });
    let mut out = Array2::<f32>::zeros((ds.len(), dim));
    for (r, f) in ranges.iter().zip(feats) {
        out.slice_mut(ndarray::s![r.clone(), ..]).assign(&f?);
    }
    Ok(out)
}

/// Class predictions from pooled features (ties to the lower index).
pub fn predict_features(head: &Linear<f32>, x: &Array2<f32>) -> Vec<u32> {
    let logits = x.dot(&head.weight) + &head.bias;
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Trains the linear head on cached features with early stopping on
/// validation balanced accuracy (restore best).
pub fn train_head_on_features(
    cfg: &FinetuneConfig,
    xtr: &Array2<f32>,
    ytr: &[u32],
    xval: &Array2<f32>,
    yval: &[u32],
    n_classes: usize,
) -> Result<(Linear<f32>, Metrics)> {
    if n_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let mut head = Linear::<f32>::init(
        xtr.ncols(),
        n_classes,
        &mut rng_for(cfg.seed, PURPOSE_HEAD_INIT, 0, 0),
    );
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut best = head.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut epochs_ran = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..xtr.nrows()).collect();
        order.shuffle(&mut rng_for(cfg.seed, PURPOSE_HEAD_SHUFFLE, epoch as u64, 0));
        for idx in order.chunks(cfg.batch_size) {
            let xb = xtr.select(Axis(0), idx);
            let targets: Vec<usize> = idx.iter().map(|&i| ytr[i] as usize).collect();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(xb.into_dyn());
            let bh = head.bind(&mut tape);
            let logits = linear_map(&mut tape, x, &bh);
            let logp = tape.log_softmax_rows(logits);
            let nll = tape.nll_mean(logp, &targets);
            let g = tape.backward_scalar(nll);
            let grads = vec![g.wrt(bh.weight).cloned(), g.wrt(bh.bias).cloned()];
            let mut views: Vec<_> = head
                .tensors_mut("head")
                .into_iter()
                .map(|(_, v)| v)
                .collect();
            opt.step(&mut views, &grads);
        }
        epochs_ran = epoch + 1;
        let (acc, _) = balanced_accuracy(&predict_features(&head, xval), yval, n_classes);
        if acc > best_acc {
            best_acc = acc;
            best = head.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (acc, recalls) = balanced_accuracy(&predict_features(&best, xval), yval, n_classes);
    Ok((
        best,
        Metrics {
            balanced_accuracy: acc,
            per_class_recall: recalls,
            epochs_ran,
            lr: cfg.lr,
            seed: cfg.seed,
        },
    ))
}

fn labeled(ds: &Dataset) -> Result<(&[u32], usize)> {
    let labels = ds
        .labels
        .as_deref()
        .ok_or_else(|| Error::invalid("labeled dataset required"))?;
    let n_classes = ds
        .n_classes
        .ok_or_else(|| Error::invalid("dataset missing class count"))? as usize;
    Ok((labels, n_classes))
}

/// Attaches the linear probe and fine-tunes: frozen mode caches pooled
/// features and trains only the head; full mode updates every parameter.
pub fn attach_probe_and_finetune(
    params: &ModelParams<f32>,
    cfg: &FinetuneConfig,
    train: &Dataset,
    val: &Dataset,
    freeze: bool,
) -> Result<FinetuneOutcome> {
    let (ytr, n_classes) = labeled(train)?;
    let (yval, _) = labeled(val)?;
    pool_bounds(output_length(train.window_len())?)?;
    if freeze {
        let xtr = compute_features(params, train)?;
        let xval = compute_features(params, val)?;
        let (head, metrics) = train_head_on_features(cfg, &xtr, ytr, &xval, yval, n_classes)?;
        Ok(FinetuneOutcome {
            head,
            params: params.clone(),
            metrics,
        })
    } else {
        full_finetune(params, cfg, train, val, ytr, yval, n_classes)
    }
}

fn full_finetune(
    params0: &ModelParams<f32>,
    cfg: &FinetuneConfig,
    train: &Dataset,
    val: &Dataset,
    ytr: &[u32],
    yval: &[u32],
    n_classes: usize,
) -> Result<FinetuneOutcome> {
    let mut params = params0.clone();
    let mut head = Linear::<f32>::init(
        POOL_SEGMENTS * params.arch.embed,
        n_classes,
        &mut rng_for(cfg.seed, PURPOSE_HEAD_INIT, 0, 0),
    );
    let n_model = params.tensors().len();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut best = (params.clone(), head.clone());
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut epochs_ran = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, PURPOSE_HEAD_SHUFFLE, epoch as u64, 0));
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ranges = chunk_ranges(idx.len(), CHUNK);
            // Cross-entropy decomposes over instances, so each chunk
            // backpropagates its share of the batch mean directly.
            let results: Vec<Result<GradVec>> = map_chunks(ranges.len(), |ci| {
                let r = &ranges[ci];
                let windows: Vec<_> = idx[r.clone()]
                    .iter()
                    .map(|&i| train.windows[i].clone())
                    .collect();
                let targets: Vec<usize> =
                    idx[r.clone()].iter().map(|&i| ytr[i] as usize).collect();
                let mut rng =
                    rng_for(cfg.seed, PURPOSE_DROPOUT, epoch as u64, pack(bi as u64, ci));
                let mut tape = Tape::new();
                let model = params.bind(&mut tape);
                let bh = head.bind(&mut tape);
                let z = forward_batch(&mut tape, &model, &windows, cfg.dropout, true, &mut rng)?;
                let logits = head_logits(&mut tape, z, &bh)?;
                let logp = tape.log_softmax_rows(logits);
                let nll = tape.nll_mean(logp, &targets);
                let scaled = tape.scale(nll, r.len() as f32 / idx.len() as f32);
                let g = tape.backward_scalar(scaled);
                let mut out: GradVec =
                    model.vars().iter().map(|&v| g.wrt(v).cloned()).collect();
                out.push(g.wrt(bh.weight).cloned());
                out.push(g.wrt(bh.bias).cloned());
                Ok(out)
            });
            let mut acc: GradVec = vec![None; n_model + 2];
            for cg in results {
                for (slot, g) in acc.iter_mut().zip(cg?) {
                    match (slot.as_mut(), g) {
                        (Some(s), Some(g)) => *s += &g,
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            let mut views: Vec<_> = params
                .tensors_mut()
                .into_iter()
                .map(|(_, v)| v)
                .collect();
            views.extend(head.tensors_mut("head").into_iter().map(|(_, v)| v));
            opt.step(&mut views, &acc);
        }
        epochs_ran = epoch + 1;
        let xval = compute_features(&params, val)?;
        let (acc, _) = balanced_accuracy(&predict_features(&head, &xval), yval, n_classes);
        if acc > best_acc {
            best_acc = acc;
            best = (params.clone(), head.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (params, head) = best;
    let xval = compute_features(&params, val)?;
    let (acc, recalls) = balanced_accuracy(&predict_features(&head, &xval), yval, n_classes);
    Ok(FinetuneOutcome {
        head,
        params,
        metrics: Metrics {
            balanced_accuracy: acc,
            per_class_recall: recalls,
            epochs_ran,
            lr: cfg.lr,
            seed: cfg.seed,
        },
    })
}

/// Fine-tunes once per learning rate from the same initial state and
/// keeps the best validation balanced accuracy; ties go to the smaller
/// rate.
pub fn grid_search_lr(
    params: &ModelParams<f32>,
    cfg: &FinetuneConfig,
    train: &Dataset,
    val: &Dataset,
    freeze: bool,
    grid: &[f64],
) -> Result<(f64, FinetuneOutcome)> {
    if grid.is_empty() {
        return Err(Error::invalid("empty learning-rate grid"));
    }
    let mut rates = grid.to_vec();
    rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Frozen mode shares one feature computation across the grid.
    let cached = if freeze {
        Some((compute_features(params, train)?, compute_features(params, val)?))
    } else {
        None
    };
    let (ytr, n_classes) = labeled(train)?;
    let (yval, _) = labeled(val)?;
    let mut best: Option<(f64, FinetuneOutcome)> = None;
    for &lr in &rates {
        let mut c = cfg.clone();
        c.lr = lr;
        let outcome = match &cached {
            Some((xtr, xval)) => {
                let (head, metrics) =
                    train_head_on_features(&c, xtr, ytr, xval, yval, n_classes)?;
                FinetuneOutcome {
                    head,
                    params: params.clone(),
                    metrics,
                }
            }
            None => attach_probe_and_finetune(params, &c, train, val, freeze)?,
        };
        let better = match &best {
            None => true,
            Some((_, b)) => outcome.metrics.balanced_accuracy > b.metrics.balanced_accuracy,
        };
        if better {
            best = Some((lr, outcome));
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// Balanced accuracy of the frozen model plus head on a labeled set.
pub fn evaluate(
    params: &ModelParams<f32>,
    head: &Linear<f32>,
    test: &Dataset,
) -> Result<Metrics> {
    let (labels, n_classes) = labeled(test)?;
    let x = compute_features(params, test)?;
    let (acc, recalls) = balanced_accuracy(&predict_features(head, &x), labels, n_classes);
    Ok(Metrics {
        balanced_accuracy: acc,
        per_class_recall: recalls,
        epochs_ran: 0,
        lr: 0.0,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        generate_finetune, generate_pretrain, FinetuneSpec, FrequencyRegime, MixingStructure,
        SimSpec, CLASS_FREQS,
    };

    fn pretrain_ds(n: usize, c: usize, t: usize, seed: u64) -> Dataset {
        generate_pretrain(&SimSpec {
            c,
            m: c,
            t,
            sigma: 0.5,
            mixing: MixingStructure::Full,
            regime: FrequencyRegime::Drift,
            n_windows: n,
            seed,
        })
        .unwrap()
    }

    fn quick_cfg() -> RunConfig {
        RunConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            seed: 11,
            ..RunConfig::default()
        }
    }

    #[test]
    fn step_count_matches_batching() {
        let ds = pretrain_ds(10, 4, 192, 1);
        let cfg = RunConfig {
            batch_size: 5,
            ..quick_cfg()
        };
        let out = pretrain(&cfg, &ds, None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].steps, 2);
    }

    #[test]
    fn pretrain_deterministic() {
        let ds = pretrain_ds(6, 4, 192, 2);
        let val = pretrain_ds(4, 4, 192, 3);
        let cfg = RunConfig {
            epochs: 2,
            ..quick_cfg()
        };
        let a = pretrain(&cfg, &ds, Some(&val)).unwrap();
        let b = pretrain(&cfg, &ds, Some(&val)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.projector, b.projector);
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(
                ra.val_loss.map(f64::to_bits),
                rb.val_loss.map(f64::to_bits)
            );
        }
    }

    #[test]
    fn training_reduces_loss() {
        let ds = pretrain_ds(16, 4, 192, 4);
        let cfg = RunConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            ..quick_cfg()
        };
        let out = pretrain(&cfg, &ds, None).unwrap();
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn ts2vec_pretraining_runs() {
        let ds = pretrain_ds(4, 4, 384, 5);
        let cfg = RunConfig {
            loss: LossKind::Ts2Vec,
            strategy: Strategy::Csc,
            ..quick_cfg()
        };
        let out = pretrain(&cfg, &ds, None).unwrap();
        assert!(out.log[0].train_loss.is_finite());
        assert!(out.log[0].train_loss > 0.0);
    }

    #[test]
    fn crlc_on_narrow_dataset_rejected() {
        let ds = pretrain_ds(4, 3, 192, 6);
        let err = pretrain(&quick_cfg(), &ds, None).unwrap_err();
        assert!(matches!(err, Error::StrategyInapplicable(_)));
    }

    fn finetune_ds(n: usize, seed: u64) -> Dataset {
        generate_finetune(&FinetuneSpec {
            base: SimSpec {
                c: 4,
                m: 4,
                t: 384,
                sigma: 0.2,
                mixing: MixingStructure::Full,
                regime: FrequencyRegime::Drift,
                n_windows: n,
                seed,
            },
            class_freqs: CLASS_FREQS,
            class_source_index: 0,
            class_prior: 0.5,
        })
        .unwrap()
    }

    #[test]
    fn balanced_accuracy_math() {
        let (acc, rec) = balanced_accuracy(&[0, 1, 0, 1], &[0, 1, 0, 1], 2);
        assert_eq!(acc, 1.0);
        assert_eq!(rec, vec![1.0, 1.0]);
        let (acc, _) = balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1], 2);
        assert_eq!(acc, 0.5);
        // 9/10 recall on class 0, 5/10 on class 1.
        let mut preds = vec![0u32; 10];
        preds[9] = 1;
        let mut labels = vec![0u32; 10];
        preds.extend([1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        labels.extend(vec![1u32; 10]);
        let (acc, rec) = balanced_accuracy(&preds, &labels, 2);
        assert!((acc - 0.7).abs() < 1e-12);
        assert!((rec[0] - 0.9).abs() < 1e-12);
        assert!((rec[1] - 0.5).abs() < 1e-12);
        // Absent class excluded from the mean.
        let (acc, rec) = balanced_accuracy(&[0, 0], &[0, 0], 3);
        assert_eq!(acc, 1.0);
        assert!(rec[1].is_nan() && rec[2].is_nan());
    }

    #[test]
    fn untrained_head_is_chance_level() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        let x = Array2::from_shape_fn((200, 8), |_| r.gen_range(-1.0f32..1.0));
        let y: Vec<u32> = (0..200).map(|i| (i % 2) as u32).collect();
        let cfg = FinetuneConfig {
            max_epochs: 0,
            ..FinetuneConfig::default()
        };
        let (_, m) = train_head_on_features(&cfg, &x, &y, &x, &y, 2).unwrap();
        assert!((m.balanced_accuracy - 0.5).abs() <= 0.15, "{}", m.balanced_accuracy);
        assert_eq!(m.epochs_ran, 0);
    }

    #[test]
    fn head_learns_separable_features() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        use rand::Rng;
        let n = 120;
        let y: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let x = Array2::from_shape_fn((n, 6), |(i, j)| {
            let base = if y[i] == 0 { -1.0 } else { 1.0 };
            base + 0.1 * r.gen_range(-1.0f32..1.0) + j as f32 * 0.0
        });
        let cfg = FinetuneConfig {
            max_epochs: 30,
            lr: 1e-2,
            ..FinetuneConfig::default()
        };
        let (head, m) = train_head_on_features(&cfg, &x, &y, &x, &y, 2).unwrap();
        assert!(m.balanced_accuracy > 0.95, "{}", m.balanced_accuracy);
        // Restore-best contract: reported accuracy matches the returned
        // head exactly.
        let (check, _) = balanced_accuracy(&predict_features(&head, &x), &y, 2);
        assert_eq!(check, m.balanced_accuracy);
    }

    #[test]
    fn frozen_finetune_keeps_encoder_untouched() {
        let ds = finetune_ds(24, 9);
        let (train, rest) = crate::data::sample_balanced(&ds, 6, 1).unwrap();
        let mut init = rng_for(3, PURPOSE_INIT, 0, 0);
        let params = ModelParams::<f32>::init(&EncoderArch::default(), 2, &mut init);
        let cfg = FinetuneConfig {
            max_epochs: 2,
            ..FinetuneConfig::default()
        };
        let out = attach_probe_and_finetune(&params, &cfg, &train, &rest, true).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn full_finetune_updates_encoder() {
        let ds = finetune_ds(12, 10);
        let (train, rest) = crate::data::sample_balanced(&ds, 3, 1).unwrap();
        let mut init = rng_for(4, PURPOSE_INIT, 0, 0);
        let params = ModelParams::<f32>::init(&EncoderArch::default(), 1, &mut init);
        let cfg = FinetuneConfig {
            max_epochs: 1,
            batch_size: 4,
            ..FinetuneConfig::default()
        };
        let out = attach_probe_and_finetune(&params, &cfg, &train, &rest, false).unwrap();
        assert_ne!(out.params, params);
        assert_eq!(out.metrics.epochs_ran, 1);
    }

    #[test]
    fn grid_search_tie_prefers_smaller_rate() {
        // Every window is identical, so features and hence accuracy are
        // the same for every rate; the smallest rate must win the tie.
        let w = crate::data::Window::new(ndarray::Array2::<f32>::ones((4, 384))).unwrap();
        let n = 16;
        let ds = Dataset {
            windows: vec![w; n],
            labels: Some((0..n).map(|i| (i % 2) as u32).collect()),
            paired: None,
            n_classes: Some(2),
        };
        let mut init = rng_for(6, PURPOSE_INIT, 0, 0);
        let params = ModelParams::<f32>::init(&EncoderArch::default(), 0, &mut init);
        let cfg = FinetuneConfig {
            max_epochs: 2,
            ..FinetuneConfig::default()
        };
        let (lr, out) =
            grid_search_lr(&params, &cfg, &ds, &ds, true, &[5e-3, 1e-3, 5e-5]).unwrap();
        assert_eq!(lr, 5e-5);
        assert_eq!(out.metrics.balanced_accuracy, 0.5);
    }

    #[test]
    fn grid_search_on_dataset() {
        let ds = finetune_ds(20, 12);
        let (train, rest) = crate::data::sample_balanced(&ds, 5, 2).unwrap();
        let mut init = rng_for(5, PURPOSE_INIT, 0, 0);
        let params = ModelParams::<f32>::init(&EncoderArch::default(), 0, &mut init);
        let cfg = FinetuneConfig {
            max_epochs: 2,
            ..FinetuneConfig::default()
        };
        let (lr, out) = grid_search_lr(&params, &cfg, &train, &rest, true, &[1e-3]).unwrap();
        assert_eq!(lr, 1e-3);
        assert_eq!(out.metrics.lr, 1e-3);
        let ev = evaluate(&out.params, &out.head, &rest).unwrap();
        assert!(ev.balanced_accuracy >= 0.0 && ev.balanced_accuracy <= 1.0);
    }
}
