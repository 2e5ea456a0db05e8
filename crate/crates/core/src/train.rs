//! Dice + cross-entropy loss, warmup-cosine schedule, AdamW and the
//! training loop.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::infer::{argmax_labels, reflect_pad, sliding_window_infer, DEFAULT_OVERLAP};
use crate::metrics::{dice_score, Mask};
use crate::model::{checkpoint, Dropout, ModelWeights, UNesT, UNesTConfig};
use crate::phantom::{window_normalize, WINDOW_HI, WINDOW_LO};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::volume::{Image, Labels};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Decoupled AdamW weight decay.
    pub weight_decay: f64,
    /// Learning rate reached at `total_steps`. The default 0 decays to zero;
    /// setting it to 1e-5 with `weight_decay` 0 gives the terminal-rate
    /// reading of the recipe.
    pub final_lr: f64,
    pub batch_size: usize,
    pub sub_volume: [usize; 3],
    pub dice_w: f64,
    pub ce_w: f64,
    pub seed: u64,
    pub data_fraction: f64,
    /// Probability that a crop is centred on a random foreground voxel.
    pub foreground_crop_prob: f64,
    pub log_every: usize,
    /// Validation period in steps; 0 disables validation.
    pub val_every: usize,
    pub val_overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 500,
            total_steps: 50_000,
            weight_decay: 1e-5,
            final_lr: 0.0,
            batch_size: 1,
            sub_volume: [96; 3],
            dice_w: 1.0,
            ce_w: 1.0,
            seed: 0,
            data_fraction: 1.0,
            foreground_crop_prob: 0.5,
            log_every: 10,
            val_every: 0,
            val_overlap: DEFAULT_OVERLAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.warmup_steps >= self.total_steps {
            return err(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return err(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            ));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return err("batch_size and log_every must be positive".into());
        }
        if !(self.peak_lr >= 0.0 && self.final_lr >= 0.0 && self.weight_decay >= 0.0) {
            return err("learning rates and weight decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.foreground_crop_prob) {
            return err("foreground_crop_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Number of training cases kept out of `available`.
    pub fn cases_used(&self, available: usize) -> usize {
        ((available as f64 * self.data_fraction).round() as usize).clamp(1, available.max(1))
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `final_lr` at
/// `total_steps`. Steps past the end stay at `final_lr`.
pub fn lr_at_step(step: usize, tc: &TrainConfig) -> f64 {
    let w = tc.warmup_steps;
    if step < w {
        return tc.peak_lr * step as f64 / w as f64;
    }
    let t = step.min(tc.total_steps);
    let progress = (t - w) as f64 / (tc.total_steps - w) as f64;
    tc.final_lr + (tc.peak_lr - tc.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// `dice_w · (1 − mean soft Dice over classes) + ce_w · mean voxel CE`.
///
/// `logits` is `[b, K, D, H, W]` and `labels` holds `b·D·H·W` class indices
/// in the same voxel order. Soft Dice pools every batch item per class.
pub fn dice_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    dice_w: f64,
    ce_w: f64,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() < 3 {
        return Err(Error::Dimension(format!(
            "logits must be [b, K, ...], got {shape:?}"
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    let vox: usize = shape[2..].iter().product();
    if labels.len() != b * vox {
        return Err(Error::Dimension(format!(
            "{} labels for logits {shape:?}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut onehot = Tensor::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        let (bi, v) = (i / vox, i % vox);
        onehot.data_mut()[(bi * k + l as usize) * vox + v] = T::one();
    }
    let y = g.constant(onehot);

    let log_p = g.log_softmax(logits, 1)?;
    let ce = g.mul(log_p, y)?;
    let ce = g.sum(ce);
    let ce = g.scale(ce, -1.0 / (b * vox) as f64);

    let p = g.softmax(logits, 1)?;
    let per_class = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let x = g.reshape(x, &[b, k, vox])?;
        let x = g.permute(x, &[1, 0, 2])?;
        let x = g.reshape(x, &[k, b * vox])?;
        g.sum_axis(x, 1)
    };
    let py = g.mul(p, y)?;
    let inter = per_class(g, py)?;
    let sp = per_class(g, p)?;
    let sy = per_class(g, y)?;
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let den = g.add(sp, sy)?;
    let den = g.add_scalar(den, DICE_SMOOTH);
    let dice = g.div(num, den)?;
    let dice = g.mean(dice);
    let dice_loss = g.scale(dice, -1.0);
    let dice_loss = g.add_scalar(dice_loss, 1.0);

    let a = g.scale(dice_loss, dice_w);
    let c = g.scale(ce, ce_w);
    g.add(a, c)
}

/// First and second moment estimates of AdamW.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let zeros = || {
            weights
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `w ← w − lr·(m̂ / (√v̂ + ε) + λ·w)`.
pub fn adamw_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != weights.len() || state.m.len() != weights.len() {
        return Err(Error::Internal(format!(
            "{} weights, {} gradients, {} optimizer slots",
            weights.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = ADAM_BETAS;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (w, g)) in weights.tensors_mut().iter_mut().zip(grads).enumerate() {
        if w.shape() != g.shape() || state.m[i].len() != w.numel() {
            return Err(Error::Internal(format!(
                "parameter {i}: weight {:?}, gradient {:?}",
                w.shape(),
                g.shape()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (wj, gj)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS) + weight_decay * wj.as_f64();
            *wj = T::of(wj.as_f64() - lr * update);
        }
    }
    Ok(())
}

/// A case with its image already windowed to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub image: Image,
    pub labels: Labels,
}

pub fn prepare(case: &Case) -> Result<Prepared> {
    Ok(Prepared {
        id: case.id.clone(),
        image: window_normalize(&case.image, WINDOW_LO, WINDOW_HI)?,
        labels: case.labels.clone(),
    })
}

fn reflect_pad_labels(labels: &Labels, size: [usize; 3]) -> Labels {
    let as_image = Image {
        shape: labels.shape,
        spacing_mm: labels.spacing_mm,
        data: labels.data.iter().map(|&v| v as f32).collect(),
    };
    let padded = reflect_pad(&as_image, size);
    Labels {
        shape: size,
        spacing_mm: labels.spacing_mm,
        data: padded.data.iter().map(|&v| v as u8).collect(),
    }
}

/// Draws a crop origin: half the time (by default) centred on a random
/// foreground voxel, otherwise uniform over valid positions.
fn crop_origin(
    labels: &Labels,
    crop: [usize; 3],
    fg_prob: f64,
    rng: &mut SplitMix64,
) -> [usize; 3] {
    let shape = labels.shape;
    let limit: [usize; 3] = std::array::from_fn(|a| shape[a] - crop[a]);
    if rng.uniform() < fg_prob {
        let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels.data[i] > 0).collect();
        if !fg.is_empty() {
            let i = fg[rng.below(fg.len())];
            let c = [
                i / (shape[1] * shape[2]),
                (i / shape[2]) % shape[1],
                i % shape[2],
            ];
            return std::array::from_fn(|a| c[a].saturating_sub(crop[a] / 2).min(limit[a]));
        }
    }
    std::array::from_fn(|a| rng.below(limit[a] + 1))
}

/// One training batch: images `[b, 1, crop...]` and flat labels.
pub fn sample_batch<T: Scalar>(
    cases: &[Prepared],
    crop: [usize; 3],
    batch: usize,
    fg_prob: f64,
    rng: &mut SplitMix64,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..batch {
        let case = &cases[rng.below(cases.len())];
        let size: [usize; 3] = std::array::from_fn(|a| case.image.shape[a].max(crop[a]));
        let image = reflect_pad(&case.image, size);
        let labels = reflect_pad_labels(&case.labels, size);
        let origin = crop_origin(&labels, crop, fg_prob, rng);
        xs.extend(
            image
                .crop(origin, crop)?
                .data
                .iter()
                .map(|&v| T::of(v as f64)),
        );
        ys.extend(labels.crop(origin, crop)?.data);
    }
    let [d, h, w] = crop;
    Ok((Tensor::new(&[batch, 1, d, h, w], xs)?, ys))
}

/// One optimisation step; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &UNesT,
    weights: &mut ModelWeights<T>,
    state: &mut AdamState<T>,
    x: &Tensor<T>,
    labels: &[u8],
    lr: f64,
    tc: &TrainConfig,
    dropout_seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let params = weights.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let logits = model.logits(&mut g, &params, xv, &mut Dropout::train(dropout_seed))?;
    let loss = dice_ce_loss(&mut g, logits, labels, tc.dice_w, tc.ce_w)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {value}")));
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<T>> = params
        .vars()
        .iter()
        .zip(weights.tensors())
        .map(|(&v, w)| grads.take(v).unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect();
    adamw_step(weights, &grads, state, lr, tc.weight_decay)?;
    Ok(value)
}

/// Mean foreground Dice per class between two label grids.
pub fn foreground_dice(pred: &Labels, reference: &Labels, num_classes: usize) -> Result<Vec<f64>> {
    (1..num_classes)
        .map(|c| {
            dice_score(
                &Mask::from_labels(pred, c as u8),
                &Mask::from_labels(reference, c as u8),
            )
        })
        .collect()
}

/// Per-class foreground Dice averaged over cases, by sliding-window inference.
pub fn evaluate_dice<T: Scalar>(
    model: &UNesT,
    weights: &ModelWeights<T>,
    cases: &[Prepared],
    overlap: f64,
) -> Result<Vec<f64>> {
    let k = model.config().num_classes;
    let mut acc = vec![0.0; k - 1];
    for case in cases {
        let probs = sliding_window_infer(model, weights, &case.image, overlap)?;
        let pred = argmax_labels(&probs)?;
        for (a, d) in acc.iter_mut().zip(foreground_dice(&pred, &case.labels, k)?) {
            *a += d / cases.len() as f64;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_dsc_mean: Option<f64>,
    pub val_dsc_per_class: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: UNesT,
    pub weights: ModelWeights<T>,
    pub log: Vec<LogRow>,
    /// Training cases actually used, after `data_fraction`.
    pub used_cases: Vec<String>,
}

/// Trains from scratch. With `ablate_aggregation` the encoder uses one
/// global block per hierarchy and strided pooling in place of aggregation.
/// When `out_dir` is given, writes `train_log.csv` and `model.ckpt` there.
pub fn train<T: Scalar>(
    model_cfg: &UNesTConfig,
    tc: &TrainConfig,
    train_cases: &[Case],
    val_cases: &[Case],
    ablate_aggregation: bool,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    let cfg = UNesTConfig {
        block_aggregation: !ablate_aggregation,
        ..model_cfg.clone()
    };
    if tc.sub_volume != cfg.input_size {
        return Err(Error::Config(format!(
            "sub_volume {:?} must equal the model input size {:?}",
            tc.sub_volume, cfg.input_size
        )));
    }
    if train_cases.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let model = UNesT::new(cfg.clone())?;
    let mut weights = model.init_weights::<T>(tc.seed);
    let mut state = AdamState::new(&weights);

    let mut order: Vec<usize> = (0..train_cases.len()).collect();
    SplitMix64::stream(tc.seed, 0x4652_4143).shuffle(&mut order);
    order.truncate(tc.cases_used(train_cases.len()));
    order.sort_unstable();
    let train_set = order
        .iter()
        .map(|&i| prepare(&train_cases[i]))
        .collect::<Result<Vec<_>>>()?;
    let val_set = val_cases.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    for c in train_set.iter() {
        if let Some(&bad) = c
            .labels
            .data
            .iter()
            .find(|&&l| l as usize >= cfg.num_classes)
        {
            return Err(Error::Data(format!("{}: label {bad} out of range", c.id)));
        }
    }

    let mut rng = SplitMix64::stream(tc.seed, 0x4352_4F50);
    let mut log = Vec::new();
    let mut log_writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(LogWriter::create(
                &dir.join("train_log.csv"),
                cfg.num_classes,
            )?)
        }
        None => None,
    };
    for step in 0..tc.total_steps {
        let lr = lr_at_step(step, tc);
        let (x, y) = sample_batch::<T>(
            &train_set,
            tc.sub_volume,
            tc.batch_size,
            tc.foreground_crop_prob,
            &mut rng,
        )?;
        let dropout_seed = tc.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let loss = train_step(
            &model,
            &mut weights,
            &mut state,
            &x,
            &y,
            lr,
            tc,
            dropout_seed,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        let last = step + 1 == tc.total_steps;
        let validate =
            !val_set.is_empty() && tc.val_every > 0 && ((step + 1) % tc.val_every == 0 || last);
        if step % tc.log_every == 0 || last || validate {
            let per_class = if validate {
                evaluate_dice(&model, &weights, &val_set, tc.val_overlap)?
            } else {
                Vec::new()
            };
            let row = LogRow {
                step,
                lr,
                loss,
                val_dsc_mean: (!per_class.is_empty())
                    .then(|| per_class.iter().sum::<f64>() / per_class.len() as f64),
                val_dsc_per_class: per_class,
            };
            if let Some(w) = log_writer.as_mut() {
                w.write(&row)?;
            }
            log.push(row);
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("model.ckpt"), &cfg, &weights)?;
    }
    Ok(TrainOutcome {
        model,
        weights,
        log,
        used_cases: train_set.into_iter().map(|c| c.id).collect(),
    })
}

struct LogWriter {
    path: std::path::PathBuf,
    inner: csv::Writer<std::fs::File>,
    classes: usize,
}

impl LogWriter {
    fn create(path: &Path, classes: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(|e| Error::Internal(e.to_string()))?;
        let mut header = vec![
            "step".to_string(),
            "lr".into(),
            "loss".into(),
            "val_dsc_mean".into(),
        ];
        header.extend((1..classes).map(|c| format!("val_dsc_class{c}")));
        inner
            .write_record(&header)
            .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
            classes,
        })
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        let mut rec = vec![
            row.step.to_string(),
            row.lr.to_string(),
            row.loss.to_string(),
        ];
        rec.push(row.val_dsc_mean.map(|v| v.to_string()).unwrap_or_default());
        for c in 0..self.classes - 1 {
            rec.push(
                row.val_dsc_per_class
                    .get(c)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        self.inner
            .write_record(&rec)
            .map_err(|e| Error::Internal(e.to_string()))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}
