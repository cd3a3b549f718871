use std::io::Write;

use rand::seq::SliceRandom;

use super::{combine_losses, mlap_from_logits, nt_xent, simsiam_loss, Batch, ContrastiveKind, LossBreakdown, SslHeads, ViewBatcher};
use crate::audio::{sample_rng, AugmentationKind, Waveform};
use crate::error::{Error, Result};
use crate::model::{HeadId, Model, Phase, BN_MOMENTUM};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Var};

/// Backbone, pre-training heads and their optimizer state. The only writer
/// of parameters during pre-training.
pub struct Trainer<T> {
    model: Model<T>,
    heads: SslHeads<T>,
    backbone_opt: AdamState<T>,
    heads_opt: AdamState<T>,
    lambda: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, heads: SslHeads<T>, lambda: f64, adam: AdamConfig) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", adam.lr)));
        }
        heads.config().kind.validate()?;
        if heads.config().feature_dim != model.head_dim() {
            return Err(Error::Config(format!(
                "heads expect {} features, backbone head emits {}",
                heads.config().feature_dim,
                model.head_dim()
            )));
        }
        let backbone_opt = AdamState::new(adam, model.store());
        let heads_opt = AdamState::new(adam, heads.store());
        Ok(Trainer {
            model,
            heads,
            backbone_opt,
            heads_opt,
            lambda,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn heads(&self) -> &SslHeads<T> {
        &self.heads
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn steps_taken(&self) -> u64 {
        self.backbone_opt.step()
    }

    pub fn into_parts(self) -> (Model<T>, SslHeads<T>) {
        (self.model, self.heads)
    }

    fn contrastive_loss(&self, g: &mut Graph<T>, hb: &crate::tensor::Bound<T>, feats: Var, n: usize) -> Result<Var> {
        match self.heads.config().kind {
            ContrastiveKind::SimClr { temperature } => {
                let z = self.heads.project(g, hb, feats)?;
                let z1 = g.slice(z, 0, 0, n)?;
                let z2 = g.slice(z, 0, n, 2 * n)?;
                nt_xent(g, z1, z2, temperature)
            }
            ContrastiveKind::SimSiam => {
                let z = self.heads.project(g, hb, feats)?;
                let p = self.heads.predict(g, hb, z)?;
                let (z1, z2) = (g.slice(z, 0, 0, n)?, g.slice(z, 0, n, 2 * n)?);
                let (p1, p2) = (g.slice(p, 0, 0, n)?, g.slice(p, 0, n, 2 * n)?);
                simsiam_loss(g, p1, z2, p2, z1)
            }
        }
    }

    /// Contrastive loss on the contrastive head, augmentation prediction on
    /// the predictive head, one Adam update on everything.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossBreakdown> {
        let n = batch.len();
        if matches!(self.heads.config().kind, ContrastiveKind::SimClr { .. }) && n < 2 {
            return Err(Error::arg(format!("SimCLR needs a batch of at least 2 clips, got {n}")));
        }
        let mut g = Graph::new();
        let mut updates = Vec::new();
        let (breakdown, backbone_grads, head_grads) = {
            let bb = self.model.store().bind(&mut g, true);
            let hb = self.heads.store().bind(&mut g, true);
            let x = g.constant(batch.joint_input()?);
            let [fc, fp] = self.model.forward_heads(&mut g, &bb, x, Phase::Train, &mut updates)?;
            let c = self.contrastive_loss(&mut g, &hb, fc, n)?;
            let f1 = g.slice(fp, 0, 0, n)?;
            let f2 = g.slice(fp, 0, n, 2 * n)?;
            let logits = self.heads.mlap_logits(&mut g, &hb, f1, f2)?;
            let m = mlap_from_logits(&mut g, logits, &batch.labels)?;
            let total = combine_losses(&mut g, c, m, self.lambda)?;
            let value = |v: Var| g.value(v).item().expect("scalar loss").to_f64_lossy();
            let breakdown = LossBreakdown {
                contrastive: value(c),
                mlap: value(m),
                total: value(total),
                lambda: self.lambda,
            };
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite("total loss".into()));
            }
            let grads = g.backward(total)?;
            (breakdown, bb.grads(&grads), hb.grads(&grads))
        };
        adam_step(self.model.store_mut(), &backbone_grads, &mut self.backbone_opt)?;
        adam_step(self.heads.store_mut(), &head_grads, &mut self.heads_opt)?;
        self.model.apply_bn_updates(&updates, BN_MOMENTUM);
        Ok(breakdown)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub steps: Vec<StepRecord>,
}

impl LossLog {
    /// `(epoch, mean contrastive, mean mlap, mean total)` per epoch.
    pub fn epoch_means(&self) -> Vec<(u64, f64, f64, f64)> {
        let mut out: Vec<(u64, f64, f64, f64, usize)> = Vec::new();
        for r in &self.steps {
            match out.last_mut() {
                Some(last) if last.0 == r.epoch => {
                    last.1 += r.loss.contrastive;
                    last.2 += r.loss.mlap;
                    last.3 += r.loss.total;
                    last.4 += 1;
                }
                _ => out.push((r.epoch, r.loss.contrastive, r.loss.mlap, r.loss.total, 1)),
            }
        }
        out.into_iter()
            .map(|(e, c, m, t, k)| (e, c / k as f64, m / k as f64, t / k as f64))
            .collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss.total).collect()
    }

    pub fn write_epoch_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,contrastive,mlap,total")?;
        for (e, c, m, t) in self.epoch_means() {
            writeln!(w, "{e},{c},{m},{t}")?;
        }
        Ok(())
    }

    pub fn write_step_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,epoch,contrastive,mlap,total")?;
        for r in &self.steps {
            writeln!(w, "{},{},{},{},{}", r.step, r.epoch, r.loss.contrastive, r.loss.mlap, r.loss.total)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: u64,
    pub batch_size: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
}

/// Stream offset separating epoch shuffles from per-sample streams.
const SHUFFLE_STREAM: u64 = 1 << 62;

/// Epoch-shuffled mini-batches over `clips`. Incomplete trailing batches
/// are dropped unless the corpus is smaller than one batch.
pub fn pretrain<T: Scalar>(
    trainer: &mut Trainer<T>,
    batcher: &ViewBatcher,
    clips: &[Waveform],
    schedule: Schedule,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<LossLog> {
    if clips.is_empty() {
        return Err(Error::Data("no clips to pre-train on".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let bs = schedule.batch_size.min(clips.len());
    let mut log = LossLog::default();
    let mut step = 0u64;
    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut sample_rng(schedule.seed, SHUFFLE_STREAM + epoch));
        for chunk in order.chunks_exact(bs) {
            if schedule.max_steps.is_some_and(|m| step >= m) {
                return Ok(log);
            }
            let refs: Vec<&Waveform> = chunk.iter().map(|&i| &clips[i]).collect();
            let batch = batcher.batch::<T>(&refs, schedule.seed, step * bs as u64)?;
            let loss = trainer.train_step(&batch)?;
            let record = StepRecord { step, epoch, loss };
            on_step(&record);
            log.steps.push(record);
            step += 1;
        }
    }
    Ok(log)
}

/// Per-augmentation accuracy of the predictor on `batch`, inference mode,
/// logits thresholded at 0.
pub fn mlap_accuracy<T: Scalar>(model: &Model<T>, heads: &SslHeads<T>, batch: &Batch<T>) -> Result<[f64; AugmentationKind::COUNT]> {
    let n = batch.len();
    let mut g = Graph::new();
    let bb = model.store().bind(&mut g, false);
    let hb = heads.store().bind(&mut g, false);
    let x = g.constant(batch.joint_input()?);
    let fp = model.forward_one(&mut g, &bb, x, HeadId::Predictive, Phase::Eval, &mut Vec::new())?;
    let f1 = g.slice(fp, 0, 0, n)?;
    let f2 = g.slice(fp, 0, n, 2 * n)?;
    let logits = heads.mlap_logits(&mut g, &hb, f1, f2)?;
    let mut correct = [0usize; AugmentationKind::COUNT];
    for (row, labels) in g.value(logits).data().chunks(7).zip(batch.labels.data().chunks(7)) {
        for k in 0..AugmentationKind::COUNT {
            let predicted = row[k] > T::zero();
            let actual = labels[k] == T::one();
            correct[k] += (predicted == actual) as usize;
        }
    }
    Ok(correct.map(|c| c as f64 / n as f64))
}
