//! Residual CNN backbone and its five multi-task parameterizations.
//!
//! Every variant shares the stem, convolutions and (except `BatchNorm`) the
//! batch norms. Task-specific parameters are:
//!
//! * `Split`: the two row-halves of the final dense layer.
//! * `BatchNorm`: a private copy of every batch norm inside the residual blocks.
//! * `Series`: a 1x1 conv `a` after every 3x3 conv, `h + a(h)`.
//! * `Parallel`: a 1x1 conv `a` beside every 3x3 conv, `conv(x) + a(x)`.

mod adapter;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, BnStats, Bound, Checkpoint, Graph, Group, ParamId, ParamStore, Tensor, Var};

pub use adapter::{adapter_apply, Adapter};
pub use config::{BackboneConfig, Variant};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which objective a forward pass serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadId {
    Contrastive,
    Predictive,
}

impl HeadId {
    pub const BOTH: [HeadId; 2] = [HeadId::Contrastive, HeadId::Predictive];

    pub fn index(self) -> usize {
        match self {
            HeadId::Contrastive => 0,
            HeadId::Predictive => 1,
        }
    }

    pub fn group(self) -> Group {
        match self {
            HeadId::Contrastive => Group::Contrastive,
            HeadId::Predictive => Group::Predictive,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadId::Contrastive => "contrastive",
            HeadId::Predictive => "predictive",
        }
    }
}

/// Whether batch norms use batch statistics (and report them) or running
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Batch statistics to fold into one batch norm's running averages.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BnStats<T>,
}

#[derive(Clone, Copy, Debug)]
struct BnParams {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum BnSite {
    Shared(BnParams),
    PerTask([BnParams; 2]),
}

#[derive(Clone, Copy, Debug)]
struct ConvSite {
    weight: ParamId,
    stride: usize,
    pad: usize,
    /// 1x1 adapter weights, indexed by [`HeadId::index`].
    adapters: Option<[ParamId; 2]>,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvSite,
    bn1: BnSite,
    conv2: ConvSite,
    bn2: BnSite,
    shortcut: Option<(ParamId, BnParams)>,
}

#[derive(Clone, Copy, Debug)]
enum FinalLayer {
    Shared { weight: ParamId, bias: ParamId },
    Split([(ParamId, ParamId); 2]),
}

/// Backbone parameters plus the layout needed to run them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: BackboneConfig,
    store: ParamStore<T>,
    stem_conv: ParamId,
    stem_bn: BnParams,
    blocks: Vec<Block>,
    head: FinalLayer,
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

struct Builder<'r, T, R> {
    store: ParamStore<T>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    /// He-uniform for relu networks.
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> ParamId {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let w = uniform(&[c_out, c_in, k, k], bound, self.rng);
        self.store.add(name, Group::Shared, w)
    }

    fn bn(&mut self, prefix: &str, c: usize, group: Group) -> BnParams {
        BnParams {
            gamma: self.store.add(&format!("{prefix}.gamma"), group, Tensor::ones(&[c])),
            beta: self.store.add(&format!("{prefix}.beta"), group, Tensor::zeros(&[c])),
            mean: self.store.add_buffer(&format!("{prefix}.running_mean"), group, Tensor::zeros(&[c])),
            var: self.store.add_buffer(&format!("{prefix}.running_var"), group, Tensor::ones(&[c])),
        }
    }

    fn bn_site(&mut self, prefix: &str, c: usize, per_task: bool) -> BnSite {
        if per_task {
            BnSite::PerTask(HeadId::BOTH.map(|h| self.bn(&format!("{prefix}.{}", h.as_str()), c, h.group())))
        } else {
            BnSite::Shared(self.bn(prefix, c, Group::Shared))
        }
    }

    fn conv_site(&mut self, name: &str, variant: Variant, c_out: usize, c_in: usize, stride: usize) -> ConvSite {
        let weight = self.conv(&format!("{name}.weight"), c_out, c_in, 3);
        let adapter_in = match variant {
            Variant::Series => Some(c_out),
            Variant::Parallel => Some(c_in),
            _ => None,
        };
        let adapters = adapter_in.map(|c| {
            HeadId::BOTH.map(|h| {
                self.store.add(
                    &format!("{name}.adapter.{}.weight", h.as_str()),
                    h.group(),
                    Tensor::zeros(&[c_out, c, 1, 1]),
                )
            })
        });
        ConvSite {
            weight,
            stride,
            pad: 1,
            adapters,
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Shared parameters are drawn in the same order for every variant, so
    /// two variants built from the same seed share identical trunk weights.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let v = config.variant;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
        };
        let w0 = config.widths[0];
        let stem_conv = b.conv("stem.conv.weight", w0, config.in_channels, config.stem_kernel);
        let stem_bn = b.bn("stem.bn", w0, Group::Shared);

        let mut blocks = Vec::new();
        let mut c_in = w0;
        for (s, &width) in config.widths.iter().enumerate() {
            for d in 0..config.depth {
                let stride = if s > 0 && d == 0 { 2 } else { 1 };
                let p = format!("stage{}.block{d}", s + 1);
                let conv1 = b.conv_site(&format!("{p}.conv1"), v, width, c_in, stride);
                let bn1 = b.bn_site(&format!("{p}.bn1"), width, v == Variant::BatchNorm);
                let conv2 = b.conv_site(&format!("{p}.conv2"), v, width, width, 1);
                let bn2 = b.bn_site(&format!("{p}.bn2"), width, v == Variant::BatchNorm);
                let shortcut = (stride != 1 || c_in != width).then(|| {
                    let w = b.conv(&format!("{p}.shortcut.conv.weight"), width, c_in, 1);
                    (w, b.bn(&format!("{p}.shortcut.bn"), width, Group::Shared))
                });
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                });
                c_in = width;
            }
        }

        let out = config.output_dim;
        let bound = (1.0 / c_in as f64).sqrt();
        let weight: Tensor<T> = uniform(&[out, c_in], bound, b.rng);
        let bias: Tensor<T> = uniform(&[out], bound, b.rng);
        let head = if v == Variant::Split {
            let half = out / 2;
            let rows = |t: &Tensor<T>, r: std::ops::Range<usize>, cols: usize, shape: &[usize]| {
                Tensor::new(shape, t.data()[r.start * cols..r.end * cols].to_vec()).expect("row slice")
            };
            FinalLayer::Split(HeadId::BOTH.map(|h| {
                let r = h.index() * half..(h.index() + 1) * half;
                let name = h.as_str();
                let w = b.store.add(&format!("fc.{name}.weight"), h.group(), rows(&weight, r.clone(), c_in, &[half, c_in]));
                let bb = b.store.add(&format!("fc.{name}.bias"), h.group(), rows(&bias, r, 1, &[half]));
                (w, bb)
            }))
        } else {
            FinalLayer::Shared {
                weight: b.store.add("fc.weight", Group::Shared, weight),
                bias: b.store.add("fc.bias", Group::Shared, bias),
            }
        };
        Ok(Model {
            config,
            store: b.store,
            stem_conv,
            stem_bn,
            blocks,
            head,
        })
    }

    /// Rebuilds a model shaped by `config` from the `prefix/` tensors of
    /// `ckpt`; fails if any parameter or buffer is missing or mis-shaped.
    pub fn from_checkpoint(config: BackboneConfig, ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.load_store(prefix, &mut model.store)?;
        Ok(model)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Trainable scalars in `group`.
    pub fn param_count(&self, group: Group) -> usize {
        self.store.count(group)
    }

    pub fn total_params(&self) -> usize {
        self.store.total()
    }

    /// Width of one head's output.
    pub fn head_dim(&self) -> usize {
        match self.config.variant {
            Variant::Split => self.config.output_dim / 2,
            _ => self.config.output_dim,
        }
    }

    /// Width of [`Model::concat_head_features`].
    pub fn concat_dim(&self) -> usize {
        match self.config.variant {
            Variant::Simple | Variant::Split => self.config.output_dim,
            _ => 2 * self.config.output_dim,
        }
    }

    /// Smallest spatial extent the backbone accepts along each axis.
    pub fn min_input_size(&self) -> usize {
        (1..=4096).find(|&n| self.out_size(n).is_some()).unwrap_or(usize::MAX)
    }

    fn out_size(&self, n: usize) -> Option<usize> {
        let conv = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p).checked_sub(k).map(|v| v / s + 1);
        let k = self.config.stem_kernel;
        let mut n = conv(n, k, self.config.stem_stride, k / 2)?;
        if self.config.stem_pool {
            n = conv(n, 3, 2, 1)?;
        }
        for b in &self.blocks {
            n = conv(n, 3, b.conv1.stride, 1)?;
        }
        (n >= 1).then_some(n)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::arg(format!(
                "backbone input must be [batch, {}, height, width], got {shape:?}",
                self.config.in_channels
            )));
        }
        let min = self.min_input_size();
        if shape[2] < min || shape[3] < min {
            return Err(Error::arg(format!(
                "input spatial size {}x{} below the backbone minimum {min}x{min}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    fn bn(
        &self,
        g: &mut Graph<T>,
        b: &Bound<T>,
        x: Var,
        p: BnParams,
        phase: Phase,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let eps = T::lit(BN_EPS);
        let (gamma, beta) = (b.var(p.gamma), b.var(p.beta));
        match phase {
            Phase::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train { eps })?;
                updates.push(BnUpdate {
                    mean: p.mean,
                    var: p.var,
                    stats: stats.expect("train mode reports stats"),
                });
                Ok(y)
            }
            Phase::Eval => {
                let mode = BnMode::Eval {
                    mean: b.buffer(p.mean).data(),
                    var: b.buffer(p.var).data(),
                    eps,
                };
                Ok(g.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }

    fn bn_site(
        &self,
        g: &mut Graph<T>,
        b: &Bound<T>,
        x: Var,
        site: BnSite,
        task: Option<HeadId>,
        phase: Phase,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let p = match (site, task) {
            (BnSite::Shared(p), _) => p,
            (BnSite::PerTask(ps), Some(h)) => ps[h.index()],
            (BnSite::PerTask(_), None) => return Err(Error::op("backbone", "task-specific batch norm needs a head")),
        };
        self.bn(g, b, x, p, phase, updates)
    }

    fn conv_site(&self, g: &mut Graph<T>, b: &Bound<T>, x: Var, site: ConvSite, task: Option<HeadId>) -> Result<Var> {
        let y = g.conv2d(x, b.var(site.weight), site.stride, site.pad)?;
        let (Some(adapters), Some(h)) = (site.adapters, task) else {
            return Ok(y);
        };
        let alpha = b.var(adapters[h.index()]);
        match self.config.variant {
            Variant::Series => adapter_apply(g, y, Adapter::Conv1x1 { weight: alpha }),
            Variant::Parallel => {
                let side = g.conv2d(x, alpha, site.stride, 0)?;
                g.add(y, side)
            }
            _ => Ok(y),
        }
    }

    fn stem(&self, g: &mut Graph<T>, b: &Bound<T>, x: Var, phase: Phase, updates: &mut Vec<BnUpdate<T>>) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let k = self.config.stem_kernel;
        let h = g.conv2d(x, b.var(self.stem_conv), self.config.stem_stride, k / 2)?;
        let h = self.bn(g, b, h, self.stem_bn, phase, updates)?;
        let h = g.relu(h);
        if self.config.stem_pool {
            g.max_pool2d(h, 3, 2, 1)
        } else {
            Ok(h)
        }
    }

    /// Residual blocks and global average pooling.
    fn trunk(
        &self,
        g: &mut Graph<T>,
        b: &Bound<T>,
        mut x: Var,
        task: Option<HeadId>,
        phase: Phase,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        for blk in &self.blocks {
            let h = self.conv_site(g, b, x, blk.conv1, task)?;
            let h = self.bn_site(g, b, h, blk.bn1, task, phase, updates)?;
            let h = g.relu(h);
            let h = self.conv_site(g, b, h, blk.conv2, task)?;
            let h = self.bn_site(g, b, h, blk.bn2, task, phase, updates)?;
            let skip = match blk.shortcut {
                Some((w, bn)) => {
                    let s = g.conv2d(x, b.var(w), blk.conv1.stride, 0)?;
                    self.bn(g, b, s, bn, phase, updates)?
                }
                None => x,
            };
            let sum = g.add(h, skip)?;
            x = g.relu(sum);
        }
        g.global_avg_pool(x)
    }

    fn final_layer(&self, g: &mut Graph<T>, b: &Bound<T>, feat: Var, head: HeadId) -> Result<Var> {
        let (w, bias) = match self.head {
            FinalLayer::Shared { weight, bias } => (weight, bias),
            FinalLayer::Split(halves) => halves[head.index()],
        };
        g.dense(feat, b.var(w), Some(b.var(bias)))
    }

    fn task_for(&self, head: HeadId) -> Option<HeadId> {
        self.config.variant.has_adapters().then_some(head)
    }

    /// One head's features for a `[N, C, H, W]` input already in `g`.
    pub fn forward_one(
        &self,
        g: &mut Graph<T>,
        b: &Bound<T>,
        x: Var,
        head: HeadId,
        phase: Phase,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let s = self.stem(g, b, x, phase, updates)?;
        let f = self.trunk(g, b, s, self.task_for(head), phase, updates)?;
        self.final_layer(g, b, f, head)
    }

    /// Both heads, sharing every computation the variant allows: one pass for
    /// `Simple`, one trunk pass for `Split`, a shared stem otherwise.
    pub fn forward_heads(
        &self,
        g: &mut Graph<T>,
        b: &Bound<T>,
        x: Var,
        phase: Phase,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<[Var; 2]> {
        let s = self.stem(g, b, x, phase, updates)?;
        match self.config.variant {
            Variant::Simple => {
                let f = self.trunk(g, b, s, None, phase, updates)?;
                let out = self.final_layer(g, b, f, HeadId::Contrastive)?;
                Ok([out, out])
            }
            Variant::Split => {
                let f = self.trunk(g, b, s, None, phase, updates)?;
                Ok([
                    self.final_layer(g, b, f, HeadId::Contrastive)?,
                    self.final_layer(g, b, f, HeadId::Predictive)?,
                ])
            }
            _ => {
                let mut outs = [s; 2];
                for h in HeadId::BOTH {
                    let f = self.trunk(g, b, s, Some(h), phase, updates)?;
                    outs[h.index()] = self.final_layer(g, b, f, h)?;
                }
                Ok(outs)
            }
        }
    }

    /// Inference-mode features of one head, `[N, head_dim]`.
    pub fn forward_head(&self, input: &Tensor<T>, head: HeadId) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = self.forward_one(&mut g, &b, x, head, Phase::Eval, &mut Vec::new())?;
        Ok(g.value(y).clone())
    }

    /// Downstream features: one pass for `Simple`, both halves for `Split`,
    /// both full heads (contrastive first) for adapter variants.
    pub fn concat_head_features(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let x = g.constant(input.clone());
        let [c, p] = self.forward_heads(&mut g, &b, x, Phase::Eval, &mut Vec::new())?;
        let out = if self.config.variant == Variant::Simple {
            c
        } else {
            g.concat(&[c, p], 1)?
        };
        Ok(g.value(out).clone())
    }

    /// Folds batch statistics into running averages:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var_unbiased)] {
                for (r, &v) in self.store.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * v;
                }
            }
        }
    }
}
