//! Residual network assembly: stem, staged blocks, pooled linear head.
//!
//! `forward` consults a [`DepthMask`]; `forward_unmasked` is the plain main
//! network with no mask logic at all, kept as a separate code path so the
//! weight-sharing identity (full mask == unmasked, bitwise) is a real
//! cross-check rather than a tautology.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ops::{
    relu_backward, relu_forward, BatchNorm2d, BnCache, Conv2d, ConvCache, GapCache, GlobalAvgPool,
    LinCache, Linear, ReluCache, StatUpdate,
};
use super::params::ParameterSet;
use super::{BlockKind, DepthMask, Mode, NetworkSpec};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone)]
enum Block {
    Basic {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        down: Option<(Conv2d, BatchNorm2d)>,
    },
    Bottleneck {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        conv3: Conv2d,
        bn3: BatchNorm2d,
        down: Option<(Conv2d, BatchNorm2d)>,
    },
}

enum BlockTape<F> {
    Basic {
        c1: ConvCache<F>,
        b1: BnCache<F>,
        r1: ReluCache,
        c2: ConvCache<F>,
        b2: BnCache<F>,
        rout: ReluCache,
        down: Option<(ConvCache<F>, BnCache<F>)>,
    },
    Bottleneck {
        c1: ConvCache<F>,
        b1: BnCache<F>,
        r1: ReluCache,
        c2: ConvCache<F>,
        b2: BnCache<F>,
        r2: ReluCache,
        c3: ConvCache<F>,
        b3: BnCache<F>,
        rout: ReluCache,
        down: Option<(ConvCache<F>, BnCache<F>)>,
    },
}

/// Caches for everything up to (and including) the last feature map.
pub struct FeatTape<F> {
    stem_conv: ConvCache<F>,
    stem_bn: BnCache<F>,
    stem_relu: ReluCache,
    stages: Vec<Vec<Option<BlockTape<F>>>>,
    stat_updates: Vec<StatUpdate<F>>,
}

/// Full forward record handed to [`Network::backward`].
pub struct Tape<F> {
    feat: FeatTape<F>,
    gap: GapCache,
    fc: LinCache<F>,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Block>>,
    fc: Linear,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let stem_out = spec.stage_widths[0];
        let stem_conv = Conv2d::new("stem.conv", spec.input_channels, stem_out, spec.stem.kernel, spec.stem.stride);
        let stem_bn = BatchNorm2d::new("stem.bn", stem_out);

        let mut stages = Vec::with_capacity(spec.num_stages());
        let mut in_ch = stem_out;
        for (si, (&nblocks, &width)) in spec.stage_blocks.iter().zip(&spec.stage_widths).enumerate() {
            let mut blocks = Vec::with_capacity(nblocks);
            for bi in 0..nblocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{si}.block{bi}");
                let out_ch = width * spec.block_kind.expansion();
                let needs_down = stride != 1 || in_ch != out_ch;
                let down = needs_down.then(|| {
                    (
                        Conv2d::new(format!("{name}.down.conv"), in_ch, out_ch, 1, stride),
                        BatchNorm2d::new(format!("{name}.down.bn"), out_ch),
                    )
                });
                let block = match spec.block_kind {
                    BlockKind::Basic => Block::Basic {
                        conv1: Conv2d::new(format!("{name}.conv1"), in_ch, width, 3, stride),
                        bn1: BatchNorm2d::new(format!("{name}.bn1"), width),
                        conv2: Conv2d::new(format!("{name}.conv2"), width, width, 3, 1),
                        bn2: BatchNorm2d::new(format!("{name}.bn2"), width),
                        down,
                    },
                    BlockKind::Bottleneck => Block::Bottleneck {
                        conv1: Conv2d::new(format!("{name}.conv1"), in_ch, width, 1, 1),
                        bn1: BatchNorm2d::new(format!("{name}.bn1"), width),
                        conv2: Conv2d::new(format!("{name}.conv2"), width, width, 3, stride),
                        bn2: BatchNorm2d::new(format!("{name}.bn2"), width),
                        conv3: Conv2d::new(format!("{name}.conv3"), width, out_ch, 1, 1),
                        bn3: BatchNorm2d::new(format!("{name}.bn3"), out_ch),
                        down,
                    },
                };
                blocks.push(block);
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let fc = Linear::new("fc", in_ch, spec.num_classes);
        Ok(Network { spec, stem_conv, stem_bn, stages, fc })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Channel count of the final feature map.
    pub fn feature_channels(&self) -> usize {
        self.fc.in_dim
    }

    /// Deterministic initialization: fan-in-scaled Gaussians for conv/linear
    /// weights, zeros for biases, unit scale and zeroed running mean / unit
    /// running variance for normalization.
    pub fn init_params<F: Elem>(&self, seed: u64) -> ParameterSet<F> {
        let mut rng: ChaCha8Rng = stream(seed, Stream::Init, 0, 0);
        let mut ps = ParameterSet::new();
        let mut gauss = |shape: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let vals: Vec<F> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::from_f64(z * std)
                })
                .collect();
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), vals).unwrap()
        };
        self.stem_conv.register(&mut ps, &mut gauss);
        self.stem_bn.register(&mut ps);
        for blocks in &self.stages {
            for block in blocks {
                match block {
                    Block::Basic { conv1, bn1, conv2, bn2, down } => {
                        conv1.register(&mut ps, &mut gauss);
                        bn1.register(&mut ps);
                        conv2.register(&mut ps, &mut gauss);
                        bn2.register(&mut ps);
                        if let Some((dc, db)) = down {
                            dc.register(&mut ps, &mut gauss);
                            db.register(&mut ps);
                        }
                    }
                    Block::Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, down } => {
                        conv1.register(&mut ps, &mut gauss);
                        bn1.register(&mut ps);
                        conv2.register(&mut ps, &mut gauss);
                        bn2.register(&mut ps);
                        conv3.register(&mut ps, &mut gauss);
                        bn3.register(&mut ps);
                        if let Some((dc, db)) = down {
                            dc.register(&mut ps, &mut gauss);
                            db.register(&mut ps);
                        }
                    }
                }
            }
        }
        let mut lin_gauss = |shape: &[usize], fan_in: usize| {
            let std = (1.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let vals: Vec<F> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::from_f64(z * std)
                })
                .collect();
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), vals).unwrap()
        };
        self.fc.register(&mut ps, &mut lin_gauss);
        ps
    }

    fn check_input<F: Elem>(&self, x: &Array4<F>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        if c != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, spec wants {}",
                self.spec.input_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Input("empty spatial dimensions".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite values in input batch".into()));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DepthMask) -> Result<()> {
        if mask.kept().len() != self.spec.stage_blocks.len() {
            return Err(Error::Mask(format!(
                "mask has {} stages, spec has {}",
                mask.kept().len(),
                self.spec.stage_blocks.len()
            )));
        }
        for (i, (&k, &n)) in mask.kept().iter().zip(&self.spec.stage_blocks).enumerate() {
            if k == 0 || k > n {
                return Err(Error::Mask(format!("kept[{i}] = {k} outside [1, {n}]")));
            }
        }
        Ok(())
    }

    fn block_forward<F: Elem>(
        &self,
        block: &Block,
        ps: &ParameterSet<F>,
        x: Array4<F>,
        mode: Mode,
        stats: &mut Vec<StatUpdate<F>>,
    ) -> Result<(Array4<F>, BlockTape<F>)> {
        match block {
            Block::Basic { conv1, bn1, conv2, bn2, down } => {
                let (shortcut, down_tape) = match down {
                    Some((dc, dbn)) => {
                        let (s, dcc) = dc.forward(ps, x.clone())?;
                        let (s, dbc) = dbn.forward(ps, s, mode, stats);
                        (s, Some((dcc, dbc)))
                    }
                    None => (x.clone(), None),
                };
                let (h, c1) = conv1.forward(ps, x)?;
                let (h, b1) = bn1.forward(ps, h, mode, stats);
                let (h, r1) = relu_forward(h);
                let (h, c2) = conv2.forward(ps, h)?;
                let (mut h, b2) = bn2.forward(ps, h, mode, stats);
                h += &shortcut;
                let (y, rout) = relu_forward(h);
                Ok((y, BlockTape::Basic { c1, b1, r1, c2, b2, rout, down: down_tape }))
            }
            Block::Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, down } => {
                let (shortcut, down_tape) = match down {
                    Some((dc, dbn)) => {
                        let (s, dcc) = dc.forward(ps, x.clone())?;
                        let (s, dbc) = dbn.forward(ps, s, mode, stats);
                        (s, Some((dcc, dbc)))
                    }
                    None => (x.clone(), None),
                };
                let (h, c1) = conv1.forward(ps, x)?;
                let (h, b1) = bn1.forward(ps, h, mode, stats);
                let (h, r1) = relu_forward(h);
                let (h, c2) = conv2.forward(ps, h)?;
                let (h, b2) = bn2.forward(ps, h, mode, stats);
                let (h, r2) = relu_forward(h);
                let (h, c3) = conv3.forward(ps, h)?;
                let (mut h, b3) = bn3.forward(ps, h, mode, stats);
                h += &shortcut;
                let (y, rout) = relu_forward(h);
                Ok((y, BlockTape::Bottleneck { c1, b1, r1, c2, b2, r2, c3, b3, rout, down: down_tape }))
            }
        }
    }

    fn block_backward<F: Elem>(
        &self,
        block: &Block,
        ps: &mut ParameterSet<F>,
        tape: BlockTape<F>,
        dy: Array4<F>,
    ) -> Array4<F> {
        match (block, tape) {
            (Block::Basic { conv1, bn1, conv2, bn2, down }, BlockTape::Basic { c1, b1, r1, c2, b2, rout, down: dt }) => {
                let dsum = relu_backward(&rout, dy);
                let d_short = match (down, dt) {
                    (Some((dc, dbn)), Some((dcc, dbc))) => {
                        let d = dbn.backward(ps, dbc, &dsum);
                        dc.backward(ps, dcc, &d)
                    }
                    _ => dsum.clone(),
                };
                let d = bn2.backward(ps, b2, &dsum);
                let d = conv2.backward(ps, c2, &d);
                let d = relu_backward(&r1, d);
                let d = bn1.backward(ps, b1, &d);
                let mut dx = conv1.backward(ps, c1, &d);
                dx += &d_short;
                dx
            }
            (
                Block::Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, down },
                BlockTape::Bottleneck { c1, b1, r1, c2, b2, r2, c3, b3, rout, down: dt },
            ) => {
                let dsum = relu_backward(&rout, dy);
                let d_short = match (down, dt) {
                    (Some((dc, dbn)), Some((dcc, dbc))) => {
                        let d = dbn.backward(ps, dbc, &dsum);
                        dc.backward(ps, dcc, &d)
                    }
                    _ => dsum.clone(),
                };
                let d = bn3.backward(ps, b3, &dsum);
                let d = conv3.backward(ps, c3, &d);
                let d = relu_backward(&r2, d);
                let d = bn2.backward(ps, b2, &d);
                let d = conv2.backward(ps, c2, &d);
                let d = relu_backward(&r1, d);
                let d = bn1.backward(ps, b1, &d);
                let mut dx = conv1.backward(ps, c1, &d);
                dx += &d_short;
                dx
            }
            _ => unreachable!("tape kind matches block kind"),
        }
    }

    /// Forward to the last pre-pooling feature map (NHWC) under a depth mask.
    pub fn forward_features<F: Elem>(
        &self,
        ps: &ParameterSet<F>,
        mask: &DepthMask,
        x_nchw: &Array4<F>,
        mode: Mode,
    ) -> Result<(Array4<F>, FeatTape<F>)> {
        self.check_mask(mask)?;
        self.check_input(x_nchw)?;
        let x = nchw_to_nhwc(x_nchw);
        let mut stats = Vec::new();
        let (h, stem_conv) = self.stem_conv.forward(ps, x)?;
        let (h, stem_bn) = self.stem_bn.forward(ps, h, mode, &mut stats);
        let (mut h, stem_relu) = relu_forward(h);
        let mut stages = Vec::with_capacity(self.stages.len());
        for (si, blocks) in self.stages.iter().enumerate() {
            let kept = mask.kept()[si];
            let mut tapes = Vec::with_capacity(blocks.len());
            for (bi, block) in blocks.iter().enumerate() {
                if bi < kept {
                    let (nh, tape) = self.block_forward(block, ps, h, mode, &mut stats)?;
                    h = nh;
                    tapes.push(Some(tape));
                } else {
                    // Skipped block: identity shortcut only. Blocks past the
                    // first never change shape, so identity is exact.
                    tapes.push(None);
                }
            }
            stages.push(tapes);
        }
        Ok((h, FeatTape { stem_conv, stem_bn, stem_relu, stages, stat_updates: stats }))
    }

    /// Depth-masked forward pass. Never writes running statistics; call
    /// [`Network::commit_running_stats`] afterwards for main-network steps.
    pub fn forward<F: Elem>(
        &self,
        ps: &ParameterSet<F>,
        mask: &DepthMask,
        x_nchw: &Array4<F>,
        mode: Mode,
    ) -> Result<(Array2<F>, Tape<F>)> {
        let (feat, ft) = self.forward_features(ps, mask, x_nchw, mode)?;
        let (pooled, gap) = GlobalAvgPool.forward(&feat);
        let (logits, fc) = self.fc.forward(ps, pooled);
        Ok((logits, Tape { feat: ft, gap, fc }))
    }

    /// Plain main-network forward with no mask logic on the path.
    pub fn forward_unmasked<F: Elem>(
        &self,
        ps: &ParameterSet<F>,
        x_nchw: &Array4<F>,
        mode: Mode,
    ) -> Result<(Array2<F>, Tape<F>)> {
        self.check_input(x_nchw)?;
        let x = nchw_to_nhwc(x_nchw);
        let mut stats = Vec::new();
        let (h, stem_conv) = self.stem_conv.forward(ps, x)?;
        let (h, stem_bn) = self.stem_bn.forward(ps, h, mode, &mut stats);
        let (mut h, stem_relu) = relu_forward(h);
        let mut stages = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            let mut tapes = Vec::with_capacity(blocks.len());
            for block in blocks {
                let (nh, tape) = self.block_forward(block, ps, h, mode, &mut stats)?;
                h = nh;
                tapes.push(Some(tape));
            }
            stages.push(tapes);
        }
        let feat = FeatTape { stem_conv, stem_bn, stem_relu, stages, stat_updates: stats };
        let (pooled, gap) = GlobalAvgPool.forward(&h);
        let (logits, fc) = self.fc.forward(ps, pooled);
        Ok((logits, Tape { feat, gap, fc }))
    }

    /// Apply the deferred running-statistics updates of a train-mode forward.
    /// Call this for main-network forwards only; subnetwork forwards use
    /// batch statistics but must never write shared running state.
    pub fn commit_running_stats<F: Elem>(&self, ps: &mut ParameterSet<F>, tape: &Tape<F>) {
        for u in &tape.feat.stat_updates {
            ps.get_mut(&u.mean_name).assign(&u.new_mean);
            ps.get_mut(&u.var_name).assign(&u.new_var);
        }
    }

    /// Backward from logits gradient; fills parameter gradient slots and
    /// returns the input gradient in NCHW. Parameters touched only by skipped
    /// blocks receive no contribution.
    pub fn backward<F: Elem>(&self, ps: &mut ParameterSet<F>, tape: Tape<F>, dlogits: &Array2<F>) -> Result<Array4<F>> {
        let Tape { feat, gap, fc } = tape;
        if dlogits.dim().1 != self.spec.num_classes {
            return Err(Error::Shape(format!(
                "dlogits has {} classes, spec has {}",
                dlogits.dim().1,
                self.spec.num_classes
            )));
        }
        let d = self.fc.backward(ps, fc, dlogits);
        let d = GlobalAvgPool.backward(&gap, &d);
        self.backward_features(ps, feat, d)
    }

    /// Backward from a gradient on the final feature map (NHWC).
    pub fn backward_features<F: Elem>(
        &self,
        ps: &mut ParameterSet<F>,
        tape: FeatTape<F>,
        dfeat: Array4<F>,
    ) -> Result<Array4<F>> {
        let FeatTape { stem_conv, stem_bn, stem_relu, stages, .. } = tape;
        let mut d = dfeat;
        for (blocks, tapes) in self.stages.iter().zip(stages).rev() {
            for (block, tape) in blocks.iter().zip(tapes).rev() {
                if let Some(t) = tape {
                    d = self.block_backward(block, ps, t, d);
                }
                // Skipped block: identity, gradient passes through unchanged.
            }
        }
        let d = relu_backward(&stem_relu, d);
        let d = self.stem_bn.backward(ps, stem_bn, &d);
        let dx = self.stem_conv.backward(ps, stem_conv, &d);
        Ok(nhwc_to_nchw(&dx))
    }
}

/// Validate a spec and create its deterministic parameter storage.
pub fn build_network<F: Elem>(spec: &NetworkSpec, seed: u64) -> Result<(Network, ParameterSet<F>)> {
    let net = Network::new(spec.clone())?;
    let ps = net.init_params(seed);
    Ok((net, ps))
}

pub(crate) fn nchw_to_nhwc<F: Elem>(x: &Array4<F>) -> Array4<F> {
    x.view().permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned()
}

pub(crate) fn nhwc_to_nchw<F: Elem>(x: &Array4<F>) -> Array4<F> {
    x.view().permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
}
