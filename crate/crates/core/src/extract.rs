//! The three parallel feature-extraction branches.
//!
//! Two bespoke convolutional extractors plus a randomly initialized residual
//! backbone. Every branch maps `N x H x W x 3` input to a rank-2 `N x width`
//! feature tensor:
//!
//! * branch 1: six conv stages with shrinking kernels and growing filter
//!   counts, pooled after every stage but the last, then flatten -> dense 512
//!   (ReLU) -> dropout 0.5. Width 512.
//! * branch 2: five conv stages, pooled after every stage, ending in global
//!   average pooling over the final 256 maps. Width 256.
//! * backbone: stem conv + residual blocks with stride-2 projection
//!   shortcuts at stage boundaries, ending GAP -> dropout 0.5. Width equals
//!   the final stage's channel count.
//!
//! Each conv stage applies conv (same padding, ReLU) -> dropout -> batch
//! norm -> max pool. The "paper" profile keeps the published 75/50/25/15/9/3
//! kernel ladder of branch 1 (constructible, but far too slow to train on a
//! desk); the "desk" profile substitutes a 9/7/5/3/3/3 ladder with identical
//! stage and filter structure.

use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNormLayer, Conv2DLayer, DenseLayer, DropoutLayer};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{Mode, Padding, Tape, ValueId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSpec {
    pub kernel: usize,
    pub filters: usize,
    pub dropout: f64,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadSpec {
    /// Flatten, dense of the given width with ReLU, then dropout.
    FlattenDense { width: usize, dropout: f64 },
    /// Global average pooling over the final feature maps.
    Gap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorSpec {
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

impl ExtractorSpec {
    pub fn cnnfe1_paper() -> Self {
        let kernels = [75, 50, 25, 15, 9, 3];
        Self::cnnfe1_with_kernels(&kernels)
    }

    pub fn cnnfe1_desk() -> Self {
        let kernels = [9, 7, 5, 3, 3, 3];
        Self::cnnfe1_with_kernels(&kernels)
    }

    pub fn cnnfe1_with_kernels(kernels: &[usize]) -> Self {
        let filters = [8usize, 16, 32, 64, 128, 256];
        let n = kernels.len();
        let stages = kernels
            .iter()
            .zip(filters.iter().cycle())
            .enumerate()
            .map(|(i, (&kernel, &filters))| StageSpec {
                kernel,
                filters,
                dropout: 0.1,
                pool: i + 1 < n,
            })
            .collect();
        ExtractorSpec {
            stages,
            head: HeadSpec::FlattenDense {
                width: 512,
                dropout: 0.5,
            },
        }
    }

    /// The published ladder is already desk-sized, so both profiles share it.
    pub fn cnnfe2() -> Self {
        let kernels = [15usize, 7, 5, 3, 3];
        let filters = [16usize, 32, 64, 128, 256];
        let stages = kernels
            .iter()
            .zip(&filters)
            .map(|(&kernel, &filters)| StageSpec {
                kernel,
                filters,
                dropout: 0.1,
                pool: true,
            })
            .collect();
        ExtractorSpec {
            stages,
            head: HeadSpec::Gap,
        }
    }

    /// Shrunken two-stage profile for the end-to-end gradient check.
    pub fn grad_check(head: HeadSpec) -> Self {
        let stages = vec![
            StageSpec {
                kernel: 3,
                filters: 4,
                dropout: 0.1,
                pool: true,
            },
            StageSpec {
                kernel: 3,
                filters: 6,
                dropout: 0.1,
                pool: true,
            },
        ];
        ExtractorSpec { stages, head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("extractor", "at least one stage required"));
        }
        for s in &self.stages {
            if s.kernel == 0 || s.filters == 0 {
                return Err(Error::invalid("extractor", "kernel and filter counts must be >= 1"));
            }
            if !(0.0..1.0).contains(&s.dropout) {
                return Err(Error::invalid("extractor", format!("dropout {} outside [0, 1)", s.dropout)));
            }
        }
        Ok(())
    }
}

struct ConvStage {
    conv: Conv2DLayer,
    dropout: DropoutLayer,
    bn: BatchNormLayer,
    pool: bool,
}

enum Head {
    FlattenDense {
        dense: DenseLayer,
        dropout: DropoutLayer,
    },
    Gap,
    GapDropout {
        dropout: DropoutLayer,
    },
}

/// One row of a model summary: a named layer, its output shape, and how
/// many scalars it trains.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub name: String,
    pub output_shape: Shape,
    pub params: usize,
}

pub struct ConvBranch {
    stages: Vec<ConvStage>,
    head: Head,
    out_width: usize,
    name: String,
}

pub enum Branch {
    Conv(ConvBranch),
    Residual(ResidualBranch),
}

impl Branch {
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: ValueId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ValueId> {
        match self {
            Branch::Conv(b) => b.forward(tape, store, x, mode, rng),
            Branch::Residual(b) => b.forward(tape, store, x, mode, rng),
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            Branch::Conv(b) => b.out_width,
            Branch::Residual(b) => b.out_width,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Branch::Conv(b) => &b.name,
            Branch::Residual(b) => &b.name,
        }
    }

    pub fn summary<S: Scalar>(&self, store: &ParamStore<S>, input: &Shape) -> Result<Vec<SummaryRow>> {
        match self {
            Branch::Conv(b) => b.summary(store, input),
            Branch::Residual(b) => b.summary(store, input),
        }
    }
}

fn param_count<S: Scalar>(store: &ParamStore<S>, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.get(id).value.count()).sum()
}

impl ConvBranch {
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: ValueId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ValueId> {
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.conv.forward(tape, store, cur)?;
            cur = tape.relu(cur)?;
            cur = stage.dropout.forward(tape, cur, mode, rng)?;
            cur = stage.bn.forward(tape, store, cur, mode)?;
            if stage.pool {
                cur = tape.maxpool2(cur)?;
            }
        }
        match &self.head {
            Head::FlattenDense { dense, dropout } => {
                let flat = tape.flatten(cur)?;
                let d = dense.forward(tape, store, flat)?;
                dropout.forward(tape, d, mode, rng)
            }
            Head::Gap => tape.gap(cur),
            Head::GapDropout { dropout } => {
                let g = tape.gap(cur)?;
                dropout.forward(tape, g, mode, rng)
            }
        }
    }

    fn summary<S: Scalar>(&self, store: &ParamStore<S>, input: &Shape) -> Result<Vec<SummaryRow>> {
        let mut rows = Vec::new();
        let mut shape = input.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            shape = stage.conv.out_shape(&shape)?;
            rows.push(SummaryRow {
                name: format!(
                    "{}/stage{i} conv {}x{} f{}",
                    self.name, stage.conv.kh, stage.conv.kw, stage.conv.cout
                ),
                output_shape: shape.clone(),
                params: param_count(store, &[stage.conv.kernel, stage.conv.bias]),
            });
            rows.push(SummaryRow {
                name: format!("{}/stage{i} batchnorm", self.name),
                output_shape: shape.clone(),
                params: param_count(store, &[stage.bn.gamma, stage.bn.beta]),
            });
            if stage.pool {
                shape = Shape::new(vec![
                    shape.dim(0),
                    shape.dim(1) / 2,
                    shape.dim(2) / 2,
                    shape.dim(3),
                ]);
                rows.push(SummaryRow {
                    name: format!("{}/stage{i} maxpool 2x2", self.name),
                    output_shape: shape.clone(),
                    params: 0,
                });
            }
        }
        match &self.head {
            Head::FlattenDense { dense, .. } => {
                let flat = shape.dim(1) * shape.dim(2) * shape.dim(3);
                rows.push(SummaryRow {
                    name: format!("{}/flatten", self.name),
                    output_shape: Shape::new(vec![shape.dim(0), flat]),
                    params: 0,
                });
                rows.push(SummaryRow {
                    name: format!("{}/dense {}", self.name, dense.out_dim),
                    output_shape: Shape::new(vec![shape.dim(0), dense.out_dim]),
                    params: param_count(store, &[dense.weight, dense.bias]),
                });
            }
            Head::Gap | Head::GapDropout { .. } => {
                rows.push(SummaryRow {
                    name: format!("{}/gap", self.name),
                    output_shape: Shape::new(vec![shape.dim(0), shape.dim(3)]),
                    params: 0,
                });
            }
        }
        Ok(rows)
    }
}

/// Build the flatten-dense extractor branch (feature width 512 in the
/// published configuration).
pub fn build_cnnfe1<S: Scalar>(
    spec: &ExtractorSpec,
    store: &mut ParamStore<S>,
    rng: &mut Rng,
    name: &str,
    input: &Shape,
) -> Result<Branch> {
    spec.validate()?;
    let HeadSpec::FlattenDense { width, dropout } = spec.head else {
        return Err(Error::invalid("cnnfe1", "profile must end in flatten+dense"));
    };
    let (stages, final_shape) = build_stages(spec, store, rng, name, input)?;
    let flat = final_shape.dim(1) * final_shape.dim(2) * final_shape.dim(3);
    let dense = DenseLayer::new(
        store,
        rng,
        &format!("{name}/dense"),
        flat,
        width,
        Activation::Relu,
    )?;
    Ok(Branch::Conv(ConvBranch {
        stages,
        head: Head::FlattenDense {
            dense,
            dropout: DropoutLayer::new(dropout)?,
        },
        out_width: width,
        name: name.to_string(),
    }))
}

/// Build the GAP-headed extractor branch (feature width = final filter
/// count, 256 in the published configuration).
pub fn build_cnnfe2<S: Scalar>(
    spec: &ExtractorSpec,
    store: &mut ParamStore<S>,
    rng: &mut Rng,
    name: &str,
    input: &Shape,
) -> Result<Branch> {
    spec.validate()?;
    if spec.head != HeadSpec::Gap {
        return Err(Error::invalid("cnnfe2", "profile must end in GAP"));
    }
    let (stages, final_shape) = build_stages(spec, store, rng, name, input)?;
    Ok(Branch::Conv(ConvBranch {
        stages,
        head: Head::Gap,
        out_width: final_shape.dim(3),
        name: name.to_string(),
    }))
}

fn build_stages<S: Scalar>(
    spec: &ExtractorSpec,
    store: &mut ParamStore<S>,
    rng: &mut Rng,
    name: &str,
    input: &Shape,
) -> Result<(Vec<ConvStage>, Shape)> {
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut shape = input.clone();
    for (i, s) in spec.stages.iter().enumerate() {
        let cin = shape.dim(3);
        let conv = Conv2DLayer::new(
            store,
            rng,
            &format!("{name}/stage{i}/conv"),
            s.kernel,
            s.kernel,
            cin,
            s.filters,
            Padding::Same,
            (1, 1),
        )?;
        shape = conv.out_shape(&shape)?;
        let bn = BatchNormLayer::new(store, &format!("{name}/stage{i}/bn"), s.filters)?;
        if s.pool {
            if shape.dim(1) < 2 || shape.dim(2) < 2 {
                return Err(Error::invalid(
                    "extractor",
                    format!("stage {i} output {shape} too small to pool"),
                ));
            }
            shape = Shape::new(vec![
                shape.dim(0),
                shape.dim(1) / 2,
                shape.dim(2) / 2,
                shape.dim(3),
            ]);
        }
        stages.push(ConvStage {
            conv,
            dropout: DropoutLayer::new(s.dropout)?,
            bn,
            pool: s.pool,
        });
    }
    Ok((stages, shape))
}

// ---- residual backbone ------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBackboneSpec {
    pub blocks_per_stage: Vec<usize>,
    pub base_filters: usize,
}

impl ResidualBackboneSpec {
    pub fn desk() -> Self {
        ResidualBackboneSpec {
            blocks_per_stage: vec![1, 1],
            base_filters: 16,
        }
    }

    /// Four-stage, 64-base configuration standing in for a full-depth
    /// pretrained backbone (weights here are always randomly initialized).
    pub fn paper() -> Self {
        ResidualBackboneSpec {
            blocks_per_stage: vec![2, 2, 2, 2],
            base_filters: 64,
        }
    }

    pub fn grad_check() -> Self {
        ResidualBackboneSpec {
            blocks_per_stage: vec![1],
            base_filters: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage.is_empty() || self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::invalid(
                "backbone",
                "blocks_per_stage must be non-empty positive integers",
            ));
        }
        if self.base_filters == 0 {
            return Err(Error::invalid("backbone", "base_filters must be >= 1"));
        }
        Ok(())
    }
}

struct ResBlock {
    conv1: Conv2DLayer,
    bn1: BatchNormLayer,
    conv2: Conv2DLayer,
    bn2: BatchNormLayer,
    /// 1x1 stride-matching projection when the shortcut shape differs.
    projection: Option<(Conv2DLayer, BatchNormLayer)>,
}

pub struct ResidualBranch {
    stem_conv: Conv2DLayer,
    stem_bn: BatchNormLayer,
    blocks: Vec<ResBlock>,
    dropout: DropoutLayer,
    out_width: usize,
    name: String,
}

/// Build the residual backbone branch: stem (conv stride 2, BN, ReLU,
/// max pool), then `blocks_per_stage[i]` basic blocks at `base * 2^i`
/// channels with a stride-2 projection at each stage boundary, ending in
/// GAP -> dropout 0.5.
pub fn build_backbone<S: Scalar>(
    spec: &ResidualBackboneSpec,
    store: &mut ParamStore<S>,
    rng: &mut Rng,
    name: &str,
    input: &Shape,
) -> Result<Branch> {
    spec.validate()?;
    let stem_conv = Conv2DLayer::new(
        store,
        rng,
        &format!("{name}/stem/conv"),
        3,
        3,
        input.dim(3),
        spec.base_filters,
        Padding::Same,
        (2, 2),
    )?;
    let stem_bn = BatchNormLayer::new(store, &format!("{name}/stem/bn"), spec.base_filters)?;

    let mut blocks = Vec::new();
    let mut channels = spec.base_filters;
    for (stage, &count) in spec.blocks_per_stage.iter().enumerate() {
        let stage_channels = spec.base_filters * (1 << stage);
        for b in 0..count {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let needs_projection = stride != 1 || channels != stage_channels;
            let prefix = format!("{name}/stage{stage}/block{b}");
            let conv1 = Conv2DLayer::new(
                store,
                rng,
                &format!("{prefix}/conv1"),
                3,
                3,
                channels,
                stage_channels,
                Padding::Same,
                (stride, stride),
            )?;
            let bn1 = BatchNormLayer::new(store, &format!("{prefix}/bn1"), stage_channels)?;
            let conv2 = Conv2DLayer::new(
                store,
                rng,
                &format!("{prefix}/conv2"),
                3,
                3,
                stage_channels,
                stage_channels,
                Padding::Same,
                (1, 1),
            )?;
            let bn2 = BatchNormLayer::new(store, &format!("{prefix}/bn2"), stage_channels)?;
            let projection = if needs_projection {
                let pconv = Conv2DLayer::new(
                    store,
                    rng,
                    &format!("{prefix}/proj/conv"),
                    1,
                    1,
                    channels,
                    stage_channels,
                    Padding::Same,
                    (stride, stride),
                )?;
                let pbn = BatchNormLayer::new(store, &format!("{prefix}/proj/bn"), stage_channels)?;
                Some((pconv, pbn))
            } else {
                None
            };
            blocks.push(ResBlock {
                conv1,
                bn1,
                conv2,
                bn2,
                projection,
            });
            channels = stage_channels;
        }
    }
    Ok(Branch::Residual(ResidualBranch {
        stem_conv,
        stem_bn,
        blocks,
        dropout: DropoutLayer::new(0.5)?,
        out_width: channels,
        name: name.to_string(),
    }))
}

impl ResidualBranch {
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: ValueId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ValueId> {
        let mut cur = self.stem_conv.forward(tape, store, x)?;
        cur = self.stem_bn.forward(tape, store, cur, mode)?;
        cur = tape.relu(cur)?;
        cur = tape.maxpool2(cur)?;
        for block in &self.blocks {
            let shortcut = match &block.projection {
                Some((pconv, pbn)) => {
                    let p = pconv.forward(tape, store, cur)?;
                    pbn.forward(tape, store, p, mode)?
                }
                None => cur,
            };
            let mut y = block.conv1.forward(tape, store, cur)?;
            y = block.bn1.forward(tape, store, y, mode)?;
            y = tape.relu(y)?;
            y = block.conv2.forward(tape, store, y)?;
            y = block.bn2.forward(tape, store, y, mode)?;
            let added = tape.add(y, shortcut)?;
            cur = tape.relu(added)?;
        }
        let g = tape.gap(cur)?;
        self.dropout.forward(tape, g, mode, rng)
    }

    fn summary<S: Scalar>(&self, store: &ParamStore<S>, input: &Shape) -> Result<Vec<SummaryRow>> {
        let mut rows = Vec::new();
        let mut shape = self.stem_conv.out_shape(input)?;
        rows.push(SummaryRow {
            name: format!("{}/stem conv 3x3 s2", self.name),
            output_shape: shape.clone(),
            params: param_count(
                store,
                &[
                    self.stem_conv.kernel,
                    self.stem_conv.bias,
                    self.stem_bn.gamma,
                    self.stem_bn.beta,
                ],
            ),
        });
        shape = Shape::new(vec![shape.dim(0), shape.dim(1) / 2, shape.dim(2) / 2, shape.dim(3)]);
        rows.push(SummaryRow {
            name: format!("{}/stem maxpool 2x2", self.name),
            output_shape: shape.clone(),
            params: 0,
        });
        for (i, block) in self.blocks.iter().enumerate() {
            shape = block.conv1.out_shape(&shape)?;
            let mut params = param_count(
                store,
                &[
                    block.conv1.kernel,
                    block.conv1.bias,
                    block.bn1.gamma,
                    block.bn1.beta,
                    block.conv2.kernel,
                    block.conv2.bias,
                    block.bn2.gamma,
                    block.bn2.beta,
                ],
            );
            if let Some((pconv, pbn)) = &block.projection {
                params += param_count(
                    store,
                    &[pconv.kernel, pconv.bias, pbn.gamma, pbn.beta],
                );
            }
            rows.push(SummaryRow {
                name: format!("{}/block{i} residual f{}", self.name, block.conv1.cout),
                output_shape: shape.clone(),
                params,
            });
        }
        rows.push(SummaryRow {
            name: format!("{}/gap", self.name),
            output_shape: Shape::new(vec![shape.dim(0), shape.dim(3)]),
            params: 0,
        });
        Ok(rows)
    }

    /// Zero every weight on the residual path (convs and BN gammas), leaving
    /// projections intact. Test hook for the shortcut-identity property.
    pub fn zero_residual_path<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for block in &self.blocks {
            for pid in [block.conv1.kernel, block.conv1.bias, block.conv2.kernel, block.conv2.bias] {
                let p = store.get_mut(pid);
                for v in p.value.data_mut() {
                    *v = S::zero();
                }
            }
            for pid in [block.bn1.gamma, block.bn2.gamma] {
                let p = store.get_mut(pid);
                for v in p.value.data_mut() {
                    *v = S::zero();
                }
            }
        }
    }

    pub fn has_projections(&self) -> bool {
        self.blocks.iter().any(|b| b.projection.is_some())
    }
}
