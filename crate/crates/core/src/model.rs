//! Full model assembly: three branches, fusion, dual MoE routing, softmax
//! head, and the training loss.
//!
//! Data flow per forward pass:
//!
//! ```text
//! x ─┬─ cnnfe1 ──────────────────────────── f1 ── moe_a ─┐
//!    ├─ cnnfe2 ─┐                                        ├─ concat ── head (softmax)
//!    └─ backbone┴─ concat ── dense 512 ── dropout ── moe_b┘
//! ```
//!
//! The model struct holds layer wiring and parameter ids only; values live
//! in a [`ParamStore`], so one built model can run in `f32` or `f64` stores
//! of identical structure.

use crate::error::{Error, Result};
use crate::extract::{
    build_backbone, build_cnnfe1, build_cnnfe2, Branch, ExtractorSpec, HeadSpec,
    ResidualBackboneSpec, SummaryRow,
};
use crate::layers::{Activation, DenseLayer, DropoutLayer};
use crate::moe::{MoEConfig, MoELayer};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{Mode, Tape, ValueId};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Profile {
    /// Published kernel ladder; constructible for shape verification but far
    /// too slow to train on one machine.
    Paper,
    /// Identical structure with a 9/7/5/3/3/3 kernel ladder in branch 1.
    Desk,
    /// Shrunken 16x16-input configuration for end-to-end gradient checking.
    GradCheck,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            "grad-check" => Ok(Profile::GradCheck),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected paper, desk, or grad-check)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
            Profile::GradCheck => "grad-check",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub profile: Profile,
    pub num_classes: usize,
    pub fusion_width: usize,
    pub label_smoothing: f64,
    /// Applied to both MoE sites.
    pub moe: MoEConfig,
    /// Kernel-ladder override for branch 1 (length sets the stage count).
    pub cnnfe1_kernels: Option<Vec<usize>>,
    pub backbone: Option<ResidualBackboneSpec>,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            profile: Profile::Desk,
            num_classes,
            fusion_width: 512,
            label_smoothing: 0.1,
            moe: MoEConfig::default(),
            cnnfe1_kernels: None,
            backbone: None,
        }
    }

    pub fn paper(num_classes: usize) -> Self {
        ModelConfig {
            profile: Profile::Paper,
            ..Self::desk(num_classes)
        }
    }

    pub fn grad_check() -> Self {
        ModelConfig {
            profile: Profile::GradCheck,
            num_classes: 3,
            fusion_width: 8,
            label_smoothing: 0.1,
            moe: MoEConfig {
                num_experts: 3,
                top_k: 2,
                expert_dim: None,
                renormalize: false,
            },
            cnnfe1_kernels: None,
            backbone: None,
        }
    }

    pub fn input_hw(&self) -> usize {
        match self.profile {
            Profile::Paper | Profile::Desk => 224,
            Profile::GradCheck => 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.fusion_width == 0 {
            return Err(Error::Config("fusion_width must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 0.5)",
                self.label_smoothing
            )));
        }
        self.moe.validate()?;
        if let Some(b) = &self.backbone {
            b.validate()?;
        }
        Ok(())
    }

    fn cnnfe1_spec(&self) -> ExtractorSpec {
        if let Some(kernels) = &self.cnnfe1_kernels {
            return ExtractorSpec::cnnfe1_with_kernels(kernels);
        }
        match self.profile {
            Profile::Paper => ExtractorSpec::cnnfe1_paper(),
            Profile::Desk => ExtractorSpec::cnnfe1_desk(),
            Profile::GradCheck => ExtractorSpec::grad_check(HeadSpec::FlattenDense {
                width: 8,
                dropout: 0.5,
            }),
        }
    }

    fn cnnfe2_spec(&self) -> ExtractorSpec {
        match self.profile {
            Profile::Paper | Profile::Desk => ExtractorSpec::cnnfe2(),
            Profile::GradCheck => ExtractorSpec::grad_check(HeadSpec::Gap),
        }
    }

    fn backbone_spec(&self) -> ResidualBackboneSpec {
        if let Some(b) = &self.backbone {
            return b.clone();
        }
        match self.profile {
            Profile::Paper => ResidualBackboneSpec::paper(),
            Profile::Desk => ResidualBackboneSpec::desk(),
            Profile::GradCheck => ResidualBackboneSpec::grad_check(),
        }
    }
}

pub struct ExpressNet {
    pub config: ModelConfig,
    pub cnnfe1: Branch,
    pub cnnfe2: Branch,
    pub backbone: Branch,
    pub fusion: DenseLayer,
    pub fusion_dropout: DropoutLayer,
    pub moe_a: MoELayer,
    pub moe_b: MoELayer,
    pub head: DenseLayer,
}

pub struct ModelOutput {
    /// `[N, num_classes]` class probabilities (rows sum to 1).
    pub probs: ValueId,
    pub moe_a_gate: ValueId,
    pub moe_b_gate: ValueId,
}

impl ExpressNet {
    pub fn build<S: Scalar>(
        config: ModelConfig,
        store: &mut ParamStore<S>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let hw = config.input_hw();
        let input = Shape::new(vec![1, hw, hw, 3]);
        let cnnfe1 = build_cnnfe1(&config.cnnfe1_spec(), store, rng, "cnnfe1", &input)?;
        let cnnfe2 = build_cnnfe2(&config.cnnfe2_spec(), store, rng, "cnnfe2", &input)?;
        let backbone = build_backbone(&config.backbone_spec(), store, rng, "backbone", &input)?;
        let fusion_in = cnnfe2.out_width() + backbone.out_width();
        let fusion = DenseLayer::new(
            store,
            rng,
            "fusion/dense",
            fusion_in,
            config.fusion_width,
            Activation::Relu,
        )?;
        let fusion_dropout = DropoutLayer::new(0.5)?;
        let moe_a = MoELayer::new(store, rng, "moe_a", cnnfe1.out_width(), config.moe)?;
        let moe_b = MoELayer::new(store, rng, "moe_b", config.fusion_width, config.moe)?;
        let head_in = moe_a.out_dim + moe_b.out_dim;
        let head = DenseLayer::new(
            store,
            rng,
            "head/dense",
            head_in,
            config.num_classes,
            Activation::Softmax,
        )?;
        Ok(ExpressNet {
            config,
            cnnfe1,
            cnnfe2,
            backbone,
            fusion,
            fusion_dropout,
            moe_a,
            moe_b,
            head,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: ValueId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ModelOutput> {
        let hw = self.config.input_hw();
        let s = tape.shape(x);
        if s.rank() != 4 || s.dim(1) != hw || s.dim(2) != hw || s.dim(3) != 3 {
            return Err(Error::shape_mismatch(
                "model_forward",
                s,
                format!("Nx{hw}x{hw}x3"),
            ));
        }
        let f1 = self.cnnfe1.forward(tape, store, x, mode, rng)?;
        let f2 = self.cnnfe2.forward(tape, store, x, mode, rng)?;
        let f3 = self.backbone.forward(tape, store, x, mode, rng)?;
        let cat = tape.concat_cols(f2, f3)?;
        let fused = self.fusion.forward(tape, store, cat)?;
        let fused = self.fusion_dropout.forward(tape, fused, mode, rng)?;
        let a = self.moe_a.forward(tape, store, f1)?;
        let b = self.moe_b.forward(tape, store, fused)?;
        let feats = tape.concat_cols(a.combined, b.combined)?;
        let probs = self.head.forward(tape, store, feats)?;
        Ok(ModelOutput {
            probs,
            moe_a_gate: a.gate_probs,
            moe_b_gate: b.gate_probs,
        })
    }

    pub fn count_parameters<S: Scalar>(&self, store: &ParamStore<S>) -> ParamCounts {
        let components = ["cnnfe1", "cnnfe2", "backbone", "fusion", "moe_a", "moe_b", "head"];
        let per_component: Vec<ComponentCount> = components
            .iter()
            .map(|&name| {
                let (trainable, frozen) = store.counts_with_prefix(&format!("{name}/"));
                ComponentCount {
                    name: name.to_string(),
                    trainable,
                    frozen,
                }
            })
            .collect();
        let (total_trainable, total_frozen) = store.counts();
        ParamCounts {
            per_component,
            total_trainable,
            total_frozen,
        }
    }

    /// Layer-by-layer table: branch rows, then fusion, MoE sites, and head.
    pub fn summary<S: Scalar>(&self, store: &ParamStore<S>) -> Result<Vec<SummaryRow>> {
        let hw = self.config.input_hw();
        let input = Shape::new(vec![1, hw, hw, 3]);
        let mut rows = Vec::new();
        rows.extend(self.cnnfe1.summary(store, &input)?);
        rows.extend(self.cnnfe2.summary(store, &input)?);
        rows.extend(self.backbone.summary(store, &input)?);
        let fusion_in = self.cnnfe2.out_width() + self.backbone.out_width();
        rows.push(SummaryRow {
            name: format!("fusion/concat ({}+{})", self.cnnfe2.out_width(), self.backbone.out_width()),
            output_shape: Shape::new(vec![1, fusion_in]),
            params: 0,
        });
        let (fusion_params, _) = store.counts_with_prefix("fusion/");
        rows.push(SummaryRow {
            name: format!("fusion/dense {}", self.fusion.out_dim),
            output_shape: Shape::new(vec![1, self.fusion.out_dim]),
            params: fusion_params,
        });
        for (name, moe) in [("moe_a", &self.moe_a), ("moe_b", &self.moe_b)] {
            let (params, _) = store.counts_with_prefix(&format!("{name}/"));
            rows.push(SummaryRow {
                name: format!(
                    "{name} ({} experts, top-{})",
                    moe.config.num_experts, moe.config.top_k
                ),
                output_shape: Shape::new(vec![1, moe.out_dim]),
                params,
            });
        }
        let (head_params, _) = store.counts_with_prefix("head/");
        rows.push(SummaryRow {
            name: format!("head/dense {} softmax", self.head.out_dim),
            output_shape: Shape::new(vec![1, self.head.out_dim]),
            params: head_params,
        });
        Ok(rows)
    }
}

#[derive(Clone, Debug)]
pub struct ComponentCount {
    pub name: String,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Clone, Debug)]
pub struct ParamCounts {
    pub per_component: Vec<ComponentCount>,
    pub total_trainable: usize,
    pub total_frozen: usize,
}

/// Label-smoothed categorical cross-entropy on predicted probabilities.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: ValueId,
    target: ValueId,
    smoothing: f64,
) -> Result<ValueId> {
    tape.cce_loss(pred, target, smoothing)
}
