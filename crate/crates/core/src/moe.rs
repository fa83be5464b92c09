//! Mixture-of-experts layer with top-k gating.
//!
//! A dense input layer feeds a bank of parallel dense-ReLU experts and a
//! gating network whose softmax output picks, per sample, the k experts with
//! the highest probability. Each selected expert's output is scaled by its
//! raw gating probability and summed; the weights are deliberately *not*
//! renormalized over the selected k (the combination is a plain weighted sum
//! of the top expert outputs). Set `renormalize` to divide the selected
//! probabilities by their sum instead.
//!
//! Selection is hard: experts outside the top-k contribute nothing to the
//! output and receive exactly zero gradient for that sample; the gate learns
//! only through the probability values of the selected experts.

use crate::error::{Error, Result};
use crate::layers::{Activation, DenseLayer};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{top_k_indices, Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Expert output width; `None` preserves the input width.
    pub expert_dim: Option<usize>,
    pub renormalize: bool,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            num_experts: 4,
            top_k: 2,
            expert_dim: None,
            renormalize: false,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::invalid("moe", "num_experts must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::invalid(
                "moe",
                format!(
                    "top_k must satisfy 1 <= k <= num_experts, got k={} with {} experts",
                    self.top_k, self.num_experts
                ),
            ));
        }
        if self.expert_dim == Some(0) {
            return Err(Error::invalid("moe", "expert_dim must be >= 1"));
        }
        Ok(())
    }
}

pub struct MoELayer {
    pub input_dense: DenseLayer,
    pub experts: Vec<DenseLayer>,
    pub gate: DenseLayer,
    pub config: MoEConfig,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Forward artifacts: the combined output plus the gate probabilities for
/// routing diagnostics.
pub struct MoEOutput {
    pub combined: ValueId,
    pub gate_probs: ValueId,
}

impl MoELayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        input_dim: usize,
        config: MoEConfig,
    ) -> Result<Self> {
        config.validate()?;
        let expert_dim = config.expert_dim.unwrap_or(input_dim);
        let input_dense = DenseLayer::new(
            store,
            rng,
            &format!("{name}/input_dense"),
            input_dim,
            input_dim,
            Activation::None,
        )?;
        let mut experts = Vec::with_capacity(config.num_experts);
        for e in 0..config.num_experts {
            experts.push(DenseLayer::new(
                store,
                rng,
                &format!("{name}/expert{e}"),
                input_dim,
                expert_dim,
                Activation::Relu,
            )?);
        }
        let gate = DenseLayer::new(
            store,
            rng,
            &format!("{name}/gate"),
            input_dim,
            config.num_experts,
            Activation::None,
        )?;
        Ok(MoELayer {
            input_dense,
            experts,
            gate,
            config,
            in_dim: input_dim,
            out_dim: expert_dim,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: ValueId,
    ) -> Result<MoEOutput> {
        self.forward_with_k(tape, store, x, self.config.top_k)
    }

    /// Forward with an explicit k (used by the k = num_experts equivalence
    /// checks).
    pub fn forward_with_k<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: ValueId,
        k: usize,
    ) -> Result<MoEOutput> {
        let h = self.input_dense.forward(tape, store, x)?;
        let logits = self.gate.forward(tape, store, h)?;
        let gate_probs = tape.softmax(logits)?;
        let expert_outs: Vec<ValueId> = self
            .experts
            .iter()
            .map(|e| e.forward(tape, store, h))
            .collect::<Result<_>>()?;
        let combined = tape.moe_combine(gate_probs, &expert_outs, k, self.config.renormalize)?;
        Ok(MoEOutput {
            combined,
            gate_probs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RoutingReport {
    /// Fraction of samples that selected each expert.
    pub selection_frequency: Vec<f64>,
    /// Mean gate probability per expert over all samples.
    pub mean_gate_prob: Vec<f64>,
    /// Per-sample sum of the selected gate probabilities.
    pub selected_mass: Vec<f64>,
}

/// Routing diagnostics over a batch of gate probabilities (rows sum to 1).
pub fn routing_stats<S: Scalar>(probs: &Tensor<S>, k: usize) -> Result<RoutingReport> {
    let shape = probs.shape();
    if shape.rank() != 2 {
        return Err(Error::invalid("routing_stats", format!("expected rank-2 probs, got {shape}")));
    }
    let (n, e) = (shape.dim(0), shape.dim(1));
    if k == 0 || k > e {
        return Err(Error::invalid("routing_stats", format!("k={k} out of range for {e} experts")));
    }
    let mut freq = vec![0.0f64; e];
    let mut mean_p = vec![0.0f64; e];
    let mut mass = Vec::with_capacity(n);
    for row in 0..n {
        let p = &probs.data()[row * e..(row + 1) * e];
        let sel = top_k_indices(p, k);
        let mut m = 0.0;
        for &i in &sel {
            freq[i] += 1.0;
            m += p[i].as_f64();
        }
        mass.push(m);
        for (acc, v) in mean_p.iter_mut().zip(p) {
            *acc += v.as_f64();
        }
    }
    for f in freq.iter_mut() {
        *f /= n as f64;
    }
    for m in mean_p.iter_mut() {
        *m /= n as f64;
    }
    Ok(RoutingReport {
        selection_frequency: freq,
        mean_gate_prob: mean_p,
        selected_mass: mass,
    })
}
