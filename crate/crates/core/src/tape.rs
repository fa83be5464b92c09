//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order; [`Tape::backward`] replays the records in reverse, accumulating
//! gradients additively into each node's grad buffer (and, for nodes bound
//! to a parameter, into the parameter store). Each backward call computes a
//! fresh set of adjoints and *adds* them, so replaying the same tape twice
//! without zeroing exactly doubles every gradient; callers zero between
//! optimizer steps.
//!
//! Training code builds a new tape per step (define-by-run); the tape owns
//! the activations of that step and drops them with it.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ValueId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Infer,
}

enum Op<S: Scalar> {
    Leaf,
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    AddRowVec {
        m: ValueId,
        v: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Softmax {
        x: ValueId,
    },
    Sum {
        x: ValueId,
    },
    Reshape {
        x: ValueId,
    },
    ConcatCols {
        a: ValueId,
        b: ValueId,
    },
    Conv2d {
        x: ValueId,
        kernel: ValueId,
        bias: ValueId,
        dims: ConvDims,
    },
    MaxPool2 {
        x: ValueId,
        argmax: Vec<usize>,
    },
    Gap {
        x: ValueId,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Dropout {
        x: ValueId,
        mask: Vec<S>,
    },
    MoeCombine {
        probs: ValueId,
        experts: Vec<ValueId>,
        selected: Vec<Vec<usize>>,
        renormalize: bool,
    },
    CceLoss {
        pred: ValueId,
        target: ValueId,
        smoothing: S,
    },
}

struct Node<S: Scalar> {
    shape: Shape,
    data: Vec<S>,
    /// Accumulated gradient; empty until the first backward pass reaches it.
    grad: Vec<S>,
    op: Op<S>,
    param: Option<ParamId>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    checked: bool,
    fault_conv_bwd: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
            fault_conv_bwd: false,
        }
    }

    /// When set, every op output is scanned and non-finite values surface
    /// as errors instead of propagating.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    /// Test hook: corrupt the convolution input-gradient rule so the
    /// gradient checker has a guaranteed failure to detect.
    pub fn inject_conv_backward_fault(&mut self) {
        self.fault_conv_bwd = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn data(&self, id: ValueId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: ValueId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node data always matches its shape")
    }

    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        let g = &self.nodes[id.0].grad;
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    pub fn grad_tensor(&self, id: ValueId) -> Option<Tensor<S>> {
        self.grad(id)
            .map(|g| Tensor::new(self.shape(id).clone(), g.to_vec()).unwrap())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.clear();
        }
    }

    fn push(&mut self, shape: Shape, data: Vec<S>, op: Op<S>, opname: &'static str) -> Result<ValueId> {
        debug_assert_eq!(shape.count(), data.len());
        if self.checked && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            op,
            param: None,
        });
        Ok(ValueId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> ValueId {
        let shape = t.shape().clone();
        let data = t.into_data();
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            op: Op::Leaf,
            param: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter: the current value is copied onto
    /// the tape and backward adds this step's gradient into the store.
    pub fn param(&mut self, store: &ParamStore<S>, pid: ParamId) -> ValueId {
        let p = store.get(pid);
        self.nodes.push(Node {
            shape: p.value.shape().clone(),
            data: p.value.data().to_vec(),
            grad: Vec::new(),
            op: Op::Leaf,
            param: Some(pid),
        });
        ValueId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: ValueId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::invalid(op, "tensor not on tape"));
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a, "add")?;
        self.check_id(b, "add")?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (shape, data) = if sa == sb {
            (
                sa.clone(),
                da.iter().zip(db).map(|(x, y)| *x + *y).collect(),
            )
        } else if sa.is_scalar_like() {
            let s = da[0];
            (sb.clone(), db.iter().map(|y| s + *y).collect())
        } else if sb.is_scalar_like() {
            let s = db[0];
            (sa.clone(), da.iter().map(|x| *x + s).collect())
        } else {
            return Err(Error::shape_mismatch("add", sa, sb));
        };
        self.push(shape, data, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a, "mul")?;
        self.check_id(b, "mul")?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (shape, data) = if sa == sb {
            (
                sa.clone(),
                da.iter().zip(db).map(|(x, y)| *x * *y).collect(),
            )
        } else if sa.is_scalar_like() {
            let s = da[0];
            (sb.clone(), db.iter().map(|y| s * *y).collect())
        } else if sb.is_scalar_like() {
            let s = db[0];
            (sa.clone(), da.iter().map(|x| *x * s).collect())
        } else {
            return Err(Error::shape_mismatch("mul", sa, sb));
        };
        self.push(shape, data, Op::Mul { a, b }, "mul")
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a, "matmul")?;
        self.check_id(b, "matmul")?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.rank() != 2 || sb.rank() != 2 || sa.dim(1) != sb.dim(0) {
            return Err(Error::shape_mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa.dim(0), sa.dim(1), sb.dim(1));
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(m, k, n, &self.nodes[a.0].data, &self.nodes[b.0].data, &mut out);
        self.push(Shape::new(vec![m, n]), out, Op::MatMul { a, b }, "matmul")
    }

    /// `[N, W] + [W]` broadcast over rows (bias addition).
    pub fn add_row_vec(&mut self, m: ValueId, v: ValueId) -> Result<ValueId> {
        self.check_id(m, "add_row_vec")?;
        self.check_id(v, "add_row_vec")?;
        let (sm, sv) = (&self.nodes[m.0].shape, &self.nodes[v.0].shape);
        if sm.rank() != 2 || sv.rank() != 1 || sm.dim(1) != sv.dim(0) {
            return Err(Error::shape_mismatch("add_row_vec", sm, sv));
        }
        let w = sv.dim(0);
        let vd = &self.nodes[v.0].data;
        let data: Vec<S> = self.nodes[m.0]
            .data
            .chunks_exact(w)
            .flat_map(|row| row.iter().zip(vd).map(|(x, y)| *x + *y))
            .collect();
        self.push(sm.clone(), data, Op::AddRowVec { m, v }, "add_row_vec")
    }

    // ---- activations -----------------------------------------------------

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x, "relu")?;
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        self.push(self.nodes[x.0].shape.clone(), data, Op::Relu { x }, "relu")
    }

    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x, "softmax")?;
        let s = &self.nodes[x.0].shape;
        if s.rank() != 2 {
            return Err(Error::invalid("softmax", format!("expected rank-2 input, got {s}")));
        }
        let (rows, k) = (s.dim(0), s.dim(1));
        let mut out = vec![S::zero(); rows * k];
        kernels::softmax_rows(rows, k, &self.nodes[x.0].data, &mut out);
        self.push(s.clone(), out, Op::Softmax { x }, "softmax")
    }

    // ---- reductions and reshapes ------------------------------------------

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x, "sum")?;
        let mut acc = S::zero();
        for v in &self.nodes[x.0].data {
            acc += *v;
        }
        self.push(Shape::scalar(), vec![acc], Op::Sum { x }, "sum")
    }

    pub fn reshape(&mut self, x: ValueId, shape: Shape) -> Result<ValueId> {
        self.check_id(x, "reshape")?;
        if shape.count() != self.nodes[x.0].shape.count() {
            return Err(Error::shape_mismatch(
                "reshape",
                &self.nodes[x.0].shape,
                &shape,
            ));
        }
        let data = self.nodes[x.0].data.clone();
        self.push(shape, data, Op::Reshape { x }, "reshape")
    }

    /// `[N, H, W, C] -> [N, H*W*C]`.
    pub fn flatten(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x, "flatten")?;
        let s = &self.nodes[x.0].shape;
        if s.rank() != 4 {
            return Err(Error::invalid("flatten", format!("expected rank-4 input, got {s}")));
        }
        let n = s.dim(0);
        let rest = s.count() / n;
        self.reshape(x, Shape::new(vec![n, rest]))
    }

    /// `[N, A] ++ [N, B] -> [N, A+B]` along the last axis.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a, "concat")?;
        self.check_id(b, "concat")?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.rank() != 2 || sb.rank() != 2 || sa.dim(0) != sb.dim(0) {
            return Err(Error::shape_mismatch("concat", sa, sb));
        }
        let (n, wa, wb) = (sa.dim(0), sa.dim(1), sb.dim(1));
        let mut data = Vec::with_capacity(n * (wa + wb));
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..n {
            data.extend_from_slice(&da[i * wa..(i + 1) * wa]);
            data.extend_from_slice(&db[i * wb..(i + 1) * wb]);
        }
        self.push(
            Shape::new(vec![n, wa + wb]),
            data,
            Op::ConcatCols { a, b },
            "concat",
        )
    }

    // ---- spatial ops -----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        bias: ValueId,
        padding: Padding,
        stride: (usize, usize),
    ) -> Result<ValueId> {
        self.check_id(x, "conv2d")?;
        self.check_id(kernel, "conv2d")?;
        self.check_id(bias, "conv2d")?;
        let sx = &self.nodes[x.0].shape;
        let sk = &self.nodes[kernel.0].shape;
        if sx.rank() != 4 || sk.rank() != 4 {
            return Err(Error::shape_mismatch("conv2d", sx, sk));
        }
        let (n, h, w, cin) = (sx.dim(0), sx.dim(1), sx.dim(2), sx.dim(3));
        let (kh, kw, kcin, cout) = (sk.dim(0), sk.dim(1), sk.dim(2), sk.dim(3));
        if cin != kcin {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if self.nodes[bias.0].shape.count() != cout {
            return Err(Error::shape_mismatch(
                "conv2d",
                &self.nodes[bias.0].shape,
                format!("[{cout}]"),
            ));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (oh, ow, ph, pw) = conv_out_dims(h, w, kh, kw, stride, padding)?;
        let dims = ConvDims {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            ph,
            pw,
            sh,
            sw,
        };
        let mut out = vec![S::zero(); n * oh * ow * cout];
        kernels::conv2d_fwd(
            &dims,
            &self.nodes[x.0].data,
            &self.nodes[kernel.0].data,
            &self.nodes[bias.0].data,
            &mut out,
        );
        self.push(
            Shape::new(vec![n, oh, ow, cout]),
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            },
            "conv2d",
        )
    }

    pub fn maxpool2(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x, "maxpool2")?;
        let s = &self.nodes[x.0].shape;
        if s.rank() != 4 {
            return Err(Error::invalid("maxpool2", format!("expected rank-4 input, got {s}")));
        }
        let (n, h, w, c) = (s.dim(0), s.dim(1), s.dim(2), s.dim(3));
        if h < 2 || w < 2 {
            return Err(Error::invalid(
                "maxpool2",
                format!("spatial extent {h}x{w} smaller than 2x2 window"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![S::zero(); n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        kernels::maxpool2_fwd(n, h, w, c, &self.nodes[x.0].data, &mut out, &mut argmax);
        self.push(
            Shape::new(vec![n, oh, ow, c]),
            out,
            Op::MaxPool2 { x, argmax },
            "maxpool2",
        )
    }

    /// Global average pooling `[N, H, W, C] -> [N, C]`.
    pub fn gap(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x, "gap")?;
        let s = &self.nodes[x.0].shape;
        if s.rank() != 4 {
            return Err(Error::invalid("gap", format!("expected rank-4 input, got {s}")));
        }
        let (n, h, w, c) = (s.dim(0), s.dim(1), s.dim(2), s.dim(3));
        let mut out = vec![S::zero(); n * c];
        kernels::gap_fwd(n, h, w, c, &self.nodes[x.0].data, &mut out);
        self.push(Shape::new(vec![n, c]), out, Op::Gap { x }, "gap")
    }

    // ---- normalization and regularization ---------------------------------

    /// Training-mode batch normalization over the N*H*W axis of NHWC input.
    /// Returns the output id plus the batch moments so the caller can update
    /// running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<(ValueId, kernels::BatchNormStats<S>)> {
        self.check_id(x, "batchnorm")?;
        let s = &self.nodes[x.0].shape;
        if s.rank() != 4 {
            return Err(Error::invalid("batchnorm", format!("expected rank-4 input, got {s}")));
        }
        let (n, h, w, c) = (s.dim(0), s.dim(1), s.dim(2), s.dim(3));
        let rows = n * h * w;
        if rows < 2 {
            return Err(Error::invalid(
                "batchnorm",
                "train mode needs at least 2 elements per channel",
            ));
        }
        self.check_bn_params(gamma, beta, c)?;
        let stats = kernels::channel_moments(rows, c, &self.nodes[x.0].data);
        let eps_s = S::from_f64(eps);
        let inv_std: Vec<S> = stats.var.iter().map(|&v| (v + eps_s).sqrt().recip()).collect();
        let mut out = vec![S::zero(); rows * c];
        kernels::batchnorm_apply(
            c,
            &self.nodes[x.0].data,
            &stats.mean,
            &inv_std,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            &mut out,
        );
        let id = self.push(
            s.clone(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: stats.mean.clone(),
                inv_std,
                train: true,
            },
            "batchnorm",
        )?;
        Ok((id, stats))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<ValueId> {
        self.check_id(x, "batchnorm")?;
        let s = &self.nodes[x.0].shape;
        if s.rank() != 4 {
            return Err(Error::invalid("batchnorm", format!("expected rank-4 input, got {s}")));
        }
        let c = s.dim(3);
        self.check_bn_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid("batchnorm", "running stats length mismatch"));
        }
        let eps_s = S::from_f64(eps);
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| (v + eps_s).sqrt().recip())
            .collect();
        let rows = s.count() / c;
        let mut out = vec![S::zero(); rows * c];
        kernels::batchnorm_apply(
            c,
            &self.nodes[x.0].data,
            running_mean,
            &inv_std,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            &mut out,
        );
        self.push(
            s.clone(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                train: false,
            },
            "batchnorm",
        )
    }

    fn check_bn_params(&self, gamma: ValueId, beta: ValueId, c: usize) -> Result<()> {
        self.check_id(gamma, "batchnorm")?;
        self.check_id(beta, "batchnorm")?;
        if self.nodes[gamma.0].shape.count() != c || self.nodes[beta.0].shape.count() != c {
            return Err(Error::invalid(
                "batchnorm",
                format!("gamma/beta must have {c} entries"),
            ));
        }
        Ok(())
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate). Rate 0 is the identity. Inference callers skip the op.
    pub fn dropout(&mut self, x: ValueId, rate: f64, rng: &mut Rng) -> Result<ValueId> {
        self.check_id(x, "dropout")?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|_| {
                if rng.uniform() < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| *v * *m)
            .collect();
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::Dropout { x, mask },
            "dropout",
        )
    }

    // ---- mixture-of-experts -----------------------------------------------

    /// Combine expert outputs with top-k gating: each row's output is the
    /// sum of its k highest-probability experts' rows, each scaled by its
    /// raw gating probability (or by the renormalized probability when
    /// `renormalize` is set). Lower expert index wins exact probability
    /// ties. Experts outside the top-k contribute exactly zero, in value
    /// and in gradient.
    pub fn moe_combine(
        &mut self,
        probs: ValueId,
        experts: &[ValueId],
        k: usize,
        renormalize: bool,
    ) -> Result<ValueId> {
        self.check_id(probs, "moe_combine")?;
        let sp = &self.nodes[probs.0].shape;
        if sp.rank() != 2 {
            return Err(Error::invalid("moe_combine", format!("probs must be rank 2, got {sp}")));
        }
        let (n, e) = (sp.dim(0), sp.dim(1));
        if experts.len() != e {
            return Err(Error::invalid(
                "moe_combine",
                format!("{} expert outputs for {e} gate columns", experts.len()),
            ));
        }
        if k == 0 || k > e {
            return Err(Error::invalid(
                "moe_combine",
                format!("top-k {k} out of range for {e} experts"),
            ));
        }
        let mut d = 0usize;
        for (i, &ex) in experts.iter().enumerate() {
            self.check_id(ex, "moe_combine")?;
            let se = &self.nodes[ex.0].shape;
            if se.rank() != 2 || se.dim(0) != n {
                return Err(Error::shape_mismatch("moe_combine", sp, se));
            }
            if i == 0 {
                d = se.dim(1);
            } else if se.dim(1) != d {
                return Err(Error::invalid("moe_combine", "experts disagree on output width"));
            }
        }
        let mut out = vec![S::zero(); n * d];
        let mut selected = Vec::with_capacity(n);
        for row in 0..n {
            let p = &self.nodes[probs.0].data[row * e..(row + 1) * e];
            let sel = top_k_indices(p, k);
            let weights = selection_weights(p, &sel, renormalize);
            let orow = &mut out[row * d..(row + 1) * d];
            for (&ei, &wv) in sel.iter().zip(&weights) {
                let erow = &self.nodes[experts[ei].0].data[row * d..(row + 1) * d];
                for (o, v) in orow.iter_mut().zip(erow) {
                    *o += wv * *v;
                }
            }
            selected.push(sel);
        }
        self.push(
            Shape::new(vec![n, d]),
            out,
            Op::MoeCombine {
                probs,
                experts: experts.to_vec(),
                selected,
                renormalize,
            },
            "moe_combine",
        )
    }

    // ---- loss --------------------------------------------------------------

    /// Label-smoothed categorical cross-entropy over predicted
    /// probabilities: targets become `(1-eps)*y + eps/K`, the log is clamped
    /// at 1e-7, and the result is the mean over the batch.
    pub fn cce_loss(&mut self, pred: ValueId, target: ValueId, smoothing: f64) -> Result<ValueId> {
        self.check_id(pred, "cce_loss")?;
        self.check_id(target, "cce_loss")?;
        let (sp, st) = (&self.nodes[pred.0].shape, &self.nodes[target.0].shape);
        if sp != st || sp.rank() != 2 {
            return Err(Error::shape_mismatch("cce_loss", sp, st));
        }
        if !(0.0..0.5).contains(&smoothing) {
            return Err(Error::invalid(
                "cce_loss",
                format!("smoothing {smoothing} outside [0, 0.5)"),
            ));
        }
        let (n, k) = (sp.dim(0), sp.dim(1));
        let pd = &self.nodes[pred.0].data;
        let td = &self.nodes[target.0].data;
        if pd.iter().any(|v| *v < S::zero()) {
            return Err(Error::invalid("cce_loss", "negative prediction entries"));
        }
        for (r, row) in td.chunks_exact(k).enumerate() {
            let mut sum = S::zero();
            for &v in row {
                if v != S::zero() && v != S::one() {
                    return Err(Error::invalid(
                        "cce_loss",
                        format!("target row {r} is not one-hot"),
                    ));
                }
                sum += v;
            }
            if sum != S::one() {
                return Err(Error::invalid(
                    "cce_loss",
                    format!("target row {r} does not sum to 1"),
                ));
            }
        }
        let eps = S::from_f64(smoothing);
        let uniform = eps / S::from_usize(k);
        let clamp = S::from_f64(LOG_CLAMP);
        let mut acc = S::zero();
        for (prow, trow) in pd.chunks_exact(k).zip(td.chunks_exact(k)) {
            for (pv, tv) in prow.iter().zip(trow) {
                let smoothed = (S::one() - eps) * *tv + uniform;
                acc -= smoothed * pv.max(clamp).ln();
            }
        }
        let loss = acc / S::from_usize(n);
        self.push(
            Shape::scalar(),
            vec![loss],
            Op::CceLoss {
                pred,
                target,
                smoothing: eps,
            },
            "cce_loss",
        )
    }

    // ---- backward ------------------------------------------------------------

    /// Propagate gradients from a scalar loss back through the tape. Fresh
    /// adjoints are computed and *added* into each node's grad buffer and,
    /// through `store`, into bound parameters.
    pub fn backward(&mut self, loss: ValueId, mut store: Option<&mut ParamStore<S>>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward", "loss tensor not on tape"));
        }
        if self.nodes[loss.0].shape.count() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {}", self.nodes[loss.0].shape),
            ));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..n).rev() {
            let Some(a) = adj[i].take() else { continue };
            self.backward_op(i, &a, &mut adj);
            let node = &mut self.nodes[i];
            if node.grad.is_empty() {
                node.grad = vec![S::zero(); node.data.len()];
            }
            for (g, av) in node.grad.iter_mut().zip(&a) {
                *g += *av;
            }
            if let (Some(pid), Some(st)) = (node.param, store.as_deref_mut()) {
                st.accumulate_grad(pid, &a);
            }
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, a: &[S], adj: &mut [Option<Vec<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a: ia, b: ib } => {
                self.bwd_broadcast_add(*ia, a, adj, None);
                self.bwd_broadcast_add(*ib, a, adj, None);
            }
            Op::Mul { a: ia, b: ib } => {
                let db = self.nodes[ib.0].data.clone();
                self.bwd_broadcast_add(*ia, a, adj, Some(&db));
                let da = self.nodes[ia.0].data.clone();
                self.bwd_broadcast_add(*ib, a, adj, Some(&da));
            }
            Op::MatMul { a: ia, b: ib } => {
                let sa = &self.nodes[ia.0].shape;
                let sb = &self.nodes[ib.0].shape;
                let (m, k, nn) = (sa.dim(0), sa.dim(1), sb.dim(1));
                {
                    let da = ensure(adj, ia.0, m * k);
                    kernels::matmul_bwd_a(m, k, nn, &self.nodes[ib.0].data, a, da);
                }
                let db = ensure(adj, ib.0, k * nn);
                kernels::matmul_bwd_b(m, k, nn, &self.nodes[ia.0].data, a, db);
            }
            Op::AddRowVec { m, v } => {
                let w = self.nodes[v.0].shape.dim(0);
                {
                    let dm = ensure(adj, m.0, self.nodes[m.0].data.len());
                    for (g, av) in dm.iter_mut().zip(a) {
                        *g += *av;
                    }
                }
                let dv = ensure(adj, v.0, w);
                for row in a.chunks_exact(w) {
                    for (g, av) in dv.iter_mut().zip(row) {
                        *g += *av;
                    }
                }
            }
            Op::Relu { x } => {
                let xd = &self.nodes[x.0].data;
                let dx = ensure(adj, x.0, xd.len());
                for ((g, av), xv) in dx.iter_mut().zip(a).zip(xd) {
                    if *xv > S::zero() {
                        *g += *av;
                    }
                }
            }
            Op::Softmax { x } => {
                let s = &self.nodes[i].shape;
                let (rows, k) = (s.dim(0), s.dim(1));
                let p = &self.nodes[i].data;
                let dx = ensure(adj, x.0, rows * k);
                kernels::softmax_bwd(rows, k, p, a, dx);
            }
            Op::Sum { x } => {
                let dx = ensure(adj, x.0, self.nodes[x.0].data.len());
                let av = a[0];
                for g in dx.iter_mut() {
                    *g += av;
                }
            }
            Op::Reshape { x } => {
                let dx = ensure(adj, x.0, self.nodes[x.0].data.len());
                for (g, av) in dx.iter_mut().zip(a) {
                    *g += *av;
                }
            }
            Op::ConcatCols { a: ia, b: ib } => {
                let wa = self.nodes[ia.0].shape.dim(1);
                let wb = self.nodes[ib.0].shape.dim(1);
                {
                    let da = ensure(adj, ia.0, self.nodes[ia.0].data.len());
                    for (r, row) in a.chunks_exact(wa + wb).enumerate() {
                        for (g, av) in da[r * wa..(r + 1) * wa].iter_mut().zip(&row[..wa]) {
                            *g += *av;
                        }
                    }
                }
                let db = ensure(adj, ib.0, self.nodes[ib.0].data.len());
                for (r, row) in a.chunks_exact(wa + wb).enumerate() {
                    for (g, av) in db[r * wb..(r + 1) * wb].iter_mut().zip(&row[wa..]) {
                        *g += *av;
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            } => {
                let dy: Vec<S>;
                let dy_ref: &[S] = if self.fault_conv_bwd {
                    dy = a.iter().map(|&v| v * S::from_f64(1.001)).collect();
                    &dy
                } else {
                    a
                };
                {
                    let dx = ensure(adj, x.0, self.nodes[x.0].data.len());
                    kernels::conv2d_bwd_x(dims, &self.nodes[kernel.0].data, dy_ref, dx);
                }
                {
                    let dk = ensure(adj, kernel.0, self.nodes[kernel.0].data.len());
                    kernels::conv2d_bwd_k(dims, &self.nodes[x.0].data, a, dk);
                }
                let db = ensure(adj, bias.0, dims.cout);
                kernels::conv2d_bwd_b(dims, a, db);
            }
            Op::MaxPool2 { x, argmax } => {
                let dx = ensure(adj, x.0, self.nodes[x.0].data.len());
                kernels::maxpool2_bwd(argmax, a, dx);
            }
            Op::Gap { x } => {
                let s = &self.nodes[x.0].shape;
                let (n, h, w, c) = (s.dim(0), s.dim(1), s.dim(2), s.dim(3));
                let dx = ensure(adj, x.0, s.count());
                kernels::gap_bwd(n, h, w, c, a, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let s = &self.nodes[x.0].shape;
                let c = s.dim(3);
                let rows = s.count() / c;
                let gamma_d = self.nodes[gamma.0].data.clone();
                let xd = &self.nodes[x.0].data;
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                {
                    let dx = ensure(adj, x.0, xd.len());
                    if *train {
                        kernels::batchnorm_bwd_train(
                            rows, c, xd, mean, inv_std, &gamma_d, a, dx, &mut dgamma, &mut dbeta,
                        );
                    } else {
                        kernels::batchnorm_bwd_infer(
                            c, xd, mean, inv_std, &gamma_d, a, dx, &mut dgamma, &mut dbeta,
                        );
                    }
                }
                let dg = ensure(adj, gamma.0, c);
                for (g, v) in dg.iter_mut().zip(&dgamma) {
                    *g += *v;
                }
                let db = ensure(adj, beta.0, c);
                for (g, v) in db.iter_mut().zip(&dbeta) {
                    *g += *v;
                }
            }
            Op::Dropout { x, mask } => {
                let dx = ensure(adj, x.0, self.nodes[x.0].data.len());
                for ((g, av), m) in dx.iter_mut().zip(a).zip(mask) {
                    *g += *av * *m;
                }
            }
            Op::MoeCombine {
                probs,
                experts,
                selected,
                renormalize,
            } => {
                let e = self.nodes[probs.0].shape.dim(1);
                let d = self.nodes[i].shape.dim(1);
                let n = self.nodes[i].shape.dim(0);
                for row in 0..n {
                    let arow = &a[row * d..(row + 1) * d];
                    let p = &self.nodes[probs.0].data[row * e..(row + 1) * e];
                    let sel = &selected[row];
                    let weights = selection_weights(p, sel, *renormalize);
                    // dot of adjoint with each selected expert's output row
                    let mut dots = Vec::with_capacity(sel.len());
                    for &ei in sel {
                        let erow = &self.nodes[experts[ei].0].data[row * d..(row + 1) * d];
                        let mut s = S::zero();
                        for (av, ev) in arow.iter().zip(erow) {
                            s += *av * *ev;
                        }
                        dots.push(s);
                    }
                    for ((&ei, &wv), &dot) in sel.iter().zip(&weights).zip(&dots) {
                        let de = ensure(adj, experts[ei].0, n * d);
                        for (g, av) in de[row * d..(row + 1) * d].iter_mut().zip(arow) {
                            *g += wv * *av;
                        }
                        let dp = ensure(adj, probs.0, n * e);
                        if *renormalize {
                            let total: S = sel.iter().fold(S::zero(), |acc, &j| acc + p[j]);
                            let weighted: S = dots
                                .iter()
                                .zip(sel)
                                .fold(S::zero(), |acc, (&dt, &j)| acc + dt * p[j]);
                            dp[row * e + ei] += dot / total - weighted / (total * total);
                        } else {
                            dp[row * e + ei] += dot;
                        }
                    }
                }
            }
            Op::CceLoss {
                pred,
                target,
                smoothing,
            } => {
                let s = &self.nodes[pred.0].shape;
                let (n, k) = (s.dim(0), s.dim(1));
                let pd = &self.nodes[pred.0].data;
                let td = &self.nodes[target.0].data;
                let uniform = *smoothing / S::from_usize(k);
                let clamp = S::from_f64(LOG_CLAMP);
                let inv_n = S::from_usize(n).recip();
                let a0 = a[0];
                let dp = ensure(adj, pred.0, n * k);
                for ((g, pv), tv) in dp.iter_mut().zip(pd).zip(td) {
                    if *pv > clamp {
                        let smoothed = (S::one() - *smoothing) * *tv + uniform;
                        *g -= a0 * smoothed * inv_n / *pv;
                    }
                }
                let _ = target;
            }
        }
    }

    /// Backward of add/mul where one side may be scalar-broadcast.
    /// `factor` is the other operand's data for mul, None for add.
    fn bwd_broadcast_add(
        &self,
        input: ValueId,
        a: &[S],
        adj: &mut [Option<Vec<S>>],
        factor: Option<&[S]>,
    ) {
        let len = self.nodes[input.0].data.len();
        let d = ensure(adj, input.0, len);
        if len == a.len() {
            match factor {
                None => {
                    for (g, av) in d.iter_mut().zip(a) {
                        *g += *av;
                    }
                }
                Some(f) if f.len() == a.len() => {
                    for ((g, av), fv) in d.iter_mut().zip(a).zip(f) {
                        *g += *av * *fv;
                    }
                }
                Some(f) => {
                    // other operand is scalar
                    let fv = f[0];
                    for (g, av) in d.iter_mut().zip(a) {
                        *g += *av * fv;
                    }
                }
            }
        } else {
            // this operand is the scalar side: reduce the adjoint
            debug_assert_eq!(len, 1);
            let mut acc = S::zero();
            match factor {
                None => {
                    for av in a {
                        acc += *av;
                    }
                }
                Some(f) => {
                    for (av, fv) in a.iter().zip(f) {
                        acc += *av * *fv;
                    }
                }
            }
            d[0] += acc;
        }
    }
}

fn ensure<S: Scalar>(adj: &mut [Option<Vec<S>>], i: usize, len: usize) -> &mut Vec<S> {
    adj[i].get_or_insert_with(|| vec![S::zero(); len])
}

/// Indices of the k largest entries, scanning left to right with strict
/// comparison so the lowest index wins exact ties. Returned in selection
/// order (descending probability).
pub fn top_k_indices<S: Scalar>(p: &[S], k: usize) -> Vec<usize> {
    let mut taken = vec![false; p.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in p.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if v > p[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("k <= number of experts");
        taken[b] = true;
        out.push(b);
    }
    out
}

fn selection_weights<S: Scalar>(p: &[S], sel: &[usize], renormalize: bool) -> Vec<S> {
    if renormalize {
        let total: S = sel.iter().fold(S::zero(), |acc, &j| acc + p[j]);
        sel.iter().map(|&j| p[j] / total).collect()
    } else {
        sel.iter().map(|&j| p[j]).collect()
    }
}

/// Output extents and leading padding for a convolution.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    let (sh, sw) = stride;
    match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::invalid(
                    "conv2d",
                    format!("input {h}x{w} smaller than kernel {kh}x{kw} under valid padding"),
                ));
            }
            Ok(((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0))
        }
        Padding::Same => {
            // ceil(h / stride); leading pad gets the smaller half so the
            // extra row/column lands on the trailing side.
            let oh = h.div_ceil(sh);
            let ow = w.div_ceil(sw);
            let pad_h = ((oh - 1) * sh + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * sw + kw).saturating_sub(w);
            Ok((oh, ow, pad_h / 2, pad_w / 2))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(Shape::new(shape.to_vec()), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t32(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t32(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t32(&[3], &[1.5, -2.0, 0.25]));
        let z = tape.leaf(Tensor::zeros(Shape::new(vec![3])));
        let c = tape.add(a, z).unwrap();
        assert_eq!(tape.data(c), tape.data(a));
    }

    #[test]
    fn add_shape_mismatch_is_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t32(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t32(&[3], &[1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn add_scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(10.0f32));
        let b = tape.leaf(t32(&[2], &[1.0, 2.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0, 12.0]);
        let loss = tape.sum(c).unwrap();
        tape.backward(loss, None).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t32(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t32(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(p), &[11.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(t32(&[4], &[0.5, -1.0, 2.0, 3.0]));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, None).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_w() {
        let mut tape = Tape::new();
        let w = tape.leaf(t32(&[3], &[0.5, -1.0, 2.0]));
        let ww = tape.mul(w, w).unwrap();
        let loss = tape.sum(ww).unwrap();
        tape.backward(loss, None).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_every_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t32(&[2], &[1.5, -0.5]));
        let ww = tape.mul(w, w).unwrap();
        let loss = tape.sum(ww).unwrap();
        tape.backward(loss, None).unwrap();
        let first_w = tape.grad(w).unwrap().to_vec();
        let first_ww = tape.grad(ww).unwrap().to_vec();
        tape.backward(loss, None).unwrap();
        let second_w = tape.grad(w).unwrap().to_vec();
        let second_ww = tape.grad(ww).unwrap().to_vec();
        for (f, s) in first_w.iter().zip(&second_w) {
            assert_eq!(*s, 2.0 * *f);
        }
        for (f, s) in first_ww.iter().zip(&second_ww) {
            assert_eq!(*s, 2.0 * *f);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(t32(&[2], &[1.0, 2.0]));
        assert!(tape.backward(w, None).is_err());
    }

    #[test]
    fn cleared_tape_is_empty() {
        let mut tape = Tape::new();
        let _ = tape.leaf(t32(&[2], &[1.0, 2.0]));
        assert_eq!(tape.len(), 1);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);

        let neg = tape.leaf(t32(&[3], &[-1.0, -5.0, -0.1]));
        let z = tape.relu(neg).unwrap();
        assert_eq!(tape.data(z), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[1, 2], &[0.0, 0.0]));
        let p = tape.softmax(x).unwrap();
        assert_eq!(tape.data(p), &[0.5, 0.5]);

        let c = tape.leaf(t32(&[1, 4], &[3.0, 3.0, 3.0, 3.0]));
        let pc = tape.softmax(c).unwrap();
        for &v in tape.data(pc) {
            assert!((v - 0.25).abs() < 1e-7);
        }

        let extreme = tape.leaf(t32(&[1, 2], &[1000.0, 0.0]));
        let pe = tape.softmax(extreme).unwrap();
        let row = tape.data(pe);
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row[0] - 1.0).abs() < 1e-6);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn maxpool_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.data(y), &[4.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, None).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_rejects_tiny_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[1, 1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
        assert!(tape.maxpool2(x).is_err());
    }

    #[test]
    fn gap_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.gap(x).unwrap();
        assert_eq!(tape.data(y), &[2.5]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[1, 3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let k = tape.leaf(t32(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t32(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, Padding::Same, (1, 1)).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv_all_ones_valid() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(vec![1, 3, 3, 1]), 1.0f32));
        let k = tape.leaf(Tensor::full(Shape::new(vec![3, 3, 1, 1]), 1.0f32));
        let b = tape.leaf(t32(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, Padding::Valid, (1, 1)).unwrap();
        assert_eq!(tape.shape(y).dims(), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[9.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(vec![1, 3, 3, 2])));
        let k = tape.leaf(Tensor::<f32>::zeros(Shape::new(vec![1, 1, 3, 1])));
        let b = tape.leaf(t32(&[1], &[0.0]));
        assert!(tape.conv2d(x, k, b, Padding::Same, (1, 1)).is_err());
    }

    #[test]
    fn conv_valid_smaller_than_kernel_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f32>::zeros(Shape::new(vec![1, 2, 2, 1])));
        let k = tape.leaf(Tensor::<f32>::zeros(Shape::new(vec![3, 3, 1, 1])));
        let b = tape.leaf(t32(&[1], &[0.0]));
        assert!(tape.conv2d(x, k, b, Padding::Valid, (1, 1)).is_err());
    }

    #[test]
    fn same_padding_preserves_extent_for_even_kernels() {
        for (h, k) in [(8, 2), (8, 4), (7, 3), (9, 6), (5, 5)] {
            let (oh, ow, _, _) =
                conv_out_dims(h, h, k, k, (1, 1), Padding::Same).unwrap();
            assert_eq!((oh, ow), (h, h), "kernel {k} on {h}");
        }
    }

    #[test]
    fn flatten_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let f = tape.flatten(x).unwrap();
        assert_eq!(tape.shape(f).dims(), &[1, 4]);
        let back = tape.reshape(f, Shape::new(vec![1, 2, 2, 1])).unwrap();
        assert_eq!(tape.data(back), tape.data(x));

        let a = tape.leaf(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t32(&[2, 1], &[9.0, 10.0]));
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 10.0]);
        let loss = tape.sum(c).unwrap();
        tape.backward(loss, None).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let x = tape.leaf(t32(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_statistics() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(123);
        let n = 100_000;
        let x = tape.leaf(Tensor::full(Shape::new(vec![n]), 1.0f32));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let survivors = tape.data(y).iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        let mean = tape.data(y).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "inverted-scale mean {mean}");
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut tape = Tape::new();
        tape.set_checked(true);
        let a = tape.leaf(t32(&[1], &[1e38]));
        let b = tape.leaf(t32(&[1], &[1e38]));
        let prod = tape.mul(a, b);
        assert!(matches!(prod, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cce_uniform_prediction_equals_log_k() {
        for k in [2usize, 7, 8] {
            for smoothing in [0.0, 0.1] {
                let mut tape = Tape::<f64>::new();
                let pred = tape.leaf(Tensor::full(Shape::new(vec![1, k]), 1.0 / k as f64));
                let mut t = vec![0.0; k];
                t[0] = 1.0;
                let target = tape.leaf(Tensor::new(Shape::new(vec![1, k]), t).unwrap());
                let loss = tape.cce_loss(pred, target, smoothing).unwrap();
                let got = tape.data(loss)[0];
                assert!(
                    (got - (k as f64).ln()).abs() < 1e-7,
                    "k={k} eps={smoothing}: {got}"
                );
            }
        }
    }

    #[test]
    fn cce_perfect_prediction_near_zero() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(Shape::new(vec![1, 3]), vec![1.0, 0.0, 0.0]).unwrap());
        let target = tape.leaf(Tensor::new(Shape::new(vec![1, 3]), vec![1.0, 0.0, 0.0]).unwrap());
        let loss = tape.cce_loss(pred, target, 0.0).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn cce_rejects_negative_and_non_onehot() {
        let mut tape = Tape::<f64>::new();
        let bad = tape.leaf(Tensor::new(Shape::new(vec![1, 2]), vec![-0.1, 1.1]).unwrap());
        let target = tape.leaf(Tensor::new(Shape::new(vec![1, 2]), vec![1.0, 0.0]).unwrap());
        assert!(tape.cce_loss(bad, target, 0.0).is_err());

        let pred = tape.leaf(Tensor::new(Shape::new(vec![1, 2]), vec![0.5, 0.5]).unwrap());
        let soft = tape.leaf(Tensor::new(Shape::new(vec![1, 2]), vec![0.7, 0.3]).unwrap());
        assert!(tape.cce_loss(pred, soft, 0.0).is_err());
    }

    #[test]
    fn top_k_tie_breaks_to_lower_index() {
        let p = [0.25f64, 0.25, 0.25, 0.25];
        assert_eq!(top_k_indices(&p, 2), vec![0, 1]);
        let q = [0.1f64, 0.4, 0.4, 0.1];
        assert_eq!(top_k_indices(&q, 2), vec![1, 2]);
    }
}
