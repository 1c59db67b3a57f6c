//! Reverse-mode tape over field, scalar, stack, and tensor values.
//!
//! Every differentiable operation appends one node holding its inputs, any
//! non-differentiable payload (frozen upwind signs, saved batch-norm
//! statistics, kernel geometry), and the forward value. `backward` replays
//! the tape once in reverse with a fixed traversal and summation order, so
//! gradients are bit-reproducible; accumulators are zeroed first, making
//! repeated backward passes idempotent. Parameter leaves accumulate into
//! their `ParamStore` entry, so a parameter used at every time step of an
//! unrolled integration receives the sum of all its per-step contributions.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::field::{convolve, laplacian, BoundaryPolicy, Field2D, GridSpec, StencilKernel};
use crate::scalar::{lit, Scalar};

use super::adjoints;
use super::params::{ParamId, ParamStore, Tensor};
use super::stack::{self, BnStats, ChannelStack};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Forward value stored on a node.
#[derive(Debug, Clone)]
pub(crate) enum Value<T: Scalar> {
    Scalar(T),
    Field(Rc<Field2D<T>>),
    Stack(Rc<ChannelStack<T>>),
    Tensor(Rc<Tensor<T>>),
}

impl<T: Scalar> Value<T> {
    fn kind(&self) -> &'static str {
        match self {
            Value::Scalar(_) => "scalar",
            Value::Field(_) => "field",
            Value::Stack(_) => "stack",
            Value::Tensor(_) => "tensor",
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(v) => v.is_finite(),
            Value::Field(f) => !f.has_non_finite(),
            Value::Stack(s) => !s.has_non_finite(),
            Value::Tensor(t) => t.data().iter().all(|v| v.is_finite()),
        }
    }
}

/// Gradient (cotangent) of one node, same shape as its value. Public so
/// checkpointed training can seed and read adjoints between tape segments.
#[derive(Debug, Clone)]
pub enum GradValue<T: Scalar> {
    Scalar(T),
    Field(Field2D<T>),
    Stack(ChannelStack<T>),
    Tensor(Tensor<T>),
}

impl<T: Scalar> GradValue<T> {
    fn add_assign(&mut self, other: &GradValue<T>) {
        match (self, other) {
            (GradValue::Scalar(a), GradValue::Scalar(b)) => *a += *b,
            (GradValue::Field(a), GradValue::Field(b)) => {
                a.add_scaled_assign(T::one(), b);
            }
            (GradValue::Stack(a), GradValue::Stack(b)) => {
                for (x, &y) in a.data_mut().iter_mut().zip(b.data().iter()) {
                    *x += y;
                }
            }
            (GradValue::Tensor(a), GradValue::Tensor(b)) => a.add_assign(b),
            _ => panic!("gradient kind mismatch"),
        }
    }

    pub fn as_field(&self) -> Option<&Field2D<T>> {
        match self {
            GradValue::Field(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<T> {
        match self {
            GradValue::Scalar(v) => Some(*v),
            _ => None,
        }
    }
}

fn shape_compatible<T: Scalar>(v: &Value<T>, g: &GradValue<T>) -> bool {
    match (v, g) {
        (Value::Scalar(_), GradValue::Scalar(_)) => true,
        (Value::Field(f), GradValue::Field(gf)) => f.grid() == gf.grid(),
        (Value::Stack(s), GradValue::Stack(gs)) => {
            s.channels() == gs.channels() && s.ny() == gs.ny() && s.nx() == gs.nx()
        }
        (Value::Tensor(t), GradValue::Tensor(gt)) => t.shape() == gt.shape(),
        // A rank-0 parameter tensor may be used as a traced scalar.
        (Value::Scalar(_), GradValue::Tensor(gt)) => gt.shape().is_empty(),
        _ => false,
    }
}

/// Recorded operation. Payloads carry everything backward needs besides the
/// input node values: kernels, frozen sign masks, saved statistics.
#[derive(Debug, Clone)]
pub(crate) enum Op<T: Scalar> {
    ConstScalar,
    ConstField,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulScalarField(NodeId, NodeId),
    Convolve {
        input: NodeId,
        kernel: StencilKernel<T>,
        policy: BoundaryPolicy<T>,
    },
    ConvolveParam {
        input: NodeId,
        kernel: NodeId,
        transposed: bool,
        normalization: T,
        policy: BoundaryPolicy<T>,
    },
    Laplacian(NodeId),
    UpwindX { phi: NodeId, positive: Vec<bool> },
    UpwindY { phi: NodeId, positive: Vec<bool> },
    HelmholtzInterior { input: NodeId, l_r: T },
    MaskInterior(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumSquares(NodeId),
    AddS(NodeId, NodeId),
    SubS(NodeId, NodeId),
    MulS(NodeId, NodeId),
    DivS(NodeId, NodeId),
    ScaleS(NodeId, T),
    FieldToStack { input: NodeId, std: T },
    ChannelToField { input: NodeId, channel: usize },
    Conv2d { input: NodeId, weight: NodeId },
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: T,
        stats: BnStats<T>,
    },
    LeakyRelu { input: NodeId, slope: T },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::ConstScalar => "const_scalar",
            Op::ConstField => "const_field",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalarField(..) => "mul_scalar_field",
            Op::Convolve { .. } => "convolve",
            Op::ConvolveParam { .. } => "convolve_param",
            Op::Laplacian(_) => "laplacian",
            Op::UpwindX { .. } => "upwind_x",
            Op::UpwindY { .. } => "upwind_y",
            Op::HelmholtzInterior { .. } => "helmholtz_interior",
            Op::MaskInterior(_) => "mask_interior",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::AddS(..) => "add_s",
            Op::SubS(..) => "sub_s",
            Op::MulS(..) => "mul_s",
            Op::DivS(..) => "div_s",
            Op::ScaleS(..) => "scale_s",
            Op::FieldToStack { .. } => "field_to_stack",
            Op::ChannelToField { .. } => "channel_to_field",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Value<T>,
}

/// Traced SSH-like field: forward value plus its node on the tape (absent
/// when the tape is in no-grad mode).
#[derive(Clone)]
pub struct TracedField<T: Scalar> {
    value: Rc<Field2D<T>>,
    node: Option<NodeId>,
    tape: u64,
}

impl<T: Scalar> TracedField<T> {
    pub fn field(&self) -> &Field2D<T> {
        &self.value
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }
}

#[derive(Clone, Copy)]
pub struct TracedScalar<T: Scalar> {
    value: T,
    node: Option<NodeId>,
    tape: u64,
}

impl<T: Scalar> TracedScalar<T> {
    pub fn value(&self) -> T {
        self.value
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }
}

#[derive(Clone)]
pub struct TracedStack<T: Scalar> {
    value: Rc<ChannelStack<T>>,
    node: Option<NodeId>,
    tape: u64,
}

impl<T: Scalar> TracedStack<T> {
    pub fn stack(&self) -> &ChannelStack<T> {
        &self.value
    }
}

#[derive(Clone)]
pub struct TracedTensor<T: Scalar> {
    value: Rc<Tensor<T>>,
    node: Option<NodeId>,
    tape: u64,
}

impl<T: Scalar> TracedTensor<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.value
    }
}

/// Reverse-mode tape. Create one per differentiated evaluation; handles from
/// different tapes must not be mixed.
pub struct Tape<T: Scalar> {
    id: u64,
    recording: Cell<bool>,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: Cell::new(true),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Tape that evaluates forward values without recording (for line
    /// searches and finite-difference probes).
    pub fn no_grad() -> Self {
        let t = Tape::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, handle_tape: u64) -> Result<()> {
        if handle_tape != self.id {
            return Err(Error::Usage(format!(
                "value from tape {handle_tape} used on tape {}; a traced value \
                 must stay on the tape that created it",
                self.id
            )));
        }
        Ok(())
    }

    fn record(&self, op: Op<T>, value: Value<T>) -> Option<NodeId> {
        if !self.recording.get() {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Some(NodeId(nodes.len() - 1))
    }

    fn field_handle(&self, f: Field2D<T>, node: Option<NodeId>) -> TracedField<T> {
        TracedField {
            value: Rc::new(f),
            node,
            tape: self.id,
        }
    }

    // ---- leaves ----

    pub fn const_field(&self, f: Field2D<T>) -> TracedField<T> {
        let rc = Rc::new(f);
        let node = self.record(Op::ConstField, Value::Field(rc.clone()));
        TracedField {
            value: rc,
            node,
            tape: self.id,
        }
    }

    pub fn const_scalar(&self, v: T) -> TracedScalar<T> {
        let node = self.record(Op::ConstScalar, Value::Scalar(v));
        TracedScalar {
            value: v,
            node,
            tape: self.id,
        }
    }

    /// Parameter leaf holding a snapshot of the tensor's current value.
    /// Backward accumulates its adjoint into the store's gradient slot, so a
    /// leaf reused across time steps sums all contributions.
    pub fn param_tensor(&self, store: &ParamStore<T>, id: ParamId) -> TracedTensor<T> {
        let rc = Rc::new(store.value(id).clone());
        let node = self.record(Op::Param(id), Value::Tensor(rc.clone()));
        TracedTensor {
            value: rc,
            node,
            tape: self.id,
        }
    }

    /// Rank-0 parameter as a traced scalar.
    pub fn param_scalar(&self, store: &ParamStore<T>, id: ParamId) -> Result<TracedScalar<T>> {
        let t = store.value(id);
        if !t.shape().is_empty() {
            return Err(Error::Usage(format!(
                "parameter has shape {:?}, expected a rank-0 scalar",
                t.shape()
            )));
        }
        let v = t.item();
        let node = self.record(Op::Param(id), Value::Scalar(v));
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    // ---- field arithmetic ----

    pub fn add(&self, a: &TracedField<T>, b: &TracedField<T>) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        self.check(b.tape)?;
        let out = a.value.add(&b.value);
        let node = self.record(
            Op::Add(a.node.unwrap_or(NodeId(0)), b.node.unwrap_or(NodeId(0))),
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    pub fn sub(&self, a: &TracedField<T>, b: &TracedField<T>) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        self.check(b.tape)?;
        let out = a.value.sub(&b.value);
        let node = self.record(
            Op::Sub(a.node.unwrap_or(NodeId(0)), b.node.unwrap_or(NodeId(0))),
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    pub fn mul(&self, a: &TracedField<T>, b: &TracedField<T>) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        self.check(b.tape)?;
        let out = a.value.mul(&b.value);
        let node = self.record(
            Op::Mul(a.node.unwrap_or(NodeId(0)), b.node.unwrap_or(NodeId(0))),
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    pub fn scale(&self, a: &TracedField<T>, c: T) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        let out = a.value.scale(c);
        let node = self.record(
            Op::Scale(a.node.unwrap_or(NodeId(0)), c),
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    /// Scalar times field.
    pub fn mul_sf(&self, s: &TracedScalar<T>, f: &TracedField<T>) -> Result<TracedField<T>> {
        self.check(s.tape)?;
        self.check(f.tape)?;
        let out = f.value.scale(s.value);
        let node = self.record(
            Op::MulScalarField(s.node.unwrap_or(NodeId(0)), f.node.unwrap_or(NodeId(0))),
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    // ---- stencil ops ----

    pub fn convolve(
        &self,
        a: &TracedField<T>,
        kernel: &StencilKernel<T>,
        policy: BoundaryPolicy<T>,
    ) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        let out = convolve(&a.value, kernel, policy)?;
        let node = self.record(
            Op::Convolve {
                input: a.node.unwrap_or(NodeId(0)),
                kernel: kernel.clone(),
                policy,
            },
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    /// Convolution whose 2x3 kernel weights come from a trainable tensor.
    /// `transposed` applies the kernel's transpose (the y-gradient form);
    /// the gradient lands in the tensor's own 2x3 layout either way.
    pub fn convolve_param(
        &self,
        a: &TracedField<T>,
        kernel: &TracedTensor<T>,
        transposed: bool,
        normalization: T,
        policy: BoundaryPolicy<T>,
    ) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        self.check(kernel.tape)?;
        let k = effective_kernel(&kernel.value, transposed, normalization)?;
        let out = convolve(&a.value, &k, policy)?;
        let node = self.record(
            Op::ConvolveParam {
                input: a.node.unwrap_or(NodeId(0)),
                kernel: kernel.node.unwrap_or(NodeId(0)),
                transposed,
                normalization,
                policy,
            },
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    pub fn laplacian(&self, a: &TracedField<T>) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        let out = laplacian(&a.value);
        let node = self.record(
            Op::Laplacian(a.node.unwrap_or(NodeId(0))),
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    /// Upwind x-derivative with stencil directions frozen from the sign of
    /// `vel`'s current values; gradients flow only through `phi`.
    pub fn upwind_x(&self, phi: &TracedField<T>, vel: &Field2D<T>) -> Result<TracedField<T>> {
        self.check(phi.tape)?;
        phi.value.same_grid(vel)?;
        let positive = crate::dynamics::upwind_signs(vel);
        let out = crate::dynamics::upwind_x_with_signs(&phi.value, &positive);
        let node = self.record(
            Op::UpwindX {
                phi: phi.node.unwrap_or(NodeId(0)),
                positive,
            },
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    pub fn upwind_y(&self, phi: &TracedField<T>, vel: &Field2D<T>) -> Result<TracedField<T>> {
        self.check(phi.tape)?;
        phi.value.same_grid(vel)?;
        let positive = crate::dynamics::upwind_signs(vel);
        let out = crate::dynamics::upwind_y_with_signs(&phi.value, &positive);
        let node = self.record(
            Op::UpwindY {
                phi: phi.node.unwrap_or(NodeId(0)),
                positive,
            },
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    /// Interior Helmholtz rows (lap - 1/L_R^2 with a zero ring), the linear
    /// operator CG iterates on.
    pub fn helmholtz_interior(&self, a: &TracedField<T>, l_r: T) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        let out = crate::elliptic::apply_interior(&a.value, l_r);
        let node = self.record(
            Op::HelmholtzInterior {
                input: a.node.unwrap_or(NodeId(0)),
                l_r,
            },
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    /// Zeroes the outermost ring, keeping the interior.
    pub fn mask_interior(&self, a: &TracedField<T>) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        let out = a.value.masked_interior();
        let node = self.record(
            Op::MaskInterior(a.node.unwrap_or(NodeId(0))),
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    // ---- reductions ----

    pub fn sum(&self, a: &TracedField<T>) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        let v = a.value.sum();
        let node = self.record(Op::Sum(a.node.unwrap_or(NodeId(0))), Value::Scalar(v));
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    pub fn mean(&self, a: &TracedField<T>) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        let v = a.value.mean();
        let node = self.record(Op::Mean(a.node.unwrap_or(NodeId(0))), Value::Scalar(v));
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    /// Sum of squared tensor entries (for weight-decay penalties).
    pub fn sum_squares_tensor(&self, a: &TracedTensor<T>) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        let mut v = T::zero();
        for &x in a.value.data() {
            v += x * x;
        }
        let node = self.record(Op::SumSquares(a.node.unwrap_or(NodeId(0))), Value::Scalar(v));
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    // ---- scalar arithmetic ----

    pub fn add_s(&self, a: &TracedScalar<T>, b: &TracedScalar<T>) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        self.check(b.tape)?;
        let v = a.value + b.value;
        let node = self.record(
            Op::AddS(a.node.unwrap_or(NodeId(0)), b.node.unwrap_or(NodeId(0))),
            Value::Scalar(v),
        );
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    pub fn sub_s(&self, a: &TracedScalar<T>, b: &TracedScalar<T>) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        self.check(b.tape)?;
        let v = a.value - b.value;
        let node = self.record(
            Op::SubS(a.node.unwrap_or(NodeId(0)), b.node.unwrap_or(NodeId(0))),
            Value::Scalar(v),
        );
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    pub fn mul_s(&self, a: &TracedScalar<T>, b: &TracedScalar<T>) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        self.check(b.tape)?;
        let v = a.value * b.value;
        let node = self.record(
            Op::MulS(a.node.unwrap_or(NodeId(0)), b.node.unwrap_or(NodeId(0))),
            Value::Scalar(v),
        );
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    pub fn div_s(&self, a: &TracedScalar<T>, b: &TracedScalar<T>) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        self.check(b.tape)?;
        let v = a.value / b.value;
        let node = self.record(
            Op::DivS(a.node.unwrap_or(NodeId(0)), b.node.unwrap_or(NodeId(0))),
            Value::Scalar(v),
        );
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    pub fn scale_s(&self, a: &TracedScalar<T>, c: T) -> Result<TracedScalar<T>> {
        self.check(a.tape)?;
        let v = a.value * c;
        let node = self.record(Op::ScaleS(a.node.unwrap_or(NodeId(0)), c), Value::Scalar(v));
        Ok(TracedScalar {
            value: v,
            node,
            tape: self.id,
        })
    }

    // ---- stack ops ----

    /// Standardizes a field into a 1-channel stack: (f - mean) / std.
    /// `mean` and `std` are dataset constants, not traced inputs.
    pub fn field_to_stack(
        &self,
        a: &TracedField<T>,
        mean: T,
        std: T,
    ) -> Result<TracedStack<T>> {
        self.check(a.tape)?;
        if std <= T::zero() || !std.is_finite() {
            return Err(Error::Config(format!(
                "input standardization std must be positive, got {std}"
            )));
        }
        let out = ChannelStack::standardized_from_field(&a.value, mean, std);
        let rc = Rc::new(out);
        let node = self.record(
            Op::FieldToStack {
                input: a.node.unwrap_or(NodeId(0)),
                std,
            },
            Value::Stack(rc.clone()),
        );
        Ok(TracedStack {
            value: rc,
            node,
            tape: self.id,
        })
    }

    pub fn channel_to_field(
        &self,
        a: &TracedStack<T>,
        channel: usize,
        grid: &GridSpec<T>,
    ) -> Result<TracedField<T>> {
        self.check(a.tape)?;
        if channel >= a.value.channels() {
            return Err(Error::Dimension(format!(
                "channel {channel} out of range for {}-channel stack",
                a.value.channels()
            )));
        }
        let out = a.value.channel_to_field(channel, grid)?;
        let node = self.record(
            Op::ChannelToField {
                input: a.node.unwrap_or(NodeId(0)),
                channel,
            },
            Value::Field(Rc::new(out.clone())),
        );
        Ok(self.field_handle(out, node))
    }

    /// Multi-channel convolution, replicate padding, no bias.
    pub fn conv2d(&self, a: &TracedStack<T>, weight: &TracedTensor<T>) -> Result<TracedStack<T>> {
        self.check(a.tape)?;
        self.check(weight.tape)?;
        let out = stack::conv2d(&a.value, &weight.value)?;
        let rc = Rc::new(out);
        let node = self.record(
            Op::Conv2d {
                input: a.node.unwrap_or(NodeId(0)),
                weight: weight.node.unwrap_or(NodeId(0)),
            },
            Value::Stack(rc.clone()),
        );
        Ok(TracedStack {
            value: rc,
            node,
            tape: self.id,
        })
    }

    /// Batch normalization. In training mode the statistics come from this
    /// activation (and the full batch-norm backward applies); in inference
    /// mode `running` supplies frozen statistics. The computed statistics
    /// are saved on the node and also returned for running-average updates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        a: &TracedStack<T>,
        scale: &TracedTensor<T>,
        shift: &TracedTensor<T>,
        running: (&Tensor<T>, &Tensor<T>),
        eps: T,
        train: bool,
    ) -> Result<(TracedStack<T>, BnStats<T>)> {
        self.check(a.tape)?;
        self.check(scale.tape)?;
        self.check(shift.tape)?;
        let (out, stats) = stack::batchnorm_forward(
            &a.value,
            &scale.value,
            &shift.value,
            running.0,
            running.1,
            eps,
            train,
        )?;
        let rc = Rc::new(out);
        let node = self.record(
            Op::BatchNorm {
                input: a.node.unwrap_or(NodeId(0)),
                scale: scale.node.unwrap_or(NodeId(0)),
                shift: shift.node.unwrap_or(NodeId(0)),
                eps,
                stats: stats.clone(),
            },
            Value::Stack(rc.clone()),
        );
        Ok((
            TracedStack {
                value: rc,
                node,
                tape: self.id,
            },
            stats,
        ))
    }

    pub fn leaky_relu(&self, a: &TracedStack<T>, slope: T) -> Result<TracedStack<T>> {
        self.check(a.tape)?;
        let out = stack::leaky_relu(&a.value, slope);
        let rc = Rc::new(out);
        let node = self.record(
            Op::LeakyRelu {
                input: a.node.unwrap_or(NodeId(0)),
                slope,
            },
            Value::Stack(rc.clone()),
        );
        Ok(TracedStack {
            value: rc,
            node,
            tape: self.id,
        })
    }

    // ---- backward ----

    /// Checks every recorded forward value; the first non-finite one is
    /// reported with its node id and operation.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.borrow().iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite value at tape node {i} ({})",
                    n.op.name()
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss, accumulating parameter gradients
    /// into `params` (zeroed first).
    pub fn backward(&self, loss: &TracedScalar<T>, params: &mut ParamStore<T>) -> Result<()> {
        self.check(loss.tape)?;
        let node = loss.node.ok_or_else(|| {
            Error::Usage("backward needs a recording tape; this one is no-grad".into())
        })?;
        self.backward_seeded(&[(node, GradValue::Scalar(T::one()))], Some(params), &[])?;
        Ok(())
    }

    /// Reverse pass from arbitrary seed cotangents. Returns the accumulated
    /// adjoints of the `want` nodes (zero-shaped if a node received none).
    /// Used directly by checkpointed unrolling, where a segment's output
    /// cotangents seed the previous segment.
    pub fn backward_seeded(
        &self,
        seeds: &[(NodeId, GradValue<T>)],
        mut params: Option<&mut ParamStore<T>>,
        want: &[NodeId],
    ) -> Result<Vec<Option<GradValue<T>>>> {
        if !self.recording.get() {
            return Err(Error::Usage(
                "backward needs a recording tape; this one is no-grad".into(),
            ));
        }
        if let Some(p) = params.as_deref_mut() {
            p.zero_grads();
        }
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut adj: Vec<Option<GradValue<T>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        for (id, g) in seeds {
            if id.0 >= n {
                return Err(Error::Usage(format!("seed node {id} not on this tape")));
            }
            if !shape_compatible(&nodes[id.0].value, g) {
                return Err(Error::Usage(format!(
                    "seed for node {id} has the wrong shape for a {} value",
                    nodes[id.0].value.kind()
                )));
            }
            accumulate(&mut adj[id.0], g.clone());
        }
        let mut wanted: Vec<Option<GradValue<T>>> = vec![None; want.len()];
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if let Some(slot) = want.iter().position(|w| w.0 == i) {
                wanted[slot] = Some(g.clone());
            }
            self.propagate(&nodes, i, g, &mut adj, &mut params)?;
        }
        Ok(wanted)
    }

    /// Scatters one node's cotangent into its inputs.
    fn propagate(
        &self,
        nodes: &[Node<T>],
        i: usize,
        g: GradValue<T>,
        adj: &mut [Option<GradValue<T>>],
        params: &mut Option<&mut ParamStore<T>>,
    ) -> Result<()> {
        let value_of = |id: NodeId| -> &Value<T> { &nodes[id.0].value };
        match &nodes[i].op {
            Op::ConstScalar | Op::ConstField => {}
            Op::Param(pid) => {
                if let Some(p) = params.as_deref_mut() {
                    let grad = p.grad_mut(*pid);
                    match &g {
                        GradValue::Tensor(t) => grad.add_assign(t),
                        GradValue::Scalar(v) => grad.data_mut()[0] += *v,
                        _ => {
                            return Err(Error::Usage(format!(
                                "parameter node {i} received a non-tensor gradient"
                            )))
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let gf = expect_field(g)?;
                accumulate(&mut adj[a.0], GradValue::Field(gf.clone()));
                accumulate(&mut adj[b.0], GradValue::Field(gf));
            }
            Op::Sub(a, b) => {
                let gf = expect_field(g)?;
                accumulate(&mut adj[b.0], GradValue::Field(gf.scale(-T::one())));
                accumulate(&mut adj[a.0], GradValue::Field(gf));
            }
            Op::Mul(a, b) => {
                let gf = expect_field(g)?;
                let va = expect_field_value(value_of(*a))?;
                let vb = expect_field_value(value_of(*b))?;
                accumulate(&mut adj[a.0], GradValue::Field(gf.mul(vb)));
                accumulate(&mut adj[b.0], GradValue::Field(gf.mul(va)));
            }
            Op::Scale(a, c) => {
                let gf = expect_field(g)?;
                accumulate(&mut adj[a.0], GradValue::Field(gf.scale(*c)));
            }
            Op::MulScalarField(s, f) => {
                let gf = expect_field(g)?;
                let sv = expect_scalar_value(value_of(*s))?;
                let fv = expect_field_value(value_of(*f))?;
                accumulate(&mut adj[s.0], GradValue::Scalar(gf.dot(fv)));
                accumulate(&mut adj[f.0], GradValue::Field(gf.scale(sv)));
            }
            Op::Convolve {
                input,
                kernel,
                policy,
            } => {
                let gf = expect_field(g)?;
                accumulate(
                    &mut adj[input.0],
                    GradValue::Field(adjoints::convolve_adjoint_input(&gf, kernel, *policy)),
                );
            }
            Op::ConvolveParam {
                input,
                kernel,
                transposed,
                normalization,
                policy,
            } => {
                let gf = expect_field(g)?;
                let ktensor = expect_tensor_value(value_of(*kernel))?;
                let eff = effective_kernel(ktensor, *transposed, *normalization)?;
                accumulate(
                    &mut adj[input.0],
                    GradValue::Field(adjoints::convolve_adjoint_input(&gf, &eff, *policy)),
                );
                let in_field = expect_field_value(value_of(*input))?;
                let g_eff = adjoints::convolve_adjoint_weights(
                    &gf,
                    in_field,
                    eff.kh,
                    eff.kw,
                    eff.anchor_y,
                    eff.anchor_x,
                    eff.normalization,
                    *policy,
                );
                // Map tap gradients from the effective orientation back to
                // the tensor's own layout.
                let (kh, kw) = (ktensor.shape()[0], ktensor.shape()[1]);
                let mut g_t = Tensor::zeros(ktensor.shape());
                for r in 0..kh {
                    for c in 0..kw {
                        let v = if *transposed {
                            g_eff[c * kh + r]
                        } else {
                            g_eff[r * kw + c]
                        };
                        g_t.data_mut()[r * kw + c] = v;
                    }
                }
                accumulate(&mut adj[kernel.0], GradValue::Tensor(g_t));
            }
            Op::Laplacian(a) => {
                let gf = expect_field(g)?;
                accumulate(
                    &mut adj[a.0],
                    GradValue::Field(adjoints::laplacian_adjoint(&gf)),
                );
            }
            Op::UpwindX { phi, positive } => {
                let gf = expect_field(g)?;
                accumulate(
                    &mut adj[phi.0],
                    GradValue::Field(adjoints::upwind_x_adjoint(&gf, positive)),
                );
            }
            Op::UpwindY { phi, positive } => {
                let gf = expect_field(g)?;
                accumulate(
                    &mut adj[phi.0],
                    GradValue::Field(adjoints::upwind_y_adjoint(&gf, positive)),
                );
            }
            Op::HelmholtzInterior { input, l_r } => {
                let gf = expect_field(g)?;
                accumulate(
                    &mut adj[input.0],
                    GradValue::Field(adjoints::helmholtz_interior_adjoint(&gf, *l_r)),
                );
            }
            Op::MaskInterior(a) => {
                let gf = expect_field(g)?;
                accumulate(&mut adj[a.0], GradValue::Field(gf.masked_interior()));
            }
            Op::Sum(a) => {
                let gs = expect_scalar(g)?;
                let fv = expect_field_value(value_of(*a))?;
                accumulate(
                    &mut adj[a.0],
                    GradValue::Field(Field2D::constant(fv.grid(), gs)),
                );
            }
            Op::Mean(a) => {
                let gs = expect_scalar(g)?;
                let fv = expect_field_value(value_of(*a))?;
                let inv_n = T::one() / lit::<T>(fv.grid().cells() as f64);
                accumulate(
                    &mut adj[a.0],
                    GradValue::Field(Field2D::constant(fv.grid(), gs * inv_n)),
                );
            }
            Op::SumSquares(a) => {
                let gs = expect_scalar(g)?;
                let tv = expect_tensor_value(value_of(*a))?;
                let two = lit::<T>(2.0);
                let mut gt = Tensor::zeros(tv.shape());
                for (o, &x) in gt.data_mut().iter_mut().zip(tv.data()) {
                    *o = two * gs * x;
                }
                accumulate(&mut adj[a.0], GradValue::Tensor(gt));
            }
            Op::AddS(a, b) => {
                let gs = expect_scalar(g)?;
                accumulate(&mut adj[a.0], GradValue::Scalar(gs));
                accumulate(&mut adj[b.0], GradValue::Scalar(gs));
            }
            Op::SubS(a, b) => {
                let gs = expect_scalar(g)?;
                accumulate(&mut adj[a.0], GradValue::Scalar(gs));
                accumulate(&mut adj[b.0], GradValue::Scalar(-gs));
            }
            Op::MulS(a, b) => {
                let gs = expect_scalar(g)?;
                let va = expect_scalar_value(value_of(*a))?;
                let vb = expect_scalar_value(value_of(*b))?;
                accumulate(&mut adj[a.0], GradValue::Scalar(gs * vb));
                accumulate(&mut adj[b.0], GradValue::Scalar(gs * va));
            }
            Op::DivS(a, b) => {
                let gs = expect_scalar(g)?;
                let va = expect_scalar_value(value_of(*a))?;
                let vb = expect_scalar_value(value_of(*b))?;
                accumulate(&mut adj[a.0], GradValue::Scalar(gs / vb));
                accumulate(&mut adj[b.0], GradValue::Scalar(-gs * va / (vb * vb)));
            }
            Op::ScaleS(a, c) => {
                let gs = expect_scalar(g)?;
                accumulate(&mut adj[a.0], GradValue::Scalar(gs * *c));
            }
            Op::FieldToStack { input, std, .. } => {
                let gst = expect_stack(g)?;
                let fv = expect_field_value(value_of(*input))?;
                let inv = T::one() / *std;
                let mut gf = Field2D::zeros(fv.grid());
                for (o, &v) in gf.values_mut().iter_mut().zip(gst.channel(0)) {
                    *o = v * inv;
                }
                accumulate(&mut adj[input.0], GradValue::Field(gf));
            }
            Op::ChannelToField { input, channel } => {
                let gf = expect_field(g)?;
                let sv = expect_stack_value(value_of(*input))?;
                let mut gs = ChannelStack::zeros(sv.channels(), sv.ny(), sv.nx());
                let n = sv.ny() * sv.nx();
                let base = channel * n;
                for (k, &v) in gf.values().iter().enumerate() {
                    gs.data_mut()[base + k] = v;
                }
                accumulate(&mut adj[input.0], GradValue::Stack(gs));
            }
            Op::Conv2d { input, weight } => {
                let gst = expect_stack(g)?;
                let iv = expect_stack_value(value_of(*input))?;
                let wv = expect_tensor_value(value_of(*weight))?;
                accumulate(
                    &mut adj[input.0],
                    GradValue::Stack(stack::conv2d_adjoint_input(
                        &gst,
                        (iv.channels(), iv.ny(), iv.nx()),
                        wv,
                    )),
                );
                accumulate(
                    &mut adj[weight.0],
                    GradValue::Tensor(stack::conv2d_adjoint_weight(&gst, iv, wv.shape())),
                );
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                eps,
                stats,
            } => {
                let gst = expect_stack(g)?;
                let iv = expect_stack_value(value_of(*input))?;
                let sv = expect_tensor_value(value_of(*scale))?;
                let (gi, gsc, gsh) = stack::batchnorm_backward(&gst, iv, sv, stats, *eps);
                accumulate(&mut adj[input.0], GradValue::Stack(gi));
                accumulate(&mut adj[scale.0], GradValue::Tensor(gsc));
                accumulate(&mut adj[shift.0], GradValue::Tensor(gsh));
            }
            Op::LeakyRelu { input, slope } => {
                let gst = expect_stack(g)?;
                let iv = expect_stack_value(value_of(*input))?;
                accumulate(
                    &mut adj[input.0],
                    GradValue::Stack(stack::leaky_relu_adjoint(&gst, iv, *slope)),
                );
            }
        }
        Ok(())
    }
}

/// Builds the stencil kernel a `ConvolveParam` node applies: the tensor's
/// 2x3 weights with anchor (0, 1), or their transpose, over `normalization`.
pub(crate) fn effective_kernel<T: Scalar>(
    t: &Tensor<T>,
    transposed: bool,
    normalization: T,
) -> Result<StencilKernel<T>> {
    if t.shape() != [2, 3] {
        return Err(Error::Dimension(format!(
            "gradient filter tensor must be 2x3, got {:?}",
            t.shape()
        )));
    }
    let base = StencilKernel::new(2, 3, 0, 1, t.data().to_vec(), T::one())?;
    Ok(if transposed {
        base.transposed().with_normalization(normalization)
    } else {
        base.with_normalization(normalization)
    })
}

fn accumulate<T: Scalar>(slot: &mut Option<GradValue<T>>, g: GradValue<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn expect_field<T: Scalar>(g: GradValue<T>) -> Result<Field2D<T>> {
    match g {
        GradValue::Field(f) => Ok(f),
        _ => Err(Error::Usage("expected a field gradient".into())),
    }
}

fn expect_scalar<T: Scalar>(g: GradValue<T>) -> Result<T> {
    match g {
        GradValue::Scalar(v) => Ok(v),
        _ => Err(Error::Usage("expected a scalar gradient".into())),
    }
}

fn expect_stack<T: Scalar>(g: GradValue<T>) -> Result<ChannelStack<T>> {
    match g {
        GradValue::Stack(s) => Ok(s),
        _ => Err(Error::Usage("expected a stack gradient".into())),
    }
}

fn expect_field_value<T: Scalar>(v: &Value<T>) -> Result<&Field2D<T>> {
    match v {
        Value::Field(f) => Ok(f),
        _ => Err(Error::Usage("expected a field value".into())),
    }
}

fn expect_scalar_value<T: Scalar>(v: &Value<T>) -> Result<T> {
    match v {
        Value::Scalar(s) => Ok(*s),
        _ => Err(Error::Usage("expected a scalar value".into())),
    }
}

fn expect_stack_value<T: Scalar>(v: &Value<T>) -> Result<&ChannelStack<T>> {
    match v {
        Value::Stack(s) => Ok(s),
        _ => Err(Error::Usage("expected a stack value".into())),
    }
}

fn expect_tensor_value<T: Scalar>(v: &Value<T>) -> Result<&Tensor<T>> {
    match v {
        Value::Tensor(t) => Ok(t),
        _ => Err(Error::Usage("expected a tensor value".into())),
    }
}
