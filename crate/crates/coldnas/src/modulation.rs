//! Modulation structures: original operation chains, the canonical
//! four-operation form, and the soft-mixed supernet layer.
//!
//! A modulation function transforms a predictor hidden state `h` with
//! user-specific parameter vectors. The original space is any chain
//! `h ∘ φ¹ ∘ φ² ⋯ ∘ φᶜ` over the six elementwise ops; every such chain is
//! expressible as `min(max(h, φ̂¹), φ̂²) ⊙ φ̂³ + φ̂⁴` with some ops absent
//! (see [`crate::algebra`]), so the search only has to decide presence of
//! four ops per layer.

use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

pub use crate::numerics::BinaryOpKind;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// The four canonical operations, in their fixed application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CanonicalOp {
    Max,
    Min,
    Mul,
    Add,
}

impl CanonicalOp {
    pub const ALL: [CanonicalOp; 4] = [
        CanonicalOp::Max,
        CanonicalOp::Min,
        CanonicalOp::Mul,
        CanonicalOp::Add,
    ];

    pub fn index(self) -> usize {
        match self {
            CanonicalOp::Max => 0,
            CanonicalOp::Min => 1,
            CanonicalOp::Mul => 2,
            CanonicalOp::Add => 3,
        }
    }

    pub fn to_binary(self) -> BinaryOpKind {
        match self {
            CanonicalOp::Max => BinaryOpKind::Max,
            CanonicalOp::Min => BinaryOpKind::Min,
            CanonicalOp::Mul => BinaryOpKind::Mul,
            CanonicalOp::Add => BinaryOpKind::Add,
        }
    }
}

/// An original-space operation chain `h ∘₁ φ¹ ∘₂ φ² ⋯`, applied left to
/// right. Slot `k` is bound at position `k` (1-based, contiguous).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulationExpr {
    steps: Vec<(BinaryOpKind, usize)>,
}

impl ModulationExpr {
    /// The identity chain (`C = 0`).
    pub fn identity() -> Self {
        ModulationExpr { steps: Vec::new() }
    }

    pub fn new(steps: Vec<(BinaryOpKind, usize)>) -> Result<Self> {
        for (pos, &(_, slot)) in steps.iter().enumerate() {
            if slot != pos + 1 {
                return Err(Error::Precondition(format!(
                    "slot indices must be contiguous from 1, got slot {slot} at position {}",
                    pos + 1
                )));
            }
        }
        Ok(ModulationExpr { steps })
    }

    /// Build from an op sequence, numbering slots 1..=C.
    pub fn from_ops(ops: &[BinaryOpKind]) -> Self {
        ModulationExpr {
            steps: ops.iter().enumerate().map(|(i, &op)| (op, i + 1)).collect(),
        }
    }

    pub fn steps(&self) -> &[(BinaryOpKind, usize)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Slots whose values must be elementwise non-negative (inputs of ⊙ or /).
    pub fn nonneg_slots(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|(op, _)| op.needs_nonneg_rhs())
            .map(|&(_, slot)| slot)
            .collect()
    }
}

impl fmt::Display for ModulationExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::from("h");
        for &(op, slot) in &self.steps {
            s = match op {
                BinaryOpKind::Max => format!("max({s}, p{slot})"),
                BinaryOpKind::Min => format!("min({s}, p{slot})"),
                BinaryOpKind::Mul => format!("({s}) * p{slot}"),
                BinaryOpKind::Div => format!("({s}) / p{slot}"),
                BinaryOpKind::Add => format!("({s}) + p{slot}"),
                BinaryOpKind::Sub => format!("({s}) - p{slot}"),
            };
        }
        f.write_str(&s)
    }
}

/// Presence flags for the canonical form
/// `min(max(h, φ̂¹), φ̂²) ⊙ φ̂³ + φ̂⁴`, applied in that fixed order with
/// absent ops skipped. Present ops bind slots contiguously in op order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalForm {
    pub use_max: bool,
    pub use_min: bool,
    pub use_mul: bool,
    pub use_add: bool,
}

impl CanonicalForm {
    pub fn empty() -> Self {
        CanonicalForm::default()
    }

    pub fn full() -> Self {
        CanonicalForm {
            use_max: true,
            use_min: true,
            use_mul: true,
            use_add: true,
        }
    }

    /// FiLM: `h ⊙ φ̂³ + φ̂⁴`.
    pub fn film() -> Self {
        CanonicalForm {
            use_max: false,
            use_min: false,
            use_mul: true,
            use_add: true,
        }
    }

    pub fn uses(&self, op: CanonicalOp) -> bool {
        match op {
            CanonicalOp::Max => self.use_max,
            CanonicalOp::Min => self.use_min,
            CanonicalOp::Mul => self.use_mul,
            CanonicalOp::Add => self.use_add,
        }
    }

    pub fn set(&mut self, op: CanonicalOp, present: bool) {
        match op {
            CanonicalOp::Max => self.use_max = present,
            CanonicalOp::Min => self.use_min = present,
            CanonicalOp::Mul => self.use_mul = present,
            CanonicalOp::Add => self.use_add = present,
        }
    }

    /// Present ops in the fixed application order.
    pub fn present_ops(&self) -> Vec<CanonicalOp> {
        CanonicalOp::ALL
            .into_iter()
            .filter(|&op| self.uses(op))
            .collect()
    }

    pub fn num_ops(&self) -> usize {
        self.present_ops().len()
    }

    /// The equivalent original-space chain over the present ops.
    pub fn as_expr(&self) -> ModulationExpr {
        ModulationExpr::from_ops(
            &self
                .present_ops()
                .iter()
                .map(|op| op.to_binary())
                .collect::<Vec<_>>(),
        )
    }
}

/// One canonical form per predictor layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulationAssignment {
    pub layers: Vec<CanonicalForm>,
}

impl ModulationAssignment {
    pub fn empty(num_layers: usize) -> Self {
        ModulationAssignment {
            layers: vec![CanonicalForm::empty(); num_layers],
        }
    }

    /// FiLM at every layer (the fixed-modulation baseline).
    pub fn film_everywhere(num_layers: usize) -> Self {
        ModulationAssignment {
            layers: vec![CanonicalForm::film(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total operation count across layers.
    pub fn total_ops(&self) -> usize {
        self.layers.iter().map(|l| l.num_ops()).sum()
    }
}

impl fmt::Display for ModulationAssignment {
    /// Human-readable structure, one layer per line, e.g.
    /// `M^0 = min(max(h^0, phi^{0,1}), phi^{0,2}) + phi^{0,3}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, cf) in self.layers.iter().enumerate() {
            let mut s = format!("h^{l}");
            let mut slot = 0;
            for op in cf.present_ops() {
                slot += 1;
                let phi = format!("phi^{{{l},{slot}}}");
                s = match op {
                    CanonicalOp::Max => format!("max({s}, {phi})"),
                    CanonicalOp::Min => format!("min({s}, {phi})"),
                    CanonicalOp::Mul => {
                        if slot == 1 {
                            format!("{s} * {phi}")
                        } else {
                            format!("({s}) * {phi}")
                        }
                    }
                    CanonicalOp::Add => format!("{s} + {phi}"),
                };
            }
            writeln!(f, "M^{l} = {s}")?;
        }
        Ok(())
    }
}

/// Architecture mixing weights: one scalar per (layer, canonical op).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetAlphas {
    pub per_layer: Vec<[f64; 4]>,
}

impl SupernetAlphas {
    pub fn init(num_layers: usize, value: f64) -> Self {
        SupernetAlphas {
            per_layer: vec![[value; 4]; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    /// Flattened (layer, op, value) triples, 4·L of them.
    pub fn flatten(&self) -> Vec<(usize, CanonicalOp, f64)> {
        self.per_layer
            .iter()
            .enumerate()
            .flat_map(|(l, row)| {
                CanonicalOp::ALL
                    .into_iter()
                    .map(move |op| (l, op, row[op.index()]))
            })
            .collect()
    }
}

/// Evaluate an original-space chain on the graph. `phis[k-1]` binds slot `k`.
pub fn eval_expr(
    graph: &mut Graph,
    expr: &ModulationExpr,
    h: NodeId,
    phis: &[NodeId],
) -> Result<NodeId> {
    let mut cur = h;
    for &(op, slot) in expr.steps() {
        let phi = *phis.get(slot - 1).ok_or_else(|| {
            Error::Precondition(format!("missing parameter vector for slot {slot}"))
        })?;
        cur = graph.binary(op, cur, phi)?;
    }
    Ok(cur)
}

/// Evaluate a canonical form. `phis[op.index()]` binds the op's slot; absent
/// ops may be `None`.
pub fn eval_canonical(
    graph: &mut Graph,
    cf: &CanonicalForm,
    h: NodeId,
    phis: &[Option<NodeId>; 4],
) -> Result<NodeId> {
    let mut cur = h;
    for op in cf.present_ops() {
        let phi = phis[op.index()].ok_or_else(|| {
            Error::Precondition(format!("canonical op {op:?} present but slot unbound"))
        })?;
        cur = graph.binary(op.to_binary(), cur, phi)?;
    }
    Ok(cur)
}

/// One supernet layer: four chained mixes
/// `ĥᵏ⁺¹ = αᵏ⁺¹ (ĥᵏ ∘ₖ₊₁ φᵏ⁺¹) + (1 − αᵏ⁺¹) ĥᵏ` over the canonical op
/// order, starting from `ĥ⁰ = h`. `alphas[k]` are scalar nodes so the mix
/// is differentiable in `α` as well.
pub fn supernet_layer(
    graph: &mut Graph,
    h: NodeId,
    phis: &[NodeId; 4],
    alphas: &[NodeId; 4],
) -> Result<NodeId> {
    let one = graph.constant(Tensor::scalar(1.0));
    let mut cur = h;
    for (k, op) in CanonicalOp::ALL.into_iter().enumerate() {
        let applied = graph.binary(op.to_binary(), cur, phis[k])?;
        let scaled = graph.scale(applied, alphas[k])?;
        let complement = graph.binary(BinaryOpKind::Sub, one, alphas[k])?;
        let kept = graph.scale(cur, complement)?;
        cur = graph.binary(BinaryOpKind::Add, scaled, kept)?;
    }
    Ok(cur)
}

/// Original vs transformed space sizes and their ratio: `6^(C·L)`,
/// `2^(4·L)`, and original/transformed as a float.
pub fn space_size(c: u32, l: u32) -> (BigUint, BigUint, f64) {
    let original = BigUint::from(6u32).pow(c * l);
    let transformed = BigUint::from(2u32).pow(4 * l);
    let ratio = 6f64.powi((c * l) as i32) / 2f64.powi((4 * l) as i32);
    (original, transformed, ratio)
}

/// Keep the K largest α values jointly over all (layer, op) pairs. Ties
/// break toward the lower layer, then the fixed op order max < min < ⊙ < +.
pub fn select_topk(alphas: &SupernetAlphas, k: usize) -> Result<ModulationAssignment> {
    let total = 4 * alphas.num_layers();
    if k == 0 || k > total {
        return Err(Error::Precondition(format!(
            "K must be in 1..={total}, got {k}"
        )));
    }
    let mut flat = alphas.flatten();
    flat.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.index().cmp(&b.1.index()))
    });
    let mut assignment = ModulationAssignment::empty(alphas.num_layers());
    for &(layer, op, _) in flat.iter().take(k) {
        assignment.layers[layer].set(op, true);
    }
    Ok(assignment)
}
