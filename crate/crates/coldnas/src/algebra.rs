//! Executable canonicalization of modulation chains.
//!
//! Any chain over `{max, min, ⊙, /, +, −}` reduces to the four-op form
//! `min(max(h, φ̂¹), φ̂²) ⊙ φ̂³ + φ̂⁴` with absent ops skipped. The six ops
//! partition into groups `{max}`, `{min}`, `{+,−}`, `{⊙,/}`: runs inside a
//! group associate into one op, and adjacent ops from different groups
//! commute after substituting their parameter vectors. The canonicalizer
//! bubble-sorts the chain into the fixed group order with those swap rules
//! and records the accumulated φ̂ construction recipes; a numerical oracle
//! checks the equivalence pointwise.
//!
//! The swap rules that move ⊙ past max/min require the multiplicative
//! parameter to be elementwise non-negative; that is guaranteed upstream
//! by a ReLU on every slot feeding ⊙ or /.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::{CanonicalForm, CanonicalOp, ModulationExpr};
use crate::numerics::BinaryOpKind;

/// The four operation groups. Ops in one group associate; ops across
/// groups commute with a parameter substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpGroup {
    /// `{max}`
    G1,
    /// `{min}`
    G2,
    /// `{+, −}`
    G3,
    /// `{⊙, /}`
    G4,
}

/// Total partition of the operation set into the four groups.
pub fn group_of(op: BinaryOpKind) -> OpGroup {
    match op {
        BinaryOpKind::Max => OpGroup::G1,
        BinaryOpKind::Min => OpGroup::G2,
        BinaryOpKind::Add | BinaryOpKind::Sub => OpGroup::G3,
        BinaryOpKind::Mul | BinaryOpKind::Div => OpGroup::G4,
    }
}

impl OpGroup {
    /// Representative operation of the group.
    pub fn representative(self) -> CanonicalOp {
        match self {
            OpGroup::G1 => CanonicalOp::Max,
            OpGroup::G2 => CanonicalOp::Min,
            OpGroup::G3 => CanonicalOp::Add,
            OpGroup::G4 => CanonicalOp::Mul,
        }
    }
}

/// Position of a canonical op in the fixed application order.
fn sort_key(op: CanonicalOp) -> usize {
    op.index()
}

/// An arithmetic expression over the original parameter slots, used to
/// state how each φ̂ is built from φ¹..φᶜ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhiExpr {
    /// Original slot, 1-based.
    Slot(usize),
    Const(f64),
    Binary(BinaryOpKind, Box<PhiExpr>, Box<PhiExpr>),
}

impl PhiExpr {
    pub fn slot(k: usize) -> Self {
        PhiExpr::Slot(k)
    }

    pub fn bin(op: BinaryOpKind, a: PhiExpr, b: PhiExpr) -> Self {
        PhiExpr::Binary(op, Box::new(a), Box::new(b))
    }

    fn neg(self) -> Self {
        PhiExpr::bin(BinaryOpKind::Sub, PhiExpr::Const(0.0), self)
    }

    fn recip(self) -> Self {
        PhiExpr::bin(BinaryOpKind::Div, PhiExpr::Const(1.0), self)
    }

    /// Elementwise evaluation against concrete slot values, all of length
    /// `dim`.
    pub fn eval(&self, slots: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
        match self {
            PhiExpr::Slot(k) => slots
                .get(k - 1)
                .cloned()
                .ok_or_else(|| Error::Precondition(format!("recipe references missing slot {k}"))),
            PhiExpr::Const(c) => Ok(vec![*c; dim]),
            PhiExpr::Binary(op, a, b) => {
                let va = a.eval(slots, dim)?;
                let vb = b.eval(slots, dim)?;
                Ok(va
                    .iter()
                    .zip(&vb)
                    .map(|(&x, &y)| apply_op(*op, x, y))
                    .collect())
            }
        }
    }
}

impl fmt::Display for PhiExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhiExpr::Slot(k) => write!(f, "p{k}"),
            PhiExpr::Const(c) => write!(f, "{c}"),
            PhiExpr::Binary(op, a, b) => match op {
                BinaryOpKind::Max => write!(f, "max({a}, {b})"),
                BinaryOpKind::Min => write!(f, "min({a}, {b})"),
                _ => write!(f, "({a} {} {b})", op.symbol()),
            },
        }
    }
}

fn apply_op(op: BinaryOpKind, x: f64, y: f64) -> f64 {
    match op {
        BinaryOpKind::Max => x.max(y),
        BinaryOpKind::Min => x.min(y),
        BinaryOpKind::Mul => x * y,
        BinaryOpKind::Div => x / y,
        BinaryOpKind::Add => x + y,
        BinaryOpKind::Sub => x - y,
    }
}

/// Construction recipes for φ̂¹..φ̂⁴, indexed by canonical op; `None` for
/// absent ops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiHatRecipe {
    pub per_op: [Option<PhiExpr>; 4],
}

impl PhiHatRecipe {
    pub fn get(&self, op: CanonicalOp) -> Option<&PhiExpr> {
        self.per_op[op.index()].as_ref()
    }

    /// Evaluate all present recipes against concrete slot values.
    pub fn eval(&self, slots: &[Vec<f64>], dim: usize) -> Result<[Option<Vec<f64>>; 4]> {
        let mut out = [None, None, None, None];
        for (i, r) in self.per_op.iter().enumerate() {
            if let Some(e) = r {
                out[i] = Some(e.eval(slots, dim)?);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for PhiHatRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in CanonicalOp::ALL.into_iter().enumerate() {
            if let Some(e) = &self.per_op[i] {
                writeln!(f, "phi_hat^{} ({:?}) = {e}", i + 1, op)?;
            }
        }
        Ok(())
    }
}

/// A chain entry after reducing `−` and `/` to their group
/// representatives.
type ChainEntry = (CanonicalOp, PhiExpr);

/// Reduce one original step to its group representative:
/// `x − φ = x + (0 − φ)` and `x / φ = x ⊙ (1 / φ)`.
fn reduce(op: BinaryOpKind, phi: PhiExpr) -> ChainEntry {
    match op {
        BinaryOpKind::Sub => (CanonicalOp::Add, phi.neg()),
        BinaryOpKind::Div => (CanonicalOp::Mul, phi.recip()),
        BinaryOpKind::Max => (CanonicalOp::Max, phi),
        BinaryOpKind::Min => (CanonicalOp::Min, phi),
        BinaryOpKind::Add => (CanonicalOp::Add, phi),
        BinaryOpKind::Mul => (CanonicalOp::Mul, phi),
    }
}

/// Swap an adjacent cross-group pair: rewrites `x ∘ₐ a ∘ᵦ b` into
/// `x ∘ᵦ b' ∘ₐ a'` with substituted parameters. Covers all ordered pairs
/// of distinct group representatives.
fn swap_adjacent(a: ChainEntry, b: ChainEntry) -> (ChainEntry, ChainEntry) {
    use BinaryOpKind::{Add, Div, Max, Min, Mul, Sub};
    use CanonicalOp as C;
    let (op_a, pa) = a;
    let (op_b, pb) = b;
    match (op_a, op_b) {
        // max(x,a) then min b  ->  max(min(x,b), min(a,b))
        (C::Max, C::Min) => {
            let merged = PhiExpr::bin(Min, pa, pb.clone());
            ((C::Min, pb), (C::Max, merged))
        }
        // min(x,a) then max b  ->  min(max(x,b), max(a,b))
        (C::Min, C::Max) => {
            let merged = PhiExpr::bin(Max, pa, pb.clone());
            ((C::Max, pb), (C::Min, merged))
        }
        // max(x,a) ⊙ b  ->  max(x⊙b, a⊙b), b >= 0
        (C::Max, C::Mul) => {
            let merged = PhiExpr::bin(Mul, pa, pb.clone());
            ((C::Mul, pb), (C::Max, merged))
        }
        // (x⊙a) then max b  ->  max(x, b/a) ⊙ a, a >= 0
        (C::Mul, C::Max) => {
            let thresh = PhiExpr::bin(Div, pb, pa.clone());
            ((C::Max, thresh), (C::Mul, pa))
        }
        // max(x,a) + b  ->  max(x+b, a+b)
        (C::Max, C::Add) => {
            let merged = PhiExpr::bin(Add, pa, pb.clone());
            ((C::Add, pb), (C::Max, merged))
        }
        // (x+a) then max b  ->  max(x, b−a) + a
        (C::Add, C::Max) => {
            let thresh = PhiExpr::bin(Sub, pb, pa.clone());
            ((C::Max, thresh), (C::Add, pa))
        }
        // min(x,a) ⊙ b  ->  min(x⊙b, a⊙b), b >= 0
        (C::Min, C::Mul) => {
            let merged = PhiExpr::bin(Mul, pa, pb.clone());
            ((C::Mul, pb), (C::Min, merged))
        }
        // (x⊙a) then min b  ->  min(x, b/a) ⊙ a, a >= 0
        (C::Mul, C::Min) => {
            let thresh = PhiExpr::bin(Div, pb, pa.clone());
            ((C::Min, thresh), (C::Mul, pa))
        }
        // min(x,a) + b  ->  min(x+b, a+b)
        (C::Min, C::Add) => {
            let merged = PhiExpr::bin(Add, pa, pb.clone());
            ((C::Add, pb), (C::Min, merged))
        }
        // (x+a) then min b  ->  min(x, b−a) + a
        (C::Add, C::Min) => {
            let thresh = PhiExpr::bin(Sub, pb, pa.clone());
            ((C::Min, thresh), (C::Add, pa))
        }
        // (x⊙a) + b  ->  (x + b/a) ⊙ a
        (C::Mul, C::Add) => {
            let shifted = PhiExpr::bin(Div, pb, pa.clone());
            ((C::Add, shifted), (C::Mul, pa))
        }
        // (x+a) ⊙ b  ->  x⊙b + a⊙b
        (C::Add, C::Mul) => {
            let shifted = PhiExpr::bin(Mul, pa, pb.clone());
            ((C::Mul, pb), (C::Add, shifted))
        }
        _ => unreachable!("swap_adjacent called on a same-group pair"),
    }
}

/// The local rewrite rule for commuting an adjacent cross-group pair of
/// raw operations. `−` and `/` are reduced to their group representatives
/// before the swap.
pub struct SwapRule {
    op_a: BinaryOpKind,
    op_b: BinaryOpKind,
}

/// Look up the commutation rule for an ordered cross-group pair.
/// Same-group pairs are associated, not commuted, and are rejected.
pub fn rewrite_commute(op_a: BinaryOpKind, op_b: BinaryOpKind) -> Result<SwapRule> {
    if group_of(op_a) == group_of(op_b) {
        return Err(Error::Precondition(format!(
            "{op_a:?} and {op_b:?} are in the same group; use associate_group"
        )));
    }
    Ok(SwapRule { op_a, op_b })
}

impl SwapRule {
    /// Rewrite `x ∘ₐ φa ∘ᵦ φb` into the swapped order, returning the new
    /// (op, parameter recipe) pair sequence.
    pub fn apply(&self, phi_a: PhiExpr, phi_b: PhiExpr) -> (ChainEntry, ChainEntry) {
        let a = reduce(self.op_a, phi_a);
        let b = reduce(self.op_b, phi_b);
        swap_adjacent(a, b)
    }
}

/// Merge a run of same-group operations into the single group
/// representative with a combined recipe.
pub fn associate_group(ops: &[(BinaryOpKind, PhiExpr)]) -> Result<ChainEntry> {
    let Some((first_op, _)) = ops.first() else {
        return Err(Error::Precondition("empty operation run".into()));
    };
    let group = group_of(*first_op);
    if ops.iter().any(|(op, _)| group_of(*op) != group) {
        return Err(Error::Precondition("mixed groups in associate_group".into()));
    }
    let rep = group.representative();
    let mut acc: Option<PhiExpr> = None;
    for (op, phi) in ops {
        let (_, reduced) = reduce(*op, phi.clone());
        acc = Some(match acc {
            None => reduced,
            Some(prev) => PhiExpr::bin(rep.to_binary(), prev, reduced),
        });
    }
    Ok((rep, acc.unwrap()))
}

/// Canonicalize a chain of (op, recipe) steps. Adjacent cross-group pairs
/// are commuted until the chain is sorted into the fixed group order, then
/// each group run is associated.
pub fn canonicalize_chain(
    steps: Vec<(BinaryOpKind, PhiExpr)>,
) -> Result<(CanonicalForm, PhiHatRecipe)> {
    let mut chain: Vec<ChainEntry> = steps
        .into_iter()
        .map(|(op, phi)| reduce(op, phi))
        .collect();

    // Bubble toward the fixed order; each pass moves at least one op home,
    // so O(C²) swaps suffice.
    loop {
        let mut swapped = false;
        for i in 0..chain.len().saturating_sub(1) {
            if sort_key(chain[i].0) > sort_key(chain[i + 1].0) {
                let a = chain[i].clone();
                let b = chain[i + 1].clone();
                let (first, second) = swap_adjacent(a, b);
                chain[i] = first;
                chain[i + 1] = second;
                swapped = true;
            }
        }
        if !swapped {
            break;
        }
    }

    let mut form = CanonicalForm::empty();
    let mut recipe = PhiHatRecipe {
        per_op: [None, None, None, None],
    };
    let mut idx = 0;
    while idx < chain.len() {
        let op = chain[idx].0;
        let mut run = Vec::new();
        while idx < chain.len() && chain[idx].0 == op {
            run.push((op.to_binary(), chain[idx].1.clone()));
            idx += 1;
        }
        let (rep, merged) = associate_group(&run)?;
        form.set(rep, true);
        recipe.per_op[rep.index()] = Some(merged);
    }
    Ok((form, recipe))
}

/// Canonicalize an original-space expression, slot `k` entering as the
/// atomic recipe `φᵏ`.
pub fn canonicalize(expr: &ModulationExpr) -> Result<(CanonicalForm, PhiHatRecipe)> {
    canonicalize_chain(
        expr.steps()
            .iter()
            .map(|&(op, slot)| (op, PhiExpr::slot(slot)))
            .collect(),
    )
}

/// Sampling bounds for the equivalence oracle. Signed values cover
/// `[-signed_mag, signed_mag]`; slots that must be non-negative are drawn
/// from `[nonneg_lo, nonneg_hi]`, bounded away from zero so recipe
/// divisions stay well conditioned.
#[derive(Debug, Clone, Copy)]
pub struct OracleDomain {
    pub dim: usize,
    pub signed_mag: f64,
    pub nonneg_lo: f64,
    pub nonneg_hi: f64,
}

impl Default for OracleDomain {
    fn default() -> Self {
        OracleDomain {
            dim: 4,
            signed_mag: 3.0,
            nonneg_lo: 0.25,
            nonneg_hi: 4.0,
        }
    }
}

/// Evaluate an original chain on concrete values.
pub fn eval_expr_values(
    expr: &ModulationExpr,
    h: &[f64],
    slots: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut cur = h.to_vec();
    for &(op, slot) in expr.steps() {
        let phi = slots
            .get(slot - 1)
            .ok_or_else(|| Error::Precondition(format!("missing slot {slot}")))?;
        for (c, &p) in cur.iter_mut().zip(phi) {
            *c = apply_op(op, *c, p);
        }
    }
    Ok(cur)
}

/// Evaluate a canonical form on concrete values.
pub fn eval_canonical_values(
    cf: &CanonicalForm,
    h: &[f64],
    phi_hats: &[Option<Vec<f64>>; 4],
) -> Result<Vec<f64>> {
    let mut cur = h.to_vec();
    for op in cf.present_ops() {
        let phi = phi_hats[op.index()]
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("unbound canonical op {op:?}")))?;
        for (c, &p) in cur.iter_mut().zip(phi) {
            *c = apply_op(op.to_binary(), *c, p);
        }
    }
    Ok(cur)
}

/// Numerical oracle: sample random inputs respecting the non-negativity
/// condition, evaluate the original chain and the canonical form with the
/// recipe-built φ̂, and return the worst elementwise absolute deviation.
pub fn verify_equivalence(
    expr: &ModulationExpr,
    cf: &CanonicalForm,
    recipe: &PhiHatRecipe,
    trials: usize,
    rng_seed: u64,
) -> Result<f64> {
    verify_equivalence_in(expr, cf, recipe, trials, rng_seed, OracleDomain::default())
}

pub fn verify_equivalence_in(
    expr: &ModulationExpr,
    cf: &CanonicalForm,
    recipe: &PhiHatRecipe,
    trials: usize,
    rng_seed: u64,
    domain: OracleDomain,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Precondition("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let nonneg = expr.nonneg_slots();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let h: Vec<f64> = (0..domain.dim)
            .map(|_| rng.gen_range(-domain.signed_mag..domain.signed_mag))
            .collect();
        let slots: Vec<Vec<f64>> = (1..=expr.len())
            .map(|k| {
                (0..domain.dim)
                    .map(|_| {
                        if nonneg.contains(&k) {
                            rng.gen_range(domain.nonneg_lo..domain.nonneg_hi)
                        } else {
                            rng.gen_range(-domain.signed_mag..domain.signed_mag)
                        }
                    })
                    .collect()
            })
            .collect();
        let original = eval_expr_values(expr, &h, &slots)?;
        let phi_hats = recipe.eval(&slots, domain.dim)?;
        let canonical = eval_canonical_values(cf, &h, &phi_hats)?;
        for (i, (&o, &c)) in original.iter().zip(&canonical).enumerate() {
            if !o.is_finite() || !c.is_finite() {
                return Err(Error::NonFinite(format!(
                    "oracle trial produced non-finite values at coordinate {i}: \
                     original {o}, canonical {c}, h = {h:?}, slots = {slots:?}"
                )));
            }
            worst = worst.max((o - c).abs());
        }
    }
    Ok(worst)
}

/// Draw a random original-space expression with `C` operations.
pub fn random_expr(c: usize, rng: &mut impl Rng) -> ModulationExpr {
    let ops: Vec<BinaryOpKind> = (0..c)
        .map(|_| BinaryOpKind::ALL[rng.gen_range(0..6)])
        .collect();
    ModulationExpr::from_ops(&ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn group_partition() {
        assert_eq!(group_of(BinaryOpKind::Sub), OpGroup::G3);
        assert_eq!(group_of(BinaryOpKind::Div), OpGroup::G4);
        assert_eq!(group_of(BinaryOpKind::Max), OpGroup::G1);
        assert_eq!(group_of(BinaryOpKind::Min), OpGroup::G2);
        assert_eq!(group_of(BinaryOpKind::Add), OpGroup::G3);
        assert_eq!(group_of(BinaryOpKind::Mul), OpGroup::G4);
        // Disjoint cover: each op maps to exactly one group by totality of
        // the match; group sizes sum to six.
        let mut counts = std::collections::HashMap::new();
        for op in BinaryOpKind::ALL {
            *counts.entry(group_of(op)).or_insert(0) += 1;
        }
        assert_eq!(counts[&OpGroup::G1], 1);
        assert_eq!(counts[&OpGroup::G2], 1);
        assert_eq!(counts[&OpGroup::G3], 2);
        assert_eq!(counts[&OpGroup::G4], 2);
    }

    fn expr(ops: &[BinaryOpKind]) -> ModulationExpr {
        ModulationExpr::from_ops(ops)
    }

    #[test]
    fn remark_example_one() {
        // min(max(h, p1) + p2 - p3, p4) * p5
        use BinaryOpKind::*;
        let e = expr(&[Max, Add, Sub, Min, Mul]);
        let (cf, recipe) = canonicalize(&e).unwrap();
        assert_eq!(cf, CanonicalForm::full());
        let dev = verify_equivalence(&e, &cf, &recipe, 1000, 0xC01D).unwrap();
        assert!(dev < 1e-9, "max deviation {dev:e}");
    }

    #[test]
    fn remark_example_two() {
        // max(min(h + p1, p2), p3) * p4
        use BinaryOpKind::*;
        let e = expr(&[Add, Min, Max, Mul]);
        let (cf, recipe) = canonicalize(&e).unwrap();
        assert_eq!(cf, CanonicalForm::full());
        let dev = verify_equivalence(&e, &cf, &recipe, 1000, 0xC02D).unwrap();
        assert!(dev < 1e-9, "max deviation {dev:e}");
    }

    #[test]
    fn single_add_passthrough() {
        let e = expr(&[BinaryOpKind::Add]);
        let (cf, recipe) = canonicalize(&e).unwrap();
        assert!(cf.use_add && !cf.use_max && !cf.use_min && !cf.use_mul);
        assert_eq!(recipe.get(CanonicalOp::Add), Some(&PhiExpr::slot(1)));
    }

    #[test]
    fn rewrite_commute_max_add() {
        // max(x, p1) + p2 -> max(x + p2, p1 + p2)
        let rule = rewrite_commute(BinaryOpKind::Max, BinaryOpKind::Add).unwrap();
        let ((op1, r1), (op2, r2)) = rule.apply(PhiExpr::slot(1), PhiExpr::slot(2));
        assert_eq!(op1, CanonicalOp::Add);
        assert_eq!(r1, PhiExpr::slot(2));
        assert_eq!(op2, CanonicalOp::Max);
        assert_eq!(
            r2,
            PhiExpr::bin(BinaryOpKind::Add, PhiExpr::slot(1), PhiExpr::slot(2))
        );
    }

    #[test]
    fn rewrite_commute_same_group_rejected() {
        assert!(rewrite_commute(BinaryOpKind::Add, BinaryOpKind::Sub).is_err());
        assert!(rewrite_commute(BinaryOpKind::Mul, BinaryOpKind::Div).is_err());
    }

    #[test]
    fn rewrite_rules_all_cross_group_pairs_verified() {
        // Every ordered cross-group pair, as a two-op chain, must
        // canonicalize equivalently.
        for a in BinaryOpKind::ALL {
            for b in BinaryOpKind::ALL {
                if group_of(a) == group_of(b) {
                    continue;
                }
                let e = expr(&[a, b]);
                let (cf, recipe) = canonicalize(&e).unwrap();
                let dev = verify_equivalence(&e, &cf, &recipe, 300, 77).unwrap();
                assert!(dev < 1e-9, "{a:?},{b:?}: deviation {dev:e}");
            }
        }
    }

    #[test]
    fn associate_add_run() {
        use BinaryOpKind::*;
        // +p1 -p2 +p3 -> one add
        let run = [
            (Add, PhiExpr::slot(1)),
            (Sub, PhiExpr::slot(2)),
            (Add, PhiExpr::slot(3)),
        ];
        let (op, merged) = associate_group(&run).unwrap();
        assert_eq!(op, CanonicalOp::Add);
        let v = merged
            .eval(&[vec![1.0], vec![2.0], vec![5.0]], 1)
            .unwrap();
        assert_eq!(v, vec![4.0]);
    }

    #[test]
    fn associate_mul_div_run() {
        use BinaryOpKind::*;
        let run = [(Mul, PhiExpr::slot(1)), (Div, PhiExpr::slot(2))];
        let (op, merged) = associate_group(&run).unwrap();
        assert_eq!(op, CanonicalOp::Mul);
        let v = merged.eval(&[vec![6.0], vec![3.0]], 1).unwrap();
        assert_eq!(v, vec![2.0]);
    }

    #[test]
    fn associate_max_run() {
        use BinaryOpKind::*;
        let run = [(Max, PhiExpr::slot(1)), (Max, PhiExpr::slot(2))];
        let (op, merged) = associate_group(&run).unwrap();
        assert_eq!(op, CanonicalOp::Max);
        let v = merged.eval(&[vec![1.0, 7.0], vec![4.0, 2.0]], 2).unwrap();
        assert_eq!(v, vec![4.0, 7.0]);
    }

    #[test]
    fn associate_empty_run_rejected() {
        assert!(associate_group(&[]).is_err());
    }

    #[test]
    fn empty_expr_exact() {
        let e = ModulationExpr::identity();
        let (cf, recipe) = canonicalize(&e).unwrap();
        assert_eq!(cf, CanonicalForm::empty());
        let dev = verify_equivalence(&e, &cf, &recipe, 50, 1).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn corrupted_recipe_detected() {
        use BinaryOpKind::*;
        let e = expr(&[Max, Add, Sub, Min, Mul]);
        let (cf, mut recipe) = canonicalize(&e).unwrap();
        // Flip the sign of the additive recipe.
        let add = recipe.per_op[CanonicalOp::Add.index()].take().unwrap();
        recipe.per_op[CanonicalOp::Add.index()] = Some(add.neg());
        let dev = verify_equivalence(&e, &cf, &recipe, 200, 99).unwrap();
        assert!(dev > 0.1, "mutated recipe only deviated by {dev:e}");
    }

    #[test]
    fn idempotent_on_canonical_order() {
        use BinaryOpKind::*;
        let e = expr(&[Max, Min, Mul, Add]);
        let (cf, recipe) = canonicalize(&e).unwrap();
        assert_eq!(cf, CanonicalForm::full());
        for (i, op) in CanonicalOp::ALL.into_iter().enumerate() {
            assert_eq!(recipe.get(op), Some(&PhiExpr::slot(i + 1)));
        }
        let _ = cf;
    }

    #[test]
    fn permutation_invariance_all_orders() {
        // The four canonical ops applied in any order, with recipes
        // adjusted by the same rewrite rules, evaluate identically.
        let orders = permutations(&CanonicalOp::ALL);
        for order in orders {
            // Build the permuted chain where slot k is the op's own slot
            // under the reference numbering.
            let steps: Vec<(BinaryOpKind, PhiExpr)> = order
                .iter()
                .map(|op| (op.to_binary(), PhiExpr::slot(op.index() + 1)))
                .collect();
            let (cf, recipe) = canonicalize_chain(steps.clone()).unwrap();
            // Evaluate both on shared random samples.
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            for _ in 0..50 {
                let dim = 4;
                let h: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let slots: Vec<Vec<f64>> = (0..4)
                    .map(|k| {
                        (0..dim)
                            .map(|_| {
                                if k == CanonicalOp::Mul.index() {
                                    rng.gen_range(0.25..4.0)
                                } else {
                                    rng.gen_range(-3.0..3.0)
                                }
                            })
                            .collect()
                    })
                    .collect();
                // Direct evaluation of the permuted chain.
                let mut direct = h.clone();
                for (op, phi) in &steps {
                    let vals = phi.eval(&slots, dim).unwrap();
                    for (c, &p) in direct.iter_mut().zip(&vals) {
                        *c = apply_op(*op, *c, p);
                    }
                }
                let phi_hats = recipe.eval(&slots, dim).unwrap();
                let canon = eval_canonical_values(&cf, &h, &phi_hats).unwrap();
                for (a, b) in direct.iter().zip(&canon) {
                    assert!(
                        (a - b).abs() < 1e-9,
                        "order {order:?}: {a} vs {b}"
                    );
                }
            }
        }
    }

    fn permutations(ops: &[CanonicalOp; 4]) -> Vec<Vec<CanonicalOp>> {
        let mut out = Vec::new();
        let mut items = ops.to_vec();
        permute(&mut items, 0, &mut out);
        out
    }

    fn permute(items: &mut Vec<CanonicalOp>, k: usize, out: &mut Vec<Vec<CanonicalOp>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, out);
            items.swap(k, i);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn round_trip_random_chains(c in 0usize..=6, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_expr(c, &mut rng);
            let (cf, recipe) = canonicalize(&e).unwrap();
            prop_assert!(cf.num_ops() <= 4);
            let dev = verify_equivalence(&e, &cf, &recipe, 20, seed ^ 0xABCD).unwrap();
            prop_assert!(dev < 1e-9, "C={c} seed={seed}: deviation {dev:e}");
        }
    }
}
