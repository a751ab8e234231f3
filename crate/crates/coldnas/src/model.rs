//! The recommendation model: per-field embeddings, an adaptation network
//! that turns a user's support set into modulation parameter vectors, and
//! a modulated MLP predictor.
//!
//! The adaptation network embeds each support interaction together with
//! its rating, pools across the set with a mean (so it is invariant to
//! support ordering), and emits one parameter vector per (layer, op)
//! slot. The predictor applies a modulation expression to its input at
//! every layer before the affine map. Modulation comes in two flavours: a
//! fixed per-layer canonical form, or a relaxed supernet that blends all
//! four ops with trainable weights.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, Interaction, Task};
use crate::error::{Error, Result};
use crate::modulation::{
    eval_canonical, supernet_layer, CanonicalOp, ModulationAssignment, SupernetAlphas,
};
use crate::numerics::{Graph, NodeId, Tensor};

/// Current on-disk checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width per categorical field.
    pub emb_dim: usize,
    /// Hidden width of the adaptation network.
    pub adapt_hidden: usize,
    /// Predictor layer output widths; the last must be 1.
    pub widths: Vec<usize>,
}

impl ModelConfig {
    /// Full-size configuration used for real datasets.
    pub fn full() -> Self {
        ModelConfig {
            emb_dim: 48,
            adapt_hidden: 1024,
            widths: vec![128, 64, 32, 1],
        }
    }

    /// Small configuration for tests and synthetic experiments.
    pub fn small() -> Self {
        ModelConfig {
            emb_dim: 4,
            adapt_hidden: 16,
            widths: vec![12, 8, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.adapt_hidden == 0 {
            return Err(Error::Precondition("model widths must be positive".into()));
        }
        if self.widths.last() != Some(&1) {
            return Err(Error::Precondition(
                "final predictor width must be 1".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Precondition("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// How the predictor is modulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModulationPlan {
    /// A fixed canonical form per layer (possibly empty).
    Fixed(ModulationAssignment),
    /// The relaxed supernet: every layer blends all four ops, with one
    /// trainable blend weight per (layer, op), constrained to `[0, 1]`.
    Supernet,
}

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub entries: Vec<Param>,
}

impl ParamStore {
    fn push(&mut self, name: &str, value: Tensor) {
        debug_assert!(self.index_of(name).is_none(), "duplicate param {name}");
        self.entries.push(Param {
            name: name.to_string(),
            value,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.index_of(name).expect("unknown param")].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index_of(name).expect("unknown param");
        &mut self.entries[i].value
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-graph handles to the parameters, in store order.
pub struct Binding {
    ids: Vec<NodeId>,
    by_name: HashMap<String, NodeId>,
}

impl Binding {
    fn from_ids(store: &ParamStore, ids: Vec<NodeId>) -> Self {
        let by_name = store
            .entries
            .iter()
            .zip(&ids)
            .map(|(p, &id)| (p.name.clone(), id))
            .collect();
        Binding { ids, by_name }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.by_name[name]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// The complete model: schema-derived layout plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: DatasetSchema,
    pub plan: ModulationPlan,
    pub params: ParamStore,
    /// Input width of each predictor layer; `layer_inputs[0]` is the
    /// width of the concatenated feature vector plus a constant 1.
    pub layer_inputs: Vec<usize>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        schema: &DatasetSchema,
        plan: ModulationPlan,
        rng_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if let ModulationPlan::Fixed(a) = &plan {
            if a.layers.len() != config.widths.len() {
                return Err(Error::Precondition(format!(
                    "assignment covers {} layers but predictor has {}",
                    a.layers.len(),
                    config.widths.len()
                )));
            }
        }
        let h0 = config.emb_dim * schema.num_fields() + 1;
        let mut layer_inputs = vec![h0];
        for &w in &config.widths[..config.widths.len() - 1] {
            layer_inputs.push(w);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Tensor {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::matrix(rows, cols, data).expect("sized data")
        };

        let mut params = ParamStore::default();
        for (f, &card) in schema.user_field_cards.iter().enumerate() {
            // Row 0 of every table is the reserved unknown value.
            params.push(
                &format!("emb_user_{f}"),
                uniform(card + 1, config.emb_dim, &mut rng),
            );
        }
        for (f, &card) in schema.item_field_cards.iter().enumerate() {
            params.push(
                &format!("emb_item_{f}"),
                uniform(card + 1, config.emb_dim, &mut rng),
            );
        }
        // Adaptation input is [user | item | rating]: same width as h0
        // with the rating in place of the constant.
        params.push("adapt_w1", uniform(config.adapt_hidden, h0, &mut rng));
        params.push("adapt_b1", Tensor::zeros(vec![config.adapt_hidden]));
        let slot_total: usize = layer_inputs.iter().sum();
        params.push(
            "adapt_w2",
            uniform(4 * slot_total, config.adapt_hidden, &mut rng),
        );
        // Bias the parameter bank so the scale and shift modulations start
        // as pass-throughs (scale by one, shift by zero): they then only
        // depart from identity when doing so reduces the loss, which keeps
        // the blend weights of unused ops unbiased instead of dragging
        // them along while the network unlearns a destructive random
        // modulation. The clipping thresholds start at zero, the centre of
        // the feature distribution: a floor or ceiling parked outside the
        // distribution would receive no gradient at all and could never
        // learn, while at zero it clips real activations and is pulled
        // toward either a useful threshold or a harmless extreme.
        let mut b2 = vec![0.0; 4 * slot_total];
        let mut base = 0;
        for &width in &layer_inputs {
            let mul = base + CanonicalOp::Mul.index() * width;
            b2[mul..mul + width].fill(1.0);
            base += 4 * width;
        }
        params.push("adapt_b2", Tensor::vector(b2));
        for (l, &w) in config.widths.iter().enumerate() {
            params.push(&format!("pred_w{l}"), uniform(w, layer_inputs[l], &mut rng));
            params.push(&format!("pred_b{l}"), Tensor::zeros(vec![w]));
        }
        if plan == ModulationPlan::Supernet {
            for l in 0..config.widths.len() {
                params.push(&format!("alpha_{l}"), Tensor::vector(vec![0.5; 4]));
            }
        }
        Ok(Model {
            config,
            schema: schema.clone(),
            plan,
            params,
            layer_inputs,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.widths.len()
    }

    pub fn slot_total(&self) -> usize {
        self.layer_inputs.iter().sum()
    }

    /// Closed-form parameter count; checked against the store in tests.
    pub fn expected_param_count(
        config: &ModelConfig,
        schema: &DatasetSchema,
        supernet: bool,
    ) -> usize {
        let h0 = config.emb_dim * schema.num_fields() + 1;
        let emb: usize = schema
            .user_field_cards
            .iter()
            .chain(&schema.item_field_cards)
            .map(|&c| (c + 1) * config.emb_dim)
            .sum();
        let mut slot_total = h0;
        for &w in &config.widths[..config.widths.len() - 1] {
            slot_total += w;
        }
        let adapt = config.adapt_hidden * h0
            + config.adapt_hidden
            + 4 * slot_total * config.adapt_hidden
            + 4 * slot_total;
        let mut pred = 0;
        let mut fan_in = h0;
        for &w in &config.widths {
            pred += w * fan_in + w;
            fan_in = w;
        }
        let alphas = if supernet { 4 * config.widths.len() } else { 0 };
        emb + adapt + pred + alphas
    }

    /// Register every parameter as a leaf in `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        let ids = self
            .params
            .entries
            .iter()
            .map(|p| graph.leaf(p.value.clone()))
            .collect();
        Binding::from_ids(&self.params, ids)
    }

    /// Build a binding from externally created leaves (one per parameter,
    /// in store order). Used by gradient checks.
    pub fn bind_external(&self, ids: &[NodeId]) -> Result<Binding> {
        if ids.len() != self.params.entries.len() {
            return Err(Error::Precondition(format!(
                "expected {} leaves, got {}",
                self.params.entries.len(),
                ids.len()
            )));
        }
        Ok(Binding::from_ids(&self.params, ids.to_vec()))
    }

    fn check_features(&self, i: &Interaction) -> Result<()> {
        let ok = i.user_features.len() == self.schema.user_field_cards.len()
            && i.item_features.len() == self.schema.item_field_cards.len()
            && i
                .user_features
                .iter()
                .zip(&self.schema.user_field_cards)
                .all(|(&f, &c)| f <= c)
            && i
                .item_features
                .iter()
                .zip(&self.schema.item_field_cards)
                .all(|(&f, &c)| f <= c);
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "interaction ({}, {}) does not fit the schema",
                i.user_id, i.item_id
            )))
        }
    }

    /// Concatenated user and item embedding for one interaction.
    fn embed(&self, g: &mut Graph, b: &Binding, i: &Interaction) -> Result<NodeId> {
        self.check_features(i)?;
        let mut parts = Vec::new();
        for (f, &idx) in i.user_features.iter().enumerate() {
            parts.push(g.row(b.id(&format!("emb_user_{f}")), idx)?);
        }
        for (f, &idx) in i.item_features.iter().enumerate() {
            parts.push(g.row(b.id(&format!("emb_item_{f}")), idx)?);
        }
        g.concat(&parts)
    }

    /// Run the adaptation network on a support set: one flat vector of
    /// length `4 * slot_total` holding every (layer, op) parameter vector.
    pub fn adapt(&self, g: &mut Graph, b: &Binding, support: &[Interaction]) -> Result<NodeId> {
        if support.is_empty() {
            return Err(Error::Precondition("empty support set".into()));
        }
        let mut reps = Vec::new();
        for i in support {
            let ev = self.embed(g, b, i)?;
            let y = g.constant(Tensor::scalar(self.schema.normalize(i.rating)));
            let x = g.concat(&[ev, y])?;
            let pre = g.matmul(b.id("adapt_w1"), x)?;
            let pre = g.binary(crate::numerics::BinaryOpKind::Add, pre, b.id("adapt_b1"))?;
            reps.push(g.relu(pre));
        }
        let pooled = g.mean_rows(&reps)?;
        let out = g.matmul(b.id("adapt_w2"), pooled)?;
        g.binary(crate::numerics::BinaryOpKind::Add, out, b.id("adapt_b2"))
    }

    /// Extract the parameter vector for `(layer, op)` from the flat
    /// adaptation output. Slots feeding ⊙ are rectified so modulation
    /// never flips signs or divides by a negative.
    fn slot(&self, g: &mut Graph, flat: NodeId, layer: usize, op: CanonicalOp) -> Result<NodeId> {
        let mut offset = 0;
        for &w in &self.layer_inputs[..layer] {
            offset += 4 * w;
        }
        offset += op.index() * self.layer_inputs[layer];
        let s = g.slice(flat, offset, self.layer_inputs[layer])?;
        Ok(if op.to_binary().needs_nonneg_rhs() {
            g.relu(s)
        } else {
            s
        })
    }

    /// Predict the normalized rating for one query interaction, given the
    /// flat adaptation output for its user.
    pub fn predict_one(
        &self,
        g: &mut Graph,
        b: &Binding,
        flat: NodeId,
        query: &Interaction,
    ) -> Result<NodeId> {
        let ev = self.embed(g, b, query)?;
        let one = g.constant(Tensor::scalar(1.0));
        let mut h = g.concat(&[ev, one])?;
        for l in 0..self.num_layers() {
            let modulated = match &self.plan {
                ModulationPlan::Fixed(assignment) => {
                    let cf = assignment.layers[l];
                    let mut phis: [Option<NodeId>; 4] = [None; 4];
                    for op in cf.present_ops() {
                        phis[op.index()] = Some(self.slot(g, flat, l, op)?);
                    }
                    eval_canonical(g, &cf, h, &phis)?
                }
                ModulationPlan::Supernet => {
                    let mut phis = [NodeId::default(); 4];
                    let mut alphas = [NodeId::default(); 4];
                    let alpha_vec = b.id(&format!("alpha_{l}"));
                    for op in CanonicalOp::ALL {
                        phis[op.index()] = self.slot(g, flat, l, op)?;
                        alphas[op.index()] = g.slice(alpha_vec, op.index(), 1)?;
                    }
                    supernet_layer(g, h, &phis, &alphas)?
                }
            };
            let pre = g.matmul(b.id(&format!("pred_w{l}")), modulated)?;
            h = g.binary(
                crate::numerics::BinaryOpKind::Add,
                pre,
                b.id(&format!("pred_b{l}")),
            )?;
            if l + 1 < self.num_layers() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Mean squared error over one task's query set, as a scalar node.
    pub fn task_loss(&self, g: &mut Graph, b: &Binding, task: &Task) -> Result<NodeId> {
        let flat = self.adapt(g, b, &task.support)?;
        let mut errs = Vec::new();
        for q in &task.query {
            let pred = self.predict_one(g, b, flat, q)?;
            let y = g.constant(Tensor::scalar(self.schema.normalize(q.rating)));
            let diff = g.binary(crate::numerics::BinaryOpKind::Sub, pred, y)?;
            errs.push(g.binary(crate::numerics::BinaryOpKind::Mul, diff, diff)?);
        }
        let all = g.concat(&errs)?;
        Ok(g.mean(all))
    }

    /// Mean of per-task losses over a batch, as a scalar node.
    pub fn batch_loss(&self, g: &mut Graph, b: &Binding, tasks: &[Task]) -> Result<NodeId> {
        if tasks.is_empty() {
            return Err(Error::Precondition("empty task batch".into()));
        }
        let mut losses = Vec::new();
        for t in tasks {
            losses.push(self.task_loss(g, b, t)?);
        }
        let all = g.concat(&losses)?;
        Ok(g.mean(all))
    }

    /// Normalized predictions for a task's query items (no gradients).
    pub fn predict_task(&self, task: &Task) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let flat = self.adapt(&mut g, &b, &task.support)?;
        let mut out = Vec::with_capacity(task.query.len());
        for q in &task.query {
            let p = self.predict_one(&mut g, &b, flat, q)?;
            out.push(g.value(p).item());
        }
        Ok(out)
    }

    /// Current supernet blend weights.
    pub fn alphas(&self) -> Result<SupernetAlphas> {
        if self.plan != ModulationPlan::Supernet {
            return Err(Error::Precondition(
                "model has no supernet blend weights".into(),
            ));
        }
        let per_layer = (0..self.num_layers())
            .map(|l| {
                let v = self.params.get(&format!("alpha_{l}"));
                [v.data()[0], v.data()[1], v.data()[2], v.data()[3]]
            })
            .collect();
        Ok(SupernetAlphas { per_layer })
    }

    /// Save a versioned checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            schema_hash: self.schema.hash(),
            schema: self.schema.clone(),
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self
                .params
                .entries
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
        Ok(())
    }

    /// Load a checkpoint, validating the format version, the schema hash,
    /// and every parameter name and shape against a freshly laid-out
    /// model.
    pub fn load(path: &Path, schema: &DatasetSchema) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint version {} != supported {}",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        if ckpt.schema_hash != schema.hash() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint was trained on schema {} but data has {}",
                &ckpt.schema_hash[..12],
                &schema.hash()[..12]
            )));
        }
        let mut model = Model::new(ckpt.config, schema, ckpt.plan, 0)?;
        if ckpt.params.len() != model.params.entries.len() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint has {} params, model expects {}",
                ckpt.params.len(),
                model.params.entries.len()
            )));
        }
        for (rec, slot) in ckpt.params.into_iter().zip(&mut model.params.entries) {
            if rec.name != slot.name || rec.shape != slot.value.shape() {
                return Err(Error::SchemaMismatch(format!(
                    "param {} with shape {:?} does not match expected {} {:?}",
                    rec.name,
                    rec.shape,
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = Tensor::new(rec.shape, rec.data)?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    schema_hash: String,
    schema: DatasetSchema,
    config: ModelConfig,
    plan: ModulationPlan,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}
