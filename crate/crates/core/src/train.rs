//! The pretraining loop, CTR scoring through the label-as-field mechanism,
//! BCE fine-tuning, evaluation, and the ablation switchboard.
//!
//! Every random decision (timestep draw, masking, epoch shuffles, candidate
//! pools) comes from a stream derived from `(seed, tag, index)`, so a run is
//! a pure function of its config and checkpoint-resume is bit-exact without
//! serializing RNG state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoiser::{batch_softmax_logprob, denoise_forward, field_logprob, AttnScaling};
use crate::diffusion::{
    forward_mask, sample_timestep, tokenize, FieldToken, MaskMode, NoiseSchedule, TokenizedSample,
};
use crate::encode::{encode_sequence, fit_binner, CdfBinner};
use crate::error::{Error, Result};
use crate::metrics::{auc, logloss, spearman, stratified_auc, EvalReport};
use crate::params::{init_params, Params};
use crate::rng::derive_rng;
use crate::schema::{DatasetSchema, FieldKind, RawSample, RawValue};
use crate::tape::{NodeId, Tape};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Self-balancing loss and difficulty-scaled attention; `s` learns from
    /// both gradient paths.
    Full,
    /// Uniform loss weights, live attention scaling: `s` learns only through
    /// the attention path.
    Fix,
    /// Self-balancing loss, attention scaling pinned to 1: `s` learns only
    /// through the loss path.
    Std,
    /// Equal-weight baseline: `s` frozen at 0 everywhere.
    Uniform,
}

impl Variant {
    pub fn attn_scaling(self) -> AttnScaling {
        match self {
            Variant::Full | Variant::Fix => AttnScaling::Difficulty,
            Variant::Std | Variant::Uniform => AttnScaling::Unit,
        }
    }

    /// Whether the aggregate uses the self-balancing weights and regularizer.
    pub fn balanced_loss(self) -> bool {
        matches!(self, Variant::Full | Variant::Std)
    }

    /// Whether the optimizer updates `s` at all.
    pub fn updates_s(self) -> bool {
        self != Variant::Uniform
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Fix => "fix",
            Variant::Std => "std",
            Variant::Uniform => "uniform",
        }
    }
}

impl clap::ValueEnum for Variant {
    fn value_variants<'a>() -> &'a [Self] {
        &[Variant::Full, Variant::Fix, Variant::Std, Variant::Uniform]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "fix" => Ok(Variant::Fix),
            "std" => Ok(Variant::Std),
            "uniform" => Ok(Variant::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl clap::ValueEnum for OptimizerKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[OptimizerKind::Sgd, OptimizerKind::Adam]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }))
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Learning rate η, shared by θ and s.
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub t_max: usize,
    pub seed: u64,
    /// Decoupled L2 coefficient; never applied to s.
    pub l2: f64,
    /// Emit a TrainRecord every this many steps (1 = every step).
    pub log_interval: usize,
    pub d_model: usize,
    pub layers: usize,
    pub optimizer: OptimizerKind,
    /// Candidate pool size for evaluation-time reconstruction scoring.
    pub eval_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            lr: 0.05,
            batch_size: 32,
            pretrain_epochs: 3,
            finetune_epochs: 1,
            t_max: 100,
            seed: 0,
            l2: 0.0,
            log_interval: 1,
            d_model: 16,
            layers: 2,
            optimizer: OptimizerKind::Sgd,
            eval_pool: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.t_max == 0 || self.log_interval == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, t_max and log_interval must be positive".into(),
            ));
        }
        if self.d_model == 0 || self.layers == 0 || self.eval_pool == 0 {
            return Err(Error::InvalidArgument(
                "d_model, layers and eval_pool must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// First-moment / second-moment Adam state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

/// Everything a training run owns; serializes bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub schema: DatasetSchema,
    pub config: TrainConfig,
    pub params: Params,
    pub binners: Vec<Option<CdfBinner>>,
    pub schedule: NoiseSchedule,
    pub moments: Option<AdamMoments>,
    /// Pretraining step counter τ.
    pub step: u64,
    /// Accumulated (sum, count) of per-field losses during the first epoch.
    pub l0_sum: Vec<f64>,
    pub l0_count: Vec<usize>,
    /// Mean per-field loss over the first epoch, set once it completes.
    pub l0: Option<Vec<f64>>,
}

/// One emitted training log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub t: usize,
    pub loss: f64,
    pub label_loss: Option<f64>,
    /// Per feature field, `None` when the field had no masked occurrence.
    pub field_loss: Vec<Option<f64>>,
    pub s: Vec<f64>,
    /// Normalized difficulty d^i = ℓ^i / ℓ0^i, once ℓ0 is available.
    pub difficulty: Vec<Option<f64>>,
}

/// Fit binners and initialize parameters for a fresh run.
pub fn init_state(schema: &DatasetSchema, train: &[RawSample], config: &TrainConfig) -> Result<ModelState> {
    config.validate()?;
    schema.validate()?;
    let mut binners = Vec::with_capacity(schema.feature_count());
    for (i, spec) in schema.feature_fields().iter().enumerate() {
        if spec.kind == FieldKind::Numerical {
            let values: Vec<f64> = train
                .iter()
                .map(|s| match &s.values[i] {
                    RawValue::Real(v) => Ok(*v),
                    _ => Err(Error::Encode(format!("field `{}`: expected real value", spec.name))),
                })
                .collect::<Result<_>>()?;
            binners.push(Some(fit_binner(&spec.name, &values, spec.cardinality)?));
        } else {
            binners.push(None);
        }
    }
    let params = init_params(schema, config.d_model, config.t_max, config.layers, config.seed);
    let moments = match config.optimizer {
        OptimizerKind::Sgd => None,
        OptimizerKind::Adam => Some(AdamMoments {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }),
    };
    let n = schema.feature_count();
    Ok(ModelState {
        schema: schema.clone(),
        config: config.clone(),
        params,
        binners,
        schedule: NoiseSchedule::for_schema(schema, config.t_max),
        moments,
        step: 0,
        l0_sum: vec![0.0; n],
        l0_count: vec![0; n],
        l0: None,
    })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One optimizer update. Iteration order is the BTreeMap name order, so the
/// update is deterministic.
fn apply_update(state: &mut ModelState, mut grads: BTreeMap<String, Array2<f64>>, update_s: bool) {
    if !update_s {
        grads.remove("s");
    }
    let lr = state.config.lr;
    match state.config.optimizer {
        OptimizerKind::Sgd => {
            for (name, g) in &grads {
                let p = state.params.get_mut(name);
                *p -= &(g * lr);
            }
        }
        OptimizerKind::Adam => {
            let moments = state.moments.as_mut().expect("adam moments");
            moments.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(moments.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(moments.t as i32);
            for (name, g) in &grads {
                let m = moments.m.get_mut(name);
                *m *= ADAM_BETA1;
                *m += &(g * (1.0 - ADAM_BETA1));
                let v = moments.v.get_mut(name);
                *v *= ADAM_BETA2;
                *v += &(g.mapv(|x| x * x) * (1.0 - ADAM_BETA2));
                let m_hat = m.mapv(|x| x / bc1);
                let v_hat = v.mapv(|x| x / bc2);
                let p = state.params.get_mut(name);
                for ((pv, mv), vv) in p.iter_mut().zip(m_hat.iter()).zip(v_hat.iter()) {
                    *pv -= lr * mv / (vv.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    if state.config.l2 > 0.0 {
        let decay = lr * state.config.l2;
        for (name, p) in state.params.iter_mut() {
            if name != "s" {
                *p *= 1.0 - decay;
            }
        }
    }
}

/// Per-field loss graph handles built over one batch tape.
struct BatchLosses {
    field: Vec<Option<NodeId>>,
    label: Option<NodeId>,
}

/// Record per-field reconstruction losses of one masked batch on `tape`.
///
/// Candidates per token field are the batch's deduplicated (sorted) values;
/// per sequence field, all batch sequence summaries; the label scores against
/// both label embeddings.
fn batch_losses(
    tape: &mut Tape,
    params: &Params,
    schema: &DatasetSchema,
    batch: &[TokenizedSample],
    scaling: AttnScaling,
) -> Result<BatchLosses> {
    let outputs: Vec<_> = batch
        .iter()
        .map(|s| denoise_forward(tape, params, schema, s, scaling))
        .collect::<Result<Vec<_>>>()?;
    let n = schema.feature_count();
    let label_idx = schema.label_index();
    let mut field = Vec::with_capacity(n);
    for (i, spec) in schema.feature_fields().iter().enumerate() {
        let masked: Vec<usize> = (0..batch.len()).filter(|&j| batch[j].masked[i]).collect();
        if masked.is_empty() {
            field.push(None);
            continue;
        }
        let mut terms = Vec::with_capacity(masked.len());
        match spec.kind {
            FieldKind::Sequence => {
                let summaries: Vec<NodeId> = batch
                    .iter()
                    .map(|s| match &s.tokens[i] {
                        FieldToken::Seq(toks) => {
                            encode_sequence(tape, params, &spec.name, spec.cardinality, toks)
                        }
                        _ => Err(Error::Encode(format!("field `{}`: expected sequence", spec.name))),
                    })
                    .collect::<Result<_>>()?;
                let cands = tape.stack(summaries);
                for &j in &masked {
                    let ctx = tape.row(outputs[j].contexts, i);
                    let lp = field_logprob(tape, ctx, cands, j)?;
                    terms.push(tape.scale(lp, -1.0));
                }
            }
            _ => {
                let mut uniq: Vec<usize> = batch.iter().map(|s| s.tokens[i].token()).collect();
                uniq.sort_unstable();
                uniq.dedup();
                let table_name = format!("emb.{}", spec.name);
                let table = tape.param(&table_name, params.get(&table_name));
                let cands = tape.gather(table, uniq.clone());
                for &j in &masked {
                    let tok = batch[j].tokens[i].token();
                    let pos = uniq.binary_search(&tok).expect("token present");
                    let ctx = tape.row(outputs[j].contexts, i);
                    let lp = field_logprob(tape, ctx, cands, pos)?;
                    terms.push(tape.scale(lp, -1.0));
                }
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t);
        }
        field.push(Some(tape.scale(total, 1.0 / terms.len() as f64)));
    }

    let masked_labels: Vec<usize> = (0..batch.len())
        .filter(|&j| batch[j].masked[label_idx])
        .collect();
    let label = if masked_labels.is_empty() {
        None
    } else {
        let table = tape.param("emb.label", params.get("emb.label"));
        let cands = tape.gather(table, vec![0, 1]);
        let mut terms = Vec::with_capacity(masked_labels.len());
        for &j in &masked_labels {
            let ctx = tape.row(outputs[j].contexts, label_idx);
            let lp = field_logprob(tape, ctx, cands, batch[j].tokens[label_idx].token())?;
            terms.push(tape.scale(lp, -1.0));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t);
        }
        Some(tape.scale(total, 1.0 / terms.len() as f64))
    };
    Ok(BatchLosses { field, label })
}

/// Variant-appropriate scalar training objective assembled from per-field
/// losses: label term plus either the self-balancing sum or the plain sum.
fn aggregate_losses(
    tape: &mut Tape,
    params: &Params,
    variant: Variant,
    losses: &BatchLosses,
) -> Option<NodeId> {
    let mut total: Option<NodeId> = losses.label;
    if variant.balanced_loss() {
        let s_node = tape.param("s", params.get("s"));
        for (i, node) in losses.field.iter().enumerate() {
            if let Some(node) = node {
                let si = tape.row(s_node, i);
                let neg = tape.scale(si, -1.0);
                let w = tape.exp(neg);
                let weighted = tape.mul(w, *node);
                let reg = tape.scale(si, 0.5);
                let term = tape.add(weighted, reg);
                total = Some(match total {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
        }
    } else {
        for node in losses.field.iter().flatten() {
            total = Some(match total {
                Some(acc) => tape.add(acc, *node),
                None => *node,
            });
        }
    }
    total
}

/// The pretraining objective of one batch at the masking draw of `mask_step`,
/// together with analytic gradients for every parameter. Pure: neither the
/// parameters nor the optimizer state are touched, so repeated calls with
/// perturbed parameters evaluate the identical loss surface. Returns `None`
/// when the draw masks nothing.
pub fn pretrain_loss_grads(
    state: &ModelState,
    batch: &[RawSample],
    mask_step: u64,
) -> Result<Option<(f64, BTreeMap<String, Array2<f64>>)>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let seed = state.config.seed;
    let t = sample_timestep(&mut derive_rng(seed, "t", mask_step), state.config.t_max);
    let mut mask_rng = derive_rng(seed, "mask", mask_step);
    let tokenized: Vec<TokenizedSample> = batch
        .iter()
        .map(|s| {
            let tokens = tokenize(&state.schema, &state.binners, s)?;
            forward_mask(&tokens, &state.schedule, t, MaskMode::JointPretrain, &mut mask_rng)
        })
        .collect::<Result<_>>()?;
    let variant = state.config.variant;
    let mut tape = Tape::new();
    let losses = batch_losses(
        &mut tape,
        &state.params,
        &state.schema,
        &tokenized,
        variant.attn_scaling(),
    )?;
    let total = aggregate_losses(&mut tape, &state.params, variant, &losses);
    Ok(total.map(|root| {
        let value = tape.scalar_value(root);
        let grads = tape.backward(root);
        (value, tape.param_grads(&grads))
    }))
}

/// One pretraining step over a batch: mask, forward, aggregate per the
/// variant, backward, optimizer update. Returns the log row.
pub fn pretrain_step(state: &mut ModelState, batch: &[RawSample]) -> Result<TrainRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let seed = state.config.seed;
    let step = state.step;
    let t = sample_timestep(&mut derive_rng(seed, "t", step), state.config.t_max);
    let mut mask_rng = derive_rng(seed, "mask", step);
    let tokenized: Vec<TokenizedSample> = batch
        .iter()
        .map(|s| {
            let tokens = tokenize(&state.schema, &state.binners, s)?;
            forward_mask(&tokens, &state.schedule, t, MaskMode::JointPretrain, &mut mask_rng)
        })
        .collect::<Result<_>>()?;

    let variant = state.config.variant;
    let mut tape = Tape::new();
    let losses = batch_losses(
        &mut tape,
        &state.params,
        &state.schema,
        &tokenized,
        variant.attn_scaling(),
    )?;

    let field_vals: Vec<Option<f64>> = losses
        .field
        .iter()
        .map(|n| n.map(|id| tape.scalar_value(id)))
        .collect();
    let label_val = losses.label.map(|id| tape.scalar_value(id));
    for (i, v) in field_vals.iter().enumerate() {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    field: state.schema.fields[i].name.clone(),
                    step,
                });
            }
        }
    }
    if let Some(v) = label_val {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { field: "label".into(), step });
        }
    }

    let total = aggregate_losses(&mut tape, &state.params, variant, &losses);

    let loss_val = if let Some(root) = total {
        let loss_val = tape.scalar_value(root);
        let grads = tape.backward(root);
        let pg = tape.param_grads(&grads);
        apply_update(state, pg, variant.updates_s());
        loss_val
    } else {
        // nothing masked this step: no update, loss reported as 0
        0.0
    };

    if state.l0.is_none() {
        for (i, v) in field_vals.iter().enumerate() {
            if let Some(v) = v {
                state.l0_sum[i] += v;
                state.l0_count[i] += 1;
            }
        }
    }
    state.step += 1;

    let s: Vec<f64> = state.params.get("s").iter().copied().collect();
    let difficulty = match &state.l0 {
        Some(l0) => field_vals
            .iter()
            .zip(l0)
            .map(|(v, &l0)| v.and_then(|v| (l0 > 0.0).then(|| v / l0)))
            .collect(),
        None => vec![None; field_vals.len()],
    };
    Ok(TrainRecord {
        step,
        t,
        loss: loss_val,
        label_loss: label_val,
        field_loss: field_vals,
        s,
        difficulty,
    })
}

/// Finalize ℓ0 as the mean per-field loss over the first epoch.
pub fn finalize_l0(state: &mut ModelState) {
    if state.l0.is_some() {
        return;
    }
    let l0 = state
        .l0_sum
        .iter()
        .zip(&state.l0_count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    state.l0 = Some(l0);
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// The CTR logit `cos(e_{y=1}, ctx) − cos(e_{y=0}, ctx)` with all features
/// unmasked, the label masked and the timestep fixed at 1.
pub fn ctr_logit(state: &ModelState, sample: &RawSample) -> Result<f64> {
    let tokens = tokenize(&state.schema, &state.binners, sample)?;
    let mut rng = derive_rng(0, "score", 0); // unused by ScoreLabel
    let ts = forward_mask(&tokens, &state.schedule, 1, MaskMode::ScoreLabel, &mut rng)?;
    let mut tape = Tape::new();
    let out = denoise_forward(
        &mut tape,
        &state.params,
        &state.schema,
        &ts,
        state.config.variant.attn_scaling(),
    )?;
    let ctx = tape.row(out.contexts, state.schema.label_index());
    let table = tape.param("emb.label", state.params.get("emb.label"));
    let cands = tape.gather(table, vec![0, 1]);
    let nc = tape.try_normalize_rows(cands)?;
    let nx = tape.try_normalize_rows(ctx)?;
    let sims = tape.matmul_bt(nc, nx);
    let v = tape.value(sims);
    Ok(v[(1, 0)] - v[(0, 0)])
}

/// `p(y=1)` for a feature vector: sigmoid of [`ctr_logit`].
pub fn ctr_score(state: &ModelState, sample: &RawSample) -> Result<f64> {
    Ok(sigmoid(ctr_logit(state, sample)?))
}

/// One fine-tuning step: mean BCE over the batch on the CTR logit. `s` stays
/// frozen; binners and schema are untouched.
pub fn finetune_step(state: &mut ModelState, batch: &[RawSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut rng = derive_rng(0, "score", 0);
    let mut terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let tokens = tokenize(&state.schema, &state.binners, sample)?;
        let ts = forward_mask(&tokens, &state.schedule, 1, MaskMode::ScoreLabel, &mut rng)?;
        let out = denoise_forward(
            &mut tape,
            &state.params,
            &state.schema,
            &ts,
            state.config.variant.attn_scaling(),
        )?;
        let ctx = tape.row(out.contexts, state.schema.label_index());
        let table = tape.param("emb.label", state.params.get("emb.label"));
        let cands = tape.gather(table, vec![0, 1]);
        let nc = tape.try_normalize_rows(cands)?;
        let nx = tape.try_normalize_rows(ctx)?;
        let sims = tape.matmul_bt(nc, nx);
        let pos = tape.row(sims, 1);
        let negv = tape.row(sims, 0);
        let z = tape.sub(pos, negv);
        terms.push(tape.bce_logit(z, sample.label as f64));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    let mean = tape.scale(total, 1.0 / terms.len() as f64);
    let loss = tape.scalar_value(mean);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { field: "label".into(), step: state.step });
    }
    let grads = tape.backward(mean);
    let pg = tape.param_grads(&grads);
    apply_update(state, pg, false);
    Ok(loss)
}

/// Accuracy and mean loss of reconstructing one field over an eval set,
/// against a fixed candidate pool drawn once per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldEval {
    pub accuracy: f64,
    pub mean_loss: f64,
}

fn single_field_mask(tokens: &[FieldToken], field: usize) -> TokenizedSample {
    let mut masked = vec![false; tokens.len()];
    masked[field] = true;
    TokenizedSample { tokens: tokens.to_vec(), masked, t: 1 }
}

/// Evaluate reconstruction of feature field `field` on `samples`.
///
/// Token fields score the true value against a fixed pool of distinct tokens
/// (the whole vocabulary when it fits in `pool_size`); sequence fields score
/// the sample's own sequence summary against summaries of pool samples.
pub fn eval_field(
    state: &ModelState,
    samples: &[RawSample],
    field: usize,
    pool_size: usize,
    eval_seed: u64,
) -> Result<FieldEval> {
    if pool_size == 0 {
        return Err(Error::InvalidArgument("empty candidate pool".into()));
    }
    let spec = &state.schema.fields[field];
    if !spec.kind.is_feature() {
        return Err(Error::InvalidArgument("label is not scored by eval_field".into()));
    }
    let mut rng = derive_rng(eval_seed, "pool", field as u64);
    let scaling = state.config.variant.attn_scaling();

    // precompute candidate representations once
    let (pool_tokens, pool_vectors): (Vec<usize>, Vec<Array2<f64>>) = match spec.kind {
        FieldKind::Sequence => {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(pool_size);
            let vecs = idx
                .iter()
                .map(|&j| match &samples[j].values[field] {
                    RawValue::Seq(toks) => {
                        let mut tape = Tape::new();
                        let node =
                            encode_sequence(&mut tape, &state.params, &spec.name, spec.cardinality, toks)?;
                        Ok(tape.value(node).clone())
                    }
                    _ => Err(Error::Encode(format!("field `{}`: expected sequence", spec.name))),
                })
                .collect::<Result<Vec<_>>>()?;
            (idx, vecs)
        }
        _ => {
            let v = spec.cardinality;
            let toks: Vec<usize> = if v <= pool_size {
                (0..v).collect()
            } else {
                let mut all: Vec<usize> = (0..v).collect();
                all.shuffle(&mut rng);
                all.truncate(pool_size);
                all
            };
            let table = state.params.get(&format!("emb.{}", spec.name));
            let vecs = toks
                .iter()
                .map(|&t| table.row(t).to_owned().insert_axis(ndarray::Axis(0)))
                .collect();
            (toks, vecs)
        }
    };

    let cos = |a: &Array2<f64>, b: &Array2<f64>| -> Result<f64> {
        let na = a.row(0).dot(&a.row(0)).sqrt();
        let nb = b.row(0).dot(&b.row(0)).sqrt();
        if na <= 0.0 || nb <= 0.0 {
            return Err(Error::InvalidArgument("zero-norm vector in cosine similarity".into()));
        }
        Ok(a.row(0).dot(&b.row(0)) / (na * nb))
    };

    let mut hits = 0usize;
    let mut loss = 0.0;
    for (si, sample) in samples.iter().enumerate() {
        let tokens = tokenize(&state.schema, &state.binners, sample)?;
        let ts = single_field_mask(&tokens, field);
        let mut tape = Tape::new();
        let out = denoise_forward(&mut tape, &state.params, &state.schema, &ts, scaling)?;
        let ctx = tape.value(out.contexts).row(field).to_owned().insert_axis(ndarray::Axis(0));
        // similarity list: the true value first, then pool entries that
        // differ from it
        let mut sims = Vec::with_capacity(pool_vectors.len() + 1);
        match spec.kind {
            FieldKind::Sequence => {
                let own = match &sample.values[field] {
                    RawValue::Seq(toks) => {
                        let mut t2 = Tape::new();
                        let node =
                            encode_sequence(&mut t2, &state.params, &spec.name, spec.cardinality, toks)?;
                        t2.value(node).clone()
                    }
                    _ => unreachable!("checked above"),
                };
                sims.push(cos(&own, &ctx)?);
                for (&j, v) in pool_tokens.iter().zip(&pool_vectors) {
                    if j != si {
                        sims.push(cos(v, &ctx)?);
                    }
                }
            }
            _ => {
                let true_tok = tokens[field].token();
                let table = state.params.get(&format!("emb.{}", spec.name));
                let own = table.row(true_tok).to_owned().insert_axis(ndarray::Axis(0));
                sims.push(cos(&own, &ctx)?);
                for (&t, v) in pool_tokens.iter().zip(&pool_vectors) {
                    if t != true_tok {
                        sims.push(cos(v, &ctx)?);
                    }
                }
            }
        }
        let best = sims
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite sims"))
            .map(|(i, _)| i)
            .unwrap();
        hits += usize::from(best == 0);
        loss -= batch_softmax_logprob(&sims, 0);
    }
    Ok(FieldEval {
        accuracy: hits as f64 / samples.len() as f64,
        mean_loss: loss / samples.len() as f64,
    })
}

/// Cold/medium/active strata keys by per-user sample count in the training
/// split, computed over the first id field (thresholds <10 / 10–100 / >100).
/// Schemas without an id field fall back to a single stratum.
pub fn user_strata(schema: &DatasetSchema, train: &[RawSample], eval: &[RawSample]) -> Vec<String> {
    let id_field = schema
        .feature_fields()
        .iter()
        .position(|f| f.kind == FieldKind::Id);
    let Some(i) = id_field else {
        return vec!["all".to_string(); eval.len()];
    };
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in train {
        if let RawValue::Token(t) = &s.values[i] {
            *counts.entry(*t).or_insert(0) += 1;
        }
    }
    eval.iter()
        .map(|s| {
            let c = match &s.values[i] {
                RawValue::Token(t) => *counts.get(t).unwrap_or(&0),
                _ => 0,
            };
            if c < 10 {
                "cold"
            } else if c <= 100 {
                "medium"
            } else {
                "active"
            }
            .to_string()
        })
        .collect()
}

/// Full held-out evaluation: AUC/LogLoss of CTR scores, per-field
/// reconstruction accuracy, the rank correlation between exp(−s) and 1/ℓ,
/// and stratified AUC.
///
/// `train_losses`, when given, are the final per-field training losses used
/// for the Spearman diagnostic (the equilibrium relation is stated against
/// the training loss); otherwise eval-pool losses stand in, whose candidate
/// counts differ per field.
pub fn evaluate(
    state: &ModelState,
    test: &[RawSample],
    strata: &[String],
    train_losses: Option<&[f64]>,
) -> Result<(EvalReport, Vec<String>)> {
    let scores: Vec<f64> = test
        .iter()
        .map(|s| ctr_score(state, s))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    let auc_v = auc(&scores, &labels)?;
    let logloss_v = logloss(&scores, &labels)?;
    let n = state.schema.feature_count();
    let mut recon = Vec::with_capacity(n);
    let mut field_losses = Vec::with_capacity(n);
    for i in 0..n {
        let fe = eval_field(state, test, i, state.config.eval_pool, state.config.seed)?;
        recon.push(fe.accuracy);
        field_losses.push(fe.mean_loss);
    }
    let weights: Vec<f64> = state.params.get("s").iter().map(|&s| (-s).exp()).collect();
    let reference = train_losses.unwrap_or(&field_losses);
    let inv_losses: Vec<f64> = reference.iter().map(|&l| 1.0 / l.max(1e-12)).collect();
    let spearman_v = if n >= 2 {
        spearman(&weights, &inv_losses).unwrap_or(0.0)
    } else {
        0.0
    };
    let (strata_auc, omitted) = stratified_auc(&scores, &labels, strata)?;
    Ok((
        EvalReport {
            auc: auc_v,
            logloss: logloss_v,
            per_field_recon_acc: recon,
            spearman_s_vs_invloss: spearman_v,
            strata_auc,
        },
        omitted,
    ))
}

// --- checkpointing ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_hash: String,
    state: ModelState,
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        schema_hash: state.schema.hash(),
        state: state.clone(),
    };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

/// Load a checkpoint, validating its stored schema hash (and, when given,
/// that it matches the dataset schema at hand).
pub fn load_checkpoint(path: &Path, expect_schema: Option<&DatasetSchema>) -> Result<ModelState> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ck.schema_hash != ck.state.schema.hash() {
        return Err(Error::Checkpoint("schema hash does not match checkpoint contents".into()));
    }
    if let Some(schema) = expect_schema {
        if schema.hash() != ck.schema_hash {
            return Err(Error::Checkpoint("checkpoint was trained on a different schema".into()));
        }
    }
    Ok(ck.state)
}

// --- experiment driver ------------------------------------------------------

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    n_samples.div_ceil(batch_size)
}

fn epoch_order(n: usize, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, tag, epoch as u64));
    order
}

/// Run (or resume) pretraining up to `epochs` full epochs over `train`.
/// Batch composition is a pure function of (seed, epoch), so resuming from a
/// checkpoint continues the exact same stream.
pub fn pretrain(state: &mut ModelState, train: &[RawSample], epochs: usize) -> Result<Vec<TrainRecord>> {
    let bs = state.config.batch_size;
    let spe = steps_per_epoch(train.len(), bs);
    let total = (spe * epochs) as u64;
    let mut records = Vec::new();
    while state.step < total {
        let step = state.step as usize;
        let epoch = step / spe;
        let pos = step % spe;
        let order = epoch_order(train.len(), state.config.seed, "shuffle", epoch);
        let lo = pos * bs;
        let hi = (lo + bs).min(train.len());
        let batch: Vec<RawSample> = order[lo..hi].iter().map(|&i| train[i].clone()).collect();
        let record = pretrain_step(state, &batch)?;
        if record.step % state.config.log_interval as u64 == 0 {
            records.push(record);
        }
        if state.step as usize == spe {
            finalize_l0(state);
        }
    }
    Ok(records)
}

/// Fine-tune for the configured number of epochs. Returns per-step losses.
pub fn finetune(state: &mut ModelState, train: &[RawSample], epochs: usize) -> Result<Vec<f64>> {
    let bs = state.config.batch_size;
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let order = epoch_order(train.len(), state.config.seed, "ft-shuffle", epoch);
        for chunk in order.chunks(bs) {
            let batch: Vec<RawSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            losses.push(finetune_step(state, &batch)?);
        }
    }
    Ok(losses)
}

/// Deterministic 80/20 split (leading 80% trains).
pub fn split_dataset(samples: &[RawSample]) -> (&[RawSample], &[RawSample]) {
    let cut = samples.len() * 4 / 5;
    samples.split_at(cut)
}

/// Mean per-field loss over the last pretraining epoch's records; `None`
/// when no record of that epoch carries a field's loss.
pub fn final_epoch_losses(
    records: &[TrainRecord],
    spe: usize,
    epochs: usize,
) -> Option<Vec<f64>> {
    if epochs == 0 {
        return None;
    }
    let start = (spe * (epochs - 1)) as u64;
    let last: Vec<&TrainRecord> = records.iter().filter(|r| r.step >= start).collect();
    let n = last.first()?.field_loss.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let vals: Vec<f64> = last.iter().filter_map(|r| r.field_loss[i]).collect();
        if vals.is_empty() {
            return None;
        }
        out.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    Some(out)
}

pub struct ExperimentArtifacts {
    pub state: ModelState,
    pub records: Vec<TrainRecord>,
    pub report: EvalReport,
    pub omitted_strata: Vec<String>,
}

/// Serialize TrainRecord rows to CSV (empty cells for absent fields).
pub fn trainlog_csv(schema: &DatasetSchema, records: &[TrainRecord]) -> String {
    let mut out = String::from("step,t,loss,label_loss");
    for f in schema.feature_fields() {
        let n = &f.name;
        write!(out, ",loss_{n},s_{n},w_{n},d_{n}").unwrap();
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        write!(out, "{},{},{},{}", r.step, r.t, r.loss, opt(r.label_loss)).unwrap();
        for i in 0..r.s.len() {
            write!(
                out,
                ",{},{},{},{}",
                opt(r.field_loss[i]),
                r.s[i],
                (-r.s[i]).exp(),
                opt(r.difficulty[i])
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// The full two-stage pipeline: split, pretrain, checkpoint, fine-tune,
/// evaluate. Writes `checkpoint.json`, `trainlog.csv` and `report.json` when
/// an output directory is given.
pub fn run_experiment(
    schema: &DatasetSchema,
    samples: &[RawSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentArtifacts> {
    let (train, test) = split_dataset(samples);
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("dataset too small to split".into()));
    }
    let mut state = init_state(schema, train, config)?;
    let records = pretrain(&mut state, train, config.pretrain_epochs)?;
    finalize_l0(&mut state);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        save_checkpoint(&state, &dir.join("checkpoint.json"))?;
        fs::write(dir.join("trainlog.csv"), trainlog_csv(schema, &records))?;
    }
    finetune(&mut state, train, config.finetune_epochs)?;
    let strata = user_strata(schema, train, test);
    let final_losses = final_epoch_losses(
        &records,
        steps_per_epoch(train.len(), config.batch_size),
        config.pretrain_epochs,
    );
    let (report, omitted_strata) = evaluate(&state, test, &strata, final_losses.as_deref())?;
    if let Some(dir) = out_dir {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(ExperimentArtifacts { state, records, report, omitted_strata })
}
