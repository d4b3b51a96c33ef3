//! The denoising network: a small pre-norm transformer over the field
//! tokens whose attention queries are damped by each field's learned
//! log-difficulty.
//!
//! Row layout is schema order with the label last. Every field contributes
//! one row: its embedding (or sequence summary), the absorbing mask row when
//! the forward process masked it, plus its position embedding and the shared
//! timestep embedding. Query row `i` is scaled by `exp(−s^i/2)`; the label
//! row is pinned at coefficient 1 so CTR scoring never gets damped.

use ndarray::Array2;

use crate::diffusion::{FieldToken, TokenizedSample};
use crate::encode::encode_sequence;
use crate::error::{Error, Result};
use crate::params::{mask_row, Params};
use crate::schema::{DatasetSchema, FieldKind};
use crate::tape::{NodeId, Tape};

/// How attention queries are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnScaling {
    /// Row `i` scaled by `exp(−s^i/2)`, label row by 1. Gradients flow to `s`.
    Difficulty,
    /// All rows scaled by 1 (the attention mechanism ablated away).
    Unit,
}

/// Forward-pass handles kept for scoring and inspection.
pub struct DenoiseOutput {
    /// Final hidden states, `(N+1)×d`.
    pub h: NodeId,
    /// Context vectors `H·G`, `(N+1)×d`; row `i` scores field `i`.
    pub contexts: NodeId,
    /// Post-softmax attention matrices, one per block.
    pub attn_probs: Vec<NodeId>,
}

/// Number of denoiser blocks present in a parameter store.
pub fn n_layers(params: &Params) -> usize {
    (0..)
        .take_while(|l| params.contains(&format!("dn.l{l}.wq")))
        .count()
}

/// The `(N+1)×1` query coefficients: `exp(−s^i/2)` per feature field and a
/// fixed 1 for the label row.
pub fn attn_coeff(tape: &mut Tape, params: &Params, scaling: AttnScaling) -> NodeId {
    let n = params.get("s").nrows();
    match scaling {
        AttnScaling::Unit => tape.constant(Array2::ones((n + 1, 1))),
        AttnScaling::Difficulty => {
            let s = tape.param("s", params.get("s"));
            let half = tape.scale(s, -0.5);
            let coeff = tape.exp(half);
            let mut rows: Vec<NodeId> = (0..n).map(|i| tape.row(coeff, i)).collect();
            rows.push(tape.constant_scalar(1.0));
            tape.stack(rows)
        }
    }
}

/// One pre-norm attention block with difficulty-scaled queries. Returns the
/// residual output and the softmax attention matrix.
pub fn attention_block(
    tape: &mut Tape,
    params: &Params,
    layer: usize,
    h: NodeId,
    coeff: NodeId,
) -> (NodeId, NodeId) {
    let d = params.get(&format!("dn.l{layer}.wq")).nrows();
    let wq = tape.param(&format!("dn.l{layer}.wq"), params.get(&format!("dn.l{layer}.wq")));
    let wk = tape.param(&format!("dn.l{layer}.wk"), params.get(&format!("dn.l{layer}.wk")));
    let wv = tape.param(&format!("dn.l{layer}.wv"), params.get(&format!("dn.l{layer}.wv")));
    let wo = tape.param(&format!("dn.l{layer}.wo"), params.get(&format!("dn.l{layer}.wo")));
    let xn = tape.layer_norm_rows(h);
    let q = tape.matmul(xn, wq);
    let q_scaled = tape.row_scale(q, coeff);
    let k = tape.matmul(xn, wk);
    let v = tape.matmul(xn, wv);
    let scores = tape.matmul_bt(q_scaled, k);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = tape.softmax_rows(scaled);
    let mixed = tape.matmul(probs, v);
    let out = tape.matmul(mixed, wo);
    (tape.add(h, out), probs)
}

/// Pre-norm two-layer ReLU MLP with residual.
pub fn mlp_block(tape: &mut Tape, params: &Params, layer: usize, h: NodeId) -> NodeId {
    let w1 = tape.param(&format!("dn.l{layer}.w1"), params.get(&format!("dn.l{layer}.w1")));
    let b1 = tape.param(&format!("dn.l{layer}.b1"), params.get(&format!("dn.l{layer}.b1")));
    let w2 = tape.param(&format!("dn.l{layer}.w2"), params.get(&format!("dn.l{layer}.w2")));
    let b2 = tape.param(&format!("dn.l{layer}.b2"), params.get(&format!("dn.l{layer}.b2")));
    let xn = tape.layer_norm_rows(h);
    let z1 = tape.matmul(xn, w1);
    let z1b = tape.add_row(z1, b1);
    let a1 = tape.relu(z1b);
    let z2 = tape.matmul(a1, w2);
    let z2b = tape.add_row(z2, b2);
    tape.add(h, z2b)
}

/// Embedding row of field `i` for a (possibly masked) tokenized sample.
fn field_row(
    tape: &mut Tape,
    params: &Params,
    schema: &DatasetSchema,
    sample: &TokenizedSample,
    i: usize,
) -> Result<NodeId> {
    let spec = &schema.fields[i];
    let table_name = format!("emb.{}", spec.name);
    if sample.masked[i] {
        let table = tape.param(&table_name, params.get(&table_name));
        return Ok(tape.gather(table, vec![mask_row(spec.cardinality)]));
    }
    match &sample.tokens[i] {
        FieldToken::Token(t) => {
            if *t >= spec.cardinality {
                return Err(Error::Encode(format!(
                    "field `{}`: token {t} out of vocabulary {}",
                    spec.name, spec.cardinality
                )));
            }
            let table = tape.param(&table_name, params.get(&table_name));
            Ok(tape.gather(table, vec![*t]))
        }
        FieldToken::Seq(tokens) => {
            if spec.kind != FieldKind::Sequence {
                return Err(Error::Encode(format!(
                    "field `{}` is not a sequence field",
                    spec.name
                )));
            }
            encode_sequence(tape, params, &spec.name, spec.cardinality, tokens)
        }
    }
}

/// Full denoiser forward pass for one tokenized sample.
pub fn denoise_forward(
    tape: &mut Tape,
    params: &Params,
    schema: &DatasetSchema,
    sample: &TokenizedSample,
    scaling: AttnScaling,
) -> Result<DenoiseOutput> {
    let n_fields = schema.fields.len();
    if sample.tokens.len() != n_fields || sample.masked.len() != n_fields {
        return Err(Error::Encode("sample does not match schema field count".into()));
    }
    let rows: Vec<NodeId> = (0..n_fields)
        .map(|i| field_row(tape, params, schema, sample, i))
        .collect::<Result<_>>()?;
    let e = tape.stack(rows);
    let pos = tape.param("pos", params.get("pos"));
    let with_pos = tape.add(e, pos);
    let time = tape.param("time", params.get("time"));
    let t_row = tape.gather(time, vec![sample.t]);
    let mut h = tape.add_row(with_pos, t_row);

    let coeff = attn_coeff(tape, params, scaling);
    let mut attn_probs = Vec::new();
    for layer in 0..n_layers(params) {
        let (h_attn, probs) = attention_block(tape, params, layer, h, coeff);
        attn_probs.push(probs);
        h = mlp_block(tape, params, layer, h_attn);
    }
    let g = tape.param("head.g", params.get("head.g"));
    let contexts = tape.matmul(h, g);
    Ok(DenoiseOutput { h, contexts, attn_probs })
}

/// Log-probability of candidate `pos` under a cosine-similarity softmax:
/// `cos(ctx, c_pos) − log Σ_k exp cos(ctx, c_k)`.
///
/// `ctx` is a 1×d row; `candidates` a K×d matrix of candidate embeddings
/// (the true value plus negatives). Zero-norm rows are rejected.
pub fn field_logprob(
    tape: &mut Tape,
    ctx: NodeId,
    candidates: NodeId,
    pos: usize,
) -> Result<NodeId> {
    let nc = tape.try_normalize_rows(candidates)?;
    let nctx = tape.try_normalize_rows(ctx)?;
    let sims = tape.matmul_bt(nc, nctx);
    let lse = tape.log_sum_exp(sims);
    let target = tape.row(sims, pos);
    Ok(tape.sub(target, lse))
}

/// Reference scalar implementation of the candidate softmax log-probability
/// over precomputed similarities.
pub fn batch_softmax_logprob(sims: &[f64], pos: usize) -> f64 {
    let m = sims.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    let lse = m + sims.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    sims[pos] - lse
}
