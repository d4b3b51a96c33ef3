//! Type-specific field encoders.
//!
//! Numerical values are discretized by their empirical CDF into `B` quantile
//! bins; id/categorical/label values are embedding-table lookups; behavioral
//! sequences pass through a one-block self-attention encoder with mean
//! pooling and a final linear projection. All encoder arithmetic is recorded
//! on the [`Tape`](crate::tape::Tape) so gradients are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{pad_row, Params};
use crate::schema::{DatasetSchema, FieldKind, RawSample, RawValue};
use crate::tape::{NodeId, Tape};

/// Empirical-CDF quantile binner for one numerical field.
///
/// `bin(v) = min(⌊B·F̂(v)⌋, B−1)` with `F̂(v) = #{training values ≤ v} / n`
/// (right-continuous tie convention). Out-of-range values clamp to the edge
/// bins through the same formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfBinner {
    pub field: String,
    pub bins: usize,
    sorted: Vec<f64>,
}

impl CdfBinner {
    pub fn bin(&self, v: f64) -> usize {
        let le = self.sorted.partition_point(|&x| x <= v);
        let f = le as f64 / self.sorted.len() as f64;
        ((self.bins as f64 * f).floor() as usize).min(self.bins - 1)
    }
}

/// Fit a binner on training values.
pub fn fit_binner(field: &str, values: &[f64], bins: usize) -> Result<CdfBinner> {
    if values.is_empty() {
        return Err(Error::Encode(format!("binner for `{field}`: empty training values")));
    }
    if bins < 2 {
        return Err(Error::Encode(format!("binner for `{field}`: bins must be >= 2")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite training values"));
    Ok(CdfBinner {
        field: field.to_string(),
        bins,
        sorted,
    })
}

/// Encode a token sequence into a single d-vector: one self-attention block
/// over item embeddings, mean pooling, final linear projection. An empty
/// sequence runs the dedicated padding token through the same path.
pub fn encode_sequence(
    tape: &mut Tape,
    params: &Params,
    field_name: &str,
    cardinality: usize,
    tokens: &[usize],
) -> Result<NodeId> {
    let table_name = format!("emb.{field_name}");
    let table = params.get(&table_name);
    let d = table.ncols();
    let indices: Vec<usize> = if tokens.is_empty() {
        vec![pad_row(cardinality)]
    } else {
        for &t in tokens {
            if t >= cardinality {
                return Err(Error::Encode(format!(
                    "sequence field `{field_name}`: token {t} out of vocabulary {cardinality}"
                )));
            }
        }
        tokens.to_vec()
    };
    let table_node = tape.param(&table_name, table);
    let e = tape.gather(table_node, indices);
    let wq = tape.param(&format!("seq.{field_name}.wq"), params.get(&format!("seq.{field_name}.wq")));
    let wk = tape.param(&format!("seq.{field_name}.wk"), params.get(&format!("seq.{field_name}.wk")));
    let wv = tape.param(&format!("seq.{field_name}.wv"), params.get(&format!("seq.{field_name}.wv")));
    let wo = tape.param(&format!("seq.{field_name}.wo"), params.get(&format!("seq.{field_name}.wo")));
    let wpool = tape.param(
        &format!("seq.{field_name}.wpool"),
        params.get(&format!("seq.{field_name}.wpool")),
    );
    let q = tape.matmul(e, wq);
    let k = tape.matmul(e, wk);
    let v = tape.matmul(e, wv);
    let scores = tape.matmul_bt(q, k);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, v);
    let out = tape.matmul(mixed, wo);
    let pooled = tape.mean_rows(out);
    Ok(tape.matmul(pooled, wpool))
}

/// Embed one raw feature field of a sample, dispatching on its kind.
pub fn embed_field(
    tape: &mut Tape,
    params: &Params,
    schema: &DatasetSchema,
    binners: &[Option<CdfBinner>],
    sample: &RawSample,
    field_index: usize,
) -> Result<NodeId> {
    let spec = &schema.fields[field_index];
    let value = &sample.values[field_index];
    match (spec.kind, value) {
        (FieldKind::Id | FieldKind::Categorical, RawValue::Token(t)) => {
            if *t >= spec.cardinality {
                return Err(Error::Encode(format!(
                    "field `{}`: token {t} out of vocabulary {}",
                    spec.name, spec.cardinality
                )));
            }
            let name = format!("emb.{}", spec.name);
            let table = tape.param(&name, params.get(&name));
            Ok(tape.gather(table, vec![*t]))
        }
        (FieldKind::Numerical, RawValue::Real(v)) => {
            let binner = binners[field_index].as_ref().ok_or_else(|| {
                Error::Encode(format!("field `{}`: no fitted binner", spec.name))
            })?;
            let bin = binner.bin(*v);
            let name = format!("emb.{}", spec.name);
            let table = tape.param(&name, params.get(&name));
            Ok(tape.gather(table, vec![bin]))
        }
        (FieldKind::Sequence, RawValue::Seq(tokens)) => {
            encode_sequence(tape, params, &spec.name, spec.cardinality, tokens)
        }
        (kind, _) => Err(Error::Encode(format!(
            "field `{}`: value does not match kind {kind:?}",
            spec.name
        ))),
    }
}
