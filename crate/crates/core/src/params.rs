//! The flat parameter store shared by the encoders, the denoiser and the
//! optimizer.
//!
//! All tensors live in one ordered name -> matrix map so that optimizer
//! updates, gradient accumulation and checkpoint serialization all iterate
//! in the same deterministic order.
//!
//! Naming convention:
//! - `emb.<field>`        embedding table; last row is the absorbing mask
//!   token, sequence tables carry one further padding row
//! - `seq.<field>.*`      sequence-encoder projections (`wq,wk,wv,wo,wpool`)
//! - `dn.l<j>.*`          denoiser block `j` (`wq,wk,wv,wo,w1,b1,w2,b2`)
//! - `pos`, `time`        field-position and timestep embeddings
//! - `head.g`             scoring head
//! - `s`                  per-field log-difficulty vector (N×1)

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::derive_rng;
use crate::schema::{DatasetSchema, FieldKind};

pub const MLP_WIDTH_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    map: BTreeMap<String, Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.map.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Same shapes, all zeros. Used for optimizer moments.
    pub fn zeros_like(&self) -> Params {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }
}

impl Default for Params {
    fn default() -> Self {
        Params::new()
    }
}

/// Rows of a field's embedding table: vocabulary plus the absorbing mask row,
/// plus a padding row for sequence item tables.
pub fn table_rows(kind: FieldKind, cardinality: usize) -> usize {
    match kind {
        FieldKind::Sequence => cardinality + 2,
        _ => cardinality + 1,
    }
}

/// Index of the absorbing mask row of a field's table.
pub fn mask_row(cardinality: usize) -> usize {
    cardinality
}

/// Index of the padding row of a sequence item table.
pub fn pad_row(cardinality: usize) -> usize {
    cardinality + 1
}

fn xavier(rng_seed: u64, name: &str, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut rng = derive_rng(rng_seed, &format!("init:{name}"), 0);
    Array2::from_shape_fn((rows, cols), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Initialize all model parameters for a schema: uniform ±1/√d, biases and
/// the log-difficulty vector at zero.
pub fn init_params(
    schema: &DatasetSchema,
    d: usize,
    t_max: usize,
    layers: usize,
    seed: u64,
) -> Params {
    let scale = 1.0 / (d as f64).sqrt();
    let mut p = Params::new();
    for spec in &schema.fields {
        let name = format!("emb.{}", spec.name);
        let rows = table_rows(spec.kind, spec.cardinality);
        p.insert(name.clone(), xavier(seed, &name, rows, d, scale));
        if spec.kind == FieldKind::Sequence {
            for proj in ["wq", "wk", "wv", "wo", "wpool"] {
                let pn = format!("seq.{}.{proj}", spec.name);
                p.insert(pn.clone(), xavier(seed, &pn, d, d, scale));
            }
        }
    }
    let n_positions = schema.fields.len();
    p.insert("pos", xavier(seed, "pos", n_positions, d, scale));
    p.insert("time", xavier(seed, "time", t_max + 1, d, scale));
    for l in 0..layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            let pn = format!("dn.l{l}.{proj}");
            p.insert(pn.clone(), xavier(seed, &pn, d, d, scale));
        }
        let w1 = format!("dn.l{l}.w1");
        let w2 = format!("dn.l{l}.w2");
        p.insert(w1.clone(), xavier(seed, &w1, d, MLP_WIDTH_FACTOR * d, scale));
        p.insert(w2.clone(), xavier(seed, &w2, MLP_WIDTH_FACTOR * d, d, scale));
        p.insert(format!("dn.l{l}.b1"), Array2::zeros((1, MLP_WIDTH_FACTOR * d)));
        p.insert(format!("dn.l{l}.b2"), Array2::zeros((1, d)));
    }
    p.insert("head.g", xavier(seed, "head.g", d, d, scale));
    p.insert("s", Array2::zeros((schema.feature_count(), 1)));
    p
}
