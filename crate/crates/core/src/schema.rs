//! Heterogeneous field schemas and the planted-difficulty synthetic benchmark.
//!
//! Fields of four kinds (identifier, categorical, numerical, behavioral
//! sequence) plus a binary label are generated from a shared latent factor
//! `z`. Each field is a deterministic function of `z` corrupted by a
//! uniform-mixture noise whose rate is calibrated so that the field's
//! conditional entropy given `z` matches a configured `planted_entropy`.
//! The knob gives the benchmark a controllable spread of per-field
//! reconstruction difficulty.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// The kind of a field. `Label` appears exactly once per schema, last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Id,
    Categorical,
    Numerical,
    Sequence,
    Label,
}

impl FieldKind {
    pub fn is_feature(self) -> bool {
        self != FieldKind::Label
    }
}

/// Declarative description of one field.
///
/// `cardinality` is the vocabulary size; for numerical fields it is the bin
/// count, for the label it is 2. `planted_entropy` (nats, in `[0, ln V]`)
/// controls how predictable the field is from the latent factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub cardinality: usize,
    pub seq_len: usize,
    pub planted_entropy: f64,
}

impl FieldSpec {
    fn validate(&self) -> Result<()> {
        if self.cardinality < 2 {
            return Err(Error::Schema(format!(
                "field `{}`: cardinality {} < 2",
                self.name, self.cardinality
            )));
        }
        if self.kind == FieldKind::Sequence && self.seq_len == 0 {
            return Err(Error::Schema(format!(
                "sequence field `{}` needs seq_len >= 1",
                self.name
            )));
        }
        if self.kind != FieldKind::Sequence && self.seq_len != 0 {
            return Err(Error::Schema(format!(
                "non-sequence field `{}` must have seq_len = 0",
                self.name
            )));
        }
        let max_h = (self.cardinality as f64).ln();
        if self.planted_entropy < 0.0 || self.planted_entropy > max_h + 1e-12 {
            return Err(Error::Schema(format!(
                "field `{}`: planted_entropy {} outside [0, ln {}]",
                self.name, self.planted_entropy, self.cardinality
            )));
        }
        Ok(())
    }
}

/// Ordered field list (features first, label last) plus the generator seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub fields: Vec<FieldSpec>,
    pub seed: u64,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.fields.len() < 2 {
            return Err(Error::Schema("schema needs at least one feature and a label".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for f in &self.fields {
            f.validate()?;
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name `{}`", f.name)));
            }
        }
        let label_count = self.fields.iter().filter(|f| f.kind == FieldKind::Label).count();
        if label_count != 1 {
            return Err(Error::Schema(format!("expected exactly one label field, got {label_count}")));
        }
        if self.fields.last().unwrap().kind != FieldKind::Label {
            return Err(Error::Schema("label field must come last".into()));
        }
        Ok(())
    }

    /// Number of feature fields (N).
    pub fn feature_count(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn label_index(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn feature_fields(&self) -> &[FieldSpec] {
        &self.fields[..self.fields.len() - 1]
    }

    /// Stable content hash, used to validate checkpoints against datasets.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}

/// One raw value of a feature field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawValue {
    Token(usize),
    Real(f64),
    Seq(Vec<usize>),
}

/// One generated sample: per-feature raw values plus the binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub values: Vec<RawValue>,
    pub label: u8,
}

/// Knobs of the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    /// Per-field overrides of `planted_entropy`, keyed by field name.
    #[serde(default)]
    pub entropy_overrides: BTreeMap<String, f64>,
    pub label_noise: f64,
    pub latent_dim: usize,
    /// Target label base rate (reached exactly in expectation when
    /// `label_noise` is 0).
    pub positive_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 1,
            entropy_overrides: BTreeMap::new(),
            label_noise: 0.0,
            latent_dim: 8,
            positive_rate: 0.5,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::Schema("n_samples must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::Schema("label_noise must lie in [0, 0.5]".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Schema("latent_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.positive_rate) || self.positive_rate <= 0.0 {
            return Err(Error::Schema("positive_rate must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Build a schema from a list of (kind, cardinality, seq_len) requests.
///
/// Names are generated per kind (`id_0`, `cat_0`, ...). Planted entropy
/// defaults to `0.5 * ln V` unless overridden in the config by name.
pub fn build_schema(
    config: &SyntheticConfig,
    kinds: &[(FieldKind, usize, usize)],
    seed: u64,
) -> Result<DatasetSchema> {
    config.validate()?;
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fields = Vec::with_capacity(kinds.len() + 1);
    for &(kind, cardinality, seq_len) in kinds {
        if kind == FieldKind::Label {
            return Err(Error::Schema("label field is appended automatically".into()));
        }
        let prefix = match kind {
            FieldKind::Id => "id",
            FieldKind::Categorical => "cat",
            FieldKind::Numerical => "num",
            FieldKind::Sequence => "seq",
            FieldKind::Label => unreachable!(),
        };
        let idx = counters.entry(prefix).or_insert(0);
        let name = format!("{prefix}_{idx}");
        *idx += 1;
        let default_h = 0.5 * (cardinality as f64).ln();
        let planted_entropy = *config.entropy_overrides.get(&name).unwrap_or(&default_h);
        fields.push(FieldSpec {
            name,
            kind,
            cardinality,
            seq_len,
            planted_entropy,
        });
    }
    fields.push(FieldSpec {
        name: "label".into(),
        kind: FieldKind::Label,
        cardinality: 2,
        seq_len: 0,
        planted_entropy: 0.0,
    });
    let schema = DatasetSchema { fields, seed };
    schema.validate()?;
    Ok(schema)
}

/// The default mixed-type benchmark request: 2 id, 3 categorical, 2 numerical
/// (100 bins), 1 sequence, plus the label.
pub fn default_benchmark_schema(config: &SyntheticConfig, seed: u64) -> Result<DatasetSchema> {
    build_schema(
        config,
        &[
            (FieldKind::Id, 10_000, 0),
            (FieldKind::Id, 10_000, 0),
            (FieldKind::Categorical, 20, 0),
            (FieldKind::Categorical, 20, 0),
            (FieldKind::Categorical, 20, 0),
            (FieldKind::Numerical, 100, 0),
            (FieldKind::Numerical, 100, 0),
            (FieldKind::Sequence, 10_000, 20),
        ],
        seed,
    )
}

// --- planted latent-factor model -------------------------------------------

/// Entropy of the uniform-mixture corruption: with probability `1 - eps` the
/// preferred token is emitted, otherwise a uniform token.
fn mixture_entropy(eps: f64, vocab: usize) -> f64 {
    let v = vocab as f64;
    let p_star = 1.0 - eps + eps / v;
    let p_other = eps / v;
    let mut h = 0.0;
    if p_star > 0.0 {
        h -= p_star * p_star.ln();
    }
    if p_other > 0.0 {
        h -= (v - 1.0) * p_other * p_other.ln();
    }
    h
}

/// Invert `mixture_entropy` by bisection.
fn solve_epsilon(target_entropy: f64, vocab: usize) -> f64 {
    let max_h = (vocab as f64).ln();
    if target_entropy <= 0.0 {
        return 0.0;
    }
    if target_entropy >= max_h {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mixture_entropy(mid, vocab) < target_entropy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone)]
struct PlantedField {
    /// Unit projection of the latent factor selecting the preferred token.
    projection: Vec<f64>,
    /// Second unit projection; selects the walk stride for sequence fields.
    stride_projection: Vec<f64>,
    /// Uniform-mixture corruption rate solved from `planted_entropy`.
    epsilon: f64,
    /// Cumulative bucket boundaries over (0, 1]; skewed for id fields so the
    /// marginal token distribution is long-tailed.
    boundaries: Vec<f64>,
}

/// The generative model behind a (schema, config) pair. Everything the
/// generator and the Bayes oracle need is derived deterministically from the
/// schema seed.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    fields: Vec<PlantedField>,
    label_projection: Vec<f64>,
    latent_dim: usize,
    positive_rate: f64,
    label_noise: f64,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PlantedModel {
    pub fn new(schema: &DatasetSchema, config: &SyntheticConfig) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let mut fields = Vec::new();
        for (i, spec) in schema.feature_fields().iter().enumerate() {
            let mut rng = derive_rng(schema.seed, "field", i as u64);
            let projection = unit_vector(&mut rng, config.latent_dim);
            let stride_projection = unit_vector(&mut rng, config.latent_dim);
            let entropy = *config
                .entropy_overrides
                .get(&spec.name)
                .unwrap_or(&spec.planted_entropy);
            let epsilon = solve_epsilon(entropy, spec.cardinality);
            let v = spec.cardinality;
            let weights: Vec<f64> = match spec.kind {
                // Zipf-like marginal for id fields: frequent heads, long tails.
                FieldKind::Id => (0..v).map(|k| 1.0 / (k as f64 + 1.0)).collect(),
                _ => vec![1.0; v],
            };
            let total: f64 = weights.iter().sum();
            let mut cum = 0.0;
            let boundaries: Vec<f64> = weights
                .iter()
                .map(|w| {
                    cum += w / total;
                    cum
                })
                .collect();
            fields.push(PlantedField {
                projection,
                stride_projection,
                epsilon,
                boundaries,
            });
        }
        let mut rng = derive_rng(schema.seed, "label", 0);
        let label_projection = unit_vector(&mut rng, config.latent_dim);
        Ok(PlantedModel {
            fields,
            label_projection,
            latent_dim: config.latent_dim,
            positive_rate: config.positive_rate,
            label_noise: config.label_noise,
        })
    }

    fn bucket(&self, field: usize, quantile: f64) -> usize {
        let b = &self.fields[field].boundaries;
        let idx = b.partition_point(|&edge| edge < quantile);
        idx.min(b.len() - 1)
    }

    /// Preferred token of `field` given the latent factor.
    pub fn preferred_token(&self, field: usize, z: &[f64]) -> usize {
        let u = dot(&self.fields[field].projection, z);
        let q = Normal::standard().cdf(u);
        self.bucket(field, q)
    }

    fn stride(&self, field: usize, vocab: usize, z: &[f64]) -> usize {
        let u = dot(&self.fields[field].stride_projection, z);
        let q = Normal::standard().cdf(u);
        1 + ((vocab - 1) as f64 * q).floor() as usize % (vocab - 1).max(1)
    }

    /// Preferred token at position `pos` of a sequence field: a fixed-stride
    /// walk over the vocabulary, with both start and stride set by `z`.
    pub fn preferred_sequence_token(&self, field: usize, vocab: usize, z: &[f64], pos: usize) -> usize {
        let start = self.preferred_token(field, z);
        let stride = self.stride(field, vocab, z);
        (start + pos * stride) % vocab
    }

    pub fn epsilon(&self, field: usize) -> f64 {
        self.fields[field].epsilon
    }

    fn corrupt(&self, field: usize, preferred: usize, vocab: usize, rng: &mut impl Rng) -> usize {
        if rng.gen::<f64>() < self.fields[field].epsilon {
            rng.gen_range(0..vocab)
        } else {
            preferred
        }
    }

    pub fn draw_latent(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Noise-free label given the latent factor.
    pub fn clean_label(&self, z: &[f64]) -> u8 {
        let u = dot(&self.label_projection, z);
        let q = Normal::standard().cdf(u);
        u8::from(q > 1.0 - self.positive_rate)
    }

    pub fn sample(&self, schema: &DatasetSchema, index: u64, rng_seed: u64) -> RawSample {
        let mut rng = derive_rng(rng_seed, "sample", index);
        let z = self.draw_latent(&mut rng);
        let normal = Normal::standard();
        let mut values = Vec::with_capacity(schema.feature_count());
        for (i, spec) in schema.feature_fields().iter().enumerate() {
            let v = spec.cardinality;
            let value = match spec.kind {
                FieldKind::Id | FieldKind::Categorical => {
                    let preferred = self.preferred_token(i, &z);
                    RawValue::Token(self.corrupt(i, preferred, v, &mut rng))
                }
                FieldKind::Numerical => {
                    // Emit a real representative of the chosen quantile bin so
                    // that empirical-CDF binning recovers it.
                    let preferred = self.preferred_token(i, &z);
                    let bin = self.corrupt(i, preferred, v, &mut rng);
                    let q = (bin as f64 + rng.gen::<f64>()) / v as f64;
                    let q = q.clamp(1e-12, 1.0 - 1e-12);
                    RawValue::Real(normal.inverse_cdf(q))
                }
                FieldKind::Sequence => {
                    let len = rng.gen_range(1..=spec.seq_len);
                    let tokens = (0..len)
                        .map(|pos| {
                            let preferred = self.preferred_sequence_token(i, v, &z, pos);
                            self.corrupt(i, preferred, v, &mut rng)
                        })
                        .collect();
                    RawValue::Seq(tokens)
                }
                FieldKind::Label => unreachable!(),
            };
            values.push(value);
        }
        let mut label = self.clean_label(&z);
        if self.label_noise > 0.0 && rng.gen::<f64>() < self.label_noise {
            label ^= 1;
        }
        RawSample { values, label }
    }
}

/// Generate the full dataset. Deterministic given `(schema, config)`; sample
/// `index` owns its own RNG stream, so output order equals sequential order
/// under any parallel schedule.
pub fn generate_dataset(schema: &DatasetSchema, config: &SyntheticConfig) -> Result<Vec<RawSample>> {
    let model = PlantedModel::new(schema, config)?;
    Ok((0..config.n_samples as u64)
        .map(|i| model.sample(schema, i, schema.seed))
        .collect())
}

/// Monte-Carlo estimate of the best achievable reconstruction accuracy of a
/// field, conditioning on the latent factor (not on any trained network).
pub fn bayes_oracle_accuracy(
    schema: &DatasetSchema,
    config: &SyntheticConfig,
    field_index: usize,
    draws: usize,
) -> Result<f64> {
    if field_index >= schema.feature_count() {
        return Err(Error::InvalidArgument(format!(
            "field {field_index} is not a feature field"
        )));
    }
    let model = PlantedModel::new(schema, config)?;
    let spec = &schema.fields[field_index];
    let v = spec.cardinality;
    let mut rng = derive_rng(schema.seed, "oracle", field_index as u64);
    let mut hits = 0usize;
    for _ in 0..draws {
        let z = model.draw_latent(&mut rng);
        match spec.kind {
            FieldKind::Sequence => {
                let pos = rng.gen_range(0..spec.seq_len);
                let preferred = model.preferred_sequence_token(field_index, v, &z, pos);
                let drawn = model.corrupt(field_index, preferred, v, &mut rng);
                hits += usize::from(drawn == preferred);
            }
            _ => {
                let preferred = model.preferred_token(field_index, &z);
                let drawn = model.corrupt(field_index, preferred, v, &mut rng);
                hits += usize::from(drawn == preferred);
            }
        }
    }
    Ok(hits as f64 / draws as f64)
}

/// Monte-Carlo estimate of a discrete field's conditional entropy given the
/// latent factor, in nats. Used to audit the planted-entropy calibration.
pub fn empirical_conditional_entropy(
    schema: &DatasetSchema,
    config: &SyntheticConfig,
    field_index: usize,
    draws: usize,
) -> Result<f64> {
    let model = PlantedModel::new(schema, config)?;
    let spec = &schema.fields[field_index];
    let v = spec.cardinality as f64;
    let eps = model.epsilon(field_index);
    let p_star = 1.0 - eps + eps / v;
    let p_other = eps / v;
    let mut rng = derive_rng(schema.seed, "entropy", field_index as u64);
    let mut total = 0.0;
    for _ in 0..draws {
        let z = model.draw_latent(&mut rng);
        let preferred = model.preferred_token(field_index, &z);
        let drawn = model.corrupt(field_index, preferred, spec.cardinality, &mut rng);
        let p = if drawn == preferred { p_star } else { p_other };
        total -= p.ln();
    }
    Ok(total / draws as f64)
}

// --- dataset serialization -------------------------------------------------

fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".schema.json");
    PathBuf::from(os)
}

/// Write the dataset as line-delimited text (tab-separated fields, sequence
/// tokens comma-separated, label last) plus a JSON schema sidecar.
pub fn write_dataset(data_path: &Path, schema: &DatasetSchema, samples: &[RawSample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let mut cols: Vec<String> = Vec::with_capacity(s.values.len() + 1);
        for v in &s.values {
            cols.push(match v {
                RawValue::Token(t) => t.to_string(),
                RawValue::Real(x) => x.to_string(),
                RawValue::Seq(toks) => toks
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            });
        }
        cols.push(s.label.to_string());
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    fs::write(data_path, out)?;
    fs::write(sidecar_path(data_path), serde_json::to_string_pretty(schema)?)?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`]. Round-trips exactly.
pub fn read_dataset(data_path: &Path) -> Result<(DatasetSchema, Vec<RawSample>)> {
    let schema: DatasetSchema = serde_json::from_str(&fs::read_to_string(sidecar_path(data_path))?)?;
    schema.validate()?;
    let text = fs::read_to_string(data_path)?;
    let mut samples = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != schema.fields.len() {
            return Err(Error::Schema(format!(
                "line {}: expected {} columns, got {}",
                line_no + 1,
                schema.fields.len(),
                cols.len()
            )));
        }
        let parse_err = |what: &str| Error::Schema(format!("line {}: bad {what}", line_no + 1));
        let mut values = Vec::with_capacity(schema.feature_count());
        for (spec, col) in schema.feature_fields().iter().zip(&cols) {
            let v = match spec.kind {
                FieldKind::Id | FieldKind::Categorical => {
                    RawValue::Token(col.parse().map_err(|_| parse_err("token"))?)
                }
                FieldKind::Numerical => RawValue::Real(col.parse().map_err(|_| parse_err("real"))?),
                FieldKind::Sequence => RawValue::Seq(
                    col.split(',')
                        .map(|t| t.parse().map_err(|_| parse_err("sequence token")))
                        .collect::<Result<Vec<usize>>>()?,
                ),
                FieldKind::Label => unreachable!(),
            };
            values.push(v);
        }
        let label: u8 = cols.last().unwrap().parse().map_err(|_| parse_err("label"))?;
        samples.push(RawSample { values, label });
    }
    Ok((schema, samples))
}
