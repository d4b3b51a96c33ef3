//! Forward absorbing-state masking.
//!
//! Each field is independently replaced by the absorbing mask token with
//! probability `γ^i(t) = (1 − cos(π t / 2T))^{κ^i}`, where the exponent
//! `κ^i = 1 + ln V_i / ln V_max` slows masking for larger vocabularies.
//! Sequence fields are masked at the field level: the whole summary vector
//! is replaced, never individual tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encode::CdfBinner;
use crate::error::{Error, Result};
use crate::schema::{DatasetSchema, FieldKind, RawSample, RawValue};

/// Per-field cosine noise schedule over integer timesteps `0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    /// One exponent per field, label included (last).
    pub kappa: Vec<f64>,
}

impl NoiseSchedule {
    pub fn for_schema(schema: &DatasetSchema, t_max: usize) -> Self {
        let ln_vmax = schema
            .fields
            .iter()
            .map(|f| (f.cardinality as f64).ln())
            .fold(f64::MIN, f64::max)
            .max(f64::MIN_POSITIVE);
        let kappa = schema
            .fields
            .iter()
            .map(|f| 1.0 + (f.cardinality as f64).ln() / ln_vmax)
            .collect();
        NoiseSchedule { t_max, kappa }
    }

    /// Masking probability of `field_index` at timestep `t`.
    pub fn value(&self, field_index: usize, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range 0..={}",
                self.t_max
            )));
        }
        if t == self.t_max {
            return Ok(1.0);
        }
        let phase = std::f64::consts::PI * t as f64 / (2.0 * self.t_max as f64);
        Ok((1.0 - phase.cos()).powf(self.kappa[field_index]))
    }
}

/// A sample with per-field token state at diffusion time `t`. Original
/// tokens are retained; the mask flag says whether the field's input is the
/// absorbing token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSample {
    /// Original tokens per field, label last (label token = label value).
    pub tokens: Vec<FieldToken>,
    /// Mask flag per field, label last.
    pub masked: Vec<bool>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldToken {
    Token(usize),
    Seq(Vec<usize>),
}

impl FieldToken {
    pub fn token(&self) -> usize {
        match self {
            FieldToken::Token(t) => *t,
            FieldToken::Seq(_) => panic!("sequence field has no scalar token"),
        }
    }
}

/// Label-masking mode of the forward process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Joint pretraining: the label is masked by its own schedule.
    JointPretrain,
    /// CTR scoring: label always masked, features never.
    ScoreLabel,
}

/// Map a raw sample to per-field tokens (numerical values through their
/// binner); label appended last.
pub fn tokenize(
    schema: &DatasetSchema,
    binners: &[Option<CdfBinner>],
    sample: &RawSample,
) -> Result<Vec<FieldToken>> {
    let mut tokens = Vec::with_capacity(schema.fields.len());
    for (i, spec) in schema.feature_fields().iter().enumerate() {
        let tok = match (&sample.values[i], spec.kind) {
            (RawValue::Token(t), _) => FieldToken::Token(*t),
            (RawValue::Real(v), FieldKind::Numerical) => {
                let binner = binners[i]
                    .as_ref()
                    .ok_or_else(|| Error::Encode(format!("field `{}`: no binner", spec.name)))?;
                FieldToken::Token(binner.bin(*v))
            }
            (RawValue::Seq(ts), _) => FieldToken::Seq(ts.clone()),
            (v, k) => {
                return Err(Error::Encode(format!(
                    "field `{}`: value {v:?} does not match kind {k:?}",
                    spec.name
                )))
            }
        };
        tokens.push(tok);
    }
    tokens.push(FieldToken::Token(sample.label as usize));
    Ok(tokens)
}

/// Apply the forward masking process at timestep `t`.
pub fn forward_mask(
    tokens: &[FieldToken],
    schedule: &NoiseSchedule,
    t: usize,
    mode: MaskMode,
    rng: &mut impl Rng,
) -> Result<TokenizedSample> {
    let n = tokens.len();
    let mut masked = vec![false; n];
    match mode {
        MaskMode::JointPretrain => {
            for (i, m) in masked.iter_mut().enumerate() {
                let gamma = schedule.value(i, t)?;
                *m = rng.gen::<f64>() < gamma;
            }
        }
        MaskMode::ScoreLabel => {
            masked[n - 1] = true;
        }
    }
    Ok(TokenizedSample {
        tokens: tokens.to_vec(),
        masked,
        t,
    })
}

/// Uniform timestep over `{1, …, T}`.
pub fn sample_timestep(rng: &mut impl Rng, t_max: usize) -> usize {
    rng.gen_range(1..=t_max)
}
