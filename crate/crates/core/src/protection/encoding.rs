//! Front-ends that turn real embeddings into the representation a scheme
//! operates on: min-max scalar quantization and mean-threshold binarization.

use crate::data_io::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::fusion::TrainingStats;
use crate::model::EmbeddingVector;

use super::{Plaintext, Scheme};

pub const DEFAULT_BITS: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationParams {
    bits: u8,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl QuantizationParams {
    pub fn new(bits: u8, min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::InvalidParameter(format!(
                "{bits} quantization bits; must be 1..=16"
            )));
        }
        if min.is_empty() || min.len() != max.len() {
            return Err(Error::InvalidParameter(
                "min and max must have the same positive length".into(),
            ));
        }
        if let Some(i) = (0..min.len())
            .find(|&i| !(min[i].is_finite() && max[i].is_finite() && min[i] <= max[i]))
        {
            return Err(Error::InvalidParameter(format!(
                "dimension {i}: need finite min <= max, got [{}, {}]",
                min[i], max[i]
            )));
        }
        Ok(Self { bits, min, max })
    }

    /// Per-dimension range over a training set.
    pub fn fit(train: &[EmbeddingVector], bits: u8) -> Result<Self> {
        let first = train.first().ok_or(Error::Empty("training set"))?;
        let mut min = first.values().to_vec();
        let mut max = min.clone();
        for v in &train[1..] {
            if v.dim() != min.len() {
                return Err(Error::dims(min.len(), v.dim()));
            }
            for (i, &x) in v.values().iter().enumerate() {
                min[i] = min[i].min(x);
                max[i] = max[i].max(x);
            }
        }
        Self::new(bits, min, max)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn levels(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    pub fn degenerate_dims(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.min[i] == self.max[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quantized {
    pub values: Vec<i64>,
    /// Dimensions with `min == max`; they are emitted as 0.
    pub degenerate: Vec<usize>,
}

pub fn quantize(v: &EmbeddingVector, q: &QuantizationParams) -> Result<Quantized> {
    if v.dim() != q.dim() {
        return Err(Error::dims(q.dim(), v.dim()));
    }
    let top = q.levels();
    let mut degenerate = Vec::new();
    let values = v
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let span = q.max[i] - q.min[i];
            if span == 0.0 {
                degenerate.push(i);
                return 0;
            }
            // f64::round rounds half away from zero
            let level = ((x - q.min[i]) / span * top as f64).round();
            level.clamp(0.0, top as f64) as i64
        })
        .collect();
    Ok(Quantized { values, degenerate })
}

/// Level `k` maps back to `min + k/(2^b-1)·(max-min)`.
pub fn dequantize(levels: &[i64], q: &QuantizationParams) -> Result<EmbeddingVector> {
    if levels.len() != q.dim() {
        return Err(Error::dims(q.dim(), levels.len()));
    }
    let top = q.levels() as f64;
    EmbeddingVector::new(
        levels
            .iter()
            .enumerate()
            .map(|(i, &k)| q.min[i] + k as f64 / top * (q.max[i] - q.min[i]))
            .collect(),
    )
}

/// `1` where the value is at least the training mean.
pub fn binarize(v: &EmbeddingVector, stats: &TrainingStats) -> Result<Vec<u8>> {
    if v.dim() != stats.dim() {
        return Err(Error::dims(stats.dim(), v.dim()));
    }
    Ok(v.values().iter().zip(stats.mu.values()).map(|(x, m)| (x >= m) as u8).collect())
}

/// How real templates are turned into scheme plaintexts.
#[derive(Clone, Debug, PartialEq)]
pub enum TemplateEncoding {
    Real,
    Quantized(QuantizationParams),
    Binarized(TrainingStats),
}

impl TemplateEncoding {
    /// The encoding each scheme expects. Quantization parameters are fitted
    /// on `train`; binarization uses its mean.
    pub fn for_scheme(scheme: Scheme, train: Option<&[EmbeddingVector]>, bits: u8) -> Result<Self> {
        let train = || train.filter(|t| !t.is_empty()).ok_or(Error::Empty("training set"));
        Ok(match scheme {
            Scheme::PlaintextRef | Scheme::ApproxReal => TemplateEncoding::Real,
            Scheme::ExactInt => {
                TemplateEncoding::Quantized(QuantizationParams::fit(train()?, bits)?)
            }
            Scheme::Binary => {
                TemplateEncoding::Binarized(crate::fusion::compute_training_stats(train()?)?)
            }
        })
    }

    pub fn suits(&self, scheme: Scheme) -> bool {
        matches!(
            (self, scheme),
            (TemplateEncoding::Real, Scheme::PlaintextRef | Scheme::ApproxReal)
                | (TemplateEncoding::Quantized(_), Scheme::ExactInt)
                | (TemplateEncoding::Binarized(_), Scheme::Binary)
        )
    }

    pub fn encode(&self, v: &EmbeddingVector) -> Result<Plaintext> {
        Ok(match self {
            TemplateEncoding::Real => Plaintext::Real(v.values().to_vec()),
            TemplateEncoding::Quantized(q) => Plaintext::Integer(quantize(v, q)?.values),
            TemplateEncoding::Binarized(stats) => Plaintext::Binary(binarize(v, stats)?),
        })
    }

    pub(crate) fn write(&self, enc: &mut Encoder) -> Result<()> {
        match self {
            TemplateEncoding::Real => enc.u8(0),
            TemplateEncoding::Quantized(q) => {
                enc.u8(1);
                enc.u8(q.bits);
                enc.len_u32(q.dim())?;
                for &x in q.min.iter().chain(&q.max) {
                    enc.bytes(&x.to_le_bytes());
                }
            }
            TemplateEncoding::Binarized(stats) => {
                enc.u8(2);
                enc.u64(stats.source_count as u64);
                enc.len_u32(stats.dim())?;
                for &x in stats.mu.values() {
                    enc.bytes(&x.to_le_bytes());
                }
            }
        }
        Ok(())
    }

    pub(crate) fn read(dec: &mut Decoder<'_>) -> Result<Self> {
        let f64s = |dec: &mut Decoder<'_>, n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| Ok(f64::from_le_bytes(dec.take(8)?.try_into().expect("8 bytes"))))
                .collect()
        };
        let corrupt = |e: Error| Error::Corrupt(e.to_string());
        match dec.u8()? {
            0 => Ok(TemplateEncoding::Real),
            1 => {
                let bits = dec.u8()?;
                let dim = dec.u32()? as usize;
                let min = f64s(dec, dim)?;
                let max = f64s(dec, dim)?;
                QuantizationParams::new(bits, min, max)
                    .map(TemplateEncoding::Quantized)
                    .map_err(corrupt)
            }
            2 => {
                let source_count = dec.u64()? as usize;
                let dim = dec.u32()? as usize;
                let mu = EmbeddingVector::new(f64s(dec, dim)?).map_err(corrupt)?;
                Ok(TemplateEncoding::Binarized(TrainingStats { mu, source_count }))
            }
            k => Err(Error::Corrupt(format!("unknown template encoding {k}"))),
        }
    }
}
