//! Seeded synthetic embeddings with class structure.
//!
//! Every subject has a centroid drawn uniformly on the unit hypersphere.
//! A sample is the centroid plus isotropic Gaussian noise, renormalized.
//! Enrolled subjects get one reference sample and `samples_per_subject`
//! probe samples; non-enrolled subjects only probe samples; training
//! subjects one sample each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, Race, Sex, SoftBiometrics, Split, SubjectRecord};

/// Partition sizes relative to the number of enrolled subjects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProportions {
    pub nonenrolled_per_enrolled: f64,
    pub train_per_enrolled: f64,
}

impl Default for SplitProportions {
    /// 1935 non-enrolled subjects for every 4096 enrolled ones.
    fn default() -> Self {
        Self { nonenrolled_per_enrolled: 1935.0 / 4096.0, train_per_enrolled: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    /// Enrolled subjects, i.e. the gallery size.
    pub num_subjects: usize,
    /// Probe samples per enrolled or non-enrolled subject.
    pub samples_per_subject: usize,
    pub dim: usize,
    pub intra_class_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub split_proportions: SplitProportions,
}

impl SyntheticModel {
    pub fn new(num_subjects: usize, dim: usize, intra_class_sigma: f64, seed: u64) -> Self {
        Self {
            num_subjects,
            samples_per_subject: 3,
            dim,
            intra_class_sigma,
            seed,
            split_proportions: SplitProportions::default(),
        }
    }

    pub fn nonenrolled_subjects(&self) -> usize {
        (self.num_subjects as f64 * self.split_proportions.nonenrolled_per_enrolled).round()
            as usize
    }

    pub fn train_subjects(&self) -> usize {
        (self.num_subjects as f64 * self.split_proportions.train_per_enrolled).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.split_proportions;
        if self.num_subjects == 0 || self.dim == 0 {
            return Err(Error::InvalidParameter("subjects and dim must be positive".into()));
        }
        if !(self.intra_class_sigma.is_finite() && self.intra_class_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma = {} must be finite and non-negative",
                self.intra_class_sigma
            )));
        }
        for v in [p.nonenrolled_per_enrolled, p.train_per_enrolled] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("split proportion {v} is invalid")));
            }
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let v = EmbeddingVector::from_trusted(v);
        if v.norm() > 0.0 {
            return v.normalized();
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, centroid: &EmbeddingVector, sigma: f64) -> EmbeddingVector {
    if sigma == 0.0 {
        return centroid.clone();
    }
    let noisy = centroid
        .values()
        .iter()
        .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    EmbeddingVector::from_trusted(noisy).normalized()
}

fn soft(rng: &mut ChaCha8Rng) -> SoftBiometrics {
    SoftBiometrics {
        sex: Sex::VOCABULARY[rng.random_range(0..Sex::VOCABULARY.len())],
        race: Race::VOCABULARY[rng.random_range(0..Race::VOCABULARY.len())],
        age: rng.random_range(16..=77),
    }
}

/// Records ordered by subject: enrolled (ids `0..N`), non-enrolled, train.
/// Sample 0 of an enrolled subject is its reference.
pub fn generate_synthetic(model: &SyntheticModel) -> Result<Vec<SubjectRecord>> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let n = model.num_subjects;
    let nonenrolled = model.nonenrolled_subjects();
    let train = model.train_subjects();
    let per = model.samples_per_subject;
    let mut records = Vec::with_capacity(n * (1 + per) + nonenrolled * per + train);

    let mut subject = 0u64;
    let groups = [(n, 1 + per), (nonenrolled, per), (train, 1)];
    for (group, &(count, samples)) in groups.iter().enumerate() {
        for _ in 0..count {
            let centroid = unit_gaussian(&mut rng, model.dim);
            let attrs = soft(&mut rng);
            for s in 0..samples {
                let split = match (group, s) {
                    (0, 0) => Split::Reference,
                    (0, _) => Split::ProbeEnrolled,
                    (1, _) => Split::ProbeNonenrolled,
                    _ => Split::Train,
                };
                records.push(SubjectRecord {
                    subject_id: subject,
                    sample_id: s as u64,
                    embedding: sample(&mut rng, &centroid, model.intra_class_sigma),
                    soft: Some(attrs),
                    split,
                });
            }
            subject += 1;
        }
    }
    Ok(records)
}
