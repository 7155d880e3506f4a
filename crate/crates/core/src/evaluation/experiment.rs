//! Config-driven experiments: baseline and cascade systems over one data
//! set, with workload, closed-set and open-set results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    closed_set_from_outcomes, open_set_from_outcomes, ClosedSetResult, OpenSetResult, Outcome,
};
use crate::data_io::{generate_synthetic, read_embeddings, SplitProportions, SyntheticModel};
use crate::error::{Error, Result};
use crate::fusion::{FusionMethod, TrainingStats};
use crate::index::{build_index, IndexConfig, IndexForest};
use crate::model::{
    is_valid_n1, normalize_records, validate_gallery, CascadeSchedule, EmbeddingVector, Gallery,
    SampleId, Split, SubjectId, SubjectRecord,
};
use crate::pairing::PairingMethod;
use crate::protection::{
    protect_index, KeyMaterial, ProtectedComparator, ProtectedIndex, ProtectedTemplate, Scheme,
    SecurityLevel, TemplateEncoding, DEFAULT_BITS,
};
use crate::retrieval::{
    default_schedule, exhaustive_search, retrieve, CandidateList, PlaintextComparator,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

fn yes() -> bool {
    true
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// L2-normalize every embedding on ingestion.
    #[serde(default = "yes")]
    pub normalize: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub index: Option<IndexSection>,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub protection: ProtectionSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic {
        subjects: usize,
        dim: usize,
        sigma: f64,
        #[serde(default = "three")]
        samples_per_subject: usize,
        #[serde(default)]
        split_proportions: Option<SplitProportions>,
    },
    /// An embedding file with its sidecar.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSection {
    pub n1: Vec<usize>,
    pub fusion: FusionMethod,
    pub pairing: PairingMethod,
    #[serde(default)]
    pub renormalize_fused: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    /// Root-level fractions `k1 = 2^k1_log2`.
    #[serde(default)]
    pub k1_log2: Vec<i32>,
    #[serde(default = "yes")]
    pub baseline: bool,
    /// Adds a keep-all cascade for every `n1`.
    #[serde(default)]
    pub keep_all: bool,
    /// Caps each probe partition.
    #[serde(default)]
    pub max_probes: Option<usize>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { k1_log2: Vec::new(), baseline: true, keep_all: false, max_probes: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectionSection {
    /// Absent: unprotected plaintext comparison.
    #[serde(default)]
    pub backend: Option<Scheme>,
    #[serde(default = "default_security")]
    pub security_level: u16,
    #[serde(default = "default_bits")]
    pub quantization_bits: u8,
}

fn default_security() -> u16 {
    128
}

fn default_bits() -> u8 {
    DEFAULT_BITS
}

impl Default for ProtectionSection {
    fn default() -> Self {
        Self { backend: None, security_level: 128, quantization_bits: DEFAULT_BITS }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    fn has_cascade(&self) -> bool {
        !self.retrieval.k1_log2.is_empty() || self.retrieval.keep_all
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return err(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !self.retrieval.baseline && !self.has_cascade() {
            return err("nothing to evaluate: enable the baseline or list k1_log2 values".into());
        }
        if let Some(k) = self.retrieval.k1_log2.iter().find(|&&k| k > 0) {
            return err(format!("k1_log2 = {k} gives k1 > 1"));
        }
        if self.has_cascade() {
            let Some(index) = &self.index else {
                return err("cascade systems need an [index] section".into());
            };
            if index.n1.is_empty() {
                return err("[index] n1 must list at least one value".into());
            }
            if let Some(n1) = index.n1.iter().find(|&&n| !is_valid_n1(n)) {
                return err(format!("n1 = {n1} is not a power of two >= 2"));
            }
        }
        if let DataConfig::Synthetic { subjects, dim, sigma, .. } = self.data {
            if subjects == 0 || dim == 0 || !(sigma.is_finite() && sigma >= 0.0) {
                return err("synthetic data needs subjects > 0, dim > 0, sigma >= 0".into());
            }
        }
        SecurityLevel::from_bits(self.protection.security_level)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(1..=16).contains(&self.protection.quantization_bits) {
            return err("quantization_bits must be in 1..=16".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub subject_id: SubjectId,
    pub sample_id: SampleId,
    pub split: Split,
    pub comparisons: usize,
    pub top_subject: Option<SubjectId>,
    pub top_score: Option<f64>,
    pub mated_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SystemResult {
    pub label: String,
    pub n1: Option<usize>,
    pub k1_log2: Option<i32>,
    pub keep_all: bool,
    pub selections: Option<Vec<usize>>,
    pub comparisons_per_level: Vec<usize>,
    pub comparisons: usize,
    pub workload_percent: f64,
    pub closed: ClosedSetResult,
    pub open: Option<OpenSetResult>,
    #[serde(skip)]
    pub traces: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    pub gallery_size: usize,
    pub probes_enrolled: usize,
    pub probes_nonenrolled: usize,
    pub systems: Vec<SystemResult>,
}

struct Probe {
    subject_id: SubjectId,
    sample_id: SampleId,
    split: Split,
    embedding: EmbeddingVector,
}

struct Protection {
    keys: KeyMaterial,
    encoding: TemplateEncoding,
    probes: Vec<ProtectedTemplate>,
    gallery: Vec<(SubjectId, ProtectedTemplate)>,
}

/// Independent deterministic stream per purpose.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const STREAM_KEYS: u64 = 1;
const STREAM_PROBES: u64 = 2;
const STREAM_GALLERY: u64 = 3;
const STREAM_INDEX: u64 = 1 << 32;

fn load(config: &ExperimentConfig) -> Result<Vec<SubjectRecord>> {
    let mut records = match &config.data {
        DataConfig::Synthetic { subjects, dim, sigma, samples_per_subject, split_proportions } => {
            generate_synthetic(&SyntheticModel {
                num_subjects: *subjects,
                samples_per_subject: *samples_per_subject,
                dim: *dim,
                intra_class_sigma: *sigma,
                seed: config.seed,
                split_proportions: split_proportions.unwrap_or_default(),
            })?
        }
        DataConfig::File { path } => read_embeddings(path)?,
    };
    let report = validate_gallery(&records);
    if let Some(v) = report.violations.first() {
        return Err(Error::Config(format!("invalid data set: {v}")));
    }
    if config.normalize {
        normalize_records(&mut records);
    }
    Ok(records)
}

fn label(n1: usize, k1_log2: Option<i32>) -> String {
    match k1_log2 {
        Some(k) => format!("cascade_n{n1}_k1log2{k:+}"),
        None => format!("cascade_n{n1}_keepall"),
    }
}

fn trace_row(p: &Probe, comparisons: usize, list: &CandidateList) -> TraceRow {
    TraceRow {
        subject_id: p.subject_id,
        sample_id: p.sample_id,
        split: p.split,
        comparisons,
        top_subject: list.top().map(|c| c.subject_id),
        top_score: list.top().map(|c| c.score),
        mated_rank: list.rank_of(p.subject_id),
    }
}

fn summarize(
    label: String,
    probes: &[Probe],
    gallery_size: usize,
    results: Vec<(Vec<usize>, CandidateList)>,
) -> Result<SystemResult> {
    let per_level = results.first().map(|r| r.0.clone()).unwrap_or_default();
    if results.iter().any(|r| r.0 != per_level) {
        return Err(Error::Internal(format!("{label}: comparison counts differ between probes")));
    }
    let comparisons: usize = per_level.iter().sum();
    let mut enrolled = Vec::new();
    let mut nonenrolled = Vec::new();
    let mut traces = Vec::with_capacity(probes.len());
    for (p, (_, list)) in probes.iter().zip(&results) {
        let outcome = Outcome::new(p.subject_id, list);
        if p.split == Split::ProbeEnrolled {
            enrolled.push(outcome)
        } else {
            nonenrolled.push(outcome)
        }
        traces.push(trace_row(p, comparisons, list));
    }
    let closed = closed_set_from_outcomes(&enrolled, gallery_size)?;
    for w in closed.cmc.windows(2) {
        if w[1].1 < w[0].1 {
            return Err(Error::Internal(format!("{label}: CMC is not monotone")));
        }
    }
    let open = if nonenrolled.is_empty() {
        None
    } else {
        Some(open_set_from_outcomes(&enrolled, &nonenrolled)?)
    };
    Ok(SystemResult {
        label,
        n1: None,
        k1_log2: None,
        keep_all: false,
        selections: None,
        comparisons_per_level: per_level,
        comparisons,
        workload_percent: 100.0 * comparisons as f64 / gallery_size as f64,
        closed,
        open,
        traces,
    })
}

fn run_cascade(
    forest: &IndexForest,
    protected: Option<(&ProtectedIndex, &Protection)>,
    probes: &[Probe],
    schedule: &CascadeSchedule,
) -> Result<Vec<(Vec<usize>, CandidateList)>> {
    (0..probes.len())
        .into_par_iter()
        .map(|i| {
            let trace = match protected {
                None => retrieve(
                    &probes[i].embedding,
                    forest,
                    schedule,
                    &PlaintextComparator::default(),
                )?,
                Some((index, prot)) => retrieve(
                    &prot.probes[i],
                    index,
                    schedule,
                    &ProtectedComparator { keys: &prot.keys },
                )?,
            };
            Ok((trace.compared, trace.candidates))
        })
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle> {
    config.validate()?;
    let records = load(config)?;
    let gallery = Gallery::from_records(&records)?;
    let n = gallery.len();
    let train: Vec<EmbeddingVector> =
        records.iter().filter(|r| r.split == Split::Train).map(|r| r.embedding.clone()).collect();
    let stats = if train.is_empty() { None } else { Some(TrainingStats::from_records(&records)?) };

    let cap = config.retrieval.max_probes.unwrap_or(usize::MAX);
    let mut probes: Vec<Probe> = Vec::new();
    for split in [Split::ProbeEnrolled, Split::ProbeNonenrolled] {
        probes.extend(records.iter().filter(|r| r.split == split).take(cap).map(|r| Probe {
            subject_id: r.subject_id,
            sample_id: r.sample_id,
            split,
            embedding: r.embedding.clone(),
        }));
    }
    let enrolled_ids: std::collections::HashSet<_> = gallery.subject_ids.iter().copied().collect();
    if let Some(p) = probes
        .iter()
        .find(|p| p.split == Split::ProbeEnrolled && !enrolled_ids.contains(&p.subject_id))
    {
        return Err(Error::NotEnrolled(p.subject_id));
    }
    let probes_enrolled = probes.iter().filter(|p| p.split == Split::ProbeEnrolled).count();
    if probes_enrolled == 0 {
        return Err(Error::Empty("enrolled probes"));
    }

    let protection = match config.protection.backend {
        None => None,
        Some(scheme) => {
            let security = SecurityLevel::from_bits(config.protection.security_level)?;
            let keys =
                KeyMaterial::generate(scheme, security, &mut stream(config.seed, STREAM_KEYS));
            let encoding = TemplateEncoding::for_scheme(
                scheme,
                Some(&train),
                config.protection.quantization_bits,
            )?;
            let encrypt = |v: &EmbeddingVector, rng: &mut ChaCha8Rng| {
                crate::protection::encrypt(&encoding.encode(v)?, &keys, rng)
            };
            let mut rng = stream(config.seed, STREAM_PROBES);
            let protected_probes =
                probes.iter().map(|p| encrypt(&p.embedding, &mut rng)).collect::<Result<_>>()?;
            let mut rng = stream(config.seed, STREAM_GALLERY);
            let protected_gallery = gallery
                .subject_ids
                .iter()
                .zip(&gallery.templates)
                .map(|(&id, t)| Ok((id, encrypt(t, &mut rng)?)))
                .collect::<Result<_>>()?;
            Some(Protection {
                keys,
                encoding,
                probes: protected_probes,
                gallery: protected_gallery,
            })
        }
    };

    let mut systems = Vec::new();
    if config.retrieval.baseline {
        let results: Vec<(Vec<usize>, CandidateList)> = (0..probes.len())
            .into_par_iter()
            .map(|i| {
                let list = match &protection {
                    None => exhaustive_search(
                        &probes[i].embedding,
                        gallery.subject_ids.iter().copied().zip(&gallery.templates),
                        &PlaintextComparator::default(),
                    )?,
                    Some(p) => exhaustive_search(
                        &p.probes[i],
                        p.gallery.iter().map(|(id, t)| (*id, t)),
                        &ProtectedComparator { keys: &p.keys },
                    )?,
                };
                Ok((vec![n], list))
            })
            .collect::<Result<_>>()?;
        systems.push(summarize("baseline".into(), &probes, n, results)?);
    }

    if config.has_cascade() {
        let section = config.index.as_ref().expect("validated");
        for &n1 in &section.n1 {
            let index_config = IndexConfig {
                n1,
                fusion: section.fusion,
                pairing: crate::pairing::PairingConfig::new(section.pairing).with_seed(config.seed),
                renormalize_fused: section.renormalize_fused,
            };
            let forest = build_index(&gallery, &index_config, stats.as_ref())?;
            let protected_index = match &protection {
                None => None,
                Some(p) => Some(protect_index(
                    &forest,
                    &p.encoding,
                    &p.keys,
                    &mut stream(config.seed, STREAM_INDEX + n1 as u64),
                )?),
            };
            let pair = protected_index.as_ref().zip(protection.as_ref());

            let mut schedules: Vec<(Option<i32>, CascadeSchedule)> = config
                .retrieval
                .k1_log2
                .iter()
                .map(|&k| Ok((Some(k), default_schedule(n, n1, 2f64.powi(k))?)))
                .collect::<Result<_>>()?;
            if config.retrieval.keep_all {
                schedules.push((None, CascadeSchedule::keep_all(n1, n)?));
            }
            for (k, schedule) in schedules {
                let results = run_cascade(&forest, pair, &probes, &schedule)?;
                let expected = schedule.comparisons_per_level(n)?;
                let mut system = summarize(label(n1, k), &probes, n, results)?;
                if system.comparisons_per_level != expected {
                    return Err(Error::Internal(format!(
                        "{}: traced comparisons {:?} differ from the schedule's {:?}",
                        system.label, system.comparisons_per_level, expected
                    )));
                }
                system.n1 = Some(n1);
                system.k1_log2 = k;
                system.keep_all = k.is_none();
                system.selections = Some(schedule.selections().to_vec());
                systems.push(system);
            }
        }
    }

    Ok(ReportBundle {
        config: config.clone(),
        gallery_size: n,
        probes_enrolled,
        probes_nonenrolled: probes.len() - probes_enrolled,
        systems,
    })
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    system: &'a str,
    n1: Option<usize>,
    k1_log2: Option<i32>,
    selections: Option<&'a [usize]>,
    comparisons: usize,
    workload_percent: f64,
    eer_percent: Option<f64>,
    fnir_1000_percent: Option<f64>,
    rr1_percent: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    seed: u64,
    backend: Option<Scheme>,
    gallery_size: usize,
    probes_enrolled: usize,
    probes_nonenrolled: usize,
    systems: Vec<SummaryRow<'a>>,
}

impl ReportBundle {
    pub fn system(&self, label: &str) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.label == label)
    }

    /// `system,n1,k1_log2,comparisons,workload_percent`
    pub fn workload_csv(&self) -> String {
        let mut out = String::from("system,n1,k1_log2,comparisons,workload_percent\n");
        for s in &self.systems {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.2}",
                s.label,
                opt(s.n1),
                opt(s.k1_log2),
                s.comparisons,
                s.workload_percent
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = Summary {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: self.config.seed,
            backend: self.config.protection.backend,
            gallery_size: self.gallery_size,
            probes_enrolled: self.probes_enrolled,
            probes_nonenrolled: self.probes_nonenrolled,
            systems: self
                .systems
                .iter()
                .map(|s| SummaryRow {
                    system: &s.label,
                    n1: s.n1,
                    k1_log2: s.k1_log2,
                    selections: s.selections.as_deref(),
                    comparisons: s.comparisons,
                    workload_percent: s.workload_percent,
                    eer_percent: s.open.as_ref().map(|o| o.eer),
                    fnir_1000_percent: s.open.as_ref().map(|o| o.fnir_at_fpir_0_1pct),
                    rr1_percent: s.closed.rr1,
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&summary).expect("serializable");
        text.push('\n');
        text
    }

    /// Every report file as `(name, contents)`, in a fixed order.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        let mut files = vec![
            ("config.toml".to_owned(), self.config.to_toml().into_bytes()),
            ("summary.json".to_owned(), self.summary_json().into_bytes()),
            ("workload.csv".to_owned(), self.workload_csv().into_bytes()),
        ];
        for s in &self.systems {
            let mut cmc = String::from("rank,ir_percent\n");
            for (r, ir) in &s.closed.cmc {
                let _ = writeln!(cmc, "{r},{ir}");
            }
            files.push((format!("cmc_{}.csv", s.label), cmc.into_bytes()));
            if let Some(open) = &s.open {
                let mut det = String::from("threshold,fpir_percent,fnir_percent\n");
                for p in &open.det {
                    let _ = writeln!(det, "{},{},{}", p.threshold, p.fpir, p.fnir);
                }
                files.push((format!("det_{}.csv", s.label), det.into_bytes()));
            }
            let mut trace = String::from(
                "subject_id,sample_id,split,comparisons,top_subject,top_score,mated_rank\n",
            );
            for t in &s.traces {
                let _ = writeln!(
                    trace,
                    "{},{},{},{},{},{},{}",
                    t.subject_id,
                    t.sample_id,
                    t.split,
                    t.comparisons,
                    opt(t.top_subject),
                    opt(t.top_score),
                    opt(t.mated_rank)
                );
            }
            files.push((format!("trace_{}.csv", s.label), trace.into_bytes()));
        }
        files
    }

    pub fn write(&self, out_dir: &Path) -> Result<crate::data_io::Manifest> {
        crate::data_io::write_bundle(out_dir, &self.files())
    }
}
