//! The `fusion-index` command line.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data_io::{
    generate_synthetic, read_any_index, read_embeddings, sidecar_path, write_bundle,
    write_embeddings, write_index, write_protected_index, write_with_manifest, AnyIndex,
    SyntheticModel,
};
use crate::error::{Error, Result};
use crate::evaluation::{run_experiment, DataConfig, ExperimentConfig};
use crate::fusion::{FusionMethod, TrainingStats};
use crate::index::{build_index, IndexConfig};
use crate::model::{normalize_records, CascadeSchedule, Gallery, Split, SubjectRecord};
use crate::pairing::{PairingConfig, PairingMethod};
use crate::protection::{
    encrypt_probe, protect_index, KeyMaterial, ProtectedComparator, Scheme, SecurityLevel,
    TemplateEncoding, DEFAULT_BITS,
};
use crate::retrieval::{
    default_schedule, exhaustive_search, retrieve, CandidateList, PlaintextComparator,
    RetrievalTrace,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fusion-index",
    version,
    about = "Fusion-based hierarchical indexing for biometric identification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a seeded embedding data set.
    Generate(GenerateArgs),
    /// Generate a key pair for a protected backend.
    Keygen(KeygenArgs),
    /// Pair, fuse, and persist a search forest.
    BuildIndex(BuildIndexArgs),
    /// Run probes through the cascade and/or the exhaustive baseline.
    Identify(IdentifyArgs),
    /// Run an experiment described by a config file.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe samples per enrolled subject, in addition to the reference.
    #[arg(long, default_value_t = 3)]
    pub samples_per_subject: usize,
    /// Embedding file; the metadata sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 128)]
    pub security: u16,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Full key pair, including the secret key.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional public-only copy for the enrolling side.
    #[arg(long)]
    pub public_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    /// Embedding file; its reference samples form the gallery.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub n1: usize,
    #[arg(long)]
    pub fusion: FusionMethod,
    #[arg(long)]
    pub pairing: PairingMethod,
    /// Embedding file whose training samples give the per-dimension means.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rescale fused templates to unit length.
    #[arg(long)]
    pub renormalize: bool,
    /// Keep embeddings exactly as stored instead of L2-normalizing them.
    #[arg(long)]
    pub no_normalize: bool,
    /// Store the index encrypted under `--keys`.
    #[arg(long, requires = "keys")]
    pub encrypt: bool,
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Quantization bits for the exact-integer scheme.
    #[arg(long, default_value_t = DEFAULT_BITS)]
    pub quant_bits: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Embedding file; its probe samples are searched.
    #[arg(long)]
    pub probes: PathBuf,
    /// Root-level fraction; 1 keeps every node.
    #[arg(long, conflicts_with_all = ["schedule", "keep_all"])]
    pub k1: Option<f64>,
    /// Explicit per-level keep counts, e.g. `128,64,32,16,8`.
    #[arg(long, value_delimiter = ',', conflicts_with = "keep_all")]
    pub schedule: Option<Vec<usize>>,
    #[arg(long)]
    pub keep_all: bool,
    /// Expected scheme of the index; defaults to whatever the index holds.
    #[arg(long)]
    pub backend: Option<Scheme>,
    /// Key pair of a protected index.
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Also run the exhaustive baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Candidates written per probe.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_normalize: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingStats(_) | Error::InvalidParameter(_) | Error::InvalidSchedule(_) => {
            EXIT_USAGE
        }
        Error::Internal(_) => EXIT_INTERNAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit status. Messages go to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(_) => EXIT_INTERNAL,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Keygen(a) => keygen(a),
        Command::BuildIndex(a) => build(a),
        Command::Identify(a) => identify(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut model = SyntheticModel::new(a.subjects, a.dim, a.sigma, a.seed);
    model.samples_per_subject = a.samples_per_subject;
    let records = generate_synthetic(&model)?;
    write_embeddings(&a.out, &records)?;
    let sidecar = sidecar_path(&a.out);
    write_with_manifest(&a.out, &[&a.out, &sidecar])?;
    Ok(())
}

fn keygen(a: &KeygenArgs) -> Result<()> {
    let level = SecurityLevel::from_bits(a.security)?;
    let keys = KeyMaterial::generate(a.scheme, level, &mut ChaCha8Rng::seed_from_u64(a.seed));
    keys.write(&a.out)?;
    let mut written = vec![a.out.as_path()];
    if let Some(p) = &a.public_out {
        keys.public_only().write(p)?;
        written.push(p);
    }
    write_with_manifest(&a.out, &written)?;
    Ok(())
}

fn load(path: &Path, normalize: bool) -> Result<Vec<SubjectRecord>> {
    let mut records = read_embeddings(path)?;
    if normalize {
        normalize_records(&mut records);
    }
    Ok(records)
}

fn build(a: &BuildIndexArgs) -> Result<()> {
    if a.fusion.requires_stats() && a.stats.is_none() {
        return Err(Error::MissingStats(a.fusion.name()));
    }
    let normalize = !a.no_normalize;
    let gallery = Gallery::from_records(&load(&a.gallery, normalize)?)?;
    let stats = match &a.stats {
        Some(p) => Some(TrainingStats::from_records(&load(p, normalize)?)?),
        None => None,
    };
    let config = IndexConfig {
        n1: a.n1,
        fusion: a.fusion,
        pairing: PairingConfig::new(a.pairing).with_seed(a.seed),
        renormalize_fused: a.renormalize,
    };
    let forest = build_index(&gallery, &config, stats.as_ref())?;
    match (a.encrypt, &a.keys) {
        (true, Some(keys)) => {
            let keys = KeyMaterial::read(keys)?;
            let train: Vec<_> = match &a.stats {
                Some(p) => load(p, normalize)?
                    .into_iter()
                    .filter(|r| r.split == Split::Train)
                    .map(|r| r.embedding)
                    .collect(),
                None => Vec::new(),
            };
            let train = (!train.is_empty()).then_some(train.as_slice());
            let encoding = TemplateEncoding::for_scheme(keys.scheme, train, a.quant_bits)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let protected = protect_index(&forest, &encoding, &keys, &mut rng)?;
            write_protected_index(&protected, &a.out)?;
        }
        _ => write_index(&forest, &a.out)?,
    }
    write_with_manifest(&a.out, &[&a.out])?;
    Ok(())
}

fn schedule_for(
    a: &IdentifyArgs,
    n1: usize,
    gallery_size: usize,
    stored: Option<&CascadeSchedule>,
) -> Result<CascadeSchedule> {
    if a.keep_all || a.k1 == Some(1.0) {
        return CascadeSchedule::keep_all(n1, gallery_size);
    }
    if let Some(k1) = a.k1 {
        return default_schedule(gallery_size, n1, k1);
    }
    if let Some(s) = &a.schedule {
        return CascadeSchedule::new(n1, s.clone());
    }
    stored.cloned().ok_or_else(|| {
        Error::InvalidSchedule(
            "the index stores no schedule; pass --k1, --schedule or --keep-all".into(),
        )
    })
}

struct Run {
    name: &'static str,
    results: Vec<(Vec<usize>, CandidateList)>,
}

fn identify(a: &IdentifyArgs) -> Result<()> {
    let index = read_any_index(&a.index)?;
    let probes: Vec<SubjectRecord> = load(&a.probes, !a.no_normalize)?
        .into_iter()
        .filter(|r| matches!(r.split, Split::ProbeEnrolled | Split::ProbeNonenrolled))
        .collect();
    if probes.is_empty() {
        return Err(Error::Empty("probe samples"));
    }
    let found = match &index {
        AnyIndex::Plain(_) => None,
        AnyIndex::Protected(p) => Some(p.scheme),
    };
    if let Some(expected) = a.backend {
        let plain_ok = expected == Scheme::PlaintextRef && found.is_none();
        if found != Some(expected) && !plain_ok {
            return Err(Error::SchemeMismatch {
                expected: expected.to_string(),
                found: found.map_or_else(|| "unprotected index".into(), |s| s.to_string()),
            });
        }
    }

    let traced = |t: RetrievalTrace| (t.compared, t.candidates);
    let mut runs = Vec::new();
    match &index {
        AnyIndex::Plain(forest) => {
            let schedule =
                schedule_for(a, forest.n1, forest.gallery_size(), forest.schedule.as_ref())?;
            let cmp = PlaintextComparator::default();
            let results = probes
                .par_iter()
                .map(|p| retrieve(&p.embedding, forest, &schedule, &cmp).map(traced))
                .collect::<Result<_>>()?;
            runs.push(Run { name: "cascade", results });
            if a.baseline {
                let leaves = forest.leaf_templates();
                let results = probes
                    .par_iter()
                    .map(|p| {
                        let list = exhaustive_search(&p.embedding, leaves.iter().copied(), &cmp)?;
                        Ok((vec![leaves.len()], list))
                    })
                    .collect::<Result<_>>()?;
                runs.push(Run { name: "baseline", results });
            }
        }
        AnyIndex::Protected(index) => {
            let keys_path = a.keys.as_ref().ok_or(Error::MissingSecret)?;
            let keys = KeyMaterial::read(keys_path)?;
            keys.secret_fingerprint().ok_or(Error::MissingSecret)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let encrypted = probes
                .iter()
                .map(|p| encrypt_probe(&p.embedding, index, &keys, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let schedule = schedule_for(
                a,
                index.n1,
                crate::retrieval::SearchIndex::gallery_size(index),
                index.schedule.as_ref(),
            )?;
            let cmp = ProtectedComparator { keys: &keys };
            let results = encrypted
                .par_iter()
                .map(|p| retrieve(p, index, &schedule, &cmp).map(traced))
                .collect::<Result<_>>()?;
            runs.push(Run { name: "cascade", results });
            if a.baseline {
                let leaves = index.leaf_templates();
                let results = encrypted
                    .par_iter()
                    .map(|p| {
                        let list = exhaustive_search(p, leaves.iter().copied(), &cmp)?;
                        Ok((vec![leaves.len()], list))
                    })
                    .collect::<Result<_>>()?;
                runs.push(Run { name: "baseline", results });
            }
        }
    }

    let mut files = Vec::new();
    for run in &runs {
        let mut cands = String::from("probe_subject,probe_sample,rank,subject_id,score\n");
        let mut trace =
            String::from("probe_subject,probe_sample,comparisons,per_level,mated_rank\n");
        for (p, (compared, list)) in probes.iter().zip(&run.results) {
            for (rank, c) in list.entries().iter().take(a.top).enumerate() {
                let _ = writeln!(
                    cands,
                    "{},{},{},{},{}",
                    p.subject_id,
                    p.sample_id,
                    rank + 1,
                    c.subject_id,
                    c.score
                );
            }
            let per_level: Vec<String> = compared.iter().map(usize::to_string).collect();
            let _ = writeln!(
                trace,
                "{},{},{},{},{}",
                p.subject_id,
                p.sample_id,
                compared.iter().sum::<usize>(),
                per_level.join(" "),
                list.rank_of(p.subject_id).map_or_else(String::new, |r| r.to_string())
            );
        }
        files.push((format!("candidates_{}.csv", run.name), cands.into_bytes()));
        files.push((format!("trace_{}.csv", run.name), trace.into_bytes()));
    }
    write_bundle(&a.out, &files)?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let DataConfig::File { path } = &mut config.data {
        if path.is_relative() {
            if let Some(dir) = a.config.parent() {
                *path = dir.join(&*path);
            }
        }
    }
    run_experiment(&config)?.write(&a.out_dir)?;
    Ok(())
}
