//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fusion_index::data_io::{generate_synthetic, SyntheticModel};
use fusion_index::evaluation::{run_experiment, ExperimentConfig};
use fusion_index::fusion::{fuse, fuse_group, FusionMethod, TrainingStats};
use fusion_index::index::{build_index, IndexConfig};
use fusion_index::model::{
    squared_euclidean_distance, CascadeSchedule, EmbeddingVector, Gallery, Split,
};
use fusion_index::pairing::{
    brute_force_matching, extract_pairs, intra_group_cost, pair_hierarchy, solve_assignment,
    CostMatrix, PairingConfig, PairingMethod,
};
use fusion_index::protection::{
    compare_protected, decrypt_differences, decrypt_score, encrypt, encrypt_probe, protect_index,
    KeyMaterial, Plaintext, ProtectedComparator, Scheme, SecurityLevel, TemplateEncoding,
};
use fusion_index::retrieval::{
    default_schedule, exhaustive_gallery, lower_bound_workload, retrieve, workload,
    PlaintextComparator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const APPROX_TOLERANCE: f64 = 1e-3;
const AVERAGE1_REL_TOLERANCE: f64 = 1e-12;
const LIMIT_TOLERANCE_PP: f64 = 0.01;
const CASCADE_RR1_FLOOR: f64 = 99.5;

type Outcome = Result<String, String>;

/// Name, check, and wall-clock budget.
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    EmbeddingVector::new(v).unwrap().normalized()
}

fn v(values: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(values.to_vec()).unwrap()
}

fn workload_golden() -> Outcome {
    let mut got = Vec::new();
    for (k, want, pct) in [(-1, 736, "17.97"), (-2, 496, "12.11"), (-3, 376, "9.18")] {
        let w = workload(&default_schedule(4096, 16, 2f64.powi(k)).unwrap(), 4096).unwrap();
        let shown = format!("{:.2}", w.workload_percent);
        if w.comparisons_total != want || shown != pct {
            return Err(format!("k1=2^{k}: {} comparisons, {shown}%", w.comparisons_total));
        }
        got.push(format!("{}={}%", w.comparisons_total, shown));
    }
    Ok(got.join(" "))
}

fn lower_bound() -> Outcome {
    let w = lower_bound_workload(4096, 8).unwrap();
    let shown = format!("{:.2}", w.workload_percent);
    ensure(
        w.comparisons_total == 518 && shown == "12.65",
        format!("{} = {shown}%", w.comparisons_total),
    )
}

fn limit() -> Outcome {
    let w = lower_bound_workload(1 << 20, 16).unwrap();
    let gap = (w.workload_percent - 6.25).abs();
    ensure(gap <= LIMIT_TOLERANCE_PP, format!("W = {:.6}% at N = 2^20", w.workload_percent))
}

fn keep_all_exactness() -> Outcome {
    let model = SyntheticModel::new(4096, 512, 0.1, 41);
    let records = generate_synthetic(&model).unwrap();
    let gallery = Gallery::from_records(&records).unwrap();
    let probes: Vec<&EmbeddingVector> = records
        .iter()
        .filter(|r| r.split == Split::ProbeEnrolled)
        .take(1000)
        .map(|r| &r.embedding)
        .collect();
    let forest = build_index(
        &gallery,
        &IndexConfig::new(16, FusionMethod::Average1, PairingMethod::SimilarityScore),
        None,
    )
    .unwrap();
    let schedule = CascadeSchedule::keep_all(16, 4096).unwrap();
    let cmp = PlaintextComparator::default();
    let mut same = 0;
    for p in &probes {
        let cascade = retrieve(*p, &forest, &schedule, &cmp).unwrap().candidates;
        let exhaustive = exhaustive_gallery(p, &gallery, &cmp).unwrap();
        if cascade.top().map(|c| c.subject_id) == exhaustive.top().map(|c| c.subject_id) {
            same += 1;
        }
    }
    ensure(
        same == probes.len() && probes.len() == 1000,
        format!("{same}/{} top-1 agree", probes.len()),
    )
}

fn fusion_suite() -> Outcome {
    let mu = |m: &[f64]| TrainingStats { mu: v(m), source_count: 1 };
    let cases = [
        (fuse(&v(&[1., 3.]), &v(&[3., 1.]), FusionMethod::Average1, None), vec![2., 2.]),
        (
            fuse(&v(&[1., 3.]), &v(&[3., 1.]), FusionMethod::Average2, Some(&mu(&[0., 0.]))),
            vec![5., 5.],
        ),
        (
            fuse(&v(&[1., 3.]), &v(&[4., 2.]), FusionMethod::Distance1, Some(&mu(&[2., 2.]))),
            vec![4., 3.],
        ),
        (
            fuse(
                &v(&[5., 2., 9.]),
                &v(&[3., 8., 4.]),
                FusionMethod::Distance2,
                Some(&mu(&[4., 4., 4.])),
            ),
            vec![3., 8., 9.],
        ),
        (
            fuse(&v(&[1., 2., 3., 4.]), &v(&[5., 6., 7., 8.]), FusionMethod::Index1, None),
            vec![1., 2., 7., 8.],
        ),
        (
            fuse(&v(&[1., 2., 3., 4.]), &v(&[5., 6., 7., 8.]), FusionMethod::Index2, None),
            vec![1., 6., 3., 8.],
        ),
        (
            fuse_group(
                &[v(&[0., 4.]), v(&[2., 2.]), v(&[4., 0.]), v(&[2., 2.])],
                FusionMethod::Average1,
                None,
            ),
            vec![2., 2.],
        ),
    ];
    for (i, (got, want)) in cases.into_iter().enumerate() {
        let got = got.map_err(|e| format!("example {i}: {e}"))?;
        if got.values() != want.as_slice() {
            return Err(format!("example {i}: {:?} != {want:?}", got.values()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let size = 1usize << rng.random_range(1..=6);
        let dim = rng.random_range(1..=32);
        let members: Vec<EmbeddingVector> = (0..size)
            .map(|_| v(&(0..dim).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<_>>()))
            .collect();
        let fused = fuse_group(&members, FusionMethod::Average1, None).unwrap();
        let mut mean = vec![0.0; dim];
        for m in &members {
            for (acc, x) in mean.iter_mut().zip(m.values()) {
                *acc += x;
            }
        }
        for x in &mut mean {
            *x /= size as f64;
        }
        let diff: f64 =
            fused.values().iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        worst = worst.max(diff / norm);
    }
    ensure(
        worst <= AVERAGE1_REL_TOLERANCE,
        format!("7 examples exact; worst Average-1 relative error {worst:.2e}"),
    )
}

fn pairing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut perfect, mut not_below) = (0, 0);
    for _ in 0..1000 {
        let n = 2 * rng.random_range(1..=5);
        let raw: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
        let costs =
            CostMatrix::from_fn(n, |i, j| raw[i.min(j) * n + i.max(j)]).unwrap().symmetrized();
        let result = extract_pairs(&solve_assignment(&costs).unwrap(), &costs).unwrap();
        let optimum = brute_force_matching(&costs).unwrap();
        perfect += usize::from(result.is_perfect(n));
        not_below += usize::from(result.total_cost >= optimum.total_cost - 1e-9);
    }

    let (mut score_sum, mut random_sum) = (0.0, 0.0);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let templates: Vec<EmbeddingVector> = (0..32).map(|_| random_unit(&mut rng, 16)).collect();
        let gallery = Gallery::from_templates(templates.clone()).unwrap();
        let fuser = fusion_index::fusion::Fuser::new(FusionMethod::Average1, None).unwrap();
        for (method, sum) in [
            (PairingMethod::SimilarityScore, &mut score_sum),
            (PairingMethod::Random, &mut random_sum),
        ] {
            let config = PairingConfig::new(method).with_seed(seed);
            let h = pair_hierarchy(&gallery, &config, 2, &fuser).unwrap();
            *sum += intra_group_cost(&templates, &h.final_groups()).unwrap();
        }
    }
    let (score_mean, random_mean) = (score_sum / 100.0, random_sum / 100.0);
    ensure(
        perfect == 1000 && not_below == 1000 && score_mean < random_mean,
        format!(
            "perfect {perfect}/1000, cost >= optimum {not_below}/1000, \
             mean cost score {score_mean:.4} < random {random_mean:.4}"
        ),
    )
}

fn protection_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 64;
    let mut train = Vec::new();
    for _ in 0..200 {
        train.push(random_unit(&mut rng, dim));
    }
    let mut details = Vec::new();
    for scheme in [Scheme::ApproxReal, Scheme::ExactInt, Scheme::Binary] {
        let keys = KeyMaterial::generate(scheme, SecurityLevel::Bits128, &mut rng);
        let encoding = TemplateEncoding::for_scheme(scheme, Some(&train), 8).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let (a, b) = (random_unit(&mut rng, dim), random_unit(&mut rng, dim));
            let (pa, pb) = (encoding.encode(&a).unwrap(), encoding.encode(&b).unwrap());
            let ca = encrypt(&pa, &keys, &mut rng).unwrap();
            let cb = encrypt(&pb, &keys, &mut rng).unwrap();
            let score = compare_protected(&ca, &cb).unwrap();
            let (got, want) = match (&pa, &pb) {
                (Plaintext::Binary(x), Plaintext::Binary(y)) => {
                    let bits = decrypt_differences(&score, &keys).unwrap();
                    let xor: Vec<u8> = x.iter().zip(y).map(|(p, q)| p ^ q).collect();
                    if bits != xor {
                        return Err("binary difference vector differs from XOR".into());
                    }
                    let weight = bits.iter().map(|&b| f64::from(b)).sum::<f64>();
                    (weight, xor.iter().map(|&b| f64::from(b)).sum())
                }
                (Plaintext::Real(_), _) => (
                    decrypt_score(&score, &keys).unwrap(),
                    squared_euclidean_distance(&a, &b).unwrap(),
                ),
                _ => (decrypt_score(&score, &keys).unwrap(), pa.squared_distance(&pb).unwrap()),
            };
            worst = worst.max((got - want).abs());
        }
        let limit = if scheme == Scheme::ApproxReal { APPROX_TOLERANCE } else { 0.0 };
        if worst > limit {
            return Err(format!("{scheme}: max error {worst:e} over 1000 pairs"));
        }

        let plain = encoding.encode(&train[0]).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            seen.insert(encrypt(&plain, &keys, &mut rng).unwrap().to_bytes());
        }
        if seen.len() != 1000 {
            return Err(format!("{scheme}: {} collisions in 1000 encryptions", 1000 - seen.len()));
        }
        details.push(format!("{scheme} max err {worst:.1e}"));
    }

    let model = SyntheticModel::new(256, 32, 0.05, 8);
    let records = generate_synthetic(&model).unwrap();
    let gallery = Gallery::from_records(&records).unwrap();
    let forest = build_index(
        &gallery,
        &IndexConfig::new(16, FusionMethod::Average1, PairingMethod::SimilarityScore),
        None,
    )
    .unwrap();
    let schedule = default_schedule(256, 16, 0.5).unwrap();
    let old = KeyMaterial::generate(Scheme::ApproxReal, SecurityLevel::Bits128, &mut rng);
    let new = KeyMaterial::generate(Scheme::ApproxReal, SecurityLevel::Bits128, &mut rng);
    let index = protect_index(&forest, &TemplateEncoding::Real, &old, &mut rng).unwrap();
    let rekeyed = index.rekey(&old, &new, &mut rng).unwrap();
    let mut identical = 0;
    let probes: Vec<_> = records.iter().filter(|r| r.split == Split::ProbeEnrolled).collect();
    for r in &probes {
        let before = retrieve(
            &encrypt_probe(&r.embedding, &index, &old, &mut rng).unwrap(),
            &index,
            &schedule,
            &ProtectedComparator { keys: &old },
        )
        .unwrap();
        let after = retrieve(
            &encrypt_probe(&r.embedding, &rekeyed, &new, &mut rng).unwrap(),
            &rekeyed,
            &schedule,
            &ProtectedComparator { keys: &new },
        )
        .unwrap();
        let ids = |t: &fusion_index::retrieval::RetrievalTrace| {
            t.candidates.entries().iter().map(|c| c.subject_id).collect::<Vec<_>>()
        };
        identical += usize::from(ids(&before) == ids(&after));
    }
    details.push(format!("0/1000 collisions; rekey lists identical {identical}/{}", probes.len()));
    ensure(identical == probes.len(), details.join("; "))
}

fn separable_metrics() -> Outcome {
    let config = ExperimentConfig::from_toml(
        r#"
        schema_version = 1
        seed = 9
        [data]
        source = "synthetic"
        subjects = 1024
        dim = 128
        sigma = 0.02
        samples_per_subject = 2
        [index]
        n1 = [16]
        fusion = "avg1"
        pairing = "score"
        [retrieval]
        k1_log2 = [-1]
        keep_all = true
        "#,
    )
    .unwrap();

    // The data must actually be separable: every mated distance below
    // every non-mated one.
    let model = SyntheticModel {
        num_subjects: 1024,
        samples_per_subject: 2,
        dim: 128,
        intra_class_sigma: 0.02,
        seed: 9,
        split_proportions: Default::default(),
    };
    let records = generate_synthetic(&model).unwrap();
    let gallery = Gallery::from_records(&records).unwrap();
    let (mut max_mated, mut min_non_mated) = (0.0f64, f64::INFINITY);
    for r in records.iter().filter(|r| r.split == Split::ProbeEnrolled) {
        for (id, t) in gallery.subject_ids.iter().zip(&gallery.templates) {
            let d = squared_euclidean_distance(&r.embedding, t).unwrap();
            if *id == r.subject_id {
                max_mated = max_mated.max(d);
            } else {
                min_non_mated = min_non_mated.min(d);
            }
        }
    }
    if max_mated >= min_non_mated {
        return Err(format!("not separable: {max_mated} >= {min_non_mated}"));
    }

    let report = run_experiment(&config).unwrap();
    let base = report.system("baseline").unwrap();
    let cascade = report.system("cascade_n16_k1log2-1").unwrap();
    let keep_all = report.system("cascade_n16_keepall").unwrap();
    let ir_bounded =
        cascade.closed.cmc.iter().zip(&base.closed.cmc).all(|(c, b)| c.0 == b.0 && c.1 <= b.1);
    let monotone = report.systems.iter().all(|s| s.closed.cmc.windows(2).all(|w| w[0].1 <= w[1].1));
    let same = keep_all.closed == base.closed && keep_all.open == base.open;
    ensure(
        base.closed.rr1 == 100.0
            && cascade.closed.rr1 >= CASCADE_RR1_FLOOR
            && ir_bounded
            && monotone
            && same,
        format!(
            "max mated {max_mated:.4} < min non-mated {min_non_mated:.4}; baseline RR-1 {}%, \
             cascade RR-1 {}%, IR bounded {ir_bounded}, CMC monotone {monotone}, \
             keep-all identical {same}",
            base.closed.rr1, cascade.closed.rr1
        ),
    )
}

fn cli(args: &str, dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fusion-index"))
        .args(args.split_whitespace())
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn cli_pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let steps = [
        "generate --subjects 256 --dim 32 --sigma 0.05 --seed 3 --out g.bemb",
        "keygen --scheme approx_real --seed 4 --out k.bkey --public-out k.pub",
        "build-index --gallery g.bemb --n1 16 --fusion dist2 --pairing random --stats g.bemb \
         --seed 5 --out i.bidx",
        "build-index --gallery g.bemb --n1 16 --fusion avg1 --pairing score --encrypt \
         --keys k.pub --seed 6 --out e.bidx",
        "identify --index i.bidx --probes g.bemb --k1 0.5 --baseline --out id",
        "identify --index e.bidx --probes g.bemb --k1 0.25 --keys k.bkey --seed 7 --out eid",
        "evaluate --config exp.toml --out-dir ev",
    ];
    std::fs::write(
        dir.join("exp.toml"),
        "schema_version = 1\nseed = 8\n[data]\nsource = \"synthetic\"\nsubjects = 128\ndim = 16\n\
         sigma = 0.05\n[index]\nn1 = [8]\nfusion = \"avg1\"\npairing = \"score\"\n[retrieval]\n\
         k1_log2 = [-1, -2]\n[protection]\nbackend = \"exact_int\"\n",
    )
    .map_err(|e| e.to_string())?;
    for step in steps {
        cli(step, dir)?;
    }
    let manifests = [
        "g.bemb.manifest.json",
        "k.bkey.manifest.json",
        "i.bidx.manifest.json",
        "e.bidx.manifest.json",
        "id/manifest.json",
        "eid/manifest.json",
        "ev/manifest.json",
    ];
    manifests
        .iter()
        .map(|m| Ok((m.to_string(), std::fs::read(dir.join(m)).map_err(|e| format!("{m}: {e}"))?)))
        .collect()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = cli_pipeline(a.path())?;
    let second = cli_pipeline(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    ensure(first.len() == 7, format!("{} manifests byte-identical across reruns", first.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 workload golden values", workload_golden, Duration::from_secs(1)),
        ("2 lower bound n1=8", lower_bound, Duration::from_secs(1)),
        ("3 workload limit n1=16", limit, Duration::from_secs(1)),
        ("4 keep-all exactness", keep_all_exactness, Duration::from_secs(120)),
        ("5 fusion suite", fusion_suite, Duration::MAX),
        ("6 pairing oracle", pairing_oracle, Duration::MAX),
        ("7 protection contract", protection_contract, Duration::MAX),
        ("8 separable-data metrics", separable_metrics, Duration::MAX),
        ("9 CLI determinism", determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > budget => Err(format!("{d}; over the {budget:?} budget")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
