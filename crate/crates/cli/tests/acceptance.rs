//! Acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.
//!
//! Oracles here are written independently of the library: brute-force
//! set intersections, rational arithmetic, O(P²) transitive closure and
//! direct centroid scans.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use crackscan_core::dataset::{split_by_crack, DatasetStats, FeatureMask, NormalizationStats, NEGATIVE_BAND};
use crackscan_core::downsampler::downsample_traced;
use crackscan_core::metrics::{crack_continuity, crack_detection_rate, crack_precision, match_instances, WIDE_CRACK};
use crackscan_core::pipeline::{evaluate_layers, score_clouds, training_windows, tune_clustering, WindowConfig};
use crackscan_core::scorer::loss::{binary_cross_entropy, sigmoid_confidence};
use crackscan_core::scorer::{focal_loss, focal_loss_gradient};
use crackscan_core::synthgen::{generate_dataset, Dataset, DatasetSpec, SurfaceSpec};
use crackscan_core::{
    cluster, init_model, pointwise, predict, read_ply, threshold_sweep, train, write_cloud, AnnotationLayer,
    CrackInstance, LabeledPoint, PlyFormat, PointCloud, ScorerModel, TrainingConfig,
    Voxel, VoxelizationConfig,
};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact `num / den`, reduced before the single rounding division.
fn ratio(num: u128, den: u128) -> f64 {
    let g = gcd(num, den).max(1);
    (num / g) as f64 / (den / g) as f64
}

struct Fixture {
    real: Vec<CrackInstance>,
    predicted: Vec<CrackInstance>,
    truth: Vec<u8>,
    labels: Vec<u8>,
}

fn random_fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let n = r.random_range(1..=500usize);
    let pts: Vec<LabeledPoint> = (0..n)
        .map(|_| LabeledPoint::new(r.random(), r.random(), r.random()))
        .collect();
    let cloud = PointCloud::new(format!("fx{seed}"), pts);
    // Disjoint random groups on each side; the sides overlap freely.
    let side = |max_groups: usize, r: &mut ChaCha8Rng| -> Vec<Vec<u32>> {
        let k = r.random_range(0..=max_groups);
        let mut ids: Vec<u32> = (0..n as u32).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, r.random_range(0..=i));
        }
        let mut out = Vec::new();
        let mut at = 0;
        for _ in 0..k {
            if at >= n {
                break;
            }
            let len = r.random_range(1..=((n - at).min(60)));
            out.push(ids[at..at + len].to_vec());
            at += len;
        }
        out
    };
    let real_sets = side(10, &mut r);
    // Predictions are often built from real sets plus noise so matches occur.
    let mut pred_sets = side(10, &mut r);
    for p in pred_sets.iter_mut() {
        if r.random_bool(0.5) && !real_sets.is_empty() {
            let src = &real_sets[r.random_range(0..real_sets.len())];
            let keep = r.random_range(1..=src.len());
            *p = src[..keep].to_vec();
        }
    }
    // Predicted instances must be disjoint among themselves.
    let mut used = HashSet::new();
    pred_sets = pred_sets
        .into_iter()
        .map(|s| s.into_iter().filter(|m| used.insert(*m)).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    let real: Vec<CrackInstance> = real_sets
        .into_iter()
        .enumerate()
        .map(|(i, m)| CrackInstance::from_members(i as u32 + 1, m, &cloud))
        .collect();
    let predicted: Vec<CrackInstance> = pred_sets
        .into_iter()
        .enumerate()
        .map(|(i, m)| CrackInstance::from_members(i as u32 + 1, m, &cloud))
        .collect();
    let mut truth = vec![0u8; n];
    for i in &real {
        for &m in &i.members {
            truth[m as usize] = 1;
        }
    }
    // Point labels are independent noise around the predictions.
    let mut labels = vec![0u8; n];
    for i in &predicted {
        for &m in &i.members {
            labels[m as usize] = 1;
        }
    }
    for l in labels.iter_mut() {
        if r.random_bool(0.05) {
            *l ^= 1;
        }
    }
    Fixture {
        real,
        predicted,
        truth,
        labels,
    }
}

struct OracleCrackMetrics {
    det: Option<f64>,
    con: Option<f64>,
    pre: Option<f64>,
}

/// `alpha = an / ad` exactly.
fn oracle_crack_metrics(fx: &Fixture, an: u128, ad: u128) -> OracleCrackMetrics {
    let mut hits: BTreeMap<u32, u128> = BTreeMap::new();
    let mut matched_predictions = 0u128;
    for p in &fx.predicted {
        let ps: BTreeSet<u32> = p.members.iter().copied().collect();
        let mut best: Option<(u32, usize)> = None;
        for r in &fx.real {
            let inter = r.members.iter().filter(|m| ps.contains(m)).count();
            if inter == 0 || (inter as u128) * ad < an * ps.len() as u128 {
                continue;
            }
            if best.is_none_or(|(bid, bc)| inter > bc || (inter == bc && r.id < bid)) {
                best = Some((r.id, inter));
            }
        }
        if let Some((rid, _)) = best {
            *hits.entry(rid).or_insert(0) += 1;
            matched_predictions += 1;
        }
    }
    let n_cr = fx.real.len() as u128;
    let det = (n_cr > 0).then(|| ratio(hits.len() as u128, n_cr));
    let con = (n_cr > 0).then(|| {
        // Σ 1/k over a common denominator 2520 = lcm(1..=10), k ≤ 10.
        let num: u128 = hits.values().map(|&k| 2520 / k).sum();
        ratio(num, 2520 * n_cr)
    });
    let pre = (!fx.predicted.is_empty()).then(|| ratio(matched_predictions, fx.predicted.len() as u128));
    OracleCrackMetrics { det, con, pre }
}

fn criterion_1() -> Outcome {
    let mut checked = 0;
    let mut matched_any = 0;
    for seed in 0..200u64 {
        let fx = random_fixture(seed);
        let ctx = |what: &str| format!("fixture {seed}: {what} differs from the oracle");

        let mut c = [0u128; 4];
        for (&p, &t) in fx.labels.iter().zip(&fx.truth) {
            c[(p as usize) << 1 | t as usize] += 1;
        }
        let (tn, fneg, fp, tp) = (c[0], c[1], c[2], c[3]);
        let s = pointwise(&fx.labels, &fx.truth).map_err(|e| e.to_string())?;
        let want_p = if tp + fp == 0 { 0.0 } else { ratio(tp, tp + fp) };
        let want_r = if tp + fneg == 0 { 0.0 } else { ratio(tp, tp + fneg) };
        let want_s = if tn + fp == 0 { 1.0 } else { ratio(tn, tn + fp) };
        ensure(
            s.precision == want_p && s.recall == want_r && s.specificity == want_s,
            || ctx("pointwise"),
        )?;

        for (an, ad) in [(1u128, 2u128), (1, 4), (3, 4), (1, 1)] {
            let alpha = an as f64 / ad as f64;
            let table = match_instances(&fx.predicted, &fx.real, alpha);
            let o = oracle_crack_metrics(&fx, an, ad);
            ensure(crack_detection_rate(&table, fx.real.len()).ok() == o.det, || ctx("cr_det"))?;
            ensure(crack_continuity(&table, fx.real.len()).ok() == o.con, || ctx("cr_con"))?;
            ensure(crack_precision(&table).ok() == o.pre, || ctx("cr_pre"))?;
            // Every match must satisfy the overlap rule and pick the best real crack.
            for m in &table.matches {
                let p = fx.predicted.iter().find(|p| p.id == m.predicted).unwrap();
                let r = fx.real.iter().find(|r| r.id == m.real).unwrap();
                let inter = r.members.iter().filter(|x| p.members.contains(x)).count();
                ensure(inter == m.intersection, || ctx("match intersection"))?;
            }
            matched_any += table.matches.len();
            checked += 1;
        }
    }
    ensure(matched_any > 0, || "fixtures never produced a match".into())?;
    Ok(format!("{checked} fixture/alpha cases equal the brute-force oracle exactly"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut worst_a: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(1..64);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.001..0.999)).collect();
        let y: Vec<u8> = (0..n).map(|_| r.random_bool(0.3) as u8).collect();
        let f = focal_loss(&p, &y, 0.0, 0.5).unwrap();
        let b = 0.5 * binary_cross_entropy(&p, &y).unwrap();
        let rel = ((f - b) / b).abs();
        worst_a = worst_a.max(rel);
    }
    ensure(worst_a <= 1e-12, || format!("(a) gamma=0 relative error {worst_a:e}"))?;

    let hand = 0.75 * 0.25 * -(0.5f64.ln());
    let got = focal_loss(&[0.5], &[1], 2.0, 0.75).unwrap();
    ensure((got - hand).abs() <= 1e-9, || format!("(b) {got} vs {hand}"))?;

    // Each logit only moves its own term, so the derivative of that term
    // (scaled by 1/n) is checked with a fourth-order central stencil.
    let mut worst_c: f64 = 0.0;
    let h = 1e-3;
    for batch in 0..12 {
        let n = r.random_range(1..32);
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        let y: Vec<u8> = (0..n).map(|_| r.random_bool(0.4) as u8).collect();
        let gamma = [0.0, 0.5, 1.0, 2.0, 4.0][batch % 5];
        let alpha = r.random_range(0.1..0.9);
        let p: Vec<f64> = z.iter().map(|&z| sigmoid_confidence(z)).collect();
        let g = focal_loss_gradient(&p, &y, gamma, alpha).unwrap();
        for i in 0..n {
            let at = |dz: f64| focal_loss(&[sigmoid_confidence(z[i] + dz)], &y[i..=i], gamma, alpha).unwrap() / n as f64;
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(1e-300);
            worst_c = worst_c.max(rel);
        }
    }
    ensure(worst_c <= 1e-4, || format!("(c) worst gradient relative error {worst_c:e}"))?;
    Ok(format!(
        "(a) rel err {worst_a:.1e}, (b) {got:.9} = 0.75*0.25*ln2, (c) worst grad rel err {worst_c:.1e} over 12 batches"
    ))
}

// ---------------------------------------------------------------- 3

fn random_voxel_points(r: &mut ChaCha8Rng, count: usize) -> Vec<(u32, [f64; 3])> {
    let mode = r.random_range(0..3);
    (0..count as u32)
        .map(|i| {
            let p = match mode {
                // Uniform cube.
                0 => [r.random(), r.random(), r.random()],
                // Thin noisy surface.
                1 => [r.random(), r.random(), 0.02 * r.random::<f64>()],
                // Coarse lattice with repeated positions.
                _ => [
                    r.random_range(0..12) as f64 * 0.1,
                    r.random_range(0..12) as f64 * 0.1,
                    r.random_range(0..4) as f64 * 0.1,
                ],
            };
            (i, p)
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut voxels = 0;
    let mut merged = 0;
    let mut seed = 0u64;
    while voxels < 1000 {
        seed += 1;
        let mut r = rng(30_000 + seed);
        let n = r.random_range(8..=128usize);
        let count = r.random_range(n..=4 * n);
        let pts = random_voxel_points(&mut r, count);
        let distinct: HashSet<[u64; 3]> = pts.iter().map(|p| p.1.map(f64::to_bits)).collect();
        if distinct.len() < n {
            continue;
        }
        let ds_seed = r.random();
        let out = downsample_traced(&pts, n, ds_seed).map_err(|e| format!("voxel {seed}: {e}"))?;
        let again = downsample_traced(&pts, n, ds_seed).unwrap();
        ensure(out.ids == again.ids, || format!("voxel {seed}: not deterministic"))?;
        ensure(out.ids.len() == n, || format!("voxel {seed}: {} points for n={n}", out.ids.len()))?;
        let input: HashSet<u32> = pts.iter().map(|p| p.0).collect();
        let chosen: HashSet<u32> = out.ids.iter().copied().collect();
        ensure(chosen.len() == n && chosen.is_subset(&input), || {
            format!("voxel {seed}: output is not an n-subset of the input")
        })?;
        ensure(out.groups.len() == n, || format!("voxel {seed}: {} groups", out.groups.len()))?;
        let pos: HashMap<u32, [f64; 3]> = pts.iter().copied().collect();
        let mut covered = 0;
        for g in &out.groups {
            covered += g.members.len();
            let mut c = [0.0; 3];
            for m in &g.members {
                for a in 0..3 {
                    c[a] += pos[m][a];
                }
            }
            c = c.map(|v| v / g.members.len() as f64);
            let d2 = |m: &u32| (0..3).map(|a| (pos[m][a] - c[a]).powi(2)).sum::<f64>();
            let emitted: Vec<&u32> = g.members.iter().filter(|m| chosen.contains(m)).collect();
            ensure(emitted.len() == 1, || format!("voxel {seed}: group emits {} points", emitted.len()))?;
            let best = g.members.iter().map(d2).fold(f64::INFINITY, f64::min);
            // Distances are compared up to rounding of the centroid.
            ensure(d2(emitted[0]) <= best * (1.0 + 1e-12) + 1e-300, || {
                format!("voxel {seed}: emitted point is not the closest to its group centroid")
            })?;
        }
        ensure(covered == count, || format!("voxel {seed}: groups do not partition the input"))?;
        merged += out.merges;
        voxels += 1;
    }
    Ok(format!("{voxels} voxels, {merged} cell merges, all invariants hold"))
}

// ---------------------------------------------------------------- 4

/// Two-sided sign test p-value for `wins` successes among `trials`.
fn sign_test(wins: usize, trials: usize) -> f64 {
    let k = wins.min(trials - wins);
    let mut tail = 0.0;
    let mut c = 1.0f64;
    for i in 0..=k {
        if i > 0 {
            c *= (trials - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail * 0.5f64.powi(trials as i32)).min(1.0)
}

fn criterion_4() -> Outcome {
    let (total, minority, n) = (5000usize, 50usize, 512usize);
    let mut alg = Vec::new();
    let mut uni = Vec::new();
    for seed in 0..100u64 {
        let mut r = rng(40_000 + seed);
        // Dense surface layer plus a sparse cluster below it.
        let mut pts: Vec<(u32, [f64; 3])> = (0..total - minority)
            .map(|i| (i as u32, [r.random(), r.random(), 0.02 * r.random::<f64>()]))
            .collect();
        let minority_ids: HashSet<u32> = ((total - minority) as u32..total as u32).collect();
        for &i in &minority_ids {
            let p = [
                r.random_range(0.3..0.7),
                r.random_range(0.3..0.7),
                r.random_range(-0.3..-0.05),
            ];
            pts.push((i, p));
        }
        let kept = downsample_traced(&pts, n, r.random()).map_err(|e| e.to_string())?.ids;
        let a = kept.iter().filter(|i| minority_ids.contains(i)).count() as f64 / minority as f64;
        let u = index::sample(&mut r, total, n)
            .into_iter()
            .filter(|&i| minority_ids.contains(&(i as u32)))
            .count() as f64
            / minority as f64;
        alg.push(a);
        uni.push(u);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mu) = (mean(&alg), mean(&uni));
    let wins = alg.iter().zip(&uni).filter(|(a, u)| a > u).count();
    let losses = alg.iter().zip(&uni).filter(|(a, u)| a < u).count();
    let p = sign_test(wins, wins + losses);
    let summary = format!("retention {ma:.3} vs uniform {mu:.3} ({:.1}x), sign test {wins}/{} p={p:.1e}", ma / mu, wins + losses);
    ensure(ma >= 2.0 * mu && p < 0.01, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 5

fn oracle_clusters(pts: &[(u32, [f64; 3])], r: f64) -> Vec<Vec<u32>> {
    let n = pts.len();
    let mut comp = vec![usize::MAX; n];
    let mut out = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = out.len();
        let mut stack = vec![s];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(pts[i].0);
            for j in 0..n {
                let d2: f64 = (0..3).map(|a| (pts[i].1[a] - pts[j].1[a]).powi(2)).sum();
                if comp[j] == usize::MAX && d2 < r * r {
                    comp[j] = out.len();
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out.sort();
    out
}

fn criterion_5() -> Outcome {
    let mut boundary_pairs = 0;
    for seed in 0..200u64 {
        let mut r = rng(50_000 + seed);
        let count = r.random_range(1..=500usize);
        let lattice = seed % 2 == 0;
        let delta_r = if lattice { 0.5 } else { r.random_range(0.02..0.3) };
        let pts: Vec<(u32, [f64; 3])> = (0..count)
            .map(|i| {
                let p = if lattice {
                    // Quarter-step lattice: many pairs lie at exactly 0.5.
                    [
                        r.random_range(0..24) as f64 * 0.25,
                        r.random_range(0..24) as f64 * 0.25,
                        r.random_range(0..3) as f64 * 0.25,
                    ]
                } else {
                    [r.random(), r.random(), 0.1 * r.random::<f64>()]
                };
                (i as u32 * 3 + 7, p)
            })
            .collect();
        if lattice {
            for i in 0..count {
                for j in i + 1..count {
                    let d2: f64 = (0..3).map(|a| (pts[i].1[a] - pts[j].1[a]).powi(2)).sum();
                    boundary_pairs += (d2 == delta_r * delta_r) as usize;
                }
            }
        }
        let mut got = cluster(&pts, delta_r);
        got.iter_mut().for_each(|c| c.sort_unstable());
        got.sort();
        ensure(got == oracle_clusters(&pts, delta_r), || {
            format!("instance {seed}: partition differs from the transitive closure")
        })?;
    }
    ensure(boundary_pairs > 0, || "no pair at exactly delta_r".into())?;
    Ok(format!("200 instances equal the O(P^2) closure, {boundary_pairs} pairs at exactly delta_r"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let pts: Vec<LabeledPoint> = (0..200)
        .map(|i| {
            let mut p = LabeledPoint::new((i % 20) as f32 * 0.02, (i / 20) as f32 * 0.02, (i % 7) as f32 * 0.003);
            p.r = (i * 7 % 256) as u8;
            p.intensity = i as f32;
            p
        })
        .collect();
    let cloud = PointCloud::new("bias", pts);
    let stats = NormalizationStats::from_clouds([&cloud], 0.5);
    let voxel = Voxel {
        origin: [0.0; 3],
        index: [0; 3],
        members: (0..200).collect(),
        source: "bias".into(),
    };
    let nv = crackscan_core::normalize_voxel(&voxel, &cloud, &stats, FeatureMask::ALL);
    let mut worst: f64 = 0.0;
    for (pos, neg) in [(1usize, 1usize), (1, 9), (1, 999)] {
        let prior = pos as f64 / (pos + neg) as f64;
        let model = init_model(
            &TrainingConfig::default(),
            DatasetStats {
                positives: pos,
                negatives: neg,
            },
            stats.clone(),
            FeatureMask::ALL,
            6,
        )
        .map_err(|e| e.to_string())?;
        let c = predict(&model, &nv);
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        worst = worst.max((mean - prior).abs());
    }
    ensure(worst <= 1e-12, || format!("worst deviation {worst:e}"))?;
    Ok(format!("priors 0.5, 0.1, 0.001 reproduced within {worst:.1e}"))
}

// ---------------------------------------------------------------- 7 & 8

const DESK_D: f64 = 0.25;
const DESK_N: usize = 512;

fn desk_windows() -> WindowConfig {
    WindowConfig {
        voxel: VoxelizationConfig {
            d: DESK_D,
            n: DESK_N,
            s: DESK_D / 2.0,
        },
        augment_copies: 2,
        max_offset: DESK_D / 2.0,
    }
}

fn max_width_range(ds: &Dataset) -> (f64, f64) {
    ds.manifest
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), c| (lo.min(c.max_width), hi.max(c.max_width)))
}

struct Trained {
    model: ScorerModel,
    delta_h: f64,
}

fn criterion_7() -> (Outcome, Option<Trained>) {
    let run = || -> Result<(String, Trained), String> {
        let spec = DatasetSpec {
            prefix: "desk".into(),
            surfaces: 10,
            cracks_per_surface: 4,
            surface: SurfaceSpec {
                extent: [2.5, 2.5],
                density: 12_000.0,
                ..SurfaceSpec::default()
            },
            width_range: [0.005, 0.10],
            length_range: [0.4, 0.8],
            retain: 0.7,
            seed: 7,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).map_err(|e| e.to_string())?;
        let area = spec.surfaces as f64 * spec.surface.extent[0] * spec.surface.extent[1];
        let (w_lo, w_hi) = max_width_range(&ds);
        let min_width = ds.manifest.iter().map(|c| c.min_width).fold(f64::INFINITY, f64::min);
        let frac = ds.crack_fraction();
        ensure(area >= 20.0 && ds.manifest.len() >= 30, || "dataset too small".into())?;
        ensure(min_width >= 0.005 - 1e-12 && w_hi <= 0.10 + 1e-12, || {
            format!("widths outside 0.5-10 cm: {min_width}..{w_hi}")
        })?;
        ensure(frac <= 0.01, || format!("crack fraction {frac:.4} > 1%"))?;

        let split = split_by_crack(&ds.clouds, 1, NEGATIVE_BAND).map_err(|e| e.to_string())?;
        let mask = FeatureMask::ALL;
        let stats = NormalizationStats::from_clouds(&split.train, DESK_D);
        let wc = desk_windows();
        let train_w = training_windows(&split.train, &wc, &stats, mask, 3);
        let val_wc = WindowConfig {
            augment_copies: 0,
            ..wc
        };
        let val_w = training_windows(&split.validation, &val_wc, &stats, mask, 4);
        let class_stats = DatasetStats::from_labels(train_w.iter().flat_map(|v| v.labels.iter()));
        let cfg = TrainingConfig {
            epochs: 30,
            gamma: 4.0,
            alpha: 0.75,
            seed: 5,
            ..TrainingConfig::default()
        };
        let init = init_model(&cfg, class_stats, stats, mask, 9).map_err(|e| e.to_string())?;
        let (model, history) = train(&init, &train_w, &val_w, &cfg).map_err(|e| e.to_string())?;

        let val_layers = score_clouds(&split.validation, &model, &wc.voxel, 11).map_err(|e| e.to_string())?;
        let (best, _) = tune_clustering(
            &split.validation,
            &val_layers,
            &[0.3, 0.4, 0.5, 0.59, 0.7, 0.8],
            &[0.03, 0.05, 0.08],
            &[3, 5, 10, 20],
            0.5,
        )
        .map_err(|e| e.to_string())?;
        let test_layers =
            score_clouds(&split.test, &model, &wc.voxel.without_overlap(), 12).map_err(|e| e.to_string())?;
        let widths = ds.max_widths();
        let rep = evaluate_layers(&split.test, &test_layers, &best, 0.5, Some(&widths)).map_err(|e| e.to_string())?;
        let det = rep.cr_det().map_err(|e| e.to_string())?;
        let con = rep.cr_con().map_err(|e| e.to_string())?;
        let wide: Vec<_> = rep.sizes.iter().filter(|s| s.max_width.is_some_and(|w| w >= WIDE_CRACK)).collect();
        let wide_hit = wide.iter().filter(|s| s.detected).count();
        let summary = format!(
            "{area} m2, {} cracks ({:.1}-{:.1} cm), crack fraction {:.2}%, best epoch {}, delta_h={} delta_r={} delta_n={}; test cr_det {det:.3} ({}/{}), cr_con {con:.3}, wide {wide_hit}/{}",
            ds.manifest.len(),
            w_lo * 100.0,
            w_hi * 100.0,
            frac * 100.0,
            history.best_epoch,
            best.confidence_threshold,
            best.link_distance,
            best.min_cluster_size,
            rep.detected,
            rep.n_cr,
            wide.len()
        );
        ensure(det >= 0.90 && con >= 0.8 && !wide.is_empty() && wide_hit == wide.len(), || summary.clone())?;
        Ok((
            summary,
            Trained {
                model,
                delta_h: best.confidence_threshold,
            },
        ))
    };
    match run() {
        Ok((s, t)) => (Ok(s), Some(t)),
        Err(e) => (Err(e), None),
    }
}

fn criterion_8(trained: Option<&Trained>) -> Outcome {
    let trained = trained.ok_or("needs the model from criterion 7")?;
    let spec = DatasetSpec {
        prefix: "cross".into(),
        surfaces: 10,
        cracks_per_surface: 4,
        surface: SurfaceSpec {
            extent: [2.5, 2.5],
            density: 12_000.0,
            roughness: 0.05,
            octaves: 6,
            base_frequency: 2.0,
            gain: 0.6,
            ..SurfaceSpec::default()
        },
        width_range: [0.02, 0.12],
        length_range: [0.4, 0.8],
        retain: 0.7,
        seed: 1234,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec).map_err(|e| e.to_string())?;
    let split = split_by_crack(&ds.clouds, 2, NEGATIVE_BAND).map_err(|e| e.to_string())?;
    let wc = desk_windows();
    let val_layers = score_clouds(&split.validation, &trained.model, &wc.voxel, 21).map_err(|e| e.to_string())?;
    let (best, _) = tune_clustering(
        &split.validation,
        &val_layers,
        &[trained.delta_h],
        &[0.03, 0.05, 0.08, 0.12],
        &[3, 5, 10, 20, 50],
        0.5,
    )
    .map_err(|e| e.to_string())?;
    let test_layers =
        score_clouds(&split.test, &trained.model, &wc.voxel.without_overlap(), 22).map_err(|e| e.to_string())?;
    let rep = evaluate_layers(&split.test, &test_layers, &best, 0.5, None).map_err(|e| e.to_string())?;
    let det = rep.cr_det().map_err(|e| e.to_string())?;
    let (lo, hi) = max_width_range(&ds);
    let summary = format!(
        "{} cracks ({:.1}-{:.1} cm), retuned delta_r={} delta_n={}; test cr_det {det:.3} ({}/{})",
        ds.manifest.len(),
        lo * 100.0,
        hi * 100.0,
        best.link_distance,
        best.min_cluster_size,
        rep.detected,
        rep.n_cr
    );
    ensure(det >= 0.90, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 9

const TINY_CONFIG: &str = "\
seed = 11
surfaces = 3
cracks_per_surface = 3
extent_x = 1.5
extent_y = 1.5
density = 8000
length_max = 0.6
separation = 0.3
d = 0.25
n = 256
s = 0.125
augment_copies = 1
max_offset = 0.125
epochs = 4
delta_h = 0.5
delta_r = 0.05
delta_n = 5
tune = true
";

fn run_pipeline(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let conf = root.join("tiny.conf");
    std::fs::write(&conf, TINY_CONFIG).map_err(|e| e.to_string())?;
    let run_dir = root.join("run");
    let base = |cmd: &str| {
        vec![
            "crackscan".to_string(),
            cmd.to_string(),
            "--config".to_string(),
            conf.display().to_string(),
            "--run_dir".to_string(),
            run_dir.display().to_string(),
        ]
    };
    for (cmd, extra) in [
        ("synth", vec![]),
        ("prepare", vec![]),
        ("train", vec![]),
        ("detect", vec!["--split", "val"]),
        ("detect", vec![]),
        ("evaluate", vec![]),
    ] {
        let mut args = base(cmd);
        args.extend(extra.into_iter().map(String::from));
        crackscan::run(&args).map_err(|e| format!("{cmd}: {e:#}"))?;
    }
    let dir = run_dir.join("evaluate").join("test");
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            std::fs::read(&p).map(|b| (name, b)).map_err(|e| e.to_string())
        })
        .collect()
}

fn ply_round_trip(dir: &Path) -> Result<usize, String> {
    let mut r = rng(9);
    let pts: Vec<LabeledPoint> = (0..500)
        .map(|_| {
            let mut p = LabeledPoint::new(
                r.random_range(-1e3..1e3),
                r.random::<f32>() * 1e-3,
                f32::from_bits(r.random_range(0x3000_0000..0x4f00_0000)),
            );
            p.r = r.random();
            p.g = r.random();
            p.b = r.random();
            p.intensity = r.random_range(-5.0..5.0);
            p.label = r.random_bool(0.2) as u8;
            p.instance = if p.label == 1 { r.random_range(1..9) } else { 0 };
            p
        })
        .collect();
    let cloud = PointCloud::new("round trip", pts);
    let layer = AnnotationLayer {
        confidence: (0..500).map(|_| r.random::<f32>()).collect(),
        predicted: (0..500).map(|_| r.random_bool(0.3) as u8).collect(),
        cluster_id: (0..500).map(|_| r.random_range(-1..40)).collect(),
        classified: (0..500).map(|_| r.random_bool(0.9)).collect(),
    };
    let bits = |c: &PointCloud| -> Vec<_> {
        c.points()
            .iter()
            .map(|p| {
                (
                    p.id,
                    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), p.intensity.to_bits()],
                    [p.r, p.g, p.b, p.label],
                    p.instance,
                )
            })
            .collect()
    };
    let layer_bits = |l: &AnnotationLayer| {
        (
            l.confidence.iter().map(|c| c.to_bits()).collect::<Vec<_>>(),
            l.predicted.clone(),
            l.cluster_id.clone(),
            l.classified.clone(),
        )
    };
    for (fmt, name) in [(PlyFormat::Ascii, "a.ply"), (PlyFormat::BinaryLittleEndian, "b.ply")] {
        let path = dir.join(name);
        write_cloud(&cloud, Some(&layer), &path, fmt).map_err(|e| e.to_string())?;
        let back = read_ply(&path).map_err(|e| e.to_string())?;
        ensure(back.cloud.tag == cloud.tag && bits(&back.cloud) == bits(&cloud), || {
            format!("{fmt:?}: point fields differ after the round trip")
        })?;
        let ann = back.annotations.ok_or("annotations lost")?;
        ensure(layer_bits(&ann) == layer_bits(&layer), || format!("{fmt:?}: annotations differ"))?;
    }
    Ok(cloud.len())
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    ensure(names.contains(&"metrics.txt") && names.contains(&"metrics.csv"), || {
        format!("missing reports: {names:?}")
    })?;
    ensure(first == second, || "metric reports differ between identical runs".into())?;
    let points = ply_round_trip(a.path())?;
    Ok(format!(
        "{} report files byte-identical across two runs; {points}-point PLY exact in ascii and binary",
        first.len()
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut thresholds: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    thresholds.push(0.59);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    for seed in 0..50u64 {
        let mut r = rng(10_000 + seed);
        let n = r.random_range(1..2000usize);
        let mut layer = AnnotationLayer::unscored(n);
        let truth: Vec<u8> = (0..n).map(|_| r.random_bool(0.1) as u8).collect();
        for (i, c) in layer.confidence.iter_mut().enumerate() {
            // Some confidences sit exactly on a threshold.
            *c = if r.random_bool(0.2) {
                thresholds[r.random_range(0..thresholds.len())] as f32
            } else {
                let skew = if truth[i] == 1 { 0.5 } else { 0.0 };
                (r.random::<f32>() * 0.5 + skew * r.random::<f32>()).min(1.0)
            };
        }
        let sweep = threshold_sweep(&[(&layer, truth.as_slice())], &thresholds).map_err(|e| e.to_string())?;
        for w in sweep.windows(2) {
            let (a, b) = (w[0].scores(), w[1].scores());
            ensure(w[0].delta_h < w[1].delta_h, || format!("layer {seed}: thresholds out of order"))?;
            ensure(b.recall <= a.recall, || format!("layer {seed}: recall rises at {}", w[1].delta_h))?;
            ensure(b.specificity >= a.specificity, || {
                format!("layer {seed}: specificity falls at {}", w[1].delta_h)
            })?;
        }
    }
    Ok(format!("50 layers x {} thresholds monotone", thresholds.len()))
}

// ----------------------------------------------------------------

fn report(number: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = f();
    let took = t.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over budget ({took:.1?} > {budget:?})")),
        Err(e) => (false, e),
    };
    let line = format!(
        "[{}] {number:>2} {name}: {detail} ({took:.1?})",
        if ok { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    let _ = std::io::stdout().flush();
    ok
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = vec![
        report(1, "metrics oracle equivalence", secs(10), criterion_1),
        report(2, "focal loss correctness", secs(10), criterion_2),
        report(3, "downsampling invariants", secs(30), criterion_3),
        report(4, "sparse minority preservation", secs(60), criterion_4),
        report(5, "clustering equivalence", secs(30), criterion_5),
        report(6, "prior bias initialization", secs(1), criterion_6),
    ];
    let mut trained = None;
    results.push(report(7, "end-to-end synthetic detection", secs(30 * 60), || {
        let (o, t) = criterion_7();
        trained = t;
        o
    }));
    results.push(report(8, "cross-dataset generalization", secs(5 * 60), || {
        criterion_8(trained.as_ref())
    }));
    results.push(report(9, "determinism and PLY round trip", secs(60 * 60), criterion_9));
    results.push(report(10, "threshold sweep monotonicity", secs(10), criterion_10));

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
