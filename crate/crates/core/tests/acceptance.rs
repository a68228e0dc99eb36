//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=3,6` restricts the run to the listed criteria.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use eyedent::dataset;
use eyedent::eval::{self, RocCurve, Setting};
use eyedent::model::checkpoint::{self, CheckpointError};
use eyedent::model::net::Bound;
use eyedent::model::train::Stage;
use eyedent::model::{Head, Mode, ModelBundle, ModelConfig, StageFlags, TrainConfig};
use eyedent::signal::{self, InputWindow, TransformConfig, VelocitySequence, WindowOrigin, ZScoreStats, C_DOMAIN, V_MIN_DOMAIN};
use eyedent::sim::{self, PopulationSpec, SimConfig};
use eyedent_autograd::gradcheck::{self, SuiteOptions, SUITE_OPS};
use eyedent_autograd::{Tape, Tensor};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sessions_as_velocities(sessions: &[sim::Session], session_id: &str) -> Vec<VelocitySequence> {
    sessions
        .iter()
        .filter(|s| s.session_id == session_id)
        .flat_map(|s| s.recordings.iter())
        .map(|r| signal::to_velocities(r).expect("simulated recordings are valid"))
        .collect()
}

/// A fresh reduced-profile model for `train`, with the fast-view scaling
/// fitted on it.
fn fresh_model(train: &[VelocitySequence], seed: u64) -> ModelBundle {
    let tc = TransformConfig::default();
    let z = signal::fit_zscore(train, &tc).expect("enough fast samples");
    let mut labels: Vec<String> = train.iter().map(|v| v.subject_id.clone()).collect();
    labels.sort();
    labels.dedup();
    ModelBundle::new(ModelConfig::reduced(), labels, tc, z, seed).expect("valid model")
}

fn windows_of(bundle: &ModelBundle, seqs: &[VelocitySequence], stride: usize) -> Vec<InputWindow> {
    seqs.iter()
        .enumerate()
        .flat_map(|(i, s)| bundle.windows_for(s, stride, i))
        .collect()
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b })
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::run_suite(&SuiteOptions {
        seeds: 20,
        base_seed: 0,
        corrupt: None,
    });
    let elapsed = t.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all_listed = reports.len() == SUITE_OPS.len() && reports.iter().zip(SUITE_OPS).all(|(r, op)| r.op == op);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed || r.max_rel_error >= 1e-4 || r.seeds < 20)
        .map(|r| r.op)
        .collect();
    check(
        failing.is_empty() && all_listed && elapsed < Duration::from_secs(60),
        format!(
            "{} operators × 20 seeds in f64, worst relative error {worst:.2e} (< 1e-4), {:.1} s (< 60 s){}",
            reports.len(),
            elapsed.as_secs_f64(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing: {failing:?}")
            }
        ),
    )
}

fn shape_fidelity() -> Outcome {
    let z = ZScoreStats {
        mean_x: 0.0,
        mean_y: 0.0,
        sd_x: 1.0,
        sd_y: 1.0,
    };
    let mut bundle =
        ModelBundle::new(ModelConfig::full(), vec!["a".into(), "b".into()], TransformConfig::default(), z, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f32> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut shapes = Vec::new();
    let mut embeddings = Vec::new();
    for net in [&bundle.slow, &bundle.fast] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1000, 2], data.clone()).map_err(|e| e.to_string())?);
        let h = net
            .features(&mut tape, x, Mode::Infer, &mut Bound::new())
            .map_err(|e| e.to_string())?;
        shapes.push(tape.shape(h).to_vec());
        let out = net.forward(&mut tape, x, Mode::Infer).map_err(|e| e.to_string())?;
        embeddings.push(tape.shape(out.embedding).to_vec());
    }
    {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 256], vec![0.5; 256]).map_err(|e| e.to_string())?);
        let out = bundle.joint.forward(&mut tape, x, Mode::Infer).map_err(|e| e.to_string())?;
        embeddings.push(tape.shape(out.embedding).to_vec());
    }
    bundle.trained = StageFlags {
        slow: true,
        fast: true,
        joint: true,
    };
    let w = InputWindow {
        slow: data.clone(),
        fast: data,
        len: 1000,
        label: None,
        origin: WindowOrigin { sequence: 0, start: 0 },
    };
    let full = bundle.embed(&[&w]).map_err(|e| e.to_string())?;
    let ok = shapes == [vec![1, 947, 256], vec![1, 947, 512]] && embeddings.iter().all(|s| s == &[1, 128]) && full[0].len() == 384;
    check(
        ok,
        format!(
            "pre-flatten slow {:?} fast {:?}; embeddings slow/fast/joint {:?}; concatenated {}",
            shapes[0],
            shapes[1],
            embeddings.iter().map(|s| s[1]).collect::<Vec<_>>(),
            full[0].len()
        ),
    )
}

/// Exact value of a finite double as `mantissa · 2^exp`.
fn decode(x: f64) -> (u64, i32) {
    let bits = x.abs().to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    }
}

/// `dx² + dy² < v²` in exact integer arithmetic.
fn exactly_below(dx: f64, dy: f64, v: f64) -> bool {
    let parts = [decode(dx), decode(dy), decode(v)];
    let base = parts.iter().map(|&(_, e)| 2 * e).min().expect("three parts");
    let sq = |(m, e): (u64, i32)| (BigUint::from(m) * BigUint::from(m)) << ((2 * e - base) as usize);
    sq(parts[0]) + sq(parts[1]) < sq(parts[2])
}

fn transform_exactness() -> Outcome {
    const N: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let magnitude = |rng: &mut ChaCha8Rng| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        match rng.random_range(0..4) {
            0 => sign * rng.random_range(0.0..50.0),
            1 => sign * rng.random_range(0.0..1000.0),
            2 => sign * 10f64.powf(rng.random_range(-6.0..6.0)),
            _ => sign * 10f64.powf(rng.random_range(2.0..300.0)),
        }
    };

    let mut slow_bad = 0usize;
    let mut odd_err = 0.0f64;
    for c in C_DOMAIN {
        let cfg = TransformConfig { c, v_min: 40.0 };
        let pairs: Vec<[f64; 2]> = (0..N / C_DOMAIN.len())
            .map(|_| [magnitude(&mut rng), magnitude(&mut rng)])
            .collect();
        let neg: Vec<[f64; 2]> = pairs.iter().map(|p| [-p[0], -p[1]]).collect();
        let (a, b) = (signal::transform_slow(&pairs, &cfg), signal::transform_slow(&neg, &cfg));
        for (p, q) in a.iter().zip(&b) {
            for k in 0..2 {
                if !(p[k] > -1.0 && p[k] < 1.0) {
                    slow_bad += 1;
                }
                odd_err = odd_err.max((p[k] + q[k]).abs());
            }
        }
    }

    let stats = ZScoreStats {
        mean_x: 3.7,
        mean_y: -1.2,
        sd_x: 55.0,
        sd_y: 41.0,
    };
    let zero = stats.z_zero();
    let (mut misclassified, mut boundary, mut below) = (0usize, 0usize, 0usize);
    for v in V_MIN_DOMAIN {
        let cfg = TransformConfig { c: 0.02, v_min: v };
        let pairs: Vec<[f64; 2]> = (0..N / V_MIN_DOMAIN.len())
            .map(|i| match i % 4 {
                0 => [rng.random_range(-2.0 * v..2.0 * v), rng.random_range(-2.0 * v..2.0 * v)],
                1 | 2 => {
                    // on the circle, nudged by a few ulps
                    let th = rng.random_range(0.0..std::f64::consts::TAU);
                    let mut p = [v * th.cos(), v * th.sin()];
                    for x in &mut p {
                        for _ in 0..rng.random_range(0..4) {
                            *x = if rng.random_bool(0.5) { x.next_up() } else { x.next_down() };
                        }
                    }
                    p
                }
                _ => {
                    let s = [0.6 * v, 0.8 * v, v, 0.0];
                    [s[rng.random_range(0..4)], s[rng.random_range(0..4)]]
                }
            })
            .collect();
        let out = signal::transform_fast(&pairs, &cfg, &stats);
        for (p, o) in pairs.iter().zip(&out) {
            let truth = exactly_below(p[0], p[1], v);
            let floored = o[0].to_bits() == zero[0].to_bits() && o[1].to_bits() == zero[1].to_bits();
            if truth != floored {
                misclassified += 1;
            }
            below += truth as usize;
            let r = p[0].hypot(p[1]);
            boundary += ((r - v).abs() < 1e-12 * v) as usize;
        }
    }
    check(
        slow_bad == 0 && odd_err <= 1e-12 && misclassified == 0,
        format!(
            "slow: {slow_bad} of {N}×2 outputs outside (−1,1), max |f(x)+f(−x)| = {odd_err:.1e}; \
             fast: {misclassified} of {N} misclassified ({below} below threshold, {boundary} within 1e-12 of the circle)"
        ),
    )
}

fn overfit_oracle() -> Outcome {
    let t = Instant::now();
    let sim_cfg = SimConfig {
        // 17 s of positions give 16 999 velocity samples: 16 windows each
        duration_s: 17.0,
        identity_count: 2,
        sessions_per_identity: 1,
        seed: 11,
        ..SimConfig::default()
    };
    let (_, sessions) = sim::generate_dataset(&sim_cfg, &PopulationSpec::default()).map_err(|e| e.to_string())?;
    let train = sessions_as_velocities(&sessions, "1");
    let mut bundle = fresh_model(&train, 11);
    let windows = windows_of(&bundle, &train, 1000);
    let refs: Vec<&InputWindow> = windows.iter().collect();
    let cfg = TrainConfig {
        max_epochs: 200,
        holdout_fraction: 0.0,
        target_train_accuracy: Some(1.0),
        seed: 11,
        ..TrainConfig::default()
    };
    bundle.train_all(&refs, &cfg).map_err(|e| e.to_string())?;
    let probs = bundle.predict(&refs, Head::Joint).map_err(|e| e.to_string())?;
    let correct = probs
        .iter()
        .zip(&windows)
        .filter(|(p, w)| Some(&bundle.labels[argmax(p)]) == w.label.as_ref())
        .count();
    let epochs: Vec<usize> = bundle.meta.stages.iter().map(|s| s.epochs.len()).collect();
    let elapsed = t.elapsed();
    check(
        windows.len() == 32 && correct == 32 && epochs.iter().all(|&e| e <= 200) && elapsed < Duration::from_secs(300),
        format!(
            "{correct}/{} training windows correct; epochs used slow/fast/joint {epochs:?} (≤ 200); {:.0} s (< 300 s)",
            windows.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn desk_identification() -> Outcome {
    let t = Instant::now();
    let sim_cfg = SimConfig {
        duration_s: 60.0,
        identity_count: 10,
        sessions_per_identity: 2,
        seed: 7,
        binocular: true,
        ..SimConfig::default()
    };
    let population = PopulationSpec::default();
    let (_, sessions) = sim::generate_dataset(&sim_cfg, &population).map_err(|e| e.to_string())?;
    let train = sessions_as_velocities(&sessions, "1");
    let test = sessions_as_velocities(&sessions, "2");
    let mut bundle = fresh_model(&train, 7);
    let windows = windows_of(&bundle, &train, 250);
    let refs: Vec<&InputWindow> = windows.iter().collect();
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    bundle.train_all(&refs, &cfg).map_err(|e| e.to_string())?;
    let trained = t.elapsed();

    let durations = [1.0, 2.0, 5.0, 10.0];
    let chunks: Vec<VelocitySequence> = test.iter().flat_map(|s| dataset::chunk(s, 10.0)).collect();
    let score = |seqs: &[VelocitySequence], head: Head| -> Result<Vec<eval::SequenceScores>, String> {
        seqs.iter()
            .map(|s| eval::score_sequence(&bundle, s, 250, head).map_err(|e| e.to_string()))
            .collect()
    };
    let curve = |scores: &[eval::SequenceScores]| -> Vec<f64> {
        eval::accuracy_vs_duration(scores, &durations).iter().map(|r| r.accuracy).collect()
    };
    let joint_scores = score(&chunks, Head::Joint)?;
    let joint = curve(&joint_scores);
    let slow = curve(&score(&chunks, Head::Slow)?);
    let fast = curve(&score(&chunks, Head::Fast)?);

    let pairs = dataset::pair_eyes(&test).ok_or("test data is not binocular")?;
    let (mut left, mut right, mut fused) = (Vec::new(), Vec::new(), Vec::new());
    for (l, r) in pairs {
        for (lc, rc) in dataset::chunk(l, 10.0).iter().zip(&dataset::chunk(r, 10.0)) {
            let (ls, rs) = (
                score(std::slice::from_ref(lc), Head::Joint)?,
                score(std::slice::from_ref(rc), Head::Joint)?,
            );
            fused.push(eval::fuse_sequences(&ls[0], &rs[0]).map_err(|e| e.to_string())?);
            left.extend(ls);
            right.extend(rs);
        }
    }
    let (left, right, fused) = (curve(&left), curve(&right), curve(&fused));
    let elapsed = t.elapsed();

    println!(
        "      {} training windows, {} test chunks of 10 s, trained in {:.0} s",
        refs.len(),
        chunks.len(),
        trained.as_secs_f64()
    );
    println!("      duration   joint    slow    fast    left   right   fused");
    for (k, d) in durations.iter().enumerate() {
        println!(
            "      {d:>6.0} s  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}",
            joint[k], slow[k], fast[k], left[k], right[k], fused[k]
        );
    }
    let at10 = joint[durations.len() - 1];
    let monotone = joint.windows(2).all(|w| w[1] >= w[0]);
    let beats_subnets = (0..durations.len()).all(|k| joint[k] >= slow[k] && joint[k] >= fast[k]);
    let fusion = (0..durations.len()).all(|k| fused[k] >= left[k].min(right[k]));
    let in_time = elapsed < Duration::from_secs(1800);
    check(
        at10 >= 0.90 && monotone && beats_subnets && fusion && in_time,
        format!(
            "10 s accuracy {at10:.3} (≥ 0.90); monotone in duration: {monotone}; joint ≥ each subnet at every duration: {beats_subnets}; \
             fused ≥ worse eye at every duration: {fusion}; {:.0} s (< 1800 s)",
            elapsed.as_secs_f64()
        ),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Ratio(i128, i128);

impl Ratio {
    fn new(n: i128, d: i128) -> Self {
        fn gcd(a: i128, b: i128) -> i128 {
            if b == 0 {
                a.abs()
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(n, d).max(1) * d.signum();
        Ratio(n / g, d / g)
    }
    fn sub(self, o: Ratio) -> Ratio {
        Ratio::new(self.0 * o.1 - o.0 * self.1, self.1 * o.1)
    }
    fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Ratio) -> Ratio {
        Ratio::new(self.0 * o.0, self.1 * o.1)
    }
    fn div(self, o: Ratio) -> Ratio {
        Ratio::new(self.0 * o.1, self.1 * o.0)
    }
    fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// Compares a curve against threshold-by-threshold counting, pairwise AUC
/// and an exact rational EER. Returns a description of the first mismatch.
fn brute_force_mismatch(genuine: &[f64], impostor: &[f64], curve: &RocCurve) -> Option<String> {
    let (g, i) = (genuine.len() as i128, impostor.len() as i128);
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    if curve.points.len() != thresholds.len() {
        return Some(format!("{} points, expected {}", curve.points.len(), thresholds.len()));
    }
    let mut rates = Vec::new();
    for (p, &t) in curve.points.iter().zip(&thresholds) {
        let tp = genuine.iter().filter(|&&s| s > t).count();
        let fp = impostor.iter().filter(|&&s| s > t).count();
        if p.threshold != t || p.tp != tp || p.fp != fp || p.tpr != tp as f64 / g as f64 || p.fpr != fp as f64 / i as f64 {
            return Some(format!("point at {t}: got {p:?}, expected tp {tp} fp {fp}"));
        }
        rates.push((Ratio::new(fp as i128, i), Ratio::new(g - tp as i128, g)));
    }

    let mut twice = 0i128;
    for &a in genuine {
        for &b in impostor {
            twice += if a > b { 2 } else { (a == b) as i128 };
        }
    }
    let auc = twice as f64 / (2 * g * i) as f64;
    if eval::auc(curve) != auc {
        return Some(format!("AUC {} vs pairwise {auc}", eval::auc(curve)));
    }

    // first segment of the (fpr, fnr) path that meets the diagonal
    let mut expected = None;
    for w in rates.windows(2) {
        let ((fa, na), (fb, nb)) = (w[0], w[1]);
        let (da, db) = (fa.sub(na), fb.sub(nb));
        if da.0 == 0 {
            expected = Some(fa);
        } else if db.0 == 0 {
            expected = Some(fb);
        } else if da.0 > 0 && db.0 < 0 {
            let t = na.sub(fa).div(fb.sub(fa).sub(nb.sub(na)));
            expected = Some(fa.add(t.mul(fb.sub(fa))));
        }
        if expected.is_some() {
            break;
        }
    }
    let expected = expected.expect("sweep crosses the diagonal").to_f64();
    if eval::eer(curve) != expected {
        return Some(format!("EER {} vs exact {expected}", eval::eer(curve)));
    }
    None
}

fn roc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draw = |rng: &mut ChaCha8Rng, n: usize, tied: bool| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if tied {
                    rng.random_range(0..12) as f64 / 8.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect()
    };
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let total = rng.random_range(2..=200);
        let ng = rng.random_range(1..total);
        let tied = trial % 2 == 0;
        let genuine = draw(&mut rng, ng, tied);
        let impostor = draw(&mut rng, total - ng, tied);
        let curve = eval::roc(&genuine, &impostor, Setting::Verification).map_err(|e| e.to_string())?;
        if let Some(m) = brute_force_mismatch(&genuine, &impostor, &curve) {
            failures.push(format!("trial {trial}: {m}"));
        }
    }
    let hand = |g: &[f64], i: &[f64]| {
        let c = eval::roc(g, i, Setting::Verification).expect("non-empty");
        (eval::auc(&c), eval::eer(&c))
    };
    let (auc1, eer1) = hand(&[0.9], &[0.1]);
    let (auc2, _) = hand(&[0.6, 0.4], &[0.5]);
    check(
        failures.is_empty() && auc1 == 1.0 && eer1 == 0.0 && auc2 == 0.5,
        format!(
            "1000 random multisets: {} mismatches{}; {{0.9}}/{{0.1}} → AUC {auc1}, EER {eer1}; {{0.6,0.4}}/{{0.5}} → AUC {auc2}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

/// A small trained model shared by the freezing and checkpoint criteria.
fn small_trained() -> Result<ModelBundle, String> {
    let sim_cfg = SimConfig {
        duration_s: 12.0,
        identity_count: 3,
        sessions_per_identity: 1,
        seed: 21,
        ..SimConfig::default()
    };
    let (_, sessions) = sim::generate_dataset(&sim_cfg, &PopulationSpec::default()).map_err(|e| e.to_string())?;
    let train = sessions_as_velocities(&sessions, "1");
    let mut bundle = fresh_model(&train, 21);
    let windows = windows_of(&bundle, &train, 500);
    let refs: Vec<&InputWindow> = windows.iter().collect();
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 21,
        ..TrainConfig::default()
    };
    bundle.train_stage(Stage::Slow, &refs, &cfg).map_err(|e| e.to_string())?;
    bundle.train_stage(Stage::Fast, &refs, &cfg).map_err(|e| e.to_string())?;
    let (slow, fast) = (bundle.slow.clone(), bundle.fast.clone());
    let before = bundle.subnet_hash();
    bundle.train_stage(Stage::Joint, &refs, &cfg).map_err(|e| e.to_string())?;
    if bundle.slow != slow || bundle.fast != fast || bundle.subnet_hash() != before {
        return Err("subnet tensors changed during joint training".into());
    }
    Ok(bundle)
}

fn freezing_contract(bundle: &ModelBundle) -> Outcome {
    let joint = bundle
        .meta
        .stages
        .iter()
        .find(|s| s.stage == "joint")
        .ok_or("no joint stage logged")?;
    let (before, after) = (joint.frozen_hash_before.as_deref(), joint.frozen_hash_after.as_deref());
    let now = bundle.subnet_hash();
    check(
        before.is_some() && before == after && after == Some(now.as_str()) && !joint.epochs.is_empty(),
        format!(
            "SHA-256 before {} / after {} over {} joint epochs; tensors unchanged",
            before.unwrap_or("-").get(..16).unwrap_or("-"),
            after.unwrap_or("-").get(..16).unwrap_or("-"),
            joint.epochs.len()
        ),
    )
}

fn rehash(bytes: &mut [u8]) {
    use sha2::{Digest, Sha256};
    let n = bytes.len() - 32;
    let d = Sha256::digest(&bytes[..n]);
    bytes[n..].copy_from_slice(&d);
}

fn checkpoint_round_trip(bundle: &ModelBundle) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.eyid");
    checkpoint::save(bundle, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let windows: Vec<InputWindow> = (0..100)
        .map(|k| InputWindow {
            slow: (0..2000).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            fast: (0..2000).map(|_| rng.random_range(-0.7f32..8.0)).collect(),
            len: 1000,
            label: None,
            origin: WindowOrigin { sequence: k, start: 0 },
        })
        .collect();
    let refs: Vec<&InputWindow> = windows.iter().collect();
    let mut identical = true;
    for head in [Head::Slow, Head::Fast, Head::Joint] {
        let (a, b) = (
            bundle.predict(&refs, head).map_err(|e| e.to_string())?,
            loaded.predict(&refs, head).map_err(|e| e.to_string())?,
        );
        identical &= a.iter().flatten().map(|v| v.to_bits()).eq(b.iter().flatten().map(|v| v.to_bits()));
    }
    let (ea, eb) = (
        bundle.embed(&refs).map_err(|e| e.to_string())?,
        loaded.embed(&refs).map_err(|e| e.to_string())?,
    );
    identical &= ea
        .iter()
        .flat_map(|e| &e.values)
        .map(|v| v.to_bits())
        .eq(eb.iter().flat_map(|e| &e.values).map(|v| v.to_bits()));
    identical &= &loaded == bundle;

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    let mut version = bytes.clone();
    version[4..6].copy_from_slice(&2u16.to_le_bytes());
    rehash(&mut version);
    let truncated = &bytes[..bytes.len() - 100];
    let code = |r: Result<ModelBundle, CheckpointError>| r.err().map(|e| e.code()).unwrap_or("accepted");
    let codes = [
        code(checkpoint::from_bytes(&corrupt)),
        code(checkpoint::from_bytes(&version)),
        code(checkpoint::from_bytes(truncated)),
    ];
    check(
        identical && codes == ["checksum", "version", "truncated"],
        format!(
            "100 random windows bit-identical after reload: {identical}; corrupted byte → {}, version 2.0 → {}, truncated → {}",
            codes[0], codes[1], codes[2]
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_eyedent"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("eyedent {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    run_cli(&[
        "synth",
        "--out",
        &p("data"),
        "--identities",
        "3",
        "--sessions",
        "1",
        "--seconds",
        "12",
        "--seed",
        "5",
    ])?;
    for run in ["a", "b"] {
        run_cli(&[
            "train",
            "--data",
            &p("data"),
            "--out",
            &p(run),
            "--seed",
            "5",
            "--max-epochs",
            "3",
            "--train-stride",
            "500",
        ])?;
    }
    let same = |f: &str| -> Result<bool, String> {
        let read = |run: &str| std::fs::read(Path::new(&p(run)).join(f)).map_err(|e| e.to_string());
        Ok(read("a")? == read("b")?)
    };
    let (log, ckpt) = (same("training_log.json")?, same("model.eyid")?);
    check(
        log && ckpt,
        format!("two `train` runs with seed 5: training log identical {log}, checkpoint identical {ckpt}"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut small: Option<Result<ModelBundle, String>> = None;
    let mut shared = || small.get_or_insert_with(small_trained).clone();

    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome, t: Instant| {
        let (tag, msg) = match outcome {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} [{n}] {name}: {msg} [{:.1} s]", t.elapsed().as_secs_f64());
    };
    let criteria: [(usize, &str); 9] = [
        (1, "gradient correctness"),
        (2, "shape fidelity"),
        (3, "transform exactness"),
        (4, "overfit oracle"),
        (5, "desk-scale identification"),
        (6, "ROC/EER oracle equivalence"),
        (7, "freezing contract"),
        (8, "checkpoint round-trip"),
        (9, "determinism"),
    ];
    for (n, name) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = match n {
            1 => gradient_correctness(),
            2 => shape_fidelity(),
            3 => transform_exactness(),
            4 => overfit_oracle(),
            5 => desk_identification(),
            6 => roc_oracle(),
            7 => shared().and_then(|b| freezing_contract(&b)),
            8 => shared().and_then(|b| checkpoint_round_trip(&b)),
            _ => determinism(),
        };
        report(n, name, outcome, t);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
