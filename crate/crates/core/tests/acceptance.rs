//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cudkit::colorlab::{
    hsv_to_rgb_px, lab_to_rgb_px, lightness_px, rgb_to_hsv_px, rgb_to_lab_px, simulate_cvd_px, CvdKind, RgbImage,
};
use cudkit::cudnet::{apply_filter, predict, CurveParams, ModelWeights, KNOTS_PER_CURVE};
use cudkit::datagen::{gen_dataset, GenConfig, SamplePair};
use cudkit::gradsuite::{run_suite, CaseKind, CASES, DEFAULT_POINTS, DEFAULT_TOLERANCE};
use cudkit::imageio::quantize_image;
use cudkit::metrics::{ms_ssim, psnr, psnr_mae, ssim, ssim_mae, EvalRow, Plane, SsimChannel};
use cudkit::tensorcore::{circular_convolve_direct, Graph, SketchSeed};
use cudkit::trainer::{checkpoint_bytes, evaluate_pairs, train, TrainConfig, TrainOutcome};

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    println!(
        "[acceptance] {id:>2} {name}: {} ({:.2}s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn random_pixel(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn max_diff(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_01_colorimetry() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut hsv_err, mut lab_err) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let px = random_pixel(&mut rng);
        hsv_err = hsv_err.max(max_diff(hsv_to_rgb_px(rgb_to_hsv_px(px)), px));
        lab_err = lab_err.max(max_diff(lab_to_rgb_px(rgb_to_lab_px(px)), px));
    }
    let white = lightness_px([1.0, 1.0, 1.0]);
    let gray = lightness_px([0.5, 0.5, 0.5]);
    let elapsed = t.elapsed();
    let pass = hsv_err < 1e-6
        && lab_err < 1e-4
        && (white - 100.0).abs() <= 0.01
        && (gray - 53.39).abs() <= 0.05
        && elapsed < Duration::from_secs(5);
    report(
        1,
        "colorimetry",
        pass,
        elapsed,
        &format!("hsv_err={hsv_err:.2e} lab_err={lab_err:.2e} L(white)={white:.4} L(gray)={gray:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_cvd_simulation() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut idem, mut gray) = (0.0f64, 0.0f64);
    for kind in [CvdKind::Protanopia, CvdKind::Deuteranopia] {
        for _ in 0..1_000 {
            let px = random_pixel(&mut rng);
            let once = simulate_cvd_px(px, kind);
            idem = idem.max(max_diff(simulate_cvd_px(once, kind), once));
            let g: f64 = rng.gen();
            gray = gray.max(max_diff(simulate_cvd_px([g, g, g], kind), [g, g, g]));
        }
    }
    let elapsed = t.elapsed();
    let pass = idem < 1e-6 && gray < 1e-6 && elapsed < Duration::from_secs(1);
    report(
        2,
        "cvd simulation",
        pass,
        elapsed,
        &format!("idempotence={idem:.2e} achromatic={gray:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_suite() {
    let t = Instant::now();
    let results = run_suite(0, DEFAULT_POINTS, None).expect("suite runs");
    let elapsed = t.elapsed();
    let expected: Vec<&str> = CASES
        .iter()
        .filter(|c| c.kind != CaseKind::Fixture)
        .map(|c| c.name)
        .collect();
    let names: Vec<&str> = results.iter().map(|r| r.name).collect();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed(DEFAULT_TOLERANCE))
        .map(|r| format!("{}={:.2e}", r.name, r.worst.max_rel_error))
        .collect();
    let worst = results.iter().map(|r| r.worst.max_rel_error).fold(0.0, f64::max);
    let (checked, skipped) = results.iter().fold((0, 0), |(c, s), r| (c + r.checked, s + r.skipped));
    let sparse: Vec<&str> = results
        .iter()
        .filter(|r| r.skipped * 4 > r.checked + r.skipped)
        .map(|r| r.name)
        .collect();
    for r in &results {
        println!(
            "    {:<22} max_rel={:.2e} checked={} skipped={}",
            r.name, r.worst.max_rel_error, r.checked, r.skipped
        );
    }
    let losses = [
        "lab_loss",
        "histogram_loss",
        "conjugate_lab_loss",
        "identity_loss",
        "total_loss",
    ];
    let pass = names == expected
        && losses.iter().all(|l| names.contains(l))
        && results.iter().all(|r| r.points >= 20)
        && failed.is_empty()
        && sparse.is_empty()
        && elapsed < Duration::from_secs(120);
    report(
        3,
        "gradient suite",
        pass,
        elapsed,
        &format!(
            "cases={} worst={worst:.2e} checked={checked} kinks_excluded={skipped} failed={failed:?} sparse={sparse:?}",
            results.len()
        ),
    );
    assert!(pass);
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    let img = RgbImage::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
    quantize_image(&img)
}

#[test]
fn criterion_04_filter() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut identity_err = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(16..48), rng.gen_range(16..48));
        let img = random_image(&mut rng, h, w);
        let out = quantize_image(&apply_filter(&img, &CurveParams::identity()));
        identity_err = identity_err.max(
            img.data()
                .iter()
                .zip(out.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }

    // S knots rise by 0.01 per knot; V knots are a constant 0.9.
    let s_knots: Vec<f64> = (0..KNOTS_PER_CURVE).map(|k| 1.0 + 0.01 * k as f64).collect();
    let curve = CurveParams::new(s_knots, vec![0.9; KNOTS_PER_CURVE]).unwrap();
    let img = RgbImage::new(1, 2, vec![0.8, 0.4, 0.2, 0.2, 0.5, 0.6]).unwrap();
    let out = apply_filter(&img, &curve);
    // (0.8,0.4,0.2): h=1/18, s=0.75, v=0.8; S(0.75)=1+0.01·23.25; V=0.9.
    let s1 = 0.75 * (1.0 + 0.01 * 23.25);
    let v1 = 0.8 * 0.9;
    let f1 = 6.0 / 18.0;
    let p1 = [v1, v1 * (1.0 - s1 * (1.0 - f1)), v1 * (1.0 - s1)];
    // (0.2,0.5,0.6): h=3.25/6, s=2/3, v=0.6; S(2/3)=1+0.01·(62/3).
    let s2 = (2.0 / 3.0) * (1.0 + 0.01 * (62.0 / 3.0));
    let v2 = 0.6 * 0.9;
    let f2 = 0.25;
    let p2 = [v2 * (1.0 - s2), v2 * (1.0 - s2 * f2), v2];
    let oracle_err = max_diff(out.pixel(0, 0), p1).max(max_diff(out.pixel(0, 1), p2));
    let elapsed = t.elapsed();
    let pass = identity_err <= 1.0 / 255.0 && oracle_err < 1e-6 && elapsed < Duration::from_secs(5);
    report(
        4,
        "curve filter",
        pass,
        elapsed,
        &format!("identity_err={identity_err:.2e} oracle_err={oracle_err:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_mcb_machinery() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut conv_err = 0.0f64;
    for d in [2usize, 4, 8, 16] {
        for _ in 0..100 {
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::<f64>::new();
            let (va, vb) = (
                g.constant(&[d], a.clone()).unwrap(),
                g.constant(&[d], b.clone()).unwrap(),
            );
            let c = g.circular_conv(va, vb).unwrap();
            let direct = circular_convolve_direct(&a, &b);
            conv_err = g
                .value(c)
                .iter()
                .zip(&direct)
                .map(|(x, y)| (x - y).abs())
                .fold(conv_err, f64::max);
        }
    }

    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
    let exact: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let mut total = 0.0;
    for seed in 0..1_000u64 {
        let sk = SketchSeed::random(32, 256, &mut ChaCha8Rng::seed_from_u64(seed));
        let (px, py) = (sk.apply(&x), sk.apply(&y));
        total += px.iter().zip(&py).map(|(a, b)| a * b).sum::<f64>();
    }
    let sketch_rel = (total / 1_000.0 - exact).abs() / exact.abs();
    let elapsed = t.elapsed();
    let pass = conv_err < 1e-6 && sketch_rel < 0.05 && elapsed < Duration::from_secs(30);
    report(
        5,
        "mcb machinery",
        pass,
        elapsed,
        &format!("fft_vs_direct={conv_err:.2e} sketch_inner_product_rel={sketch_rel:.4} (exact {exact:.3})"),
    );
    assert!(pass);
}

/// Literal clip-at-target rule for one candidate.
fn clip_toward(x: f64, input: f64, target: f64) -> f64 {
    if input > target {
        x.max(target)
    } else {
        x.min(target)
    }
}

#[test]
fn criterion_06_conjugate_prediction() {
    let t = Instant::now();
    let run = |pred: &[f64], input: &[f64], target: &[f64]| -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let p = g.constant(&[pred.len()], pred.to_vec()).unwrap();
        let v = g.conjugate_select(p, input, target).unwrap();
        g.value(v).to_vec()
    };
    let figure = run(&[97.0, 10.0, 70.0], &[74.0, 41.0, 79.0], &[50.0, 41.0, 80.0]);
    let figure_ok = figure == vec![51.0, 41.0, 80.0];

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
    let input: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
    let v = run(&pred, &input, &target);
    let mut violations = 0;
    for i in 0..n {
        let (p, inp, tg) = (pred[i], input[i], target[i]);
        let r1 = clip_toward(2.0 * inp - p, inp, tg);
        let r2 = clip_toward(p, inp, tg);
        let overshoot = if inp > tg { v[i] < tg } else { v[i] > tg };
        let worse = (v[i] - tg).abs() > (r1 - tg).abs().min((r2 - tg).abs());
        if overshoot || worse {
            violations += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = figure_ok && violations == 0 && elapsed < Duration::from_secs(5);
    report(
        6,
        "conjugate prediction",
        pass,
        elapsed,
        &format!("V={figure:?} violations={violations}/{n}"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_metrics() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_self = 0.0f64;
    for &(h, w) in &[(16, 16), (40, 24), (64, 64), (180, 200)] {
        let plane = Plane::new(h, w, (0..h * w).map(|_| rng.gen()).collect());
        worst_self = worst_self.max((ssim(&plane, &plane).unwrap() - 1.0).abs());
        worst_self = worst_self.max((ms_ssim(&plane, &plane).unwrap() - 1.0).abs());
    }
    let a = RgbImage::filled(32, 32, [0.25, 0.5, 0.125]).unwrap();
    let b = RgbImage::filled(32, 32, [0.35, 0.6, 0.225]).unwrap();
    let db = psnr(&a, &b).unwrap();

    let rows: Vec<EvalRow> = (0..5)
        .map(|_| {
            let input = random_image(&mut rng, 32, 32);
            let target = random_image(&mut rng, 32, 32);
            EvalRow::compute(&input, &input, &target, SsimChannel::Lightness).unwrap()
        })
        .collect();
    let (sm, pm) = (ssim_mae(&rows).unwrap(), psnr_mae(&rows).unwrap());
    let elapsed = t.elapsed();
    let pass =
        worst_self < 1e-9 && (db - 20.0).abs() < 1e-9 && sm == 0.0 && pm == 0.0 && elapsed < Duration::from_secs(10);
    report(
        7,
        "metrics",
        pass,
        elapsed,
        &format!("self_similarity_err={worst_self:.2e} psnr(0.1)={db:.12} ssim_mae={sm} psnr_mae={pm}"),
    );
    assert!(pass);
}

const SMOKE_SEED: u64 = 2024;
const HELD_OUT_SEED: u64 = 900_000;

fn smoke_gen() -> GenConfig {
    GenConfig {
        height: 64,
        width: 64,
        kind: CvdKind::Deuteranopia,
        ..GenConfig::default()
    }
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        seed: SMOKE_SEED,
        kind: CvdKind::Deuteranopia,
        ..TrainConfig::default()
    }
}

struct Smoke {
    outcome: TrainOutcome,
    rerun_identical: bool,
    first_run: Duration,
}

fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<Smoke> = OnceLock::new();
    SMOKE.get_or_init(|| {
        let pairs = gen_dataset(50, SMOKE_SEED, 0.0, &smoke_gen()).expect("smoke data");
        let t = Instant::now();
        let first = train(&smoke_config(), &pairs).expect("smoke run");
        let first_run = t.elapsed();
        let second = train(&smoke_config(), &pairs).expect("smoke rerun");
        let rerun_identical = checkpoint_bytes(&first.checkpoint) == checkpoint_bytes(&second.checkpoint)
            && first.steps.len() == second.steps.len()
            && first.steps.iter().zip(&second.steps).all(|(a, b)| {
                a.0 == b.0 && a.1.to_bits() == b.1.to_bits() && a.2.total.to_bits() == b.2.total.to_bits()
            });
        Smoke {
            outcome: first,
            rerun_identical,
            first_run,
        }
    })
}

#[test]
fn criterion_08_training_descent() {
    let s = smoke();
    let (initial, last) = (s.outcome.initial.total, s.outcome.final_loss.total);
    let finite = s
        .outcome
        .steps
        .iter()
        .all(|(_, lr, r)| lr.is_finite() && r.non_finite().is_none())
        && s.outcome.final_loss.non_finite().is_none();
    let ratio = last / initial;
    let pass = ratio <= 0.7 && finite && s.rerun_identical && s.first_run < Duration::from_secs(15 * 60);
    report(
        8,
        "training descent",
        pass,
        s.first_run,
        &format!(
            "initial={initial:.4} final={last:.4} ratio={ratio:.3} steps={} finite={finite} bit_identical_rerun={}",
            s.outcome.steps.len(),
            s.rerun_identical
        ),
    );
    assert!(pass);
}

fn identity_weights(like: &ModelWeights) -> ModelWeights {
    let mut w = like.clone();
    w.zero_head();
    w
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[test]
fn criterion_09_cud_improvement() {
    let s = smoke();
    let t = Instant::now();
    let held: Vec<SamplePair> = gen_dataset(20, HELD_OUT_SEED, 0.0, &smoke_gen()).expect("held-out data");
    let weights = &s.outcome.checkpoint.weights;
    let kind = CvdKind::Deuteranopia;
    let model = evaluate_pairs(weights, &held, kind, SsimChannel::Lightness).unwrap();
    let base = evaluate_pairs(&identity_weights(weights), &held, kind, SsimChannel::Lightness).unwrap();
    let rows = |v: &[cudkit::trainer::EvalSample]| v.iter().map(|e| e.row).collect::<Vec<_>>();
    let (gap_in, gap_pred) = (
        mean(model.iter().map(|e| e.gap_input)),
        mean(model.iter().map(|e| e.gap_pred)),
    );
    let (ssim_m, ssim_b) = (ssim_mae(&rows(&model)).unwrap(), ssim_mae(&rows(&base)).unwrap());
    let (psnr_m, psnr_b) = (psnr_mae(&rows(&model)).unwrap(), psnr_mae(&rows(&base)).unwrap());
    let elapsed = t.elapsed();
    let gap_ok = gap_pred > gap_in;
    let ssim_ok = ssim_m < ssim_b;
    let psnr_ok = psnr_m < psnr_b;
    let pass = gap_ok && ssim_ok && psnr_ok && elapsed < Duration::from_secs(120);
    report(
        9,
        "cud improvement",
        pass,
        elapsed,
        &format!(
            "sim_gap input={gap_in:.3} pred={gap_pred:.3} [{}]; ssim_mae model={ssim_m:.5} identity={ssim_b:.5} [{}]; psnr_mae model={psnr_m:.4} identity={psnr_b:.4} [{}]",
            ok(gap_ok),
            ok(ssim_ok),
            ok(psnr_ok)
        ),
    );
    assert!(pass);
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not improved"
    }
}

#[test]
fn criterion_10_identity_behavior() {
    let t = Instant::now();
    let pairs = gen_dataset(20, 500_000, 1.0, &smoke_gen()).expect("cud-only data");
    assert!(pairs.iter().all(|p| p.meta.already_cud));
    let cfg = TrainConfig {
        seed: 10,
        ..smoke_config()
    };
    let outcome = train(&cfg, &pairs).expect("identity run");
    let deviation = |w: &ModelWeights| {
        mean(pairs.iter().map(|p| {
            let (_, curve) = predict(&p.input, w, cfg.kind).unwrap();
            curve.mean_abs_deviation_from_identity()
        }))
    };
    let initial = deviation(&ModelWeights::init(cfg.model.clone(), cfg.seed).unwrap());
    let last = deviation(&outcome.checkpoint.weights);
    let elapsed = t.elapsed();
    let pass = last < 0.05 && elapsed < Duration::from_secs(10 * 60);
    report(
        10,
        "identity behavior",
        pass,
        elapsed,
        &format!(
            "mean|knot-1| initial={initial:.4} final={last:.4} loss {:.4}->{:.4}",
            outcome.initial.total, outcome.final_loss.total
        ),
    );
    assert!(pass);
}
