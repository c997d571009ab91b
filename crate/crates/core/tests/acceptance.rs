//! End-to-end acceptance checks. Each criterion prints one
//! `criterion N ... PASS|FAIL` line (straight to stderr, so it shows even
//! when libtest captures output) and then asserts.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avseg::checkpoint::Checkpoint;
use avseg::config::{QueryInit, RunConfig};
use avseg::data::{prepare, EncodedSample};
use avseg::experiments::{audio_selectivity, make_openset_split, run_finetune_sweep, Arm};
use avseg::fixtures::{fixture_manifest, FixtureSpec, RenderStyle};
use avseg::mask_head::{dynamic_convolve, KernelBank, MaskFeatures, MaskLogits};
use avseg::metrics::{f_measure, iou};
use avseg::model::AuTR;
use avseg::objective::{
    dice_frame, dice_frame_grad, dice_per_query, focal_mean, focal_mean_grad, focal_per_query, match_query, CostConfig,
};
use avseg::synthesis::{stratified_subsample, DatasetManifest, Split, TripletSample};
use avseg::train::{evaluate_report, predict, restore_model, Trainer};
use avseg::types::{rle_decode, rle_encode, AudioClip, BinaryMask, FrameClip, MaskRLE};
use avseg::Execution;

fn verdict(n: u32, pass: bool, detail: impl std::fmt::Display) {
    let line = format!("criterion {n:>2} ... {}  {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = match rng.random_range(0..5) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f64>(),
    };
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density))
}

struct Corpus {
    dir: tempfile::TempDir,
    manifest: DatasetManifest,
}

impl Corpus {
    fn new(spec: &FixtureSpec, images: usize, seed: u64, test_frac: f64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = fixture_manifest(spec, images, seed, test_frac, dir.path(), Execution::Parallel).unwrap();
        Self { dir, manifest }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn split(&self, split: Split) -> Vec<TripletSample> {
        self.manifest.split(split).into_iter().cloned().collect()
    }

    fn encode(&self, samples: &[TripletSample], model: &AuTR, cfg: &RunConfig) -> Vec<EncodedSample> {
        prepare(samples, self.root(), model, cfg.data.canvas, &cfg.audio, Execution::Parallel).unwrap()
    }
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_rle_codec() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let m = random_mask(&mut rng, h, w);
        let rle = rle_encode(&m);
        let sum: u32 = rle.counts.iter().sum();
        if rle_decode(&rle).unwrap() != m || sum as usize != h * w {
            failures += 1;
        }
    }

    let zeros = BinaryMask::zeros(2, 2);
    let ones = BinaryMask::from_fn(2, 2, |_, _| true);
    let mixed = BinaryMask::from_fn(2, 2, |y, x| (y, x) == (1, 0) || (y, x) == (0, 1));
    let rle = |counts: Vec<u32>| MaskRLE { size: [2, 2], counts };
    let hand = [
        rle_encode(&zeros).counts == vec![4],
        rle_encode(&ones).counts == vec![0, 4],
        rle_decode(&rle(vec![4])).unwrap() == zeros,
        rle_decode(&rle(vec![0, 4])).unwrap() == ones,
        rle_decode(&rle(vec![1, 2, 1])).unwrap() == mixed,
        rle_encode(&mixed).counts == vec![1, 2, 1],
    ];
    let hand_ok = hand.iter().filter(|&&b| b).count();
    verdict(
        1,
        failures == 0 && hand_ok == hand.len(),
        format!("{}/1000 round trips exact, {hand_ok}/{} hand cases", 1000 - failures, hand.len()),
    );
}

// ---------------------------------------------------------------- 2

fn counts(p: &BinaryMask, g: &BinaryMask) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for y in 0..p.height() {
        for x in 0..p.width() {
            match (p.get(y, x), g.get(y, x)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

fn iou_oracle(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (tp, fp, fn_) = counts(p, g);
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        tp / (tp + fp + fn_)
    }
}

fn f_oracle(p: &BinaryMask, g: &BinaryMask, b2: f64) -> f64 {
    let (tp, fp, fn_) = counts(p, g);
    let (pe, ge) = (tp + fp == 0.0, tp + fn_ == 0.0);
    if pe && ge {
        return 1.0;
    }
    if pe || ge || tp == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (tp / (tp + fp), tp / (tp + fn_));
    (1.0 + b2) * prec * rec / (b2 * prec + rec)
}

#[test]
fn criterion_02_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let p = random_mask(&mut rng, 16, 16);
        let g = random_mask(&mut rng, 16, 16);
        worst = worst.max((iou(&p, &g).unwrap() - iou_oracle(&p, &g)).abs());
        for b2 in [1.0, 0.3] {
            worst = worst.max((f_measure(&p, &g, b2).unwrap() - f_oracle(&p, &g, b2)).abs());
        }
    }
    let top = BinaryMask::from_fn(2, 2, |y, _| y == 0);
    let left = BinaryMask::from_fn(2, 2, |_, x| x == 0);
    let one = BinaryMask::from_fn(2, 2, |y, x| y == 0 && x == 0);
    let j = iou(&top, &left).unwrap();
    let f = f_measure(&top, &one, 1.0).unwrap();
    verdict(
        2,
        worst <= 1e-12 && j == 1.0 / 3.0 && f == 2.0 / 3.0,
        format!("max |impl - oracle| = {worst:.1e} over 500 pairs; 2x2 IoU = {j}, F = {f}"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_dynamic_convolution() {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut one_hot_exact = true;
    for _ in 0..100 {
        let (t, c, h, w, n) = (
            rng.random_range(1..=3),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=5),
        );
        let maps: Vec<f32> = (0..t * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernels: Vec<f32> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let biases: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = MaskFeatures {
            maps: Tensor::from_vec(maps.clone(), (t, c, h, w), &dev).unwrap(),
        };
        let bank = KernelBank {
            kernels: Tensor::from_vec(kernels.clone(), (n, c), &dev).unwrap(),
            biases: Tensor::from_vec(biases.clone(), n, &dev).unwrap(),
        };
        let got: Vec<f32> = dynamic_convolve(&features, &bank).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mut k = 0;
        for i in 0..n {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = biases[i] as f64;
                        for ci in 0..c {
                            acc += kernels[i * c + ci] as f64 * maps[((ti * c + ci) * h + y) * w + x] as f64;
                        }
                        worst = worst.max((got[k] as f64 - acc).abs());
                        k += 1;
                    }
                }
            }
        }

        // Kernel i = e_{pick[i]}, no bias: the output copies a channel.
        let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut one_hot = vec![0f32; n * c];
        for (i, &p) in pick.iter().enumerate() {
            one_hot[i * c + p] = 1.0;
        }
        let bank = KernelBank {
            kernels: Tensor::from_vec(one_hot, (n, c), &dev).unwrap(),
            biases: Tensor::zeros(n, DType::F32, &dev).unwrap(),
        };
        let got: Vec<f32> = dynamic_convolve(&features, &bank).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let plane = h * w;
        for (i, &p) in pick.iter().enumerate() {
            for ti in 0..t {
                let src = &maps[(ti * c + p) * plane..(ti * c + p + 1) * plane];
                let dst = &got[(i * t + ti) * plane..(i * t + ti + 1) * plane];
                one_hot_exact &= src == dst;
            }
        }
    }
    verdict(
        3,
        worst < 1e-6 && one_hot_exact,
        format!("max |impl - nested loops| = {worst:.1e} on 100 instances; one-hot selection exact: {one_hot_exact}"),
    );
}

// ---------------------------------------------------------------- 4

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Gradient of a scalar tensor function through autograd, in f64.
fn autograd(f: impl Fn(&Tensor, &Tensor) -> candle_core::Result<Tensor>, z: &[f64], y: &[f64]) -> Vec<f64> {
    let dev = Device::Cpu;
    let zv = Var::from_tensor(&Tensor::from_vec(z.to_vec(), (1, 1, z.len()), &dev).unwrap()).unwrap();
    let yt = Tensor::from_vec(y.to_vec(), (1, y.len()), &dev).unwrap();
    let loss = f(zv.as_tensor(), &yt).unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    grads.get(zv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn criterion_04_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, eps) = (1e-5, 1e-6);
    let (mut dice_err, mut focal_err, mut auto_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut half_bce: f64 = 0.0;
    for _ in 0..25 {
        let z: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..16).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();

        let fd = central_diff(|z| dice_frame(z, &y, eps), &z, h);
        dice_err = dice_err.max(rel_err(&dice_frame_grad(&z, &y, eps), &fd));
        auto_err = auto_err.max(rel_err(&autograd(|z, y| dice_per_query(z, y, eps), &z, &y), &fd));

        let fd = central_diff(|z| focal_mean(z, &y, 2.0, 0.25), &z, h);
        focal_err = focal_err.max(rel_err(&focal_mean_grad(&z, &y, 2.0, 0.25), &fd));
        auto_err = auto_err.max(rel_err(&autograd(|z, y| focal_per_query(z, y, 2.0, 0.25), &z, &y), &fd));

        let bce: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        half_bce = half_bce.max((focal_mean(&z, &y, 0.0, 0.5) - 0.5 * bce).abs());
    }
    verdict(
        4,
        dice_err < 1e-5 && focal_err < 1e-5 && auto_err < 1e-5 && half_bce < 1e-9,
        format!(
            "rel err vs central differences: dice {dice_err:.1e}, focal {focal_err:.1e}, autograd {auto_err:.1e}; \
             |focal(g=0,a=.5) - BCE/2| = {half_bce:.1e}"
        ),
    );
}

// ---------------------------------------------------------------- 5

fn brute_force_winner(logits: &[Vec<f64>], scores: &[f64], gt: &[f64], cfg: &CostConfig) -> usize {
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let total = |q: usize| {
        let p: Vec<f64> = logits[q].iter().map(|&z| sig(z)).collect();
        let inter: f64 = p.iter().zip(gt).map(|(p, y)| p * y).sum();
        let dice = 1.0 - (2.0 * inter + cfg.dice_eps) / (p.iter().sum::<f64>() + gt.iter().sum::<f64>() + cfg.dice_eps);
        let focal: f64 = p
            .iter()
            .zip(gt)
            .map(|(&p, &y)| {
                let (pt, at) = if y == 1.0 { (p, cfg.focal_alpha) } else { (1.0 - p, 1.0 - cfg.focal_alpha) };
                -at * (1.0 - pt).powf(cfg.focal_gamma) * pt.ln()
            })
            .sum::<f64>()
            / p.len() as f64;
        let sound = -sig(scores[q]).ln();
        cfg.lambda_dice * dice + cfg.lambda_focal * focal + cfg.lambda_sound * sound
    };
    let totals: Vec<f64> = (0..logits.len()).map(total).collect();
    (0..totals.len()).fold(0, |best, i| if totals[i] < totals[best] { i } else { best })
}

fn logits_of(q: &[Vec<f64>], scores: &[f64]) -> MaskLogits {
    let dev = Device::Cpu;
    let n = q.len();
    let flat: Vec<f64> = q.iter().flatten().copied().collect();
    MaskLogits {
        logits: Tensor::from_vec(flat, (n, 1, 4, 4), &dev).unwrap(),
        sounding_scores: Tensor::from_vec(scores.to_vec(), n, &dev).unwrap(),
    }
}

#[test]
fn criterion_05_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = CostConfig::default();
    let (mut agree, mut invariant) = (0, 0);
    for _ in 0..100 {
        let gt = random_mask(&mut rng, 4, 4);
        let q: Vec<Vec<f64>> = (0..4).map(|_| (0..16).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pred = logits_of(&q, &s);
        let m = match_query(&pred, std::slice::from_ref(&gt), &cfg).unwrap();
        if m.winner_index == brute_force_winner(&q, &s, &gt.as_f64(), &cfg) {
            agree += 1;
        }
        let scaled_same = [1e-3, 0.5, 7.0, 1e3]
            .iter()
            .all(|&c| match_query(&pred, std::slice::from_ref(&gt), &cfg.scaled(c)).unwrap().winner_index == m.winner_index);
        invariant += scaled_same as usize;
    }

    // Queries 1 and 3 are identical and strictly best; query 1 must win,
    // every time. With all queries identical, query 0 wins.
    let gt = BinaryMask::from_fn(4, 4, |y, _| y < 2);
    let good: Vec<f64> = gt.as_f64().iter().map(|&v| if v > 0.5 { 5.0 } else { -5.0 }).collect();
    let bad = vec![0.0; 16];
    let tied = logits_of(&[bad.clone(), good.clone(), bad.clone(), good.clone()], &[0.0, 1.0, 0.0, 1.0]);
    let all_same = logits_of(&[good.clone(), good.clone(), good.clone(), good], &[1.0; 4]);
    let ties_ok = (0..10).all(|_| match_query(&tied, std::slice::from_ref(&gt), &cfg).unwrap().winner_index == 1)
        && match_query(&all_same, std::slice::from_ref(&gt), &cfg).unwrap().winner_index == 0;

    verdict(
        5,
        agree == 100 && invariant == 100 && ties_ok,
        format!("winner = brute force on {agree}/100, scale-invariant on {invariant}/100, ties to lowest index: {ties_ok}"),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_shape_contract() {
    let dev = Device::Cpu;
    let mut cfg = RunConfig::desk().model;
    cfg.n_queries = 16;
    let model = AuTR::new(&cfg, 6, DType::F32, &dev).unwrap();
    let mut shapes = Vec::new();
    let mut ok = true;
    for t in [1usize, 5] {
        let frames = FrameClip::new(Tensor::rand(0f32, 1f32, (t, 3, 224, 224), &dev).unwrap()).unwrap();
        let spec = Tensor::rand(-10f32, 0f32, (t, 96, 64), &dev).unwrap();
        let audio = AudioClip::new(spec, 16_000).unwrap();
        let out = model.forward(&frames, &audio).unwrap();
        ok &= out.logits.dims() == [16, t, 56, 56] && out.sounding_scores.dims() == [16];
        shapes.push(format!("T={t}: S {:?}, scores {:?}", out.logits.dims(), out.sounding_scores.dims()));
    }
    verdict(6, ok, shapes.join("; "));
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_single_triplet_overfit() {
    let corpus = Corpus::new(&FixtureSpec::new(64, 1, RenderStyle::Synthetic).with_instances(1, 1), 1, 7, 0.5);
    let cfg = RunConfig::desk();
    let mut trainer = Trainer::new(&cfg).unwrap().with_execution(Execution::Sequential);
    let data = corpus.encode(&corpus.manifest.samples, &trainer.model, &cfg);
    assert_eq!(data.len(), 1);
    let score = |t: &Trainer| {
        let pred = predict(&t.model, &data[0], cfg.data.threshold).unwrap();
        iou(&pred[0], &data[0].gt[0]).unwrap()
    };
    let start = Instant::now();
    let mut reached = None;
    let mut best: f64 = 0.0;
    while trainer.step_count() < 500 {
        trainer.fit(&data, 10, None, |_, _| {}).unwrap();
        let j = score(&trainer);
        best = best.max(j);
        if j > 0.95 {
            reached = Some(trainer.step_count());
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        reached.is_some() && secs < 300.0,
        match reached {
            Some(s) => format!("train IoU > 0.95 after {s} steps in {secs:.1}s"),
            None => format!("best train IoU {best:.3} after 500 steps ({secs:.1}s)"),
        },
    );
}

// ---------------------------------------------------------------- 8

const SELECTIVITY_STEPS: usize = 1000;

fn selectivity(init: QueryInit, train: &Corpus, test: &Corpus) -> avseg::experiments::SelectivityReport {
    let mut cfg = RunConfig::desk();
    cfg.model.query_init = init;
    let mut trainer = Trainer::new(&cfg).unwrap();
    let tr = train.encode(&train.manifest.samples, &trainer.model, &cfg);
    let te = test.encode(&test.manifest.samples, &trainer.model, &cfg);
    trainer.fit(&tr, SELECTIVITY_STEPS, None, |_, _| {}).unwrap();
    audio_selectivity(&trainer.model, &te, cfg.data.threshold, Execution::Parallel).unwrap()
}

#[test]
fn criterion_08_audio_selectivity() {
    let spec = FixtureSpec::new(64, 4, RenderStyle::Synthetic).with_instances(2, 2);
    let train = Corpus::new(&spec, 150, 80, 0.1);
    let test = Corpus::new(&spec, 50, 81, 0.1);
    let audio = selectivity(QueryInit::Audio, &train, &test);
    let constant = selectivity(QueryInit::Constant, &train, &test);
    let describe = |r: &avseg::experiments::SelectivityReport| {
        format!(
            "{}/{} ({:.0}%, IoU sounding {:.3} vs silent {:.3})",
            r.sounding_wins,
            r.evaluated,
            r.fraction * 100.0,
            r.mean_iou_sounding,
            r.mean_iou_silent
        )
    };
    verdict(
        8,
        audio.evaluated == 100 && audio.fraction >= 0.8 && constant.fraction < 0.6,
        format!(
            "after {SELECTIVITY_STEPS} steps: audio queries {}; constant queries {}",
            describe(&audio),
            describe(&constant)
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_finetune_sweep() {
    let mut cfg = RunConfig::desk();
    cfg.data.finetune_steps = 300;
    let source = Corpus::new(&FixtureSpec::new(64, 4, RenderStyle::Synthetic), 120, 90, 0.1);
    let target = Corpus::new(&FixtureSpec::new(64, 4, RenderStyle::Real), 120, 91, 0.25);

    let mut pre = Trainer::new(&cfg).unwrap();
    let src = source.encode(&source.manifest.samples, &pre.model, &cfg);
    pre.fit(&src, 500, None, |_, _| {}).unwrap();
    let ck = pre.checkpoint().unwrap();

    let train_samples = target.split(Split::Train);
    let train = target.encode(&train_samples, &pre.model, &cfg);
    let test = target.encode(&target.split(Split::Test), &pre.model, &cfg);
    let pick = |f: f64| {
        let chosen = stratified_subsample(&train_samples, f, cfg.seed);
        (0..train_samples.len())
            .filter(|&i| chosen.iter().any(|c| c.id == train_samples[i].id))
            .collect()
    };
    let table = run_finetune_sweep(&ck, &train, pick, &test, &[0.0, 0.1], &cfg, Execution::Parallel).unwrap();
    let mj = |arm, f| table.get(arm, f).unwrap().m_j;
    let (p0, s0, p10) = (mj(Arm::WithPretraining, 0.0), mj(Arm::WithoutPretraining, 0.0), mj(Arm::WithPretraining, 0.1));
    let n10 = table.get(Arm::WithPretraining, 0.1).unwrap().train_samples;
    verdict(
        9,
        p0 > s0 && p10 > p0,
        format!("M_J pretrained@0% {p0:.4} vs scratch@0% {s0:.4}; pretrained@10% ({n10} samples) {p10:.4}"),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_openset() {
    let corpus = Corpus::new(&FixtureSpec::new(64, 6, RenderStyle::Synthetic), 150, 100, 0.25);
    let all = corpus.manifest.classes();
    let mut disjoint = true;
    for seed in 0..50 {
        let (seen, unseen) = make_openset_split(&corpus.manifest, 3, seed).unwrap();
        let (a, b) = (seen.classes(), unseen.classes());
        disjoint &= a.iter().all(|c| !b.contains(c))
            && a.len() + b.len() == all.len()
            && seen.len() + unseen.len() == corpus.manifest.len();
    }

    let (seen, unseen) = make_openset_split(&corpus.manifest, 3, 0).unwrap();
    let cfg = RunConfig::desk();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let own = |m: &DatasetManifest, s: Split| m.split(s).into_iter().cloned().collect::<Vec<_>>();
    let train = corpus.encode(&own(&seen, Split::Train), &trainer.model, &cfg);
    trainer.fit(&train, 500, None, |_, _| {}).unwrap();
    let eval = |m: &DatasetManifest| {
        let data = corpus.encode(&own(m, Split::Test), &trainer.model, &cfg);
        evaluate_report(&trainer.model, &data, &cfg, Execution::Parallel).unwrap().m_j
    };
    let (js, ju) = (eval(&seen), eval(&unseen));
    verdict(
        10,
        disjoint && js >= ju,
        format!(
            "class-disjoint for 50 seeds: {disjoint}; seen {:?} M_J {js:.4} >= unseen {:?} M_J {ju:.4}",
            seen.classes(),
            unseen.classes()
        ),
    );
}

// ---------------------------------------------------------------- 11

const CHILD_REPORT: &str = "AVSEG_ACCEPTANCE_REPORT";

/// Train, checkpoint, reload and evaluate; the JSON report goes to the
/// path in `AVSEG_ACCEPTANCE_REPORT`. Only runs as a child of criterion 11.
#[test]
#[ignore]
fn determinism_child() {
    let Ok(out) = std::env::var(CHILD_REPORT) else {
        return;
    };
    let corpus = Corpus::new(&FixtureSpec::new(64, 3, RenderStyle::Real), 24, 110, 0.25);
    let mut cfg = RunConfig::desk();
    cfg.seed = 11;
    let mut trainer = Trainer::new(&cfg).unwrap().with_execution(Execution::from_env());
    let train = corpus.encode(&corpus.split(Split::Train), &trainer.model, &cfg);
    let (report, _) = trainer.fit(&train, 60, None, |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    trainer.checkpoint().unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let model = restore_model(&ck).unwrap();
    let test = corpus.encode(&corpus.split(Split::Test), &model, &ck.config);
    let metrics = evaluate_report(&model, &test, &ck.config, Execution::from_env()).unwrap();
    let json = serde_json::json!({ "train": report, "eval": metrics });
    std::fs::write(out, serde_json::to_string_pretty(&json).unwrap()).unwrap();
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let exe = std::env::current_exe().unwrap();
    let run = |k: usize| {
        let out = dir.path().join(format!("report{k}.json"));
        let status = std::process::Command::new(&exe)
            .args(["determinism_child", "--exact", "--ignored", "--test-threads", "1"])
            .env("AVS_DETERMINISTIC", "1")
            .env(CHILD_REPORT, &out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "child run {k} failed");
        std::fs::read(&out).unwrap()
    };
    let (a, b) = (run(0), run(1));
    verdict(
        11,
        !a.is_empty() && a == b,
        format!("two train+eval runs with AVS_DETERMINISTIC=1: reports identical = {} ({} bytes)", a == b, a.len()),
    );
}
