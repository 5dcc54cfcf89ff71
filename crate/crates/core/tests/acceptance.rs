//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=1,8` restricts the run to the listed criteria.

use advtta::augment::{corrupt_mask, swap_stage, CorruptionSpec};
use advtta::config::{ExperimentConfig, Preset, ShiftSection};
use advtta::data::{default_class_names, GridImage, LabelMap, Sample};
use advtta::diagnostics::{classify_convergence, LossTrace, TraceRow, Verdict, DEFAULT_TAIL, DEFAULT_TOL};
use advtta::eval::{dice, hausdorff, iou, mean_foreground_dice, wilcoxon_signed_rank, WilcoxonMethod};
use advtta::models::{
    build_adaptor, build_discriminator, build_segmentor, AdaptorConfig, DiscriminatorConfig, Model, Pass, SegmentorConfig,
};
use advtta::pipeline::{self, TttEvalOptions};
use advtta::rng::{rng_from, Part};
use advtta::training::{adversarial_generator_loss, discriminator_loss, real_component, weighted_cross_entropy};
use advtta::ttt::{adapt_instance, evaluate_with_ttt, predict_soft, Driver, TTTConfig, TttModels};
use advtta_tensor::{Adam, Tape, Tensor};
use rand::Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(label: &str) -> rand_chacha::ChaCha8Rng {
    rng_from(2024, &[Part::from("acceptance"), Part::from(label)])
}

fn onehot(idx: &[usize], c: usize, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; c * h * w];
    for (p, &k) in idx.iter().enumerate() {
        data[k * h * w + p] = 1.0;
    }
    Tensor::new(&[1, c, h, w], data)
}

fn c1_loss_oracles() -> Check {
    let tape = Tape::new();
    let zeros = |n| tape.constant(Tensor::zeros(&[n, 1]));
    let equilibrium = discriminator_loss(zeros(8), Some(zeros(8)), Some(zeros(8))).map_err(|e| e.to_string())?.item();
    let single = discriminator_loss(zeros(8), Some(zeros(8)), None).map_err(|e| e.to_string())?.item();
    let real = real_component(tape.constant(Tensor::full(&[8, 1], -1.0))).map_err(|e| e.to_string())?.item();
    ensure((equilibrium - 1.0).abs() <= 1e-9 && (single - 1.0).abs() <= 1e-9, || format!("d≡0 gives {equilibrium}, {single}"))?;
    ensure((real - 2.0).abs() <= 1e-9, || format!("d_real≡−1 gives {real}"))?;
    Ok(format!("d≡0 → {equilibrium}, real(d≡−1) → {real}"))
}

/// Scalar-loop weighted cross-entropy, independent of the tensor code.
fn wce_loop(pred: &Tensor, idx: &[usize], c: usize) -> f64 {
    let n = idx.len();
    let mut counts = vec![0usize; c];
    for &k in idx {
        counts[k] += 1;
    }
    let mut total = 0.0;
    for (p, &k) in idx.iter().enumerate() {
        let w = 1.0 - counts[k] as f64 / n as f64;
        total -= w * (pred.data()[k * n + p] + 1e-12).ln();
    }
    total / n as f64
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn c2_gradient_checks() -> Check {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut r = rng("wce");
    let idx: Vec<usize> = (0..16).map(|_| r.gen_range(0..2)).collect();
    let y = onehot(&idx, 2, 4, 4);
    let pred = Tensor::uniform(&[1, 2, 4, 4], 0.05, 0.95, &mut r);
    let tape = Tape::new();
    let p = tape.var(pred.clone());
    let g = tape.backward(weighted_cross_entropy(p, &y).map_err(|e| e.to_string())?).wrt(p).cloned().ok_or("no gradient")?;
    for i in 0..pred.len() {
        let (mut a, mut b) = (pred.clone(), pred.clone());
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        let fd = (wce_loop(&a, &idx, 2) - wce_loop(&b, &idx, 2)) / (2.0 * h);
        worst = worst.max(rel_err(g.data()[i], fd, 1e-8));
    }
    let wce_worst = worst;

    let cfg = DiscriminatorConfig { filters: vec![4, 4, 8, 8, 8], input_hw: (16, 16), ..Default::default() };
    let d = build_discriminator(&cfg, 5).map_err(|e| e.to_string())?;
    let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng("gen"));
    let loss_at = |t: &Tensor| {
        let tape = Tape::new();
        adversarial_generator_loss(d.forward(&tape, tape.constant(t.clone()), Pass::FROZEN).unwrap()).unwrap().item()
    };
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let grads = tape.backward(adversarial_generator_loss(d.forward(&tape, xv, Pass::FROZEN).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
    let g = grads.wrt(xv).cloned().ok_or("no gradient")?;
    let mut gen_worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
        gen_worst = gen_worst.max(rel_err(g.data()[i], fd, 1e-10));
    }
    ensure(wce_worst <= 1e-4 && gen_worst <= 1e-4, || format!("worst relative error wce {wce_worst:.2e}, generator {gen_worst:.2e}"))?;
    Ok(format!("worst relative error wce {wce_worst:.2e}, generator {gen_worst:.2e}"))
}

fn c3_adaptor_identity() -> Check {
    let seg = build_segmentor(&SegmentorConfig { depth: 2, base_filters: 4, n_classes: 3, input_hw: (32, 32) }, 3)
        .map_err(|e| e.to_string())?;
    let d = build_discriminator(
        &DiscriminatorConfig { filters: vec![4, 4, 8, 8, 8], input_hw: (32, 32), ..Default::default() },
        3,
    )
    .map_err(|e| e.to_string())?;
    let names = default_class_names();
    let mut worst: f64 = 0.0;
    let mut r = rng("adaptor");
    for i in 0..100u64 {
        let a = build_adaptor(&AdaptorConfig::default(), i).map_err(|e| e.to_string())?;
        let x = Tensor::randn(&[1, 1, 32, 32], 1.0, &mut r);
        let tape = Tape::new();
        let y = a.forward(&tape, tape.constant(x.clone()), Pass::FROZEN).value();
        worst = worst.max(y.zip_map(&x, |p, q| (p - q).abs()).max_abs());
        if i < 10 {
            // Pre-TTT prediction equals the plain segmentor's prediction, and so does its Dice.
            let img = GridImage::new(32, 32, x.data().to_vec(), (1.0, 1.0), "p", i as usize).map_err(|e| e.to_string())?;
            let truth_idx: Vec<usize> = (0..1024).map(|_| r.gen_range(0..3)).collect();
            let truth = LabelMap::from_indices(32, 32, &truth_idx, names.clone()).map_err(|e| e.to_string())?;
            let res = adapt_instance(&img, &seg, &d, &TTTConfig { n_iter: 2, ..TTTConfig::default() }, i)
                .map_err(|e| e.to_string())?;
            let plain = LabelMap::from_tensor(&predict_soft(&seg, &img.to_tensor()).map_err(|e| e.to_string())?.select(0), names.clone())
                .map_err(|e| e.to_string())?
                .harden();
            let (da, db) = (
                mean_foreground_dice(res.before(), &truth).map_err(|e| e.to_string())?,
                mean_foreground_dice(&plain, &truth).map_err(|e| e.to_string())?,
            );
            ensure(da == db, || format!("pre-TTT Dice {da} vs baseline {db} on image {i}"))?;
        }
    }
    ensure(worst <= 1e-6, || format!("max |adaptor(x) − x| = {worst:.3e}"))?;
    Ok(format!("max |adaptor(x) − x| = {worst:.3e} over 100 images; pre-TTT Dice identical"))
}

fn c4_corruption_invariants() -> Check {
    let spec = CorruptionSpec::default();
    let mut r = rng("corrupt");
    for i in 0..1000 {
        let (h, w) = (r.gen_range(10..48), r.gen_range(10..48));
        let c = r.gen_range(2..5);
        let idx: Vec<usize> = (0..h * w).map(|_| r.gen_range(0..c)).collect();
        let names: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
        let y = LabelMap::from_indices(h, w, &idx, names.clone()).map_err(|e| e.to_string())?;
        let swapped = swap_stage(&y, &spec, &mut r).map_err(|e| e.to_string())?;
        let mut hist = vec![0usize; c];
        for &k in &swapped {
            hist[k] += 1;
        }
        ensure(hist == y.class_histogram(), || format!("mask {i}: histogram {hist:?} vs {:?}", y.class_histogram()))?;
        let out = corrupt_mask(&y, &spec, &mut r).map_err(|e| e.to_string())?;
        ensure(out.is_hard() && out.hw() == (h, w), || format!("mask {i}: corrupted output is not hard one-hot"))?;
    }
    Ok("1000 masks: swap stage keeps histograms; outputs hard one-hot".into())
}

fn brute_hausdorff(a: &[bool], b: &[bool], w: usize) -> f64 {
    let pts = |m: &[bool]| -> Vec<(i64, i64)> {
        m.iter().enumerate().filter(|(_, v)| **v).map(|(p, _)| ((p / w) as i64, (p % w) as i64)).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |x: &[(i64, i64)], y: &[(i64, i64)]| {
        x.iter().map(|p| y.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap()).max().unwrap()
    };
    (directed(&pa, &pb).max(directed(&pb, &pa)) as f64).sqrt()
}

fn enumerate_wilcoxon(before: &[f64], after: &[f64]) -> f64 {
    let d: Vec<f64> = before.iter().zip(after).map(|(b, a)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            rank[order[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let w: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| rank[i]).sum();
        lo += u64::from(s <= w + 1e-9);
        hi += u64::from(s >= w - 1e-9);
    }
    (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
}

fn c5_metric_oracles() -> Check {
    let mut r = rng("metrics");
    for i in 0..50 {
        let da = r.gen_range(0.05..0.5);
        let db = r.gen_range(0.05..0.5);
        let a: Vec<bool> = (0..256).map(|_| r.gen::<f64>() < da).collect();
        let b: Vec<bool> = (0..256).map(|_| r.gen::<f64>() < db).collect();
        if !a.contains(&true) || !b.contains(&true) {
            continue;
        }
        let hd = hausdorff(&a, &b, 16, 16, (1.0, 1.0)).map_err(|e| e.to_string())?.value;
        let bf = brute_hausdorff(&a, &b, 16);
        ensure(hd == bf, || format!("pair {i}: Hausdorff {hd} vs brute force {bf}"))?;
        let (d, j) = (dice(&a, &b).map_err(|e| e.to_string())?, iou(&a, &b).map_err(|e| e.to_string())?);
        ensure((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12, || format!("pair {i}: dice {d} vs 2·iou/(1+iou) {}", 2.0 * j / (1.0 + j)))?;
    }
    for n in 5..=12 {
        for trial in 0..20 {
            let before: Vec<f64> = (0..n).map(|_| (r.gen_range(0..20) as f64) / 4.0).collect();
            let after: Vec<f64> = (0..n).map(|k| before[k] + (r.gen_range(-6i32..9) as f64) / 4.0).collect();
            let nz = before.iter().zip(&after).filter(|(b, a)| a != b).count();
            if nz < 5 {
                continue;
            }
            let w = wilcoxon_signed_rank(&before, &after).map_err(|e| e.to_string())?;
            let oracle = enumerate_wilcoxon(&before, &after);
            ensure(w.method == WilcoxonMethod::Exact, || format!("n={n}: method {:?}", w.method))?;
            ensure((w.p_value - oracle).abs() <= 1e-12, || format!("n={n} trial {trial}: exact {} vs enumeration {oracle}", w.p_value))?;
        }
    }
    Ok("Hausdorff = brute force on 50 pairs; dice/iou identity; exact Wilcoxon = enumeration for n ≤ 12".into())
}

/// Largest singular value by power iteration on the flattened weight.
fn spectral_norm(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    let m = w.data();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let u: Vec<f64> = (0..rows).map(|i| (0..cols).map(|j| m[i * cols + j] * v[j]).sum()).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let nv: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| m[i * cols + j] * u[i] / un).sum()).collect();
        sigma = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = nv.iter().map(|x| x / sigma.max(1e-300)).collect();
    }
    sigma
}

fn c6_spectral_norm() -> Check {
    let cfg = DiscriminatorConfig { filters: vec![8, 16, 32, 64, 128], input_hw: (32, 32), ..Default::default() };
    let mut d = build_discriminator(&cfg, 6).map_err(|e| e.to_string())?;
    let mut opt = Adam::new(1e-3);
    let names = default_class_names();
    let spec = CorruptionSpec::default();
    let mut r = rng("sn");
    let disk = |cy: f64, cx: f64, rad: f64| -> Vec<usize> {
        (0..1024)
            .map(|p| {
                let dist = (((p / 32) as f64 - cy).powi(2) + ((p % 32) as f64 - cx).powi(2)).sqrt();
                if dist < rad {
                    1
                } else if dist < rad + 2.5 {
                    2
                } else {
                    0
                }
            })
            .collect()
    };
    for _ in 0..50 {
        let mut real = Vec::new();
        let mut fake = Vec::new();
        for _ in 0..4 {
            let y = LabelMap::from_indices(32, 32, &disk(r.gen_range(12.0..20.0), r.gen_range(12.0..20.0), r.gen_range(4.0..7.0)), names.clone())
                .map_err(|e| e.to_string())?;
            fake.push(corrupt_mask(&y, &spec, &mut r).map_err(|e| e.to_string())?.to_tensor());
            real.push(y.to_tensor());
        }
        let tape = Tape::new();
        let n = real.len();
        let scores = d.forward(&tape, tape.constant(Tensor::stack(&[Tensor::stack(&real), Tensor::stack(&fake)])), Pass::TRAIN)
            .map_err(|e| e.to_string())?;
        let loss = discriminator_loss(scores.rows(0, n), Some(scores.rows(n, 2 * n)), None).map_err(|e| e.to_string())?;
        let g = tape.backward(loss);
        opt.step(d.store_mut().iter_mut(), &g);
        d.store_mut().apply_buffers(&tape.buffer_updates());
    }
    let layers = d.normalized_layers();
    ensure(layers.len() == 6, || format!("{} normalised layers", layers.len()))?;
    let norms: Vec<f64> = layers.iter().map(|l| spectral_norm(&d.effective_weight(l))).collect();
    let worst = norms.iter().copied().fold(0.0, f64::max);
    ensure(worst <= 1.05, || format!("layer norms {norms:.4?}"))?;
    Ok(format!("after 50 steps, max layer norm {worst:.4} over {} layers", norms.len()))
}

fn trace_of(rows: &[(f64, f64, f64, f64)]) -> LossTrace {
    let mut t = LossTrace::default();
    for (e, &(rt, ft, rv, fv)) in rows.iter().enumerate() {
        t.push(TraceRow { epoch: e, real_train: rt, fake_train: ft, real_val: rv, fake_val: fv, seg_val_ce: 0.1 }).unwrap();
    }
    t
}

fn c8_diagnostics() -> Check {
    let mut r = rng("diag");
    let jitter = |r: &mut rand_chacha::ChaCha8Rng| -> f64 { r.gen_range(-0.02..0.02) };
    // Equilibrium: every component settles at 0.5, total 1.0.
    let eq: Vec<_> = (0..40).map(|_| (0.5 + jitter(&mut r), 0.5 + jitter(&mut r), 0.5 + jitter(&mut r), 0.5 + jitter(&mut r))).collect();
    // Memorisation: train components vanish while real-val climbs to 2.0.
    let mem: Vec<_> = (0..40)
        .map(|e| {
            let t = (e as f64 / 39.0).min(1.0);
            (0.02 + jitter(&mut r).abs(), 0.02 + jitter(&mut r).abs(), 0.5 + 1.5 * t + jitter(&mut r), 0.03 + jitter(&mut r).abs())
        })
        .collect();
    let healthy: Vec<_> =
        (0..40).map(|_| (r.gen_range(0.0..0.3), r.gen_range(0.0..0.3), r.gen_range(0.0..0.3), r.gen_range(0.0..0.3))).collect();
    let mut out = Vec::new();
    for (name, rows, want) in [("equilibrium", eq, Verdict::Equilibrium), ("memorisation", mem, Verdict::Memorisation), ("healthy", healthy, Verdict::Healthy)] {
        let v = classify_convergence(&trace_of(&rows), DEFAULT_TAIL, DEFAULT_TOL).map_err(|e| e.to_string())?;
        ensure(v.verdict == want, || format!("{name} trace labelled {:?}", v.verdict))?;
        out.push(format!("{name} → {:?}", v.verdict));
    }
    Ok(out.join(", "))
}

fn c9_ttt_invariants() -> Check {
    let seg = build_segmentor(&SegmentorConfig { depth: 2, base_filters: 4, n_classes: 3, input_hw: (32, 32) }, 9)
        .map_err(|e| e.to_string())?;
    let d = build_discriminator(
        &DiscriminatorConfig { filters: vec![4, 8, 8, 16, 16], input_hw: (32, 32), ..Default::default() },
        9,
    )
    .map_err(|e| e.to_string())?;
    let (hs, hd) = (seg.state_hash(), d.state_hash());
    let names = default_class_names();
    let mut r = rng("ttt");
    let samples: Vec<Sample> = (0..6)
        .map(|i| {
            let px: Vec<f64> = (0..1024).map(|_| r.gen_range(-1.0..1.0)).collect();
            let idx: Vec<usize> = (0..1024).map(|p| usize::from((p / 32 + i) % 5 == 0) + usize::from(p % 7 == 0)).collect();
            Sample::new(
                GridImage::new(32, 32, px, (1.0, 1.0), format!("p{}", i / 2), i % 2).unwrap(),
                Some(LabelMap::from_indices(32, 32, &idx, names.clone()).unwrap()),
            )
            .unwrap()
        })
        .collect();
    let cfg = TTTConfig { n_iter: 5, lr: 1e-2, ..TTTConfig::default() };
    let models = TttModels { segmentor: &seg, discriminator: Some(&d), dae: None };
    let fwd = evaluate_with_ttt(&samples, models, &cfg, 1).map_err(|e| e.to_string())?;
    ensure((seg.state_hash(), d.state_hash()) == (hs.clone(), hd.clone()), || "frozen model hashes changed".into())?;
    let perm = [3usize, 0, 5, 1, 4, 2];
    let shuffled: Vec<Sample> = perm.iter().map(|&i| samples[i].clone()).collect();
    let other = evaluate_with_ttt(&shuffled, models, &cfg, 1).map_err(|e| e.to_string())?;
    for (k, &i) in perm.iter().enumerate() {
        let (a, b) = (&fwd.results[i], &other.results[k]);
        ensure(a == b && a.mask_after == b.mask_after, || format!("instance {i} differs after permutation"))?;
        let to_bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(to_bits(&a.loss_trace) == to_bits(&b.loss_trace), || format!("instance {i} loss trace differs"))?;
    }
    ensure((seg.state_hash(), d.state_hash()) == (hs, hd), || "frozen model hashes changed".into())?;
    Ok("parameter hashes unchanged; permuted order bit-identical on 6 instances".into())
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct SeedOutcome {
    seed: u64,
    val_dice: f64,
    adv_before: f64,
    adv_after: f64,
    hd_before: f64,
    hd_after: f64,
    dae_before: f64,
    dae_after: f64,
}

fn dice_and_hd(run: &std::path::Path) -> Result<(f64, f64, f64, f64), String> {
    let s = pipeline::read_summary(run).map_err(|e| e.to_string())?;
    let get = |m: &str| s.iter().find(|x| x.metric == m).cloned().ok_or(format!("no {m} summary"));
    let (d, h) = (get("dice")?, get("hausdorff_px")?);
    Ok((d.before_mean, d.after_mean, h.before_mean, h.after_mean))
}

fn desk_seed(seed: u64, root: &std::path::Path) -> Result<SeedOutcome, String> {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.seed = seed;
    let e = |e: advtta::Error| e.to_string();
    let raw = pipeline::cmd_synth_data(&cfg, root).map_err(e)?;
    let pre = pipeline::cmd_preprocess(&cfg, &raw.join(pipeline::DATASET_DIR), root).map_err(e)?;
    let train = pipeline::cmd_train(&cfg, &pre.join(pipeline::DATASET_DIR), root).map_err(e)?;
    let m = advtta::run::RunManifest::load(&train).map_err(e)?;
    let val_dice = m.notes["best_val_dice"].as_f64().ok_or("no validation Dice")?;
    let shift = ShiftSection { gamma: 1.5, blur_sigma: 1.0, noise_std: 0.05, bias_field_amplitude: 0.0 };
    let opts = |driver| TttEvalOptions { driver: Some(driver), n_iter: Some(50), shift: Some(shift.clone()), ..Default::default() };
    let adv = pipeline::cmd_ttt_eval(train.path(), &opts(Driver::Adversarial), root).map_err(e)?;
    let dae = pipeline::cmd_ttt_eval(train.path(), &opts(Driver::Dae), root).map_err(e)?;
    let (adv_before, adv_after, hd_before, hd_after) = dice_and_hd(adv.path())?;
    let (dae_before, dae_after, _, _) = dice_and_hd(dae.path())?;
    Ok(SeedOutcome { seed, val_dice, adv_before, adv_after, hd_before, hd_after, dae_before, dae_after })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn c7_end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for &seed in &SEEDS {
        let o = desk_seed(seed, dir.path())?;
        println!(
            "    seed {}: val Dice {:.4}; shifted Dice {:.4} → {:.4} (adversarial), {:.4} → {:.4} (DAE); HD {:.3} → {:.3}",
            o.seed, o.val_dice, o.adv_before, o.adv_after, o.dae_before, o.dae_after, o.hd_before, o.hd_after
        );
        out.push(o);
    }
    let adv: Vec<f64> = out.iter().map(|o| o.adv_after - o.adv_before).collect();
    let dae: Vec<f64> = out.iter().map(|o| o.dae_after - o.dae_before).collect();
    let hd_b = mean(&out.iter().map(|o| o.hd_before).collect::<Vec<_>>());
    let hd_a = mean(&out.iter().map(|o| o.hd_after).collect::<Vec<_>>());
    let band = sd(&adv).max(sd(&dae));
    let min_val = out.iter().map(|o| o.val_dice).fold(f64::INFINITY, f64::min);
    let summary = format!(
        "min val Dice {min_val:.4}; ΔDice adversarial {:.4} (per seed {adv:.4?}), DAE {:.4}; HD {hd_b:.3} → {hd_a:.3}; |Δadv − Δdae| {:.4} vs band {band:.4}",
        mean(&adv),
        mean(&dae),
        (mean(&adv) - mean(&dae)).abs()
    );
    let mut failed = Vec::new();
    if min_val < 0.80 {
        failed.push("(a)");
    }
    if mean(&adv) < 0.01 {
        failed.push("(b)");
    }
    if hd_a > hd_b {
        failed.push("(c)");
    }
    if !(mean(&dae) > 0.0 && (mean(&adv) - mean(&dae)).abs() < band) {
        failed.push("(d)");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{} not met: {summary}", failed.join(" ")))
    }
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    // The end-to-end experiment is an empirical outcome: it is reported but
    // does not decide the exit status. Every other criterion is exact.
    let criteria: [(usize, &str, fn() -> Check, bool); 9] = [
        (1, "loss-value oracles", c1_loss_oracles, true),
        (2, "gradient checks", c2_gradient_checks, true),
        (3, "adaptor identity at init", c3_adaptor_identity, true),
        (4, "corruption invariants", c4_corruption_invariants, true),
        (5, "metric oracles", c5_metric_oracles, true),
        (6, "spectral-norm bound", c6_spectral_norm, true),
        (7, "desk-scale end-to-end experiment", c7_end_to_end, false),
        (8, "diagnostics classification", c8_diagnostics, true),
        (9, "TTT frozen weights and independence", c9_ttt_invariants, true),
    ];
    let mut failures = 0;
    for (n, name, f, gating) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS [{n}] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failures += usize::from(gating);
                let note = if gating { "" } else { " [reported, not gating]" };
                println!("FAIL [{n}] {name} ({secs:.1}s): {detail}{note}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
