//! End-to-end acceptance checks. Each test prints a single PASS/FAIL line
//! to stderr (bypassing libtest capture) and then asserts.

use std::f64::consts::PI;
use std::io::Write;
use std::rc::Rc;
use std::time::{Duration, Instant};

use freqmamba::block::{self, Ablation};
use freqmamba::error::Error;
use freqmamba::fourier::{self, FourierBranch};
use freqmamba::model::{Checkpoint, Model, ModelConfig};
use freqmamba::params::ParamStore;
use freqmamba::scan::{self, Axis, Direction, SsmLayer, SsmParams};
use freqmamba::training::{
    evaluate, psnr_y, ssim_y, ssim_y_reference, synth_rain, LossTerm, LossWeights, Pair, RainSynthParams,
    TrainConfig, Trainer,
};
use freqmamba::verify::gradient_suite;
use freqmamba::wavelet::{self, PacketGrid};
use freqmamba::{Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: usize, title: &str, failures: &[String], elapsed: Duration) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let detail = if failures.is_empty() {
        String::new()
    } else {
        format!(": {}", failures.join("; "))
    };
    let mut err = std::io::stderr().lock();
    writeln!(
        err,
        "acceptance {criterion} {status} {title} ({:.1}s){detail}",
        elapsed.as_secs_f64()
    )
    .unwrap();
    assert!(failures.is_empty(), "criterion {criterion} failed: {failures:?}");
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn budget(failures: &mut Vec<String>, start: Instant, limit: Duration) {
    let e = start.elapsed();
    check(failures, e < limit, || format!("runtime {e:?} exceeds {limit:?}"));
}

// ---------------------------------------------------------------- 1

fn direct_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    let val = x[y * w + xx];
                    sr += val * ang.cos();
                    si += val * ang.sin();
                }
            }
            re[u * w + v] = sr;
            im[u * w + v] = si;
        }
    }
    (re, im)
}

#[test]
fn criterion_1_transform_fidelity() {
    let start = Instant::now();
    let mut f = Vec::new();

    let mut worst_direct: f64 = 0.0;
    for h in 1..=16 {
        for w in 1..=16 {
            let x = Tensor::randn(Shape::new(1, 1, h, w), 1.0, (h * 31 + w) as u64);
            let s = fourier::dft2(&x);
            let (re, im) = direct_dft(x.data(), h, w);
            for i in 0..h * w {
                worst_direct = worst_direct
                    .max((s.re.data()[i] - re[i]).abs())
                    .max((s.im.data()[i] - im[i]).abs());
            }
        }
    }
    check(&mut f, worst_direct < 1e-6, || format!("dft2 vs direct sum {worst_direct:e}"));

    let x = Tensor::randn(Shape::new(2, 3, 64, 64), 1.0, 1);
    let back = fourier::idft2(&fourier::dft2(&x));
    let e = back.max_abs_diff(&x);
    check(&mut f, e < 1e-9, || format!("idft2(dft2) {e:e}"));

    for k in 1..=3 {
        let back = wavelet::iwpt(&wavelet::wpt(&x, k).unwrap()).unwrap();
        let e = back.max_abs_diff(&x);
        check(&mut f, e < 1e-9, || format!("iwpt(wpt) k={k} {e:e}"));
    }

    let s = fourier::dft2(&x);
    let spectral = (s.re.sum_sq() + s.im.sum_sq()) / (64.0 * 64.0);
    let rel = (spectral - x.sum_sq()).abs() / x.sum_sq();
    check(&mut f, rel < 1e-6, || format!("Parseval {rel:e}"));

    budget(&mut f, start, Duration::from_secs(10));
    report(1, "transform fidelity", &f, start.elapsed());
}

// ---------------------------------------------------------------- 2

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n && order.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
}

fn softplus_ref(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Direct recurrence over a `L x C` sequence with per-channel states.
fn naive_scan(u: &[f64], l: usize, p: &SsmParams) -> Vec<f64> {
    let (c_n, s_n) = (p.channels, p.state_dim);
    let mut state = vec![vec![0.0; s_n]; c_n];
    let mut y = vec![0.0; l * c_n];
    for t in 0..l {
        let ut = &u[t * c_n..(t + 1) * c_n];
        let z: f64 = p.delta_bias + (0..c_n).map(|c| p.proj_delta[c] * ut[c]).sum::<f64>();
        let delta = softplus_ref(z);
        let b: Vec<f64> = (0..s_n).map(|s| (0..c_n).map(|c| p.proj_b[s * c_n + c] * ut[c]).sum()).collect();
        let cm: Vec<f64> = (0..s_n).map(|s| (0..c_n).map(|c| p.proj_c[s * c_n + c] * ut[c]).sum()).collect();
        for c in 0..c_n {
            let mut out = p.d[c] * ut[c];
            for s in 0..s_n {
                let a = -p.a_log[c * s_n + s].exp();
                state[c][s] = (delta * a).exp() * state[c][s] + delta * b[s] * ut[c];
                out += cm[s] * state[c][s];
            }
            y[t * c_n + c] = out;
        }
    }
    y
}

#[test]
fn criterion_2_scan_correctness() {
    let start = Instant::now();
    let mut f = Vec::new();

    let mut bad = Vec::new();
    for h in 1..=64 {
        for w in 1..=64 {
            for axis in [Axis::Row, Axis::Col] {
                for dir in [Direction::Fwd, Direction::Rev] {
                    let o = scan::order_raster(h, w, axis, dir);
                    if !is_permutation(&o.forward, h * w) {
                        bad.push(format!("{}{h}x{w}", o.name));
                    }
                }
            }
            for k in 1..=3 {
                if let Ok(o) = scan::order_freq_blocks(h, w, k) {
                    if !is_permutation(&o.forward, h * w) {
                        bad.push(format!("freq{k} {h}x{w}"));
                    }
                } else if h % (1 << k) == 0 && w % (1 << k) == 0 {
                    bad.push(format!("freq{k} {h}x{w} rejected"));
                }
            }
        }
    }
    check(&mut f, bad.is_empty(), || format!("non-bijective orders {bad:?}"));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let c = rng.random_range(1..=4);
        let s = rng.random_range(1..=8);
        let l = rng.random_range(1..=256);
        let sh = SsmParams::shapes(c, s);
        let seed = 1000 + case as u64;
        let tensors = [
            Tensor::uniform(sh[0], -1.0, 1.5, seed),
            Tensor::randn(sh[1], 1.0, seed + 1),
            Tensor::randn(sh[2], 0.7, seed + 2),
            Tensor::randn(sh[3], 0.7, seed + 3),
            Tensor::randn(sh[4], 0.5, seed + 4),
            Tensor::randn(sh[5], 1.0, seed + 5),
        ];
        let p = SsmParams::from_tensors([&tensors[0], &tensors[1], &tensors[2], &tensors[3], &tensors[4], &tensors[5]])
            .unwrap();
        let u = Tensor::randn(Shape::new(1, 1, l, c), 1.0, seed + 6);
        let y = scan::selective_scan(&u, &p).unwrap();
        let expected = naive_scan(u.data(), l, &p);
        for (a, b) in y.data().iter().zip(&expected) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    check(&mut f, worst < 1e-12, || format!("selective_scan vs naive recurrence {worst:e}"));

    // Mark each band of the actual mosaic layout with its index and read
    // the marks back along the traversal.
    for (h, w, k) in [(8, 8, 1), (16, 16, 2), (32, 48, 3), (64, 64, 2)] {
        let tile = Shape::new(1, 1, h >> k, w >> k);
        let grid = PacketGrid {
            levels: k,
            bands: (0..PacketGrid::band_count(k)).map(|b| Tensor::full(tile, b as f64)).collect(),
        };
        let mosaic = wavelet::arrange_bands(&grid).unwrap();
        let o = scan::order_freq_blocks(h, w, k).unwrap();
        let ranks: Vec<f64> = o.forward.iter().map(|&p| mosaic.data()[p]).collect();
        let monotone = ranks.windows(2).all(|r| r[0] <= r[1]);
        check(&mut f, monotone, || format!("freq{k} {h}x{w} rank sequence not monotone"));
        let labels_ok = PacketGrid::label(k, 0) == "LL".repeat(k);
        check(&mut f, labels_ok, || format!("band 0 at k={k} is not the all-LL band"));
    }

    budget(&mut f, start, Duration::from_secs(30));
    report(2, "scan correctness", &f, start.elapsed());
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_differentiation() {
    let start = Instant::now();
    let mut f = Vec::new();
    let mut lines = Vec::new();
    for case in gradient_suite() {
        match case.run(1e-5) {
            Ok(err) => {
                lines.push(format!("{}: {err:.2e}", case.name));
                check(&mut f, err < 1e-4, || format!("{} {err:e}", case.name));
            }
            Err(e) => f.push(format!("{}: {e}", case.name)),
        }
    }
    println!("{}", lines.join("\n"));
    budget(&mut f, start, Duration::from_secs(300));
    report(3, "differentiation", &f, start.elapsed());
}

// ---------------------------------------------------------------- 4

fn names(cfg: &ModelConfig) -> Vec<String> {
    let m = Model::build(cfg.clone(), 0).unwrap();
    m.store.names().map(str::to_owned).collect()
}

#[test]
fn criterion_4_block_semantics() {
    let start = Instant::now();
    let mut f = Vec::new();

    let mut store = ParamStore::new(1);
    let fb = FourierBranch::new(&mut store, "f", 3);
    fb.set_identity(&mut store, 50.0);
    let x = Tensor::randn(Shape::new(2, 3, 16, 16), 1.0, 2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = fb.forward(&mut tape, &p, xv).unwrap();
    let e = tape.value(y).max_abs_diff(&x);
    check(&mut f, e < 1e-9, || format!("fourier identity {e:e}"));

    let band = block::band_branch_with(&mut tape, xv, |_, m, _| Ok(m)).unwrap();
    let expected = x.map(|v| v * v / (1.0 + (-v).exp()));
    let e = tape.value(band).max_abs_diff(&expected);
    check(&mut f, e < 1e-9, || format!("band gated identity {e:e}"));

    let mut store = ParamStore::new(3);
    let layer = SsmLayer::new(&mut store, "s", 3, 8);
    layer.set_skip_only(&mut store);
    let p = store.bind(&mut tape, false);
    let tr = vec![(Rc::new(scan::order_raster(16, 16, Axis::Row, Direction::Fwd)), layer.vars(&p))];
    let sy = scan::scan2d(&mut tape, xv, &tr).unwrap();
    let e = tape.value(sy).max_abs_diff(&x);
    check(&mut f, e < 1e-9, || format!("scan2d skip identity {e:e}"));

    // Ablation rows: each flag removes exactly its own component.
    let full = names(&ModelConfig::default());
    let has = |n: &[String], part: &str| n.iter().any(|s| s.contains(part));
    for part in [".fourier.", ".band.", ".spatial.mamba.", ".attention."] {
        check(&mut f, has(&full, part), || format!("full model lacks {part}"));
    }
    let rows: [(&str, Ablation, &str); 4] = [
        ("w/o Fourier", Ablation { use_fourier: false, ..Ablation::default() }, ".fourier."),
        ("w/o band", Ablation { use_band: false, ..Ablation::default() }, ".band."),
        ("w/o spatial", Ablation { use_spatial_mamba: false, ..Ablation::default() }, ".spatial.mamba."),
        ("w/o map", Ablation { use_attention_map: false, ..Ablation::default() }, ".attention."),
    ];
    let groups = [".fourier.", ".band.", ".spatial.mamba.", ".attention."];
    for (row, ablation, removed) in rows {
        let cfg = ModelConfig {
            ablation,
            ..ModelConfig::default()
        };
        let n = names(&cfg);
        for g in groups {
            let want = g != removed;
            check(&mut f, has(&n, g) == want, || format!("{row}: presence of {g} should be {want}"));
        }
        if row == "w/o spatial" {
            check(&mut f, has(&n, ".spatial.conv0."), || "w/o spatial lacks the conv replacement".into());
        }
        let untouched: Vec<&String> = full.iter().filter(|s| !s.contains(removed) && !s.contains(".fuse.")).collect();
        let kept = untouched
            .iter()
            .all(|s| n.contains(s) || (row == "w/o spatial" && s.contains(".spatial.")));
        check(&mut f, kept, || format!("{row}: unrelated parameters changed"));
    }

    // Loss ablation rows: loss terms present in the graph.
    let table3 = [
        ("full", LossWeights { alpha: 0.05, beta: 0.05 }, vec![LossTerm::Spatial, LossTerm::Amplitude, LossTerm::Phase]),
        ("w/o L_amp", LossWeights { alpha: 0.0, beta: 0.05 }, vec![LossTerm::Spatial, LossTerm::Phase]),
        ("w/o L_pha", LossWeights { alpha: 0.05, beta: 0.0 }, vec![LossTerm::Spatial, LossTerm::Amplitude]),
        ("w/o L_freq", LossWeights { alpha: 0.0, beta: 0.0 }, vec![LossTerm::Spatial]),
    ];
    for (row, w, terms) in table3 {
        check(&mut f, w.active_terms() == terms, || format!("loss row {row}: {:?}", w.active_terms()));
    }

    report(4, "block semantics and ablation inventory", &f, start.elapsed());
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_spectrum_swap() {
    let start = Instant::now();
    let mut f = Vec::new();
    let samples = synth_rain(&RainSynthParams::default(), 500, 20).unwrap();
    let mut wins = 0;
    for s in &samples {
        let (rainy_amp, clean_amp) = fourier::spectrum_swap(&s.rainy, &s.clean).unwrap();
        let d = |t: &Tensor| t.zip_with(&s.clean, |a, b| a - b).unwrap().sum_sq().sqrt();
        if d(&rainy_amp) > d(&clean_amp) {
            wins += 1;
        }
    }
    check(&mut f, wins >= 18, || format!("rainy-amplitude output farther in only {wins}/20"));
    budget(&mut f, start, Duration::from_secs(60));
    report(5, &format!("spectrum swap ({wins}/20)"), &f, start.elapsed());
}

// ---------------------------------------------------------------- 6

fn toy_pairs() -> Vec<Pair> {
    synth_rain(&RainSynthParams::default(), 600, 16)
        .unwrap()
        .into_iter()
        .map(|s| Pair {
            rainy: s.rainy,
            clean: s.clean,
        })
        .collect()
}

#[test]
fn criterion_6_toy_training() {
    let start = Instant::now();
    let mut f = Vec::new();
    let cfg = ModelConfig::default();
    let tc = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    const PREFIX: usize = 30;

    let mut trainer = Trainer::new(Model::build(cfg.clone(), 7).unwrap(), tc.clone(), toy_pairs()).unwrap();
    let mut log = Vec::new();
    let mut snapshot = None;
    let mut diverged = None;
    while !trainer.is_done() {
        match trainer.step() {
            Ok(e) => {
                if !(e.loss.total.is_finite() && e.train_psnr.is_finite()) {
                    diverged.get_or_insert(e.iter);
                }
                log.push(e);
            }
            Err(e) => {
                f.push(format!("training aborted: {e}"));
                break;
            }
        }
        if trainer.iteration() == PREFIX {
            snapshot = Some(trainer.model.store.tensors().to_vec());
        }
    }
    check(&mut f, diverged.is_none(), || format!("non-finite values from iteration {diverged:?}"));
    check(&mut f, log.len() == tc.total_iters, || format!("{} of {} iterations ran", log.len(), tc.total_iters));
    check(&mut f, log.first().map(|e| e.lr) == Some(tc.lr_init), || "first lr is not lr_init".into());
    check(&mut f, log.iter().all(|e| e.lr >= tc.lr_min), || "lr below lr_min".into());

    let eval = evaluate(&trainer.model, &toy_pairs()).unwrap();
    let gain = eval.psnr - eval.input_psnr;
    check(&mut f, gain >= 3.0, || {
        format!("PSNR gain {gain:.2} dB ({:.2} -> {:.2})", eval.input_psnr, eval.psnr)
    });

    // Same seed again: the first iterations must match bit for bit.
    let mut again = Trainer::new(Model::build(cfg, 7).unwrap(), tc, toy_pairs()).unwrap();
    let replay: Vec<_> = (0..PREFIX).map(|_| again.step().unwrap()).collect();
    check(&mut f, replay[..] == log[..PREFIX.min(log.len())], || "log differs on replay".into());
    check(&mut f, snapshot.as_deref() == Some(again.model.store.tensors()), || {
        "parameters differ on replay".into()
    });

    budget(&mut f, start, Duration::from_secs(30 * 60));
    report(
        6,
        &format!("toy training (rainy {:.2} dB -> {:.2} dB)", eval.input_psnr, eval.psnr),
        &f,
        start.elapsed(),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_metrics() {
    let start = Instant::now();
    let mut f = Vec::new();
    let a = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.2, 0.8, 1);
    let b = a.map(|v| v + 0.1);
    let p = psnr_y(&a, &b).unwrap();
    check(&mut f, (p - 20.0).abs() < 1e-9, || format!("offset PSNR {p}"));

    let img = Tensor::uniform(Shape::new(1, 3, 48, 40), 0.0, 1.0, 2);
    let s = ssim_y(&img, &img).unwrap();
    check(&mut f, (s - 1.0).abs() < 1e-12, || format!("SSIM(a, a) = {s}"));

    let noisy = img.zip_with(&Tensor::randn(img.shape(), 0.1, 3), |x, n| (x + n).clamp(0.0, 1.0)).unwrap();
    let fast = ssim_y(&img, &noisy).unwrap();
    let reference = ssim_y_reference(&img, &noisy).unwrap();
    check(&mut f, (fast - reference).abs() < 1e-4, || format!("SSIM {fast} vs reference {reference}"));
    report(7, "metrics", &f, start.elapsed());
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_serialization() {
    let start = Instant::now();
    let mut f = Vec::new();
    let dir = tempfile::tempdir().unwrap();

    let cfg = ModelConfig::default();
    let model = Model::build(cfg.clone(), 3).unwrap();
    let path = dir.path().join("m.fmck");
    model.save(&path, 42).unwrap();
    let loaded = Model::load(&path, Some(&cfg)).unwrap();
    let exact = model
        .store
        .tensors()
        .iter()
        .zip(loaded.store.tensors())
        .all(|(a, b)| &a.to_f32_precision() == b);
    check(&mut f, exact, || "checkpoint parameters differ after f32 cast".into());
    let ck = Checkpoint::load(&path).unwrap();
    check(&mut f, ck.iteration == 42, || format!("iteration {}", ck.iteration));

    let bytes = std::fs::read(&path).unwrap();
    let corrupt = |mutate: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        mutate(&mut b);
        Checkpoint::read(&b[..])
    };
    let magic = corrupt(&|b| b[0] = b'X');
    check(&mut f, matches!(magic, Err(Error::MagicMismatch { .. })), || format!("bad magic -> {magic:?}"));
    let version = corrupt(&|b| b[4] = 9);
    check(&mut f, matches!(version, Err(Error::VersionMismatch { .. })), || {
        format!("bad version -> {version:?}")
    });
    let truncated = corrupt(&|b| b.truncate(b.len() - 3));
    check(&mut f, matches!(truncated, Err(Error::Truncated(_))), || {
        format!("truncated -> {truncated:?}")
    });
    let other = ModelConfig {
        base_channels: 12,
        ..cfg
    };
    let mismatch = Model::load(&path, Some(&other));
    check(&mut f, matches!(mismatch, Err(Error::ConfigMismatch(_))), || {
        format!("config mismatch -> {:?}", mismatch.err())
    });

    let t = Tensor::randn(Shape::new(2, 3, 5, 7), 1.0, 4).to_f32_precision();
    let tp = dir.path().join("t.ftd");
    t.save_ftd(&tp).unwrap();
    let back = Tensor::load_ftd(&tp).unwrap();
    check(&mut f, back == t, || "FTD1 round trip not bit-exact".into());
    let mut raw = std::fs::read(&tp).unwrap();
    raw.truncate(raw.len() - 1);
    let r = Tensor::read_ftd(&raw[..]);
    check(&mut f, matches!(r, Err(Error::Truncated(_))), || format!("truncated FTD1 -> {r:?}"));
    raw[0] = b'Z';
    let r = Tensor::read_ftd(&raw[..]);
    check(&mut f, matches!(r, Err(Error::MagicMismatch { .. })), || format!("bad FTD1 magic -> {r:?}"));

    report(8, "serialization", &f, start.elapsed());
}
