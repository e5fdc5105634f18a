//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! cargo test -p walmafa-cli --test acceptance -- --nocapture

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walmafa::blocks::{BlockConfig, ChannelMambaWeights, FfabWeights, WmbWeights};
use walmafa::checkpoint::{load_params, save_params};
use walmafa::fourier::{fft2d_polar, ifft2d_polar};
use walmafa::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use walmafa::metrics::{psnr, ssim};
use walmafa::model::{compute_losses, LossTargets, ModelConfig, WalMaFa};
use walmafa::ops::area_downsample;
use walmafa::ssm::{scan, zoh_discretize, zoh_gain_exact, zoh_gain_series, ScanParams, ScanSequence};
use walmafa::wavelet::{dwt2d, iwt2d};
use walmafa::{FeatureMap, Graph, Param, ParamStore, Result as CoreResult, Var};
use walmafa_cli::swap::{run_swap, swap_variants, Variant};
use walmafa_cli::train::{run_train, TrainOptions};
use walmafa_cli::Precision;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    check(
        elapsed.as_secs_f64() < limit_s,
        format!("{detail}; runtime limit {limit_s} s"),
    )
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
}

fn seeded_map(seed: u64, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> FeatureMap {
    random_map(&mut ChaCha8Rng::seed_from_u64(seed), h, w, c, lo, hi)
}

fn wavelet_exactness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rec, mut worst_energy) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (h, w, c) = (2 * rng.gen_range(1..=16), 2 * rng.gen_range(1..=16), rng.gen_range(1..=8));
        let x = random_map(&mut rng, h, w, c, -1.0, 1.0);
        let bands = dwt2d(&x).map_err(|e| e.to_string())?;
        worst_rec = worst_rec.max(iwt2d(&bands).map_err(|e| e.to_string())?.max_abs_diff(&x));
        let e = x.sum_squares();
        worst_energy = worst_energy.max((bands.energy() - e).abs() / e);
    }
    check(
        worst_rec < 1e-12 && worst_energy < 1e-9,
        format!("1000 tensors: max reconstruction error {worst_rec:.2e}, max energy error {worst_energy:.2e}"),
    )
    .and_then(|d| within(t.elapsed(), 10.0, d))
}

fn naive_dft(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re += plane[y * w + x] * a.cos();
                    im += plane[y * w + x] * a.sin();
                }
            }
            out.push((re * norm, im * norm));
        }
    }
    out
}

fn fourier_exactness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut rt, mut pars, mut dft) = (0.0f64, 0.0f64, 0.0f64);
    for h in 1..=16 {
        for w in 1..=16 {
            let x = random_map(&mut rng, h, w, 3, -1.0, 1.0);
            let spec = fft2d_polar(&x);
            rt = rt.max(ifft2d_polar(&spec).map_err(|e| e.to_string())?.image.max_abs_diff(&x));
            let e = x.sum_squares();
            pars = pars.max((spec.amplitude.sum_squares() - e).abs() / e);
            for c in 0..3 {
                let oracle = naive_dft(x.plane(c), h, w);
                for (i, &(re, im)) in oracle.iter().enumerate() {
                    let (a, p) = (spec.amplitude.plane(c)[i], spec.phase.plane(c)[i]);
                    dft = dft.max((a * p.cos() - re).abs().max((a * p.sin() - im).abs()));
                }
            }
        }
    }
    check(
        rt < 1e-10 && pars < 1e-9 && dft < 1e-9,
        format!("all sizes <= 16: round trip {rt:.2e}, Parseval {pars:.2e}, vs direct DFT {dft:.2e}"),
    )
    .and_then(|d| within(t.elapsed(), 30.0, d))
}

fn zoh_correctness() -> Outcome {
    let (ab, bb) = zoh_discretize(-1.0, 1.0, 1.0).map_err(|e| e.to_string())?;
    let ea = (ab - (-1.0f64).exp()).abs();
    let eb = (bb - (1.0 - (-1.0f64).exp())).abs();
    let series = [1e-4, -1e-4]
        .iter()
        .map(|&z| (zoh_gain_series(z) - zoh_gain_exact(z)).abs())
        .fold(0.0, f64::max);
    check(
        ea < 1e-12 && eb < 1e-12 && series < 1e-8,
        format!("A_bar error {ea:.2e}, B_bar error {eb:.2e}, series vs exact at 1e-4: {series:.2e}"),
    )
}

fn scan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (len, dims, n) = (rng.gen_range(1..=32), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let total = len * dims * n;
        let mut u = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let (ab, bb, c) = (u(total, 0.0, 1.0), u(total, -1.0, 1.0), u(total, -1.0, 1.0));
        let (d, x) = (u(dims, -1.0, 1.0), u(len * dims, -1.0, 1.0));
        let p = ScanParams::new(len, dims, n, ab.clone(), bb.clone(), c.clone(), d.clone()).map_err(|e| e.to_string())?;
        let y = scan(&p, &ScanSequence::new(len, dims, x.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let mut h = vec![0.0; dims * n];
        for t in 0..len {
            for dd in 0..dims {
                let mut out = d[dd] * x[t * dims + dd];
                for k in 0..n {
                    let i = (t * dims + dd) * n + k;
                    h[dd * n + k] = ab[i] * h[dd * n + k] + bb[i] * x[t * dims + dd];
                    out += c[i] * h[dd * n + k];
                }
                worst = worst.max((out - y.get(t, dd)).abs());
            }
        }
    }
    check(worst < 1e-12, format!("100 random configurations: max deviation {worst:.2e}"))
}

fn jitter(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        for v in store.values_mut(&name).unwrap() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> CoreResult<Var> {
    let (h, w, c) = g.value(y).shape();
    let probe = g.input(seeded_map(seed, h, w, c, -1.0, 1.0))?;
    let weighted = g.mul(y, probe)?;
    g.sum(weighted)
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    let run = |store: &ParamStore, f: &dyn Fn(&mut Graph) -> CoreResult<Var>, opts: GradCheckOptions| {
        grad_check(store, f, &opts).map_err(|e| e.to_string())
    };

    let mut conv = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, shape) in [("c3.weight", vec![4, 3, 3, 3]), ("c3.bias", vec![4]), ("s.weight", vec![2, 4, 1, 1])] {
        let n = shape.iter().product();
        conv.insert(name, Param::new(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), true).unwrap())
            .unwrap();
    }
    let x = seeded_map(2, 7, 9, 3, -1.0, 1.0);
    let f = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let a = g.conv(xi, "c3.weight", Some("c3.bias"), 1, 1)?;
        let b = g.conv(a, "s.weight", None, 2, 1)?;
        probe_loss(g, b, 3)
    };
    results.push(("conv", run(&conv, &f, GradCheckOptions::default())?));

    let mut ln = ParamStore::new();
    ln.insert("gain", Param::new(vec![5], vec![1.0, 0.5, -0.3, 2.0, 1.2], true).unwrap()).unwrap();
    ln.insert("shift", Param::new(vec![5], vec![0.1, -0.2, 0.0, 0.3, 0.4], true).unwrap()).unwrap();
    let x = seeded_map(4, 4, 4, 5, -1.0, 1.0);
    let f = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let y = g.layer_norm(xi, "gain", "shift", 1e-5)?;
        let y = g.mul(y, y)?;
        probe_loss(g, y, 5)
    };
    results.push(("layer norm", run(&ln, &f, GradCheckOptions::default())?));

    let cfg = BlockConfig {
        state_size: 4,
        expand: 1,
        ..BlockConfig::default()
    };
    let mamba = ChannelMambaWeights::new("m", 4, cfg);
    let mut ms = ParamStore::new();
    mamba.register(&mut ms, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    jitter(&mut ms, 8, 0.1);
    for name in ["m.in_x.weight", "m.in_x.bias", "m.in_z.weight", "m.in_z.bias", "m.out.weight", "m.out.bias"] {
        ms.set_trainable(name, false).unwrap();
    }
    let u = seeded_map(9, 2, 4, 4, -1.0, 1.0);
    let f = |g: &mut Graph| {
        let ui = g.input(u.clone())?;
        let y = mamba.selective_scan(g, ui)?;
        probe_loss(g, y, 10)
    };
    let opts = GradCheckOptions {
        samples_per_param: 16,
        ..GradCheckOptions::default()
    };
    results.push(("selective scan L=8 D=4 N=4", run(&ms, &f, opts)?));

    let wmb = WmbWeights::new(
        "wmb",
        4,
        BlockConfig {
            state_size: 4,
            ..BlockConfig::default()
        },
    );
    let mut ws = ParamStore::new();
    wmb.register(&mut ws, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    jitter(&mut ws, 12, 0.05);
    let x = seeded_map(13, 8, 8, 4, -1.0, 1.0);
    let f = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let (out, ll) = wmb.forward(g, xi)?;
        let a = probe_loss(g, out, 14)?;
        let b = probe_loss(g, ll, 15)?;
        g.weighted_sum(&[(a, 1.0), (b, 0.5)])
    };
    results.push(("WMB 8x8x4", run(&ws, &f, GradCheckOptions::default())?));

    let ffab = FfabWeights::new("ffab", 4, BlockConfig::default());
    let mut fs = ParamStore::new();
    ffab.register(&mut fs, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    jitter(&mut fs, 22, 0.05);
    let x = seeded_map(23, 8, 8, 4, -1.0, 1.0);
    let f = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let y = ffab.forward(g, xi)?;
        probe_loss(g, y, 24)
    };
    results.push(("FFAB 8x8x4", run(&fs, &f, GradCheckOptions::default())?));

    let model = WalMaFa::new(ModelConfig {
        base_width: 4,
        encoder_depths: [1, 1, 1],
        ssm_state: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut full = model.init_params(7).unwrap();
    jitter(&mut full, 107, 0.05);
    let high = seeded_map(207, 16, 16, 3, 0.2, 1.0);
    let low = high.map(|v| 0.3 * v * v);
    let targets = LossTargets::new(&high).unwrap();
    let f = |g: &mut Graph| Ok(model.build_loss(g, &low, &targets)?.total);
    let mut omega = full.clone();
    for name in full.names() {
        omega.set_trainable(name, name.starts_with("omega")).unwrap();
    }
    let kink = GradCheckOptions {
        kink_threshold: Some(0.01),
        ..GradCheckOptions::default()
    };
    results.push(("omega1/omega2 on total loss", run(&omega, &f, kink.clone())?));
    let opts = GradCheckOptions {
        samples_per_param: 3,
        ..kink
    };
    results.push(("full model 16x16", run(&full, &f, opts)?));

    let mut lines = Vec::new();
    let mut ok = true;
    for (what, r) in &results {
        let pass = r.max_rel_error < 1e-3 && r.dead_params().is_empty();
        ok &= pass;
        let checked: usize = r.params.iter().map(|p| p.checked).sum();
        let mut line = format!("{what}: {:.2e} over {checked} entries", r.max_rel_error);
        if !r.nonsmooth.is_empty() {
            line += &format!(" ({} at non-smooth points skipped)", r.nonsmooth.len());
        }
        if !r.dead_params().is_empty() {
            line += &format!(" zero gradient: {:?}", r.dead_params());
        }
        lines.push(line);
    }
    check(ok, lines.join("; ")).and_then(|d| within(t.elapsed(), 300.0, d))
}

fn residual_identities() -> Outcome {
    let x = seeded_map(31, 16, 16, 8, -1.0, 1.0);
    let cfg = BlockConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let wmb = WmbWeights::new("wmb", 8, cfg);
    let mut ws = ParamStore::new();
    wmb.register(&mut ws, &mut rng).unwrap();
    wmb.zero_output_layers(&mut ws).unwrap();
    let ew = walmafa::blocks::wmb_forward(&x, &wmb, &ws).map_err(|e| e.to_string())?.0.max_abs_diff(&x);
    let ffab = FfabWeights::new("ffab", 8, cfg);
    let mut fs = ParamStore::new();
    ffab.register(&mut fs, &mut rng).unwrap();
    ffab.zero_output_layers(&mut fs).unwrap();
    let ef = walmafa::blocks::ffab_forward(&x, &ffab, &fs).map_err(|e| e.to_string())?.max_abs_diff(&x);
    let model = WalMaFa::new(ModelConfig::default()).unwrap();
    let params = model.init_params(33).unwrap();
    let image = seeded_map(34, 32, 24, 3, 0.0, 1.0);
    let exact = model.forward(&params, &image).map_err(|e| e.to_string())?.enhanced == image;
    check(
        ew < 1e-12 && ef < 1e-12 && exact,
        format!("WMB {ew:.2e}, FFAB {ef:.2e}, zero-head model output equals input: {exact}"),
    )
}

fn loss_floor() -> Outcome {
    let cfg = ModelConfig::default();
    let gt = seeded_map(41, 32, 32, 3, 0.0, 1.0);
    let ll = dwt2d(&gt).map_err(|e| e.to_string())?.ll;
    let latent = area_downsample(&gt, 4).map_err(|e| e.to_string())?;
    let r = compute_losses(&gt, &ll, &latent, &gt, &cfg).map_err(|e| e.to_string())?;
    check(
        r.charbonnier == 1e-3 && r.wavelet == 0.0 && r.fourier == 0.0 && r.total == 1e-3,
        format!(
            "L_c {:e}, L_w {:e}, L_f {:e}, L_total {:e} at lambda {}",
            r.charbonnier, r.wavelet, r.fourier, r.total, cfg.lambda
        ),
    )
}

fn toy_convergence() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = run_train(&TrainOptions {
        data: assets().join("train"),
        config: Some(assets().join("toy.cfg")),
        out: dir.path().to_path_buf(),
        seed: 0,
        precision: Precision::F64,
        verbose: false,
    })
    .map_err(|e| e.to_string())?;
    let (first, last) = (report.initial(), report.last());
    let ratio = last.losses.total / first.losses.total;
    check(
        report.pairs.len() == 8 && ratio <= 0.5 && last.psnr > report.psnr_low,
        format!(
            "{} pairs, {} steps: L_total {:.4} -> {:.4} ({:.1}% of initial); PSNR vs high {:.2} dB (low) -> {:.2} dB (enhanced)",
            report.pairs.len(),
            report.steps.len(),
            first.losses.total,
            last.losses.total,
            100.0 * ratio,
            report.psnr_low,
            last.psnr
        ),
    )
    .and_then(|d| within(t.elapsed(), 900.0, d))
}

fn swap_ordering() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (low_p, high_p) = (assets().join("pair/low.png"), assets().join("pair/high.png"));
    let report = run_swap(&low_p, &high_p, dir.path()).map_err(|e| e.to_string())?;
    let ll = report.variant(Variant::SwapLl).vs_high.ssim;
    let amp = report.variant(Variant::SwapAmplitude).vs_high.ssim;
    let low = walmafa_cli::imageio::load_rgb(&low_p).map_err(|e| e.to_string())?;
    let high = walmafa_cli::imageio::load_rgb(&high_p).map_err(|e| e.to_string())?;
    let mut complete = 0.0f64;
    for o in swap_variants(&low, &high).map_err(|e| e.to_string())? {
        if matches!(o.variant, Variant::SwapLlThenHigh | Variant::SwapAmplitudeThenPhase) {
            complete = complete.max(o.image.max_abs_diff(&high));
        }
    }
    check(
        ll > amp && complete < 1e-12,
        format!(
            "SSIM vs high: swap-LL {ll:.4} > swap-amplitude {amp:.4} (unswapped {:.4}); complete swaps reproduce the donor to {complete:.1e}",
            report.low_vs_high.ssim
        ),
    )
    .and_then(|d| within(t.elapsed(), 10.0, d))
}

fn metric_sanity() -> Outcome {
    let a = seeded_map(51, 16, 16, 3, 0.0, 0.9);
    let b = a.map(|v| v + 0.1);
    let p = psnr(&a, &b, 1.0).map_err(|e| e.to_string())?;
    let (s, _) = ssim(&a, &a).map_err(|e| e.to_string())?;
    let model = WalMaFa::new(ModelConfig::default()).unwrap();
    let mut params = model.init_params(52).unwrap();
    jitter(&mut params, 53, 0.1);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bits_equal = true;
    for precision in [Precision::F64, Precision::F32] {
        let mut params = params.clone();
        precision.round_params(&mut params);
        let path = dir.path().join("m.ckpt");
        save_params(&params, &path, precision.dtype()).map_err(|e| e.to_string())?;
        let back = load_params(&path).map_err(|e| e.to_string())?;
        bits_equal &= params.len() == back.len()
            && params.iter().zip(back.iter()).all(|((na, pa), (nb, pb))| {
                na == nb
                    && pa.shape() == pb.shape()
                    && pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
    }
    check(
        (p - 20.0).abs() < 1e-9 && s == 1.0 && bits_equal,
        format!("PSNR at uniform offset 0.1 = {p:.12} dB; SSIM(a, a) = {s}; checkpoint bit-exact (f64 and f32): {bits_equal}"),
    )
}

fn parameter_count() -> Outcome {
    let model = WalMaFa::new(ModelConfig::default()).unwrap();
    let n = model.parameter_count().map_err(|e| e.to_string())?;
    Ok(format!("C=16, D=[2,3,4], N=16: {n} parameters ({:.2} M; reference point 11.09 M)", n as f64 / 1e6))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("wavelet exactness", wavelet_exactness),
        ("Fourier exactness", fourier_exactness),
        ("ZOH correctness", zoh_correctness),
        ("scan oracle equivalence", scan_oracle),
        ("gradient suite", gradient_suite),
        ("residual identities", residual_identities),
        ("loss floor", loss_floor),
        ("toy convergence", toy_convergence),
        ("swap-experiment ordering", swap_ordering),
        ("metric sanity", metric_sanity),
        ("parameter count (informational)", parameter_count),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                println!("criterion {:>2} FAIL  {name}: {d} [{secs:.1} s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
