use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walmafa::blocks::{BlockConfig, ChannelMambaWeights, FfabWeights, WmbWeights};
use walmafa::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use walmafa::model::{LossTargets, ModelConfig, WalMaFa};
use walmafa::{FeatureMap, Graph, Param, ParamStore, Result, Var};

const TOL: f64 = 1e-3;

fn random_map(seed: u64, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
}

/// Adds small noise to every parameter so zero-initialized layers are
/// generic.
fn jitter(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        for v in store.values_mut(&name).unwrap() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// `sum(y * probe)` for a fixed random probe.
fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (h, w, c) = g.value(y).shape();
    let probe = g.input(random_map(seed, h, w, c, -1.0, 1.0))?;
    let weighted = g.mul(y, probe)?;
    g.sum(weighted)
}

fn assert_report(what: &str, report: &GradCheckReport) {
    println!(
        "{what}: max rel error {:.3e} at {:?}, {} non-smooth entries skipped",
        report.max_rel_error,
        report.worst,
        report.nonsmooth.len()
    );
    assert!(report.max_rel_error < TOL, "{what}: {report:#?}");
}

#[test]
fn conv_layers() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Param::new(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), true).unwrap()
    };
    store.insert("c3.weight", p(vec![4, 3, 3, 3])).unwrap();
    store.insert("c3.bias", p(vec![4])).unwrap();
    store.insert("g.weight", p(vec![6, 2, 3, 3])).unwrap();
    store.insert("g.bias", p(vec![6])).unwrap();
    store.insert("s.weight", p(vec![2, 6, 1, 1])).unwrap();
    let x = random_map(2, 7, 9, 3, -1.0, 1.0);
    let loss = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let a = g.conv(xi, "c3.weight", Some("c3.bias"), 1, 1)?;
        let a = g.concat(&[a, a])?;
        let a = g.slice(a, 1, 6)?;
        let b = g.conv(a, "g.weight", Some("g.bias"), 1, 3)?;
        let c = g.conv(b, "s.weight", None, 2, 1)?;
        probe_loss(g, c, 3)
    };
    let report = grad_check(&store, loss, &GradCheckOptions::default()).unwrap();
    assert_report("conv", &report);
    assert!(report.dead_params().is_empty());
}

#[test]
fn layer_norm_affine() {
    let mut store = ParamStore::new();
    store.insert("gain", Param::new(vec![5], vec![1.0, 0.5, -0.3, 2.0, 1.2], true).unwrap()).unwrap();
    store.insert("shift", Param::new(vec![5], vec![0.1, -0.2, 0.0, 0.3, 0.4], true).unwrap()).unwrap();
    let x = random_map(4, 4, 4, 5, -1.0, 1.0);
    let loss = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let y = g.layer_norm(xi, "gain", "shift", 1e-5)?;
        let y = g.mul(y, y)?;
        probe_loss(g, y, 5)
    };
    let report = grad_check(&store, loss, &GradCheckOptions::default()).unwrap();
    assert_report("layer norm", &report);
}

#[test]
fn selective_scan_weights() {
    // L = 8 positions, D = 4 features, N = 4 modes
    let cfg = BlockConfig {
        state_size: 4,
        expand: 1,
        ..BlockConfig::default()
    };
    let mamba = ChannelMambaWeights::new("m", 4, cfg);
    let mut store = ParamStore::new();
    mamba.register(&mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    jitter(&mut store, 8, 0.1);
    let u = random_map(9, 2, 4, 4, -1.0, 1.0);
    let loss = |g: &mut Graph| {
        let ui = g.input(u.clone())?;
        let y = mamba.selective_scan(g, ui)?;
        probe_loss(g, y, 10)
    };
    let opts = GradCheckOptions {
        samples_per_param: 16,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&store, loss, &opts).unwrap();
    assert_report("selective scan", &report);
    let scan_params = ["m.dt.weight", "m.dt.bias", "m.b.weight", "m.c.weight", "m.a_log", "m.d_skip"];
    for name in scan_params {
        assert!(report.params.iter().any(|p| p.name == name && p.max_abs_grad > 0.0), "{name}");
    }
}

#[test]
fn wavelet_mamba_block() {
    let cfg = BlockConfig {
        state_size: 4,
        ..BlockConfig::default()
    };
    let block = WmbWeights::new("wmb", 4, cfg);
    let mut store = ParamStore::new();
    block.register(&mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    jitter(&mut store, 12, 0.05);
    let x = random_map(13, 8, 8, 4, -1.0, 1.0);
    let loss = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let (out, ll) = block.forward(g, xi)?;
        let a = probe_loss(g, out, 14)?;
        let b = probe_loss(g, ll, 15)?;
        g.weighted_sum(&[(a, 1.0), (b, 0.5)])
    };
    let report = grad_check(&store, loss, &GradCheckOptions::default()).unwrap();
    assert_report("wmb", &report);
    assert!(report.dead_params().is_empty(), "{:?}", report.dead_params());
}

#[test]
fn fourier_adjustment_block() {
    let block = FfabWeights::new("ffab", 4, BlockConfig::default());
    let mut store = ParamStore::new();
    block.register(&mut store, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    jitter(&mut store, 22, 0.05);
    let x = random_map(23, 8, 8, 4, -1.0, 1.0);
    let loss = |g: &mut Graph| {
        let xi = g.input(x.clone())?;
        let y = block.forward(g, xi)?;
        probe_loss(g, y, 24)
    };
    let report = grad_check(&store, loss, &GradCheckOptions::default()).unwrap();
    assert_report("ffab", &report);
    assert!(report.dead_params().is_empty(), "{:?}", report.dead_params());
}

fn small_model() -> WalMaFa {
    WalMaFa::new(ModelConfig {
        base_width: 4,
        encoder_depths: [1, 1, 1],
        ssm_state: 2,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn pair(seed: u64, size: usize) -> (FeatureMap, FeatureMap) {
    let high = random_map(seed, size, size, 3, 0.2, 1.0);
    let low = high.map(|v| 0.3 * v * v);
    (low, high)
}

#[test]
fn fusion_weights_on_total_loss() {
    let model = small_model();
    let mut store = model.init_params(7).unwrap();
    jitter(&mut store, 107, 0.05);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        store.set_trainable(&name, name.starts_with("omega")).unwrap();
    }
    let (low, high) = pair(207, 16);
    let targets = LossTargets::new(&high).unwrap();
    let loss = |g: &mut Graph| Ok(model.build_loss(g, &low, &targets)?.total);
    let opts = GradCheckOptions {
        kink_threshold: Some(0.01),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&store, loss, &opts).unwrap();
    assert_report("omega", &report);
    assert_eq!(report.params.len(), 2);
    assert!(report.dead_params().is_empty());
}

#[test]
fn full_model_at_16x16() {
    let model = small_model();
    let mut store = model.init_params(7).unwrap();
    jitter(&mut store, 107, 0.05);
    let (low, high) = pair(207, 16);
    let targets = LossTargets::new(&high).unwrap();
    let loss = |g: &mut Graph| Ok(model.build_loss(g, &low, &targets)?.total);
    let opts = GradCheckOptions {
        samples_per_param: 3,
        kink_threshold: Some(0.01),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&store, loss, &opts).unwrap();
    assert_report("full model", &report);
    assert!(report.dead_params().is_empty(), "{:?}", report.dead_params());
}
