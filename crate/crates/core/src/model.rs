//! The encoder / latent / decoder network.
//!
//! ```text
//! I --stem--> F0 --WMB*d0--> a0 --down--> WMB*d1 --> a1 --down--> WMB*d2 --> a2
//!
//! y0 = FFAB(a2)          y1..y3 = FFAB(y_{i-1})
//! y4 = FFAB(fuse1[y1, y3])   y5 = FFAB(fuse2[y0, y4])
//!
//! b2 = WMB*d2(y5)
//! b1 = WMB*d1(up(b2) + w1 * a1)
//! b0 = WMB*d0(up(b1) + w2 * a0)
//! I_e = conv3x3(b0) + I
//! ```
//!
//! Downsampling is pixel-unshuffle followed by a pointwise conv `4c -> 2c`;
//! upsampling is a pointwise conv `c -> 2c` followed by pixel-shuffle.
//! Besides `I_e` the forward pass yields two auxiliary 3-channel outputs:
//! the last decoder block's LL band (through `ll_proj`) and the latent `y5`
//! (through `latent_proj`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{constant, register_conv, BlockConfig, FfabWeights, WmbWeights};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::fourier::fft2d_polar;
use crate::graph::{Graph, Var};
use crate::ops::area_downsample;
use crate::tensor::{FeatureMap, ParamStore};
use crate::wavelet::dwt2d;

pub const LATENT_FFABS: usize = 6;
/// Version tag written into serialized configs.
pub const CONFIG_VERSION: u32 = 1;
/// Spatial dims must be multiples of this.
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_width: usize,
    pub encoder_depths: [usize; 3],
    pub latent_ffabs: usize,
    pub ssm_state: usize,
    /// Weight of the wavelet and Fourier auxiliary losses.
    pub lambda: f64,
    pub epsilon_charbonnier: f64,
    /// Mamba inner width multiple.
    pub mamba_expand: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            encoder_depths: [2, 3, 4],
            latent_ffabs: LATENT_FFABS,
            ssm_state: 16,
            lambda: 0.1,
            epsilon_charbonnier: 1e-3,
            mamba_expand: 2,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 8] = [
        "format_version",
        "base_width",
        "encoder_depths",
        "latent_ffabs",
        "ssm_state",
        "lambda",
        "epsilon_charbonnier",
        "mamba_expand",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::param("base_width must be positive"));
        }
        if self.encoder_depths.contains(&0) {
            return Err(Error::param("encoder depths must be positive"));
        }
        if self.latent_ffabs != LATENT_FFABS {
            return Err(Error::param(format!("latent_ffabs is fixed at {LATENT_FFABS}")));
        }
        if self.ssm_state == 0 || self.mamba_expand == 0 {
            return Err(Error::param("ssm_state and mamba_expand must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::param("lambda must be finite and non-negative"));
        }
        if !(self.epsilon_charbonnier.is_finite() && self.epsilon_charbonnier > 0.0) {
            return Err(Error::param("epsilon_charbonnier must be positive"));
        }
        Ok(())
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            state_size: self.ssm_state,
            expand: self.mamba_expand,
            ..BlockConfig::default()
        }
    }

    /// Reads the model keys of `kv`, falling back to defaults. A
    /// `format_version` other than [`CONFIG_VERSION`] is a version error.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.parsed::<u32>("format_version")? {
            if v != CONFIG_VERSION {
                return Err(Error::Version(format!(
                    "config format version {v}, expected {CONFIG_VERSION}"
                )));
            }
        }
        let d = ModelConfig::default();
        let encoder_depths = match kv.parsed_list::<usize>("encoder_depths")? {
            None => d.encoder_depths,
            Some(v) => <[usize; 3]>::try_from(v.as_slice())
                .map_err(|_| Error::param("encoder_depths needs exactly three entries"))?,
        };
        let cfg = ModelConfig {
            base_width: kv.parsed("base_width")?.unwrap_or(d.base_width),
            encoder_depths,
            latent_ffabs: kv.parsed("latent_ffabs")?.unwrap_or(d.latent_ffabs),
            ssm_state: kv.parsed("ssm_state")?.unwrap_or(d.ssm_state),
            lambda: kv.parsed("lambda")?.unwrap_or(d.lambda),
            epsilon_charbonnier: kv.parsed("epsilon_charbonnier")?.unwrap_or(d.epsilon_charbonnier),
            mamba_expand: kv.parsed("mamba_expand")?.unwrap_or(d.mamba_expand),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("format_version", CONFIG_VERSION);
        kv.set("base_width", self.base_width);
        let [a, b, c] = self.encoder_depths;
        kv.set("encoder_depths", format!("{a}, {b}, {c}"));
        kv.set("latent_ffabs", self.latent_ffabs);
        kv.set("ssm_state", self.ssm_state);
        // `{:?}` keeps f64 round-trip exact
        kv.set("lambda", format!("{:?}", self.lambda));
        kv.set("epsilon_charbonnier", format!("{:?}", self.epsilon_charbonnier));
        kv.set("mamba_expand", self.mamba_expand);
        kv
    }
}

/// Graph handles of the three forward outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub enhanced: Var,
    pub ll_pred: Var,
    pub latent_out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `H x W x 3`
    pub enhanced: FeatureMap,
    /// `H/2 x W/2 x 3`
    pub ll_pred: FeatureMap,
    /// `H/4 x W/4 x 3`
    pub latent_out: FeatureMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub charbonnier: f64,
    pub wavelet: f64,
    pub fourier: f64,
}

/// Everything the losses need from a ground-truth image.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub image: FeatureMap,
    pub ll: FeatureMap,
    /// Phase of the 4x area-downsampled image.
    pub latent_phase: FeatureMap,
}

impl LossTargets {
    pub fn new(ground_truth: &FeatureMap) -> Result<Self> {
        let (h, w, _) = ground_truth.shape();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("ground truth {h}x{w} must have dims divisible by 4")));
        }
        Ok(LossTargets {
            image: ground_truth.clone(),
            ll: dwt2d(ground_truth)?.ll,
            latent_phase: fft2d_polar(&area_downsample(ground_truth, 4)?).phase,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub charbonnier: Var,
    pub wavelet: Var,
    pub fourier: Var,
}

impl LossVars {
    pub fn record(&self, g: &Graph) -> LossRecord {
        LossRecord {
            total: g.value(self.total).item(),
            charbonnier: g.value(self.charbonnier).item(),
            wavelet: g.value(self.wavelet).item(),
            fourier: g.value(self.fourier).item(),
        }
    }
}

/// Appends the losses of `out` against `targets` to `g`.
pub fn build_losses(g: &mut Graph, out: OutputVars, targets: &LossTargets, cfg: &ModelConfig) -> Result<LossVars> {
    g.set_stage("loss");
    let charbonnier = g.charbonnier(out.enhanced, &targets.image, cfg.epsilon_charbonnier)?;
    let wavelet = g.rms_diff(out.ll_pred, &targets.ll)?;
    let spec = g.fft_polar(out.latent_out)?;
    let c = g.value(out.latent_out).channels();
    let phase = g.slice(spec, c, c)?;
    let fourier = g.rms_diff(phase, &targets.latent_phase)?;
    let total = g.weighted_sum(&[(charbonnier, 1.0), (wavelet, cfg.lambda), (fourier, cfg.lambda)])?;
    Ok(LossVars {
        total,
        charbonnier,
        wavelet,
        fourier,
    })
}

/// Evaluates the four losses on concrete outputs.
pub fn compute_losses(
    enhanced: &FeatureMap,
    ll_pred: &FeatureMap,
    latent_out: &FeatureMap,
    ground_truth: &FeatureMap,
    cfg: &ModelConfig,
) -> Result<LossRecord> {
    let targets = LossTargets::new(ground_truth)?;
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let out = OutputVars {
        enhanced: g.input(enhanced.clone())?,
        ll_pred: g.input(ll_pred.clone())?,
        latent_out: g.input(latent_out.clone())?,
    };
    Ok(build_losses(&mut g, out, &targets, cfg)?.record(&g))
}

/// Architecture description; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct WalMaFa {
    config: ModelConfig,
    encoder: [Vec<WmbWeights>; 3],
    latent: Vec<FfabWeights>,
    decoder: [Vec<WmbWeights>; 3],
}

fn level_width(c: usize, level: usize) -> usize {
    c << level
}

impl WalMaFa {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_width;
        let bc = config.block_config();
        let stack = |side: &str, level: usize| -> Vec<WmbWeights> {
            (0..config.encoder_depths[level])
                .map(|i| WmbWeights::new(format!("{side}.{level}.{i}"), level_width(c, level), bc))
                .collect()
        };
        let encoder = [stack("encoder", 0), stack("encoder", 1), stack("encoder", 2)];
        let decoder = [stack("decoder", 0), stack("decoder", 1), stack("decoder", 2)];
        let latent = (0..LATENT_FFABS)
            .map(|k| FfabWeights::new(format!("latent.{k}"), 4 * c, bc))
            .collect();
        Ok(WalMaFa {
            config,
            encoder,
            latent,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder_blocks(&self, level: usize) -> &[WmbWeights] {
        &self.encoder[level]
    }

    pub fn decoder_blocks(&self, level: usize) -> &[WmbWeights] {
        &self.decoder[level]
    }

    pub fn latent_blocks(&self) -> &[FfabWeights] {
        &self.latent
    }

    /// Seeded initialization. The head starts at zero so the untrained
    /// network returns its input.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = self.config.base_width;
        register_conv(&mut s, &mut rng, "stem.point", 3, c, 1, 1, true)?;
        register_conv(&mut s, &mut rng, "stem.spatial", 3, c, 3, 1, true)?;
        for level in 0..3 {
            for b in &self.encoder[level] {
                b.register(&mut s, &mut rng)?;
            }
            if level < 2 {
                let w = level_width(c, level);
                register_conv(&mut s, &mut rng, &format!("down.{level}"), 4 * w, 2 * w, 1, 1, false)?;
            }
        }
        for b in &self.latent {
            b.register(&mut s, &mut rng)?;
        }
        register_conv(&mut s, &mut rng, "latent.fuse1", 8 * c, 4 * c, 1, 1, true)?;
        register_conv(&mut s, &mut rng, "latent.fuse2", 8 * c, 4 * c, 1, 1, true)?;
        for level in (0..3).rev() {
            for b in &self.decoder[level] {
                b.register(&mut s, &mut rng)?;
            }
            if level > 0 {
                let w = level_width(c, level);
                register_conv(&mut s, &mut rng, &format!("up.{level}"), w, 2 * w, 1, 1, false)?;
            }
        }
        s.insert("omega1", constant(&[1], 1.0))?;
        s.insert("omega2", constant(&[1], 1.0))?;
        s.insert("head.weight", constant(&[3, c, 3, 3], 0.0))?;
        s.insert("head.bias", constant(&[3], 0.0))?;
        register_conv(&mut s, &mut rng, "ll_proj", c, 3, 1, 1, true)?;
        register_conv(&mut s, &mut rng, "latent_proj", 4 * c, 3, 1, 1, true)?;
        Ok(s)
    }

    /// Checks that `params` holds exactly this architecture's tensors.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let reference = self.init_params(0)?;
        if reference.len() != params.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} tensors, architecture expects {}",
                params.len(),
                reference.len()
            )));
        }
        for (name, p) in reference.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Version(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != p.shape() {
                return Err(Error::Version(format!(
                    "`{name}` has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.init_params(0)?.num_scalars())
    }

    /// `F0 = conv1x1(I) + conv3x3(I)`.
    pub fn stem(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let channels = g.value(image).channels();
        if channels != 3 {
            return Err(Error::shape(format!("stem expects 3 channels, got {channels}")));
        }
        g.set_stage("stem");
        let a = g.conv(image, "stem.point.weight", Some("stem.point.bias"), 1, 1)?;
        let b = g.conv(image, "stem.spatial.weight", Some("stem.spatial.bias"), 1, 1)?;
        g.add(a, b)
    }

    fn run_stack(g: &mut Graph, blocks: &[WmbWeights], mut x: Var) -> Result<(Var, Option<Var>)> {
        let mut ll = None;
        for b in blocks {
            g.set_stage(b.prefix.clone());
            let (out, low) = b.forward(g, x)?;
            x = out;
            ll = Some(low);
        }
        Ok((x, ll))
    }

    pub fn build(&self, g: &mut Graph, image: Var) -> Result<OutputVars> {
        let (h, w, _) = g.value(image).shape();
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            let up = |n: usize| n.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
            return Err(Error::shape(format!(
                "input {h}x{w} must have dims divisible by {SIZE_MULTIPLE}; pad to {}x{}",
                up(h),
                up(w)
            )));
        }
        let mut x = self.stem(g, image)?;
        let mut skips = Vec::with_capacity(3);
        for level in 0..3 {
            let (out, _) = Self::run_stack(g, &self.encoder[level], x)?;
            skips.push(out);
            x = out;
            if level < 2 {
                g.set_stage(format!("down.{level}"));
                let u = g.pixel_unshuffle(x)?;
                x = g.conv(u, &format!("down.{level}.weight"), None, 1, 1)?;
            }
        }

        let mut ys = Vec::with_capacity(LATENT_FFABS);
        for (k, block) in self.latent.iter().enumerate() {
            g.set_stage(block.prefix.clone());
            let input = match k {
                0 => skips[2],
                1..=3 => ys[k - 1],
                4 => {
                    let cat = g.concat(&[ys[1], ys[3]])?;
                    g.conv(cat, "latent.fuse1.weight", Some("latent.fuse1.bias"), 1, 1)?
                }
                _ => {
                    let cat = g.concat(&[ys[0], ys[4]])?;
                    g.conv(cat, "latent.fuse2.weight", Some("latent.fuse2.bias"), 1, 1)?
                }
            };
            ys.push(block.forward(g, input)?);
        }
        let y5 = ys[LATENT_FFABS - 1];
        g.set_stage("latent_proj");
        let latent_out = g.conv(y5, "latent_proj.weight", Some("latent_proj.bias"), 1, 1)?;

        x = y5;
        let mut ll = None;
        for level in (0..3).rev() {
            if level < 2 {
                g.set_stage(format!("up.{}", level + 1));
                let widened = g.conv(x, &format!("up.{}.weight", level + 1), None, 1, 1)?;
                let up = g.pixel_shuffle(widened)?;
                let omega = if level == 1 { "omega1" } else { "omega2" };
                let skip = g.scale_by(skips[level], omega)?;
                x = g.add(up, skip)?;
            }
            let (out, low) = Self::run_stack(g, &self.decoder[level], x)?;
            x = out;
            ll = low;
        }
        let ll = ll.expect("decoder stacks are non-empty");

        g.set_stage("head");
        let ll_pred = g.conv(ll, "ll_proj.weight", Some("ll_proj.bias"), 1, 1)?;
        let residual = g.conv(x, "head.weight", Some("head.bias"), 1, 1)?;
        let enhanced = g.add(residual, image)?;
        Ok(OutputVars {
            enhanced,
            ll_pred,
            latent_out,
        })
    }

    pub fn forward(&self, params: &ParamStore, image: &FeatureMap) -> Result<ModelOutput> {
        let mut g = Graph::new(params);
        let input = g.input(image.clone())?;
        let out = self.build(&mut g, input)?;
        Ok(ModelOutput {
            enhanced: g.value(out.enhanced).clone(),
            ll_pred: g.value(out.ll_pred).clone(),
            latent_out: g.value(out.latent_out).clone(),
        })
    }

    /// Forward pass plus losses in one graph.
    pub fn build_loss(&self, g: &mut Graph, image: &FeatureMap, targets: &LossTargets) -> Result<LossVars> {
        let input = g.input(image.clone())?;
        let out = self.build(g, input)?;
        build_losses(g, out, targets, &self.config)
    }

    pub fn losses(&self, params: &ParamStore, image: &FeatureMap, ground_truth: &FeatureMap) -> Result<LossRecord> {
        let targets = LossTargets::new(ground_truth)?;
        let mut g = Graph::new(params);
        let vars = self.build_loss(&mut g, image, &targets)?;
        Ok(vars.record(&g))
    }
}
