//! Synthetic texture datasets with injected defects and ground-truth masks.
//!
//! Normal images share a dataset-level texture (a plaid grating or a smooth
//! value-noise field) under a fixed spatial envelope that makes every
//! position visually unique, plus small per-image phase/amplitude jitter and
//! pixel noise. Three defect kinds probe the three recognition views:
//! local patches (intensity shift), global frequency shifts (subtle,
//! image-wide), and quadrant swaps (locally normal, globally misplaced).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Grating,
    ValueNoise,
}

impl TextureFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TextureFamily::Grating => "grating",
            TextureFamily::ValueNoise => "noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grating" => Ok(TextureFamily::Grating),
            "noise" => Ok(TextureFamily::ValueNoise),
            other => Err(Error::config(format!("unknown texture family '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    LocalPatch,
    GlobalFrequencyShift,
    QuadrantSwap,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::LocalPatch => "local",
            AnomalyKind::GlobalFrequencyShift => "global",
            AnomalyKind::QuadrantSwap => "swap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(AnomalyKind::LocalPatch),
            "global" => Ok(AnomalyKind::GlobalFrequencyShift),
            "swap" => Ok(AnomalyKind::QuadrantSwap),
            other => Err(Error::config(format!("unknown anomaly kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub size: usize,
    pub texture: TextureFamily,
    pub kinds: Vec<AnomalyKind>,
    pub anomaly_fraction: f64,
    pub train_images: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: u8,
    pub mask: Tensor,
    pub kind: Option<AnomalyKind>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub test: Vec<LabeledImage>,
}

/// Frequency multiplier of the global-shift defect; subtle on purpose.
pub const GLOBAL_SHIFT_FACTOR: f64 = 1.18;

struct TextureParams {
    family: TextureFamily,
    size: usize,
    frequency: f64,
    envelope_psi: (f64, f64),
    base_phase: (f64, f64),
    noise_grid: Vec<f64>,
    noise_res: usize,
}

impl TextureParams {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = Rng::new(spec.seed).derive(0x7465_7874);
        let noise_res = 9;
        let noise_grid = (0..noise_res * noise_res)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        // Odd cycle count: a half-image shift lands half a period out of
        // phase, so misplaced quadrants stay locally plausible but disagree
        // with the texture expected at their position.
        Self {
            family: spec.texture,
            size: spec.size,
            frequency: 5.0,
            envelope_psi: (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)),
            base_phase: (rng.uniform(0.0, std::f64::consts::TAU), rng.uniform(0.0, std::f64::consts::TAU)),
            noise_grid,
            noise_res,
        }
    }

    /// Smooth positive field that makes each position visually unique.
    fn envelope(&self, x: f64, y: f64) -> f64 {
        let s = self.size as f64;
        let a = (std::f64::consts::PI * (x + 0.5) / s + self.envelope_psi.0).sin();
        let b = (std::f64::consts::PI * (y + 0.5) / s + self.envelope_psi.1).sin();
        0.7 + 0.3 * a * b
    }

    fn noise_at(&self, u: f64, v: f64) -> f64 {
        let r = self.noise_res;
        let gu = u.clamp(0.0, 1.0) * (r - 1) as f64;
        let gv = v.clamp(0.0, 1.0) * (r - 1) as f64;
        let (u0, v0) = (gu.floor() as usize, gv.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(r - 1), (v0 + 1).min(r - 1));
        let (tu, tv) = (gu - u0 as f64, gv - v0 as f64);
        let g = |a: usize, b: usize| self.noise_grid[a * r + b];
        let top = g(v0, u0) + (g(v0, u1) - g(v0, u0)) * tu;
        let bot = g(v1, u0) + (g(v1, u1) - g(v1, u0)) * tu;
        top + (bot - top) * tv
    }

    /// One image's pixel field before defects, deterministic in `img_rng`.
    fn render(&self, img_rng: &mut Rng, freq_scale: f64) -> Tensor {
        let s = self.size;
        let jitter = (img_rng.uniform(-0.25, 0.25), img_rng.uniform(-0.25, 0.25));
        let amp = 0.35 * (1.0 + img_rng.uniform(-0.05, 0.05));
        let pixel_sigma = 0.02;
        let f = self.frequency * freq_scale;
        let mut out = Tensor::zeros(vec![1, s, s]);
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f64, y as f64);
                let signal = match self.family {
                    TextureFamily::Grating => {
                        let px = (std::f64::consts::TAU * f * xf / s as f64
                            + self.base_phase.0
                            + jitter.0)
                            .sin();
                        let py = (std::f64::consts::TAU * f * yf / s as f64
                            + self.base_phase.1
                            + jitter.1)
                            .sin();
                        px * py
                    }
                    TextureFamily::ValueNoise => {
                        // Frequency shift zooms the field around the center.
                        let cu = 0.5 + (xf / (s - 1) as f64 - 0.5) * freq_scale;
                        let cv = 0.5 + (yf / (s - 1) as f64 - 0.5) * freq_scale;
                        self.noise_at(cu + 0.02 * jitter.0, cv + 0.02 * jitter.1)
                    }
                };
                let v = 0.5
                    + amp * self.envelope(xf, yf) * signal
                    + pixel_sigma * img_rng.normal();
                out.data_mut()[y * s + x] = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Side length of the square local-defect patch for a given spec.
pub fn local_patch_side(spec: &SyntheticSpec) -> usize {
    ((spec.size as f64) * spec.anomaly_fraction.sqrt()).round().max(1.0) as usize
}

fn inject_local_patch(spec: &SyntheticSpec, image: &mut Tensor, rng: &mut Rng) -> Tensor {
    let s = spec.size;
    let side = local_patch_side(spec);
    let y0 = rng.below(s - side + 1);
    let x0 = rng.below(s - side + 1);
    let delta = if rng.below(2) == 0 { 1.0 } else { -1.0 } * rng.uniform(0.3, 0.45);
    let mut mask = Tensor::zeros(vec![s, s]);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let v = image.data()[y * s + x] + delta;
            image.data_mut()[y * s + x] = v.clamp(0.0, 1.0);
            mask.data_mut()[y * s + x] = 1.0;
        }
    }
    mask
}

fn swap_quadrants(spec: &SyntheticSpec, image: &mut Tensor) -> Tensor {
    let s = spec.size;
    let h = s / 2;
    let mut mask = Tensor::zeros(vec![s, s]);
    // Exchange the top-left and bottom-right quadrants, a permutation of
    // pixels that leaves the histogram untouched.
    for y in 0..h {
        for x in 0..h {
            let a = y * s + x;
            let b = (y + h) * s + (x + h);
            image.data_mut().swap(a, b);
            mask.data_mut()[a] = 1.0;
            mask.data_mut()[b] = 1.0;
        }
    }
    mask
}

/// Deterministic dataset generation: a normal-only training set and a test
/// set of normal and defective images with ground-truth masks.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.size % 16 != 0 || spec.size == 0 {
        return Err(Error::config(format!(
            "image size {} must be a positive multiple of 16",
            spec.size
        )));
    }
    if !(0.0..1.0).contains(&spec.anomaly_fraction) || spec.anomaly_fraction <= 0.0 {
        return Err(Error::config("anomaly_fraction must be in (0, 1)"));
    }
    if spec.test_anomalous > 0 && spec.kinds.is_empty() {
        return Err(Error::config("anomalous images need at least one anomaly kind"));
    }
    let params = TextureParams::new(spec);
    let base = Rng::new(spec.seed);

    let train: Vec<Tensor> = (0..spec.train_images)
        .map(|i| params.render(&mut base.derive(10_000 + i as u64), 1.0))
        .collect();

    let mut test = Vec::with_capacity(spec.test_normal + spec.test_anomalous);
    for i in 0..spec.test_normal {
        let image = params.render(&mut base.derive(20_000 + i as u64), 1.0);
        let s = spec.size;
        test.push(LabeledImage {
            image,
            label: 0,
            mask: Tensor::zeros(vec![s, s]),
            kind: None,
        });
    }
    for i in 0..spec.test_anomalous {
        let kind = spec.kinds[i % spec.kinds.len()];
        let mut rng = base.derive(30_000 + i as u64);
        let (image, mask) = match kind {
            AnomalyKind::LocalPatch => {
                let mut image = params.render(&mut rng, 1.0);
                let mask = inject_local_patch(spec, &mut image, &mut rng);
                (image, mask)
            }
            AnomalyKind::GlobalFrequencyShift => {
                let image = params.render(&mut rng, GLOBAL_SHIFT_FACTOR);
                (image, Tensor::filled(vec![spec.size, spec.size], 1.0))
            }
            AnomalyKind::QuadrantSwap => {
                let mut image = params.render(&mut rng, 1.0);
                let mask = swap_quadrants(spec, &mut image);
                (image, mask)
            }
        };
        test.push(LabeledImage {
            image,
            label: 1,
            mask,
            kind: Some(kind),
        });
    }
    Ok(Dataset { train, test })
}
