//! Synthetic nine-stratum image generator.
//!
//! Light level fixes the base luminance, weather adds a texture overlay:
//! a smooth gradient for clear, vertical streaks for rain, small bright
//! discs for snow. Texture strength varies per sample, and dimmer scenes
//! show weaker textures, so some samples are much harder than others.

use std::f64::consts::PI;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::pool::Pool;
use super::sample::{Image, Sample};
use crate::error::{Error, Result};
use crate::labels::{LabelSet, Weather};

/// Base luminance for bright, moderate, low.
pub const LUMINANCE: [f32; 3] = [0.75, 0.45, 0.15];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// Probability of each (weather, light) stratum, weather-major.
    pub priors: Vec<f64>,
    pub side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub texture: TextureConfig,
    /// First sample id; lets several generated pools share an id space.
    #[serde(default)]
    pub first_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureConfig {
    /// Largest offset of the clear-weather gradient.
    pub gradient_max: f64,
    pub rain_streaks: (usize, usize),
    pub rain_intensity: f64,
    pub snow_blobs: (usize, usize),
    pub snow_intensity: f64,
    /// Per-sample texture strength is uniform on this range.
    pub strength: (f64, f64),
    /// Texture visibility multiplier for bright, moderate, low.
    pub visibility: [f64; 3],
    /// Per-sample luminance offset, uniform on `[-j, j]`.
    pub exposure_jitter: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            gradient_max: 0.05,
            rain_streaks: (4, 10),
            rain_intensity: 0.45,
            snow_blobs: (4, 12),
            snow_intensity: 0.6,
            strength: (0.5, 1.0),
            visibility: [1.0, 0.8, 0.6],
            exposure_jitter: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn uniform(n: usize, side: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            n,
            priors: vec![1.0 / 9.0; 9],
            side,
            noise_sigma,
            seed,
            texture: TextureConfig::default(),
            first_id: 0,
        }
    }

    /// Product prior from per-category marginals (clear/rain/snow and
    /// bright/moderate/low).
    pub fn product_priors(weather: [f64; 3], light: [f64; 3]) -> Vec<f64> {
        weather.iter().flat_map(|w| light.iter().map(move |l| w * l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.len() != 9 {
            return Err(Error::Config(format!("need 9 stratum priors, got {}", self.priors.len())));
        }
        if self.priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("priors must be finite and non-negative".into()));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("priors sum to {total}, expected 1")));
        }
        if self.side < 4 {
            return Err(Error::Config(format!("image side {} too small", self.side)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        let t = &self.texture;
        if t.rain_streaks.0 > t.rain_streaks.1 || t.snow_blobs.0 > t.snow_blobs.1 || t.strength.0 > t.strength.1 {
            return Err(Error::Config("texture ranges must be ordered (min, max)".into()));
        }
        Ok(())
    }
}

/// Generates a pool of unlabeled samples with recorded truth.
pub fn synth_generate(config: &SynthConfig) -> Result<Pool> {
    config.validate()?;
    let mut pool = Pool::new(config.side);
    if config.n == 0 {
        return Ok(pool);
    }
    let strata = WeightedIndex::new(&config.priors).map_err(|e| Error::Config(format!("priors: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for i in 0..config.n {
        let label = LabelSet::from_stratum(strata.sample(&mut rng)).expect("nine strata");
        let pixels = render(label, config, &mut rng);
        let image = Image::new(config.side, pixels).expect("rendered pixels are clamped");
        pool.insert(Sample::new(config.first_id + i as u64, image, Some(label)))?;
    }
    Ok(pool)
}

fn render(label: LabelSet, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = config.side;
    let t = &config.texture;
    let light = label.light.index();
    let jitter = if t.exposure_jitter > 0.0 {
        rng.gen_range(-t.exposure_jitter..=t.exposure_jitter)
    } else {
        0.0
    };
    let base = LUMINANCE[light] as f64 + jitter;
    let mut px = vec![base; s * s];
    let strength = rng.gen_range(t.strength.0..=t.strength.1) * t.visibility[light];

    match label.weather {
        Weather::Clear => {
            let amp = rng.gen_range(0.0..=t.gradient_max);
            let angle = rng.gen_range(0.0..2.0 * PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let norm = |i: usize| 2.0 * i as f64 / (s - 1) as f64 - 1.0;
            for y in 0..s {
                for x in 0..s {
                    // |dx·u + dy·v| <= √2, so the offset stays within ±amp
                    px[y * s + x] += amp * (dx * norm(x) + dy * norm(y)) / 2f64.sqrt();
                }
            }
        }
        Weather::Rain => {
            let count = rng.gen_range(t.rain_streaks.0..=t.rain_streaks.1);
            let intensity = t.rain_intensity * strength;
            for _ in 0..count {
                let x = rng.gen_range(0..s);
                let len = rng.gen_range(s / 3..=s);
                let y0 = rng.gen_range(0..=s - len);
                for y in y0..y0 + len {
                    px[y * s + x] += intensity;
                }
            }
        }
        Weather::Snow => {
            let count = rng.gen_range(t.snow_blobs.0..=t.snow_blobs.1);
            let intensity = t.snow_intensity * strength;
            let scale = (s as f64 / 32.0).max(1.0);
            for _ in 0..count {
                let r = rng.gen_range(1..=2) as f64 * scale;
                let (cx, cy) = (rng.gen_range(0..s) as f64, rng.gen_range(0..s) as f64);
                let reach = r.ceil() as isize;
                for oy in -reach..=reach {
                    for ox in -reach..=reach {
                        let (x, y) = (cx as isize + ox, cy as isize + oy);
                        if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
                            continue;
                        }
                        if ((ox * ox + oy * oy) as f64) <= r * r + 0.25 {
                            px[y as usize * s + x as usize] += intensity;
                        }
                    }
                }
            }
        }
    }

    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("sigma validated");
        px.iter_mut().for_each(|p| *p += noise.sample(rng));
    }
    px.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect()
}
