//! Deterministic synthetic weather corruption.
//!
//! Every law maps `[-1, 1]` images into `[-1, 1]` and depends only on the
//! image and the [`WeatherCondition`]:
//!
//! | kind  | law |
//! |-------|-----|
//! | fog   | `out = (1 − i)·in + i` (alpha blend to white) |
//! | dark  | `k = 1 − 0.75·i; out = in·k − 0.75·i·(1 − k)` |
//! | light | `k = 1 − 0.75·i; out = in·k + 0.75·i·(1 − k)` |
//! | rain  | seeded slanted streaks adding +0.8, count ∝ `i` |
//! | snow  | seeded bright disks blended toward white, count ∝ `i` |
//!
//! Composite kinds apply their constituents left to right with the same
//! intensity and seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

const RAIN_BRIGHTNESS: f32 = 0.8;
const RAIN_PIXELS_PER_STREAK: f64 = 12.0;
const SNOW_PIXELS_PER_FLAKE: f64 = 24.0;
const SNOW_LEVEL: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeatherKind {
    Clean,
    Fog,
    Rain,
    Snow,
    Dark,
    Light,
    FogRain,
    FogSnow,
    RainSnow,
    DarkRain,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 10] = [
        WeatherKind::Clean,
        WeatherKind::Fog,
        WeatherKind::Rain,
        WeatherKind::Snow,
        WeatherKind::Dark,
        WeatherKind::Light,
        WeatherKind::FogRain,
        WeatherKind::FogSnow,
        WeatherKind::RainSnow,
        WeatherKind::DarkRain,
    ];

    /// The primitive corruptions this kind applies, in order.
    pub fn constituents(self) -> &'static [WeatherKind] {
        use WeatherKind::*;
        match self {
            Clean => &[],
            Fog => &[Fog],
            Rain => &[Rain],
            Snow => &[Snow],
            Dark => &[Dark],
            Light => &[Light],
            FogRain => &[Fog, Rain],
            FogSnow => &[Fog, Snow],
            RainSnow => &[Rain, Snow],
            DarkRain => &[Dark, Rain],
        }
    }

    pub fn name(self) -> &'static str {
        use WeatherKind::*;
        match self {
            Clean => "clean",
            Fog => "fog",
            Rain => "rain",
            Snow => "snow",
            Dark => "dark",
            Light => "light",
            FogRain => "fog+rain",
            FogSnow => "fog+snow",
            RainSnow => "rain+snow",
            DarkRain => "dark+rain",
        }
    }
}

impl fmt::Display for WeatherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeatherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeatherKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weather kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeatherCondition {
    pub kind: WeatherKind,
    pub intensity: f64,
    pub seed: u64,
}

impl WeatherCondition {
    pub fn new(kind: WeatherKind, intensity: f64, seed: u64) -> Result<Self> {
        let c = Self { kind, intensity, seed };
        c.validate()?;
        Ok(c)
    }

    pub fn clean() -> Self {
        Self { kind: WeatherKind::Clean, intensity: 0.0, seed: 0 }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Input(format!("intensity {} outside [0, 1]", self.intensity)));
        }
        Ok(())
    }
}

/// Applies `cond` to a CHW image (or every image of an NCHW batch).
pub fn corrupt(img: &ImageTensor, cond: &WeatherCondition) -> Result<ImageTensor> {
    cond.validate()?;
    let mut out = img.clone();
    for &kind in cond.kind.constituents() {
        apply_primitive(&mut out, kind, cond.intensity, cond.seed)?;
    }
    Ok(out)
}

fn planes(img: &ImageTensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        [n, c, h, w] => Ok((n * c, h, w)),
        _ => Err(Error::shape(format!("expected CHW image, got {:?}", img.shape()))),
    }
}

fn apply_primitive(img: &mut ImageTensor, kind: WeatherKind, i: f64, seed: u64) -> Result<()> {
    let i32_ = i as f32;
    match kind {
        WeatherKind::Fog => {
            for v in img.data_mut() {
                *v = (1.0 - i32_) * *v + i32_;
            }
        }
        WeatherKind::Dark | WeatherKind::Light => {
            let k = 1.0 - 0.75 * i;
            let shift = 0.75 * i * (1.0 - k);
            let shift = if kind == WeatherKind::Dark { -shift } else { shift };
            let (k, shift) = (k as f32, shift as f32);
            for v in img.data_mut() {
                *v = *v * k + shift;
            }
        }
        WeatherKind::Rain => rain(img, i, seed)?,
        WeatherKind::Snow => snow(img, i, seed)?,
        WeatherKind::Clean => {}
        composite => unreachable!("{composite} is not a primitive"),
    }
    for v in img.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(())
}

/// Marks a per-pixel mask of `h × w` shared by all channels, then applies `f`.
fn for_masked_pixels(img: &mut ImageTensor, mask: &[f32], f: impl Fn(f32, f32) -> f32) -> Result<()> {
    let (planes, h, w) = planes(img)?;
    let data = img.data_mut();
    for p in 0..planes {
        for (v, &m) in data[p * h * w..(p + 1) * h * w].iter_mut().zip(mask) {
            if m > 0.0 {
                *v = f(*v, m);
            }
        }
    }
    Ok(())
}

fn rain(img: &mut ImageTensor, i: f64, seed: u64) -> Result<()> {
    let (_, h, w) = planes(img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5241_494e);
    let count = (i * (h * w) as f64 / RAIN_PIXELS_PER_STREAK).round() as usize;
    let slant: f64 = rng.random_range(0.2..0.45);
    let mut mask = vec![0.0f32; h * w];
    for _ in 0..count {
        let x0: f64 = rng.random_range(0.0..w as f64);
        let y0: f64 = rng.random_range(-3.0..h as f64);
        let len = rng.random_range(3..=6);
        for s in 0..len {
            let y = y0 + s as f64;
            let x = x0 + slant * s as f64;
            if y >= 0.0 && (y as usize) < h && (x as usize) < w {
                mask[y as usize * w + x as usize] = 1.0;
            }
        }
    }
    for_masked_pixels(img, &mask, |v, _| v + RAIN_BRIGHTNESS)
}

fn snow(img: &mut ImageTensor, i: f64, seed: u64) -> Result<()> {
    let (_, h, w) = planes(img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x534e_4f57);
    let count = (i * (h * w) as f64 / SNOW_PIXELS_PER_FLAKE).round() as usize;
    let mut mask = vec![0.0f32; h * w];
    for _ in 0..count {
        let cx: f64 = rng.random_range(0.0..w as f64);
        let cy: f64 = rng.random_range(0.0..h as f64);
        let r: f64 = rng.random_range(0.6..1.6);
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w - 1));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= r {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }
    for_masked_pixels(img, &mask, |v, _| v.max(SNOW_LEVEL))
}

/// Uniform `[-1, 1]` test image; handy for property checks.
pub fn random_image<R: Rng + ?Sized>(c: usize, h: usize, w: usize, rng: &mut R) -> ImageTensor {
    Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0f32..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        random_image(3, 16, 16, &mut rng)
    }

    #[test]
    fn clean_is_identity() {
        let x = img();
        assert_eq!(corrupt(&x, &WeatherCondition::clean()).unwrap(), x);
    }

    #[test]
    fn full_fog_is_white() {
        let c = WeatherCondition::new(WeatherKind::Fog, 1.0, 0).unwrap();
        assert!(corrupt(&img(), &c).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dark_law_on_a_pixel() {
        // i = 0.5: k = 0.625, out = 0.4 * 0.625 - 0.375 * 0.375
        let x = Tensor::image(1, 1, 1, vec![0.4f32]).unwrap();
        let c = WeatherCondition::new(WeatherKind::Dark, 0.5, 0).unwrap();
        let out = corrupt(&x, &c).unwrap().data()[0];
        let expected = 0.4 * 0.625 - 0.375 * 0.375;
        assert!((out as f64 - expected).abs() < 1e-6, "{out} vs {expected}");
    }

    #[test]
    fn intensity_out_of_range() {
        let c = WeatherCondition { kind: WeatherKind::Fog, intensity: 1.5, seed: 0 };
        assert!(matches!(corrupt(&img(), &c), Err(Error::Input(_))));
        assert!(WeatherCondition::new(WeatherKind::Rain, -0.1, 0).is_err());
    }

    #[test]
    fn composites_are_sequential() {
        let x = img();
        for kind in WeatherKind::ALL {
            let c = WeatherCondition::new(kind, 0.6, 77).unwrap();
            let mut seq = x.clone();
            for &part in kind.constituents() {
                seq = corrupt(&seq, &WeatherCondition { kind: part, ..c }).unwrap();
            }
            assert_eq!(corrupt(&x, &c).unwrap(), seq, "{kind}");
        }
    }

    #[test]
    fn rain_and_snow_are_seeded() {
        let x = img();
        for kind in [WeatherKind::Rain, WeatherKind::Snow] {
            let a = corrupt(&x, &WeatherCondition::new(kind, 0.7, 1).unwrap()).unwrap();
            let b = corrupt(&x, &WeatherCondition::new(kind, 0.7, 1).unwrap()).unwrap();
            let c = corrupt(&x, &WeatherCondition::new(kind, 0.7, 2).unwrap()).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert_ne!(a, x);
        }
    }

    #[test]
    fn names_roundtrip() {
        for kind in WeatherKind::ALL {
            assert_eq!(kind.name().parse::<WeatherKind>().unwrap(), kind);
        }
        assert!("hail".parse::<WeatherKind>().is_err());
    }
}
