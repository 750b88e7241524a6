//! Procedural paired drone/satellite dataset.
//!
//! Each location is a random layout (background colour, low-frequency
//! texture, a handful of soft-edged blobs). The satellite view renders the
//! layout canonically; a drone view renders it rotated by a multiple of 45°,
//! rescaled by up to ±10% and cropped, then corrupted by a weather condition.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ppm;
use crate::tensor::{ImageTensor, Tensor};
use crate::weather::{corrupt, WeatherCondition, WeatherKind};

/// Fraction of the canonical extent a drone view covers.
const DRONE_CROP: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub locations: usize,
    pub views_per_location: usize,
    /// Locations with drone views that never enter training.
    pub unseen_locations: usize,
    pub distractors: usize,
    pub image_size: usize,
    pub conditions: Vec<WeatherKind>,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            locations: 64,
            views_per_location: 6,
            unseen_locations: 16,
            distractors: 1024,
            image_size: 32,
            conditions: WeatherKind::ALL.to_vec(),
            intensity_min: 0.3,
            intensity_max: 0.8,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.locations < 2 {
            return fail("need at least 2 locations");
        }
        if self.views_per_location == 0 {
            return fail("need at least 1 drone view per location");
        }
        if self.image_size < 8 {
            return fail("image size must be at least 8");
        }
        if self.conditions.is_empty() {
            return fail("condition set is empty");
        }
        if !(0.0 <= self.intensity_min && self.intensity_min <= self.intensity_max && self.intensity_max <= 1.0) {
            return fail("intensity range must satisfy 0 <= min <= max <= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DroneView {
    pub clean: ImageTensor,
    pub corrupted: ImageTensor,
    pub condition: WeatherCondition,
    pub pose_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationSample {
    pub location_id: u64,
    pub satellite_view: ImageTensor,
    pub drone_views: Vec<DroneView>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Training locations, ids `0..locations`.
    pub locations: Vec<LocationSample>,
    /// Held-out locations, ids following the training ones.
    pub unseen: Vec<LocationSample>,
    /// Satellite-only gallery entries, ids following the unseen ones.
    pub distractors: Vec<LocationSample>,
}

impl Dataset {
    /// Every satellite view: training, unseen, then distractors.
    pub fn gallery(&self) -> impl Iterator<Item = (u64, &ImageTensor)> {
        self.locations
            .iter()
            .chain(&self.unseen)
            .chain(&self.distractors)
            .map(|l| (l.location_id, &l.satellite_view))
    }

    pub fn gallery_len(&self) -> usize {
        self.locations.len() + self.unseen.len() + self.distractors.len()
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    square: bool,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Layout {
    background: [f64; 3],
    texture: [(f64, f64, f64, f64); 3],
    blobs: Vec<Blob>,
}

impl Layout {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut color = || [0; 3].map(|_| rng.random_range(-0.8..0.8));
        let background = color();
        let texture = [0; 3].map(|_| {
            (
                rng.random_range(1.5..4.0),
                rng.random_range(1.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        });
        let n = rng.random_range(4..=6);
        let blobs = (0..n)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Blob {
                    cx: rng.random_range(-0.75..0.75),
                    cy: rng.random_range(-0.75..0.75),
                    rx: rng.random_range(0.15..0.45),
                    ry: rng.random_range(0.15..0.45),
                    cos: angle.cos(),
                    sin: angle.sin(),
                    square: rng.random_bool(0.5),
                    color: [0; 3].map(|_| rng.random_range(-0.9..0.9)),
                }
            })
            .collect();
        Self { background, texture, blobs }
    }

    /// Colour at world coordinates `(x, y)`; the canonical view spans `[-1, 1]²`.
    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let (fx, fy, px, py) = self.texture[ch];
            c[ch] = self.background[ch] + 0.12 * (fx * x + px).sin() * (fy * y + py).sin();
        }
        for b in &self.blobs {
            let dx = x - b.cx;
            let dy = y - b.cy;
            let u = (b.cos * dx + b.sin * dy) / b.rx;
            let v = (-b.sin * dx + b.cos * dy) / b.ry;
            let d = if b.square { u.abs().max(v.abs()) } else { (u * u + v * v).sqrt() };
            let m = 1.0 / (1.0 + ((d - 1.0) / 0.08).exp());
            for ch in 0..3 {
                c[ch] = c[ch] * (1.0 - m) + b.color[ch] * m;
            }
        }
        c.map(|v| v.clamp(-1.0, 1.0))
    }

    /// Renders a view whose pixel grid maps to world coordinates through
    /// rotation `angle`, zoom `extent` and translation `(ox, oy)`.
    fn render(&self, size: usize, angle_deg: f64, extent: f64, ox: f64, oy: f64) -> ImageTensor {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let mut data = vec![0.0f32; 3 * size * size];
        for py in 0..size {
            for px in 0..size {
                let u = ((px as f64 + 0.5) / size as f64 * 2.0 - 1.0) * extent;
                let v = ((py as f64 + 0.5) / size as f64 * 2.0 - 1.0) * extent;
                let x = c * u - s * v + ox;
                let y = s * u + c * v + oy;
                let col = self.sample(x, y);
                for ch in 0..3 {
                    data[(ch * size + py) * size + px] = col[ch] as f32;
                }
            }
        }
        Tensor::from_parts(vec![3, size, size], data)
    }
}

fn location_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * (1 << 20));
    ChaCha8Rng::seed_from_u64(rng.random())
}

fn make_location(spec: &DatasetSpec, id: u64, stream: u64, index: u64, views: usize) -> Result<LocationSample> {
    let mut rng = location_rng(spec.seed, stream, index);
    let layout = Layout::random(&mut rng);
    let satellite_view = layout.render(spec.image_size, 0.0, 1.0, 0.0, 0.0);
    let mut drone_views = Vec::with_capacity(views);
    for _ in 0..views {
        let pose_deg = 45.0 * rng.random_range(0..8) as f64;
        let scale: f64 = rng.random_range(0.9..1.1);
        let ox: f64 = rng.random_range(-0.1..0.1);
        let oy: f64 = rng.random_range(-0.1..0.1);
        let clean = layout.render(spec.image_size, pose_deg, DRONE_CROP / scale, ox, oy);
        let kind = spec.conditions[rng.random_range(0..spec.conditions.len())];
        let intensity = if kind == WeatherKind::Clean {
            0.0
        } else {
            rng.random_range(spec.intensity_min..=spec.intensity_max)
        };
        let condition = WeatherCondition::new(kind, intensity, rng.random())?;
        let corrupted = corrupt(&clean, &condition)?;
        drone_views.push(DroneView { clean, corrupted, condition, pose_deg });
    }
    Ok(LocationSample { location_id: id, satellite_view, drone_views })
}

/// Generates the dataset; a pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_seen = spec.locations as u64;
    let n_unseen = spec.unseen_locations as u64;
    let locations = (0..n_seen)
        .map(|i| make_location(spec, i, 0, i, spec.views_per_location))
        .collect::<Result<_>>()?;
    let unseen = (0..n_unseen)
        .map(|i| make_location(spec, n_seen + i, 1, i, spec.views_per_location))
        .collect::<Result<_>>()?;
    let distractors = (0..spec.distractors as u64)
        .map(|i| make_location(spec, n_seen + n_unseen + i, 2, i, 0))
        .collect::<Result<_>>()?;
    Ok(Dataset { locations, unseen, distractors })
}

/// Writes one directory per location with PPM images and a `manifest.csv`
/// (`location_id,role,path,weather_kind,intensity,pose_deg`).
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    manifest
        .write_record(["location_id", "role", "path", "weather_kind", "intensity", "pose_deg"])
        .map_err(csv_err)?;
    let groups = [("satellite", &ds.locations), ("satellite", &ds.unseen), ("distractor", &ds.distractors)];
    for (role, group) in groups {
        for loc in group.iter() {
            let sub = format!("loc_{:05}", loc.location_id);
            fs::create_dir_all(dir.join(&sub))?;
            let rel = format!("{sub}/satellite.ppm");
            ppm::write_ppm(&dir.join(&rel), &loc.satellite_view)?;
            let id = loc.location_id.to_string();
            manifest.write_record([id.as_str(), role, &rel, "clean", "0", "0"]).map_err(csv_err)?;
            for (k, view) in loc.drone_views.iter().enumerate() {
                let rel = format!("{sub}/drone_{k:02}.ppm");
                ppm::write_ppm(&dir.join(&rel), &view.corrupted)?;
                manifest
                    .write_record([
                        id.as_str(),
                        "drone",
                        &rel,
                        view.condition.kind.name(),
                        &view.condition.intensity.to_string(),
                        &view.pose_deg.to_string(),
                    ])
                    .map_err(csv_err)?;
            }
        }
    }
    manifest.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            locations: 3,
            views_per_location: 2,
            unseen_locations: 1,
            distractors: 2,
            image_size: 16,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let a = generate_dataset(&small(5)).unwrap();
        let b = generate_dataset(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(&small(6)).unwrap());
        assert_eq!(a.gallery_len(), 6);
        let ids: Vec<u64> = a.gallery().map(|(id, _)| id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
        for loc in &a.locations {
            assert_eq!(loc.drone_views.len(), 2);
            for v in &loc.drone_views {
                assert_eq!(v.clean.shape(), loc.satellite_view.shape());
                assert!(v.corrupted.data().iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
        assert!(a.distractors.iter().all(|d| d.drone_views.is_empty()));
    }

    #[test]
    fn location_layouts_do_not_depend_on_counts() {
        let a = generate_dataset(&small(5)).unwrap();
        let b = generate_dataset(&DatasetSpec { locations: 5, distractors: 0, ..small(5) }).unwrap();
        assert_eq!(a.locations[..3], b.locations[..3]);
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(generate_dataset(&DatasetSpec { locations: 1, ..small(1) }).is_err());
        assert!(generate_dataset(&DatasetSpec { image_size: 4, ..small(1) }).is_err());
        assert!(generate_dataset(&DatasetSpec { conditions: vec![], ..small(1) }).is_err());
    }

    #[test]
    fn export_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(2)).unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "location_id,role,path,weather_kind,intensity,pose_deg");
        // 6 satellites + 4 seen/unseen * 2 drone views
        assert_eq!(lines.len(), 1 + 6 + 8);
        assert!(dir.path().join("loc_00000/drone_01.ppm").exists());
        assert!(lines.iter().any(|l| l.contains(",distractor,")));
    }
}
