//! Deterministic synthetic worlds of geo-tagged feature vectors.
//!
//! Each city is a disk around its center. Routes are random walks through
//! the disk; every route is driven twice, once as a query sequence and once
//! as a database sequence, with independent GPS noise. An image's feature is
//!
//! ```text
//! s * place_code(cell) + (1 - s) * area_code(area) + condition(sequence) + noise
//! ```
//!
//! where `cell` is a fine grid square just under the positive radius, `area`
//! a coarse square shared by many cells, and `condition` a per-sequence
//! offset confined to a few fixed nuisance directions. Nearby cells share
//! the area code, which is what makes geographically wrong but visually
//! similar negatives hard.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{geo_distance, CityId, ContinentId, GeoSample, GeoTag, Role, SampleId, SeqId};
use crate::manifest::Manifest;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_cities: usize,
    /// Explicit city centers; placed on a coarse lat/lon grid when absent.
    pub city_centers: Option<Vec<GeoTag>>,
    /// Continent of each city; two consecutive cities per continent when
    /// absent.
    pub continents: Option<Vec<u32>>,
    pub sequences_per_city: usize,
    pub images_per_sequence: usize,
    /// Radius of each city's disk in meters.
    pub city_radius: f64,
    /// Distance between consecutive images of a route in meters.
    pub step_length: f64,
    /// Side of the place-code grid cell in meters.
    pub place_grid_cell: f64,
    /// Side of the coarse area cell in meters.
    pub area_cell: f64,
    pub feature_dim: usize,
    pub place_signal_strength: f64,
    pub noise_scale: f64,
    /// Magnitude of the per-sequence condition offset.
    pub condition_scale: f64,
    /// Number of nuisance directions the condition offset lives in.
    pub condition_rank: usize,
    /// Maximum GPS error per image in meters.
    pub gps_noise: f64,
    /// Route starts cluster around this many hotspots per city (0: uniform).
    pub hotspots: usize,
    /// Hotspot `r` (1-based) draws routes with weight `r^-hotspot_skew`.
    pub hotspot_skew: f64,
    /// Standard deviation of route starts around a hotspot in meters.
    pub hotspot_spread: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_cities: 8,
            city_centers: None,
            continents: None,
            sequences_per_city: 80,
            images_per_sequence: 10,
            city_radius: 2000.0,
            step_length: 15.0,
            place_grid_cell: 20.0,
            area_cell: 200.0,
            feature_dim: 32,
            place_signal_strength: 0.6,
            noise_scale: 0.05,
            condition_scale: 0.3,
            condition_rank: 4,
            gps_noise: 3.0,
            hotspots: 0,
            hotspot_skew: 1.0,
            hotspot_spread: 300.0,
            seed: 0,
        }
    }
}

/// Fraction of queries that must have a database image within this radius.
pub const USABILITY_RADIUS: f64 = 25.0;
pub const MIN_USABLE_FRACTION: f64 = 0.95;

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_cities", self.n_cities),
            ("sequences_per_city", self.sequences_per_city),
            ("images_per_sequence", self.images_per_sequence),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        let positive = [
            ("city_radius", self.city_radius),
            ("step_length", self.step_length),
            ("place_grid_cell", self.place_grid_cell),
            ("area_cell", self.area_cell),
            ("hotspot_spread", self.hotspot_spread),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0")));
            }
        }
        let non_negative = [
            ("noise_scale", self.noise_scale),
            ("condition_scale", self.condition_scale),
            ("gps_noise", self.gps_noise),
            ("hotspot_skew", self.hotspot_skew),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.place_signal_strength) {
            return Err(Error::config("place_signal_strength must lie in [0, 1]"));
        }
        if let Some(c) = &self.city_centers {
            if c.len() != self.n_cities {
                return Err(Error::config("city_centers must list one center per city"));
            }
        }
        if let Some(c) = &self.continents {
            if c.len() != self.n_cities {
                return Err(Error::config("continents must list one continent per city"));
            }
        }
        Ok(())
    }

    pub fn center(&self, city: usize) -> GeoTag {
        match &self.city_centers {
            Some(c) => c[city],
            None => {
                let row = (city / 6) % 12;
                let col = city % 6;
                GeoTag::new(60.0 - 10.0 * row as f64, -150.0 + 55.0 * col as f64)
                    .expect("grid centers are in range")
            }
        }
    }

    pub fn continent(&self, city: usize) -> ContinentId {
        match &self.continents {
            Some(c) => ContinentId(c[city]),
            None => ContinentId((city / 2) as u32),
        }
    }
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unit_vector(seed_value: u64, dim: usize) -> Vec<f64> {
    let mut rng = seed::rng_from(seed_value);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Code of a grid square: a random unit vector keyed by (city, grid, cell).
fn grid_code(spec: &WorldSpec, city: usize, grid: u64, x: f64, y: f64, size: f64) -> Vec<f64> {
    let cx = (x / size).floor() as i64;
    let cy = (y / size).floor() as i64;
    let key = seed::derive(spec.seed, Stream::World, &[grid, city as u64, zigzag(cx), zigzag(cy)]);
    unit_vector(key, spec.feature_dim)
}

/// Noise-free place signal at local coordinates (meters east, north).
pub fn place_signal(spec: &WorldSpec, city: usize, east: f64, north: f64) -> Vec<f64> {
    let s = spec.place_signal_strength;
    let place = grid_code(spec, city, 1, east, north, spec.place_grid_cell);
    let area = grid_code(spec, city, 2, east, north, spec.area_cell);
    place.iter().zip(&area).map(|(p, a)| s * p + (1.0 - s) * a).collect()
}

fn nuisance_basis(spec: &WorldSpec) -> Vec<Vec<f64>> {
    (0..spec.condition_rank)
        .map(|j| unit_vector(seed::derive(spec.seed, Stream::World, &[3, j as u64]), spec.feature_dim))
        .collect()
}

fn uniform_in_disk<R: Rng>(rng: &mut R, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = std::f64::consts::TAU * rng.random::<f64>();
    (r * a.cos(), r * a.sin())
}

fn clamp_to_disk((x, y): (f64, f64), radius: f64) -> (f64, f64) {
    let n = (x * x + y * y).sqrt();
    if n <= radius {
        (x, y)
    } else {
        (x * radius / n, y * radius / n)
    }
}

/// Route points of one walk, all within `limit` of the center.
fn walk<R: Rng>(spec: &WorldSpec, rng: &mut R, hotspots: &[((f64, f64), f64)], limit: f64) -> Vec<(f64, f64)> {
    let start = if hotspots.is_empty() {
        uniform_in_disk(rng, limit)
    } else {
        let total: f64 = hotspots.iter().map(|h| h.1).sum();
        let mut target = rng.random::<f64>() * total;
        let mut center = hotspots[hotspots.len() - 1].0;
        for &(c, w) in hotspots {
            if target < w {
                center = c;
                break;
            }
            target -= w;
        }
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        clamp_to_disk(
            (center.0 + spec.hotspot_spread * dx, center.1 + spec.hotspot_spread * dy),
            limit,
        )
    };
    let mut heading = std::f64::consts::TAU * rng.random::<f64>();
    let mut points = vec![start];
    while points.len() < spec.images_per_sequence {
        let (x, y) = *points.last().unwrap();
        let turn: f64 = StandardNormal.sample(rng);
        heading += 0.25 * turn;
        let mut next = (x + spec.step_length * heading.cos(), y + spec.step_length * heading.sin());
        if (next.0 * next.0 + next.1 * next.1).sqrt() > limit {
            heading += std::f64::consts::PI;
            next = clamp_to_disk(
                (x + spec.step_length * heading.cos(), y + spec.step_length * heading.sin()),
                limit,
            );
        }
        points.push(next);
    }
    points
}

/// Builds the world described by `spec`. Sequences alternate query and
/// database roles: sequence `2r` and `2r + 1` drive route `r`.
pub fn generate_world(spec: &WorldSpec) -> Result<Manifest> {
    spec.validate()?;
    let basis = nuisance_basis(spec);
    let mut samples = Vec::with_capacity(spec.n_cities * spec.sequences_per_city * spec.images_per_sequence);
    let mut seq_counter = 0u64;
    // Keep GPS noise inside the disk.
    let limit = (spec.city_radius - spec.gps_noise).max(0.0);
    for city in 0..spec.n_cities {
        let center = spec.center(city);
        let continent = spec.continent(city);
        let mut rng = seed::rng(spec.seed, Stream::World, &[4, city as u64]);
        let hotspots: Vec<((f64, f64), f64)> = (0..spec.hotspots)
            .map(|r| (uniform_in_disk(&mut rng, 0.7 * limit), ((r + 1) as f64).powf(-spec.hotspot_skew)))
            .collect();
        let mut route = Vec::new();
        for s in 0..spec.sequences_per_city {
            if s % 2 == 0 {
                route = walk(spec, &mut rng, &hotspots, limit);
            }
            let role = if s % 2 == 0 { Role::Query } else { Role::Database };
            let condition: Vec<f64> = {
                let z: Vec<f64> = (0..basis.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                (0..spec.feature_dim)
                    .map(|k| spec.condition_scale * basis.iter().zip(&z).map(|(b, zj)| b[k] * zj).sum::<f64>())
                    .collect()
            };
            let seq_id = SeqId(seq_counter);
            seq_counter += 1;
            for &(x, y) in &route {
                let (jx, jy) = uniform_in_disk(&mut rng, spec.gps_noise);
                let (ex, ny) = (x + jx, y + jy);
                let signal = place_signal(spec, city, ex, ny);
                let feat = signal
                    .iter()
                    .zip(&condition)
                    .map(|(p, c)| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        p + c + spec.noise_scale * n
                    })
                    .collect();
                samples.push(GeoSample {
                    id: SampleId(samples.len() as u64),
                    tag: center.offset_m(ny, ex)?,
                    feat,
                    seq_id,
                    city_id: CityId(city as u32),
                    continent_id: continent,
                    role,
                });
            }
        }
    }
    let manifest = Manifest::new(spec.feature_dim, samples)?;
    let usable = usable_query_fraction(&manifest, USABILITY_RADIUS);
    if usable < MIN_USABLE_FRACTION {
        return Err(Error::invalid(format!(
            "only {:.1}% of generated queries have a database image within {USABILITY_RADIUS} m",
            100.0 * usable
        )));
    }
    Ok(manifest)
}

/// Fraction of queries with a same-city database image closer than `radius`.
pub fn usable_query_fraction(manifest: &Manifest, radius: f64) -> f64 {
    let samples = manifest.samples();
    let mut queries = 0usize;
    let mut usable = 0usize;
    for city in manifest.cities() {
        let db: Vec<&GeoSample> = samples
            .iter()
            .filter(|s| s.city_id == city && s.role == Role::Database)
            .collect();
        for q in samples.iter().filter(|s| s.city_id == city && s.role == Role::Query) {
            queries += 1;
            if db.iter().any(|d| geo_distance(q.tag, d.tag) < radius) {
                usable += 1;
            }
        }
    }
    if queries == 0 {
        1.0
    } else {
        usable as f64 / queries as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldStats {
    pub cities: usize,
    pub sequences: usize,
    pub images: usize,
    pub query_images: usize,
    pub database_images: usize,
    pub usable_query_fraction: f64,
}

pub fn world_stats(manifest: &Manifest) -> WorldStats {
    let q = manifest.samples().iter().filter(|s| s.role == Role::Query).count();
    WorldStats {
        cities: manifest.cities().len(),
        sequences: manifest.sequences().len(),
        images: manifest.len(),
        query_images: q,
        database_images: manifest.len() - q,
        usable_query_fraction: usable_query_fraction(manifest, USABILITY_RADIUS),
    }
}
