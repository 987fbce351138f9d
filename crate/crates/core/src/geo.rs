//! Geographic primitives: coordinates, great-circle distance and the
//! GPS-derived positive/negative candidate sets used for mining.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default positive radius in meters.
pub const DEFAULT_POSITIVE_RADIUS_M: f64 = 25.0;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident($inner:ty)) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(
    /// Unique sample identifier within a manifest.
    SampleId(u64)
);
id_newtype!(SeqId(u64));
id_newtype!(CityId(u32));
id_newtype!(ContinentId(u32));
id_newtype!(ClientId(u32));

/// A latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeoTag", into = "RawGeoTag")]
pub struct GeoTag {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGeoTag {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawGeoTag> for GeoTag {
    type Error = Error;

    fn try_from(raw: RawGeoTag) -> Result<Self> {
        GeoTag::new(raw.lat, raw.lon)
    }
}

impl From<GeoTag> for RawGeoTag {
    fn from(tag: GeoTag) -> Self {
        RawGeoTag {
            lat: tag.lat,
            lon: tag.lon,
        }
    }
}

impl GeoTag {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite coordinates ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!(
                "coordinates out of range ({lat}, {lon})"
            )));
        }
        Ok(GeoTag { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// The point `north_m` meters north and `east_m` meters east of `self`,
    /// using a local equirectangular approximation. Longitude wraps.
    pub fn offset_m(&self, north_m: f64, east_m: f64) -> Result<GeoTag> {
        let m_per_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let lat = self.lat + north_m / m_per_deg;
        let coslat = self.lat.to_radians().cos().max(1e-9);
        let mut lon = self.lon + east_m / (m_per_deg * coslat);
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoTag::new(lat, lon)
    }
}

/// Haversine great-circle distance in meters.
///
/// Symmetric bit-for-bit: both coordinate differences enter through their
/// absolute value and the cosine product is commutative.
pub fn geo_distance(a: GeoTag, b: GeoTag) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let half_dphi = (phi2 - phi1).abs() * 0.5;
    let half_dlambda = (b.lon - a.lon).abs().to_radians() * 0.5;
    let s1 = half_dphi.sin();
    let s2 = half_dlambda.sin();
    let h = s1 * s1 + (phi1.cos() * phi2.cos()) * (s2 * s2);
    2.0 * EARTH_RADIUS_M * h.min(1.0).sqrt().asin()
}

/// Distance between two coordinate pairs that may not have been validated.
pub fn checked_distance(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    Ok(geo_distance(GeoTag::new(a.0, a.1)?, GeoTag::new(b.0, b.1)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Database,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Database => "database",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(Role::Query),
            "database" | "db" => Ok(Role::Database),
            other => Err(Error::invalid(format!("unknown role {other:?}"))),
        }
    }
}

/// One geo-tagged feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoSample {
    pub id: SampleId,
    pub tag: GeoTag,
    pub feat: Vec<f64>,
    pub seq_id: SeqId,
    pub city_id: CityId,
    pub continent_id: ContinentId,
    pub role: Role,
}

/// GPS-derived candidate sets for a query. Ids are sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateSets {
    pub positives: Vec<SampleId>,
    pub negatives: Vec<SampleId>,
}

/// Positive and negative candidates as indices into `db`, ascending.
///
/// Positives are strictly closer than `tau`; negatives are at least `tau_neg`
/// away. Anything in between belongs to neither set.
pub fn candidate_indices(
    query: GeoTag,
    db: &[GeoSample],
    tau: f64,
    tau_neg: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, s) in db.iter().enumerate() {
        let d = geo_distance(query, s.tag);
        if d < tau {
            positives.push(i);
        } else if d >= tau_neg {
            negatives.push(i);
        }
    }
    (positives, negatives)
}

pub fn candidate_sets(
    query: &GeoSample,
    db: &[GeoSample],
    tau: f64,
    tau_neg: f64,
) -> Result<CandidateSets> {
    validate_thresholds(tau, tau_neg)?;
    if db.is_empty() {
        return Err(Error::invalid("candidate_sets: empty database"));
    }
    let (p, n) = candidate_indices(query.tag, db, tau, tau_neg);
    let mut positives: Vec<SampleId> = p.into_iter().map(|i| db[i].id).collect();
    let mut negatives: Vec<SampleId> = n.into_iter().map(|i| db[i].id).collect();
    positives.sort_unstable();
    negatives.sort_unstable();
    Ok(CandidateSets {
        positives,
        negatives,
    })
}

pub(crate) fn validate_thresholds(tau: f64, tau_neg: f64) -> Result<()> {
    if !(tau.is_finite() && tau_neg.is_finite()) || tau <= 0.0 || tau > tau_neg {
        return Err(Error::invalid(format!(
            "thresholds must satisfy 0 < tau <= tau_neg, got tau={tau} tau_neg={tau_neg}"
        )));
    }
    Ok(())
}

/// Arithmetic mean of coordinates. Adequate at city scale away from the
/// antimeridian.
pub fn centroid(tags: impl IntoIterator<Item = GeoTag>) -> Option<GeoTag> {
    let mut n = 0usize;
    let (mut lat, mut lon) = (0.0, 0.0);
    for t in tags {
        lat += t.lat;
        lon += t.lon;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    GeoTag::new(lat / n as f64, lon / n as f64).ok()
}
