//! The sample manifest: every geo-tagged feature vector of a world, grouped
//! into sequences, plus its CSV file format.
//!
//! The file has a header `id,lat,lon,seq_id,city_id,continent_id,role,f0,...`
//! followed by one sample per line. The number of `f*` columns declares the
//! feature dimension.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::{CityId, ContinentId, GeoSample, GeoTag, Role, SampleId, SeqId};

const FIXED_COLUMNS: [&str; 7] = ["id", "lat", "lon", "seq_id", "city_id", "continent_id", "role"];

/// A sequence: consecutive images sharing role and city.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: SeqId,
    pub city_id: CityId,
    pub continent_id: ContinentId,
    pub role: Role,
    /// Indices into the manifest's samples, in file order.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    feature_dim: usize,
    samples: Vec<GeoSample>,
    sequences: Vec<Sequence>,
    seq_index: BTreeMap<SeqId, usize>,
}

impl Manifest {
    pub fn new(feature_dim: usize, samples: Vec<GeoSample>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be >= 1"));
        }
        let mut ids = HashSet::with_capacity(samples.len());
        let mut seq_index: BTreeMap<SeqId, usize> = BTreeMap::new();
        let mut sequences: Vec<Sequence> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if s.feat.len() != feature_dim {
                return Err(Error::shape(
                    format!("{feature_dim} features"),
                    format!("{} for sample {}", s.feat.len(), s.id),
                ));
            }
            if !s.feat.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample {}", s.id)));
            }
            if !ids.insert(s.id) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
            match seq_index.get(&s.seq_id) {
                Some(&k) => {
                    let seq = &mut sequences[k];
                    if seq.role != s.role || seq.city_id != s.city_id {
                        return Err(Error::invalid(format!(
                            "sequence {} mixes roles or cities",
                            s.seq_id
                        )));
                    }
                    seq.members.push(i);
                }
                None => {
                    seq_index.insert(s.seq_id, sequences.len());
                    sequences.push(Sequence {
                        id: s.seq_id,
                        city_id: s.city_id,
                        continent_id: s.continent_id,
                        role: s.role,
                        members: vec![i],
                    });
                }
            }
        }
        // Canonical order by sequence id.
        sequences.sort_by_key(|s| s.id);
        let seq_index = sequences.iter().enumerate().map(|(k, s)| (s.id, k)).collect();
        Ok(Manifest {
            feature_dim,
            samples,
            sequences,
            seq_index,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[GeoSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sequences ascending by id.
    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn sequence(&self, id: SeqId) -> Option<&Sequence> {
        self.seq_index.get(&id).map(|&k| &self.sequences[k])
    }

    /// Samples of a sequence, in file order.
    pub fn sequence_samples(&self, id: SeqId) -> impl Iterator<Item = &GeoSample> {
        self.sequence(id)
            .into_iter()
            .flat_map(|s| s.members.iter().map(|&i| &self.samples[i]))
    }

    /// Distinct city ids, ascending.
    pub fn cities(&self) -> Vec<CityId> {
        let mut c: Vec<CityId> = self.sequences.iter().map(|s| s.city_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((0..self.feature_dim).map(|k| format!("f{k}")));
        out.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for s in &self.samples {
            row.clear();
            row.push(s.id.to_string());
            row.push(s.tag.lat().to_string());
            row.push(s.tag.lon().to_string());
            row.push(s.seq_id.to_string());
            row.push(s.city_id.to_string());
            row.push(s.continent_id.to_string());
            row.push(s.role.as_str().to_string());
            row.extend(s.feat.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Parses a manifest; `origin` only labels error messages.
    pub fn read_csv(r: impl Read, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = reader.headers()?.clone();
        if header.len() < FIXED_COLUMNS.len()
            || header.iter().take(FIXED_COLUMNS.len()).ne(FIXED_COLUMNS.iter().copied())
        {
            return Err(parse_err(1, format!("header must start with {}", FIXED_COLUMNS.join(","))));
        }
        let feature_dim = header.len() - FIXED_COLUMNS.len();
        for (k, name) in header.iter().skip(FIXED_COLUMNS.len()).enumerate() {
            if name != format!("f{k}") {
                return Err(parse_err(1, format!("expected column f{k}, found {name:?}")));
            }
        }
        let mut samples = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            if record.len() != header.len() {
                return Err(parse_err(
                    line,
                    format!("expected {} fields, found {}", header.len(), record.len()),
                ));
            }
            let num = |k: usize| -> Result<f64> {
                record[k]
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("{}: {e}", FIXED_COLUMNS.get(k).unwrap_or(&"feature"))))
            };
            let int = |k: usize| -> Result<u64> {
                record[k]
                    .parse::<u64>()
                    .map_err(|e| parse_err(line, format!("{}: {e}", FIXED_COLUMNS[k])))
            };
            let small = |k: usize| -> Result<u32> {
                record[k]
                    .parse::<u32>()
                    .map_err(|e| parse_err(line, format!("{}: {e}", FIXED_COLUMNS[k])))
            };
            let tag = GeoTag::new(num(1)?, num(2)?).map_err(|e| parse_err(line, e.to_string()))?;
            let role: Role = record[6].parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
            let feat = (FIXED_COLUMNS.len()..header.len())
                .map(num)
                .collect::<Result<Vec<f64>>>()?;
            samples.push(GeoSample {
                id: SampleId(int(0)?),
                tag,
                feat,
                seq_id: SeqId(int(3)?),
                city_id: CityId(small(4)?),
                continent_id: ContinentId(small(5)?),
                role,
            });
        }
        Manifest::new(feature_dim, samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Manifest::read_csv(std::io::BufReader::new(f), path)
    }
}
