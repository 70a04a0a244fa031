//! PCD point clouds with `x y z intensity` fields, ASCII or binary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::LidarPoint;

#[derive(Debug, Error)]
pub enum PcdError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad PCD header: {0}")]
    Header(String),
    #[error("unsupported PCD layout: {0}")]
    Unsupported(String),
    #[error("bad PCD data at point {index}: {reason}")]
    Data { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcdEncoding {
    Ascii,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    F32,
    F64,
    U8,
    U16,
    U32,
    I8,
    I16,
    I32,
}

impl Scalar {
    fn parse(kind: &str, size: &str) -> Result<Self, PcdError> {
        Ok(match (kind, size) {
            ("F", "4") => Self::F32,
            ("F", "8") => Self::F64,
            ("U", "1") => Self::U8,
            ("U", "2") => Self::U16,
            ("U", "4") => Self::U32,
            ("I", "1") => Self::I8,
            ("I", "2") => Self::I16,
            ("I", "4") => Self::I32,
            _ => return Err(PcdError::Unsupported(format!("field type {kind}{size}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::U16 | Self::I16 => 2,
            Self::F32 | Self::U32 | Self::I32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Self::U8 => b[0] as f64,
            Self::I8 => b[0] as i8 as f64,
            Self::U16 => u16::from_le_bytes(b[..2].try_into().unwrap()) as f64,
            Self::I16 => i16::from_le_bytes(b[..2].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        }
    }
}

struct Field {
    name: String,
    scalar: Scalar,
    count: usize,
}

struct Header {
    fields: Vec<Field>,
    points: usize,
    encoding: PcdEncoding,
}

impl Header {
    /// Position of each of x, y, z, intensity in the flattened value list.
    fn slots(&self) -> Result<[usize; 4], PcdError> {
        let mut slots = [usize::MAX; 4];
        let mut offset = 0;
        for f in &self.fields {
            if let Some(k) = ["x", "y", "z", "intensity"].iter().position(|n| *n == f.name) {
                slots[k] = offset;
            }
            offset += f.count;
        }
        match slots.iter().position(|&s| s == usize::MAX) {
            Some(k) => Err(PcdError::Header(format!(
                "missing field {}",
                ["x", "y", "z", "intensity"][k]
            ))),
            None => Ok(slots),
        }
    }

    fn scalars(&self) -> Vec<Scalar> {
        self.fields
            .iter()
            .flat_map(|f| std::iter::repeat_n(f.scalar, f.count))
            .collect()
    }
}

fn parse_header(reader: &mut impl BufRead) -> Result<Header, PcdError> {
    let mut names: Vec<String> = Vec::new();
    let mut sizes: Vec<String> = Vec::new();
    let mut kinds: Vec<String> = Vec::new();
    let mut counts: Option<Vec<usize>> = None;
    let (mut width, mut height, mut points) = (None, 1usize, None);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(PcdError::Header("no DATA line".into()));
        }
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let key = parts.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<String> = parts.map(str::to_string).collect();
        let num = |v: &[String]| -> Result<usize, PcdError> {
            v.first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PcdError::Header(format!("bad {key} value")))
        };
        match key.as_str() {
            "VERSION" | "VIEWPOINT" => {}
            "FIELDS" => names = rest,
            "SIZE" => sizes = rest,
            "TYPE" => kinds = rest,
            "COUNT" => {
                counts = Some(
                    rest.iter()
                        .map(|s| s.parse().map_err(|_| PcdError::Header("bad COUNT".into())))
                        .collect::<Result<_, _>>()?,
                )
            }
            "WIDTH" => width = Some(num(&rest)?),
            "HEIGHT" => height = num(&rest)?,
            "POINTS" => points = Some(num(&rest)?),
            "DATA" => {
                let encoding = match rest.first().map(String::as_str) {
                    Some("ascii") => PcdEncoding::Ascii,
                    Some("binary") => PcdEncoding::Binary,
                    Some(other) => return Err(PcdError::Unsupported(format!("DATA {other}"))),
                    None => return Err(PcdError::Header("DATA without encoding".into())),
                };
                let counts = counts.unwrap_or_else(|| vec![1; names.len()]);
                if names.is_empty() || sizes.len() != names.len() || kinds.len() != names.len() || counts.len() != names.len() {
                    return Err(PcdError::Header("FIELDS, SIZE, TYPE and COUNT disagree".into()));
                }
                let fields = names
                    .iter()
                    .zip(&sizes)
                    .zip(&kinds)
                    .zip(&counts)
                    .map(|(((n, s), k), &c)| {
                        Ok(Field {
                            name: n.clone(),
                            scalar: Scalar::parse(k, s)?,
                            count: c,
                        })
                    })
                    .collect::<Result<Vec<_>, PcdError>>()?;
                let points = points
                    .or(width.map(|w| w * height))
                    .ok_or_else(|| PcdError::Header("no POINTS or WIDTH".into()))?;
                return Ok(Header {
                    fields,
                    points,
                    encoding,
                });
            }
            other => return Err(PcdError::Header(format!("unknown key {other}"))),
        }
    }
}

fn make_point(vals: &[f64], slots: &[usize; 4], index: usize) -> Result<LidarPoint, PcdError> {
    let p = LidarPoint::new(
        Vector3::new(vals[slots[0]], vals[slots[1]], vals[slots[2]]),
        vals[slots[3]],
    );
    if !p.is_valid() {
        return Err(PcdError::Data {
            index,
            reason: "non-finite value".into(),
        });
    }
    Ok(p)
}

pub fn read_pcd_from(reader: impl Read) -> Result<Vec<LidarPoint>, PcdError> {
    let mut reader = BufReader::new(reader);
    let header = parse_header(&mut reader)?;
    let slots = header.slots()?;
    let scalars = header.scalars();
    let mut out = Vec::with_capacity(header.points);
    match header.encoding {
        PcdEncoding::Ascii => {
            let mut line = String::new();
            let mut vals = Vec::with_capacity(scalars.len());
            while out.len() < header.points {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    return Err(PcdError::Data {
                        index: out.len(),
                        reason: format!("file ends after {} of {} points", out.len(), header.points),
                    });
                }
                if line.trim().is_empty() {
                    continue;
                }
                vals.clear();
                for (tok, s) in line.split_whitespace().zip(scalars.iter().chain(std::iter::repeat(&Scalar::F64))) {
                    // 4-byte floats are parsed at their stored precision
                    let v = match s {
                        Scalar::F32 => tok.parse::<f32>().map(f64::from),
                        _ => tok.parse::<f64>(),
                    };
                    vals.push(v.map_err(|_| PcdError::Data {
                        index: out.len(),
                        reason: format!("cannot parse {tok:?}"),
                    })?);
                }
                if vals.len() != scalars.len() {
                    return Err(PcdError::Data {
                        index: out.len(),
                        reason: format!("{} values, expected {}", vals.len(), scalars.len()),
                    });
                }
                out.push(make_point(&vals, &slots, out.len())?);
            }
        }
        PcdEncoding::Binary => {
            let stride: usize = scalars.iter().map(|s| s.size()).sum();
            let mut record = vec![0u8; stride];
            let mut vals = vec![0.0; scalars.len()];
            for index in 0..header.points {
                reader.read_exact(&mut record).map_err(|e| PcdError::Data {
                    index,
                    reason: e.to_string(),
                })?;
                let mut at = 0;
                for (v, s) in vals.iter_mut().zip(&scalars) {
                    *v = s.read_le(&record[at..]);
                    at += s.size();
                }
                out.push(make_point(&vals, &slots, index)?);
            }
        }
    }
    Ok(out)
}

pub fn read_pcd(path: &Path) -> Result<Vec<LidarPoint>, PcdError> {
    read_pcd_from(File::open(path)?)
}

/// Writes `x y z intensity` as 32-bit floats.
pub fn write_pcd_to(mut w: impl Write, cloud: &[LidarPoint], encoding: PcdEncoding) -> Result<(), PcdError> {
    let data = match encoding {
        PcdEncoding::Ascii => "ascii",
        PcdEncoding::Binary => "binary",
    };
    write!(
        w,
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA {data}\n",
        n = cloud.len()
    )?;
    for p in cloud {
        let v = [p.position.x as f32, p.position.y as f32, p.position.z as f32, p.intensity as f32];
        match encoding {
            PcdEncoding::Ascii => writeln!(w, "{} {} {} {}", v[0], v[1], v[2], v[3])?,
            PcdEncoding::Binary => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pcd(path: &Path, cloud: &[LidarPoint], encoding: PcdEncoding) -> Result<(), PcdError> {
    write_pcd_to(BufWriter::new(File::create(path)?), cloud, encoding)
}
