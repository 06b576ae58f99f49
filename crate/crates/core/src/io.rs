//! File formats: point clouds (text and `TPC1`), diagram CSV and `TPI1`
//! persistence images. Floats in text formats use Rust's shortest
//! round-trip representation, so write-then-read is exact.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud};
use crate::homology::PersistenceDiagram;
use crate::pimage::{GridSpec, PersistenceImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("line {line}: {msg}")]
    Text { line: usize, msg: String },
    #[error("bad magic, expected {0}")]
    Magic(&'static str),
    #[error("truncated or oversized payload")]
    Length,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn text_err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Text { line, msg: msg.into() }
}

/// One `x y z` line per point; `#` starts a comment.
pub fn parse_points_text(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| text_err(i + 1, format!("not a number: `{t}`"))))
            .collect::<Result<_>>()?;
        let [x, y, z] = vals[..] else {
            return Err(text_err(i + 1, format!("expected 3 values, got {}", vals.len())));
        };
        points.push([x, y, z]);
    }
    Ok(PointCloud::new(points)?)
}

pub fn points_to_text(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

const TPC_MAGIC: &[u8; 4] = b"TPC1";

pub fn points_to_binary(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 24);
    out.extend_from_slice(TPC_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for v in cloud.flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn parse_points_binary(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..4] != TPC_MAGIC {
        return Err(FormatError::Magic("TPC1"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n * 24 {
        return Err(FormatError::Length);
    }
    Ok(PointCloud::from_flat(&f64s(&bytes[8..]))?)
}

/// Either point format, chosen by the magic bytes.
pub fn parse_points(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.starts_with(TPC_MAGIC) {
        parse_points_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| text_err(0, "not UTF-8 text"))?;
        parse_points_text(text)
    }
}

/// Header line, column line, then one `dim,birth,death` row per pair with
/// `inf` for essential classes.
pub fn diagrams_to_csv(diagrams: &[PersistenceDiagram], n_points: usize, r_max: f64) -> String {
    let mut s = format!("# topogen-pd v1 n_points={n_points} r_max={r_max}\ndim,birth,death\n");
    for d in diagrams {
        for &(b, de) in &d.pairs {
            let _ = writeln!(s, "{},{b},{de}", d.dimension);
        }
        for &b in &d.essential {
            let _ = writeln!(s, "{},{b},inf", d.dimension);
        }
    }
    s
}

/// Parsed diagram file.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagramFile {
    pub n_points: usize,
    pub r_max: f64,
    /// Dimensions `0..=max seen`, empty where no rows exist.
    pub diagrams: Vec<PersistenceDiagram>,
}

pub fn parse_diagrams_csv(text: &str) -> Result<DiagramFile> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| text_err(1, "empty file"))?;
    let rest = header.strip_prefix("# topogen-pd v1 ").ok_or_else(|| text_err(1, "missing `# topogen-pd v1` header"))?;
    let (mut n_points, mut r_max) = (None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("n_points", v)) => n_points = v.parse().ok(),
            Some(("r_max", v)) => r_max = v.parse().ok(),
            _ => return Err(text_err(1, format!("unknown header field `{field}`"))),
        }
    }
    let (n_points, r_max) = n_points.zip(r_max).ok_or_else(|| text_err(1, "header needs n_points and r_max"))?;
    let mut diagrams: Vec<PersistenceDiagram> = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line == "dim,birth,death" {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let [dim, birth, death] = cols[..] else {
            return Err(text_err(i + 1, "expected dim,birth,death"));
        };
        let dim: usize = dim.parse().map_err(|_| text_err(i + 1, "bad dim"))?;
        let birth: f64 = birth.parse().map_err(|_| text_err(i + 1, "bad birth"))?;
        while diagrams.len() <= dim {
            diagrams.push(PersistenceDiagram::empty(diagrams.len()));
        }
        if death == "inf" {
            diagrams[dim].essential.push(birth);
        } else {
            let d: f64 = death.parse().map_err(|_| text_err(i + 1, "bad death"))?;
            if !(d > birth) {
                return Err(text_err(i + 1, "death must exceed birth"));
            }
            diagrams[dim].pairs.push((birth, d));
        }
    }
    Ok(DiagramFile { n_points, r_max, diagrams })
}

const TPI_MAGIC: &[u8; 4] = b"TPI1";

pub fn image_to_bytes(img: &PersistenceImage, spec: &GridSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 1 + 48 + img.pixels.len() * 8);
    out.extend_from_slice(TPI_MAGIC);
    out.extend_from_slice(&(img.n as u16).to_le_bytes());
    out.push(img.dim_tag);
    for v in [spec.sigma, spec.b_max, spec.birth_range.0, spec.birth_range.1, spec.pers_range.0, spec.pers_range.1] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &img.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// The image and the grid it was rasterized on.
pub fn parse_image(bytes: &[u8]) -> Result<(PersistenceImage, GridSpec)> {
    const HEAD: usize = 4 + 2 + 1 + 48;
    if !bytes.starts_with(TPI_MAGIC) {
        return Err(FormatError::Magic("TPI1"));
    }
    if bytes.len() < HEAD {
        return Err(FormatError::Length);
    }
    let n = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let dim_tag = bytes[6];
    if bytes.len() != HEAD + n * n * 8 {
        return Err(FormatError::Length);
    }
    let h = f64s(&bytes[7..HEAD]);
    let spec = GridSpec { n, birth_range: (h[2], h[3]), pers_range: (h[4], h[5]), sigma: h[0], b_max: h[1], defaulted: false };
    Ok((PersistenceImage { n, dim_tag, pixels: f64s(&bytes[HEAD..]) }, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn point_formats_round_trip() {
        let cloud = PointCloud::from_flat(&rng::normals(&mut rng::stream(0, "io"), 30)).unwrap();
        assert_eq!(parse_points_text(&points_to_text(&cloud)).unwrap(), cloud);
        let bin = points_to_binary(&cloud);
        assert_eq!(&bin[..4], b"TPC1");
        assert_eq!(parse_points(&bin).unwrap(), cloud);
        assert_eq!(parse_points(points_to_text(&cloud).as_bytes()).unwrap(), cloud);
        assert!(matches!(parse_points_binary(&bin[..bin.len() - 1]), Err(FormatError::Length)));
    }

    #[test]
    fn text_points_with_comments_and_errors() {
        let c = parse_points_text("# header\n1 2 3\n\n 4 5 6 # trailing\n").unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(parse_points_text("1 2\n").unwrap_err(), FormatError::Text { line: 1, msg: "expected 3 values, got 2".into() });
        assert!(matches!(parse_points_text("1 2 x"), Err(FormatError::Text { line: 1, .. })));
        assert!(matches!(parse_points_text("# nothing"), Err(FormatError::Geometry(GeometryError::EmptyCloud))));
    }

    #[test]
    fn diagram_csv_round_trip() {
        let pds = vec![
            PersistenceDiagram { dimension: 0, pairs: vec![(0.0, 0.5), (0.0, 1.0 / 3.0)], essential: vec![0.0] },
            PersistenceDiagram { dimension: 1, pairs: vec![(1.0, std::f64::consts::SQRT_2)], essential: vec![] },
            PersistenceDiagram::empty(2),
        ];
        let text = diagrams_to_csv(&pds, 4, 1.5);
        assert!(text.starts_with("# topogen-pd v1 n_points=4 r_max=1.5\ndim,birth,death\n"));
        assert!(text.contains("0,0,inf"));
        let back = parse_diagrams_csv(&text).unwrap();
        assert_eq!((back.n_points, back.r_max), (4, 1.5));
        assert_eq!(back.diagrams[..2], pds[..2]);
        assert!(parse_diagrams_csv("dim,birth,death\n").is_err());
        assert!(parse_diagrams_csv("# topogen-pd v1 n_points=1 r_max=1\n1,0.5,0.2\n").is_err());
    }

    #[test]
    fn image_round_trip_is_bit_exact() {
        let spec = GridSpec::new(3, (-0.15, 0.9), (-0.1, 0.7), 0.05, 0.55);
        let img = PersistenceImage { n: 3, dim_tag: 2, pixels: (0..9).map(|i| i as f64 / 7.0).collect() };
        let bytes = image_to_bytes(&img, &spec);
        assert_eq!(bytes.len(), 4 + 2 + 1 + 48 + 72);
        let (back, s) = parse_image(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!((s.sigma, s.b_max, s.birth_range, s.pers_range), (0.05, 0.55, (-0.15, 0.9), (-0.1, 0.7)));
        assert!(matches!(parse_image(&bytes[..20]), Err(FormatError::Length)));
        assert!(matches!(parse_image(b"nope"), Err(FormatError::Magic(_))));
    }
}
