//! Binary PGM (P5, 8-bit) reading and writing, plus directory ingestion
//! against a `filename,weather,light` labels CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pool::Pool;
use super::sample::{Image, Sample};
use crate::error::{Error, Result};
use crate::labels::{LabelSet, Light, Weather};

/// A decoded 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(format!("expected P5 magic, found {magic:?}"));
    }
    let number = |what: &str, pos: &mut usize| -> std::result::Result<usize, String> {
        let t = token(pos)?;
        t.parse::<usize>().map_err(|_| format!("bad {what} {t:?}"))
    };
    let width = number("width", &mut pos)?;
    let height = number("height", &mut pos)?;
    let maxval = number("maxval", &mut pos)?;
    if width == 0 || height == 0 {
        return Err(format!("empty raster {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} is not 8-bit"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!("raster truncated: {} of {need} bytes", raster.len()));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: raster[..need].to_vec(),
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Quantizes a `[0,1]` image to 8 bits, rounding half up.
pub fn quantize(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().map(|&v| (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8).collect()
}

/// Area-average resampling to `side`×`side`, normalized by `maxval`.
pub fn downscale(pgm: &Pgm, side: usize) -> Vec<f32> {
    let (w, h) = (pgm.width as f64, pgm.height as f64);
    let (sx, sy) = (w / side as f64, h / side as f64);
    let norm = pgm.maxval as f64;
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..side {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let (mut acc, mut area) = (0.0, 0.0);
            for iy in y0.floor() as usize..(y1.ceil() as usize).min(pgm.height) {
                let wy = (y1.min(iy as f64 + 1.0) - y0.max(iy as f64)).max(0.0);
                for ix in x0.floor() as usize..(x1.ceil() as usize).min(pgm.width) {
                    let wx = (x1.min(ix as f64 + 1.0) - x0.max(ix as f64)).max(0.0);
                    acc += wx * wy * pgm.pixels[iy * pgm.width + ix] as f64;
                    area += wx * wy;
                }
            }
            out.push(((acc / area) / norm).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestIssue {
    pub file: String,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub pool: Pool,
    pub issues: Vec<IngestIssue>,
}

/// Reads every `*.pgm` in `image_dir` (sorted by name; ids follow that order).
/// Files listed in `labels_csv` get truth; the rest become truth-less samples.
/// Bad files and bad rows are reported and skipped.
pub fn ingest_pgm(image_dir: &Path, labels_csv: &Path, side: usize) -> Result<IngestReport> {
    let mut issues = Vec::new();
    let labels = read_labels(labels_csv, &mut issues)?;

    let mut files: Vec<String> = fs::read_dir(image_dir)
        .map_err(|e| Error::io(image_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();

    let mut pool = Pool::new(side);
    let mut seen = BTreeSet::new();
    for (i, name) in files.iter().enumerate() {
        let path = image_dir.join(name);
        let decoded = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| parse_pgm(&bytes));
        match decoded {
            Ok(pgm) => {
                let image = Image::new(side, downscale(&pgm, side)).expect("downscaled values are in [0,1]");
                let truth = labels.get(name).copied();
                pool.insert(Sample::new(i as u64, image, truth).with_source(name.clone()))?;
                seen.insert(name.clone());
            }
            Err(message) => issues.push(IngestIssue {
                file: name.clone(),
                message,
            }),
        }
    }
    for name in labels.keys().filter(|n| !seen.contains(*n) && !files.contains(n)) {
        issues.push(IngestIssue {
            file: name.clone(),
            message: "listed in labels CSV but no such image".into(),
        });
    }
    Ok(IngestReport { pool, issues })
}

fn read_labels(path: &Path, issues: &mut Vec<IngestIssue>) -> Result<BTreeMap<String, LabelSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut labels = BTreeMap::new();
    let mut duplicates = BTreeSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let fields: Vec<&str> = record.iter().collect();
        if row == 0 && fields == ["filename", "weather", "light"] {
            continue;
        }
        let &[file, weather, light] = fields.as_slice() else {
            issues.push(IngestIssue {
                file: fields.first().unwrap_or(&"").to_string(),
                message: format!("row {} has {} fields, expected 3", row + 1, fields.len()),
            });
            continue;
        };
        let parsed = weather
            .parse::<Weather>()
            .and_then(|w| light.parse::<Light>().map(|l| LabelSet::new(w, l)));
        let label = match parsed {
            Ok(l) => l,
            Err(e) => {
                issues.push(IngestIssue {
                    file: file.to_string(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if duplicates.contains(file) || labels.insert(file.to_string(), label).is_some() {
            labels.remove(file);
            if duplicates.insert(file.to_string()) {
                issues.push(IngestIssue {
                    file: file.to_string(),
                    message: "duplicate filename in labels CSV".into(),
                });
            }
        }
    }
    Ok(labels)
}

/// Writes a pool's images as PGM files plus a labels CSV (truth only).
pub fn export_pgm(pool: &Pool, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = pool.side();
    let mut csv_text = String::from("filename,weather,light\n");
    let oracle = pool.oracle();
    for id in pool.ids() {
        let sample = pool.get(id).expect("id from pool");
        let name = format!("{id:06}.pgm");
        let bytes = encode_pgm(side, side, &quantize(sample.image().pixels()));
        fs::write(dir.join(&name), bytes).map_err(|e| Error::io(dir.join(&name), e))?;
        if let Some(t) = oracle.truth(id) {
            csv_text.push_str(&format!("{name},{},{}\n", t.weather, t.light));
        }
    }
    let labels = dir.join("labels.csv");
    fs::write(&labels, csv_text).map_err(|e| Error::io(&labels, e))
}
