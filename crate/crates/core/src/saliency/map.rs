use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attention::{ApplyMode, AttentionPrior, NormMode};
use crate::binio;
use crate::error::{bail, Error, Result};

const MSAL_MAGIC: &[u8; 4] = b"MSAL";

/// Pixel saliency values of one image, possibly letterboxed.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    content_aspect: f64,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, content_aspect: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Validation, "saliency map of size {}x{}", height, width);
        }
        if values.len() != height * width {
            bail!(
                Dimension,
                "saliency map {}x{} with {} values",
                height,
                width,
                values.len()
            );
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            bail!(Validation, "saliency value {} is negative or not finite", bad);
        }
        if !(content_aspect.is_finite() && content_aspect > 0.0) {
            bail!(Validation, "content aspect {} must be positive", content_aspect);
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
            content_aspect,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn content_aspect(&self) -> f64 {
        self.content_aspect
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Width over height of the pixel array.
    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// Cell layout of an image's grid features, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub const MAX_ROWS: usize = 19;
    pub const MAX_COLS: usize = 32;
    pub const PAPER_MIN_CELLS: usize = 192;
    pub const PAPER_MAX_CELLS: usize = 608;

    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            bail!(Validation, "grid of {}x{} cells", rows, cols);
        }
        Ok(GridGeometry { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Checks the size range of real grid features.
    pub fn validate_paper_scale(&self) -> Result<()> {
        let m = self.cells();
        if self.rows > Self::MAX_ROWS
            || self.cols > Self::MAX_COLS
            || !(Self::PAPER_MIN_CELLS..=Self::PAPER_MAX_CELLS).contains(&m)
        {
            bail!(
                Validation,
                "grid {}x{} ({} cells) outside the {}..={} cell range of at most {}x{}",
                self.rows,
                self.cols,
                m,
                Self::PAPER_MIN_CELLS,
                Self::PAPER_MAX_CELLS,
                Self::MAX_ROWS,
                Self::MAX_COLS
            );
        }
        Ok(())
    }
}

/// Removes the uniform borders that appear when content of aspect
/// `content_aspect` is fitted, centred, into the map's pixel array.
pub fn crop_letterbox(map: &SaliencyMap) -> Result<SaliencyMap> {
    let (h, w) = (map.height, map.width);
    let rc = map.content_aspect;
    let (top, left, ch, cw) = if rc > map.aspect() {
        let ch = (w as f64 / rc).round() as usize;
        (h.saturating_sub(ch) / 2, 0, ch, w)
    } else {
        let cw = (h as f64 * rc).round() as usize;
        (0, w.saturating_sub(cw) / 2, h, cw)
    };
    if ch == 0 || cw == 0 {
        bail!(
            Validation,
            "content of aspect {} leaves less than one pixel of a {}x{} map",
            rc,
            w,
            h
        );
    }
    let (ch, cw) = (ch.min(h), cw.min(w));
    if (ch, cw) == (h, w) {
        return Ok(map.clone());
    }
    let mut values = Vec::with_capacity(ch * cw);
    for y in top..top + ch {
        values.extend_from_slice(&map.values[y * w + left..y * w + left + cw]);
    }
    SaliencyMap::new(ch, cw, values, rc)
}

/// Sum of pixel values falling in each grid cell, row-major.
///
/// Pixel `(y, x)` belongs to cell `(⌊y·rows/H⌋, ⌊x·cols/W⌋)`.
pub fn cell_sums(map: &SaliencyMap, grid: GridGeometry) -> Result<Vec<f64>> {
    if grid.rows > map.height || grid.cols > map.width {
        bail!(
            Dimension,
            "grid {}x{} is finer than the {}x{} map",
            grid.rows,
            grid.cols,
            map.height,
            map.width
        );
    }
    let mut sums = vec![0.0; grid.cells()];
    let col_of: Vec<usize> = (0..map.width).map(|x| x * grid.cols / map.width).collect();
    for y in 0..map.height {
        let r = y * grid.rows / map.height;
        let row = &map.values[y * map.width..(y + 1) * map.width];
        let cells = &mut sums[r * grid.cols..(r + 1) * grid.cols];
        for (v, &c) in row.iter().zip(&col_of) {
            cells[c] += v;
        }
    }
    Ok(sums)
}

/// Per-cell saliency mass, normalised into a prior over the grid features.
/// An all-zero map gives the uniform prior.
pub fn aggregate_to_grid(map: &SaliencyMap, grid: GridGeometry, norm: NormMode) -> Result<AttentionPrior> {
    let sums = cell_sums(map, grid)?;
    if sums.iter().all(|&s| s == 0.0) {
        log::warn!(
            "all-zero {}x{} saliency map; using a uniform prior",
            map.height,
            map.width
        );
    }
    AttentionPrior::from_raw(&sums, None, norm, ApplyMode::PerKey)
}

pub fn write_msal(w: &mut impl Write, map: &SaliencyMap) -> Result<()> {
    w.write_all(MSAL_MAGIC)?;
    binio::write_u32(w, binio::to_u32(map.height, "MSAL height")?)?;
    binio::write_u32(w, binio::to_u32(map.width, "MSAL width")?)?;
    binio::write_f32(w, map.content_aspect as f32)?;
    let vals: Vec<f32> = map.values.iter().map(|&v| v as f32).collect();
    binio::write_f32s(w, &vals)
}

pub fn read_msal(r: &mut impl Read) -> Result<SaliencyMap> {
    binio::read_magic(r, MSAL_MAGIC, "saliency map")?;
    let h = binio::read_u32(r, "saliency map")? as usize;
    let w = binio::read_u32(r, "saliency map")? as usize;
    let aspect = binio::read_f32(r, "saliency map")? as f64;
    let vals = binio::read_f32s(r, h * w, "saliency map")?;
    SaliencyMap::new(h, w, vals.into_iter().map(f64::from).collect(), aspect)
        .map_err(|e| Error::Format(format!("saliency map: {e}")))
}

pub fn save_msal(path: &Path, map: &SaliencyMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_msal(&mut w, map)?;
    Ok(w.flush()?)
}

pub fn load_msal(path: &Path) -> Result<SaliencyMap> {
    read_msal(&mut BufReader::new(File::open(path)?))
}

#[derive(Deserialize)]
struct PgmMeta {
    content_aspect: f64,
}

/// Sidecar holding the content aspect for a PGM map: `<path>.meta.json`.
pub fn pgm_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Reads a P2 or P5 PGM map; values are scaled by `1/maxval`.
pub fn load_pgm(path: &Path) -> Result<SaliencyMap> {
    let bytes = std::fs::read(path)?;
    let meta: PgmMeta = serde_json::from_slice(&std::fs::read(pgm_sidecar(path))?)?;
    parse_pgm(&bytes, meta.content_aspect)
}

pub fn parse_pgm(bytes: &[u8], content_aspect: f64) -> Result<SaliencyMap> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!(Format, "PGM header is truncated");
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 65535 {
        bail!(Format, "PGM maxval {} out of range", maxval);
    }
    let n = w * h;
    let raw: Vec<f64> = match header[0].as_str() {
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: Vec<f64> = text
                .split_ascii_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad PGM sample {t:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != n {
                bail!(Format, "PGM has {} samples, expected {}", vals.len(), n);
            }
            vals
        }
        "P5" => {
            let data = &bytes[(pos + 1).min(bytes.len())..];
            let width = if maxval < 256 { 1 } else { 2 };
            if data.len() < n * width {
                bail!(Format, "PGM raster is truncated");
            }
            if width == 1 {
                data[..n].iter().map(|&b| b as f64).collect()
            } else {
                data[..2 * n]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                    .collect()
            }
        }
        other => bail!(Format, "unsupported PGM kind {:?}", other),
    };
    let scale = maxval as f64;
    SaliencyMap::new(h, w, raw.into_iter().map(|v| v / scale).collect(), content_aspect)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, aspect: f64) -> SaliencyMap {
        SaliencyMap::new(h, w, (0..h * w).map(|i| i as f64).collect(), aspect).unwrap()
    }

    #[test]
    fn equal_aspect_is_identity() {
        let m = map(4, 6, 1.5);
        assert_eq!(crop_letterbox(&m).unwrap(), m);
    }

    #[test]
    fn square_content_in_wide_map() {
        let m = map(100, 200, 1.0);
        let c = crop_letterbox(&m).unwrap();
        assert_eq!((c.height(), c.width()), (100, 100));
        assert_eq!(c.get(0, 0), m.get(0, 50));
        assert_eq!(c.get(99, 99), m.get(99, 149));
    }

    #[test]
    fn wide_content_in_square_map() {
        let m = map(100, 100, 2.0);
        let c = crop_letterbox(&m).unwrap();
        assert_eq!((c.height(), c.width()), (50, 100));
        assert_eq!(c.get(0, 0), m.get(25, 0));
    }

    #[test]
    fn sub_pixel_content_is_an_error() {
        let m = map(2, 2, 100.0);
        assert!(crop_letterbox(&m).is_err());
    }

    #[test]
    fn single_pixel_is_one_hot() {
        let mut v = vec![0.0; 8 * 12];
        v[5 * 12 + 7] = 3.0;
        let m = SaliencyMap::new(8, 12, v, 1.5).unwrap();
        let p = aggregate_to_grid(&m, GridGeometry::new(4, 6).unwrap(), NormMode::SumToOne).unwrap();
        let hot = 2 * 6 + 3;
        for (i, &w) in p.weights().iter().enumerate() {
            assert_eq!(w, if i == hot { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn grid_finer_than_map_is_rejected() {
        let m = map(2, 2, 1.0);
        assert!(cell_sums(&m, GridGeometry::new(3, 1).unwrap()).is_err());
    }

    #[test]
    fn pgm_p2_and_p5() {
        let p2 = b"P2\n# c\n3 2\n4\n0 1 2\n3 4 0\n";
        let m = parse_pgm(p2, 1.5).unwrap();
        assert_eq!((m.height(), m.width()), (2, 3));
        assert_eq!(m.get(1, 1), 1.0);
        let mut p5 = b"P5 2 1 255\n".to_vec();
        p5.extend_from_slice(&[255, 51]);
        let m = parse_pgm(&p5, 2.0).unwrap();
        assert_eq!(m.values(), &[1.0, 0.2]);
        assert!(parse_pgm(b"P5 2 2 255\n\x01", 1.0).is_err());
    }

    #[test]
    fn paper_scale_grid_bounds() {
        assert!(GridGeometry::new(19, 32).unwrap().validate_paper_scale().is_ok());
        assert!(GridGeometry::new(12, 16).unwrap().validate_paper_scale().is_ok());
        assert!(GridGeometry::new(4, 6).unwrap().validate_paper_scale().is_err());
        assert!(GridGeometry::new(20, 30).unwrap().validate_paper_scale().is_err());
    }
}
