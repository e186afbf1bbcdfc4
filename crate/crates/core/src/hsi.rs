//! Hyperspectral cubes, masks and score maps, and their on-disk container.
//!
//! A container is a pair of files: `<name>.hsi.json`, a one-line JSON header
//! `{"height","width","bands","dtype":"f32","order":"bsq","endian":"little"}`,
//! and `<name>.hsi.bin`, the band-sequential little-endian `f32` payload.
//! Masks and score maps use the same container with one band.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// `H x W x B` raster stored band-sequential: `data[(b * H + r) * W + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Argument(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::Argument(format!(
                "{height}x{width}x{bands} cube needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at payload index {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        assert!(height > 0 && width > 0 && bands > 0);
        Self {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    /// Builds a cube from a function of `(row, col, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * bands);
        for b in 0..bands {
            for r in 0..height {
                for c in 0..width {
                    data.push(f(r, c, b));
                }
            }
        }
        Self::new(height, width, bands, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Band-sequential values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[self.index(row, col, band)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, value: f32) {
        let i = self.index(row, col, band);
        self.data[i] = value;
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(row, col, b)).collect()
    }

    pub fn set_spectrum(&mut self, row: usize, col: usize, spectrum: &[f32]) {
        for (b, &v) in spectrum.iter().enumerate() {
            self.set(row, col, b, v);
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Argument(format!(
                "crop {height}x{width} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.bands);
        for b in 0..self.bands {
            for r in top..top + height {
                let start = self.index(r, left, b);
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Self {
            height,
            width,
            bands: self.bands,
            data,
        })
    }

    /// Contiguous band range `[start, start + count)`.
    pub fn band_range(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.bands {
            return Err(Error::Argument(format!(
                "bands {start}..{} outside 0..{}",
                start + count,
                self.bands
            )));
        }
        let n = self.height * self.width;
        Ok(Self {
            height: self.height,
            width: self.width,
            bands: count,
            data: self.data[start * n..(start + count) * n].to_vec(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_cube(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_cube(self, path.as_ref())
    }
}

/// `H x W` binary label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Argument(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cube = load_cube(path)?;
        ensure_single_band(&cube, path)?;
        let values = cube
            .data
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(Error::Data(format!(
                    "{}: mask value {v} is not 0 or 1",
                    path.display()
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(cube.height, cube.width, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let data = self.values.iter().map(|&v| v as f32).collect();
        save_cube(&HsiCube::new(self.height, self.width, 1, data)?, path.as_ref())
    }
}

/// `H x W` real-valued detection map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || scores.len() != height * width {
            return Err(Error::Argument(format!(
                "{height}x{width} score map needs {} values, got {}",
                height * width,
                scores.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("score map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }

    /// Min-max rescaled copy in `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = min_max(&self.scores);
        let range = hi - lo;
        self.scores
            .iter()
            .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cube = load_cube(path)?;
        ensure_single_band(&cube, path)?;
        let scores = cube.data.iter().map(|&v| v as f64).collect();
        Self::new(cube.height, cube.width, scores)
    }

    /// Stored as `f32`; values not representable in `f32` are rounded.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let data = self.scores.iter().map(|&v| v as f32).collect();
        save_cube(&HsiCube::new(self.height, self.width, 1, data)?, path.as_ref())
    }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn ensure_single_band(cube: &HsiCube, path: &Path) -> Result<()> {
    if cube.bands != 1 {
        return Err(Error::Format {
            path: path.display().to_string(),
            field: "bands".into(),
            msg: format!("expected 1 band, found {}", cube.bands),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    height: usize,
    width: usize,
    bands: usize,
    dtype: String,
    order: String,
    endian: String,
}

/// Header and payload paths for a container path. Accepts `x.hsi.json`,
/// `x.hsi.bin` or the bare stem `x`.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".hsi.json")
        .or_else(|| s.strip_suffix(".hsi.bin"))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}.hsi.json")),
        PathBuf::from(format!("{stem}.hsi.bin")),
    )
}

fn parse_header(text: &str, path: &Path) -> Result<Header> {
    let fmt = |field: &str, msg: String| Error::Format {
        path: path.display().to_string(),
        field: field.to_string(),
        msg,
    };
    let value: Value =
        serde_json::from_str(text).map_err(|e| fmt("<header>", format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| fmt("<header>", "expected a JSON object".into()))?;
    const KEYS: [&str; 6] = ["height", "width", "bands", "dtype", "order", "endian"];
    if let Some(extra) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(fmt(extra, "unexpected field".into()));
    }
    let dim = |field: &str| -> Result<usize> {
        match obj.get(field) {
            None => Err(fmt(field, "missing".into())),
            Some(v) => match v.as_u64() {
                Some(n) if n > 0 => Ok(n as usize),
                _ => Err(fmt(field, format!("expected a positive integer, found {v}"))),
            },
        }
    };
    let tag = |field: &str, expected: &str| -> Result<String> {
        match obj.get(field) {
            None => Err(fmt(field, "missing".into())),
            Some(Value::String(s)) if s == expected => Ok(s.clone()),
            Some(v) => Err(fmt(field, format!("expected \"{expected}\", found {v}"))),
        }
    };
    Ok(Header {
        height: dim("height")?,
        width: dim("width")?,
        bands: dim("bands")?,
        dtype: tag("dtype", "f32")?,
        order: tag("order", "bsq")?,
        endian: tag("endian", "little")?,
    })
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let (header_path, bin_path) = container_paths(path);
    let text = fs::read_to_string(&header_path)
        .map_err(|e| Error::io(format!("reading {}", header_path.display()), e))?;
    let header = parse_header(&text, &header_path)?;
    let payload =
        fs::read(&bin_path).map_err(|e| Error::io(format!("reading {}", bin_path.display()), e))?;
    let expected = (header.height * header.width * header.bands * 4) as u64;
    if payload.len() as u64 != expected {
        return Err(Error::Size {
            path: bin_path.display().to_string(),
            expected,
            found: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    HsiCube::new(header.height, header.width, header.bands, data).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", bin_path.display())),
        other => other,
    })
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let (header_path, bin_path) = container_paths(path);
    let header = Header {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        dtype: "f32".into(),
        order: "bsq".into(),
        endian: "little".into(),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    let mut payload = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&header_path, text)
        .map_err(|e| Error::io(format!("writing {}", header_path.display()), e))?;
    fs::write(&bin_path, payload)
        .map_err(|e| Error::io(format!("writing {}", bin_path.display()), e))?;
    Ok(())
}

/// Per-band min-max rescale to `[0, 1]`. Constant bands map to zero.
pub fn normalize_cube(cube: &HsiCube) -> HsiCube {
    let n = cube.height * cube.width;
    let mut data = Vec::with_capacity(cube.data.len());
    for b in 0..cube.bands {
        let band = &cube.data[b * n..(b + 1) * n];
        let (lo, hi) = band
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        let range = hi - lo;
        data.extend(band.iter().map(|&v| {
            if range > 0.0 {
                ((v as f64 - lo) / range) as f32
            } else {
                0.0
            }
        }));
    }
    HsiCube {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        data,
    }
}

/// Square sub-cube cut from a larger image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub data: HsiCube,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.data.height
    }
}

/// Patch origins along one axis: multiples of `min(stride, size)`, plus a final origin
/// clamped so the last patch ends exactly at the border.
pub fn patch_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    assert!(size >= 1 && size <= len && stride >= 1);
    // a stride wider than the patch would leave uncovered gaps
    let stride = stride.min(size);
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + size <= len)
        .collect();
    if *origins.last().expect("origin 0 always fits") + size < len {
        origins.push(len - size);
    }
    origins
}

pub fn extract_patches(cube: &HsiCube, size: usize, stride: usize) -> Result<Vec<Patch>> {
    if size < 2 || size > cube.height.min(cube.width) {
        return Err(Error::Argument(format!(
            "patch size {size} must lie in 2..={}",
            cube.height.min(cube.width)
        )));
    }
    if stride == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    let rows = patch_origins(cube.height, size, stride);
    let cols = patch_origins(cube.width, size, stride);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            patches.push(Patch {
                row: r,
                col: c,
                data: cube.crop(r, c, size, size)?,
            });
        }
    }
    Ok(patches)
}
