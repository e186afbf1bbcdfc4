//! Labeled anomaly samples fabricated from unlabeled cubes.
//!
//! Each sample goes through three stages on a random patch:
//! 1. pick a rectangle small enough that background outweighs anomaly;
//! 2. shuffle every pixel's spectrum and paste the shuffled pixels of the
//!    rectangle back into the original patch;
//! 3. warp patch and label together with one random rotation/scale/shift.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hsi::{BinaryMask, HsiCube};

/// Rectangle inside a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectRegion {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl RectRegion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.h && col >= self.left && col < self.left + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Rotation `theta` (radians, anti-clockwise), scale `s` and shift `(dx, dy)`
/// about `center = (cx, cy)`, in `(x = column, y = row)` pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub theta: f64,
    pub scale: f64,
    pub shift: (f64, f64),
    pub center: (f64, f64),
}

impl AffineParams {
    /// Parameters centred on a `size x size` patch.
    pub fn centered(theta: f64, scale: f64, shift: (f64, f64), size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            theta,
            scale,
            shift,
            center: (c, c),
        }
    }

    pub fn identity(size: usize) -> Self {
        Self::centered(0.0, 1.0, (0.0, 0.0), size)
    }

    /// The map that undoes `self` (same centre).
    pub fn inverse(&self) -> Self {
        // p' = A (p - c) + c + b  =>  p = A^-1 (p' - c) + c - A^-1 b
        let s = 1.0 / self.scale;
        let (sin, cos) = (-self.theta).sin_cos();
        let (a, b) = (s * cos, s * sin);
        let (dx, dy) = self.shift;
        Self {
            theta: -self.theta,
            scale: s,
            shift: (-(a * dx + b * dy), -(-b * dx + a * dy)),
            center: self.center,
        }
    }
}

/// The 2x3 rotation-scale matrix about the centre, with
/// `alpha = s cos(theta)` and `beta = s sin(theta)`.
pub fn affine_matrix(p: &AffineParams) -> [[f64; 3]; 2] {
    let alpha = p.scale * p.theta.cos();
    let beta = p.scale * p.theta.sin();
    let (cx, cy) = p.center;
    [
        [alpha, beta, (1.0 - alpha) * cx - beta * cy],
        [-beta, alpha, beta * cx + (1.0 - alpha) * cy],
    ]
}

/// Source pixel `(row, col)` that nearest-neighbour inverse mapping reads for
/// output pixel `(row, col)`, or `None` when it falls outside the patch. The
/// second element is the clamped border pixel in either case.
pub fn inverse_map(
    params: &AffineParams,
    size: usize,
    row: usize,
    col: usize,
) -> (Option<(usize, usize)>, (usize, usize)) {
    let t = affine_matrix(params);
    let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
    let u = col as f64 - t[0][2] - params.shift.0;
    let v = row as f64 - t[1][2] - params.shift.1;
    let x = (t[1][1] * u - t[0][1] * v) / det;
    let y = (-t[1][0] * u + t[0][0] * v) / det;
    let (xr, yr) = (x.round(), y.round());
    let max = (size - 1) as f64;
    let clamped = (yr.clamp(0.0, max) as usize, xr.clamp(0.0, max) as usize);
    let inside = xr >= 0.0 && yr >= 0.0 && xr <= max && yr <= max;
    (inside.then_some(clamped), clamped)
}

/// Simulated patch and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub x: HsiCube,
    pub y: BinaryMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineRanges {
    /// Rotation drawn uniformly from `[theta.0, theta.1)`.
    pub theta: (f64, f64),
    pub scale: (f64, f64),
    /// Shift bound as a fraction of the patch size, per axis.
    pub max_shift_fraction: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            theta: (0.0, TAU),
            scale: (0.7, 1.3),
            max_shift_fraction: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub patch_size: usize,
    /// Upper bound on anomaly area as a fraction of the patch area, in (0, 0.5).
    pub max_fraction: f64,
    pub affine: AffineRanges,
    pub regions_per_patch: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            patch_size: 10,
            max_fraction: 0.2,
            affine: AffineRanges::default(),
            regions_per_patch: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::Config(format!(
                "patch_size must be >= 2, got {}",
                self.patch_size
            )));
        }
        if !(self.max_fraction > 0.0 && self.max_fraction < 0.5) {
            return Err(Error::Config(format!(
                "max_fraction must lie in (0, 0.5), got {}",
                self.max_fraction
            )));
        }
        let a = &self.affine;
        if !(a.scale.0 > 0.0 && a.scale.0 <= a.scale.1) || a.theta.0 > a.theta.1 {
            return Err(Error::Config("invalid affine ranges".into()));
        }
        if !(0.0..0.5).contains(&a.max_shift_fraction) {
            return Err(Error::Config(format!(
                "max_shift_fraction must lie in [0, 0.5), got {}",
                a.max_shift_fraction
            )));
        }
        if self.regions_per_patch == 0 {
            return Err(Error::Config("regions_per_patch must be >= 1".into()));
        }
        Ok(())
    }

    /// Largest admissible anomaly area in pixels.
    pub fn max_area(&self) -> usize {
        max_area(self.patch_size, self.max_fraction)
    }
}

fn max_area(size: usize, max_fraction: f64) -> usize {
    (max_fraction * (size * size) as f64).floor() as usize
}

/// Rejection-samples `h, w >= 1` with `h * w <= max_fraction * P^2`, then a
/// uniform placement.
pub fn select_anomaly_region(
    size: usize,
    max_fraction: f64,
    rng: &mut impl Rng,
) -> Result<RectRegion> {
    if size < 2 || !(max_fraction > 0.0 && max_fraction < 0.5) {
        return Err(Error::Argument(format!(
            "need patch size >= 2 and max_fraction in (0, 0.5), got {size}, {max_fraction}"
        )));
    }
    let limit = max_area(size, max_fraction);
    if limit == 0 {
        return Err(Error::Argument(format!(
            "max_fraction {max_fraction} leaves no room for a pixel in a {size}x{size} patch"
        )));
    }
    let (h, w) = loop {
        let h = rng.random_range(1..=size);
        let w = rng.random_range(1..=size);
        if h * w <= limit {
            break (h, w);
        }
    };
    Ok(RectRegion {
        top: rng.random_range(0..=size - h),
        left: rng.random_range(0..=size - w),
        h,
        w,
    })
}

/// Independent uniform permutation of every pixel's spectrum.
pub fn spectral_shuffle(patch: &HsiCube, rng: &mut impl Rng) -> HsiCube {
    let mut out = patch.clone();
    for r in 0..patch.height() {
        for c in 0..patch.width() {
            let mut spectrum = patch.spectrum(r, c);
            spectrum.shuffle(rng);
            out.set_spectrum(r, c, &spectrum);
        }
    }
    out
}

/// Pastes the `region` pixels of `shuffled` into `patch`; the label marks
/// exactly the pasted pixels.
pub fn implant_anomaly(
    patch: &HsiCube,
    shuffled: &HsiCube,
    region: &RectRegion,
) -> Result<(HsiCube, BinaryMask)> {
    let same_shape = patch.height() == shuffled.height()
        && patch.width() == shuffled.width()
        && patch.bands() == shuffled.bands();
    if !same_shape {
        return Err(Error::Argument(format!(
            "patch {}x{}x{} and shuffled {}x{}x{} differ",
            patch.height(),
            patch.width(),
            patch.bands(),
            shuffled.height(),
            shuffled.width(),
            shuffled.bands()
        )));
    }
    if region.h == 0
        || region.w == 0
        || region.top + region.h > patch.height()
        || region.left + region.w > patch.width()
    {
        return Err(Error::Argument(format!(
            "region {region:?} outside {}x{} patch",
            patch.height(),
            patch.width()
        )));
    }
    let mut x = patch.clone();
    let mut y = BinaryMask::zeros(patch.height(), patch.width());
    for r in region.top..region.top + region.h {
        for c in region.left..region.left + region.w {
            x.set_spectrum(r, c, &shuffled.spectrum(r, c));
            y.set(r, c, true);
        }
    }
    Ok((x, y))
}

/// Nearest-neighbour inverse-mapped warp applied identically to every band
/// of `x` and to `y`. Samples falling outside the patch take the clamped
/// border pixel for `x` and 0 for `y`.
pub fn warp_sample(x: &HsiCube, y: &BinaryMask, params: &AffineParams) -> TrainingSample {
    let (h, w) = (x.height(), x.width());
    assert_eq!((h, w), (y.height(), y.width()), "x and y must share a grid");
    assert_eq!(h, w, "patches are square");
    let mut xo = x.clone();
    let mut yo = BinaryMask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (inside, (sr, sc)) = inverse_map(params, h, r, c);
            for b in 0..x.bands() {
                xo.set(r, c, b, x.get(sr, sc, b));
            }
            yo.set(r, c, inside.is_some() && y.get(sr, sc));
        }
    }
    TrainingSample { x: xo, y: yo }
}

/// Everything one simulated sample went through, for inspection and tests.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub meta: SampleMeta,
    pub source: HsiCube,
    pub shuffled: HsiCube,
    pub implanted: HsiCube,
    pub implanted_label: BinaryMask,
    pub sample: TrainingSample,
}

/// Reproducible description of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: usize,
    pub origin: (usize, usize),
    pub regions: Vec<RectRegion>,
    pub affine: AffineParams,
}

/// Per-sample generator: ChaCha8 keyed by the dataset seed, one stream per
/// sample index, so any sample can be regenerated on its own.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_affine(ranges: &AffineRanges, size: usize, rng: &mut impl Rng) -> AffineParams {
    let theta = if ranges.theta.1 > ranges.theta.0 {
        rng.random_range(ranges.theta.0..ranges.theta.1)
    } else {
        ranges.theta.0
    };
    let scale = if ranges.scale.1 > ranges.scale.0 {
        rng.random_range(ranges.scale.0..=ranges.scale.1)
    } else {
        ranges.scale.0
    };
    let m = ranges.max_shift_fraction * size as f64;
    let shift = if m > 0.0 {
        (rng.random_range(-m..=m), rng.random_range(-m..=m))
    } else {
        (0.0, 0.0)
    };
    AffineParams::centered(theta, scale, shift, size)
}

const WARP_ATTEMPTS: usize = 64;

/// Runs the three stages for sample `index` of the dataset keyed by `seed`.
pub fn simulate_sample(
    cube: &HsiCube,
    cfg: &SimConfig,
    seed: u64,
    index: usize,
) -> Result<SampleTrace> {
    cfg.validate()?;
    let p = cfg.patch_size;
    if p > cube.height().min(cube.width()) {
        return Err(Error::Argument(format!(
            "patch size {p} exceeds cube {}x{}",
            cube.height(),
            cube.width()
        )));
    }
    let mut rng = sample_rng(seed, index);
    let origin = (
        rng.random_range(0..=cube.height() - p),
        rng.random_range(0..=cube.width() - p),
    );
    let source = cube.crop(origin.0, origin.1, p, p)?;
    let regions = (0..cfg.regions_per_patch)
        .map(|_| select_anomaly_region(p, cfg.max_fraction, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let shuffled = spectral_shuffle(&source, &mut rng);
    let (mut implanted, mut label) = implant_anomaly(&source, &shuffled, &regions[0])?;
    for region in &regions[1..] {
        let (x, y) = implant_anomaly(&implanted, &shuffled, region)?;
        implanted = x;
        for r in 0..p {
            for c in 0..p {
                if y.get(r, c) {
                    label.set(r, c, true);
                }
            }
        }
    }
    let mut chosen = None;
    for _ in 0..WARP_ATTEMPTS {
        let params = draw_affine(&cfg.affine, p, &mut rng);
        let sample = warp_sample(&implanted, &label, &params);
        if sample.y.count_ones() > 0 {
            chosen = Some((params, sample));
            break;
        }
    }
    let (affine, sample) = chosen.unwrap_or_else(|| {
        let params = AffineParams::identity(p);
        (params, warp_sample(&implanted, &label, &params))
    });
    Ok(SampleTrace {
        meta: SampleMeta {
            sample_id: index,
            origin,
            regions,
            affine,
        },
        source,
        shuffled,
        implanted,
        implanted_label: label,
        sample,
    })
}

/// `n` samples, deterministic in `seed` whatever the execution mode.
pub fn simulate_traces(
    cube: &HsiCube,
    cfg: &SimConfig,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<SampleTrace>> {
    cfg.validate()?;
    exec.map(n, |i| simulate_sample(cube, cfg, seed, i))
        .into_iter()
        .collect()
}

pub fn simulate_dataset(
    cube: &HsiCube,
    cfg: &SimConfig,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    exec.map(n, |i| simulate_sample(cube, cfg, seed, i).map(|t| t.sample))
        .into_iter()
        .collect()
}

/// One row of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub x_path: String,
    pub y_path: String,
    pub seed: u64,
    pub params: SampleMeta,
}

/// Writes sample containers plus `manifest.json` into `dir`. Paths in the
/// manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, traces: &[SampleTrace], seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::with_capacity(traces.len());
    for t in traces {
        let id = t.meta.sample_id;
        let x_path = format!("sample_{id:05}.x.hsi.json");
        let y_path = format!("sample_{id:05}.y.hsi.json");
        t.sample.x.save(dir.join(&x_path))?;
        t.sample.y.save(dir.join(&y_path))?;
        entries.push(ManifestEntry {
            sample_id: id,
            x_path,
            y_path,
            seed,
            params: t.meta.clone(),
        });
    }
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest, text)
        .map_err(|e| Error::io(format!("writing {}", manifest.display()), e))?;
    Ok(manifest)
}

pub fn read_dataset(manifest: &Path) -> Result<Vec<(ManifestEntry, TrainingSample)>> {
    let text = fs::read_to_string(manifest)
        .map_err(|e| Error::io(format!("reading {}", manifest.display()), e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest.display().to_string(),
        field: "<manifest>".into(),
        msg: e.to_string(),
    })?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let x = HsiCube::load(dir.join(&e.x_path))?;
            let y = BinaryMask::load(dir.join(&e.y_path))?;
            Ok((e, TrainingSample { x, y }))
        })
        .collect()
}
