//! Training on simulated samples, checkpoints, band-count adaptation and
//! tiled whole-image inference.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdd_tensor::bundle::{read_bundle, write_bundle};
use tdd_tensor::{AdamConfig, OptimState};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hsi::{extract_patches, HsiCube, ScoreMap};
use crate::net::{NetworkConfig, TddNet};
use crate::sim::{simulate_dataset, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Simulator settings; `sim.patch_size` is the training patch size.
    pub sim: SimConfig,
    pub n_samples: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Network layout; `None` means defaults sized to the cube's band count.
    pub network: Option<NetworkConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            n_samples: 2000,
            batch_size: 16,
            steps: 2000,
            optimizer: AdamConfig::default(),
            seed: 0,
            network: None,
        }
    }
}

impl TrainConfig {
    pub fn patch_size(&self) -> usize {
        self.sim.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.n_samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_samples and batch_size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if let Some(n) = &self.network {
            n.validate()?;
        }
        Ok(())
    }

    /// The network layout for a cube with `bands` bands.
    pub fn network_for(&self, bands: usize) -> Result<NetworkConfig> {
        match &self.network {
            None => Ok(NetworkConfig::new(bands)),
            Some(n) if n.in_bands == bands => Ok(n.clone()),
            Some(n) => Err(Error::Config(format!(
                "network.in_bands is {} but the training cube has {bands} bands",
                n.in_bands
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Sidecar metadata stored next to the parameter bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub patch_size: usize,
    pub n_samples: usize,
    pub batch_size: usize,
    pub source: String,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    config: NetworkConfig,
    in_bands: usize,
    seed: u64,
    train_meta: TrainMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: TddNet,
    pub seed: u64,
    pub meta: TrainMeta,
}

impl Checkpoint {
    /// Training band count.
    pub fn in_bands(&self) -> usize {
        self.net.config.in_bands
    }

    /// Bundle stem and sidecar path. Accepts a bare stem or any of the
    /// three checkpoint file names.
    pub fn paths(path: &Path) -> (PathBuf, PathBuf) {
        let s = path.to_string_lossy();
        let stem = [".ckpt.json", ".tb.json", ".tb.bin"]
            .iter()
            .find_map(|suf| s.strip_suffix(suf))
            .unwrap_or(&s)
            .to_string();
        let sidecar = PathBuf::from(format!("{stem}.ckpt.json"));
        (PathBuf::from(stem), sidecar)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (stem, sidecar) = Self::paths(path);
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        write_bundle(&stem, &self.net.params)?;
        let side = Sidecar {
            config: self.net.config.clone(),
            in_bands: self.in_bands(),
            seed: self.seed,
            train_meta: self.meta.clone(),
        };
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        fs::write(&sidecar, text).map_err(|e| Error::io(format!("writing {}", sidecar.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (stem, sidecar) = Self::paths(path);
        let text = fs::read_to_string(&sidecar)
            .map_err(|e| Error::Load(format!("{}: {e}", sidecar.display())))?;
        let side: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("{}: {e}", sidecar.display())))?;
        if side.in_bands != side.config.in_bands {
            return Err(Error::Load(format!(
                "sidecar in_bands {} disagrees with config.in_bands {}",
                side.in_bands, side.config.in_bands
            )));
        }
        let params = read_bundle(&stem).map_err(|e| Error::Load(e.to_string()))?;
        let net = TddNet::from_parts(side.config, params)?;
        Ok(Self {
            net,
            seed: side.seed,
            meta: side.train_meta,
        })
    }
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Mean batch loss before each step.
    pub losses: Vec<f64>,
}

/// Draws batch indices: a fresh seeded permutation of the dataset per epoch.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1 << 63) + 1);
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains on `cfg.n_samples` samples simulated from `cube`. Per-sample
/// gradients run under `exec` and are summed in batch order, so the result
/// does not depend on the thread count.
pub fn train(cube: &HsiCube, cfg: &TrainConfig, source: &str, exec: Exec) -> Result<TrainRun> {
    train_with(cube, cfg, source, exec, |_, _| {})
}

pub fn train_with(
    cube: &HsiCube,
    cfg: &TrainConfig,
    source: &str,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainRun> {
    cfg.validate()?;
    let net_cfg = cfg.network_for(cube.bands())?;
    let mut net = TddNet::new(net_cfg, cfg.seed)?;
    let data = simulate_dataset(cube, &cfg.sim, cfg.n_samples, cfg.seed, exec)?;
    let mut optim = OptimState::new(cfg.optimizer, &net.params);
    let mut batches = Batches::new(data.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let meta = |steps: usize, losses: &[f64]| TrainMeta {
        steps,
        patch_size: cfg.patch_size(),
        n_samples: cfg.n_samples,
        batch_size: cfg.batch_size,
        source: source.to_string(),
        initial_loss: losses.first().copied(),
        final_loss: losses.last().copied(),
    };
    for step in 0..cfg.steps {
        let batch = batches.next(cfg.batch_size);
        let results = exec.map(batch.len(), |k| {
            let s = &data[batch[k]];
            net.loss_and_grads(&s.x, &s.y)
        });
        let mut loss = 0.0;
        let mut sum: Vec<Vec<f32>> = Vec::new();
        let mut finite = true;
        for r in results {
            let (l, g) = r?;
            if !l.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
                finite = false;
                break;
            }
            loss += l;
            if sum.is_empty() {
                sum = g;
            } else {
                for (acc, gi) in sum.iter_mut().zip(&g) {
                    for (a, b) in acc.iter_mut().zip(gi) {
                        *a += b;
                    }
                }
            }
        }
        if !finite {
            return Err(Error::NonFiniteLoss {
                step,
                last_good: Box::new(Checkpoint {
                    net,
                    seed: cfg.seed,
                    meta: meta(step, &losses),
                }),
            });
        }
        let inv = 1.0 / batch.len() as f32;
        for g in &mut sum {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        let loss = loss / batch.len() as f64;
        losses.push(loss);
        on_step(step, loss);
        optim.step(&mut net.params, &sum)?;
    }
    let checkpoint = Checkpoint {
        net,
        seed: cfg.seed,
        meta: meta(cfg.steps, &losses),
    };
    Ok(TrainRun { checkpoint, losses })
}

/// Band windows `[start, end)` used when a cube has more bands than the
/// network: consecutive blocks of `b1`, plus the last `b1` bands when a
/// remainder is left over.
pub fn segment_ranges(b2: usize, b1: usize) -> Vec<Range<usize>> {
    assert!(b1 >= 1 && b2 >= b1);
    let mut out: Vec<Range<usize>> = (0..b2 / b1).map(|k| k * b1..(k + 1) * b1).collect();
    if !b2.is_multiple_of(b1) {
        out.push(b2 - b1..b2);
    }
    out
}

/// Linear interpolation of every spectrum from `B2` to `b1` samples over
/// band index; first and last bands are kept exactly.
pub fn interpolate_bands(cube: &HsiCube, b1: usize) -> HsiCube {
    let b2 = cube.bands();
    let (h, w) = (cube.height(), cube.width());
    let mut out = HsiCube::zeros(h, w, b1);
    for j in 0..b1 {
        let (lo, frac) = if b1 == 1 || b2 == 1 {
            (0, 0.0)
        } else {
            let num = j * (b2 - 1);
            let den = b1 - 1;
            (num / den, (num % den) as f64 / den as f64)
        };
        let hi = (lo + 1).min(b2 - 1);
        for r in 0..h {
            for c in 0..w {
                let a = cube.get(r, c, lo) as f64;
                let v = if frac == 0.0 {
                    a
                } else {
                    a + (cube.get(r, c, hi) as f64 - a) * frac
                };
                out.set(r, c, j, v as f32);
            }
        }
    }
    out
}

/// Where an adapted cube's bands came from.
#[derive(Clone, Debug, PartialEq)]
pub enum BandSource {
    Unchanged,
    Interpolated { from: usize },
    Segment(Range<usize>),
}

/// Cubes with exactly `b1` bands whose detections are averaged.
pub fn adapt_bands(cube: &HsiCube, b1: usize) -> Result<Vec<(HsiCube, BandSource)>> {
    if b1 == 0 {
        return Err(Error::Argument("target band count must be >= 1".into()));
    }
    let b2 = cube.bands();
    Ok(match b2.cmp(&b1) {
        std::cmp::Ordering::Equal => vec![(cube.clone(), BandSource::Unchanged)],
        std::cmp::Ordering::Less => {
            vec![(interpolate_bands(cube, b1), BandSource::Interpolated { from: b2 })]
        }
        std::cmp::Ordering::Greater => segment_ranges(b2, b1)
            .into_iter()
            .map(|r| Ok((cube.band_range(r.start, b1)?, BandSource::Segment(r))))
            .collect::<Result<_>>()?,
    })
}

/// Anything that maps a `P x P x B` patch to a `P x P` score map.
pub trait PatchScorer: Sync {
    fn in_bands(&self) -> usize;
    fn score_patch(&self, patch: &HsiCube) -> Result<Vec<f32>>;
}

impl PatchScorer for TddNet {
    fn in_bands(&self) -> usize {
        self.config.in_bands
    }

    fn score_patch(&self, patch: &HsiCube) -> Result<Vec<f32>> {
        self.predict(patch)
    }
}

impl PatchScorer for Checkpoint {
    fn in_bands(&self) -> usize {
        self.net.config.in_bands
    }

    fn score_patch(&self, patch: &HsiCube) -> Result<Vec<f32>> {
        self.net.predict(patch)
    }
}

/// Tiles one cube (already at the scorer's band count) and averages
/// overlapping tile outputs per pixel.
pub fn infer_segment(
    cube: &HsiCube,
    scorer: &dyn PatchScorer,
    patch_size: usize,
    stride: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    let patches = extract_patches(cube, patch_size, stride)?;
    let outputs = exec.map(patches.len(), |k| scorer.score_patch(&patches[k].data));
    let (h, w) = (cube.height(), cube.width());
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (patch, out) in patches.iter().zip(outputs) {
        let out = out?;
        if out.len() != patch_size * patch_size {
            return Err(Error::Numeric(format!(
                "scorer returned {} values for a {patch_size}x{patch_size} patch",
                out.len()
            )));
        }
        for r in 0..patch_size {
            for c in 0..patch_size {
                let i = (patch.row + r) * w + patch.col + c;
                sum[i] += out[r * patch_size + c] as f64;
                count[i] += 1;
            }
        }
    }
    debug_assert!(count.iter().all(|&n| n > 0));
    Ok(sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect())
}

/// Whole-image score map: adapt bands, tile every adapted cube, and average
/// the per-segment maps.
pub fn infer(
    cube: &HsiCube,
    scorer: &dyn PatchScorer,
    patch_size: usize,
    stride: usize,
    exec: Exec,
) -> Result<ScoreMap> {
    let segments = adapt_bands(cube, scorer.in_bands())?;
    let mut acc = vec![0.0f64; cube.height() * cube.width()];
    for (seg, _) in &segments {
        let m = infer_segment(seg, scorer, patch_size, stride, exec)?;
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v;
        }
    }
    let n = segments.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    ScoreMap::new(cube.height(), cube.width(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;

    struct Constant(usize, f32);

    impl PatchScorer for Constant {
        fn in_bands(&self) -> usize {
            self.0
        }
        fn score_patch(&self, p: &HsiCube) -> Result<Vec<f32>> {
            Ok(vec![self.1; p.height() * p.width()])
        }
    }

    /// Scores each pixel by its first band.
    struct FirstBand(usize);

    impl PatchScorer for FirstBand {
        fn in_bands(&self) -> usize {
            self.0
        }
        fn score_patch(&self, p: &HsiCube) -> Result<Vec<f32>> {
            Ok(p.band(0).to_vec())
        }
    }

    #[test]
    fn segment_rule() {
        assert_eq!(segment_ranges(186, 162), vec![0..162, 24..186]);
        assert_eq!(segment_ranges(45, 20), vec![0..20, 20..40, 25..45]);
        assert_eq!(segment_ranges(40, 20), vec![0..20, 20..40]);
        assert_eq!(segment_ranges(20, 20), vec![0..20]);
    }

    #[test]
    fn interpolation_keeps_endpoints() {
        let cube = HsiCube::from_fn(2, 2, 46, |r, c, b| ((r + 2 * c + 1) * (b * b + 1)) as f32 * 0.01)
            .unwrap();
        let out = interpolate_bands(&cube, 162);
        assert_eq!(out.bands(), 162);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(out.get(r, c, 0), cube.get(r, c, 0));
                assert_eq!(out.get(r, c, 161), cube.get(r, c, 45));
            }
        }
        let lin = HsiCube::from_fn(1, 1, 3, |_, _, b| b as f32).unwrap();
        let up = interpolate_bands(&lin, 5);
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn adapt_passthrough_and_branches() {
        let cube = HsiCube::from_fn(3, 3, 45, |r, c, b| (r + c + b) as f32).unwrap();
        let same = adapt_bands(&cube, 45).unwrap();
        assert_eq!(same, vec![(cube.clone(), BandSource::Unchanged)]);
        let segs = adapt_bands(&cube, 20).unwrap();
        let ranges: Vec<_> = segs.iter().map(|(_, s)| s.clone()).collect();
        assert_eq!(
            ranges,
            vec![
                BandSource::Segment(0..20),
                BandSource::Segment(20..40),
                BandSource::Segment(25..45)
            ]
        );
        assert_eq!(segs[2].0.get(1, 1, 0), cube.get(1, 1, 25));
        let up = adapt_bands(&cube, 60).unwrap();
        assert_eq!(up.len(), 1);
        assert_eq!(up[0].1, BandSource::Interpolated { from: 45 });
    }

    #[test]
    fn constant_scorer_survives_overlap_averaging() {
        let cube = HsiCube::zeros(10, 10, 3);
        let m = infer(&cube, &Constant(3, 0.375), 4, 3, Exec::Sequential).unwrap();
        assert!(m.scores().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn single_tile_is_the_scorer_output() {
        let cube = HsiCube::from_fn(6, 6, 2, |r, c, b| (r * 6 + c + b) as f32 / 40.0).unwrap();
        let m = infer(&cube, &FirstBand(2), 6, 6, Exec::Sequential).unwrap();
        let expect: Vec<f64> = cube.band(0).iter().map(|&v| v as f64).collect();
        assert_eq!(m.scores(), expect.as_slice());
    }

    #[test]
    fn segment_maps_are_averaged() {
        // bands 0..2 and 2..4: first bands are 0.2 and 0.6 everywhere
        let cube = HsiCube::from_fn(4, 4, 4, |_, _, b| 0.2 * b as f32).unwrap();
        let m = infer(&cube, &FirstBand(2), 4, 4, Exec::Sequential).unwrap();
        let m1 = 0.0f32 as f64;
        let m2 = 0.4f32 as f64;
        assert!(m.scores().iter().all(|&v| v == (m1 + m2) / 2.0));
    }

    #[test]
    fn oversized_patch_is_an_argument_error() {
        let cube = HsiCube::zeros(5, 5, 1);
        assert!(matches!(
            infer(&cube, &Constant(1, 0.5), 6, 6, Exec::Sequential),
            Err(Error::Argument(_))
        ));
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            sim: SimConfig {
                patch_size: 6,
                ..SimConfig::default()
            },
            n_samples: 8,
            batch_size: 4,
            steps: 3,
            seed: 11,
            network: Some(NetworkConfig {
                encoder_channels: vec![4, 4, 4, 4, 4, 4],
                heads: 2,
                lam_window: (3, 3),
                ..NetworkConfig::new(3)
            }),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_the_initialisation() {
        let cube = HsiCube::from_fn(8, 8, 3, |r, c, b| ((r + 2 * c + 3 * b) % 5) as f32 / 4.0).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..tiny_train_cfg()
        };
        let run = train(&cube, &cfg, "t", Exec::Sequential).unwrap();
        let init = TddNet::new(cfg.network.clone().unwrap(), cfg.seed).unwrap();
        assert_eq!(run.checkpoint.net, init);
        assert!(run.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_across_modes() {
        let cube = HsiCube::from_fn(8, 8, 3, |r, c, b| ((r + 2 * c + 3 * b) % 5) as f32 / 4.0).unwrap();
        let cfg = tiny_train_cfg();
        let a = train(&cube, &cfg, "t", Exec::Sequential).unwrap();
        let b = train(&cube, &cfg, "t", Exec::Parallel).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 3);
    }

    #[test]
    fn exploding_updates_abort_with_last_good_state() {
        let cube = HsiCube::from_fn(8, 8, 3, |r, c, b| ((r + 2 * c + 3 * b) % 5) as f32 / 4.0).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            optimizer: AdamConfig {
                lr: 1e30,
                ..AdamConfig::default()
            },
            ..tiny_train_cfg()
        };
        match train(&cube, &cfg, "t", Exec::Sequential) {
            Err(Error::NonFiniteLoss { step, last_good }) => {
                assert!(step >= 1);
                assert_eq!(last_good.meta.steps, step);
            }
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn band_mismatch_in_config() {
        let cube = HsiCube::zeros(8, 8, 4);
        assert!(matches!(
            train(&cube, &tiny_train_cfg(), "t", Exec::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = TddNet::new(tiny_train_cfg().network.unwrap(), 3).unwrap();
        let ck = Checkpoint {
            net,
            seed: 3,
            meta: TrainMeta {
                steps: 0,
                patch_size: 6,
                n_samples: 1,
                batch_size: 1,
                source: "x".into(),
                initial_loss: None,
                final_loss: None,
            },
        };
        let stem = dir.path().join("sub").join("model");
        ck.save(&stem).unwrap();
        let back = Checkpoint::load(&dir.path().join("sub/model.ckpt.json")).unwrap();
        assert_eq!(back, ck);
        let cube = HsiCube::from_fn(6, 6, 3, |r, c, b| (r + c * b) as f32 / 20.0).unwrap();
        let a = infer(&cube, &ck, 6, 6, Exec::Sequential).unwrap();
        let b = infer(&cube, &back, 6, 6, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }
}
