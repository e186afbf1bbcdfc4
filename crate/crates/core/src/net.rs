//! Encoder/decoder detector with global and local self-attention.
//!
//! Tensors are `[C, H, W]` per sample. The encoder has six blocks of two
//! 3x3 conv + ReLU layers, max-pooling whenever the configured spatial
//! factor grows. Decoder block `i` fuses the previous decoder output
//! (bilinearly resized) with encoder output `7 - i` through a 1x1 conv, then
//! optionally applies an attention module. Every decoder output feeds a
//! 1x1 conv + sigmoid side head; the last head is the anomaly map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdd_tensor::{Conv2d, Graph, ParamSet, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::hsi::{BinaryMask, HsiCube};

pub const BLOCKS: usize = 6;
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attention {
    #[serde(rename = "LAM")]
    Lam,
    #[serde(rename = "GAM")]
    Gam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_bands: usize,
    pub encoder_channels: Vec<usize>,
    pub spatial_factors: Vec<usize>,
    pub dilations: Vec<usize>,
    pub heads: usize,
    pub lam_window: (usize, usize),
    /// Modules for decoder blocks 1..=5; block 6 has none.
    pub attention_order: Vec<Attention>,
    pub loss_weights: Vec<f64>,
}

impl NetworkConfig {
    pub fn new(in_bands: usize) -> Self {
        use Attention::*;
        Self {
            in_bands,
            encoder_channels: vec![32, 64, 128, 128, 128, 128],
            spatial_factors: vec![1, 2, 4, 4, 4, 4],
            dilations: vec![1, 1, 1, 1, 2, 2],
            heads: 4,
            lam_window: (5, 5),
            attention_order: vec![Lam, Gam, Lam, Gam, Lam],
            loss_weights: vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_bands == 0 {
            return bad("in_bands must be >= 1".into());
        }
        for (name, len) in [
            ("encoder_channels", self.encoder_channels.len()),
            ("spatial_factors", self.spatial_factors.len()),
            ("dilations", self.dilations.len()),
            ("loss_weights", self.loss_weights.len()),
        ] {
            if len != BLOCKS {
                return bad(format!("{name} needs {BLOCKS} entries, got {len}"));
            }
        }
        if self.attention_order.len() != BLOCKS - 1 {
            return bad(format!(
                "attention_order needs {} entries, got {}",
                BLOCKS - 1,
                self.attention_order.len()
            ));
        }
        if self.encoder_channels.contains(&0) || self.dilations.contains(&0) {
            return bad("channels and dilations must be >= 1".into());
        }
        let mut prev = 1;
        for &f in &self.spatial_factors {
            if f == 0 || f < prev || f % prev != 0 {
                return bad(format!(
                    "each spatial factor must be a multiple of the previous one, got {:?}",
                    self.spatial_factors
                ));
            }
            prev = f;
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        for i in 1..BLOCKS {
            if self.attention(i) == Some(Attention::Gam) && !self.decoder_channels(i).is_multiple_of(self.heads) {
                return bad(format!(
                    "heads {} does not divide decoder block {i} width {}",
                    self.heads,
                    self.decoder_channels(i)
                ));
            }
        }
        let (wh, ww) = self.lam_window;
        if wh % 2 == 0 || ww % 2 == 0 {
            return bad(format!("lam_window sides must be odd, got {wh}x{ww}"));
        }
        if self.loss_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad(format!("loss_weights must be positive, got {:?}", self.loss_weights));
        }
        Ok(())
    }

    /// Width of decoder block `i` (1-based): the width of encoder output `7 - i`.
    pub fn decoder_channels(&self, i: usize) -> usize {
        self.encoder_channels[BLOCKS - i]
    }

    /// Attention module of decoder block `i` (1-based).
    pub fn attention(&self, i: usize) -> Option<Attention> {
        (i < BLOCKS).then(|| self.attention_order[i - 1])
    }

    /// Spatial side of encoder output `i` (1-based) for a `size x size` patch.
    pub fn encoder_size(&self, i: usize, size: usize) -> usize {
        size.div_ceil(self.spatial_factors[i - 1])
    }

    /// Parameter names and shapes in storage order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_bands;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            for (j, ci) in [(1, cin), (2, c)] {
                out.push((format!("enc{}.conv{j}.w", i + 1), vec![c, ci, 3, 3]));
                out.push((format!("enc{}.conv{j}.b", i + 1), vec![c]));
            }
            cin = c;
        }
        for i in 1..=BLOCKS {
            let c = self.decoder_channels(i);
            let cin = if i == 1 { c } else { self.decoder_channels(i - 1) + c };
            out.push((format!("dec{i}.proj.w"), vec![c, cin, 1, 1]));
            out.push((format!("dec{i}.proj.b"), vec![c]));
            if let Some(kind) = self.attention(i) {
                if kind == Attention::Gam {
                    for m in ["q", "k"] {
                        out.push((format!("dec{i}.gam.{m}.w"), vec![c, c, 1, 1]));
                        out.push((format!("dec{i}.gam.{m}.b"), vec![c]));
                    }
                    out.push((format!("dec{i}.gam.out.w"), vec![c, c, 1, 1]));
                }
                out.push((format!("dec{i}.fuse.w"), vec![c, 2 * c, 1, 1]));
                out.push((format!("dec{i}.fuse.b"), vec![c]));
            }
            out.push((format!("side{i}.w"), vec![1, c, 1, 1]));
            out.push((format!("side{i}.b"), vec![1]));
        }
        out
    }
}

/// Seeded initialisation: uniform in `+-sqrt(6 / fan_in)` for convs followed
/// by ReLU, `+-sqrt(3 / fan_in)` for the rest, zero biases.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep clear of the per-sample simulation streams
    rng.set_stream(1 << 63);
    let mut params = ParamSet::new();
    for (name, shape) in cfg.inventory() {
        let n: usize = shape.iter().product();
        let data = if shape.len() == 1 {
            vec![0.0f32; n]
        } else {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let gain = if name.starts_with("enc") { 6.0 } else { 3.0 };
            let bound = (gain / fan_in).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
        };
        params.push(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Graph handles for every parameter, looked up by name.
pub struct ParamVars<'a> {
    names: Vec<&'a str>,
    vars: Vec<Var>,
}

impl<'a> ParamVars<'a> {
    pub fn register<T: Real>(g: &mut Graph<T>, params: &'a ParamSet<T>) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            names.push(name);
            vars.push(g.param(t.clone()));
        }
        Self { names, vars }
    }

    /// Pairs externally created vars with inventory names.
    pub fn from_vars(names: Vec<&'a str>, vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Load(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn conv1x1<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    Ok(g.conv2d(x, w, b, Conv2d::default())?)
}

/// All encoder outputs `E1..E6`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    p: &ParamVars,
    x: Var,
) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != cfg.in_bands {
        return Err(Error::Argument(format!(
            "network expects [{}, P, P] input, got {s:?}",
            cfg.in_bands
        )));
    }
    let mut h = x;
    let mut prev = 1;
    let mut out = Vec::with_capacity(BLOCKS);
    for i in 0..BLOCKS {
        let f = cfg.spatial_factors[i];
        if f > prev {
            let k = f / prev;
            h = g.max_pool2d(h, k, k)?;
            prev = f;
        }
        let spec = Conv2d {
            stride: 1,
            dilation: cfg.dilations[i],
        };
        for j in 1..=2 {
            let w = p.get(&format!("enc{}.conv{j}.w", i + 1))?;
            let b = p.get(&format!("enc{}.conv{j}.b", i + 1))?;
            h = g.conv2d(h, w, Some(b), spec)?;
            h = g.relu(h);
        }
        out.push(h);
    }
    Ok(out)
}

/// Global attention branch: returns `D_i2` and the per-head `[N, N]` weight
/// matrices (row `n` holds position `n`'s weights over all positions).
pub fn gam<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    heads: usize,
    q: (Var, Var),
    k: (Var, Var),
    w_out: Var,
) -> Result<(Var, Vec<Var>)> {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    let n = h * w;
    let d = c / heads;
    let qv = conv1x1(g, x, q.0, Some(q.1))?;
    let kv = conv1x1(g, x, k.0, Some(k.1))?;
    let q2 = g.reshape(qv, &[c, n])?;
    let k2 = g.reshape(kv, &[c, n])?;
    let v2 = g.reshape(x, &[c, n])?;
    let inv = T::one() / T::of(d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for j in 0..heads {
        let qj = g.narrow(q2, j * d, d)?;
        let kj = g.narrow(k2, j * d, d)?;
        let vj = g.narrow(v2, j * d, d)?;
        let qt = g.transpose(qj)?;
        let logits = g.matmul(qt, kj)?;
        let logits = g.scale(logits, inv);
        let a = g.softmax(logits, 1)?;
        let at = g.transpose(a)?;
        outs.push(g.matmul(vj, at)?);
        weights.push(a);
    }
    let cat = g.concat(&outs, 0)?;
    let cat = g.reshape(cat, &[c, h, w])?;
    Ok((conv1x1(g, cat, w_out, None)?, weights))
}

/// Local attention branch `D_i2`.
pub fn lam<T: Real>(g: &mut Graph<T>, x: Var, window: (usize, usize)) -> Result<Var> {
    Ok(g.local_attention(x, window.0, window.1)?)
}

/// `1x1 conv(concat(D_i1, D_i2))`.
pub fn fuse<T: Real>(g: &mut Graph<T>, d1: Var, d2: Var, w: Var, b: Var) -> Result<Var> {
    let cat = g.concat(&[d1, d2], 0)?;
    conv1x1(g, cat, w, Some(b))
}

/// Intermediate values of one decoder block.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    /// Output of the 1x1 projection.
    pub fused: Var,
    /// Attention branch before fusion, if any.
    pub attended: Option<Var>,
    pub gam_weights: Vec<Var>,
    pub out: Var,
}

/// Decoder block `i` (1-based). `d_prev` is `None` exactly for block 1.
pub fn decode_block<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    p: &ParamVars,
    i: usize,
    d_prev: Option<Var>,
    e_skip: Var,
) -> Result<DecoderBlock> {
    let es = g.shape(e_skip).to_vec();
    let input = match d_prev {
        None => e_skip,
        Some(d) => {
            let ds = g.shape(d).to_vec();
            let up = if ds[1..] == es[1..] {
                d
            } else {
                g.bilinear_resize(d, es[1], es[2])?
            };
            g.concat(&[up, e_skip], 0)?
        }
    };
    let w = p.get(&format!("dec{i}.proj.w"))?;
    let b = p.get(&format!("dec{i}.proj.b"))?;
    let fused = conv1x1(g, input, w, Some(b))?;
    assert_eq!(g.shape(fused)[1..], es[1..], "decoder block keeps the skip size");
    let (attended, gam_weights) = match cfg.attention(i) {
        None => (None, Vec::new()),
        Some(Attention::Lam) => (Some(lam(g, fused, cfg.lam_window)?), Vec::new()),
        Some(Attention::Gam) => {
            let q = (p.get(&format!("dec{i}.gam.q.w"))?, p.get(&format!("dec{i}.gam.q.b"))?);
            let k = (p.get(&format!("dec{i}.gam.k.w"))?, p.get(&format!("dec{i}.gam.k.b"))?);
            let wo = p.get(&format!("dec{i}.gam.out.w"))?;
            let (a, ws) = gam(g, fused, cfg.heads, q, k, wo)?;
            (Some(a), ws)
        }
    };
    let out = match attended {
        None => fused,
        Some(a) => {
            let w = p.get(&format!("dec{i}.fuse.w"))?;
            let b = p.get(&format!("dec{i}.fuse.b"))?;
            fuse(g, fused, a, w, b)?
        }
    };
    Ok(DecoderBlock {
        fused,
        attended,
        gam_weights,
        out,
    })
}

/// Every intermediate of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoder: Vec<Var>,
    pub decoder: Vec<DecoderBlock>,
    /// `S1..S6`, each `[1, h_i, w_i]`.
    pub side: Vec<Var>,
}

impl Forward {
    pub fn score_map(&self) -> Var {
        self.side[BLOCKS - 1]
    }
}

pub fn side_outputs<T: Real>(g: &mut Graph<T>, p: &ParamVars, d: &[Var]) -> Result<Vec<Var>> {
    d.iter()
        .enumerate()
        .map(|(i, &di)| {
            let w = p.get(&format!("side{}.w", i + 1))?;
            let b = p.get(&format!("side{}.b", i + 1))?;
            let z = conv1x1(g, di, w, Some(b))?;
            Ok(g.sigmoid(z))
        })
        .collect()
}

pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    p: &ParamVars,
    x: Var,
) -> Result<Forward> {
    let encoder = encode(g, cfg, p, x)?;
    let mut decoder: Vec<DecoderBlock> = Vec::with_capacity(BLOCKS);
    for i in 1..=BLOCKS {
        let prev = decoder.last().map(|b| b.out);
        decoder.push(decode_block(g, cfg, p, i, prev, encoder[BLOCKS - i])?);
    }
    let outs: Vec<Var> = decoder.iter().map(|b| b.out).collect();
    let side = side_outputs(g, p, &outs)?;
    Ok(Forward {
        encoder,
        decoder,
        side,
    })
}

/// Nearest-neighbour resize with half-pixel centres: output pixel `o` reads
/// input `floor((o + 0.5) * in / out)`.
pub fn resize_nearest(values: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(values.len(), h * w);
    let src = |o: usize, n_out: usize, n_in: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let sr = src(r, oh, h);
        for c in 0..ow {
            out.push(values[sr * w + src(c, ow, w)]);
        }
    }
    out
}

/// `sum_i w_i * mean BCE(S_i, G_i)` with `G_i` the label resized to `S_i`.
pub fn multi_scale_loss<T: Real>(
    g: &mut Graph<T>,
    side: &[Var],
    label: &BinaryMask,
    weights: &[f64],
) -> Result<Var> {
    if side.len() != weights.len() || side.is_empty() {
        return Err(Error::Argument(format!(
            "{} side outputs but {} loss weights",
            side.len(),
            weights.len()
        )));
    }
    let last = g.shape(side[side.len() - 1]).to_vec();
    if last[1..] != [label.height(), label.width()] {
        return Err(Error::Argument(format!(
            "label {}x{} does not match final output {:?}",
            label.height(),
            label.width(),
            &last[1..]
        )));
    }
    let full: Vec<f32> = label.values().iter().map(|&v| v as f32).collect();
    let mut total: Option<Var> = None;
    for (&s, &w) in side.iter().zip(weights) {
        let shape = g.shape(s).to_vec();
        let gi: Vec<T> = resize_nearest(&full, label.height(), label.width(), shape[1], shape[2])
            .into_iter()
            .map(|v| T::of(v as f64))
            .collect();
        let l = g.bce(s, &gi, T::of(BCE_EPS))?;
        let l = g.scale(l, T::of(w));
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(total.expect("non-empty"))
}

fn cube_tensor<T: Real>(x: &HsiCube) -> Tensor<T> {
    Tensor::new(
        vec![x.bands(), x.height(), x.width()],
        x.data().iter().map(|&v| T::of(v as f64)).collect(),
    )
    .expect("cube is consistent")
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TddNet {
    pub config: NetworkConfig,
    pub params: ParamSet<f32>,
}

impl TddNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Checks that `params` matches the configuration's inventory exactly.
    pub fn from_parts(config: NetworkConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let inv = config.inventory();
        if inv.len() != params.len() {
            return Err(Error::Load(format!(
                "config expects {} tensors, bundle has {}",
                inv.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in inv.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "tensor {i}: expected {name} {shape:?}, found {} {:?}",
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    fn check_patch(&self, x: &HsiCube) -> Result<()> {
        if x.bands() != self.config.in_bands {
            return Err(Error::Argument(format!(
                "network trained on {} bands, patch has {}",
                self.config.in_bands,
                x.bands()
            )));
        }
        if x.height() != x.width() || x.height() < 2 {
            return Err(Error::Argument(format!(
                "patches must be square with side >= 2, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Final score map of one patch, row-major.
    pub fn predict(&self, x: &HsiCube) -> Result<Vec<f32>> {
        self.check_patch(x)?;
        let mut g = Graph::<f32>::new();
        let p = ParamVars::register(&mut g, &self.params);
        let xv = g.input(cube_tensor(x));
        let f = forward(&mut g, &self.config, &p, xv)?;
        let s = f.score_map();
        g.check_finite(s)?;
        Ok(g.value(s).to_vec())
    }

    /// Loss on one sample and the gradient of every parameter, in storage
    /// order.
    pub fn loss_and_grads(&self, x: &HsiCube, y: &BinaryMask) -> Result<(f64, Vec<Vec<f32>>)> {
        self.check_patch(x)?;
        let mut g = Graph::<f32>::new();
        let p = ParamVars::register(&mut g, &self.params);
        let xv = g.input(cube_tensor(x));
        let f = forward(&mut g, &self.config, &p, xv)?;
        let loss = multi_scale_loss(&mut g, &f.side, y, &self.config.loss_weights)?;
        let value = g.value(loss)[0] as f64;
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = p
            .vars()
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, t))| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, grads))
    }

    pub fn loss(&self, x: &HsiCube, y: &BinaryMask) -> Result<f64> {
        self.check_patch(x)?;
        let mut g = Graph::<f32>::new();
        let p = ParamVars::register(&mut g, &self.params);
        let xv = g.input(cube_tensor(x));
        let f = forward(&mut g, &self.config, &p, xv)?;
        let loss = multi_scale_loss(&mut g, &f.side, y, &self.config.loss_weights)?;
        Ok(g.value(loss)[0] as f64)
    }
}

/// Input tensor for a patch in any precision.
pub fn patch_tensor<T: Real>(x: &HsiCube) -> Tensor<T> {
    cube_tensor(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(in_bands: usize) -> NetworkConfig {
        NetworkConfig {
            encoder_channels: vec![4, 8, 8, 8, 8, 8],
            heads: 2,
            lam_window: (3, 3),
            ..NetworkConfig::new(in_bands)
        }
    }

    fn spatial(g: &Graph<f32>, v: Var) -> (usize, usize, usize) {
        let s = g.shape(v);
        (s[0], s[1], s[2])
    }

    #[test]
    fn encoder_shapes_follow_schedule() {
        let cfg = NetworkConfig::new(3);
        let params = init_params(&cfg, 0).unwrap();
        for (size, sides) in [(10, [10, 5, 3, 3, 3, 3]), (4, [4, 2, 1, 1, 1, 1])] {
            let mut g = Graph::<f32>::new();
            let p = ParamVars::register(&mut g, &params);
            let x = g.input(Tensor::zeros(vec![3, size, size]));
            let e = encode(&mut g, &cfg, &p, x).unwrap();
            for (i, &v) in e.iter().enumerate() {
                assert_eq!(spatial(&g, v), (cfg.encoder_channels[i], sides[i], sides[i]));
                assert_eq!(cfg.encoder_size(i + 1, size), sides[i]);
            }
        }
    }

    #[test]
    fn zero_patch_has_finite_loss() {
        let net = TddNet::new(small(3), 1).unwrap();
        let x = HsiCube::zeros(4, 4, 3);
        let y = BinaryMask::zeros(4, 4);
        let (l, grads) = net.loss_and_grads(&x, &y).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert!(grads.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn band_mismatch_is_rejected() {
        let net = TddNet::new(small(3), 1).unwrap();
        assert!(matches!(
            net.predict(&HsiCube::zeros(4, 4, 2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = NetworkConfig::new(5);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NetworkConfig::new(5);
        c.lam_window = (4, 5);
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::new(5);
        c.loss_weights[2] = 0.0;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::new(5);
        c.attention_order.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_uses_field_names() {
        let c = NetworkConfig::new(7);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"attention_order\":[\"LAM\",\"GAM\",\"LAM\",\"GAM\",\"LAM\"]"));
        let back: NetworkConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn block_without_attention_is_the_projection() {
        let cfg = small(3);
        let params = init_params(&cfg, 4).unwrap();
        let mut g = Graph::<f32>::new();
        let p = ParamVars::register(&mut g, &params);
        let x = g.input(Tensor::filled(vec![3, 6, 6], 0.3));
        let f = forward(&mut g, &cfg, &p, x).unwrap();
        let last = &f.decoder[BLOCKS - 1];
        assert!(last.attended.is_none());
        assert_eq!(last.out, last.fused);
        for (i, b) in f.decoder.iter().enumerate() {
            let e = f.encoder[BLOCKS - 1 - i];
            assert_eq!(spatial(&g, b.out), spatial(&g, e));
            assert_eq!(g.shape(f.side[i])[1..], g.shape(e)[1..]);
        }
    }

    #[test]
    fn zero_side_heads_give_one_half() {
        let cfg = small(2);
        let mut params = init_params(&cfg, 2).unwrap();
        for i in 0..params.len() {
            if params.name(i).starts_with("side") {
                params.tensor_mut(i).data_mut().fill(0.0);
            }
        }
        let net = TddNet::from_parts(cfg, params).unwrap();
        let s = net.predict(&HsiCube::zeros(6, 6, 2)).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn nearest_resize() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(resize_nearest(&v, 2, 2, 2, 2), v);
        assert_eq!(resize_nearest(&v, 2, 2, 1, 1), vec![4.0]);
        assert_eq!(resize_nearest(&v, 2, 2, 4, 4)[..4], [1.0, 1.0, 2.0, 2.0]);
        let ten: Vec<f32> = (0..10).map(|i| i as f32).collect();
        assert_eq!(resize_nearest(&ten, 1, 10, 1, 5), vec![1.0, 3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn single_scale_loss_is_ln2() {
        let mut g = Graph::<f64>::new();
        let s = g.input(Tensor::filled(vec![1, 3, 3], 0.5));
        let mut y = BinaryMask::zeros(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                y.set(r, c, true);
            }
        }
        let l = multi_scale_loss(&mut g, &[s], &y, &[1.0]).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let l2 = multi_scale_loss(&mut g, &[s], &y, &[2.0]).unwrap();
        assert!((g.value(l2)[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_loss_near_zero() {
        let mut g = Graph::<f64>::new();
        let s = g.input(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let y = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
        let l = multi_scale_loss(&mut g, &[s], &y, &[1.0]).unwrap();
        assert!(g.value(l)[0] < 1e-6);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small(3);
        assert_eq!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 5).unwrap());
        assert_ne!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 6).unwrap());
    }
}
