//! The two-branch learned quantiser.
//!
//! The annotation branch turns an image into per-pixel class activations:
//! softened with a temperature during training, arg-maxed at test time. The
//! palette branch decodes `C` learnable reference queries into `C` RGB
//! colours by cross-attending to a downsampled image feature map. The
//! quantised image is the (soft or one-hot) assignment times the palette.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Tensor, Var};
use crate::colour::RgbImage;
use crate::error::{config_err, input_err, Result};
use crate::nn::{normal_tensor, Binding, Conv2d, GroupNorm, Linear, ParamId, ParamStore};

/// Unnormalised per-pixel class scores, `H×W×C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub colours: usize,
    pub data: Vec<f64>,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, colours: usize, data: Vec<f64>) -> Result<Self> {
        if colours < 1 {
            return Err(input_err("activation map needs at least one channel"));
        }
        if data.len() != height * width * colours {
            return Err(input_err("activation map buffer length mismatch"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(input_err("activation map contains non-finite values"));
        }
        Ok(Self { height, width, colours, data })
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.colours..(i + 1) * self.colours]
    }
}

/// Per-pixel distributions over `C` colours produced with temperature `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub colours: usize,
    pub temperature: f64,
    pub data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.colours..(i + 1) * self.colours]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel argmax, lowest index on ties.
    pub fn argmax(&self) -> IndexMap {
        let data = self.data.chunks_exact(self.colours).map(argmax_lowest).collect();
        IndexMap { height: self.height, width: self.width, colours: self.colours, data }
    }
}

/// Per-pixel colour indices in `[0, C)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub height: usize,
    pub width: usize,
    pub colours: usize,
    pub data: Vec<usize>,
}

impl IndexMap {
    pub fn new(height: usize, width: usize, colours: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != height * width {
            return Err(input_err("index map buffer length mismatch"));
        }
        if let Some(bad) = data.iter().find(|&&i| i >= colours) {
            return Err(input_err(format!("colour index {bad} out of range for {colours} colours")));
        }
        Ok(Self { height, width, colours, data })
    }

    /// Fraction of pixels assigned to each colour.
    pub fn shares(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.colours];
        for &i in &self.data {
            counts[i] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.data.len() as f64).collect()
    }
}

/// An ordered set of RGB colours in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub colours: Vec<[f64; 3]>,
}

impl Palette {
    pub fn new(colours: Vec<[f64; 3]>) -> Result<Self> {
        if colours.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(input_err("palette entries must lie in [0, 1]"));
        }
        Ok(Self { colours })
    }

    pub fn len(&self) -> usize {
        self.colours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colours.is_empty()
    }

    /// Paints an index map with this palette.
    pub fn render(&self, map: &IndexMap) -> RgbImage {
        let data = map.data.iter().flat_map(|&i| self.colours[i]).collect();
        RgbImage::new(map.height, map.width, data).expect("palette colours are in range")
    }

    /// Index of the nearest palette colour (squared RGB distance, lowest
    /// index on ties).
    pub fn nearest(&self, rgb: [f64; 3]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.colours.iter().enumerate() {
            let d: f64 = (0..3).map(|k| (c[k] - rgb[k]).powi(2)).sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `Softmax(a/τ)` per pixel.
pub fn softmax_with_temperature(a: &ActivationMap, tau: f64) -> Result<ProbabilityMap> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(config_err(format!("temperature must be positive, got {tau}")));
    }
    let mut data = vec![0.0; a.data.len()];
    for (row, out) in a.data.chunks_exact(a.colours).zip(data.chunks_exact_mut(a.colours)) {
        crate::autodiff::softmax_row(row, 1.0 / tau, out);
    }
    Ok(ProbabilityMap { height: a.height, width: a.width, colours: a.colours, temperature: tau, data })
}

/// Per-pixel argmax of the activations (softmax does not change it); ties
/// resolve to the lowest index.
pub fn argmax_index_map(a: &ActivationMap) -> IndexMap {
    let data = a.data.chunks_exact(a.colours).map(argmax_lowest).collect();
    IndexMap { height: a.height, width: a.width, colours: a.colours, data }
}

/// Single-head `Softmax(Q·Kᵀ/√d)·V`. `q` is `[C, d]` (shared) or
/// `[N, C, d]`; `k` and `v` are `[N, L, d]`.
pub fn cross_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Var {
    let d = *g.shape(k).last().unwrap();
    let scores = g.matmul(q, k, false, true);
    let weights = g.softmax(scores, 1.0 / (d as f64).sqrt());
    g.matmul(weights, v, false, false)
}

/// Maps an image batch to per-pixel class activations with the same spatial
/// size and `C` channels.
pub trait ActivationEncoder: Send + Sync + std::fmt::Debug {
    /// `x` is `[N, 3, H, W]` with `H, W` multiples of 4; returns `[N, C, H, W]`.
    fn activations(&self, g: &mut Graph, params: &Binding, x: Var) -> Var;

    fn colours(&self) -> usize;

    /// Appends an output channel cloned from `parent` (plus `noise`).
    fn expand_colour(&mut self, store: &mut ParamStore, parent: usize, noise: &[f64]);

    fn config(&self) -> EncoderConfig;

    fn boxed_clone(&self) -> Box<dyn ActivationEncoder>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderConfig {
    /// U-shaped encoder with two downsampling stages; `widths` are the
    /// channel counts at full, half and quarter resolution.
    UNet { widths: [usize; 3] },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::UNet { widths: [24, 48, 96] }
    }
}

/// Group count cap for the encoder's normalisation layers.
pub const NORM_GROUPS: usize = 4;
/// The encoder head starts with small logits so `Softmax(a/τ)` is not
/// saturated at the default `τ` and the annotation branch receives gradient.
const HEAD_INIT_SCALE: f64 = 0.01;
/// With the default gain every decoded colour starts near mid grey.
const DECODE_INIT_GAIN: f64 = 10.0;

fn scale_param(store: &mut ParamStore, id: ParamId, k: f64) {
    let mut t = store.get(id).clone();
    t.data_mut().iter_mut().for_each(|v| *v *= k);
    store.set(id, t);
}

/// Default annotation encoder. Every conv but the head is followed by
/// group norm and ReLU.
///
/// ```text
/// x ─ conv3 ─ e1 ─ pool ─ conv3 ─ e2 ─ pool ─ conv3 ─ e3
///              │                   └──── concat ─ up(e3) ─ conv3 ─ d2
///              └──────── concat(x, e1, up(d2)) ─ conv1 ─ d1 ─ conv1 ─ logits
/// ```
#[derive(Debug, Clone)]
pub struct UNetEncoder {
    widths: [usize; 3],
    colours: usize,
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    up2: Conv2d,
    up1: Conv2d,
    head: Conv2d,
    /// After stem, down1, down2, up2 and up1.
    norms: Vec<GroupNorm>,
}

impl UNetEncoder {
    pub fn new(store: &mut ParamStore, widths: [usize; 3], colours: usize, rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2, w3] = widths;
        let same3 = Conv2dSpec::new(1, 1);
        let point = Conv2dSpec::new(1, 0);
        let mut s = Self {
            widths,
            colours,
            stem: Conv2d::new(store, "encoder.stem", 3, w1, 3, same3, rng),
            down1: Conv2d::new(store, "encoder.down1", w1, w2, 3, same3, rng),
            down2: Conv2d::new(store, "encoder.down2", w2, w3, 3, same3, rng),
            up2: Conv2d::new(store, "encoder.up2", w3 + w2, w2, 3, same3, rng),
            up1: Conv2d::new(store, "encoder.up1", w2 + w1 + 3, w1, 1, point, rng),
            head: {
                let h = Conv2d::new(store, "encoder.head", w1, colours, 1, point, rng);
                scale_param(store, h.weight, HEAD_INIT_SCALE);
                h
            },
            norms: Vec::new(),
        };
        for (name, ch) in [("stem", w1), ("down1", w2), ("down2", w3), ("up2", w2), ("up1", w1)] {
            s.norms.push(GroupNorm::new(store, &format!("encoder.{name}.norm"), ch, NORM_GROUPS));
        }
        s
    }

    fn block(&self, g: &mut Graph, p: &Binding, conv: &Conv2d, i: usize, x: Var) -> Var {
        let h = conv.forward(g, p, x);
        let h = match self.norms.get(i) {
            Some(n) => n.forward(g, p, h),
            None => h,
        };
        g.relu(h)
    }
}

impl ActivationEncoder for UNetEncoder {
    fn activations(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        let e1 = self.block(g, p, &self.stem, 0, x);
        let d = g.max_pool2(e1);
        let e2 = self.block(g, p, &self.down1, 1, d);
        let d = g.max_pool2(e2);
        let e3 = self.block(g, p, &self.down2, 2, d);
        let u = g.upsample2(e3);
        let u = g.concat_channels(u, e2);
        let d2 = self.block(g, p, &self.up2, 3, u);
        let u = g.upsample2(d2);
        let u = g.concat_channels(u, e1);
        let u = g.concat_channels(u, x);
        let d1 = self.block(g, p, &self.up1, 4, u);
        self.head.forward(g, p, d1)
    }

    fn colours(&self) -> usize {
        self.colours
    }

    fn expand_colour(&mut self, store: &mut ParamStore, parent: usize, noise: &[f64]) {
        let w = store.get(self.head.weight).clone();
        let per = w.numel() / self.colours;
        let mut data = w.into_data();
        let row: Vec<f64> = data[parent * per..(parent + 1) * per].iter().zip(noise.iter().cycle()).map(|(a, n)| a + n).collect();
        data.extend(row);
        store.set(self.head.weight, Tensor::new(vec![self.colours + 1, self.widths[0], 1, 1], data));
        let mut b = store.get(self.head.bias).clone().into_data();
        b.push(b[parent] + noise.last().copied().unwrap_or(0.0));
        store.set(self.head.bias, Tensor::new(vec![self.colours + 1], b));
        self.colours += 1;
        self.head.out_channels += 1;
    }

    fn config(&self) -> EncoderConfig {
        EncoderConfig::UNet { widths: self.widths }
    }

    fn boxed_clone(&self) -> Box<dyn ActivationEncoder> {
        Box::new(self.clone())
    }
}

/// Where the palette comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaletteMode {
    /// Attention-decoded, image-adaptive palette.
    #[default]
    Branch,
    /// One learned palette shared by every image (ablation).
    FixedCentroids,
}

#[derive(Debug, Clone)]
struct PaletteBranch {
    stem1: Conv2d,
    stem2: Conv2d,
    position: Conv2d,
    key: Linear,
    value: Linear,
    ffn1_in: Linear,
    ffn1_out: Linear,
    decode_in: Linear,
    decode_out: Linear,
}

impl PaletteBranch {
    fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let half = (dim / 2).max(1);
        let down = Conv2dSpec::new(2, 1);
        Self {
            stem1: Conv2d::new(store, "palette.stem1", 3, half, 3, down, rng),
            stem2: Conv2d::new(store, "palette.stem2", half, dim, 3, down, rng),
            position: Conv2d::new(store, "palette.position", dim, dim, 3, Conv2dSpec::depthwise(dim, 1), rng),
            key: Linear::new(store, "palette.key", dim, dim, true, rng),
            value: Linear::new(store, "palette.value", dim, dim, true, rng),
            ffn1_in: Linear::new(store, "palette.ffn.0", dim, 4 * dim, true, rng),
            ffn1_out: Linear::new(store, "palette.ffn.1", 4 * dim, dim, true, rng),
            decode_in: Linear::new(store, "palette.decode.0", dim, dim, true, rng),
            decode_out: Linear::new(store, "palette.decode.1", dim, 3, true, rng),
        }
    }

    /// `x` `[N, 3, H, W]` → palette `[N, C, 3]`.
    fn forward(&self, g: &mut Graph, p: &Binding, x: Var, queries: Var) -> Var {
        let f = self.stem1.forward(g, p, x);
        let f = g.relu(f);
        let f = self.stem2.forward(g, p, f);
        let f0 = g.relu(f);
        let pe = self.position.forward(g, p, f0);
        let f = g.add(f0, pe);
        let [n, d, h, w]: [usize; 4] = g.shape(f).try_into().unwrap();
        let f = g.reshape(f, &[n, d, h * w]);
        let tokens = g.permute(f, &[0, 2, 1]);
        let k = self.key.forward(g, p, tokens);
        let v = self.value.forward(g, p, tokens);
        let attended = cross_attention(g, queries, k, v);
        let hdn = self.ffn1_in.forward(g, p, attended);
        let hdn = g.gelu(hdn);
        let hdn = self.ffn1_out.forward(g, p, hdn);
        let emb = g.add(hdn, queries);
        let out = self.decode_in.forward(g, p, emb);
        let out = g.gelu(out);
        let out = self.decode_out.forward(g, p, out);
        g.sigmoid(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqFormerConfig {
    pub colours: usize,
    pub query_dim: usize,
    pub encoder: EncoderConfig,
    pub palette_mode: PaletteMode,
    pub seed: u64,
}

impl Default for CqFormerConfig {
    fn default() -> Self {
        Self { colours: 4, query_dim: 64, encoder: EncoderConfig::default(), palette_mode: PaletteMode::Branch, seed: 0 }
    }
}

/// Graph nodes of one training-path forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainForward {
    /// `[N, C, H, W]`
    pub activations: Var,
    /// Activations laid out per pixel, `[N, H·W, C]`.
    pub pixel_logits: Var,
    /// `m_τ`, `[N, H·W, C]`.
    pub probs: Var,
    /// `[N, C, 3]` (or `[C, 3]` for fixed centroids).
    pub palette: Var,
    /// Soft-quantised images `[N, 3, H, W]`.
    pub quantised: Var,
}

/// The learned quantiser: encoder, palette branch and reference queries.
#[derive(Debug)]
pub struct CqFormer {
    config: CqFormerConfig,
    params: ParamStore,
    encoder: Box<dyn ActivationEncoder>,
    branch: Option<PaletteBranch>,
    palette_param: ParamId,
}

impl Clone for CqFormer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encoder: self.encoder.boxed_clone(),
            branch: self.branch.clone(),
            palette_param: self.palette_param,
        }
    }
}

impl CqFormer {
    pub fn new(config: CqFormerConfig) -> Result<Self> {
        let EncoderConfig::UNet { widths } = config.encoder.clone();
        if widths.contains(&0) {
            return Err(config_err("encoder widths must be positive"));
        }
        let colours = config.colours;
        Self::with_encoder(config, |store, rng| Box::new(UNetEncoder::new(store, widths, colours, rng)))
    }

    /// Builds a quantiser around a custom annotation encoder. `build`
    /// registers the encoder's parameters in the shared store.
    pub fn with_encoder(
        config: CqFormerConfig,
        build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn ActivationEncoder>,
    ) -> Result<Self> {
        let mut config = config;
        if config.colours < 1 {
            return Err(config_err("colour count must be at least 1"));
        }
        if config.query_dim < 2 {
            return Err(config_err("query dimension must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = build(&mut params, &mut rng);
        if encoder.colours() != config.colours {
            return Err(config_err("encoder colour count does not match the quantiser"));
        }
        config.encoder = encoder.config();
        let (branch, palette_param) = match config.palette_mode {
            PaletteMode::Branch => {
                let d = config.query_dim;
                let q = params.add("palette.queries", normal_tensor(&mut rng, &[config.colours, d], 1.0 / (d as f64).sqrt()));
                let b = PaletteBranch::new(&mut params, d, &mut rng);
                scale_param(&mut params, b.decode_out.weight, DECODE_INIT_GAIN);
                (Some(b), q)
            }
            PaletteMode::FixedCentroids => {
                let c = params.add("palette.centroids", normal_tensor(&mut rng, &[config.colours, 3], 1.0));
                (None, c)
            }
        };
        Ok(Self { config, params, encoder, branch, palette_param })
    }

    pub fn config(&self) -> &CqFormerConfig {
        &self.config
    }

    pub fn colours(&self) -> usize {
        self.config.colours
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Reference palette queries `Q` (`C×d`), absent in fixed-centroid mode.
    pub fn queries(&self) -> Option<&Tensor> {
        self.branch.as_ref().map(|_| self.params.get(self.palette_param))
    }

    /// Builds the training-path graph for a batch of equally sized images.
    pub fn forward_train(&self, g: &mut Graph, p: &Binding, images: &[RgbImage], tau: f64) -> Result<TrainForward> {
        let batch = ImageBatch::new(images)?;
        let x = g.constant(batch.padded_tensor());
        self.forward_train_tensor(g, p, x, &batch, tau)
    }

    fn forward_train_tensor(&self, g: &mut Graph, p: &Binding, x: Var, batch: &ImageBatch, tau: f64) -> Result<TrainForward> {
        if !(tau > 0.0) {
            return Err(config_err(format!("temperature must be positive, got {tau}")));
        }
        let (n, h, w, c) = (batch.n, batch.height, batch.width, self.config.colours);
        let act = self.encoder.activations(g, p, x);
        let act = g.crop2d(act, 0, 0, h, w);
        let palette = self.palette_var(g, p, x);
        let logits = g.permute(act, &[0, 2, 3, 1]);
        let pixel_logits = g.reshape(logits, &[n, h * w, c]);
        let probs = g.softmax(pixel_logits, 1.0 / tau);
        let q = g.matmul(probs, palette, false, false);
        let q = g.reshape(q, &[n, h, w, 3]);
        let quantised = g.permute(q, &[0, 3, 1, 2]);
        Ok(TrainForward { activations: act, pixel_logits, probs, palette, quantised })
    }

    fn palette_var(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        let table = p.var(self.palette_param);
        match &self.branch {
            Some(branch) => branch.forward(g, p, x, table),
            None => g.sigmoid(table),
        }
    }

    /// Inference pass on frozen parameters: activations `[N,C,H,W]` and
    /// palettes, one per image.
    pub fn infer(&self, images: &[RgbImage]) -> Result<(Vec<ActivationMap>, Vec<Palette>)> {
        let batch = ImageBatch::new(images)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch.padded_tensor());
        let act = self.encoder.activations(&mut g, &p, x);
        let act = g.crop2d(act, 0, 0, batch.height, batch.width);
        let pal = self.palette_var(&mut g, &p, x);
        let logits = g.permute(act, &[0, 2, 3, 1]);
        let c = self.config.colours;
        let hw = batch.height * batch.width;
        let acts = g
            .value(logits)
            .data()
            .chunks_exact(hw * c)
            .map(|d| ActivationMap::new(batch.height, batch.width, c, d.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let pal_data = g.value(pal).data();
        let palettes = (0..batch.n)
            .map(|i| {
                let base = if pal_data.len() == c * 3 { 0 } else { i * c * 3 };
                Palette { colours: (0..c).map(|k| std::array::from_fn(|j| pal_data[base + k * 3 + j])).collect() }
            })
            .collect();
        Ok((acts, palettes))
    }

    /// Train-path quantisation of one image without recording gradients.
    pub fn quantise_train(&self, img: &RgbImage, tau: f64) -> Result<(RgbImage, ProbabilityMap, Palette)> {
        if !(tau > 0.0 && tau < 1.0) {
            log::warn!("temperature {tau} is outside (0, 1)");
        }
        let (acts, palettes) = self.infer(std::slice::from_ref(img))?;
        let m = softmax_with_temperature(&acts[0], tau)?;
        let palette = palettes.into_iter().next().unwrap();
        let data: Vec<f64> = m
            .data
            .chunks_exact(m.colours)
            .flat_map(|probs| {
                let mut px = [0.0; 3];
                for (p, col) in probs.iter().zip(&palette.colours) {
                    for k in 0..3 {
                        px[k] += p * col[k];
                    }
                }
                px
            })
            .collect();
        Ok((RgbImage::from_clamped(img.height(), img.width(), data)?, m, palette))
    }

    /// Test-path quantisation: one-hot argmax assignment times the palette.
    pub fn quantise_test(&self, img: &RgbImage) -> Result<(RgbImage, IndexMap, Palette)> {
        Ok(self.quantise_test_batch(std::slice::from_ref(img))?.pop().unwrap())
    }

    pub fn quantise_test_batch(&self, images: &[RgbImage]) -> Result<Vec<(RgbImage, IndexMap, Palette)>> {
        let (acts, palettes) = self.infer(images)?;
        Ok(acts
            .iter()
            .zip(palettes)
            .map(|(a, pal)| {
                let idx = argmax_index_map(a);
                (pal.render(&idx), idx, pal)
            })
            .collect())
    }

    /// Adds a colour cloned from `parent`: the parent's query row (or
    /// centroid) and encoder output channel are duplicated and perturbed by
    /// Gaussian noise of deviation `noise_std`.
    pub fn expand_colour(&mut self, parent: usize, noise_std: f64, seed: u64) -> Result<()> {
        let c = self.config.colours;
        if parent >= c {
            return Err(config_err(format!("parent colour {parent} out of range for {c} colours")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = self.params.get(self.palette_param).clone();
        let width = table.shape()[1];
        let mut data = table.into_data();
        let noise = normal_tensor(&mut rng, &[width], noise_std);
        let row: Vec<f64> = data[parent * width..(parent + 1) * width].iter().zip(noise.data()).map(|(a, n)| a + n).collect();
        data.extend(row);
        self.params.set(self.palette_param, Tensor::new(vec![c + 1, width], data));
        let enc_noise = normal_tensor(&mut rng, &[64], noise_std);
        self.encoder.expand_colour(&mut self.params, parent, enc_noise.data());
        self.config.colours += 1;
        Ok(())
    }
}

/// Equally sized images packed as `[N, 3, H, W]`, reflect-padded to
/// multiples of 4.
pub(crate) struct ImageBatch<'a> {
    images: &'a [RgbImage],
    pub n: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> ImageBatch<'a> {
    pub fn new(images: &'a [RgbImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| input_err("empty image batch"))?;
        let (height, width) = (first.height(), first.width());
        if images.iter().any(|i| i.height() != height || i.width() != width) {
            return Err(input_err("images in a batch must share dimensions"));
        }
        if height < 4 || width < 4 {
            return Err(input_err(format!("images must be at least 4x4, got {height}x{width}")));
        }
        Ok(Self { images, n: images.len(), height, width })
    }

    pub fn padded_tensor(&self) -> Tensor {
        let padded: Vec<RgbImage> = self.images.iter().map(|i| i.reflect_pad_to_multiple(4)).collect();
        let mut t = images_to_nchw(&padded);
        // Both branches see inputs centred on zero.
        t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        t
    }
}

/// Packs equally sized images as `[N, 3, H, W]`.
pub fn images_to_nchw(images: &[RgbImage]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        for ch in 0..3 {
            data.extend(img.data().iter().skip(ch).step_by(3));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
