//! Loss terms: the machine task loss, the perceptual-structure regularisers
//! and the two colour-naming embedding losses.
//!
//! Each term exists twice: as a plain function over domain types (used for
//! analysis and reports) and as a graph builder used during training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph, Tensor, Var};
use crate::colour::{cone_to_hsv, hsv_squared_distance, hsv_to_cone, rgb_pixel_to_hsv, HsvPixel, RgbImage};
use crate::cqformer::{images_to_nchw, ProbabilityMap, TrainForward};
use crate::error::{config_err, input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.3, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    /// Machine loss only.
    pub fn machine_only() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(format!("loss weight {name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-cluster centres in cone coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCentroids {
    pub centres: Vec<[f64; 3]>,
}

impl ClusterCentroids {
    /// Fixed human (hue, value) centres with saturation forced to 1.
    pub fn from_human(centres: &[(f64, f64)]) -> Result<Self> {
        if centres.iter().any(|(h, v)| !h.is_finite() || !v.is_finite()) {
            return Err(input_err("human centres must be finite"));
        }
        Ok(Self { centres: centres.iter().map(|&(h, v)| hsv_to_cone(HsvPixel::new(h, 1.0, v))).collect() })
    }

    pub fn as_hsv(&self) -> Vec<HsvPixel> {
        self.centres.iter().map(|&c| cone_to_hsv(c)).collect()
    }
}

/// Scalar loss values of one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_m: f64,
    pub r_colour: f64,
    pub r_diversity: f64,
    pub l_perceptual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_m: f64,
    pub r_colour: f64,
    pub r_diversity: f64,
    pub l_perceptual: f64,
    pub l_total: f64,
    /// L2 norm of the gradient per parameter group, when computed.
    pub grad_norms: Vec<(String, f64)>,
}

/// Softmax cross-entropy of one logit vector against label `y`.
pub fn machine_loss(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(input_err(format!("label {y} out of range for {} classes", logits.len())));
    }
    Ok(log_sum_exp(logits, 1.0) - logits[y])
}

/// Cone-space centroid of each cluster (`None` for empty clusters).
pub fn cluster_centroids(img_hsv: &[HsvPixel], assignment: &[usize], colours: usize) -> Result<Vec<Option<[f64; 3]>>> {
    if img_hsv.len() != assignment.len() {
        return Err(input_err("assignment length does not match pixel count"));
    }
    let mut sums = vec![[0.0; 3]; colours];
    let mut counts = vec![0usize; colours];
    for (&p, &c) in img_hsv.iter().zip(assignment) {
        if c >= colours {
            return Err(input_err(format!("colour index {c} out of range for {colours} colours")));
        }
        let x = hsv_to_cone(p);
        for k in 0..3 {
            sums[c][k] += x[k];
        }
        counts[c] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.map(|v| v / n as f64)))
        .collect())
}

/// Mean over clusters of the mean squared HSV distance to the cluster
/// centroid. Empty clusters contribute 0.
pub fn intra_cluster_colour_reg(img_hsv: &[HsvPixel], assignment: &[usize], colours: usize) -> Result<f64> {
    let centroids: Vec<Option<HsvPixel>> =
        cluster_centroids(img_hsv, assignment, colours)?.into_iter().map(|c| c.map(cone_to_hsv)).collect();
    Ok(fixed_centre_reg(img_hsv, assignment, &centroids, false))
}

fn fixed_centre_reg(img_hsv: &[HsvPixel], assignment: &[usize], centres: &[Option<HsvPixel>], unit_saturation: bool) -> f64 {
    let c = centres.len();
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (&p, &k) in img_hsv.iter().zip(assignment) {
        let Some(mu) = centres[k] else { continue };
        let p = if unit_saturation { HsvPixel::new(p.h, 1.0, p.v) } else { p };
        sums[k] += hsv_squared_distance(p, mu);
        counts[k] += 1;
    }
    sums.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(s, &n)| s / n as f64).sum::<f64>() / c as f64
}

/// `log₂C·(1 − mean_c max_pixels m[·, c])`.
pub fn diversity_reg(m: &ProbabilityMap) -> f64 {
    let c = m.colours;
    let mut max = vec![0.0f64; c];
    for px in m.data.chunks_exact(c) {
        for (a, &b) in max.iter_mut().zip(px) {
            *a = a.max(b);
        }
    }
    (c as f64).log2() * (1.0 - max.iter().sum::<f64>() / c as f64)
}

pub fn perceptual_loss(quantised: &RgbImage, original: &RgbImage) -> Result<f64> {
    quantised.mse(original)
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    Ok(LossReport {
        l_m: parts.l_m,
        r_colour: parts.r_colour,
        r_diversity: parts.r_diversity,
        l_perceptual: parts.l_perceptual,
        l_total: parts.l_m + w.alpha * parts.r_colour + w.beta * parts.r_diversity + w.gamma * parts.l_perceptual,
        grad_norms: Vec::new(),
    })
}

/// `L_M` plus the pixel-averaged cross-entropy of `m_τ` against the human
/// per-pixel term distributions (`H×W×C`, row-major).
pub fn full_embedding_loss(m_tau: &ProbabilityMap, m_human: &[f64], logits: &[f64], y: usize) -> Result<f64> {
    if m_human.len() != m_tau.data.len() {
        return Err(input_err(format!(
            "human map has {} entries, expected {}",
            m_human.len(),
            m_tau.data.len()
        )));
    }
    Ok(machine_loss(logits, y)? + embedding_cross_entropy(&m_tau.data, m_human, m_tau.colours))
}

pub(crate) fn embedding_cross_entropy(pred: &[f64], target: &[f64], colours: usize) -> f64 {
    let pixels = pred.len() / colours;
    let mut total = 0.0;
    for (q, t) in pred.iter().zip(target) {
        if *t > 0.0 {
            total -= t * q.max(f64::MIN_POSITIVE).ln();
        }
    }
    total / pixels as f64
}

/// `L_M` plus the colour regulariser measured against fixed human
/// (hue, value) centres, saturation forced to 1 on both sides.
pub fn central_embedding_loss(
    img_hsv: &[HsvPixel],
    assignment: &[usize],
    human_centres: &[(f64, f64)],
    logits: &[f64],
    y: usize,
) -> Result<f64> {
    if img_hsv.len() != assignment.len() {
        return Err(input_err("assignment length does not match pixel count"));
    }
    if let Some(&bad) = assignment.iter().find(|&&k| k >= human_centres.len()) {
        return Err(input_err(format!("colour index {bad} out of range for {} centres", human_centres.len())));
    }
    let centres: Vec<Option<HsvPixel>> = human_centres.iter().map(|&(h, v)| Some(HsvPixel::new(h, 1.0, v))).collect();
    Ok(machine_loss(logits, y)? + fixed_centre_reg(img_hsv, assignment, &centres, true))
}

/// Graph nodes of the perceptual-structure terms.
#[derive(Debug, Clone, Copy)]
pub struct GraphTerms {
    pub r_colour: Var,
    pub r_diversity: Var,
    pub l_perceptual: Var,
}

/// Builds the regularisers for one training forward pass over `images`.
///
/// Cluster membership for the colour term is the soft assignment `m_τ`, so
/// its gradient reaches the encoder; with one-hot memberships the value
/// equals [`intra_cluster_colour_reg`].
pub fn graph_terms(g: &mut Graph, fwd: &TrainForward, images: &[RgbImage]) -> GraphTerms {
    let points = images_to_cone(images);
    let r_colour = g.centroid_dispersion(fwd.probs, &points);
    let r_diversity = g.diversity(fwd.probs);
    let l_perceptual = g.mse(fwd.quantised, &images_to_nchw(images));
    GraphTerms { r_colour, r_diversity, l_perceptual }
}

/// Colour term against fixed human centres for the central embedding.
pub fn graph_central_term(g: &mut Graph, probs: Var, images: &[RgbImage], centres: &ClusterCentroids) -> Var {
    let c = centres.centres.len();
    let dist: Vec<f64> = images
        .iter()
        .flat_map(|img| img.pixels())
        .flat_map(|px| {
            let hsv = rgb_pixel_to_hsv(px);
            let x = hsv_to_cone(HsvPixel::new(hsv.h, 1.0, hsv.v));
            centres.centres.iter().map(move |mu| (0..3).map(|k| (x[k] - mu[k]).powi(2)).sum::<f64>())
        })
        .collect();
    let p = images[0].num_pixels();
    g.dispersion(probs, &Tensor::new(vec![images.len(), p, c], dist))
}

/// Cone-coordinate pixels `[N, H·W, 3]`.
pub(crate) fn images_to_cone(images: &[RgbImage]) -> Tensor {
    let hw = images[0].num_pixels();
    let data = images.iter().flat_map(|img| img.pixels().flat_map(|p| hsv_to_cone(rgb_pixel_to_hsv(p)))).collect();
    Tensor::new(vec![images.len(), hw, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colour::rgb_to_hsv;
    use crate::cqformer::{CqFormer, CqFormerConfig, EncoderConfig, PaletteMode};
    use crate::nn::{Linear, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pmap(h: usize, w: usize, c: usize, data: Vec<f64>) -> ProbabilityMap {
        ProbabilityMap { height: h, width: w, colours: c, temperature: 1.0, data }
    }

    #[test]
    fn machine_loss_examples() {
        assert!((machine_loss(&[2.0, 1.0, 0.0], 0).unwrap() - 0.4076).abs() < 1e-4);
        assert!((machine_loss(&[0.3; 5], 2).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(machine_loss(&[1e4, 0.0], 0).unwrap() < 1e-12);
        assert!(machine_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn colour_reg_examples() {
        let grey = |v| HsvPixel::new(0.0, 0.0, v);
        assert_eq!(intra_cluster_colour_reg(&[grey(0.2), grey(0.2), grey(0.7)], &[0, 0, 1], 2).unwrap(), 0.0);
        let r = intra_cluster_colour_reg(&[grey(0.0), grey(1.0)], &[0, 0], 1).unwrap();
        assert!((r - 0.25).abs() < 1e-12);
        // Empty cluster 1 contributes 0 but still counts towards the mean.
        let r = intra_cluster_colour_reg(&[grey(0.0), grey(1.0)], &[0, 0], 2).unwrap();
        assert!((r - 0.125).abs() < 1e-12);
        assert!(intra_cluster_colour_reg(&[grey(0.0)], &[3], 2).is_err());
    }

    fn brute_force_colour_reg(px: &[HsvPixel], a: &[usize], c: usize) -> f64 {
        let cone: Vec<[f64; 3]> = px.iter().map(|&p| {
            let (x, y) = (p.s * p.v * p.h.cos(), p.s * p.v * p.h.sin());
            [x, y, p.v]
        }).collect();
        let mut total = 0.0;
        for k in 0..c {
            let members: Vec<&[f64; 3]> = cone.iter().zip(a).filter(|(_, &j)| j == k).map(|(x, _)| x).collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let mu: Vec<f64> = (0..3).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / n).collect();
            total += members.iter().map(|m| (0..3).map(|d| (m[d] - mu[d]).powi(2)).sum::<f64>()).sum::<f64>() / n;
        }
        total / c as f64
    }

    #[test]
    fn colour_reg_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let px: Vec<HsvPixel> = (0..16)
                .map(|_| HsvPixel::new(rng.random_range(0.0..2.0 * PI), rng.random(), rng.random()))
                .collect();
            let a: Vec<usize> = (0..16).map(|_| rng.random_range(0..3)).collect();
            let r = intra_cluster_colour_reg(&px, &a, 3).unwrap();
            assert!((r - brute_force_colour_reg(&px, &a, 3)).abs() < 1e-9);
        }
    }

    #[test]
    fn diversity_examples() {
        let one_hot = pmap(1, 4, 4, (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect());
        assert_eq!(diversity_reg(&one_hot), 0.0);
        assert!((diversity_reg(&pmap(2, 2, 4, vec![0.25; 16])) - 1.5).abs() < 1e-12);
        let m = pmap(1, 2, 2, vec![1.0, 0.0, 0.5, 0.5]);
        assert!((diversity_reg(&m) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perceptual_examples() {
        let a = RgbImage::filled(4, 4, [0.3, 0.4, 0.5]).unwrap();
        assert_eq!(perceptual_loss(&a, &a).unwrap(), 0.0);
        let zeros = RgbImage::filled(2, 3, [0.0; 3]).unwrap();
        let ones = RgbImage::filled(2, 3, [1.0; 3]).unwrap();
        assert_eq!(perceptual_loss(&zeros, &ones).unwrap(), 1.0);
        let b = RgbImage::filled(4, 4, [0.4, 0.5, 0.6]).unwrap();
        assert!((perceptual_loss(&b, &a).unwrap() - 0.01).abs() < 1e-12);
        assert!(perceptual_loss(&zeros, &a).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts { l_m: 1.0, r_colour: 0.5, r_diversity: 0.25, l_perceptual: 0.01 };
        let r = total_loss(&parts, &LossWeights::default()).unwrap();
        assert!((r.l_total - 1.585).abs() < 1e-12);
        let r = total_loss(&parts, &LossWeights::machine_only()).unwrap();
        assert_eq!(r.l_total, 1.0);
        let only_m = LossParts { l_m: 0.7, ..Default::default() };
        assert_eq!(total_loss(&only_m, &LossWeights::default()).unwrap().l_total, 0.7);
        assert!(total_loss(&parts, &LossWeights { alpha: -0.1, beta: 0.0, gamma: 0.0 }).is_err());
        assert!(LossWeights::new(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn full_embedding_examples() {
        let logits = [0.0, 0.0];
        let base = 2f64.ln();
        let m = pmap(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let l = full_embedding_loss(&m, &m.data.clone(), &logits, 0).unwrap();
        assert!((l - base).abs() < 1e-12);
        let uniform = pmap(1, 1, 3, vec![1.0 / 3.0; 3]);
        let l = full_embedding_loss(&uniform, &[1.0 / 3.0; 3], &logits, 1).unwrap();
        assert!((l - base - 3f64.ln()).abs() < 1e-12);
        let l = full_embedding_loss(&uniform, &[0.09, 0.04, 0.87], &logits, 1).unwrap();
        assert!((l - base - 1.0986).abs() < 1e-4);
        assert!(full_embedding_loss(&uniform, &[0.5, 0.5], &logits, 1).is_err());
    }

    #[test]
    fn central_embedding_examples() {
        let logits = [5.0, 0.0, 0.0];
        let base = machine_loss(&logits, 0).unwrap();
        let px = [HsvPixel::new(1.0, 1.0, 0.6), HsvPixel::new(4.0, 1.0, 0.2)];
        let l = central_embedding_loss(&px, &[0, 1], &[(1.0, 0.6), (4.0, 0.2)], &logits, 0).unwrap();
        assert!((l - base).abs() < 1e-12);
        let l = central_embedding_loss(&[HsvPixel::new(0.0, 0.3, 1.0)], &[0], &[(PI, 1.0)], &logits, 0).unwrap();
        assert!((l - base - 4.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let px: Vec<HsvPixel> = (0..4).map(|_| HsvPixel::new(rng.random_range(0.0..6.0), rng.random(), rng.random())).collect();
        let centres: [(f64, f64); 2] = [(0.5, 0.5), (3.0, 0.9)];
        let a = [0, 1, 1, 0];
        let mut oracle = 0.0;
        for k in 0..2 {
            let (h, v) = centres[k];
            let ds: Vec<f64> = px
                .iter()
                .zip(&a)
                .filter(|(_, &j)| j == k)
                .map(|(p, _)| (p.v * p.h.cos() - v * h.cos()).powi(2) + (p.v * p.h.sin() - v * h.sin()).powi(2) + (p.v - v).powi(2))
                .collect();
            oracle += ds.iter().sum::<f64>() / ds.len() as f64;
        }
        let l = central_embedding_loss(&px, &a, &centres, &logits, 0).unwrap();
        assert!((l - base - oracle / 2.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_beta_doubles_diversity_contribution() {
        let parts = LossParts { l_m: 0.3, r_colour: 0.2, r_diversity: 0.7, l_perceptual: 0.05 };
        let a = total_loss(&parts, &LossWeights::new(1.0, 0.3, 1.0).unwrap()).unwrap();
        let b = total_loss(&parts, &LossWeights::new(1.0, 0.6, 1.0).unwrap()).unwrap();
        assert!(((b.l_total - a.l_total) - 0.3 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn graph_terms_match_plain_functions_for_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = RgbImage::new(4, 4, (0..48).map(|_| rng.random()).collect()).unwrap();
        let assignment: Vec<usize> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let one_hot: Vec<f64> = assignment.iter().flat_map(|&k| (0..3).map(move |j| if j == k { 1.0 } else { 0.0 })).collect();
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![1, 16, 3], one_hot.clone()));
        let r = g.centroid_dispersion(m, &images_to_cone(std::slice::from_ref(&img)));
        let plain = intra_cluster_colour_reg(&rgb_to_hsv(&img), &assignment, 3).unwrap();
        assert!((g.value(r).item() - plain).abs() < 1e-12);
        let d = g.diversity(m);
        assert!((g.value(d).item() - diversity_reg(&pmap(4, 4, 3, one_hot))).abs() < 1e-12);

        let centres = ClusterCentroids::from_human(&[(0.3, 0.4), (2.0, 0.8), (5.0, 0.1)]).unwrap();
        let rc = graph_central_term(&mut g, m, std::slice::from_ref(&img), &centres);
        let l = central_embedding_loss(&rgb_to_hsv(&img), &assignment, &[(0.3, 0.4), (2.0, 0.8), (5.0, 0.1)], &[0.0], 0).unwrap();
        assert!((g.value(rc).item() - l).abs() < 1e-12);
    }

    /// Full objective on a 4×4 input through the quantiser and a linear
    /// classifier; analytic gradients against central differences.
    #[test]
    fn total_objective_gradient_check() {
        let cfg = CqFormerConfig { colours: 3, query_dim: 4, encoder: EncoderConfig::UNet { widths: [2, 3, 3] }, palette_mode: PaletteMode::Branch, seed: 5 };
        let mut model = CqFormer::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = RgbImage::new(4, 4, (0..48).map(|_| rng.random()).collect()).unwrap();
        let human: Vec<f64> = (0..16).flat_map(|_| {
            let a: f64 = rng.random_range(0.1..1.0);
            let b: f64 = rng.random_range(0.1..1.0);
            let s = a + b + 0.5;
            [a / s, b / s, 0.5 / s]
        }).collect();
        let mut cls_store = ParamStore::new();
        let head = Linear::new(&mut cls_store, "head", 48, 2, true, &mut rng);
        let w = LossWeights { alpha: 1.0, beta: 0.3, gamma: 1.0 };
        let tau = 0.7;

        let loss_of = |model: &CqFormer, g: &mut Graph| -> (Var, crate::nn::Binding) {
            let p = model.params().bind(g, true);
            let c = cls_store.bind(g, false);
            let fwd = model.forward_train(g, &p, std::slice::from_ref(&img), tau).unwrap();
            let t = graph_terms(g, &fwd, std::slice::from_ref(&img));
            let flat = g.reshape(fwd.quantised, &[1, 48]);
            let logits = head.forward(g, &c, flat);
            let lm = g.cross_entropy(logits, &[1]);
            let emb = g.soft_cross_entropy(fwd.pixel_logits, &Tensor::new(vec![1, 16, 3], human.clone()), 1.0 / tau);
            let total = g.weighted_sum(&[(lm, 1.0), (t.r_colour, w.alpha), (t.r_diversity, w.beta), (t.l_perceptual, w.gamma), (emb, 1.0)]);
            (total, p)
        };
        let mut g = Graph::new();
        let (total, p) = loss_of(&model, &mut g);
        let grads = p.gradients(model.params(), &g.backward(total));
        let h = 1e-6;
        let mut checked = 0;
        let n_params = model.params().len();
        for pi in 0..n_params {
            let len = model.params().tensors()[pi].numel();
            for &j in &[0, len / 2, len - 1] {
                let orig = model.params().tensors()[pi].data()[j];
                let mut eval = |v: f64| {
                    model.params_mut().tensors_mut()[pi].data_mut()[j] = v;
                    let mut g = Graph::new();
                    let (t, _) = loss_of(&model, &mut g);
                    g.value(t).item()
                };
                let plus = eval(orig + h);
                let minus = eval(orig - h);
                model.params_mut().tensors_mut()[pi].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads[pi].data()[j];
                let scale = numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(
                    (numeric - analytic).abs() / scale < 1e-4,
                    "{}[{j}]: analytic {analytic} numeric {numeric}",
                    model.params().iter().nth(pi).unwrap().0
                );
                checked += 1;
            }
        }
        assert!(checked >= 3 * n_params);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn diversity_bounds(raw in proptest::collection::vec(0.01f64..1.0, 4 * 3)) {
            let data: Vec<f64> = raw.chunks(3).flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            }).collect();
            let d = diversity_reg(&pmap(2, 2, 3, data));
            prop_assert!(d >= -1e-12);
            prop_assert!(d <= 3f64.log2() * (1.0 - 1.0 / 3.0) + 1e-12);
        }

        #[test]
        fn colour_reg_non_negative(
            px in proptest::collection::vec((0.0f64..6.28, 0.0f64..=1.0, 0.0f64..=1.0), 9),
            a in proptest::collection::vec(0usize..3, 9),
        ) {
            let px: Vec<HsvPixel> = px.into_iter().map(|(h, s, v)| HsvPixel::new(h, s, v)).collect();
            let r = intra_cluster_colour_reg(&px, &a, 3).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((r - brute_force_colour_reg(&px, &a, 3)).abs() < 1e-9);
        }

        #[test]
        fn embedding_minimised_at_target(
            t in proptest::collection::vec(0.05f64..1.0, 3),
            q in proptest::collection::vec(0.05f64..1.0, 3),
        ) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (t, q) = (norm(&t), norm(&q));
            let at_target = embedding_cross_entropy(&t, &t, 3);
            prop_assert!(embedding_cross_entropy(&q, &t, 3) >= at_target - 1e-12);
        }
    }
}
