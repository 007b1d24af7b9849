//! Downstream classifier and top-1 evaluation through a quantiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::baselines::Baseline;
use crate::colour::RgbImage;
use crate::cqformer::{images_to_nchw, CqFormer};
use crate::dataset::Dataset;
use crate::error::{config_err, input_err, Result};
use crate::nn::{Binding, Conv2d, GroupNorm, Linear, ParamStore};

/// Maps image batches to class scores.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// One score vector per image.
    fn scores(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    /// Conv widths; every layer but the last is followed by 2×2 max pooling.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self { num_classes, widths: vec![32, 64, 128, 128], seed }
    }
}

/// Conv, group norm and ReLU blocks, global average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    config: ClassifierConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    head: Linear,
}

impl SmallCnn {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(config_err("a classifier needs at least 2 classes"));
        }
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(config_err("classifier widths must be non-empty and positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("conv{i}"), cin, w, 3, Conv2dSpec::new(1, 1), &mut rng));
            norms.push(GroupNorm::new(&mut params, &format!("conv{i}.norm"), w, crate::cqformer::NORM_GROUPS));
            cin = w;
        }
        let head = Linear::new(&mut params, "head", cin, config.num_classes, true, &mut rng);
        Ok(Self { config, params, convs, norms, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `x` `[N, 3, H, W]` → logits `[N, K]`. Pooling is skipped once the
    /// feature map is a single pixel.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, p, h);
            if let Some(n) = self.norms.get(i) {
                h = n.forward(g, p, h);
            }
            h = g.relu(h);
            let s = g.shape(h);
            if i < last && s[2] >= 2 && s[3] >= 2 {
                h = g.max_pool2(h);
            }
        }
        let h = g.global_avg_pool(h);
        self.head.forward(g, p, h)
    }
}

impl Classifier for SmallCnn {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn scores(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let first = images.first().ok_or_else(|| input_err("empty image batch"))?;
        if images.iter().any(|i| i.height() != first.height() || i.width() != first.width()) {
            return Err(input_err("images in a batch must share dimensions"));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images_to_nchw(images));
        let logits = self.forward(&mut g, &p, x);
        Ok(g.value(logits).data().chunks_exact(self.config.num_classes).map(<[f64]>::to_vec).collect())
    }
}

/// How images are quantised before classification.
#[derive(Debug, Clone, Copy)]
pub enum Quantiser<'a> {
    /// No quantisation (upper bound).
    Bypass,
    Learned(&'a CqFormer),
    Classical(Baseline, usize),
}

impl Quantiser<'_> {
    pub fn apply(&self, images: &[RgbImage]) -> Result<Vec<RgbImage>> {
        match self {
            Quantiser::Bypass => Ok(images.to_vec()),
            Quantiser::Learned(model) => Ok(model.quantise_test_batch(images)?.into_iter().map(|(img, _, _)| img).collect()),
            Quantiser::Classical(b, c) => images
                .iter()
                .map(|img| {
                    let (p, m) = b.quantise(img, *c)?;
                    Ok(p.render(&m))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    /// Accuracy per class; `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub samples: usize,
}

pub const EVAL_BATCH: usize = 64;

/// Top-1 accuracy of `classifier` on quantised test images.
pub fn evaluate_top1(classifier: &dyn Classifier, quantiser: Quantiser<'_>, data: &Dataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(input_err("cannot evaluate on an empty dataset"));
    }
    let k = classifier.num_classes();
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for chunk in data.items().chunks(EVAL_BATCH) {
        let images: Vec<RgbImage> = chunk.iter().map(|s| s.image.clone()).collect();
        let quantised = quantiser.apply(&images)?;
        let scores = classifier.scores(&quantised)?;
        for (s, sample) in scores.iter().zip(chunk) {
            if sample.label >= k {
                return Err(input_err(format!("label {} out of range for {k} classes", sample.label)));
            }
            total[sample.label] += 1;
            correct[sample.label] += usize::from(crate::cqformer::argmax_lowest(s) == sample.label);
        }
    }
    let samples = data.len();
    Ok(EvalResult {
        top1: correct.iter().sum::<usize>() as f64 / samples as f64,
        per_class: correct.iter().zip(&total).map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64)).collect(),
        samples,
    })
}
