//! Python module `cqlab`. Images cross the boundary as flat row-major RGB
//! float lists (`height * width * 3` values in [0, 1]) plus their shape.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use cqlab::baselines::Baseline;
use cqlab::colour::{self, HsvPixel, RgbImage};
use cqlab::cqformer::{CqFormer as Core, CqFormerConfig, EncoderConfig, IndexMap, Palette, ProbabilityMap};
use cqlab::dataset::synthetic_colour_classes;
use cqlab::harness::{metrics_csv, train_joint, TrainConfig, TrainOptions};
use cqlab::io::{self, Checkpoint};
use cqlab::objectives::{self, LossParts, LossWeights};

fn to_py(e: cqlab::Error) -> PyErr {
    match e {
        cqlab::Error::Config(_) | cqlab::Error::Input(_) => PyValueError::new_err(e.to_string()),
        cqlab::Error::Io(_) | cqlab::Error::Load { .. } => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<RgbImage> {
    RgbImage::new(height, width, data).map_err(to_py)
}

fn palette_rows(p: &Palette) -> Vec<[f64; 3]> {
    p.colours.clone()
}

#[pyfunction]
fn hsv_squared_distance(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    colour::hsv_squared_distance(HsvPixel::new(a.0, a.1, a.2), HsvPixel::new(b.0, b.1, b.2))
}

/// `(h, s, v)` with hue in radians.
#[pyfunction]
fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let p = colour::rgb_pixel_to_hsv(rgb);
    (p.h, p.s, p.v)
}

#[pyfunction]
fn diversity_reg(probs: Vec<f64>, height: usize, width: usize, colours: usize) -> PyResult<f64> {
    if colours == 0 || probs.len() != height * width * colours {
        return Err(PyValueError::new_err("probs must hold height * width * colours values"));
    }
    Ok(objectives::diversity_reg(&ProbabilityMap { height, width, colours, temperature: 1.0, data: probs }))
}

#[pyfunction]
fn intra_cluster_colour_reg(hsv: Vec<(f64, f64, f64)>, assignment: Vec<usize>, colours: usize) -> PyResult<f64> {
    let px: Vec<HsvPixel> = hsv.into_iter().map(|(h, s, v)| HsvPixel::new(h, s, v)).collect();
    objectives::intra_cluster_colour_reg(&px, &assignment, colours).map_err(to_py)
}

#[pyfunction]
fn perceptual_loss(quantised: Vec<f64>, original: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    objectives::perceptual_loss(&image(quantised, height, width)?, &image(original, height, width)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (l_m, r_colour, r_diversity, l_perceptual, alpha=1.0, beta=0.3, gamma=1.0))]
fn total_loss(l_m: f64, r_colour: f64, r_diversity: f64, l_perceptual: f64, alpha: f64, beta: f64, gamma: f64) -> PyResult<f64> {
    let w = LossWeights::new(alpha, beta, gamma).map_err(to_py)?;
    Ok(objectives::total_loss(&LossParts { l_m, r_colour, r_diversity, l_perceptual }, &w).map_err(to_py)?.l_total)
}

/// `method` is one of `mediancut`, `mediancut-dither`, `octree`.
/// Returns `(palette, index)`.
#[pyfunction]
fn quantise_baseline(data: Vec<f64>, height: usize, width: usize, method: &str, colours: usize) -> PyResult<(Vec<[f64; 3]>, Vec<usize>)> {
    let b: Baseline = method.parse().map_err(to_py)?;
    let (pal, idx) = b.quantise(&image(data, height, width)?, colours).map_err(to_py)?;
    Ok((palette_rows(&pal), idx.data))
}

#[pyfunction]
fn encode_indexed_png<'py>(py: Python<'py>, index: Vec<usize>, height: usize, width: usize, palette: Vec<[f64; 3]>) -> PyResult<Bound<'py, PyBytes>> {
    let pal = Palette::new(palette).map_err(to_py)?;
    let idx = IndexMap::new(height, width, pal.len(), index).map_err(to_py)?;
    Ok(PyBytes::new(py, &io::encode_indexed_png(&idx, &pal).map_err(to_py)?))
}

/// Returns `(index, height, width, palette_rgb8, bit_depth)`.
#[pyfunction]
fn decode_indexed_png(data: &[u8]) -> PyResult<(Vec<usize>, usize, usize, Vec<[u8; 3]>, u8)> {
    let d = io::decode_indexed_png(data).map_err(to_py)?;
    Ok((d.index.data, d.index.height, d.index.width, d.palette, d.bit_depth))
}

/// Trains on the synthetic four-hue dataset and returns the metrics CSV.
/// `config` is TrainConfig TOML; the last `holdout` images are evaluated.
#[pyfunction]
#[pyo3(signature = (config, images=400, side=32, holdout=100, data_seed=7))]
fn train_synthetic(py: Python<'_>, config: &str, images: usize, side: usize, holdout: usize, data_seed: u64) -> PyResult<(String, CqFormer)> {
    let cfg = TrainConfig::from_toml(config).map_err(to_py)?;
    if holdout == 0 || holdout >= images {
        return Err(PyValueError::new_err("holdout must be between 1 and images - 1"));
    }
    let trainer = py
        .detach(|| {
            let (train, test) = synthetic_colour_classes(images, side, data_seed).split_at(images - holdout);
            train_joint(&cfg, &train, Some(&test), &TrainOptions::default())
        })
        .map_err(to_py)?;
    Ok((metrics_csv(&trainer.history), CqFormer { inner: trainer.quantiser }))
}

/// The learned quantiser.
#[pyclass(module = "cqlab")]
struct CqFormer {
    inner: Core,
}

#[pymethods]
impl CqFormer {
    #[new]
    #[pyo3(signature = (colours=4, query_dim=64, widths=(24, 48, 96), seed=0))]
    fn new(colours: usize, query_dim: usize, widths: (usize, usize, usize), seed: u64) -> PyResult<Self> {
        let config = CqFormerConfig {
            colours,
            query_dim,
            encoder: EncoderConfig::UNet { widths: [widths.0, widths.1, widths.2] },
            seed,
            ..CqFormerConfig::default()
        };
        Ok(Self { inner: Core::new(config).map_err(to_py)? })
    }

    /// Loads the quantiser half of a `.cqck` checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(std::path::Path::new(path)).map_err(to_py)?;
        Ok(Self { inner: ck.quantiser().map_err(to_py)? })
    }

    #[getter]
    fn colours(&self) -> usize {
        self.inner.colours()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// Hard quantisation: `(quantised, index, palette)`.
    fn quantise(&self, data: Vec<f64>, height: usize, width: usize) -> PyResult<(Vec<f64>, Vec<usize>, Vec<[f64; 3]>)> {
        let (out, idx, pal) = self.inner.quantise_test(&image(data, height, width)?).map_err(to_py)?;
        Ok((out.into_data(), idx.data, palette_rows(&pal)))
    }

    /// Soft quantisation at temperature `tau`: `(quantised, probs, palette)`,
    /// probs flat as `height * width * colours`.
    #[pyo3(signature = (data, height, width, tau=0.01))]
    fn quantise_train(&self, data: Vec<f64>, height: usize, width: usize, tau: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<[f64; 3]>)> {
        if !(tau > 0.0) {
            return Err(PyValueError::new_err("tau must be positive"));
        }
        let (out, m, pal) = self.inner.quantise_train(&image(data, height, width)?, tau).map_err(to_py)?;
        Ok((out.into_data(), m.data, palette_rows(&pal)))
    }

    fn __repr__(&self) -> String {
        format!("CqFormer(colours={}, parameters={})", self.inner.colours(), self.inner.params().num_scalars())
    }
}

#[pymodule]
#[pyo3(name = "cqlab")]
fn cqlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CqFormer>()?;
    m.add_function(wrap_pyfunction!(hsv_squared_distance, m)?)?;
    m.add_function(wrap_pyfunction!(rgb_to_hsv, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_reg, m)?)?;
    m.add_function(wrap_pyfunction!(intra_cluster_colour_reg, m)?)?;
    m.add_function(wrap_pyfunction!(perceptual_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(quantise_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(encode_indexed_png, m)?)?;
    m.add_function(wrap_pyfunction!(decode_indexed_png, m)?)?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_matches_cone_geometry() {
        let d = hsv_squared_distance((0.0, 1.0, 1.0), (std::f64::consts::PI, 1.0, 1.0));
        assert!((d - 4.0).abs() < 1e-12);
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), (0.0, 1.0, 1.0));
    }

    #[test]
    fn baseline_and_png_round_trip() {
        let data: Vec<f64> = (0..4 * 4).flat_map(|i| if i % 2 == 0 { [0.0, 0.0, 0.0] } else { [1.0, 1.0, 1.0] }).collect();
        let (pal, idx) = quantise_baseline(data, 4, 4, "mediancut", 2).unwrap();
        assert_eq!(pal.len(), 2);
        let bytes = io::encode_indexed_png(&IndexMap::new(4, 4, 2, idx.clone()).unwrap(), &Palette::new(pal).unwrap()).unwrap();
        let (back, h, w, _, depth) = decode_indexed_png(&bytes).unwrap();
        assert_eq!((back, h, w, depth), (idx, 4, 4, 1));
    }

    #[test]
    fn shapes_are_checked() {
        assert!(diversity_reg(vec![0.5; 3], 1, 1, 2).is_err());
        assert!(perceptual_loss(vec![0.0; 3], vec![0.0; 6], 1, 1).is_err());
        assert!(quantise_baseline(vec![0.0; 12], 2, 2, "kmeans", 2).is_err());
    }

    #[test]
    fn class_quantises_to_palette_rows() {
        let q = CqFormer::new(4, 8, (4, 8, 8), 1).unwrap();
        let data: Vec<f64> = (0..8 * 8 * 3).map(|i| (i % 7) as f64 / 6.0).collect();
        let (out, idx, pal) = q.quantise(data.clone(), 8, 8).unwrap();
        for (i, px) in out.chunks(3).enumerate() {
            assert_eq!(px, pal[idx[i]]);
        }
        let (_, probs, _) = q.quantise_train(data, 8, 8, 0.5).unwrap();
        assert_eq!(probs.len(), 8 * 8 * 4);
        assert!(q.__repr__().starts_with("CqFormer(colours=4"));
    }
}
