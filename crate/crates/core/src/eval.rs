//! Attack effectiveness metrics: fooling ratio, cross-model transfer, and
//! robustness under input-smoothing defenses.
//!
//! A sample counts as fooled when the predicted label changes between the
//! clean and the perturbed pipeline. Perturbed inputs are clamped to the
//! valid [0,1] range before the model (the clamp policy is recorded in every
//! report); when a defense filter is configured it is applied to both the
//! clean and the perturbed pass.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{ModelError, ModelGraph};
use crate::tensor::{Tensor, TensorError};
use crate::train::argmax;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("perturbation shape {got:?} does not match model input {expected:?}")]
    Geometry {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid defense filter: {0}")]
    InvalidFilter(String),
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] crate::io::IoFormatError),
}

/// Input-smoothing defense applied identically to both evaluation passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Defense {
    None,
    /// Gaussian blur with the given standard deviation and kernel radius,
    /// edge-replicate boundary.
    Gaussian { sigma: f64, radius: usize },
    /// k x k median filter (k odd), edge-replicate boundary.
    Median { k: usize },
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defense::None => write!(f, "none"),
            Defense::Gaussian { sigma, radius } => {
                write!(f, "gaussian(sigma={sigma},radius={radius})")
            }
            Defense::Median { k } => write!(f, "median(k={k})"),
        }
    }
}

impl Defense {
    /// Parses `none`, `gaussian:SIGMA,RADIUS`, or `median:K`.
    pub fn parse(text: &str) -> Result<Defense, EvalError> {
        let bad = |m: String| EvalError::InvalidFilter(m);
        if text == "none" {
            return Ok(Defense::None);
        }
        if let Some(rest) = text.strip_prefix("gaussian:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 2 {
                return Err(bad(format!("want gaussian:SIGMA,RADIUS, got '{text}'")));
            }
            let sigma: f64 = parts[0].parse().map_err(|_| bad(format!("bad sigma in '{text}'")))?;
            let radius: usize =
                parts[1].parse().map_err(|_| bad(format!("bad radius in '{text}'")))?;
            return Ok(Defense::Gaussian { sigma, radius });
        }
        if let Some(rest) = text.strip_prefix("median:") {
            let k: usize = rest.parse().map_err(|_| bad(format!("bad k in '{text}'")))?;
            return Ok(Defense::Median { k });
        }
        Err(bad(format!(
            "unknown defense '{text}' (want none|gaussian:SIGMA,RADIUS|median:K)"
        )))
    }
}

/// Applies a defense filter to a `[C,H,W]` image.
pub fn apply_defense(image: &Tensor<f64>, defense: &Defense) -> Result<Tensor<f64>, EvalError> {
    if image.shape().len() != 3 {
        return Err(EvalError::Geometry {
            expected: vec![3],
            got: image.shape().to_vec(),
        });
    }
    match *defense {
        Defense::None => Ok(image.clone()),
        Defense::Gaussian { sigma, radius } => {
            if !(sigma > 0.0) {
                return Err(EvalError::InvalidFilter("gaussian sigma must be > 0".into()));
            }
            let size = 2 * radius + 1;
            let mut weights = vec![0.0f64; size * size];
            let mut total = 0.0;
            for dy in 0..size {
                for dx in 0..size {
                    let (fy, fx) = (dy as f64 - radius as f64, dx as f64 - radius as f64);
                    let w = (-(fy * fy + fx * fx) / (2.0 * sigma * sigma)).exp();
                    weights[dy * size + dx] = w;
                    total += w;
                }
            }
            for w in &mut weights {
                *w /= total;
            }
            Ok(convolve_replicate(image, &weights, radius))
        }
        Defense::Median { k } => {
            if k % 2 == 0 || k == 0 {
                return Err(EvalError::InvalidFilter("median k must be odd".into()));
            }
            if k == 1 {
                // Single-element window: exact identity, no arithmetic.
                return Ok(image.clone());
            }
            let radius = k / 2;
            let s = image.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let mut out = image.clone();
            let mut window = Vec::with_capacity(k * k);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        window.clear();
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = (y + dy).saturating_sub(radius).min(h - 1);
                                let sx = (x + dx).saturating_sub(radius).min(w - 1);
                                window.push(image.data()[(ch * h + sy) * w + sx]);
                            }
                        }
                        window.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
                        out.data_mut()[(ch * h + y) * w + x] = window[window.len() / 2];
                    }
                }
            }
            Ok(out)
        }
    }
}

fn convolve_replicate(image: &Tensor<f64>, weights: &[f64], radius: usize) -> Tensor<f64> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let size = 2 * radius + 1;
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        let sy = (y + dy).saturating_sub(radius).min(h - 1);
                        let sx = (x + dx).saturating_sub(radius).min(w - 1);
                        acc += weights[dy * size + dx] * image.data()[(ch * h + sy) * w + sx];
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// One evaluated (model, perturbation, defense) combination.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub model_id: String,
    pub uap_id: String,
    pub n_images: usize,
    pub fooling_ratio: f64,
    pub clean_accuracy: f64,
    pub perturbed_accuracy: f64,
    pub defense: Defense,
    /// Perturbed inputs are clamped to this range before the model.
    pub clamp: (f64, f64),
}

fn evaluate(
    model: &ModelGraph<f64>,
    model_id: &str,
    uap: &Tensor<f64>,
    uap_id: &str,
    dataset: &Dataset,
    defense: &Defense,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if uap.shape() != model.input_shape() {
        return Err(EvalError::Geometry {
            expected: model.input_shape().to_vec(),
            got: uap.shape().to_vec(),
        });
    }
    if dataset.image_shape() != model.input_shape() {
        return Err(EvalError::Geometry {
            expected: model.input_shape().to_vec(),
            got: dataset.image_shape().to_vec(),
        });
    }
    let k = model.class_count();
    // Index-ordered parallel map keeps aggregation deterministic.
    let per_image: Vec<Result<(bool, bool, bool), EvalError>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.image(i);
            let adv = x.add(uap)?.map(|v| v.clamp(0.0, 1.0));
            let clean_in = apply_defense(&x, defense)?;
            let adv_in = apply_defense(&adv, defense)?;
            let clean_logits = model.forward(&clean_in)?.logits;
            let adv_logits = model.forward(&adv_in)?.logits;
            let pred_clean = argmax(&clean_logits.data()[..k]);
            let pred_adv = argmax(&adv_logits.data()[..k]);
            let label = dataset.labels[i];
            Ok((
                pred_clean != pred_adv,
                pred_clean == label,
                pred_adv == label,
            ))
        })
        .collect();
    let mut fooled = 0usize;
    let mut clean_correct = 0usize;
    let mut adv_correct = 0usize;
    for r in per_image {
        let (f, c, a) = r?;
        fooled += f as usize;
        clean_correct += c as usize;
        adv_correct += a as usize;
    }
    let n = dataset.len() as f64;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        uap_id: uap_id.to_string(),
        n_images: dataset.len(),
        fooling_ratio: fooled as f64 / n,
        clean_accuracy: clean_correct as f64 / n,
        perturbed_accuracy: adv_correct as f64 / n,
        defense: *defense,
        clamp: (0.0, 1.0),
    })
}

/// Fraction of samples whose predicted label changes under the perturbation.
pub fn fooling_ratio(
    model: &ModelGraph<f64>,
    model_id: &str,
    uap: &Tensor<f64>,
    uap_id: &str,
    dataset: &Dataset,
) -> Result<EvalReport, EvalError> {
    evaluate(model, model_id, uap, uap_id, dataset, &Defense::None)
}

/// Fooling ratios under each defense; the first row is always the undefended
/// baseline.
pub fn robustness_table(
    model: &ModelGraph<f64>,
    model_id: &str,
    uap: &Tensor<f64>,
    uap_id: &str,
    dataset: &Dataset,
    defenses: &[Defense],
) -> Result<Vec<EvalReport>, EvalError> {
    let mut rows = vec![evaluate(
        model,
        model_id,
        uap,
        uap_id,
        dataset,
        &Defense::None,
    )?];
    for defense in defenses {
        if *defense == Defense::None {
            continue;
        }
        rows.push(evaluate(model, model_id, uap, uap_id, dataset, defense)?);
    }
    Ok(rows)
}

/// Cross-model fooling matrix: rows are source perturbations, columns are
/// victim models. Geometry mismatches mark the cell unavailable instead of
/// failing the run.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub uap_ids: Vec<String>,
    pub model_ids: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn transfer_matrix(
    models: &[(String, &ModelGraph<f64>)],
    uaps: &[(String, &Tensor<f64>)],
    dataset: &Dataset,
) -> Result<TransferMatrix, EvalError> {
    let mut cells = Vec::with_capacity(uaps.len());
    for (uap_id, uap) in uaps {
        let mut row = Vec::with_capacity(models.len());
        for (model_id, model) in models {
            match evaluate(model, model_id, uap, uap_id, dataset, &Defense::None) {
                Ok(report) => row.push(Some(report.fooling_ratio)),
                Err(EvalError::Geometry { .. }) => row.push(None),
                Err(other) => return Err(other),
            }
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        uap_ids: uaps.iter().map(|(id, _)| id.clone()).collect(),
        model_ids: models.iter().map(|(id, _)| id.clone()).collect(),
        cells,
    })
}

/// CSV with one row per report; floats use shortest round-trip formatting,
/// so identical results serialize byte-identically.
pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<(), EvalError> {
    let mut text =
        String::from("model_id,uap_id,n_images,fooling_ratio,clean_accuracy,perturbed_accuracy,defense,perturbed_clamp\n");
    for r in reports {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},[{};{}]\n",
            r.model_id,
            r.uap_id,
            r.n_images,
            r.fooling_ratio,
            r.clean_accuracy,
            r.perturbed_accuracy,
            r.defense,
            r.clamp.0,
            r.clamp.1,
        ));
    }
    std::fs::write(path, text).map_err(|e| crate::io::IoFormatError::io(path, e))?;
    Ok(())
}

pub fn write_transfer_csv(path: &Path, matrix: &TransferMatrix) -> Result<(), EvalError> {
    let mut text = String::from("uap");
    for m in &matrix.model_ids {
        text.push(',');
        text.push_str(m);
    }
    text.push('\n');
    for (uap_id, row) in matrix.uap_ids.iter().zip(&matrix.cells) {
        text.push_str(uap_id);
        for cell in row {
            text.push(',');
            match cell {
                Some(v) => text.push_str(&v.to_string()),
                None => text.push_str("NA"),
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| crate::io::IoFormatError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NodeKind;
    use crate::util::{gaussian_tensor, rng_from_seed};

    fn toy_model(seed: u64) -> ModelGraph<f64> {
        let mut rng = rng_from_seed(seed);
        let nodes = vec![
            (
                "flat".to_string(),
                NodeKind::<f64>::Flatten,
                vec!["input".to_string()],
            ),
            (
                "fc".to_string(),
                NodeKind::FullyConnected {
                    weight: gaussian_tensor::<f64>(&[3, 16], &mut rng),
                    bias: None,
                },
                vec!["flat".to_string()],
            ),
        ];
        ModelGraph::new(nodes, vec![1, 4, 4], 3).unwrap()
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let images = gaussian_tensor::<f64>(&[n, 1, 4, 4], &mut rng).map(|v| (v.abs()).min(1.0));
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new(images, labels).unwrap()
    }

    #[test]
    fn zero_perturbation_fools_nothing() {
        let model = toy_model(1);
        let data = toy_data(20, 2);
        let report =
            fooling_ratio(&model, "toy", &Tensor::zeros(&[1, 4, 4]), "zero", &data).unwrap();
        assert_eq!(report.fooling_ratio, 0.0);
        assert_eq!(report.clean_accuracy, report.perturbed_accuracy);
        assert_eq!(report.n_images, 20);
    }

    #[test]
    fn constant_logit_model_is_never_fooled() {
        let nodes = vec![
            (
                "flat".to_string(),
                NodeKind::<f64>::Flatten,
                vec!["input".to_string()],
            ),
            (
                "fc".to_string(),
                NodeKind::FullyConnected {
                    weight: Tensor::zeros(&[3, 16]),
                    bias: Some(Tensor::new(vec![3], vec![0.0, 2.0, 1.0]).unwrap()),
                },
                vec!["flat".to_string()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![1, 4, 4], 3).unwrap();
        let data = toy_data(15, 3);
        let mut rng = rng_from_seed(4);
        let uap = gaussian_tensor::<f64>(&[1, 4, 4], &mut rng).scale(0.2);
        let report = fooling_ratio(&model, "const", &uap, "rand", &data).unwrap();
        assert_eq!(report.fooling_ratio, 0.0);
    }

    #[test]
    fn median_k1_is_exact_identity() {
        let mut rng = rng_from_seed(5);
        let img = gaussian_tensor::<f64>(&[2, 5, 5], &mut rng);
        let out = apply_defense(&img, &Defense::Median { k: 1 }).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn gaussian_preserves_constant_images() {
        let img = Tensor::full(&[1, 6, 6], 0.37);
        let out = apply_defense(
            &img,
            &Defense::Gaussian {
                sigma: 1.0,
                radius: 2,
            },
        )
        .unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() <= 1e-12);
        }
    }

    #[test]
    fn median3_matches_sort_oracle_on_salt_noise() {
        // Salt noise: a few pixels spiked to 1 on a dark background.
        let mut img = Tensor::full(&[1, 6, 6], 0.1);
        for &p in &[0usize, 7, 14, 21, 35] {
            img.data_mut()[p] = 1.0;
        }
        let got = apply_defense(&img, &Defense::Median { k: 3 }).unwrap();
        // Direct per-pixel sort oracle with replicate boundary.
        for y in 0..6usize {
            for x in 0..6usize {
                let mut vals = Vec::new();
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sy = (y as i64 + dy).clamp(0, 5) as usize;
                        let sx = (x as i64 + dx).clamp(0, 5) as usize;
                        vals.push(img.data()[sy * 6 + sx]);
                    }
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(got.data()[y * 6 + x], vals[4], "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn even_median_k_is_invalid() {
        let img = Tensor::full(&[1, 3, 3], 0.0);
        assert!(matches!(
            apply_defense(&img, &Defense::Median { k: 2 }),
            Err(EvalError::InvalidFilter(_))
        ));
    }

    #[test]
    fn robustness_table_identity_row_equals_no_defense() {
        let model = toy_model(6);
        let data = toy_data(30, 7);
        let mut rng = rng_from_seed(8);
        let uap = gaussian_tensor::<f64>(&[1, 4, 4], &mut rng).scale(0.3);
        let rows = robustness_table(
            &model,
            "toy",
            &uap,
            "rand",
            &data,
            &[
                Defense::Median { k: 1 },
                Defense::Gaussian {
                    sigma: 1.0,
                    radius: 1,
                },
                Defense::Median { k: 3 },
            ],
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].defense, Defense::None);
        // median(k=1) row equals the no-defense row exactly.
        assert_eq!(rows[1].fooling_ratio, rows[0].fooling_ratio);
        assert_eq!(rows[1].clean_accuracy, rows[0].clean_accuracy);
        assert_eq!(rows[1].perturbed_accuracy, rows[0].perturbed_accuracy);
    }

    #[test]
    fn transfer_matrix_single_model_equals_fooling_ratio() {
        let model = toy_model(9);
        let data = toy_data(25, 10);
        let mut rng = rng_from_seed(11);
        let uap = gaussian_tensor::<f64>(&[1, 4, 4], &mut rng).scale(0.5);
        let direct = fooling_ratio(&model, "m", &uap, "u", &data).unwrap();
        let matrix = transfer_matrix(
            &[("m".to_string(), &model)],
            &[("u".to_string(), &uap)],
            &data,
        )
        .unwrap();
        assert_eq!(matrix.cells[0][0], Some(direct.fooling_ratio));
    }

    #[test]
    fn transfer_matrix_zero_row_and_geometry_mismatch() {
        let model = toy_model(12);
        let other = {
            let mut rng = rng_from_seed(13);
            let nodes = vec![
                (
                    "flat".to_string(),
                    NodeKind::<f64>::Flatten,
                    vec!["input".to_string()],
                ),
                (
                    "fc".to_string(),
                    NodeKind::FullyConnected {
                        weight: gaussian_tensor::<f64>(&[3, 9], &mut rng),
                        bias: None,
                    },
                    vec!["flat".to_string()],
                ),
            ];
            ModelGraph::new(nodes, vec![1, 3, 3], 3).unwrap()
        };
        let data = toy_data(12, 14);
        let zero = Tensor::<f64>::zeros(&[1, 4, 4]);
        let matrix = transfer_matrix(
            &[("a".to_string(), &model), ("b".to_string(), &other)],
            &[("zero".to_string(), &zero)],
            &data,
        )
        .unwrap();
        assert_eq!(matrix.cells[0][0], Some(0.0)); // zero perturbation
        assert_eq!(matrix.cells[0][1], None); // 3x3 model vs 4x4 data
    }

    #[test]
    fn reports_are_deterministic_and_serializable() {
        let model = toy_model(15);
        let data = toy_data(40, 16);
        let mut rng = rng_from_seed(17);
        let uap = gaussian_tensor::<f64>(&[1, 4, 4], &mut rng).scale(0.4);
        let a = fooling_ratio(&model, "m", &uap, "u", &data).unwrap();
        let b = fooling_ratio(&model, "m", &uap, "u", &data).unwrap();
        assert_eq!(a.fooling_ratio.to_bits(), b.fooling_ratio.to_bits());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_reports_csv(&path, &[a]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model_id,uap_id,n_images,fooling_ratio"));
        assert!(text.contains("[0;1]"));
    }
}
