//! File formats and toy dataset generators.
//!
//! Model files are JSON with one object per layer
//! (`{"latent_dim", "layers": [{"weight", "bias", "activation", "eta"?}],
//! "noise"?: {"sigma_x", "sigma_z"}}`); float round-trips are bit-faithful.
//! Datasets are headerless CSV — comma-separated, LF line endings, one
//! observation per row, every value printed with 17 significant digits
//! (which uniquely identifies a double).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, GenerativeNetwork, Layer, NoiseModel};
use crate::rng;
use rand::Rng;

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    eta: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct NoiseRepr {
    sigma_x: Vec<Vec<f64>>,
    sigma_z: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    latent_dim: usize,
    layers: Vec<LayerRepr>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    noise: Option<NoiseRepr>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidInput(format!(
            "{what}: rows must be non-empty and of equal length"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn activation_name(a: Activation) -> (&'static str, Option<f64>) {
    match a {
        Activation::Relu => ("relu", None),
        Activation::LeakyRelu { eta } => ("leaky_relu", Some(eta)),
        Activation::Abs => ("abs", None),
        Activation::Identity => ("identity", None),
    }
}

fn activation_from(name: &str, eta: Option<f64>) -> Result<Activation> {
    match (name, eta) {
        ("relu", None) => Ok(Activation::Relu),
        ("abs", None) => Ok(Activation::Abs),
        ("identity", None) => Ok(Activation::Identity),
        ("leaky_relu", Some(eta)) => Ok(Activation::LeakyRelu { eta }),
        ("leaky_relu", None) => Err(Error::InvalidInput(
            "activation leaky_relu requires an \"eta\" field".into(),
        )),
        (other, Some(_)) if matches!(other, "relu" | "abs" | "identity") => Err(
            Error::InvalidInput(format!("activation {other} takes no \"eta\" field")),
        ),
        (other, _) => Err(Error::InvalidInput(format!("unknown activation {other:?}"))),
    }
}

/// Serialize a model (and optionally its noise covariances) to JSON.
pub fn model_to_json(net: &GenerativeNetwork, noise: Option<&NoiseModel>) -> Result<String> {
    let repr = ModelRepr {
        latent_dim: net.latent_dim(),
        layers: net
            .layers()
            .iter()
            .map(|l| {
                let (activation, eta) = activation_name(l.activation);
                LayerRepr {
                    weight: matrix_rows(&l.weight),
                    bias: l.bias.iter().copied().collect(),
                    activation: activation.to_string(),
                    eta,
                }
            })
            .collect(),
        noise: noise.map(|n| NoiseRepr {
            sigma_x: matrix_rows(n.sigma_x()),
            sigma_z: matrix_rows(n.sigma_z()),
        }),
    };
    Ok(serde_json::to_string_pretty(&repr)?)
}

/// Parse a model from JSON, validating all structural invariants.
pub fn model_from_json(text: &str) -> Result<(GenerativeNetwork, Option<NoiseModel>)> {
    let repr: ModelRepr = serde_json::from_str(text)?;
    let layers = repr
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(Layer {
                weight: matrix_from_rows(&l.weight, &format!("layer {i} weight"))?,
                bias: DVector::from_column_slice(&l.bias),
                activation: activation_from(&l.activation, l.eta)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let net = GenerativeNetwork::new(repr.latent_dim, layers)?;
    let noise = match repr.noise {
        None => None,
        Some(n) => {
            let sx = matrix_from_rows(&n.sigma_x, "noise sigma_x")?;
            let sz = matrix_from_rows(&n.sigma_z, "noise sigma_z")?;
            let model = NoiseModel::new(sx, sz)?;
            if model.sigma_x().nrows() != net.output_dim()
                || model.sigma_z().nrows() != net.latent_dim()
            {
                return Err(Error::InvalidInput(format!(
                    "noise dimensions ({}, {}) do not match the network ({}, {})",
                    model.sigma_x().nrows(),
                    model.sigma_z().nrows(),
                    net.output_dim(),
                    net.latent_dim()
                )));
            }
            Some(model)
        }
    };
    Ok((net, noise))
}

/// Write a model file.
pub fn save_model(
    path: impl AsRef<Path>,
    net: &GenerativeNetwork,
    noise: Option<&NoiseModel>,
) -> Result<()> {
    let mut text = model_to_json(net, noise)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Read a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<(GenerativeNetwork, Option<NoiseModel>)> {
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::InvalidInput(format!("cannot read {}: {e}", path.as_ref().display()))
    })?;
    model_from_json(&text)
}

/// Format one float with 17 significant digits (enough to round-trip any
/// double exactly).
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Render rows of equal-length vectors as CSV (comma, LF, 17 significant
/// digits).
pub fn csv_to_string(rows: &[DVector<f64>]) -> String {
    let mut out = String::new();
    for row in rows {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", format_float(*v));
        }
        out.push('\n');
    }
    out
}

/// Write a dataset CSV.
pub fn write_csv(path: impl AsRef<Path>, rows: &[DVector<f64>]) -> Result<()> {
    fs::write(path, csv_to_string(rows))?;
    Ok(())
}

/// Read a dataset CSV: one observation per row, `skip_header` drops the
/// first line. Every row must have the same number of columns.
pub fn read_csv(path: impl AsRef<Path>, skip_header: bool) -> Result<Vec<DVector<f64>>> {
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::InvalidInput(format!("cannot read {}: {e}", path.as_ref().display()))
    })?;
    let mut rows = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && skip_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_vector(line)
            .map_err(|e| Error::InvalidInput(format!("line {}: {e}", lineno + 1)))?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::InvalidInput(format!(
                "line {}: expected {} columns, found {}",
                lineno + 1,
                width.unwrap(),
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no data rows",
            path.as_ref().display()
        )));
    }
    Ok(rows)
}

/// Parse a comma-separated vector like `"0.1,0.2"`.
pub fn parse_vector(text: &str) -> Result<DVector<f64>> {
    let vals = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.is_empty() {
        return Err(Error::InvalidInput("empty vector".into()));
    }
    Ok(DVector::from_column_slice(&vals))
}

/// Parse an architecture spec like `"1-8-2 relu"` or
/// `"1-4-4-2 leaky_relu:0.2"`: dash-separated widths (latent first, output
/// last), then the hidden activation.
pub fn parse_net_spec(spec: &str) -> Result<(Vec<usize>, Activation)> {
    let mut parts = spec.split_whitespace();
    let dims_part = parts
        .next()
        .ok_or_else(|| Error::InvalidInput("empty architecture spec".into()))?;
    let act_part = parts.next().unwrap_or("relu");
    if parts.next().is_some() {
        return Err(Error::InvalidInput(format!(
            "architecture spec {spec:?} has trailing tokens"
        )));
    }
    let dims = dims_part
        .split('-')
        .map(|t| {
            t.parse::<usize>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::InvalidInput(format!("bad width {t:?} in {spec:?}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    if dims.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "architecture spec {spec:?} needs at least two widths"
        )));
    }
    let activation = match act_part.split_once(':') {
        None => activation_from(act_part, None).and_then(|a| match a {
            Activation::Identity => Err(Error::InvalidInput(
                "hidden activation cannot be identity in an architecture spec; \
                 use a linear single-layer spec instead"
                    .into(),
            )),
            other => Ok(other),
        })?,
        Some(("leaky_relu", eta)) => {
            let eta = eta.parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!("bad leaky_relu slope {eta:?} in {spec:?}"))
            })?;
            activation_from("leaky_relu", Some(eta))?
        }
        Some((other, _)) => {
            return Err(Error::InvalidInput(format!(
                "activation {other:?} takes no parameter"
            )))
        }
    };
    Ok((dims, activation))
}

#[derive(Serialize)]
struct AffineRepr {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize)]
struct RegionRepr {
    code: Vec<Vec<i8>>,
    vertices: Vec<Vec<f64>>,
    affine: AffineRepr,
    clipped: bool,
}

/// Render a partition as a JSON array of regions: activation code (one sign
/// row per hidden layer), box-clipped vertices, the region's affine map,
/// and whether the bounding box contributed faces.
pub fn partition_to_json(partition: &crate::geometry::Partition) -> Result<String> {
    let regions = partition
        .regions
        .iter()
        .map(|r| RegionRepr {
            code: r.code.signs.clone(),
            vertices: crate::geometry::vertex_enumeration(&r.hrep)
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            affine: AffineRepr {
                a: matrix_rows(&r.affine.a),
                b: r.affine.b.iter().copied().collect(),
            },
            clipped: r.clipped,
        })
        .collect::<Vec<_>>();
    Ok(serde_json::to_string_pretty(&regions)?)
}

/// The circle toy dataset: uniform angle on a radius-1 circle plus isotropic
/// Gaussian noise of the given standard deviation.
pub fn circle_dataset(n: usize, noise_std: f64, seed: u64) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be ≥ 1".into()));
    }
    let mut r = rng::seeded(seed);
    Ok((0..n)
        .map(|_| {
            let theta = r.gen::<f64>() * std::f64::consts::TAU;
            let eps = rng::standard_normal_vector(&mut r, 2) * noise_std;
            DVector::from_column_slice(&[theta.cos() + eps[0], theta.sin() + eps[1]])
        })
        .collect())
}

/// The wave toy dataset: `x₁` uniform on `[−2, 2]`,
/// `x₂ = amplitude · sin(frequency · x₁)` plus Gaussian noise. The original
/// experiment is shown only as a figure; these parameters are a
/// reconstruction, not ground truth.
pub fn wave_dataset(
    n: usize,
    amplitude: f64,
    frequency: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be ≥ 1".into()));
    }
    let mut r = rng::seeded(seed);
    Ok((0..n)
        .map(|_| {
            let x1 = r.gen::<f64>() * 4.0 - 2.0;
            let x2 = amplitude * (frequency * x1).sin() + rng::standard_normal(&mut r) * noise_std;
            DVector::from_column_slice(&[x1, x2])
        })
        .collect())
}

/// Sample a dataset from a model: `z ~ N(0, Σ_z)`, `x = g(z) + ε`,
/// `ε ~ N(0, Σ_x)`.
pub fn model_dataset(
    net: &GenerativeNetwork,
    noise: &NoiseModel,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be ≥ 1".into()));
    }
    let mut r = rng::seeded(seed);
    let chol_z = noise.chol_z_l();
    let chol_x = noise.chol_x_l();
    let mut scratch = net.scratch();
    Ok((0..n)
        .map(|_| {
            let z = &chol_z * rng::standard_normal_vector(&mut r, net.latent_dim());
            let eps = &chol_x * rng::standard_normal_vector(&mut r, net.output_dim());
            net.forward_into(&z, &mut scratch) + eps
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_network;
    use tempfile::tempdir;

    #[test]
    fn model_json_round_trips_bit_faithfully() {
        let net = random_network(&[2, 5, 3], Activation::LeakyRelu { eta: 0.2 }, 9).unwrap();
        let noise = NoiseModel::isotropic(3, 0.01, 2, 1.0).unwrap();
        let text = model_to_json(&net, Some(&noise)).unwrap();
        let (net2, noise2) = model_from_json(&text).unwrap();
        assert_eq!(net, net2);
        let noise2 = noise2.unwrap();
        assert_eq!(noise.sigma_x(), noise2.sigma_x());
        assert_eq!(noise.sigma_z(), noise2.sigma_z());

        // Adversarial values: subnormals, long mantissas, negative zeros.
        let mut layers = net.layers().to_vec();
        layers[0].weight[(0, 0)] = f64::MIN_POSITIVE / 8.0;
        layers[0].weight[(0, 1)] = 0.1 + 0.2;
        layers[0].bias[0] = -0.0;
        let net3 = GenerativeNetwork::new(2, layers).unwrap();
        let (net4, _) = model_from_json(&model_to_json(&net3, None).unwrap()).unwrap();
        for (a, b) in net3.layers().iter().zip(net4.layers()) {
            assert!(a
                .weight
                .iter()
                .zip(b.weight.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a
                .bias
                .iter()
                .zip(b.bias.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn model_json_rejects_malformed_documents() {
        assert!(model_from_json("{}").is_err());
        // Ragged weight matrix.
        let bad = r#"{"latent_dim":1,"layers":[{"weight":[[1.0],[2.0,3.0]],"bias":[0.0,0.0],"activation":"relu"},{"weight":[[1.0,1.0]],"bias":[0.0],"activation":"identity"}]}"#;
        assert!(model_from_json(bad).is_err());
        // Unknown activation.
        let bad = r#"{"latent_dim":1,"layers":[{"weight":[[1.0]],"bias":[0.0],"activation":"tanh"}]}"#;
        assert!(model_from_json(bad).is_err());
        // leaky_relu without eta.
        let bad = r#"{"latent_dim":1,"layers":[{"weight":[[1.0]],"bias":[0.0],"activation":"leaky_relu"},{"weight":[[1.0]],"bias":[0.0],"activation":"identity"}]}"#;
        assert!(model_from_json(bad).is_err());
    }

    #[test]
    fn csv_round_trips_and_validates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rows = vec![
            DVector::from_column_slice(&[0.1, -2.5e-300]),
            DVector::from_column_slice(&[1.0 / 3.0, f64::MAX]),
        ];
        write_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'), "CSV must use LF line endings");
        let back = read_csv(&path, false).unwrap();
        assert_eq!(rows.len(), back.len());
        for (a, b) in rows.iter().zip(&back) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
            }
        }

        fs::write(&path, "h1,h2\n1.0,2.0\n").unwrap();
        assert_eq!(read_csv(&path, true).unwrap().len(), 1);
        assert!(read_csv(&path, false).is_err());

        fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        assert!(read_csv(&path, false).is_err(), "ragged rows must fail");
    }

    #[test]
    fn net_spec_parsing() {
        let (dims, act) = parse_net_spec("1-8-2 relu").unwrap();
        assert_eq!(dims, vec![1, 8, 2]);
        assert_eq!(act, Activation::Relu);
        let (dims, act) = parse_net_spec("1-4-4-2 leaky_relu:0.2").unwrap();
        assert_eq!(dims, vec![1, 4, 4, 2]);
        assert_eq!(act, Activation::LeakyRelu { eta: 0.2 });
        let (_, act) = parse_net_spec("2-3").unwrap();
        assert_eq!(act, Activation::Relu, "activation defaults to relu");
        assert!(parse_net_spec("1").is_err());
        assert!(parse_net_spec("1-0-2 relu").is_err());
        assert!(parse_net_spec("1-x-2 relu").is_err());
        assert!(parse_net_spec("1-2-2 tanh").is_err());
        assert!(parse_net_spec("1-2-2 relu:0.5").is_err());
    }

    #[test]
    fn circle_dataset_has_expected_geometry() {
        let data = circle_dataset(100, 0.05, 3).unwrap();
        assert_eq!(data.len(), 100);
        let in_band = data
            .iter()
            .filter(|x| {
                let r = x.norm();
                (0.8..=1.2).contains(&r)
            })
            .count();
        assert!(in_band >= 99, "radii concentrate near 1: {in_band}/100");
        // Deterministic in the seed.
        let again = circle_dataset(100, 0.05, 3).unwrap();
        assert_eq!(data, again);
        assert_ne!(data, circle_dataset(100, 0.05, 4).unwrap());
    }

    #[test]
    fn model_dataset_matches_linear_covariance() {
        // One linear layer: sample covariance ≈ Σ_x + AΣ_zAᵀ.
        let net = random_network(&[2, 2], Activation::Relu, 5).unwrap();
        let noise = NoiseModel::isotropic(2, 0.3, 2, 1.0).unwrap();
        let n = 100_000;
        let data = model_dataset(&net, &noise, n, 11).unwrap();
        let mean = data.iter().fold(DVector::zeros(2), |a, x| a + x) / n as f64;
        let mut cov = DMatrix::zeros(2, 2);
        for x in &data {
            let d = x - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        let aff = net.per_region_affine(&net.activation_code(&DVector::zeros(2)));
        let expect = noise.sigma_x() + &aff.a * noise.sigma_z() * aff.a.transpose();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (cov[(i, j)] - expect[(i, j)]).abs() < 0.05 * expect.abs().max(),
                    "cov[{i},{j}] = {} vs {}",
                    cov[(i, j)],
                    expect[(i, j)]
                );
            }
        }
    }

    #[test]
    fn wave_dataset_is_bounded_and_deterministic() {
        let data = wave_dataset(500, 1.0, 3.0, 0.05, 7).unwrap();
        assert!(data.iter().all(|x| (-2.0..=2.0).contains(&x[0])));
        assert!(data.iter().all(|x| x[1].abs() < 1.0 + 5.0 * 0.05));
        assert_eq!(data, wave_dataset(500, 1.0, 3.0, 0.05, 7).unwrap());
        assert!(wave_dataset(0, 1.0, 3.0, 0.05, 7).is_err());
    }
}
