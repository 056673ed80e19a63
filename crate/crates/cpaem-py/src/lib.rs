//! Python bindings for the `cpaem` crate: the generative model, exact
//! inference, EM training, the bundled toy datasets, and the Monte-Carlo
//! oracles, exposed through plain lists/floats so no Python-side
//! dependencies are required.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cpaem::em::{em_fit, EmConfig};
use cpaem::geometry::enumerate_partition;
use cpaem::inference::{
    dataset_nll, log_marginal, map_latent, posterior_summary, InferenceContext,
};
use cpaem::network::{random_network, GenerativeNetwork, NoiseModel};

fn py_err(e: cpaem::Error) -> PyErr {
    use cpaem::Error as E;
    let msg = e.to_string();
    match e {
        E::InvalidInput(_) | E::InvalidNetwork(_) | E::Json(_) => PyValueError::new_err(msg),
        E::Io(_) => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn to_dvector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn from_dvector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn from_dmatrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_data(rows: Vec<Vec<f64>>, dim: usize, what: &str) -> PyResult<Vec<DVector<f64>>> {
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != dim {
                return Err(PyValueError::new_err(format!(
                    "{what} row {i} has {} entries, expected {dim}",
                    r.len()
                )));
            }
            Ok(DVector::from_vec(r))
        })
        .collect()
}

fn check_x(model: &Model, x: &[f64]) -> PyResult<()> {
    if x.len() != model.net.output_dim() {
        return Err(PyValueError::new_err(format!(
            "observation has {} entries, expected {}",
            x.len(),
            model.net.output_dim()
        )));
    }
    Ok(())
}

/// A CPA generative model: the piecewise-affine network together with its
/// Gaussian observation and prior covariances.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Model {
    net: GenerativeNetwork,
    noise: NoiseModel,
}

impl Model {
    fn resolve_radius(&self, radius: Option<f64>) -> f64 {
        radius.unwrap_or_else(|| 8.0 * self.noise.sigma_z().diagonal().map(f64::sqrt).max())
    }
}

#[pymethods]
impl Model {
    /// A randomly initialized model from a spec like `"1-8-2 relu"` or
    /// `"2-4-4-2 leaky_relu:0.2"`, with isotropic noise covariances.
    #[staticmethod]
    #[pyo3(signature = (spec, seed = 0, var_x = 0.01, var_z = 1.0))]
    fn random(spec: &str, seed: u64, var_x: f64, var_z: f64) -> PyResult<Self> {
        let (dims, activation) = cpaem::io::parse_net_spec(spec).map_err(py_err)?;
        let net = random_network(&dims, activation, seed).map_err(py_err)?;
        let noise = NoiseModel::isotropic(net.output_dim(), var_x, net.latent_dim(), var_z)
            .map_err(py_err)?;
        Ok(Model { net, noise })
    }

    /// Parse a model from its JSON document. A missing noise block falls
    /// back to the isotropic defaults (`var_x = 0.01`, `var_z = 1`).
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let (net, noise) = cpaem::io::model_from_json(text).map_err(py_err)?;
        let noise = match noise {
            Some(n) => n,
            None => NoiseModel::isotropic(net.output_dim(), 0.01, net.latent_dim(), 1.0)
                .map_err(py_err)?,
        };
        Ok(Model { net, noise })
    }

    /// Load a model from a JSON file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Model::from_json(&text)
    }

    /// The model as a JSON document (bit-faithful float round-trip).
    fn to_json(&self) -> PyResult<String> {
        cpaem::io::model_to_json(&self.net, Some(&self.noise)).map_err(py_err)
    }

    /// Save the model to a JSON file.
    fn save(&self, path: &str) -> PyResult<()> {
        cpaem::io::save_model(path, &self.net, Some(&self.noise)).map_err(py_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.net.latent_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.net.depth()
    }

    #[getter]
    fn var_x(&self) -> Vec<Vec<f64>> {
        from_dmatrix(self.noise.sigma_x())
    }

    #[getter]
    fn var_z(&self) -> Vec<Vec<f64>> {
        from_dmatrix(self.noise.sigma_z())
    }

    /// The generator output `g(z)`.
    fn forward(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        if z.len() != self.net.latent_dim() {
            return Err(PyValueError::new_err(format!(
                "latent has {} entries, expected {}",
                z.len(),
                self.net.latent_dim()
            )));
        }
        Ok(from_dvector(&self.net.forward(&to_dvector(z))))
    }

    /// `n` observations sampled from the model.
    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let data = cpaem::io::model_dataset(&self.net, &self.noise, n, seed).map_err(py_err)?;
        Ok(data.iter().map(from_dvector).collect())
    }

    /// Exact inference over the latent partition clipped to
    /// `[-radius, radius]^S` (default `8·max √diag(Σ_z)`).
    #[pyo3(signature = (radius = None, max_regions = 100_000))]
    fn inference(&self, radius: Option<f64>, max_regions: usize) -> PyResult<Inference> {
        let r = self.resolve_radius(radius);
        let partition = enumerate_partition(&self.net, r, max_regions).map_err(py_err)?;
        let ctx = InferenceContext::new(partition, &self.noise).map_err(py_err)?;
        Ok(Inference { ctx, output_dim: self.net.output_dim() })
    }

    /// Exact EM. `update` lists the parameter groups to re-estimate
    /// (`"biases"`, `"weights"`, `"sigma_x"`, `"sigma_z"`); the default is
    /// biases, weights and an isotropic `sigma_x`. Returns the fitted model,
    /// the NLL trace as `(iteration, nll, regions, wall_ms)` rows, and
    /// whether the tolerance stopped the run early.
    #[pyo3(signature = (data, max_iters = 50, tol = 1e-6, update = None, full_sigma_x = false, radius = None, max_regions = 100_000))]
    #[allow(clippy::too_many_arguments)]
    fn fit_em(
        &self,
        data: Vec<Vec<f64>>,
        max_iters: usize,
        tol: f64,
        update: Option<Vec<String>>,
        full_sigma_x: bool,
        radius: Option<f64>,
        max_regions: usize,
    ) -> PyResult<(Model, Vec<(usize, f64, usize, f64)>, bool)> {
        let data = rows_to_data(data, self.net.output_dim(), "data")?;
        let mut config = EmConfig {
            max_iters,
            tol,
            bounding_radius: Some(self.resolve_radius(radius)),
            max_regions,
            isotropic_sigma_x: !full_sigma_x,
            ..EmConfig::default()
        };
        if let Some(groups) = update {
            config.update_biases = false;
            config.update_weights = false;
            config.update_sigma_x = false;
            config.update_sigma_z = false;
            for g in &groups {
                match g.as_str() {
                    "biases" => config.update_biases = true,
                    "weights" => config.update_weights = true,
                    "sigma_x" => config.update_sigma_x = true,
                    "sigma_z" => config.update_sigma_z = true,
                    other => {
                        return Err(PyValueError::new_err(format!(
                            "unknown update group {other:?}; expected biases, weights, sigma_x or sigma_z"
                        )))
                    }
                }
            }
        }
        let fit = em_fit(&self.net, &self.noise, &data, &config).map_err(py_err)?;
        let trace = fit
            .trace
            .iter()
            .map(|row| (row.iteration, row.nll, row.regions, row.wall_ms))
            .collect();
        Ok((
            Model { net: fit.net, noise: fit.noise },
            trace,
            fit.converged,
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(latent_dim={}, output_dim={}, depth={})",
            self.net.latent_dim(),
            self.net.output_dim(),
            self.net.depth()
        )
    }
}

/// Exact posterior/marginal queries against one enumerated partition.
#[pyclass]
struct Inference {
    ctx: InferenceContext,
    output_dim: usize,
}

impl Inference {
    fn check_x(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.output_dim {
            return Err(PyValueError::new_err(format!(
                "observation has {} entries, expected {}",
                x.len(),
                self.output_dim
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl Inference {
    fn __len__(&self) -> usize {
        self.ctx.len()
    }

    /// Activation codes of the enumerated regions, e.g. `"+-+|+-"`.
    fn codes(&self) -> Vec<String> {
        self.ctx
            .partition
            .regions
            .iter()
            .map(|r| r.code.to_string())
            .collect()
    }

    /// Prior mass of each region (they sum to one up to the box tail).
    fn prior_masses(&self) -> Vec<f64> {
        self.ctx.params.iter().map(|p| p.prior_mass).collect()
    }

    /// `log p(x)` under the box-truncated model.
    fn log_marginal(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check_x(&x)?;
        log_marginal(&self.ctx, &to_dvector(x)).map_err(py_err)
    }

    /// `−Σ_n log p(x_n)` over a dataset.
    fn nll(&self, data: Vec<Vec<f64>>) -> PyResult<f64> {
        let data = rows_to_data(data, self.output_dim, "data")?;
        dataset_nll(&self.ctx, &data).map_err(py_err)
    }

    /// Posterior summary for one observation:
    /// `(log_marginal, mean, second_moment, region_masses)`.
    #[allow(clippy::type_complexity)]
    fn posterior(
        &self,
        x: Vec<f64>,
    ) -> PyResult<(f64, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        self.check_x(&x)?;
        let summary = posterior_summary(&self.ctx, &to_dvector(x)).map_err(py_err)?;
        Ok((
            summary.log_marginal,
            from_dvector(&summary.mean),
            from_dmatrix(&summary.second),
            summary.regions.iter().map(|r| r.mass).collect(),
        ))
    }

    /// Exact MAP latent: `(z, region_code, log_joint)`.
    fn map_latent(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, String, f64)> {
        self.check_x(&x)?;
        let map = map_latent(&self.ctx, &to_dvector(x)).map_err(py_err)?;
        let code = self.ctx.partition.regions[map.region].code.to_string();
        Ok((from_dvector(&map.z), code, map.log_joint))
    }
}

/// Points near the unit circle: uniform angle, radius `1 + noise_std·ε`.
#[pyfunction]
#[pyo3(signature = (n, noise_std = 0.05, seed = 0))]
fn circle_dataset(n: usize, noise_std: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let data = cpaem::io::circle_dataset(n, noise_std, seed).map_err(py_err)?;
    Ok(data.iter().map(from_dvector).collect())
}

/// Points on a sine wave with Gaussian ordinate noise.
#[pyfunction]
#[pyo3(signature = (n, amplitude = 1.0, frequency = 3.0, noise_std = 0.05, seed = 0))]
fn wave_dataset(
    n: usize,
    amplitude: f64,
    frequency: f64,
    noise_std: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let data = cpaem::io::wave_dataset(n, amplitude, frequency, noise_std, seed).map_err(py_err)?;
    Ok(data.iter().map(from_dvector).collect())
}

/// Monte-Carlo estimate of the marginal density `p(x)`:
/// `(estimate, stderr)`. An independent cross-check of
/// `exp(Inference.log_marginal(x))`.
#[pyfunction]
#[pyo3(signature = (model, x, n = 100_000, seed = 0))]
fn mc_marginal(model: &Model, x: Vec<f64>, n: usize, seed: u64) -> PyResult<(f64, f64)> {
    check_x(model, &x)?;
    let est = cpaem::oracle::mc_marginal(&model.net, &model.noise, &to_dvector(x), n, seed)
        .map_err(py_err)?;
    Ok((est.value, est.stderr))
}

/// Importance-sampling estimate of the posterior mean and second moment:
/// `(mean, mean_stderr, second_rows, ess)`. An independent cross-check of
/// `Inference.posterior(x)`.
#[pyfunction]
#[pyo3(signature = (model, x, n = 100_000, seed = 0))]
#[allow(clippy::type_complexity)]
fn is_posterior_moments(
    model: &Model,
    x: Vec<f64>,
    n: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64)> {
    check_x(model, &x)?;
    let s = model.net.latent_dim();
    let est =
        cpaem::oracle::is_posterior_moments(&model.net, &model.noise, &to_dvector(x), n, seed)
            .map_err(py_err)?;
    let mean = (0..s).map(|i| est.value[i]).collect();
    let mean_se = (0..s).map(|i| est.stderr[i]).collect();
    let second = (0..s)
        .map(|i| (0..s).map(|j| est.value[s + i * s + j]).collect())
        .collect();
    Ok((mean, mean_se, second, est.ess))
}

#[pymodule]
fn cpaem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Inference>()?;
    m.add_function(wrap_pyfunction!(circle_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(wave_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(mc_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(is_posterior_moments, m)?)?;
    Ok(())
}
