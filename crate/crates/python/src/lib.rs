//! Python bindings for `flowsr-core`.
//!
//! Tensors cross the boundary as a flat list of floats plus a shape list.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use flowsr_core::checkpoint::load_checkpoint;
use flowsr_core::checks::{run_suite, Suite};
use flowsr_core::data::{gen_toy2d, DatasetSpec};
use flowsr_core::distill::student_one_step;
use flowsr_core::eval::{perceptual_proxy, psnr};
use flowsr_core::oracles::GaussianFlowSpec;
use flowsr_core::solvers::{solve, SolverSpec, VelocityField};
use flowsr_core::{Tensor, VelocityModel};

create_exception!(flowsr, FlowsrError, PyException);

fn err(e: flowsr_core::Error) -> PyErr {
    FlowsrError::new_err(e.to_string())
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

fn parts(t: Tensor) -> (Vec<f64>, Vec<usize>) {
    let shape = t.shape().to_vec();
    (t.into_data(), shape)
}

/// A trained velocity network loaded from a checkpoint. Evaluation uses the EMA weights.
#[pyclass(module = "flowsr", frozen)]
struct Model {
    inner: VelocityModel,
    config: String,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, doc) = load_checkpoint(&path).map_err(err)?;
        Ok(Self { inner, config: doc.to_text() })
    }

    /// `[C, H, W]` of one sample.
    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.arch().sample_shape().to_vec()
    }

    #[getter]
    fn cond_channels(&self) -> usize {
        self.inner.arch().cond_channels
    }

    /// Config sections stored next to the weights (flow and distill settings).
    #[getter]
    fn config(&self) -> &str {
        &self.config
    }

    fn velocity(
        &self,
        x: Vec<f64>,
        shape: Vec<usize>,
        cond: Vec<f64>,
        t: Vec<f64>,
    ) -> PyResult<Vec<f64>> {
        let x = tensor(x, shape.clone())?;
        let cond = tensor(cond, cond_shape(&shape, self.inner.arch().cond_channels))?;
        Ok(self.inner.velocity(&x, &cond, &t).map_err(err)?.into_data())
    }

    /// `x₀ + v(x₀, t)`: the one-step estimate at dial position `t`.
    fn one_step(&self, x0: Vec<f64>, shape: Vec<usize>, cond: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        let x0 = tensor(x0, shape.clone())?;
        let cond = tensor(cond, cond_shape(&shape, self.inner.arch().cond_channels))?;
        Ok(student_one_step(&self.inner, &x0, &cond, t).map_err(err)?.into_data())
    }

    /// Integrates the PF-ODE from 0 to 1 with RK45; returns the endpoint and NFE.
    #[pyo3(signature = (x0, shape, cond, tol = 1e-3))]
    fn solve(&self, x0: Vec<f64>, shape: Vec<usize>, cond: Vec<f64>, tol: f64) -> PyResult<(Vec<f64>, usize)> {
        let x0 = tensor(x0, shape.clone())?;
        let cond = tensor(cond, cond_shape(&shape, self.inner.arch().cond_channels))?;
        let out = solve(&self.inner, &x0, &cond, (0.0, 1.0), &SolverSpec::rk45(tol)).map_err(err)?;
        Ok((out.x.into_data(), out.nfe))
    }
}

fn cond_shape(shape: &[usize], channels: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if s.len() > 1 {
        s[1] = channels;
    }
    s
}

/// Samples from the 2-D ring mixture, as `(data, [count, 2, 1, 1])`.
#[pyfunction]
#[pyo3(signature = (count, components = 8, seed = 0))]
fn toy2d(count: usize, components: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<usize>)> {
    Ok(parts(gen_toy2d(count, components, seed).map_err(err)?))
}

/// Procedural texture images in `[-1, 1]`, as `(data, [count, 1, side, side])`.
#[pyfunction]
#[pyo3(signature = (count, seed = 0, side = 32))]
fn textures(count: usize, seed: u64, side: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let spec = DatasetSpec { side, ..DatasetSpec::textures(count, seed) };
    Ok(parts(spec.generate().map_err(err)?))
}

/// Closed-form velocity of the rectified flow between `N(0, σ₀²)` and `N(0, σ₁²)`.
#[pyfunction]
fn gaussian_velocity(sigma0: f64, sigma1: f64, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    let flow = GaussianFlowSpec::new(sigma0, sigma1, 1).map_err(err)?.validated().map_err(err)?;
    let n = x.len();
    let x = tensor(x, vec![n, 1, 1, 1])?;
    Ok(flow.velocity(&x, t).map_err(err)?.into_data())
}

#[pyfunction(name = "psnr")]
fn py_psnr(x: Vec<f64>, y: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    psnr(&tensor(x, shape.clone())?, &tensor(y, shape)?).map_err(err)
}

#[pyfunction(name = "perceptual_proxy")]
fn py_proxy(x: Vec<f64>, y: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    perceptual_proxy(&tensor(x, shape.clone())?, &tensor(y, shape)?).map_err(err)
}

/// Runs a self-test battery; returns `(name, value, passed)` per item.
#[pyfunction]
fn check(suite: &str) -> PyResult<Vec<(String, f64, bool)>> {
    let suite = Suite::parse(suite).map_err(err)?;
    let items = run_suite(suite).map_err(err)?;
    Ok(items.into_iter().map(|i| (i.name, i.value, i.pass)).collect())
}

/// Runs the command-line tool in-process; returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    flowsr_core::cli::run(std::iter::once("flowsr".to_string()).chain(args))
}

#[pymodule]
fn flowsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlowsrError", m.py().get_type::<FlowsrError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(toy2d, m)?)?;
    m.add_function(wrap_pyfunction!(textures, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(py_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(py_proxy, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
