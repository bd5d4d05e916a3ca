//! Python bindings: the `lfm` command line plus the schedule and spectrum helpers.

use lfm_core::diagnostics::{energy_spectrum as spectrum, nrmse_frames};
use lfm_core::schedules::PathConfig;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Run an `lfm` subcommand, e.g. `run(["gen-data", "--problem", "heat2d", "--out", "d.lfmd"])`.
/// Returns the process exit code.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("lfm".to_string()).chain(args).collect();
    py.detach(|| lfm_core::diagnostics::cli::cli_main(argv))
}

/// `(t, alpha, sigma)` at each sampling knot of a path given as its JSON config,
/// e.g. `{"kind": "exponential_refiner", "sigma_min": 0.01, "K": 10}`.
#[pyfunction]
fn schedule(config: &str) -> PyResult<Vec<(f64, f64, f64)>> {
    let cfg: PathConfig = serde_json::from_str(config).map_err(value_err)?;
    let path = cfg.path().map_err(value_err)?;
    let grid = cfg.sample_grid().map_err(value_err)?;
    grid.knots()
        .iter()
        .map(|&t| path.alpha_sigma(t).map(|(a, s)| (t, a, s)).map_err(value_err))
        .collect()
}

/// Radially binned energy spectrum of a periodic field, as `(energy, counts)`.
#[pyfunction]
fn energy_spectrum(field: Vec<f64>, extents: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let s = spectrum(&field, &extents).map_err(value_err)?;
    Ok((s.energy, s.counts))
}

/// Relative L2 error of one variable over matching frame stacks.
#[pyfunction]
#[pyo3(signature = (pred, reference, channels = 1, variable = 0))]
fn nrmse(pred: Vec<f64>, reference: Vec<f64>, channels: usize, variable: usize) -> PyResult<f64> {
    nrmse_frames(&pred, &reference, channels, variable).map_err(value_err)
}

#[pymodule]
fn lfm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(energy_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_reads_path_json() {
        let knots = schedule(r#"{"kind": "flow_linear", "K": 2}"#).unwrap();
        assert_eq!(knots, vec![(0.0, 1.0, 0.0), (0.5, 0.5, 0.5), (1.0, 0.0, 1.0)]);
        assert!(schedule(r#"{"kind": "exponential_refiner", "K": 2}"#).is_err());
        assert!(schedule("not json").is_err());
    }

    #[test]
    fn spectrum_and_nrmse_pass_through() {
        let field: Vec<f64> = (0..8).map(|i| (std::f64::consts::TAU * 2.0 * i as f64 / 8.0).cos()).collect();
        let (energy, counts) = energy_spectrum(field, vec![8]).unwrap();
        let total: f64 = energy.iter().zip(&counts).map(|(e, c)| e * *c as f64).sum();
        assert!((total - 0.5).abs() < 1e-12);
        assert!(energy_spectrum(vec![1.0; 6], vec![6]).is_err());
        assert_eq!(nrmse(vec![0.0, 0.0], vec![3.0, 4.0], 1, 0).unwrap(), 1.0);
        assert!(nrmse(vec![1.0], vec![1.0, 2.0], 1, 0).is_err());
    }
}
