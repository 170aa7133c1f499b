//! `import crprime`: the command-line runner, callable from Python.

use clap::Parser;
use crprime_core::cli::{run as run_config, CliError, DomainFile, RunConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: CliError) -> PyErr {
    match e {
        CliError::Input(m) => PyValueError::new_err(m),
        CliError::Compute(m) => PyRuntimeError::new_err(m),
    }
}

/// Run a subcommand with CLI-style arguments, e.g. `run(["qprime", "--n", "1"])`.
/// Returns the JSON report as a string; `--output`/`--csv` are ignored.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> PyResult<String> {
    let cfg = RunConfig::try_parse_from(std::iter::once("crprime".to_string()).chain(args)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let rep = py.detach(|| run_config(&cfg)).map_err(to_py)?;
    serde_json::to_string(&rep).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Validate a domain file's text; returns n.
#[pyfunction]
fn check_domain(text: &str) -> PyResult<usize> {
    let f = DomainFile::parse(text).map_err(to_py)?;
    f.spec().map_err(to_py)?;
    Ok(f.n)
}

#[pymodule]
fn crprime(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(check_domain, m)?)?;
    Ok(())
}
