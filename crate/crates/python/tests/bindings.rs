use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F>(f: F)
where
    F: for<'py> FnOnce(&Bound<'py, PyModule>) -> PyResult<()>,
{
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(pyrawspoof::pyrawspoof)(py);
        f(m.bind(py).cast::<PyModule>().unwrap()).unwrap();
    });
}

#[test]
fn metrics_are_exposed() {
    with_module(|m| {
        let far: f64 = m.getattr("far")?.call1((vec![0.1, 0.5, 0.9], 0.5))?.extract()?;
        assert_eq!(far, 2.0 / 3.0);
        let choice: (f64, f64, f64, f64) = m
            .getattr("select_threshold")?
            .call1((vec![0.2, 0.9, 0.1, 0.3], vec![true, true, false, false]))?
            .extract()?;
        assert_eq!(choice, (0.2, 0.5, 0.0, 0.25));
        Ok(())
    });
}

#[test]
fn model_scores_are_log_probabilities() {
    with_module(|m| {
        let kwargs = PyDict::new(m.py());
        kwargs.set_item("seed", 4)?;
        kwargs.set_item("overrides", vec![("freq_maps", "4"), ("lstm_size", "4"), ("dnn_hidden", "8")])?;
        let model = m.getattr("Cldnn")?.call(("cldnn2",), Some(&kwargs))?;
        let samples: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.05).sin()).collect();
        let score: f64 = model.call_method1("score", (samples,))?.extract()?;
        assert!(score <= 0.0 && score.is_finite());
        Ok(())
    });
}

#[test]
fn errors_become_python_exceptions() {
    with_module(|m| {
        let err = m.getattr("far")?.call1((Vec::<f64>::new(), 0.0)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(m.py()));
        let err = m.getattr("Cldnn")?.call1(("cldnn9",)).unwrap_err();
        assert!(err.to_string().contains("cldnn9"));
        Ok(())
    });
}
