//! Python bindings for the neural interpreter: fuzzy Boolean task
//! construction, model building/training, structural operations and
//! checkpointing.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use ni_core::checkpoint;
use ni_core::fuzzy;
use ni_core::model::{EvalOptions, Model, ModelConfig, PosMode};
use ni_core::tensor::Storage;
use ni_core::train;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `and(a, b) = a * b` on [0, 1].
#[pyfunction]
fn fuzzy_and(a: f64, b: f64) -> PyResult<f64> {
    fuzzy::fuzzy_and(a, b).map_err(value_err)
}

/// `not(a) = 1 - a` on [0, 1].
#[pyfunction]
fn fuzzy_not(a: f64) -> PyResult<f64> {
    fuzzy::fuzzy_not(a).map_err(value_err)
}

/// `or(a, b) = 1 - (1 - a)(1 - b)` on [0, 1].
#[pyfunction]
fn fuzzy_or(a: f64, b: f64) -> PyResult<f64> {
    fuzzy::fuzzy_or(a, b).map_err(value_err)
}

/// Coefficient of determination.
#[pyfunction]
fn r2_score(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    fuzzy::r2_score(&pred, &target).map_err(value_err)
}

/// A sampled fuzzy Boolean function stored as its truth table.
#[pyclass]
#[derive(Clone)]
struct FuzzyExpr {
    inner: fuzzy::FuzzyExpr,
}

#[pymethods]
impl FuzzyExpr {
    /// Samples a random truth table (each entry Bernoulli(0.5)).
    #[staticmethod]
    fn sample(n_vars: usize, seed: u64) -> PyResult<Self> {
        if n_vars == 0 {
            return Err(PyValueError::new_err("n_vars must be >= 1"));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(FuzzyExpr {
            inner: fuzzy::FuzzyExpr::sample(n_vars, &mut rng),
        })
    }

    #[staticmethod]
    fn from_hex(n_vars: usize, hex: &str) -> PyResult<Self> {
        Ok(FuzzyExpr {
            inner: fuzzy::FuzzyExpr::from_hex(n_vars, hex).map_err(value_err)?,
        })
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&x).map_err(value_err)
    }

    fn to_hex(&self) -> String {
        self.inner.to_hex()
    }

    fn minterms(&self) -> Vec<usize> {
        self.inner.minterms()
    }

    fn table(&self) -> Vec<bool> {
        self.inner.table().to_vec()
    }

    #[getter]
    fn n_vars(&self) -> usize {
        self.inner.n_vars()
    }

    fn __repr__(&self) -> String {
        format!(
            "FuzzyExpr(n_vars={}, table=0x{})",
            self.inner.n_vars(),
            self.inner.to_hex()
        )
    }
}

/// Multi-task regression dataset with an 80/20 train/validation split.
#[pyclass]
struct Dataset {
    inner: fuzzy::RegressionDataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_vars(&self) -> usize {
        self.inner.n_vars()
    }

    #[getter]
    fn n_tasks(&self) -> usize {
        self.inner.n_tasks()
    }

    fn input(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_samples() {
            return Err(PyValueError::new_err("sample index out of range"));
        }
        Ok(self.inner.input_row(i).to_vec())
    }

    fn target(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_samples() {
            return Err(PyValueError::new_err("sample index out of range"));
        }
        Ok(self.inner.target_row(i).to_vec())
    }

    fn train_indices(&self) -> Vec<usize> {
        self.inner.train_idx.clone()
    }

    fn val_indices(&self) -> Vec<usize> {
        self.inner.val_idx.clone()
    }
}

/// Builds a dataset from expressions: inputs uniform on [0, 1]^N,
/// one target column per expression. Deterministic per seed.
#[pyfunction]
fn gen_dataset(exprs: Vec<FuzzyExpr>, num_samples: usize, seed: u64) -> PyResult<Dataset> {
    let inner: Vec<fuzzy::FuzzyExpr> = exprs.into_iter().map(|e| e.inner).collect();
    Ok(Dataset {
        inner: fuzzy::gen_dataset(&inner, num_samples, seed).map_err(value_err)?,
    })
}

fn batch_from_rows(rows: Vec<Vec<f64>>, expected_cols: usize) -> PyResult<Storage> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err("need at least one row"));
    }
    let mut flat = Vec::with_capacity(n * expected_cols);
    for row in &rows {
        if row.len() != expected_cols {
            return Err(PyValueError::new_err(format!(
                "expected rows of length {expected_cols}, got {}",
                row.len()
            )));
        }
        flat.extend_from_slice(row);
    }
    Storage::new(vec![n, expected_cols], flat).map_err(value_err)
}

/// The neural interpreter model.
#[pyclass]
struct NeuralInterpreter {
    model: Model,
}

#[pymethods]
impl NeuralInterpreter {
    /// Builds a fresh model. `pos_mode` is "learned-1d" or "none".
    #[new]
    #[pyo3(signature = (
        n_inputs,
        n_tasks,
        d_model = 64,
        d_cond = 64,
        d_type = 24,
        d_key = 32,
        n_heads = 1,
        n_scripts = 2,
        n_iterations = 2,
        n_locs = 1,
        n_functions = 4,
        tau = 1.6,
        pos_mode = "learned-1d",
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_inputs: usize,
        n_tasks: usize,
        d_model: usize,
        d_cond: usize,
        d_type: usize,
        d_key: usize,
        n_heads: usize,
        n_scripts: usize,
        n_iterations: usize,
        n_locs: usize,
        n_functions: usize,
        tau: f64,
        pos_mode: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let pos_mode = match pos_mode {
            "learned-1d" => PosMode::Learned1d,
            "none" => PosMode::None,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown pos_mode '{other}' (expected 'learned-1d' or 'none')"
                )))
            }
        };
        let config = ModelConfig {
            d_model,
            d_cond,
            d_type,
            d_key,
            n_heads,
            n_scripts,
            n_iterations,
            n_locs,
            n_functions,
            tau,
            n_inputs,
            n_cls: n_tasks,
            pos_mode,
            signatures_trainable: true,
            codes_trainable: true,
            d_pos: 16,
        };
        Ok(NeuralInterpreter {
            model: Model::new(config, seed).map_err(value_err)?,
        })
    }

    /// Task predictions for a batch of scalar inputs: rows of length
    /// `n_inputs` in, rows of length `n_tasks` out. `n_iterations`
    /// trades accuracy for compute; `keep_functions` drops functions.
    #[pyo3(signature = (inputs, n_iterations = None, keep_functions = None))]
    fn predict(
        &self,
        inputs: Vec<Vec<f64>>,
        n_iterations: Option<usize>,
        keep_functions: Option<Vec<bool>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let batch = batch_from_rows(inputs, self.model.config.n_inputs)?;
        let opts = EvalOptions {
            n_iterations,
            keep_functions,
        };
        let sess = self.model.session();
        let pred = self.model.predict(&sess, &batch, &opts).map_err(value_err)?;
        let t = self.model.config.n_cls;
        Ok(pred.value().data().chunks(t).map(|c| c.to_vec()).collect())
    }

    /// Trains on the dataset. `selection` is one of "pretrain",
    /// "cls_only", "cls_plus_type", "all". Returns per-epoch
    /// (split, loss, mean_r2) tuples.
    #[pyo3(signature = (dataset, epochs, lr = 0.006, batch_size = 128, seed = 0, selection = "pretrain"))]
    fn train(
        &mut self,
        dataset: &Dataset,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        selection: &str,
    ) -> PyResult<Vec<(String, f64, f64)>> {
        let sel = match selection {
            "pretrain" => train::Selection::Pretrain,
            other => train::Selection::Regime(other.parse().map_err(value_err)?),
        };
        let cfg = train::TrainConfig {
            epochs,
            batch_size,
            optim: train::OptimConfig {
                lr,
                ..Default::default()
            },
            seed,
            eval_batch: 512,
        };
        let mut state = train::TrainState::new(cfg.optim.clone(), seed);
        train::train_epochs(&mut self.model, &dataset.inner, &sel, &cfg, &mut state, epochs)
            .map_err(value_err)?;
        Ok(state
            .metrics
            .iter()
            .map(|m| (m.split.to_string(), m.loss, m.mean_r2()))
            .collect())
    }

    /// Validation loss and per-task R² on the dataset's held-out split.
    fn evaluate(&self, dataset: &Dataset) -> PyResult<(f64, Vec<f64>)> {
        train::evaluate(
            &self.model,
            &dataset.inner,
            &dataset.inner.val_idx,
            &EvalOptions::default(),
            512,
        )
        .map_err(value_err)
    }

    /// Appends `k` fresh functions to every script; everything else is
    /// untouched. Returns the number of new parameter tensors.
    fn add_functions(&mut self, k: usize, seed: u64) -> PyResult<usize> {
        let ids = self.model.add_functions(k, seed).map_err(value_err)?;
        Ok(ids.len())
    }

    /// Replaces the CLS tokens for a new task set.
    fn replace_cls_tokens(&mut self, n_tasks: usize, seed: u64) -> PyResult<()> {
        self.model.replace_cls_tokens(n_tasks, seed).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_model(&self.model, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(NeuralInterpreter {
            model: checkpoint::load_model(&path).map_err(|e| PyIOError::new_err(e.to_string()))?,
        })
    }

    #[getter]
    fn n_functions(&self) -> usize {
        self.model.config.n_functions
    }

    #[getter]
    fn n_tasks(&self) -> usize {
        self.model.config.n_cls
    }

    #[getter]
    fn n_params(&self) -> usize {
        let ids: Vec<_> = self.model.named_params().iter().map(|(_, id)| *id).collect();
        self.model.param_count(&ids)
    }

    /// Parameter count of everything shared across functions (independent
    /// of `n_functions` by construction).
    #[getter]
    fn n_shared_params(&self) -> usize {
        self.model.param_count(&self.model.shared_param_ids())
    }

    fn __repr__(&self) -> String {
        let c = &self.model.config;
        format!(
            "NeuralInterpreter(d={}, scripts={}, iterations={}, locs={}, functions={}, tasks={})",
            c.d_model, c.n_scripts, c.n_iterations, c.n_locs, c.n_functions, c.n_cls
        )
    }
}

#[pymodule]
fn neural_interpreter(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fuzzy_and, m)?)?;
    m.add_function(wrap_pyfunction!(fuzzy_not, m)?)?;
    m.add_function(wrap_pyfunction!(fuzzy_or, m)?)?;
    m.add_function(wrap_pyfunction!(r2_score, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_class::<FuzzyExpr>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<NeuralInterpreter>()?;
    Ok(())
}
