//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sample_attention::cra::minimal_mass_fraction;
use sample_attention::harness::pipeline::{self, run_pipeline_detailed};
use sample_attention::harness::synthetic::{generate_synthetic, SyntheticSpec};
use sample_attention::harness::tensor_io;
use sample_attention::{
    arg_topk as core_arg_topk, causal_row_softmax, find_k as core_find_k, scaled_scores,
    AttentionHead, Error, HeadSet, Matrix, SparseConfig,
};

/// `(q, k, v)` of one head, each a list of rows.
type Qkv = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Invariant(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn head(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<AttentionHead> {
    AttentionHead::new(matrix(q)?, matrix(k)?, matrix(v)?, 0).map_err(to_py)
}

/// Thresholds and chunking of the sparse pipeline.
#[pyclass(name = "SparseConfig", frozen, from_py_object)]
#[derive(Clone)]
struct PySparseConfig {
    inner: SparseConfig,
}

#[pymethods]
impl PySparseConfig {
    #[new]
    #[pyo3(signature = (alpha_c=0.95, alpha_s=0.95, chunk_n=1, blk=128))]
    fn new(alpha_c: f64, alpha_s: f64, chunk_n: usize, blk: usize) -> PyResult<Self> {
        Ok(Self {
            inner: SparseConfig::new(alpha_c, alpha_s, chunk_n, blk).map_err(to_py)?,
        })
    }

    #[getter]
    fn alpha_c(&self) -> f64 {
        self.inner.alpha_c
    }

    #[getter]
    fn alpha_s(&self) -> f64 {
        self.inner.alpha_s
    }

    #[getter]
    fn chunk_n(&self) -> usize {
        self.inner.chunk_n
    }

    #[getter]
    fn blk(&self) -> usize {
        self.inner.blk
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "SparseConfig(alpha_c={}, alpha_s={}, chunk_n={}, blk={})",
            c.alpha_c, c.alpha_s, c.chunk_n, c.blk
        )
    }
}

/// Block-granular attention mask.
#[pyclass(name = "BlockMask", frozen)]
struct PyBlockMask {
    inner: sample_attention::BlockMask,
}

#[pymethods]
impl PyBlockMask {
    #[staticmethod]
    #[pyo3(signature = (text, seq_len=None))]
    fn from_text(text: &str, seq_len: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: sample_attention::BlockMask::from_text(text, seq_len).map_err(to_py)?,
        })
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    #[getter]
    fn blk(&self) -> usize {
        self.inner.blk()
    }

    /// Active key blocks of each query block.
    fn rows(&self) -> Vec<Vec<usize>> {
        self.inner.rows().to_vec()
    }

    fn block_density(&self) -> f64 {
        self.inner.block_density()
    }

    fn sparsity_ratio(&self) -> f64 {
        self.inner.sparsity_ratio()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!(
            "BlockMask(seq_len={}, blk={}, density={:.4})",
            self.inner.seq_len(),
            self.inner.blk(),
            self.inner.block_density()
        )
    }
}

/// Causal softmax attention probabilities `P` for one head.
#[pyfunction]
fn attention_probs(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let q = matrix(q)?;
    let d = q.cols();
    let scores = scaled_scores(&q, &matrix(k)?, d).map_err(to_py)?;
    Ok(causal_row_softmax(&scores).map_err(to_py)?.to_rows())
}

/// Dense causal attention output.
#[pyfunction]
fn dense_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    Ok(sample_attention::dense_causal_attention(&head(q, k, v)?).to_rows())
}

/// Sparse attention for one head; returns `(output, mask)`.
#[pyfunction]
#[pyo3(signature = (q, k, v, config=None))]
fn sparse_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    config: Option<PySparseConfig>,
) -> PyResult<(Vec<Vec<f64>>, PyBlockMask)> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let run = pipeline::sample_attention(&head(q, k, v)?, &cfg).map_err(to_py)?;
    Ok((run.output.to_rows(), PyBlockMask { inner: run.mask }))
}

/// Attention output restricted to a block mask.
#[pyfunction]
fn masked_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    mask: &PyBlockMask,
) -> PyResult<Vec<Vec<f64>>> {
    let (out, _) = sample_attention::sparse_attention(&head(q, k, v)?, &mask.inner).map_err(to_py)?;
    Ok(out.to_rows())
}

#[pyfunction]
fn find_k(scores: Vec<f64>, alpha: f64) -> PyResult<usize> {
    core_find_k(&scores, alpha).map_err(to_py)
}

#[pyfunction]
fn arg_topk(scores: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    core_arg_topk(&scores, k).map_err(to_py)
}

/// Smallest fraction of causal entries per row reaching mass `alpha`.
#[pyfunction]
fn min_mass_fraction(p: Vec<Vec<f64>>, alpha: f64) -> PyResult<f64> {
    minimal_mass_fraction(&matrix(p)?, alpha).map_err(to_py)
}

/// Heads as `(q, k, v)` triples from a synthetic spec given as JSON.
#[pyfunction]
fn synthetic_heads(spec_json: &str) -> PyResult<Vec<Qkv>> {
    let spec: SyntheticSpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let heads = generate_synthetic(&spec).map_err(to_py)?;
    Ok(heads
        .heads()
        .iter()
        .map(|h| (h.q.to_rows(), h.k.to_rows(), h.v.to_rows()))
        .collect())
}

fn head_set(heads: Vec<Qkv>) -> PyResult<HeadSet> {
    let heads = heads
        .into_iter()
        .enumerate()
        .map(|(i, (q, k, v))| {
            AttentionHead::new(matrix(q)?, matrix(k)?, matrix(v)?, i).map_err(to_py)
        })
        .collect::<PyResult<Vec<_>>>()?;
    HeadSet::new(heads).map_err(to_py)
}

/// Full pipeline over `(q, k, v)` triples; returns the metrics as JSON.
#[pyfunction]
#[pyo3(signature = (heads, config=None, oracle=true))]
fn run_pipeline(
    heads: Vec<Qkv>,
    config: Option<PySparseConfig>,
    oracle: bool,
) -> PyResult<String> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let run = run_pipeline_detailed(&head_set(heads)?, &cfg, oracle).map_err(to_py)?;
    Ok(run.report.to_json(false))
}

#[pyfunction]
fn save_tensors(heads: Vec<Qkv>, path: &str) -> PyResult<()> {
    tensor_io::save_tensors(&head_set(heads)?, path).map_err(to_py)
}

#[pyfunction]
fn load_tensors(path: &str) -> PyResult<Vec<Qkv>> {
    let heads = tensor_io::load_tensors(path).map_err(to_py)?;
    Ok(heads
        .heads()
        .iter()
        .map(|h| (h.q.to_rows(), h.k.to_rows(), h.v.to_rows()))
        .collect())
}

#[pymodule]
fn sampleattn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySparseConfig>()?;
    m.add_class::<PyBlockMask>()?;
    m.add_function(wrap_pyfunction!(attention_probs, m)?)?;
    m.add_function(wrap_pyfunction!(dense_attention, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_attention, m)?)?;
    m.add_function(wrap_pyfunction!(masked_attention, m)?)?;
    m.add_function(wrap_pyfunction!(find_k, m)?)?;
    m.add_function(wrap_pyfunction!(arg_topk, m)?)?;
    m.add_function(wrap_pyfunction!(min_mass_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_heads, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(save_tensors, m)?)?;
    m.add_function(wrap_pyfunction!(load_tensors, m)?)?;
    Ok(())
}
