//! Python bindings for the preemptive-routing toolkit: top-k routing,
//! folding, placement planning, the routing-cache reader, and a frozen
//! grouter handle.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use preroute_core::routing::Normalizer;

fn to_py_err(e: preroute_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_normalizer(s: &str) -> PyResult<Normalizer> {
    Normalizer::parse(s).map_err(to_py_err)
}

/// Top-k routing over a batch of score rows. Returns (experts, weights) per
/// token; expert indices ascending, ties to the lower index.
#[pyfunction]
#[pyo3(signature = (scores, k, normalizer="softmax"))]
fn route(
    scores: Vec<Vec<f64>>,
    k: usize,
    normalizer: &str,
) -> PyResult<Vec<(Vec<u16>, Vec<f64>)>> {
    let norm = parse_normalizer(normalizer)?;
    scores
        .iter()
        .map(|row| {
            preroute_core::routing::route_token(row, k, norm)
                .map(|d| (d.experts, d.weights))
                .map_err(to_py_err)
        })
        .collect()
}

/// Global load-balance violation `(max - mean) / mean` over expert counts.
#[pyfunction]
fn maxvio(counts: Vec<u64>) -> PyResult<f64> {
    let load = preroute_core::routing::ExpertLoad { counts };
    preroute_core::routing::maxvio_global(&load).map_err(to_py_err)
}

/// Balanced hash-layer table: token id -> expert.
#[pyfunction]
fn hash_layer_table(token_freqs: Vec<f64>, num_experts: usize) -> PyResult<Vec<u16>> {
    preroute_core::routing::hash_layer_table(&token_freqs, num_experts).map_err(to_py_err)
}

/// Fold group sizes: `E_S mod E_T` groups get one extra expert, larger first.
#[pyfunction]
fn group_sizes(source_experts: usize, target_experts: usize) -> PyResult<Vec<usize>> {
    preroute_core::folding::group_sizes(source_experts, target_experts).map_err(to_py_err)
}

/// Greedy affinity merging over a co-activation count matrix.
#[pyfunction]
fn greedy_merge(counts: Vec<Vec<u64>>, sizes: Vec<usize>) -> PyResult<Vec<Vec<usize>>> {
    let e = counts.len();
    let mut flat = Vec::with_capacity(e * e);
    for row in &counts {
        if row.len() != e {
            return Err(PyValueError::new_err("affinity matrix must be square"));
        }
        flat.extend_from_slice(row);
    }
    let m = preroute_core::folding::AffinityMatrix {
        num_experts: e,
        counts: flat,
    };
    preroute_core::folding::greedy_merge(&m, &sizes).map_err(to_py_err)
}

/// Folds a `[d][E_S]` score matrix through a source->target assignment.
#[pyfunction]
fn fold_weights(
    weights: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    target_experts: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let d = weights.len();
    let es = assignment.len();
    let mut flat = Vec::with_capacity(d * es);
    for row in &weights {
        if row.len() != es {
            return Err(PyValueError::new_err("weight rows must have E_S columns"));
        }
        flat.extend_from_slice(row);
    }
    let mapping = preroute_core::folding::MappingMatrix {
        source_experts: es,
        target_experts,
        assignment,
    };
    let folded = preroute_core::folding::fold_weights(&flat, d, &mapping).map_err(to_py_err)?;
    Ok(folded
        .chunks(target_experts)
        .map(|c| c.to_vec())
        .collect())
}

/// Shannon entropy (bits) of a normalized affinity vector.
#[pyfunction]
fn entropy_bits(phi: Vec<f64>) -> f64 {
    preroute_core::ep::entropy_bits(&phi)
}

/// Default entropy-filter threshold for an expert count: log2(E) - 0.15.
#[pyfunction]
fn default_entropy_threshold(num_experts: usize) -> f64 {
    preroute_core::ep::default_entropy_threshold(num_experts)
}

/// Optimal expert-to-partition assignment for cluster centroids with masses.
/// Returns (groups, total affinity score).
#[pyfunction]
fn assign_experts(
    centroids: Vec<Vec<f64>>,
    masses: Vec<f64>,
    num_experts: usize,
) -> PyResult<(Vec<Vec<usize>>, f64)> {
    preroute_core::ep::assign_experts(&centroids, &masses, num_experts).map_err(to_py_err)
}

/// Minimum-communication partition for one sequence's per-token expert sets.
#[pyfunction]
fn place_sample(
    decisions: Vec<Vec<u16>>,
    groups: Vec<Vec<usize>>,
    num_experts: usize,
) -> PyResult<usize> {
    let ds: Vec<preroute_core::routing::RoutingDecision> = decisions
        .into_iter()
        .map(|experts| {
            let k = experts.len().max(1);
            preroute_core::routing::RoutingDecision {
                experts,
                weights: vec![1.0 / k as f64; k],
            }
        })
        .collect();
    preroute_core::ep::place_sample(&ds, &groups, num_experts).map_err(to_py_err)
}

/// Gradient-alignment decomposition: (sum_sq, cross_term, norm_sq, stagnation).
#[pyfunction]
fn grad_alignment(grads: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64, bool)> {
    let ga = preroute_core::diagnostics::grad_alignment(&grads).map_err(to_py_err)?;
    Ok((ga.sum_sq, ga.cross_term, ga.norm_sq, ga.stagnation))
}

/// Dispatch-volume simulation over a cache file and plan file; returns the
/// report as a JSON string.
#[pyfunction]
#[pyo3(signature = (cache_path, plan_path, payload_bytes=64, seed=0))]
fn simulate_files(
    cache_path: PathBuf,
    plan_path: PathBuf,
    payload_bytes: u64,
    seed: u64,
) -> PyResult<String> {
    let cache = preroute_core::cache::RouteCache::load(&cache_path).map_err(to_py_err)?;
    let plan = preroute_core::ep::PlacementPlan::load(&plan_path).map_err(to_py_err)?;
    let report =
        preroute_core::comm::simulate(&cache, &plan, payload_bytes, seed).map_err(to_py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A loaded pre-dispatch routing cache.
#[pyclass]
struct RouteCache {
    inner: preroute_core::cache::RouteCache,
}

#[pymethods]
impl RouteCache {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: preroute_core::cache::RouteCache::load(&path).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn num_experts(&self) -> u32 {
        self.inner.num_experts
    }

    #[getter]
    fn k(&self) -> u8 {
        self.inner.k
    }

    #[getter]
    fn token_count(&self) -> u64 {
        self.inner.token_count
    }

    #[getter]
    fn sequence_length(&self) -> u32 {
        self.inner.sequence_length
    }

    /// Replays one token's decision: (experts, weights).
    #[pyo3(signature = (token, normalizer="softmax"))]
    fn decision(&self, token: u64, normalizer: &str) -> PyResult<(Vec<u16>, Vec<f64>)> {
        let norm = parse_normalizer(normalizer)?;
        let d = self.inner.decision(token, norm).map_err(to_py_err)?;
        Ok((d.experts, d.weights))
    }
}

/// A frozen grouter loaded from a checkpoint, routing raw token sequences.
#[pyclass(unsendable)]
struct FrozenRouter {
    inner: preroute_core::grouter::FrozenGrouter,
}

#[pymethods]
impl FrozenRouter {
    #[staticmethod]
    #[pyo3(signature = (path, k=2, normalizer="softmax"))]
    fn load(path: PathBuf, k: usize, normalizer: &str) -> PyResult<Self> {
        let norm = parse_normalizer(normalizer)?;
        Ok(Self {
            inner: preroute_core::grouter::FrozenGrouter::load(&path, k, norm)
                .map_err(to_py_err)?,
        })
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.inner.num_experts()
    }

    /// Routes one token sequence: (experts, weights) per token.
    fn route(&self, tokens: Vec<u16>) -> PyResult<Vec<(Vec<u16>, Vec<f64>)>> {
        let out = self.inner.route(&tokens, 1).map_err(to_py_err)?;
        Ok(out.into_iter().map(|d| (d.experts, d.weights)).collect())
    }

    /// Raw per-token score vectors for one sequence.
    fn scores(&self, tokens: Vec<u16>) -> PyResult<Vec<Vec<f64>>> {
        let e = self.inner.num_experts();
        let flat = self.inner.scores(&tokens, 1).map_err(to_py_err)?;
        Ok(flat.chunks(e).map(|c| c.to_vec()).collect())
    }
}

#[pymodule]
fn preroute_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(maxvio, m)?)?;
    m.add_function(wrap_pyfunction!(hash_layer_table, m)?)?;
    m.add_function(wrap_pyfunction!(group_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_merge, m)?)?;
    m.add_function(wrap_pyfunction!(fold_weights, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_bits, m)?)?;
    m.add_function(wrap_pyfunction!(default_entropy_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(assign_experts, m)?)?;
    m.add_function(wrap_pyfunction!(place_sample, m)?)?;
    m.add_function(wrap_pyfunction!(grad_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_files, m)?)?;
    m.add_class::<RouteCache>()?;
    m.add_class::<FrozenRouter>()?;
    Ok(())
}
