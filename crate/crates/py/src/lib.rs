//! Python bindings: stream types, converter inference, packing, sizing,
//! simulation and the full compile flow.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use itflow::converter::{infer_converter as infer, verify_converter as verify_cv, ConverterSpec};
use itflow::frontend::{pack as pack_layout, OpGraph, PackedLayout, TileConfig};
use itflow::graph::{DataflowGraph, KernelProfile};
use itflow::itensor::{ElementKind, ITensorType};
use itflow::pipeline::{bundled, compile as compile_graph, on_chip_bytes, verify, CompileOptions, Compiled};
use itflow::sim::{simulate as run_sim, SimConfig};
use itflow::sizing::{self, Strategy};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn kind(name: &str) -> PyResult<ElementKind> {
    ElementKind::named(name).ok_or_else(|| value_err(format!("unknown element kind `{name}`")))
}

/// Stream layout of a tensor: element tile, loop nest, and which loop
/// walks which data dim.
#[pyclass(name = "ITensorType", module = "itflow", from_py_object)]
#[derive(Clone)]
struct PyITensorType {
    inner: ITensorType,
}

#[pymethods]
impl PyITensorType {
    #[new]
    #[pyo3(signature = (data_shape, element_shape, iter_tripcounts, iter_steps, dim_source, kind="f32"))]
    fn new(
        data_shape: Vec<usize>,
        element_shape: Vec<usize>,
        iter_tripcounts: Vec<usize>,
        iter_steps: Vec<usize>,
        dim_source: Vec<usize>,
        kind: &str,
    ) -> PyResult<Self> {
        let inner = ITensorType::new(data_shape, element_shape, iter_tripcounts, iter_steps, dim_source, self::kind(kind)?)
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Row-major tiles of `tile` over `data_shape`.
    #[staticmethod]
    #[pyo3(signature = (data_shape, tile, kind="f32"))]
    fn row_major(data_shape: Vec<usize>, tile: Vec<usize>, kind: &str) -> PyResult<Self> {
        let inner = ITensorType::row_major(data_shape, tile, self::kind(kind)?).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ITensorType = serde_json::from_str(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("type serializes")
    }

    #[getter]
    fn data_shape(&self) -> Vec<usize> {
        self.inner.data_shape.clone()
    }

    #[getter]
    fn element_shape(&self) -> Vec<usize> {
        self.inner.element_shape.clone()
    }

    #[getter]
    fn iter_tripcounts(&self) -> Vec<usize> {
        self.inner.iter_tripcounts.clone()
    }

    #[getter]
    fn iter_steps(&self) -> Vec<usize> {
        self.inner.iter_steps.clone()
    }

    #[getter]
    fn dim_source(&self) -> Vec<usize> {
        self.inner.dim_source.clone()
    }

    fn token_count(&self) -> u64 {
        self.inner.token_count()
    }

    fn token_bytes(&self) -> u64 {
        self.inner.token_bytes()
    }

    /// Offset of every token, in stream order.
    fn access_sequence(&self) -> Vec<Vec<usize>> {
        self.inner.access_sequence()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let t = &self.inner;
        format!(
            "ITensorType(data={:?}, element={:?}, trips={:?}, steps={:?}, dims={:?}, kind={})",
            t.data_shape, t.element_shape, t.iter_tripcounts, t.iter_steps, t.dim_source, t.element_kind.name
        )
    }
}

#[pyclass(name = "ConverterSpec", module = "itflow", from_py_object)]
#[derive(Clone)]
struct PyConverterSpec {
    inner: ConverterSpec,
}

#[pymethods]
impl PyConverterSpec {
    #[getter]
    fn buf_shape(&self) -> Vec<usize> {
        self.inner.buf_shape.clone()
    }

    #[getter]
    fn shared_loop_depth(&self) -> usize {
        self.inner.shared_loop_depth
    }

    #[getter]
    fn byte_cost(&self) -> u64 {
        self.inner.byte_cost
    }

    fn reuse_count(&self) -> u64 {
        self.inner.reuse_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "ConverterSpec(buf_shape={:?}, shared_loop_depth={}, byte_cost={})",
            self.inner.buf_shape, self.inner.shared_loop_depth, self.inner.byte_cost
        )
    }
}

/// Smallest ping-pong buffer that reorders `src` into `dst`.
#[pyfunction]
fn infer_converter(src: &PyITensorType, dst: &PyITensorType) -> PyResult<PyConverterSpec> {
    let inner = infer(&src.inner, &dst.inner).map_err(value_err)?;
    Ok(PyConverterSpec { inner })
}

/// Replays both streams through the buffer; raises on the first miss.
#[pyfunction]
fn verify_converter(src: &PyITensorType, dst: &PyITensorType, spec: &PyConverterSpec) -> PyResult<()> {
    verify_cv(&src.inner, &dst.inner, &spec.inner).map_err(|c| value_err(format!("{c:?}")))
}

/// Peak FIFO occupancy between a producer `(d, ii)` and a consumer that
/// starts `delay` cycles later and pops every `dst_ii` cycles.
#[pyfunction]
fn max_tokens(d: u64, ii: u64, t: u64, dst_ii: u64, delay: u64) -> PyResult<u64> {
    let src = KernelProfile::new(d, ii, t).map_err(value_err)?;
    let dst = KernelProfile::new(1, dst_ii, t).map_err(value_err)?;
    sizing::max_tokens(&src, &dst, delay, t).map_err(value_err)
}

#[pyclass(name = "PackedLayout", module = "itflow", from_py_object)]
#[derive(Clone)]
struct PyPackedLayout {
    inner: PackedLayout,
}

#[pymethods]
impl PyPackedLayout {
    #[getter]
    fn packed_shape(&self) -> Vec<usize> {
        self.inner.packed_shape.clone()
    }

    #[getter]
    fn vector_group(&self) -> usize {
        self.inner.vector_group
    }

    /// Packed little-endian bytes of row-major f32 data.
    fn pack_f32(&self, data: Vec<f32>) -> PyResult<Vec<u8>> {
        self.inner.pack_f32_le(&data).map_err(value_err)
    }

    /// Packed order of row-major u8 data.
    fn pack_u8(&self, data: Vec<u8>) -> PyResult<Vec<u8>> {
        self.inner.pack_values(&data).map_err(value_err)
    }
}

#[pyfunction]
#[pyo3(signature = (shape, tiles, kind="f32", bus_bits=512, word_shape=None))]
fn pack(shape: Vec<usize>, tiles: Vec<usize>, kind: &str, bus_bits: u64, word_shape: Option<Vec<usize>>) -> PyResult<PyPackedLayout> {
    let inner = pack_layout(&shape, &tiles, self::kind(kind)?, bus_bits, word_shape.as_deref()).map_err(value_err)?;
    Ok(PyPackedLayout { inner })
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(value_err)
}

/// Sizes every stream of a graph document and returns the updated document.
#[pyfunction]
#[pyo3(signature = (graph_json, strategy="normal"))]
fn size_fifos(graph_json: &str, strategy: &str) -> PyResult<String> {
    let mut g = DataflowGraph::from_json(graph_json).map_err(value_err)?;
    let r = sizing::size_fifos(&g, self::strategy(strategy)?).map_err(value_err)?;
    r.apply(&mut g);
    Ok(g.to_json())
}

/// Simulates a graph document; returns the trace summary as JSON.
#[pyfunction]
#[pyo3(signature = (graph_json, horizon=50_000_000))]
fn simulate(graph_json: &str, horizon: u64) -> PyResult<String> {
    let g = DataflowGraph::from_json(graph_json).map_err(value_err)?;
    let trace = run_sim(
        &g,
        &SimConfig {
            horizon,
            ..Default::default()
        },
    )
    .map_err(value_err)?;
    Ok(trace.summary_json())
}

/// Result of a full compile.
#[pyclass(name = "Compiled", module = "itflow")]
struct PyCompiled {
    inner: Compiled,
}

#[pymethods]
impl PyCompiled {
    #[getter]
    fn groups(&self) -> Vec<Vec<String>> {
        self.inner.plan.groups.clone()
    }

    #[getter]
    fn group_costs(&self) -> Vec<u64> {
        self.inner.plan.costs.clone()
    }

    /// Fused over unfused intermediate on-chip bytes.
    #[getter]
    fn memory_ratio(&self) -> f64 {
        self.inner.memory.ratio()
    }

    #[getter]
    fn on_chip_bytes(&self) -> u64 {
        on_chip_bytes(&self.inner.graph)
    }

    fn graph_json(&self) -> String {
        self.inner.graph.to_json()
    }

    fn memory_json(&self) -> String {
        serde_json::to_string(&self.inner.memory).expect("report serializes")
    }

    /// Simulated latency after structural and converter checks.
    fn verify(&self) -> PyResult<u64> {
        verify(&self.inner.graph, &SimConfig::default())
            .map(|r| r.total_latency)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Compiles an operator graph, given as JSON or as a bundled name
/// (`demo`, `transformer`).
#[pyfunction]
#[pyo3(signature = (graph, tiles_json=None, cmax=None, strategy="normal"))]
fn compile(graph: &str, tiles_json: Option<&str>, cmax: Option<u64>, strategy: &str) -> PyResult<PyCompiled> {
    let (ops, mut tiles) = match bundled::by_name(graph) {
        Some(b) => b,
        None => (OpGraph::from_json(graph).map_err(value_err)?, TileConfig::default()),
    };
    if let Some(t) = tiles_json {
        tiles = TileConfig::from_json(t).map_err(value_err)?;
    }
    let opts = CompileOptions {
        tiles,
        cmax: cmax.unwrap_or(u64::MAX),
        strategy: self::strategy(strategy)?,
        ..Default::default()
    };
    let inner = compile_graph(&ops, &opts).map_err(|e| value_err(format!("{} pass: {e}", e.pass())))?;
    Ok(PyCompiled { inner })
}

#[pymodule]
#[pyo3(name = "itflow")]
fn itflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyITensorType>()?;
    m.add_class::<PyConverterSpec>()?;
    m.add_class::<PyPackedLayout>()?;
    m.add_class::<PyCompiled>()?;
    m.add_function(wrap_pyfunction!(infer_converter, m)?)?;
    m.add_function(wrap_pyfunction!(verify_converter, m)?)?;
    m.add_function(wrap_pyfunction!(max_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(pack, m)?)?;
    m.add_function(wrap_pyfunction!(size_fifos, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    Ok(())
}
