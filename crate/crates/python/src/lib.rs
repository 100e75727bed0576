use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use geosep::centerpoint::{self, Acceptance, SamplerParams};
use geosep::divider::{self, Division, DivisionParams};
use geosep::extmem::{ExtContext, MemConfig, Stream};
use geosep::flow::{self, AccRecord, FlowSummary, RainDistribution};
use geosep::geom::{self, Classification, Point2, Point3, Triangle};
use geosep::terrain::{self, TinClassifier, TinMode, TinTriangle};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: geosep::Error) -> PyErr {
    use geosep::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::InvalidParams(_) | E::TooFewItems { .. } | E::DegenerateTriangle | E::PoleSingularity => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn class_name(c: Classification) -> &'static str {
    match c {
        Classification::Inside => "inside",
        Classification::Outside => "outside",
        Classification::Intersecting => "intersecting",
    }
}

/// Scratch space, memory budget and block I/O counters.
#[pyclass(module = "pygeosep", frozen)]
struct Context {
    inner: Arc<ExtContext>,
}

#[pymethods]
impl Context {
    #[new]
    #[pyo3(signature = (mem_items = 65536, block_items = 256, workdir = None))]
    fn new(mem_items: usize, block_items: usize, workdir: Option<PathBuf>) -> PyResult<Self> {
        let cfg = MemConfig::new(mem_items, block_items).map_err(py_err)?;
        let inner = match workdir {
            Some(d) => ExtContext::new_in(cfg, &d),
            None => ExtContext::new(cfg),
        }
        .map_err(py_err)?;
        Ok(Context { inner: Arc::new(inner) })
    }

    #[getter]
    fn mem_items(&self) -> usize {
        self.inner.cfg().mem_items
    }

    #[getter]
    fn block_items(&self) -> usize {
        self.inner.cfg().block_items
    }

    /// `(reads, writes)` in blocks since creation.
    fn io(&self) -> (u64, u64) {
        let s = self.inner.stats();
        (s.reads, s.writes)
    }
}

#[pyclass(module = "pygeosep", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct Disk {
    inner: geom::Disk,
}

#[pymethods]
impl Disk {
    #[new]
    fn new(id: u64, x: f64, y: f64, radius: f64) -> Self {
        Disk {
            inner: geom::Disk::new(id, Point2::new(x, y), radius),
        }
    }

    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn center(&self) -> (f64, f64) {
        (self.inner.center.x, self.inner.center.y)
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.inner.radius
    }

    fn intersects(&self, other: &Disk) -> bool {
        self.inner.intersects(&other.inner)
    }

    fn __repr__(&self) -> String {
        let d = &self.inner;
        format!("Disk(id={}, x={}, y={}, radius={})", d.id, d.center.x, d.center.y, d.radius)
    }
}

/// A circle or a halfplane `normal·p < offset`.
#[pyclass(module = "pygeosep", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct Separator {
    inner: geom::GenCircle,
}

#[pymethods]
impl Separator {
    #[staticmethod]
    fn circle(cx: f64, cy: f64, radius: f64) -> Self {
        Separator {
            inner: geom::GenCircle::Circle {
                center: Point2::new(cx, cy),
                radius,
            },
        }
    }

    #[staticmethod]
    fn halfplane(nx: f64, ny: f64, offset: f64) -> PyResult<Self> {
        let len = nx.hypot(ny);
        if !(len > 0.0) {
            return Err(PyValueError::new_err("halfplane normal must be nonzero"));
        }
        Ok(Separator {
            inner: geom::GenCircle::Halfplane {
                normal: Point2::new(nx / len, ny / len),
                offset: offset / len,
            },
        })
    }

    #[getter]
    fn is_circle(&self) -> bool {
        matches!(self.inner, geom::GenCircle::Circle { .. })
    }

    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        self.inner.signed_distance(Point2::new(x, y))
    }

    fn classify_disk(&self, d: &Disk) -> &'static str {
        class_name(geom::classify_disk(&d.inner, &self.inner, geom::DEFAULT_TOL))
    }

    fn classify_triangle(&self, pts: [(f64, f64); 3]) -> PyResult<&'static str> {
        let t = triangle(pts);
        geom::classify_triangle(&t, &self.inner, geom::DEFAULT_TOL)
            .map(class_name)
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        match self.inner {
            geom::GenCircle::Circle { center, radius } => {
                format!("Separator.circle({}, {}, {})", center.x, center.y, radius)
            }
            geom::GenCircle::Halfplane { normal, offset } => {
                format!("Separator.halfplane({}, {}, {})", normal.x, normal.y, offset)
            }
        }
    }
}

fn triangle(pts: [(f64, f64); 3]) -> Triangle {
    Triangle::new([0, 1, 2], pts.map(|(x, y)| Point2::new(x, y)))
}

#[pyfunction]
fn stereo_lift(x: f64, y: f64) -> (f64, f64, f64) {
    let q = geom::stereo_lift(Point2::new(x, y));
    (q.x, q.y, q.z)
}

#[pyfunction]
fn stereo_unlift(x: f64, y: f64, z: f64) -> PyResult<(f64, f64)> {
    let p = geom::stereo_unlift(Point3::new(x, y, z)).map_err(py_err)?;
    Ok((p.x, p.y))
}

/// `(cx, cy, radius)` of the circle through three points.
#[pyfunction]
fn circumcircle(pts: [(f64, f64); 3]) -> PyResult<(f64, f64, f64)> {
    let d = geom::circumcircle(&triangle(pts)).map_err(py_err)?;
    Ok((d.center.x, d.center.y, d.radius))
}

#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn gen_packing(n: usize, seed: u64) -> PyResult<Vec<Disk>> {
    let disks = terrain::gen_packing(n, seed).map_err(py_err)?;
    Ok(disks.into_iter().map(|inner| Disk { inner }).collect())
}

fn raw_disks(disks: &[Disk]) -> Vec<geom::Disk> {
    disks.iter().map(|d| d.inner).collect()
}

/// The first quarter-split separator; returns it with its
/// `(inside, outside, intersecting)` counts.
#[pyfunction]
#[pyo3(signature = (disks, seed = 0, max_retries = 64))]
fn find_separator(disks: Vec<Disk>, seed: u64, max_retries: usize) -> PyResult<(Separator, usize, usize, usize)> {
    let items = raw_disks(&disks);
    let accept = Acceptance::quarter_split();
    let c = centerpoint::find_separator(&items, |c| accept.accepts(c), max_retries, &SamplerParams::with_seed(seed))
        .map_err(py_err)?;
    Ok((Separator { inner: c.separator }, c.n_inside, c.n_outside, c.n_intersect))
}

/// A triangulated terrain stored as a stream of triangle records.
#[pyclass(module = "pygeosep", frozen)]
struct Tin {
    ctx: Arc<ExtContext>,
    stream: Stream<TinTriangle>,
}

#[pymethods]
impl Tin {
    #[staticmethod]
    fn open(ctx: &Context, path: PathBuf) -> PyResult<Self> {
        Ok(Tin {
            ctx: ctx.inner.clone(),
            stream: Stream::open(path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.stream.len()
    }

    #[getter]
    fn path(&self) -> PathBuf {
        self.stream.path().to_path_buf()
    }

    /// Triangles as three `(id, x, y, z, flow_target)` tuples each.
    fn triangles(&self) -> PyResult<Vec<[(u64, f64, f64, f64, i64); 3]>> {
        let tris = self.ctx.read_all(&self.stream).map_err(py_err)?;
        Ok(tris
            .iter()
            .map(|t| t.v.map(|v| (v.id, v.x, v.y, v.z, v.flow_target)))
            .collect())
    }

    /// A copy with every vertex's steepest-descent neighbor filled in.
    fn with_flow_directions(&self) -> PyResult<Tin> {
        let stream = terrain::compute_flow_directions(&self.ctx, &self.stream).map_err(py_err)?;
        Ok(Tin {
            ctx: self.ctx.clone(),
            stream,
        })
    }
}

fn tin_mode(mode: &str) -> PyResult<TinMode> {
    match mode {
        "grid-jitter" => Ok(TinMode::GridJitter),
        "delaunay" => Ok(TinMode::Delaunay),
        _ => Err(PyValueError::new_err(format!("unknown TIN mode {mode:?}"))),
    }
}

#[pyfunction]
#[pyo3(signature = (ctx, n, seed = 0, mode = "grid-jitter"))]
fn gen_tin(ctx: &Context, n: usize, seed: u64, mode: &str) -> PyResult<Tin> {
    let stream = terrain::gen_tin(&ctx.inner, n, seed, tin_mode(mode)?, None).map_err(py_err)?;
    Ok(Tin {
        ctx: ctx.inner.clone(),
        stream,
    })
}

enum DivisionKind {
    Disks(Division<geom::Disk>),
    Tin(terrain::TinDivision),
}

#[pyclass(module = "pygeosep", frozen)]
struct RegionDivision {
    ctx: Arc<ExtContext>,
    kind: DivisionKind,
}

impl RegionDivision {
    fn regions(&self) -> Vec<(usize, usize, usize)> {
        let regs = match &self.kind {
            DivisionKind::Disks(d) => d.regions.iter().map(|r| (r.id, r.items, r.boundary)).collect(),
            DivisionKind::Tin(t) => t.division.regions.iter().map(|r| (r.id, r.items, r.boundary)).collect(),
        };
        regs
    }
}

#[pymethods]
impl RegionDivision {
    #[getter]
    fn n_regions(&self) -> usize {
        self.regions().len()
    }

    /// `(region_id, items, boundary_items)` per region.
    #[getter]
    fn region_sizes(&self) -> Vec<(usize, usize, usize)> {
        self.regions()
    }

    #[getter]
    fn boundary_multiplicity(&self) -> usize {
        self.regions().iter().map(|r| r.2).sum()
    }

    #[getter]
    fn max_region_items(&self) -> usize {
        self.regions().iter().map(|r| r.1).max().unwrap_or(0)
    }

    fn distinct_boundary(&self) -> PyResult<usize> {
        match &self.kind {
            DivisionKind::Disks(d) => d.distinct_boundary(&self.ctx),
            DivisionKind::Tin(t) => t.division.distinct_boundary(&self.ctx),
        }
        .map_err(py_err)
    }

    /// Σ boundary vertices over regions; `None` for disk divisions.
    #[getter]
    fn boundary_vertices(&self) -> Option<usize> {
        match &self.kind {
            DivisionKind::Tin(t) => Some(t.boundary_vertex_multiplicity()),
            DivisionKind::Disks(_) => None,
        }
    }

    /// Disk ids of one region with their boundary flags.
    fn region_disks(&self, region: usize) -> PyResult<Vec<(u64, bool)>> {
        let DivisionKind::Disks(d) = &self.kind else {
            return Err(PyValueError::new_err("not a disk division"));
        };
        let reg = d
            .regions
            .get(region)
            .ok_or_else(|| PyValueError::new_err(format!("no region {region}")))?;
        let items = self.ctx.read_all(&reg.stream).map_err(py_err)?;
        Ok(items.iter().map(|f| (f.item.id, f.boundary)).collect())
    }
}

fn params(r: usize, seed: u64, k: usize) -> DivisionParams {
    DivisionParams {
        k,
        ..DivisionParams::new(r, seed)
    }
}

#[pyfunction]
#[pyo3(signature = (ctx, disks, r, seed = 0, strict = false, k = 1))]
fn divide_disks(ctx: &Context, disks: Vec<Disk>, r: usize, seed: u64, strict: bool, k: usize) -> PyResult<RegionDivision> {
    let c = &ctx.inner;
    let input = c.write_all(raw_disks(&disks)).map_err(py_err)?;
    let p = params(r, seed, k);
    let d = if strict {
        divider::divide_strict(c, &input, &p)
    } else {
        divider::divide(c, &input, &p)
    }
    .map_err(py_err)?;
    Ok(RegionDivision {
        ctx: c.clone(),
        kind: DivisionKind::Disks(d),
    })
}

#[pyfunction]
#[pyo3(signature = (tin, r, seed = 0, strict = false, k = 1, classifier = "triangles"))]
fn divide_tin(tin: &Tin, r: usize, seed: u64, strict: bool, k: usize, classifier: &str) -> PyResult<RegionDivision> {
    let cl = match classifier {
        "triangles" => TinClassifier::Triangles,
        "circumcircles" => TinClassifier::Circumcircles,
        _ => return Err(PyValueError::new_err(format!("unknown classifier {classifier:?}"))),
    };
    let d = terrain::divide_tin(&tin.ctx, &tin.stream, &params(r, seed, k), cl, strict).map_err(py_err)?;
    Ok(RegionDivision {
        ctx: tin.ctx.clone(),
        kind: DivisionKind::Tin(d),
    })
}

/// Per-vertex accumulated flow, sorted by vertex id.
#[pyclass(module = "pygeosep", frozen)]
struct Accumulation {
    ctx: Arc<ExtContext>,
    acc: Stream<AccRecord>,
    summary: FlowSummary,
}

#[pymethods]
impl Accumulation {
    fn __len__(&self) -> usize {
        self.acc.len()
    }

    #[getter]
    fn total_rain(&self) -> f64 {
        self.summary.total_rain
    }

    #[getter]
    fn total_sink(&self) -> f64 {
        self.summary.total_sink
    }

    #[getter]
    fn max_acc(&self) -> f64 {
        self.summary.max_acc
    }

    fn to_list(&self) -> PyResult<Vec<(u64, f64)>> {
        let recs = self.ctx.read_all(&self.acc).map_err(py_err)?;
        Ok(recs.into_iter().map(|a| (a.id, a.acc)).collect())
    }

    /// `(compared, mismatches, max_rel_diff)` against another result.
    #[pyo3(signature = (other, rel_tol = 1e-9))]
    fn compare(&self, other: &Accumulation, rel_tol: f64) -> PyResult<(usize, usize, f64)> {
        let c = flow::compare_acc(&self.ctx, &self.acc, &other.acc, rel_tol).map_err(py_err)?;
        Ok((c.compared, c.mismatches, c.max_rel_diff))
    }
}

#[derive(FromPyObject)]
enum Rain {
    Uniform(f64),
    Table(HashMap<u64, f64>),
}

impl From<Rain> for RainDistribution {
    fn from(r: Rain) -> Self {
        match r {
            Rain::Uniform(a) => RainDistribution::Uniform(a),
            Rain::Table(t) => RainDistribution::Table(t),
        }
    }
}

/// Accumulation by a single priority-queue sweep from high to low.
#[pyfunction]
#[pyo3(signature = (tin, rain = Rain::Uniform(1.0)))]
fn flow_sweep(tin: &Tin, rain: Rain) -> PyResult<Accumulation> {
    let out = flow::flow_sweep(&tin.ctx, &tin.stream, &rain.into()).map_err(py_err)?;
    Ok(Accumulation {
        ctx: tin.ctx.clone(),
        acc: out.acc,
        summary: out.summary,
    })
}

/// Accumulation over a TIN division, one region in memory at a time.
#[pyfunction]
#[pyo3(signature = (division, rain = Rain::Uniform(1.0)))]
fn flow_division(division: &RegionDivision, rain: Rain) -> PyResult<Accumulation> {
    let DivisionKind::Tin(t) = &division.kind else {
        return Err(PyValueError::new_err("flow needs a TIN division"));
    };
    let out = flow::flow_division(&division.ctx, &t.division, &rain.into()).map_err(py_err)?;
    Ok(Accumulation {
        ctx: division.ctx.clone(),
        acc: out.acc,
        summary: out.summary,
    })
}

/// In-memory reference accumulation.
#[pyfunction]
#[pyo3(signature = (tin, rain = Rain::Uniform(1.0)))]
fn brute_force_flow(tin: &Tin, rain: Rain) -> PyResult<Accumulation> {
    let tris = tin.ctx.read_all(&tin.stream).map_err(py_err)?;
    let (acc, summary) = flow::brute_force_flow(&tris, &rain.into()).map_err(py_err)?;
    Ok(Accumulation {
        ctx: tin.ctx.clone(),
        acc: tin.ctx.write_all(acc).map_err(py_err)?,
        summary,
    })
}

#[pymodule]
fn pygeosep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Context>()?;
    m.add_class::<Disk>()?;
    m.add_class::<Separator>()?;
    m.add_class::<Tin>()?;
    m.add_class::<RegionDivision>()?;
    m.add_class::<Accumulation>()?;
    m.add_function(wrap_pyfunction!(stereo_lift, m)?)?;
    m.add_function(wrap_pyfunction!(stereo_unlift, m)?)?;
    m.add_function(wrap_pyfunction!(circumcircle, m)?)?;
    m.add_function(wrap_pyfunction!(gen_packing, m)?)?;
    m.add_function(wrap_pyfunction!(find_separator, m)?)?;
    m.add_function(wrap_pyfunction!(gen_tin, m)?)?;
    m.add_function(wrap_pyfunction!(divide_disks, m)?)?;
    m.add_function(wrap_pyfunction!(divide_tin, m)?)?;
    m.add_function(wrap_pyfunction!(flow_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(flow_division, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_flow, m)?)?;
    Ok(())
}
