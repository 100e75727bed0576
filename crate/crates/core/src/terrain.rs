//! Triangulated terrains: records and file formats, flow directions,
//! triangle-based divisions and synthetic generators.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::divider::{divide, divide_strict, DivItem, Division, DivisionParams, Flagged};
use crate::error::{Error, Result};
use crate::extmem::{ext_sort_by_key, get_f64, get_u64, ordered_f64, put_f64, put_u64, ExtContext, Record, Stream};
use crate::geom::{
    circumcircle, classify_disk, classify_triangle, Classification, Disk, GenCircle, Item, Point2,
    Triangle,
};

pub const TIN_MAGIC: [u8; 4] = *b"TIN1";
pub const TIN_REGION_MAGIC: [u8; 4] = *b"TRG1";
pub const PACKING_MAGIC: [u8; 4] = *b"PKG1";
pub const PACKING_REGION_MAGIC: [u8; 4] = *b"PRG1";

pub const SINK: i64 = -1;

/// One triangle corner with its flow annotation. `flow_target_height` is 0
/// for sinks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinVertexRecord {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub flow_target: i64,
    pub flow_target_height: f64,
}

impl TinVertexRecord {
    pub fn new(id: u64, x: f64, y: f64, z: f64) -> Self {
        TinVertexRecord {
            id,
            x,
            y,
            z,
            flow_target: SINK,
            flow_target_height: 0.0,
        }
    }

    pub fn pos(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn is_sink(&self) -> bool {
        self.flow_target < 0
    }
}

impl Record for TinVertexRecord {
    const WIDTH: usize = 48;
    const MAGIC: [u8; 4] = *b"TVX1";
    fn encode(&self, out: &mut [u8]) {
        put_u64(out, 0, self.id);
        put_f64(out, 8, self.x);
        put_f64(out, 16, self.y);
        put_f64(out, 24, self.z);
        put_u64(out, 32, self.flow_target as u64);
        put_f64(out, 40, self.flow_target_height);
    }
    fn decode(b: &[u8]) -> Self {
        TinVertexRecord {
            id: get_u64(b, 0),
            x: get_f64(b, 8),
            y: get_f64(b, 16),
            z: get_f64(b, 24),
            flow_target: get_u64(b, 32) as i64,
            flow_target_height: get_f64(b, 40),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinTriangle {
    pub v: [TinVertexRecord; 3],
}

impl TinTriangle {
    pub fn new(v: [TinVertexRecord; 3]) -> Self {
        TinTriangle { v }
    }

    pub fn ids(&self) -> [u64; 3] {
        [self.v[0].id, self.v[1].id, self.v[2].id]
    }

    pub fn planar(&self) -> Triangle {
        Triangle::new(self.ids(), [self.v[0].pos(), self.v[1].pos(), self.v[2].pos()])
    }
}

impl Record for TinTriangle {
    const WIDTH: usize = 3 * TinVertexRecord::WIDTH;
    const MAGIC: [u8; 4] = TIN_MAGIC;
    fn encode(&self, out: &mut [u8]) {
        for (i, v) in self.v.iter().enumerate() {
            v.encode(&mut out[i * 48..(i + 1) * 48]);
        }
    }
    fn decode(b: &[u8]) -> Self {
        TinTriangle {
            v: [
                TinVertexRecord::decode(&b[0..48]),
                TinVertexRecord::decode(&b[48..96]),
                TinVertexRecord::decode(&b[96..144]),
            ],
        }
    }
}

impl Item for TinTriangle {
    type Key = [u64; 3];
    fn key(&self) -> [u64; 3] {
        let mut k = self.ids();
        k.sort_unstable();
        k
    }
    fn anchor(&self) -> Point2 {
        self.planar().centroid()
    }
    fn classify(&self, s: &GenCircle, tol: f64) -> Result<Classification> {
        classify_triangle(&self.planar(), s, tol)
    }
    fn touches(&self, other: &Self) -> bool {
        self.v.iter().any(|a| other.v.iter().any(|b| a.id == b.id))
    }
}

impl DivItem for TinTriangle {
    const REGION_MAGIC: [u8; 4] = TIN_REGION_MAGIC;
}

/// A TIN triangle classified through its circumcircle instead of its own
/// extent. Stored exactly like [`TinTriangle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircumTriangle(pub TinTriangle);

impl Record for CircumTriangle {
    const WIDTH: usize = TinTriangle::WIDTH;
    const MAGIC: [u8; 4] = TIN_MAGIC;
    fn encode(&self, out: &mut [u8]) {
        self.0.encode(out)
    }
    fn decode(b: &[u8]) -> Self {
        CircumTriangle(TinTriangle::decode(b))
    }
}

impl Item for CircumTriangle {
    type Key = [u64; 3];
    fn key(&self) -> [u64; 3] {
        self.0.key()
    }
    fn anchor(&self) -> Point2 {
        self.0.anchor()
    }
    fn classify(&self, s: &GenCircle, tol: f64) -> Result<Classification> {
        Ok(classify_disk(&circumcircle(&self.0.planar())?, s, tol))
    }
    fn touches(&self, other: &Self) -> bool {
        self.0.touches(&other.0)
    }
}

impl DivItem for CircumTriangle {
    const REGION_MAGIC: [u8; 4] = TIN_REGION_MAGIC;
}

impl Record for Disk {
    const WIDTH: usize = 32;
    const MAGIC: [u8; 4] = PACKING_MAGIC;
    fn encode(&self, out: &mut [u8]) {
        put_u64(out, 0, self.id);
        put_f64(out, 8, self.center.x);
        put_f64(out, 16, self.center.y);
        put_f64(out, 24, self.radius);
    }
    fn decode(b: &[u8]) -> Self {
        Disk::new(get_u64(b, 0), Point2::new(get_f64(b, 8), get_f64(b, 16)), get_f64(b, 24))
    }
}

impl DivItem for Disk {
    const REGION_MAGIC: [u8; 4] = PACKING_REGION_MAGIC;
}

/// Directed edge seen from `src`.
#[derive(Debug, Clone, Copy)]
struct EdgeRec {
    src: u64,
    src_z: f64,
    dst: u64,
    dst_z: f64,
}

impl Record for EdgeRec {
    const WIDTH: usize = 32;
    const MAGIC: [u8; 4] = *b"EDG1";
    fn encode(&self, o: &mut [u8]) {
        put_u64(o, 0, self.src);
        put_f64(o, 8, self.src_z);
        put_u64(o, 16, self.dst);
        put_f64(o, 24, self.dst_z);
    }
    fn decode(b: &[u8]) -> Self {
        EdgeRec {
            src: get_u64(b, 0),
            src_z: get_f64(b, 8),
            dst: get_u64(b, 16),
            dst_z: get_f64(b, 24),
        }
    }
}

/// Flow annotation keyed by a vertex id or a corner slot.
#[derive(Debug, Clone, Copy)]
struct FlowRec {
    key: u64,
    target: i64,
    target_z: f64,
}

impl Record for FlowRec {
    const WIDTH: usize = 24;
    const MAGIC: [u8; 4] = *b"FLW1";
    fn encode(&self, o: &mut [u8]) {
        put_u64(o, 0, self.key);
        put_u64(o, 8, self.target as u64);
        put_f64(o, 16, self.target_z);
    }
    fn decode(b: &[u8]) -> Self {
        FlowRec {
            key: get_u64(b, 0),
            target: get_u64(b, 8) as i64,
            target_z: get_f64(b, 16),
        }
    }
}

/// Steepest strictly-lower neighbor of a vertex, ties by smallest id.
fn better(cand: (f64, u64), best: Option<(f64, u64)>) -> bool {
    match best {
        None => true,
        Some((bz, bid)) => cand.0 < bz || (cand.0 == bz && cand.1 < bid),
    }
}

/// Annotates every corner with its vertex's flow target: the lowest
/// neighbor strictly below it, or a sink. Runs as external sorts of edge
/// records and corner slots plus merge joins.
pub fn compute_flow_directions(ctx: &ExtContext, tin: &Stream<TinTriangle>) -> Result<Stream<TinTriangle>> {
    // edges in both directions from every triangle
    let mut edges = ctx.temp_writer::<EdgeRec>()?;
    for t in ctx.reader(tin)? {
        let t = t?;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    edges.push(&EdgeRec {
                        src: t.v[i].id,
                        src_z: t.v[i].z,
                        dst: t.v[j].id,
                        dst_z: t.v[j].z,
                    })?;
                }
            }
        }
    }
    let edges = edges.finish()?;
    let by_src = ext_sort_by_key(ctx, ctx.reader(&edges)?, |e: &EdgeRec| e.src, false)?;
    drop(edges);

    let mut per_vertex = ctx.temp_writer::<FlowRec>()?;
    let mut cur: Option<(u64, f64, Option<(f64, u64)>)> = None;
    let flush = |w: &mut crate::extmem::StreamWriter<FlowRec>, c: (u64, f64, Option<(f64, u64)>)| {
        let (target, target_z) = match c.2 {
            Some((z, id)) => (id as i64, z),
            None => (SINK, 0.0),
        };
        w.push(&FlowRec {
            key: c.0,
            target,
            target_z,
        })
    };
    for e in ctx.reader(&by_src)? {
        let e = e?;
        match &mut cur {
            Some((id, z, best)) if *id == e.src => {
                if z.to_bits() != e.src_z.to_bits() {
                    return Err(Error::InconsistentHeights(e.src));
                }
                if e.dst_z < *z && better((e.dst_z, e.dst), *best) {
                    *best = Some((e.dst_z, e.dst));
                }
            }
            _ => {
                if let Some(c) = cur.take() {
                    flush(&mut per_vertex, c)?;
                }
                let best = (e.dst_z < e.src_z).then_some((e.dst_z, e.dst));
                cur = Some((e.src, e.src_z, best));
            }
        }
    }
    if let Some(c) = cur.take() {
        flush(&mut per_vertex, c)?;
    }
    let per_vertex = per_vertex.finish()?;
    drop(by_src);

    // corner slots (vertex id, 3·triangle + corner), sorted by vertex id
    let corners = ext_sort_by_key(
        ctx,
        ctx.reader(tin)?.enumerate().flat_map(|(ti, t)| {
            let recs: Vec<Result<(u64, u64)>> = match t {
                Ok(t) => (0..3).map(|c| Ok((t.v[c].id, 3 * ti as u64 + c as u64))).collect(),
                Err(e) => vec![Err(e)],
            };
            recs
        }),
        |c: &(u64, u64)| c.0,
        false,
    )?;
    let mut slots = ctx.temp_writer::<FlowRec>()?;
    {
        let mut flows = ctx.reader(&per_vertex)?;
        let mut f = flows.next_item()?;
        for c in ctx.reader(&corners)? {
            let (vid, slot) = c?;
            while matches!(&f, Some(r) if r.key < vid) {
                f = flows.next_item()?;
            }
            let r = f.as_ref().filter(|r| r.key == vid).expect("every corner vertex has a flow record");
            slots.push(&FlowRec {
                key: slot,
                target: r.target,
                target_z: r.target_z,
            })?;
        }
    }
    let slots = slots.finish()?;
    drop(corners);
    let slots = ext_sort_by_key(ctx, ctx.reader(&slots)?, |r: &FlowRec| r.key, false)?;

    let mut out = ctx.temp_writer::<TinTriangle>()?;
    let mut sr = ctx.reader(&slots)?;
    for t in ctx.reader(tin)? {
        let mut t = t?;
        for c in 0..3 {
            let r = sr.next_item()?.expect("one slot per corner");
            t.v[c].flow_target = r.target;
            t.v[c].flow_target_height = r.target_z;
        }
        out.push(&t)?;
    }
    out.finish()
}

/// In-memory reference for flow directions.
pub fn flow_directions_oracle(tris: &[TinTriangle]) -> HashMap<u64, (i64, f64)> {
    let mut z: HashMap<u64, f64> = HashMap::new();
    let mut nbrs: HashMap<u64, HashSet<u64>> = HashMap::new();
    for t in tris {
        for a in &t.v {
            z.insert(a.id, a.z);
            for b in &t.v {
                if a.id != b.id {
                    nbrs.entry(a.id).or_default().insert(b.id);
                }
            }
        }
    }
    z.iter()
        .map(|(&v, &zv)| {
            let mut best: Option<(f64, u64)> = None;
            for &u in &nbrs[&v] {
                let zu = z[&u];
                if zu < zv && better((zu, u), best) {
                    best = Some((zu, u));
                }
            }
            let ann = match best {
                Some((zu, u)) => (u as i64, zu),
                None => (SINK, 0.0),
            };
            (v, ann)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TinMode {
    GridJitter,
    Delaunay,
}

impl std::str::FromStr for TinMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid_jitter" | "grid-jitter" | "grid" => Ok(TinMode::GridJitter),
            "delaunay" => Ok(TinMode::Delaunay),
            _ => Err(Error::InvalidParams(format!("unknown TIN mode `{s}`"))),
        }
    }
}

pub const DELAUNAY_LIMIT: usize = 1_000_000;

/// Smooth height field: a sum of eight seeded sinusoids with wavelengths
/// between a sixth of the domain and the whole domain.
#[derive(Debug, Clone)]
pub struct HeightField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl HeightField {
    pub fn new(extent: f64, rng: &mut impl Rng) -> Self {
        let extent = extent.max(1.0);
        let waves = (0..8)
            .map(|_| {
                let lambda = rng.gen_range(extent / 6.0..extent * 1.5);
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / lambda;
                let amp = rng.gen_range(0.5..1.5) * lambda / extent;
                (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        HeightField { waves }
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum()
    }
}

/// Generates a synthetic TIN (without flow annotations) into `dest`, or a
/// scratch stream when `dest` is `None`.
pub fn gen_tin(ctx: &ExtContext, n: usize, seed: u64, mode: TinMode, dest: Option<&Path>) -> Result<Stream<TinTriangle>> {
    if n < 3 {
        return Err(Error::InvalidParams(format!("a TIN needs at least 3 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).sqrt().ceil() as usize;
    let field = HeightField::new(side as f64, &mut rng);
    let mut w = match dest {
        Some(p) => ctx.writer_at::<TinTriangle>(p)?,
        None => ctx.temp_writer::<TinTriangle>()?,
    };
    match mode {
        TinMode::GridJitter => {
            let n_side = side.max(2);
            let mut rows: Vec<Vec<TinVertexRecord>> = Vec::with_capacity(2);
            let make_row = |j: usize, rng: &mut ChaCha8Rng| -> Vec<TinVertexRecord> {
                (0..n_side)
                    .map(|i| {
                        let x = i as f64 + rng.gen_range(-0.3..0.3);
                        let y = j as f64 + rng.gen_range(-0.3..0.3);
                        TinVertexRecord::new((j * n_side + i) as u64, x, y, field.at(x, y))
                    })
                    .collect()
            };
            rows.push(make_row(0, &mut rng));
            for j in 1..n_side {
                rows.push(make_row(j, &mut rng));
                let (lo, hi) = (&rows[0], &rows[1]);
                for i in 0..n_side - 1 {
                    let (a, b, c, d) = (lo[i], lo[i + 1], hi[i + 1], hi[i]);
                    w.push(&TinTriangle::new([a, b, c]))?;
                    w.push(&TinTriangle::new([a, c, d]))?;
                }
                rows.remove(0);
            }
        }
        TinMode::Delaunay => {
            if n > DELAUNAY_LIMIT {
                return Err(Error::TooManyPoints(n));
            }
            let extent = side as f64;
            let pts: Vec<TinVertexRecord> = (0..n)
                .map(|i| {
                    let x = rng.gen_range(0.0..extent);
                    let y = rng.gen_range(0.0..extent);
                    TinVertexRecord::new(i as u64, x, y, field.at(x, y))
                })
                .collect();
            for t in delaunay_triangles(pts)? {
                w.push(&t)?;
            }
        }
    }
    w.finish()
}

#[derive(Debug, Clone, Copy)]
struct SpadeVertex(TinVertexRecord);

impl spade::HasPosition for SpadeVertex {
    type Scalar = f64;
    fn position(&self) -> spade::Point2<f64> {
        spade::Point2::new(self.0.x, self.0.y)
    }
}

/// Delaunay triangulation of the given vertices, counter-clockwise faces.
pub fn delaunay_triangles(pts: Vec<TinVertexRecord>) -> Result<Vec<TinTriangle>> {
    use spade::Triangulation;
    let verts: Vec<SpadeVertex> = pts.into_iter().map(SpadeVertex).collect();
    let dt = spade::DelaunayTriangulation::<SpadeVertex>::bulk_load_stable(verts)
        .map_err(|e| Error::InvalidParams(format!("triangulation failed: {e:?}")))?;
    Ok(dt
        .inner_faces()
        .map(|f| {
            let [a, b, c] = f.vertices();
            TinTriangle::new([a.data().0, b.data().0, c.data().0])
        })
        .collect())
}

/// Disks on a grid with unit spacing: the first `n` cells of a `⌈√n⌉`-wide
/// grid, centers jittered in `(-0.2, 0.2)²`, radii uniform in `[0.2, 0.45]`
/// and capped so every disk stays inside its own cell.
pub fn gen_packing(n: usize, seed: u64) -> Result<Vec<Disk>> {
    if n == 0 {
        return Err(Error::InvalidParams("a packing needs at least one disk".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).sqrt().ceil() as usize;
    Ok((0..n)
        .map(|i| {
            let jx: f64 = rng.gen_range(-0.2..0.2);
            let jy: f64 = rng.gen_range(-0.2..0.2);
            let r: f64 = rng.gen_range(0.2..=0.45);
            let cap = 0.5 - jx.abs().max(jy.abs());
            Disk::new(
                i as u64,
                Point2::new((i % side) as f64 + jx, (i / side) as f64 + jy),
                r.min(cap),
            )
        })
        .collect())
}

/// Disjoint-interior check through a uniform grid hash.
pub fn packing_is_disjoint(disks: &[Disk]) -> bool {
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let cell = disks.iter().map(|d| 2.0 * d.radius).fold(1e-9, f64::max);
    let key = |p: Point2| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    for (i, d) in disks.iter().enumerate() {
        cells.entry(key(d.center)).or_default().push(i);
    }
    for (i, d) in disks.iter().enumerate() {
        let (cx, cy) = key(d.center);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &j in cells.get(&(cx + dx, cy + dy)).map(Vec::as_slice).unwrap_or(&[]) {
                    if j > i && d.center.dist(disks[j].center) < d.radius + disks[j].radius - 1e-12 {
                        return false;
                    }
                }
            }
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TinClassifier {
    /// Classify triangles by their own extent.
    #[default]
    Triangles,
    /// Classify triangles through their circumcircles.
    Circumcircles,
}

/// Per-region vertex counts of a TIN division.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegionVertices {
    pub vertices: usize,
    pub boundary_vertices: usize,
}

/// A division of a TIN's triangles together with the derived vertex classes:
/// a vertex is boundary in a region iff some boundary triangle of that region
/// contains it.
#[derive(Debug)]
pub struct TinDivision {
    pub division: Division<TinTriangle>,
    pub vertex_counts: Vec<RegionVertices>,
}

impl TinDivision {
    pub fn from_division(ctx: &ExtContext, division: Division<TinTriangle>) -> Result<Self> {
        let mut vertex_counts = Vec::with_capacity(division.regions.len());
        for reg in &division.regions {
            let mut all = HashSet::new();
            let mut bnd = HashSet::new();
            for f in ctx.reader(&reg.stream)? {
                let f = f?;
                for v in &f.item.v {
                    all.insert(v.id);
                    if f.boundary {
                        bnd.insert(v.id);
                    }
                }
            }
            vertex_counts.push(RegionVertices {
                vertices: all.len(),
                boundary_vertices: bnd.len(),
            });
        }
        Ok(TinDivision {
            division,
            vertex_counts,
        })
    }

    /// `Σ b_i` over boundary vertices.
    pub fn boundary_vertex_multiplicity(&self) -> usize {
        self.vertex_counts.iter().map(|c| c.boundary_vertices).sum()
    }
}

/// Divides a TIN's triangles; `strict` selects the large-sample variant.
pub fn divide_tin(
    ctx: &ExtContext,
    tin: &Stream<TinTriangle>,
    params: &DivisionParams,
    classifier: TinClassifier,
    strict: bool,
) -> Result<TinDivision> {
    let division = match classifier {
        TinClassifier::Triangles => {
            if strict {
                divide_strict(ctx, tin, params)?
            } else {
                divide(ctx, tin, params)?
            }
        }
        TinClassifier::Circumcircles => {
            let view = tin.alias().cast::<CircumTriangle>();
            let d = if strict {
                divide_strict(ctx, &view, params)?
            } else {
                divide(ctx, &view, params)?
            };
            Division {
                total_items: d.total_items,
                regions: d
                    .regions
                    .into_iter()
                    .map(|r| crate::divider::Region {
                        id: r.id,
                        items: r.items,
                        boundary: r.boundary,
                        stream: r.stream.cast::<Flagged<TinTriangle>>(),
                    })
                    .collect(),
            }
        }
    };
    TinDivision::from_division(ctx, division)
}

/// Vertex-class disagreement between the two classifiers over a set of
/// separators: the fraction of vertices that the circumcircle rule marks as
/// boundary but the triangle rule does not, pooled over all separators.
pub fn classifier_disagreement(tris: &[TinTriangle], separators: &[GenCircle], tol: f64) -> Result<f64> {
    let mut circ_total = 0usize;
    let mut extra = 0usize;
    for s in separators {
        let mut by_tri = HashSet::new();
        let mut by_circ = HashSet::new();
        for t in tris {
            if t.classify(s, tol)? == Classification::Intersecting {
                by_tri.extend(t.ids());
            }
            if CircumTriangle(*t).classify(s, tol)? == Classification::Intersecting {
                by_circ.extend(t.ids());
            }
        }
        circ_total += by_circ.len();
        extra += by_circ.difference(&by_tri).count();
    }
    Ok(if circ_total == 0 {
        0.0
    } else {
        extra as f64 / circ_total as f64
    })
}

fn triangle_fingerprint(t: &TinTriangle) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut vs = t.v;
    vs.sort_by_key(|v| v.id);
    for v in &vs {
        for w in [v.id, v.z.to_bits(), v.x.to_bits(), v.y.to_bits()] {
            h = crate::centerpoint::mix(h, w);
        }
    }
    h
}

/// Confirms that a division was computed from this TIN: the triangle
/// multisets must agree (boundary copies counted once).
pub fn check_division_matches(ctx: &ExtContext, tin: &Stream<TinTriangle>, division: &Division<TinTriangle>) -> Result<()> {
    let mut want = (0u64, 0usize);
    for t in ctx.reader(tin)? {
        let t = t?;
        want.0 = want.0.wrapping_add(triangle_fingerprint(&t));
        want.1 += 1;
    }
    let mut got = (0u64, 0usize);
    let mut bw = ctx.temp_writer::<TinTriangle>()?;
    for reg in &division.regions {
        for f in ctx.reader(&reg.stream)? {
            let f = f?;
            if f.boundary {
                bw.push(&f.item)?;
            } else {
                got.0 = got.0.wrapping_add(triangle_fingerprint(&f.item));
                got.1 += 1;
            }
        }
    }
    let b = bw.finish()?;
    let distinct = ext_sort_by_key(ctx, ctx.reader(&b)?, |t: &TinTriangle| t.key(), true)?;
    for t in ctx.reader(&distinct)? {
        let t = t?;
        got.0 = got.0.wrapping_add(triangle_fingerprint(&t));
        got.1 += 1;
    }
    if got != want {
        return Err(Error::Mismatch(format!(
            "division holds {} distinct triangles, TIN holds {}; fingerprints {:016x} vs {:016x}",
            got.1, want.1, got.0, want.0
        )));
    }
    Ok(())
}

/// Distinct vertices of a TIN stream, sorted by id.
pub fn tin_vertices(ctx: &ExtContext, tin: &Stream<TinTriangle>) -> Result<Stream<TinVertexRecord>> {
    let corners = ctx
        .reader(tin)?
        .flat_map(|t| -> Vec<Result<TinVertexRecord>> {
            match t {
                Ok(t) => t.v.iter().map(|v| Ok(*v)).collect(),
                Err(e) => vec![Err(e)],
            }
        });
    ext_sort_by_key(ctx, corners, |v: &TinVertexRecord| v.id, true)
}

/// Sweep key: height descending, then id ascending.
pub fn sweep_key(z: f64, id: u64) -> (u64, u64) {
    (!ordered_f64(z), id)
}
