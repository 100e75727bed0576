//! Flow accumulation: an external sweep, a division-based three-phase
//! algorithm, and an in-memory reference.

use std::collections::{HashMap, HashSet};

use crate::divider::Division;
use crate::error::{Error, Result};
use crate::extmem::{ext_sort_by_key, get_f64, get_u64, put_f64, put_u64, ExtContext, ExtPq, Record, Stream, StreamWriter};
use crate::terrain::{sweep_key, tin_vertices, TinTriangle, TinVertexRecord};

pub const ACC_MAGIC: [u8; 4] = *b"ACC1";

#[derive(Debug, Clone, PartialEq)]
pub enum RainDistribution {
    Uniform(f64),
    Table(HashMap<u64, f64>),
}

impl RainDistribution {
    pub fn amount(&self, id: u64) -> f64 {
        match self {
            RainDistribution::Uniform(a) => *a,
            RainDistribution::Table(t) => t.get(&id).copied().unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| a.is_finite() && a >= 0.0;
        let good = match self {
            RainDistribution::Uniform(a) => ok(*a),
            RainDistribution::Table(t) => t.values().all(|&a| ok(a)),
        };
        if good {
            Ok(())
        } else {
            Err(Error::InvalidParams("rain amounts must be finite and >= 0".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccRecord {
    pub id: u64,
    pub acc: f64,
}

impl Record for AccRecord {
    const WIDTH: usize = 16;
    const MAGIC: [u8; 4] = ACC_MAGIC;
    fn encode(&self, o: &mut [u8]) {
        put_u64(o, 0, self.id);
        put_f64(o, 8, self.acc);
    }
    fn decode(b: &[u8]) -> Self {
        AccRecord {
            id: get_u64(b, 0),
            acc: get_f64(b, 8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowSummary {
    pub total_rain: f64,
    pub total_sink: f64,
    pub max_acc: f64,
}

impl FlowSummary {
    fn vertex(&mut self, rain: f64, acc: f64, sink: bool) {
        self.total_rain += rain;
        self.max_acc = self.max_acc.max(acc);
        if sink {
            self.total_sink += acc;
        }
    }
}

impl std::fmt::Display for FlowSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total_rain={} total_sink={} max_acc={}",
            self.total_rain, self.total_sink, self.max_acc
        )
    }
}

/// Accumulated water per vertex, sorted by id.
#[derive(Debug)]
pub struct FlowAccumulation {
    pub acc: Stream<AccRecord>,
    pub summary: FlowSummary,
}

fn sort_by_id(ctx: &ExtContext, src: impl IntoIterator<Item = Result<AccRecord>>) -> Result<Stream<AccRecord>> {
    ext_sort_by_key(ctx, src, |a: &AccRecord| a.id, false)
}

/// Reference: propagates water over the flow forest in sweep order.
pub fn brute_force_flow(tris: &[TinTriangle], rain: &RainDistribution) -> Result<(Vec<AccRecord>, FlowSummary)> {
    rain.validate()?;
    let mut verts: HashMap<u64, TinVertexRecord> = HashMap::new();
    for t in tris {
        for v in &t.v {
            verts.insert(v.id, *v);
        }
    }
    let mut order: Vec<&TinVertexRecord> = verts.values().collect();
    order.sort_by_key(|v| sweep_key(v.z, v.id));
    let mut acc: HashMap<u64, f64> = verts.keys().map(|&id| (id, 0.0)).collect();
    let mut done: HashSet<u64> = HashSet::with_capacity(verts.len());
    let mut summary = FlowSummary::default();
    for v in order {
        let r = rain.amount(v.id);
        let a = acc[&v.id] + r;
        acc.insert(v.id, a);
        done.insert(v.id);
        summary.vertex(r, a, v.is_sink());
        if !v.is_sink() {
            let t = v.flow_target as u64;
            if !verts.contains_key(&t) {
                return Err(Error::DanglingTarget {
                    source_id: v.id,
                    target: v.flow_target,
                });
            }
            if done.contains(&t) {
                return Err(Error::CycleDetected(v.id));
            }
            *acc.get_mut(&t).unwrap() += a;
        }
    }
    let mut out: Vec<AccRecord> = acc.into_iter().map(|(id, acc)| AccRecord { id, acc }).collect();
    out.sort_by_key(|a| a.id);
    Ok((out, summary))
}

type SweepKey = (u64, u64);
/// (water bits, source id)
type Inflow = (u64, u64);

/// Pops every entry addressed to `key`, summing the water. Entries that sort
/// before `key` address a vertex that never appeared.
fn collect_inflow(pq: &mut ExtPq<'_, SweepKey, Inflow>, key: SweepKey) -> Result<f64> {
    let mut inflow = 0.0;
    while let Some(&(k, (bits, src))) = pq.peek_min() {
        if k > key {
            break;
        }
        pq.pop_min()?;
        if k < key {
            return Err(Error::DanglingTarget {
                source_id: src,
                target: k.1 as i64,
            });
        }
        inflow += f64::from_bits(bits);
    }
    Ok(inflow)
}

fn drain_dangling(pq: &ExtPq<'_, SweepKey, Inflow>) -> Result<()> {
    match pq.peek_min() {
        Some(&(k, (_, src))) => Err(Error::DanglingTarget {
            source_id: src,
            target: k.1 as i64,
        }),
        None => Ok(()),
    }
}

/// Sweep-based accumulation: vertices in decreasing height, water forwarded
/// through an external priority queue keyed by the target's sweep position.
pub fn flow_sweep(ctx: &ExtContext, tin: &Stream<TinTriangle>, rain: &RainDistribution) -> Result<FlowAccumulation> {
    rain.validate()?;
    let verts = tin_vertices(ctx, tin)?;
    let order = ext_sort_by_key(ctx, ctx.reader(&verts)?, |v: &TinVertexRecord| sweep_key(v.z, v.id), false)?;
    drop(verts);
    let mut pq = ExtPq::<SweepKey, Inflow>::new(ctx);
    let mut out = ctx.temp_writer::<AccRecord>()?;
    let mut summary = FlowSummary::default();
    for v in ctx.reader(&order)? {
        let v = v?;
        let inflow = collect_inflow(&mut pq, sweep_key(v.z, v.id))?;
        let r = rain.amount(v.id);
        let a = inflow + r;
        out.push(&AccRecord { id: v.id, acc: a })?;
        summary.vertex(r, a, v.is_sink());
        if !v.is_sink() {
            if !(v.flow_target_height < v.z) {
                return Err(Error::CycleDetected(v.id));
            }
            pq.push(
                sweep_key(v.flow_target_height, v.flow_target as u64),
                (a.to_bits(), v.id),
            )?;
        }
    }
    drain_dangling(&pq)?;
    drop(order);
    let out = out.finish()?;
    let acc = sort_by_id(ctx, ctx.reader(&out)?)?;
    Ok(FlowAccumulation { acc, summary })
}

const NEXT_NONE: i64 = -1;
const NEXT_UNKNOWN: i64 = -2;
const NO_REGION: u64 = u64::MAX;

/// What one region knows about a boundary vertex.
#[derive(Debug, Clone, Copy)]
struct BoundaryRec {
    id: u64,
    z: f64,
    /// water arriving from this region's interior
    inflow: f64,
    own_sink: bool,
    /// next boundary vertex on the flow path, `NEXT_NONE` when the path ends
    /// (sink or interior sink), `NEXT_UNKNOWN` when another region owns the
    /// outgoing edge
    next: i64,
    next_z: f64,
    /// region where the outgoing edge enters the interior, with its target
    inject_region: u64,
    inject_target: u64,
}

impl Record for BoundaryRec {
    const WIDTH: usize = 57;
    const MAGIC: [u8; 4] = *b"BND1";
    fn encode(&self, o: &mut [u8]) {
        put_u64(o, 0, self.id);
        put_f64(o, 8, self.z);
        put_f64(o, 16, self.inflow);
        put_u64(o, 24, self.next as u64);
        put_f64(o, 32, self.next_z);
        put_u64(o, 40, self.inject_region);
        put_u64(o, 48, self.inject_target);
        o[56] = self.own_sink as u8;
    }
    fn decode(b: &[u8]) -> Self {
        BoundaryRec {
            id: get_u64(b, 0),
            z: get_f64(b, 8),
            inflow: get_f64(b, 16),
            next: get_u64(b, 24) as i64,
            next_z: get_f64(b, 32),
            inject_region: get_u64(b, 40),
            inject_target: get_u64(b, 48),
            own_sink: b[56] != 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Injection {
    region: u64,
    target: u64,
    amount: f64,
}

impl Record for Injection {
    const WIDTH: usize = 24;
    const MAGIC: [u8; 4] = *b"INJ1";
    fn encode(&self, o: &mut [u8]) {
        put_u64(o, 0, self.region);
        put_u64(o, 8, self.target);
        put_f64(o, 16, self.amount);
    }
    fn decode(b: &[u8]) -> Self {
        Injection {
            region: get_u64(b, 0),
            target: get_u64(b, 8),
            amount: get_f64(b, 16),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LocalVertex {
    v: TinVertexRecord,
    boundary: bool,
}

/// One region in memory: its vertices and an interior sweep order.
struct LocalRegion {
    verts: HashMap<u64, LocalVertex>,
    interior_order: Vec<u64>,
}

impl LocalRegion {
    fn load(ctx: &ExtContext, division: &Division<TinTriangle>, idx: usize) -> Result<Self> {
        let reg = &division.regions[idx];
        let mem = ctx.cfg().mem_items;
        if reg.items > mem {
            return Err(Error::RegionTooLarge {
                region: reg.id,
                items: reg.items,
                mem,
            });
        }
        let mut verts: HashMap<u64, LocalVertex> = HashMap::new();
        for f in ctx.reader(&reg.stream)? {
            let f = f?;
            for v in f.item.v {
                let e = verts.entry(v.id).or_insert(LocalVertex { v, boundary: false });
                e.boundary |= f.boundary;
            }
        }
        let mut interior: Vec<&LocalVertex> = verts.values().filter(|l| !l.boundary).collect();
        interior.sort_by_key(|l| sweep_key(l.v.z, l.v.id));
        let interior_order = interior.iter().map(|l| l.v.id).collect();
        Ok(LocalRegion {
            verts,
            interior_order,
        })
    }

    /// Routes interior water downstream. Returns per-vertex accumulations of
    /// interior vertices and the water handed to each boundary vertex.
    fn route(&self, rain: &RainDistribution, injected: &HashMap<u64, f64>, summary: Option<&mut FlowSummary>) -> Result<(HashMap<u64, f64>, HashMap<u64, f64>)> {
        let mut acc: HashMap<u64, f64> = HashMap::with_capacity(self.interior_order.len());
        let mut handed: HashMap<u64, f64> = HashMap::new();
        let mut summary = summary;
        for &id in &self.interior_order {
            let v = self.verts[&id].v;
            let r = rain.amount(id);
            let a = acc.get(&id).copied().unwrap_or(0.0) + r + injected.get(&id).copied().unwrap_or(0.0);
            acc.insert(id, a);
            if let Some(s) = summary.as_deref_mut() {
                s.vertex(r, a, v.is_sink());
            }
            if v.is_sink() {
                continue;
            }
            let t = v.flow_target as u64;
            match self.verts.get(&t) {
                None => {
                    return Err(Error::DanglingTarget {
                        source_id: id,
                        target: v.flow_target,
                    })
                }
                Some(l) if l.boundary => *handed.entry(t).or_insert(0.0) += a,
                Some(_) => *acc.entry(t).or_insert(0.0) += a,
            }
        }
        Ok((acc, handed))
    }

    /// First boundary vertex (or `None` for an interior sink) reached from an
    /// interior vertex.
    fn exit(&self, memo: &mut HashMap<u64, Option<(u64, f64)>>, start: u64) -> Result<Option<(u64, f64)>> {
        let mut path = Vec::new();
        let mut cur = start;
        let found = loop {
            if let Some(&e) = memo.get(&cur) {
                break e;
            }
            let l = self.verts[&cur];
            if l.boundary {
                break Some((cur, l.v.z));
            }
            path.push(cur);
            if l.v.is_sink() {
                break None;
            }
            let t = l.v.flow_target as u64;
            if !self.verts.contains_key(&t) {
                return Err(Error::DanglingTarget {
                    source_id: cur,
                    target: l.v.flow_target,
                });
            }
            cur = t;
        };
        for p in path {
            memo.insert(p, found);
        }
        Ok(found)
    }
}

/// Division-based accumulation in three phases: per-region interior routing,
/// a sweep over the boundary graph, and a second per-region pass that adds
/// boundary water to interior vertices.
pub fn flow_division(ctx: &ExtContext, division: &Division<TinTriangle>, rain: &RainDistribution) -> Result<FlowAccumulation> {
    rain.validate()?;
    let mut summary = FlowSummary::default();

    // phase 1
    let mut brecs = ctx.temp_writer::<BoundaryRec>()?;
    for idx in 0..division.regions.len() {
        let local = LocalRegion::load(ctx, division, idx)?;
        let (_, handed) = local.route(rain, &HashMap::new(), None)?;
        let mut memo = HashMap::new();
        let mut bids: Vec<u64> = local
            .verts
            .values()
            .filter(|l| l.boundary)
            .map(|l| l.v.id)
            .collect();
        bids.sort_unstable();
        for b in bids {
            let v = local.verts[&b].v;
            let mut rec = BoundaryRec {
                id: b,
                z: v.z,
                inflow: handed.get(&b).copied().unwrap_or(0.0),
                own_sink: v.is_sink(),
                next: NEXT_UNKNOWN,
                next_z: 0.0,
                inject_region: NO_REGION,
                inject_target: 0,
            };
            if v.is_sink() {
                rec.next = NEXT_NONE;
            } else if let Some(t) = local.verts.get(&(v.flow_target as u64)) {
                if t.boundary {
                    rec.next = t.v.id as i64;
                    rec.next_z = t.v.z;
                } else {
                    rec.inject_region = idx as u64;
                    rec.inject_target = t.v.id;
                    match local.exit(&mut memo, t.v.id)? {
                        Some((e, ez)) => {
                            rec.next = e as i64;
                            rec.next_z = ez;
                        }
                        None => rec.next = NEXT_NONE,
                    }
                }
            }
            brecs.push(&rec)?;
        }
    }
    let brecs = brecs.finish()?;

    // phase 2: one node per boundary vertex, then a sweep
    let by_id = ext_sort_by_key(ctx, ctx.reader(&brecs)?, |r: &BoundaryRec| r.id, false)?;
    drop(brecs);
    let mut nodes = ctx.temp_writer::<BoundaryRec>()?;
    {
        let mut cur: Option<BoundaryRec> = None;
        let emit = |w: &mut StreamWriter<BoundaryRec>, n: BoundaryRec| -> Result<()> {
            if n.next == NEXT_UNKNOWN {
                return Err(Error::DanglingTarget {
                    source_id: n.id,
                    target: NEXT_UNKNOWN,
                });
            }
            w.push(&n)
        };
        for r in ctx.reader(&by_id)? {
            let r = r?;
            match &mut cur {
                Some(n) if n.id == r.id => {
                    n.inflow += r.inflow;
                    // regions that see the outgoing edge agree on it
                    if r.next != NEXT_UNKNOWN {
                        n.next = r.next;
                        n.next_z = r.next_z;
                    }
                    if r.inject_region != NO_REGION {
                        n.inject_region = r.inject_region;
                        n.inject_target = r.inject_target;
                    }
                }
                _ => {
                    if let Some(n) = cur.take() {
                        emit(&mut nodes, n)?;
                    }
                    cur = Some(r);
                }
            }
        }
        if let Some(n) = cur.take() {
            emit(&mut nodes, n)?;
        }
    }
    let nodes = nodes.finish()?;
    drop(by_id);
    let order = ext_sort_by_key(ctx, ctx.reader(&nodes)?, |r: &BoundaryRec| sweep_key(r.z, r.id), false)?;
    drop(nodes);

    let mut out = ctx.temp_writer::<AccRecord>()?;
    let mut inj = ctx.temp_writer::<Injection>()?;
    {
        let mut pq = ExtPq::<SweepKey, Inflow>::new(ctx);
        for n in ctx.reader(&order)? {
            let n = n?;
            let inflow = collect_inflow(&mut pq, sweep_key(n.z, n.id))?;
            let r = rain.amount(n.id);
            let a = r + n.inflow + inflow;
            out.push(&AccRecord { id: n.id, acc: a })?;
            summary.vertex(r, a, n.own_sink);
            if n.next >= 0 {
                if !(n.next_z < n.z) {
                    return Err(Error::CycleDetected(n.id));
                }
                pq.push(sweep_key(n.next_z, n.next as u64), (a.to_bits(), n.id))?;
            }
            if n.inject_region != NO_REGION {
                inj.push(&Injection {
                    region: n.inject_region,
                    target: n.inject_target,
                    amount: a,
                })?;
            }
        }
        drain_dangling(&pq)?;
    }
    drop(order);
    let inj = inj.finish()?;
    let inj = ext_sort_by_key(ctx, ctx.reader(&inj)?, |i: &Injection| (i.region, i.target), false)?;

    // phase 3
    let mut ir = ctx.reader(&inj)?;
    let mut pending = ir.next_item()?;
    for idx in 0..division.regions.len() {
        let mut injected: HashMap<u64, f64> = HashMap::new();
        while let Some(i) = pending.filter(|i| i.region == idx as u64) {
            *injected.entry(i.target).or_insert(0.0) += i.amount;
            pending = ir.next_item()?;
        }
        let local = LocalRegion::load(ctx, division, idx)?;
        let (acc, _) = local.route(rain, &injected, Some(&mut summary))?;
        for id in &local.interior_order {
            out.push(&AccRecord { id: *id, acc: acc[id] })?;
        }
    }
    drop(ir);
    let out = out.finish()?;
    let acc = sort_by_id(ctx, ctx.reader(&out)?)?;
    Ok(FlowAccumulation { acc, summary })
}

/// Per-vertex comparison of two accumulation streams.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccComparison {
    pub compared: usize,
    pub mismatches: usize,
    pub max_rel_diff: f64,
    pub first_mismatch: Option<(u64, f64, f64)>,
}

impl AccComparison {
    pub fn is_match(&self) -> bool {
        self.mismatches == 0
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares two id-sorted accumulation streams; differing id sets count as
/// mismatches.
pub fn compare_acc(ctx: &ExtContext, a: &Stream<AccRecord>, b: &Stream<AccRecord>, rel_tol: f64) -> Result<AccComparison> {
    let mut ra = ctx.reader(a)?;
    let mut rb = ctx.reader(b)?;
    let mut cmp = AccComparison::default();
    let mut x = ra.next_item()?;
    let mut y = rb.next_item()?;
    loop {
        match (x, y) {
            (None, None) => break,
            (Some(p), Some(q)) if p.id == q.id => {
                cmp.compared += 1;
                let d = rel_diff(p.acc, q.acc);
                cmp.max_rel_diff = cmp.max_rel_diff.max(d);
                if d > rel_tol {
                    cmp.mismatches += 1;
                    cmp.first_mismatch.get_or_insert((p.id, p.acc, q.acc));
                }
                x = ra.next_item()?;
                y = rb.next_item()?;
            }
            (Some(p), q) if q.map_or(true, |q| p.id < q.id) => {
                cmp.mismatches += 1;
                cmp.first_mismatch.get_or_insert((p.id, p.acc, f64::NAN));
                x = ra.next_item()?;
            }
            (_, Some(q)) => {
                cmp.mismatches += 1;
                cmp.first_mismatch.get_or_insert((q.id, f64::NAN, q.acc));
                y = rb.next_item()?;
            }
            (Some(_), None) => unreachable!(),
        }
    }
    Ok(cmp)
}
