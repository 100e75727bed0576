//! r-way divisions: separator trees on samples, boundary reduction, tree
//! application with memory-bounded fan-out, and the recursive drivers.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::centerpoint::{
    classify_all, mix, rng_for, sample_separator_from_anchors, search_separator, Acceptance,
    SamplerParams, SeparatorCandidate,
};
use crate::error::{Error, Result};
use crate::extmem::{ExtContext, MemConfig, Record, Stream, StreamWriter};
use crate::geom::{Classification, GenCircle, Item, Point2, DEFAULT_TOL};

/// An item that can be stored in streams and region files.
pub trait DivItem: Item + Record + Clone {
    /// Magic of region files holding this item type.
    const REGION_MAGIC: [u8; 4];
}

/// An item plus its boundary flag, as stored in region files.
#[derive(Debug, Clone, PartialEq)]
pub struct Flagged<T> {
    pub item: T,
    pub boundary: bool,
}

impl<T: DivItem> Record for Flagged<T> {
    const WIDTH: usize = T::WIDTH + 1;
    const MAGIC: [u8; 4] = T::REGION_MAGIC;
    fn encode(&self, out: &mut [u8]) {
        self.item.encode(&mut out[..T::WIDTH]);
        out[T::WIDTH] = self.boundary as u8;
    }
    fn decode(buf: &[u8]) -> Self {
        Flagged {
            item: T::decode(&buf[..T::WIDTH]),
            boundary: buf[T::WIDTH] != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivisionParams {
    pub r: usize,
    pub c0: f64,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub c4: f64,
    pub eps: f64,
    pub k: usize,
    pub max_retries: usize,
    pub seed: u64,
    pub tol: f64,
    pub sampler: SamplerParams,
}

impl Default for DivisionParams {
    fn default() -> Self {
        DivisionParams {
            r: 1,
            c0: 8.0,
            c: 12.0,
            c1: 4.0,
            c2: 20.0,
            c4: 4.0,
            eps: 1.0 / 12.0,
            k: 1,
            max_retries: 64,
            seed: 0,
            tol: DEFAULT_TOL,
            sampler: SamplerParams::default(),
        }
    }
}

impl DivisionParams {
    pub fn new(r: usize, seed: u64) -> Self {
        DivisionParams {
            r,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let consts = [self.c0, self.c, self.c1, self.c2, self.c4, self.eps];
        if self.r == 0 {
            return Err(Error::InvalidParams("r must be >= 1".into()));
        }
        if consts.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::InvalidParams("all constants must be positive".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::InvalidParams("max_retries must be >= 1".into()));
        }
        self.sampler.validate()
    }

    /// Closed-side acceptance derived from `eps`: open sides at most
    /// `3/4 + eps`, closed sides at most `3/4 + 2 eps`.
    fn node_acceptance(&self) -> Acceptance {
        Acceptance {
            open_side: Some(0.75 + self.eps),
            closed_side: Some(0.75 + 2.0 * self.eps),
            ..Acceptance::default()
        }
    }

    fn boundary_acceptance(&self) -> Acceptance {
        Acceptance {
            open_side: Some(0.75 + self.eps),
            ..Acceptance::default()
        }
    }

    fn sampler_for(&self, seed: u64) -> SamplerParams {
        SamplerParams {
            rng_seed: seed,
            ..self.sampler
        }
    }
}

fn log2c(x: f64) -> f64 {
    x.max(2.0).log2()
}

fn loglog2c(x: f64) -> f64 {
    x.max(4.0).log2().log2().max(1.0)
}

/// `⌈c0 · r̂ · log² r̂ · log log r̂⌉` with logs clamped below at 1.
pub fn sample_size(r_hat: usize, c0: f64) -> Result<usize> {
    if r_hat == 0 {
        return Err(Error::InvalidParams("r̂ must be >= 1".into()));
    }
    let r = r_hat as f64;
    Ok((c0 * r * log2c(r).powi(2) * loglog2c(r)).ceil() as usize)
}

/// Large-sample size `c0 · √(n r̂ / k) · log r̂ · log log r̂ · log(n/k)`.
pub fn strict_sample_size(n: usize, r_hat: usize, k: usize, c0: f64) -> Result<usize> {
    if r_hat == 0 || k == 0 {
        return Err(Error::InvalidParams("r̂ and k must be >= 1".into()));
    }
    let (n, r, k) = (n as f64, r_hat as f64, k as f64);
    Ok((c0 * (n * r / k).sqrt() * log2c(r) * loglog2c(r) * log2c(n / k)).ceil() as usize)
}

/// Subproblems at most this large take the small-input path.
pub fn small_input_threshold(cfg: MemConfig) -> f64 {
    let mb = cfg.blocks() as f64;
    mb * log2c(mb).powi(3) * loglog2c(mb)
}

/// `r̄ = (1/B) · log³(M/B) · log log(M/B)`, at least 2.
pub fn small_input_rbar(cfg: MemConfig) -> usize {
    let mb = cfg.blocks() as f64;
    ((log2c(mb).powi(3) * loglog2c(mb)) / cfg.block_items as f64)
        .ceil()
        .max(2.0) as usize
}

/// Uniform sample without replacement in one pass (reservoir sampling).
pub fn sample_subset<T: Record>(ctx: &ExtContext, items: &Stream<T>, size: usize, seed: u64) -> Result<Vec<T>> {
    reservoir(ctx.reader(items)?, items.len(), size, seed)
}

fn reservoir<T>(mut it: impl Iterator<Item = Result<T>>, len: usize, size: usize, seed: u64) -> Result<Vec<T>> {
    if size > len {
        return Err(Error::StreamTooShort {
            requested: size,
            available: len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    let mut i = 0usize;
    for t in it.by_ref() {
        let t = t?;
        if i < size {
            out.push(t);
        } else {
            let j = rng.gen_range(0..=i);
            if j < size {
                out[j] = t;
            }
        }
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// `inside` receives items inside or crossing the separator, `outside`
    /// those outside or crossing it.
    Internal {
        separator: GenCircle,
        inside: usize,
        outside: usize,
    },
    Leaf {
        region: usize,
    },
}

/// Binary tree of separators rooted at node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorTree {
    pub nodes: Vec<TreeNode>,
}

impl SeparatorTree {
    pub fn single_leaf() -> Self {
        SeparatorTree {
            nodes: vec![TreeNode::Leaf { region: 0 }],
        }
    }

    pub fn n_regions(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn n_separators(&self) -> usize {
        self.nodes.len() - self.n_regions()
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((v, d)) = stack.pop() {
            match self.nodes[v] {
                TreeNode::Leaf { .. } => best = best.max(d),
                TreeNode::Internal { inside, outside, .. } => {
                    stack.push((inside, d + 1));
                    stack.push((outside, d + 1));
                }
            }
        }
        best
    }

    /// `⌈log_{12/11}(12 r̂)⌉`.
    pub fn depth_bound(r_hat: usize) -> usize {
        ((12.0 * r_hat.max(1) as f64).ln() / (12.0f64 / 11.0).ln()).ceil() as usize
    }

    /// Regions (with boundary flag) reached by an item.
    pub fn route<I: Item>(&self, item: &I, boundary: bool, tol: f64) -> Result<Vec<(usize, bool)>> {
        let mut hits = Vec::new();
        self.descend(0, item, boundary, tol, &|_| false, &mut hits)?;
        Ok(hits
            .into_iter()
            .map(|(v, b)| match self.nodes[v] {
                TreeNode::Leaf { region } => (region, b),
                TreeNode::Internal { .. } => unreachable!(),
            })
            .collect())
    }

    /// Pushes the nodes where the item stops: leaves, or nodes for which
    /// `stop` holds.
    fn descend<I: Item>(
        &self,
        from: usize,
        item: &I,
        boundary: bool,
        tol: f64,
        stop: &dyn Fn(usize) -> bool,
        out: &mut Vec<(usize, bool)>,
    ) -> Result<()> {
        let mut stack = vec![(from, boundary)];
        while let Some((v, b)) = stack.pop() {
            if v != from && stop(v) {
                out.push((v, b));
                continue;
            }
            match &self.nodes[v] {
                TreeNode::Leaf { .. } => out.push((v, b)),
                TreeNode::Internal {
                    separator,
                    inside,
                    outside,
                } => match item.classify(separator, tol)? {
                    Classification::Inside => stack.push((*inside, b)),
                    Classification::Outside => stack.push((*outside, b)),
                    Classification::Intersecting => {
                        stack.push((*outside, true));
                        stack.push((*inside, true));
                    }
                },
            }
        }
        Ok(())
    }

    /// Leaf nodes in region order.
    fn leaf_nodes(&self) -> Vec<usize> {
        let mut leaves: Vec<(usize, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                TreeNode::Leaf { region } => Some((*region, i)),
                _ => None,
            })
            .collect();
        leaves.sort();
        leaves.into_iter().map(|(_, i)| i).collect()
    }

    /// Numbers leaves 0..R-1 in depth-first order, inside child first.
    fn renumber(&mut self) {
        let mut next = 0;
        let mut stack = vec![0usize];
        while let Some(v) = stack.pop() {
            match &mut self.nodes[v] {
                TreeNode::Leaf { region } => {
                    *region = next;
                    next += 1;
                }
                TreeNode::Internal { inside, outside, .. } => {
                    let (i, o) = (*inside, *outside);
                    stack.push(o);
                    stack.push(i);
                }
            }
        }
    }
}

struct Grower<'a> {
    params: &'a DivisionParams,
    seed: u64,
    stop: f64,
    depth_bound: usize,
    nodes: Vec<TreeNode>,
    draws: u64,
}

impl Grower<'_> {
    fn next_sampler(&mut self) -> SamplerParams {
        self.draws += 1;
        self.params.sampler_for(mix(self.seed, self.draws))
    }

    fn grow<I: Item + Clone>(&mut self, items: Vec<I>, depth: usize) -> Result<usize> {
        let node = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { region: 0 });
        if items.len() as f64 <= self.stop || items.len() < 5 || depth >= self.depth_bound {
            return Ok(node);
        }
        let acc = self.params.node_acceptance();
        let sampler = self.next_sampler();
        let anchors: Vec<Point2> = items.iter().map(Item::anchor).collect();
        let (cand, _) = search_separator(
            &anchors,
            |s| classify_all(&items, s, self.params.tol),
            |c| acc.accepts(c),
            self.params.max_retries,
            &sampler,
        )?;
        let (ins, outs) = split_items(&items, &cand.separator, self.params.tol)?;
        if ins.is_empty() || outs.is_empty() {
            return Ok(node);
        }
        let inside = self.grow(ins, depth + 1)?;
        let outside = self.grow(outs, depth + 1)?;
        self.nodes[node] = TreeNode::Internal {
            separator: cand.separator,
            inside,
            outside,
        };
        Ok(node)
    }
}

fn split_items<I: Item + Clone>(items: &[I], sep: &GenCircle, tol: f64) -> Result<(Vec<I>, Vec<I>)> {
    let mut ins = Vec::new();
    let mut outs = Vec::new();
    for it in items {
        match it.classify(sep, tol)? {
            Classification::Inside => ins.push(it.clone()),
            Classification::Outside => outs.push(it.clone()),
            Classification::Intersecting => {
                ins.push(it.clone());
                outs.push(it.clone());
            }
        }
    }
    Ok((ins, outs))
}

/// Grows a tree over in-memory items, stopping at subsets of at most `stop`
/// items.
fn build_tree_with_stop<I: Item + Clone>(items: &[I], stop: f64, r_hat: usize, params: &DivisionParams, seed: u64) -> Result<SeparatorTree> {
    let mut g = Grower {
        params,
        seed,
        stop,
        depth_bound: SeparatorTree::depth_bound(r_hat),
        nodes: Vec::new(),
        draws: 0,
    };
    g.grow(items.to_vec(), 0)?;
    let mut tree = SeparatorTree { nodes: g.nodes };
    tree.renumber();
    Ok(tree)
}

/// Recursive separator tree over the sample, stopping once a subset holds at
/// most `c · |Υ| / r̂` items.
pub fn build_separator_tree<I: Item + Clone>(sample: &[I], r_hat: usize, params: &DivisionParams) -> Result<SeparatorTree> {
    if r_hat == 0 {
        return Err(Error::InvalidParams("r̂ must be >= 1".into()));
    }
    let stop = params.c * sample.len() as f64 / r_hat as f64;
    build_tree_with_stop(sample, stop, r_hat, params, mix(params.seed, 1))
}

/// Per-leaf item and boundary counts of the sample routed through the tree.
pub fn leaf_stats<I: Item>(tree: &SeparatorTree, sample: &[I], flags: Option<&[bool]>, tol: f64) -> Result<Vec<(usize, usize)>> {
    let mut stats = vec![(0usize, 0usize); tree.n_regions()];
    for (i, it) in sample.iter().enumerate() {
        let f = flags.map_or(false, |f| f[i]);
        for (reg, b) in tree.route(it, f, tol)? {
            stats[reg].0 += 1;
            stats[reg].1 += b as usize;
        }
    }
    Ok(stats)
}

/// Splits leaves whose boundary count exceeds `c2 · √(k |Υ| / r̂)`, using
/// separators drawn from and balanced on the leaf's boundary items.
pub fn reduce_boundaries<I: Item + Clone>(tree: SeparatorTree, sample: &[I], r_hat: usize, params: &DivisionParams) -> Result<SeparatorTree> {
    let cap = params.c2 * (params.k as f64 * sample.len() as f64 / r_hat.max(1) as f64).sqrt();
    reduce_with_cap(tree, sample, None, cap, params, mix(params.seed, 2))
}

fn reduce_with_cap<I: Item + Clone>(
    mut tree: SeparatorTree,
    sample: &[I],
    flags: Option<&[bool]>,
    cap: f64,
    params: &DivisionParams,
    seed: u64,
) -> Result<SeparatorTree> {
    if !cap.is_finite() {
        return Ok(tree);
    }
    let leaves = tree.leaf_nodes();
    let mut content: HashMap<usize, Vec<(I, bool)>> = HashMap::new();
    for (i, it) in sample.iter().enumerate() {
        let f = flags.map_or(false, |f| f[i]);
        let mut hits = Vec::new();
        tree.descend(0, it, f, params.tol, &|_| false, &mut hits)?;
        for (v, b) in hits {
            content.entry(v).or_default().push((it.clone(), b));
        }
    }
    let mut changed = false;
    let mut work: Vec<(usize, Vec<(I, bool)>)> = leaves
        .into_iter()
        .map(|v| (v, content.remove(&v).unwrap_or_default()))
        .collect();
    let mut draws = 0u64;
    while let Some((v, items)) = work.pop() {
        let b = items.iter().filter(|(_, f)| *f).count();
        if (b as f64) <= cap || b < 5 {
            continue;
        }
        let boundary: Vec<I> = items.iter().filter(|(_, f)| *f).map(|(i, _)| i.clone()).collect();
        draws += 1;
        let sampler = params.sampler_for(mix(seed, draws));
        let acc = params.boundary_acceptance();
        let anchors: Vec<Point2> = boundary.iter().map(Item::anchor).collect();
        let (cand, _) = search_separator(
            &anchors,
            |s| classify_all(&boundary, s, params.tol),
            |c| acc.accepts(c),
            params.max_retries,
            &sampler,
        )?;
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for (it, f) in items {
            match it.classify(&cand.separator, params.tol)? {
                Classification::Inside => ins.push((it, f)),
                Classification::Outside => outs.push((it, f)),
                Classification::Intersecting => {
                    ins.push((it.clone(), true));
                    outs.push((it, true));
                }
            }
        }
        let bi = ins.iter().filter(|(_, f)| *f).count();
        let bo = outs.iter().filter(|(_, f)| *f).count();
        if ins.is_empty() || outs.is_empty() || bi.max(bo) >= b {
            continue;
        }
        let inside = tree.nodes.len();
        let outside = inside + 1;
        tree.nodes.push(TreeNode::Leaf { region: 0 });
        tree.nodes.push(TreeNode::Leaf { region: 0 });
        tree.nodes[v] = TreeNode::Internal {
            separator: cand.separator,
            inside,
            outside,
        };
        changed = true;
        work.push((outside, outs));
        work.push((inside, ins));
    }
    if changed {
        tree.renumber();
    }
    Ok(tree)
}

/// A region of a division: its items are stored consecutively in one file.
#[derive(Debug)]
pub struct Region<T> {
    pub id: usize,
    pub items: usize,
    pub boundary: usize,
    pub stream: Stream<Flagged<T>>,
}

#[derive(Debug)]
pub struct Division<T> {
    pub regions: Vec<Region<T>>,
    /// Items of the divided input.
    pub total_items: usize,
}

pub const MANIFEST_NAME: &str = "division.manifest";

impl<T: DivItem> Division<T> {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    /// `Σ b_i`.
    pub fn boundary_multiplicity(&self) -> usize {
        self.regions.iter().map(|r| r.boundary).sum()
    }

    pub fn max_region_items(&self) -> usize {
        self.regions.iter().map(|r| r.items).max().unwrap_or(0)
    }

    pub fn max_region_boundary(&self) -> usize {
        self.regions.iter().map(|r| r.boundary).max().unwrap_or(0)
    }

    /// Number of distinct boundary items: one scan of the regions plus an
    /// external sort of the boundary records.
    pub fn distinct_boundary(&self, ctx: &ExtContext) -> Result<usize> {
        let mut w = ctx.temp_writer::<T>()?;
        for reg in &self.regions {
            for f in ctx.reader(&reg.stream)? {
                let f = f?;
                if f.boundary {
                    w.push(&f.item)?;
                }
            }
        }
        let s = w.finish()?;
        let sorted = crate::extmem::ext_sort_by_key(ctx, ctx.reader(&s)?, |t: &T| t.key(), true)?;
        Ok(sorted.len())
    }

    /// Moves region files into `dir` and writes the manifest there.
    pub fn persist(self, dir: &Path) -> Result<Division<T>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut regions = Vec::with_capacity(self.regions.len());
        for reg in self.regions {
            let dest = dir.join(region_file_name(reg.id));
            let stream = if reg.stream.is_temp() {
                reg.stream.persist(&dest)?
            } else if reg.stream.path() != dest {
                std::fs::copy(reg.stream.path(), &dest).map_err(|e| Error::io(&dest, e))?;
                Stream::open(&dest)?
            } else {
                reg.stream
            };
            regions.push(Region {
                id: reg.id,
                items: reg.items,
                boundary: reg.boundary,
                stream,
            });
        }
        let div = Division {
            regions,
            total_items: self.total_items,
        };
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, div.manifest_text()).map_err(|e| Error::io(&path, e))?;
        Ok(div)
    }

    pub fn manifest_text(&self) -> String {
        let mut s = format!(
            "regions={} items={} boundary_multiplicity={}\n",
            self.regions.len(),
            self.total_items,
            self.boundary_multiplicity()
        );
        for r in &self.regions {
            let name = r
                .stream
                .path()
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            writeln!(s, "region {} file={} items={} boundary={}", r.id, name, r.items, r.boundary).unwrap();
        }
        s
    }

    /// Reads a manifest; `path` may name the manifest or its directory.
    pub fn open(path: &Path) -> Result<Self> {
        let path: PathBuf = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: String| Error::Format {
            path: path.clone(),
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let h = parse_kv(header);
        let get = |m: &HashMap<&str, &str>, k: &str| -> Result<usize> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or invalid `{k}`")))
        };
        let n_regions = get(&h, "regions")?;
        let total_items = get(&h, "items")?;
        let mut regions = Vec::with_capacity(n_regions);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            if parts.next() != Some("region") {
                return Err(bad(format!("unexpected line `{line}`")));
            }
            let id: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad region id in `{line}`")))?;
            let kv = parse_kv(line);
            let file = kv.get("file").ok_or_else(|| bad(format!("no file in `{line}`")))?;
            let stream = Stream::<Flagged<T>>::open(dir.join(file))?;
            let items = get(&kv, "items")?;
            if stream.len() != items {
                return Err(bad(format!(
                    "region {id}: manifest says {items} items, file holds {}",
                    stream.len()
                )));
            }
            regions.push(Region {
                id,
                items,
                boundary: get(&kv, "boundary")?,
                stream,
            });
        }
        if regions.len() != n_regions {
            return Err(bad(format!(
                "header announces {n_regions} regions, found {}",
                regions.len()
            )));
        }
        Ok(Division {
            regions,
            total_items,
        })
    }
}

fn parse_kv(line: &str) -> HashMap<&str, &str> {
    line.split_whitespace()
        .filter_map(|t| t.split_once('='))
        .collect()
}

pub fn region_file_name(id: usize) -> String {
    format!("region-{id:06}.bin")
}

/// Output of one part of a subproblem while it is being written.
struct PartWriter<T> {
    w: StreamWriter<Flagged<T>>,
    boundary: usize,
}

impl<T: DivItem> PartWriter<T> {
    fn new(ctx: &ExtContext) -> Result<Self> {
        Ok(PartWriter {
            w: ctx.temp_writer()?,
            boundary: 0,
        })
    }

    fn push(&mut self, f: &Flagged<T>) -> Result<()> {
        self.boundary += f.boundary as usize;
        self.w.push(f)
    }

    fn finish(self) -> Result<Part<T>> {
        let stream = self.w.finish()?;
        Ok(Part {
            items: stream.len(),
            boundary: self.boundary,
            stream,
        })
    }
}

struct Part<T> {
    stream: Stream<Flagged<T>>,
    items: usize,
    boundary: usize,
}

impl<T> Part<T> {
    fn alias(&self) -> Part<T> {
        Part {
            stream: self.stream.alias(),
            items: self.items,
            boundary: self.boundary,
        }
    }
}

/// A subproblem: the raw input or a flagged intermediate part.
enum Piece<'a, T> {
    Input(&'a Stream<T>),
    Part(Part<T>),
}

impl<T: DivItem> Piece<'_, T> {
    fn len(&self) -> usize {
        match self {
            Piece::Input(s) => s.len(),
            Piece::Part(p) => p.items,
        }
    }

    fn for_each(&self, ctx: &ExtContext, mut f: impl FnMut(Flagged<T>) -> Result<()>) -> Result<()> {
        match self {
            Piece::Input(s) => {
                for t in ctx.reader(s)? {
                    f(Flagged {
                        item: t?,
                        boundary: false,
                    })?;
                }
            }
            Piece::Part(p) => {
                for t in ctx.reader(&p.stream)? {
                    f(t?)?;
                }
            }
        }
        Ok(())
    }

    fn sample(&self, ctx: &ExtContext, size: usize, seed: u64) -> Result<Vec<Flagged<T>>> {
        match self {
            Piece::Input(s) => reservoir(
                ctx.reader(s)?.map(|t| {
                    t.map(|item| Flagged {
                        item,
                        boundary: false,
                    })
                }),
                s.len(),
                size,
                seed,
            ),
            Piece::Part(p) => reservoir(ctx.reader(&p.stream)?, p.items, size, seed),
        }
    }

    fn load(&self, ctx: &ExtContext) -> Result<Vec<Flagged<T>>> {
        let mut v = Vec::with_capacity(self.len());
        self.for_each(ctx, |f| {
            v.push(f);
            Ok(())
        })?;
        Ok(v)
    }

    fn into_part(self, ctx: &ExtContext) -> Result<Part<T>> {
        match self {
            Piece::Part(p) => Ok(p),
            Piece::Input(_) => {
                let mut w = PartWriter::new(ctx)?;
                self.for_each(ctx, |f| w.push(&f))?;
                w.finish()
            }
        }
    }
}

fn assemble<T: DivItem>(parts: Vec<Part<T>>, total_items: usize) -> Division<T> {
    Division {
        regions: parts
            .into_iter()
            .filter(|p| p.items > 0)
            .enumerate()
            .map(|(id, p)| Region {
                id,
                items: p.items,
                boundary: p.boundary,
                stream: p.stream,
            })
            .collect(),
        total_items,
    }
}

/// Distributes a stream through a separator tree. Each pass routes the
/// items of one subtree root down to a frontier of at most `⌊M/B⌋ - 1` nodes,
/// one output block per frontier node.
pub fn apply_tree<T: DivItem>(ctx: &ExtContext, input: &Stream<T>, tree: &SeparatorTree, tol: f64) -> Result<Division<T>> {
    let parts = apply_piece(ctx, Piece::Input(input), tree, tol)?;
    Ok(assemble(parts, input.len()))
}

fn apply_piece<T: DivItem>(ctx: &ExtContext, piece: Piece<'_, T>, tree: &SeparatorTree, tol: f64) -> Result<Vec<Part<T>>> {
    let fanout = ctx.cfg().blocks().saturating_sub(1);
    if fanout < 2 {
        return Err(Error::FanoutExceeded(format!(
            "memory holds {} blocks; a pass needs an input block and at least two output blocks",
            ctx.cfg().blocks()
        )));
    }
    let mut out: Vec<Option<Part<T>>> = (0..tree.n_regions()).map(|_| None).collect();
    let mut stack: Vec<(usize, Piece<'_, T>)> = vec![(0, piece)];
    while let Some((v, piece)) = stack.pop() {
        if let TreeNode::Leaf { region } = tree.nodes[v] {
            out[region] = Some(piece.into_part(ctx)?);
            continue;
        }
        let frontier = frontier(tree, v, fanout);
        let slot: HashMap<usize, usize> = frontier.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let mut writers = frontier
            .iter()
            .map(|_| PartWriter::new(ctx))
            .collect::<Result<Vec<_>>>()?;
        let is_frontier = |u: usize| slot.contains_key(&u);
        let mut hits = Vec::new();
        piece.for_each(ctx, |f| {
            hits.clear();
            tree.descend(v, &f.item, f.boundary, tol, &is_frontier, &mut hits)?;
            for &(u, b) in &hits {
                writers[slot[&u]].push(&Flagged {
                    item: f.item.clone(),
                    boundary: b,
                })?;
            }
            Ok(())
        })?;
        drop(piece);
        for (u, w) in frontier.into_iter().zip(writers).rev() {
            stack.push((u, Piece::Part(w.finish()?)));
        }
    }
    Ok(out
        .into_iter()
        .map(|p| p.expect("every leaf is reached by the pass structure"))
        .collect())
}

/// Breadth-first expansion from `root` while the frontier fits in `fanout`.
fn frontier(tree: &SeparatorTree, root: usize, fanout: usize) -> Vec<usize> {
    let mut done: Vec<usize> = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        match tree.nodes[v] {
            TreeNode::Internal { inside, outside, .. } if done.len() + queue.len() + 2 <= fanout => {
                queue.push_back(inside);
                queue.push_back(outside);
            }
            _ => done.push(v),
        }
    }
    let mut order: Vec<usize> = done;
    order.sort();
    order
}

/// Recursive r-way division (see the crate README for the level structure).
pub fn divide<T: DivItem>(ctx: &ExtContext, input: &Stream<T>, params: &DivisionParams) -> Result<Division<T>> {
    params.validate()?;
    let n = input.len();
    check_r(n, params)?;
    let target = params.c * n as f64 / params.r as f64;
    let m = ctx.cfg().mem_items;
    let mut finals = Vec::new();
    let mut work: Vec<(Piece<'_, T>, f64, u64)> = vec![(Piece::Input(input), params.r as f64, mix(params.seed, 0))];
    while let Some((piece, r_s, seed)) = work.pop() {
        let len = piece.len();
        if params.r == 1 || len as f64 <= target || len < 5 {
            finals.push(piece.into_part(ctx)?);
        } else if len <= m {
            finals.extend(finish_in_memory(ctx, &piece, target, params, seed)?);
        } else {
            let parts = sampled_level(ctx, &piece, r_s, target, params, seed)?;
            drop(piece);
            let mut children = Vec::with_capacity(parts.len());
            for (j, p) in parts.into_iter().enumerate() {
                let r_child = (r_s * p.items as f64 / len as f64).ceil().max(1.0);
                children.push((Piece::Part(p), r_child, mix(seed, j as u64 + 1)));
            }
            work.extend(children.into_iter().rev());
        }
    }
    Ok(assemble(finals, n))
}

fn check_r(n: usize, params: &DivisionParams) -> Result<()> {
    if params.k == 0 {
        return Err(Error::InvalidParams("k must be >= 1".into()));
    }
    if params.r.saturating_mul(params.k) > n {
        return Err(Error::InvalidParams(format!(
            "r = {} exceeds |Γ|/k = {}/{}",
            params.r, n, params.k
        )));
    }
    Ok(())
}

fn finish_in_memory<T: DivItem>(ctx: &ExtContext, piece: &Piece<'_, T>, target: f64, params: &DivisionParams, seed: u64) -> Result<Vec<Part<T>>> {
    let loaded = piece.load(ctx)?;
    let items: Vec<T> = loaded.iter().map(|f| f.item.clone()).collect();
    let flags: Vec<bool> = loaded.iter().map(|f| f.boundary).collect();
    drop(loaded);
    let r_loc = ((params.c * items.len() as f64 / target).ceil() as usize).max(2);
    let cap = params.c2 * (params.k as f64 * items.len() as f64 / r_loc as f64).sqrt();
    let mut last = None;
    for attempt in 0..params.max_retries {
        let s = mix(seed, 1000 + attempt as u64);
        let tree = build_tree_with_stop(&items, target, r_loc, params, s)
            .and_then(|t| reduce_with_cap(t, &items, Some(&flags), cap, params, mix(s, 7)));
        let tree = match tree {
            Ok(t) => t,
            Err(e @ Error::RetriesExhausted(_)) => {
                last = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut writers = (0..tree.n_regions())
            .map(|_| PartWriter::new(ctx))
            .collect::<Result<Vec<_>>>()?;
        for (it, &f) in items.iter().zip(&flags) {
            for (reg, b) in tree.route(it, f, params.tol)? {
                writers[reg].push(&Flagged {
                    item: it.clone(),
                    boundary: b,
                })?;
            }
        }
        return writers.into_iter().map(PartWriter::finish).collect();
    }
    Err(last.unwrap_or(Error::RetriesExhausted(params.max_retries)))
}

/// One sampled level on a subproblem larger than memory.
fn sampled_level<T: DivItem>(ctx: &ExtContext, piece: &Piece<'_, T>, r_s: f64, target: f64, params: &DivisionParams, seed: u64) -> Result<Vec<Part<T>>> {
    let cfg = ctx.cfg();
    let len = piece.len() as f64;
    let small = len <= small_input_threshold(cfg);
    let r_sub = r_s.ceil().max(2.0) as usize;
    let (r_hat, stop_frac, cap) = if small {
        let r_hat = r_sub.min(small_input_rbar(cfg));
        let goal = target.max(cfg.mem_items as f64 / 4.0);
        (r_hat, goal / len, (cfg.mem_items as f64).max(2.0 * target))
    } else {
        let r_hat = r_sub.min(cfg.blocks()).max(2);
        let f = (params.c / r_hat as f64).max(target / len).min(0.5);
        (r_hat, f, 2.0 * f * len)
    };
    let stop_frac = stop_frac.min(0.5);
    let size = sample_size(r_hat, params.c0)?
        .min(cfg.mem_items)
        .min(piece.len());
    let mut last = Error::RetriesExhausted(params.max_retries);
    for attempt in 0..params.max_retries {
        let s = mix(seed, 5000 + attempt as u64);
        let sample = piece.sample(ctx, size, mix(s, 1))?;
        let items: Vec<T> = sample.iter().map(|f| f.item.clone()).collect();
        let flags: Vec<bool> = sample.iter().map(|f| f.boundary).collect();
        drop(sample);
        let stop = stop_frac * items.len() as f64;
        let bcap = params.c2 * (params.k as f64 * items.len() as f64 / r_hat as f64).sqrt();
        let tree = match build_tree_with_stop(&items, stop, r_hat, params, mix(s, 2))
            .and_then(|t| reduce_with_cap(t, &items, Some(&flags), bcap, params, mix(s, 3)))
        {
            Ok(t) => t,
            Err(e @ Error::RetriesExhausted(_)) => {
                last = e;
                continue;
            }
            Err(e) => return Err(e),
        };
        if tree.n_regions() < 2 {
            continue;
        }
        let parts = apply_piece(ctx, borrow_piece(piece), &tree, params.tol)?;
        let nonempty = parts.iter().filter(|p| p.items > 0).count();
        if nonempty >= 2 && parts.iter().all(|p| p.items as f64 <= cap && p.items < piece.len()) {
            return Ok(parts.into_iter().filter(|p| p.items > 0).collect());
        }
    }
    Err(last)
}

/// Re-borrows a piece for another pass without giving up ownership.
fn borrow_piece<'p, T>(piece: &'p Piece<'_, T>) -> Piece<'p, T> {
    match piece {
        Piece::Input(s) => Piece::Input(s),
        Piece::Part(p) => Piece::Part(p.alias()),
    }
}

/// Strict large-sample division with per-candidate checks against the full
/// subproblem and a per-region boundary cap of `c2 · √(k |Γ| / r)`.
pub fn divide_strict<T: DivItem>(ctx: &ExtContext, input: &Stream<T>, params: &DivisionParams) -> Result<Division<T>> {
    params.validate()?;
    let n = input.len();
    if params.k == 0 {
        return Err(Error::InvalidParams("k must be >= 1".into()));
    }
    let r_hat = params.r.min(ctx.cfg().blocks()).max(1);
    if params.k as f64 > n as f64 / r_hat as f64 {
        return Err(Error::AssumptionViolated(format!(
            "k = {} exceeds |Γ|/r̂ = {n}/{r_hat}",
            params.k
        )));
    }
    check_r(n, params)?;
    let target = params.c * n as f64 / params.r as f64;
    let mut finals: Vec<Part<T>> = Vec::new();
    let mut work: Vec<(Piece<'_, T>, f64, u64)> = vec![(Piece::Input(input), params.r as f64, mix(params.seed, 0))];
    while let Some((piece, r_s, seed)) = work.pop() {
        let len = piece.len();
        if params.r == 1 || len as f64 <= target || len < 5 {
            finals.push(piece.into_part(ctx)?);
            continue;
        }
        let parts = strict_level(ctx, &piece, r_s, target, params, seed)?;
        drop(piece);
        let mut children = Vec::with_capacity(parts.len());
        for (j, p) in parts.into_iter().enumerate() {
            let r_child = (r_s * p.items as f64 / len as f64).ceil().max(1.0);
            children.push((Piece::Part(p), r_child, mix(seed, j as u64 + 1)));
        }
        work.extend(children.into_iter().rev());
    }
    if params.r > 1 {
        let cap = params.c2 * (params.k as f64 * n as f64 / params.r as f64).sqrt();
        finals = reduce_region_boundaries(ctx, finals, cap, params)?;
    }
    Ok(assemble(finals, n))
}

fn strict_level<T: DivItem>(ctx: &ExtContext, piece: &Piece<'_, T>, r_s: f64, target: f64, params: &DivisionParams, seed: u64) -> Result<Vec<Part<T>>> {
    let cfg = ctx.cfg();
    let len = piece.len();
    let r_hat = (r_s.ceil() as usize).min(cfg.blocks()).max(2);
    let size = strict_sample_size(len, r_hat, params.k, params.c0)?
        .min(cfg.mem_items)
        .min(len);
    let stop_frac = (params.c / r_hat as f64).max(target / len as f64).min(0.5);
    let m = (params.c4 * (r_hat as f64).log2()).ceil().max(1.0) as usize;
    for attempt in 0..params.max_retries {
        let s = mix(seed, 9000 + attempt as u64);
        let sample: Vec<T> = piece
            .sample(ctx, size, mix(s, 1))?
            .into_iter()
            .map(|f| f.item)
            .collect();
        let stop = stop_frac * sample.len() as f64;
        let mut out = Vec::new();
        let mut node_seq = 0u64;
        let ok = strict_node(
            ctx,
            borrow_piece(piece),
            sample,
            stop,
            m,
            params,
            s,
            &mut node_seq,
            &mut out,
        )?;
        if ok && out.len() >= 2 {
            return Ok(out);
        }
    }
    Err(Error::RetriesExhausted(params.max_retries))
}

/// Splits `gamma` top-down along a tree grown on `upsilon`. Returns false when
/// some node exhausts its `m` candidates, signalling a bad sample.
#[allow(clippy::too_many_arguments)]
fn strict_node<T: DivItem>(
    ctx: &ExtContext,
    gamma: Piece<'_, T>,
    upsilon: Vec<T>,
    stop: f64,
    m: usize,
    params: &DivisionParams,
    seed: u64,
    node_seq: &mut u64,
    out: &mut Vec<Part<T>>,
) -> Result<bool> {
    if upsilon.len() as f64 <= stop || upsilon.len() < 5 || gamma.len() < 5 {
        out.push(gamma.into_part(ctx)?);
        return Ok(true);
    }
    *node_seq += 1;
    let node_seed = mix(seed, *node_seq);
    let sampler = params.sampler_for(node_seed);
    let anchors: Vec<Point2> = upsilon.iter().map(Item::anchor).collect();
    let acc = params.node_acceptance();
    let gamma_cap = params.c1 * (params.k as f64 * gamma.len() as f64).sqrt();
    let mut chosen = None;
    for cand_idx in 0..m {
        let mut rng = rng_for(sampler.rng_seed, cand_idx as u64);
        let sep = match sample_separator_from_anchors(&anchors, &sampler, &mut rng) {
            Ok(s) => s,
            Err(Error::NumericalDegeneracy(_) | Error::PoleSingularity) => continue,
            Err(e) => return Err(e),
        };
        let on_sample = classify_all(&upsilon, &sep, params.tol)?;
        if !acc.accepts(&on_sample) {
            continue;
        }
        let mut crossing = 0usize;
        gamma.for_each(ctx, |f| {
            if f.item.classify(&sep, params.tol)? == Classification::Intersecting {
                crossing += 1;
            }
            Ok(())
        })?;
        if crossing as f64 <= gamma_cap {
            chosen = Some(sep);
            break;
        }
    }
    let Some(sep) = chosen else {
        return Ok(false);
    };
    let (ins, outs) = split_items(&upsilon, &sep, params.tol)?;
    let (gi, go) = split_piece(ctx, &gamma, &sep, params.tol)?;
    drop(gamma);
    if gi.items == 0 || go.items == 0 {
        let whole = if gi.items == 0 { go } else { gi };
        out.push(whole);
        return Ok(true);
    }
    Ok(strict_node(ctx, Piece::Part(gi), ins, stop, m, params, seed, node_seq, out)?
        && strict_node(ctx, Piece::Part(go), outs, stop, m, params, seed, node_seq, out)?)
}

fn split_piece<T: DivItem>(ctx: &ExtContext, piece: &Piece<'_, T>, sep: &GenCircle, tol: f64) -> Result<(Part<T>, Part<T>)> {
    let mut wi = PartWriter::new(ctx)?;
    let mut wo = PartWriter::new(ctx)?;
    piece.for_each(ctx, |f| match f.item.classify(sep, tol)? {
        Classification::Inside => wi.push(&f),
        Classification::Outside => wo.push(&f),
        Classification::Intersecting => {
            let g = Flagged {
                item: f.item,
                boundary: true,
            };
            wi.push(&g)?;
            wo.push(&g)
        }
    })?;
    Ok((wi.finish()?, wo.finish()?))
}

/// Splits full regions whose boundary count exceeds `cap`, with separators
/// drawn from the region's boundary items.
fn reduce_region_boundaries<T: DivItem>(ctx: &ExtContext, parts: Vec<Part<T>>, cap: f64, params: &DivisionParams) -> Result<Vec<Part<T>>> {
    let mut done = Vec::with_capacity(parts.len());
    let mut work: Vec<Part<T>> = parts.into_iter().rev().collect();
    let mut draws = 0u64;
    while let Some(part) = work.pop() {
        if part.boundary as f64 <= cap || part.boundary < 5 {
            done.push(part);
            continue;
        }
        let view = Piece::Part(part.alias());
        let mut boundary: Vec<T> = Vec::new();
        view.for_each(ctx, |f| {
            if f.boundary {
                boundary.push(f.item);
            }
            Ok(())
        })?;
        draws += 1;
        let draw_seed = mix(params.seed ^ 0xB0DA, draws);
        let mem = ctx.cfg().mem_items;
        if boundary.len() > mem {
            let len = boundary.len();
            boundary = reservoir(boundary.into_iter().map(Ok), len, mem, draw_seed)?;
        }
        let sampler = params.sampler_for(draw_seed);
        let acc = params.boundary_acceptance();
        let anchors: Vec<Point2> = boundary.iter().map(Item::anchor).collect();
        let found = search_separator(
            &anchors,
            |s| classify_all(&boundary, s, params.tol),
            |c: &SeparatorCandidate| acc.accepts(c),
            params.max_retries,
            &sampler,
        );
        let Ok((cand, _)) = found else {
            done.push(part);
            continue;
        };
        let (gi, go) = split_piece(ctx, &view, &cand.separator, params.tol)?;
        drop(view);
        if gi.items == 0 || go.items == 0 || gi.boundary.max(go.boundary) >= part.boundary {
            done.push(part);
            continue;
        }
        drop(part);
        work.push(go);
        work.push(gi);
    }
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    Fast,
    BruteForce,
}

/// Optional caps checked by [`validate_division`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ValidationCaps {
    pub max_regions: Option<usize>,
    pub max_region_items: Option<f64>,
    pub max_region_boundary: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub regions: usize,
    pub items: usize,
    pub boundary_multiplicity: usize,
    pub distinct_boundary: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const BRUTEFORCE_LIMIT: usize = 5000;

/// Checks coverage, flag consistency, caps and (in brute-force mode) that no
/// interior item touches an item of another region.
pub fn validate_division<T: DivItem>(
    ctx: &ExtContext,
    input: &Stream<T>,
    division: &Division<T>,
    mode: ValidationMode,
    caps: ValidationCaps,
) -> Result<ValidationReport> {
    if mode == ValidationMode::BruteForce && input.len() > BRUTEFORCE_LIMIT {
        return Err(Error::InvalidParams(format!(
            "brute-force validation is limited to {BRUTEFORCE_LIMIT} items, input has {}",
            input.len()
        )));
    }
    let mut rep = ValidationReport {
        regions: division.regions.len(),
        items: input.len(),
        boundary_multiplicity: division.boundary_multiplicity(),
        ..Default::default()
    };
    // key -> (regions holding it, all copies flagged)
    let mut seen: HashMap<T::Key, (Vec<usize>, bool, bool)> = HashMap::new();
    for reg in &division.regions {
        let mut items = 0;
        let mut boundary = 0;
        for f in ctx.reader(&reg.stream)? {
            let f = f?;
            items += 1;
            boundary += f.boundary as usize;
            let e = seen.entry(f.item.key()).or_insert((Vec::new(), true, false));
            e.0.push(reg.id);
            e.1 &= f.boundary;
            e.2 |= f.boundary;
        }
        if items != reg.items || boundary != reg.boundary {
            rep.violations.push(format!(
                "region {}: recorded items={} boundary={}, stored items={items} boundary={boundary}",
                reg.id, reg.items, reg.boundary
            ));
        }
        if let Some(cap) = caps.max_region_items {
            if items as f64 > cap {
                rep.violations
                    .push(format!("region {}: {items} items exceeds cap {cap}", reg.id));
            }
        }
        if let Some(cap) = caps.max_region_boundary {
            if boundary as f64 > cap {
                rep.violations.push(format!(
                    "region {}: {boundary} boundary items exceeds cap {cap}",
                    reg.id
                ));
            }
        }
    }
    if let Some(cap) = caps.max_regions {
        if division.regions.len() > cap {
            rep.violations
                .push(format!("{} regions exceeds cap {cap}", division.regions.len()));
        }
    }
    let mut input_items = Vec::new();
    let mut covered = 0usize;
    for t in ctx.reader(input)? {
        let t = t?;
        match seen.get(&t.key()) {
            None => rep.violations.push(format!("item {:?} is in no region", t.key())),
            Some(_) => covered += 1,
        }
        if mode == ValidationMode::BruteForce {
            input_items.push(t);
        }
    }
    if covered != input.len() {
        rep.violations
            .push(format!("coverage: {covered} of {} items placed", input.len()));
    }
    for (key, (regs, all_flagged, any_flagged)) in &seen {
        if *any_flagged {
            rep.distinct_boundary += 1;
        }
        if regs.len() >= 2 && !all_flagged {
            rep.violations.push(format!(
                "item {key:?} is in {} regions but not flagged boundary in all",
                regs.len()
            ));
        }
    }
    if mode == ValidationMode::BruteForce {
        for a in &input_items {
            let Some((regs_a, _, flagged)) = seen.get(&a.key()) else {
                continue;
            };
            if *flagged {
                continue;
            }
            let home = regs_a[0];
            for b in &input_items {
                if a.key() == b.key() || !a.touches(b) {
                    continue;
                }
                if let Some((regs_b, _, _)) = seen.get(&b.key()) {
                    if !regs_b.contains(&home) {
                        rep.violations.push(format!(
                            "interior item {:?} of region {home} touches {:?} outside it",
                            a.key(),
                            b.key()
                        ));
                    }
                }
            }
        }
    }
    Ok(rep)
}
