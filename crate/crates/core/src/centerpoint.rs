//! Random sphere separators: iterated-Radon centerpoints, conformal
//! normalization and random great circles, with accept/retry loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{
    gencircle_from_greatcircle, stereo_lift, Classification, ConformalMap, GenCircle, Item,
    Point2, Point3, DEFAULT_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerParams {
    /// Points lifted to the sphere per drawn separator.
    pub lift_sample_size: usize,
    /// Radon rounds; the working multiset holds `4 * radon_iterations + 1` points.
    pub radon_iterations: usize,
    pub rng_seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            lift_sample_size: 1000,
            radon_iterations: 200,
            rng_seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn with_seed(seed: u64) -> Self {
        SamplerParams {
            rng_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lift_sample_size < 5 || self.radon_iterations < 1 {
            return Err(Error::InvalidParams(format!(
                "lift_sample_size must be >= 5 and radon_iterations >= 1, got {} and {}",
                self.lift_sample_size, self.radon_iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparatorCandidate {
    pub separator: GenCircle,
    pub n_inside: usize,
    pub n_outside: usize,
    pub n_intersect: usize,
}

impl SeparatorCandidate {
    pub fn new(separator: GenCircle) -> Self {
        SeparatorCandidate {
            separator,
            n_inside: 0,
            n_outside: 0,
            n_intersect: 0,
        }
    }

    pub fn record(&mut self, c: Classification) {
        match c {
            Classification::Inside => self.n_inside += 1,
            Classification::Outside => self.n_outside += 1,
            Classification::Intersecting => self.n_intersect += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.n_inside + self.n_outside + self.n_intersect
    }

    pub fn closed_inside(&self) -> usize {
        self.n_inside + self.n_intersect
    }

    pub fn closed_outside(&self) -> usize {
        self.n_outside + self.n_intersect
    }
}

/// Conjunction of the acceptance tests used for separator candidates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Acceptance {
    /// Both closed sides hold at least a quarter of the items.
    pub quarter: bool,
    /// Both open sides hold at most this fraction of the items.
    pub open_side: Option<f64>,
    /// Both closed sides hold at most this fraction of the items.
    pub closed_side: Option<f64>,
    /// At most this many intersecting items.
    pub intersect_cap: Option<f64>,
}

impl Acceptance {
    pub fn always() -> Self {
        Self::default()
    }

    pub fn quarter_split() -> Self {
        Acceptance {
            quarter: true,
            ..Self::default()
        }
    }

    /// Open sides at most `10/12`.
    pub fn balanced() -> Self {
        Acceptance {
            open_side: Some(10.0 / 12.0),
            ..Self::default()
        }
    }

    /// Open sides at most `10/12` and closed sides at most `11/12`.
    pub fn balanced_closed() -> Self {
        Acceptance {
            open_side: Some(10.0 / 12.0),
            closed_side: Some(11.0 / 12.0),
            ..Self::default()
        }
    }

    pub fn with_intersect_cap(mut self, cap: f64) -> Self {
        self.intersect_cap = Some(cap);
        self
    }

    pub fn accepts(&self, c: &SeparatorCandidate) -> bool {
        let n = c.total() as f64;
        if self.quarter && (4 * c.closed_inside() < c.total() || 4 * c.closed_outside() < c.total())
        {
            return false;
        }
        if let Some(f) = self.open_side {
            if c.n_inside as f64 > f * n || c.n_outside as f64 > f * n {
                return false;
            }
        }
        if let Some(f) = self.closed_side {
            if c.closed_inside() as f64 > f * n || c.closed_outside() as f64 > f * n {
                return false;
            }
        }
        if let Some(cap) = self.intersect_cap {
            if c.n_intersect as f64 > cap {
                return false;
            }
        }
        true
    }
}

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream))
}

/// A Radon point of five points in space: a common point of the convex hulls
/// of the two sign classes of an affine dependence.
pub fn radon_point(points: &[Point3]) -> Result<Point3> {
    if points.len() != 5 {
        return Err(Error::InvalidParams(format!(
            "radon_point needs exactly 5 points, got {}",
            points.len()
        )));
    }
    let lambda = affine_dependence(points)?;
    let pos: f64 = lambda.iter().filter(|&&l| l > 0.0).sum();
    let neg: f64 = -lambda.iter().filter(|&&l| l < 0.0).sum::<f64>();
    if pos < 1e-12 || neg < 1e-12 || !pos.is_finite() {
        return Err(Error::NumericalDegeneracy(
            "affine dependence with an empty sign class".into(),
        ));
    }
    let mut acc = Point3::new(0.0, 0.0, 0.0);
    for (p, &l) in points.iter().zip(&lambda) {
        if l > 0.0 {
            acc = acc.add(p.scale(l));
        }
    }
    Ok(acc.scale(1.0 / pos))
}

/// A nonzero solution of `Σ λ_i p_i = 0, Σ λ_i = 0`, scaled to max norm 1.
fn affine_dependence(points: &[Point3]) -> Result<[f64; 5]> {
    let mut a = [[0.0f64; 5]; 4];
    for (j, p) in points.iter().enumerate() {
        a[0][j] = p.x;
        a[1][j] = p.y;
        a[2][j] = p.z;
        a[3][j] = 1.0;
    }
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let eps = 1e-12 * scale;
    let mut pivot_cols = Vec::with_capacity(4);
    let mut row = 0;
    for col in 0..5 {
        if row == 4 {
            break;
        }
        let (best, val) = (row..4)
            .map(|r| (r, a[r][col].abs()))
            .fold((row, -1.0), |b, x| if x.1 > b.1 { x } else { b });
        if val <= eps {
            continue;
        }
        a.swap(row, best);
        let pv = a[row][col];
        for v in a[row].iter_mut() {
            *v /= pv;
        }
        for r in 0..4 {
            if r != row {
                let f = a[r][col];
                if f != 0.0 {
                    for c in 0..5 {
                        a[r][c] -= f * a[row][c];
                    }
                }
            }
        }
        pivot_cols.push(col);
        row += 1;
    }
    let free = (0..5)
        .find(|c| !pivot_cols.contains(c))
        .expect("a 4x5 system always has a free column");
    let mut lambda = [0.0; 5];
    lambda[free] = 1.0;
    for (r, &pc) in pivot_cols.iter().enumerate() {
        lambda[pc] = -a[r][free];
    }
    let m = lambda.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::NumericalDegeneracy("no finite affine dependence".into()));
    }
    for l in lambda.iter_mut() {
        *l /= m;
    }
    Ok(lambda)
}

/// Approximate centerpoint by iterated Radon points.
///
/// A working multiset of `4t + 1` points (`t` = radon rounds) is drawn from
/// the input, without replacement when the input is large enough and with
/// replacement otherwise. It is shuffled into a queue; each round pops five
/// points and pushes back their Radon point, leaving one survivor.
pub fn approx_centerpoint(points: &[Point3], params: &SamplerParams, rng: &mut impl Rng) -> Result<Point3> {
    params.validate()?;
    if points.len() < 5 {
        return Err(Error::TooFewItems {
            need: 5,
            got: points.len(),
        });
    }
    let mut distinct: Vec<Point3> = Vec::with_capacity(6);
    for p in points {
        if !distinct.contains(p) {
            distinct.push(*p);
            if distinct.len() > 5 {
                break;
            }
        }
    }
    if distinct.len() == 5 {
        return radon_point(&distinct);
    }
    if distinct.len() < 5 {
        return Ok(centroid(&distinct));
    }

    let mut last = None;
    for attempt in 0..3 {
        let jitter = if attempt == 0 { 0.0 } else { 1e-9 };
        match iterated_radon(points, params, jitter, rng) {
            Ok(p) => return Ok(p),
            Err(e @ Error::NumericalDegeneracy(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

fn iterated_radon(points: &[Point3], params: &SamplerParams, jitter: f64, rng: &mut impl Rng) -> Result<Point3> {
    let w = 4 * params.radon_iterations + 1;
    let mut work: Vec<Point3> = if points.len() >= w {
        rand::seq::index::sample(rng, points.len(), w)
            .iter()
            .map(|i| points[i])
            .collect()
    } else {
        (0..w).map(|_| points[rng.gen_range(0..points.len())]).collect()
    };
    if jitter > 0.0 {
        for p in work.iter_mut() {
            *p = p.add(Point3::new(
                rng.gen_range(-jitter..jitter),
                rng.gen_range(-jitter..jitter),
                rng.gen_range(-jitter..jitter),
            ));
        }
    }
    work.shuffle(rng);
    let mut queue: std::collections::VecDeque<Point3> = work.into();
    while queue.len() >= 5 {
        let five: Vec<Point3> = queue.drain(..5).collect();
        let rp = match radon_point(&five) {
            Ok(p) => p,
            // coincident draws (common with replacement) have a trivial dependence
            Err(_) if five.iter().all(|p| *p == five[0]) => five[0],
            Err(e) => return Err(e),
        };
        queue.push_back(rp);
    }
    Ok(centroid(queue.make_contiguous()))
}

fn centroid(ps: &[Point3]) -> Point3 {
    let s = ps.iter().fold(Point3::new(0.0, 0.0, 0.0), |a, p| a.add(*p));
    s.scale(1.0 / ps.len() as f64)
}

/// Draws a separator from anchor points: subsample, lift to the sphere,
/// normalize around an approximate centerpoint and take a uniformly random
/// great circle back to the plane.
pub fn sample_separator_from_anchors(anchors: &[Point2], params: &SamplerParams, rng: &mut impl Rng) -> Result<GenCircle> {
    params.validate()?;
    let n = anchors.len();
    if n < 5 {
        return Err(Error::TooFewItems { need: 5, got: n });
    }
    let m = params.lift_sample_size.min(n);
    let chosen: Vec<Point2> = rand::seq::index::sample(rng, n, m)
        .iter()
        .map(|i| anchors[i])
        .collect();

    // A plane similarity before lifting keeps the mass away from the pole.
    let mean = chosen
        .iter()
        .fold(Point2::new(0.0, 0.0), |a, &p| a + p)
        * (1.0 / m as f64);
    let rms = (chosen.iter().map(|&p| (p - mean).norm2()).sum::<f64>() / m as f64).sqrt();
    let scale = if rms > 0.0 && rms.is_finite() { rms } else { 1.0 };

    let lifted: Vec<Point3> = chosen
        .iter()
        .map(|&p| stereo_lift((p - mean) * (1.0 / scale)))
        .collect();
    let center = approx_centerpoint(&lifted, params, rng)?;
    let cm = ConformalMap::normalizing(center)?;

    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).sqrt();
    let normal = Point3::new(s * phi.cos(), s * phi.sin(), z);
    let sep = gencircle_from_greatcircle(normal, &cm)?.unnormalize(mean, scale);
    if !sep.is_valid() {
        return Err(Error::NumericalDegeneracy(format!("invalid separator {sep:?}")));
    }
    Ok(sep)
}

pub fn sample_separator<I: Item>(items: &[I], params: &SamplerParams, rng: &mut impl Rng) -> Result<GenCircle> {
    let anchors: Vec<Point2> = items.iter().map(Item::anchor).collect();
    sample_separator_from_anchors(&anchors, params, rng)
}

pub fn classify_all<I: Item>(items: &[I], sep: &GenCircle, tol: f64) -> Result<SeparatorCandidate> {
    let mut c = SeparatorCandidate::new(*sep);
    for it in items {
        c.record(it.classify(sep, tol)?);
    }
    Ok(c)
}

/// Retry loop behind [`find_separator`] with a caller-supplied evaluator, so
/// candidates can be drawn from a sample and counted over a different
/// (possibly external) item set. Returns the accepted candidate and the
/// number of attempts used.
///
/// Attempt `i` draws from its own RNG seeded by `(params.rng_seed, i)`.
/// Draws that hit a numerical degeneracy count as rejected attempts.
pub fn search_separator<E, A>(
    anchors: &[Point2],
    mut evaluate: E,
    accept: A,
    max_retries: usize,
    params: &SamplerParams,
) -> Result<(SeparatorCandidate, usize)>
where
    E: FnMut(&GenCircle) -> Result<SeparatorCandidate>,
    A: Fn(&SeparatorCandidate) -> bool,
{
    if max_retries == 0 {
        return Err(Error::InvalidParams("max_retries must be >= 1".into()));
    }
    if anchors.len() < 5 {
        return Err(Error::TooFewItems {
            need: 5,
            got: anchors.len(),
        });
    }
    for attempt in 0..max_retries {
        let mut rng = rng_for(params.rng_seed, attempt as u64);
        let sep = match sample_separator_from_anchors(anchors, params, &mut rng) {
            Ok(s) => s,
            Err(Error::NumericalDegeneracy(_) | Error::PoleSingularity) => continue,
            Err(e) => return Err(e),
        };
        let cand = evaluate(&sep)?;
        if accept(&cand) {
            return Ok((cand, attempt + 1));
        }
    }
    Err(Error::RetriesExhausted(max_retries))
}

/// Draws separators until one is accepted, classifying every item once per
/// attempt.
pub fn find_separator<I: Item>(
    items: &[I],
    accept: impl Fn(&SeparatorCandidate) -> bool,
    max_retries: usize,
    params: &SamplerParams,
) -> Result<SeparatorCandidate> {
    let anchors: Vec<Point2> = items.iter().map(Item::anchor).collect();
    search_separator(
        &anchors,
        |s| classify_all(items, s, DEFAULT_TOL),
        accept,
        max_retries,
        params,
    )
    .map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Disk;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    fn close(a: Point3, b: Point3) -> bool {
        a.sub(b).norm() < 1e-12
    }

    #[test]
    fn radon_examples() {
        let a = [p(0., 0., 0.), p(4., 0., 0.), p(0., 4., 0.), p(0., 0., 4.), p(1., 1., 1.)];
        assert!(close(radon_point(&a).unwrap(), p(1., 1., 1.)));
        let b = [p(1., 0., 0.), p(-1., 0., 0.), p(0., 1., 0.), p(0., -1., 0.), p(0., 0., 0.)];
        assert!(close(radon_point(&b).unwrap(), p(0., 0., 0.)));
    }

    #[test]
    fn radon_of_repeated_points() {
        let q = p(2., -1., 3.);
        let pts = [q, q, q, q, p(0., 0., 0.)];
        assert!(close(radon_point(&pts).unwrap(), q));
    }

    #[test]
    fn centerpoint_of_five_distinct_is_radon() {
        let a = [p(0., 0., 0.), p(4., 0., 0.), p(0., 4., 0.), p(0., 0., 4.), p(1., 1., 1.)];
        let many: Vec<Point3> = (0..5).flat_map(|_| a).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = approx_centerpoint(&many, &SamplerParams::default(), &mut rng).unwrap();
        assert!(close(c, p(1., 1., 1.)));
    }

    #[test]
    fn centerpoint_needs_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = approx_centerpoint(&[p(0., 0., 0.); 4], &SamplerParams::default(), &mut rng);
        assert!(matches!(e, Err(Error::TooFewItems { need: 5, got: 4 })));
    }

    #[test]
    fn acceptance_rules() {
        let mut c = SeparatorCandidate::new(GenCircle::Halfplane {
            normal: Point2::new(1.0, 0.0),
            offset: 0.0,
        });
        c.n_inside = 70;
        c.n_outside = 20;
        c.n_intersect = 10;
        assert!(Acceptance::quarter_split().accepts(&c));
        assert!(Acceptance::balanced().accepts(&c));
        c.n_inside = 85;
        c.n_outside = 5;
        assert!(!Acceptance::quarter_split().accepts(&c));
        assert!(!Acceptance::balanced().accepts(&c));
        assert!(Acceptance::always().accepts(&c));
        assert!(!Acceptance::always().with_intersect_cap(9.0).accepts(&c));
    }

    fn grid(n: usize) -> Vec<Disk> {
        let side = (n as f64).sqrt().ceil() as usize;
        (0..n)
            .map(|i| {
                Disk::new(
                    i as u64,
                    Point2::new((i % side) as f64, (i / side) as f64),
                    0.3,
                )
            })
            .collect()
    }

    #[test]
    fn sample_separator_smoke_and_errors() {
        let centers = [(0., 0.), (4., 0.), (0., 4.), (1., 1.), (2., 3.)];
        let disks: Vec<Disk> = centers
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Disk::new(i as u64, Point2::new(x, y), 0.1))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_separator(&disks, &SamplerParams::default(), &mut rng).unwrap();
        assert!(s.is_valid());
        let e = sample_separator(&disks[..4], &SamplerParams::default(), &mut rng);
        assert!(matches!(e, Err(Error::TooFewItems { .. })));
    }

    #[test]
    fn find_separator_retry_semantics() {
        let disks = grid(400);
        let params = SamplerParams::with_seed(3);
        let first = find_separator(&disks, |_| true, 5, &params).unwrap();
        let mut rng = rng_for(3, 0);
        let direct = sample_separator(&disks, &params, &mut rng).unwrap();
        assert_eq!(first.separator, direct);
        assert_eq!(first.total(), disks.len());
        assert!(matches!(
            find_separator(&disks, |_| false, 3, &params),
            Err(Error::RetriesExhausted(3))
        ));
    }

    #[test]
    fn find_separator_is_deterministic() {
        let disks = grid(900);
        let acc = Acceptance::quarter_split();
        let params = SamplerParams::with_seed(11);
        let a = find_separator(&disks, |c| acc.accepts(c), 64, &params).unwrap();
        let b = find_separator(&disks, |c| acc.accepts(c), 64, &params).unwrap();
        assert_eq!(a, b);
    }
}
