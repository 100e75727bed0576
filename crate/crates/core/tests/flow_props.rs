use std::collections::HashMap;

use geosep::divider::{Division, DivisionParams, Flagged, Region};
use geosep::extmem::{sort_io_bound, ExtContext, MemConfig, Stream};
use geosep::flow::*;
use geosep::terrain::*;
use geosep::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ctx(m: usize, b: usize) -> ExtContext {
    ExtContext::new(MemConfig::new(m, b).unwrap()).unwrap()
}

fn vtx(id: u64, z: f64, target: i64, tz: f64) -> TinVertexRecord {
    let mut v = TinVertexRecord::new(id, id as f64, (id % 3) as f64, z);
    v.flow_target = target;
    v.flow_target_height = tz;
    v
}

fn accs(c: &ExtContext, s: &Stream<AccRecord>) -> Vec<(u64, f64)> {
    c.read_all(s).unwrap().into_iter().map(|a| (a.id, a.acc)).collect()
}

fn single_region(c: &ExtContext, tris: &[TinTriangle]) -> Division<TinTriangle> {
    let s = c.write_all(tris.iter().map(|&item| Flagged { item, boundary: false })).unwrap();
    Division {
        regions: vec![Region { id: 0, items: tris.len(), boundary: 0, stream: s }],
        total_items: tris.len(),
    }
}

fn all_three(c: &ExtContext, tris: &[TinTriangle], rain: &RainDistribution) -> [Vec<(u64, f64)>; 3] {
    let (bf, _) = brute_force_flow(tris, rain).unwrap();
    let tin = c.write_all(tris.iter().copied()).unwrap();
    let sw = flow_sweep(c, &tin, rain).unwrap();
    let big = ctx(tris.len().max(8) * 2, 4);
    let dv = flow_division(&big, &single_region(c, tris), rain).unwrap();
    [bf.into_iter().map(|a| (a.id, a.acc)).collect(), accs(c, &sw.acc), accs(&big, &dv.acc)]
}

#[test]
fn chain_and_confluence() {
    let c = ctx(64, 4);
    let one = RainDistribution::Uniform(1.0);
    let chain = [TinTriangle::new([vtx(1, 3., 2, 2.), vtx(2, 2., 3, 1.), vtx(3, 1., -1, 0.)])];
    for got in all_three(&c, &chain, &one) {
        assert_eq!(got, vec![(1, 1.0), (2, 2.0), (3, 3.0)]);
    }
    let conf = [TinTriangle::new([vtx(1, 3., 3, 1.), vtx(2, 2., 3, 1.), vtx(3, 1., -1, 0.)])];
    for got in all_three(&c, &conf, &one) {
        assert_eq!(got, vec![(1, 1.0), (2, 1.0), (3, 3.0)]);
    }
    let flat = [TinTriangle::new([vtx(1, 1., -1, 0.), vtx(2, 1., -1, 0.), vtx(3, 1., -1, 0.)])];
    let rain = RainDistribution::Table([(1, 0.5), (2, 2.0)].into_iter().collect());
    for got in all_three(&c, &flat, &rain) {
        assert_eq!(got, vec![(1, 0.5), (2, 2.0), (3, 0.0)]);
    }
}

#[test]
fn zero_rain_and_order_independence() {
    let c = ctx(256, 8);
    let tin = compute_flow_directions(&c, &gen_tin(&c, 600, 3, TinMode::Delaunay, None).unwrap()).unwrap();
    let mut tris = c.read_all(&tin).unwrap();
    for got in all_three(&c, &tris, &RainDistribution::Uniform(0.0)) {
        assert!(got.iter().all(|&(_, a)| a == 0.0));
    }
    let (a, _) = brute_force_flow(&tris, &RainDistribution::Uniform(1.0)).unwrap();
    tris.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let (b, _) = brute_force_flow(&tris, &RainDistribution::Uniform(1.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn division_errors() {
    let c = ctx(64, 4);
    let dangling = [TinTriangle::new([vtx(1, 3., 7, 2.), vtx(2, 2., -1, 0.), vtx(3, 1., -1, 0.)])];
    let r = flow_division(&c, &single_region(&c, &dangling), &RainDistribution::Uniform(1.0));
    assert!(matches!(r, Err(Error::DanglingTarget { source_id: 1, target: 7 })));
    let tin = compute_flow_directions(&c, &gen_tin(&c, 200, 1, TinMode::GridJitter, None).unwrap()).unwrap();
    let tris = c.read_all(&tin).unwrap();
    let tiny = ctx(16, 4);
    let r = flow_division(&tiny, &single_region(&tiny, &tris), &RainDistribution::Uniform(1.0));
    assert!(matches!(r, Err(Error::RegionTooLarge { .. })));
}

/// acc(u) = rain(u) + sum of acc(v) over v with target u.
fn check_local_balance(tris: &[TinTriangle], acc: &[(u64, f64)], rain: &RainDistribution) {
    let target: HashMap<u64, i64> = tris.iter().flat_map(|t| t.v.iter().map(|v| (v.id, v.flow_target))).collect();
    let a: HashMap<u64, f64> = acc.iter().copied().collect();
    let mut inflow: HashMap<u64, f64> = HashMap::new();
    for (&v, &t) in &target {
        if t >= 0 {
            *inflow.entry(t as u64).or_default() += a[&v];
        }
    }
    for (&u, &au) in &a {
        let want = rain.amount(u) + inflow.get(&u).copied().unwrap_or(0.0);
        assert!((au - want).abs() <= 1e-9 * au.abs().max(1.0), "vertex {u}: {au} vs {want}");
        assert!(au >= rain.amount(u));
    }
}

fn agree(a: &[(u64, f64)], b: &[(u64, f64)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && rel_diff(x.1, y.1) <= 1e-9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn algorithms_agree(n in 3usize..1000, seed in any::<u64>(), r in 1usize..40, delaunay in any::<bool>(), rain in 0.0..3.0f64) {
        let c = ctx(256, 8);
        let mode = if delaunay { TinMode::Delaunay } else { TinMode::GridJitter };
        let tin = compute_flow_directions(&c, &gen_tin(&c, n, seed, mode, None).unwrap()).unwrap();
        let tris = c.read_all(&tin).unwrap();
        let r = r.min(tris.len());
        let rain = RainDistribution::Uniform(rain);
        let (bf, bs) = brute_force_flow(&tris, &rain).unwrap();
        let bf: Vec<(u64, f64)> = bf.into_iter().map(|a| (a.id, a.acc)).collect();
        let sw = flow_sweep(&c, &tin, &rain).unwrap();
        let td = divide_tin(&c, &tin, &DivisionParams::new(r, seed), TinClassifier::Triangles, false).unwrap();
        // regions hold up to 12 |T| / r triangles
        let roomy = ctx(tris.len().max(8) * 2, 8);
        let dv = flow_division(&roomy, &td.division, &rain).unwrap();
        prop_assert!(agree(&bf, &accs(&c, &sw.acc)));
        prop_assert!(agree(&bf, &accs(&roomy, &dv.acc)));
        check_local_balance(&tris, &bf, &rain);
        for s in [bs, sw.summary, dv.summary] {
            prop_assert!((s.total_sink - s.total_rain).abs() <= 1e-6 * s.total_rain.max(1e-300));
        }
    }
}

#[test]
fn sweep_io_within_six_sorts() {
    let c = ctx(1000, 50);
    let tin = compute_flow_directions(&c, &gen_tin(&c, 20_000, 2, TinMode::GridJitter, None).unwrap()).unwrap();
    let before = c.stats();
    let out = flow_sweep(&c, &tin, &RainDistribution::Uniform(1.0)).unwrap();
    let io = c.stats().since(before).total() as f64;
    let n = out.acc.len();
    assert!(io <= 6.0 * sort_io_bound(c.cfg(), 3 * tin.len()), "io {io} for {n} vertices");
}
