use std::collections::{HashMap, HashSet};

use geosep::divider::*;
use geosep::extmem::{ExtContext, MemConfig, Stream};
use geosep::geom::{Disk, Point2};
use geosep::terrain::gen_packing;
use geosep::Error;
use proptest::prelude::*;

fn ctx(m: usize, b: usize) -> ExtContext {
    ExtContext::new(MemConfig::new(m, b).unwrap()).unwrap()
}

/// Region membership per disk id: (regions, flagged anywhere).
fn membership(c: &ExtContext, div: &Division<Disk>) -> HashMap<u64, (Vec<usize>, bool)> {
    let mut m: HashMap<u64, (Vec<usize>, bool)> = HashMap::new();
    for reg in &div.regions {
        for f in c.reader(&reg.stream).unwrap() {
            let f = f.unwrap();
            let e = m.entry(f.item.id).or_default();
            e.0.push(reg.id);
            e.1 |= f.boundary;
        }
    }
    m
}

/// Pairwise oracle: an interior disk only intersects disks of its own region.
fn isolation_violations(disks: &[Disk], m: &HashMap<u64, (Vec<usize>, bool)>) -> usize {
    let mut bad = 0;
    for a in disks {
        let (ra, fa) = &m[&a.id];
        if *fa {
            continue;
        }
        for b in disks {
            if a.id != b.id && a.center.dist(b.center) <= a.radius + b.radius && !m[&b.id].0.contains(&ra[0]) {
                bad += 1;
            }
        }
    }
    bad
}

fn check_division(c: &ExtContext, disks: &[Disk], div: &Division<Disk>, r: usize, brute: bool) {
    let n = disks.len();
    assert!(div.n_regions() <= 8 * r, "{} regions for r = {r}", div.n_regions());
    assert!(div.max_region_items() as f64 <= 12.0 * n as f64 / r as f64);
    let m = membership(c, div);
    assert_eq!(m.len(), n, "coverage");
    for (id, (regs, flagged)) in &m {
        assert!(regs.len() == 1 || *flagged, "disk {id} in {regs:?} without flag");
    }
    let interior: usize = m.values().filter(|(_, f)| !f).count();
    let distinct_b = m.values().filter(|(_, f)| *f).count();
    assert_eq!(interior + distinct_b, n);
    if brute {
        assert_eq!(isolation_violations(disks, &m), 0);
    }
}

#[test]
fn divides_ten_thousand_disks() {
    let c = ctx(2048, 64);
    let disks = gen_packing(10_000, 3).unwrap();
    let s = c.write_all(disks.iter().copied()).unwrap();
    let div = divide(&c, &s, &DivisionParams::new(16, 5)).unwrap();
    check_division(&c, &disks, &div, 16, true);
    let rep = validate_division(&c, &s, &div, ValidationMode::Fast, ValidationCaps::default()).unwrap();
    assert!(rep.is_ok(), "{:?}", rep.violations);
}

#[test]
fn trivial_division_cases() {
    let c = ctx(2048, 64);
    let disks = gen_packing(100, 1).unwrap();
    let s = c.write_all(disks.iter().copied()).unwrap();
    let one = divide(&c, &s, &DivisionParams::new(1, 0)).unwrap();
    assert_eq!(one.n_regions(), 1);
    assert_eq!(one.boundary_multiplicity(), 0);
    assert!(matches!(divide(&c, &s, &DivisionParams::new(101, 0)), Err(Error::InvalidParams(_))));
    let one = divide_strict(&c, &s, &DivisionParams::new(1, 0)).unwrap();
    assert_eq!(one.n_regions(), 1);
    let p = DivisionParams { k: 50, ..DivisionParams::new(4, 0) };
    assert!(matches!(divide_strict(&c, &s, &p), Err(Error::AssumptionViolated(_))));
    let p = DivisionParams { k: 0, ..DivisionParams::new(4, 0) };
    assert!(matches!(divide_strict(&c, &s, &p), Err(Error::InvalidParams(_))));
}

#[test]
fn grid_of_sixteen() {
    let disks: Vec<Disk> = (0..16)
        .map(|i| Disk::new(i, Point2::new(3.0 * (i % 4) as f64, 3.0 * (i / 4) as f64), 1.0))
        .collect();
    let params = DivisionParams::new(4, 2);
    let tree = build_separator_tree(&disks, 4, &params).unwrap();
    let c = ctx(64, 4);
    let s = c.write_all(disks.iter().copied()).unwrap();
    let div = apply_tree(&c, &s, &tree, params.tol).unwrap();
    assert!(div.max_region_items() <= 48);
    let rep = validate_division(&c, &s, &div, ValidationMode::BruteForce, ValidationCaps::default()).unwrap();
    assert!(rep.is_ok(), "{:?}", rep.violations);
    assert_eq!(SeparatorTree::single_leaf(), build_separator_tree(&disks, 1, &params).unwrap());
}

#[test]
fn two_leaf_tree_splits_two_disks() {
    let disks = [Disk::new(0, Point2::new(-5.0, 0.0), 1.0), Disk::new(1, Point2::new(5.0, 0.0), 1.0)];
    let tree = SeparatorTree {
        nodes: vec![
            TreeNode::Internal {
                separator: geosep::geom::GenCircle::Halfplane { normal: Point2::new(1.0, 0.0), offset: 0.0 },
                inside: 1,
                outside: 2,
            },
            TreeNode::Leaf { region: 0 },
            TreeNode::Leaf { region: 1 },
        ],
    };
    let c = ctx(64, 4);
    let s = c.write_all(disks).unwrap();
    let div = apply_tree(&c, &s, &tree, 1e-9).unwrap();
    assert_eq!(div.n_regions(), 2);
    assert!(div.regions.iter().all(|r| r.items == 1 && r.boundary == 0));
    let single = apply_tree(&c, &s, &SeparatorTree::single_leaf(), 1e-9).unwrap();
    assert_eq!(single.n_regions(), 1);
    assert_eq!(single.regions[0].items, 2);
}

#[test]
fn validation_reports_violations() {
    let c = ctx(64, 4);
    let disks = [
        Disk::new(0, Point2::new(-0.5, 0.0), 1.0),
        Disk::new(1, Point2::new(0.5, 0.0), 1.0),
        Disk::new(2, Point2::new(9.0, 0.0), 1.0),
    ];
    let s = c.write_all(disks).unwrap();
    let mk = |c: &ExtContext, items: &[(Disk, bool)]| -> Stream<Flagged<Disk>> {
        c.write_all(items.iter().map(|&(item, boundary)| Flagged { item, boundary })).unwrap()
    };
    // disk 1 missing
    let div = Division {
        regions: vec![Region { id: 0, items: 2, boundary: 0, stream: mk(&c, &[(disks[0], false), (disks[2], false)]) }],
        total_items: 3,
    };
    let rep = validate_division(&c, &s, &div, ValidationMode::Fast, ValidationCaps::default()).unwrap();
    assert!(rep.violations.iter().any(|v| v.contains("coverage")));
    // disks 0 and 1 overlap but sit in different regions, both unflagged
    let div = Division {
        regions: vec![
            Region { id: 0, items: 1, boundary: 0, stream: mk(&c, &[(disks[0], false)]) },
            Region { id: 1, items: 2, boundary: 0, stream: mk(&c, &[(disks[1], false), (disks[2], false)]) },
        ],
        total_items: 3,
    };
    let rep = validate_division(&c, &s, &div, ValidationMode::BruteForce, ValidationCaps::default()).unwrap();
    assert!(rep.violations.iter().any(|v| v.contains("touches")), "{:?}", rep.violations);
}

#[test]
fn reduce_boundaries_meets_cap() {
    let disks = gen_packing(10_000, 8).unwrap();
    let params = DivisionParams::new(16, 8);
    let tree = build_separator_tree(&disks, 16, &params).unwrap();
    let before = tree.n_regions();
    let reduced = reduce_boundaries(tree.clone(), &disks, 16, &params).unwrap();
    let cap = params.c2 * (10_000f64 / 16.0).sqrt();
    for (_, b) in leaf_stats(&reduced, &disks, None, params.tol).unwrap() {
        assert!(b as f64 <= cap);
    }
    assert!(reduced.n_regions() <= before + 2 * 16);
    let inf = DivisionParams { c2: f64::INFINITY, ..params.clone() };
    assert_eq!(reduce_boundaries(tree.clone(), &disks, 16, &inf).unwrap(), tree);
    let tight = DivisionParams { c2: 1.0, ..params };
    let split = reduce_boundaries(tree.clone(), &disks, 16, &tight).unwrap();
    // below the geometric floor no split makes progress; the tree stays valid
    assert!(split.n_regions() >= before);
    assert_eq!(leaf_stats(&split, &disks, None, 1e-9).unwrap().iter().map(|s| s.0).min().map(|m| m > 0), Some(true));
    assert!(tree.depth() <= SeparatorTree::depth_bound(16));
}

#[test]
fn sample_subset_is_uniform() {
    let c = ctx(64, 8);
    let s = c.write_all((0..10u64).collect::<Vec<_>>()).unwrap();
    let mut all = sample_subset(&c, &s, 10, 1).unwrap();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert!(sample_subset(&c, &s, 0, 1).unwrap().is_empty());
    assert!(matches!(sample_subset(&c, &s, 11, 1), Err(Error::StreamTooShort { .. })));

    let s = c.write_all((0..1000u64).collect::<Vec<_>>()).unwrap();
    assert_eq!(sample_subset(&c, &s, 100, 3).unwrap(), sample_subset(&c, &s, 100, 3).unwrap());
    let runs = 1000;
    let mut freq = vec![0usize; 1000];
    for seed in 0..runs {
        let got = sample_subset(&c, &s, 100, seed).unwrap();
        assert_eq!(got.iter().collect::<HashSet<_>>().len(), 100);
        for x in got {
            freq[x as usize] += 1;
        }
    }
    // inclusion probability 0.1: mean 100, sigma ~9.49
    let sigma = (runs as f64 * 0.1 * 0.9).sqrt();
    for (i, &f) in freq.iter().enumerate() {
        assert!((f as f64 - 100.0).abs() <= 5.0 * sigma, "item {i}: {f}");
    }
}

#[test]
fn persisted_division_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExtContext::new_in(MemConfig::new(512, 16).unwrap(), dir.path()).unwrap();
    let disks = gen_packing(3000, 2).unwrap();
    let s = c.write_all(disks.iter().copied()).unwrap();
    let div = divide(&c, &s, &DivisionParams::new(8, 1)).unwrap().persist(&dir.path().join("d")).unwrap();
    let back = Division::<Disk>::open(&dir.path().join("d")).unwrap();
    assert_eq!(back.manifest_text(), div.manifest_text());
    let rep = validate_division(&c, &s, &back, ValidationMode::BruteForce, ValidationCaps::default()).unwrap();
    assert!(rep.is_ok(), "{:?}", rep.violations);
}

fn division_fingerprint(c: &ExtContext, div: &Division<Disk>) -> Vec<Vec<(u64, bool)>> {
    div.regions
        .iter()
        .map(|r| c.read_all(&r.stream).unwrap().into_iter().map(|f| (f.item.id, f.boundary)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn small_divisions_hold_invariants(n in 50usize..1500, r in 1usize..40, seed in any::<u64>(), strict in any::<bool>()) {
        prop_assume!(r <= n);
        let c = ctx(256, 8);
        let disks = gen_packing(n, seed).unwrap();
        let n = disks.len();
        let s = c.write_all(disks.iter().copied()).unwrap();
        let params = DivisionParams::new(r, seed);
        let div = if strict { divide_strict(&c, &s, &params) } else { divide(&c, &s, &params) }.unwrap();
        check_division(&c, &disks, &div, r, true);
        let again = if strict { divide_strict(&c, &s, &params) } else { divide(&c, &s, &params) }.unwrap();
        prop_assert_eq!(division_fingerprint(&c, &div), division_fingerprint(&c, &again));
        if strict {
            let cap = params.c2 * (n as f64 / r.min(c.cfg().blocks()) as f64).sqrt();
            prop_assert!(div.max_region_boundary() as f64 <= cap);
        }
    }
}
