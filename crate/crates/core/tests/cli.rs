mod common;

use common::{geosep, ok, pipeline, snapshot};
use geosep::extmem::{ExtContext, MemConfig, Stream};
use geosep::flow::AccRecord;
use geosep::terrain::TinTriangle;

#[test]
fn packing_file_layout() {
    let d = tempfile::tempdir().unwrap();
    let r = ok(d.path(), &["gen-packing", "--n", "100", "--seed", "7", "--out", "p.bin"]);
    assert_eq!(r.get("records"), "100");
    let bytes = std::fs::read(d.path().join("p.bin")).unwrap();
    assert_eq!(&bytes[..4], b"PKG1");
    assert_eq!(bytes.len(), 4 + 100 * 32);
}

#[test]
fn delaunay_flowdirs_descend() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen-tin", "--n", "10000", "--seed", "7", "--mode", "delaunay", "--out", "t.bin"]);
    ok(d.path(), &["flowdirs", "--in", "t.bin", "--out", "f.bin"]);
    let c = ExtContext::new(MemConfig::default()).unwrap();
    let s = Stream::<TinTriangle>::open(d.path().join("f.bin")).unwrap();
    for t in c.reader(&s).unwrap() {
        for v in t.unwrap().v {
            assert!(v.flow_target < 0 || v.flow_target_height < v.z);
        }
    }
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(geosep(p, &["gen-tin", "--n", "2", "--out", "x.bin"]).code, 2);
    ok(p, &["gen-packing", "--n", "400", "--out", "p.bin"]);
    assert_eq!(geosep(p, &["divide", "--in", "p.bin", "--r", "4", "--strict", "--k", "0", "--out-manifest", "m"]).code, 2);
    assert_eq!(geosep(p, &["divide", "--in", "p.bin", "--r", "401", "--out-manifest", "m"]).code, 2);
    assert_eq!(geosep(p, &["divide", "--in", "missing.bin", "--r", "4", "--out-manifest", "m"]).code, 3);
    ok(p, &["gen-packing", "--n", "4", "--out", "four.bin"]);
    assert_eq!(geosep(p, &["sep-stats", "--in", "four.bin", "--samples", "5", "--out-hist", "h.txt"]).code, 2);
    let r = ok(p, &["sep-stats", "--in", "p.bin", "--samples", "0", "--out-hist", "h0.txt"]);
    assert_eq!(r.get("mean_over_sqrt_n"), "0");
    let hist = std::fs::read_to_string(p.join("h0.txt")).unwrap();
    assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 0);
    assert_eq!(geosep(p, &["gen-packing", "--n", "4", "--threads", "0", "--out", "y.bin"]).code, 2);
}

#[test]
fn divide_reports() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-packing", "--n", "10000", "--seed", "3", "--out", "p.bin"]);
    let r = ok(p, &["divide", "--in", "p.bin", "--r", "16", "--mem-items", "2048", "--block-items", "64", "--out-manifest", "m"]);
    assert!(r.num("regions") <= 128.0);
    assert!(r.num("boundary_multiplicity") > 0.0);
    assert!(p.join("m/division.manifest").exists());
    let one = ok(p, &["divide", "--in", "p.bin", "--r", "1", "--out-manifest", "one"]);
    assert_eq!(one.get("regions"), "1");
    assert_eq!(one.get("boundary_multiplicity"), "0");
    let v = ok(p, &["validate", "--in", "p.bin", "--manifest", "m", "--r", "16"]);
    assert_eq!(v.get("violations"), "0");
}

#[test]
fn flow_commands() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let g = ["--mem-items", "4096", "--block-items", "64"];
    let with = |a: &[&str]| -> Vec<String> { a.iter().chain(g.iter()).map(|s| s.to_string()).collect() };
    let run = |a: &[&str]| {
        let v = with(a);
        ok(p, &v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["gen-tin", "--n", "10000", "--seed", "1", "--out", "raw.bin"]);
    run(&["flowdirs", "--in", "raw.bin", "--out", "t.bin"]);
    run(&["divide", "--in", "t.bin", "--r", "64", "--out-manifest", "m"]);
    let a = run(&["flow-sweep", "--in", "t.bin", "--out", "a.acc"]);
    let b = run(&["flow-div", "--in", "t.bin", "--manifest", "m", "--out", "b.acc"]);
    assert_eq!(a.get("total_rain"), "10000");
    assert_eq!(b.get("total_sink"), a.get("total_sink"));
    let cmp = run(&["acc-compare", "--a", "a.acc", "--b", "b.acc"]);
    assert_eq!(cmp.get("mismatches"), "0");

    run(&["flow-sweep", "--in", "t.bin", "--rain-uniform", "0", "--out", "z.acc"]);
    let c = ExtContext::new(MemConfig::default()).unwrap();
    let z = c.read_all(&Stream::<AccRecord>::open(p.join("z.acc")).unwrap()).unwrap();
    assert_eq!(z.len(), 10000);
    assert!(z.iter().all(|r| r.acc == 0.0));

    std::fs::write(p.join("rain.txt"), "0 5\n# comment\n17 2.5\n").unwrap();
    let t = run(&["flow-sweep", "--in", "t.bin", "--rain-table", "rain.txt", "--out", "t.acc"]);
    assert_eq!(t.get("total_rain"), "7.5");

    run(&["gen-tin", "--n", "10000", "--seed", "2", "--out", "raw2.bin"]);
    run(&["flowdirs", "--in", "raw2.bin", "--out", "t2.bin"]);
    let v = with(&["flow-div", "--in", "t2.bin", "--manifest", "m", "--out", "bad.acc"]);
    let bad = geosep(p, &v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(bad.code, 2, "{}", bad.stderr);
    assert!(bad.stderr.contains("mismatch"));
    let diff = geosep(p, &["acc-compare", "--a", "a.acc", "--b", "z.acc"]);
    assert_eq!(diff.code, 2);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "11");
    pipeline(b.path(), "11");
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.iter().map(|x| &x.0).collect::<Vec<_>>(), sb.iter().map(|x| &x.0).collect::<Vec<_>>());
    for (x, y) in sa.iter().zip(&sb) {
        assert!(x.1 == y.1, "{} differs", x.0);
    }
}

#[test]
fn seed_comes_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_geosep"))
        .args(["gen-packing", "--n", "50", "--out", "e.bin"])
        .env("GEOSEP_SEED", "42")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=42"));
    ok(d.path(), &["gen-packing", "--n", "50", "--seed", "42", "--out", "f.bin"]);
    assert_eq!(std::fs::read(d.path().join("e.bin")).unwrap(), std::fs::read(d.path().join("f.bin")).unwrap());
}
