//! End-to-end runs of the `nic` binary.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nic_core::image::synthetic_image;
use nic_core::train::{RunStatus, ZooEntry, ZooManifest};
use nic_core::{read_container, ArchConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::golden;

fn nic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nic"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("NIC_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nic(args);
    assert!(
        out.status.success(),
        "nic {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    nic(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A directory of small synthetic PNGs.
fn image_dir(root: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        synthetic_image(40, 36, &mut rng).save_png(dir.join(format!("img{i}.png"))).unwrap();
    }
    dir
}

/// Trains a two-checkpoint zoo for a handful of steps.
fn tiny_zoo(root: &Path, name: &str) -> PathBuf {
    let data = image_dir(root, "data", 3, 1);
    let zoo = root.join(name);
    ok(&[
        "train", "--data", s(&data), "--lambda", "0.004,0.032", "--steps", "4", "--batch-size", "1",
        "--crop-size", "32", "--lr", "1e-3", "--seed", "3", "--out", s(&zoo),
    ]);
    zoo
}

/// A zoo holding the golden model for `arch` at quality 1.
fn golden_zoo(root: &Path, arch: &ArchConfig) -> PathBuf {
    let dir = root.join(format!("golden_{:?}", arch.kind));
    std::fs::create_dir_all(&dir).unwrap();
    golden::model(arch).save(dir.join("golden.nicm")).unwrap();
    let mut manifest = ZooManifest::new(arch.clone());
    manifest.upsert(ZooEntry {
        quality: 0,
        lambda: 0.01,
        checkpoint: "golden.nicm".into(),
        anchor: None,
        status: RunStatus::Ok,
    });
    manifest.save(&dir).unwrap();
    dir
}

#[test]
fn train_is_reproducible_and_records_anchors() {
    let tmp = TempDir::new().unwrap();
    let a = tiny_zoo(tmp.path(), "a");
    let b = tiny_zoo(tmp.path(), "b");
    let manifest = ZooManifest::load(&a).unwrap();
    assert_eq!(manifest.models.len(), 2);
    for m in &manifest.models {
        let anchor = m.anchor.unwrap();
        assert!(anchor.bits.is_finite() && anchor.psnr.is_finite());
        let bytes = std::fs::read(a.join(&m.checkpoint)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(&m.checkpoint)).unwrap());
    }
}

#[test]
fn encode_decode_round_trip_and_zero_update_cost() {
    let tmp = TempDir::new().unwrap();
    let zoo = tiny_zoo(tmp.path(), "zoo");
    let img = tmp.path().join("data/img0.png");
    let p = |n: &str| tmp.path().join(n);

    ok(&["encode", s(&img), "--zoo", s(&zoo), "--quality", "1", "--recon", s(&p("r0.png")), "--out", s(&p("base.nc"))]);
    ok(&["decode", s(&p("base.nc")), "--zoo", s(&zoo), "--out", s(&p("d0.png"))]);
    assert_eq!(std::fs::read(p("r0.png")).unwrap(), std::fs::read(p("d0.png")).unwrap());
    assert!(read_container(&std::fs::read(p("base.nc")).unwrap()).unwrap().extra.is_none());

    ok(&[
        "encode", s(&img), "--zoo", s(&zoo), "--quality", "1", "--overfit", "--iters", "0", "--out", s(&p("zero.nc")),
    ]);
    ok(&["decode", s(&p("zero.nc")), "--zoo", s(&zoo), "--out", s(&p("dz.png"))]);
    assert_eq!(std::fs::read(p("d0.png")).unwrap(), std::fs::read(p("dz.png")).unwrap());
    let (base, zero) = (std::fs::read(p("base.nc")).unwrap(), std::fs::read(p("zero.nc")).unwrap());
    assert_eq!(8 * (zero.len() - base.len()), 64 + 32);
}

#[test]
fn overfit_trace_matches_emitted_container() {
    let tmp = TempDir::new().unwrap();
    let zoo = tiny_zoo(tmp.path(), "zoo");
    let img = tmp.path().join("data/img1.png");
    let p = |n: &str| tmp.path().join(n);
    let stdout = ok(&[
        "encode", s(&img), "--zoo", s(&zoo), "--quality", "2", "--overfit", "--layers", "2", "--iters", "12",
        "--lr", "1e-2", "--seed", "9", "--trace", s(&p("trace.csv")), "--recon", s(&p("r.png")), "--out", s(&p("o.nc")),
    ]);
    ok(&["decode", s(&p("o.nc")), "--zoo", s(&zoo), "--out", s(&p("d.png"))]);
    assert_eq!(std::fs::read(p("r.png")).unwrap(), std::fs::read(p("d.png")).unwrap());

    let trace = std::fs::read_to_string(p("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "iteration,train_loss,test_acc,psnr_db,update_bits");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 13);
    let best = rows.iter().filter(|r| r[2].is_finite()).min_by(|a, b| a[2].total_cmp(&b[2])).unwrap();
    let printed = stdout.lines().find_map(|l| l.strip_prefix("bits ")).unwrap();
    let psnr: f64 = printed.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((psnr - best[3]).abs() < 1e-5, "{psnr} vs {}", best[3]);
    assert!(stdout.lines().any(|l| l.starts_with("bit_saving ")));
}

#[test]
fn golden_containers_decode_to_golden_pngs() {
    let tmp = TempDir::new().unwrap();
    for (name, arch, _) in golden::containers() {
        let zoo = golden_zoo(tmp.path(), &arch);
        let out = tmp.path().join(golden::decoded_name(name));
        ok(&["decode", s(&golden::dir().join(name)), "--zoo", s(&zoo), "--out", s(&out)]);
        assert_eq!(
            std::fs::read(&out).unwrap(),
            std::fs::read(golden::dir().join(golden::decoded_name(name))).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let zoo = tiny_zoo(tmp.path(), "zoo");
    let img = tmp.path().join("data/img2.png");
    let p = |n: &str| tmp.path().join(n);

    assert_eq!(code(&["encode", "--bogus"]), 2);
    assert_eq!(code(&["encode", s(&img), "--zoo", s(&zoo), "--quality", "7", "--out", s(&p("x.nc"))]), 2);
    assert_eq!(
        code(&["encode", s(&img), "--zoo", s(&zoo), "--quality", "1", "--overfit", "--layers", "9", "--out", s(&p("x.nc"))]),
        2
    );
    assert_eq!(code(&["train", "--data", s(&tmp.path().join("data")), "--lambda", "0.01", "--crop-size", "20", "--out", s(&p("z"))]), 2);

    ok(&["encode", s(&img), "--zoo", s(&zoo), "--quality", "1", "--out", s(&p("good.nc"))]);
    let good = std::fs::read(p("good.nc")).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    std::fs::write(p("bad_magic.nc"), &bad_magic).unwrap();
    std::fs::write(p("short.nc"), &good[..good.len() / 2]).unwrap();
    for f in ["bad_magic.nc", "short.nc"] {
        assert_eq!(code(&["decode", s(&p(f)), "--zoo", s(&zoo), "--out", s(&p("o.png"))]), 3, "{f}");
    }
    std::fs::write(p("not.png"), b"not an image").unwrap();
    assert_eq!(code(&["encode", s(&p("not.png")), "--zoo", s(&zoo), "--quality", "1", "--out", s(&p("x.nc"))]), 3);
}

#[test]
fn bdrate_of_scaled_curve() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    std::fs::write(&a, "rate_bits,psnr_db\n1000,30\n1800,32.5\n3100,35.1\n5200,37.4\n").unwrap();
    std::fs::write(&b, "rate_bits,psnr_db\n900,30\n1620,32.5\n2790,35.1\n4680,37.4\n").unwrap();
    let out = ok(&["bdrate", s(&a), s(&b)]);
    let v: f64 = out.trim().parse().unwrap();
    assert!((v + 10.0).abs() < 1e-3, "{v}");
    std::fs::write(&b, "rate_bits,psnr_db\n900,30\n").unwrap();
    assert_eq!(code(&["bdrate", s(&a), s(&b)]), 4);
}
