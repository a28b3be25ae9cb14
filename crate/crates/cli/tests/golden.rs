//! Committed fixtures. `field` must reproduce the golden outputs bit for bit.
//!
//! The goldens come from the brute-force reference, not the fast path.
//! Regenerate with `GAITFIELD_REGEN_FIXTURES=1 cargo test -p gaitfield-cli --test golden`.

mod common;

use std::path::Path;
use std::process::Command;

use common::{bin, field_ref, fixtures};
use gaitfield::gff;
use gaitfield::matching::{BranchConfig, MatchingBranch};
use gaitfield::sequence::{encode_pgm_stack, load_mask_sequence};
use gaitfield::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(name, branch flag, dl)`; all use `--weights random:7 --channels 4 --dh 2 --dw 2`.
const CASES: [(&str, &str, usize); 2] = [("golden_static.gff", "static", 0), ("golden_dynamic.gff", "dynamic", 1)];

fn branch_for(dl: usize) -> MatchingBranch {
    let base = if dl == 0 { BranchConfig::static_branch() } else { BranchConfig::dynamic_branch() };
    let cfg = BranchConfig { in_channels: 4, channels: 4, delta_h: 2, delta_w: 2, delta_l: dl, ..base };
    MatchingBranch::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
}

fn regenerate(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let features = Tensor4::from_fn((2, 12, 10, 4), |_, _, _, _| rng.random_range(-1.5..1.5));
    gff::write(&dir.join("features.gff"), &features).unwrap();
    let masks = Tensor4::from_fn((2, 12, 10, 1), |f, y, x, _| {
        let (dy, dx) = ((y as f64 - 5.5) / 5.0, (x as f64 - 4.5 - f as f64 * 0.5) / 3.5);
        f64::from(dy * dy + dx * dx <= 1.0)
    });
    std::fs::write(dir.join("masks.pgm"), encode_pgm_stack(&masks)).unwrap();

    let features = gff::read(&dir.join("features.gff")).unwrap();
    let masks = load_mask_sequence(&dir.join("masks.pgm"), 12, 10).unwrap();
    for (name, _, dl) in CASES {
        let g = field_ref(&features, masks.frames(), &branch_for(dl));
        gff::write(&dir.join(name), &g).unwrap();
    }

    gff::write(&dir.join("zero_field.gff"), &Tensor4::zeros(1, 6, 5, 2)).unwrap();
    let mut white = b"P6\n5 6\n255\n".to_vec();
    white.extend(std::iter::repeat(255u8).take(6 * 5 * 3));
    std::fs::write(dir.join("zero_field_white.ppm"), white).unwrap();
}

pub fn run_field(out: &Path, branch: &str) -> std::process::Output {
    let dir = fixtures();
    Command::new(bin())
        .args(["field", "--branch", branch, "--weights", "random:7", "--channels", "4", "--dh", "2", "--dw", "2"])
        .arg("--features")
        .arg(dir.join("features.gff"))
        .arg("--masks")
        .arg(dir.join("masks.pgm"))
        .arg("--out")
        .arg(out)
        .arg("--verify")
        .output()
        .unwrap()
}

#[test]
fn field_reproduces_the_goldens_bit_exactly() {
    let dir = fixtures();
    if std::env::var_os("GAITFIELD_REGEN_FIXTURES").is_some() {
        regenerate(&dir);
    }
    let tmp = tempfile::tempdir().unwrap();
    for (name, branch, _) in CASES {
        let out = tmp.path().join(name);
        let run = run_field(&out, branch);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        let got = std::fs::read(&out).unwrap();
        let want = std::fs::read(dir.join(name)).unwrap();
        assert!(got == want, "{name} differs from the golden file");
    }
}

#[test]
fn zero_field_renders_the_white_fixture() {
    let dir = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("white.ppm");
    let run = Command::new(bin())
        .args(["viz", "--frame", "0", "--maxmag", "1.5"])
        .arg("--field")
        .arg(dir.join("zero_field.gff"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success());
    assert_eq!(std::fs::read(out).unwrap(), std::fs::read(dir.join("zero_field_white.ppm")).unwrap());
}
