//! Brute-force references shared by the integration tests: direct nested-loop
//! convolution and explicit offset enumeration for the matching step.

#![allow(dead_code)]

use std::path::PathBuf;

use gaitfield::matching::MatchingBranch;
use gaitfield::tensor::{Activation, ConvLayer, ConvStack, Tensor4};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_gaitfield"))
}

pub fn conv_ref(x: &Tensor4, layer: &ConvLayer) -> Tensor4 {
    let (n, h, w, ci_n) = x.dims();
    let k = layer.kernel();
    let r = (k / 2) as isize;
    Tensor4::from_fn((n, h, w, layer.c_out()), |b, y, xx, co| {
        let mut acc = layer.bias[co];
        for ci in 0..ci_n {
            for ky in 0..k {
                for kx in 0..k {
                    let yy = y as isize + ky as isize - r;
                    let xs = xx as isize + kx as isize - r;
                    if yy < 0 || xs < 0 || yy >= h as isize || xs >= w as isize {
                        continue;
                    }
                    let wgt = layer.weights[((co * ci_n + ci) * k + ky) * k + kx];
                    acc += wgt * x.at(b, yy as usize, xs as usize, ci);
                }
            }
        }
        match layer.activation {
            Activation::Identity => acc,
            Activation::LeakyRelu(a) => {
                if acc > 0.0 {
                    acc
                } else {
                    a * acc
                }
            }
        }
    })
}

pub fn encode_ref(x: &Tensor4, mask: &Tensor4, stack: &ConvStack) -> Tensor4 {
    let mut cur = x.clone();
    for layer in &stack.layers {
        cur = conv_ref(&cur, layer);
    }
    Tensor4::from_fn(cur.dims(), |b, y, xx, c| cur.at(b, y, xx, c) * mask.at(b, y, xx, 0))
}

/// Field of `frames` under `masks` by enumerating every offset of the window.
pub fn field_ref(frames: &Tensor4, masks: &Tensor4, branch: &MatchingBranch) -> Tensor4 {
    let dl = branch.delta_l;
    let (dh, dw) = (branch.template.delta_h() as isize, branch.template.delta_w() as isize);
    let out_len = frames.n() - dl;
    let fq = encode_ref(&frames.frames(0, out_len), &masks.frames(0, out_len), &branch.encoder_q);
    let fk = encode_ref(&frames.frames(dl, out_len), &masks.frames(dl, out_len), &branch.encoder_k);
    let (_, h, w, c) = fq.dims();
    let mut out = Tensor4::zeros(out_len, h, w, 2);
    for b in 0..out_len {
        for i in 0..h {
            for j in 0..w {
                let mut scored = Vec::new();
                for di in -dh..=dh {
                    for dj in -dw..=dw {
                        let (y, x) = (i as isize + di, j as isize + dj);
                        let s = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            0.0
                        } else {
                            (0..c).map(|ch| fq.at(b, i, j, ch) * fk.at(b, y as usize, x as usize, ch)).sum()
                        };
                        scored.push((s, di as f64, dj as f64));
                    }
                }
                let max = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scored.iter().map(|s| (s.0 - max).exp()).sum();
                let (mut g0, mut g1) = (0.0, 0.0);
                for (s, di, dj) in &scored {
                    let p = (s - max).exp() / z;
                    g0 += p * di;
                    g1 += p * dj;
                }
                out.set(b, i, j, 0, g0);
                out.set(b, i, j, 1, g1);
            }
        }
    }
    out
}
