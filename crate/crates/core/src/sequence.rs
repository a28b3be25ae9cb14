//! Feature and silhouette sequences: the engine's input currency, plus the
//! loaders for GFF containers and binary portable-graymap stacks.

use std::path::Path;

use crate::error::{Error, FormatError, Result, WithPath};
use crate::gff;
use crate::tensor::Tensor4;

/// Channel count of the externally produced latent features.
pub const DEFAULT_FEATURE_CHANNELS: usize = 4;

/// Per-frame dense feature maps, stored as one tensor with `n = L`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor4,
    pub frame_rate_hint: Option<f64>,
    pub source_tag: String,
    /// Diffusion timestep the features were extracted at. Metadata only.
    pub timestep_tag: Option<u32>,
}

impl FeatureSequence {
    pub fn new(frames: Tensor4, source_tag: impl Into<String>) -> Result<Self> {
        if frames.n() == 0 {
            return Err(Error::shape("feature sequence needs at least one frame"));
        }
        if !frames.is_finite() {
            return Err(Error::Numeric("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence { frames, frame_rate_hint: None, source_tag: source_tag.into(), timestep_tag: None })
    }

    pub fn frames(&self) -> &Tensor4 {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.n()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.n() == 0
    }

    /// `(h, w, C_in)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        (self.frames.h(), self.frames.w(), self.frames.c())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        gff::write(path, &self.frames)
    }
}

pub fn load_feature_sequence(path: &Path) -> Result<FeatureSequence> {
    let frames = gff::read(path)?;
    FeatureSequence::new(frames, format!("gff:{}", path.display()))
}

/// Binary silhouettes, `n = L`, one channel, values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    frames: Tensor4,
}

impl MaskSequence {
    pub fn new(frames: Tensor4) -> Result<Self> {
        if frames.c() != 1 {
            return Err(Error::shape(format!("mask needs 1 channel, got {}", frames.c())));
        }
        if frames.n() == 0 {
            return Err(Error::shape("mask sequence needs at least one frame"));
        }
        check_binary(&frames)?;
        Ok(MaskSequence { frames })
    }

    /// All-foreground masks matching a feature sequence.
    pub fn ones_like(seq: &FeatureSequence) -> Self {
        let (h, w, _) = seq.frame_dims();
        MaskSequence { frames: Tensor4::from_fn((seq.len(), h, w, 1), |_, _, _, _| 1.0) }
    }

    pub fn frames(&self) -> &Tensor4 {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.n()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.n() == 0
    }

    /// Frame count and spatial dims must match the paired features.
    pub fn check_pairs(&self, seq: &FeatureSequence) -> Result<()> {
        if self.len() != seq.len() {
            return Err(Error::shape(format!("mask has {} frames, features have {}", self.len(), seq.len())));
        }
        let (h, w, _) = seq.frame_dims();
        if (self.frames.h(), self.frames.w()) != (h, w) {
            return Err(Error::shape(format!(
                "mask frames are {}x{}, features are {h}x{w}",
                self.frames.h(),
                self.frames.w()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        gff::write(path, &self.frames)
    }
}

fn check_binary(t: &Tensor4) -> Result<(), FormatError> {
    match t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(FormatError::NonBinaryMask { index, value: t.data()[index] }),
        None => Ok(()),
    }
}

/// PGM samples at or above this value are foreground.
pub const PGM_THRESHOLD: u8 = 128;

/// Parse concatenated binary portable graymaps (`P5`, maxval 255) into a
/// binary stack. All frames must share dimensions.
pub fn decode_pgm_stack(bytes: &[u8]) -> Result<Tensor4, FormatError> {
    let mut pos = 0;
    let mut frames: Vec<f64> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut count = 0usize;
    while pos < bytes.len() {
        if bytes[pos..].iter().all(u8::is_ascii_whitespace) {
            break;
        }
        let (w, h, start) = pgm_header(bytes, pos)?;
        if let Some(d) = dims {
            if d != (h, w) {
                return Err(FormatError::Malformed {
                    what: "pgm stack",
                    detail: format!("frame {count} is {w}x{h}, first frame is {}x{}", d.1, d.0),
                });
            }
        }
        dims = Some((h, w));
        let len = w * h;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or(FormatError::TruncatedPayload { need: start.saturating_add(len), have: bytes.len() })?;
        frames.extend(bytes[start..end].iter().map(|&b| f64::from(u8::from(b >= PGM_THRESHOLD))));
        count += 1;
        pos = end;
    }
    let (h, w) = dims.ok_or(FormatError::Malformed { what: "pgm stack", detail: "no frames".into() })?;
    Ok(Tensor4::from_vec((count, h, w, 1), frames).expect("sizes checked"))
}

/// Returns `(width, height, payload offset)`.
fn pgm_header(bytes: &[u8], mut pos: usize) -> Result<(usize, usize, usize), FormatError> {
    let malformed = |detail: String| FormatError::Malformed { what: "pgm header", detail };
    if bytes.len() < pos + 2 {
        return Err(FormatError::TruncatedHeader { need: pos + 2, have: bytes.len() });
    }
    if &bytes[pos..pos + 2] != b"P5" {
        let found = [bytes[pos], bytes[pos + 1], *bytes.get(pos + 2).unwrap_or(&0), *bytes.get(pos + 3).unwrap_or(&0)];
        return Err(FormatError::BadMagic { found, expected: *b"P5\n\0" });
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(FormatError::TruncatedHeader { need: pos + 1, have: bytes.len() }),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| malformed(format!("number {text:?} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(malformed(format!("maxval {maxval}, only 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(FormatError::ZeroDim { dims: vec![w as u64, h as u64] });
    }
    if w.checked_mul(h).is_none() {
        return Err(FormatError::DimOverflow { dims: vec![w as u64, h as u64] });
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((w, h, pos + 1)),
        Some(_) => Err(malformed("missing whitespace after maxval".into())),
        None => Err(FormatError::TruncatedHeader { need: pos + 1, have: bytes.len() }),
    }
}

/// Encode a binary stack as concatenated P5 frames (0 or 255).
pub fn encode_pgm_stack(masks: &Tensor4) -> Vec<u8> {
    let (n, h, w, _) = masks.dims();
    let mut out = Vec::new();
    for f in 0..n {
        out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        for y in 0..h {
            for x in 0..w {
                out.push(if masks.at(f, y, x, 0) >= 0.5 { 255 } else { 0 });
            }
        }
    }
    out
}

/// Source index range covered by target cell `i` of `target` cells.
fn block(i: usize, source: usize, target: usize) -> (usize, usize) {
    let lo = i * source / target;
    let hi = ((i + 1) * source / target).max(lo + 1);
    (lo, hi.min(source))
}

/// Block-majority resize of a binary stack; ties go to foreground. When
/// upsampling each target cell reads its nearest source pixel.
pub fn resize_majority(masks: &Tensor4, target_h: usize, target_w: usize) -> Result<Tensor4> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::config("mask target size must be nonzero"));
    }
    let (n, h, w, c) = masks.dims();
    if c != 1 {
        return Err(Error::shape(format!("mask needs 1 channel, got {c}")));
    }
    Ok(Tensor4::from_fn((n, target_h, target_w, 1), |f, i, j, _| {
        let (y0, y1) = block(i, h, target_h);
        let (x0, x1) = block(j, w, target_w);
        let mut ones = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if masks.at(f, y, x, 0) != 0.0 {
                    ones += 1;
                }
            }
        }
        let total = (y1 - y0) * (x1 - x0);
        if 2 * ones >= total {
            1.0
        } else {
            0.0
        }
    }))
}

/// Load a silhouette stack (GFF with one channel, or concatenated P5) and
/// resize it to the feature resolution.
pub fn load_mask_sequence(path: &Path, target_h: usize, target_w: usize) -> Result<MaskSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw = decode_mask_bytes(&bytes).at_path(path)?;
    MaskSequence::new(resize_majority(&raw, target_h, target_w)?)
}

/// Format sniffing shared by the file loader and the fuzz targets.
pub fn decode_mask_bytes(bytes: &[u8]) -> Result<Tensor4> {
    if bytes.starts_with(&gff::MAGIC) {
        let t = gff::decode(bytes)?;
        if t.c() != 1 {
            return Err(FormatError::Malformed {
                what: "mask container",
                detail: format!("expected 1 channel, found {}", t.c()),
            }
            .into());
        }
        check_binary(&t)?;
        Ok(t)
    } else {
        Ok(decode_pgm_stack(bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> bool) -> Tensor4 {
        Tensor4::from_fn((dims.0, dims.1, dims.2, 1), |n, y, x, _| f64::from(u8::from(f(n, y, x))))
    }

    #[test]
    fn all_ones_stays_ones() {
        for (h, w) in [(96, 48), (7, 5), (3, 3)] {
            let m = mask((2, h, w), |_, _, _| true);
            for (th, tw) in [(48, 24), (4, 2), (5, 9)] {
                let r = resize_majority(&m, th, tw).unwrap();
                assert!(r.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn checkerboard_ties_go_to_foreground() {
        let m = mask((1, 8, 6), |_, y, x| (y + x) % 2 == 0);
        let r = resize_majority(&m, 4, 3).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_mask_matches_reference_downsampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = mask((2, 96, 48), |_, _, _| rng.random_bool(0.45));
        let r = resize_majority(&m, 48, 24).unwrap();
        for f in 0..2 {
            for i in 0..48 {
                for j in 0..24 {
                    let s: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| m.at(f, 2 * i + dy, 2 * j + dx, 0))
                        .sum();
                    let want = if s >= 2.0 { 1.0 } else { 0.0 };
                    assert_eq!(r.at(f, i, j, 0), want);
                }
            }
        }
    }

    #[test]
    fn pgm_stack_round_trip_and_threshold() {
        let m = mask((3, 4, 5), |n, y, x| (n + y * x) % 3 == 0);
        let bytes = encode_pgm_stack(&m);
        assert_eq!(decode_pgm_stack(&bytes).unwrap(), m);

        let raw = b"P5\n# comment\n2 1\n255\n\x7f\x80";
        let t = decode_pgm_stack(raw).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(decode_pgm_stack(b"P6\n1 1\n255\n\0"), Err(FormatError::BadMagic { .. })));
        assert!(matches!(decode_pgm_stack(b"P5\n1 1\n15\n\0"), Err(FormatError::Malformed { .. })));
        assert!(matches!(decode_pgm_stack(b"P5\n2 2\n255\n\0\0"), Err(FormatError::TruncatedPayload { .. })));
        assert!(matches!(decode_pgm_stack(b"P5\n1 1\n255\n\0P5\n2 1\n255\n\0\0"), Err(FormatError::Malformed { .. })));
        assert!(decode_pgm_stack(b"").is_err());
        assert!(decode_pgm_stack(b"P5\n99999999999999999999999 1\n255\n").is_err());
    }

    #[test]
    fn gff_masks_must_be_binary() {
        let t = Tensor4::from_vec((1, 1, 2, 1), vec![1.0, 0.5]).unwrap();
        let bytes = gff::encode(&t).unwrap();
        assert!(matches!(
            decode_mask_bytes(&bytes),
            Err(Error::Format { source: FormatError::NonBinaryMask { index: 1, .. }, .. })
        ));
        let t = Tensor4::zeros(1, 2, 2, 2);
        assert!(decode_mask_bytes(&gff::encode(&t).unwrap()).is_err());
    }

    #[test]
    fn load_masks_from_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let m = mask((2, 8, 4), |n, y, _| y >= n);
        let pgm = dir.path().join("m.pgm");
        std::fs::write(&pgm, encode_pgm_stack(&m)).unwrap();
        let gffp = dir.path().join("m.gff");
        gff::write(&gffp, &m).unwrap();
        let a = load_mask_sequence(&pgm, 4, 2).unwrap();
        let b = load_mask_sequence(&gffp, 4, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames().dims(), (2, 4, 2, 1));

        let feats = FeatureSequence::new(Tensor4::zeros(3, 4, 2, 4), "t").unwrap();
        assert!(matches!(a.check_pairs(&feats), Err(Error::Shape(_))));
        let feats = FeatureSequence::new(Tensor4::zeros(2, 4, 2, 4), "t").unwrap();
        a.check_pairs(&feats).unwrap();
    }

    #[test]
    fn feature_sequence_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.gff");
        let t = Tensor4::from_fn((3, 2, 2, 4), |n, y, x, c| (n * 7 + y * 5 + x * 3 + c) as f64 * 0.25);
        FeatureSequence::new(t.clone(), "mem").unwrap().save(&path).unwrap();
        let s = load_feature_sequence(&path).unwrap();
        assert_eq!(s.frames(), &t);
        assert!(s.source_tag.starts_with("gff:"));
        assert_eq!(s.timestep_tag, None);
    }
}
