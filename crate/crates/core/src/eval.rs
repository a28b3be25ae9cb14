//! Probe/gallery retrieval: rank-k accuracy over part-wise embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Covariate, Dataset};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEntry {
    pub sequence_id: usize,
    pub identity: usize,
    pub covariate: Covariate,
    /// `strips × dim`
    pub embedding: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    entries: Vec<EmbeddingEntry>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: EmbeddingEntry) -> Result<()> {
        if entry.embedding.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding for sequence {}", entry.sequence_id)));
        }
        if let Some(first) = self.entries.first() {
            let want = (first.embedding.rows(), first.embedding.cols());
            let got = (entry.embedding.rows(), entry.embedding.cols());
            if want != got {
                return Err(Error::shape(format!("embedding is {got:?}, set holds {want:?}")));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[EmbeddingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<EmbeddingEntry> for Result<EmbeddingSet> {
    fn from_iter<I: IntoIterator<Item = EmbeddingEntry>>(iter: I) -> Self {
        let mut set = EmbeddingSet::new();
        for e in iter {
            set.push(e)?;
        }
        Ok(set)
    }
}

/// Sum over strips of the per-strip Euclidean distance.
pub fn strip_distance(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows()).map(|s| a.row(s).iter().zip(b.row(s)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub rank1: f64,
    pub rank5: f64,
    /// Rank-1 per probe covariate.
    pub per_covariate: BTreeMap<String, f64>,
    pub probes: usize,
    /// Probes whose identity has no gallery entry.
    pub excluded: usize,
    /// FNV-1a over the little-endian bytes of the probe × gallery distances.
    pub distance_checksum: u64,
}

impl RetrievalReport {
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "rank1={}", self.rank1).unwrap();
        writeln!(out, "rank5={}", self.rank5).unwrap();
        for (tag, v) in &self.per_covariate {
            writeln!(out, "rank1.{tag}={v}").unwrap();
        }
        writeln!(out, "probes={}", self.probes).unwrap();
        writeln!(out, "excluded={}", self.excluded).unwrap();
        writeln!(out, "distance_checksum={:016x}", self.distance_checksum).unwrap();
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<12} {:>8} {:>8}", "covariate", "rank-1", "rank-5").unwrap();
        writeln!(out, "{:<12} {:>8.4} {:>8.4}", "all", self.rank1, self.rank5).unwrap();
        for (tag, v) in &self.per_covariate {
            writeln!(out, "{:<12} {:>8.4} {:>8}", tag, v, "-").unwrap();
        }
        writeln!(out, "probes {} excluded {}", self.probes, self.excluded).unwrap();
        out
    }
}

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= u64::from(b);
        *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

/// Rank position (0-based) of the first gallery entry with the probe's
/// identity, gallery sorted by distance then by ascending sequence id.
fn first_hit(probe: &EmbeddingEntry, gallery: &EmbeddingSet, hash: &mut u64) -> Option<usize> {
    let mut ranked: Vec<(f64, usize, usize)> = gallery
        .entries
        .iter()
        .filter(|g| g.sequence_id != probe.sequence_id)
        .map(|g| {
            let d = strip_distance(&probe.embedding, &g.embedding);
            (d, g.sequence_id, g.identity)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (d, _, _) in &ranked {
        fnv1a(hash, &d.to_le_bytes());
    }
    ranked.iter().position(|r| r.2 == probe.identity)
}

/// Rank-1 and rank-k accuracy of `probe` against `gallery`. Gallery
/// entries sharing the probe's sequence id never count as matches.
pub fn rank_k(gallery: &EmbeddingSet, probe: &EmbeddingSet, k: usize) -> Result<RetrievalReport> {
    if gallery.is_empty() {
        return Err(Error::shape("gallery is empty"));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let (mut hits1, mut hitsk, mut counted, mut excluded) = (0usize, 0usize, 0usize, 0usize);
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in &probe.entries {
        let present = gallery.entries.iter().any(|g| g.identity == p.identity && g.sequence_id != p.sequence_id);
        if !present {
            excluded += 1;
            continue;
        }
        let pos = first_hit(p, gallery, &mut hash).expect("identity present");
        counted += 1;
        let slot = per.entry(p.covariate.tag().to_string()).or_default();
        slot.1 += 1;
        if pos == 0 {
            hits1 += 1;
            slot.0 += 1;
        }
        if pos < k {
            hitsk += 1;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(RetrievalReport {
        rank1: frac(hits1, counted),
        rank5: frac(hitsk, counted),
        per_covariate: per.into_iter().map(|(t, (h, n))| (t, frac(h, n))).collect(),
        probes: counted,
        excluded,
        distance_checksum: hash,
    })
}

/// Assignment of each identity's sequences (by index) to roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub gallery: Vec<usize>,
    pub probe: Vec<usize>,
}

impl SplitSpec {
    /// With `n` sequences per identity: the last two are probes (one of
    /// them normally recolored), the one before is the gallery, the rest
    /// train.
    pub fn standard(n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::config(format!("standard split needs 4 sequences per identity, got {n}")));
        }
        Ok(SplitSpec { train: (0..n - 3).collect(), gallery: vec![n - 3], probe: vec![n - 2, n - 1] })
    }

    pub fn validate(&self, seqs_per_id: usize) -> Result<()> {
        if self.gallery.is_empty() || self.probe.is_empty() {
            return Err(Error::config("gallery and probe splits must be nonempty"));
        }
        for &i in self.train.iter().chain(&self.gallery).chain(&self.probe) {
            if i >= seqs_per_id {
                return Err(Error::config(format!("split references sequence {i}, only {seqs_per_id} per identity")));
            }
        }
        Ok(())
    }
}

pub fn embed_split(model: &Model, dataset: &Dataset, seqs: &[usize]) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::new();
    for id in 0..dataset.num_ids() {
        for &s in seqs {
            let sample = dataset.sample(id, s);
            set.push(EmbeddingEntry {
                sequence_id: sample.sequence_id,
                identity: sample.identity,
                covariate: sample.covariate,
                embedding: model.embed(&sample.features, &sample.masks)?,
            })?;
        }
    }
    Ok(set)
}

/// Embed gallery and probe sequences in eval mode and report rank-1/5.
pub fn evaluate(model: &Model, dataset: &Dataset, split: &SplitSpec) -> Result<RetrievalReport> {
    split.validate(dataset.spec.seqs_per_id)?;
    let gallery = embed_split(model, dataset, &split.gallery)?;
    let probe = embed_split(model, dataset, &split.probe)?;
    rank_k(&gallery, &probe, 5)
}
