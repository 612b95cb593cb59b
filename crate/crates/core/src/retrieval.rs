//! Bit-packed binary codes, exhaustive Hamming search and the evaluation
//! metrics computed on top of it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kiddo::CodeMatrix;
use crate::tensor::Mat;

/// `n` codes of `bits` bits, little-endian within 64-bit words. Bit `j` of a
/// code lives in word `j / 64` at position `j % 64`; 1 encodes +1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl PackedCodes {
    pub fn words_for(bits: usize) -> usize {
        bits.div_ceil(64)
    }

    fn empty(n: usize, bits: usize) -> Self {
        let words_per_code = Self::words_for(bits);
        PackedCodes {
            n,
            bits,
            words_per_code,
            words: vec![0; n * words_per_code],
        }
    }

    /// Builds from raw words; rejects codes with bits set beyond `bits`.
    pub fn from_words(n: usize, bits: usize, words: Vec<u64>) -> Result<Self> {
        let wpc = Self::words_for(bits);
        if words.len() != n * wpc {
            return Err(Error::shape(
                "PackedCodes::from_words",
                format!("{} words for {n} codes of {bits} bits", words.len()),
            ));
        }
        let codes = PackedCodes {
            n,
            bits,
            words_per_code: wpc,
            words,
        };
        let mask = codes.tail_mask();
        if (0..n).any(|i| codes.code(i)[wpc - 1] & !mask != 0) {
            return Err(Error::Format("bits set beyond the code width".into()));
        }
        Ok(codes)
    }

    fn tail_mask(&self) -> u64 {
        match self.bits % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    fn set_bit(&mut self, i: usize, j: usize) {
        self.words[i * self.words_per_code + j / 64] |= 1u64 << (j % 64);
    }

    /// Sign-quantizes the rows of `h` (n×b); entries `>= 0` become +1.
    pub fn from_signs(h: &Mat) -> Self {
        let mut out = Self::empty(h.rows(), h.cols());
        for i in 0..h.rows() {
            for (j, &v) in h.row(i).iter().enumerate() {
                if v >= 0.0 {
                    out.set_bit(i, j);
                }
            }
        }
        out
    }

    /// Packs the columns of a code matrix.
    pub fn from_code_matrix(b: &CodeMatrix) -> Self {
        Self::from_signs(&b.as_mat().transpose())
    }

    /// n×b matrix of ±1.
    pub fn unpack(&self) -> Mat {
        let mut m = Mat::filled(self.n, self.bits, -1.0);
        for i in 0..self.n {
            let code = self.code(i);
            for j in 0..self.bits {
                if (code[j / 64] >> (j % 64)) & 1 == 1 {
                    m.set(i, j, 1.0);
                }
            }
        }
        m
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut words = Vec::with_capacity(idx.len() * self.words_per_code);
        for &i in idx {
            words.extend_from_slice(self.code(i));
        }
        PackedCodes {
            n: idx.len(),
            bits: self.bits,
            words_per_code: self.words_per_code,
            words,
        }
    }

    /// Lower-case hex of one code, most significant word first.
    pub fn to_hex(&self, i: usize) -> String {
        let hex_digits = self.bits.div_ceil(4);
        let mut s = String::new();
        for w in self.code(i).iter().rev() {
            s.push_str(&format!("{w:016x}"));
        }
        s[s.len() - hex_digits..].to_string()
    }

    pub fn from_hex(codes: &[String], bits: usize) -> Result<Self> {
        let wpc = Self::words_for(bits);
        let mut words = Vec::with_capacity(codes.len() * wpc);
        for c in codes {
            let padded = format!("{c:0>width$}", width = wpc * 16);
            if padded.len() != wpc * 16 {
                return Err(Error::Format(format!(
                    "code `{c}` is wider than {bits} bits"
                )));
            }
            for k in (0..wpc).rev() {
                let chunk = &padded[k * 16..(k + 1) * 16];
                let w = u64::from_str_radix(chunk, 16)
                    .map_err(|e| Error::Format(format!("bad hex code `{c}`: {e}")))?;
                words.push(w);
            }
        }
        Self::from_words(codes.len(), bits, words)
    }
}

/// Number of differing bits.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

pub fn hamming_checked(a: &PackedCodes, i: usize, b: &PackedCodes, j: usize) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::shape(
            "hamming",
            format!("{} bits vs {} bits", a.bits, b.bits),
        ));
    }
    Ok(hamming(a.code(i), b.code(j)))
}

/// Multi-hot label sets stored as bitmasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    classes: usize,
    words_per_item: usize,
    masks: Vec<u64>,
}

impl Labels {
    pub fn from_indices(sets: &[Vec<usize>], classes: usize) -> Result<Self> {
        let wpi = classes.div_ceil(64).max(1);
        let mut masks = vec![0u64; sets.len() * wpi];
        for (i, set) in sets.iter().enumerate() {
            for &c in set {
                if c >= classes {
                    return Err(Error::Format(format!("label {c} out of {classes} classes")));
                }
                masks[i * wpi + c / 64] |= 1u64 << (c % 64);
            }
        }
        Ok(Labels {
            classes,
            words_per_item: wpi,
            masks,
        })
    }

    pub fn single(labels: &[usize], classes: usize) -> Result<Self> {
        let sets: Vec<Vec<usize>> = labels.iter().map(|&c| vec![c]).collect();
        Self::from_indices(&sets, classes)
    }

    /// Rows of a multi-hot n×C matrix; nonzero entries count as labels.
    pub fn from_multi_hot(y: &Mat) -> Self {
        let sets: Vec<Vec<usize>> = (0..y.rows())
            .map(|i| (0..y.cols()).filter(|&c| y.get(i, c) != 0.0).collect())
            .collect();
        Self::from_indices(&sets, y.cols()).expect("in range")
    }

    pub fn len(&self) -> usize {
        self.masks.len() / self.words_per_item
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn mask(&self, i: usize) -> &[u64] {
        &self.masks[i * self.words_per_item..(i + 1) * self.words_per_item]
    }

    /// Items share at least one label.
    pub fn relevant(&self, i: usize, other: &Labels, j: usize) -> bool {
        self.mask(i)
            .iter()
            .zip(other.mask(j))
            .any(|(a, b)| a & b != 0)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut masks = Vec::with_capacity(idx.len() * self.words_per_item);
        for &i in idx {
            masks.extend_from_slice(self.mask(i));
        }
        Labels {
            classes: self.classes,
            words_per_item: self.words_per_item,
            masks,
        }
    }

    pub fn to_indices(&self, i: usize) -> Vec<usize> {
        (0..self.classes)
            .filter(|&c| (self.mask(i)[c / 64] >> (c % 64)) & 1 == 1)
            .collect()
    }
}

/// Gallery side of the search.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub gallery: PackedCodes,
    pub labels: Labels,
    pub ids: Vec<String>,
}

impl RetrievalIndex {
    pub fn new(gallery: PackedCodes, labels: Labels, ids: Vec<String>) -> Result<Self> {
        if gallery.len() != labels.len() || gallery.len() != ids.len() {
            return Err(Error::shape(
                "RetrievalIndex",
                format!(
                    "{} codes, {} label sets, {} ids",
                    gallery.len(),
                    labels.len(),
                    ids.len()
                ),
            ));
        }
        Ok(RetrievalIndex {
            gallery,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gallery.is_empty()
    }

    /// Gallery positions sorted by (distance, position), all of them.
    fn ranking(&self, query: &[u64]) -> Vec<(usize, u32)> {
        let bits = self.gallery.bits();
        let dists: Vec<u32> = (0..self.len())
            .map(|i| hamming(query, self.gallery.code(i)))
            .collect();
        // counting sort on distance keeps ascending position within a bucket
        let mut counts = vec![0usize; bits + 2];
        for &d in &dists {
            counts[d as usize + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut out = vec![(0usize, 0u32); dists.len()];
        for (i, &d) in dists.iter().enumerate() {
            let slot = &mut counts[d as usize];
            out[*slot] = (i, d);
            *slot += 1;
        }
        out
    }

    /// Top `k` gallery positions by ascending Hamming distance, ties by position.
    pub fn search(&self, query: &[u64], k: usize) -> Result<Vec<(usize, u32)>> {
        if self.is_empty() {
            return Err(Error::Contract("search on an empty index".into()));
        }
        if k == 0 {
            return Err(Error::Contract("K must be at least 1".into()));
        }
        let mut r = self.ranking(query);
        r.truncate(k);
        Ok(r)
    }
}

/// Average precision over the top `k` of one ranking; the denominator is the
/// number of relevant items retrieved within the top `k`.
pub fn average_precision(relevance: &[bool], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

fn check_queries(index: &RetrievalIndex, queries: &PackedCodes, qlabels: &Labels) -> Result<()> {
    if queries.bits() != index.gallery.bits() {
        return Err(Error::shape(
            "metrics",
            "query and gallery bit widths differ",
        ));
    }
    if queries.len() != qlabels.len() {
        return Err(Error::shape(
            "metrics",
            "query codes and labels differ in count",
        ));
    }
    if qlabels.classes() != index.labels.classes() {
        return Err(Error::shape(
            "metrics",
            "query and gallery label spaces differ",
        ));
    }
    Ok(())
}

/// Mean of per-query AP@k, in [0, 1].
pub fn map_at_k(
    index: &RetrievalIndex,
    queries: &PackedCodes,
    qlabels: &Labels,
    k: usize,
) -> Result<f64> {
    check_queries(index, queries, qlabels)?;
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    if queries.is_empty() || index.is_empty() {
        return Ok(0.0);
    }
    let aps: Vec<f64> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let ranking = index.ranking(queries.code(q));
            let rel: Vec<bool> = ranking
                .iter()
                .take(k)
                .map(|&(g, _)| qlabels.relevant(q, &index.labels, g))
                .collect();
            average_precision(&rel, k)
        })
        .collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: u32,
    pub recall: f64,
    pub precision: f64,
}

/// Micro-averaged precision/recall when everything within Hamming radius
/// `τ = 0..=b` is retrieved. Radii that retrieve nothing for every query are
/// omitted, since precision is undefined there.
pub fn pr_curve(
    index: &RetrievalIndex,
    queries: &PackedCodes,
    qlabels: &Labels,
) -> Result<Vec<PrPoint>> {
    check_queries(index, queries, qlabels)?;
    let bits = index.gallery.bits();
    // per distance: (retrieved, relevant retrieved); plus total relevant
    let per_query: Vec<(Vec<u64>, Vec<u64>, u64)> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let mut retrieved = vec![0u64; bits + 1];
            let mut hits = vec![0u64; bits + 1];
            let mut relevant = 0u64;
            for g in 0..index.len() {
                let d = hamming(queries.code(q), index.gallery.code(g)) as usize;
                retrieved[d] += 1;
                if qlabels.relevant(q, &index.labels, g) {
                    hits[d] += 1;
                    relevant += 1;
                }
            }
            (retrieved, hits, relevant)
        })
        .collect();
    let mut retrieved = vec![0u64; bits + 1];
    let mut hits = vec![0u64; bits + 1];
    let mut relevant = 0u64;
    for (r, h, t) in &per_query {
        for d in 0..=bits {
            retrieved[d] += r[d];
            hits[d] += h[d];
        }
        relevant += t;
    }
    let mut out = Vec::new();
    let (mut cum_ret, mut cum_hit) = (0u64, 0u64);
    for d in 0..=bits {
        cum_ret += retrieved[d];
        cum_hit += hits[d];
        if cum_ret == 0 {
            continue;
        }
        out.push(PrPoint {
            threshold: d as u32,
            recall: if relevant == 0 {
                0.0
            } else {
                cum_hit as f64 / relevant as f64
            },
            precision: cum_hit as f64 / cum_ret as f64,
        });
    }
    Ok(out)
}

/// Mean Hamming-space silhouette, rescaled from [−1, 1] to [0, 100].
///
/// Per sample `s = (b̄ − ā) / max(ā, b̄)`; members of singleton classes and
/// samples with `ā = b̄ = 0` score 0.
pub fn silhouette(codes: &PackedCodes, labels: &[usize]) -> Result<f64> {
    if codes.len() != labels.len() {
        return Err(Error::shape(
            "silhouette",
            "codes and labels differ in count",
        ));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; classes];
    for &l in labels {
        sizes[l] += 1;
    }
    let populated = sizes.iter().filter(|&&s| s > 0).count();
    if populated < 2 {
        return Err(Error::Contract(
            "silhouette needs at least two classes".into(),
        ));
    }
    let n = codes.len();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0u64; classes];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += hamming(codes.code(i), codes.code(j)) as u64;
                }
            }
            let a = sums[own] as f64 / (sizes[own] - 1) as f64;
            let b = (0..classes)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] as f64 / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n as f64;
    Ok((mean + 1.0) * 50.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub repetitions: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// In [0, 1]; the CLI adds a percent copy.
    pub map_at_k: f64,
    pub k: usize,
    pub pr_curve: Vec<PrPoint>,
    pub silhouette_0_100: Option<f64>,
    pub timing: Option<TimingReport>,
    pub queries: usize,
    pub gallery: usize,
    pub bits: usize,
}

impl MetricReport {
    /// `threshold,recall,precision` rows with a header.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold,recall,precision\n");
        for p in &self.pr_curve {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.recall, p.precision));
        }
        s
    }
}
