//! Response matrices and representational similarity matrices.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{gemm, MatRef, Real, Tensor};
use crate::par;

/// Entry range slack for similarity values.
pub const RANGE_SLACK: f64 = 1e-12;

/// Responses of `D` units to `M` stimuli: row `i` is the response vector for
/// `stimulus_ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    stimulus_ids: Vec<String>,
    dim: usize,
    values: Vec<f64>,
}

impl ResponseMatrix {
    pub fn new(stimulus_ids: Vec<String>, dim: usize, values: Vec<f64>) -> Result<Self> {
        let m = stimulus_ids.len();
        if m < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 stimuli, got {m}")));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("response vectors need at least one unit".into()));
        }
        if values.len() != m * dim {
            return Err(Error::Shape {
                context: "response matrix".into(),
                expected: vec![m, dim],
                actual: vec![values.len()],
            });
        }
        check_unique(&stimulus_ids)?;
        for (id, row) in stimulus_ids.iter().zip(values.chunks(dim)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(format!("stimulus `{id}` has a non-finite response")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate(format!(
                    "stimulus `{id}` has an all-zero response vector"
                )));
            }
        }
        Ok(Self { stimulus_ids, dim, values })
    }

    pub fn stimulus_ids(&self) -> &[String] {
        &self.stimulus_ids
    }

    pub fn num_stimuli(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim)
    }

    /// Value of unit `unit` for stimulus `stim`.
    pub fn get(&self, stim: usize, unit: usize) -> f64 {
        self.values[stim * self.dim + unit]
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate stimulus id `{id}`")));
        }
    }
    Ok(())
}

/// Symmetric `M×M` similarity matrix over an ordered stimulus list.
#[derive(Clone, Debug, PartialEq)]
pub struct Rsm {
    stimulus_ids: Vec<String>,
    values: Vec<f64>,
}

impl Rsm {
    /// Checks squareness, unique ids, symmetry and the `[-1, 1]` range.
    pub fn new(stimulus_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let m = stimulus_ids.len();
        if values.len() != m * m {
            return Err(Error::Shape {
                context: "rsm".into(),
                expected: vec![m, m],
                actual: vec![values.len()],
            });
        }
        check_unique(&stimulus_ids)?;
        for i in 0..m {
            for j in 0..m {
                let v = values[i * m + j];
                if !v.is_finite() || v.abs() > 1.0 + RANGE_SLACK {
                    return Err(Error::InvalidArgument(format!("rsm entry ({i},{j}) = {v} outside [-1, 1]")));
                }
                if v != values[j * m + i] {
                    return Err(Error::InvalidArgument(format!("rsm not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { stimulus_ids, values })
    }

    pub fn stimulus_ids(&self) -> &[String] {
        &self.stimulus_ids
    }

    pub fn size(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    /// Sub-matrix over `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> Result<Rsm> {
        let m = self.size();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!("stimulus index {bad} out of range {m}")));
        }
        let ids = indices.iter().map(|&i| self.stimulus_ids[i].clone()).collect();
        let values = indices
            .iter()
            .flat_map(|&i| indices.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        Ok(Rsm { stimulus_ids: ids, values })
    }

    /// Mean of the strictly off-diagonal entries.
    pub fn off_diagonal_mean(&self) -> f64 {
        let m = self.size();
        let mut sum = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (m * (m - 1)) as f64
    }
}

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape {
            context: "cosine similarity".into(),
            expected: vec![u.len()],
            actual: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("zero-norm vector has no cosine similarity".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine-similarity RSM of the response rows.
///
/// Rows are normalized once and multiplied out one output row at a time; the
/// upper triangle is mirrored so the result is exactly symmetric, and the
/// diagonal is exactly 1.
pub fn compute_rsm(responses: &ResponseMatrix) -> Rsm {
    let m = responses.num_stimuli();
    let d = responses.dim();
    let mut unit = responses.values().to_vec();
    par::for_each_chunk_mut(&mut unit, d, |_, row| {
        // ResponseMatrix guarantees a non-zero norm.
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    });
    let mut values = vec![0.0; m * m];
    par::for_each_chunk_mut(&mut values, m, |i, row| {
        gemm(
            MatRef::new(&unit[i * d..(i + 1) * d], 1, d),
            MatRef::new(&unit, m, d).t(),
            0.0,
            row,
        );
    });
    for i in 0..m {
        values[i * m + i] = 1.0;
        for j in i + 1..m {
            let v = values[i * m + j].clamp(-1.0, 1.0);
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    Rsm {
        stimulus_ids: responses.stimulus_ids().to_vec(),
        values,
    }
}

/// Element-wise mean of RSMs over identical, identically ordered stimuli.
pub fn average_rsms(rsms: &[Rsm]) -> Result<Rsm> {
    let first = rsms
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average an empty list of RSMs".into()))?;
    for (k, r) in rsms.iter().enumerate().skip(1) {
        if r.stimulus_ids != first.stimulus_ids {
            return Err(Error::StimulusMismatch(format!(
                "RSM {k} does not share the stimulus ids (or their order) of RSM 0"
            )));
        }
    }
    let n = rsms.len() as f64;
    let mut values = vec![0.0; first.values.len()];
    for r in rsms {
        for (a, b) in values.iter_mut().zip(&r.values) {
            *a += b;
        }
    }
    values.iter_mut().for_each(|v| *v /= n);
    Ok(Rsm {
        stimulus_ids: first.stimulus_ids.clone(),
        values,
    })
}

fn check_aligned(target: &Rsm, predicted: &Rsm) -> Result<()> {
    if target.stimulus_ids != predicted.stimulus_ids {
        return Err(Error::StimulusMismatch(
            "target and predicted RSMs cover different stimuli or orders".into(),
        ));
    }
    Ok(())
}

/// Scale applied to the squared-mismatch sum: 1, or `1/M²` when normalized.
pub fn mismatch_scale(m: usize, normalize: bool) -> f64 {
    if normalize {
        1.0 / (m * m) as f64
    } else {
        1.0
    }
}

/// `Σᵢⱼ (targetᵢⱼ − predictedᵢⱼ)²` over all `M²` entries, divided by `M²` when
/// `normalize` is set.
pub fn rsm_mismatch(target: &Rsm, predicted: &Rsm, normalize: bool) -> Result<f64> {
    check_aligned(target, predicted)?;
    let sum: f64 = target
        .values
        .iter()
        .zip(&predicted.values)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok(sum * mismatch_scale(target.size(), normalize))
}

/// Gradient of [`rsm_mismatch`] with respect to each predicted entry.
pub fn rsm_mismatch_gradient(target: &Rsm, predicted: &Rsm, normalize: bool) -> Result<Vec<f64>> {
    check_aligned(target, predicted)?;
    let scale = mismatch_scale(target.size(), normalize);
    Ok(target
        .values
        .iter()
        .zip(&predicted.values)
        .map(|(t, p)| -2.0 * scale * (t - p))
        .collect())
}

/// Flatten each stimulus's activation map (channel-major, i.e. the tensor's
/// own `C×H×W` row-major order) into one response row.
pub fn activations_to_responses<T: Real>(captured: &Tensor<T>, stimulus_ids: &[String]) -> Result<ResponseMatrix> {
    if captured.batch() != stimulus_ids.len() {
        return Err(Error::Shape {
            context: "activations vs stimulus ids".into(),
            expected: vec![stimulus_ids.len()],
            actual: captured.shape().to_vec(),
        });
    }
    ResponseMatrix::new(stimulus_ids.to_vec(), captured.row_len(), captured.to_f64_vec())
}

const RSM_MAGIC: &[u8; 8] = b"BTRSM001";
const RESPONSE_MAGIC: &[u8; 8] = b"BTRSP001";

fn put_ids(out: &mut Vec<u8>, ids: &[String]) {
    for id in ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn ids(&mut self, m: usize) -> Result<Vec<String>> {
        (0..m)
            .map(|_| {
                let len = self.u32()? as usize;
                let at = self.pos;
                String::from_utf8(self.take(len)?.to_vec())
                    .map_err(|_| Error::parse(self.path, format!("stimulus id at byte {at} is not UTF-8")))
            })
            .collect()
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::parse(self.path, "size overflow"))?)?;
        Ok(bytes.chunks(8).map(f64::from_le_bytes_chunk).collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::parse(self.path, format!("trailing bytes after offset {}", self.pos)));
        }
        Ok(())
    }
}

trait FromLeChunk {
    fn from_le_bytes_chunk(b: &[u8]) -> Self;
}
impl FromLeChunk for f64 {
    fn from_le_bytes_chunk(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().unwrap())
    }
}

/// RSM file layout (little-endian):
///
/// ```text
/// 8 bytes  magic "BTRSM001"
/// u64      M
/// M ×      (u32 byte length, UTF-8 stimulus id)
/// M·M      f64 values, row-major
/// ```
pub fn encode_rsm(rsm: &Rsm) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + rsm.values.len() * 8);
    out.extend_from_slice(RSM_MAGIC);
    out.extend_from_slice(&(rsm.size() as u64).to_le_bytes());
    put_ids(&mut out, &rsm.stimulus_ids);
    for v in &rsm.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_rsm(rsm: &Rsm, path: &Path) -> Result<()> {
    fs::write(path, encode_rsm(rsm)).map_err(|e| Error::io(path, e))
}

pub fn load_rsm(path: &Path) -> Result<Rsm> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(8)? != RSM_MAGIC {
        return Err(Error::parse(path, "not an RSM file (bad magic)"));
    }
    let m = c.u64()? as usize;
    let ids = c.ids(m)?;
    let values = c.f64s(m * m)?;
    c.finish()?;
    Rsm::new(ids, values).map_err(|e| Error::parse(path, e.to_string()))
}

/// Raw contents of a response file: rows may be all-zero (dead units), so
/// this is not validated as a [`ResponseMatrix`] until asked.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseFile {
    pub ids: Vec<String>,
    pub labels: Option<Vec<u32>>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ResponseFile {
    pub fn into_response_matrix(self) -> Result<ResponseMatrix> {
        ResponseMatrix::new(self.ids, self.dim, self.values)
    }
}

impl From<&ResponseMatrix> for ResponseFile {
    fn from(r: &ResponseMatrix) -> Self {
        Self {
            ids: r.stimulus_ids.clone(),
            labels: None,
            dim: r.dim,
            values: r.values.clone(),
        }
    }
}

/// Response file layout (little-endian):
///
/// ```text
/// 8 bytes  magic "BTRSP001"
/// u64      M (rows)
/// u64      D (columns)
/// u8       1 if labels follow the ids, else 0
/// M ×      (u32 byte length, UTF-8 id)
/// M ×      u32 label            (only when flagged)
/// M·D      f64 values, row-major
/// ```
pub fn encode_responses(file: &ResponseFile) -> Result<Vec<u8>> {
    let m = file.ids.len();
    if file.values.len() != m * file.dim {
        return Err(Error::Shape {
            context: "response file".into(),
            expected: vec![m, file.dim],
            actual: vec![file.values.len()],
        });
    }
    if file.labels.as_ref().is_some_and(|l| l.len() != m) {
        return Err(Error::InvalidArgument("one label per row required".into()));
    }
    let mut out = Vec::with_capacity(25 + file.values.len() * 8);
    out.extend_from_slice(RESPONSE_MAGIC);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(file.dim as u64).to_le_bytes());
    out.push(u8::from(file.labels.is_some()));
    put_ids(&mut out, &file.ids);
    if let Some(labels) = &file.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    for v in &file.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_responses(file: &ResponseFile, path: &Path) -> Result<()> {
    fs::write(path, encode_responses(file)?).map_err(|e| Error::io(path, e))
}

pub fn load_responses(path: &Path) -> Result<ResponseFile> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(8)? != RESPONSE_MAGIC {
        return Err(Error::parse(path, "not a response file (bad magic)"));
    }
    let m = c.u64()? as usize;
    let dim = c.u64()? as usize;
    let flag = c.take(1)?[0];
    let ids = c.ids(m)?;
    let labels = match flag {
        0 => None,
        1 => Some((0..m).map(|_| c.u32()).collect::<Result<Vec<_>>>()?),
        other => return Err(Error::parse(path, format!("bad label flag {other}"))),
    };
    let values = c.f64s(m * dim)?;
    c.finish()?;
    Ok(ResponseFile { ids, labels, dim, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3., 4.], &[3., 4.]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        let want = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine_similarity(&[1., 2., 3.], &[4., 5., 6.]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.974631846).abs() < 1e-9);
        assert!(cosine_similarity(&[0., 0.], &[1., 2.]).is_err());
        assert!(cosine_similarity(&[1.], &[1., 2.]).is_err());
    }

    #[test]
    fn small_rsms() {
        let dup = ResponseMatrix::new(ids(2), 2, vec![1., 2., 1., 2.]).unwrap();
        for v in compute_rsm(&dup).values() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let orth = ResponseMatrix::new(ids(2), 2, vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(compute_rsm(&orth).values(), &[1., 0., 0., 1.]);
    }

    #[test]
    fn response_matrix_validation() {
        let err = ResponseMatrix::new(ids(2), 2, vec![1., 2., 0., 0.]).unwrap_err();
        assert!(err.to_string().contains("s1"), "{err}");
        assert!(ResponseMatrix::new(vec!["a".into(), "a".into()], 1, vec![1., 2.]).is_err());
        assert!(ResponseMatrix::new(ids(1), 1, vec![1.]).is_err());
        assert!(ResponseMatrix::new(ids(2), 0, vec![]).is_err());
    }

    #[test]
    fn averaging() {
        let a = Rsm::new(ids(2), vec![1., 0.2, 0.2, 1.]).unwrap();
        let b = Rsm::new(ids(2), vec![1., 0.6, 0.6, 1.]).unwrap();
        assert_eq!(average_rsms(std::slice::from_ref(&a)).unwrap(), a);
        let m = average_rsms(&[a.clone(), b]).unwrap();
        assert!((m.get(0, 1) - 0.4).abs() < 1e-15);
        assert_eq!(m.get(0, 0), 1.0);
        let c = Rsm::new(vec!["s1".into(), "s0".into()], vec![1., 0.6, 0.6, 1.]).unwrap();
        assert!(matches!(average_rsms(&[a, c]), Err(Error::StimulusMismatch(_))));
        assert!(average_rsms(&[]).is_err());
    }

    #[test]
    fn mismatch_examples() {
        let a = Rsm::new(ids(2), vec![1., 0.5, 0.5, 1.]).unwrap();
        let b = Rsm::new(ids(2), vec![1., 0.3, 0.3, 1.]).unwrap();
        assert_eq!(rsm_mismatch(&a, &a, false).unwrap(), 0.0);
        assert!((rsm_mismatch(&a, &b, false).unwrap() - 0.08).abs() < 1e-15);
        assert!((rsm_mismatch(&a, &b, true).unwrap() - 0.02).abs() < 1e-15);
        let other = Rsm::new(vec!["x".into(), "y".into()], vec![1., 0.3, 0.3, 1.]).unwrap();
        assert!(rsm_mismatch(&a, &other, false).is_err());
    }

    #[test]
    fn mismatch_gradient_matches_finite_differences() {
        let t = Rsm::new(ids(3), vec![1., 0.5, -0.2, 0.5, 1., 0.1, -0.2, 0.1, 1.]).unwrap();
        let p = vec![0.9, 0.3, 0.4, 0.3, 1., -0.6, 0.4, -0.6, 0.8];
        for normalize in [false, true] {
            let pr = Rsm { stimulus_ids: ids(3), values: p.clone() };
            let g = rsm_mismatch_gradient(&t, &pr, normalize).unwrap();
            let eps = 1e-6;
            for (k, &gk) in g.iter().enumerate() {
                let mut hi = pr.clone();
                hi.values[k] += eps;
                let mut lo = pr.clone();
                lo.values[k] -= eps;
                let fd = (rsm_mismatch(&t, &hi, normalize).unwrap() - rsm_mismatch(&t, &lo, normalize).unwrap()) / (2.0 * eps);
                let rel = (fd - gk).abs() / gk.abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-6, "entry {k}: {fd} vs {gk}");
            }
        }
    }

    #[test]
    fn activations_flatten_channel_major() {
        let t = Tensor::<f64>::new(vec![2, 2, 1, 1], vec![3., 4., 1., 0.]).unwrap();
        let r = activations_to_responses(&t, &ids(2)).unwrap();
        assert_eq!(r.row(0), &[3., 4.]);
        assert_eq!(r.row(1), &[1., 0.]);
        let dead = Tensor::<f64>::new(vec![2, 1, 1, 1], vec![1., 0.]).unwrap();
        assert!(activations_to_responses(&dead, &ids(2)).unwrap_err().to_string().contains("s1"));
        assert!(activations_to_responses(&t, &ids(3)).is_err());
    }

    #[test]
    fn files_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let r = ResponseMatrix::new(ids(3), 2, vec![0.1, 0.7, 1e-300, 3.0, -2.5, 0.3]).unwrap();
        let rsm = compute_rsm(&r);
        let p = dir.path().join("a.rsm");
        save_rsm(&rsm, &p).unwrap();
        let back = load_rsm(&p).unwrap();
        assert_eq!(encode_rsm(&back), encode_rsm(&rsm));
        let mut f = ResponseFile::from(&r);
        f.labels = Some(vec![4, 0, 9]);
        let q = dir.path().join("a.resp");
        save_responses(&f, &q).unwrap();
        assert_eq!(load_responses(&q).unwrap(), f);
        std::fs::write(&q, b"BTRSP001\x01").unwrap();
        assert!(load_responses(&q).is_err());
    }
}
