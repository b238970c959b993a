//! Little-endian binary container for volumes, label maps and probability maps.
//!
//! ```text
//! magic      4 bytes  "UMCT"
//! version    u32      1
//! dtype      u32      1 = u8 labels, 2 = f32, 3 = f64
//! ndim       u32      3 (D, H, W) or 4 (C, D, H, W)
//! shape      ndim × u64
//! spacing    3 × f64  mm per spatial axis
//! origin     3 × f64
//! n_classes  u32      class count for labels / channels for probability maps, else 0
//! data       row-major voxels
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{voxel_count, Case, LabelMap, ProbMap, Volume3D};

const MAGIC: &[u8; 4] = b"UMCT";
const VERSION: u32 = 1;
const DTYPE_U8: u32 = 1;

struct Header {
    dtype: u32,
    shape: Vec<usize>,
    spacing: [f64; 3],
    origin: [f64; 3],
    n_classes: u32,
}

fn write_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.dtype.to_le_bytes());
    out.extend_from_slice(&(h.shape.len() as u32).to_le_bytes());
    for &s in &h.shape {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in h.spacing.iter().chain(&h.origin) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.n_classes.to_le_bytes());
}

fn read_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    let err = |r: &str| Error::Format { path: path.to_path_buf(), reason: r.to_string() };
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&'a [u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| err("truncated header"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(err("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let dtype = u32_at(take(4)?);
    let ndim = u32_at(take(4)?) as usize;
    if ndim != 3 && ndim != 4 {
        return Err(err(&format!("ndim {ndim} not supported")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
    }
    let mut geo = [0.0f64; 6];
    for g in &mut geo {
        *g = f64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let n_classes = u32_at(take(4)?);
    Ok((
        Header {
            dtype,
            shape,
            spacing: [geo[0], geo[1], geo[2]],
            origin: [geo[3], geo[4], geo[5]],
            n_classes,
        },
        &bytes[pos..],
    ))
}

fn check_payload(path: &Path, payload: &[u8], elems: usize, width: usize) -> Result<()> {
    if payload.len() != elems * width {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("payload has {} bytes, expected {}", payload.len(), elems * width),
        });
    }
    Ok(())
}

fn spatial(path: &Path, shape: &[usize]) -> Result<[usize; 3]> {
    let n = shape.len();
    if n < 3 {
        return Err(Error::Format { path: path.to_path_buf(), reason: "missing spatial axes".into() });
    }
    Ok([shape[n - 3], shape[n - 2], shape[n - 1]])
}

pub fn encode_volume<T: Real>(v: &Volume3D<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + v.data().len() * T::BYTES);
    write_header(
        &mut out,
        &Header { dtype: T::DTYPE, shape: v.shape().to_vec(), spacing: v.spacing, origin: v.origin, n_classes: 0 },
    );
    for &x in v.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn decode_volume<T: Real>(bytes: &[u8], path: &Path) -> Result<Volume3D<T>> {
    let (h, payload) = read_header(bytes, path)?;
    if h.dtype != T::DTYPE || h.shape.len() != 3 {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("not a dtype-{} volume", T::DTYPE) });
    }
    let shape = spatial(path, &h.shape)?;
    check_payload(path, payload, voxel_count(shape), T::BYTES)?;
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Volume3D::with_geometry(shape, data, h.spacing, h.origin)
}

pub fn encode_label(l: &LabelMap, spacing: [f64; 3], origin: [f64; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + l.data().len());
    write_header(
        &mut out,
        &Header { dtype: DTYPE_U8, shape: l.shape().to_vec(), spacing, origin, n_classes: l.n_classes() as u32 },
    );
    out.extend_from_slice(l.data());
    out
}

pub fn decode_label(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (h, payload) = read_header(bytes, path)?;
    if h.dtype != DTYPE_U8 || h.shape.len() != 3 {
        return Err(Error::Format { path: path.to_path_buf(), reason: "not a label map".into() });
    }
    let shape = spatial(path, &h.shape)?;
    check_payload(path, payload, voxel_count(shape), 1)?;
    LabelMap::new(shape, payload.to_vec(), h.n_classes as usize)
}

pub fn encode_probmap<T: Real>(p: &ProbMap<T>, spacing: [f64; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + p.data().len() * T::BYTES);
    let [d, hh, w] = p.shape();
    write_header(
        &mut out,
        &Header { dtype: T::DTYPE, shape: vec![p.n_classes(), d, hh, w], spacing, origin: [0.0; 3], n_classes: p.n_classes() as u32 },
    );
    for &x in p.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn decode_probmap<T: Real>(bytes: &[u8], path: &Path) -> Result<ProbMap<T>> {
    let (h, payload) = read_header(bytes, path)?;
    if h.dtype != T::DTYPE || h.shape.len() != 4 {
        return Err(Error::Format { path: path.to_path_buf(), reason: "not a probability map".into() });
    }
    let shape = spatial(path, &h.shape)?;
    check_payload(path, payload, h.shape[0] * voxel_count(shape), T::BYTES)?;
    ProbMap::new(h.shape[0], shape, payload.chunks_exact(T::BYTES).map(T::read_le).collect())
}

pub fn write_volume<T: Real>(path: &Path, v: &Volume3D<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_volume(v))?)
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Volume3D<T>> {
    decode_volume(&std::fs::read(path)?, path)
}

pub fn write_label(path: &Path, l: &LabelMap) -> Result<()> {
    Ok(std::fs::write(path, encode_label(l, [1.0; 3], [0.0; 3]))?)
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    decode_label(&std::fs::read(path)?, path)
}

pub fn write_probmap<T: Real>(path: &Path, p: &ProbMap<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_probmap(p, [1.0; 3]))?)
}

pub fn read_probmap<T: Real>(path: &Path) -> Result<ProbMap<T>> {
    decode_probmap(&std::fs::read(path)?, path)
}

/// File names used for a case inside a dataset directory.
pub fn case_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.vol.umct")), dir.join(format!("{id}.lbl.umct")))
}

pub fn write_case(dir: &Path, case: &Case) -> Result<()> {
    let (vp, lp) = case_paths(dir, &case.id);
    write_volume(&vp, &case.volume)?;
    if let Some(l) = &case.label {
        std::fs::write(&lp, encode_label(l, case.volume.spacing, case.volume.origin))?;
    }
    Ok(())
}

pub fn read_case(dir: &Path, id: &str, domain_tag: &str) -> Result<Case> {
    let (vp, lp) = case_paths(dir, id);
    let volume = read_volume(&vp)?;
    let label = if lp.exists() { Some(read_label(&lp)?) } else { None };
    crate::volume::validate_case(Case { id: id.to_string(), volume, label, domain_tag: domain_tag.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let mut v = Volume3D::<f32>::new([1, 1, 2], vec![1.0, -2.0]).unwrap();
        v.spacing = [0.5, 1.0, 2.0];
        let b = encode_volume(&v);
        assert_eq!(&b[..4], b"UMCT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
        // 16 + 3·8 shape + 6·8 geometry + 4 n_classes
        assert_eq!(b.len(), 16 + 24 + 48 + 4 + 8);
        assert_eq!(&b[b.len() - 8..b.len() - 4], &1.0f32.to_le_bytes());
        let back: Volume3D<f32> = decode_volume(&b, Path::new("m")).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_corruption() {
        let l = LabelMap::new([2, 2, 2], vec![0, 1, 2, 0, 1, 2, 0, 1], 3).unwrap();
        let b = encode_label(&l, [1.0; 3], [0.0; 3]);
        assert_eq!(decode_label(&b, Path::new("m")).unwrap(), l);
        assert!(decode_label(&b[..b.len() - 1], Path::new("m")).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_label(&bad, Path::new("m")).is_err());
        let mut bad = b;
        *bad.last_mut().unwrap() = 9;
        assert!(decode_label(&bad, Path::new("m")).is_err());
        assert!(decode_volume::<f32>(&encode_label(&l, [1.0; 3], [0.0; 3]), Path::new("m")).is_err());
    }

    #[test]
    fn probmap_round_trip() {
        let p = ProbMap::<f32>::new(2, [1, 1, 2], vec![0.25, 1.0, 0.75, 0.0]).unwrap();
        assert_eq!(decode_probmap::<f32>(&encode_probmap(&p, [1.0; 3]), Path::new("m")).unwrap(), p);
    }
}
