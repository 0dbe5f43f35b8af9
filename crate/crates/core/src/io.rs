//! Binary file formats: descriptor sets (`FVD1`), GMMs (`FVG1`) and
//! projection models (`FVP1`). All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::projection::{ProjectionMethod, ProjectionModel};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"FVD1";
pub const GMM_MAGIC: &[u8; 4] = b"FVG1";
pub const PROJECTION_MAGIC: &[u8; 4] = b"FVP1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.what.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated at byte {}", self.pos))),
        }
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.fail(format!("expected magic {}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Descriptor values are stored as `f32`; encoding rounds to nearest.
pub fn encode_descriptors(set: &LocalDescriptorSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + set.data().len() * 4);
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    put_u32(&mut out, set.count())?;
    put_u32(&mut out, set.dim())?;
    put_u32(&mut out, 0)?;
    for v in set.data() {
        let f = *v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidInput(format!("{v} overflows f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_descriptors(bytes: &[u8], what: &str) -> Result<LocalDescriptorSet> {
    let mut r = Reader::new(bytes, what);
    r.magic(DESCRIPTOR_MAGIC)?;
    let count = r.u32()?;
    let dim = r.u32()?;
    if r.u32()? != 0 {
        return Err(r.fail("reserved field must be zero"));
    }
    let data = r.f32s(count.checked_mul(dim).ok_or_else(|| r.fail("size overflow"))?)?;
    r.finish()?;
    LocalDescriptorSet::new(count, dim, data).map_err(|e| r.fail(e.to_string()))
}

pub fn write_descriptors(path: &Path, set: &LocalDescriptorSet) -> Result<()> {
    fs::write(path, encode_descriptors(set)?)?;
    Ok(())
}

pub fn read_descriptors(path: &Path) -> Result<LocalDescriptorSet> {
    decode_descriptors(&read_file(path)?, &path.display().to_string())
}

/// A single global vector stored as a one-row descriptor file.
pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    write_descriptors(path, &LocalDescriptorSet::new(1, v.len(), v.to_vec())?)
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let set = read_descriptors(path)?;
    if set.count() != 1 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("vector file holds {} rows", set.count()),
        });
    }
    Ok(set.data().to_vec())
}

pub fn encode_gmm(gmm: &GmmModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(GMM_MAGIC);
    put_u32(&mut out, gmm.num_clusters())?;
    put_u32(&mut out, gmm.dim())?;
    put_f64s(&mut out, gmm.weights());
    put_f64s(&mut out, gmm.means());
    put_f64s(&mut out, gmm.stddevs());
    Ok(out)
}

pub fn decode_gmm(bytes: &[u8], what: &str) -> Result<GmmModel> {
    let mut r = Reader::new(bytes, what);
    r.magic(GMM_MAGIC)?;
    let c = r.u32()?;
    let d = r.u32()?;
    let cd = c.checked_mul(d).ok_or_else(|| r.fail("size overflow"))?;
    let weights = r.f64s(c)?;
    let means = r.f64s(cd)?;
    let stddevs = r.f64s(cd)?;
    r.finish()?;
    GmmModel::new(c, d, weights, means, stddevs).map_err(|e| r.fail(e.to_string()))
}

pub fn write_gmm(path: &Path, gmm: &GmmModel) -> Result<()> {
    fs::write(path, encode_gmm(gmm)?)?;
    Ok(())
}

pub fn read_gmm(path: &Path) -> Result<GmmModel> {
    decode_gmm(&read_file(path)?, &path.display().to_string())
}

pub fn encode_projection(model: &ProjectionModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PROJECTION_MAGIC);
    out.push(model.method().code());
    put_u32(&mut out, model.input_dim())?;
    put_u32(&mut out, model.output_dim())?;
    put_f64s(&mut out, model.mean());
    put_f64s(&mut out, model.basis());
    put_f64s(&mut out, model.whitening_scales());
    Ok(out)
}

pub fn decode_projection(bytes: &[u8], what: &str) -> Result<ProjectionModel> {
    let mut r = Reader::new(bytes, what);
    r.magic(PROJECTION_MAGIC)?;
    let code = r.u8()?;
    let method = ProjectionMethod::from_code(code).ok_or_else(|| r.fail(format!("unknown method byte {code}")))?;
    let d = r.u32()?;
    let m = r.u32()?;
    let mean = r.f64s(d)?;
    let basis = r.f64s(d.checked_mul(m).ok_or_else(|| r.fail("size overflow"))?)?;
    let scales = r.f64s(m)?;
    r.finish()?;
    ProjectionModel::new(method, mean, basis, scales).map_err(|e| r.fail(e.to_string()))
}

pub fn write_projection(path: &Path, model: &ProjectionModel) -> Result<()> {
    fs::write(path, encode_projection(model)?)?;
    Ok(())
}

pub fn read_projection(path: &Path) -> Result<ProjectionModel> {
    decode_projection(&read_file(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_layout() {
        let set = LocalDescriptorSet::new(2, 1, vec![1.0, -2.5]).unwrap();
        let bytes = encode_descriptors(&set).unwrap();
        assert_eq!(&bytes[..4], b"FVD1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &[0; 4]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
        assert_eq!(decode_descriptors(&bytes, "t").unwrap(), set);
    }

    #[test]
    fn descriptor_rejects_bad_headers() {
        let set = LocalDescriptorSet::new(1, 2, vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_descriptors(&set).unwrap();
        assert!(decode_descriptors(&bytes[..bytes.len() - 1], "t").is_err());
        bytes[12] = 1;
        assert!(decode_descriptors(&bytes, "t").is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_descriptors(&bytes, "t"), Err(Error::Format { .. })));
    }

    #[test]
    fn gmm_round_trip_is_exact() {
        let g = GmmModel::new(2, 2, vec![0.25, 0.75], vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 2.0, 0.5, 0.01]).unwrap();
        let bytes = encode_gmm(&g).unwrap();
        assert_eq!(bytes.len(), 12 + 8 * 10);
        assert_eq!(decode_gmm(&bytes, "g").unwrap(), g);
    }

    #[test]
    fn gmm_rejects_invalid_parameters() {
        let g = GmmModel::new(1, 1, vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let mut bytes = encode_gmm(&g).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&0.0f64.to_le_bytes());
        assert!(decode_gmm(&bytes, "g").is_err());
    }

    #[test]
    fn projection_round_trip_is_exact() {
        let p = ProjectionModel::new(ProjectionMethod::Lda, vec![0.5, 1.5], vec![0.6, 0.8], vec![3.0]).unwrap();
        let bytes = encode_projection(&p).unwrap();
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes.len(), 4 + 1 + 8 + 8 * 5);
        assert_eq!(decode_projection(&bytes, "p").unwrap(), p);
    }
}
