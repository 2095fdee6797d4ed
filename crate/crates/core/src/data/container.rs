//! Versioned binary container for series batches (and, via the shared
//! envelope, model checkpoints): a fixed magic, a JSON header describing
//! shapes and provenance, then raw little-endian payloads.

use super::{NormStats, SeriesBatch};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub(crate) const MAGIC: &[u8; 4] = b"SQDF";
pub(crate) const FORMAT_VERSION: u32 = 1;

/// Self-description carried by every artifact file.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ContainerMeta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesHeader {
    kind: String,
    batch: usize,
    len: usize,
    dim: usize,
    regular: bool,
    meta: ContainerMeta,
    stats: Option<NormStats>,
}

pub(crate) fn write_envelope<H: Serialize>(
    path: &Path,
    header: &H,
    mut write_payload: impl FnMut(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let io_err = |e| Error::io(path, e);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io_err)?;
    file.write_u64::<LittleEndian>(header_bytes.len() as u64).map_err(io_err)?;
    file.write_all(&header_bytes).map_err(io_err)?;
    write_payload(&mut file).map_err(io_err)?;
    Ok(())
}

pub(crate) fn read_envelope<H: DeserializeOwned>(
    path: &Path,
) -> Result<(H, std::io::BufReader<std::fs::File>)> {
    let mut file =
        std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = file.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let header_len = file.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("{}: header decode: {e}", path.display())))?;
    Ok((header, file))
}

pub(crate) fn write_f64s(w: &mut dyn Write, vals: &[f64]) -> std::io::Result<()> {
    for v in vals {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

/// Write a series batch (with optional normalisation stats) to a container.
pub fn write_series(
    path: &Path,
    batch: &SeriesBatch,
    stats: Option<&NormStats>,
    meta: &ContainerMeta,
) -> Result<()> {
    let header = SeriesHeader {
        kind: "series".into(),
        batch: batch.n_samples(),
        len: batch.len(),
        dim: batch.dim(),
        regular: batch.regular,
        meta: meta.clone(),
        stats: stats.cloned(),
    };
    let values: Vec<f64> = batch.values.iter().copied().collect();
    let times: Vec<f64> = batch.times.iter().copied().collect();
    let mask: Vec<u8> = batch.mask.iter().map(|&m| u8::from(m)).collect();
    write_envelope(path, &header, move |w| {
        write_f64s(w, &values)?;
        write_f64s(w, &times)?;
        w.write_all(&mask)
    })
}

/// Read a series container back, returning batch, stats, and provenance.
pub fn read_series(path: &Path) -> Result<(SeriesBatch, Option<NormStats>, ContainerMeta)> {
    let (header, mut file): (SeriesHeader, _) = read_envelope(path)?;
    if header.kind != "series" {
        return Err(Error::Format(format!(
            "{}: expected a series container, found kind '{}'",
            path.display(),
            header.kind
        )));
    }
    let (b, n, d) = (header.batch, header.len, header.dim);
    let values = read_f64s(&mut file, b * n * d).map_err(|e| Error::io(path, e))?;
    let times = read_f64s(&mut file, b * n).map_err(|e| Error::io(path, e))?;
    let mut mask_bytes = vec![0u8; b * n];
    file.read_exact(&mut mask_bytes).map_err(|e| Error::io(path, e))?;
    let batch = SeriesBatch {
        values: Array3::from_shape_vec((b, n, d), values)
            .map_err(|e| Error::Format(format!("values shape: {e}")))?,
        times: Array2::from_shape_vec((b, n), times)
            .map_err(|e| Error::Format(format!("times shape: {e}")))?,
        mask: Array2::from_shape_vec((b, n), mask_bytes.iter().map(|&v| v != 0).collect())
            .map_err(|e| Error::Format(format!("mask shape: {e}")))?,
        regular: header.regular,
    };
    Ok((batch, header.stats, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_sines;
    use crate::rng::substream;

    #[test]
    fn series_round_trip() {
        let mut rng = substream(1, "container");
        let batch = synth_sines(5, 3, 12, &mut rng);
        let stats = NormStats { min: vec![0.0; 3], max: vec![1.0; 3] };
        let meta = ContainerMeta { config_hash: "abc123".into(), seed: 42 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.sqdf");
        write_series(&path, &batch, Some(&stats), &meta).unwrap();
        let (back, stats2, meta2) = read_series(&path).unwrap();
        assert_eq!(back, batch);
        assert_eq!(stats2.unwrap(), stats);
        assert_eq!(meta2.seed, 42);
        assert_eq!(meta2.config_hash, "abc123");
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sqdf");
        std::fs::write(&path, b"not a container").unwrap();
        assert!(matches!(read_series(&path), Err(Error::Format(_))));
    }
}
