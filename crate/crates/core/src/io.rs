//! On-disk formats: the named-array binary container used for checkpoints
//! and dataset tensors, the plain-text dataset index, and the pseudo-label
//! text format.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic   b"PC2M"
//! version u32 (currently 1)
//! count   u32
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8 (0 = f64)
//!   ndim     u32
//!   dims     u32 × ndim
//!   payload  f64 × prod(dims), little-endian
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::spectral::PseudoLabelSet;
use crate::synth::LabeledImage;

const MAGIC: &[u8; 4] = b"PC2M";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// One named f64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            shape: vec![1],
            data: vec![value],
        }
    }
}

pub fn write_named_arrays(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for &d in &a.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &a.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_named_arrays(path: &Path) -> Result<Vec<NamedArray>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?} (expected {MAGIC:?})"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("bad name: {e}")))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype {}", dtype[0])));
        }
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut buf = [0u8; 8];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.push(NamedArray { name, shape, data });
    }
    Ok(arrays)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Finds one array by name.
pub fn find_array<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Format(format!("array '{name}' missing from container")))
}

/// Writes `images.bin`, `masks.bin`, and `index.txt` under `dir`.
pub fn save_dataset(dir: &Path, dataset: &[LabeledImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let t = dataset.len();
    let n = dataset.first().map_or(0, |d| d.image.side());
    let mut images = Vec::with_capacity(t * n * n * 3);
    let mut masks = Vec::with_capacity(t * n * n);
    for d in dataset {
        images.extend(d.image.pixels.iter().cloned());
        masks.extend(d.mask.iter().map(|&c| c as f64));
    }
    write_named_arrays(
        &dir.join("images.bin"),
        &[NamedArray::new("images", vec![t, n, n, 3], images)?],
    )?;
    write_named_arrays(
        &dir.join("masks.bin"),
        &[NamedArray::new("masks", vec![t, n, n], masks)?],
    )?;
    let mut index = String::new();
    for (i, d) in dataset.iter().enumerate() {
        index.push_str(&i.to_string());
        for &c in &d.labels {
            index.push(' ');
            index.push_str(&c.to_string());
        }
        index.push('\n');
    }
    std::fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let images = read_named_arrays(&dir.join("images.bin"))?;
    let images = find_array(&images, "images")?;
    let masks = read_named_arrays(&dir.join("masks.bin"))?;
    let masks = find_array(&masks, "masks")?;
    if images.shape.len() != 4 || images.shape[3] != 3 {
        return Err(Error::Format(format!(
            "images array must be (T,n,n,3), got {:?}",
            images.shape
        )));
    }
    let (t, n) = (images.shape[0], images.shape[1]);
    if masks.shape != vec![t, n, n] {
        return Err(Error::Format(format!(
            "masks shape {:?} does not match images {:?}",
            masks.shape, images.shape
        )));
    }
    let index = std::fs::read_to_string(dir.join("index.txt"))?;
    let mut labels_by_line = Vec::with_capacity(t);
    for (lineno, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let _id: usize = parts
            .next()
            .ok_or_else(|| Error::Format(format!("index line {lineno} empty")))?
            .parse()
            .map_err(|e| Error::Format(format!("index line {lineno}: {e}")))?;
        let labels: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|e| Error::Format(format!("index line {lineno}: {e}")))
            })
            .collect::<Result<_>>()?;
        labels_by_line.push(labels);
    }
    if labels_by_line.len() != t {
        return Err(Error::Format(format!(
            "index has {} entries for {t} images",
            labels_by_line.len()
        )));
    }
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let pixels =
            Array3::from_shape_fn((n, n, 3), |(y, x, c)| images.data[((i * n + y) * n + x) * 3 + c]);
        let mask = Array2::from_shape_fn((n, n), |(y, x)| masks.data[(i * n + y) * n + x] as u8);
        out.push(LabeledImage {
            image: ImageTensor::new(pixels, i)?,
            mask,
            labels: labels_by_line[i].clone(),
        });
    }
    Ok(out)
}

/// Pseudo-label text format: one line per image, `<image_id> <id> <id> ...`
/// with cluster ids in 1..=k.
pub fn write_pseudo_labels(path: &Path, sets: &[PseudoLabelSet]) -> Result<()> {
    let mut out = String::new();
    for (i, s) in sets.iter().enumerate() {
        out.push_str(&i.to_string());
        for &l in &s.labels {
            out.push(' ');
            out.push_str(&l.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelSet>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id: usize = parts
            .next()
            .ok_or_else(|| Error::Format(format!("pseudo-label line {lineno} empty")))?
            .parse()
            .map_err(|e| Error::Format(format!("pseudo-label line {lineno}: {e}")))?;
        if id != out.len() {
            return Err(Error::Format(format!(
                "pseudo-label ids must be consecutive, got {id} at line {lineno}"
            )));
        }
        let labels: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|e| Error::Format(format!("pseudo-label line {lineno}: {e}")))
            })
            .collect::<Result<_>>()?;
        if labels.is_empty() {
            return Err(Error::Format(format!(
                "pseudo-label line {lineno} has no labels"
            )));
        }
        out.push(PseudoLabelSet { labels });
    }
    Ok(out)
}

/// Minimal CSV writer for the run logs (numeric and plain-word cells only).
pub struct CsvWriter {
    w: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", header.join(","))?;
        Ok(Self { w })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.w, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, DatasetSpec};
    use tempfile::tempdir;

    #[test]
    fn named_arrays_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("arrays.bin");
        let arrays = vec![
            NamedArray::new("a", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            NamedArray::scalar("epoch", 7.0),
        ];
        write_named_arrays(&path, &arrays).unwrap();
        let back = read_named_arrays(&path).unwrap();
        assert_eq!(back, arrays);
        assert_eq!(find_array(&back, "epoch").unwrap().data, vec![7.0]);
        assert!(find_array(&back, "missing").is_err());
    }

    #[test]
    fn header_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_named_arrays(&path, &[NamedArray::scalar("s", 1.5)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PC2M");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // name_len=1, "s", dtype=0, ndim=1, dim=1, payload 1.5f64.
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b's');
        assert_eq!(bytes[17], 0);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 1);
        assert_eq!(
            f64::from_le_bytes(bytes[26..34].try_into().unwrap()),
            1.5
        );
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_named_arrays(&path).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempdir().unwrap();
        let data = gen_dataset(&DatasetSpec::desk(3, 6)).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.image.pixels, b.image.pixels);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn pseudo_labels_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pseudo.txt");
        let sets = vec![
            PseudoLabelSet { labels: vec![1, 3] },
            PseudoLabelSet { labels: vec![2] },
        ];
        write_pseudo_labels(&path, &sets).unwrap();
        let back = read_pseudo_labels(&path).unwrap();
        assert_eq!(back, sets);
    }
}
