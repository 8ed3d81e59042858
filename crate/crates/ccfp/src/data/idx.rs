//! IDX (big-endian) digit-dataset ingestion: image magic 2051, label magic
//! 2049, pixels rescaled to [0,1].

use super::BaseSet;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn read_u32_be<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated IDX file while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_images<R: Read>(r: &mut R) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let magic = read_u32_be(r, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = read_u32_be(r, "image count")? as usize;
    let rows = read_u32_be(r, "row count")? as usize;
    let cols = read_u32_be(r, "column count")? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated IDX payload: expected {} pixels", bytes.len())))?;
    let images = bytes
        .chunks(rows * cols)
        .map(|img| img.iter().map(|&b| b as f32 / 255.0).collect())
        .collect();
    Ok((images, rows, cols))
}

fn read_labels<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let magic = read_u32_be(r, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = read_u32_be(r, "label count")? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated IDX payload: expected {n} labels")))?;
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

/// Load an images/labels IDX pair into a base set.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<BaseSet> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let (images, rows, cols) = read_images(&mut ir)?;
    let mut lr = BufReader::new(File::open(labels_path)?);
    let labels = read_labels(&mut lr)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!(
            "image/label count mismatch: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(BaseSet {
        images,
        labels,
        height: rows,
        width: cols,
        class_count,
        seed: 0,
        kind: "idx".to_string(),
    })
}
