//! Flat binary dataset container.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then per sample
//! every modality's values as f64 LE followed by the label as i64 LE
//! (-1 for an unlabeled sample).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MultimodalSample;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FEPADS01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub seed: u64,
    pub num_samples: usize,
    /// Per-modality sample shape.
    pub shapes: Vec<Vec<usize>>,
    pub dtype: String,
    pub label_dtype: String,
}

pub fn save_dataset(path: &Path, samples: &[MultimodalSample], seed: u64) -> Result<()> {
    let shapes: Vec<Vec<usize>> = samples
        .first()
        .map(|s| s.inputs.iter().map(|t| t.shape().to_vec()).collect())
        .unwrap_or_default();
    for (i, s) in samples.iter().enumerate() {
        let ok = s.inputs.len() == shapes.len()
            && s.inputs.iter().zip(&shapes).all(|(t, sh)| t.shape() == sh.as_slice());
        if !ok {
            return Err(Error::Data(format!("sample {i} does not match sample 0's shapes")));
        }
    }
    let header = DatasetHeader {
        seed,
        num_samples: samples.len(),
        shapes,
        dtype: "f64le".into(),
        label_dtype: "i64le".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for s in samples {
        for t in &s.inputs {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        let label = s.label.map_or(-1i64, |l| l as i64);
        out.write_all(&label.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_8(r: &mut impl Read) -> Result<[u8; 8]> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<MultimodalSample>)> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_8(&mut r)? != MAGIC {
        return Err(Error::Data(format!("{}: not a dataset file", path.display())));
    }
    let len = u64::from_le_bytes(read_8(&mut r)?) as usize;
    if len > 1 << 20 {
        return Err(Error::Data(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: DatasetHeader = serde_json::from_slice(&json)?;
    if header.dtype != "f64le" || header.label_dtype != "i64le" {
        return Err(Error::Data(format!(
            "unsupported dtypes {}/{}",
            header.dtype, header.label_dtype
        )));
    }
    let mut samples = Vec::with_capacity(header.num_samples);
    for _ in 0..header.num_samples {
        let inputs = header
            .shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| Ok(f64::from_le_bytes(read_8(&mut r)?)))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        let label = i64::from_le_bytes(read_8(&mut r)?);
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Data(format!("invalid label {l}"))),
        };
        samples.push(MultimodalSample { inputs, label });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Data("trailing bytes after last sample".into()));
    }
    Ok((header, samples))
}
