//! Parameter checkpointing: text header per array (name, trainable flag,
//! shape) followed by a little-endian f64 payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::graph::NnError;
use super::layers::{ParamArray, ParamStore};

const MAGIC: &str = "DEREX-CKPT 1";

pub fn save(store: &ParamStore, path: &Path) -> Result<(), NnError> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| NnError::BadCheckpoint(format!("create {path:?}: {e}")))?;
    let count = store.iter().count();
    write!(f, "{MAGIC}\nseed {}\narrays {}\n", store.seed, count)
        .map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
    for (name, arr) in store.iter() {
        let dims: Vec<String> = arr.shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{name} {} {} {}\n", if arr.trainable { 1 } else { 0 }, arr.shape.len(), dims.join(" "))
            .map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
        let mut bytes = Vec::with_capacity(arr.data.len() * 8);
        for v in &arr.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, NnError> {
    let f = std::fs::File::open(path)
        .map_err(|e| NnError::BadCheckpoint(format!("open {path:?}: {e}")))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<(), NnError> {
        line.clear();
        r.read_line(line).map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(())
    };
    read_line(&mut r, &mut line)?;
    if line != MAGIC {
        return Err(NnError::BadCheckpoint(format!("bad magic {line:?}")));
    }
    read_line(&mut r, &mut line)?;
    let seed: u64 = line
        .strip_prefix("seed ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| NnError::BadCheckpoint("bad seed line".into()))?;
    read_line(&mut r, &mut line)?;
    let count: usize = line
        .strip_prefix("arrays ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| NnError::BadCheckpoint("bad arrays line".into()))?;
    let mut store = ParamStore::new(seed);
    for _ in 0..count {
        read_line(&mut r, &mut line)?;
        let mut it = line.split_whitespace();
        let name = it.next().ok_or_else(|| NnError::BadCheckpoint("missing name".into()))?.to_string();
        let trainable = it.next() == Some("1");
        let ndim: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| NnError::BadCheckpoint("bad ndim".into()))?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                it.next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| NnError::BadCheckpoint("bad dim".into()))?,
            );
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes).map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store.insert(&name, shape, data, trainable);
    }
    Ok(store)
}

#[allow(dead_code)]
fn _types(_: &ParamArray) {}
