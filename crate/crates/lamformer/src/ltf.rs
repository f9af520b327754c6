//! LTF1 tensor files: magic `LTF1`, u8 rank, rank × u32 LE dims, f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use lamformer_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTF1";

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Corrupt(format!("rank {} does not fit in u8", t.rank())))?;
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Corrupt(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    let bytes = encode(t)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    w.write_all(&bytes)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated LTF1 {what}")),
        _ => Error::Corrupt(format!("reading LTF1 {what}: {e}")),
    })
}

/// Read one tensor; truncation and bad magic are [`Error::Corrupt`].
pub fn read(r: &mut impl Read) -> Result<Tensor> {
    let mut head = [0u8; 5];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Corrupt(format!("bad magic {:?}", &head[..4])));
    }
    let rank = head[4] as usize;
    let mut dims = vec![0u8; 4 * rank];
    read_exact(r, &mut dims, "shape")?;
    let shape: Vec<usize> = dims
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Corrupt(format!("zero dimension in shape {shape:?}")));
    }
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Corrupt(format!("shape {shape:?} overflows")))?;
    let mut payload = vec![0u8; 4 * len];
    read_exact(r, &mut payload, "payload")?;
    let data = payload
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        e => e,
    })
}
