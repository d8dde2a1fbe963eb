use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::autodiff::GradTensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GLNTCKPT";
const VERSION: u32 = 1;

/// Optimizer state carried alongside parameters, aligned with their order.
pub struct OptBlob {
    pub step: u64,
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Raw checkpoint contents; model reconstruction happens in the config layer.
pub struct CheckpointData {
    pub config_echo: String,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub opt: Option<OptBlob>,
}

fn put_u64(out: &mut impl Write, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(out: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serialize named parameter blobs (shape + 64-bit little-endian values),
/// a config echo, and optional optimizer state. Written atomically.
pub fn save_checkpoint(
    params: &[(String, GradTensor)],
    config_echo: &str,
    opt: Option<&OptBlob>,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let echo = config_echo.as_bytes();
        put_u64(&mut out, echo.len() as u64)?;
        out.write_all(echo)?;
        put_u64(&mut out, params.len() as u64)?;
        for (name, tensor) in params {
            let nb = name.as_bytes();
            put_u64(&mut out, nb.len() as u64)?;
            out.write_all(nb)?;
            put_u64(&mut out, tensor.shape().len() as u64)?;
            for &d in tensor.shape() {
                put_u64(&mut out, d as u64)?;
            }
            tensor.with_values(|vs| put_f64s(&mut out, vs))?;
        }
        match opt {
            None => out.write_all(&[0u8])?,
            Some(blob) => {
                if blob.moments.len() != params.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state has {} entries for {} params",
                        blob.moments.len(),
                        params.len()
                    )));
                }
                out.write_all(&[1u8])?;
                put_u64(&mut out, blob.step)?;
                for (m, v) in &blob.moments {
                    put_f64s(&mut out, m)?;
                    put_f64s(&mut out, v)?;
                }
            }
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated (wanted {} bytes at offset {}, file has {})",
                self.path,
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let buf = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {} (expected {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let echo_len = r.u64()? as usize;
    let config_echo = String::from_utf8(r.take(echo_len)?.to_vec())
        .map_err(|e| Error::Checkpoint(format!("{}: config echo: {e}", path.display())))?;
    let n_params = r.u64()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("{}: param name: {e}", path.display())))?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.f64s(numel)?;
        params.push((name, shape, values));
    }
    let flag = r.take(1)?[0];
    let opt = if flag == 1 {
        let step = r.u64()?;
        let mut moments = Vec::with_capacity(params.len());
        for (_, shape, _) in &params {
            let numel: usize = shape.iter().product();
            let m = r.f64s(numel)?;
            let v = r.f64s(numel)?;
            moments.push((m, v));
        }
        Some(OptBlob { step, moments })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes after checkpoint payload",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(CheckpointData {
        config_echo,
        params,
        opt,
    })
}
