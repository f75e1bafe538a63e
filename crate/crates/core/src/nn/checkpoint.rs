//! Model checkpoints: spec plus named f64 tensors, little-endian ("DKNN").

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Arch, ConvLayerSpec, ModelSpec, NnError, ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"DKNN";
const VERSION: u32 = 1;

const ARCH_DENSE: u32 = 1;
const ARCH_LSTM: u32 = 2;
const ARCH_CONV: u32 = 3;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_spec(spec: &ModelSpec, buf: &mut Vec<u8>) {
    match &spec.arch {
        Arch::Dense {
            input_width,
            hidden,
        } => {
            put_u32(buf, ARCH_DENSE as usize);
            put_u32(buf, *input_width);
            put_u32(buf, hidden.len());
            for &h in hidden {
                put_u32(buf, h);
            }
        }
        Arch::Lstm {
            input_width,
            steps,
            layers,
            cells,
        } => {
            put_u32(buf, ARCH_LSTM as usize);
            for v in [*input_width, *steps, *layers, *cells] {
                put_u32(buf, v);
            }
        }
        Arch::Conv {
            input_shape,
            in_channels,
            conv,
            dense,
        } => {
            put_u32(buf, ARCH_CONV as usize);
            for v in [input_shape.0, input_shape.1, *in_channels] {
                put_u32(buf, v);
            }
            put_u32(buf, conv.len());
            for c in conv {
                for v in [c.out_channels, c.kernel.0, c.kernel.1, c.pool.0, c.pool.1] {
                    put_u32(buf, v);
                }
            }
            put_u32(buf, dense.len());
            for &d in dense {
                put_u32(buf, d);
            }
        }
    }
    put_u32(buf, spec.n_outputs);
    buf.extend_from_slice(&spec.dropout.to_le_bytes());
}

/// Atomically write spec and parameters.
pub fn save_checkpoint(spec: &ModelSpec, params: &ParamSet, path: &Path) -> Result<(), NnError> {
    let display = path.display().to_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    encode_spec(spec, &mut buf);
    put_u32(&mut buf, params.n_tensors());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.dims().len());
        for &d in t.dims() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io = |source| NnError::Io {
        path: display.clone(),
        source,
    };
    let tmp = path.with_extension("dknn.tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Truncated(self.path.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<usize, NnError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn decode_spec(r: &mut Reader<'_>) -> Result<ModelSpec, NnError> {
    let arch = match r.u32()? as u32 {
        ARCH_DENSE => {
            let input_width = r.u32()?;
            let n = r.u32()?;
            let hidden = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
            Arch::Dense {
                input_width,
                hidden,
            }
        }
        ARCH_LSTM => Arch::Lstm {
            input_width: r.u32()?,
            steps: r.u32()?,
            layers: r.u32()?,
            cells: r.u32()?,
        },
        ARCH_CONV => {
            let input_shape = (r.u32()?, r.u32()?);
            let in_channels = r.u32()?;
            let n_conv = r.u32()?;
            let mut conv = Vec::with_capacity(n_conv);
            for _ in 0..n_conv {
                conv.push(ConvLayerSpec {
                    out_channels: r.u32()?,
                    kernel: (r.u32()?, r.u32()?),
                    pool: (r.u32()?, r.u32()?),
                });
            }
            let n_dense = r.u32()?;
            let dense = (0..n_dense).map(|_| r.u32()).collect::<Result<_, _>>()?;
            Arch::Conv {
                input_shape,
                in_channels,
                conv,
                dense,
            }
        }
        other => {
            return Err(NnError::BadSpec(format!(
                "unknown architecture tag {other} in checkpoint"
            )))
        }
    };
    let n_outputs = r.u32()?;
    let dropout = r.f64()?;
    Ok(ModelSpec {
        arch,
        n_outputs,
        dropout,
    })
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamSet), NnError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: display.clone(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &display,
    };
    if r.take(4)? != MAGIC {
        return Err(NnError::BadMagic(display));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(NnError::BadVersion {
            path: display,
            version,
        });
    }
    let spec = decode_spec(&mut r)?;
    let n_tensors = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..n_tensors {
        let name_len = r.u16()?;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let ndims = r.u32()?;
        let dims: Vec<usize> = (0..ndims).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        params.push(name, Tensor::from_vec(&dims, data));
    }
    spec.validate()?;
    Ok((spec, params))
}
