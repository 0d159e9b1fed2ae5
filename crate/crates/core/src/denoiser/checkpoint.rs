//! Flat binary weight files.
//!
//! Layout: magic `FNCE`, version `u32`, then tensors until end of file,
//! each as name length `u32`, UTF-8 name, rank `u32`, dims `u64` each,
//! and `f64` values. All integers and floats are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::neural::{NetConfig, NeuralDenoiser, Param};
use crate::data::Normalization;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FNCE";
pub const VERSION: u32 = 1;

const CONFIG_TENSOR: &str = "config";
const NORMALIZATION_TENSOR: &str = "normalization";

fn parse_err(reason: impl Into<String>) -> Error {
    Error::Parse {
        location: "checkpoint".into(),
        reason: reason.into(),
    }
}

pub fn write_tensors(mut w: impl Write, tensors: &[Param]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for t in tensors {
        let expect: usize = t.shape.iter().product();
        if expect != t.value.len() {
            return Err(crate::error::invalid(format!("tensor `{}` size does not match its shape", t.name)));
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &dim in &t.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in &t.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => parse_err(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_tensors(mut r: impl Read) -> Result<Vec<Param>> {
    let magic: [u8; 4] = read_exact_or(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(parse_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(read_exact_or(&mut r, "version")?);
    if version != VERSION {
        return Err(parse_err(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            break;
        }
        let rest: [u8; 3] = read_exact_or(&mut r, "name length")?;
        let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        if name_len > 4096 {
            return Err(parse_err("implausible tensor name length"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| parse_err("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| parse_err("tensor name is not UTF-8"))?;
        let rank = u32::from_le_bytes(read_exact_or(&mut r, "rank")?) as usize;
        if rank > 8 {
            return Err(parse_err(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact_or(&mut r, "dimension")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut value = Vec::with_capacity(n);
        for _ in 0..n {
            value.push(f64::from_le_bytes(read_exact_or(&mut r, "tensor data")?));
        }
        out.push(Param { name, shape, value });
    }
    Ok(out)
}

/// Stores network weights with their configuration and the data
/// normalization they were trained under.
pub fn save_model(path: &Path, net: &NeuralDenoiser, norm: &Normalization) -> Result<()> {
    let c = net.config();
    let mut tensors = vec![
        Param {
            name: CONFIG_TENSOR.into(),
            shape: vec![6],
            value: [c.d_model, c.n_heads, c.n_layers, c.n_nodes, c.n_steps, c.step_embedding_dim]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        },
        Param {
            name: NORMALIZATION_TENSOR.into(),
            shape: vec![2],
            value: vec![norm.mean, norm.std],
        },
    ];
    tensors.extend(net.params().iter().cloned());
    write_tensors(BufWriter::new(File::create(path)?), &tensors)
}

pub fn load_model(path: &Path) -> Result<(NeuralDenoiser, Normalization)> {
    let mut tensors = read_tensors(BufReader::new(File::open(path)?))?;
    if tensors.len() < 2 || tensors[0].name != CONFIG_TENSOR || tensors[1].name != NORMALIZATION_TENSOR {
        return Err(Error::State("checkpoint lacks config or normalization header".into()));
    }
    let params = tensors.split_off(2);
    let c = &tensors[0].value;
    if c.len() != 6 || c.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(Error::State("malformed config tensor".into()));
    }
    let config = NetConfig {
        d_model: c[0] as usize,
        n_heads: c[1] as usize,
        n_layers: c[2] as usize,
        n_nodes: c[3] as usize,
        n_steps: c[4] as usize,
        step_embedding_dim: c[5] as usize,
    };
    let nv = &tensors[1].value;
    if nv.len() != 2 {
        return Err(Error::State("malformed normalization tensor".into()));
    }
    let norm = Normalization::new(nv[0], nv[1])?;
    Ok((NeuralDenoiser::from_params(config, params)?, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip() {
        let t = vec![
            Param {
                name: "a".into(),
                shape: vec![2, 3],
                value: vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, 1e300],
            },
            Param {
                name: "scalar".into(),
                shape: vec![],
                value: vec![7.0],
            },
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"FNCE");
        assert_eq!(read_tensors(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        assert!(read_tensors(&b"NOPE\x01\0\0\0"[..]).is_err());
        let t = vec![Param {
            name: "a".into(),
            shape: vec![2],
            value: vec![1.0, 2.0],
        }];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(&buf[..]), Err(Error::Parse { .. })));
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let net = NeuralDenoiser::new(NetConfig::desk(3, 4), 9).unwrap();
        let norm = Normalization::new(207.0, 156.0).unwrap();
        save_model(&path, &net, &norm).unwrap();
        let (back, n2) = load_model(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(n2, norm);
    }
}
