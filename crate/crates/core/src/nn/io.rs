//! Parameter files: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then every parameter as a little-endian `f64` (per net, per
//! layer: weights row-major, then bias).

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::dense::{Activation, Dense, DenseNet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PARAM_MAGIC: &[u8; 8] = b"TBTTPRM1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetHeader {
    pub name: String,
    pub layers: Vec<LayerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub version: u32,
    pub seed: u64,
    pub nets: Vec<NetHeader>,
    /// Free-form metadata owned by the model that wrote the file.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_params<S: Scalar, W: Write>(
    mut out: W,
    seed: u64,
    nets: &[(&str, &DenseNet<S>)],
    meta: serde_json::Value,
) -> Result<()> {
    let header = ParamHeader {
        version: FORMAT_VERSION,
        seed,
        nets: nets
            .iter()
            .map(|(name, net)| NetHeader {
                name: name.to_string(),
                layers: net
                    .layers()
                    .iter()
                    .map(|l| LayerHeader {
                        input_dim: l.input_dim(),
                        output_dim: l.output_dim(),
                        activation: l.activation,
                    })
                    .collect(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(PARAM_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, net) in nets {
        for layer in net.layers() {
            for &v in layer.weights.iter().chain(layer.bias.iter()) {
                out.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Networks of a parameter file, keyed by name in file order.
pub type NamedNets<S> = Vec<(String, DenseNet<S>)>;

pub fn read_params<S: Scalar, R: Read>(mut input: R) -> Result<(ParamHeader, NamedNets<S>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::invalid("not a parameter file (bad magic)"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: ParamHeader = serde_json::from_slice(&json)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported parameter file version {}",
            header.version
        )));
    }
    let mut next = || -> Result<S> {
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        Ok(S::lit(f64::from_le_bytes(buf)))
    };
    let mut nets = Vec::with_capacity(header.nets.len());
    for net in &header.nets {
        let mut layers = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            let mut w = Vec::with_capacity(l.input_dim * l.output_dim);
            for _ in 0..l.input_dim * l.output_dim {
                w.push(next()?);
            }
            let mut b = Vec::with_capacity(l.output_dim);
            for _ in 0..l.output_dim {
                b.push(next()?);
            }
            layers.push(Dense {
                weights: Array2::from_shape_vec((l.input_dim, l.output_dim), w)
                    .expect("length matches header"),
                bias: Array1::from(b),
                activation: l.activation,
            });
        }
        nets.push((net.name.clone(), DenseNet::from_layers(layers)?));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::invalid("trailing bytes after parameters"));
    }
    Ok((header, nets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = DenseNet::<f64>::glorot(&[4, 3, 2], &[Activation::Relu, Activation::Identity], 3)
            .unwrap();
        let b = DenseNet::<f64>::glorot(&[2, 1], &[Activation::Softplus], 4).unwrap();
        let mut buf = Vec::new();
        write_params(
            &mut buf,
            11,
            &[("a", &a), ("b", &b)],
            serde_json::json!({"gamma": 2.0}),
        )
        .unwrap();
        assert_eq!(&buf[..8], PARAM_MAGIC);
        let (header, nets) = read_params::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(header.seed, 11);
        assert_eq!(header.meta["gamma"], 2.0);
        assert_eq!(nets[0], ("a".to_string(), a));
        assert_eq!(nets[1], ("b".to_string(), b));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let a = DenseNet::<f64>::glorot(&[2, 2], &[Activation::Identity], 0).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, 0, &[("a", &a)], serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_params::<f64, _>(buf.as_slice()).is_err());
        assert!(read_params::<f64, _>(&b"garbage!"[..]).is_err());
    }
}
