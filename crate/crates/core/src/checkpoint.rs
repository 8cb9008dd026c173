//! Checkpoint files: a text header describing the system and every tensor,
//! then the raw little-endian parameter values in visit order.
//!
//! ```text
//! SLID-CHECKPOINT 1
//! meta <json>
//! fingerprint <sha256 of the payload, hex>
//! tensor <name> <d0>x<d1>...
//! ...
//! end
//! <payload>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{AcousticConfig, AcousticModel};
use crate::classifier::{ClassifierConfig, LanguageClassifier};
use crate::corpus::Charset;
use crate::dataset::LabelSpace;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::scalar::Scalar;
use crate::stats::LinearClassifier;
use crate::system::{InferenceConfig, LanguageBackend, SongSystem};
use crate::training::TrainMode;

const MAGIC: &str = "SLID-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    scalar_bytes: usize,
    mode: TrainMode,
    acoustic: AcousticConfig,
    classifier: Option<ClassifierConfig>,
    linear: Option<LinearClassifier>,
    charset: Charset,
    labels: LabelSpace,
    inference: InferenceConfig,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
}

fn tensors<T: Scalar>(model: &dyn Parameterized<T>, prefix: &str, out: &mut Vec<Tensor>, payload: &mut Vec<u8>) {
    model.visit(prefix, &mut |name, dims, values| {
        out.push(Tensor {
            name: name.to_string(),
            dims: dims.to_vec(),
        });
        for v in values {
            if std::mem::size_of::<T>() == 4 {
                payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                payload.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    });
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a system. Identical systems give identical bytes.
pub fn encode<T: Scalar>(system: &SongSystem<T>) -> Vec<u8> {
    let (classifier, linear) = match &system.backend {
        LanguageBackend::Recurrent(c) => (Some(c.config.clone()), None),
        LanguageBackend::Linear(l) => (None, Some(l.clone())),
    };
    let meta = Meta {
        scalar_bytes: std::mem::size_of::<T>(),
        mode: system.mode,
        acoustic: system.acoustic.config.clone(),
        classifier,
        linear,
        charset: system.charset.clone(),
        labels: system.labels.clone(),
        inference: system.inference.clone(),
    };
    let mut list = Vec::new();
    let mut payload = Vec::new();
    tensors(&system.acoustic, "acoustic", &mut list, &mut payload);
    if let LanguageBackend::Recurrent(c) = &system.backend {
        tensors(c, "classifier", &mut list, &mut payload);
    }
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("meta {}\n", serde_json::to_string(&meta).expect("meta serializes")));
    out.push_str(&format!("fingerprint {}\n", hex(&Sha256::digest(&payload))));
    for t in &list {
        let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("tensor {} {}\n", t.name, dims.join("x")));
    }
    out.push_str("end\n");
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&payload);
    bytes
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))
}

/// Copy payload values into a freshly built model, checking every tensor
/// name and shape against the header.
fn fill<T: Scalar>(
    model: &mut dyn Parameterized<T>,
    prefix: &str,
    header: &mut std::slice::Iter<'_, Tensor>,
    payload: &[u8],
    offset: &mut usize,
    width: usize,
) -> Result<()> {
    let mut err = None;
    model.visit_mut(prefix, &mut |name, dims, values| {
        if err.is_some() {
            return;
        }
        match header.next() {
            Some(t) if t.name == name && t.dims == dims => {}
            Some(t) => {
                err = Some(Error::Format(format!(
                    "tensor {} {:?} does not match model tensor {name} {dims:?}",
                    t.name, t.dims
                )));
                return;
            }
            None => {
                err = Some(Error::Format(format!("checkpoint lacks tensor {name}")));
                return;
            }
        }
        let need = values.len() * width;
        if *offset + need > payload.len() {
            err = Some(Error::Format("checkpoint payload is truncated".into()));
            return;
        }
        for (k, v) in values.iter_mut().enumerate() {
            let at = *offset + k * width;
            let x = if width == 4 {
                f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes"))
            };
            *v = T::of(x);
        }
        *offset += need;
    });
    err.map_or(Ok(()), Err)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<SongSystem<T>> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic line)".into()));
    }
    let meta_line = take_line(bytes, &mut pos)?;
    let meta: Meta = serde_json::from_str(
        meta_line
            .strip_prefix("meta ")
            .ok_or_else(|| Error::Format("expected meta line".into()))?,
    )
    .map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;
    let fingerprint = take_line(bytes, &mut pos)?
        .strip_prefix("fingerprint ")
        .ok_or_else(|| Error::Format("expected fingerprint line".into()))?
        .to_string();
    let mut list = Vec::new();
    loop {
        let line = take_line(bytes, &mut pos)?;
        if line == "end" {
            break;
        }
        let mut parts = line.split(' ');
        let (Some("tensor"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Format(format!("bad tensor line {line:?}")));
        };
        let dims = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad dims in {line:?}"))))
            .collect::<Result<Vec<_>>>()?;
        list.push(Tensor {
            name: name.to_string(),
            dims,
        });
    }
    let payload = &bytes[pos..];
    if hex(&Sha256::digest(payload)) != fingerprint {
        return Err(Error::Format("checkpoint fingerprint mismatch (corrupted payload)".into()));
    }
    let width = meta.scalar_bytes;
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unsupported scalar width {width}")));
    }

    let mut header = list.iter();
    let mut offset = 0;
    let mut acoustic = AcousticModel::<T>::new(meta.acoustic.clone(), meta.charset.len(), 0)?;
    fill(&mut acoustic, "acoustic", &mut header, payload, &mut offset, width)?;
    let backend = match (meta.classifier, meta.linear) {
        (Some(cfg), None) => {
            let mut c = LanguageClassifier::<T>::new(cfg, meta.charset.len(), meta.labels.len(), 0)?;
            fill(&mut c, "classifier", &mut header, payload, &mut offset, width)?;
            LanguageBackend::Recurrent(c)
        }
        (None, Some(l)) => LanguageBackend::Linear(l),
        _ => return Err(Error::Format("checkpoint needs exactly one language back end".into())),
    };
    if header.next().is_some() || offset != payload.len() {
        return Err(Error::Format("checkpoint has trailing tensors or bytes".into()));
    }
    Ok(SongSystem {
        mode: meta.mode,
        acoustic,
        backend,
        charset: meta.charset,
        labels: meta.labels,
        inference: meta.inference,
    })
}

pub fn save<T: Scalar>(system: &SongSystem<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(system)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<SongSystem<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ScenarioConfig, ScenarioKind};

    fn system(seed: u64) -> SongSystem<f32> {
        let charset = Charset::from_phonemes(['a', 'b', 'c']);
        let labels =
            LabelSpace::resolve(&ScenarioConfig::default(), &["x".to_string(), "y".to_string()]).unwrap();
        let acfg = AcousticConfig {
            conv_filters: 2,
            lstm_hidden: 3,
            lstm_layers: 1,
            ..Default::default()
        };
        let ccfg = ClassifierConfig {
            lstm_hidden: 2,
            ..Default::default()
        };
        SongSystem {
            mode: TrainMode::Joint,
            acoustic: AcousticModel::new(acfg, charset.len(), seed).unwrap(),
            backend: LanguageBackend::Recurrent(LanguageClassifier::new(ccfg, charset.len(), 2, seed + 1).unwrap()),
            charset,
            labels,
            inference: InferenceConfig::default(),
        }
    }

    #[test]
    fn roundtrip_is_exact_and_stable() {
        let s = system(3);
        let bytes = encode(&s);
        let back: SongSystem<f32> = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
        assert_ne!(encode(&system(4)), bytes);
    }

    #[test]
    fn linear_backend_roundtrip() {
        let mut s = system(1);
        s.mode = TrainMode::Statistics;
        s.backend = LanguageBackend::Linear(LinearClassifier {
            weights: vec![vec![0.5; 4], vec![-0.25; 4]],
            bias: vec![0.1, -0.1],
            center: vec![0.0; 4],
            scale: vec![1.0; 4],
        });
        let back: SongSystem<f32> = decode(&encode(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.labels.kind, ScenarioKind::Closed);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode(&system(3));
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
        assert!(decode::<f32>(b"hello\n").is_err());
        let good = encode(&system(3));
        assert!(decode::<f32>(&good[..good.len() - 4]).is_err());
    }

    #[test]
    fn widths_convert() {
        let s = system(5);
        let wide: SongSystem<f64> = decode(&encode(&s)).unwrap();
        let narrow: SongSystem<f32> = decode(&encode(&wide)).unwrap();
        assert_eq!(narrow, s);
    }
}
