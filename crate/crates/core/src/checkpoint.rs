//! Model checkpoints: a JSON manifest followed by raw little-endian `f32`
//! tensor data.
//!
//! Layout:
//!
//! ```text
//! BRANCHTUNE-CHECKPOINT v1\n
//! <manifest byte length in decimal>\n
//! <manifest JSON>
//! <payload>
//! ```
//!
//! Manifest offsets are byte offsets into the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{BackboneSpec, Model};
use crate::scalar::Scalar;

const MAGIC: &str = "BRANCHTUNE-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub backbone: BackboneSpec,
    pub tensors: Vec<TensorEntry>,
}

fn collect<S: Scalar>(model: &Model<S>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    model
        .encoder_tensors()
        .into_iter()
        .chain(model.projector_tensors())
        .map(|(name, t)| (name, t.shape().to_vec(), t.data().iter().map(|v| v.as_f32()).collect()))
        .collect()
}

/// Serialised checkpoint. Values are stored as `f32` whatever the model's
/// scalar type. Models that still carry branches cannot be saved.
pub fn checkpoint_bytes<S: Scalar>(model: &Model<S>) -> Result<Vec<u8>> {
    if model.is_expanded() {
        return Err(contract_err!("compress the model before saving it"));
    }
    let tensors = collect(model);
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, shape, data)| {
            let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset };
            offset += data.len() * 4;
            e
        })
        .collect();
    let manifest = Manifest { backbone: model.spec.clone(), tensors: entries };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = format!("{MAGIC}\n{}\n{json}", json.len()).into_bytes();
    out.reserve(offset);
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))
}

/// Parses the header and manifest, returning the manifest and the payload.
pub fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let mut pos = 0;
    if read_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::Format("not a branchtune checkpoint".into()));
    }
    let len: usize = read_line(bytes, &mut pos)?
        .trim()
        .parse()
        .map_err(|_| Error::Format("bad manifest length".into()))?;
    let body = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format(format!("manifest of {len} bytes runs past the end of the file")))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Format(format!("corrupt manifest: {e}")))?;
    Ok((manifest, &bytes[pos + len..]))
}

/// Rebuilds a model from checkpoint bytes. Every model tensor must appear
/// exactly once with its expected shape.
pub fn model_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Model<S>> {
    let (manifest, payload) = parse_manifest(bytes)?;
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let end = e.offset.checked_add(numel * 4).filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("tensor {} lies outside the {}-byte payload", e.name, payload.len())));
        };
        spans.push((e.offset, end));
    }
    let mut sorted = spans.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Format("tensor data regions overlap".into()));
    }

    let mut model = Model::<S>::build(&manifest.backbone, 0).map_err(|e| Error::Format(format!("manifest backbone: {e}")))?;
    let mut slots = model.named_tensors_mut();
    if manifest.tensors.len() != slots.len() {
        return Err(shape_err!("checkpoint holds {} tensors, model expects {}", manifest.tensors.len(), slots.len()));
    }
    for (e, &(start, end)) in manifest.tensors.iter().zip(&spans) {
        let slot = slots.remove(&e.name).ok_or_else(|| shape_err!("unexpected or repeated tensor {}", e.name))?;
        if slot.shape() != e.shape.as_slice() {
            return Err(shape_err!("tensor {} has shape {:?}, model expects {:?}", e.name, e.shape, slot.shape()));
        }
        for (dst, chunk) in slot.data_mut().iter_mut().zip(payload[start..end].chunks_exact(4)) {
            *dst = S::lit(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64);
        }
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::{compress, expand, BranchShape};
    use crate::nn::FreezeStrategy;

    fn trained_like() -> Model<f32> {
        let mut m = Model::<f32>::build(&BackboneSpec { input_size: 16, ..BackboneSpec::toy() }, 3).unwrap();
        let mut k = 0.0f32;
        for (_, t) in m.named_tensors_mut() {
            for v in t.data_mut() {
                k += 0.37;
                *v += k.sin() * 0.01;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = trained_like();
        let bytes = checkpoint_bytes(&m).unwrap();
        let back: Model<f32> = model_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        let mut a = m.clone();
        let mut b = back;
        for ((na, ta), (nb, tb)) in a.named_tensors_mut().into_iter().zip(b.named_tensors_mut()) {
            assert_eq!(na, nb);
            assert!(ta.bitwise_eq(tb), "{na}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = trained_like();
        save_checkpoint(&m, &path).unwrap();
        let back: Model<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), checkpoint_bytes(&m).unwrap());
    }

    #[test]
    fn untrained_expansion_compresses_to_identical_bytes() {
        let mut m = trained_like();
        m.set_strategy(FreezeStrategy::FineTuneAll);
        for shape in BranchShape::ALL {
            let e = expand(&m, shape).unwrap();
            assert!(matches!(checkpoint_bytes(&e), Err(Error::Contract(_))));
            assert_eq!(checkpoint_bytes(&compress(&e).unwrap()).unwrap(), checkpoint_bytes(&m).unwrap());
        }
    }

    fn edit_manifest(bytes: &[u8], f: impl FnOnce(&mut Manifest)) -> Vec<u8> {
        let (mut man, payload) = parse_manifest(bytes).unwrap();
        f(&mut man);
        let json = serde_json::to_string_pretty(&man).unwrap();
        let mut out = format!("{MAGIC}\n{}\n{json}", json.len()).into_bytes();
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = checkpoint_bytes(&trained_like()).unwrap();
        let flipped = edit_manifest(&bytes, |m| m.tensors[0].shape.reverse());
        assert!(matches!(model_from_bytes::<f32>(&flipped), Err(Error::Shape(_))));
        let oob = edit_manifest(&bytes, |m| m.tensors[3].offset = usize::MAX / 2);
        assert!(matches!(model_from_bytes::<f32>(&oob), Err(Error::Format(_))));
        let overlap = edit_manifest(&bytes, |m| m.tensors[1].offset = 4);
        assert!(matches!(model_from_bytes::<f32>(&overlap), Err(Error::Format(_))));
        let mut garbled = bytes.clone();
        garbled[40] = b'{';
        assert!(matches!(model_from_bytes::<f32>(&garbled), Err(Error::Format(_))));
        assert!(matches!(model_from_bytes::<f32>(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        assert!(matches!(model_from_bytes::<f32>(b"hello\n"), Err(Error::Format(_))));
    }
}
