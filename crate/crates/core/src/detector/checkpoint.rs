//! Checkpoint container: a little-endian u64 header length, a JSON header
//! naming each component's tensors (logical shape plus byte offset), then
//! the concatenated little-endian f32 payloads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ClassifierKind, ConvBlock, DetectorParams, LinearLayer};
use crate::error::{CoreError, Result};
use crate::synthgen::ClassId;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    classifier_kind: ClassifierKind,
    embedding_dim: usize,
    image_size: usize,
    class_ids: Vec<ClassId>,
    num_base: usize,
    extended: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    meta: CheckpointMeta,
    components: BTreeMap<String, Vec<TensorEntry>>,
}

struct PayloadWriter {
    entries: BTreeMap<String, Vec<TensorEntry>>,
    payload: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            payload: Vec::new(),
        }
    }

    fn push(&mut self, component: &str, name: &str, shape: Vec<usize>, data: &[f64]) {
        let offset = self.payload.len();
        for &v in data {
            self.payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.entries
            .entry(component.to_string())
            .or_default()
            .push(TensorEntry {
                name: name.to_string(),
                shape,
                offset,
            });
    }
}

fn conv_logical_shape(block: &ConvBlock) -> Vec<usize> {
    vec![block.out_ch, block.in_ch, block.kernel, block.kernel]
}

pub fn save_checkpoint(params: &DetectorParams, path: &Path) -> Result<()> {
    let mut w = PayloadWriter::new();
    for (i, block) in params.backbone.iter().enumerate() {
        let prefix = format!("block{}", i + 1);
        w.push(
            "backbone",
            &format!("{prefix}.weight"),
            conv_logical_shape(block),
            block.weight.as_slice().expect("contiguous"),
        );
        w.push(
            "backbone",
            &format!("{prefix}.bias"),
            vec![block.bias.len()],
            block.bias.as_slice().expect("contiguous"),
        );
    }
    w.push(
        "proposal",
        "head.weight",
        conv_logical_shape(&params.proposal),
        params.proposal.weight.as_slice().expect("contiguous"),
    );
    w.push(
        "proposal",
        "head.bias",
        vec![params.proposal.bias.len()],
        params.proposal.bias.as_slice().expect("contiguous"),
    );
    for (i, layer) in params.roi_head.iter().enumerate() {
        let prefix = format!("fc{}", i + 1);
        w.push(
            "roi_head",
            &format!("{prefix}.weight"),
            layer.weight.shape().to_vec(),
            layer.weight.as_slice().expect("contiguous"),
        );
        w.push(
            "roi_head",
            &format!("{prefix}.bias"),
            vec![layer.bias.len()],
            layer.bias.as_slice().expect("contiguous"),
        );
    }
    for (component, layer) in [
        ("classifier", &params.classifier),
        ("regressor", &params.regressor),
    ] {
        w.push(
            component,
            "weight",
            layer.weight.shape().to_vec(),
            layer.weight.as_slice().expect("contiguous"),
        );
        w.push(
            component,
            "bias",
            vec![layer.bias.len()],
            layer.bias.as_slice().expect("contiguous"),
        );
    }

    let header = CheckpointHeader {
        format_version: 1,
        meta: CheckpointMeta {
            classifier_kind: params.classifier_kind,
            embedding_dim: super::EMBED_DIM,
            image_size: params.image_size,
            class_ids: params.class_ids.clone(),
            num_base: params.num_base,
            extended: params.extended,
        },
        components: w.entries,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| CoreError::json(path, e))?;

    let mut bytes = Vec::with_capacity(8 + header_json.len() + w.payload.len());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&w.payload);
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

struct PayloadReader<'a> {
    entries: &'a BTreeMap<String, Vec<TensorEntry>>,
    payload: &'a [u8],
    path: &'a Path,
}

impl PayloadReader<'_> {
    fn tensor(&self, component: &str, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self
            .entries
            .get(component)
            .and_then(|v| v.iter().find(|t| t.name == name))
            .ok_or_else(|| {
                CoreError::Data(format!(
                    "{}: checkpoint is missing tensor {component}/{name}",
                    self.path.display()
                ))
            })?;
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * 4;
        if end > self.payload.len() {
            return Err(CoreError::Data(format!(
                "{}: tensor {component}/{name} overruns the payload",
                self.path.display()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = entry.offset + i * 4;
            let raw: [u8; 4] = self.payload[at..at + 4].try_into().expect("4 bytes");
            data.push(f32::from_le_bytes(raw) as f64);
        }
        Ok((entry.shape.clone(), data))
    }

    fn linear(&self, component: &str) -> Result<LinearLayer> {
        let (wshape, wdata) = self.tensor(component, "weight")?;
        let (_, bdata) = self.tensor(component, "bias")?;
        if wshape.len() != 2 {
            return Err(CoreError::Data(format!(
                "{component} weight must be 2-d"
            )));
        }
        Ok(LinearLayer {
            weight: Array2::from_shape_vec((wshape[0], wshape[1]), wdata)
                .map_err(|e| CoreError::Data(e.to_string()))?,
            bias: Array1::from_vec(bdata),
        })
    }

    fn conv(&self, component: &str, prefix: &str, stride: usize, padding: usize) -> Result<ConvBlock> {
        let (wshape, wdata) = self.tensor(component, &format!("{prefix}.weight"))?;
        let (_, bdata) = self.tensor(component, &format!("{prefix}.bias"))?;
        if wshape.len() != 4 {
            return Err(CoreError::Data(format!(
                "{component}/{prefix} weight must be 4-d"
            )));
        }
        let (out_ch, in_ch, k) = (wshape[0], wshape[1], wshape[2]);
        Ok(ConvBlock {
            weight: Array2::from_shape_vec((out_ch, in_ch * k * k), wdata)
                .map_err(|e| CoreError::Data(e.to_string()))?,
            bias: Array1::from_vec(bdata),
            kernel: k,
            in_ch,
            out_ch,
            stride,
            padding,
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(CoreError::Data(format!(
            "{}: truncated checkpoint",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CoreError::Data(format!(
            "{}: header overruns the file",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| CoreError::json(path, e))?;
    if header.format_version != 1 {
        return Err(CoreError::Data(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let reader = PayloadReader {
        entries: &header.components,
        payload: &bytes[8 + header_len..],
        path,
    };

    let backbone = (0..3)
        .map(|i| reader.conv("backbone", &format!("block{}", i + 1), 2, 1))
        .collect::<Result<Vec<_>>>()?;
    let proposal = reader.conv("proposal", "head", 1, 0)?;
    let roi_head = (0..2)
        .map(|i| reader.linear_named("roi_head", &format!("fc{}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let classifier = reader.linear("classifier")?;
    let regressor = reader.linear("regressor")?;

    let meta = header.meta;
    if classifier.weight.nrows() != meta.class_ids.len() + 1 {
        return Err(CoreError::Data(format!(
            "classifier has {} rows but the header names {} classes",
            classifier.weight.nrows(),
            meta.class_ids.len()
        )));
    }
    Ok(DetectorParams {
        backbone,
        proposal,
        roi_head,
        classifier,
        regressor,
        classifier_kind: meta.classifier_kind,
        class_ids: meta.class_ids,
        num_base: meta.num_base,
        extended: meta.extended,
        image_size: meta.image_size,
    })
}

impl PayloadReader<'_> {
    fn linear_named(&self, component: &str, prefix: &str) -> Result<LinearLayer> {
        let (wshape, wdata) = self.tensor(component, &format!("{prefix}.weight"))?;
        let (_, bdata) = self.tensor(component, &format!("{prefix}.bias"))?;
        if wshape.len() != 2 {
            return Err(CoreError::Data(format!(
                "{component}/{prefix} weight must be 2-d"
            )));
        }
        Ok(LinearLayer {
            weight: Array2::from_shape_vec((wshape[0], wshape[1]), wdata)
                .map_err(|e| CoreError::Data(e.to_string()))?,
            bias: Array1::from_vec(bdata),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_quantize(params: &DetectorParams) -> DetectorParams {
        let mut q = params.clone();
        let quant = |a: &mut Array2<f64>| a.mapv_inplace(|v| v as f32 as f64);
        let quant1 = |a: &mut Array1<f64>| a.mapv_inplace(|v| v as f32 as f64);
        for b in q.backbone.iter_mut() {
            quant(&mut b.weight);
            quant1(&mut b.bias);
        }
        quant(&mut q.proposal.weight);
        quant1(&mut q.proposal.bias);
        for l in q.roi_head.iter_mut() {
            quant(&mut l.weight);
            quant1(&mut l.bias);
        }
        quant(&mut q.classifier.weight);
        quant1(&mut q.classifier.bias);
        quant(&mut q.regressor.weight);
        quant1(&mut q.regressor.bias);
        q
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let params = DetectorParams::new(&[0, 1, 2].into(), ClassifierKind::Cosine, 128, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, f32_quantize(&params));
        assert_eq!(loaded.classifier_kind, ClassifierKind::Cosine);
        assert_eq!(loaded.class_ids, vec![0, 1, 2]);
        assert!(!loaded.extended);
    }

    #[test]
    fn header_is_readable_json_with_named_components() {
        let params = DetectorParams::new(&[0, 1].into(), ClassifierKind::Linear, 64, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value =
            serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        for component in ["backbone", "proposal", "roi_head", "classifier", "regressor"] {
            assert!(
                header["components"][component].is_array(),
                "missing {component}"
            );
        }
        assert_eq!(header["meta"]["classifier_kind"], "linear");
    }

    #[test]
    fn truncated_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, [1, 2, 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CoreError::Data(_))
        ));
    }
}
