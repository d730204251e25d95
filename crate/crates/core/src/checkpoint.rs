//! Checkpoint container: a structured-text header, little-endian f32 arrays
//! in declared order, and a trailing 64-bit length-and-checksum record.
//!
//! ```text
//! [ magic "SNCKPT1\n" | header_len: u64 LE | header: TOML | payload | trailer ]
//! trailer = payload_len: u64 LE ++ fnv1a64(header ++ payload): u64 LE
//! ```
//!
//! Supernet checkpoints carry every parameter tensor plus the batch-norm
//! stats buckets; standalone models use the same container with a config
//! stanza in the header. Serialization is bit-exact: save/load round-trips
//! reproduce identical bytes.

use crate::arch::{ArchConfig, ArchSpace};
use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::supernet::{StandaloneLayer, StandaloneModel, Supernet};
use crate::tape::BnRunningStats;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SNCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayDecl {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StandaloneMeta {
    config: ArchConfig,
    input_channels: usize,
    num_classes: usize,
    feat_in: usize,
    layers: Vec<StandaloneLayerMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StandaloneLayerMeta {
    name: String,
    is_stem: bool,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    residual: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    epoch: u64,
    space: ArchSpace,
    bn_auto_update: Vec<String>,
    bn_calibrated: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    standalone: Option<StandaloneMeta>,
    arrays: Vec<ArrayDecl>,
}

struct Builder {
    arrays: Vec<ArrayDecl>,
    payload: Vec<u8>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            arrays: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        let offset = self.payload.len() / 4;
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.arrays.push(ArrayDecl {
            name,
            shape,
            offset,
            len: values.len(),
        });
    }
}

fn assemble(header: &Header, payload: &[u8]) -> Vec<u8> {
    let header_text = toml::to_string(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 8 + header_text.len() + payload.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    out.extend_from_slice(payload);
    let mut checked = Vec::with_capacity(header_text.len() + payload.len());
    checked.extend_from_slice(header_text.as_bytes());
    checked.extend_from_slice(payload);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&fnv1a64(&checked).to_le_bytes());
    out
}

fn disassemble(bytes: &[u8]) -> Result<(Header, Vec<f32>)> {
    let err = |offset: u64, message: &str| Error::Format {
        offset,
        message: message.into(),
    };
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(err(0, "missing container magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end + 16 {
        return Err(err(16, "truncated header"));
    }
    let header_text = std::str::from_utf8(&bytes[16..header_end])
        .map_err(|_| err(16, "header is not UTF-8"))?;
    let header: Header = toml::from_str(header_text)
        .map_err(|e| err(16, &format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(err(16, &format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[header_end..bytes.len() - 16];
    let declared_len =
        u64::from_le_bytes(bytes[bytes.len() - 16..bytes.len() - 8].try_into().unwrap());
    let declared_sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if declared_len != payload.len() as u64 {
        return Err(err(
            (bytes.len() - 16) as u64,
            &format!(
                "trailer length {declared_len} != payload length {}",
                payload.len()
            ),
        ));
    }
    let mut checked = Vec::with_capacity(header_len + payload.len());
    checked.extend_from_slice(header_text.as_bytes());
    checked.extend_from_slice(payload);
    if fnv1a64(&checked) != declared_sum {
        return Err(err((bytes.len() - 8) as u64, "checksum mismatch"));
    }
    if payload.len() % 4 != 0 {
        return Err(err(header_end as u64, "payload is not a whole f32 array"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

fn take_array(values: &[f32], decl: &ArrayDecl) -> Result<Vec<f32>> {
    values
        .get(decl.offset..decl.offset + decl.len)
        .map(|s| s.to_vec())
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("array {} overruns the payload", decl.name),
        })
}

// ── Supernet checkpoints ─────────────────────────────────────────────

pub fn supernet_to_bytes(net: &Supernet, epoch: u64) -> Vec<u8> {
    let mut b = Builder::new();
    for p in &net.weights.params {
        b.push(
            format!("param/{}", p.name),
            p.tensor.shape.clone(),
            &p.tensor.values,
        );
    }
    for (digest, bucket) in &net.bn_stats.buckets {
        for (i, stats) in bucket.iter().enumerate() {
            b.push(
                format!("bn/{digest}/{i}/mean"),
                vec![stats.mean.len()],
                &stats.mean,
            );
            b.push(
                format!("bn/{digest}/{i}/var"),
                vec![stats.var.len()],
                &stats.var,
            );
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "supernet".into(),
        epoch,
        space: net.space.clone(),
        bn_auto_update: net.bn_stats.auto_update.clone(),
        bn_calibrated: net.bn_stats.calibrated.iter().cloned().collect(),
        standalone: None,
        arrays: b.arrays.clone(),
    };
    assemble(&header, &b.payload)
}

pub fn supernet_from_bytes(bytes: &[u8]) -> Result<(Supernet, u64)> {
    let (header, values) = disassemble(bytes)?;
    if header.kind != "supernet" {
        return Err(Error::Format {
            offset: 16,
            message: format!("expected a supernet container, found {:?}", header.kind),
        });
    }
    let mut net = Supernet::new(header.space.clone(), 0)?;
    let mut arrays = header.arrays.iter();
    for p in &mut net.weights.params {
        let decl = arrays
            .next()
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: "missing parameter arrays".into(),
            })?;
        if decl.name != format!("param/{}", p.name) || decl.shape != p.tensor.shape {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "parameter mismatch: container has {} {:?}, store expects {} {:?}",
                    decl.name, decl.shape, p.name, p.tensor.shape
                ),
            });
        }
        p.tensor.values = take_array(&values, decl)?;
        p.tensor.grad = None;
    }
    net.bn_stats.buckets.clear();
    net.bn_stats.auto_update = header.bn_auto_update.clone();
    net.bn_stats.calibrated = header.bn_calibrated.iter().cloned().collect();
    let rest: Vec<&ArrayDecl> = arrays.collect();
    if rest.len() % 2 != 0 {
        return Err(Error::Format {
            offset: 0,
            message: "batch-norm arrays must come in mean/var pairs".into(),
        });
    }
    for pair in rest.chunks_exact(2) {
        let (mean_decl, var_decl) = (pair[0], pair[1]);
        let parts: Vec<&str> = mean_decl.name.splitn(4, '/').collect();
        if parts.len() != 4 || parts[0] != "bn" || parts[3] != "mean" {
            return Err(Error::Format {
                offset: 0,
                message: format!("unexpected array {}", mean_decl.name),
            });
        }
        let digest = parts[1].to_string();
        let layer: usize = parts[2].parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad layer index in {}", mean_decl.name),
        })?;
        let bucket = net
            .bn_stats
            .buckets
            .entry(digest)
            .or_insert_with(|| {
                vec![
                    BnRunningStats {
                        mean: vec![],
                        var: vec![]
                    };
                    net.layers.len()
                ]
            });
        if layer >= bucket.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!("layer index {layer} out of range"),
            });
        }
        bucket[layer] = BnRunningStats {
            mean: take_array(&values, mean_decl)?,
            var: take_array(&values, var_decl)?,
        };
    }
    Ok((net, header.epoch))
}

pub fn save_supernet(net: &Supernet, epoch: u64, path: &Path) -> Result<()> {
    std::fs::write(path, supernet_to_bytes(net, epoch))?;
    Ok(())
}

pub fn load_supernet(path: &Path) -> Result<(Supernet, u64)> {
    supernet_from_bytes(&std::fs::read(path)?)
}

// ── Standalone models ────────────────────────────────────────────────

pub fn standalone_to_bytes(model: &StandaloneModel) -> Vec<u8> {
    let mut b = Builder::new();
    for layer in &model.layers {
        let base = format!("layer/{}", layer.name);
        b.push(
            format!("{base}/conv"),
            vec![layer.out_ch, layer.in_ch, layer.kernel, layer.kernel],
            &layer.conv,
        );
        b.push(format!("{base}/gamma"), vec![layer.out_ch], &layer.gamma);
        b.push(format!("{base}/beta"), vec![layer.out_ch], &layer.beta);
        b.push(format!("{base}/mean"), vec![layer.out_ch], &layer.bn_mean);
        b.push(format!("{base}/var"), vec![layer.out_ch], &layer.bn_var);
    }
    b.push(
        "head/fc.w".into(),
        vec![model.feat_in, model.num_classes],
        &model.fc_w,
    );
    b.push("head/fc.b".into(), vec![model.num_classes], &model.fc_b);
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "standalone".into(),
        epoch: 0,
        // The space stanza is informative for standalone models; the dense
        // geometry below is authoritative.
        space: ArchSpace {
            input_channels: model.input_channels,
            num_classes: model.num_classes,
            stem: crate::arch::StemSpec {
                out_channels: model.layers.first().map(|l| l.out_ch).unwrap_or(1),
                kernel: model.layers.first().map(|l| l.kernel).unwrap_or(1),
                stride: model.layers.first().map(|l| l.stride).unwrap_or(1),
            },
            stages: vec![],
            head: crate::arch::HeadSpec { dropout: 0.0 },
            resolution_choices: vec![model.config.resolution],
        },
        bn_auto_update: vec![],
        bn_calibrated: vec![],
        standalone: Some(StandaloneMeta {
            config: model.config.clone(),
            input_channels: model.input_channels,
            num_classes: model.num_classes,
            feat_in: model.feat_in,
            layers: model
                .layers
                .iter()
                .map(|l| StandaloneLayerMeta {
                    name: l.name.clone(),
                    is_stem: l.is_stem,
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    kernel: l.kernel,
                    stride: l.stride,
                    residual: l.residual,
                })
                .collect(),
        }),
        arrays: b.arrays.clone(),
    };
    assemble(&header, &b.payload)
}

pub fn standalone_from_bytes(bytes: &[u8]) -> Result<StandaloneModel> {
    let (header, values) = disassemble(bytes)?;
    let meta = header.standalone.ok_or_else(|| Error::Format {
        offset: 16,
        message: "expected a standalone container (no config stanza found)".into(),
    })?;
    let mut arrays = header.arrays.iter();
    let mut next = |what: &str| -> Result<Vec<f32>> {
        let decl = arrays.next().ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("missing array {what}"),
        })?;
        take_array(&values, decl)
    };
    let mut layers = Vec::with_capacity(meta.layers.len());
    for lm in &meta.layers {
        layers.push(StandaloneLayer {
            name: lm.name.clone(),
            is_stem: lm.is_stem,
            in_ch: lm.in_ch,
            out_ch: lm.out_ch,
            kernel: lm.kernel,
            stride: lm.stride,
            residual: lm.residual,
            conv: next("conv")?,
            gamma: next("gamma")?,
            beta: next("beta")?,
            bn_mean: next("mean")?,
            bn_var: next("var")?,
        });
    }
    Ok(StandaloneModel {
        config: meta.config,
        input_channels: meta.input_channels,
        num_classes: meta.num_classes,
        feat_in: meta.feat_in,
        layers,
        fc_w: next("fc.w")?,
        fc_b: next("fc.b")?,
    })
}

pub fn save_standalone(model: &StandaloneModel, path: &Path) -> Result<()> {
    std::fs::write(path, standalone_to_bytes(model))?;
    Ok(())
}

pub fn load_standalone(path: &Path) -> Result<StandaloneModel> {
    standalone_from_bytes(&std::fs::read(path)?)
}
