//! Single-file checkpoint archives: a JSON metadata header followed by
//! little-endian f32 parameter/buffer arrays (and f64 optimizer momenta for
//! resumable training), all named and length-checked on load.

use crate::backbone::{RefBackbone, StageTapSpec};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pmal::PmalModel;
use crate::sam::SamState;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ANCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "pmal" for backbone+heads, "backbone" for a plain network.
    pub kind: String,
    pub backbone_id: String,
    pub input_size: usize,
    pub num_classes: usize,
    pub k: usize,
    pub tap_stages: Vec<usize>,
    pub tap_specs: Vec<StageTapSpec>,
    pub descriptor_dim: usize,
    pub restore_channels: usize,
    pub skip_channels: usize,
    pub config_hash: String,
    pub epoch: usize,
    pub params: Vec<ArrayEntry>,
    pub buffers: Vec<ArrayEntry>,
    /// Per-step optimizer update counts when optimizer state is included.
    pub optimizer_updates: Vec<u64>,
}

impl CheckpointMeta {
    /// Field-by-field comparison of the structural fields against a config;
    /// returns a diff on conflict.
    pub fn check_structural(&self, cfg: &ExperimentConfig) -> Result<()> {
        let mut diff = String::new();
        let mut check = |field: &str, a: String, b: String| {
            if a != b {
                diff.push_str(&format!("  {field}: checkpoint {a} vs config {b}\n"));
            }
        };
        check("backbone", self.backbone_id.clone(), cfg.backbone.clone());
        check("input_size", self.input_size.to_string(), cfg.input_size.to_string());
        check("k", self.k.to_string(), cfg.k.to_string());
        check(
            "tap_stages",
            format!("{:?}", self.tap_stages),
            format!("{:?}", cfg.resolved_tap_stages()),
        );
        if self.kind == "pmal" {
            check(
                "descriptor_dim",
                self.descriptor_dim.to_string(),
                cfg.descriptor_dim.to_string(),
            );
            check(
                "restore_channels",
                self.restore_channels.to_string(),
                cfg.restore_channels.to_string(),
            );
            check(
                "skip_channels",
                self.skip_channels.to_string(),
                cfg.skip_channels.to_string(),
            );
        }
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch { diff })
        }
    }
}

fn collect_pmal_arrays(model: &PmalModel<f32>) -> (Vec<(String, Vec<f32>)>, Vec<(String, Vec<f32>)>) {
    let mut params = Vec::new();
    model.backbone.visit_params(&mut |_, name, s| params.push((name.to_string(), s.to_vec())));
    for (i, h) in model.heads.iter().enumerate() {
        h.visit_params(&mut |name, s| params.push((format!("head{}.{name}", i + 1), s.to_vec())));
    }
    let mut buffers = Vec::new();
    model.backbone.visit_buffers(&mut |name, s| buffers.push((name.to_string(), s.to_vec())));
    for (i, h) in model.heads.iter().enumerate() {
        h.visit_buffers(&mut |name, s| buffers.push((format!("head{}.{name}", i + 1), s.to_vec())));
    }
    (params, buffers)
}

fn collect_backbone_arrays(bb: &RefBackbone<f32>) -> (Vec<(String, Vec<f32>)>, Vec<(String, Vec<f32>)>) {
    let mut params = Vec::new();
    bb.visit_params(&mut |_, name, s| params.push((name.to_string(), s.to_vec())));
    let mut buffers = Vec::new();
    bb.visit_buffers(&mut |name, s| buffers.push((name.to_string(), s.to_vec())));
    (params, buffers)
}

fn write_archive(
    path: &Path,
    meta: &CheckpointMeta,
    params: &[(String, Vec<f32>)],
    buffers: &[(String, Vec<f32>)],
    momenta: &[Vec<f64>],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let json = serde_json::to_vec(meta).expect("meta serializes");
    w.write_u64::<LittleEndian>(json.len() as u64)?;
    w.write_all(&json)?;
    for (_, data) in params.iter().chain(buffers.iter()) {
        for &v in data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.write_u64::<LittleEndian>(momenta.len() as u64)?;
    for m in momenta {
        w.write_u64::<LittleEndian>(m.len() as u64)?;
        for &v in m {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Archive {
    meta: CheckpointMeta,
    params: Vec<(String, Vec<f32>)>,
    buffers: Vec<(String, Vec<f32>)>,
    momenta: Vec<Vec<f64>>,
}

fn read_archive(path: &Path) -> Result<Archive> {
    let mut r = BufReader::new(
        std::fs::File::open(path).map_err(|_| Error::DatasetNotFound(path.to_path_buf()))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic bytes".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::InvalidCheckpoint(format!("unsupported version {version}")));
    }
    let json_len = r.read_u64::<LittleEndian>()? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)
        .map_err(|e| Error::InvalidCheckpoint(format!("bad metadata: {e}")))?;
    let mut read_block = |entries: &[ArrayEntry]| -> Result<Vec<(String, Vec<f32>)>> {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let mut data = vec![0f32; e.len];
            for v in data.iter_mut() {
                *v = r.read_f32::<LittleEndian>()?;
            }
            out.push((e.name.clone(), data));
        }
        Ok(out)
    };
    let params = read_block(&meta.params)?;
    let buffers = read_block(&meta.buffers)?;
    let n_momenta = r.read_u64::<LittleEndian>()? as usize;
    let mut momenta = Vec::with_capacity(n_momenta);
    for _ in 0..n_momenta {
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut m = vec![0f64; len];
        for v in m.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        momenta.push(m);
    }
    Ok(Archive { meta, params, buffers, momenta })
}

pub fn save_pmal(
    path: &Path,
    model: &PmalModel<f32>,
    cfg: &ExperimentConfig,
    epoch: usize,
    optimizers: Option<&[SamState]>,
) -> Result<()> {
    let (params, buffers) = collect_pmal_arrays(model);
    let momenta: Vec<Vec<f64>> = optimizers
        .map(|opts| opts.iter().map(|o| o.momentum_buffer().to_vec()).collect())
        .unwrap_or_default();
    let meta = CheckpointMeta {
        kind: "pmal".into(),
        backbone_id: cfg.backbone.clone(),
        input_size: cfg.input_size,
        num_classes: model.num_classes(),
        k: model.k(),
        tap_stages: model.backbone.tap_stages.clone(),
        tap_specs: model.tap_specs.clone(),
        descriptor_dim: cfg.descriptor_dim,
        restore_channels: cfg.restore_channels,
        skip_channels: cfg.skip_channels,
        config_hash: cfg.hash(),
        epoch,
        params: params.iter().map(|(n, d)| ArrayEntry { name: n.clone(), len: d.len() }).collect(),
        buffers: buffers.iter().map(|(n, d)| ArrayEntry { name: n.clone(), len: d.len() }).collect(),
        optimizer_updates: optimizers
            .map(|opts| opts.iter().map(|o| o.update_count).collect())
            .unwrap_or_default(),
    };
    write_archive(path, &meta, &params, &buffers, &momenta)
}

/// Loads a PMAL checkpoint, rebuilding the model from the stored structure.
/// Returns the metadata and any stored optimizer momenta.
pub fn load_pmal(path: &Path) -> Result<(CheckpointMeta, PmalModel<f32>, Vec<Vec<f64>>)> {
    let archive = read_archive(path)?;
    if archive.meta.kind != "pmal" {
        return Err(Error::InvalidCheckpoint(format!(
            "expected a pmal checkpoint, found {:?}",
            archive.meta.kind
        )));
    }
    let cfg = ExperimentConfig {
        backbone: archive.meta.backbone_id.clone(),
        input_size: archive.meta.input_size,
        k: archive.meta.k,
        tap_stages: archive.meta.tap_stages.clone(),
        descriptor_dim: archive.meta.descriptor_dim,
        restore_channels: archive.meta.restore_channels,
        skip_channels: archive.meta.skip_channels,
        ..ExperimentConfig::desk_defaults()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = PmalModel::<f32>::new(&cfg, archive.meta.num_classes, &mut rng)?;
    restore_pmal_arrays(&mut model, &archive)?;
    Ok((archive.meta, model, archive.momenta))
}

fn restore_pmal_arrays(model: &mut PmalModel<f32>, archive: &Archive) -> Result<()> {
    let mut idx = 0usize;
    let mut fail: Option<String> = None;
    {
        let params = &archive.params;
        let mut apply = |name: String, s: &mut [f32]| {
            if fail.is_some() {
                return;
            }
            match params.get(idx) {
                Some((n, data)) if *n == name && data.len() == s.len() => {
                    s.copy_from_slice(data);
                    idx += 1;
                }
                Some((n, data)) => {
                    fail = Some(format!(
                        "array {idx}: expected {name} ({}), found {n} ({})",
                        s.len(),
                        data.len()
                    ));
                }
                None => fail = Some(format!("missing array {name}")),
            }
        };
        model.backbone.visit_params_mut(&mut |_, name, s| apply(name.to_string(), s));
        for i in 0..model.heads.len() {
            let prefix = format!("head{}", i + 1);
            model.heads[i].visit_params_mut(&mut |name, s| apply(format!("{prefix}.{name}"), s));
        }
    }
    if let Some(msg) = fail {
        return Err(Error::InvalidCheckpoint(msg));
    }

    let mut bidx = 0usize;
    let mut bfail: Option<String> = None;
    {
        let buffers = &archive.buffers;
        let mut apply = |name: String, s: &mut [f32]| {
            if bfail.is_some() {
                return;
            }
            match buffers.get(bidx) {
                Some((n, data)) if *n == name && data.len() == s.len() => {
                    s.copy_from_slice(data);
                    bidx += 1;
                }
                _ => bfail = Some(format!("buffer mismatch at {name}")),
            }
        };
        model.backbone.visit_buffers_mut(&mut |name, s| apply(name.to_string(), s));
        for i in 0..model.heads.len() {
            let prefix = format!("head{}", i + 1);
            model.heads[i].visit_buffers_mut(&mut |name, s| apply(format!("{prefix}.{name}"), s));
        }
    }
    if let Some(msg) = bfail {
        return Err(Error::InvalidCheckpoint(msg));
    }
    Ok(())
}

pub fn save_backbone(
    path: &Path,
    bb: &RefBackbone<f32>,
    cfg: &ExperimentConfig,
    epoch: usize,
) -> Result<()> {
    let (params, buffers) = collect_backbone_arrays(bb);
    let meta = CheckpointMeta {
        kind: "backbone".into(),
        backbone_id: cfg.backbone.clone(),
        input_size: cfg.input_size,
        num_classes: bb.num_classes,
        k: bb.tap_stages.len(),
        tap_stages: bb.tap_stages.clone(),
        tap_specs: bb.stage_shapes(bb.input_h, bb.input_w)?,
        descriptor_dim: 0,
        restore_channels: 0,
        skip_channels: 0,
        config_hash: cfg.hash(),
        epoch,
        params: params.iter().map(|(n, d)| ArrayEntry { name: n.clone(), len: d.len() }).collect(),
        buffers: buffers.iter().map(|(n, d)| ArrayEntry { name: n.clone(), len: d.len() }).collect(),
        optimizer_updates: vec![],
    };
    write_archive(path, &meta, &params, &buffers, &[])
}

pub fn load_backbone(path: &Path) -> Result<(CheckpointMeta, RefBackbone<f32>)> {
    let archive = read_archive(path)?;
    if archive.meta.kind != "backbone" {
        return Err(Error::InvalidCheckpoint(format!(
            "expected a backbone checkpoint, found {:?}",
            archive.meta.kind
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bb = RefBackbone::<f32>::new(
        archive.meta.input_size,
        archive.meta.input_size,
        archive.meta.num_classes,
        &archive.meta.tap_stages,
        &mut rng,
    )?;
    let mut idx = 0usize;
    let mut fail = false;
    bb.visit_params_mut(&mut |_, _, s| {
        if let Some((_, data)) = archive.params.get(idx) {
            if data.len() == s.len() {
                s.copy_from_slice(data);
            } else {
                fail = true;
            }
        } else {
            fail = true;
        }
        idx += 1;
    });
    let mut bidx = 0usize;
    bb.visit_buffers_mut(&mut |_, s| {
        if let Some((_, data)) = archive.buffers.get(bidx) {
            if data.len() == s.len() {
                s.copy_from_slice(data);
            } else {
                fail = true;
            }
        } else {
            fail = true;
        }
        bidx += 1;
    });
    if fail {
        return Err(Error::InvalidCheckpoint("array shape mismatch".into()));
    }
    Ok((archive.meta, bb))
}
