//! Single-archive phase checkpoints. The layout is little-endian and fixed:
//! magic, format version, writer version and architecture tag strings, the
//! architecture fields, phase metadata, label-to-row table, the trunk,
//! per-level branch parameters, aggregation weights, and the classifier
//! head. Loads are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{WriteBytesExt, LE};
use ndarray::{Array1, Array2, Array4};

use crate::backbone::{
    AggregationWeights, AlphaPair, ArchConfig, BaseBackbone, Body, BranchParams, ClassifierHead,
    ConvParams, DualLevel, LevelParams, Model, ScaleParams,
};
use crate::binio::CountingReader;
use crate::error::{Error, Result};
use crate::trainer::PhaseState;

const MAGIC: &[u8; 4] = b"AANC";
const FORMAT_VERSION: u32 = 1;
/// Strings longer than this are treated as corruption, not data.
const MAX_STRING: usize = 1 << 16;

/// Everything a phase checkpoint stores, reconstructed on load.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Version of the crate that wrote the archive.
    pub crate_version: String,
    pub arch_tag: String,
    pub phase_index: usize,
    pub train_base: bool,
    pub label_rows: BTreeMap<u32, usize>,
    pub model: Model,
    pub alphas: AggregationWeights,
}

/// Compact architecture fingerprint stored alongside the numeric fields.
pub fn arch_tag(arch: &ArchConfig) -> String {
    format!(
        "in{}x{}-k{}-f{}-l{}x{}",
        arch.in_channels,
        arch.image_size,
        arch.kernel_size,
        arch.filters,
        arch.levels,
        arch.layers_per_level
    )
}

pub fn save(state: &PhaseState, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    write_string(&mut w, env!("CARGO_PKG_VERSION"))?;
    let arch = &state.model.base.arch;
    write_string(&mut w, &arch_tag(arch))?;
    for field in [
        arch.image_size,
        arch.in_channels,
        arch.levels,
        arch.filters,
        arch.kernel_size,
        arch.layers_per_level,
    ] {
        w.write_u64::<LE>(field as u64)?;
    }
    w.write_u64::<LE>(state.phase_index as u64)?;
    w.write_u8(state.train_base as u8)?;
    w.write_u64::<LE>(state.label_rows.len() as u64)?;
    for (&label, &row) in &state.label_rows {
        w.write_u32::<LE>(label)?;
        w.write_u64::<LE>(row as u64)?;
    }

    write_conv(&mut w, &state.model.base.stem)?;
    w.write_u64::<LE>(state.model.base.levels.len() as u64)?;
    for level in &state.model.base.levels {
        write_level(&mut w, level)?;
    }

    match &state.model.body {
        Body::Single(branches) => {
            w.write_u8(0)?;
            w.write_u64::<LE>(branches.len() as u64)?;
            for b in branches {
                write_branch(&mut w, b)?;
            }
        }
        Body::Dual(levels) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(levels.len() as u64)?;
            for d in levels {
                write_branch(&mut w, &d.stable)?;
                write_branch(&mut w, &d.plastic)?;
            }
        }
    }

    w.write_u64::<LE>(state.alphas.per_level.len() as u64)?;
    for pair in &state.alphas.per_level {
        w.write_f64::<LE>(pair.stable)?;
        w.write_f64::<LE>(pair.plastic)?;
    }

    let head = &state.model.head;
    w.write_u64::<LE>(head.weight.nrows() as u64)?;
    w.write_u64::<LE>(head.weight.ncols() as u64)?;
    for &v in head.weight.iter() {
        w.write_f64::<LE>(v)?;
    }
    write_arr1(&mut w, &head.bias)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint format version {version}"),
        });
    }
    let crate_version = read_string(&mut r, "crate version")?;
    let stored_tag = read_string(&mut r, "architecture tag")?;
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = r.u64()? as usize;
    }
    let arch = ArchConfig {
        image_size: fields[0],
        in_channels: fields[1],
        levels: fields[2],
        filters: fields[3],
        kernel_size: fields[4],
        layers_per_level: fields[5],
    };
    if stored_tag != arch_tag(&arch) {
        return Err(Error::Format {
            offset: r.offset,
            msg: format!(
                "architecture tag {stored_tag:?} does not match the stored fields ({:?})",
                arch_tag(&arch)
            ),
        });
    }
    let phase_index = r.u64()? as usize;
    let train_base = match r.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: r.offset - 1,
                msg: format!("invalid trunk-training flag {other}"),
            })
        }
    };
    let row_count = r.u64()? as usize;
    let mut label_rows = BTreeMap::new();
    for _ in 0..row_count {
        let label = r.u32()?;
        let row = r.u64()? as usize;
        if label_rows.insert(label, row).is_some() {
            return Err(Error::Format {
                offset: r.offset,
                msg: format!("label {label} appears twice"),
            });
        }
    }

    let stem = read_conv(&mut r)?;
    if stem.weight.dim() != (arch.filters, arch.in_channels, arch.kernel_size, arch.kernel_size) {
        return Err(Error::Format {
            offset: r.offset,
            msg: format!(
                "stem shape {:?} disagrees with the architecture fields",
                stem.weight.dim()
            ),
        });
    }
    let level_count = r.u64()? as usize;
    let mut levels = Vec::new();
    for _ in 0..level_count {
        levels.push(read_level(&mut r)?);
    }
    let base = BaseBackbone { stem, levels, arch };

    let body = match r.u8()? {
        0 => {
            let n = r.u64()? as usize;
            let mut branches = Vec::new();
            for _ in 0..n {
                branches.push(read_branch(&mut r)?);
            }
            Body::Single(branches)
        }
        1 => {
            let n = r.u64()? as usize;
            let mut duals = Vec::new();
            for _ in 0..n {
                let stable = read_branch(&mut r)?;
                let plastic = read_branch(&mut r)?;
                duals.push(DualLevel { stable, plastic });
            }
            Body::Dual(duals)
        }
        other => {
            return Err(Error::Format {
                offset: r.offset - 1,
                msg: format!("unknown body tag {other}"),
            })
        }
    };

    let pair_count = r.u64()? as usize;
    let mut per_level = Vec::new();
    for _ in 0..pair_count {
        let stable = r.f64()?;
        let plastic = r.f64()?;
        per_level.push(AlphaPair { stable, plastic });
    }
    let alphas = AggregationWeights { per_level };

    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let mut data = Vec::new();
    for _ in 0..rows * cols {
        data.push(r.f64()?);
    }
    let weight = Array2::from_shape_vec((rows, cols), data).expect("shape");
    let bias = read_arr1(&mut r)?;
    let head = ClassifierHead { weight, bias };

    Ok(Checkpoint {
        crate_version,
        arch_tag: stored_tag,
        phase_index,
        train_base,
        label_rows,
        model: Model { base, body, head },
        alphas,
    })
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u64::<LE>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut CountingReader<R>, what: &str) -> Result<String> {
    let len = r.u64()? as usize;
    if len > MAX_STRING {
        return Err(Error::Format {
            offset: r.offset - 8,
            msg: format!("implausible {what} length {len}"),
        });
    }
    let start = r.offset;
    let mut bytes = vec![0u8; len];
    r.read_exact_at(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| Error::Format {
        offset: start,
        msg: format!("invalid UTF-8 in {what}"),
    })
}

fn write_arr1<W: Write>(w: &mut W, a: &Array1<f64>) -> Result<()> {
    w.write_u64::<LE>(a.len() as u64)?;
    for &v in a.iter() {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_arr1<R: Read>(r: &mut CountingReader<R>) -> Result<Array1<f64>> {
    let len = r.u64()? as usize;
    let mut data = Vec::new();
    for _ in 0..len {
        data.push(r.f64()?);
    }
    Ok(Array1::from_vec(data))
}

fn write_conv<W: Write>(w: &mut W, conv: &ConvParams) -> Result<()> {
    let (o, i, kh, kw) = conv.weight.dim();
    for d in [o, i, kh, kw] {
        w.write_u64::<LE>(d as u64)?;
    }
    for &v in conv.weight.iter() {
        w.write_f64::<LE>(v)?;
    }
    write_arr1(w, &conv.bias)
}

fn read_conv<R: Read>(r: &mut CountingReader<R>) -> Result<ConvParams> {
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let count = dims.iter().product::<usize>();
    let mut data = Vec::new();
    for _ in 0..count {
        data.push(r.f64()?);
    }
    let weight =
        Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).expect("shape");
    let bias = read_arr1(r)?;
    Ok(ConvParams { weight, bias })
}

fn write_level<W: Write>(w: &mut W, level: &LevelParams) -> Result<()> {
    w.write_u64::<LE>(level.layers.len() as u64)?;
    for conv in &level.layers {
        write_conv(w, conv)?;
    }
    Ok(())
}

fn read_level<R: Read>(r: &mut CountingReader<R>) -> Result<LevelParams> {
    let count = r.u64()? as usize;
    let mut layers = Vec::new();
    for _ in 0..count {
        layers.push(read_conv(r)?);
    }
    Ok(LevelParams { layers })
}

fn write_branch<W: Write>(w: &mut W, branch: &BranchParams) -> Result<()> {
    match branch {
        BranchParams::All(level) => {
            w.write_u8(0)?;
            write_level(w, level)
        }
        BranchParams::Scaling(scales) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(scales.per_layer.len() as u64)?;
            for layer in &scales.per_layer {
                write_arr1(w, layer)?;
            }
            Ok(())
        }
        BranchParams::Frozen => {
            w.write_u8(2)?;
            Ok(())
        }
    }
}

fn read_branch<R: Read>(r: &mut CountingReader<R>) -> Result<BranchParams> {
    match r.u8()? {
        0 => Ok(BranchParams::All(read_level(r)?)),
        1 => {
            let count = r.u64()? as usize;
            let mut per_layer = Vec::new();
            for _ in 0..count {
                per_layer.push(read_arr1(r)?);
            }
            Ok(BranchParams::Scaling(ScaleParams { per_layer }))
        }
        other => {
            if other == 2 {
                Ok(BranchParams::Frozen)
            } else {
                Err(Error::Format {
                    offset: r.offset - 1,
                    msg: format!("unknown branch tag {other}"),
                })
            }
        }
    }
}
