//! Binary serialization of the exemplar store. The layout is little-endian
//! and fixed: magic, format version, quota, method, image dims, then each
//! class's label, count, and raw f64 pixels in stored (selection) order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{WriteBytesExt, LE};
use ndarray::Array3;

use super::{ExemplarStore, SelectionMethod};
use crate::binio::CountingReader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AANS";
const FORMAT_VERSION: u32 = 1;

pub fn save_store(store: &ExemplarStore, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(store.quota() as u64)?;
    w.write_u8(match store.method() {
        SelectionMethod::Herding => 0,
        SelectionMethod::Random => 1,
    })?;
    let (c, h, wd) = store.image_dims().unwrap_or((0, 0, 0));
    w.write_u64::<LE>(c as u64)?;
    w.write_u64::<LE>(h as u64)?;
    w.write_u64::<LE>(wd as u64)?;
    w.write_u64::<LE>(store.num_classes() as u64)?;
    for (label, images) in store.iter() {
        w.write_u32::<LE>(label)?;
        w.write_u64::<LE>(images.len() as u64)?;
        for im in images {
            for &v in im.as_slice().expect("standard layout") {
                w.write_f64::<LE>(v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ExemplarStore> {
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
            msg: format!("unsupported store format version {version}"),
        });
    }
    let quota = r.u64()? as usize;
    let method = match r.u8()? {
        0 => SelectionMethod::Herding,
        1 => SelectionMethod::Random,
        other => {
            return Err(Error::Format {
                offset: r.offset - 1,
                msg: format!("unknown selection method tag {other}"),
            })
        }
    };
    let c = r.u64()? as usize;
    let h = r.u64()? as usize;
    let wd = r.u64()? as usize;
    let dims = if c == 0 { None } else { Some((c, h, wd)) };
    let class_count = r.u64()? as usize;

    let mut classes = BTreeMap::new();
    for _ in 0..class_count {
        let (c, h, wd) = dims.ok_or_else(|| Error::Format {
            offset: r.offset,
            msg: "classes present but image dims are zero".into(),
        })?;
        let label = r.u32()?;
        let count = r.u64()? as usize;
        let mut images = Vec::with_capacity(count);
        let pixels = c * h * wd;
        for _ in 0..count {
            let mut data = Vec::with_capacity(pixels);
            for _ in 0..pixels {
                data.push(r.f64()?);
            }
            images.push(Array3::from_shape_vec((c, h, wd), data).expect("shape"));
        }
        if classes.insert(label, images).is_some() {
            return Err(Error::Format {
                offset: r.offset,
                msg: format!("class {label} appears twice"),
            });
        }
    }
    if quota == 0 {
        return Err(Error::Format {
            offset: 8,
            msg: "stored quota is zero".into(),
        });
    }
    Ok(ExemplarStore::from_raw_parts(quota, method, dims, classes))
}
