use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::ByteReader;
use crate::residuals::{BlockResidual, ConceptMeta, LowRank, ResidualSet, TargetLayer};
use crate::tensor::Tensor;

pub const RESIDUAL_MAGIC: &[u8; 4] = b"PRES";
/// proj_out-only layout: per block `m, r, A, B`.
const VERSION_PROJ_OUT: u32 = 1;
/// Tagged layout for other target layers and a trained token embedding.
const VERSION_TAGGED: u32 = 2;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn is_v1(rs: &ResidualSet) -> bool {
    rs.token_embedding.is_none()
        && rs.blocks.iter().all(|b| b.has_only_proj_out() && b.proj_out.is_some())
}

pub(crate) fn encode(rs: &ResidualSet) -> Result<Vec<u8>> {
    if !rs.is_finite() {
        return Err(Error::Input("refusing to save non-finite residual factors".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(RESIDUAL_MAGIC);
    let v1 = is_v1(rs);
    put_u32(&mut buf, if v1 { VERSION_PROJ_OUT } else { VERSION_TAGGED } as usize)?;
    let meta = serde_json::to_vec(&rs.meta)?;
    put_u32(&mut buf, meta.len())?;
    buf.extend_from_slice(&meta);
    put_u32(&mut buf, rs.blocks.len())?;
    for block in &rs.blocks {
        if v1 {
            let f = block.proj_out.as_ref().expect("checked by is_v1");
            put_u32(&mut buf, f.a.shape()[0])?;
            put_u32(&mut buf, f.rank())?;
            put_f64s(&mut buf, &f.a);
            put_f64s(&mut buf, &f.b);
        } else {
            let entries = block.entries();
            buf.push(entries.len() as u8);
            for (layer, f) in entries {
                buf.push(layer.tag());
                put_u32(&mut buf, f.a.shape()[0])?;
                put_u32(&mut buf, f.b.shape()[1])?;
                put_u32(&mut buf, f.rank())?;
                put_f64s(&mut buf, &f.a);
                put_f64s(&mut buf, &f.b);
            }
        }
    }
    if !v1 {
        match &rs.token_embedding {
            Some(e) => {
                buf.push(1);
                put_u32(&mut buf, e.numel())?;
                put_f64s(&mut buf, e);
            }
            None => buf.push(0),
        }
    }
    Ok(buf)
}

fn read_factor(r: &mut ByteReader<'_>, rows: usize, cols: usize, rank: usize) -> Result<LowRank> {
    if rank == 0 || rank > rows.min(cols) {
        return Err(Error::Format(format!("rank {rank} invalid for a {rows}×{cols} weight")));
    }
    let a = Tensor::new(r.f64s(rows * rank)?, &[rows, rank])?;
    let b = Tensor::new(r.f64s(rank * cols)?, &[rank, cols])?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Format("non-finite residual factor".into()));
    }
    Ok(LowRank { a, b })
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ResidualSet> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != RESIDUAL_MAGIC {
        return Err(Error::Format("not a residual file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION_PROJ_OUT && version != VERSION_TAGGED {
        return Err(Error::Format(format!("unsupported residual file version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: ConceptMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("residual metadata: {e}")))?;
    let num_blocks = r.u32()? as usize;
    if num_blocks == 0 || num_blocks > 64 {
        return Err(Error::Format(format!("implausible block count {num_blocks}")));
    }
    let mut blocks = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        let mut block = BlockResidual::default();
        if version == VERSION_PROJ_OUT {
            let m = r.u32()? as usize;
            let rank = r.u32()? as usize;
            block.proj_out = Some(read_factor(&mut r, m, m, rank)?);
        } else {
            let count = r.u8()?;
            for _ in 0..count {
                let layer = TargetLayer::from_tag(r.u8()?)?;
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let rank = r.u32()? as usize;
                let f = read_factor(&mut r, rows, cols, rank)?;
                let slot = block.slot(layer);
                if slot.is_some() {
                    return Err(Error::Format(format!("duplicate {layer:?} entry")));
                }
                *slot = Some(f);
            }
        }
        blocks.push(block);
    }
    let token_embedding = if version == VERSION_TAGGED && r.u8()? == 1 {
        let d = r.u32()? as usize;
        let e = Tensor::new(r.f64s(d)?, &[d])?;
        if !e.is_finite() {
            return Err(Error::Format("non-finite token embedding".into()));
        }
        Some(e)
    } else {
        None
    };
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after residual payload".into()));
    }
    let set = ResidualSet {
        meta,
        blocks,
        token_embedding,
    };
    if set.param_count() != set.meta.param_count {
        return Err(Error::Format(format!(
            "metadata declares {} parameters, payload has {}",
            set.meta.param_count,
            set.param_count()
        )));
    }
    Ok(set)
}

pub fn save_residuals(rs: &ResidualSet, path: &Path) -> Result<()> {
    let bytes = encode(rs)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_residuals(path: &Path) -> Result<ResidualSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
