//! Index files (`BIDX`), plaintext or protected.
//!
//! Header: magic, u16 version, u16 payload kind (0 plaintext, 1 protected),
//! u32 n1, u32 dim, u8 fusion id, u8 pairing id, u8 flags, u8 padding.
//! Flags: bit 0 fused templates renormalized, bit 1 training statistics
//! present, bit 2 schedule present. Then the optional schedule (u32 count,
//! u32 per level), the optional statistics (u64 source count, `dim` f32),
//! for protected files the key header (u8 scheme, u16 security level, u16
//! params id, u64 key id, template encoding), and finally u32 tree count
//! followed by the trees in pre-order.
//!
//! Node: u32 body length, then u32 level, u8 has-children, u32 covered
//! count, u64 per covered subject, template. Plaintext templates are `dim`
//! f32 values; protected templates use their own serialized form.

use std::path::Path;

use super::{read_vector, write_atomic, write_vector, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::fusion::{FusionMethod, TrainingStats};
use crate::index::{IndexForest, TreeNode};
use crate::model::{level_count, CascadeSchedule};
use crate::pairing::PairingMethod;
use crate::protection::{
    ProtectedIndex, ProtectedTemplate, Scheme, SecurityLevel, TemplateEncoding,
};

pub const INDEX_MAGIC: [u8; 4] = *b"BIDX";

const PAYLOAD_PLAIN: u16 = 0;
const PAYLOAD_PROTECTED: u16 = 1;

const FLAG_RENORMALIZED: u8 = 1;
const FLAG_STATS: u8 = 2;
const FLAG_SCHEDULE: u8 = 4;

/// Either kind of persisted index.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyIndex {
    Plain(IndexForest),
    Protected(ProtectedIndex),
}

struct Header {
    n1: usize,
    dim: usize,
    fusion: FusionMethod,
    pairing: PairingMethod,
    renormalized: bool,
    schedule: Option<CascadeSchedule>,
    stats: Option<TrainingStats>,
}

fn write_header(enc: &mut Encoder, kind: u16, h: &Header) -> Result<()> {
    enc.bytes(&INDEX_MAGIC);
    enc.u16(super::FORMAT_VERSION);
    enc.u16(kind);
    enc.len_u32(h.n1)?;
    enc.len_u32(h.dim)?;
    enc.u8(h.fusion.id());
    enc.u8(h.pairing.id());
    let mut flags = 0;
    if h.renormalized {
        flags |= FLAG_RENORMALIZED;
    }
    if h.stats.is_some() {
        flags |= FLAG_STATS;
    }
    if h.schedule.is_some() {
        flags |= FLAG_SCHEDULE;
    }
    enc.u8(flags);
    enc.u8(0);
    if let Some(s) = &h.schedule {
        enc.len_u32(s.levels())?;
        for &k in s.selections() {
            enc.len_u32(k)?;
        }
    }
    if let Some(stats) = &h.stats {
        if stats.dim() != h.dim {
            return Err(Error::dims(h.dim, stats.dim()));
        }
        enc.u64(stats.source_count as u64);
        write_vector(enc, &stats.mu);
    }
    Ok(())
}

fn read_header(dec: &mut Decoder<'_>) -> Result<(u16, Header)> {
    dec.magic(INDEX_MAGIC)?;
    dec.version()?;
    let kind = dec.u16()?;
    if kind > PAYLOAD_PROTECTED {
        return Err(Error::Corrupt(format!("unknown payload kind {kind}")));
    }
    let n1 = dec.u32()? as usize;
    let dim = dec.u32()? as usize;
    if !crate::model::is_valid_n1(n1) || dim == 0 {
        return Err(Error::Corrupt(format!("invalid header: n1 = {n1}, dim = {dim}")));
    }
    let fusion = FusionMethod::from_id(dec.u8()?)
        .ok_or_else(|| Error::Corrupt("unknown fusion id".into()))?;
    let pairing = PairingMethod::from_id(dec.u8()?)
        .ok_or_else(|| Error::Corrupt("unknown pairing id".into()))?;
    let flags = dec.u8()?;
    if flags & !(FLAG_RENORMALIZED | FLAG_STATS | FLAG_SCHEDULE) != 0 {
        return Err(Error::Corrupt(format!("unknown flags {flags:#x}")));
    }
    let _pad = dec.u8()?;
    let schedule = if flags & FLAG_SCHEDULE != 0 {
        let count = dec.u32()? as usize;
        if count != level_count(n1) {
            return Err(Error::Corrupt("schedule length does not match n1".into()));
        }
        let selections =
            (0..count).map(|_| dec.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        Some(CascadeSchedule::new(n1, selections).map_err(|e| Error::Corrupt(e.to_string()))?)
    } else {
        None
    };
    let stats = if flags & FLAG_STATS != 0 {
        let source_count = dec.u64()? as usize;
        Some(TrainingStats { mu: read_vector(dec, dim)?, source_count })
    } else {
        None
    };
    let header = Header {
        n1,
        dim,
        fusion,
        pairing,
        renormalized: flags & FLAG_RENORMALIZED != 0,
        schedule,
        stats,
    };
    Ok((kind, header))
}

fn write_tree<T>(
    enc: &mut Encoder,
    node: &TreeNode<T>,
    template: &mut impl FnMut(&mut Encoder, &T),
) -> Result<()> {
    let mut body = Encoder::default();
    body.u32(node.level);
    body.u8(node.children.is_some() as u8);
    body.len_u32(node.covered.len())?;
    for &id in &node.covered {
        body.u64(id);
    }
    template(&mut body, &node.template);
    enc.len_u32(body.buf.len())?;
    enc.bytes(&body.buf);
    if let Some(c) = &node.children {
        write_tree(enc, &c[0], template)?;
        write_tree(enc, &c[1], template)?;
    }
    Ok(())
}

fn read_tree<T>(
    dec: &mut Decoder<'_>,
    depth_left: usize,
    template: &mut impl FnMut(&mut Decoder<'_>) -> Result<T>,
) -> Result<TreeNode<T>> {
    let len = dec.u32()? as usize;
    let mut body = Decoder::new(dec.take(len)?);
    let level = body.u32()?;
    let has_children = match body.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Corrupt(format!("bad child flag {v}"))),
    };
    let count = body.u32()? as usize;
    if count > len / 8 {
        return Err(Error::Truncated);
    }
    let covered = (0..count).map(|_| body.u64()).collect::<Result<Vec<_>>>()?;
    let value = template(&mut body)?;
    body.finish()?;
    let children = if has_children {
        if depth_left == 0 {
            return Err(Error::Corrupt("tree is deeper than n1 allows".into()));
        }
        let left = read_tree(dec, depth_left - 1, template)?;
        let right = read_tree(dec, depth_left - 1, template)?;
        Some(Box::new([left, right]))
    } else {
        None
    };
    if covered.is_empty() {
        return Err(Error::Corrupt("node covers no subject".into()));
    }
    Ok(TreeNode { level, template: value, covered, children })
}

fn write_trees<T>(
    enc: &mut Encoder,
    trees: &[TreeNode<T>],
    mut template: impl FnMut(&mut Encoder, &T),
) -> Result<()> {
    enc.len_u32(trees.len())?;
    for t in trees {
        write_tree(enc, t, &mut template)?;
    }
    Ok(())
}

fn read_trees<T>(
    dec: &mut Decoder<'_>,
    n1: usize,
    mut template: impl FnMut(&mut Decoder<'_>) -> Result<T>,
) -> Result<Vec<TreeNode<T>>> {
    let count = dec.u32()? as usize;
    let depth = level_count(n1) - 1;
    let mut trees = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        trees.push(read_tree(dec, depth, &mut template)?);
    }
    Ok(trees)
}

fn encode_plain(forest: &IndexForest) -> Result<Vec<u8>> {
    forest.validate()?;
    let mut enc = Encoder::default();
    write_header(
        &mut enc,
        PAYLOAD_PLAIN,
        &Header {
            n1: forest.n1,
            dim: forest.dim,
            fusion: forest.fusion,
            pairing: forest.pairing,
            renormalized: forest.renormalized,
            schedule: forest.schedule.clone(),
            stats: forest.training_stats.clone(),
        },
    )?;
    write_trees(&mut enc, &forest.trees, write_vector)?;
    Ok(enc.buf)
}

fn decode_plain(dec: &mut Decoder<'_>, h: Header) -> Result<IndexForest> {
    let dim = h.dim;
    let trees = read_trees(dec, h.n1, |d| read_vector(d, dim))?;
    dec.finish()?;
    let forest = IndexForest {
        trees,
        n1: h.n1,
        dim: h.dim,
        fusion: h.fusion,
        pairing: h.pairing,
        training_stats: h.stats,
        renormalized: h.renormalized,
        schedule: h.schedule,
    };
    forest.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(forest)
}

fn encode_protected(index: &ProtectedIndex) -> Result<Vec<u8>> {
    index.validate()?;
    let mut enc = Encoder::default();
    write_header(
        &mut enc,
        PAYLOAD_PROTECTED,
        &Header {
            n1: index.n1,
            dim: index.dim,
            fusion: index.fusion,
            pairing: index.pairing,
            renormalized: false,
            schedule: index.schedule.clone(),
            stats: None,
        },
    )?;
    enc.u8(index.scheme.id());
    enc.u16(index.security_level.bits());
    enc.u16(index.params_id);
    enc.u64(index.key_id);
    index.encoding.write(&mut enc)?;
    write_trees(&mut enc, &index.trees, |e, t: &ProtectedTemplate| t.write(e))?;
    Ok(enc.buf)
}

fn decode_protected(dec: &mut Decoder<'_>, h: Header) -> Result<ProtectedIndex> {
    let scheme =
        Scheme::from_id(dec.u8()?).ok_or_else(|| Error::Corrupt("unknown scheme id".into()))?;
    let security_level =
        SecurityLevel::from_bits(dec.u16()?).map_err(|e| Error::Corrupt(e.to_string()))?;
    let params_id = dec.u16()?;
    let key_id = dec.u64()?;
    let encoding = TemplateEncoding::read(dec)?;
    let trees = read_trees(dec, h.n1, ProtectedTemplate::read)?;
    dec.finish()?;
    let index = ProtectedIndex {
        trees,
        n1: h.n1,
        dim: h.dim,
        fusion: h.fusion,
        pairing: h.pairing,
        schedule: h.schedule,
        scheme,
        security_level,
        params_id,
        key_id,
        encoding,
    };
    index.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(index)
}

pub fn write_index(forest: &IndexForest, path: &Path) -> Result<()> {
    write_atomic(path, &encode_plain(forest)?)
}

pub fn write_protected_index(index: &ProtectedIndex, path: &Path) -> Result<()> {
    write_atomic(path, &encode_protected(index)?)
}

pub fn read_any_index(path: &Path) -> Result<AnyIndex> {
    let data = std::fs::read(path)?;
    let mut dec = Decoder::new(&data);
    let (kind, header) = read_header(&mut dec)?;
    match kind {
        PAYLOAD_PLAIN => decode_plain(&mut dec, header).map(AnyIndex::Plain),
        _ => decode_protected(&mut dec, header).map(AnyIndex::Protected),
    }
}

/// Reads a plaintext index; a protected file is a scheme mismatch.
pub fn read_index(path: &Path) -> Result<IndexForest> {
    match read_any_index(path)? {
        AnyIndex::Plain(f) => Ok(f),
        AnyIndex::Protected(p) => Err(Error::SchemeMismatch {
            expected: "unprotected index".into(),
            found: p.scheme.to_string(),
        }),
    }
}

pub fn read_protected_index(path: &Path) -> Result<ProtectedIndex> {
    match read_any_index(path)? {
        AnyIndex::Protected(p) => Ok(p),
        AnyIndex::Plain(_) => Err(Error::SchemeMismatch {
            expected: "protected index".into(),
            found: "unprotected index".into(),
        }),
    }
}
