//! PRM1 container for sampled feature-map weights.
//!
//! Layout (little-endian): magic `PRM1`, u32 version (= 1), u8 kind tag,
//! u8 activation tag (followed by u64 knot count and `(x, y)` f64 pairs for
//! tables), u64 seed, then per kind:
//! - RF: u64 k, n, d; `V` row-major.
//! - DRF: u64 depth, k, n, d; f64 beta; layers row-major.
//! - RAF / ReLU-RAF: u64 d; `W` row-major.
//! - QKV: u64 d, d'; `W_Q`, `W_K`, `W_V` row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{Activation, AttentionParams, DrfParams, FeatureMap, MapKind, PiecewiseLinear, QkvWeights, RfParams, ScoreNorm};
use crate::data::emb::{read_array, short};
use crate::error::{Result, WsError};

pub const MAGIC: [u8; 4] = *b"PRM1";
pub const VERSION: u32 = 1;
const NO_ACTIVATION: u8 = 255;

pub(crate) fn kind_tag(kind: MapKind) -> u8 {
    match kind {
        MapKind::Rf => 0,
        MapKind::Drf => 1,
        MapKind::Raf => 2,
        MapKind::ReluRaf => 3,
        MapKind::Qkv => 4,
    }
}

pub(crate) fn kind_from_tag(tag: u8) -> Result<MapKind> {
    MapKind::ALL
        .into_iter()
        .find(|k| kind_tag(*k) == tag)
        .ok_or_else(|| WsError::InvalidConfig(format!("unknown map kind tag {tag}")))
}

fn put_u64(w: &mut impl Write, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

fn put_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<usize> {
    let v = u64::from_le_bytes(read_array(r)?);
    usize::try_from(v).map_err(|_| WsError::DimMismatch(format!("dimension {v} too large")))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

fn get_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let len = rows
        .checked_mul(cols)
        .and_then(|l| l.checked_mul(8))
        .ok_or_else(|| WsError::DimMismatch(format!("{rows}x{cols} matrix too large")))?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(short)?;
    let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

fn put_activation(w: &mut impl Write, act: Option<&Activation>) -> Result<()> {
    match act {
        None => w.write_all(&[NO_ACTIVATION])?,
        Some(Activation::Relu) => w.write_all(&[0])?,
        Some(Activation::Identity) => w.write_all(&[1])?,
        Some(Activation::Tanh) => w.write_all(&[2])?,
        Some(Activation::Table(t)) => {
            w.write_all(&[3])?;
            let knots: Vec<_> = t.knots().collect();
            put_u64(w, knots.len())?;
            for (x, y) in knots {
                w.write_all(&x.to_le_bytes())?;
                w.write_all(&y.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn get_activation(r: &mut impl Read) -> Result<Option<Activation>> {
    Ok(match read_array::<1>(r)?[0] {
        NO_ACTIVATION => None,
        0 => Some(Activation::Relu),
        1 => Some(Activation::Identity),
        2 => Some(Activation::Tanh),
        3 => {
            let count = get_u64(r)?;
            let knots = (0..count).map(|_| Ok((get_f64(r)?, get_f64(r)?))).collect::<Result<Vec<_>>>()?;
            Some(Activation::Table(PiecewiseLinear::new(knots)?))
        }
        t => return Err(WsError::InvalidConfig(format!("unknown activation tag {t}"))),
    })
}

pub fn write_to(w: &mut impl Write, map: &FeatureMap) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind_tag(map.kind())])?;
    put_activation(w, map.activation())?;
    w.write_all(&map.seed().to_le_bytes())?;
    match map {
        FeatureMap::Rf(p) => {
            put_u64(w, p.k)?;
            put_u64(w, p.n)?;
            put_u64(w, p.d)?;
            put_matrix(w, &p.v)?;
        }
        FeatureMap::Drf(p) => {
            put_u64(w, p.depth())?;
            put_u64(w, p.k)?;
            put_u64(w, p.n)?;
            put_u64(w, p.d)?;
            w.write_all(&p.beta.to_le_bytes())?;
            for layer in &p.layers {
                put_matrix(w, layer)?;
            }
        }
        FeatureMap::Attention { params, .. } => match &params.qkv {
            None => {
                put_u64(w, params.d)?;
                put_matrix(w, &params.score)?;
            }
            Some(q) => {
                put_u64(w, params.d)?;
                put_u64(w, q.d_inner)?;
                put_matrix(w, &q.wq)?;
                put_matrix(w, &q.wk)?;
                put_matrix(w, &q.wv)?;
            }
        },
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<FeatureMap> {
    let magic = read_array::<4>(r)?;
    if magic != MAGIC {
        return Err(WsError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(WsError::VersionUnsupported(version));
    }
    let kind = kind_from_tag(read_array::<1>(r)?[0])?;
    let activation = get_activation(r)?;
    let seed = u64::from_le_bytes(read_array(r)?);
    let need_act = || activation.clone().ok_or_else(|| WsError::InvalidConfig("missing activation".into()));
    Ok(match kind {
        MapKind::Rf => {
            let (k, n, d) = (get_u64(r)?, get_u64(r)?, get_u64(r)?);
            let v = get_matrix(r, k, n * d)?;
            FeatureMap::Rf(RfParams { k, n, d, v, activation: need_act()?, seed })
        }
        MapKind::Drf => {
            let (depth, k, n, d) = (get_u64(r)?, get_u64(r)?, get_u64(r)?, get_u64(r)?);
            let beta = get_f64(r)?;
            let layers = (0..depth)
                .map(|l| get_matrix(r, k, if l == 0 { n * d } else { k }))
                .collect::<Result<Vec<_>>>()?;
            FeatureMap::Drf(DrfParams { k, n, d, beta, layers, activation: need_act()?, seed })
        }
        MapKind::Raf | MapKind::ReluRaf => {
            let d = get_u64(r)?;
            let params = AttentionParams::from_raf_weight(get_matrix(r, d, d)?, seed)?;
            let norm = if kind == MapKind::Raf { ScoreNorm::Softmax } else { ScoreNorm::Relu };
            FeatureMap::Attention { params, norm }
        }
        MapKind::Qkv => {
            let (d, d_inner) = (get_u64(r)?, get_u64(r)?);
            let wq = get_matrix(r, d_inner, d)?;
            let wk = get_matrix(r, d_inner, d)?;
            let wv = get_matrix(r, d_inner, d)?;
            FeatureMap::Attention {
                params: AttentionParams::from_qkv(QkvWeights { d_inner, wq, wk, wv }, seed),
                norm: ScoreNorm::Softmax,
            }
        }
    })
}

pub fn write(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<FeatureMap> {
    read_from(&mut BufReader::new(File::open(path)?))
}

/// FNV-1a hasher that consumes a byte stream.
struct Fnv(u64);

impl Write for Fnv {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        for &b in buf {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// 64-bit FNV-1a hash of the PRM1 serialization.
pub fn fingerprint(map: &FeatureMap) -> u64 {
    let mut h = Fnv(0xcbf2_9ce4_8422_2325);
    write_to(&mut h, map).expect("hashing never fails");
    h.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmaps::MapSpec;

    #[test]
    fn round_trip_every_kind() {
        let table = Activation::Table(PiecewiseLinear::new(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 1.5)]).unwrap());
        let specs = [
            MapSpec::new(MapKind::Rf, 2, 3).with_k(4).with_activation(table),
            MapSpec::new(MapKind::Drf, 2, 3).with_k(4).with_depth(2),
            MapSpec::new(MapKind::Raf, 2, 3),
            MapSpec::new(MapKind::ReluRaf, 2, 3),
            MapSpec::new(MapKind::Qkv, 2, 3).with_d_inner(2),
        ];
        for spec in &specs {
            let map = FeatureMap::sample(spec, 77).unwrap();
            let mut buf = Vec::new();
            write_to(&mut buf, &map).unwrap();
            let back = read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, map);
            assert_eq!(fingerprint(&back), fingerprint(&map));
        }
    }

    #[test]
    fn fingerprint_depends_on_weights() {
        let spec = MapSpec::new(MapKind::Raf, 2, 3);
        let a = FeatureMap::sample(&spec, 1).unwrap();
        let b = FeatureMap::sample(&spec, 2).unwrap();
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn rejects_foreign_and_truncated_input() {
        assert!(matches!(read_from(&mut &b"EMB1\x01\0\0\0"[..]), Err(WsError::BadMagic(_))));
        let map = FeatureMap::sample(&MapSpec::new(MapKind::Raf, 2, 3), 1).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &map).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_from(&mut buf.as_slice()), Err(WsError::ShortRead)));
    }
}
