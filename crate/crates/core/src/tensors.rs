//! Flat gradient/mask vectors, the fixed-point group codec, and the `CGV1`
//! payload format.
//!
//! Two arithmetic domains are supported. `Float32` uses IEEE addition and is
//! subject to rounding when masks are added and removed. `Fixed64` stores
//! residues in Z/2^64 so masked sums cancel exactly and masks can be drawn
//! uniformly from the whole group.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAYLOAD_MAGIC: &[u8; 4] = b"CGV1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("domain mismatch: {left} vs {right}")]
    DomainMismatch { left: Domain, right: Domain },
    #[error("value {value} at index {index} exceeds clamp {clamp}")]
    OutOfRange { index: usize, value: f64, clamp: f64 },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid fixed-point config: {0}")]
    InvalidConfig(String),
    #[error("malformed payload: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Float32,
    Fixed64,
}

impl Domain {
    fn tag(self) -> u8 {
        match self {
            Domain::Float32 => 0,
            Domain::Fixed64 => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Float32 => f.write_str("float32"),
            Domain::Fixed64 => f.write_str("fixed64"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub frac_bits: u8,
    pub clamp_abs: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            frac_bits: 24,
            clamp_abs: 1024.0,
        }
    }
}

impl FixedPointConfig {
    pub fn new(frac_bits: u8, clamp_abs: f64) -> Result<Self, TensorError> {
        let cfg = Self {
            frac_bits,
            clamp_abs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if !(1..=52).contains(&self.frac_bits) {
            return Err(TensorError::InvalidConfig(format!(
                "frac_bits must be in 1..=52, got {}",
                self.frac_bits
            )));
        }
        if !(self.clamp_abs.is_finite() && self.clamp_abs > 0.0) {
            return Err(TensorError::InvalidConfig(format!(
                "clamp_abs must be positive and finite, got {}",
                self.clamp_abs
            )));
        }
        Ok(())
    }

    /// Checks that `participants` clamped values can be summed without
    /// leaving the signed range: N * clamp_abs * 2^frac_bits < 2^62.
    pub fn validate_headroom(&self, participants: usize) -> Result<(), TensorError> {
        self.validate()?;
        let bound = participants as f64 * self.clamp_abs * self.scale();
        if bound >= 2f64.powi(62) {
            return Err(TensorError::InvalidConfig(format!(
                "{participants} participants * clamp {} * 2^{} overflows the 2^62 headroom",
                self.clamp_abs, self.frac_bits
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Quantization step 2^-frac_bits.
    pub fn step(&self) -> f64 {
        1.0 / self.scale()
    }
}

#[derive(Clone, PartialEq)]
enum Lanes {
    Float32(Vec<f32>),
    Fixed64(Vec<u64>),
}

/// A flat vector of per-layer gradient, mask, or weight values.
///
/// Values are immutable once built; every operation returns a new vector.
#[derive(Clone, PartialEq)]
pub struct GradVector {
    lanes: Lanes,
    shape: Vec<usize>,
    frac_bits: u8,
}

impl fmt::Debug for GradVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = 8.min(self.len());
        let preview: Vec<String> = match &self.lanes {
            Lanes::Float32(v) => v[..head].iter().map(|x| x.to_string()).collect(),
            Lanes::Fixed64(v) => v[..head].iter().map(|x| x.to_string()).collect(),
        };
        f.debug_struct("GradVector")
            .field("domain", &self.domain())
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<(), TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape("shape has no layers".into()));
    }
    let total: usize = shape.iter().sum();
    if total == 0 {
        return Err(TensorError::InvalidShape("total length is zero".into()));
    }
    if total != len {
        return Err(TensorError::InvalidShape(format!(
            "shape sums to {total} but {len} values were given"
        )));
    }
    Ok(())
}

impl GradVector {
    pub fn from_f32(values: Vec<f32>, shape: Vec<usize>) -> Result<Self, TensorError> {
        check_shape(&shape, values.len())?;
        Ok(Self {
            lanes: Lanes::Float32(values),
            shape,
            frac_bits: 0,
        })
    }

    /// Builds a `Fixed64` vector from raw residues. `frac_bits` records the
    /// scale the residues were encoded with.
    pub fn from_residues(
        residues: Vec<u64>,
        shape: Vec<usize>,
        frac_bits: u8,
    ) -> Result<Self, TensorError> {
        check_shape(&shape, residues.len())?;
        Ok(Self {
            lanes: Lanes::Fixed64(residues),
            shape,
            frac_bits,
        })
    }

    pub fn zeros(domain: Domain, shape: Vec<usize>, frac_bits: u8) -> Result<Self, TensorError> {
        let len = shape.iter().sum();
        match domain {
            Domain::Float32 => Self::from_f32(vec![0.0; len], shape),
            Domain::Fixed64 => Self::from_residues(vec![0; len], shape, frac_bits),
        }
    }

    /// Converts real values into the requested domain. Float32 rounds to the
    /// nearest f32; Fixed64 goes through [`encode_fixed`].
    pub fn from_reals(
        values: &[f64],
        shape: Vec<usize>,
        domain: Domain,
        cfg: &FixedPointConfig,
    ) -> Result<Self, TensorError> {
        match domain {
            Domain::Float32 => Self::from_f32(values.iter().map(|&x| x as f32).collect(), shape),
            Domain::Fixed64 => encode_fixed(values, shape, cfg),
        }
    }

    pub fn domain(&self) -> Domain {
        match self.lanes {
            Lanes::Float32(_) => Domain::Float32,
            Lanes::Fixed64(_) => Domain::Fixed64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn len(&self) -> usize {
        match &self.lanes {
            Lanes::Float32(v) => v.len(),
            Lanes::Fixed64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.lanes {
            Lanes::Float32(v) => Some(v),
            Lanes::Fixed64(_) => None,
        }
    }

    pub fn residues(&self) -> Option<&[u64]> {
        match &self.lanes {
            Lanes::Fixed64(v) => Some(v),
            Lanes::Float32(_) => None,
        }
    }

    /// Real-valued view: f32 lanes widened, or fixed-point lanes decoded.
    pub fn to_reals(&self) -> Vec<f64> {
        match &self.lanes {
            Lanes::Float32(v) => v.iter().map(|&x| x as f64).collect(),
            Lanes::Fixed64(v) => {
                let scale = (1u64 << self.frac_bits) as f64;
                v.iter().map(|&r| r as i64 as f64 / scale).collect()
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.lanes {
            Lanes::Float32(v) => v.iter().all(|&x| x == 0.0),
            Lanes::Fixed64(v) => v.iter().all(|&x| x == 0),
        }
    }

    /// Largest absolute lane value, in real units.
    pub fn max_abs(&self) -> f64 {
        self.to_reals().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn check_compatible(&self, other: &Self) -> Result<(), TensorError> {
        if self.domain() != other.domain() {
            return Err(TensorError::DomainMismatch {
                left: self.domain(),
                right: other.domain(),
            });
        }
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Lane-wise sum. Fixed64 wraps modulo 2^64.
    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.check_compatible(other)?;
        let lanes = match (&self.lanes, &other.lanes) {
            (Lanes::Float32(a), Lanes::Float32(b)) => {
                Lanes::Float32(a.iter().zip(b).map(|(x, y)| x + y).collect())
            }
            (Lanes::Fixed64(a), Lanes::Fixed64(b)) => {
                Lanes::Fixed64(a.iter().zip(b).map(|(x, y)| x.wrapping_add(*y)).collect())
            }
            _ => unreachable!("domains checked above"),
        };
        Ok(Self {
            lanes,
            shape: self.shape.clone(),
            frac_bits: self.frac_bits,
        })
    }

    pub fn negate(&self) -> Self {
        let lanes = match &self.lanes {
            Lanes::Float32(v) => Lanes::Float32(v.iter().map(|x| -x).collect()),
            Lanes::Fixed64(v) => Lanes::Fixed64(v.iter().map(|x| x.wrapping_neg()).collect()),
        };
        Self {
            lanes,
            shape: self.shape.clone(),
            frac_bits: self.frac_bits,
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(PAYLOAD_MAGIC);
        out.push(self.domain().tag());
        out.push(match self.domain() {
            Domain::Float32 => 0,
            Domain::Fixed64 => self.frac_bits,
        });
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &len in &self.shape {
            out.extend_from_slice(&(len as u64).to_le_bytes());
        }
        match &self.lanes {
            Lanes::Float32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Lanes::Fixed64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Size in bytes of [`GradVector::serialize`]'s output.
    pub fn wire_len(&self) -> usize {
        payload_len(self.domain(), &self.shape)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut rd = Reader::new(bytes);
        let magic = rd.take(4)?;
        if magic != PAYLOAD_MAGIC {
            return Err(TensorError::Format(format!("bad magic {magic:02x?}")));
        }
        let domain = match rd.u8()? {
            0 => Domain::Float32,
            1 => Domain::Fixed64,
            other => return Err(TensorError::Format(format!("unknown domain tag {other}"))),
        };
        let frac_bits = rd.u8()?;
        if domain == Domain::Float32 && frac_bits != 0 {
            return Err(TensorError::Format("float32 payload with nonzero frac_bits".into()));
        }
        let layers = rd.u32()? as usize;
        if layers == 0 {
            return Err(TensorError::Format("zero layers".into()));
        }
        let mut shape = Vec::with_capacity(layers.min(1024));
        let mut total: usize = 0;
        for _ in 0..layers {
            let len = usize::try_from(rd.u64()?)
                .map_err(|_| TensorError::Format("layer length overflows usize".into()))?;
            total = total
                .checked_add(len)
                .ok_or_else(|| TensorError::Format("total length overflows".into()))?;
            shape.push(len);
        }
        let lane_bytes = match domain {
            Domain::Float32 => 4,
            Domain::Fixed64 => 8,
        };
        let body = total
            .checked_mul(lane_bytes)
            .ok_or_else(|| TensorError::Format("payload size overflows".into()))?;
        if rd.remaining() != body {
            return Err(TensorError::Format(format!(
                "expected {body} lane bytes, found {}",
                rd.remaining()
            )));
        }
        let v = match domain {
            Domain::Float32 => {
                let lanes = rd
                    .rest()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Self::from_f32(lanes, shape)
            }
            Domain::Fixed64 => {
                let lanes = rd
                    .rest()
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Self::from_residues(lanes, shape, frac_bits)
            }
        };
        v.map_err(|e| TensorError::Format(e.to_string()))
    }
}

/// Serialized size of a vector with the given domain and shape.
pub fn payload_len(domain: Domain, shape: &[usize]) -> usize {
    let lane = match domain {
        Domain::Float32 => 4,
        Domain::Fixed64 => 8,
    };
    4 + 1 + 1 + 4 + 8 * shape.len() + lane * shape.iter().sum::<usize>()
}

/// Folds vectors left to right in the order given.
pub fn fold<'a, I>(vectors: I) -> Result<Option<GradVector>, TensorError>
where
    I: IntoIterator<Item = &'a GradVector>,
{
    let mut acc: Option<GradVector> = None;
    for v in vectors {
        acc = Some(match acc {
            None => v.clone(),
            Some(a) => a.add(v)?,
        });
    }
    Ok(acc)
}

pub fn encode_fixed(
    values: &[f64],
    shape: Vec<usize>,
    cfg: &FixedPointConfig,
) -> Result<GradVector, TensorError> {
    cfg.validate()?;
    let scale = cfg.scale();
    let residues = values
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            if !x.is_finite() || x.abs() > cfg.clamp_abs {
                return Err(TensorError::OutOfRange {
                    index,
                    value: x,
                    clamp: cfg.clamp_abs,
                });
            }
            Ok((x * scale).round() as i64 as u64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    GradVector::from_residues(residues, shape, cfg.frac_bits)
}

/// Decodes residues as signed two's-complement values scaled by
/// 2^-frac_bits. The caller guarantees that the aggregate did not overflow.
pub fn decode_fixed(v: &GradVector, cfg: &FixedPointConfig) -> Result<Vec<f64>, TensorError> {
    let residues = v.residues().ok_or(TensorError::DomainMismatch {
        left: v.domain(),
        right: Domain::Fixed64,
    })?;
    let scale = cfg.scale();
    Ok(residues.iter().map(|&r| r as i64 as f64 / scale).collect())
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.buf.len() - self.pos < n {
            return Err(TensorError::Format(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, TensorError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, TensorError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fixed(v: Vec<u64>) -> GradVector {
        let n = v.len();
        GradVector::from_residues(v, vec![n], 24).unwrap()
    }

    #[test]
    fn fixed_inverse_cancels() {
        let x = 0x1234_5678_9abc_def0u64;
        let sum = fixed(vec![x]).add(&fixed(vec![x.wrapping_neg()])).unwrap();
        assert_eq!(sum.residues().unwrap(), &[0]);
    }

    #[test]
    fn float_add_exact_fractions() {
        let a = GradVector::from_f32(vec![1.5, -2.0], vec![2]).unwrap();
        let b = GradVector::from_f32(vec![0.5, 2.0], vec![2]).unwrap();
        assert_eq!(a.add(&b).unwrap().as_f32().unwrap(), &[2.0, 0.0]);
    }

    #[test]
    fn add_rejects_mismatch() {
        let a = GradVector::from_f32(vec![1.0, 2.0], vec![2]).unwrap();
        let b = GradVector::from_f32(vec![1.0, 2.0], vec![1, 1]).unwrap();
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
        let c = fixed(vec![1, 2]);
        assert!(matches!(a.add(&c), Err(TensorError::DomainMismatch { .. })));
    }

    #[test]
    fn negate_examples() {
        assert_eq!(fixed(vec![5]).negate().residues().unwrap(), &[u64::MAX - 4]);
        let z = GradVector::from_f32(vec![0.0], vec![1]).unwrap();
        let nz = z.negate();
        assert!(nz.as_f32().unwrap()[0].is_sign_negative());
        let s = z.add(&nz).unwrap();
        assert_eq!(s.as_f32().unwrap()[0].to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn add_negate_is_zero_for_random_vectors() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let f: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1e6..1e6)).collect();
        let v = GradVector::from_f32(f, vec![1000]).unwrap();
        assert_eq!(v.add(&v.negate()).unwrap().max_abs(), 0.0);
        let r: Vec<u64> = (0..1000).map(|_| rng.gen()).collect();
        let v = fixed(r);
        assert!(v.add(&v.negate()).unwrap().is_zero());
    }

    #[test]
    fn encode_examples() {
        let cfg = FixedPointConfig::default();
        let v = encode_fixed(&[1.0], vec![1], &cfg).unwrap();
        assert_eq!(v.residues().unwrap(), &[16_777_216]);
        let v = encode_fixed(&[-0.5], vec![1], &cfg).unwrap();
        assert_eq!(v.residues().unwrap(), &[0u64.wrapping_sub(8_388_608)]);
    }

    #[test]
    fn encode_out_of_range_names_index() {
        let cfg = FixedPointConfig::new(24, 10.0).unwrap();
        let err = encode_fixed(&[0.0, 1.0, 10.5], vec![3], &cfg).unwrap_err();
        assert!(matches!(err, TensorError::OutOfRange { index: 2, .. }));
        let err = encode_fixed(&[f64::NAN], vec![1], &cfg).unwrap_err();
        assert!(matches!(err, TensorError::OutOfRange { index: 0, .. }));
    }

    #[test]
    fn quantization_sweep() {
        let cfg = FixedPointConfig::new(24, 10.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-10.0..=10.0)).collect();
        let back = decode_fixed(&encode_fixed(&xs, vec![1000], &cfg).unwrap(), &cfg).unwrap();
        let err = xs.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 2f64.powi(-25), "max error {err}");
    }

    #[test]
    fn config_validation() {
        assert!(FixedPointConfig::new(0, 1.0).is_err());
        assert!(FixedPointConfig::new(53, 1.0).is_err());
        assert!(FixedPointConfig::new(52, 1.0).is_ok());
        let cfg = FixedPointConfig::new(24, 1024.0).unwrap();
        assert!(cfg.validate_headroom(64).is_ok());
        // 2^28 * 2^10 * 2^24 = 2^62
        assert!(cfg.validate_headroom(1 << 28).is_err());
    }

    #[test]
    fn payload_layout_is_bit_exact() {
        let v = GradVector::from_residues(vec![1, u64::MAX], vec![1, 1], 24).unwrap();
        let bytes = v.serialize();
        let mut expected = b"CGV1".to_vec();
        expected.extend_from_slice(&[1, 24]);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), v.wire_len());

        let f = GradVector::from_f32(vec![1.0], vec![1]).unwrap();
        let bytes = f.serialize();
        assert_eq!(&bytes[4..6], &[0, 0]);
        assert_eq!(&bytes[bytes.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn deserialize_rejects_garbage() {
        assert!(matches!(GradVector::deserialize(&[]), Err(TensorError::Format(_))));
        let mut bytes = fixed(vec![3]).serialize();
        bytes[0] = b'X';
        assert!(matches!(GradVector::deserialize(&bytes), Err(TensorError::Format(_))));
        let bytes = fixed(vec![3, 4]).serialize();
        assert!(GradVector::deserialize(&bytes[..bytes.len() - 1]).is_err());
        let mut bytes = fixed(vec![3]).serialize();
        bytes[4] = 9;
        assert!(GradVector::deserialize(&bytes).is_err());
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(GradVector::from_f32(vec![], vec![]).is_err());
        assert!(GradVector::from_f32(vec![], vec![0]).is_err());
        assert!(GradVector::from_f32(vec![1.0], vec![2]).is_err());
    }

    fn arb_vector() -> impl Strategy<Value = GradVector> {
        prop::collection::vec(1usize..6, 1..4).prop_flat_map(|shape| {
            let total: usize = shape.iter().sum();
            prop_oneof![
                prop::collection::vec(any::<u64>(), total).prop_map({
                    let shape = shape.clone();
                    move |r| GradVector::from_residues(r, shape.clone(), 20).unwrap()
                }),
                prop::collection::vec(any::<f32>(), total).prop_map({
                    let shape = shape.clone();
                    move |f| GradVector::from_f32(f, shape.clone()).unwrap()
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(v in arb_vector()) {
            let back = GradVector::deserialize(&v.serialize()).unwrap();
            // compare bitwise so NaN payloads count as equal
            prop_assert_eq!(back.serialize(), v.serialize());
        }

        #[test]
        fn fixed_fold_order_independent(
            lanes in prop::collection::vec(prop::collection::vec(any::<u64>(), 4), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let vs: Vec<GradVector> = lanes.into_iter().map(fixed).collect();
            let forward = fold(&vs).unwrap().unwrap();
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
            prop_assert_eq!(fold(&shuffled).unwrap().unwrap(), forward);
        }

        #[test]
        fn quantization_error_bound(x in -1000.0f64..1000.0, bits in 1u8..=40) {
            let cfg = FixedPointConfig::new(bits, 1000.0).unwrap();
            let back = decode_fixed(&encode_fixed(&[x], vec![1], &cfg).unwrap(), &cfg).unwrap();
            prop_assert!((back[0] - x).abs() <= 2f64.powi(-(bits as i32 + 1)));
        }
    }
}
