//! Scalar element trait so the tape works in `f32` (training) or `f64`
//! (gradient checks, bit-exact resume tests).

use std::fmt::{Debug, Display};

pub trait Elem:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Byte width, doubles as the checkpoint dtype tag.
    const WIDTH: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn append_le(buf: &mut Vec<u8>, x: Self);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const WIDTH: u8 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn append_le(buf: &mut Vec<u8>, x: Self) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Elem for f64 {
    const WIDTH: u8 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn append_le(buf: &mut Vec<u8>, x: Self) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
