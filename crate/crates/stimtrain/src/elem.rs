//! Floating-point element trait for the network and loss kernels.
//!
//! Everything numeric is generic over [`Elem`] so the same code runs in f32
//! for training and in f64 for finite-difference verification.

use ndarray::NdFloat;

pub trait Elem: NdFloat + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
