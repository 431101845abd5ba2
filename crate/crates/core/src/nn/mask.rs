//! Input masks over the state variables plus one action unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boolean mask over the `d_s + 1` input units of a context `[s, a]`.
///
/// Units `0..d_s` gate individual state variables; unit `d_s` gates the whole
/// action block. Applying the mask zeroes the gated components, so a masked
/// unit's value can never influence anything computed downstream.
///
/// Networks consume the *encoded* form ([`InputMask::encode_into`]): the
/// zeroed values followed by one keep-bit per unit. The bits let a network
/// distinguish "this input is gated" from "this input happens to be zero",
/// which matters whenever zero is a legitimate data value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputMask {
    units: Vec<bool>,
}

impl InputMask {
    /// All units kept.
    pub fn full(d_s: usize) -> Self {
        InputMask { units: vec![true; d_s + 1] }
    }

    /// All units kept except `unit`.
    pub fn without_unit(d_s: usize, unit: usize) -> Result<Self> {
        if unit > d_s {
            return Err(Error::InvalidArgument(format!(
                "mask unit {unit} out of range for {d_s} state variables + action"
            )));
        }
        let mut units = vec![true; d_s + 1];
        units[unit] = false;
        Ok(InputMask { units })
    }

    pub fn from_units(units: Vec<bool>) -> Result<Self> {
        if !units.iter().any(|u| *u) {
            return Err(Error::InvalidArgument("mask keeps no units".into()));
        }
        Ok(InputMask { units })
    }

    pub fn n_state_vars(&self) -> usize {
        self.units.len() - 1
    }

    pub fn keeps(&self, unit: usize) -> bool {
        self.units[unit]
    }

    pub fn keeps_action(&self) -> bool {
        *self.units.last().unwrap()
    }

    pub fn is_full(&self) -> bool {
        self.units.iter().all(|u| *u)
    }

    /// Writes the masked context into `out`, which must have length
    /// `d_s + d_a`. Gated state components and (if gated) the whole action
    /// block become zero.
    pub fn apply_into(&self, x: &[f64], d_a: usize, out: &mut [f64]) {
        let d_s = self.n_state_vars();
        debug_assert_eq!(x.len(), d_s + d_a);
        debug_assert_eq!(out.len(), d_s + d_a);
        for i in 0..d_s {
            out[i] = if self.units[i] { x[i] } else { 0.0 };
        }
        let act = self.keeps_action();
        for i in 0..d_a {
            out[d_s + i] = if act { x[d_s + i] } else { 0.0 };
        }
    }

    pub fn apply(&self, x: &[f64], d_a: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, d_a, &mut out);
        out
    }

    /// Length of the encoded network input for a `[s, a]` context: the masked
    /// values plus one keep-bit per unit.
    pub fn encoded_len(d_s: usize, d_a: usize) -> usize {
        d_s + d_a + d_s + 1
    }

    /// Writes the network input into `out` (length [`Self::encoded_len`]):
    /// first the masked context values, then the unit keep-bits as 0.0/1.0.
    pub fn encode_into(&self, x: &[f64], d_a: usize, out: &mut [f64]) {
        let d_s = self.n_state_vars();
        debug_assert_eq!(out.len(), Self::encoded_len(d_s, d_a));
        let (vals, bits) = out.split_at_mut(d_s + d_a);
        self.apply_into(x, d_a, vals);
        for (b, u) in bits.iter_mut().zip(&self.units) {
            *b = if *u { 1.0 } else { 0.0 };
        }
    }

    pub fn encode(&self, x: &[f64], d_a: usize) -> Vec<f64> {
        let mut out = vec![0.0; Self::encoded_len(self.n_state_vars(), d_a)];
        self.encode_into(x, d_a, &mut out);
        out
    }
}
