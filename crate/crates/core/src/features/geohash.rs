//! Geohash encoding and base-32 level normalization.

use crate::error::{Error, Result};

pub const ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const MAX_PRECISION: usize = 12;

/// Standard Geohash of a point: longitude and latitude ranges are bisected
/// alternately (longitude first), each bisection emitting 1 when the
/// coordinate lies in the upper half, and the bit stream is packed into
/// 5-bit characters.
pub fn geohash_encode(latitude: f64, longitude: f64, precision: usize) -> Result<String> {
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(Error::invalid("latitude", format!("{latitude} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(Error::invalid("longitude", format!("{longitude} outside [-180, 180]")));
    }
    if !(1..=MAX_PRECISION).contains(&precision) {
        return Err(Error::invalid("precision", format!("{precision} outside [1, {MAX_PRECISION}]")));
    }
    let mut lat = (-90.0, 90.0);
    let mut lon = (-180.0, 180.0);
    let mut even = true;
    let mut out = String::with_capacity(precision);
    for _ in 0..precision {
        let mut ch = 0usize;
        for _ in 0..5 {
            let (range, value) = if even { (&mut lon, longitude) } else { (&mut lat, latitude) };
            let mid = (range.0 + range.1) / 2.0;
            ch <<= 1;
            if value >= mid {
                ch |= 1;
                range.0 = mid;
            } else {
                range.1 = mid;
            }
            even = !even;
        }
        out.push(ALPHABET[ch] as char);
    }
    Ok(out)
}

fn decode_char(c: char) -> Result<u64> {
    ALPHABET
        .iter()
        .position(|&a| a as char == c)
        .map(|p| p as u64)
        .ok_or_else(|| Error::invalid("geohash", format!("character {c:?} is not in the Geohash alphabet")))
}

/// Normalized base-32 values of the 2- to 5-character prefixes of `code`:
/// `value_k = base32(code[..k]) / (32^k - 1)`, each in `[0, 1]`.
pub fn geohash_levels_normalize(code: &str) -> Result<[f64; 4]> {
    let digits: Vec<u64> = code.chars().take(5).map(decode_char).collect::<Result<_>>()?;
    if digits.len() < 5 {
        return Err(Error::invalid("geohash", format!("need at least 5 characters, got {code:?}")));
    }
    let mut levels = [0.0; 4];
    let mut acc = digits[0];
    for k in 2..=5 {
        acc = acc * 32 + digits[k - 1];
        levels[k - 2] = acc as f64 / (32u64.pow(k as u32) - 1) as f64;
    }
    Ok(levels)
}
