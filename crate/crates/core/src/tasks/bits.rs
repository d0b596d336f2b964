//! Unsigned arithmetic on little-endian bit vectors (index 0 is the least
//! significant bit). Results carry no high-order zeros except the single
//! bit of zero.

use std::cmp::Ordering;

pub fn trim(mut bits: Vec<u8>) -> Vec<u8> {
    while bits.len() > 1 && bits.last() == Some(&0) {
        bits.pop();
    }
    if bits.is_empty() {
        bits.push(0);
    }
    bits
}

pub fn add_bits(a: &[u8], b: &[u8]) -> Vec<u8> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n + 1);
    let mut carry = 0u8;
    for i in 0..n {
        let s = a.get(i).copied().unwrap_or(0) + b.get(i).copied().unwrap_or(0) + carry;
        out.push(s & 1);
        carry = s >> 1;
    }
    out.push(carry);
    trim(out)
}

/// Schoolbook shift-and-add.
pub fn mul_bits(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut acc = vec![0u8];
    for (shift, &bit) in b.iter().enumerate() {
        if bit == 1 {
            let mut shifted = vec![0u8; shift];
            shifted.extend_from_slice(a);
            acc = add_bits(&acc, &shifted);
        }
    }
    trim(acc)
}

fn compare(a: &[u8], b: &[u8]) -> Ordering {
    let (a, b) = (trim(a.to_vec()), trim(b.to_vec()));
    a.len().cmp(&b.len()).then_with(|| a.iter().rev().cmp(b.iter().rev()))
}

/// `a - b` for `a >= b`.
fn sub_bits(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len());
    let mut borrow = 0i8;
    for i in 0..a.len() {
        let mut d = a[i] as i8 - b.get(i).copied().unwrap_or(0) as i8 - borrow;
        borrow = 0;
        if d < 0 {
            d += 2;
            borrow = 1;
        }
        out.push(d as u8);
    }
    debug_assert_eq!(borrow, 0, "subtraction underflow");
    trim(out)
}

/// `⌊√a⌋` by the binary digit-by-digit method, two input bits per root bit.
pub fn isqrt_bits(a: &[u8]) -> Vec<u8> {
    let a = trim(a.to_vec());
    let pairs = a.len().div_ceil(2);
    let mut root: Vec<u8> = vec![0];
    let mut rem: Vec<u8> = vec![0];
    for p in (0..pairs).rev() {
        // rem = rem·4 + next pair
        let mut shifted = vec![a.get(2 * p).copied().unwrap_or(0), a.get(2 * p + 1).copied().unwrap_or(0)];
        shifted.extend_from_slice(&rem);
        rem = trim(shifted);
        // trial = root·4 + 1
        let mut trial = vec![1u8, 0];
        trial.extend_from_slice(&root);
        let trial = trim(trial);
        let fits = compare(&rem, &trial) != Ordering::Less;
        if fits {
            rem = sub_bits(&rem, &trial);
        }
        let mut next = vec![u8::from(fits)];
        next.extend_from_slice(&root);
        root = trim(next);
    }
    root
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn to_bits(mut v: u128) -> Vec<u8> {
        let mut out = Vec::new();
        while v > 0 {
            out.push((v & 1) as u8);
            v >>= 1;
        }
        trim(out)
    }

    fn value(bits: &[u8]) -> u128 {
        bits.iter().rev().fold(0, |acc, &b| (acc << 1) | b as u128)
    }

    #[test]
    fn small_cases() {
        assert_eq!(add_bits(&[1, 0, 0, 1], &[1, 0, 1]), vec![0, 1, 1, 1]);
        assert_eq!(add_bits(&[0], &[0]), vec![0]);
        assert_eq!(isqrt_bits(&[1]), vec![1]);
        assert_eq!(isqrt_bits(&[0]), vec![0]);
        assert_eq!(isqrt_bits(&to_bits(17)), to_bits(4));
        assert_eq!(mul_bits(&[0, 0, 1], &[0, 1, 1, 0, 1]), to_bits(88));
    }

    #[test]
    fn big_endian_readings_of_worked_examples() {
        // Written most-significant bit first, so reverse before and after.
        let be = |s: &str| s.bytes().rev().map(|c| c - b'0').collect::<Vec<u8>>();
        let show = |v: Vec<u8>| v.iter().rev().map(|b| char::from(b'0' + b)).collect::<String>();
        assert_eq!(show(add_bits(&be("10010"), &be("101"))), "10111");
        assert_eq!(show(mul_bits(&be("100"), &be("10110"))), "1011000");
    }

    #[test]
    fn leading_zeros_in_operands_are_harmless() {
        assert_eq!(add_bits(&[1, 0, 0, 0], &[0, 0]), vec![1]);
        assert_eq!(mul_bits(&[0, 0, 0], &[1, 1]), vec![0]);
        assert_eq!(isqrt_bits(&[0, 0, 1, 0, 0, 0]), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn matches_native_integers(a in any::<u64>(), b in any::<u64>()) {
            let (x, y) = (to_bits(a as u128), to_bits(b as u128));
            prop_assert_eq!(value(&add_bits(&x, &y)), a as u128 + b as u128);
            prop_assert_eq!(value(&mul_bits(&x, &y)), a as u128 * b as u128);
            let r = value(&isqrt_bits(&x));
            prop_assert!(r * r <= a as u128 && (r + 1) * (r + 1) > a as u128);
        }
    }
}
