//! Byte-wise Shamir secret sharing over GF(2^8) with the AES polynomial.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::CryptoError;

/// One evaluation point of the sharing polynomials, for every secret byte.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretShare {
    pub index: u8,
    #[serde(with = "crate::hexser")]
    pub payload: Vec<u8>,
}

fn gf_mul(mut a: u8, mut b: u8) -> u8 {
    let mut product = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            product ^= a;
        }
        let carry = a & 0x80;
        a <<= 1;
        if carry != 0 {
            a ^= 0x1b;
        }
        b >>= 1;
    }
    product
}

fn gf_inv(a: u8) -> u8 {
    debug_assert!(a != 0);
    // a^254 == a^-1 in GF(2^8)
    let mut result = 1u8;
    let mut base = a;
    let mut exp = 254u8;
    while exp != 0 {
        if exp & 1 != 0 {
            result = gf_mul(result, base);
        }
        base = gf_mul(base, base);
        exp >>= 1;
    }
    result
}

/// Splits `secret` into `n` shares, any `k` of which reconstruct it.
pub fn split_secret<R: RngCore + CryptoRng>(
    secret: &[u8],
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SecretShare>, CryptoError> {
    if k == 0 || k > n || n > 255 {
        return Err(CryptoError::Parameter(format!(
            "require 1 <= k <= n <= 255, got k={k} n={n}"
        )));
    }
    let mut shares: Vec<SecretShare> = (1..=n)
        .map(|i| SecretShare {
            index: i as u8,
            payload: Vec::with_capacity(secret.len()),
        })
        .collect();
    let mut coeffs = vec![0u8; k];
    for &byte in secret {
        coeffs[0] = byte;
        rng.fill_bytes(&mut coeffs[1..]);
        for share in shares.iter_mut() {
            // Horner evaluation at x = index
            let y = coeffs.iter().rev().fold(0u8, |acc, &c| gf_mul(acc, share.index) ^ c);
            share.payload.push(y);
        }
    }
    Ok(shares)
}

/// Lagrange interpolation at zero over the first `k` shares.
pub fn recover_secret(shares: &[SecretShare], k: usize) -> Result<Vec<u8>, CryptoError> {
    if k == 0 {
        return Err(CryptoError::Parameter("threshold must be at least 1".into()));
    }
    let mut seen = [false; 256];
    for share in shares {
        if share.index == 0 {
            return Err(CryptoError::Parameter("share index 0 is reserved".into()));
        }
        if std::mem::replace(&mut seen[share.index as usize], true) {
            return Err(CryptoError::Parameter(format!("duplicate share index {}", share.index)));
        }
    }
    if shares.len() < k {
        return Err(CryptoError::Threshold {
            needed: k,
            got: shares.len(),
        });
    }
    let used = &shares[..k];
    let len = used[0].payload.len();
    if used.iter().any(|s| s.payload.len() != len) {
        return Err(CryptoError::Parameter("share payload lengths differ".into()));
    }
    let basis: Vec<u8> = used
        .iter()
        .map(|si| {
            used.iter().filter(|sj| sj.index != si.index).fold(1u8, |acc, sj| {
                gf_mul(acc, gf_mul(sj.index, gf_inv(sj.index ^ si.index)))
            })
        })
        .collect();
    Ok((0..len)
        .map(|pos| {
            used.iter()
                .zip(&basis)
                .fold(0u8, |acc, (s, &l)| acc ^ gf_mul(s.payload[pos], l))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent field arithmetic via exp/log tables with generator 3.
    struct Tables {
        exp: [u8; 512],
        log: [u8; 256],
    }

    impl Tables {
        fn new() -> Tables {
            let mut exp = [0u8; 512];
            let mut log = [0u8; 256];
            let mut x: u16 = 1;
            for i in 0..255 {
                exp[i] = x as u8;
                log[x as usize] = i as u8;
                // multiply by 3 = x * 2 + x
                let mut doubled = x << 1;
                if doubled & 0x100 != 0 {
                    doubled ^= 0x11b;
                }
                x ^= doubled;
            }
            for i in 255..512 {
                exp[i] = exp[i - 255];
            }
            Tables { exp, log }
        }

        fn mul(&self, a: u8, b: u8) -> u8 {
            if a == 0 || b == 0 {
                return 0;
            }
            self.exp[self.log[a as usize] as usize + self.log[b as usize] as usize]
        }

        fn eval(&self, coeffs: &[u8], x: u8) -> u8 {
            let mut acc = 0u8;
            let mut power = 1u8;
            for &c in coeffs {
                acc ^= self.mul(c, power);
                power = self.mul(power, x);
            }
            acc
        }
    }

    #[test]
    fn field_multiplication_matches_table_oracle() {
        let t = Tables::new();
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(gf_mul(a, b), t.mul(a, b));
            }
            if a != 0 {
                assert_eq!(gf_mul(a, gf_inv(a)), 1);
            }
        }
    }

    #[test]
    fn two_of_three_from_polynomial_oracle() {
        let t = Tables::new();
        let secret = [0x42u8, 0x00, 0xff, 0x17];
        let slopes = [0x11u8, 0xa0, 0x01, 0x77];
        let shares: Vec<SecretShare> = (1..=3u8)
            .map(|x| SecretShare {
                index: x,
                payload: secret.iter().zip(slopes).map(|(&s, m)| t.eval(&[s, m], x)).collect(),
            })
            .collect();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let pair = [shares[i].clone(), shares[j].clone()];
            assert_eq!(recover_secret(&pair, 2).unwrap(), secret);
        }
    }

    #[test]
    fn split_evaluates_a_degree_k_minus_one_polynomial() {
        // three of five, recover from {1, 3, 5}
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let secret: Vec<u8> = (0..32).collect();
        let shares = split_secret(&secret, 3, 5, &mut rng).unwrap();
        let subset = [shares[0].clone(), shares[2].clone(), shares[4].clone()];
        assert_eq!(recover_secret(&subset, 3).unwrap(), secret);
    }

    #[test]
    fn degenerate_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shares = split_secret(b"s", 1, 1, &mut rng).unwrap();
        assert_eq!(shares[0].payload, b"s");
        assert_eq!(recover_secret(&shares, 1).unwrap(), b"s");
    }

    #[test]
    fn below_threshold_does_not_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mismatches = 0;
        for _ in 0..50 {
            let mut secret = [0u8; 32];
            rng.fill_bytes(&mut secret);
            let shares = split_secret(&secret, 3, 5, &mut rng).unwrap();
            let got = recover_secret(&shares[1..3], 2).unwrap();
            if got != secret {
                mismatches += 1;
            }
        }
        assert_eq!(mismatches, 50);
    }

    #[test]
    fn parameter_and_threshold_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            split_secret(b"x", 0, 1, &mut rng),
            Err(CryptoError::Parameter(_))
        ));
        assert!(matches!(
            split_secret(b"x", 3, 2, &mut rng),
            Err(CryptoError::Parameter(_))
        ));
        assert!(matches!(
            split_secret(b"x", 2, 256, &mut rng),
            Err(CryptoError::Parameter(_))
        ));
        let shares = split_secret(b"xy", 2, 3, &mut rng).unwrap();
        let dup = [shares[0].clone(), shares[0].clone()];
        assert!(matches!(recover_secret(&dup, 2), Err(CryptoError::Parameter(_))));
        assert_eq!(
            recover_secret(&shares[..1], 2),
            Err(CryptoError::Threshold { needed: 2, got: 1 })
        );
    }

    #[test]
    fn exhaustive_subsets_up_to_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 1..=6usize {
            for k in 1..=n {
                let mut secret = [0u8; 16];
                rng.fill_bytes(&mut secret);
                let shares = split_secret(&secret, k, n, &mut rng).unwrap();
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize != k {
                        continue;
                    }
                    let subset: Vec<SecretShare> = (0..n)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| shares[i].clone())
                        .collect();
                    assert_eq!(recover_secret(&subset, k).unwrap(), secret, "n={n} k={k} mask={mask:b}");
                }
            }
        }
    }
}
