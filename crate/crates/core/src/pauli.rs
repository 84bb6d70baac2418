//! Pauli letters, words, and dense operators.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

/// One Pauli letter. Matrices act on the (up, down) basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];

    pub fn as_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Result<Pauli> {
        match c {
            'I' => Ok(Pauli::I),
            'X' => Ok(Pauli::X),
            'Y' => Ok(Pauli::Y),
            'Z' => Ok(Pauli::Z),
            other => Err(Error::invalid(format!("unknown Pauli letter {other:?}"))),
        }
    }

    pub fn matrix(self) -> Array2<C64> {
        let z = C64::new(0.0, 0.0);
        let o = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        match self {
            Pauli::I => ndarray::array![[o, z], [z, o]],
            Pauli::X => ndarray::array![[z, o], [o, z]],
            Pauli::Y => ndarray::array![[z, -i], [i, z]],
            Pauli::Z => ndarray::array![[o, z], [z, -o]],
        }
    }

    /// Action on a basis bit (0 = up): returns the image bit and the phase.
    #[inline]
    pub(crate) fn apply_to_bit(self, bit: usize) -> (usize, C64) {
        match self {
            Pauli::I => (bit, C64::new(1.0, 0.0)),
            Pauli::X => (1 - bit, C64::new(1.0, 0.0)),
            Pauli::Y => {
                if bit == 0 {
                    (1, C64::new(0.0, 1.0))
                } else {
                    (0, C64::new(0.0, -1.0))
                }
            }
            Pauli::Z => {
                let sign = if bit == 0 { 1.0 } else { -1.0 };
                (bit, C64::new(sign, 0.0))
            }
        }
    }
}

impl std::fmt::Display for Pauli {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Parses a word like "IZX" into letters, leftmost letter first.
pub fn parse_word(s: &str) -> Result<Vec<Pauli>> {
    s.chars().map(Pauli::from_char).collect()
}

pub fn word_to_string(word: &[Pauli]) -> String {
    word.iter().map(|p| p.as_char()).collect()
}

/// All 4^k words of length k in base-4 order with digits I < X < Y < Z.
pub fn enumerate_words(k: usize) -> Vec<Vec<Pauli>> {
    let count = 4usize.pow(k as u32);
    (0..count)
        .map(|mut w| {
            let mut word = vec![Pauli::I; k];
            for site in (0..k).rev() {
                word[site] = Pauli::ALL[w % 4];
                w /= 4;
            }
            word
        })
        .collect()
}

/// Kronecker product with `a` as the more significant factor.
pub fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for ((i, j), &av) in a.indexed_iter() {
        for ((p, q), &bv) in b.indexed_iter() {
            out[[i * br + p, j * bc + q]] = av * bv;
        }
    }
    out
}

/// Dense 2^k x 2^k operator for a word, site 0 most significant.
pub fn word_operator(word: &[Pauli]) -> Array2<C64> {
    let mut op = Array2::from_diag_elem(1, C64::new(1.0, 0.0));
    for p in word {
        op = kron(&op, &p.matrix());
    }
    op
}
