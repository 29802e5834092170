//! Sparse multivariate polynomials with integer exponent vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One monomial: coefficient times the product of `x_l^exps[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub exps: Vec<u32>,
    pub coef: f64,
}

/// A polynomial in `nvars` real variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPoly {
    pub nvars: usize,
    pub terms: Vec<Term>,
}

impl MultiPoly {
    pub fn zero(nvars: usize) -> Self {
        MultiPoly { nvars, terms: Vec::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        MultiPoly { nvars, terms: vec![Term { exps: vec![0; nvars], coef: c }] }
    }

    /// Collect terms, merging equal exponent vectors and dropping exact zeros.
    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Vec<u32>, f64)>) -> Self {
        let mut map: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (exps, coef) in terms {
            assert_eq!(exps.len(), nvars, "exponent vector length must equal nvars");
            *map.entry(exps).or_insert(0.0) += coef;
        }
        Self::from_map(nvars, map)
    }

    fn from_map(nvars: usize, map: BTreeMap<Vec<u32>, f64>) -> Self {
        let terms = map.into_iter().filter(|(_, c)| *c != 0.0).map(|(exps, coef)| Term { exps, coef }).collect();
        MultiPoly { nvars, terms }
    }

    /// Affine polynomial `c0 + Σ coeffs[l] x_l`.
    pub fn affine(c0: f64, coeffs: &[f64]) -> Self {
        let nvars = coeffs.len();
        let mut terms = vec![(vec![0; nvars], c0)];
        for (l, &c) in coeffs.iter().enumerate() {
            let mut e = vec![0; nvars];
            e[l] = 1;
            terms.push((e, c));
        }
        Self::from_terms(nvars, terms)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for t in &self.terms {
            let mut m = t.coef;
            for (l, &e) in t.exps.iter().enumerate() {
                if e > 0 {
                    m *= x[l].powi(e as i32);
                }
            }
            acc += m;
        }
        acc
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.exps.iter().sum::<u32>()).max().unwrap_or(0)
    }

    pub fn is_multilinear(&self) -> bool {
        self.terms.iter().all(|t| t.exps.iter().all(|&e| e <= 1))
    }

    /// Coefficient of a given exponent vector (zero when absent).
    pub fn coef(&self, exps: &[u32]) -> f64 {
        self.terms.iter().find(|t| t.exps == exps).map_or(0.0, |t| t.coef)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_terms(self.nvars, self.terms.iter().map(|t| (t.exps.clone(), t.coef * s)))
    }

    pub fn add(&self, other: &MultiPoly) -> Self {
        assert_eq!(self.nvars, other.nvars);
        Self::from_terms(
            self.nvars,
            self.terms.iter().chain(&other.terms).map(|t| (t.exps.clone(), t.coef)),
        )
    }

    /// Re-express in shifted variables: returns `q` with `q(y) = self(y - offsets)`.
    pub fn shift(&self, offsets: &[f64]) -> Self {
        assert_eq!(offsets.len(), self.nvars);
        let mut out: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for t in &self.terms {
            let mut partial: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            partial.insert(vec![0; self.nvars], t.coef);
            for (l, &e) in t.exps.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                // (y_l - o_l)^e = Σ_a C(e, a) y_l^a (-o_l)^(e - a)
                let mut next = BTreeMap::new();
                for (exps, c) in &partial {
                    for a in 0..=e {
                        let w = binom(e, a) * (-offsets[l]).powi((e - a) as i32);
                        if w == 0.0 {
                            continue;
                        }
                        let mut ex = exps.clone();
                        ex[l] += a;
                        *next.entry(ex).or_insert(0.0) += c * w;
                    }
                }
                partial = next;
            }
            for (exps, c) in partial {
                *out.entry(exps).or_insert(0.0) += c;
            }
        }
        Self::from_map(self.nvars, out)
    }
}

fn binom(n: u32, k: u32) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// All exponent vectors over `nvars` variables with total degree at most `d`,
/// ordered by degree and then lexicographically (descending exponents first).
pub fn monomials_up_to(nvars: usize, d: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for deg in 0..=d {
        let mut cur = vec![0u32; nvars];
        fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if pos == cur.len() {
                if left == 0 {
                    out.push(cur.clone());
                }
                return;
            }
            for e in (0..=left).rev() {
                cur[pos] = e;
                rec(pos + 1, left - e, cur, out);
            }
            cur[pos] = 0;
        }
        if nvars == 0 {
            if deg == 0 {
                out.push(Vec::new());
            }
            continue;
        }
        rec(0, deg, &mut cur, &mut out);
    }
    out
}

/// Subsets of `0..nvars` of size at most `d`, by size then lexicographically.
pub fn subsets_up_to(nvars: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for size in 1..=d.min(nvars) {
        let mut cur: Vec<usize> = (0..size).collect();
        loop {
            out.push(cur.clone());
            let mut i = size;
            while i > 0 && cur[i - 1] == nvars - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            cur[i - 1] += 1;
            for j in i..size {
                cur[j] = cur[j - 1] + 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_is_a_change_of_variables() {
        let p = MultiPoly::from_terms(2, vec![(vec![2, 1], 1.5), (vec![0, 1], -0.5), (vec![0, 0], 0.25)]);
        let off = [0.2, -0.3];
        let q = p.shift(&off);
        for &(a, b) in &[(0.1, 0.7), (-1.0, 2.0), (0.5, 0.5)] {
            let direct = p.eval(&[a - off[0], b - off[1]]);
            assert!((q.eval(&[a, b]) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_counts() {
        assert_eq!(monomials_up_to(2, 2).len(), 6);
        assert_eq!(monomials_up_to(3, 3).len(), 20);
        assert_eq!(subsets_up_to(4, 2).len(), 1 + 4 + 6);
        assert_eq!(subsets_up_to(2, 5).len(), 4);
    }

    #[test]
    fn multilinear_detection() {
        assert!(MultiPoly::affine(1.0, &[0.5, 0.2]).is_multilinear());
        assert!(!MultiPoly::from_terms(1, vec![(vec![2], 1.0)]).is_multilinear());
    }
}
