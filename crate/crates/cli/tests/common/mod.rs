//! Helpers for driving the binary plus independent oracles. The oracles
//! follow the textbook definitions and share no code with the library.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use oodmine::EmbeddingMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_unit(rng: &mut impl Rng, rows: usize, dims: usize) -> EmbeddingMatrix {
    let data: Vec<Vec<f32>> = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect();
    EmbeddingMatrix::from_rows(&data).unwrap()
}

pub fn naive_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Positive number `m · 2^e` with `m` in [1, 2), or zero. Lets the oracles
/// sum `exp(x)` for |x| in the thousands without any max shift.
#[derive(Debug, Clone, Copy)]
pub struct Ext {
    m: f64,
    e: i64,
}

impl Ext {
    pub const ZERO: Ext = Ext { m: 0.0, e: 0 };

    fn norm(m: f64, e: i64) -> Ext {
        if m == 0.0 {
            return Ext::ZERO;
        }
        let k = m.log2().floor() as i64;
        let mut m = m / 2f64.powi(k as i32);
        let mut e = e + k;
        // guard against log2 rounding
        if m >= 2.0 {
            m /= 2.0;
            e += 1;
        } else if m < 1.0 {
            m *= 2.0;
            e -= 1;
        }
        Ext { m, e }
    }

    pub fn exp(x: f64) -> Ext {
        let ln2 = std::f64::consts::LN_2;
        let k = (x / ln2).floor();
        let r = x - k * ln2;
        Ext::norm(r.exp(), k as i64)
    }

    pub fn add(self, o: Ext) -> Ext {
        if self.m == 0.0 {
            return o;
        }
        if o.m == 0.0 {
            return self;
        }
        let (big, small) = if self.e >= o.e { (self, o) } else { (o, self) };
        let shift = big.e - small.e;
        let sm = if shift > 1100 {
            0.0
        } else {
            small.m * 2f64.powi(-(shift as i32))
        };
        Ext::norm(big.m + sm, big.e)
    }

    pub fn div(self, o: Ext) -> Ext {
        if self.m == 0.0 {
            return Ext::ZERO;
        }
        Ext::norm(self.m / o.m, self.e - o.e)
    }

    pub fn to_f64(self) -> f64 {
        if self.m == 0.0 {
            return 0.0;
        }
        if self.e < -1100 {
            return 0.0;
        }
        // split the power so intermediate factors stay finite
        let half = self.e / 2;
        self.m * 2f64.powi(half as i32) * 2f64.powi((self.e - half) as i32)
    }

    pub fn ln(self) -> f64 {
        self.m.ln() + self.e as f64 * std::f64::consts::LN_2
    }
}

/// Positive mass over total mass of the exponentials, summed naively in
/// extended range.
pub fn posneg_oracle(h: &[f32], pos: &EmbeddingMatrix, neg: &EmbeddingMatrix, tau: f64) -> f64 {
    let sum =
        |m: &EmbeddingMatrix| (0..m.rows()).fold(Ext::ZERO, |acc, j| acc.add(Ext::exp(naive_dot(h, m.row(j)) / tau)));
    let p = sum(pos);
    let n = sum(neg);
    p.div(p.add(n)).to_f64()
}

/// Relative closeness; below the normal f64 range only an absolute check
/// is meaningful.
pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    if b.abs() < f64::MIN_POSITIVE * 1e10 {
        return (a - b).abs() <= f64::MIN_POSITIVE * 1e10;
    }
    (a - b).abs() <= rel * b.abs()
}

pub fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// Scans every observed score as a candidate threshold.
pub fn fpr_oracle(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
    let need = ((tpr * id.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut best: Option<f64> = None;
    for &t in id.iter().chain(ood) {
        let accepted = id.iter().filter(|&&s| s >= t).count();
        if accepted >= need && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.unwrap();
    ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
}

pub fn oodmine(args: &[&str]) -> Output {
    oodmine_env(args, &[])
}

pub fn oodmine_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_oodmine"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn oodmine")
}

/// Runs and panics with stderr unless the exit code is zero.
pub fn ok(args: &[&str]) {
    let out = oodmine(args);
    assert!(
        out.status.success(),
        "oodmine {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
