//! Product fuzzy logic: Boolean operations relaxed to [0, 1], random fuzzy
//! Boolean functions sampled as truth tables and evaluated through their
//! canonical sum-of-products form, and the multi-task regression datasets
//! built from them.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Storage;

#[derive(Debug, Error)]
pub enum FuzzyError {
    #[error("value {0} outside [0, 1]")]
    OutOfDomain(f64),
    #[error("expected {expected} variables, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("truth table for {n_vars} variables needs {expected} entries, got {got}")]
    TableSize {
        n_vars: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid hex truth table: {0}")]
    BadHex(String),
    #[error("need at least one expression")]
    NoExpressions,
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("prediction and target lengths differ: {pred} vs {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("need at least 2 samples for R^2")]
    TooFewForR2,
    #[error("target variance is zero")]
    ZeroVariance,
}

fn check_unit(v: f64) -> Result<f64, FuzzyError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(FuzzyError::OutOfDomain(v))
    }
}

/// `and(a, b) = a·b`.
pub fn fuzzy_and(a: f64, b: f64) -> Result<f64, FuzzyError> {
    Ok(check_unit(a)? * check_unit(b)?)
}

/// `not(a) = 1 − a`.
pub fn fuzzy_not(a: f64) -> Result<f64, FuzzyError> {
    Ok(1.0 - check_unit(a)?)
}

/// `or(a, b) = 1 − (1 − a)(1 − b)`, the de Morgan dual of `and`.
pub fn fuzzy_or(a: f64, b: f64) -> Result<f64, FuzzyError> {
    Ok(1.0 - (1.0 - check_unit(a)?) * (1.0 - check_unit(b)?))
}

/// A fuzzy Boolean function of `n_vars` variables, stored as its truth
/// table. Entry `i` is the value at the Boolean assignment whose binary
/// encoding is `i`, with variable 0 as the most significant bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzyExpr {
    n_vars: usize,
    table: Vec<bool>,
}

impl FuzzyExpr {
    pub fn from_table(n_vars: usize, table: Vec<bool>) -> Result<Self, FuzzyError> {
        let expected = 1usize << n_vars;
        if table.len() != expected {
            return Err(FuzzyError::TableSize {
                n_vars,
                expected,
                got: table.len(),
            });
        }
        Ok(FuzzyExpr { n_vars, table })
    }

    /// Samples each of the 2^N truth-table entries i.i.d. Bernoulli(0.5).
    pub fn sample(n_vars: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(n_vars >= 1, "need at least one variable");
        let table = (0..1usize << n_vars).map(|_| rng.random_bool(0.5)).collect();
        FuzzyExpr { n_vars, table }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn table(&self) -> &[bool] {
        &self.table
    }

    /// Assignments (by binary encoding) where the table is 1, ascending.
    pub fn minterms(&self) -> Vec<usize> {
        self.table
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Evaluates the canonical sum-of-products form: one product term per
    /// minterm (literal `x_k` where the assignment bit is set, `1 − x_k`
    /// where clear), terms combined by a left fold of `or`.
    pub fn eval(&self, x: &[f64]) -> Result<f64, FuzzyError> {
        if x.len() != self.n_vars {
            return Err(FuzzyError::DimensionMismatch {
                expected: self.n_vars,
                got: x.len(),
            });
        }
        for &v in x {
            check_unit(v)?;
        }
        let mut acc = 0.0;
        for (m, _) in self.table.iter().enumerate().filter(|(_, &b)| b) {
            let mut term = 1.0;
            for (k, &xk) in x.iter().enumerate() {
                let bit = (m >> (self.n_vars - 1 - k)) & 1;
                term *= if bit == 1 { xk } else { 1.0 - xk };
            }
            acc = 1.0 - (1.0 - acc) * (1.0 - term);
        }
        Ok(acc)
    }

    /// Truth table as hex: bit `i` of the table sits in byte `i / 8` at bit
    /// position `7 − i % 8`; trailing bits of the last byte are zero.
    pub fn to_hex(&self) -> String {
        let n_bytes = self.table.len().div_ceil(8);
        let mut bytes = vec![0u8; n_bytes];
        for (i, &b) in self.table.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (7 - i % 8);
            }
        }
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(n_vars: usize, hex: &str) -> Result<Self, FuzzyError> {
        let entries = 1usize << n_vars;
        let n_bytes = entries.div_ceil(8);
        if hex.len() != n_bytes * 2 {
            return Err(FuzzyError::BadHex(hex.to_string()));
        }
        let mut bytes = Vec::with_capacity(n_bytes);
        for i in 0..n_bytes {
            let byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| FuzzyError::BadHex(hex.to_string()))?;
            bytes.push(byte);
        }
        let table = (0..entries).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect();
        FuzzyExpr::from_table(n_vars, table)
    }
}

/// Inputs in [0, 1]^N with one regression target per expression, split
/// 80/20 into train and validation by a seeded permutation.
#[derive(Debug, Clone)]
pub struct RegressionDataset {
    pub inputs: Storage,
    pub targets: Storage,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub seed: u64,
}

impl RegressionDataset {
    pub fn n_samples(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn n_tasks(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        let n = self.n_vars();
        &self.inputs.data()[i * n..(i + 1) * n]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        let t = self.n_tasks();
        &self.targets.data()[i * t..(i + 1) * t]
    }
}

const MIN_SAMPLES: usize = 10;

/// Builds the dataset: inputs uniform on [0, 1]^N from the seeded generator
/// (sample-major order), targets evaluated per expression, then an 80/20
/// split drawn from a derived stream. Bit-identical for equal (seed, exprs).
pub fn gen_dataset(
    exprs: &[FuzzyExpr],
    num_samples: usize,
    seed: u64,
) -> Result<RegressionDataset, FuzzyError> {
    let first = exprs.first().ok_or(FuzzyError::NoExpressions)?;
    let n_vars = first.n_vars();
    for e in exprs {
        if e.n_vars() != n_vars {
            return Err(FuzzyError::DimensionMismatch {
                expected: n_vars,
                got: e.n_vars(),
            });
        }
    }
    if num_samples < MIN_SAMPLES {
        return Err(FuzzyError::TooFewSamples {
            min: MIN_SAMPLES,
            got: num_samples,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(num_samples * n_vars);
    for _ in 0..num_samples * n_vars {
        inputs.push(rng.random::<f64>());
    }
    let mut targets = Vec::with_capacity(num_samples * exprs.len());
    for s in 0..num_samples {
        let x = &inputs[s * n_vars..(s + 1) * n_vars];
        for e in exprs {
            targets.push(e.eval(x).expect("inputs are in-domain by construction"));
        }
    }
    // Split permutation comes from its own stream so adding input columns
    // never perturbs the split.
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut perm: Vec<usize> = (0..num_samples).collect();
    for i in (1..num_samples).rev() {
        let j = split_rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let n_train = num_samples * 4 / 5;
    let mut train_idx = perm[..n_train].to_vec();
    let mut val_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok(RegressionDataset {
        inputs: Storage::new(vec![num_samples, n_vars], inputs).expect("sized above"),
        targets: Storage::new(vec![num_samples, exprs.len()], targets).expect("sized above"),
        train_idx,
        val_idx,
        seed,
    })
}

/// Coefficient of determination: `1 − SS_res / SS_tot` with `SS_tot` taken
/// about the target mean.
pub fn r2_score(pred: &[f64], target: &[f64]) -> Result<f64, FuzzyError> {
    if pred.len() != target.len() {
        return Err(FuzzyError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if target.len() < 2 {
        return Err(FuzzyError::TooFewForR2);
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(FuzzyError::ZeroVariance);
    }
    let ss_res: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Writes the dataset as CSV with header `x0..x{N−1},f0..f{T−1}`.
pub fn write_csv(dataset: &RegressionDataset, w: &mut impl std::io::Write) -> std::io::Result<()> {
    let n = dataset.n_vars();
    let t = dataset.n_tasks();
    let header: Vec<String> = (0..n)
        .map(|i| format!("x{i}"))
        .chain((0..t).map(|i| format!("f{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for s in 0..dataset.n_samples() {
        let mut fields: Vec<String> = dataset.input_row(s).iter().map(|v| v.to_string()).collect();
        fields.extend(dataset.target_row(s).iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
