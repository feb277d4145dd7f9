//! Routing-trace export: one JSON line per (sample, script, iteration)
//! holding the compatibility matrix and the inferred types. Floats are
//! printed in shortest round-trip form, so a parsed trace reproduces the
//! forward-pass values bit-exactly.

use serde::{Deserialize, Serialize};

use crate::model::TraceRecord;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceLine {
    pub sample: usize,
    pub script: usize,
    pub iteration: usize,
    /// `compat[u][i]`: routing weight of function `u` for element `i`.
    pub compat: Vec<Vec<f64>>,
    /// `types[i]`: type vector of element `i`.
    pub types: Vec<Vec<f64>>,
}

/// Splits batched trace records into per-sample lines. `sample_offset`
/// shifts the sample index when tracing in chunks.
pub fn trace_lines(records: &[TraceRecord], sample_offset: usize) -> Vec<TraceLine> {
    let mut out = Vec::new();
    for rec in records {
        let (batch, n_f, set) = (
            rec.compat.shape()[0],
            rec.compat.shape()[1],
            rec.compat.shape()[2],
        );
        let d_type = rec.types.shape()[2];
        for b in 0..batch {
            let compat: Vec<Vec<f64>> = (0..n_f)
                .map(|u| {
                    let base = b * n_f * set + u * set;
                    rec.compat.data()[base..base + set].to_vec()
                })
                .collect();
            let types: Vec<Vec<f64>> = (0..set)
                .map(|i| {
                    let base = b * set * d_type + i * d_type;
                    rec.types.data()[base..base + d_type].to_vec()
                })
                .collect();
            out.push(TraceLine {
                sample: sample_offset + b,
                script: rec.script,
                iteration: rec.iteration,
                compat,
                types,
            });
        }
    }
    // deterministic file order: sample-major, then script, then iteration
    out.sort_by_key(|l| (l.sample, l.script, l.iteration));
    out
}

pub fn write_trace(lines: &[TraceLine], w: &mut impl std::io::Write) -> std::io::Result<()> {
    for line in lines {
        serde_json::to_writer(&mut *w, line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_trace(r: impl std::io::BufRead) -> std::io::Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EvalOptions, Model, ModelConfig, PosMode};
    use crate::tensor::Storage;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trace_round_trips_bit_exactly_and_counts_records() {
        let cfg = ModelConfig {
            d_model: 8,
            d_cond: 8,
            d_type: 6,
            d_key: 4,
            n_heads: 1,
            n_scripts: 2,
            n_iterations: 3,
            n_locs: 1,
            n_functions: 2,
            tau: 1.6,
            n_inputs: 2,
            n_cls: 1,
            pos_mode: PosMode::Learned1d,
            signatures_trainable: true,
            codes_trainable: true,
            d_pos: 4,
        };
        let model = Model::new(cfg, 90).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let data: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let x = Storage::new(vec![5, 2], data).unwrap();
        let sess = model.session();
        let set = model.embed_inputs(&sess, &x).unwrap();
        let mut records = Vec::new();
        model
            .forward_set(&sess, &set, &EvalOptions::default(), Some(&mut records))
            .unwrap();
        let lines = trace_lines(&records, 0);
        assert_eq!(lines.len(), 5 * 2 * 3); // samples x scripts x iterations

        let mut buf = Vec::new();
        write_trace(&lines, &mut buf).unwrap();
        let parsed = read_trace(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(parsed.len(), lines.len());
        for (a, b) in lines.iter().zip(&parsed) {
            assert_eq!(a, b);
            for (ra, rb) in a.compat.iter().zip(&b.compat) {
                for (va, vb) in ra.iter().zip(rb) {
                    assert_eq!(va.to_bits(), vb.to_bits());
                }
            }
        }
    }
}
