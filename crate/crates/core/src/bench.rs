//! Serial-vs-parallel timing of the matmul kernel.

use std::io;
use std::path::Path;
use std::time::Instant;

use crate::rng::{uniform_init, Rng};
use crate::tensor::{matmul, Matrix, ParallelPolicy};

pub const CSV_HEADER: [&str; 8] = [
    "kernel",
    "m",
    "k",
    "n",
    "threads",
    "median_seconds",
    "gflops",
    "speedup",
];

pub const MIN_RUNS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: String,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub threads: usize,
    pub median_seconds: f64,
    pub gflops: f64,
    /// Single-thread median divided by this row's median.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.kernel.clone(),
                r.m.to_string(),
                r.k.to_string(),
                r.n.to_string(),
                r.threads.to_string(),
                format!("{:.9e}", r.median_seconds),
                format!("{:.6}", r.gflops),
                format!("{:.4}", r.speedup),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> csv::Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_matmul(a: &Matrix, b: &Matrix, policy: &ParallelPolicy, runs: usize) -> f64 {
    let samples = (0..runs)
        .map(|_| {
            let start = Instant::now();
            let c = matmul(a, b, policy).expect("conforming shapes");
            std::hint::black_box(&c);
            start.elapsed().as_secs_f64()
        })
        .collect();
    median(samples)
}

/// Times `matmul` for every policy and `(m, k, n)` shape, `runs` times each
/// (at least [`MIN_RUNS`]). Speedups are relative to a one-thread run of
/// the same shape.
pub fn bench_kernels(
    policies: &[ParallelPolicy],
    shapes: &[(usize, usize, usize)],
    runs: usize,
) -> BenchReport {
    let runs = runs.max(MIN_RUNS);
    let mut report = BenchReport::default();
    if policies.is_empty() {
        return report;
    }
    let mut rng = Rng::new(0xBE_AC4);
    for &(m, k, n) in shapes {
        let a = uniform_init(&mut rng, m, k, -1.0, 1.0).expect("valid range");
        let b = uniform_init(&mut rng, k, n, -1.0, 1.0).expect("valid range");
        let flops = 2.0 * m as f64 * k as f64 * n as f64;

        let mut timings: Vec<(usize, f64)> = Vec::with_capacity(policies.len());
        for p in policies {
            timings.push((p.threads(), time_matmul(&a, &b, p, runs)));
        }
        let baseline = match timings.iter().find(|(t, _)| *t == 1) {
            Some(&(_, secs)) => secs,
            None => time_matmul(&a, &b, &ParallelPolicy::serial(), runs),
        };
        for (threads, secs) in timings {
            report.rows.push(BenchRow {
                kernel: "matmul".into(),
                m,
                k,
                n,
                threads,
                median_seconds: secs,
                gflops: if secs > 0.0 { flops / secs / 1e9 } else { 0.0 },
                speedup: if secs > 0.0 && baseline > 0.0 { baseline / secs } else { 1.0 },
            });
        }
    }
    report
}
