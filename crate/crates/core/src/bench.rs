//! Timing harness comparing the naive and tiled dynamic convolutions, per
//! operation and for whole-model latency.

use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::decoder::DpwExec;
use crate::dpwconv::{dpwconv, DpwKernel, PatchLayout, WeightGrid};
use crate::error::Result;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    /// Absent for a single sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_ms: Option<f64>,
}

impl TimingStats {
    pub fn from_samples(samples: &[Duration]) -> Self {
        assert!(!samples.is_empty(), "at least one sample");
        let ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let min = ms.iter().copied().fold(f64::INFINITY, f64::min);
        let (max, std) = if ms.len() > 1 {
            let max = ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (Some(max), Some(var.sqrt()))
        } else {
            (None, None)
        };
        TimingStats {
            samples: ms.len(),
            mean_ms: mean,
            min_ms: min,
            max_ms: max,
            std_ms: std,
        }
    }
}

fn time(iters: usize, mut f: impl FnMut()) -> TimingStats {
    f();
    let samples: Vec<Duration> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    TimingStats::from_samples(&samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpTiming {
    pub name: String,
    /// `C_in x H x W -> C_out`, kernel and grid.
    pub shape: String,
    pub naive: TimingStats,
    pub tiled: TimingStats,
    pub bit_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTotals {
    pub ops_naive_mean_ms: f64,
    pub ops_tiled_mean_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub precision: String,
    pub workers: usize,
    pub iterations: usize,
    pub ops: Vec<OpTiming>,
    pub model_naive: TimingStats,
    pub model_tiled: TimingStats,
    pub totals: BenchTotals,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {} ({}, {} workers, {} iterations)",
            self.model, self.precision, self.workers, self.iterations
        );
        let _ = writeln!(
            s,
            "{:<12}  {:<34}  {:>10}  {:>10}  {:>10}  {:>10}  {}",
            "op", "shape", "naive", "naive min", "tiled", "tiled min", "same"
        );
        for o in &self.ops {
            let _ = writeln!(
                s,
                "{:<12}  {:<34}  {:>10.3}  {:>10.3}  {:>10.3}  {:>10.3}  {}",
                o.name,
                o.shape,
                o.naive.mean_ms,
                o.naive.min_ms,
                o.tiled.mean_ms,
                o.tiled.min_ms,
                o.bit_identical
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "ops total ms: naive {:.3}  tiled {:.3}  speedup {:.2}x",
            t.ops_naive_mean_ms, t.ops_tiled_mean_ms, t.speedup
        );
        let _ = writeln!(
            s,
            "model latency ms: naive {:.3} (min {:.3})  tiled {:.3} (min {:.3})",
            self.model_naive.mean_ms,
            self.model_naive.min_ms,
            self.model_tiled.mean_ms,
            self.model_tiled.min_ms
        );
        s
    }
}

type Call<T> = (String, Tensor<T>, WeightGrid<T>, PatchLayout);

/// Executor that runs the tiled kernel and keeps a copy of every call's inputs.
#[derive(Default)]
pub struct Recorder<T> {
    calls: Mutex<Vec<Call<T>>>,
}

impl<T: Scalar> Recorder<T> {
    pub fn new() -> Self {
        Recorder {
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn into_calls(self) -> Vec<Call<T>> {
        self.calls.into_inner().expect("recorder lock")
    }
}

impl<T: Scalar> DpwExec<T> for Recorder<T> {
    fn run(
        &self,
        name: &str,
        x: &Tensor<T>,
        wg: &WeightGrid<T>,
        layout: &PatchLayout,
    ) -> Result<Tensor<T>> {
        let call = (name.to_string(), x.clone(), wg.clone(), *layout);
        self.calls.lock().expect("recorder lock").push(call);
        dpwconv(x, wg, layout, DpwKernel::Tiled)
    }
}

/// Times every dynamic convolution of one forward pass and the whole forward
/// with each kernel. Runs on the current worker pool.
pub fn run_bench<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    iterations: usize,
) -> Result<BenchReport> {
    let iterations = iterations.max(1);
    let recorder = Recorder::new();
    model.forward_with(image, &recorder)?;
    let levels: Vec<usize> = model
        .blocks
        .iter()
        .rev()
        .flat_map(|b| vec![b.spec.level; b.spec.pieces().len()])
        .collect();
    let mut ops = Vec::new();
    for ((name, x, wg, layout), level) in recorder.into_calls().into_iter().zip(levels) {
        let s = x.shape();
        let a = dpwconv(&x, &wg, &layout, DpwKernel::Naive)?;
        let b = dpwconv(&x, &wg, &layout, DpwKernel::Tiled)?;
        ops.push(OpTiming {
            name: format!("m{level}.{name}"),
            shape: format!(
                "{}x{}x{} -> {}, k{}, grid {}x{}",
                s.c, s.h, s.w, wg.c_out, wg.kh, layout.nh, layout.nw
            ),
            naive: time(iterations, || {
                let _ = dpwconv(&x, &wg, &layout, DpwKernel::Naive);
            }),
            tiled: time(iterations, || {
                let _ = dpwconv(&x, &wg, &layout, DpwKernel::Tiled);
            }),
            bit_identical: a.bit_eq(&b),
        });
    }
    let model_naive = time(iterations, || {
        let _ = model.forward_with(image, &DpwKernel::Naive);
    });
    let model_tiled = time(iterations, || {
        let _ = model.forward_with(image, &DpwKernel::Tiled);
    });
    let naive: f64 = ops.iter().map(|o| o.naive.mean_ms).sum();
    let tiled: f64 = ops.iter().map(|o| o.tiled.mean_ms).sum();
    Ok(BenchReport {
        model: model.config.name.clone(),
        precision: format!("{:?}", T::DTYPE).to_lowercase(),
        workers: crate::par::current_workers(),
        iterations,
        ops,
        model_naive,
        model_tiled,
        totals: BenchTotals {
            ops_naive_mean_ms: naive,
            ops_tiled_mean_ms: tiled,
            speedup: if tiled > 0.0 { naive / tiled } else { 1.0 },
        },
    })
}
