//! Wall-clock scaling runs of the attention kernels.

use std::path::Path;
use std::time::Instant;

use lamformer_core::bench::{KernelSetup, Variant};

use crate::error::{Error, Result};

pub const WARMUP: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    pub r: usize,
    /// Median over the timed repeats.
    pub wall_ns: u64,
    pub mac_count: u64,
    /// Bytes of tensors held by the tape at the end of the forward pass.
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSpec {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    pub channels: usize,
    /// Query/key width.
    pub dim: usize,
    pub ratio: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl ScalingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::Config(format!(
                "repeats must be >= 5, got {}",
                self.repeats
            )));
        }
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lengths must be nonempty and strictly ascending, got {:?}",
                self.lengths
            )));
        }
        if self.channels == 0 || self.dim == 0 || self.ratio == 0 {
            return Err(Error::Config("channels, dim and ratio must be >= 1".into()));
        }
        Ok(())
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2
    }
}

/// Time one kernel configuration.
pub fn measure(variant: Variant, n: usize, spec: &ScalingSpec) -> Result<BenchRecord> {
    let setup = KernelSetup::new(variant, n, spec.channels, spec.dim, spec.ratio, spec.seed)?;
    let mut counts = (0, 0);
    for _ in 0..WARMUP {
        counts = setup.run()?;
    }
    let mut times = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        let start = Instant::now();
        let c = setup.run()?;
        times.push((start.elapsed().as_nanos() as u64).max(1));
        debug_assert_eq!(c, counts);
    }
    Ok(BenchRecord {
        variant,
        n,
        c: spec.channels,
        r: if variant == Variant::Rsa {
            spec.ratio
        } else {
            1
        },
        wall_ns: median(times),
        mac_count: counts.0,
        peak_bytes: counts.1,
    })
}

pub fn run_scaling(spec: &ScalingSpec) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &v in &spec.variants {
        for &n in &spec.lengths {
            out.push(measure(v, n, spec)?);
        }
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "N",
        "C",
        "R",
        "wall_ns",
        "mac_count",
        "peak_bytes",
    ])?;
    for r in records {
        w.write_record([
            r.variant.to_string(),
            r.n.to_string(),
            r.c.to_string(),
            r.r.to_string(),
            r.wall_ns.to_string(),
            r.mac_count.to_string(),
            r.peak_bytes.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
