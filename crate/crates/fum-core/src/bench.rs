//! Scaling benchmark: wall-clock and exact flop counts of both mixers
//! over increasing sequence lengths, on frozen random weights. The claim
//! under test is architectural complexity, not learned behavior.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnScoring, FastformerLayer, SelfAttnLayer, SequenceMixer};
use crate::config::BenchSettings;
use crate::error::{Error, Result};
use crate::store::{Graph, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    Fastformer,
    SelfAttention,
}

impl MixerKind {
    pub const ALL: [MixerKind; 2] = [MixerKind::Fastformer, MixerKind::SelfAttention];
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mixer: &'static str,
    pub len: usize,
    pub trials: usize,
    pub mean_s: f64,
    pub stdev_s: f64,
    pub median_s: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const TSV_HEADER: &'static str = "mixer\tlength\ttrials\tmean_ms\tstdev_ms\tmedian_ms\tflops";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{}\n",
                r.mixer,
                r.len,
                r.trials,
                r.mean_s * 1e3,
                r.stdev_s * 1e3,
                r.median_s * 1e3,
                r.flops
            ));
        }
        out
    }

    pub fn row(&self, mixer: &str, len: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mixer == mixer && r.len == len)
    }
}

fn build_mixer(kind: MixerKind, cfg: &BenchSettings) -> (Box<dyn SequenceMixer>, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C);
    let mut store = ParamStore::new(0xBE7C);
    let mixer: Box<dyn SequenceMixer> = match kind {
        MixerKind::Fastformer => {
            let layer = FastformerLayer::new(
                "bench.ff",
                cfg.d_in,
                cfg.heads,
                cfg.head_dim,
                AttnScoring::LearnedVector,
                false,
            );
            layer.register(&mut store, &mut rng).unwrap();
            Box::new(layer)
        }
        MixerKind::SelfAttention => {
            let layer = SelfAttnLayer::new("bench.sa", cfg.d_in, cfg.heads, cfg.head_dim);
            layer.register(&mut store, &mut rng).unwrap();
            Box::new(layer)
        }
    };
    // Score vectors register as zeros; give them spread so softmax inputs
    // are not degenerate during timing.
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let t = store.get_mut(&name).unwrap();
        if t.values().iter().all(|&v| v == 0.0) {
            for v in t.values_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    (mixer, store)
}

/// Times one forward pass per trial for every (mixer, length) pair,
/// excluding one warm-up pass, single-threaded.
pub fn measure_scaling(mixers: &[MixerKind], cfg: &BenchSettings) -> Result<BenchReport> {
    if cfg.lengths.len() < 3 || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "bench_lengths must be at least 3 ascending values".into(),
        ));
    }
    if cfg.trials < 5 {
        return Err(Error::Config("bench_trials must be at least 5".into()));
    }
    let mut report = BenchReport::default();
    for &kind in mixers {
        let (mixer, store) = build_mixer(kind, cfg);
        for &len in &cfg.lengths {
            let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
            let input: Vec<Real> = (0..len * cfg.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mask = vec![true; len];
            let run_once = || -> Result<f64> {
                let mut g = Graph::frozen(&store);
                let x = g.constant(input.clone(), vec![len, cfg.d_in])?;
                let start = Instant::now();
                let out = mixer.mix(&mut g, x, &mask)?;
                let elapsed = start.elapsed().as_secs_f64();
                assert_eq!(g.shape(out), &[len, mixer.d_out()]);
                Ok(elapsed)
            };
            run_once()?; // warm-up, excluded
            let mut times = Vec::with_capacity(cfg.trials);
            for _ in 0..cfg.trials {
                times.push(run_once()?);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
                / times.len() as f64;
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            report.rows.push(BenchRow {
                mixer: mixer.name(),
                len,
                trials: cfg.trials,
                mean_s: mean,
                stdev_s: var.sqrt(),
                median_s: median,
                flops: mixer.flop_count(len),
            });
        }
    }
    Ok(report)
}
