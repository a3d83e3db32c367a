//! Routing statistics: expected drop fraction per capacity factor under a
//! sampled token-to-expert distribution, plus the per-expert load histogram.

use blockmoe::moe::expert_capacity;
use blockmoe::rng::Stream;

use crate::CmdError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform,
    Zipf(f64),
    Onehot,
}

impl std::str::FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "uniform" {
            return Ok(Distribution::Uniform);
        }
        if s == "onehot" {
            return Ok(Distribution::Onehot);
        }
        if let Some(a) = s.strip_prefix("zipf:") {
            let a: f64 = a
                .parse()
                .map_err(|_| format!("invalid zipf exponent `{a}`"))?;
            if a < 0.0 {
                return Err("zipf exponent must be nonnegative".into());
            }
            return Ok(Distribution::Zipf(a));
        }
        Err(format!(
            "unknown distribution `{s}` (expected uniform|zipf:<a>|onehot)"
        ))
    }
}

fn sample_counts(
    dist: Distribution,
    num_experts: usize,
    tokens: usize,
    s: &mut Stream,
) -> Vec<usize> {
    let mut counts = vec![0usize; num_experts];
    match dist {
        Distribution::Onehot => counts[0] = tokens,
        // Exactly balanced shares: the no-imbalance baseline against which
        // the skewed distributions are read.
        Distribution::Uniform => {
            for (e, c) in counts.iter_mut().enumerate() {
                *c = tokens / num_experts + usize::from(e < tokens % num_experts);
            }
        }
        Distribution::Zipf(a) => {
            let weights: Vec<f64> = (0..num_experts)
                .map(|e| ((e + 1) as f64).powf(-a))
                .collect();
            let total: f64 = weights.iter().sum();
            for _ in 0..tokens {
                let mut u = s.uniform() * total;
                let mut pick = num_experts - 1;
                for (e, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = e;
                        break;
                    }
                    u -= w;
                }
                counts[pick] += 1;
            }
        }
    }
    counts
}

/// Deterministic report for the given flags, one line per capacity factor.
pub fn run(
    num_experts: usize,
    tokens: usize,
    capacity_factors: &[f64],
    dist: Distribution,
    seed: u64,
    samples: usize,
) -> Result<String, CmdError> {
    if num_experts == 0 || tokens == 0 || samples == 0 {
        return Err(CmdError::Usage(
            "--num-experts, --tokens and --samples must be positive".into(),
        ));
    }
    for &cf in capacity_factors {
        if !(cf.is_finite() && cf > 0.0) {
            return Err(CmdError::Usage(format!(
                "capacity factor {cf} must be positive"
            )));
        }
    }

    // Draw the assignments once and evaluate every capacity factor against
    // the same samples, which also makes the drop fractions monotone.
    let all_counts: Vec<Vec<usize>> = (0..samples)
        .map(|i| {
            let mut s = Stream::new(seed, i as u64);
            sample_counts(dist, num_experts, tokens, &mut s)
        })
        .collect();

    let dist_name = match dist {
        Distribution::Uniform => "uniform".to_string(),
        Distribution::Onehot => "onehot".to_string(),
        Distribution::Zipf(a) => format!("zipf:{a}"),
    };
    let mut out = format!(
        "stats: distribution={dist_name} num_experts={num_experts} tokens={tokens} samples={samples} seed={seed}\n"
    );
    for &cf in capacity_factors {
        let capacity = expert_capacity(tokens, num_experts, cf);
        let mean_drop: f64 = all_counts
            .iter()
            .map(|counts| {
                let dropped: usize = counts.iter().map(|&c| c.saturating_sub(capacity)).sum();
                dropped as f64 / tokens as f64
            })
            .sum::<f64>()
            / samples as f64;
        out.push_str(&format!(
            "capacity_factor={cf} capacity={capacity} mean_drop_fraction={mean_drop:?}\n"
        ));
    }

    let mean_loads: Vec<String> = (0..num_experts)
        .map(|e| {
            let mean = all_counts.iter().map(|c| c[e] as f64).sum::<f64>() / samples as f64;
            format!("{mean:?}")
        })
        .collect();
    out.push_str(&format!("mean_load_per_expert={}\n", mean_loads.join(",")));
    Ok(out)
}
