//! Microbenchmark harness: time a kernel (or the whole layer) over a sweep of
//! block sizes and emit one CSV row per configuration.
//!
//! Kernel benches construct the sparse topology once, outside the timed
//! region; the `dmoe` bench times the full layer, metadata included, since
//! that is what a training step pays. Three untimed warmup repetitions
//! precede every measurement.

use std::hint::black_box;
use std::sync::Arc;
use std::time::Instant;

use blockmoe::bcsr::{BlockSparseMatrix, BlockTopology};
use blockmoe::dense::DenseMatrix;
use blockmoe::kernels::{dds, dsd, sdd};
use blockmoe::moe::{
    dmoe_forward, make_permutation, plan_topology, router_forward, MoEConfig, MoEWeights,
    PermutationPlan, Preset,
};
use blockmoe::rng::Stream;

use crate::CmdError;

pub const CSV_HEADER: &str = "name,m,k,n,block_size,nnz_blocks,reps,mean_s,std_s,gflops";

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub kind: String,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub density: f64,
    pub preset: Option<Preset>,
    pub tokens: usize,
    pub block_sizes: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub dry_run: bool,
}

struct Case {
    name: String,
    m: usize,
    k: usize,
    n: usize,
    block_size: usize,
    nnz_blocks: usize,
    /// Useful floating-point operations per repetition.
    flops: u64,
    runner: Option<Box<dyn FnMut()>>,
}

fn random_matrix(s: &mut Stream, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| s.symmetric())
}

fn random_topology(
    s: &mut Stream,
    bm: usize,
    bn: usize,
    bs: usize,
    density: f64,
) -> Result<Arc<BlockTopology>, CmdError> {
    if !(0.0..=1.0).contains(&density) {
        return Err(CmdError::Usage(format!(
            "--density {density} must be in (0, 1]"
        )));
    }
    let grid = bm * bn;
    let want = ((grid as f64 * density).round() as usize).clamp(1, grid);
    // Sample exactly `want` cells without replacement so nnz is predictable.
    let mut cells: Vec<usize> = (0..grid).collect();
    for i in 0..want {
        let j = i + s.below(grid - i);
        cells.swap(i, j);
    }
    let coords: Vec<(usize, usize)> = cells[..want].iter().map(|&c| (c / bn, c % bn)).collect();
    Ok(Arc::new(
        BlockTopology::from_blocks(&coords, bm, bn, bs).unwrap(),
    ))
}

fn random_sparse(s: &mut Stream, topo: Arc<BlockTopology>) -> BlockSparseMatrix {
    let len = topo.nnz_blocks() * topo.block_size() * topo.block_size();
    let values: Vec<f64> = (0..len).map(|_| s.symmetric()).collect();
    BlockSparseMatrix::new(topo, values).unwrap()
}

fn need_divisible(what: &str, value: usize, bs: usize) -> Result<usize, CmdError> {
    if value == 0 || !value.is_multiple_of(bs) {
        return Err(CmdError::Usage(format!(
            "{what} = {value} must be a positive multiple of block size {bs}"
        )));
    }
    Ok(value / bs)
}

/// Round-robin token assignment over a preset's experts, giving the plan and
/// topology the kernel benches mirror.
fn preset_plan(
    preset: Preset,
    block_size: usize,
    tokens: usize,
) -> Result<(MoEConfig, PermutationPlan, Arc<BlockTopology>), CmdError> {
    let mut config = MoEConfig::preset(preset);
    if !config.ffn_hidden_size.is_multiple_of(block_size) {
        return Err(CmdError::Usage(format!(
            "block size {block_size} does not divide preset ffn_hidden_size {}",
            config.ffn_hidden_size
        )));
    }
    config.block_size = block_size;
    let e = config.num_experts;
    let scores = DenseMatrix::from_fn(tokens, e, |t, c| if t % e == c { 60.0 } else { 0.0 });
    let assignment = router_forward(&scores, &DenseMatrix::identity(e), 1, false)
        .map_err(|err| CmdError::Usage(err.to_string()))?;
    let plan = make_permutation(&assignment, &config, tokens);
    let topo = plan_topology(&plan, &config).map_err(|err| CmdError::Usage(err.to_string()))?;
    Ok((config, plan, topo))
}

fn kernel_case(args: &BenchArgs, block_size: usize) -> Result<Case, CmdError> {
    let mut s = Stream::new(args.seed, block_size as u64);

    // Resolve effective (m, k, n) and the sparse topology. The sparse operand
    // is the m x n output for sdd, the m x k left input for dsd and the k x n
    // right input for dds.
    let (m, k, n, topo) = if let Some(preset) = args.preset {
        let (config, plan, topo) = preset_plan(preset, block_size, args.tokens)?;
        let t_pad = plan.total_padded_rows();
        let hidden = config.hidden_size;
        let inner = config.inner_dim();
        match args.kind.as_str() {
            // First expert layer: (t_pad x hidden) · (hidden x inner) -> sparse.
            "sdd" => (t_pad, hidden, inner, topo),
            // Second expert layer: sparse (t_pad x inner) · stacked w2.
            "dsd" => (t_pad, inner, hidden, topo),
            // First-layer weight gradient shape: denseᵀ · sparse.
            "dds" => (hidden, t_pad, inner, topo),
            other => return Err(CmdError::Usage(format!("unknown bench kind `{other}`"))),
        }
    } else {
        let (Some(m), Some(k), Some(n)) = (args.m, args.k, args.n) else {
            return Err(CmdError::Usage(
                "kernel benches need --m, --k and --n (or --preset)".into(),
            ));
        };
        let topo = match args.kind.as_str() {
            "sdd" => {
                let bm = need_divisible("--m", m, block_size)?;
                let bn = need_divisible("--n", n, block_size)?;
                random_topology(&mut s, bm, bn, block_size, args.density)?
            }
            "dsd" => {
                let bm = need_divisible("--m", m, block_size)?;
                let bk = need_divisible("--k", k, block_size)?;
                random_topology(&mut s, bm, bk, block_size, args.density)?
            }
            "dds" => {
                let bk = need_divisible("--k", k, block_size)?;
                let bn = need_divisible("--n", n, block_size)?;
                random_topology(&mut s, bk, bn, block_size, args.density)?
            }
            other => return Err(CmdError::Usage(format!("unknown bench kind `{other}`"))),
        };
        (m, k, n, topo)
    };

    let nnz = topo.nnz_blocks();
    let area = (block_size * block_size) as u64;
    let flops = match args.kind.as_str() {
        "sdd" => 2 * nnz as u64 * area * k as u64,
        "dsd" => 2 * nnz as u64 * area * n as u64,
        _ => 2 * nnz as u64 * area * m as u64,
    };

    let runner: Option<Box<dyn FnMut()>> = if args.dry_run {
        None
    } else {
        match args.kind.as_str() {
            "sdd" => {
                let a = random_matrix(&mut s, m, k);
                let b = random_matrix(&mut s, k, n);
                let topo = topo.clone();
                Some(Box::new(move || {
                    black_box(sdd(&a, &b, topo.clone(), false, false).unwrap());
                }))
            }
            "dsd" => {
                let sp = random_sparse(&mut s, topo.clone());
                let b = random_matrix(&mut s, k, n);
                Some(Box::new(move || {
                    black_box(dsd(&sp, &b, false, false).unwrap());
                }))
            }
            _ => {
                let sp = random_sparse(&mut s, topo.clone());
                let a = random_matrix(&mut s, m, k);
                Some(Box::new(move || {
                    black_box(dds(&a, &sp, false, false).unwrap());
                }))
            }
        }
    };

    Ok(Case {
        name: args.kind.clone(),
        m,
        k,
        n,
        block_size,
        nnz_blocks: nnz,
        flops,
        runner,
    })
}

fn dmoe_case(args: &BenchArgs, block_size: usize) -> Result<Case, CmdError> {
    let Some(preset) = args.preset else {
        return Err(CmdError::Usage("bench dmoe requires --preset".into()));
    };
    let (config, plan, topo) = preset_plan(preset, block_size, args.tokens)?;
    let flops: u64 = plan
        .padded_counts()
        .iter()
        .map(|&p| 2 * p as u64 * config.ffn_hidden_size as u64 * (2 * config.hidden_size as u64))
        .sum();
    let nnz = topo.nnz_blocks();
    let runner: Option<Box<dyn FnMut()>> = if args.dry_run {
        None
    } else {
        let mut s = Stream::new(args.seed, 77);
        let w = MoEWeights::random(&config, args.seed);
        let x = random_matrix(&mut s, args.tokens, config.hidden_size);
        let config = config.clone();
        Some(Box::new(move || {
            black_box(dmoe_forward(&x, &w, &config).unwrap());
        }))
    };
    Ok(Case {
        name: "dmoe".into(),
        m: args.tokens,
        k: config.hidden_size,
        n: config.inner_dim(),
        block_size,
        nnz_blocks: nnz,
        flops,
        runner,
    })
}

fn measure(case: &mut Case, reps: usize, warmup: usize) -> (f64, f64) {
    let runner = case.runner.as_mut().expect("runner present unless dry run");
    for _ in 0..warmup {
        runner();
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        runner();
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = if reps > 1 {
        times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (reps - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Run the sweep; returns CSV lines (header first) or, for a dry run, one
/// resolved-plan line per block size.
pub fn run(args: &BenchArgs) -> Result<Vec<String>, CmdError> {
    if args.reps == 0 {
        return Err(CmdError::Usage("--reps must be positive".into()));
    }
    if args.block_sizes.is_empty() {
        return Err(CmdError::Usage(
            "--block-size list must not be empty".into(),
        ));
    }
    let mut lines = Vec::new();
    if !args.dry_run {
        lines.push(CSV_HEADER.to_string());
    }
    for &bs in &args.block_sizes {
        if bs == 0 {
            return Err(CmdError::Usage("block size must be positive".into()));
        }
        let mut case = match args.kind.as_str() {
            "dmoe" => dmoe_case(args, bs)?,
            _ => kernel_case(args, bs)?,
        };
        if args.dry_run {
            lines.push(format!(
                "plan name={} m={} k={} n={} block_size={} nnz_blocks={} reps={}",
                case.name, case.m, case.k, case.n, case.block_size, case.nnz_blocks, args.reps
            ));
            continue;
        }
        let (mean_s, std_s) = measure(&mut case, args.reps, args.warmup);
        let gflops = case.flops as f64 / mean_s / 1e9;
        lines.push(format!(
            "{},{},{},{},{},{},{},{:.9e},{:.9e},{:.4}",
            case.name,
            case.m,
            case.k,
            case.n,
            case.block_size,
            case.nnz_blocks,
            args.reps,
            mean_s,
            std_s,
            gflops
        ));
    }
    Ok(lines)
}
