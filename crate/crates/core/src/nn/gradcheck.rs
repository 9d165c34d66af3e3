//! Central finite-difference verification of analytic parameter gradients.

use super::{ForwardOptions, Network, ParamGrads, Result, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen entries per parameter block.
    /// `None` checks every entry.
    pub max_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_block: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub len: usize,
}

/// Per-block maximum relative errors, sorted descending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.first().map_or(0.0, |b| b.max_rel_error)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("block,max_rel_error,checked,len\n");
        for b in &self.blocks {
            s.push_str(&format!("{},{:.3e},{},{}\n", b.name, b.max_rel_error, b.checked, b.len));
        }
        s
    }
}

/// Relative error `|a - fd| / max(1, |fd|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` against central differences of `objective`, which
/// must evaluate the scalar loss without mutating anything but parameters.
pub fn grad_check_with<F>(
    net: &mut Network,
    analytic: &ParamGrads,
    mut objective: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&Network) -> Result<f64>,
{
    let meta: Vec<(String, usize)> = net.params().map(|p| (p.name.clone(), p.data.len())).collect();
    let mut rng = Rng::new(opts.seed);
    let mut blocks = Vec::with_capacity(meta.len());
    for (bi, (name, len)) in meta.into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..len).collect();
        if let Some(k) = opts.max_per_block {
            if k < len {
                rng.shuffle(&mut idx);
                idx.truncate(k);
                idx.sort_unstable();
            }
        }
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = param_value(net, bi, i);
            set_param_value(net, bi, i, orig + opts.step);
            let up = objective(net);
            set_param_value(net, bi, i, orig - opts.step);
            let down = objective(net);
            set_param_value(net, bi, i, orig);
            let fd = (up? - down?) / (2.0 * opts.step);
            worst = worst.max(rel_error(analytic.blocks[bi][i], fd));
        }
        blocks.push(BlockError {
            name,
            max_rel_error: worst,
            checked: idx.len(),
            len,
        });
    }
    blocks.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    Ok(GradCheckReport { blocks })
}

/// Gradient check for a loss defined on the network output. `loss_fn`
/// returns the scalar loss and its gradient with respect to the output.
/// Running statistics are left untouched.
pub fn grad_check<F>(
    net: &mut Network,
    batch: &Tensor,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    let out = net.infer_with(
        batch,
        ForwardOptions {
            cache: true,
            ..Default::default()
        },
    )?;
    let (_, g) = loss_fn(&out.output);
    let (_, analytic) = net.backward(out.cache.as_ref().expect("cache requested"), &g)?;
    grad_check_with(net, &analytic, |n| Ok(loss_fn(&n.infer(batch)?).0), opts)
}

fn param_value(net: &Network, block: usize, i: usize) -> f64 {
    net.params().nth(block).expect("block index").data[i]
}

fn set_param_value(net: &mut Network, block: usize, i: usize, v: f64) {
    net.params_mut().nth(block).expect("block index").data[i] = v;
}
