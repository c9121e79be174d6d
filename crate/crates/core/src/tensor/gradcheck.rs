use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is zero compare on an absolute scale.
    pub floor: f64,
    /// Check at most this many seeded entries of each parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares the gradients stored in `store` against central differences of `f`.
pub fn finite_difference_check<F>(
    mut f: F,
    store: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be > 0".into()));
    }
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name)?.len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for k in entries {
            let orig = store.get(&name)?.data()[k];
            probe.get_mut(&name)?.data_mut()[k] = orig + opts.eps;
            let plus = f(&probe)?;
            probe.get_mut(&name)?.data_mut()[k] = orig - opts.eps;
            let minus = f(&probe)?;
            probe.get_mut(&name)?.data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective while perturbing {name}[{k}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = store.grad(&name)?.data()[k];
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

type Build = fn(&mut Graph) -> Result<Var>;

fn params(g: &mut Graph, names: &[&str]) -> Result<Vec<Var>> {
    names.iter().map(|n| g.param(n)).collect()
}

/// Every differentiable primitive on small random operands. Each entry is
/// `(name, operand shapes, graph builder)`; operands are parameters `a`, `b`, `c`.
const PRIMITIVES: &[(&str, &[&[usize]], Build)] = &[
    ("linear", &[&[4, 3], &[3, 5], &[1, 5]], |g| {
        let v = params(g, &["a", "b", "c"])?;
        g.linear(v[0], v[1], Some(v[2]))
    }),
    ("matmul", &[&[3, 4], &[4, 2]], |g| {
        let v = params(g, &["a", "b"])?;
        g.matmul(v[0], v[1])
    }),
    ("add", &[&[3, 4], &[3, 4]], |g| {
        let v = params(g, &["a", "b"])?;
        g.add(v[0], v[1])
    }),
    ("sub", &[&[3, 4], &[3, 4]], |g| {
        let v = params(g, &["a", "b"])?;
        g.sub(v[0], v[1])
    }),
    ("maximum", &[&[3, 4], &[3, 4]], |g| {
        let v = params(g, &["a", "b"])?;
        g.maximum(v[0], v[1])
    }),
    ("relu", &[&[5, 4]], |g| {
        let a = g.param("a")?;
        g.relu(a)
    }),
    ("concat", &[&[3, 2], &[3, 4]], |g| {
        let v = params(g, &["a", "b"])?;
        g.concat(&v)
    }),
    ("gather", &[&[4, 3]], |g| {
        let a = g.param("a")?;
        g.gather(a, Arc::new(vec![2, 0, 2, 3, 1, 2]))
    }),
    ("group_max", &[&[6, 3]], |g| {
        let a = g.param("a")?;
        g.group_max(a, 3)
    }),
    ("maxpool_points", &[&[5, 4]], |g| {
        let a = g.param("a")?;
        g.maxpool_points(a)
    }),
    ("softmax_rows", &[&[3, 5]], |g| {
        let a = g.param("a")?;
        g.softmax_rows(a)
    }),
    ("l2_normalize_rows", &[&[3, 5]], |g| {
        let a = g.param("a")?;
        g.l2_normalize_rows(a)
    }),
    ("reshape", &[&[2, 6]], |g| {
        let a = g.param("a")?;
        g.reshape(a, vec![3, 4])
    }),
    ("vlad_residual", &[&[5, 3], &[5, 4], &[3, 4]], |g| {
        let v = params(g, &["a", "b", "c"])?;
        let assign = g.softmax_rows(v[0])?;
        g.vlad_residual(assign, v[1], v[2])
    }),
];

/// Finite-difference check of every graph primitive against a random linear
/// functional of its output.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for &(name, shapes, build) in PRIMITIVES {
        let mut store = ParamStore::new(seed);
        for (shape, pname) in shapes.iter().zip(["a", "b", "c"]) {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.insert(pname, Tensor::new(shape.to_vec(), data)?)?;
        }
        let out_shape = {
            let mut g = Graph::new(&store);
            let y = build(&mut g)?;
            g.value(y).shape().to_vec()
        };
        let n: usize = out_shape.iter().product();
        let weights = Tensor::new(out_shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let objective = |p: &ParamStore| -> Result<f64> {
            let mut g = Graph::new(p);
            let y = build(&mut g)?;
            Ok(g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
        };
        let grads = {
            let mut g = Graph::new(&store);
            let y = build(&mut g)?;
            g.backward(y, &weights)?
        };
        store.accumulate(&grads)?;
        let report = finite_difference_check(objective, &store, &GradCheckOptions::default())?;
        out.push((name, report));
    }
    Ok(out)
}
