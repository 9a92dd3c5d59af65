//! Finite-difference trials for every differentiable tape op and for the
//! full forecasting loss, shared by the gradient tests and the acceptance run.

use std::collections::BTreeMap;

use super::{project, random};
use scpt::autograd::{finite_diff_check, finite_diff_check_five_point, NormMode, PoolKind, Tape, TensorError, Var};
use scpt::backbone::{Backbone, BackboneConfig, Flags, Supports};
use scpt::nn::Bound;

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>>;

const STEP: f64 = 1e-6;
pub const PER_OP: f64 = 1e-4;
pub const END_TO_END: f64 = 1e-3;

/// Worst relative error per op over a few random points.
#[derive(Default)]
pub struct Checks {
    pub worst: Vec<(String, f64)>,
}

impl Checks {
    fn check(&mut self, name: &str, shape: &[usize], trials: u64, f: impl Fn(u64) -> OpFn) {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let point = random(shape, 1000 + trial);
            let op = f(trial);
            let err = finite_diff_check(|t, x| op(t, x).and_then(|y| project(t, y, 77 + trial)), &point, STEP)
                .unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
        self.worst.push((name.to_string(), worst));
    }

    /// Every differentiable op.
    pub fn all() -> Self {
        let mut c = Self::default();
        elementwise_and_shape_ops(&mut c);
        linear_algebra_ops(&mut c);
        normalization_pooling_and_losses(&mut c);
        c
    }
}

fn constant(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
    t.constant(random(shape, seed)).unwrap()
}

pub fn elementwise_and_shape_ops(c: &mut Checks) {
    c.check("add", &[3, 4], 3, |s| {
        Box::new(move |t, x| {
            let c = constant(t, &[3, 4], s);
            t.add(x, c)
        })
    });
    c.check("sub", &[3, 4], 3, |s| {
        Box::new(move |t, x| {
            let c = constant(t, &[3, 4], s);
            t.sub(c, x)
        })
    });
    c.check("mul", &[3, 4], 3, |s| {
        Box::new(move |t, x| {
            let c = constant(t, &[3, 4], s);
            t.mul(x, c)
        })
    });
    c.check("add_bias.x", &[2, 3, 4], 3, |s| {
        Box::new(move |t, x| {
            let b = constant(t, &[4], s);
            t.add_bias(x, b)
        })
    });
    c.check("add_bias.bias", &[4], 3, |s| {
        Box::new(move |t, b| {
            let x = constant(t, &[2, 3, 4], s);
            t.add_bias(x, b)
        })
    });
    c.check("broadcast", &[2, 1, 3], 3, |_| Box::new(|t, x| t.broadcast(x, &[2, 4, 3])));
    c.check("reshape", &[2, 6], 2, |_| Box::new(|t, x| t.reshape(x, &[3, 4])));
    c.check("transpose", &[3, 5], 2, |_| Box::new(|t, x| t.transpose(x)));
    c.check("affine", &[5], 2, |_| Box::new(|t, x| t.affine(x, -2.5, 0.3)));
    c.check("sigmoid", &[6], 3, |_| Box::new(|t, x| t.sigmoid(x)));
    c.check("tanh", &[6], 3, |_| Box::new(|t, x| t.tanh(x)));
    // shift away from the kink
    c.check("relu", &[6], 3, |_| {
        Box::new(|t, x| {
            let y = t.mul(x, x)?;
            let y = t.affine(y, 1.0, -0.3)?;
            t.relu(y)
        })
    });
    c.check("sum", &[7], 2, |_| Box::new(|t, x| t.sum(x)));
    c.check("mean", &[7], 2, |_| Box::new(|t, x| t.mean(x)));
    c.check("concat", &[2, 3], 3, |s| {
        Box::new(move |t, x| {
            let c = constant(t, &[2, 2], s);
            t.concat(&[c, x, c], 1)
        })
    });
    c.check("slice", &[2, 6, 3], 3, |_| Box::new(|t, x| t.slice(x, 1, 2, 3)));
    c.check("gather", &[3, 4, 2], 3, |_| Box::new(|t, x| t.gather(x, vec![vec![1, 3], vec![0, 2], vec![3, 1]])));
}

pub fn linear_algebra_ops(c: &mut Checks) {
    c.check("matmul.a", &[2, 3, 4], 3, |s| {
        Box::new(move |t, a| {
            let b = constant(t, &[4, 5], s);
            t.matmul(a, b)
        })
    });
    c.check("matmul.b", &[4, 5], 3, |s| {
        Box::new(move |t, b| {
            let a = constant(t, &[2, 3, 4], s);
            t.matmul(a, b)
        })
    });
    c.check("graph_prop.x", &[2, 3, 4, 2], 3, |s| {
        Box::new(move |t, x| {
            let a = constant(t, &[3, 3], s);
            t.graph_prop(a, x)
        })
    });
    c.check("graph_prop.adj", &[3, 3], 3, |s| {
        Box::new(move |t, a| {
            let x = constant(t, &[2, 3, 4, 2], s);
            t.graph_prop(a, x)
        })
    });
    for (stride, dilation) in [(1, 1), (1, 2), (2, 1), (3, 2)] {
        c.check("conv1d.x", &[2, 11, 3], 2, move |s| {
            Box::new(move |t, x| {
                let (w, b) = (constant(t, &[3, 3, 4], s), constant(t, &[4], s + 9));
                t.conv1d(x, w, Some(b), stride, dilation)
            })
        });
        c.check("conv1d.w", &[3, 3, 4], 2, move |s| {
            Box::new(move |t, w| {
                let x = constant(t, &[2, 11, 3], s);
                t.conv1d(x, w, None, stride, dilation)
            })
        });
        c.check("conv1d.bias", &[4], 2, move |s| {
            Box::new(move |t, b| {
                let (x, w) = (constant(t, &[2, 11, 3], s), constant(t, &[3, 3, 4], s + 5));
                t.conv1d(x, w, Some(b), stride, dilation)
            })
        });
    }
}

pub fn normalization_pooling_and_losses(c: &mut Checks) {
    c.check("softmax.0", &[3, 4], 3, |_| Box::new(|t, x| t.softmax(x, 0)));
    c.check("softmax.1", &[3, 4], 3, |_| Box::new(|t, x| t.softmax(x, 1)));
    c.check("l2_normalize", &[4, 3], 3, |_| Box::new(|t, x| t.l2_normalize(x)));
    c.check("batch_norm.x", &[6, 3], 3, |s| {
        Box::new(move |t, x| {
            let (g, b) = (constant(t, &[3], s), constant(t, &[3], s + 1));
            t.batch_norm(x, g, b, &NormMode::Batch)
        })
    });
    c.check("batch_norm.gamma", &[3], 3, |s| {
        Box::new(move |t, g| {
            let (x, b) = (constant(t, &[2, 4, 3], s), constant(t, &[3], s + 1));
            t.batch_norm(x, g, b, &NormMode::Batch)
        })
    });
    c.check("batch_norm.beta", &[3], 3, |s| {
        Box::new(move |t, b| {
            let (x, g) = (constant(t, &[6, 3], s), constant(t, &[3], s + 1));
            t.batch_norm(x, g, b, &NormMode::Batch)
        })
    });
    for (axis, kind) in [(1, PoolKind::Mean), (1, PoolKind::Std), (1, PoolKind::Max), (0, PoolKind::Std)] {
        c.check("pool", &[3, 5, 2], 3, move |_| Box::new(move |t, x| t.pool(x, axis, kind)));
    }
    c.check("cross_entropy", &[4, 4], 3, |_| {
        Box::new(|t, x| t.cross_entropy(x, &[2, 3, 0, 1], &[Some(0), None, Some(2), Some(3)]))
    });
    c.check("masked_mae", &[2, 3], 3, |s| {
        Box::new(move |t, x| {
            let target = random(&[2, 3], s + 50).map(|v| v + 3.0);
            t.masked_mae(x, &target, &[true, false, true, true, true, false])
        })
    });
}

/// Five-point finite-difference error of the full forecasting loss on three roads.
pub fn end_to_end_error() -> f64 {
    let cfg = BackboneConfig { hidden: 4, skip: 3, end: 5, layers: 4, gate_hidden: 5, ..Default::default() };
    let model = Backbone::new(cfg, Flags::ALL_ON, 4, 3).unwrap();
    let sup = Supports::from_adjacency(&[1.0, 0.6, 0.0, 0.3, 1.0, 0.8, 0.0, 0.5, 1.0], 3).unwrap();
    let inputs = random(&[2, 3, 12, 2], 11);
    let embeddings = random(&[3, 4], 12);
    let targets = random(&[2, 3, 12], 13).map(|v| 5.0 * v);
    let mask: Vec<bool> = (0..72).map(|i| i % 7 != 3).collect();
    let names: Vec<(String, Vec<usize>)> = model.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    // a random point rather than the initialisation: at init most gradients
    // are ~1e-8 and drown in round-off
    let total: usize = names.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let point = random(&[total], 14);

    let loss = |t: &mut Tape, theta: Var| -> Result<Var, TensorError> {
        let mut vars = BTreeMap::new();
        let mut offset = 0;
        for (name, shape) in &names {
            let len: usize = shape.iter().product();
            let piece = t.slice(theta, 0, offset, len)?;
            vars.insert(name.clone(), t.reshape(piece, shape)?);
            offset += len;
        }
        let p = Bound::from_vars(vars);
        let x = t.constant(inputs.clone())?;
        let e = t.constant(embeddings.clone())?;
        let y = model.forward(t, &p, x, &sup, Some(e)).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
        t.masked_mae(y, &targets, &mask)
    };
    finite_diff_check_five_point(loss, &point, 1e-4).unwrap_or(f64::INFINITY)
}
