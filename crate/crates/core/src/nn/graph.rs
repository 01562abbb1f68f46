//! Minimal reverse-mode autodiff over `f64` ndarrays.
//!
//! A [`Graph`] is a Wengert list rebuilt per training step. Ops push a node
//! holding the forward value plus a boxed backward closure that maps the
//! output gradient to parent gradient contributions. Everything is f64 and
//! single-threaded; batch parallelism lives one level up (one graph per
//! sample, gradients summed in sample order).

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    data: Rc<ArrayD<f64>>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    requires: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub(crate) fn push(&mut self, data: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        let requires = parents.iter().any(|&p| self.nodes[p].requires);
        self.nodes.push(Node {
            data: Rc::new(data),
            parents,
            backward: if requires { backward } else { None },
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not require gradients.
    pub fn constant(&mut self, data: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            data: Rc::new(data),
            parents: vec![],
            backward: None,
            requires: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that accumulates a gradient (a trainable parameter).
    pub fn param(&mut self, data: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            data: Rc::new(data),
            parents: vec![],
            backward: None,
            requires: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn data(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].data
    }

    pub(crate) fn rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].data)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward target must be a scalar"
        );
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].data.raw_dim(), 1.0));
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || self.nodes[id].backward.is_none() {
                continue;
            }
            let go = self.grads[id].clone().unwrap();
            let contribs = (self.nodes[id].backward.as_ref().unwrap())(&go);
            let parents = self.nodes[id].parents.clone();
            for (p, contrib) in parents.into_iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !self.nodes[p].requires {
                    continue;
                }
                match &mut self.grads[p] {
                    Some(acc) => *acc += &c,
                    slot => *slot = Some(c),
                }
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.data(a).shape(), self.data(b).shape());
        let data = &*self.nodes[a.0].data + &*self.nodes[b.0].data;
        self.push(
            data,
            vec![a.0, b.0],
            Some(Box::new(|go| vec![Some(go.clone()), Some(go.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.data(a).shape(), self.data(b).shape());
        let data = &*self.nodes[a.0].data - &*self.nodes[b.0].data;
        self.push(
            data,
            vec![a.0, b.0],
            Some(Box::new(|go| vec![Some(go.clone()), Some(-go)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.data(a).shape(), self.data(b).shape());
        let da = self.rc(a);
        let db = self.rc(b);
        let data = &*da * &*db;
        self.push(
            data,
            vec![a.0, b.0],
            Some(Box::new(move |go| vec![Some(go * &*db), Some(go * &*da)])),
        )
    }

    /// Elementwise division; the denominator must stay away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.data(a).shape(), self.data(b).shape());
        let da = self.rc(a);
        let db = self.rc(b);
        let data = &*da / &*db;
        self.push(
            data,
            vec![a.0, b.0],
            Some(Box::new(move |go| {
                let ga = go / &*db;
                let gb = -(go * &*da) / (&*db * &*db);
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.mapv(|x| x * c);
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| vec![Some(go.mapv(|x| x * c))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.mapv(|x| x + c);
        self.push(
            data,
            vec![a.0],
            Some(Box::new(|go| vec![Some(go.clone())])),
        )
    }

    /// |x| with sign subgradient (0 at 0).
    pub fn abs(&mut self, a: Var) -> Var {
        let da = self.rc(a);
        let data = da.mapv(f64::abs);
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| {
                vec![Some(go * &da.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }))]
            })),
        )
    }

    /// sqrt(x + eps), safe at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let da = self.rc(a);
        let data = da.mapv(|x| (x + eps).sqrt());
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| {
                vec![Some(go * &da.mapv(|x| 0.5 / (x + eps).sqrt()))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let da = self.rc(a);
        let data = da.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| {
                vec![Some(go * &da.mapv(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 - s)
                }))]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let da = self.rc(a);
        let data = da.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| {
                vec![Some(go * &da.mapv(|x| if x > 0.0 { 1.0 } else { slope }))]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let da = self.rc(a);
        let data = da.mapv(f64::tanh);
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| {
                vec![Some(go * &da.mapv(|x| {
                    let t = x.tanh();
                    1.0 - t * t
                }))]
            })),
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let da = self.rc(a);
        let data = da.mapv(|x| x / (1.0 + (-x).exp()));
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| {
                vec![Some(go * &da.mapv(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 + x * (1.0 - s))
                }))]
            })),
        )
    }

    // ---- reductions / shape ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let shape = self.data(a).raw_dim();
        let m = self.data(a).iter().sum::<f64>() / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), m),
            vec![a.0],
            Some(Box::new(move |go| {
                let g = go.iter().next().copied().unwrap_or(0.0) / n;
                vec![Some(ArrayD::from_elem(shape.clone(), g))]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.data(a).raw_dim();
        let s = self.data(a).iter().sum::<f64>();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![a.0],
            Some(Box::new(move |go| {
                let g = go.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(shape.clone(), g))]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.data(a).raw_dim();
        let data = self
            .data(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |go| {
                vec![Some(
                    go.clone()
                        .into_shape_with_order(old.clone())
                        .expect("reshape backward"),
                )]
            })),
        )
    }

    // ---- scalar graph helpers ----

    pub fn value(&self, v: Var) -> f64 {
        let d = self.data(v);
        assert_eq!(d.len(), 1);
        *d.iter().next().unwrap()
    }
}
