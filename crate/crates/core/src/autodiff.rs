//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! Every training path in the toolkit (inversion networks, perturbation
//! generator) and every gradient check runs through this tape. Nodes are
//! appended in topological order, so a single reverse sweep propagates
//! gradients.

use std::cell::RefCell;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackFn<A> = Box<dyn Fn(&Tensor<A>) -> Vec<(usize, Tensor<A>)>>;

struct Node<A: Scalar> {
    value: Tensor<A>,
    back: Option<BackFn<A>>,
}

/// Gradient tape. Create one per forward/backward pass.
pub struct Tape<A: Scalar> {
    nodes: RefCell<Vec<Node<A>>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, A: Scalar> {
    tape: &'t Tape<A>,
    pub id: usize,
}

/// Result of a backward sweep: gradient per node id.
pub struct Grads<A: Scalar> {
    grads: Vec<Option<Tensor<A>>>,
}

impl<A: Scalar> Grads<A> {
    pub fn get(&self, var: Var<'_, A>) -> Option<&Tensor<A>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a var, zeros if the var did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_, A>) -> Tensor<A> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.value().shape().to_vec()))
    }
}

impl<A: Scalar> Default for Tape<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Tape<A> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<A>, back: Option<BackFn<A>>) -> Var<'_, A> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record an input. Leaves receive gradients but propagate no further.
    pub fn leaf(&self, value: Tensor<A>) -> Var<'_, A> {
        self.push(value, None)
    }

    fn value_of(&self, id: usize) -> Tensor<A> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, A>) -> Grads<A> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<A>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), A::one()));
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(back) = &nodes[id].back {
                for (pid, contrib) in back(&grad) {
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Grads { grads }
    }
}

impl<'t, A: Scalar> Var<'t, A> {
    pub fn value(&self) -> Tensor<A> {
        self.tape.value_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<A> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Cut the gradient path: re-enter the value as a fresh leaf.
    pub fn detach(&self) -> Var<'t, A> {
        self.tape.leaf(self.value())
    }

    fn unary(
        &self,
        value: Tensor<A>,
        back: impl Fn(&Tensor<A>) -> Tensor<A> + 'static,
    ) -> Var<'t, A> {
        let pid = self.id;
        self.tape
            .push(value, Some(Box::new(move |g| vec![(pid, back(g))])))
    }

    pub fn add(&self, other: Var<'t, A>) -> Var<'t, A> {
        let (a, b) = (self.id, other.id);
        let value = self.value().add(&other.value());
        self.tape.push(
            value,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])),
        )
    }

    pub fn sub(&self, other: Var<'t, A>) -> Var<'t, A> {
        let (a, b) = (self.id, other.id);
        let value = self.value().sub(&other.value());
        self.tape.push(
            value,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.scale(-A::one()))]
            })),
        )
    }

    pub fn mul(&self, other: Var<'t, A>) -> Var<'t, A> {
        let (a, b) = (self.id, other.id);
        let (av, bv) = (self.value(), other.value());
        let value = av.zip(&bv, |x, y| x * y);
        self.tape.push(
            value,
            Some(Box::new(move |g| {
                vec![(a, g.zip(&bv, |x, y| x * y)), (b, g.zip(&av, |x, y| x * y))]
            })),
        )
    }

    pub fn neg(&self) -> Var<'t, A> {
        self.scale(-A::one())
    }

    pub fn scale(&self, k: A) -> Var<'t, A> {
        self.unary(self.value().scale(k), move |g| g.scale(k))
    }

    pub fn add_scalar(&self, k: A) -> Var<'t, A> {
        self.unary(self.value().map(|x| x + k), |g| g.clone())
    }

    pub fn tanh(&self) -> Var<'t, A> {
        let out = self.value().map(|x| x.tanh());
        let saved = out.clone();
        self.unary(out, move |g| g.zip(&saved, |gi, y| gi * (A::one() - y * y)))
    }

    pub fn sin(&self) -> Var<'t, A> {
        let input = self.value();
        let out = input.map(|x| x.sin());
        self.unary(out, move |g| g.zip(&input, |gi, x| gi * x.cos()))
    }

    pub fn exp(&self) -> Var<'t, A> {
        let out = self.value().map(|x| x.exp());
        let saved = out.clone();
        self.unary(out, move |g| g.zip(&saved, |gi, y| gi * y))
    }

    pub fn ln(&self) -> Var<'t, A> {
        let input = self.value();
        let out = input.map(|x| x.ln());
        self.unary(out, move |g| g.zip(&input, |gi, x| gi / x))
    }

    pub fn sqrt(&self) -> Var<'t, A> {
        let out = self.value().map(|x| x.sqrt());
        let saved = out.clone();
        let half = A::from_f64_(0.5);
        self.unary(out, move |g| g.zip(&saved, move |gi, y| gi * half / y))
    }

    pub fn square(&self) -> Var<'t, A> {
        let input = self.value();
        let out = input.map(|x| x * x);
        let two = A::from_f64_(2.0);
        self.unary(out, move |g| g.zip(&input, move |gi, x| gi * two * x))
    }

    pub fn relu(&self) -> Var<'t, A> {
        let input = self.value();
        let out = input.map(|x| x.max(A::zero()));
        self.unary(out, move |g| {
            g.zip(&input, |gi, x| if x > A::zero() { gi } else { A::zero() })
        })
    }

    pub fn clamp(&self, lo: A, hi: A) -> Var<'t, A> {
        let input = self.value();
        let out = input.map(|x| x.max(lo).min(hi));
        self.unary(out, move |g| {
            g.zip(&input, move |gi, x| {
                if x >= lo && x <= hi {
                    gi
                } else {
                    A::zero()
                }
            })
        })
    }

    pub fn sum(&self) -> Var<'t, A> {
        let shape = self.value().shape().to_vec();
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(&self) -> Var<'t, A> {
        let n = A::from_usize_(self.value().len());
        self.sum().scale(A::one() / n)
    }

    /// Column means of a `[m, n]` matrix -> `[n]`.
    pub fn mean_axis0(&self) -> Var<'t, A> {
        let v = self.value();
        assert_eq!(v.shape().len(), 2);
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let inv = A::one() / A::from_usize_(m);
        let mut out = vec![A::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v.at2(i, j) * inv;
            }
        }
        self.unary(Tensor::new(vec![n], out), move |g| {
            let mut gx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                for j in 0..n {
                    gx.set2(i, j, g.data()[j] * inv);
                }
            }
            gx
        })
    }

    /// `[m, n] x [n] -> [m]`.
    pub fn matvec(&self, x: Var<'t, A>) -> Var<'t, A> {
        let (wid, xid) = (self.id, x.id);
        let wv = self.value();
        let xv = x.value();
        let out = wv.matvec(&xv);
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut gw = Tensor::zeros(&[m, n]);
                let mut gx = Tensor::zeros(&[n]);
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..n {
                        gw.set2(i, j, gi * xv.data()[j]);
                        gx.data_mut()[j] += gi * wv.at2(i, j);
                    }
                }
                vec![(wid, gw), (xid, gx)]
            })),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: Var<'t, A>) -> Var<'t, A> {
        let (aid, bid) = (self.id, other.id);
        let av = self.value();
        let bv = other.value();
        let out = av.matmul(&bv);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let ga = g.matmul(&bv.transpose2());
                let gb = av.transpose2().matmul(g);
                vec![(aid, ga), (bid, gb)]
            })),
        )
    }

    pub fn dot(&self, other: Var<'t, A>) -> Var<'t, A> {
        let (aid, bid) = (self.id, other.id);
        let av = self.value();
        let bv = other.value();
        let out = Tensor::scalar(av.dot(&bv));
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let k = g.item();
                vec![(aid, bv.scale(k)), (bid, av.scale(k))]
            })),
        )
    }

    /// Divide every entry by a scalar var.
    pub fn div_scalar_var(&self, denom: Var<'t, A>) -> Var<'t, A> {
        let (aid, did) = (self.id, denom.id);
        let av = self.value();
        let d = denom.value().item();
        let out = av.scale(A::one() / d);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let ga = g.scale(A::one() / d);
                let gd = -g.dot(&av) / (d * d);
                vec![(aid, ga), (did, Tensor::scalar(gd))]
            })),
        )
    }

    /// Euclidean norm as a scalar var.
    pub fn l2_norm(&self) -> Var<'t, A> {
        self.square().sum().sqrt()
    }

    /// L2-normalized copy of a vector var.
    pub fn l2_normalize(&self) -> Var<'t, A> {
        self.div_scalar_var(self.l2_norm())
    }

    /// L2 distance to another vector var.
    pub fn l2_distance(&self, other: Var<'t, A>) -> Var<'t, A> {
        self.sub(other).l2_norm()
    }

    /// Row `i` of a `[m, n]` matrix.
    pub fn row(&self, i: usize) -> Var<'t, A> {
        let v = self.value();
        assert_eq!(v.shape().len(), 2);
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let out = Tensor::new(vec![n], v.row(i).to_vec());
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&[m, n]);
            for j in 0..n {
                gx.set2(i, j, g.data()[j]);
            }
            gx
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var<'t, A> {
        let old = self.value().shape().to_vec();
        let out = self.value().reshaped(shape);
        self.unary(out, move |g| g.clone().reshaped(old.clone()))
    }

    /// Numerically stable log-sum-exp of a 1-D var.
    pub fn logsumexp(&self) -> Var<'t, A> {
        let v = self.value();
        let m = v
            .data()
            .iter()
            .copied()
            .fold(A::neg_infinity(), |a, b| a.max(b));
        let sum: A = v.data().iter().map(|&x| (x - m).exp()).sum();
        let out = Tensor::scalar(m + sum.ln());
        let softmax = v.map(|x| (x - m).exp() / sum);
        self.unary(out, move |g| softmax.scale(g.item()))
    }

    /// Nearest-neighbor 2x upsampling of a `[C, H, W]` var.
    pub fn upsample2x(&self) -> Var<'t, A> {
        let v = self.value();
        assert_eq!(v.shape().len(), 3);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.set3(ch, y, x, v.at3(ch, y / 2, x / 2));
                }
            }
        }
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let cur = gx.at3(ch, y / 2, x / 2);
                        gx.set3(ch, y / 2, x / 2, cur + g.at3(ch, y, x));
                    }
                }
            }
            gx
        })
    }

    /// Means of non-overlapping `p x p` patches of a `[C, H, W]` var,
    /// flattened to `[C * (H/p) * (W/p)]`.
    pub fn patch_mean(&self, p: usize) -> Var<'t, A> {
        let v = self.value();
        assert_eq!(v.shape().len(), 3);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert!(h % p == 0 && w % p == 0, "patch size must divide image");
        let (ph, pw) = (h / p, w / p);
        let inv = A::one() / A::from_usize_(p * p);
        let mut out = vec![A::zero(); c * ph * pw];
        for ch in 0..c {
            for by in 0..ph {
                for bx in 0..pw {
                    let mut s = A::zero();
                    for dy in 0..p {
                        for dx in 0..p {
                            s += v.at3(ch, by * p + dy, bx * p + dx);
                        }
                    }
                    out[(ch * ph + by) * pw + bx] = s * inv;
                }
            }
        }
        self.unary(Tensor::new(vec![c * ph * pw], out), move |g| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for by in 0..ph {
                    for bx in 0..pw {
                        let gi = g.data()[(ch * ph + by) * pw + bx] * inv;
                        for dy in 0..p {
                            for dx in 0..p {
                                gx.set3(ch, by * p + dy, bx * p + dx, gi);
                            }
                        }
                    }
                }
            }
            gx
        })
    }

    /// 2-D convolution of a `[C, H, W]` var with weights `[O, C, kh, kw]`
    /// and bias `[O]`, with zero padding.
    pub fn conv2d(
        &self,
        weight: Var<'t, A>,
        bias: Var<'t, A>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, A> {
        let (xid, wid, bid) = (self.id, weight.id, bias.id);
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        assert_eq!(xv.shape().len(), 3);
        assert_eq!(wv.shape().len(), 4);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, wc, "channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let widx =
            move |oc: usize, ic: usize, dy: usize, dx: usize| ((oc * c + ic) * kh + dy) * kw + dx;

        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bv.data()[oc];
                    for ic in 0..c {
                        for dy in 0..kh {
                            let y = (oy * stride + dy) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let x = (ox * stride + dx) as isize - pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                s += wv.data()[widx(oc, ic, dy, dx)]
                                    * xv.at3(ic, y as usize, x as usize);
                            }
                        }
                    }
                    out.set3(oc, oy, ox, s);
                }
            }
        }

        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                let mut gw = Tensor::zeros(&[o, c, kh, kw]);
                let mut gb = Tensor::zeros(&[o]);
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.at3(oc, oy, ox);
                            gb.data_mut()[oc] += go;
                            for ic in 0..c {
                                for dy in 0..kh {
                                    let y = (oy * stride + dy) as isize - pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..kw {
                                        let x = (ox * stride + dx) as isize - pad as isize;
                                        if x < 0 || x >= w as isize {
                                            continue;
                                        }
                                        let (yu, xu) = (y as usize, x as usize);
                                        gw.data_mut()[widx(oc, ic, dy, dx)] +=
                                            go * xv.at3(ic, yu, xu);
                                        let cur = gx.at3(ic, yu, xu);
                                        gx.set3(ic, yu, xu, cur + go * wv.data()[widx(oc, ic, dy, dx)]);
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(xid, gx), (wid, gw), (bid, gb)]
            })),
        )
    }
}

/// Stack scalar vars into a 1-D var.
pub fn concat_scalars<'t, A: Scalar>(tape: &'t Tape<A>, vars: &[Var<'t, A>]) -> Var<'t, A> {
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let data: Vec<A> = vars.iter().map(|v| v.value().item()).collect();
    let n = data.len();
    tape.push(
        Tensor::new(vec![n], data),
        Some(Box::new(move |g| {
            ids.iter()
                .enumerate()
                .map(|(i, &id)| (id, Tensor::scalar(g.data()[i])))
                .collect()
        })),
    )
}

/// Stack 1-D vars of equal length into a `[m, n]` var.
pub fn concat_rows<'t, A: Scalar>(tape: &'t Tape<A>, vars: &[Var<'t, A>]) -> Var<'t, A> {
    assert!(!vars.is_empty());
    let n = vars[0].value().len();
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let mut data = Vec::with_capacity(vars.len() * n);
    for v in vars {
        let t = v.value();
        assert_eq!(t.len(), n, "row length mismatch");
        data.extend_from_slice(t.data());
    }
    let m = vars.len();
    tape.push(
        Tensor::new(vec![m, n], data),
        Some(Box::new(move |g| {
            ids.iter()
                .enumerate()
                .map(|(i, &id)| (id, Tensor::new(vec![n], g.row(i).to_vec())))
                .collect()
        })),
    )
}

/// Sum of scalar vars.
pub fn sum_scalars<'t, A: Scalar>(tape: &'t Tape<A>, vars: &[Var<'t, A>]) -> Var<'t, A> {
    concat_scalars(tape, vars).sum()
}

/// Mean of scalar vars.
pub fn mean_scalars<'t, A: Scalar>(tape: &'t Tape<A>, vars: &[Var<'t, A>]) -> Var<'t, A> {
    concat_scalars(tape, vars).mean()
}

/// Central finite-difference gradient of `f` with respect to the entries of
/// `x`, used by the gradient-check suites as the independent oracle.
pub fn finite_difference_grad<A: Scalar>(
    x: &Tensor<A>,
    step: A,
    mut f: impl FnMut(&Tensor<A>) -> A,
) -> Tensor<A> {
    let mut grad = Tensor::zeros(&x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (step + step);
    }
    grad
}
