//! Tape-based reverse-mode differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records every op's output value and a closure that maps the
//! upstream gradient to gradients of the op's inputs. Tensors follow the
//! `[C, X, Y, Z]` layout for images and `[N]` for vectors; scalars are 0-d.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, Ix5, IxDyn};

use crate::conv;
use crate::field_ops::{warp_array, warp_array_backward};
use crate::losses::{local_ncc_with_grad, smoothness_penalty, smoothness_penalty_grad};
use crate::volume::DisplacementField;

pub type Tensor = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward = Box<dyn Fn(&[Tensor], &Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    requires_grad: bool,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn as4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn to_field(t: &Tensor) -> DisplacementField {
    DisplacementField {
        data: t.clone().into_dimensionality::<Ix4>().expect("rank-4 field"),
    }
}

fn channel0(t: &Tensor) -> ndarray::Array3<f64> {
    as4(t).index_axis(Axis(0), 0).to_owned()
}

fn lift(a: ndarray::Array3<f64>) -> Tensor {
    a.insert_axis(Axis(0)).into_dyn()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        *self.values[v.0].first().expect("non-empty tensor")
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<Backward>) -> Var {
        self.values.push(value);
        self.nodes.push(Node {
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(self.values.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] + &self.values[b.0];
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            value,
            na || nb,
            Some(Box::new(move |_, g| {
                let mut out = Vec::new();
                if na {
                    out.push((a.0, g.clone()));
                }
                if nb {
                    out.push((b.0, g.clone()));
                }
                out
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.values[a.0] * k;
        let na = self.needs(a);
        self.push(value, na, Some(Box::new(move |_, g| vec![(a.0, g * k)])))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.values[x.0].mapv(|v| if v > 0.0 { v } else { slope * v });
        let nx = self.needs(x);
        self.push(
            value,
            nx,
            Some(Box::new(move |vals, g| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[x.0], |d, &v| {
                    if v <= 0.0 {
                        *d *= slope;
                    }
                });
                vec![(x.0, d)]
            })),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.values[x.0].mapv(|v| v / (1.0 + (-v).exp()));
        let nx = self.needs(x);
        self.push(
            value,
            nx,
            Some(Box::new(move |vals, g| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[x.0], |d, &v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    *d *= s * (1.0 + v * (1.0 - s));
                });
                vec![(x.0, d)]
            })),
        )
    }

    /// `w: [out, in]`, `x: [in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix1>().expect("vector input");
        let wv = self.values[w.0].view().into_dimensionality::<Ix2>().expect("matrix weight");
        let value = (wv.dot(&xv) + &self.values[b.0].view().into_dimensionality::<Ix1>().expect("vector bias"))
            .into_dyn();
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        self.push(
            value,
            nx || nw || nb,
            Some(Box::new(move |vals, g| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("vector grad");
                let xv = vals[x.0].view().into_dimensionality::<Ix1>().expect("vector input");
                let wv = vals[w.0].view().into_dimensionality::<Ix2>().expect("matrix weight");
                let mut out = Vec::new();
                if nx {
                    out.push((x.0, wv.t().dot(&g1).into_dyn()));
                }
                if nw {
                    let outer = g1
                        .insert_axis(Axis(1))
                        .dot(&xv.insert_axis(Axis(0)));
                    out.push((w.0, outer.into_dyn()));
                }
                if nb {
                    out.push((b.0, g.clone()));
                }
                out
            })),
        )
    }

    /// 3×3×3 convolution with padding 1.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let value = conv::conv3d(
            as4(&self.values[x.0]),
            self.values[w.0].view().into_dimensionality::<Ix5>().expect("rank-5 kernel"),
            self.values[b.0].view().into_dimensionality::<Ix1>().expect("bias vector"),
            stride,
        )
        .into_dyn();
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        self.push(
            value,
            nx || nw || nb,
            Some(Box::new(move |vals, g| {
                let grads = conv::conv3d_backward(
                    as4(&vals[x.0]),
                    vals[w.0].view().into_dimensionality::<Ix5>().expect("rank-5 kernel"),
                    as4(g),
                    stride,
                    nx,
                );
                let mut out = Vec::new();
                if let Some(gx) = grads.input {
                    out.push((x.0, gx.into_dyn()));
                }
                if nw {
                    out.push((w.0, grads.weight.into_dyn()));
                }
                if nb {
                    out.push((b.0, grads.bias.into_dyn()));
                }
                out
            })),
        )
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let value = conv::upsample2(as4(&self.values[x.0])).into_dyn();
        let nx = self.needs(x);
        self.push(
            value,
            nx,
            Some(Box::new(move |_, g| {
                vec![(x.0, conv::upsample2_backward(as4(g)).into_dyn())]
            })),
        )
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("matching spatial shapes");
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].shape()[0]).collect();
        let needs: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let any = needs.iter().any(|&n| n);
        self.push(
            value,
            any,
            Some(Box::new(move |_, g| {
                let mut start = 0;
                let mut out = Vec::new();
                for ((&id, &w), &n) in ids.iter().zip(&widths).zip(&needs) {
                    if n {
                        out.push((id, g.slice_axis(Axis(0), (start..start + w).into()).to_owned()));
                    }
                    start += w;
                }
                out
            })),
        )
    }

    /// Adds a per-channel vector `v: [C]` to `x: [C, X, Y, Z]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let vv = self.values[v.0].view().into_dimensionality::<Ix1>().expect("channel vector");
        let mut value = self.values[x.0].clone();
        for (mut ch, &b) in value.axis_iter_mut(Axis(0)).zip(vv.iter()) {
            ch += b;
        }
        let (nx, nv) = (self.needs(x), self.needs(v));
        self.push(
            value,
            nx || nv,
            Some(Box::new(move |_, g| {
                let mut out = Vec::new();
                if nx {
                    out.push((x.0, g.clone()));
                }
                if nv {
                    let sums: Vec<f64> = g.axis_iter(Axis(0)).map(|c| c.sum()).collect();
                    out.push((v.0, ndarray::Array1::from(sums).into_dyn()));
                }
                out
            })),
        )
    }

    /// Multiplies `x` elementwise by a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, k: &Tensor) -> Var {
        let value = &self.values[x.0] * k;
        let nx = self.needs(x);
        let k = k.clone();
        self.push(value, nx, Some(Box::new(move |_, g| vec![(x.0, g * &k)])))
    }

    /// Trilinear pull-warp of `vol: [1, X, Y, Z]` by `field: [3, X, Y, Z]`.
    pub fn warp(&mut self, vol: Var, field: Var) -> Var {
        let f = to_field(&self.values[field.0]);
        let value = lift(warp_array(&channel0(&self.values[vol.0]), &f).expect("validated shapes"));
        let (nv, nf) = (self.needs(vol), self.needs(field));
        self.push(
            value,
            nv || nf,
            Some(Box::new(move |vals, g| {
                let (gv, gf) = warp_array_backward(
                    &channel0(&vals[vol.0]),
                    &to_field(&vals[field.0]),
                    &channel0(g),
                )
                .expect("validated shapes");
                let mut out = Vec::new();
                if nv {
                    out.push((vol.0, lift(gv)));
                }
                if nf {
                    out.push((field.0, gf.into_dyn()));
                }
                out
            })),
        )
    }

    /// Local NCC of two `[1, X, Y, Z]` tensors; scalar output.
    pub fn ncc(&mut self, a: Var, b: Var, window: usize) -> Var {
        let (value, ga, gb) = local_ncc_with_grad(
            &channel0(&self.values[a.0]),
            &channel0(&self.values[b.0]),
            window,
        )
        .expect("validated shapes and window");
        let (na, nb) = (self.needs(a), self.needs(b));
        let (ga, gb) = (lift(ga), lift(gb));
        self.push(
            scalar(value),
            na || nb,
            Some(Box::new(move |_, g| {
                let s = *g.first().expect("scalar grad");
                let mut out = Vec::new();
                if na {
                    out.push((a.0, &ga * s));
                }
                if nb {
                    out.push((b.0, &gb * s));
                }
                out
            })),
        )
    }

    /// Smoothness penalty of a `[3, X, Y, Z]` field; scalar output.
    pub fn smoothness(&mut self, field: Var) -> Var {
        let f = to_field(&self.values[field.0]);
        let value = smoothness_penalty(&f);
        let nf = self.needs(field);
        self.push(
            scalar(value),
            nf,
            Some(Box::new(move |vals, g| {
                let s = *g.first().expect("scalar grad");
                let d = smoothness_penalty_grad(&to_field(&vals[field.0]));
                vec![(field.0, (d * s).into_dyn())]
            })),
        )
    }

    /// Mean squared difference; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let diff = &self.values[a.0] - &self.values[b.0];
        let n = diff.len() as f64;
        let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            scalar(value),
            na || nb,
            Some(Box::new(move |vals, g| {
                let s = *g.first().expect("scalar grad");
                let d = (&vals[a.0] - &vals[b.0]) * (2.0 * s / n);
                let mut out = Vec::new();
                if nb {
                    out.push((b.0, -&d));
                }
                if na {
                    out.push((a.0, d));
                }
                out
            })),
        )
    }

    /// Mean of all entries; scalar output.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len() as f64;
        let value = self.values[x.0].sum() / n;
        let nx = self.needs(x);
        let shape = self.values[x.0].raw_dim();
        self.push(
            scalar(value),
            nx,
            Some(Box::new(move |_, g| {
                let s = *g.first().expect("scalar grad");
                vec![(x.0, ArrayD::from_elem(shape.clone(), s / n))]
            })),
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(ArrayD::from_elem(self.values[output.0].raw_dim(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                for (parent, pg) in bw(&self.values, &g) {
                    match &mut grads[parent] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            // leaves keep their gradient
            if self.nodes[i].backward.is_none() {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Rank-3 array as a single-channel tensor.
pub fn volume_tensor(a: &ndarray::Array3<f64>) -> Tensor {
    lift(a.clone())
}

pub fn tensor_to_volume(t: &Tensor) -> ndarray::Array3<f64> {
    let v = t.view().into_dimensionality::<Ix4>().expect("rank-4 tensor");
    v.index_axis(Axis(0), 0).to_owned()
}

pub fn tensor_to_field(t: &Tensor) -> DisplacementField {
    to_field(t)
}
