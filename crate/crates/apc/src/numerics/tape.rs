//! Taped reverse-mode differentiation over [`RealArray`].
//!
//! A `Tape` records one forward computation; `backward` walks it once in
//! reverse and returns gradients keyed by parameter name. Tapes are cheap,
//! single-threaded, and rebuilt every step.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::array::{matmul_raw, softmax_rows_raw, transpose_raw, RealArray};
use crate::numerics::param::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackFn = Box<dyn Fn(&RealArray, &RealArray, &[&RealArray]) -> Vec<RealArray>>;

struct Node {
    value: RealArray,
    parents: Vec<usize>,
    back: Option<BackFn>,
    binding: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leased: RefCell<HashMap<String, usize>>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LN_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: RealArray, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
            binding: None,
        });
        Var { id: nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: RealArray) -> Var {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(RealArray::scalar(v))
    }

    /// Lease a parameter onto the tape. Trainable parameters become bound
    /// leaves that collect gradient under their name; frozen ones enter as
    /// plain constants. Repeated leases of the same name share one node.
    pub fn param(&self, set: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&id) = self.leased.borrow().get(name) {
            return Ok(Var { id });
        }
        let p = set.get(name)?;
        let var = self.push(p.value.clone(), vec![], None);
        if p.trainable {
            self.nodes.borrow_mut()[var.id].binding = Some(name.to_string());
        }
        self.leased.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn value(&self, v: Var) -> RealArray {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&RealArray) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value.item()
    }

    fn unary(
        &self,
        a: Var,
        out: RealArray,
        back: impl Fn(&RealArray, &RealArray, &RealArray) -> RealArray + 'static,
    ) -> Var {
        self.push(
            out,
            vec![a.id],
            Some(Box::new(move |g, out_v, parents| {
                vec![back(g, out_v, parents[0])]
            })),
        )
    }

    // ---- elementwise binary ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.zip_map(&nodes[b.id].value, |x, y| x + y)?
        };
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.zip_map(&nodes[b.id].value, |x, y| x - y)?
        };
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)])),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.zip_map(&nodes[b.id].value, |x, y| x * y)?
        };
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g, _, p| {
                vec![
                    g.zip_map(p[1], |gv, bv| gv * bv).expect("mul back"),
                    g.zip_map(p[0], |gv, av| gv * av).expect("mul back"),
                ]
            })),
        ))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.zip_map(&nodes[b.id].value, |x, y| x / y)?
        };
        out.check_finite("div")?;
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g, _, p| {
                let da = g.zip_map(p[1], |gv, bv| gv / bv).expect("div back");
                let db = g
                    .zip_map(p[0], |gv, av| gv * av)
                    .and_then(|t| t.zip_map(p[1], |t, bv| -t / (bv * bv)))
                    .expect("div back");
                vec![da, db]
            })),
        ))
    }

    // ---- elementwise unary ----

    pub fn neg(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| v.map(|x| -x));
        self.unary(a, out, |g, _, _| g.map(|v| -v))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.with_value(a, |v| v.map(|x| x * c));
        self.unary(a, out, move |g, _, _| g.map(|v| v * c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.with_value(a, |v| v.map(|x| x + c));
        self.unary(a, out, |g, _, _| g.clone())
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| v.map(|x| x.max(0.0)));
        self.unary(a, out, |g, _, x| {
            g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                .expect("relu back")
        })
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| v.map(f64::abs));
        self.unary(a, out, |g, _, x| {
            g.zip_map(x, |gv, xv| gv * sign0(xv)).expect("abs back")
        })
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| v.map(gelu_val));
        self.unary(a, out, |g, _, x| {
            g.zip_map(x, |gv, xv| gv * gelu_grad(xv)).expect("gelu back")
        })
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |v| v.map(f64::sqrt));
        out.check_finite("sqrt")?;
        Ok(self.unary(a, out, |g, out_v, _| {
            g.zip_map(out_v, |gv, sv| gv * 0.5 / sv).expect("sqrt back")
        }))
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |v| v.map(|x| 1.0 / x));
        out.check_finite("recip")?;
        Ok(self.unary(a, out, |g, out_v, _| {
            g.zip_map(out_v, |gv, yv| -gv * yv * yv).expect("recip back")
        }))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            matmul_raw(&nodes[a.id].value, &nodes[b.id].value)?
        };
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g, _, p| {
                let da = matmul_raw(g, &transpose_raw(p[1])).expect("matmul back");
                let db = matmul_raw(&transpose_raw(p[0]), g).expect("matmul back");
                vec![da, db]
            })),
        ))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.with_value(a, transpose_raw);
        self.unary(a, out, |g, _, _| transpose_raw(g))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = self.with_value(a, softmax_rows_raw);
        self.unary(a, out, |g, y, _| {
            let (m, n) = (y.rows(), y.cols());
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let yr = y.row_slice(i);
                let gr = g.row_slice(i);
                let inner: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..n {
                    dx[i * n + j] = yr[j] * (gr[j] - inner);
                }
            }
            RealArray::new(vec![m, n], dx).expect("softmax back")
        })
    }

    /// Row-wise log-sum-exp, `[m x n] -> [m]`.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| {
            let m = v.rows();
            let mut o = vec![0.0; m];
            for i in 0..m {
                let row = v.row_slice(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                o[i] = mx + s.ln();
            }
            RealArray::new(vec![m], o).expect("lse")
        });
        self.unary(a, out, |g, out_v, x| {
            let (m, n) = (x.rows(), x.cols());
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let gi = g.data()[i];
                let li = out_v.data()[i];
                for j in 0..n {
                    dx[i * n + j] = gi * (x.at(i, j) - li).exp();
                }
            }
            RealArray::new(vec![m, n], dx).expect("lse back")
        })
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| RealArray::scalar(v.data().iter().sum()));
        self.unary(a, out, |g, _, x| RealArray::full(x.shape(), g.item()))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with_value(a, |v| v.len());
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums, `[m x n] -> [n]`.
    pub fn sum_axis0(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| {
            let (m, n) = (v.rows(), v.cols());
            let mut o = vec![0.0; n];
            for i in 0..m {
                for (acc, &x) in o.iter_mut().zip(v.row_slice(i)) {
                    *acc += x;
                }
            }
            RealArray::new(vec![n], o).expect("sum_axis0")
        });
        self.unary(a, out, |g, _, x| {
            let (m, n) = (x.rows(), x.cols());
            let mut dx = Vec::with_capacity(m * n);
            for _ in 0..m {
                dx.extend_from_slice(g.data());
            }
            RealArray::new(vec![m, n], dx).expect("sum_axis0 back")
        })
    }

    /// Row sums, `[m x n] -> [m]`.
    pub fn sum_axis1(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| {
            let rows = v.rows();
            let o = (0..rows).map(|i| v.row_slice(i).iter().sum()).collect();
            RealArray::new(vec![rows], o).expect("sum_axis1")
        });
        self.unary(a, out, |g, _, x| {
            let (m, n) = (x.rows(), x.cols());
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let gi = g.data()[i];
                dx[i * n..(i + 1) * n].iter_mut().for_each(|d| *d = gi);
            }
            RealArray::new(vec![m, n], dx).expect("sum_axis1 back")
        })
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            if x.len() != y.len() {
                return Err(Error::ShapeMismatch {
                    op: "dot",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
        }
        let out = {
            let nodes = self.nodes.borrow();
            RealArray::scalar(nodes[a.id].value.dot(&nodes[b.id].value))
        };
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g, _, p| {
                let gv = g.item();
                vec![p[1].map(|v| v * gv), p[0].map(|v| v * gv)]
            })),
        ))
    }

    // ---- structure ----

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.with_value(a, |v| v.reshaped(shape.clone()))?;
        Ok(self.unary(a, out, |g, _, x| {
            g.reshaped(x.shape().to_vec()).expect("reshape back")
        }))
    }

    /// Extract row `i` of a 2-d array as a 1-d vector.
    pub fn row(&self, a: Var, i: usize) -> Result<Var> {
        let (rows, out) = self.with_value(a, |v| {
            (v.rows(), if i < v.rows() {
                Some(RealArray::new(vec![v.cols()], v.row_slice(i).to_vec()).expect("row"))
            } else {
                None
            })
        });
        let out = out.ok_or(Error::OutOfRange {
            what: "row index",
            value: i,
            bound: rows,
        })?;
        Ok(self.unary(a, out, move |g, _, x| {
            let mut dx = RealArray::zeros(x.shape());
            let n = x.cols();
            dx.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
            dx
        }))
    }

    /// Gather rows by index (duplicates allowed); gradient scatter-adds.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let idx = indices.to_vec();
        let out = self.with_value(a, |v| -> Result<RealArray> {
            let n = v.cols();
            let mut data = Vec::with_capacity(idx.len() * n);
            for &i in &idx {
                if i >= v.rows() {
                    return Err(Error::OutOfRange {
                        what: "row index",
                        value: i,
                        bound: v.rows(),
                    });
                }
                data.extend_from_slice(v.row_slice(i));
            }
            RealArray::new(vec![idx.len(), n], data)
        })?;
        Ok(self.unary(a, out, move |g, _, x| {
            let mut dx = RealArray::zeros(x.shape());
            let n = x.cols();
            for (k, &i) in idx.iter().enumerate() {
                let src = g.row_slice(k);
                let dst = &mut dx.data_mut()[i * n..(i + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dx
        }))
    }

    /// Gather scalar entries of a 2-d array at (row, col) pairs into a vector.
    pub fn gather(&self, a: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let ps = pairs.to_vec();
        let out = self.with_value(a, |v| -> Result<RealArray> {
            let mut data = Vec::with_capacity(ps.len());
            for &(r, c) in &ps {
                if r >= v.rows() || c >= v.cols() {
                    return Err(Error::OutOfRange {
                        what: "gather index",
                        value: r.max(c),
                        bound: v.rows().max(v.cols()),
                    });
                }
                data.push(v.at(r, c));
            }
            RealArray::new(vec![ps.len()], data)
        })?;
        Ok(self.unary(a, out, move |g, _, x| {
            let mut dx = RealArray::zeros(x.shape());
            let n = x.cols();
            for (k, &(r, c)) in ps.iter().enumerate() {
                dx.data_mut()[r * n + c] += g.data()[k];
            }
            dx
        }))
    }

    /// Concatenate 2-d arrays along rows.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (out, splits) = {
            let nodes = self.nodes.borrow();
            let n = nodes[parts[0].id].value.cols();
            let mut data = Vec::new();
            let mut splits = Vec::new();
            let mut rows = 0;
            for v in parts {
                let arr = &nodes[v.id].value;
                if arr.cols() != n {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        left: vec![rows, n],
                        right: arr.shape().to_vec(),
                    });
                }
                splits.push(arr.rows());
                rows += arr.rows();
                data.extend_from_slice(arr.data());
            }
            (RealArray::new(vec![rows, n], data)?, splits)
        };
        Ok(self.push(
            out,
            parts.iter().map(|v| v.id).collect(),
            Some(Box::new(move |g, _, _| {
                let n = g.cols();
                let mut offset = 0;
                splits
                    .iter()
                    .map(|&r| {
                        let part = RealArray::new(
                            vec![r, n],
                            g.data()[offset * n..(offset + r) * n].to_vec(),
                        )
                        .expect("concat back");
                        offset += r;
                        part
                    })
                    .collect()
            })),
        ))
    }

    /// Stack 1-d vectors of equal length into a matrix, one per row.
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let out = {
            let nodes = self.nodes.borrow();
            let n = nodes[parts[0].id].value.len();
            let mut data = Vec::with_capacity(parts.len() * n);
            for v in parts {
                let arr = &nodes[v.id].value;
                if arr.len() != n || arr.ndim() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "stack_rows",
                        left: vec![n],
                        right: arr.shape().to_vec(),
                    });
                }
                data.extend_from_slice(arr.data());
            }
            RealArray::new(vec![parts.len(), n], data)?
        };
        Ok(self.push(
            out,
            parts.iter().map(|v| v.id).collect(),
            Some(Box::new(|g, _, p| {
                let n = g.cols();
                (0..p.len())
                    .map(|k| {
                        RealArray::new(vec![n], g.data()[k * n..(k + 1) * n].to_vec())
                            .expect("stack back")
                    })
                    .collect()
            })),
        ))
    }

    /// Column slice `[m x n] -> [m x len]` starting at `start`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with_value(a, |v| -> Result<RealArray> {
            if start + len > v.cols() {
                return Err(Error::OutOfRange {
                    what: "column slice",
                    value: start + len,
                    bound: v.cols() + 1,
                });
            }
            let m = v.rows();
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&v.row_slice(i)[start..start + len]);
            }
            RealArray::new(vec![m, len], data)
        })?;
        Ok(self.unary(a, out, move |g, _, x| {
            let mut dx = RealArray::zeros(x.shape());
            let n = x.cols();
            for i in 0..g.rows() {
                let src = g.row_slice(i);
                let dst = &mut dx.data_mut()[i * n + start..i * n + start + len];
                dst.copy_from_slice(src);
            }
            dx
        }))
    }

    /// Concatenate 2-d arrays along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (out, widths) = {
            let nodes = self.nodes.borrow();
            let m = nodes[parts[0].id].value.rows();
            let widths: Vec<usize> = parts
                .iter()
                .map(|v| nodes[v.id].value.cols())
                .collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for (k, v) in parts.iter().enumerate() {
                    let arr = &nodes[v.id].value;
                    if arr.rows() != m {
                        return Err(Error::ShapeMismatch {
                            op: "concat_cols",
                            left: vec![m, widths[k]],
                            right: arr.shape().to_vec(),
                        });
                    }
                    data.extend_from_slice(arr.row_slice(i));
                }
            }
            (RealArray::new(vec![m, total], data)?, widths)
        };
        Ok(self.push(
            out,
            parts.iter().map(|v| v.id).collect(),
            Some(Box::new(move |g, _, _| {
                let m = g.rows();
                let mut outs: Vec<RealArray> =
                    widths.iter().map(|&w| RealArray::zeros(&[m, w])).collect();
                for i in 0..m {
                    let row = g.row_slice(i);
                    let mut off = 0;
                    for (k, &w) in widths.iter().enumerate() {
                        outs[k].data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&row[off..off + w]);
                        off += w;
                    }
                }
                outs
            })),
        ))
    }

    /// `out[i, :] = a[i, :] + v` for a 1-d vector `v` of length `cols(a)`.
    pub fn add_row_broadcast(&self, a: Var, v: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[a.id].value, &nodes[v.id].value);
            if x.ndim() != 2 || b.len() != x.cols() {
                return Err(Error::ShapeMismatch {
                    op: "add_row_broadcast",
                    left: x.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (m, n) = (x.rows(), x.cols());
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for (j, &xv) in x.row_slice(i).iter().enumerate() {
                    data.push(xv + b.data()[j]);
                }
            }
            RealArray::new(vec![m, n], data)?
        };
        Ok(self.push(
            out,
            vec![a.id, v.id],
            Some(Box::new(|g, _, p| {
                let (m, n) = (g.rows(), g.cols());
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for (acc, &gv) in dv.iter_mut().zip(g.row_slice(i)) {
                        *acc += gv;
                    }
                }
                vec![
                    g.clone(),
                    RealArray::new(vec![p[1].len()], dv).expect("broadcast back"),
                ]
            })),
        ))
    }

    /// Multiply an array by a scalar variable (shape `[1]`).
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s.id].value;
            if sv.len() != 1 {
                return Err(Error::BadShape {
                    op: "mul_scalar_var",
                    expected: "scalar second operand".into(),
                    got: sv.shape().to_vec(),
                });
            }
            nodes[a.id].value.map(|x| x * sv.item())
        };
        Ok(self.push(
            out,
            vec![a.id, s.id],
            Some(Box::new(|g, _, p| {
                let sv = p[1].item();
                let da = g.map(|v| v * sv);
                let ds = RealArray::scalar(g.data().iter().zip(p[0].data()).map(|(&gv, &av)| gv * av).sum());
                vec![da, ds]
            })),
        ))
    }

    /// Layer normalization over the last axis of a 2-d input with learnable
    /// gain and bias vectors.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, inv_sd) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id].value;
            let gv = &nodes[gamma.id].value;
            let bv = &nodes[beta.id].value;
            let (m, n) = (xv.rows(), xv.cols());
            if gv.len() != n || bv.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: gv.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            let mut xhat = vec![0.0; m * n];
            let mut inv_sd = vec![0.0; m];
            for i in 0..m {
                let row = xv.row_slice(i);
                let mu: f64 = row.iter().sum::<f64>() / n as f64;
                let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let isd = 1.0 / (var + LN_EPS).sqrt();
                inv_sd[i] = isd;
                for j in 0..n {
                    let h = (row[j] - mu) * isd;
                    xhat[i * n + j] = h;
                    out[i * n + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (
                RealArray::new(vec![m, n], out)?,
                RealArray::new(vec![m, n], xhat)?,
                inv_sd,
            )
        };
        Ok(self.push(
            out,
            vec![x.id, gamma.id, beta.id],
            Some(Box::new(move |g, _, p| {
                let gv = p[1];
                let (m, n) = (g.rows(), g.cols());
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let gr = g.row_slice(i);
                    let hr = xhat.row_slice(i);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gv.data()[j];
                        dx[i * n + j] = (dh - mean_dh - hr[j] * mean_dh_h) * inv_sd[i];
                    }
                }
                vec![
                    RealArray::new(vec![m, n], dx).expect("ln back"),
                    RealArray::new(vec![n], dgamma).expect("ln back"),
                    RealArray::new(vec![n], dbeta).expect("ln back"),
                ]
            })),
        ))
    }

    // ---- composites ----

    /// `a / max(||a||, eps guard)` for a 1-d vector, differentiable.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let sq = self.dot(a, a)?;
        let guarded = self.add_scalar(sq, 1e-24);
        let norm = self.sqrt(guarded)?;
        let inv = self.recip(norm)?;
        self.mul_scalar_var(a, inv)
    }

    /// Cosine similarity of two 1-d vectors as a taped scalar.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        const EPS: f64 = 1e-12;
        {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            if x.len() != y.len() {
                return Err(Error::ShapeMismatch {
                    op: "cosine_similarity",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
            for (v, side) in [(x, "left"), (y, "right")] {
                let n = v.norm2();
                if n <= EPS {
                    let _ = side;
                    return Err(Error::DegenerateVector {
                        op: "cosine_similarity",
                        norm: n,
                        eps: EPS,
                    });
                }
            }
        }
        let num = self.dot(a, b)?;
        let na = self.sqrt(self.dot(a, a)?)?;
        let nb = self.sqrt(self.dot(b, b)?)?;
        let denom = self.mul(na, nb)?;
        self.div(num, denom)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns accumulated gradients for
    /// every bound (trainable) parameter reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<HashMap<String, RealArray>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<RealArray>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(RealArray::scalar(1.0));
        let mut out: HashMap<String, RealArray> = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&RealArray> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let contribs = back(&g, &node.value, &parent_vals);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contribs) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
            if let Some(name) = &node.binding {
                g.check_finite("backward gradient")?;
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::StreamRng;

    fn rand_arr(rng: &mut StreamRng, shape: &[usize], scale: f64) -> RealArray {
        let n: usize = shape.iter().product();
        RealArray::new(shape.to_vec(), rng.normal_vec(n, 0.0, scale)).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = StreamRng::new(11, "test");
        for case in 0..100 {
            let m = 1 + rng.below(8);
            let k = 1 + rng.below(8);
            let n = 1 + rng.below(8);
            let a = rand_arr(&mut rng, &[m, k], 1.0);
            let b = rand_arr(&mut rng, &[k, n], 1.0);
            let fast = matmul_raw(&a, &b).unwrap();
            // independent triple-loop oracle
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.at(i, p) * b.at(p, j);
                    }
                    let got = fast.at(i, j);
                    let denom = acc.abs().max(1.0);
                    assert!(
                        (got - acc).abs() / denom < 1e-12,
                        "case {case}: ({i},{j}) oracle {acc} got {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_inputs() {
        let mut rng = StreamRng::new(5, "test");
        for _ in 0..1000 {
            let m = 1 + rng.below(4);
            let n = 1 + rng.below(6);
            let data: Vec<f64> = (0..m * n).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let a = RealArray::new(vec![m, n], data).unwrap();
            let s = softmax_rows_raw(&a);
            for i in 0..m {
                let sum: f64 = s.row_slice(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                assert!(s.row_slice(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        let a = RealArray::new(vec![1, 2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let s = softmax_rows_raw(&a);
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = RealArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.0, 2.0]).unwrap();
        let shifted = RealArray::new(
            vec![2, 3],
            vec![1.0 + 7.0, 2.0 + 7.0, 3.0 + 7.0, -4.0 - 3.0, 0.0 - 3.0, 2.0 - 3.0],
        )
        .unwrap();
        assert_eq!(softmax_rows_raw(&a), softmax_rows_raw(&shifted));
    }

    #[test]
    fn cosine_examples() {
        let t = Tape::new();
        let v = t.constant(RealArray::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap());
        assert!((t.item(t.cosine_similarity(v, v).unwrap()) - 1.0).abs() < 1e-12);

        let e1 = t.constant(RealArray::new(vec![2], vec![1.0, 0.0]).unwrap());
        let e2 = t.constant(RealArray::new(vec![2], vec![0.0, 1.0]).unwrap());
        assert!(t.item(t.cosine_similarity(e1, e2).unwrap()).abs() < 1e-12);

        let a = t.constant(RealArray::new(vec![2], vec![1.0, 1.0]).unwrap());
        let got = t.item(t.cosine_similarity(a, e1).unwrap());
        assert!((got - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_degenerate() {
        let t = Tape::new();
        let z = t.constant(RealArray::zeros(&[3]));
        let v = t.constant(RealArray::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            t.cosine_similarity(z, v),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut params = ParamSet::new();
        params.insert("p", RealArray::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let t = Tape::new();
        let p = t.param(&params, "p").unwrap();
        let loss = t.sum(p);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads["p"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_gives_2p() {
        let mut params = ParamSet::new();
        params.insert("p", RealArray::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let t = Tape::new();
        let p = t.param(&params, "p").unwrap();
        let sq = t.dot(p, p).unwrap();
        let grads = t.backward(sq).unwrap();
        assert_eq!(grads["p"].data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let v = t.constant(RealArray::zeros(&[2]));
        let w = t.add_scalar(v, 1.0);
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_collect_no_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", RealArray::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        params.insert("p", RealArray::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let t = Tape::new();
        let w = t.param(&params, "w").unwrap();
        let p = t.param(&params, "p").unwrap();
        let loss = t.dot(w, p).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(!grads.contains_key("w"));
        assert_eq!(grads["p"].data(), &[1.0, 2.0]);
        params.apply_grads(&grads).unwrap();
        assert_eq!(params.get("w").unwrap().gradient.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identical_seeds_identical_values() {
        let run = || {
            let mut rng = StreamRng::new(42, "init");
            let t = Tape::new();
            let a = t.constant(rand_arr(&mut rng, &[4, 4], 1.0));
            let b = t.constant(rand_arr(&mut rng, &[4, 4], 1.0));
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(c);
            t.value(s)
        };
        let x = run();
        let y = run();
        assert_eq!(x, y); // bitwise
    }
}
