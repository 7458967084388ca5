use super::graph::{Axis, Graph, NodeId, Op};
use super::{Array, GraphError};

impl Graph {
    /// Builds `d output / d wrt[i]` as new nodes and returns their ids.
    ///
    /// The returned nodes are regular graph nodes, so `grad` may be applied to
    /// any function of them. A `wrt` node that does not influence `output`
    /// gets an all-zero constant of its own shape.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, GraphError> {
        let n_nodes = self.nodes.len();
        if output.0 >= n_nodes {
            return Err(GraphError::UnknownNode { node: output.0 });
        }
        if let Some(w) = wrt.iter().find(|w| w.0 >= n_nodes) {
            return Err(GraphError::UnknownNode { node: w.0 });
        }
        let (r, c) = self.shape(output);
        if r * c != 1 {
            return Err(GraphError::NotScalar {
                node: output.0,
                shape: vec![r, c],
            });
        }

        // Nodes on some path wrt -> output.
        let mut reaches_output = vec![false; output.0 + 1];
        reaches_output[output.0] = true;
        for i in (0..=output.0).rev() {
            if reaches_output[i] && !self.nodes[i].op.is_indicator() {
                for p in self.nodes[i].op.parents() {
                    reaches_output[p.0] = true;
                }
            }
        }
        let mut from_wrt = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                from_wrt[w.0] = true;
            }
        }
        for i in 0..=output.0 {
            if !from_wrt[i] && !self.nodes[i].op.is_indicator() {
                from_wrt[i] = self.nodes[i].op.parents().iter().any(|p| from_wrt[p.0]);
            }
        }
        let relevant: Vec<bool> = (0..=output.0).map(|i| reaches_output[i] && from_wrt[i]).collect();

        let mut grads: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        if relevant[output.0] {
            grads[output.0] = Some(self.constant(Array::scalar(1.0))?);
        }
        for i in (0..=output.0).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(NodeId(i), &op, g, &relevant)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Array::zeros(r, c))
                }
            })
            .collect()
    }

    /// Gradient values (not nodes) of a scalar output.
    pub fn grad_values(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Array>, GraphError> {
        let ids = self.grad(output, wrt)?;
        Ok(ids.iter().map(|id| self.value(*id).clone()).collect())
    }

    /// Vector-Jacobian products of one node, restricted to relevant parents.
    fn vjp(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        relevant: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, GraphError> {
        let want = |p: &NodeId| relevant[p.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf | Op::Constant | Op::Step(_) | Op::LessEq(..) | Op::InRange { .. } => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    out.push((*b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if want(b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Minimum(a, b) => {
                let mask = self.less_eq(*a, *b)?;
                if want(a) {
                    out.push((*a, self.mul(g, mask)?));
                }
                if want(b) {
                    let inv = self.affine(mask, -1.0, 1.0)?;
                    out.push((*b, self.mul(g, inv)?));
                }
            }
            Op::AddRow(x, b) => {
                if want(x) {
                    out.push((*x, g));
                }
                if want(b) {
                    let cols = self.shape(*b).1;
                    out.push((*b, self.sum_to(g, 1, cols)?));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                // C = op_a(A) op_b(B)
                if want(a) {
                    let ga = if *ta {
                        self.matmul_t(*b, *tb, g, true)?
                    } else {
                        self.matmul_t(g, false, *b, !*tb)?
                    };
                    out.push((*a, ga));
                }
                if want(b) {
                    let gb = if *tb {
                        self.matmul_t(g, true, *a, *ta)?
                    } else {
                        self.matmul_t(*a, !*ta, g, false)?
                    };
                    out.push((*b, gb));
                }
            }
            Op::Affine { x, scale, .. } => {
                if want(x) {
                    out.push((*x, self.scale(g, *scale)?));
                }
            }
            Op::Tanh(x) => {
                if want(x) {
                    let y2 = self.square(node)?;
                    let d = self.affine(y2, -1.0, 1.0)?;
                    out.push((*x, self.mul(g, d)?));
                }
            }
            Op::Relu(x) => {
                if want(x) {
                    let m = self.step(*x)?;
                    out.push((*x, self.mul(g, m)?));
                }
            }
            Op::Softplus(x) => {
                if want(x) {
                    let s = self.sigmoid(*x)?;
                    out.push((*x, self.mul(g, s)?));
                }
            }
            Op::Sigmoid(x) => {
                if want(x) {
                    let one_minus = self.affine(node, -1.0, 1.0)?;
                    let d = self.mul(node, one_minus)?;
                    out.push((*x, self.mul(g, d)?));
                }
            }
            Op::Exp(x) => {
                if want(x) {
                    out.push((*x, self.mul(g, node)?));
                }
            }
            Op::Log(x) => {
                if want(x) {
                    let r = self.recip(*x)?;
                    out.push((*x, self.mul(g, r)?));
                }
            }
            Op::Square(x) => {
                if want(x) {
                    let d = self.scale(*x, 2.0)?;
                    out.push((*x, self.mul(g, d)?));
                }
            }
            Op::Recip(x) => {
                if want(x) {
                    let y2 = self.square(node)?;
                    let d = self.neg(y2)?;
                    out.push((*x, self.mul(g, d)?));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if want(x) {
                    let m = self.in_range(*x, *lo, *hi)?;
                    out.push((*x, self.mul(g, m)?));
                }
            }
            Op::SumTo { x, .. } => {
                if want(x) {
                    let (r, c) = self.shape(*x);
                    out.push((*x, self.broadcast(g, r, c)?));
                }
            }
            Op::Broadcast { x, .. } => {
                if want(x) {
                    let (r, c) = self.shape(*x);
                    out.push((*x, self.sum_to(g, r, c)?));
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let len = if *axis == Axis::Rows { r } else { c };
                    if want(p) {
                        out.push((*p, self.slice(g, *axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, .. } => {
                if want(x) {
                    let (r, c) = self.shape(*x);
                    let total = if *axis == Axis::Rows { r } else { c };
                    out.push((*x, self.pad(g, *axis, *start, total)?));
                }
            }
            Op::Pad { x, axis, start, .. } => {
                if want(x) {
                    let (r, c) = self.shape(*x);
                    let len = if *axis == Axis::Rows { r } else { c };
                    out.push((*x, self.slice(g, *axis, *start, len)?));
                }
            }
            Op::GaussianLogDensity { x, mean, log_std } => {
                let (n, d) = self.shape(*x);
                let gb = self.broadcast(g, n, d)?;
                let neg_ls = self.neg(*log_std)?;
                let inv = self.exp(neg_ls)?;
                let inv = if self.shape(inv).0 == n { inv } else { self.broadcast(inv, n, d)? };
                let diff = self.sub(*x, *mean)?;
                let z = self.mul(diff, inv)?;
                if want(x) || want(mean) {
                    let zi = self.mul(z, inv)?;
                    let gm = self.mul(gb, zi)?;
                    if want(mean) {
                        out.push((*mean, gm));
                    }
                    if want(x) {
                        out.push((*x, self.neg(gm)?));
                    }
                }
                if want(log_std) {
                    let z2 = self.square(z)?;
                    let zm1 = self.affine(z2, 1.0, -1.0)?;
                    let full = self.mul(gb, zm1)?;
                    let (lr, lc) = self.shape(*log_std);
                    let gl = if lr == n { full } else { self.sum_to(full, lr, lc)? };
                    out.push((*log_std, gl));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let d = g.grad_values(y, &[x]).unwrap();
        assert_eq!(d[0].item(), 6.0);
    }

    #[test]
    fn derivative_of_softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(0.0)).unwrap();
        let y = g.softplus(x).unwrap();
        let d = g.grad_values(y, &[x]).unwrap();
        assert_eq!(d[0].item(), 0.5);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(2.0)).unwrap();
        let x2 = g.square(x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d1 = g.grad(x3, &[x]).unwrap()[0];
        assert_eq!(g.value(d1).item(), 12.0);
        let d2 = g.grad(d1, &[x]).unwrap()[0];
        assert_eq!(g.value(d2).item(), 12.0);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(1, 2)).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(g.grad(y, &[x]), Err(GraphError::NotScalar { .. })));
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(1.0)).unwrap();
        let unused = g.leaf(Array::zeros(2, 3)).unwrap();
        let y = g.square(x).unwrap();
        let d = g.grad_values(y, &[unused, x]).unwrap();
        assert_eq!(d[0], Array::zeros(2, 3));
        assert_eq!(d[1].item(), 2.0);
    }

    #[test]
    fn gradient_through_indicator_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(0.7)).unwrap();
        let s = g.step(x).unwrap();
        let y = g.mul(s, s).unwrap();
        let d = g.grad_values(y, &[x]).unwrap();
        assert_eq!(d[0].item(), 0.0);
    }

    #[test]
    fn repeated_use_accumulates() {
        // y = x*x + 3x  -> dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(1.5)).unwrap();
        let xx = g.mul(x, x).unwrap();
        let tx = g.scale(x, 3.0).unwrap();
        let y = g.add(xx, tx).unwrap();
        assert_eq!(g.grad_values(y, &[x]).unwrap()[0].item(), 6.0);
    }
}
