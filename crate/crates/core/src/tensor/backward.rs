//! Reverse-mode differentiation emitted as graph nodes.
//!
//! Every vector-Jacobian product below is built from graph primitives, so the
//! gradient of any node is itself differentiable.

use std::sync::atomic::{AtomicBool, Ordering};

use super::graph::{Graph, NodeId, OpKind};
use super::{numel, Result, Tensor, TensorError, LOG_FLOOR};

static EXP_SIGN_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: flips the sign of the `exp` vector-Jacobian product so the
/// verification suite can demonstrate that it catches a broken rule.
pub fn inject_exp_sign_fault(enabled: bool) {
    EXP_SIGN_FAULT.store(enabled, Ordering::SeqCst);
}

impl Graph {
    /// `d output / d wrt` as tensors. Emitted gradient nodes are discarded
    /// afterwards; cached forward values are kept.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let nodes = self.emit_gradient(output, wrt)?;
        let values = self.evaluate(&nodes);
        self.truncate(mark);
        values
    }

    /// `d output / d wrt` as graph nodes that stay in the graph and can be
    /// differentiated again.
    pub fn gradient_retained(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let previous = self.emitting_retained;
        self.emitting_retained = true;
        let out = self.emit_gradient(output, wrt);
        self.emitting_retained = previous;
        out
    }

    /// Differentiates a scalar built from retained first gradients
    /// (`inner_grads`) with respect to `outer`.
    pub fn gradient_of_gradient(
        &mut self,
        output: NodeId,
        inner_grads: &[NodeId],
        outer: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        for &id in inner_grads {
            self.check(id)?;
            if !self.nodes[id.0].retained {
                return Err(TensorError::NotReplayable(id.0));
            }
        }
        self.gradient(output, outer)
    }

    fn emit_gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let out_shape = self.shape(output).to_vec();
        if numel(&out_shape) != 1 {
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        let end = output.0 + 1;

        // Forward sweep: which nodes depend differentiably on a wrt node.
        let mut reach = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                reach[w.0] = true;
            }
        }
        for i in 0..end {
            if reach[i] {
                continue;
            }
            let node = &self.nodes[i];
            reach[i] = node
                .inputs
                .iter()
                .enumerate()
                .any(|(k, inp)| node.op.differentiable_input(k) && reach[inp.0]);
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        if reach[output.0] {
            grads[output.0] = Some(self.leaf(Tensor::ones(&out_shape)));
        }
        for i in (0..end).rev() {
            let Some(gy) = grads[i] else { continue };
            if self.nodes[i].op == OpKind::Leaf {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let wanted: Vec<bool> = inputs
                .iter()
                .enumerate()
                .map(|(k, inp)| self.nodes[i].op.differentiable_input(k) && reach[inp.0])
                .collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let contributions = self.vjp(NodeId(i), gy, &wanted)?;
            for ((inp, c), want) in inputs.iter().zip(contributions).zip(wanted) {
                // some rules emit every input's contribution unconditionally
                let (Some(c), true) = (c, want) else { continue };
                grads[inp.0] = Some(match grads[inp.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.leaf(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Contributions of upstream gradient `gy` at `node` to each input.
    fn vjp(&mut self, node: NodeId, gy: NodeId, wanted: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let op = self.nodes[node.0].op.clone();
        let inputs = self.nodes[node.0].inputs.clone();
        let a = inputs.first().copied().unwrap_or(node);
        let b = inputs.get(1).copied().unwrap_or(node);
        let want = |k: usize| wanted.get(k).copied().unwrap_or(false);
        let shape_of = |g: &Graph, id: NodeId| g.shape(id).to_vec();

        let out = match op {
            OpKind::Leaf | OpKind::Step(_) | OpKind::StopGrad => vec![None; inputs.len()],
            OpKind::Add => vec![Some(gy), Some(gy)],
            OpKind::Sub => vec![Some(gy), if want(1) { Some(self.neg(gy)?) } else { None }],
            OpKind::Mul => vec![
                if want(0) { Some(self.mul(gy, b)?) } else { None },
                if want(1) { Some(self.mul(gy, a)?) } else { None },
            ],
            OpKind::Div => {
                let ga = if want(0) { Some(self.div(gy, b)?) } else { None };
                let gb = if want(1) {
                    let t = self.mul(gy, node)?;
                    let t = self.div(t, b)?;
                    Some(self.neg(t)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            OpKind::Neg => vec![Some(self.neg(gy)?)],
            OpKind::Exp => {
                let g = self.mul(gy, node)?;
                if EXP_SIGN_FAULT.load(Ordering::SeqCst) {
                    vec![Some(self.neg(g)?)]
                } else {
                    vec![Some(g)]
                }
            }
            OpKind::Log => {
                let floored = self.clamp_min(a, LOG_FLOOR)?;
                let active = self.step(a, LOG_FLOOR)?;
                let g = self.div(gy, floored)?;
                vec![Some(self.mul(g, active)?)]
            }
            OpKind::Pow(p) => {
                if p == 1.0 {
                    vec![Some(gy)]
                } else {
                    let d = self.pow(a, p - 1.0)?;
                    let d = self.scale(d, p)?;
                    vec![Some(self.mul(gy, d)?)]
                }
            }
            OpKind::Scale(c) => vec![Some(self.scale(gy, c)?)],
            OpKind::Shift(_) => vec![Some(gy)],
            OpKind::ClampMin(c) => {
                let m = self.step(a, c)?;
                vec![Some(self.mul(gy, m)?)]
            }
            OpKind::Relu => {
                let m = self.step(a, 0.0)?;
                vec![Some(self.mul(gy, m)?)]
            }
            OpKind::Softplus => {
                let s = self.sigmoid(a)?;
                vec![Some(self.mul(gy, s)?)]
            }
            OpKind::Sigmoid => {
                let one_minus = self.neg(node)?;
                let one_minus = self.shift(one_minus, 1.0)?;
                let d = self.mul(node, one_minus)?;
                vec![Some(self.mul(gy, d)?)]
            }
            OpKind::MatMul => {
                let ga = if want(0) {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(gy, bt)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, gy)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            OpKind::Transpose => vec![Some(self.transpose(gy)?)],
            OpKind::Reshape => {
                let s = shape_of(self, a);
                vec![Some(self.reshape(gy, &s)?)]
            }
            OpKind::BroadcastTo => {
                let s = shape_of(self, a);
                vec![Some(self.sum_to(gy, &s)?)]
            }
            OpKind::SumTo => {
                let s = shape_of(self, a);
                vec![Some(self.broadcast_to(gy, &s)?)]
            }
            OpKind::Conv2d(spec) => {
                let gx = if want(0) {
                    let xs = shape_of(self, a);
                    Some(self.conv2d_input_grad(gy, b, spec, &xs)?)
                } else {
                    None
                };
                let gw = if want(1) {
                    let ws = shape_of(self, b);
                    Some(self.conv2d_weight_grad(a, gy, spec, &ws)?)
                } else {
                    None
                };
                vec![gx, gw]
            }
            OpKind::ConvInputGrad(spec) => {
                // node = A(u, w) with u the conv-output-shaped upstream.
                let g_u = if want(0) { Some(self.conv2d(gy, b, spec)?) } else { None };
                let g_w = if want(1) {
                    let ws = shape_of(self, b);
                    Some(self.conv2d_weight_grad(gy, a, spec, &ws)?)
                } else {
                    None
                };
                vec![g_u, g_w]
            }
            OpKind::ConvWeightGrad(spec) => {
                // node = W(x, u) with u the conv-output-shaped upstream.
                let g_x = if want(0) {
                    let xs = shape_of(self, a);
                    Some(self.conv2d_input_grad(b, gy, spec, &xs)?)
                } else {
                    None
                };
                let g_u = if want(1) { Some(self.conv2d(a, gy, spec)?) } else { None };
                vec![g_x, g_u]
            }
            OpKind::PoolSelect => vec![Some(self.pool_scatter(gy, b)?), None],
            OpKind::PoolScatter => vec![Some(self.pool_select(gy, b)?), None],
            OpKind::Concat(axis) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for (k, &p) in inputs.iter().enumerate() {
                    let len = self.shape(p)[axis];
                    out.push(if want(k) {
                        Some(self.slice(gy, axis, start, len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                out
            }
            OpKind::Slice { axis, start } => {
                let s = shape_of(self, a);
                vec![Some(self.pad_axis(gy, &s, axis, start)?)]
            }
            OpKind::PadAxis { axis, start } => {
                let len = self.shape(a)[axis];
                vec![Some(self.slice(gy, axis, start, len)?)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;

    #[test]
    fn power_rule() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.gradient(y, &[x]).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.scalar(4.0);
        let y = g.exp(c).unwrap();
        let gx = g.gradient(y, &[x]).unwrap();
        assert_eq!(gx[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.exp(x).unwrap();
        assert!(matches!(g.gradient(y, &[x]), Err(TensorError::NonScalarOutput(_))));
    }

    #[test]
    fn unknown_wrt_rejected() {
        let mut g = Graph::new();
        let x = g.scalar(1.0);
        let y = g.exp(x).unwrap();
        assert_eq!(g.gradient(y, &[NodeId(99)]).unwrap_err(), TensorError::UnknownNode(99));
    }

    #[test]
    fn non_retained_pass_leaves_graph_size_unchanged() {
        let mut g = Graph::new();
        let x = g.scalar(2.0);
        let y = g.exp(x).unwrap();
        let before = g.len();
        g.gradient(y, &[x]).unwrap();
        assert_eq!(g.len(), before);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.scalar(2.0);
        let y = g.pow(x, 3.0).unwrap();
        let dy = g.gradient_retained(y, &[x]).unwrap();
        assert_eq!(g.value(dy[0]).unwrap().item(), 12.0);
        let d2 = g.gradient_of_gradient(dy[0], &dy, &[x]).unwrap();
        assert_eq!(d2[0].item(), 12.0);
    }

    #[test]
    fn mixed_partial_of_product() {
        let mut g = Graph::new();
        let x = g.scalar(1.5);
        let y = g.scalar(-0.7);
        let f = g.mul(x, y).unwrap();
        let dx = g.gradient_retained(f, &[x]).unwrap();
        let dxy = g.gradient_of_gradient(dx[0], &dx, &[y]).unwrap();
        assert_eq!(dxy[0].item(), 1.0);
    }

    #[test]
    fn gradient_of_gradient_requires_retained_pass() {
        let mut g = Graph::new();
        let x = g.scalar(1.5);
        let y = g.mul(x, x).unwrap();
        let fake = g.scale(y, 2.0).unwrap();
        assert_eq!(
            g.gradient_of_gradient(fake, &[fake], &[x]).unwrap_err(),
            TensorError::NotReplayable(fake.0)
        );
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let s = g.stop_grad(x).unwrap();
        let y = g.mul(s, x).unwrap();
        assert_eq!(g.gradient(y, &[x]).unwrap()[0].item(), 3.0);
    }

    #[test]
    fn conv_second_order_wrt_weights_and_input() {
        // f = sum(conv(x, w)^2); check d/dx of (df/dw · v) against p = df/dw·v
        // evaluated by finite differences in x.
        let spec = ConvSpec { stride: 2, pad: 1 };
        let xs = [1, 4, 4, 2];
        let ws = [3, 3, 2, 2];
        let xv: Vec<f64> = (0..32).map(|i| ((i as f64) * 0.37).sin()).collect();
        let wv: Vec<f64> = (0..36).map(|i| ((i as f64) * 0.71).cos()).collect();
        let vv: Vec<f64> = (0..36).map(|i| ((i as f64) * 0.13).sin()).collect();
        let directional = |x: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(xs.to_vec(), x.to_vec()).unwrap());
            let w = g.leaf(Tensor::new(ws.to_vec(), wv.clone()).unwrap());
            let y = g.conv2d(x, w, spec).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let f = g.sum(y2).unwrap();
            let gw = g.gradient(f, &[w]).unwrap().remove(0);
            gw.data().iter().zip(&vv).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(xs.to_vec(), xv.clone()).unwrap());
        let w = g.leaf(Tensor::new(ws.to_vec(), wv.clone()).unwrap());
        let v = g.leaf(Tensor::new(ws.to_vec(), vv.clone()).unwrap());
        let y = g.conv2d(x, w, spec).unwrap();
        let y2 = g.mul(y, y).unwrap();
        let f = g.sum(y2).unwrap();
        let gw = g.gradient_retained(f, &[w]).unwrap();
        let p = g.mul(gw[0], v).unwrap();
        let p = g.sum(p).unwrap();
        let hx = g.gradient_of_gradient(p, &gw, &[x]).unwrap().remove(0);
        let h = 1e-5;
        for i in 0..xv.len() {
            let mut up = xv.clone();
            up[i] += h;
            let mut dn = xv.clone();
            dn[i] -= h;
            let fd = (directional(&up) - directional(&dn)) / (2.0 * h);
            assert!(
                (fd - hx.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "i={i}: {fd} vs {}",
                hx.data()[i]
            );
        }
    }
}
