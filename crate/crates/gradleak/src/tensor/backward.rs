//! Per-op backward rules.
//!
//! Every rule is written in terms of the public op set, so when the graph is
//! recording (`create_graph`) the produced gradients are differentiable again.
//! `wanted[i]` gates which input gradients are materialized.

use super::{Graph, NodeId, Op, Tensor};
use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

pub(super) fn input_gradients(
    graph: &Graph,
    id: NodeId,
    op: &Op,
    inputs: &[NodeId],
    up: &Tensor,
    wanted: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let input = |i: usize| graph.tensor_handle(inputs[i]);
    let output = || graph.tensor_handle(id);
    let pair = |a: Result<Tensor>, b: Result<Tensor>, wanted: &[bool]| -> Result<Vec<Option<Tensor>>> {
        Ok(vec![
            if wanted[0] { Some(a?) } else { None },
            if wanted[1] { Some(b?) } else { None },
        ])
    };
    let single = |g: Result<Tensor>, wanted: &[bool]| -> Result<Vec<Option<Tensor>>> {
        Ok(vec![if wanted[0] { Some(g?) } else { None }])
    };

    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => pair(Ok(up.clone()), Ok(up.clone()), wanted),
        Op::Sub => pair(Ok(up.clone()), up.neg(), wanted),
        Op::Mul => pair(up.mul(&input(1)), up.mul(&input(0)), wanted),
        Op::Div => {
            // d(a/b)/da = 1/b ; d(a/b)/db = -y/b
            let b = input(1);
            pair(
                up.div(&b),
                up.mul(&output())?.div(&b)?.neg(),
                wanted,
            )
        }
        Op::Neg => single(up.neg(), wanted),
        Op::AddScalar => single(Ok(up.clone()), wanted),
        Op::Scale(c) => single(up.scale(*c), wanted),
        Op::Relu => {
            let mask = input(0).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            single(up.mul(&Tensor::from_data(mask)), wanted)
        }
        Op::Sigmoid => {
            let y = output();
            single(up.mul(&y)?.mul(&y.neg()?.add_scalar(1.0)?), wanted)
        }
        Op::Tanh => {
            let y = output();
            single(up.mul(&y.mul(&y)?.neg()?.add_scalar(1.0)?), wanted)
        }
        Op::Exp => single(up.mul(&output()), wanted),
        Op::Log => single(up.div(&input(0)), wanted),
        Op::Sqrt => single(up.scale(0.5)?.div(&output()), wanted),
        Op::Abs => {
            let sign = input(0).map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            single(up.mul(&Tensor::from_data(sign)), wanted)
        }
        Op::Matmul => {
            let (a, b) = (input(0), input(1));
            pair(
                up.matmul_nt(&b),
                a.transpose()?.matmul(up),
                wanted,
            )
        }
        Op::MatmulNT => {
            // y = a @ b^T: da = g @ b, db = g^T @ a.
            let (a, b) = (input(0), input(1));
            pair(up.matmul(&b), up.transpose()?.matmul(&a), wanted)
        }
        Op::Transpose => single(up.transpose(), wanted),
        Op::Reshape { from } => single(up.reshape(from), wanted),
        Op::SumAll => single(up.broadcast_scalar(input(0).shape()), wanted),
        Op::BroadcastScalar => single(up.sum_all()?.reshape(input(0).shape()), wanted),
        Op::SumAxis0 => single(up.repeat_axis0(input(0).shape()[0]), wanted),
        Op::RepeatAxis0 => single(up.sum_axis0(), wanted),
        Op::SumAxis1 => single(up.repeat_axis1(input(0).shape()[1]), wanted),
        Op::RepeatAxis1 => single(up.sum_axis1(), wanted),
        Op::SumChannels => single(up.broadcast_channels(input(0).shape()), wanted),
        Op::BroadcastChannels => single(up.sum_channels(), wanted),
        Op::AvgPool2d { k } => single(up.avg_unpool2d(*k), wanted),
        Op::AvgUnpool2d { k } => single(up.avg_pool2d(*k), wanted),
        Op::Conv2d { stride, pad } => {
            let (x, w) = (input(0), input(1));
            let input_hw = (x.shape()[2], x.shape()[3]);
            let kernel_hw = (w.shape()[2], w.shape()[3]);
            pair(
                up.conv2d_grad_input(&w, *stride, *pad, input_hw),
                x.conv2d_grad_weight(up, *stride, *pad, kernel_hw),
                wanted,
            )
        }
        Op::ConvGradInput { stride, pad } => {
            // Node computed gx(u, w); its output is input-shaped. Upstream s:
            // du = conv(s, w), dw = gw(s, u).
            let (u, w) = (input(0), input(1));
            let kernel_hw = (w.shape()[2], w.shape()[3]);
            pair(
                up.conv2d(&w, *stride, *pad),
                up.conv2d_grad_weight(&u, *stride, *pad, kernel_hw),
                wanted,
            )
        }
        Op::ConvGradWeight { stride, pad } => {
            // Node computed gw(x, u); output is weight-shaped. Upstream t:
            // dx = gx(u, t), du = conv(x, t).
            let (x, u) = (input(0), input(1));
            let input_hw = (x.shape()[2], x.shape()[3]);
            pair(
                u.conv2d_grad_input(up, *stride, *pad, input_hw),
                x.conv2d(up, *stride, *pad),
                wanted,
            )
        }
        Op::DiffRows => single(up.diff_rows_adjoint(), wanted),
        Op::DiffRowsAdjoint => single(up.diff_rows(), wanted),
        Op::DiffCols => single(up.diff_cols_adjoint(), wanted),
        Op::DiffColsAdjoint => single(up.diff_cols(), wanted),
    }
}

